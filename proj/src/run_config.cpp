#include "cmegrpo/run_config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "cmegrpo/checkpoint.hpp"
#include "cmegrpo/errors.hpp"

namespace cmegrpo {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Reads one JSON object, remembering which keys were consumed so that
// anything left over can be reported.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) fail(where_, "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) fail(path(key), "missing required key");
    return j_.at(key);
  }

  std::string string(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_string()) fail(path(key), "expected a string");
    return v.get<std::string>();
  }
  std::string string(const std::string& key, std::string fallback) {
    return has(key) ? string(key) : (seen_.insert(key), fallback);
  }

  std::uint64_t unsigned_int(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      fail(path(key), "expected a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }
  std::uint64_t unsigned_int(const std::string& key, std::uint64_t fallback) {
    return has(key) ? unsigned_int(key) : (seen_.insert(key), fallback);
  }

  double number(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_number()) fail(path(key), "expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) fail(path(key), "expected a finite number");
    return x;
  }
  double number(const std::string& key, double fallback) {
    return has(key) ? number(key) : (seen_.insert(key), fallback);
  }

  bool boolean(const std::string& key, bool fallback) {
    seen_.insert(key);
    if (!has(key)) return fallback;
    const json& v = j_.at(key);
    if (!v.is_boolean()) fail(path(key), "expected true or false");
    return v.get<bool>();
  }

  std::string path(const std::string& key) const {
    return where_.empty() ? key : where_ + "." + key;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) fail(path(key), "unknown key");
    }
  }

  [[noreturn]] static void fail(const std::string& where, const std::string& what) {
    throw DomainError("config " + (where.empty() ? std::string("root") : "'" + where + "'") +
                      ": " + what);
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& where, const std::string& what) {
  if (!ok) ObjectReader::fail(where, what);
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

TokenizerSpec parse_tokenizer(const json& j, const std::string& where, const fs::path& base) {
  ObjectReader r(j, where);
  TokenizerSpec spec;
  spec.kind = r.string("kind", "char");
  spec.alphabet = r.string("alphabet", "");
  if (spec.kind == "merge") {
    const bool inline_merges = r.has("merges");
    const bool file_merges = r.has("merges_path");
    require(inline_merges != file_merges, where,
            "a merge tokenizer needs exactly one of 'merges' or 'merges_path'");
    if (inline_merges) {
      const json& list = r.raw("merges");
      require(list.is_array(), r.path("merges"), "expected an array of [left, right] pairs");
      for (const auto& m : list) {
        require(m.is_array() && m.size() == 2 && m[0].is_string() && m[1].is_string(),
                r.path("merges"), "expected an array of [left, right] pairs");
        spec.merges.push_back(
            {utf8_decode(m[0].get<std::string>()), utf8_decode(m[1].get<std::string>())});
      }
    } else {
      spec.merges_path = resolve(base, r.string("merges_path"));
    }
  } else if (spec.kind != "char") {
    ObjectReader::fail(r.path("kind"), "expected 'char' or 'merge', got '" + spec.kind + "'");
  }
  r.finish();
  return spec;
}

ModelSpec parse_model(const json& j, const std::string& where, const fs::path& base) {
  ObjectReader r(j, where);
  ModelSpec spec;
  spec.kind = r.string("kind");
  auto tokenizer = [&] {
    spec.tokenizer =
        r.has("tokenizer") ? parse_tokenizer(r.raw("tokenizer"), r.path("tokenizer"), base)
                           : TokenizerSpec{};
  };
  if (spec.kind == "file") {
    spec.path = resolve(base, r.string("path"));
  } else if (spec.kind == "neural") {
    tokenizer();
    spec.neural.window = r.unsigned_int("window", spec.neural.window);
    spec.neural.embed = r.unsigned_int("embed", spec.neural.embed);
    spec.neural.hidden = r.unsigned_int("hidden", spec.neural.hidden);
    require(spec.neural.window > 0 && spec.neural.embed > 0 && spec.neural.hidden > 0, where,
            "window, embed and hidden must be positive");
    spec.init_scale = r.number("init_scale", spec.init_scale);
    require(spec.init_scale >= 0.0, r.path("init_scale"), "must be non-negative");
    spec.init_seed = r.unsigned_int("init_seed", 0);
  } else if (spec.kind == "count") {
    tokenizer();
    spec.order = r.unsigned_int("order", spec.order);
    require(spec.order >= 1, r.path("order"), "must be at least 1");
    spec.alpha = r.number("alpha", spec.alpha);
    require(spec.alpha > 0.0, r.path("alpha"), "must be positive");
    spec.count_end = r.boolean("count_end", true);
    ObjectReader c(r.raw("corpus"), r.path("corpus"));
    if (c.has("path")) {
      spec.corpus.path = resolve(base, c.string("path"));
    } else {
      spec.corpus.gold_samples = c.unsigned_int("gold_samples");
      require(spec.corpus.gold_samples > 0, c.path("gold_samples"), "must be positive");
      spec.corpus.max_len = c.unsigned_int("max_len", spec.corpus.max_len);
      spec.corpus.seed = c.unsigned_int("seed", 0);
    }
    c.finish();
  } else if (spec.kind == "grammar") {
    tokenizer();
  } else if (spec.kind == "uniform") {
    tokenizer();
    spec.eos = r.boolean("eos", true);
  } else {
    ObjectReader::fail(r.path("kind"), "unknown model kind '" + spec.kind + "'");
  }
  r.finish();
  return spec;
}

TrainConfig parse_train(const json& j, const std::string& where) {
  ObjectReader r(j, where);
  TrainConfig cfg;
  cfg.grpo.group_size = r.unsigned_int("group_size", cfg.grpo.group_size);
  require(cfg.grpo.group_size >= 2, r.path("group_size"), "must be at least 2");
  cfg.grpo.clip_eps = r.number("clip_eps", cfg.grpo.clip_eps);
  require(cfg.grpo.clip_eps > 0.0, r.path("clip_eps"), "must be positive");
  cfg.grpo.kl_beta = r.number("kl_beta", cfg.grpo.kl_beta);
  require(cfg.grpo.kl_beta >= 0.0, r.path("kl_beta"), "must be non-negative");
  cfg.sampler.temperature = r.number("temperature", cfg.sampler.temperature);
  require(cfg.sampler.temperature > 0.0, r.path("temperature"), "must be positive");
  cfg.sampler.max_len = r.unsigned_int("max_len", cfg.sampler.max_len);
  require(cfg.sampler.max_len >= 1, r.path("max_len"), "must be at least 1");
  try {
    cfg.reward_mode = parse_reward_mode(r.string("reward_mode", to_string(cfg.reward_mode)));
    cfg.optimizer = parse_optimizer(r.string("optimizer", to_string(cfg.optimizer)));
  } catch (const DomainError& e) {
    ObjectReader::fail(where, e.what());
  }
  cfg.step_size = r.number("step_size", cfg.step_size);
  require(cfg.step_size > 0.0, r.path("step_size"), "must be positive");
  cfg.grad_clip = r.number("grad_clip", cfg.grad_clip);
  require(cfg.grad_clip >= 0.0, r.path("grad_clip"), "must be non-negative");
  cfg.steps = r.unsigned_int("steps", cfg.steps);
  cfg.eval_every = r.unsigned_int("eval_every", cfg.eval_every);
  cfg.checkpoint_every = r.unsigned_int("checkpoint_every", cfg.checkpoint_every);
  if (r.has("eval")) {
    ObjectReader e(r.raw("eval"), r.path("eval"));
    cfg.eval.budget = e.unsigned_int("budget", cfg.eval.budget);
    cfg.eval.sampled_fallback = e.boolean("sampled_fallback", cfg.eval.sampled_fallback);
    cfg.eval.samples = e.unsigned_int("samples", cfg.eval.samples);
    require(cfg.eval.samples > 0, e.path("samples"), "must be positive");
    e.finish();
  }
  r.finish();
  return cfg;
}

json tokenizer_spec_json(const TokenizerSpec& spec) {
  json j{{"kind", spec.kind}, {"alphabet", spec.alphabet}};
  if (spec.kind == "merge") {
    if (spec.merges_path) {
      j["merges_path"] = spec.merges_path->string();
    } else {
      json merges = json::array();
      for (const auto& m : spec.merges) merges.push_back({utf8_encode(m.left), utf8_encode(m.right)});
      j["merges"] = merges;
    }
  }
  return j;
}

json model_spec_json(const ModelSpec& spec) {
  json j{{"kind", spec.kind}};
  if (spec.kind == "file") {
    j["path"] = spec.path.string();
    return j;
  }
  j["tokenizer"] = tokenizer_spec_json(spec.tokenizer);
  if (spec.kind == "neural") {
    j["window"] = spec.neural.window;
    j["embed"] = spec.neural.embed;
    j["hidden"] = spec.neural.hidden;
    j["init_scale"] = spec.init_scale;
    j["init_seed"] = spec.init_seed;
  } else if (spec.kind == "count") {
    j["order"] = spec.order;
    j["alpha"] = spec.alpha;
    j["count_end"] = spec.count_end;
    if (spec.corpus.path) {
      j["corpus"] = {{"path", spec.corpus.path->string()}};
    } else {
      j["corpus"] = {{"gold_samples", spec.corpus.gold_samples},
                     {"max_len", spec.corpus.max_len},
                     {"seed", spec.corpus.seed}};
    }
  } else if (spec.kind == "uniform") {
    j["eos"] = spec.eos;
  }
  return j;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DomainError("cannot open corpus file " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

}  // namespace

RunConfig parse_run_config(const json& j, const fs::path& base_dir) {
  ObjectReader r(j, "");
  RunConfig cfg;
  cfg.generator = parse_model(r.raw("generator"), "generator", base_dir);
  if (r.has("verifier")) cfg.verifier = parse_model(r.raw("verifier"), "verifier", base_dir);
  if (r.has("gold")) cfg.gold = parse_model(r.raw("gold"), "gold", base_dir);
  cfg.train = r.has("train") ? parse_train(r.raw("train"), "train") : TrainConfig{};
  cfg.train.seed = r.unsigned_int("seed", 0);
  cfg.train.eval.seed = cfg.train.seed;

  const json& prompts = r.raw("prompts");
  require(prompts.is_array() && !prompts.empty(), "prompts", "expected a non-empty array of strings");
  for (const auto& p : prompts) {
    require(p.is_string(), "prompts", "expected a non-empty array of strings");
    cfg.prompts.push_back(p.get<std::string>());
  }
  cfg.output_dir = r.string("output_dir", "run");

  if (r.has("sweep")) {
    ObjectReader s(r.raw("sweep"), "sweep");
    SweepSpec sweep;
    sweep.replicates = s.unsigned_int("replicates", 1);
    require(sweep.replicates >= 1, s.path("replicates"), "must be at least 1");
    sweep.heldout_samples = s.unsigned_int("heldout_samples", 0);
    sweep.heldout_seed = s.unsigned_int("heldout_seed", 0);
    const json& list = s.raw("conditions");
    require(list.is_array() && !list.empty(), s.path("conditions"), "expected a non-empty array");
    std::set<std::string> names;
    for (std::size_t k = 0; k < list.size(); ++k) {
      const std::string where = s.path("conditions") + "[" + std::to_string(k) + "]";
      ObjectReader c(list[k], where);
      SweepConditionSpec cond;
      cond.name = c.string("name");
      require(!cond.name.empty() && cond.name.find_first_of(",\"\n") == std::string::npos,
              c.path("name"), "names must be non-empty and free of commas, quotes and newlines");
      require(names.insert(cond.name).second, c.path("name"), "duplicate condition name");
      cond.verifier = parse_model(c.raw("verifier"), c.path("verifier"), base_dir);
      c.finish();
      sweep.conditions.push_back(std::move(cond));
    }
    s.finish();
    cfg.sweep = std::move(sweep);
  }
  r.finish();
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DomainError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DomainError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

json run_config_to_json(const RunConfig& config) {
  const TrainConfig& t = config.train;
  json j;
  j["generator"] = model_spec_json(config.generator);
  if (config.verifier) j["verifier"] = model_spec_json(*config.verifier);
  if (config.gold) j["gold"] = model_spec_json(*config.gold);
  j["train"] = {{"group_size", t.grpo.group_size},
                {"clip_eps", t.grpo.clip_eps},
                {"kl_beta", t.grpo.kl_beta},
                {"temperature", t.sampler.temperature},
                {"max_len", t.sampler.max_len},
                {"reward_mode", to_string(t.reward_mode)},
                {"optimizer", to_string(t.optimizer)},
                {"step_size", t.step_size},
                {"grad_clip", t.grad_clip},
                {"steps", t.steps},
                {"eval_every", t.eval_every},
                {"checkpoint_every", t.checkpoint_every},
                {"eval",
                 {{"budget", t.eval.budget},
                  {"sampled_fallback", t.eval.sampled_fallback},
                  {"samples", t.eval.samples}}}};
  j["seed"] = t.seed;
  j["prompts"] = config.prompts;
  j["output_dir"] = config.output_dir.string();
  if (config.sweep) {
    json conditions = json::array();
    for (const auto& c : config.sweep->conditions) {
      conditions.push_back({{"name", c.name}, {"verifier", model_spec_json(c.verifier)}});
    }
    j["sweep"] = {{"replicates", config.sweep->replicates},
                  {"heldout_samples", config.sweep->heldout_samples},
                  {"heldout_seed", config.sweep->heldout_seed},
                  {"conditions", conditions}};
  }
  return j;
}

Tokenizer build_tokenizer(const TokenizerSpec& spec) {
  Alphabet alphabet = spec.alphabet.empty() ? Alphabet() : Alphabet::from_utf8(spec.alphabet);
  if (spec.kind == "char") return Tokenizer(std::move(alphabet));
  MergeTable merges = spec.merges_path ? load_merge_table(*spec.merges_path) : spec.merges;
  return Tokenizer(std::move(alphabet), std::move(merges));
}

std::unique_ptr<LanguageModel> build_model(const ModelSpec& spec, const LanguageModel* gold) {
  if (spec.kind == "file") return load_model(spec.path);
  if (spec.kind == "neural") return std::make_unique<TinyNeuralLM>(build_generator(spec));
  Tokenizer tokenizer = build_tokenizer(spec.tokenizer);
  if (spec.kind == "grammar") return std::make_unique<CountLM>(synthetic_grammar(tokenizer));
  if (spec.kind == "uniform") return std::make_unique<UniformLM>(std::move(tokenizer), spec.eos);
  if (spec.kind == "count") {
    std::vector<std::string> corpus;
    if (spec.corpus.path) {
      corpus = read_lines(*spec.corpus.path);
    } else {
      if (gold == nullptr) throw DomainError("a count model fit on gold samples needs a 'gold' model");
      corpus = sample_corpus(*gold, spec.corpus.gold_samples, spec.corpus.max_len, spec.corpus.seed);
    }
    return std::make_unique<CountLM>(
        fit_count_lm(tokenizer, corpus, spec.order, spec.alpha, CountFitOptions{spec.count_end}));
  }
  throw DomainError("unknown model kind '" + spec.kind + "'");
}

TinyNeuralLM build_generator(const ModelSpec& spec) {
  if (spec.kind == "file") return neural_from_json([&] {
      std::ifstream in(spec.path);
      if (!in) throw DomainError("cannot open model file " + spec.path.string());
      try {
        return json::parse(in);
      } catch (const json::parse_error& e) {
        throw DomainError("model file " + spec.path.string() + " is not valid JSON: " + e.what());
      }
    }());
  if (spec.kind != "neural") {
    throw DomainError("the generator must be a neural model, got kind '" + spec.kind + "'");
  }
  return TinyNeuralLM::random(build_tokenizer(spec.tokenizer), spec.neural, spec.init_scale,
                              spec.init_seed);
}

RunModels build_run_models(const RunConfig& config, bool for_sweep) {
  RunModels models{build_generator(config.generator), nullptr, nullptr, {}, {}};
  if (config.gold) models.gold = build_model(*config.gold, nullptr);
  const LanguageModel* gold = models.gold.get();
  if (for_sweep) {
    if (!config.sweep) throw DomainError("config has no 'sweep' section");
    if (!gold) throw DomainError("a sweep needs a 'gold' model");
    for (const auto& c : config.sweep->conditions) {
      models.conditions.push_back({c.name, build_model(c.verifier, gold)});
    }
    if (config.sweep->heldout_samples > 0) {
      models.heldout = sample_corpus(*gold, config.sweep->heldout_samples, 12,
                                     config.sweep->heldout_seed);
    }
  } else {
    if (!config.verifier) throw DomainError("config has no 'verifier' model");
    models.verifier = build_model(*config.verifier, gold);
  }

  // Every prompt must be expressible by every model that conditions on it.
  auto check_prompts = [&](const LanguageModel& m, const std::string& role) {
    for (const auto& p : config.prompts) {
      try {
        m.tokenizer().encode(p);
      } catch (const DomainError& e) {
        throw DomainError("prompt '" + p + "' cannot be encoded for the " + role + ": " + e.what());
      }
    }
  };
  check_prompts(models.generator, "generator");
  if (models.verifier) check_prompts(*models.verifier, "verifier");
  if (gold) check_prompts(*gold, "gold model");
  for (const auto& c : models.conditions) check_prompts(*c.verifier, "verifier '" + c.name + "'");
  return models;
}

}  // namespace cmegrpo
