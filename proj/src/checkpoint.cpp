#include "cmegrpo/checkpoint.hpp"

#include <fstream>

#include "cmegrpo/errors.hpp"

namespace cmegrpo {

using nlohmann::json;

json tokenizer_to_json(const Tokenizer& tokenizer) {
  json merges = json::array();
  for (const auto& m : tokenizer.merges()) {
    merges.push_back({utf8_encode(m.left), utf8_encode(m.right)});
  }
  return {{"alphabet", tokenizer.alphabet().to_utf8()}, {"merges", std::move(merges)}};
}

Tokenizer tokenizer_from_json(const json& j) {
  try {
    MergeTable merges;
    for (const auto& m : j.at("merges")) {
      if (!m.is_array() || m.size() != 2) throw DomainError("each merge must be a [left, right] pair");
      merges.push_back({utf8_decode(m[0].get<std::string>()), utf8_decode(m[1].get<std::string>())});
    }
    return Tokenizer(Alphabet::from_utf8(j.at("alphabet").get<std::string>()), std::move(merges));
  } catch (const json::exception& e) {
    throw DomainError(std::string("malformed tokenizer: ") + e.what());
  }
}

json model_to_json(const LanguageModel& model) {
  if (const auto* count = dynamic_cast<const CountLM*>(&model)) {
    json counts = json::array();
    for (const auto& [context, row] : count->counts()) {
      counts.push_back({{"context", context}, {"counts", row}});
    }
    return {{"version", kCheckpointVersion},
            {"kind", "count"},
            {"tokenizer", tokenizer_to_json(count->tokenizer())},
            {"config", {{"order", count->order()}, {"alpha", count->alpha()}}},
            {"counts", std::move(counts)}};
  }
  if (const auto* neural = dynamic_cast<const TinyNeuralLM*>(&model)) {
    const auto params = neural->parameters();
    return {{"version", kCheckpointVersion},
            {"kind", "neural"},
            {"tokenizer", tokenizer_to_json(neural->tokenizer())},
            {"config",
             {{"window", neural->config().window},
              {"embed", neural->config().embed},
              {"hidden", neural->config().hidden}}},
            {"params", std::vector<double>(params.begin(), params.end())}};
  }
  throw DomainError("only count and neural models can be serialized");
}

namespace {

void check_header(const json& j) {
  if (!j.is_object()) throw DomainError("model file must hold a JSON object");
  if (!j.contains("version")) throw DomainError("model file has no version field");
  if (j.at("version") != kCheckpointVersion) {
    throw DomainError("unsupported model file version " + j.at("version").dump());
  }
}

}  // namespace

TinyNeuralLM neural_from_json(const json& j) {
  check_header(j);
  try {
    if (j.at("kind") != "neural") throw DomainError("model file does not hold a neural model");
    const json& c = j.at("config");
    NeuralConfig config{c.at("window").get<std::size_t>(), c.at("embed").get<std::size_t>(),
                        c.at("hidden").get<std::size_t>()};
    return TinyNeuralLM(tokenizer_from_json(j.at("tokenizer")), config,
                        j.at("params").get<std::vector<double>>());
  } catch (const json::exception& e) {
    throw DomainError(std::string("malformed neural model: ") + e.what());
  }
}

std::unique_ptr<LanguageModel> model_from_json(const json& j) {
  check_header(j);
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "neural") return std::make_unique<TinyNeuralLM>(neural_from_json(j));
    if (kind != "count") throw DomainError("unknown model kind '" + kind + "'");
    std::map<CountLM::Context, std::vector<double>> counts;
    for (const auto& entry : j.at("counts")) {
      counts.emplace(entry.at("context").get<CountLM::Context>(),
                     entry.at("counts").get<std::vector<double>>());
    }
    const json& c = j.at("config");
    return std::make_unique<CountLM>(tokenizer_from_json(j.at("tokenizer")),
                                     c.at("order").get<std::size_t>(), c.at("alpha").get<double>(),
                                     std::move(counts));
  } catch (const json::exception& e) {
    throw DomainError(std::string("malformed count model: ") + e.what());
  }
}

void save_model(const std::filesystem::path& path, const LanguageModel& model) {
  std::ofstream out(path);
  if (!out) throw DomainError("cannot write model file " + path.string());
  out << model_to_json(model).dump() << '\n';
}

std::unique_ptr<LanguageModel> load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DomainError("cannot read model file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DomainError("model file " + path.string() + " is not valid JSON: " + e.what());
  }
  return model_from_json(j);
}

}  // namespace cmegrpo
