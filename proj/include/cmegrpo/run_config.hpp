#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cmegrpo/language_model.hpp"
#include "cmegrpo/text_spans.hpp"
#include "cmegrpo/trainer.hpp"

namespace cmegrpo {

struct TokenizerSpec {
  std::string kind = "char";  // char | merge
  std::string alphabet;       // empty: default alphabet
  MergeTable merges;
  std::optional<std::filesystem::path> merges_path;
};

struct CorpusSpec {
  std::optional<std::filesystem::path> path;  // one text per line
  std::size_t gold_samples = 0;
  std::size_t max_len = 12;
  std::uint64_t seed = 0;
};

struct ModelSpec {
  std::string kind;  // file | neural | count | grammar | uniform
  std::filesystem::path path;
  TokenizerSpec tokenizer;
  NeuralConfig neural;
  double init_scale = 0.1;
  std::uint64_t init_seed = 0;
  std::size_t order = 3;
  double alpha = 0.1;
  bool count_end = true;
  CorpusSpec corpus;
  bool eos = true;
};

struct SweepConditionSpec {
  std::string name;
  ModelSpec verifier;
};

struct SweepSpec {
  std::size_t replicates = 1;
  std::size_t heldout_samples = 0;
  std::uint64_t heldout_seed = 0;
  std::vector<SweepConditionSpec> conditions;
};

struct RunConfig {
  ModelSpec generator;
  std::optional<ModelSpec> verifier;
  std::optional<ModelSpec> gold;
  TrainConfig train;
  std::vector<std::string> prompts;
  std::filesystem::path output_dir;
  std::optional<SweepSpec> sweep;
};

// Strict parse: unknown keys, wrong types and out-of-range values raise
// DomainError naming the offending key. Relative paths inside the document
// resolve against `base_dir`.
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

// Canonical form with every field spelled out; parse_run_config accepts it.
nlohmann::json run_config_to_json(const RunConfig& config);

Tokenizer build_tokenizer(const TokenizerSpec& spec);

// `gold` is required for count models fit on gold samples.
std::unique_ptr<LanguageModel> build_model(const ModelSpec& spec, const LanguageModel* gold);
TinyNeuralLM build_generator(const ModelSpec& spec);

// All models of a run, built and cross-checked before anything is written.
struct RunModels {
  TinyNeuralLM generator;
  std::shared_ptr<const LanguageModel> verifier;
  std::shared_ptr<const LanguageModel> gold;
  std::vector<SweepCondition> conditions;
  std::vector<std::string> heldout;
};

RunModels build_run_models(const RunConfig& config, bool for_sweep);

}  // namespace cmegrpo
