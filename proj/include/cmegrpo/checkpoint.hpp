#pragma once

#include <filesystem>
#include <memory>

#include "cmegrpo/language_model.hpp"
#include "json.hpp"

namespace cmegrpo {

inline constexpr int kCheckpointVersion = 1;

nlohmann::json tokenizer_to_json(const Tokenizer& tokenizer);
Tokenizer tokenizer_from_json(const nlohmann::json& j);

// {"version":1,"kind":"count"|"neural","tokenizer":{...},"config":{...},
//  "counts":[...] | "params":[...]}
nlohmann::json model_to_json(const LanguageModel& model);
std::unique_ptr<LanguageModel> model_from_json(const nlohmann::json& j);
TinyNeuralLM neural_from_json(const nlohmann::json& j);

void save_model(const std::filesystem::path& path, const LanguageModel& model);
std::unique_ptr<LanguageModel> load_model(const std::filesystem::path& path);

}  // namespace cmegrpo
