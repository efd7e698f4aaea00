#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "cmegrpo/alignment.hpp"
#include "cmegrpo/language_model.hpp"
#include "cmegrpo/text_spans.hpp"

namespace cmegrpo::testing {

// A model defined by an arbitrary function of the context.
class TableLM final : public LanguageModel {
 public:
  using Fn = std::function<void(std::span<const TokenId>, std::span<double>)>;

  TableLM(Tokenizer tokenizer, bool with_eos, Fn fn)
      : tokenizer_(std::move(tokenizer)),
        vocab_(tokenizer_.vocab_size() + (with_eos ? 1 : 0)),
        with_eos_(with_eos),
        fn_(std::move(fn)) {}

  const Tokenizer& tokenizer() const override { return tokenizer_; }
  std::size_t vocab_size() const override { return vocab_; }
  std::optional<TokenId> eos() const override {
    if (!with_eos_) return std::nullopt;
    return static_cast<TokenId>(vocab_ - 1);
  }
  void distribution(std::span<const TokenId> context, std::span<double> out) const override {
    fn_(context, out);
  }
  std::unique_ptr<LanguageModel> clone() const override {
    return std::make_unique<TableLM>(*this);
  }

 private:
  Tokenizer tokenizer_;
  std::size_t vocab_;
  bool with_eos_;
  Fn fn_;
};

// Always emits `chain` token by token, then EOS (or the chain repeated when the
// model has no EOS).
inline TableLM chain_model(const Tokenizer& tok, std::vector<TokenId> chain, bool with_eos,
                           std::size_t prompt_len) {
  return TableLM(tok, with_eos, [=](std::span<const TokenId> ctx, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    const std::size_t k = ctx.size() - prompt_len;
    if (k < chain.size()) {
      out[static_cast<std::size_t>(chain[k])] = 1.0;
    } else if (with_eos) {
      out[out.size() - 1] = 1.0;
    } else {
      out[static_cast<std::size_t>(chain[k % chain.size()])] = 1.0;
    }
  });
}

// A fixed random categorical per context (hashing the context), positive
// everywhere.
inline TableLM random_table_model(const Tokenizer& tok, bool with_eos, std::uint64_t seed,
                                  double peak = 1.0) {
  return TableLM(tok, with_eos, [=](std::span<const TokenId> ctx, std::span<double> out) {
    std::uint64_t h = seed * 0x9E3779B97F4A7C15ull + 0x632BE59BD9B4E019ull;
    for (TokenId t : ctx) h = (h ^ static_cast<std::uint64_t>(t + 7)) * 0x100000001B3ull;
    std::mt19937_64 rng(h);
    std::exponential_distribution<double> e(1.0);
    double sum = 0.0;
    for (auto& v : out) {
      v = std::pow(e(rng) + 1e-3, peak);
      sum += v;
    }
    for (auto& v : out) v /= sum;
  });
}

inline std::u32string random_text(std::mt19937_64& rng, const Alphabet& alphabet,
                                  std::size_t min_len, std::size_t max_len) {
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
  std::u32string s(len(rng), U' ');
  for (auto& c : s) c = alphabet.chars()[pick(rng)];
  return s;
}

// Random partition of [0, n) into contiguous spans. Ids are arbitrary.
inline TokenizedText random_segmentation(std::mt19937_64& rng, const std::u32string& text,
                                         double cut_probability) {
  TokenizedText out;
  out.text = text;
  std::bernoulli_distribution cut(cut_probability);
  std::size_t start = 0;
  for (std::size_t k = 1; k <= text.size(); ++k) {
    if (k == text.size() || cut(rng)) {
      out.tokens.push_back({static_cast<TokenId>(out.tokens.size()), {start, k}});
      start = k;
    }
  }
  return out;
}

// Coarsening of `fine`: consecutive tokens merged at random.
inline TokenizedText coarsen(std::mt19937_64& rng, const TokenizedText& fine, double keep_cut) {
  TokenizedText out;
  out.text = fine.text;
  std::bernoulli_distribution cut(keep_cut);
  for (std::size_t k = 0; k < fine.tokens.size(); ++k) {
    if (out.tokens.empty() || cut(rng)) {
      out.tokens.push_back({static_cast<TokenId>(out.tokens.size()), fine.tokens[k].span});
    } else {
      out.tokens.back().span.end = fine.tokens[k].span.end;
    }
  }
  return out;
}

// O(T * S) reference: intersect every pair of spans character by character.
inline std::vector<AlignmentEntry> brute_force_entries(const TokenizedText& gen,
                                                       const TokenizedText& ver) {
  std::vector<AlignmentEntry> out;
  for (std::size_t t = 0; t < gen.tokens.size(); ++t) {
    for (std::size_t s = 0; s < ver.tokens.size(); ++s) {
      std::size_t shared = 0;
      for (std::size_t c = 0; c < gen.text.size(); ++c) {
        const bool in_t = c >= gen.tokens[t].span.start && c < gen.tokens[t].span.end;
        const bool in_s = c >= ver.tokens[s].span.start && c < ver.tokens[s].span.end;
        shared += (in_t && in_s) ? 1 : 0;
      }
      if (shared > 0) {
        out.push_back({t, s,
                       static_cast<double>(shared) /
                           static_cast<double>(ver.tokens[s].span.length())});
      }
    }
  }
  return out;
}

struct CommandResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

// Runs the CLI with `args` (already shell-quoted), capturing both streams.
inline CommandResult run_cli(const std::string& args) {
  static int counter = 0;
  const auto dir = std::filesystem::temp_directory_path();
  const std::string tag = std::to_string(::getpid()) + "_" + std::to_string(counter++);
  const auto out_path = dir / ("cmegrpo_out_" + tag);
  const auto err_path = dir / ("cmegrpo_err_" + tag);
  const std::string cmd = std::string("'") + CMEGRPO_CLI_PATH + "' " + args + " >'" +
                          out_path.string() + "' 2>'" + err_path.string() + "'";
  const int status = std::system(cmd.c_str());
  CommandResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  r.out = slurp(out_path);
  r.err = slurp(err_path);
  std::filesystem::remove(out_path);
  std::filesystem::remove(err_path);
  return r;
}

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return out + "'";
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Fresh empty scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("cmegrpo_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace cmegrpo::testing
