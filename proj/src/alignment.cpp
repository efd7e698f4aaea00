#include "cmegrpo/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "cmegrpo/errors.hpp"

namespace cmegrpo {

namespace {

bool whitespace_only(std::u32string_view piece) {
  return std::all_of(piece.begin(), piece.end(), [](char32_t c) { return c == U' '; });
}

}  // namespace

AlignmentMap align(const TokenizedText& gen, const TokenizedText& ver) {
  if (gen.text != ver.text) {
    const auto [gen_it, ver_it] =
        std::mismatch(gen.text.begin(), gen.text.end(), ver.text.begin(), ver.text.end());
    const auto offset = static_cast<std::size_t>(gen_it - gen.text.begin());
    throw AlignmentError("generator and verifier texts differ at character offset " +
                             std::to_string(offset),
                         offset);
  }
  check_partition(gen);
  check_partition(ver);

  AlignmentMap map;
  map.gen_len = gen.tokens.size();
  map.ver_len = ver.tokens.size();
  map.gen_mask.assign(map.gen_len, false);

  // Both sides partition the same text, so a merge-style sweep visits every
  // intersecting pair exactly once.
  std::size_t s_begin = 0;
  for (std::size_t t = 0; t < gen.tokens.size(); ++t) {
    const CharSpan gen_span = gen.tokens[t].span;
    while (s_begin < ver.tokens.size() && ver.tokens[s_begin].span.end <= gen_span.start) ++s_begin;
    bool covered = false;
    for (std::size_t s = s_begin; s < ver.tokens.size(); ++s) {
      const CharSpan ver_span = ver.tokens[s].span;
      if (ver_span.start >= gen_span.end) break;
      const std::size_t shared = overlap(gen_span, ver_span);
      if (shared == 0) continue;
      map.entries.push_back(
          {t, s, static_cast<double>(shared) / static_cast<double>(ver_span.length())});
      covered = true;
    }
    map.gen_mask[t] = covered && !whitespace_only(gen.piece(t));
  }
  return map;
}

AlignedLogprobs aligned_logprobs(const AlignmentMap& map, std::span<const double> ver_logprobs) {
  if (ver_logprobs.size() != map.ver_len) {
    throw DomainError("expected " + std::to_string(map.ver_len) + " verifier log-probabilities, got " +
                      std::to_string(ver_logprobs.size()));
  }
  for (std::size_t s = 0; s < ver_logprobs.size(); ++s) {
    if (!(ver_logprobs[s] <= 1e-12)) {
      throw DomainError("verifier log-probability at position " + std::to_string(s) +
                        " is not a log-probability");
    }
  }
  AlignedLogprobs out;
  out.unmasked.assign(map.gen_len, 0.0);
  for (const auto& entry : map.entries) {
    out.unmasked[entry.gen] += entry.weight * ver_logprobs[entry.ver];
  }
  out.valid = map.gen_mask;
  out.values.resize(map.gen_len);
  for (std::size_t t = 0; t < map.gen_len; ++t) out.values[t] = out.valid[t] ? out.unmasked[t] : 0.0;
  return out;
}

std::string alignment_json(const AlignmentMap& map) {
  std::string out = "{\"entries\":[";
  char buffer[64];
  for (std::size_t k = 0; k < map.entries.size(); ++k) {
    const auto& e = map.entries[k];
    std::snprintf(buffer, sizeof buffer, "%.17g", e.weight);
    if (k > 0) out += ',';
    out += "{\"t\":" + std::to_string(e.gen) + ",\"s\":" + std::to_string(e.ver) + ",\"w\":" + buffer +
           "}";
  }
  out += "],\"gen_mask\":[";
  for (std::size_t t = 0; t < map.gen_mask.size(); ++t) {
    if (t > 0) out += ',';
    out += map.gen_mask[t] ? "true" : "false";
  }
  out += "]}";
  return out;
}

}  // namespace cmegrpo
