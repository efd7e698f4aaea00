#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cmegrpo/text_spans.hpp"

namespace cmegrpo {

struct AlignmentEntry {
  std::size_t gen = 0;  // generator position t
  std::size_t ver = 0;  // verifier position s
  double weight = 0.0;  // |span_s ∩ span_t| / |span_s|, in (0, 1]
};

// Sparse character-overlap weights mapping verifier tokens onto generator
// positions. Entries are sorted by (gen, ver). For every verifier token the
// weights over generator positions sum to one.
struct AlignmentMap {
  std::size_t gen_len = 0;
  std::size_t ver_len = 0;
  std::vector<AlignmentEntry> entries;
  // False where the generator token is whitespace-only or has no overlapping
  // verifier token.
  std::vector<bool> gen_mask;
};

// Requires gen.text == ver.text; otherwise AlignmentError with the first
// differing offset.
AlignmentMap align(const TokenizedText& gen, const TokenizedText& ver);

struct AlignedLogprobs {
  // Per generator position; zero at masked positions.
  std::vector<double> values;
  // Per generator position before masking. Sums to the total verifier
  // log-likelihood.
  std::vector<double> unmasked;
  std::vector<bool> valid;
};

AlignedLogprobs aligned_logprobs(const AlignmentMap& map, std::span<const double> ver_logprobs);

// {"entries":[{"t":..,"s":..,"w":..}],"gen_mask":[..]} with weights printed to
// 17 significant digits.
std::string alignment_json(const AlignmentMap& map);

}  // namespace cmegrpo
