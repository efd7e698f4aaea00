#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace cmegrpo {

using TokenId = std::int32_t;

// Half-open character range [start, end), measured in Unicode scalar values.
struct CharSpan {
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t length() const noexcept { return end - start; }
  friend bool operator==(const CharSpan&, const CharSpan&) = default;
};

// Number of characters shared by two spans; zero when they only touch.
std::size_t overlap(CharSpan a, CharSpan b) noexcept;

struct Token {
  TokenId id = 0;
  CharSpan span;
  friend bool operator==(const Token&, const Token&) = default;
};

// A string together with a segmentation into tokens. Spans are sorted,
// contiguous, and cover the whole text.
struct TokenizedText {
  std::u32string text;
  std::vector<Token> tokens;

  std::vector<TokenId> ids() const;
  std::string text_utf8() const;
  std::u32string_view piece(std::size_t index) const;

  friend bool operator==(const TokenizedText&, const TokenizedText&) = default;
};

// Throws DomainError unless the spans partition [0, text.size()).
void check_partition(const TokenizedText& tokenized);

nlohmann::json to_json(const TokenizedText& tokenized);

std::u32string utf8_decode(std::string_view bytes);
std::string utf8_encode(std::u32string_view chars);

// Closed character set shared by every tokenizer in a run.
class Alphabet {
 public:
  static constexpr std::string_view kDefault = "abcdefghijklmnopqrstuvwxyz .0123456789";

  Alphabet();
  explicit Alphabet(std::u32string chars);
  static Alphabet from_utf8(std::string_view chars);

  std::size_t size() const noexcept { return chars_.size(); }
  char32_t at(TokenId index) const { return chars_.at(static_cast<std::size_t>(index)); }
  std::optional<TokenId> index_of(char32_t c) const;
  // Index of `c`, or DomainError naming the character and its offset.
  TokenId require(char32_t c, std::size_t offset) const;

  const std::u32string& chars() const noexcept { return chars_; }
  std::string to_utf8() const { return utf8_encode(chars_); }

  friend bool operator==(const Alphabet& a, const Alphabet& b) { return a.chars_ == b.chars_; }

 private:
  std::u32string chars_;
  std::unordered_map<char32_t, TokenId> index_;
};

struct Merge {
  std::u32string left;
  std::u32string right;
  friend bool operator==(const Merge&, const Merge&) = default;
};

// Merges in application order. Merge k creates token id alphabet.size() + k.
using MergeTable = std::vector<Merge>;

TokenizedText char_tokenize(std::string_view text, const Alphabet& alphabet);
TokenizedText char_tokenize(std::u32string_view text, const Alphabet& alphabet);

// Per-character tokens, then each merge in table order applied greedily left
// to right over the whole sequence.
TokenizedText merge_tokenize(std::string_view text, const Alphabet& alphabet,
                             const MergeTable& merges);
TokenizedText merge_tokenize(std::u32string_view text, const Alphabet& alphabet,
                             const MergeTable& merges);

// Pair-frequency merge learning. Ties go to the lexicographically smallest
// merged string, then the smallest left piece.
MergeTable train_merges(std::span<const std::string> corpus, const Alphabet& alphabet,
                        std::size_t target_vocab);

// One merge per line: left TAB right.
void write_merge_table(std::ostream& out, const MergeTable& merges);
MergeTable read_merge_table(std::istream& in);
void save_merge_table(const std::filesystem::path& path, const MergeTable& merges);
MergeTable load_merge_table(const std::filesystem::path& path);

class Tokenizer {
 public:
  Tokenizer() = default;
  explicit Tokenizer(Alphabet alphabet, MergeTable merges = {});

  const Alphabet& alphabet() const noexcept { return alphabet_; }
  const MergeTable& merges() const noexcept { return merges_; }
  bool is_char_level() const noexcept { return merges_.empty(); }

  std::size_t vocab_size() const noexcept { return vocab_.size(); }
  const std::u32string& token_string(TokenId id) const;

  TokenizedText encode(std::string_view text) const;
  TokenizedText encode(std::u32string_view text) const;
  // Rebuilds spans for an arbitrary id sequence, not necessarily the one
  // encode would produce.
  TokenizedText view(std::span<const TokenId> ids) const;
  std::string decode(std::span<const TokenId> ids) const;

  friend bool operator==(const Tokenizer& a, const Tokenizer& b) {
    return a.alphabet_ == b.alphabet_ && a.merges_ == b.merges_;
  }

 private:
  Alphabet alphabet_;
  MergeTable merges_;
  std::vector<std::u32string> vocab_ = build_vocab(alphabet_, merges_);

  static std::vector<std::u32string> build_vocab(const Alphabet& alphabet,
                                                 const MergeTable& merges);
};

}  // namespace cmegrpo
