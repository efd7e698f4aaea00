#include "cmegrpo/text_spans.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <tuple>

#include "cmegrpo/errors.hpp"

namespace cmegrpo {

std::size_t overlap(CharSpan a, CharSpan b) noexcept {
  const std::size_t lo = std::max(a.start, b.start);
  const std::size_t hi = std::min(a.end, b.end);
  return hi > lo ? hi - lo : 0;
}

std::vector<TokenId> TokenizedText::ids() const {
  std::vector<TokenId> out;
  out.reserve(tokens.size());
  for (const auto& token : tokens) out.push_back(token.id);
  return out;
}

std::string TokenizedText::text_utf8() const { return utf8_encode(text); }

std::u32string_view TokenizedText::piece(std::size_t index) const {
  const CharSpan span = tokens.at(index).span;
  return std::u32string_view(text).substr(span.start, span.length());
}

void check_partition(const TokenizedText& tokenized) {
  std::size_t cursor = 0;
  for (std::size_t k = 0; k < tokenized.tokens.size(); ++k) {
    const CharSpan span = tokenized.tokens[k].span;
    if (span.start != cursor || span.end <= span.start) {
      throw DomainError("token " + std::to_string(k) + " span [" + std::to_string(span.start) +
                        "," + std::to_string(span.end) + ") breaks the partition at offset " +
                        std::to_string(cursor));
    }
    cursor = span.end;
  }
  if (cursor != tokenized.text.size()) {
    throw DomainError("token spans cover " + std::to_string(cursor) + " of " +
                      std::to_string(tokenized.text.size()) + " characters");
  }
}

nlohmann::json to_json(const TokenizedText& tokenized) {
  nlohmann::json tokens = nlohmann::json::array();
  for (const auto& token : tokenized.tokens) {
    tokens.push_back({{"id", token.id}, {"start", token.span.start}, {"end", token.span.end}});
  }
  return {{"text", tokenized.text_utf8()}, {"tokens", std::move(tokens)}};
}

std::u32string utf8_decode(std::string_view bytes) {
  std::u32string out;
  out.reserve(bytes.size());
  std::size_t i = 0;
  auto fail = [&](std::size_t at) {
    throw DomainError("malformed UTF-8 at byte " + std::to_string(at));
  };
  while (i < bytes.size()) {
    const auto lead = static_cast<unsigned char>(bytes[i]);
    std::size_t extra = 0;
    char32_t cp = 0;
    if (lead < 0x80) {
      cp = lead;
    } else if ((lead & 0xE0) == 0xC0) {
      extra = 1;
      cp = lead & 0x1F;
    } else if ((lead & 0xF0) == 0xE0) {
      extra = 2;
      cp = lead & 0x0F;
    } else if ((lead & 0xF8) == 0xF0) {
      extra = 3;
      cp = lead & 0x07;
    } else {
      fail(i);
    }
    if (i + extra >= bytes.size()) fail(i);
    for (std::size_t k = 1; k <= extra; ++k) {
      const auto cont = static_cast<unsigned char>(bytes[i + k]);
      if ((cont & 0xC0) != 0x80) fail(i + k);
      cp = (cp << 6) | (cont & 0x3F);
    }
    static constexpr char32_t kMinForLength[] = {0, 0x80, 0x800, 0x10000};
    if (cp < kMinForLength[extra] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) fail(i);
    out.push_back(cp);
    i += extra + 1;
  }
  return out;
}

std::string utf8_encode(std::u32string_view chars) {
  std::string out;
  out.reserve(chars.size());
  for (const char32_t cp : chars) {
    if (cp < 0x80) {
      out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
      out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
      out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
  }
  return out;
}

namespace {

std::string describe_char(char32_t c) {
  if (c >= 0x20 && c < 0x7F) return "'" + std::string(1, static_cast<char>(c)) + "'";
  std::ostringstream os;
  os << "U+" << std::hex << std::uppercase << static_cast<std::uint32_t>(c);
  return os.str();
}

}  // namespace

Alphabet::Alphabet() : Alphabet(utf8_decode(kDefault)) {}

Alphabet::Alphabet(std::u32string chars) : chars_(std::move(chars)) {
  if (chars_.empty()) throw DomainError("alphabet is empty");
  for (std::size_t k = 0; k < chars_.size(); ++k) {
    const char32_t c = chars_[k];
    if (c == U'\t' || c == U'\n' || c == U'\r') {
      throw DomainError("alphabet may not contain tab or newline characters");
    }
    if (!index_.emplace(c, static_cast<TokenId>(k)).second) {
      throw DomainError("alphabet repeats character " + describe_char(c));
    }
  }
}

Alphabet Alphabet::from_utf8(std::string_view chars) { return Alphabet(utf8_decode(chars)); }

std::optional<TokenId> Alphabet::index_of(char32_t c) const {
  const auto it = index_.find(c);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Alphabet::require(char32_t c, std::size_t offset) const {
  if (const auto index = index_of(c)) return *index;
  throw DomainError("character " + describe_char(c) + " at offset " + std::to_string(offset) +
                    " is not in the alphabet");
}

TokenizedText char_tokenize(std::string_view text, const Alphabet& alphabet) {
  return char_tokenize(utf8_decode(text), alphabet);
}

TokenizedText char_tokenize(std::u32string_view text, const Alphabet& alphabet) {
  TokenizedText out;
  out.text = std::u32string(text);
  out.tokens.reserve(text.size());
  for (std::size_t k = 0; k < text.size(); ++k) {
    out.tokens.push_back({alphabet.require(text[k], k), {k, k + 1}});
  }
  return out;
}

namespace {

// Greedy left-to-right application of one merge over a piece sequence.
// Returns true if anything was merged.
template <typename Piece, typename Equal, typename Combine>
bool apply_merge(std::vector<Piece>& pieces, Equal&& matches, Combine&& combine) {
  bool changed = false;
  std::vector<Piece> next;
  next.reserve(pieces.size());
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    if (i + 1 < pieces.size() && matches(pieces[i], pieces[i + 1])) {
      next.push_back(combine(pieces[i], pieces[i + 1]));
      ++i;
      changed = true;
    } else {
      next.push_back(std::move(pieces[i]));
    }
  }
  pieces = std::move(next);
  return changed;
}

}  // namespace

TokenizedText merge_tokenize(std::string_view text, const Alphabet& alphabet,
                             const MergeTable& merges) {
  return merge_tokenize(utf8_decode(text), alphabet, merges);
}

TokenizedText merge_tokenize(std::u32string_view text, const Alphabet& alphabet,
                             const MergeTable& merges) {
  TokenizedText out = char_tokenize(text, alphabet);
  if (merges.empty() || out.tokens.size() < 2) return out;

  const std::u32string_view whole(out.text);
  auto piece = [&](const Token& t) { return whole.substr(t.span.start, t.span.length()); };
  for (std::size_t k = 0; k < merges.size(); ++k) {
    const Merge& merge = merges[k];
    const auto merged_id = static_cast<TokenId>(alphabet.size() + k);
    apply_merge(
        out.tokens,
        [&](const Token& a, const Token& b) {
          return piece(a) == merge.left && piece(b) == merge.right;
        },
        [&](const Token& a, const Token& b) {
          return Token{merged_id, {a.span.start, b.span.end}};
        });
    if (out.tokens.size() < 2) break;
  }
  return out;
}

MergeTable train_merges(std::span<const std::string> corpus, const Alphabet& alphabet,
                        std::size_t target_vocab) {
  if (corpus.empty()) throw DomainError("cannot train merges on an empty corpus");
  if (target_vocab < alphabet.size()) {
    throw DomainError("target vocabulary " + std::to_string(target_vocab) +
                      " is smaller than the alphabet (" + std::to_string(alphabet.size()) + ")");
  }

  std::vector<std::vector<std::u32string>> sequences;
  sequences.reserve(corpus.size());
  for (const auto& line : corpus) {
    const TokenizedText chars = char_tokenize(line, alphabet);
    std::vector<std::u32string> pieces;
    for (std::size_t k = 0; k < chars.tokens.size(); ++k) pieces.emplace_back(chars.piece(k));
    sequences.push_back(std::move(pieces));
  }

  MergeTable table;
  const std::size_t wanted = target_vocab - alphabet.size();
  while (table.size() < wanted) {
    std::map<std::pair<std::u32string, std::u32string>, std::size_t> counts;
    for (const auto& pieces : sequences) {
      for (std::size_t i = 0; i + 1 < pieces.size(); ++i) ++counts[{pieces[i], pieces[i + 1]}];
    }
    if (counts.empty()) break;

    auto best = counts.begin();
    for (auto it = std::next(counts.begin()); it != counts.end(); ++it) {
      const auto key = [](const auto& entry) {
        return std::make_tuple(entry.first.first + entry.first.second, entry.first.first);
      };
      if (it->second > best->second || (it->second == best->second && key(*it) < key(*best))) {
        best = it;
      }
    }
    Merge merge{best->first.first, best->first.second};
    for (auto& pieces : sequences) {
      apply_merge(
          pieces,
          [&](const std::u32string& a, const std::u32string& b) {
            return a == merge.left && b == merge.right;
          },
          [](const std::u32string& a, const std::u32string& b) { return a + b; });
    }
    table.push_back(std::move(merge));
  }
  return table;
}

void write_merge_table(std::ostream& out, const MergeTable& merges) {
  for (const auto& merge : merges) {
    out << utf8_encode(merge.left) << '\t' << utf8_encode(merge.right) << '\n';
  }
}

MergeTable read_merge_table(std::istream& in) {
  MergeTable merges;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos || tab == 0 ||
        tab + 1 == line.size()) {
      throw DomainError("merge table line " + std::to_string(line_no) +
                        " must hold two pieces separated by one tab");
    }
    merges.push_back({utf8_decode(line.substr(0, tab)), utf8_decode(line.substr(tab + 1))});
  }
  return merges;
}

void save_merge_table(const std::filesystem::path& path, const MergeTable& merges) {
  std::ofstream out(path);
  if (!out) throw DomainError("cannot write merge table " + path.string());
  write_merge_table(out, merges);
}

MergeTable load_merge_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DomainError("cannot read merge table " + path.string());
  return read_merge_table(in);
}

Tokenizer::Tokenizer(Alphabet alphabet, MergeTable merges)
    : alphabet_(std::move(alphabet)), merges_(std::move(merges)) {
  for (std::size_t k = 0; k < merges_.size(); ++k) {
    for (const auto* piece : {&merges_[k].left, &merges_[k].right}) {
      if (piece->empty()) throw DomainError("merge " + std::to_string(k) + " has an empty piece");
      for (std::size_t i = 0; i < piece->size(); ++i) alphabet_.require((*piece)[i], i);
    }
  }
}

std::vector<std::u32string> Tokenizer::build_vocab(const Alphabet& alphabet,
                                                   const MergeTable& merges) {
  std::vector<std::u32string> vocab;
  vocab.reserve(alphabet.size() + merges.size());
  for (const char32_t c : alphabet.chars()) vocab.emplace_back(1, c);
  for (const auto& merge : merges) vocab.push_back(merge.left + merge.right);
  return vocab;
}

const std::u32string& Tokenizer::token_string(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
    throw DomainError("token id " + std::to_string(id) + " is outside the vocabulary of size " +
                      std::to_string(vocab_.size()));
  }
  return vocab_[static_cast<std::size_t>(id)];
}

TokenizedText Tokenizer::encode(std::string_view text) const {
  return merge_tokenize(text, alphabet_, merges_);
}

TokenizedText Tokenizer::encode(std::u32string_view text) const {
  return merge_tokenize(text, alphabet_, merges_);
}

TokenizedText Tokenizer::view(std::span<const TokenId> ids) const {
  TokenizedText out;
  out.tokens.reserve(ids.size());
  for (const TokenId id : ids) {
    const std::u32string& piece = token_string(id);
    const std::size_t start = out.text.size();
    out.text += piece;
    out.tokens.push_back({id, {start, out.text.size()}});
  }
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::u32string text;
  for (const TokenId id : ids) text += token_string(id);
  return utf8_encode(text);
}

}  // namespace cmegrpo
