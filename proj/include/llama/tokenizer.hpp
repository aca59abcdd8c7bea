#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "llama/ops.hpp"

namespace llama {

/// Splits text into the units BPE merges never cross.
///
/// Every decimal digit is its own pretoken. A run of other non-whitespace
/// characters is one pretoken, carrying the single space that precedes it as
/// a word-prefix marker. Leftover spaces and runs of other ASCII whitespace
/// form their own pretokens. Concatenating the result gives back the input.
std::vector<std::string> pretokenize(std::string_view text);

/// Result of decode(); `replaced` is set when invalid UTF-8 produced by byte
/// tokens was replaced with U+FFFD.
struct DecodeResult {
  std::string text;
  bool replaced = false;
};

/// Byte-pair-encoding vocabulary with byte fallback.
///
/// Id layout: 0 <unk>, 1 <s> (BOS), 2 </s> (EOS), 3..258 the byte tokens
/// <0x00>..<0xFF>, then single characters, then merge results in merge order.
class Tokenizer {
 public:
  static constexpr TokenId kUnk = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kFirstByte = 3;
  static constexpr std::int64_t kNumSpecials = 3;
  static constexpr std::int64_t kMinVocab = kNumSpecials + 256;
  static constexpr std::uint32_t kFormatVersion = 1;

  /// Greedy most-frequent-pair merging over pretokenized text. Ties go to the
  /// lexicographically smallest (left, right) pair. Characters are admitted
  /// by frequency first; whatever does not fit falls back to bytes.
  static Tokenizer train(const std::vector<std::string>& corpus, std::int64_t target_vocab);

  std::vector<TokenId> encode(std::string_view text, bool add_bos = false) const;
  /// Throws IndexError for ids outside the vocabulary. BOS/EOS/UNK are dropped.
  DecodeResult decode(std::span<const TokenId> ids) const;
  std::string decode_text(std::span<const TokenId> ids) const { return decode(ids).text; }

  std::int64_t vocab_size() const { return static_cast<std::int64_t>(vocab_.size()); }
  const std::string& token(TokenId id) const { return vocab_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
  bool is_byte_token(TokenId id) const { return id >= kFirstByte && id < kFirstByte + 256; }
  /// Id of a regular (non-byte, non-special) token, or -1.
  TokenId find(const std::string& piece) const;

  /// Text form: header, vocab and merge sections; see README for the grammar.
  void save(std::ostream& out) const;
  std::string to_string() const;
  static Tokenizer load(std::istream& in);
  static Tokenizer from_string(const std::string& text);
  void save_file(const std::string& path) const;
  static Tokenizer load_file(const std::string& path);

  bool operator==(const Tokenizer& other) const { return vocab_ == other.vocab_ && merges_ == other.merges_; }

 private:
  void rebuild_index();

  std::vector<std::string> vocab_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::string, TokenId> piece_to_id_;
  std::map<std::pair<std::string, std::string>, std::size_t> merge_rank_;
};

/// Splits UTF-8 into code-point strings; invalid bytes become one-byte strings.
std::vector<std::string> utf8_chars(std::string_view text);

/// Number of code points (invalid bytes count one each).
std::size_t utf8_length(std::string_view text);

/// Replaces invalid UTF-8 sequences with U+FFFD; returns true if any were found.
bool sanitize_utf8(std::string& text);

}  // namespace llama
