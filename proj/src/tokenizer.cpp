#include "llama/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace llama {

namespace {

bool is_digit(char c) { return c >= '0' && c <= '9'; }
bool is_other_space(char c) { return c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }
bool is_space_like(char c) { return c == ' ' || is_other_space(c); }

// Length of the UTF-8 sequence starting at s[i], or 0 if it is invalid.
std::size_t utf8_sequence_length(std::string_view s, std::size_t i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  std::size_t len;
  std::uint32_t cp;
  if (b0 < 0x80) return 1;
  if ((b0 & 0xE0) == 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  } else if ((b0 & 0xF0) == 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if ((b0 & 0xF8) == 0xF0) {
    len = 4;
    cp = b0 & 0x07;
  } else {
    return 0;
  }
  if (i + len > s.size()) return 0;
  for (std::size_t k = 1; k < len; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xC0) != 0x80) return 0;
    cp = (cp << 6) | (b & 0x3F);
  }
  // Overlong forms, surrogates and values past U+10FFFF.
  if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000)) return 0;
  if (cp >= 0xD800 && cp <= 0xDFFF) return 0;
  if (cp > 0x10FFFF) return 0;
  return len;
}

std::string byte_token_name(int byte) {
  static const char* hex = "0123456789ABCDEF";
  std::string s = "<0x";
  s += hex[(byte >> 4) & 0xF];
  s += hex[byte & 0xF];
  s += '>';
  return s;
}

std::string escape(std::string_view s) {
  static const char* hex = "0123456789ABCDEF";
  std::string out;
  for (char c : s) {
    const auto b = static_cast<unsigned char>(c);
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default:
        if (b < 0x20 || b == 0x7F) {
          out += "\\x";
          out += hex[b >> 4];
          out += hex[b & 0xF];
        } else {
          out += c;
        }
    }
  }
  return out;
}

std::string unescape(std::string_view s, const std::string& where) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (++i >= s.size()) throw FormatError(where + ": dangling escape");
    switch (s[i]) {
      case '\\': out += '\\'; break;
      case 't': out += '\t'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      case 'x': {
        const std::string hex(s.substr(i + 1, 2));
        if (hex.size() != 2 || hex.find_first_not_of("0123456789ABCDEFabcdef") != std::string::npos) {
          throw FormatError(where + ": bad \\x escape");
        }
        out += static_cast<char>(std::stoi(hex, nullptr, 16));
        i += 2;
        break;
      }
      default:
        throw FormatError(where + ": unknown escape \\" + std::string(1, s[i]));
    }
  }
  return out;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    parts.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return parts;
}

// Symbol sequence of one pretoken; -1 marks characters without a token,
// which never take part in merges and fall back to bytes.
using Symbols = std::vector<TokenId>;

}  // namespace

std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < text.size();) {
    std::size_t len = utf8_sequence_length(text, i);
    if (len == 0) len = 1;
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

std::size_t utf8_length(std::string_view text) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < text.size(); ++n) {
    const std::size_t len = utf8_sequence_length(text, i);
    i += len == 0 ? 1 : len;
  }
  return n;
}

bool sanitize_utf8(std::string& text) {
  std::string out;
  bool replaced = false;
  for (std::size_t i = 0; i < text.size();) {
    const std::size_t len = utf8_sequence_length(text, i);
    if (len == 0) {
      out += "\xEF\xBF\xBD";
      replaced = true;
      ++i;
    } else {
      out.append(text, i, len);
      i += len;
    }
  }
  if (replaced) text = std::move(out);
  return replaced;
}

std::vector<std::string> pretokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    const char c = text[i];
    if (is_digit(c)) {
      out.emplace_back(1, c);
      ++i;
    } else if (c == ' ') {
      std::size_t j = i;
      while (j < n && text[j] == ' ') ++j;
      // The last space of the run becomes the prefix of a following word.
      const bool word_follows = j < n && !is_space_like(text[j]) && !is_digit(text[j]);
      const std::size_t run_end = word_follows ? j - 1 : j;
      if (run_end > i) out.emplace_back(text.substr(i, run_end - i));
      if (word_follows) {
        std::size_t k = j;
        while (k < n && !is_space_like(text[k]) && !is_digit(text[k])) ++k;
        out.emplace_back(text.substr(j - 1, k - (j - 1)));
        j = k;
      }
      i = j;
    } else if (is_other_space(c)) {
      std::size_t j = i;
      while (j < n && is_other_space(text[j])) ++j;
      out.emplace_back(text.substr(i, j - i));
      i = j;
    } else {
      std::size_t j = i;
      while (j < n && !is_space_like(text[j]) && !is_digit(text[j])) ++j;
      out.emplace_back(text.substr(i, j - i));
      i = j;
    }
  }
  return out;
}

Tokenizer Tokenizer::train(const std::vector<std::string>& corpus, std::int64_t target_vocab) {
  if (target_vocab < kMinVocab) {
    throw ConfigError("target_vocab " + std::to_string(target_vocab) + " below minimum " + std::to_string(kMinVocab) +
                      " (256 byte tokens + 3 specials)");
  }
  std::map<std::string, std::int64_t> word_counts;
  for (const auto& doc : corpus) {
    for (auto& piece : pretokenize(doc)) ++word_counts[piece];
  }
  if (word_counts.empty()) throw TrainingError("tokenizer training: empty corpus");

  Tokenizer tok;
  tok.vocab_ = {"<unk>", "<s>", "</s>"};
  for (int b = 0; b < 256; ++b) tok.vocab_.push_back(byte_token_name(b));

  // Character inventory: most frequent first, ties by byte order.
  std::map<std::string, std::int64_t> char_counts;
  for (const auto& [word, count] : word_counts) {
    for (std::size_t i = 0; i < word.size();) {
      const std::size_t len = utf8_sequence_length(word, i);
      if (len == 0) {
        ++i;
        continue;
      }
      char_counts[word.substr(i, len)] += count;
      i += len;
    }
  }
  std::vector<std::pair<std::string, std::int64_t>> chars(char_counts.begin(), char_counts.end());
  std::stable_sort(chars.begin(), chars.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::unordered_map<std::string, TokenId> ids;
  for (const auto& [ch, count] : chars) {
    if (static_cast<std::int64_t>(tok.vocab_.size()) >= target_vocab) break;
    ids[ch] = static_cast<TokenId>(tok.vocab_.size());
    tok.vocab_.push_back(ch);
  }

  std::vector<Symbols> words;
  std::vector<std::int64_t> counts;
  for (const auto& [word, count] : word_counts) {
    Symbols sym;
    for (const auto& ch : utf8_chars(word)) {
      auto it = ids.find(ch);
      sym.push_back(it == ids.end() ? -1 : it->second);
    }
    words.push_back(std::move(sym));
    counts.push_back(count);
  }

  while (static_cast<std::int64_t>(tok.vocab_.size()) < target_vocab) {
    std::map<std::pair<TokenId, TokenId>, std::int64_t> pair_counts;
    for (std::size_t w = 0; w < words.size(); ++w) {
      const auto& sym = words[w];
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
        if (sym[i] < 0 || sym[i + 1] < 0) continue;
        pair_counts[{sym[i], sym[i + 1]}] += counts[w];
      }
    }
    const std::pair<TokenId, TokenId>* best = nullptr;
    std::int64_t best_count = 0;
    for (const auto& [pair, count] : pair_counts) {
      if (count > best_count) {
        best = &pair;
        best_count = count;
      } else if (count == best_count && best != nullptr) {
        const auto key = std::tie(tok.vocab_[pair.first], tok.vocab_[pair.second]);
        const auto best_key = std::tie(tok.vocab_[best->first], tok.vocab_[best->second]);
        if (key < best_key) best = &pair;
      }
    }
    if (best == nullptr || best_count < 2) break;

    const auto [left, right] = *best;
    const std::string merged = tok.vocab_[left] + tok.vocab_[right];
    tok.merges_.emplace_back(tok.vocab_[left], tok.vocab_[right]);
    TokenId merged_id;
    if (auto it = ids.find(merged); it != ids.end()) {
      merged_id = it->second;
    } else {
      merged_id = static_cast<TokenId>(tok.vocab_.size());
      tok.vocab_.push_back(merged);
      ids[merged] = merged_id;
    }
    for (auto& sym : words) {
      Symbols next;
      next.reserve(sym.size());
      for (std::size_t i = 0; i < sym.size(); ++i) {
        if (i + 1 < sym.size() && sym[i] == left && sym[i + 1] == right) {
          next.push_back(merged_id);
          ++i;
        } else {
          next.push_back(sym[i]);
        }
      }
      sym = std::move(next);
    }
  }
  tok.rebuild_index();
  return tok;
}

void Tokenizer::rebuild_index() {
  piece_to_id_.clear();
  merge_rank_.clear();
  for (std::size_t id = kMinVocab; id < vocab_.size(); ++id) piece_to_id_.emplace(vocab_[id], static_cast<TokenId>(id));
  for (std::size_t r = 0; r < merges_.size(); ++r) merge_rank_.emplace(merges_[r], r);
}

TokenId Tokenizer::find(const std::string& piece) const {
  auto it = piece_to_id_.find(piece);
  return it == piece_to_id_.end() ? -1 : it->second;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text, bool add_bos) const {
  std::vector<TokenId> out;
  if (add_bos) out.push_back(kBos);
  for (const auto& word : pretokenize(text)) {
    std::vector<std::string> sym;
    for (auto& ch : utf8_chars(word)) sym.push_back(std::move(ch));
    std::vector<bool> known(sym.size());
    for (std::size_t i = 0; i < sym.size(); ++i) known[i] = piece_to_id_.count(sym[i]) > 0;

    while (sym.size() > 1) {
      std::size_t best_rank = std::numeric_limits<std::size_t>::max();
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
        if (!known[i] || !known[i + 1]) continue;
        auto it = merge_rank_.find({sym[i], sym[i + 1]});
        if (it != merge_rank_.end()) best_rank = std::min(best_rank, it->second);
      }
      if (best_rank == std::numeric_limits<std::size_t>::max()) break;
      const auto& [left, right] = merges_[best_rank];
      std::vector<std::string> next;
      std::vector<bool> next_known;
      for (std::size_t i = 0; i < sym.size(); ++i) {
        if (i + 1 < sym.size() && known[i] && known[i + 1] && sym[i] == left && sym[i + 1] == right) {
          next.push_back(sym[i] + sym[i + 1]);
          next_known.push_back(true);
          ++i;
        } else {
          next.push_back(std::move(sym[i]));
          next_known.push_back(known[i]);
        }
      }
      sym = std::move(next);
      known = std::move(next_known);
    }

    for (std::size_t i = 0; i < sym.size(); ++i) {
      if (known[i]) {
        out.push_back(piece_to_id_.at(sym[i]));
      } else {
        for (char c : sym[i]) out.push_back(kFirstByte + static_cast<unsigned char>(c));
      }
    }
  }
  return out;
}

DecodeResult Tokenizer::decode(std::span<const TokenId> ids) const {
  DecodeResult result;
  for (TokenId id : ids) {
    if (id < 0 || id >= vocab_size()) {
      throw IndexError("decode: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab_size()));
    }
    if (id < kFirstByte) continue;
    if (is_byte_token(id)) {
      result.text += static_cast<char>(id - kFirstByte);
    } else {
      result.text += vocab_[static_cast<std::size_t>(id)];
    }
  }
  result.replaced = sanitize_utf8(result.text);
  return result;
}

void Tokenizer::save(std::ostream& out) const {
  out << "llama-tokenizer\t" << kFormatVersion << '\n';
  out << "vocab_size\t" << vocab_.size() << '\n';
  out << "unk\t" << kUnk << '\n';
  out << "bos\t" << kBos << '\n';
  out << "eos\t" << kEos << '\n';
  out << "merges\t" << merges_.size() << '\n';
  out << "[vocab]\n";
  for (std::size_t id = 0; id < vocab_.size(); ++id) out << id << '\t' << escape(vocab_[id]) << '\n';
  out << "[merges]\n";
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    out << r << '\t' << escape(merges_[r].first) << '\t' << escape(merges_[r].second) << '\n';
  }
}

std::string Tokenizer::to_string() const {
  std::ostringstream out;
  save(out);
  return out.str();
}

Tokenizer Tokenizer::load(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  auto next = [&](const char* what) {
    if (!std::getline(in, line)) throw FormatError(std::string("tokenizer file truncated before ") + what);
    ++line_no;
    return split_tabs(line);
  };
  auto header_int = [&](const char* key) -> std::int64_t {
    auto parts = next(key);
    if (parts.size() != 2 || parts[0] != key) throw FormatError(std::string("tokenizer header: expected '") + key + "'");
    try {
      std::size_t used = 0;
      const auto v = std::stoll(parts[1], &used);
      if (used != parts[1].size() || v < 0) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw FormatError(std::string("tokenizer header: bad value for '") + key + "'");
    }
  };

  auto magic = next("magic");
  if (magic.size() != 2 || magic[0] != "llama-tokenizer") throw FormatError("tokenizer magic: not a tokenizer file");
  if (magic[1] != std::to_string(kFormatVersion)) throw FormatError("tokenizer version: unsupported " + magic[1]);
  const auto vocab_size = header_int("vocab_size");
  if (header_int("unk") != kUnk) throw FormatError("tokenizer unk id: unsupported layout");
  if (header_int("bos") != kBos) throw FormatError("tokenizer bos id: unsupported layout");
  if (header_int("eos") != kEos) throw FormatError("tokenizer eos id: unsupported layout");
  const auto merge_count = header_int("merges");
  if (vocab_size < kMinVocab) throw FormatError("tokenizer vocab_size: below " + std::to_string(kMinVocab));
  if (next("[vocab]") != std::vector<std::string>{"[vocab]"}) throw FormatError("tokenizer: missing [vocab] section");

  Tokenizer tok;
  for (std::int64_t id = 0; id < vocab_size; ++id) {
    auto parts = next("end of vocab");
    const std::string where = "tokenizer vocab line " + std::to_string(line_no);
    if (parts.size() != 2 || parts[0] != std::to_string(id)) throw FormatError(where + ": expected id " + std::to_string(id));
    tok.vocab_.push_back(unescape(parts[1], where));
  }
  const std::vector<std::string> specials{"<unk>", "<s>", "</s>"};
  for (std::size_t i = 0; i < specials.size(); ++i) {
    if (tok.vocab_[i] != specials[i]) throw FormatError("tokenizer vocab: special token " + std::to_string(i) + " is not " + specials[i]);
  }
  for (int b = 0; b < 256; ++b) {
    if (tok.vocab_[kFirstByte + b] != byte_token_name(b)) throw FormatError("tokenizer vocab: byte token " + byte_token_name(b) + " missing");
  }
  std::set<std::string> regular(tok.vocab_.begin() + kMinVocab, tok.vocab_.end());
  if (static_cast<std::int64_t>(regular.size()) != vocab_size - kMinVocab) throw FormatError("tokenizer vocab: duplicate token");

  if (next("[merges]") != std::vector<std::string>{"[merges]"}) throw FormatError("tokenizer: missing [merges] section");
  for (std::int64_t r = 0; r < merge_count; ++r) {
    auto parts = next("end of merges");
    const std::string where = "tokenizer merge line " + std::to_string(line_no);
    if (parts.size() != 3 || parts[0] != std::to_string(r)) throw FormatError(where + ": expected rank " + std::to_string(r));
    auto left = unescape(parts[1], where), right = unescape(parts[2], where);
    if (!regular.count(left) || !regular.count(right) || !regular.count(left + right)) {
      throw FormatError(where + ": merge refers to a token missing from the vocab");
    }
    tok.merges_.emplace_back(std::move(left), std::move(right));
  }
  if (std::getline(in, line)) throw FormatError("tokenizer: trailing content after merges");
  tok.rebuild_index();
  return tok;
}

Tokenizer Tokenizer::from_string(const std::string& text) {
  std::istringstream in(text);
  return load(in);
}

void Tokenizer::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write tokenizer file " + path);
  save(out);
}

Tokenizer Tokenizer::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read tokenizer file " + path);
  return load(in);
}

}  // namespace llama
