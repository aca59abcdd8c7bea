#include <gtest/gtest.h>

#include <sstream>

#include "llama/errors.hpp"
#include "llama/rng.hpp"
#include "llama/tokenizer.hpp"
#include "test_support.hpp"

using namespace llama;
using llama::testing::random_utf8;

namespace {

const char* kCorpus =
    "The tokenizer splits numbers into digits: 2023 becomes 2 0 2 3 and 1234567 stays split.\n"
    "In 1987 the lake held 450 swans, and by 2001 only 12 remained near the old mill.\n"
    "Words like tokenizer, tokens and token appear often so merges are learned quickly.\n"
    "Caf\xC3\xA9 na\xC3\xAFve r\xC3\xA9sum\xC3\xA9 \xE2\x80\x94 accented text also shows up in the corpus.\n";

Tokenizer trained(std::int64_t vocab = 400) { return Tokenizer::train({kCorpus, kCorpus}, vocab); }

// Independent formulation of the pre-tokenizer: split into maximal runs of
// one character class, break digit runs into single digits, then hand the
// last space of a space run to a following word run.
std::vector<std::string> reference_pretokenize(const std::string& text) {
  auto cls = [](char c) {
    if (c >= '0' && c <= '9') return 'D';
    if (c == ' ') return 'S';
    if (c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') return 'W';
    return 'O';
  };
  std::vector<std::pair<char, std::string>> runs;
  for (char c : text) {
    const char k = cls(c);
    if (!runs.empty() && runs.back().first == k && k != 'D') {
      runs.back().second += c;
    } else {
      runs.push_back({k, std::string(1, c)});
    }
  }
  std::vector<std::string> out;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    auto [k, s] = runs[i];
    if (k == 'S' && i + 1 < runs.size() && runs[i + 1].first == 'O') {
      s.pop_back();
      runs[i + 1].second.insert(0, " ");
    }
    if (!s.empty()) out.push_back(s);
  }
  return out;
}

int digit_count(const std::string& s) {
  return static_cast<int>(std::count_if(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; }));
}

}  // namespace

TEST(Pretokenize, Examples) {
  EXPECT_EQ(pretokenize("Hello world"), (std::vector<std::string>{"Hello", " world"}));
  EXPECT_EQ(pretokenize("in 2023!"), (std::vector<std::string>{"in", " ", "2", "0", "2", "3", "!"}));
  EXPECT_EQ(pretokenize("a  b\n\nc"), (std::vector<std::string>{"a", " ", " b", "\n\n", "c"}));
  EXPECT_TRUE(pretokenize("").empty());
}

TEST(Pretokenize, MatchesReferenceScanner) {
  Rng rng(1);
  const std::string alphabet = "ab 9\n\t.,X  0";
  for (int trial = 0; trial < 2000; ++trial) {
    std::string s;
    const auto len = rng.below(20);
    for (std::uint64_t i = 0; i < len; ++i) s += alphabet[rng.below(alphabet.size())];
    ASSERT_EQ(pretokenize(s), reference_pretokenize(s)) << '"' << s << '"';
  }
}

TEST(Pretokenize, ConcatenationIsLossless) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const auto s = random_utf8(rng);
    std::string joined;
    for (const auto& p : pretokenize(s)) {
      joined += p;
      EXPECT_LE(digit_count(p), 1);
    }
    EXPECT_EQ(joined, s);
  }
}

TEST(Tokenizer, SpecialAndByteLayout) {
  const auto tok = trained();
  EXPECT_EQ(tok.token(Tokenizer::kUnk), "<unk>");
  EXPECT_EQ(tok.token(Tokenizer::kBos), "<s>");
  EXPECT_EQ(tok.token(Tokenizer::kEos), "</s>");
  EXPECT_EQ(tok.token(Tokenizer::kFirstByte), "<0x00>");
  EXPECT_EQ(tok.token(Tokenizer::kFirstByte + 0xAB), "<0xAB>");
  EXPECT_TRUE(tok.is_byte_token(Tokenizer::kFirstByte + 255));
  EXPECT_FALSE(tok.is_byte_token(Tokenizer::kMinVocab));
  EXPECT_LE(tok.vocab_size(), 400);
  EXPECT_GT(tok.vocab_size(), Tokenizer::kMinVocab);
}

TEST(Tokenizer, RejectsTinyVocabAndEmptyCorpus) {
  EXPECT_THROW(Tokenizer::train({kCorpus}, 258), ConfigError);
  EXPECT_THROW(Tokenizer::train({""}, 300), TrainingError);
}

TEST(Tokenizer, HandComputedMerges) {
  // "ab", " ab", " ab": (a,b) occurs 3 times, then (" ", "ab") twice.
  const auto tok = Tokenizer::train({"ab ab ab"}, 300);
  ASSERT_EQ(tok.merges().size(), 2u);
  EXPECT_EQ(tok.merges()[0], (std::pair<std::string, std::string>{"a", "b"}));
  EXPECT_EQ(tok.merges()[1], (std::pair<std::string, std::string>{" ", "ab"}));
  EXPECT_EQ(tok.vocab_size(), 264);
  EXPECT_EQ(tok.token(259), "a");
  EXPECT_EQ(tok.token(260), "b");
  EXPECT_EQ(tok.token(261), " ");
  const auto ids = tok.encode("ab ab", true);
  EXPECT_EQ(ids, (std::vector<TokenId>{Tokenizer::kBos, tok.find("ab"), tok.find(" ab")}));
}

TEST(Tokenizer, MergeTiesBreakLexicographically) {
  // (x,y) and (p,q) both occur twice; "p" < "x".
  const auto tok = Tokenizer::train({"xy pq xy pq"}, 300);
  ASSERT_FALSE(tok.merges().empty());
  EXPECT_EQ(tok.merges()[0].first, " ");
}

TEST(Tokenizer, RoundTripsRandomUtf8) {
  const auto tok = trained();
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto s = random_utf8(rng);
    const auto ids = tok.encode(s);
    const auto decoded = tok.decode(ids);
    ASSERT_EQ(decoded.text, s) << trial;
    EXPECT_FALSE(decoded.replaced);
  }
}

TEST(Tokenizer, NoLearnedTokenSpansTwoDigits) {
  const auto tok = Tokenizer::train({"1234 1234 1234 5678 5678 99 99 99 2023 2023"}, 400);
  for (TokenId id = Tokenizer::kMinVocab; id < tok.vocab_size(); ++id) EXPECT_LE(digit_count(tok.token(id)), 1);
  const auto ids = tok.encode("2023");
  EXPECT_EQ(ids.size(), 4u);
}

TEST(Tokenizer, ByteFallbackForUnseenCharacter) {
  const auto tok = trained();
  const std::string llama = "\xF0\x9F\xA6\x99";  // U+1F999, absent from the corpus
  const auto ids = tok.encode(llama);
  ASSERT_EQ(ids.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_TRUE(tok.is_byte_token(ids[i]));
    EXPECT_EQ(ids[i], Tokenizer::kFirstByte + static_cast<unsigned char>(llama[i]));
  }
  EXPECT_EQ(tok.decode_text(ids), llama);
}

TEST(Tokenizer, DecodeSkipsSpecialsAndRejectsBadIds) {
  const auto tok = trained();
  auto ids = tok.encode("the lake", true);
  ids.push_back(Tokenizer::kEos);
  EXPECT_EQ(tok.decode_text(ids), "the lake");
  const std::vector<TokenId> bad{static_cast<TokenId>(tok.vocab_size())};
  EXPECT_THROW(tok.decode(bad), IndexError);
}

TEST(Tokenizer, DecodeReplacesInvalidBytes) {
  const auto tok = trained();
  const std::vector<TokenId> ids{Tokenizer::kFirstByte + 0xC3};  // truncated two-byte sequence
  const auto r = tok.decode(ids);
  EXPECT_TRUE(r.replaced);
  EXPECT_EQ(r.text, "\xEF\xBF\xBD");
}

TEST(Tokenizer, TrainingIsDeterministic) { EXPECT_EQ(trained(), trained()); }

TEST(Tokenizer, SaveLoadRoundTrip) {
  const auto tok = trained();
  const auto text = tok.to_string();
  const auto back = Tokenizer::from_string(text);
  EXPECT_EQ(back, tok);
  EXPECT_EQ(back.to_string(), text);
  EXPECT_EQ(back.encode(kCorpus), tok.encode(kCorpus));
}

TEST(Tokenizer, LoadRejectsMalformedFiles) {
  const auto text = trained().to_string();
  EXPECT_THROW(Tokenizer::from_string(""), FormatError);
  EXPECT_THROW(Tokenizer::from_string("not-a-tokenizer\t1\n"), FormatError);
  std::string wrong_version = text;
  wrong_version.replace(wrong_version.find("\t1\n"), 3, "\t9\n");
  EXPECT_THROW(Tokenizer::from_string(wrong_version), FormatError);
  EXPECT_THROW(Tokenizer::from_string(text.substr(0, text.size() / 2)), FormatError);
  EXPECT_THROW(Tokenizer::from_string(text + "extra\n"), FormatError);
  std::string bad_byte = text;
  bad_byte.replace(bad_byte.find("<0x41>"), 6, "<0x4G>");
  EXPECT_THROW(Tokenizer::from_string(bad_byte), FormatError);
}

TEST(Utf8, LengthAndSanitize) {
  EXPECT_EQ(utf8_length("caf\xC3\xA9"), 4u);
  std::string bad = "a\xFF" "b";
  EXPECT_TRUE(sanitize_utf8(bad));
  EXPECT_EQ(bad, "a\xEF\xBF\xBD" "b");
  std::string good = "ok";
  EXPECT_FALSE(sanitize_utf8(good));
}
