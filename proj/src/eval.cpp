#include "llama/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "llama/generator.hpp"

namespace llama {

namespace {

struct CodeRange {
  char32_t first, last;
};

struct CaseMapping {
  char32_t from, to;
};

#include "unicode_tables.inc"

bool is_punctuation(char32_t cp) {
  auto it = std::upper_bound(std::begin(kPunctuation), std::end(kPunctuation), cp,
                             [](char32_t v, const CodeRange& r) { return v < r.first; });
  return it != std::begin(kPunctuation) && cp <= std::prev(it)->last;
}

bool is_whitespace(char32_t cp) { return std::binary_search(std::begin(kWhitespace), std::end(kWhitespace), cp); }

char32_t to_lower(char32_t cp) {
  auto it = std::lower_bound(std::begin(kLowercase), std::end(kLowercase), cp,
                             [](const CaseMapping& m, char32_t v) { return m.from < v; });
  return it != std::end(kLowercase) && it->from == cp ? it->to : cp;
}

// Invalid bytes decode to U+FFFD.
std::u32string decode_utf8(std::string_view s) {
  std::u32string out;
  for (const auto& ch : utf8_chars(s)) {
    const auto b0 = static_cast<unsigned char>(ch[0]);
    char32_t cp;
    if (ch.size() == 1) {
      cp = b0 < 0x80 ? b0 : 0xFFFD;
    } else {
      cp = b0 & (ch.size() == 2 ? 0x1F : ch.size() == 3 ? 0x0F : 0x07);
      for (std::size_t k = 1; k < ch.size(); ++k) cp = (cp << 6) | (static_cast<unsigned char>(ch[k]) & 0x3F);
    }
    out.push_back(cp);
  }
  return out;
}

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

bool is_ascii_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_ascii_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_ascii_space(s.back())) s.remove_suffix(1);
  return s;
}

double log_softmax_at(std::span<const float> row, TokenId target) {
  const double peak = *std::max_element(row.begin(), row.end());
  double z = 0.0;
  for (float v : row) z += std::exp(static_cast<double>(v) - peak);
  return static_cast<double>(row[static_cast<std::size_t>(target)]) - peak - std::log(z);
}

}  // namespace

void EvalTask::validate() const {
  if (kind == TaskKind::kMultipleChoice) {
    if (choices.size() < 2) throw InputError("multiple-choice task needs at least 2 choices");
    if (gold_index < 0 || gold_index >= static_cast<std::int64_t>(choices.size())) {
      throw InputError("gold_index " + std::to_string(gold_index) + " outside [0, " + std::to_string(choices.size()) +
                       ")");
    }
    for (const auto& c : choices) {
      if (c.empty()) throw InputError("multiple-choice task has an empty choice");
    }
  } else {
    if (answers.empty()) throw InputError("QA task needs at least one acceptable answer");
    if (question.empty()) throw InputError("QA task has an empty question");
  }
}

double completion_logprob(const LanguageModel& lm, std::string_view context, std::string_view completion,
                          const ScoringOptions& options) {
  if (completion.empty()) throw DomainError("score: empty completion");
  const auto ctx = lm.tokenizer.encode(context, true);
  std::vector<TokenId> full;
  std::size_t start;
  if (options.joint_encoding) {
    std::string joined(context);
    joined += completion;
    full = lm.tokenizer.encode(joined, true);
    start = 0;
    while (start < ctx.size() && start < full.size() && ctx[start] == full[start]) ++start;
  } else {
    full = ctx;
    const auto tail = lm.tokenizer.encode(completion, false);
    full.insert(full.end(), tail.begin(), tail.end());
    start = ctx.size();
  }
  if (start >= full.size()) throw DomainError("score: completion produced no tokens");
  if (static_cast<std::int64_t>(full.size()) - 1 > lm.config.max_seq_len) {
    throw InputError("score: context and completion need " + std::to_string(full.size() - 1) +
                     " positions, max_seq_len is " + std::to_string(lm.config.max_seq_len));
  }
  NoGradGuard no_grad;
  const auto inputs = std::span<const TokenId>(full).first(full.size() - 1);
  const Tensor logits = forward(lm.config, lm.weights, inputs);
  const auto vocab = static_cast<std::size_t>(logits.dim(1));
  double total = 0.0;
  for (std::size_t t = start; t < full.size(); ++t) total += log_softmax_at(logits.data().subspan((t - 1) * vocab, vocab), full[t]);
  return total;
}

double score_choice_char_norm(const LanguageModel& lm, std::string_view context, std::string_view completion,
                              const ScoringOptions& options) {
  const double logprob = completion_logprob(lm, context, completion, options);
  return logprob / static_cast<double>(utf8_length(completion));
}

double score_choice_answer_norm(const LanguageModel& lm, std::string_view context, std::string_view completion,
                                const ScoringOptions& options) {
  return completion_logprob(lm, context, completion, options) - completion_logprob(lm, "Answer:", completion, options);
}

std::size_t select_choice(std::span<const double> scores) {
  if (scores.empty()) throw InputError("select_choice: no scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

std::size_t select_choice(const EvalTask& task, std::span<const double> scores) {
  if (scores.size() != task.choices.size()) {
    throw InputError("select_choice: " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(task.choices.size()) + " choices");
  }
  return select_choice(scores);
}

std::string format_qa_prompt(std::span<const Exemplar> exemplars, std::string_view question) {
  std::string out(kQaHeader);
  for (const auto& e : exemplars) {
    out += "Q: " + e.question + "\nA: " + e.answer + "\n";
  }
  out += "Q: ";
  out += question;
  out += "\nA:";
  return out;
}

std::string format_mc_context(std::span<const Exemplar> exemplars, std::string_view context) {
  std::string out;
  for (const auto& e : exemplars) out += e.question + e.answer + "\n\n";
  out += context;
  return out;
}

std::string extract_answer(std::string_view generated) {
  std::size_t end = generated.size();
  for (std::size_t i = 0; i < generated.size(); ++i) {
    const char c = generated[i];
    if (c == '\n' || c == ',') {
      end = i;
      break;
    }
    if (c == '.' && (i + 1 == generated.size() || is_ascii_space(generated[i + 1]))) {
      end = i;
      break;
    }
  }
  return std::string(trim(generated.substr(0, end)));
}

std::string normalize_answer(std::string_view text) {
  std::vector<std::u32string> words;
  std::u32string current;
  for (char32_t cp : decode_utf8(text)) {
    if (is_whitespace(cp)) {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
      continue;
    }
    if (is_punctuation(cp)) continue;
    current.push_back(to_lower(cp));
  }
  if (!current.empty()) words.push_back(std::move(current));

  std::string out;
  for (const auto& w : words) {
    if (w == U"a" || w == U"an" || w == U"the") continue;
    if (!out.empty()) out += ' ';
    for (char32_t cp : w) append_utf8(out, cp);
  }
  return out;
}

bool exact_match(std::string_view prediction, std::span<const std::string> answers) {
  const std::string p = normalize_answer(prediction);
  if (p.empty()) return false;
  return std::any_of(answers.begin(), answers.end(), [&](const std::string& a) { return normalize_answer(a) == p; });
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[i] = hex[h & 0xF];
  return out;
}

namespace {

EvalTask parse_task(const nlohmann::json& j, std::size_t line, std::vector<std::string>& warnings) {
  if (!j.is_object()) throw IngestError(line, "task must be a JSON object");
  auto str = [&](const char* key) {
    const auto& v = j.at(key);
    if (!v.is_string()) throw IngestError(line, std::string("field '") + key + "' must be a string");
    return v.get<std::string>();
  };
  auto str_list = [&](const char* key) {
    const auto& v = j.at(key);
    if (!v.is_array()) throw IngestError(line, std::string("field '") + key + "' must be an array of strings");
    std::vector<std::string> out;
    for (const auto& e : v) {
      if (!e.is_string()) throw IngestError(line, std::string("field '") + key + "' must be an array of strings");
      out.push_back(e.get<std::string>());
    }
    return out;
  };

  static const std::vector<std::string> known{"id",       "kind",    "context", "choices",  "gold_index",
                                              "question", "answers", "fewshot", "norm_rule"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      warnings.push_back("line " + std::to_string(line) + ": unknown field '" + key + "' ignored");
    }
  }

  EvalTask t;
  t.id = j.contains("id") ? str("id") : "line-" + std::to_string(line);
  if (!j.contains("kind")) throw IngestError(line, "missing field 'kind'");
  const std::string kind = str("kind");
  if (kind == "multiple_choice") {
    t.kind = TaskKind::kMultipleChoice;
    if (!j.contains("choices")) throw IngestError(line, "missing field 'choices'");
    if (!j.contains("gold_index")) throw IngestError(line, "missing field 'gold_index'");
    t.context = j.contains("context") ? str("context") : "";
    t.choices = str_list("choices");
    if (!j.at("gold_index").is_number_integer()) throw IngestError(line, "field 'gold_index' must be an integer");
    t.gold_index = j.at("gold_index").get<std::int64_t>();
  } else if (kind == "generative_qa") {
    t.kind = TaskKind::kGenerativeQa;
    if (!j.contains("question")) throw IngestError(line, "missing field 'question'");
    if (!j.contains("answers")) throw IngestError(line, "missing field 'answers'");
    t.question = str("question");
    t.answers = str_list("answers");
  } else {
    throw IngestError(line, "unknown kind '" + kind + "'");
  }
  if (j.contains("norm_rule")) {
    const std::string rule = str("norm_rule");
    if (rule == "char") t.norm_rule = NormRule::kChar;
    else if (rule == "answer_conditional") t.norm_rule = NormRule::kAnswerConditional;
    else throw IngestError(line, "unknown norm_rule '" + rule + "'");
  }
  if (j.contains("fewshot")) {
    const auto& shots = j.at("fewshot");
    if (!shots.is_array()) throw IngestError(line, "field 'fewshot' must be an array");
    for (const auto& s : shots) {
      if (s.is_object() && s.contains("question") && s.contains("answer") && s["question"].is_string() &&
          s["answer"].is_string()) {
        t.fewshot.push_back({s["question"].get<std::string>(), s["answer"].get<std::string>()});
      } else if (s.is_array() && s.size() == 2 && s[0].is_string() && s[1].is_string()) {
        t.fewshot.push_back({s[0].get<std::string>(), s[1].get<std::string>()});
      } else {
        throw IngestError(line, "fewshot entries must be {question, answer} objects or [question, answer] pairs");
      }
    }
  }
  try {
    t.validate();
  } catch (const InputError& e) {
    throw IngestError(line, e.what());
  }
  return t;
}

}  // namespace

TaskFile parse_tasks(std::string_view text) {
  TaskFile file;
  file.hash = fnv1a_hex(text);
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto nl = text.find('\n', start);
    std::string_view line = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
    ++line_no;
    if (!trim(line).empty()) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw IngestError(line_no, std::string("invalid JSON: ") + e.what());
      }
      file.tasks.push_back(parse_task(j, line_no, file.warnings));
    }
    if (nl == std::string_view::npos) break;
    start = nl + 1;
  }
  return file;
}

TaskFile load_tasks(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read task file " + path);
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_tasks(text);
}

EvalReport run_eval(const LanguageModel& lm, std::span<const EvalTask> tasks, const EvalParams& params) {
  EvalReport report;
  std::int64_t max_shots = 0;
  for (const auto& task : tasks) {
    task.validate();
    ItemRecord item;
    item.id = task.id;
    item.kind = task.kind;
    item.shots = static_cast<std::int64_t>(task.fewshot.size());
    max_shots = std::max(max_shots, item.shots);
    if (task.kind == TaskKind::kMultipleChoice) {
      const std::string context = format_mc_context(task.fewshot, task.context);
      for (const auto& choice : task.choices) {
        item.scores.push_back(task.norm_rule == NormRule::kChar
                                  ? score_choice_char_norm(lm, context, choice, params.scoring)
                                  : score_choice_answer_norm(lm, context, choice, params.scoring));
      }
      item.chosen = static_cast<std::int64_t>(select_choice(task, item.scores));
      item.gold = task.gold_index;
      item.correct = item.chosen == item.gold;
    } else {
      const auto prompt = lm.tokenizer.encode(format_qa_prompt(task.fewshot, task.question), true);
      SampleParams sp;
      sp.max_new_tokens = params.max_new_tokens;
      sp.stop_strings = {"\n"};
      const auto generation = generate(lm.config, lm.weights, prompt, sp, &lm.tokenizer);
      item.generated = generation.text;
      item.extracted = extract_answer(generation.text);
      item.correct = exact_match(item.extracted, task.answers);
    }
    report.correct += item.correct ? 1 : 0;
    report.items.push_back(std::move(item));
  }
  report.accuracy =
      report.items.empty() ? 0.0 : static_cast<double>(report.correct) / static_cast<double>(report.items.size());
  report.metadata = {{"model", params.model_name},
                     {"task_file_hash", params.task_file_hash},
                     {"shots", max_shots},
                     {"joint_encoding", params.scoring.joint_encoding},
                     {"max_new_tokens", params.max_new_tokens}};
  return report;
}

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& item : report.items) {
    nlohmann::json j{{"id", item.id},
                     {"kind", item.kind == TaskKind::kMultipleChoice ? "multiple_choice" : "generative_qa"},
                     {"shots", item.shots},
                     {"correct", item.correct}};
    if (item.kind == TaskKind::kMultipleChoice) {
      j["scores"] = item.scores;
      j["chosen"] = item.chosen;
      j["gold_index"] = item.gold;
    } else {
      j["generated"] = item.generated;
      j["extracted"] = item.extracted;
    }
    items.push_back(std::move(j));
  }
  return nlohmann::json{{"items", items},
                        {"aggregate", {{"accuracy", report.accuracy},
                                       {"correct", report.correct},
                                       {"count", report.items.size()}}},
                        {"metadata", report.metadata}};
}

}  // namespace llama
