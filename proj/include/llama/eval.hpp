#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "llama/model.hpp"
#include "llama/tokenizer.hpp"

namespace llama {

enum class TaskKind { kMultipleChoice, kGenerativeQa };

/// How multiple-choice completions are ranked.
enum class NormRule {
  kChar,               // log P(completion | context) / characters(completion)
  kAnswerConditional,  // log P(completion | context) - log P(completion | "Answer:")
};

struct Exemplar {
  std::string question;
  std::string answer;
};

struct EvalTask {
  std::string id;
  TaskKind kind = TaskKind::kMultipleChoice;
  std::string context;               // multiple choice
  std::vector<std::string> choices;  // multiple choice
  std::int64_t gold_index = -1;      // multiple choice
  std::string question;              // generative QA
  std::vector<std::string> answers;  // generative QA, any of these is correct
  std::vector<Exemplar> fewshot;
  NormRule norm_rule = NormRule::kChar;

  /// Throws InputError if the task cannot be scored.
  void validate() const;
};

/// Borrowed view of everything needed to score text.
struct LanguageModel {
  const ModelConfig& config;
  const ModelWeights<float>& weights;
  const Tokenizer& tokenizer;
};

struct ScoringOptions {
  /// Encode context+completion in one pass and score the tokens past their
  /// shared prefix with the context encoding. When false the completion is
  /// encoded on its own and appended.
  bool joint_encoding = true;
};

/// Sum of log-probabilities of the completion's tokens given the context.
double completion_logprob(const LanguageModel& lm, std::string_view context, std::string_view completion,
                          const ScoringOptions& options = {});

double score_choice_char_norm(const LanguageModel& lm, std::string_view context, std::string_view completion,
                              const ScoringOptions& options = {});

double score_choice_answer_norm(const LanguageModel& lm, std::string_view context, std::string_view completion,
                                const ScoringOptions& options = {});

/// Index of the highest score; the lowest index wins exact ties.
std::size_t select_choice(std::span<const double> scores);
std::size_t select_choice(const EvalTask& task, std::span<const double> scores);

inline constexpr std::string_view kQaHeader = "Answer these questions:\n";

/// Header, then "Q: {q}\nA: {a}\n" per exemplar, then "Q: {question}\nA:".
std::string format_qa_prompt(std::span<const Exemplar> exemplars, std::string_view question);

/// Context for a multiple-choice item: each exemplar as question + answer + a
/// blank line, then the item context.
std::string format_mc_context(std::span<const Exemplar> exemplars, std::string_view context);

/// Text before the first line break, comma, or dot that ends the string or is
/// followed by whitespace; surrounding whitespace trimmed.
std::string extract_answer(std::string_view generated);

/// Lowercases, deletes Unicode punctuation, drops the words a/an/the and
/// collapses whitespace.
std::string normalize_answer(std::string_view text);

bool exact_match(std::string_view prediction, std::span<const std::string> answers);

struct TaskFile {
  std::vector<EvalTask> tasks;
  std::vector<std::string> warnings;  // unknown fields, one entry per occurrence
  std::string hash;                   // FNV-1a 64 of the file bytes, hex
};

/// One JSON object per line; blank lines are skipped. Malformed lines throw
/// IngestError carrying the 1-based line number.
TaskFile parse_tasks(std::string_view text);
TaskFile load_tasks(const std::string& path);

std::string fnv1a_hex(std::string_view bytes);

struct EvalParams {
  std::int64_t max_new_tokens = 32;
  ScoringOptions scoring;
  std::string model_name = "model";
  std::string task_file_hash;
};

struct ItemRecord {
  std::string id;
  TaskKind kind;
  std::int64_t shots = 0;
  std::vector<double> scores;
  std::int64_t chosen = -1;
  std::int64_t gold = -1;
  std::string generated;
  std::string extracted;
  bool correct = false;
};

struct EvalReport {
  std::vector<ItemRecord> items;
  double accuracy = 0.0;
  std::int64_t correct = 0;
  nlohmann::json metadata;
};

/// Scores every task: multiple choice by ranking completions under the task's
/// rule, QA by greedy generation, answer extraction and exact match.
EvalReport run_eval(const LanguageModel& lm, std::span<const EvalTask> tasks, const EvalParams& params = {});

nlohmann::json to_json(const EvalReport& report);

}  // namespace llama
