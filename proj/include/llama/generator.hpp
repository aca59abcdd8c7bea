#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "llama/model.hpp"
#include "llama/rng.hpp"
#include "llama/tokenizer.hpp"

namespace llama {

enum class SampleMode { kGreedy, kTemperature };

struct SampleParams {
  SampleMode mode = SampleMode::kGreedy;
  double temperature = 1.0;
  std::int64_t max_new_tokens = 64;
  std::vector<TokenId> stop_tokens;  // EOS always stops generation
  std::vector<std::string> stop_strings;
  std::uint64_t seed = 0;
  bool use_cache = true;  // false recomputes the full context every step

  void validate() const;
};

enum class StopReason { kEos, kStopToken, kStopString, kMaxTokens, kContextFull };

const char* to_string(StopReason reason);

struct Generation {
  std::vector<TokenId> tokens;  // generated ids, stop token excluded
  std::string text;             // decoded completion, cut before any stop string
  StopReason reason = StopReason::kMaxTokens;
};

/// Greedy picks the highest logit (lowest id on ties). Temperature mode
/// samples from softmax(logits / T) using `rng`.
TokenId select_next(std::span<const float> logits, const SampleParams& params, Rng& rng);

/// Decodes from `prompt` until EOS, a stop condition, the token budget or a full context.
/// Stop strings need a tokenizer; without one `text` stays empty.
Generation generate(const ModelConfig& config, const ModelWeights<float>& weights, std::span<const TokenId> prompt,
                    const SampleParams& params, const Tokenizer* tokenizer = nullptr);

/// Unbiased pass@k estimate 1 - C(n-c, k) / C(n, k) from n samples with c
/// correct, evaluated as a running product so large n never overflows.
double pass_at_k(std::int64_t n, std::int64_t c, std::int64_t k);

/// Most frequent answer; ties go to the answer that appeared first.
std::string majority_vote(std::span<const std::string> answers);

/// One line of a generation transcript (serialize with dump()).
nlohmann::json transcript_record(const std::string& prompt, const Generation& generation, const SampleParams& params);

}  // namespace llama
