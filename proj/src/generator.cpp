#include "llama/generator.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace llama {

namespace {

Tensor slice_last_row(const Tensor& logits) {
  const std::int64_t rows = logits.dim(0), cols = logits.dim(1);
  const auto d = logits.data();
  return Tensor({cols}, std::vector<float>(d.begin() + (rows - 1) * cols, d.end()));
}

}  // namespace

void SampleParams::validate() const {
  if (mode == SampleMode::kTemperature && !(temperature > 0)) {
    throw ConfigError("temperature must be positive for temperature sampling");
  }
  if (max_new_tokens < 0) throw ConfigError("max_new_tokens must be non-negative");
}

const char* to_string(StopReason reason) {
  switch (reason) {
    case StopReason::kEos: return "eos";
    case StopReason::kStopToken: return "stop_token";
    case StopReason::kStopString: return "stop_string";
    case StopReason::kMaxTokens: return "max_tokens";
    case StopReason::kContextFull: return "context_full";
  }
  return "unknown";
}

TokenId select_next(std::span<const float> logits, const SampleParams& params, Rng& rng) {
  if (logits.empty()) throw InputError("select_next: empty logits");
  if (params.mode == SampleMode::kGreedy) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  const double inv_t = 1.0 / params.temperature;
  const double peak = *std::max_element(logits.begin(), logits.end()) * inv_t;
  std::vector<double> probs(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] * inv_t - peak);
    total += probs[i];
  }
  const double u = rng.uniform() * total;
  double cumulative = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    cumulative += probs[i];
    if (u < cumulative) return static_cast<TokenId>(i);
  }
  // Rounding left u at the very top; fall back to the last token with mass.
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0) return static_cast<TokenId>(i);
  }
  return 0;
}

Generation generate(const ModelConfig& config, const ModelWeights<float>& weights, std::span<const TokenId> prompt,
                    const SampleParams& params, const Tokenizer* tokenizer) {
  params.validate();
  if (prompt.empty()) throw InputError("generate: empty prompt");
  if (static_cast<std::int64_t>(prompt.size()) >= config.max_seq_len) {
    throw InputError("generate: prompt of " + std::to_string(prompt.size()) + " tokens leaves no room in max_seq_len " +
                     std::to_string(config.max_seq_len));
  }
  NoGradGuard no_grad;
  Rng rng(params.seed);
  AttentionCache<float> cache(config);
  std::vector<TokenId> context(prompt.begin(), prompt.end());
  Generation out;

  auto next_logits = [&]() -> Tensor {
    if (params.use_cache) {
      const auto fresh = std::span<const TokenId>(context).subspan(static_cast<std::size_t>(cache.length()));
      auto logits = forward(config, weights, fresh, &cache);
      return slice_last_row(logits);
    }
    return slice_last_row(forward(config, weights, std::span<const TokenId>(context)));
  };

  out.reason = StopReason::kMaxTokens;
  for (std::int64_t step = 0; step < params.max_new_tokens; ++step) {
    if (static_cast<std::int64_t>(context.size()) >= config.max_seq_len) {
      out.reason = StopReason::kContextFull;
      break;
    }
    const Tensor logits = next_logits();
    const TokenId next = select_next(logits.data(), params, rng);
    if (next == Tokenizer::kEos) {
      out.reason = StopReason::kEos;
      break;
    }
    if (std::find(params.stop_tokens.begin(), params.stop_tokens.end(), next) != params.stop_tokens.end()) {
      out.reason = StopReason::kStopToken;
      break;
    }
    out.tokens.push_back(next);
    context.push_back(next);
    if (tokenizer != nullptr && !params.stop_strings.empty()) {
      const std::string text = tokenizer->decode_text(out.tokens);
      std::size_t cut = std::string::npos;
      for (const auto& s : params.stop_strings) {
        if (!s.empty()) cut = std::min(cut, text.find(s));
      }
      if (cut != std::string::npos) {
        out.text = text.substr(0, cut);
        out.reason = StopReason::kStopString;
        return out;
      }
    }
  }
  if (tokenizer != nullptr) out.text = tokenizer->decode_text(out.tokens);
  return out;
}

double pass_at_k(std::int64_t n, std::int64_t c, std::int64_t k) {
  if (n < 0 || c < 0 || c > n) throw DomainError("pass_at_k: need 0 <= c <= n");
  if (k < 1 || k > n) throw DomainError("pass_at_k: need 1 <= k <= n");
  if (n - c < k) return 1.0;
  // C(n-c, k) / C(n, k) = prod_{i=n-c+1}^{n} (1 - k/i)
  double fail = 1.0;
  for (std::int64_t i = n - c + 1; i <= n; ++i) fail *= 1.0 - static_cast<double>(k) / static_cast<double>(i);
  return 1.0 - fail;
}

std::string majority_vote(std::span<const std::string> answers) {
  if (answers.empty()) throw DomainError("majority_vote: no answers");
  std::unordered_map<std::string, std::int64_t> counts;
  std::int64_t best_count = 0;
  for (const auto& a : answers) best_count = std::max(best_count, ++counts[a]);
  for (const auto& a : answers) {
    if (counts[a] == best_count) return a;
  }
  return answers.front();
}

nlohmann::json transcript_record(const std::string& prompt, const Generation& generation, const SampleParams& params) {
  nlohmann::json p{{"mode", params.mode == SampleMode::kGreedy ? "greedy" : "temperature"},
                   {"max_new_tokens", params.max_new_tokens},
                   {"stop_reason", to_string(generation.reason)}};
  if (params.mode == SampleMode::kTemperature) p["temperature"] = params.temperature;
  return nlohmann::json{{"prompt", prompt},
                        {"completion", generation.text},
                        {"token_count", generation.tokens.size()},
                        {"seed", params.seed},
                        {"params", p}};
}

}  // namespace llama
