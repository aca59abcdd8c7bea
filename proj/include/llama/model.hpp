#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "llama/ops.hpp"
#include "llama/tensor.hpp"

namespace llama {

/// Architecture hyperparameters.
struct ModelConfig {
  std::int64_t dim = 64;
  std::int64_t n_heads = 4;
  std::int64_t n_layers = 2;
  std::int64_t vocab_size = 4096;
  std::int64_t max_seq_len = 256;
  std::int64_t ffn_multiple = 256;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;

  std::int64_t head_dim() const { return dim / n_heads; }

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// FFN width: floor(2/3 · 4 · dim) rounded up to a multiple of ffn_multiple.
std::int64_t ffn_hidden_dim(const ModelConfig& config);

/// Exact number of trainable scalars (untied embedding and output projection).
std::int64_t count_params(const ModelConfig& config);

/// One row of the published model-size table plus its optimisation settings.
struct ModelPreset {
  std::string name;
  ModelConfig config;
  double learning_rate;
  std::int64_t batch_tokens;
  double train_tokens;
  double reported_params;
};

/// 7B, 13B, 33B and 65B with V = 32,000 and ffn_multiple = 256.
const std::vector<ModelPreset>& model_presets();
const ModelPreset& find_preset(const std::string& name);

template <typename Scalar>
struct LayerWeights {
  BasicTensor<Scalar> attention_norm;  // [d]
  BasicTensor<Scalar> wq, wk, wv, wo;  // [d x d]
  BasicTensor<Scalar> ffn_norm;        // [d]
  BasicTensor<Scalar> w_gate, w_up;    // [d x h]
  BasicTensor<Scalar> w_down;          // [h x d]
};

/// A named parameter. `decay` marks tensors that receive weight decay.
template <typename Scalar>
struct NamedTensor {
  std::string name;
  BasicTensor<Scalar> tensor;
  bool decay = false;
};

template <typename Scalar>
struct ModelWeights {
  BasicTensor<Scalar> tok_embeddings;  // [V x d]
  std::vector<LayerWeights<Scalar>> layers;
  BasicTensor<Scalar> norm;    // [d]
  BasicTensor<Scalar> output;  // [d x V]

  /// normal(0, 0.02) projections; wo and w_down additionally scaled by
  /// 1/sqrt(2 · n_layers); norm gains start at one.
  static ModelWeights init(const ModelConfig& config, std::uint64_t seed);

  /// Tensors with their checkpoint names, in a fixed order. Handles share storage.
  std::vector<NamedTensor<Scalar>> named() const;

  /// Rebuilds weights from named tensors; checks names, count and shapes against config.
  static ModelWeights from_named(const ModelConfig& config, const std::vector<NamedTensor<Scalar>>& tensors);

  void set_requires_grad(bool value);
  void zero_grad();

  template <typename Other>
  ModelWeights<Other> cast() const;
};

/// Names and shapes every checkpoint for `config` must contain, in order.
std::vector<std::pair<std::string, Shape>> expected_tensor_layout(const ModelConfig& config);

/// Keys and values (after rotary embedding) of positions already processed.
template <typename Scalar>
class AttentionCache {
 public:
  explicit AttentionCache(const ModelConfig& config);

  std::int64_t length() const { return length_; }
  std::int64_t capacity() const { return capacity_; }
  std::int64_t n_layers() const { return static_cast<std::int64_t>(keys_.size()); }

  /// Cached keys / values of one layer as [length x d] constants.
  BasicTensor<Scalar> keys(std::int64_t layer) const;
  BasicTensor<Scalar> values(std::int64_t layer) const;

  /// Appends rows for one layer. After every layer has been extended by the
  /// same count, commit() advances length().
  void append(std::int64_t layer, std::span<const Scalar> k_rows, std::span<const Scalar> v_rows);
  void commit(std::int64_t new_rows);
  void clear();

 private:
  std::int64_t dim_;
  std::int64_t capacity_;
  std::int64_t length_ = 0;
  std::vector<std::vector<Scalar>> keys_;
  std::vector<std::vector<Scalar>> values_;
};

enum class AttentionMode { kNaive, kMemoryEfficient };

/// Which activations a checkpointed block keeps from its first forward pass.
enum class CheckpointPolicy {
  kBlockInputs,        // everything inside the block is recomputed
  kSaveLinearOutputs,  // projection outputs are kept; norms, rotary, attention and activations recomputed
};

struct ForwardOptions {
  AttentionMode attention = AttentionMode::kMemoryEfficient;
  bool checkpointing = false;
  CheckpointPolicy checkpoint_policy = CheckpointPolicy::kSaveLinearOutputs;
};

/// Multi-head attention over already-projected q [n x d], k/v [L x d].
template <typename Scalar>
BasicTensor<Scalar> attention_core(const BasicTensor<Scalar>& q, const BasicTensor<Scalar>& k,
                                   const BasicTensor<Scalar>& v, std::int64_t n_heads, std::int64_t query_offset,
                                   AttentionMode mode);

/// Per-head softmax weights [n x L] of the naive path. Exposed for tests.
template <typename Scalar>
std::vector<BasicTensor<Scalar>> naive_attention_weights(const BasicTensor<Scalar>& q, const BasicTensor<Scalar>& k,
                                                         std::int64_t n_heads, std::int64_t query_offset);

/// Attention sub-layer on normalised input x [seq x d]: projections, rotary
/// embedding on q and k, causal attention, output projection. With a cache,
/// x holds the positions following the cached ones and the layer's cache
/// entries are extended (call cache->commit after the last layer).
template <typename Scalar>
BasicTensor<Scalar> causal_attention(const ModelConfig& config, const LayerWeights<Scalar>& layer,
                                     const BasicTensor<Scalar>& x, AttentionMode mode,
                                     std::type_identity_t<AttentionCache<Scalar>>* cache = nullptr, std::int64_t layer_index = 0);

/// (silu(x·W_gate) ⊙ (x·W_up))·W_down.
template <typename Scalar>
BasicTensor<Scalar> swiglu_ffn(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& w_gate,
                               const BasicTensor<Scalar>& w_up, const BasicTensor<Scalar>& w_down);

/// Logits [seq x V] for `ids`. With a cache the ids continue the cached prefix.
template <typename Scalar>
BasicTensor<Scalar> forward(const ModelConfig& config, const ModelWeights<Scalar>& weights,
                            std::span<const TokenId> ids, std::type_identity_t<AttentionCache<Scalar>>* cache = nullptr,
                            const ForwardOptions& options = {});

template <typename Scalar>
template <typename Other>
ModelWeights<Other> ModelWeights<Scalar>::cast() const {
  auto conv = [](const BasicTensor<Scalar>& t) { return BasicTensor<Other>::cast_from(t); };
  ModelWeights<Other> out;
  out.tok_embeddings = conv(tok_embeddings);
  out.norm = conv(norm);
  out.output = conv(output);
  for (const auto& l : layers) {
    out.layers.push_back({conv(l.attention_norm), conv(l.wq), conv(l.wk), conv(l.wv), conv(l.wo),
                          conv(l.ffn_norm), conv(l.w_gate), conv(l.w_up), conv(l.w_down)});
  }
  return out;
}

}  // namespace llama
