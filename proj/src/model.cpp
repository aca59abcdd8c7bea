#include "llama/model.hpp"

#include <cmath>
#include <memory>

#include "llama/rng.hpp"

namespace llama {

void ModelConfig::validate() const {
  auto positive = [](const char* name, std::int64_t v) {
    if (v <= 0) throw ConfigError(std::string(name) + " must be positive, got " + std::to_string(v));
  };
  positive("dim", dim);
  positive("n_heads", n_heads);
  if (n_layers < 0) throw ConfigError("n_layers must be non-negative");
  positive("vocab_size", vocab_size);
  positive("max_seq_len", max_seq_len);
  positive("ffn_multiple", ffn_multiple);
  if (!(rope_base > 0)) throw ConfigError("rope_base must be positive");
  if (!(norm_eps > 0)) throw ConfigError("norm_eps must be positive");
  if (dim % n_heads != 0) {
    throw ConfigError("dim " + std::to_string(dim) + " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (head_dim() % 2 != 0) throw ConfigError("head_dim " + std::to_string(head_dim()) + " must be even");
}

std::int64_t ffn_hidden_dim(const ModelConfig& config) {
  const std::int64_t base = (2 * 4 * config.dim) / 3;
  const std::int64_t m = config.ffn_multiple;
  return (base + m - 1) / m * m;
}

std::int64_t count_params(const ModelConfig& config) {
  const std::int64_t d = config.dim, v = config.vocab_size, h = ffn_hidden_dim(config);
  const std::int64_t per_layer = 4 * d * d + 3 * d * h + 2 * d;
  return v * d + config.n_layers * per_layer + d + d * v;
}

const std::vector<ModelPreset>& model_presets() {
  static const std::vector<ModelPreset> presets = [] {
    auto make = [](std::int64_t dim, std::int64_t heads, std::int64_t layers) {
      ModelConfig c;
      c.dim = dim;
      c.n_heads = heads;
      c.n_layers = layers;
      c.vocab_size = 32000;
      c.ffn_multiple = 256;
      return c;
    };
    constexpr std::int64_t kBatch = 4 * 1024 * 1024;
    return std::vector<ModelPreset>{
        {"7B", make(4096, 32, 32), 3.0e-4, kBatch, 1.0e12, 6.7e9},
        {"13B", make(5120, 40, 40), 3.0e-4, kBatch, 1.0e12, 13.0e9},
        {"33B", make(6656, 52, 60), 1.5e-4, kBatch, 1.4e12, 32.5e9},
        {"65B", make(8192, 64, 80), 1.5e-4, kBatch, 1.4e12, 65.2e9},
    };
  }();
  return presets;
}

const ModelPreset& find_preset(const std::string& name) {
  for (const auto& p : model_presets()) {
    if (p.name == name) return p;
  }
  throw ConfigError("unknown preset '" + name + "' (expected 7B, 13B, 33B or 65B)");
}

std::vector<std::pair<std::string, Shape>> expected_tensor_layout(const ModelConfig& config) {
  const std::int64_t d = config.dim, v = config.vocab_size, h = ffn_hidden_dim(config);
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("tok_embeddings.weight", Shape{v, d});
  for (std::int64_t i = 0; i < config.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "attention_norm.weight", Shape{d});
    out.emplace_back(p + "attention.wq", Shape{d, d});
    out.emplace_back(p + "attention.wk", Shape{d, d});
    out.emplace_back(p + "attention.wv", Shape{d, d});
    out.emplace_back(p + "attention.wo", Shape{d, d});
    out.emplace_back(p + "ffn_norm.weight", Shape{d});
    out.emplace_back(p + "feed_forward.w_gate", Shape{d, h});
    out.emplace_back(p + "feed_forward.w_up", Shape{d, h});
    out.emplace_back(p + "feed_forward.w_down", Shape{h, d});
  }
  out.emplace_back("norm.weight", Shape{d});
  out.emplace_back("output.weight", Shape{d, v});
  return out;
}

template <typename S>
ModelWeights<S> ModelWeights<S>::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const double residual_scale = config.n_layers > 0 ? 1.0 / std::sqrt(2.0 * config.n_layers) : 1.0;
  auto normal = [&rng](Shape shape, double stddev) {
    std::vector<S> values(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : values) v = static_cast<S>(rng.normal(0.0, stddev));
    return BasicTensor<S>(std::move(shape), std::move(values));
  };
  const std::int64_t d = config.dim, v = config.vocab_size, h = ffn_hidden_dim(config);
  ModelWeights w;
  w.tok_embeddings = normal({v, d}, 0.02);
  for (std::int64_t i = 0; i < config.n_layers; ++i) {
    LayerWeights<S> l;
    l.attention_norm = BasicTensor<S>::full({d}, S(1));
    l.wq = normal({d, d}, 0.02);
    l.wk = normal({d, d}, 0.02);
    l.wv = normal({d, d}, 0.02);
    l.wo = normal({d, d}, 0.02 * residual_scale);
    l.ffn_norm = BasicTensor<S>::full({d}, S(1));
    l.w_gate = normal({d, h}, 0.02);
    l.w_up = normal({d, h}, 0.02);
    l.w_down = normal({h, d}, 0.02 * residual_scale);
    w.layers.push_back(std::move(l));
  }
  w.norm = BasicTensor<S>::full({d}, S(1));
  w.output = normal({d, v}, 0.02);
  return w;
}

template <typename S>
std::vector<NamedTensor<S>> ModelWeights<S>::named() const {
  std::vector<NamedTensor<S>> out;
  out.push_back({"tok_embeddings.weight", tok_embeddings, false});
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    const auto& l = layers[i];
    out.push_back({p + "attention_norm.weight", l.attention_norm, false});
    out.push_back({p + "attention.wq", l.wq, true});
    out.push_back({p + "attention.wk", l.wk, true});
    out.push_back({p + "attention.wv", l.wv, true});
    out.push_back({p + "attention.wo", l.wo, true});
    out.push_back({p + "ffn_norm.weight", l.ffn_norm, false});
    out.push_back({p + "feed_forward.w_gate", l.w_gate, true});
    out.push_back({p + "feed_forward.w_up", l.w_up, true});
    out.push_back({p + "feed_forward.w_down", l.w_down, true});
  }
  out.push_back({"norm.weight", norm, false});
  out.push_back({"output.weight", output, true});
  return out;
}

template <typename S>
ModelWeights<S> ModelWeights<S>::from_named(const ModelConfig& config, const std::vector<NamedTensor<S>>& tensors) {
  config.validate();
  const auto layout = expected_tensor_layout(config);
  if (tensors.size() != layout.size()) {
    throw FormatError("tensor count: expected " + std::to_string(layout.size()) + ", found " +
                      std::to_string(tensors.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (tensors[i].name != layout[i].first) {
      throw FormatError("tensor name: expected '" + layout[i].first + "' at index " + std::to_string(i) +
                        ", found '" + tensors[i].name + "'");
    }
    if (tensors[i].tensor.shape() != layout[i].second) {
      throw FormatError("tensor shape of '" + layout[i].first + "': expected " + shape_to_string(layout[i].second) +
                        ", found " + shape_to_string(tensors[i].tensor.shape()));
    }
  }
  ModelWeights w;
  std::size_t k = 0;
  w.tok_embeddings = tensors[k++].tensor;
  for (std::int64_t i = 0; i < config.n_layers; ++i) {
    LayerWeights<S> l;
    l.attention_norm = tensors[k++].tensor;
    l.wq = tensors[k++].tensor;
    l.wk = tensors[k++].tensor;
    l.wv = tensors[k++].tensor;
    l.wo = tensors[k++].tensor;
    l.ffn_norm = tensors[k++].tensor;
    l.w_gate = tensors[k++].tensor;
    l.w_up = tensors[k++].tensor;
    l.w_down = tensors[k++].tensor;
    w.layers.push_back(std::move(l));
  }
  w.norm = tensors[k++].tensor;
  w.output = tensors[k++].tensor;
  return w;
}

template <typename S>
void ModelWeights<S>::set_requires_grad(bool value) {
  for (auto& n : named()) n.tensor.set_requires_grad(value);
}

template <typename S>
void ModelWeights<S>::zero_grad() {
  for (auto& n : named()) n.tensor.zero_grad();
}

template <typename S>
AttentionCache<S>::AttentionCache(const ModelConfig& config)
    : dim_(config.dim),
      capacity_(config.max_seq_len),
      keys_(static_cast<std::size_t>(config.n_layers)),
      values_(static_cast<std::size_t>(config.n_layers)) {}

template <typename S>
BasicTensor<S> AttentionCache<S>::keys(std::int64_t layer) const {
  return BasicTensor<S>({length_, dim_}, std::vector<S>(keys_.at(layer).begin(), keys_.at(layer).begin() + length_ * dim_));
}

template <typename S>
BasicTensor<S> AttentionCache<S>::values(std::int64_t layer) const {
  return BasicTensor<S>({length_, dim_},
                        std::vector<S>(values_.at(layer).begin(), values_.at(layer).begin() + length_ * dim_));
}

template <typename S>
void AttentionCache<S>::append(std::int64_t layer, std::span<const S> k_rows, std::span<const S> v_rows) {
  auto& k = keys_.at(layer);
  auto& v = values_.at(layer);
  if (static_cast<std::int64_t>(k.size()) != length_ * dim_) {
    throw ContractError("attention cache: layer " + std::to_string(layer) + " appended twice before commit");
  }
  const auto rows = static_cast<std::int64_t>(k_rows.size()) / dim_;
  if (length_ + rows > capacity_) {
    throw CapacityError("attention cache: " + std::to_string(length_ + rows) + " positions exceed capacity " +
                        std::to_string(capacity_));
  }
  k.insert(k.end(), k_rows.begin(), k_rows.end());
  v.insert(v.end(), v_rows.begin(), v_rows.end());
}

template <typename S>
void AttentionCache<S>::commit(std::int64_t new_rows) {
  const std::int64_t target = (length_ + new_rows) * dim_;
  for (std::size_t l = 0; l < keys_.size(); ++l) {
    if (static_cast<std::int64_t>(keys_[l].size()) != target) {
      throw ContractError("attention cache: layer " + std::to_string(l) + " length differs from the others");
    }
  }
  length_ += new_rows;
}

template <typename S>
void AttentionCache<S>::clear() {
  for (auto& k : keys_) k.clear();
  for (auto& v : values_) v.clear();
  length_ = 0;
}

template <typename S>
BasicTensor<S> attention_core(const BasicTensor<S>& q, const BasicTensor<S>& k, const BasicTensor<S>& v,
                              std::int64_t n_heads, std::int64_t query_offset, AttentionMode mode) {
  if (mode == AttentionMode::kMemoryEfficient) return fused_causal_attention(q, k, v, n_heads, query_offset);
  if (query_offset < 0 || query_offset + q.dim(0) > k.dim(0)) {
    throw CapacityError("attention: queries reach past the available keys");
  }
  const std::int64_t hd = q.dim(1) / n_heads;
  const S softmax_scale = S(1) / std::sqrt(static_cast<S>(hd));
  std::vector<BasicTensor<S>> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  for (std::int64_t h = 0; h < n_heads; ++h) {
    auto qh = slice_columns(q, h * hd, hd);
    auto kh = slice_columns(k, h * hd, hd);
    auto vh = slice_columns(v, h * hd, hd);
    auto scores = scale(matmul(qh, transpose(kh)), softmax_scale);
    AllocationTracker::note("attention.scores", scores.numel());
    auto weights = softmax_rows(causal_mask(scores, query_offset));
    heads.push_back(matmul(weights, vh));
  }
  return n_heads == 1 ? heads.front() : concat(heads, 1);
}

template <typename S>
std::vector<BasicTensor<S>> naive_attention_weights(const BasicTensor<S>& q, const BasicTensor<S>& k,
                                                    std::int64_t n_heads, std::int64_t query_offset) {
  const std::int64_t hd = q.dim(1) / n_heads;
  const S softmax_scale = S(1) / std::sqrt(static_cast<S>(hd));
  std::vector<BasicTensor<S>> out;
  for (std::int64_t h = 0; h < n_heads; ++h) {
    auto scores = scale(matmul(slice_columns(q, h * hd, hd), transpose(slice_columns(k, h * hd, hd))), softmax_scale);
    out.push_back(softmax_rows(causal_mask(scores, query_offset)));
  }
  return out;
}

namespace {

// Projection outputs saved by the first pass of a checkpointed block and
// replayed, in the same order, when the block is recomputed during backward.
template <typename S>
struct LinearStash {
  enum class Mode { kRecord, kReplay };
  Mode mode = Mode::kRecord;
  std::vector<std::vector<S>> outputs;
  std::size_t cursor = 0;
};

template <typename S>
BasicTensor<S> linear(const BasicTensor<S>& x, const BasicTensor<S>& w, LinearStash<S>* stash) {
  if (stash == nullptr) return matmul(x, w);
  if (stash->mode == LinearStash<S>::Mode::kRecord) {
    auto y = matmul(x, w);
    stash->outputs.emplace_back(y.data().begin(), y.data().end());
    return y;
  }
  return matmul_saved(x, w, stash->outputs.at(stash->cursor++));
}

template <typename S>
std::vector<double> positions_from(std::int64_t offset, std::int64_t n) {
  std::vector<double> p(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) p[i] = static_cast<double>(offset + i);
  return p;
}

template <typename S>
BasicTensor<S> attention_sublayer(const ModelConfig& config, const LayerWeights<S>& layer, const BasicTensor<S>& x,
                                  AttentionMode mode, AttentionCache<S>* cache, std::int64_t layer_index,
                                  LinearStash<S>* stash) {
  const std::int64_t n = x.dim(0), d = config.dim, heads = config.n_heads, hd = config.head_dim();
  const std::int64_t offset = cache != nullptr ? cache->length() : 0;
  const auto positions = positions_from<S>(offset, n);
  auto rotate = [&](const BasicTensor<S>& t) {
    return reshape(rope_apply(reshape(t, {n, heads, hd}), std::span<const double>(positions), config.rope_base),
                   {n, d});
  };
  auto q = rotate(linear(x, layer.wq, stash));
  auto k = rotate(linear(x, layer.wk, stash));
  auto v = linear(x, layer.wv, stash);
  if (cache != nullptr) {
    if (offset > 0) {
      auto past_k = cache->keys(layer_index);
      auto past_v = cache->values(layer_index);
      cache->append(layer_index, k.data(), v.data());
      k = concat<S>({past_k, k}, 0);
      v = concat<S>({past_v, v}, 0);
    } else {
      cache->append(layer_index, k.data(), v.data());
    }
  }
  auto attended = attention_core(q, k, v, heads, offset, mode);
  return linear(attended, layer.wo, stash);
}

template <typename S>
BasicTensor<S> ffn_sublayer(const BasicTensor<S>& x, const LayerWeights<S>& layer, LinearStash<S>* stash) {
  auto gate = silu(linear(x, layer.w_gate, stash));
  auto up = linear(x, layer.w_up, stash);
  return linear(mul(gate, up), layer.w_down, stash);
}

template <typename S>
BasicTensor<S> block(const ModelConfig& config, const LayerWeights<S>& layer, const BasicTensor<S>& x,
                     AttentionMode mode, AttentionCache<S>* cache, std::int64_t layer_index, LinearStash<S>* stash) {
  const S eps = static_cast<S>(config.norm_eps);
  auto h = add(x, attention_sublayer(config, layer, rmsnorm(x, layer.attention_norm, eps), mode, cache, layer_index,
                                     stash));
  return add(h, ffn_sublayer(rmsnorm(h, layer.ffn_norm, eps), layer, stash));
}

template <typename S>
std::vector<const BasicTensor<S>*> layer_params(const LayerWeights<S>& l) {
  return {&l.attention_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.w_gate, &l.w_up, &l.w_down};
}

// Runs the block without recording, then records one node whose backward
// replays the block on a private tape.
template <typename S>
BasicTensor<S> checkpointed_block(const ModelConfig& config, const LayerWeights<S>& layer, const BasicTensor<S>& x,
                                  AttentionMode mode, CheckpointPolicy policy) {
  std::shared_ptr<LinearStash<S>> stash;
  if (policy == CheckpointPolicy::kSaveLinearOutputs) stash = std::make_shared<LinearStash<S>>();
  BasicTensor<S> y;
  {
    NoGradGuard no_grad;
    y = block<S>(config, layer, x.detach(), mode, nullptr, 0, stash.get());
  }
  BasicTensor<S> out(y.shape(), std::vector<S>(y.data().begin(), y.data().end()));

  std::vector<std::shared_ptr<detail::TensorImpl<S>>> inputs{x.impl()};
  for (const auto* p : layer_params(layer)) inputs.push_back(p->impl());
  auto x_impl = x.impl();
  BasicTape<S>::current()->record(
      std::move(inputs), out.impl(), [config, layer, x_impl, mode, stash](detail::TensorImpl<S>& o) {
        BasicTape<S> local;
        typename BasicTape<S>::Scope scope(local);
        BasicTensor<S> x_leaf(x_impl->shape, x_impl->data);
        x_leaf.set_requires_grad(true);
        if (stash) {
          stash->mode = LinearStash<S>::Mode::kReplay;
          stash->cursor = 0;
        }
        auto replay = block<S>(config, layer, x_leaf, mode, nullptr, 0, stash.get());
        local.backward_from(replay, o.grad);
        if (x_impl->requires_grad && x_leaf.has_grad()) x_impl->accumulate_grad(x_leaf.grad());
      });
  return out;
}

}  // namespace

template <typename S>
BasicTensor<S> causal_attention(const ModelConfig& config, const LayerWeights<S>& layer, const BasicTensor<S>& x,
                                AttentionMode mode, std::type_identity_t<AttentionCache<S>>* cache, std::int64_t layer_index) {
  return attention_sublayer<S>(config, layer, x, mode, cache, layer_index, nullptr);
}

template <typename S>
BasicTensor<S> swiglu_ffn(const BasicTensor<S>& x, const BasicTensor<S>& w_gate, const BasicTensor<S>& w_up,
                          const BasicTensor<S>& w_down) {
  return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down);
}

template <typename S>
BasicTensor<S> forward(const ModelConfig& config, const ModelWeights<S>& weights, std::span<const TokenId> ids,
                       std::type_identity_t<AttentionCache<S>>* cache, const ForwardOptions& options) {
  const auto n = static_cast<std::int64_t>(ids.size());
  if (n == 0) throw InputError("forward: empty token sequence");
  const std::int64_t offset = cache != nullptr ? cache->length() : 0;
  if (offset + n > config.max_seq_len) {
    if (cache != nullptr) {
      throw CapacityError("forward: " + std::to_string(offset + n) + " positions exceed max_seq_len " +
                          std::to_string(config.max_seq_len));
    }
    throw InputError("forward: sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                     std::to_string(config.max_seq_len));
  }
  for (TokenId id : ids) {
    if (id < 0 || id >= config.vocab_size) {
      throw InputError("forward: token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(config.vocab_size));
    }
  }
  auto x = embedding(weights.tok_embeddings, ids);
  for (std::size_t l = 0; l < weights.layers.size(); ++l) {
    const auto& layer = weights.layers[l];
    bool recording = false;
    if (options.checkpointing && cache == nullptr) {
      std::vector<const BasicTensor<S>*> ins{&x};
      for (const auto* p : layer_params(layer)) ins.push_back(p);
      recording = BasicTape<S>::current() != nullptr && GradMode::enabled();
      bool any = false;
      for (const auto* t : ins) any = any || t->requires_grad();
      recording = recording && any;
    }
    x = recording ? checkpointed_block<S>(config, layer, x, options.attention, options.checkpoint_policy)
                  : block<S>(config, layer, x, options.attention, cache, static_cast<std::int64_t>(l), nullptr);
  }
  if (cache != nullptr) cache->commit(n);
  auto h = rmsnorm(x, weights.norm, static_cast<S>(config.norm_eps));
  return matmul(h, weights.output);
}

#define LLAMA_INSTANTIATE_MODEL(S)                                                                                 \
  template struct ModelWeights<S>;                                                                                 \
  template class AttentionCache<S>;                                                                                \
  template BasicTensor<S> attention_core(const BasicTensor<S>&, const BasicTensor<S>&, const BasicTensor<S>&,      \
                                         std::int64_t, std::int64_t, AttentionMode);                               \
  template std::vector<BasicTensor<S>> naive_attention_weights(const BasicTensor<S>&, const BasicTensor<S>&,       \
                                                               std::int64_t, std::int64_t);                        \
  template BasicTensor<S> causal_attention<S>(const ModelConfig&, const LayerWeights<S>&, const BasicTensor<S>&,      \
                                           AttentionMode, AttentionCache<S>*, std::int64_t);                       \
  template BasicTensor<S> swiglu_ffn(const BasicTensor<S>&, const BasicTensor<S>&, const BasicTensor<S>&,          \
                                     const BasicTensor<S>&);                                                       \
  template BasicTensor<S> forward<S>(const ModelConfig&, const ModelWeights<S>&, std::span<const TokenId>,            \
                                  AttentionCache<S>*, const ForwardOptions&);

LLAMA_INSTANTIATE_MODEL(float)
LLAMA_INSTANTIATE_MODEL(double)

#undef LLAMA_INSTANTIATE_MODEL

}  // namespace llama
