#include "llama/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace llama {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto extent : shape) {
    if (extent <= 0) throw DimensionError("non-positive extent in shape " + shape_to_string(shape));
    n *= extent;
  }
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::int64_t AllocationTracker::max_elements() const {
  std::int64_t best = 0;
  for (const auto& r : records_) best = std::max(best, r.elements);
  return best;
}

namespace {

template <typename S>
using T = BasicTensor<S>;

template <typename S>
using ImplPtr = std::shared_ptr<detail::TensorImpl<S>>;

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
Eigen::Map<const RowMatrix<S>> view(const std::vector<S>& v, std::int64_t rows, std::int64_t cols) {
  return Eigen::Map<const RowMatrix<S>>(v.data(), rows, cols);
}

template <typename S>
void record(std::initializer_list<const T<S>*> inputs, const T<S>& out,
            typename BasicTape<S>::BackwardFn fn) {
  std::vector<ImplPtr<S>> ins;
  ins.reserve(inputs.size());
  for (const auto* t : inputs) ins.push_back(t->impl());
  BasicTape<S>::current()->record(std::move(ins), out.impl(), std::move(fn));
}

template <typename S>
void accumulate(const ImplPtr<S>& target, std::span<const S> g) {
  if (target->requires_grad) target->accumulate_grad(g);
}

template <typename S>
void require_same_shape(const char* op, const T<S>& a, const T<S>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

template <typename S>
void require_rank(const char* op, const T<S>& x, std::int64_t rank) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_to_string(x.shape()));
  }
}

}  // namespace

namespace {

template <typename S>
void require_matmul_shapes(const T<S>& a, const T<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_to_string(a.shape()) + " by " +
                         shape_to_string(b.shape()));
  }
}

template <typename S>
void record_matmul(const T<S>& a, const T<S>& b, const T<S>& out) {
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto ai = a.impl(), bi = b.impl();
  record<S>({&a, &b}, out, [ai, bi, m, k, n](detail::TensorImpl<S>& o) {
    const auto dc = view(o.grad, m, n);
    if (ai->requires_grad) {
      RowMatrix<S> da = dc * view(bi->data, k, n).transpose();
      ai->accumulate_grad(std::span<const S>(da.data(), da.size()));
    }
    if (bi->requires_grad) {
      RowMatrix<S> db = view(ai->data, m, k).transpose() * dc;
      bi->accumulate_grad(std::span<const S>(db.data(), db.size()));
    }
  });
}

}  // namespace

template <typename S>
T<S> matmul(const T<S>& a, const T<S>& b) {
  require_matmul_shapes(a, b);
  const std::int64_t m = a.dim(0), n = b.dim(1);
  T<S> out = T<S>::zeros({m, n});
  Eigen::Map<RowMatrix<S>>(out.mutable_data().data(), m, n).noalias() = a.matrix() * b.matrix();
  if (BasicTape<S>::should_record({&a, &b})) record_matmul(a, b, out);
  return out;
}

template <typename S>
T<S> matmul_saved(const T<S>& a, const T<S>& b, std::vector<S> product) {
  require_matmul_shapes(a, b);
  T<S> out({a.dim(0), b.dim(1)}, std::move(product));
  if (BasicTape<S>::should_record({&a, &b})) record_matmul(a, b, out);
  return out;
}

template <typename S>
T<S> add(const T<S>& a, const T<S>& b) {
  require_same_shape("add", a, b);
  std::vector<S> values(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] += bd[i];
  T<S> out(a.shape(), std::move(values));
  if (BasicTape<S>::should_record({&a, &b})) {
    auto ai = a.impl(), bi = b.impl();
    record<S>({&a, &b}, out, [ai, bi](detail::TensorImpl<S>& o) {
      accumulate<S>(ai, o.grad);
      accumulate<S>(bi, o.grad);
    });
  }
  return out;
}

template <typename S>
T<S> mul(const T<S>& a, const T<S>& b) {
  require_same_shape("mul", a, b);
  std::vector<S> values(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] *= bd[i];
  T<S> out(a.shape(), std::move(values));
  if (BasicTape<S>::should_record({&a, &b})) {
    auto ai = a.impl(), bi = b.impl();
    record<S>({&a, &b}, out, [ai, bi](detail::TensorImpl<S>& o) {
      const std::size_t n = o.grad.size();
      std::vector<S> g(n);
      if (ai->requires_grad) {
        for (std::size_t i = 0; i < n; ++i) g[i] = o.grad[i] * bi->data[i];
        ai->accumulate_grad(g);
      }
      if (bi->requires_grad) {
        for (std::size_t i = 0; i < n; ++i) g[i] = o.grad[i] * ai->data[i];
        bi->accumulate_grad(g);
      }
    });
  }
  return out;
}

template <typename S>
T<S> scale(const T<S>& x, S factor) {
  std::vector<S> values(x.data().begin(), x.data().end());
  for (auto& v : values) v *= factor;
  T<S> out(x.shape(), std::move(values));
  if (BasicTape<S>::should_record({&x})) {
    auto xi = x.impl();
    record<S>({&x}, out, [xi, factor](detail::TensorImpl<S>& o) {
      std::vector<S> g(o.grad);
      for (auto& v : g) v *= factor;
      xi->accumulate_grad(g);
    });
  }
  return out;
}

template <typename S>
T<S> add_row_bias(const T<S>& x, const T<S>& bias) {
  require_rank("add_row_bias", x, 2);
  if (bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw DimensionError("add_row_bias: bias " + shape_to_string(bias.shape()) + " does not match rows of " +
                         shape_to_string(x.shape()));
  }
  const std::int64_t m = x.dim(0), n = x.dim(1);
  std::vector<S> values(x.data().begin(), x.data().end());
  const auto bd = bias.data();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) values[i * n + j] += bd[j];
  T<S> out(x.shape(), std::move(values));
  if (BasicTape<S>::should_record({&x, &bias})) {
    auto xi = x.impl(), bi = bias.impl();
    record<S>({&x, &bias}, out, [xi, bi, m, n](detail::TensorImpl<S>& o) {
      accumulate<S>(xi, o.grad);
      if (bi->requires_grad) {
        std::vector<S> g(n, S(0));
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < n; ++j) g[j] += o.grad[i * n + j];
        bi->accumulate_grad(g);
      }
    });
  }
  return out;
}

template <typename S>
T<S> silu(const T<S>& x) {
  std::vector<S> values(x.data().begin(), x.data().end());
  for (auto& v : values) v = v / (S(1) + std::exp(-v));
  T<S> out(x.shape(), std::move(values));
  if (BasicTape<S>::should_record({&x})) {
    auto xi = x.impl();
    record<S>({&x}, out, [xi](detail::TensorImpl<S>& o) {
      std::vector<S> g(o.grad.size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const S v = xi->data[i];
        const S sig = S(1) / (S(1) + std::exp(-v));
        g[i] = o.grad[i] * sig * (S(1) + v * (S(1) - sig));
      }
      xi->accumulate_grad(g);
    });
  }
  return out;
}

template <typename S>
T<S> embedding(const T<S>& table, std::span<const TokenId> ids) {
  require_rank("embedding", table, 2);
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  const std::int64_t vocab = table.dim(0), d = table.dim(1);
  const auto n = static_cast<std::int64_t>(ids.size());
  std::vector<S> values(static_cast<std::size_t>(n * d));
  const auto td = table.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const TokenId id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= vocab) {
      throw IndexError("embedding: id " + std::to_string(id) + " outside [0, " + std::to_string(vocab) + ")");
    }
    std::copy_n(td.begin() + id * d, d, values.begin() + i * d);
  }
  T<S> out({n, d}, std::move(values));
  if (BasicTape<S>::should_record({&table})) {
    auto ti = table.impl();
    std::vector<TokenId> idx(ids.begin(), ids.end());
    record<S>({&table}, out, [ti, idx = std::move(idx), d](detail::TensorImpl<S>& o) {
      std::vector<S> g(ti->data.size(), S(0));
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::int64_t j = 0; j < d; ++j) g[idx[i] * d + j] += o.grad[i * d + j];
      ti->accumulate_grad(g);
    });
  }
  return out;
}

template <typename S>
T<S> reshape(const T<S>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " + shape_to_string(shape));
  }
  T<S> out(std::move(shape), std::vector<S>(x.data().begin(), x.data().end()));
  if (BasicTape<S>::should_record({&x})) {
    auto xi = x.impl();
    record<S>({&x}, out, [xi](detail::TensorImpl<S>& o) { xi->accumulate_grad(o.grad); });
  }
  return out;
}

template <typename S>
T<S> transpose(const T<S>& x) {
  require_rank("transpose", x, 2);
  const std::int64_t m = x.dim(0), n = x.dim(1);
  T<S> out = T<S>::zeros({n, m});
  Eigen::Map<RowMatrix<S>>(out.mutable_data().data(), n, m) = x.matrix().transpose();
  if (BasicTape<S>::should_record({&x})) {
    auto xi = x.impl();
    record<S>({&x}, out, [xi, m, n](detail::TensorImpl<S>& o) {
      RowMatrix<S> g = view(o.grad, n, m).transpose();
      xi->accumulate_grad(std::span<const S>(g.data(), g.size()));
    });
  }
  return out;
}

template <typename S>
T<S> concat(const std::vector<T<S>>& parts, std::int64_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const auto& first = parts.front().shape();
  if (axis < 0 || axis >= static_cast<std::int64_t>(first.size())) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " invalid for shape " + shape_to_string(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = first;
    if (a.size() != b.size()) throw DimensionError("concat: rank mismatch");
    a[axis] = b[axis] = 0;
    if (a != b) {
      throw DimensionError("concat: shapes " + shape_to_string(first) + " and " + shape_to_string(p.shape()) +
                           " differ off axis " + std::to_string(axis));
    }
    out_shape[axis] += p.shape()[axis];
  }
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::int64_t out_row = out_shape[axis] * inner;

  std::vector<S> values(static_cast<std::size_t>(outer * out_row));
  std::vector<std::int64_t> widths;
  std::int64_t col = 0;
  for (const auto& p : parts) {
    const std::int64_t w = p.shape()[axis] * inner;
    const auto pd = p.data();
    for (std::int64_t o = 0; o < outer; ++o) std::copy_n(pd.begin() + o * w, w, values.begin() + o * out_row + col);
    widths.push_back(w);
    col += w;
  }
  T<S> out(std::move(out_shape), std::move(values));

  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (any && BasicTape<S>::current() != nullptr && GradMode::enabled()) {
    std::vector<ImplPtr<S>> ins;
    for (const auto& p : parts) ins.push_back(p.impl());
    auto captured = ins;
    BasicTape<S>::current()->record(
        std::move(ins), out.impl(), [captured, widths, outer, out_row](detail::TensorImpl<S>& o) {
          std::int64_t offset = 0;
          for (std::size_t k = 0; k < captured.size(); ++k) {
            const std::int64_t w = widths[k];
            if (captured[k]->requires_grad) {
              std::vector<S> g(static_cast<std::size_t>(outer * w));
              for (std::int64_t r = 0; r < outer; ++r)
                std::copy_n(o.grad.begin() + r * out_row + offset, w, g.begin() + r * w);
              captured[k]->accumulate_grad(g);
            }
            offset += w;
          }
        });
  }
  return out;
}

template <typename S>
T<S> slice_columns(const T<S>& x, std::int64_t offset, std::int64_t width) {
  require_rank("slice_columns", x, 2);
  const std::int64_t m = x.dim(0), n = x.dim(1);
  if (offset < 0 || width <= 0 || offset + width > n) {
    throw IndexError("slice_columns: [" + std::to_string(offset) + ", " + std::to_string(offset + width) +
                     ") outside " + std::to_string(n) + " columns");
  }
  std::vector<S> values(static_cast<std::size_t>(m * width));
  const auto xd = x.data();
  for (std::int64_t i = 0; i < m; ++i) std::copy_n(xd.begin() + i * n + offset, width, values.begin() + i * width);
  T<S> out({m, width}, std::move(values));
  if (BasicTape<S>::should_record({&x})) {
    auto xi = x.impl();
    record<S>({&x}, out, [xi, m, n, offset, width](detail::TensorImpl<S>& o) {
      std::vector<S> g(static_cast<std::size_t>(m * n), S(0));
      for (std::int64_t i = 0; i < m; ++i)
        std::copy_n(o.grad.begin() + i * width, width, g.begin() + i * n + offset);
      xi->accumulate_grad(g);
    });
  }
  return out;
}

template <typename S>
T<S> sum(const T<S>& x) {
  S total(0);
  for (S v : x.data()) total += v;
  T<S> out = T<S>::scalar(total);
  if (BasicTape<S>::should_record({&x})) {
    auto xi = x.impl();
    record<S>({&x}, out, [xi](detail::TensorImpl<S>& o) {
      xi->accumulate_grad(std::vector<S>(xi->data.size(), o.grad[0]));
    });
  }
  return out;
}

template <typename S>
T<S> mean(const T<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.numel()));
}

template <typename S>
T<S> softmax_rows(const T<S>& x) {
  require_rank("softmax_rows", x, 2);
  const std::int64_t m = x.dim(0), n = x.dim(1);
  std::vector<S> values(x.data().begin(), x.data().end());
  for (std::int64_t i = 0; i < m; ++i) {
    S* row = values.data() + i * n;
    const S peak = *std::max_element(row, row + n);
    S total(0);
    for (std::int64_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - peak);
      total += row[j];
    }
    for (std::int64_t j = 0; j < n; ++j) row[j] /= total;
  }
  T<S> out(x.shape(), std::move(values));
  if (BasicTape<S>::should_record({&x})) {
    auto xi = x.impl();
    record<S>({&x}, out, [xi, m, n](detail::TensorImpl<S>& o) {
      std::vector<S> g(o.grad.size());
      for (std::int64_t i = 0; i < m; ++i) {
        const S* y = o.data.data() + i * n;
        const S* dy = o.grad.data() + i * n;
        S dot(0);
        for (std::int64_t j = 0; j < n; ++j) dot += y[j] * dy[j];
        for (std::int64_t j = 0; j < n; ++j) g[i * n + j] = y[j] * (dy[j] - dot);
      }
      xi->accumulate_grad(g);
    });
  }
  return out;
}

template <typename S>
T<S> causal_mask(const T<S>& scores, std::int64_t query_offset) {
  require_rank("causal_mask", scores, 2);
  const std::int64_t m = scores.dim(0), n = scores.dim(1);
  std::vector<S> values(scores.data().begin(), scores.data().end());
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = query_offset + i + 1; j < n; ++j) values[i * n + j] = -std::numeric_limits<S>::infinity();
  T<S> out(scores.shape(), std::move(values));
  if (BasicTape<S>::should_record({&scores})) {
    auto si = scores.impl();
    record<S>({&scores}, out, [si, m, n, query_offset](detail::TensorImpl<S>& o) {
      std::vector<S> g(o.grad);
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = query_offset + i + 1; j < n; ++j) g[i * n + j] = S(0);
      si->accumulate_grad(g);
    });
  }
  return out;
}

template <typename S>
T<S> cross_entropy(const T<S>& logits, std::span<const TokenId> targets, TokenId ignore_index) {
  require_rank("cross_entropy", logits, 2);
  const std::int64_t b = logits.dim(0), vocab = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != b) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(b) +
                         " rows");
  }
  const auto ld = logits.data();
  std::vector<S> probs(ld.begin(), ld.end());
  std::int64_t count = 0;
  S total(0);
  for (std::int64_t i = 0; i < b; ++i) {
    const TokenId t = targets[i];
    if (t == ignore_index) continue;
    if (t < 0 || t >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(vocab) + ")");
    }
    S* row = probs.data() + i * vocab;
    const S peak = *std::max_element(row, row + vocab);
    S z(0);
    for (std::int64_t j = 0; j < vocab; ++j) z += std::exp(row[j] - peak);
    const S lse = peak + std::log(z);
    total += lse - row[t];
    for (std::int64_t j = 0; j < vocab; ++j) row[j] = std::exp(row[j] - lse);
    ++count;
  }
  if (count == 0) throw DomainError("cross_entropy: no valid targets");
  T<S> out = T<S>::scalar(total / static_cast<S>(count));
  if (BasicTape<S>::should_record({&logits})) {
    auto li = logits.impl();
    std::vector<TokenId> tg(targets.begin(), targets.end());
    record<S>({&logits}, out,
              [li, probs = std::move(probs), tg = std::move(tg), b, vocab, count, ignore_index](
                  detail::TensorImpl<S>& o) {
                std::vector<S> g(probs.size(), S(0));
                const S w = o.grad[0] / static_cast<S>(count);
                for (std::int64_t i = 0; i < b; ++i) {
                  if (tg[i] == ignore_index) continue;
                  for (std::int64_t j = 0; j < vocab; ++j) g[i * vocab + j] = w * probs[i * vocab + j];
                  g[i * vocab + tg[i]] -= w;
                }
                li->accumulate_grad(g);
              });
  }
  return out;
}

template <typename S>
T<S> rmsnorm(const T<S>& x, const T<S>& gain, S eps) {
  if (x.rank() < 1 || gain.rank() != 1 || gain.dim(0) != x.dim(x.rank() - 1)) {
    throw DimensionError("rmsnorm: gain " + shape_to_string(gain.shape()) + " does not match last axis of " +
                         shape_to_string(x.shape()));
  }
  const std::int64_t d = gain.dim(0), rows = x.numel() / d;
  const auto xd = x.data();
  const auto gd = gain.data();
  std::vector<S> values(xd.size());
  std::vector<S> inv_rms(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    S ss(0);
    for (std::int64_t j = 0; j < d; ++j) ss += xd[r * d + j] * xd[r * d + j];
    inv_rms[r] = S(1) / std::sqrt(ss / static_cast<S>(d) + eps);
    for (std::int64_t j = 0; j < d; ++j) values[r * d + j] = gd[j] * xd[r * d + j] * inv_rms[r];
  }
  T<S> out(x.shape(), std::move(values));
  if (BasicTape<S>::should_record({&x, &gain})) {
    auto xi = x.impl(), gi = gain.impl();
    record<S>({&x, &gain}, out, [xi, gi, inv_rms = std::move(inv_rms), d, rows](detail::TensorImpl<S>& o) {
      const auto& xv = xi->data;
      const auto& gv = gi->data;
      if (xi->requires_grad) {
        std::vector<S> g(xv.size());
        for (std::int64_t r = 0; r < rows; ++r) {
          const S inv = inv_rms[r];
          S dot(0);
          for (std::int64_t j = 0; j < d; ++j) dot += gv[j] * o.grad[r * d + j] * xv[r * d + j];
          const S coeff = dot * inv * inv * inv / static_cast<S>(d);
          for (std::int64_t j = 0; j < d; ++j)
            g[r * d + j] = gv[j] * o.grad[r * d + j] * inv - xv[r * d + j] * coeff;
        }
        xi->accumulate_grad(g);
      }
      if (gi->requires_grad) {
        std::vector<S> g(static_cast<std::size_t>(d), S(0));
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t j = 0; j < d; ++j) g[j] += o.grad[r * d + j] * xv[r * d + j] * inv_rms[r];
        gi->accumulate_grad(g);
      }
    });
  }
  return out;
}

namespace {

// cos/sin tables [seq × half] computed in double.
struct RotaryTable {
  std::vector<double> cos, sin;
};

RotaryTable rotary_table(std::span<const double> positions, std::int64_t head_dim, double base) {
  const std::int64_t half = head_dim / 2;
  RotaryTable t;
  t.cos.resize(positions.size() * half);
  t.sin.resize(positions.size() * half);
  for (std::size_t s = 0; s < positions.size(); ++s) {
    for (std::int64_t i = 0; i < half; ++i) {
      const double theta = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = positions[s] * theta;
      t.cos[s * half + i] = std::cos(angle);
      t.sin[s * half + i] = std::sin(angle);
    }
  }
  return t;
}

// Rotates every pair by +angle (sign = 1) or -angle (sign = -1).
template <typename S>
void rotate_pairs(std::span<const S> in, std::span<S> out, const RotaryTable& table, std::int64_t seq,
                  std::int64_t groups, std::int64_t head_dim, double sign) {
  const std::int64_t half = head_dim / 2;
  for (std::int64_t s = 0; s < seq; ++s) {
    for (std::int64_t h = 0; h < groups; ++h) {
      const std::int64_t base = (s * groups + h) * head_dim;
      for (std::int64_t i = 0; i < half; ++i) {
        const S c = static_cast<S>(table.cos[s * half + i]);
        const S sn = static_cast<S>(sign * table.sin[s * half + i]);
        const S a = in[base + 2 * i], b = in[base + 2 * i + 1];
        out[base + 2 * i] = a * c - b * sn;
        out[base + 2 * i + 1] = a * sn + b * c;
      }
    }
  }
}

}  // namespace

template <typename S>
T<S> rope_apply(const T<S>& x, std::span<const double> positions, double base) {
  if (x.rank() < 2) throw DimensionError("rope_apply: need [seq x ... x head_dim], got " + shape_to_string(x.shape()));
  const std::int64_t seq = x.dim(0), head_dim = x.dim(x.rank() - 1);
  if (head_dim % 2 != 0) throw ConfigError("rope_apply: head_dim " + std::to_string(head_dim) + " is odd");
  if (static_cast<std::int64_t>(positions.size()) != seq) {
    throw DimensionError("rope_apply: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(seq) + " rows");
  }
  for (double p : positions) {
    if (p < 0) throw DomainError("rope_apply: negative position");
  }
  const std::int64_t groups = x.numel() / (seq * head_dim);
  auto table = std::make_shared<RotaryTable>(rotary_table(positions, head_dim, base));
  T<S> out = T<S>::zeros(x.shape());
  rotate_pairs<S>(x.data(), out.mutable_data(), *table, seq, groups, head_dim, 1.0);
  if (BasicTape<S>::should_record({&x})) {
    auto xi = x.impl();
    record<S>({&x}, out, [xi, table, seq, groups, head_dim](detail::TensorImpl<S>& o) {
      std::vector<S> g(o.grad.size());
      rotate_pairs<S>(o.grad, g, *table, seq, groups, head_dim, -1.0);
      xi->accumulate_grad(g);
    });
  }
  return out;
}

template <typename S>
T<S> rope_apply(const T<S>& x, std::span<const std::int64_t> positions, double base) {
  std::vector<double> p(positions.begin(), positions.end());
  return rope_apply(x, std::span<const double>(p), base);
}

template <typename S>
T<S> fused_causal_attention(const T<S>& q, const T<S>& k, const T<S>& v, std::int64_t n_heads,
                            std::int64_t query_offset) {
  require_rank("attention", q, 2);
  require_rank("attention", k, 2);
  require_same_shape("attention", k, v);
  const std::int64_t n = q.dim(0), d = q.dim(1), len = k.dim(0);
  if (k.dim(1) != d) {
    throw DimensionError("attention: query " + shape_to_string(q.shape()) + " vs key " + shape_to_string(k.shape()));
  }
  if (n_heads <= 0 || d % n_heads != 0) throw ConfigError("attention: width not divisible by heads");
  if (query_offset < 0 || query_offset + n > len) {
    throw CapacityError("attention: queries reach position " + std::to_string(query_offset + n - 1) + " but only " +
                        std::to_string(len) + " keys");
  }
  const std::int64_t hd = d / n_heads;
  const S softmax_scale = S(1) / std::sqrt(static_cast<S>(hd));
  const auto qd = q.data(), kd = k.data(), vd = v.data();

  T<S> out = T<S>::zeros({n, d});
  auto od = out.mutable_data();
  std::vector<S> lse(static_cast<std::size_t>(n * n_heads));
  AllocationTracker::note("attention.lse", n * n_heads);

  for (std::int64_t h = 0; h < n_heads; ++h) {
    const std::int64_t c0 = h * hd;
    for (std::int64_t i = 0; i < n; ++i) {
      const S* qi = qd.data() + i * d + c0;
      S* oi = od.data() + i * d + c0;
      S running_max = -std::numeric_limits<S>::infinity();
      S running_sum(0);
      for (std::int64_t j = 0; j <= query_offset + i; ++j) {
        const S* kj = kd.data() + j * d + c0;
        S s(0);
        for (std::int64_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
        s *= softmax_scale;
        const S* vj = vd.data() + j * d + c0;
        if (s > running_max) {
          const S correction = std::exp(running_max - s);
          running_sum *= correction;
          for (std::int64_t c = 0; c < hd; ++c) oi[c] *= correction;
          running_max = s;
        }
        const S p = std::exp(s - running_max);
        running_sum += p;
        for (std::int64_t c = 0; c < hd; ++c) oi[c] += p * vj[c];
      }
      for (std::int64_t c = 0; c < hd; ++c) oi[c] /= running_sum;
      lse[i * n_heads + h] = running_max + std::log(running_sum);
    }
  }

  if (BasicTape<S>::should_record({&q, &k, &v})) {
    auto qi = q.impl(), ki = k.impl(), vi = v.impl();
    record<S>({&q, &k, &v}, out,
              [qi, ki, vi, lse = std::move(lse), n, d, len, n_heads, hd, softmax_scale,
               query_offset](detail::TensorImpl<S>& o) {
                std::vector<S> dq(static_cast<std::size_t>(n * d), S(0));
                std::vector<S> dk(static_cast<std::size_t>(len * d), S(0));
                std::vector<S> dv(static_cast<std::size_t>(len * d), S(0));
                const auto& qv = qi->data;
                const auto& kv = ki->data;
                const auto& vv = vi->data;
                for (std::int64_t h = 0; h < n_heads; ++h) {
                  const std::int64_t c0 = h * hd;
                  for (std::int64_t i = 0; i < n; ++i) {
                    const S* q_row = qv.data() + i * d + c0;
                    const S* do_row = o.grad.data() + i * d + c0;
                    const S* o_row = o.data.data() + i * d + c0;
                    S delta(0);
                    for (std::int64_t c = 0; c < hd; ++c) delta += do_row[c] * o_row[c];
                    const S row_lse = lse[i * n_heads + h];
                    for (std::int64_t j = 0; j <= query_offset + i; ++j) {
                      const S* k_row = kv.data() + j * d + c0;
                      const S* v_row = vv.data() + j * d + c0;
                      S s(0), dp(0);
                      for (std::int64_t c = 0; c < hd; ++c) {
                        s += q_row[c] * k_row[c];
                        dp += do_row[c] * v_row[c];
                      }
                      const S p = std::exp(s * softmax_scale - row_lse);
                      const S ds = p * (dp - delta) * softmax_scale;
                      for (std::int64_t c = 0; c < hd; ++c) {
                        dv[j * d + c0 + c] += p * do_row[c];
                        dq[i * d + c0 + c] += ds * k_row[c];
                        dk[j * d + c0 + c] += ds * q_row[c];
                      }
                    }
                  }
                }
                if (qi->requires_grad) qi->accumulate_grad(dq);
                if (ki->requires_grad) ki->accumulate_grad(dk);
                if (vi->requires_grad) vi->accumulate_grad(dv);
              });
  }
  return out;
}

#define LLAMA_INSTANTIATE_OPS(S)                                                                      \
  template T<S> matmul(const T<S>&, const T<S>&);                                                     \
  template T<S> matmul_saved(const T<S>&, const T<S>&, std::vector<S>);                              \
  template T<S> add(const T<S>&, const T<S>&);                                                        \
  template T<S> mul(const T<S>&, const T<S>&);                                                        \
  template T<S> scale(const T<S>&, S);                                                                \
  template T<S> add_row_bias(const T<S>&, const T<S>&);                                               \
  template T<S> silu(const T<S>&);                                                                    \
  template T<S> embedding(const T<S>&, std::span<const TokenId>);                                     \
  template T<S> reshape(const T<S>&, Shape);                                                          \
  template T<S> transpose(const T<S>&);                                                               \
  template T<S> concat(const std::vector<T<S>>&, std::int64_t);                                       \
  template T<S> slice_columns(const T<S>&, std::int64_t, std::int64_t);                               \
  template T<S> sum(const T<S>&);                                                                     \
  template T<S> mean(const T<S>&);                                                                    \
  template T<S> softmax_rows(const T<S>&);                                                            \
  template T<S> causal_mask(const T<S>&, std::int64_t);                                               \
  template T<S> cross_entropy(const T<S>&, std::span<const TokenId>, TokenId);                        \
  template T<S> rmsnorm(const T<S>&, const T<S>&, S);                                                 \
  template T<S> rope_apply(const T<S>&, std::span<const double>, double);                             \
  template T<S> rope_apply(const T<S>&, std::span<const std::int64_t>, double);                       \
  template T<S> fused_causal_attention(const T<S>&, const T<S>&, const T<S>&, std::int64_t, std::int64_t);

LLAMA_INSTANTIATE_OPS(float)
LLAMA_INSTANTIATE_OPS(double)

#undef LLAMA_INSTANTIATE_OPS

}  // namespace llama
