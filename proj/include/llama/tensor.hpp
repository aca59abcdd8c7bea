#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "llama/errors.hpp"

namespace llama {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Observer for tensor and scratch-buffer allocations on the current thread.
///
/// Install one with AllocationTracker::Scope; every tensor constructed while
/// it is active reports its element count. Kernels that allocate internal
/// scratch report it with note().
class AllocationTracker {
 public:
  struct Record {
    std::string tag;
    std::int64_t elements;
  };

  class Scope {
   public:
    explicit Scope(AllocationTracker& tracker) : previous_(current_) { current_ = &tracker; }
    ~Scope() { current_ = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    AllocationTracker* previous_;
  };

  static void note(const char* tag, std::int64_t elements) {
    if (current_ != nullptr) current_->records_.push_back({tag, elements});
  }

  const std::vector<Record>& records() const { return records_; }
  std::int64_t max_elements() const;
  void clear() { records_.clear(); }

 private:
  static inline thread_local AllocationTracker* current_ = nullptr;
  std::vector<Record> records_;
};

/// Thread-local switch for tape recording.
class GradMode {
 public:
  static bool enabled() { return enabled_; }

 private:
  friend class NoGradGuard;
  static inline thread_local bool enabled_ = true;
};

/// Disables tape recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled_) { GradMode::enabled_ = false; }
  ~NoGradGuard() { GradMode::enabled_ = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
class BasicTape;

namespace detail {

template <typename Scalar>
struct TensorImpl {
  Shape shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;  // empty until first accumulation
  bool requires_grad = false;
  BasicTape<Scalar>* tape = nullptr;
  std::size_t node = 0;

  void accumulate_grad(std::span<const Scalar> g) {
    if (grad.empty()) grad.assign(data.size(), Scalar(0));
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
  }
};

}  // namespace detail

/// Dense row-major tensor handle.
///
/// Copies share storage (like a reference-counted array). Tensors produced by
/// ops while a tape is active are nodes on that tape; everything else is a
/// leaf. Leaves that require grad collect gradients across backward calls
/// until zero_grad().
template <typename Scalar>
class BasicTensor {
 public:
  using Impl = detail::TensorImpl<Scalar>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  BasicTensor() : BasicTensor(Shape{}, std::vector<Scalar>{Scalar(0)}) {}

  BasicTensor(Shape shape, std::vector<Scalar> values) : impl_(std::make_shared<Impl>()) {
    const std::int64_t n = shape_numel(shape);
    if (static_cast<std::int64_t>(values.size()) != n) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_to_string(shape));
    }
    AllocationTracker::note("tensor", n);
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static BasicTensor zeros(Shape shape) {
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    return BasicTensor(std::move(shape), std::vector<Scalar>(n, Scalar(0)));
  }

  static BasicTensor full(Shape shape, Scalar value) {
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    return BasicTensor(std::move(shape), std::vector<Scalar>(n, value));
  }

  static BasicTensor scalar(Scalar value) { return BasicTensor(Shape{}, {value}); }

  /// Leaf with a fresh copy of another tensor's values (any scalar type).
  template <typename Other>
  static BasicTensor cast_from(const BasicTensor<Other>& other) {
    std::vector<Scalar> values(other.data().begin(), other.data().end());
    return BasicTensor(other.shape(), std::move(values));
  }

  const Shape& shape() const { return impl_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(impl_->shape.size()); }
  std::int64_t dim(std::int64_t axis) const { return impl_->shape.at(static_cast<std::size_t>(axis)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<const Scalar> data() const { return impl_->data; }

  /// Writable view of the values; only meaningful on leaves (weights, inputs).
  std::span<Scalar> mutable_data() { return impl_->data; }

  Scalar item() const {
    if (impl_->data.size() != 1) {
      throw ContractError("item() on tensor of shape " + shape_to_string(shape()));
    }
    return impl_->data[0];
  }

  Scalar at(std::int64_t row, std::int64_t col) const {
    return impl_->data[static_cast<std::size_t>(row * dim(rank() - 1) + col)];
  }

  ConstMatrixMap matrix() const {
    if (rank() != 2) throw DimensionError("matrix view of rank-" + std::to_string(rank()) + " tensor");
    return ConstMatrixMap(impl_->data.data(), dim(0), dim(1));
  }

  bool requires_grad() const { return impl_->requires_grad; }
  BasicTensor& set_requires_grad(bool value = true) {
    impl_->requires_grad = value;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const Scalar> grad() const { return impl_->grad; }
  std::span<Scalar> mutable_grad() { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  /// Gradient as a tensor with the same shape (zeros if none accumulated).
  BasicTensor grad_tensor() const {
    if (!has_grad()) return zeros(shape());
    return BasicTensor(shape(), impl_->grad);
  }

  bool is_leaf() const { return impl_->tape == nullptr; }
  BasicTape<Scalar>* tape() const { return impl_->tape; }

  /// Leaf sharing no state with this tensor.
  BasicTensor detach() const { return BasicTensor(shape(), impl_->data); }

  const std::shared_ptr<Impl>& impl() const { return impl_; }
  bool same_storage(const BasicTensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Ordered record of differentiable ops.
///
/// Ops append a node when at least one input requires grad, grad mode is on
/// and a tape is current on this thread (see Scope). Because nodes are
/// appended as they execute, the list is already topologically ordered and
/// backward is a single reverse sweep. backward() freezes the tape; reset()
/// clears it for the next step.
template <typename Scalar>
class BasicTape {
 public:
  using Impl = detail::TensorImpl<Scalar>;
  using ImplPtr = std::shared_ptr<Impl>;
  /// Receives the output node; reads output->grad and accumulates into inputs.
  using BackwardFn = std::function<void(Impl& output)>;

  struct Node {
    std::vector<ImplPtr> inputs;
    ImplPtr output;
    BackwardFn backward;
  };

  class Scope {
   public:
    explicit Scope(BasicTape& tape) : previous_(current_) { current_ = &tape; }
    ~Scope() { current_ = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    BasicTape* previous_;
  };

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;
  ~BasicTape() { detach_outputs(); }

  static BasicTape* current() { return current_; }

  /// True when an op on these inputs must be recorded.
  static bool should_record(std::initializer_list<const BasicTensor<Scalar>*> inputs) {
    if (current_ == nullptr || !GradMode::enabled()) return false;
    for (const auto* t : inputs) {
      if (t->requires_grad()) return true;
    }
    return false;
  }

  void record(std::vector<ImplPtr> inputs, const ImplPtr& output, BackwardFn backward) {
    if (frozen_) throw ContractError("recording onto a frozen tape; call reset() first");
    output->requires_grad = true;
    output->tape = this;
    output->node = nodes_.size();
    nodes_.push_back(Node{std::move(inputs), output, std::move(backward)});
  }

  std::size_t size() const { return nodes_.size(); }
  bool frozen() const { return frozen_; }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// Runs backward from `output` seeded with `seed` (same shape as output).
  void backward_from(const BasicTensor<Scalar>& output, std::span<const Scalar> seed) {
    if (frozen_) throw ContractError("backward on a frozen tape");
    if (output.tape() != this) throw ContractError("backward: tensor is not a node of this tape");
    output.impl()->accumulate_grad(seed);
    frozen_ = true;
    for (std::size_t i = output.impl()->node + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (node.output->grad.empty()) continue;
      node.backward(*node.output);
    }
  }

  void reset() {
    detach_outputs();
    nodes_.clear();
    frozen_ = false;
  }

 private:
  void detach_outputs() {
    for (auto& node : nodes_) {
      if (node.output && node.output->tape == this) node.output->tape = nullptr;
    }
  }

  static inline thread_local BasicTape* current_ = nullptr;
  std::vector<Node> nodes_;
  bool frozen_ = false;
};

using Tape = BasicTape<float>;
using TapeD = BasicTape<double>;

/// Populates grads of every requires_grad tensor reachable from a scalar loss.
template <typename Scalar>
void backward(const BasicTensor<Scalar>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_to_string(loss.shape()));
  }
  const Scalar one(1);
  if (loss.is_leaf()) {
    if (loss.requires_grad()) loss.impl()->accumulate_grad(std::span<const Scalar>(&one, 1));
    return;
  }
  loss.tape()->backward_from(loss, std::span<const Scalar>(&one, 1));
}

}  // namespace llama
