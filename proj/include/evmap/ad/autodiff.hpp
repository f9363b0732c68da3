#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "evmap/ad/tensor.hpp"

namespace evmap::ad {

template <typename T>
struct BasicNode {
  BasicTensor<T> value;
  BasicTensor<T> grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::function<void()> backward;

  BasicTensor<T>& grad_buffer();  // zero-initialized on first use
  void accumulate(const BasicTensor<T>& g);
};

// Handle to a node in the graph. Copies share the node.
template <typename T>
class BasicVar {
 public:
  using Node = BasicNode<T>;

  BasicVar() = default;
  explicit BasicVar(BasicTensor<T> value, bool requires_grad = false);
  explicit BasicVar(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const BasicTensor<T>& value() const { return node_->value; }
  BasicTensor<T>& mutable_value() { return node_->value; }
  const BasicTensor<T>& grad() const { return node_->grad; }
  BasicTensor<T>& mutable_grad() { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Records differentiable operations executed while it is the current tape.
// Without a current tape, ops compute values only.
template <typename T>
class BasicTape {
 public:
  void record(std::shared_ptr<BasicNode<T>> node);
  // Seeds d(loss)/d(loss) = 1 and runs the recorded closures in reverse.
  // Gradients accumulate into leaves. The tape can be used once.
  void backward(const BasicVar<T>& loss);
  std::size_t size() const { return nodes_.size(); }

  static BasicTape* current();

 private:
  template <typename>
  friend class BasicTapeScope;
  static BasicTape*& current_slot();

  std::vector<std::shared_ptr<BasicNode<T>>> nodes_;
  bool consumed_ = false;
};

template <typename T>
class BasicTapeScope {
 public:
  explicit BasicTapeScope(BasicTape<T>& tape);
  ~BasicTapeScope();
  BasicTapeScope(const BasicTapeScope&) = delete;
  BasicTapeScope& operator=(const BasicTapeScope&) = delete;

 private:
  BasicTape<T>* previous_;
};

using Node = BasicNode<float>;
using Var = BasicVar<float>;
using Tape = BasicTape<float>;
using TapeScope = BasicTapeScope<float>;

template <typename T>
BasicVar<T> constant(BasicTensor<T> value) {
  return BasicVar<T>(std::move(value), false);
}
template <typename T>
BasicVar<T> parameter(BasicTensor<T> value) {
  return BasicVar<T>(std::move(value), true);
}

// 2-D operations; broadcasting is limited to add_row. Shape mismatches throw
// std::invalid_argument naming both shapes.
template <typename T> BasicVar<T> matmul(const BasicVar<T>& a, const BasicVar<T>& b);     // [m,k] x [k,n]
template <typename T> BasicVar<T> matmul_nt(const BasicVar<T>& a, const BasicVar<T>& b);  // [m,k] x [n,k]^T
template <typename T> BasicVar<T> transpose(const BasicVar<T>& a);
template <typename T> BasicVar<T> add(const BasicVar<T>& a, const BasicVar<T>& b);
template <typename T> BasicVar<T> add_row(const BasicVar<T>& a, const BasicVar<T>& row);  // [m,n] + [1,n]
template <typename T> BasicVar<T> sub(const BasicVar<T>& a, const BasicVar<T>& b);
template <typename T> BasicVar<T> mul(const BasicVar<T>& a, const BasicVar<T>& b);
// (1 - gate) * prev + gate * cand, kept inside [min(prev, cand), max(prev, cand)].
template <typename T> BasicVar<T> convex_mix(const BasicVar<T>& prev, const BasicVar<T>& cand, const BasicVar<T>& gate);
template <typename T> BasicVar<T> scale(const BasicVar<T>& a, T s);
template <typename T> BasicVar<T> add_scalar(const BasicVar<T>& a, T s);
template <typename T> BasicVar<T> tanh(const BasicVar<T>& a);
template <typename T> BasicVar<T> sigmoid(const BasicVar<T>& a);
template <typename T> BasicVar<T> cos(const BasicVar<T>& a);
template <typename T> BasicVar<T> sin(const BasicVar<T>& a);
template <typename T> BasicVar<T> abs(const BasicVar<T>& a);
template <typename T> BasicVar<T> softmax_rows(const BasicVar<T>& a);
template <typename T> BasicVar<T> concat_cols(const BasicVar<T>& a, const BasicVar<T>& b);
template <typename T> BasicVar<T> reshape(const BasicVar<T>& a, Shape shape);
template <typename T> BasicVar<T> sum(const BasicVar<T>& a);
template <typename T> BasicVar<T> mean(const BasicVar<T>& a);

template <typename T> BasicVar<T> l1_loss(const BasicVar<T>& prediction, const BasicVar<T>& target);
// Mean over rows of -log softmax(logits)[row, label].
template <typename T> BasicVar<T> cross_entropy(const BasicVar<T>& logits, const std::vector<int>& labels);

template <typename T> T stable_sigmoid(T x);

}  // namespace evmap::ad
