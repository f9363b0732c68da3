#include "evmap/ad/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace evmap::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<const RowMat<T>> view(const BasicTensor<T>& t) {
  return Eigen::Map<const RowMat<T>>(t.data(), t.rows(), t.cols());
}
template <typename T>
Eigen::Map<RowMat<T>> view(BasicTensor<T>& t) {
  return Eigen::Map<RowMat<T>>(t.data(), t.rows(), t.cols());
}

template <typename T>
void require_2d(const BasicTensor<T>& t, const char* op) {
  if (t.rank() != 2) throw std::invalid_argument(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

template <typename T>
void require_same(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
}

template <typename T, typename... Vs>
BasicVar<T> make_result(BasicTensor<T> value, const Vs&... inputs) {
  auto node = std::make_shared<BasicNode<T>>();
  node->value = std::move(value);
  BasicTape<T>* tape = BasicTape<T>::current();
  node->requires_grad = tape != nullptr && (inputs.requires_grad() || ...);
  if (node->requires_grad) tape->record(node);
  return BasicVar<T>(std::move(node));
}

// Elementwise op; `dfdx(x, y)` is the derivative given input x and output y.
template <typename T, typename F, typename D>
BasicVar<T> unary(const BasicVar<T>& a, F f, D dfdx) {
  BasicTensor<T> out(a.shape());
  const BasicTensor<T>& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  BasicVar<T> r = make_result(std::move(out), a);
  if (r.requires_grad()) {
    auto* o = r.node().get();
    auto an = a.node();
    o->backward = [o, an, dfdx] {
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * dfdx(an->value[i], o->value[i]);
    };
  }
  return r;
}

}  // namespace

template <typename T>
BasicTensor<T>& BasicNode<T>::grad_buffer() {
  if (grad.empty()) grad = BasicTensor<T>(value.shape());
  return grad;
}

template <typename T>
void BasicNode<T>::accumulate(const BasicTensor<T>& g) {
  auto& dst = grad_buffer();
  if (dst.size() != g.size()) throw std::invalid_argument("accumulate: gradient shape mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <typename T>
BasicVar<T>::BasicVar(BasicTensor<T> value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTape<T>*& BasicTape<T>::current_slot() {
  thread_local BasicTape<T>* slot = nullptr;
  return slot;
}

template <typename T>
BasicTape<T>* BasicTape<T>::current() {
  return current_slot();
}

template <typename T>
void BasicTape<T>::record(std::shared_ptr<BasicNode<T>> node) {
  if (consumed_) throw std::logic_error("tape: already consumed by backward()");
  nodes_.push_back(std::move(node));
}

template <typename T>
void BasicTape<T>::backward(const BasicVar<T>& loss) {
  if (consumed_) throw std::logic_error("tape: backward() called twice");
  if (!loss.defined() || loss.value().size() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got " +
                                (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  consumed_ = true;
  if (!loss.requires_grad()) {
    nodes_.clear();
    return;
  }
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto& n = **it;
    if (n.backward && !n.grad.empty()) n.backward();
  }
  nodes_.clear();
}

template <typename T>
BasicTapeScope<T>::BasicTapeScope(BasicTape<T>& tape) : previous_(BasicTape<T>::current_slot()) {
  BasicTape<T>::current_slot() = &tape;
}

template <typename T>
BasicTapeScope<T>::~BasicTapeScope() {
  BasicTape<T>::current_slot() = previous_;
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
BasicVar<T> matmul(const BasicVar<T>& a, const BasicVar<T>& b) {
  require_2d(a.value(), "matmul");
  require_2d(b.value(), "matmul");
  if (a.value().cols() != b.value().rows())
    throw std::invalid_argument("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                                shape_string(b.shape()));
  BasicTensor<T> out({a.value().rows(), b.value().cols()});
  view(out).noalias() = view(a.value()) * view(b.value());
  BasicVar<T> r = make_result(std::move(out), a, b);
  if (r.requires_grad()) {
    auto* o = r.node().get();
    auto an = a.node();
    auto bn = b.node();
    o->backward = [o, an, bn] {
      if (an->requires_grad) view(an->grad_buffer()).noalias() += view(o->grad) * view(bn->value).transpose();
      if (bn->requires_grad) view(bn->grad_buffer()).noalias() += view(an->value).transpose() * view(o->grad);
    };
  }
  return r;
}

template <typename T>
BasicVar<T> matmul_nt(const BasicVar<T>& a, const BasicVar<T>& b) {
  require_2d(a.value(), "matmul_nt");
  require_2d(b.value(), "matmul_nt");
  if (a.value().cols() != b.value().cols())
    throw std::invalid_argument("matmul_nt: inner dimensions differ " + shape_string(a.shape()) + " x " +
                                shape_string(b.shape()) + "^T");
  BasicTensor<T> out({a.value().rows(), b.value().rows()});
  view(out).noalias() = view(a.value()) * view(b.value()).transpose();
  BasicVar<T> r = make_result(std::move(out), a, b);
  if (r.requires_grad()) {
    auto* o = r.node().get();
    auto an = a.node();
    auto bn = b.node();
    o->backward = [o, an, bn] {
      if (an->requires_grad) view(an->grad_buffer()).noalias() += view(o->grad) * view(bn->value);
      if (bn->requires_grad) view(bn->grad_buffer()).noalias() += view(o->grad).transpose() * view(an->value);
    };
  }
  return r;
}

template <typename T>
BasicVar<T> transpose(const BasicVar<T>& a) {
  require_2d(a.value(), "transpose");
  BasicTensor<T> out({a.value().cols(), a.value().rows()});
  view(out) = view(a.value()).transpose();
  BasicVar<T> r = make_result(std::move(out), a);
  if (r.requires_grad()) {
    auto* o = r.node().get();
    auto an = a.node();
    o->backward = [o, an] { view(an->grad_buffer()) += view(o->grad).transpose(); };
  }
  return r;
}

template <typename T>
BasicVar<T> add(const BasicVar<T>& a, const BasicVar<T>& b) {
  require_same(a.value(), b.value(), "add");
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  BasicVar<T> r = make_result(std::move(out), a, b);
  if (r.requires_grad()) {
    auto* o = r.node().get();
    auto an = a.node();
    auto bn = b.node();
    o->backward = [o, an, bn] {
      if (an->requires_grad) an->accumulate(o->grad);
      if (bn->requires_grad) bn->accumulate(o->grad);
    };
  }
  return r;
}

template <typename T>
BasicVar<T> add_row(const BasicVar<T>& a, const BasicVar<T>& row) {
  require_2d(a.value(), "add_row");
  const int m = a.value().rows();
  const int n = a.value().cols();
  if (row.value().size() != static_cast<std::size_t>(n))
    throw std::invalid_argument("add_row: row " + shape_string(row.shape()) + " does not broadcast over " +
                                shape_string(a.shape()));
  BasicTensor<T> out(a.shape());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = a.value().at(i, j) + row.value()[static_cast<std::size_t>(j)];
  BasicVar<T> r = make_result(std::move(out), a, row);
  if (r.requires_grad()) {
    auto* o = r.node().get();
    auto an = a.node();
    auto rn = row.node();
    o->backward = [o, an, rn, m, n] {
      if (an->requires_grad) an->accumulate(o->grad);
      if (rn->requires_grad) {
        auto& g = rn->grad_buffer();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) g[static_cast<std::size_t>(j)] += o->grad.at(i, j);
      }
    };
  }
  return r;
}

template <typename T>
BasicVar<T> sub(const BasicVar<T>& a, const BasicVar<T>& b) {
  require_same(a.value(), b.value(), "sub");
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  BasicVar<T> r = make_result(std::move(out), a, b);
  if (r.requires_grad()) {
    auto* o = r.node().get();
    auto an = a.node();
    auto bn = b.node();
    o->backward = [o, an, bn] {
      if (an->requires_grad) an->accumulate(o->grad);
      if (bn->requires_grad) {
        auto& g = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o->grad[i];
      }
    };
  }
  return r;
}

template <typename T>
BasicVar<T> mul(const BasicVar<T>& a, const BasicVar<T>& b) {
  require_same(a.value(), b.value(), "mul");
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  BasicVar<T> r = make_result(std::move(out), a, b);
  if (r.requires_grad()) {
    auto* o = r.node().get();
    auto an = a.node();
    auto bn = b.node();
    o->backward = [o, an, bn] {
      if (an->requires_grad) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        auto& g = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * an->value[i];
      }
    };
  }
  return r;
}

template <typename T>
BasicVar<T> scale(const BasicVar<T>& a, T s) {
  return unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <typename T>
BasicVar<T> add_scalar(const BasicVar<T>& a, T s) {
  return unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
BasicVar<T> tanh(const BasicVar<T>& a) {
  return unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
BasicVar<T> sigmoid(const BasicVar<T>& a) {
  return unary(a, [](T x) { return stable_sigmoid(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
BasicVar<T> cos(const BasicVar<T>& a) {
  return unary(a, [](T x) { return std::cos(x); }, [](T x, T) { return -std::sin(x); });
}

template <typename T>
BasicVar<T> sin(const BasicVar<T>& a) {
  return unary(a, [](T x) { return std::sin(x); }, [](T x, T) { return std::cos(x); });
}

template <typename T>
BasicVar<T> abs(const BasicVar<T>& a) {
  return unary(
      a, [](T x) { return std::fabs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
BasicVar<T> softmax_rows(const BasicVar<T>& a) {
  require_2d(a.value(), "softmax_rows");
  const int m = a.value().rows();
  const int n = a.value().cols();
  BasicTensor<T> out(a.shape());
  for (int i = 0; i < m; ++i) {
    T mx = a.value().at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, a.value().at(i, j));
    T total = 0;
    for (int j = 0; j < n; ++j) total += out.at(i, j) = std::exp(a.value().at(i, j) - mx);
    for (int j = 0; j < n; ++j) out.at(i, j) /= total;
  }
  BasicVar<T> r = make_result(std::move(out), a);
  if (r.requires_grad()) {
    auto* o = r.node().get();
    auto an = a.node();
    o->backward = [o, an, m, n] {
      auto& g = an->grad_buffer();
      for (int i = 0; i < m; ++i) {
        T dot = 0;
        for (int j = 0; j < n; ++j) dot += o->grad.at(i, j) * o->value.at(i, j);
        for (int j = 0; j < n; ++j) g.at(i, j) += o->value.at(i, j) * (o->grad.at(i, j) - dot);
      }
    };
  }
  return r;
}

template <typename T>
BasicVar<T> concat_cols(const BasicVar<T>& a, const BasicVar<T>& b) {
  require_2d(a.value(), "concat_cols");
  require_2d(b.value(), "concat_cols");
  const int m = a.value().rows();
  if (b.value().rows() != m)
    throw std::invalid_argument("concat_cols: row counts differ " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  const int na = a.value().cols();
  const int nb = b.value().cols();
  BasicTensor<T> out({m, na + nb});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < na; ++j) out.at(i, j) = a.value().at(i, j);
    for (int j = 0; j < nb; ++j) out.at(i, na + j) = b.value().at(i, j);
  }
  BasicVar<T> r = make_result(std::move(out), a, b);
  if (r.requires_grad()) {
    auto* o = r.node().get();
    auto an = a.node();
    auto bn = b.node();
    o->backward = [o, an, bn, m, na, nb] {
      if (an->requires_grad) {
        auto& g = an->grad_buffer();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < na; ++j) g.at(i, j) += o->grad.at(i, j);
      }
      if (bn->requires_grad) {
        auto& g = bn->grad_buffer();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < nb; ++j) g.at(i, j) += o->grad.at(i, na + j);
      }
    };
  }
  return r;
}

template <typename T>
BasicVar<T> reshape(const BasicVar<T>& a, Shape shape) {
  BasicVar<T> r = make_result(a.value().reshaped(std::move(shape)), a);
  if (r.requires_grad()) {
    auto* o = r.node().get();
    auto an = a.node();
    o->backward = [o, an] { an->accumulate(o->grad); };
  }
  return r;
}

template <typename T>
BasicVar<T> sum(const BasicVar<T>& a) {
  T total = 0;
  for (T v : a.value().values()) total += v;
  BasicVar<T> r = make_result(BasicTensor<T>::scalar(total), a);
  if (r.requires_grad()) {
    auto* o = r.node().get();
    auto an = a.node();
    o->backward = [o, an] {
      for (T& v : an->grad_buffer().values()) v += o->grad[0];
    };
  }
  return r;
}

template <typename T>
BasicVar<T> mean(const BasicVar<T>& a) {
  if (a.value().empty()) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
BasicVar<T> l1_loss(const BasicVar<T>& prediction, const BasicVar<T>& target) {
  return mean(abs(sub(prediction, target)));
}

template <typename T>
BasicVar<T> cross_entropy(const BasicVar<T>& logits, const std::vector<int>& labels) {
  require_2d(logits.value(), "cross_entropy");
  const int m = logits.value().rows();
  const int n = logits.value().cols();
  if (static_cast<int>(labels.size()) != m)
    throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(m) + " rows");
  BasicTensor<T> probs(logits.shape());
  double loss = 0.0;
  for (int i = 0; i < m; ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= n)
      throw std::out_of_range("cross_entropy: class " + std::to_string(label) + " outside [0, " +
                              std::to_string(n) + ")");
    T mx = logits.value().at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, logits.value().at(i, j));
    double total = 0.0;
    for (int j = 0; j < n; ++j) total += probs.at(i, j) = std::exp(logits.value().at(i, j) - mx);
    for (int j = 0; j < n; ++j) probs.at(i, j) = static_cast<T>(probs.at(i, j) / total);
    loss += std::log(total) + mx - logits.value().at(i, label);
  }
  BasicVar<T> r = make_result(BasicTensor<T>::scalar(static_cast<T>(loss / m)), logits);
  if (r.requires_grad()) {
    auto* o = r.node().get();
    auto ln = logits.node();
    o->backward = [o, ln, probs = std::move(probs), labels, m, n] {
      auto& g = ln->grad_buffer();
      const T s = o->grad[0] / static_cast<T>(m);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          g.at(i, j) += s * (probs.at(i, j) - (j == labels[static_cast<std::size_t>(i)] ? T(1) : T(0)));
    };
  }
  return r;
}

template <typename T>
BasicVar<T> convex_mix(const BasicVar<T>& prev, const BasicVar<T>& cand, const BasicVar<T>& gate) {
  require_same(prev.value(), cand.value(), "convex_mix");
  require_same(prev.value(), gate.value(), "convex_mix");
  BasicTensor<T> out(prev.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T a = prev.value()[i];
    const T b = cand.value()[i];
    const T s = gate.value()[i];
    // Clamping only removes rounding overshoot; the exact value already lies between a and b.
    out[i] = std::clamp((T(1) - s) * a + s * b, std::min(a, b), std::max(a, b));
  }
  BasicVar<T> r = make_result(std::move(out), prev, cand, gate);
  if (r.requires_grad()) {
    auto* o = r.node().get();
    auto pn = prev.node();
    auto cn = cand.node();
    auto gn = gate.node();
    o->backward = [o, pn, cn, gn] {
      const std::size_t n = o->grad.size();
      if (pn->requires_grad) {
        auto& g = pn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += o->grad[i] * (T(1) - gn->value[i]);
      }
      if (cn->requires_grad) {
        auto& g = cn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += o->grad[i] * gn->value[i];
      }
      if (gn->requires_grad) {
        auto& g = gn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += o->grad[i] * (cn->value[i] - pn->value[i]);
      }
    };
  }
  return r;
}

#define EVMAP_AD_INSTANTIATE(T)                                                  \
  template struct BasicNode<T>;                                                  \
  template class BasicVar<T>;                                                    \
  template class BasicTape<T>;                                                   \
  template class BasicTapeScope<T>;                                              \
  template T stable_sigmoid(T);                                                  \
  template BasicVar<T> matmul(const BasicVar<T>&, const BasicVar<T>&);           \
  template BasicVar<T> matmul_nt(const BasicVar<T>&, const BasicVar<T>&);        \
  template BasicVar<T> transpose(const BasicVar<T>&);                            \
  template BasicVar<T> add(const BasicVar<T>&, const BasicVar<T>&);              \
  template BasicVar<T> add_row(const BasicVar<T>&, const BasicVar<T>&);          \
  template BasicVar<T> sub(const BasicVar<T>&, const BasicVar<T>&);              \
  template BasicVar<T> mul(const BasicVar<T>&, const BasicVar<T>&);              \
  template BasicVar<T> convex_mix(const BasicVar<T>&, const BasicVar<T>&, const BasicVar<T>&); \
  template BasicVar<T> scale(const BasicVar<T>&, T);                             \
  template BasicVar<T> add_scalar(const BasicVar<T>&, T);                        \
  template BasicVar<T> tanh(const BasicVar<T>&);                                 \
  template BasicVar<T> sigmoid(const BasicVar<T>&);                              \
  template BasicVar<T> cos(const BasicVar<T>&);                                  \
  template BasicVar<T> sin(const BasicVar<T>&);                                  \
  template BasicVar<T> abs(const BasicVar<T>&);                                  \
  template BasicVar<T> softmax_rows(const BasicVar<T>&);                         \
  template BasicVar<T> concat_cols(const BasicVar<T>&, const BasicVar<T>&);      \
  template BasicVar<T> reshape(const BasicVar<T>&, Shape);                       \
  template BasicVar<T> sum(const BasicVar<T>&);                                  \
  template BasicVar<T> mean(const BasicVar<T>&);                                 \
  template BasicVar<T> l1_loss(const BasicVar<T>&, const BasicVar<T>&);          \
  template BasicVar<T> cross_entropy(const BasicVar<T>&, const std::vector<int>&);

EVMAP_AD_INSTANTIATE(float)
EVMAP_AD_INSTANTIATE(double)

#undef EVMAP_AD_INSTANTIATE

}  // namespace evmap::ad
