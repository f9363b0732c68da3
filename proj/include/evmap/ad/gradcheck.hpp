#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "evmap/ad/autodiff.hpp"

namespace evmap::ad {

struct GradCheckEntry {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  GradCheckEntry worst;
  std::size_t checked = 0;
  std::size_t failures = 0;  // entries above the tolerance
};

// Central differences with step `eps` on every element of every leaf in `leaves`.
// Relative error is |a - n| / max(|a|, |n|, 1e-6).
template <typename T>
GradCheckResult gradient_check(std::vector<BasicVar<T>> leaves, const std::vector<std::string>& names,
                               const std::function<BasicVar<T>()>& loss_fn, double eps, double tolerance) {
  for (auto& leaf : leaves) leaf.mutable_grad() = BasicTensor<T>();
  {
    BasicTape<T> tape;
    BasicTapeScope<T> scope(tape);
    tape.backward(loss_fn());
  }
  GradCheckResult result;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    auto& leaf = leaves[k];
    const BasicTensor<T> analytic = leaf.grad().empty() ? BasicTensor<T>(leaf.shape()) : leaf.grad();
    for (std::size_t i = 0; i < leaf.value().size(); ++i) {
      const T saved = leaf.value()[i];
      leaf.mutable_value()[i] = static_cast<T>(saved + eps);
      const double plus = static_cast<double>(loss_fn().value().item());
      leaf.mutable_value()[i] = static_cast<T>(saved - eps);
      const double minus = static_cast<double>(loss_fn().value().item());
      leaf.mutable_value()[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = static_cast<double>(analytic[i]);
      const double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-6});
      ++result.checked;
      if (rel > tolerance) ++result.failures;
      if (rel >= result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst = {k < names.size() ? names[k] : std::to_string(k), i, a, numeric, rel};
      }
    }
  }
  return result;
}

}  // namespace evmap::ad
