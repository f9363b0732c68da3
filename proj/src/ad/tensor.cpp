#include "evmap/ad/tensor.hpp"

#include <algorithm>
#include <stdexcept>

namespace evmap::ad {

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_size(shape_))
    throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_string(shape_));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::matrix(int rows, int cols, std::initializer_list<T> values) {
  return BasicTensor({rows, cols}, std::vector<T>(values));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::identity(int n) {
  BasicTensor t({n, n});
  for (int i = 0; i < n; ++i) t.at(i, i) = T(1);
  return t;
}

template <typename T>
int BasicTensor<T>::rows() const {
  if (shape_.size() == 2) return shape_[0];
  if (shape_.size() == 1) return 1;
  throw std::invalid_argument("rows(): expected rank 1 or 2, got " + shape_string(shape_));
}

template <typename T>
int BasicTensor<T>::cols() const {
  if (shape_.size() == 2) return shape_[1];
  if (shape_.size() == 1) return shape_[0];
  throw std::invalid_argument("cols(): expected rank 1 or 2, got " + shape_string(shape_));
}

template <typename T>
T BasicTensor<T>::item() const {
  if (data_.size() != 1) throw std::invalid_argument("item(): tensor is not a scalar " + shape_string(shape_));
  return data_[0];
}

template <typename T>
void BasicTensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size())
    throw std::invalid_argument("reshape: cannot view " + shape_string(shape_) + " as " + shape_string(shape));
  return BasicTensor(std::move(shape), data_);
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace evmap::ad
