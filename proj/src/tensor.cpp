#include "sbd/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace sbd {

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

template <typename T>
void matmul_accumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  // i-k-j order: c[i][j] still sums its k terms in ascending order, and the
  // inner loop over j vectorizes without reassociation.
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape()) + " by " +
                         shape_string(b.shape()));
  }
  Tensor<T> c = Tensor<T>::matrix(a.rows(), b.cols());
  matmul_accumulate(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects a matrix");
  Tensor<T> t = Tensor<T>::matrix(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int rank = static_cast<int>(x.rank());
  if (rank < 1 || rank > 2) throw DimensionError("softmax supports rank 1 or 2");
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("softmax: axis out of range");

  // View as (outer, n, stride): reduce along n.
  const std::size_t n = x.shape()[axis];
  const std::size_t stride = (rank == 2 && axis == 0) ? x.cols() : 1;
  const std::size_t outer = x.size() / std::max<std::size_t>(n, 1);
  Tensor<T> y(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = stride == 1 ? o * n : o;
    T mx = x[base];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[base + i * stride]);
    T sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const T e = std::exp(x[base + i * stride] - mx);
      y[base + i * stride] = e;
      sum += e;
    }
    for (std::size_t i = 0; i < n; ++i) y[base + i * stride] /= sum;
  }
  return y;
}

#define SBD_INSTANTIATE(T)                                                            \
  template void matmul_accumulate<T>(const T*, const T*, T*, std::size_t, std::size_t, \
                                     std::size_t);                                    \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                  \
  template Tensor<T> softmax<T>(const Tensor<T>&, int);

SBD_INSTANTIATE(float)
SBD_INSTANTIATE(double)
#undef SBD_INSTANTIATE

}  // namespace sbd
