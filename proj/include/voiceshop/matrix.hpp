#pragma once

#include <Eigen/Dense>

#include "voiceshop/tensor.hpp"

namespace vs {

// Row-major so rows()*cols() buffers line up with Tensor storage.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline num::Tensor to_tensor(const Matrix& m) {
  return num::Tensor::from({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                           std::vector<double>(m.data(), m.data() + m.size()));
}

inline num::Tensor to_tensor(const Vector& v) { return num::Tensor::vector(std::vector<double>(v.data(), v.data() + v.size())); }

inline Matrix to_matrix(const num::Tensor& t) {
  Matrix m(t.rows(), t.cols());
  std::copy(t.data().begin(), t.data().end(), m.data());
  return m;
}

inline Vector to_vector(const num::Tensor& t) {
  Vector v(t.numel());
  std::copy(t.data().begin(), t.data().end(), v.data());
  return v;
}

}  // namespace vs
