#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "m2d/common.hpp"

namespace m2d::ad {

// Dense row-major double tensor. Shapes are small (rank <= 4 in practice);
// all heavy lifting is in the free-function kernels below.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor full(std::vector<int> shape, double v);
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  // Scalar access; valid only for size-1 tensors.
  double item() const;

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

int64_t shape_size(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// C(M x N) += or = A(M x K) * B(K x N). Row-major, no aliasing.
void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n,
             bool accumulate);
// C(M x N) = A(M x K) * B(N x K)^T
void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n,
             bool accumulate);
// C(M x N) = A(K x M)^T * B(K x N)
void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n,
             bool accumulate);

// numpy-style broadcast of two shapes; throws ShapeError if incompatible.
std::vector<int> broadcast_shape(const std::vector<int>& a,
                                 const std::vector<int>& b);

}  // namespace m2d::ad
