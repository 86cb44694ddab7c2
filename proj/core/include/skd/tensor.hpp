#pragma once

#include <cstdint>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

namespace skd {

/// Dense row-major tensor of doubles. Training math runs in double so the
/// finite-difference gradient checks are meaningful; external files store f32.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape);
  Tensor(std::initializer_list<int64_t> shape) : Tensor(std::vector<int64_t>(shape)) {}

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_[i]; }
  size_t rank() const { return shape_.size(); }
  size_t numel() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }

  // Indexed access for up to 3-D tensors; hot loops index raw data directly.
  double& at(int64_t i) { return data_[static_cast<size_t>(i)]; }
  double& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double& at(int64_t i, int64_t j, int64_t k) {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double at(int64_t i, int64_t j, int64_t k) const {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }

  void fill(double v);
  void zero() { fill(0.0); }
  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  /// this += scale * other (shapes must match).
  void axpy(double scale, const Tensor& other);

 private:
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

using TensorMap = std::map<std::string, Tensor>;

size_t total_numel(const TensorMap& tensors);

/// Checksum over shapes and raw values; used for frozen-encoder assertions
/// and cache keys.
uint64_t tensor_map_checksum(const TensorMap& tensors);

// Row-major matrix helpers on raw buffers. a: [m x k], b: [k x n], out: [m x n].
void matmul(const double* a, const double* b, double* out, int64_t m, int64_t k, int64_t n);
// out [m x n] += a [m x k] * b^T where b is [n x k].
void matmul_bt(const double* a, const double* b, double* out, int64_t m, int64_t k, int64_t n);
// out [k x n] += a^T [m x k] * b [m x n].
void matmul_at(const double* a, const double* b, double* out, int64_t m, int64_t k, int64_t n);

}  // namespace skd
