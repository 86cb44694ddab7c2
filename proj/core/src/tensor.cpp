#include "skd/tensor.hpp"

#include <cmath>
#include <cstring>

#include "skd/errors.hpp"
#include "skd/rng.hpp"

namespace skd {

Tensor::Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
  size_t n = 1;
  for (int64_t d : shape_) {
    if (d <= 0) throw ConfigError("tensor dimension must be positive");
    n *= static_cast<size_t>(d);
  }
  data_.assign(n, 0.0);
}

void Tensor::fill(double v) {
  for (auto& x : data_) x = v;
}

bool Tensor::all_finite() const {
  for (double x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

void Tensor::axpy(double scale, const Tensor& other) {
  if (!same_shape(other)) throw ConfigError("axpy: shape mismatch");
  for (size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
}

size_t total_numel(const TensorMap& tensors) {
  size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.numel();
  return n;
}

uint64_t tensor_map_checksum(const TensorMap& tensors) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : tensors) {
    h = fnv1a64(name, h);
    const auto& shape = t.shape();
    h = fnv1a64(shape.data(), shape.size() * sizeof(int64_t), h);
    h = fnv1a64(t.data(), t.numel() * sizeof(double), h);
  }
  return h;
}

void matmul(const double* a, const double* b, double* out, int64_t m, int64_t k, int64_t n) {
  std::memset(out, 0, sizeof(double) * static_cast<size_t>(m * n));
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* oi = out + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) oi[j] += av * bp[j];
    }
  }
}

void matmul_bt(const double* a, const double* b, double* out, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* oi = out + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      oi[j] += acc;
    }
  }
}

void matmul_at(const double* a, const double* b, double* out, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* op = out + p * n;
      for (int64_t j = 0; j < n; ++j) op[j] += av * bi[j];
    }
  }
}

}  // namespace skd
