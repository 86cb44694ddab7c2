#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "skd/features.hpp"

namespace skd {

/// Low-rank whitening-free PCA: y = basis * (x - mean) with orthonormal rows.
struct PcaTransform {
  std::vector<double> mean;         // D
  std::vector<double> basis;        // R x D row-major, rows orthonormal
  std::vector<double> eigenvalues;  // R, nonincreasing, nonnegative

  int64_t input_dim() const { return static_cast<int64_t>(mean.size()); }
  int64_t rank() const { return static_cast<int64_t>(eigenvalues.size()); }
};

/// Top-R principal axes of pooled frames (N x D row-major). Covariance uses
/// the 1/N convention, eigenvectors come from a cyclic Jacobi sweep, and each
/// basis row is sign-fixed so its largest-magnitude component is positive.
/// When R exceeds the numerical rank the tail eigenvalues are clamped to 0
/// and a warning is printed.
PcaTransform fit_pca(const double* data, int64_t n, int64_t d, int64_t rank);

/// Rows of out get basis * (x - mean); out must hold n * R doubles.
void pca_project(const PcaTransform& pca, const double* data, int64_t n, double* out);
FeatureMatrix pca_project(const PcaTransform& pca, const FeatureMatrix& features);

/// x_hat = mean + basis^T * basis * (x - mean); out must hold n * D doubles.
void pca_reconstruct(const PcaTransform& pca, const double* data, int64_t n, double* out);

/// K-means codebook, optionally over PCA-projected inputs.
struct Codebook {
  std::vector<double> centroids;  // K x dim row-major
  int64_t k = 0;
  int64_t dim = 0;
  uint64_t seed = 0;
  std::optional<PcaTransform> pca;
  std::vector<double> inertia_history;  // nonincreasing

  const double* centroid(int64_t j) const { return centroids.data() + j * dim; }
};

struct KmeansOptions {
  int max_iters = 100;
  uint64_t seed = 0;
  int64_t batch = 0;      // 0 = full-batch Lloyd, otherwise mini-batch size
  double rel_tol = 1e-6;  // relative inertia improvement stopping threshold
};

/// k-means++ seeding followed by Lloyd iterations (or mini-batch updates when
/// options.batch > 0). Empty clusters are re-seeded to the point farthest
/// from its assigned centroid. Throws ConfigError when n < k.
Codebook fit_kmeans(const double* data, int64_t n, int64_t d, int64_t k,
                    const KmeansOptions& options);

struct PseudoLabelSequence {
  std::string utterance_id;
  std::vector<uint32_t> labels;
  double frame_rate = 0.0;
  int64_t k = 0;
};

/// Nearest-centroid ids for raw rows (already in codebook space).
std::vector<uint32_t> assign_rows(const Codebook& codebook, const double* data, int64_t n,
                                  int64_t d);

/// Nearest-centroid labels per frame; applies the attached PCA projection
/// first when present. Ties break to the lowest centroid index.
PseudoLabelSequence assign_labels(const Codebook& codebook, const FeatureMatrix& features);

// Codebook file: JSON header (k, dim, seed, pca flag) + f32 payload holding
// centroids, then PCA mean/basis/eigenvalues when present.
void write_codebook(const std::filesystem::path& path, const Codebook& codebook);
Codebook read_codebook(const std::filesystem::path& path);

// Label file: JSON header (utterance_id, K, frame_rate, provenance) + u32
// little-endian labels.
void write_labels(const std::filesystem::path& path, const PseudoLabelSequence& labels,
                  const nlohmann::json& provenance);
PseudoLabelSequence read_labels(const std::filesystem::path& path,
                                nlohmann::json* provenance = nullptr);

}  // namespace skd
