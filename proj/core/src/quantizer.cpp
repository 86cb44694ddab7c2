#include "skd/quantizer.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

#include "skd/errors.hpp"
#include "skd/io.hpp"
#include "skd/rng.hpp"

namespace skd {

namespace {

/// Cyclic-by-rows Jacobi eigendecomposition of a symmetric matrix (in-place
/// copy). Returns eigenvalues and column eigenvectors, unsorted.
void jacobi_eigen(std::vector<double> a, int64_t d, std::vector<double>& eigenvalues,
                  std::vector<double>& eigenvectors) {
  eigenvectors.assign(static_cast<size_t>(d) * d, 0.0);
  for (int64_t i = 0; i < d; ++i) eigenvectors[i * d + i] = 1.0;

  const int max_sweeps = 64;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (int64_t p = 0; p < d; ++p) {
      for (int64_t q = p + 1; q < d; ++q) off += a[p * d + q] * a[p * d + q];
    }
    if (off < 1e-24) break;

    for (int64_t p = 0; p < d; ++p) {
      for (int64_t q = p + 1; q < d; ++q) {
        const double apq = a[p * d + q];
        if (apq == 0.0) continue;
        const double app = a[p * d + p];
        const double aqq = a[q * d + q];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        for (int64_t i = 0; i < d; ++i) {
          const double aip = a[i * d + p];
          const double aiq = a[i * d + q];
          a[i * d + p] = c * aip - s * aiq;
          a[i * d + q] = s * aip + c * aiq;
        }
        for (int64_t i = 0; i < d; ++i) {
          const double api = a[p * d + i];
          const double aqi = a[q * d + i];
          a[p * d + i] = c * api - s * aqi;
          a[q * d + i] = s * api + c * aqi;
        }
        for (int64_t i = 0; i < d; ++i) {
          const double vip = eigenvectors[i * d + p];
          const double viq = eigenvectors[i * d + q];
          eigenvectors[i * d + p] = c * vip - s * viq;
          eigenvectors[i * d + q] = s * vip + c * viq;
        }
      }
    }
  }

  eigenvalues.resize(d);
  for (int64_t i = 0; i < d; ++i) eigenvalues[i] = a[i * d + i];
}

double sq_dist(const double* a, const double* b, int64_t d) {
  double acc = 0.0;
  for (int64_t i = 0; i < d; ++i) {
    const double diff = a[i] - b[i];
    acc += diff * diff;
  }
  return acc;
}

/// k-means++ seeding: first centroid uniform, then D^2-weighted draws.
std::vector<double> kmeanspp_init(const double* data, int64_t n, int64_t d, int64_t k, Rng& rng) {
  std::vector<double> centroids(static_cast<size_t>(k) * d);
  const int64_t first = static_cast<int64_t>(rng.below(static_cast<uint64_t>(n)));
  std::memcpy(centroids.data(), data + first * d, sizeof(double) * d);

  std::vector<double> best(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) best[i] = sq_dist(data + i * d, centroids.data(), d);

  for (int64_t j = 1; j < k; ++j) {
    double total = std::accumulate(best.begin(), best.end(), 0.0);
    int64_t pick;
    if (total <= 0.0) {
      pick = static_cast<int64_t>(rng.below(static_cast<uint64_t>(n)));
    } else {
      const double r = rng.next_double() * total;
      double acc = 0.0;
      pick = n - 1;
      for (int64_t i = 0; i < n; ++i) {
        acc += best[i];
        if (acc >= r) {
          pick = i;
          break;
        }
      }
    }
    std::memcpy(centroids.data() + j * d, data + pick * d, sizeof(double) * d);
    for (int64_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], sq_dist(data + i * d, data + pick * d, d));
    }
  }
  return centroids;
}

int64_t nearest_centroid(const std::vector<double>& centroids, int64_t k, int64_t d,
                         const double* x, double* dist_out = nullptr) {
  int64_t best = 0;
  double best_d = sq_dist(x, centroids.data(), d);
  for (int64_t j = 1; j < k; ++j) {
    const double dj = sq_dist(x, centroids.data() + j * d, d);
    if (dj < best_d) {
      best_d = dj;
      best = j;
    }
  }
  if (dist_out) *dist_out = best_d;
  return best;
}

double assign_all(const std::vector<double>& centroids, int64_t k, int64_t d, const double* data,
                  int64_t n, std::vector<int64_t>& assignment, std::vector<double>& dists) {
  assignment.resize(n);
  dists.resize(n);
  double inertia = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    assignment[i] = nearest_centroid(centroids, k, d, data + i * d, &dists[i]);
    inertia += dists[i];
  }
  return inertia;
}

}  // namespace

PcaTransform fit_pca(const double* data, int64_t n, int64_t d, int64_t rank) {
  if (rank < 1 || rank > d) throw ConfigError("fit_pca: need 1 <= rank <= D");
  if (n <= rank) throw ConfigError("fit_pca: need more samples than the requested rank");

  PcaTransform pca;
  pca.mean.assign(static_cast<size_t>(d), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < d; ++j) pca.mean[j] += data[i * d + j];
  }
  for (auto& m : pca.mean) m /= static_cast<double>(n);

  // Sample covariance with the 1/N convention so discarded eigenvalues sum to
  // the mean squared reconstruction error.
  std::vector<double> cov(static_cast<size_t>(d) * d, 0.0);
  std::vector<double> centered(static_cast<size_t>(d));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < d; ++j) centered[j] = data[i * d + j] - pca.mean[j];
    for (int64_t p = 0; p < d; ++p) {
      for (int64_t q = p; q < d; ++q) cov[p * d + q] += centered[p] * centered[q];
    }
  }
  for (int64_t p = 0; p < d; ++p) {
    for (int64_t q = p; q < d; ++q) {
      cov[p * d + q] /= static_cast<double>(n);
      cov[q * d + p] = cov[p * d + q];
    }
  }

  std::vector<double> eigenvalues, eigenvectors;
  jacobi_eigen(cov, d, eigenvalues, eigenvectors);

  std::vector<int64_t> order(static_cast<size_t>(d));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t a, int64_t b) { return eigenvalues[a] > eigenvalues[b]; });

  pca.basis.assign(static_cast<size_t>(rank) * d, 0.0);
  pca.eigenvalues.assign(static_cast<size_t>(rank), 0.0);
  const double eig_floor = std::max(eigenvalues[order[0]], 1.0) * 1e-12;
  int64_t deficient = 0;
  for (int64_t r = 0; r < rank; ++r) {
    const int64_t src = order[r];
    double lambda = eigenvalues[src];
    if (lambda < eig_floor) {
      lambda = 0.0;  // below numerical rank: pad with zero
      ++deficient;
    }
    pca.eigenvalues[r] = lambda;

    // Column src of the eigenvector matrix becomes row r of the basis.
    int64_t arg_max = 0;
    double abs_max = -1.0;
    for (int64_t j = 0; j < d; ++j) {
      const double v = eigenvectors[j * d + src];
      pca.basis[r * d + j] = v;
      if (std::abs(v) > abs_max) {
        abs_max = std::abs(v);
        arg_max = j;
      }
    }
    if (pca.basis[r * d + arg_max] < 0.0) {
      for (int64_t j = 0; j < d; ++j) pca.basis[r * d + j] = -pca.basis[r * d + j];
    }
  }
  if (deficient > 0) {
    std::fprintf(stderr,
                 "[skd] fit_pca: covariance is rank deficient; %lld of %lld requested "
                 "components padded with zero eigenvalues\n",
                 static_cast<long long>(deficient), static_cast<long long>(rank));
  }
  return pca;
}

void pca_project(const PcaTransform& pca, const double* data, int64_t n, double* out) {
  const int64_t d = pca.input_dim();
  const int64_t r = pca.rank();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t row = 0; row < r; ++row) {
      const double* b = pca.basis.data() + row * d;
      double acc = 0.0;
      for (int64_t j = 0; j < d; ++j) acc += b[j] * (data[i * d + j] - pca.mean[j]);
      out[i * r + row] = acc;
    }
  }
}

FeatureMatrix pca_project(const PcaTransform& pca, const FeatureMatrix& features) {
  if (features.cols != pca.input_dim()) {
    throw ConfigError("pca_project: feature dim does not match transform");
  }
  FeatureMatrix out;
  out.rows = features.rows;
  out.cols = pca.rank();
  out.frame_rate = features.frame_rate;
  out.utterance_id = features.utterance_id;
  out.kind = FeatureKind::kProjected;
  out.data.resize(static_cast<size_t>(out.rows) * out.cols);
  pca_project(pca, features.data.data(), features.rows, out.data.data());
  return out;
}

void pca_reconstruct(const PcaTransform& pca, const double* data, int64_t n, double* out) {
  const int64_t d = pca.input_dim();
  const int64_t r = pca.rank();
  std::vector<double> proj(static_cast<size_t>(n) * r);
  pca_project(pca, data, n, proj.data());
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < d; ++j) {
      double acc = pca.mean[j];
      for (int64_t row = 0; row < r; ++row) acc += pca.basis[row * d + j] * proj[i * r + row];
      out[i * d + j] = acc;
    }
  }
}

Codebook fit_kmeans(const double* data, int64_t n, int64_t d, int64_t k,
                    const KmeansOptions& options) {
  if (k < 1) throw ConfigError("fit_kmeans: k must be >= 1");
  if (n < k) throw ConfigError("fit_kmeans: insufficient data (n < k)");

  Rng rng(options.seed);
  Codebook cb;
  cb.k = k;
  cb.dim = d;
  cb.seed = options.seed;
  cb.centroids = kmeanspp_init(data, n, d, k, rng);

  std::vector<int64_t> assignment;
  std::vector<double> dists;
  double inertia = assign_all(cb.centroids, k, d, data, n, assignment, dists);
  cb.inertia_history.push_back(inertia);

  if (options.batch <= 0) {
    // Full-batch Lloyd.
    std::vector<double> sums(static_cast<size_t>(k) * d);
    std::vector<int64_t> counts(static_cast<size_t>(k));
    for (int iter = 0; iter < options.max_iters; ++iter) {
      std::fill(sums.begin(), sums.end(), 0.0);
      std::fill(counts.begin(), counts.end(), 0);
      for (int64_t i = 0; i < n; ++i) {
        const int64_t j = assignment[i];
        counts[j] += 1;
        for (int64_t c = 0; c < d; ++c) sums[j * d + c] += data[i * d + c];
      }
      for (int64_t j = 0; j < k; ++j) {
        if (counts[j] == 0) continue;
        for (int64_t c = 0; c < d; ++c) cb.centroids[j * d + c] = sums[j * d + c] / counts[j];
      }
      // Re-seed empty clusters to the point currently farthest from its
      // centroid; each empty cluster takes a distinct point.
      std::vector<double> steal = dists;
      for (int64_t j = 0; j < k; ++j) {
        if (counts[j] != 0) continue;
        int64_t far = 0;
        for (int64_t i = 1; i < n; ++i) {
          if (steal[i] > steal[far]) far = i;
        }
        std::memcpy(cb.centroids.data() + j * d, data + far * d, sizeof(double) * d);
        steal[far] = -1.0;
      }

      const double prev = inertia;
      inertia = assign_all(cb.centroids, k, d, data, n, assignment, dists);
      cb.inertia_history.push_back(inertia);
      if (prev > 0.0 && (prev - inertia) / prev < options.rel_tol) break;
      if (prev == 0.0) break;
    }
  } else {
    // Mini-batch updates (per-center running rates); one epoch per recorded
    // iteration. History stays nonincreasing because an epoch that fails to
    // improve stops the run before recording.
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::vector<int64_t> center_count(static_cast<size_t>(k), 0);
    for (int iter = 0; iter < options.max_iters; ++iter) {
      rng.shuffle(order);
      for (int64_t start = 0; start < n; start += options.batch) {
        const int64_t end = std::min<int64_t>(n, start + options.batch);
        for (int64_t idx = start; idx < end; ++idx) {
          const double* x = data + order[idx] * d;
          const int64_t j = nearest_centroid(cb.centroids, k, d, x);
          center_count[j] += 1;
          const double eta = 1.0 / static_cast<double>(center_count[j]);
          double* c = cb.centroids.data() + j * d;
          for (int64_t cdim = 0; cdim < d; ++cdim) {
            c[cdim] += eta * (x[cdim] - c[cdim]);
          }
        }
      }
      const double prev = cb.inertia_history.back();
      const double cur = assign_all(cb.centroids, k, d, data, n, assignment, dists);
      if (cur > prev) break;
      cb.inertia_history.push_back(cur);
      if (prev > 0.0 && (prev - cur) / prev < options.rel_tol) break;
      if (prev == 0.0) break;
    }
  }
  return cb;
}

std::vector<uint32_t> assign_rows(const Codebook& codebook, const double* data, int64_t n,
                                  int64_t d) {
  if (d != codebook.dim) throw ConfigError("assign_rows: dimension mismatch");
  std::vector<uint32_t> labels(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    labels[i] = static_cast<uint32_t>(
        nearest_centroid(codebook.centroids, codebook.k, codebook.dim, data + i * d));
  }
  return labels;
}

PseudoLabelSequence assign_labels(const Codebook& codebook, const FeatureMatrix& features) {
  PseudoLabelSequence seq;
  seq.utterance_id = features.utterance_id;
  seq.frame_rate = features.frame_rate;
  seq.k = codebook.k;
  if (codebook.pca) {
    const FeatureMatrix projected = pca_project(*codebook.pca, features);
    seq.labels = assign_rows(codebook, projected.data.data(), projected.rows, projected.cols);
  } else {
    if (features.cols != codebook.dim) throw ConfigError("assign_labels: dimension mismatch");
    seq.labels = assign_rows(codebook, features.data.data(), features.rows, features.cols);
  }
  return seq;
}

void write_codebook(const std::filesystem::path& path, const Codebook& codebook) {
  nlohmann::json header;
  header["k"] = codebook.k;
  header["dim"] = codebook.dim;
  header["seed"] = codebook.seed;
  header["pca"] = codebook.pca.has_value();
  std::string payload = pack_f32(codebook.centroids);
  if (codebook.pca) {
    header["pca_rank"] = codebook.pca->rank();
    header["pca_input_dim"] = codebook.pca->input_dim();
    payload += pack_f32(codebook.pca->mean);
    payload += pack_f32(codebook.pca->basis);
    payload += pack_f32(codebook.pca->eigenvalues);
  }
  write_header_payload(path, header, payload);
}

Codebook read_codebook(const std::filesystem::path& path) {
  const auto hp = read_header_payload(path);
  Codebook cb;
  cb.k = hp.header.at("k").get<int64_t>();
  cb.dim = hp.header.at("dim").get<int64_t>();
  cb.seed = hp.header.at("seed").get<uint64_t>();
  size_t off = 0;
  cb.centroids = unpack_f32(hp.payload, off, static_cast<size_t>(cb.k * cb.dim));
  off += static_cast<size_t>(cb.k * cb.dim) * 4;
  if (hp.header.at("pca").get<bool>()) {
    PcaTransform pca;
    const auto rank = hp.header.at("pca_rank").get<int64_t>();
    const auto dim = hp.header.at("pca_input_dim").get<int64_t>();
    pca.mean = unpack_f32(hp.payload, off, static_cast<size_t>(dim));
    off += static_cast<size_t>(dim) * 4;
    pca.basis = unpack_f32(hp.payload, off, static_cast<size_t>(rank * dim));
    off += static_cast<size_t>(rank * dim) * 4;
    pca.eigenvalues = unpack_f32(hp.payload, off, static_cast<size_t>(rank));
    cb.pca = std::move(pca);
  }
  return cb;
}

void write_labels(const std::filesystem::path& path, const PseudoLabelSequence& labels,
                  const nlohmann::json& provenance) {
  nlohmann::json header;
  header["utterance_id"] = labels.utterance_id;
  header["K"] = labels.k;
  header["frame_rate"] = labels.frame_rate;
  header["provenance"] = provenance;
  write_header_payload(path, header, pack_u32(labels.labels));
}

PseudoLabelSequence read_labels(const std::filesystem::path& path, nlohmann::json* provenance) {
  const auto hp = read_header_payload(path);
  PseudoLabelSequence seq;
  seq.utterance_id = hp.header.at("utterance_id").get<std::string>();
  seq.k = hp.header.at("K").get<int64_t>();
  seq.frame_rate = hp.header.at("frame_rate").get<double>();
  seq.labels = unpack_u32(hp.payload, 0, hp.payload.size() / 4);
  if (provenance) *provenance = hp.header.value("provenance", nlohmann::json::object());
  return seq;
}

}  // namespace skd
