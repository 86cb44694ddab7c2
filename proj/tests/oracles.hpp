#pragma once

// Test-only oracles, implemented independently of the library code they
// check. Nothing in here calls into the corresponding skd implementation
// paths (skd types are used only as containers).

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "skd/encoder.hpp"
#include "skd/tensor.hpp"

namespace oracle {

// --- DSP ------------------------------------------------------------------

/// Naive O(n^2) DFT magnitudes for bins 0..n/2 of an n-point (optionally
/// zero-padded) signal.
std::vector<double> dft_magnitude(const std::vector<double>& x, size_t n_fft = 0);

/// Magnitude-weighted spectral centroid of (a slice of) a signal, in Hz.
double spectral_centroid_hz(const std::vector<double>& x, double sample_rate,
                            size_t max_samples = 4096);

/// Frequency of the strongest DFT bin, in Hz.
double dominant_freq_hz(const std::vector<double>& x, double sample_rate,
                        size_t max_samples = 4096);

/// Reference MFCC for one Hann-windowed frame: naive DFT power spectrum at
/// n_fft bins, triangular mel bank, log with the 1e-10 floor, orthonormal
/// DCT-II, c0 replaced by log frame energy.
std::vector<double> mfcc_frame(const std::vector<double>& windowed, int sample_rate, int n_fft,
                               int n_mels, int n_ceps);

// --- linear algebra -------------------------------------------------------

/// Classical Jacobi (largest off-diagonal pivot) eigendecomposition of a
/// symmetric d x d matrix. Returns eigenvalues (descending) and matching
/// eigenvectors as rows.
void classical_jacobi(std::vector<double> sym, int64_t d, std::vector<double>& eigenvalues,
                      std::vector<double>& eigenvectors_rows);

// --- gradients --------------------------------------------------------------

struct FdReport {
  double max_rel_err = 0.0;
  std::string worst_tensor;
  int64_t checked = 0;
};

/// Central finite differences over every element of every tensor in params.
/// rel err = |fd - analytic| / max(|fd|, |analytic|, floor); the floor keeps
/// near-zero entries judged on an absolute scale (floor * rtol) instead of
/// amplifying FD rounding noise.
FdReport finite_diff_check(skd::TensorMap& params, const std::function<double()>& loss_fn,
                           const skd::TensorMap& analytic, double eps = 1e-4,
                           double floor = 1e-3);

// --- model accounting -------------------------------------------------------

/// Parameter count re-derived arithmetically from the architecture, without
/// consulting skd::parameter_shapes.
int64_t param_count(const skd::EncoderConfig& config);

// --- CTC --------------------------------------------------------------------

/// -log P(target | logits) by explicit enumeration of all (V+1)^T paths.
double ctc_brute_force(const skd::Tensor& logits, const std::vector<uint32_t>& target);

}  // namespace oracle
