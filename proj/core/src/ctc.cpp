#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "skd/errors.hpp"
#include "skd/probes.hpp"

namespace skd {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

}  // namespace

double ctc_loss(const Tensor& logits, const std::vector<uint32_t>& target, Tensor* d_logits) {
  const int64_t t_count = logits.dim(0);
  const int64_t n_sym = logits.dim(1);  // V + 1, blank last
  const uint32_t blank = static_cast<uint32_t>(n_sym - 1);
  const int64_t len = static_cast<int64_t>(target.size());

  for (uint32_t y : target) {
    if (y >= blank) throw ConfigError("ctc_loss: target symbol out of range");
  }
  int64_t repeats = 0;
  for (int64_t i = 1; i < len; ++i) {
    if (target[i] == target[i - 1]) ++repeats;
  }
  if (t_count < len + repeats) {
    throw ConfigError("ctc_loss: target infeasible for " + std::to_string(t_count) + " frames");
  }

  // Log-softmax per frame.
  std::vector<double> logp(static_cast<size_t>(t_count) * n_sym);
  for (int64_t t = 0; t < t_count; ++t) {
    const double* row = logits.data() + t * n_sym;
    double max_v = row[0];
    for (int64_t c = 1; c < n_sym; ++c) max_v = std::max(max_v, row[c]);
    double denom = 0.0;
    for (int64_t c = 0; c < n_sym; ++c) denom += std::exp(row[c] - max_v);
    const double log_denom = max_v + std::log(denom);
    for (int64_t c = 0; c < n_sym; ++c) logp[t * n_sym + c] = row[c] - log_denom;
  }

  // Blank-interleaved expansion.
  const int64_t s_count = 2 * len + 1;
  std::vector<uint32_t> z(static_cast<size_t>(s_count), blank);
  for (int64_t i = 0; i < len; ++i) z[2 * i + 1] = target[static_cast<size_t>(i)];

  auto lp = [&](int64_t t, int64_t s) { return logp[t * n_sym + z[static_cast<size_t>(s)]]; };

  std::vector<double> alpha(static_cast<size_t>(t_count) * s_count, kNegInf);
  alpha[0] = lp(0, 0);
  if (s_count > 1) alpha[1] = lp(0, 1);
  for (int64_t t = 1; t < t_count; ++t) {
    for (int64_t s = 0; s < s_count; ++s) {
      double acc = alpha[(t - 1) * s_count + s];
      if (s >= 1) acc = log_add(acc, alpha[(t - 1) * s_count + s - 1]);
      if (s >= 2 && z[static_cast<size_t>(s)] != blank &&
          z[static_cast<size_t>(s)] != z[static_cast<size_t>(s - 2)]) {
        acc = log_add(acc, alpha[(t - 1) * s_count + s - 2]);
      }
      alpha[t * s_count + s] = acc == kNegInf ? kNegInf : acc + lp(t, s);
    }
  }

  double log_total = alpha[(t_count - 1) * s_count + s_count - 1];
  if (s_count > 1) log_total = log_add(log_total, alpha[(t_count - 1) * s_count + s_count - 2]);
  if (log_total == kNegInf) {
    throw ConfigError("ctc_loss: no feasible alignment");
  }

  if (d_logits) {
    // Beta recursion (emission included), then posterior per symbol.
    std::vector<double> beta(static_cast<size_t>(t_count) * s_count, kNegInf);
    beta[(t_count - 1) * s_count + s_count - 1] = lp(t_count - 1, s_count - 1);
    if (s_count > 1) beta[(t_count - 1) * s_count + s_count - 2] = lp(t_count - 1, s_count - 2);
    for (int64_t t = t_count - 2; t >= 0; --t) {
      for (int64_t s = 0; s < s_count; ++s) {
        double acc = beta[(t + 1) * s_count + s];
        if (s + 1 < s_count) acc = log_add(acc, beta[(t + 1) * s_count + s + 1]);
        if (s + 2 < s_count && z[static_cast<size_t>(s + 2)] != blank &&
            z[static_cast<size_t>(s + 2)] != z[static_cast<size_t>(s)]) {
          acc = log_add(acc, beta[(t + 1) * s_count + s + 2]);
        }
        beta[t * s_count + s] = acc == kNegInf ? kNegInf : acc + lp(t, s);
      }
    }

    *d_logits = Tensor({t_count, n_sym});
    std::vector<double> gamma(static_cast<size_t>(n_sym));
    for (int64_t t = 0; t < t_count; ++t) {
      std::fill(gamma.begin(), gamma.end(), kNegInf);
      for (int64_t s = 0; s < s_count; ++s) {
        const double joint = alpha[t * s_count + s] + beta[t * s_count + s] - lp(t, s);
        gamma[z[static_cast<size_t>(s)]] = log_add(gamma[z[static_cast<size_t>(s)]], joint);
      }
      double* drow = d_logits->data() + t * n_sym;
      for (int64_t c = 0; c < n_sym; ++c) {
        const double softmax = std::exp(logp[t * n_sym + c]);
        const double post =
            gamma[static_cast<size_t>(c)] == kNegInf
                ? 0.0
                : std::exp(gamma[static_cast<size_t>(c)] - log_total);
        drow[c] = softmax - post;
      }
    }
  }
  return -log_total;
}

std::vector<uint32_t> greedy_decode(const Tensor& logits) {
  const int64_t t_count = logits.dim(0);
  const int64_t n_sym = logits.dim(1);
  const uint32_t blank = static_cast<uint32_t>(n_sym - 1);
  std::vector<uint32_t> out;
  uint32_t prev = blank;
  for (int64_t t = 0; t < t_count; ++t) {
    const double* row = logits.data() + t * n_sym;
    int64_t arg_max = 0;
    for (int64_t c = 1; c < n_sym; ++c) {
      if (row[c] > row[arg_max]) arg_max = c;
    }
    const uint32_t sym = static_cast<uint32_t>(arg_max);
    if (sym != blank && sym != prev) out.push_back(sym);
    prev = sym;
  }
  return out;
}

int64_t edit_distance(const std::vector<uint32_t>& a, const std::vector<uint32_t>& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<int64_t> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int64_t>(j);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int64_t>(i);
    for (size_t j = 1; j <= m; ++j) {
      const int64_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double wer(const std::vector<uint32_t>& reference, const std::vector<uint32_t>& hypothesis) {
  if (reference.empty()) throw ConfigError("wer: empty reference is undefined");
  return static_cast<double>(edit_distance(reference, hypothesis)) /
         static_cast<double>(reference.size());
}

}  // namespace skd
