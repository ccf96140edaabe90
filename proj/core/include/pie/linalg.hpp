#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "pie/errors.hpp"

namespace pie {

using Vec = std::vector<double>;

// Dense row-major matrix. Sizes here are tiny (d_model <= 32, features <= 128),
// so plain loops beat any library dependency and keep the arithmetic auditable.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Vec data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double* row(std::size_t r) { return data.data() + r * cols; }
  const double* row(std::size_t r) const { return data.data() + r * cols; }
};

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline double dot(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  return dot(a.data(), b.data(), a.size());
}

// y += alpha * x
inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

inline void axpy(double alpha, const Vec& x, Vec& y) {
  if (x.size() != y.size()) throw ShapeError("axpy: length mismatch");
  axpy(alpha, x.data(), y.data(), x.size());
}

// y = M x  (rows x cols) * (cols)
inline Vec matvec(const Mat& m, const Vec& x) {
  if (x.size() != m.cols) throw ShapeError("matvec: dimension mismatch");
  Vec y(m.rows, 0.0);
  for (std::size_t r = 0; r < m.rows; ++r) y[r] = dot(m.row(r), x.data(), m.cols);
  return y;
}

// y = M^T x  (x has m.rows entries, result has m.cols)
inline Vec matvec_t(const Mat& m, const Vec& x) {
  if (x.size() != m.rows) throw ShapeError("matvec_t: dimension mismatch");
  Vec y(m.cols, 0.0);
  for (std::size_t r = 0; r < m.rows; ++r) axpy(x[r], m.row(r), y.data(), m.cols);
  return y;
}

inline Vec log_softmax(const Vec& logits) {
  if (logits.empty()) throw ShapeError("log_softmax: empty input");
  double mx = logits[0];
  for (double v : logits) mx = v > mx ? v : mx;
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  Vec out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
  return out;
}

inline Vec softmax(const Vec& logits) {
  Vec out = log_softmax(logits);
  for (double& v : out) v = std::exp(v);
  return out;
}

// KL(p || q) in nats given log-probabilities; p is derived from lp.
inline double kl_from_logprobs(const Vec& lp, const Vec& lq) {
  if (lp.size() != lq.size()) throw ShapeError("kl: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) s += std::exp(lp[i]) * (lp[i] - lq[i]);
  return s;
}

}  // namespace pie
