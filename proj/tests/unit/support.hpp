#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "bcqtune/alphatune.hpp"
#include "bcqtune/bcq.hpp"
#include "bcqtune/qlinear.hpp"

// Shared oracles for the test suites. Everything here recomputes expected
// values through an independent route (exhaustive enumeration, plain loops,
// central finite differences) and never calls the implementation path it is
// checking.

namespace testsupport {

using namespace bcqtune;

inline double rel_err(double got, double want) {
  const double denom = std::max({std::fabs(got), std::fabs(want), 1e-12});
  return std::fabs(got - want) / denom;
}

// Gradient-check comparison: relative agreement, with an absolute floor so
// true-zero gradients compare cleanly.
inline bool grad_close(double got, double want, double rel_tol,
                       double abs_floor = 1e-8) {
  const double diff = std::fabs(got - want);
  return diff <= abs_floor || diff <= rel_tol * std::max(std::fabs(got), std::fabs(want));
}

// Plain three-loop product, accumulation order independent of matmul's.
inline Matrix matmul_oracle(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) acc += a.at(i, k) * b.at(k, j);
      out.at(i, j) = acc;
    }
  }
  return out;
}

// Elementwise-loop MSE, written independently of bcqtune::mse.
inline double mse_oracle(const Matrix& a, const Matrix& b) {
  double acc = 0.0;
  for (std::size_t r = 0; r < a.rows; ++r) {
    for (std::size_t c = 0; c < a.cols; ++c) {
      const double d = a.at(r, c) - b.at(r, c);
      acc += d * d;
    }
  }
  return acc / double(a.rows * a.cols);
}

// Best one-bit quantization by brute force: every sign vector b, with
// alpha = w.b/g per candidate. Returns the minimal squared error sum.
inline double onebit_exhaustive_sse(const std::vector<double>& w) {
  const std::size_t g = w.size();
  double best = std::numeric_limits<double>::infinity();
  for (std::uint64_t code = 0; code < (std::uint64_t{1} << g); ++code) {
    double dot = 0.0;
    for (std::size_t k = 0; k < g; ++k) {
      dot += ((code >> k) & 1u) ? w[k] : -w[k];
    }
    const double alpha = dot / double(g);
    double sse = 0.0;
    for (std::size_t k = 0; k < g; ++k) {
      const double b = ((code >> k) & 1u) ? 1.0 : -1.0;
      const double d = w[k] - alpha * b;
      sse += d * d;
    }
    best = std::min(best, sse);
  }
  return best;
}

// Best two-plane quantization of one group by brute force over all code
// assignments, with least-squares-optimal scales per assignment (2x2 normal
// equations solved in closed form; singular systems fall back to the best
// single-plane fit). Returns the minimal MSE.
inline double two_plane_exhaustive_mse(const std::vector<double>& w) {
  const std::size_t g = w.size();
  const std::uint64_t n_codes = std::uint64_t{1} << (2 * g);
  double best = std::numeric_limits<double>::infinity();
  for (std::uint64_t assign = 0; assign < n_codes; ++assign) {
    double g11 = double(g), g22 = double(g), g12 = 0.0;
    double r1 = 0.0, r2 = 0.0;
    for (std::size_t k = 0; k < g; ++k) {
      const double b1 = ((assign >> (2 * k)) & 1u) ? 1.0 : -1.0;
      const double b2 = ((assign >> (2 * k + 1)) & 1u) ? 1.0 : -1.0;
      g12 += b1 * b2;
      r1 += w[k] * b1;
      r2 += w[k] * b2;
    }
    const double det = g11 * g22 - g12 * g12;
    double a1, a2;
    if (std::fabs(det) > 1e-9) {
      a1 = (g22 * r1 - g12 * r2) / det;
      a2 = (g11 * r2 - g12 * r1) / det;
    } else {
      // b2 = +-b1: collapses to one plane.
      a1 = r1 / double(g);
      a2 = 0.0;
    }
    double sse = 0.0;
    for (std::size_t k = 0; k < g; ++k) {
      const double b1 = ((assign >> (2 * k)) & 1u) ? 1.0 : -1.0;
      const double b2 = ((assign >> (2 * k + 1)) & 1u) ? 1.0 : -1.0;
      const double d = w[k] - a1 * b1 - a2 * b2;
      sse += d * d;
    }
    best = std::min(best, sse / double(g));
  }
  return best;
}

// Scalar loss sum(weights .* forward(layer, x)) used by the finite-difference
// gradient checks; `weights` doubles as the exact dY.
inline double weighted_forward_loss(const QuantLinear& layer, const Matrix& x,
                                    const Matrix& weights) {
  const Matrix y = forward(layer, x);
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += weights.data[i] * y.data[i];
  return acc;
}

// Central finite difference of f at +-h.
template <typename F>
double central_diff(F&& f, double& slot, double h = 1e-5) {
  const double saved = slot;
  slot = saved + h;
  const double up = f();
  slot = saved - h;
  const double down = f();
  slot = saved;
  return (up - down) / (2.0 * h);
}

inline QuantLinear random_layer(Rng& rng, std::size_t h_out, std::size_t h_in,
                                int q, std::size_t g,
                                QuantMethod method = QuantMethod::Greedy) {
  const Matrix w = randn(rng, h_out, h_in);
  std::vector<double> bias(h_out);
  for (double& b : bias) b = rng.next_gaussian() * 0.1;
  QuantConfig qc;
  qc.q = q;
  qc.g = g;
  qc.method = method;
  return make_quant_linear(w, bias, qc);
}

}  // namespace testsupport
