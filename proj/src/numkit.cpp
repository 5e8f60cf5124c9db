#include "bcqtune/numkit.hpp"

#include <cmath>
#include <string>

namespace bcqtune {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul: " + std::to_string(a.rows) + "x" +
                     std::to_string(a.cols) + " * " + std::to_string(b.rows) +
                     "x" + std::to_string(b.cols));
  }
  Matrix out(a.rows, b.cols);
  // ikj order keeps the inner loop contiguous for both b and out.
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double* orow = out.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = arow[k];
      if (aik == 0.0) continue;
      const double* brow = b.row(k);
      for (std::size_t j = 0; j < b.cols; ++j) {
        orow[j] += aik * brow[j];
      }
    }
  }
  return out;
}

Matrix transpose(const Matrix& m) {
  Matrix out(m.cols, m.rows);
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) {
      out.at(c, r) = m.at(r, c);
    }
  }
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
  Matrix out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] + b.data[i];
  return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("sub: shape mismatch");
  Matrix out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] - b.data[i];
  return out;
}

Matrix scale(const Matrix& m, double s) {
  Matrix out(m.rows, m.cols);
  for (std::size_t i = 0; i < m.size(); ++i) out.data[i] = m.data[i] * s;
  return out;
}

void check_finite(const Matrix& m, const char* what) {
  for (double v : m.data) {
    if (!std::isfinite(v)) {
      throw NumericalError(std::string(what) + ": non-finite value");
    }
  }
}

double Rng::next_gaussian() {
  // Box-Muller, cosine branch only. u1 is kept away from zero so the log is
  // finite.
  double u1 = next_unit();
  double u2 = next_unit();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  constexpr double two_pi = 6.283185307179586476925286766559;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

Matrix randn(Rng& rng, std::size_t rows, std::size_t cols, double mean,
             double std) {
  if (std < 0.0) throw ConfigError("randn: std must be >= 0");
  Matrix out(rows, cols);
  for (double& v : out.data) v = mean + std * rng.next_gaussian();
  return out;
}

}  // namespace bcqtune
