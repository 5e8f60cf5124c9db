#pragma once

#include <cstdint>
#include <cstddef>
#include <vector>

#include "bcqtune/errors.hpp"

namespace bcqtune {

// ============================================================================
// Matrix
// ============================================================================

// Dense row-major matrix of 64-bit floats. All compute in this project is
// double precision; 32-bit floats appear only in file formats. Values are
// treated as immutable once an operation returns them.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // rows * cols, row-major

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  double* row(std::size_t r) { return data.data() + r * cols; }
  const double* row(std::size_t r) const { return data.data() + r * cols; }

  std::size_t size() const { return data.size(); }

  bool same_shape(const Matrix& other) const {
    return rows == other.rows && cols == other.cols;
  }
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& m, double s);

// Throws NumericalError if any element is NaN or infinite.
void check_finite(const Matrix& m, const char* what);

// ============================================================================
// Rng
// ============================================================================

// Counter-based splittable PRNG (splitmix64). Identical seeds produce
// identical sequences; split() derives an independent stream, so quantization
// and training runs are reproducible from the single seed in the run config.
struct Rng {
  std::uint64_t state;

  explicit Rng(std::uint64_t seed) : state(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller; consumes two uniforms per sample.
  double next_gaussian();

  // Independent child stream.
  Rng split() { return Rng(next_u64() ^ 0x6a09e667f3bcc909ULL); }
};

// Gaussian matrix, deterministic given the rng state. std must be >= 0.
Matrix randn(Rng& rng, std::size_t rows, std::size_t cols, double mean = 0.0,
             double std = 1.0);

// In-place Fisher-Yates shuffle with rng-driven order.
template <typename T>
void shuffle(Rng& rng, std::vector<T>& v) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.next_below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace bcqtune
