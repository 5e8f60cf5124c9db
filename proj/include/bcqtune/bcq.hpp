#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "bcqtune/numkit.hpp"

namespace bcqtune {

// ============================================================================
// Binary-coding quantization (BCQ)
//
// A weight matrix W (h_out x h_in) is factored into q binary planes B_i and
// grouped scaling factors alpha_i so that W ~= sum_i diag-broadcast(alpha_i) * B_i.
// Each row is split into h_in/g groups of g consecutive weights; every group
// owns one scaling factor per plane. g = h_in (row-wise) is the common case.
// ============================================================================

enum class QuantMethod { Greedy, Alternating };

// Group-size sentinel: resolve to h_in of whatever matrix is being quantized.
inline constexpr std::size_t kRowWise = 0;

struct QuantConfig {
  int q = 3;                     // bits per weight, 1..8
  std::size_t g = kRowWise;      // group size in weights, or kRowWise
  QuantMethod method = QuantMethod::Greedy;
  int alt_iterations = 15;

  // Resolved group size for a matrix with the given row length. Throws
  // ConfigError when g does not divide h_in exactly (no silent padding).
  std::size_t resolve_g(std::size_t h_in) const;

  void validate() const;
};

// One binary plane, bit-packed. Bit k of word j in row r encodes the sign of
// B[r, 64*j + k] (set bit = +1), LSB-first within a word. Padding bits past
// `cols` are always zero.
struct BitPlane {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint64_t> words;  // rows * words_per_row()

  BitPlane() = default;
  BitPlane(std::size_t r, std::size_t c)
      : rows(r), cols(c), words(r * words_per_row(c), 0) {}

  static std::size_t words_per_row(std::size_t cols) { return (cols + 63) / 64; }
  std::size_t words_per_row() const { return words_per_row(cols); }

  const std::uint64_t* row_words(std::size_t r) const {
    return words.data() + r * words_per_row();
  }
  std::uint64_t* row_words(std::size_t r) {
    return words.data() + r * words_per_row();
  }

  // Sign at (r, c): +1 or -1.
  int sign(std::size_t r, std::size_t c) const {
    std::uint64_t w = row_words(r)[c >> 6];
    return ((w >> (c & 63)) & 1u) ? +1 : -1;
  }

  void set_sign(std::size_t r, std::size_t c, int s) {
    std::uint64_t& w = row_words(r)[c >> 6];
    std::uint64_t bit = std::uint64_t{1} << (c & 63);
    if (s >= 0) {
      w |= bit;
    } else {
      w &= ~bit;
    }
  }

  // Entries must be exactly +1/-1.
  static BitPlane from_sign_matrix(const Matrix& signs);
  Matrix to_sign_matrix() const;
};

// One scaling factor per (row, group) per plane, row-major.
struct GroupedScales {
  std::size_t rows = 0;
  std::size_t groups_per_row = 0;
  std::vector<double> values;  // rows * groups_per_row

  GroupedScales() = default;
  GroupedScales(std::size_t r, std::size_t gpr)
      : rows(r), groups_per_row(gpr), values(r * gpr, 0.0) {}

  double& at(std::size_t r, std::size_t grp) { return values[r * groups_per_row + grp]; }
  double at(std::size_t r, std::size_t grp) const { return values[r * groups_per_row + grp]; }

  std::size_t size() const { return values.size(); }
};

// The full factorization of one weight matrix.
struct BCQMatrix {
  std::size_t h_out = 0;
  std::size_t h_in = 0;
  QuantConfig config;
  std::vector<BitPlane> planes;        // q entries
  std::vector<GroupedScales> scales;   // q entries

  int q() const { return config.q; }
  std::size_t group_size() const { return config.resolve_g(h_in); }
  std::size_t groups_per_row() const { return h_in / group_size(); }
  std::size_t group_of(std::size_t col) const { return col / group_size(); }
};

// ============================================================================
// Operations
// ============================================================================

// Analytic one-bit solution: b = sign(w) with sign(0) = +1, alpha = (w.b)/g.
// Minimizes ||w - alpha*b||^2 over all (alpha, b). An all-zero group yields
// alpha = 0, b = all +1. Throws ShapeError on an empty group.
std::pair<double, std::vector<std::int8_t>> quantize_group_onebit(
    std::span<const double> w);

// Greedy approximation: plane i one-bit-quantizes the running residual
// w - sum_{j<i} alpha_j*b_j, per (row, group) independently.
BCQMatrix quantize_greedy(const Matrix& w, const QuantConfig& config);

// Alternating refinement, starting from an existing factorization of
// `original` (normally the greedy one). Each iteration, per group:
//   (a) least-squares refit of the q scales given the binary codes
//       (Gram matrix gets an unconditional 1e-12 ridge),
//   (b) re-selection of every weight's code to the nearest of the 2^q
//       representable values, by binary search over the sorted level set
//       with midpoint thresholds; ties go to the smaller value.
// Reconstruction MSE is non-increasing across every half-step.
BCQMatrix refine_alternating(const BCQMatrix& bcq, const Matrix& original,
                             int iterations);

// Same, but also records the whole-matrix MSE trace: entry 0 is the MSE of
// the input factorization, then one entry after each half-step (refit,
// re-select, refit, ...), 2*iterations + 1 entries total.
BCQMatrix refine_alternating_traced(const BCQMatrix& bcq,
                                    const Matrix& original, int iterations,
                                    std::vector<double>* mse_trace);

// Dispatch on config.method: greedy, or greedy followed by alternating
// refinement with config.alt_iterations.
BCQMatrix quantize(const Matrix& w, const QuantConfig& config);

// Reconstruction: entry (r, c) = sum_i scales_i[r, group(c)] * plane_i[r, c].
Matrix dequantize(const BCQMatrix& bcq);

// Mean squared elementwise difference. Throws ShapeError on mismatch.
double mse(const Matrix& a, const Matrix& b);

}  // namespace bcqtune
