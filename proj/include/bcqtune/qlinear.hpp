#pragma once

#include "bcqtune/bcq.hpp"
#include "bcqtune/numkit.hpp"

namespace bcqtune {

// ============================================================================
// Quantized linear layer
//
// Forward computes Y = X * W^T + bias without materializing W: each plane
// contributes (X * B_i^T) scaled per group by alpha_i, so the only
// multiplications left are by the scaling factors. The bias stays full
// precision and is frozen; so are the bit planes. Only the scaling factors
// are ever trained, and their gradient carries the empirical 1/g_L division.
// ============================================================================

struct QuantLinear {
  BCQMatrix weights;
  std::vector<double> bias;  // h_out, full precision, frozen

  std::size_t h_out() const { return weights.h_out; }
  std::size_t h_in() const { return weights.h_in; }

  // Group size of this layer, the divisor in the alpha gradient.
  std::size_t g_l() const { return weights.group_size(); }
};

QuantLinear make_quant_linear(const Matrix& w, std::span<const double> bias,
                              const QuantConfig& config);

// Y = X * W^T + bias, via the per-plane, per-group factored form.
// x is (n_b x h_in); result is (n_b x h_out).
Matrix forward(const QuantLinear& layer, const Matrix& x);

// ============================================================================
// LUT kernel
//
// Partial dot products of every length-mu sub-vector of x against all 2^mu
// sign patterns are precomputed; the bit-packed planes then index the tables
// directly and the inner loop is additions and lookups only. mu = 8 gives the
// byte-addressed 256-entry tables.
// ============================================================================

struct LutTable {
  int mu = 0;
  std::size_t rows = 0;
  std::size_t blocks_per_row = 0;
  std::vector<double> values;  // rows * blocks_per_row * 2^mu

  // entry(n, b, pattern) = dot(x[n, b*mu : (b+1)*mu], signs(pattern)) where
  // bit t of pattern (LSB = first element) set means +1.
  double entry(std::size_t n, std::size_t block, std::uint32_t pattern) const {
    const std::size_t stride = std::size_t{1} << mu;
    return values[(n * blocks_per_row + block) * stride + pattern];
  }
};

// Tables for one activation matrix. mu must be 4 or 8 and must divide the
// group segment length of whichever layer the tables are used with.
LutTable build_lut_tables(const Matrix& x, int mu);

// Same value as forward() up to float reassociation. mu defaults to the
// byte-indexed 256-entry tables.
Matrix forward_lut(const QuantLinear& layer, const Matrix& x, int mu = 8);

// dX = dY * (sum_i diag(alpha_i) B_i), i.e. dY times the dequantized weights,
// computed in the factored form. grad_y is (n_b x h_out).
Matrix backward_input(const QuantLinear& layer, const Matrix& grad_y);

// Gradient of the loss w.r.t. one plane's scaling factors, already divided
// by g_L: for group s of output j,
//   d alpha_i[j, s] = (1/g_L) * sum_n dY[n, j] * dot(x[n, seg(s)], B_i[j, seg(s)]).
// plane is 0-based; throws IndexError when out of range.
GroupedScales grad_alpha(const QuantLinear& layer, const Matrix& x,
                         const Matrix& grad_y, int plane);

}  // namespace bcqtune
