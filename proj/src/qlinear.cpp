#include "bcqtune/qlinear.hpp"

#include <string>

namespace bcqtune {

QuantLinear make_quant_linear(const Matrix& w, std::span<const double> bias,
                              const QuantConfig& config) {
  if (bias.size() != w.rows) {
    throw ShapeError("make_quant_linear: bias length " +
                     std::to_string(bias.size()) + " != h_out " +
                     std::to_string(w.rows));
  }
  QuantLinear layer;
  layer.weights = quantize(w, config);
  layer.bias.assign(bias.begin(), bias.end());
  return layer;
}

namespace {

// Unpack one plane row to +-1.0 so the hot loops below are plain FP code.
// Planes are frozen, so this is the only place bits are touched.
inline void decode_signs(const BitPlane& plane, std::size_t row, double* out) {
  const std::uint64_t* words = plane.row_words(row);
  for (std::size_t c = 0; c < plane.cols; ++c) {
    out[c] = ((words[c >> 6] >> (c & 63)) & 1u) ? 1.0 : -1.0;
  }
}

}  // namespace

Matrix forward(const QuantLinear& layer, const Matrix& x) {
  const BCQMatrix& wq = layer.weights;
  if (x.cols != wq.h_in) {
    throw ShapeError("forward: x has " + std::to_string(x.cols) +
                     " cols, layer expects " + std::to_string(wq.h_in));
  }
  const std::size_t g = wq.group_size();
  const std::size_t gpr = wq.groups_per_row();
  Matrix y(x.rows, wq.h_out);
  for (std::size_t n = 0; n < x.rows; ++n) {
    double* yrow = y.row(n);
    for (std::size_t j = 0; j < wq.h_out; ++j) yrow[j] = layer.bias[j];
  }

  std::vector<double> signs(wq.h_in);
  for (std::size_t j = 0; j < wq.h_out; ++j) {
    for (int i = 0; i < wq.q(); ++i) {
      decode_signs(wq.planes[i], j, signs.data());
      const GroupedScales& sc = wq.scales[i];
      for (std::size_t n = 0; n < x.rows; ++n) {
        const double* xrow = x.row(n);
        double acc = 0.0;
        for (std::size_t grp = 0; grp < gpr; ++grp) {
          double seg = 0.0;
          const std::size_t base = grp * g;
          for (std::size_t k = 0; k < g; ++k) {
            seg += signs[base + k] * xrow[base + k];
          }
          acc += sc.at(j, grp) * seg;
        }
        y.at(n, j) += acc;
      }
    }
  }
  return y;
}

LutTable build_lut_tables(const Matrix& x, int mu) {
  if (mu != 4 && mu != 8) {
    throw ConfigError("build_lut_tables: mu must be 4 or 8, got " +
                      std::to_string(mu));
  }
  if (x.cols % mu != 0) {
    throw ConfigError("build_lut_tables: mu does not tile " +
                      std::to_string(x.cols) + " columns");
  }
  LutTable lut;
  lut.mu = mu;
  lut.rows = x.rows;
  lut.blocks_per_row = x.cols / mu;
  const std::size_t n_patterns = std::size_t{1} << mu;
  lut.values.resize(lut.rows * lut.blocks_per_row * n_patterns);

  for (std::size_t n = 0; n < x.rows; ++n) {
    const double* xrow = x.row(n);
    for (std::size_t b = 0; b < lut.blocks_per_row; ++b) {
      double* tab = lut.values.data() + (n * lut.blocks_per_row + b) * n_patterns;
      const double* blk = xrow + b * mu;
      double all_minus = 0.0;
      for (int t = 0; t < mu; ++t) all_minus -= blk[t];
      tab[0] = all_minus;
      // Pattern p differs from p with its lowest set bit cleared by flipping
      // exactly one element from -1 to +1.
      for (std::size_t p = 1; p < n_patterns; ++p) {
        const std::uint32_t low = static_cast<std::uint32_t>(p & (~p + 1));
        const int t = __builtin_ctz(low);
        tab[p] = tab[p ^ low] + 2.0 * blk[t];
      }
    }
  }
  return lut;
}

Matrix forward_lut(const QuantLinear& layer, const Matrix& x, int mu) {
  const BCQMatrix& wq = layer.weights;
  if (x.cols != wq.h_in) {
    throw ShapeError("forward_lut: x has " + std::to_string(x.cols) +
                     " cols, layer expects " + std::to_string(wq.h_in));
  }
  const std::size_t g = wq.group_size();
  if (mu != 4 && mu != 8) {
    throw ConfigError("forward_lut: mu must be 4 or 8, got " + std::to_string(mu));
  }
  if (g % static_cast<std::size_t>(mu) != 0) {
    throw ConfigError("forward_lut: mu = " + std::to_string(mu) +
                      " does not tile group segments of length " +
                      std::to_string(g));
  }

  const LutTable lut = build_lut_tables(x, mu);
  const std::size_t blocks_per_group = g / mu;
  const std::size_t gpr = wq.groups_per_row();
  const std::uint64_t mask = (mu == 64) ? ~0ull : ((std::uint64_t{1} << mu) - 1);
  Matrix y(x.rows, wq.h_out);

  for (std::size_t n = 0; n < x.rows; ++n) {
    double* yrow = y.row(n);
    for (std::size_t j = 0; j < wq.h_out; ++j) {
      double acc = layer.bias[j];
      for (int i = 0; i < wq.q(); ++i) {
        const std::uint64_t* brow = wq.planes[i].row_words(j);
        const GroupedScales& sc = wq.scales[i];
        for (std::size_t grp = 0; grp < gpr; ++grp) {
          double seg = 0.0;
          for (std::size_t blk = 0; blk < blocks_per_group; ++blk) {
            const std::size_t bit0 = grp * g + blk * mu;
            const std::uint32_t pattern =
                static_cast<std::uint32_t>((brow[bit0 >> 6] >> (bit0 & 63)) & mask);
            seg += lut.entry(n, bit0 / mu, pattern);
          }
          acc += sc.at(j, grp) * seg;
        }
      }
      yrow[j] = acc;
    }
  }
  return y;
}

Matrix backward_input(const QuantLinear& layer, const Matrix& grad_y) {
  const BCQMatrix& wq = layer.weights;
  if (grad_y.cols != wq.h_out) {
    throw ShapeError("backward_input: grad_y has " + std::to_string(grad_y.cols) +
                     " cols, layer expects " + std::to_string(wq.h_out));
  }
  const std::size_t g = wq.group_size();
  const std::size_t gpr = wq.groups_per_row();
  Matrix dx(grad_y.rows, wq.h_in);

  std::vector<double> signs(wq.h_in);
  for (std::size_t j = 0; j < wq.h_out; ++j) {
    for (int i = 0; i < wq.q(); ++i) {
      decode_signs(wq.planes[i], j, signs.data());
      const GroupedScales& sc = wq.scales[i];
      for (std::size_t n = 0; n < grad_y.rows; ++n) {
        const double gy = grad_y.at(n, j);
        if (gy == 0.0) continue;
        double* dxrow = dx.row(n);
        for (std::size_t grp = 0; grp < gpr; ++grp) {
          const double a = gy * sc.at(j, grp);
          const std::size_t base = grp * g;
          for (std::size_t k = 0; k < g; ++k) {
            dxrow[base + k] += a * signs[base + k];
          }
        }
      }
    }
  }
  return dx;
}

GroupedScales grad_alpha(const QuantLinear& layer, const Matrix& x,
                         const Matrix& grad_y, int plane) {
  const BCQMatrix& wq = layer.weights;
  if (plane < 0 || plane >= wq.q()) {
    throw IndexError("grad_alpha: plane " + std::to_string(plane) +
                     " out of range for q = " + std::to_string(wq.q()));
  }
  if (x.cols != wq.h_in || grad_y.cols != wq.h_out || x.rows != grad_y.rows) {
    throw ShapeError("grad_alpha: inconsistent shapes");
  }
  const std::size_t g = wq.group_size();
  const std::size_t gpr = wq.groups_per_row();
  const BitPlane& bp = wq.planes[plane];
  GroupedScales grad(wq.h_out, gpr);

  std::vector<double> signs(wq.h_in);
  for (std::size_t j = 0; j < wq.h_out; ++j) {
    decode_signs(bp, j, signs.data());
    for (std::size_t n = 0; n < x.rows; ++n) {
      const double gy = grad_y.at(n, j);
      if (gy == 0.0) continue;
      const double* xrow = x.row(n);
      for (std::size_t grp = 0; grp < gpr; ++grp) {
        double seg = 0.0;
        const std::size_t base = grp * g;
        for (std::size_t k = 0; k < g; ++k) {
          seg += signs[base + k] * xrow[base + k];
        }
        grad.at(j, grp) += gy * seg;
      }
    }
  }
  const double inv_gl = 1.0 / static_cast<double>(layer.g_l());
  for (double& v : grad.values) v *= inv_gl;
  return grad;
}

}  // namespace bcqtune
