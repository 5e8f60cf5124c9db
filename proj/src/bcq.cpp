#include "bcqtune/bcq.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace bcqtune {

void QuantConfig::validate() const {
  if (q < 1 || q > 8) {
    throw ConfigError("QuantConfig: q must be in 1..8, got " + std::to_string(q));
  }
  if (method == QuantMethod::Alternating && alt_iterations < 1) {
    throw ConfigError("QuantConfig: alt_iterations must be >= 1");
  }
}

std::size_t QuantConfig::resolve_g(std::size_t h_in) const {
  std::size_t eff = (g == kRowWise) ? h_in : g;
  if (eff == 0 || h_in % eff != 0) {
    throw ConfigError("QuantConfig: group size " + std::to_string(eff) +
                      " does not divide h_in = " + std::to_string(h_in));
  }
  return eff;
}

BitPlane BitPlane::from_sign_matrix(const Matrix& signs) {
  BitPlane out(signs.rows, signs.cols);
  for (std::size_t r = 0; r < signs.rows; ++r) {
    for (std::size_t c = 0; c < signs.cols; ++c) {
      double v = signs.at(r, c);
      if (v != 1.0 && v != -1.0) {
        throw ConfigError("BitPlane: entries must be exactly +1 or -1");
      }
      out.set_sign(r, c, v > 0 ? +1 : -1);
    }
  }
  return out;
}

Matrix BitPlane::to_sign_matrix() const {
  Matrix out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out.at(r, c) = static_cast<double>(sign(r, c));
    }
  }
  return out;
}

std::pair<double, std::vector<std::int8_t>> quantize_group_onebit(
    std::span<const double> w) {
  if (w.empty()) throw ShapeError("quantize_group_onebit: empty group");
  std::vector<std::int8_t> b(w.size());
  double dot = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    b[i] = (w[i] >= 0.0) ? +1 : -1;  // sign(0) = +1
    dot += w[i] * b[i];
  }
  return {dot / static_cast<double>(w.size()), std::move(b)};
}

BCQMatrix quantize_greedy(const Matrix& w, const QuantConfig& config) {
  config.validate();
  const std::size_t g = config.resolve_g(w.cols);
  const std::size_t gpr = w.cols / g;
  const int q = config.q;

  BCQMatrix out;
  out.h_out = w.rows;
  out.h_in = w.cols;
  out.config = config;
  out.planes.assign(q, BitPlane(w.rows, w.cols));
  out.scales.assign(q, GroupedScales(w.rows, gpr));

  std::vector<double> residual(g);
  for (std::size_t r = 0; r < w.rows; ++r) {
    for (std::size_t grp = 0; grp < gpr; ++grp) {
      const double* src = w.row(r) + grp * g;
      residual.assign(src, src + g);
      for (int i = 0; i < q; ++i) {
        auto [alpha, b] = quantize_group_onebit(residual);
        out.scales[i].at(r, grp) = alpha;
        for (std::size_t k = 0; k < g; ++k) {
          out.planes[i].set_sign(r, grp * g + k, b[k]);
          residual[k] -= alpha * b[k];
        }
      }
    }
  }
  return out;
}

namespace {

// Solve (A + ridge*I) x = rhs for a small symmetric system by Gaussian
// elimination with partial pivoting. A is q x q, row-major.
void solve_ridged(std::vector<double> a, std::vector<double> rhs, int q,
                  std::vector<double>& x) {
  constexpr double kRidge = 1e-12;
  for (int i = 0; i < q; ++i) a[i * q + i] += kRidge;

  std::vector<int> perm(q);
  for (int i = 0; i < q; ++i) perm[i] = i;

  for (int col = 0; col < q; ++col) {
    int pivot = col;
    double best = std::fabs(a[perm[col] * q + col]);
    for (int r = col + 1; r < q; ++r) {
      double v = std::fabs(a[perm[r] * q + col]);
      if (v > best) {
        best = v;
        pivot = r;
      }
    }
    std::swap(perm[col], perm[pivot]);
    const double diag = a[perm[col] * q + col];
    for (int r = col + 1; r < q; ++r) {
      const double f = a[perm[r] * q + col] / diag;
      if (f == 0.0) continue;
      for (int c = col; c < q; ++c) a[perm[r] * q + c] -= f * a[perm[col] * q + c];
      rhs[perm[r]] -= f * rhs[perm[col]];
    }
  }
  x.assign(q, 0.0);
  for (int row = q - 1; row >= 0; --row) {
    double acc = rhs[perm[row]];
    for (int c = row + 1; c < q; ++c) acc -= a[perm[row] * q + c] * x[c];
    x[row] = acc / a[perm[row] * q + row];
  }
}

struct GroupView {
  std::size_t row, grp;
};

// Per-group state for the alternating sweep.
class AlternatingRefiner {
 public:
  AlternatingRefiner(BCQMatrix& bcq, const Matrix& original)
      : bcq_(bcq),
        original_(original),
        g_(bcq.group_size()),
        gpr_(bcq.groups_per_row()),
        q_(bcq.q()) {}

  // Least-squares refit of every group's scales given fixed codes, via the
  // per-group normal equations.
  void refit_scales() {
    std::vector<double> gram(q_ * q_);
    std::vector<double> rhs(q_);
    std::vector<double> sol;
    std::vector<int> signs(q_);
    for (std::size_t r = 0; r < bcq_.h_out; ++r) {
      for (std::size_t grp = 0; grp < gpr_; ++grp) {
        std::fill(gram.begin(), gram.end(), 0.0);
        std::fill(rhs.begin(), rhs.end(), 0.0);
        for (std::size_t k = 0; k < g_; ++k) {
          const std::size_t c = grp * g_ + k;
          for (int i = 0; i < q_; ++i) signs[i] = bcq_.planes[i].sign(r, c);
          const double w = original_.at(r, c);
          for (int i = 0; i < q_; ++i) {
            rhs[i] += w * signs[i];
            for (int j = i; j < q_; ++j) gram[i * q_ + j] += signs[i] * signs[j];
          }
        }
        for (int i = 0; i < q_; ++i) {
          for (int j = 0; j < i; ++j) gram[i * q_ + j] = gram[j * q_ + i];
        }
        solve_ridged(gram, rhs, q_, sol);
        for (int i = 0; i < q_; ++i) bcq_.scales[i].at(r, grp) = sol[i];
      }
    }
  }

  // Re-select every weight's q-bit code to the nearest representable value
  // among the 2^q signed combinations of its group's current scales. Binary
  // search over the sorted level set; a weight exactly on a midpoint takes
  // the smaller value, and equal values collapse to their smallest code.
  void reselect_codes() {
    const std::size_t n_codes = std::size_t{1} << q_;
    std::vector<std::pair<double, std::uint32_t>> levels(n_codes);
    std::vector<double> mids;
    for (std::size_t r = 0; r < bcq_.h_out; ++r) {
      for (std::size_t grp = 0; grp < gpr_; ++grp) {
        for (std::uint32_t code = 0; code < n_codes; ++code) {
          double v = 0.0;
          for (int i = 0; i < q_; ++i) {
            v += ((code >> i) & 1u) ? bcq_.scales[i].at(r, grp)
                                    : -bcq_.scales[i].at(r, grp);
          }
          levels[code] = {v, code};
        }
        std::sort(levels.begin(), levels.end());
        // Collapse equal values onto the smallest code.
        std::size_t n_levels = 0;
        for (std::size_t i = 0; i < n_codes; ++i) {
          if (n_levels == 0 || levels[i].first != levels[n_levels - 1].first) {
            levels[n_levels++] = levels[i];
          }
        }
        mids.resize(n_levels - 1);
        for (std::size_t i = 0; i + 1 < n_levels; ++i) {
          mids[i] = 0.5 * (levels[i].first + levels[i + 1].first);
        }
        for (std::size_t k = 0; k < g_; ++k) {
          const std::size_t c = grp * g_ + k;
          const double w = original_.at(r, c);
          const std::size_t idx = static_cast<std::size_t>(
              std::lower_bound(mids.begin(), mids.end(), w) - mids.begin());
          const std::uint32_t code = levels[idx].second;
          for (int i = 0; i < q_; ++i) {
            bcq_.planes[i].set_sign(r, c, ((code >> i) & 1u) ? +1 : -1);
          }
        }
      }
    }
  }

 private:
  BCQMatrix& bcq_;
  const Matrix& original_;
  std::size_t g_, gpr_;
  int q_;
};

}  // namespace

BCQMatrix refine_alternating_traced(const BCQMatrix& bcq,
                                    const Matrix& original, int iterations,
                                    std::vector<double>* mse_trace) {
  if (bcq.h_out != original.rows || bcq.h_in != original.cols) {
    throw ShapeError("refine_alternating: factorization/original shape mismatch");
  }
  if (iterations < 1) throw ConfigError("refine_alternating: iterations must be >= 1");

  BCQMatrix out = bcq;
  AlternatingRefiner refiner(out, original);
  if (mse_trace) {
    mse_trace->clear();
    mse_trace->push_back(mse(original, dequantize(out)));
  }
  for (int it = 0; it < iterations; ++it) {
    refiner.refit_scales();
    if (mse_trace) mse_trace->push_back(mse(original, dequantize(out)));
    refiner.reselect_codes();
    if (mse_trace) mse_trace->push_back(mse(original, dequantize(out)));
  }
  return out;
}

BCQMatrix refine_alternating(const BCQMatrix& bcq, const Matrix& original,
                             int iterations) {
  return refine_alternating_traced(bcq, original, iterations, nullptr);
}

BCQMatrix quantize(const Matrix& w, const QuantConfig& config) {
  BCQMatrix out = quantize_greedy(w, config);
  if (config.method == QuantMethod::Alternating) {
    out = refine_alternating(out, w, config.alt_iterations);
  }
  return out;
}

Matrix dequantize(const BCQMatrix& bcq) {
  Matrix out(bcq.h_out, bcq.h_in);
  const std::size_t g = bcq.group_size();
  for (int i = 0; i < bcq.q(); ++i) {
    const BitPlane& plane = bcq.planes[i];
    const GroupedScales& sc = bcq.scales[i];
    for (std::size_t r = 0; r < bcq.h_out; ++r) {
      double* orow = out.row(r);
      for (std::size_t c = 0; c < bcq.h_in; ++c) {
        orow[c] += sc.at(r, c / g) * plane.sign(r, c);
      }
    }
  }
  return out;
}

double mse(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("mse: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

}  // namespace bcqtune
