#include <doctest.h>

#include "support.hpp"

using namespace bcqtune;
using namespace testsupport;

namespace {

// 1x1 layer with a single +1 plane entry and the given scale/bias.
QuantLinear scalar_layer(double alpha, double bias) {
  QuantLinear layer;
  layer.weights.h_out = 1;
  layer.weights.h_in = 1;
  layer.weights.config.q = 1;
  layer.weights.planes.assign(1, BitPlane(1, 1));
  layer.weights.planes[0].set_sign(0, 0, +1);
  layer.weights.scales.assign(1, GroupedScales(1, 1));
  layer.weights.scales[0].at(0, 0) = alpha;
  layer.bias = {bias};
  return layer;
}

Matrix dense_oracle(const QuantLinear& layer, const Matrix& x) {
  Matrix y = matmul_oracle(x, transpose(dequantize(layer.weights)));
  for (std::size_t r = 0; r < y.rows; ++r) {
    for (std::size_t c = 0; c < y.cols; ++c) y.at(r, c) += layer.bias[c];
  }
  return y;
}

}  // namespace

TEST_SUITE_BEGIN("qlinear");

TEST_CASE("forward: 1x1 identity plane adds the bias") {
  QuantLinear layer = scalar_layer(1.0, 0.25);
  Matrix x(1, 1);
  x.at(0, 0) = 2.0;
  Matrix y = forward(layer, x);
  CHECK(y.at(0, 0) == doctest::Approx(2.25));
}

TEST_CASE("forward: zero input returns bias rows") {
  Rng rng(31);
  QuantLinear layer = random_layer(rng, 6, 8, 3, kRowWise);
  Matrix x(4, 8);
  Matrix y = forward(layer, x);
  for (std::size_t r = 0; r < y.rows; ++r) {
    for (std::size_t c = 0; c < y.cols; ++c) {
      CHECK(y.at(r, c) == doctest::Approx(layer.bias[c]));
    }
  }
}

TEST_CASE("forward: matches dense dequantized oracle to 1e-10") {
  Rng rng(32);
  QuantLinear layer = random_layer(rng, 6, 8, 3, 4);
  Matrix x = randn(rng, 5, 8);
  Matrix got = forward(layer, x);
  Matrix want = dense_oracle(layer, x);
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(rel_err(got.data[i], want.data[i]) <= 1e-10);
  }
}

TEST_CASE("forward: shape mismatch") {
  Rng rng(33);
  QuantLinear layer = random_layer(rng, 4, 8, 2, kRowWise);
  Matrix x(2, 7);
  CHECK_THROWS_AS(forward(layer, x), ShapeError);
}

TEST_CASE("factored form equals dense product (row-wise identity)") {
  Rng rng(34);
  QuantLinear layer = random_layer(rng, 8, 16, 3, kRowWise);
  Matrix x = randn(rng, 4, 16);
  // Left: per-plane (X * B_i^T) scaled by alpha_i, summed. Right: X * W^T.
  Matrix left(4, 8);
  for (std::size_t r = 0; r < left.rows; ++r) {
    for (std::size_t c = 0; c < left.cols; ++c) left.at(r, c) = layer.bias[c];
  }
  for (int i = 0; i < 3; ++i) {
    Matrix bt = transpose(layer.weights.planes[i].to_sign_matrix());
    Matrix xb = matmul(x, bt);
    for (std::size_t r = 0; r < xb.rows; ++r) {
      for (std::size_t c = 0; c < xb.cols; ++c) {
        left.at(r, c) += xb.at(r, c) * layer.weights.scales[i].at(c, 0);
      }
    }
  }
  Matrix right = forward(layer, x);
  for (std::size_t i = 0; i < left.size(); ++i) {
    CHECK(rel_err(left.data[i], right.data[i]) <= 1e-10);
  }
}

TEST_CASE("lut tables: 16-entry table, all-plus pattern sums the block") {
  Matrix x(1, 4);
  x.data = {0.5, -1.5, 2.0, 0.25};
  LutTable lut = build_lut_tables(x, 4);
  CHECK(lut.blocks_per_row == 1);
  CHECK(lut.values.size() == 16);
  CHECK(lut.entry(0, 0, 0b1111) == doctest::Approx(0.5 - 1.5 + 2.0 + 0.25));
  CHECK(lut.entry(0, 0, 0b0000) == doctest::Approx(-(0.5 - 1.5 + 2.0 + 0.25)));
  // LSB of the pattern flips the first element.
  CHECK(lut.entry(0, 0, 0b0001) == doctest::Approx(0.5 + 1.5 - 2.0 - 0.25));
}

TEST_CASE("forward_lut: equals forward for mu in {4, 8}") {
  Rng rng(35);
  for (int mu : {4, 8}) {
    for (int trial = 0; trial < 5; ++trial) {
      QuantLinear layer = random_layer(rng, 6, 16, 3, trial % 2 ? 8 : kRowWise);
      Matrix x = randn(rng, 3, 16);
      Matrix a = forward(layer, x);
      Matrix b = forward_lut(layer, x, mu);
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(rel_err(a.data[i], b.data[i]) <= 1e-9);
      }
    }
  }
}

TEST_CASE("forward_lut: one-hot input picks one weight column") {
  Rng rng(36);
  QuantLinear layer = random_layer(rng, 5, 8, 2, kRowWise);
  const std::size_t hot = 3;
  Matrix x(1, 8);
  x.at(0, hot) = 1.0;
  Matrix y = forward_lut(layer, x, 4);
  for (std::size_t j = 0; j < 5; ++j) {
    double want = layer.bias[j];
    for (int i = 0; i < 2; ++i) {
      want += layer.weights.scales[i].at(j, 0) * layer.weights.planes[i].sign(j, hot);
    }
    CHECK(y.at(0, j) == doctest::Approx(want));
  }
}

TEST_CASE("forward_lut: mu must tile group segments") {
  Rng rng(37);
  QuantLinear layer = random_layer(rng, 4, 12, 2, 4);
  Matrix x = randn(rng, 2, 12);
  CHECK_THROWS_AS(forward_lut(layer, x, 8), ConfigError);  // 8 does not tile g=4
  CHECK_THROWS_AS(forward_lut(layer, x, 5), ConfigError);  // mu not in {4, 8}
}

TEST_CASE("backward_input: trivial cases") {
  QuantLinear layer = scalar_layer(2.0, 0.0);
  Matrix dy(1, 1);
  dy.at(0, 0) = 3.0;
  CHECK(backward_input(layer, dy).at(0, 0) == doctest::Approx(6.0));
  Matrix zero(1, 1);
  CHECK(backward_input(layer, zero).at(0, 0) == 0.0);
}

TEST_CASE("grad_alpha: trivial cases") {
  QuantLinear layer = scalar_layer(5.0, 0.0);
  Matrix x(1, 1), dy(1, 1);
  x.at(0, 0) = 3.0;
  dy.at(0, 0) = 2.0;
  CHECK(grad_alpha(layer, x, dy, 0).at(0, 0) == doctest::Approx(6.0));
  Matrix zero(1, 1);
  CHECK(grad_alpha(layer, x, zero, 0).at(0, 0) == 0.0);
  CHECK_THROWS_AS(grad_alpha(layer, x, dy, 1), IndexError);
  CHECK_THROWS_AS(grad_alpha(layer, x, dy, -1), IndexError);
}

TEST_CASE("gradients match central finite differences at 1e-5") {
  Rng rng(38);
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t h_in = 8 + 4 * (trial % 2);
    const std::size_t h_out = 5 + trial;
    const int q = 1 + trial % 3;
    const std::size_t g = (trial % 2 == 0) ? kRowWise : h_in / 2;
    QuantLinear layer = random_layer(rng, h_out, h_in, q, g);
    Matrix x = randn(rng, 3, h_in);
    Matrix dy = randn(rng, 3, h_out);

    // Input gradient.
    Matrix dx = backward_input(layer, dy);
    for (std::size_t n = 0; n < x.rows; ++n) {
      for (std::size_t c = 0; c < x.cols; ++c) {
        const double fd = central_diff(
            [&] { return weighted_forward_loss(layer, x, dy); }, x.at(n, c));
        CHECK(grad_close(dx.at(n, c), fd, 1e-5));
      }
    }

    // Scale gradient: grad_alpha already divides by g_L, so g_L * grad_alpha
    // is the true derivative.
    const double gl = double(layer.g_l());
    for (int plane = 0; plane < q; ++plane) {
      GroupedScales ga = grad_alpha(layer, x, dy, plane);
      GroupedScales& sc = layer.weights.scales[plane];
      for (std::size_t j = 0; j < sc.rows; ++j) {
        for (std::size_t grp = 0; grp < sc.groups_per_row; ++grp) {
          const double fd = central_diff(
              [&] { return weighted_forward_loss(layer, x, dy); }, sc.at(j, grp));
          CHECK(grad_close(gl * ga.at(j, grp), fd, 1e-5));
        }
      }
    }
  }
}

TEST_CASE("forward/backward never touch bias or planes") {
  Rng rng(39);
  QuantLinear layer = random_layer(rng, 6, 8, 3, kRowWise);
  const std::vector<double> bias_before = layer.bias;
  std::vector<std::uint64_t> words_before;
  for (const BitPlane& p : layer.weights.planes) {
    words_before.insert(words_before.end(), p.words.begin(), p.words.end());
  }
  Matrix x = randn(rng, 4, 8);
  Matrix dy = randn(rng, 4, 6);
  forward(layer, x);
  forward_lut(layer, x, 4);
  backward_input(layer, dy);
  grad_alpha(layer, x, dy, 1);
  CHECK(layer.bias == bias_before);
  std::vector<std::uint64_t> words_after;
  for (const BitPlane& p : layer.weights.planes) {
    words_after.insert(words_after.end(), p.words.begin(), p.words.end());
  }
  CHECK(words_after == words_before);
}

TEST_SUITE_END();
