#include "bcqtune/toymodel.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace bcqtune {

namespace {

constexpr double kLnEps = 1e-5;

// tanh-approximation GELU and its derivative.
inline double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  return 0.5 * x * (1.0 + std::tanh(c * (x + a * x * x * x)));
}

inline double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  constexpr double a = 0.044715;
  const double u = c * (x + a * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * a * x * x);
}

// Row-wise layer norm; stores per-row mean and reciprocal std when asked.
Matrix layer_norm(const Matrix& x, const LayerNormParams& p,
                  std::vector<double>* means, std::vector<double>* rstds) {
  Matrix y(x.rows, x.cols);
  if (means) means->resize(x.rows);
  if (rstds) rstds->resize(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const double* xr = x.row(r);
    double mean = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) mean += xr[c];
    mean /= static_cast<double>(x.cols);
    double var = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) {
      const double d = xr[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(x.cols);
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    if (means) (*means)[r] = mean;
    if (rstds) (*rstds)[r] = rstd;
    double* yr = y.row(r);
    for (std::size_t c = 0; c < x.cols; ++c) {
      yr[c] = p.gain[c] * (xr[c] - mean) * rstd + p.bias[c];
    }
  }
  return y;
}

// dL/dx of layer_norm given dL/dy; gain/bias are frozen so their grads are
// not produced.
Matrix layer_norm_backward(const Matrix& dy, const Matrix& x,
                           const LayerNormParams& p,
                           const std::vector<double>& means,
                           const std::vector<double>& rstds) {
  Matrix dx(x.rows, x.cols);
  const double n = static_cast<double>(x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const double* dyr = dy.row(r);
    const double* xr = x.row(r);
    double* dxr = dx.row(r);
    const double mean = means[r];
    const double rstd = rstds[r];
    double sum_dxhat = 0.0;
    double sum_dxhat_xhat = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) {
      const double xhat = (xr[c] - mean) * rstd;
      const double dxhat = dyr[c] * p.gain[c];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat;
    }
    for (std::size_t c = 0; c < x.cols; ++c) {
      const double xhat = (xr[c] - mean) * rstd;
      const double dxhat = dyr[c] * p.gain[c];
      dxr[c] = rstd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
    }
  }
  return dx;
}

// Causal single-head attention on pre-normed input; writes the tape pieces
// backward needs. Returns probs and ctx through out-params.
Matrix causal_softmax(const Matrix& scores) {
  // scores is T x T; entries above the diagonal are ignored (masked).
  Matrix probs(scores.rows, scores.cols);
  for (std::size_t i = 0; i < scores.rows; ++i) {
    double maxv = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j <= i; ++j) maxv = std::max(maxv, scores.at(i, j));
    double denom = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      const double e = std::exp(scores.at(i, j) - maxv);
      probs.at(i, j) = e;
      denom += e;
    }
    for (std::size_t j = 0; j <= i; ++j) probs.at(i, j) /= denom;
  }
  return probs;
}

void check_tokens(const ModelConfig& config, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw InputError("forward_lm: empty token sequence");
  if (tokens.size() > config.n_ctx) {
    throw InputError("forward_lm: sequence length " +
                     std::to_string(tokens.size()) + " exceeds n_ctx " +
                     std::to_string(config.n_ctx));
  }
  for (TokenId t : tokens) {
    if (t >= config.vocab) {
      throw InputError("forward_lm: token id " + std::to_string(t) +
                       " out of range for vocab " + std::to_string(config.vocab));
    }
  }
}

Matrix embed(const Matrix& tok_emb, const Matrix& pos_emb,
             std::span<const TokenId> tokens) {
  Matrix x(tokens.size(), tok_emb.cols);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const double* te = tok_emb.row(tokens[t]);
    const double* pe = pos_emb.row(t);
    double* xr = x.row(t);
    for (std::size_t c = 0; c < tok_emb.cols; ++c) xr[c] = te[c] + pe[c];
  }
  return x;
}

// Split a T x 3h qkv activation into its three T x h views.
void split_qkv(const Matrix& qkv, std::size_t h, Matrix& q, Matrix& k,
               Matrix& v) {
  const std::size_t t_len = qkv.rows;
  q = Matrix(t_len, h);
  k = Matrix(t_len, h);
  v = Matrix(t_len, h);
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* src = qkv.row(t);
    std::copy(src, src + h, q.row(t));
    std::copy(src + h, src + 2 * h, k.row(t));
    std::copy(src + 2 * h, src + 3 * h, v.row(t));
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (h < 4 || h % 2 != 0) {
    throw ConfigError("ModelConfig: h must be even and >= 4, got " +
                      std::to_string(h));
  }
  if (vocab < 2) throw ConfigError("ModelConfig: vocab must be >= 2");
  if (n_layers < 1) throw ConfigError("ModelConfig: n_layers must be >= 1");
  if (n_ctx < 1) throw ConfigError("ModelConfig: n_ctx must be >= 1");
  quant_config().validate();
}

std::vector<LayerShape> block_layer_shapes(std::size_t h) {
  return {
      {"ATT_qkv", 3 * h, h},
      {"ATT_output", h, h},
      {"FFN_h_4h", 4 * h, h},
      {"FFN_4h_h", h, 4 * h},
  };
}

const char* quant_layer_name(std::size_t index) {
  static const char* names[4] = {"ATT_qkv", "ATT_output", "FFN_h_4h",
                                 "FFN_4h_h"};
  return names[index % 4];
}

DenseTransformer init_dense(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  DenseTransformer m;
  m.config = config;
  Rng root(seed);

  Rng emb_rng = root.split();
  m.tok_emb = randn(emb_rng, config.vocab, config.h, 0.0, 1.0);
  m.pos_emb = randn(emb_rng, config.n_ctx, config.h, 0.0, 1.0);

  auto init_linear = [&](Rng& rng, std::size_t h_out, std::size_t h_in) {
    DenseLinear lin;
    lin.w = randn(rng, h_out, h_in, 0.0, 1.0 / std::sqrt(double(h_in)));
    lin.bias.assign(h_out, 0.0);
    return lin;
  };
  auto unit_norm = [&](std::size_t n) {
    LayerNormParams p;
    p.gain.assign(n, 1.0);
    p.bias.assign(n, 0.0);
    return p;
  };

  for (std::size_t b = 0; b < config.n_layers; ++b) {
    Rng block_rng = root.split();
    DenseTransformer::Block blk;
    blk.ln1 = unit_norm(config.h);
    blk.ln2 = unit_norm(config.h);
    blk.qkv = init_linear(block_rng, 3 * config.h, config.h);
    blk.att_out = init_linear(block_rng, config.h, config.h);
    blk.ffn_in = init_linear(block_rng, 4 * config.h, config.h);
    blk.ffn_out = init_linear(block_rng, config.h, 4 * config.h);
    m.blocks.push_back(std::move(blk));
  }
  m.ln_f = unit_norm(config.h);
  return m;
}

ToyTransformer quantize_model(const DenseTransformer& dense) {
  const QuantConfig qc = dense.config.quant_config();
  ToyTransformer m;
  m.config = dense.config;
  m.tok_emb = dense.tok_emb;
  m.pos_emb = dense.pos_emb;
  for (const auto& db : dense.blocks) {
    ToyTransformer::Block blk;
    blk.ln1 = db.ln1;
    blk.ln2 = db.ln2;
    blk.qkv = make_quant_linear(db.qkv.w, db.qkv.bias, qc);
    blk.att_out = make_quant_linear(db.att_out.w, db.att_out.bias, qc);
    blk.ffn_in = make_quant_linear(db.ffn_in.w, db.ffn_in.bias, qc);
    blk.ffn_out = make_quant_linear(db.ffn_out.w, db.ffn_out.bias, qc);
    m.blocks.push_back(std::move(blk));
  }
  m.ln_f = dense.ln_f;
  return m;
}

std::vector<const QuantLinear*> quant_layers(const ToyTransformer& model) {
  std::vector<const QuantLinear*> out;
  out.reserve(model.n_quant_layers());
  for (const auto& b : model.blocks) {
    out.push_back(&b.qkv);
    out.push_back(&b.att_out);
    out.push_back(&b.ffn_in);
    out.push_back(&b.ffn_out);
  }
  return out;
}

std::vector<QuantLinear*> quant_layers(ToyTransformer& model) {
  std::vector<QuantLinear*> out;
  out.reserve(model.n_quant_layers());
  for (auto& b : model.blocks) {
    out.push_back(&b.qkv);
    out.push_back(&b.att_out);
    out.push_back(&b.ffn_in);
    out.push_back(&b.ffn_out);
  }
  return out;
}

ForwardResult forward_lm(const ToyTransformer& model,
                         std::span<const TokenId> tokens) {
  check_tokens(model.config, tokens);
  const std::size_t h = model.config.h;
  const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(h));

  ForwardResult res;
  res.cache.tokens.assign(tokens.begin(), tokens.end());
  Matrix x = embed(model.tok_emb, model.pos_emb, tokens);

  for (const auto& blk : model.blocks) {
    TapeCache::BlockTape tape;
    tape.ln1_in = x;
    tape.ln1_out = layer_norm(x, blk.ln1, &tape.ln1_mean, &tape.ln1_rstd);
    tape.qkv_out = forward(blk.qkv, tape.ln1_out);

    Matrix q, k, v;
    split_qkv(tape.qkv_out, h, q, k, v);
    Matrix scores = matmul(q, transpose(k));
    for (double& s : scores.data) s *= inv_sqrt_h;
    tape.probs = causal_softmax(scores);
    tape.ctx = matmul(tape.probs, v);

    Matrix att = forward(blk.att_out, tape.ctx);
    x = add(x, att);

    tape.ln2_in = x;
    tape.ln2_out = layer_norm(x, blk.ln2, &tape.ln2_mean, &tape.ln2_rstd);
    tape.ffn_pre = forward(blk.ffn_in, tape.ln2_out);
    tape.ffn_act = Matrix(tape.ffn_pre.rows, tape.ffn_pre.cols);
    for (std::size_t i = 0; i < tape.ffn_pre.size(); ++i) {
      tape.ffn_act.data[i] = gelu(tape.ffn_pre.data[i]);
    }
    Matrix f = forward(blk.ffn_out, tape.ffn_act);
    x = add(x, f);

    res.cache.blocks.push_back(std::move(tape));
  }

  res.cache.lnf_in = x;
  res.cache.lnf_out =
      layer_norm(x, model.ln_f, &res.cache.lnf_mean, &res.cache.lnf_rstd);
  res.logits = matmul(res.cache.lnf_out, transpose(model.tok_emb));
  return res;
}

Matrix forward_lm_dense(const DenseTransformer& model,
                        std::span<const TokenId> tokens) {
  check_tokens(model.config, tokens);
  const std::size_t h = model.config.h;
  const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(h));

  auto dense_forward = [](const DenseLinear& lin, const Matrix& in) {
    Matrix out = matmul(in, transpose(lin.w));
    for (std::size_t r = 0; r < out.rows; ++r) {
      double* orow = out.row(r);
      for (std::size_t c = 0; c < out.cols; ++c) orow[c] += lin.bias[c];
    }
    return out;
  };

  Matrix x = embed(model.tok_emb, model.pos_emb, tokens);
  for (const auto& blk : model.blocks) {
    Matrix a = layer_norm(x, blk.ln1, nullptr, nullptr);
    Matrix qkv = dense_forward(blk.qkv, a);
    Matrix q, k, v;
    split_qkv(qkv, h, q, k, v);
    Matrix scores = matmul(q, transpose(k));
    for (double& s : scores.data) s *= inv_sqrt_h;
    Matrix probs = causal_softmax(scores);
    Matrix att = dense_forward(blk.att_out, matmul(probs, v));
    x = add(x, att);

    Matrix b2 = layer_norm(x, blk.ln2, nullptr, nullptr);
    Matrix u = dense_forward(blk.ffn_in, b2);
    for (double& e : u.data) e = gelu(e);
    x = add(x, dense_forward(blk.ffn_out, u));
  }
  Matrix xf = layer_norm(x, model.ln_f, nullptr, nullptr);
  return matmul(xf, transpose(model.tok_emb));
}

void AlphaGrads::add_scaled(const AlphaGrads& other, double factor) {
  if (layers.empty()) {
    layers = other.layers;
    for (auto& layer : layers) {
      for (auto& [plane, g] : layer) {
        for (double& v : g.values) v *= factor;
      }
    }
    return;
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (std::size_t p = 0; p < layers[l].size(); ++p) {
      auto& dst = layers[l][p].second.values;
      const auto& src = other.layers[l][p].second.values;
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * src[i];
    }
  }
}

double cross_entropy(const Matrix& logits, std::span<const TokenId> targets,
                     Matrix* grad_logits) {
  if (targets.size() != logits.rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(logits.rows) +
                     " positions");
  }
  if (grad_logits) *grad_logits = Matrix(logits.rows, logits.cols);
  const double inv_t = 1.0 / static_cast<double>(logits.rows);
  double loss = 0.0;
  for (std::size_t t = 0; t < logits.rows; ++t) {
    const double* lr = logits.row(t);
    double maxv = lr[0];
    for (std::size_t c = 1; c < logits.cols; ++c) maxv = std::max(maxv, lr[c]);
    double denom = 0.0;
    for (std::size_t c = 0; c < logits.cols; ++c) denom += std::exp(lr[c] - maxv);
    const double log_denom = std::log(denom);
    const TokenId tgt = targets[t];
    if (tgt >= logits.cols) {
      throw InputError("cross_entropy: target id out of range");
    }
    loss += -(lr[tgt] - maxv - log_denom) * inv_t;
    if (grad_logits) {
      double* gr = grad_logits->row(t);
      for (std::size_t c = 0; c < logits.cols; ++c) {
        const double p = std::exp(lr[c] - maxv) / denom;
        gr[c] = (p - (c == tgt ? 1.0 : 0.0)) * inv_t;
      }
    }
  }
  return loss;
}

AlphaGrads backward_lm(const ToyTransformer& model, TapeCache& cache,
                       const Matrix& grad_logits) {
  if (cache.used) {
    throw StateError("backward_lm: tape cache already consumed");
  }
  cache.used = true;

  const std::size_t h = model.config.h;
  const std::size_t t_len = cache.tokens.size();
  const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(h));

  AlphaGrads grads;
  grads.layers.resize(model.n_quant_layers());
  auto take_alpha = [&](std::size_t layer_idx, const QuantLinear& layer,
                        const Matrix& input, const Matrix& dout) {
    for (int plane : model.trainable_planes) {
      grads.layers[layer_idx].emplace_back(plane,
                                           grad_alpha(layer, input, dout, plane));
    }
  };

  // Tied head: logits = lnf_out * tok_emb^T.
  Matrix dx = matmul(grad_logits, model.tok_emb);
  dx = layer_norm_backward(dx, cache.lnf_in, model.ln_f, cache.lnf_mean,
                           cache.lnf_rstd);

  for (std::size_t b = model.blocks.size(); b-- > 0;) {
    const auto& blk = model.blocks[b];
    auto& tape = cache.blocks[b];
    const std::size_t base = b * 4;

    // FFN branch.
    const Matrix& df = dx;  // gradient of the ffn_out output (residual add)
    take_alpha(base + 3, blk.ffn_out, tape.ffn_act, df);
    Matrix dact = backward_input(blk.ffn_out, df);
    for (std::size_t i = 0; i < dact.size(); ++i) {
      dact.data[i] *= gelu_grad(tape.ffn_pre.data[i]);
    }
    take_alpha(base + 2, blk.ffn_in, tape.ln2_out, dact);
    Matrix db2 = backward_input(blk.ffn_in, dact);
    Matrix dres = layer_norm_backward(db2, tape.ln2_in, blk.ln2, tape.ln2_mean,
                                      tape.ln2_rstd);
    dx = add(dx, dres);

    // Attention branch.
    const Matrix& datt = dx;
    take_alpha(base + 1, blk.att_out, tape.ctx, datt);
    Matrix dctx = backward_input(blk.att_out, datt);

    Matrix q, k, v;
    split_qkv(tape.qkv_out, h, q, k, v);
    Matrix dprobs = matmul(dctx, transpose(v));
    Matrix dv = matmul(transpose(tape.probs), dctx);

    // Softmax backward per row, masked entries contribute nothing.
    Matrix dscores(t_len, t_len);
    for (std::size_t i = 0; i < t_len; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        dot += dprobs.at(i, j) * tape.probs.at(i, j);
      }
      for (std::size_t j = 0; j <= i; ++j) {
        dscores.at(i, j) = tape.probs.at(i, j) * (dprobs.at(i, j) - dot);
      }
    }
    for (double& s : dscores.data) s *= inv_sqrt_h;

    Matrix dq = matmul(dscores, k);
    Matrix dk = matmul(transpose(dscores), q);
    Matrix dqkv(t_len, 3 * h);
    for (std::size_t t = 0; t < t_len; ++t) {
      double* row = dqkv.row(t);
      std::copy(dq.row(t), dq.row(t) + h, row);
      std::copy(dk.row(t), dk.row(t) + h, row + h);
      std::copy(dv.row(t), dv.row(t) + h, row + 2 * h);
    }
    take_alpha(base + 0, blk.qkv, tape.ln1_out, dqkv);
    Matrix da = backward_input(blk.qkv, dqkv);
    Matrix dres1 = layer_norm_backward(da, tape.ln1_in, blk.ln1, tape.ln1_mean,
                                       tape.ln1_rstd);
    dx = add(dx, dres1);
  }
  // Gradient stops at the frozen embeddings.
  return grads;
}

LossAndGrads loss_and_grads(const ToyTransformer& model,
                            std::span<const TokenId> tokens,
                            std::span<const TokenId> targets) {
  if (tokens.size() != targets.size()) {
    throw ShapeError("loss_and_grads: tokens and targets differ in length");
  }
  ForwardResult fwd = forward_lm(model, tokens);
  LossAndGrads out;
  Matrix grad_logits;
  out.loss = cross_entropy(fwd.logits, targets, &grad_logits);
  out.grads = backward_lm(model, fwd.cache, grad_logits);
  return out;
}

std::size_t count_trainable(const ToyTransformer& model) {
  std::size_t total = 0;
  for (const QuantLinear* layer : quant_layers(model)) {
    for (int plane : model.trainable_planes) {
      if (plane < 0 || plane >= layer->weights.q()) {
        throw IndexError("count_trainable: trainable plane out of range");
      }
      total += layer->weights.scales[plane].size();
    }
  }
  return total;
}

std::size_t count_trainable_geometry(std::size_t h, std::size_t n_layers,
                                     std::size_t g, std::size_t n_planes) {
  std::size_t per_block = 0;
  for (const LayerShape& shape : block_layer_shapes(h)) {
    const std::size_t eff = (g == kRowWise) ? shape.h_in : g;
    if (shape.h_in % eff != 0) {
      throw ConfigError(std::string("count_trainable_geometry: g does not divide h_in of ") +
                        shape.name);
    }
    per_block += shape.h_out * (shape.h_in / eff);
  }
  return n_layers * per_block * n_planes;
}

}  // namespace bcqtune
