#pragma once

#include <cstdint>
#include <set>
#include <vector>

#include "bcqtune/qlinear.hpp"

namespace bcqtune {

// ============================================================================
// Toy decoder transformer
//
// Embedding -> n_layers pre-norm blocks (single-head causal self-attention,
// then a tanh-GELU FFN with inner size 4h) -> final layer norm -> logits via
// the tied token embedding. Every block holds four quantized linears:
//   ATT_qkv (3h x h), ATT_output (h x h), FFN_h_4h (4h x h), FFN_4h_h (h x 4h).
// Embeddings, biases and norm parameters stay full precision and frozen; the
// designated scale planes of the quantized linears are the only trainable
// parameters.
// ============================================================================

using TokenId = std::uint32_t;

struct ModelConfig {
  std::size_t vocab = 16;
  std::size_t h = 32;
  std::size_t n_layers = 2;
  std::size_t n_ctx = 64;
  int q = 3;
  std::size_t g = kRowWise;  // group size for all quantized layers
  QuantMethod method = QuantMethod::Greedy;
  int alt_iterations = 15;

  QuantConfig quant_config() const {
    return QuantConfig{q, g, method, alt_iterations};
  }
  void validate() const;
};

struct LayerNormParams {
  std::vector<double> gain;
  std::vector<double> bias;
};

struct DenseLinear {
  Matrix w;  // h_out x h_in
  std::vector<double> bias;
};

// Full-precision model, the stand-in for a pre-trained network. Only ever
// forwarded and quantized, never trained.
struct DenseTransformer {
  struct Block {
    LayerNormParams ln1, ln2;
    DenseLinear qkv, att_out, ffn_in, ffn_out;
  };
  ModelConfig config;
  Matrix tok_emb;  // vocab x h (also the tied output head)
  Matrix pos_emb;  // n_ctx x h
  std::vector<Block> blocks;
  LayerNormParams ln_f;
};

DenseTransformer init_dense(const ModelConfig& config, std::uint64_t seed);

struct ToyTransformer {
  struct Block {
    LayerNormParams ln1, ln2;
    QuantLinear qkv, att_out, ffn_in, ffn_out;
  };
  ModelConfig config;
  Matrix tok_emb;
  Matrix pos_emb;
  std::vector<Block> blocks;
  LayerNormParams ln_f;
  std::set<int> trainable_planes{0};  // 0-based plane indices

  std::size_t n_quant_layers() const { return blocks.size() * 4; }
};

// Post-training quantization of every linear layer; everything else copies
// over unchanged.
ToyTransformer quantize_model(const DenseTransformer& dense);

// Canonical layer order: per block, qkv, att_out, ffn_in, ffn_out. File
// formats, gradients and parameter flattening all use this order.
std::vector<const QuantLinear*> quant_layers(const ToyTransformer& model);
std::vector<QuantLinear*> quant_layers(ToyTransformer& model);
const char* quant_layer_name(std::size_t index);

// ============================================================================
// Forward / backward
// ============================================================================

// Per-forward activations needed by backward. A cache is consumed by exactly
// one backward pass; reuse is a StateError.
struct TapeCache {
  struct BlockTape {
    Matrix ln1_in, ln1_out;          // block input and normed input to qkv
    std::vector<double> ln1_mean, ln1_rstd;
    Matrix probs;                    // softmax attention probabilities (T x T)
    Matrix ctx;                      // probs * V, input to att_out
    Matrix qkv_out;                  // T x 3h
    Matrix ln2_in, ln2_out;
    std::vector<double> ln2_mean, ln2_rstd;
    Matrix ffn_pre;                  // pre-GELU (T x 4h)
    Matrix ffn_act;                  // post-GELU, input to ffn_out
  };
  std::vector<TokenId> tokens;
  std::vector<BlockTape> blocks;
  Matrix lnf_in, lnf_out;
  std::vector<double> lnf_mean, lnf_rstd;
  bool used = false;
};

struct ForwardResult {
  Matrix logits;  // T x vocab
  TapeCache cache;
};

ForwardResult forward_lm(const ToyTransformer& model,
                         std::span<const TokenId> tokens);

// Dense twin of forward_lm (no cache); also used as the equivalence oracle.
Matrix forward_lm_dense(const DenseTransformer& model,
                        std::span<const TokenId> tokens);

// Gradients w.r.t. the trainable scale planes, canonical layer order; each
// entry lists (plane, gradient) sorted by plane.
struct AlphaGrads {
  std::vector<std::vector<std::pair<int, GroupedScales>>> layers;

  void add_scaled(const AlphaGrads& other, double factor);
};

// Mean cross-entropy of next-token predictions plus the scale gradients
// (through grad_alpha, so the 1/g_L division is already applied). Consumes
// the forward pass it runs internally.
struct LossAndGrads {
  double loss = 0.0;
  AlphaGrads grads;
};

LossAndGrads loss_and_grads(const ToyTransformer& model,
                            std::span<const TokenId> tokens,
                            std::span<const TokenId> targets);

// Backward from explicit logit gradients; consumes the cache.
AlphaGrads backward_lm(const ToyTransformer& model, TapeCache& cache,
                       const Matrix& grad_logits);

// Cross-entropy of one sequence: mean over positions of -log p(target).
// Also emits d loss / d logits when grad_logits != nullptr.
double cross_entropy(const Matrix& logits, std::span<const TokenId> targets,
                     Matrix* grad_logits);

// ============================================================================
// Trainable-parameter accounting
// ============================================================================

// Number of trainable scale values of an instantiated model.
std::size_t count_trainable(const ToyTransformer& model);

// Closed-form count for a given geometry: n_layers blocks of the four layer
// shapes above, group size g (kRowWise = per-layer h_in), n_planes trainable
// planes per layer.
std::size_t count_trainable_geometry(std::size_t h, std::size_t n_layers,
                                     std::size_t g, std::size_t n_planes);

struct LayerShape {
  const char* name;
  std::size_t h_out, h_in;
};

// The four quantized layer shapes of one block.
std::vector<LayerShape> block_layer_shapes(std::size_t h);

}  // namespace bcqtune
