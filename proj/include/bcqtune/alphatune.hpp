#pragma once

#include <optional>
#include <string>

#include "bcqtune/toymodel.hpp"

namespace bcqtune {

// ============================================================================
// Scale-only adaptation
//
// Post-training quantization freezes the binary planes, biases, embeddings
// and norm parameters for good; adaptation then trains nothing but the
// designated scale planes (the first plane by default) with AdamW and a
// linear-decay learning-rate schedule. Optimizer state therefore exists only
// for the scale values: two accumulators per trainable scalar.
// ============================================================================

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  int epochs = 5;
  int batch_size = 8;
  int warmup_steps = 0;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::set<int> trainable_planes{0};  // 0-based plane indices

  void validate() const;
};

struct OptimizerState {
  std::vector<double> m;  // first moments, one per trainable scale
  std::vector<double> v;  // second moments
  long step = 0;

  void init(std::size_t n) {
    m.assign(n, 0.0);
    v.assign(n, 0.0);
    step = 0;
  }
};

// One decoupled-weight-decay Adam update with bias correction. Gradients are
// consumed exactly as produced by grad_alpha (the 1/g_L division included);
// NaN gradients abort with a NumericalError naming the offending index.
void adamw_step(OptimizerState& state, std::span<double> params,
                std::span<const double> grads, double lr_t,
                double weight_decay, const TrainConfig& config);

// Linear ramp 0 -> lr over warmup_steps, then linear decay to 0 at
// total_steps. step must be <= total_steps; total_steps must be positive.
double lr_at(long step, long total_steps, const TrainConfig& config);

// ============================================================================
// Task data
// ============================================================================

struct Example {
  std::vector<TokenId> tokens;
  std::vector<TokenId> targets;  // same length: next-token targets
};

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> valid;
};

// Sequence-reversal language modeling: each example is a uniform random
// half-sequence of `half_len` symbols followed by its mirror image, presented
// as a next-token prediction problem (tokens = x[0..n-2], targets =
// x[1..n-1]). Deterministic in the seed.
Example make_reversal_example(Rng& rng, std::size_t vocab, std::size_t half_len);
Dataset make_reversal_dataset(std::uint64_t seed, std::size_t vocab,
                              std::size_t half_len, std::size_t train_count,
                              std::size_t valid_count);

// ============================================================================
// Training / evaluation
// ============================================================================

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> history;  // one entry per epoch
  OptimizerState opt_state;
  long steps_run = 0;
  bool diverged = false;
};

// Trains the model's trainable planes in place (plane set taken from the
// config). Batching order is seed-shuffled per epoch and gradients reduce in
// a fixed order, so identical (seed, config, data) give bit-identical scales.
// A non-finite loss aborts the run and restores the scales from the end of
// the last completed epoch.
TrainResult train(ToyTransformer& model, const Dataset& data,
                  const TrainConfig& config);

struct EvalResult {
  double loss = 0.0;            // mean cross-entropy over all positions
  double token_accuracy = 0.0;  // exact-match argmax accuracy
};

EvalResult evaluate(const ToyTransformer& model,
                    std::span<const Example> examples);

// Grid sweep over learning rate and weight decay: each combination trains a
// fresh clone of the model and reports its final validation loss. The grids
// themselves are data (see configs/lr_wd_grid.cfg for the stock preset).
struct SweepResult {
  double lr = 0.0;
  double weight_decay = 0.0;
  double valid_loss = 0.0;
  double token_accuracy = 0.0;
};

std::vector<SweepResult> sweep_lr_wd(const ToyTransformer& model,
                                     const Dataset& data,
                                     const TrainConfig& base,
                                     std::span<const double> lrs,
                                     std::span<const double> weight_decays);

// Parses a grid preset file with `lr = v1,v2,...` and
// `weight_decay = v1,v2,...` lines.
struct SweepGrid {
  std::vector<double> lrs;
  std::vector<double> weight_decays;
};
SweepGrid load_sweep_grid(const std::string& path);

// history CSV: "epoch,train_loss,valid_loss" rows.
void write_history_csv(const std::string& path,
                       std::span<const EpochStats> history);
std::vector<EpochStats> read_history_csv(const std::string& path);

// ============================================================================
// Run configuration file
//
// Key-value text format, one `key = value` per line, '#' comments. Keys:
//   lr, weight_decay, epochs, batch_size, warmup_steps, seed,
//   q, g, trainable_planes, seq_len, train_count, valid_count
// trainable_planes lists 1-based plane numbers ("1" = first plane, "1,2,3").
// g accepts a group size or "row". q and g, when present, must match the
// model being tuned. epochs = 0 means "skip training": the CLI then writes a
// checkpoint of the untouched base scales. Unknown keys are rejected by name.
// ============================================================================

struct RunConfig {
  TrainConfig train;
  std::optional<int> q;
  std::optional<std::size_t> g;  // kRowWise for "row"
  std::size_t seq_len = 4;       // reversal half-length
  std::size_t train_count = 512;
  std::size_t valid_count = 64;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

}  // namespace bcqtune
