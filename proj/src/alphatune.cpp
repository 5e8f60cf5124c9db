#include "bcqtune/alphatune.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace bcqtune {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("TrainConfig: lr must be > 0");
  if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
  if (warmup_steps < 0) throw ConfigError("TrainConfig: warmup_steps must be >= 0");
  for (int p : trainable_planes) {
    if (p < 0) throw ConfigError("TrainConfig: plane indices must be >= 0");
  }
}

void adamw_step(OptimizerState& state, std::span<double> params,
                std::span<const double> grads, double lr_t,
                double weight_decay, const TrainConfig& config) {
  if (params.size() != grads.size() || params.size() != state.m.size() ||
      params.size() != state.v.size()) {
    throw ShapeError("adamw_step: parameter/gradient/state size mismatch");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      throw NumericalError("adamw_step: non-finite gradient at index " +
                           std::to_string(i));
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(config.beta1, state.step);
  const double bc2 = 1.0 - std::pow(config.beta2, state.step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * grads[i];
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= lr_t * (mhat / (std::sqrt(vhat) + config.eps) +
                         weight_decay * params[i]);
  }
}

double lr_at(long step, long total_steps, const TrainConfig& config) {
  if (total_steps <= 0) throw ConfigError("lr_at: total_steps must be > 0");
  if (step < 0 || step > total_steps) {
    throw ConfigError("lr_at: step out of range");
  }
  const long warmup = config.warmup_steps;
  if (warmup > 0 && step < warmup) {
    return config.lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  const long span = std::max<long>(1, total_steps - warmup);
  return config.lr * static_cast<double>(total_steps - step) /
         static_cast<double>(span);
}

Example make_reversal_example(Rng& rng, std::size_t vocab, std::size_t half_len) {
  std::vector<TokenId> seq(2 * half_len);
  for (std::size_t i = 0; i < half_len; ++i) {
    seq[i] = static_cast<TokenId>(rng.next_below(vocab));
    seq[2 * half_len - 1 - i] = seq[i];
  }
  Example ex;
  ex.tokens.assign(seq.begin(), seq.end() - 1);
  ex.targets.assign(seq.begin() + 1, seq.end());
  return ex;
}

Dataset make_reversal_dataset(std::uint64_t seed, std::size_t vocab,
                              std::size_t half_len, std::size_t train_count,
                              std::size_t valid_count) {
  if (half_len < 1) throw ConfigError("make_reversal_dataset: half_len must be >= 1");
  Rng root(seed);
  Rng train_rng = root.split();
  Rng valid_rng = root.split();
  Dataset data;
  data.train.reserve(train_count);
  data.valid.reserve(valid_count);
  for (std::size_t i = 0; i < train_count; ++i) {
    data.train.push_back(make_reversal_example(train_rng, vocab, half_len));
  }
  for (std::size_t i = 0; i < valid_count; ++i) {
    data.valid.push_back(make_reversal_example(valid_rng, vocab, half_len));
  }
  return data;
}

namespace {

// Flat view of the trainable scales, canonical layer order, planes ascending.
std::vector<double*> trainable_slots(ToyTransformer& model) {
  std::vector<double*> slots;
  for (QuantLinear* layer : quant_layers(model)) {
    for (int plane : model.trainable_planes) {
      if (plane < 0 || plane >= layer->weights.q()) {
        throw ConfigError("train: trainable plane " + std::to_string(plane + 1) +
                          " out of range for q = " +
                          std::to_string(layer->weights.q()));
      }
      for (double& v : layer->weights.scales[plane].values) slots.push_back(&v);
    }
  }
  return slots;
}

std::vector<double> flatten_grads(const AlphaGrads& grads) {
  std::vector<double> flat;
  for (const auto& layer : grads.layers) {
    for (const auto& [plane, g] : layer) {
      flat.insert(flat.end(), g.values.begin(), g.values.end());
    }
  }
  return flat;
}

}  // namespace

TrainResult train(ToyTransformer& model, const Dataset& data,
                  const TrainConfig& config) {
  config.validate();
  if (data.train.empty()) throw ConfigError("train: empty training set");
  for (int p : config.trainable_planes) {
    if (p < 0 || p >= model.config.q) {
      throw ConfigError("train: trainable plane " + std::to_string(p + 1) +
                        " out of range for q = " + std::to_string(model.config.q));
    }
  }

  model.trainable_planes = config.trainable_planes;
  std::vector<double*> slots = trainable_slots(model);

  TrainResult result;
  result.opt_state.init(slots.size());

  std::vector<double> params(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) params[i] = *slots[i];
  std::vector<double> snapshot = params;

  const long steps_per_epoch =
      static_cast<long>((data.train.size() + config.batch_size - 1) /
                        config.batch_size);
  const long total_steps = steps_per_epoch * config.epochs;

  Rng root(config.seed);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  auto scatter = [&] {
    for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = params[i];
  };

  for (int epoch = 0; epoch < config.epochs && !result.diverged; ++epoch) {
    Rng epoch_rng = root.split();
    shuffle(epoch_rng, order);

    double epoch_loss = 0.0;
    long epoch_batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += config.batch_size) {
      const std::size_t end =
          std::min(order.size(), start + config.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);

      double batch_loss = 0.0;
      AlphaGrads batch_grads;
      for (std::size_t k = start; k < end; ++k) {
        const Example& ex = data.train[order[k]];
        LossAndGrads lg = loss_and_grads(model, ex.tokens, ex.targets);
        batch_loss += lg.loss * inv_b;
        batch_grads.add_scaled(lg.grads, inv_b);
      }
      if (!std::isfinite(batch_loss)) {
        params = snapshot;
        scatter();
        result.diverged = true;
        break;
      }
      epoch_loss += batch_loss;
      ++epoch_batches;

      if (!slots.empty() && !model.trainable_planes.empty()) {
        const std::vector<double> flat = flatten_grads(batch_grads);
        const double lr_t = lr_at(result.steps_run, total_steps, config);
        adamw_step(result.opt_state, params, flat, lr_t, config.weight_decay,
                   config);
        scatter();
      }
      ++result.steps_run;
    }
    if (result.diverged) break;

    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.train_loss = epoch_loss / static_cast<double>(epoch_batches);
    stats.valid_loss =
        data.valid.empty() ? 0.0 : evaluate(model, data.valid).loss;
    result.history.push_back(stats);
    snapshot = params;
  }
  return result;
}

EvalResult evaluate(const ToyTransformer& model,
                    std::span<const Example> examples) {
  double ce_sum = 0.0;
  std::size_t positions = 0;
  std::size_t correct = 0;
  for (const Example& ex : examples) {
    ForwardResult fwd = forward_lm(model, ex.tokens);
    const double ce = cross_entropy(fwd.logits, ex.targets, nullptr);
    ce_sum += ce * static_cast<double>(ex.tokens.size());
    positions += ex.tokens.size();
    for (std::size_t t = 0; t < ex.tokens.size(); ++t) {
      const double* row = fwd.logits.row(t);
      std::size_t best = 0;
      for (std::size_t c = 1; c < fwd.logits.cols; ++c) {
        if (row[c] > row[best]) best = c;
      }
      if (best == ex.targets[t]) ++correct;
    }
  }
  EvalResult res;
  if (positions > 0) {
    res.loss = ce_sum / static_cast<double>(positions);
    res.token_accuracy = static_cast<double>(correct) / static_cast<double>(positions);
  }
  return res;
}

std::vector<SweepResult> sweep_lr_wd(const ToyTransformer& model,
                                     const Dataset& data,
                                     const TrainConfig& base,
                                     std::span<const double> lrs,
                                     std::span<const double> weight_decays) {
  std::vector<SweepResult> results;
  for (double lr : lrs) {
    for (double wd : weight_decays) {
      ToyTransformer clone = model;
      TrainConfig cfg = base;
      cfg.lr = lr;
      cfg.weight_decay = wd;
      train(clone, data, cfg);
      const EvalResult ev = evaluate(clone, data.valid);
      results.push_back({lr, wd, ev.loss, ev.token_accuracy});
    }
  }
  return results;
}

namespace {

std::vector<double> parse_double_list(const std::string& key,
                                      const std::string& value) {
  std::vector<double> out;
  std::istringstream list(value);
  std::string item;
  while (std::getline(list, item, ',')) {
    std::istringstream in(item);
    double v = 0.0;
    if (!(in >> v) || !(in >> std::ws).eof()) {
      throw ConfigError("sweep grid: bad value '" + item + "' for '" + key + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("sweep grid: empty list for '" + key + "'");
  return out;
}

}  // namespace

SweepGrid load_sweep_grid(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IntegrityError("load_sweep_grid: cannot open " + path);
  SweepGrid grid;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim_local = [](const std::string& s) {
      const auto a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      const auto b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    const std::string key = trim_local(line.substr(0, eq));
    const std::string value = trim_local(line.substr(eq + 1));
    if (key == "lr") {
      grid.lrs = parse_double_list(key, value);
    } else if (key == "weight_decay") {
      grid.weight_decays = parse_double_list(key, value);
    } else {
      throw ConfigError("sweep grid: unknown field '" + key + "'");
    }
  }
  if (grid.lrs.empty() || grid.weight_decays.empty()) {
    throw ConfigError("sweep grid: needs both 'lr' and 'weight_decay' lists");
  }
  return grid;
}

void write_history_csv(const std::string& path,
                       std::span<const EpochStats> history) {
  std::ofstream out(path);
  if (!out) throw IntegrityError("write_history_csv: cannot open " + path);
  out << "epoch,train_loss,valid_loss\n";
  out.precision(17);
  for (const EpochStats& s : history) {
    out << s.epoch << "," << s.train_loss << "," << s.valid_loss << "\n";
  }
}

std::vector<EpochStats> read_history_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IntegrityError("read_history_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "epoch,train_loss,valid_loss") {
    throw IntegrityError("read_history_csv: bad header in " + path);
  }
  std::vector<EpochStats> history;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochStats s;
    char c1, c2;
    std::istringstream row(line);
    if (!(row >> s.epoch >> c1 >> s.train_loss >> c2 >> s.valid_loss) ||
        c1 != ',' || c2 != ',') {
      throw IntegrityError("read_history_csv: bad row '" + line + "'");
    }
    history.push_back(s);
  }
  return history;
}

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out;
  if (!(in >> out) || !(in >> std::ws).eof()) {
    throw ConfigError("run config: bad value '" + value + "' for field '" +
                      key + "'");
  }
  return out;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("run config: line " + std::to_string(lineno) +
                        " is not 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));

    if (key == "lr") {
      cfg.train.lr = parse_number<double>(key, value);
    } else if (key == "weight_decay") {
      cfg.train.weight_decay = parse_number<double>(key, value);
    } else if (key == "epochs") {
      cfg.train.epochs = parse_number<int>(key, value);
    } else if (key == "batch_size") {
      cfg.train.batch_size = parse_number<int>(key, value);
    } else if (key == "warmup_steps") {
      cfg.train.warmup_steps = parse_number<int>(key, value);
    } else if (key == "seed") {
      cfg.train.seed = parse_number<std::uint64_t>(key, value);
    } else if (key == "q") {
      cfg.q = parse_number<int>(key, value);
    } else if (key == "g") {
      cfg.g = (value == "row") ? kRowWise : parse_number<std::size_t>(key, value);
    } else if (key == "trainable_planes") {
      cfg.train.trainable_planes.clear();
      if (!value.empty()) {
        std::istringstream list(value);
        std::string item;
        while (std::getline(list, item, ',')) {
          const int alpha_number = parse_number<int>(key, trim(item));
          if (alpha_number < 1) {
            throw ConfigError("run config: trainable_planes entries are "
                              "1-based plane numbers");
          }
          cfg.train.trainable_planes.insert(alpha_number - 1);
        }
      }
    } else if (key == "seq_len") {
      cfg.seq_len = parse_number<std::size_t>(key, value);
    } else if (key == "train_count") {
      cfg.train_count = parse_number<std::size_t>(key, value);
    } else if (key == "valid_count") {
      cfg.valid_count = parse_number<std::size_t>(key, value);
    } else {
      throw ConfigError("run config: unknown field '" + key + "'");
    }
  }
  // epochs = 0 is legal here (the CLI skips training and checkpoints the
  // base as-is); train() itself still requires epochs >= 1.
  TrainConfig check = cfg.train;
  if (check.epochs == 0) check.epochs = 1;
  check.validate();
  if (cfg.train.epochs < 0) {
    throw ConfigError("run config: bad value for field 'epochs'");
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IntegrityError("load_run_config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

}  // namespace bcqtune
