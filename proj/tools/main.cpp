// bcqtune command-line front end: quantize toy models, run scale-only
// fine-tuning, evaluate, and report storage arithmetic.
//
// Exit codes: 0 success, 2 usage, 3 data/integrity, 4 numerical failure.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include "bcqtune/alphatune.hpp"
#include "bcqtune/qfile.hpp"

namespace fs = std::filesystem;
using namespace bcqtune;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

// ---------------------------------------------------------------------------
// Table helpers: aligned text always, CSV mirror when --csv is given.
// ---------------------------------------------------------------------------

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void print(std::ostream& out) const {
    std::vector<std::size_t> widths(header.size());
    for (std::size_t c = 0; c < header.size(); ++c) widths[c] = header[c].size();
    for (const auto& row : rows) {
      for (std::size_t c = 0; c < row.size(); ++c) {
        widths[c] = std::max(widths[c], row[c].size());
      }
    }
    auto line = [&](const std::vector<std::string>& row) {
      for (std::size_t c = 0; c < row.size(); ++c) {
        out << std::left << std::setw(int(widths[c]) + 2) << row[c];
      }
      out << "\n";
    };
    line(header);
    for (const auto& row : rows) line(row);
  }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IntegrityError("cannot open for writing: " + path);
    auto line = [&](const std::vector<std::string>& row) {
      for (std::size_t c = 0; c < row.size(); ++c) {
        out << row[c] << (c + 1 < row.size() ? "," : "");
      }
      out << "\n";
    };
    line(header);
    for (const auto& row : rows) line(row);
  }
};

std::string fmt(double v, int prec = 6) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(prec) << v;
  return s.str();
}

std::string fmt_sci(double v) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(3) << v;
  return s.str();
}

void refuse_existing(const std::string& path, bool force) {
  if (!force && fs::exists(path)) {
    throw IntegrityError("refusing to overwrite existing file " + path +
                         " (use --force)");
  }
}

ModelConfig geometry_preset(const std::string& name) {
  ModelConfig cfg;
  cfg.vocab = 50257;
  cfg.n_ctx = 1024;
  if (name == "gpt2m") {
    cfg.h = 1024;
    cfg.n_layers = 24;
  } else if (name == "gpt2l") {
    cfg.h = 1280;
    cfg.n_layers = 36;
  } else {
    throw ConfigError("unknown geometry preset '" + name +
                      "' (expected gpt2m or gpt2l)");
  }
  return cfg;
}

std::size_t parse_g(const std::string& text) {
  if (text == "row") return kRowWise;
  std::istringstream in(text);
  std::size_t g = 0;
  if (!(in >> g) || !(in >> std::ws).eof() || g == 0) {
    throw ConfigError("bad group size '" + text +
                      "' (expected 'row' or a positive integer)");
  }
  return g;
}

// ---------------------------------------------------------------------------
// size tables
// ---------------------------------------------------------------------------

Table size_table(const ModelConfig& geometry) {
  const ModelSizeReport rep = model_size_report(geometry);
  Table t;
  t.header = {"layer",       "shape",       "g",  "scales/plane",
              "plane_bytes", "scale_bytes", "MB", "padded_bytes"};
  for (const LayerSizeReport& l : rep.block_layers) {
    t.rows.push_back({l.name,
                      std::to_string(l.h_out) + "x" + std::to_string(l.h_in),
                      std::to_string(l.g),
                      std::to_string(l.h_out * (l.h_in / l.g)),
                      fmt(l.plane_bytes_unpadded, 0),
                      std::to_string(l.scale_bytes),
                      fmt(l.mb(), 2),
                      std::to_string(l.bytes_padded())});
  }
  return t;
}

void print_size_summary(std::ostream& out, const ModelConfig& geometry,
                        std::size_t n_planes) {
  const ModelSizeReport rep = model_size_report(geometry);
  const std::size_t dense = dense_file_bytes(geometry);
  const std::size_t ckpt = checkpoint_file_bytes(geometry, n_planes);
  out << "quantized linear sections: " << fmt(rep.quant_bytes_unpadded / 1e6, 2)
      << " MB (padded on disk: " << fmt(double(rep.quant_bytes_padded) / 1e6, 2)
      << " MB)\n";
  out << "full-precision sections:   " << fmt(double(rep.fp32_bytes) / 1e6, 2)
      << " MB\n";
  out << "model file total:          " << fmt(double(rep.file_bytes) / 1e6, 2)
      << " MB (" << rep.file_bytes << " bytes)\n";
  out << "dense fp32 file total:     " << fmt(double(dense) / 1e6, 2) << " MB\n";
  out << "task checkpoint (" << n_planes << " plane"
      << (n_planes == 1 ? "" : "s") << "):  " << fmt(double(ckpt) / 1e6, 2)
      << " MB (" << ckpt << " bytes)\n";
  out << "trainable scales per task: "
      << count_trainable_geometry(geometry.h, geometry.n_layers, geometry.g,
                                  n_planes)
      << "\n";
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

struct InitArgs {
  std::uint64_t seed = 0;
  std::size_t h = 32, layers = 2, vocab = 16, n_ctx = 64;
  std::string out;
  bool force = false;
};

int cmd_init(const InitArgs& a) {
  refuse_existing(a.out, a.force);
  ModelConfig cfg;
  cfg.vocab = a.vocab;
  cfg.h = a.h;
  cfg.n_layers = a.layers;
  cfg.n_ctx = a.n_ctx;
  DenseTransformer model = init_dense(cfg, a.seed);
  save_dense(model, a.out);
  std::cout << "wrote dense model " << a.out << " (h=" << a.h << ", layers="
            << a.layers << ", vocab=" << a.vocab << ", n_ctx=" << a.n_ctx
            << ", seed=" << a.seed << ", " << fs::file_size(a.out)
            << " bytes)\n";
  return 0;
}

struct QuantizeArgs {
  std::string model_path;
  std::string geometry;
  int q = 3;
  std::string g_text = "row";
  std::string method = "greedy";
  int iters = 15;
  std::string out;
  std::string csv;
  bool force = false;
};

int cmd_quantize(const QuantizeArgs& a) {
  const std::size_t g = parse_g(a.g_text);
  if (a.method != "greedy" && a.method != "alternating") {
    throw ConfigError("unknown method '" + a.method + "'");
  }

  if (!a.geometry.empty()) {
    // Dry run: storage arithmetic only, no weights.
    ModelConfig geo = geometry_preset(a.geometry);
    geo.q = a.q;
    geo.g = g;
    Table t = size_table(geo);
    t.print(std::cout);
    print_size_summary(std::cout, geo, 1);
    if (!a.csv.empty()) t.write_csv(a.csv);
    return 0;
  }

  if (a.model_path.empty() || a.out.empty()) {
    throw ConfigError(
        "quantize needs --model and --out (or --geometry for a dry run)");
  }
  refuse_existing(a.out, a.force);

  DenseTransformer dense = load_dense(a.model_path);
  dense.config.q = a.q;
  dense.config.g = g;
  dense.config.method =
      a.method == "alternating" ? QuantMethod::Alternating : QuantMethod::Greedy;
  dense.config.alt_iterations = a.iters;
  dense.config.validate();

  // Per-layer MSE table. The alternating method starts from the greedy
  // factorization, so the greedy column comes for free and is printed
  // alongside for comparison.
  const bool alternating = dense.config.method == QuantMethod::Alternating;
  Table t;
  t.header = {"block", "layer", "shape", "mse_greedy"};
  if (alternating) t.header.push_back("mse_alternating");

  ToyTransformer model;
  model.config = dense.config;
  model.tok_emb = dense.tok_emb;
  model.pos_emb = dense.pos_emb;
  const QuantConfig qc = dense.config.quant_config();
  for (std::size_t b = 0; b < dense.blocks.size(); ++b) {
    const auto& db = dense.blocks[b];
    ToyTransformer::Block blk;
    blk.ln1 = db.ln1;
    blk.ln2 = db.ln2;
    const DenseLinear* dls[4] = {&db.qkv, &db.att_out, &db.ffn_in, &db.ffn_out};
    QuantLinear* qls[4] = {&blk.qkv, &blk.att_out, &blk.ffn_in, &blk.ffn_out};
    for (int i = 0; i < 4; ++i) {
      try {
        BCQMatrix greedy = quantize_greedy(dls[i]->w, qc);
        const double mse_greedy = mse(dls[i]->w, dequantize(greedy));
        std::vector<std::string> row = {
            std::to_string(b), quant_layer_name(i),
            std::to_string(dls[i]->w.rows) + "x" + std::to_string(dls[i]->w.cols),
            fmt_sci(mse_greedy)};
        BCQMatrix final_bcq = std::move(greedy);
        if (alternating) {
          final_bcq = refine_alternating(final_bcq, dls[i]->w, a.iters);
          row.push_back(fmt_sci(mse(dls[i]->w, dequantize(final_bcq))));
        }
        qls[i]->weights = std::move(final_bcq);
        qls[i]->bias = dls[i]->bias;
        t.rows.push_back(std::move(row));
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("layer ") + quant_layer_name(i) +
                          " of block " + std::to_string(b) + ": " + e.what());
      }
    }
    model.blocks.push_back(std::move(blk));
  }
  model.ln_f = dense.ln_f;

  save_model(model, a.out);
  t.print(std::cout);
  if (!a.csv.empty()) t.write_csv(a.csv);
  std::cout << "\n";
  Table sizes = size_table(model.config);
  sizes.print(std::cout);
  print_size_summary(std::cout, model.config, 1);
  std::cout << "wrote quantized model " << a.out << " (" << fs::file_size(a.out)
            << " bytes)\n";
  return 0;
}

struct FinetuneArgs {
  std::string qmodel;
  std::string config_path;
  std::string ckpt_out;
  std::string history_out;
  bool force = false;
};

int cmd_finetune(const FinetuneArgs& a) {
  refuse_existing(a.ckpt_out, a.force);
  const RunConfig run = load_run_config(a.config_path);
  ToyTransformer model = load_model(a.qmodel);
  if (run.q && *run.q != model.config.q) {
    throw ConfigError("run config field 'q' (" + std::to_string(*run.q) +
                      ") does not match the model (q=" +
                      std::to_string(model.config.q) + ")");
  }
  if (run.g && *run.g != model.config.g) {
    throw ConfigError("run config field 'g' does not match the model");
  }
  if (2 * run.seq_len - 1 > model.config.n_ctx) {
    throw ConfigError("run config field 'seq_len': sequence does not fit n_ctx");
  }

  const Dataset data =
      make_reversal_dataset(run.train.seed, model.config.vocab, run.seq_len,
                            run.train_count, run.valid_count);

  TrainResult res;
  if (run.train.epochs == 0) {
    // Skip training: checkpoint the base scales as they are.
    model.trainable_planes = run.train.trainable_planes;
    const EvalResult baseline = evaluate(model, data.valid);
    std::cout << "epochs = 0: no training, baseline valid loss "
              << fmt(baseline.loss) << "\n";
  } else {
    res = train(model, data, run.train);
  }

  Table t;
  t.header = {"epoch", "train_loss", "valid_loss"};
  for (const EpochStats& s : res.history) {
    t.rows.push_back(
        {std::to_string(s.epoch), fmt(s.train_loss), fmt(s.valid_loss)});
  }
  t.print(std::cout);
  if (res.diverged) {
    std::cout << "training diverged; scales restored to the last completed epoch\n";
  }

  save_checkpoint(model, a.ckpt_out);
  const std::string history_path =
      a.history_out.empty() ? a.ckpt_out + ".history.csv" : a.history_out;
  write_history_csv(history_path, res.history);

  std::cout << "trainable scales: " << count_trainable(model) << "\n";
  std::cout << "wrote checkpoint " << a.ckpt_out << " ("
            << fs::file_size(a.ckpt_out) << " bytes)\n";
  std::cout << "wrote history " << history_path << "\n";
  return res.diverged ? kExitNumerical : 0;
}

struct EvalArgs {
  std::string qmodel;
  std::string ckpt;
  std::uint64_t data_seed = 0;
  std::size_t seq_len = 4;
  std::size_t count = 64;
  std::string csv;
};

int cmd_eval(const EvalArgs& a) {
  ToyTransformer model = load_model(a.qmodel);
  if (!a.ckpt.empty()) {
    apply_checkpoint(model, load_checkpoint(a.ckpt));
  }
  const Dataset data = make_reversal_dataset(a.data_seed, model.config.vocab,
                                             a.seq_len, 0, a.count);
  const EvalResult res = evaluate(model, data.valid);
  Table t;
  t.header = {"examples", "loss", "token_accuracy"};
  t.rows.push_back(
      {std::to_string(a.count), fmt(res.loss), fmt(res.token_accuracy)});
  t.print(std::cout);
  if (!a.csv.empty()) t.write_csv(a.csv);
  return 0;
}

struct SizeReportArgs {
  std::string geometry;
  std::size_t h = 0, layers = 0, vocab = 50257, n_ctx = 1024;
  int q = 3;
  std::string g_text = "row";
  std::size_t planes = 1;
  std::string csv;
};

int cmd_size_report(const SizeReportArgs& a) {
  ModelConfig geo;
  if (!a.geometry.empty()) {
    geo = geometry_preset(a.geometry);
  } else {
    if (a.h == 0 || a.layers == 0) {
      throw ConfigError("size-report needs --geometry or both --h and --layers");
    }
    geo.h = a.h;
    geo.n_layers = a.layers;
    geo.vocab = a.vocab;
    geo.n_ctx = a.n_ctx;
  }
  geo.q = a.q;
  geo.g = parse_g(a.g_text);
  Table t = size_table(geo);
  t.print(std::cout);
  print_size_summary(std::cout, geo, a.planes);
  if (!a.csv.empty()) t.write_csv(a.csv);
  return 0;
}

struct GradcheckArgs {
  std::string qmodel;
  double tolerance = 1e-4;
  std::size_t samples = 24;
  std::uint64_t seed = 0;
  bool inject_error = false;  // test hook: corrupt one gradient on purpose
};

int cmd_gradcheck(const GradcheckArgs& a) {
  ToyTransformer model = load_model(a.qmodel);
  Rng rng(a.seed);
  const std::size_t len = std::min<std::size_t>(8, model.config.n_ctx);
  std::vector<TokenId> tokens(len), targets(len);
  for (auto& t : tokens) t = TokenId(rng.next_below(model.config.vocab));
  for (auto& t : targets) t = TokenId(rng.next_below(model.config.vocab));

  LossAndGrads lg = loss_and_grads(model, tokens, targets);
  auto loss_of = [&] {
    ForwardResult out = forward_lm(model, tokens);
    return cross_entropy(out.logits, targets, nullptr);
  };

  // Every trainable scale, labelled for the offender report.
  struct Entry {
    double analytic;
    double* slot;
    std::string label;
  };
  std::vector<Entry> entries;
  std::vector<QuantLinear*> layers = quant_layers(model);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const double gl = double(layers[l]->g_l());
    for (auto& [plane, grad] : lg.grads.layers[l]) {
      GroupedScales& sc = layers[l]->weights.scales[plane];
      for (std::size_t i = 0; i < sc.values.size(); ++i) {
        entries.push_back({gl * grad.values[i], &sc.values[i],
                           "block " + std::to_string(l / 4) + " " +
                               quant_layer_name(l) + " alpha" +
                               std::to_string(plane + 1) + "[" +
                               std::to_string(i) + "]"});
      }
    }
  }

  std::vector<std::size_t> idx(entries.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  shuffle(rng, idx);
  const std::size_t n_check = std::min(a.samples, idx.size());

  struct Offender {
    double rel;
    std::string label;
    double analytic, fd;
  };
  std::vector<Offender> offenders;

  for (std::size_t k = 0; k < n_check; ++k) {
    Entry& e = entries[idx[k]];
    double analytic = e.analytic;
    if (a.inject_error && k == 0) analytic += 1.0;
    const double saved = *e.slot;
    const double h = 1e-5;
    *e.slot = saved + h;
    const double up = loss_of();
    *e.slot = saved - h;
    const double down = loss_of();
    *e.slot = saved;
    const double fd = (up - down) / (2.0 * h);
    const double denom = std::max({std::fabs(analytic), std::fabs(fd), 1e-8});
    const double rel = std::fabs(analytic - fd) / denom;
    if (rel > a.tolerance) offenders.push_back({rel, e.label, analytic, fd});
  }

  std::cout << "checked " << n_check << " of " << entries.size()
            << " scale gradients at tolerance " << fmt_sci(a.tolerance) << "\n";
  if (offenders.empty()) {
    std::cout << "gradcheck PASS\n";
    return 0;
  }
  std::sort(offenders.begin(), offenders.end(),
            [](const Offender& x, const Offender& y) { return x.rel > y.rel; });
  std::cout << "gradcheck FAIL: " << offenders.size() << " offender"
            << (offenders.size() == 1 ? "" : "s") << " (worst first)\n";
  Table t;
  t.header = {"rel_error", "entry", "analytic", "finite_diff"};
  for (std::size_t i = 0; i < std::min<std::size_t>(10, offenders.size()); ++i) {
    t.rows.push_back({fmt_sci(offenders[i].rel), offenders[i].label,
                      fmt_sci(offenders[i].analytic), fmt_sci(offenders[i].fd)});
  }
  t.print(std::cout);
  return kExitNumerical;
}

struct ExportHistoryArgs {
  std::string in;
  std::string csv;
};

int cmd_export_history(const ExportHistoryArgs& a) {
  const std::vector<EpochStats> history = read_history_csv(a.in);
  Table t;
  t.header = {"epoch", "train_loss", "valid_loss"};
  for (const EpochStats& s : history) {
    t.rows.push_back(
        {std::to_string(s.epoch), fmt(s.train_loss), fmt(s.valid_loss)});
  }
  t.print(std::cout);
  if (!a.csv.empty()) t.write_csv(a.csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"binary-coding quantization and scale-only fine-tuning toolkit"};
  app.require_subcommand(1);
  // --h is a real option (hidden size), so help is long-form only.
  app.set_help_flag("--help", "print help");

  InitArgs init_args;
  auto* init = app.add_subcommand("init", "create a random dense toy model");
  init->add_option("--seed", init_args.seed, "PRNG seed")->required();
  init->add_option("--h", init_args.h, "hidden size (even, >= 4)");
  init->add_option("--layers", init_args.layers, "number of blocks");
  init->add_option("--vocab", init_args.vocab, "vocabulary size");
  init->add_option("--n-ctx", init_args.n_ctx, "max sequence length");
  init->add_option("--out", init_args.out, "output path")->required();
  init->add_flag("--force", init_args.force, "overwrite existing output");

  QuantizeArgs q_args;
  auto* quant = app.add_subcommand(
      "quantize", "quantize a dense model (or dry-run a geometry)");
  quant->add_option("--model", q_args.model_path, "dense model file");
  quant->add_option("--geometry", q_args.geometry,
                    "gpt2m|gpt2l: size arithmetic only");
  quant->add_option("--q", q_args.q, "bits per weight (1..8)");
  quant->add_option("--g", q_args.g_text, "group size or 'row'");
  quant->add_option("--method", q_args.method, "greedy|alternating");
  quant->add_option("--iters", q_args.iters, "alternating iterations");
  quant->add_option("--out", q_args.out, "output path");
  quant->add_option("--csv", q_args.csv, "also write the table as CSV");
  quant->add_flag("--force", q_args.force, "overwrite existing output");

  FinetuneArgs f_args;
  auto* fine = app.add_subcommand("finetune",
                                  "train scale planes on the reversal task");
  fine->add_option("--qmodel", f_args.qmodel, "quantized model file")->required();
  fine->add_option("--config", f_args.config_path, "run config file")->required();
  fine->add_option("--ckpt-out", f_args.ckpt_out, "checkpoint output path")
      ->required();
  fine->add_option("--history-out", f_args.history_out, "history CSV path");
  fine->add_flag("--force", f_args.force, "overwrite existing output");

  EvalArgs e_args;
  auto* ev = app.add_subcommand("eval", "evaluate on the reversal task");
  ev->add_option("--qmodel", e_args.qmodel, "quantized model file")->required();
  ev->add_option("--ckpt", e_args.ckpt, "task checkpoint to apply");
  ev->add_option("--data-seed", e_args.data_seed, "dataset seed");
  ev->add_option("--seq-len", e_args.seq_len, "reversal half-length");
  ev->add_option("--count", e_args.count, "number of examples");
  ev->add_option("--csv", e_args.csv, "also write the result as CSV");

  SizeReportArgs s_args;
  auto* size =
      app.add_subcommand("size-report", "storage arithmetic for a geometry");
  size->add_option("--geometry", s_args.geometry, "gpt2m|gpt2l");
  size->add_option("--h", s_args.h, "hidden size");
  size->add_option("--layers", s_args.layers, "number of blocks");
  size->add_option("--vocab", s_args.vocab, "vocabulary size");
  size->add_option("--n-ctx", s_args.n_ctx, "max sequence length");
  size->add_option("--q", s_args.q, "bits per weight");
  size->add_option("--g", s_args.g_text, "group size or 'row'");
  size->add_option("--planes", s_args.planes, "trainable planes per task");
  size->add_option("--csv", s_args.csv, "also write the table as CSV");

  GradcheckArgs g_args;
  auto* grad = app.add_subcommand(
      "gradcheck", "finite-difference check of scale gradients");
  grad->add_option("--qmodel", g_args.qmodel, "quantized model file")->required();
  grad->add_option("--tolerance", g_args.tolerance, "relative tolerance");
  grad->add_option("--samples", g_args.samples, "number of entries to check");
  grad->add_option("--seed", g_args.seed, "PRNG seed");
  grad->add_flag("--inject-grad-error", g_args.inject_error,
                 "test hook: corrupt one gradient");

  ExportHistoryArgs x_args;
  auto* exp =
      app.add_subcommand("export-history", "print a history CSV as a table");
  exp->add_option("--in", x_args.in, "history CSV from finetune")->required();
  exp->add_option("--csv", x_args.csv, "re-emit as CSV to this path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*init) return cmd_init(init_args);
    if (*quant) return cmd_quantize(q_args);
    if (*fine) return cmd_finetune(f_args);
    if (*ev) return cmd_eval(e_args);
    if (*size) return cmd_size_report(s_args);
    if (*grad) return cmd_gradcheck(g_args);
    if (*exp) return cmd_export_history(x_args);
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
