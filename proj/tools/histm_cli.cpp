#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "histm/histm.hpp"

namespace {

using namespace histm;
namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kValidation = 3, kIo = 4, kDivergence = 5 };

struct Key {
  std::string name;
  std::string help;
};

const std::vector<Key> kCommonKeys = {{"out", "Output directory (default: $HISTM_OUT_ROOT/<command>)"},
                                      {"seed", "Random seed"}};
const std::vector<Key> kDataKeys = {{"data", "Series file (.csv long format or .hgrd binary)"}};
const std::vector<Key> kModelKeys = {{"T", "Window length"},
                                     {"K", "Spatial kernel extent (odd)"},
                                     {"C", "Encoder width"},
                                     {"N", "Encoder layers"},
                                     {"conv_k", "Spatial convolution extent (odd)"},
                                     {"mlp_hidden", "Prediction head hidden width"},
                                     {"d_state", "State size of the temporal block"},
                                     {"d_conv", "Causal convolution width of the temporal block"},
                                     {"expand", "Inner expansion of the temporal block"}};
const std::vector<Key> kTrainKeys = {{"train_stride", "Temporal stride of training windows"},
                                     {"val_stride", "Temporal stride of validation windows"},
                                     {"batch_size", "Mini-batch size"},
                                     {"max_epochs", "Maximum epochs"},
                                     {"lr", "Initial learning rate"},
                                     {"early_stop_patience", "Epochs without improvement before stopping"},
                                     {"plateau_patience", "Epochs without improvement before lr reduction"},
                                     {"plateau_factor", "Learning-rate reduction factor"},
                                     {"grad_clip", "Global gradient-norm clip, 0 disables"},
                                     {"precision", "float32 or float64"},
                                     {"shuffle", "Shuffle training order each epoch (true/false)"}};
const std::vector<Key> kSynthKeys = {{"rows", "Grid rows"},
                                     {"cols", "Grid columns"},
                                     {"days", "Days of data"},
                                     {"interval", "Minutes per time step"}};
const std::vector<Key> kSourceKeys = {{"ckpt", "Checkpoint file"},
                                      {"baseline", "none, persistence, grid_mean or oracle"},
                                      {"split", "train, val or test"},
                                      {"mape_floor", "MAPE denominator floor"}};
const std::vector<Key> kRolloutKeys = {{"steps", "Rollout steps"},
                                       {"start", "First input frame (default: start of the split)"},
                                       {"boundary_fill", "hold_last or true_values"}};
const std::vector<Key> kGradKeys = {{"eps", "Finite-difference step"},
                                    {"max_params", "Parameter cap for the checked model"},
                                    {"batch", "Windows in the checked batch"}};
const std::vector<Key> kAnalyzeKeys = {{"row", "Cell row (default: grid center)"},
                                       {"col", "Cell column (default: grid center)"},
                                       {"lags", "Comma-separated autocorrelation lags"},
                                       {"apen_m", "Approximate entropy template length"},
                                       {"apen_r", "Approximate entropy tolerance as a fraction of the stddev"}};

std::set<std::string> all_keys() {
  std::set<std::string> out{"sabotage"};
  for (const auto* group : {&kCommonKeys, &kDataKeys, &kModelKeys, &kTrainKeys, &kSynthKeys, &kSourceKeys,
                            &kRolloutKeys, &kGradKeys, &kAnalyzeKeys})
    for (const auto& k : *group) out.insert(k.name);
  return out;
}

/// One subcommand: its flags mirror config keys and are applied over the file.
struct Command {
  CLI::App* app = nullptr;
  std::string config_file;
  std::map<std::string, std::string> flags;
  bool sabotage = false;

  void add(const std::vector<Key>& keys) {
    for (const auto& k : keys) app->add_option("--" + k.name, flags[k.name], k.help);
  }

  RunConfig resolve() const {
    RunConfig cfg(all_keys());
    if (!config_file.empty()) cfg.load(config_file);
    for (const auto& [name, value] : flags)
      if (app->count("--" + name)) cfg.set(name, value);
    if (sabotage) cfg.set("sabotage", "true");
    return cfg;
  }
};

fs::path out_dir(RunConfig& cfg, const std::string& command) {
  const char* root = std::getenv("HISTM_OUT_ROOT");
  const fs::path fallback = fs::path(root && *root ? root : "runs") / command;
  return cfg.str("out", fallback.string());
}

void write_text(const fs::path& path, const std::string& text) { io::write_file_atomic(path, text); }

void echo_config(const RunConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  write_text(out / "run_config", cfg.dump());
}

HiSTMConfig model_config(RunConfig& cfg, const HiSTMConfig& d) {
  auto c = HiSTMConfig::make(cfg.count("T", d.T), cfg.count("K", d.K), cfg.count("C", d.C), cfg.count("N", d.N),
                             cfg.count("conv_k", d.conv_k), cfg.count("mlp_hidden", d.mlp_hidden),
                             cfg.count("d_state", d.mamba.d_state), cfg.count("d_conv", d.mamba.d_conv),
                             cfg.count("expand", d.mamba.expand));
  c.validate();
  return c;
}

TrainConfig train_config(RunConfig& cfg) {
  TrainConfig d;
  TrainConfig t;
  t.batch_size = cfg.count("batch_size", d.batch_size);
  t.max_epochs = cfg.count("max_epochs", d.max_epochs);
  t.lr = cfg.real("lr", d.lr);
  t.early_stop_patience = cfg.count("early_stop_patience", d.early_stop_patience);
  t.plateau_patience = cfg.count("plateau_patience", d.plateau_patience);
  t.plateau_factor = cfg.real("plateau_factor", d.plateau_factor);
  t.grad_clip = cfg.real("grad_clip", d.grad_clip);
  t.seed = cfg.count("seed", d.seed);
  t.shuffle = cfg.flag("shuffle", d.shuffle);
  const std::string p = cfg.str("precision", "float32");
  if (p == "float32") {
    t.precision = Precision::kFloat32;
  } else if (p == "float64") {
    t.precision = Precision::kFloat64;
  } else {
    throw ValidationError("key 'precision': expected float32 or float64, got '" + p + "'");
  }
  t.validate();
  return t;
}

GridSeries load_data(RunConfig& cfg) {
  GridSeries s = load_series(cfg.required("data"));
  s.validate();
  return s;
}

TimeRange split_range(const SplitRanges& r, const std::string& name) {
  if (name == "train") return r.train;
  if (name == "val") return r.val;
  if (name == "test") return r.test;
  throw ValidationError("key 'split': expected train, val or test, got '" + name + "'");
}

/// Where predictions come from: a checkpoint or a closed-form baseline.
struct Source {
  std::string label;
  WindowSpec spec;
  ScalerParams scaler;
  Predictor predictor;
  std::optional<Checkpoint> ckpt;
};

Source resolve_source(RunConfig& cfg, const GridSeries& series, const SplitRanges& split) {
  Source src;
  const std::string baseline = cfg.str("baseline", "none");
  if (cfg.has("ckpt")) {
    src.ckpt = load_checkpoint(cfg.str("ckpt", ""));
    const auto& mc = src.ckpt->config;
    for (auto [key, value] : {std::pair<const char*, std::size_t>{"T", mc.T}, {"K", mc.K}})
      if (cfg.has(key) && cfg.count(key, value) != value)
        throw ValidationError("key '" + std::string(key) + "' = " + std::to_string(cfg.count(key, value)) +
                              " conflicts with the checkpoint (" + key + " = " + std::to_string(value) + ")");
    src.spec = {mc.T, mc.K, 1};
    src.scaler = src.ckpt->scaler;
  } else {
    if (baseline == "none") throw UsageError("missing required key 'ckpt' (or set 'baseline')");
    src.spec = {cfg.count("T", 6), cfg.count("K", 11), 1};
    src.spec.validate();
    const WindowSpec fit{src.spec.T, src.spec.K, cfg.count("train_stride", 6)};
    src.scaler = scaler_fit(series, make_window_index(series, fit, split.train), fit);
  }
  if (baseline == "none") {
    src.label = "model";
    src.predictor = model_predictor(src.ckpt->params);
  } else if (baseline == "persistence") {
    src.predictor = persistence_predictor(src.spec);
  } else if (baseline == "grid_mean") {
    src.predictor = grid_mean_predictor(src.spec);
  } else if (baseline == "oracle") {
    src.predictor = oracle_predictor(series, src.scaler, src.spec);
  } else {
    throw ValidationError("key 'baseline': expected none, persistence, grid_mean or oracle, got '" + baseline + "'");
  }
  if (src.label.empty()) src.label = baseline;
  return src;
}

void print_report(const std::string& title, const MetricsReport& r) {
  std::cout << title << "\n" << format_metrics_csv(r);
}

// ---------------------------------------------------------------------------
// Commands

int cmd_synth(RunConfig& cfg) {
  const std::size_t h = cfg.count("rows", 20), w = cfg.count("cols", 20), days = cfg.count("days", 14);
  const std::size_t interval = cfg.count("interval", 10);
  const std::uint64_t seed = cfg.count("seed", 7);
  if (h == 0 || w == 0 || days == 0 || interval == 0) throw UsageError("synth: rows, cols, days and interval must be >= 1");
  const fs::path out = out_dir(cfg, "synth");
  echo_config(cfg, out);
  const GridSeries s = generate_synthetic(h, w, days, interval, seed);
  write_long_csv(s, out / "synthetic.csv");
  write_grid_binary(s, out / "synthetic.hgrd");
  std::cout << "wrote " << (out / "synthetic.csv").string() << " and " << (out / "synthetic.hgrd").string() << " ("
            << s.H << "x" << s.W << ", " << s.frames() << " frames)\n";
  return kOk;
}

int cmd_train(RunConfig& cfg) {
  const GridSeries series = load_data(cfg);
  const HiSTMConfig mc = model_config(cfg, HiSTMConfig{});
  const TrainConfig tc = train_config(cfg);
  const WindowSpec train_spec{mc.T, mc.K, cfg.count("train_stride", 6)};
  const WindowSpec val_spec{mc.T, mc.K, cfg.count("val_stride", 6)};
  train_spec.validate();
  val_spec.validate();
  const fs::path out = out_dir(cfg, "train");

  const SplitRanges split = chronological_split(series.frames(), mc.T);
  const auto train_idx = make_window_index(series, train_spec, split.train);
  const auto val_idx = make_window_index(series, val_spec, split.val);
  const ScalerParams scaler = scaler_fit(series, train_idx, train_spec);
  const SampleSet train = build_samples(series, train_idx, train_spec, scaler);
  const SampleSet val = build_samples(series, val_idx, val_spec, scaler);
  echo_config(cfg, out);

  std::cout << "parameters: " << param_count(mc) << "\n"
            << "samples: train " << train.size() << ", val " << val.size() << "\n"
            << "scaler: min " << scaler.min_v << ", max " << scaler.max_v << "\n";
  TrainHistory history;
  auto on_epoch = [&](const EpochRecord& e) {
    history.push_back(e);
    write_text(out / "history.csv", format_history_csv(history));
    std::cout << "epoch " << e.epoch << "/" << tc.max_epochs << "  train_mae " << std::setprecision(6) << e.train_mae
              << "  val_mae " << e.val_mae << "  lr " << e.lr << "  (" << std::setprecision(3) << e.seconds << " s)"
              << std::endl;
  };
  const TrainResult r = tc.precision == Precision::kFloat32
                            ? train_loop(HiSTMParams<float>::init(mc, tc.seed), train, val, tc, on_epoch)
                            : train_loop(HiSTMParams<double>::init(mc, tc.seed), train, val, tc, on_epoch);
  save_checkpoint(r.best, out / "best.ckpt");
  std::cout << "best epoch " << r.best.meta.epoch << ", val_mae " << std::setprecision(6) << r.best.meta.best_val_loss
            << "\nwrote " << (out / "best.ckpt").string() << "\n";
  return kOk;
}

int cmd_eval(RunConfig& cfg) {
  const GridSeries series = load_data(cfg);
  const fs::path out = out_dir(cfg, "eval");
  const std::string split_name = cfg.str("split", "test");
  EvalOptions opt;
  opt.metrics.mape_floor = cfg.real("mape_floor", 1.0);
  // Split geometry depends on T, which a checkpoint may fix.
  const SplitRanges probe = chronological_split(series.frames(), cfg.has("ckpt") ? 1 : cfg.count("T", 6));
  Source src = resolve_source(cfg, series, probe);
  const SplitRanges split = chronological_split(series.frames(), src.spec.T);
  const TimeRange range = split_range(split, split_name);
  const SampleSet set = build_samples(series, make_window_index(series, src.spec, range), src.spec, src.scaler);
  if (src.ckpt) check_compatible(*src.ckpt, set);
  echo_config(cfg, out);

  const EvalResult r = evaluate_single_step(src.predictor, set, series.H, series.W, opt);
  nlohmann::json j = metrics_to_json(r.report);
  j["split"] = split_name;
  j["source"] = src.label;
  write_text(out / "metrics.csv", format_metrics_csv(r.report));
  write_text(out / "metrics.json", j.dump(2) + "\n");
  std::string pred = "t,row,col,truth,pred\n";
  for (std::size_t k = 0; k < set.size(); ++k) {
    const auto& o = set.origins[k];
    pred += std::to_string(o.t + src.spec.T) + "," + std::to_string(o.i) + "," + std::to_string(o.j) + "," +
            io::format_double(r.truth[k]) + "," + io::format_double(r.pred[k]) + "\n";
  }
  write_text(out / "predictions.csv", pred);
  print_report(src.label + " on " + split_name + " (" + std::to_string(set.size()) + " predictions)", r.report);
  return kOk;
}

int cmd_rollout(RunConfig& cfg) {
  const GridSeries series = load_data(cfg);
  const fs::path out = out_dir(cfg, "rollout");
  EvalOptions opt;
  opt.metrics.mape_floor = cfg.real("mape_floor", 1.0);
  const SplitRanges probe = chronological_split(series.frames(), cfg.has("ckpt") ? 1 : cfg.count("T", 6));
  Source src = resolve_source(cfg, series, probe);
  const SplitRanges split = chronological_split(series.frames(), src.spec.T);
  RolloutConfig rc;
  rc.steps = cfg.count("steps", 6);
  if (rc.steps < 1) throw ValidationError("key 'steps' must be >= 1");
  const std::string fill = cfg.str("boundary_fill", "hold_last");
  if (fill == "hold_last") {
    rc.boundary_fill = BoundaryFill::kHoldLast;
  } else if (fill == "true_values") {
    rc.boundary_fill = BoundaryFill::kTrueValues;
  } else {
    throw ValidationError("key 'boundary_fill': expected hold_last or true_values, got '" + fill + "'");
  }
  const std::size_t start = cfg.count("start", split_range(split, cfg.str("split", "test")).begin);
  echo_config(cfg, out);

  const RolloutReport rep = autoregressive_rollout(src.predictor, series, src.scaler, src.spec, start, rc, opt);
  write_text(out / "rollout.csv", format_rollout_csv(rep));
  nlohmann::json j = {{"source", src.label}, {"start", start}, {"mae_slope", mae_slope(rep.per_step)}};
  for (const auto& m : rep.per_step) j["steps"].push_back(metrics_to_json(m));
  write_text(out / "rollout.json", j.dump(2) + "\n");

  // Trajectory of the center cell of the evaluated region.
  const std::size_t r = (src.spec.K - 1) / 2, iw = series.W - src.spec.K + 1;
  const std::size_t ci = series.H / 2, cj = series.W / 2, k = (ci - r) * iw + (cj - r);
  std::vector<double> truth, pred;
  for (std::size_t s = 0; s < rep.frames.size(); ++s) {
    truth.push_back(series.at(rep.frames[s], ci, cj));
    pred.push_back(rep.pred_inner[s][k]);
  }
  write_text(out / "trajectory.csv", format_trajectory_csv(rep.frames, truth, pred));
  std::cout << src.label << " rollout from t=" << start << "\n" << format_rollout_csv(rep);
  return kOk;
}

int cmd_gradcheck(RunConfig& cfg) {
  const HiSTMConfig toy = HiSTMConfig::make(3, 3, 4, 2, 3, 8, 4, 2, 2);
  const HiSTMConfig mc = model_config(cfg, toy);
  const std::size_t cap = cfg.count("max_params", 2000), batch = cfg.count("batch", 2);
  const double eps = cfg.real("eps", 1e-5);
  const std::uint64_t seed = cfg.count("seed", 7);
  const bool sabotage = cfg.flag("sabotage", false);
  if (param_count(mc) > cap)
    throw UsageError("gradcheck: config has " + std::to_string(param_count(mc)) +
                     " parameters, above the cap of " + std::to_string(cap) + " (key 'max_params')");
  if (batch < 1) throw ValidationError("key 'batch' must be >= 1");
  const fs::path out = out_dir(cfg, "gradcheck");
  echo_config(cfg, out);

  auto params = HiSTMParams<double>::init(mc, seed);
  RandomSource rng = RandomSource(seed).fork(0x6763);
  std::vector<double> xv(batch * mc.T * mc.K * mc.K), yv(batch);
  for (auto& v : xv) v = rng.uniform();
  for (auto& v : yv) v = rng.uniform();
  const Tensor<double> x({batch, mc.T, mc.K, mc.K}, xv), y({batch}, yv);
  auto loss = [&] {
    Tensor<double> l = mae_loss(predict_batch(x, params), y);
    // Negative control: the taped pass disagrees with the one probed numerically.
    if (sabotage && active_tape<double>()) l = add(l, sum(*params.tensors().front()));
    return l;
  };
  std::vector<Tensor<double>> inputs;
  for (auto* t : params.tensors()) inputs.push_back(*t);
  const double err = grad_check<double>(loss, inputs, eps);
  const bool pass = err < 1e-4;
  write_text(out / "gradcheck.json", nlohmann::json({{"parameters", param_count(mc)},
                                                     {"max_relative_error", err},
                                                     {"pass", pass}})
                                             .dump(2) +
                                         "\n");
  std::cout << "parameters: " << param_count(mc) << "\nmax relative error: " << std::scientific << err << "\n"
            << (pass ? "PASS" : "FAIL") << " (threshold 1e-4)\n";
  return pass ? kOk : kCheckFailed;
}

int cmd_analyze(RunConfig& cfg) {
  const GridSeries series = load_data(cfg);
  const fs::path out = out_dir(cfg, "analyze");
  const std::size_t row = cfg.count("row", series.H / 2), col = cfg.count("col", series.W / 2);
  const std::size_t spd = series.steps_per_day();
  const std::string lag_text = cfg.str("lags", "1," + std::to_string(spd / 2) + "," + std::to_string(spd));
  const std::size_t m = cfg.count("apen_m", 2);
  const double r_factor = cfg.real("apen_r", 0.2);
  if (!(r_factor > 0)) throw ValidationError("key 'apen_r' must be positive");
  std::vector<std::size_t> lags;
  for (auto tok : io::split(lag_text, ',')) {
    std::size_t lag = 0;
    if (!io::parse_int(io::trim(tok), lag)) throw ValidationError("key 'lags': bad lag '" + std::string(tok) + "'");
    lags.push_back(lag);
  }
  const auto cell = cell_series(series, row, col);
  const auto agg = aggregate_series(series);
  echo_config(cfg, out);

  auto apen = [&](const std::vector<double>& x) {
    const double sd = population_stddev(x);
    if (sd == 0.0) return approximate_entropy(x);
    return approximate_entropy(x, m, r_factor * sd);
  };
  auto acf = [&](const std::vector<double>& x, std::size_t lag) {
    try {
      return io::format_double(lag_autocorrelation(x, lag));
    } catch (const ValidationError&) {
      return std::string("nan");
    }
  };
  std::string csv = "series,apen";
  for (auto lag : lags) csv += ",acf_" + std::to_string(lag);
  csv += "\n";
  for (const auto& [name, x] : {std::pair<std::string, const std::vector<double>*>{
                                    "cell_" + std::to_string(row) + "_" + std::to_string(col), &cell},
                                {"aggregate", &agg}}) {
    csv += name + "," + io::format_double(apen(*x));
    for (auto lag : lags) csv += "," + acf(*x, lag);
    csv += "\n";
  }
  write_text(out / "diagnostics.csv", csv);
  std::cout << csv;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HiSTM spatiotemporal traffic forecasting"};
  app.require_subcommand(1);
  std::map<std::string, Command> commands;
  auto make = [&](const std::string& name, const std::string& help, std::vector<const std::vector<Key>*> groups) {
    Command& c = commands[name];
    c.app = app.add_subcommand(name, help);
    c.app->add_option("--config", c.config_file, "Flat 'key = value' config file; flags override it");
    for (const auto* g : groups) c.add(*g);
    return &c;
  };
  make("synth", "Write a synthetic traffic grid as long CSV and HGRD1 binary", {&kCommonKeys, &kSynthKeys});
  make("train", "Train a model and keep the best checkpoint", {&kCommonKeys, &kDataKeys, &kModelKeys, &kTrainKeys});
  make("eval", "Single-step evaluation on a split", {&kCommonKeys, &kDataKeys, &kModelKeys, &kSourceKeys});
  make("rollout", "Multi-step autoregressive evaluation",
       {&kCommonKeys, &kDataKeys, &kModelKeys, &kSourceKeys, &kRolloutKeys});
  Command* grad = make("gradcheck", "Finite-difference check of the full model gradient",
                       {&kCommonKeys, &kModelKeys, &kGradKeys});
  grad->app->add_flag("--sabotage", grad->sabotage, "Corrupt the analytic gradient (negative control)");
  make("analyze", "Approximate entropy and lag autocorrelation of a cell and the aggregate",
       {&kCommonKeys, &kDataKeys, &kAnalyzeKeys});

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  const std::map<std::string, int (*)(RunConfig&)> handlers = {{"synth", cmd_synth},         {"train", cmd_train},
                                                               {"eval", cmd_eval},           {"rollout", cmd_rollout},
                                                               {"gradcheck", cmd_gradcheck}, {"analyze", cmd_analyze}};
  for (auto& [name, cmd] : commands) {
    if (!cmd.app->parsed()) continue;
    try {
      RunConfig cfg = cmd.resolve();
      return handlers.at(name)(cfg);
    } catch (const UsageError& e) {
      std::cerr << "usage error: " << e.what() << "\n";
      return kUsage;
    } catch (const DivergenceError& e) {
      std::cerr << "diverged: " << e.what() << "\n";
      return kDivergence;
    } catch (const IoError& e) {
      std::cerr << "i/o error: " << e.what() << "\n";
      return kIo;
    } catch (const CheckpointError& e) {
      std::cerr << "checkpoint error: " << e.what() << "\n";
      return kIo;
    } catch (const fs::filesystem_error& e) {
      std::cerr << "i/o error: " << e.what() << "\n";
      return kIo;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kValidation;
    }
  }
  return kUsage;
}
