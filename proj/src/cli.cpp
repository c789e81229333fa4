#include "spectra/cli.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "spectra/bench.hpp"
#include "spectra/data.hpp"
#include "spectra/errors.hpp"
#include "spectra/quantization.hpp"

namespace spectra::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <class T>
T parse_value(std::string_view key, std::string_view v) {
  T out{};
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) {
    throw ConfigError("config: invalid value '" + std::string(v) + "' for key '" + std::string(key) + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: invalid boolean '" + std::string(v) + "' for key '" + std::string(key) + "'");
}

}  // namespace

std::pair<SpectraConfig, TrainConfig> parse_config_text(const std::string& text) {
  SpectraConfig mc;
  TrainConfig tc;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view v = trim(line.substr(eq + 1));
    if (key == "T") mc.T = parse_value<std::uint32_t>(key, v);
    else if (key == "C") mc.C = parse_value<std::uint32_t>(key, v);
    else if (key == "K") mc.K = parse_value<std::uint32_t>(key, v);
    else if (key == "n_fft") mc.n_fft = parse_value<std::uint32_t>(key, v);
    else if (key == "hop") mc.hop = parse_value<std::uint32_t>(key, v);
    else if (key == "k") mc.k = parse_value<std::uint32_t>(key, v);
    else if (key == "D") mc.D = parse_value<std::uint32_t>(key, v);
    else if (key == "H") mc.H = parse_value<std::uint32_t>(key, v);
    else if (key == "dropout_p") mc.dropout_p = parse_value<double>(key, v);
    else if (key == "use_channel_attention") mc.use_channel_attention = parse_bool(key, v);
    else if (key == "use_gru") mc.use_gru = parse_bool(key, v);
    else if (key == "seed") mc.seed = parse_value<std::uint64_t>(key, v);
    else if (key == "epochs") tc.epochs = parse_value<std::size_t>(key, v);
    else if (key == "batch_size") tc.batch_size = parse_value<std::size_t>(key, v);
    else if (key == "learning_rate") tc.learning_rate = parse_value<double>(key, v);
    else if (key == "beta1") tc.beta1 = parse_value<double>(key, v);
    else if (key == "beta2") tc.beta2 = parse_value<double>(key, v);
    else if (key == "eps") tc.eps = parse_value<double>(key, v);
    else if (key == "train_seed") tc.seed = parse_value<std::uint64_t>(key, v);
    else if (key == "shuffle") tc.shuffle = parse_bool(key, v);
    else throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + std::string(key) + "'");
  }
  mc.validate();
  tc.validate();
  return {mc, tc};
}

std::pair<SpectraConfig, TrainConfig> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config_text(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string config_text(const SpectraConfig& mc, const TrainConfig& tc) {
  std::ostringstream out;
  out.precision(17);
  out << "T=" << mc.T << "\nC=" << mc.C << "\nK=" << mc.K << "\nn_fft=" << mc.n_fft << "\nhop=" << mc.hop
      << "\nk=" << mc.k << "\nD=" << mc.D << "\nH=" << mc.H << "\ndropout_p=" << mc.dropout_p
      << "\nuse_channel_attention=" << (mc.use_channel_attention ? "true" : "false")
      << "\nuse_gru=" << (mc.use_gru ? "true" : "false") << "\nseed=" << mc.seed << "\nepochs=" << tc.epochs
      << "\nbatch_size=" << tc.batch_size << "\nlearning_rate=" << tc.learning_rate << "\nbeta1=" << tc.beta1
      << "\nbeta2=" << tc.beta2 << "\neps=" << tc.eps << "\ntrain_seed=" << tc.seed
      << "\nshuffle=" << (tc.shuffle ? "true" : "false") << "\n";
  return out.str();
}

namespace {

constexpr double kOverlap = 0.5;
constexpr std::size_t kCalibrationWindows = 200;

// A directory argument resolves to <dir>/<split>.csv.
std::string split_path(const std::string& path, const char* split) {
  if (fs::is_directory(path)) return (fs::path(path) / (std::string(split) + ".csv")).string();
  return path;
}

WindowBatch load_windows(const std::string& csv, const SpectraConfig& config) {
  const Recording rec = resample_50hz(read_recording_csv(csv));
  if (rec.channels() != config.C) {
    throw DimensionError(csv + ": " + std::to_string(rec.channels()) + " channels, model expects " +
                         std::to_string(config.C));
  }
  return make_windows(rec, config.T, kOverlap);
}

NormStats stored_stats(const ModelParams& model) {
  const Tensor& m = model.buffer("input.norm_mean");
  const Tensor& s = model.buffer("input.norm_std");
  return {std::vector<double>(m.values().begin(), m.values().end()),
          std::vector<double>(s.values().begin(), s.values().end())};
}

void require_labels(const WindowBatch& batch, const std::string& path) {
  for (int l : batch.labels)
    if (l < 0) throw LabelError(path + ": evaluation data must be labeled");
}

// A loaded model file: FP (version 1) or quantized (version 2).
struct AnyModel {
  std::optional<ModelParams> fp;
  std::optional<QuantizedModel> q;

  const ModelParams& base() const { return q ? q->base : *fp; }
  Tensor predict(const Tensor& x) const { return q ? quantized_forward(*q, x) : forward(*fp, x, false); }
};

AnyModel load_any(const std::string& path) {
  AnyModel m;
  if (spct_version(path) == kQuantizedFormatVersion) {
    m.q = load_quantized_model(path);
  } else {
    m.fp = load_model(path);
  }
  return m;
}

json metrics_json(const Metrics& m) {
  return {{"accuracy", m.accuracy}, {"macro_f1", m.macro_f1}, {"precision", m.precision},
          {"recall", m.recall},     {"f1", m.f1},             {"loss", m.loss}};
}

json costs_json(const CostReport& r) {
  json layers = json::array();
  for (const auto& l : r.layers) layers.push_back({{"name", l.name}, {"params", l.params}, {"macs", l.macs}});
  return {{"layers", layers},
          {"total_params", r.total_params},
          {"nn_macs", r.nn_macs},
          {"stft_macs", r.stft_macs},
          {"total_macs", r.total_macs()}};
}

void print_resolved(std::ostream& err, const CLI::App& sub) {
  err << "# resolved " << sub.get_name() << "\n" << sub.config_to_str(true, false);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return 1;
  if (dynamic_cast<const DataError*>(&e)) return 2;
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  return 2;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"SPECTRA activity-recognition engine", "spectra"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  std::size_t classes = 4;
  double seconds = 60.0;
  std::uint64_t synth_seed = 7;
  std::string out_dir;
  auto* synth = app.add_subcommand("synth-data", "Write a synthetic labeled dataset (train.csv, test.csv)");
  synth->add_option("--classes", classes, "Number of activity classes");
  synth->add_option("--seconds", seconds, "Seconds of signal per class");
  synth->add_option("--seed", synth_seed, "Random seed");
  synth->add_option("--out", out_dir, "Output directory")->required();

  std::string data, config_path, model_out = "model.spct", history_path;
  auto* train = app.add_subcommand("train", "Train a model on <data>/train.csv");
  train->add_option("--data", data, "Dataset directory (train.csv, optional test.csv)")->required();
  train->add_option("--config", config_path, "Flat key=value config file (defaults when omitted)");
  train->add_option("--out", model_out, "Output model file");
  train->add_option("--history", history_path, "Per-epoch history CSV");

  std::string model_path;
  auto* eval = app.add_subcommand("eval", "Print test metrics as JSON");
  eval->add_option("--model", model_path, "Model file (FP or INT8)")->required();
  eval->add_option("--data", data, "Dataset directory (uses test.csv) or CSV file")->required();

  std::string window_path;
  auto* infer = app.add_subcommand("infer", "Classify one window");
  infer->add_option("--model", model_path, "Model file (FP or INT8)")->required();
  infer->add_option("--window", window_path, "CSV with exactly T rows")->required();

  std::string calib, quant_out = "model_int8.spct", quant_mode = "weight-activation";
  auto* quantize = app.add_subcommand("quantize", "Post-training INT8 quantization");
  quantize->add_option("--model", model_path, "FP model file")->required();
  quantize->add_option("--calib", calib, "Calibration directory (uses train.csv) or CSV file")->required();
  quantize->add_option("--out", quant_out, "Output model file");
  quantize->add_option("--mode", quant_mode, "weight-activation or weight-only")
      ->check(CLI::IsMember({"weight-activation", "weight-only"}));

  auto* count = app.add_subcommand("count", "Print parameter and MAC counts as JSON");
  count->add_option("--config", config_path, "Flat key=value config file (defaults when omitted)");

  bool int8 = false;
  std::string format = "json", report_out;
  std::size_t warmup = BenchOptions{}.warmup, iters = BenchOptions{}.iters;
  std::uint64_t bench_seed = 0;
  auto* bench = app.add_subcommand("bench", "Single-window latency and throughput");
  bench->add_option("--model", model_path, "Model file")->required();
  bench->add_flag("--int8", int8, "Also benchmark the INT8 path (model must be quantized)");
  bench->add_option("--format", format, "json or csv");
  bench->add_option("--out", report_out, "Report file (stdout when omitted)");
  bench->add_option("--warmup", warmup, "Warmup iterations");
  bench->add_option("--iters", iters, "Measured iterations (>= 10)");
  bench->add_option("--seed", bench_seed, "Seed of the random input window");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 1;
  }

  try {
    if (synth->parsed()) {
      print_resolved(err, *synth);
      const auto [tr, te] = synth_dataset(classes, seconds, synth_seed);
      fs::create_directories(out_dir);
      write_recording_csv(tr, (fs::path(out_dir) / "train.csv").string());
      write_recording_csv(te, (fs::path(out_dir) / "test.csv").string());
      out << "wrote " << (fs::path(out_dir) / "train.csv").string() << " and "
          << (fs::path(out_dir) / "test.csv").string() << "\n";
    } else if (train->parsed()) {
      print_resolved(err, *train);
      const auto [mc, tc] = config_path.empty() ? std::pair{SpectraConfig{}, TrainConfig{}} : read_config_file(config_path);
      mc.validate();
      err << config_text(mc, tc);
      const std::string train_csv = split_path(data, "train");
      const WindowBatch train_set = normalize(load_windows(train_csv, mc));
      std::optional<WindowBatch> eval_set;
      const std::string test_csv = split_path(data, "test");
      if (fs::is_directory(data) && fs::exists(test_csv)) {
        eval_set = normalize(load_windows(test_csv, mc), train_set.norm_stats);
      }
      ModelParams model = build_model(mc);
      model.buffers["input.norm_mean"] = Tensor({mc.C}, train_set.norm_stats.mean);
      model.buffers["input.norm_std"] = Tensor({mc.C}, train_set.norm_stats.std);
      const TrainResult result = train_epochs(model, train_set, tc, eval_set);
      save_model(result.model, model_out);
      if (!history_path.empty()) write_history_csv(result.history, history_path);
      const auto& last = result.history.back();
      out << "trained " << result.history.size() << " epochs: eval_acc=" << last.eval_accuracy
          << " eval_macro_f1=" << last.eval_macro_f1 << " -> " << model_out << "\n";
    } else if (eval->parsed()) {
      print_resolved(err, *eval);
      const AnyModel m = load_any(model_path);
      const std::string csv = split_path(data, "test");
      const WindowBatch batch = normalize(load_windows(csv, m.base().config), stored_stats(m.base()));
      require_labels(batch, csv);
      out << metrics_json(evaluate_probs(m.predict(batch.windows), batch.labels)).dump(2) << "\n";
    } else if (infer->parsed()) {
      print_resolved(err, *infer);
      const AnyModel m = load_any(model_path);
      const auto& cfg = m.base().config;
      const Recording rec = read_recording_csv(window_path);
      if (rec.length() != cfg.T || rec.channels() != cfg.C) {
        throw DimensionError(window_path + ": window is " + shape_str(rec.samples.shape()) + ", model expects (" +
                             std::to_string(cfg.T) + ", " + std::to_string(cfg.C) + ")");
      }
      const Tensor probs = m.predict(normalize_window(rec.samples, stored_stats(m.base())));
      const std::vector<double> p(probs.values().begin(), probs.values().end());
      out << json{{"probabilities", p}, {"argmax", argmax(p)}}.dump(2) << "\n";
    } else if (quantize->parsed()) {
      print_resolved(err, *quantize);
      if (spct_version(model_path) != kFormatVersion) {
        throw UsageError("--model: " + model_path + " is already quantized");
      }
      const ModelParams model = load_model(model_path);
      const std::string csv = split_path(calib, "train");
      WindowBatch batch = normalize(load_windows(csv, model.config), stored_stats(model));
      if (batch.size() > kCalibrationWindows) {
        std::vector<std::size_t> first(kCalibrationWindows);
        for (std::size_t i = 0; i < first.size(); ++i) first[i] = i;
        batch = batch.subset(first);
      }
      const QuantMode mode = quant_mode == "weight-only" ? QuantMode::kWeightOnly : QuantMode::kWeightActivation;
      save_quantized_model(calibrate(model, batch, mode), quant_out);
      out << "calibrated on " << batch.size() << " windows -> " << quant_out << "\n";
    } else if (count->parsed()) {
      print_resolved(err, *count);
      const SpectraConfig mc = config_path.empty() ? SpectraConfig{} : read_config_file(config_path).first;
      mc.validate();
      out << costs_json(count_costs(mc)).dump(2) << "\n";
    } else if (bench->parsed()) {
      print_resolved(err, *bench);
      if (format != "json" && format != "csv") throw UsageError("--format: expected json or csv, got '" + format + "'");
      const AnyModel m = load_any(model_path);
      if (int8 && !m.q) throw UsageError("--int8: " + model_path + " is not a quantized model (run quantize first)");
      const auto& cfg = m.base().config;
      Rng rng(bench_seed);
      const Tensor window = rng_normal(rng, {cfg.T, cfg.C}, 0.0, 1.0);
      const BenchOptions opt{warmup, iters};
      std::vector<BenchReport> reports;
      reports.push_back(bench_inference(m.base(), window, opt));
      if (int8) reports.push_back(bench_inference(*m.q, window, opt));
      if (report_out.empty()) {
        out << format_report(reports, format);
      } else {
        emit_report(reports, format, report_out);
        out << "wrote " << report_out << "\n";
      }
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace spectra::cli
