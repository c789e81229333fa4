#include "spectra/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "spectra/errors.hpp"

namespace spectra {

using nlohmann::json;

LatencyStats latency_stats(std::vector<double> samples) {
  if (samples.empty()) throw UsageError("latency_stats: no samples");
  std::sort(samples.begin(), samples.end());
  const std::size_t n = samples.size();
  LatencyStats s;
  s.mean = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(n);
  s.median = n % 2 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  s.p95 = samples[std::max<std::size_t>(rank, 1) - 1];
  return s;
}

namespace {

volatile double g_sink = 0.0;

template <class Front, class Net>
BenchReport run_bench(const SpectraConfig& config, std::size_t params, const Tensor& window, const BenchOptions& opt,
                      const char* tag, Front front, Net net) {
  if (opt.iters < 10) throw ConfigError("bench: iters must be >= 10, got " + std::to_string(opt.iters));
  if (window.rank() != 2 || window.dim(0) != config.T || window.dim(1) != config.C) {
    throw DimensionError("bench: expected a (" + std::to_string(config.T) + ", " + std::to_string(config.C) +
                         ") window, got " + shape_str(window.shape()));
  }
  using clock = std::chrono::steady_clock;
  auto once = [&](double* stft_ms, double* nn_ms, double* total_ms) {
    const auto t0 = clock::now();
    const Tensor spec = front(window);
    const auto t1 = clock::now();
    const Tensor probs = net(spec);
    const auto t2 = clock::now();
    g_sink = g_sink + probs[0];
    if (stft_ms) {
      auto ms = [](clock::duration d) { return std::chrono::duration<double, std::milli>(d).count(); };
      *stft_ms = ms(t1 - t0);
      *nn_ms = ms(t2 - t1);
      *total_ms = ms(t2 - t0);
    }
  };
  for (std::size_t i = 0; i < opt.warmup; ++i) once(nullptr, nullptr, nullptr);

  BenchReport r;
  r.stft_samples.resize(opt.iters);
  r.nn_samples.resize(opt.iters);
  r.total_samples.resize(opt.iters);
  reset_peak_tensor_bytes();
  for (std::size_t i = 0; i < opt.iters; ++i) once(&r.stft_samples[i], &r.nn_samples[i], &r.total_samples[i]);
  r.peak_alloc_bytes = peak_tensor_bytes();

  r.stft_ms = latency_stats(r.stft_samples);
  r.nn_ms = latency_stats(r.nn_samples);
  r.total_ms = latency_stats(r.total_samples);
  r.samples_per_s = 1000.0 / r.total_ms.median;
  r.params = params;
  r.macs = count_costs(config).total_macs();
  r.warmup_iters = opt.warmup;
  r.measure_iters = opt.iters;
  r.precision_tag = tag;
  return r;
}

}  // namespace

BenchReport bench_inference(const ModelParams& model, const Tensor& window, const BenchOptions& options) {
  return run_bench(
      model.config, model.parameter_count(), window, options, "FP",
      [&](const Tensor& w) { return spectrogram(model, w); },
      [&](const Tensor& s) { return forward_spectrogram(model, s); });
}

BenchReport bench_inference(const QuantizedModel& qmodel, const Tensor& window, const BenchOptions& options) {
  if (!qmodel.calibrated) throw UsageError("bench: quantized model has not been calibrated");
  return run_bench(
      qmodel.base.config, qmodel.base.parameter_count(), window, options, "INT8",
      [&](const Tensor& w) { return spectrogram(qmodel.base, w); },
      [&](const Tensor& s) { return quantized_forward_spectrogram(qmodel, s); });
}

const std::vector<std::string>& bench_csv_header() {
  static const std::vector<std::string> header = {
      "stft_ms_mean", "stft_ms_median", "stft_ms_p95", "nn_ms_mean",       "nn_ms_median",
      "nn_ms_p95",    "total_ms_mean",  "total_ms_median", "total_ms_p95", "samples_per_s",
      "params",       "macs",           "peak_alloc_bytes", "warmup_iters", "measure_iters",
      "precision_tag"};
  return header;
}

namespace {

json stats_json(const LatencyStats& s) { return {{"mean", s.mean}, {"median", s.median}, {"p95", s.p95}}; }

LatencyStats stats_from(const json& j) {
  return {j.at("mean").get<double>(), j.at("median").get<double>(), j.at("p95").get<double>()};
}

json report_json(const BenchReport& r) {
  return {{"stft_ms", stats_json(r.stft_ms)},
          {"nn_ms", stats_json(r.nn_ms)},
          {"total_ms", stats_json(r.total_ms)},
          {"samples_per_s", r.samples_per_s},
          {"params", r.params},
          {"macs", r.macs},
          {"peak_alloc_bytes", r.peak_alloc_bytes},
          {"peak_alloc_approximate", true},
          {"warmup_iters", r.warmup_iters},
          {"measure_iters", r.measure_iters},
          {"precision_tag", r.precision_tag},
          {"raw_ms", {{"stft", r.stft_samples}, {"nn", r.nn_samples}, {"total", r.total_samples}}}};
}

BenchReport report_from(const json& j) {
  BenchReport r;
  r.stft_ms = stats_from(j.at("stft_ms"));
  r.nn_ms = stats_from(j.at("nn_ms"));
  r.total_ms = stats_from(j.at("total_ms"));
  r.samples_per_s = j.at("samples_per_s").get<double>();
  r.params = j.at("params").get<std::size_t>();
  r.macs = j.at("macs").get<std::size_t>();
  r.peak_alloc_bytes = j.at("peak_alloc_bytes").get<std::size_t>();
  r.warmup_iters = j.at("warmup_iters").get<std::size_t>();
  r.measure_iters = j.at("measure_iters").get<std::size_t>();
  r.precision_tag = j.at("precision_tag").get<std::string>();
  if (j.contains("raw_ms")) {
    const json& raw = j.at("raw_ms");
    r.stft_samples = raw.at("stft").get<std::vector<double>>();
    r.nn_samples = raw.at("nn").get<std::vector<double>>();
    r.total_samples = raw.at("total").get<std::vector<double>>();
  }
  return r;
}

void check_format(const std::string& format) {
  if (format != "json" && format != "csv") {
    throw UsageError("unknown report format '" + format + "' (expected json or csv)");
  }
}

std::string csv_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string format_report(const std::vector<BenchReport>& reports, const std::string& format) {
  check_format(format);
  if (format == "json") {
    if (reports.size() == 1) return report_json(reports[0]).dump(2) + "\n";
    json arr = json::array();
    for (const auto& r : reports) arr.push_back(report_json(r));
    return arr.dump(2) + "\n";
  }
  std::ostringstream out;
  const auto& header = bench_csv_header();
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << "\n";
  for (const auto& r : reports) {
    for (const auto* s : {&r.stft_ms, &r.nn_ms, &r.total_ms}) {
      out << csv_number(s->mean) << ',' << csv_number(s->median) << ',' << csv_number(s->p95) << ',';
    }
    out << csv_number(r.samples_per_s) << ',' << r.params << ',' << r.macs << ',' << r.peak_alloc_bytes << ','
        << r.warmup_iters << ',' << r.measure_iters << ',' << r.precision_tag << "\n";
  }
  return out.str();
}

void emit_report(const std::vector<BenchReport>& reports, const std::string& format, const std::string& path) {
  const std::string text = format_report(reports, format);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open for writing");
  out << text;
  if (!out) throw IoError(path + ": write failed");
}

void emit_report(const BenchReport& report, const std::string& format, const std::string& path) {
  emit_report(std::vector<BenchReport>{report}, format, path);
}

std::vector<BenchReport> parse_report(const std::string& text, const std::string& format) {
  check_format(format);
  std::vector<BenchReport> reports;
  if (format == "json") {
    json j;
    try {
      j = json::parse(text);
      if (j.is_array()) {
        for (const auto& e : j) reports.push_back(report_from(e));
      } else {
        reports.push_back(report_from(j));
      }
    } catch (const json::exception& e) {
      throw FormatError(std::string("bench report: ") + e.what());
    }
    return reports;
  }
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  std::string expected;
  for (const auto& h : bench_csv_header()) expected += (expected.empty() ? "" : ",") + h;
  if (line != expected) throw FormatError("bench report: unexpected CSV header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != bench_csv_header().size()) throw FormatError("bench report: wrong CSV column count");
    try {
      BenchReport r;
      std::size_t c = 0;
      for (auto* s : {&r.stft_ms, &r.nn_ms, &r.total_ms}) {
        s->mean = std::stod(cells[c++]);
        s->median = std::stod(cells[c++]);
        s->p95 = std::stod(cells[c++]);
      }
      r.samples_per_s = std::stod(cells[c++]);
      r.params = std::stoull(cells[c++]);
      r.macs = std::stoull(cells[c++]);
      r.peak_alloc_bytes = std::stoull(cells[c++]);
      r.warmup_iters = std::stoull(cells[c++]);
      r.measure_iters = std::stoull(cells[c++]);
      r.precision_tag = cells[c++];
      reports.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw FormatError("bench report: malformed CSV number");
    }
  }
  return reports;
}

std::vector<BenchReport> load_report(const std::string& path, const std::string& format) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open for reading");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_report(ss.str(), format);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace spectra
