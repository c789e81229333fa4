#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "spectra/model.hpp"
#include "spectra/quantization.hpp"

namespace spectra {

struct LatencyStats {
  double mean = 0.0;
  double median = 0.0;
  double p95 = 0.0;  // nearest-rank

  bool operator==(const LatencyStats&) const = default;
};

LatencyStats latency_stats(std::vector<double> samples);

/// Single-window (B = 1) timing of the front-end and the network.
///
/// peak_alloc_bytes is approximate: the largest single tensor buffer the
/// inference path requested during the measured iterations, not process RSS.
struct BenchReport {
  LatencyStats stft_ms;
  LatencyStats nn_ms;
  LatencyStats total_ms;
  double samples_per_s = 0.0;  // 1000 / total_ms.median
  std::size_t params = 0;
  std::size_t macs = 0;  // CostReport::total_macs, front-end included
  std::size_t peak_alloc_bytes = 0;
  std::size_t warmup_iters = 0;
  std::size_t measure_iters = 0;
  std::string precision_tag;  // "FP" or "INT8"

  // Raw per-iteration timings in ms. Written to JSON only.
  std::vector<double> stft_samples;
  std::vector<double> nn_samples;
  std::vector<double> total_samples;

  bool operator==(const BenchReport&) const = default;
};

struct BenchOptions {
  std::size_t warmup = 50;
  std::size_t iters = 500;  // at least 10
};

BenchReport bench_inference(const ModelParams& model, const Tensor& window, const BenchOptions& options = {});
BenchReport bench_inference(const QuantizedModel& qmodel, const Tensor& window, const BenchOptions& options = {});

/// CSV columns, in BenchReport order.
const std::vector<std::string>& bench_csv_header();

/// format is "json" or "csv"; anything else is a UsageError. JSON holds one
/// object per report (an array when there are several); CSV holds one row per
/// report.
void emit_report(const std::vector<BenchReport>& reports, const std::string& format, const std::string& path);
void emit_report(const BenchReport& report, const std::string& format, const std::string& path);
std::string format_report(const std::vector<BenchReport>& reports, const std::string& format);
std::vector<BenchReport> load_report(const std::string& path, const std::string& format);
std::vector<BenchReport> parse_report(const std::string& text, const std::string& format);

}  // namespace spectra
