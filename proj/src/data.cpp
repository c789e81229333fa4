#include "spectra/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "spectra/errors.hpp"

namespace spectra {

void Recording::validate() const {
  if (samples.empty() || samples.rank() != 2) throw DataError("recording: samples must be an (N, C) matrix");
  if (samples.dim(0) != timestamps.size()) {
    throw DataError("recording: " + std::to_string(timestamps.size()) + " timestamps for " +
                    std::to_string(samples.dim(0)) + " sample rows");
  }
  if (!labels.empty() && labels.size() != timestamps.size()) throw DataError("recording: label count mismatch");
  for (std::size_t i = 1; i < timestamps.size(); ++i) {
    if (!(timestamps[i] > timestamps[i - 1])) {
      throw DataError("recording: timestamps not strictly increasing at row " + std::to_string(i));
    }
  }
}

Tensor WindowBatch::window(std::size_t i) const {
  const std::size_t T = windows.dim(1), C = windows.dim(2);
  const double* p = windows.data() + i * T * C;
  return Tensor({T, C}, std::vector<double>(p, p + T * C));
}

WindowBatch WindowBatch::subset(const std::vector<std::size_t>& indices) const {
  const std::size_t T = windows.dim(1), C = windows.dim(2);
  WindowBatch out;
  out.norm_stats = norm_stats;
  out.zero_variance_fallback = zero_variance_fallback;
  out.windows = Tensor({indices.size(), T, C});
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const double* src = windows.data() + indices[j] * T * C;
    std::copy(src, src + T * C, out.windows.data() + j * T * C);
    out.labels.push_back(labels[indices[j]]);
  }
  return out;
}

Recording resample_50hz(const Recording& rec) {
  if (rec.length() < 2) throw DataError("resample: need at least 2 samples, got " + std::to_string(rec.length()));
  rec.validate();
  const std::size_t C = rec.channels();
  const double t0 = rec.timestamps.front();
  const double span = rec.timestamps.back() - t0;
  const std::size_t n_out = static_cast<std::size_t>(std::floor(span * kTargetRateHz + 1e-9)) + 1;

  Recording out;
  out.timestamps.resize(n_out);
  out.samples = Tensor({n_out, C});
  if (rec.labeled()) out.labels.resize(n_out);

  std::size_t seg = 0;
  for (std::size_t i = 0; i < n_out; ++i) {
    const double t = t0 + static_cast<double>(i) / kTargetRateHz;
    out.timestamps[i] = t;
    while (seg + 2 < rec.length() && rec.timestamps[seg + 1] <= t) ++seg;
    const double ta = rec.timestamps[seg], tb = rec.timestamps[seg + 1];
    const double w = std::clamp((t - ta) / (tb - ta), 0.0, 1.0);
    for (std::size_t c = 0; c < C; ++c) {
      const double a = rec.samples.at(seg, c), b = rec.samples.at(seg + 1, c);
      out.samples.at(i, c) = w == 0.0 ? a : (w == 1.0 ? b : a + w * (b - a));
    }
    if (rec.labeled()) out.labels[i] = (t - ta <= tb - t) ? rec.labels[seg] : rec.labels[seg + 1];
  }
  return out;
}

WindowBatch make_windows(const Recording& rec, std::size_t window, double overlap) {
  if (window == 0) throw ConfigError("make_windows: window length must be >= 1");
  if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("make_windows: overlap must be in [0, 1)");
  const std::size_t N = rec.length();
  if (N < window) {
    throw DataError("make_windows: recording has " + std::to_string(N) + " samples, fewer than the window of " +
                    std::to_string(window));
  }
  const auto hop = static_cast<std::size_t>(std::llround(static_cast<double>(window) * (1.0 - overlap)));
  if (hop == 0) throw ConfigError("make_windows: overlap leaves a zero hop");
  const std::size_t C = rec.channels();
  const std::size_t count = (N - window) / hop + 1;

  WindowBatch batch;
  batch.windows = Tensor({count, window, C});
  batch.labels.resize(count, -1);
  for (std::size_t w = 0; w < count; ++w) {
    const std::size_t start = w * hop;
    std::copy(rec.samples.data() + start * C, rec.samples.data() + (start + window) * C,
              batch.windows.data() + w * window * C);
    if (rec.labeled()) {
      std::map<int, std::size_t> votes;
      for (std::size_t t = start; t < start + window; ++t) ++votes[rec.labels[t]];
      // std::map iterates in ascending label order, so the first maximum wins.
      int best = votes.begin()->first;
      std::size_t best_n = 0;
      for (const auto& [label, n] : votes) {
        if (n > best_n) {
          best = label;
          best_n = n;
        }
      }
      batch.labels[w] = best;
    }
  }
  return batch;
}

namespace {

NormStats pooled_stats(const Tensor& windows, bool& fallback) {
  const std::size_t C = windows.dim(2);
  const std::size_t rows = windows.size() / C;
  NormStats s;
  s.mean.assign(C, 0.0);
  s.std.assign(C, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t c = 0; c < C; ++c) s.mean[c] += windows[i * C + c];
  for (auto& m : s.mean) m /= static_cast<double>(rows);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t c = 0; c < C; ++c) {
      const double d = windows[i * C + c] - s.mean[c];
      s.std[c] += d * d;
    }
  for (auto& v : s.std) {
    v = std::sqrt(v / static_cast<double>(rows));
    if (!(v > 0.0)) {
      v = 1.0;
      fallback = true;
    }
  }
  return s;
}

void apply_stats(double* data, std::size_t rows, const NormStats& stats) {
  const std::size_t C = stats.mean.size();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t c = 0; c < C; ++c) data[i * C + c] = (data[i * C + c] - stats.mean[c]) / stats.std[c];
}

}  // namespace

WindowBatch normalize(const WindowBatch& batch, const std::optional<NormStats>& stats, NormMode mode) {
  WindowBatch out = batch;
  const std::size_t B = batch.windows.dim(0), T = batch.windows.dim(1), C = batch.windows.dim(2);
  if (mode == NormMode::kPerWindow) {
    for (std::size_t b = 0; b < B; ++b) {
      const Tensor w = batch.window(b).reshaped({1, T, C});
      const NormStats s = pooled_stats(w, out.zero_variance_fallback);
      apply_stats(out.windows.data() + b * T * C, T, s);
    }
    out.norm_stats = {};
    return out;
  }
  if (stats) {
    if (stats->mean.size() != C || stats->std.size() != C) {
      throw DimensionError("normalize: stats for " + std::to_string(stats->mean.size()) + " channels, batch has " +
                           std::to_string(C));
    }
    out.norm_stats = *stats;
  } else {
    out.norm_stats = pooled_stats(batch.windows, out.zero_variance_fallback);
  }
  apply_stats(out.windows.data(), B * T, out.norm_stats);
  return out;
}

WindowBatch denormalize(const WindowBatch& batch) {
  WindowBatch out = batch;
  const std::size_t C = batch.norm_stats.mean.size();
  const std::size_t rows = batch.windows.size() / C;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t c = 0; c < C; ++c)
      out.windows[i * C + c] = batch.windows[i * C + c] * batch.norm_stats.std[c] + batch.norm_stats.mean[c];
  return out;
}

Tensor normalize_window(const Tensor& window, const NormStats& stats) {
  if (window.rank() != 2 || window.dim(1) != stats.mean.size()) {
    throw DimensionError("normalize_window: window " + shape_str(window.shape()) + " vs stats for " +
                         std::to_string(stats.mean.size()) + " channels");
  }
  Tensor out = window;
  apply_stats(out.data(), window.dim(0), stats);
  return out;
}

double synth_signal(std::size_t cls, std::size_t ch, double t, double phase) {
  const double harmonic = static_cast<double>(ch % 3 + 1);
  const double amplitude = 1.0 / (1.0 + static_cast<double>(ch));
  return amplitude * std::sin(2.0 * std::numbers::pi * harmonic * synth_frequency(cls) * t + phase);
}

std::pair<Recording, Recording> synth_dataset(std::size_t n_classes, double seconds_per_class, std::uint64_t seed,
                                              const SynthOptions& options) {
  if (n_classes < 2) throw ConfigError("synth_dataset: need at least 2 classes");
  if (!(seconds_per_class > 0.0)) throw ConfigError("synth_dataset: seconds_per_class must be positive");
  const auto per_class = static_cast<std::size_t>(std::llround(seconds_per_class * kTargetRateHz));
  const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(per_class) * options.train_fraction));
  const std::size_t n_test = per_class - n_train;
  if (n_train == 0 || n_test == 0) throw ConfigError("synth_dataset: recording too short to split");
  const std::size_t C = options.channels;

  Rng rng(seed);
  Recording train, test;
  train.samples = Tensor({n_classes * n_train, C});
  test.samples = Tensor({n_classes * n_test, C});

  auto fill = [&](Recording& rec, std::size_t cls, std::size_t offset, std::size_t count) {
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < count; ++i) {
      const double t = static_cast<double>(i) / kTargetRateHz;
      const std::size_t row = offset + i;
      rec.timestamps.push_back(static_cast<double>(row) / kTargetRateHz);
      rec.labels.push_back(static_cast<int>(cls));
      for (std::size_t c = 0; c < C; ++c) {
        rec.samples.at(row, c) = synth_signal(cls, c, t, phase) + options.noise_sigma * rng.normal();
      }
    }
  };
  for (std::size_t cls = 0; cls < n_classes; ++cls) {
    fill(train, cls, cls * n_train, n_train);
    fill(test, cls, cls * n_test, n_test);
  }
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <class T>
T parse_number(std::string_view field, const std::string& path, std::size_t line_no) {
  field = trim(field);
  T v{};
  const char* begin = field.data();
  if (!field.empty() && field.front() == '+') ++begin;
  const auto [ptr, ec] = std::from_chars(begin, field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size() || field.empty()) {
    throw DataError(path + ":" + std::to_string(line_no) + ": cannot parse '" + std::string(field) + "'");
  }
  return v;
}

}  // namespace

Recording read_recording_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open for reading");
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // UTF-8 BOM

  const auto header = split_commas(trim(line));
  if (header.empty() || trim(header[0]) != "t") throw DataError(path + ": header must start with 't'");
  std::size_t C = 0;
  bool has_label = false;
  for (std::size_t i = 1; i < header.size(); ++i) {
    const auto h = trim(header[i]);
    if (h == "c" + std::to_string(C) && !has_label) {
      ++C;
    } else if (h == "label" && i + 1 == header.size()) {
      has_label = true;
    } else {
      throw DataError(path + ": unexpected header column '" + std::string(h) + "'");
    }
  }
  if (C == 0) throw DataError(path + ": no channel columns");

  Recording rec;
  std::vector<double> values;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto row = trim(line);
    if (row.empty()) continue;
    const auto fields = split_commas(row);
    if (fields.size() != 1 + C + (has_label ? 1 : 0)) {
      throw DataError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(1 + C + has_label) +
                      " fields, got " + std::to_string(fields.size()));
    }
    const double t = parse_number<double>(fields[0], path, line_no);
    if (!rec.timestamps.empty() && !(t > rec.timestamps.back())) {
      throw DataError(path + ":" + std::to_string(line_no) + ": rows are not sorted by strictly increasing time");
    }
    rec.timestamps.push_back(t);
    for (std::size_t c = 0; c < C; ++c) values.push_back(parse_number<double>(fields[1 + c], path, line_no));
    if (has_label) rec.labels.push_back(parse_number<int>(fields[1 + C], path, line_no));
  }
  if (rec.timestamps.empty()) throw DataError(path + ": no data rows");
  rec.samples = Tensor({rec.timestamps.size(), C}, std::move(values));
  return rec;
}

void write_recording_csv(const Recording& rec, const std::string& path) {
  rec.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open for writing");
  const std::size_t C = rec.channels();
  out << 't';
  for (std::size_t c = 0; c < C; ++c) out << ",c" << c;
  if (rec.labeled()) out << ",label";
  out << '\n';
  char buf[64];
  for (std::size_t i = 0; i < rec.length(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", rec.timestamps[i]);
    out << buf;
    for (std::size_t c = 0; c < C; ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", rec.samples.at(i, c));
      out << ',' << buf;
    }
    if (rec.labeled()) out << ',' << rec.labels[i];
    out << '\n';
  }
  if (!out) throw IoError(path + ": write failed");
}

}  // namespace spectra
