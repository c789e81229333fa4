#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "spectra/tensor.hpp"

namespace spectra {

/// A multichannel sensor stream.
struct Recording {
  std::vector<double> timestamps;  // seconds, strictly increasing
  Tensor samples;                  // (N, C)
  std::vector<int> labels;         // per sample, or empty when unlabeled

  std::size_t length() const { return timestamps.size(); }
  std::size_t channels() const { return samples.empty() ? 0 : samples.dim(1); }
  bool labeled() const { return !labels.empty(); }
  /// Throws DataError if the invariants do not hold.
  void validate() const;
};

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
};

struct WindowBatch {
  Tensor windows;           // (B, T, C)
  std::vector<int> labels;  // B entries (-1 for unlabeled)
  NormStats norm_stats;
  // Set when some channel had zero variance and its std was replaced by 1.
  bool zero_variance_fallback = false;

  std::size_t size() const { return labels.size(); }
  Tensor window(std::size_t i) const;
  /// Rows selected by index, in the given order.
  WindowBatch subset(const std::vector<std::size_t>& indices) const;
};

inline constexpr double kTargetRateHz = 50.0;

/// Linear interpolation onto a uniform 50 Hz grid over [t_0, t_last]; labels
/// come from the nearest original sample (earlier sample on ties).
Recording resample_50hz(const Recording& rec);

/// Fixed-length windows with fractional overlap; each window's label is the
/// majority of its per-sample labels (lowest class wins ties).
WindowBatch make_windows(const Recording& rec, std::size_t window = 100, double overlap = 0.5);

enum class NormMode {
  kDataset,    // one (mean, std) per channel pooled over all windows
  kPerWindow,  // each window normalized by its own statistics
};

/// Z-normalizes each channel. With stats omitted they are computed from the
/// batch (a training split); otherwise the given stats are applied as is.
WindowBatch normalize(const WindowBatch& batch, const std::optional<NormStats>& stats = std::nullopt,
                      NormMode mode = NormMode::kDataset);
WindowBatch denormalize(const WindowBatch& batch);
/// Applies stats to one (T, C) window.
Tensor normalize_window(const Tensor& window, const NormStats& stats);

/// Noise-free value of the synthetic class signal for channel `ch` at time t.
double synth_signal(std::size_t cls, std::size_t ch, double t, double phase);
inline double synth_frequency(std::size_t cls) { return 1.0 + 0.8 * static_cast<double>(cls); }

struct SynthOptions {
  std::size_t channels = 6;
  double noise_sigma = 0.3;
  double train_fraction = 0.8;
};

/// Labeled rhythmic-activity recordings at 50 Hz; each class is a contiguous
/// block with its own random phase, split 80/20 into train and test.
std::pair<Recording, Recording> synth_dataset(std::size_t n_classes, double seconds_per_class, std::uint64_t seed,
                                              const SynthOptions& options = {});

/// CSV: header `t,c0,...,c{C-1}[,label]`, one sample per row, time-sorted.
Recording read_recording_csv(const std::string& path);
void write_recording_csv(const Recording& rec, const std::string& path);

}  // namespace spectra
