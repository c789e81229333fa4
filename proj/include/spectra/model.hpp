#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "spectra/layers.hpp"
#include "spectra/spectral.hpp"
#include "spectra/tensor.hpp"

namespace spectra {

struct SpectraConfig {
  std::uint32_t T = 100;  // samples per window
  std::uint32_t C = 6;    // sensor channels
  std::uint32_t K = 6;    // classes
  std::uint32_t n_fft = 16;
  std::uint32_t hop = 8;
  std::uint32_t k = 3;   // depthwise kernel size
  std::uint32_t D = 16;  // conv features
  std::uint32_t H = 32;  // GRU hidden size
  double dropout_p = 0.2;
  bool use_channel_attention = true;
  bool use_gru = true;
  std::uint64_t seed = 0;

  std::size_t n_frames() const { return (T - n_fft) / hop + 1; }
  std::size_t n_bins() const { return n_fft / 2 + 1; }
  bool residual() const { return D == n_bins(); }

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;
  bool operator==(const SpectraConfig&) const = default;
};

using ParamMap = std::map<std::string, Tensor>;

/// Every array of the network, addressable by stable name.
///
/// `params` holds learnable tensors only; `buffers` holds state that is saved
/// with the model but never trained (BatchNorm running statistics and the
/// per-channel input normalization used by the CLI).
struct ModelParams {
  SpectraConfig config;
  ParamMap params;
  ParamMap buffers;

  const Tensor& param(const std::string& name) const;
  const Tensor& buffer(const std::string& name) const;
  std::size_t parameter_count() const;
};

/// Learnable tensor names implied by a config, in initialization order.
std::vector<std::string> param_names(const SpectraConfig& config);
std::vector<std::string> buffer_names();
Shape param_shape(const SpectraConfig& config, const std::string& name);

ModelParams build_model(const SpectraConfig& config);

SepConvBlock sepconv_block(const ModelParams& model);
ChannelAttention channel_attention(const ModelParams& model);
BiGru bigru(const ModelParams& model);
AttnPool attn_pool(const ModelParams& model);
Classifier classifier(const ModelParams& model);

StftPlan stft_plan(const SpectraConfig& config);

/// Front-end for one window (T, C) -> (L, F, C) via the filter bank.
Tensor spectrogram(const ModelParams& model, const Tensor& window);
/// Eval-mode network on one spectrogram -> class probabilities (K).
Tensor forward_spectrogram(const ModelParams& model, const Tensor& spec);

/// x is (B, T, C) or a single (T, C) window; output is (B, K) probabilities.
/// Training mode uses batch BatchNorm statistics and dropout seeded from
/// config.seed.
Tensor forward(const ModelParams& model, const Tensor& x, bool training);

struct TrainPass {
  double loss = 0.0;
  Tensor probs;  // (B, K)
  ParamMap grads;
  Tensor running_mean;
  Tensor running_var;
};

/// Training-mode forward, mean cross-entropy and (optionally) exact gradients
/// of that loss with respect to every learnable parameter.
TrainPass forward_backward(const ModelParams& model, const Tensor& x, std::span<const int> labels, Rng& rng,
                           bool compute_grads = true);

// ---------------------------------------------------------------------------
// Parameter and MAC accounting

struct LayerCost {
  std::string name;
  std::size_t params = 0;
  std::size_t macs = 0;
};

struct CostReport {
  std::vector<LayerCost> layers;
  std::size_t total_params = 0;
  std::size_t nn_macs = 0;
  // Filter-bank STFT: C * L * 2F * n_fft, kept out of nn_macs.
  std::size_t stft_macs = 0;

  std::size_t total_macs() const { return nn_macs + stft_macs; }
};

CostReport count_costs(const SpectraConfig& config);

// ---------------------------------------------------------------------------
// SPCT binary container

inline constexpr std::uint16_t kFormatVersion = 1;

void save_model(const ModelParams& model, const std::string& path);
ModelParams load_model(const std::string& path);

}  // namespace spectra
