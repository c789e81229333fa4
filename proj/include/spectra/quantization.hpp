#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "spectra/data.hpp"
#include "spectra/model.hpp"

namespace spectra {

/// Per-tensor asymmetric affine map: real = (q - zero_point) * scale.
struct QuantParams {
  double scale = 1.0;  // always exactly representable as a 32-bit float
  int zero_point = 0;  // in [-128, 127]

  bool operator==(const QuantParams&) const = default;
};

/// Range is widened to include 0 so zero stays exactly representable.
/// scale = (max - min) / 255, zero_point = round(-128 - min / scale); an
/// all-zero range uses scale = 1e-8 / 127 and zero_point = 0.
QuantParams choose_qparams(double min, double max);
std::int8_t quantize_value(double v, const QuantParams& qp);
double dequantize_value(std::int8_t q, const QuantParams& qp);
/// Round half away from zero.
double round_half_away(double v);

struct QuantizedTensor {
  QuantParams qp;
  Shape shape;
  std::vector<std::int8_t> payload;

  Tensor dequantized() const;
};

QuantizedTensor quantize_tensor(const Tensor& t, const QuantParams& qp);
QuantizedTensor quantize_tensor(const Tensor& t);  // qparams from the tensor's own min/max

enum class QuantMode : std::uint8_t {
  kWeightOnly = 0,        // INT8 weights, real activations
  kWeightActivation = 1,  // INT8 weights and activations, INT32 accumulation
};

/// Weight tensors executed by INT8 kernels.
std::vector<std::string> quantizable_weights(const SpectraConfig& config);
/// Activation boundaries (inputs of the INT8 kernels).
std::vector<std::string> activation_sites(const SpectraConfig& config);
/// Operators that stay in real arithmetic.
std::vector<std::string> fallback_ops(const SpectraConfig& config);

struct QuantizedModel {
  ModelParams base;
  QuantMode mode = QuantMode::kWeightActivation;
  std::map<std::string, QuantizedTensor> weights;
  std::map<std::string, QuantParams> activations;
  std::vector<std::string> fallback;
  bool calibrated = false;
};

/// Observes min/max at every activation site over eval-mode forward passes
/// on `calibration` and quantizes every eligible weight.
QuantizedModel calibrate(const ModelParams& model, const WindowBatch& calibration,
                         QuantMode mode = QuantMode::kWeightActivation);

/// (B, T, C) or (T, C) -> (B, K) probabilities.
Tensor quantized_forward(const QuantizedModel& qmodel, const Tensor& x);
Tensor quantized_forward_spectrogram(const QuantizedModel& qmodel, const Tensor& spec);

/// Reference pipeline with real weights, matching forward_spectrogram; exposes
/// the same operator boundaries the quantized path uses.
Tensor reference_forward_spectrogram(const ModelParams& model, const Tensor& spec);

inline constexpr std::uint16_t kQuantizedFormatVersion = 2;

void save_quantized_model(const QuantizedModel& qmodel, const std::string& path);
QuantizedModel load_quantized_model(const std::string& path);

/// Format version stored in an SPCT file (1 = FP, 2 = quantized).
std::uint16_t spct_version(const std::string& path);

}  // namespace spectra
