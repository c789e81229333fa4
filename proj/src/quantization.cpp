#include "spectra/quantization.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "container.hpp"
#include "spectra/errors.hpp"

namespace spectra {

double round_half_away(double v) { return std::round(v); }

QuantParams choose_qparams(double min, double max) {
  const double lo = std::min(min, 0.0);
  const double hi = std::max(max, 0.0);
  QuantParams qp;
  if (hi == lo) {
    qp.scale = static_cast<double>(static_cast<float>(std::max(std::abs(hi), 1e-8) / 127.0));
    qp.zero_point = 0;
    return qp;
  }
  // Round the scale up to the next 32-bit float so the stored value still
  // spans [lo, hi] in 255 steps.
  const double exact = (hi - lo) / 255.0;
  float f = static_cast<float>(exact);
  if (static_cast<double>(f) < exact) f = std::nextafter(f, std::numeric_limits<float>::infinity());
  qp.scale = static_cast<double>(f);
  qp.zero_point = static_cast<int>(std::clamp(round_half_away(-128.0 - lo / qp.scale), -128.0, 127.0));
  return qp;
}

std::int8_t quantize_value(double v, const QuantParams& qp) {
  const double q = round_half_away(v / qp.scale) + qp.zero_point;
  return static_cast<std::int8_t>(std::clamp(q, -128.0, 127.0));
}

double dequantize_value(std::int8_t q, const QuantParams& qp) {
  return static_cast<double>(static_cast<int>(q) - qp.zero_point) * qp.scale;
}

Tensor QuantizedTensor::dequantized() const {
  Tensor t(shape);
  for (std::size_t i = 0; i < payload.size(); ++i) t[i] = dequantize_value(payload[i], qp);
  return t;
}

QuantizedTensor quantize_tensor(const Tensor& t, const QuantParams& qp) {
  QuantizedTensor q;
  q.qp = qp;
  q.shape = t.shape();
  q.payload.resize(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) q.payload[i] = quantize_value(t[i], qp);
  return q;
}

QuantizedTensor quantize_tensor(const Tensor& t) {
  const auto [lo, hi] = std::minmax_element(t.values().begin(), t.values().end());
  return quantize_tensor(t, choose_qparams(*lo, *hi));
}

std::vector<std::string> quantizable_weights(const SpectraConfig& config) {
  std::vector<std::string> w = {"sepconv.depthwise", "sepconv.pointwise"};
  if (config.use_channel_attention) {
    for (const char* n : {"attn.wq", "attn.wk", "attn.wv"}) w.emplace_back(n);
  }
  if (config.use_gru) {
    w.emplace_back("gru.proj");
    w.emplace_back("pool.w");
  }
  w.emplace_back("clf.w");
  return w;
}

std::vector<std::string> activation_sites(const SpectraConfig& config) {
  std::vector<std::string> s = {"sepconv.depthwise.in", "sepconv.pointwise.in"};
  if (config.use_channel_attention) s.emplace_back("attn.in");
  if (config.use_gru) {
    s.emplace_back("gru.proj.in");
    s.emplace_back("pool.w.in");
  }
  s.emplace_back("clf.w.in");
  return s;
}

std::vector<std::string> fallback_ops(const SpectraConfig& config) {
  std::vector<std::string> f = {"stft", "sepconv.batchnorm", "sepconv.relu"};
  if (config.use_channel_attention) {
    f.emplace_back("attn.softmax");
    f.emplace_back("attn.mix");
  }
  if (config.use_gru) {
    f.emplace_back("gru.recurrence");
    f.emplace_back("pool.softmax");
  } else {
    f.emplace_back("meanpool");
  }
  f.emplace_back("clf.bias");
  f.emplace_back("clf.softmax");
  return f;
}

namespace {

// Weight viewed as a matrix for a row-major gemm: pool.w (2H) is a column.
Shape matrix_shape(const Shape& s) {
  if (s.size() == 1) return {s[0], 1};
  return s;
}

// Runs the network on one spectrogram. `Ops` supplies the weight-bearing
// operators; everything else is the shared real-valued fallback.
template <class Ops>
Tensor run_pipeline(const ModelParams& model, const Tensor& spec, Ops& ops) {
  const auto& cfg = model.config;
  const SepConvBlock block = sepconv_block(model);
  const std::size_t L = spec.dim(0), F = spec.dim(1), C = spec.dim(2), D = cfg.D;

  const Tensor dw = ops.depthwise("sepconv.depthwise.in", spec, "sepconv.depthwise");
  Tensor rows({L * C, F});
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t c = 0; c < C; ++c) rows.at(l * C + c, f) = dw.at(l, f, c);
  const Tensor v = ops.gemm("sepconv.pointwise.in", rows, "sepconv.pointwise", false).reshaped({L, C, D});
  Tensor feat = relu(add_residual(batchnorm_eval(v, block), spec, block));

  if (cfg.use_channel_attention) {
    const Tensor flat = feat.reshaped({L * C, D});
    const Tensor q = ops.gemm("attn.in", flat, "attn.wq", false).reshaped({L, C, D});
    const Tensor k = ops.gemm("attn.in", flat, "attn.wk", false).reshaped({L, C, D});
    const Tensor vv = ops.gemm("attn.in", flat, "attn.wv", false).reshaped({L, C, D});
    feat = channel_attention_mix(feat, q, k, vv, model.param("attn.gamma")[0]);
  }

  Tensor pooled;
  if (cfg.use_gru) {
    const Tensor u = ops.gemm("gru.proj.in", feat.reshaped({L, C * D}), "gru.proj", false);
    const Tensor h = bigru_recurrence(u, bigru(model));
    const Tensor scores = ops.gemm("pool.w.in", h, "pool.w", false);
    pooled = attn_pool_from_scores(h, scores).s;
  } else {
    pooled = mean_pool_frames(feat);
  }
  Tensor logits = ops.gemm("clf.w.in", pooled.reshaped({1, pooled.size()}), "clf.w", true);
  const Tensor& bias = model.param("clf.b");
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += bias[i];
  return softmax_rows(logits.reshaped({logits.size()}));
}

struct RealOps {
  const ModelParams& model;
  std::map<std::string, std::pair<double, double>>* observed = nullptr;

  void observe(const std::string& site, const Tensor& a) {
    if (!observed) return;
    const auto [lo, hi] = std::minmax_element(a.values().begin(), a.values().end());
    auto [it, inserted] = observed->try_emplace(site, *lo, *hi);
    if (!inserted) {
      it->second.first = std::min(it->second.first, *lo);
      it->second.second = std::max(it->second.second, *hi);
    }
  }

  Tensor depthwise(const std::string& site, const Tensor& x, const std::string& weight) {
    observe(site, x);
    return depthwise_conv(x, model.param(weight));
  }

  Tensor gemm(const std::string& site, const Tensor& a, const std::string& weight, bool transposed) {
    observe(site, a);
    const Tensor& w = model.param(weight);
    const Tensor wm = w.reshaped(matrix_shape(w.shape()));
    return matmul(a, transposed ? transpose(wm) : wm);
  }
};

struct QuantOps {
  const QuantizedModel& q;

  const QuantizedTensor& weight(const std::string& name) const {
    auto it = q.weights.find(name);
    if (it == q.weights.end()) throw UsageError("quantized model has no INT8 payload for '" + name + "'");
    return it->second;
  }

  const QuantParams& act(const std::string& site) const {
    auto it = q.activations.find(site);
    if (it == q.activations.end()) throw UsageError("quantized model has no activation params for '" + site + "'");
    return it->second;
  }

  // Integer-domain activations with the zero point already removed.
  std::vector<std::int32_t> centered(const Tensor& a, const QuantParams& qp) const {
    std::vector<std::int32_t> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = static_cast<std::int32_t>(quantize_value(a[i], qp)) - qp.zero_point;
    return out;
  }

  std::vector<std::int32_t> centered(const QuantizedTensor& w) const {
    std::vector<std::int32_t> out(w.payload.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<std::int32_t>(w.payload[i]) - w.qp.zero_point;
    return out;
  }

  Tensor depthwise(const std::string& site, const Tensor& x, const std::string& name) const {
    const QuantizedTensor& w = weight(name);
    if (q.mode == QuantMode::kWeightOnly) return depthwise_conv(x, w.dequantized());
    const QuantParams& ap = act(site);
    const auto xa = centered(x, ap);
    const auto wa = centered(w);
    const std::size_t L = x.dim(0), F = x.dim(1), C = x.dim(2), k = w.shape[1];
    const auto r = static_cast<std::ptrdiff_t>(k / 2);
    const double out_scale = ap.scale * w.qp.scale;
    Tensor out({L, F, C});
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t c = 0; c < C; ++c) {
          std::int32_t acc = 0;
          for (std::size_t i = 0; i < k; ++i) {
            const auto li = static_cast<std::ptrdiff_t>(l + i) - r;
            if (li < 0 || li >= static_cast<std::ptrdiff_t>(L)) continue;
            for (std::size_t j = 0; j < k; ++j) {
              const auto fj = static_cast<std::ptrdiff_t>(f + j) - r;
              if (fj < 0 || fj >= static_cast<std::ptrdiff_t>(F)) continue;
              acc += xa[(static_cast<std::size_t>(li) * F + static_cast<std::size_t>(fj)) * C + c] *
                     wa[(c * k + i) * k + j];
            }
          }
          out.at(l, f, c) = static_cast<double>(acc) * out_scale;
        }
    return out;
  }

  Tensor gemm(const std::string& site, const Tensor& a, const std::string& name, bool transposed) const {
    const QuantizedTensor& w = weight(name);
    const Shape ws = matrix_shape(w.shape);
    if (q.mode == QuantMode::kWeightOnly) {
      const Tensor wm = w.dequantized().reshaped(ws);
      return matmul(a, transposed ? transpose(wm) : wm);
    }
    const QuantParams& ap = act(site);
    const auto xa = centered(a, ap);
    const auto wa = centered(w);
    const std::size_t m = a.dim(0), inner = a.dim(1);
    const std::size_t n = transposed ? ws[0] : ws[1];
    if ((transposed ? ws[1] : ws[0]) != inner) {
      throw DimensionError("int8 gemm: activation " + shape_str(a.shape()) + " vs weight " + shape_str(ws));
    }
    const double out_scale = ap.scale * w.qp.scale;
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        std::int32_t acc = 0;
        for (std::size_t p = 0; p < inner; ++p) {
          const std::int32_t wv = transposed ? wa[j * inner + p] : wa[p * n + j];
          acc += xa[i * inner + p] * wv;
        }
        out.at(i, j) = static_cast<double>(acc) * out_scale;
      }
    return out;
  }
};

}  // namespace

Tensor reference_forward_spectrogram(const ModelParams& model, const Tensor& spec) {
  RealOps ops{model};
  return run_pipeline(model, spec, ops);
}

QuantizedModel calibrate(const ModelParams& model, const WindowBatch& calibration, QuantMode mode) {
  if (calibration.size() == 0 || calibration.windows.empty()) {
    throw CalibrationError("calibrate: calibration set is empty");
  }
  QuantizedModel q;
  q.base = model;
  q.mode = mode;
  q.fallback = fallback_ops(model.config);
  for (const auto& name : quantizable_weights(model.config)) q.weights.emplace(name, quantize_tensor(model.param(name)));

  std::map<std::string, std::pair<double, double>> observed;
  RealOps ops{model, &observed};
  for (std::size_t b = 0; b < calibration.windows.dim(0); ++b) {
    run_pipeline(model, spectrogram(model, calibration.window(b)), ops);
  }
  for (const auto& site : activation_sites(model.config)) {
    const auto& [lo, hi] = observed.at(site);
    q.activations.emplace(site, choose_qparams(lo, hi));
  }
  q.calibrated = true;
  return q;
}

Tensor quantized_forward_spectrogram(const QuantizedModel& qmodel, const Tensor& spec) {
  if (!qmodel.calibrated) throw UsageError("quantized_forward: model has not been calibrated");
  QuantOps ops{qmodel};
  return run_pipeline(qmodel.base, spec, ops);
}

Tensor quantized_forward(const QuantizedModel& qmodel, const Tensor& x) {
  if (!qmodel.calibrated) throw UsageError("quantized_forward: model has not been calibrated");
  const auto& cfg = qmodel.base.config;
  const Tensor batch = x.rank() == 2 ? x.reshaped({1, x.dim(0), x.dim(1)}) : x;
  if (batch.rank() != 3 || batch.dim(1) != cfg.T || batch.dim(2) != cfg.C) {
    throw DimensionError("quantized_forward: expected (B, " + std::to_string(cfg.T) + ", " + std::to_string(cfg.C) +
                         ") input, got " + shape_str(x.shape()));
  }
  const std::size_t B = batch.dim(0), T = cfg.T, C = cfg.C;
  Tensor out({B, cfg.K});
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor window({T, C}, std::vector<double>(batch.data() + b * T * C, batch.data() + (b + 1) * T * C));
    const Tensor p = quantized_forward_spectrogram(qmodel, spectrogram(qmodel.base, window));
    std::copy(p.values().begin(), p.values().end(), out.data() + b * cfg.K);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Version 2 container: the FP tensor table followed by
//   u8 mode | u32 n_entries | entries...
// entry: u16 name_len, name, f32 scale, i8 zero_point, u32 payload_len, i8 payload[payload_len]
// Weight entries carry the INT8 payload; activation sites (names ending in
// ".in") have payload_len 0.

void save_quantized_model(const QuantizedModel& qmodel, const std::string& path) {
  if (!qmodel.calibrated) throw UsageError("save_quantized_model: model has not been calibrated");
  container::Writer w;
  container::write_header(w, kQuantizedFormatVersion, qmodel.base.config);
  container::write_tensor_table(w, qmodel.base);
  w.u8(static_cast<std::uint8_t>(qmodel.mode));
  w.u32(static_cast<std::uint32_t>(qmodel.weights.size() + qmodel.activations.size()));
  auto entry = [&](const std::string& name, const QuantParams& qp, const std::vector<std::int8_t>& payload) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name);
    w.f32(static_cast<float>(qp.scale));
    w.i8(static_cast<std::int8_t>(qp.zero_point));
    w.u32(static_cast<std::uint32_t>(payload.size()));
    for (auto v : payload) w.i8(v);
  };
  for (const auto& [name, qt] : qmodel.weights) entry(name, qt.qp, qt.payload);
  for (const auto& [name, qp] : qmodel.activations) entry(name, qp, {});
  container::finish(w, path);
}

QuantizedModel load_quantized_model(const std::string& path) {
  const auto bytes = container::read_file(path);
  return container::parse_verified(bytes, path, [&](container::Reader& r) {
    QuantizedModel q;
    const SpectraConfig config = container::read_header(r, kQuantizedFormatVersion);
    q.base = container::read_tensor_table(r, config);
    const std::uint8_t mode = r.u8();
    if (mode > 1) throw FormatError(path + ": unknown quantization mode " + std::to_string(mode));
    q.mode = static_cast<QuantMode>(mode);
    const auto weights = quantizable_weights(config);
    const auto sites = activation_sites(config);
    const std::set<std::string> weight_set(weights.begin(), weights.end());
    const std::set<std::string> site_set(sites.begin(), sites.end());
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      const std::string name = r.raw(r.u16());
      QuantParams qp;
      qp.scale = static_cast<double>(r.f32());
      qp.zero_point = r.i8();
      if (!(qp.scale > 0.0)) throw FormatError(path + ": non-positive scale for '" + name + "'");
      const std::uint32_t len = r.u32();
      r.need(len);
      std::vector<std::int8_t> payload(len);
      for (auto& v : payload) v = r.i8();
      if (weight_set.count(name)) {
        const Shape shape = q.base.param(name).shape();
        if (payload.size() != shape_size(shape)) throw FormatError(path + ": payload size mismatch for '" + name + "'");
        q.weights[name] = QuantizedTensor{qp, shape, std::move(payload)};
      } else if (site_set.count(name) && payload.empty()) {
        q.activations[name] = qp;
      } else {
        throw FormatError(path + ": unexpected quantization entry '" + name + "'");
      }
    }
    if (q.weights.size() != weight_set.size() || q.activations.size() != site_set.size()) {
      throw FormatError(path + ": incomplete quantization table");
    }
    q.fallback = fallback_ops(config);
    q.calibrated = true;
    return q;
  });
}

std::uint16_t spct_version(const std::string& path) {
  return container::peek_version(container::read_file(path), path);
}

}  // namespace spectra
