#include "spectra/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "spectra/errors.hpp"

namespace spectra {

namespace {

const char* const kGates[] = {"wz", "wr", "wn", "uz", "ur", "un", "bz", "br", "bn"};

Tensor sample_of(const Tensor& batch, std::size_t b) {
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t n = shape_size(s);
  return Tensor(std::move(s), std::vector<double>(batch.data() + b * n, batch.data() + (b + 1) * n));
}

Tensor as_batch(const Tensor& x, const SpectraConfig& cfg) {
  if (x.rank() == 2) return x.reshaped({1, x.dim(0), x.dim(1)});
  if (x.rank() != 3 || x.dim(1) != cfg.T || x.dim(2) != cfg.C) {
    throw DimensionError("forward: expected (B, " + std::to_string(cfg.T) + ", " + std::to_string(cfg.C) +
                         ") input, got " + shape_str(x.shape()));
  }
  return x;
}

// Glorot-uniform limit for a tensor with the given fan sum.
double glorot_limit(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

// Biases, BatchNorm shift and the attention gate start at zero.
bool zero_initialized(const std::string& name) {
  if (name == "sepconv.bn_beta" || name == "attn.gamma" || name == "clf.b") return true;
  const bool gru = name.rfind("gru.fwd.b", 0) == 0 || name.rfind("gru.bwd.b", 0) == 0;
  return gru;
}

GruDirection direction(const ModelParams& m, const std::string& prefix) {
  GruDirection d;
  d.wz = m.param(prefix + "wz");
  d.wr = m.param(prefix + "wr");
  d.wn = m.param(prefix + "wn");
  d.uz = m.param(prefix + "uz");
  d.ur = m.param(prefix + "ur");
  d.un = m.param(prefix + "un");
  d.bz = m.param(prefix + "bz");
  d.br = m.param(prefix + "br");
  d.bn = m.param(prefix + "bn");
  return d;
}

void store_direction(ParamMap& grads, const std::string& prefix, const GruDirectionGrads& g) {
  const Tensor* parts[] = {&g.wz, &g.wr, &g.wn, &g.uz, &g.ur, &g.un, &g.bz, &g.br, &g.bn};
  for (std::size_t i = 0; i < 9; ++i) grads[prefix + kGates[i]] = *parts[i];
}

void accumulate(ParamMap& grads, const std::string& name, const Tensor& g) {
  auto it = grads.find(name);
  if (it == grads.end()) {
    grads.emplace(name, g);
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
}

void accumulate_direction(ParamMap& grads, const std::string& prefix, const GruDirectionGrads& g) {
  ParamMap tmp;
  store_direction(tmp, prefix, g);
  for (auto& [name, t] : tmp) accumulate(grads, name, t);
}

}  // namespace

void SpectraConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid config: " + what); };
  if (T < 1 || C < 1 || K < 1 || n_fft < 1 || hop < 1 || k < 1 || D < 1 || H < 1) fail("all dimensions must be >= 1");
  if (!is_power_of_two(n_fft) || n_fft < 2) fail("n_fft=" + std::to_string(n_fft) + " must be a power of two >= 2");
  if (T < n_fft) fail("T=" + std::to_string(T) + " must be >= n_fft=" + std::to_string(n_fft));
  if (k % 2 == 0) fail("k=" + std::to_string(k) + " must be odd");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail("dropout_p must be in [0, 1)");
}

const Tensor& ModelParams::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw UsageError("model has no parameter '" + name + "'");
  return it->second;
}

const Tensor& ModelParams::buffer(const std::string& name) const {
  auto it = buffers.find(name);
  if (it == buffers.end()) throw UsageError("model has no buffer '" + name + "'");
  return it->second;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

std::vector<std::string> param_names(const SpectraConfig& config) {
  std::vector<std::string> names = {"sepconv.depthwise", "sepconv.pointwise", "sepconv.bn_gamma", "sepconv.bn_beta"};
  if (config.use_channel_attention) {
    for (const char* n : {"attn.wq", "attn.wk", "attn.wv", "attn.gamma"}) names.emplace_back(n);
  }
  if (config.use_gru) {
    names.emplace_back("gru.proj");
    for (const char* dir : {"gru.fwd.", "gru.bwd."})
      for (const char* g : kGates) names.push_back(std::string(dir) + g);
    names.emplace_back("pool.w");
  }
  names.emplace_back("clf.w");
  names.emplace_back("clf.b");
  return names;
}

std::vector<std::string> buffer_names() {
  return {"sepconv.bn_running_mean", "sepconv.bn_running_var", "input.norm_mean", "input.norm_std"};
}

Shape param_shape(const SpectraConfig& cfg, const std::string& name) {
  const std::size_t C = cfg.C, K = cfg.K, D = cfg.D, H = cfg.H, k = cfg.k, F = cfg.n_bins();
  if (name == "sepconv.depthwise") return {C, k, k};
  if (name == "sepconv.pointwise") return {F, D};
  if (name == "sepconv.bn_gamma" || name == "sepconv.bn_beta") return {D};
  if (name == "sepconv.bn_running_mean" || name == "sepconv.bn_running_var") return {D};
  if (name == "input.norm_mean" || name == "input.norm_std") return {C};
  if (name == "attn.wq" || name == "attn.wk" || name == "attn.wv") return {D, D};
  if (name == "attn.gamma") return {1};
  if (name == "gru.proj") return {C * D, H};
  if (name.rfind("gru.fwd.", 0) == 0 || name.rfind("gru.bwd.", 0) == 0) {
    const std::string gate = name.substr(8);
    if (gate[0] == 'w') return {H, H};
    if (gate[0] == 'u') return {H, H};
    if (gate[0] == 'b') return {H};
  }
  if (name == "pool.w") return {2 * H};
  const std::size_t S = cfg.use_gru ? 2 * H : C * D;
  if (name == "clf.w") return {K, S};
  if (name == "clf.b") return {K};
  throw UsageError("unknown tensor name '" + name + "'");
}

ModelParams build_model(const SpectraConfig& config) {
  config.validate();
  ModelParams m;
  m.config = config;
  Rng rng(config.seed);
  for (const auto& name : param_names(config)) {
    Shape shape = param_shape(config, name);
    Tensor t;
    if (name == "sepconv.bn_gamma") {
      t = Tensor(shape, 1.0);
    } else if (zero_initialized(name)) {
      t = Tensor(shape, 0.0);
    } else {
      std::size_t fan_in, fan_out;
      if (shape.size() == 3) {
        fan_in = fan_out = shape[1] * shape[2];
      } else if (shape.size() == 2) {
        fan_in = shape[1];
        fan_out = shape[0];
      } else {
        fan_in = shape[0];
        fan_out = 1;
      }
      const double a = glorot_limit(fan_in, fan_out);
      t = rng_uniform(rng, shape, -a, a);
    }
    m.params.emplace(name, std::move(t));
  }
  m.buffers["sepconv.bn_running_mean"] = Tensor({config.D}, 0.0);
  m.buffers["sepconv.bn_running_var"] = Tensor({config.D}, 1.0);
  m.buffers["input.norm_mean"] = Tensor({config.C}, 0.0);
  m.buffers["input.norm_std"] = Tensor({config.C}, 1.0);
  return m;
}

SepConvBlock sepconv_block(const ModelParams& m) {
  SepConvBlock b;
  b.depthwise = m.param("sepconv.depthwise");
  b.pointwise = m.param("sepconv.pointwise");
  b.bn_gamma = m.param("sepconv.bn_gamma");
  b.bn_beta = m.param("sepconv.bn_beta");
  b.bn_running_mean = m.buffer("sepconv.bn_running_mean");
  b.bn_running_var = m.buffer("sepconv.bn_running_var");
  b.residual = m.config.residual();
  return b;
}

ChannelAttention channel_attention(const ModelParams& m) {
  ChannelAttention a;
  a.wq = m.param("attn.wq");
  a.wk = m.param("attn.wk");
  a.wv = m.param("attn.wv");
  a.gamma = m.param("attn.gamma")[0];
  return a;
}

BiGru bigru(const ModelParams& m) {
  BiGru g;
  g.proj = m.param("gru.proj");
  g.fwd = direction(m, "gru.fwd.");
  g.bwd = direction(m, "gru.bwd.");
  return g;
}

AttnPool attn_pool(const ModelParams& m) { return AttnPool{m.param("pool.w")}; }

Classifier classifier(const ModelParams& m) {
  Classifier c;
  c.w = m.param("clf.w");
  c.b = m.param("clf.b");
  c.dropout_p = m.config.dropout_p;
  return c;
}

StftPlan stft_plan(const SpectraConfig& config) { return StftPlan::make(config.T, config.n_fft, config.hop); }

Tensor spectrogram(const ModelParams& model, const Tensor& window) {
  const auto& cfg = model.config;
  if (window.rank() != 2 || window.dim(0) != cfg.T || window.dim(1) != cfg.C) {
    throw DimensionError("spectrogram: expected (" + std::to_string(cfg.T) + ", " + std::to_string(cfg.C) +
                         ") window, got " + shape_str(window.shape()));
  }
  return stft_filterbank(window, stft_plan(cfg));
}

Tensor forward_spectrogram(const ModelParams& model, const Tensor& spec) {
  const auto& cfg = model.config;
  Tensor feat = sepconv_forward(spec, sepconv_block(model), false);
  if (cfg.use_channel_attention) feat = channel_attention_forward(feat, channel_attention(model));
  Tensor pooled;
  if (cfg.use_gru) {
    pooled = attn_pool_forward(bigru_forward(feat, bigru(model)), attn_pool(model)).s;
  } else {
    pooled = mean_pool_frames(feat);
  }
  Rng unused(0);
  return classifier_forward(pooled, classifier(model), unused, false);
}

namespace {

struct SampleCaches {
  Shape feat_shape;
  ChannelAttentionCache attn;
  BiGruCache gru;
  AttnPoolCache pool;
  ClassifierCache clf;
};

struct TrainForward {
  SepConvTrainOutput conv;
  std::vector<SampleCaches> samples;
  Tensor probs;
};

TrainForward train_forward(const ModelParams& model, const Tensor& x_in, Rng& rng) {
  const auto& cfg = model.config;
  const Tensor x = as_batch(x_in, cfg);
  const std::size_t B = x.dim(0), L = cfg.n_frames(), F = cfg.n_bins();
  const StftPlan plan = stft_plan(cfg);

  Tensor specs({B, L, F, cfg.C});
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor s = stft_filterbank(sample_of(x, b), plan);
    std::copy(s.values().begin(), s.values().end(), specs.data() + b * s.size());
  }

  TrainForward tf;
  tf.conv = sepconv_forward_train(specs, sepconv_block(model));
  tf.samples.resize(B);
  tf.probs = Tensor({B, cfg.K});
  const ChannelAttention attn = cfg.use_channel_attention ? channel_attention(model) : ChannelAttention{};
  const BiGru gru = cfg.use_gru ? bigru(model) : BiGru{};
  const AttnPool pool = cfg.use_gru ? attn_pool(model) : AttnPool{};
  const Classifier clf = classifier(model);
  for (std::size_t b = 0; b < B; ++b) {
    auto& sc = tf.samples[b];
    Tensor feat = sample_of(tf.conv.output, b);
    sc.feat_shape = feat.shape();
    if (cfg.use_channel_attention) feat = channel_attention_forward(feat, attn, sc.attn);
    Tensor pooled;
    if (cfg.use_gru) {
      pooled = attn_pool_forward(bigru_forward(feat, gru, sc.gru), pool, sc.pool).s;
    } else {
      pooled = mean_pool_frames(feat);
    }
    const Tensor p = classifier_forward(pooled, clf, rng, sc.clf);
    std::copy(p.values().begin(), p.values().end(), tf.probs.data() + b * cfg.K);
  }
  return tf;
}

}  // namespace

Tensor forward(const ModelParams& model, const Tensor& x_in, bool training) {
  const auto& cfg = model.config;
  const Tensor x = as_batch(x_in, cfg);
  for (double v : x.values())
    if (!std::isfinite(v)) throw NumericError("forward: input contains non-finite values");
  if (training) {
    Rng rng(cfg.seed);
    return train_forward(model, x, rng).probs;
  }
  const std::size_t B = x.dim(0);
  Tensor out({B, cfg.K});
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor p = forward_spectrogram(model, spectrogram(model, sample_of(x, b)));
    std::copy(p.values().begin(), p.values().end(), out.data() + b * cfg.K);
  }
  return out;
}

TrainPass forward_backward(const ModelParams& model, const Tensor& x_in, std::span<const int> labels, Rng& rng,
                           bool compute_grads) {
  const auto& cfg = model.config;
  const Tensor x = as_batch(x_in, cfg);
  const std::size_t B = x.dim(0);
  if (labels.size() != B) {
    throw DimensionError("forward_backward: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(B));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::uint32_t>(y) >= cfg.K) {
      throw LabelError("label " + std::to_string(y) + " outside [0, " + std::to_string(cfg.K) + ")");
    }
  }

  TrainForward tf = train_forward(model, x, rng);
  TrainPass pass;
  pass.probs = tf.probs;
  pass.running_mean = tf.conv.running_mean;
  pass.running_var = tf.conv.running_var;
  for (std::size_t b = 0; b < B; ++b) {
    pass.loss -= std::log(std::max(tf.probs.at(b, static_cast<std::size_t>(labels[b])), 1e-12));
  }
  pass.loss /= static_cast<double>(B);
  if (!compute_grads) return pass;

  const ChannelAttention attn = cfg.use_channel_attention ? channel_attention(model) : ChannelAttention{};
  const BiGru gru = cfg.use_gru ? bigru(model) : BiGru{};
  const AttnPool pool = cfg.use_gru ? attn_pool(model) : AttnPool{};
  const Classifier clf = classifier(model);

  ParamMap& grads = pass.grads;
  Tensor grad_conv(tf.conv.output.shape());
  const std::size_t per_sample = grad_conv.size() / B;
  double gamma_grad = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    auto& sc = tf.samples[b];
    Tensor grad_logits({cfg.K});
    for (std::size_t kk = 0; kk < cfg.K; ++kk) {
      const double target = static_cast<int>(kk) == labels[b] ? 1.0 : 0.0;
      grad_logits[kk] = (tf.probs.at(b, kk) - target) / static_cast<double>(B);
    }
    const ClassifierGrads cg = classifier_backward_logits(clf, sc.clf, grad_logits);
    accumulate(grads, "clf.w", cg.w);
    accumulate(grads, "clf.b", cg.b);

    Tensor grad_feat;
    if (cfg.use_gru) {
      const AttnPoolGrads pg = attn_pool_backward(pool, sc.pool, cg.input);
      accumulate(grads, "pool.w", pg.w);
      const BiGruGrads gg = bigru_backward(gru, sc.gru, pg.input);
      accumulate(grads, "gru.proj", gg.proj);
      accumulate_direction(grads, "gru.fwd.", gg.fwd);
      accumulate_direction(grads, "gru.bwd.", gg.bwd);
      grad_feat = gg.input;
    } else {
      grad_feat = mean_pool_frames_backward(cg.input, sc.feat_shape);
    }
    if (cfg.use_channel_attention) {
      const ChannelAttentionGrads ag = channel_attention_backward(attn, sc.attn, grad_feat);
      accumulate(grads, "attn.wq", ag.wq);
      accumulate(grads, "attn.wk", ag.wk);
      accumulate(grads, "attn.wv", ag.wv);
      gamma_grad += ag.gamma;
      grad_feat = ag.input;
    }
    std::copy(grad_feat.values().begin(), grad_feat.values().end(), grad_conv.data() + b * per_sample);
  }
  if (cfg.use_channel_attention) grads["attn.gamma"] = Tensor({1}, gamma_grad);

  const SepConvGrads sg = sepconv_backward(sepconv_block(model), tf.conv.cache, grad_conv);
  grads["sepconv.depthwise"] = sg.depthwise;
  grads["sepconv.pointwise"] = sg.pointwise;
  grads["sepconv.bn_gamma"] = sg.bn_gamma;
  grads["sepconv.bn_beta"] = sg.bn_beta;
  return pass;
}

CostReport count_costs(const SpectraConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.C, K = cfg.K, D = cfg.D, H = cfg.H, k = cfg.k;
  const std::size_t L = cfg.n_frames(), F = cfg.n_bins(), n_fft = cfg.n_fft;
  CostReport r;
  r.stft_macs = C * L * (2 * F * n_fft);
  r.layers.push_back({"sepconv.depthwise", C * k * k, L * F * C * k * k});
  r.layers.push_back({"sepconv.pointwise", F * D, L * C * F * D});
  r.layers.push_back({"sepconv.bn", 2 * D, L * C * D});
  if (cfg.use_channel_attention) {
    r.layers.push_back({"attn", 3 * D * D + 1, L * (3 * C * D * D + 2 * C * C * D)});
  }
  std::size_t pooled_width;
  if (cfg.use_gru) {
    r.layers.push_back({"gru.proj", C * D * H, L * C * D * H});
    r.layers.push_back({"gru", 2 * 3 * (H * H + H * H + H), 2 * L * 3 * (H * H + H * H)});
    r.layers.push_back({"pool", 2 * H, 2 * L * 2 * H});
    pooled_width = 2 * H;
  } else {
    r.layers.push_back({"meanpool", 0, L * C * D});
    pooled_width = C * D;
  }
  r.layers.push_back({"clf", K * pooled_width + K, K * pooled_width});
  for (const auto& l : r.layers) {
    r.total_params += l.params;
    r.nn_macs += l.macs;
  }
  return r;
}

}  // namespace spectra
