#include "spectra/layers.hpp"

#include <cmath>
#include <string>

#include "spectra/errors.hpp"

namespace spectra {

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

void require_cache(bool valid, const char* layer) {
  if (!valid) {
    throw UsageError(std::string(layer) + " backward: cache is empty; run the training-mode forward first");
  }
}

void require_grad_shape(const Tensor& grad, const Shape& expected, const char* layer) {
  if (grad.shape() != expected) {
    throw UsageError(std::string(layer) + " backward: upstream gradient " + shape_str(grad.shape()) +
                     " does not match cached output " + shape_str(expected) + " (stale cache?)");
  }
}

// y[rows] = W (rows x cols) * x[cols] + y
void matvec_acc(const Tensor& w, const double* x, double* y) {
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  const double* pw = w.data();
  for (std::size_t i = 0; i < rows; ++i) {
    double acc = 0.0;
    const double* row = pw + i * cols;
    for (std::size_t j = 0; j < cols; ++j) acc += row[j] * x[j];
    y[i] += acc;
  }
}

// y[cols] += W^T (rows x cols) * x[rows]
void matvec_t_acc(const Tensor& w, const double* x, double* y) {
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  const double* pw = w.data();
  for (std::size_t i = 0; i < rows; ++i) {
    const double xi = x[i];
    const double* row = pw + i * cols;
    for (std::size_t j = 0; j < cols; ++j) y[j] += row[j] * xi;
  }
}

// G (rows x cols) += a[rows] b[cols]^T
void outer_acc(Tensor& g, const double* a, const double* b) {
  const std::size_t rows = g.dim(0), cols = g.dim(1);
  double* pg = g.data();
  for (std::size_t i = 0; i < rows; ++i) {
    const double ai = a[i];
    double* row = pg + i * cols;
    for (std::size_t j = 0; j < cols; ++j) row[j] += ai * b[j];
  }
}

Tensor as_batch(const Tensor& m) {
  if (m.rank() == 3) {
    Shape s{1};
    s.insert(s.end(), m.shape().begin(), m.shape().end());
    return m.reshaped(std::move(s));
  }
  return m;
}

Tensor sample_of(const Tensor& batch, std::size_t b) {
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t n = shape_size(s);
  std::vector<double> data(batch.data() + b * n, batch.data() + (b + 1) * n);
  return Tensor(std::move(s), std::move(data));
}

void check_sepconv(const Tensor& batch, const SepConvBlock& block) {
  require(batch.rank() == 4, "sepconv: expected (L, F, C) or (B, L, F, C) input, got " + shape_str(batch.shape()));
  require(block.depthwise.rank() == 3 && block.depthwise.dim(1) == block.depthwise.dim(2),
          "sepconv: depthwise kernel must be (C, k, k), got " + shape_str(block.depthwise.shape()));
  require(block.depthwise.dim(1) % 2 == 1, "sepconv: kernel size must be odd");
  require(batch.dim(3) == block.depthwise.dim(0),
          "sepconv: input " + shape_str(batch.shape()) + " vs depthwise " + shape_str(block.depthwise.shape()));
  require(block.pointwise.rank() == 2 && block.pointwise.dim(0) == batch.dim(2),
          "sepconv: input " + shape_str(batch.shape()) + " vs pointwise " + shape_str(block.pointwise.shape()));
  const std::size_t D = block.pointwise.dim(1);
  require(block.bn_gamma.size() == D && block.bn_beta.size() == D && block.bn_running_mean.size() == D &&
              block.bn_running_var.size() == D,
          "sepconv: BatchNorm parameters must have D=" + std::to_string(D) + " entries");
  require(!block.residual || D == batch.dim(2), "sepconv: residual shortcut requires D == F");
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor depthwise_conv(const Tensor& m, const Tensor& kernel) {
  require(m.rank() == 3, "depthwise_conv: expected (L, F, C), got " + shape_str(m.shape()));
  require(kernel.rank() == 3 && kernel.dim(0) == m.dim(2),
          "depthwise_conv: input " + shape_str(m.shape()) + " vs kernel " + shape_str(kernel.shape()));
  const std::size_t L = m.dim(0), F = m.dim(1), C = m.dim(2), k = kernel.dim(1);
  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  Tensor out({L, F, C});
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t f = 0; f < F; ++f) {
      for (std::size_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
          const auto li = static_cast<std::ptrdiff_t>(l + i) - r;
          if (li < 0 || li >= static_cast<std::ptrdiff_t>(L)) continue;
          for (std::size_t j = 0; j < k; ++j) {
            const auto fj = static_cast<std::ptrdiff_t>(f + j) - r;
            if (fj < 0 || fj >= static_cast<std::ptrdiff_t>(F)) continue;
            acc += m.at(static_cast<std::size_t>(li), static_cast<std::size_t>(fj), c) * kernel.at(c, i, j);
          }
        }
        out.at(l, f, c) = acc;
      }
    }
  }
  return out;
}

Tensor pointwise_project(const Tensor& dw, const Tensor& pointwise) {
  require(dw.rank() == 3 && pointwise.rank() == 2 && pointwise.dim(0) == dw.dim(1),
          "pointwise_project: input " + shape_str(dw.shape()) + " vs weights " + shape_str(pointwise.shape()));
  const std::size_t L = dw.dim(0), F = dw.dim(1), C = dw.dim(2), D = pointwise.dim(1);
  Tensor out({L, C, D});
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t c = 0; c < C; ++c) {
      double* dst = &out.at(l, c, 0);
      for (std::size_t f = 0; f < F; ++f) {
        const double v = dw.at(l, f, c);
        const double* prow = pointwise.data() + f * D;
        for (std::size_t d = 0; d < D; ++d) dst[d] += v * prow[d];
      }
    }
  return out;
}

Tensor batchnorm_eval(const Tensor& v, const SepConvBlock& block) {
  const std::size_t D = v.shape().back();
  require(block.bn_gamma.size() == D, "batchnorm_eval: feature width mismatch");
  Tensor out = v;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t d = i % D;
    out[i] = block.bn_gamma[d] * (v[i] - block.bn_running_mean[d]) / std::sqrt(block.bn_running_var[d] + block.bn_eps) +
             block.bn_beta[d];
  }
  return out;
}

Tensor relu(const Tensor& v) {
  Tensor out = v;
  for (auto& x : out.values()) x = x > 0.0 ? x : 0.0;
  return out;
}

Tensor add_residual(const Tensor& v, const Tensor& m, const SepConvBlock& block) {
  if (!block.residual) return v;
  Tensor out = v;
  const std::size_t L = m.dim(0), F = m.dim(1), C = m.dim(2);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t c = 0; c < C; ++c) out.at(l, c, f) += m.at(l, f, c);
  return out;
}

Tensor sepconv_forward(const Tensor& m, const SepConvBlock& block, bool training) {
  if (m.rank() != 3 && m.rank() != 4) {
    throw DimensionError("sepconv: expected (L, F, C) or (B, L, F, C) input, got " + shape_str(m.shape()));
  }
  const Tensor batch = as_batch(m);
  check_sepconv(batch, block);
  if (training) {
    Tensor out = sepconv_forward_train(batch, block).output;
    if (m.rank() == 3) return sample_of(out, 0);
    return out;
  }
  const std::size_t B = batch.dim(0);
  const std::size_t L = batch.dim(1), C = batch.dim(3), D = block.pointwise.dim(1);
  Tensor out({B, L, C, D});
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor sample = sample_of(batch, b);
    const Tensor y = relu(add_residual(batchnorm_eval(pointwise_project(depthwise_conv(sample, block.depthwise),
                                                                        block.pointwise),
                                                      block),
                                       sample, block));
    std::copy(y.values().begin(), y.values().end(), out.data() + b * y.size());
  }
  if (m.rank() == 3) return sample_of(out, 0);
  return out;
}

SepConvTrainOutput sepconv_forward_train(const Tensor& batch_in, const SepConvBlock& block) {
  const Tensor batch = as_batch(batch_in);
  check_sepconv(batch, block);
  const std::size_t B = batch.dim(0), L = batch.dim(1), F = batch.dim(2), C = batch.dim(3);
  const std::size_t D = block.pointwise.dim(1);
  const std::size_t per_sample = L * C * D;

  SepConvTrainOutput res;
  SepConvCache& cache = res.cache;
  cache.input = batch;
  cache.depthwise = Tensor({B, L, F, C});
  Tensor pre_bn({B, L, C, D});
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor dw = depthwise_conv(sample_of(batch, b), block.depthwise);
    std::copy(dw.values().begin(), dw.values().end(), cache.depthwise.data() + b * dw.size());
    const Tensor v = pointwise_project(dw, block.pointwise);
    std::copy(v.values().begin(), v.values().end(), pre_bn.data() + b * per_sample);
  }

  // Statistics per feature d, pooled over batch, frames and channels.
  const std::size_t rows = B * L * C;
  Tensor mean({D}), var({D});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t d = 0; d < D; ++d) mean[d] += pre_bn[i * D + d];
  for (std::size_t d = 0; d < D; ++d) mean[d] /= static_cast<double>(rows);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t d = 0; d < D; ++d) {
      const double t = pre_bn[i * D + d] - mean[d];
      var[d] += t * t;
    }
  for (std::size_t d = 0; d < D; ++d) var[d] /= static_cast<double>(rows);

  cache.inv_std = Tensor({D});
  for (std::size_t d = 0; d < D; ++d) cache.inv_std[d] = 1.0 / std::sqrt(var[d] + block.bn_eps);

  cache.normalized = Tensor({B, L, C, D});
  cache.pre_relu = Tensor({B, L, C, D});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t d = 0; d < D; ++d) {
      const double xh = (pre_bn[i * D + d] - mean[d]) * cache.inv_std[d];
      cache.normalized[i * D + d] = xh;
      cache.pre_relu[i * D + d] = block.bn_gamma[d] * xh + block.bn_beta[d];
    }
  if (block.residual) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t f = 0; f < F; ++f)
          for (std::size_t c = 0; c < C; ++c)
            cache.pre_relu[((b * L + l) * C + c) * D + f] += batch[((b * L + l) * F + f) * C + c];
  }
  res.output = relu(cache.pre_relu);

  const double unbias = rows > 1 ? static_cast<double>(rows) / static_cast<double>(rows - 1) : 1.0;
  res.running_mean = Tensor({D});
  res.running_var = Tensor({D});
  for (std::size_t d = 0; d < D; ++d) {
    res.running_mean[d] = (1.0 - block.bn_momentum) * block.bn_running_mean[d] + block.bn_momentum * mean[d];
    res.running_var[d] = (1.0 - block.bn_momentum) * block.bn_running_var[d] + block.bn_momentum * var[d] * unbias;
  }
  cache.valid = true;
  return res;
}

SepConvGrads sepconv_backward(const SepConvBlock& block, const SepConvCache& cache, const Tensor& grad_out_in) {
  require_cache(cache.valid, "sepconv");
  const Tensor grad_out = as_batch(grad_out_in);
  require_grad_shape(grad_out, cache.pre_relu.shape(), "sepconv");
  const std::size_t B = cache.input.dim(0), L = cache.input.dim(1), F = cache.input.dim(2), C = cache.input.dim(3);
  const std::size_t D = block.pointwise.dim(1), k = block.depthwise.dim(1);
  const std::size_t rows = B * L * C;

  SepConvGrads g;
  g.input = Tensor({B, L, F, C});
  g.bn_gamma = Tensor({D});
  g.bn_beta = Tensor({D});

  Tensor g_pre = grad_out;
  for (std::size_t i = 0; i < g_pre.size(); ++i)
    if (cache.pre_relu[i] <= 0.0) g_pre[i] = 0.0;

  if (block.residual) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t f = 0; f < F; ++f)
          for (std::size_t c = 0; c < C; ++c)
            g.input[((b * L + l) * F + f) * C + c] += g_pre[((b * L + l) * C + c) * D + f];
  }

  Tensor sum_dxh({D}), sum_dxh_xh({D});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t d = 0; d < D; ++d) {
      const double gp = g_pre[i * D + d];
      const double xh = cache.normalized[i * D + d];
      g.bn_beta[d] += gp;
      g.bn_gamma[d] += gp * xh;
      const double dxh = gp * block.bn_gamma[d];
      sum_dxh[d] += dxh;
      sum_dxh_xh[d] += dxh * xh;
    }
  Tensor g_v({B, L, C, D});
  const double n = static_cast<double>(rows);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t d = 0; d < D; ++d) {
      const double dxh = g_pre[i * D + d] * block.bn_gamma[d];
      const double xh = cache.normalized[i * D + d];
      g_v[i * D + d] = cache.inv_std[d] / n * (n * dxh - sum_dxh[d] - xh * sum_dxh_xh[d]);
    }

  g.pointwise = Tensor({F, D});
  Tensor g_dw({B, L, F, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t c = 0; c < C; ++c) {
        const double* gv = g_v.data() + ((b * L + l) * C + c) * D;
        for (std::size_t f = 0; f < F; ++f) {
          const std::size_t idx = ((b * L + l) * F + f) * C + c;
          const double dwv = cache.depthwise[idx];
          const double* prow = block.pointwise.data() + f * D;
          double* gprow = g.pointwise.data() + f * D;
          double acc = 0.0;
          for (std::size_t d = 0; d < D; ++d) {
            gprow[d] += dwv * gv[d];
            acc += gv[d] * prow[d];
          }
          g_dw[idx] = acc;
        }
      }

  g.depthwise = Tensor({C, k, k});
  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t c = 0; c < C; ++c) {
          const double go = g_dw[((b * L + l) * F + f) * C + c];
          if (go == 0.0) continue;
          for (std::size_t i = 0; i < k; ++i) {
            const auto li = static_cast<std::ptrdiff_t>(l + i) - r;
            if (li < 0 || li >= static_cast<std::ptrdiff_t>(L)) continue;
            for (std::size_t j = 0; j < k; ++j) {
              const auto fj = static_cast<std::ptrdiff_t>(f + j) - r;
              if (fj < 0 || fj >= static_cast<std::ptrdiff_t>(F)) continue;
              const std::size_t src = ((b * L + static_cast<std::size_t>(li)) * F + static_cast<std::size_t>(fj)) * C + c;
              g.depthwise.at(c, i, j) += go * cache.input[src];
              g.input[src] += go * block.depthwise.at(c, i, j);
            }
          }
        }
  return g;
}

SepConvCost sepconv_cost(std::size_t channels, std::size_t kernel, std::size_t features) {
  SepConvCost cost{};
  cost.params_separable = kernel * channels + channels * features;
  cost.params_standard = kernel * channels * features;
  cost.reduction = static_cast<double>(cost.params_standard) / static_cast<double>(cost.params_separable);
  return cost;
}

// ---------------------------------------------------------------------------

namespace {

void check_attention(const Tensor& x, const ChannelAttention& attn) {
  require(x.rank() == 3, "channel_attention: expected (L, C, D), got " + shape_str(x.shape()));
  const std::size_t D = x.dim(2);
  for (const Tensor* w : {&attn.wq, &attn.wk, &attn.wv}) {
    require(w->rank() == 2 && w->dim(0) == D && w->dim(1) == D,
            "channel_attention: input " + shape_str(x.shape()) + " vs weight " + shape_str(w->shape()));
  }
}

// (L*C, D) x (D, D) on the flattened frame-channel rows.
Tensor project_rows(const Tensor& x, const Tensor& w) {
  const Tensor flat = x.reshaped({x.dim(0) * x.dim(1), x.dim(2)});
  return matmul(flat, w).reshaped(x.shape());
}

Tensor attention_weights(const Tensor& q, const Tensor& k) {
  const std::size_t L = q.dim(0), C = q.dim(1), D = q.dim(2);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));
  Tensor scores({L * C, C});
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < C; ++j) {
        double acc = 0.0;
        for (std::size_t d = 0; d < D; ++d) acc += q.at(l, i, d) * k.at(l, j, d);
        scores.at(l * C + i, j) = acc * inv_sqrt_d;
      }
  return softmax_rows(scores).reshaped({L, C, C});
}

Tensor apply_attention(const Tensor& attn, const Tensor& v) {
  const std::size_t L = v.dim(0), C = v.dim(1), D = v.dim(2);
  Tensor av({L, C, D});
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < C; ++j) {
        const double a = attn.at(l, i, j);
        for (std::size_t d = 0; d < D; ++d) av.at(l, i, d) += a * v.at(l, j, d);
      }
  return av;
}

}  // namespace

Tensor channel_attention_mix(const Tensor& x, const Tensor& q, const Tensor& k, const Tensor& v, double gamma) {
  const Tensor av = apply_attention(attention_weights(q, k), v);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += gamma * av[i];
  return out;
}

Tensor channel_attention_forward(const Tensor& x, const ChannelAttention& attn) {
  ChannelAttentionCache unused;
  return channel_attention_forward(x, attn, unused);
}

Tensor channel_attention_forward(const Tensor& x, const ChannelAttention& attn, ChannelAttentionCache& cache) {
  check_attention(x, attn);
  cache.x = x;
  cache.q = project_rows(x, attn.wq);
  cache.k = project_rows(x, attn.wk);
  cache.v = project_rows(x, attn.wv);
  cache.attn = attention_weights(cache.q, cache.k);
  cache.av = apply_attention(cache.attn, cache.v);
  cache.valid = true;
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += attn.gamma * cache.av[i];
  return out;
}

ChannelAttentionGrads channel_attention_backward(const ChannelAttention& attn, const ChannelAttentionCache& cache,
                                                 const Tensor& grad_out) {
  require_cache(cache.valid, "channel_attention");
  require_grad_shape(grad_out, cache.x.shape(), "channel_attention");
  const std::size_t L = cache.x.dim(0), C = cache.x.dim(1), D = cache.x.dim(2);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));

  ChannelAttentionGrads g;
  g.input = grad_out;
  for (std::size_t i = 0; i < grad_out.size(); ++i) g.gamma += grad_out[i] * cache.av[i];

  Tensor gq({L, C, D}), gk({L, C, D}), gv({L, C, D});
  std::vector<double> g_attn(C * C), g_scores(C * C);
  for (std::size_t l = 0; l < L; ++l) {
    // d(AV) = gamma * g;  dA = d(AV) V^T;  dV = A^T d(AV)
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < C; ++j) {
        double acc = 0.0;
        for (std::size_t d = 0; d < D; ++d) acc += grad_out.at(l, i, d) * cache.v.at(l, j, d);
        g_attn[i * C + j] = attn.gamma * acc;
        const double a = cache.attn.at(l, i, j);
        for (std::size_t d = 0; d < D; ++d) gv.at(l, j, d) += a * attn.gamma * grad_out.at(l, i, d);
      }
    for (std::size_t i = 0; i < C; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < C; ++j) dot += g_attn[i * C + j] * cache.attn.at(l, i, j);
      for (std::size_t j = 0; j < C; ++j) g_scores[i * C + j] = cache.attn.at(l, i, j) * (g_attn[i * C + j] - dot);
    }
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < C; ++j) {
        const double s = g_scores[i * C + j] * inv_sqrt_d;
        for (std::size_t d = 0; d < D; ++d) {
          gq.at(l, i, d) += s * cache.k.at(l, j, d);
          gk.at(l, j, d) += s * cache.q.at(l, i, d);
        }
      }
  }

  const Tensor x_flat = cache.x.reshaped({L * C, D});
  const Tensor x_t = transpose(x_flat);
  const Tensor gq_flat = gq.reshaped({L * C, D});
  const Tensor gk_flat = gk.reshaped({L * C, D});
  const Tensor gv_flat = gv.reshaped({L * C, D});
  g.wq = matmul(x_t, gq_flat);
  g.wk = matmul(x_t, gk_flat);
  g.wv = matmul(x_t, gv_flat);
  const Tensor gx = add(add(matmul(gq_flat, transpose(attn.wq)), matmul(gk_flat, transpose(attn.wk))),
                        matmul(gv_flat, transpose(attn.wv)));
  for (std::size_t i = 0; i < g.input.size(); ++i) g.input[i] += gx[i];
  return g;
}

// ---------------------------------------------------------------------------

namespace {

void check_direction(const GruDirection& dir, std::size_t H, std::size_t H_in) {
  for (const Tensor* w : {&dir.wz, &dir.wr, &dir.wn})
    require(w->rank() == 2 && w->dim(0) == H && w->dim(1) == H_in, "gru: input weight shape " + shape_str(w->shape()));
  for (const Tensor* u : {&dir.uz, &dir.ur, &dir.un})
    require(u->rank() == 2 && u->dim(0) == H && u->dim(1) == H, "gru: recurrent weight shape " + shape_str(u->shape()));
  for (const Tensor* b : {&dir.bz, &dir.br, &dir.bn})
    require(b->size() == H, "gru: bias shape " + shape_str(b->shape()));
}

struct StepState {
  std::vector<double> z, r, n, un_h, h;
};

StepState gru_step(const GruDirection& dir, const double* u, const double* h_prev, std::size_t H) {
  StepState s;
  std::vector<double> az(dir.bz.values().begin(), dir.bz.values().end());
  std::vector<double> ar(dir.br.values().begin(), dir.br.values().end());
  std::vector<double> an(dir.bn.values().begin(), dir.bn.values().end());
  s.un_h.assign(H, 0.0);
  matvec_acc(dir.wz, u, az.data());
  matvec_acc(dir.uz, h_prev, az.data());
  matvec_acc(dir.wr, u, ar.data());
  matvec_acc(dir.ur, h_prev, ar.data());
  matvec_acc(dir.wn, u, an.data());
  matvec_acc(dir.un, h_prev, s.un_h.data());
  s.z.resize(H);
  s.r.resize(H);
  s.n.resize(H);
  s.h.resize(H);
  for (std::size_t i = 0; i < H; ++i) {
    s.z[i] = sigmoid(az[i]);
    s.r[i] = sigmoid(ar[i]);
    s.n[i] = std::tanh(an[i] + s.r[i] * s.un_h[i]);
    s.h[i] = (1.0 - s.z[i]) * s.n[i] + s.z[i] * h_prev[i];
  }
  return s;
}

// Runs one direction over u (L, H_in); writes states into out (L, 2H) at the
// given column offset and fills the cache if provided.
void run_direction(const GruDirection& dir, const Tensor& u, bool reverse, Tensor& out, std::size_t offset,
                   GruDirectionCache* cache) {
  const std::size_t L = u.dim(0), H = dir.uz.dim(0), H_in = u.dim(1);
  if (cache) {
    cache->h_prev = Tensor({L, H});
    cache->z = Tensor({L, H});
    cache->r = Tensor({L, H});
    cache->n = Tensor({L, H});
    cache->un_h = Tensor({L, H});
  }
  std::vector<double> h(H, 0.0);
  for (std::size_t step = 0; step < L; ++step) {
    const std::size_t l = reverse ? L - 1 - step : step;
    StepState s = gru_step(dir, u.data() + l * H_in, h.data(), H);
    if (cache) {
      std::copy(h.begin(), h.end(), &cache->h_prev.at(l, 0));
      std::copy(s.z.begin(), s.z.end(), &cache->z.at(l, 0));
      std::copy(s.r.begin(), s.r.end(), &cache->r.at(l, 0));
      std::copy(s.n.begin(), s.n.end(), &cache->n.at(l, 0));
      std::copy(s.un_h.begin(), s.un_h.end(), &cache->un_h.at(l, 0));
    }
    h = std::move(s.h);
    std::copy(h.begin(), h.end(), &out.at(l, offset));
  }
}

GruDirectionGrads backward_direction(const GruDirection& dir, const GruDirectionCache& cache, const Tensor& u,
                                     const Tensor& grad_out, std::size_t offset, bool reverse, Tensor& grad_u) {
  const std::size_t L = u.dim(0), H = dir.uz.dim(0), H_in = u.dim(1);
  GruDirectionGrads g;
  g.wz = Tensor({H, H_in});
  g.wr = Tensor({H, H_in});
  g.wn = Tensor({H, H_in});
  g.uz = Tensor({H, H});
  g.ur = Tensor({H, H});
  g.un = Tensor({H, H});
  g.bz = Tensor({H});
  g.br = Tensor({H});
  g.bn = Tensor({H});

  std::vector<double> carry(H, 0.0), dh(H), da_z(H), da_r(H), da_n(H), da_n_r(H), next_carry(H);
  for (std::size_t step = 0; step < L; ++step) {
    // Undo the processing order: the last processed frame is handled first.
    const std::size_t l = reverse ? step : L - 1 - step;
    const double* hp = &cache.h_prev.at(l, 0);
    for (std::size_t i = 0; i < H; ++i) dh[i] = grad_out.at(l, offset + i) + carry[i];
    std::fill(next_carry.begin(), next_carry.end(), 0.0);
    for (std::size_t i = 0; i < H; ++i) {
      const double z = cache.z.at(l, i), r = cache.r.at(l, i), n = cache.n.at(l, i);
      const double dn = dh[i] * (1.0 - z);
      const double dz = dh[i] * (hp[i] - n);
      next_carry[i] += dh[i] * z;
      da_n[i] = dn * (1.0 - n * n);
      const double dr = da_n[i] * cache.un_h.at(l, i);
      da_n_r[i] = da_n[i] * r;
      da_z[i] = dz * z * (1.0 - z);
      da_r[i] = dr * r * (1.0 - r);
    }
    const double* ul = u.data() + l * H_in;
    double* gul = grad_u.data() + l * H_in;
    outer_acc(g.wz, da_z.data(), ul);
    outer_acc(g.wr, da_r.data(), ul);
    outer_acc(g.wn, da_n.data(), ul);
    outer_acc(g.uz, da_z.data(), hp);
    outer_acc(g.ur, da_r.data(), hp);
    outer_acc(g.un, da_n_r.data(), hp);
    for (std::size_t i = 0; i < H; ++i) {
      g.bz[i] += da_z[i];
      g.br[i] += da_r[i];
      g.bn[i] += da_n[i];
    }
    matvec_t_acc(dir.wz, da_z.data(), gul);
    matvec_t_acc(dir.wr, da_r.data(), gul);
    matvec_t_acc(dir.wn, da_n.data(), gul);
    matvec_t_acc(dir.uz, da_z.data(), next_carry.data());
    matvec_t_acc(dir.ur, da_r.data(), next_carry.data());
    matvec_t_acc(dir.un, da_n_r.data(), next_carry.data());
    carry.swap(next_carry);
  }
  return g;
}

void check_bigru_input(const Tensor& x, const BiGru& gru) {
  require(x.rank() == 3, "bigru: expected (L, C, D), got " + shape_str(x.shape()));
  if (x.dim(0) == 0) throw DimensionError("bigru: empty sequence");
  require(gru.proj.rank() == 2 && gru.proj.dim(0) == x.dim(1) * x.dim(2),
          "bigru: input " + shape_str(x.shape()) + " vs projection " + shape_str(gru.proj.shape()));
  const std::size_t H = gru.hidden();
  check_direction(gru.fwd, H, H);
  check_direction(gru.bwd, H, H);
}

}  // namespace

Tensor gru_cell(const GruDirection& dir, const Tensor& u, const Tensor& h_prev) {
  const std::size_t H = dir.uz.dim(0);
  check_direction(dir, H, u.size());
  require(h_prev.size() == H, "gru_cell: hidden state size mismatch");
  StepState s = gru_step(dir, u.data(), h_prev.data(), H);
  return Tensor({H}, std::move(s.h));
}

Tensor bigru_recurrence(const Tensor& u, const BiGru& gru) {
  require(u.rank() == 2 && u.dim(0) >= 1, "bigru: projected input must be (L, H)");
  const std::size_t H = gru.hidden();
  check_direction(gru.fwd, H, u.dim(1));
  check_direction(gru.bwd, H, u.dim(1));
  Tensor out({u.dim(0), 2 * H});
  run_direction(gru.fwd, u, false, out, 0, nullptr);
  run_direction(gru.bwd, u, true, out, H, nullptr);
  return out;
}

Tensor bigru_forward(const Tensor& x, const BiGru& gru) {
  check_bigru_input(x, gru);
  const Tensor z = x.reshaped({x.dim(0), x.dim(1) * x.dim(2)});
  return bigru_recurrence(matmul(z, gru.proj), gru);
}

Tensor bigru_forward(const Tensor& x, const BiGru& gru, BiGruCache& cache) {
  check_bigru_input(x, gru);
  const std::size_t L = x.dim(0), H = gru.hidden();
  cache.input_shape = x.shape();
  cache.z_flat = x.reshaped({L, x.dim(1) * x.dim(2)});
  cache.u = matmul(cache.z_flat, gru.proj);
  Tensor out({L, 2 * H});
  run_direction(gru.fwd, cache.u, false, out, 0, &cache.fwd);
  run_direction(gru.bwd, cache.u, true, out, H, &cache.bwd);
  cache.valid = true;
  return out;
}

BiGruGrads bigru_backward(const BiGru& gru, const BiGruCache& cache, const Tensor& grad_out) {
  require_cache(cache.valid, "bigru");
  const std::size_t L = cache.u.dim(0), H = gru.hidden();
  require_grad_shape(grad_out, Shape{L, 2 * H}, "bigru");
  BiGruGrads g;
  Tensor grad_u({L, H});
  g.fwd = backward_direction(gru.fwd, cache.fwd, cache.u, grad_out, 0, false, grad_u);
  g.bwd = backward_direction(gru.bwd, cache.bwd, cache.u, grad_out, H, true, grad_u);
  g.proj = matmul(transpose(cache.z_flat), grad_u);
  g.input = matmul(grad_u, transpose(gru.proj)).reshaped(cache.input_shape);
  return g;
}

// ---------------------------------------------------------------------------

AttnPoolOutput attn_pool_from_scores(const Tensor& h, const Tensor& scores) {
  require(h.rank() == 2 && h.dim(0) >= 1, "attn_pool: expected (L, 2H), got " + shape_str(h.shape()));
  require(scores.size() == h.dim(0), "attn_pool: one score per frame required");
  const std::size_t L = h.dim(0), W = h.dim(1);
  AttnPoolOutput out;
  out.alpha = softmax_rows(scores.reshaped({L}));
  out.s = Tensor({W});
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t j = 0; j < W; ++j) out.s[j] += out.alpha[l] * h.at(l, j);
  return out;
}

AttnPoolOutput attn_pool_forward(const Tensor& h, const AttnPool& pool) {
  AttnPoolCache unused;
  return attn_pool_forward(h, pool, unused);
}

AttnPoolOutput attn_pool_forward(const Tensor& h, const AttnPool& pool, AttnPoolCache& cache) {
  require(h.rank() == 2 && pool.w.size() == h.dim(1),
          "attn_pool: states " + shape_str(h.shape()) + " vs scoring vector " + shape_str(pool.w.shape()));
  const std::size_t L = h.dim(0);
  Tensor scores({L});
  matvec_acc(h, pool.w.data(), scores.data());
  AttnPoolOutput out = attn_pool_from_scores(h, scores);
  cache.h = h;
  cache.alpha = out.alpha;
  cache.valid = true;
  return out;
}

AttnPoolGrads attn_pool_backward(const AttnPool& pool, const AttnPoolCache& cache, const Tensor& grad_s) {
  require_cache(cache.valid, "attn_pool");
  const std::size_t L = cache.h.dim(0), W = cache.h.dim(1);
  require_grad_shape(grad_s, Shape{W}, "attn_pool");
  AttnPoolGrads g;
  g.w = Tensor({W});
  g.input = Tensor({L, W});
  std::vector<double> d_alpha(L, 0.0);
  double dot = 0.0;
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t j = 0; j < W; ++j) {
      d_alpha[l] += grad_s[j] * cache.h.at(l, j);
      g.input.at(l, j) = cache.alpha[l] * grad_s[j];
    }
    dot += cache.alpha[l] * d_alpha[l];
  }
  for (std::size_t l = 0; l < L; ++l) {
    const double de = cache.alpha[l] * (d_alpha[l] - dot);
    for (std::size_t j = 0; j < W; ++j) {
      g.w[j] += de * cache.h.at(l, j);
      g.input.at(l, j) += de * pool.w[j];
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

namespace {

void check_classifier(const Tensor& s, const Classifier& clf) {
  require(clf.w.rank() == 2 && clf.w.dim(1) == s.size() && clf.b.size() == clf.w.dim(0),
          "classifier: input " + shape_str(s.shape()) + " vs weights " + shape_str(clf.w.shape()));
  if (!(clf.dropout_p >= 0.0 && clf.dropout_p < 1.0)) throw ConfigError("classifier: dropout_p must be in [0, 1)");
}

Tensor logits_softmax(const Tensor& s, const Classifier& clf) {
  Tensor logits = clf.b;
  matvec_acc(clf.w, s.data(), logits.data());
  return softmax_rows(logits);
}

}  // namespace

Tensor classifier_forward(const Tensor& s, const Classifier& clf, Rng& rng, bool training) {
  if (training) {
    ClassifierCache cache;
    return classifier_forward(s, clf, rng, cache);
  }
  check_classifier(s, clf);
  return logits_softmax(s, clf);
}

Tensor classifier_forward(const Tensor& s, const Classifier& clf, Rng& rng, ClassifierCache& cache) {
  check_classifier(s, clf);
  const double keep = 1.0 - clf.dropout_p;
  cache.mask = Tensor({s.size()}, 1.0);
  if (clf.dropout_p > 0.0) {
    for (auto& m : cache.mask.values()) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
  }
  cache.dropped = s.reshaped({s.size()});
  for (std::size_t i = 0; i < s.size(); ++i) cache.dropped[i] *= cache.mask[i];
  cache.probs = logits_softmax(cache.dropped, clf);
  cache.valid = true;
  return cache.probs;
}

ClassifierGrads classifier_backward(const Classifier& clf, const ClassifierCache& cache, const Tensor& grad_probs) {
  require_cache(cache.valid, "classifier");
  require_grad_shape(grad_probs, cache.probs.shape(), "classifier");
  double dot = 0.0;
  for (std::size_t k = 0; k < grad_probs.size(); ++k) dot += grad_probs[k] * cache.probs[k];
  Tensor grad_logits(cache.probs.shape());
  for (std::size_t k = 0; k < grad_probs.size(); ++k) grad_logits[k] = cache.probs[k] * (grad_probs[k] - dot);
  return classifier_backward_logits(clf, cache, grad_logits);
}

ClassifierGrads classifier_backward_logits(const Classifier& clf, const ClassifierCache& cache,
                                           const Tensor& grad_logits) {
  require_cache(cache.valid, "classifier");
  require_grad_shape(grad_logits, cache.probs.shape(), "classifier");
  const std::size_t K = clf.w.dim(0), S = clf.w.dim(1);
  ClassifierGrads g;
  g.b = grad_logits;
  g.w = Tensor({K, S});
  outer_acc(g.w, grad_logits.data(), cache.dropped.data());
  g.input = Tensor({S});
  matvec_t_acc(clf.w, grad_logits.data(), g.input.data());
  for (std::size_t i = 0; i < S; ++i) g.input[i] *= cache.mask[i];
  return g;
}

// ---------------------------------------------------------------------------

Tensor mean_pool_frames(const Tensor& x) {
  require(x.rank() == 3, "mean_pool_frames: expected (L, C, D), got " + shape_str(x.shape()));
  const std::size_t L = x.dim(0), W = x.dim(1) * x.dim(2);
  Tensor out({W});
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t j = 0; j < W; ++j) out[j] += x[l * W + j];
  for (auto& v : out.values()) v /= static_cast<double>(L);
  return out;
}

Tensor mean_pool_frames_backward(const Tensor& grad, const Shape& input_shape) {
  Tensor g(input_shape);
  const std::size_t L = input_shape[0], W = grad.size();
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t j = 0; j < W; ++j) g[l * W + j] = grad[j] / static_cast<double>(L);
  return g;
}

}  // namespace spectra
