#pragma once

#include <cstddef>

#include "spectra/tensor.hpp"

// Forward and backward passes for each learnable block of the network.
//
// Forward functions are pure. Training-mode variants additionally return a
// cache that the matching *_backward consumes; a default-constructed cache is
// invalid and backward rejects it with UsageError.

namespace spectra {

// ---------------------------------------------------------------------------
// Depthwise separable conv + BatchNorm + ReLU

struct SepConvBlock {
  Tensor depthwise;  // (C, k, k), correlation over (frame, bin) per channel
  Tensor pointwise;  // (F, D), shared across channels
  Tensor bn_gamma;   // (D)
  Tensor bn_beta;    // (D)
  Tensor bn_running_mean;  // (D)
  Tensor bn_running_var;   // (D)
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  // Identity shortcut added after BatchNorm, before ReLU. Only legal when D == F.
  bool residual = false;
};

struct SepConvCache {
  bool valid = false;
  Tensor input;       // (B, L, F, C)
  Tensor depthwise;   // (B, L, F, C)
  Tensor normalized;  // (B, L, C, D), BatchNorm x-hat
  Tensor pre_relu;    // (B, L, C, D)
  Tensor inv_std;     // (D), batch statistics
};

struct SepConvTrainOutput {
  Tensor output;  // (B, L, C, D)
  Tensor running_mean;
  Tensor running_var;
  SepConvCache cache;
};

struct SepConvGrads {
  Tensor depthwise, pointwise, bn_gamma, bn_beta;
  Tensor input;  // (B, L, F, C)
};

/// Zero-padded "same" 2-D correlation, one kernel per channel.
/// m: (L, F, C), kernel: (C, k, k) -> (L, F, C).
Tensor depthwise_conv(const Tensor& m, const Tensor& kernel);
/// (L, F, C) x (F, D) -> (L, C, D): each channel's bin vector is projected to D.
Tensor pointwise_project(const Tensor& dw, const Tensor& pointwise);
/// Eval-mode BatchNorm over the trailing D axis using running statistics.
Tensor batchnorm_eval(const Tensor& v, const SepConvBlock& block);
Tensor relu(const Tensor& v);
/// Adds m (L, F, C) permuted to (L, C, F) onto v when block.residual is set.
Tensor add_residual(const Tensor& v, const Tensor& m, const SepConvBlock& block);

/// m is (L, F, C) or a batch (B, L, F, C); output is (L, C, D) or (B, L, C, D).
/// In training mode the BatchNorm statistics come from the batch itself.
Tensor sepconv_forward(const Tensor& m, const SepConvBlock& block, bool training);
SepConvTrainOutput sepconv_forward_train(const Tensor& batch, const SepConvBlock& block);
SepConvGrads sepconv_backward(const SepConvBlock& block, const SepConvCache& cache, const Tensor& grad_out);

struct SepConvCost {
  std::size_t params_separable;
  std::size_t params_standard;
  double reduction;
};

/// k*C + C*D separable versus k*C*D standard parameter counts.
SepConvCost sepconv_cost(std::size_t channels, std::size_t kernel, std::size_t features);

// ---------------------------------------------------------------------------
// Channel self-attention: per frame, tokens are sensor channels.

struct ChannelAttention {
  Tensor wq, wk, wv;  // (D, D)
  double gamma = 0.0;
};

struct ChannelAttentionCache {
  bool valid = false;
  Tensor x, q, k, v;  // (L, C, D)
  Tensor attn;        // (L, C, C)
  Tensor av;          // (L, C, D)
};

struct ChannelAttentionGrads {
  Tensor wq, wk, wv;
  double gamma = 0.0;
  Tensor input;
};

Tensor channel_attention_forward(const Tensor& x, const ChannelAttention& attn);
Tensor channel_attention_forward(const Tensor& x, const ChannelAttention& attn, ChannelAttentionCache& cache);
/// Attention mixing given precomputed projections: x + gamma * softmax(q k^T / sqrt(D)) v.
Tensor channel_attention_mix(const Tensor& x, const Tensor& q, const Tensor& k, const Tensor& v, double gamma);
ChannelAttentionGrads channel_attention_backward(const ChannelAttention& attn, const ChannelAttentionCache& cache,
                                                 const Tensor& grad_out);

// ---------------------------------------------------------------------------
// Projection + bidirectional GRU

struct GruDirection {
  Tensor wz, wr, wn;  // (H, H_in) input weights
  Tensor uz, ur, un;  // (H, H) recurrent weights
  Tensor bz, br, bn;  // (H)
};

struct BiGru {
  Tensor proj;  // (C*D, H)
  GruDirection fwd;
  GruDirection bwd;

  std::size_t hidden() const { return proj.dim(1); }
};

struct GruDirectionCache {
  Tensor h_prev, z, r, n, un_h;  // (L, H), indexed by frame
};

struct BiGruCache {
  bool valid = false;
  Shape input_shape;
  Tensor z_flat;  // (L, C*D)
  Tensor u;       // (L, H)
  GruDirectionCache fwd, bwd;
};

struct GruDirectionGrads {
  Tensor wz, wr, wn, uz, ur, un, bz, br, bn;
};

struct BiGruGrads {
  Tensor proj;
  GruDirectionGrads fwd, bwd;
  Tensor input;  // (L, C, D)
};

/// One GRU step: z and r gates, candidate n = tanh(W_n u + r * (U_n h) + b_n),
/// h' = (1 - z) * n + z * h.
Tensor gru_cell(const GruDirection& dir, const Tensor& u, const Tensor& h_prev);
/// Runs both directions over projected inputs u (L, H) -> (L, 2H).
Tensor bigru_recurrence(const Tensor& u, const BiGru& gru);
Tensor bigru_forward(const Tensor& x, const BiGru& gru);
Tensor bigru_forward(const Tensor& x, const BiGru& gru, BiGruCache& cache);
BiGruGrads bigru_backward(const BiGru& gru, const BiGruCache& cache, const Tensor& grad_out);

// ---------------------------------------------------------------------------
// Attention pooling over frames

struct AttnPool {
  Tensor w;  // (2H)
};

struct AttnPoolOutput {
  Tensor s;      // (2H)
  Tensor alpha;  // (L)
};

struct AttnPoolCache {
  bool valid = false;
  Tensor h, alpha;
};

struct AttnPoolGrads {
  Tensor w;
  Tensor input;
};

AttnPoolOutput attn_pool_forward(const Tensor& h, const AttnPool& pool);
/// Pooling given precomputed frame scores e (L).
AttnPoolOutput attn_pool_from_scores(const Tensor& h, const Tensor& scores);
AttnPoolOutput attn_pool_forward(const Tensor& h, const AttnPool& pool, AttnPoolCache& cache);
AttnPoolGrads attn_pool_backward(const AttnPool& pool, const AttnPoolCache& cache, const Tensor& grad_s);

// ---------------------------------------------------------------------------
// Dropout + linear classifier + softmax

struct Classifier {
  Tensor w;  // (K, S)
  Tensor b;  // (K)
  double dropout_p = 0.2;
};

struct ClassifierCache {
  bool valid = false;
  Tensor dropped;  // s after dropout, (S)
  Tensor mask;     // per-element multiplier: 0 or 1/(1-p)
  Tensor probs;    // (K)
};

struct ClassifierGrads {
  Tensor w, b;
  Tensor input;
};

Tensor classifier_forward(const Tensor& s, const Classifier& clf, Rng& rng, bool training);
Tensor classifier_forward(const Tensor& s, const Classifier& clf, Rng& rng, ClassifierCache& cache);
/// Upstream gradient with respect to the output probabilities.
ClassifierGrads classifier_backward(const Classifier& clf, const ClassifierCache& cache, const Tensor& grad_probs);
/// Upstream gradient with respect to the logits (e.g. y_hat - y for cross-entropy).
ClassifierGrads classifier_backward_logits(const Classifier& clf, const ClassifierCache& cache,
                                           const Tensor& grad_logits);

// ---------------------------------------------------------------------------
// Mean pooling head used when the GRU is ablated: (L, C, D) -> (C*D).

Tensor mean_pool_frames(const Tensor& x);
Tensor mean_pool_frames_backward(const Tensor& grad, const Shape& input_shape);

}  // namespace spectra
