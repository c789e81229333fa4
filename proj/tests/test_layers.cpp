#include <doctest.h>

#include <cmath>

#include "fd.hpp"
#include "oracles.hpp"
#include "spectra/errors.hpp"
#include "spectra/layers.hpp"

using namespace spectra;

namespace {

SepConvBlock random_block(oracle::Lcg& g, std::size_t C, std::size_t k, std::size_t F, std::size_t D) {
  SepConvBlock b;
  b.depthwise = oracle::random_tensor(g, {C, k, k});
  b.pointwise = oracle::random_tensor(g, {F, D});
  b.bn_gamma = oracle::random_tensor(g, {D}, 0.5, 1.5);
  b.bn_beta = oracle::random_tensor(g, {D}, -0.3, 0.3);
  b.bn_running_mean = oracle::random_tensor(g, {D}, -0.2, 0.2);
  b.bn_running_var = oracle::random_tensor(g, {D}, 0.5, 2.0);
  b.residual = D == F;
  return b;
}

// Convolution over an explicitly zero-padded copy of the input.
Tensor depthwise_oracle(const Tensor& m, const Tensor& kern) {
  const std::size_t L = m.dim(0), F = m.dim(1), C = m.dim(2), k = kern.dim(1), r = k / 2;
  Tensor padded({L + 2 * r, F + 2 * r, C});
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t c = 0; c < C; ++c) padded.at(l + r, f + r, c) = m.at(l, f, c);
  Tensor out({L, F, C});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t f = 0; f < F; ++f) {
        double acc = 0.0;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) acc += padded.at(l + i, f + j, c) * kern.at(c, i, j);
        out.at(l, f, c) = acc;
      }
  return out;
}

ChannelAttention random_attention(oracle::Lcg& g, std::size_t D, double gamma) {
  ChannelAttention a;
  a.wq = oracle::random_tensor(g, {D, D});
  a.wk = oracle::random_tensor(g, {D, D});
  a.wv = oracle::random_tensor(g, {D, D});
  a.gamma = gamma;
  return a;
}

GruDirection random_direction(oracle::Lcg& g, std::size_t H, std::size_t H_in) {
  GruDirection d;
  for (Tensor* w : {&d.wz, &d.wr, &d.wn}) *w = oracle::random_tensor(g, {H, H_in}, -0.6, 0.6);
  for (Tensor* u : {&d.uz, &d.ur, &d.un}) *u = oracle::random_tensor(g, {H, H}, -0.6, 0.6);
  for (Tensor* b : {&d.bz, &d.br, &d.bn}) *b = oracle::random_tensor(g, {H}, -0.3, 0.3);
  return d;
}

BiGru random_bigru(oracle::Lcg& g, std::size_t CD, std::size_t H) {
  BiGru gru;
  gru.proj = oracle::random_tensor(g, {CD, H}, -0.5, 0.5);
  gru.fwd = random_direction(g, H, H);
  gru.bwd = random_direction(g, H, H);
  return gru;
}

}  // namespace

TEST_CASE("depthwise convolution matches the padded oracle") {
  oracle::Lcg g(21);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t L = 1 + g.below(8), F = 1 + g.below(9), C = 1 + g.below(4), k = 1 + 2 * g.below(3);
    const Tensor m = oracle::random_tensor(g, {L, F, C});
    const Tensor kern = oracle::random_tensor(g, {C, k, k});
    CHECK(max_abs_diff(depthwise_conv(m, kern), depthwise_oracle(m, kern)) <= 1e-13);
  }
}

TEST_CASE("a centered delta kernel is the identity") {
  oracle::Lcg g(22);
  const Tensor m = oracle::random_tensor(g, {5, 9, 3});
  Tensor kern({3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) kern.at(c, 1, 1) = 1.0;
  CHECK(depthwise_conv(m, kern) == m);
}

TEST_CASE("sepconv eval forward composes the stages") {
  oracle::Lcg g(23);
  const std::size_t L = 4, F = 5, C = 3, D = 5;
  const SepConvBlock block = random_block(g, C, 3, F, D);
  const Tensor m = oracle::random_tensor(g, {L, F, C});
  const Tensor out = sepconv_forward(m, block, false);
  const Tensor dw = depthwise_oracle(m, block.depthwise);
  REQUIRE(out.shape() == Shape{L, C, D});
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t d = 0; d < D; ++d) {
        double v = 0.0;
        for (std::size_t f = 0; f < F; ++f) v += dw.at(l, f, c) * block.pointwise.at(f, d);
        v = block.bn_gamma[d] * (v - block.bn_running_mean[d]) / std::sqrt(block.bn_running_var[d] + 1e-5) +
            block.bn_beta[d];
        v += m.at(l, d, c);  // residual, D == F
        CHECK(out.at(l, c, d) == doctest::Approx(std::max(v, 0.0)).epsilon(1e-12));
      }
}

TEST_CASE("training batch norm normalizes each feature over the batch") {
  oracle::Lcg g(24);
  SepConvBlock block = random_block(g, 2, 3, 5, 4);
  block.bn_gamma = Tensor({4}, 1.0);
  block.bn_beta = Tensor({4}, 0.0);
  const Tensor batch = oracle::random_tensor(g, {3, 4, 5, 2});
  const SepConvTrainOutput out = sepconv_forward_train(batch, block);
  const Tensor& xhat = out.cache.normalized;
  const std::size_t rows = xhat.size() / 4;
  for (std::size_t d = 0; d < 4; ++d) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < rows; ++i) mean += xhat[i * 4 + d];
    mean /= static_cast<double>(rows);
    for (std::size_t i = 0; i < rows; ++i) sq += (xhat[i * 4 + d] - mean) * (xhat[i * 4 + d] - mean);
    CHECK(std::abs(mean) < 1e-12);
    CHECK(sq / static_cast<double>(rows) == doctest::Approx(1.0).epsilon(1e-3));
  }
  // Running statistics move by momentum 0.1 toward the batch statistics.
  for (std::size_t d = 0; d < 4; ++d) {
    CHECK(out.running_mean[d] != block.bn_running_mean[d]);
  }
}

TEST_CASE("sepconv backward matches finite differences") {
  oracle::Lcg g(25);
  for (const std::size_t D : {3u, 5u}) {
    SepConvBlock block = random_block(g, 2, 3, 5, D);
    Tensor batch = oracle::random_tensor(g, {2, 3, 5, 2});
    const Tensor r = oracle::random_tensor(g, {2, 3, 2, D});
    auto loss = [&] { return fd::dot(sepconv_forward_train(batch, block).output, r); };
    const SepConvTrainOutput out = sepconv_forward_train(batch, block);
    const SepConvGrads grads = sepconv_backward(block, out.cache, r);
    CHECK(fd::check(batch, grads.input, loss).worst <= 1e-5);
    CHECK(fd::check(block.depthwise, grads.depthwise, loss).worst <= 1e-5);
    CHECK(fd::check(block.pointwise, grads.pointwise, loss).worst <= 1e-5);
    CHECK(fd::check(block.bn_gamma, grads.bn_gamma, loss).worst <= 1e-5);
    CHECK(fd::check(block.bn_beta, grads.bn_beta, loss).worst <= 1e-5);
  }
}

TEST_CASE("sepconv backward without a cache is a usage error") {
  oracle::Lcg g(26);
  const SepConvBlock block = random_block(g, 2, 3, 5, 4);
  CHECK_THROWS_AS(sepconv_backward(block, SepConvCache{}, Tensor({1, 3, 2, 4})), UsageError);
}

TEST_CASE("separable parameter closed forms") {
  const SepConvCost c = sepconv_cost(6, 3, 16);
  CHECK(c.params_separable == 114);
  CHECK(c.params_standard == 288);
  CHECK(c.reduction == doctest::Approx(288.0 / 114.0));
}

TEST_CASE("channel attention with zero gate is exactly the identity") {
  oracle::Lcg g(31);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t L = 1 + g.below(5), C = 1 + g.below(6), D = 1 + g.below(6);
    const Tensor x = oracle::random_tensor(g, {L, C, D}, -5.0, 5.0);
    CHECK(channel_attention_forward(x, random_attention(g, D, 0.0)) == x);
  }
}

TEST_CASE("channel attention matches a per-frame oracle") {
  oracle::Lcg g(32);
  const std::size_t L = 3, C = 4, D = 5;
  const Tensor x = oracle::random_tensor(g, {L, C, D});
  const ChannelAttention a = random_attention(g, D, 0.7);
  const Tensor out = channel_attention_forward(x, a);
  for (std::size_t l = 0; l < L; ++l) {
    auto proj = [&](const Tensor& w, std::size_t c, std::size_t d) {
      double s = 0.0;
      for (std::size_t e = 0; e < D; ++e) s += x.at(l, c, e) * w.at(e, d);
      return s;
    };
    for (std::size_t i = 0; i < C; ++i) {
      std::vector<double> score(C);
      double mx = -1e300;
      for (std::size_t j = 0; j < C; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < D; ++d) s += proj(a.wq, i, d) * proj(a.wk, j, d);
        score[j] = s / std::sqrt(static_cast<double>(D));
        mx = std::max(mx, score[j]);
      }
      double z = 0.0;
      for (auto& s : score) z += (s = std::exp(s - mx));
      double total = 0.0;
      for (std::size_t j = 0; j < C; ++j) total += score[j] / z;
      CHECK(std::abs(total - 1.0) <= 1e-12);
      for (std::size_t d = 0; d < D; ++d) {
        double av = 0.0;
        for (std::size_t j = 0; j < C; ++j) av += score[j] / z * proj(a.wv, j, d);
        CHECK(out.at(l, i, d) == doctest::Approx(x.at(l, i, d) + 0.7 * av).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("channel attention backward matches finite differences") {
  oracle::Lcg g(33);
  const std::size_t L = 3, C = 3, D = 4;
  ChannelAttention a = random_attention(g, D, 0.6);
  Tensor x = oracle::random_tensor(g, {L, C, D});
  const Tensor r = oracle::random_tensor(g, {L, C, D});
  auto loss = [&] { return fd::dot(channel_attention_forward(x, a), r); };
  ChannelAttentionCache cache;
  channel_attention_forward(x, a, cache);
  const ChannelAttentionGrads grads = channel_attention_backward(a, cache, r);
  CHECK(fd::check(x, grads.input, loss).worst <= 1e-6);
  CHECK(fd::check(a.wq, grads.wq, loss).worst <= 1e-6);
  CHECK(fd::check(a.wk, grads.wk, loss).worst <= 1e-6);
  CHECK(fd::check(a.wv, grads.wv, loss).worst <= 1e-6);
  Tensor gamma({1}, std::vector<double>{a.gamma});
  auto gamma_loss = [&] {
    ChannelAttention b = a;
    b.gamma = gamma[0];
    return fd::dot(channel_attention_forward(x, b), r);
  };
  CHECK(fd::check(gamma, Tensor({1}, std::vector<double>{grads.gamma}), gamma_loss).worst <= 1e-6);
}

TEST_CASE("GRU cell matches the gate equations") {
  oracle::Lcg g(41);
  const std::size_t H = 4, H_in = 3;
  const GruDirection d = random_direction(g, H, H_in);
  const Tensor u = oracle::random_tensor(g, {H_in});
  const Tensor h = oracle::random_tensor(g, {H});
  const Tensor out = gru_cell(d, u, h);
  for (std::size_t i = 0; i < H; ++i) {
    double az = d.bz[i], ar = d.br[i], wn = d.bn[i], un = 0.0;
    for (std::size_t j = 0; j < H_in; ++j) {
      az += d.wz.at(i, j) * u[j];
      ar += d.wr.at(i, j) * u[j];
      wn += d.wn.at(i, j) * u[j];
    }
    for (std::size_t j = 0; j < H; ++j) {
      az += d.uz.at(i, j) * h[j];
      ar += d.ur.at(i, j) * h[j];
      un += d.un.at(i, j) * h[j];
    }
    const double z = oracle::sigmoid(az), r = oracle::sigmoid(ar);
    const double n = std::tanh(wn + r * un);
    CHECK(out[i] == doctest::Approx((1.0 - z) * n + z * h[i]).epsilon(1e-13));
  }
}

TEST_CASE("bidirectional GRU runs the backward direction over reversed frames") {
  oracle::Lcg g(42);
  const std::size_t L = 5, H = 3;
  BiGru gru = random_bigru(g, 4, H);
  const Tensor u = oracle::random_tensor(g, {L, H});
  const Tensor out = bigru_recurrence(u, gru);
  Tensor h({H});
  for (std::size_t l = 0; l < L; ++l) {
    h = gru_cell(gru.fwd, Tensor({H}, std::vector<double>(u.data() + l * H, u.data() + (l + 1) * H)), h);
    for (std::size_t i = 0; i < H; ++i) CHECK(out.at(l, i) == doctest::Approx(h[i]).epsilon(1e-13));
  }
  h = Tensor({H});
  for (std::size_t step = 0; step < L; ++step) {
    const std::size_t l = L - 1 - step;
    h = gru_cell(gru.bwd, Tensor({H}, std::vector<double>(u.data() + l * H, u.data() + (l + 1) * H)), h);
    for (std::size_t i = 0; i < H; ++i) CHECK(out.at(l, H + i) == doctest::Approx(h[i]).epsilon(1e-13));
  }
}

TEST_CASE("bidirectional GRU backward matches finite differences") {
  oracle::Lcg g(43);
  const std::size_t L = 4, C = 2, D = 3, H = 3;
  BiGru gru = random_bigru(g, C * D, H);
  Tensor x = oracle::random_tensor(g, {L, C, D});
  const Tensor r = oracle::random_tensor(g, {L, 2 * H});
  auto loss = [&] { return fd::dot(bigru_forward(x, gru), r); };
  BiGruCache cache;
  bigru_forward(x, gru, cache);
  const BiGruGrads grads = bigru_backward(gru, cache, r);
  CHECK(fd::check(x, grads.input, loss).worst <= 1e-6);
  CHECK(fd::check(gru.proj, grads.proj, loss).worst <= 1e-6);
  for (auto [dir, dg] : {std::pair{&gru.fwd, &grads.fwd}, std::pair{&gru.bwd, &grads.bwd}}) {
    CHECK(fd::check(dir->wz, dg->wz, loss).worst <= 1e-6);
    CHECK(fd::check(dir->wr, dg->wr, loss).worst <= 1e-6);
    CHECK(fd::check(dir->wn, dg->wn, loss).worst <= 1e-6);
    CHECK(fd::check(dir->uz, dg->uz, loss).worst <= 1e-6);
    CHECK(fd::check(dir->ur, dg->ur, loss).worst <= 1e-6);
    CHECK(fd::check(dir->un, dg->un, loss).worst <= 1e-6);
    CHECK(fd::check(dir->bz, dg->bz, loss).worst <= 1e-6);
    CHECK(fd::check(dir->br, dg->br, loss).worst <= 1e-6);
    CHECK(fd::check(dir->bn, dg->bn, loss).worst <= 1e-6);
  }
}

TEST_CASE("attention pooling weights form a convex combination") {
  oracle::Lcg g(51);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t L = 1 + g.below(12), W = 1 + g.below(8);
    const Tensor h = oracle::random_tensor(g, {L, W}, -4.0, 4.0);
    const AttnPool pool{oracle::random_tensor(g, {W}, -3.0, 3.0)};
    const AttnPoolOutput out = attn_pool_forward(h, pool);
    double sum = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
      CHECK(out.alpha[l] >= 0.0);
      sum += out.alpha[l];
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
    for (std::size_t j = 0; j < W; ++j) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t l = 0; l < L; ++l) {
        lo = std::min(lo, h.at(l, j));
        hi = std::max(hi, h.at(l, j));
      }
      CHECK(out.s[j] >= lo - 1e-12);
      CHECK(out.s[j] <= hi + 1e-12);
    }
  }
}

TEST_CASE("attention pooling backward matches finite differences") {
  oracle::Lcg g(52);
  Tensor h = oracle::random_tensor(g, {5, 4});
  AttnPool pool{oracle::random_tensor(g, {4})};
  const Tensor r = oracle::random_tensor(g, {4});
  auto loss = [&] { return fd::dot(attn_pool_forward(h, pool).s, r); };
  AttnPoolCache cache;
  attn_pool_forward(h, pool, cache);
  const AttnPoolGrads grads = attn_pool_backward(pool, cache, r);
  CHECK(fd::check(h, grads.input, loss).worst <= 1e-7);
  CHECK(fd::check(pool.w, grads.w, loss).worst <= 1e-7);
}

TEST_CASE("classifier probabilities sum to one and eval mode ignores dropout") {
  oracle::Lcg g(61);
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t K = 2 + g.below(6), S = 1 + g.below(10);
    const Classifier clf{oracle::random_tensor(g, {K, S}, -3, 3), oracle::random_tensor(g, {K}), 0.5};
    const Tensor s = oracle::random_tensor(g, {S}, -3, 3);
    for (bool training : {false, true}) {
      const Tensor p = classifier_forward(s, clf, rng, training);
      double sum = 0.0;
      for (std::size_t i = 0; i < K; ++i) sum += p[i];
      CHECK(std::abs(sum - 1.0) <= 1e-10);
    }
    Rng other(99);
    CHECK(classifier_forward(s, clf, rng, false) == classifier_forward(s, clf, other, false));
  }
}

TEST_CASE("inverted dropout keeps the expected activation") {
  const std::size_t S = 4000;
  const Classifier clf{Tensor({2, S}), Tensor({2}), 0.2};
  const Tensor s({S}, 1.0);
  Rng rng(8);
  ClassifierCache cache;
  classifier_forward(s, clf, rng, cache);
  double mean = 0.0;
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < S; ++i) {
    mean += cache.dropped[i];
    if (cache.mask[i] == 0.0) ++zeros;
    else CHECK(cache.mask[i] == doctest::Approx(1.25));
  }
  CHECK(mean / S == doctest::Approx(1.0).epsilon(0.05));
  CHECK(static_cast<double>(zeros) / S == doctest::Approx(0.2).epsilon(0.15));
}

TEST_CASE("classifier backward matches finite differences") {
  oracle::Lcg g(62);
  Classifier clf{oracle::random_tensor(g, {3, 5}), oracle::random_tensor(g, {3}), 0.3};
  Tensor s = oracle::random_tensor(g, {5});
  const Tensor r = oracle::random_tensor(g, {3});
  auto loss = [&] {
    Rng rng(5);
    return fd::dot(classifier_forward(s, clf, rng, true), r);
  };
  Rng rng(5);
  ClassifierCache cache;
  classifier_forward(s, clf, rng, cache);
  const ClassifierGrads grads = classifier_backward(clf, cache, r);
  CHECK(fd::check(s, grads.input, loss).worst <= 1e-6);
  CHECK(fd::check(clf.w, grads.w, loss).worst <= 1e-6);
  CHECK(fd::check(clf.b, grads.b, loss).worst <= 1e-6);
}

TEST_CASE("mean pooling over frames and its gradient") {
  oracle::Lcg g(71);
  Tensor x = oracle::random_tensor(g, {4, 2, 3});
  const Tensor m = mean_pool_frames(x);
  REQUIRE(m.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0.0;
    for (std::size_t l = 0; l < 4; ++l) s += x[l * 6 + i];
    CHECK(m[i] == doctest::Approx(s / 4.0));
  }
  const Tensor r = oracle::random_tensor(g, {6});
  auto loss = [&] { return fd::dot(mean_pool_frames(x), r); };
  CHECK(fd::check(x, mean_pool_frames_backward(r, x.shape()), loss).worst <= 1e-8);
}

namespace {

SepConvBlock passthrough_block(std::size_t C, std::size_t F) {
  SepConvBlock b;
  b.depthwise = Tensor({C, 3, 3});
  for (std::size_t c = 0; c < C; ++c) b.depthwise.at(c, 1, 1) = 1.0;
  b.pointwise = Tensor({F, F});
  for (std::size_t f = 0; f < F; ++f) b.pointwise.at(f, f) = 1.0;
  b.bn_gamma = Tensor({F}, 1.0);
  b.bn_beta = Tensor({F}, 0.0);
  b.bn_running_mean = Tensor({F}, 0.0);
  b.bn_running_var = Tensor({F}, 1.0);
  b.bn_eps = 0.0;
  return b;
}

bool all_zero(const Tensor& t) {
  for (double v : t.values())
    if (v != 0.0) return false;
  return true;
}

}  // namespace

TEST_CASE("sepconv identity configuration with and without the shortcut") {
  oracle::Lcg g(81);
  const std::size_t L = 4, F = 5, C = 3;
  const Tensor m = oracle::random_tensor(g, {L, F, C}, 0.0, 2.0);
  SepConvBlock block = passthrough_block(C, F);

  block.residual = false;
  const Tensor plain = sepconv_forward(m, block, false);
  block.residual = true;
  const Tensor shortcut = sepconv_forward(m, block, false);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t f = 0; f < F; ++f) {
        CHECK(std::abs(plain.at(l, c, f) - m.at(l, f, c)) <= 1e-12);
        CHECK(std::abs(shortcut.at(l, c, f) - 2.0 * m.at(l, f, c)) <= 1e-12);
      }
}

TEST_CASE("sepconv scalar chain") {
  oracle::Lcg g(82);
  const std::size_t D = 4;
  SepConvBlock block = random_block(g, 1, 1, 1, D);
  block.residual = false;
  const double x = 0.7;
  const Tensor out = sepconv_forward(Tensor({1, 1, 1}, x), block, false);
  for (std::size_t d = 0; d < D; ++d) {
    const double pre = block.depthwise[0] * x * block.pointwise.at(0, d);
    const double bn = block.bn_gamma[d] * (pre - block.bn_running_mean[d]) /
                          std::sqrt(block.bn_running_var[d] + block.bn_eps) +
                      block.bn_beta[d];
    CHECK(std::abs(out.at(0, 0, d) - std::max(bn, 0.0)) <= 1e-12);
  }
}

TEST_CASE("separable cost degenerate cases") {
  for (std::size_t C = 1; C <= 6; ++C)
    for (std::size_t k = 1; k <= 7; k += 2)
      CHECK(sepconv_cost(C, k, k).reduction == doctest::Approx(static_cast<double>(k) / 2.0).epsilon(1e-15));
  const SepConvCost one = sepconv_cost(1, 1, 1);
  CHECK(one.params_separable == 2);
  CHECK(one.params_standard == 1);
  CHECK(one.reduction == 0.5);
}

TEST_CASE("channel attention over a single channel adds the gated value") {
  oracle::Lcg g(83);
  const std::size_t L = 3, D = 4;
  const ChannelAttention a = random_attention(g, D, 0.7);
  const Tensor x = oracle::random_tensor(g, {L, 1, D});
  const Tensor out = channel_attention_forward(x, a);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t d = 0; d < D; ++d) {
      double v = 0.0;
      for (std::size_t e = 0; e < D; ++e) v += x.at(l, 0, e) * a.wv.at(e, d);
      CHECK(std::abs(out.at(l, 0, d) - (x.at(l, 0, d) + 0.7 * v)) <= 1e-12);
    }
}

TEST_CASE("zero GRU produces zero states") {
  const std::size_t L = 5, C = 2, D = 3, H = 4;
  BiGru gru;
  gru.proj = Tensor({C * D, H});
  for (GruDirection* d : {&gru.fwd, &gru.bwd}) {
    for (Tensor* w : {&d->wz, &d->wr, &d->wn, &d->uz, &d->ur, &d->un}) *w = Tensor({H, H});
    for (Tensor* b : {&d->bz, &d->br, &d->bn}) *b = Tensor({H});
  }
  oracle::Lcg g(84);
  const Tensor out = bigru_forward(oracle::random_tensor(g, {L, C, D}), gru);
  REQUIRE(out.shape() == Shape{L, 2 * H});
  CHECK(all_zero(out));
}

TEST_CASE("single-frame GRU equals one cell step in each direction") {
  oracle::Lcg g(85);
  const std::size_t H = 3;
  const BiGru gru = random_bigru(g, 4, H);
  const Tensor u = oracle::random_tensor(g, {1, H});
  const Tensor out = bigru_recurrence(u, gru);
  for (auto [dir, off] : {std::pair{&gru.fwd, std::size_t{0}}, std::pair{&gru.bwd, H}}) {
    for (std::size_t i = 0; i < H; ++i) {
      // h_prev = 0, so the recurrent terms vanish.
      double az = dir->bz[i], wn = dir->bn[i];
      for (std::size_t j = 0; j < H; ++j) {
        az += dir->wz.at(i, j) * u[j];
        wn += dir->wn.at(i, j) * u[j];
      }
      const double expect = (1.0 - oracle::sigmoid(az)) * std::tanh(wn);
      CHECK(std::abs(out.at(0, off + i) - expect) <= 1e-12);
    }
  }
}

TEST_CASE("backward direction on reversed input mirrors the forward direction") {
  oracle::Lcg g(86);
  const std::size_t L = 6, H = 3;
  BiGru gru = random_bigru(g, 4, H);
  gru.bwd = gru.fwd;
  const Tensor u = oracle::random_tensor(g, {L, H});
  Tensor rev({L, H});
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t i = 0; i < H; ++i) rev.at(l, i) = u.at(L - 1 - l, i);
  const Tensor a = bigru_recurrence(u, gru);
  const Tensor b = bigru_recurrence(rev, gru);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t i = 0; i < H; ++i) CHECK(b.at(L - 1 - l, H + i) == a.at(l, i));
}

TEST_CASE("attention pooling worked cases") {
  oracle::Lcg g(87);
  const Tensor h = oracle::random_tensor(g, {5, 4});
  const AttnPoolOutput uni = attn_pool_forward(h, AttnPool{Tensor({4})});
  for (std::size_t l = 0; l < 5; ++l) CHECK(std::abs(uni.alpha[l] - 0.2) <= 1e-15);
  for (std::size_t j = 0; j < 4; ++j) {
    double mean = 0.0;
    for (std::size_t l = 0; l < 5; ++l) mean += h.at(l, j);
    CHECK(std::abs(uni.s[j] - mean / 5.0) <= 1e-12);
  }

  const Tensor h1 = oracle::random_tensor(g, {1, 4});
  const AttnPoolOutput one = attn_pool_forward(h1, AttnPool{oracle::random_tensor(g, {4})});
  CHECK(one.alpha[0] == 1.0);
  for (std::size_t j = 0; j < 4; ++j) CHECK(one.s[j] == h1[j]);

  const std::size_t L = 7, W = 6;
  const Tensor hr = oracle::random_tensor(g, {L, W}, -2.0, 2.0);
  const AttnPool pool{oracle::random_tensor(g, {W})};
  const AttnPoolOutput out = attn_pool_forward(hr, pool);
  std::vector<long double> e(L);
  long double z = 0.0L;
  for (std::size_t l = 0; l < L; ++l) {
    long double s = 0.0L;
    for (std::size_t j = 0; j < W; ++j) s += static_cast<long double>(pool.w[j]) * hr.at(l, j);
    e[l] = std::exp(s);
    z += e[l];
  }
  for (std::size_t l = 0; l < L; ++l) CHECK(std::abs(out.alpha[l] - static_cast<double>(e[l] / z)) <= 1e-12);
  for (std::size_t j = 0; j < W; ++j) {
    long double s = 0.0L;
    for (std::size_t l = 0; l < L; ++l) s += e[l] / z * hr.at(l, j);
    CHECK(std::abs(out.s[j] - static_cast<double>(s)) <= 1e-12);
  }
}

TEST_CASE("classifier uniform and logistic cases") {
  Rng rng(1);
  const std::size_t K = 5, S = 4;
  const Tensor s({S}, std::vector<double>{0.3, -1.0, 2.0, 0.5});
  const Classifier zero{Tensor({K, S}), Tensor({K}), 0.0};
  for (bool training : {false, true}) {
    const Tensor p = classifier_forward(s, zero, rng, training);
    for (std::size_t i = 0; i < K; ++i) CHECK(std::abs(p[i] - 1.0 / K) <= 1e-15);
  }

  oracle::Lcg g(88);
  const Tensor w = oracle::random_tensor(g, {S});
  Tensor wc({2, S});
  for (std::size_t j = 0; j < S; ++j) {
    wc.at(0, j) = w[j];
    wc.at(1, j) = -w[j];
  }
  const Tensor p = classifier_forward(s, Classifier{wc, Tensor({2}), 0.2}, rng, false);
  CHECK(std::abs(p[0] - oracle::sigmoid(2.0 * fd::dot(w, s))) <= 1e-12);
}

TEST_CASE("zero upstream gradient gives zero gradients everywhere") {
  oracle::Lcg g(89);
  const std::size_t L = 4, F = 5, C = 2, D = 3, H = 3, K = 3;

  const SepConvBlock block = random_block(g, C, 3, F, D);
  const SepConvTrainOutput sc = sepconv_forward_train(oracle::random_tensor(g, {2, L, F, C}), block);
  const SepConvGrads sg = sepconv_backward(block, sc.cache, Tensor(sc.output.shape()));
  for (const Tensor* t : {&sg.depthwise, &sg.pointwise, &sg.bn_gamma, &sg.bn_beta, &sg.input}) CHECK(all_zero(*t));

  const ChannelAttention attn = random_attention(g, D, 0.4);
  ChannelAttentionCache ac;
  const Tensor ax = channel_attention_forward(oracle::random_tensor(g, {L, C, D}), attn, ac);
  const ChannelAttentionGrads ag = channel_attention_backward(attn, ac, Tensor(ax.shape()));
  for (const Tensor* t : {&ag.wq, &ag.wk, &ag.wv, &ag.input}) CHECK(all_zero(*t));
  CHECK(ag.gamma == 0.0);

  const BiGru gru = random_bigru(g, C * D, H);
  BiGruCache gc;
  const Tensor gh = bigru_forward(ax, gru, gc);
  const BiGruGrads gg = bigru_backward(gru, gc, Tensor(gh.shape()));
  CHECK(all_zero(gg.proj));
  CHECK(all_zero(gg.input));
  for (const GruDirectionGrads* d : {&gg.fwd, &gg.bwd})
    for (const Tensor* t : {&d->wz, &d->wr, &d->wn, &d->uz, &d->ur, &d->un, &d->bz, &d->br, &d->bn})
      CHECK(all_zero(*t));

  const AttnPool pool{oracle::random_tensor(g, {2 * H})};
  AttnPoolCache pc;
  attn_pool_forward(gh, pool, pc);
  const AttnPoolGrads pg = attn_pool_backward(pool, pc, Tensor({2 * H}));
  CHECK(all_zero(pg.w));
  CHECK(all_zero(pg.input));

  const Classifier clf{oracle::random_tensor(g, {K, 2 * H}), oracle::random_tensor(g, {K}), 0.2};
  Rng rng(4);
  ClassifierCache cc;
  classifier_forward(oracle::random_tensor(g, {2 * H}), clf, rng, cc);
  const ClassifierGrads cg = classifier_backward(clf, cc, Tensor({K}));
  for (const Tensor* t : {&cg.w, &cg.b, &cg.input}) CHECK(all_zero(*t));
}

TEST_CASE("cross-entropy gradient at the logits is y_hat minus y") {
  oracle::Lcg g(90);
  const std::size_t K = 4, S = 5;
  Classifier clf{oracle::random_tensor(g, {K, S}), oracle::random_tensor(g, {K}), 0.0};
  const Tensor s = oracle::random_tensor(g, {S});
  const std::size_t label = 2;
  Rng rng(0);
  ClassifierCache cache;
  const Tensor p = classifier_forward(s, clf, rng, cache);
  Tensor grad = p;
  grad[label] -= 1.0;
  const ClassifierGrads cg = classifier_backward_logits(clf, cache, grad);

  Tensor onehot({K});
  onehot[label] = 1.0;
  Tensor dprobs({K});
  for (std::size_t i = 0; i < K; ++i) dprobs[i] = -onehot[i] / p[i];
  const ClassifierGrads via_probs = classifier_backward(clf, cache, dprobs);
  CHECK(max_abs_diff(via_probs.b, grad) <= 1e-12);

  // Logits are W s + b, so d loss / d b is the logit gradient.
  auto loss = [&] {
    Rng r(0);
    return -std::log(classifier_forward(s, clf, r, false)[label]);
  };
  const auto res = fd::check(clf.b, cg.b, loss);
  CHECK(res.worst <= 1e-6);
}
