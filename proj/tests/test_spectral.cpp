#include <doctest.h>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "spectra/errors.hpp"
#include "spectra/spectral.hpp"

using namespace spectra;

TEST_CASE("periodic Hann window values") {
  const Tensor w = hann_window(16);
  CHECK(w[0] == 0.0);
  CHECK(w[8] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(w[4] == doctest::Approx(0.5).epsilon(1e-15));
  for (std::size_t t = 1; t < 16; ++t) CHECK(w[t] == doctest::Approx(w[16 - t]).epsilon(1e-14));
  CHECK_THROWS_AS(hann_window(1), ConfigError);
}

TEST_CASE("frame layout drops the partial trailing frame") {
  const StftPlan p = StftPlan::make(100, 16, 8);
  CHECK(p.n_frames == 11);
  CHECK(p.n_bins == 9);
  const StftPlan q = StftPlan::make(16, 16, 8);
  CHECK(q.n_frames == 1);
  CHECK(StftPlan::make(31, 16, 8).n_frames == 2);
}

TEST_CASE("FFT matches the DFT oracle on random complex input") {
  oracle::Lcg g(11);
  for (std::size_t n : {1u, 2u, 4u, 8u, 16u, 64u}) {
    std::vector<std::complex<double>> x(n);
    for (auto& v : x) v = {g.uniform(-1, 1), g.uniform(-1, 1)};
    const auto expect = oracle::dft(x);
    fft_radix2(x);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(x[i] - expect[i]) < 1e-12);
  }
}

TEST_CASE("spectrogram of a constant is the window sum in the DC bin") {
  const StftPlan p = StftPlan::make(32, 8, 4);
  const Tensor x({32, 1}, 2.0);
  const Tensor s = stft_direct(x, p);
  for (std::size_t l = 0; l < p.n_frames; ++l) {
    CHECK(s.at(l, 0, 0) == doctest::Approx(2.0 * 4.0).epsilon(1e-12));  // periodic Hann of 8 sums to 4
    CHECK(std::abs(s.at(l, 2, 0)) < 1e-12);
  }
}

TEST_CASE("pure tone energy lands in its bin") {
  const std::size_t n = 16;
  const StftPlan p = StftPlan::make(n, n, n);
  Tensor x({n, 1});
  for (std::size_t t = 0; t < n; ++t) x.at(t, 0) = std::cos(2.0 * std::numbers::pi * 3.0 * t / n);
  const Tensor s = stft_direct(x, p);
  std::size_t best = 0;
  for (std::size_t f = 1; f < p.n_bins; ++f)
    if (s.at(0, f, 0) > s.at(0, best, 0)) best = f;
  CHECK(best == 3);
}

TEST_CASE("stft is linear in magnitude scaling and invariant to sign") {
  oracle::Lcg g(5);
  const StftPlan p = StftPlan::make(40, 8, 4);
  const Tensor x = oracle::random_tensor(g, {40, 3});
  const Tensor a = stft_direct(x, p);
  const Tensor b = stft_direct(scale(x, -2.5), p);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(2.5 * a[i]).epsilon(1e-12));
}

TEST_CASE("filter bank and direct STFT agree with the oracle") {
  oracle::Lcg g(9);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n_fft = std::size_t{1} << (1 + g.below(5));
    const std::size_t hop = 1 + g.below(n_fft);
    const std::size_t T = n_fft + g.below(30), C = 1 + g.below(4);
    const StftPlan p = StftPlan::make(T, n_fft, hop);
    const Tensor x = oracle::random_tensor(g, {T, C}, -3.0, 3.0);
    const Tensor ref = oracle::spectrogram(x, n_fft, hop);
    CHECK(max_abs_diff(stft_direct(x, p), ref) <= 1e-9);
    CHECK(max_abs_diff(stft_filterbank(x, p), ref) <= 1e-9);
  }
}

TEST_CASE("stft input errors") {
  CHECK_THROWS_AS(StftPlan::make(100, 12, 4), ConfigError);
  const StftPlan p = StftPlan::make(32, 8, 4);
  CHECK_THROWS_AS(stft_direct(Tensor({4, 2}), p), DimensionError);
  CHECK_THROWS_AS(stft_direct(Tensor({32}), p), DimensionError);
}

TEST_CASE("Hann window worked values") {
  const Tensor w4 = hann_window(4);
  const double expect[] = {0.0, 0.5, 1.0, 0.5};
  for (std::size_t t = 0; t < 4; ++t) CHECK(std::abs(w4[t] - expect[t]) <= 1e-15);
  const Tensor w16 = hann_window(16);
  for (std::size_t t = 0; t < 16; ++t)
    CHECK(std::abs(w16[t] - 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * t / 16.0))) <= 1e-15);
}

TEST_CASE("constant and zero signals") {
  const StftPlan p = StftPlan::make(8, 8, 8);
  const Tensor ones({8, 1}, 1.0);
  const Tensor s = stft_filterbank(ones, p);
  CHECK(std::abs(s.at(0, 0, 0) - 4.0) <= 1e-12);
  const auto ref = oracle::dft_magnitudes(std::vector<double>(8, 1.0));
  for (std::size_t f = 1; f <= 4; ++f) CHECK(std::abs(s.at(0, f, 0) - ref[f]) <= 1e-12);

  const StftPlan q = StftPlan::make(100, 16, 8);
  const Tensor zero({100, 6});
  const Tensor direct = stft_direct(zero, q);
  const Tensor bank = stft_filterbank(zero, q);
  for (double v : direct.values()) CHECK(v == 0.0);
  for (double v : bank.values()) CHECK(v == 0.0);
}

TEST_CASE("cosine at bin two peaks at bin two") {
  const StftPlan p = StftPlan::make(16, 16, 8);
  Tensor x({16, 1});
  for (std::size_t t = 0; t < 16; ++t) x.at(t, 0) = std::cos(2.0 * std::numbers::pi * 2.0 * t / 16.0);
  const Tensor s = stft_filterbank(x, p);
  for (std::size_t f = 0; f < p.n_bins; ++f)
    if (f != 2) CHECK(s.at(0, f, 0) < s.at(0, 2, 0));
}

TEST_CASE("a single frame equals the windowed DFT magnitudes") {
  oracle::Lcg g(23);
  const StftPlan p = StftPlan::make(16, 16, 8);
  const Tensor x = oracle::random_tensor(g, {16, 1});
  std::vector<double> frame(x.values().begin(), x.values().end());
  const auto ref = oracle::dft_magnitudes(frame);
  const Tensor s = stft_filterbank(x, p);
  for (std::size_t f = 0; f < p.n_bins; ++f) CHECK(std::abs(s.at(0, f, 0) - ref[f]) <= 1e-12);
}
