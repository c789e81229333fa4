#include "spectra/spectral.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <utility>

#include "spectra/errors.hpp"

namespace spectra {

namespace {

void check_input(const Tensor& x, const StftPlan& plan) {
  if (x.rank() != 2) throw DimensionError("stft: input must be (T x C), got " + shape_str(x.shape()));
  if (!is_power_of_two(plan.n_fft)) {
    throw ConfigError("stft: n_fft=" + std::to_string(plan.n_fft) + " is not a power of two");
  }
  if (x.dim(0) < plan.n_fft) {
    throw DimensionError("stft: window of " + std::to_string(x.dim(0)) + " samples is shorter than n_fft=" +
                         std::to_string(plan.n_fft));
  }
  const std::size_t frames = (x.dim(0) - plan.n_fft) / plan.hop + 1;
  if (frames != plan.n_frames || plan.window.size() != plan.n_fft) {
    throw DimensionError("stft: plan built for a different window length than " + shape_str(x.shape()));
  }
}

}  // namespace

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

Tensor hann_window(std::size_t n_fft) {
  if (n_fft < 2) throw ConfigError("hann_window: n_fft must be >= 2, got " + std::to_string(n_fft));
  Tensor w({n_fft});
  const double n = static_cast<double>(n_fft);
  for (std::size_t t = 0; t < n_fft; ++t) {
    w[t] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(t) / n));
  }
  return w;
}

StftPlan StftPlan::make(std::size_t window_len, std::size_t n_fft, std::size_t hop) {
  if (!is_power_of_two(n_fft) || n_fft < 2) {
    throw ConfigError("stft plan: n_fft=" + std::to_string(n_fft) + " must be a power of two >= 2");
  }
  if (hop == 0) throw ConfigError("stft plan: hop must be >= 1");
  if (window_len < n_fft) {
    throw ConfigError("stft plan: T=" + std::to_string(window_len) + " < n_fft=" + std::to_string(n_fft));
  }
  StftPlan plan;
  plan.n_fft = n_fft;
  plan.hop = hop;
  plan.n_frames = (window_len - n_fft) / hop + 1;
  plan.n_bins = n_fft / 2 + 1;
  plan.window = hann_window(n_fft);
  return plan;
}

void fft_radix2(std::vector<std::complex<double>>& buf) {
  const std::size_t n = buf.size();
  if (!is_power_of_two(n)) throw ConfigError("fft: length " + std::to_string(n) + " is not a power of two");

  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(buf[i], buf[j]);
  }

  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    const std::size_t half = len / 2;
    for (std::size_t start = 0; start < n; start += len) {
      for (std::size_t k = 0; k < half; ++k) {
        // Twiddles straight from cos/sin rather than by recurrence, so
        // rounding error does not grow with k.
        const std::complex<double> tw(std::cos(ang * static_cast<double>(k)), std::sin(ang * static_cast<double>(k)));
        const auto u = buf[start + k];
        const auto v = buf[start + k + half] * tw;
        buf[start + k] = u + v;
        buf[start + k + half] = u - v;
      }
    }
  }
}

Tensor stft_direct(const Tensor& x, const StftPlan& plan) {
  check_input(x, plan);
  const std::size_t channels = x.dim(1);
  const std::size_t L = plan.n_frames, F = plan.n_bins, n = plan.n_fft;
  Tensor mags({L, F, channels});
  std::vector<std::complex<double>> frame(n);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t t = 0; t < n; ++t) frame[t] = {x.at(l * plan.hop + t, c) * plan.window[t], 0.0};
      fft_radix2(frame);
      for (std::size_t f = 0; f < F; ++f) mags.at(l, f, c) = std::abs(frame[f]);
    }
  }
  return mags;
}

Tensor stft_filterbank(const Tensor& x, const StftPlan& plan) {
  check_input(x, plan);
  const std::size_t channels = x.dim(1);
  const std::size_t L = plan.n_frames, F = plan.n_bins, n = plan.n_fft;

  // Kernel bank: rows [0, F) are cosine kernels, rows [F, 2F) sine kernels.
  std::vector<double> bank(2 * F * n);
  for (std::size_t f = 0; f < F; ++f) {
    for (std::size_t t = 0; t < n; ++t) {
      const double ang = 2.0 * std::numbers::pi * static_cast<double>(f * t % n) / static_cast<double>(n);
      bank[f * n + t] = plan.window[t] * std::cos(ang);
      bank[(F + f) * n + t] = plan.window[t] * std::sin(ang);
    }
  }

  Tensor mags({L, F, channels});
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t start = l * plan.hop;
      for (std::size_t f = 0; f < F; ++f) {
        double re = 0.0, im = 0.0;
        const double* kc = &bank[f * n];
        const double* ks = &bank[(F + f) * n];
        for (std::size_t t = 0; t < n; ++t) {
          const double v = x.at(start + t, c);
          re += v * kc[t];
          im += v * ks[t];
        }
        mags.at(l, f, c) = std::sqrt(re * re + im * im);
      }
    }
  }
  return mags;
}

}  // namespace spectra
