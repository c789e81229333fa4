#pragma once

#include <complex>
#include <cstddef>
#include <vector>

#include "spectra/tensor.hpp"

namespace spectra {

/// Frame layout of a short-time Fourier transform over a T-sample window.
///
/// Frames start at multiples of `hop` and cover exactly `n_fft` samples; the
/// partial trailing frame is dropped and nothing is zero-padded, so
/// n_frames = floor((T - n_fft) / hop) + 1 and n_bins = n_fft / 2 + 1.
struct StftPlan {
  std::size_t n_fft = 16;
  std::size_t hop = 8;
  std::size_t n_frames = 0;
  std::size_t n_bins = 0;
  Tensor window;

  static StftPlan make(std::size_t window_len, std::size_t n_fft, std::size_t hop);
};

/// Periodic Hann: w[t] = 0.5 * (1 - cos(2*pi*t / n)).
Tensor hann_window(std::size_t n_fft);

bool is_power_of_two(std::size_t n);

/// In-place iterative radix-2 FFT (forward, unnormalized).
void fft_radix2(std::vector<std::complex<double>>& buf);

/// Magnitudes of shape (L, F, C). Every frame goes through fft_radix2.
Tensor stft_direct(const Tensor& x, const StftPlan& plan);

/// Same magnitudes computed as 2F strided correlations per channel with
/// Hann-windowed cosine/sine kernels. This is the realization whose cost the
/// MAC counter reports.
Tensor stft_filterbank(const Tensor& x, const StftPlan& plan);

}  // namespace spectra
