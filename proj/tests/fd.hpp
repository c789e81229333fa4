#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "spectra/tensor.hpp"

namespace fd {

// |a - n| / max(|a|, |n|, floor).
inline double rel_error(double analytic, double numeric, double floor = 1e-8) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct Result {
  double worst = 0.0;
  std::size_t worst_index = 0;
};

// Central differences of `loss` with respect to every element of `x`,
// compared against `analytic`.
inline Result check(spectra::Tensor& x, const spectra::Tensor& analytic, const std::function<double()>& loss,
                    double h = 1e-5) {
  Result r;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = loss();
    x[i] = keep - h;
    const double down = loss();
    x[i] = keep;
    const double err = rel_error(analytic[i], (up - down) / (2.0 * h));
    if (err > r.worst) {
      r.worst = err;
      r.worst_index = i;
    }
  }
  return r;
}

inline double dot(const spectra::Tensor& a, const spectra::Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace fd
