#include "spectra/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>

#include "spectra/errors.hpp"

namespace spectra {

namespace {

std::atomic<std::size_t> g_peak_bytes{0};

void note_allocation(std::size_t elements) {
  const std::size_t bytes = elements * sizeof(double);
  std::size_t prev = g_peak_bytes.load(std::memory_order_relaxed);
  while (bytes > prev && !g_peak_bytes.compare_exchange_weak(prev, bytes, std::memory_order_relaxed)) {
  }
}

void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor shape " + shape_str(shape) + " has a zero dimension");
  }
}

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + ": expected a matrix, got shape " + shape_str(t.shape()));
  }
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_size(shape_), fill);
  note_allocation(data_.size());
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (data_.size() != shape_size(shape_)) {
    throw DimensionError("tensor shape " + shape_str(shape_) + " needs " + std::to_string(shape_size(shape_)) +
                         " elements, got " + std::to_string(data_.size()));
  }
  note_allocation(data_.size());
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(m * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({m, n}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[axis];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

void reset_peak_tensor_bytes() { g_peak_bytes.store(0); }
std::size_t peak_tensor_bytes() { return g_peak_bytes.load(); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul lhs");
  require_rank2(b, "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  // Row-major, left-to-right accumulation over the inner index for every
  // output element.
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * n;
      double* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  if (x.rank() != 2 && x.rank() != 1) {
    throw DimensionError("softmax_rows: expected rank 1 or 2, got " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back();
  const std::size_t m = x.size() / n;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data() + i * n;
    double* dst = out.data() + i * n;
    double mx = row[0];
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(row[j])) throw NumericError("softmax_rows: NaN in row " + std::to_string(i));
      mx = std::max(mx, row[j]);
    }
    if (!std::isfinite(mx)) throw NumericError("softmax_rows: non-finite entry in row " + std::to_string(i));
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      dst[j] = std::exp(row[j] - mx);
      sum += dst[j];
    }
    for (std::size_t j = 0; j < n; ++j) dst[j] /= sum;
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  for (auto& v : out.values()) v *= s;
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::uint64_t Rng::next_u64() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::size_t Rng::below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

Tensor rng_normal(Rng& rng, Shape shape, double mean, double std) {
  if (std < 0.0) throw ConfigError("rng_normal: std must be >= 0");
  Tensor out(std::move(shape));
  for (auto& v : out.values()) v = mean + std * rng.normal();
  return out;
}

Tensor rng_uniform(Rng& rng, Shape shape, double lo, double hi) {
  Tensor out(std::move(shape));
  for (auto& v : out.values()) v = rng.uniform(lo, hi);
  return out;
}

}  // namespace spectra
