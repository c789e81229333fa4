#include <doctest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "spectra/errors.hpp"
#include "spectra/tensor.hpp"

using namespace spectra;

TEST_CASE("matmul agrees with a triple loop") {
  oracle::Lcg g(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + g.below(6), k = 1 + g.below(6), n = 1 + g.below(6);
    const Tensor a = oracle::random_tensor(g, {m, k});
    const Tensor b = oracle::random_tensor(g, {k, n});
    const Tensor c = matmul(a, b);
    REQUIRE(c.shape() == Shape{m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
        CHECK(c.at(i, j) == doctest::Approx(acc).epsilon(1e-14));
      }
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  try {
    matmul(Tensor({2, 3}), Tensor({4, 2}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2x3)") != std::string::npos);
    CHECK(msg.find("(4x2)") != std::string::npos);
  }
}

TEST_CASE("reshape keeps data and rejects size changes") {
  Tensor t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const Tensor r = t.reshaped({3, 2});
  CHECK(r.values()[4] == 5.0);
  CHECK_THROWS_AS(t.reshaped({4, 2}), DimensionError);
}

TEST_CASE("transpose twice is the identity") {
  oracle::Lcg g(2);
  const Tensor a = oracle::random_tensor(g, {3, 5});
  CHECK(transpose(transpose(a)) == a);
  CHECK(transpose(a).at(4, 2) == a.at(2, 4));
}

TEST_CASE("softmax rows sum to one and survive large logits") {
  oracle::Lcg g(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = oracle::random_tensor(g, {4, 7}, -800.0, 800.0);
    const Tensor p = softmax_rows(x);
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        CHECK(std::isfinite(p.at(i, j)));
        CHECK(p.at(i, j) >= 0.0);
        s += p.at(i, j);
      }
      CHECK(std::abs(s - 1.0) <= 1e-10);
    }
  }
}

TEST_CASE("softmax rejects NaN") {
  Tensor x({3}, std::vector<double>{0.0, std::nan(""), 1.0});
  CHECK_THROWS_AS(softmax_rows(x), NumericError);
}

TEST_CASE("Rng is reproducible and roughly uniform") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng r(7);
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double v = r.normal();
    sum += v;
    sq += v * v;
  }
  CHECK(std::abs(sum / n) < 0.05);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
  std::set<std::size_t> seen;
  for (int i = 0; i < 200; ++i) {
    const std::size_t v = r.below(5);
    CHECK(v < 5);
    seen.insert(v);
  }
  CHECK(seen.size() == 5);
}

TEST_CASE("rng_normal rejects a negative std") {
  Rng r(0);
  CHECK_THROWS_AS(rng_normal(r, {3}, 0.0, -1.0), ConfigError);
}

TEST_CASE("peak tensor bytes tracks the largest buffer") {
  reset_peak_tensor_bytes();
  { Tensor big({1000}); }
  CHECK(peak_tensor_bytes() >= 1000 * sizeof(double));
  reset_peak_tensor_bytes();
  CHECK(peak_tensor_bytes() == 0);
}

TEST_CASE("matmul small worked products") {
  const Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor b = Tensor::matrix({{3, 4}, {5, 6}});
  CHECK(matmul(eye, b) == b);
  const Tensor c = matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}));
  CHECK(c.shape() == Shape{1, 1});
  CHECK(c[0] == 11.0);

  oracle::Lcg g(17);
  const Tensor x = oracle::random_tensor(g, {5, 7});
  const Tensor y = oracle::random_tensor(g, {7, 3});
  Tensor ref({5, 3});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t p = 0; p < 7; ++p) ref.at(i, j) += x.at(i, p) * y.at(p, j);
  CHECK(max_abs_diff(matmul(x, y), ref) <= 1e-12);
}

TEST_CASE("softmax worked rows") {
  const Tensor u = softmax_rows(Tensor::matrix({{0, 0, 0}}));
  for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(u[j] - 1.0 / 3.0) <= 1e-15);

  const Tensor big = softmax_rows(Tensor::matrix({{1000, 0}}));
  CHECK(big[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(big[1] >= 0.0);
  CHECK(big[1] < 1e-300);

  const Tensor p = softmax_rows(Tensor::matrix({{1, 2, 3}}));
  const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (std::size_t j = 0; j < 3; ++j)
    CHECK(std::abs(p[j] - static_cast<double>(std::exp(static_cast<long double>(j + 1)) / z)) <= 1e-12);
}

TEST_CASE("rng_normal degenerate, deterministic and statistically sound") {
  Rng r(3);
  const Tensor c = rng_normal(r, {4, 5}, 2.5, 0.0);
  for (double v : c.values()) CHECK(v == 2.5);

  Rng a(42), b(42);
  CHECK(rng_normal(a, {3, 3}, 0.0, 1.0) == rng_normal(b, {3, 3}, 0.0, 1.0));

  Rng s(42);
  const Tensor t = rng_normal(s, {100000}, 0.0, 1.0);
  double mean = 0.0;
  for (double v : t.values()) mean += v;
  mean /= 100000.0;
  double var = 0.0;
  for (double v : t.values()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / 100000.0);
  CHECK(std::abs(mean) <= 0.02);
  CHECK(sd >= 0.98);
  CHECK(sd <= 1.02);
}
