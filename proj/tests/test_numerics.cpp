#include "doctest.h"

#include <array>
#include <cmath>
#include <numbers>

#include "tsae/numerics.hpp"
#include "tsae/rng.hpp"

using namespace tsae;

namespace {

template <typename T>
BasicMatrix<T> random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  BasicMatrix<T> m(r, c);
  for (T& v : m.values()) v = static_cast<T>(rng.normal());
  return m;
}

template <typename T>
double max_rel_diff(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  double scale = 0.0, diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max(scale, std::abs(static_cast<double>(b.values()[i])));
    diff = std::max(diff, std::abs(static_cast<double>(a.values()[i]) - b.values()[i]));
  }
  return diff / scale;
}

}  // namespace

TEST_SUITE("numerics") {

TEST_CASE("matmul examples") {
  const auto a = Matrix::from_rows({{1, 2}, {3, 4}});
  const auto b = Matrix::from_rows({{5}, {6}});
  CHECK(matmul(a, b) == Matrix::from_rows({{17}, {39}}));

  const auto m = Matrix::from_rows({{1.5f, -2}, {0.25f, 7}});
  CHECK(matmul(Matrix::identity(2), m) == m);
  CHECK(matmul(Matrix(2, 2), m) == Matrix(2, 2));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  const Matrix a(2, 3), b(2, 3);
  try {
    (void)matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2x3)") != std::string::npos);
  }
}

TEST_CASE("transposed products agree with explicit transposes") {
  Rng rng(3);
  const auto a = random_matrix<double>(5, 4, rng);
  const auto b = random_matrix<double>(5, 3, rng);
  const auto c = random_matrix<double>(6, 4, rng);
  CHECK(max_rel_diff(matmul_tn(a, b), matmul(transpose(a), b)) < 1e-14);
  CHECK(max_rel_diff(matmul_nt(a, c), matmul(a, transpose(c))) < 1e-14);
}

TEST_CASE("matmul associativity") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_matrix<float>(4, 6, rng);
    const auto b = random_matrix<float>(6, 5, rng);
    const auto c = random_matrix<float>(5, 3, rng);
    CHECK(max_rel_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-4);

    const auto ad = a.cast<double>(), bd = b.cast<double>(), cd = c.cast<double>();
    CHECK(max_rel_diff(matmul(matmul(ad, bd), cd), matmul(ad, matmul(bd, cd))) < 1e-10);
  }
}

TEST_CASE("matmul is bit-reproducible") {
  Rng rng(5);
  const auto a = random_matrix<float>(33, 17, rng);
  const auto b = random_matrix<float>(17, 29, rng);
  CHECK(matmul(a, b) == matmul(a, b));
}

TEST_CASE("cosine of zero vector is zero") {
  const std::array<double, 3> z{0, 0, 0}, x{1, 2, 3};
  CHECK(cosine<double>(z, x) == 0.0);
  CHECK(cosine<double>(x, x) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("adam zero gradient is a no-op") {
  Rng rng(1);
  auto p = random_matrix<float>(3, 4, rng);
  const auto before = p;
  AdamState<float> st(p);
  st.m = random_matrix<float>(3, 4, rng);
  st.v = random_matrix<float>(3, 4, rng);
  for (float& v : st.v.values()) v = std::abs(v);
  st.step = 7;
  adam_step(p, Matrix(3, 4), st, 0.1);
  CHECK(p == before);
  CHECK(st.step == 8);
}

TEST_CASE("adam first step moves by lr against the gradient sign") {
  // m̂ = g, v̂ = g², so the update is lr · g/(|g| + eps).
  MatrixD p(2, 2, 1.0);
  MatrixD g = MatrixD::from_rows({{0.5, 2.0}, {-3.0, 1e-3}});
  AdamState<double> st(p);
  adam_step(p, g, st, 0.01);
  for (std::size_t i = 0; i < 4; ++i) {
    const double gi = g.values()[i];
    const double expect = 1.0 - 0.01 * gi / (std::abs(gi) + 1e-8);
    CHECK(p.values()[i] == doctest::Approx(expect).epsilon(1e-12));
  }
  CHECK(st.step == 1);
}

TEST_CASE("adam second step matches hand evaluation") {
  MatrixD p(1, 1, 0.0);
  AdamState<double> st(p);
  adam_step(p, MatrixD(1, 1, 1.0), st, 0.1);
  adam_step(p, MatrixD(1, 1, 3.0), st, 0.1);
  const double m = 0.9 * 0.1 + 0.1 * 3.0;
  const double v = 0.999 * 0.001 + 0.001 * 9.0;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  const double p1 = -0.1 / (1.0 + 1e-8);
  CHECK(p(0, 0) == doctest::Approx(p1 - 0.1 * mh / (std::sqrt(vh) + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam is deterministic and checks shapes") {
  Rng rng(2);
  const auto g = random_matrix<float>(2, 3, rng);
  auto p1 = random_matrix<float>(2, 3, rng);
  auto p2 = p1;
  AdamState<float> s1(p1), s2(p2);
  adam_step(p1, g, s1, 1e-3);
  adam_step(p2, g, s2, 1e-3);
  CHECK(p1 == p2);
  CHECK(s1.m == s2.m);
  CHECK_THROWS_AS(adam_step(p1, Matrix(3, 2), s1, 1e-3), DimensionError);
}

TEST_CASE("lr_at") {
  CHECK(lr_at(0, 100, 0.5) == 0.5);
  CHECK(lr_at(100, 100, 0.5) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(lr_at(50, 100, 0.5) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK_THROWS_AS(lr_at(101, 100, 0.5), RangeError);
  CHECK_THROWS_AS(lr_at(0, 0, 0.5), RangeError);
  double prev = lr_at(0, 997, 1.0);
  for (std::size_t s = 1; s <= 997; ++s) {
    const double cur = lr_at(s, 997, 1.0);
    CHECK(cur <= prev);
    prev = cur;
  }
}

TEST_CASE("rng golden stream for seed 0") {
  // Produced by an independent Python xoshiro256** with splitmix64 seeding.
  constexpr std::array<std::uint64_t, 16> golden{
      0x99ec5f36cb75f2b4ULL, 0xbf6e1f784956452aULL, 0x1a5f849d4933e6e0ULL, 0x6aa594f1262d2d2cULL,
      0xbba5ad4a1f842e59ULL, 0xffef8375d9ebcacaULL, 0x6c160deed2f54c98ULL, 0x8920ad648fc30a3fULL,
      0xdb032c0ba7539731ULL, 0xeb3a475a3e749a3dULL, 0x1d42993fa43f2a54ULL, 0x11361bf526a14bb5ULL,
      0x1b4f07a5ab3d8e9cULL, 0xa7a3257f6986db7fULL, 0x7efdaa95605dfc9cULL, 0x4bde97c0a78eaab8ULL};
  Rng rng(0);
  for (auto g : golden) CHECK(rng.next_u64() == g);

  std::uint64_t x = 0;
  CHECK(splitmix64(x) == 0xe220a8397b1dcdafULL);

  Rng u(0);
  CHECK(u.uniform() == doctest::Approx(0.6012629994179048).epsilon(1e-16));
}

TEST_CASE("rng derived draws") {
  Rng rng(42);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform();
    CHECK((u >= 0.0 && u < 1.0));
    CHECK(rng.below(7) < 7);
  }
  CHECK_THROWS(rng.below(0));

  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.05);
  CHECK(std::abs(sq / n - 1.0) < 0.05);

  Rng a(9), b(9);
  Rng fa = a.fork(), fb = b.fork();
  CHECK(fa.next_u64() == fb.next_u64());
  CHECK(a.next_u64() == b.next_u64());
}

}  // TEST_SUITE
