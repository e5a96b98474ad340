#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "hran/rng.hpp"

using namespace hran;

TEST_CASE("identical seeds reproduce the sequence exactly") {
  Rng a(123), b(123);
  for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());
  Rng c(123), d(124);
  bool differ = false;
  for (int i = 0; i < 10; ++i) differ = differ || (c.next_u64() != d.next_u64());
  CHECK(differ);
}

TEST_CASE("streams split independent sequences from one seed") {
  Rng a(9, 1), b(9, 2);
  bool differ = false;
  for (int i = 0; i < 10; ++i) differ = differ || (a.next_u64() != b.next_u64());
  CHECK(differ);
}

TEST_CASE("uniform doubles stay in [0,1)") {
  Rng rng(5);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.next_double();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
}

TEST_CASE("gaussian moments at sigma 0.1 over 1e5 draws") {
  Rng rng(77);
  const int n = 100000;
  double mean = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = 0.1 * rng.next_gaussian();
    mean += x;
    sq += x * x;
  }
  mean /= n;
  const double stddev = std::sqrt(sq / n - mean * mean);
  CHECK(std::fabs(mean) < 0.002);
  CHECK(std::fabs(stddev - 0.1) < 0.005);
}

TEST_CASE("gaussian_init") {
  SECTION("same seed gives the identical tensor") {
    Rng a(3), b(3);
    auto t1 = gaussian_init(a, {4, 4}, 0.1);
    auto t2 = gaussian_init(b, {4, 4}, 0.1);
    for (std::size_t i = 0; i < t1.numel(); ++i) REQUIRE(t1[i] == t2[i]);
  }
  SECTION("non-positive sigma is a parameter error") {
    Rng rng(3);
    CHECK_THROWS_AS(gaussian_init(rng, {2}, 0.0), ParameterError);
    CHECK_THROWS_AS(gaussian_init(rng, {2}, -1.0), ParameterError);
  }
  SECTION("vanishing sigma drives every entry to zero") {
    Rng rng(3);
    auto t = gaussian_init(rng, {64}, 1e-300);
    for (auto v : t) CHECK(std::fabs(v) < 1e-290);
  }
}

TEST_CASE("shuffle is a deterministic permutation") {
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<int> w = v;
  Rng a(15), b(15);
  a.shuffle(v);
  b.shuffle(w);
  CHECK(v == w);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
}

TEST_CASE("next_below stays in range") {
  Rng rng(21);
  for (int i = 0; i < 1000; ++i) REQUIRE(rng.next_below(7) < 7);
  CHECK_THROWS_AS(rng.next_below(0), ParameterError);
}
