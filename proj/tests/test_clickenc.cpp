#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "pdseg/clickenc.hpp"
#include "pdseg/errors.hpp"
#include "support/oracles.hpp"

using namespace pdseg;
using namespace pdseg::click;

TEST_CASE("click distance map values") {
  Tensor raw = click_distance_map({0, 0}, 8, 8, ClickNorm::raw);
  CHECK(raw.at({3, 4}) == 5.0);
  CHECK(raw.at({0, 0}) == 0.0);
  Tensor norm = click_distance_map({0, 0}, 6, 8);
  CHECK(norm.at({5, 7}) == doctest::Approx(std::sqrt(25.0 + 49.0) / 10.0));
  CHECK_THROWS_AS(click_distance_map({4, 0}, 4, 4), BoundsError);
  CHECK_THROWS_AS(click_distance_map({0, 9}, 4, 9), BoundsError);
}

TEST_CASE("click distance map equals brute force on a 4x4 grid") {
  const Click p{1, 2};
  Tensor d = click_distance_map(p, 4, 4, ClickNorm::raw);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const double di = double(i) - 1, dj = double(j) - 2;
      CHECK(d.at({i, j}) == std::sqrt(di * di + dj * dj));
    }
}

TEST_CASE("click map minimum is attained exactly at the click") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 20; ++t) {
    const std::size_t h = 5 + rng() % 20, w = 5 + rng() % 20;
    const Click p{rng() % h, rng() % w};
    Tensor d = click_distance_map(p, h, w);
    const auto v = d.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      CHECK(v[i] >= 0.0);
      CHECK(v[i] <= 1.0);
      if (i != p.row * w + p.col) CHECK(v[i] > 0.0);
    }
    CHECK(d.at({p.row, p.col}) == 0.0);
  }
}

TEST_CASE("1d squared distance transform matches brute force") {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + rng() % 40;
    std::vector<double> f(n), out(n);
    for (double& x : f) x = (rng() % 3 == 0) ? 0.0 : 1e20;
    f[rng() % n] = 0.0;
    squared_distance_1d(f, out);
    for (std::size_t q = 0; q < n; ++q) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t p = 0; p < n; ++p) {
        const double d = double(q) - double(p);
        best = std::min(best, d * d + f[p]);
      }
      CHECK(out[q] == best);
    }
  }
}

TEST_CASE("edt border ring convention") {
  Tensor full({3, 3}, 1.0);
  Tensor d = edt_binary(full);
  CHECK(d.at({1, 1}) == 2.0);
  CHECK(d.at({0, 0}) == 1.0);
  CHECK(d.at({0, 1}) == 1.0);
  Tensor single({5, 5}, 0.0);
  single.data_mut()[12] = 1.0;
  CHECK(edt_binary(single).at({2, 2}) == 1.0);
  CHECK_THROWS_AS(edt_binary(Tensor({4, 4}, 0.0)), EmptyMaskError);
}

TEST_CASE("edt equals brute-force scan on random masks") {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 25; ++t) {
    Tensor mask = pdseg::testing::random_mask(32, 32, rng, 0.3 + 0.02 * t);
    Tensor fast = edt_binary(mask);
    Tensor slow = pdseg::testing::brute_force_edt(mask);
    const auto a = fast.data(), b = slow.data();
    bool same = true;
    for (std::size_t i = 0; i < a.size(); ++i) same = same && a[i] == b[i];
    CHECK(same);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK((a[i] > 0) == (mask.data()[i] > 0.5));
  }
}

TEST_CASE("sample_click modes") {
  Tensor one({6, 7}, 0.0);
  one.data_mut()[3 * 7 + 4] = 1;
  CHECK(sample_click(one, ClickMode::center) == Click{3, 4});
  CHECK(sample_click(one, ClickMode::uniform, 99) == Click{3, 4});

  // Odd square: unique center.
  Tensor sq({12, 12}, 0.0);
  for (std::size_t i = 3; i < 8; ++i)
    for (std::size_t j = 2; j < 7; ++j) sq.data_mut()[i * 12 + j] = 1;
  CHECK(sample_click(sq, ClickMode::center) == Click{5, 4});
  // Even square: four central pixels tie, smallest (row, col) wins.
  Tensor ev({12, 12}, 0.0);
  for (std::size_t i = 2; i < 8; ++i)
    for (std::size_t j = 4; j < 10; ++j) ev.data_mut()[i * 12 + j] = 1;
  CHECK(sample_click(ev, ClickMode::center) == Click{4, 6});

  std::mt19937_64 rng(3);
  Tensor m = pdseg::testing::random_mask(20, 20, rng, 0.4);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const Click c = sample_click(m, ClickMode::uniform, seed);
    CHECK(c == sample_click(m, ClickMode::uniform, seed));
    CHECK(m.at({c.row, c.col}) == 1.0);
  }
  CHECK_THROWS_AS(sample_click(Tensor({3, 3}, 0.0), ClickMode::uniform), EmptyMaskError);
  CHECK_THROWS_AS(sample_click(Tensor({3, 3}, 0.0), ClickMode::center), EmptyMaskError);
}
