#include "pdseg/clickenc.hpp"

#include <cmath>
#include <random>
#include <vector>

#include "pdseg/errors.hpp"

namespace pdseg::click {

namespace {

constexpr double kFar = 1e20;

void check_mask(const Tensor& mask) {
  if (mask.dim() != 2) throw ShapeError("mask must be [H,W], got " + shape_str(mask.shape()));
}

}  // namespace

Tensor click_distance_map(Click p, std::size_t height, std::size_t width, ClickNorm norm) {
  if (p.row >= height || p.col >= width)
    throw BoundsError("click (" + std::to_string(p.row) + "," + std::to_string(p.col) +
                      ") outside " + std::to_string(height) + "x" + std::to_string(width));
  const double scale =
      norm == ClickNorm::diagonal
          ? 1.0 / std::sqrt(static_cast<double>(height * height + width * width))
          : 1.0;
  std::vector<double> d(height * width);
  for (std::size_t i = 0; i < height; ++i)
    for (std::size_t j = 0; j < width; ++j) {
      const double di = static_cast<double>(i) - static_cast<double>(p.row);
      const double dj = static_cast<double>(j) - static_cast<double>(p.col);
      d[i * width + j] = std::sqrt(di * di + dj * dj) * scale;
    }
  return Tensor({height, width}, std::move(d));
}

void squared_distance_1d(std::span<const double> f, std::span<double> out) {
  const std::size_t n = f.size();
  if (n == 0) return;
  std::vector<std::size_t> v(n);   // parabola roots on the envelope
  std::vector<double> z(n + 1);    // envelope boundaries
  std::size_t k = 0;
  v[0] = 0;
  z[0] = -INFINITY;
  z[1] = INFINITY;
  auto sq = [](std::size_t x) { return static_cast<double>(x) * static_cast<double>(x); };
  auto intersect = [&](std::size_t q, std::size_t r) {
    return ((f[q] + sq(q)) - (f[r] + sq(r))) /
           (2.0 * static_cast<double>(q) - 2.0 * static_cast<double>(r));
  };
  for (std::size_t q = 1; q < n; ++q) {
    double s = intersect(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = intersect(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = INFINITY;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double d = static_cast<double>(q) - static_cast<double>(v[k]);
    out[q] = d * d + f[v[k]];
  }
}

Tensor edt_binary(const Tensor& mask) {
  check_mask(mask);
  const std::size_t h = mask.size(0), w = mask.size(1);
  const std::size_t ph = h + 2, pw = w + 2;
  const auto m = mask.data();
  bool any = false;
  std::vector<double> grid(ph * pw, 0.0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      if (m[i * w + j] > 0.5) {
        grid[(i + 1) * pw + j + 1] = kFar;
        any = true;
      }
  if (!any) throw EmptyMaskError("edt_binary on a mask without foreground");

  std::vector<double> line(std::max(ph, pw)), out(std::max(ph, pw));
  for (std::size_t j = 0; j < pw; ++j) {
    for (std::size_t i = 0; i < ph; ++i) line[i] = grid[i * pw + j];
    squared_distance_1d(std::span(line).first(ph), std::span(out).first(ph));
    for (std::size_t i = 0; i < ph; ++i) grid[i * pw + j] = out[i];
  }
  for (std::size_t i = 0; i < ph; ++i) {
    std::span<double> row(grid.data() + i * pw, pw);
    std::copy(row.begin(), row.end(), line.begin());
    squared_distance_1d(std::span(line).first(pw), row);
  }
  std::vector<double> d(h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) d[i * w + j] = std::sqrt(grid[(i + 1) * pw + j + 1]);
  return Tensor({h, w}, std::move(d));
}

Click sample_click(const Tensor& mask, ClickMode mode, std::uint64_t seed) {
  check_mask(mask);
  const std::size_t w = mask.size(1);
  if (mode == ClickMode::center) {
    const Tensor dist = edt_binary(mask);
    const auto d = dist.data();
    std::size_t best = 0;
    for (std::size_t i = 1; i < d.size(); ++i)
      if (d[i] > d[best]) best = i;
    return {best / w, best % w};
  }
  std::vector<std::size_t> fg;
  const auto m = mask.data();
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i] > 0.5) fg.push_back(i);
  if (fg.empty()) throw EmptyMaskError("sample_click on a mask without foreground");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, fg.size() - 1);
  const std::size_t idx = fg[pick(rng)];
  return {idx / w, idx % w};
}

}  // namespace pdseg::click
