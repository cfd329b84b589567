#include "pdseg/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "pdseg/errors.hpp"

namespace pdseg {

namespace {

std::atomic<std::uint64_t> g_sequence{1};

std::uint64_t next_sequence() { return g_sequence.fetch_add(1, std::memory_order_relaxed); }

detail::Node& node_of(const Tensor& t) {
  if (!t.defined()) throw ShapeError("use of an undefined tensor");
  return *t.node();
}

void round_to_f32(std::vector<double>& values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

// Flat index into `from` for every flat index of `to`, where `from`
// broadcasts to `to` under trailing-dimension alignment.
std::vector<std::size_t> broadcast_index(const Shape& from, const Shape& to) {
  const std::size_t nd = to.size();
  const std::size_t offset = nd - from.size();
  std::vector<std::size_t> stride(nd, 0);
  std::size_t s = 1;
  for (std::size_t i = from.size(); i-- > 0;) {
    if (from[i] != 1) stride[i + offset] = s;
    s *= from[i];
  }
  const std::size_t total = shape_numel(to);
  std::vector<std::size_t> out(total);
  std::vector<std::size_t> counter(nd, 0);
  std::size_t idx = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    out[flat] = idx;
    for (std::size_t d = nd; d-- > 0;) {
      ++counter[d];
      idx += stride[d];
      if (counter[d] < to[d]) break;
      idx -= stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return out;
}

bool any_f32(const std::vector<const Tensor*>& inputs) {
  for (const Tensor* t : inputs)
    if (t->dtype() == DType::f32) return true;
  return false;
}

void ensure_grad(detail::Node& n) {
  if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), 0.0);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
  node_->seq = next_sequence();
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  if (shape_numel(shape) != values.size())
    throw ShapeError("tensor of shape " + shape_str(shape) + " given " +
                     std::to_string(values.size()) + " values");
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
  node_->seq = next_sequence();
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_of(*this).shape; }

std::size_t Tensor::size(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return node_of(*this).data.size(); }
DType Tensor::dtype() const { return node_of(*this).dtype; }

Tensor Tensor::to(DType dtype) const {
  Tensor out(shape(), std::vector<double>(data().begin(), data().end()));
  out.node_->dtype = dtype;
  if (dtype == DType::f32) round_to_f32(out.node_->data);
  return out;
}

std::span<const double> Tensor::data() const { return node_of(*this).data; }

std::span<double> Tensor::data_mut() {
  detail::Node& n = node_of(*this);
  if (n.backward) throw ShapeError("in-place mutation of a recorded op output");
  return n.data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return data()[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t i = 0;
  for (std::size_t v : index) {
    if (v >= s[i]) throw ShapeError("index out of range for " + shape_str(s));
    flat = flat * s[i] + v;
    ++i;
  }
  return data()[flat];
}

bool Tensor::requires_grad() const { return node_of(*this).requires_grad; }

Tensor& Tensor::requires_grad_(bool flag) {
  detail::Node& n = node_of(*this);
  if (n.backward && !flag) throw ShapeError("cannot stop tracking a recorded op output");
  n.requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const {
  const detail::Node& n = node_of(*this);
  return !n.grad.empty() && n.grad.size() == n.data.size();
}

std::span<const double> Tensor::grad() const { return node_of(*this).grad; }

std::span<double> Tensor::grad_mut() {
  detail::Node& n = node_of(*this);
  ensure_grad(n);
  return n.grad;
}

void Tensor::zero_grad() {
  detail::Node& n = node_of(*this);
  n.grad.assign(n.data.size(), 0.0);
}

Tensor Tensor::detach() const {
  Tensor out(shape(), std::vector<double>(data().begin(), data().end()));
  out.node_->dtype = dtype();
  return out;
}

bool Tensor::is_leaf() const { return !node_of(*this).backward; }
std::uint64_t Tensor::sequence() const { return node_of(*this).seq; }

namespace detail {

Tensor make_result(Shape shape, std::vector<double> values,
                   const std::vector<const Tensor*>& inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->seq = next_sequence();
  if (any_f32(inputs)) {
    node->dtype = DType::f32;
    round_to_f32(node->data);
  }
  bool track = false;
  for (const Tensor* t : inputs) track = track || t->requires_grad();
  if (track) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const Tensor* t : inputs) node->inputs.push_back(t->node());
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

// ---- elementwise ----------------------------------------------------------

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1)
      throw BroadcastError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = da == 1 ? db : da;
  }
  return out;
}

namespace {

enum class BinOp { add, sub, mul, div };

Tensor binary(BinOp op, const Tensor& a, const Tensor& b) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  const std::size_t n = shape_numel(out_shape);
  const bool direct_a = a.shape() == out_shape;
  const bool direct_b = b.shape() == out_shape;
  auto ia = std::make_shared<std::vector<std::size_t>>();
  auto ib = std::make_shared<std::vector<std::size_t>>();
  if (!direct_a) *ia = broadcast_index(a.shape(), out_shape);
  if (!direct_b) *ib = broadcast_index(b.shape(), out_shape);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(n);
  bool zero_den = false;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = ad[direct_a ? i : (*ia)[i]];
    const double y = bd[direct_b ? i : (*ib)[i]];
    switch (op) {
      case BinOp::add: out[i] = x + y; break;
      case BinOp::sub: out[i] = x - y; break;
      case BinOp::mul: out[i] = x * y; break;
      case BinOp::div:
        if (y == 0.0) zero_den = true;
        out[i] = x / y;
        break;
    }
  }
  if (zero_den && (a.requires_grad() || b.requires_grad()))
    record_numeric_warning("div: zero denominator under gradient tracking");

  return detail::make_result(
      out_shape, std::move(out), {&a, &b},
      [op, n, direct_a, direct_b, ia, ib](detail::Node& self) {
        detail::Node& na = *self.inputs[0];
        detail::Node& nb = *self.inputs[1];
        const double* g = self.grad.data();
        if (na.requires_grad) {
          ensure_grad(na);
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t ja = direct_a ? i : (*ia)[i];
            const std::size_t jb = direct_b ? i : (*ib)[i];
            double d = 0.0;
            switch (op) {
              case BinOp::add:
              case BinOp::sub: d = g[i]; break;
              case BinOp::mul: d = g[i] * nb.data[jb]; break;
              case BinOp::div: d = g[i] / nb.data[jb]; break;
            }
            na.grad[ja] += d;
          }
        }
        if (nb.requires_grad) {
          ensure_grad(nb);
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t ja = direct_a ? i : (*ia)[i];
            const std::size_t jb = direct_b ? i : (*ib)[i];
            double d = 0.0;
            switch (op) {
              case BinOp::add: d = g[i]; break;
              case BinOp::sub: d = -g[i]; break;
              case BinOp::mul: d = g[i] * na.data[ja]; break;
              case BinOp::div: {
                const double y = nb.data[jb];
                d = -g[i] * na.data[ja] / (y * y);
                break;
              }
            }
            nb.grad[jb] += d;
          }
        }
      });
}

// Unary op where the derivative is expressed through input x and output y.
template <class F, class D>
Tensor unary(const Tensor& a, F value, D deriv) {
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = value(ad[i]);
  return detail::make_result(a.shape(), std::move(out), {&a}, [deriv](detail::Node& self) {
    detail::Node& na = *self.inputs[0];
    ensure_grad(na);
    for (std::size_t i = 0; i < self.data.size(); ++i)
      na.grad[i] += self.grad[i] * deriv(na.data[i], self.data[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(BinOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinOp::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(BinOp::div, a, b); }

Tensor add(const Tensor& a, double b) {
  return unary(a, [b](double x) { return x + b; }, [](double, double) { return 1.0; });
}
Tensor mul(const Tensor& a, double b) {
  return unary(a, [b](double x) { return x * b; }, [b](double, double) { return b; });
}
Tensor neg(const Tensor& a) { return mul(a, -1.0); }
Tensor rsub(double c, const Tensor& a) {
  return unary(a, [c](double x) { return c - x; }, [](double, double) { return -1.0; });
}
Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
Tensor abs(const Tensor& a) {
  return unary(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}
Tensor pow(const Tensor& a, double p) {
  return unary(
      a, [p](double x) { return std::pow(x, p); },
      [p](double x, double) { return p * std::pow(x, p - 1.0); });
}
Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}
Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}
Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor* b, double p0, double p1) {
  auto need_b = [&]() -> const Tensor& {
    if (!b) throw ShapeError("binary elementwise op needs two operands");
    return *b;
  };
  switch (kind) {
    case Elementwise::add: return add(a, need_b());
    case Elementwise::sub: return sub(a, need_b());
    case Elementwise::mul: return mul(a, need_b());
    case Elementwise::div: return div(a, need_b());
    case Elementwise::log: return log(a);
    case Elementwise::exp: return exp(a);
    case Elementwise::abs: return abs(a);
    case Elementwise::pow_const: return pow(a, p0);
    case Elementwise::sigmoid: return sigmoid(a);
    case Elementwise::relu: return relu(a);
    case Elementwise::clamp: return clamp(a, p0, p1);
  }
  throw ShapeError("unknown elementwise op");
}

// ---- reductions and layout --------------------------------------------------

Tensor reduce(Reduce kind, const Tensor& a, std::vector<std::size_t> axes, bool keepdim) {
  const Shape& in_shape = a.shape();
  const std::size_t nd = in_shape.size();
  std::vector<bool> reduced(nd, axes.empty());
  for (std::size_t ax : axes) {
    if (ax >= nd)
      throw ShapeError("reduce axis " + std::to_string(ax) + " out of range for " +
                       shape_str(in_shape));
    reduced[ax] = true;
  }
  Shape keep_shape(nd);
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t d = 0; d < nd; ++d) {
    keep_shape[d] = reduced[d] ? 1 : in_shape[d];
    if (reduced[d]) count *= in_shape[d];
    if (!reduced[d] || keepdim) out_shape.push_back(keep_shape[d]);
  }
  auto map = std::make_shared<std::vector<std::size_t>>(broadcast_index(keep_shape, in_shape));
  const double scale = kind == Reduce::mean ? 1.0 / static_cast<double>(count) : 1.0;
  const auto ad = a.data();
  std::vector<double> out(shape_numel(keep_shape), 0.0);
  for (std::size_t i = 0; i < ad.size(); ++i) out[(*map)[i]] += ad[i];
  if (scale != 1.0)
    for (double& v : out) v *= scale;
  return detail::make_result(out_shape, std::move(out), {&a}, [map, scale](detail::Node& self) {
    detail::Node& na = *self.inputs[0];
    ensure_grad(na);
    for (std::size_t i = 0; i < na.data.size(); ++i) na.grad[i] += self.grad[(*map)[i]] * scale;
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result(std::move(shape), std::move(out), {&a}, [](detail::Node& self) {
    detail::Node& na = *self.inputs[0];
    ensure_grad(na);
    for (std::size_t i = 0; i < na.data.size(); ++i) na.grad[i] += self.grad[i];
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (axis >= s.size())
    throw ShapeError("slice axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  if (begin >= end || end > s[axis])
    throw ShapeError("slice range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t len = end - begin;
  const std::size_t full = s[axis];
  Shape out_shape = s;
  out_shape[axis] = len;
  const auto ad = a.data();
  std::vector<double> out(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>((o * full + begin) * inner), len * inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  return detail::make_result(out_shape, std::move(out), {&a},
                             [outer, inner, len, full, begin](detail::Node& self) {
                               detail::Node& na = *self.inputs[0];
                               ensure_grad(na);
                               for (std::size_t o = 0; o < outer; ++o) {
                                 const double* g = self.grad.data() + o * len * inner;
                                 double* dst = na.grad.data() + (o * full + begin) * inner;
                                 for (std::size_t i = 0; i < len * inner; ++i) dst[i] += g[i];
                               }
                             });
}

Tensor concat(const std::vector<Tensor>& tensors, std::size_t axis) {
  if (tensors.empty()) throw ShapeError("concat of zero tensors");
  const Shape& s0 = tensors[0].shape();
  if (axis >= s0.size())
    throw ShapeError("concat axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const Tensor& t : tensors) {
    const Shape& s = t.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
    if (!ok) throw ShapeError("concat shape mismatch: " + shape_str(s0) + " vs " + shape_str(s));
    lens.push_back(s[axis]);
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  Shape out_shape = s0;
  out_shape[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    const auto d = tensors[k].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(o * lens[k] * inner), lens[k] * inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * inner));
    offset += lens[k];
  }
  std::vector<const Tensor*> inputs;
  for (const Tensor& t : tensors) inputs.push_back(&t);
  return detail::make_result(out_shape, std::move(out), inputs,
                             [outer, inner, total, lens](detail::Node& self) {
                               std::size_t offset = 0;
                               for (std::size_t k = 0; k < lens.size(); ++k) {
                                 detail::Node& nk = *self.inputs[k];
                                 if (nk.requires_grad) {
                                   ensure_grad(nk);
                                   for (std::size_t o = 0; o < outer; ++o) {
                                     const double* g =
                                         self.grad.data() + (o * total + offset) * inner;
                                     double* dst = nk.grad.data() + o * lens[k] * inner;
                                     for (std::size_t i = 0; i < lens[k] * inner; ++i)
                                       dst[i] += g[i];
                                   }
                                 }
                                 offset += lens[k];
                               }
                             });
}

// ---- convolution ------------------------------------------------------------

namespace {

struct ConvGeom {
  std::size_t n, c, h, w, f, k, stride, pad, ho, wo;
  std::size_t ckk() const { return c * k * k; }
  std::size_t hw_out() const { return ho * wo; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// Output columns [lo, hi) whose input column ox*stride + kx - pad is inside.
void valid_cols(const ConvGeom& g, std::size_t kx, std::size_t& lo, std::size_t& hi) {
  const auto s = static_cast<std::ptrdiff_t>(g.stride);
  const auto off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.pad);
  const auto wo = static_cast<std::ptrdiff_t>(g.wo), w = static_cast<std::ptrdiff_t>(g.w);
  std::ptrdiff_t a = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t b = (w - 1 - off) < 0 ? 0 : (w - 1 - off) / s + 1;
  a = std::min(a, wo);
  b = std::clamp(b, a, wo);
  lo = static_cast<std::size_t>(a);
  hi = static_cast<std::size_t>(b);
}

// cols[(ci*k + ky)*k + kx][oy*wo + ox] = input[ci][oy*s + ky - p][ox*s + kx - p]
void im2col(const ConvGeom& g, const double* in, double* cols) {
  const std::size_t hw = g.hw_out();
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((ci * g.k + ky) * g.k + kx) * hw;
        const double* plane = in + ci * g.h * g.w;
        std::size_t lo, hi;
        valid_cols(g, kx, lo, hi);
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.pad);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill_n(dst, g.wo, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * g.w;
          std::fill_n(dst, lo, 0.0);
          if (g.stride == 1) {
            std::copy_n(src + (static_cast<std::ptrdiff_t>(lo) + shift), hi - lo, dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox)
              dst[ox] = src[static_cast<std::ptrdiff_t>(ox * g.stride) + shift];
          }
          std::fill_n(dst + hi, g.wo - hi, 0.0);
        }
      }
}

void col2im(const ConvGeom& g, const double* cols, double* in_grad) {
  const std::size_t hw = g.hw_out();
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((ci * g.k + ky) * g.k + kx) * hw;
        double* plane = in_grad + ci * g.h * g.w;
        std::size_t lo, hi;
        valid_cols(g, kx, lo, hi);
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.pad);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = plane + static_cast<std::size_t>(iy) * g.w;
          const double* src = row + oy * g.wo;
          for (std::size_t ox = lo; ox < hi; ++ox)
            dst[static_cast<std::ptrdiff_t>(ox * g.stride) + shift] += src[ox];
        }
      }
}

}  // namespace

namespace {
// Single-threaded GEMM keeps summation order, and so results, reproducible.
[[maybe_unused]] const bool kBlasSingleThread = (openblas_set_num_threads(1), true);
}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t pad) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  if (is.size() != 4 || ws.size() != 4)
    throw ShapeError("conv2d expects input [N,C,H,W] and weight [F,C,k,k], got " + shape_str(is) +
                     " and " + shape_str(ws));
  if (ws[1] != is[1])
    throw ShapeError("conv2d channel mismatch: input " + shape_str(is) + ", weight " +
                     shape_str(ws));
  if (ws[2] != ws[3] || ws[2] % 2 == 0) throw ShapeError("conv2d kernel must be square and odd");
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != ws[0]))
    throw ShapeError("conv2d bias shape " + shape_str(bias.shape()) + " does not match filters");
  ConvGeom g{is[0], is[1], is[2], is[3], ws[0], ws[2], stride, pad, 0, 0};
  if (g.h + 2 * pad < g.k || g.w + 2 * pad < g.k ||
      (g.h + 2 * pad - g.k) % stride != 0 || (g.w + 2 * pad - g.k) % stride != 0)
    throw ShapeError("conv2d output extent not integral for input " + shape_str(is) + ", k=" +
                     std::to_string(g.k) + ", stride=" + std::to_string(stride) +
                     ", pad=" + std::to_string(pad));
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;

  const std::size_t hw = g.hw_out();
  const std::size_t ckk = g.ckk();
  std::vector<double> out(g.n * g.f * hw);
  std::vector<double> cols(g.pointwise() ? 0 : ckk * hw);
  const double* in = input.data().data();
  const double* wt = weight.data().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    const double* in_n = in + n * g.c * g.h * g.w;
    const double* b = in_n;
    if (!g.pointwise()) {
      im2col(g, in_n, cols.data());
      b = cols.data();
    }
    double* out_n = out.data() + n * g.f * hw;
    if (bias.defined()) {
      const auto bd = bias.data();
      for (std::size_t f = 0; f < g.f; ++f) std::fill_n(out_n + f * hw, hw, bd[f]);
    }
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(g.f),
                static_cast<int>(hw), static_cast<int>(ckk), 1.0, wt, static_cast<int>(ckk), b,
                static_cast<int>(hw), bias.defined() ? 1.0 : 0.0, out_n, static_cast<int>(hw));
  }

  std::vector<const Tensor*> inputs{&input, &weight};
  if (bias.defined()) inputs.push_back(&bias);
  return detail::make_result(
      {g.n, g.f, g.ho, g.wo}, std::move(out), inputs, [g](detail::Node& self) {
        detail::Node& ni = *self.inputs[0];
        detail::Node& nw = *self.inputs[1];
        detail::Node* nb = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
        const std::size_t hw = g.hw_out();
        const std::size_t ckk = g.ckk();
        std::vector<double> cols(g.pointwise() ? 0 : ckk * hw);
        std::vector<double> dcols(g.pointwise() ? 0 : ckk * hw);
        if (ni.requires_grad) ensure_grad(ni);
        if (nw.requires_grad) ensure_grad(nw);
        if (nb && nb->requires_grad) ensure_grad(*nb);
        for (std::size_t n = 0; n < g.n; ++n) {
          const double* dout = self.grad.data() + n * g.f * hw;
          const double* in_n = ni.data.data() + n * g.c * g.h * g.w;
          if (nw.requires_grad) {
            const double* b = in_n;
            if (!g.pointwise()) {
              im2col(g, in_n, cols.data());
              b = cols.data();
            }
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(g.f),
                        static_cast<int>(ckk), static_cast<int>(hw), 1.0, dout,
                        static_cast<int>(hw), b, static_cast<int>(hw), 1.0, nw.grad.data(),
                        static_cast<int>(ckk));
          }
          if (ni.requires_grad) {
            double* gin = ni.grad.data() + n * g.c * g.h * g.w;
            if (g.pointwise()) {
              cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(ckk),
                          static_cast<int>(hw), static_cast<int>(g.f), 1.0, nw.data.data(),
                          static_cast<int>(ckk), dout, static_cast<int>(hw), 1.0, gin,
                          static_cast<int>(hw));
            } else {
              cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(ckk),
                          static_cast<int>(hw), static_cast<int>(g.f), 1.0, nw.data.data(),
                          static_cast<int>(ckk), dout, static_cast<int>(hw), 0.0, dcols.data(),
                          static_cast<int>(hw));
              col2im(g, dcols.data(), gin);
            }
          }
          if (nb && nb->requires_grad)
            for (std::size_t f = 0; f < g.f; ++f) {
              double s = 0.0;
              for (std::size_t i = 0; i < hw; ++i) s += dout[f * hw + i];
              nb->grad[f] += s;
            }
        }
      });
}

// ---- pooling and resampling ---------------------------------------------------

Tensor avg_pool2d(const Tensor& a, std::size_t k, std::size_t stride, std::size_t pad) {
  const Shape& s = a.shape();
  if (s.size() != 4) throw ShapeError("avg_pool2d expects [N,C,H,W], got " + shape_str(s));
  if (k == 0 || stride == 0) throw ShapeError("avg_pool2d needs positive k and stride");
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  if (h + 2 * pad < k || w + 2 * pad < k) throw ShapeError("avg_pool2d window larger than input");
  const std::size_t ho = (h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (w + 2 * pad - k) / stride + 1;
  const double inv = 1.0 / static_cast<double>(k * k);
  const auto ad = a.data();
  std::vector<double> out(planes * ho * wo, 0.0);
  auto for_window = [=](std::size_t oy, std::size_t ox, auto&& fn) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      const std::ptrdiff_t iy =
          static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
      if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
      for (std::size_t kx = 0; kx < k; ++kx) {
        const std::ptrdiff_t ix =
            static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
        fn(static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix));
      }
    }
  };
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for_window(oy, ox, [&](std::size_t i) { acc += ad[p * h * w + i]; });
        out[(p * ho + oy) * wo + ox] = acc * inv;
      }
  Shape out_shape{s[0], s[1], ho, wo};
  return detail::make_result(out_shape, std::move(out), {&a},
                             [=](detail::Node& self) {
                               detail::Node& na = *self.inputs[0];
                               ensure_grad(na);
                               for (std::size_t p = 0; p < planes; ++p)
                                 for (std::size_t oy = 0; oy < ho; ++oy)
                                   for (std::size_t ox = 0; ox < wo; ++ox) {
                                     const double gv = self.grad[(p * ho + oy) * wo + ox] * inv;
                                     for_window(oy, ox, [&](std::size_t i) {
                                       na.grad[p * h * w + i] += gv;
                                     });
                                   }
                             });
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> upsample_taps(std::size_t in, std::size_t factor) {
  std::vector<Tap> taps(in * factor);
  const double f = static_cast<double>(factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / f - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& a, std::size_t factor) {
  const Shape& s = a.shape();
  if (s.size() != 4) throw ShapeError("upsample_bilinear expects [N,C,H,W], got " + shape_str(s));
  if (factor == 0) throw ShapeError("upsample factor must be positive");
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  const std::size_t ho = h * factor, wo = w * factor;
  auto ty = std::make_shared<std::vector<Tap>>(upsample_taps(h, factor));
  auto tx = std::make_shared<std::vector<Tap>>(upsample_taps(w, factor));
  const auto ad = a.data();
  std::vector<double> out(planes * ho * wo);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = ad.data() + p * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const Tap& y = (*ty)[oy];
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const Tap& x = (*tx)[ox];
        const double top = src[y.i0 * w + x.i0] * (1 - x.w1) + src[y.i0 * w + x.i1] * x.w1;
        const double bot = src[y.i1 * w + x.i0] * (1 - x.w1) + src[y.i1 * w + x.i1] * x.w1;
        out[(p * ho + oy) * wo + ox] = top * (1 - y.w1) + bot * y.w1;
      }
    }
  }
  return detail::make_result({s[0], s[1], ho, wo}, std::move(out), {&a},
                             [=](detail::Node& self) {
                               detail::Node& na = *self.inputs[0];
                               ensure_grad(na);
                               for (std::size_t p = 0; p < planes; ++p) {
                                 double* dst = na.grad.data() + p * h * w;
                                 for (std::size_t oy = 0; oy < ho; ++oy) {
                                   const Tap& y = (*ty)[oy];
                                   for (std::size_t ox = 0; ox < wo; ++ox) {
                                     const Tap& x = (*tx)[ox];
                                     const double gv = self.grad[(p * ho + oy) * wo + ox];
                                     dst[y.i0 * w + x.i0] += gv * (1 - y.w1) * (1 - x.w1);
                                     dst[y.i0 * w + x.i1] += gv * (1 - y.w1) * x.w1;
                                     dst[y.i1 * w + x.i0] += gv * y.w1 * (1 - x.w1);
                                     dst[y.i1 * w + x.i1] += gv * y.w1 * x.w1;
                                   }
                                 }
                               }
                             });
}

// Round-off from normalized-to-pixel conversion can push border samples a
// hair outside the valid range.
constexpr double kBorderSlack = 1e-6;

GridSampleResult grid_sample(const Tensor& src, const Tensor& coords) {
  const Shape& ss = src.shape();
  const Shape& cs = coords.shape();
  if (ss.size() != 4 || cs.size() != 4 || cs[3] != 2 || cs[0] != ss[0])
    throw ShapeError("grid_sample expects src [N,C,H,W] and coords [N,H',W',2], got " +
                     shape_str(ss) + " and " + shape_str(cs));
  const std::size_t n = ss[0], c = ss[1], h = ss[2], w = ss[3];
  const std::size_t ho = cs[1], wo = cs[2];
  const std::size_t hw_out = ho * wo;
  const auto sd = src.data();
  const auto cd = coords.data();

  // Per output location: corner indices and fractional offsets; x0 < 0 marks
  // an invalid (out-of-range) location.
  struct Cell {
    std::ptrdiff_t x0 = -1;
    std::size_t y0 = 0, x1 = 0, y1 = 0;
    double fx = 0, fy = 0;
  };
  auto cells = std::make_shared<std::vector<Cell>>(n * hw_out);
  std::vector<double> valid(n * hw_out, 0.0);
  for (std::size_t i = 0; i < n * hw_out; ++i) {
    double u = cd[2 * i];
    double v = cd[2 * i + 1];
    const double umax = static_cast<double>(w - 1), vmax = static_cast<double>(h - 1);
    if (!(u >= -kBorderSlack && u <= umax + kBorderSlack && v >= -kBorderSlack &&
          v <= vmax + kBorderSlack))
      continue;
    u = std::clamp(u, 0.0, umax);
    v = std::clamp(v, 0.0, vmax);
    Cell& cell = (*cells)[i];
    auto x0 = static_cast<std::size_t>(std::floor(u));
    auto y0 = static_cast<std::size_t>(std::floor(v));
    if (x0 + 1 > w - 1 && w > 1) x0 = w - 2;
    if (y0 + 1 > h - 1 && h > 1) y0 = h - 2;
    cell.x0 = static_cast<std::ptrdiff_t>(x0);
    cell.y0 = y0;
    cell.x1 = std::min(x0 + 1, w - 1);
    cell.y1 = std::min(y0 + 1, h - 1);
    cell.fx = u - static_cast<double>(x0);
    cell.fy = v - static_cast<double>(y0);
    valid[i] = 1.0;
  }
  std::vector<double> out(n * c * hw_out, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* plane = sd.data() + (b * c + ch) * h * w;
      double* dst = out.data() + (b * c + ch) * hw_out;
      for (std::size_t i = 0; i < hw_out; ++i) {
        const Cell& cl = (*cells)[b * hw_out + i];
        if (cl.x0 < 0) continue;
        const auto x0 = static_cast<std::size_t>(cl.x0);
        const double v00 = plane[cl.y0 * w + x0], v01 = plane[cl.y0 * w + cl.x1];
        const double v10 = plane[cl.y1 * w + x0], v11 = plane[cl.y1 * w + cl.x1];
        dst[i] = (1 - cl.fy) * ((1 - cl.fx) * v00 + cl.fx * v01) +
                 cl.fy * ((1 - cl.fx) * v10 + cl.fx * v11);
      }
    }
  GridSampleResult result;
  result.valid = Tensor(Shape{n, ho, wo}, std::move(valid));
  result.output = detail::make_result(
      {n, c, ho, wo}, std::move(out), {&src, &coords},
      [cells, n, c, h, w, hw_out](detail::Node& self) {
        detail::Node& ns = *self.inputs[0];
        detail::Node& nc = *self.inputs[1];
        if (ns.requires_grad) ensure_grad(ns);
        if (nc.requires_grad) ensure_grad(nc);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double* plane = ns.data.data() + (b * c + ch) * h * w;
            const double* g = self.grad.data() + (b * c + ch) * hw_out;
            for (std::size_t i = 0; i < hw_out; ++i) {
              const Cell& cl = (*cells)[b * hw_out + i];
              if (cl.x0 < 0 || g[i] == 0.0) continue;
              const auto x0 = static_cast<std::size_t>(cl.x0);
              if (ns.requires_grad) {
                double* gp = ns.grad.data() + (b * c + ch) * h * w;
                gp[cl.y0 * w + x0] += g[i] * (1 - cl.fy) * (1 - cl.fx);
                gp[cl.y0 * w + cl.x1] += g[i] * (1 - cl.fy) * cl.fx;
                gp[cl.y1 * w + x0] += g[i] * cl.fy * (1 - cl.fx);
                gp[cl.y1 * w + cl.x1] += g[i] * cl.fy * cl.fx;
              }
              if (nc.requires_grad) {
                const double v00 = plane[cl.y0 * w + x0], v01 = plane[cl.y0 * w + cl.x1];
                const double v10 = plane[cl.y1 * w + x0], v11 = plane[cl.y1 * w + cl.x1];
                const double du = (1 - cl.fy) * (v01 - v00) + cl.fy * (v11 - v10);
                const double dv = (1 - cl.fx) * (v10 - v00) + cl.fx * (v11 - v01);
                nc.grad[2 * (b * hw_out + i)] += g[i] * du;
                nc.grad[2 * (b * hw_out + i) + 1] += g[i] * dv;
              }
            }
          }
      });
  return result;
}

// ---- backward -----------------------------------------------------------------

void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw ShapeError("backward needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<detail::Node*> nodes;
  std::vector<detail::Node*> stack{loss.node().get()};
  std::unordered_set<const detail::Node*> seen{stack.back()};
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (const auto& in : n->inputs)
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });
  for (detail::Node* n : nodes) n->grad.assign(n->data.size(), 0.0);
  loss.node()->grad[0] = 1.0;
  for (detail::Node* n : nodes)
    if (n->backward) n->backward(*n);
}

}  // namespace pdseg
