#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// Every operation allocates a fresh output; nothing aliases its inputs. When
// any input requires a gradient the output records its inputs and a backward
// closure. Recording order is a global sequence number, and `backward` walks
// the reachable nodes in exact reverse recording order, so gradient
// accumulation is deterministic.
//
// Pixel convention shared by the samplers: pixel centers sit at integer
// coordinates, u runs along width (columns), v along height (rows).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pdseg {

using Shape = std::vector<std::size_t>;

/// f32 tensors keep their values rounded to single precision after every op.
enum class DType { f64, f32 };

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;
  DType dtype() const;
  /// Copy with a different dtype (detached).
  Tensor to(DType dtype) const;

  std::span<const double> data() const;
  /// Mutable access is restricted to leaf tensors (parameters, inputs).
  std::span<double> data_mut();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  Tensor& requires_grad_(bool flag = true);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad();

  /// Same values, no history, no gradient tracking.
  Tensor detach() const;
  bool is_leaf() const;
  std::uint64_t sequence() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

using BackwardFn = std::function<void(Node& self)>;

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  DType dtype = DType::f64;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  double* grad_ptr() { return grad.empty() ? nullptr : grad.data(); }
};

/// Build an op output. Gradient history is attached only when some input
/// tracks gradients; `fn` then receives the output node during backward and
/// must accumulate into `self.inputs[i]->grad` for inputs that require grad.
Tensor make_result(Shape shape, std::vector<double> values,
                   const std::vector<const Tensor*>& inputs, BackwardFn fn);

}  // namespace detail

// ---- elementwise ---------------------------------------------------------

enum class Elementwise { add, sub, mul, div, log, exp, abs, pow_const, sigmoid, relu, clamp };

/// Trailing-dimension broadcast of two shapes; throws BroadcastError.
Shape broadcast_shapes(const Shape& a, const Shape& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Zero denominators under gradient tracking yield IEEE inf/nan and record a
/// numeric warning.
Tensor div(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
Tensor neg(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor pow(const Tensor& a, double exponent);
Tensor sigmoid(const Tensor& a);
/// Subgradient at 0 is 0.
Tensor relu(const Tensor& a);
/// Gradient is 1 strictly inside [lo, hi] and at the bounds, 0 outside.
Tensor clamp(const Tensor& a, double lo, double hi);

/// Dispatch by kind; `b` is ignored for unary kinds, `param` feeds
/// pow_const (exponent) and clamp (lo, hi).
Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor* b = nullptr,
                   double param0 = 0.0, double param1 = 0.0);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, double b) { return add(a, -b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, b); }
inline Tensor operator*(double a, const Tensor& b) { return mul(b, a); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
/// c - a
Tensor rsub(double c, const Tensor& a);

// ---- reductions and layout ------------------------------------------------

enum class Reduce { sum, mean };

/// Reduce over `axes` (empty = all axes).
Tensor reduce(Reduce kind, const Tensor& a, std::vector<std::size_t> axes = {},
              bool keepdim = false);
inline Tensor sum(const Tensor& a, std::vector<std::size_t> axes = {}, bool keepdim = false) {
  return reduce(Reduce::sum, a, std::move(axes), keepdim);
}
inline Tensor mean(const Tensor& a, std::vector<std::size_t> axes = {}, bool keepdim = false) {
  return reduce(Reduce::mean, a, std::move(axes), keepdim);
}

Tensor reshape(const Tensor& a, Shape shape);
/// Half-open range [begin, end) along `axis`.
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& tensors, std::size_t axis);

// ---- image ops ------------------------------------------------------------

/// Cross-correlation of input [N,C,H,W] with weight [F,C,k,k] (k odd), zero
/// padding. `bias` may be undefined.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::size_t stride = 1, std::size_t pad = 0);

/// Average pooling over k x k windows on [N,C,H,W]; padded cells count as
/// zeros in the average.
Tensor avg_pool2d(const Tensor& a, std::size_t k, std::size_t stride, std::size_t pad = 0);

/// Bilinear upsampling of [N,C,H,W] by an integer factor. Output pixel o maps
/// to source coordinate (o + 0.5) / factor - 0.5, clamped to the border.
Tensor upsample_bilinear(const Tensor& a, std::size_t factor);

struct GridSampleResult {
  Tensor output;  ///< [N,C,H',W']
  Tensor valid;   ///< [N,H',W'] 1 where the coordinate lies inside the source
};

/// Bilinear sampling of src [N,C,H,W] at coords [N,H',W',2] holding (u, v)
/// in source pixel units. Coordinates outside [0,W-1] x [0,H-1] (beyond a
/// 1e-6 pixel slack, within which they clamp to the border) yield 0 and are
/// flagged invalid. Differentiable w.r.t. src and coords.
GridSampleResult grid_sample(const Tensor& src, const Tensor& coords);

// ---- autodiff -------------------------------------------------------------

/// Reverse pass from a scalar. Resets, then fills, the grad of every reachable
/// tensor that requires gradients.
void backward(const Tensor& loss);

}  // namespace pdseg
