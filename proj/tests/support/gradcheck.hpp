#pragma once

// Central finite-difference gradient oracle (test-only). Independent of the
// backward closures it audits: it only evaluates forward values.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "pdseg/tensor.hpp"

namespace pdseg::testing {

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Numerical gradient of f w.r.t. inputs[which] by (f(x+h) - f(x-h)) / 2h.
inline std::vector<double> numeric_grad(const ScalarFn& f, const std::vector<Tensor>& inputs,
                                        std::size_t which, double h = 1e-5) {
  std::vector<Tensor> probe;
  for (const Tensor& t : inputs) probe.push_back(t.detach());
  std::vector<double> out(probe[which].numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto x = probe[which].data_mut();
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(probe).item();
    x[i] = orig - h;
    const double fm = f(probe).item();
    x[i] = orig;
    out[i] = (fp - fm) / (2 * h);
  }
  return out;
}

/// Largest |analytic - numeric| over all tracked inputs, relative to the
/// largest numeric gradient magnitude of the same input.
inline double gradcheck(const ScalarFn& f, std::vector<Tensor> inputs, double h = 1e-5) {
  Tensor loss = f(inputs);
  backward(loss);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!inputs[k].requires_grad()) continue;
    const auto num = numeric_grad(f, inputs, k, h);
    const auto ana = inputs[k].grad();
    double scale = 1e-8, err = 0.0;
    for (std::size_t i = 0; i < num.size(); ++i) {
      scale = std::max(scale, std::fabs(num[i]));
      err = std::max(err, std::fabs(num[i] - ana[i]));
    }
    worst = std::max(worst, err / scale);
  }
  return worst;
}

}  // namespace pdseg::testing
