#pragma once

#include <cstddef>
#include <vector>

#include "pdseg/tensor.hpp"

namespace pdseg {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers per parameter plus the shared step count.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update of every parameter from its current grad.
/// Parameters without a populated grad are treated as having zero gradient.
void adam_step(std::vector<Tensor>& params, AdamState& state, const AdamConfig& cfg);

}  // namespace pdseg
