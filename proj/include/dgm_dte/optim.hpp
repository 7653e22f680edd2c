#pragma once

#include <cstddef>
#include <vector>

#include "dgm_dte/params.hpp"

namespace dgm {

struct AdamState {
  std::size_t step = 0;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

/// One bias-corrected Adam update over every trainable parameter of `store`.
/// Moment buffers are created on the first call. Throws if a trainable
/// parameter has no gradient buffer.
void adam_step(ParamStore& store, AdamState& state);

}  // namespace dgm
