#include "dgm_dte/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace dgm {

void adam_step(ParamStore& store, AdamState& state) {
  if (state.m.empty()) {
    for (const auto& p : store) {
      state.m.emplace_back(p.value.shape(), 0.0);
      state.v.emplace_back(p.value.shape(), 0.0);
    }
  }
  if (state.m.size() != store.size()) throw std::logic_error("adam: state does not match parameter store");
  for (const auto& p : store) {
    if (p.trainable && p.grad.size() != p.value.size()) {
      throw std::runtime_error("adam: missing gradient for parameter '" + p.name + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  std::size_t k = 0;
  for (auto& p : store) {
    auto& m = state.m[k];
    auto& v = state.v[k];
    ++k;
    if (!p.trainable) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p.value[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace dgm
