#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "ktn/error.hpp"
#include "ktn/tensor.hpp"

namespace ktn::nn {

/// A trainable tensor, its gradient, and whether L2 decay applies to it.
struct ParamRef {
  Tensor* value;
  const Tensor* grad;
  bool decay = true;
};

struct AdamState {
  std::int64_t step = 0;
  std::vector<Tensor> m, v;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;  ///< L2 coefficient added to the gradient
};

/// One Adam update; the L2 term weight_decay * w is folded into the gradient
/// before the moment estimates (classic L2, not decoupled decay).
inline void adam_step(std::span<const ParamRef> params, AdamState& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.value->dims());
      state.v.emplace_back(p.value->dims());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam: parameter count changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].value->same_shape(*params[i].grad) ||
        !params[i].value->same_shape(state.m[i])) {
      throw ShapeError("adam: gradient/moment shape mismatch for parameter " +
                       std::to_string(i));
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = *params[i].value;
    const Tensor& g = *params[i].grad;
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const double l2 = params[i].decay ? state.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] + l2 * w[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
      const double mhat = m[j] / bc1, vhat = v[j] / bc2;
      w[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

/// Step schedule: base rate, multiplied by `factor` once `epoch` >= `decay_epoch`
/// (0-based epochs).
struct LrSchedule {
  double base = 1e-3;
  int decay_epoch = 20;
  double factor = 0.1;

  double at(int epoch) const { return epoch >= decay_epoch ? base * factor : base; }
};

}  // namespace ktn::nn
