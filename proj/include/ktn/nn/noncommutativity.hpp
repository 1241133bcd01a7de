#pragma once

#include <functional>
#include <utility>

namespace ktn::nn {

/// Two-layer 1D, size-1-kernel network evaluated at a point that lies between
/// two samples x1, x2 with interpolation weights a, b.
struct NoncommutativityCase {
  double a = 0.5, b = 0.5;
  double x1 = 0.0, x2 = 0.0;
  double w1 = 1.0, w2 = 1.0;
  std::function<double(double)> sigma = [](double z) { return z > 0.0 ? z : 0.0; };
};

struct NoncommutativityResult {
  double interp_first = 0.0;  ///< interpolate inputs, then apply both layers
  double conv_first = 0.0;    ///< apply the first layer per sample, then interpolate
};

inline NoncommutativityResult noncommutativity_demo(const NoncommutativityCase& c) {
  return {c.w2 * c.sigma(c.w1 * (c.a * c.x1 + c.b * c.x2)),
          c.a * c.w2 * c.sigma(c.w1 * c.x1) + c.b * c.w2 * c.sigma(c.w1 * c.x2)};
}

}  // namespace ktn::nn
