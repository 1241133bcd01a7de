#pragma once

// Central finite-difference checks for every differentiable operation. Each
// check contracts the operation's output with a random tensor R, perturbs one
// argument along a random direction d, and compares the analytic directional
// derivative <grad, d> with (L(x + h d) - L(x - h d)) / 2h.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ktn/distill.hpp"
#include "ktn/ktn_layer.hpp"
#include "ktn/nn/conv.hpp"
#include "ktn/nn/layers.hpp"
#include "ktn/sphconv.hpp"

namespace ktn::gradcheck {

struct Result {
  std::string op;
  std::string argument;
  int instance = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool pass = false;
};

inline constexpr double kTolerance = 1e-4;

class Checker {
 public:
  explicit Checker(std::uint64_t seed) : rng_(seed) {}

  Tensor randn(std::vector<std::size_t> dims, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Tensor t(std::move(dims));
    for (auto& v : t.values()) v = n(rng_);
    return t;
  }

  std::mt19937_64& rng() { return rng_; }

  /// `loss` must read `arg` through the reference it captured.
  void check(const std::string& op, const std::string& name, int instance, Tensor& arg,
             const Tensor& grad, const std::function<double()>& loss) {
    if (!arg.same_shape(grad)) throw ShapeError(op + ": gradient shape mismatch for " + name);
    const Tensor d = randn(arg.dims());
    double analytic = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) analytic += grad[i] * d[i];
    const Tensor saved = arg;
    const double h = 1e-6;
    for (std::size_t i = 0; i < d.size(); ++i) arg[i] = saved[i] + h * d[i];
    const double lp = loss();
    for (std::size_t i = 0; i < d.size(); ++i) arg[i] = saved[i] - h * d[i];
    const double lm = loss();
    arg = saved;
    const double numeric = (lp - lm) / (2.0 * h);
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    const double rel = std::abs(analytic - numeric) / scale;
    results_.push_back({op, name, instance, analytic, numeric, rel, rel < kTolerance});
  }

  const std::vector<Result>& results() const { return results_; }

 private:
  std::mt19937_64 rng_;
  std::vector<Result> results_;
};

inline double contract(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline void check_conv(Checker& c, int inst) {
  std::uniform_int_distribution<int> pick(0, 2);
  nn::ConvParams p;
  const std::size_t ci = 1 + pick(c.rng()), co = 1 + pick(c.rng());
  const std::size_t kh = 2 * pick(c.rng()) + 1, kw = 2 * pick(c.rng()) + 1;
  p.kernel = c.randn({kh, kw, ci, co});
  p.bias = c.randn({co});
  p.hpad = inst % 2 ? nn::HorizontalPadding::circular : nn::HorizontalPadding::zero;
  p.dilation = 1 + inst % 3;
  Tensor x = c.randn({2, 6, 7, ci});
  const Tensor R = c.randn({2, 6, 7, co});
  const auto g = nn::conv2d_backward(x, p, R);
  auto L = [&] { return contract(nn::conv2d_forward(x, p), R); };
  c.check("conv2d", "input", inst, x, g.input, L);
  c.check("conv2d", "kernel", inst, p.kernel, g.kernel, L);
  c.check("conv2d", "bias", inst, p.bias, g.bias, L);
}

inline void check_relu_pool(Checker& c, int inst) {
  Tensor x = c.randn({2, 7, 6, 3});
  {
    const Tensor R = c.randn(x.dims());
    const Tensor g = nn::relu_backward(x, R);
    c.check("relu", "input", inst, x, g, [&] { return contract(nn::relu_forward(x), R); });
  }
  {
    const auto fwd = nn::maxpool2_forward(x);
    const Tensor R = c.randn(fwd.output.dims());
    const Tensor g = nn::maxpool2_backward(x.dims(), fwd.argmax, R);
    c.check("maxpool2", "input", inst, x, g,
            [&] { return contract(nn::maxpool2_forward(x).output, R); });
  }
  {
    const auto fwd = nn::global_maxpool_forward(x);
    const Tensor R = c.randn(fwd.output.dims());
    const Tensor g = nn::maxpool2_backward(x.dims(), fwd.argmax, R);
    c.check("global_maxpool", "input", inst, x, g,
            [&] { return contract(nn::global_maxpool_forward(x).output, R); });
  }
}

inline void check_dense(Checker& c, int inst) {
  {
    Tensor x = c.randn({4, 5}), w = c.randn({5, 3}), b = c.randn({3});
    const Tensor R = c.randn({4, 3});
    const auto g = nn::linear_backward(x, w, R);
    auto L = [&] { return contract(nn::linear_forward(x, w, b), R); };
    c.check("linear", "input", inst, x, g.input, L);
    c.check("linear", "weight", inst, w, g.weight, L);
    c.check("linear", "bias", inst, b, g.bias, L);
  }
  {
    Tensor x = c.randn({2, 3, 4, 5}), w = c.randn({5, 6}), b = c.randn({6});
    const Tensor R = c.randn({2, 3, 4, 6});
    const auto g = nn::pointwise_backward(x, w, R);
    auto L = [&] { return contract(nn::pointwise_forward(x, w, b), R); };
    c.check("pointwise", "input", inst, x, g.input, L);
    c.check("pointwise", "weight", inst, w, g.weight, L);
    c.check("pointwise", "bias", inst, b, g.bias, L);
  }
  {
    Tensor x = c.randn({2, 5, 4, 3}), k = c.randn({3, 3, 3}), b = c.randn({3});
    const Tensor R = c.randn(x.dims());
    const auto g = nn::depthwise_backward(x, k, R);
    auto L = [&] { return contract(nn::depthwise_forward(x, k, b), R); };
    c.check("depthwise", "input", inst, x, g.input, L);
    c.check("depthwise", "kernel", inst, k, g.kernel, L);
    c.check("depthwise", "bias", inst, b, g.bias, L);
  }
  {
    Tensor z = c.randn({5, 10}, 2.0);
    std::vector<int> labels;
    std::uniform_int_distribution<int> cls(0, 9);
    for (int i = 0; i < 5; ++i) labels.push_back(cls(c.rng()));
    const auto r = nn::softmax_xent(z, labels);
    c.check("softmax_xent", "logits", inst, z, r.grad,
            [&] { return nn::softmax_xent(z, labels).loss; });
  }
}

/// A small row-group table on a 10 x 20 grid with 3-row groups.
inline RowGroupTable small_table() {
  const geometry::GridSpec grid{10, 20};
  return RowGroupTable::build(grid, 3, grid.row_pitch(), 3);
}

inline void check_spherical_conv(Checker& c, int inst) {
  const auto table = small_table();
  const std::size_t ci = 2, co = 3;
  std::vector<TransformedKernel> ks;
  for (std::size_t g = 0; g < table.size(); ++g) {
    const auto& s = table.groups[g].shape;
    ks.push_back({c.randn({static_cast<std::size_t>(s.height), static_cast<std::size_t>(s.width), ci, co}),
                  s.dilation, g});
  }
  Tensor bias = c.randn({co});
  Tensor x = c.randn({2, 10, 20, ci});
  const Tensor R = c.randn({2, 10, 20, co});
  const auto g = spherical_conv_backward(x, table, ks, R, true);
  auto L = [&] { return contract(spherical_conv(x, table, ks, bias), R); };
  c.check("spherical_conv", "input", inst, x, g.input, L);
  c.check("spherical_conv", "bias", inst, bias, g.bias, L);
  for (std::size_t k = 0; k < ks.size(); ++k) {
    c.check("spherical_conv", "kernel[" + std::to_string(k) + "]", inst, ks[k].weights, g.kernels[k], L);
  }
}

/// Randomizes every KTN weight (including the zero-initialized last depthwise)
/// so that the residual path is active in the check.
inline KTNLayer random_ktn(Checker& c, const RowGroupTable& table, std::size_t channels) {
  auto l = KTNLayer::initialize(table, channels, c.rng()());
  for (Tensor* p : l.parameters()) {
    const Tensor noise = c.randn(p->dims(), 0.3);
    *p += noise;
  }
  return l;
}

inline void check_ktn(Checker& c, int inst) {
  const auto table = small_table();
  const std::size_t ci = 3, co = 2;
  auto layer = random_ktn(c, table, ci);
  const Tensor K = c.randn({3, 3, ci, co});
  const std::size_t g = static_cast<std::size_t>(inst) % table.size();
  KtnTrace trace;
  const auto out = ktn_forward(layer, K, g, &trace);
  const Tensor R = c.randn(out.weights.dims());
  KtnGrads grads = zero_grads(layer);
  ktn_backward(layer, K, trace, R, grads);
  auto params = layer.parameters();
  auto L = [&] { return contract(ktn_forward(layer, K, g).weights, R); };
  const auto names = KTNLayer::residual_names();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name =
        i < layer.projections.size() ? "P[" + std::to_string(i) + "]" : names[i - layer.projections.size()];
    c.check("ktn_forward", name, inst, *params[i], grads.params[i], L);
  }
}

inline void check_distill(Checker& c, int inst) {
  {
    const Lattice lat = Lattice::make({4, 8}, 1 + inst % 2);
    Tensor pred = c.randn({2, 4, 8, 3});
    const Tensor target = c.randn(pred.dims());
    const auto r = distill_loss(pred, target, lat);
    c.check("distill_loss", "predicted", inst, pred, r.grad,
            [&] { return distill_loss(pred, target, lat).value; });
  }
  {
    // Full KTN block: KTN -> spherical conv -> pool -> ReLU -> loss.
    const auto table = small_table();
    const std::size_t ci = 2, co = 3;
    auto layer = random_ktn(c, table, ci);
    nn::ConvParams src;
    src.kernel = c.randn({3, 3, ci, co});
    src.bias = c.randn({co}, 0.1);
    const Tensor input = c.randn({2, 10, 20, ci});
    const Lattice lat = Lattice::make({5, 10}, 1);
    const Tensor target = c.randn({2, 5, 10, co});
    const auto pass = ktn_block_forward(layer, src, input);
    const auto loss = distill_loss(pass.output, target, lat);
    const auto grads = ktn_block_backward(layer, src, input, pass, loss.grad);
    auto params = layer.parameters();
    auto L = [&] { return distill_loss(ktn_block_forward(layer, src, input).output, target, lat).value; };
    const auto names = KTNLayer::residual_names();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const std::string name =
          i < layer.projections.size() ? "P[" + std::to_string(i) + "]" : names[i - layer.projections.size()];
      c.check("ktn_block", name, inst, *params[i], grads.params[i], L);
    }
  }
}

/// Runs every check on `instances` random instances.
inline std::vector<Result> run_suite(std::uint64_t seed = 2024, int instances = 5) {
  Checker c(seed);
  for (int i = 0; i < instances; ++i) {
    check_conv(c, i);
    check_relu_pool(c, i);
    check_dense(c, i);
    check_spherical_conv(c, i);
    check_ktn(c, i);
    check_distill(c, i);
  }
  return c.results();
}

}  // namespace ktn::gradcheck
