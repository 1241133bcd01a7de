#pragma once

// Kernel transformer for one source layer: a row-group dependent projection P_g
// (taps_g x k^2, shared across channels) resizes every k x k source kernel slice
// to the group's target shape, and a residual branch of two
// ReLU -> pointwise -> ReLU -> depthwise 3x3 blocks refines it. The residual
// weights are shared by all groups and all output channels.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ktn/error.hpp"
#include "ktn/geometry.hpp"
#include "ktn/nn/layers.hpp"
#include "ktn/tensor.hpp"

namespace ktn {

struct RowGroup {
  int first_row = 0;
  int rows = 0;
  double theta = 0.0;  ///< polar angle of the group's center row
  geometry::KernelShape shape;
};

/// Consecutive blocks of `group_rows` rows of a layer grid; the last group takes
/// whatever rows remain.
struct RowGroupTable {
  geometry::GridSpec grid;
  int kernel_side = 5;
  double tangent_spacing = 0.0;
  int group_rows = 5;
  std::vector<RowGroup> groups;

  static RowGroupTable build(const geometry::GridSpec& grid, int k, double tangent_spacing,
                             int group_rows = 5) {
    grid.validate_equirect();
    if (group_rows < 1) throw PreconditionError("group_rows must be >= 1");
    RowGroupTable t{grid, k, tangent_spacing, group_rows, {}};
    for (int r0 = 0; r0 < grid.height; r0 += group_rows) {
      RowGroup g;
      g.first_row = r0;
      g.rows = std::min(group_rows, grid.height - r0);
      g.theta = geometry::kPi * (r0 + 0.5 * g.rows) / grid.height;
      g.shape = geometry::target_kernel_shape(g.theta, k, tangent_spacing, grid);
      t.groups.push_back(g);
    }
    return t;
  }

  std::size_t size() const { return groups.size(); }

  std::size_t group_of(int row) const {
    if (row < 0 || row >= grid.height) {
      throw PreconditionError("row " + std::to_string(row) + " outside the layer grid");
    }
    return static_cast<std::size_t>(row / group_rows);
  }

  const RowGroup& at(std::size_t g) const {
    if (g >= groups.size()) throw PreconditionError("unknown row group " + std::to_string(g));
    return groups[g];
  }

  /// Analytic bilinear projection for group g.
  Tensor analytic_projection(std::size_t g) const {
    const auto& grp = at(g);
    return geometry::projected_kernel_weights(grp.theta, kernel_side, grp.shape, tangent_spacing,
                                              grid);
  }
};

/// A source kernel resampled for one row group.
struct TransformedKernel {
  Tensor weights;  ///< h x w x Cin x Cout
  int dilation = 1;
  std::size_t group = 0;
};

struct KTNLayer {
  RowGroupTable table;
  std::size_t channels = 0;         ///< Cin of the source kernel
  std::vector<Tensor> projections;  ///< per group: taps x k^2
  Tensor pw1, pw1_bias, dw1, dw1_bias;
  Tensor pw2, pw2_bias, dw2, dw2_bias;

  /// Projections start at the analytic solution and the last depthwise kernel
  /// at zero, so a fresh layer reproduces the projected kernels exactly.
  static KTNLayer initialize(RowGroupTable table, std::size_t channels, std::uint64_t seed,
                             double stddev = 0.01) {
    KTNLayer l;
    l.table = std::move(table);
    l.channels = channels;
    for (std::size_t g = 0; g < l.table.size(); ++g) {
      l.projections.push_back(l.table.analytic_projection(g));
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, stddev);
    auto randn = [&](std::vector<std::size_t> dims) {
      Tensor t(std::move(dims));
      for (auto& v : t.values()) v = normal(rng);
      return t;
    };
    l.pw1 = randn({channels, channels});
    l.pw1_bias = Tensor({channels});
    l.dw1 = randn({3, 3, channels});
    l.dw1_bias = Tensor({channels});
    l.pw2 = randn({channels, channels});
    l.pw2_bias = Tensor({channels});
    l.dw2 = Tensor({3, 3, channels});
    l.dw2_bias = Tensor({channels});
    return l;
  }

  int kernel_side() const { return table.kernel_side; }

  /// Projections first (one per group), then the eight residual tensors.
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> p;
    for (auto& t : projections) p.push_back(&t);
    for (Tensor* t : {&pw1, &pw1_bias, &dw1, &dw1_bias, &pw2, &pw2_bias, &dw2, &dw2_bias}) {
      p.push_back(t);
    }
    return p;
  }
  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> p;
    for (auto* t : const_cast<KTNLayer*>(this)->parameters()) p.push_back(t);
    return p;
  }

  static std::vector<std::string> residual_names() {
    return {"pw1", "pw1_bias", "dw1", "dw1_bias", "pw2", "pw2_bias", "dw2", "dw2_bias"};
  }

  /// Whether parameter i (in parameters() order) is a weight that takes the L2
  /// penalty; biases and projections do not.
  bool decays(std::size_t i) const {
    if (i < projections.size()) return false;
    const std::size_t r = i - projections.size();
    return r % 2 == 0;
  }

  void validate() const {
    if (projections.size() != table.size()) throw ShapeError("one projection per row group needed");
    const auto k2 = static_cast<std::size_t>(kernel_side()) * kernel_side();
    for (std::size_t g = 0; g < table.size(); ++g) {
      const std::vector<std::size_t> want{static_cast<std::size_t>(table.groups[g].shape.taps()), k2};
      if (projections[g].dims() != want) {
        throw ShapeError("projection " + std::to_string(g) + " has shape " +
                         projections[g].shape_string());
      }
    }
    const std::size_t c = channels;
    const auto check = [](const Tensor& t, std::vector<std::size_t> d, const char* name) {
      if (t.dims() != d) throw ShapeError(std::string(name) + " has shape " + t.shape_string());
    };
    check(pw1, {c, c}, "pw1");
    check(pw2, {c, c}, "pw2");
    check(dw1, {3, 3, c}, "dw1");
    check(dw2, {3, 3, c}, "dw2");
    for (const Tensor* b : {&pw1_bias, &pw2_bias, &dw1_bias, &dw2_bias}) check(*b, {c}, "bias");
  }
};

namespace detail {

/// K (k x k x Cin x Cout) reshaped so that slice o is a k x k x Cin image: Cout x k x k x Cin.
inline Tensor kernel_as_images(const Tensor& kernel) {
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1), ci = kernel.dim(2), co = kernel.dim(3);
  Tensor out({co, kh, kw, ci});
  for (std::size_t t = 0; t < kh * kw; ++t)
    for (std::size_t c = 0; c < ci; ++c)
      for (std::size_t o = 0; o < co; ++o) out[(o * kh * kw + t) * ci + c] = kernel[(t * ci + c) * co + o];
  return out;
}

/// Inverse of kernel_as_images.
inline Tensor images_as_kernel(const Tensor& images) {
  const std::size_t co = images.dim(0), kh = images.dim(1), kw = images.dim(2), ci = images.dim(3);
  Tensor out({kh, kw, ci, co});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t t = 0; t < kh * kw; ++t)
      for (std::size_t c = 0; c < ci; ++c) out[(t * ci + c) * co + o] = images[(o * kh * kw + t) * ci + c];
  return out;
}

}  // namespace detail

/// Intermediates of one ktn_forward, retained for ktn_backward.
struct KtnTrace {
  std::size_t group = 0;
  Tensor shortcut;  ///< Cout x h x w x Cin, projected kernel images
  Tensor b1, d1, b2;  ///< pre-activation values inside the residual blocks
  Tensor a1, c1, a2, c2;  ///< post-ReLU inputs to the pointwise/depthwise convs
};

inline void check_source_kernel(const KTNLayer& layer, const Tensor& kernel) {
  const auto k = static_cast<std::size_t>(layer.kernel_side());
  if (kernel.rank() != 4 || kernel.dim(0) != k || kernel.dim(1) != k ||
      kernel.dim(2) != layer.channels) {
    throw ShapeError("source kernel " + kernel.shape_string() + " does not fit a KTN for " +
                     std::to_string(k) + "x" + std::to_string(k) + "x" +
                     std::to_string(layer.channels) + " kernels");
  }
}

/// Channel-wise projection of kernel images (Cout x k x k x Cin) by P (taps x k^2).
inline Tensor project_images(const Tensor& P, const geometry::KernelShape& shape, const Tensor& images) {
  const std::size_t co = images.dim(0), k2 = images.dim(1) * images.dim(2), ci = images.dim(3);
  const auto taps = static_cast<std::size_t>(shape.taps());
  Tensor out({co, static_cast<std::size_t>(shape.height), static_cast<std::size_t>(shape.width), ci});
  for (std::size_t o = 0; o < co; ++o) {
    nn::ConstMatrixMap src(images.data() + o * k2 * ci, static_cast<Eigen::Index>(k2),
                           static_cast<Eigen::Index>(ci));
    nn::MatrixMap dst(out.data() + o * taps * ci, static_cast<Eigen::Index>(taps),
                      static_cast<Eigen::Index>(ci));
    nn::ConstMatrixMap p(P.data(), static_cast<Eigen::Index>(taps), static_cast<Eigen::Index>(k2));
    dst.noalias() = p * src;
  }
  return out;
}

inline TransformedKernel ktn_forward(const KTNLayer& layer, const Tensor& kernel, std::size_t g,
                                     KtnTrace* trace = nullptr) {
  check_source_kernel(layer, kernel);
  const auto& grp = layer.table.at(g);
  const Tensor images = detail::kernel_as_images(kernel);
  Tensor x0 = project_images(layer.projections[g], grp.shape, images);
  Tensor a1 = nn::relu_forward(x0);
  Tensor b1 = nn::pointwise_forward(a1, layer.pw1, layer.pw1_bias);
  Tensor c1 = nn::relu_forward(b1);
  Tensor d1 = nn::depthwise_forward(c1, layer.dw1, layer.dw1_bias);
  Tensor a2 = nn::relu_forward(d1);
  Tensor b2 = nn::pointwise_forward(a2, layer.pw2, layer.pw2_bias);
  Tensor c2 = nn::relu_forward(b2);
  Tensor out = nn::depthwise_forward(c2, layer.dw2, layer.dw2_bias);
  out += x0;
  TransformedKernel tk{detail::images_as_kernel(out), grp.shape.dilation, g};
  if (trace) {
    *trace = {g, std::move(x0), std::move(b1), std::move(d1), std::move(b2),
              std::move(a1), std::move(c1), std::move(a2), std::move(c2)};
  }
  return tk;
}

/// Gradients of ktn_forward for one group, in KTNLayer::parameters() order.
/// Projections of other groups get zero tensors; the source kernel gets none.
struct KtnGrads {
  std::vector<Tensor> params;
};

inline KtnGrads zero_grads(const KTNLayer& layer) {
  KtnGrads g;
  for (const Tensor* p : layer.parameters()) g.params.emplace_back(p->dims());
  return g;
}

/// Accumulates into `grads` the gradient of <dkernel, ktn_forward(layer, kernel, g)>.
inline void ktn_backward(const KTNLayer& layer, const Tensor& kernel, const KtnTrace& t,
                         const Tensor& dkernel, KtnGrads& grads) {
  check_source_kernel(layer, kernel);
  const std::size_t g = t.group;
  const auto& grp = layer.table.at(g);
  const std::vector<std::size_t> want{static_cast<std::size_t>(grp.shape.height),
                                      static_cast<std::size_t>(grp.shape.width), kernel.dim(2),
                                      kernel.dim(3)};
  if (dkernel.dims() != want) {
    throw ShapeError("upstream kernel gradient " + dkernel.shape_string() + " does not match group " +
                     std::to_string(g));
  }
  if (grads.params.size() != layer.projections.size() + 8) {
    throw ShapeError("gradient buffer does not match the KTN layer");
  }
  const std::size_t np = layer.projections.size();
  const Tensor dout = detail::kernel_as_images(dkernel);
  auto dw2 = nn::depthwise_backward(t.c2, layer.dw2, dout);
  grads.params[np + 6] += dw2.kernel;
  grads.params[np + 7] += dw2.bias;
  Tensor d = nn::relu_backward(t.b2, std::move(dw2.input));
  auto pw2 = nn::pointwise_backward(t.a2, layer.pw2, d);
  grads.params[np + 4] += pw2.weight;
  grads.params[np + 5] += pw2.bias;
  d = nn::relu_backward(t.d1, std::move(pw2.input));
  auto dw1 = nn::depthwise_backward(t.c1, layer.dw1, d);
  grads.params[np + 2] += dw1.kernel;
  grads.params[np + 3] += dw1.bias;
  d = nn::relu_backward(t.b1, std::move(dw1.input));
  auto pw1 = nn::pointwise_backward(t.a1, layer.pw1, d);
  grads.params[np + 0] += pw1.weight;
  grads.params[np + 1] += pw1.bias;
  Tensor dx0 = nn::relu_backward(t.shortcut, std::move(pw1.input));
  dx0 += dout;
  // dP = sum over output channels of dX0_o (taps x Cin) * K_o^T (Cin x k^2)
  const Tensor images = detail::kernel_as_images(kernel);
  const std::size_t co = images.dim(0), k2 = images.dim(1) * images.dim(2), ci = images.dim(3);
  const auto taps = static_cast<std::size_t>(grp.shape.taps());
  nn::MatrixMap dP(grads.params[g].data(), static_cast<Eigen::Index>(taps),
                   static_cast<Eigen::Index>(k2));
  for (std::size_t o = 0; o < co; ++o) {
    nn::ConstMatrixMap dx(dx0.data() + o * taps * ci, static_cast<Eigen::Index>(taps),
                          static_cast<Eigen::Index>(ci));
    nn::ConstMatrixMap src(images.data() + o * k2 * ci, static_cast<Eigen::Index>(k2),
                           static_cast<Eigen::Index>(ci));
    dP.noalias() += dx * src.transpose();
  }
}

/// Training-free baseline: the analytic projection applied channel-wise.
inline TransformedKernel projected_kernel(const RowGroupTable& table, const Tensor& kernel,
                                          std::size_t g) {
  const auto& grp = table.at(g);
  if (kernel.rank() != 4 || kernel.dim(0) != static_cast<std::size_t>(table.kernel_side) ||
      kernel.dim(1) != static_cast<std::size_t>(table.kernel_side)) {
    throw ShapeError("source kernel " + kernel.shape_string() + " does not match the table");
  }
  return {geometry::apply_projection(table.analytic_projection(g), grp.shape, kernel),
          grp.shape.dilation, g};
}

/// Exact parameter accounting for one layer.
struct ParameterCounts {
  std::size_t projections = 0;  ///< sum of taps_g * k^2
  std::size_t blocks = 0;       ///< two pointwise + two depthwise convs with biases
  std::size_t source = 0;       ///< k^2 Cin Cout source kernel entries
  std::size_t untied = 0;       ///< an independent kernel per row group: sum of taps_g Cin Cout

  std::size_t overhead() const { return projections + blocks; }
  ParameterCounts& operator+=(const ParameterCounts& o) {
    projections += o.projections;
    blocks += o.blocks;
    source += o.source;
    untied += o.untied;
    return *this;
  }
};

inline ParameterCounts parameter_count(const KTNLayer& layer, std::size_t cout) {
  ParameterCounts c;
  for (const auto& p : layer.projections) c.projections += p.size();
  for (const Tensor* t : {&layer.pw1, &layer.pw1_bias, &layer.dw1, &layer.dw1_bias, &layer.pw2,
                          &layer.pw2_bias, &layer.dw2, &layer.dw2_bias}) {
    c.blocks += t->size();
  }
  const auto k = static_cast<std::size_t>(layer.kernel_side());
  c.source = k * k * layer.channels * cout;
  for (const auto& g : layer.table.groups) {
    c.untied += static_cast<std::size_t>(g.shape.taps()) * layer.channels * cout;
  }
  return c;
}

}  // namespace ktn
