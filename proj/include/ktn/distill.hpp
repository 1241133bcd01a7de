#pragma once

// Tangent-plane feature targets and per-layer KTN distillation. The target at
// an equirectangular position is the source CNN's activation at the center of a
// tangent patch resampled around that position's sphere point; each KTN layer
// is trained on ground-truth inputs to reproduce its layer's targets.

#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ktn/geometry.hpp"
#include "ktn/io.hpp"
#include "ktn/ktn_layer.hpp"
#include "ktn/nn/adam.hpp"
#include "ktn/parallel.hpp"
#include "ktn/source_cnn.hpp"
#include "ktn/sphconv.hpp"

namespace ktn {

/// Side of the tangent patch whose layer-l output has a center pixel located
/// exactly at the tangency point and computed without padding: the receptive
/// field is 6, 16, 36 input pixels and the center aligns for sides 6, 20, 40.
inline int target_patch_side(int layer) {
  static constexpr std::array<int, kSourceLayers> kSides{6, 20, 40};
  if (layer < 1 || layer > kSourceLayers) throw PreconditionError("layer must be in [1, 3]");
  return kSides[layer - 1];
}

/// Output grid of block l (post-pool) on an H x W canvas.
inline geometry::GridSpec output_grid(const geometry::GridSpec& canvas, int layer) {
  const int f = 1 << layer;
  return {canvas.height / f, canvas.width / f};
}

/// Positions of layer l's output grid taken as targets: every `stride`-th row
/// and column, as flat indices y * W + x.
struct Lattice {
  geometry::GridSpec grid;
  int stride = 1;
  std::vector<std::uint32_t> positions;

  static Lattice make(const geometry::GridSpec& grid, int stride) {
    if (stride < 1) throw PreconditionError("lattice stride must be >= 1");
    Lattice l{grid, stride, {}};
    for (int y = 0; y < grid.height; y += stride)
      for (int x = 0; x < grid.width; x += stride)
        l.positions.push_back(static_cast<std::uint32_t>(y * grid.width + x));
    return l;
  }
};

/// Image-independent resampling operators for every lattice position of one layer.
struct TargetPlan {
  int layer = 1;
  Lattice lattice;
  int patch_side = 0;
  std::vector<geometry::SamplingMap> maps;  ///< per lattice position

  static TargetPlan make(const geometry::GridSpec& canvas, int layer, int stride) {
    TargetPlan p;
    p.layer = layer;
    p.lattice = Lattice::make(output_grid(canvas, layer), stride);
    p.patch_side = target_patch_side(layer);
    const double spacing = canvas.row_pitch();
    p.maps.resize(p.lattice.positions.size());
    parallel_for(p.maps.size(), [&](std::size_t i) {
      const int pos = static_cast<int>(p.lattice.positions[i]);
      const auto center = geometry::pixel_center(pos % p.lattice.grid.width,
                                                 pos / p.lattice.grid.width, p.lattice.grid);
      const auto tg = geometry::TangentGrid::with_spacing(center, p.patch_side, spacing);
      p.maps[i] = geometry::build_tangent_sampling_map(tg, canvas);
    });
    return p;
  }
};

/// Source activations at every lattice position: a dense layer-l output map
/// (positions off the lattice stay zero).
inline Tensor compute_target_features(const Tensor& image, const SourceCNN& source,
                                      const TargetPlan& plan, std::size_t chunk = 256) {
  if (image.rank() != 3 || image.dim(2) != 1) {
    throw ShapeError("target computation expects an H x W x 1 image, got " + image.shape_string());
  }
  const auto& g = plan.lattice.grid;
  const std::size_t channels = kSourceChannels[plan.layer];
  Tensor out({static_cast<std::size_t>(g.height), static_cast<std::size_t>(g.width), channels});
  const auto side = static_cast<std::size_t>(plan.patch_side);
  const std::size_t out_side = side >> plan.layer, center = (out_side - 1) / 2;
  const std::size_t n = plan.maps.size();
  for (std::size_t p0 = 0; p0 < n; p0 += chunk) {
    const std::size_t p1 = std::min(n, p0 + chunk);
    Tensor patches({p1 - p0, side, side, 1});
    for (std::size_t i = p0; i < p1; ++i) {
      plan.maps[i].apply_into(image.data(), 1, patches.data() + (i - p0) * side * side);
    }
    const Tensor f = forward_to_layer(source, patches, plan.layer);
    for (std::size_t i = p0; i < p1; ++i) {
      const double* src = f.data() + (((i - p0) * out_side + center) * out_side + center) * channels;
      std::copy(src, src + channels, out.data() + plan.lattice.positions[i] * channels);
    }
  }
  return out;
}

// ---- loss ----------------------------------------------------------------------

struct DistillLoss {
  double value = 0.0;
  std::size_t count = 0;  ///< sampled elements (positions x channels x images)
  Tensor grad;            ///< d value / d predicted, zero off the lattice
};

/// Mean squared difference over lattice positions and channels of one map or a
/// batch of maps.
inline DistillLoss distill_loss(const Tensor& predicted, const Tensor& target, const Lattice& lattice) {
  if (!predicted.same_shape(target)) {
    throw ShapeError("prediction " + predicted.shape_string() + " vs target " + target.shape_string());
  }
  const auto v = nn::detail::batch_view(predicted);
  if (static_cast<int>(v.h) != lattice.grid.height || static_cast<int>(v.w) != lattice.grid.width) {
    throw ShapeError("map " + predicted.shape_string() + " does not match the lattice grid");
  }
  DistillLoss r;
  r.grad = Tensor(predicted.dims());
  r.count = v.n * lattice.positions.size() * v.c;
  if (r.count == 0) throw PreconditionError("empty lattice");
  const double scale = 2.0 / static_cast<double>(r.count);
  for (std::size_t n = 0; n < v.n; ++n) {
    for (auto pos : lattice.positions) {
      const std::size_t base = (n * v.h * v.w + pos) * v.c;
      for (std::size_t c = 0; c < v.c; ++c) {
        const double d = predicted[base + c] - target[base + c];
        r.value += d * d;
        r.grad[base + c] = scale * d;
      }
    }
  }
  r.value /= static_cast<double>(r.count);
  return r;
}

inline double lattice_rmse(const Tensor& predicted, const Tensor& target, const Lattice& lattice) {
  return std::sqrt(distill_loss(predicted, target, lattice).value);
}

// ---- target cache ----------------------------------------------------------------

/// Ground-truth maps for a list of images: per image, the layer-1..3 targets.
struct TargetSet {
  std::vector<std::string> ids;
  std::vector<std::array<Tensor, kSourceLayers>> maps;
};

inline std::filesystem::path target_file(const std::filesystem::path& root, int layer,
                                         const std::string& id) {
  return root / ("layer" + std::to_string(layer)) / (id + ".ktnt");
}

inline std::array<Tensor, kSourceLayers> load_targets(const std::filesystem::path& root,
                                                      const std::string& id) {
  std::array<Tensor, kSourceLayers> m;
  for (int l = 1; l <= kSourceLayers; ++l) {
    const auto p = target_file(root, l, id);
    if (!std::filesystem::exists(p)) {
      throw PreconditionError("target cache miss: " + p.string());
    }
    m[l - 1] = io::load_tensor(p);
  }
  return m;
}

// ---- per-layer training ------------------------------------------------------------

struct DistillSample {
  const Tensor* input;   ///< layer-l input map (image or ground-truth F^{l-1})
  const Tensor* target;  ///< F^l
};

/// Spherical block output with KTN kernels, returning what backprop needs.
struct BlockPass {
  std::vector<TransformedKernel> kernels;
  std::vector<KtnTrace> traces;
  Tensor conv;
  std::vector<std::uint32_t> argmax;
  Tensor pooled;
  Tensor output;
};

inline BlockPass ktn_block_forward(const KTNLayer& ktn, const nn::ConvParams& src, const Tensor& input) {
  BlockPass b;
  b.traces.resize(ktn.table.size());
  for (std::size_t g = 0; g < ktn.table.size(); ++g) {
    b.kernels.push_back(ktn_forward(ktn, src.kernel, g, &b.traces[g]));
  }
  b.conv = spherical_conv(input, ktn.table, b.kernels, src.bias);
  auto pool = nn::maxpool2_forward(b.conv);
  b.pooled = std::move(pool.output);
  b.argmax = std::move(pool.argmax);
  b.output = nn::relu_forward(b.pooled);
  return b;
}

/// Gradient of the layer loss with respect to every KTN parameter.
inline KtnGrads ktn_block_backward(const KTNLayer& ktn, const nn::ConvParams& src, const Tensor& input,
                                   const BlockPass& b, const Tensor& dout) {
  Tensor d = nn::relu_backward(b.pooled, dout);
  d = nn::maxpool2_backward(b.conv.dims(), b.argmax, d);
  const auto cg = spherical_conv_backward(input, ktn.table, b.kernels, d, false);
  KtnGrads grads = zero_grads(ktn);
  for (std::size_t g = 0; g < ktn.table.size(); ++g) {
    ktn_backward(ktn, src.kernel, b.traces[g], cg.kernels[g], grads);
  }
  return grads;
}

struct DistillEpoch {
  int epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
};

struct DistillResult {
  double initial_loss = 0.0;  ///< training-set loss before any step
  double final_loss = 0.0;    ///< training-set loss after the last step
  std::vector<DistillEpoch> curve;
};

inline Tensor stack_maps(std::span<const DistillSample> samples, std::span<const std::size_t> idx,
                         bool targets) {
  const Tensor& first = targets ? *samples[idx[0]].target : *samples[idx[0]].input;
  std::vector<std::size_t> dims{idx.size()};
  dims.insert(dims.end(), first.dims().begin(), first.dims().end());
  Tensor out(dims);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const Tensor& t = targets ? *samples[idx[k]].target : *samples[idx[k]].input;
    if (t.size() != first.size()) throw ShapeError("distillation maps differ in shape");
    std::copy(t.data(), t.data() + t.size(), out.data() + k * first.size());
  }
  return out;
}

inline double dataset_loss(const KTNLayer& ktn, const nn::ConvParams& src,
                           std::span<const DistillSample> samples, const Lattice& lattice,
                           std::size_t batch) {
  double sum = 0.0;
  std::size_t count = 0;
  std::vector<std::size_t> idx;
  for (std::size_t b0 = 0; b0 < samples.size(); b0 += batch) {
    idx.resize(std::min(batch, samples.size() - b0));
    std::iota(idx.begin(), idx.end(), b0);
    const auto pass = ktn_block_forward(ktn, src, stack_maps(samples, idx, false));
    const auto loss = distill_loss(pass.output, stack_maps(samples, idx, true), lattice);
    sum += loss.value * loss.count;
    count += loss.count;
  }
  return sum / static_cast<double>(count);
}

/// Adam on the distillation loss of one layer, teacher-forced with ground-truth
/// inputs. Labels are never consulted.
inline DistillResult train_ktn_layer(KTNLayer& ktn, const nn::ConvParams& src,
                                     std::span<const DistillSample> samples, const Lattice& lattice,
                                     const TrainRecipe& r,
                                     const std::function<void(const DistillEpoch&)>& on_epoch = {}) {
  if (samples.empty()) throw PreconditionError("distillation needs a non-empty target cache");
  ktn.validate();
  check_source_kernel(ktn, src.kernel);
  DistillResult res;
  const auto batch = static_cast<std::size_t>(r.batch);
  res.initial_loss = dataset_loss(ktn, src, samples, lattice, batch);
  nn::AdamState opt;
  opt.weight_decay = r.l2;
  std::mt19937_64 rng(r.seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 0; epoch < r.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    opt.lr = r.lr.at(epoch);
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
      const std::span<const std::size_t> idx(order.data() + b0, std::min(batch, order.size() - b0));
      const Tensor input = stack_maps(samples, idx, false);
      const auto pass = ktn_block_forward(ktn, src, input);
      const auto loss = distill_loss(pass.output, stack_maps(samples, idx, true), lattice);
      sum += loss.value * loss.count;
      count += loss.count;
      const auto grads = ktn_block_backward(ktn, src, input, pass, loss.grad);
      auto params = ktn.parameters();
      std::vector<nn::ParamRef> refs;
      for (std::size_t i = 0; i < params.size(); ++i) {
        refs.push_back({params[i], &grads.params[i], ktn.decays(i)});
      }
      nn::adam_step(refs, opt);
    }
    res.curve.push_back({epoch + 1, sum / static_cast<double>(count), opt.lr});
    if (on_epoch) on_epoch(res.curve.back());
  }
  res.final_loss = dataset_loss(ktn, src, samples, lattice, batch);
  return res;
}

// ---- KTN persistence ------------------------------------------------------------

/// One file per layer: the group projections followed by the residual tensors.
inline void save_ktn_layer(const std::filesystem::path& path, const KTNLayer& ktn) {
  ktn.validate();
  std::vector<Tensor> ts;
  for (const Tensor* t : ktn.parameters()) ts.push_back(*t);
  io::save_tensors(path, ts);
}

/// Loads weights into a layer built for the same row-group table.
inline KTNLayer load_ktn_layer(const std::filesystem::path& path, const RowGroupTable& table,
                               std::size_t channels) {
  auto ts = io::load_tensors(path);
  KTNLayer l;
  l.table = table;
  l.channels = channels;
  if (ts.size() != table.size() + 8) {
    throw FormatError("KTN file " + path.string() + " holds " + std::to_string(ts.size()) +
                          " tensors, expected " + std::to_string(table.size() + 8),
                      0);
  }
  for (std::size_t g = 0; g < table.size(); ++g) l.projections.push_back(std::move(ts[g]));
  const std::size_t o = table.size();
  l.pw1 = std::move(ts[o]);
  l.pw1_bias = std::move(ts[o + 1]);
  l.dw1 = std::move(ts[o + 2]);
  l.dw1_bias = std::move(ts[o + 3]);
  l.pw2 = std::move(ts[o + 4]);
  l.pw2_bias = std::move(ts[o + 5]);
  l.dw2 = std::move(ts[o + 6]);
  l.dw2_bias = std::move(ts[o + 7]);
  l.validate();
  return l;
}

}  // namespace ktn
