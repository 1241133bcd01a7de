#pragma once

// Row-group convolution on equirectangular maps and the spherical network that
// swaps each planar conv of the source CNN for it.

#include <array>
#include <chrono>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ktn/geometry.hpp"
#include "ktn/ktn_layer.hpp"
#include "ktn/nn/conv.hpp"
#include "ktn/nn/layers.hpp"
#include "ktn/source_cnn.hpp"

namespace ktn {

namespace detail {

inline void check_group_kernels(const RowGroupTable& table, std::span<const TransformedKernel> ks,
                                std::size_t cin) {
  if (ks.size() != table.size()) {
    throw ShapeError("expected " + std::to_string(table.size()) + " group kernels, got " +
                     std::to_string(ks.size()));
  }
  for (std::size_t g = 0; g < ks.size(); ++g) {
    const auto& s = table.groups[g].shape;
    const auto& w = ks[g].weights;
    if (w.rank() != 4 || w.dim(0) != static_cast<std::size_t>(s.height) ||
        w.dim(1) != static_cast<std::size_t>(s.width) || w.dim(2) != cin ||
        ks[g].dilation != s.dilation) {
      throw ShapeError("kernel for group " + std::to_string(g) + " has shape " + w.shape_string());
    }
    if (w.dim(3) != ks[0].weights.dim(3)) throw ShapeError("group kernels disagree on Cout");
  }
}

inline nn::PatchLayout group_layout(const nn::detail::BatchView& v, const TransformedKernel& k) {
  return {static_cast<int>(v.h), static_cast<int>(v.w), static_cast<int>(v.c),
          static_cast<int>(k.weights.dim(0)), static_cast<int>(k.weights.dim(1)), k.dilation,
          nn::HorizontalPadding::circular};
}

}  // namespace detail

/// Each group's rows are convolved with that group's kernel; columns wrap,
/// rows outside the map read as zero; the bias is added everywhere.
inline Tensor spherical_conv(const Tensor& input, const RowGroupTable& table,
                             std::span<const TransformedKernel> kernels, const Tensor& bias) {
  const auto v = nn::detail::batch_view(input);
  if (static_cast<int>(v.h) != table.grid.height || static_cast<int>(v.w) != table.grid.width) {
    throw ShapeError("input " + input.shape_string() + " does not match the " +
                     std::to_string(table.grid.height) + "x" + std::to_string(table.grid.width) +
                     " row-group grid");
  }
  detail::check_group_kernels(table, kernels, v.c);
  const std::size_t cout = kernels[0].weights.dim(3);
  if (bias.size() != cout) throw ShapeError("bias does not match Cout");
  Tensor out(nn::detail::with_channels(input, cout));
  const Eigen::Map<const Eigen::RowVectorXd> b(bias.data(), static_cast<Eigen::Index>(cout));
  std::vector<double> cols;
  for (std::size_t g = 0; g < table.size(); ++g) {
    const auto& grp = table.groups[g];
    const auto L = detail::group_layout(v, kernels[g]);
    const std::size_t psize = L.patch_size();
    const auto rows = static_cast<Eigen::Index>(grp.rows * v.w);
    nn::ConstMatrixMap K(kernels[g].weights.data(), static_cast<Eigen::Index>(psize),
                         static_cast<Eigen::Index>(cout));
    cols.resize(static_cast<std::size_t>(rows) * psize);
    for (std::size_t n = 0; n < v.n; ++n) {
      nn::im2col_rows(input.data() + n * v.h * v.w * v.c, L, grp.first_row,
                      grp.first_row + grp.rows, cols.data());
      nn::ConstMatrixMap X(cols.data(), rows, static_cast<Eigen::Index>(psize));
      nn::MatrixMap Y(out.data() + (n * v.h + grp.first_row) * v.w * cout, rows,
                      static_cast<Eigen::Index>(cout));
      Y.noalias() = X * K;
      Y.rowwise() += b;
    }
  }
  return out;
}

struct SphericalConvGrads {
  std::vector<Tensor> kernels;  ///< per group, same shape as the group kernel
  Tensor bias;
  Tensor input;  ///< empty unless requested
};

inline SphericalConvGrads spherical_conv_backward(const Tensor& input, const RowGroupTable& table,
                                                  std::span<const TransformedKernel> kernels,
                                                  const Tensor& dout, bool need_input_grad) {
  const auto v = nn::detail::batch_view(input);
  detail::check_group_kernels(table, kernels, v.c);
  const std::size_t cout = kernels[0].weights.dim(3);
  if (dout.dims() != nn::detail::with_channels(input, cout)) {
    throw ShapeError("spherical conv backward: upstream " + dout.shape_string());
  }
  SphericalConvGrads gr;
  gr.bias = Tensor({cout});
  if (need_input_grad) gr.input = Tensor(input.dims());
  Eigen::Map<Eigen::RowVectorXd> db(gr.bias.data(), static_cast<Eigen::Index>(cout));
  std::vector<double> cols, dcols;
  for (std::size_t g = 0; g < table.size(); ++g) {
    const auto& grp = table.groups[g];
    const auto L = detail::group_layout(v, kernels[g]);
    const std::size_t psize = L.patch_size();
    const auto rows = static_cast<Eigen::Index>(grp.rows * v.w);
    gr.kernels.emplace_back(kernels[g].weights.dims());
    nn::MatrixMap dK(gr.kernels.back().data(), static_cast<Eigen::Index>(psize),
                     static_cast<Eigen::Index>(cout));
    nn::ConstMatrixMap K(kernels[g].weights.data(), static_cast<Eigen::Index>(psize),
                         static_cast<Eigen::Index>(cout));
    cols.resize(static_cast<std::size_t>(rows) * psize);
    for (std::size_t n = 0; n < v.n; ++n) {
      nn::im2col_rows(input.data() + n * v.h * v.w * v.c, L, grp.first_row,
                      grp.first_row + grp.rows, cols.data());
      nn::ConstMatrixMap X(cols.data(), rows, static_cast<Eigen::Index>(psize));
      nn::ConstMatrixMap dY(dout.data() + (n * v.h + grp.first_row) * v.w * cout, rows,
                            static_cast<Eigen::Index>(cout));
      dK.noalias() += X.transpose() * dY;
      db += dY.colwise().sum();
      if (need_input_grad) {
        dcols.resize(cols.size());
        nn::MatrixMap dX(dcols.data(), rows, static_cast<Eigen::Index>(psize));
        dX.noalias() = dY * K.transpose();
        nn::col2im_rows_add(dcols.data(), L, grp.first_row, grp.first_row + grp.rows,
                            gr.input.data() + n * v.h * v.w * v.c);
      }
    }
  }
  return gr;
}

// ---- spherical network -------------------------------------------------------

enum class KernelMethod { ktn, projected };

/// Grid of layer l's input (1-based) on an H x W canvas: H / 2^(l-1).
inline geometry::GridSpec layer_grid(const geometry::GridSpec& canvas, int layer) {
  const int f = 1 << (layer - 1);
  return {canvas.height / f, canvas.width / f};
}

/// Tangent-plane pixel spacing matched to the grid pitch at the equator.
inline double layer_tangent_spacing(const geometry::GridSpec& canvas, int layer) {
  return layer_grid(canvas, layer).row_pitch();
}

inline std::array<RowGroupTable, kSourceLayers> build_row_tables(const geometry::GridSpec& canvas,
                                                                 int group_rows = 5) {
  std::array<RowGroupTable, kSourceLayers> t;
  for (int l = 1; l <= kSourceLayers; ++l) {
    t[l - 1] = RowGroupTable::build(layer_grid(canvas, l), kSourceKernel,
                                    layer_tangent_spacing(canvas, l), group_rows);
  }
  return t;
}

/// Source CNN with spherical convolutions. Kernels are generated once per
/// (layer, group) and cached; changing any weight requires invalidate().
class SphericalNetwork {
 public:
  SphericalNetwork(SourceCNN source, std::array<RowGroupTable, kSourceLayers> tables)
      : source_(std::move(source)), tables_(std::move(tables)) {
    source_.validate_architecture();
    method_ = KernelMethod::projected;
  }

  SphericalNetwork(SourceCNN source, std::array<KTNLayer, kSourceLayers> ktns)
      : source_(std::move(source)) {
    source_.validate_architecture();
    for (int l = 0; l < kSourceLayers; ++l) {
      ktns[l].validate();
      check_source_kernel(ktns[l], source_.conv[l].kernel);
      tables_[l] = ktns[l].table;
    }
    ktns_ = std::move(ktns);
    method_ = KernelMethod::ktn;
  }

  KernelMethod method() const { return method_; }
  const SourceCNN& source() const { return source_; }
  const RowGroupTable& table(int layer) const { return tables_.at(layer - 1); }
  const std::array<KTNLayer, kSourceLayers>& ktns() const { return *ktns_; }
  std::array<KTNLayer, kSourceLayers>& mutable_ktns() {
    invalidate();
    return *ktns_;
  }

  void invalidate() {
    for (auto& c : cache_) c.clear();
  }

  std::size_t cache_size() const {
    std::size_t n = 0;
    for (const auto& c : cache_) n += c.size();
    return n;
  }

  /// Group kernels of layer l (1-based), generated on first use.
  std::span<const TransformedKernel> kernels(int layer) const {
    auto& c = cache_.at(layer - 1);
    if (c.empty()) c = generate(layer);
    return c;
  }

  /// Uncached generation, for checking the cache.
  std::vector<TransformedKernel> generate(int layer) const {
    std::vector<TransformedKernel> out;
    const auto& K = source_.conv[layer - 1].kernel;
    for (std::size_t g = 0; g < tables_[layer - 1].size(); ++g) {
      out.push_back(method_ == KernelMethod::ktn ? ktn_forward((*ktns_)[layer - 1], K, g)
                                                 : projected_kernel(tables_[layer - 1], K, g));
    }
    return out;
  }

  /// conv -> pool -> ReLU for block l on its input map.
  Tensor block(int layer, const Tensor& input) const {
    const Tensor conv =
        spherical_conv(input, table(layer), kernels(layer), source_.conv[layer - 1].bias);
    return nn::relu_forward(nn::maxpool2_forward(conv).output);
  }

  /// Post-pool, post-ReLU map after block `stop_layer` (1-based).
  Tensor forward_to_layer(const Tensor& image, int stop_layer) const {
    if (stop_layer < 1 || stop_layer > kSourceLayers) {
      throw PreconditionError("layer must be in [1, 3]");
    }
    const auto v = nn::detail::batch_view(image);
    const auto& g = table(1).grid;
    if (static_cast<int>(v.h) != g.height || static_cast<int>(v.w) != g.width || v.c != 1) {
      throw ShapeError("spherical input " + image.shape_string() + " does not match the " +
                       std::to_string(g.height) + "x" + std::to_string(g.width) + " canvas");
    }
    Tensor x = image;
    for (int l = 1; l <= stop_layer; ++l) x = block(l, x);
    return x;
  }

  Tensor logits(const Tensor& image) const {
    return head_logits(source_, forward_to_layer(image, kSourceLayers));
  }

 private:
  SourceCNN source_;
  std::array<RowGroupTable, kSourceLayers> tables_;
  std::optional<std::array<KTNLayer, kSourceLayers>> ktns_;
  KernelMethod method_;
  mutable std::array<std::vector<TransformedKernel>, kSourceLayers> cache_;
};

}  // namespace ktn
