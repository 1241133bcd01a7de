#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "ktn/error.hpp"
#include "ktn/tensor.hpp"

namespace ktn::nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

enum class HorizontalPadding { zero, circular };

/// Convolution parameters. Vertical padding is always zero-fill; output has the
/// same spatial extents as the input.
struct ConvParams {
  Tensor kernel;  ///< kh x kw x Cin x Cout
  Tensor bias;    ///< Cout
  HorizontalPadding hpad = HorizontalPadding::zero;
  int dilation = 1;

  std::size_t kh() const { return kernel.dim(0); }
  std::size_t kw() const { return kernel.dim(1); }
  std::size_t cin() const { return kernel.dim(2); }
  std::size_t cout() const { return kernel.dim(3); }

  void validate() const {
    if (kernel.rank() != 4) throw ShapeError("conv kernel must be rank 4");
    if (kh() % 2 == 0 || kw() % 2 == 0) throw ShapeError("conv kernel sides must be odd");
    if (bias.rank() != 1 || bias.dim(0) != cout()) {
      throw ShapeError("conv bias " + bias.shape_string() + " does not match Cout " +
                       std::to_string(cout()));
    }
    if (dilation < 1) throw ShapeError("dilation must be >= 1");
  }
};

/// Geometry of one im2col expansion: a band of output rows of a single image.
struct PatchLayout {
  int height = 0, width = 0, channels = 0;
  int kh = 1, kw = 1, dilation = 1;
  HorizontalPadding hpad = HorizontalPadding::zero;

  std::size_t patch_size() const {
    return static_cast<std::size_t>(kh) * kw * channels;
  }
};

/// Writes one row per output position y in [y0, y1), x in [0, W); columns are
/// ordered (i, j, c) to match a row-major kh x kw x C x Cout kernel.
inline void im2col_rows(const double* image, const PatchLayout& L, int y0, int y1,
                        double* cols) {
  const int ch = (L.kh - 1) / 2, cw = (L.kw - 1) / 2;
  const std::size_t C = static_cast<std::size_t>(L.channels);
  const std::size_t psize = L.patch_size();
  for (int y = y0; y < y1; ++y) {
    for (int x = 0; x < L.width; ++x) {
      double* dst = cols + (static_cast<std::size_t>(y - y0) * L.width + x) * psize;
      for (int i = 0; i < L.kh; ++i) {
        const int yy = y + (i - ch) * L.dilation;
        for (int j = 0; j < L.kw; ++j, dst += C) {
          if (yy < 0 || yy >= L.height) {
            std::fill(dst, dst + C, 0.0);
            continue;
          }
          int xx = x + (j - cw) * L.dilation;
          if (xx < 0 || xx >= L.width) {
            if (L.hpad == HorizontalPadding::zero) {
              std::fill(dst, dst + C, 0.0);
              continue;
            }
            xx %= L.width;
            if (xx < 0) xx += L.width;
          }
          const double* src = image + (static_cast<std::size_t>(yy) * L.width + xx) * C;
          std::copy(src, src + C, dst);
        }
      }
    }
  }
}

/// Adjoint of im2col_rows: scatters column gradients back into `image_grad`.
inline void col2im_rows_add(const double* cols, const PatchLayout& L, int y0, int y1,
                            double* image_grad) {
  const int ch = (L.kh - 1) / 2, cw = (L.kw - 1) / 2;
  const std::size_t C = static_cast<std::size_t>(L.channels);
  const std::size_t psize = L.patch_size();
  for (int y = y0; y < y1; ++y) {
    for (int x = 0; x < L.width; ++x) {
      const double* src = cols + (static_cast<std::size_t>(y - y0) * L.width + x) * psize;
      for (int i = 0; i < L.kh; ++i) {
        const int yy = y + (i - ch) * L.dilation;
        for (int j = 0; j < L.kw; ++j, src += C) {
          if (yy < 0 || yy >= L.height) continue;
          int xx = x + (j - cw) * L.dilation;
          if (xx < 0 || xx >= L.width) {
            if (L.hpad == HorizontalPadding::zero) continue;
            xx %= L.width;
            if (xx < 0) xx += L.width;
          }
          double* dst = image_grad + (static_cast<std::size_t>(yy) * L.width + xx) * C;
          for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

namespace detail {

struct BatchView {
  std::size_t n, h, w, c;
};

inline BatchView batch_view(const Tensor& t) {
  if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2)};
  if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
  throw ShapeError("expected an H x W x C map or an N x H x W x C batch, got " +
                   t.shape_string());
}

inline std::vector<std::size_t> with_channels(const Tensor& t, std::size_t c) {
  auto d = t.dims();
  d.back() = c;
  return d;
}

/// Images per im2col chunk so that a chunk holds at most ~2^21 doubles.
inline std::size_t images_per_chunk(std::size_t positions, std::size_t psize) {
  const std::size_t budget = std::size_t{1} << 21;
  return std::max<std::size_t>(1, budget / std::max<std::size_t>(1, positions * psize));
}

}  // namespace detail

inline PatchLayout patch_layout(const Tensor& input, const ConvParams& p) {
  const auto v = detail::batch_view(input);
  return {static_cast<int>(v.h), static_cast<int>(v.w), static_cast<int>(v.c),
          static_cast<int>(p.kh()), static_cast<int>(p.kw()), p.dilation, p.hpad};
}

/// Same-size 2D cross-correlation over one map or a batch.
inline Tensor conv2d_forward(const Tensor& input, const ConvParams& p) {
  p.validate();
  const auto v = detail::batch_view(input);
  if (v.c != p.cin()) {
    throw ShapeError("conv input has " + std::to_string(v.c) + " channels, kernel expects " +
                     std::to_string(p.cin()));
  }
  const PatchLayout L = patch_layout(input, p);
  const std::size_t positions = v.h * v.w, psize = L.patch_size(), cout = p.cout();
  Tensor out(detail::with_channels(input, cout));
  const ConstMatrixMap K(p.kernel.data(), static_cast<Eigen::Index>(psize),
                         static_cast<Eigen::Index>(cout));
  const Eigen::Map<const Eigen::RowVectorXd> b(p.bias.data(), static_cast<Eigen::Index>(cout));
  const std::size_t chunk = detail::images_per_chunk(positions, psize);
  std::vector<double> cols;
  for (std::size_t n0 = 0; n0 < v.n; n0 += chunk) {
    const std::size_t n1 = std::min(v.n, n0 + chunk);
    cols.resize((n1 - n0) * positions * psize);
    for (std::size_t n = n0; n < n1; ++n) {
      im2col_rows(input.data() + n * positions * v.c, L, 0, static_cast<int>(v.h),
                  cols.data() + (n - n0) * positions * psize);
    }
    const auto rows = static_cast<Eigen::Index>((n1 - n0) * positions);
    ConstMatrixMap X(cols.data(), rows, static_cast<Eigen::Index>(psize));
    MatrixMap Y(out.data() + n0 * positions * cout, rows, static_cast<Eigen::Index>(cout));
    Y.noalias() = X * K;
    Y.rowwise() += b;
  }
  return out;
}

struct ConvGrads {
  Tensor input;   ///< empty unless requested
  Tensor kernel;
  Tensor bias;
};

/// Gradients of conv2d_forward given the upstream gradient `dout`.
inline ConvGrads conv2d_backward(const Tensor& input, const ConvParams& p, const Tensor& dout,
                                 bool need_input_grad = true) {
  p.validate();
  const auto v = detail::batch_view(input);
  if (v.c != p.cin() || dout.dims() != detail::with_channels(input, p.cout())) {
    throw ShapeError("conv backward: input " + input.shape_string() + ", upstream " +
                     dout.shape_string());
  }
  const PatchLayout L = patch_layout(input, p);
  const std::size_t positions = v.h * v.w, psize = L.patch_size(), cout = p.cout();
  ConvGrads g;
  g.kernel = Tensor(p.kernel.dims());
  g.bias = Tensor(p.bias.dims());
  if (need_input_grad) g.input = Tensor(input.dims());
  const ConstMatrixMap K(p.kernel.data(), static_cast<Eigen::Index>(psize),
                         static_cast<Eigen::Index>(cout));
  MatrixMap dK(g.kernel.data(), static_cast<Eigen::Index>(psize), static_cast<Eigen::Index>(cout));
  Eigen::Map<Eigen::RowVectorXd> db(g.bias.data(), static_cast<Eigen::Index>(cout));
  const std::size_t chunk = detail::images_per_chunk(positions, psize);
  std::vector<double> cols, dcols;
  for (std::size_t n0 = 0; n0 < v.n; n0 += chunk) {
    const std::size_t n1 = std::min(v.n, n0 + chunk);
    cols.resize((n1 - n0) * positions * psize);
    for (std::size_t n = n0; n < n1; ++n) {
      im2col_rows(input.data() + n * positions * v.c, L, 0, static_cast<int>(v.h),
                  cols.data() + (n - n0) * positions * psize);
    }
    const auto rows = static_cast<Eigen::Index>((n1 - n0) * positions);
    ConstMatrixMap X(cols.data(), rows, static_cast<Eigen::Index>(psize));
    ConstMatrixMap dY(dout.data() + n0 * positions * cout, rows, static_cast<Eigen::Index>(cout));
    dK.noalias() += X.transpose() * dY;
    db += dY.colwise().sum();
    if (need_input_grad) {
      dcols.resize(cols.size());
      MatrixMap dX(dcols.data(), rows, static_cast<Eigen::Index>(psize));
      dX.noalias() = dY * K.transpose();
      for (std::size_t n = n0; n < n1; ++n) {
        col2im_rows_add(dcols.data() + (n - n0) * positions * psize, L, 0,
                        static_cast<int>(v.h), g.input.data() + n * positions * v.c);
      }
    }
  }
  return g;
}

}  // namespace ktn::nn
