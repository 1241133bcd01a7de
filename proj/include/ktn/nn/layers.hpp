#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "ktn/nn/conv.hpp"
#include "ktn/tensor.hpp"

namespace ktn::nn {

// ---- ReLU -------------------------------------------------------------------

inline Tensor relu_forward(Tensor x) {
  for (auto& v : x.values()) v = v > 0.0 ? v : 0.0;
  return x;
}

/// Gradient passes where the forward input was strictly positive.
inline Tensor relu_backward(const Tensor& input, Tensor dout) {
  if (!input.same_shape(dout)) throw ShapeError("relu backward shape mismatch");
  for (std::size_t i = 0; i < dout.size(); ++i) {
    if (!(input[i] > 0.0)) dout[i] = 0.0;
  }
  return dout;
}

// ---- 2x2 max-pool (floor) ---------------------------------------------------

struct PoolResult {
  Tensor output;
  std::vector<std::uint32_t> argmax;  ///< flat input index per output element
};

inline PoolResult maxpool2_forward(const Tensor& input) {
  const auto v = detail::batch_view(input);
  const std::size_t oh = v.h / 2, ow = v.w / 2;
  if (oh == 0 || ow == 0) throw ShapeError("max-pool input too small: " + input.shape_string());
  auto dims = input.dims();
  dims[dims.size() - 3] = oh;
  dims[dims.size() - 2] = ow;
  PoolResult r{Tensor(dims), {}};
  r.argmax.resize(r.output.size());
  std::size_t o = 0;
  for (std::size_t n = 0; n < v.n; ++n) {
    const std::size_t base = n * v.h * v.w * v.c;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        for (std::size_t c = 0; c < v.c; ++c, ++o) {
          std::size_t best = base + ((2 * y) * v.w + 2 * x) * v.c + c;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = base + ((2 * y + dy) * v.w + 2 * x + dx) * v.c + c;
              if (input[idx] > input[best]) best = idx;
            }
          }
          r.output[o] = input[best];
          r.argmax[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return r;
}

inline Tensor maxpool2_backward(const std::vector<std::size_t>& input_dims,
                                std::span<const std::uint32_t> argmax, const Tensor& dout) {
  if (argmax.size() != dout.size()) throw ShapeError("max-pool backward size mismatch");
  Tensor din(input_dims);
  for (std::size_t o = 0; o < dout.size(); ++o) din[argmax[o]] += dout[o];
  return din;
}

// ---- global spatial max-pool ------------------------------------------------

/// N x H x W x C (or H x W x C) to N x C.
inline PoolResult global_maxpool_forward(const Tensor& input) {
  const auto v = detail::batch_view(input);
  PoolResult r{Tensor({v.n, v.c}), {}};
  r.argmax.resize(v.n * v.c);
  for (std::size_t n = 0; n < v.n; ++n) {
    const std::size_t base = n * v.h * v.w * v.c;
    for (std::size_t c = 0; c < v.c; ++c) {
      std::size_t best = base + c;
      for (std::size_t p = 1; p < v.h * v.w; ++p) {
        const std::size_t idx = base + p * v.c + c;
        if (input[idx] > input[best]) best = idx;
      }
      r.output.at(n, c) = input[best];
      r.argmax[n * v.c + c] = static_cast<std::uint32_t>(best);
    }
  }
  return r;
}

// ---- linear -----------------------------------------------------------------

/// x: N x Cin, weight: Cin x Cout, bias: Cout.
inline Tensor linear_forward(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(0) ||
      bias.size() != weight.dim(1)) {
    throw ShapeError("linear: x " + x.shape_string() + ", weight " + weight.shape_string());
  }
  const auto n = static_cast<Eigen::Index>(x.dim(0));
  const auto ci = static_cast<Eigen::Index>(weight.dim(0));
  const auto co = static_cast<Eigen::Index>(weight.dim(1));
  Tensor y({x.dim(0), weight.dim(1)});
  MatrixMap Y(y.data(), n, co);
  Y.noalias() = ConstMatrixMap(x.data(), n, ci) * ConstMatrixMap(weight.data(), ci, co);
  Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data(), co);
  return y;
}

struct LinearGrads {
  Tensor input, weight, bias;
};

inline LinearGrads linear_backward(const Tensor& x, const Tensor& weight, const Tensor& dout) {
  const auto n = static_cast<Eigen::Index>(x.dim(0));
  const auto ci = static_cast<Eigen::Index>(weight.dim(0));
  const auto co = static_cast<Eigen::Index>(weight.dim(1));
  if (dout.rank() != 2 || dout.dim(0) != x.dim(0) || dout.dim(1) != weight.dim(1)) {
    throw ShapeError("linear backward: upstream " + dout.shape_string());
  }
  LinearGrads g{Tensor(x.dims()), Tensor(weight.dims()), Tensor({weight.dim(1)})};
  ConstMatrixMap X(x.data(), n, ci), W(weight.data(), ci, co), dY(dout.data(), n, co);
  MatrixMap(g.input.data(), n, ci).noalias() = dY * W.transpose();
  MatrixMap(g.weight.data(), ci, co).noalias() = X.transpose() * dY;
  Eigen::Map<Eigen::RowVectorXd>(g.bias.data(), co) = dY.colwise().sum();
  return g;
}

// ---- pointwise (1x1) convolution --------------------------------------------

/// Applies a Cin x Cout channel mix at every position of a map or batch.
inline Tensor pointwise_forward(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const auto v = detail::batch_view(x);
  if (weight.rank() != 2 || weight.dim(0) != v.c || bias.size() != weight.dim(1)) {
    throw ShapeError("pointwise: input " + x.shape_string() + ", weight " +
                     weight.shape_string());
  }
  const auto rows = static_cast<Eigen::Index>(v.n * v.h * v.w);
  const auto ci = static_cast<Eigen::Index>(v.c), co = static_cast<Eigen::Index>(weight.dim(1));
  Tensor y(detail::with_channels(x, weight.dim(1)));
  MatrixMap Y(y.data(), rows, co);
  Y.noalias() = ConstMatrixMap(x.data(), rows, ci) * ConstMatrixMap(weight.data(), ci, co);
  Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data(), co);
  return y;
}

inline LinearGrads pointwise_backward(const Tensor& x, const Tensor& weight, const Tensor& dout) {
  const auto v = detail::batch_view(x);
  if (dout.dims() != detail::with_channels(x, weight.dim(1))) {
    throw ShapeError("pointwise backward: upstream " + dout.shape_string());
  }
  const auto rows = static_cast<Eigen::Index>(v.n * v.h * v.w);
  const auto ci = static_cast<Eigen::Index>(v.c), co = static_cast<Eigen::Index>(weight.dim(1));
  LinearGrads g{Tensor(x.dims()), Tensor(weight.dims()), Tensor({weight.dim(1)})};
  ConstMatrixMap X(x.data(), rows, ci), W(weight.data(), ci, co), dY(dout.data(), rows, co);
  MatrixMap(g.input.data(), rows, ci).noalias() = dY * W.transpose();
  MatrixMap(g.weight.data(), ci, co).noalias() = X.transpose() * dY;
  Eigen::Map<Eigen::RowVectorXd>(g.bias.data(), co) = dY.colwise().sum();
  return g;
}

// ---- depthwise convolution (zero padding, stride 1) -------------------------

/// kernel: kh x kw x C (one spatial filter per channel), bias: C.
inline Tensor depthwise_forward(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  const auto v = detail::batch_view(x);
  if (kernel.rank() != 3 || kernel.dim(2) != v.c || bias.size() != v.c ||
      kernel.dim(0) % 2 == 0 || kernel.dim(1) % 2 == 0) {
    throw ShapeError("depthwise: input " + x.shape_string() + ", kernel " +
                     kernel.shape_string());
  }
  const long kh = static_cast<long>(kernel.dim(0)), kw = static_cast<long>(kernel.dim(1));
  const long ch = (kh - 1) / 2, cw = (kw - 1) / 2;
  const long H = static_cast<long>(v.h), W = static_cast<long>(v.w);
  const std::size_t C = v.c;
  Tensor y(x.dims());
  for (std::size_t n = 0; n < v.n; ++n) {
    const double* src = x.data() + n * v.h * v.w * C;
    double* dst = y.data() + n * v.h * v.w * C;
    for (long r = 0; r < H; ++r) {
      for (long c = 0; c < W; ++c) {
        double* o = dst + (r * W + c) * C;
        std::copy(bias.data(), bias.data() + C, o);
        for (long i = 0; i < kh; ++i) {
          const long rr = r + i - ch;
          if (rr < 0 || rr >= H) continue;
          for (long j = 0; j < kw; ++j) {
            const long cc = c + j - cw;
            if (cc < 0 || cc >= W) continue;
            const double* in = src + (rr * W + cc) * C;
            const double* k = kernel.data() + (i * kw + j) * C;
            for (std::size_t q = 0; q < C; ++q) o[q] += k[q] * in[q];
          }
        }
      }
    }
  }
  return y;
}

struct DepthwiseGrads {
  Tensor input, kernel, bias;
};

inline DepthwiseGrads depthwise_backward(const Tensor& x, const Tensor& kernel,
                                         const Tensor& dout) {
  const auto v = detail::batch_view(x);
  if (!dout.same_shape(x)) throw ShapeError("depthwise backward shape mismatch");
  const long kh = static_cast<long>(kernel.dim(0)), kw = static_cast<long>(kernel.dim(1));
  const long ch = (kh - 1) / 2, cw = (kw - 1) / 2;
  const long H = static_cast<long>(v.h), W = static_cast<long>(v.w);
  const std::size_t C = v.c;
  DepthwiseGrads g{Tensor(x.dims()), Tensor(kernel.dims()), Tensor({C})};
  for (std::size_t n = 0; n < v.n; ++n) {
    const double* src = x.data() + n * v.h * v.w * C;
    const double* dy = dout.data() + n * v.h * v.w * C;
    double* dx = g.input.data() + n * v.h * v.w * C;
    for (long r = 0; r < H; ++r) {
      for (long c = 0; c < W; ++c) {
        const double* go = dy + (r * W + c) * C;
        for (std::size_t q = 0; q < C; ++q) g.bias[q] += go[q];
        for (long i = 0; i < kh; ++i) {
          const long rr = r + i - ch;
          if (rr < 0 || rr >= H) continue;
          for (long j = 0; j < kw; ++j) {
            const long cc = c + j - cw;
            if (cc < 0 || cc >= W) continue;
            const double* in = src + (rr * W + cc) * C;
            double* din = dx + (rr * W + cc) * C;
            const double* k = kernel.data() + (i * kw + j) * C;
            double* dk = g.kernel.data() + (i * kw + j) * C;
            for (std::size_t q = 0; q < C; ++q) {
              dk[q] += go[q] * in[q];
              din[q] += go[q] * k[q];
            }
          }
        }
      }
    }
  }
  return g;
}

// ---- softmax cross-entropy --------------------------------------------------

struct LossResult {
  double loss = 0.0;
  Tensor grad;
};

/// Mean cross-entropy over the batch; grad is with respect to the logits.
inline LossResult softmax_xent(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("softmax_xent: logits " + logits.shape_string() + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  LossResult r{0.0, Tensor(logits.dims())};
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw PreconditionError("label out of range");
    }
    const double* z = logits.data() + i * k;
    const double m = *std::max_element(z, z + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - m);
    const double log_sum = m + std::log(sum);
    r.loss += log_sum - z[labels[i]];
    for (std::size_t j = 0; j < k; ++j) {
      r.grad.at(i, j) = (std::exp(z[j] - log_sum) - (static_cast<int>(j) == labels[i])) / n;
    }
  }
  r.loss /= static_cast<double>(n);
  return r;
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.dim(0));
  const std::size_t k = logits.dim(1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double* z = logits.data() + i * k;
    out[i] = static_cast<int>(std::max_element(z, z + k) - z);
  }
  return out;
}

}  // namespace ktn::nn
