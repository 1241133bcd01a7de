#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ktn/nn/adam.hpp"
#include "ktn/nn/conv.hpp"
#include "ktn/nn/layers.hpp"
#include "ktn/nn/noncommutativity.hpp"

namespace {

using ktn::Tensor;
using ktn::nn::ConvParams;
using ktn::nn::HorizontalPadding;

Tensor random_tensor(std::vector<std::size_t> dims, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(dims));
  for (auto& v : t.values()) v = n(rng);
  return t;
}

// Direct triple-loop cross-correlation; independent of im2col.
Tensor brute_conv(const Tensor& x, const ConvParams& p) {
  const long H = static_cast<long>(x.dim(0)), W = static_cast<long>(x.dim(1));
  const long kh = static_cast<long>(p.kh()), kw = static_cast<long>(p.kw());
  const long d = p.dilation;
  Tensor y({x.dim(0), x.dim(1), p.cout()});
  for (long r = 0; r < H; ++r) {
    for (long c = 0; c < W; ++c) {
      for (std::size_t o = 0; o < p.cout(); ++o) {
        double s = p.bias[o];
        for (long i = 0; i < kh; ++i) {
          for (long j = 0; j < kw; ++j) {
            const long rr = r + (i - (kh - 1) / 2) * d;
            long cc = c + (j - (kw - 1) / 2) * d;
            if (rr < 0 || rr >= H) continue;
            if (cc < 0 || cc >= W) {
              if (p.hpad == HorizontalPadding::zero) continue;
              cc = ((cc % W) + W) % W;
            }
            for (std::size_t q = 0; q < p.cin(); ++q) {
              s += p.kernel.at(i, j, q, o) * x.at(rr, cc, q);
            }
          }
        }
        y.at(r, c, o) = s;
      }
    }
  }
  return y;
}

Tensor shift_columns(const Tensor& x, long s) {
  Tensor y(x.dims());
  const long H = static_cast<long>(x.dim(0)), W = static_cast<long>(x.dim(1));
  const std::size_t C = x.dim(2);
  for (long r = 0; r < H; ++r) {
    for (long c = 0; c < W; ++c) {
      for (std::size_t q = 0; q < C; ++q) y.at(r, ((c + s) % W + W) % W, q) = x.at(r, c, q);
    }
  }
  return y;
}

TEST(Conv, IdentityKernel) {
  const Tensor x = random_tensor({6, 7, 3}, 1);
  ConvParams p{Tensor({1, 1, 3, 3}), Tensor({3})};
  for (std::size_t c = 0; c < 3; ++c) p.kernel.at(0, 0, c, c) = 1.0;
  EXPECT_EQ(ktn::nn::conv2d_forward(x, p), x);
}

TEST(Conv, OnesKernelCountsTaps) {
  ConvParams p{Tensor({3, 3, 1, 1}, 1.0), Tensor({1}), HorizontalPadding::circular};
  const Tensor y = ktn::nn::conv2d_forward(Tensor({5, 8, 1}, 1.0), p);
  for (std::size_t c = 0; c < 8; ++c) {
    EXPECT_DOUBLE_EQ(y.at(0, c, 0), 6.0);
    EXPECT_DOUBLE_EQ(y.at(2, c, 0), 9.0);
    EXPECT_DOUBLE_EQ(y.at(4, c, 0), 6.0);
  }
}

TEST(Conv, MatchesBruteForce) {
  for (auto hpad : {HorizontalPadding::zero, HorizontalPadding::circular}) {
    for (int dil : {1, 2}) {
      ConvParams p{random_tensor({5, 5, 2, 3}, 2), random_tensor({3}, 3), hpad, dil};
      const Tensor x = random_tensor({8, 8, 2}, 4);
      EXPECT_LT(ktn::max_abs_diff(ktn::nn::conv2d_forward(x, p), brute_conv(x, p)), 1e-12);
    }
  }
}

TEST(Conv, RectangularKernelMatchesBruteForce) {
  ConvParams p{random_tensor({3, 7, 2, 2}, 5), random_tensor({2}, 6), HorizontalPadding::circular};
  const Tensor x = random_tensor({6, 10, 2}, 7);
  EXPECT_LT(ktn::max_abs_diff(ktn::nn::conv2d_forward(x, p), brute_conv(x, p)), 1e-12);
}

TEST(Conv, ChannelMismatchThrows) {
  ConvParams p{Tensor({3, 3, 2, 1}), Tensor({1})};
  EXPECT_THROW(ktn::nn::conv2d_forward(Tensor({4, 4, 3}), p), ktn::ShapeError);
  ConvParams even{Tensor({2, 2, 1, 1}), Tensor({1})};
  EXPECT_THROW(ktn::nn::conv2d_forward(Tensor({4, 4, 1}), even), ktn::ShapeError);
}

TEST(Conv, CircularPaddingIsShiftEquivariant) {
  ConvParams p{random_tensor({5, 5, 2, 3}, 8), random_tensor({3}, 9), HorizontalPadding::circular};
  const Tensor x = random_tensor({6, 12, 2}, 10);
  const Tensor y = ktn::nn::conv2d_forward(x, p);
  for (long s : {1, 5, 11, -3}) {
    EXPECT_LT(ktn::max_abs_diff(ktn::nn::conv2d_forward(shift_columns(x, s), p),
                                shift_columns(y, s)),
              1e-12);
  }
}

TEST(Conv, LinearInTheKernel) {
  const Tensor x = random_tensor({7, 9, 2}, 11);
  const Tensor k1 = random_tensor({3, 3, 2, 2}, 12), k2 = random_tensor({3, 3, 2, 2}, 13);
  const Tensor zero({2});
  const double a = 0.7, b = -2.1;
  const auto conv = [&](const Tensor& k) {
    return ktn::nn::conv2d_forward(x, {k, zero, HorizontalPadding::circular});
  };
  EXPECT_LT(ktn::max_abs_diff(conv(a * k1 + b * k2), a * conv(k1) + b * conv(k2)), 1e-12);
}

TEST(Conv, BackwardMatchesFiniteDifferences) {
  ConvParams p{random_tensor({3, 3, 2, 2}, 14), random_tensor({2}, 15), HorizontalPadding::circular,
               2};
  Tensor x = random_tensor({2, 5, 6, 2}, 16);
  const Tensor w = random_tensor({2, 5, 6, 2}, 17);
  const auto loss = [&] {
    const Tensor y = ktn::nn::conv2d_forward(x, p);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
    return s;
  };
  const auto g = ktn::nn::conv2d_backward(x, p, w);
  const auto check = [&](Tensor& t, const Tensor& grad) {
    for (std::size_t i = 0; i < t.size(); i += 3) {
      const double h = 1e-5, t0 = t[i];
      t[i] = t0 + h;
      const double lp = loss();
      t[i] = t0 - h;
      const double lm = loss();
      t[i] = t0;
      const double fd = (lp - lm) / (2 * h);
      EXPECT_LT(std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-6}), 1e-4);
    }
  };
  check(x, g.input);
  check(p.kernel, g.kernel);
  check(p.bias, g.bias);
}

TEST(Relu, BackwardPassesPositiveGradients) {
  const Tensor x({4}, std::vector<double>{1.0, 2.0, -1.0, 0.0});
  const Tensor d({4}, std::vector<double>{5.0, 6.0, 7.0, 8.0});
  const Tensor g = ktn::nn::relu_backward(x, d);
  EXPECT_EQ(g, Tensor({4}, std::vector<double>{5.0, 6.0, 0.0, 0.0}));
  EXPECT_EQ(ktn::nn::relu_forward(x), Tensor({4}, std::vector<double>{1.0, 2.0, 0.0, 0.0}));
}

TEST(MaxPool, RampImageKeepsBlockMaxima) {
  Tensor x({4, 4, 1});
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
  const auto r = ktn::nn::maxpool2_forward(x);
  EXPECT_EQ(r.output, Tensor({2, 2, 1}, std::vector<double>{5, 7, 13, 15}));
  const Tensor din = ktn::nn::maxpool2_backward(x.dims(), r.argmax, Tensor({2, 2, 1}, 1.0));
  EXPECT_EQ(din[5] + din[7] + din[13] + din[15], 4.0);
  EXPECT_EQ(din[0], 0.0);
}

TEST(MaxPool, OddSidesFloor) {
  const auto r = ktn::nn::maxpool2_forward(random_tensor({2, 7, 5, 3}, 20));
  EXPECT_EQ(r.output.dims(), (std::vector<std::size_t>{2, 3, 2, 3}));
}

TEST(Softmax, UniformLogitsGiveLogTen) {
  const std::vector<int> labels{4, 0};
  const auto r = ktn::nn::softmax_xent(Tensor({2, 10}, 0.3), labels);
  EXPECT_NEAR(r.loss, std::log(10.0), 1e-12);
  EXPECT_NEAR(r.grad.at(0, 4), (0.1 - 1.0) / 2, 1e-12);
  EXPECT_NEAR(r.grad.at(0, 3), 0.1 / 2, 1e-12);
  const std::vector<int> bad{10, 0};
  EXPECT_THROW(ktn::nn::softmax_xent(Tensor({2, 10}), bad), ktn::PreconditionError);
}

TEST(Layers, DenseBackwardsMatchFiniteDifferences) {
  Tensor x = random_tensor({2, 3, 4, 3}, 30);
  Tensor pw = random_tensor({3, 5}, 31), pb = random_tensor({5}, 32);
  Tensor dk = random_tensor({3, 3, 5}, 33), db = random_tensor({5}, 34);
  const Tensor w = random_tensor({2, 3, 4, 5}, 35);
  const auto loss = [&] {
    const Tensor y = ktn::nn::depthwise_forward(ktn::nn::pointwise_forward(x, pw, pb), dk, db);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
    return s;
  };
  const Tensor mid = ktn::nn::pointwise_forward(x, pw, pb);
  const auto gd = ktn::nn::depthwise_backward(mid, dk, w);
  const auto gp = ktn::nn::pointwise_backward(x, pw, gd.input);
  const auto check = [&](Tensor& t, const Tensor& grad) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double h = 1e-5, t0 = t[i];
      t[i] = t0 + h;
      const double lp = loss();
      t[i] = t0 - h;
      const double lm = loss();
      t[i] = t0;
      const double fd = (lp - lm) / (2 * h);
      EXPECT_LT(std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-6}), 1e-4);
    }
  };
  check(dk, gd.kernel);
  check(db, gd.bias);
  check(pw, gp.weight);
  check(pb, gp.bias);
  check(x, gp.input);
}

TEST(Linear, BackwardMatchesFiniteDifferences) {
  Tensor x = random_tensor({3, 4}, 40), W = random_tensor({4, 2}, 41), b = random_tensor({2}, 42);
  const std::vector<int> labels{1, 0, 1};
  const auto loss = [&] {
    return ktn::nn::softmax_xent(ktn::nn::linear_forward(x, W, b), labels).loss;
  };
  const auto r = ktn::nn::softmax_xent(ktn::nn::linear_forward(x, W, b), labels);
  const auto g = ktn::nn::linear_backward(x, W, r.grad);
  for (auto* pair : {&x, &W, &b}) {
    const Tensor& grad = pair == &x ? g.input : pair == &W ? g.weight : g.bias;
    for (std::size_t i = 0; i < pair->size(); ++i) {
      const double h = 1e-5, t0 = (*pair)[i];
      (*pair)[i] = t0 + h;
      const double lp = loss();
      (*pair)[i] = t0 - h;
      const double lm = loss();
      (*pair)[i] = t0;
      EXPECT_NEAR(grad[i], (lp - lm) / (2 * h), 1e-8);
    }
  }
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor w = random_tensor({3}, 50);
  const Tensor before = w, g({3});
  ktn::nn::AdamState s;
  s.weight_decay = 0.0;
  const std::vector<ktn::nn::ParamRef> params{{&w, &g}};
  ktn::nn::adam_step(params, s);
  EXPECT_EQ(w, before);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor w({1}, 0.5);
  const Tensor g({1}, 1.0);
  ktn::nn::AdamState s;
  s.weight_decay = 0.0;
  const std::vector<ktn::nn::ParamRef> params{{&w, &g}};
  ktn::nn::adam_step(params, s);
  // m_hat = 1, v_hat = 1 after bias correction.
  EXPECT_NEAR(w[0] - 0.5, -1e-3 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, L2TermAppliesOnlyToDecayedParameters) {
  Tensor a({1}, 2.0), b({1}, 2.0);
  const Tensor g({1});
  ktn::nn::AdamState s;
  const std::vector<ktn::nn::ParamRef> params{{&a, &g, true}, {&b, &g, false}};
  ktn::nn::adam_step(params, s);
  EXPECT_LT(a[0], 2.0);
  EXPECT_EQ(b[0], 2.0);
}

TEST(Adam, IdenticalRunsAreBitIdentical) {
  const auto run = [] {
    Tensor w = random_tensor({10}, 51);
    ktn::nn::AdamState s;
    for (int step = 0; step < 5; ++step) {
      const Tensor g = random_tensor({10}, 60 + step);
      const std::vector<ktn::nn::ParamRef> params{{&w, &g}};
      ktn::nn::adam_step(params, s);
    }
    return w;
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ShapeMismatchThrows) {
  Tensor w({3});
  const Tensor g({4});
  ktn::nn::AdamState s;
  const std::vector<ktn::nn::ParamRef> params{{&w, &g}};
  EXPECT_THROW(ktn::nn::adam_step(params, s), ktn::ShapeError);
}

TEST(LrSchedule, DecaysAtEpochTwenty) {
  const ktn::nn::LrSchedule s;
  EXPECT_DOUBLE_EQ(s.at(0), 1e-3);
  EXPECT_DOUBLE_EQ(s.at(19), 1e-3);
  EXPECT_DOUBLE_EQ(s.at(20), 1e-4);
}

TEST(Noncommutativity, CanonicalCase) {
  ktn::nn::NoncommutativityCase c;
  c.x1 = 1.0;
  c.x2 = -1.0;
  const auto r = ktn::nn::noncommutativity_demo(c);
  EXPECT_EQ(r.interp_first, 0.0);
  EXPECT_EQ(r.conv_first, 0.5);
}

TEST(Noncommutativity, IdentityActivationCommutes) {
  std::mt19937_64 rng(70);
  std::uniform_real_distribution<double> u(-3.0, 3.0), ab(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    ktn::nn::NoncommutativityCase c;
    c.a = ab(rng);
    c.b = 1.0 - c.a;
    c.x1 = u(rng);
    c.x2 = u(rng);
    c.w1 = u(rng);
    c.w2 = u(rng);
    c.sigma = [](double z) { return z; };
    const auto r = ktn::nn::noncommutativity_demo(c);
    EXPECT_NEAR(r.interp_first, r.conv_first, 1e-12);
  }
}

TEST(Noncommutativity, ReluCommutesExactlyWhenPreActivationsShareSign) {
  for (int i = -6; i <= 6; ++i) {
    for (int j = -6; j <= 6; ++j) {
      for (double w1 : {-1.5, 0.5, 2.0}) {
        ktn::nn::NoncommutativityCase c;
        c.a = 0.25;
        c.b = 0.75;
        c.x1 = i * 0.5;
        c.x2 = j * 0.5;
        c.w1 = w1;
        c.w2 = 1.3;
        const auto r = ktn::nn::noncommutativity_demo(c);
        const double z1 = w1 * c.x1, z2 = w1 * c.x2;
        const bool same_sign = (z1 >= 0 && z2 >= 0) || (z1 <= 0 && z2 <= 0);
        EXPECT_EQ(std::abs(r.interp_first - r.conv_first) < 1e-12, same_sign)
            << c.x1 << " " << c.x2 << " " << w1;
      }
    }
  }
}

}  // namespace
