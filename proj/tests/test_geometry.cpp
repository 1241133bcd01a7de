#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ktn/geometry.hpp"

namespace {

namespace g = ktn::geometry;
using g::kPi;

constexpr double kDeg = kPi / 180.0;

// Independent gnomonic oracle: rotate the sphere so the tangency point lands on
// +x, then intersect the ray with the plane x = 1.
g::TangentPoint rotated_gnomonic(const g::SphereCoord& c, const g::SphereCoord& p) {
  const auto d = g::to_unit_vector(p);
  const double cz = std::cos(-c.phi), sz = std::sin(-c.phi);
  const double x1 = cz * d[0] - sz * d[1], y1 = sz * d[0] + cz * d[1], z1 = d[2];
  const double a = kPi / 2 - c.theta;
  const double x2 = x1 * std::cos(a) + z1 * std::sin(a);
  const double z2 = -x1 * std::sin(a) + z1 * std::cos(a);
  return {y1 / x2, z2 / x2};
}

g::SphereCoord random_point(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), ph(0.0, 2 * kPi);
  return {std::acos(u(rng)), ph(rng)};
}

TEST(Equirect, LatticeExamples) {
  const auto grid = g::GridSpec::equirect(80);
  auto p = g::equirect_to_sphere(0, 0, grid);
  EXPECT_DOUBLE_EQ(p.theta, 0.0);
  EXPECT_DOUBLE_EQ(p.phi, 0.0);
  p = g::equirect_to_sphere(80, 40, grid);
  EXPECT_DOUBLE_EQ(p.theta, kPi / 2);
  EXPECT_DOUBLE_EQ(p.phi, kPi);
  p = g::equirect_to_sphere(159, 79, grid);
  EXPECT_DOUBLE_EQ(p.theta, 79 * kPi / 80);
  EXPECT_DOUBLE_EQ(p.phi, 159 * kPi / 80);
}

TEST(Equirect, OutOfRangeIsRejected) {
  const auto grid = g::GridSpec::equirect(80);
  EXPECT_THROW(g::equirect_to_sphere(160, 0, grid), ktn::PreconditionError);
  EXPECT_THROW(g::equirect_to_sphere(0, -1, grid), ktn::PreconditionError);
  EXPECT_THROW(g::equirect_to_sphere(0, 80, grid), ktn::PreconditionError);
  EXPECT_THROW(g::GridSpec::equirect(0), ktn::PreconditionError);
}

TEST(Equirect, LatticeRoundTripIsExact) {
  const auto grid = g::GridSpec::equirect(80);
  for (int y = 0; y < grid.height; ++y) {
    for (int x = 0; x < grid.width; ++x) {
      const auto xy = g::sphere_to_equirect(g::equirect_to_sphere(x, y, grid), grid);
      ASSERT_NEAR(xy[0], x, 1e-12);
      ASSERT_NEAR(xy[1], y, 1e-12);
      ASSERT_EQ(std::lround(xy[0]), x);
    }
  }
}

TEST(SphereCoord, NormalizesAzimuthAndRejectsBadTheta) {
  EXPECT_NEAR(g::SphereCoord::make(1.0, -0.5).phi, 2 * kPi - 0.5, 1e-15);
  EXPECT_NEAR(g::SphereCoord::make(1.0, 7.0).phi, 7.0 - 2 * kPi, 1e-15);
  EXPECT_THROW(g::SphereCoord::make(-0.1, 0.0), ktn::DomainError);
  EXPECT_THROW(g::SphereCoord::make(kPi + 0.1, 0.0), ktn::DomainError);
}

TEST(Gnomonic, TangencyPointMapsToOrigin) {
  const g::SphereCoord c{1.1, 2.3};
  const auto t = g::gnomonic_forward(c, c);
  EXPECT_NEAR(t.u, 0.0, 1e-15);
  EXPECT_NEAR(t.v, 0.0, 1e-15);
}

TEST(Gnomonic, EquatorAzimuthOffset) {
  const auto t = g::gnomonic_forward({kPi / 2, 0.0}, {kPi / 2, 0.3});
  EXPECT_NEAR(t.u, std::tan(0.3), 1e-14);
  EXPECT_NEAR(t.u, 0.309336, 1e-6);
  EXPECT_NEAR(t.v, 0.0, 1e-14);
}

TEST(Gnomonic, AgreesWithRotatedRayOracle) {
  std::mt19937_64 rng(17);
  int checked = 0;
  while (checked < 2000) {
    const auto c = random_point(rng), p = random_point(rng);
    if (g::angular_distance(c, p) > 1.4) continue;
    const auto a = g::gnomonic_forward(c, p), b = rotated_gnomonic(c, p);
    ASSERT_NEAR(a.u, b.u, 1e-9 * (1 + std::abs(b.u)));
    ASSERT_NEAR(a.v, b.v, 1e-9 * (1 + std::abs(b.v)));
    ++checked;
  }
}

TEST(Gnomonic, RoundTripOnRandomPairs) {
  std::mt19937_64 rng(3);
  int checked = 0;
  double worst = 0.0;
  while (checked < 10000) {
    const auto c = random_point(rng), p = random_point(rng);
    if (g::angular_distance(c, p) >= 1.5) continue;
    const auto t = g::gnomonic_forward(c, p);
    worst = std::max(worst, g::angular_distance(g::gnomonic_inverse(c, t.u, t.v), p));
    ++checked;
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(Gnomonic, HorizonIsRejected) {
  EXPECT_THROW(g::gnomonic_forward({kPi / 2, 0.0}, {kPi / 2, kPi / 2}), ktn::DomainError);
  EXPECT_THROW(g::gnomonic_forward({kPi / 2, 0.0}, {kPi / 2, kPi}), ktn::DomainError);
}

TEST(SamplingMap, ExactLatticeHitHasOneEntry) {
  const auto grid = g::GridSpec::equirect(80);
  const auto tg = g::TangentGrid::with_spacing(g::pixel_center(37, 40, grid), 1, kPi / 80);
  const auto map = g::build_tangent_sampling_map(tg, grid);
  ASSERT_EQ(map.entries.size(), 1u);
  EXPECT_EQ(map.entries[0].in_index, 40u * 160 + 37);
  EXPECT_NEAR(map.entries[0].weight, 1.0, 1e-12);
}

TEST(SamplingMap, PartitionOfUnityAndNonNegativeWeights) {
  const auto grid = g::GridSpec::equirect(80);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> th(0.2, kPi - 0.2), ph(0.0, 2 * kPi);
  for (int trial = 0; trial < 20; ++trial) {
    const auto tg = g::TangentGrid::with_spacing({th(rng), ph(rng)}, 15, kPi / 80);
    const auto map = g::build_tangent_sampling_map(tg, grid);
    ASSERT_EQ(map.out_size(), 225u);
    for (std::size_t o = 0; o < map.out_size(); ++o) {
      double sum = 0.0;
      for (const auto& e : map.row(o)) {
        EXPECT_GE(e.weight, 0.0);
        EXPECT_LT(e.in_index, 80u * 160);
        sum += e.weight;
      }
      EXPECT_NEAR(sum, 1.0, 1e-6);
      EXPECT_LE(map.row(o).size(), 4u);
    }
  }
}

TEST(SamplingMap, SeamMatchesUnrolledPeriodicImage) {
  const auto grid = g::GridSpec::equirect(40);
  const int H = grid.height, W = grid.width;
  ktn::Tensor img({static_cast<std::size_t>(H), static_cast<std::size_t>(W), 1});
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      img.at(r, c, 0) = std::sin(2 * kPi * c / W * 3) + 0.1 * r + std::cos(2 * kPi * c / W);
    }
  }
  // Two periods side by side covering columns [-W, W), so the oracle below
  // indexes a plain array with no wrapping.
  std::vector<double> wide(static_cast<std::size_t>(H) * 2 * W);
  for (int r = 0; r < H; ++r) {
    for (int c = -W; c < W; ++c) {
      wide[r * 2 * W + c + W] = img.at(r, (c + W) % W, 0);
    }
  }
  const auto tg = g::TangentGrid::with_spacing({kPi / 2 + 0.1, 0.0}, 21, kPi / H);
  const auto map = g::build_tangent_sampling_map(tg, grid);
  const auto out = map.apply(img);
  const g::TangentFrame frame(tg.center);
  double worst = 0.0;
  for (int r = 0; r < tg.side; ++r) {
    for (int c = 0; c < tg.side; ++c) {
      const auto p = g::gnomonic_inverse(frame, tg.pixel_u(c), tg.pixel_v(r));
      double phi = p.phi > kPi ? p.phi - 2 * kPi : p.phi;  // unrolled around the seam
      const double x = phi * W / (2 * kPi) - 0.5, y = p.theta * H / kPi - 0.5;
      const double x0 = std::floor(x), y0 = std::floor(y);
      const double fx = x - x0, fy = y - y0;
      double v = 0.0;
      for (int a = 0; a < 2; ++a) {
        const int rr = std::clamp(static_cast<int>(y0) + a, 0, H - 1);
        for (int b = 0; b < 2; ++b) {
          const int cc = static_cast<int>(x0) + b;
          v += (a ? fy : 1 - fy) * (b ? fx : 1 - fx) * wide[rr * 2 * W + cc + W];
        }
      }
      worst = std::max(worst, std::abs(v - out.at(r, c, 0)));
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(SamplingMap, WideFieldOfViewIsRejected) {
  const auto grid = g::GridSpec::equirect(40);
  g::TangentGrid tg{{kPi / 2, 0.0}, kPi, 5};
  EXPECT_THROW(g::build_tangent_sampling_map(tg, grid), ktn::DomainError);
}

TEST(KernelShape, EquatorWithMatchedPitchIsSourceSize) {
  const auto grid = g::GridSpec::equirect(80);
  EXPECT_EQ(g::target_kernel_shape(kPi / 2, 3, kPi / 80, grid), (g::KernelShape{3, 3, 1}));
  EXPECT_EQ(g::target_kernel_shape(kPi / 2, 5, kPi / 80, grid), (g::KernelShape{5, 5, 1}));
}

TEST(KernelShape, NearPoleIsCappedAndDilated) {
  const auto grid = g::GridSpec::equirect(80);
  const auto s = g::target_kernel_shape(4 * kDeg, 3, kPi / 80, grid);
  EXPECT_EQ(s.width, 65);
  EXPECT_GT(s.dilation, 1);
}

TEST(KernelShape, PolesAreRejected) {
  const auto grid = g::GridSpec::equirect(80);
  EXPECT_THROW(g::target_kernel_shape(0.0, 3, kPi / 80, grid), ktn::DomainError);
  EXPECT_THROW(g::target_kernel_shape(kPi, 3, kPi / 80, grid), ktn::DomainError);
  EXPECT_THROW(g::target_kernel_shape(1.0, 4, kPi / 80, grid), ktn::PreconditionError);
}

struct ShapeCase {
  int height;
  int k;
  double spacing_pitches;
};

class KernelShapeSweep : public ::testing::TestWithParam<ShapeCase> {};

TEST_P(KernelShapeSweep, PropertiesHoldEveryDegree) {
  const auto [height, k, pitches] = GetParam();
  const auto grid = g::GridSpec::equirect(height);
  const double spacing = pitches * kPi / height;
  std::vector<g::KernelShape> shapes(180);
  for (int d = 1; d < 180; ++d) {
    const double theta = d * kDeg;
    const auto s = g::target_kernel_shape(theta, k, spacing, grid);
    shapes[d] = s;
    EXPECT_EQ(s.height % 2, 1) << d;
    EXPECT_EQ(s.width % 2, 1) << d;
    EXPECT_LE(s.height, g::kMaxKernelSide) << d;
    EXPECT_LE(s.width, g::kMaxKernelSide) << d;
    EXPECT_GE(s.dilation, 1);
    const auto half = g::receptive_field_half_extent(theta, k, spacing, grid);
    EXPECT_GE(0.5 * s.effective_height(), half[0] - 1e-9) << d;
    EXPECT_GE(0.5 * s.effective_width(), half[1] - 1e-9) << d;
    if (s.dilation > 1) {
      EXPECT_EQ(std::max(s.height, s.width), g::kMaxKernelSide) << d;
    }
  }
  for (int d = 1; d < 180; ++d) {
    EXPECT_EQ(shapes[d], shapes[180 - d]) << "theta " << d;
  }
  for (int d = 90; d > 1; --d) {
    EXPECT_LE(shapes[d].effective_width(), shapes[d - 1].effective_width()) << d;
  }
}

INSTANTIATE_TEST_SUITE_P(Grids, KernelShapeSweep,
                         ::testing::Values(ShapeCase{80, 3, 1.0}, ShapeCase{80, 5, 1.0},
                                           ShapeCase{40, 5, 1.0}, ShapeCase{20, 5, 1.0},
                                           ShapeCase{80, 3, 2.0}));

TEST(Projection, EquatorReproducesKernel) {
  const auto grid = g::GridSpec::equirect(80);
  const auto shape = g::target_kernel_shape(kPi / 2, 3, kPi / 80, grid);
  const auto P = g::projected_kernel_weights(kPi / 2, 3, shape, kPi / 80, grid);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  ktn::Tensor K({3, 3, 2, 2});
  for (auto& v : K.values()) v = n(rng);
  const auto out = g::apply_projection(P, shape, K);
  EXPECT_LT(ktn::max_abs_diff(out, K), 0.05);
}

TEST(Projection, DeltaKernelMassStaysCentered) {
  const auto grid = g::GridSpec::equirect(80);
  for (double theta : {kPi / 2, kPi / 3, 0.5}) {
    const auto shape = g::target_kernel_shape(theta, 3, kPi / 80, grid);
    const auto P = g::projected_kernel_weights(theta, 3, shape, kPi / 80, grid);
    ktn::Tensor K({3, 3, 1, 1});
    K.at(1, 1, 0, 0) = 1.0;
    const auto out = g::apply_projection(P, shape, K);
    double mass = 0.0;
    for (double v : out.values()) mass += v;
    const auto center = out.at((shape.height - 1) / 2, (shape.width - 1) / 2, 0, 0);
    if (theta == kPi / 2) {
      EXPECT_GE(mass, 0.95);
      EXPECT_LE(mass, 1.0 + 1e-9);
    }
    EXPECT_GT(center, 0.5) << theta;
    for (double v : out.values()) EXPECT_LE(v, center + 1e-12);
  }
}

TEST(Projection, EntriesAreConvexWeights) {
  const auto grid = g::GridSpec::equirect(80);
  for (int d = 2; d < 179; d += 7) {
    const double theta = d * kDeg;
    const auto shape = g::target_kernel_shape(theta, 5, kPi / 80, grid);
    const auto P = g::projected_kernel_weights(theta, 5, shape, kPi / 80, grid);
    ASSERT_EQ(P.dim(0), static_cast<std::size_t>(shape.taps()));
    ASSERT_EQ(P.dim(1), 25u);
    for (std::size_t r = 0; r < P.dim(0); ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < P.dim(1); ++c) {
        EXPECT_GE(P.at(r, c), 0.0);
        sum += P.at(r, c);
      }
      EXPECT_LE(sum, 1.0 + 1e-6);
    }
  }
}

TEST(Projection, IsLinearInTheKernel) {
  const auto grid = g::GridSpec::equirect(80);
  const double theta = 0.7;
  const auto shape = g::target_kernel_shape(theta, 5, kPi / 80, grid);
  const auto P = g::projected_kernel_weights(theta, 5, shape, kPi / 80, grid);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  ktn::Tensor K1({5, 5, 3, 2}), K2({5, 5, 3, 2});
  for (auto& v : K1.values()) v = n(rng);
  for (auto& v : K2.values()) v = n(rng);
  const double a = 0.3, b = -1.7;
  const auto lhs = g::apply_projection(P, shape, a * K1 + b * K2);
  const auto rhs = a * g::apply_projection(P, shape, K1) + b * g::apply_projection(P, shape, K2);
  EXPECT_LT(ktn::max_abs_diff(lhs, rhs), 1e-12);
}

TEST(Projection, MismatchedShapeIsRejected) {
  const auto grid = g::GridSpec::equirect(80);
  EXPECT_THROW(g::projected_kernel_weights(0.7, 3, {3, 3, 1}, kPi / 80, grid),
               ktn::PreconditionError);
}

}  // namespace
