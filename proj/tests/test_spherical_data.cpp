#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>

#include "ktn/spherical_mnist.hpp"

namespace {

namespace fs = std::filesystem;
namespace g = ktn::geometry;
using ktn::data::deg2rad;

// Smooth synthetic "digits": a ring plus a bar, varying with the index.
ktn::idx::Dataset synthetic_mnist(std::size_t n) {
  ktn::idx::Dataset d;
  d.images.count = n;
  d.images.rows = d.images.cols = 28;
  d.images.pixels.resize(n * 784);
  for (std::size_t i = 0; i < n; ++i) {
    const double r0 = 6.0 + static_cast<double>(i % 4);
    for (int y = 0; y < 28; ++y) {
      for (int x = 0; x < 28; ++x) {
        const double dx = x + 0.5 - 14.0, dy = y + 0.5 - 14.0;
        const double ring = std::exp(-std::pow(std::hypot(dx, dy) - r0, 2) / 4.0);
        const double bar = std::exp(-std::pow(dx - 0.3 * dy, 2) / 3.0) * (std::abs(dy) < 10);
        d.images.pixels[i * 784 + y * 28 + x] = std::min(1.0, ring + (i % 2 ? bar : 0.0));
      }
    }
    d.labels.push_back(static_cast<int>(i % 10));
  }
  return d;
}

double roundtrip_error(std::span<const double> digit) {
  const ktn::data::CanvasSpec spec;
  const auto grid = spec.grid();
  std::vector<double> canvas(static_cast<std::size_t>(grid.height) * grid.width);
  const g::SphereCoord center{deg2rad(90.0), deg2rad(180.0)};
  ktn::data::backproject(digit, 28, 28, center, deg2rad(spec.fov_deg), grid, canvas.data());
  const g::TangentGrid tg{center, deg2rad(spec.fov_deg), 28};
  const auto map = g::build_tangent_sampling_map(tg, grid);
  std::vector<double> crop(784);
  map.apply_into(canvas.data(), 1, crop.data());
  double err = 0.0;
  for (std::size_t i = 0; i < 784; ++i) err += std::abs(crop[i] - digit[i]);
  return err / 784;
}

TEST(SphericalMnist, TestSplitIsNineTimesLarger) {
  const auto mnist = synthetic_mnist(12);
  const auto s = ktn::data::build_spherical(mnist, 12, true, 3);
  EXPECT_EQ(s.size(), 108u);
  EXPECT_EQ(s.height, 80u);
  EXPECT_EQ(s.width, 160u);
  EXPECT_EQ(s.pixels.size(), 108u * 80 * 160);
  const auto train = ktn::data::build_spherical(mnist, 12, false, 3);
  EXPECT_EQ(train.size(), 12u);
}

TEST(SphericalMnist, PlacementAnglesFollowTheProtocol) {
  const auto test = ktn::data::plan_placements(50, true, 4);
  ASSERT_EQ(test.size(), 450u);
  for (std::size_t i = 0; i < test.size(); ++i) {
    EXPECT_NEAR(test[i].theta, deg2rad(8.0 * (1 + i % 9)), 1e-15);
    EXPECT_EQ(test[i].digit, i / 9);
    EXPECT_GE(test[i].phi, 0.0);
    EXPECT_LT(test[i].phi, 2 * g::kPi);
  }
  const auto train = ktn::data::plan_placements(2000, false, 4);
  double lo = 10, hi = -10;
  for (const auto& p : train) {
    EXPECT_GE(p.theta, 0.0);
    EXPECT_LE(p.theta, g::kPi);
    lo = std::min(lo, p.theta);
    hi = std::max(hi, p.theta);
  }
  EXPECT_LT(lo, 0.05);
  EXPECT_GT(hi, g::kPi - 0.05);
}

TEST(SphericalMnist, LabelsAndAnglesAreRecorded) {
  const auto mnist = synthetic_mnist(5);
  const auto s = ktn::data::build_spherical(mnist, 5, true, 9);
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_EQ(s.labels[i], mnist.labels[i / 9]);
    EXPECT_NEAR(s.thetas[i], deg2rad(8.0 * (1 + i % 9)), 1e-15);
  }
}

TEST(SphericalMnist, SameSeedGivesByteIdenticalFiles) {
  const auto mnist = synthetic_mnist(6);
  const auto root = fs::temp_directory_path() / "ktn_sph_tests";
  const auto a = ktn::data::build_spherical(mnist, 6, true, 7);
  const auto b = ktn::data::build_spherical(mnist, 6, true, 7);
  ktn::data::save_spherical(root / "a", a);
  ktn::data::save_spherical(root / "b", b);
  for (const char* f : {"images.ktnt", "meta.ktnt"}) {
    EXPECT_EQ(ktn::io::read_file(root / "a" / f), ktn::io::read_file(root / "b" / f)) << f;
  }
  const auto c = ktn::data::build_spherical(mnist, 6, true, 8);
  EXPECT_NE(a.pixels, c.pixels);
  const auto back = ktn::data::load_spherical(root / "a");
  EXPECT_EQ(back.pixels, a.pixels);
  EXPECT_EQ(back.labels, a.labels);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(back.thetas[i], a.thetas[i], 1e-6);
    EXPECT_NEAR(back.phis[i], a.phis[i], 1e-6);
  }
}

TEST(SphericalMnist, PixelsStayInUnitRangeWithZeroBackground) {
  const auto mnist = synthetic_mnist(3);
  const auto s = ktn::data::build_spherical(mnist, 3, true, 2);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto img = s.image(i);
    const auto far = g::SphereCoord{g::kPi - s.thetas[i], s.phis[i] + g::kPi};
    const auto xy = g::sphere_to_equirect(far, g::GridSpec{80, 160});
    const auto r = std::min<std::size_t>(79, static_cast<std::size_t>(xy[1]));
    EXPECT_EQ(img.at(r, static_cast<std::size_t>(xy[0]), 0), 0.0);
    for (double v : img.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(SphericalMnist, EquatorPlacementRoundTripsThroughTangentCrop) {
  const auto mnist = synthetic_mnist(4);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_LT(roundtrip_error(mnist.images.image(i)), 0.05);
}

TEST(SphericalMnist, EquatorRoundTripOnReferenceDigits) {
  const char* env = std::getenv("KTN_MNIST_DIR");
  const fs::path dir = env ? env : "/root/data/mnist";
  if (!fs::exists(dir / "t10k-images-idx3-ubyte")) GTEST_SKIP() << "MNIST not available";
  const auto mnist = ktn::idx::load_mnist(dir, "test");
  double worst = 0.0;
  for (std::size_t i = 0; i < 20; ++i) worst = std::max(worst, roundtrip_error(mnist.images.image(i)));
  EXPECT_LT(worst, 0.05);
}

}  // namespace
