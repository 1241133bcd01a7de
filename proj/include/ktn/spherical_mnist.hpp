#pragma once

// Spherical MNIST: planar digits back-projected onto an equirectangular canvas
// through the inverse gnomonic map at a chosen point of tangency.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ktn/geometry.hpp"
#include "ktn/idx.hpp"
#include "ktn/io.hpp"
#include "ktn/parallel.hpp"
#include "ktn/tensor.hpp"

namespace ktn::data {

inline constexpr double kDigitFovDeg = 65.5;
inline constexpr int kTestThetaCount = 9;

/// Test placements: 8, 16, ..., 72 degrees.
inline std::vector<double> test_thetas_deg() {
  std::vector<double> t;
  for (int i = 1; i <= kTestThetaCount; ++i) t.push_back(8.0 * i);
  return t;
}

inline double deg2rad(double d) { return d * geometry::kPi / 180.0; }

struct CanvasSpec {
  int height = 80;
  int width = 160;
  double fov_deg = kDigitFovDeg;

  geometry::GridSpec grid() const { return {height, width}; }
};

/// Bilinear read of a planar image at continuous pixel coordinates (pixel
/// centers at integer + 0.5); zero outside the image.
inline double sample_planar(std::span<const double> img, int rows, int cols, double x, double y) {
  const double px = x - 0.5, py = y - 0.5;
  const double fx0 = std::floor(px), fy0 = std::floor(py);
  const double fx = px - fx0, fy = py - fy0;
  const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
  double acc = 0.0;
  for (int a = 0; a < 2; ++a) {
    const int r = y0 + a;
    if (r < 0 || r >= rows) continue;
    for (int b = 0; b < 2; ++b) {
      const int c = x0 + b;
      if (c < 0 || c >= cols) continue;
      acc += (a ? fy : 1.0 - fy) * (b ? fx : 1.0 - fx) * img[r * cols + c];
    }
  }
  return acc;
}

/// Renders a rows x cols planar image onto the equirectangular canvas: each
/// canvas pixel center is projected onto the plane tangent at `center`, where
/// the image spans `fov` radians. Pixels behind the plane stay zero.
inline void backproject(std::span<const double> img, int rows, int cols,
                        const geometry::SphereCoord& center, double fov,
                        const geometry::GridSpec& grid, double* canvas) {
  const double spacing = 2.0 * std::tan(0.5 * fov) / cols;
  const geometry::TangentFrame frame(center);
  const double half_u = 0.5 * cols * spacing + spacing, half_v = 0.5 * rows * spacing + spacing;
  for (int r = 0; r < grid.height; ++r) {
    for (int c = 0; c < grid.width; ++c) {
      double value = 0.0;
      const auto d = geometry::to_unit_vector(geometry::pixel_center(c, r, grid));
      const double depth = geometry::dot(d, frame.normal);
      if (depth > 1e-12) {
        const double u = geometry::dot(d, frame.east) / depth;
        const double v = geometry::dot(d, frame.north) / depth;
        if (std::abs(u) < half_u && std::abs(v) < half_v) {
          value = sample_planar(img, rows, cols, u / spacing + 0.5 * cols, 0.5 * rows - v / spacing);
        }
      }
      canvas[static_cast<std::size_t>(r) * grid.width + c] = value;
    }
  }
}

struct Placement {
  std::size_t digit = 0;  ///< index into the planar split
  double theta = 0.0;
  double phi = 0.0;
};

/// Train: one placement per digit, theta ~ U[0, pi]. Test: one placement per
/// digit and test angle (degrees). phi ~ U[0, 2pi) in both splits.
inline std::vector<Placement> plan_placements(std::size_t digits, bool test, std::uint64_t seed,
                                              std::vector<double> thetas = test_thetas_deg()) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> theta_dist(0.0, geometry::kPi);
  std::uniform_real_distribution<double> phi_dist(0.0, geometry::kTwoPi);
  std::vector<Placement> out;
  for (std::size_t d = 0; d < digits; ++d) {
    if (test) {
      for (double t : thetas) out.push_back({d, deg2rad(t), phi_dist(rng)});
    } else {
      const double theta = theta_dist(rng);
      out.push_back({d, theta, phi_dist(rng)});
    }
  }
  return out;
}

/// In-memory spherical split, pixels stored quantized to u8 (value / 255).
struct SphericalSet {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  ///< N x H x W
  std::vector<int> labels;
  std::vector<double> thetas;
  std::vector<double> phis;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return height * width; }

  void copy_image(std::size_t i, double* dst) const {
    const std::uint8_t* p = pixels.data() + i * image_size();
    for (std::size_t k = 0; k < image_size(); ++k) dst[k] = p[k] / 255.0;
  }
  /// H x W x 1 map of sample i.
  Tensor image(std::size_t i) const {
    Tensor t({height, width, 1});
    copy_image(i, t.data());
    return t;
  }
  /// N x H x W x 1 batch of the given samples.
  Tensor batch(std::span<const std::size_t> idx) const {
    Tensor t({idx.size(), height, width, 1});
    for (std::size_t k = 0; k < idx.size(); ++k) copy_image(idx[k], t.data() + k * image_size());
    return t;
  }
};

inline SphericalSet build_spherical(const idx::Dataset& mnist, std::size_t digits, bool test,
                                    std::uint64_t seed, const CanvasSpec& spec = {},
                                    std::vector<double> thetas_deg = test_thetas_deg()) {
  digits = std::min(digits, mnist.images.count);
  spec.grid().validate_equirect();
  const auto plan = plan_placements(digits, test, seed, std::move(thetas_deg));
  SphericalSet s;
  s.height = static_cast<std::size_t>(spec.height);
  s.width = static_cast<std::size_t>(spec.width);
  s.pixels.resize(plan.size() * s.image_size());
  parallel_for(plan.size(), [&](std::size_t i) {
    const auto& p = plan[i];
    std::vector<double> canvas(s.image_size());
    backproject(mnist.images.image(p.digit), static_cast<int>(mnist.images.rows),
                static_cast<int>(mnist.images.cols), geometry::SphereCoord::make(p.theta, p.phi),
                deg2rad(spec.fov_deg), spec.grid(), canvas.data());
    std::uint8_t* dst = s.pixels.data() + i * s.image_size();
    for (std::size_t k = 0; k < canvas.size(); ++k) dst[k] = io::quantize_u8(canvas[k]);
  });
  for (const auto& p : plan) {
    s.labels.push_back(mnist.labels[p.digit]);
    s.thetas.push_back(p.theta);
    s.phis.push_back(p.phi);
  }
  return s;
}

/// On disk: images.ktnt (u8, N x H x W x 1) and meta.ktnt (f32, N x 3 with
/// label, theta, phi).
inline void save_spherical(const std::filesystem::path& dir, const SphericalSet& s) {
  std::filesystem::create_directories(dir);
  io::save_u8(dir / "images.ktnt", {{s.size(), s.height, s.width, 1}, s.pixels});
  Tensor meta({s.size(), 3});
  for (std::size_t i = 0; i < s.size(); ++i) {
    meta.at(i, 0) = s.labels[i];
    meta.at(i, 1) = s.thetas[i];
    meta.at(i, 2) = s.phis[i];
  }
  io::save_tensor(dir / "meta.ktnt", meta);
}

inline SphericalSet load_spherical(const std::filesystem::path& dir) {
  auto img = io::load_u8(dir / "images.ktnt");
  const Tensor meta = io::load_tensor(dir / "meta.ktnt");
  if (img.dims.size() != 4 || img.dims[3] != 1 || meta.rank() != 2 || meta.dim(1) != 3 ||
      meta.dim(0) != img.dims[0]) {
    throw ShapeError("spherical dataset in " + dir.string() + " has inconsistent shapes");
  }
  SphericalSet s;
  s.height = img.dims[1];
  s.width = img.dims[2];
  s.pixels = std::move(img.bytes);
  for (std::size_t i = 0; i < meta.dim(0); ++i) {
    s.labels.push_back(static_cast<int>(meta.at(i, 0)));
    s.thetas.push_back(meta.at(i, 1));
    s.phis.push_back(meta.at(i, 2));
  }
  return s;
}

}  // namespace ktn::data
