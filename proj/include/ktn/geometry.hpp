#pragma once

// Sphere <-> equirectangular <-> tangent-plane geometry.
//
// Conventions used throughout:
//  * theta is the polar angle (0 at the north pole), phi the azimuth in [0, 2pi).
//  * Equirectangular continuous coordinates follow (theta, phi) = (pi*y/H, 2pi*x/W);
//    the pixel with integer index (col, row) has its center at (col+0.5, row+0.5).
//  * The tangent plane at a center point has its u axis pointing east (increasing
//    phi) and its v axis pointing north (decreasing theta), plane at distance 1.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ktn/error.hpp"
#include "ktn/tensor.hpp"

namespace ktn::geometry {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
/// Largest kernel side the shape rule will emit; larger footprints use dilation.
inline constexpr int kMaxKernelSide = 65;
/// Bilinear weights below this are not stored.
inline constexpr double kWeightEpsilon = 1e-12;

inline double wrap_phi(double phi) {
  double p = std::fmod(phi, kTwoPi);
  if (p < 0.0) p += kTwoPi;
  if (p >= kTwoPi) p = 0.0;
  return p;
}

struct SphereCoord {
  double theta = 0.0;
  double phi = 0.0;

  /// Validates theta and normalizes phi into [0, 2pi).
  static SphereCoord make(double theta, double phi) {
    if (!(theta >= 0.0 && theta <= kPi)) {
      throw DomainError("theta must lie in [0, pi], got " + std::to_string(theta));
    }
    return {theta, wrap_phi(phi)};
  }
};

struct GridSpec {
  int height = 0;
  int width = 0;

  static GridSpec equirect(int height) {
    if (height < 1) throw PreconditionError("grid height must be >= 1");
    return {height, 2 * height};
  }

  void validate_equirect() const {
    if (height < 1 || width != 2 * height) {
      throw PreconditionError("equirectangular grid must be H x 2H, got " +
                              std::to_string(height) + "x" + std::to_string(width));
    }
  }

  double row_pitch() const { return kPi / height; }
  double col_pitch() const { return kTwoPi / width; }
  bool operator==(const GridSpec&) const = default;
};

/// (theta, phi) = (pi*y/H, 2pi*x/W) for continuous coordinates 0 <= x < W, 0 <= y < H.
inline SphereCoord equirect_to_sphere(double x, double y, const GridSpec& grid) {
  if (!(x >= 0.0 && x < grid.width && y >= 0.0 && y < grid.height)) {
    throw PreconditionError("equirect coordinate (" + std::to_string(x) + ", " +
                            std::to_string(y) + ") outside " + std::to_string(grid.width) +
                            "x" + std::to_string(grid.height));
  }
  return {kPi * y / grid.height, kTwoPi * x / grid.width};
}

/// Inverse of equirect_to_sphere; x in [0, W), y in [0, H].
inline std::array<double, 2> sphere_to_equirect(const SphereCoord& p, const GridSpec& grid) {
  double x = wrap_phi(p.phi) * grid.width / kTwoPi;
  if (x >= grid.width) x -= grid.width;
  return {x, p.theta * grid.height / kPi};
}

/// Sphere point at the center of pixel (col, row).
inline SphereCoord pixel_center(int col, int row, const GridSpec& grid) {
  return equirect_to_sphere(col + 0.5, row + 0.5, grid);
}

inline double row_center_theta(int row, int height) { return kPi * (row + 0.5) / height; }

using Vec3 = std::array<double, 3>;

inline double dot(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

inline Vec3 to_unit_vector(const SphereCoord& p) {
  const double s = std::sin(p.theta);
  return {s * std::cos(p.phi), s * std::sin(p.phi), std::cos(p.theta)};
}

inline SphereCoord from_vector(const Vec3& d) {
  const double r = std::hypot(d[0], d[1]);
  return {std::atan2(r, d[2]), wrap_phi(std::atan2(d[1], d[0]))};
}

/// Great-circle distance in radians.
inline double angular_distance(const SphereCoord& a, const SphereCoord& b) {
  const Vec3 u = to_unit_vector(a), v = to_unit_vector(b);
  const Vec3 c{u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2],
               u[0] * v[1] - u[1] * v[0]};
  return std::atan2(std::sqrt(dot(c, c)), dot(u, v));
}

/// Orthonormal frame of the plane tangent at `center`: normal, east, north.
struct TangentFrame {
  Vec3 normal, east, north;

  explicit TangentFrame(const SphereCoord& center) {
    const double st = std::sin(center.theta), ct = std::cos(center.theta);
    const double sp = std::sin(center.phi), cp = std::cos(center.phi);
    normal = {st * cp, st * sp, ct};
    east = {-sp, cp, 0.0};
    north = {-ct * cp, -ct * sp, st};
  }
};

struct TangentPoint {
  double u = 0.0;
  double v = 0.0;
};

inline TangentPoint gnomonic_forward(const TangentFrame& f, const SphereCoord& p) {
  const Vec3 d = to_unit_vector(p);
  const double depth = dot(d, f.normal);
  if (depth <= 1e-12) {
    throw DomainError("point lies on or beyond the horizon of the tangent plane");
  }
  return {dot(d, f.east) / depth, dot(d, f.north) / depth};
}

/// Central projection of `p` onto the plane tangent at `center`.
inline TangentPoint gnomonic_forward(const SphereCoord& center, const SphereCoord& p) {
  return gnomonic_forward(TangentFrame(center), p);
}

inline SphereCoord gnomonic_inverse(const TangentFrame& f, double u, double v) {
  const Vec3 d{f.normal[0] + u * f.east[0] + v * f.north[0],
               f.normal[1] + u * f.east[1] + v * f.north[1],
               f.normal[2] + u * f.east[2] + v * f.north[2]};
  return from_vector(d);
}

inline SphereCoord gnomonic_inverse(const SphereCoord& center, double u, double v) {
  return gnomonic_inverse(TangentFrame(center), u, v);
}

/// Square pixel grid on a tangent plane, symmetric about the tangency point.
/// Pixel i has its center at u = (i + 0.5 - side/2) * spacing; with an odd side
/// the middle pixel sits on the tangency point, with an even side a pixel corner
/// does (which is where 2x2-pooled outputs are centered).
struct TangentGrid {
  SphereCoord center;
  double fov = 0.0;  ///< full field of view, radians
  int side = 1;

  static TangentGrid with_spacing(SphereCoord center, int side, double spacing) {
    return {center, 2.0 * std::atan(0.5 * side * spacing), side};
  }

  void validate() const {
    if (!(fov > 0.0)) throw DomainError("tangent grid fov must be positive");
    if (fov >= kPi) throw DomainError("tangent grid fov must be below pi");
    if (side < 1) throw PreconditionError("tangent grid side must be >= 1");
  }

  double spacing() const { return 2.0 * std::tan(0.5 * fov) / side; }
  double pixel_u(int col) const { return (col + 0.5 - 0.5 * side) * spacing(); }
  double pixel_v(int row) const { return (0.5 * side - row - 0.5) * spacing(); }
};

/// Sparse bilinear resampling operator stored row-compressed by output pixel.
struct SamplingMap {
  struct Entry {
    std::uint32_t in_index = 0;  ///< row * W + col on the input grid
    double weight = 0.0;
  };

  int out_rows = 0;
  int out_cols = 0;
  GridSpec in_grid;
  std::vector<std::uint32_t> offsets;  ///< size out_rows*out_cols + 1
  std::vector<Entry> entries;

  std::size_t out_size() const { return static_cast<std::size_t>(out_rows) * out_cols; }

  std::span<const Entry> row(std::size_t out_index) const {
    return {entries.data() + offsets[out_index], entries.data() + offsets[out_index + 1]};
  }

  /// Resamples an input map (H x W x C on in_grid) to out_rows x out_cols x C.
  Tensor apply(const Tensor& input) const {
    if (input.rank() != 3 || static_cast<int>(input.dim(0)) != in_grid.height ||
        static_cast<int>(input.dim(1)) != in_grid.width) {
      throw ShapeError("sampling map input " + input.shape_string() + " does not match grid");
    }
    const std::size_t c = input.dim(2);
    Tensor out({static_cast<std::size_t>(out_rows), static_cast<std::size_t>(out_cols), c});
    apply_into(input.data(), c, out.data());
    return out;
  }

  void apply_into(const double* in, std::size_t channels, double* out) const {
    for (std::size_t o = 0; o < out_size(); ++o) {
      double* dst = out + o * channels;
      std::fill(dst, dst + channels, 0.0);
      for (const auto& e : row(o)) {
        const double* src = in + static_cast<std::size_t>(e.in_index) * channels;
        for (std::size_t k = 0; k < channels; ++k) dst[k] += e.weight * src[k];
      }
    }
  }
};

/// Bilinear taps at continuous equirect coordinate (x, y): columns wrap, rows clamp.
/// Appends up to four merged (index, weight) pairs with weight >= kWeightEpsilon.
inline void bilinear_taps(double x, double y, const GridSpec& grid,
                          std::vector<SamplingMap::Entry>& out) {
  const double px = x - 0.5, py = y - 0.5;
  const double fx0 = std::floor(px), fy0 = std::floor(py);
  const double fx = px - fx0, fy = py - fy0;
  const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
  const auto wrap_col = [&](long c) {
    long m = c % grid.width;
    return m < 0 ? m + grid.width : m;
  };
  const auto clamp_row = [&](long r) { return std::clamp<long>(r, 0, grid.height - 1); };

  std::array<std::pair<std::uint32_t, double>, 4> taps{};
  const long rows[2] = {clamp_row(y0), clamp_row(y0 + 1)};
  const long cols[2] = {wrap_col(x0), wrap_col(x0 + 1)};
  const double wy[2] = {1.0 - fy, fy};
  const double wx[2] = {1.0 - fx, fx};
  int n = 0;
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      const auto idx = static_cast<std::uint32_t>(rows[a] * grid.width + cols[b]);
      const double w = wy[a] * wx[b];
      bool merged = false;
      for (int t = 0; t < n; ++t) {
        if (taps[t].first == idx) {
          taps[t].second += w;
          merged = true;
          break;
        }
      }
      if (!merged) taps[n++] = {idx, w};
    }
  }
  for (int t = 0; t < n; ++t) {
    if (taps[t].second >= kWeightEpsilon) out.push_back({taps[t].first, taps[t].second});
  }
}

/// Maps every tangent-grid pixel, back-projected to the sphere, onto the
/// equirectangular grid with bilinear weights.
inline SamplingMap build_tangent_sampling_map(const TangentGrid& tg, const GridSpec& grid) {
  tg.validate();
  grid.validate_equirect();
  SamplingMap map;
  map.out_rows = tg.side;
  map.out_cols = tg.side;
  map.in_grid = grid;
  map.offsets.reserve(map.out_size() + 1);
  map.entries.reserve(map.out_size() * 4);
  map.offsets.push_back(0);
  const TangentFrame frame(tg.center);
  for (int r = 0; r < tg.side; ++r) {
    const double v = tg.pixel_v(r);
    for (int c = 0; c < tg.side; ++c) {
      const SphereCoord p = gnomonic_inverse(frame, tg.pixel_u(c), v);
      const auto xy = sphere_to_equirect(p, grid);
      bilinear_taps(xy[0], xy[1], grid, map.entries);
      map.offsets.push_back(static_cast<std::uint32_t>(map.entries.size()));
    }
  }
  return map;
}

struct KernelShape {
  int height = 1;
  int width = 1;
  int dilation = 1;

  int taps() const { return height * width; }
  int effective_height() const { return (height - 1) * dilation + 1; }
  int effective_width() const { return (width - 1) * dilation + 1; }
  bool operator==(const KernelShape&) const = default;
};

/// Half extents (rows, cols) in pixels of the k x k tangent receptive field of
/// a kernel centered at (theta, phi=0), back-projected onto the grid.
inline std::array<double, 2> receptive_field_half_extent(double theta, int k,
                                                         double tangent_spacing,
                                                         const GridSpec& grid) {
  const SphereCoord center{theta, 0.0};
  const TangentFrame frame(center);
  const double half = 0.5 * k * tangent_spacing;
  double max_dy = 0.0, max_dx = 0.0;
  constexpr int kSamplesPerEdge = 256;
  const auto visit = [&](double u, double v) {
    const SphereCoord p = gnomonic_inverse(frame, u, v);
    max_dy = std::max(max_dy, std::abs(p.theta - theta) / grid.row_pitch());
    max_dx = std::max(max_dx, std::abs(std::remainder(p.phi, kTwoPi)) / grid.col_pitch());
  };
  for (int s = 0; s <= kSamplesPerEdge; ++s) {
    const double t = -half + 2.0 * half * s / kSamplesPerEdge;
    visit(t, half);
    visit(t, -half);
    visit(half, t);
    visit(-half, t);
  }
  // A pole inside the footprint makes it span every azimuth.
  for (const double pole_theta : {0.0, kPi}) {
    const Vec3 pole{0.0, 0.0, std::cos(pole_theta)};
    const double depth = dot(pole, frame.normal);
    if (depth <= 0.0) continue;
    const double u = dot(pole, frame.east) / depth, v = dot(pole, frame.north) / depth;
    if (std::abs(u) <= half && std::abs(v) <= half) {
      max_dx = std::max(max_dx, 0.5 * grid.width);
      max_dy = std::max(max_dy, std::abs(pole_theta - theta) / grid.row_pitch());
    }
  }
  return {max_dy, max_dx};
}

namespace detail {
/// Smallest odd side whose pixel footprint [-side/2, side/2] covers +-half.
inline int odd_cover(double half) {
  const double n = std::ceil(half - 0.5 - 1e-9);
  return 2 * static_cast<int>(std::max(0.0, n)) + 1;
}
/// Odd tap count whose dilated footprint covers `extent` pixels (odd).
inline int odd_taps_for(int extent, int dilation) {
  const int half = (extent - 1) / 2;
  return 2 * ((half + dilation - 1) / dilation) + 1;
}
}  // namespace detail

/// Minimal odd bounding box centered on row y(theta) covering the back-projected
/// k x k receptive field; sides above kMaxKernelSide are capped and the kernel
/// dilated to keep covering the box.
inline KernelShape target_kernel_shape(double theta, int k, double tangent_spacing,
                                       const GridSpec& grid) {
  if (k < 1 || k % 2 == 0) throw PreconditionError("source kernel side must be odd");
  if (!(tangent_spacing > 0.0)) throw PreconditionError("tangent spacing must be positive");
  if (!(theta > 0.0 && theta < kPi)) {
    throw DomainError("kernel shape undefined at the poles (theta=" + std::to_string(theta) +
                      ")");
  }
  grid.validate_equirect();
  const auto half = receptive_field_half_extent(theta, k, tangent_spacing, grid);
  const int box_h = detail::odd_cover(half[0]);
  const int box_w = detail::odd_cover(half[1]);
  const int largest = std::max(box_h, box_w);
  if (largest <= kMaxKernelSide) return {box_h, box_w, 1};
  const int dilation = (largest - 1 + kMaxKernelSide - 2) / (kMaxKernelSide - 1);
  const int h = box_h > kMaxKernelSide ? kMaxKernelSide : detail::odd_taps_for(box_h, dilation);
  const int w = box_w > kMaxKernelSide ? kMaxKernelSide : detail::odd_taps_for(box_w, dilation);
  return {h, w, dilation};
}

/// Analytic projection P (taps x k^2): row r holds the bilinear weights with
/// which source-kernel taps contribute to tap r of the kernel resampled onto the
/// grid at polar angle theta.
inline Tensor projected_kernel_weights(double theta, int k, const KernelShape& shape,
                                       double tangent_spacing, const GridSpec& grid) {
  if (!(shape == target_kernel_shape(theta, k, tangent_spacing, grid))) {
    throw PreconditionError("kernel shape does not match the shape rule at this theta");
  }
  const auto k2 = static_cast<std::size_t>(k) * k;
  Tensor p({static_cast<std::size_t>(shape.taps()), k2});
  const SphereCoord center{theta, 0.0};
  const TangentFrame frame(center);
  const double c = 0.5 * (k - 1);
  const int ch = (shape.height - 1) / 2, cw = (shape.width - 1) / 2;
  std::vector<int> seen_cols;
  for (int i = 0; i < shape.height; ++i) {
    const double t = theta + (i - ch) * shape.dilation * grid.row_pitch();
    seen_cols.clear();
    for (int j = 0; j < shape.width; ++j) {
      const int dx = (j - cw) * shape.dilation;
      const int col = ((dx % grid.width) + grid.width) % grid.width;
      // Taps that alias onto a column already covered in this row stay zero.
      if (std::find(seen_cols.begin(), seen_cols.end(), col) != seen_cols.end()) continue;
      seen_cols.push_back(col);
      if (t < 0.0 || t > kPi) continue;
      const SphereCoord q{t, wrap_phi(dx * grid.col_pitch())};
      const Vec3 d = to_unit_vector(q);
      const double depth = dot(d, frame.normal);
      if (depth <= 1e-12) continue;
      const double u = dot(d, frame.east) / depth, v = dot(d, frame.north) / depth;
      const double sc = u / tangent_spacing + c;
      const double sr = c - v / tangent_spacing;
      if (sc <= -1.0 || sc >= k || sr <= -1.0 || sr >= k) continue;
      const double r0 = std::floor(sr), c0 = std::floor(sc);
      const double fr = sr - r0, fc = sc - c0;
      const std::size_t row = static_cast<std::size_t>(i * shape.width + j);
      for (int a = 0; a < 2; ++a) {
        const int rr = static_cast<int>(r0) + a;
        if (rr < 0 || rr >= k) continue;
        for (int b = 0; b < 2; ++b) {
          const int cc = static_cast<int>(c0) + b;
          if (cc < 0 || cc >= k) continue;
          const double w = (a ? fr : 1.0 - fr) * (b ? fc : 1.0 - fc);
          if (w >= kWeightEpsilon) p.at(row, static_cast<std::size_t>(rr * k + cc)) = w;
        }
      }
    }
  }
  return p;
}

/// Applies P channel-wise to a kh x kw x Cin x Cout kernel, giving h x w x Cin x Cout.
inline Tensor apply_projection(const Tensor& projection, const KernelShape& shape,
                               const Tensor& kernel) {
  if (kernel.rank() != 4 || kernel.dim(0) * kernel.dim(1) != projection.dim(1) ||
      projection.dim(0) != static_cast<std::size_t>(shape.taps())) {
    throw PreconditionError("projection " + projection.shape_string() +
                            " incompatible with kernel " + kernel.shape_string());
  }
  const std::size_t k2 = projection.dim(1), taps = projection.dim(0);
  const std::size_t cc = kernel.dim(2) * kernel.dim(3);
  Tensor out({static_cast<std::size_t>(shape.height), static_cast<std::size_t>(shape.width),
              kernel.dim(2), kernel.dim(3)});
  for (std::size_t r = 0; r < taps; ++r) {
    double* dst = out.data() + r * cc;
    for (std::size_t t = 0; t < k2; ++t) {
      const double w = projection.at(r, t);
      if (w == 0.0) continue;
      const double* src = kernel.data() + t * cc;
      for (std::size_t q = 0; q < cc; ++q) dst[q] += w * src[q];
    }
  }
  return out;
}

}  // namespace ktn::geometry
