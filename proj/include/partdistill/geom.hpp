#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "partdistill/parallel.hpp"

namespace partdistill {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    double n = norm();
    if (n < 1e-12) throw std::runtime_error("Vec3: cannot normalize near-zero vector");
    return {x / n, y / n, z / n};
  }
};

constexpr int kNoLabel = -1;        // ground truth unknown
constexpr int kUnassigned = -1;     // prediction absent (voting baseline)
constexpr int kNoOwner = -1;        // pixel owned by no point

/// N points with optional per-point part labels in [0, R) or kNoLabel.
struct PointCloudShape {
  std::string shape_id;
  std::vector<Vec3> points;
  std::vector<int> labels;             // empty, or one entry per point
  std::vector<std::string> part_names; // size R

  std::size_t num_points() const { return points.size(); }
  int num_parts() const { return static_cast<int>(part_names.size()); }
  bool has_labels() const { return !labels.empty(); }

  void validate() const {
    if (points.empty()) throw std::runtime_error("shape " + shape_id + ": no points");
    if (part_names.size() < 2) throw std::runtime_error("shape " + shape_id + ": needs R >= 2 parts");
    if (!labels.empty()) {
      if (labels.size() != points.size())
        throw std::runtime_error("shape " + shape_id + ": label count != point count");
      for (int l : labels)
        if (l != kNoLabel && (l < 0 || l >= num_parts()))
          throw std::runtime_error("shape " + shape_id + ": label out of range");
    }
  }
};

struct Camera {
  Vec3 position;
  Vec3 look_at;
  Vec3 up{0.0, 0.0, 1.0};
  double vertical_fov = 1.0471975511965976;  // 60 degrees
  int image_height = 224;
  int image_width = 224;

  void validate() const {
    if ((position - look_at).norm() < 1e-12)
      throw std::runtime_error("camera: position equals look_at");
    Vec3 f = (look_at - position).normalized();
    if (f.cross(up).norm() < 1e-9)
      throw std::runtime_error("camera: up parallel to viewing direction");
    if (!(vertical_fov > 0.0 && vertical_fov < 3.141592653589793))
      throw std::runtime_error("camera: vertical_fov out of (0, pi)");
    if (image_height < 16 || image_width < 16)
      throw std::runtime_error("camera: image size below 16 px");
  }
};

struct ProjectedPoint {
  double row = 0.0, col = 0.0;  // continuous pixel coordinates
  double depth = 0.0;           // camera-space z, positive in front
  bool valid = false;
};

struct Pixel {
  int row = 0, col = 0;
  friend bool operator==(const Pixel& a, const Pixel& b) {
    return a.row == b.row && a.col == b.col;
  }
  friend bool operator<(const Pixel& a, const Pixel& b) {
    return a.row != b.row ? a.row < b.row : a.col < b.col;
  }
};

/// Per-view raster: each pixel holds the index of the nearest splatted point.
struct ViewRender {
  int view_index = 0;
  int height = 0, width = 0;
  std::vector<int> pixel_owner;   // H*W, point index or kNoOwner
  std::vector<double> depth;      // H*W, +inf where unowned
  std::vector<std::uint8_t> visible;  // N, true iff the point owns >= 1 pixel

  int owner(int r, int c) const { return pixel_owner[static_cast<std::size_t>(r) * width + c]; }
  double depth_at(int r, int c) const { return depth[static_cast<std::size_t>(r) * width + c]; }
  bool in_bounds(const Pixel& p) const {
    return p.row >= 0 && p.row < height && p.col >= 0 && p.col < width;
  }
};

/// Centers the cloud on its centroid and scales the farthest point to norm 1.
/// Labels and names carry over untouched.
inline PointCloudShape normalize_shape(const PointCloudShape& shape) {
  if (shape.points.empty()) throw std::runtime_error("normalize_shape: empty shape");
  Vec3 centroid{};
  for (const Vec3& p : shape.points) centroid = centroid + p;
  centroid = centroid * (1.0 / static_cast<double>(shape.points.size()));

  double max_norm = 0.0;
  for (const Vec3& p : shape.points) max_norm = std::max(max_norm, (p - centroid).norm());
  if (max_norm < 1e-12) throw std::runtime_error("normalize_shape: zero extent");

  PointCloudShape out = shape;
  for (Vec3& p : out.points) p = (p - centroid) * (1.0 / max_norm);
  return out;
}

/// V cameras at distance 2.2 on an azimuth ring looking at the origin,
/// elevation alternating +25/-25 degrees so under-faces get seen too.
inline std::vector<Camera> make_view_ring(int views, int image_height, int image_width) {
  if (views < 1) throw std::runtime_error("make_view_ring: V must be >= 1");
  constexpr double kDistance = 2.2;
  constexpr double kElevation = 25.0 * 3.141592653589793 / 180.0;
  std::vector<Camera> cams;
  cams.reserve(static_cast<std::size_t>(views));
  for (int v = 0; v < views; ++v) {
    double azimuth = 2.0 * 3.141592653589793 * v / views;
    double elevation = (v % 2 == 0) ? kElevation : -kElevation;
    Camera cam;
    cam.position = {kDistance * std::cos(elevation) * std::cos(azimuth),
                    kDistance * std::cos(elevation) * std::sin(azimuth),
                    kDistance * std::sin(elevation)};
    cam.look_at = {0.0, 0.0, 0.0};
    cam.image_height = image_height;
    cam.image_width = image_width;
    cams.push_back(cam);
  }
  return cams;
}

inline std::vector<Camera> make_view_ring(int views, int image_size) {
  return make_view_ring(views, image_size, image_size);
}

/// Pinhole projection. A point is valid iff it sits in front of the camera
/// (depth > 1e-6) and its continuous pixel coordinates land inside the image.
inline std::vector<ProjectedPoint> project_points(const Camera& cam,
                                                  const std::vector<Vec3>& points) {
  cam.validate();
  const Vec3 forward = (cam.look_at - cam.position).normalized();
  const Vec3 right = forward.cross(cam.up).normalized();
  const Vec3 up = right.cross(forward);
  const double tan_half = std::tan(cam.vertical_fov / 2.0);
  const double aspect = static_cast<double>(cam.image_width) / cam.image_height;
  const double h = cam.image_height, w = cam.image_width;

  std::vector<ProjectedPoint> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vec3 d = points[i] - cam.position;
    const double z = d.dot(forward);
    ProjectedPoint& pp = out[i];
    pp.depth = z;
    if (z <= 1e-6) continue;
    const double x_ndc = d.dot(right) / (z * tan_half * aspect);
    const double y_ndc = d.dot(up) / (z * tan_half);
    pp.col = (x_ndc + 1.0) * 0.5 * w;
    pp.row = (1.0 - y_ndc) * 0.5 * h;
    pp.valid = pp.row >= 0.0 && pp.row < h && pp.col >= 0.0 && pp.col < w;
  }
  return out;
}

/// Splats every valid point as a disk and z-buffers per pixel. A pixel is
/// covered when its center lies within splat_radius of the projection.
/// Depth ties go to the lower point index.
inline ViewRender render_view(const Camera& cam, const PointCloudShape& shape,
                              double splat_radius, int view_index = 0) {
  if (splat_radius < 1.0) throw std::runtime_error("render_view: splat_radius must be >= 1");
  const auto projected = project_points(cam, shape.points);

  ViewRender view;
  view.view_index = view_index;
  view.height = cam.image_height;
  view.width = cam.image_width;
  view.pixel_owner.assign(static_cast<std::size_t>(view.height) * view.width, kNoOwner);
  view.depth.assign(view.pixel_owner.size(), std::numeric_limits<double>::infinity());
  view.visible.assign(shape.points.size(), 0);

  const double r2 = splat_radius * splat_radius;
  for (std::size_t n = 0; n < projected.size(); ++n) {
    const ProjectedPoint& pp = projected[n];
    if (!pp.valid) continue;
    const int r_lo = std::max(0, static_cast<int>(std::floor(pp.row - splat_radius - 0.5)));
    const int r_hi = std::min(view.height - 1, static_cast<int>(std::ceil(pp.row + splat_radius - 0.5)));
    const int c_lo = std::max(0, static_cast<int>(std::floor(pp.col - splat_radius - 0.5)));
    const int c_hi = std::min(view.width - 1, static_cast<int>(std::ceil(pp.col + splat_radius - 0.5)));
    for (int r = r_lo; r <= r_hi; ++r) {
      const double dr = (r + 0.5) - pp.row;
      for (int c = c_lo; c <= c_hi; ++c) {
        const double dc = (c + 0.5) - pp.col;
        if (dr * dr + dc * dc > r2) continue;
        const std::size_t idx = static_cast<std::size_t>(r) * view.width + c;
        if (pp.depth < view.depth[idx]) {  // strict: ties keep the earlier (lower) index
          view.depth[idx] = pp.depth;
          view.pixel_owner[idx] = static_cast<int>(n);
        }
      }
    }
  }
  for (int owner : view.pixel_owner)
    if (owner != kNoOwner) view.visible[static_cast<std::size_t>(owner)] = 1;
  return view;
}

inline std::vector<ViewRender> render_views(const std::vector<Camera>& cams,
                                            const PointCloudShape& shape,
                                            double splat_radius) {
  std::vector<ViewRender> views(cams.size());
  parallel_for(cams.size(), [&](std::size_t v) {
    views[v] = render_view(cams[v], shape, splat_radius, static_cast<int>(v));
  });
  return views;
}

/// Gamma restricted to a pixel region: mask[n] is set iff point n owns a
/// pixel inside the region. Empty regions give an all-false mask.
inline std::vector<std::uint8_t> back_project(const ViewRender& view,
                                              const std::vector<Pixel>& region) {
  std::vector<std::uint8_t> mask(view.visible.size(), 0);
  for (const Pixel& p : region) {
    if (!view.in_bounds(p)) throw std::runtime_error("back_project: pixel out of bounds");
    const int owner = view.owner(p.row, p.col);
    if (owner != kNoOwner) mask[static_cast<std::size_t>(owner)] = 1;
  }
  return mask;
}

/// Integer pixels covered by a rect in pixel-index space: pixel (r, c) is
/// inside iff x1 <= c < x2 and y1 <= r < y2 (x along columns), clamped.
struct PixelRect {
  int r_lo = 0, r_hi = 0, c_lo = 0, c_hi = 0;  // half-open
  bool empty() const { return r_lo >= r_hi || c_lo >= c_hi; }
};

inline PixelRect clamp_rect(int height, int width, double x1, double y1, double x2, double y2) {
  PixelRect r;
  r.r_lo = std::max(0, static_cast<int>(std::ceil(y1)));
  r.r_hi = std::min(height, static_cast<int>(std::ceil(y2)));
  r.c_lo = std::max(0, static_cast<int>(std::ceil(x1)));
  r.c_hi = std::min(width, static_cast<int>(std::ceil(x2)));
  return r;
}

/// back_project over an axis-aligned box, clamped to the image.
inline std::vector<std::uint8_t> back_project_rect(const ViewRender& view, double x1, double y1,
                                                   double x2, double y2) {
  std::vector<std::uint8_t> mask(view.visible.size(), 0);
  const PixelRect rect = clamp_rect(view.height, view.width, x1, y1, x2, y2);
  for (int r = rect.r_lo; r < rect.r_hi; ++r)
    for (int c = rect.c_lo; c < rect.c_hi; ++c) {
      const int owner = view.owner(r, c);
      if (owner != kNoOwner) mask[static_cast<std::size_t>(owner)] = 1;
    }
  return mask;
}

}  // namespace partdistill
