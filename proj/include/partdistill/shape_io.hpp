#pragma once

#include <array>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "partdistill/geom.hpp"

namespace partdistill {

inline std::string stem_of(const std::string& path) {
  std::size_t slash = path.find_last_of("/\\");
  std::string name = slash == std::string::npos ? path : path.substr(slash + 1);
  std::size_t dot = name.find_last_of('.');
  return dot == std::string::npos ? name : name.substr(0, dot);
}

// .xyzl text format:
//   line 1: N R
//   line 2: R space-separated part names
//   N lines: x y z label   (label -1 allowed)

inline void save_xyzl(const PointCloudShape& shape, const std::string& path) {
  shape.validate();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_xyzl: cannot open " + path);
  out << shape.num_points() << ' ' << shape.num_parts() << '\n';
  for (int r = 0; r < shape.num_parts(); ++r)
    out << shape.part_names[static_cast<std::size_t>(r)] << (r + 1 < shape.num_parts() ? ' ' : '\n');
  char buf[128];
  for (std::size_t i = 0; i < shape.num_points(); ++i) {
    const Vec3& p = shape.points[i];
    const int label = shape.has_labels() ? shape.labels[i] : kNoLabel;
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g %d\n", p.x, p.y, p.z, label);
    out << buf;
  }
  if (!out) throw std::runtime_error("save_xyzl: write failed for " + path);
}

inline PointCloudShape load_xyzl(const std::string& path, const std::string& shape_id = "") {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_xyzl: cannot open " + path);
  std::size_t n = 0;
  int r = 0;
  if (!(in >> n >> r) || n < 1 || r < 2)
    throw std::runtime_error("load_xyzl: bad header in " + path);
  PointCloudShape shape;
  shape.shape_id = shape_id.empty() ? stem_of(path) : shape_id;
  shape.part_names.resize(static_cast<std::size_t>(r));
  for (auto& name : shape.part_names)
    if (!(in >> name)) throw std::runtime_error("load_xyzl: missing part name in " + path);
  shape.points.resize(n);
  shape.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Vec3& p = shape.points[i];
    if (!(in >> p.x >> p.y >> p.z >> shape.labels[i]))
      throw std::runtime_error("load_xyzl: truncated point list in " + path);
  }
  bool any_label = false;
  for (int l : shape.labels) any_label |= (l != kNoLabel);
  if (!any_label) shape.labels.clear();
  shape.validate();
  return shape;
}

// Fixed 16-entry palette for label-colored renders.
inline const std::array<std::array<unsigned char, 3>, 16>& label_palette() {
  static const std::array<std::array<unsigned char, 3>, 16> palette = {{
      {230, 60, 60},   {60, 120, 230}, {70, 190, 90},   {240, 190, 50},
      {170, 80, 220},  {70, 210, 210}, {240, 130, 40},  {150, 150, 150},
      {120, 70, 30},   {250, 120, 180},{40, 90, 130},   {180, 220, 80},
      {110, 110, 240}, {90, 160, 120}, {210, 90, 110},  {200, 200, 120},
  }};
  return palette;
}

/// Binary PGM (P5) of the depth buffer: near = dark, background = white.
inline void save_depth_pgm(const ViewRender& view, const std::string& path) {
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (std::size_t i = 0; i < view.depth.size(); ++i) {
    if (view.pixel_owner[i] == kNoOwner) continue;
    lo = std::min(lo, view.depth[i]);
    hi = std::max(hi, view.depth[i]);
  }
  const double span = (hi > lo) ? hi - lo : 1.0;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_depth_pgm: cannot open " + path);
  out << "P5\n" << view.width << ' ' << view.height << "\n255\n";
  std::vector<unsigned char> raster(view.depth.size(), 255);
  for (std::size_t i = 0; i < view.depth.size(); ++i)
    if (view.pixel_owner[i] != kNoOwner)
      raster[i] = static_cast<unsigned char>(254.0 * (view.depth[i] - lo) / span);
  out.write(reinterpret_cast<const char*>(raster.data()),
            static_cast<std::streamsize>(raster.size()));
}

/// Binary PPM (P6) coloring each pixel by its owning point's label.
/// Unowned pixels are black; unlabeled points are mid-gray.
inline void save_label_ppm(const ViewRender& view, const std::vector<int>& labels,
                           const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_label_ppm: cannot open " + path);
  out << "P6\n" << view.width << ' ' << view.height << "\n255\n";
  std::vector<unsigned char> raster(view.pixel_owner.size() * 3, 0);
  for (std::size_t i = 0; i < view.pixel_owner.size(); ++i) {
    const int owner = view.pixel_owner[i];
    if (owner == kNoOwner) continue;
    const int label = labels.empty() ? kNoLabel : labels[static_cast<std::size_t>(owner)];
    unsigned char r = 128, g = 128, b = 128;
    if (label >= 0) {
      const auto& c = label_palette()[static_cast<std::size_t>(label) % 16];
      r = c[0]; g = c[1]; b = c[2];
    }
    raster[3 * i] = r; raster[3 * i + 1] = g; raster[3 * i + 2] = b;
  }
  out.write(reinterpret_cast<const char*>(raster.data()),
            static_cast<std::streamsize>(raster.size()));
}

}  // namespace partdistill
