#pragma once

#include <cstdint>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "partdistill/geom.hpp"
#include "partdistill/rng.hpp"

namespace partdistill {

enum class PrimitiveKind { Box, Cylinder };

/// One labeled solid. Boxes use half extents; cylinders stand on the z axis
/// with half_extent.x as radius and half_extent.z as half height.
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::Box;
  Vec3 center;
  Vec3 half_extent;
  int part = 0;
};

inline double primitive_area(const Primitive& p) {
  const Vec3& h = p.half_extent;
  if (p.kind == PrimitiveKind::Box)
    return 8.0 * (h.x * h.y + h.y * h.z + h.x * h.z);
  const double pi = 3.141592653589793;
  return 4.0 * pi * h.x * h.z + 2.0 * pi * h.x * h.x;  // lateral + caps
}

enum class ShapeCategory { Chair, Table, Lamp };

struct ShapeTemplate {
  ShapeCategory category = ShapeCategory::Chair;
  std::vector<std::string> part_names;
  std::size_t points_per_shape = 2048;
};

inline ShapeTemplate chair_template(std::size_t points = 2048) {
  return {ShapeCategory::Chair, {"seat", "back", "leg", "arm"}, points};
}
inline ShapeTemplate table_template(std::size_t points = 2048) {
  return {ShapeCategory::Table, {"top", "pedestal", "base"}, points};
}
inline ShapeTemplate lamp_template(std::size_t points = 2048) {
  return {ShapeCategory::Lamp, {"base", "pole", "shade"}, points};
}

inline const char* category_name(ShapeCategory c) {
  switch (c) {
    case ShapeCategory::Chair: return "chair";
    case ShapeCategory::Table: return "table";
    default: return "lamp";
  }
}

inline ShapeTemplate template_by_name(const std::string& name, std::size_t points) {
  if (name == "chair") return chair_template(points);
  if (name == "table") return table_template(points);
  if (name == "lamp") return lamp_template(points);
  throw std::runtime_error("unknown template: " + name);
}

/// Samples the category's style parameters and lays out labeled primitives.
/// The RNG draw order is fixed, so one seed always yields one geometry.
inline std::vector<Primitive> instantiate_template(const ShapeTemplate& tpl, Rng& rng) {
  std::vector<Primitive> prims;
  auto box = [&](Vec3 c, Vec3 h, int part) {
    prims.push_back({PrimitiveKind::Box, c, h, part});
  };
  auto cyl = [&](Vec3 c, double radius, double half_h, int part) {
    prims.push_back({PrimitiveKind::Cylinder, c, {radius, radius, half_h}, part});
  };

  switch (tpl.category) {
    case ShapeCategory::Chair: {
      // Legs and armrest panels are multi-instance parts: their per-part
      // detection boxes straddle the whole chair in some views, which is
      // the impure-knowledge regime backward distillation exists for.
      const double sx = rng.uniform(0.28, 0.36);   // seat half width
      const double sy = rng.uniform(0.26, 0.34);   // seat half depth
      const double sz = rng.uniform(0.035, 0.055); // seat half thickness
      const double seat_z = rng.uniform(0.44, 0.54);
      const double back_t = rng.uniform(0.02, 0.035);
      const double back_h = rng.uniform(0.26, 0.38);
      const double leg_r = rng.uniform(0.045, 0.065);
      const double panel_t = rng.uniform(0.035, 0.055);  // armrest panel
      const double panel_h = rng.uniform(0.14, 0.20);
      box({0.0, 0.0, seat_z}, {sx, sy, sz}, 0);
      box({0.0, -(sy - back_t), seat_z + sz + back_h}, {sx * 0.9, back_t, back_h}, 1);
      const double leg_h = (seat_z - sz) / 2.0;
      for (double dx : {-1.0, 1.0})
        for (double dy : {-1.0, 1.0})
          cyl({dx * (sx - leg_r - 0.02), dy * (sy - leg_r - 0.02), leg_h}, leg_r, leg_h, 2);
      for (double dx : {-1.0, 1.0})
        box({dx * (sx + panel_t + 0.02), 0.03, seat_z + sz + panel_h},
            {panel_t, sy * 0.75, panel_h}, 3);
      break;
    }
    case ShapeCategory::Table: {
      const double tx = rng.uniform(0.40, 0.50);
      const double ty = rng.uniform(0.30, 0.42);
      const double tz = rng.uniform(0.02, 0.04);
      const double top_z = rng.uniform(0.44, 0.54);
      const double ped_r = rng.uniform(0.04, 0.06);
      const double base_x = rng.uniform(0.18, 0.26);
      const double base_h = rng.uniform(0.015, 0.03);
      box({0.0, 0.0, top_z}, {tx, ty, tz}, 0);
      const double ped_h = (top_z - tz - 2.0 * base_h) / 2.0;
      cyl({0.0, 0.0, 2.0 * base_h + ped_h}, ped_r, ped_h, 1);
      box({0.0, 0.0, base_h}, {base_x, base_x * 0.8, base_h}, 2);
      break;
    }
    case ShapeCategory::Lamp: {
      const double base_r = rng.uniform(0.15, 0.22);
      const double base_h = rng.uniform(0.015, 0.030);
      const double pole_r = rng.uniform(0.015, 0.025);
      const double pole_h = rng.uniform(0.30, 0.40);
      const double shade_r = rng.uniform(0.12, 0.20);
      const double shade_h = rng.uniform(0.08, 0.14);
      cyl({0.0, 0.0, base_h}, base_r, base_h, 0);
      cyl({0.0, 0.0, 2.0 * base_h + pole_h}, pole_r, pole_h, 1);
      cyl({0.0, 0.0, 2.0 * (base_h + pole_h) + shade_h}, shade_r, shade_h, 2);
      break;
    }
  }
  return prims;
}

/// Splits `total` samples across `weights` proportionally, each bucket
/// receiving at least `floor_count`. Deterministic largest-remainder fixup.
inline std::vector<std::size_t> apportion(const std::vector<double>& weights, std::size_t total,
                                          std::size_t floor_count) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (sum <= 0.0) throw std::runtime_error("apportion: weights must be positive");
  if (floor_count * weights.size() > total)
    throw std::runtime_error("apportion: total too small for floors");
  std::vector<double> target(weights.size());
  std::vector<std::size_t> counts(weights.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    target[i] = total * weights[i] / sum;
    counts[i] = std::max<std::size_t>(floor_count, static_cast<std::size_t>(target[i]));
    assigned += counts[i];
  }
  while (assigned < total) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < counts.size(); ++i)
      if (target[i] - counts[i] > target[best] - counts[best]) best = i;
    ++counts[best];
    ++assigned;
  }
  while (assigned > total) {
    std::size_t best = counts.size();
    for (std::size_t i = 0; i < counts.size(); ++i) {
      if (counts[i] <= floor_count) continue;
      if (best == counts.size() || target[i] - counts[i] < target[best] - counts[best]) best = i;
    }
    if (best == counts.size()) throw std::runtime_error("apportion: floors exceed total");
    --counts[best];
    --assigned;
  }
  return counts;
}

inline Vec3 sample_on_primitive(const Primitive& prim, Rng& rng) {
  const Vec3& h = prim.half_extent;
  Vec3 local;
  if (prim.kind == PrimitiveKind::Box) {
    const double ax = h.y * h.z, ay = h.x * h.z, az = h.x * h.y;
    const double pick = rng.uniform() * (ax + ay + az);
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double u = rng.uniform(), v = rng.uniform();
    if (pick < ax)
      local = {sign * h.x, (2.0 * u - 1.0) * h.y, (2.0 * v - 1.0) * h.z};
    else if (pick < ax + ay)
      local = {(2.0 * u - 1.0) * h.x, sign * h.y, (2.0 * v - 1.0) * h.z};
    else
      local = {(2.0 * u - 1.0) * h.x, (2.0 * v - 1.0) * h.y, sign * h.z};
  } else {
    const double pi = 3.141592653589793;
    const double lateral = 4.0 * pi * h.x * h.z;
    const double caps = 2.0 * pi * h.x * h.x;
    const double pick = rng.uniform() * (lateral + caps);
    const double theta = 2.0 * pi * rng.uniform();
    if (pick < lateral) {
      local = {h.x * std::cos(theta), h.x * std::sin(theta), (2.0 * rng.uniform() - 1.0) * h.z};
    } else {
      const double radius = h.x * std::sqrt(rng.uniform());
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      local = {radius * std::cos(theta), radius * std::sin(theta), sign * h.z};
    }
  }
  return prim.center + local;
}

/// Seeded surface sampling: counts are area-proportional per part with a 1%
/// floor, points land uniformly on primitive surfaces, and the result is
/// normalized. Exactly points_per_shape points come back.
inline PointCloudShape generate_shape(const ShapeTemplate& tpl, std::uint64_t seed,
                                      const std::string& shape_id = "") {
  Rng rng(seed);
  const std::vector<Primitive> prims = instantiate_template(tpl, rng);
  const std::size_t num_parts = tpl.part_names.size();

  std::vector<double> part_area(num_parts, 0.0);
  for (const Primitive& p : prims) part_area[static_cast<std::size_t>(p.part)] += primitive_area(p);
  const std::size_t n = tpl.points_per_shape;
  const std::size_t floor_count = (n + 99) / 100;  // >= 1% of points per part
  const std::vector<std::size_t> part_counts = apportion(part_area, n, floor_count);

  PointCloudShape shape;
  shape.shape_id = shape_id.empty() ? std::string(category_name(tpl.category)) : shape_id;
  shape.part_names = tpl.part_names;
  shape.points.reserve(n);
  shape.labels.reserve(n);
  for (std::size_t part = 0; part < num_parts; ++part) {
    std::vector<double> prim_area;
    std::vector<const Primitive*> part_prims;
    for (const Primitive& p : prims)
      if (p.part == static_cast<int>(part)) {
        part_prims.push_back(&p);
        prim_area.push_back(primitive_area(p));
      }
    const std::vector<std::size_t> prim_counts = apportion(prim_area, part_counts[part], 0);
    for (std::size_t k = 0; k < part_prims.size(); ++k)
      for (std::size_t s = 0; s < prim_counts[k]; ++s) {
        shape.points.push_back(sample_on_primitive(*part_prims[k], rng));
        shape.labels.push_back(static_cast<int>(part));
      }
  }
  return normalize_shape(shape);
}

/// `count` shapes cycling through the templates; shape i draws from
/// sub-seed hash(seed, i) and gets a unique sortable id.
inline std::vector<PointCloudShape> generate_corpus(const std::vector<ShapeTemplate>& templates,
                                                    int count, std::uint64_t seed) {
  if (count < 1) throw std::runtime_error("generate_corpus: count must be >= 1");
  if (templates.empty()) throw std::runtime_error("generate_corpus: no templates");
  std::vector<PointCloudShape> corpus;
  corpus.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const ShapeTemplate& tpl = templates[static_cast<std::size_t>(i) % templates.size()];
    char id[64];
    std::snprintf(id, sizeof(id), "%s_%04d", category_name(tpl.category), i);
    corpus.push_back(generate_shape(tpl, hash_combine(seed, static_cast<std::uint64_t>(i)), id));
  }
  return corpus;
}

}  // namespace partdistill
