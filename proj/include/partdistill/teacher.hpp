#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "partdistill/geom.hpp"
#include "partdistill/rng.hpp"

namespace partdistill {

/// Row argmax with ties resolved to the lowest index.
inline int argmax_index(const double* row, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (row[i] > row[best]) best = i;
  return best;
}
inline int argmax_index(const std::vector<double>& row) {
  return argmax_index(row.data(), static_cast<int>(row.size()));
}

/// One detected box: rect in pixel-index space (x along columns, half-open)
/// plus a probability simplex over the R parts.
struct BoxPrediction {
  int view_index = 0;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  std::vector<double> probs;
};

/// Dense per-pixel prediction; background pixels carry no prediction.
struct PixelPredictionMap {
  int view_index = 0;
  int height = 0, width = 0;
  int num_parts = 0;
  std::vector<std::uint8_t> foreground;  // H*W
  std::vector<double> probs;             // H*W*R, meaningful on foreground only

  const double* pixel_probs(int r, int c) const {
    return probs.data() + (static_cast<std::size_t>(r) * width + c) * num_parts;
  }
  double* pixel_probs(int r, int c) {
    return probs.data() + (static_cast<std::size_t>(r) * width + c) * num_parts;
  }
  bool is_foreground(int r, int c) const {
    return foreground[static_cast<std::size_t>(r) * width + c] != 0;
  }
};

using Predictions = std::variant<std::vector<BoxPrediction>, std::vector<PixelPredictionMap>>;

inline bool is_box_kind(const Predictions& p) {
  return std::holds_alternative<std::vector<BoxPrediction>>(p);
}

/// Maximal 4-connected region of same-part pixels.
struct SegComponent {
  int part_index = 0;
  std::vector<Pixel> pixels;  // sorted row-major
};

/// One distillable unit: a 2D prediction back-projected onto the points it
/// covers. Point data is stored restricted to the mask (ascending indices).
/// The 2D footprint and scalar confidence stay attached for the 2D metric.
struct KnowledgeUnit {
  std::string shape_id;
  int unit_index = 0;
  int view_index = 0;
  std::size_t num_points = 0;
  int num_parts = 0;
  std::vector<int> point_indices;      // M^d, ascending
  std::vector<double> probs;           // |M^d| x R, row-major
  std::vector<double> confidence;      // per masked point, max_r probs
  std::vector<Pixel> pixels_2d;        // source pixels in the view
  double confidence_2d = 0.0;          // mean pixel-level confidence
  int part_2d = 0;                     // part this 2D prediction claims
  std::optional<double> rescored_confidence;

  std::size_t mask_size() const { return point_indices.size(); }
  const double* point_probs(std::size_t j) const {
    return probs.data() + j * static_cast<std::size_t>(num_parts);
  }
  int point_argmax(std::size_t j) const { return argmax_index(point_probs(j), num_parts); }
  std::vector<std::uint8_t> to_mask() const {
    std::vector<std::uint8_t> mask(num_points, 0);
    for (int n : point_indices) mask[static_cast<std::size_t>(n)] = 1;
    return mask;
  }
};

/// 4-connected components of an argmax map (entries < 0 are background),
/// ordered by their top-left-most pixel in row-major order.
inline std::vector<SegComponent> connected_components(const std::vector<int>& argmax_map,
                                                      int height, int width) {
  if (argmax_map.size() != static_cast<std::size_t>(height) * width)
    throw std::runtime_error("connected_components: map size mismatch");
  std::vector<std::uint8_t> seen(argmax_map.size(), 0);
  std::vector<SegComponent> components;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < argmax_map.size(); ++start) {
    if (seen[start] || argmax_map[start] < 0) continue;
    const int part = argmax_map[start];
    SegComponent comp;
    comp.part_index = part;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t idx = stack.back();
      stack.pop_back();
      const int r = static_cast<int>(idx) / width, c = static_cast<int>(idx) % width;
      comp.pixels.push_back({r, c});
      const int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const int nr = r + dr[k], nc = c + dc[k];
        if (nr < 0 || nr >= height || nc < 0 || nc >= width) continue;
        const std::size_t nidx = static_cast<std::size_t>(nr) * width + nc;
        if (!seen[nidx] && argmax_map[nidx] == part) {
          seen[nidx] = 1;
          stack.push_back(nidx);
        }
      }
    }
    std::sort(comp.pixels.begin(), comp.pixels.end());
    components.push_back(std::move(comp));
  }
  return components;
}

namespace detail {

inline void validate_simplex(const std::vector<double>& probs, double tol,
                             const std::string& where) {
  if (probs.empty()) throw std::runtime_error(where + ": empty probs");
  double sum = 0.0;
  for (double p : probs) {
    if (p < -1e-12) throw std::runtime_error(where + ": negative prob");
    sum += p;
  }
  if (std::abs(sum - 1.0) > tol) throw std::runtime_error(where + ": probs not normalized");
}

/// Builds a unit from owned pixels. point_sums maps point -> (prob sum, count).
inline std::optional<KnowledgeUnit> finalize_unit(
    const std::string& shape_id, int view_index, std::size_t num_points, int num_parts,
    const std::map<int, std::pair<std::vector<double>, int>>& point_sums,
    std::vector<Pixel> pixels_2d, double confidence_2d, int part_2d) {
  if (point_sums.empty()) return std::nullopt;  // |M^d| = 0 units never exist
  KnowledgeUnit unit;
  unit.shape_id = shape_id;
  unit.view_index = view_index;
  unit.num_points = num_points;
  unit.num_parts = num_parts;
  unit.pixels_2d = std::move(pixels_2d);
  unit.confidence_2d = confidence_2d;
  unit.part_2d = part_2d;
  unit.point_indices.reserve(point_sums.size());
  unit.probs.reserve(point_sums.size() * static_cast<std::size_t>(num_parts));
  unit.confidence.reserve(point_sums.size());
  for (const auto& [point, acc] : point_sums) {
    unit.point_indices.push_back(point);
    double best = 0.0;
    for (int r = 0; r < num_parts; ++r) {
      const double mean = acc.first[static_cast<std::size_t>(r)] / acc.second;
      unit.probs.push_back(mean);
      best = std::max(best, mean);
    }
    unit.confidence.push_back(best);
  }
  return unit;
}

}  // namespace detail

/// Back-projects box predictions into knowledge units: every point owning a
/// pixel inside the rect joins the mask and receives the box's probs.
inline std::vector<KnowledgeUnit> extract_knowledge(const std::string& shape_id,
                                                    const std::vector<ViewRender>& views,
                                                    const std::vector<BoxPrediction>& boxes) {
  std::vector<KnowledgeUnit> units;
  for (const BoxPrediction& box : boxes) {
    if (box.view_index < 0 || box.view_index >= static_cast<int>(views.size()))
      throw std::runtime_error("extract_knowledge: prediction references view " +
                               std::to_string(box.view_index) + " of " +
                               std::to_string(views.size()));
    detail::validate_simplex(box.probs, 1e-6, "extract_knowledge");
    const ViewRender& view = views[static_cast<std::size_t>(box.view_index)];
    const PixelRect rect = clamp_rect(view.height, view.width, box.x1, box.y1, box.x2, box.y2);
    std::map<int, std::pair<std::vector<double>, int>> point_sums;
    std::vector<Pixel> pixels;
    for (int r = rect.r_lo; r < rect.r_hi; ++r)
      for (int c = rect.c_lo; c < rect.c_hi; ++c) {
        const int owner = view.owner(r, c);
        if (owner == kNoOwner) continue;  // box footprint excludes background
        pixels.push_back({r, c});
        auto& acc = point_sums[owner];
        if (acc.first.empty()) acc.first.assign(box.probs.size(), 0.0);
        for (std::size_t k = 0; k < box.probs.size(); ++k) acc.first[k] += box.probs[k];
        acc.second += 1;
      }
    const int part = argmax_index(box.probs);
    const double conf = box.probs[static_cast<std::size_t>(part)];
    auto unit = detail::finalize_unit(shape_id, box.view_index, view.visible.size(),
                                      static_cast<int>(box.probs.size()), point_sums,
                                      std::move(pixels), conf, part);
    if (!unit) continue;
    unit->unit_index = static_cast<int>(units.size());
    units.push_back(std::move(*unit));
  }
  return units;
}

/// P-VLM route: connected-component labeling on each map's argmax, then one
/// unit per component. A point owning several component pixels receives the
/// mean of those pixels' prob vectors.
inline std::vector<KnowledgeUnit> extract_knowledge(const std::string& shape_id,
                                                    const std::vector<ViewRender>& views,
                                                    const std::vector<PixelPredictionMap>& maps) {
  std::vector<KnowledgeUnit> units;
  for (const PixelPredictionMap& map : maps) {
    if (map.view_index < 0 || map.view_index >= static_cast<int>(views.size()))
      throw std::runtime_error("extract_knowledge: prediction references view " +
                               std::to_string(map.view_index) + " of " +
                               std::to_string(views.size()));
    const ViewRender& view = views[static_cast<std::size_t>(map.view_index)];
    if (map.height != view.height || map.width != view.width)
      throw std::runtime_error("extract_knowledge: map size differs from render");
    std::vector<int> argmax_map(static_cast<std::size_t>(map.height) * map.width, -1);
    for (int r = 0; r < map.height; ++r)
      for (int c = 0; c < map.width; ++c)
        if (map.is_foreground(r, c))
          argmax_map[static_cast<std::size_t>(r) * map.width + c] =
              argmax_index(map.pixel_probs(r, c), map.num_parts);
    for (SegComponent& comp : connected_components(argmax_map, map.height, map.width)) {
      std::map<int, std::pair<std::vector<double>, int>> point_sums;
      double conf_sum = 0.0;
      for (const Pixel& px : comp.pixels) {
        const double* probs = map.pixel_probs(px.row, px.col);
        conf_sum += probs[argmax_index(probs, map.num_parts)];
        const int owner = view.owner(px.row, px.col);
        if (owner == kNoOwner) continue;
        auto& acc = point_sums[owner];
        if (acc.first.empty()) acc.first.assign(static_cast<std::size_t>(map.num_parts), 0.0);
        for (int k = 0; k < map.num_parts; ++k) acc.first[static_cast<std::size_t>(k)] += probs[k];
        acc.second += 1;
      }
      auto unit = detail::finalize_unit(shape_id, map.view_index, view.visible.size(),
                                        map.num_parts, point_sums, std::move(comp.pixels),
                                        conf_sum / static_cast<double>(comp.pixels.size()),
                                        comp.part_index);
      if (!unit) continue;
      unit->unit_index = static_cast<int>(units.size());
      units.push_back(std::move(*unit));
    }
  }
  return units;
}

inline std::vector<KnowledgeUnit> extract_knowledge(const std::string& shape_id,
                                                    const std::vector<ViewRender>& views,
                                                    const Predictions& predictions) {
  if (is_box_kind(predictions))
    return extract_knowledge(shape_id, views, std::get<std::vector<BoxPrediction>>(predictions));
  return extract_knowledge(shape_id, views, std::get<std::vector<PixelPredictionMap>>(predictions));
}

enum class TeacherKind { Box, Pixel };

/// Synthetic noisy teacher built from ground-truth labels; stands in for an
/// external VLM. Deterministic in seed.
struct MockTeacherConfig {
  TeacherKind kind = TeacherKind::Box;
  double drop_rate = 0.0;
  double flip_rate = 0.0;
  double confidence_lo = 1.0;
  double confidence_hi = 1.0;
  double box_jitter = 0.0;  // pixels
  std::uint64_t seed = 0;

  void validate() const {
    if (drop_rate < 0.0 || drop_rate > 1.0) throw std::runtime_error("mock teacher: drop_rate outside [0,1]");
    if (flip_rate < 0.0 || flip_rate > 1.0) throw std::runtime_error("mock teacher: flip_rate outside [0,1]");
    if (!(confidence_lo > 0.0 && confidence_lo <= confidence_hi && confidence_hi <= 1.0))
      throw std::runtime_error("mock teacher: confidence range must satisfy 0 < lo <= hi <= 1");
    if (box_jitter < 0.0) throw std::runtime_error("mock teacher: negative box_jitter");
  }
};

namespace detail {

inline std::vector<double> one_hot_with_confidence(int part, int num_parts, double conf) {
  std::vector<double> probs(static_cast<std::size_t>(num_parts),
                            num_parts > 1 ? (1.0 - conf) / (num_parts - 1) : 0.0);
  probs[static_cast<std::size_t>(part)] = conf;
  return probs;
}

}  // namespace detail

/// BOX: per view, one jittered tight box per visible ground-truth part, with
/// seeded drops and label flips. PIXEL: the per-pixel analog with per-pixel
/// drops and flips. Per-view sub-seeds keep parallel and serial runs equal.
inline Predictions mock_vlm_predict(const PointCloudShape& shape,
                                    const std::vector<ViewRender>& views,
                                    const MockTeacherConfig& config) {
  config.validate();
  if (!shape.has_labels()) throw std::runtime_error("mock teacher: shape has no labels");
  const int num_parts = shape.num_parts();
  for (int l : shape.labels)
    if (l < 0) throw std::runtime_error("mock teacher: shape has unlabeled points");
  if (config.confidence_lo <= 1.0 / num_parts)
    throw std::runtime_error("mock teacher: confidence_lo must exceed 1/R to keep the argmax");

  auto draw_part = [&](Rng& rng, int true_part) {
    if (rng.uniform() >= config.flip_rate) return true_part;
    const int wrong = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_parts - 1)));
    return wrong >= true_part ? wrong + 1 : wrong;  // uniform over wrong parts
  };

  // A part counts as detectable in a view only when it owns a minimal
  // share of pixels (0.06%, 30 px at 224x224). Real detectors threshold on
  // evidence; without this, a 99%-occluded part still emits a sliver box
  // whose few-point mask gets an outsized 1/|M^d| weight in the loss.
  const long long min_evidence = std::max<long long>(
      1, static_cast<long long>(0.0006 * views.front().height * views.front().width));

  if (config.kind == TeacherKind::Box) {
    // Detectors box part instances, not part categories: each 4-connected
    // region of a part's pixels becomes its own detection. A chair's four
    // legs give four tight boxes, never one hull spanning the shape.
    std::vector<BoxPrediction> boxes;
    for (const ViewRender& view : views) {
      Rng rng(hash_combine(config.seed, static_cast<std::uint64_t>(view.view_index)));
      std::vector<int> part_map(static_cast<std::size_t>(view.height) * view.width, -1);
      for (std::size_t idx = 0; idx < part_map.size(); ++idx)
        if (view.pixel_owner[idx] != kNoOwner)
          part_map[idx] = shape.labels[static_cast<std::size_t>(view.pixel_owner[idx])];
      for (const SegComponent& instance : connected_components(part_map, view.height, view.width)) {
        if (static_cast<long long>(instance.pixels.size()) < min_evidence) continue;
        if (rng.uniform() < config.drop_rate) continue;
        const int emitted = draw_part(rng, instance.part_index);
        const double conf = rng.uniform(config.confidence_lo, config.confidence_hi);
        int min_r = view.height, max_r = -1, min_c = view.width, max_c = -1;
        for (const Pixel& px : instance.pixels) {
          min_r = std::min(min_r, px.row);
          max_r = std::max(max_r, px.row);
          min_c = std::min(min_c, px.col);
          max_c = std::max(max_c, px.col);
        }
        BoxPrediction box;
        box.view_index = view.view_index;
        box.x1 = min_c;
        box.y1 = min_r;
        box.x2 = max_c + 1;
        box.y2 = max_r + 1;
        if (config.box_jitter > 0.0) {
          box.x1 += rng.uniform(-config.box_jitter, config.box_jitter);
          box.y1 += rng.uniform(-config.box_jitter, config.box_jitter);
          box.x2 += rng.uniform(-config.box_jitter, config.box_jitter);
          box.y2 += rng.uniform(-config.box_jitter, config.box_jitter);
        }
        box.x1 = std::clamp(box.x1, 0.0, static_cast<double>(view.width - 1));
        box.y1 = std::clamp(box.y1, 0.0, static_cast<double>(view.height - 1));
        box.x2 = std::clamp(box.x2, box.x1 + 1.0, static_cast<double>(view.width));
        box.y2 = std::clamp(box.y2, box.y1 + 1.0, static_cast<double>(view.height));
        box.probs = detail::one_hot_with_confidence(emitted, num_parts, conf);
        boxes.push_back(std::move(box));
      }
    }
    return boxes;
  }

  std::vector<PixelPredictionMap> maps;
  for (const ViewRender& view : views) {
    Rng rng(hash_combine(config.seed, static_cast<std::uint64_t>(view.view_index)));
    PixelPredictionMap map;
    map.view_index = view.view_index;
    map.height = view.height;
    map.width = view.width;
    map.num_parts = num_parts;
    map.foreground.assign(static_cast<std::size_t>(view.height) * view.width, 0);
    map.probs.assign(map.foreground.size() * static_cast<std::size_t>(num_parts), 0.0);
    bool any = false;
    for (int r = 0; r < view.height; ++r)
      for (int c = 0; c < view.width; ++c) {
        const int owner = view.owner(r, c);
        if (owner == kNoOwner) continue;
        if (rng.uniform() < config.drop_rate) continue;
        const int true_part = shape.labels[static_cast<std::size_t>(owner)];
        const int emitted = draw_part(rng, true_part);
        const double conf = rng.uniform(config.confidence_lo, config.confidence_hi);
        map.foreground[static_cast<std::size_t>(r) * view.width + c] = 1;
        const std::vector<double> probs = detail::one_hot_with_confidence(emitted, num_parts, conf);
        std::copy(probs.begin(), probs.end(), map.pixel_probs(r, c));
        any = true;
      }
    if (any) maps.push_back(std::move(map));
  }
  return maps;
}

}  // namespace partdistill
