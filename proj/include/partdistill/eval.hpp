#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "partdistill/geom.hpp"
#include "partdistill/teacher.hpp"

namespace partdistill {

struct IouResult {
  std::vector<std::optional<double>> per_part;  // empty optional: absent on both sides
  double mean = 0.0;
};

/// Running intersection/union tallies, so per-shape and corpus-level IoU
/// share one code path. Points with gt -1 are excluded; predictions outside
/// [0, R) (e.g. UNASSIGNED) match no part and only inflate the union of
/// their ground-truth part.
struct IouCounts {
  explicit IouCounts(int num_parts)
      : intersection(static_cast<std::size_t>(num_parts), 0),
        union_(static_cast<std::size_t>(num_parts), 0) {}

  void add(const std::vector<int>& pred, const std::vector<int>& gt) {
    if (pred.size() != gt.size()) throw std::runtime_error("iou_3d: pred/gt size mismatch");
    const int num_parts = static_cast<int>(intersection.size());
    for (std::size_t n = 0; n < gt.size(); ++n) {
      if (gt[n] == kNoLabel) continue;
      ++labeled_points;
      if (gt[n] < 0 || gt[n] >= num_parts) throw std::runtime_error("iou_3d: gt label out of range");
      const bool pred_in_range = pred[n] >= 0 && pred[n] < num_parts;
      if (pred_in_range && pred[n] == gt[n]) {
        ++intersection[static_cast<std::size_t>(gt[n])];
        ++union_[static_cast<std::size_t>(gt[n])];
      } else {
        ++union_[static_cast<std::size_t>(gt[n])];
        if (pred_in_range) ++union_[static_cast<std::size_t>(pred[n])];
      }
    }
  }

  IouResult finalize() const {
    if (labeled_points == 0) throw std::runtime_error("iou_3d: no ground truth");
    IouResult result;
    result.per_part.resize(intersection.size());
    double sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t r = 0; r < intersection.size(); ++r) {
      if (union_[r] == 0) continue;  // absent from both pred and gt
      result.per_part[r] = static_cast<double>(intersection[r]) / static_cast<double>(union_[r]);
      sum += *result.per_part[r];
      ++defined;
    }
    result.mean = defined ? sum / static_cast<double>(defined) : 0.0;
    return result;
  }

  std::vector<long long> intersection, union_;
  long long labeled_points = 0;
};

inline IouResult iou_3d(const std::vector<int>& pred, const std::vector<int>& gt, int num_parts) {
  IouCounts counts(num_parts);
  counts.add(pred, gt);
  return counts.finalize();
}

struct Iou2dEntry {
  int view = 0;
  int part = 0;
  double iou = 0.0;
};

struct Iou2dResult {
  std::vector<Iou2dEntry> entries;  // (view, part) pairs with defined denominators
  double mean = 0.0;
};

/// Confidence-weighted 2D IoU of the teacher's predictions against ground
/// truth projected through each view's ownership raster:
///   IoU2D(r) = I / (I + lambda + gamma)
///   I      = sum_i conf_i * |s_i and G_r|          over units claiming r
///   lambda = mean(conf) * |union(s_i) minus G_r|
///   gamma  = |G_r minus union(s_i)|
/// conf is the unit's mean 2D confidence, or C_bd when use_rescored is set.
inline Iou2dResult iou_2d(const std::vector<ViewRender>& views,
                          const std::vector<KnowledgeUnit>& units,
                          const std::vector<int>& gt_labels, int num_parts, bool use_rescored) {
  Iou2dResult result;
  double sum = 0.0;
  for (const ViewRender& view : views) {
    // Ground-truth 2D map for this view.
    std::vector<int> gt_map(static_cast<std::size_t>(view.height) * view.width, -1);
    std::vector<long long> gt_count(static_cast<std::size_t>(num_parts), 0);
    for (std::size_t idx = 0; idx < gt_map.size(); ++idx) {
      const int owner = view.pixel_owner[idx];
      if (owner == kNoOwner) continue;
      const int label = gt_labels[static_cast<std::size_t>(owner)];
      if (label < 0) continue;
      gt_map[idx] = label;
      ++gt_count[static_cast<std::size_t>(label)];
    }
    std::vector<std::uint8_t> stamp(gt_map.size());
    for (int part = 0; part < num_parts; ++part) {
      double weighted_inter = 0.0;  // I(r)
      double conf_sum = 0.0;
      int claiming = 0;
      std::fill(stamp.begin(), stamp.end(), 0);
      long long union_gt = 0;     // |union ^ G_r|
      long long union_total = 0;  // |union|
      for (const KnowledgeUnit& unit : units) {
        if (unit.view_index != view.view_index || unit.part_2d != part) continue;
        double conf = unit.confidence_2d;
        if (use_rescored) {
          if (!unit.rescored_confidence.has_value())
            throw std::runtime_error("iou_2d: re-scored confidence missing");
          conf = *unit.rescored_confidence;
        }
        ++claiming;
        conf_sum += conf;
        long long inter = 0;
        for (const Pixel& px : unit.pixels_2d) {
          const std::size_t idx = static_cast<std::size_t>(px.row) * view.width + px.col;
          if (gt_map[idx] == part) ++inter;
          if (!stamp[idx]) {
            stamp[idx] = 1;
            ++union_total;
            if (gt_map[idx] == part) ++union_gt;
          }
        }
        weighted_inter += conf * static_cast<double>(inter);
      }
      const double avg_conf = claiming ? conf_sum / claiming : 0.0;
      const double lambda = avg_conf * static_cast<double>(union_total - union_gt);
      const double gamma = static_cast<double>(gt_count[static_cast<std::size_t>(part)] - union_gt);
      const double denom = weighted_inter + lambda + gamma;
      if (denom <= 0.0) continue;  // part absent from both prediction and gt
      const double iou = weighted_inter / denom;
      result.entries.push_back({view.view_index, part, iou});
      sum += iou;
    }
  }
  result.mean = result.entries.empty() ? 0.0 : sum / static_cast<double>(result.entries.size());
  return result;
}

/// Direct-transfer baseline: each point takes the plurality teacher argmax
/// over the units covering it (unweighted, ties to the lowest part); points
/// no unit covers stay kUnassigned.
inline std::vector<int> voting_baseline(const PointCloudShape& shape,
                                        const std::vector<KnowledgeUnit>& units) {
  const std::size_t n = shape.num_points();
  const int num_parts = shape.num_parts();
  std::vector<int> votes(n * static_cast<std::size_t>(num_parts), 0);
  for (const KnowledgeUnit& unit : units) {
    if (unit.num_points != n) throw std::runtime_error("voting_baseline: unit does not match shape");
    for (std::size_t j = 0; j < unit.mask_size(); ++j)
      ++votes[static_cast<std::size_t>(unit.point_indices[j]) * num_parts +
              static_cast<std::size_t>(unit.point_argmax(j))];
  }
  std::vector<int> labels(n, kUnassigned);
  for (std::size_t i = 0; i < n; ++i) {
    const int* row = votes.data() + i * static_cast<std::size_t>(num_parts);
    int best = kUnassigned, best_votes = 0;
    for (int r = 0; r < num_parts; ++r)
      if (row[r] > best_votes) {
        best_votes = row[r];
        best = r;
      }
    labels[i] = best;
  }
  return labels;
}

/// Points covered by no unit at all -- the uncovered set of the voting
/// baseline and of the exclude-uncovered evaluation mode.
inline std::vector<std::uint8_t> covered_mask(std::size_t num_points,
                                              const std::vector<KnowledgeUnit>& units) {
  std::vector<std::uint8_t> covered(num_points, 0);
  for (const KnowledgeUnit& unit : units)
    for (int n : unit.point_indices) covered[static_cast<std::size_t>(n)] = 1;
  return covered;
}

/// Mesh-face propagation: each face centroid takes the majority label of its
/// five nearest points (all points when fewer exist). A tied vote falls to
/// the label of the nearest point among the tied labels.
inline std::vector<int> propagate_to_faces(const std::vector<int>& point_pred,
                                           const std::vector<Vec3>& points,
                                           const std::vector<Vec3>& face_centroids) {
  if (face_centroids.empty()) throw std::runtime_error("propagate_to_faces: no faces");
  if (point_pred.size() != points.size())
    throw std::runtime_error("propagate_to_faces: pred/point size mismatch");
  const std::size_t k = std::min<std::size_t>(5, points.size());
  std::vector<int> face_labels(face_centroids.size());
  std::vector<std::pair<double, std::size_t>> dist(points.size());
  for (std::size_t f = 0; f < face_centroids.size(); ++f) {
    for (std::size_t i = 0; i < points.size(); ++i) {
      const Vec3 d = points[i] - face_centroids[f];
      dist[i] = {d.dot(d), i};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    std::map<int, int> tally;
    for (std::size_t j = 0; j < k; ++j) ++tally[point_pred[dist[j].second]];
    int best_count = 0;
    for (const auto& [label, count] : tally) best_count = std::max(best_count, count);
    // Nearest neighbor whose label is among the tied winners decides.
    int winner = kUnassigned;
    for (std::size_t j = 0; j < k; ++j) {
      const int label = point_pred[dist[j].second];
      if (tally[label] == best_count) {
        winner = label;
        break;
      }
    }
    face_labels[f] = winner;
  }
  return face_labels;
}

// .pred text dump: one integer label per line.

inline void save_pred(const std::vector<int>& labels, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_pred: cannot open " + path);
  for (int l : labels) out << l << '\n';
  if (!out) throw std::runtime_error("save_pred: write failed for " + path);
}

inline std::vector<int> load_pred(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_pred: cannot open " + path);
  std::vector<int> labels;
  int v = 0;
  while (in >> v) labels.push_back(v);
  if (labels.empty()) throw std::runtime_error("load_pred: empty file " + path);
  return labels;
}

}  // namespace partdistill
