#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "partdistill/eval.hpp"

namespace partdistill {

/// Everything one evaluation run reports. Fields that did not apply to the
/// run stay unset and are omitted from the serialized report.
struct MetricsReport {
  std::uint64_t seed = 0;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  int num_shapes = 0;
  int num_parts = 0;
  std::vector<std::optional<double>> iou_3d_per_part;
  double miou_3d = 0.0;
  std::vector<std::optional<double>> voting_iou_3d_per_part;
  double voting_miou_3d = 0.0;
  long long voting_unassigned_points = 0;
  std::optional<double> miou_2d;
  std::optional<double> miou_2d_rescored;
  long long uncovered_points = 0;
  std::optional<double> uncovered_point_accuracy;
  std::optional<int> trigger_epoch;
};

inline nlohmann::ordered_json report_to_json(const MetricsReport& report) {
  auto part_array = [](const std::vector<std::optional<double>>& parts) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& p : parts) {
      if (p.has_value())
        arr.push_back(*p);
      else
        arr.push_back(nullptr);
    }
    return arr;
  };
  nlohmann::ordered_json j;
  j["seed"] = report.seed;
  j["config"] = report.config;
  j["num_shapes"] = report.num_shapes;
  j["num_parts"] = report.num_parts;
  j["miou_3d"] = report.miou_3d;
  j["iou_3d_per_part"] = part_array(report.iou_3d_per_part);
  j["voting_miou_3d"] = report.voting_miou_3d;
  j["voting_iou_3d_per_part"] = part_array(report.voting_iou_3d_per_part);
  j["voting_unassigned_points"] = report.voting_unassigned_points;
  if (report.miou_2d) j["miou_2d"] = *report.miou_2d;
  if (report.miou_2d_rescored) j["miou_2d_rescored"] = *report.miou_2d_rescored;
  j["uncovered_points"] = report.uncovered_points;
  if (report.uncovered_point_accuracy)
    j["uncovered_point_accuracy"] = *report.uncovered_point_accuracy;
  if (report.trigger_epoch) j["trigger_epoch"] = *report.trigger_epoch;
  return j;
}

inline void write_report(const MetricsReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_report: cannot open " + path);
  out << report_to_json(report).dump(2) << '\n';
  if (!out) throw std::runtime_error("write_report: write failed for " + path);
}

}  // namespace partdistill
