#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "partdistill/teacher.hpp"

namespace partdistill {

// Prediction NDJSON, one object per line, a single kind per file:
//   {"kind":"box","view":v,"rect":[x1,y1,x2,y2],"probs":[R floats]}
//   {"kind":"pixel","view":v,"part":r,"pixels_rle":[start,len,...],"probs":[R floats]}
// Pixel records carry one probs vector for all their pixels; that flattens
// any per-pixel variation a producer had, which is the documented lossy part
// of the exchange format.

namespace detail {

inline std::vector<double> parse_probs(const nlohmann::json& obj, int line_no) {
  const std::string at = " (line " + std::to_string(line_no) + ")";
  if (!obj.contains("probs") || !obj["probs"].is_array())
    throw std::runtime_error("predictions: missing probs array" + at);
  std::vector<double> probs = obj["probs"].get<std::vector<double>>();
  if (probs.empty()) throw std::runtime_error("predictions: empty probs" + at);
  double sum = 0.0;
  for (double p : probs) {
    if (p < -1e-12) throw std::runtime_error("predictions: negative prob" + at);
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-3)
    throw std::runtime_error("predictions: probs not normalized" + at);
  return probs;
}

}  // namespace detail

/// Parses one prediction file; image dimensions are needed to expand pixel
/// run-lengths and clamp boxes. An empty file loads as an empty box list.
inline Predictions load_predictions(const std::string& path, int height, int width) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_predictions: cannot open " + path);

  std::vector<BoxPrediction> boxes;
  // Pixel records compose into one map per view; later records overwrite
  // earlier ones where they overlap.
  std::map<int, PixelPredictionMap> maps;
  int num_parts = -1;
  std::string kind_seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string at = " (line " + std::to_string(line_no) + ")";
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("predictions: malformed JSON" + at + ": " + e.what());
    }
    if (!obj.contains("kind") || !obj["kind"].is_string())
      throw std::runtime_error("predictions: missing kind" + at);
    const std::string kind = obj["kind"].get<std::string>();
    if (kind != "box" && kind != "pixel")
      throw std::runtime_error("predictions: unknown kind '" + kind + "'" + at);
    if (kind_seen.empty())
      kind_seen = kind;
    else if (kind_seen != kind)
      throw std::runtime_error("predictions: mixed prediction kinds" + at);
    if (!obj.contains("view") || !obj["view"].is_number_integer())
      throw std::runtime_error("predictions: missing view" + at);
    const int view = obj["view"].get<int>();
    if (view < 0) throw std::runtime_error("predictions: negative view" + at);
    std::vector<double> probs = detail::parse_probs(obj, line_no);
    if (num_parts < 0)
      num_parts = static_cast<int>(probs.size());
    else if (num_parts != static_cast<int>(probs.size()))
      throw std::runtime_error("predictions: inconsistent part count" + at);

    if (kind == "box") {
      if (!obj.contains("rect") || !obj["rect"].is_array() || obj["rect"].size() != 4)
        throw std::runtime_error("predictions: rect must be [x1,y1,x2,y2]" + at);
      BoxPrediction box;
      box.view_index = view;
      box.x1 = std::clamp(obj["rect"][0].get<double>(), 0.0, static_cast<double>(width));
      box.y1 = std::clamp(obj["rect"][1].get<double>(), 0.0, static_cast<double>(height));
      box.x2 = std::clamp(obj["rect"][2].get<double>(), 0.0, static_cast<double>(width));
      box.y2 = std::clamp(obj["rect"][3].get<double>(), 0.0, static_cast<double>(height));
      if (!(box.x1 < box.x2 && box.y1 < box.y2))
        throw std::runtime_error("predictions: degenerate rect after clamping" + at);
      box.probs = std::move(probs);
      boxes.push_back(std::move(box));
    } else {
      if (!obj.contains("part") || !obj["part"].is_number_integer())
        throw std::runtime_error("predictions: missing part" + at);
      const int part = obj["part"].get<int>();
      if (part < 0 || part >= num_parts)
        throw std::runtime_error("predictions: part out of range" + at);
      if (!obj.contains("pixels_rle") || !obj["pixels_rle"].is_array() ||
          obj["pixels_rle"].size() % 2 != 0 || obj["pixels_rle"].empty())
        throw std::runtime_error("predictions: pixels_rle must hold start,len pairs" + at);
      auto& map = maps[view];
      if (map.foreground.empty()) {
        map.view_index = view;
        map.height = height;
        map.width = width;
        map.num_parts = num_parts;
        map.foreground.assign(static_cast<std::size_t>(height) * width, 0);
        map.probs.assign(map.foreground.size() * static_cast<std::size_t>(num_parts), 0.0);
      }
      const auto& rle = obj["pixels_rle"];
      for (std::size_t k = 0; k + 1 < rle.size(); k += 2) {
        const long long start = rle[k].get<long long>();
        const long long len = rle[k + 1].get<long long>();
        if (start < 0 || len < 1 || start + len > static_cast<long long>(map.foreground.size()))
          throw std::runtime_error("predictions: pixels_rle out of bounds" + at);
        for (long long off = start; off < start + len; ++off) {
          map.foreground[static_cast<std::size_t>(off)] = 1;
          std::copy(probs.begin(), probs.end(),
                    map.probs.begin() + static_cast<std::size_t>(off) * num_parts);
        }
      }
    }
  }
  if (kind_seen == "pixel") {
    std::vector<PixelPredictionMap> out;
    out.reserve(maps.size());
    for (auto& [view, map] : maps) out.push_back(std::move(map));
    return out;
  }
  return boxes;  // "box", or empty file
}

/// Serializes predictions to NDJSON. Pixel maps are grouped by argmax part;
/// each group's probs become the mean over its pixels.
inline void save_predictions(const Predictions& predictions, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_predictions: cannot open " + path);
  if (is_box_kind(predictions)) {
    for (const BoxPrediction& box : std::get<std::vector<BoxPrediction>>(predictions)) {
      nlohmann::ordered_json obj;
      obj["kind"] = "box";
      obj["view"] = box.view_index;
      obj["rect"] = {box.x1, box.y1, box.x2, box.y2};
      obj["probs"] = box.probs;
      out << obj.dump() << '\n';
    }
  } else {
    for (const PixelPredictionMap& map : std::get<std::vector<PixelPredictionMap>>(predictions)) {
      std::vector<std::vector<std::size_t>> offsets_by_part(static_cast<std::size_t>(map.num_parts));
      std::vector<std::vector<double>> sums(static_cast<std::size_t>(map.num_parts));
      for (int r = 0; r < map.height; ++r)
        for (int c = 0; c < map.width; ++c) {
          if (!map.is_foreground(r, c)) continue;
          const double* probs = map.pixel_probs(r, c);
          const auto part = static_cast<std::size_t>(argmax_index(probs, map.num_parts));
          offsets_by_part[part].push_back(static_cast<std::size_t>(r) * map.width + c);
          if (sums[part].empty()) sums[part].assign(static_cast<std::size_t>(map.num_parts), 0.0);
          for (int k = 0; k < map.num_parts; ++k) sums[part][static_cast<std::size_t>(k)] += probs[k];
        }
      for (int part = 0; part < map.num_parts; ++part) {
        const auto& offsets = offsets_by_part[static_cast<std::size_t>(part)];
        if (offsets.empty()) continue;
        std::vector<std::size_t> rle;
        std::size_t run_start = offsets[0], run_len = 1;
        for (std::size_t k = 1; k < offsets.size(); ++k) {
          if (offsets[k] == run_start + run_len) {
            ++run_len;
          } else {
            rle.push_back(run_start);
            rle.push_back(run_len);
            run_start = offsets[k];
            run_len = 1;
          }
        }
        rle.push_back(run_start);
        rle.push_back(run_len);
        std::vector<double> mean = sums[static_cast<std::size_t>(part)];
        for (double& v : mean) v /= static_cast<double>(offsets.size());
        nlohmann::ordered_json obj;
        obj["kind"] = "pixel";
        obj["view"] = map.view_index;
        obj["part"] = part;
        obj["pixels_rle"] = rle;
        obj["probs"] = mean;
        out << obj.dump() << '\n';
      }
    }
  }
  if (!out) throw std::runtime_error("save_predictions: write failed for " + path);
}

}  // namespace partdistill
