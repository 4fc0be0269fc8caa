#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "partdistill/distill.hpp"
#include "partdistill/eval.hpp"
#include "partdistill/predictions_io.hpp"
#include "partdistill/report_io.hpp"
#include "partdistill/shape_io.hpp"
#include "partdistill/synth.hpp"

namespace partdistill {

enum class TeacherSource { Mock, File };

/// One run's worth of knobs. A single --seed drives corpus generation, the
/// mock teacher, and training through derived sub-seeds.
struct PipelineConfig {
  std::string input_path;   // .xyzl file or corpus dir; empty = generate
  std::string out_dir = "partdistill_out";

  int generate_count = 20;
  std::size_t points_per_shape = 2048;
  std::string template_name = "chair";  // chair | table | lamp | mix

  int views = 10;
  int image_size = 224;
  double splat_radius = 2.0;

  TeacherSource teacher = TeacherSource::Mock;
  TeacherKind teacher_kind = TeacherKind::Box;
  std::string predictions_path;  // FILE teacher: .ndjson file or dir of <id>.ndjson
  double drop_rate = 0.0;
  double flip_rate = 0.0;
  double confidence_lo = 1.0;
  double confidence_hi = 1.0;
  double box_jitter = 0.0;

  DistillConfig distill;
  std::string few_shot_labels_path;
  std::string features_dir;  // optional externally computed .feat files
  bool dump_features = false;
  bool dump_renders = false;

  std::string pred_dir;  // eval: where .pred files live; default <out>/preds
  bool exclude_uncovered = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (views < 1) throw std::runtime_error("config: views must be >= 1");
    if (image_size < 16) throw std::runtime_error("config: image size below 16");
    if (splat_radius < 1.0) throw std::runtime_error("config: splat radius must be >= 1");
    if (teacher == TeacherSource::File && predictions_path.empty())
      throw std::runtime_error("config: file teacher requires --predictions");
    distill.validate();
  }

  std::uint64_t generate_seed() const { return hash_combine(seed, 0x67656eULL); }
  std::uint64_t teacher_seed() const { return hash_combine(seed, 0x746561636820ULL); }
  std::uint64_t align_seed() const { return hash_combine(seed, 0x616c69676eULL); }

  MockTeacherConfig mock_config() const {
    MockTeacherConfig mock;
    mock.kind = teacher_kind;
    mock.drop_rate = drop_rate;
    mock.flip_rate = flip_rate;
    mock.confidence_lo = confidence_lo;
    mock.confidence_hi = confidence_hi;
    mock.box_jitter = box_jitter;
    mock.seed = teacher_seed();
    return mock;
  }
};

namespace detail {

inline void ensure_dir(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec) throw std::runtime_error("cannot create directory " + path + ": " + ec.message());
}

inline std::string join(const std::string& a, const std::string& b) {
  return (std::filesystem::path(a) / b).string();
}

}  // namespace detail

/// Loads a single .xyzl file or every .xyzl in a directory (sorted by name)
/// and normalizes each shape.
inline std::vector<PointCloudShape> load_corpus(const std::string& path) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw std::runtime_error("input not found: " + path);
  std::vector<std::string> files;
  if (fs::is_directory(path)) {
    for (const auto& entry : fs::directory_iterator(path))
      if (entry.is_regular_file() && entry.path().extension() == ".xyzl")
        files.push_back(entry.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("no .xyzl files in " + path);
  } else {
    files.push_back(path);
  }
  std::vector<PointCloudShape> corpus;
  corpus.reserve(files.size());
  for (const std::string& file : files) corpus.push_back(normalize_shape(load_xyzl(file)));
  return corpus;
}

inline std::vector<ShapeTemplate> templates_for(const std::string& name, std::size_t points) {
  if (name == "mix") return {chair_template(points), table_template(points), lamp_template(points)};
  return {template_by_name(name, points)};
}

inline std::vector<std::string> run_generate(const PipelineConfig& config) {
  config.validate();
  const std::string corpus_dir = detail::join(config.out_dir, "corpus");
  detail::ensure_dir(corpus_dir);
  const auto corpus = generate_corpus(templates_for(config.template_name, config.points_per_shape),
                                      config.generate_count, config.generate_seed());
  std::vector<std::string> paths;
  for (const PointCloudShape& shape : corpus) {
    const std::string path = detail::join(corpus_dir, shape.shape_id + ".xyzl");
    save_xyzl(shape, path);
    paths.push_back(path);
  }
  return paths;
}

inline std::string corpus_location(const PipelineConfig& config) {
  return config.input_path.empty() ? detail::join(config.out_dir, "corpus") : config.input_path;
}

inline std::vector<std::string> run_render(const PipelineConfig& config) {
  config.validate();
  const auto corpus = load_corpus(corpus_location(config));
  const auto cameras = make_view_ring(config.views, config.image_size);
  const std::string render_dir = detail::join(config.out_dir, "renders");
  detail::ensure_dir(render_dir);
  std::vector<std::string> paths;
  char suffix[48];
  for (const PointCloudShape& shape : corpus) {
    const auto views = render_views(cameras, shape, config.splat_radius);
    for (const ViewRender& view : views) {
      std::snprintf(suffix, sizeof(suffix), "_v%02d_depth.pgm", view.view_index);
      std::string path = detail::join(render_dir, shape.shape_id + suffix);
      save_depth_pgm(view, path);
      paths.push_back(path);
      std::snprintf(suffix, sizeof(suffix), "_v%02d_gt.ppm", view.view_index);
      path = detail::join(render_dir, shape.shape_id + suffix);
      save_label_ppm(view, shape.labels, path);
      paths.push_back(path);
    }
  }
  return paths;
}

/// Prediction file for one shape: mock output lives under <out>/predictions,
/// a FILE teacher points at its own file or <dir>/<shape_id>.ndjson.
inline std::string predictions_file_for(const PipelineConfig& config, const std::string& shape_id) {
  if (config.teacher == TeacherSource::Mock)
    return detail::join(detail::join(config.out_dir, "predictions"), shape_id + ".ndjson");
  if (std::filesystem::is_directory(config.predictions_path))
    return detail::join(config.predictions_path, shape_id + ".ndjson");
  return config.predictions_path;
}

/// Mock teacher stage: renders each shape, emits noisy predictions, and
/// writes them as NDJSON plus a per-shape coverage summary. Later stages
/// read the files back, so chained stages and one-shot pipelines agree.
inline std::vector<std::string> run_extract(const PipelineConfig& config) {
  config.validate();
  const auto corpus = load_corpus(corpus_location(config));
  const auto cameras = make_view_ring(config.views, config.image_size);
  std::vector<std::string> paths;
  nlohmann::ordered_json summary;
  summary["kind"] = config.teacher_kind == TeacherKind::Box ? "box" : "pixel";
  summary["shapes"] = nlohmann::ordered_json::array();
  const std::string pred_dir = detail::join(config.out_dir, "predictions");
  if (config.teacher == TeacherSource::Mock) detail::ensure_dir(pred_dir);
  for (const PointCloudShape& shape : corpus) {
    const auto views = render_views(cameras, shape, config.splat_radius);
    Predictions predictions;
    if (config.teacher == TeacherSource::Mock) {
      predictions = mock_vlm_predict(shape, views, config.mock_config());
      const std::string path = detail::join(pred_dir, shape.shape_id + ".ndjson");
      save_predictions(predictions, path);
      paths.push_back(path);
      predictions = load_predictions(path, config.image_size, config.image_size);
    } else {
      predictions = load_predictions(predictions_file_for(config, shape.shape_id),
                                     config.image_size, config.image_size);
    }
    const auto units = extract_knowledge(shape.shape_id, views, predictions);
    const auto covered = covered_mask(shape.num_points(), units);
    const auto covered_count = static_cast<double>(
        std::count(covered.begin(), covered.end(), std::uint8_t{1}));
    nlohmann::ordered_json entry;
    entry["shape_id"] = shape.shape_id;
    entry["units"] = units.size();
    entry["covered_fraction"] = covered_count / static_cast<double>(shape.num_points());
    summary["shapes"].push_back(entry);
  }
  detail::ensure_dir(config.out_dir);
  const std::string summary_path = detail::join(config.out_dir, "extract_summary.json");
  std::ofstream out(summary_path);
  out << summary.dump(2) << '\n';
  paths.push_back(summary_path);
  return paths;
}

struct DistillArtifacts {
  std::vector<std::string> paths;
  std::optional<int> trigger_epoch;
  bool backward_applied = false;
};

namespace detail {

struct PreparedCorpus {
  std::vector<PointCloudShape> shapes;
  std::vector<std::vector<ViewRender>> views;
  std::vector<std::vector<KnowledgeUnit>> units;
};

/// Shared front half of distill and eval: corpus, renders, predictions
/// loaded from file, knowledge units. Deterministic in the config.
inline PreparedCorpus prepare_corpus(const PipelineConfig& config) {
  PreparedCorpus prep;
  prep.shapes = load_corpus(corpus_location(config));
  const auto cameras = make_view_ring(config.views, config.image_size);
  for (const PointCloudShape& shape : prep.shapes) {
    prep.views.push_back(render_views(cameras, shape, config.splat_radius));
    const Predictions predictions = load_predictions(
        predictions_file_for(config, shape.shape_id), config.image_size, config.image_size);
    prep.units.push_back(extract_knowledge(shape.shape_id, prep.views.back(), predictions));
  }
  return prep;
}

inline std::set<std::string> load_few_shot_ids(const std::string& path) {
  std::set<std::string> ids;
  if (path.empty()) return ids;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open few-shot labels file " + path);
  std::string line;
  while (std::getline(in, line)) {
    const std::size_t a = line.find_first_not_of(" \t\r");
    if (a == std::string::npos || line[a] == '#') continue;
    const std::size_t b = line.find_last_not_of(" \t\r");
    ids.insert(line.substr(a, b - a + 1));
  }
  return ids;
}

}  // namespace detail

inline DistillArtifacts run_distill(const PipelineConfig& config) {
  config.validate();
  detail::PreparedCorpus prep = detail::prepare_corpus(config);
  if (config.distill.mode == AlignMode::Tta && prep.shapes.size() != 1)
    throw std::runtime_error("TTA alignment takes exactly one shape, got " +
                             std::to_string(prep.shapes.size()));

  DistillConfig distill_config = config.distill;
  distill_config.seed = config.align_seed();
  std::set<std::string> few_shot_ids = detail::load_few_shot_ids(config.few_shot_labels_path);
  if (!few_shot_ids.empty() && distill_config.few_shot_weight == 0.0)
    distill_config.few_shot_weight = 1.0;

  std::map<std::string, Matrix> external_features;
  if (!config.features_dir.empty())
    for (const PointCloudShape& shape : prep.shapes)
      external_features.emplace(shape.shape_id,
                                load_features(detail::join(config.features_dir,
                                                           shape.shape_id + ".feat")));

  AlignmentResult result = run_alignment(prep.shapes, std::move(prep.units), distill_config,
                                         EncoderConfig{}, few_shot_ids,
                                         std::move(external_features));

  DistillArtifacts artifacts;
  artifacts.trigger_epoch = result.trigger_epoch;
  artifacts.backward_applied = result.backward_applied;
  detail::ensure_dir(config.out_dir);

  const std::string loss_path = detail::join(config.out_dir, "loss.csv");
  save_loss_csv(result.loss_history, loss_path);
  artifacts.paths.push_back(loss_path);

  const std::string preds_dir = detail::join(config.out_dir, "preds");
  detail::ensure_dir(preds_dir);
  for (std::size_t s = 0; s < prep.shapes.size(); ++s) {
    const Matrix& probs = result.final_predictions[s];
    std::vector<int> labels(probs.rows());
    for (std::size_t n = 0; n < probs.rows(); ++n)
      labels[n] = argmax_index(probs.row(n), static_cast<int>(probs.cols()));
    const std::string path = detail::join(preds_dir, prep.shapes[s].shape_id + ".pred");
    save_pred(labels, path);
    artifacts.paths.push_back(path);
  }

  if (result.backward_applied) {
    const std::string rescored_path = detail::join(config.out_dir, "rescored.csv");
    std::ofstream out(rescored_path);
    out << "shape_id,unit_index,rescored_confidence\n";
    char buf[64];
    for (std::size_t s = 0; s < result.units.size(); ++s)
      for (const KnowledgeUnit& unit : result.units[s]) {
        std::snprintf(buf, sizeof(buf), ",%d,%.17g\n", unit.unit_index,
                      unit.rescored_confidence.value());
        out << unit.shape_id << buf;
      }
    artifacts.paths.push_back(rescored_path);
  }

  if (config.dump_features) {
    const std::string feat_dir = detail::join(config.out_dir, "features");
    detail::ensure_dir(feat_dir);
    for (const PointCloudShape& shape : prep.shapes) {
      const std::string path = detail::join(feat_dir, shape.shape_id + ".feat");
      save_features(result.model.feature_cache.at(shape.shape_id), path);
      artifacts.paths.push_back(path);
    }
  }

  if (config.dump_renders) {
    const std::string render_dir = detail::join(config.out_dir, "renders");
    detail::ensure_dir(render_dir);
    char suffix[48];
    for (std::size_t s = 0; s < prep.shapes.size(); ++s) {
      const std::vector<int> labels =
          load_pred(detail::join(preds_dir, prep.shapes[s].shape_id + ".pred"));
      for (const ViewRender& view : prep.views[s]) {
        std::snprintf(suffix, sizeof(suffix), "_v%02d_pred.ppm", view.view_index);
        const std::string path = detail::join(render_dir, prep.shapes[s].shape_id + suffix);
        save_label_ppm(view, labels, path);
        artifacts.paths.push_back(path);
      }
    }
  }

  nlohmann::ordered_json meta;
  if (result.trigger_epoch) meta["trigger_epoch"] = *result.trigger_epoch;
  meta["backward_applied"] = result.backward_applied;
  meta["warnings"] = result.warnings;
  const std::string meta_path = detail::join(config.out_dir, "distill_meta.json");
  std::ofstream meta_out(meta_path);
  meta_out << meta.dump(2) << '\n';
  artifacts.paths.push_back(meta_path);
  return artifacts;
}

inline nlohmann::ordered_json config_echo(const PipelineConfig& config) {
  nlohmann::ordered_json j;
  j["views"] = config.views;
  j["image_size"] = config.image_size;
  j["splat_radius"] = config.splat_radius;
  j["epochs"] = config.distill.epochs;
  j["lr"] = config.distill.lr;
  j["batch_size_shapes"] = config.distill.batch_size_shapes;
  j["tau"] = config.distill.tau;
  j["mode"] = config.distill.mode == AlignMode::Pre ? "pre" : "tta";
  j["backward_distillation"] = config.distill.backward_distillation;
  j["few_shot_weight"] = config.distill.few_shot_weight;
  j["teacher"] = config.teacher == TeacherSource::Mock ? "mock" : "file";
  j["teacher_kind"] = config.teacher_kind == TeacherKind::Box ? "box" : "pixel";
  j["drop_rate"] = config.drop_rate;
  j["flip_rate"] = config.flip_rate;
  j["confidence_lo"] = config.confidence_lo;
  j["confidence_hi"] = config.confidence_hi;
  j["box_jitter"] = config.box_jitter;
  j["generate_count"] = config.generate_count;
  j["points_per_shape"] = config.points_per_shape;
  j["template"] = config.template_name;
  j["exclude_uncovered"] = config.exclude_uncovered;
  return j;
}

/// Scores stored .pred files against ground truth: 3D mIoU (respecting
/// --exclude-uncovered), the direct-voting baseline, 2D mIoU before and --
/// when a rescored.csv is present -- after backward distillation, and
/// uncovered-point statistics. Writes report.json.
inline MetricsReport run_eval(const PipelineConfig& config) {
  config.validate();
  detail::PreparedCorpus prep = detail::prepare_corpus(config);
  const int num_parts = prep.shapes.front().num_parts();
  const std::string pred_dir =
      config.pred_dir.empty() ? detail::join(config.out_dir, "preds") : config.pred_dir;

  // Re-scored unit confidences from the distill stage, when available.
  const std::string rescored_path = detail::join(config.out_dir, "rescored.csv");
  bool have_rescored = false;
  if (std::filesystem::exists(rescored_path)) {
    std::ifstream in(rescored_path);
    std::string line;
    std::getline(in, line);  // header
    std::map<std::string, std::map<int, double>> scores;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const std::size_t c1 = line.find(',');
      const std::size_t c2 = line.find(',', c1 + 1);
      if (c1 == std::string::npos || c2 == std::string::npos)
        throw std::runtime_error("rescored.csv: malformed line: " + line);
      scores[line.substr(0, c1)][std::stoi(line.substr(c1 + 1, c2 - c1 - 1))] =
          std::stod(line.substr(c2 + 1));
    }
    for (std::size_t s = 0; s < prep.shapes.size(); ++s) {
      auto it = scores.find(prep.shapes[s].shape_id);
      if (it == scores.end()) continue;
      for (KnowledgeUnit& unit : prep.units[s]) {
        auto score = it->second.find(unit.unit_index);
        if (score != it->second.end()) unit.rescored_confidence = score->second;
      }
    }
    have_rescored = true;
  }

  MetricsReport report;
  report.seed = config.seed;
  report.config = config_echo(config);
  report.num_shapes = static_cast<int>(prep.shapes.size());
  report.num_parts = num_parts;

  IouCounts student_counts(num_parts), voting_counts(num_parts);
  double iou2d_sum = 0.0, iou2d_rescored_sum = 0.0;
  std::size_t iou2d_entries = 0, iou2d_rescored_entries = 0;
  long long uncovered = 0, uncovered_correct = 0, uncovered_labeled = 0;

  for (std::size_t s = 0; s < prep.shapes.size(); ++s) {
    const PointCloudShape& shape = prep.shapes[s];
    if (!shape.has_labels())
      throw std::runtime_error("eval: shape " + shape.shape_id + " has no ground truth");
    std::vector<int> student = load_pred(detail::join(pred_dir, shape.shape_id + ".pred"));
    if (student.size() != shape.num_points())
      throw std::runtime_error("eval: .pred size mismatch for " + shape.shape_id);

    const auto covered = covered_mask(shape.num_points(), prep.units[s]);
    for (std::size_t n = 0; n < covered.size(); ++n) {
      if (covered[n]) continue;
      ++uncovered;
      if (shape.labels[n] != kNoLabel) {
        ++uncovered_labeled;
        if (student[n] == shape.labels[n]) ++uncovered_correct;
      }
    }
    if (config.exclude_uncovered)
      for (std::size_t n = 0; n < covered.size(); ++n)
        if (!covered[n]) student[n] = kUnassigned;

    student_counts.add(student, shape.labels);
    const std::vector<int> voted = voting_baseline(shape, prep.units[s]);
    voting_counts.add(voted, shape.labels);
    for (int v : voted) report.voting_unassigned_points += (v == kUnassigned);

    const Iou2dResult before = iou_2d(prep.views[s], prep.units[s], shape.labels, num_parts, false);
    for (const Iou2dEntry& e : before.entries) iou2d_sum += e.iou;
    iou2d_entries += before.entries.size();
    if (have_rescored) {
      const Iou2dResult after = iou_2d(prep.views[s], prep.units[s], shape.labels, num_parts, true);
      for (const Iou2dEntry& e : after.entries) iou2d_rescored_sum += e.iou;
      iou2d_rescored_entries += after.entries.size();
    }
  }

  const IouResult student_iou = student_counts.finalize();
  report.iou_3d_per_part = student_iou.per_part;
  report.miou_3d = student_iou.mean;
  const IouResult voting_iou = voting_counts.finalize();
  report.voting_iou_3d_per_part = voting_iou.per_part;
  report.voting_miou_3d = voting_iou.mean;
  if (iou2d_entries) report.miou_2d = iou2d_sum / static_cast<double>(iou2d_entries);
  if (have_rescored && iou2d_rescored_entries)
    report.miou_2d_rescored = iou2d_rescored_sum / static_cast<double>(iou2d_rescored_entries);
  report.uncovered_points = uncovered;
  if (uncovered_labeled > 0)
    report.uncovered_point_accuracy =
        static_cast<double>(uncovered_correct) / static_cast<double>(uncovered_labeled);

  const std::string meta_path = detail::join(config.out_dir, "distill_meta.json");
  if (std::filesystem::exists(meta_path)) {
    std::ifstream in(meta_path);
    const auto meta = nlohmann::ordered_json::parse(in);
    if (meta.contains("trigger_epoch")) report.trigger_epoch = meta["trigger_epoch"].get<int>();
  }

  detail::ensure_dir(config.out_dir);
  write_report(report, detail::join(config.out_dir, "report.json"));
  return report;
}

/// One-shot run: generate (unless an input corpus is given), extract with
/// the mock teacher (unless a FILE teacher is configured), distill, eval.
/// Every stage works off the files the previous stage wrote, so this equals
/// chaining the subcommands with the same seed.
inline MetricsReport run_pipeline(const PipelineConfig& config) {
  config.validate();
  if (config.input_path.empty()) run_generate(config);
  if (config.teacher == TeacherSource::Mock) run_extract(config);
  run_distill(config);
  return run_eval(config);
}

}  // namespace partdistill
