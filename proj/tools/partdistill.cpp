// partdistill: generate -> render -> extract -> distill -> eval, as composable
// subcommands or a one-shot pipeline. Every stage writes its artifacts under
// --out and prints their paths; reruns with the same --seed reproduce every
// numeric output exactly.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "partdistill/pipeline.hpp"

namespace {

using partdistill::AlignMode;
using partdistill::PipelineConfig;
using partdistill::TeacherKind;
using partdistill::TeacherSource;

struct CliState {
  PipelineConfig config;
  std::string mode = "pre";
  std::string teacher = "mock";
  std::string kind = "box";
  std::string confidence = "1:1";
  std::string distill_config_path;
  bool no_backward_distill = false;
};

void add_render_flags(CLI::App* cmd, CliState& state) {
  cmd->add_option("--views", state.config.views, "Number of views on the camera ring");
  cmd->add_option("--image-size", state.config.image_size, "Square render resolution in pixels");
  cmd->add_option("--splat-radius", state.config.splat_radius, "Point splat radius in pixels");
}

void add_teacher_flags(CLI::App* cmd, CliState& state) {
  cmd->add_option("--teacher", state.teacher, "Teacher source: mock or file")
      ->check(CLI::IsMember({"mock", "file"}));
  cmd->add_option("--kind", state.kind, "Mock teacher output kind: box or pixel")
      ->check(CLI::IsMember({"box", "pixel"}));
  cmd->add_option("--predictions", state.config.predictions_path,
                  "Prediction NDJSON file or directory (file teacher)");
  cmd->add_option("--drop-rate", state.config.drop_rate, "Mock teacher: drop probability");
  cmd->add_option("--flip-rate", state.config.flip_rate, "Mock teacher: label flip probability");
  cmd->add_option("--confidence", state.confidence, "Mock teacher confidence range LO:HI");
  cmd->add_option("--box-jitter", state.config.box_jitter, "Mock teacher: box jitter in pixels");
}

void add_distill_flags(CLI::App* cmd, CliState& state) {
  cmd->add_option("--epochs", state.config.distill.epochs, "Training epochs (shared budget)");
  cmd->add_option("--lr", state.config.distill.lr, "Adam learning rate");
  cmd->add_option("--batch", state.config.distill.batch_size_shapes, "Shapes per batch");
  cmd->add_option("--tau", state.config.distill.tau, "Convergence threshold");
  cmd->add_option("--mode", state.mode, "Alignment mode: pre or tta")
      ->check(CLI::IsMember({"pre", "tta"}));
  cmd->add_flag("--no-backward-distill", state.no_backward_distill,
                "Train single-phase, skip knowledge re-scoring");
  cmd->add_option("--few-shot-labels", state.config.few_shot_labels_path,
                  "File listing shape ids whose labels join training");
  cmd->add_option("--few-shot-weight", state.config.distill.few_shot_weight,
                  "Weight of the supervised loss (default 1 when labels given)");
  cmd->add_option("--config", state.distill_config_path,
                  "key = value file with distill settings; flags override");
  cmd->add_option("--features", state.config.features_dir,
                  "Directory of <shape_id>.feat files replacing the built-in encoder");
  cmd->add_flag("--dump-features", state.config.dump_features, "Write encoder features as .feat");
  cmd->add_flag("--dump-renders", state.config.dump_renders,
                "Write PPMs of the final segmentation");
}

void finalize(CliState& state, const CLI::App* cmd) {
  state.config.distill.mode = state.mode == "tta" ? AlignMode::Tta : AlignMode::Pre;
  state.config.teacher = state.teacher == "file" ? TeacherSource::File : TeacherSource::Mock;
  state.config.teacher_kind = state.kind == "pixel" ? TeacherKind::Pixel : TeacherKind::Box;
  if (state.no_backward_distill) state.config.distill.backward_distillation = false;
  const std::size_t colon = state.confidence.find(':');
  if (colon == std::string::npos)
    throw CLI::ValidationError("--confidence", "expected LO:HI");
  try {
    state.config.confidence_lo = std::stod(state.confidence.substr(0, colon));
    state.config.confidence_hi = std::stod(state.confidence.substr(colon + 1));
  } catch (const std::exception&) {
    throw CLI::ValidationError("--confidence", "expected LO:HI as numbers");
  }
  if (!state.distill_config_path.empty()) {
    // File first, then any flag the user actually passed wins.
    partdistill::DistillConfig from_file =
        partdistill::load_distill_config(state.distill_config_path);
    auto keep = [&](const char* flag) { return cmd->count(flag) > 0; };
    if (!keep("--epochs")) state.config.distill.epochs = from_file.epochs;
    if (!keep("--lr")) state.config.distill.lr = from_file.lr;
    if (!keep("--batch")) state.config.distill.batch_size_shapes = from_file.batch_size_shapes;
    if (!keep("--tau")) state.config.distill.tau = from_file.tau;
    if (!keep("--mode")) state.config.distill.mode = from_file.mode;
    if (!keep("--no-backward-distill"))
      state.config.distill.backward_distillation = from_file.backward_distillation;
    if (!keep("--few-shot-weight")) state.config.distill.few_shot_weight = from_file.few_shot_weight;
    if (!keep("--seed")) state.config.seed = from_file.seed;
  }
}

void print_paths(const std::vector<std::string>& paths) {
  for (const std::string& path : paths) std::cout << path << '\n';
}

void print_report_summary(const partdistill::MetricsReport& report, const std::string& out_dir) {
  std::printf("miou_3d:        %.4f\n", report.miou_3d);
  std::printf("voting_miou_3d: %.4f\n", report.voting_miou_3d);
  if (report.miou_2d) std::printf("miou_2d:        %.4f\n", *report.miou_2d);
  if (report.miou_2d_rescored) std::printf("miou_2d (C_bd): %.4f\n", *report.miou_2d_rescored);
  std::cout << (std::filesystem::path(out_dir) / "report.json").string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal 2D-to-3D part segmentation distillation"};
  app.require_subcommand(1);
  CliState state;

  app.add_option("--out", state.config.out_dir, "Run output directory");
  app.add_option("--seed", state.config.seed, "Master seed for the whole run");
  app.add_option("--in", state.config.input_path, "Input .xyzl file or corpus directory");

  CLI::App* generate = app.add_subcommand("generate", "Write a synthetic labeled corpus");
  generate->add_option("--count", state.config.generate_count, "Number of shapes");
  generate->add_option("--points", state.config.points_per_shape, "Points per shape");
  generate->add_option("--template", state.config.template_name,
                       "chair, table, lamp, or mix")
      ->check(CLI::IsMember({"chair", "table", "lamp", "mix"}));

  CLI::App* render = app.add_subcommand("render", "Dump depth PGMs and label PPMs per view");
  add_render_flags(render, state);

  CLI::App* extract = app.add_subcommand("extract", "Emit teacher predictions and coverage stats");
  add_render_flags(extract, state);
  add_teacher_flags(extract, state);

  CLI::App* distill = app.add_subcommand("distill", "Align the student to the teacher knowledge");
  add_render_flags(distill, state);
  add_teacher_flags(distill, state);
  add_distill_flags(distill, state);

  CLI::App* eval = app.add_subcommand("eval", "Score stored predictions against ground truth");
  add_render_flags(eval, state);
  add_teacher_flags(eval, state);
  eval->add_option("--pred", state.config.pred_dir, "Directory of .pred files (default <out>/preds)");
  eval->add_flag("--exclude-uncovered", state.config.exclude_uncovered,
                 "Drop student predictions on points no unit covers");

  CLI::App* pipeline = app.add_subcommand("pipeline", "generate + extract + distill + eval");
  pipeline->add_option("--count", state.config.generate_count, "Number of shapes");
  pipeline->add_option("--points", state.config.points_per_shape, "Points per shape");
  pipeline->add_option("--template", state.config.template_name, "chair, table, lamp, or mix")
      ->check(CLI::IsMember({"chair", "table", "lamp", "mix"}));
  add_render_flags(pipeline, state);
  add_teacher_flags(pipeline, state);
  add_distill_flags(pipeline, state);
  pipeline->add_flag("--exclude-uncovered", state.config.exclude_uncovered,
                     "Drop student predictions on points no unit covers");

  CLI11_PARSE(app, argc, argv);
  CLI::App* cmd = app.get_subcommands().front();

  try {
    finalize(state, cmd);
    if (cmd == generate) {
      print_paths(partdistill::run_generate(state.config));
    } else if (cmd == render) {
      print_paths(partdistill::run_render(state.config));
    } else if (cmd == extract) {
      print_paths(partdistill::run_extract(state.config));
    } else if (cmd == distill) {
      if (state.config.teacher == TeacherSource::Mock)
        print_paths(partdistill::run_extract(state.config));
      const partdistill::DistillArtifacts artifacts = partdistill::run_distill(state.config);
      print_paths(artifacts.paths);
      if (artifacts.trigger_epoch)
        std::printf("converged at epoch %d%s\n", *artifacts.trigger_epoch,
                    artifacts.backward_applied ? ", knowledge re-scored" : "");
    } else if (cmd == eval) {
      if (state.config.teacher == TeacherSource::Mock &&
          !std::filesystem::exists(
              std::filesystem::path(state.config.out_dir) / "predictions"))
        partdistill::run_extract(state.config);
      print_report_summary(partdistill::run_eval(state.config), state.config.out_dir);
    } else {
      print_report_summary(partdistill::run_pipeline(state.config), state.config.out_dir);
    }
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
