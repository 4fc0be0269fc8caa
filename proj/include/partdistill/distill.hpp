#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "partdistill/matrix.hpp"
#include "partdistill/rng.hpp"
#include "partdistill/student.hpp"
#include "partdistill/teacher.hpp"

namespace partdistill {

enum class AlignMode { Pre, Tta };

struct DistillConfig {
  int epochs = 25;
  double lr = 0.001;
  int batch_size_shapes = 16;
  double tau = 0.01;
  AlignMode mode = AlignMode::Pre;
  bool backward_distillation = true;
  std::uint64_t seed = 0;
  double few_shot_weight = 0.0;  // 0 = zero-shot

  void validate() const {
    if (epochs < 1) throw std::runtime_error("distill config: epochs must be >= 1");
    if (tau <= 0.0) throw std::runtime_error("distill config: tau must be positive");
    if (batch_size_shapes < 1) throw std::runtime_error("distill config: batch size must be >= 1");
    if (lr < 0.0) throw std::runtime_error("distill config: negative learning rate");
    if (few_shot_weight < 0.0) throw std::runtime_error("distill config: negative few_shot_weight");
  }
};

/// Inverse-frequency part weights from the teacher's argmax pseudo-labels
/// (few-shot labels join the counts when given): total/(R*count), clamped to
/// [0.1, 10], absent parts pinned at 1, then renormalized to mean 1.
inline std::vector<double> class_balance_weights(const std::vector<const KnowledgeUnit*>& units,
                                                 int num_parts,
                                                 const std::vector<int>* few_shot_labels = nullptr) {
  if (units.empty()) throw std::runtime_error("class_balance_weights: no knowledge units");
  std::vector<double> counts(static_cast<std::size_t>(num_parts), 0.0);
  for (const KnowledgeUnit* unit : units)
    for (std::size_t j = 0; j < unit->mask_size(); ++j)
      counts[static_cast<std::size_t>(unit->point_argmax(j))] += 1.0;
  if (few_shot_labels)
    for (int l : *few_shot_labels)
      if (l >= 0 && l < num_parts) counts[static_cast<std::size_t>(l)] += 1.0;
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  std::vector<double> weights(static_cast<std::size_t>(num_parts), 1.0);
  for (int r = 0; r < num_parts; ++r)
    if (counts[static_cast<std::size_t>(r)] > 0.0)
      weights[static_cast<std::size_t>(r)] =
          std::clamp(total / (num_parts * counts[static_cast<std::size_t>(r)]), 0.1, 10.0);
  const double mean = std::accumulate(weights.begin(), weights.end(), 0.0) / num_parts;
  for (double& w : weights) w /= mean;
  return weights;
}

inline std::vector<double> class_balance_weights(const std::vector<KnowledgeUnit>& units,
                                                 int num_parts,
                                                 const std::vector<int>* few_shot_labels = nullptr) {
  std::vector<const KnowledgeUnit*> ptrs;
  ptrs.reserve(units.size());
  for (const KnowledgeUnit& u : units) ptrs.push_back(&u);
  return class_balance_weights(ptrs, num_parts, few_shot_labels);
}

struct LossGrad {
  double loss = 0.0;
  Matrix grad;  // dLoss/dStudentProbs, N x R
};

constexpr double kLogClamp = 1e-12;

/// Masked confidence-weighted cross-entropy over knowledge units:
///   loss = -sum_d (1/|M^d|) sum_{n in M^d} w_{r*} c log(student[n, r*])
/// with r* the teacher argmax at n (ties to the lowest part) and c the
/// per-point confidence, or the unit's re-scored confidence when
/// use_rescored is set. log is clamped at log(1e-12). No units means the
/// shape is skipped: zero loss, zero gradient.
inline LossGrad distill_loss_and_grad(const Matrix& student_probs,
                                      const std::vector<KnowledgeUnit>& units,
                                      const std::vector<double>& part_weights,
                                      bool use_rescored) {
  LossGrad out;
  out.grad = Matrix(student_probs.rows(), student_probs.cols());
  if (part_weights.size() != student_probs.cols())
    throw std::runtime_error("distill_loss: part weight count mismatch");
  for (const KnowledgeUnit& unit : units) {
    if (unit.num_points != student_probs.rows() ||
        unit.num_parts != static_cast<int>(student_probs.cols()))
      throw std::runtime_error("distill_loss: unit does not match shape");
    if (use_rescored && !unit.rescored_confidence.has_value())
      throw std::runtime_error("distill_loss: re-scored confidence missing");
    const double inv_mask = 1.0 / static_cast<double>(unit.mask_size());
    for (std::size_t j = 0; j < unit.mask_size(); ++j) {
      const int n = unit.point_indices[j];
      const int r = unit.point_argmax(j);
      const double c = use_rescored ? *unit.rescored_confidence : unit.confidence[j];
      const double scale = part_weights[static_cast<std::size_t>(r)] * c * inv_mask;
      const double y = student_probs(static_cast<std::size_t>(n), static_cast<std::size_t>(r));
      out.loss -= scale * std::log(std::max(y, kLogClamp));
      if (y > kLogClamp)
        out.grad(static_cast<std::size_t>(n), static_cast<std::size_t>(r)) -= scale / y;
    }
  }
  return out;
}

/// Mean cross-entropy over labeled points; points labeled -1 are skipped.
inline LossGrad supervised_loss(const Matrix& student_probs, const std::vector<int>& labels) {
  LossGrad out;
  out.grad = Matrix(student_probs.rows(), student_probs.cols());
  if (labels.size() != student_probs.rows())
    throw std::runtime_error("supervised_loss: label count mismatch");
  std::size_t labeled = 0;
  for (int l : labels)
    if (l >= 0) ++labeled;
  if (labeled == 0) return out;
  const double inv = 1.0 / static_cast<double>(labeled);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const int l = labels[n];
    if (l < 0) continue;
    if (l >= static_cast<int>(student_probs.cols()))
      throw std::runtime_error("supervised_loss: label out of range");
    const double y = student_probs(n, static_cast<std::size_t>(l));
    out.loss -= inv * std::log(std::max(y, kLogClamp));
    if (y > kLogClamp) out.grad(n, static_cast<std::size_t>(l)) -= inv / y;
  }
  return out;
}

/// Watches the per-epoch mean loss; trips the first time the relative change
/// between consecutive epochs falls below tau, and stays tripped.
struct ConvergenceTracker {
  std::vector<double> history;
  bool triggered = false;
  std::optional<int> trigger_epoch;  // 1-indexed epoch of the trigger
};

/// Returns true only on the call that trips the tracker.
inline bool convergence_update(ConvergenceTracker& tracker, double epoch_mean_loss, double tau) {
  if (!(epoch_mean_loss >= 0.0) || !std::isfinite(epoch_mean_loss))
    throw std::runtime_error("convergence_update: loss must be finite and non-negative");
  if (tau <= 0.0) throw std::runtime_error("convergence_update: tau must be positive");
  tracker.history.push_back(epoch_mean_loss);
  if (tracker.triggered || tracker.history.size() < 2) return false;
  const double prev = tracker.history[tracker.history.size() - 2];
  const double rel = std::abs(epoch_mean_loss - prev) / std::max(prev, 1e-12);
  if (rel < tau) {
    tracker.triggered = true;
    tracker.trigger_epoch = static_cast<int>(tracker.history.size());
    return true;
  }
  return false;
}

/// Re-scores one unit: the fraction of masked points whose teacher argmax
/// matches the converged student's argmax (ties to the lowest index on both
/// sides). Stores and returns C_bd.
inline double backward_rescore(KnowledgeUnit& unit, const Matrix& student_probs) {
  if (unit.num_points != student_probs.rows() ||
      unit.num_parts != static_cast<int>(student_probs.cols()))
    throw std::runtime_error("backward_rescore: unit does not match predictions");
  if (unit.mask_size() == 0) throw std::runtime_error("backward_rescore: empty mask");
  std::size_t agree = 0;
  for (std::size_t j = 0; j < unit.mask_size(); ++j) {
    const auto n = static_cast<std::size_t>(unit.point_indices[j]);
    if (unit.point_argmax(j) == argmax_index(student_probs.row(n),
                                             static_cast<int>(student_probs.cols())))
      ++agree;
  }
  const double score = static_cast<double>(agree) / static_cast<double>(unit.mask_size());
  unit.rescored_confidence = score;
  return score;
}

/// Row-wise argmax of the student output; ties go to the lowest part index,
/// and every point gets a label regardless of teacher coverage.
inline std::vector<int> predict_labels(StudentModel& model, const PointCloudShape& shape) {
  const Matrix probs = head_forward(model.head, model.features_for(shape));
  std::vector<int> labels(probs.rows());
  for (std::size_t n = 0; n < probs.rows(); ++n)
    labels[n] = argmax_index(probs.row(n), static_cast<int>(probs.cols()));
  return labels;
}

struct LossRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  int phase = 1;
};

struct AlignmentResult {
  StudentModel model;
  std::vector<std::vector<KnowledgeUnit>> units;  // re-scored in place when BD ran
  std::optional<int> trigger_epoch;
  bool backward_applied = false;
  std::vector<Matrix> final_predictions;  // per shape, N x R
  std::vector<LossRecord> loss_history;
  std::vector<double> part_weights;
  std::vector<std::string> warnings;
};

/// The two-phase alignment loop. Phase 1 trains the head on the distillation
/// loss (plus the weighted supervised loss for few-shot shapes) until the
/// tracker trips or the epoch budget runs out. On the trigger, the student
/// output is snapshotted and every unit re-scored; the remaining epochs run
/// with the re-scored confidences. The epoch budget is shared across phases.
inline AlignmentResult run_alignment(const std::vector<PointCloudShape>& corpus,
                                     std::vector<std::vector<KnowledgeUnit>> units_per_shape,
                                     const DistillConfig& config,
                                     const EncoderConfig& encoder = {},
                                     const std::set<std::string>& few_shot_ids = {},
                                     std::map<std::string, Matrix> external_features = {}) {
  config.validate();
  if (corpus.empty()) throw std::runtime_error("run_alignment: empty corpus");
  if (config.mode == AlignMode::Tta && corpus.size() != 1)
    throw std::runtime_error("run_alignment: TTA takes exactly one shape");
  if (units_per_shape.size() != corpus.size())
    throw std::runtime_error("run_alignment: units/corpus size mismatch");

  const int num_parts = corpus.front().num_parts();
  for (const PointCloudShape& shape : corpus)
    if (shape.num_parts() != num_parts)
      throw std::runtime_error("run_alignment: corpus mixes part counts");

  AlignmentResult result;
  result.model.encoder = encoder;
  result.model.feature_cache = std::move(external_features);
  result.units = std::move(units_per_shape);

  const std::size_t num_shapes = corpus.size();
  for (std::size_t s = 0; s < num_shapes; ++s) result.model.features_for(corpus[s]);

  std::vector<const KnowledgeUnit*> all_units;
  for (const auto& units : result.units)
    for (const KnowledgeUnit& u : units) all_units.push_back(&u);
  if (all_units.empty()) throw std::runtime_error("run_alignment: no knowledge units to distill");

  std::vector<int> few_shot_labels;
  std::vector<std::uint8_t> is_few_shot(num_shapes, 0);
  if (config.few_shot_weight > 0.0) {
    for (std::size_t s = 0; s < num_shapes; ++s) {
      if (!few_shot_ids.count(corpus[s].shape_id) || !corpus[s].has_labels()) continue;
      is_few_shot[s] = 1;
      for (int l : corpus[s].labels)
        if (l >= 0) few_shot_labels.push_back(l);
    }
  }
  // Weights come from phase-1 pseudo-labels once; phase 2 reuses them.
  result.part_weights = class_balance_weights(
      all_units, num_parts, few_shot_labels.empty() ? nullptr : &few_shot_labels);

  const int feature_dim = encoder.output_dim();
  for (std::size_t s = 0; s < num_shapes; ++s)
    if (static_cast<int>(result.model.feature_cache.at(corpus[s].shape_id).cols()) != feature_dim)
      throw std::runtime_error("run_alignment: feature width differs from encoder output_dim");
  result.model.head = DistillHead(feature_dim, num_parts, hash_combine(config.seed, 0x68656164));

  Rng epoch_rng(hash_combine(config.seed, 0x7368756666));
  ConvergenceTracker tracker;
  std::vector<double> epoch_losses;  // raw per-epoch means; the tracker sees their moving average
  bool use_rescored = false;

  std::vector<std::size_t> order(num_shapes);
  for (std::size_t s = 0; s < num_shapes; ++s) order[s] = s;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle_in_place(order, epoch_rng);
    for (std::size_t batch_start = 0; batch_start < num_shapes;
         batch_start += static_cast<std::size_t>(config.batch_size_shapes)) {
      const std::size_t batch_end =
          std::min(num_shapes, batch_start + static_cast<std::size_t>(config.batch_size_shapes));
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(batch_start),
                                     order.begin() + static_cast<std::ptrdiff_t>(batch_end));
      std::sort(batch.begin(), batch.end());  // fixed accumulation order

      HeadGradients batch_grads;
      std::size_t contributors = 0;
      for (std::size_t s : batch) {
        const std::vector<KnowledgeUnit>& units = result.units[s];
        const bool few_shot = is_few_shot[s] != 0;
        if (units.empty() && !few_shot) continue;  // nothing teaches this shape
        const Matrix& features = result.model.feature_cache.at(corpus[s].shape_id);
        const DistillHead::ForwardCache cache = result.model.head.forward_cached(features);
        LossGrad lg = distill_loss_and_grad(cache.output, units, result.part_weights, use_rescored);
        if (few_shot) {
          const LossGrad sup = supervised_loss(cache.output, corpus[s].labels);
          lg.loss += config.few_shot_weight * sup.loss;
          add_scaled(lg.grad, sup.grad, config.few_shot_weight);
        }
        HeadGradients grads = result.model.head.backward(cache, lg.grad);
        if (contributors == 0) {
          batch_grads = std::move(grads);
        } else {
          for (std::size_t l = 0; l < batch_grads.weights.size(); ++l) {
            add_scaled(batch_grads.weights[l], grads.weights[l], 1.0);
            for (std::size_t k = 0; k < batch_grads.bias[l].size(); ++k)
              batch_grads.bias[l][k] += grads.bias[l][k];
          }
        }
        ++contributors;
      }
      if (contributors == 0) continue;
      const double inv = 1.0 / static_cast<double>(contributors);
      for (std::size_t l = 0; l < batch_grads.weights.size(); ++l) {
        for (std::size_t k = 0; k < batch_grads.weights[l].size(); ++k)
          batch_grads.weights[l].data()[k] *= inv;
        for (double& b : batch_grads.bias[l]) b *= inv;
      }
      result.model.head.adam_step(batch_grads, config.lr);
    }
    // The epoch's mean loss is evaluated with the parameters the epoch ends
    // on, so the tracked curve does not wobble with batch order and the
    // convergence test sees real plateaus rather than mid-epoch dips.
    double eval_sum = 0.0;
    std::size_t eval_count = 0;
    for (std::size_t s = 0; s < num_shapes; ++s) {
      const std::vector<KnowledgeUnit>& units = result.units[s];
      const bool few_shot = is_few_shot[s] != 0;
      if (units.empty() && !few_shot) continue;
      const Matrix output =
          head_forward(result.model.head, result.model.feature_cache.at(corpus[s].shape_id));
      double loss = distill_loss_and_grad(output, units, result.part_weights, use_rescored).loss;
      if (few_shot) loss += config.few_shot_weight * supervised_loss(output, corpus[s].labels).loss;
      eval_sum += loss;
      ++eval_count;
    }
    const double epoch_mean = eval_count ? eval_sum / static_cast<double>(eval_count) : 0.0;
    result.loss_history.push_back({epoch, epoch_mean, use_rescored ? 2 : 1});

    // Convergence watches a short moving average of the epoch losses, so a
    // single flat epoch inside the early optimizer transient cannot trip it.
    epoch_losses.push_back(epoch_mean);
    const std::size_t window = std::min<std::size_t>(3, epoch_losses.size());
    double moving_average = 0.0;
    for (std::size_t k = epoch_losses.size() - window; k < epoch_losses.size(); ++k)
      moving_average += epoch_losses[k];
    moving_average /= static_cast<double>(window);

    if (convergence_update(tracker, moving_average, config.tau) && config.backward_distillation &&
        !result.backward_applied) {
      // Snapshot at the trigger, before any phase-2 update, then re-score
      // every unit against it.
      for (std::size_t s = 0; s < num_shapes; ++s) {
        if (result.units[s].empty()) continue;
        const Matrix snapshot =
            head_forward(result.model.head, result.model.feature_cache.at(corpus[s].shape_id));
        for (KnowledgeUnit& unit : result.units[s]) backward_rescore(unit, snapshot);
      }
      result.backward_applied = true;
      use_rescored = true;
    }
  }
  result.trigger_epoch = tracker.trigger_epoch;
  if (config.backward_distillation && !result.backward_applied)
    result.warnings.push_back("convergence never triggered; backward distillation skipped");

  result.final_predictions.reserve(num_shapes);
  for (std::size_t s = 0; s < num_shapes; ++s)
    result.final_predictions.push_back(
        head_forward(result.model.head, result.model.feature_cache.at(corpus[s].shape_id)));
  return result;
}

inline void save_loss_csv(const std::vector<LossRecord>& history, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_loss_csv: cannot open " + path);
  out << "epoch,mean_loss,phase\n";
  char buf[96];
  for (const LossRecord& rec : history) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%d\n", rec.epoch, rec.mean_loss, rec.phase);
    out << buf;
  }
}

/// Line-oriented `key = value` config mirroring DistillConfig; blank lines
/// and #-comments allowed. CLI flags are expected to override these values.
inline DistillConfig parse_distill_config(std::istream& in, DistillConfig base = {}) {
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("distill config: missing '=' on line " + std::to_string(line_no));
    auto trim = [](std::string s) {
      const std::size_t a = s.find_first_not_of(" \t\r");
      const std::size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "epochs") base.epochs = std::stoi(value);
      else if (key == "lr") base.lr = std::stod(value);
      else if (key == "batch_size_shapes") base.batch_size_shapes = std::stoi(value);
      else if (key == "tau") base.tau = std::stod(value);
      else if (key == "seed") base.seed = std::stoull(value);
      else if (key == "few_shot_weight") base.few_shot_weight = std::stod(value);
      else if (key == "mode") {
        if (value == "pre") base.mode = AlignMode::Pre;
        else if (value == "tta") base.mode = AlignMode::Tta;
        else throw std::runtime_error("mode must be pre or tta");
      } else if (key == "backward_distillation") {
        if (value == "true" || value == "1") base.backward_distillation = true;
        else if (value == "false" || value == "0") base.backward_distillation = false;
        else throw std::runtime_error("backward_distillation must be true or false");
      } else {
        throw std::runtime_error("unknown key '" + key + "'");
      }
    } catch (const std::runtime_error&) {
      throw;
    } catch (const std::exception&) {
      throw std::runtime_error("distill config: bad value for '" + key + "' on line " +
                               std::to_string(line_no));
    }
  }
  base.validate();
  return base;
}

inline DistillConfig load_distill_config(const std::string& path, DistillConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_distill_config: cannot open " + path);
  return parse_distill_config(in, base);
}

}  // namespace partdistill
