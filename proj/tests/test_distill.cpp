#include <doctest.h>

#include <cmath>

#include "partdistill/distill.hpp"
#include "partdistill/synth.hpp"

using namespace partdistill;

namespace {

KnowledgeUnit make_unit(std::size_t num_points, int num_parts,
                        const std::vector<std::pair<int, std::vector<double>>>& entries) {
  KnowledgeUnit unit;
  unit.shape_id = "t";
  unit.num_points = num_points;
  unit.num_parts = num_parts;
  for (const auto& [point, probs] : entries) {
    unit.point_indices.push_back(point);
    unit.probs.insert(unit.probs.end(), probs.begin(), probs.end());
    unit.confidence.push_back(*std::max_element(probs.begin(), probs.end()));
  }
  return unit;
}

// Literal transcription of the masked weighted cross-entropy as a dense
// triple sum over (unit, point, part); the implementation's restricted
// storage never appears here.
double brute_force_loss(const Matrix& student, const std::vector<KnowledgeUnit>& units,
                        const std::vector<double>& weights, bool use_rescored) {
  const std::size_t n = student.rows();
  const int num_parts = static_cast<int>(student.cols());
  double loss = 0.0;
  for (const KnowledgeUnit& unit : units) {
    std::vector<int> mask(n, 0);
    std::vector<std::vector<double>> dense(n, std::vector<double>(num_parts, 0.0));
    std::vector<double> conf(n, 0.0);
    for (std::size_t j = 0; j < unit.mask_size(); ++j) {
      const auto p = static_cast<std::size_t>(unit.point_indices[j]);
      mask[p] = 1;
      for (int r = 0; r < num_parts; ++r) dense[p][static_cast<std::size_t>(r)] = unit.point_probs(j)[r];
      conf[p] = unit.confidence[j];
    }
    double mask_size = 0;
    for (int m : mask) mask_size += m;
    for (std::size_t p = 0; p < n; ++p) {
      if (!mask[p]) continue;
      for (int r = 0; r < num_parts; ++r) {
        int argmax = 0;
        for (int q = 1; q < num_parts; ++q)
          if (dense[p][static_cast<std::size_t>(q)] > dense[p][static_cast<std::size_t>(argmax)])
            argmax = q;
        const double z = (r == argmax) ? 1.0 : 0.0;
        if (z == 0.0) continue;
        const double c = use_rescored ? unit.rescored_confidence.value() : conf[p];
        loss -= (1.0 / mask_size) * weights[static_cast<std::size_t>(r)] * c * z *
                std::log(std::max(student(p, static_cast<std::size_t>(r)), 1e-12));
      }
    }
  }
  return loss;
}

Matrix random_simplex_rows(std::size_t n, int num_parts, Rng& rng) {
  Matrix m(n, static_cast<std::size_t>(num_parts));
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < m.cols(); ++j) {
      m(i, j) = 0.01 + rng.uniform();
      sum += m(i, j);
    }
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) /= sum;
  }
  return m;
}

std::vector<KnowledgeUnit> random_units(std::size_t n, int num_parts, int count, Rng& rng) {
  std::vector<KnowledgeUnit> units;
  for (int d = 0; d < count; ++d) {
    std::vector<std::pair<int, std::vector<double>>> entries;
    for (std::size_t p = 0; p < n; ++p) {
      if (rng.uniform() < 0.4) continue;
      std::vector<double> probs(static_cast<std::size_t>(num_parts));
      double sum = 0;
      for (double& v : probs) {
        v = 0.05 + rng.uniform();
        sum += v;
      }
      for (double& v : probs) v /= sum;
      entries.push_back({static_cast<int>(p), probs});
    }
    if (entries.empty()) continue;
    units.push_back(make_unit(n, num_parts, entries));
    units.back().unit_index = d;
  }
  return units;
}

}  // namespace

TEST_CASE("class_balance_weights: balanced, skewed, absent parts") {
  SUBCASE("balanced counts give unit weights") {
    const auto unit = make_unit(4, 2, {{0, {0.9, 0.1}}, {1, {0.8, 0.2}},
                                       {2, {0.1, 0.9}}, {3, {0.2, 0.8}}});
    const auto w = class_balance_weights(std::vector<KnowledgeUnit>{unit}, 2);
    CHECK(w[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("counts (3,1) give weights (0.5, 1.5)") {
    const auto unit = make_unit(4, 2, {{0, {0.9, 0.1}}, {1, {0.8, 0.2}},
                                       {2, {0.7, 0.3}}, {3, {0.2, 0.8}}});
    const auto w = class_balance_weights(std::vector<KnowledgeUnit>{unit}, 2);
    CHECK(w[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(1.5).epsilon(1e-12));
  }

  SUBCASE("absent part pinned at 1 before mean renormalization") {
    const auto unit = make_unit(8, 3, {{0, {0.9, 0.05, 0.05}}, {1, {0.9, 0.05, 0.05}},
                                       {2, {0.9, 0.05, 0.05}}, {3, {0.9, 0.05, 0.05}},
                                       {4, {0.05, 0.05, 0.9}}, {5, {0.05, 0.05, 0.9}},
                                       {6, {0.05, 0.05, 0.9}}, {7, {0.05, 0.05, 0.9}}});
    const auto w = class_balance_weights(std::vector<KnowledgeUnit>{unit}, 3);
    // counts (4,0,4): raw (8/12, 1, 8/12), mean 7/9
    CHECK(w[0] == doctest::Approx((8.0 / 12.0) / (7.0 / 9.0)).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(1.0 / (7.0 / 9.0)).epsilon(1e-12));
    CHECK(w[2] == w[0]);
  }

  SUBCASE("few-shot labels join the counts") {
    const auto unit = make_unit(2, 2, {{0, {0.9, 0.1}}, {1, {0.8, 0.2}}});
    const std::vector<int> few_shot = {1, 1};
    const auto w = class_balance_weights(std::vector<KnowledgeUnit>{unit}, 2, &few_shot);
    CHECK(w[0] == doctest::Approx(1.0).epsilon(1e-12));  // counts (2,2)
    CHECK(w[1] == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("distill_loss_and_grad: pinned examples") {
  SUBCASE("perfect one-hot student on a one-hot unit costs nothing") {
    Matrix student(1, 3);
    student(0, 1) = 1.0;
    const auto unit = make_unit(1, 3, {{0, {0.0, 1.0, 0.0}}});
    const auto lg = distill_loss_and_grad(student, {unit}, {1.0, 1.0, 1.0}, false);
    CHECK(lg.loss == 0.0);
  }

  SUBCASE("no units means the shape is skipped with zero loss and grad") {
    Matrix student(3, 2, 0.5);
    const auto lg = distill_loss_and_grad(student, {}, {1.0, 1.0}, false);
    CHECK(lg.loss == 0.0);
    for (std::size_t k = 0; k < lg.grad.size(); ++k) CHECK(lg.grad.data()[k] == 0.0);
  }

  SUBCASE("re-scored zero confidence suppresses a unit entirely") {
    Rng rng(71);
    Matrix student = random_simplex_rows(5, 3, rng);
    auto keep = make_unit(5, 3, {{0, {0.7, 0.2, 0.1}}, {2, {0.1, 0.8, 0.1}}});
    keep.rescored_confidence = 0.6;
    auto drop = make_unit(5, 3, {{1, {0.6, 0.2, 0.2}}, {4, {0.2, 0.2, 0.6}}});
    drop.rescored_confidence = 0.0;
    const auto with_both = distill_loss_and_grad(student, {keep, drop}, {1, 1, 1}, true);
    const auto keep_only = distill_loss_and_grad(student, {keep}, {1, 1, 1}, true);
    CHECK(with_both.loss == doctest::Approx(keep_only.loss).epsilon(1e-15));
    for (std::size_t k = 0; k < with_both.grad.size(); ++k)
      CHECK(with_both.grad.data()[k] == keep_only.grad.data()[k]);
  }

  SUBCASE("missing re-scored confidence is an error when requested") {
    Matrix student(2, 2, 0.5);
    const auto unit = make_unit(2, 2, {{0, {0.9, 0.1}}});
    CHECK_THROWS_AS(distill_loss_and_grad(student, {unit}, {1, 1}, true), std::runtime_error);
  }
}

TEST_CASE("distill_loss matches the brute-force triple sum") {
  Rng rng(2025);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 2 + rng.below(20);
    const int num_parts = 2 + static_cast<int>(rng.below(4));
    Matrix student = random_simplex_rows(n, num_parts, rng);
    auto units = random_units(n, num_parts, 1 + static_cast<int>(rng.below(5)), rng);
    std::vector<double> weights(static_cast<std::size_t>(num_parts));
    for (double& w : weights) w = 0.2 + rng.uniform();

    const auto lg = distill_loss_and_grad(student, units, weights, false);
    const double want = brute_force_loss(student, units, weights, false);
    CHECK(lg.loss == doctest::Approx(want).epsilon(1e-12));
    CHECK(lg.loss >= 0.0);

    // gradient against central differences on the student matrix
    for (int sample = 0; sample < 5; ++sample) {
      const std::size_t p = rng.below(n);
      const std::size_t r = rng.below(static_cast<std::uint64_t>(num_parts));
      const double saved = student(p, r);
      const double h = 1e-7;
      student(p, r) = saved + h;
      const double up = brute_force_loss(student, units, weights, false);
      student(p, r) = saved - h;
      const double down = brute_force_loss(student, units, weights, false);
      student(p, r) = saved;
      const double fd = (up - down) / (2 * h);
      CHECK(lg.grad(p, r) == doctest::Approx(fd).epsilon(1e-4));
    }
  }
}

TEST_CASE("distill_loss is linear in a unit's confidences") {
  Rng rng(31);
  Matrix student = random_simplex_rows(6, 3, rng);
  auto unit = make_unit(6, 3, {{0, {0.7, 0.2, 0.1}}, {3, {0.2, 0.7, 0.1}}, {5, {0.5, 0.3, 0.2}}});
  const double base = distill_loss_and_grad(student, {unit}, {1, 1, 1}, false).loss;
  const double lambda = 0.37;
  for (double& c : unit.confidence) c *= lambda;
  const double scaled = distill_loss_and_grad(student, {unit}, {1, 1, 1}, false).loss;
  CHECK(scaled == doctest::Approx(lambda * base).epsilon(1e-12));
}

TEST_CASE("supervised_loss: perfect, uniform, oracle") {
  SUBCASE("perfect predictions cost nothing") {
    Matrix student(2, 2);
    student(0, 0) = 1.0;
    student(1, 1) = 1.0;
    CHECK(supervised_loss(student, {0, 1}).loss == 0.0);
  }
  SUBCASE("uniform predictions cost log R; unlabeled points are skipped") {
    Matrix student(4, 3, 1.0 / 3.0);
    const auto lg = supervised_loss(student, {0, 2, -1, 1});
    CHECK(lg.loss == doctest::Approx(std::log(3.0)).epsilon(1e-12));
    CHECK(lg.grad(2, 0) == 0.0);  // the unlabeled row got no gradient
  }
  SUBCASE("zero labeled points give zero loss") {
    Matrix student(2, 2, 0.5);
    CHECK(supervised_loss(student, {-1, -1}).loss == 0.0);
  }
  SUBCASE("mixed instance matches a direct sum") {
    Rng rng(81);
    Matrix student = random_simplex_rows(7, 4, rng);
    const std::vector<int> labels = {0, -1, 3, 2, 2, -1, 1};
    double want = 0;
    int count = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0) continue;
      want -= std::log(student(i, static_cast<std::size_t>(labels[i])));
      ++count;
    }
    want /= count;
    CHECK(supervised_loss(student, labels).loss == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("convergence_update follows the relative-change rule") {
  ConvergenceTracker tracker;
  CHECK_FALSE(convergence_update(tracker, 1.0, 0.01));  // first epoch never triggers

  SUBCASE("small relative change triggers") {
    CHECK(convergence_update(tracker, 0.999, 0.01));  // |dl|/l = 0.001 < 0.01
    CHECK(tracker.triggered);
    CHECK(tracker.trigger_epoch == 2);
    // stays triggered, never fires again
    CHECK_FALSE(convergence_update(tracker, 0.9985, 0.01));
    CHECK(tracker.trigger_epoch == 2);
  }

  SUBCASE("large relative change does not trigger") {
    CHECK_FALSE(convergence_update(tracker, 0.5, 0.01));  // 0.5 relative change
    CHECK_FALSE(tracker.triggered);
  }

  SUBCASE("non-finite losses are rejected") {
    CHECK_THROWS_AS(convergence_update(tracker, std::nan(""), 0.01), std::runtime_error);
  }
}

TEST_CASE("backward_rescore counts argmax agreements") {
  Matrix student(10, 2);
  for (std::size_t i = 0; i < 10; ++i) {
    student(i, 0) = i < 7 ? 0.8 : 0.2;  // student says part 0 on the first 7 points
    student(i, 1) = i < 7 ? 0.2 : 0.8;
  }
  std::vector<std::pair<int, std::vector<double>>> entries;
  for (int p = 0; p < 10; ++p) entries.push_back({p, {0.9, 0.1}});  // teacher says part 0

  SUBCASE("7 of 10 masked points agree") {
    auto unit = make_unit(10, 2, entries);
    CHECK(backward_rescore(unit, student) == 0.7);
    CHECK(unit.rescored_confidence == 0.7);
  }
  SUBCASE("full agreement and full disagreement hit the bounds exactly") {
    auto agree = make_unit(10, 2, {entries.begin(), entries.begin() + 7});
    CHECK(backward_rescore(agree, student) == 1.0);
    auto disagree = make_unit(10, 2, {entries.begin() + 7, entries.end()});
    CHECK(backward_rescore(disagree, student) == 0.0);
  }
  SUBCASE("invariant under strictly monotone transforms of either side") {
    auto unit = make_unit(10, 2, entries);
    const double base = backward_rescore(unit, student);
    Matrix squashed = student;
    for (std::size_t k = 0; k < squashed.size(); ++k)
      squashed.data()[k] = std::sqrt(squashed.data()[k]);  // order preserving
    for (double& p : unit.probs) p = p * p;
    CHECK(backward_rescore(unit, squashed) == base);
  }
}

TEST_CASE("predict_labels: argmax with lowest-index ties") {
  StudentModel model;
  const PointCloudShape shape = generate_shape(table_template(80), 4);
  model.head = DistillHead(model.encoder.output_dim(), shape.num_parts(), 13);
  const std::vector<int> labels = predict_labels(model, shape);
  REQUIRE(labels.size() == shape.num_points());
  const Matrix probs = head_forward(model.head, model.features_for(shape));
  for (std::size_t n = 0; n < labels.size(); ++n) {
    int best = 0;
    for (int r = 1; r < shape.num_parts(); ++r)
      if (probs(n, static_cast<std::size_t>(r)) > probs(n, static_cast<std::size_t>(best))) best = r;
    CHECK(labels[n] == best);
  }
  CHECK(argmax_index(std::vector<double>{0.1, 0.8, 0.1}) == 1);
  CHECK(argmax_index(std::vector<double>{0.25, 0.25, 0.25, 0.25}) == 0);  // tie rule
}

namespace {

struct AlignmentFixture {
  std::vector<PointCloudShape> corpus;
  std::vector<std::vector<KnowledgeUnit>> units;
  DistillConfig config;

  explicit AlignmentFixture(int shapes = 3, std::uint64_t seed = 40,
                            double flip = 0.0, double drop = 0.0) {
    corpus = generate_corpus({chair_template(160)}, shapes, seed);
    const auto cameras = make_view_ring(4, 48);
    MockTeacherConfig teacher;
    teacher.flip_rate = flip;
    teacher.drop_rate = drop;
    teacher.confidence_lo = 0.6;
    teacher.confidence_hi = 0.9;
    teacher.seed = seed + 1;
    for (const auto& shape : corpus) {
      const auto views = render_views(cameras, shape, 2.0);
      units.push_back(
          extract_knowledge(shape.shape_id, views, mock_vlm_predict(shape, views, teacher)));
    }
    config.epochs = 8;
    config.batch_size_shapes = 2;
    config.seed = 77;
  }
};

}  // namespace

TEST_CASE("run_alignment: arity errors and flag semantics") {
  AlignmentFixture fix;

  SUBCASE("TTA accepts exactly one shape") {
    fix.config.mode = AlignMode::Tta;
    CHECK_THROWS_AS(run_alignment(fix.corpus, fix.units, fix.config), std::runtime_error);
  }
  SUBCASE("empty corpus is an error") {
    CHECK_THROWS_AS(run_alignment({}, {}, fix.config), std::runtime_error);
  }
  SUBCASE("backward_distillation=false keeps training single-phase") {
    fix.config.backward_distillation = false;
    const AlignmentResult result = run_alignment(fix.corpus, fix.units, fix.config);
    CHECK_FALSE(result.backward_applied);
    for (const auto& shape_units : result.units)
      for (const auto& unit : shape_units) CHECK_FALSE(unit.rescored_confidence.has_value());
    for (const auto& rec : result.loss_history) CHECK(rec.phase == 1);
  }
  SUBCASE("a trigger re-scores every unit and switches to phase 2") {
    const AlignmentResult result = run_alignment(fix.corpus, fix.units, fix.config);
    if (result.backward_applied) {
      REQUIRE(result.trigger_epoch.has_value());
      CHECK(*result.trigger_epoch >= 2);
      for (const auto& shape_units : result.units)
        for (const auto& unit : shape_units) {
          REQUIRE(unit.rescored_confidence.has_value());
          CHECK(*unit.rescored_confidence >= 0.0);
          CHECK(*unit.rescored_confidence <= 1.0);
        }
      for (const auto& rec : result.loss_history)
        CHECK(rec.phase == (rec.epoch <= *result.trigger_epoch ? 1 : 2));
    } else {
      CHECK_FALSE(result.warnings.empty());
    }
  }
}

TEST_CASE("run_alignment is deterministic and freezes the encoder") {
  AlignmentFixture fix(1, 91, 0.1, 0.1);
  fix.config.mode = AlignMode::Tta;
  fix.config.epochs = 6;

  const Matrix features_before = encode_points(fix.corpus[0], EncoderConfig{});
  const AlignmentResult a = run_alignment(fix.corpus, fix.units, fix.config);
  const AlignmentResult b = run_alignment(fix.corpus, fix.units, fix.config);

  CHECK(a.model.feature_cache.at(fix.corpus[0].shape_id) == features_before);
  REQUIRE(a.loss_history.size() == b.loss_history.size());
  for (std::size_t i = 0; i < a.loss_history.size(); ++i)
    CHECK(a.loss_history[i].mean_loss == b.loss_history[i].mean_loss);
  CHECK(a.final_predictions[0] == b.final_predictions[0]);
  CHECK(a.model.head == b.model.head);
}

TEST_CASE("run_alignment applies the few-shot supervised term") {
  AlignmentFixture fix(2, 17, 0.4, 0.2);  // noisy teacher so supervision matters
  fix.config.few_shot_weight = 2.0;
  fix.config.epochs = 40;
  fix.config.lr = 0.003;
  const AlignmentResult with_labels = run_alignment(
      fix.corpus, fix.units, fix.config, EncoderConfig{},
      {fix.corpus[0].shape_id, fix.corpus[1].shape_id});
  fix.config.few_shot_weight = 0.0;
  const AlignmentResult without = run_alignment(fix.corpus, fix.units, fix.config);
  REQUIRE(with_labels.loss_history.size() == 40);
  // the supervised term changes the optimization trajectory
  CHECK(with_labels.loss_history.front().mean_loss != without.loss_history.front().mean_loss);
  // and improves agreement with ground truth on the labeled shapes
  auto accuracy = [&](const AlignmentResult& result) {
    double correct = 0, total = 0;
    for (std::size_t s = 0; s < fix.corpus.size(); ++s) {
      const Matrix& probs = result.final_predictions[s];
      for (std::size_t n = 0; n < probs.rows(); ++n) {
        correct += argmax_index(probs.row(n), static_cast<int>(probs.cols())) ==
                   fix.corpus[s].labels[n];
        total += 1;
      }
    }
    return correct / total;
  };
  CHECK(accuracy(with_labels) > accuracy(without));
}
