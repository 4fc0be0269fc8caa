#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "partdistill/predictions_io.hpp"
#include "partdistill/synth.hpp"
#include "partdistill/teacher.hpp"

using namespace partdistill;

namespace {

// Independent CCL oracle: plain DFS flood fill with an explicit stack,
// structured nothing like the scan in connected_components.
std::vector<std::vector<Pixel>> flood_fill_oracle(const std::vector<int>& map, int h, int w) {
  std::vector<std::uint8_t> seen(map.size(), 0);
  std::vector<std::vector<Pixel>> blobs;
  for (int sr = 0; sr < h; ++sr)
    for (int sc = 0; sc < w; ++sc) {
      const std::size_t si = static_cast<std::size_t>(sr) * w + sc;
      if (seen[si] || map[si] < 0) continue;
      std::vector<Pixel> blob;
      std::vector<Pixel> stack{{sr, sc}};
      seen[si] = 1;
      while (!stack.empty()) {
        const Pixel p = stack.back();
        stack.pop_back();
        blob.push_back(p);
        const Pixel candidates[4] = {
            {p.row - 1, p.col}, {p.row + 1, p.col}, {p.row, p.col - 1}, {p.row, p.col + 1}};
        for (const Pixel& q : candidates) {
          if (q.row < 0 || q.row >= h || q.col < 0 || q.col >= w) continue;
          const std::size_t qi = static_cast<std::size_t>(q.row) * w + q.col;
          if (!seen[qi] && map[qi] == map[si]) {
            seen[qi] = 1;
            stack.push_back(q);
          }
        }
      }
      std::sort(blob.begin(), blob.end());
      blobs.push_back(std::move(blob));
    }
  std::sort(blobs.begin(), blobs.end(),
            [](const auto& a, const auto& b) { return a.front() < b.front(); });
  return blobs;
}

struct Scene {
  PointCloudShape shape;
  std::vector<ViewRender> views;
};

Scene make_scene(std::size_t points = 400, int num_views = 4, int image = 64,
                 std::uint64_t seed = 11) {
  Scene scene;
  scene.shape = generate_shape(chair_template(points), seed);
  scene.views = render_views(make_view_ring(num_views, image), scene.shape, 2.0);
  return scene;
}

}  // namespace

TEST_CASE("connected_components: trivial maps") {
  SUBCASE("all background") {
    const std::vector<int> map(16, -1);
    CHECK(connected_components(map, 4, 4).empty());
  }
  SUBCASE("whole image one part") {
    const std::vector<int> map(6 * 5, 2);
    const auto comps = connected_components(map, 6, 5);
    REQUIRE(comps.size() == 1);
    CHECK(comps[0].part_index == 2);
    CHECK(comps[0].pixels.size() == 30);
  }
  SUBCASE("diagonal blobs stay separate under 4-connectivity") {
    // part 0 at (0,0) and (1,1): touching only diagonally
    std::vector<int> map(4, -1);
    map[0] = 0;
    map[3] = 0;
    const auto comps = connected_components(map, 2, 2);
    CHECK(comps.size() == 2);
  }
}

TEST_CASE("connected_components agrees with a flood-fill oracle") {
  Rng rng(2024);
  for (int trial = 0; trial < 40; ++trial) {
    const int h = 8 + static_cast<int>(rng.below(24)), w = 8 + static_cast<int>(rng.below(24));
    std::vector<int> map(static_cast<std::size_t>(h) * w);
    if (trial == 0) {
      // checkerboard: the worst case for component counts
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
          map[static_cast<std::size_t>(r) * w + c] = (r + c) % 2 == 0 ? 0 : -1;
    } else {
      for (auto& v : map) v = static_cast<int>(rng.below(4)) - 1;  // -1..2
    }
    const auto got = connected_components(map, h, w);
    const auto want = flood_fill_oracle(map, h, w);
    REQUIRE(got.size() == want.size());
    std::size_t foreground = 0;
    std::set<Pixel> all_pixels;
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].pixels == want[i]);  // same order: both sorted by first pixel
      for (const Pixel& p : got[i].pixels) {
        CHECK(map[static_cast<std::size_t>(p.row) * w + p.col] == got[i].part_index);
        all_pixels.insert(p);
      }
      foreground += got[i].pixels.size();
    }
    // components partition the foreground
    CHECK(all_pixels.size() == foreground);
    CHECK(foreground ==
          static_cast<std::size_t>(std::count_if(map.begin(), map.end(), [](int v) { return v >= 0; })));
  }
}

TEST_CASE("extract_knowledge from boxes") {
  const Scene scene = make_scene();
  const ViewRender& view = scene.views[0];

  SUBCASE("full-image one-hot box covers exactly the visible points") {
    BoxPrediction box;
    box.view_index = 0;
    box.x1 = 0;
    box.y1 = 0;
    box.x2 = view.width;
    box.y2 = view.height;
    box.probs = {0.0, 1.0, 0.0, 0.0};
    const auto units = extract_knowledge(scene.shape.shape_id, scene.views, {box});
    REQUIRE(units.size() == 1);
    CHECK(units[0].to_mask() == view.visible);
    for (std::size_t j = 0; j < units[0].mask_size(); ++j) {
      CHECK(units[0].confidence[j] == 1.0);
      CHECK(units[0].point_argmax(j) == 1);
    }
    CHECK(units[0].part_2d == 1);
    CHECK(units[0].confidence_2d == 1.0);
  }

  SUBCASE("boxes over unrendered regions are discarded") {
    // find an empty corner box
    BoxPrediction box;
    box.view_index = 0;
    box.x1 = 0;
    box.y1 = 0;
    box.x2 = 2;
    box.y2 = 2;
    box.probs = {1.0, 0.0, 0.0, 0.0};
    bool corner_empty = true;
    for (int r = 0; r < 2 && corner_empty; ++r)
      for (int c = 0; c < 2; ++c) corner_empty &= view.owner(r, c) == kNoOwner;
    REQUIRE(corner_empty);
    CHECK(extract_knowledge(scene.shape.shape_id, scene.views, {box}).empty());
  }

  SUBCASE("out-of-range view is an error") {
    BoxPrediction box;
    box.view_index = 99;
    box.x1 = 0; box.y1 = 0; box.x2 = 4; box.y2 = 4;
    box.probs = {1.0, 0.0, 0.0, 0.0};
    CHECK_THROWS_AS(extract_knowledge(scene.shape.shape_id, scene.views, {box}),
                    std::runtime_error);
  }

  SUBCASE("mask union matches brute-force box coverage") {
    Rng rng(5);
    std::vector<BoxPrediction> boxes;
    for (int k = 0; k < 6; ++k) {
      BoxPrediction box;
      box.view_index = static_cast<int>(rng.below(scene.views.size()));
      box.x1 = static_cast<double>(rng.below(50));
      box.y1 = static_cast<double>(rng.below(50));
      box.x2 = box.x1 + 4 + static_cast<double>(rng.below(12));
      box.y2 = box.y1 + 4 + static_cast<double>(rng.below(12));
      box.probs = {0.6, 0.2, 0.1, 0.1};
      boxes.push_back(box);
    }
    const auto units = extract_knowledge(scene.shape.shape_id, scene.views, boxes);
    std::vector<std::uint8_t> got_union(scene.shape.num_points(), 0);
    for (const auto& unit : units)
      for (int n : unit.point_indices) got_union[static_cast<std::size_t>(n)] = 1;
    std::vector<std::uint8_t> want_union(scene.shape.num_points(), 0);
    for (const auto& box : boxes) {
      const auto mask = back_project_rect(scene.views[static_cast<std::size_t>(box.view_index)],
                                          box.x1, box.y1, box.x2, box.y2);
      for (std::size_t n = 0; n < mask.size(); ++n) want_union[n] |= mask[n];
    }
    CHECK(got_union == want_union);
  }
}

TEST_CASE("extract_knowledge from pixel maps averages per-point probs") {
  // Hand-built 6x6 view: point 0 owns (0,0),(0,1); point 1 owns (2,0);
  // point 2 owns (4,4),(4,5),(5,4).
  ViewRender view;
  view.view_index = 0;
  view.height = view.width = 6;
  view.pixel_owner.assign(36, kNoOwner);
  view.depth.assign(36, 1.0);
  view.visible.assign(3, 1);
  view.pixel_owner[0] = 0;
  view.pixel_owner[1] = 0;
  view.pixel_owner[12] = 1;
  view.pixel_owner[28] = 2;
  view.pixel_owner[29] = 2;
  view.pixel_owner[34] = 2;

  PixelPredictionMap map;
  map.view_index = 0;
  map.height = map.width = 6;
  map.num_parts = 2;
  map.foreground.assign(36, 0);
  map.probs.assign(72, 0.0);
  auto set_pixel = [&](int r, int c, double p0, double p1) {
    map.foreground[static_cast<std::size_t>(r) * 6 + c] = 1;
    map.pixel_probs(r, c)[0] = p0;
    map.pixel_probs(r, c)[1] = p1;
  };
  // component A: part 0 over pixels (0,0),(0,1),(1,0) with varying probs
  set_pixel(0, 0, 0.9, 0.1);
  set_pixel(0, 1, 0.7, 0.3);
  set_pixel(1, 0, 0.8, 0.2);
  // component B: part 1 over the block around point 2
  set_pixel(4, 4, 0.2, 0.8);
  set_pixel(4, 5, 0.4, 0.6);
  set_pixel(5, 4, 0.3, 0.7);

  const auto units = extract_knowledge("s", {view}, std::vector<PixelPredictionMap>{map});
  REQUIRE(units.size() == 2);

  CHECK(units[0].part_2d == 0);
  REQUIRE(units[0].point_indices == std::vector<int>{0});
  // point 0 owns two component-A pixels: probs averaged
  CHECK(units[0].point_probs(0)[0] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(units[0].point_probs(0)[1] == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(units[0].confidence[0] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(units[0].pixels_2d.size() == 3);
  CHECK(units[0].confidence_2d == doctest::Approx((0.9 + 0.7 + 0.8) / 3.0));

  CHECK(units[1].part_2d == 1);
  REQUIRE(units[1].point_indices == std::vector<int>{2});
  CHECK(units[1].point_probs(0)[1] == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(units[1].mask_size() == 1);
}

TEST_CASE("mock teacher: noiseless oracle emits tight one-hot boxes") {
  const Scene scene = make_scene(500, 3, 64, 21);
  MockTeacherConfig config;  // all defaults: no noise, confidence 1
  config.seed = 9;
  const Predictions predictions = mock_vlm_predict(scene.shape, scene.views, config);
  REQUIRE(is_box_kind(predictions));
  const auto& boxes = std::get<std::vector<BoxPrediction>>(predictions);
  REQUIRE_FALSE(boxes.empty());

  for (const auto& box : boxes) {
    const ViewRender& view = scene.views[static_cast<std::size_t>(box.view_index)];
    const int part = argmax_index(box.probs);
    CHECK(box.probs[static_cast<std::size_t>(part)] == 1.0);
    // oracle: recompute the tight bounds of that part's owned pixels
    int min_r = view.height, max_r = -1, min_c = view.width, max_c = -1;
    for (int r = 0; r < view.height; ++r)
      for (int c = 0; c < view.width; ++c) {
        const int owner = view.owner(r, c);
        if (owner == kNoOwner || scene.shape.labels[static_cast<std::size_t>(owner)] != part)
          continue;
        min_r = std::min(min_r, r);
        max_r = std::max(max_r, r);
        min_c = std::min(min_c, c);
        max_c = std::max(max_c, c);
      }
    CHECK(box.x1 == min_c);
    CHECK(box.y1 == min_r);
    CHECK(box.x2 == max_c + 1);
    CHECK(box.y2 == max_r + 1);
  }
  // one box per visible part per view
  std::size_t expected = 0;
  for (const ViewRender& view : scene.views) {
    std::set<int> parts;
    for (int owner : view.pixel_owner)
      if (owner != kNoOwner) parts.insert(scene.shape.labels[static_cast<std::size_t>(owner)]);
    expected += parts.size();
  }
  CHECK(boxes.size() == expected);
}

TEST_CASE("mock teacher: drop, flip, determinism, and errors") {
  const Scene scene = make_scene(400, 4, 64, 33);

  SUBCASE("drop_rate 1 empties the prediction list") {
    MockTeacherConfig config;
    config.drop_rate = 1.0;
    config.seed = 4;
    const auto boxes =
        std::get<std::vector<BoxPrediction>>(mock_vlm_predict(scene.shape, scene.views, config));
    CHECK(boxes.empty());
    config.kind = TeacherKind::Pixel;
    const auto maps = std::get<std::vector<PixelPredictionMap>>(
        mock_vlm_predict(scene.shape, scene.views, config));
    CHECK(maps.empty());
  }

  SUBCASE("flip rate lands near its target over many boxes") {
    MockTeacherConfig config;
    config.flip_rate = 0.15;
    config.confidence_lo = 0.6;
    config.confidence_hi = 0.9;
    std::size_t flipped = 0, total = 0;
    for (std::uint64_t seed = 0; seed < 80; ++seed) {
      config.seed = seed;
      const auto boxes =
          std::get<std::vector<BoxPrediction>>(mock_vlm_predict(scene.shape, scene.views, config));
      for (const auto& box : boxes) {
        // noiseless boxes are tight around their true part; a flipped box
        // keeps the rect but moves the argmax. Recover truth from geometry.
        const ViewRender& view = scene.views[static_cast<std::size_t>(box.view_index)];
        int true_part = -1;
        for (int part = 0; part < 4 && true_part < 0; ++part) {
          int min_r = view.height, max_r = -1, min_c = view.width, max_c = -1;
          for (int r = 0; r < view.height; ++r)
            for (int c = 0; c < view.width; ++c) {
              const int owner = view.owner(r, c);
              if (owner == kNoOwner || scene.shape.labels[static_cast<std::size_t>(owner)] != part)
                continue;
              min_r = std::min(min_r, r);
              max_r = std::max(max_r, r);
              min_c = std::min(min_c, c);
              max_c = std::max(max_c, c);
            }
          if (max_r >= 0 && box.x1 == min_c && box.y1 == min_r && box.x2 == max_c + 1 &&
              box.y2 == max_r + 1)
            true_part = part;
        }
        REQUIRE(true_part >= 0);
        flipped += argmax_index(box.probs) != true_part;
        ++total;
      }
    }
    REQUIRE(total >= 1000);
    const double rate = static_cast<double>(flipped) / static_cast<double>(total);
    CHECK(rate == doctest::Approx(0.15).epsilon(0.2));  // 0.15 +- 0.03
  }

  SUBCASE("same seed replays byte-identically") {
    MockTeacherConfig config;
    config.drop_rate = 0.3;
    config.flip_rate = 0.2;
    config.confidence_lo = 0.5;
    config.confidence_hi = 0.9;
    config.box_jitter = 2.0;
    config.seed = 77;
    const auto a =
        std::get<std::vector<BoxPrediction>>(mock_vlm_predict(scene.shape, scene.views, config));
    const auto b =
        std::get<std::vector<BoxPrediction>>(mock_vlm_predict(scene.shape, scene.views, config));
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].view_index == b[i].view_index);
      CHECK(a[i].x1 == b[i].x1);
      CHECK(a[i].y2 == b[i].y2);
      CHECK(a[i].probs == b[i].probs);
    }
  }

  SUBCASE("unlabeled shapes are rejected") {
    PointCloudShape unlabeled = scene.shape;
    unlabeled.labels.clear();
    MockTeacherConfig config;
    CHECK_THROWS_AS(mock_vlm_predict(unlabeled, scene.views, config), std::runtime_error);
  }
}

TEST_CASE("mock pixel teacher feeds extraction with per-pixel vectors") {
  const Scene scene = make_scene(300, 2, 48, 3);
  MockTeacherConfig config;
  config.kind = TeacherKind::Pixel;
  config.confidence_lo = 0.6;
  config.confidence_hi = 0.9;
  config.flip_rate = 0.1;
  config.seed = 12;
  const Predictions predictions = mock_vlm_predict(scene.shape, scene.views, config);
  REQUIRE_FALSE(is_box_kind(predictions));
  const auto units = extract_knowledge(scene.shape.shape_id, scene.views, predictions);
  REQUIRE_FALSE(units.empty());
  for (const auto& unit : units) {
    CHECK(unit.mask_size() >= 1);
    for (std::size_t j = 0; j < unit.mask_size(); ++j) {
      // invariant: stored confidence is exactly the row max
      double best = 0.0;
      for (int r = 0; r < unit.num_parts; ++r) best = std::max(best, unit.point_probs(j)[r]);
      CHECK(unit.confidence[j] == best);
      CHECK(best > 0.0);
      CHECK(best <= 1.0);
    }
  }
}

TEST_CASE("prediction NDJSON: schema, validation errors, round trip") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "partdistill_preds.ndjson").string();

  SUBCASE("single box line loads") {
    std::ofstream(path) << R"({"kind":"box","view":0,"rect":[10,10,50,60],"probs":[0.7,0.3]})"
                        << "\n";
    const Predictions loaded = load_predictions(path, 64, 64);
    REQUIRE(is_box_kind(loaded));
    const auto& boxes = std::get<std::vector<BoxPrediction>>(loaded);
    REQUIRE(boxes.size() == 1);
    CHECK(boxes[0].view_index == 0);
    CHECK(boxes[0].x1 == 10.0);
    CHECK(boxes[0].y2 == 60.0);
    CHECK(boxes[0].probs == std::vector<double>{0.7, 0.3});
  }

  SUBCASE("unnormalized probs are rejected") {
    std::ofstream(path) << R"({"kind":"box","view":0,"rect":[0,0,8,8],"probs":[0.7,0.7]})" << "\n";
    CHECK_THROWS_WITH_AS(load_predictions(path, 64, 64),
                         doctest::Contains("probs not normalized"), std::runtime_error);
  }

  SUBCASE("mixed kinds are rejected") {
    std::ofstream(path) << R"({"kind":"box","view":0,"rect":[0,0,8,8],"probs":[0.7,0.3]})" << "\n"
                        << R"({"kind":"pixel","view":0,"part":0,"pixels_rle":[0,4],"probs":[0.7,0.3]})"
                        << "\n";
    CHECK_THROWS_WITH_AS(load_predictions(path, 64, 64),
                         doctest::Contains("mixed prediction kinds"), std::runtime_error);
  }

  SUBCASE("malformed JSON reports the line number") {
    std::ofstream(path) << R"({"kind":"box","view":0,"rect":[0,0,8,8],"probs":[0.7,0.3]})" << "\n"
                        << "{not json\n";
    CHECK_THROWS_WITH_AS(load_predictions(path, 64, 64), doctest::Contains("line 2"),
                         std::runtime_error);
  }

  SUBCASE("unknown kind is rejected") {
    std::ofstream(path) << R"({"kind":"blob","view":0,"rect":[0,0,8,8],"probs":[1.0,0.0]})" << "\n";
    CHECK_THROWS_WITH_AS(load_predictions(path, 64, 64), doctest::Contains("unknown kind"),
                         std::runtime_error);
  }

  SUBCASE("pixel records expand their run lengths") {
    std::ofstream(path) << R"({"kind":"pixel","view":1,"part":1,"pixels_rle":[0,3,10,2],"probs":[0.2,0.8]})"
                        << "\n";
    const Predictions loaded = load_predictions(path, 8, 8);
    const auto& maps = std::get<std::vector<PixelPredictionMap>>(loaded);
    REQUIRE(maps.size() == 1);
    CHECK(maps[0].view_index == 1);
    int foreground = 0;
    for (auto f : maps[0].foreground) foreground += f;
    CHECK(foreground == 5);
    CHECK(maps[0].is_foreground(0, 2));
    CHECK(maps[0].is_foreground(1, 2));  // offset 10
    CHECK(maps[0].pixel_probs(0, 0)[1] == 0.8);
  }

  SUBCASE("save/load round trip for mock output") {
    const Scene scene = make_scene(250, 2, 48, 8);
    MockTeacherConfig config;
    config.drop_rate = 0.2;
    config.flip_rate = 0.1;
    config.confidence_lo = 0.5;
    config.confidence_hi = 0.9;
    config.seed = 31;
    const Predictions predictions = mock_vlm_predict(scene.shape, scene.views, config);
    save_predictions(predictions, path);
    const Predictions loaded = load_predictions(path, 48, 48);
    const auto& a = std::get<std::vector<BoxPrediction>>(predictions);
    const auto& b = std::get<std::vector<BoxPrediction>>(loaded);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].view_index == b[i].view_index);
      CHECK(a[i].x1 == doctest::Approx(b[i].x1).epsilon(1e-12));
      CHECK(a[i].probs.size() == b[i].probs.size());
      for (std::size_t k = 0; k < a[i].probs.size(); ++k)
        CHECK(a[i].probs[k] == doctest::Approx(b[i].probs[k]).epsilon(1e-12));
    }
  }

  fs::remove(path);
}
