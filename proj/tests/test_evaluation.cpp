#include <doctest.h>

#include <json.hpp>
#include <sstream>

#include "support.hpp"
#include "toist/evaluation.hpp"

using namespace toist;
using namespace toist::eval;
using testing::Gen;

namespace {

Detection det(int scene, int query, double score, const geom::Box& b) {
  Detection d;
  d.scene_id = scene;
  d.query = query;
  d.score = score;
  d.box = b;
  return d;
}

const geom::Box kFar{0.05, 0.05, 0.02, 0.02};

// Predictions that reproduce the ground truth: one query per object with
// high preference, the rest low-scored far-away empties.
std::vector<ScenePrediction> perfect_predictions(const synth::Dataset& d, int n_pred, int blocks) {
  std::vector<ScenePrediction> out;
  for (const synth::Sample& s : d.samples) {
    ScenePrediction p;
    p.scene_id = s.scene_id;
    p.task = s.task_id;
    auto& v = p.values;
    v.boxes = Eigen::MatrixXd(n_pred, 4);
    v.mask_logits = Eigen::MatrixXf::Constant(n_pred, s.scene.cells(), -10.0f);
    std::vector<double> pref(static_cast<std::size_t>(n_pred), 0.01);
    for (int q = 0; q < n_pred; ++q) v.boxes.row(q) << kFar.cx, kFar.cy, kFar.h, kFar.w;
    for (std::size_t k = 0; k < s.gt.size(); ++k) {
      const ObjectSpec& o = s.scene.objects[static_cast<std::size_t>(s.gt[k])];
      const int q = static_cast<int>(k);
      v.boxes.row(q) << o.box.cx, o.box.cy, o.box.h, o.box.w;
      for (int c = 0; c < s.scene.cells(); ++c)
        if (o.mask.cells[static_cast<std::size_t>(c)]) v.mask_logits(q, c) = 10.0f;
      pref[k] = 0.99;
    }
    for (int b = 0; b < blocks; ++b) {
      v.block_preference.push_back(pref);
      v.block_boxes.push_back(v.boxes);
      v.block_mask_logits.push_back(v.mask_logits);
      v.block_logits.push_back(Eigen::MatrixXd::Zero(n_pred, 4));
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

TEST_CASE("hand-computed AP") {
  // Three ground-truth boxes in one scene, ranked TP, FP, TP, TP, FP.
  const geom::Box g0{0.2, 0.2, 0.2, 0.2}, g1{0.5, 0.5, 0.2, 0.2}, g2{0.8, 0.8, 0.2, 0.2};
  std::map<int, std::vector<GroundTruth>> gt{{0, {{g0, {}, 0}, {g1, {}, 0}, {g2, {}, 0}}}};
  std::vector<Detection> d = {det(0, 0, 0.9, g0), det(0, 1, 0.8, kFar), det(0, 2, 0.7, g1), det(0, 3, 0.6, g2),
                              det(0, 4, 0.5, kFar)};
  std::vector<PrPoint> curve;
  const double ap = ap_at_05(d, gt, IouKind::kBox, &curve);
  CHECK(ap == doctest::Approx((1.0 + 2.0 / 3 + 3.0 / 4) / 3).epsilon(1e-15));
  CHECK(std::abs(ap - 0.80556) < 1e-5);
  CHECK(ap == doctest::Approx(testing::brute_force_ap(d, gt, IouKind::kBox)).epsilon(1e-15));
  REQUIRE(curve.size() == 5);
  CHECK(curve[1].precision == 0.5);
  CHECK(curve[4].recall == 1.0);
}

TEST_CASE("trivial AP cases") {
  const geom::Box g0{0.3, 0.3, 0.2, 0.2};
  std::map<int, std::vector<GroundTruth>> gt{{0, {{g0, {}, 0}}}, {1, {}}};
  CHECK(ap_at_05({}, gt, IouKind::kBox) == 0.0);
  CHECK(ap_at_05({det(0, 0, 0.9, g0), det(1, 0, 0.1, g0)}, gt, IouKind::kBox) == 1.0);
  CHECK(ap_at_05({det(0, 0, 0.9, g0)}, {{0, {}}}, IouKind::kBox) == 0.0);
  // A duplicate of a matched box is a false positive.
  std::vector<PrPoint> curve;
  CHECK(ap_at_05({det(0, 0, 0.9, g0), det(0, 1, 0.8, g0)}, gt, IouKind::kBox, &curve) == 1.0);
  CHECK(curve[1].precision == 0.5);
  // A detection in the wrong scene never matches.
  CHECK(ap_at_05({det(1, 0, 0.9, g0), det(0, 0, 0.1, g0)}, gt, IouKind::kBox) == 0.5);
}

TEST_CASE("AP equals the brute-force oracle on random task sets") {
  Gen g(51);
  for (int trial = 0; trial < 200; ++trial) {
    std::map<int, std::vector<GroundTruth>> gt;
    std::vector<Detection> dets;
    const int scenes = g.integer(1, 4);
    for (int s = 0; s < scenes; ++s) {
      auto& list = gt[s];
      const int n = g.integer(0, 3);
      for (int k = 0; k < n; ++k) list.push_back({g.box(0.1, 0.4), g.mask(4, 4), 0});
    }
    const int nd = g.integer(0, 20);
    for (int k = 0; k < nd; ++k) {
      const int s = g.integer(0, scenes - 1);
      Detection d;
      d.scene_id = s;
      d.query = k;
      d.score = g.integer(0, 5) / 5.0;  // coarse scores force tie-breaking
      if (!gt[s].empty() && g.coin(0.6)) {
        const GroundTruth& near = gt[s][static_cast<std::size_t>(g.integer(0, static_cast<int>(gt[s].size()) - 1))];
        d.box = near.box;
        d.box.cx += g.uniform(-0.05, 0.05);
        d.box.cy += g.uniform(-0.05, 0.05);
        d.mask = near.mask;
        if (g.coin(0.3)) d.mask.cells[static_cast<std::size_t>(g.integer(0, 15))] ^= 1;
      } else {
        d.box = g.box(0.1, 0.4);
        d.mask = g.mask(4, 4);
      }
      dets.push_back(d);
    }
    for (IouKind kind : {IouKind::kBox, IouKind::kMask}) {
      const double ap = ap_at_05(dets, gt, kind);
      CHECK(std::abs(ap - testing::brute_force_ap(dets, gt, kind)) <= 1e-12);
      CHECK(ap >= 0.0);
      CHECK(ap <= 1.0);
    }
    // Strictly increasing score maps preserve the ranking and hence AP.
    std::vector<Detection> mapped = dets;
    for (auto& d : mapped) d.score = std::exp(3 * d.score) - 7;
    CHECK(ap_at_05(mapped, gt, IouKind::kBox) == ap_at_05(dets, gt, IouKind::kBox));
  }
}

TEST_CASE("scoring ground truth as detections gives AP 1") {
  synth::GenerationParams p;
  p.scenes_per_task = 30;
  p.seed = 2;
  const synth::Dataset d = synth::generate(p);
  const auto preds = perfect_predictions(d, 8, 2);
  const Report r = score(preds, d, Mode::kPronounPlain, true);
  REQUIRE(r.tasks.size() == 5);
  double sum = 0;
  for (const TaskReport& t : r.tasks) {
    CHECK(t.ap_box == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(t.ap_mask == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(t.ap_box_nonempty == doctest::Approx(1.0).epsilon(1e-12));
    REQUIRE(t.block_ap_box.size() == 2);
    CHECK(t.block_ap_box[0] == doctest::Approx(1.0).epsilon(1e-12));
    // Other categories' objects rank as false positives here, so only bounds hold.
    for (const auto& [cat, ap] : t.category_ap_box) {
      CHECK(ap > 0.0);
      CHECK(ap <= 1.0 + 1e-12);
    }
    CHECK(t.scenes == 30);
    sum += t.ap_box;
  }
  CHECK(r.map_box == doctest::Approx(sum / 5).epsilon(1e-15));
}

TEST_CASE("report exports") {
  synth::GenerationParams p;
  p.scenes_per_task = 12;
  const synth::Dataset d = synth::generate(p);
  auto preds = perfect_predictions(d, 8, 2);
  // Perturb scores so the APs are not all 1.
  Gen g(52);
  for (auto& sp : preds)
    for (auto& block : sp.values.block_preference)
      for (double& s : block) s = g.uniform();
  const Report r = score(preds, d, Mode::kNounOracle, true);

  const auto j = nlohmann::json::parse(to_json(r));
  CHECK(j["privileged"] == true);
  CHECK(j["mode"] == "noun-oracle");
  CHECK(j["map_box"].get<double>() == r.map_box);
  double mean = 0;
  for (std::size_t t = 0; t < r.tasks.size(); ++t) {
    CHECK(j["tasks"][t]["ap_box"].get<double>() == r.tasks[t].ap_box);
    CHECK(j["tasks"][t]["ap_mask"].get<double>() == r.tasks[t].ap_mask);
    mean += j["tasks"][t]["ap_box"].get<double>() / static_cast<double>(r.tasks.size());
  }
  CHECK(mean == doctest::Approx(j["map_box"].get<double>()).epsilon(1e-15));

  // Final rows per task and metric, plus one row per block.
  const std::string csv = to_csv(r);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "task,name,metric,block,value");
  int rows = 0, block_rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    const auto last = line.rfind(',');
    const double v = std::stod(line.substr(last + 1));
    const int task = std::stoi(line.substr(0, line.find(',')));
    const bool mask = line.find(",ap_mask,") != std::string::npos;
    if (line.find(",final,") != std::string::npos) {
      CHECK(std::abs(v - (mask ? r.tasks[static_cast<std::size_t>(task)].ap_mask : r.tasks[static_cast<std::size_t>(task)].ap_box)) <= 1e-12);
    } else {
      ++block_rows;
    }
  }
  CHECK(rows == 5 * 2 + 5 * 2 * 2);
  CHECK(block_rows == 5 * 2 * 2);

  const Report plain = score(preds, d, Mode::kPronounPlain, false);
  CHECK(nlohmann::json::parse(to_json(plain))["privileged"] == false);
  std::istringstream in2(to_csv(plain));
  int plain_rows = -1;
  while (std::getline(in2, line)) ++plain_rows;
  CHECK(plain_rows == 5 * 2);
  CHECK(pr_curves_csv(plain).rfind("task,kind,recall,precision\n", 0) == 0);
}

TEST_CASE("mode parsing and model requirements") {
  CHECK(parse_mode("distilled") == Mode::kDistilled);
  CHECK(privileged(Mode::kReplacePost));
  CHECK_FALSE(privileged(Mode::kDistilled));
  CHECK_THROWS(parse_mode("oracle"));
  synth::GenerationParams p;
  p.scenes_per_task = 2;
  const synth::Dataset d = synth::generate(p);
  model::ModelConfig cfg;
  auto params = model::init_params<float>(cfg, 1);
  Models m{&cfg, &params, nullptr, nullptr};
  CHECK_THROWS(evaluate(m, d, Mode::kDistilled, false));
  CHECK_THROWS(evaluate(m, d, Mode::kReplacePre, false));
  const Report r = evaluate(m, d, Mode::kPronounPlain, true);
  CHECK(r.tasks.size() == 5);
  CHECK(r.tasks[0].block_ap_box.size() == static_cast<std::size_t>(cfg.n_tr));

  // An unfilled bank falls back to the plain path with a warning.
  distill::MemoryBank bank(5, 8, cfg.d, 3, distill::UpdatePolicy::kReplaceClosest, 0);
  Models mb{&cfg, &params, nullptr, &bank};
  const Report fallback = evaluate(mb, d, Mode::kDistilled, false);
  CHECK(fallback.warnings.size() == 5);
  CHECK(fallback.map_box == r.map_box);
}
