#include "toist/evaluation.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace toist::eval {

namespace {

double iou(const Detection& d, const GroundTruth& g, IouKind kind) {
  return kind == IouKind::kBox ? geom::box_iou(d.box, g.box) : geom::mask_iou(d.mask, g.mask);
}

Eigen::RowVectorXd row_mean(const Eigen::MatrixXd& m, const std::vector<int>& rows) {
  Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(m.cols());
  for (int r : rows) acc += m.row(r);
  return acc / static_cast<double>(rows.size());
}

template <typename S>
Eigen::MatrixXd as_double(const ad::Var<S>& v) {
  return v.value().template cast<double>();
}

}  // namespace

double ap_at_05(const std::vector<Detection>& detections, const std::map<int, std::vector<GroundTruth>>& ground_truth,
                IouKind kind, std::vector<PrPoint>* curve) {
  std::size_t n_gt = 0;
  for (const auto& [scene, gts] : ground_truth) n_gt += gts.size();
  if (curve) curve->clear();
  if (n_gt == 0) return 0.0;

  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const Detection& x = detections[a];
    const Detection& y = detections[b];
    if (x.score != y.score) return x.score > y.score;
    if (x.scene_id != y.scene_id) return x.scene_id < y.scene_id;
    return x.query < y.query;
  });

  std::map<int, std::vector<char>> used;
  for (const auto& [scene, gts] : ground_truth) used[scene].assign(gts.size(), 0);
  std::size_t tp = 0;
  double ap = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const Detection& d = detections[order[rank]];
    bool hit = false;
    auto it = ground_truth.find(d.scene_id);
    if (it != ground_truth.end()) {
      std::vector<char>& taken = used[d.scene_id];
      int best = -1;
      double best_iou = -1;
      for (std::size_t g = 0; g < it->second.size(); ++g) {
        if (taken[g]) continue;
        const double v = iou(d, it->second[g], kind);
        if (v > best_iou) {
          best_iou = v;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0 && best_iou >= kIouThreshold) {
        taken[static_cast<std::size_t>(best)] = 1;
        hit = true;
      }
    }
    if (hit) ++tp;
    const double precision = static_cast<double>(tp) / static_cast<double>(rank + 1);
    const double recall = static_cast<double>(tp) / static_cast<double>(n_gt);
    if (hit) ap += precision / static_cast<double>(n_gt);
    if (curve) curve->push_back({recall, precision});
  }
  return ap;
}

const char* to_string(Mode m) {
  switch (m) {
    case Mode::kPronounPlain: return "pronoun-plain";
    case Mode::kNounOracle: return "noun-oracle";
    case Mode::kReplacePre: return "replace-pre";
    case Mode::kReplacePost: return "replace-post";
    case Mode::kDistilled: return "distilled";
  }
  return "?";
}

Mode parse_mode(const std::string& s) {
  for (Mode m : {Mode::kPronounPlain, Mode::kNounOracle, Mode::kReplacePre, Mode::kReplacePost, Mode::kDistilled})
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown evaluation mode '" + s +
                              "' (expected pronoun-plain, noun-oracle, replace-pre, replace-post or distilled)");
}

bool privileged(Mode m) { return m == Mode::kNounOracle || m == Mode::kReplacePre || m == Mode::kReplacePost; }

std::vector<ScenePrediction> predict(const Models& models, const synth::Dataset& data, Mode mode,
                                     std::vector<std::string>* warnings) {
  if (!models.config || !models.model) throw std::invalid_argument("evaluation needs a model");
  const bool replace = mode == Mode::kReplacePre || mode == Mode::kReplacePost;
  if (replace && !models.teacher)
    throw std::invalid_argument(std::string(to_string(mode)) + " needs a noun-trained teacher model");
  if (mode == Mode::kDistilled && !models.bank) throw std::invalid_argument("distilled mode needs a memory bank");
  // Forward passes never run backward; the const_casts only bind parameters to tapes.
  auto& student = const_cast<model::ParamSet<float>&>(*models.model);
  std::set<int> warned;
  std::vector<ScenePrediction> out;
  out.reserve(data.samples.size());
  for (const synth::Sample& s : data.samples) {
    ad::Tape<float> tape;
    model::Toist<float> net(*models.config, student, tape);
    ScenePrediction p;
    p.scene_id = s.scene_id;
    p.task = s.task_id;
    const bool have_noun = s.noun_description.form == DescriptionForm::kVerbNoun;
    if (mode == Mode::kNounOracle) {
      p.values = model::values_of(net.forward(s.scene, s.noun_description));
    } else if (replace && have_noun) {
      auto& teacher_params = const_cast<model::ParamSet<float>&>(*models.teacher);
      ad::Tape<float> ttape;
      model::Toist<float> teacher(*models.config, teacher_params, ttape);
      model::ForwardOptions opt;
      if (mode == Mode::kReplacePre) {
        const Eigen::MatrixXd text = as_double(teacher.encode_text(s.noun_description));
        opt.replace = model::Replace::kPre;
        opt.replacement = row_mean(text, s.noun_description.special_positions);
      } else {
        opt.replace = model::Replace::kPost;
        opt.replacement = as_double(teacher.encode(s.scene, s.noun_description).special);
      }
      p.values = model::values_of(net.forward(s.scene, s.pronoun_description, opt));
    } else if (mode == Mode::kDistilled && models.bank->ready(s.task_id)) {
      model::EncoderOutput<float> enc = net.encode(s.scene, s.pronoun_description);
      const Eigen::MatrixXd& protos = models.bank->prototypes(s.task_id);
      const int k = distill::select_prototype(protos, as_double(enc.special));
      p.values = model::values_of(net.decode(enc, protos.row(k)));
    } else {
      if (mode == Mode::kDistilled && warnings && warned.insert(s.task_id).second)
        warnings->push_back("memory bank empty for task " + std::to_string(s.task_id) +
                            "; falling back to the plain pronoun path");
      p.values = model::values_of(net.forward(s.scene, s.pronoun_description));
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<Detection> detections_of(const ScenePrediction& p, int height, int width, int score_block) {
  const model::PredictionValues& v = p.values;
  const int blocks = static_cast<int>(v.block_preference.size());
  const int b = score_block < 0 ? blocks - 1 : score_block;
  if (b < 0 || b >= blocks) throw std::out_of_range("detections_of: block " + std::to_string(score_block));
  const std::vector<double>& scores = v.block_preference[static_cast<std::size_t>(b)];
  std::vector<Detection> out;
  for (Eigen::Index q = 0; q < v.boxes.rows(); ++q) {
    Detection d;
    d.scene_id = p.scene_id;
    d.query = static_cast<int>(q);
    d.score = scores[static_cast<std::size_t>(q)];
    d.box = geom::box_from_row(Eigen::RowVector4d(v.boxes.row(q)).data());
    const Eigen::RowVectorXf row = v.mask_logits.row(q);
    d.mask = geom::binarize_logits(std::span<const float>(row.data(), static_cast<std::size_t>(row.size())), height,
                                   width);
    out.push_back(std::move(d));
  }
  return out;
}

Report score(const std::vector<ScenePrediction>& predictions, const synth::Dataset& data, Mode mode, bool per_block) {
  if (predictions.size() != data.samples.size())
    throw std::invalid_argument("score: prediction count does not match the dataset");
  Report report;
  report.mode = mode;
  const int h = data.params.grid_h, w = data.params.grid_w;
  for (int t = 0; t < data.params.n_task; ++t) {
    TaskReport tr;
    tr.task = t;
    tr.name = synth::task_table()[static_cast<std::size_t>(t)].name;
    std::vector<Detection> all, nonempty;
    std::map<int, std::vector<GroundTruth>> gt;
    std::map<int, std::vector<int>> scenes_with_category;
    std::vector<const ScenePrediction*> preds;
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
      const synth::Sample& s = data.samples[i];
      if (s.task_id != t) continue;
      if (predictions[i].scene_id != s.scene_id) throw std::invalid_argument("score: predictions out of order");
      preds.push_back(&predictions[i]);
      ++tr.scenes;
      if (s.gt.empty()) ++tr.empty_scenes;
      auto& g = gt[s.scene_id];
      for (int idx : s.gt) {
        const ObjectSpec& o = s.scene.objects[static_cast<std::size_t>(idx)];
        g.push_back({o.box, o.mask, o.category});
        scenes_with_category[o.category].push_back(s.scene_id);
      }
      tr.ground_truth += static_cast<int>(s.gt.size());
      std::vector<Detection> d = detections_of(predictions[i], h, w);
      all.insert(all.end(), d.begin(), d.end());
      if (!s.gt.empty()) nonempty.insert(nonempty.end(), d.begin(), d.end());
    }
    tr.ap_box = ap_at_05(all, gt, IouKind::kBox, &tr.pr_box);
    tr.ap_mask = ap_at_05(all, gt, IouKind::kMask, &tr.pr_mask);
    tr.ap_box_nonempty = ap_at_05(nonempty, gt, IouKind::kBox);
    tr.ap_mask_nonempty = ap_at_05(nonempty, gt, IouKind::kMask);

    // Per category: scenes whose ground truth contains the category, scored
    // against that category's objects only.
    for (auto& [cat, scenes] : scenes_with_category) {
      std::set<int> keep(scenes.begin(), scenes.end());
      std::map<int, std::vector<GroundTruth>> cg;
      for (int sid : keep)
        for (const GroundTruth& g : gt[sid])
          if (g.category == cat) cg[sid].push_back(g);
      std::vector<Detection> cd;
      for (const Detection& d : all)
        if (keep.count(d.scene_id)) cd.push_back(d);
      tr.category_ap_box[cat] = ap_at_05(cd, cg, IouKind::kBox);
    }

    if (per_block && !preds.empty()) {
      const int blocks = static_cast<int>(preds.front()->values.block_preference.size());
      for (int b = 0; b < blocks; ++b) {
        std::vector<Detection> bd;
        for (const ScenePrediction* p : preds) {
          std::vector<Detection> d = detections_of(*p, h, w, b);
          bd.insert(bd.end(), d.begin(), d.end());
        }
        tr.block_ap_box.push_back(ap_at_05(bd, gt, IouKind::kBox));
        tr.block_ap_mask.push_back(ap_at_05(bd, gt, IouKind::kMask));
      }
    }
    report.tasks.push_back(std::move(tr));
  }
  for (const TaskReport& tr : report.tasks) {
    report.map_box += tr.ap_box / static_cast<double>(report.tasks.size());
    report.map_mask += tr.ap_mask / static_cast<double>(report.tasks.size());
  }
  return report;
}

Report evaluate(const Models& models, const synth::Dataset& data, Mode mode, bool per_block) {
  std::vector<std::string> warnings;
  Report r = score(predict(models, data, mode, &warnings), data, mode, per_block);
  r.warnings = std::move(warnings);
  return r;
}

std::string to_json(const Report& report) {
  using nlohmann::json;
  json j;
  j["mode"] = to_string(report.mode);
  j["privileged"] = privileged(report.mode);
  j["iou_threshold"] = kIouThreshold;
  j["ap_integration"] = "step";
  j["map_box"] = report.map_box;
  j["map_mask"] = report.map_mask;
  j["warnings"] = report.warnings;
  json tasks = json::array();
  for (const TaskReport& t : report.tasks) {
    json cats = json::object();
    for (const auto& [c, ap] : t.category_ap_box) cats[synth::category_names()[static_cast<std::size_t>(c)]] = ap;
    json e = {{"task", t.task},
              {"name", t.name},
              {"ap_box", t.ap_box},
              {"ap_mask", t.ap_mask},
              {"ap_box_nonempty", t.ap_box_nonempty},
              {"ap_mask_nonempty", t.ap_mask_nonempty},
              {"scenes", t.scenes},
              {"empty_scenes", t.empty_scenes},
              {"ground_truth", t.ground_truth},
              {"category_ap_box", cats}};
    if (!t.block_ap_box.empty()) {
      e["block_ap_box"] = t.block_ap_box;
      e["block_ap_mask"] = t.block_ap_mask;
    }
    tasks.push_back(std::move(e));
  }
  j["tasks"] = std::move(tasks);
  return j.dump(2);
}

namespace {

std::string number(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

}  // namespace

std::string to_csv(const Report& report) {
  std::ostringstream os;
  os << "task,name,metric,block,value\n";
  for (const TaskReport& t : report.tasks) {
    const std::string head = std::to_string(t.task) + "," + csv_field(t.name) + ",";
    os << head << "ap_box,final," << number(t.ap_box) << "\n";
    os << head << "ap_mask,final," << number(t.ap_mask) << "\n";
    for (std::size_t b = 0; b < t.block_ap_box.size(); ++b)
      os << head << "ap_box," << b << "," << number(t.block_ap_box[b]) << "\n";
    for (std::size_t b = 0; b < t.block_ap_mask.size(); ++b)
      os << head << "ap_mask," << b << "," << number(t.block_ap_mask[b]) << "\n";
  }
  return os.str();
}

std::string pr_curves_csv(const Report& report) {
  std::ostringstream os;
  os << "task,kind,recall,precision\n";
  for (const TaskReport& t : report.tasks) {
    for (const PrPoint& p : t.pr_box) os << t.task << ",box," << number(p.recall) << "," << number(p.precision) << "\n";
    for (const PrPoint& p : t.pr_mask)
      os << t.task << ",mask," << number(p.recall) << "," << number(p.precision) << "\n";
  }
  return os.str();
}

}  // namespace toist::eval
