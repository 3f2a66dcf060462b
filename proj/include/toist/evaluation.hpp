#pragma once

#include <map>
#include <string>
#include <vector>

#include "toist/distillation.hpp"
#include "toist/geometry.hpp"
#include "toist/model.hpp"
#include "toist/synthdata.hpp"

namespace toist::eval {

inline constexpr double kIouThreshold = 0.5;

enum class IouKind : std::uint8_t { kBox, kMask };

struct Detection {
  int scene_id = 0;
  int query = 0;
  double score = 0;
  geom::Box box;
  geom::Mask mask;
};

struct GroundTruth {
  geom::Box box;
  geom::Mask mask;
  int category = -1;
};

struct PrPoint {
  double recall = 0, precision = 0;
};

// Ranked detections (score desc, then scene id, then query index) are
// greedily matched to the unmatched ground truth of their scene with the
// highest IoU (lowest index on ties); IoU >= 0.5 is a true positive. AP is
// the area under the step PR curve: sum over true positives of
// precision-at-rank times the recall increment. Zero when there is no
// ground truth.
double ap_at_05(const std::vector<Detection>& detections,
                const std::map<int, std::vector<GroundTruth>>& ground_truth, IouKind kind,
                std::vector<PrPoint>* curve = nullptr);

enum class Mode : std::uint8_t { kPronounPlain, kNounOracle, kReplacePre, kReplacePost, kDistilled };

const char* to_string(Mode m);
Mode parse_mode(const std::string& s);
bool privileged(Mode m);  // reads the noun description at test time

struct Models {
  const model::ModelConfig* config = nullptr;
  const model::ParamSet<float>* model = nullptr;    // evaluated network
  const model::ParamSet<float>* teacher = nullptr;  // noun model for replace modes
  const distill::MemoryBank* bank = nullptr;        // distilled mode
};

struct TaskReport {
  int task = 0;
  std::string name;
  double ap_box = 0, ap_mask = 0;
  double ap_box_nonempty = 0, ap_mask_nonempty = 0;  // scenes with ground truth only
  int scenes = 0, empty_scenes = 0, ground_truth = 0;
  std::vector<double> block_ap_box, block_ap_mask;  // last-block boxes, block-b scores
  std::map<int, double> category_ap_box;            // ground-truth category -> AP
  std::vector<PrPoint> pr_box, pr_mask;
};

struct Report {
  Mode mode = Mode::kPronounPlain;
  std::vector<TaskReport> tasks;
  double map_box = 0, map_mask = 0;
  std::vector<std::string> warnings;
};

// Per-scene predictions for one evaluation mode (one forward per sample).
struct ScenePrediction {
  int scene_id = 0, task = 0;
  model::PredictionValues values;
};

std::vector<ScenePrediction> predict(const Models& models, const synth::Dataset& data, Mode mode,
                                     std::vector<std::string>* warnings = nullptr);

Report evaluate(const Models& models, const synth::Dataset& data, Mode mode, bool per_block);
Report score(const std::vector<ScenePrediction>& predictions, const synth::Dataset& data, Mode mode,
             bool per_block);

// Top-n_pred detections of one scene for the given block's scores.
std::vector<Detection> detections_of(const ScenePrediction& p, int height, int width, int score_block = -1);

std::string to_json(const Report& report);
// task,name,metric,block,value; one row per task and metric (plus n_tr
// block rows per task and metric when per-block results are present).
std::string to_csv(const Report& report);
// task,kind,recall,precision
std::string pr_curves_csv(const Report& report);

}  // namespace toist::eval
