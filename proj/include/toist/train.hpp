#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "toist/distillation.hpp"
#include "toist/losses.hpp"
#include "toist/model.hpp"
#include "toist/synthdata.hpp"

namespace toist::train {

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 1e-4;
  double clip_norm = 0;  // global gradient-norm clip; 0 disables

  void validate() const;
};

// Decoupled weight decay Adam over a ParamSet.
template <typename S>
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  void step(model::ParamSet<S>& params);

  const AdamWConfig& config() const { return config_; }
  AdamWConfig& config() { return config_; }
  std::uint64_t steps() const { return t_; }
  std::vector<ad::Mat<S>>& first_moments() { return m_; }
  std::vector<ad::Mat<S>>& second_moments() { return v_; }
  const std::vector<ad::Mat<S>>& first_moments() const { return m_; }
  const std::vector<ad::Mat<S>>& second_moments() const { return v_; }
  void set_steps(std::uint64_t t) { t_ = t; }

 private:
  AdamWConfig config_;
  std::uint64_t t_ = 0;
  std::vector<ad::Mat<S>> m_, v_;
};

enum class TextForm : std::uint8_t { kNoun, kPronoun };

const char* to_string(TextForm f);
TextForm parse_text_form(const std::string& s);

const TaskDescription& description_of(const synth::Sample& s, TextForm form);

struct TrainConfig {
  int epochs = 12;
  int batch_size = 4;
  int lr_drop = 0;  // epoch after which the learning rate is scaled by 0.1; 0 disables
  bool aux_loss = true;
  std::uint64_t seed = 1;
  AdamWConfig optim;

  void validate() const;
};

struct StepStats {
  double loss = 0;  // batch mean of the optimized objective
  double teacher = 0, student = 0, cluster = 0, binary = 0;
  int replaced = 0;  // samples that went through cluster-center replacement
  // Unweighted final-block terms of the trained (or student) model:
  // l1, giou, dice, focal, token, align.
  std::array<double, 6> terms{};
};

inline constexpr std::array<const char*, 6> kLossTermNames = {"l1", "giou", "dice", "focal", "token", "align"};

struct EpochStats {
  int epoch = 0;
  int steps = 0;
  StepStats mean;
  double seconds = 0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// One TOIST network with its optimizer and the shuffling RNG.
class ModelTrainer {
 public:
  ModelTrainer(const model::ModelConfig& config, const loss::LossWeights& weights, const TrainConfig& train,
               TextForm form);

  // Forward, backward and one optimizer update over the batch.
  StepStats step(const std::vector<const synth::Sample*>& batch);
  EpochStats train_epoch(const synth::Dataset& data);
  void fit(const synth::Dataset& data, const EpochCallback& on_epoch = {});

  // Sets the optimizer step size for the current epoch.
  void schedule();
  // Per-epoch visiting order; advances the shuffle RNG.
  std::vector<std::size_t> epoch_order(std::size_t n);

  model::ModelConfig config;
  loss::LossWeights weights;
  TrainConfig train;
  TextForm form;
  model::ParamSet<float> params;
  AdamW<float> optimizer;
  std::mt19937_64 shuffle_rng;
  int epoch = 0;  // completed epochs
};

struct DistillConfig {
  bool ccr = true;           // cluster-center replacement
  bool cluster_loss = true;
  bool sbtl = true;          // soft binary target loss
  double lambda_cluster = 1e4;
  double lambda_binary = 50;
  int k = 3;
  int memory = 1024;
  distill::UpdatePolicy policy = distill::UpdatePolicy::kReplaceClosest;
  distill::TsMatchWeights ts;
  bool joint = true;  // false: teacher frozen (two-phase)

  void validate() const;
};

// Teacher (noun descriptions) and student (pronoun descriptions) trained
// under the combined distillation objective.
class DistillTrainer {
 public:
  DistillTrainer(const model::ModelConfig& config, const loss::LossWeights& weights, const TrainConfig& train,
                 const DistillConfig& distill, int n_task);
  // Warm start from separately trained models; throws when their model
  // configurations differ.
  DistillTrainer(ModelTrainer teacher, ModelTrainer student, const DistillConfig& distill, int n_task);

  StepStats step(const std::vector<const synth::Sample*>& batch);
  EpochStats train_epoch(const synth::Dataset& data);
  void fit(const synth::Dataset& data, const EpochCallback& on_epoch = {});

  DistillConfig distill;
  ModelTrainer teacher;
  ModelTrainer student;
  distill::MemoryBank bank;
};

// Numeric failure inside an epoch, tagged with the offending batch.
class StepFailure : public ad::NumericError {
 public:
  StepFailure(const std::string& what, int epoch, int step, std::vector<int> scene_ids)
      : ad::NumericError(what), epoch(epoch), step(step), scene_ids(std::move(scene_ids)) {}
  int epoch, step;
  std::vector<int> scene_ids;
};

// Throws ad::NumericError when any parameter or gradient is non-finite.
void check_finite(const model::ParamSet<float>& params, const std::string& what);

}  // namespace toist::train
