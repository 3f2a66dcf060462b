#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "toist/losses.hpp"
#include "toist/model.hpp"
#include "toist/synthdata.hpp"
#include "toist/train.hpp"

namespace toist {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Everything a run needs, serializable as `key = value` lines.
struct RunConfig {
  model::ModelConfig model;
  loss::LossWeights loss;
  train::TrainConfig train;
  train::DistillConfig distill;
  synth::GenerationParams generation;
  double split_ratio = 0.8;
  std::string form = "pronoun";  // train: which description the model reads
  int distill_epochs = 15;       // two-phase distillation length
  std::string distill_mode = "joint";

  // Toy defaults; "paper" switches to the full-size model, the fine-tuning
  // learning rate 5e-5 and the original distillation weights.
  static RunConfig preset(const std::string& name);

  void set(const std::string& key, const std::string& value);  // throws ConfigError
  std::string get(const std::string& key) const;
  static std::vector<std::string> keys();

  std::string to_text() const;
  // Applies `key = value` lines on top of this config; '#' starts a comment.
  void apply_text(const std::string& text);
  void validate() const;
};

RunConfig load_run_config(const std::string& path);

}  // namespace toist
