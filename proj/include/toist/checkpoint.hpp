#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "toist/distillation.hpp"
#include "toist/train.hpp"

namespace toist::ckpt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One trainer: parameters, AdamW moments, epoch counter and shuffle RNG.
struct ModelState {
  std::string role;  // "model", "teacher" or "student"
  train::TextForm form = train::TextForm::kPronoun;
  int epoch = 0;
  std::string rng_state;
  model::ParamSet<float> params;
  std::uint64_t optimizer_steps = 0;
  std::vector<ad::Mat<float>> first_moments, second_moments;  // empty before the first step
};

struct Checkpoint {
  std::string config_text;  // resolved RunConfig
  std::vector<ModelState> models;
  std::optional<distill::MemoryBank> bank;

  const ModelState& model(const std::string& role) const;  // throws FormatError when absent
  bool has(const std::string& role) const;
};

ModelState capture(const std::string& role, const train::ModelTrainer& trainer);
// Copies a captured state into a trainer built from the same model config;
// throws FormatError on any name or shape mismatch.
void restore(const ModelState& state, train::ModelTrainer& trainer);

std::vector<std::uint8_t> serialize(const Checkpoint& c);
Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);
void save(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load(const std::filesystem::path& path);

}  // namespace toist::ckpt
