#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "toist/scene.hpp"

namespace toist::synth {

inline constexpr int kCategoryCount = 12;
inline constexpr int kAttributeCount = 4;
inline constexpr int kFeatureDim = kCategoryCount + kAttributeCount + 1;  // one-hot, attributes, objectness
inline constexpr int kMaxTasks = 14;
inline constexpr double kFeatureNoise = 0.05;
// Per-object error on the observed attribute channels, shared by all cells
// of the object; the true attributes decide the ground truth.
inline constexpr double kAttributeObservationNoise = 0.1;
inline constexpr double kTieTolerance = 1e-9;

// Token ids.
inline constexpr int kTokenEmpty = 0;
inline constexpr int kFirstPronoun = 1;  // something, it, them, abcd
inline constexpr int kFirstNoun = 5;     // one per category
inline constexpr int kFirstVerb = kFirstNoun + kCategoryCount;

int pronoun_token(const std::string& pronoun);  // throws on unknown pronoun
const std::vector<std::string>& pronoun_names();
const std::vector<std::string>& category_names();
int noun_token(int category);
std::string token_name(int token);
int vocabulary_size();

struct TaskSpec {
  int id = 0;
  std::string name;
  std::vector<int> verb_tokens;
  std::vector<int> afforded_categories;
  std::array<double, kAttributeCount> prefer_weights{};

  bool affords(int category, const std::array<double, kAttributeCount>& attributes) const;
  double prefer(const std::array<double, kAttributeCount>& attributes) const;
};

// The task table; the first n entries are used for an n-task dataset.
const std::vector<TaskSpec>& task_table();

struct Sample {
  int scene_id = 0;  // unique within a dataset
  int task_id = 0;
  Scene scene;
  std::vector<int> gt;  // indices into scene.objects
  TaskDescription noun_description;
  TaskDescription pronoun_description;

  int n_gt() const { return static_cast<int>(gt.size()); }
  std::vector<int> gt_categories() const;  // distinct, ascending
};

struct GenerationParams {
  std::uint64_t seed = 0;
  int n_task = 5;
  int scenes_per_task = 500;
  int grid_h = 16;
  int grid_w = 16;
  int max_objects = 5;
  std::string pronoun = "something";
  double empty_fraction = 0.20;
  double multi_category_fraction = 0.15;

  void validate() const;
  bool operator==(const GenerationParams&) const = default;
};

struct Dataset {
  GenerationParams params;
  std::vector<Sample> samples;

  std::vector<const Sample*> of_task(int task) const;
};

// Deterministic generation; each scene is a pure function of
// (seed, task, index).
Dataset generate(const GenerationParams& params);
Sample generate_scene(const GenerationParams& params, int task, int index);

// Independent ground-truth derivation: affording objects with maximal
// preference (within kTieTolerance).
std::vector<int> derive_ground_truth(const TaskSpec& task, const std::vector<ObjectSpec>& objects);

TaskDescription pronoun_description(const TaskSpec& task, int pronoun_token);
TaskDescription noun_description(const TaskSpec& task, const std::vector<int>& categories);

// Copy with every verb-pronoun description switched to `pronoun`.
Dataset with_pronoun(const Dataset& data, const std::string& pronoun);

// Stratified by task and by empty/non-empty ground truth.
std::pair<Dataset, Dataset> split(const Dataset& data, double ratio, std::uint64_t seed);

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> serialize(const Dataset& data);
Dataset deserialize(const std::vector<std::uint8_t>& bytes);
void save(const Dataset& data, const std::filesystem::path& path);
Dataset load(const std::filesystem::path& path);

// JSON manifest: tasks, counts and generation parameters.
std::string manifest_json(const Dataset& data, const std::string& split_name);

inline constexpr std::uint32_t kDatasetVersion = 1;

}  // namespace toist::synth
