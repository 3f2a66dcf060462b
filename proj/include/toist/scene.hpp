#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "toist/geometry.hpp"

namespace toist {

using FeatureGrid = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ObjectSpec {
  int category = 0;
  std::array<double, 4> attributes{};  // softness, height, hardness, size
  geom::Box box;
  geom::Mask mask;
  bool operator==(const ObjectSpec&) const = default;
};

// Feature grid (one row per cell, row-major over H x W) plus its objects.
struct Scene {
  int height = 0;
  int width = 0;
  FeatureGrid features;
  std::vector<ObjectSpec> objects;

  int cells() const { return height * width; }
  int feature_dim() const { return static_cast<int>(features.cols()); }
};

enum class DescriptionForm : std::uint8_t { kVerbNoun = 0, kVerbPronoun = 1, kEmpty = 2 };

const char* to_string(DescriptionForm form);

struct TaskDescription {
  std::vector<int> tokens;
  DescriptionForm form = DescriptionForm::kEmpty;
  std::vector<int> special_positions;  // noun or pronoun token indices
  int task_id = 0;

  int length() const { return static_cast<int>(tokens.size()); }
  // Throws std::invalid_argument when the form/position/length contract fails.
  void validate(int vocab_size, int max_length) const;
  bool operator==(const TaskDescription&) const = default;
};

}  // namespace toist
