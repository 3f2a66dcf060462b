#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "toist/matching.hpp"
#include "toist/model.hpp"
#include "toist/tensor.hpp"

namespace toist::distill {

using ad::Index;
using ad::Var;

struct KMeansResult {
  Eigen::MatrixXd centers;               // k x d
  std::vector<int> labels;               // one per point
  std::vector<double> inertia_history;   // after every assignment step
  int iterations = 0;

  double inertia() const { return inertia_history.empty() ? 0.0 : inertia_history.back(); }
};

// Lloyd iterations from a k-means++ seeding. Stops after max_iter
// iterations or when the relative inertia change drops below rel_tol.
// Empty clusters keep their previous center. Throws when k exceeds the
// number of points.
KMeansResult kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed, int max_iter = 100,
                    double rel_tol = 1e-6);

double inertia(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centers, const std::vector<int>& labels);

enum class UpdatePolicy : std::uint8_t { kReplaceClosest, kFifo };

const char* to_string(UpdatePolicy p);
UpdatePolicy parse_update_policy(const std::string& s);

// Per-task queues of noun features. Prototypes are recomputed lazily and
// cached until the queue changes.
class MemoryBank {
 public:
  MemoryBank() = default;
  MemoryBank(int n_task, int capacity, int dim, int k, UpdatePolicy policy, std::uint64_t seed);

  // Append; once the queue is full, first evicts the oldest entry (fifo) or
  // the stored entry nearest to `feature` (replace-closest, lowest index on
  // ties).
  void update(int task, const Eigen::RowVectorXd& feature);

  // k x dim cluster centers for the task; throws while the queue holds fewer
  // than k entries.
  const Eigen::MatrixXd& prototypes(int task) const;

  bool ready(int task) const { return size(task) >= k_; }
  int size(int task) const;
  Eigen::MatrixXd entries(int task) const;  // oldest first
  std::uint64_t updates(int task) const;    // lifetime update count

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  int n_task() const { return static_cast<int>(queues_.size()); }
  int capacity() const { return capacity_; }
  int dim() const { return dim_; }
  int k() const { return k_; }
  UpdatePolicy policy() const { return policy_; }
  std::uint64_t seed() const { return seed_; }

  // Serialization support: replaces a queue wholesale.
  void restore(int task, const Eigen::MatrixXd& entries, std::uint64_t updates);

 private:
  void check_task(int task) const;

  int capacity_ = 0, dim_ = 0, k_ = 0;
  UpdatePolicy policy_ = UpdatePolicy::kReplaceClosest;
  std::uint64_t seed_ = 0;
  bool frozen_ = false;
  std::vector<std::deque<Eigen::RowVectorXd>> queues_;
  std::vector<std::uint64_t> updates_;
  mutable std::vector<std::optional<Eigen::MatrixXd>> cache_;
};

// Index of the nearest prototype (Euclidean), lowest index on ties.
int select_prototype(const Eigen::MatrixXd& prototypes, const Eigen::RowVectorXd& query);

// Euclidean distance between the pronoun feature and a fixed prototype.
template <typename S>
Var<S> cluster_loss(Var<S> pronoun_feature, const Eigen::RowVectorXd& prototype) {
  ad::Tape<S>& t = *pronoun_feature.tape;
  return ad::l2_norm(ad::sub(pronoun_feature, t.constant(ad::Mat<S>(prototype.cast<S>()))));
}

inline constexpr double kProbabilityFloor = 1e-12;

// KL between binary distributions, probabilities clamped to kProbabilityFloor.
double kl_binary(const model::BinaryProbs& teacher, const model::BinaryProbs& student);

struct TsMatchWeights {
  double l1 = 5, giou = 2, kl = 1;
};

// Teacher query i -> student query col_of_row[i], minimizing
// w.l1 * L1 + w.giou * GIoU + w.kl * KL(teacher || student).
match::Assignment ts_match(const Eigen::MatrixXd& teacher_boxes, const Eigen::MatrixXd& teacher_logits,
                           const Eigen::MatrixXd& student_boxes, const Eigen::MatrixXd& student_logits,
                           const TsMatchWeights& w = {});

// Sum over matched pairs of KL(teacher binary || student binary); the
// teacher side is a constant.
template <typename S>
Var<S> soft_binary_target_loss(const Eigen::MatrixXd& teacher_logits, Var<S> student_logits,
                               const match::Assignment& assignment);

}  // namespace toist::distill
