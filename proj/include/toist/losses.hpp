#pragma once

#include <vector>

#include "toist/geometry.hpp"
#include "toist/matching.hpp"
#include "toist/model.hpp"
#include "toist/scene.hpp"
#include "toist/tensor.hpp"

namespace toist::loss {

using ad::Index;
using ad::Var;

struct GroundTruthSet {
  std::vector<geom::Box> boxes;
  std::vector<geom::Mask> masks;
  // Token span of every real object: uniform over positions [0, span_length).
  int span_length = 1;

  int n_gt() const { return static_cast<int>(boxes.size()); }

  static GroundTruthSet from_scene(const Scene& scene, const std::vector<int>& object_indices,
                                   const TaskDescription& desc);

  // n_pred x n_max targets after padding with no-object rows; real objects
  // occupy the first n_gt rows.
  Eigen::MatrixXd padded_span_distribution(int n_pred, int n_max) const;
  Eigen::MatrixXd box_matrix() const;                // n_gt x 4
  Eigen::MatrixXd mask_matrix(int cells) const;      // n_gt x cells
};

struct LossWeights {
  double l1 = 5, giou = 2, dice = 1, focal = 1, token = 1, align = 1;
  double focal_alpha = 0.25, focal_gamma = 2;
  double tau = 0.07;

  static LossWeights zeros() { return {0, 0, 0, 0, 0, 0, 0.25, 2, 0.07}; }
  void validate() const;
};

// Padded-ground-truth x prediction matching cost: L1 + GIoU + token-match
// (negative span-weighted softmax mass) on real rows, 0 on no-object rows.
Eigen::MatrixXd matching_cost(const GroundTruthSet& gt, const Eigen::MatrixXd& pred_boxes,
                              const Eigen::MatrixXd& pred_logits);

// Per-row losses; each returns a k x 1 column.
template <typename S>
Var<S> loss_l1(Var<S> pred_boxes, Var<S> target_boxes) { return geom::l1_rows(pred_boxes, target_boxes); }

template <typename S>
Var<S> loss_giou(Var<S> pred_boxes, Var<S> target_boxes) { return geom::giou_loss_rows(target_boxes, pred_boxes); }

// 1 - (2 sum(m * sigmoid(x)) + 1) / (sum(sigmoid(x)) + sum(m) + 1), per row.
template <typename S>
Var<S> loss_dice(Var<S> mask_logits, Var<S> targets);

// Mean over cells of -alpha_t (1 - p_t)^gamma log p_t, per row.
template <typename S>
Var<S> loss_focal(Var<S> mask_logits, Var<S> targets, S alpha, S gamma);

// Cross-entropy of each logit row against a target distribution row.
template <typename S>
Var<S> loss_soft_token(Var<S> logits, Var<S> targets);

// Symmetric InfoNCE between unit-norm object and token embeddings. Every
// matched object is positive for every token and vice versa; unmatched
// objects only appear in token->object denominators. Returns the half-sum
// of both directions, un-normalized.
template <typename S>
Var<S> loss_contrastive_align(Var<S> object_embed, Var<S> text_embed, const std::vector<int>& matched, S tau);

template <typename S>
struct LossTerms {
  Var<S> l1, giou, dice, focal, token, align;
  Var<S> total;
  match::Assignment assignment;
};

// One output block: Hungarian match, then the weighted sum. Per-object terms
// are divided by max(n_gt, 1).
template <typename S>
LossTerms<S> block_loss(const GroundTruthSet& gt, const model::BlockOutput<S>& block, Var<S> text_embed,
                        const LossWeights& w);

template <typename S>
struct LossBreakdown {
  std::vector<LossTerms<S>> blocks;  // final block last
  Var<S> total;
  const LossTerms<S>& final_terms() const { return blocks.back(); }
};

// Final-block loss, plus every auxiliary block (re-matched independently)
// when include_aux is set.
template <typename S>
LossBreakdown<S> loss_total(const GroundTruthSet& gt, const model::PredictionSet<S>& pred,
                            const LossWeights& w, bool include_aux);

}  // namespace toist::loss
