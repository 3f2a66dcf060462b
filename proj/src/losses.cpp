#include "toist/losses.hpp"

#include <stdexcept>

namespace toist::loss {

using ad::Mat;

GroundTruthSet GroundTruthSet::from_scene(const Scene& scene, const std::vector<int>& object_indices,
                                          const TaskDescription& desc) {
  GroundTruthSet gt;
  for (int i : object_indices) {
    const ObjectSpec& o = scene.objects.at(static_cast<std::size_t>(i));
    gt.boxes.push_back(o.box);
    gt.masks.push_back(o.mask);
  }
  gt.span_length = desc.length();
  return gt;
}

Eigen::MatrixXd GroundTruthSet::padded_span_distribution(int n_pred, int n_max) const {
  if (n_gt() > n_pred)
    throw std::invalid_argument("ground truth count " + std::to_string(n_gt()) + " exceeds n_pred " +
                                std::to_string(n_pred));
  if (span_length <= 0 || span_length >= n_max)
    throw std::invalid_argument("token span length " + std::to_string(span_length) +
                                " must lie in [1, n_max)");
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n_pred, n_max);
  for (int i = 0; i < n_pred; ++i) {
    if (i < n_gt())
      out.row(i).head(span_length).setConstant(1.0 / span_length);
    else
      out(i, n_max - 1) = 1.0;
  }
  return out;
}

Eigen::MatrixXd GroundTruthSet::box_matrix() const {
  Eigen::MatrixXd m(n_gt(), 4);
  for (int i = 0; i < n_gt(); ++i) m.row(i) << boxes[i].cx, boxes[i].cy, boxes[i].h, boxes[i].w;
  return m;
}

Eigen::MatrixXd GroundTruthSet::mask_matrix(int cells) const {
  Eigen::MatrixXd m(n_gt(), cells);
  for (int i = 0; i < n_gt(); ++i) {
    if (static_cast<int>(masks[i].cells.size()) != cells)
      throw std::invalid_argument("ground-truth mask has " + std::to_string(masks[i].cells.size()) +
                                  " cells, predictions have " + std::to_string(cells));
    for (int c = 0; c < cells; ++c) m(i, c) = masks[i].cells[static_cast<std::size_t>(c)];
  }
  return m;
}

void LossWeights::validate() const {
  for (double v : {l1, giou, dice, focal, token, align, focal_alpha, focal_gamma})
    if (v < 0) throw std::invalid_argument("loss weights must be non-negative");
  if (tau <= 0) throw std::invalid_argument("alignment temperature must be positive");
}

Eigen::MatrixXd matching_cost(const GroundTruthSet& gt, const Eigen::MatrixXd& pred_boxes,
                              const Eigen::MatrixXd& pred_logits) {
  const int n_pred = static_cast<int>(pred_boxes.rows());
  const int n_max = static_cast<int>(pred_logits.cols());
  const Eigen::MatrixXd span = gt.padded_span_distribution(n_pred, n_max);
  // Row-wise softmax of the predicted logits.
  Eigen::MatrixXd prob = (pred_logits.colwise() - pred_logits.rowwise().maxCoeff()).array().exp().matrix();
  prob.array().colwise() /= prob.rowwise().sum().array();
  Eigen::MatrixXd cost = Eigen::MatrixXd::Zero(n_pred, n_pred);
  for (int i = 0; i < gt.n_gt(); ++i)
    for (int j = 0; j < n_pred; ++j) {
      const geom::Box b = geom::box_from_row(Eigen::RowVector4d(pred_boxes.row(j)).data());
      cost(i, j) = geom::l1_distance(gt.boxes[i], b) + geom::giou_loss(gt.boxes[i], b) -
                   span.row(i).dot(prob.row(j));
    }
  return cost;
}

template <typename S>
Var<S> loss_dice(Var<S> mask_logits, Var<S> targets) {
  Var<S> p = ad::sigmoid(mask_logits);
  Var<S> num = ad::add_scalar(ad::scale(ad::sum(ad::mul(p, targets), 1), S(2)), S(1));
  Var<S> den = ad::add_scalar(ad::add(ad::sum(p, 1), ad::sum(targets, 1)), S(1));
  return ad::add_scalar(ad::scale(ad::div(num, den), S(-1)), S(1));
}

template <typename S>
Var<S> loss_focal(Var<S> mask_logits, Var<S> targets, S alpha, S gamma) {
  ad::Tape<S>& t = *mask_logits.tape;
  const Mat<S> m = targets.value();
  Var<S> mt = targets;
  Var<S> inv_m = t.constant(Mat<S>((S(1) - m.array()).matrix()));
  // log p_t and 1 - p_t, both without forming 1 - sigmoid explicitly.
  Var<S> log_pt = ad::add(ad::mul(mt, ad::log_sigmoid(mask_logits)),
                          ad::mul(inv_m, ad::log_sigmoid(ad::scale(mask_logits, S(-1)))));
  Var<S> one_minus_pt = ad::add(ad::mul(mt, ad::sigmoid(ad::scale(mask_logits, S(-1)))),
                                ad::mul(inv_m, ad::sigmoid(mask_logits)));
  Var<S> alpha_t = t.constant(Mat<S>((alpha * m.array() + (S(1) - alpha) * (S(1) - m.array())).matrix()));
  Var<S> per_cell = ad::mul(ad::mul(alpha_t, ad::pow(one_minus_pt, gamma)), log_pt);
  return ad::scale(ad::mean(per_cell, 1), S(-1));
}

template <typename S>
Var<S> loss_soft_token(Var<S> logits, Var<S> targets) {
  return ad::scale(ad::sum(ad::mul(targets, ad::log_softmax(logits)), 1), S(-1));
}

template <typename S>
Var<S> loss_contrastive_align(Var<S> object_embed, Var<S> text_embed, const std::vector<int>& matched, S tau) {
  ad::Tape<S>& t = *object_embed.tape;
  if (matched.empty()) return t.scalar(S(0));
  if (text_embed.rows() == 0) throw std::invalid_argument("contrastive align: matched objects but no tokens");
  const S inv_tau = S(1) / tau;
  std::vector<Index> rows(matched.begin(), matched.end());
  // object -> token: every token is a positive, so the inner mean is the
  // mean of -log_softmax over tokens.
  Var<S> obj = ad::gather_rows(object_embed, rows);
  Var<S> o2t = ad::log_softmax(ad::scale(ad::matmul_nt(obj, text_embed), inv_tau));
  Var<S> obj_term = ad::scale(ad::sum(o2t), S(-1) / S(text_embed.rows()));
  // token -> object: softmax over all predictions, positives are the matched ones.
  Var<S> t2o = ad::log_softmax(ad::scale(ad::matmul_nt(text_embed, object_embed), inv_tau));
  Mat<S> pos = Mat<S>::Zero(text_embed.rows(), object_embed.rows());
  for (int j : matched) pos.col(j).setConstant(S(1) / S(matched.size()));
  Var<S> tok_term = ad::scale(ad::sum(ad::mul(t.constant(std::move(pos)), t2o)), S(-1));
  return ad::scale(ad::add(obj_term, tok_term), S(0.5));
}

template <typename S>
LossTerms<S> block_loss(const GroundTruthSet& gt, const model::BlockOutput<S>& block, Var<S> text_embed,
                        const LossWeights& w) {
  ad::Tape<S>& t = *block.boxes.tape;
  const int n_pred = static_cast<int>(block.boxes.rows());
  const int n_max = static_cast<int>(block.logits.cols());
  const int n_gt = gt.n_gt();
  LossTerms<S> out;
  out.assignment = match::hungarian(
      matching_cost(gt, block.boxes.value().template cast<double>(), block.logits.value().template cast<double>()));
  const S norm = S(1) / S(std::max(n_gt, 1));
  std::vector<Index> pred_rows;
  std::vector<int> matched;
  for (int i = 0; i < n_gt; ++i) {
    pred_rows.push_back(out.assignment.col_of_row[static_cast<std::size_t>(i)]);
    matched.push_back(out.assignment.col_of_row[static_cast<std::size_t>(i)]);
  }
  if (n_gt > 0) {
    Var<S> pb = ad::gather_rows(block.boxes, pred_rows);
    Var<S> tb = t.constant(Mat<S>(gt.box_matrix().template cast<S>()));
    out.l1 = ad::scale(ad::sum(loss_l1(pb, tb)), norm);
    out.giou = ad::scale(ad::sum(loss_giou(pb, tb)), norm);
    Var<S> pm = ad::gather_rows(block.mask_logits, pred_rows);
    Var<S> tm = t.constant(Mat<S>(gt.mask_matrix(static_cast<int>(block.mask_logits.cols())).template cast<S>()));
    out.dice = ad::scale(ad::sum(loss_dice(pm, tm)), norm);
    out.focal = ad::scale(ad::sum(loss_focal(pm, tm, S(w.focal_alpha), S(w.focal_gamma))), norm);
    out.align = ad::scale(loss_contrastive_align(block.object_embed, text_embed, matched, S(w.tau)), norm);
  } else {
    out.l1 = out.giou = out.dice = out.focal = out.align = t.scalar(S(0));
  }
  // Token targets are laid out per prediction: matched predictions get their
  // object's span, the rest the no-object indicator.
  const Eigen::MatrixXd span = gt.padded_span_distribution(n_pred, n_max);
  Mat<S> target(n_pred, n_max);
  for (int i = 0; i < n_pred; ++i)
    target.row(out.assignment.col_of_row[static_cast<std::size_t>(i)]) = span.row(i).template cast<S>();
  out.token = ad::scale(ad::sum(loss_soft_token(block.logits, t.constant(std::move(target)))), norm);
  out.total = ad::add(
      ad::add(ad::add(ad::scale(out.l1, S(w.l1)), ad::scale(out.giou, S(w.giou))),
              ad::add(ad::scale(out.dice, S(w.dice)), ad::scale(out.focal, S(w.focal)))),
      ad::add(ad::scale(out.token, S(w.token)), ad::scale(out.align, S(w.align))));
  return out;
}

template <typename S>
LossBreakdown<S> loss_total(const GroundTruthSet& gt, const model::PredictionSet<S>& pred, const LossWeights& w,
                            bool include_aux) {
  if (pred.blocks.empty()) throw std::invalid_argument("loss_total: prediction set has no blocks");
  LossBreakdown<S> out;
  const std::size_t first = include_aux ? 0 : pred.blocks.size() - 1;
  for (std::size_t b = first; b < pred.blocks.size(); ++b)
    out.blocks.push_back(block_loss(gt, pred.blocks[b], pred.text_embed, w));
  out.total = out.blocks.front().total;
  for (std::size_t b = 1; b < out.blocks.size(); ++b) out.total = ad::add(out.total, out.blocks[b].total);
  return out;
}

#define TOIST_INSTANTIATE_LOSSES(S)                                                                     \
  template Var<S> loss_dice<S>(Var<S>, Var<S>);                                                         \
  template Var<S> loss_focal<S>(Var<S>, Var<S>, S, S);                                                  \
  template Var<S> loss_soft_token<S>(Var<S>, Var<S>);                                                   \
  template Var<S> loss_contrastive_align<S>(Var<S>, Var<S>, const std::vector<int>&, S);               \
  template LossTerms<S> block_loss<S>(const GroundTruthSet&, const model::BlockOutput<S>&, Var<S>,     \
                                      const LossWeights&);                                             \
  template LossBreakdown<S> loss_total<S>(const GroundTruthSet&, const model::PredictionSet<S>&,       \
                                          const LossWeights&, bool);

TOIST_INSTANTIATE_LOSSES(float)
TOIST_INSTANTIATE_LOSSES(double)

}  // namespace toist::loss
