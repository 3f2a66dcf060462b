#include "toist/distillation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "toist/geometry.hpp"

namespace toist::distill {

namespace {

std::vector<int> nearest(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centers) {
  std::vector<int> labels(static_cast<std::size_t>(points.rows()));
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centers.rows(); ++c) {
      const double d = (points.row(i) - centers.row(c)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    labels[static_cast<std::size_t>(i)] = best;
  }
  return labels;
}

}  // namespace

double inertia(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centers, const std::vector<int>& labels) {
  double j = 0;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    j += (points.row(i) - centers.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
  return j;
}

KMeansResult kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed, int max_iter, double rel_tol) {
  const Eigen::Index n = points.rows();
  if (k < 1 || k > n)
    throw std::invalid_argument("kmeans: k=" + std::to_string(k) + " with " + std::to_string(n) + " points");
  std::mt19937_64 rng(seed);
  KMeansResult out;
  out.centers.resize(k, points.cols());

  // k-means++ seeding.
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  out.centers.row(0) = points.row(first(rng));
  Eigen::VectorXd d2(n);
  for (Eigen::Index i = 0; i < n; ++i) d2(i) = (points.row(i) - out.centers.row(0)).squaredNorm();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0) {
      const double u = unit(rng) * total;
      double acc = 0;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2(i);
        if (u < acc && d2(i) > 0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = first(rng);
    }
    out.centers.row(c) = points.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) d2(i) = std::min(d2(i), (points.row(i) - out.centers.row(c)).squaredNorm());
  }

  for (int it = 0; it < max_iter; ++it) {
    out.labels = nearest(points, out.centers);
    const double j = inertia(points, out.centers, out.labels);
    out.inertia_history.push_back(j);
    out.iterations = it + 1;
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, points.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(out.labels[static_cast<std::size_t>(i)]) += points.row(i);
      ++counts[static_cast<std::size_t>(out.labels[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < k; ++c)
      if (counts[static_cast<std::size_t>(c)] > 0) out.centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
    if (it > 0) {
      const double prev = out.inertia_history[out.inertia_history.size() - 2];
      if (prev - j <= rel_tol * std::max(prev, std::numeric_limits<double>::min())) break;
    }
    if (j == 0) break;
  }
  return out;
}

const char* to_string(UpdatePolicy p) { return p == UpdatePolicy::kFifo ? "fifo" : "replace-closest"; }

UpdatePolicy parse_update_policy(const std::string& s) {
  if (s == "fifo") return UpdatePolicy::kFifo;
  if (s == "replace-closest") return UpdatePolicy::kReplaceClosest;
  throw std::invalid_argument("unknown memory update policy '" + s + "' (expected replace-closest or fifo)");
}

MemoryBank::MemoryBank(int n_task, int capacity, int dim, int k, UpdatePolicy policy, std::uint64_t seed)
    : capacity_(capacity), dim_(dim), k_(k), policy_(policy), seed_(seed) {
  if (n_task < 1 || capacity < 1 || dim < 1 || k < 1 || k > capacity)
    throw std::invalid_argument("memory bank needs n_task, capacity, dim, k >= 1 and k <= capacity");
  queues_.resize(static_cast<std::size_t>(n_task));
  updates_.assign(static_cast<std::size_t>(n_task), 0);
  cache_.resize(static_cast<std::size_t>(n_task));
}

void MemoryBank::check_task(int task) const {
  if (task < 0 || task >= n_task())
    throw std::out_of_range("memory bank: task " + std::to_string(task) + " out of range [0, " +
                            std::to_string(n_task()) + ")");
}

void MemoryBank::update(int task, const Eigen::RowVectorXd& feature) {
  check_task(task);
  if (frozen_) throw std::logic_error("memory bank is frozen");
  if (feature.size() != dim_)
    throw std::invalid_argument("memory bank: feature of length " + std::to_string(feature.size()) + ", expected " +
                                std::to_string(dim_));
  if (!feature.allFinite()) throw std::invalid_argument("memory bank: non-finite feature");
  auto& q = queues_[static_cast<std::size_t>(task)];
  if (static_cast<int>(q.size()) >= capacity_) {
    if (policy_ == UpdatePolicy::kFifo) {
      q.pop_front();
    } else {
      std::size_t victim = 0;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < q.size(); ++i) {
        const double d = (q[i] - feature).squaredNorm();
        if (d < best) {
          best = d;
          victim = i;
        }
      }
      q.erase(q.begin() + static_cast<std::ptrdiff_t>(victim));
    }
  }
  q.push_back(feature);
  ++updates_[static_cast<std::size_t>(task)];
  cache_[static_cast<std::size_t>(task)].reset();
}

const Eigen::MatrixXd& MemoryBank::prototypes(int task) const {
  check_task(task);
  if (!ready(task))
    throw std::logic_error("memory bank: task " + std::to_string(task) + " holds " + std::to_string(size(task)) +
                           " entries, fewer than k=" + std::to_string(k_));
  auto& slot = cache_[static_cast<std::size_t>(task)];
  if (!slot) slot = kmeans(entries(task), k_, seed_ + static_cast<std::uint64_t>(task)).centers;
  return *slot;
}

int MemoryBank::size(int task) const {
  check_task(task);
  return static_cast<int>(queues_[static_cast<std::size_t>(task)].size());
}

Eigen::MatrixXd MemoryBank::entries(int task) const {
  check_task(task);
  const auto& q = queues_[static_cast<std::size_t>(task)];
  Eigen::MatrixXd m(static_cast<Eigen::Index>(q.size()), dim_);
  for (std::size_t i = 0; i < q.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = q[i];
  return m;
}

std::uint64_t MemoryBank::updates(int task) const {
  check_task(task);
  return updates_[static_cast<std::size_t>(task)];
}

void MemoryBank::restore(int task, const Eigen::MatrixXd& entries, std::uint64_t updates) {
  check_task(task);
  if (entries.rows() > capacity_ || (entries.rows() > 0 && entries.cols() != dim_))
    throw std::invalid_argument("memory bank restore: bad entry matrix");
  auto& q = queues_[static_cast<std::size_t>(task)];
  q.clear();
  for (Eigen::Index i = 0; i < entries.rows(); ++i) q.push_back(entries.row(i));
  updates_[static_cast<std::size_t>(task)] = updates;
  cache_[static_cast<std::size_t>(task)].reset();
}

int select_prototype(const Eigen::MatrixXd& prototypes, const Eigen::RowVectorXd& query) {
  if (prototypes.rows() == 0) throw std::invalid_argument("select_prototype: no prototypes");
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < prototypes.rows(); ++i) {
    const double d = (prototypes.row(i) - query).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

double kl_binary(const model::BinaryProbs& t, const model::BinaryProbs& s) {
  const double tp = std::max(t.pos, kProbabilityFloor), tn = std::max(t.neg, kProbabilityFloor);
  const double sp = std::max(s.pos, kProbabilityFloor), sn = std::max(s.neg, kProbabilityFloor);
  return tp * (std::log(tp) - std::log(sp)) + tn * (std::log(tn) - std::log(sn));
}

match::Assignment ts_match(const Eigen::MatrixXd& teacher_boxes, const Eigen::MatrixXd& teacher_logits,
                           const Eigen::MatrixXd& student_boxes, const Eigen::MatrixXd& student_logits,
                           const TsMatchWeights& w) {
  const Eigen::Index n = teacher_boxes.rows();
  if (student_boxes.rows() != n || teacher_logits.rows() != n || student_logits.rows() != n)
    throw std::invalid_argument("ts_match: teacher and student must have the same number of queries");
  std::vector<model::BinaryProbs> tb, sb;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::RowVectorXd tl = teacher_logits.row(i), sl = student_logits.row(i);
    tb.push_back(model::binary_probs(std::span<const double>(tl.data(), static_cast<std::size_t>(tl.size()))));
    sb.push_back(model::binary_probs(std::span<const double>(sl.data(), static_cast<std::size_t>(sl.size()))));
  }
  Eigen::MatrixXd cost(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const geom::Box a = geom::box_from_row(Eigen::RowVector4d(teacher_boxes.row(i)).data());
    for (Eigen::Index j = 0; j < n; ++j) {
      const geom::Box b = geom::box_from_row(Eigen::RowVector4d(student_boxes.row(j)).data());
      cost(i, j) = w.l1 * geom::l1_distance(a, b) + w.giou * geom::giou_loss(a, b) +
                   w.kl * kl_binary(tb[static_cast<std::size_t>(i)], sb[static_cast<std::size_t>(j)]);
    }
  }
  return match::hungarian(cost);
}

template <typename S>
Var<S> soft_binary_target_loss(const Eigen::MatrixXd& teacher_logits, Var<S> student_logits,
                               const match::Assignment& assignment) {
  ad::Tape<S>& t = *student_logits.tape;
  const Eigen::Index n = teacher_logits.rows(), n_max = teacher_logits.cols();
  if (student_logits.cols() != n_max || assignment.size() != n)
    throw std::invalid_argument("soft_binary_target_loss: teacher/student/assignment sizes disagree");
  std::vector<Index> rows;
  ad::Mat<S> target(n, 2), log_target(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    rows.push_back(assignment.col_of_row[static_cast<std::size_t>(i)]);
    const Eigen::RowVectorXd tl = teacher_logits.row(i);
    const model::BinaryProbs p =
        model::binary_probs(std::span<const double>(tl.data(), static_cast<std::size_t>(tl.size())));
    const double tp = std::max(p.pos, kProbabilityFloor), tn = std::max(p.neg, kProbabilityFloor);
    target(i, 0) = S(tp);
    target(i, 1) = S(tn);
    log_target(i, 0) = S(std::log(tp));
    log_target(i, 1) = S(std::log(tn));
  }
  Var<S> x = ad::gather_rows(student_logits, rows);
  Var<S> lse = ad::logsumexp(x);
  Var<S> log_pos = ad::sub(ad::logsumexp(ad::slice_cols(x, 0, n_max - 1)), lse);
  Var<S> log_neg = ad::sub(ad::slice_cols(x, n_max - 1, 1), lse);
  Var<S> log_s = ad::concat_cols<S>({log_pos, log_neg});
  log_s = ad::maximum(log_s, t.constant(ad::Mat<S>::Constant(n, 2, S(std::log(kProbabilityFloor)))));
  Var<S> diff = ad::sub(t.constant(std::move(log_target)), log_s);
  return ad::sum(ad::mul(t.constant(std::move(target)), diff));
}

template Var<float> soft_binary_target_loss<float>(const Eigen::MatrixXd&, Var<float>, const match::Assignment&);
template Var<double> soft_binary_target_loss<double>(const Eigen::MatrixXd&, Var<double>, const match::Assignment&);

}  // namespace toist::distill
