#pragma once

// Shared generators and independent oracles for the test binaries.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "toist/evaluation.hpp"
#include "toist/geometry.hpp"
#include "toist/synthdata.hpp"
#include "toist/tensor.hpp"

namespace testing {

using toist::ad::Mat;
using toist::ad::Tape;
using toist::ad::Var;

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  double normal(double sd = 1.0) { return std::normal_distribution<double>(0.0, sd)(rng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  bool coin(double p = 0.5) { return uniform() < p; }

  Mat<double> matrix(int rows, int cols, double sd = 1.0) {
    Mat<double> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(sd);
    return m;
  }
  Eigen::MatrixXd integers(int rows, int cols, int lo, int hi) {
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = integer(lo, hi);
    return m;
  }
  // Box strictly inside the unit square.
  toist::geom::Box box(double min_extent = 0.05, double max_extent = 0.5) {
    toist::geom::Box b;
    b.h = uniform(min_extent, max_extent);
    b.w = uniform(min_extent, max_extent);
    b.cy = uniform(b.h / 2 + 0.01, 1 - b.h / 2 - 0.01);
    b.cx = uniform(b.w / 2 + 0.01, 1 - b.w / 2 - 0.01);
    return b;
  }
  toist::geom::Mask mask(int h, int w, double p = 0.3) {
    toist::geom::Mask m(h, w);
    for (auto& c : m.cells) c = coin(p) ? 1 : 0;
    return m;
  }
  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

inline Mat<double> box_rows(const std::vector<toist::geom::Box>& boxes) {
  Mat<double> m(static_cast<Eigen::Index>(boxes.size()), 4);
  for (std::size_t i = 0; i < boxes.size(); ++i) m.row(static_cast<Eigen::Index>(i)) << boxes[i].cx, boxes[i].cy, boxes[i].h, boxes[i].w;
  return m;
}

// Five-point central differences over every entry of every input; returns
// the largest |analytic - numeric| / max(|analytic|, |numeric|, floor).
using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct FdResult {
  double max_rel = 0.0;
  bool finite = true;
};

inline FdResult central_difference(std::vector<Mat<double>> inputs, const ScalarFn& f, double h = 1e-4,
                                   double floor = 1e-6) {
  std::vector<Mat<double>> analytic;
  {
    Tape<double> t;
    std::vector<Var<double>> vars;
    for (const auto& m : inputs) vars.push_back(t.variable(toist::ad::Tensor<double>::matrix(m)));
    t.backward(f(t, vars));
    for (const auto& v : vars) analytic.push_back(v.grad());
  }
  auto value = [&]() {
    Tape<double> t;
    std::vector<Var<double>> vars;
    for (const auto& m : inputs) vars.push_back(t.constant(m));
    return f(t, vars).item();
  };
  FdResult r;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      double& x = inputs[k].data()[i];
      const double saved = x;
      auto at = [&](double dx) {
        x = saved + dx;
        return value();
      };
      const double numeric = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
      x = saved;
      const double a = analytic[k].data()[i];
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        r.finite = false;
        continue;
      }
      r.max_rel = std::max(r.max_rel, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor}));
    }
  return r;
}

// Exhaustive assignment: minimum cost and the lexicographically smallest
// permutation attaining it.
struct BruteAssignment {
  double cost = std::numeric_limits<double>::infinity();
  std::vector<int> perm;
};

inline BruteAssignment brute_force_assignment(const Eigen::MatrixXd& c) {
  const int n = static_cast<int>(c.rows());
  std::vector<int> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  BruteAssignment best;
  do {
    double s = 0;
    for (int i = 0; i < n; ++i) s += c(i, p[static_cast<std::size_t>(i)]);
    if (s < best.cost) {
      best.cost = s;
      best.perm = p;
    }
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

// Brute-force AP: for every prefix of the ranked list, recompute the true
// positive count from scratch, then sum precision times the recall step.
inline double brute_force_ap(std::vector<toist::eval::Detection> dets,
                             const std::map<int, std::vector<toist::eval::GroundTruth>>& gt,
                             toist::eval::IouKind kind) {
  int n_gt = 0;
  for (const auto& [id, g] : gt) n_gt += static_cast<int>(g.size());
  if (n_gt == 0) return 0.0;
  std::sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.scene_id != b.scene_id) return a.scene_id < b.scene_id;
    return a.query < b.query;
  });
  auto iou = [&](const toist::eval::Detection& d, const toist::eval::GroundTruth& g) {
    return kind == toist::eval::IouKind::kBox ? toist::geom::box_iou(d.box, g.box) : toist::geom::mask_iou(d.mask, g.mask);
  };
  auto true_positives = [&](std::size_t prefix) {
    std::map<int, std::vector<bool>> used;
    int tp = 0;
    for (std::size_t k = 0; k < prefix; ++k) {
      auto it = gt.find(dets[k].scene_id);
      if (it == gt.end()) continue;
      auto& u = used[dets[k].scene_id];
      u.resize(it->second.size(), false);
      int best = -1;
      double best_iou = -1;
      for (std::size_t g = 0; g < it->second.size(); ++g) {
        if (u[g]) continue;
        const double v = iou(dets[k], it->second[g]);
        if (v > best_iou) {
          best_iou = v;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0 && best_iou >= 0.5) {
        u[static_cast<std::size_t>(best)] = true;
        ++tp;
      }
    }
    return tp;
  };
  double ap = 0;
  int prev_tp = 0;
  for (std::size_t k = 1; k <= dets.size(); ++k) {
    const int tp = true_positives(k);
    ap += (static_cast<double>(tp) / k) * (static_cast<double>(tp - prev_tp) / n_gt);
    prev_tp = tp;
  }
  return ap;
}

// Ground truth recomputed from the task table: affording objects whose
// preference is within tolerance of the best affording object.
inline std::vector<int> oracle_ground_truth(const toist::synth::TaskSpec& task,
                                            const std::vector<toist::ObjectSpec>& objects) {
  auto affords = [&](const toist::ObjectSpec& o) {
    for (int c : task.afforded_categories)
      if (c == o.category) return true;
    return false;
  };
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& o : objects)
    if (affords(o)) {
      double s = 0;
      for (int a = 0; a < toist::synth::kAttributeCount; ++a)
        s += task.prefer_weights[static_cast<std::size_t>(a)] * o.attributes[static_cast<std::size_t>(a)];
      best = std::max(best, s);
    }
  std::vector<int> out;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const auto& o = objects[i];
    if (!affords(o)) continue;
    double s = 0;
    for (int a = 0; a < toist::synth::kAttributeCount; ++a)
      s += task.prefer_weights[static_cast<std::size_t>(a)] * o.attributes[static_cast<std::size_t>(a)];
    if (s >= best - toist::synth::kTieTolerance) out.push_back(static_cast<int>(i));
  }
  return out;
}

// IoU by counting centers of an n x n raster of the unit square.
inline double raster_box_iou(const toist::geom::Box& a, const toist::geom::Box& b, int n) {
  auto inside = [](const toist::geom::Box& x, double px, double py) {
    return std::abs(px - x.cx) < x.w / 2 && std::abs(py - x.cy) < x.h / 2;
  };
  long inter = 0, uni = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double px = (j + 0.5) / n, py = (i + 0.5) / n;
      const bool ia = inside(a, px, py), ib = inside(b, px, py);
      inter += ia && ib;
      uni += ia || ib;
    }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace testing
