#pragma once

#include <cstdint>
#include <vector>

#include "toist/tensor.hpp"

namespace toist::geom {

// Normalized box: center x/y, height, width, all in [0,1]. Tensor rows use
// the same column order (cx, cy, h, w).
struct Box {
  double cx = 0, cy = 0, h = 0, w = 0;
};

struct Corners {
  double x0, y0, x1, y1;
};

// Corners clamped to the unit square.
Corners corners(const Box& b);
double area(const Box& b);

double box_iou(const Box& a, const Box& b);

// 1 - GIoU; in [0,2].
double giou_loss(const Box& a, const Box& b);

double l1_distance(const Box& a, const Box& b);

// Binary cell mask on an H x W grid, row-major.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> cells;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), cells(static_cast<std::size_t>(h * w), 0) {}
  std::uint8_t& at(int r, int c) { return cells[static_cast<std::size_t>(r * width + c)]; }
  std::uint8_t at(int r, int c) const { return cells[static_cast<std::size_t>(r * width + c)]; }
  int count() const;
  bool operator==(const Mask&) const = default;
};

double mask_iou(const Mask& a, const Mask& b);

// Cells whose centers fall inside the box.
Mask rasterize_box(const Box& b, int height, int width);

// sigmoid(logit) > 0.5, i.e. logit > 0.
Mask binarize_logits(std::span<const float> logits, int height, int width);

Box box_from_row(const double* row);

// Differentiable per-row box terms over n x 4 (cx, cy, h, w) tensors;
// each returns an n x 1 column.

template <typename S>
ad::Var<S> l1_rows(ad::Var<S> pred, ad::Var<S> target) {
  return ad::sum(ad::abs(ad::sub(pred, target)), 1);
}

template <typename S>
ad::Var<S> giou_loss_rows(ad::Var<S> a, ad::Var<S> b) {
  using namespace ad;
  auto corner = [](Var<S> box, Index center, Index extent, S sign) {
    Var<S> c = slice_cols(box, center, 1);
    Var<S> e = slice_cols(box, extent, 1);
    return clamp(add(c, scale(e, sign * S(0.5))), S(0), S(1));
  };
  // column order: cx=0, cy=1, h=2, w=3
  Var<S> ax0 = corner(a, 0, 3, S(-1)), ax1 = corner(a, 0, 3, S(1));
  Var<S> ay0 = corner(a, 1, 2, S(-1)), ay1 = corner(a, 1, 2, S(1));
  Var<S> bx0 = corner(b, 0, 3, S(-1)), bx1 = corner(b, 0, 3, S(1));
  Var<S> by0 = corner(b, 1, 2, S(-1)), by1 = corner(b, 1, 2, S(1));
  Var<S> area_a = mul(sub(ax1, ax0), sub(ay1, ay0));
  Var<S> area_b = mul(sub(bx1, bx0), sub(by1, by0));
  Var<S> iw = relu(sub(minimum(ax1, bx1), maximum(ax0, bx0)));
  Var<S> ih = relu(sub(minimum(ay1, by1), maximum(ay0, by0)));
  Var<S> inter = mul(iw, ih);
  Var<S> uni = sub(add(area_a, area_b), inter);
  Var<S> hull = mul(sub(maximum(ax1, bx1), minimum(ax0, bx0)), sub(maximum(ay1, by1), minimum(ay0, by0)));
  const S eps = S(1e-12);
  Var<S> iou = div(inter, add_scalar(uni, eps));
  Var<S> penalty = div(sub(hull, uni), add_scalar(hull, eps));
  return add_scalar(sub(penalty, iou), S(1));
}

}  // namespace toist::geom
