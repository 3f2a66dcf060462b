#include "toist/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace toist::geom {

namespace {
double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }
}  // namespace

Corners corners(const Box& b) {
  return {clamp01(b.cx - b.w / 2), clamp01(b.cy - b.h / 2), clamp01(b.cx + b.w / 2),
          clamp01(b.cy + b.h / 2)};
}

double area(const Box& b) {
  const Corners c = corners(b);
  return (c.x1 - c.x0) * (c.y1 - c.y0);
}

namespace {
double intersection(const Corners& a, const Corners& b) {
  const double iw = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double ih = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  return iw * ih;
}
}  // namespace

double box_iou(const Box& a, const Box& b) {
  const Corners ca = corners(a), cb = corners(b);
  const double inter = intersection(ca, cb);
  const double uni = area(a) + area(b) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double giou_loss(const Box& a, const Box& b) {
  const Corners ca = corners(a), cb = corners(b);
  const double inter = intersection(ca, cb);
  const double uni = area(a) + area(b) - inter;
  const double hull = (std::max(ca.x1, cb.x1) - std::min(ca.x0, cb.x0)) *
                      (std::max(ca.y1, cb.y1) - std::min(ca.y0, cb.y0));
  const double iou = uni > 0 ? inter / uni : 0.0;
  const double penalty = hull > 0 ? (hull - uni) / hull : 0.0;
  return 1.0 - (iou - penalty);
}

double l1_distance(const Box& a, const Box& b) {
  return std::abs(a.cx - b.cx) + std::abs(a.cy - b.cy) + std::abs(a.h - b.h) + std::abs(a.w - b.w);
}

int Mask::count() const { return std::accumulate(cells.begin(), cells.end(), 0); }

double mask_iou(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width)
    throw std::invalid_argument("mask_iou: grid " + std::to_string(a.height) + "x" +
                                std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                                std::to_string(b.width));
  int inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    inter += a.cells[i] && b.cells[i];
    uni += a.cells[i] || b.cells[i];
  }
  return uni > 0 ? double(inter) / double(uni) : 0.0;
}

Mask rasterize_box(const Box& b, int height, int width) {
  Mask m(height, width);
  const Corners c = corners(b);
  for (int r = 0; r < height; ++r) {
    const double y = (r + 0.5) / height;
    if (y < c.y0 || y >= c.y1) continue;
    for (int col = 0; col < width; ++col) {
      const double x = (col + 0.5) / width;
      if (x >= c.x0 && x < c.x1) m.at(r, col) = 1;
    }
  }
  return m;
}

Mask binarize_logits(std::span<const float> logits, int height, int width) {
  if (static_cast<int>(logits.size()) != height * width)
    throw std::invalid_argument("binarize_logits: " + std::to_string(logits.size()) +
                                " logits for a " + std::to_string(height) + "x" +
                                std::to_string(width) + " grid");
  Mask m(height, width);
  for (std::size_t i = 0; i < logits.size(); ++i) m.cells[i] = logits[i] > 0.0f;
  return m;
}

Box box_from_row(const double* row) { return {row[0], row[1], row[2], row[3]}; }

}  // namespace toist::geom
