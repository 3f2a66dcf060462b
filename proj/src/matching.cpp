#include "toist/matching.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace toist::match {

std::vector<int> Assignment::row_of_col() const {
  std::vector<int> out(col_of_row.size(), -1);
  for (std::size_t r = 0; r < col_of_row.size(); ++r) out[static_cast<std::size_t>(col_of_row[r])] = static_cast<int>(r);
  return out;
}

double assignment_cost(const Eigen::MatrixXd& cost, const std::vector<int>& col_of_row) {
  double total = 0.0;
  for (std::size_t r = 0; r < col_of_row.size(); ++r) total += cost(static_cast<Eigen::Index>(r), col_of_row[r]);
  return total;
}

Eigen::MatrixXd pad_square(const Eigen::MatrixXd& cost, double sentinel) {
  const Eigen::Index n = std::max(cost.rows(), cost.cols());
  Eigen::MatrixXd out = Eigen::MatrixXd::Constant(n, n, sentinel);
  out.topLeftCorner(cost.rows(), cost.cols()) = cost;
  return out;
}

namespace {

// Augmenting path from `start` (a row without a column) to `target` (a free
// column) using only tight edges and rows that are not fixed.
bool augment(int start, int target, int banned_col, const std::vector<std::vector<int>>& tight,
             const std::vector<char>& fixed, std::vector<int>& col_of_row, std::vector<int>& row_of_col) {
  const int n = static_cast<int>(tight.size());
  std::vector<int> parent_row(static_cast<std::size_t>(n), -1);  // column -> row that reached it
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  std::vector<int> queue{start};
  for (std::size_t qi = 0; qi < queue.size(); ++qi) {
    const int r = queue[qi];
    for (int c : tight[static_cast<std::size_t>(r)]) {
      if (c == banned_col || seen[static_cast<std::size_t>(c)]) continue;
      const int owner = row_of_col[static_cast<std::size_t>(c)];
      if (c != target && (owner < 0 || fixed[static_cast<std::size_t>(owner)])) continue;
      seen[static_cast<std::size_t>(c)] = 1;
      parent_row[static_cast<std::size_t>(c)] = r;
      if (c == target) {
        // Flip the alternating path back to `start`.
        int col = c;
        while (true) {
          const int row = parent_row[static_cast<std::size_t>(col)];
          const int prev = col_of_row[static_cast<std::size_t>(row)];
          col_of_row[static_cast<std::size_t>(row)] = col;
          row_of_col[static_cast<std::size_t>(col)] = row;
          if (row == start) return true;
          col = prev;
        }
      }
      queue.push_back(owner);
    }
  }
  return false;
}

}  // namespace

Assignment hungarian(const Eigen::MatrixXd& cost) {
  if (cost.rows() != cost.cols())
    throw std::invalid_argument("hungarian: cost matrix is " + std::to_string(cost.rows()) + "x" +
                                std::to_string(cost.cols()) + ", expected square");
  for (Eigen::Index i = 0; i < cost.size(); ++i) {
    const double v = cost.data()[i];
    if (std::isnan(v)) throw std::invalid_argument("hungarian: NaN cost");
    if (!std::isfinite(v)) throw std::invalid_argument("hungarian: non-finite cost");
  }
  const int n = static_cast<int>(cost.rows());
  Assignment out;
  if (n == 0) return out;

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<int> col_of_row(static_cast<std::size_t>(n)), row_of_col(static_cast<std::size_t>(n));
  for (int j = 1; j <= n; ++j) {
    col_of_row[static_cast<std::size_t>(p[j] - 1)] = j - 1;
    row_of_col[static_cast<std::size_t>(j - 1)] = p[j] - 1;
  }

  // Every optimal assignment uses only zero-reduced-cost edges of the optimal
  // duals, so the lexicographic minimum is searched within that graph.
  const double tol = 1e-9 * (1.0 + cost.cwiseAbs().maxCoeff()) * n;
  std::vector<std::vector<int>> tight(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c)
      if (c == col_of_row[static_cast<std::size_t>(r)] || cost(r, c) - u[r + 1] - v[c + 1] <= tol)
        tight[static_cast<std::size_t>(r)].push_back(c);

  std::vector<char> fixed(static_cast<std::size_t>(n), 0);
  for (int r = 0; r < n; ++r) {
    for (int c : tight[static_cast<std::size_t>(r)]) {
      const int current = col_of_row[static_cast<std::size_t>(r)];
      if (c >= current) break;
      const int other = row_of_col[static_cast<std::size_t>(c)];
      if (fixed[static_cast<std::size_t>(other)]) continue;
      // Tentatively give c to r; `other` must then reach r's old column.
      std::vector<int> cor = col_of_row, roc = row_of_col;
      cor[static_cast<std::size_t>(r)] = c;
      roc[static_cast<std::size_t>(c)] = r;
      roc[static_cast<std::size_t>(current)] = -1;
      cor[static_cast<std::size_t>(other)] = -1;
      fixed[static_cast<std::size_t>(r)] = 1;
      if (augment(other, current, c, tight, fixed, cor, roc)) {
        col_of_row = std::move(cor);
        row_of_col = std::move(roc);
        break;
      }
      fixed[static_cast<std::size_t>(r)] = 0;
    }
    fixed[static_cast<std::size_t>(r)] = 1;
  }

  out.col_of_row = std::move(col_of_row);
  out.cost = assignment_cost(cost, out.col_of_row);
  return out;
}

}  // namespace toist::match
