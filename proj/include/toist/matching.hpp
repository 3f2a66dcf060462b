#pragma once

#include <vector>

#include <Eigen/Dense>

namespace toist::match {

// Row -> column bijection and its total cost.
struct Assignment {
  std::vector<int> col_of_row;
  double cost = 0.0;

  int size() const { return static_cast<int>(col_of_row.size()); }
  std::vector<int> row_of_col() const;
};

// Minimum-cost perfect assignment on a square matrix (O(n^3) shortest
// augmenting paths). Among all optimal assignments the lexicographically
// smallest col_of_row is returned, i.e. ties go to the lowest row index
// first, then the lowest column index. Throws on non-square or non-finite
// input.
Assignment hungarian(const Eigen::MatrixXd& cost);

// Pads a rectangular matrix to square with `sentinel`.
Eigen::MatrixXd pad_square(const Eigen::MatrixXd& cost, double sentinel);

double assignment_cost(const Eigen::MatrixXd& cost, const std::vector<int>& col_of_row);

}  // namespace toist::match
