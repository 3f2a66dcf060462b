#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

// Dense row-major tensors with a tape-based reverse-mode autodiff.
//
// Storage is always a row-major Eigen matrix: rows = product of all leading
// extents, cols = last extent. A scalar is a 1x1 matrix with shape {1}.

namespace toist::ad {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Index numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

inline void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("empty shape");
  for (Index e : shape)
    if (e <= 0) throw ShapeError("non-positive extent in shape " + to_string(shape));
}

inline Index storage_cols(const Shape& shape) { return shape.back(); }
inline Index storage_rows(const Shape& shape) { return numel(shape) / shape.back(); }

template <typename Scalar>
struct Tensor {
  Shape shape{1};
  Mat<Scalar> data = Mat<Scalar>::Zero(1, 1);

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)) {
    check_shape(shape);
    data = Mat<Scalar>::Zero(storage_rows(shape), storage_cols(shape));
  }
  Tensor(Shape s, Mat<Scalar> m) : shape(std::move(s)), data(std::move(m)) {
    check_shape(shape);
    if (data.rows() != storage_rows(shape) || data.cols() != storage_cols(shape))
      throw ShapeError("tensor data " + std::to_string(data.rows()) + "x" +
                       std::to_string(data.cols()) + " does not fit shape " + to_string(shape));
  }
  Tensor(Shape s, std::initializer_list<Scalar> values) : Tensor(std::move(s)) {
    if (static_cast<Index>(values.size()) != size())
      throw ShapeError("initializer of length " + std::to_string(values.size()) +
                       " does not fit shape " + to_string(shape));
    std::copy(values.begin(), values.end(), data.data());
  }
  static Tensor matrix(Mat<Scalar> m) {
    Shape s{m.rows(), m.cols()};
    return Tensor(std::move(s), std::move(m));
  }

  Index size() const { return data.size(); }
  Index rows() const { return data.rows(); }
  Index cols() const { return data.cols(); }
  std::span<Scalar> flat() { return {data.data(), static_cast<std::size_t>(data.size())}; }
  std::span<const Scalar> flat() const {
    return {data.data(), static_cast<std::size_t>(data.size())};
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape, data.template cast<Other>());
  }
};

template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  Mat<Scalar> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<Scalar> v) : name(std::move(n)), value(std::move(v)) {
    zero_grad();
  }
  void zero_grad() { grad = Mat<Scalar>::Zero(value.rows(), value.cols()); }
};

template <typename Scalar>
class Tape;

// Handle to a value recorded on a tape.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  Index id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Shape& shape() const { return tape->node(id).shape; }
  const Mat<Scalar>& value() const { return tape->node(id).value; }
  const Mat<Scalar>& grad() const { return tape->grad(id); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Index size() const { return value().size(); }
  Scalar item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar " + to_string(shape()));
    return value()(0, 0);
  }
  Tensor<Scalar> tensor() const { return Tensor<Scalar>(shape(), value()); }
};

template <typename Scalar>
class Tape {
 public:
  using Backward = std::function<void(Tape&, Index)>;

  struct Node {
    Shape shape;
    Mat<Scalar> value;
    Mat<Scalar> grad;
    bool requires_grad = false;
    bool leaf = false;
    Parameter<Scalar>* param = nullptr;
    Backward backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Reject non-finite op outputs as they are recorded.
  bool check_finite = false;

  Var<Scalar> constant(const Tensor<Scalar>& t) { return push(t.shape, t.data, false, {}); }
  Var<Scalar> constant(Mat<Scalar> m) {
    Shape s{m.rows(), m.cols()};
    return push(std::move(s), std::move(m), false, {});
  }
  Var<Scalar> scalar(Scalar v) { return push(Shape{1}, Mat<Scalar>::Constant(1, 1, v), false, {}); }

  Var<Scalar> variable(const Tensor<Scalar>& t) {
    Var<Scalar> v = push(t.shape, t.data, true, {});
    nodes_[v.id].leaf = true;
    return v;
  }

  // Leaf bound to a parameter: backward() adds its gradient into p.grad.
  Var<Scalar> parameter(Parameter<Scalar>& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return {this, it->second};
    Var<Scalar> v = push(p.value.shape, p.value.data, true, {});
    nodes_[v.id].leaf = true;
    nodes_[v.id].param = &p;
    bound_.emplace(&p, v.id);
    return v;
  }

  Var<Scalar> record(Shape shape, Mat<Scalar> value, bool requires_grad, Backward backward) {
    if (check_finite && !value.allFinite())
      throw NumericError("non-finite value produced by op with output shape " + to_string(shape));
    return push(std::move(shape), std::move(value), requires_grad,
                requires_grad ? std::move(backward) : Backward{});
  }

  void backward(Var<Scalar> root) {
    if (root.tape != this) throw std::invalid_argument("backward: root belongs to another tape");
    const Node& r = nodes_.at(static_cast<std::size_t>(root.id));
    if (r.value.size() != 1)
      throw ShapeError("backward: root must be scalar, got shape " + to_string(r.shape));
    for (Node& n : nodes_)
      if (!n.leaf || n.param) n.grad.resize(0, 0);
    if (!r.requires_grad) return;
    grad_ref(root.id)(0, 0) += Scalar(1);
    for (Index i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) n.param->grad += n.grad;
    }
  }

  const Node& node(Index id) const { return nodes_[static_cast<std::size_t>(id)]; }
  bool requires_grad(Index id) const { return node(id).requires_grad; }

  const Mat<Scalar>& grad(Index id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad = Mat<Scalar>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // Gradient accumulator of node `id`, allocated on first use.
  Mat<Scalar>& grad_ref(Index id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad = Mat<Scalar>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }
  const Mat<Scalar>& value(Index id) const { return node(id).value; }

  std::size_t size() const { return nodes_.size(); }

 private:
  Var<Scalar> push(Shape shape, Mat<Scalar> value, bool requires_grad, Backward backward) {
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, static_cast<Index>(nodes_.size()) - 1};
  }

  std::deque<Node> nodes_;  // stable references while recording
  std::unordered_map<const Parameter<Scalar>*, Index> bound_;
};

}  // namespace toist::ad

#include "toist/ops.hpp"
