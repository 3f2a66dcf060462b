#include <doctest.h>

#include "support.hpp"
#include "toist/gradcheck.hpp"

using namespace toist::ad;
using testing::central_difference;
using testing::Gen;

namespace {

Mat<double> mat(std::initializer_list<std::initializer_list<double>> rows) {
  Mat<double> m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index i = 0;
  for (auto r : rows) {
    Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

}  // namespace

TEST_CASE("forward values of basic ops") {
  Tape<double> t;
  auto a = t.constant(mat({{1, 2}, {3, 4}}));
  auto eye = t.constant(Mat<double>(Mat<double>::Identity(2, 2)));
  CHECK(matmul(a, eye).value() == a.value());

  auto z = t.constant(mat({{0, 0, 0}}));
  auto s = softmax(z);
  for (Index j = 0; j < 3; ++j) CHECK(s.value()(0, j) == doctest::Approx(1.0 / 3));
  CHECK(sigmoid(t.scalar(0.0)).item() == 0.5);
}

TEST_CASE("analytic gradients of reductions") {
  Tape<double> t;
  auto x = t.variable(Tensor<double>(Shape{3}, {1, 2, 3}));
  t.backward(sum(mul(x, x)));
  CHECK(x.grad()(0, 0) == 2);
  CHECK(x.grad()(0, 1) == 4);
  CHECK(x.grad()(0, 2) == 6);

  Tape<double> t2;
  auto y = t2.variable(Tensor<double>(Shape{4}, {5, -1, 2, 0}));
  t2.backward(mean(y));
  for (Index j = 0; j < 4; ++j) CHECK(y.grad()(0, j) == 0.25);
}

TEST_CASE("layer norm gradient matches central differences") {
  Gen g(11);
  for (int trial = 0; trial < 10; ++trial) {
    auto r = central_difference({g.matrix(1, 8), g.matrix(1, 8), g.matrix(1, 8)},
                                [](Tape<double>& t, const std::vector<Var<double>>& v) {
                                  Var<double> w = t.constant(Mat<double>(Eigen::RowVectorXd::LinSpaced(8, -1, 2)));
                                  return sum(mul(layer_norm(v[0], v[1], v[2]), w));
                                }, 1e-5);
    CHECK(r.finite);
    CHECK(r.max_rel < 1e-5);
  }
}

TEST_CASE("every op family matches central differences") {
  Gen g(12);
  using V = const std::vector<Var<double>>&;
  struct Case {
    const char* name;
    std::vector<std::pair<int, int>> shapes;
    std::function<Var<double>(Tape<double>&, V)> f;
  };
  auto weigh = [](Tape<double>& t, Var<double> y) {
    // Fixed non-uniform weights so every output entry matters.
    Mat<double> w(y.rows(), y.cols());
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = std::sin(1.0 + 0.7 * static_cast<double>(i));
    return sum(mul(y, t.constant(w)));
  };
  const std::vector<Case> cases = {
      {"add broadcast", {{3, 4}, {1, 4}}, [&](Tape<double>& t, V v) { return weigh(t, add(v[0], v[1])); }},
      {"sub broadcast", {{3, 4}, {3, 1}}, [&](Tape<double>& t, V v) { return weigh(t, sub(v[0], v[1])); }},
      {"mul", {{3, 4}, {3, 4}}, [&](Tape<double>& t, V v) { return weigh(t, mul(v[0], v[1])); }},
      {"div", {{3, 4}, {1, 1}}, [&](Tape<double>& t, V v) { return weigh(t, div(v[0], add_scalar(square(v[1]), 1.0))); }},
      {"exp log sqrt", {{2, 3}}, [&](Tape<double>& t, V v) { return weigh(t, log(add_scalar(sqrt(add_scalar(exp(v[0]), 0.5)), 0.1))); }},
      {"tanh gelu", {{2, 5}}, [&](Tape<double>& t, V v) { return weigh(t, add(tanh(v[0]), gelu(v[0]))); }},
      {"sigmoid log_sigmoid", {{2, 5}}, [&](Tape<double>& t, V v) { return weigh(t, add(sigmoid(v[0]), log_sigmoid(v[0]))); }},
      {"pow", {{2, 3}}, [&](Tape<double>& t, V v) { return weigh(t, pow(add_scalar(square(v[0]), 0.5), 1.7)); }},
      {"softmax", {{3, 5}}, [&](Tape<double>& t, V v) { return weigh(t, softmax(v[0])); }},
      {"log_softmax", {{3, 5}}, [&](Tape<double>& t, V v) { return weigh(t, log_softmax(v[0])); }},
      {"logsumexp", {{3, 5}}, [&](Tape<double>& t, V v) { return weigh(t, logsumexp(v[0])); }},
      {"matmul", {{3, 4}, {4, 2}}, [&](Tape<double>& t, V v) { return weigh(t, matmul(v[0], v[1])); }},
      {"matmul_nt", {{3, 4}, {5, 4}}, [&](Tape<double>& t, V v) { return weigh(t, matmul_nt(v[0], v[1])); }},
      {"transpose reshape", {{3, 4}}, [&](Tape<double>& t, V v) { return weigh(t, reshape(transpose(v[0]), Shape{2, 6})); }},
      {"concat", {{2, 3}, {1, 3}, {2, 2}}, [&](Tape<double>& t, V v) {
         return add(weigh(t, concat_rows<double>({v[0], v[1]})), weigh(t, concat_cols<double>({v[0], v[2]})));
       }},
      {"slices", {{4, 5}}, [&](Tape<double>& t, V v) { return weigh(t, slice_cols(slice_rows(v[0], 1, 2), 2, 3)); }},
      {"gather", {{4, 3}}, [&](Tape<double>& t, V v) { return weigh(t, gather_rows(v[0], {3, 0, 3})); }},
      {"replace_rows", {{4, 3}, {2, 3}}, [&](Tape<double>& t, V v) { return weigh(t, replace_rows(v[0], {1, 2}, v[1])); }},
      {"broadcast_rows", {{1, 3}}, [&](Tape<double>& t, V v) { return weigh(t, broadcast_rows(v[0], 4)); }},
      {"axis reductions", {{3, 4}}, [&](Tape<double>& t, V v) { return add(weigh(t, mean(v[0], 0)), weigh(t, sum(v[0], 1))); }},
      {"l2 norms", {{3, 4}}, [&](Tape<double>& t, V v) { return add(l2_norm(v[0]), weigh(t, l2_normalize_rows(v[0]))); }},
      {"attention", {{3, 4}, {5, 4}, {5, 4}}, [&](Tape<double>& t, V v) { return weigh(t, attention(v[0], v[1], v[2], 2)); }},
      {"linear", {{3, 4}, {4, 2}, {1, 2}}, [&](Tape<double>& t, V v) { return weigh(t, linear(v[0], v[1], v[2])); }},
  };
  for (const Case& c : cases) {
    CAPTURE(c.name);
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<Mat<double>> in;
      for (auto [r, k] : c.shapes) in.push_back(g.matrix(r, k));
      auto res = central_difference(in, c.f);
      CHECK(res.finite);
      CHECK(res.max_rel < 1e-5);
    }
  }
}

TEST_CASE("tape errors") {
  Tape<double> t;
  auto a = t.variable(Tensor<double>(Shape{2, 2}));
  CHECK_THROWS_AS(t.backward(a), ShapeError);
  CHECK_THROWS_AS(add(a, t.constant(Mat<double>(Mat<double>::Zero(3, 3)))), ShapeError);
  CHECK_THROWS_AS(Tensor<double>(Shape{2, 0}), ShapeError);
  t.check_finite = true;
  CHECK_THROWS_AS(log(t.scalar(-1.0)), NumericError);
}

TEST_CASE("parameter gradients accumulate across tapes") {
  Parameter<double> p("w", Tensor<double>(Shape{1, 2}, {1.0, -2.0}));
  for (int k = 0; k < 2; ++k) {
    Tape<double> t;
    auto w = t.parameter(p);
    CHECK(t.parameter(p).id == w.id);
    t.backward(sum(square(w)));
  }
  CHECK(p.grad(0, 0) == 4.0);
  CHECK(p.grad(0, 1) == -8.0);
  p.zero_grad();
  CHECK(p.grad.isZero());
}

TEST_CASE("detach blocks gradient flow") {
  Tape<double> t;
  auto x = t.variable(Tensor<double>(Shape{2}, {1, 2}));
  t.backward(sum(mul(detach(x), x)));
  CHECK(x.grad()(0, 0) == 1);
  CHECK(x.grad()(0, 1) == 2);
}

TEST_CASE("gradient checker on a constant and on L1") {
  Parameter<double> p("x", Tensor<double>(Shape{1, 4}, {0.3, 0.1, 0.7, 0.2}));
  auto constant = finite_difference_check([](Tape<double>& t) { return t.scalar(3.0); }, {&p});
  CHECK(constant.passed);
  CHECK(constant.max_rel_error == 0.0);

  auto l1 = finite_difference_check(
      [&](Tape<double>& t) {
        Var<double> target = t.constant(Mat<double>(mat({{0.5, 0.5, 0.2, 0.2}})));
        return sum(abs(sub(t.parameter(p), target)));
      },
      {&p});
  CHECK(l1.passed);
}
