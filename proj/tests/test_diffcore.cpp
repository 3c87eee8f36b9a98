#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mrine/diffcore.hpp"
#include "test_support.hpp"

using namespace mrine;
using namespace mrine::ad;
using mrine::testing::random_tensor;
using mrine::testing::relative_gradient_error;

namespace {

// Weighted sum so that every output element carries a distinct gradient.
Tensor probe(const Tensor& out, const Tensor& weights) { return sum(mul(out, weights)); }

Tensor well_conditioned(std::mt19937_64& rng, Shape shape) {
  Tensor t = random_tensor(rng, shape, -1.0, 1.0);
  const std::size_t n = shape.rows(), nb = shape.batch();
  auto v = t.mutable_values();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < n; ++i) v[b * n * n + i * n + i] += 4.0;
  return t;
}

Tensor spd(std::mt19937_64& rng, std::size_t n) {
  Tensor m = random_tensor(rng, Shape{n, n}, -2.0, 2.0, false);
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < n; ++k) v[i * n + j] += m.values()[i * n + k] * m.values()[j * n + k];
      if (i == j) v[i * n + j] += 1.0;
    }
  return Tensor::parameter(Shape{n, n}, v);
}

}  // namespace

TEST(DiffCore, MatmulIdentity) {
  Tensor a = Tensor::constant(Shape{2, 2}, {1, 2, 3, 4});
  Tensor c = matmul(a, Tensor::eye(2));
  EXPECT_EQ(std::vector<double>(c.values().begin(), c.values().end()), (std::vector<double>{1, 2, 3, 4}));
}

TEST(DiffCore, SoftplusAtZero) {
  EXPECT_NEAR(softplus(Tensor::scalar(0.0)).item(), 0.693147, 1e-6);
  EXPECT_DOUBLE_EQ(softplus(Tensor::scalar(0.0)).item(), std::log(2.0));
}

TEST(DiffCore, GradientOfSumOfSquares) {
  Tensor x = Tensor::parameter(Shape{3}, {1, 2, 3});
  backward(sum(square(x)));
  // Central differences with h = 1e-6 give [2, 4, 6].
  std::vector<Tensor> leaves{x};
  auto fd = mrine::testing::finite_difference([&] { return sum(square(x)).item(); }, leaves);
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(x.grad()[i], 2.0 * (i + 1), 1e-9);
    EXPECT_NEAR(fd[0][i], 2.0 * (i + 1), 1e-6);
  }
}

TEST(DiffCore, BackwardIdentityAndZero) {
  Tensor x = Tensor::parameter(Shape{}, {5.0});
  backward(x);
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);

  Tensor y = Tensor::parameter(Shape{}, {5.0});
  backward(scale(y, 0.0));
  EXPECT_DOUBLE_EQ(y.grad()[0], 0.0);
}

TEST(DiffCore, LogOfExp) {
  Tensor x = Tensor::parameter(Shape{}, {3.0});
  backward(log(exp(x)));
  EXPECT_NEAR(x.grad()[0], 1.0, 1e-12);
}

TEST(DiffCore, BackwardErrors) {
  Tensor x = Tensor::parameter(Shape{2}, {1, 2});
  EXPECT_THROW(backward(square(x)), ShapeError);
  Tensor loss = sum(square(x));
  backward(loss);
  EXPECT_THROW(backward(loss), std::logic_error);
  EXPECT_THROW(backward(sum(Tensor::constant(Shape{2}, {1, 2}))), std::logic_error);
}

TEST(DiffCore, ShapeErrors) {
  Tensor a = Tensor::zeros(Shape{2, 3});
  Tensor b = Tensor::zeros(Shape{2, 3});
  EXPECT_THROW(matmul(a, b), ShapeError);
  EXPECT_THROW(add(a, Tensor::zeros(Shape{3, 2})), ShapeError);
  EXPECT_THROW(Tensor::constant(Shape{2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(linear_solve(a, b), ShapeError);
}

TEST(DiffCore, SingularAndNonPd) {
  Tensor s = Tensor::constant(Shape{2, 2}, {1, 2, 2, 4});
  EXPECT_THROW(linear_solve(s, Tensor::eye(2)), SingularMatrixError);
  EXPECT_THROW(matrix_inverse(s), SingularMatrixError);
  Tensor indefinite = Tensor::constant(Shape{2, 2}, {1, 0, 0, -1});
  EXPECT_THROW(cholesky(indefinite), NotPositiveDefiniteError);
}

TEST(DiffCore, NonFiniteDetectable) {
  Tensor t = log(Tensor::constant(Shape{2}, {1.0, -1.0}));
  EXPECT_FALSE(t.all_finite());
  EXPECT_TRUE(Tensor::eye(3).all_finite());
}

TEST(DiffCore, FanOutAccumulates) {
  // f = sum(x*x) + sum(exp(x)); x used by two consumers.
  std::mt19937_64 rng(3);
  Tensor x = random_tensor(rng, Shape{4});
  std::vector<Tensor> leaves{x};
  auto build = [&] { return add(sum(mul(x, x)), sum(exp(x))); };
  EXPECT_LT(relative_gradient_error(build, leaves), 1e-7);
  x.zero_grad();
  backward(build());
  for (std::size_t i = 0; i < 4; ++i) {
    const double v = x.values()[i];
    EXPECT_NEAR(x.grad()[i], 2 * v + std::exp(v), 1e-12);
  }
}

TEST(DiffCore, MatmulAssociativity) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = dim(rng), k = dim(rng), l = dim(rng), n = dim(rng);
    Tensor a = random_tensor(rng, Shape{m, k}, -1, 1, false);
    Tensor b = random_tensor(rng, Shape{k, l}, -1, 1, false);
    Tensor c = random_tensor(rng, Shape{l, n}, -1, 1, false);
    Tensor left = matmul(matmul(a, b), c);
    Tensor right = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < left.numel(); ++i) EXPECT_LE(std::abs(left.at(i) - right.at(i)), 1e-10);
  }
}

TEST(DiffCore, LinearSolveResidual) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + trial % 7;
    Tensor a = well_conditioned(rng, Shape{n, n});
    Tensor b = random_tensor(rng, Shape{n, 3});
    Tensor x = linear_solve(a, b);
    Tensor r = sub(matmul(a, x), b);
    for (double v : r.values()) EXPECT_LE(std::abs(v), 1e-9);
  }
}

TEST(DiffCore, BatchedMatmulMatchesLoop) {
  std::mt19937_64 rng(8);
  Tensor a = random_tensor(rng, Shape{3, 2, 4}, -1, 1, false);
  Tensor b = random_tensor(rng, Shape{4, 5}, -1, 1, false);
  Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 2, 5}));
  for (std::size_t bi = 0; bi < 3; ++bi)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a.at(bi * 8 + i * 4 + k) * b.at(k * 5 + j);
        EXPECT_NEAR(c.at(bi * 10 + i * 5 + j), s, 1e-14);
      }
}

TEST(DiffCore, CholeskyReconstructs) {
  std::mt19937_64 rng(9);
  Tensor a = spd(rng, 4);
  Tensor l = cholesky(a);
  Tensor back = matmul(l, transpose(l));
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(back.at(i), a.at(i), 1e-12);
}

TEST(DiffCore, WhereRowsRoutesGradient) {
  Tensor a = Tensor::parameter(Shape{3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::parameter(Shape{3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor w = where_rows({1, 0, 1}, a, b);
  EXPECT_EQ(w.at(2), 9.0);
  backward(sum(w));
  EXPECT_EQ(a.grad()[2], 0.0);
  EXPECT_EQ(b.grad()[2], 1.0);
  EXPECT_EQ(b.grad()[0], 0.0);
}

// Every differentiable op against central differences on 20 random seeds.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  const int op = GetParam();
  constexpr double kTol = 1e-5;
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(1000 * static_cast<unsigned>(op) + static_cast<unsigned>(seed));
    std::vector<Tensor> leaves;
    std::function<Tensor()> build;
    auto W = [&](Shape s) { return random_tensor(rng, s, -1, 1, false); };
    switch (op) {
      case 0: {  // matmul, plus batched broadcast
        Tensor a = random_tensor(rng, Shape{2, 3, 4}), b = random_tensor(rng, Shape{4, 2});
        Tensor w = W(Shape{2, 3, 2});
        leaves = {a, b};
        build = [=] { return probe(matmul(a, b), w); };
        break;
      }
      case 1: {  // add / sub with broadcasting
        Tensor a = random_tensor(rng, Shape{3, 4}), b = random_tensor(rng, Shape{4});
        Tensor w = W(Shape{3, 4});
        leaves = {a, b};
        build = [=] { return probe(sub(add(a, b), mul(b, b)), w); };
        break;
      }
      case 2: {  // elementwise mul / div
        Tensor a = random_tensor(rng, Shape{5}), b = random_tensor(rng, Shape{5}, 0.5, 2.0);
        Tensor w = W(Shape{5});
        leaves = {a, b};
        build = [=] { return probe(add(mul(a, b), div(a, b)), w); };
        break;
      }
      case 3: {  // transpose, concat_rows, concat_cols, slice_rows, slice_cols, gather_rows
        Tensor a = random_tensor(rng, Shape{3, 4}), b = random_tensor(rng, Shape{2, 4});
        Tensor d = random_tensor(rng, Shape{4, 2});
        Tensor w = W(Shape{4, 3});
        leaves = {a, b, d};
        build = [=] {
          Tensor c = concat_rows({a, b});
          Tensor g = gather_rows(slice_rows(c, 1, 5), {0, 3, 3, 1});
          return probe(slice_cols(concat_cols({transpose(transpose(g)), d}), 1, 4), w);
        };
        break;
      }
      case 4: {  // sum, mean, square
        Tensor a = random_tensor(rng, Shape{2, 3});
        leaves = {a};
        build = [=] { return add(mean(square(a)), scale(sum(a), 0.3)); };
        break;
      }
      case 5: {  // exp, log, tanh, softplus
        Tensor a = random_tensor(rng, Shape{6}), p = random_tensor(rng, Shape{6}, 0.2, 2.0);
        Tensor w = W(Shape{6});
        leaves = {a, p};
        build = [=] { return probe(add(add(exp(a), log(p)), add(tanh(a), softplus(a))), w); };
        break;
      }
      case 6: {  // linear_solve, batched
        Tensor a = well_conditioned(rng, Shape{2, 3, 3}), b = random_tensor(rng, Shape{2, 3, 2});
        Tensor w = W(Shape{2, 3, 2});
        leaves = {a, b};
        build = [=] { return probe(linear_solve(a, b), w); };
        break;
      }
      case 7: {  // matrix_inverse
        Tensor a = well_conditioned(rng, Shape{4, 4});
        Tensor w = W(Shape{4, 4});
        leaves = {a};
        build = [=] { return probe(matrix_inverse(a), w); };
        break;
      }
      case 8: {  // cholesky
        Tensor a = spd(rng, 3);
        Tensor w = W(Shape{3, 3});
        leaves = {a};
        build = [=] { return probe(cholesky(a), w); };
        break;
      }
      case 9: {  // diag, diagonal, symmetrize, reshape, where_rows, clamp interior
        Tensor v = random_tensor(rng, Shape{3}), m = random_tensor(rng, Shape{2, 3, 3});
        Tensor w = W(Shape{2, 3});
        leaves = {v, m};
        build = [=] {
          Tensor s = add(symmetrize(m), diag(v));
          Tensor d = reshape(diagonal(s), Shape{2, 3});
          Tensor sel = where_rows({1, 0}, d, scale(d, 2.0));
          return probe(clamp(sel, -100.0, 100.0), w);
        };
        break;
      }
      default:
        FAIL();
    }
    const double err = relative_gradient_error(build, leaves);
    EXPECT_LE(err, kTol) << "op " << op << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range(0, 10));
