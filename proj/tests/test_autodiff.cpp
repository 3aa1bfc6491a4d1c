#include "doctest.h"
#include "gradcheck.hpp"
#include "megalab/error.hpp"
#include "megalab/nn.hpp"

using megalab::ad::Matrix;
using megalab::ad::Var;
namespace ad = megalab::ad;
namespace nn = megalab::nn;
using megalab::testing::gradcheck;
using megalab::testing::random_matrix;

namespace {
constexpr double kTol = 1e-5;
}

TEST_CASE("elementwise and linear ops match finite differences") {
  const Matrix a = random_matrix(3, 4, 1);
  const Matrix b = random_matrix(4, 2, 2);
  const Matrix c = random_matrix(3, 4, 3);
  CHECK(gradcheck([](const auto& v) { return ad::sum(ad::matmul(v[0], v[1])); }, {a, b}) < kTol);
  CHECK(gradcheck([](const auto& v) { return ad::sum(ad::mul(ad::add(v[0], v[1]), ad::sub(v[0], v[1]))); },
                  {a, c}) < kTol);
  CHECK(gradcheck([](const auto& v) { return ad::mean(ad::tanh(ad::scale(v[0], 1.7))); }, {a}) < kTol);
  CHECK(gradcheck([](const auto& v) { return ad::sum(ad::exp(ad::square(v[0]))); }, {a}) < kTol);
  CHECK(gradcheck([](const auto& v) { return ad::sum(ad::leaky_relu(v[0], 0.1)); }, {a}) < kTol);
  CHECK(gradcheck(
            [](const auto& v) {
              return ad::sum(ad::square(ad::add_row(v[0], v[1])));
            },
            {a, random_matrix(1, 4, 4)}) < kTol);
  CHECK(gradcheck([](const auto& v) { return ad::sum(ad::square(ad::mean_rows(v[0]))); }, {a}) < kTol);
  CHECK(gradcheck([](const auto& v) { return ad::mse(v[0], v[1]); }, {a, c}) < kTol);
  CHECK(gradcheck([](const auto& v) { return ad::sum(ad::square(ad::transpose(v[0]))); }, {a}) < kTol);
}

TEST_CASE("normalisation and probability ops match finite differences") {
  const Matrix x = random_matrix(4, 6, 5);
  const Matrix g = random_matrix(1, 6, 6);
  const Matrix b = random_matrix(1, 6, 7);
  const Matrix w = random_matrix(4, 6, 8);
  CHECK(gradcheck([&](const auto& v) { return ad::sum(ad::mul(ad::layer_norm(v[0], v[1], v[2]), ad::constant(w))); },
                  {x, g, b}) < 1e-4);
  CHECK(gradcheck([&](const auto& v) { return ad::sum(ad::mul(ad::softmax_rows(v[0]), ad::constant(w))); }, {x}) <
        kTol);
  CHECK(gradcheck([&](const auto& v) { return ad::sum(ad::mul(ad::log_softmax_rows(v[0]), ad::constant(w))); },
                  {x}) < kTol);
  const std::vector<int> targets{0, 5, 2, 2};
  CHECK(gradcheck([&](const auto& v) { return ad::cross_entropy(v[0], targets); }, {x}) < kTol);
}

TEST_CASE("structural ops route gradients to the right rows") {
  const Matrix x = random_matrix(5, 3, 9);
  const std::vector<int> idx{4, -1, 0, 0, 2};
  CHECK(gradcheck([&](const auto& v) { return ad::sum(ad::square(ad::gather_rows(v[0], idx))); }, {x}) < kTol);
  CHECK(gradcheck([&](const auto& v) { return ad::sum(ad::square(ad::reshape(v[0], 3, 5))); }, {x}) < kTol);
  CHECK(gradcheck(
            [&](const auto& v) {
              std::vector<Var> parts{ad::slice_rows(v[0], 1, 2), ad::slice_rows(v[0], 0, 3)};
              std::vector<Var> cols{ad::slice_cols(v[0], 0, 1), ad::slice_cols(v[0], 2, 1)};
              return ad::add(ad::sum(ad::square(ad::concat_rows(parts))),
                             ad::sum(ad::exp(ad::concat_cols(cols))));
            },
            {x}) < kTol);
  const Matrix p = random_matrix(2, 5, 10);
  CHECK(gradcheck([&](const auto& v) { return ad::sum(ad::square(ad::left_multiply(p, v[0]))); }, {x}) < kTol);
}

TEST_CASE("reshape is row-major") {
  Matrix x(2, 3);
  x << 1, 2, 3, 4, 5, 6;
  Matrix y = ad::reshape(ad::constant(x), 3, 2).value();
  CHECK(y(0, 0) == 1);
  CHECK(y(0, 1) == 2);
  CHECK(y(1, 0) == 3);
  CHECK(y(2, 1) == 6);
}

TEST_CASE("straight-through passes the gradient unchanged") {
  const Matrix h = random_matrix(2, 3, 11);
  const Matrix q = random_matrix(2, 3, 12);
  Var hv = ad::leaf(h);
  Var z = ad::straight_through(hv, q);
  CHECK(z.value().isApprox(q));
  ad::backward(ad::sum(ad::square(z)));
  CHECK(hv.grad().isApprox(2.0 * q));
}

TEST_CASE("no-grad guard builds no graph") {
  Var a = ad::leaf(Matrix::Ones(2, 2));
  {
    ad::NoGradGuard guard;
    Var b = ad::matmul(a, a);
    CHECK_FALSE(b.requires_grad());
  }
  CHECK(ad::matmul(a, a).requires_grad());
}

TEST_CASE("shape errors are reported") {
  CHECK_THROWS_AS((void)ad::matmul(ad::constant(Matrix::Ones(2, 3)), ad::constant(Matrix::Ones(2, 3))),
                  megalab::ValidationError);
  CHECK_THROWS_AS(ad::backward(ad::leaf(Matrix::Ones(2, 2))), megalab::ValidationError);
}

TEST_CASE("layers are differentiable end to end") {
  megalab::Rng rng(3);
  nn::ParameterSet params;
  nn::TransformerLayer layer(params, "t", 8, 2, 16, 3, true, rng);
  nn::ConvStack stack(params, "c", 4, 8, 2, 3, rng);
  nn::Conv2d conv2(params, "d", 1, 3, 3, 2, rng);
  const Matrix x = random_matrix(6, 4, 13);
  const Matrix m = random_matrix(6 * 5, 1, 14);
  CHECK(gradcheck([&](const auto& v) { return ad::mean(ad::square(layer(stack(v[0])))); }, {x}) < 1e-4);
  CHECK(gradcheck(
            [&](const auto& v) {
              nn::FeatureMap fm{v[0], 6, 5};
              return ad::mean(ad::square(conv2(fm).cells));
            },
            {m}) < 1e-4);
}

TEST_CASE("causal attention ignores future rows") {
  megalab::Rng rng(4);
  nn::ParameterSet params;
  nn::TransformerLayer layer(params, "t", 8, 2, 16, 5, true, rng);
  Matrix x = random_matrix(7, 8, 15);
  const Matrix before = layer(ad::constant(x)).value();
  x.row(4).setConstant(3.0);
  const Matrix after = layer(ad::constant(x)).value();
  CHECK(before.topRows(4).isApprox(after.topRows(4), 1e-12));
  CHECK_FALSE(before.row(4).isApprox(after.row(4)));
}

TEST_CASE("adam minimises a quadratic") {
  nn::ParameterSet params;
  Var w = params.add("w", Matrix::Constant(1, 3, 5.0));
  nn::Adam opt(params, {.learning_rate = 0.1});
  for (int i = 0; i < 500; ++i) {
    ad::backward(ad::sum(ad::square(w)));
    opt.step();
  }
  CHECK(w.value().norm() < 1e-2);
  CHECK(opt.step_count() == 500);
}
