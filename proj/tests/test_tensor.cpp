#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "vitlm/gradcheck.hpp"
#include "vitlm/ops.hpp"

using namespace vitlm;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double scale_by = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale_by);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  Tensor<double> t(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

// Contracts an arbitrary tensor against fixed random weights so every
// output coordinate reaches the loss with a distinct coefficient.
Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 99) {
  auto w = random_tensor(y.shape(), seed);
  w.set_requires_grad(false);
  return sum(mul(y, w));
}

double max_err(const std::function<Tensor<double>()>& f, NamedTensors<double> params) {
  return check_gradients<double>(f, std::move(params)).max_relative_error();
}

}  // namespace

TEST(Tensor, RejectsZeroDimsAndSizeMismatch) {
  EXPECT_THROW(Tensor<float>(Shape{2, 0}, std::vector<float>{}), DimensionError);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), DimensionError);
}

TEST(Tensor, ItemRequiresScalar) {
  auto t = Tensor<float>::zeros({2});
  EXPECT_THROW(t.item(), ContractError);
  EXPECT_FLOAT_EQ(Tensor<float>::scalar(3.5f).item(), 3.5f);
}

TEST(Ops, MatmulHandExample) {
  auto a = Tensor<double>::matrix({{1, 2}, {3, 4}});
  auto b = Tensor<double>::matrix({{5}, {6}});
  auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(c.at(0, 0), 17.0);
  EXPECT_DOUBLE_EQ(c.at(1, 0), 39.0);
}

TEST(Ops, MatmulShapeMismatchNamesShapes) {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos) << e.what();
  }
}

TEST(Ops, SoftmaxRowsSumToOne) {
  auto x = random_tensor({4, 7}, 1, 3.0);
  auto s = softmax(x, 1);
  for (std::size_t i = 0; i < 4; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < 7; ++j) row += s.at(i, j);
    EXPECT_NEAR(row, 1.0, 1e-12);
  }
}

TEST(Ops, SoftmaxStableForLargeLogits) {
  auto x = Tensor<double>::matrix({{1000.0, 1001.0, 999.0}});
  auto s = softmax(x, 1);
  EXPECT_TRUE(std::isfinite(s.at(0, 0)));
  auto ls = log_softmax(x, 1);
  EXPECT_NEAR(std::exp(ls.at(0, 1)), s.at(0, 1), 1e-12);
}

TEST(Ops, CausalSoftmaxMasksFuture) {
  auto x = random_tensor({5, 5}, 2);
  auto s = causal_softmax(x);
  for (std::size_t i = 0; i < 5; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      if (j > i) {
        EXPECT_EQ(s.at(i, j), 0.0);
      }
      row += s.at(i, j);
    }
    EXPECT_NEAR(row, 1.0, 1e-12);
  }
}

TEST(Ops, LayerNormZeroMeanUnitVariance) {
  auto x = random_tensor({3, 16}, 3, 5.0);
  auto y = layer_norm(x, Tensor<double>::full({16}, 1.0), Tensor<double>::zeros({16}), 1e-12);
  for (std::size_t i = 0; i < 3; ++i) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 16; ++j) m += y.at(i, j);
    m /= 16;
    for (std::size_t j = 0; j < 16; ++j) v += (y.at(i, j) - m) * (y.at(i, j) - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 16, 1.0, 1e-9);
  }
}

TEST(Ops, GeluMatchesErfForm) {
  auto x = Tensor<double>::vector({-2.0, -0.5, 0.0, 0.7, 3.0});
  auto y = gelu(x);
  for (std::size_t i = 0; i < 5; ++i) {
    const double v = x.at(i);
    EXPECT_NEAR(y.at(i), 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))), 1e-15);
  }
}

TEST(Ops, EmbeddingLookupRejectsOutOfRange) {
  auto table = Tensor<double>::zeros({4, 2});
  std::vector<int> ids{0, 4};
  EXPECT_THROW(embedding_lookup(table, std::span<const int>(ids)), OutOfVocabularyError);
}

TEST(Ops, NonFiniteIsReported) {
  auto x = Tensor<double>::vector({1e308});
  EXPECT_THROW(scale(x, 1e10), NonFiniteError);
}

TEST(Ops, ConcatSliceRoundTrip) {
  auto a = random_tensor({2, 3}, 4);
  auto b = random_tensor({2, 5}, 5);
  auto c = concat<double>({a, b}, 1);
  EXPECT_TRUE(bitwise_equal(slice(c, 1, 0, 3), a));
  EXPECT_TRUE(bitwise_equal(slice(c, 1, 3, 5), b));
}

TEST(Autodiff, NoTapeNoRecording) {
  auto a = random_tensor({2, 2}, 6);
  Tape<double> tape;
  auto b = Tensor<double>::zeros({2, 2});
  add(b, b);
  EXPECT_EQ(tape.size(), 0u);
  add(a, b);
  EXPECT_EQ(tape.size(), 1u);
}

TEST(Autodiff, BackwardRequiresScalar) {
  auto a = random_tensor({2, 2}, 7);
  Tape<double> tape;
  auto y = add(a, a);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Autodiff, GradientsAccumulateOverReuse) {
  auto a = Tensor<double>::vector({3.0});
  a.set_requires_grad(true);
  Tape<double> tape;
  auto y = sum(mul(a, a));  // d/da a² = 2a
  tape.backward(y);
  EXPECT_DOUBLE_EQ(a.grad()[0], 6.0);
}

// Finite-difference agreement for every primitive and for small compositions.
TEST(GradCheck, ElementwiseOps) {
  auto a = random_tensor({3, 4}, 10);
  auto b = random_tensor({3, 4}, 11);
  EXPECT_LT(max_err([&] { return probe(add(a, b)); }, {{"a", a}, {"b", b}}), 1e-6);
  EXPECT_LT(max_err([&] { return probe(sub(a, b)); }, {{"a", a}, {"b", b}}), 1e-6);
  EXPECT_LT(max_err([&] { return probe(mul(a, b)); }, {{"a", a}, {"b", b}}), 1e-6);
  EXPECT_LT(max_err([&] { return probe(scale(a, 0.37)); }, {{"a", a}}), 1e-6);
  EXPECT_LT(max_err([&] { return probe(gelu(a)); }, {{"a", a}}), 1e-6);
}

TEST(GradCheck, MatrixOps) {
  auto a = random_tensor({3, 4}, 12);
  auto b = random_tensor({4, 5}, 13);
  auto c = random_tensor({5, 4}, 14);
  auto bias = random_tensor({5}, 15);
  EXPECT_LT(max_err([&] { return probe(matmul(a, b)); }, {{"a", a}, {"b", b}}), 1e-6);
  EXPECT_LT(max_err([&] { return probe(matmul_nt(a, c)); }, {{"a", a}, {"c", c}}), 1e-6);
  EXPECT_LT(max_err([&] { return probe(transpose(a)); }, {{"a", a}}), 1e-6);
  EXPECT_LT(max_err([&] { return probe(linear(a, c, &bias)); }, {{"a", a}, {"c", c}, {"bias", bias}}),
            1e-6);
  EXPECT_LT(max_err([&] { return probe(reshape(a, {2, 6})); }, {{"a", a}}), 1e-6);
}

TEST(GradCheck, NormalizationAndSoftmax) {
  auto x = random_tensor({4, 6}, 16);
  auto g = random_tensor({6}, 17);
  auto b = random_tensor({6}, 18);
  auto sq = random_tensor({5, 5}, 19);
  EXPECT_LT(max_err([&] { return probe(softmax(x, 1)); }, {{"x", x}}), 1e-6);
  EXPECT_LT(max_err([&] { return probe(softmax(x, 0)); }, {{"x", x}}), 1e-6);
  EXPECT_LT(max_err([&] { return probe(log_softmax(x, 1)); }, {{"x", x}}), 1e-6);
  EXPECT_LT(max_err([&] { return probe(causal_softmax(sq)); }, {{"sq", sq}}), 1e-6);
  EXPECT_LT(max_err([&] { return probe(layer_norm(x, g, b, 1e-5)); }, {{"x", x}, {"g", g}, {"b", b}}),
            1e-6);
}

TEST(GradCheck, IndexingOps) {
  auto x = random_tensor({4, 6}, 20);
  auto y = random_tensor({2, 6}, 21);
  std::vector<int> ids{3, 0, 3, 1};
  EXPECT_LT(max_err([&] { return probe(embedding_lookup(x, std::span<const int>(ids))); },
                    {{"x", x}}),
            1e-6);
  EXPECT_LT(max_err([&] { return probe(concat<double>({x, y}, 0)); }, {{"x", x}, {"y", y}}), 1e-6);
  EXPECT_LT(max_err([&] { return probe(slice(x, 1, 2, 3)); }, {{"x", x}}), 1e-6);
  EXPECT_LT(max_err([&] { return probe(pick(x, {0, 2, 3}, {5, 1, 1})); }, {{"x", x}}), 1e-6);
  EXPECT_LT(max_err([&] { return mean(x); }, {{"x", x}}), 1e-6);
}
