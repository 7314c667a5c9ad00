#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "fusionformer/tensor.hpp"

using namespace fusionformer;

namespace {

Tensor rand_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = true, double lo = -2.0,
                   double hi = 2.0) {
  Tensor t(std::move(shape), 0.0, requires_grad);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-6});
}

// Central finite difference of a freshly rebuilt scalar graph w.r.t. one
// entry of a leaf tensor.
double numeric_grad(const std::function<Tensor()>& make_root, Tensor leaf, size_t idx,
                    double h = 1e-5) {
  double& x = leaf.data()[idx];
  const double orig = x;
  x = orig + h;
  const double fp = make_root().item();
  x = orig - h;
  const double fm = make_root().item();
  x = orig;
  return (fp - fm) / (2.0 * h);
}

void check_grads_match(const std::function<Tensor()>& make_root,
                       const std::vector<Tensor>& leaves, double tol = 1e-4) {
  for (Tensor leaf : leaves) leaf.zero_grad();
  Tensor root = make_root();
  backward(root);
  for (Tensor leaf : leaves) {
    ASSERT_TRUE(leaf.has_grad());
    for (size_t i = 0; i < leaf.size(); ++i) {
      const double analytic = leaf.grad()[i];
      const double numeric = numeric_grad(make_root, leaf, i);
      EXPECT_LE(rel_err(analytic, numeric), tol)
          << "entry " << i << ": analytic " << analytic << " vs numeric " << numeric;
    }
  }
}

}  // namespace

TEST(Matmul, IdentityCase) {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor out = matmul(eye, a);
  EXPECT_EQ(out.data(), a.data());
}

TEST(Matmul, HandMultiplicationOracle) {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 1}, {0, 1});
  Tensor out = matmul(a, b);
  EXPECT_EQ(out.shape(), (std::vector<int>{2, 1}));
  EXPECT_DOUBLE_EQ(out.data()[0], 2.0);
  EXPECT_DOUBLE_EQ(out.data()[1], 4.0);
}

TEST(Matmul, ZeroCase) {
  Rng rng(1);
  Tensor z({2, 3});
  Tensor b = rand_tensor({3, 4}, rng, false);
  Tensor out = matmul(z, b);
  EXPECT_EQ(out.shape(), (std::vector<int>{2, 4}));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor a({2, 3});
  Tensor b({2, 3});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(Matmul, GradientRule) {
  Rng rng(2);
  Tensor a = rand_tensor({3, 4}, rng);
  Tensor b = rand_tensor({4, 2}, rng);
  check_grads_match([&] { return sum(matmul(a, b)); }, {a, b});
}

TEST(SoftmaxRows, UniformLogits) {
  Tensor a = Tensor::from_data({1, 3}, {0, 0, 0});
  Tensor out = softmax_rows(a);
  for (double v : out.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(SoftmaxRows, ClosedFormOracle) {
  // e^0 / (e^0 + 3) = 1/4 with the second logit at ln 3
  Tensor a = Tensor::from_data({1, 2}, {0.0, std::log(3.0)});
  Tensor out = softmax_rows(a);
  EXPECT_NEAR(out.data()[0], 0.25, 1e-12);
  EXPECT_NEAR(out.data()[1], 0.75, 1e-12);
}

TEST(SoftmaxRows, StabilityOnLargeLogits) {
  Tensor a = Tensor::from_data({1, 2}, {1000.0, 0.0});
  Tensor out = softmax_rows(a);
  EXPECT_NEAR(out.data()[0], 1.0, 1e-12);
  EXPECT_NEAR(out.data()[1], 0.0, 1e-12);
  for (double v : out.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(SoftmaxRows, RowsSumToOne) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = rand_tensor({4, 7}, rng, false, -30.0, 30.0);
    Tensor out = softmax_rows(a);
    for (int i = 0; i < 4; ++i) {
      double s = 0.0;
      for (int j = 0; j < 7; ++j) s += out.at(i, j);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(SoftmaxRows, PermutationEquivariantPerRow) {
  Rng rng(4);
  Tensor a = rand_tensor({1, 6}, rng, false);
  std::vector<int> perm{3, 0, 5, 1, 4, 2};
  Tensor permuted({1, 6});
  for (int j = 0; j < 6; ++j) permuted.data()[static_cast<size_t>(j)] = a.data()[static_cast<size_t>(perm[static_cast<size_t>(j)])];
  Tensor sa = softmax_rows(a);
  Tensor sp = softmax_rows(permuted);
  for (int j = 0; j < 6; ++j)
    EXPECT_DOUBLE_EQ(sp.data()[static_cast<size_t>(j)], sa.data()[static_cast<size_t>(perm[static_cast<size_t>(j)])]);
}

TEST(Elementwise, SignWithZeroConvention) {
  Tensor a = Tensor::from_data({3}, {-2, 0, 5});
  Tensor out = sign_elem(a);
  EXPECT_EQ(out.data(), (std::vector<double>{-1, 0, 1}));
  EXPECT_FALSE(out.requires_grad());
}

TEST(Elementwise, SqrtAbsForcedArithmetic) {
  Tensor a = Tensor::from_data({2}, {-4, 9});
  Tensor out = sqrt_elem(abs_elem(a));
  EXPECT_DOUBLE_EQ(out.data()[0], 2.0);
  EXPECT_DOUBLE_EQ(out.data()[1], 3.0);
}

TEST(Elementwise, MaxMinElementwise) {
  Tensor a = Tensor::from_data({2}, {1, -2});
  Tensor b = Tensor::from_data({2}, {0, 3});
  EXPECT_EQ(maximum(a, b).data(), (std::vector<double>{1, 3}));
  EXPECT_EQ(minimum(a, b).data(), (std::vector<double>{0, -2}));
}

TEST(Elementwise, ShapeMismatchThrows) {
  Tensor a({2, 2});
  Tensor b({2, 3});
  EXPECT_THROW(add(a, b), DimensionError);
  EXPECT_THROW(mul(a, b), DimensionError);
  EXPECT_THROW(maximum(a, b), DimensionError);
}

TEST(Elementwise, SignedSqrtValuesAndZeroSubgradient) {
  Tensor a = Tensor::from_data({3}, {-4, 0, 9}, true);
  Tensor out = signed_sqrt(a);
  EXPECT_DOUBLE_EQ(out.data()[0], -2.0);
  EXPECT_DOUBLE_EQ(out.data()[1], 0.0);
  EXPECT_DOUBLE_EQ(out.data()[2], 3.0);
  backward(sum(out));
  EXPECT_DOUBLE_EQ(a.grad()[0], 0.25);
  EXPECT_DOUBLE_EQ(a.grad()[1], 0.0);
  EXPECT_DOUBLE_EQ(a.grad()[2], 1.0 / 6.0);
}

TEST(Backward, SumOfSquaresAnalytic) {
  Tensor x = Tensor::from_data({1}, {3}, true);
  backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, CrossEntropySoftmaxIdentity) {
  Rng rng(5);
  Tensor z = rand_tensor({1, 5}, rng);
  const int target = 2;
  backward(cross_entropy_rows(z, {target}, /*ignore_id=*/-1));
  Tensor p = softmax_rows(Tensor::from_data({1, 5}, z.data()));
  for (int j = 0; j < 5; ++j) {
    const double expected = p.data()[static_cast<size_t>(j)] - (j == target ? 1.0 : 0.0);
    EXPECT_NEAR(z.grad()[static_cast<size_t>(j)], expected, 1e-12);
  }
}

TEST(Backward, NonScalarRootThrows) {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  EXPECT_THROW(backward(abs_elem(x)), ContractError);
}

TEST(Backward, ReuseDoublesGradient) {
  Rng rng(6);
  Tensor x = rand_tensor({3, 3}, rng);
  auto f = [&] { return mean(gelu(mul(x, x))); };
  backward(f());
  std::vector<double> single = x.grad();
  x.zero_grad();
  backward(add(f(), f()));
  for (size_t i = 0; i < single.size(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * single[i]);
}

TEST(Backward, GradBuffersMatchShapes) {
  Rng rng(7);
  Tensor a = rand_tensor({2, 3}, rng);
  Tensor b = rand_tensor({3, 4}, rng);
  backward(mean(matmul(a, b)));
  EXPECT_EQ(a.grad().size(), a.size());
  EXPECT_EQ(b.grad().size(), b.size());
}

// Every differentiable op against central finite differences on random
// inputs in [-2, 2]; 100 trials across the op set.
TEST(Backward, FiniteDifferenceSweep) {
  Rng rng(8);
  int trial = 0;
  auto next_inputs = [&](int rows, int cols) {
    return std::pair<Tensor, Tensor>{rand_tensor({rows, cols}, rng),
                                     rand_tensor({rows, cols}, rng)};
  };
  while (trial < 100) {
    const int which = trial % 10;
    auto [a, b] = next_inputs(2, 3);
    switch (which) {
      case 0: check_grads_match([&a = a, &b = b] { return sum(add(a, b)); }, {a, b}); break;
      case 1: check_grads_match([&a = a, &b = b] { return sum(sub(a, b)); }, {a, b}); break;
      case 2: check_grads_match([&a = a, &b = b] { return sum(mul(a, b)); }, {a, b}); break;
      case 3: check_grads_match([&a = a] { return mean(scale(a, -1.7)); }, {a}); break;
      case 4: {
        // keep |x| away from the kink of abs
        for (double& v : a.data())
          if (std::fabs(v) < 1e-2) v = 1e-2;
        check_grads_match([&a = a] { return sum(sqrt_elem(abs_elem(a))); }, {a});
        break;
      }
      case 5: {
        for (size_t i = 0; i < a.size(); ++i)
          if (std::fabs(a.data()[i] - b.data()[i]) < 1e-2) a.data()[i] += 0.1;
        check_grads_match([&a = a, &b = b] { return sum(maximum(a, b)); }, {a, b});
        check_grads_match([&a = a, &b = b] { return sum(minimum(a, b)); }, {a, b});
        break;
      }
      case 6: check_grads_match([&a = a] { return mean(softmax_rows(a)); }, {a}); break;
      case 7: check_grads_match([&a = a] { return mean(gelu(a)); }, {a}); break;
      case 8: {
        Tensor g = rand_tensor({3}, rng, true, 0.5, 1.5);
        Tensor bias = rand_tensor({3}, rng);
        check_grads_match([&a = a, &g, &bias] { return mean(layer_norm(a, g, bias)); },
                          {a, g, bias});
        break;
      }
      case 9: {
        Tensor w = rand_tensor({3, 2}, rng);
        check_grads_match([&a = a, &w] { return mean(matmul_nt(transpose(matmul(a, w)), w)); },
                          {a, w});
        break;
      }
    }
    ++trial;
  }
}

// A composite chain touching most ops at once.
TEST(Backward, CompositeFiniteDifference) {
  Rng rng(9);
  Tensor x = rand_tensor({3, 4}, rng);
  Tensor w = rand_tensor({4, 5}, rng);
  Tensor bias = rand_tensor({5}, rng);
  Tensor g = rand_tensor({5}, rng, true, 0.5, 1.5);
  Tensor g2 = rand_tensor({5}, rng);
  auto f = [&] {
    Tensor t = add_rowvec(matmul(x, w), bias);
    Tensor n = layer_norm(t, g, g2);
    Tensor s = softmax_rows(n);
    Tensor u = mul(gelu(t), s);
    Tensor c = concat_cols({slice_cols(u, 0, 2), slice_cols(u, 2, 3)});
    return mean(c);
  };
  check_grads_match(f, {x, w, bias, g, g2});
}

TEST(Backward, CausalSoftmaxZeroesUpperTriangle) {
  Rng rng(10);
  Tensor a = rand_tensor({4, 4}, rng);
  Tensor out = causal_softmax_rows(a);
  for (int i = 0; i < 4; ++i) {
    double s = 0.0;
    for (int j = 0; j < 4; ++j) {
      if (j > i) EXPECT_EQ(out.at(i, j), 0.0);
      s += out.at(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  check_grads_match([&] { return mean(causal_softmax_rows(a)); }, {a});
}

TEST(Backward, EmbeddingGatherAndScatter) {
  Rng rng(11);
  Tensor table = rand_tensor({5, 3}, rng);
  std::vector<int> ids{1, 3, 1};
  check_grads_match([&] { return mean(embedding_rows(table, ids, "token")); }, {table});
  EXPECT_THROW(embedding_rows(table, {5}, "token"), VocabularyError);
  try {
    embedding_rows(table, {-1}, "position");
    FAIL();
  } catch (const VocabularyError& e) {
    EXPECT_NE(std::string(e.what()).find("position"), std::string::npos);
  }
}

TEST(Backward, CrossEntropyMaskedMeanFiniteDifference) {
  Rng rng(12);
  Tensor logits = rand_tensor({4, 6}, rng);
  std::vector<int> targets{2, 0, 5, 0};  // 0 acts as the pad id here
  check_grads_match([&] { return cross_entropy_rows(logits, targets, 0); }, {logits});
  EXPECT_THROW(cross_entropy_rows(logits, {0, 0, 0, 0}, 0), EmptyLossError);
}

TEST(NoGrad, DisablesGraphConstruction) {
  Rng rng(13);
  Tensor a = rand_tensor({2, 2}, rng);
  NoGradGuard ng;
  Tensor out = matmul(a, a);
  EXPECT_FALSE(out.requires_grad());
}
