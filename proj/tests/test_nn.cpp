#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "o4a/nn.hpp"

using namespace o4a;

namespace {

MlpParams random_mlp(Rng& rng, OutputHead head = OutputHead::Identity) {
  const int in = 2 + static_cast<int>(uniform_index(rng, 5));
  const int h1 = 3 + static_cast<int>(uniform_index(rng, 6));
  const int h2 = 3 + static_cast<int>(uniform_index(rng, 6));
  const int out = 1 + static_cast<int>(uniform_index(rng, 4));
  auto p = make_mlp({in, h1, h2, out}, head, rng);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& l : p.layers) l.biases = l.biases.unaryExpr([&](double) { return n(rng); });
  return p;
}

MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> n(0.0, 1.0);
  return MatrixXd::NullaryExpr(r, c, [&] { return n(rng); });
}

FiniteDiffOptions kink_aware(const MatrixXd& input) {
  FiniteDiffOptions o;
  o.kink_signature = [input](const MlpParams& p) { return relu_signature(p, input); };
  return o;
}

// Loss = sum of squares of outputs, weighted by a fixed random matrix.
LossAndGrad weighted_output_loss(const MatrixXd& input, const MatrixXd& weights) {
  return [input, weights](const MlpParams& p) {
    ForwardCache cache;
    const MatrixXd out = mlp_forward(p, input, &cache);
    const double loss = (weights.array() * out.array().square()).sum();
    const MatrixXd grad = 2.0 * weights.array() * out.array();
    return std::pair{loss, mlp_backward(p, cache, grad).grads};
  };
}

}  // namespace

TEST(MlpForward, ZeroWeightsGiveZeroOutput) {
  Rng rng(1);
  auto p = make_mlp({4, 5, 3}, OutputHead::Identity, rng);
  for (auto& l : p.layers) l.weights.setZero();
  const VectorXd out = mlp_apply(p, VectorXd::Constant(4, 2.0));
  EXPECT_EQ(out, VectorXd::Zero(3));
}

TEST(MlpForward, IdentityLayerPassesNonnegativeInput) {
  MlpParams p;
  p.layers.push_back({MatrixXd::Identity(3, 3), VectorXd::Zero(3)});
  const VectorXd v = (VectorXd(3) << 0.5, 0.0, 2.0).finished();
  EXPECT_EQ(mlp_apply(p, v), v);
}

TEST(MlpForward, SoftplusHeadIsPositive) {
  Rng rng(2);
  auto p = make_mlp({3, 8, 1}, OutputHead::Softplus, rng);
  p.layers.back().biases[0] = -50.0;
  const MatrixXd out = mlp_forward(p, random_matrix(rng, 3, 200) * 10.0);
  EXPECT_GT(out.minCoeff(), 0.0);
}

TEST(MlpForward, DimensionMismatchThrows) {
  Rng rng(3);
  const auto p = make_mlp({3, 4, 2}, OutputHead::Identity, rng);
  EXPECT_THROW(mlp_forward(p, MatrixXd::Zero(4, 1)), DimensionMismatch);
  MlpParams broken = p;
  broken.layers[1].weights = MatrixXd::Zero(2, 7);
  EXPECT_THROW(broken.validate(), DimensionMismatch);
}

TEST(MlpForward, GlorotInitBoundsAndZeroBiases) {
  Rng rng(4);
  const auto p = make_mlp({72, 64, 16}, OutputHead::Identity, rng);
  EXPECT_LE(p.layers[0].weights.cwiseAbs().maxCoeff(), std::sqrt(6.0 / (72 + 64)));
  EXPECT_LE(p.layers[1].weights.cwiseAbs().maxCoeff(), std::sqrt(6.0 / (64 + 16)));
  EXPECT_EQ(p.layers[0].biases, VectorXd::Zero(64));
}

TEST(MlpBackward, ZeroOutputGradGivesZeroGradients) {
  Rng rng(5);
  const auto p = random_mlp(rng);
  ForwardCache cache;
  const MatrixXd out = mlp_forward(p, random_matrix(rng, p.input_dim(), 6), &cache);
  const auto r = mlp_backward(p, cache, MatrixXd::Zero(out.rows(), out.cols()));
  for (const auto& g : r.grads) {
    EXPECT_EQ(g.weights.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(g.biases.cwiseAbs().maxCoeff(), 0.0);
  }
  EXPECT_EQ(r.input_grad.cwiseAbs().maxCoeff(), 0.0);
}

TEST(MlpBackward, LinearLayerWeightGradIsOuterProduct) {
  Rng rng(6);
  auto p = make_mlp({4, 3}, OutputHead::Identity, rng);
  const VectorXd x = random_matrix(rng, 4, 1).col(0);
  const VectorXd g = random_matrix(rng, 3, 1).col(0);
  ForwardCache cache;
  mlp_forward(p, x, &cache);
  const auto r = mlp_backward(p, cache, g);
  EXPECT_TRUE(r.grads[0].weights.isApprox(g * x.transpose(), 1e-14));
  EXPECT_TRUE(r.grads[0].biases.isApprox(g, 1e-14));
  EXPECT_TRUE(r.input_grad.col(0).isApprox(p.layers[0].weights.transpose() * g, 1e-14));
}

TEST(MlpBackward, StaleCacheIsRejected) {
  Rng rng(7);
  auto p = random_mlp(rng);
  ForwardCache cache;
  const MatrixXd out = mlp_forward(p, random_matrix(rng, p.input_dim(), 2), &cache);
  ++p.revision;
  EXPECT_THROW(mlp_backward(p, cache, MatrixXd::Zero(out.rows(), out.cols())), ContractViolation);
}

TEST(MlpBackward, MatchesFiniteDifferences) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_mlp(rng, trial % 2 ? OutputHead::Softplus : OutputHead::Identity);
    const MatrixXd input = random_matrix(rng, p.input_dim(), 5);
    const MatrixXd w = random_matrix(rng, p.output_dim(), 5);
    const auto rep = finite_diff_check(p, weighted_output_loss(input, w), kink_aware(input));
    EXPECT_LT(rep.max_relative_error, 1e-6) << "trial " << trial;
    EXPECT_GT(rep.checked, 0u);
  }
}

TEST(MlpBackward, InputGradientMatchesFiniteDifferences) {
  Rng rng(9);
  const auto p = random_mlp(rng);
  VectorXd x = random_matrix(rng, p.input_dim(), 1).col(0);
  const VectorXd w = random_matrix(rng, p.output_dim(), 1).col(0);
  ForwardCache cache;
  mlp_forward(p, x, &cache);
  const VectorXd g = mlp_backward(p, cache, w).input_grad.col(0);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    VectorXd xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double num = (w.dot(mlp_apply(p, xp)) - w.dot(mlp_apply(p, xm))) / (2 * h);
    EXPECT_NEAR(g[i], num, 1e-6 * std::max(1.0, std::abs(num)));
  }
}

TEST(ContrastiveLoss, ZeroAtMargins) {
  const VectorXd a = VectorXd::Zero(3);
  const VectorXd p = (VectorXd(3) << 1, 0, 0).finished();
  MatrixXd n(3, 2);
  n << 10, 0, 0, 12, 0, 0;
  const auto r = contrastive_loss(a, p, n, 1.0, 10.0);
  EXPECT_DOUBLE_EQ(r.loss, 0.0);
}

TEST(ContrastiveLoss, CoincidentPositiveCostsOne) {
  const VectorXd a = VectorXd::Ones(2);
  MatrixXd n(2, 1);
  n << 20, 0;
  const auto r = contrastive_loss(a, a, n, 1.0, 10.0);
  EXPECT_DOUBLE_EQ(r.loss, 1.0);
  EXPECT_EQ(r.grad_anchor, VectorXd::Zero(2));
}

TEST(ContrastiveLoss, SingleViolatingNegativeIsAveraged) {
  const VectorXd a = VectorXd::Zero(2);
  const VectorXd p = (VectorXd(2) << 1, 0).finished();
  MatrixXd n(2, 4);
  n << 9, 20, 0, 0, 0, 0, 30, -40;
  const auto r = contrastive_loss(a, p, n, 1.0, 10.0);
  EXPECT_NEAR(r.loss, 1.0 / 4.0, 1e-15);
}

TEST(ContrastiveLoss, PreconditionsEnforced) {
  const VectorXd a = VectorXd::Zero(2);
  EXPECT_THROW(contrastive_loss(a, a, MatrixXd(2, 0), 1.0, 10.0), std::invalid_argument);
  EXPECT_THROW(contrastive_loss(a, a, MatrixXd::Ones(2, 1), 10.0, 1.0), ContractViolation);
  EXPECT_THROW(contrastive_loss(a, VectorXd::Zero(3), MatrixXd::Ones(2, 1), 1.0, 10.0), DimensionMismatch);
}

TEST(ContrastiveLoss, NonnegativeAndZeroOnlyAtMargins) {
  Rng rng(10);
  for (int i = 0; i < 200; ++i) {
    const MatrixXd m = random_matrix(rng, 4, 5) * 5.0;
    const auto r = contrastive_loss(m.col(0), m.col(1), m.rightCols(3), 1.0, 10.0);
    EXPECT_GE(r.loss, 0.0);
    const bool at_margin = std::abs((m.col(0) - m.col(1)).norm() - 1.0) < 1e-12;
    if (r.loss == 0.0) {
      EXPECT_TRUE(at_margin);
    }
  }
}

TEST(ContrastiveLoss, GradientsMatchFiniteDifferences) {
  Rng rng(11);
  const MatrixXd m = random_matrix(rng, 3, 6) * 3.0;
  auto loss = [&](const MatrixXd& mm) {
    return contrastive_loss(mm.col(0), mm.col(1), mm.rightCols(4), 1.0, 10.0).loss;
  };
  const auto r = contrastive_loss(m.col(0), m.col(1), m.rightCols(4), 1.0, 10.0);
  MatrixXd analytic(3, 6);
  analytic << r.grad_anchor, r.grad_positive, r.grad_negatives;
  const double h = 1e-6;
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      MatrixXd p = m, q = m;
      p(i, c) += h;
      q(i, c) -= h;
      const double num = (loss(p) - loss(q)) / (2 * h);
      EXPECT_NEAR(analytic(i, c), num, 1e-6 * std::max(1.0, std::abs(num)));
    }
}

TEST(CrossEntropy, UniformLogits) {
  const auto r = cross_entropy_loss(VectorXd::Zero(4), 2);
  EXPECT_NEAR(r.loss, std::log(4.0), 1e-15);
}

TEST(CrossEntropy, SaturatedTargetAndGradSum) {
  VectorXd l = VectorXd::Zero(4);
  l[1] = 1e6;
  const auto r = cross_entropy_loss(l, 1);
  EXPECT_NEAR(r.loss, 0.0, 1e-12);
  Rng rng(12);
  for (int i = 0; i < 50; ++i) {
    const auto g = cross_entropy_loss(random_matrix(rng, 4, 1).col(0) * 3.0, i % 4).grad;
    EXPECT_NEAR(g.sum(), 0.0, 1e-14);
  }
  EXPECT_THROW(cross_entropy_loss(l, 4), std::out_of_range);
}

TEST(MseLoss, Examples) {
  const VectorXd a = (VectorXd(2) << 3, 1).finished();
  const VectorXd b = (VectorXd(2) << 1, 1).finished();
  EXPECT_EQ(mse_loss(a, a).loss, 0.0);
  const auto r = mse_loss(a, b);
  EXPECT_DOUBLE_EQ(r.loss, 2.0);
  EXPECT_EQ(r.grad, (VectorXd(2) << 2, 0).finished());
  EXPECT_EQ(mse_loss(b, a).loss, r.loss);
  EXPECT_THROW(mse_loss(a, VectorXd::Zero(3)), DimensionMismatch);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  Rng rng(13);
  auto p = random_mlp(rng);
  const auto before = p;
  auto st = AdamState::for_params(p);
  adam_step(p, zeros_like(p), st, 1e-3);
  EXPECT_TRUE(p == before);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, FirstStepMovesByLrTimesSign) {
  Rng rng(14);
  auto p = random_mlp(rng);
  const auto before = p;
  auto g = zeros_like(p);
  for (auto& l : g) {
    l.weights = random_matrix(rng, l.weights.rows(), l.weights.cols());
    l.biases = random_matrix(rng, l.biases.size(), 1).col(0);
  }
  auto st = AdamState::for_params(p);
  const double lr = 1e-3;
  adam_step(p, g, st, lr);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const MatrixXd delta = p.layers[i].weights - before.layers[i].weights;
    const MatrixXd expect = -lr * g[i].weights.array().sign().matrix();
    EXPECT_LT((delta - expect).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Adam, ZeroLearningRateAndNonFinite) {
  Rng rng(15);
  auto p = random_mlp(rng);
  const auto before = p;
  auto st = AdamState::for_params(p);
  auto g = zeros_like(p);
  g[0].weights.setOnes();
  adam_step(p, g, st, 0.0);
  EXPECT_TRUE(p == before);
  g[0].weights(0, 0) = std::nan("");
  EXPECT_THROW(adam_step(p, g, st, 1e-3), NonFiniteGradient);
  EXPECT_TRUE(p == before);
}

TEST(FiniteDiff, LinearNetIsExact) {
  Rng rng(16);
  const auto p = make_mlp({3, 2}, OutputHead::Identity, rng);
  const MatrixXd input = random_matrix(rng, 3, 4);
  const auto rep = finite_diff_check(p, weighted_output_loss(input, random_matrix(rng, 2, 4)));
  EXPECT_LT(rep.max_relative_error, 1e-8);
  EXPECT_EQ(rep.checked, p.parameter_count());
}

TEST(FiniteDiff, ConstantLossHasZeroGradient) {
  Rng rng(17);
  const auto p = random_mlp(rng);
  const LossAndGrad constant = [](const MlpParams& q) { return std::pair{3.0, zeros_like(q)}; };
  const auto rep = finite_diff_check(p, constant);
  EXPECT_EQ(rep.max_relative_error, 0.0);
}

TEST(FiniteDiff, DetectsWrongGradient) {
  Rng rng(18);
  const auto p = random_mlp(rng);
  const MatrixXd input = random_matrix(rng, p.input_dim(), 3);
  auto good = weighted_output_loss(input, random_matrix(rng, p.output_dim(), 3));
  const LossAndGrad bad = [good](const MlpParams& q) {
    auto r = good(q);
    r.second[0].biases *= 2.0;
    return r;
  };
  EXPECT_GT(finite_diff_check(p, bad, kink_aware(input)).max_relative_error, 0.1);
}

TEST(ModelFile, RoundTripIsExact) {
  Rng rng(19);
  const auto p = random_mlp(rng, OutputHead::Softplus);
  std::stringstream ss;
  write_model(ss, p, ModuleTag::Geodesic, "env-a");
  const auto f = read_model(ss);
  EXPECT_TRUE(f.params == p);
  EXPECT_EQ(f.tag, ModuleTag::Geodesic);
  EXPECT_EQ(f.env_id, "env-a");
}

TEST(ModelFile, RejectsBadMagicAndVersion) {
  std::stringstream bad("XXXX");
  EXPECT_THROW(read_model(bad), FormatError);
  Rng rng(20);
  std::stringstream ss;
  write_model(ss, random_mlp(rng), ModuleTag::Backbone);
  std::string bytes = ss.str();
  bytes[4] = 9;
  std::stringstream wrong(bytes);
  EXPECT_THROW(read_model(wrong), FormatError);
}
