#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "lsgan/nnet.hpp"
#include "oracles/finite_diff.hpp"

using namespace lsgan;
using namespace lsgan::nn;

namespace {

// One network per layer kind, small enough for exhaustive finite differences.
std::vector<NetSpec> layer_kind_specs() {
  std::vector<NetSpec> out;
  NetSpec dense{3, {2, 3}, {{LayerKind::dense_tanh, 8, 4}}};
  NetSpec residual{3, {2}, {{LayerKind::residual_tanh, 5, 5}}};
  NetSpec tanh_only{3, {2}, {{LayerKind::tanh, 5, 5}, {LayerKind::linear, 5, 2}}};
  NetSpec linear{4, {}, {{LayerKind::linear, 4, 3}}};
  out = {dense, residual, tanh_only, linear};
  return out;
}

double weighted_output(const Network& net, const ParamSet& p, const Matrix& x, const CodeMatrix& c,
                       const Matrix& w) {
  return (net.forward(p, x, c).array() * w.array()).sum();
}

}  // namespace

TEST(Residual, ZeroWeightsIsIdentity) {
  Vector x(3);
  x << 0.5, -1.0, 2.0;
  EXPECT_EQ(residual_forward(x, Matrix::Zero(3, 3), Vector::Zero(3)), x);
}

TEST(Residual, ZeroInputZeroBiasIsZero) {
  std::mt19937_64 rng(1);
  EXPECT_EQ(residual_forward(Vector::Zero(4), oracle::random_matrix(4, 4, rng), Vector::Zero(4)),
            Vector::Zero(4));
}

TEST(Residual, JacobianMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  Matrix W = oracle::random_matrix(4, 4, rng);
  Vector b = oracle::random_matrix(4, 1, rng);
  Vector x = oracle::random_matrix(4, 1, rng);
  Vector t = (W * x + b).array().tanh();
  Matrix J = Matrix::Identity(4, 4) + (1.0 - t.array().square()).matrix().asDiagonal() * W;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      Matrix xm = x;
      const double fd = oracle::central_diff(xm, j, 0, [&] { return residual_forward(xm, W, b)(i); });
      EXPECT_LT(oracle::rel_err(J(i, j), fd), 1e-5);
    }
}

TEST(Residual, LipschitzBound) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix W = oracle::random_matrix(5, 5, rng);
    W /= W.operatorNorm();
    W *= 0.9;
    Vector b = oracle::random_matrix(5, 1, rng);
    Vector x = oracle::random_matrix(5, 1, rng), y = oracle::random_matrix(5, 1, rng);
    const double lhs = (residual_forward(x, W, b) - residual_forward(y, W, b)).norm();
    EXPECT_LE(lhs, (1.0 + W.operatorNorm()) * (x - y).norm() + 1e-12);
  }
}

TEST(THead, KnownValues) {
  Vector s(3);
  s << 1, 0, 0;
  EXPECT_NEAR(t_head(s), 0.5773502692, 1e-10);
  const double c = 2.5;
  s << c, c, c;
  EXPECT_NEAR(t_head(s), -c / std::sqrt(3.0), 1e-14);
}

TEST(THead, GradientHasUnitNorm) {
  for (int n = 2; n < 8; ++n) {
    Vector w = t_head_weights(n);
    EXPECT_NEAR(w.norm(), 1.0, 1e-15);
    EXPECT_GT(w(0), 0.0);
    for (int i = 1; i < n; ++i) EXPECT_LT(w(i), 0.0);
  }
  EXPECT_THROW(t_head_weights(1), ShapeError);
}

TEST(RestrictedSoftmax, Values) {
  Vector s(3);
  s << 42.0, 0.0, 0.0;
  Vector p = restricted_softmax(s);
  EXPECT_DOUBLE_EQ(p(0), 0.5);
  EXPECT_DOUBLE_EQ(p(1), 0.5);
  s << 0.0, std::log(3.0), 0.0;
  p = restricted_softmax(s);
  EXPECT_NEAR(p(0), 0.75, 1e-15);
  EXPECT_NEAR(p(1), 0.25, 1e-15);
  Vector shifted = s;
  shifted.tail(2).array() += 123.0;
  EXPECT_NEAR((restricted_softmax(shifted) - p).norm(), 0.0, 1e-14);
  Vector big(3);
  big << 0.0, 1000.0, -1000.0;
  p = restricted_softmax(big);
  EXPECT_TRUE(p.allFinite());
  EXPECT_NEAR(p.sum(), 1.0, 1e-15);
}

TEST(Network, LayerGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  for (const auto& spec : layer_kind_specs()) {
    Network net(spec);
    for (int trial = 0; trial < 5; ++trial) {
      ParamSet p = oracle::random_params(net, rng);
      Matrix x = oracle::random_matrix(spec.lead_dim, 3, rng);
      CodeMatrix c = oracle::random_codes(spec.cardinalities, 3, rng);
      Matrix w = oracle::random_matrix(spec.output_dim(), 3, rng);
      Cache cache;
      net.forward(p, x, c, &cache);
      ParamSet g = p.zeros_like();
      Matrix dx = net.backward(p, cache, c, w, &g);
      auto f = [&](const ParamSet& q) { return weighted_output(net, q, x, c, w); };
      EXPECT_LT(oracle::worst_param_error(p, g, f, rng, 1000), 1e-4) << to_string(spec.layers[0].kind);
      for (Eigen::Index r = 0; r < x.rows(); ++r)
        for (Eigen::Index b = 0; b < x.cols(); ++b) {
          const double fd = oracle::central_diff(x, r, b, [&] { return weighted_output(net, p, x, c, w); });
          EXPECT_LT(oracle::rel_err(dx(r, b), fd), 1e-4);
        }
    }
  }
}

TEST(Network, GeneratorZeroParamsGiveZeroOutput) {
  Network gen(generator_spec(6, {3, 2}, 10));
  std::mt19937_64 rng(5);
  Matrix z = oracle::random_matrix(6, 4, rng);
  CodeMatrix c = oracle::random_codes({3, 2}, 4, rng);
  EXPECT_EQ(gen.forward(gen.zero_params(), z, c), Matrix::Zero(10, 4));
}

TEST(Network, DiscriminatorZeroParamsGiveZeroScores) {
  Network disc(discriminator_spec(12, {3}, 2, {8, 2, {6, 4}}));
  std::mt19937_64 rng(6);
  Matrix x = oracle::random_matrix(12, 5, rng);
  CodeMatrix c = oracle::random_codes({3}, 5, rng);
  Matrix out = disc.forward(disc.zero_params(), x, c);
  EXPECT_EQ(out, Matrix::Zero(3, 5));
  Matrix probs = restricted_softmax(out);
  for (Eigen::Index b = 0; b < 5; ++b) EXPECT_NEAR(probs.col(b).sum(), 1.0, 1e-15);
}

TEST(Network, ForwardIsDeterministic) {
  Network gen(generator_spec(6, {3, 2}, 10));
  std::mt19937_64 r1(7), r2(7);
  auto p1 = oracle::random_params(gen, r1);
  auto p2 = oracle::random_params(gen, r2);
  Matrix z = oracle::random_matrix(6, 4, r1);
  CodeMatrix c = oracle::random_codes({3, 2}, 4, r1);
  EXPECT_EQ(gen.forward(p1, z, c), gen.forward(p2, z, c));
}

TEST(Network, GeneratorParameterGradients) {
  Network gen(generator_spec(4, {3, 2}, 7));
  std::mt19937_64 rng(8);
  ParamSet p = oracle::random_params(gen, rng);
  Matrix z = oracle::random_matrix(4, 3, rng);
  CodeMatrix c = oracle::random_codes({3, 2}, 3, rng);
  Matrix w = oracle::random_matrix(7, 3, rng);
  Cache cache;
  gen.forward(p, z, c, &cache);
  ParamSet g = p.zeros_like();
  gen.backward(p, cache, c, w, &g);
  auto f = [&](const ParamSet& q) { return weighted_output(gen, q, z, c, w); };
  EXPECT_LT(oracle::worst_param_error(p, g, f, rng, 100000), 1e-4);
}

TEST(Network, DiscriminatorInputGradient) {
  Network disc(discriminator_spec(6, {3, 2}, 2, {8, 2, {5, 4}}));
  std::mt19937_64 rng(9);
  ParamSet p = oracle::random_params(disc, rng);
  Matrix x = oracle::random_matrix(6, 2, rng);
  CodeMatrix c = oracle::random_codes({3, 2}, 2, rng);
  Vector head = t_head_weights(3);
  Cache cache;
  disc.forward(p, x, c, &cache);
  Matrix dx = disc.backward(p, cache, c, head.replicate(1, 2), nullptr);
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index b = 0; b < x.cols(); ++b) {
      const double fd = oracle::central_diff(x, r, b, [&] { return t_head_batch(disc.forward(p, x, c)).sum(); });
      EXPECT_LT(oracle::rel_err(dx(r, b), fd), 1e-4);
    }
}

TEST(Network, InvalidConditionCode) {
  Network disc(discriminator_spec(3, {2}, 2, {4, 1, {}}));
  CodeMatrix c(1, 1);
  c(0, 0) = 2;
  EXPECT_THROW(disc.forward(disc.zero_params(), Matrix::Zero(3, 1), c), InvalidConditionError);
  c(0, 0) = -1;
  EXPECT_THROW(disc.forward(disc.zero_params(), Matrix::Zero(3, 1), c), InvalidConditionError);
  EXPECT_THROW(disc.forward(disc.zero_params(), Matrix::Zero(4, 1), CodeMatrix::Zero(1, 1)), ShapeError);
}

TEST(Penalty, ParameterGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  for (const auto& widths : {DiscriminatorWidths{6, 2, {5, 4}}, DiscriminatorWidths{4, 1, {}}}) {
    Network disc(discriminator_spec(5, {3, 2}, 2, widths));
    for (int trial = 0; trial < 3; ++trial) {
      ParamSet p = oracle::random_params(disc, rng, 0.6);
      Matrix x = oracle::random_matrix(5, 4, rng);
      CodeMatrix c = oracle::random_codes({3, 2}, 4, rng);
      Vector head = t_head_weights(3);
      ParamSet g = p.zeros_like();
      const double weight = 1.7;
      auto res = disc.input_gradient_penalty(p, x, c, head, &g, weight);
      auto f = [&](const ParamSet& q) {
        return weight * disc.input_gradient_penalty(q, x, c, head, nullptr, 1.0).penalty;
      };
      EXPECT_NEAR(f(p), weight * res.penalty, 1e-15);
      EXPECT_LT(oracle::worst_param_error(p, g, f, rng, 100000), 1e-4);
    }
  }
}

TEST(Penalty, GradientNormsMatchFiniteDifferences) {
  Network disc(discriminator_spec(4, {2}, 2, {6, 2, {5}}));
  std::mt19937_64 rng(11);
  ParamSet p = oracle::random_params(disc, rng);
  Matrix x = oracle::random_matrix(4, 3, rng);
  CodeMatrix c = oracle::random_codes({2}, 3, rng);
  Vector head = t_head_weights(3);
  auto res = disc.input_gradient_penalty(p, x, c, head, nullptr, 1.0);
  for (Eigen::Index b = 0; b < 3; ++b) {
    double sq = 0.0;
    for (Eigen::Index r = 0; r < 4; ++r) {
      const double fd = oracle::central_diff(x, r, b, [&] { return t_head_batch(disc.forward(p, x, c))(b); });
      sq += fd * fd;
    }
    EXPECT_LT(oracle::rel_err(res.grad_norms(b), std::sqrt(sq)), 1e-6);
  }
}

TEST(Penalty, ZeroNetworkGivesOne) {
  Network disc(discriminator_spec(4, {2}, 2, {6, 2, {5}}));
  std::mt19937_64 rng(12);
  Matrix x = oracle::random_matrix(4, 3, rng);
  auto p = disc.zero_params();
  ParamSet g = p.zeros_like();
  auto res = disc.input_gradient_penalty(p, x, oracle::random_codes({2}, 3, rng), t_head_weights(3), &g, 1.0);
  EXPECT_DOUBLE_EQ(res.penalty, 1.0);
  EXPECT_TRUE(g.all_finite());
}

TEST(Serialization, RoundTripIsExact) {
  Network gen(generator_spec(4, {3, 2}, 7));
  std::mt19937_64 rng(13);
  ParamSet p = oracle::random_params(gen, rng);
  std::stringstream bin;
  write_params(p, bin);
  EXPECT_EQ(bin.str().size(), p.scalar_count() * 8);
  ParamSet q = read_params(param_manifest(p), bin);
  ASSERT_TRUE(q.same_layout(p));
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    EXPECT_EQ(q.tensors[i].name, p.tensors[i].name);
    EXPECT_EQ(q.tensors[i].value, p.tensors[i].value);
  }
}

TEST(Serialization, LittleEndianLayout) {
  ParamSet p;
  p.tensors.push_back({"x", Matrix::Constant(1, 1, 1.0), 1, 1});
  std::stringstream bin;
  write_params(p, bin);
  const std::string s = bin.str();
  // 1.0 = 0x3FF0000000000000
  EXPECT_EQ(static_cast<unsigned char>(s[7]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(s[6]), 0xF0);
  EXPECT_EQ(static_cast<unsigned char>(s[0]), 0x00);
  std::stringstream truncated(s.substr(0, 4));
  EXPECT_THROW(read_params(param_manifest(p), truncated), DataError);
}
