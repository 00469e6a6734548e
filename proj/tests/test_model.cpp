#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "mfsgd/dataset.hpp"
#include "mfsgd/model.hpp"

using namespace mfsgd;

namespace {

FeatureMatrixF rows_of(std::initializer_list<std::initializer_list<float>> rows) {
  const auto k = static_cast<Index>(rows.begin()->size());
  Eigen::MatrixXf m(static_cast<Index>(rows.size()), k);
  Index r = 0;
  for (const auto& row : rows) {
    Index d = 0;
    for (float x : row) m(r, d++) = x;
    ++r;
  }
  return FeatureMatrixF::from_floats(m);
}

Hyperparams no_reg(Index k) {
  Hyperparams h;
  h.k = k;
  h.lambda_p = h.lambda_q = 0.0;
  return h;
}

}  // namespace

// Learning-rate schedule

TEST(LearningRate, Examples) {
  EXPECT_DOUBLE_EQ(lr_at_epoch(LearningRateSchedule(0.08, 0.3), 0), 0.08);
  EXPECT_NEAR(lr_at_epoch(LearningRateSchedule(0.08, 0.3), 1), 0.0615385, 1e-7);
  EXPECT_NEAR(lr_at_epoch(LearningRateSchedule(0.08, 0.2), 4), 0.0307692, 1e-7);
}

TEST(LearningRate, StrictlyDecreasingWithDecayAndConstantWithout) {
  const LearningRateSchedule decaying(0.08, 0.3);
  for (int t = 1; t <= 100; ++t) EXPECT_LT(lr_at_epoch(decaying, t), lr_at_epoch(decaying, t - 1));
  const LearningRateSchedule flat(0.08, 0.0);
  for (int t = 0; t <= 100; ++t) EXPECT_EQ(lr_at_epoch(flat, t), 0.08);
}

TEST(LearningRate, RejectsNegativeEpochAndBadParameters) {
  EXPECT_THROW(lr_at_epoch(LearningRateSchedule(0.08, 0.3), -1), UsageError);
  EXPECT_THROW(LearningRateSchedule(0.0, 0.3), UsageError);
  EXPECT_THROW(LearningRateSchedule(0.08, -0.1), UsageError);
}

// Prediction

TEST(Predict, Examples) {
  EXPECT_EQ(predict(rows_of({{1, 0}}), rows_of({{0, 1}}), 0, 0), 0.0);
  EXPECT_EQ(predict(rows_of({{1, 1}}), rows_of({{1, 1}}), 0, 0), 2.0);
  EXPECT_EQ(predict(rows_of({{0.5f, 0.5f, 0.5f, 0.5f}}), rows_of({{1, 2, 3, 4}}), 0, 0), 5.0);
}

TEST(Predict, OutOfRangeIsUsageError) {
  const auto P = rows_of({{1, 0}});
  EXPECT_THROW(predict(P, P, 1, 0), UsageError);
  EXPECT_THROW(predict(P, P, 0, 3), UsageError);
}

TEST(Predict, SymmetricUnderSwappingSides) {
  const auto P = init_features(20, 16, 1);
  const auto Q = init_features(30, 16, 2);
  for (Index u = 0; u < 20; ++u) {
    for (Index v = 0; v < 30; ++v) EXPECT_EQ(predict(P, Q, u, v), predict(Q, P, v, u));
  }
}

// SGD update

TEST(SgdUpdate, ExactPredictionWithoutRegularizationIsIdentity) {
  auto P = rows_of({{0.3f, -1.25f, 2.0f}});
  auto Q = rows_of({{1.0f, 0.5f, 0.25f}});
  const auto P0 = P, Q0 = Q;
  const float r = static_cast<float>(predict(P, Q, 0, 0));
  ASSERT_EQ(static_cast<float>(double(0.3f) * 1.0 - 1.25 * 0.5 + 2.0 * 0.25), r);
  sgd_update(P, Q, {0, 0, r}, 0.1, no_reg(3));
  EXPECT_TRUE(P == P0);
  EXPECT_TRUE(Q == Q0);
}

TEST(SgdUpdate, HandComputedStepUsesPreUpdateSnapshot) {
  auto P = rows_of({{1, 0}});
  auto Q = rows_of({{0, 1}});
  sgd_update(P, Q, {0, 0, 1.0f}, 0.1, no_reg(2));
  EXPECT_FLOAT_EQ(P.get(0, 0), 1.0f);
  EXPECT_FLOAT_EQ(P.get(0, 1), 0.1f);
  EXPECT_FLOAT_EQ(Q.get(0, 0), 0.1f);
  EXPECT_FLOAT_EQ(Q.get(0, 1), 1.0f);
}

TEST(SgdUpdate, HandComputedStepWithRegularization) {
  auto P = rows_of({{1, 0}});
  auto Q = rows_of({{0, 1}});
  Hyperparams h = no_reg(2);
  h.lambda_p = h.lambda_q = 0.05;
  sgd_update(P, Q, {0, 0, 1.0f}, 0.1, h);
  EXPECT_FLOAT_EQ(P.get(0, 0), 0.995f);
  EXPECT_FLOAT_EQ(P.get(0, 1), 0.1f);
  EXPECT_FLOAT_EQ(Q.get(0, 0), 0.1f);
  EXPECT_FLOAT_EQ(Q.get(0, 1), 0.995f);
}

TEST(SgdUpdate, SmallStepNeverIncreasesSampleError) {
  std::mt19937_64 gen(3);
  std::normal_distribution<float> normal;
  for (int trial = 0; trial < 500; ++trial) {
    Eigen::VectorXf p(8), q(8);
    for (Index d = 0; d < 8; ++d) p(d) = normal(gen), q(d) = normal(gen);
    p.normalize();
    q.normalize();
    auto P = FeatureMatrixF::from_floats(Eigen::MatrixXf(p.transpose()));
    auto Q = FeatureMatrixF::from_floats(Eigen::MatrixXf(q.transpose()));
    const float r = normal(gen);
    const double before = std::pow(r - predict(P, Q, 0, 0), 2);
    sgd_update(P, Q, {0, 0, r}, 1e-3, no_reg(8));
    EXPECT_LE(std::pow(r - predict(P, Q, 0, 0), 2), before + 1e-12);
  }
}

TEST(SgdUpdate, ErrorsOnBadInput) {
  auto P = rows_of({{1, 0}});
  auto Q = rows_of({{0, 1}});
  EXPECT_THROW(sgd_update(P, Q, {1, 0, 1.0f}, 0.1, no_reg(2)), UsageError);
  EXPECT_THROW(sgd_update(P, Q, {0, 0, 1.0f}, 0.0, no_reg(2)), UsageError);
  EXPECT_THROW(sgd_update(P, Q, {0, 0, 1e30f}, 1e10, no_reg(2)), DivergenceError);
}

TEST(SgdUpdate, HalfStorageMatchesNarrowedFloatStep) {
  auto Pf = rows_of({{0.25f, 0.5f}});
  auto Qf = rows_of({{0.75f, -0.5f}});
  auto Ph = FeatureMatrixH::from_floats(Pf.widened());
  auto Qh = FeatureMatrixH::from_floats(Qf.widened());
  sgd_update(Pf, Qf, {0, 0, 1.0f}, 0.1, no_reg(2));
  sgd_update(Ph, Qh, {0, 0, 1.0f}, 0.1, no_reg(2));
  for (Index d = 0; d < 2; ++d) {
    EXPECT_EQ(Ph.get(0, d), decode_f16(encode_f16(Pf.get(0, d))));
    EXPECT_EQ(Qh.get(0, d), decode_f16(encode_f16(Qf.get(0, d))));
  }
}

// Epoch

TEST(EpochSerial, EmptyDatasetChangesNothing) {
  auto P = init_features(3, 4, 1), Q = init_features(3, 4, 2);
  const auto P0 = P, Q0 = Q;
  EXPECT_EQ(epoch_serial<float>({}, P, Q, Hyperparams{.k = 4}, 0), 0u);
  EXPECT_TRUE(P == P0);
  EXPECT_TRUE(Q == Q0);
}

TEST(EpochSerial, SingleSampleEqualsLoneUpdate) {
  Hyperparams h{.k = 4};
  auto P = init_features(3, 4, 1), Q = init_features(3, 4, 2);
  auto P2 = P, Q2 = Q;
  const Sample s{1, 2, 0.7f};
  EXPECT_EQ(epoch_serial<float>(std::span(&s, 1), P, Q, h, 3), 1u);
  sgd_update(P2, Q2, s, static_cast<float>(lr_at_epoch(LearningRateSchedule(h), 3)), h);
  EXPECT_TRUE(P == P2);
  EXPECT_TRUE(Q == Q2);
}

TEST(EpochSerial, ReducesTrainingErrorOnNoiselessData) {
  const auto problem = synth_lowrank(100, 100, 4, 0.1, 0.0, 5);
  ASSERT_EQ(problem.dataset.size(), 1000u);
  Hyperparams h = no_reg(4);
  h.alpha = 0.01;
  auto P = init_features(100, 4, 8), Q = init_features(100, 4, 9);
  const double before = rmse(problem.dataset.samples, P, Q);
  EXPECT_EQ(epoch_serial<float>(problem.dataset.samples, P, Q, h, 0), 1000u);
  EXPECT_LT(rmse(problem.dataset.samples, P, Q), before);
}

// RMSE

TEST(Rmse, Examples) {
  const auto P = rows_of({{1, 0}, {0, 1}});
  const auto Q = rows_of({{1, 0}, {0, 0}});
  const std::vector<Sample> exact{{0, 0, 1.0f}, {1, 0, 0.0f}};
  EXPECT_EQ(rmse(exact, P, Q), 0.0);
  const std::vector<Sample> one{{0, 1, 1.0f}};
  EXPECT_EQ(rmse(one, P, Q), 1.0);
  const std::vector<Sample> two{{0, 0, 4.0f}, {1, 1, 4.0f}};
  EXPECT_NEAR(rmse(two, P, Q), 3.5355339, 1e-6);
  EXPECT_THROW(rmse(std::vector<Sample>{}, P, Q), UsageError);
}

TEST(Rmse, AgreesWithBruteForce) {
  std::mt19937_64 gen(17);
  for (int trial = 0; trial < 20; ++trial) {
    const auto P = init_features(40, 12, gen()), Q = init_features(25, 12, gen());
    const Eigen::MatrixXd Pd = P.widened().cast<double>(), Qd = Q.widened().cast<double>();
    std::uniform_int_distribution<std::uint32_t> u(0, 39), v(0, 24);
    std::uniform_real_distribution<float> r(0.0f, 5.0f);
    std::vector<Sample> samples;
    double sum = 0.0;
    for (int i = 0; i < 300; ++i) {
      const Sample s{u(gen), v(gen), r(gen)};
      samples.push_back(s);
      const double e = s.r - Pd.row(s.u).dot(Qd.row(s.v));
      sum += e * e;
    }
    const double want = std::sqrt(sum / 300.0);
    EXPECT_NEAR(rmse(samples, P, Q), want, 1e-6 * want);
  }
}

TEST(Rmse, MapsPredictionsThroughScaling) {
  const auto P = rows_of({{1}});
  const auto Q = rows_of({{2}});
  const RatingScaling scaling{1.0, 0.5};
  const std::vector<Sample> s{{0, 0, 5.0f}};
  EXPECT_DOUBLE_EQ(rmse(s, P, Q, scaling), 0.0);
}

// Initialization and storage

TEST(InitFeatures, DeterministicAndInRange) {
  EXPECT_TRUE(init_features(5, 8, 42) == init_features(5, 8, 42));
  EXPECT_FALSE(init_features(5, 8, 42) == init_features(5, 8, 43));
  const auto Z = init_features(5, 8, 42, 0.0);
  EXPECT_TRUE((Z.widened().array() == 0.0f).all());
  const auto F = init_features(4, 128, 9);
  const float bound = 1.0f / std::sqrt(128.0f);
  EXPECT_TRUE((F.widened().array() >= 0.0f).all());
  EXPECT_TRUE((F.widened().array() < bound).all());
}

TEST(InitFeatures, HalfIsNarrowedFloat) {
  const auto F = init_features<float>(6, 16, 4);
  const auto H = init_features<Half>(6, 16, 4);
  for (Index r = 0; r < 6; ++r) {
    for (Index d = 0; d < 16; ++d) EXPECT_EQ(H.get(r, d), decode_f16(encode_f16(F.get(r, d))));
  }
}

TEST(FeatureMatrix, RowAccessRoundtrips) {
  FeatureMatrixF M(3, 4);
  const Eigen::Vector4f v(1, 2, 3, 4);
  EXPECT_TRUE(M.store_row(1, v));
  EXPECT_EQ(M.row(1), Eigen::VectorXf(v));
  EXPECT_EQ(M.row(0), Eigen::VectorXf::Zero(4));
  EXPECT_FALSE(M.store_row(2, Eigen::Vector4f(1, INFINITY, 0, 0)));
  EXPECT_FALSE(M.all_finite());
}

TEST(Hyperparams, Validation) {
  EXPECT_NO_THROW(Hyperparams{}.validate());
  EXPECT_THROW((Hyperparams{.k = 0}.validate()), UsageError);
  EXPECT_THROW((Hyperparams{.lambda_p = -1}.validate()), UsageError);
  EXPECT_THROW((Hyperparams{.alpha = 0}.validate()), UsageError);
}
