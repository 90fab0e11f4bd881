#include <limits>

#include <gtest/gtest.h>

#include "caffnet/experiments/piecewise.hpp"
#include "caffnet/experiments/solver.hpp"
#include "caffnet/train.hpp"

using namespace caffnet;
using namespace caffnet::experiments;

namespace {

TrainConfig small(LayerMode mode, std::size_t epochs = 20) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = 16;
    cfg.hidden = {16, 16};
    cfg.layer_mode = mode;
    cfg.adam.lr = 1e-3;
    return cfg;
}

class NanScenario final : public Scenario {
public:
    std::string name() const override { return "nan"; }
    const ConstraintProvider& provider() const override { return provider_; }
    EpochStats train_epoch(Model&, ModelOptimizer&, const CAffineLayer&, const TrainConfig&, std::size_t epoch) const override {
        return {epoch < 3 ? 1.0 : std::numeric_limits<double>::quiet_NaN(), 0.0, 0.0};
    }
    Metrics evaluate(const Model&, const CAffineLayer&, const TrainConfig&) const override { return {}; }

private:
    PiecewiseProvider provider_;
};

}  // namespace

TEST(Train, ZeroLearningRateKeepsInitialLoss) {
    const PiecewiseScenario sc(0);
    TrainConfig cfg = small(LayerMode::CAffNet, 1);
    cfg.adam.lr = 0.0;
    cfg.batch_size = 50;
    const Model model = Model::make(1, 1, cfg.hidden, 0);
    const TrainResult r = train(model, sc, cfg);
    ASSERT_EQ(r.trace.size(), 1u);
    const CAffineLayer layer(sc.provider(), cfg.layer);
    const Matrix f = model.f.forward(sc.train_inputs()), w = model.w.forward(sc.train_inputs());
    double loss = 0.0;
    for (Eigen::Index j = 0; j < f.cols(); ++j) {
        const Vector y = layer.forward(sc.train_system(static_cast<std::size_t>(j)), f.col(j), w.col(j)).output;
        loss += sc.sample_loss(static_cast<std::size_t>(j), y, nullptr);
    }
    EXPECT_NEAR(r.trace[0].loss, loss / 50.0, 1e-12);
    EXPECT_EQ(r.model.f.weights()[0], model.f.weights()[0]);
}

TEST(Train, DeterministicTrace) {
    const PiecewiseScenario sc(1);
    const TrainConfig cfg = small(LayerMode::CAffNet, 5);
    const TrainResult a = train(Model::make(1, 1, cfg.hidden, 1), sc, cfg);
    const TrainResult b = train(Model::make(1, 1, cfg.hidden, 1), sc, cfg);
    ASSERT_EQ(a.trace.size(), b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_EQ(a.trace[i].loss, b.trace[i].loss);
    EXPECT_EQ(a.model.f.weights()[1], b.model.f.weights()[1]);
}

TEST(Train, CaffnetNeverViolatesSoftDoes) {
    const PiecewiseScenario sc(2);
    const TrainConfig hard = small(LayerMode::CAffNet, 30);
    const TrainResult rh = train(Model::make(1, 1, hard.hidden, 2), sc, hard);
    for (const TraceRow& row : rh.trace) {
        EXPECT_EQ(row.max_violation, 0.0);
        EXPECT_EQ(row.mean_violation, 0.0);
    }
    const CAffineLayer layer(sc.provider(), hard.layer);
    const Metrics mh = sc.evaluate(rh.model, layer, hard);
    EXPECT_EQ(metric(mh, "ineq_max"), 0.0);

    const TrainConfig soft = small(LayerMode::Soft, 30);
    const TrainResult rs = train(Model::make(1, 1, soft.hidden, 2), sc, soft);
    EXPECT_GT(metric(sc.evaluate(rs.model, layer, soft), "ineq_max"), 0.0);

    TrainConfig posthoc = soft;
    posthoc.layer_mode = LayerMode::PostHoc;
    EXPECT_EQ(metric(sc.evaluate(rs.model, layer, posthoc), "ineq_max"), 0.0);
}

TEST(Train, TraceLogsEveryNthAndLastEpoch) {
    const PiecewiseScenario sc(0);
    TrainConfig cfg = small(LayerMode::Soft, 7);
    cfg.log_every = 3;
    const TrainResult r = train(Model::make(1, 1, cfg.hidden, 0), sc, cfg);
    std::vector<std::size_t> epochs;
    for (const auto& row : r.trace) epochs.push_back(row.epoch);
    EXPECT_EQ(epochs, (std::vector<std::size_t>{1, 3, 6, 7}));
}

TEST(Train, DivergenceGuard) {
    const NanScenario sc;
    TrainConfig cfg = small(LayerMode::CAffNet, 10);
    try {
        train(Model::make(1, 1, {2}, 0), sc, cfg);
        FAIL() << "expected DivergenceError";
    } catch (const DivergenceError& e) {
        EXPECT_EQ(e.epoch(), 3u);
    }
}

TEST(Train, ConfigValidation) {
    const PiecewiseScenario sc(0);
    TrainConfig cfg = small(LayerMode::CAffNet, 0);
    EXPECT_THROW(train(Model::make(1, 1, {2}, 0), sc, cfg), ConfigError);
    cfg = small(LayerMode::CAffNet);
    cfg.batch_size = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Train, SolverEqualitiesHoldThroughoutTraining) {
    const SolverScenario sc(solver_instance(0, 40, 40));
    TrainConfig cfg = small(LayerMode::CAffNet, 3);
    cfg.layer.mode = CombinationMode::Lite;
    const TrainResult r = train(Model::make(3, 5, cfg.hidden, 0), sc, cfg);
    for (const auto& row : r.trace) EXPECT_EQ(row.max_violation, 0.0);
    const CAffineLayer layer(sc.provider(), cfg.layer);
    const Metrics m = sc.evaluate(r.model, layer, cfg);
    EXPECT_EQ(metric(m, "eq_max"), 0.0);
    EXPECT_EQ(metric(m, "ineq_pct"), 0.0);
    EXPECT_THROW(metric(m, "nope"), ArgumentError);
}
