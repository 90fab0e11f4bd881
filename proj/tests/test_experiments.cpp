#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "caffnet/experiments/piecewise.hpp"
#include "caffnet/experiments/solver.hpp"
#include "caffnet/experiments/unicycle.hpp"

using namespace caffnet;
using namespace caffnet::experiments;

// ---- piecewise ----

TEST(Piecewise, TargetExamples) {
    EXPECT_NEAR(piecewise_target(-1.0), -2.0, 1e-14);
    EXPECT_EQ(piecewise_target(0.0), -2.0);
    EXPECT_NEAR(piecewise_target(2.0 / 3.0), 2.0, 1e-14);
}

TEST(Piecewise, BoundExamples) {
    const PiecewiseBoundValues at0 = piecewise_bound_values(0.0);
    EXPECT_EQ(at0.upper1, -2.0);
    EXPECT_EQ(at0.upper2, 2.0);
    EXPECT_EQ(at0.lower1, -2.0);
    EXPECT_EQ(at0.lower2, -3.0);
    const PiecewiseBoundValues atm1 = piecewise_bound_values(-1.0);
    EXPECT_NEAR(atm1.upper1, 0.2, 1e-14);
    EXPECT_NEAR(atm1.lower1, -3.0, 1e-14);

    const ConstraintSystem sys = piecewise_bounds(0.0);
    EXPECT_EQ(sys.a(), (Matrix(4, 1) << 1, 1, -1, -1).finished());
    EXPECT_EQ(sys.b(), (Vector(4) << -2, 2, 2, 3).finished());
}

TEST(Piecewise, TargetSatisfiesItsBoundsOnTestGrid) {
    const PiecewiseData d = piecewise_dataset(0);
    ASSERT_EQ(d.test_x.cols(), 400);
    for (Eigen::Index j = 0; j < d.test_x.cols(); ++j) {
        const double x = d.test_x(0, j);
        const ConstraintSystem sys = piecewise_bounds(x);
        EXPECT_LE(violation(sys, Vector::Constant(1, piecewise_target(x))).maxCoeff(), 1e-12) << "x = " << x;
    }
}

TEST(Piecewise, DatasetIsSeeded) {
    const PiecewiseData a = piecewise_dataset(3), b = piecewise_dataset(3), c = piecewise_dataset(4);
    EXPECT_EQ(a.train_x, b.train_x);
    EXPECT_NE(a.train_x, c.train_x);
    EXPECT_EQ(a.train_x.cols(), 50);
    EXPECT_GE(a.train_x.minCoeff(), -2.0);
    EXPECT_LE(a.train_x.maxCoeff(), 2.0);
    EXPECT_EQ(a.test_x(0, 0), -2.0);
    EXPECT_EQ(a.test_x(0, 399), 2.0);
}

// ---- solver ----

TEST(Solver, Construction) {
    const SolverSpec s = make_solver_spec(0);
    EXPECT_EQ(s.g.rows(), 5);
    EXPECT_EQ(s.c.rows(), 3);
    EXPECT_EQ(numerical_rank(s.c), 3);
    EXPECT_GE(s.q.diagonal().minCoeff(), 0.1);
    EXPECT_LE(s.q.diagonal().maxCoeff(), 1.1);
    EXPECT_LE((s.h - (s.g * pinv(s.c)).cwiseAbs().rowwise().sum()).norm(), 1e-14);
    EXPECT_EQ(s.stacked_a().rows(), 11);
    Rng rng(1);
    for (int c = 0; c < 10000; ++c) {
        Vector x(3);
        for (Eigen::Index i = 0; i < 3; ++i) x(i) = rng.uniform(-1, 1);
        const Vector y = pinv(s.c) * x;
        EXPECT_LE((s.g * y - s.h).maxCoeff(), 1e-12);
    }
}

TEST(Solver, LossExamplesAndGradient) {
    SolverSpec s = make_solver_spec(0);
    EXPECT_EQ(unsupervised_loss(s, Vector::Zero(5)), 0.0);
    SolverSpec unit = s;
    unit.q = Matrix::Identity(5, 5);
    unit.p = Vector::Zero(5);
    EXPECT_DOUBLE_EQ(unsupervised_loss(unit, Vector::Unit(5, 0)), 0.5);

    Rng rng(2);
    Vector y(5);
    for (Eigen::Index i = 0; i < 5; ++i) y(i) = rng.uniform(-2, 2);
    Vector g;
    unsupervised_loss(s, y, &g);
    for (Eigen::Index i = 0; i < 5; ++i) {
        Vector yp = y, ym = y;
        yp(i) += 1e-6;
        ym(i) -= 1e-6;
        EXPECT_NEAR(g(i), (unsupervised_loss(s, yp) - unsupervised_loss(s, ym)) / 2e-6, 1e-7);
    }
}

TEST(Solver, LiteMatchesFullOnFixedSamples) {
    const SolverInstance inst = solver_instance(0, 50, 50);
    const SolverProvider provider(inst.spec);
    LayerConfig full, lite;
    lite.mode = CombinationMode::Lite;
    const CAffineLayer lf(provider, full), ll(provider, lite);
    Rng rng(3);
    for (Eigen::Index j = 0; j < 50; ++j) {
        const ConstraintSystem sys = provider.evaluate(inst.test_x.col(j));
        Vector f(5), w(5);
        for (Eigen::Index i = 0; i < 5; ++i) {
            f(i) = rng.uniform(-3, 3);
            w(i) = rng.uniform(-3, 3);
        }
        const Vector a = lf.forward(sys, f, w).output, b = ll.forward(sys, f, w).output;
        EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-8);
        EXPECT_LE((inst.spec.c * a - inst.test_x.col(j)).cwiseAbs().maxCoeff(), 1e-9);
    }
}

TEST(Solver, DatasetShapes) {
    const SolverInstance inst = solver_instance(7, 12, 9);
    EXPECT_EQ(inst.train_x.rows(), 3);
    EXPECT_EQ(inst.train_x.cols(), 12);
    EXPECT_EQ(inst.test_x.cols(), 9);
    EXPECT_LE(inst.train_x.cwiseAbs().maxCoeff(), 1.0);
}

// ---- unicycle ----

TEST(SmoothUnion, Examples) {
    const SmoothUnion eq = smooth_union(Vector::Constant(4, 0.3), 10.0);
    EXPECT_NEAR(eq.h, 0.3, 1e-14);
    EXPECT_NEAR(eq.lambda.sum(), 4.0, 1e-12);

    const Vector rows = (Vector(3) << 5.0, 1.0, 0.5).finished();
    const SmoothUnion dom = smooth_union(rows, 10.0);
    EXPECT_NEAR(dom.h, 5.0 - std::log(3.0) / 10.0, 1e-6);
    EXPECT_NEAR(dom.lambda.sum(), 3.0, 1e-12);
    EXPECT_THROW(smooth_union(rows, 0.0), ArgumentError);
}

TEST(SmoothUnion, UnderApproximatesMaxOnGrid) {
    const UnicycleSpec spec = default_unicycle_spec();
    for (int i = 0; i < 100; ++i) {
        for (int j = 0; j < 100; ++j) {
            const double px = -5.0 + 6.0 * i / 99.0, py = -4.0 + 6.0 * j / 99.0;
            for (const Polygon& o : spec.obstacles) {
                const Vector h = edge_barriers(o, px, py);
                const SmoothUnion u = smooth_union(h, spec.kappa);
                EXPECT_LE(u.h, h.maxCoeff() + 1e-12);
                EXPECT_NEAR(u.lambda.sum(), static_cast<double>(h.size()), 1e-9);
            }
        }
    }
}

TEST(Unicycle, SpecShape) {
    const UnicycleSpec spec = default_unicycle_spec();
    EXPECT_EQ(spec.m(), 13u);
    EXPECT_EQ(spec.obstacles.size(), 3u);
    const ConstraintSystem sys = cbf_constraints(spec, (Vector(3) << -4.5, 0.0, 0.5).finished());
    EXPECT_EQ(sys.m(), 13u);
    EXPECT_EQ(sys.n_out(), 2u);
    // Control rows do not depend on the state.
    EXPECT_EQ(sys.a().bottomRows(4), spec.au);
    EXPECT_EQ(sys.b().tail(4), spec.bu);
}

TEST(Unicycle, InteriorStateHasSlackAtZeroCommand) {
    const UnicycleSpec spec = default_unicycle_spec();
    const Vector x = (Vector(3) << 0.5, 1.5, 0.3).finished();
    const ConstraintSystem sys = cbf_constraints(spec, x);
    const Vector slack = sys.b() - sys.a() * Vector::Zero(2);
    EXPECT_GT(slack.minCoeff(), 0.0);
    EXPECT_LE((slack.head(3) - obstacle_barriers(spec, x)).norm(), 1e-12);
}

TEST(Unicycle, ObstacleRowAtZeroHeading) {
    // Single square obstacle with its right edge normal [1, 0]: at theta = 0 only
    // the v column is nonzero and equals minus the lambda-weighted normal x-component.
    UnicycleSpec spec = default_unicycle_spec();
    Polygon sq;
    sq.a = (Matrix(4, 2) << 1, 0, -1, 0, 0, 1, 0, -1).finished();
    sq.b = (Vector(4) << 1, 1, 1, 1).finished();
    spec.obstacles = {sq};
    const Vector x = (Vector(3) << 3.0, 0.0, 0.0).finished();
    const ConstraintSystem sys = cbf_constraints(spec, x);
    const SmoothUnion u = smooth_union(edge_barriers(sq, 3.0, 0.0), spec.kappa);
    EXPECT_NEAR(sys.a()(0, 0), -(u.lambda.dot(sq.a.col(0))), 1e-12);
    EXPECT_EQ(sys.a()(0, 1), 0.0);
    EXPECT_NEAR(sys.b()(0), u.h, 1e-12);
}

TEST(Unicycle, CbfJacobianMatchesFiniteDifferences) {
    const UnicycleSpec spec = default_unicycle_spec();
    const Vector x = (Vector(3) << -2.0, 0.9, 0.7).finished();
    const CbfJacobian jac = cbf_jacobian(spec, x);
    for (int i = 0; i < 3; ++i) {
        Vector xp = x, xm = x;
        xp(i) += 1e-6;
        xm(i) -= 1e-6;
        const ConstraintSystem sp = cbf_constraints(spec, xp), sm = cbf_constraints(spec, xm);
        EXPECT_LE((jac.da[i] - (sp.a() - sm.a()) / 2e-6).cwiseAbs().maxCoeff(), 1e-6);
        EXPECT_LE((jac.db[i] - (sp.b() - sm.b()) / 2e-6).cwiseAbs().maxCoeff(), 1e-6);
    }
}

TEST(Unicycle, PidAtGoalIsZeroAndSaturates) {
    const UnicycleSpec spec = default_unicycle_spec();
    PidController pid(spec);
    EXPECT_EQ(pid(Vector::Zero(3)), Vector::Zero(2));
    PidController far(spec);
    const Vector u = far((Vector(3) << -400.0, 0.0, 0.0).finished());
    EXPECT_EQ(u(0), spec.u_max()(0));
    EXPECT_GT(far.raw()(0), u(0));
    EXPECT_FALSE(far.derivative_used());
    far((Vector(3) << -399.0, 0.0, 0.0).finished());
    EXPECT_TRUE(far.derivative_used());
}

namespace {

Model zero_model() {
    Model m = Model::make(3, 2, {4}, 0);
    for (Mlp* net : {&m.f, &m.w}) {
        for (auto& w : net->weights()) w.setZero();
        for (auto& b : net->biases()) b.setZero();
    }
    return m;
}

}  // namespace

TEST(Rollout, AtGoalWithZeroPolicyCostsNothing) {
    const UnicycleSpec spec = default_unicycle_spec();
    const UnicycleProvider provider(spec);
    const CAffineLayer layer(provider, LayerConfig{});
    const Rollout r = rollout(spec, zero_model(), layer, LayerMode::CAffNet, Vector::Zero(3), 20);
    EXPECT_EQ(r.cost, 0.0);
    EXPECT_TRUE(r.reached_goal(spec.goal_radius));
}

TEST(Rollout, CostRecomputesFromLog) {
    const UnicycleSpec spec = default_unicycle_spec();
    const UnicycleProvider provider(spec);
    const CAffineLayer layer(provider, LayerConfig{});
    const Model model = Model::make(3, 2, {16, 16}, 5);
    const Rollout r = rollout(spec, model, layer, LayerMode::CAffNet, unicycle_test_start(), 60);
    ASSERT_EQ(r.x.size(), 61u);
    double j = 0.0, r_term = 0.0;
    for (std::size_t k = 0; k < 60; ++k) {
        j += stage_cost(spec, r.x[k], r.u_net[k]);
        r_term += r.u_net[k].dot(spec.r.cwiseProduct(r.u_net[k]));
        EXPECT_LE((r.x[k + 1] - (r.x[k] + spec.dt * input_matrix(r.x[k]) * r.u[k])).norm(), 1e-15);
    }
    j += terminal_cost(spec, r.x.back());
    EXPECT_NEAR(r.cost, j, 1e-10 * std::max(1.0, j));
    EXPECT_GT(r_term, 0.0);
    // Every applied command satisfies every CBF row.
    EXPECT_LE(r.residuals.maxCoeff(), 1e-9);
    const Rollout again = rollout(spec, model, layer, LayerMode::CAffNet, unicycle_test_start(), 60);
    EXPECT_EQ(again.cost, r.cost);
}

TEST(Rollout, InitialStatesAreSafe) {
    const UnicycleSpec spec = default_unicycle_spec();
    const Matrix s = unicycle_initial_states(spec, 0, 20);
    ASSERT_EQ(s.cols(), 20);
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
        const Vector x = s.col(j);
        EXPECT_GE(obstacle_barriers(spec, x).minCoeff(), 0.1);
        EXPECT_GE((spec.bx - spec.ax * x).minCoeff(), 0.1);
        EXPECT_GE(x.head(2).norm(), 0.5);
    }
    EXPECT_EQ(unicycle_initial_states(spec, 0, 20), s);
}

TEST(Rollout, BackpropagationMatchesFiniteDifferences) {
    UnicycleSpec spec = default_unicycle_spec();
    spec.horizon = 12;
    const UnicycleScenario sc(0, 3, spec, RolloutGradientPaths{true, true});
    TrainConfig cfg;
    cfg.hidden = {6};
    Model model = Model::make(3, 2, cfg.hidden, 2);
    const CAffineLayer layer(sc.provider(), cfg.layer);
    Matrix x0(3, 2);
    x0.col(0) = unicycle_test_start();
    x0.col(1) = (Vector(3) << -2.2, -1.2, 0.4).finished();
    const auto [cost, grads] = sc.batch_gradients(model, layer, cfg, x0);
    auto mean_cost = [&](const Model& m) {
        double c = 0.0;
        for (Eigen::Index j = 0; j < x0.cols(); ++j) c += rollout(spec, m, layer, LayerMode::CAffNet, x0.col(j), spec.horizon).cost;
        return c / static_cast<double>(x0.cols());
    };
    EXPECT_NEAR(cost / 2.0, mean_cost(model), 1e-9 * std::abs(cost));
    int checked = 0, agreed = 0;
    for (int net = 0; net < 2; ++net) {
        Mlp& mlp = net ? model.w : model.f;
        const MlpGradients& g = net ? grads.w : grads.f;
        for (std::size_t l = 0; l < mlp.layers(); ++l) {
            for (Eigen::Index i = 0; i < mlp.biases()[l].size(); ++i) {
                const double orig = mlp.biases()[l](i), h = 1e-6;
                mlp.biases()[l](i) = orig + h;
                const double cp = mean_cost(model);
                mlp.biases()[l](i) = orig - h;
                const double cm = mean_cost(model);
                mlp.biases()[l](i) = orig;
                const double fd = (cp - cm) / (2 * h);
                ++checked;
                if (std::abs(fd - g.biases[l](i)) <= 1e-4 * std::max(1.0, std::abs(fd))) ++agreed;
            }
        }
    }
    // Selection switches inside a probe are possible; nearly all probes must agree.
    EXPECT_GE(agreed, checked * 9 / 10);
}
