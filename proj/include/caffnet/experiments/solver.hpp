#pragma once

// Learning the solution map of
//     min 1/2 y'Qy + p' sin(y)  s.t.  G y <= h,  C y = x
// without labels: the training loss is the objective itself. Equalities enter
// the layer as paired inequalities, A = [G; C; -C], b(x) = [h; x; -x].

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "caffnet/constraints.hpp"
#include "caffnet/oracle.hpp"
#include "caffnet/train.hpp"

namespace caffnet::experiments {

struct SolverSpec {
    Matrix q;  ///< n_out x n_out, diagonal positive
    Vector p;
    Matrix g;  ///< n_ineq x n_out
    Vector h;
    Matrix c;  ///< n_eq x n_out

    std::size_t n_out() const { return static_cast<std::size_t>(q.rows()); }
    std::size_t n_eq() const { return static_cast<std::size_t>(c.rows()); }
    std::size_t n_ineq() const { return static_cast<std::size_t>(g.rows()); }

    oracle::ReferenceProgram program() const { return {q, p, g, h, c}; }

    Matrix stacked_a() const {
        Matrix a(g.rows() + 2 * c.rows(), g.cols());
        a << g, c, -c;
        return a;
    }
    Vector stacked_b(const Vector& x) const {
        Vector b(h.size() + 2 * x.size());
        b << h, x, -x;
        return b;
    }
};

/// h_i = sum_j |(G C^+)_ij|, so y = C^+ x satisfies G y <= h whenever |x_j| <= 1.
inline Vector safe_rhs(const Matrix& g, const Matrix& c) { return (g * pinv(c)).cwiseAbs().rowwise().sum(); }

/// Random instance: G, C and p uniform on [-1, 1], Q = diag(U[0.1, 1.1]).
/// A rank-deficient C is redrawn from the next sub-stream.
inline SolverSpec make_solver_spec(std::uint64_t seed, std::size_t n_out = 5, std::size_t n_eq = 3,
                                   std::size_t n_ineq = 5) {
    const auto no = static_cast<Eigen::Index>(n_out);
    for (std::uint64_t sub = 0;; ++sub) {
        Rng rng = Rng(seed, 0x501e).split(sub);
        auto draw = [&](Eigen::Index r, Eigen::Index c) {
            Matrix m(r, c);
            for (Eigen::Index i = 0; i < r; ++i)
                for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.uniform(-1.0, 1.0);
            return m;
        };
        SolverSpec s;
        Vector d(no);
        for (Eigen::Index i = 0; i < no; ++i) d(i) = rng.uniform(0.1, 1.1);
        s.q = d.asDiagonal();
        s.p = draw(no, 1).col(0);
        s.g = draw(static_cast<Eigen::Index>(n_ineq), no);
        s.c = draw(static_cast<Eigen::Index>(n_eq), no);
        if (numerical_rank(s.c) < static_cast<Eigen::Index>(n_eq)) continue;
        s.h = safe_rhs(s.g, s.c);
        return s;
    }
}

inline double unsupervised_loss(const SolverSpec& spec, const Vector& y, Vector* grad = nullptr) {
    if (static_cast<std::size_t>(y.size()) != spec.n_out()) throw ArgumentError("solver loss: bad y dimension");
    if (grad) *grad = spec.q * y + spec.p.cwiseProduct(y.array().cos().matrix());
    return 0.5 * y.dot(spec.q * y) + spec.p.dot(y.array().sin().matrix());
}

class SolverProvider final : public ConstraintProvider {
public:
    explicit SolverProvider(SolverSpec spec) : spec_(std::move(spec)), a_(spec_.stacked_a()) {}

    std::size_t n_in() const override { return spec_.n_eq(); }
    std::size_t m() const override { return static_cast<std::size_t>(a_.rows()); }
    std::size_t n_out() const override { return spec_.n_out(); }
    bool constant_matrix() const override { return true; }
    ConstraintSystem evaluate(const Vector& x) const override {
        if (static_cast<std::size_t>(x.size()) != spec_.n_eq()) throw ArgumentError("solver: bad input dimension");
        return ConstraintSystem(a_, spec_.stacked_b(x));
    }
    const SolverSpec& spec() const { return spec_; }

private:
    SolverSpec spec_;
    Matrix a_;
};

inline Matrix uniform_inputs(Rng rng, std::size_t dim, std::size_t count) {
    Matrix x(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(count));
    for (Eigen::Index j = 0; j < x.cols(); ++j)
        for (Eigen::Index i = 0; i < x.rows(); ++i) x(i, j) = rng.uniform(-1.0, 1.0);
    return x;
}

struct SolverInstance {
    SolverSpec spec;
    Matrix train_x;  ///< n_eq x n_train, uniform on [-1, 1]
    Matrix test_x;
};

inline SolverInstance solver_instance(std::uint64_t seed, std::size_t n_train = 1000,
                                      std::size_t n_test = 1000) {
    SolverInstance inst;
    inst.spec = make_solver_spec(seed);
    Rng data = Rng(seed, 0xda7a);
    inst.train_x = uniform_inputs(data.split(1), inst.spec.n_eq(), n_train);
    inst.test_x = uniform_inputs(data.split(2), inst.spec.n_eq(), n_test);
    return inst;
}

class SolverScenario final : public PointwiseScenario {
public:
    explicit SolverScenario(SolverInstance inst)
        : inst_(std::move(inst)),
          provider_(inst_.spec),
          train_sys_(systems_for(provider_, inst_.train_x)),
          test_sys_(systems_for(provider_, inst_.test_x)) {}

    std::string name() const override { return "solver"; }
    const ConstraintProvider& provider() const override { return provider_; }
    const Matrix& train_inputs() const override { return inst_.train_x; }
    const Matrix& test_inputs() const override { return inst_.test_x; }
    const SolverInstance& instance() const { return inst_; }

    double sample_loss(std::size_t, const Vector& y, Vector* grad) const override {
        return unsupervised_loss(inst_.spec, y, grad);
    }

    /// obj, then inequality and equality violation max / mean / percent.
    Metrics evaluate(const Model& model, const CAffineLayer& layer, const TrainConfig& cfg) const override {
        return metrics_for(predict_test(model, layer, cfg.layer_mode));
    }

    Metrics metrics_for(const Matrix& y) const {
        const auto& s = inst_.spec;
        ViolationAccumulator ineq, eq;
        double obj = 0.0;
        for (Eigen::Index j = 0; j < y.cols(); ++j) {
            const Vector yj = y.col(j);
            obj += unsupervised_loss(s, yj);
            ineq.add(reported(Vector((s.g * yj - s.h).cwiseMax(0.0))));
            eq.add(reported(Vector((s.c * yj - inst_.test_x.col(j)).cwiseAbs())));
        }
        return {{"obj", obj / static_cast<double>(y.cols())},
                {"ineq_max", ineq.max}, {"ineq_mean", ineq.mean()}, {"ineq_pct", ineq.percent()},
                {"eq_max", eq.max}, {"eq_mean", eq.mean()}, {"eq_pct", eq.percent()}};
    }

    /// Reference solutions of the test set, one column per sample.
    Matrix oracle_test_solutions(const oracle::ReferenceSolverOptions& opts = {}) const {
        const auto prog = inst_.spec.program();
        Matrix y(static_cast<Eigen::Index>(inst_.spec.n_out()), inst_.test_x.cols());
        for (Eigen::Index j = 0; j < y.cols(); ++j) {
            const auto res = oracle::solve_reference_program(prog, inst_.test_x.col(j), opts);
            if (!res.converged) throw NumericError("reference solver failed on test sample " + std::to_string(j));
            y.col(j) = res.y_star;
        }
        return y;
    }

protected:
    const std::vector<ConstraintSystem>& train_systems() const override { return train_sys_; }
    const std::vector<ConstraintSystem>& test_systems() const override { return test_sys_; }

private:
    SolverInstance inst_;
    SolverProvider provider_;
    std::vector<ConstraintSystem> train_sys_;
    std::vector<ConstraintSystem> test_sys_;
};

}  // namespace caffnet::experiments
