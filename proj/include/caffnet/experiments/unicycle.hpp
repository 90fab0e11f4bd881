#pragma once

// Safe unicycle control. A PID controller drives the robot to the origin; the
// network adds a correction u_net, and the layer keeps the total command inside
// the control-barrier-function constraints
//     -L_g h_j(x) u <= h_j(x)      three obstacles (smooth union of edges)
//      A_x g(x) u  <= b_x - A_x x  state box
//      A_u u       <= b_u          actuator limits
// which for u_net read A(x) u_net <= b(x) - A(x) u_nom.
//
// Training backpropagates the rollout cost through time. Gradients stop at
// A(x_k), b(x_k) and u_nom(x_k); they flow through the network (including its
// input x_k) and the Euler update, with saturation treated as straight-through
// inside the bounds and as a zero gradient outside.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "caffnet/constraints.hpp"
#include "caffnet/errors.hpp"
#include "caffnet/train.hpp"

namespace caffnet::experiments {

struct Polygon {
    Matrix a;  ///< edges x 2, outward normals
    Vector b;
};

struct UnicycleSpec {
    double dt = 0.1;
    std::size_t horizon = 150;
    double kappa = 10.0;
    double goal_radius = 0.1;
    std::vector<Polygon> obstacles;
    Matrix ax;  ///< 6 x 3
    Vector bx;
    Matrix au;  ///< 4 x 2
    Vector bu;
    Vector kp, ki, kd;       ///< PID gains on [e_long, e_lat, e_theta]
    Vector q, r, q_final;    ///< cost diagonals

    std::size_t m() const { return obstacles.size() + static_cast<std::size_t>(ax.rows() + au.rows()); }
    Vector u_min() const { return Vector2(-bu(1), -bu(3)); }
    Vector u_max() const { return Vector2(bu(0), bu(2)); }

private:
    static Vector Vector2(double a, double b) { return (Vector(2) << a, b).finished(); }
};

inline UnicycleSpec default_unicycle_spec() {
    UnicycleSpec s;
    Polygon o1, o2, o3;
    o1.a = (Matrix(5, 2) << 0.4472, -0.8944, 0.7071, 0.7071, -0.2425, 0.9701, -0.7071, -0.7071, -0.8944, -0.4472).finished();
    o1.b = (Vector(5) << -0.2184, -0.5303, 0.6219, 1.1667, 1.4368).finished();
    o2.a = (Matrix(6, 2) << -0.9685, 0.2489, 0.9417, 0.3363, -0.3714, 0.9285, 0.3714, 0.9285, -0.9417, -0.3363,
            -0.2976, -0.9547).finished();
    o2.b = (Vector(6) << 1.2755, -1.7670, -0.8511, -2.0249, 2.3274, 2.6868).finished();
    o3.a = (Matrix(5, 2) << -0.9191, 0.3939, 0.8944, 0.4472, 0.9703, -0.2419, -0.8701, -0.4930, 0.0, -1.0).finished();
    o3.b = (Vector(5) << 2.9916, -1.9975, -2.5305, 2.4854, 0.1000).finished();
    s.obstacles = {o1, o2, o3};
    s.ax = Matrix::Zero(6, 3);
    for (Eigen::Index i = 0; i < 3; ++i) {
        s.ax(2 * i, i) = 1.0;
        s.ax(2 * i + 1, i) = -1.0;
    }
    s.bx = (Vector(6) << 1.0, 5.0, 2.0, 4.0, std::numbers::pi, std::numbers::pi).finished();
    s.au = (Matrix(4, 2) << 1, 0, -1, 0, 0, 1, 0, -1).finished();
    s.bu = (Vector(4) << 1.0, 0.01, 0.5, 0.5).finished();
    s.kp = (Vector(3) << 0.01, 0.2, 0.0).finished();
    s.ki = (Vector(3) << 0.05, 0.005, 0.0).finished();
    s.kd = (Vector(3) << 0.0, 0.01, 0.0).finished();
    s.q = (Vector(3) << 1000.0, 1000.0, 0.0).finished();
    s.r = (Vector(2) << 1.0, 1.0).finished();
    s.q_final = (Vector(3) << 1e6, 1e6, 0.0).finished();
    return s;
}

struct SmoothUnion {
    double h = 0.0;
    Vector lambda;  ///< exp(kappa (h_i - h)); sums to the number of edges
};

/// h = (1/kappa) ln(sum_i exp(kappa h_i)) - ln(m)/kappa, with a max shift.
inline SmoothUnion smooth_union(const Vector& h_rows, double kappa) {
    if (!(kappa > 0.0)) throw ArgumentError("smooth_union: kappa must be positive");
    if (h_rows.size() == 0) throw ArgumentError("smooth_union: no edges");
    const double top = h_rows.maxCoeff();
    const double sum = (kappa * (h_rows.array() - top)).exp().sum();
    SmoothUnion out;
    out.h = top + std::log(sum) / kappa - std::log(static_cast<double>(h_rows.size())) / kappa;
    out.lambda = (kappa * (h_rows.array() - out.h)).exp().matrix();
    return out;
}

/// Edge barrier values a_i p - b_i of one obstacle at position p.
inline Vector edge_barriers(const Polygon& o, double px, double py) {
    return o.a.col(0) * px + o.a.col(1) * py - o.b;
}

/// Input matrix g(x) of the unicycle: x' = g(x) u.
inline Matrix input_matrix(const Vector& x) {
    Matrix g = Matrix::Zero(3, 2);
    g(0, 0) = std::cos(x(2));
    g(1, 0) = std::sin(x(2));
    g(2, 1) = 1.0;
    return g;
}

/// Smooth-union barrier of every obstacle at x.
inline Vector obstacle_barriers(const UnicycleSpec& spec, const Vector& x) {
    Vector h(static_cast<Eigen::Index>(spec.obstacles.size()));
    for (std::size_t j = 0; j < spec.obstacles.size(); ++j) {
        h(static_cast<Eigen::Index>(j)) = smooth_union(edge_barriers(spec.obstacles[j], x(0), x(1)), spec.kappa).h;
    }
    return h;
}

/// 13 x 2 system on the total command u at state x (drift is zero, alpha(h) = h).
inline ConstraintSystem cbf_constraints(const UnicycleSpec& spec, const Vector& x) {
    require_finite(x, "cbf_constraints: state");
    if (x.size() != 3) throw ArgumentError("cbf_constraints: state must have 3 entries");
    const auto m = static_cast<Eigen::Index>(spec.m());
    const Matrix g = input_matrix(x);
    Matrix a = Matrix::Zero(m, 2);
    Vector b(m);
    Eigen::Index row = 0;
    for (const Polygon& o : spec.obstacles) {
        const SmoothUnion su = smooth_union(edge_barriers(o, x(0), x(1)), spec.kappa);
        // L_g h_j = sum_i lambda_i a_i g(x)
        const Eigen::RowVectorXd lg = (su.lambda.transpose() * o.a) * g.topRows(2);
        a.row(row) = -lg;
        b(row) = su.h;
        ++row;
    }
    a.middleRows(row, spec.ax.rows()) = spec.ax * g;
    b.segment(row, spec.bx.size()) = spec.bx - spec.ax * x;
    row += spec.ax.rows();
    a.bottomRows(spec.au.rows()) = spec.au;
    b.tail(spec.bu.size()) = spec.bu;
    return ConstraintSystem(std::move(a), std::move(b));
}

/// cbf_constraints together with its partial derivatives in p_x, p_y, theta.
struct CbfJacobian {
    ConstraintSystem sys;
    std::array<Matrix, 3> da;
    std::array<Vector, 3> db;
};

inline CbfJacobian cbf_jacobian(const UnicycleSpec& spec, const Vector& x) {
    CbfJacobian out{cbf_constraints(spec, x), {}, {}};
    const auto m = out.sys.a().rows();
    for (int k = 0; k < 3; ++k) {
        out.da[static_cast<std::size_t>(k)] = Matrix::Zero(m, 2);
        out.db[static_cast<std::size_t>(k)] = Vector::Zero(m);
    }
    const double c = std::cos(x(2)), s = std::sin(x(2));
    const Vector d = (Vector(2) << c, s).finished();
    const Vector dd = (Vector(2) << -s, c).finished();
    Eigen::Index row = 0;
    for (const Polygon& o : spec.obstacles) {
        const SmoothUnion su = smooth_union(edge_barriers(o, x(0), x(1)), spec.kappa);
        const double edges = static_cast<double>(o.a.rows());
        const Vector grad_h = o.a.transpose() * su.lambda / edges;
        const Vector q = o.a.transpose() * su.lambda;
        // dq/dp = kappa A' diag(lambda) (A - 1 grad_h')
        const Matrix centred = o.a.rowwise() - grad_h.transpose();
        const Matrix dq = spec.kappa * o.a.transpose() * su.lambda.asDiagonal() * centred;
        const Vector dc_dp = -dq.transpose() * d;
        out.da[0](row, 0) = dc_dp(0);
        out.da[1](row, 0) = dc_dp(1);
        out.da[2](row, 0) = -q.dot(dd);
        out.db[0](row) = grad_h(0);
        out.db[1](row) = grad_h(1);
        ++row;
    }
    Matrix dg = Matrix::Zero(3, 2);
    dg(0, 0) = -s;
    dg(1, 0) = c;
    out.da[2].middleRows(row, spec.ax.rows()) = spec.ax * dg;
    for (int k = 0; k < 3; ++k) out.db[static_cast<std::size_t>(k)].segment(row, spec.ax.rows()) = -spec.ax.col(k);
    return out;
}

class UnicycleProvider final : public ConstraintProvider {
public:
    explicit UnicycleProvider(const UnicycleSpec& spec) : spec_(&spec) {}
    std::size_t n_in() const override { return 3; }
    std::size_t m() const override { return spec_->m(); }
    std::size_t n_out() const override { return 2; }
    ConstraintSystem evaluate(const Vector& x) const override { return cbf_constraints(*spec_, x); }

private:
    const UnicycleSpec* spec_;
};

inline Vector saturate(const UnicycleSpec& spec, const Vector& u) {
    return u.cwiseMax(spec.u_min()).cwiseMin(spec.u_max());
}

/// PID on the body-frame error to the origin. The integral uses the rectangle
/// rule and the derivative a backward difference; both start at zero.
class PidController {
public:
    explicit PidController(const UnicycleSpec& spec) : spec_(&spec), integral_(Vector::Zero(3)), prev_(Vector::Zero(3)) {}

    /// Saturated nominal command at x; advances the controller state.
    Vector operator()(const Vector& x) {
        const double c = std::cos(x(2)), s = std::sin(x(2));
        const Vector d = -x;  // reference is the origin with zero heading
        Vector e(3);
        e << c * d(0) + s * d(1), -s * d(0) + c * d(1), d(2);
        integral_ += spec_->dt * e;
        const Vector de = started_ ? Vector((e - prev_) / spec_->dt) : Vector(Vector::Zero(3));
        derivative_used_ = started_;
        prev_ = e;
        started_ = true;
        const Vector k = spec_->kp.cwiseProduct(e) + spec_->ki.cwiseProduct(integral_) + spec_->kd.cwiseProduct(de);
        raw_.resize(2);
        raw_ << k(0), k(1) + k(2);
        return saturate(*spec_, raw_);
    }

    const Vector& raw() const { return raw_; }            ///< last command before saturation
    bool derivative_used() const { return derivative_used_; }  ///< false on the first call

private:
    const UnicycleSpec* spec_;
    Vector integral_;
    Vector prev_;
    Vector raw_;
    bool started_ = false;
    bool derivative_used_ = false;
};

/// Constraint system on u_net given the nominal command.
inline ConstraintSystem shifted_system(const ConstraintSystem& on_u, const Vector& u_nom) {
    return ConstraintSystem(on_u.a(), on_u.b() - on_u.a() * u_nom);
}

inline double stage_cost(const UnicycleSpec& spec, const Vector& x, const Vector& u_net) {
    return x.dot(spec.q.cwiseProduct(x)) + u_net.dot(spec.r.cwiseProduct(u_net));
}

inline double terminal_cost(const UnicycleSpec& spec, const Vector& x) { return x.dot(spec.q_final.cwiseProduct(x)); }

struct Rollout {
    std::vector<Vector> x;      ///< horizon + 1 states
    std::vector<Vector> u_nom;  ///< horizon entries
    std::vector<Vector> u_net;  ///< constrained correction (layer output)
    std::vector<Vector> u;      ///< applied command
    Matrix residuals;           ///< horizon x m, A(x_k) u_k - b(x_k)
    double cost = 0.0;
    double min_goal_distance = 0.0;

    bool reached_goal(double radius) const { return min_goal_distance <= radius; }
};

/// Closed-loop simulation with the composed policy.
inline Rollout rollout(const UnicycleSpec& spec, const Model& model, const CAffineLayer& layer, LayerMode mode,
                       const Vector& x0, std::size_t horizon) {
    Rollout out;
    out.residuals.resize(static_cast<Eigen::Index>(horizon), static_cast<Eigen::Index>(spec.m()));
    PidController pid(spec);
    Vector x = x0;
    out.x.push_back(x);
    out.min_goal_distance = x.head(2).norm();
    for (std::size_t k = 0; k < horizon; ++k) {
        const ConstraintSystem on_u = cbf_constraints(spec, x);
        const Vector u_nom = pid(x);
        const Vector f = model.f.forward(x);
        const Vector w = mode == LayerMode::CAffNet ? model.w.forward(x) : Vector(Vector::Zero(2));
        const Vector y = constrained_output(mode, layer, shifted_system(on_u, u_nom), f, w).output;
        const Vector u = saturate(spec, u_nom + y);
        out.residuals.row(static_cast<Eigen::Index>(k)) = (on_u.a() * u - on_u.b()).transpose();
        out.cost += stage_cost(spec, x, y);
        x = x + spec.dt * input_matrix(x) * u;
        if (!x.allFinite()) throw NumericError("rollout: non-finite state at step " + std::to_string(k + 1));
        out.u_nom.push_back(u_nom);
        out.u_net.push_back(y);
        out.u.push_back(u);
        out.x.push_back(x);
        out.min_goal_distance = std::min(out.min_goal_distance, x.head(2).norm());
    }
    out.cost += terminal_cost(spec, x);
    return out;
}

/// Initial states inside the state box, facing the origin, with every barrier
/// at least `margin` and at least 0.5 m from the goal.
inline Matrix unicycle_initial_states(const UnicycleSpec& spec, std::uint64_t seed, std::size_t count,
                                      double margin = 0.1) {
    Rng rng = Rng(seed, 0x57a7);
    Matrix out(3, static_cast<Eigen::Index>(count));
    for (Eigen::Index j = 0; j < out.cols();) {
        Vector x(3);
        x(0) = rng.uniform(-spec.bx(1), spec.bx(0));
        x(1) = rng.uniform(-spec.bx(3), spec.bx(2));
        x(2) = std::atan2(-x(1), -x(0));
        if (x.head(2).norm() < 0.5) continue;
        if (obstacle_barriers(spec, x).minCoeff() < margin) continue;
        if ((spec.bx - spec.ax * x).minCoeff() < margin) continue;
        out.col(j++) = x;
    }
    return out;
}

inline Vector unicycle_test_start() { return (Vector(3) << -4.5, 0.0, 0.5).finished(); }

/// Which state dependencies the rollout gradient follows besides the network
/// and the dynamics. Both off: A(x), b(x) and u_nom(x) are treated as constants.
struct RolloutGradientPaths {
    bool constraints = false;  ///< through A(x_k), b(x_k) and the selected subset's pseudoinverse
    bool nominal = false;      ///< through the PID command, including its integral and derivative state
};

class UnicycleScenario final : public Scenario {
public:
    UnicycleScenario(std::uint64_t seed, std::size_t n_starts = 20, UnicycleSpec spec = default_unicycle_spec(),
                     RolloutGradientPaths paths = {})
        : spec_(std::move(spec)),
          provider_(spec_),
          starts_(unicycle_initial_states(spec_, seed, n_starts)),
          paths_(paths) {}

    UnicycleScenario(const UnicycleScenario&) = delete;
    UnicycleScenario& operator=(const UnicycleScenario&) = delete;

    std::string name() const override { return "unicycle"; }
    const ConstraintProvider& provider() const override { return provider_; }
    const UnicycleSpec& spec() const { return spec_; }
    const Matrix& starts() const { return starts_; }
    const RolloutGradientPaths& gradient_paths() const { return paths_; }

    EpochStats train_epoch(Model& model, ModelOptimizer& opt, const CAffineLayer& layer, const TrainConfig& cfg,
                           std::size_t epoch) const override {
        const auto n = static_cast<std::size_t>(starts_.cols());
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        if (cfg.batch_size < n) {
            Rng rng = Rng(cfg.seed, 0xba7c).split(epoch);
            for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        }
        double cost = 0.0;
        ViolationAccumulator viol;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t stop = std::min(n, start + cfg.batch_size);
            Matrix x0(3, static_cast<Eigen::Index>(stop - start));
            for (std::size_t j = start; j < stop; ++j) x0.col(static_cast<Eigen::Index>(j - start)) = starts_.col(static_cast<Eigen::Index>(order[j]));
            cost += train_batch(model, opt, layer, cfg, x0, viol);
        }
        return {cost / static_cast<double>(n), viol.max, viol.mean()};
    }

    /// Rollout from the test start: cost, violation max / mean / percent over
    /// all steps and rows, goal arrival and closest approach to the goal.
    Metrics evaluate(const Model& model, const CAffineLayer& layer, const TrainConfig& cfg) const override {
        return metrics_for(test_rollout(model, layer, cfg.layer_mode));
    }

    Rollout test_rollout(const Model& model, const CAffineLayer& layer, LayerMode mode) const {
        return rollout(spec_, model, layer, mode, unicycle_test_start(), spec_.horizon);
    }

    Metrics metrics_for(const Rollout& r) const {
        ViolationAccumulator viol;
        for (Eigen::Index k = 0; k < r.residuals.rows(); ++k)
            viol.add(reported(Vector(r.residuals.row(k).transpose().cwiseMax(0.0))));
        return {{"cost", r.cost},
                {"viol_max", viol.max},
                {"viol_mean", viol.mean()},
                {"viol_pct", viol.percent()},
                {"reached_goal", r.reached_goal(spec_.goal_radius) ? 1.0 : 0.0},
                {"min_goal_distance", r.min_goal_distance}};
    }

    /// Summed cost of the rollouts from the columns of x0 and the gradient of
    /// their mean. Penalties are included outside CAffNet mode.
    std::pair<double, ModelGradients> batch_gradients(const Model& model, const CAffineLayer& layer,
                                                      const TrainConfig& cfg, const Matrix& x0,
                                                      ViolationAccumulator* viol = nullptr) const {
        const bool projected = cfg.layer_mode == LayerMode::CAffNet;
        const LayerMode mode = projected ? LayerMode::CAffNet : LayerMode::Soft;
        const Eigen::Index nb = x0.cols();
        const std::size_t horizon = spec_.horizon;
        const double inv_b = 1.0 / static_cast<double>(nb);

        struct StepRecord {
            SelectionRecord selection;
            ConstraintSystem on_u;
            Vector f, w, u_nom, u, mask, nominal_mask;
            bool derivative_used = false;
        };
        std::vector<PidController> pids(static_cast<std::size_t>(nb), PidController(spec_));
        std::vector<Matrix> xs{x0};
        std::vector<MlpTape> tape_f(horizon), tape_w(horizon);
        std::vector<std::vector<StepRecord>> steps(horizon);
        double cost = 0.0;

        for (std::size_t k = 0; k < horizon; ++k) {
            const Matrix& x = xs.back();
            const Matrix f = model.f.forward(x, &tape_f[k]);
            const Matrix w = projected ? model.w.forward(x, &tape_w[k]) : Matrix::Zero(2, nb);
            Matrix next(3, nb);
            steps[k].reserve(static_cast<std::size_t>(nb));
            for (Eigen::Index j = 0; j < nb; ++j) {
                const Vector xj = x.col(j);
                PidController& pid = pids[static_cast<std::size_t>(j)];
                ConstraintSystem on_u = cbf_constraints(spec_, xj);
                const Vector u_nom = pid(xj);
                SelectionRecord rec = constrained_output(mode, layer, shifted_system(on_u, u_nom), f.col(j), w.col(j));
                const Vector raw = u_nom + rec.output;
                const Vector u = saturate(spec_, raw);
                if (viol) viol->add(reported(Vector((on_u.a() * u - on_u.b()).cwiseMax(0.0))));
                cost += stage_cost(spec_, xj, rec.output);
                if (!projected) cost += soft_penalty(on_u, u, cfg.penalty);
                next.col(j) = xj + spec_.dt * input_matrix(xj) * u;
                const auto same = [](const Vector& a, const Vector& b) {
                    return Vector((a.array() == b.array()).cast<double>().matrix());
                };
                steps[k].push_back({std::move(rec), std::move(on_u), f.col(j), w.col(j), u_nom, u, same(raw, u),
                                    same(pid.raw(), u_nom), pid.derivative_used()});
            }
            if (!next.allFinite()) throw NumericError("rollout: non-finite state at step " + std::to_string(k + 1));
            xs.push_back(std::move(next));
        }
        const Matrix& xn = xs.back();
        for (Eigen::Index j = 0; j < nb; ++j) cost += terminal_cost(spec_, xn.col(j));

        // Reverse pass for the batch-mean loss. lam is dLoss/dx_k; mu_i is the
        // adjoint of the PID integral state and pending_e the derivative term's
        // contribution to the previous error.
        Matrix lam = 2.0 * spec_.q_final.asDiagonal() * xn * inv_b;
        Matrix mu_i = Matrix::Zero(3, nb), pending_e = Matrix::Zero(3, nb);
        ModelGradients grads{model.f.zero_gradients(), model.w.zero_gradients()};
        for (std::size_t k = horizon; k-- > 0;) {
            const Matrix& x = xs[k];
            Matrix gf(2, nb), gw(2, nb), dx = Matrix::Zero(3, nb);
            for (Eigen::Index j = 0; j < nb; ++j) {
                const Vector xj = x.col(j);
                const StepRecord& st = steps[k][static_cast<std::size_t>(j)];
                const double c = std::cos(xj(2)), s = std::sin(xj(2));
                Vector du = spec_.dt * input_matrix(xj).transpose() * lam.col(j);
                // Penalty rows that are violated; gradients in u and in (A, b).
                Vector active = Vector::Zero(st.on_u.a().rows());
                if (!projected) {
                    active = ((st.on_u.a() * st.u - st.on_u.b()).array() > 0.0).cast<double>().matrix();
                    du += cfg.penalty * inv_b * st.on_u.a().transpose() * active;
                }
                const Vector dy = st.mask.cwiseProduct(du) + 2.0 * inv_b * spec_.r.cwiseProduct(st.selection.output);
                const LayerGradients lg = backward(st.selection, dy);
                gf.col(j) = lg.f_theta;
                gw.col(j) = lg.w_phi;
                dx(2, j) = spec_.dt * st.u(0) * (-s * lam(0, j) + c * lam(1, j));

                Vector d_unom = st.mask.cwiseProduct(du);
                if (paths_.constraints || paths_.nominal) {
                    // Gradients in the data of the system on u: b' = b - A u_nom.
                    ConstraintGradients cg{Matrix::Zero(st.on_u.a().rows(), 2), Vector::Zero(st.on_u.a().rows())};
                    if (projected) {
                        cg = backward_constraints(st.selection, shifted_system(st.on_u, st.u_nom), st.f, st.w, dy,
                                                  layer.config().rank_tol);
                    }
                    if (paths_.nominal) d_unom -= st.on_u.a().transpose() * cg.b;
                    if (paths_.constraints) {
                        Matrix ga = cg.a - cg.b * st.u_nom.transpose();
                        Vector gb = cg.b;
                        if (!projected) {
                            ga += cfg.penalty * inv_b * active * st.u.transpose();
                            gb -= cfg.penalty * inv_b * active;
                        }
                        const CbfJacobian jac = cbf_jacobian(spec_, xj);
                        for (std::size_t q = 0; q < 3; ++q) {
                            dx(static_cast<Eigen::Index>(q), j) +=
                                (ga.cwiseProduct(jac.da[q])).sum() + gb.dot(jac.db[q]);
                        }
                    }
                }
                if (paths_.nominal) {
                    // u_nom = sat(M (Kp e + Ki I + Kd de)), M = [1 0 0; 0 1 1]
                    const Vector graw = st.nominal_mask.cwiseProduct(d_unom);
                    const Vector gk = (Vector(3) << graw(0), graw(1), graw(1)).finished();
                    mu_i.col(j) += spec_.ki.cwiseProduct(gk);
                    Vector eps = spec_.kp.cwiseProduct(gk) + spec_.dt * mu_i.col(j) + pending_e.col(j);
                    pending_e.col(j).setZero();
                    if (st.derivative_used) {
                        eps += spec_.kd.cwiseProduct(gk) / spec_.dt;
                        pending_e.col(j) = -spec_.kd.cwiseProduct(gk) / spec_.dt;
                    }
                    // e = R(theta) (-x)
                    dx(0, j) += eps(0) * -c + eps(1) * s;
                    dx(1, j) += eps(0) * -s + eps(1) * -c;
                    dx(2, j) += eps(0) * (s * xj(0) - c * xj(1)) + eps(1) * (c * xj(0) + s * xj(1)) - eps(2);
                }
            }
            Matrix in_f, in_w;
            model.f.backward_into(tape_f[k], gf, grads.f, &in_f);
            Matrix in_x = in_f;
            if (projected) {
                model.w.backward_into(tape_w[k], gw, grads.w, &in_w);
                in_x += in_w;
            }
            lam += 2.0 * inv_b * spec_.q.asDiagonal() * x + dx + in_x;
        }
        return {cost, std::move(grads)};
    }

private:
    double train_batch(Model& model, ModelOptimizer& opt, const CAffineLayer& layer, const TrainConfig& cfg,
                       const Matrix& x0, ViolationAccumulator& viol) const {
        auto [cost, grads] = batch_gradients(model, layer, cfg, x0, &viol);
        opt.step(model, grads, cfg.layer_mode == LayerMode::CAffNet);
        return cost;
    }

    UnicycleSpec spec_;
    UnicycleProvider provider_;
    Matrix starts_;
    RolloutGradientPaths paths_;
};

}  // namespace caffnet::experiments
