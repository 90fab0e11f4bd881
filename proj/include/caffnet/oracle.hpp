#pragma once

// Brute-force reference solvers used to check the layer and to stand in for an
// NLP solver on the optimisation-solver scenario.
//
// The equality-constrained sub-problems here are solved with a complete
// orthogonal decomposition (Householder QR), not the SVD pseudoinverse the
// layer uses, so agreement between the two is a genuine cross-check.

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "caffnet/constraints.hpp"
#include "caffnet/errors.hpp"
#include "caffnet/layer.hpp"
#include "caffnet/linalg.hpp"
#include "caffnet/rng.hpp"

namespace caffnet::oracle {

inline constexpr double kFeasTol = 1e-8;
inline constexpr std::size_t kMaxOutputs = 6;
inline constexpr std::size_t kMaxRows = 12;

struct OracleResult {
    Vector y_star;
    IndexCombination active_set;  ///< empty when the optimum is interior
    double value = std::numeric_limits<double>::infinity();  ///< distance or objective
    bool converged = false;
    std::string note;
};

namespace detail {

/// Minimum-norm correction d with A d = r, or nullopt if A d = r is inconsistent.
inline std::optional<Vector> min_norm_solve(const Matrix& a, const Vector& r) {
    if (a.rows() == 0) return Vector::Zero(a.cols());
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(a);
    cod.setThreshold(1e-10);
    Vector d = cod.solve(r);
    const double scale = 1.0 + r.lpNorm<Eigen::Infinity>() + a.lpNorm<Eigen::Infinity>();
    if ((a * d - r).lpNorm<Eigen::Infinity>() > 1e-9 * scale) return std::nullopt;
    return d;
}

inline double max_excess(const ConstraintSystem& sys, const Vector& y) {
    if (sys.m() == 0) return -std::numeric_limits<double>::infinity();
    return (sys.a() * y - sys.b()).maxCoeff();
}

/// Visits the empty subset and then every subset of size 1..k_max in
/// lexicographic order.
template <typename Fn>
void for_each_subset(std::size_t m, std::size_t k_max, Fn&& fn) {
    fn(IndexCombination{});
    if (m == 0 || k_max == 0) return;
    CombinationCursor cursor(m, k_max, CombinationMode::Full);
    IndexCombination c;
    while (cursor.next(c)) fn(c);
}

inline void check_size(const ConstraintSystem& sys, const char* who) {
    if (sys.n_out() > kMaxOutputs || sys.m() > kMaxRows) {
        throw ArgumentError(std::string(who) + ": enumeration limited to n_out <= 6 and m <= 12, got " +
                            dims(sys.a().rows(), sys.a().cols()));
    }
}

}  // namespace detail

/// Euclidean projection of z onto {y : A y <= b} by active-set enumeration.
///
/// For each subset S of at most n_out rows the closest point of the affine set
/// {A_S y = b_S} is computed; the closest one that satisfies the whole system
/// is the projection. The enumeration is exhaustive: the optimum always lies on
/// the affine hull of some linearly independent subset of its active rows.
inline OracleResult exact_projection(const ConstraintSystem& sys, const Vector& z) {
    detail::check_size(sys, "exact_projection");
    if (static_cast<std::size_t>(z.size()) != sys.n_out()) {
        throw ArgumentError("exact_projection: z has wrong dimension");
    }
    OracleResult best;
    detail::for_each_subset(sys.m(), sys.n_out(), [&](const IndexCombination& s) {
        Vector y = z;
        if (s.size() > 0) {
            auto [a_s, b_s] = select_sub(sys, s);
            auto d = detail::min_norm_solve(a_s, b_s - a_s * z);
            if (!d) return;
            y += *d;
        }
        if (detail::max_excess(sys, y) > kFeasTol) return;
        const double dist = (y - z).norm();
        if (dist < best.value) {
            best.value = dist;
            best.y_star = y;
            best.active_set = s;
            best.converged = true;
        }
    });
    if (!best.converged) best.note = "no feasible active set: system is infeasible";
    return best;
}

struct FeasibilityResult {
    bool feasible = false;
    Vector witness;
    double max_violation = std::numeric_limits<double>::infinity();
};

/// Decides whether {y : A y <= b} is non-empty.
///
/// Small systems are settled exactly by checking the minimum-norm point of every
/// candidate minimal face. Larger ones fall back to minimising the maximum
/// violation by subgradient descent from several seeded starts.
inline FeasibilityResult feasibility_check(const ConstraintSystem& sys, double tol = kFeasTol) {
    FeasibilityResult out;
    const auto n = static_cast<Eigen::Index>(sys.n_out());
    if (sys.m() == 0) {
        out.feasible = true;
        out.witness = Vector::Zero(n);
        out.max_violation = 0.0;
        return out;
    }
    auto consider = [&](const Vector& y) {
        const double v = std::max(0.0, detail::max_excess(sys, y));
        if (v < out.max_violation) {
            out.max_violation = v;
            out.witness = y;
        }
    };

    if (sys.m() <= kMaxRows && sys.n_out() <= kMaxOutputs) {
        detail::for_each_subset(sys.m(), sys.n_out(), [&](const IndexCombination& s) {
            if (out.max_violation <= tol) return;
            if (s.size() == 0) {
                consider(Vector::Zero(n));
                return;
            }
            auto [a_s, b_s] = select_sub(sys, s);
            if (auto y = detail::min_norm_solve(a_s, b_s)) consider(*y);
        });
    } else {
        Rng rng(0x5eed, sys.m());
        for (int start = 0; start < 8 && out.max_violation > tol; ++start) {
            Vector y(n);
            for (Eigen::Index i = 0; i < n; ++i) y(i) = start == 0 ? 0.0 : rng.uniform(-10.0, 10.0);
            for (int it = 1; it <= 20000; ++it) {
                Eigen::Index worst = 0;
                const double v = (sys.a() * y - sys.b()).maxCoeff(&worst);
                consider(y);
                if (v <= tol) break;
                const double g2 = sys.a().row(worst).squaredNorm();
                if (g2 == 0.0) break;  // zero row with b < 0: nothing can fix it
                // Polyak-style step towards the violated half-space.
                y -= (v + tol) / g2 * sys.a().row(worst).transpose();
            }
        }
    }
    out.feasible = out.max_violation <= tol;
    return out;
}

/// Data of  min 1/2 y'Qy + p' sin(y)  s.t.  G y <= h,  C y = x.
struct ReferenceProgram {
    Matrix q;
    Vector p;
    Matrix g;
    Vector h;
    Matrix c;
};

inline double reference_objective(const ReferenceProgram& prog, const Vector& y) {
    return 0.5 * y.dot(prog.q * y) + prog.p.dot(y.array().sin().matrix());
}

inline Vector reference_gradient(const ReferenceProgram& prog, const Vector& y) {
    return prog.q * y + prog.p.cwiseProduct(y.array().cos().matrix());
}

struct ReferenceSolverOptions {
    int starts = 16;
    int max_iters = 400;
    double step_tol = 1e-10;
    std::uint64_t seed = 7;
};

/// Multi-start projected gradient descent on the reference program.
///
/// The equalities are eliminated with y = C^+ x + N z (N an orthonormal null
/// space basis of C); iterates in z are projected exactly onto the reduced
/// inequality polyhedron, with an Armijo backtracking step.
inline OracleResult solve_reference_program(const ReferenceProgram& prog, const Vector& x,
                                            const ReferenceSolverOptions& opts = {}) {
    const Matrix c_pinv = pinv(prog.c);
    const Vector y0 = c_pinv * x;
    const Matrix basis = null_space_basis(prog.c);
    const Eigen::Index dz = basis.cols();
    // Inequalities in the reduced variable: (G N) z <= h - G y0.
    const ConstraintSystem reduced(prog.g * basis, prog.h - prog.g * y0);

    auto objective = [&](const Vector& z) { return reference_objective(prog, y0 + basis * z); };
    auto project = [&](const Vector& z) -> std::optional<Vector> {
        if (dz == 0) return z;
        auto res = exact_projection(reduced, z);
        if (!res.converged) return std::nullopt;
        return res.y_star;
    };

    OracleResult best;
    Rng rng(opts.seed);
    for (int start = 0; start < opts.starts; ++start) {
        Vector z(dz);
        for (Eigen::Index i = 0; i < dz; ++i) z(i) = start == 0 ? 0.0 : rng.uniform(-2.0, 2.0);
        auto proj = project(z);
        if (!proj) continue;
        z = *proj;
        double fz = objective(z);
        double step = 1.0;
        for (int it = 0; it < opts.max_iters && dz > 0; ++it) {
            const Vector grad = basis.transpose() * reference_gradient(prog, y0 + basis * z);
            bool moved = false;
            for (int bt = 0; bt < 40; ++bt) {
                auto cand = project(z - step * grad);
                if (!cand) break;
                const Vector delta = *cand - z;
                const double fc = objective(*cand);
                if (fc <= fz + 1e-4 * grad.dot(delta)) {
                    moved = delta.norm() > opts.step_tol;
                    z = *cand;
                    fz = fc;
                    step = std::min(step * 2.0, 1e3);
                    break;
                }
                step *= 0.5;
            }
            if (!moved) break;
        }
        if (fz < best.value) {
            best.value = fz;
            best.y_star = y0 + basis * z;
            best.converged = true;
        }
    }
    if (best.converged) {
        const ConstraintSystem full(
            (Matrix(prog.g.rows() + 2 * prog.c.rows(), prog.g.cols()) << prog.g, prog.c, -prog.c)
                .finished(),
            (Vector(prog.h.size() + 2 * x.size()) << prog.h, x, -x).finished());
        if (detail::max_excess(full, best.y_star) > kFeasTol) {
            best.converged = false;
            best.note = "best iterate violates the constraints";
        }
    } else {
        best.note = "no feasible start";
    }
    return best;
}

inline nlohmann::json to_json(const OracleResult& r) {
    return {{"y_star", vector_json(r.y_star)},
            {"active_set", r.active_set.indices},
            {"value", r.value},
            {"converged", r.converged},
            {"note", r.note}};
}

}  // namespace caffnet::oracle
