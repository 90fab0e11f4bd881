#pragma once

// Seeded property suites: hard satisfaction and candidate existence, agreement
// with the exact projection oracle, end-to-end gradients, pseudoinverse
// identities and combination counts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "caffnet/constraints.hpp"
#include "caffnet/layer.hpp"
#include "caffnet/linalg.hpp"
#include "caffnet/mlp.hpp"
#include "caffnet/oracle.hpp"
#include "caffnet/rng.hpp"

namespace caffnet::verify {

struct SuiteResult {
    std::string name;
    std::size_t cases = 0;     ///< generated cases
    std::size_t checked = 0;   ///< cases the property was evaluated on
    std::size_t failures = 0;
    double worst = 0.0;        ///< largest error seen (meaning depends on the suite)
    nlohmann::json counterexample;  ///< first failing case, null if none
    double required_pass_rate = 1.0;

    SuiteResult() = default;
    explicit SuiteResult(std::string suite, double rate = 1.0) : name(std::move(suite)), required_pass_rate(rate) {}

    double pass_rate() const {
        return checked ? static_cast<double>(checked - failures) / static_cast<double>(checked) : 0.0;
    }
    bool passed() const { return checked > 0 && pass_rate() >= required_pass_rate; }

    void fail(nlohmann::json example) {
        if (failures++ == 0) counterexample = std::move(example);
    }
};

namespace detail {

inline Matrix uniform_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double lo = -1.0, double hi = 1.0) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(lo, hi);
    return m;
}

inline Vector uniform_vector(Rng& rng, Eigen::Index n, double lo = -1.0, double hi = 1.0) {
    return uniform_matrix(rng, n, 1, lo, hi).col(0);
}

}  // namespace detail

/// Random matrix of the given shape: dense, rank-deficient (a product through
/// a thinner inner dimension) or with some rows duplicated / positively rescaled.
inline Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
    const double kind = rng.uniform();
    Matrix a;
    if (kind < 0.25 && std::min(rows, cols) > 1) {
        const auto r = static_cast<Eigen::Index>(1 + rng.below(static_cast<std::uint64_t>(std::min(rows, cols) - 1)));
        a = detail::uniform_matrix(rng, rows, r) * detail::uniform_matrix(rng, r, cols);
    } else {
        a = detail::uniform_matrix(rng, rows, cols);
    }
    if (rng.uniform() < 0.25 && rows > 1) {
        const auto copies = 1 + rng.below(static_cast<std::uint64_t>(rows - 1));
        for (std::uint64_t c = 0; c < copies; ++c) {
            const auto dst = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(rows)));
            const auto src = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(rows)));
            a.row(dst) = a.row(src) * (rng.uniform() < 0.5 ? 1.0 : rng.uniform(0.5, 2.0));
        }
    }
    return a;
}

/// Feasible system by construction: b = A y0 + slack, slack >= 0 and exactly
/// zero on roughly 30% of the rows so that y0 sits on several faces.
struct RandomSystem {
    ConstraintSystem sys;
    Vector y0;
};

inline RandomSystem random_feasible_system(Rng& rng, std::size_t max_n = 4, std::size_t max_m = 10) {
    const auto n = static_cast<Eigen::Index>(1 + rng.below(max_n));
    const auto m = static_cast<Eigen::Index>(1 + rng.below(max_m));
    Matrix a = random_matrix(rng, m, n);
    Vector y0 = detail::uniform_vector(rng, n);
    Vector slack(m);
    for (Eigen::Index i = 0; i < m; ++i) slack(i) = rng.uniform() < 0.3 ? 0.0 : rng.uniform(0.0, 1.0);
    Vector b = a * y0 + slack;
    return {ConstraintSystem(std::move(a), std::move(b)), std::move(y0)};
}

inline nlohmann::json case_json(const ConstraintSystem& sys, const Vector& f, const Vector& w) {
    return {{"system", to_json(sys)}, {"f_theta", vector_json(f)}, {"w_phi", vector_json(w)}};
}

/// Hard satisfaction: every forward output satisfies A y <= b + feas_tol.
inline SuiteResult feasibility(std::size_t cases, std::uint64_t seed, const LayerConfig& cfg = {}) {
    SuiteResult res{"feasibility"};
    Rng root(seed, 0xfea5);
    for (std::size_t c = 0; c < cases; ++c) {
        Rng rng = root.split(c);
        const RandomSystem rs = random_feasible_system(rng);
        const Vector f = detail::uniform_vector(rng, rs.y0.size(), -3.0, 3.0);
        const Vector w = detail::uniform_vector(rng, rs.y0.size(), -3.0, 3.0);
        const CombinationSet combos(rs.sys.m(), rs.sys.n_out(), cfg.mode);
        ++res.cases;
        ++res.checked;
        try {
            const SelectionRecord rec = forward(rs.sys, combos, f, w, cfg);
            const double v = std::max(0.0, (rs.sys.a() * rec.output - rs.sys.b()).maxCoeff());
            res.worst = std::max(res.worst, v);
            if (v > cfg.feas_tol) res.fail(case_json(rs.sys, f, w));
        } catch (const EmptyCandidateSet&) {
            res.fail(case_json(rs.sys, f, w));
        }
    }
    return res;
}

/// Existence: the candidate set always has a feasible entry.
inline SuiteResult existence(std::size_t cases, std::uint64_t seed, const LayerConfig& cfg = {}) {
    SuiteResult res{"existence"};
    Rng root(seed, 0xfea5);  // same corpus as feasibility()
    for (std::size_t c = 0; c < cases; ++c) {
        Rng rng = root.split(c);
        const RandomSystem rs = random_feasible_system(rng);
        const Vector f = detail::uniform_vector(rng, rs.y0.size(), -3.0, 3.0);
        const Vector w = detail::uniform_vector(rng, rs.y0.size(), -3.0, 3.0);
        const CombinationSet combos(rs.sys.m(), rs.sys.n_out(), cfg.mode);
        const auto all = candidates(rs.sys, combos, f, w, cfg);
        ++res.cases;
        ++res.checked;
        const bool any = std::any_of(all.begin(), all.end(), [](const ProjectionCandidate& p) { return p.feasible; });
        if (!any) res.fail(case_json(rs.sys, f, w));
    }
    return res;
}

/// With w = 0 and p = 2 the layer is the Euclidean projection: distances agree
/// with the enumeration oracle, and so do the points (the projection onto a
/// convex set is unique).
inline SuiteResult projection_oracle(std::size_t cases, std::uint64_t seed, double tol = 1e-6) {
    SuiteResult res{"projection-oracle"};
    LayerConfig cfg;
    cfg.p = 2.0;
    cfg.mode = CombinationMode::Full;
    Rng root(seed, 0x07ac);
    for (std::size_t c = 0; c < cases; ++c) {
        Rng rng = root.split(c);
        const RandomSystem rs = random_feasible_system(rng);
        const Vector z = detail::uniform_vector(rng, rs.y0.size(), -3.0, 3.0);
        const Vector zero = Vector::Zero(z.size());
        const CombinationSet combos(rs.sys.m(), rs.sys.n_out(), cfg.mode);
        ++res.cases;
        const auto ref = oracle::exact_projection(rs.sys, z);
        if (!ref.converged) {
            res.fail({{"case", case_json(rs.sys, z, zero)}, {"reason", "oracle found no feasible point"}});
            continue;
        }
        ++res.checked;
        try {
            const SelectionRecord rec = forward(rs.sys, combos, z, zero, cfg);
            const double dist_err = std::abs((rec.output - z).norm() - ref.value);
            const double point_err = (rec.output - ref.y_star).lpNorm<Eigen::Infinity>();
            res.worst = std::max({res.worst, dist_err, point_err});
            if (dist_err > tol || point_err > tol) {
                res.fail({{"case", case_json(rs.sys, z, zero)},
                          {"layer", vector_json(rec.output)},
                          {"oracle", oracle::to_json(ref)}});
            }
        } catch (const EmptyCandidateSet&) {
            res.fail({{"case", case_json(rs.sys, z, zero)}, {"reason", "empty candidate set"}});
        }
    }
    return res;
}

namespace detail {

/// Probe model for gradient checks: two small MLPs feeding the layer, with a
/// fixed linear read-out so the loss is c'y.
struct GradientProbe {
    Mlp f, w;
    Vector x, c;
    ConstraintSystem sys;
    CombinationSet combos;
};

inline double probe_loss(const GradientProbe& p, const LayerConfig& cfg, SelectionRecord* rec = nullptr) {
    SelectionRecord r = forward(p.sys, p.combos, p.f.forward(p.x), p.w.forward(p.x), cfg);
    const double loss = p.c.dot(r.output);
    if (rec) *rec = std::move(r);
    return loss;
}

inline bool same_selection(const SelectionRecord& a, const SelectionRecord& b) {
    return a.branch == b.branch && a.gamma == b.gamma;
}

}  // namespace detail

/// End-to-end gradients of MLP + layer against central finite differences.
/// A probe (one random parameter of one network) counts only when the branch
/// and subset chosen at theta +- h equal the one at theta.
inline SuiteResult gradients(std::size_t cases, std::uint64_t seed, double step = 1e-6, double rel_tol = 1e-4,
                             double required_pass_rate = 0.95) {
    SuiteResult res("gradients", required_pass_rate);
    const LayerConfig cfg;
    Rng root(seed, 0x6ad);
    for (std::size_t c = 0; c < cases; ++c) {
        Rng rng = root.split(c);
        RandomSystem rs = random_feasible_system(rng, 4, 6);
        const std::size_t n_out = rs.sys.n_out(), n_in = 3;
        Rng rf = rng.split(1), rw = rng.split(2);
        detail::GradientProbe p{Mlp({n_in, 8, 8, n_out}, rf), Mlp({n_in, 8, 8, n_out}, rw),
                                detail::uniform_vector(rng, n_in, -2.0, 2.0), detail::uniform_vector(rng, static_cast<Eigen::Index>(n_out)),
                                rs.sys, CombinationSet(rs.sys.m(), n_out, cfg.mode)};
        ++res.cases;
        SelectionRecord rec;
        detail::probe_loss(p, cfg, &rec);
        const LayerGradients lg = backward(rec, p.c);
        MlpTape tf, tw;
        p.f.forward(Matrix(p.x), &tf);
        p.w.forward(Matrix(p.x), &tw);
        const MlpGradients gf = p.f.backward(tf, Matrix(lg.f_theta));
        const MlpGradients gw = p.w.backward(tw, Matrix(lg.w_phi));

        const bool use_w = rng.uniform() < 0.5;
        Mlp& net = use_w ? p.w : p.f;
        const MlpGradients& g = use_w ? gw : gf;
        const std::size_t layer = rng.below(net.layers());
        const bool bias = rng.uniform() < 0.3;
        double* param;
        double analytic;
        if (bias) {
            const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(net.biases()[layer].size())));
            param = &net.biases()[layer](i);
            analytic = g.biases[layer](i);
        } else {
            Matrix& wm = net.weights()[layer];
            const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(wm.rows())));
            const auto j = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(wm.cols())));
            param = &wm(i, j);
            analytic = g.weights[layer](i, j);
        }
        const double orig = *param;
        SelectionRecord rp, rm;
        *param = orig + step;
        const double lp = detail::probe_loss(p, cfg, &rp);
        *param = orig - step;
        const double lm = detail::probe_loss(p, cfg, &rm);
        *param = orig;
        if (!detail::same_selection(rec, rp) || !detail::same_selection(rec, rm)) continue;  // unstable probe
        ++res.checked;
        const double fd = (lp - lm) / (2.0 * step);
        const double err = std::abs(analytic - fd);
        const double scale = std::max(std::abs(analytic), std::abs(fd));
        const double allowed = rel_tol * scale + 1e-7;
        res.worst = std::max(res.worst, err / allowed);  // > 1 means a failure
        if (err > allowed) {
            res.fail({{"system", to_json(p.sys)}, {"analytic", analytic}, {"finite_difference", fd},
                      {"network", use_w ? "w_phi" : "f_theta"}, {"layer", layer}});
        }
    }
    return res;
}

/// Penrose identities, projector norms and the consistency identity
/// A A^+ b = b for b in the range of A, on random (often rank-deficient)
/// matrices up to 8 x 8.
inline SuiteResult pinv_identities(std::size_t cases, std::uint64_t seed, double tol = 1e-8) {
    SuiteResult res{"pinv"};
    Rng root(seed, 0x9177);
    for (std::size_t c = 0; c < cases; ++c) {
        Rng rng = root.split(c);
        const auto rows = static_cast<Eigen::Index>(1 + rng.below(8));
        const auto cols = static_cast<Eigen::Index>(1 + rng.below(8));
        const Matrix a = random_matrix(rng, rows, cols);
        const Matrix ap = pinv(a);
        ++res.cases;
        ++res.checked;
        const auto inf = [](const Matrix& m) { return m.cwiseAbs().rowwise().sum().maxCoeff(); };
        const Matrix p_row = ap * a, p_col = a * ap;
        const Matrix n = Matrix::Identity(cols, cols) - p_row;
        const Vector b = a * detail::uniform_vector(rng, cols);
        const double e1 = inf(a * ap * a - a) / std::max(inf(a), 1e-300);
        const double e2 = inf(ap * a * ap - ap) / std::max(inf(ap), 1e-300);
        const double e3 = (p_col - p_col.transpose()).cwiseAbs().maxCoeff();
        const double e4 = (p_row - p_row.transpose()).cwiseAbs().maxCoeff();
        const double e5 = std::max(0.0, spectral_norm(p_row) - 1.0);
        const double e6 = std::max(0.0, spectral_norm(n) - 1.0);
        const double e7 = (a * (ap * b) - b).lpNorm<Eigen::Infinity>();
        const double worst = std::max({e1, e2, e3, e4, e5, e6, e7});
        res.worst = std::max(res.worst, worst);
        if (worst > tol) {
            nlohmann::json rows_json = nlohmann::json::array();
            for (Eigen::Index i = 0; i < a.rows(); ++i) rows_json.push_back(vector_json(a.row(i).transpose()));
            res.fail({{"A", rows_json}, {"errors", {e1, e2, e3, e4, e5, e6, e7}}});
        }
    }
    return res;
}

/// Family sizes against the closed forms and the 2^m - 1 bound, enumeration
/// order, Lite inside Full, and the pinned (11, 5) sizes.
inline SuiteResult combinatorics(std::size_t max_m = 16, std::size_t max_n = 8) {
    SuiteResult res{"combinatorics"};
    auto check = [&](bool ok, nlohmann::json what) {
        ++res.checked;
        if (!ok) res.fail(std::move(what));
    };
    for (std::size_t m = 1; m <= max_m; ++m) {
        for (std::size_t n = 1; n <= max_n; ++n) {
            ++res.cases;
            const CombinationSet full(m, n, CombinationMode::Full), lite(m, n, CombinationMode::Lite);
            std::uint64_t expect = 0;
            for (std::size_t k = 1; k <= std::min(m, n); ++k) expect += binomial(m, k);
            const nlohmann::json where = {{"m", m}, {"n_out", n}};
            check(full.combos().size() == expect && full.size() == expect, where);
            check(expect <= (std::uint64_t{1} << m) - 1, where);
            check(std::is_sorted(full.combos().begin(), full.combos().end()) &&
                      std::adjacent_find(full.combos().begin(), full.combos().end()) == full.combos().end(),
                  where);
            const std::size_t k = std::min(m, n);
            check(lite.combos().size() == (k > 1 ? m + binomial(m, k) : m), where);
            bool subset = true;
            for (const auto& c : lite.combos())
                subset = subset && std::binary_search(full.combos().begin(), full.combos().end(), c);
            check(subset, where);
        }
    }
    check(CombinationSet(11, 5, CombinationMode::Lite).size() == 473, {{"pinned", "lite(11,5)"}});
    check(CombinationSet(11, 5, CombinationMode::Full).size() == 1023, {{"pinned", "full(11,5)"}});
    return res;
}

}  // namespace caffnet::verify
