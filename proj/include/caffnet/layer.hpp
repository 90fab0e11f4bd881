#pragma once

// Closed-form constraint layer.
//
// For every row subset gamma of the constraint system the layer forms
//
//     P_gamma = f - A_g^+ (A_g f - b_g) + (I - A_g^+ A_g) w
//
// keeps the candidates that satisfy the full system, and returns f itself when
// f is already feasible, otherwise the feasible candidate closest to f in the
// configured p-norm. Since (I - A_g^+ A_g) = N_g, the candidate is evaluated as
// N_g (f + w) + A_g^+ b_g, which needs only the precomputed pair (A_g^+, N_g).

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "caffnet/constraints.hpp"
#include "caffnet/errors.hpp"
#include "caffnet/linalg.hpp"

namespace caffnet {

struct LayerConfig {
    double p = 2.0;               ///< norm order used to pick the closest candidate
    double feas_tol = 1e-9;       ///< slack allowed when testing A y <= b
    double rank_tol = kDefaultRankTol;
    CombinationMode mode = CombinationMode::Full;
    std::size_t chunk_size = 0;   ///< combinations per evaluation chunk; 0 = all at once

    void validate() const {
        if (!(p >= 1.0)) throw ConfigError("layer: p-norm order must be >= 1");
        if (!(feas_tol >= 0.0)) throw ConfigError("layer: feas_tol must be >= 0");
        if (!(rank_tol > 0.0)) throw ConfigError("layer: rank_tol must be > 0");
    }
};

struct ProjectionCandidate {
    IndexCombination gamma;
    Vector y;
    Vector residual;  ///< max(0, A y - b)
    bool feasible = false;
    double distance = 0.0;  ///< ||y - f||_p

    double max_residual() const { return residual.size() ? residual.maxCoeff() : 0.0; }
};

enum class Branch { Interior, Projected };

/// Outcome of one forward pass; everything backward() needs.
struct SelectionRecord {
    Branch branch = Branch::Interior;
    std::optional<IndexCombination> gamma;  ///< set on the Projected branch
    Vector output;
    Matrix null_projector;  ///< I - A_g^+ A_g of the chosen subset (Projected only)
    double distance = 0.0;
};

/// No candidate satisfied the system within feas_tol. Either the system is
/// infeasible or the tolerance is too tight for the conditioning at hand.
class EmptyCandidateSet : public std::runtime_error {
public:
    explicit EmptyCandidateSet(ProjectionCandidate least_violating)
        : std::runtime_error("no feasible projection candidate; least violating subset " +
                             least_violating.gamma.to_string() + " exceeds by " +
                             std::to_string(least_violating.max_residual())),
          least_violating_(std::move(least_violating)) {}

    const ProjectionCandidate& least_violating() const noexcept { return least_violating_; }

private:
    ProjectionCandidate least_violating_;
};

/// Sub-constraint projection for one subset.
inline Vector project_sub(const Vector& f_theta, const Vector& w_phi, const Matrix& a_gamma,
                          const Vector& b_gamma, double rank_tol = kDefaultRankTol) {
    const auto n = a_gamma.cols();
    if (f_theta.size() != n || w_phi.size() != n || b_gamma.size() != a_gamma.rows()) {
        throw ArgumentError("project_sub: f, w must have " + std::to_string(n) +
                            " entries and b_gamma must match A_gamma rows");
    }
    const Matrix pinv_a = pinv(a_gamma, rank_tol);
    const Matrix null_proj = Matrix::Identity(n, n) - pinv_a * a_gamma;
    return f_theta - pinv_a * (a_gamma * f_theta - b_gamma) + null_proj * w_phi;
}

/// Precomputed (A_g^+, I - A_g^+ A_g) for a list of subsets of one matrix A.
///
/// When A does not depend on the input this is built once and reused for every
/// sample; otherwise it is rebuilt per input.
class ProjectionTable {
public:
    struct Entry {
        IndexCombination gamma;
        std::vector<Eigen::Index> rows;  ///< 0-based
        Matrix pinv;                     ///< n x k
        Matrix null_projector;           ///< n x n
    };

    ProjectionTable(const Matrix& a, std::span<const IndexCombination> combos,
                    double rank_tol = kDefaultRankTol)
        : a_(a) {
        require_finite(a_, "ProjectionTable");
        entries_.reserve(combos.size());
        for (const auto& c : combos) add(c, rank_tol);
    }

    ProjectionTable(const Matrix& a, const CombinationSet& combos, double rank_tol = kDefaultRankTol)
        : a_(a) {
        require_finite(a_, "ProjectionTable");
        if (combos.m() != static_cast<std::size_t>(a.rows()) ||
            combos.n_out() != static_cast<std::size_t>(a.cols())) {
            throw ArgumentError("ProjectionTable: combinations built for a different shape");
        }
        combos.for_each([&](const IndexCombination& c) { add(c, rank_tol); });
    }

    const Matrix& a() const noexcept { return a_; }
    const std::vector<Entry>& entries() const noexcept { return entries_; }
    std::size_t n_out() const noexcept { return static_cast<std::size_t>(a_.cols()); }

private:
    void add(const IndexCombination& c, double rank_tol) {
        Entry e;
        e.gamma = c;
        e.rows.reserve(c.size());
        Matrix sub(static_cast<Eigen::Index>(c.size()), a_.cols());
        for (std::size_t i = 0; i < c.size(); ++i) {
            const std::size_t j = c.indices[i];
            if (j < 1 || j > static_cast<std::size_t>(a_.rows())) {
                throw ArgumentError("ProjectionTable: index " + std::to_string(j) + " out of range");
            }
            e.rows.push_back(static_cast<Eigen::Index>(j - 1));
            sub.row(static_cast<Eigen::Index>(i)) = a_.row(static_cast<Eigen::Index>(j - 1));
        }
        e.pinv = pinv(sub, rank_tol);
        e.null_projector = Matrix::Identity(a_.cols(), a_.cols()) - e.pinv * sub;
        entries_.push_back(std::move(e));
    }

    Matrix a_;
    std::vector<Entry> entries_;
};

namespace detail {

/// Reusable buffers for candidate evaluation.
struct Workspace {
    Vector shifted;  // f + w
    Vector y;
    Vector b_sub;
    Vector diff;

    explicit Workspace(Eigen::Index n) : shifted(n), y(n), b_sub(n), diff(n) {}
};

inline void evaluate_entry(const ProjectionTable::Entry& e, const Vector& b, Workspace& ws) {
    const auto k = static_cast<Eigen::Index>(e.rows.size());
    if (ws.b_sub.size() < k) ws.b_sub.resize(k);
    for (Eigen::Index i = 0; i < k; ++i) ws.b_sub(i) = b(e.rows[static_cast<std::size_t>(i)]);
    ws.y.noalias() = e.null_projector * ws.shifted;
    ws.y.noalias() += e.pinv * ws.b_sub.head(k);
}

/// max_i (a_i y - b_i), stopping early once it exceeds `stop_above`.
inline double max_excess(const Matrix& a, const Vector& b, const Vector& y, double stop_above) {
    double worst = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        const double r = a.row(i).dot(y) - b(i);
        if (r > worst) {
            worst = r;
            if (worst > stop_above) break;
        }
    }
    return worst;
}

inline void check_inputs(const Matrix& a, const Vector& b, const Vector& f, const Vector& w) {
    if (b.size() != a.rows() || f.size() != a.cols() || w.size() != a.cols()) {
        throw ArgumentError("layer: expected b of size " + std::to_string(a.rows()) +
                            " and f, w of size " + std::to_string(a.cols()));
    }
}

}  // namespace detail

/// Every candidate of `table`, in table order.
inline std::vector<ProjectionCandidate> candidates(const ProjectionTable& table, const Vector& b,
                                                   const Vector& f_theta, const Vector& w_phi,
                                                   const LayerConfig& cfg) {
    detail::check_inputs(table.a(), b, f_theta, w_phi);
    const ConstraintSystem sys(table.a(), b);
    detail::Workspace ws(table.a().cols());
    ws.shifted = f_theta + w_phi;
    std::vector<ProjectionCandidate> out;
    out.reserve(table.entries().size());
    for (const auto& e : table.entries()) {
        detail::evaluate_entry(e, b, ws);
        ProjectionCandidate c;
        c.gamma = e.gamma;
        c.y = ws.y;
        c.residual = violation(sys, c.y);
        c.feasible = c.max_residual() <= cfg.feas_tol;
        c.distance = vec_pnorm(c.y - f_theta, cfg.p);
        out.push_back(std::move(c));
    }
    return out;
}

/// Candidates for a system, evaluated chunk by chunk when cfg.chunk_size > 0.
/// The concatenated result does not depend on the chunk size.
inline std::vector<ProjectionCandidate> candidates(const ConstraintSystem& sys,
                                                   const CombinationSet& combos,
                                                   const Vector& f_theta, const Vector& w_phi,
                                                   const LayerConfig& cfg) {
    cfg.validate();
    std::vector<ProjectionCandidate> out;
    std::vector<IndexCombination> chunk;
    const std::size_t chunk_size =
        cfg.chunk_size ? cfg.chunk_size : std::numeric_limits<std::size_t>::max();
    auto flush = [&] {
        if (chunk.empty()) return;
        const ProjectionTable table(sys.a(), chunk, cfg.rank_tol);
        auto part = candidates(table, sys.b(), f_theta, w_phi, cfg);
        out.insert(out.end(), std::make_move_iterator(part.begin()),
                   std::make_move_iterator(part.end()));
        chunk.clear();
    };
    combos.for_each([&](const IndexCombination& c) {
        chunk.push_back(c);
        if (chunk.size() >= chunk_size) flush();
    });
    flush();
    return out;
}

/// Incremental arg-min over candidates; feeding tables in Gamma order yields the
/// same selection regardless of how the family is split into chunks.
class Selector {
public:
    Selector(const Vector& b, const Vector& f_theta, const Vector& w_phi, const LayerConfig& cfg)
        : b_(b), f_(f_theta), cfg_(cfg), ws_(f_theta.size()) {
        ws_.shifted = f_theta + w_phi;
    }

    void consume(const ProjectionTable& table) {
        for (const auto& e : table.entries()) {
            detail::evaluate_entry(e, b_, ws_);
            ws_.diff = ws_.y - f_;
            const double d = vec_pnorm(ws_.diff, cfg_.p);
            // Earlier subsets win ties, so only a strictly closer candidate can replace.
            if (!(d < best_distance_)) continue;
            if (detail::max_excess(table.a(), b_, ws_.y, cfg_.feas_tol) > cfg_.feas_tol) continue;
            best_distance_ = d;
            best_y_ = ws_.y;
            best_gamma_ = e.gamma;
            best_null_ = e.null_projector;
        }
    }

    bool found() const noexcept { return best_gamma_.has_value(); }

    SelectionRecord record() && {
        SelectionRecord r;
        r.branch = Branch::Projected;
        r.gamma = std::move(best_gamma_);
        r.output = std::move(best_y_);
        r.null_projector = std::move(best_null_);
        r.distance = best_distance_;
        return r;
    }

private:
    const Vector& b_;
    const Vector& f_;
    const LayerConfig& cfg_;
    detail::Workspace ws_;
    double best_distance_ = std::numeric_limits<double>::infinity();
    Vector best_y_;
    std::optional<IndexCombination> best_gamma_;
    Matrix best_null_;
};

namespace detail {

inline SelectionRecord interior(const Vector& f_theta) {
    SelectionRecord r;
    r.branch = Branch::Interior;
    r.output = f_theta;
    return r;
}

inline bool is_feasible(const Matrix& a, const Vector& b, const Vector& y, double tol) {
    return max_excess(a, b, y, tol) <= tol;
}

[[noreturn]] inline void throw_empty(std::vector<ProjectionCandidate> all) {
    if (all.empty()) {
        throw EmptyCandidateSet(ProjectionCandidate{});
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < all.size(); ++i) {
        if (all[i].max_residual() < all[best].max_residual()) best = i;
    }
    throw EmptyCandidateSet(std::move(all[best]));
}

}  // namespace detail

/// Forward pass against a precomputed table (A fixed, b per input).
inline SelectionRecord forward(const ProjectionTable& table, const Vector& b, const Vector& f_theta,
                               const Vector& w_phi, const LayerConfig& cfg) {
    detail::check_inputs(table.a(), b, f_theta, w_phi);
    if (detail::is_feasible(table.a(), b, f_theta, cfg.feas_tol)) return detail::interior(f_theta);
    Selector sel(b, f_theta, w_phi, cfg);
    sel.consume(table);
    if (!sel.found()) detail::throw_empty(candidates(table, b, f_theta, w_phi, cfg));
    return std::move(sel).record();
}

/// Forward pass for a single system. Pseudoinverses are computed on the fly,
/// cfg.chunk_size subsets at a time.
inline SelectionRecord forward(const ConstraintSystem& sys, const CombinationSet& combos,
                               const Vector& f_theta, const Vector& w_phi, const LayerConfig& cfg) {
    cfg.validate();
    detail::check_inputs(sys.a(), sys.b(), f_theta, w_phi);
    if (combos.m() != sys.m() || combos.n_out() != sys.n_out()) {
        throw ArgumentError("forward: combinations built for a different shape");
    }
    if (detail::is_feasible(sys.a(), sys.b(), f_theta, cfg.feas_tol)) return detail::interior(f_theta);

    Selector sel(sys.b(), f_theta, w_phi, cfg);
    const std::size_t chunk_size = cfg.chunk_size
                                       ? cfg.chunk_size
                                       : (combos.materialized() ? combos.combos().size() : 4096);
    if (combos.materialized() && chunk_size >= combos.combos().size()) {
        sel.consume(ProjectionTable(sys.a(), combos, cfg.rank_tol));
    } else {
        std::vector<IndexCombination> chunk;
        chunk.reserve(chunk_size);
        combos.for_each([&](const IndexCombination& c) {
            chunk.push_back(c);
            if (chunk.size() >= chunk_size) {
                sel.consume(ProjectionTable(sys.a(), chunk, cfg.rank_tol));
                chunk.clear();
            }
        });
        if (!chunk.empty()) sel.consume(ProjectionTable(sys.a(), chunk, cfg.rank_tol));
    }
    if (!sel.found()) detail::throw_empty(candidates(sys, combos, f_theta, w_phi, cfg));
    return std::move(sel).record();
}

struct LayerGradients {
    Vector f_theta;
    Vector w_phi;
};

/// Gradients of the selected output with respect to f and w, holding the branch
/// and the chosen subset fixed. A(x), b(x) are treated as data.
inline LayerGradients backward(const SelectionRecord& record, const Vector& upstream) {
    if (upstream.size() != record.output.size()) {
        throw ArgumentError("backward: upstream gradient has wrong dimension");
    }
    if (record.branch == Branch::Interior) {
        return {upstream, Vector::Zero(upstream.size())};
    }
    Vector g = record.null_projector.transpose() * upstream;
    return {g, g};
}

/// Gradient of the loss with respect to the constraint data (A, b), full size.
struct ConstraintGradients {
    Matrix a;
    Vector b;
};

/// Sensitivity of the selected output to A and b, for inputs whose constraints
/// depend on upstream quantities. On the Projected branch
///     y = z - A_g^+ (A_g z - b_g),  z = f + w,
/// is differentiated with the constant-rank pseudoinverse derivative; rows outside
/// the chosen subset (and everything on the Interior branch) get zero.
inline ConstraintGradients backward_constraints(const SelectionRecord& record, const ConstraintSystem& sys,
                                                const Vector& f_theta, const Vector& w_phi,
                                                const Vector& upstream, double rank_tol = kDefaultRankTol) {
    const auto n = static_cast<Eigen::Index>(sys.n_out());
    if (upstream.size() != n || f_theta.size() != n || w_phi.size() != n) {
        throw ArgumentError("backward_constraints: dimension mismatch");
    }
    ConstraintGradients out{Matrix::Zero(sys.a().rows(), n), Vector::Zero(sys.a().rows())};
    if (record.branch == Branch::Interior || !record.gamma) return out;
    const auto [a_g, b_g] = select_sub(sys, *record.gamma);
    const Matrix ap = pinv(a_g, rank_tol);
    const Vector& g = upstream;
    const Vector z = f_theta + w_phi;
    const Vector y = z - ap * (a_g * z - b_g);
    const Vector r = a_g * z - b_g;
    const Vector apt_g = ap.transpose() * g;
    const Vector s = r - a_g * (ap * r);
    const Vector u = ap * apt_g;
    const Vector t = ap.transpose() * (ap * r);
    const Vector ng = g - ap * (a_g * g);
    const Matrix ga = -apt_g * y.transpose() - s * u.transpose() - t * ng.transpose();
    for (std::size_t k = 0; k < record.gamma->size(); ++k) {
        const auto row = static_cast<Eigen::Index>(record.gamma->indices[k] - 1);
        out.a.row(row) += ga.row(static_cast<Eigen::Index>(k));
        out.b(row) += apt_g(static_cast<Eigen::Index>(k));
    }
    return out;
}

inline nlohmann::json vector_json(const Vector& v) {
    nlohmann::json out = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
    return out;
}

/// Diagnostic dump: chosen subset plus every candidate's distance and feasibility.
inline nlohmann::json selection_json(const SelectionRecord& record,
                                     const std::vector<ProjectionCandidate>& all) {
    nlohmann::json doc;
    doc["branch"] = record.branch == Branch::Interior ? "interior" : "projected";
    doc["gamma"] = record.gamma ? nlohmann::json(record.gamma->indices) : nlohmann::json(nullptr);
    doc["output"] = vector_json(record.output);
    doc["distance"] = record.distance;
    nlohmann::json cands = nlohmann::json::array();
    for (const auto& c : all) {
        cands.push_back({{"gamma", c.gamma.indices},
                         {"y", vector_json(c.y)},
                         {"distance", c.distance},
                         {"feasible", c.feasible},
                         {"max_residual", c.max_residual()}});
    }
    doc["candidates"] = std::move(cands);
    return doc;
}

}  // namespace caffnet
