#pragma once

// Input-dependent affine constraint systems A(x) y <= b(x) and the family of
// row subsets used to decompose them.

#include <algorithm>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "caffnet/errors.hpp"
#include "caffnet/linalg.hpp"

namespace caffnet {

/// One evaluated constraint system for a fixed input.
class ConstraintSystem {
public:
    ConstraintSystem() = default;
    ConstraintSystem(Matrix a, Vector b) : a_(std::move(a)), b_(std::move(b)) {
        if (a_.rows() != b_.size()) {
            throw ArgumentError("ConstraintSystem: A has " + std::to_string(a_.rows()) +
                                " rows but b has " + std::to_string(b_.size()) + " entries");
        }
        require_finite(a_, "ConstraintSystem A");
        require_finite(b_, "ConstraintSystem b");
    }

    const Matrix& a() const noexcept { return a_; }
    const Vector& b() const noexcept { return b_; }
    std::size_t m() const noexcept { return static_cast<std::size_t>(a_.rows()); }
    std::size_t n_out() const noexcept { return static_cast<std::size_t>(a_.cols()); }

    /// Same A, right-hand side replaced. Used to re-centre a system around an offset.
    ConstraintSystem with_b(Vector b) const { return ConstraintSystem(a_, std::move(b)); }

private:
    Matrix a_;
    Vector b_;
};

/// Maps an input x to its constraint system. Dimensions are fixed across
/// inputs and A(x), b(x) are expected to be continuous in x. Implementations
/// must be safe to call concurrently for distinct inputs.
class ConstraintProvider {
public:
    virtual ~ConstraintProvider() = default;

    virtual std::size_t n_in() const = 0;
    virtual std::size_t m() const = 0;
    virtual std::size_t n_out() const = 0;
    virtual ConstraintSystem evaluate(const Vector& x) const = 0;

    /// True when A does not depend on x; callers may then precompute the
    /// per-combination pseudoinverses once.
    virtual bool constant_matrix() const { return false; }
};

/// Provider backed by a callable.
class FunctionProvider final : public ConstraintProvider {
public:
    using Fn = std::function<ConstraintSystem(const Vector&)>;

    FunctionProvider(std::size_t n_in, std::size_t m, std::size_t n_out, Fn fn,
                     bool constant_matrix = false)
        : n_in_(n_in), m_(m), n_out_(n_out), fn_(std::move(fn)), constant_(constant_matrix) {}

    std::size_t n_in() const override { return n_in_; }
    std::size_t m() const override { return m_; }
    std::size_t n_out() const override { return n_out_; }
    bool constant_matrix() const override { return constant_; }

    ConstraintSystem evaluate(const Vector& x) const override {
        if (static_cast<std::size_t>(x.size()) != n_in_) {
            throw ArgumentError("FunctionProvider: expected input of dimension " +
                                std::to_string(n_in_));
        }
        ConstraintSystem sys = fn_(x);
        if (sys.m() != m_ || sys.n_out() != n_out_) {
            throw ArgumentError("FunctionProvider: callable returned a " +
                                dims(sys.a().rows(), sys.a().cols()) + " system");
        }
        return sys;
    }

private:
    std::size_t n_in_, m_, n_out_;
    Fn fn_;
    bool constant_;
};

/// Strictly increasing, 1-based constraint indices (j_1 < ... < j_k).
struct IndexCombination {
    std::vector<std::size_t> indices;

    std::size_t size() const noexcept { return indices.size(); }
    auto operator<=>(const IndexCombination&) const = default;

    std::string to_string() const {
        std::string out = "(";
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (i) out += ",";
            out += std::to_string(indices[i]);
        }
        return out + ")";
    }
};

enum class CombinationMode { Full, Lite };

inline const char* to_string(CombinationMode mode) {
    return mode == CombinationMode::Full ? "full" : "lite";
}

inline CombinationMode combination_mode_from_string(const std::string& s) {
    if (s == "full") return CombinationMode::Full;
    if (s == "lite") return CombinationMode::Lite;
    throw ConfigError("unknown combination mode '" + s + "' (expected full|lite)");
}

/// Binomial coefficient; saturates at uint64 max.
inline std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
    if (k > n) return 0;
    k = std::min(k, n - k);
    // Exact as long as it fits: C(n, i) * (n - i) is divisible by (i + 1).
    unsigned __int128 acc = 1;
    for (std::uint64_t i = 0; i < k; ++i) {
        acc = acc * (n - i) / (i + 1);
        if (acc > std::numeric_limits<std::uint64_t>::max()) {
            return std::numeric_limits<std::uint64_t>::max();
        }
    }
    return static_cast<std::uint64_t>(acc);
}

/// Walks the combination family in lexicographic order without materialising it.
///
/// Full mode is a depth-first walk (a prefix precedes its extensions); Lite
/// mode interleaves each singleton (j) before the max-size combinations that
/// start with j, which is the same order restricted to k in {1, K}.
class CombinationCursor {
public:
    CombinationCursor(std::size_t m, std::size_t n_out, CombinationMode mode)
        : m_(m), k_max_(std::min(m, n_out)), mode_(mode) {}

    /// Writes the next combination into `out`; false once exhausted.
    bool next(IndexCombination& out) {
        if (done_) return false;
        if (!started_) {
            started_ = true;
            cur_.assign(1, 0);
        } else if (mode_ == CombinationMode::Full || k_max_ == 1) {
            if (!advance_full()) return finish();
        } else if (!advance_lite()) {
            return finish();
        }
        out.indices.resize(cur_.size());
        for (std::size_t i = 0; i < cur_.size(); ++i) out.indices[i] = cur_[i] + 1;
        return true;
    }

private:
    bool finish() {
        done_ = true;
        return false;
    }

    bool advance_full() {
        const std::size_t limit = mode_ == CombinationMode::Full ? k_max_ : 1;
        if (cur_.size() < limit && cur_.back() + 1 < m_) {
            cur_.push_back(cur_.back() + 1);
            return true;
        }
        while (!cur_.empty()) {
            if (cur_.back() + 1 < m_) {
                ++cur_.back();
                return true;
            }
            cur_.pop_back();
        }
        return false;
    }

    bool advance_lite() {
        const std::size_t k = k_max_;
        if (cur_.size() == 1) {
            const std::size_t j = cur_[0];
            if (j + k <= m_) {
                for (std::size_t i = 1; i < k; ++i) cur_.push_back(j + i);
                return true;
            }
            return next_singleton(j);
        }
        // Rightmost position that can still move within a k-combination.
        for (std::size_t pos = k; pos-- > 1;) {
            if (cur_[pos] < m_ - k + pos) {
                ++cur_[pos];
                for (std::size_t i = pos + 1; i < k; ++i) cur_[i] = cur_[i - 1] + 1;
                return true;
            }
        }
        return next_singleton(cur_[0]);
    }

    bool next_singleton(std::size_t j) {
        if (j + 1 >= m_) return false;
        cur_.assign(1, j + 1);
        return true;
    }

    std::size_t m_, k_max_;
    CombinationMode mode_;
    std::vector<std::size_t> cur_;
    bool started_ = false;
    bool done_ = false;
};

/// The family Gamma of row subsets for given (m, n_out).
///
/// Materialised eagerly for m <= kEagerLimit; larger families are only
/// available through cursor()/for_each() to keep memory bounded.
class CombinationSet {
public:
    static constexpr std::size_t kEagerLimit = 24;

    CombinationSet(std::size_t m, std::size_t n_out, CombinationMode mode)
        : m_(m), n_out_(n_out), mode_(mode) {
        if (m == 0 || n_out == 0) {
            throw ArgumentError("enumerate_combinations: m and n_out must be positive");
        }
        if (m <= kEagerLimit) {
            combos_.reserve(static_cast<std::size_t>(count(m, n_out, mode)));
            CombinationCursor cursor = this->cursor();
            IndexCombination c;
            while (cursor.next(c)) combos_.push_back(c);
        }
    }

    /// Closed-form size of the family.
    static std::uint64_t count(std::size_t m, std::size_t n_out, CombinationMode mode) {
        const std::size_t k_max = std::min(m, n_out);
        if (mode == CombinationMode::Lite) {
            return k_max > 1 ? m + binomial(m, k_max) : m;
        }
        std::uint64_t total = 0;
        for (std::size_t k = 1; k <= k_max; ++k) {
            const std::uint64_t c = binomial(m, k);
            if (total > std::numeric_limits<std::uint64_t>::max() - c) {
                return std::numeric_limits<std::uint64_t>::max();
            }
            total += c;
        }
        return total;
    }

    std::size_t m() const noexcept { return m_; }
    std::size_t n_out() const noexcept { return n_out_; }
    std::size_t max_size() const noexcept { return std::min(m_, n_out_); }
    CombinationMode mode() const noexcept { return mode_; }
    std::uint64_t size() const { return count(m_, n_out_, mode_); }
    bool materialized() const noexcept { return m_ <= kEagerLimit; }

    const std::vector<IndexCombination>& combos() const {
        if (!materialized()) {
            throw ArgumentError("CombinationSet: family with m=" + std::to_string(m_) +
                                " is streamed; use cursor()");
        }
        return combos_;
    }

    CombinationCursor cursor() const { return CombinationCursor(m_, n_out_, mode_); }

    template <typename Fn>
    void for_each(Fn&& fn) const {
        if (materialized()) {
            for (const auto& c : combos_) fn(c);
            return;
        }
        CombinationCursor cur = cursor();
        IndexCombination c;
        while (cur.next(c)) fn(c);
    }

private:
    std::size_t m_, n_out_;
    CombinationMode mode_;
    std::vector<IndexCombination> combos_;
};

inline CombinationSet enumerate_combinations(std::size_t m, std::size_t n_out,
                                             CombinationMode mode) {
    return CombinationSet(m, n_out, mode);
}

/// Rows of A and entries of b picked by `gamma`, in order.
inline std::pair<Matrix, Vector> select_sub(const ConstraintSystem& sys,
                                            const IndexCombination& gamma) {
    const auto k = static_cast<Eigen::Index>(gamma.size());
    Matrix a(k, sys.a().cols());
    Vector b(k);
    for (Eigen::Index i = 0; i < k; ++i) {
        const std::size_t j = gamma.indices[static_cast<std::size_t>(i)];
        if (j < 1 || j > sys.m()) {
            throw ArgumentError("select_sub: index " + std::to_string(j) + " outside 1.." +
                                std::to_string(sys.m()));
        }
        a.row(i) = sys.a().row(static_cast<Eigen::Index>(j - 1));
        b(i) = sys.b()(static_cast<Eigen::Index>(j - 1));
    }
    return {std::move(a), std::move(b)};
}

/// r = max(0, A y - b), elementwise.
inline Vector violation(const ConstraintSystem& sys, const Vector& y) {
    if (static_cast<std::size_t>(y.size()) != sys.n_out()) {
        throw ArgumentError("violation: y has dimension " + std::to_string(y.size()) +
                            ", expected " + std::to_string(sys.n_out()));
    }
    return (sys.a() * y - sys.b()).cwiseMax(0.0);
}

struct ViolationSummary {
    double max = 0.0;
    double mean = 0.0;
    double fraction_positive = 0.0;  ///< share of entries strictly above zero
};

inline ViolationSummary summarize(const Vector& r) {
    ViolationSummary s;
    if (r.size() == 0) return s;
    s.max = r.maxCoeff();
    s.mean = r.mean();
    s.fraction_positive =
        static_cast<double>((r.array() > 0.0).count()) / static_cast<double>(r.size());
    return s;
}

inline nlohmann::json to_json(const ConstraintSystem& sys) {
    nlohmann::json a = nlohmann::json::array();
    for (Eigen::Index i = 0; i < sys.a().rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < sys.a().cols(); ++j) row.push_back(sys.a()(i, j));
        a.push_back(std::move(row));
    }
    nlohmann::json b = nlohmann::json::array();
    for (Eigen::Index i = 0; i < sys.b().size(); ++i) b.push_back(sys.b()(i));
    return {{"A", std::move(a)}, {"b", std::move(b)}};
}

inline ConstraintSystem constraint_system_from_json(const nlohmann::json& doc) {
    if (!doc.contains("A") || !doc.contains("b")) {
        throw ArgumentError("constraint system JSON needs keys \"A\" and \"b\"");
    }
    const auto& rows = doc.at("A");
    const auto& bs = doc.at("b");
    const auto m = static_cast<Eigen::Index>(rows.size());
    const auto n = m > 0 ? static_cast<Eigen::Index>(rows.at(0).size()) : 0;
    Matrix a(m, n);
    for (Eigen::Index i = 0; i < m; ++i) {
        const auto& row = rows.at(static_cast<std::size_t>(i));
        if (static_cast<Eigen::Index>(row.size()) != n) {
            throw ArgumentError("constraint system JSON: ragged A");
        }
        for (Eigen::Index j = 0; j < n; ++j) a(i, j) = row.at(static_cast<std::size_t>(j)).get<double>();
    }
    Vector b(static_cast<Eigen::Index>(bs.size()));
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = bs.at(static_cast<std::size_t>(i)).get<double>();
    return ConstraintSystem(std::move(a), std::move(b));
}

}  // namespace caffnet
