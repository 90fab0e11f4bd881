#pragma once

// Dense linear algebra helpers shared by the layer, the oracles and the
// experiments. Storage is Eigen; everything runs in double precision.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "caffnet/errors.hpp"

namespace caffnet {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Relative singular-value cutoff used when no explicit tolerance is given.
inline constexpr double kDefaultRankTol = 1e-10;

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
    return m.allFinite();
}

inline std::string dims(Eigen::Index rows, Eigen::Index cols) {
    return std::to_string(rows) + "x" + std::to_string(cols);
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const char* what) {
    if (!m.allFinite()) {
        throw NumericError(std::string(what) + ": non-finite entry in " + dims(m.rows(), m.cols()) +
                           " operand");
    }
}

namespace detail {

inline Eigen::JacobiSVD<Matrix> svd_of(const Matrix& a, int options) {
    require_finite(a, "svd");
    Eigen::JacobiSVD<Matrix> svd(a, options);
    if (svd.info() != Eigen::Success) {
        throw NumericError("svd: no convergence for " + dims(a.rows(), a.cols()) + " matrix");
    }
    return svd;
}

}  // namespace detail

/// Moore-Penrose pseudoinverse via SVD.
///
/// Singular values at or below `rank_tol * sigma_max` are treated as zero, so
/// the returned matrix is the pseudoinverse of the rank-truncated operator.
/// The Jacobi sweep order is fixed, which makes the result deterministic for a
/// given input.
inline Matrix pinv(const Matrix& a, double rank_tol = kDefaultRankTol) {
    if (!(rank_tol > 0.0)) {
        throw ArgumentError("pinv: rank_tol must be positive");
    }
    if (a.size() == 0) {
        return Matrix::Zero(a.cols(), a.rows());
    }
    const auto svd = detail::svd_of(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& sigma = svd.singularValues();
    const double cutoff = rank_tol * sigma(0);
    Vector inv = Vector::Zero(sigma.size());
    for (Eigen::Index i = 0; i < sigma.size(); ++i) {
        if (sigma(i) > cutoff) inv(i) = 1.0 / sigma(i);
    }
    return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

/// Numerical rank with the same cutoff rule as pinv().
inline Eigen::Index numerical_rank(const Matrix& a, double rank_tol = kDefaultRankTol) {
    if (a.size() == 0) return 0;
    const auto svd = detail::svd_of(a, 0);
    const Vector& sigma = svd.singularValues();
    const double cutoff = rank_tol * sigma(0);
    return static_cast<Eigen::Index>(std::count_if(sigma.begin(), sigma.end(),
                                                   [&](double s) { return s > cutoff; }));
}

/// (sum |v_i|^p)^(1/p) for p >= 1.
template <typename Derived>
double vec_pnorm(const Eigen::MatrixBase<Derived>& v, double p) {
    if (!(p >= 1.0)) throw ArgumentError("vec_pnorm: p must be >= 1");
    if (p == 1.0) return v.template lpNorm<1>();
    if (p == 2.0) return v.norm();
    if (std::isinf(p)) return v.template lpNorm<Eigen::Infinity>();
    // Scale by the largest magnitude so large p does not overflow.
    const double scale = v.template lpNorm<Eigen::Infinity>();
    if (scale == 0.0) return 0.0;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) acc += std::pow(std::abs(v(i)) / scale, p);
    return scale * std::pow(acc, 1.0 / p);
}

/// Largest singular value.
inline double spectral_norm(const Matrix& a) {
    if (a.size() == 0) return 0.0;
    return detail::svd_of(a, 0).singularValues()(0);
}

/// Orthonormal basis of the null space of `a`, one column per direction.
///
/// Each column is normalised so that its first component with magnitude above
/// 1e-12 is positive.
inline Matrix null_space_basis(const Matrix& a, double rank_tol = kDefaultRankTol) {
    const Eigen::Index n = a.cols();
    if (a.rows() == 0) return Matrix::Identity(n, n);
    const auto svd = detail::svd_of(a, Eigen::ComputeFullV);
    const Vector& sigma = svd.singularValues();
    const double cutoff = sigma.size() > 0 ? rank_tol * sigma(0) : 0.0;
    Eigen::Index rank = 0;
    for (Eigen::Index i = 0; i < sigma.size(); ++i) {
        if (sigma(i) > cutoff) ++rank;
    }
    Matrix basis = svd.matrixV().rightCols(n - rank);
    for (Eigen::Index c = 0; c < basis.cols(); ++c) {
        for (Eigen::Index r = 0; r < n; ++r) {
            if (std::abs(basis(r, c)) > 1e-12) {
                if (basis(r, c) < 0) basis.col(c) *= -1.0;
                break;
            }
        }
    }
    return basis;
}

}  // namespace caffnet
