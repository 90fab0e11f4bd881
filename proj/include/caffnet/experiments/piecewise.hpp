#pragma once

// 1-D regression of a piecewise target under two piecewise upper and two
// piecewise lower bounds: A = [1, 1, -1, -1]^T, b(x) = [gu1, gu2, -gl1, -gl2].

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "caffnet/constraints.hpp"
#include "caffnet/train.hpp"

namespace caffnet::experiments {

namespace detail {
inline double wave(double x) { return std::sin(std::numbers::pi / 2.0 * (x + 1.0)); }
}  // namespace detail

/// Pieces are (-inf, -1], (-1, 0], (0, 1], (1, inf).
inline double piecewise_target(double x) {
    if (x <= -1.0) return -5.0 * detail::wave(x) - 2.0;
    if (x <= 0.0) return -2.0;
    if (x <= 1.0) return 2.0 - 9.0 * (x - 2.0 / 3.0) * (x - 2.0 / 3.0);
    return 3.0 / (x * x) - 2.0;
}

struct PiecewiseBoundValues {
    double upper1, upper2, lower1, lower2;
};

inline PiecewiseBoundValues piecewise_bound_values(double x) {
    if (x <= -1.0) {
        const double s = detail::wave(x);
        return {-3.0 * s + 0.2, -3.0 * s * s * s + 1.0, 5.0 * s * s - 3.0, 5.0 * std::pow(s, 8) - 2.0};
    }
    if (x <= 0.0) return {-2.0, 2.0, -2.0, -3.0};
    if (x <= 1.0) {
        const double a = x - 0.5, c = x - 0.8, d = x - 2.0 / 3.0, e = x - 1.0 / 6.0;
        return {3.0 - 4.0 * a * a, 3.0 - 4.0 * c * c, (4.0 - 9.0 * d * d) * x - 2.5,
                (5.0 - 4.0 * e * e) * x - 2.5};
    }
    return {2.0, 2.5, 3.0 / (x * x * x) - 2.5, 1.5 / (x * x * x) - 16.0 / 9.0};
}

inline ConstraintSystem piecewise_bounds(double x) {
    const PiecewiseBoundValues g = piecewise_bound_values(x);
    Matrix a(4, 1);
    a << 1.0, 1.0, -1.0, -1.0;
    Vector b(4);
    b << g.upper1, g.upper2, -g.lower1, -g.lower2;
    return ConstraintSystem(std::move(a), std::move(b));
}

class PiecewiseProvider final : public ConstraintProvider {
public:
    std::size_t n_in() const override { return 1; }
    std::size_t m() const override { return 4; }
    std::size_t n_out() const override { return 1; }
    bool constant_matrix() const override { return true; }
    ConstraintSystem evaluate(const Vector& x) const override {
        if (x.size() != 1) throw ArgumentError("piecewise: input must be scalar");
        return piecewise_bounds(x(0));
    }
};

struct PiecewiseData {
    Matrix train_x;  ///< 1 x n_train, uniform on [-2, 2]
    Vector train_y;
    Matrix test_x;   ///< 1 x n_test, evenly spaced on [-2, 2]
    Vector test_y;
};

inline PiecewiseData piecewise_dataset(std::uint64_t seed, std::size_t n_train = 50,
                                       std::size_t n_test = 400) {
    PiecewiseData d;
    Rng rng = Rng(seed).split(0xda7a);
    d.train_x.resize(1, static_cast<Eigen::Index>(n_train));
    d.train_y.resize(static_cast<Eigen::Index>(n_train));
    for (Eigen::Index i = 0; i < d.train_x.cols(); ++i) {
        d.train_x(0, i) = rng.uniform(-2.0, 2.0);
        d.train_y(i) = piecewise_target(d.train_x(0, i));
    }
    const Vector grid = Vector::LinSpaced(static_cast<Eigen::Index>(n_test), -2.0, 2.0);
    d.test_x = grid.transpose();
    d.test_y = grid.unaryExpr([](double x) { return piecewise_target(x); });
    return d;
}

class PiecewiseScenario final : public PointwiseScenario {
public:
    explicit PiecewiseScenario(std::uint64_t seed, std::size_t n_train = 50, std::size_t n_test = 400)
        : data_(piecewise_dataset(seed, n_train, n_test)),
          train_sys_(systems_for(provider_, data_.train_x)),
          test_sys_(systems_for(provider_, data_.test_x)) {}

    std::string name() const override { return "piecewise"; }
    const ConstraintProvider& provider() const override { return provider_; }
    const Matrix& train_inputs() const override { return data_.train_x; }
    const Matrix& test_inputs() const override { return data_.test_x; }
    const PiecewiseData& data() const { return data_; }

    double sample_loss(std::size_t i, const Vector& y, Vector* grad) const override {
        const double r = y(0) - data_.train_y(static_cast<Eigen::Index>(i));
        if (grad) *grad = Vector::Constant(1, 2.0 * r);
        return r * r;
    }

    /// mse, max, mean (reported inequality violation over the test grid).
    Metrics evaluate(const Model& model, const CAffineLayer& layer, const TrainConfig& cfg) const override {
        const Matrix y = predict_test(model, layer, cfg.layer_mode);
        ViolationAccumulator viol;
        double se = 0.0;
        for (Eigen::Index j = 0; j < y.cols(); ++j) {
            const double r = y(0, j) - data_.test_y(j);
            se += r * r;
            viol.add(reported(violation(test_sys_[static_cast<std::size_t>(j)], y.col(j))));
        }
        return {{"mse", se / static_cast<double>(y.cols())},
                {"ineq_max", viol.max},
                {"ineq_mean", viol.mean()}};
    }

protected:
    const std::vector<ConstraintSystem>& train_systems() const override { return train_sys_; }
    const std::vector<ConstraintSystem>& test_systems() const override { return test_sys_; }

private:
    PiecewiseProvider provider_;
    PiecewiseData data_;
    std::vector<ConstraintSystem> train_sys_;
    std::vector<ConstraintSystem> test_sys_;
};

}  // namespace caffnet::experiments
