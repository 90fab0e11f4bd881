#pragma once

// Training loop shared by the scenarios.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "caffnet/constraints.hpp"
#include "caffnet/errors.hpp"
#include "caffnet/layer.hpp"
#include "caffnet/mlp.hpp"
#include "caffnet/model.hpp"
#include "caffnet/rng.hpp"

namespace caffnet {

struct TrainConfig {
    std::size_t epochs = 1000;
    std::size_t batch_size = 500;
    std::uint64_t seed = 0;
    double penalty = 100.0;  ///< soft-constraint weight
    LayerMode layer_mode = LayerMode::CAffNet;
    LayerConfig layer;
    AdamConfig adam;
    std::vector<std::size_t> hidden{200, 200, 200};
    std::size_t log_every = 1;

    void validate() const {
        if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
        if (!(adam.lr >= 0.0)) throw ConfigError("train: learning rate must be >= 0");
        if (log_every < 1) throw ConfigError("train: log interval must be >= 1");
        layer.validate();
    }
};

struct TraceRow {
    std::size_t epoch = 0;
    double loss = 0.0;
    double max_violation = 0.0;
    double mean_violation = 0.0;
};

/// Loss and (reported) violation of the predictions made during one epoch.
struct EpochStats {
    double loss = 0.0;
    double max_violation = 0.0;
    double mean_violation = 0.0;
};

/// Ordered name/value pairs; the order defines the CSV columns.
using Metrics = std::vector<std::pair<std::string, double>>;

inline double metric(const Metrics& m, const std::string& name) {
    for (const auto& [k, v] : m)
        if (k == name) return v;
    throw ArgumentError("no metric named '" + name + "'");
}

/// One experiment: data, constraints, loss and metrics.
class Scenario {
public:
    virtual ~Scenario() = default;

    virtual std::string name() const = 0;
    virtual const ConstraintProvider& provider() const = 0;

    /// Runs one epoch of optimisation; stats describe the pre-update predictions.
    virtual EpochStats train_epoch(Model& model, ModelOptimizer& opt, const CAffineLayer& layer,
                                   const TrainConfig& cfg, std::size_t epoch) const = 0;

    /// Test-set metrics, in the scenario's column order.
    virtual Metrics evaluate(const Model& model, const CAffineLayer& layer,
                             const TrainConfig& cfg) const = 0;
};

/// Adds `r` (already rounded to the reporting resolution) to running violation totals.
struct ViolationAccumulator {
    double max = 0.0;
    double sum = 0.0;
    std::size_t count = 0;
    std::size_t positive = 0;

    void add(const Vector& r) {
        for (Eigen::Index i = 0; i < r.size(); ++i) {
            max = std::max(max, r(i));
            sum += r(i);
            if (r(i) > 0.0) ++positive;
        }
        count += static_cast<std::size_t>(r.size());
    }
    double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
    double percent() const {
        return count ? 100.0 * static_cast<double>(positive) / static_cast<double>(count) : 0.0;
    }
};

/// Output of the composed model for a single input whose networks were already
/// evaluated. Soft mode returns f unchanged; PostHoc projects with w = 0.
inline SelectionRecord constrained_output(LayerMode mode, const CAffineLayer& layer,
                                          const ConstraintSystem& sys, const Vector& f,
                                          const Vector& w) {
    switch (mode) {
        case LayerMode::Soft: {
            SelectionRecord r;
            r.output = f;
            return r;
        }
        case LayerMode::CAffNet: return layer.forward(sys, f, w);
        case LayerMode::PostHoc: return layer.forward(sys, f, Vector::Zero(f.size()));
    }
    throw ArgumentError("constrained_output: bad mode");
}

/// Scenario whose loss is a sum of independent per-sample terms.
class PointwiseScenario : public Scenario {
public:
    /// Task loss for sample i of the training set (penalties excluded).
    virtual double sample_loss(std::size_t i, const Vector& y, Vector* grad) const = 0;

    virtual const Matrix& train_inputs() const = 0;  ///< n_in x N
    virtual const Matrix& test_inputs() const = 0;

    const ConstraintSystem& train_system(std::size_t i) const { return train_systems().at(i); }
    const ConstraintSystem& test_system(std::size_t i) const { return test_systems().at(i); }

    EpochStats train_epoch(Model& model, ModelOptimizer& opt, const CAffineLayer& layer,
                           const TrainConfig& cfg, std::size_t epoch) const override {
        const auto n = static_cast<std::size_t>(train_inputs().cols());
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        if (cfg.batch_size < n) {
            Rng rng = Rng(cfg.seed, 0xba7c).split(epoch);
            for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        }
        const bool projected = cfg.layer_mode == LayerMode::CAffNet;
        double loss_sum = 0.0;
        ViolationAccumulator viol;
        MlpTape tape_f, tape_w;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t stop = std::min(n, start + cfg.batch_size);
            const auto b = static_cast<Eigen::Index>(stop - start);
            Matrix x(train_inputs().rows(), b);
            for (Eigen::Index j = 0; j < b; ++j) x.col(j) = train_inputs().col(static_cast<Eigen::Index>(order[start + static_cast<std::size_t>(j)]));
            const Matrix f = model.f.forward(x, &tape_f);
            const Matrix w = projected ? model.w.forward(x, &tape_w) : Matrix::Zero(f.rows(), f.cols());
            Matrix grad_f(f.rows(), b), grad_w(f.rows(), b);
            double batch_loss = 0.0;
            Vector gy, gp;
            for (Eigen::Index j = 0; j < b; ++j) {
                const std::size_t i = order[start + static_cast<std::size_t>(j)];
                const ConstraintSystem& sys = train_system(i);
                // PostHoc trains exactly like Soft.
                const LayerMode mode = projected ? LayerMode::CAffNet : LayerMode::Soft;
                const SelectionRecord rec = constrained_output(mode, layer, sys, f.col(j), w.col(j));
                double l = sample_loss(i, rec.output, &gy);
                if (!projected) {
                    l += soft_penalty(sys, rec.output, cfg.penalty, &gp);
                    gy += gp;
                }
                batch_loss += l;
                viol.add(reported(violation(sys, rec.output)));
                const LayerGradients lg = backward(rec, gy);
                grad_f.col(j) = lg.f_theta / static_cast<double>(b);
                grad_w.col(j) = lg.w_phi / static_cast<double>(b);
            }
            ModelGradients g{model.f.backward(tape_f, grad_f), projected ? model.w.backward(tape_w, grad_w) : model.w.zero_gradients()};
            opt.step(model, g, projected);
            loss_sum += batch_loss;
        }
        return {loss_sum / static_cast<double>(n), viol.max, viol.mean()};
    }

    /// Test-set outputs of the composed model, one column per sample.
    Matrix predict_test(const Model& model, const CAffineLayer& layer, LayerMode mode) const {
        const Matrix f = model.f.forward(test_inputs());
        const Matrix w = mode == LayerMode::CAffNet ? model.w.forward(test_inputs())
                                                    : Matrix::Zero(f.rows(), f.cols());
        Matrix y(f.rows(), f.cols());
        for (Eigen::Index j = 0; j < f.cols(); ++j) {
            y.col(j) = constrained_output(mode, layer, test_system(static_cast<std::size_t>(j)),
                                          f.col(j), w.col(j))
                           .output;
        }
        return y;
    }

protected:
    virtual const std::vector<ConstraintSystem>& train_systems() const = 0;
    virtual const std::vector<ConstraintSystem>& test_systems() const = 0;

    static std::vector<ConstraintSystem> systems_for(const ConstraintProvider& provider,
                                                     const Matrix& inputs) {
        std::vector<ConstraintSystem> out;
        out.reserve(static_cast<std::size_t>(inputs.cols()));
        for (Eigen::Index j = 0; j < inputs.cols(); ++j) out.push_back(provider.evaluate(inputs.col(j)));
        return out;
    }
};

struct TrainResult {
    Model model;
    std::vector<TraceRow> trace;
    double train_ms_per_epoch = 0.0;
};

/// Trains `model` on `scenario`. The trace records every cfg.log_every-th epoch
/// and always the last one. Throws DivergenceError on a non-finite loss.
inline TrainResult train(Model model, const Scenario& scenario, const TrainConfig& cfg) {
    cfg.validate();
    const CAffineLayer layer(scenario.provider(), cfg.layer);
    ModelOptimizer opt(model, cfg.adam);
    TrainResult out;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const EpochStats s = scenario.train_epoch(model, opt, layer, cfg, epoch);
        if (!std::isfinite(s.loss)) {
            throw DivergenceError(epoch, "training diverged: non-finite loss at epoch " + std::to_string(epoch));
        }
        if (epoch % cfg.log_every == 0 || epoch == cfg.epochs || epoch == 1) {
            out.trace.push_back({epoch, s.loss, s.max_violation, s.mean_violation});
        }
    }
    const auto t1 = std::chrono::steady_clock::now();
    out.train_ms_per_epoch =
        std::chrono::duration<double, std::milli>(t1 - t0).count() / static_cast<double>(cfg.epochs);
    out.model = std::move(model);
    return out;
}

}  // namespace caffnet
