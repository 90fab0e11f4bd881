#pragma once

// The two backbone networks f_theta and w_phi composed with the constraint layer.

#include <cstddef>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "caffnet/constraints.hpp"
#include "caffnet/errors.hpp"
#include "caffnet/layer.hpp"
#include "caffnet/mlp.hpp"
#include "caffnet/rng.hpp"

namespace caffnet {

/// Residuals at or below this are reported as zero. The layer's feasibility
/// slack (feas_tol, 1e-9 by default) never exceeds it.
inline constexpr double kReportResolution = 1e-9;

inline double reported(double residual) { return residual > kReportResolution ? residual : 0.0; }

inline Vector reported(const Vector& residuals) {
    return residuals.unaryExpr([](double r) { return reported(r); });
}

/// How constraints enter a model.
enum class LayerMode {
    Soft,     ///< plain network, penalty term in the loss
    CAffNet,  ///< projection layer in the loop during training and inference
    PostHoc,  ///< trained like Soft, projected (with w = 0) only at inference
};

inline const char* to_string(LayerMode mode) {
    switch (mode) {
        case LayerMode::Soft: return "soft";
        case LayerMode::CAffNet: return "caffnet";
        case LayerMode::PostHoc: return "post-hoc";
    }
    return "?";
}

inline LayerMode layer_mode_from_string(const std::string& s) {
    if (s == "soft" || s == "nn") return LayerMode::Soft;
    if (s == "caffnet") return LayerMode::CAffNet;
    if (s == "post-hoc" || s == "posthoc") return LayerMode::PostHoc;
    throw ConfigError("unknown layer mode '" + s + "'");
}

/// penalty * sum_i max(0, a_i y - b_i), with its gradient in y.
inline double soft_penalty(const ConstraintSystem& sys, const Vector& y, double penalty,
                           Vector* grad = nullptr) {
    const Vector excess = sys.a() * y - sys.b();
    double total = 0.0;
    if (grad) grad->setZero(y.size());
    for (Eigen::Index i = 0; i < excess.size(); ++i) {
        if (excess(i) > 0.0) {
            total += excess(i);
            if (grad) *grad += penalty * sys.a().row(i).transpose();
        }
    }
    return penalty * total;
}

/// Constraint layer bound to a provider, with the per-subset pseudoinverse
/// table cached when the provider's matrix does not depend on the input.
class CAffineLayer {
public:
    CAffineLayer(const ConstraintProvider& provider, LayerConfig cfg)
        : provider_(&provider),
          cfg_(cfg),
          combos_(provider.m(), provider.n_out(), cfg.mode) {
        cfg_.validate();
    }

    const LayerConfig& config() const noexcept { return cfg_; }
    const CombinationSet& combinations() const noexcept { return combos_; }
    const ConstraintProvider& provider() const noexcept { return *provider_; }

    SelectionRecord forward(const ConstraintSystem& sys, const Vector& f, const Vector& w) const {
        if (const ProjectionTable* table = cached_table(sys)) {
            return caffnet::forward(*table, sys.b(), f, w, cfg_);
        }
        return caffnet::forward(sys, combos_, f, w, cfg_);
    }

    std::vector<ProjectionCandidate> candidates(const ConstraintSystem& sys, const Vector& f,
                                                const Vector& w) const {
        return caffnet::candidates(sys, combos_, f, w, cfg_);
    }

private:
    const ProjectionTable* cached_table(const ConstraintSystem& sys) const {
        if (!provider_->constant_matrix() || !combos_.materialized() || cfg_.chunk_size != 0) {
            return nullptr;
        }
        std::call_once(table_once_, [&] {
            table_ = std::make_unique<ProjectionTable>(sys.a(), combos_, cfg_.rank_tol);
        });
        if (table_->a().rows() != sys.a().rows() || table_->a().cols() != sys.a().cols() ||
            table_->a() != sys.a()) {
            throw ArgumentError("CAffineLayer: provider declared a constant matrix but A changed");
        }
        return table_.get();
    }

    const ConstraintProvider* provider_;
    LayerConfig cfg_;
    CombinationSet combos_;
    mutable std::once_flag table_once_;
    mutable std::unique_ptr<ProjectionTable> table_;
};

struct Model {
    Mlp f;  ///< unconstrained prediction f_theta
    Mlp w;  ///< null-space shift w_phi

    static Model make(std::size_t n_in, std::size_t n_out, const std::vector<std::size_t>& hidden,
                      std::uint64_t seed) {
        std::vector<std::size_t> widths{n_in};
        widths.insert(widths.end(), hidden.begin(), hidden.end());
        widths.push_back(n_out);
        Rng root(seed);
        Rng rf = root.split(1), rw = root.split(2);
        return Model{Mlp(widths, rf), Mlp(widths, rw)};
    }
};

struct ModelGradients {
    MlpGradients f;
    MlpGradients w;
};

struct ModelOptimizer {
    AdamState f;
    AdamState w;

    ModelOptimizer(const Model& model, AdamConfig cfg) : f(model.f, cfg), w(model.w, cfg) {}

    void step(Model& model, const ModelGradients& g, bool update_w = true) {
        f.step(model.f, g.f);
        if (update_w) w.step(model.w, g.w);
    }
};

}  // namespace caffnet
