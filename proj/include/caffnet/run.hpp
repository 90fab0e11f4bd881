#pragma once

// Resolved run configuration and a single (scenario, method, seed) run, shared
// by the command-line tool and the acceptance checks.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "caffnet/errors.hpp"
#include "caffnet/experiments/piecewise.hpp"
#include "caffnet/experiments/solver.hpp"
#include "caffnet/experiments/unicycle.hpp"
#include "caffnet/report.hpp"
#include "caffnet/train.hpp"

namespace caffnet {

struct RunConfig {
    std::string scenario;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::vector<LayerMode> methods{LayerMode::CAffNet};
    std::size_t epochs = 0;
    std::size_t batch_size = 0;
    double lr = 1e-4;
    double penalty = 100.0;
    std::vector<std::size_t> hidden{200, 200, 200};
    CombinationMode mode = CombinationMode::Full;
    double p_norm = 2.0;
    double feas_tol = 1e-9;
    double rank_tol = kDefaultRankTol;
    std::size_t log_every = 1;
    // solver
    std::uint64_t instance_seed = 0;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
    // unicycle
    std::size_t starts = 20;
    std::size_t horizon = 150;
    bool rollout_grad_constraints = true;
    bool rollout_grad_nominal = true;

    TrainConfig train_config(LayerMode method, std::uint64_t seed) const {
        TrainConfig t;
        t.epochs = epochs;
        t.batch_size = batch_size;
        t.seed = seed;
        t.penalty = penalty;
        t.layer_mode = method;
        t.layer.p = p_norm;
        t.layer.feas_tol = feas_tol;
        t.layer.rank_tol = rank_tol;
        t.layer.mode = mode;
        t.adam.lr = lr;
        t.hidden = hidden;
        t.log_every = log_every;
        return t;
    }
};

inline const std::vector<std::string>& scenario_names() {
    static const std::vector<std::string> names{"piecewise", "solver", "unicycle"};
    return names;
}

/// Desk-scale defaults for a scenario.
inline RunConfig default_run_config(const std::string& scenario) {
    RunConfig c;
    c.scenario = scenario;
    if (scenario == "piecewise") {
        c.epochs = 10000;
        c.batch_size = 50;
        c.log_every = 10;
    } else if (scenario == "solver") {
        c.epochs = 2000;
        c.batch_size = 200;
        c.n_train = 200;
        c.n_test = 200;
        c.mode = CombinationMode::Lite;
        c.log_every = 10;
    } else if (scenario == "unicycle") {
        c.epochs = 200;
        c.batch_size = 20;
        c.lr = 3e-3;
    } else {
        throw ConfigError("unknown scenario '" + scenario + "' (expected piecewise, solver or unicycle)");
    }
    return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
    std::vector<std::string> methods;
    for (LayerMode m : c.methods) methods.emplace_back(to_string(m));
    return {{"scenario", c.scenario},
            {"seeds", c.seeds},
            {"methods", methods},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"lr", c.lr},
            {"penalty", c.penalty},
            {"hidden", c.hidden},
            {"mode", to_string(c.mode)},
            {"p_norm", c.p_norm},
            {"feas_tol", c.feas_tol},
            {"rank_tol", c.rank_tol},
            {"log_every", c.log_every},
            {"instance_seed", c.instance_seed},
            {"n_train", c.n_train},
            {"n_test", c.n_test},
            {"starts", c.starts},
            {"horizon", c.horizon},
            {"rollout_grad", c.rollout_grad_constraints || c.rollout_grad_nominal ? "full" : "stop"}};
}

/// Applies the keys present in `doc` on top of `c`. Unknown keys are errors.
inline void apply_json(RunConfig& c, const nlohmann::json& doc) {
    if (!doc.is_object()) throw ConfigError("config: expected a JSON object");
    try {
        for (const auto& [key, v] : doc.items()) {
            if (key == "scenario") {
                if (v.get<std::string>() != c.scenario) throw ConfigError("config: scenario mismatch");
            } else if (key == "seeds") {
                if (v.is_number()) {
                    c.seeds.clear();
                    for (std::uint64_t s = 0; s < v.get<std::uint64_t>(); ++s) c.seeds.push_back(s);
                } else {
                    c.seeds = v.get<std::vector<std::uint64_t>>();
                }
            } else if (key == "methods") {
                c.methods.clear();
                for (const auto& m : v) c.methods.push_back(layer_mode_from_string(m.get<std::string>()));
            } else if (key == "epochs") c.epochs = v.get<std::size_t>();
            else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
            else if (key == "lr") c.lr = v.get<double>();
            else if (key == "penalty") c.penalty = v.get<double>();
            else if (key == "hidden") c.hidden = v.get<std::vector<std::size_t>>();
            else if (key == "mode") c.mode = combination_mode_from_string(v.get<std::string>());
            else if (key == "p_norm") c.p_norm = v.get<double>();
            else if (key == "feas_tol") c.feas_tol = v.get<double>();
            else if (key == "rank_tol") c.rank_tol = v.get<double>();
            else if (key == "log_every") c.log_every = v.get<std::size_t>();
            else if (key == "instance_seed") c.instance_seed = v.get<std::uint64_t>();
            else if (key == "n_train") c.n_train = v.get<std::size_t>();
            else if (key == "n_test") c.n_test = v.get<std::size_t>();
            else if (key == "starts") c.starts = v.get<std::size_t>();
            else if (key == "horizon") c.horizon = v.get<std::size_t>();
            else if (key == "rollout_grad") {
                const auto s = v.get<std::string>();
                if (s != "full" && s != "stop") throw ConfigError("config: rollout_grad must be full or stop");
                c.rollout_grad_constraints = c.rollout_grad_nominal = s == "full";
            } else {
                throw ConfigError("config: unknown key '" + key + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

inline void validate(const RunConfig& c) {
    if (c.seeds.empty()) throw ConfigError("at least one seed is required");
    if (c.methods.empty()) throw ConfigError("at least one method is required");
    if (c.hidden.empty()) throw ConfigError("at least one hidden layer is required");
    if (c.scenario == "solver" && (c.n_train == 0 || c.n_test == 0)) throw ConfigError("solver: sample counts must be positive");
    if (c.scenario == "unicycle" && (c.starts == 0 || c.horizon == 0)) throw ConfigError("unicycle: starts and horizon must be positive");
    c.train_config(c.methods.front(), 0).validate();
}

/// A named CSV produced by a run besides the trace (function grid, trajectory...).
struct Artifact {
    std::string name;    ///< file stem
    std::string figure;  ///< what it is plotted as
    report::Csv csv;
};

struct RunOutcome {
    LayerMode method = LayerMode::CAffNet;
    std::uint64_t seed = 0;
    TrainResult result;
    Metrics metrics;
    std::vector<Artifact> artifacts;
};

namespace detail {

inline std::vector<Artifact> piecewise_artifacts(const experiments::PiecewiseScenario& sc, const Model& model,
                                                 const CAffineLayer& layer, LayerMode mode) {
    const Matrix y = sc.predict_test(model, layer, mode);
    report::Csv csv({"x", "target", "prediction", "upper1", "upper2", "lower1", "lower2"});
    const auto& d = sc.data();
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
        const double x = d.test_x(0, j);
        const auto g = experiments::piecewise_bound_values(x);
        csv.row({report::fmt(x), report::fmt(d.test_y(j)), report::fmt(y(0, j)), report::fmt(g.upper1),
                 report::fmt(g.upper2), report::fmt(g.lower1), report::fmt(g.lower2)});
    }
    return {{"function", "learned-function", std::move(csv)}};
}

inline std::vector<Artifact> unicycle_artifacts(const experiments::UnicycleScenario& sc,
                                                const experiments::Rollout& r) {
    const auto m = static_cast<Eigen::Index>(sc.spec().m());
    std::vector<std::string> header{"t", "p_x", "p_y", "theta", "v", "omega"};
    for (Eigen::Index i = 0; i < m; ++i) header.push_back("r" + std::to_string(i + 1));
    report::Csv traj(header);
    report::Csv controls({"t", "v_nom", "omega_nom", "v_net", "omega_net", "v", "omega"});
    for (std::size_t k = 0; k < r.x.size(); ++k) {
        const double t = static_cast<double>(k) * sc.spec().dt;
        const bool has_u = k < r.u.size();
        std::vector<std::string> row{report::fmt(t), report::fmt(r.x[k](0)), report::fmt(r.x[k](1)),
                                     report::fmt(r.x[k](2)), has_u ? report::fmt(r.u[k](0)) : "",
                                     has_u ? report::fmt(r.u[k](1)) : ""};
        for (Eigen::Index i = 0; i < m; ++i)
            row.push_back(has_u ? report::fmt(r.residuals(static_cast<Eigen::Index>(k), i)) : "");
        traj.row(row);
        if (has_u) {
            controls.row({report::fmt(t), report::fmt(r.u_nom[k](0)), report::fmt(r.u_nom[k](1)),
                          report::fmt(r.u_net[k](0)), report::fmt(r.u_net[k](1)), report::fmt(r.u[k](0)),
                          report::fmt(r.u[k](1))});
        }
    }
    return {{"trajectory", "trajectory", std::move(traj)}, {"controls", "controls", std::move(controls)}};
}

}  // namespace detail

/// Trains and evaluates one method for one seed.
inline RunOutcome run_one(const RunConfig& cfg, LayerMode method, std::uint64_t seed) {
    const TrainConfig tc = cfg.train_config(method, seed);
    RunOutcome out;
    out.method = method;
    out.seed = seed;
    if (cfg.scenario == "piecewise") {
        const experiments::PiecewiseScenario sc(seed);
        out.result = train(Model::make(1, 1, cfg.hidden, seed), sc, tc);
        const CAffineLayer layer(sc.provider(), tc.layer);
        out.metrics = sc.evaluate(out.result.model, layer, tc);
        out.artifacts = detail::piecewise_artifacts(sc, out.result.model, layer, method);
    } else if (cfg.scenario == "solver") {
        const experiments::SolverScenario sc(experiments::solver_instance(cfg.instance_seed, cfg.n_train, cfg.n_test));
        out.result = train(Model::make(3, 5, cfg.hidden, seed), sc, tc);
        const CAffineLayer layer(sc.provider(), tc.layer);
        out.metrics = sc.evaluate(out.result.model, layer, tc);
    } else if (cfg.scenario == "unicycle") {
        auto spec = experiments::default_unicycle_spec();
        spec.horizon = cfg.horizon;
        const experiments::UnicycleScenario sc(seed, cfg.starts, spec,
                                               {cfg.rollout_grad_constraints, cfg.rollout_grad_nominal});
        out.result = train(Model::make(3, 2, cfg.hidden, seed), sc, tc);
        const CAffineLayer layer(sc.provider(), tc.layer);
        const auto rollout = sc.test_rollout(out.result.model, layer, method);
        out.metrics = sc.metrics_for(rollout);
        out.artifacts = detail::unicycle_artifacts(sc, rollout);
    } else {
        throw ConfigError("unknown scenario '" + cfg.scenario + "'");
    }
    return out;
}

}  // namespace caffnet
