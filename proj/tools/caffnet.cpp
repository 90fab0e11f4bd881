// caffnet command-line tool: train scenarios, run property suites, export
// plot-ready bundles and inspect single systems.
//
// Exit codes: 0 success, 1 property failure or unexpected error, 2 usage or
// configuration error, 3 training divergence, 4 empty candidate set.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include "caffnet/errors.hpp"
#include "caffnet/layer.hpp"
#include "caffnet/report.hpp"
#include "caffnet/run.hpp"
#include "caffnet/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace caffnet;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitEmpty = 4;

/// Git blob-style SHA-1: sha1("blob <size>\0" + content), hex.
std::string content_hash(const std::string& content) {
    const std::string blob = "blob " + std::to_string(content.size()) + '\0' + content;
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(blob.data(), blob.size(), md, &len, EVP_sha1(), nullptr) != 1) {
        throw std::runtime_error("sha1 failed");
    }
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return os.str();
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << text;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    try {
        if (s.find(',') == std::string::npos) {
            const auto n = std::stoull(s);
            for (std::uint64_t i = 0; i < n; ++i) out.push_back(i);
        } else {
            std::stringstream ss(s);
            std::string item;
            while (std::getline(ss, item, ',')) out.push_back(std::stoull(item));
        }
    } catch (const std::exception&) {
        throw ConfigError("--seeds expects a count or a comma-separated seed list, got '" + s + "'");
    }
    return out;
}

LayerMode ablation_mode(const std::string& s) {
    if (s == "none" || s == "caffnet") return LayerMode::CAffNet;
    if (s == "soft") return LayerMode::Soft;
    if (s == "post-hoc" || s == "posthoc") return LayerMode::PostHoc;
    throw ConfigError("--ablation expects none, soft or post-hoc, got '" + s + "'");
}

std::size_t worker_count(std::size_t jobs) {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("CAFFNET_THREADS")) {
        try {
            n = std::max<std::size_t>(1, std::stoul(env));
        } catch (const std::exception&) {
            throw ConfigError("CAFFNET_THREADS must be a positive integer");
        }
    }
    return std::min(n, jobs);
}

struct TrainArgs {
    std::string scenario, config, out, seeds, mode, rollout_grad;
    std::vector<std::string> ablation;
    std::vector<std::size_t> hidden;
    std::size_t epochs = 0, batch_size = 0, log_every = 0, starts = 0, horizon = 0, n_train = 0, n_test = 0;
    std::uint64_t instance_seed = 0;
    double p_norm = 0, feas_tol = 0, lr = 0, penalty = 0;
};

int cmd_train(const TrainArgs& a, const CLI::App& sub) {
    const auto given = [&](const char* name) { return sub.get_option(name)->count() > 0; };
    const std::string& scenario = a.scenario;
    if (scenario.empty()) throw ConfigError("train: no scenario given");
    RunConfig cfg = default_run_config(scenario);
    if (!a.config.empty()) apply_json(cfg, read_json(a.config));
    if (given("--seeds")) cfg.seeds = parse_seeds(a.seeds);
    if (given("--ablation")) {
        cfg.methods.clear();
        for (const auto& s : a.ablation) cfg.methods.push_back(ablation_mode(s));
    }
    if (given("--epochs")) cfg.epochs = a.epochs;
    if (given("--batch-size")) cfg.batch_size = a.batch_size;
    if (given("--mode")) cfg.mode = combination_mode_from_string(a.mode);
    if (given("--p-norm")) cfg.p_norm = a.p_norm;
    if (given("--feas-tol")) cfg.feas_tol = a.feas_tol;
    if (given("--lr")) cfg.lr = a.lr;
    if (given("--penalty")) cfg.penalty = a.penalty;
    if (given("--hidden")) cfg.hidden = a.hidden;
    if (given("--log-every")) cfg.log_every = a.log_every;
    if (given("--instance-seed")) cfg.instance_seed = a.instance_seed;
    if (given("--train-samples")) cfg.n_train = a.n_train;
    if (given("--test-samples")) cfg.n_test = a.n_test;
    if (given("--starts")) cfg.starts = a.starts;
    if (given("--horizon")) cfg.horizon = a.horizon;
    if (given("--rollout-grad")) {
        if (a.rollout_grad != "full" && a.rollout_grad != "stop") throw ConfigError("--rollout-grad expects full or stop");
        cfg.rollout_grad_constraints = cfg.rollout_grad_nominal = a.rollout_grad == "full";
    }
    validate(cfg);

    const json resolved = to_json(cfg);
    const std::string hash = content_hash(json{{"command", "train"}, {"config", resolved}}.dump());
    const fs::path out = a.out.empty() ? fs::path("runs") / scenario : fs::path(a.out);

    struct Job {
        LayerMode method;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (LayerMode m : cfg.methods)
        for (std::uint64_t s : cfg.seeds) jobs.push_back({m, s});
    std::vector<RunOutcome> results(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto worker = [&] {
        for (std::size_t i; (i = next++) < jobs.size();) {
            try {
                results[i] = run_one(cfg, jobs[i].method, jobs[i].seed);
                std::lock_guard lock(log_mutex);
                std::cerr << scenario << " " << to_string(jobs[i].method) << " seed " << jobs[i].seed << ": done ("
                          << report::fixed(results[i].result.train_ms_per_epoch, 2) << " ms/epoch)\n";
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    const std::size_t workers = worker_count(jobs.size());
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    // Everything below is merged in job order, so outputs do not depend on scheduling.
    json files = json::array();
    json timings = json::object();
    std::map<std::string, std::vector<report::SeedMetrics>> by_method;
    std::vector<report::SeedMetrics> all_rows;
    auto save = [&](const report::Csv& csv, const fs::path& rel, const std::string& figure, const std::string& method,
                    const json& seed) {
        csv.save(out / rel);
        files.push_back({{"file", rel.generic_string()}, {"figure", figure}, {"method", method}, {"seed", seed}});
    };
    for (const RunOutcome& r : results) {
        const std::string method = to_string(r.method);
        const fs::path dir = fs::path(method) / ("seed" + std::to_string(r.seed));
        save(report::trace_csv(r.result.trace, hash), dir / "trace.csv", "loss", method, r.seed);
        for (const auto& art : r.artifacts) {
            report::Csv csv = art.csv;
            csv.set_manifest(hash);
            save(csv, dir / (art.name + ".csv"), art.figure, method, r.seed);
        }
        const json ckpt = {{"format", "caffnet-model"},
                           {"version", kCheckpointVersion},
                           {"manifest", hash},
                           {"f_theta", to_json(r.result.model.f)},
                           {"w_phi", to_json(r.result.model.w)}};
        write_text(out / dir / "checkpoint.json", ckpt.dump() + "\n");
        files.push_back({{"file", (dir / "checkpoint.json").generic_string()}, {"figure", nullptr}, {"method", method}, {"seed", r.seed}});
        by_method[method].push_back({r.seed, r.metrics});
        timings[method + "/seed" + std::to_string(r.seed)] = r.result.train_ms_per_epoch;
    }
    std::vector<std::string> header{"method", "seed"};
    for (const auto& [k, v] : results.front().metrics) header.push_back(k);
    report::Csv metrics_csv(header, hash);
    for (const RunOutcome& r : results) {
        std::vector<std::string> row{to_string(r.method), std::to_string(r.seed)};
        for (const auto& [k, v] : r.metrics) row.push_back(report::fmt(v));
        metrics_csv.row(row);
    }
    save(metrics_csv, "metrics.csv", "table", "all", nullptr);
    save(report::summary_csv(by_method, hash), "summary.csv", "table", "all", nullptr);
    const report::Csv table = report::table_csv(by_method, hash);
    save(table, "table.csv", "table", "all", nullptr);

    const json manifest = {{"hash", hash},
                           {"command", "train"},
                           {"config_path", a.config.empty() ? json(nullptr) : json(a.config)},
                           {"config", resolved},
                           {"seeds", cfg.seeds},
                           {"output_dir", out.generic_string()},
                           {"files", files},
                           {"train_ms_per_epoch", timings}};
    write_text(out / "manifest.json", manifest.dump(2) + "\n");
    std::cout << table.str();
    std::cout << "wrote " << out.generic_string() << " (manifest " << hash << ")\n";
    return 0;
}

int cmd_verify(const std::string& suite, std::size_t cases, std::uint64_t seed, const std::string& out) {
    verify::SuiteResult res;
    if (suite == "feasibility") {
        res = verify::feasibility(cases, seed);
        const verify::SuiteResult ex = verify::existence(cases, seed);
        std::cout << "existence: " << ex.checked - ex.failures << "/" << ex.checked << " cases with a feasible candidate\n";
        if (!ex.passed() && res.passed()) res = ex;
    } else if (suite == "projection-oracle") {
        res = verify::projection_oracle(cases, seed);
    } else if (suite == "gradients") {
        res = verify::gradients(cases, seed);
    } else if (suite == "pinv") {
        res = verify::pinv_identities(cases, seed);
    } else if (suite == "combinatorics") {
        res = verify::combinatorics();
    } else {
        throw ConfigError("unknown suite '" + suite + "' (feasibility, projection-oracle, gradients, pinv, combinatorics)");
    }
    std::cout << res.name << ": " << (res.passed() ? "pass" : "FAIL") << " — " << res.checked - res.failures << "/"
              << res.checked << " passed (" << res.cases << " generated), worst error " << res.worst << "\n";
    if (res.passed()) return 0;
    const fs::path path = fs::path(out) / ("counterexample-" + res.name + ".json");
    write_text(path, json{{"suite", res.name}, {"seed", seed}, {"case", res.counterexample}}.dump(2) + "\n");
    std::cout << "counterexample fixture: " << path.generic_string() << "\n";
    return kExitFailure;
}

int cmd_export(const std::string& run_dir, const std::string& out_arg) {
    const fs::path run(run_dir);
    if (!fs::exists(run / "manifest.json")) throw ConfigError("export: no manifest.json in " + run.string());
    const json manifest = read_json(run / "manifest.json");
    const fs::path out = out_arg.empty() ? run / "export" : fs::path(out_arg);
    fs::create_directories(out);
    json entries = json::array();
    for (const auto& f : manifest.at("files")) {
        if (f.at("figure").is_null()) continue;
        const fs::path src = run / f.at("file").get<std::string>();
        std::string name = f.at("figure").get<std::string>();
        if (f.at("seed").is_null()) {
            name += "__" + src.stem().string();
        } else {
            name += "__" + f.at("method").get<std::string>() + "__seed" + std::to_string(f.at("seed").get<std::uint64_t>());
        }
        name += ".csv";
        fs::copy_file(src, out / name, fs::copy_options::overwrite_existing);
        entries.push_back({{"file", name}, {"figure", f.at("figure")}, {"method", f.at("method")},
                           {"seed", f.at("seed")}, {"source", f.at("file")}});
    }
    const json index = {{"manifest", manifest.at("hash")},
                        {"scenario", manifest.at("config").at("scenario")},
                        {"figures",
                         {{"learned-function", "learned function against target and bounds (piecewise)"},
                          {"loss", "training loss and violation per logged epoch"},
                          {"trajectory", "closed-loop states and constraint residuals (unicycle)"},
                          {"controls", "nominal, corrective and applied commands (unicycle)"},
                          {"table", "per-seed metrics and seed aggregates"}}},
                        {"files", entries}};
    write_text(out / "index.json", index.dump(2) + "\n");
    std::cout << "exported " << entries.size() << " files to " << out.generic_string() << "\n";
    return 0;
}

Vector parse_vector(const std::vector<double>& v) { return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())); }

int cmd_inspect(const std::string& system_path, const std::vector<double>& f, const std::vector<double>& w,
                double p_norm, double feas_tol, const std::string& mode) {
    const json doc = read_json(system_path);
    ConstraintSystem sys = [&] {
        try {
            return constraint_system_from_json(doc.contains("system") ? doc.at("system") : doc);
        } catch (const ArgumentError& e) {
            throw ConfigError(e.what());
        }
    }();
    LayerConfig cfg;
    cfg.p = p_norm;
    cfg.feas_tol = feas_tol;
    cfg.mode = combination_mode_from_string(mode);
    cfg.validate();
    const Vector fv = parse_vector(f);
    const Vector wv = w.empty() ? Vector(Vector::Zero(fv.size())) : parse_vector(w);
    const CombinationSet combos(sys.m(), sys.n_out(), cfg.mode);
    const auto all = candidates(sys, combos, fv, wv, cfg);
    const SelectionRecord rec = forward(sys, combos, fv, wv, cfg);
    std::cout << selection_json(rec, all).dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CAffNet: closed-form affine-constraint output layer"};
    app.require_subcommand(1);

    TrainArgs ta;
    CLI::App* train = app.add_subcommand("train", "Train a scenario and write traces, metrics, checkpoints and a manifest");
    train->add_option("scenario,--scenario", ta.scenario, "piecewise | solver | unicycle");
    train->add_option("--config", ta.config, "JSON config file (flags override it)");
    train->add_option("--seeds", ta.seeds, "Seed count N (seeds 0..N-1) or comma-separated list");
    train->add_option("--epochs", ta.epochs);
    train->add_option("--batch-size", ta.batch_size);
    train->add_option("--mode", ta.mode, "Combination family: full | lite");
    train->add_option("--p-norm", ta.p_norm);
    train->add_option("--feas-tol", ta.feas_tol);
    train->add_option("--lr", ta.lr);
    train->add_option("--penalty", ta.penalty, "Soft-constraint weight");
    train->add_option("--hidden", ta.hidden, "Hidden widths, comma-separated")->delimiter(',');
    train->add_option("--log-every", ta.log_every, "Trace every N-th epoch");
    train->add_option("--ablation", ta.ablation, "none | soft | post-hoc (comma-separated for several)")->delimiter(',');
    train->add_option("--instance-seed", ta.instance_seed, "Solver problem instance");
    train->add_option("--train-samples", ta.n_train);
    train->add_option("--test-samples", ta.n_test);
    train->add_option("--starts", ta.starts, "Unicycle training initial states");
    train->add_option("--horizon", ta.horizon, "Unicycle rollout steps");
    train->add_option("--rollout-grad", ta.rollout_grad, "Unicycle rollout gradient: full | stop");
    train->add_option("--out", ta.out, "Output directory (default runs/<scenario>)");

    std::string suite, verify_out = "verify-fixtures";
    std::size_t cases = 1000;
    std::uint64_t verify_seed = 0;
    CLI::App* ver = app.add_subcommand("verify", "Run a property suite");
    ver->add_option("suite", suite, "feasibility | projection-oracle | gradients | pinv | combinatorics")->required();
    ver->add_option("--cases", cases);
    ver->add_option("--seed", verify_seed);
    ver->add_option("--out", verify_out, "Where counterexample fixtures are written");

    std::string run_dir, export_out;
    CLI::App* exp = app.add_subcommand("export", "Collect a run into a plot-ready CSV bundle with a JSON index");
    exp->add_option("run_dir", run_dir)->required();
    exp->add_option("--out", export_out, "Bundle directory (default <run_dir>/export)");

    std::string system_path, inspect_mode = "full";
    std::vector<double> f_vals, w_vals;
    double inspect_p = 2.0, inspect_tol = 1e-9;
    CLI::App* ins = app.add_subcommand("inspect", "Dump every projection candidate for one system as JSON");
    ins->add_option("--system", system_path, "JSON {\"A\": [[...]], \"b\": [...]}")->required();
    ins->add_option("--f", f_vals, "f_theta, comma-separated")->delimiter(',')->required();
    ins->add_option("--w", w_vals, "w_phi, comma-separated (default 0)")->delimiter(',');
    ins->add_option("--p-norm", inspect_p);
    ins->add_option("--feas-tol", inspect_tol);
    ins->add_option("--mode", inspect_mode);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        if (*train) return cmd_train(ta, *train);
        if (*ver) return cmd_verify(suite, cases, verify_seed, verify_out);
        if (*exp) return cmd_export(run_dir, export_out);
        if (*ins) return cmd_inspect(system_path, f_vals, w_vals, inspect_p, inspect_tol, inspect_mode);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const EmptyCandidateSet& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitEmpty;
    } catch (const ArgumentError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitFailure;
}
