#pragma once

// CSV artifacts: loss traces, per-seed metrics, seed aggregates and
// table-shaped summaries, trajectories. Comma separated, '.' decimal, header
// row, LF line endings. Every file may start with a "# manifest <hash>" line.

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "caffnet/errors.hpp"
#include "caffnet/train.hpp"

namespace caffnet::report {

/// Shortest decimal form that reads back to the same double.
inline std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (v == 0.0) return "0";  // folds -0
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::string fixed(double v, int digits) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(digits);
    os << (v == 0.0 ? 0.0 : v);
    return os.str();
}

class Csv {
public:
    explicit Csv(std::vector<std::string> header, std::string manifest_hash = {})
        : header_(std::move(header)), hash_(std::move(manifest_hash)) {}

    void set_manifest(std::string hash) { hash_ = std::move(hash); }

    void row(const std::vector<std::string>& cells) {
        if (cells.size() != header_.size()) throw ArgumentError("csv: row width does not match header");
        rows_.push_back(cells);
    }

    void write(std::ostream& os) const {
        if (!hash_.empty()) os << "# manifest " << hash_ << '\n';
        line(os, header_);
        for (const auto& r : rows_) line(os, r);
    }

    std::string str() const {
        std::ostringstream os;
        write(os);
        return os.str();
    }

    void save(const std::filesystem::path& path) const {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        std::ofstream out(path, std::ios::binary);
        if (!out) throw ConfigError("cannot write " + path.string());
        write(out);
    }

private:
    static void line(std::ostream& os, const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) os << ',';
            os << cells[i];
        }
        os << '\n';
    }

    std::vector<std::string> header_;
    std::string hash_;
    std::vector<std::vector<std::string>> rows_;
};

inline Csv trace_csv(const std::vector<TraceRow>& trace, const std::string& hash = {}) {
    Csv csv({"epoch", "loss", "max_violation", "mean_violation"}, hash);
    for (const auto& t : trace) csv.row({std::to_string(t.epoch), fmt(t.loss), fmt(t.max_violation), fmt(t.mean_violation)});
    return csv;
}

struct SeedMetrics {
    std::uint64_t seed = 0;
    Metrics metrics;
};

/// One row per seed; the columns follow the first row's metric order.
inline Csv metrics_csv(const std::string& method, const std::vector<SeedMetrics>& runs, const std::string& hash = {}) {
    if (runs.empty()) throw ArgumentError("metrics_csv: no runs");
    std::vector<std::string> header{"method", "seed"};
    for (const auto& [k, v] : runs.front().metrics) header.push_back(k);
    Csv csv(header, hash);
    for (const auto& r : runs) {
        std::vector<std::string> cells{method, std::to_string(r.seed)};
        for (const auto& [k, v] : runs.front().metrics) cells.push_back(fmt(metric(r.metrics, k)));
        csv.row(cells);
    }
    return csv;
}

struct Aggregate {
    std::string name;
    double mean = 0.0;
    double std = 0.0;  ///< sample standard deviation; 0 for a single run
    std::size_t n = 0;
};

/// Mean and standard deviation of every metric over the runs, in run order.
inline std::vector<Aggregate> aggregate(const std::vector<SeedMetrics>& runs) {
    std::vector<Aggregate> out;
    if (runs.empty()) return out;
    for (const auto& [name, unused] : runs.front().metrics) {
        Aggregate a{name, 0.0, 0.0, runs.size()};
        for (const auto& r : runs) a.mean += metric(r.metrics, name);
        a.mean /= static_cast<double>(runs.size());
        if (runs.size() > 1) {
            double ss = 0.0;
            for (const auto& r : runs) ss += std::pow(metric(r.metrics, name) - a.mean, 2);
            a.std = std::sqrt(ss / static_cast<double>(runs.size() - 1));
        }
        out.push_back(a);
    }
    return out;
}

/// Long-form aggregate: method,metric,mean,std,n.
inline Csv summary_csv(const std::map<std::string, std::vector<SeedMetrics>>& by_method, const std::string& hash = {}) {
    Csv csv({"method", "metric", "mean", "std", "n"}, hash);
    for (const auto& [method, runs] : by_method)
        for (const auto& a : aggregate(runs)) csv.row({method, a.name, fmt(a.mean), fmt(a.std), std::to_string(a.n)});
    return csv;
}

/// One row per method, one column per metric, cells "mean (std)" with four
/// decimals; percentages (columns ending in _pct) with two.
inline Csv table_csv(const std::map<std::string, std::vector<SeedMetrics>>& by_method, const std::string& hash = {}) {
    if (by_method.empty()) throw ArgumentError("table_csv: no methods");
    std::vector<std::string> header{"method"};
    for (const auto& a : aggregate(by_method.begin()->second)) header.push_back(a.name);
    Csv csv(header, hash);
    for (const auto& [method, runs] : by_method) {
        std::vector<std::string> cells{method};
        for (const auto& a : aggregate(runs)) {
            const int digits = a.name.size() > 4 && a.name.ends_with("_pct") ? 2 : 4;
            cells.push_back(fixed(a.mean, digits) + " (" + fixed(a.std, digits) + ")");
        }
        csv.row(cells);
    }
    return csv;
}

}  // namespace caffnet::report
