#include <gtest/gtest.h>

#include "caffnet/report.hpp"
#include "caffnet/run.hpp"

using namespace caffnet;
using namespace caffnet::report;

TEST(Fmt, ShortestRoundTrip) {
    EXPECT_EQ(fmt(0.1), "0.1");
    EXPECT_EQ(fmt(-0.0), "0");
    EXPECT_EQ(fmt(1e-12), "1e-12");
    EXPECT_EQ(fmt(2.0), "2");
    EXPECT_EQ(fmt(std::numeric_limits<double>::quiet_NaN()), "nan");
    const double v = 0.1 + 0.2;
    EXPECT_EQ(std::stod(fmt(v)), v);
    EXPECT_EQ(fixed(-0.0, 4), "0.0000");
    EXPECT_EQ(fixed(0.123456, 2), "0.12");
}

TEST(Csv, ManifestLineHeaderAndLf) {
    Csv csv({"a", "b"}, "abc123");
    csv.row({"1", "2"});
    EXPECT_EQ(csv.str(), "# manifest abc123\na,b\n1,2\n");
    EXPECT_THROW(csv.row({"1"}), ArgumentError);
    Csv bare({"x"});
    EXPECT_EQ(bare.str(), "x\n");
    bare.set_manifest("h");
    EXPECT_EQ(bare.str(), "# manifest h\nx\n");
}

TEST(Csv, TraceColumns) {
    const Csv csv = trace_csv({{1, 0.5, 0.0, 0.0}, {10, 0.25, 1e-3, 2e-4}});
    EXPECT_EQ(csv.str(), "epoch,loss,max_violation,mean_violation\n1,0.5,0,0\n10,0.25,0.001,2e-04\n");
}

TEST(Aggregate, MeanAndSampleStd) {
    const std::vector<SeedMetrics> runs{{0, {{"mse", 1.0}, {"viol_pct", 0.0}}},
                                        {1, {{"mse", 3.0}, {"viol_pct", 50.0}}}};
    const auto agg = aggregate(runs);
    ASSERT_EQ(agg.size(), 2u);
    EXPECT_EQ(agg[0].name, "mse");
    EXPECT_DOUBLE_EQ(agg[0].mean, 2.0);
    EXPECT_DOUBLE_EQ(agg[0].std, std::sqrt(2.0));
    EXPECT_EQ(agg[1].n, 2u);

    const std::map<std::string, std::vector<SeedMetrics>> by{{"caffnet", runs}};
    EXPECT_EQ(table_csv(by).str(), "method,mse,viol_pct\ncaffnet,2.0000 (1.4142),25.00 (35.36)\n");
    EXPECT_EQ(metrics_csv("caffnet", runs).str(), "method,seed,mse,viol_pct\ncaffnet,0,1,0\ncaffnet,1,3,50\n");
    EXPECT_EQ(summary_csv(by).str().substr(0, 26), "method,metric,mean,std,n\nc");
    EXPECT_EQ(aggregate({{0, {{"a", 4.0}}}})[0].std, 0.0);
}

TEST(RunConfig, DefaultsPerScenario) {
    EXPECT_EQ(default_run_config("piecewise").epochs, 10000u);
    const RunConfig s = default_run_config("solver");
    EXPECT_EQ(s.epochs, 2000u);
    EXPECT_EQ(s.n_train, 200u);
    EXPECT_EQ(s.mode, CombinationMode::Lite);
    const RunConfig u = default_run_config("unicycle");
    EXPECT_EQ(u.epochs, 200u);
    EXPECT_EQ(u.starts, 20u);
    EXPECT_EQ(u.horizon, 150u);
    EXPECT_THROW(default_run_config("robot"), ConfigError);
}

TEST(RunConfig, JsonOverridesAndRejectsUnknownKeys) {
    RunConfig c = default_run_config("piecewise");
    apply_json(c, nlohmann::json::parse(R"({"seeds": 2, "epochs": 7, "methods": ["soft", "caffnet"], "mode": "lite"})"));
    EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{0, 1}));
    EXPECT_EQ(c.epochs, 7u);
    EXPECT_EQ(c.methods, (std::vector<LayerMode>{LayerMode::Soft, LayerMode::CAffNet}));
    EXPECT_EQ(c.mode, CombinationMode::Lite);
    apply_json(c, nlohmann::json::parse(R"({"seeds": [4, 9]})"));
    EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{4, 9}));
    EXPECT_THROW(apply_json(c, nlohmann::json::parse(R"({"epochz": 3})")), ConfigError);
    EXPECT_THROW(apply_json(c, nlohmann::json::parse(R"({"epochs": "many"})")), ConfigError);
    EXPECT_THROW(apply_json(c, nlohmann::json::parse(R"({"scenario": "solver"})")), ConfigError);
    EXPECT_THROW(apply_json(c, nlohmann::json::parse("[1]")), ConfigError);

    RunConfig back = default_run_config("piecewise");
    apply_json(back, to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
}

TEST(RunConfig, Validation) {
    RunConfig c = default_run_config("piecewise");
    c.seeds.clear();
    EXPECT_THROW(validate(c), ConfigError);
    c = default_run_config("piecewise");
    c.p_norm = 0.5;
    EXPECT_THROW(validate(c), ConfigError);
    c = default_run_config("unicycle");
    c.horizon = 0;
    EXPECT_THROW(validate(c), ConfigError);
}

TEST(RunOne, PiecewiseArtifactsAndMetrics) {
    RunConfig c = default_run_config("piecewise");
    c.epochs = 3;
    c.hidden = {8};
    const RunOutcome r = run_one(c, LayerMode::CAffNet, 0);
    EXPECT_EQ(r.metrics.size(), 3u);
    ASSERT_EQ(r.artifacts.size(), 1u);
    EXPECT_EQ(r.artifacts[0].figure, "learned-function");
    const std::string csv = r.artifacts[0].csv.str();
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "x,target,prediction,upper1,upper2,lower1,lower2");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 401);
}
