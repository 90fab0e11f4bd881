#include <algorithm>
#include <set>

#include <gtest/gtest.h>

#include "caffnet/constraints.hpp"
#include "caffnet/rng.hpp"

using namespace caffnet;

namespace {

ConstraintSystem three_by_two() {
    Matrix a(3, 2);
    a << 1, 0, 0, 1, 1, 1;
    return ConstraintSystem(a, (Vector(3) << 1, 2, 3).finished());
}

IndexCombination combo(std::initializer_list<std::size_t> idx) { return IndexCombination{idx}; }

}  // namespace

TEST(ConstraintSystem, ShapeChecks) {
    EXPECT_THROW(ConstraintSystem(Matrix::Zero(2, 2), Vector::Zero(3)), ArgumentError);
    Matrix a = Matrix::Identity(2, 2);
    a(1, 1) = std::numeric_limits<double>::infinity();
    EXPECT_THROW(ConstraintSystem(a, Vector::Zero(2)), NumericError);
}

TEST(Combinations, SingletonsWhenOneOutput) {
    const CombinationSet s = enumerate_combinations(4, 1, CombinationMode::Full);
    ASSERT_EQ(s.combos().size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(s.combos()[i], combo({i + 1}));
    EXPECT_EQ(enumerate_combinations(4, 1, CombinationMode::Lite).combos(), s.combos());
}

TEST(Combinations, FullAndLiteCounts) {
    EXPECT_EQ(enumerate_combinations(11, 5, CombinationMode::Full).combos().size(), 1023u);
    EXPECT_EQ(enumerate_combinations(11, 5, CombinationMode::Lite).combos().size(), 473u);
    EXPECT_EQ(CombinationSet::count(11, 5, CombinationMode::Full), 1023u);
    EXPECT_EQ(CombinationSet::count(11, 5, CombinationMode::Lite), 473u);
}

TEST(Combinations, RejectsZeroSizes) {
    EXPECT_THROW(enumerate_combinations(0, 2, CombinationMode::Full), ArgumentError);
    EXPECT_THROW(enumerate_combinations(3, 0, CombinationMode::Full), ArgumentError);
}

TEST(Combinations, FullFamilyPropertiesUpTo16) {
    for (std::size_t m = 1; m <= 16; ++m) {
        for (std::size_t n = 1; n <= 8; ++n) {
            const CombinationSet full(m, n, CombinationMode::Full);
            const CombinationSet lite(m, n, CombinationMode::Lite);
            const auto& fc = full.combos();
            ASSERT_EQ(fc.size(), CombinationSet::count(m, n, CombinationMode::Full));
            EXPECT_LE(fc.size(), (std::uint64_t{1} << m) - 1);
            EXPECT_TRUE(std::is_sorted(fc.begin(), fc.end(),
                                       [](const auto& a, const auto& b) { return a.indices < b.indices; }));
            EXPECT_EQ(std::adjacent_find(fc.begin(), fc.end()), fc.end());
            for (const auto& c : fc) {
                ASSERT_GE(c.size(), 1u);
                ASSERT_LE(c.size(), std::min(m, n));
                EXPECT_TRUE(std::is_sorted(c.indices.begin(), c.indices.end()));
                EXPECT_GE(c.indices.front(), 1u);
                EXPECT_LE(c.indices.back(), m);
            }
            const std::set<IndexCombination> full_set(fc.begin(), fc.end());
            ASSERT_EQ(lite.combos().size(), CombinationSet::count(m, n, CombinationMode::Lite));
            for (const auto& c : lite.combos()) {
                EXPECT_TRUE(full_set.count(c));
                EXPECT_TRUE(c.size() == 1 || c.size() == std::min(m, n));
            }
        }
    }
}

TEST(Combinations, StreamedFamilyMatchesClosedForm) {
    const CombinationSet s(26, 2, CombinationMode::Full);
    EXPECT_FALSE(s.materialized());
    EXPECT_THROW(s.combos(), ArgumentError);
    std::uint64_t n = 0;
    IndexCombination prev;
    bool ordered = true;
    s.for_each([&](const IndexCombination& c) {
        if (n++ && !(prev.indices < c.indices)) ordered = false;
        prev = c;
    });
    EXPECT_EQ(n, 26u + 325u);
    EXPECT_TRUE(ordered);
}

TEST(SelectSub, Examples) {
    const ConstraintSystem sys = three_by_two();
    auto [a_all, b_all] = select_sub(sys, combo({1, 2, 3}));
    EXPECT_EQ(a_all, sys.a());
    EXPECT_EQ(b_all, sys.b());

    auto [a2, b2] = select_sub(sys, combo({2}));
    EXPECT_EQ(a2, (Matrix(1, 2) << 0, 1).finished());
    EXPECT_EQ(b2(0), 2.0);

    auto [a13, b13] = select_sub(sys, combo({1, 3}));
    EXPECT_EQ(a13, (Matrix(2, 2) << 1, 0, 1, 1).finished());
    EXPECT_EQ(b13, (Vector(2) << 1, 3).finished());

    EXPECT_THROW(select_sub(sys, combo({4})), ArgumentError);
    EXPECT_THROW(select_sub(sys, combo({0})), ArgumentError);
}

TEST(SelectSub, RowsMatchUnderFuzz) {
    Rng rng(9);
    for (int c = 0; c < 200; ++c) {
        const auto m = static_cast<Eigen::Index>(1 + rng.below(10));
        Matrix a(m, 3);
        Vector b(m);
        for (Eigen::Index i = 0; i < m; ++i) {
            b(i) = rng.uniform(-1, 1);
            for (Eigen::Index j = 0; j < 3; ++j) a(i, j) = rng.uniform(-1, 1);
        }
        const ConstraintSystem sys(a, b);
        const CombinationSet set(static_cast<std::size_t>(m), 3, CombinationMode::Full);
        const auto& g = set.combos()[rng.below(set.combos().size())];
        auto [as, bs] = select_sub(sys, g);
        for (std::size_t i = 0; i < g.size(); ++i) {
            EXPECT_EQ(as.row(static_cast<Eigen::Index>(i)), a.row(static_cast<Eigen::Index>(g.indices[i] - 1)));
            EXPECT_EQ(bs(static_cast<Eigen::Index>(i)), b(static_cast<Eigen::Index>(g.indices[i] - 1)));
        }
    }
}

TEST(Violation, Examples) {
    const ConstraintSystem sys = three_by_two();
    EXPECT_EQ(violation(sys, Vector::Zero(2)).maxCoeff(), 0.0);
    EXPECT_EQ(violation(ConstraintSystem(Matrix::Ones(1, 1), Vector::Zero(1)), Vector::Constant(1, 2.0))(0), 2.0);
    EXPECT_EQ(violation(ConstraintSystem(-Matrix::Ones(1, 1), Vector::Zero(1)), Vector::Constant(1, 2.0))(0), 0.0);
    EXPECT_THROW(violation(sys, Vector::Zero(3)), ArgumentError);
}

TEST(Violation, ZeroIffSatisfiedOnIntegerGrid) {
    // Small integer data: every product is exact, so the comparison is an exact oracle.
    Rng rng(13);
    for (int c = 0; c < 300; ++c) {
        Matrix a(4, 2);
        Vector b(4), y(2);
        for (Eigen::Index i = 0; i < 4; ++i) {
            b(i) = static_cast<double>(rng.below(11)) - 5.0;
            for (Eigen::Index j = 0; j < 2; ++j) a(i, j) = static_cast<double>(rng.below(7)) - 3.0;
        }
        for (Eigen::Index j = 0; j < 2; ++j) y(j) = static_cast<double>(rng.below(7)) - 3.0;
        const ConstraintSystem sys(a, b);
        bool satisfied = true;
        for (Eigen::Index i = 0; i < 4; ++i) {
            double lhs = 0;
            for (Eigen::Index j = 0; j < 2; ++j) lhs += a(i, j) * y(j);
            satisfied = satisfied && lhs <= b(i);
        }
        EXPECT_EQ(violation(sys, y).maxCoeff() == 0.0, satisfied);
    }
}

TEST(Violation, Summary) {
    const ViolationSummary s = summarize((Vector(4) << 0, 2, 0, 1).finished());
    EXPECT_EQ(s.max, 2.0);
    EXPECT_EQ(s.mean, 0.75);
    EXPECT_EQ(s.fraction_positive, 0.5);
}

TEST(ConstraintSystem, JsonRoundTrip) {
    const ConstraintSystem sys = three_by_two();
    const auto doc = to_json(sys);
    EXPECT_EQ(doc.dump(), R"({"A":[[1.0,0.0],[0.0,1.0],[1.0,1.0]],"b":[1.0,2.0,3.0]})");
    const ConstraintSystem back = constraint_system_from_json(doc);
    EXPECT_EQ(back.a(), sys.a());
    EXPECT_EQ(back.b(), sys.b());
    EXPECT_THROW(constraint_system_from_json(nlohmann::json{{"A", {{1.0}}}}), ArgumentError);
}

TEST(FunctionProvider, ChecksDimensions) {
    const FunctionProvider ok(1, 3, 2, [](const Vector&) { return three_by_two(); });
    EXPECT_EQ(ok.evaluate(Vector::Zero(1)).m(), 3u);
    EXPECT_THROW(ok.evaluate(Vector::Zero(2)), ArgumentError);
    const FunctionProvider bad(1, 4, 2, [](const Vector&) { return three_by_two(); });
    EXPECT_THROW(bad.evaluate(Vector::Zero(1)), ArgumentError);
}
