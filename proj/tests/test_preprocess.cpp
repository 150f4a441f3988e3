#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "support.hpp"

using namespace rdof;

namespace {

CaseTable noisy_table(std::size_t n, double missing, std::uint64_t seed = 3) {
    GenConfig g;
    g.n_cases = n;
    g.missing_rate = missing;
    g.seed = seed;
    return generate(g);
}

CaseTable one_case_table(std::vector<double> values) {
    CaseTable t;
    t.proxy_names = {"proxy_1"};
    CaseRecord c{"a", 1, {}};
    for (double v : values) c.measurements.push_back({v, {v}});
    t.cases.push_back(c);
    return t;
}

} // namespace

TEST(HandleMissing, IdentityOnCompleteData) {
    const auto t = noisy_table(80, 0.0);
    for (auto mode : {MissingMode::Drop, MissingMode::Impute}) {
        const auto out = handle_missing(t, mode, 5);
        EXPECT_EQ(out.table, t);
        EXPECT_TRUE(out.dropped.empty());
    }
}

TEST(HandleMissing, DropRemovesFullyMissingCase) {
    auto t = noisy_table(40, 0.2);
    for (auto& m : t.cases[3].measurements) m.pao2.reset();
    const auto out = handle_missing(t, MissingMode::Drop, 1);
    for (const auto& c : out.table.cases) EXPECT_NE(c.case_id, t.cases[3].case_id);
    ASSERT_FALSE(out.dropped.empty());
    EXPECT_TRUE(std::any_of(out.dropped.begin(), out.dropped.end(), [&](const auto& d) { return d.case_id == t.cases[3].case_id; }));
    EXPECT_EQ(out.table.n_missing(), 0u);
}

TEST(HandleMissing, DropKeepsSubMultisetOfRows) {
    const auto t = noisy_table(60, 0.5);
    const auto out = handle_missing(t, MissingMode::Drop, 1);
    std::size_t j = 0;
    for (const auto& c : out.table.cases) {
        while (t.cases[j].case_id != c.case_id) ++j;
        std::vector<MeasurementRow> observed;
        for (const auto& m : t.cases[j].measurements)
            if (!m.missing()) observed.push_back(m);
        EXPECT_EQ(c.measurements, observed);
        EXPECT_EQ(c.outcome, t.cases[j].outcome);
    }
}

TEST(HandleMissing, DropDegenerateThrows) {
    CaseTable t;
    t.proxy_names = {"proxy_1"};
    t.cases.push_back({"a", 0, {{100.0, {1.0}}}});
    t.cases.push_back({"b", 1, {{std::nullopt, {1.0}}}});
    EXPECT_THROW(handle_missing(t, MissingMode::Drop, 1), DataError);
}

TEST(HandleMissing, ImputeDeterministicAndKeepsObserved) {
    const auto t = noisy_table(80, 0.4);
    for (auto kind : {SurrogateKind::Knn, SurrogateKind::LinReg}) {
        const auto a = handle_missing(t, MissingMode::Impute, 9, kind, Tuning::Tuned);
        const auto b = handle_missing(t, MissingMode::Impute, 9, kind, Tuning::Tuned);
        EXPECT_EQ(a.table, b.table);
        EXPECT_EQ(a.table.n_missing(), 0u);
        for (std::size_t i = 0; i < t.size(); ++i)
            for (std::size_t r = 0; r < t.cases[i].measurements.size(); ++r) {
                const auto& in = t.cases[i].measurements[r];
                const auto& out = a.table.cases[i].measurements[r];
                if (!in.missing()) {
                    EXPECT_EQ(*in.pao2, *out.pao2);
                }
                EXPECT_GE(*out.pao2, 1.0);
            }
        const auto c = handle_missing(t, MissingMode::Impute, 10, kind, Tuning::Tuned);
        EXPECT_NE(a.table, c.table);
    }
}

TEST(HandleMissing, ImputeNeedsTrainingRows) {
    auto t = noisy_table(5, 0.0);
    for (auto& c : t.cases)
        for (std::size_t r = 1; r < c.measurements.size(); ++r) c.measurements[r].pao2.reset();
    ASSERT_LT(t.n_rows() - t.n_missing(), kMinSurrogateRows);
    EXPECT_THROW(handle_missing(t, MissingMode::Impute, 1), DataError);
}

TEST(Surrogate, LinregRecoversExactLinearProxies) {
    auto t = noisy_table(50, 0.3);
    for (auto& c : t.cases)
        for (auto& m : c.measurements) {
            const double v = m.pao2.value_or(0.0);
            if (m.pao2) m.proxies.assign(m.proxies.size(), v);
        }
    const auto model = fit_surrogate(t, SurrogateKind::LinReg, Tuning::Default, 1);
    EXPECT_LT(model.training_rmse(), 1e-8);
    const std::vector<double> q(t.n_proxies(), 173.25);
    EXPECT_NEAR(model.predict(q), 173.25, 1e-8);
}

TEST(Surrogate, KnnDuplicatesReturnTheirValue) {
    CaseTable t;
    t.proxy_names = {"proxy_1", "proxy_2"};
    CaseRecord dup{"dup", 1, {}};
    for (int i = 0; i < 6; ++i) dup.measurements.push_back({150.0, {10.0, 20.0}});
    t.cases.push_back(dup);
    Rng rng(2);
    for (int i = 0; i < 30; ++i) {
        CaseRecord c{"c" + std::to_string(i), i % 2, {}};
        c.measurements.push_back({300.0 + 50.0 * rng.uniform(), {500.0 + rng.normal(), 800.0 + rng.normal()}});
        t.cases.push_back(c);
    }
    const auto model = fit_surrogate(t, SurrogateKind::Knn, Tuning::Default, 1);
    EXPECT_EQ(model.k(), 5u);
    EXPECT_DOUBLE_EQ(model.predict(std::vector<double>{10.0, 20.0}), 150.0);
}

TEST(Surrogate, KnnMatchesBruteForce) {
    const auto t = noisy_table(60, 0.3);
    const auto model = fit_surrogate(t, SurrogateKind::Knn, Tuning::Default, 1);
    // Brute force on standardized proxies (population sd).
    std::vector<std::vector<double>> x;
    std::vector<double> y;
    for (const auto& c : t.cases)
        for (const auto& m : c.measurements)
            if (m.pao2) {
                x.push_back(m.proxies);
                y.push_back(*m.pao2);
            }
    const std::size_t p = t.n_proxies();
    std::vector<double> mean(p, 0.0), sd(p, 0.0);
    for (const auto& r : x)
        for (std::size_t j = 0; j < p; ++j) mean[j] += r[j] / static_cast<double>(x.size());
    for (const auto& r : x)
        for (std::size_t j = 0; j < p; ++j) sd[j] += (r[j] - mean[j]) * (r[j] - mean[j]) / static_cast<double>(x.size());
    for (auto& s : sd) s = std::sqrt(s);
    Rng rng(8);
    for (int q = 0; q < 20; ++q) {
        std::vector<double> query(p);
        for (std::size_t j = 0; j < p; ++j) query[j] = 210.0 + 120.0 * rng.normal();
        std::vector<std::pair<double, double>> d;
        for (std::size_t i = 0; i < x.size(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < p; ++j) s += std::pow((x[i][j] - query[j]) / sd[j], 2);
            d.emplace_back(s, y[i]);
        }
        std::sort(d.begin(), d.end());
        const double expected = (d[0].second + d[1].second + d[2].second + d[3].second + d[4].second) / 5.0;
        EXPECT_NEAR(model.predict(query), expected, 1e-9);
    }
}

TEST(Surrogate, RidgeMatchesNormalEquations) {
    const auto t = noisy_table(80, 0.3);
    std::vector<std::vector<double>> x;
    std::vector<double> y;
    for (const auto& c : t.cases)
        for (const auto& m : c.measurements)
            if (m.pao2) {
                x.push_back(m.proxies);
                y.push_back(*m.pao2);
            }
    const auto n = static_cast<Eigen::Index>(x.size());
    const auto p = static_cast<Eigen::Index>(t.n_proxies());
    for (double lambda : {0.0, 0.1, 1.0, 10.0}) {
        const auto model = SurrogateModel::fit(
            [&] {
                Eigen::MatrixXd m(n, p);
                for (Eigen::Index i = 0; i < n; ++i)
                    for (Eigen::Index j = 0; j < p; ++j) m(i, j) = x[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
                return m;
            }(),
            Eigen::Map<const Eigen::VectorXd>(y.data(), n), SurrogateKind::LinReg, lambda);
        // Centre everything; the intercept is the mean of y and is not penalized.
        Eigen::MatrixXd z(n, p);
        Eigen::VectorXd mu = Eigen::VectorXd::Zero(p), sd = Eigen::VectorXd::Zero(p);
        for (Eigen::Index j = 0; j < p; ++j) {
            for (Eigen::Index i = 0; i < n; ++i) mu(j) += x[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] / static_cast<double>(n);
            for (Eigen::Index i = 0; i < n; ++i)
                sd(j) += std::pow(x[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] - mu(j), 2) / static_cast<double>(n);
            sd(j) = std::sqrt(sd(j));
            for (Eigen::Index i = 0; i < n; ++i) z(i, j) = (x[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] - mu(j)) / sd(j);
        }
        const double ybar = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
        Eigen::VectorXd yc(n);
        for (Eigen::Index i = 0; i < n; ++i) yc(i) = y[static_cast<std::size_t>(i)] - ybar;
        const Eigen::MatrixXd a = z.transpose() * z + lambda * Eigen::MatrixXd::Identity(p, p);
        const Eigen::VectorXd beta = a.ldlt().solve(z.transpose() * yc);
        const std::vector<double> q{180.0, 260.0, 210.0};
        double expected = ybar;
        for (Eigen::Index j = 0; j < p; ++j) expected += beta(j) * (q[static_cast<std::size_t>(j)] - mu(j)) / sd(j);
        EXPECT_NEAR(model.predict(q), expected, 1e-7) << "lambda " << lambda;
    }
}

TEST(Surrogate, TunedCvNotWorseThanDefault) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto t = noisy_table(120, 0.4, seed);
        for (auto kind : {SurrogateKind::Knn, SurrogateKind::LinReg}) {
            const auto grid = surrogate_grid(kind);
            const auto scores = cv_rmse(t, kind, grid, 17);
            const double chosen = select_hyperparameter(t, kind, Tuning::Tuned, 17);
            const double deflt = select_hyperparameter(t, kind, Tuning::Default, 17);
            const auto at = [&](double h) { return scores[static_cast<std::size_t>(std::find(grid.begin(), grid.end(), h) - grid.begin())]; };
            EXPECT_LE(at(chosen), at(deflt) + 1e-9);
            EXPECT_DOUBLE_EQ(at(chosen), *std::min_element(scores.begin(), scores.end()));
            const auto model = fit_surrogate(t, kind, Tuning::Tuned, 17);
            EXPECT_EQ(model.cv_rmse(), scores);
        }
    }
}

TEST(Surrogate, TiesGoToSmallerValue) {
    // Constant target: every grid value has the same CV error.
    CaseTable t;
    t.proxy_names = {"proxy_1"};
    for (int i = 0; i < 40; ++i) t.cases.push_back({"c" + std::to_string(i), i % 2, {{120.0, {static_cast<double>(i)}}}});
    EXPECT_EQ(select_hyperparameter(t, SurrogateKind::Knn, Tuning::Tuned, 1), 3.0);
    EXPECT_EQ(select_hyperparameter(t, SurrogateKind::LinReg, Tuning::Tuned, 1), 0.0);
}

TEST(Surrogate, ProxyDimensionMismatch) {
    const auto t = noisy_table(40, 0.3);
    const auto model = fit_surrogate(t, SurrogateKind::LinReg, Tuning::Default, 1);
    EXPECT_THROW(model.predict(std::vector<double>{1.0}), DataError);
}

TEST(ApplySurrogate, CompleteTableUnchanged) {
    const auto t = noisy_table(40, 0.0);
    auto training = noisy_table(40, 0.3);
    const auto model = fit_surrogate(training, SurrogateKind::Knn, Tuning::Default, 1);
    EXPECT_EQ(apply_surrogate(t, model), t);
}

TEST(ApplySurrogate, OneMissingRowChangesOneValue) {
    auto t = noisy_table(40, 0.0);
    t.cases[5].measurements[0].pao2.reset();
    const auto model = fit_surrogate(t, SurrogateKind::LinReg, Tuning::Default, 1);
    const auto out = apply_surrogate(t, model);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < t.size(); ++i)
        for (std::size_t r = 0; r < t.cases[i].measurements.size(); ++r)
            changed += t.cases[i].measurements[r].pao2 != out.cases[i].measurements[r].pao2 ? 1 : 0;
    EXPECT_EQ(changed, 1u);
    EXPECT_EQ(out.n_missing(), 0u);
}

TEST(ApplySurrogate, PredictionsFlooredAtOne) {
    CaseTable t;
    t.proxy_names = {"proxy_1"};
    for (int i = 0; i < 20; ++i) t.cases.push_back({"c" + std::to_string(i), i % 2, {{100.0 + i, {100.0 + i}}}});
    t.cases.push_back({"x", 0, {{std::nullopt, {-5000.0}}}});
    const auto model = fit_surrogate(t, SurrogateKind::LinReg, Tuning::Default, 1);
    EXPECT_LT(model.predict(std::vector<double>{-5000.0}), 0.0);
    const auto out = apply_surrogate(t, model);
    EXPECT_EQ(*out.cases.back().measurements[0].pao2, 1.0);
}

TEST(Aggregate, OddCase) {
    const auto t = one_case_table({100, 200, 300});
    EXPECT_DOUBLE_EQ(aggregate(t, Aggregation::Mean).rows[0].exposure, 200.0);
    EXPECT_DOUBLE_EQ(aggregate(t, Aggregation::Median).rows[0].exposure, 200.0);
}

TEST(Aggregate, EvenCase) {
    const auto t = one_case_table({300, 100, 1000, 200});
    EXPECT_DOUBLE_EQ(aggregate(t, Aggregation::Mean).rows[0].exposure, 400.0);
    EXPECT_DOUBLE_EQ(aggregate(t, Aggregation::Median).rows[0].exposure, 250.0);
}

TEST(Aggregate, SingleMeasurement) {
    const auto t = one_case_table({187.3});
    EXPECT_DOUBLE_EQ(aggregate(t, Aggregation::Mean).rows[0].exposure, 187.3);
    EXPECT_DOUBLE_EQ(aggregate(t, Aggregation::Median).rows[0].exposure, 187.3);
}

TEST(Aggregate, SymmetricMultisetsAgree) {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const double centre = 100.0 + 200.0 * rng.uniform();
        std::vector<double> v{centre};
        const auto k = rng.below(4);
        for (std::uint64_t i = 0; i < k; ++i) {
            const double d = static_cast<double>(rng.below(100)) / 4.0;
            v.push_back(centre + d);
            v.push_back(centre - d);
        }
        const auto t = one_case_table(v);
        EXPECT_NEAR(aggregate(t, Aggregation::Mean).rows[0].exposure, aggregate(t, Aggregation::Median).rows[0].exposure, 1e-9);
    }
}

TEST(Aggregate, RejectsIncompleteData) {
    auto t = one_case_table({100, 200});
    t.cases[0].measurements[1].pao2.reset();
    EXPECT_THROW(aggregate(t, Aggregation::Mean), DataError);
}

TEST(Preprocess, PureAndIndexed) {
    const auto t = noisy_table(70, 0.5);
    for (auto missing : {MissingMode::Drop, MissingMode::Impute})
        for (auto agg : {Aggregation::Mean, Aggregation::Median}) {
            const PreprocChoice c{missing, SurrogateKind::Knn, Tuning::Tuned, agg};
            const auto a = preprocess(t, c, 42);
            const auto b = preprocess(t, c, 42);
            EXPECT_EQ(a.frame, b.frame);
            for (std::size_t i = 0; i < a.frame.size(); ++i) {
                EXPECT_EQ(t.cases[a.frame.source_index[i]].case_id, a.frame.rows[i].case_id);
                EXPECT_EQ(t.cases[a.frame.source_index[i]].outcome, a.frame.rows[i].outcome);
            }
            if (missing == MissingMode::Impute) {
                EXPECT_EQ(a.frame.size(), t.size());
            }
        }
}
