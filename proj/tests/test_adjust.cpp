#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "support.hpp"

using namespace rdof;

namespace {

CaseTable table_with(double missing, std::size_t n = 100, std::uint64_t seed = 5, double effect = 0.0) {
    GenConfig g;
    g.n_cases = n;
    g.missing_rate = missing;
    g.seed = seed;
    g.effect_size = effect;
    return generate(g);
}

// Holm by its definition: the adjusted p-value of the j-th smallest is the
// largest (m - i + 1) p_(i) over i <= j, capped at 1.
std::vector<double> holm_oracle(const std::vector<double>& p) {
    const std::size_t m = p.size();
    std::vector<double> out(m);
    for (std::size_t a = 0; a < m; ++a) {
        // rank of a among ties resolved by index, like a stable sort
        std::size_t rank = 0;
        for (std::size_t b = 0; b < m; ++b)
            if (p[b] < p[a] || (p[b] == p[a] && b < a)) ++rank;
        double best = 0.0;
        for (std::size_t b = 0; b < m; ++b) {
            std::size_t rb = 0;
            for (std::size_t c = 0; c < m; ++c)
                if (p[c] < p[b] || (p[c] == p[b] && c < b)) ++rb;
            if (rb <= rank) best = std::max(best, std::min(1.0, static_cast<double>(m - rb) * p[b]));
        }
        out[a] = best;
    }
    return out;
}

PermutationMatrix matrix_from_minima(const std::vector<double>& minima) {
    PermutationMatrix pm;
    pm.B = minima.size();
    pm.m = 1;
    pm.pvals = minima;
    pm.row_minima = minima;
    return pm;
}

} // namespace

TEST(Bonferroni, Examples) {
    EXPECT_NEAR(bonferroni(std::vector<double>(48, 0.001))[0], 0.048, 1e-15);
    EXPECT_EQ(bonferroni(std::vector<double>(48, 0.05))[0], 1.0);
    EXPECT_EQ(bonferroni(std::vector<double>{0.0371}), std::vector<double>{0.0371});
    EXPECT_THROW(bonferroni(std::vector<double>{}), std::invalid_argument);
}

TEST(Holm, Examples) {
    std::vector<double> p(48, 0.5);
    p[17] = 0.0005;
    const auto h = holm(p);
    EXPECT_NEAR(h[17], 0.024, 1e-15);
    EXPECT_EQ(h[17], bonferroni(p)[17]);
    EXPECT_EQ(holm(std::vector<double>{0.01, 0.02}), (std::vector<double>{0.02, 0.02}));
    const auto eq = holm(std::vector<double>(6, 0.03));
    for (double v : eq) EXPECT_NEAR(v, 0.18, 1e-15);
}

TEST(Holm, MatchesDefinitionAndBounds) {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const auto m = 1 + rng.below(30);
        std::vector<double> p;
        for (std::uint64_t i = 0; i < m; ++i) p.push_back(rng.bernoulli(0.2) ? 0.25 : rng.uniform() * rng.uniform());
        const auto h = holm(p);
        const auto b = bonferroni(p);
        const auto o = holm_oracle(p);
        const auto arg = min_p(std::span<const double>(p)).first;
        EXPECT_EQ(h[arg], b[arg]);
        for (std::size_t i = 0; i < m; ++i) {
            EXPECT_DOUBLE_EQ(h[i], o[i]);
            EXPECT_GE(b[i], h[i]);
            EXPECT_GE(h[i], std::min(1.0, p[i]));
        }
    }
}

TEST(Permutations, SingleRow) {
    const auto t = table_with(0.8);
    const auto pm = permute_pvalues(t, SpecTree::paper_default(), 1, 7);
    EXPECT_EQ(pm.B, 1u);
    EXPECT_EQ(pm.m, 48u);
    EXPECT_EQ(pm.pvals.size(), 48u);
    const auto row = pm.row(0);
    EXPECT_EQ(pm.row_minima[0], *std::min_element(row.begin(), row.end()));
}

TEST(Permutations, DeterministicPerSeed) {
    const auto t = table_with(0.8);
    const auto a = permute_pvalues(t, SpecTree::paper_default(), 20, 7, 1);
    const auto b = permute_pvalues(t, SpecTree::paper_default(), 20, 7, 4);
    EXPECT_EQ(a.pvals, b.pvals);
    EXPECT_EQ(a.row_minima, b.row_minima);
    const auto c = permute_pvalues(t, SpecTree::paper_default(), 20, 8, 1);
    EXPECT_NE(a.pvals, c.pvals);
}

TEST(Permutations, OutcomeMultisetPreserved) {
    std::vector<int> y{1, 1, 0, 0, 0, 1, 0, 0, 0, 0, 1};
    for (std::uint64_t s = 0; s < 100; ++s) {
        auto z = permuted_outcomes(y, permutation_seed(9, s));
        EXPECT_EQ(std::count(z.begin(), z.end(), 1), std::count(y.begin(), y.end(), 1));
        EXPECT_EQ(z.size(), y.size());
    }
}

TEST(Permutations, RowsMatchRelabelledRuns) {
    const auto t = table_with(0.6, 60);
    const auto tree = SpecTree::paper_default();
    const auto pm = permute_pvalues(t, tree, 3, 21);
    for (std::size_t b = 0; b < 3; ++b) {
        const auto y = permuted_outcomes(t.outcomes(), permutation_seed(21, b + 1));
        const auto slow = oracle::naive_run_all(oracle::with_outcomes(t, y), tree, 21);
        for (std::size_t i = 0; i < pm.m; ++i) EXPECT_EQ(pm.at(b, i), slow[i]) << "row " << b << " spec " << i;
    }
}

TEST(MinP, Granularity) {
    const auto t = table_with(0.8);
    const auto rep = adjust_all(t, SpecTree::paper_default(), 1, 0.05, 4);
    for (double v : rep.minp) EXPECT_TRUE(v == 0.5 || v == 1.0) << v;
    const auto rep2 = adjust_all(t, SpecTree::paper_default(), 37, 0.05, 4);
    for (double v : rep2.minp) {
        const double k = v * 38.0;
        EXPECT_NEAR(k, std::round(k), 1e-9);
        EXPECT_GE(v, 1.0 / 38.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(MinP, QuotedTwentyEightPercent) {
    std::vector<double> minima;
    for (int b = 0; b < 999; ++b) minima.push_back(b < 280 ? 0.0034 * (b + 1) / 281.0 : 0.01 + b * 1e-4);
    const auto adj = minp_adjust(std::vector<double>{0.0034}, matrix_from_minima(minima));
    EXPECT_NEAR(adj[0], 0.28, 0.002);
}

TEST(MinP, TieToleranceCountsNearEqualMinima) {
    const auto pm = matrix_from_minima({0.2 + 5e-13, 0.2 + 5e-12, 0.1});
    EXPECT_DOUBLE_EQ(minp_adjust(std::vector<double>{0.2}, pm)[0], 3.0 / 4.0);
}

TEST(MinP, SingleSpecIsOrdinaryPermutationTest) {
    const auto t = table_with(0.0, 80, 2, 2.0);
    const SpecTree tree{{{"coding", {"continuous"}}}, {}, false};
    const std::size_t B = 200;
    const auto rep = adjust_all(t, tree, B, 0.05, 13);
    const auto frame = aggregate(t, Aggregation::Mean);
    std::vector<double> x;
    for (const auto& r : frame.rows) x.push_back(r.exposure);
    const double observed = logistic_wald(x, t.outcomes()).p_value;
    std::size_t count = 0;
    for (std::size_t b = 1; b <= B; ++b) {
        const auto y = permuted_outcomes(t.outcomes(), permutation_seed(13, b));
        count += logistic_wald(x, y).p_value <= observed + 1e-12 ? 1 : 0;
    }
    EXPECT_EQ(rep.raw.entries[0].p_value, observed);
    EXPECT_DOUBLE_EQ(rep.minp[0], static_cast<double>(1 + count) / static_cast<double>(B + 1));
}

TEST(MinP, PerfectDependenceHasNoPenalty) {
    // On complete data the missing/surrogate/tuning axes are identities, so
    // all 8 specs of this tree are the same test.
    const auto t = table_with(0.0, 90, 3, 1.5);
    const SpecTree eight{{{"missing", {"drop", "impute"}}, {"surrogate", {"knn", "linreg"}}, {"tuning", {"default", "tuned"}},
                          {"coding", {"binary_200"}}},
                         {},
                         false};
    const SpecTree one{{{"coding", {"binary_200"}}}, {}, false};
    const auto many = adjust_all(t, eight, 150, 0.05, 5);
    const auto single = adjust_all(t, one, 150, 0.05, 5);
    ASSERT_EQ(many.m(), 8u);
    for (double v : many.minp) EXPECT_EQ(v, single.minp[0]);
    EXPECT_EQ(many.bonferroni[0], std::min(1.0, 8.0 * single.raw.entries[0].p_value));
}

TEST(MinP, MonotoneInRawP) {
    const auto t = table_with(0.8, 100, 9, 2.0);
    const auto rep = adjust_all(t, SpecTree::paper_default(), 60, 0.05, 2);
    const auto p = rep.raw.p_values();
    for (std::size_t i = 0; i < p.size(); ++i)
        for (std::size_t j = 0; j < p.size(); ++j)
            if (p[i] <= p[j]) {
                EXPECT_LE(rep.minp[i], rep.minp[j]);
            }
}

TEST(MinP, DimensionMismatch) {
    const auto pm = matrix_from_minima({0.1, 0.2});
    EXPECT_THROW(minp_adjust(std::vector<double>{0.1, 0.2}, pm), std::invalid_argument);
}

TEST(MinP, ExhaustiveEnumerationOracle) {
    const SpecTree tree{{{"missing", {"drop", "impute"}}, {"coding", {"continuous", "binary_200"}}}, {}, false};
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto t = oracle::tiny_table(6, seed);
        const PreparedMultiverse prepared(t, tree, 77);
        const auto y = t.outcomes();
        const auto perm = exhaustive_permutations(prepared, y);
        const auto minp = minp_adjust(prepared.run(y), perm);
        const auto exact = oracle::exact_minp_oracle(t, tree, 77);
        ASSERT_EQ(minp.size(), exact.size());
        for (std::size_t i = 0; i < minp.size(); ++i) EXPECT_EQ(minp[i], exact[i]) << "seed " << seed << " spec " << i;
    }
}

TEST(MinP, DistinctRelabellingsCount) {
    const std::vector<int> y{1, 0, 0, 1, 0, 0, 0};
    const auto rel = distinct_relabellings(y);
    EXPECT_EQ(rel.size(), oracle::choose_exact(7, 2) - 1);
    std::set<std::vector<int>> unique(rel.begin(), rel.end());
    EXPECT_EQ(unique.size(), rel.size());
    EXPECT_EQ(unique.count(y), 0u);
}

TEST(AdjustAll, InvariantsAndReport) {
    const auto t = table_with(0.85, 120, 4, 3.0);
    const auto rep = adjust_all(t, SpecTree::paper_default(), 40, 0.05, 6, 2);
    ASSERT_EQ(rep.m(), 48u);
    const auto p = rep.raw.p_values();
    for (std::size_t i = 0; i < rep.m(); ++i) {
        EXPECT_GE(rep.bonferroni[i], rep.holm[i]);
        EXPECT_GE(rep.holm[i], p[i]);
        EXPECT_EQ(rep.rejected_minp[i], rep.minp[i] < 0.05);
    }
    const auto arg = rep.argmin();
    EXPECT_EQ(rep.holm[arg], rep.bonferroni[arg]);
    const auto j = report_summary(rep);
    EXPECT_EQ(j["m"], 48);
    EXPECT_EQ(j["B"], 40);
    EXPECT_EQ(j["min_spec_id"], arg);
    EXPECT_EQ(j["p_min_minp"].get<double>(), rep.minp[arg]);
    EXPECT_EQ(j["min_spec_path"]["coding"], std::string(to_string(rep.raw.specs[arg].coding)));
    std::ostringstream csv;
    write_report_csv(rep, csv);
    const std::string text = csv.str();
    EXPECT_EQ(text.substr(0, text.find('\n')),
              "spec_id,missing,surrogate,tuning,aggregation,coding,raw,bonferroni,holm,minp,rejected_minp,converged,notes");
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 49);
}

TEST(AdjustAll, WorkerCountInvariant) {
    const auto t = table_with(0.85, 100);
    const auto a = adjust_all(t, SpecTree::paper_default(), 30, 0.05, 6, 1);
    const auto b = adjust_all(t, SpecTree::paper_default(), 30, 0.05, 6, 8);
    std::ostringstream sa, sb;
    write_report_csv(a, sa);
    write_report_csv(b, sb);
    EXPECT_EQ(sa.str(), sb.str());
}

TEST(AdjustAll, RejectsBadArguments) {
    const auto t = table_with(0.5, 40);
    EXPECT_THROW(adjust_all(t, SpecTree::paper_default(), 0, 0.05, 1), ConfigError);
    EXPECT_THROW(adjust_all(t, SpecTree::paper_default(), 10, 1.5, 1), ConfigError);
}

TEST(AdjustAll, MinPNoLargerThanBonferroniAboveResolution) {
    // Below 1/(B+1) the permutation floor dominates, so only compare where
    // Bonferroni is above it.
    const std::size_t B = 100;
    int compared = 0, smaller = 0;
    for (double effect : {1.0, 3.0})
        for (std::uint64_t s = 1; s <= 9; ++s) {
            const auto t = table_with(0.85, 150, s, effect);
            const auto rep = adjust_all(t, SpecTree::paper_default(), B, 0.05, s);
            const auto arg = rep.argmin();
            if (rep.bonferroni[arg] < 2.0 / (B + 1)) continue;
            ++compared;
            EXPECT_LE(rep.minp[arg], rep.bonferroni[arg]) << "effect " << effect << " seed " << s;
            smaller += rep.minp[arg] < rep.bonferroni[arg] ? 1 : 0;
        }
    EXPECT_GE(compared, 6);
    EXPECT_EQ(smaller, compared);
}

TEST(AdjustAll, EffectMinPBeatsBonferroniInMajority) {
    int wins = 0, runs = 0;
    for (std::uint64_t s = 1; s <= 9; ++s) {
        const auto t = table_with(0.85, 150, s, 2.0);
        const auto rep = adjust_all(t, SpecTree::paper_default(), 500, 0.05, s);
        const auto arg = rep.argmin();
        wins += rep.minp[arg] < rep.bonferroni[arg] ? 1 : 0;
        ++runs;
    }
    EXPECT_GT(wins * 2, runs);
}
