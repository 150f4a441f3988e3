#pragma once

// Independent reference computations used by the unit and acceptance
// tests. None of these call into the code paths they are compared with.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "rdof/rdof.hpp"

namespace rdof::oracle {

// Exact binomial coefficient in 64-bit integers (n <= 60 is safe here).
inline std::uint64_t choose_exact(std::uint64_t n, std::uint64_t k) {
    if (k > n) return 0;
    k = std::min(k, n - k);
    std::uint64_t r = 1;
    for (std::uint64_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
}

// Two-sided Fisher p-value for a 2 x K table by integer enumeration: every
// table with the observed margins has probability weight prod_j C(c_j, x_j)
// over the common denominator C(n, r1), so ties compare exactly.
inline long double fisher_exact_oracle(const std::vector<std::array<std::int64_t, 2>>& columns) {
    std::vector<std::uint64_t> cols;
    std::uint64_t r1 = 0;
    for (const auto& c : columns) {
        cols.push_back(static_cast<std::uint64_t>(c[0] + c[1]));
        r1 += static_cast<std::uint64_t>(c[1]);
    }
    const std::uint64_t n = std::accumulate(cols.begin(), cols.end(), std::uint64_t{0});
    std::uint64_t observed = 1;
    for (std::size_t j = 0; j < cols.size(); ++j) observed *= choose_exact(cols[j], static_cast<std::uint64_t>(columns[j][1]));

    std::uint64_t tail = 0;
    std::vector<std::uint64_t> x(cols.size(), 0);
    // Odometer over the outcome-1 row, keeping only rows summing to r1.
    for (;;) {
        std::uint64_t sum = std::accumulate(x.begin(), x.end(), std::uint64_t{0});
        if (sum == r1) {
            std::uint64_t w = 1;
            for (std::size_t j = 0; j < cols.size(); ++j) w *= choose_exact(cols[j], x[j]);
            if (w <= observed) tail += w;
        }
        std::size_t j = 0;
        while (j < cols.size() && ++x[j] > cols[j]) x[j++] = 0;
        if (j == cols.size()) break;
    }
    return static_cast<long double>(tail) / static_cast<long double>(choose_exact(n, r1));
}

// Wilson score bounds as the roots of
// (1 + z^2/n) t^2 - (2 phat + z^2/n) t + phat^2 = 0, in long double.
inline std::pair<long double, long double> wilson_oracle(std::size_t s, std::size_t n, long double z) {
    const long double nn = static_cast<long double>(n);
    const long double ph = static_cast<long double>(s) / nn;
    const long double a = 1.0L + z * z / nn;
    const long double b = -(2.0L * ph + z * z / nn);
    const long double c = ph * ph;
    const long double disc = std::sqrt(std::max(0.0L, b * b - 4.0L * a * c));
    long double lo = (-b - disc) / (2.0L * a);
    long double hi = (-b + disc) / (2.0L * a);
    if (s == 0) lo = 0.0L;
    if (s == n) hi = 1.0L;
    return {lo, hi};
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

inline CaseTable with_outcomes(CaseTable t, std::span<const int> y) {
    for (std::size_t i = 0; i < t.size(); ++i) t.cases[i].outcome = y[i];
    return t;
}

// One spec evaluated the long way: full preprocessing from the raw table
// with the spec's own seed, then the test. Degenerate pipelines give p = 1.
inline double naive_spec_pvalue(const CaseTable& table, const Spec& spec, std::uint64_t seed) {
    try {
        const auto pre = preprocess(table, spec.preproc, spec_seed(seed, spec.spec_id));
        return run_test(pre.frame, spec.coding).p_value;
    } catch (const DataError&) {
        return 1.0;
    }
}

inline std::vector<double> naive_run_all(const CaseTable& table, const SpecTree& tree, std::uint64_t seed) {
    std::vector<double> p;
    for (const auto& s : enumerate(tree)) p.push_back(naive_spec_pvalue(table, s, seed));
    return p;
}

// Exact minP by full enumeration: over every distinct arrangement of the
// outcome labels (the observed one included), the share whose minimum
// p-value is at or below p_i.
inline std::vector<double> exact_minp_oracle(const CaseTable& table, const SpecTree& tree, std::uint64_t seed) {
    const auto observed_y = table.outcomes();
    const auto observed = naive_run_all(table, tree, seed);
    std::vector<int> y = observed_y;
    std::sort(y.begin(), y.end());
    std::vector<double> minima;
    do {
        const auto p = naive_run_all(with_outcomes(table, y), tree, seed);
        minima.push_back(*std::min_element(p.begin(), p.end()));
    } while (std::next_permutation(y.begin(), y.end()));
    std::vector<double> out;
    for (double pi : observed) {
        const auto count = std::count_if(minima.begin(), minima.end(), [&](double mn) { return mn <= pi + 1e-12; });
        out.push_back(static_cast<double>(count) / static_cast<double>(minima.size()));
    }
    return out;
}

// Small table with a hand-picked missing pattern, used where exhaustive
// enumeration must stay cheap.
inline CaseTable tiny_table(std::size_t n_cases, std::uint64_t seed) {
    GenConfig g;
    g.n_cases = n_cases;
    g.min_measurements = 3;
    g.max_measurements = 5;
    g.missing_rate = 0.3;
    g.seed = seed;
    return generate(g);
}

} // namespace rdof::oracle
