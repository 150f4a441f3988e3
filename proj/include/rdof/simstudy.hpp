#pragma once

// Simulation harness: family-wise error rate under the global null against
// sample size, and the proportion of significant specifications under a
// real association, for unadjusted, Bonferroni and minP p-values.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <ostream>
#include <string>
#include <vector>

#include "rdof/adjust.hpp"
#include "rdof/dataset.hpp"
#include "rdof/multiverse.hpp"
#include "rdof/parallel.hpp"
#include "rdof/rng.hpp"

namespace rdof {

// Inverse standard normal CDF (Wichura, AS 241, double precision variant).
inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) {
        if (p == 0.0) return -INFINITY;
        if (p == 1.0) return INFINITY;
        return NAN;
    }
    const double q = p - 0.5;
    if (std::abs(q) <= 0.425) {
        const double r = 0.180625 - q * q;
        return q * (((((((r * 2509.0809287301226727 + 33430.575583588128105) * r + 67265.770927008700853) * r +
                        45921.953931549871457) * r + 13731.693765509461125) * r + 1971.5909503065514427) * r +
                     133.14166789178437745) * r + 3.387132872796366608) /
               (((((((r * 5226.495278852545925 + 28729.085735721942674) * r + 39307.89580009271061) * r +
                    21213.794301586595867) * r + 5394.1960214247511077) * r + 687.1870074920579083) * r +
                 42.313330701600911252) * r + 1.0);
    }
    double r = q < 0 ? p : 1.0 - p;
    r = std::sqrt(-std::log(r));
    double val;
    if (r <= 5.0) {
        r -= 1.6;
        val = (((((((r * 7.7454501427834140764e-4 + 0.0227238449892691845833) * r + 0.24178072517745061177) * r +
                   1.27045825245236838258) * r + 3.64784832476320460504) * r + 5.7694972214606914055) * r +
                4.6303378461565452959) * r + 1.42343711074968357734) /
              (((((((r * 1.05075007164441684324e-9 + 5.475938084995344946e-4) * r + 0.0151986665636164571966) * r +
                   0.14810397642748007459) * r + 0.68976733498510000455) * r + 1.6763848301838038494) * r +
                2.05319162663775882187) * r + 1.0);
    } else {
        r -= 5.0;
        val = (((((((r * 2.01033439929228813265e-7 + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r +
                   0.026532189526576123093) * r + 0.29656057182850489123) * r + 1.7848265399172913358) * r +
                5.4637849111641143699) * r + 6.6579046435011037772) /
              (((((((r * 2.04426310338993978564e-15 + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5) * r +
                   7.868691311456132591e-4) * r + 0.0148753612908506148525) * r + 0.13692988092273580531) * r +
                0.59983220655588793769) * r + 1.0);
    }
    return q < 0.0 ? -val : val;
}

struct Interval {
    double low = 0.0;
    double high = 1.0;
};

// Wilson score interval for a binomial proportion with critical value z.
inline Interval newcombe_ci_z(std::size_t successes, std::size_t trials, double z) {
    if (trials < 1 || successes > trials) throw std::invalid_argument("newcombe_ci needs 0 <= successes <= trials, trials >= 1");
    const double n = static_cast<double>(trials);
    const double p = static_cast<double>(successes) / n;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / n;
    const double center = (p + z2 / (2.0 * n)) / denom;
    const double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
    Interval ci{std::max(0.0, center - half), std::min(1.0, center + half)};
    if (successes == 0) ci.low = 0.0;
    if (successes == trials) ci.high = 1.0;
    return ci;
}

// `level` is the two-sided coverage, e.g. 0.95.
inline Interval newcombe_ci(std::size_t successes, std::size_t trials, double level = 0.95) {
    if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("confidence level must lie in (0, 1)");
    return newcombe_ci_z(successes, trials, normal_quantile((1.0 + level) / 2.0));
}

enum class Method { Unadjusted, MinP, Bonferroni };

inline std::string_view to_string(Method m) {
    switch (m) {
    case Method::Unadjusted: return "unadjusted";
    case Method::MinP: return "minp";
    case Method::Bonferroni: return "bonferroni";
    }
    return "?";
}

inline constexpr std::array<Method, 3> kMethods{Method::Unadjusted, Method::MinP, Method::Bonferroni};

struct StudyRow {
    std::string study;
    Method method = Method::Unadjusted;
    std::size_t n = 0;
    double alpha = 0.05;
    double estimate = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    std::size_t runs = 0;
    std::size_t B = 0;
    std::uint64_t seed = 0;
};

struct StudyResult {
    std::vector<StudyRow> rows;

    const StudyRow& find(Method method, std::size_t n, double alpha) const {
        for (const auto& r : rows)
            if (r.method == method && r.n == n && r.alpha == alpha) return r;
        throw std::out_of_range("no study row for " + std::string(to_string(method)) + " n=" + std::to_string(n));
    }
    const StudyRow& find(Method method, std::size_t n) const {
        for (const auto& r : rows)
            if (r.method == method && r.n == n) return r;
        throw std::out_of_range("no study row for " + std::string(to_string(method)) + " n=" + std::to_string(n));
    }
};

// `study,method,n,alpha,estimate,ci_low,ci_high,runs,B,seed`
inline void write_study_csv(const StudyResult& res, std::ostream& out) {
    out << "study,method,n,alpha,estimate,ci_low,ci_high,runs,B,seed\n";
    for (const auto& r : res.rows)
        out << r.study << ',' << to_string(r.method) << ',' << r.n << ',' << format_double(r.alpha) << ','
            << format_double(r.estimate) << ',' << format_double(r.ci_low) << ',' << format_double(r.ci_high) << ','
            << r.runs << ',' << r.B << ',' << r.seed << '\n';
}

// Called with (completed runs, total runs); may be invoked from any worker
// thread, but never concurrently.
using ProgressFn = std::function<void(std::size_t, std::size_t)>;

// Size of the reference table that null and signal draws are taken from.
inline constexpr std::size_t kReferenceCases = 3163;

struct FwerStudyConfig {
    std::vector<std::size_t> sample_sizes{100, 300, 1000};
    std::size_t runs = 200;
    std::size_t B = 200;
    double alpha = 0.05;
    std::uint64_t master_seed = 20240101;
    unsigned workers = 1;
    GenConfig reference{};  // n_cases and seed are overridden

    static FwerStudyConfig paper_scale() {
        FwerStudyConfig c;
        c.sample_sizes = {100, 200, 300, 500, 2000, 3000};
        c.runs = 1000;
        c.B = 1000;
        return c;
    }

    void check() const {
        if (runs < 1) throw ConfigError("runs must be >= 1");
        if (B < 1) throw ConfigError("B must be >= 1");
        if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
        if (sample_sizes.empty()) throw ConfigError("no sample sizes given");
        for (auto n : sample_sizes)
            if (n < 2 || n > kReferenceCases) throw ConfigError("sample size " + std::to_string(n) + " outside [2, " + std::to_string(kReferenceCases) + "]");
    }
};

struct PowerStudyConfig {
    std::vector<std::size_t> sample_sizes{50, 100, 150, 200, 250, 300};
    std::vector<double> alphas{0.01, 0.05, 0.1};
    std::size_t runs = 200;
    std::size_t B = 200;
    std::uint64_t master_seed = 20240102;
    unsigned workers = 1;
    GenConfig reference = [] {
        GenConfig g;
        g.effect_size = 4.0;
        return g;
    }();

    static PowerStudyConfig paper_scale() {
        PowerStudyConfig c;
        c.sample_sizes = {50, 100, 150, 200, 250, 300, 500};
        c.runs = 1000;
        c.B = 1000;
        return c;
    }

    void check() const {
        if (runs < 1) throw ConfigError("runs must be >= 1");
        if (B < 1) throw ConfigError("B must be >= 1");
        if (alphas.empty()) throw ConfigError("no alpha levels given");
        for (double a : alphas)
            if (!(a > 0.0 && a < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
        if (sample_sizes.empty()) throw ConfigError("no sample sizes given");
        for (auto n : sample_sizes)
            if (n < 2 || n > kReferenceCases) throw ConfigError("sample size " + std::to_string(n) + " outside [2, " + std::to_string(kReferenceCases) + "]");
    }
};

inline CaseTable reference_table(GenConfig gen, std::uint64_t master_seed) {
    gen.n_cases = kReferenceCases;
    gen.seed = derive_seed(master_seed, {0x726566ULL});
    return generate(gen);
}

// Seeds of run r at size n: case draw, outcome draw, adjustment.
struct RunSeeds {
    std::uint64_t draw, outcome, adjust;
};

inline RunSeeds run_seeds(std::uint64_t master_seed, std::size_t n, std::size_t run) {
    const auto base = derive_seed(master_seed, {static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(run)});
    return {derive_seed(base, {1}), derive_seed(base, {2}), derive_seed(base, {3})};
}

namespace detail {

struct RunAdjusted {
    std::vector<double> raw, minp, bonf;
};

inline RunAdjusted adjust_one(const CaseTable& table, const SpecTree& tree, std::size_t B, std::uint64_t seed) {
    const PreparedMultiverse prepared(table, tree, seed, 1);
    const auto y = table.outcomes();
    RunAdjusted r;
    r.raw.resize(prepared.m());
    FisherCache cache;
    prepared.evaluate_pvalues(y, cache, r.raw);
    const auto perm = permute_pvalues(prepared, y, B, seed, 1);
    r.minp = minp_adjust(r.raw, perm);
    r.bonf = bonferroni(r.raw);
    return r;
}

template <typename Fn>
void for_each_run(std::size_t total, unsigned workers, const ProgressFn& progress, Fn&& fn) {
    std::atomic<std::size_t> done{0};
    std::mutex progress_mutex;
    parallel_for(total, workers, [&](std::size_t t) {
        fn(t);
        const auto d = done.fetch_add(1) + 1;
        if (progress) {
            std::lock_guard lock(progress_mutex);
            progress(d, total);
        }
    });
}

} // namespace detail

// Per run: n cases drawn without replacement from the reference table,
// outcomes replaced by iid Bernoulli(0.5), and a family-wise error counted
// when any of the m p-values (raw or adjusted) falls below alpha.
inline StudyResult run_fwer_study(const FwerStudyConfig& cfg, const SpecTree& tree, const ProgressFn& progress = {}) {
    cfg.check();
    check(tree);
    const auto ref = reference_table(cfg.reference, cfg.master_seed);
    const std::size_t S = cfg.sample_sizes.size();
    // hits[(s * runs + r) * 3 + method]
    std::vector<std::uint8_t> hits(S * cfg.runs * 3, 0);
    detail::for_each_run(S * cfg.runs, cfg.workers, progress, [&](std::size_t t) {
        const std::size_t s = t / cfg.runs, r = t % cfg.runs;
        const auto seeds = run_seeds(cfg.master_seed, cfg.sample_sizes[s], r);
        const auto sub = null_scramble(draw_cases(ref, cfg.sample_sizes[s], seeds.draw), seeds.outcome);
        const auto adj = detail::adjust_one(sub, tree, cfg.B, seeds.adjust);
        auto any_below = [&](const std::vector<double>& p) {
            return std::any_of(p.begin(), p.end(), [&](double v) { return v < cfg.alpha; });
        };
        hits[t * 3 + 0] = any_below(adj.raw);
        hits[t * 3 + 1] = any_below(adj.minp);
        hits[t * 3 + 2] = any_below(adj.bonf);
    });

    StudyResult res;
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t k = 0; k < kMethods.size(); ++k) {
            std::size_t count = 0;
            for (std::size_t r = 0; r < cfg.runs; ++r) count += hits[(s * cfg.runs + r) * 3 + k];
            const auto ci = newcombe_ci(count, cfg.runs, 0.95);
            const double est = static_cast<double>(count) / static_cast<double>(cfg.runs);
            res.rows.push_back({"fwer", kMethods[k], cfg.sample_sizes[s], cfg.alpha, est, ci.low, ci.high, cfg.runs, cfg.B, cfg.master_seed});
        }
    return res;
}

// Per run: n cases (with their outcomes) drawn without replacement from a
// signal-bearing reference table; for each method and alpha, the fraction
// of the m specs significant. Estimates are run averages with a normal
// 95% interval on the mean.
inline StudyResult run_power_study(const PowerStudyConfig& cfg, const SpecTree& tree, const ProgressFn& progress = {}) {
    cfg.check();
    check(tree);
    const auto ref = reference_table(cfg.reference, cfg.master_seed);
    const std::size_t S = cfg.sample_sizes.size(), A = cfg.alphas.size();
    // prop[((s * runs + r) * A + a) * 3 + method]
    std::vector<double> prop(S * cfg.runs * A * 3, 0.0);
    detail::for_each_run(S * cfg.runs, cfg.workers, progress, [&](std::size_t t) {
        const std::size_t s = t / cfg.runs, r = t % cfg.runs;
        const auto seeds = run_seeds(cfg.master_seed, cfg.sample_sizes[s], r);
        const auto sub = draw_cases(ref, cfg.sample_sizes[s], seeds.draw);
        const auto adj = detail::adjust_one(sub, tree, cfg.B, seeds.adjust);
        const auto m = static_cast<double>(adj.raw.size());
        for (std::size_t a = 0; a < A; ++a) {
            auto frac = [&](const std::vector<double>& p) {
                return static_cast<double>(std::count_if(p.begin(), p.end(), [&](double v) { return v < cfg.alphas[a]; })) / m;
            };
            double* out = &prop[(t * A + a) * 3];
            out[0] = frac(adj.raw);
            out[1] = frac(adj.minp);
            out[2] = frac(adj.bonf);
        }
    });

    const double z = normal_quantile(0.975);
    StudyResult res;
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < A; ++a)
            for (std::size_t k = 0; k < kMethods.size(); ++k) {
                double sum = 0.0;
                for (std::size_t r = 0; r < cfg.runs; ++r) sum += prop[((s * cfg.runs + r) * A + a) * 3 + k];
                const double mean = sum / static_cast<double>(cfg.runs);
                double ss = 0.0;
                for (std::size_t r = 0; r < cfg.runs; ++r) {
                    const double d = prop[((s * cfg.runs + r) * A + a) * 3 + k] - mean;
                    ss += d * d;
                }
                const double se = cfg.runs > 1 ? std::sqrt(ss / static_cast<double>(cfg.runs - 1) / static_cast<double>(cfg.runs)) : 0.0;
                res.rows.push_back({"power", kMethods[k], cfg.sample_sizes[s], cfg.alphas[a], mean,
                                    std::clamp(mean - z * se, 0.0, mean), std::clamp(mean + z * se, mean, 1.0), cfg.runs, cfg.B,
                                    cfg.master_seed});
            }
    return res;
}

} // namespace rdof
