#pragma once

// Exposure codings and their tests: logistic-regression Wald test on the
// continuous exposure, Fisher's exact test on the 200 mmHg split, and the
// Freeman-Halton extension on the {<200, [200,250), >=250} split.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "rdof/error.hpp"
#include "rdof/preprocess.hpp"

namespace rdof {

enum class Coding { Continuous, Binary200, Ternary200_250 };

inline std::string_view to_string(Coding c) {
    switch (c) {
    case Coding::Continuous: return "continuous";
    case Coding::Binary200: return "binary_200";
    case Coding::Ternary200_250: return "ternary_200_250";
    }
    return "?";
}

inline constexpr double kLowCut = 200.0;
inline constexpr double kHighCut = 250.0;

struct TestResult {
    double p_value = 1.0;
    double statistic = 0.0;  // Wald z, or the observed table's point probability
    std::string method_tag;
    bool converged = true;
    std::string notes;
};

// Outcome rows (0, 1) by exposure-category columns, 2 or 3 columns.
struct ContingencyTable {
    std::size_t k = 2;
    std::array<std::array<std::int64_t, 3>, 2> counts{};

    std::int64_t row_total(std::size_t r) const noexcept {
        std::int64_t s = 0;
        for (std::size_t j = 0; j < k; ++j) s += counts[r][j];
        return s;
    }
    std::int64_t col_total(std::size_t j) const noexcept { return counts[0][j] + counts[1][j]; }
    std::int64_t total() const noexcept { return row_total(0) + row_total(1); }

    friend bool operator==(const ContingencyTable&, const ContingencyTable&) = default;
};

inline std::size_t category_of(double exposure, std::span<const double> cuts) noexcept {
    std::size_t c = 0;
    while (c < cuts.size() && exposure >= cuts[c]) ++c;
    return c;
}

inline ContingencyTable tabulate(const AnalysisFrame& frame, std::span<const double> cuts) {
    ContingencyTable t;
    t.k = cuts.size() + 1;
    for (const auto& r : frame.rows) ++t.counts[r.outcome ? 1 : 0][category_of(r.exposure, cuts)];
    return t;
}

// Column 0: exposure < cut; column 1: exposure >= cut.
inline ContingencyTable dichotomize(const AnalysisFrame& frame, double cut = kLowCut) {
    const std::array<double, 1> cuts{cut};
    return tabulate(frame, cuts);
}

inline ContingencyTable trichotomize(const AnalysisFrame& frame, double low = kLowCut, double high = kHighCut) {
    const std::array<double, 2> cuts{low, high};
    return tabulate(frame, cuts);
}

namespace detail {

inline double log_choose(std::int64_t n, std::int64_t k) {
    return std::lgamma(static_cast<double>(n + 1)) - std::lgamma(static_cast<double>(k + 1)) -
           std::lgamma(static_cast<double>(n - k + 1));
}

} // namespace detail

// Relative tolerance when deciding whether a table is "no more probable"
// than the observed one.
inline constexpr double kFisherTieTolerance = 1e-7;

// Null distribution of all 2 x K tables with fixed margins. Point
// probabilities are sorted once so any observed table's two-sided p-value
// is a binary search plus a prefix sum. Zero columns are dropped.
class FisherReference {
public:
    // `ones`: outcome-1 row total; `cols`: column totals (zeros allowed).
    FisherReference(std::int64_t ones, std::span<const std::int64_t> cols) {
        for (auto c : cols)
            if (c > 0) cols_.push_back(c);
        ones_ = ones;
        const std::int64_t n = std::accumulate(cols_.begin(), cols_.end(), std::int64_t{0});
        if (cols_.size() < 2 || ones <= 0 || ones >= n) {
            degenerate_ = true;
            return;
        }
        log_denominator_ = detail::log_choose(n, ones);
        for (std::size_t j = 0; j < cols_.size(); ++j) {
            std::vector<double> lc(static_cast<std::size_t>(cols_[j] + 1));
            for (std::int64_t x = 0; x <= cols_[j]; ++x) lc[static_cast<std::size_t>(x)] = detail::log_choose(cols_[j], x);
            log_choose_.push_back(std::move(lc));
        }
        enumerate(0, ones, 0.0);
        std::sort(probs_.begin(), probs_.end());
        prefix_.resize(probs_.size() + 1, 0.0);
        for (std::size_t i = 0; i < probs_.size(); ++i) prefix_[i + 1] = prefix_[i] + probs_[i];
    }

    bool degenerate() const noexcept { return degenerate_; }
    std::size_t n_tables() const noexcept { return probs_.size(); }

    // Point probability of the table whose outcome-1 row is `ones_row`
    // (one entry per nonzero column, in column order).
    double point_probability(std::span<const std::int64_t> ones_row) const {
        double lp = -log_denominator_;
        for (std::size_t j = 0; j < cols_.size(); ++j) lp += log_choose_[j][static_cast<std::size_t>(ones_row[j])];
        return std::exp(lp);
    }

    double p_value(double observed_probability) const {
        if (degenerate_) return 1.0;
        const double threshold = observed_probability * (1.0 + kFisherTieTolerance);
        const auto it = std::upper_bound(probs_.begin(), probs_.end(), threshold);
        return std::min(1.0, prefix_[static_cast<std::size_t>(it - probs_.begin())]);
    }

private:
    void enumerate(std::size_t j, std::int64_t remaining, double lp) {
        if (j + 1 == cols_.size()) {
            if (remaining <= cols_[j])
                probs_.push_back(std::exp(lp + log_choose_[j][static_cast<std::size_t>(remaining)] - log_denominator_));
            return;
        }
        std::int64_t rest = 0;
        for (std::size_t t = j + 1; t < cols_.size(); ++t) rest += cols_[t];
        const std::int64_t lo = std::max<std::int64_t>(0, remaining - rest);
        const std::int64_t hi = std::min(cols_[j], remaining);
        for (std::int64_t x = lo; x <= hi; ++x) enumerate(j + 1, remaining - x, lp + log_choose_[j][static_cast<std::size_t>(x)]);
    }

    std::vector<std::int64_t> cols_;
    std::int64_t ones_ = 0;
    bool degenerate_ = false;
    double log_denominator_ = 0.0;
    std::vector<std::vector<double>> log_choose_;
    std::vector<double> probs_;
    std::vector<double> prefix_;
};

// Memo of references keyed by margins. Not thread-safe; use one per worker.
class FisherCache {
public:
    const FisherReference& get(std::int64_t ones, std::span<const std::int64_t> cols) {
        Key key{ones, {0, 0, 0}};
        std::size_t w = 0;
        for (auto c : cols)
            if (c > 0) key.cols[w++] = c;
        auto it = refs_.find(key);
        if (it == refs_.end()) it = refs_.emplace(key, FisherReference(ones, std::span(key.cols.data(), w))).first;
        return it->second;
    }
    std::size_t size() const noexcept { return refs_.size(); }

private:
    struct Key {
        std::int64_t ones;
        std::array<std::int64_t, 3> cols;
        bool operator<(const Key& o) const noexcept { return std::tie(ones, cols) < std::tie(o.ones, o.cols); }
    };
    std::map<Key, FisherReference> refs_;
};

// Two-sided exact test: sum of the probabilities of all tables with the
// observed margins that are no more probable than the observed table. A
// zero row, or fewer than two nonempty columns, gives p = 1.
inline TestResult fisher_exact(const ContingencyTable& table, FisherCache* cache = nullptr) {
    TestResult res;
    res.method_tag = table.k == 2 ? "fisher_2x2" : "fisher_2x3";
    std::array<std::int64_t, 3> cols{};
    std::array<std::int64_t, 3> ones_row{};
    std::size_t nonzero = 0;
    for (std::size_t j = 0; j < table.k; ++j) {
        if (table.counts[0][j] < 0 || table.counts[1][j] < 0) throw DataError("negative contingency count");
        cols[j] = table.col_total(j);
        if (cols[j] > 0) ones_row[nonzero++] = table.counts[1][j];
    }
    if (table.total() <= 0) throw DataError("empty contingency table");
    const std::int64_t ones = table.row_total(1);
    if (nonzero < 2 || ones == 0 || ones == table.total()) {
        res.p_value = 1.0;
        res.statistic = 1.0;
        res.notes = "degenerate margins";
        return res;
    }
    const std::span<const std::int64_t> col_span(cols.data(), table.k);
    auto evaluate = [&](const FisherReference& ref) {
        res.statistic = ref.point_probability(std::span(ones_row.data(), nonzero));
        res.p_value = ref.p_value(res.statistic);
    };
    if (cache) {
        evaluate(cache->get(ones, col_span));
    } else {
        evaluate(FisherReference(ones, col_span));
    }
    return res;
}

inline double normal_upper_tail(double z) { return 0.5 * std::erfc(z / std::numbers::sqrt2); }

struct LogisticFit {
    double intercept = 0.0;
    double slope = 0.0;
    double slope_se = 0.0;
    int iterations = 0;
    bool converged = false;
    bool separated = false;
};

inline constexpr int kIrlsMaxIterations = 50;
inline constexpr double kIrlsTolerance = 1e-10;
inline constexpr double kSeparationEpsilon = 1e-10;

// Newton/IRLS fit of y ~ 1 + x. The exposure is centred and scaled
// internally (the tolerance applies to the standardized coefficients) and
// the estimates are mapped back to the original scale.
inline LogisticFit fit_logistic(std::span<const double> x, std::span<const int> y) {
    const std::size_t n = x.size();
    if (n != y.size()) throw DataError("exposure/outcome length mismatch");
    const auto ones = std::count(y.begin(), y.end(), 1);
    if (n < 2 || ones == 0 || static_cast<std::size_t>(ones) == n) throw DataError("degenerate regression input");
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    if (!(sd > 0.0) || !std::isfinite(sd)) throw DataError("degenerate regression input");

    std::vector<double> z(n);
    for (std::size_t i = 0; i < n; ++i) z[i] = (x[i] - mean) / sd;

    LogisticFit fit;
    double b0 = 0.0, b1 = 0.0;
    double h00 = 0.0, h01 = 0.0, h11 = 0.0;
    auto accumulate = [&](double& g0, double& g1, bool& all_extreme) {
        h00 = h01 = h11 = g0 = g1 = 0.0;
        all_extreme = true;
        for (std::size_t i = 0; i < n; ++i) {
            const double mu = 1.0 / (1.0 + std::exp(-(b0 + b1 * z[i])));
            const double w = mu * (1.0 - mu);
            if (mu > kSeparationEpsilon && mu < 1.0 - kSeparationEpsilon) all_extreme = false;
            const double r = static_cast<double>(y[i]) - mu;
            g0 += r;
            g1 += r * z[i];
            h00 += w;
            h01 += w * z[i];
            h11 += w * z[i] * z[i];
        }
    };

    for (fit.iterations = 1; fit.iterations <= kIrlsMaxIterations; ++fit.iterations) {
        double g0 = 0.0, g1 = 0.0;
        bool extreme = false;
        accumulate(g0, g1, extreme);
        if (extreme) {
            fit.separated = true;
            break;
        }
        const double det = h00 * h11 - h01 * h01;
        if (!(det > 0.0) || !std::isfinite(det)) break;
        const double d0 = (h11 * g0 - h01 * g1) / det;
        const double d1 = (h00 * g1 - h01 * g0) / det;
        b0 += d0;
        b1 += d1;
        if (!std::isfinite(b0) || !std::isfinite(b1)) break;
        if (std::max(std::abs(d0), std::abs(d1)) < kIrlsTolerance) {
            fit.converged = true;
            break;
        }
    }
    if (fit.converged) {
        double g0 = 0.0, g1 = 0.0;
        bool extreme = false;
        accumulate(g0, g1, extreme);
        const double det = h00 * h11 - h01 * h01;
        if (extreme) {
            fit.converged = false;
            fit.separated = true;
        } else if (!(det > 0.0)) {
            fit.converged = false;
        } else {
            const double se_std = std::sqrt(h00 / det);
            fit.slope = b1 / sd;
            fit.slope_se = se_std / sd;
            fit.intercept = b0 - b1 * mean / sd;
        }
    }
    return fit;
}

// Wald test of the slope. Separation or non-convergence gives the
// conservative p = 1 with converged = false.
inline TestResult logistic_wald(std::span<const double> x, std::span<const int> y) {
    const auto fit = fit_logistic(x, y);
    TestResult res;
    res.method_tag = "logistic_wald";
    if (!fit.converged) {
        res.converged = false;
        res.p_value = 1.0;
        res.notes = fit.separated ? "separation" : "no convergence";
        return res;
    }
    res.statistic = fit.slope / fit.slope_se;
    res.p_value = std::clamp(2.0 * normal_upper_tail(std::abs(res.statistic)), 0.0, 1.0);
    return res;
}

inline TestResult logistic_wald(const AnalysisFrame& frame) {
    std::vector<double> x;
    std::vector<int> y;
    x.reserve(frame.size());
    y.reserve(frame.size());
    for (const auto& r : frame.rows) {
        x.push_back(r.exposure);
        y.push_back(r.outcome);
    }
    return logistic_wald(x, y);
}

inline std::string_view method_tag(Coding coding) {
    switch (coding) {
    case Coding::Continuous: return "logistic_wald";
    case Coding::Binary200: return "fisher_2x2";
    case Coding::Ternary200_250: return "fisher_2x3";
    }
    return "?";
}

// Never throws on degenerate data: such inputs give p = 1 with a note.
inline TestResult run_test(const AnalysisFrame& frame, Coding coding, FisherCache* cache = nullptr) {
    if (frame.size() == 0) {
        return {1.0, 0.0, std::string(method_tag(coding)), true, "empty frame"};
    }
    switch (coding) {
    case Coding::Continuous:
        try {
            return logistic_wald(frame);
        } catch (const DataError& e) {
            return {1.0, 0.0, "logistic_wald", true, e.what()};
        }
    case Coding::Binary200: return fisher_exact(dichotomize(frame), cache);
    case Coding::Ternary200_250: return fisher_exact(trichotomize(frame), cache);
    }
    throw std::logic_error("unknown coding");
}

} // namespace rdof
