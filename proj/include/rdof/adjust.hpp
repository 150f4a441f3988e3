#pragma once

// Multiplicity adjustment across the specifications of one multiverse:
// Bonferroni, Holm, and the single-step minP adjustment whose null
// distribution of the minimal p-value is approximated by permuting the
// outcome labels.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdof/dataset.hpp"
#include "rdof/multiverse.hpp"
#include "rdof/parallel.hpp"
#include "rdof/rng.hpp"

namespace rdof {

inline std::vector<double> bonferroni(std::span<const double> p) {
    if (p.empty()) throw std::invalid_argument("bonferroni of an empty vector");
    const auto m = static_cast<double>(p.size());
    std::vector<double> out(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) out[i] = std::min(m * p[i], 1.0);
    return out;
}

// Step-down: the j-th smallest p-value is multiplied by (m - j + 1), then a
// running maximum enforces monotonicity. Ties keep their input order.
inline std::vector<double> holm(std::span<const double> p) {
    if (p.empty()) throw std::invalid_argument("holm of an empty vector");
    const std::size_t m = p.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    std::vector<double> out(m);
    double running = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
        const double adj = std::min(static_cast<double>(m - j) * p[order[j]], 1.0);
        running = std::max(running, adj);
        out[order[j]] = running;
    }
    return out;
}

inline std::vector<double> bonferroni(const PValueVector& v) { return bonferroni(v.p_values()); }
inline std::vector<double> holm(const PValueVector& v) { return holm(v.p_values()); }

// B x m p-values from relabelled data, row-major.
struct PermutationMatrix {
    std::size_t B = 0;
    std::size_t m = 0;
    std::vector<double> pvals;
    std::vector<double> row_minima;
    std::uint64_t master_seed = 0;

    std::span<const double> row(std::size_t b) const { return {pvals.data() + b * m, m}; }
    double at(std::size_t b, std::size_t i) const { return pvals[b * m + i]; }
};

inline constexpr double kMinPTieTolerance = 1e-12;

// Seed of permutation b (1-based) under `master_seed`; disjoint from spec seeds.
inline std::uint64_t permutation_seed(std::uint64_t master_seed, std::size_t b) {
    return derive_seed(master_seed, {0x7065726d75746eULL, static_cast<std::uint64_t>(b)});
}

// Shuffles the per-case outcome labels; the multiset of outcomes is kept.
inline std::vector<int> permuted_outcomes(std::span<const int> outcomes, std::uint64_t seed) {
    std::vector<int> y(outcomes.begin(), outcomes.end());
    Rng rng(seed);
    rng.shuffle(std::span(y));
    return y;
}

namespace detail {

inline void fill_row_minima(PermutationMatrix& pm) {
    pm.row_minima.resize(pm.B);
    for (std::size_t b = 0; b < pm.B; ++b) {
        const auto r = pm.row(b);
        pm.row_minima[b] = *std::min_element(r.begin(), r.end());
    }
}

} // namespace detail

// Evaluates all specs on `relabellings` (one outcome vector per row).
inline PermutationMatrix evaluate_relabellings(const PreparedMultiverse& prepared,
                                               const std::vector<std::vector<int>>& relabellings,
                                               std::uint64_t master_seed, unsigned workers = 1) {
    PermutationMatrix pm;
    pm.B = relabellings.size();
    pm.m = prepared.m();
    pm.master_seed = master_seed;
    pm.pvals.assign(pm.B * pm.m, 1.0);
    parallel_for_with_state(pm.B, workers, [] { return FisherCache{}; }, [&](FisherCache& cache, std::size_t b) {
        prepared.evaluate_pvalues(relabellings[b], cache, std::span(pm.pvals.data() + b * pm.m, pm.m));
    });
    detail::fill_row_minima(pm);
    return pm;
}

// B random relabellings; row b uses permutation_seed(master_seed, b + 1).
inline PermutationMatrix permute_pvalues(const PreparedMultiverse& prepared, std::span<const int> outcomes, std::size_t B,
                                         std::uint64_t master_seed, unsigned workers = 1) {
    if (B < 1) throw ConfigError("number of permutations B must be >= 1");
    PermutationMatrix pm;
    pm.B = B;
    pm.m = prepared.m();
    pm.master_seed = master_seed;
    pm.pvals.assign(B * pm.m, 1.0);
    parallel_for_with_state(B, workers, [] { return FisherCache{}; }, [&](FisherCache& cache, std::size_t b) {
        const auto y = permuted_outcomes(outcomes, permutation_seed(master_seed, b + 1));
        prepared.evaluate_pvalues(y, cache, std::span(pm.pvals.data() + b * pm.m, pm.m));
    });
    detail::fill_row_minima(pm);
    return pm;
}

// Spec-stage seeds equal `master_seed`, matching run_all(table, tree, master_seed).
inline PermutationMatrix permute_pvalues(const CaseTable& table, const SpecTree& tree, std::size_t B,
                                         std::uint64_t master_seed, unsigned workers = 1) {
    const PreparedMultiverse prepared(table, tree, master_seed, workers);
    const auto y = table.outcomes();
    return permute_pvalues(prepared, y, B, master_seed, workers);
}

// Every distinct outcome arrangement except the observed one, in
// lexicographic order. With these B = C(n, k) - 1 rows the +1-corrected
// minP estimate equals the exact permutation distribution of the minimum.
inline std::vector<std::vector<int>> distinct_relabellings(std::span<const int> outcomes, std::size_t limit = 5'000'000) {
    std::vector<int> y(outcomes.begin(), outcomes.end());
    std::sort(y.begin(), y.end());
    const std::vector<int> observed(outcomes.begin(), outcomes.end());
    std::vector<std::vector<int>> out;
    do {
        if (y != observed) {
            if (out.size() >= limit) throw ConfigError("too many distinct relabellings for exhaustive enumeration");
            out.push_back(y);
        }
    } while (std::next_permutation(y.begin(), y.end()));
    return out;
}

inline PermutationMatrix exhaustive_permutations(const PreparedMultiverse& prepared, std::span<const int> outcomes,
                                                 unsigned workers = 1) {
    const auto rel = distinct_relabellings(outcomes);
    if (rel.empty()) throw DataError("exhaustive permutation needs both outcome levels");
    return evaluate_relabellings(prepared, rel, 0, workers);
}

// minp[i] = (1 + #{b : min_b <= p_i}) / (B + 1), comparisons with an
// absolute tolerance of 1e-12.
inline std::vector<double> minp_adjust(std::span<const double> p, const PermutationMatrix& perm) {
    if (perm.m != p.size())
        throw std::invalid_argument("dimension mismatch: " + std::to_string(p.size()) + " p-values vs " + std::to_string(perm.m) + " permutation columns");
    if (perm.B < 1 || perm.row_minima.size() != perm.B) throw std::invalid_argument("permutation matrix has no rows");
    std::vector<double> minima = perm.row_minima;
    std::sort(minima.begin(), minima.end());
    const double denom = static_cast<double>(perm.B + 1);
    std::vector<double> out(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        const auto count = static_cast<std::size_t>(std::upper_bound(minima.begin(), minima.end(), p[i] + kMinPTieTolerance) - minima.begin());
        out[i] = static_cast<double>(1 + count) / denom;
    }
    return out;
}

inline std::vector<double> minp_adjust(const PValueVector& v, const PermutationMatrix& perm) {
    return minp_adjust(v.p_values(), perm);
}

struct AdjustmentReport {
    PValueVector raw;
    std::vector<double> bonferroni;
    std::vector<double> holm;
    std::vector<double> minp;
    double alpha = 0.05;
    std::vector<bool> rejected_minp;
    std::size_t B = 0;
    std::uint64_t master_seed = 0;

    std::size_t m() const noexcept { return raw.m(); }
    // Index of p_(1) (ties to the smallest spec id).
    std::size_t argmin() const { return min_p(std::span<const double>(raw.p_values())).first; }
};

inline AdjustmentReport assemble_report(PValueVector raw, const PermutationMatrix& perm, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
    AdjustmentReport rep;
    const auto p = raw.p_values();
    rep.bonferroni = bonferroni(p);
    rep.holm = holm(p);
    rep.minp = minp_adjust(p, perm);
    rep.alpha = alpha;
    for (double v : rep.minp) rep.rejected_minp.push_back(v < alpha);
    rep.B = perm.B;
    rep.master_seed = perm.master_seed;
    rep.raw = std::move(raw);
    return rep;
}

// Raw p-values, B permutations, and all three adjustments. The same
// master seed drives the spec stages and (through disjoint substreams) the
// permutations.
inline AdjustmentReport adjust_all(const CaseTable& table, const SpecTree& tree, std::size_t B, double alpha,
                                   std::uint64_t master_seed, unsigned workers = 1) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
    const PreparedMultiverse prepared(table, tree, master_seed, workers);
    const auto y = table.outcomes();
    auto raw = prepared.run(y);
    const auto perm = permute_pvalues(prepared, y, B, master_seed, workers);
    return assemble_report(std::move(raw), perm, alpha);
}

// Per-spec rows: spec columns, raw and adjusted p-values, minP decision.
inline void write_report_csv(const AdjustmentReport& rep, std::ostream& out) {
    out << "spec_id,missing,surrogate,tuning,aggregation,coding,raw,bonferroni,holm,minp,rejected_minp,converged,notes\n";
    for (std::size_t i = 0; i < rep.m(); ++i) {
        const auto& e = rep.raw.entries[i];
        write_spec_columns(out, rep.raw.specs[i]);
        out << ',' << format_double(e.p_value) << ',' << format_double(rep.bonferroni[i]) << ','
            << format_double(rep.holm[i]) << ',' << format_double(rep.minp[i]) << ','
            << (rep.rejected_minp[i] ? "true" : "false") << ',' << (e.converged ? "true" : "false") << ','
            << detail::csv_safe(e.notes) << '\n';
    }
}

inline nlohmann::ordered_json report_summary(const AdjustmentReport& rep) {
    const auto i = rep.argmin();
    const auto& spec = rep.raw.specs[i];
    nlohmann::ordered_json path = nlohmann::ordered_json::object();
    for (const auto& [axis, option] : spec.path) path[axis] = option;
    nlohmann::ordered_json j;
    j["m"] = rep.m();
    j["B"] = rep.B;
    j["seed"] = rep.master_seed;
    j["alpha"] = rep.alpha;
    j["min_spec_id"] = rep.raw.entries[i].spec_id;
    j["min_spec_path"] = path;
    j["p_min_raw"] = rep.raw.entries[i].p_value;
    j["p_min_minp"] = rep.minp[i];
    j["p_min_bonferroni"] = rep.bonferroni[i];
    j["p_min_holm"] = rep.holm[i];
    j["rejected_minp"] = rep.rejected_minp[i];
    j["n_rejected_raw"] = std::count_if(rep.raw.entries.begin(), rep.raw.entries.end(), [&](const auto& e) { return e.p_value < rep.alpha; });
    j["n_rejected_minp"] = std::count(rep.rejected_minp.begin(), rep.rejected_minp.end(), true);
    return j;
}

} // namespace rdof
