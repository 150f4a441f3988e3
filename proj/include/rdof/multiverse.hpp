#pragma once

// Specification trees: the cartesian product of analytical choices, its
// enumeration into concrete pipelines, and their execution on a case table.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rdof/dataset.hpp"
#include "rdof/error.hpp"
#include "rdof/parallel.hpp"
#include "rdof/preprocess.hpp"
#include "rdof/rng.hpp"
#include "rdof/stattests.hpp"

namespace rdof {

inline constexpr std::string_view kAxisMissing = "missing";
inline constexpr std::string_view kAxisSurrogate = "surrogate";
inline constexpr std::string_view kAxisTuning = "tuning";
inline constexpr std::string_view kAxisAggregation = "aggregation";
inline constexpr std::string_view kAxisCoding = "coding";

struct Axis {
    std::string name;
    std::vector<std::string> options;
    friend bool operator==(const Axis&, const Axis&) = default;
};

// A combination is excluded when it matches every (axis, option) pair.
struct Exclusion {
    std::vector<std::pair<std::string, std::string>> match;
    friend bool operator==(const Exclusion&, const Exclusion&) = default;
};

struct SpecTree {
    std::vector<Axis> axes;
    std::vector<Exclusion> exclusions;
    // Merge specs whose pipelines are provably identical (DROP makes the
    // surrogate and tuning choices irrelevant). Off by default so m counts
    // every declared specification.
    bool collapse_duplicates = false;

    // 2 (missing) x 2 (surrogate) x 2 (tuning) x 2 (aggregation) x 3 (coding) = 48.
    static SpecTree paper_default() {
        return SpecTree{{{"missing", {"drop", "impute"}},
                         {"surrogate", {"knn", "linreg"}},
                         {"tuning", {"default", "tuned"}},
                         {"aggregation", {"mean", "median"}},
                         {"coding", {"continuous", "binary_200", "ternary_200_250"}}},
                        {},
                        false};
    }

    friend bool operator==(const SpecTree&, const SpecTree&) = default;
};

namespace detail {

template <typename E, std::size_t N>
std::optional<E> parse_enum(std::string_view s, const std::array<E, N>& values) {
    for (auto v : values)
        if (to_string(v) == s) return v;
    return std::nullopt;
}

inline const std::vector<std::string_view>& known_options(std::string_view axis) {
    static const std::vector<std::string_view> missing{"drop", "impute"};
    static const std::vector<std::string_view> surrogate{"knn", "linreg"};
    static const std::vector<std::string_view> tuning{"default", "tuned"};
    static const std::vector<std::string_view> aggregation{"mean", "median"};
    static const std::vector<std::string_view> coding{"continuous", "binary_200", "ternary_200_250"};
    static const std::vector<std::string_view> none;
    if (axis == kAxisMissing) return missing;
    if (axis == kAxisSurrogate) return surrogate;
    if (axis == kAxisTuning) return tuning;
    if (axis == kAxisAggregation) return aggregation;
    if (axis == kAxisCoding) return coding;
    return none;
}

} // namespace detail

inline void check(const SpecTree& tree) {
    if (tree.axes.empty()) throw ConfigError("spec tree needs at least one axis");
    std::vector<std::string_view> seen;
    for (const auto& axis : tree.axes) {
        const auto& known = detail::known_options(axis.name);
        if (known.empty())
            throw ConfigError("unknown axis '" + axis.name + "' (expected missing, surrogate, tuning, aggregation or coding)");
        if (std::find(seen.begin(), seen.end(), axis.name) != seen.end()) throw ConfigError("duplicate axis '" + axis.name + "'");
        seen.push_back(axis.name);
        if (axis.options.empty()) throw ConfigError("axis '" + axis.name + "' has no options");
        for (std::size_t i = 0; i < axis.options.size(); ++i) {
            if (std::find(known.begin(), known.end(), axis.options[i]) == known.end())
                throw ConfigError("unknown option '" + axis.options[i] + "' on axis '" + axis.name + "'");
            for (std::size_t j = 0; j < i; ++j)
                if (axis.options[j] == axis.options[i]) throw ConfigError("duplicate option '" + axis.options[i] + "' on axis '" + axis.name + "'");
        }
    }
    for (const auto& ex : tree.exclusions) {
        if (ex.match.empty()) throw ConfigError("empty exclusion");
        for (const auto& [a, o] : ex.match) {
            auto it = std::find_if(tree.axes.begin(), tree.axes.end(), [&](const Axis& ax) { return ax.name == a; });
            if (it == tree.axes.end()) throw ConfigError("exclusion references unknown axis '" + a + "'");
            if (std::find(it->options.begin(), it->options.end(), o) == it->options.end())
                throw ConfigError("exclusion references unknown option '" + o + "' on axis '" + a + "'");
        }
    }
}

// One resolved path through the tree. Axes missing from the tree take the
// defaults of PreprocChoice and Coding::Continuous.
struct Spec {
    std::size_t spec_id = 0;
    PreprocChoice preproc;
    Coding coding = Coding::Continuous;
    std::vector<std::pair<std::string, std::string>> path;

    std::string label() const {
        std::string s;
        for (const auto& [axis, option] : path) s += (s.empty() ? "" : "/") + option;
        return s;
    }
    friend bool operator==(const Spec&, const Spec&) = default;
};

namespace detail {

inline void apply_option(Spec& spec, std::string_view axis, std::string_view option) {
    if (axis == kAxisMissing) spec.preproc.missing = option == "drop" ? MissingMode::Drop : MissingMode::Impute;
    else if (axis == kAxisSurrogate) spec.preproc.surrogate = option == "knn" ? SurrogateKind::Knn : SurrogateKind::LinReg;
    else if (axis == kAxisTuning) spec.preproc.tuning = option == "tuned" ? Tuning::Tuned : Tuning::Default;
    else if (axis == kAxisAggregation) spec.preproc.aggregation = option == "median" ? Aggregation::Median : Aggregation::Mean;
    else if (axis == kAxisCoding)
        spec.coding = option == "binary_200" ? Coding::Binary200 : option == "ternary_200_250" ? Coding::Ternary200_250 : Coding::Continuous;
}

// Identity of the computation a spec performs.
inline std::tuple<int, int, int, int, int> pipeline_key(const Spec& s) {
    const bool drop = s.preproc.missing == MissingMode::Drop;
    return {static_cast<int>(s.preproc.missing), drop ? -1 : static_cast<int>(s.preproc.surrogate),
            drop ? -1 : static_cast<int>(s.preproc.tuning), static_cast<int>(s.preproc.aggregation), static_cast<int>(s.coding)};
}

} // namespace detail

// Lexicographic cartesian product (first axis varies slowest), minus
// excluded combinations; spec ids are dense and ascending.
inline std::vector<Spec> enumerate(const SpecTree& tree) {
    check(tree);
    std::vector<Spec> out;
    std::vector<std::size_t> digit(tree.axes.size(), 0);
    std::vector<std::tuple<int, int, int, int, int>> keys;
    for (bool done = false; !done;) {
        Spec s;
        for (std::size_t a = 0; a < tree.axes.size(); ++a) {
            const auto& opt = tree.axes[a].options[digit[a]];
            s.path.emplace_back(tree.axes[a].name, opt);
            detail::apply_option(s, tree.axes[a].name, opt);
        }
        const bool excluded = std::any_of(tree.exclusions.begin(), tree.exclusions.end(), [&](const Exclusion& ex) {
            return std::all_of(ex.match.begin(), ex.match.end(), [&](const auto& pr) {
                return std::find(s.path.begin(), s.path.end(), pr) != s.path.end();
            });
        });
        bool duplicate = false;
        if (!excluded && tree.collapse_duplicates) {
            const auto key = detail::pipeline_key(s);
            duplicate = std::find(keys.begin(), keys.end(), key) != keys.end();
            if (!duplicate) keys.push_back(key);
        }
        if (!excluded && !duplicate) {
            s.spec_id = out.size();
            out.push_back(std::move(s));
        }
        for (std::size_t a = tree.axes.size();;) {
            if (a == 0) {
                done = true;
                break;
            }
            --a;
            if (++digit[a] < tree.axes[a].options.size()) break;
            digit[a] = 0;
        }
    }
    if (out.empty()) throw ConfigError("spec tree is empty after exclusions");
    return out;
}

inline std::uint64_t spec_seed(std::uint64_t seed, std::size_t spec_id) {
    return derive_seed(seed, {static_cast<std::uint64_t>(spec_id)});
}

struct PValueEntry {
    std::size_t spec_id = 0;
    double p_value = 1.0;
    std::string method_tag;
    bool converged = true;
    std::string notes;
    friend bool operator==(const PValueEntry&, const PValueEntry&) = default;
};

struct PValueVector {
    std::vector<Spec> specs;
    std::vector<PValueEntry> entries;

    std::size_t m() const noexcept { return entries.size(); }
    std::vector<double> p_values() const {
        std::vector<double> p;
        p.reserve(entries.size());
        for (const auto& e : entries) p.push_back(e.p_value);
        return p;
    }
};

// Smallest p-value; ties go to the smallest spec id.
inline std::pair<std::size_t, double> min_p(std::span<const double> p) {
    if (p.empty()) throw std::invalid_argument("min_p of an empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < p.size(); ++i)
        if (p[i] < p[best]) best = i;
    return {best, p[best]};
}

inline std::pair<std::size_t, double> min_p(const PValueVector& v) {
    const auto p = v.p_values();
    const auto [i, value] = min_p(std::span<const double>(p));
    return {v.entries[i].spec_id, value};
}

// All specs preprocessed once against a fixed table. Preprocessing never
// depends on outcomes, so re-running the tests for any relabelling of the
// outcomes is equivalent to re-running the full pipelines with the same
// spec seeds. Specs with identical frames and coding share one kernel.
class PreparedMultiverse {
public:
    PreparedMultiverse(const CaseTable& table, const SpecTree& tree, std::uint64_t seed, unsigned workers = 1)
        : specs_(enumerate(tree)), n_cases_(table.size()) {
        validate(table);
        if (table.size() < 2) throw DataError("need at least 2 cases");
        build(table, seed, workers);
    }

    const std::vector<Spec>& specs() const noexcept { return specs_; }
    std::size_t m() const noexcept { return specs_.size(); }
    std::size_t n_cases() const noexcept { return n_cases_; }
    std::size_t n_kernels() const noexcept { return kernels_.size(); }

    // Per-spec test results for outcomes indexed like the table's cases.
    std::vector<TestResult> evaluate(std::span<const int> outcomes, FisherCache& cache) const {
        check_outcomes(outcomes);
        std::vector<TestResult> per_kernel;
        per_kernel.reserve(kernels_.size());
        for (const auto& k : kernels_) per_kernel.push_back(run_kernel(k, outcomes, cache));
        std::vector<TestResult> out;
        out.reserve(specs_.size());
        for (auto k : spec_kernel_) out.push_back(per_kernel[k]);
        return out;
    }

    // p-values only, written into `out` (size m).
    void evaluate_pvalues(std::span<const int> outcomes, FisherCache& cache, std::span<double> out) const {
        check_outcomes(outcomes);
        thread_local std::vector<double> per_kernel;
        per_kernel.resize(kernels_.size());
        for (std::size_t k = 0; k < kernels_.size(); ++k) per_kernel[k] = run_kernel(kernels_[k], outcomes, cache).p_value;
        for (std::size_t i = 0; i < specs_.size(); ++i) out[i] = per_kernel[spec_kernel_[i]];
    }

    PValueVector run(std::span<const int> outcomes) const {
        FisherCache cache;
        auto results = evaluate(outcomes, cache);
        PValueVector v;
        v.specs = specs_;
        for (std::size_t i = 0; i < specs_.size(); ++i) {
            auto& r = results[i];
            std::string notes = r.notes;
            const auto& extra = kernels_[spec_kernel_[i]].prep_note;
            if (!extra.empty()) notes = notes.empty() ? extra : extra + "; " + notes;
            v.entries.push_back({specs_[i].spec_id, r.p_value, std::move(r.method_tag), r.converged, std::move(notes)});
        }
        return v;
    }

private:
    struct Kernel {
        Coding coding = Coding::Continuous;
        bool from_drop = false;
        std::vector<std::size_t> source_index;
        std::vector<double> exposure;
        std::vector<std::uint8_t> category;
        std::string prep_error;  // non-empty: spec unusable for every outcome vector
        std::string prep_note;
    };

    struct Prepared {
        std::optional<AnalysisFrame> frame;
        std::string error;
        std::string note;
    };

    void check_outcomes(std::span<const int> outcomes) const {
        if (outcomes.size() != n_cases_)
            throw std::invalid_argument("outcome vector has " + std::to_string(outcomes.size()) + " entries, table has " + std::to_string(n_cases_) + " cases");
    }

    void build(const CaseTable& table, std::uint64_t seed, unsigned workers) {
        const std::size_t m = specs_.size();
        std::vector<Prepared> prepared(m);
        const bool complete = table.n_missing() == 0;

        // Stage 1: hyperparameter selection for imputing specs.
        std::vector<double> hyper(m, 0.0);
        const std::size_t n_train = table.n_rows() - table.n_missing();
        parallel_for(m, workers, [&](std::size_t i) {
            const auto& s = specs_[i];
            if (complete || s.preproc.missing == MissingMode::Drop) return;
            if (n_train < kMinSurrogateRows) {
                prepared[i].error = "insufficient surrogate training data";
                return;
            }
            try {
                hyper[i] = select_hyperparameter(table, s.preproc.surrogate, s.preproc.tuning, fold_seed(spec_seed(seed, s.spec_id)));
            } catch (const DataError& e) {
                prepared[i].error = e.what();
            }
        });

        // Stage 2: one fitted model per distinct (learner, hyperparameter).
        struct Bank {
            SurrogateKind kind;
            double hyper;
            std::vector<double> predictions;
            std::vector<double> residuals;
        };
        std::vector<Bank> banks;
        std::vector<std::size_t> bank_of(m, 0);
        for (std::size_t i = 0; i < m; ++i) {
            const auto& s = specs_[i];
            if (complete || s.preproc.missing == MissingMode::Drop || !prepared[i].error.empty()) continue;
            auto it = std::find_if(banks.begin(), banks.end(), [&](const Bank& b) { return b.kind == s.preproc.surrogate && b.hyper == hyper[i]; });
            if (it == banks.end()) {
                banks.push_back({s.preproc.surrogate, hyper[i], {}, {}});
                it = banks.end() - 1;
            }
            bank_of[i] = static_cast<std::size_t>(it - banks.begin());
        }
        if (!banks.empty()) {
            const auto ts = detail::training_rows(table);
            parallel_for(banks.size(), workers, [&](std::size_t b) {
                const auto model = SurrogateModel::fit(ts.x, ts.y, banks[b].kind, banks[b].hyper);
                banks[b].predictions = missing_row_predictions(table, model);
                banks[b].residuals = model.training_residuals();
            });
        }

        // Stage 3: frames.
        std::optional<MissingHandled> dropped;
        if (!complete) dropped = drop_missing_rows(table);
        parallel_for(m, workers, [&](std::size_t i) {
            const auto& s = specs_[i];
            auto& out = prepared[i];
            if (!out.error.empty()) return;
            if (complete) {
                out.frame = aggregate(table, s.preproc.aggregation);
            } else if (s.preproc.missing == MissingMode::Drop) {
                if (dropped->table.size() < 2) {
                    out.error = "degenerate after drop";
                    return;
                }
                out.frame = remap_source(aggregate(dropped->table, s.preproc.aggregation), table);
                if (!dropped->dropped.empty()) out.note = "dropped " + std::to_string(dropped->dropped.size()) + " case(s) without observed pao2";
            } else {
                const auto& bank = banks[bank_of[i]];
                const auto imputed = impute_rows(table, bank.predictions, bank.residuals, bootstrap_seed(spec_seed(seed, s.spec_id)));
                out.frame = aggregate(imputed, s.preproc.aggregation);
            }
        });

        // Kernels, deduplicated in spec order.
        spec_kernel_.resize(m);
        for (std::size_t i = 0; i < m; ++i) {
            Kernel k;
            k.coding = specs_[i].coding;
            k.from_drop = !complete && specs_[i].preproc.missing == MissingMode::Drop;
            k.prep_error = prepared[i].error;
            k.prep_note = prepared[i].note;
            if (prepared[i].frame) {
                const auto& f = *prepared[i].frame;
                k.source_index = f.source_index;
                for (const auto& r : f.rows) k.exposure.push_back(r.exposure);
                if (k.coding != Coding::Continuous) {
                    const std::array<double, 2> cuts{kLowCut, kHighCut};
                    const std::size_t n_cuts = k.coding == Coding::Binary200 ? 1 : 2;
                    for (double x : k.exposure)
                        k.category.push_back(static_cast<std::uint8_t>(category_of(x, std::span(cuts.data(), n_cuts))));
                }
            }
            auto same = [&](const Kernel& o) {
                return o.coding == k.coding && o.from_drop == k.from_drop && o.prep_error == k.prep_error &&
                       o.prep_note == k.prep_note && o.source_index == k.source_index && o.exposure == k.exposure;
            };
            auto it = std::find_if(kernels_.begin(), kernels_.end(), same);
            if (it == kernels_.end()) {
                kernels_.push_back(std::move(k));
                it = kernels_.end() - 1;
            }
            spec_kernel_[i] = static_cast<std::size_t>(it - kernels_.begin());
        }
    }

    static TestResult run_kernel(const Kernel& k, std::span<const int> outcomes, FisherCache& cache) {
        const auto tag = std::string(method_tag(k.coding));
        if (!k.prep_error.empty()) return {1.0, 0.0, tag, true, k.prep_error};
        const std::size_t n = k.source_index.size();
        if (n == 0) return {1.0, 0.0, tag, true, "empty frame"};
        thread_local std::vector<int> y;
        y.resize(n);
        std::size_t ones = 0;
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = outcomes[k.source_index[i]];
            ones += y[i] ? 1 : 0;
        }
        if (k.from_drop && (ones == 0 || ones == n)) return {1.0, 0.0, tag, true, "degenerate after drop"};

        if (k.coding == Coding::Continuous) {
            try {
                return logistic_wald(k.exposure, y);
            } catch (const DataError& e) {
                return {1.0, 0.0, tag, true, e.what()};
            }
        }
        ContingencyTable t;
        t.k = k.coding == Coding::Binary200 ? 2 : 3;
        for (std::size_t i = 0; i < n; ++i) ++t.counts[y[i] ? 1 : 0][k.category[i]];
        return fisher_exact(t, &cache);
    }

    std::vector<Spec> specs_;
    std::size_t n_cases_ = 0;
    std::vector<Kernel> kernels_;
    std::vector<std::size_t> spec_kernel_;
};

// Runs every spec on the table. Per-spec randomness comes from
// (seed, spec_id), so the result is independent of the worker count.
inline PValueVector run_all(const CaseTable& table, const SpecTree& tree, std::uint64_t seed, unsigned workers = 1) {
    const PreparedMultiverse prepared(table, tree, seed, workers);
    const auto y = table.outcomes();
    return prepared.run(y);
}

namespace detail {

inline std::string csv_safe(std::string s) {
    std::replace(s.begin(), s.end(), ',', ';');
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
}

} // namespace detail

inline void write_spec_columns(std::ostream& out, const Spec& s) {
    out << s.spec_id << ',' << to_string(s.preproc.missing) << ',' << to_string(s.preproc.surrogate) << ','
        << to_string(s.preproc.tuning) << ',' << to_string(s.preproc.aggregation) << ',' << to_string(s.coding);
}

// `spec_id,missing,surrogate,tuning,aggregation,coding,p_value,converged,notes`
inline void write_pvalues_csv(const PValueVector& v, std::ostream& out) {
    out << "spec_id,missing,surrogate,tuning,aggregation,coding,p_value,converged,notes\n";
    for (std::size_t i = 0; i < v.m(); ++i) {
        const auto& e = v.entries[i];
        write_spec_columns(out, v.specs[i]);
        out << ',' << format_double(e.p_value) << ',' << (e.converged ? "true" : "false") << ',' << detail::csv_safe(e.notes) << '\n';
    }
}

} // namespace rdof
