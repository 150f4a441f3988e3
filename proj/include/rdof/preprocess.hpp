#pragma once

// The four preprocessing degrees of freedom: drop vs. impute missing paO2,
// surrogate learner (k-NN vs. ridge), default vs. CV-tuned hyperparameter,
// and mean vs. median aggregation to one exposure per case.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "rdof/dataset.hpp"
#include "rdof/error.hpp"
#include "rdof/rng.hpp"

namespace rdof {

enum class MissingMode { Drop, Impute };
enum class SurrogateKind { Knn, LinReg };
enum class Tuning { Default, Tuned };
enum class Aggregation { Mean, Median };

inline std::string_view to_string(MissingMode v) { return v == MissingMode::Drop ? "drop" : "impute"; }
inline std::string_view to_string(SurrogateKind v) { return v == SurrogateKind::Knn ? "knn" : "linreg"; }
inline std::string_view to_string(Tuning v) { return v == Tuning::Default ? "default" : "tuned"; }
inline std::string_view to_string(Aggregation v) { return v == Aggregation::Mean ? "mean" : "median"; }

struct PreprocChoice {
    MissingMode missing = MissingMode::Impute;
    SurrogateKind surrogate = SurrogateKind::LinReg;
    Tuning tuning = Tuning::Default;
    Aggregation aggregation = Aggregation::Mean;

    friend bool operator==(const PreprocChoice&, const PreprocChoice&) = default;
};

struct FrameRow {
    std::string case_id;
    int outcome = 0;
    double exposure = 0.0;  // aggregated paO2, mmHg

    friend bool operator==(const FrameRow&, const FrameRow&) = default;
};

// One row per case. `source_index[i]` is the position of row i's case in
// the table the frame was derived from.
struct AnalysisFrame {
    std::vector<FrameRow> rows;
    std::vector<std::size_t> source_index;

    std::size_t size() const noexcept { return rows.size(); }
    friend bool operator==(const AnalysisFrame&, const AnalysisFrame&) = default;
};

struct DropLogEntry {
    std::string case_id;
    std::string reason;
    friend bool operator==(const DropLogEntry&, const DropLogEntry&) = default;
};
using DropLog = std::vector<DropLogEntry>;

inline constexpr std::array<std::size_t, 4> kKnnGrid{3, 5, 10, 20};
inline constexpr std::array<double, 4> kRidgeGrid{0.0, 0.1, 1.0, 10.0};
inline constexpr std::size_t kDefaultK = 5;
inline constexpr double kDefaultLambda = 0.0;
inline constexpr std::size_t kCvFolds = 5;
inline constexpr std::size_t kMinSurrogateRows = 10;
inline constexpr double kPao2Floor = 1.0;

namespace detail {

// Observed (pao2, proxies) rows in table order.
struct TrainingSet {
    Eigen::MatrixXd x;  // rows x proxies
    Eigen::VectorXd y;
};

inline TrainingSet training_rows(const CaseTable& table) {
    std::size_t n = 0;
    for (const auto& c : table.cases)
        for (const auto& m : c.measurements) n += m.missing() ? 0 : 1;
    TrainingSet ts{Eigen::MatrixXd(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(table.n_proxies())),
                   Eigen::VectorXd(static_cast<Eigen::Index>(n))};
    Eigen::Index r = 0;
    for (const auto& c : table.cases)
        for (const auto& m : c.measurements) {
            if (m.missing()) continue;
            for (std::size_t j = 0; j < m.proxies.size(); ++j) ts.x(r, static_cast<Eigen::Index>(j)) = m.proxies[j];
            ts.y(r) = *m.pao2;
            ++r;
        }
    return ts;
}

struct Scaler {
    Eigen::RowVectorXd mean;
    Eigen::RowVectorXd scale;

    static Scaler fit(const Eigen::MatrixXd& x) {
        Scaler s;
        const auto n = static_cast<double>(x.rows());
        s.mean = x.colwise().mean();
        s.scale = ((x.rowwise() - s.mean).array().square().colwise().sum() / n).sqrt().matrix();
        for (Eigen::Index j = 0; j < s.scale.size(); ++j)
            if (!(s.scale(j) > 0.0)) s.scale(j) = 1.0;
        return s;
    }

    Eigen::MatrixXd transform(const Eigen::MatrixXd& x) const {
        return ((x.rowwise() - mean).array().rowwise() / scale.array()).matrix();
    }
};

// min ||y - [1 X] b||^2 + lambda * ||b_{1..}||^2, minimum-norm when rank deficient.
inline Eigen::VectorXd ridge_solve(const Eigen::MatrixXd& xs, const Eigen::VectorXd& y, double lambda) {
    const Eigen::Index n = xs.rows(), p = xs.cols();
    const Eigen::Index extra = lambda > 0.0 ? p : 0;
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n + extra, p + 1);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(n + extra);
    a.col(0).head(n).setOnes();
    a.block(0, 1, n, p) = xs;
    b.head(n) = y;
    if (extra) a.block(n, 1, p, p) = std::sqrt(lambda) * Eigen::MatrixXd::Identity(p, p);
    return a.completeOrthogonalDecomposition().solve(b);
}

// Indices of the k nearest training rows to q (squared Euclidean distance,
// ties broken by lower index), written sorted by distance into `out`.
inline void nearest(const Eigen::MatrixXd& train, const Eigen::RowVectorXd& q, std::size_t k,
                    std::span<const std::size_t> candidates,
                    std::vector<std::pair<double, std::size_t>>& scratch) {
    scratch.clear();
    scratch.reserve(candidates.size());
    for (auto i : candidates)
        scratch.emplace_back((train.row(static_cast<Eigen::Index>(i)) - q).squaredNorm(), i);
    k = std::min(k, scratch.size());
    std::partial_sort(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k), scratch.end());
    scratch.resize(k);
}

inline std::vector<std::size_t> fold_assignment(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(std::span(order));
    std::vector<std::size_t> fold(n);
    for (std::size_t pos = 0; pos < n; ++pos) fold[order[pos]] = pos % kCvFolds;
    return fold;
}

} // namespace detail

// Predicts paO2 from the proxy vitals. Proxies are standardized with the
// training means and (population) standard deviations.
class SurrogateModel {
public:
    SurrogateKind kind() const noexcept { return kind_; }
    // k for k-NN (as a double), lambda for ridge.
    double hyperparameter() const noexcept { return hyper_; }
    std::size_t k() const noexcept { return static_cast<std::size_t>(hyper_); }
    double lambda() const noexcept { return hyper_; }
    std::size_t n_proxies() const noexcept { return static_cast<std::size_t>(scaler_.mean.size()); }
    std::size_t n_training() const noexcept { return static_cast<std::size_t>(y_.size()); }
    // Cross-validated RMSE per grid value; empty for untuned models.
    const std::vector<double>& cv_rmse() const noexcept { return cv_rmse_; }

    double predict(std::span<const double> proxies) const {
        if (proxies.size() != n_proxies())
            throw DataError("proxy dimension mismatch: model expects " + std::to_string(n_proxies()) + ", got " + std::to_string(proxies.size()));
        Eigen::RowVectorXd q(static_cast<Eigen::Index>(proxies.size()));
        for (std::size_t j = 0; j < proxies.size(); ++j) q(static_cast<Eigen::Index>(j)) = proxies[j];
        q = ((q - scaler_.mean).array() / scaler_.scale.array()).matrix();
        return predict_scaled(q);
    }

    // Residuals y - yhat on the training rows, in training order.
    std::vector<double> training_residuals() const {
        std::vector<double> r(n_training());
        for (Eigen::Index i = 0; i < y_.size(); ++i) r[static_cast<std::size_t>(i)] = y_(i) - predict_scaled(x_.row(i));
        return r;
    }

    double training_rmse() const {
        double ss = 0.0;
        for (double e : training_residuals()) ss += e * e;
        return std::sqrt(ss / static_cast<double>(n_training()));
    }

    static SurrogateModel fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, SurrogateKind kind, double hyper) {
        SurrogateModel m;
        m.kind_ = kind;
        m.hyper_ = hyper;
        m.scaler_ = detail::Scaler::fit(x);
        m.x_ = m.scaler_.transform(x);
        m.y_ = y;
        if (kind == SurrogateKind::LinReg) m.coef_ = detail::ridge_solve(m.x_, m.y_, hyper);
        return m;
    }

private:
    friend SurrogateModel fit_surrogate(const CaseTable&, SurrogateKind, Tuning, std::uint64_t);

    double predict_scaled(const Eigen::RowVectorXd& q) const {
        if (kind_ == SurrogateKind::LinReg) return coef_(0) + q.dot(coef_.tail(coef_.size() - 1));
        thread_local std::vector<std::pair<double, std::size_t>> scratch;
        thread_local std::vector<std::size_t> all;
        if (all.size() != n_training()) {
            all.resize(n_training());
            std::iota(all.begin(), all.end(), std::size_t{0});
        }
        detail::nearest(x_, q, k(), all, scratch);
        double s = 0.0;
        for (const auto& [d, i] : scratch) s += y_(static_cast<Eigen::Index>(i));
        return s / static_cast<double>(scratch.size());
    }

    SurrogateKind kind_ = SurrogateKind::LinReg;
    double hyper_ = 0.0;
    detail::Scaler scaler_;
    Eigen::MatrixXd x_;
    Eigen::VectorXd y_;
    Eigen::VectorXd coef_;
    std::vector<double> cv_rmse_;
};

// 5-fold cross-validated RMSE for each hyperparameter in `grid`, with folds
// drawn from `seed`. Scaling is refitted inside each training fold.
inline std::vector<double> cv_rmse(const CaseTable& table, SurrogateKind kind, std::span<const double> grid, std::uint64_t seed) {
    const auto ts = detail::training_rows(table);
    const auto n = static_cast<std::size_t>(ts.y.size());
    if (n < kMinSurrogateRows) throw DataError("insufficient surrogate training data");
    const auto fold = detail::fold_assignment(n, seed);
    std::vector<double> sse(grid.size(), 0.0);

    for (std::size_t f = 0; f < kCvFolds; ++f) {
        std::vector<Eigen::Index> tr, va;
        for (std::size_t i = 0; i < n; ++i) (fold[i] == f ? va : tr).push_back(static_cast<Eigen::Index>(i));
        if (va.empty()) continue;
        Eigen::MatrixXd xt = ts.x(tr, Eigen::all);
        Eigen::VectorXd yt = ts.y(tr);
        const auto scaler = detail::Scaler::fit(xt);
        const Eigen::MatrixXd xts = scaler.transform(xt);
        const Eigen::MatrixXd xvs = scaler.transform(ts.x(va, Eigen::all));

        if (kind == SurrogateKind::LinReg) {
            for (std::size_t g = 0; g < grid.size(); ++g) {
                const Eigen::VectorXd b = detail::ridge_solve(xts, yt, grid[g]);
                for (std::size_t v = 0; v < va.size(); ++v) {
                    const auto vi = static_cast<Eigen::Index>(v);
                    const double e = ts.y(va[v]) - (b(0) + xvs.row(vi).dot(b.tail(b.size() - 1)));
                    sse[g] += e * e;
                }
            }
        } else {
            std::size_t kmax = 1;
            for (double g : grid) kmax = std::max(kmax, static_cast<std::size_t>(g));
            std::vector<std::size_t> cand(tr.size());
            std::iota(cand.begin(), cand.end(), std::size_t{0});
            std::vector<std::pair<double, std::size_t>> scratch;
            for (std::size_t v = 0; v < va.size(); ++v) {
                detail::nearest(xts, xvs.row(static_cast<Eigen::Index>(v)), kmax, cand, scratch);
                for (std::size_t g = 0; g < grid.size(); ++g) {
                    const std::size_t k = std::min(static_cast<std::size_t>(grid[g]), scratch.size());
                    double s = 0.0;
                    for (std::size_t t = 0; t < k; ++t) s += yt(static_cast<Eigen::Index>(scratch[t].second));
                    const double e = ts.y(va[v]) - s / static_cast<double>(k);
                    sse[g] += e * e;
                }
            }
        }
    }
    for (auto& s : sse) s = std::sqrt(s / static_cast<double>(n));
    return sse;
}

inline std::vector<double> surrogate_grid(SurrogateKind kind) {
    if (kind == SurrogateKind::Knn) return {kKnnGrid.begin(), kKnnGrid.end()};
    return {kRidgeGrid.begin(), kRidgeGrid.end()};
}

// Hyperparameter selected for (kind, tuning); TUNED minimizes CV RMSE over
// the grid with ties going to the earlier (smaller) value. Scores within
// 1e-9 (relative, floor 1) count as tied so rounding noise cannot pick.
inline double select_hyperparameter(const CaseTable& table, SurrogateKind kind, Tuning tuning, std::uint64_t seed,
                                    std::vector<double>* scores = nullptr) {
    if (tuning == Tuning::Default) return kind == SurrogateKind::Knn ? static_cast<double>(kDefaultK) : kDefaultLambda;
    const auto grid = surrogate_grid(kind);
    auto cv = cv_rmse(table, kind, grid, seed);
    std::size_t best = 0;
    for (std::size_t g = 1; g < grid.size(); ++g)
        if (cv[g] < cv[best] - 1e-9 * std::max(1.0, cv[best])) best = g;
    if (scores) *scores = std::move(cv);
    return grid[best];
}

inline SurrogateModel fit_surrogate(const CaseTable& table, SurrogateKind kind, Tuning tuning, std::uint64_t seed) {
    auto ts = detail::training_rows(table);
    if (static_cast<std::size_t>(ts.y.size()) < kMinSurrogateRows) throw DataError("insufficient surrogate training data");
    std::vector<double> scores;
    const double hyper = select_hyperparameter(table, kind, tuning, seed, &scores);
    auto model = SurrogateModel::fit(ts.x, ts.y, kind, hyper);
    model.cv_rmse_ = std::move(scores);
    return model;
}

// Fills every missing paO2 with the model prediction, floored at 1 mmHg.
inline CaseTable apply_surrogate(const CaseTable& table, const SurrogateModel& model) {
    if (model.n_proxies() != table.n_proxies())
        throw DataError("proxy dimension mismatch: model expects " + std::to_string(model.n_proxies()) + ", table has " + std::to_string(table.n_proxies()));
    CaseTable out = table;
    for (auto& c : out.cases)
        for (auto& m : c.measurements)
            if (m.missing()) m.pao2 = std::max(kPao2Floor, model.predict(m.proxies));
    return out;
}

struct MissingHandled {
    CaseTable table;
    DropLog dropped;
};

// Removes missing measurement rows and any case left without rows. Pure in
// the exposures; never looks at outcomes.
inline MissingHandled drop_missing_rows(const CaseTable& table) {
    MissingHandled out;
    out.table.proxy_names = table.proxy_names;
    for (const auto& c : table.cases) {
        CaseRecord rec{c.case_id, c.outcome, {}};
        for (const auto& m : c.measurements)
            if (!m.missing()) rec.measurements.push_back(m);
        if (rec.measurements.empty()) out.dropped.push_back({c.case_id, "all pao2 measurements missing"});
        else out.table.cases.push_back(std::move(rec));
    }
    return out;
}

// Stochastic single imputation: prediction plus a residual drawn uniformly
// from the training residuals. `predictions` holds one value per missing row
// in table order.
inline CaseTable impute_rows(const CaseTable& table, std::span<const double> predictions,
                             std::span<const double> residuals, std::uint64_t seed) {
    CaseTable out = table;
    Rng rng(seed);
    std::size_t j = 0;
    for (auto& c : out.cases)
        for (auto& m : c.measurements) {
            if (!m.missing()) continue;
            const double r = residuals[static_cast<std::size_t>(rng.below(residuals.size()))];
            m.pao2 = std::max(kPao2Floor, predictions[j++] + r);
        }
    return out;
}

inline std::vector<double> missing_row_predictions(const CaseTable& table, const SurrogateModel& model) {
    std::vector<double> p;
    for (const auto& c : table.cases)
        for (const auto& m : c.measurements)
            if (m.missing()) p.push_back(model.predict(m.proxies));
    return p;
}

// Seeds for the two random stages of imputation, derived from one spec seed.
inline std::uint64_t fold_seed(std::uint64_t seed) { return derive_seed(seed, {1}); }
inline std::uint64_t bootstrap_seed(std::uint64_t seed) { return derive_seed(seed, {2}); }

// DROP: listwise deletion of missing rows (cases losing every row are
// logged and removed). IMPUTE: surrogate prediction plus bootstrap residual
// using the given learner. Complete tables pass through unchanged.
inline MissingHandled handle_missing(const CaseTable& table, MissingMode mode, std::uint64_t seed,
                                     SurrogateKind kind = SurrogateKind::LinReg, Tuning tuning = Tuning::Default) {
    if (table.n_missing() == 0) return {table, {}};
    if (mode == MissingMode::Drop) {
        auto out = drop_missing_rows(table);
        if (out.table.size() < 2 || !has_both_outcomes(out.table.outcomes())) throw DataError("degenerate after drop");
        return out;
    }
    const auto model = fit_surrogate(table, kind, tuning, fold_seed(seed));
    const auto preds = missing_row_predictions(table, model);
    const auto residuals = model.training_residuals();
    return {impute_rows(table, preds, residuals, bootstrap_seed(seed)), {}};
}

inline double median_of(std::vector<double> v) {
    const std::size_t n = v.size();
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(n / 2);
    std::nth_element(v.begin(), mid, v.end());
    if (n % 2 == 1) return *mid;
    const double upper = *mid;
    const double lower = *std::max_element(v.begin(), mid);
    return lower + (upper - lower) / 2.0;
}

inline AnalysisFrame aggregate(const CaseTable& table, Aggregation how) {
    AnalysisFrame frame;
    frame.rows.reserve(table.size());
    frame.source_index.reserve(table.size());
    std::vector<double> values;
    for (std::size_t i = 0; i < table.size(); ++i) {
        const auto& c = table.cases[i];
        values.clear();
        for (const auto& m : c.measurements) {
            if (m.missing()) throw DataError("aggregate on incomplete data (case '" + c.case_id + "')");
            values.push_back(*m.pao2);
        }
        if (values.empty()) throw DataError("aggregate on incomplete data (case '" + c.case_id + "' has no rows)");
        double x = 0.0;
        if (how == Aggregation::Mean) {
            for (double v : values) x += v;
            x /= static_cast<double>(values.size());
        } else {
            x = median_of(values);
        }
        frame.rows.push_back({c.case_id, c.outcome, x});
        frame.source_index.push_back(i);
    }
    return frame;
}

// Source indices refer to `table`; exposures are aggregated from `processed`,
// whose cases must be an order-preserving subset of `table`'s.
inline AnalysisFrame remap_source(AnalysisFrame frame, const CaseTable& table) {
    std::size_t j = 0;
    for (std::size_t i = 0; i < frame.rows.size(); ++i) {
        while (j < table.size() && table.cases[j].case_id != frame.rows[i].case_id) ++j;
        if (j == table.size()) throw DataError("frame case '" + frame.rows[i].case_id + "' not in source table");
        frame.source_index[i] = j++;
    }
    return frame;
}

struct Preprocessed {
    AnalysisFrame frame;
    DropLog dropped;
};

// Full preprocessing path for one choice: missing handling (with the chosen
// surrogate when imputing), then aggregation.
inline Preprocessed preprocess(const CaseTable& table, const PreprocChoice& choice, std::uint64_t seed) {
    auto handled = handle_missing(table, choice.missing, seed, choice.surrogate, choice.tuning);
    auto frame = remap_source(aggregate(handled.table, choice.aggregation), table);
    return {std::move(frame), std::move(handled.dropped)};
}

} // namespace rdof
