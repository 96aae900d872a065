#pragma once

// Elastic-net / LASSO logistic regression by cyclic coordinate descent,
// permutation importance, ROC AUC and cross-validated pipeline comparison.

#include <functional>
#include <map>
#include <random>

#include <Eigen/Dense>

#include "msgscreen/common.hpp"
#include "msgscreen/gnn.hpp"

namespace msgscreen {

/// Rows are patients. Column names are unique.
struct DesignMatrix {
    std::vector<std::string> columns;
    Eigen::MatrixXd values;

    std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }
    std::size_t cols() const { return static_cast<std::size_t>(values.cols()); }

    static DesignMatrix with_rows(std::size_t n) { return {{}, Eigen::MatrixXd(static_cast<Eigen::Index>(n), 0)}; }

    void add_column(std::string name, std::span<const double> v) {
        if (values.cols() > 0 && v.size() != rows()) throw Error("design matrix: column '" + name + "' has wrong length");
        if (std::find(columns.begin(), columns.end(), name) != columns.end())
            throw Error("design matrix: duplicate column '" + name + "'");
        if (values.cols() == 0) values.resize(static_cast<Eigen::Index>(v.size()), 0);
        values.conservativeResize(Eigen::NoChange, values.cols() + 1);
        for (std::size_t i = 0; i < v.size(); ++i) values(static_cast<Eigen::Index>(i), values.cols() - 1) = v[i];
        columns.push_back(std::move(name));
    }

    DesignMatrix concat(const DesignMatrix& other) const {
        if (cols() > 0 && other.cols() > 0 && other.rows() != rows()) throw Error("design matrix: row mismatch");
        DesignMatrix out = *this;
        for (std::size_t j = 0; j < other.cols(); ++j) {
            std::vector<double> col(other.rows());
            for (std::size_t i = 0; i < col.size(); ++i)
                col[i] = other.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            out.add_column(other.columns[j], col);
        }
        return out;
    }

    DesignMatrix select_rows(const std::vector<std::size_t>& idx) const {
        DesignMatrix out{columns, Eigen::MatrixXd(static_cast<Eigen::Index>(idx.size()), values.cols())};
        for (std::size_t i = 0; i < idx.size(); ++i) out.values.row(static_cast<Eigen::Index>(i)) = values.row(static_cast<Eigen::Index>(idx[i]));
        return out;
    }
};

struct ENConfig {
    double alpha = 1.0;  // 1 = LASSO, 0 = ridge
    std::size_t n_lambda = 50;
    double lambda_min_ratio = 1e-3;
    std::optional<double> lambda;  // fixed lambda skips cross-validation
    double tol = 1e-7;
    std::size_t max_iter = 10000;
    std::size_t folds = 5;
    std::size_t permutations = 10;
    std::uint64_t seed = 0;
};

struct FitResult {
    std::vector<std::string> columns;
    double intercept = 0.0;               // original scale
    std::vector<double> coefficients;     // original scale
    double std_intercept = 0.0;           // standardised scale
    std::vector<double> std_coefficients; // standardised scale
    std::vector<double> means, sds;
    double lambda = 0.0;
    double alpha = 1.0;
    double objective = 0.0;               // standardised-scale penalised objective
    bool converged = false;
    std::size_t iterations = 0;
    std::vector<double> objective_trace;  // after each full cycle

    /// Linear predictor for each row of X (original scale).
    Eigen::VectorXd decision(const Eigen::MatrixXd& x) const {
        Eigen::VectorXd eta = Eigen::VectorXd::Constant(x.rows(), intercept);
        for (std::size_t j = 0; j < coefficients.size(); ++j)
            if (coefficients[j] != 0.0) eta += coefficients[j] * x.col(static_cast<Eigen::Index>(j));
        return eta;
    }

    std::vector<double> predict_proba(const Eigen::MatrixXd& x) const {
        auto eta = decision(x);
        std::vector<double> p(static_cast<std::size_t>(eta.size()));
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = sigmoid(eta(static_cast<Eigen::Index>(i)));
        return p;
    }
};

// =============================================================================
// Objective and solver
// =============================================================================

/// (1/n) sum logistic loss + lambda * (alpha |beta|_1 + (1 - alpha)/2 |beta|_2^2).
inline double en_objective(const Eigen::MatrixXd& x, const Labels& y, double b0, const Eigen::VectorXd& beta,
                           double lambda, double alpha) {
    Eigen::VectorXd eta = (x * beta).array() + b0;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) loss += softplus(eta(i)) - y[static_cast<std::size_t>(i)] * eta(i);
    loss /= static_cast<double>(eta.size());
    return loss + lambda * (alpha * beta.lpNorm<1>() + 0.5 * (1.0 - alpha) * beta.squaredNorm());
}

inline double soft_threshold(double z, double g) {
    if (z > g) return z - g;
    if (z < -g) return z + g;
    return 0.0;
}

struct CDState {
    double b0 = 0.0;
    Eigen::VectorXd beta;
};

struct CDOutcome {
    double objective = 0.0;
    bool converged = false;
    std::size_t iterations = 0;
    std::vector<double> trace;
};

/// Proximal Newton iterations on standardised columns. Each outer step
/// minimises the penalised quadratic model of the logistic loss by cyclic
/// coordinate descent (weights floored at 1e-5), then backtracks along the
/// step until the objective does not increase. The trace holds the
/// objective after every outer step.
inline CDOutcome coordinate_descent(const Eigen::MatrixXd& x, const Labels& y, double lambda, double alpha,
                                    CDState& state, double tol, std::size_t max_iter,
                                    const std::vector<bool>& active = {}) {
    const auto n = x.rows();
    const auto p = x.cols();
    const double inv_n = 1.0 / static_cast<double>(n);
    if (state.beta.size() != p) state.beta = Eigen::VectorXd::Zero(p);
    const double l1 = lambda * alpha;
    const double l2 = lambda * (1.0 - alpha);
    auto usable = [&](Eigen::Index j) {
        return (active.empty() || active[static_cast<std::size_t>(j)]) && x.col(j).squaredNorm() > 0.0;
    };

    Eigen::VectorXd w(n), r(n), eta(n);
    std::vector<double> wx2(static_cast<std::size_t>(p));
    CDOutcome out;
    double current = en_objective(x, y, state.b0, state.beta, lambda, alpha);
    for (std::size_t it = 0; it < max_iter; ++it) {
        eta = (x * state.beta).array() + state.b0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double pr = sigmoid(eta(i));
            w(i) = std::max(pr * (1.0 - pr), 1e-5);
            r(i) = (y[static_cast<std::size_t>(i)] - pr) / w(i);  // working residual
        }
        const double wsum = w.sum() * inv_n;
        for (Eigen::Index j = 0; j < p; ++j)
            wx2[static_cast<std::size_t>(j)] = (w.array() * x.col(j).array().square()).sum() * inv_n;

        // Inner coordinate descent on the quadratic model.
        double b0 = state.b0;
        Eigen::VectorXd beta = state.beta;
        auto sweep = [&](bool full) {
            double change = 0.0;
            double d0 = (w.array() * r.array()).sum() * inv_n / wsum;
            b0 += d0;
            r.array() -= d0;
            change = std::abs(d0);
            for (Eigen::Index j = 0; j < p; ++j) {
                if (!usable(j) || (!full && beta(j) == 0.0)) continue;
                const double bj = beta(j);
                const double h = wx2[static_cast<std::size_t>(j)];
                const double g = (w.array() * x.col(j).array() * r.array()).sum() * inv_n + h * bj;
                const double next = soft_threshold(g, l1) / (h + l2);
                if (next != bj) {
                    r -= (next - bj) * x.col(j);
                    beta(j) = next;
                    change = std::max(change, std::abs(next - bj) * std::sqrt(h));
                }
            }
            return change;
        };
        const double inner_tol = tol * 0.1;
        bool full = true;
        for (std::size_t k = 0; k < 10000; ++k) {
            double change = sweep(full);
            if (change < inner_tol) {
                if (full) break;
                full = true;
            } else {
                full = false;
            }
        }

        // Backtracking along the proposed step.
        const double d0 = b0 - state.b0;
        const Eigen::VectorXd d = beta - state.beta;
        double t = 1.0, next_obj = current;
        for (int k = 0; k < 40; ++k, t *= 0.5) {
            next_obj = en_objective(x, y, state.b0 + t * d0, state.beta + t * d, lambda, alpha);
            if (next_obj <= current) break;
        }
        double step = std::max(std::abs(t * d0), t * d.lpNorm<Eigen::Infinity>());
        if (next_obj <= current) {
            state.b0 += t * d0;
            state.beta += t * d;
            current = next_obj;
        } else {
            step = 0.0;
        }
        out.trace.push_back(current);
        out.iterations = it + 1;
        if (step < tol) {
            out.converged = true;
            break;
        }
    }
    out.objective = current;
    return out;
}

// =============================================================================
// Folds, AUC
// =============================================================================

/// Stratified fold ids: each class is shuffled with `seed` and dealt
/// round-robin over `k` folds.
inline std::vector<std::size_t> stratified_folds(const Labels& y, std::size_t k, std::uint64_t seed) {
    if (k < 2) throw Error("stratified_folds: need at least 2 folds");
    std::vector<std::size_t> fold(y.size());
    std::mt19937_64 rng(seed);
    std::size_t next = 0;
    for (int cls : {1, 0}) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < y.size(); ++i)
            if ((y[i] != 0) == (cls != 0)) idx.push_back(i);
        std::shuffle(idx.begin(), idx.end(), rng);
        for (auto i : idx) fold[i] = next++ % k;
    }
    return fold;
}

/// Mann-Whitney AUC; tied scores count one half.
inline double roc_auc(std::span<const double> scores, const Labels& labels) {
    if (scores.size() != labels.size()) throw Error("roc_auc: length mismatch");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
    double rank_sum = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) {
                rank_sum += avg_rank;
                ++n_pos;
            }
        i = j;
    }
    const std::size_t n_neg = labels.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) throw Error("roc_auc: both classes are required");
    const double np = static_cast<double>(n_pos);
    return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

// =============================================================================
// Fitting
// =============================================================================

struct Standardized {
    Eigen::MatrixXd x;
    std::vector<double> means, sds;
    std::vector<bool> usable;  // false for zero-variance columns
};

inline Standardized standardize(const Eigen::MatrixXd& x) {
    Standardized s;
    s.x = x;
    const double n = static_cast<double>(x.rows());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        double m = x.col(j).sum() / n;
        double sd = std::sqrt((x.col(j).array() - m).square().sum() / n);
        bool ok = sd > 1e-12;
        s.means.push_back(m);
        s.sds.push_back(ok ? sd : 1.0);
        s.usable.push_back(ok);
        if (ok) s.x.col(j) = (x.col(j).array() - m) / sd;
        else s.x.col(j).setZero();
    }
    return s;
}

namespace detail {

inline void check_inputs(const Eigen::MatrixXd& x, const Labels& y) {
    if (static_cast<std::size_t>(x.rows()) != y.size()) throw Error("fit_en: labels do not match rows");
    if (x.rows() < 2) throw Error("fit_en: need at least 2 rows");
    if (!x.allFinite()) throw Error("fit_en: non-finite design matrix entries");
    std::size_t pos = 0;
    for (int v : y) {
        if (v != 0 && v != 1) throw Error("fit_en: labels must be 0/1");
        pos += static_cast<std::size_t>(v);
    }
    if (pos == 0 || pos == y.size()) throw Error("fit_en: labels contain a single class");
}

inline double lambda_max(const Standardized& s, const Labels& y, double alpha) {
    double ybar = static_cast<double>(std::count(y.begin(), y.end(), 1)) / static_cast<double>(y.size());
    double best = 0.0;
    for (Eigen::Index j = 0; j < s.x.cols(); ++j) {
        double g = 0.0;
        for (Eigen::Index i = 0; i < s.x.rows(); ++i) g += s.x(i, j) * (y[static_cast<std::size_t>(i)] - ybar);
        best = std::max(best, std::abs(g) / static_cast<double>(s.x.rows()));
    }
    return std::max(best, 1e-6) / std::max(alpha, 1e-3);
}

inline std::vector<double> lambda_path(double lmax, const ENConfig& c) {
    std::vector<double> path;
    const std::size_t n = std::max<std::size_t>(c.n_lambda, 1);
    for (std::size_t k = 0; k < n; ++k) {
        double frac = n == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(n - 1);
        path.push_back(lmax * std::pow(c.lambda_min_ratio, frac));
    }
    return path;
}

inline double logistic_deviance(const Eigen::VectorXd& eta, const Labels& y) {
    double d = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) d += bce_with_logit(eta(i), y[static_cast<std::size_t>(i)] != 0);
    return 2.0 * d / static_cast<double>(eta.size());
}

inline FitResult finish(const Standardized& s, const std::vector<std::string>& columns, const CDState& st,
                        const CDOutcome& outcome, double lambda, double alpha) {
    FitResult r;
    r.columns = columns;
    r.means = s.means;
    r.sds = s.sds;
    r.lambda = lambda;
    r.alpha = alpha;
    r.std_intercept = st.b0;
    r.objective = outcome.objective;
    r.converged = outcome.converged;
    r.iterations = outcome.iterations;
    r.objective_trace = outcome.trace;
    r.intercept = st.b0;
    for (std::size_t j = 0; j < columns.size(); ++j) {
        double b = s.usable[j] ? st.beta(static_cast<Eigen::Index>(j)) : 0.0;
        r.std_coefficients.push_back(b);
        double orig = b / s.sds[j];
        r.coefficients.push_back(orig);
        r.intercept -= orig * s.means[j];
    }
    return r;
}

} // namespace detail

/// Fits at a single lambda (no cross-validation), warm-starting along a
/// geometric path from lambda_max when lambda is below it.
inline FitResult fit_en_at(const DesignMatrix& X, const Labels& y, double lambda, const ENConfig& config) {
    detail::check_inputs(X.values, y);
    if (!(lambda > 0.0)) throw Error("fit_en: lambda must be > 0");
    if (!(config.alpha >= 0.0 && config.alpha <= 1.0)) throw Error("fit_en: alpha must lie in [0,1]");
    auto s = standardize(X.values);
    CDState st;
    st.beta = Eigen::VectorXd::Zero(s.x.cols());
    double lmax = detail::lambda_max(s, y, config.alpha);
    if (lambda < lmax) {
        const int steps = 20;
        for (int k = 0; k < steps; ++k) {
            double l = lmax * std::pow(lambda / lmax, static_cast<double>(k) / steps);
            coordinate_descent(s.x, y, l, config.alpha, st, std::max(config.tol, 1e-5), config.max_iter, s.usable);
        }
    }
    auto outcome = coordinate_descent(s.x, y, lambda, config.alpha, st, config.tol, config.max_iter, s.usable);
    return detail::finish(s, X.columns, st, outcome, lambda, config.alpha);
}

/// Fits the penalised logistic model; lambda is chosen by stratified
/// cross-validated deviance over a log-spaced path unless fixed in config.
inline FitResult fit_en(const DesignMatrix& X, const Labels& y, const ENConfig& config = {}) {
    detail::check_inputs(X.values, y);
    if (!(config.alpha >= 0.0 && config.alpha <= 1.0)) throw Error("fit_en: alpha must lie in [0,1]");
    if (config.lambda) return fit_en_at(X, y, *config.lambda, config);

    auto full = standardize(X.values);
    const auto path = detail::lambda_path(detail::lambda_max(full, y, config.alpha), config);
    // Cross-validation and warm-start points only rank lambdas; they run at a
    // looser tolerance. The final fit uses config.tol.
    const double path_tol = std::max(config.tol, 1e-5);
    std::vector<double> cv_dev(path.size(), 0.0);
    const auto folds = stratified_folds(y, std::max<std::size_t>(2, config.folds), config.seed);
    for (std::size_t f = 0; f < std::max<std::size_t>(2, config.folds); ++f) {
        std::vector<std::size_t> tr, te;
        for (std::size_t i = 0; i < y.size(); ++i) (folds[i] == f ? te : tr).push_back(i);
        Labels ytr, yte;
        for (auto i : tr) ytr.push_back(y[i]);
        for (auto i : te) yte.push_back(y[i]);
        if (te.empty() || std::count(ytr.begin(), ytr.end(), 1) == 0 ||
            std::count(ytr.begin(), ytr.end(), 0) == 0)
            continue;
        auto s = standardize(X.select_rows(tr).values);
        auto xte = X.select_rows(te).values;
        CDState st;
        for (std::size_t k = 0; k < path.size(); ++k) {
            coordinate_descent(s.x, ytr, path[k], config.alpha, st, path_tol, config.max_iter, s.usable);
            auto fit = detail::finish(s, X.columns, st, {}, path[k], config.alpha);
            cv_dev[k] += detail::logistic_deviance(fit.decision(xte), yte) * static_cast<double>(te.size());
        }
    }
    auto best = static_cast<std::size_t>(std::min_element(cv_dev.begin(), cv_dev.end()) - cv_dev.begin());

    CDState st;
    CDOutcome outcome;
    for (std::size_t k = 0; k <= best; ++k)
        outcome = coordinate_descent(full.x, y, path[k], config.alpha, st, k == best ? config.tol : path_tol,
                                     config.max_iter, full.usable);
    return detail::finish(full, X.columns, st, outcome, path[best], config.alpha);
}

// =============================================================================
// Permutation importance
// =============================================================================

/// Mean AUC drop over `config.permutations` shuffles of each column.
/// Shuffles are seeded by column name, so scores do not depend on column
/// order. Columns with a zero coefficient score exactly 0.
inline std::vector<double> permutation_importance(const FitResult& fit, const DesignMatrix& X, const Labels& y,
                                                  const ENConfig& config = {}) {
    if (X.cols() != fit.coefficients.size()) throw Error("permutation_importance: column count mismatch");
    const Eigen::VectorXd base = fit.decision(X.values);
    std::vector<double> base_scores(base.data(), base.data() + base.size());
    const double base_auc = roc_auc(base_scores, y);
    std::vector<double> out(X.cols(), 0.0);
    const std::size_t n = X.rows();
    for (std::size_t c = 0; c < X.cols(); ++c) {
        const double coef = fit.coefficients[c];
        if (coef == 0.0) continue;
        const auto col = X.values.col(static_cast<Eigen::Index>(c));
        double total = 0.0;
        for (std::size_t r = 0; r < config.permutations; ++r) {
            std::mt19937_64 rng(mix_seed(config.seed ^ fnv1a64(X.columns[c]), r));
            std::vector<std::size_t> perm(n);
            std::iota(perm.begin(), perm.end(), 0);
            std::shuffle(perm.begin(), perm.end(), rng);
            std::vector<double> scores(n);
            for (std::size_t i = 0; i < n; ++i)
                scores[i] = base_scores[i] + coef * (col(static_cast<Eigen::Index>(perm[i])) - col(static_cast<Eigen::Index>(i)));
            total += base_auc - roc_auc(scores, y);
        }
        out[c] = config.permutations ? total / static_cast<double>(config.permutations) : 0.0;
    }
    return out;
}

// =============================================================================
// Pipeline comparison
// =============================================================================

inline constexpr std::array<std::string_view, 3> kPipelineVariants = {
    "symptom_only", "symptom_demographics_comorbidities", "symptom_gnn_risk"};

/// Returns GNN event probabilities for every row, from a model trained with
/// labels restricted to rows where `train_mask` is true.
using GnnRiskFn = std::function<std::vector<double>(const std::vector<bool>& train_mask)>;

struct PipelineInputs {
    DesignMatrix symptoms;
    DesignMatrix demographics;  // demographic one-hot and comorbidity multi-hot
    Labels labels;
    GnnRiskFn gnn_risk;         // optional; variant 3 is skipped without it
};

struct PipelineComparison {
    std::map<std::string, std::vector<double>> fold_aucs;
    std::vector<std::string> skipped;

    double mean_auc(const std::string& variant) const {
        auto it = fold_aucs.find(variant);
        return it == fold_aucs.end() || it->second.empty() ? std::nan("") : mean(it->second);
    }
};

/// Stratified k-fold ROC AUC of the three EN pipelines. The GNN risk column
/// for a fold comes from a model that never saw that fold's labels.
inline PipelineComparison compare_pipelines(const PipelineInputs& in, const ENConfig& config = {}) {
    const auto& y = in.labels;
    if (in.symptoms.rows() != y.size()) throw Error("compare_pipelines: labels do not match rows");
    const std::size_t k = std::max<std::size_t>(2, config.folds);
    const auto folds = stratified_folds(y, k, config.seed);
    PipelineComparison out;
    for (auto v : kPipelineVariants) out.fold_aucs[std::string(v)];

    for (std::size_t f = 0; f < k; ++f) {
        std::vector<std::size_t> tr, te;
        std::vector<bool> mask(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) {
            mask[i] = folds[i] != f;
            (mask[i] ? tr : te).push_back(i);
        }
        Labels ytr, yte;
        for (auto i : tr) ytr.push_back(y[i]);
        for (auto i : te) yte.push_back(y[i]);
        auto single = [](const Labels& l) {
            return std::count(l.begin(), l.end(), 1) == 0 || std::count(l.begin(), l.end(), 0) == 0;
        };
        if (single(yte) || single(ytr)) {
            out.skipped.push_back("fold " + std::to_string(f) + ": single class");
            continue;
        }
        std::vector<std::pair<std::string, DesignMatrix>> designs;
        designs.emplace_back(std::string(kPipelineVariants[0]), in.symptoms);
        designs.emplace_back(std::string(kPipelineVariants[1]), in.symptoms.concat(in.demographics));
        if (in.gnn_risk) {
            auto risk = in.gnn_risk(mask);
            DesignMatrix d = in.symptoms;
            d.add_column("gnn_risk", risk);
            designs.emplace_back(std::string(kPipelineVariants[2]), std::move(d));
        } else {
            out.skipped.push_back("fold " + std::to_string(f) + ": no GNN risk provider");
        }
        for (const auto& [name, X] : designs) {
            ENConfig inner = config;
            inner.seed = mix_seed(config.seed, f);
            auto fit = fit_en(X.select_rows(tr), ytr, inner);
            auto eta = fit.decision(X.select_rows(te).values);
            std::vector<double> s(eta.data(), eta.data() + eta.size());
            out.fold_aucs[name].push_back(roc_auc(s, yte));
        }
    }
    return out;
}

/// CSV with header column,coefficient,importance.
inline std::string coefficients_csv(const FitResult& fit, std::span<const double> importance) {
    std::string s = "column,coefficient,importance\n";
    for (std::size_t j = 0; j < fit.columns.size(); ++j)
        s += fit.columns[j] + "," + fmt_double(fit.coefficients[j]) + "," +
             fmt_double(j < importance.size() ? importance[j] : 0.0) + "\n";
    return s;
}

} // namespace msgscreen
