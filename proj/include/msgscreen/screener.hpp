#pragma once

// Hybrid screener: a symptom-count rule OR a thresholded logistic score,
// threshold calibration under a specificity floor, and screening metrics.

#include <map>
#include <set>

#include "msgscreen/enlasso.hpp"
#include "msgscreen/scoring.hpp"

namespace msgscreen {

struct ScreenRule {
    int min_very_high = 1;      // messages carrying a very-high symptom
    int min_high_distinct = 2;  // distinct high-tier symptoms
};

/// Window features, in model order.
inline constexpr std::array<std::string_view, 6> kWindowFeatures = {
    "n_very_high", "n_high", "n_moderate", "n_moderate_low", "n_low", "n_messages"};

struct WindowFeatures {
    std::array<double, 6> values{};    // see kWindowFeatures
    std::size_t high_distinct = 0;     // distinct high-tier symptoms
};

using TierMap = std::map<std::string, Tier>;

/// Counts, per tier, the window messages carrying at least one symptom of
/// that tier, plus the total message count.
template <typename Range>
WindowFeatures window_features(const Range& messages, const TierMap& tiers) {
    WindowFeatures f;
    std::set<std::string> high;
    for (const auto& item : messages) {
        const MessageRecord& m = [&]() -> const MessageRecord& {
            if constexpr (std::is_pointer_v<std::decay_t<decltype(item)>>) return *item;
            else return item;
        }();
        std::array<bool, 5> seen{};
        for (const auto& a : m.annotations) {
            auto it = tiers.find(a.sub2_id);
            if (it == tiers.end())
                throw Error("screen: message '" + m.message_id + "' carries untiered symptom '" + a.sub2_id + "'");
            seen[static_cast<std::size_t>(it->second)] = true;
            if (it->second == Tier::High) high.insert(a.sub2_id);
        }
        for (std::size_t t = 0; t < seen.size(); ++t)
            if (seen[t]) f.values[t] += 1.0;
        f.values[5] += 1.0;
    }
    f.high_distinct = high.size();
    return f;
}

struct ScreenerModel {
    ScreenRule rule;
    double intercept = 0.0;
    std::vector<double> coefficients = std::vector<double>(kWindowFeatures.size(), 0.0);
    double threshold = 0.5;
    double spec_target = 0.9;
    double prevalence = 0.10;

    double probability(const WindowFeatures& f) const {
        double z = intercept;
        for (std::size_t j = 0; j < f.values.size(); ++j) z += coefficients[j] * f.values[j];
        return sigmoid(z);
    }
};

enum class FlagReason { Rule, Score, None };

inline std::string_view to_string(FlagReason r) {
    return r == FlagReason::Rule ? "rule" : r == FlagReason::Score ? "score" : "none";
}

struct ScreenResult {
    bool flag = false;
    double prob = 0.0;
    FlagReason reason = FlagReason::None;
};

inline bool rule_fires(const WindowFeatures& f, const ScreenRule& rule) {
    return f.values[0] >= static_cast<double>(rule.min_very_high) ||
           f.high_distinct >= static_cast<std::size_t>(rule.min_high_distinct);
}

inline ScreenResult screen_patient(const WindowFeatures& f, const ScreenerModel& model) {
    ScreenResult r;
    r.prob = model.probability(f);
    bool by_rule = rule_fires(f, model.rule);
    bool by_score = r.prob >= model.threshold;
    r.flag = by_rule || by_score;
    r.reason = by_rule ? FlagReason::Rule : by_score ? FlagReason::Score : FlagReason::None;
    return r;
}

template <typename Range>
ScreenResult screen_patient(const Range& window_messages, const TierMap& tiers, const ScreenerModel& model) {
    return screen_patient(window_features(window_messages, tiers), model);
}

// =============================================================================
// Threshold calibration
// =============================================================================

/// {0, step, 2*step, ..., 1}; 101 values at the default step of 0.01.
inline std::vector<double> threshold_grid(double step = 0.01) {
    if (!(step > 0.0 && step <= 1.0)) throw Error("threshold grid step must lie in (0,1]");
    const auto n = static_cast<std::size_t>(std::llround(1.0 / step));
    if (std::abs(static_cast<double>(n) * step - 1.0) > 1e-9) throw Error("threshold grid step must divide 1");
    std::vector<double> grid;
    for (std::size_t i = 0; i <= n; ++i) grid.push_back(static_cast<double>(i) / static_cast<double>(n));
    return grid;
}

struct Calibration {
    double threshold = 1.0;
    double sensitivity = 0.0;
    double specificity = 1.0;
    std::optional<std::string> warning;
};

/// Highest-sensitivity grid threshold whose specificity is at least
/// `spec_target`; ties go to higher specificity, then lower threshold.
inline Calibration calibrate_threshold(std::span<const double> probs, const Labels& labels, double spec_target,
                                       double grid_step = 0.01) {
    if (probs.size() != labels.size()) throw Error("calibrate_threshold: probabilities and labels differ in length");
    std::size_t pos = 0;
    for (int y : labels) {
        if (y != 0 && y != 1) throw Error("calibrate_threshold: labels must be 0/1");
        pos += static_cast<std::size_t>(y);
    }
    const std::size_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0) throw Error("calibrate_threshold: labels contain a single class");
    std::optional<Calibration> best;
    for (double theta : threshold_grid(grid_step)) {
        std::size_t tp = 0, tn = 0;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            bool positive = probs[i] >= theta;
            if (labels[i] && positive) ++tp;
            if (!labels[i] && !positive) ++tn;
        }
        double se = static_cast<double>(tp) / static_cast<double>(pos);
        double sp = static_cast<double>(tn) / static_cast<double>(neg);
        if (sp < spec_target) continue;
        if (!best || se > best->sensitivity || (se == best->sensitivity && sp > best->specificity))
            best = Calibration{theta, se, sp, std::nullopt};
    }
    if (!best) {
        // Only reachable when spec_target > 1 or probabilities exceed 1.
        throw Error("calibrate_threshold: no grid threshold reaches the specificity target");
    }
    if (best->sensitivity == 0.0)
        best->warning = "degenerate calibration: no threshold meeting specificity " + fmt_double(spec_target) +
                        " flags any case";
    return *best;
}

// =============================================================================
// Metrics
// =============================================================================

struct MetricsReport {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::optional<double> sensitivity, specificity, ppv_adj, npv_adj, f1;
    double alert_burden = 0.0;
    std::size_t n_patients = 0;
    std::size_t n_messages = 0;
    int window = 0;
    std::string block_id;
};

inline std::optional<double> ratio(double num, double den) {
    if (den == 0.0) return std::nullopt;
    return num / den;
}

inline MetricsReport evaluate(const std::vector<bool>& flags, const Labels& labels, double prevalence = 0.10) {
    if (flags.size() != labels.size()) throw Error("evaluate: flags and labels differ in length");
    if (flags.empty()) throw Error("evaluate: empty input");
    if (!(prevalence > 0.0 && prevalence < 1.0)) throw Error("evaluate: prevalence must lie in (0,1)");
    MetricsReport r;
    for (std::size_t i = 0; i < flags.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw Error("evaluate: labels must be 0/1");
        if (labels[i]) (flags[i] ? r.tp : r.fn)++;
        else (flags[i] ? r.fp : r.tn)++;
    }
    const double tp = static_cast<double>(r.tp), fp = static_cast<double>(r.fp);
    const double tn = static_cast<double>(r.tn), fn = static_cast<double>(r.fn);
    r.n_patients = flags.size();
    r.sensitivity = ratio(tp, tp + fn);
    r.specificity = ratio(tn, tn + fp);
    const double pi = prevalence;
    if (r.sensitivity && r.specificity) {
        const double se = *r.sensitivity, sp = *r.specificity;
        r.ppv_adj = ratio(se * pi, se * pi + (1.0 - sp) * (1.0 - pi));
        r.npv_adj = ratio(sp * (1.0 - pi), sp * (1.0 - pi) + (1.0 - se) * pi);
    }
    r.f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn);
    r.alert_burden = (tp + fp) / static_cast<double>(r.n_patients);
    return r;
}

inline const std::string& metrics_csv_header() {
    static const std::string h =
        "window,block_id,n_patients,n_messages,tp,fp,tn,fn,sensitivity,specificity,ppv_adj,npv_adj,f1,alert_burden\n";
    return h;
}

inline std::string metrics_csv_row(const MetricsReport& r) {
    return std::to_string(r.window) + "," + csv_field(r.block_id) + "," + std::to_string(r.n_patients) + "," +
           std::to_string(r.n_messages) + "," + std::to_string(r.tp) + "," + std::to_string(r.fp) + "," +
           std::to_string(r.tn) + "," + std::to_string(r.fn) + "," + fmt_optional(r.sensitivity) + "," +
           fmt_optional(r.specificity) + "," + fmt_optional(r.ppv_adj) + "," + fmt_optional(r.npv_adj) + "," +
           fmt_optional(r.f1) + "," + fmt_double(r.alert_burden) + "\n";
}

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json to_json(const MetricsReport& r) {
    return {{"window", r.window},           {"block_id", r.block_id},       {"n_patients", r.n_patients},
            {"n_messages", r.n_messages},   {"tp", r.tp},                   {"fp", r.fp},
            {"tn", r.tn},                   {"fn", r.fn},                   {"sensitivity", optional_json(r.sensitivity)},
            {"specificity", optional_json(r.specificity)}, {"ppv_adj", optional_json(r.ppv_adj)},
            {"npv_adj", optional_json(r.npv_adj)},         {"f1", optional_json(r.f1)},
            {"alert_burden", r.alert_burden}};
}

// =============================================================================
// Logistic fit and model I/O
// =============================================================================

struct ScreenerConfig {
    ScreenRule rule;
    double spec_target = 0.9;
    double prevalence = 0.10;
    double grid_step = 0.01;
    double lambda = 0.01;  // ridge penalty of the logistic score
};

/// Fits the logistic score on calibration-window features and picks the
/// threshold on the same rows.
inline std::pair<ScreenerModel, Calibration> fit_screener(const std::vector<WindowFeatures>& features,
                                                          const Labels& labels, const ScreenerConfig& config) {
    if (features.size() != labels.size()) throw Error("fit_screener: features and labels differ in length");
    if (config.rule.min_very_high < 0 || config.rule.min_high_distinct < 0)
        throw Error("fit_screener: rule parameters must be non-negative");
    auto X = DesignMatrix::with_rows(features.size());
    for (std::size_t j = 0; j < kWindowFeatures.size(); ++j) {
        std::vector<double> col;
        for (const auto& f : features) col.push_back(f.values[j]);
        X.add_column(std::string(kWindowFeatures[j]), col);
    }
    ENConfig en;
    en.alpha = 0.0;
    en.tol = 1e-8;
    auto fit = fit_en_at(X, labels, config.lambda, en);
    ScreenerModel model;
    model.rule = config.rule;
    model.intercept = fit.intercept;
    model.coefficients = fit.coefficients;
    model.spec_target = config.spec_target;
    model.prevalence = config.prevalence;
    std::vector<double> probs;
    for (const auto& f : features) probs.push_back(model.probability(f));
    auto cal = calibrate_threshold(probs, labels, config.spec_target, config.grid_step);
    model.threshold = cal.threshold;
    return {model, cal};
}

inline json to_json(const ScreenerModel& m) {
    json coef = json::object();
    for (std::size_t j = 0; j < kWindowFeatures.size(); ++j) coef[std::string(kWindowFeatures[j])] = m.coefficients[j];
    return {{"rule", {{"min_very_high", m.rule.min_very_high}, {"min_high_distinct", m.rule.min_high_distinct}}},
            {"intercept", m.intercept},
            {"coefficients", coef},
            {"threshold", m.threshold},
            {"spec_target", m.spec_target},
            {"prevalence", m.prevalence}};
}

inline ScreenerModel screener_from_json(const json& j) {
    try {
        ScreenerModel m;
        m.rule.min_very_high = j.at("rule").at("min_very_high").get<int>();
        m.rule.min_high_distinct = j.at("rule").at("min_high_distinct").get<int>();
        m.intercept = j.at("intercept").get<double>();
        for (std::size_t k = 0; k < kWindowFeatures.size(); ++k)
            m.coefficients[k] = j.at("coefficients").at(std::string(kWindowFeatures[k])).get<double>();
        m.threshold = j.at("threshold").get<double>();
        m.spec_target = j.at("spec_target").get<double>();
        m.prevalence = j.at("prevalence").get<double>();
        if (!(m.threshold >= 0.0 && m.threshold <= 1.0)) throw Error("screener model: threshold outside [0,1]");
        if (m.rule.min_very_high < 0 || m.rule.min_high_distinct < 0)
            throw Error("screener model: negative rule parameter");
        return m;
    } catch (const json::exception& e) {
        throw Error(std::string("screener model: ") + e.what());
    }
}

} // namespace msgscreen
