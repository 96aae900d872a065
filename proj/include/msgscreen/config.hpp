#pragma once

// The single JSON run configuration: defaults, validation against the
// default schema, dotted `key=value` overrides, and conversion into typed
// pipeline and generator settings.

#include <fstream>

#include "msgscreen/simulator.hpp"

namespace msgscreen {

inline const json& default_config() {
    static const json j = json::parse(R"({
  "weights": {"stt": [0.66, 0.33], "composite": [0.6, 0.4]},
  "grid_step": 0.01,
  "spec_target": 0.9,
  "prevalence": 0.1,
  "very_high_quantile": 0.85,
  "tier_quantiles": [0.25, 0.5, 0.75],
  "windows": [3, 7, 14, 30, 60, 90],
  "observation_window_days": 120,
  "tau_days": 30.0,
  "min_relevance": 0.5,
  "seed": 20240801,
  "blocks": [
    {"block_id": "B1", "start": "2024-08-01", "end": "2024-12-01"},
    {"block_id": "B2", "start": "2024-12-01", "end": "2025-04-01"},
    {"block_id": "B3", "start": "2025-04-01", "end": "2025-08-01"}
  ],
  "calibration_block": "B1",
  "cohort": {"ratio": 1.0, "strata_keys": ["age_band", "sex"]},
  "taxonomy": {"seed_batch_size": 200, "update_batch_size": 50, "main_target": 10, "max_labels": 3, "max_in_flight": 4},
  "graph": {"semantic_threshold": 0.7, "patient_k": 5, "embedding_dim": 64},
  "gnn": {"layers": 2, "hidden": 32, "dropout": 0.2, "learning_rate": 0.001, "beta1": 0.9, "beta2": 0.999,
          "epsilon": 1e-8, "epochs": 200, "patience": 20, "activation": "relu"},
  "en": {"alpha": 1.0, "n_lambda": 50, "lambda_min_ratio": 0.001, "lambda": null, "tol": 1e-7, "max_iter": 10000,
         "folds": 5, "permutations": 10, "compare_pipelines": true},
  "screener": {"min_very_high": 1, "min_high_distinct": 2, "lambda": 0.01},
  "synthetic": {
    "n_cases": 150, "n_controls": 350, "vocabulary_size": 30,
    "planted": [
      {"sub2_id": "neuro.dizziness", "odds": 6.0, "mean_days": 4.0, "spread_days": 3.0},
      {"sub2_id": "neuro.speech", "odds": 6.0, "mean_days": 12.0, "spread_days": 6.0},
      {"sub2_id": "neuro.numbness", "odds": 6.0, "mean_days": 30.0, "spread_days": 12.0}
    ],
    "planted_case_rate": 0.6, "planted_extra_messages": 0.5, "background_rate": 0.010, "case_background_multiplier": 4.0, "admin_fraction": 0.3,
    "span_start": "2024-08-01", "span_end": "2025-08-01", "history_days": 120,
    "age_band_weights": [0.15, 0.2, 0.3, 0.2, 0.15], "female_fraction": 0.5, "comorbidity_case_multiplier": 1.5
  }
})");
    return j;
}

namespace detail {

inline bool compatible(const json& schema, const json& value) {
    if (schema.is_null()) return value.is_null() || value.is_number();
    if (schema.is_number_integer() || schema.is_number_unsigned()) return value.is_number_integer() || value.is_number_unsigned();
    if (schema.is_number()) return value.is_number();
    return schema.type() == value.type();
}

inline void merge_into(json& base, const json& user, const std::string& prefix) {
    if (!user.is_object()) throw Error("config: '" + (prefix.empty() ? std::string("<root>") : prefix) + "' must be an object");
    for (const auto& [key, value] : user.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        auto it = base.find(key);
        if (it == base.end()) throw Error("config: unknown field '" + path + "'");
        if (!compatible(*it, value)) throw Error("config: field '" + path + "' has the wrong type");
        if (it->is_object()) merge_into(*it, value, path);
        else *it = value;
    }
}

} // namespace detail

/// Overlays `user` onto the defaults; unknown fields and type mismatches
/// are errors naming the field.
inline json merge_config(const json& user) {
    json out = default_config();
    detail::merge_into(out, user, "");
    return out;
}

inline json load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config '" + path + "'");
    json user;
    try {
        user = json::parse(in);
    } catch (const json::exception& e) {
        throw Error("config '" + path + "': " + e.what());
    }
    try {
        return merge_config(user);
    } catch (const Error& e) {
        throw Error("config '" + path + "': " + e.what());
    }
}

/// Applies "a.b.c=value". The value is parsed as JSON when possible and
/// taken as a string otherwise.
inline void apply_override(json& config, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw Error("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    json user = value;
    std::vector<std::string> parts;
    for (std::size_t pos = 0;;) {
        auto dot = key.find('.', pos);
        parts.push_back(key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos));
        if (dot == std::string::npos) break;
        pos = dot + 1;
    }
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) user = json{{*it, user}};
    detail::merge_into(config, user, "");
}

/// Canonical (sorted-key, compact) FNV-1a hash of a configuration.
inline std::string config_hash(const json& config) { return hex64(fnv1a64(config.dump())); }

namespace detail {

template <typename T>
T field(const json& j, const char* key, const std::string& prefix) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw Error("config: field '" + (prefix.empty() ? std::string(key) : prefix + "." + key) + "' is missing or invalid");
    }
}

inline std::size_t count_field(const json& j, const char* key, const std::string& prefix) {
    auto v = field<long long>(j, key, prefix);
    if (v < 0) throw Error("config: field '" + prefix + "." + key + "' must be >= 0");
    return static_cast<std::size_t>(v);
}

inline Date date_field(const json& j, const char* key, const std::string& prefix) {
    return require_date(field<std::string>(j, key, prefix), prefix + "." + key);
}

} // namespace detail

inline PipelineConfig pipeline_config(const json& c) {
    using detail::count_field;
    using detail::field;
    PipelineConfig p;
    p.seed = field<std::uint64_t>(c, "seed", "");

    const auto stt = field<std::vector<double>>(c.at("weights"), "stt", "weights");
    const auto comp = field<std::vector<double>>(c.at("weights"), "composite", "weights");
    if (stt.size() != 2 || comp.size() != 2) throw Error("config: weights.stt and weights.composite need two values");
    p.tiers.stt_w7 = stt[0];
    p.tiers.stt_w30 = stt[1];
    p.tiers.w_assoc = comp[0];
    p.tiers.w_stt = comp[1];
    p.tiers.tier_quantiles = field<std::vector<double>>(c, "tier_quantiles", "");
    const auto& q = p.tiers.tier_quantiles;
    if (q.size() != 3 || !(q[0] > 0.0 && q[0] < q[1] && q[1] < q[2] && q[2] < 1.0))
        throw Error("config: field 'tier_quantiles' must be three increasing values in (0,1)");
    p.tiers.very_high_quantile = field<double>(c, "very_high_quantile", "");
    if (!(p.tiers.very_high_quantile > 0.0 && p.tiers.very_high_quantile < 1.0))
        throw Error("config: field 'very_high_quantile' must lie in (0,1)");
    p.tiers.observation_days = field<int>(c, "observation_window_days", "");
    if (p.tiers.observation_days < 1) throw Error("config: field 'observation_window_days' must be >= 1");

    p.screener.grid_step = field<double>(c, "grid_step", "");
    p.screener.spec_target = field<double>(c, "spec_target", "");
    if (!(p.screener.spec_target >= 0.0 && p.screener.spec_target <= 1.0))
        throw Error("config: field 'spec_target' must lie in [0,1]");
    p.screener.prevalence = field<double>(c, "prevalence", "");
    if (!(p.screener.prevalence > 0.0 && p.screener.prevalence < 1.0))
        throw Error("config: field 'prevalence' must lie in (0,1)");
    threshold_grid(p.screener.grid_step);
    const auto& s = c.at("screener");
    p.screener.rule.min_very_high = field<int>(s, "min_very_high", "screener");
    p.screener.rule.min_high_distinct = field<int>(s, "min_high_distinct", "screener");
    if (p.screener.rule.min_very_high < 0 || p.screener.rule.min_high_distinct < 0)
        throw Error("config: screener rule parameters must be >= 0");
    p.screener.lambda = field<double>(s, "lambda", "screener");
    if (!(p.screener.lambda > 0.0)) throw Error("config: field 'screener.lambda' must be > 0");

    p.windows = field<std::vector<int>>(c, "windows", "");
    if (p.windows.empty()) throw Error("config: field 'windows' is empty");
    for (int w : p.windows)
        if (w < 1) throw Error("config: field 'windows' must hold positive day counts");

    p.graph.tau_days = field<double>(c, "tau_days", "");
    if (!(p.graph.tau_days > 0.0)) throw Error("config: field 'tau_days' must be > 0");
    p.graph.min_relevance = field<double>(c, "min_relevance", "");
    if (!(p.graph.min_relevance >= 0.0 && p.graph.min_relevance <= 1.0))
        throw Error("config: field 'min_relevance' must lie in [0,1]");
    const auto& g = c.at("graph");
    p.graph.semantic_threshold = field<double>(g, "semantic_threshold", "graph");
    p.graph.patient_k = count_field(g, "patient_k", "graph");
    p.embedding_dim = count_field(g, "embedding_dim", "graph");
    if (p.embedding_dim == 0) throw Error("config: field 'graph.embedding_dim' must be >= 1");

    const auto& t = c.at("taxonomy");
    p.taxonomy.seed_batch_size = count_field(t, "seed_batch_size", "taxonomy");
    p.taxonomy.update_batch_size = count_field(t, "update_batch_size", "taxonomy");
    p.taxonomy.main_target = field<int>(t, "main_target", "taxonomy");
    p.taxonomy.max_labels = count_field(t, "max_labels", "taxonomy");
    p.taxonomy.max_in_flight = count_field(t, "max_in_flight", "taxonomy");
    if (p.taxonomy.seed_batch_size == 0 || p.taxonomy.update_batch_size == 0)
        throw Error("config: taxonomy batch sizes must be >= 1");

    const auto& n = c.at("gnn");
    p.gnn.layers = count_field(n, "layers", "gnn");
    p.gnn.hidden = count_field(n, "hidden", "gnn");
    p.gnn.dropout = field<double>(n, "dropout", "gnn");
    p.gnn.learning_rate = field<double>(n, "learning_rate", "gnn");
    p.gnn.beta1 = field<double>(n, "beta1", "gnn");
    p.gnn.beta2 = field<double>(n, "beta2", "gnn");
    p.gnn.epsilon = field<double>(n, "epsilon", "gnn");
    p.gnn.epochs = count_field(n, "epochs", "gnn");
    p.gnn.patience = count_field(n, "patience", "gnn");
    const auto act = field<std::string>(n, "activation", "gnn");
    if (act == "relu") p.gnn.activation = Activation::ReLU;
    else if (act == "identity") p.gnn.activation = Activation::Identity;
    else throw Error("config: field 'gnn.activation' must be 'relu' or 'identity'");
    try {
        check_config(p.gnn);
    } catch (const Error& e) {
        throw Error(std::string("config: gnn: ") + e.what());
    }

    const auto& e = c.at("en");
    p.en.alpha = field<double>(e, "alpha", "en");
    if (!(p.en.alpha >= 0.0 && p.en.alpha <= 1.0)) throw Error("config: field 'en.alpha' must lie in [0,1]");
    p.en.n_lambda = count_field(e, "n_lambda", "en");
    p.en.lambda_min_ratio = field<double>(e, "lambda_min_ratio", "en");
    if (!e.at("lambda").is_null()) {
        p.en.lambda = e.at("lambda").get<double>();
        if (!(*p.en.lambda > 0.0)) throw Error("config: field 'en.lambda' must be > 0");
    }
    p.en.tol = field<double>(e, "tol", "en");
    p.en.max_iter = count_field(e, "max_iter", "en");
    p.en.folds = count_field(e, "folds", "en");
    p.en.permutations = count_field(e, "permutations", "en");
    p.compare_pipelines = field<bool>(e, "compare_pipelines", "en");

    for (const auto& b : c.at("blocks")) {
        TemporalBlock tb;
        tb.block_id = detail::field<std::string>(b, "block_id", "blocks[]");
        tb.start = detail::date_field(b, "start", "blocks[]");
        tb.end = detail::date_field(b, "end", "blocks[]");
        p.blocks.push_back(tb);
    }
    if (p.blocks.empty()) throw Error("config: field 'blocks' is empty");
    try {
        validate_blocks(p.blocks);
    } catch (const Error& err) {
        throw Error(std::string("config: blocks: ") + err.what());
    }
    p.calibration_block = field<std::string>(c, "calibration_block", "");
    if (std::none_of(p.blocks.begin(), p.blocks.end(), [&](const auto& b) { return b.block_id == p.calibration_block; }))
        throw Error("config: field 'calibration_block' names an undefined block '" + p.calibration_block + "'");

    const auto& co = c.at("cohort");
    p.cohort_ratio = field<double>(co, "ratio", "cohort");
    if (!(p.cohort_ratio > 0.0)) throw Error("config: field 'cohort.ratio' must be > 0");
    p.strata_keys = field<std::vector<std::string>>(co, "strata_keys", "cohort");
    for (const auto& k : p.strata_keys)
        if (std::find(matching_attributes().begin(), matching_attributes().end(), k) == matching_attributes().end())
            throw Error("config: field 'cohort.strata_keys' has unknown key '" + k + "'");
    return p;
}

inline SyntheticSpec synthetic_spec(const json& c) {
    using detail::count_field;
    using detail::field;
    const auto& s = c.at("synthetic");
    const std::string pre = "synthetic";
    SyntheticSpec spec;
    spec.n_cases = count_field(s, "n_cases", pre);
    spec.n_controls = count_field(s, "n_controls", pre);
    spec.vocabulary_size = count_field(s, "vocabulary_size", pre);
    spec.planted.clear();
    for (const auto& p : s.at("planted"))
        spec.planted.push_back({field<std::string>(p, "sub2_id", pre + ".planted[]"), field<double>(p, "odds", pre + ".planted[]"),
                                field<double>(p, "mean_days", pre + ".planted[]"),
                                field<double>(p, "spread_days", pre + ".planted[]")});
    spec.planted_case_rate = field<double>(s, "planted_case_rate", pre);
    spec.planted_extra_messages = field<double>(s, "planted_extra_messages", pre);
    spec.case_background_multiplier = field<double>(s, "case_background_multiplier", pre);
    spec.background_rate = field<double>(s, "background_rate", pre);
    spec.admin_fraction = field<double>(s, "admin_fraction", pre);
    spec.span_start = detail::date_field(s, "span_start", pre);
    spec.span_end = detail::date_field(s, "span_end", pre);
    spec.history_days = field<int>(s, "history_days", pre);
    spec.age_band_weights = field<std::vector<double>>(s, "age_band_weights", pre);
    spec.female_fraction = field<double>(s, "female_fraction", pre);
    spec.comorbidity_case_multiplier = field<double>(s, "comorbidity_case_multiplier", pre);
    spec.seed = mix_seed(field<std::uint64_t>(c, "seed", ""), 4);
    try {
        validate_spec(spec);
    } catch (const Error& e) {
        throw Error(std::string("config: ") + e.what());
    }
    return spec;
}

} // namespace msgscreen
