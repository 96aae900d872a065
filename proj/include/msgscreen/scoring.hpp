#pragma once

// Temporal proximity (pct7 / pct30 and day-offset curves), the event
// association and composite screening scores, and risk tiers.

#include <fstream>
#include <map>
#include <set>

#include "msgscreen/corpus.hpp"

namespace msgscreen {

enum class Tier { VeryHigh, High, Moderate, ModerateLow, Low };

inline constexpr std::array<std::string_view, 5> kTierNames = {"very-high", "high", "moderate", "moderate-low", "low"};

inline std::string_view to_string(Tier t) { return kTierNames[static_cast<std::size_t>(t)]; }

inline Tier parse_tier(std::string_view s) {
    for (std::size_t i = 0; i < kTierNames.size(); ++i)
        if (kTierNames[i] == s) return static_cast<Tier>(i);
    throw Error("unknown tier '" + std::string(s) + "'");
}

struct TierConfig {
    double w_assoc = 0.6;
    double w_stt = 0.4;
    double stt_w7 = 0.66;
    double stt_w30 = 0.33;
    std::vector<double> tier_quantiles = {0.25, 0.5, 0.75};  // rank fractions from the top
    double very_high_quantile = 0.85;
    int observation_days = 120;
};

// =============================================================================
// Temporal proximity
// =============================================================================

struct Proximity {
    double pct7 = 0.0;
    double pct30 = 0.0;
    std::size_t n_window = 0;
    std::map<int, double> curve;  // day offset (negative) -> share of windowed messages
};

/// For each symptom, the share of case messages in the observation window
/// [anchor - W, anchor) that fall within 7 and 30 days of the anchor, and the
/// per-day distribution. `anchors` maps case patient ids to their anchor; a
/// message counts once per distinct symptom label.
inline std::map<std::string, Proximity> temporal_proximity(std::span<const MessageRecord> messages,
                                                           const std::map<std::string, Date>& anchors,
                                                           const TierConfig& config = {}) {
    const int w = config.observation_days;
    if (w < 1) throw Error("temporal_proximity: observation window must be >= 1 day");
    std::map<std::string, std::map<int, std::size_t>> counts;
    for (const auto& m : messages) {
        auto it = anchors.find(m.patient_id);
        if (it == anchors.end() || !in_window(m.ts, it->second, w)) continue;
        int offset = days_between(it->second, m.ts);
        std::set<std::string> seen;
        for (const auto& a : m.annotations)
            if (seen.insert(a.sub2_id).second) ++counts[a.sub2_id][offset];
    }
    std::map<std::string, Proximity> out;
    for (const auto& [sub2, by_day] : counts) {
        Proximity p;
        std::size_t n7 = 0, n30 = 0;
        for (const auto& [d, c] : by_day) {
            p.n_window += c;
            if (d >= -7) n7 += c;
            if (d >= -30) n30 += c;
        }
        const double n = static_cast<double>(p.n_window);
        p.pct7 = static_cast<double>(n7) / n;
        p.pct30 = static_cast<double>(n30) / n;
        for (const auto& [d, c] : by_day) p.curve[d] = static_cast<double>(c) / n;
        out[sub2] = std::move(p);
    }
    return out;
}

/// w7 * pct7 + w30 * pct30 (0.66 and 0.33 by default).
inline double short_term_temporal(double pct7, double pct30, const TierConfig& config = {}) {
    if (!(pct7 >= 0.0 && pct7 <= 1.0) || !(pct30 >= 0.0 && pct30 <= 1.0))
        throw Error("short_term_temporal: inputs must lie in [0,1]");
    return config.stt_w7 * pct7 + config.stt_w30 * pct30;
}

// =============================================================================
// Event association and composite
// =============================================================================

namespace detail {

inline std::vector<double> zscores(std::span<const double> v) {
    const double m = mean(v);
    const double sd = stddev(v);
    std::vector<double> z(v.size(), 0.0);
    if (!(sd > 0.0)) return z;
    for (std::size_t i = 0; i < v.size(); ++i) z[i] = (v[i] - m) / sd;
    return z;
}

template <typename V>
void check_same_keys(const std::map<std::string, double>& a, const std::map<std::string, V>& b, const char* what) {
    bool same = a.size() == b.size() &&
                std::equal(a.begin(), a.end(), b.begin(), [](const auto& x, const auto& y) { return x.first == y.first; });
    if (!same) throw Error(std::string(what) + ": inputs cover different symptom sets");
}

} // namespace detail

/// Mean of the z-scores (population sd; sd = 0 gives all-zero z) of the GNN
/// event delta and the EN permutation score.
inline std::map<std::string, double> event_association(const std::map<std::string, double>& gnn_deltas,
                                                       const std::map<std::string, double>& en_perms) {
    detail::check_same_keys(gnn_deltas, en_perms, "event_association");
    if (gnn_deltas.empty()) throw Error("event_association: empty symptom set");
    std::vector<double> g, e;
    for (const auto& [k, v] : gnn_deltas) g.push_back(v);
    for (const auto& [k, v] : en_perms) e.push_back(v);
    auto zg = detail::zscores(g);
    auto ze = detail::zscores(e);
    std::map<std::string, double> out;
    std::size_t i = 0;
    for (const auto& [k, v] : gnn_deltas) {
        out[k] = (zg[i] + ze[i]) / 2.0;
        ++i;
    }
    return out;
}

/// w_assoc * minmax(event_assoc) + w_stt * minmax(stt).
inline std::map<std::string, double> composite_score(const std::map<std::string, double>& assoc,
                                                     const std::map<std::string, double>& stt,
                                                     const TierConfig& config = {}) {
    if (assoc.empty()) throw Error("composite_score: empty input");
    detail::check_same_keys(assoc, stt, "composite_score");
    std::vector<double> a, s;
    for (const auto& [k, v] : assoc) a.push_back(v);
    for (const auto& [k, v] : stt) s.push_back(v);
    auto an = minmax_normalize(a);
    auto sn = minmax_normalize(s);
    std::map<std::string, double> out;
    std::size_t i = 0;
    for (const auto& [k, v] : assoc) {
        out[k] = config.w_assoc * an[i] + config.w_stt * sn[i];
        ++i;
    }
    return out;
}

// =============================================================================
// Tiers
// =============================================================================

struct SymptomScoreRow {
    std::string sub2_id;
    std::string label;
    double gnn_delta = 0.0;
    double en_perm = 0.0;
    double event_assoc = 0.0;
    double pct7 = 0.0;
    double pct30 = 0.0;
    double stt = 0.0;
    double composite = 0.0;
    Tier tier = Tier::Low;
};

/// Rank-based tiers: symptoms ordered by composite (descending, ties by id)
/// are cut at the configured rank fractions into high / moderate /
/// moderate-low / low. A symptom whose stt reaches the `very_high_quantile`
/// quantile of stt, and is above the minimum stt, becomes very-high.
inline std::map<std::string, Tier> assign_tiers(const std::vector<SymptomScoreRow>& table, const TierConfig& config = {}) {
    if (table.empty()) throw Error("assign_tiers: empty table");
    const auto& q = config.tier_quantiles;
    if (q.size() != 3 || !(q[0] > 0.0 && q[0] < q[1] && q[1] < q[2] && q[2] < 1.0))
        throw Error("assign_tiers: tier quantiles must be three increasing values in (0,1)");
    std::vector<const SymptomScoreRow*> order;
    for (const auto& r : table) order.push_back(&r);
    std::sort(order.begin(), order.end(), [](auto* a, auto* b) {
        if (a->composite != b->composite) return a->composite > b->composite;
        return a->sub2_id < b->sub2_id;
    });
    std::map<std::string, Tier> out;
    const double n = static_cast<double>(order.size());
    for (std::size_t r = 0; r < order.size(); ++r) {
        double frac = static_cast<double>(r) / n;
        Tier t = frac < q[0] ? Tier::High : frac < q[1] ? Tier::Moderate : frac < q[2] ? Tier::ModerateLow : Tier::Low;
        out[order[r]->sub2_id] = t;
    }
    std::vector<double> stt;
    for (const auto& r : table) stt.push_back(r.stt);
    const double cut = quantile(stt, config.very_high_quantile);
    const double lowest = *std::min_element(stt.begin(), stt.end());
    for (const auto& r : table)
        if (r.stt >= cut && r.stt > lowest) out[r.sub2_id] = Tier::VeryHigh;
    return out;
}

/// Assembles the score table over `symptoms` (id -> label). Symptoms absent
/// from an input map get 0 for that input.
inline std::vector<SymptomScoreRow> build_score_table(const std::map<std::string, std::string>& symptoms,
                                                      const std::map<std::string, double>& gnn_deltas,
                                                      const std::map<std::string, double>& en_perms,
                                                      const std::map<std::string, Proximity>& proximity,
                                                      const TierConfig& config = {}) {
    if (symptoms.empty()) throw Error("build_score_table: empty symptom set");
    auto get = [](const auto& m, const std::string& k) {
        auto it = m.find(k);
        return it == m.end() ? 0.0 : it->second;
    };
    std::map<std::string, double> g, e, s;
    std::vector<SymptomScoreRow> rows;
    for (const auto& [id, label] : symptoms) {
        SymptomScoreRow r;
        r.sub2_id = id;
        r.label = label;
        r.gnn_delta = get(gnn_deltas, id);
        r.en_perm = get(en_perms, id);
        if (auto it = proximity.find(id); it != proximity.end()) {
            r.pct7 = it->second.pct7;
            r.pct30 = it->second.pct30;
        }
        r.stt = short_term_temporal(r.pct7, r.pct30, config);
        g[id] = r.gnn_delta;
        e[id] = r.en_perm;
        s[id] = r.stt;
        rows.push_back(std::move(r));
    }
    auto assoc = event_association(g, e);
    auto comp = composite_score(assoc, s, config);
    for (auto& r : rows) {
        r.event_assoc = assoc.at(r.sub2_id);
        r.composite = comp.at(r.sub2_id);
    }
    auto tiers = assign_tiers(rows, config);
    for (auto& r : rows) r.tier = tiers.at(r.sub2_id);
    return rows;
}

// =============================================================================
// CSV
// =============================================================================

inline std::string scores_csv(const std::vector<SymptomScoreRow>& rows) {
    std::string s = "sub2_id,label,gnn_delta,en_perm,event_assoc,pct7,pct30,stt,composite,tier\n";
    for (const auto& r : rows)
        s += csv_field(r.sub2_id) + "," + csv_field(r.label) + "," + fmt_double(r.gnn_delta) + "," +
             fmt_double(r.en_perm) + "," + fmt_double(r.event_assoc) + "," + fmt_double(r.pct7) + "," +
             fmt_double(r.pct30) + "," + fmt_double(r.stt) + "," + fmt_double(r.composite) + "," +
             std::string(to_string(r.tier)) + "\n";
    return s;
}

inline std::vector<SymptomScoreRow> read_scores_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    std::string line;
    std::getline(in, line);
    std::vector<SymptomScoreRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto f = csv_split(line);
        if (f.size() != 10) throw Error(path + ":" + std::to_string(lineno) + ": expected 10 fields");
        try {
            rows.push_back({f[0], f[1], std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5]),
                            std::stod(f[6]), std::stod(f[7]), std::stod(f[8]), parse_tier(f[9])});
        } catch (const std::invalid_argument&) {
            throw Error(path + ":" + std::to_string(lineno) + ": invalid number");
        }
    }
    return rows;
}

/// Long format: sub2_id,day_offset,probability.
inline std::string proximity_csv(const std::map<std::string, Proximity>& prox) {
    std::string s = "sub2_id,day_offset,probability\n";
    for (const auto& [id, p] : prox)
        for (const auto& [d, v] : p.curve) s += csv_field(id) + "," + std::to_string(d) + "," + fmt_double(v) + "\n";
    return s;
}

} // namespace msgscreen
