#pragma once

// Patients, messages, matched cohorts, screening windows and temporal blocks.

#include <array>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "msgscreen/common.hpp"

namespace msgscreen {

using json = nlohmann::json;

// =============================================================================
// Records
// =============================================================================

struct Annotation {
    std::string sub2_id;
    double confidence = 1.0;

    bool operator==(const Annotation&) const = default;
};

struct MessageRecord {
    std::string message_id;
    std::string patient_id;
    Date ts{};
    std::string text;
    std::vector<Annotation> annotations;  // empty until annotated
};

enum class AgeBand { A18_34, A35_49, A50_64, A65_74, A75Plus };

inline constexpr std::array<std::string_view, 5> kAgeBandNames = {"18-34", "35-49", "50-64",
                                                                   "65-74", "75+"};

inline std::string_view to_string(AgeBand b) { return kAgeBandNames[static_cast<std::size_t>(b)]; }

inline std::optional<AgeBand> parse_age_band(std::string_view s) {
    for (std::size_t i = 0; i < kAgeBandNames.size(); ++i)
        if (kAgeBandNames[i] == s) return static_cast<AgeBand>(i);
    return std::nullopt;
}

/// Attributes usable as matching strata, in canonical order.
inline const std::vector<std::string>& matching_attributes() {
    static const std::vector<std::string> names = {"age_band", "race", "ethnicity", "sex",
                                                   "marital_status"};
    return names;
}

struct PatientRecord {
    std::string patient_id;
    AgeBand age_band = AgeBand::A50_64;
    std::string race = "Unknown";
    std::string ethnicity = "Unknown";
    std::string sex = "Unknown";
    std::string marital_status = "Unknown";
    std::set<std::string> comorbidities;
    bool event = false;
    std::optional<Date> event_date;
    /// Case: event_date. Control: the paired case's event_date.
    std::optional<Date> anchor_date;

    std::string attribute(std::string_view name) const {
        if (name == "age_band") return std::string(to_string(age_band));
        if (name == "race") return race;
        if (name == "ethnicity") return ethnicity;
        if (name == "sex") return sex;
        if (name == "marital_status") return marital_status;
        throw Error("unknown patient attribute '" + std::string(name) + "'");
    }
};

// =============================================================================
// NDJSON encoding
// =============================================================================

inline json to_json(const MessageRecord& m) {
    json j = {{"message_id", m.message_id},
              {"patient_id", m.patient_id},
              {"ts", format_date(m.ts)},
              {"text", m.text}};
    if (!m.annotations.empty()) {
        json labels = json::array();
        for (const auto& a : m.annotations)
            labels.push_back({{"sub2_id", a.sub2_id}, {"confidence", a.confidence}});
        j["annotations"] = std::move(labels);
    }
    return j;
}

inline json to_json(const PatientRecord& p) {
    json j = {{"patient_id", p.patient_id},
              {"age_band", std::string(to_string(p.age_band))},
              {"race", p.race},
              {"ethnicity", p.ethnicity},
              {"sex", p.sex},
              {"marital_status", p.marital_status},
              {"comorbidities", p.comorbidities},
              {"event", p.event},
              {"event_date", p.event_date ? json(format_date(*p.event_date)) : json(nullptr)}};
    if (p.anchor_date) j["anchor_date"] = format_date(*p.anchor_date);
    return j;
}

namespace detail {

inline std::string required_string(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end() || !it->is_string()) throw Error(std::string("missing string field '") + key + "'");
    return it->get<std::string>();
}

inline std::string attribute_string(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return "Unknown";
    if (!it->is_string()) throw Error(std::string("field '") + key + "' must be a string");
    auto s = it->get<std::string>();
    if (s.empty()) throw Error(std::string("field '") + key + "' is empty (use \"Unknown\")");
    return s;
}

} // namespace detail

inline MessageRecord message_from_json(const json& j) {
    MessageRecord m;
    m.message_id = detail::required_string(j, "message_id");
    m.patient_id = detail::required_string(j, "patient_id");
    m.ts = require_date(detail::required_string(j, "ts"), "ts");
    m.text = j.contains("text") && j["text"].is_string() ? j["text"].get<std::string>() : "";
    if (auto it = j.find("annotations"); it != j.end()) {
        for (const auto& a : *it) {
            Annotation ann{detail::required_string(a, "sub2_id"), a.value("confidence", 1.0)};
            if (!(ann.confidence >= 0.0 && ann.confidence <= 1.0))
                throw Error("annotation confidence outside [0,1]");
            m.annotations.push_back(std::move(ann));
        }
    }
    return m;
}

inline PatientRecord patient_from_json(const json& j) {
    PatientRecord p;
    p.patient_id = detail::required_string(j, "patient_id");
    auto band = detail::required_string(j, "age_band");
    auto parsed = parse_age_band(band);
    if (!parsed) throw Error("unknown age_band '" + band + "'");
    p.age_band = *parsed;
    p.race = detail::attribute_string(j, "race");
    p.ethnicity = detail::attribute_string(j, "ethnicity");
    p.sex = detail::attribute_string(j, "sex");
    p.marital_status = detail::attribute_string(j, "marital_status");
    if (auto it = j.find("comorbidities"); it != j.end() && !it->is_null())
        for (const auto& c : *it) p.comorbidities.insert(c.get<std::string>());
    auto ev = j.find("event");
    if (ev == j.end() || !ev->is_boolean()) throw Error("missing boolean field 'event'");
    p.event = ev->get<bool>();
    if (auto it = j.find("event_date"); it != j.end() && !it->is_null())
        p.event_date = require_date(it->get<std::string>(), "event_date");
    if (p.event && !p.event_date) throw Error("event=true without event_date");
    if (auto it = j.find("anchor_date"); it != j.end() && !it->is_null())
        p.anchor_date = require_date(it->get<std::string>(), "anchor_date");
    if (p.event && !p.anchor_date) p.anchor_date = p.event_date;
    return p;
}

/// Calls `fn(json, line_number)` for each non-blank line of an NDJSON file.
template <typename Fn>
void for_each_ndjson(const std::string& path, Fn&& fn) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            fn(json::parse(line), lineno);
        } catch (const json::exception& e) {
            throw Error(path + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const Error& e) {
            throw Error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

template <typename Range>
void write_ndjson(const std::string& path, const Range& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path + "'");
    for (const auto& r : records) out << to_json(r).dump() << '\n';
    if (!out) throw Error("write failed for '" + path + "'");
}

// =============================================================================
// Corpus
// =============================================================================

/// Messages sorted by (ts, message_id), patients sorted by patient_id,
/// with a per-patient message index. Immutable once built.
class Corpus {
public:
    Corpus() = default;

    Corpus(std::vector<MessageRecord> messages, std::vector<PatientRecord> patients)
        : messages_(std::move(messages)), patients_(std::move(patients)) {
        std::unordered_set<std::string> ids;
        for (const auto& m : messages_)
            if (!ids.insert(m.message_id).second)
                throw Error("duplicate message_id '" + m.message_id + "'");
        std::unordered_set<std::string> pids;
        for (const auto& p : patients_) {
            if (!pids.insert(p.patient_id).second)
                throw Error("duplicate patient_id '" + p.patient_id + "'");
            if (p.event && !p.event_date)
                throw Error("patient '" + p.patient_id + "': event=true without event_date");
        }
        std::sort(messages_.begin(), messages_.end(), [](const auto& a, const auto& b) {
            return std::tie(a.ts, a.message_id) < std::tie(b.ts, b.message_id);
        });
        std::sort(patients_.begin(), patients_.end(),
                  [](const auto& a, const auto& b) { return a.patient_id < b.patient_id; });
        for (std::size_t i = 0; i < patients_.size(); ++i) patient_index_[patients_[i].patient_id] = i;
        for (std::size_t i = 0; i < messages_.size(); ++i)
            by_patient_[messages_[i].patient_id].push_back(i);
    }

    const std::vector<MessageRecord>& messages() const { return messages_; }
    const std::vector<PatientRecord>& patients() const { return patients_; }

    const PatientRecord* find_patient(const std::string& id) const {
        auto it = patient_index_.find(id);
        return it == patient_index_.end() ? nullptr : &patients_[it->second];
    }

    /// Messages of one patient, ordered by (ts, message_id).
    std::vector<const MessageRecord*> messages_of(const std::string& patient_id) const {
        std::vector<const MessageRecord*> out;
        if (auto it = by_patient_.find(patient_id); it != by_patient_.end())
            for (auto i : it->second) out.push_back(&messages_[i]);
        return out;
    }

    std::vector<PatientRecord> cases() const { return filter(true); }
    std::vector<PatientRecord> controls() const { return filter(false); }

private:
    std::vector<PatientRecord> filter(bool event) const {
        std::vector<PatientRecord> out;
        for (const auto& p : patients_)
            if (p.event == event) out.push_back(p);
        return out;
    }

    std::vector<MessageRecord> messages_;
    std::vector<PatientRecord> patients_;
    std::unordered_map<std::string, std::size_t> patient_index_;
    std::unordered_map<std::string, std::vector<std::size_t>> by_patient_;
};

inline std::vector<MessageRecord> load_messages(const std::string& path) {
    std::vector<MessageRecord> out;
    std::unordered_set<std::string> ids;
    for_each_ndjson(path, [&](const json& j, std::size_t) {
        auto m = message_from_json(j);
        if (!ids.insert(m.message_id).second) throw Error("duplicate message_id '" + m.message_id + "'");
        out.push_back(std::move(m));
    });
    return out;
}

inline std::vector<PatientRecord> load_patients(const std::string& path) {
    std::vector<PatientRecord> out;
    std::unordered_set<std::string> ids;
    for_each_ndjson(path, [&](const json& j, std::size_t) {
        auto p = patient_from_json(j);
        if (!ids.insert(p.patient_id).second) throw Error("duplicate patient_id '" + p.patient_id + "'");
        out.push_back(std::move(p));
    });
    return out;
}

/// Reads messages.ndjson and patients.ndjson. Errors carry file and line.
inline Corpus load_corpus(const std::string& messages_path, const std::string& patients_path) {
    return Corpus(load_messages(messages_path), load_patients(patients_path));
}

// =============================================================================
// Cohort matching
// =============================================================================

struct CohortSpec {
    double ratio = 1.0;  // controls per case
    std::vector<std::string> strata_keys = matching_attributes();
    bool oversample_cases = false;  // discovery mode: requires ratio < 1
    std::uint64_t seed = 0;
};

struct StratumShortfall {
    std::vector<std::string> stratum;
    std::size_t cases = 0;
    std::size_t required = 0;
    std::size_t available = 0;
    std::size_t deficit = 0;
};

struct Cohort {
    std::vector<PatientRecord> cases;
    std::vector<PatientRecord> controls;
    std::vector<std::string> paired_case;  // parallel to controls
    std::vector<StratumShortfall> shortfall;

    std::vector<PatientRecord> patients() const {
        auto out = cases;
        out.insert(out.end(), controls.begin(), controls.end());
        return out;
    }
};

inline std::vector<std::string> stratum_of(const PatientRecord& p, const std::vector<std::string>& keys) {
    std::vector<std::string> s;
    s.reserve(keys.size());
    for (const auto& k : keys) s.push_back(p.attribute(k));
    return s;
}

/// Exact stratified frequency matching. Per stratum, round(ratio * cases)
/// controls are drawn without replacement; each is paired round-robin to a
/// case of its stratum and anchored at that case's event date.
inline Cohort match_controls(const std::vector<PatientRecord>& cases,
                             const std::vector<PatientRecord>& control_pool, const CohortSpec& spec) {
    if (cases.empty()) throw Error("match_controls: empty case set");
    if (!(spec.ratio > 0.0) || !std::isfinite(spec.ratio)) throw Error("match_controls: ratio must be > 0");
    if (spec.oversample_cases && spec.ratio >= 1.0)
        throw Error("match_controls: oversample_cases requires ratio < 1");
    for (const auto& k : spec.strata_keys)
        if (std::find(matching_attributes().begin(), matching_attributes().end(), k) ==
            matching_attributes().end())
            throw Error("match_controls: unknown stratum key '" + k + "'");

    using Key = std::vector<std::string>;
    std::map<Key, std::vector<const PatientRecord*>> case_strata, pool_strata;
    for (const auto& c : cases) {
        if (!c.event || !c.event_date) throw Error("match_controls: case '" + c.patient_id + "' has no event");
        case_strata[stratum_of(c, spec.strata_keys)].push_back(&c);
    }
    for (const auto& p : control_pool) {
        if (p.event) throw Error("match_controls: pool patient '" + p.patient_id + "' has event=true");
        pool_strata[stratum_of(p, spec.strata_keys)].push_back(&p);
    }

    Cohort cohort;
    std::mt19937_64 rng(spec.seed);
    for (auto& [key, members] : case_strata) {
        std::sort(members.begin(), members.end(), [](auto* a, auto* b) {
            return std::tie(*a->event_date, a->patient_id) < std::tie(*b->event_date, b->patient_id);
        });
        for (auto* c : members) {
            cohort.cases.push_back(*c);
            cohort.cases.back().anchor_date = c->event_date;
        }
        auto required = static_cast<std::size_t>(std::llround(spec.ratio * static_cast<double>(members.size())));
        std::vector<const PatientRecord*> pool;
        if (auto it = pool_strata.find(key); it != pool_strata.end()) pool = it->second;
        std::sort(pool.begin(), pool.end(), [](auto* a, auto* b) { return a->patient_id < b->patient_id; });
        // Partial Fisher-Yates on the id-sorted pool.
        std::size_t take = std::min(required, pool.size());
        for (std::size_t i = 0; i < take; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
            std::swap(pool[i], pool[pick(rng)]);
        }
        for (std::size_t i = 0; i < take; ++i) {
            const auto* paired = members[i % members.size()];
            PatientRecord ctrl = *pool[i];
            ctrl.anchor_date = paired->event_date;
            cohort.controls.push_back(std::move(ctrl));
            cohort.paired_case.push_back(paired->patient_id);
        }
        if (take < required)
            cohort.shortfall.push_back({key, members.size(), required, pool.size(), required - take});
    }
    return cohort;
}

inline json shortfall_report(const Cohort& cohort, const CohortSpec& spec) {
    json rows = json::array();
    for (const auto& s : cohort.shortfall) {
        json stratum = json::object();
        for (std::size_t i = 0; i < spec.strata_keys.size(); ++i) stratum[spec.strata_keys[i]] = s.stratum[i];
        rows.push_back({{"stratum", stratum},
                        {"cases", s.cases},
                        {"required", s.required},
                        {"available", s.available},
                        {"deficit", s.deficit}});
    }
    return {{"ratio", spec.ratio},
            {"n_cases", cohort.cases.size()},
            {"n_controls", cohort.controls.size()},
            {"shortfall", rows}};
}

// =============================================================================
// Screening windows
// =============================================================================

struct ScreeningWindow {
    int days = 30;
};

inline const std::vector<int>& default_windows() {
    static const std::vector<int> w = {3, 7, 14, 30, 60, 90};
    return w;
}

/// True iff ts lies in [anchor - days, anchor).
inline bool in_window(Date ts, Date anchor, int days) {
    int offset = days_between(anchor, ts);
    return offset >= -days && offset < 0;
}

/// The patient's messages in [anchor - days, anchor), ordered by ts.
inline std::vector<MessageRecord> extract_window(const PatientRecord& patient,
                                                 std::span<const MessageRecord> messages,
                                                 ScreeningWindow window) {
    if (!patient.anchor_date) throw Error("extract_window: patient '" + patient.patient_id + "' has no anchor_date");
    if (window.days < 1) throw Error("extract_window: window must be >= 1 day");
    std::vector<MessageRecord> out;
    for (const auto& m : messages)
        if (m.patient_id == patient.patient_id && in_window(m.ts, *patient.anchor_date, window.days))
            out.push_back(m);
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        return std::tie(a.ts, a.message_id) < std::tie(b.ts, b.message_id);
    });
    return out;
}

/// Indexed variant over a corpus; returns pointers into the corpus.
inline std::vector<const MessageRecord*> extract_window(const PatientRecord& patient, const Corpus& corpus,
                                                        ScreeningWindow window) {
    if (!patient.anchor_date) throw Error("extract_window: patient '" + patient.patient_id + "' has no anchor_date");
    if (window.days < 1) throw Error("extract_window: window must be >= 1 day");
    std::vector<const MessageRecord*> out;
    for (const auto* m : corpus.messages_of(patient.patient_id))
        if (in_window(m->ts, *patient.anchor_date, window.days)) out.push_back(m);
    return out;
}

// =============================================================================
// Temporal blocks
// =============================================================================

struct TemporalBlock {
    std::string block_id;
    Date start{};
    Date end{};  // exclusive

    bool contains(Date d) const { return d >= start && d < end; }
};

struct BlockSpec {
    std::vector<TemporalBlock> blocks;
    double ratio = 1.0;
    std::vector<std::string> strata_keys = matching_attributes();
    std::uint64_t seed = 0;
};

struct BlockCohort {
    TemporalBlock block;
    Cohort cohort;
};

struct BlockAssignment {
    std::vector<BlockCohort> blocks;
    std::vector<std::string> excluded_cases;  // event date outside every block
};

inline void validate_blocks(const std::vector<TemporalBlock>& blocks) {
    for (const auto& b : blocks)
        if (!(b.start < b.end)) throw Error("temporal block '" + b.block_id + "' has start >= end");
    for (std::size_t i = 0; i < blocks.size(); ++i)
        for (std::size_t j = i + 1; j < blocks.size(); ++j)
            if (blocks[i].start < blocks[j].end && blocks[j].start < blocks[i].end)
                throw Error("temporal blocks '" + blocks[i].block_id + "' and '" + blocks[j].block_id +
                            "' overlap");
}

/// Assigns each case to the block holding its event date and draws matched
/// controls independently per block from all non-event patients.
inline BlockAssignment build_temporal_blocks(const Corpus& corpus, const BlockSpec& spec) {
    validate_blocks(spec.blocks);
    auto pool = corpus.controls();
    std::vector<std::vector<PatientRecord>> per_block(spec.blocks.size());
    BlockAssignment out;
    for (const auto& c : corpus.cases()) {
        bool placed = false;
        for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
            if (spec.blocks[b].contains(*c.event_date)) {
                per_block[b].push_back(c);
                placed = true;
                break;
            }
        }
        if (!placed) out.excluded_cases.push_back(c.patient_id);
    }
    for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
        BlockCohort bc{spec.blocks[b], {}};
        if (!per_block[b].empty()) {
            CohortSpec cs{spec.ratio, spec.strata_keys, false, mix_seed(spec.seed, b)};
            bc.cohort = match_controls(per_block[b], pool, cs);
        }
        out.blocks.push_back(std::move(bc));
    }
    return out;
}

} // namespace msgscreen
