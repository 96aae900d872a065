#pragma once

// Three-level symptom taxonomy (MAIN -> SUB1 -> SUB2), the batch update
// protocol driven by an annotator backend, message annotation and
// inter-rater agreement.

#include <atomic>
#include <exception>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "msgscreen/common.hpp"
#include "msgscreen/corpus.hpp"

namespace msgscreen {

enum class TopicLevel { Main, Sub1, Sub2 };

inline std::string_view to_string(TopicLevel l) {
    switch (l) {
        case TopicLevel::Main: return "MAIN";
        case TopicLevel::Sub1: return "SUB1";
        case TopicLevel::Sub2: return "SUB2";
    }
    return "?";
}

inline TopicLevel parse_topic_level(std::string_view s) {
    if (s == "MAIN") return TopicLevel::Main;
    if (s == "SUB1") return TopicLevel::Sub1;
    if (s == "SUB2") return TopicLevel::Sub2;
    throw Error("unknown topic level '" + std::string(s) + "'");
}

struct TopicNode {
    std::string id;
    TopicLevel level = TopicLevel::Main;
    std::string label;
    std::optional<std::string> parent_id;
    std::set<std::string> lexicon;  // trigger phrases for the lexicon backend

    bool operator==(const TopicNode&) const = default;
};

enum class ChangeKind { Add, Merge };

inline std::string_view to_string(ChangeKind k) { return k == ChangeKind::Add ? "ADD" : "MERGE"; }

inline ChangeKind parse_change_kind(std::string_view s) {
    if (s == "ADD") return ChangeKind::Add;
    if (s == "MERGE") return ChangeKind::Merge;
    throw Error("unknown change kind '" + std::string(s) + "'");
}

struct ChangeLogEntry {
    int version = 0;
    ChangeKind kind = ChangeKind::Add;
    std::vector<std::string> affected_ids;
    std::string reason;
    int batch_index = 0;
};

/// A change proposed by a backend. ADD carries `node`; MERGE carries two ids.
struct TaxonomyChange {
    ChangeKind kind = ChangeKind::Add;
    TopicNode node;
    std::vector<std::string> ids;
    std::string reason;
};

struct Taxonomy {
    std::map<std::string, TopicNode> nodes;
    std::vector<ChangeLogEntry> ledger;
    int version = 0;

    std::size_t count(TopicLevel level) const {
        return static_cast<std::size_t>(std::count_if(
            nodes.begin(), nodes.end(), [&](const auto& kv) { return kv.second.level == level; }));
    }

    std::vector<std::string> ids(TopicLevel level) const {
        std::vector<std::string> out;
        for (const auto& [id, n] : nodes)
            if (n.level == level) out.push_back(id);
        return out;
    }

    const TopicNode* find(const std::string& id) const {
        auto it = nodes.find(id);
        return it == nodes.end() ? nullptr : &it->second;
    }

    bool is_sub2(const std::string& id) const {
        const auto* n = find(id);
        return n && n->level == TopicLevel::Sub2;
    }
};

// =============================================================================
// Validation
// =============================================================================

struct ValidationReport {
    std::vector<std::string> violations;

    bool ok() const { return violations.empty(); }

    std::string summary() const {
        std::string s;
        for (const auto& v : violations) s += (s.empty() ? "" : "; ") + v;
        return s;
    }
};

/// Lists every hierarchy invariant violation; an empty report means valid.
inline ValidationReport validate_hierarchy(const Taxonomy& tax) {
    ValidationReport report;
    std::map<std::string, std::map<std::string, int>> labels_by_parent;
    for (const auto& [id, node] : tax.nodes) {
        if (node.id != id) report.violations.push_back(id + ": node id does not match key");
        if (node.label.empty()) report.violations.push_back(id + ": empty label");
        if (node.level == TopicLevel::Main) {
            if (node.parent_id) report.violations.push_back(id + ": MAIN node has a parent");
            else ++labels_by_parent[""][node.label];
            continue;
        }
        if (!node.parent_id) {
            report.violations.push_back(id + ": missing parent");
            continue;
        }
        const auto* parent = tax.find(*node.parent_id);
        if (!parent) {
            report.violations.push_back(id + ": missing parent '" + *node.parent_id + "'");
            continue;
        }
        auto expected = node.level == TopicLevel::Sub2 ? TopicLevel::Sub1 : TopicLevel::Main;
        if (parent->level != expected) {
            report.violations.push_back(id + ": parent '" + parent->id + "' is " +
                                        std::string(to_string(parent->level)) + ", expected " +
                                        std::string(to_string(expected)));
            continue;
        }
        ++labels_by_parent[*node.parent_id][node.label];
    }
    for (const auto& [parent, labels] : labels_by_parent)
        for (const auto& [label, n] : labels)
            if (n > 1)
                report.violations.push_back("label '" + label + "' repeated " + std::to_string(n) +
                                            " times under '" + (parent.empty() ? "<root>" : parent) + "'");
    return report;
}

// =============================================================================
// JSON (taxonomy.json and the backend wire format)
// =============================================================================

inline json to_json(const TopicNode& n) {
    return {{"id", n.id},
            {"level", std::string(to_string(n.level))},
            {"label", n.label},
            {"parent_id", n.parent_id ? json(*n.parent_id) : json(nullptr)},
            {"lexicon", n.lexicon}};
}

inline TopicNode topic_node_from_json(const json& j) {
    TopicNode n;
    n.id = j.at("id").get<std::string>();
    n.level = parse_topic_level(j.at("level").get<std::string>());
    n.label = j.value("label", "");
    if (auto it = j.find("parent_id"); it != j.end() && !it->is_null()) n.parent_id = it->get<std::string>();
    if (auto it = j.find("lexicon"); it != j.end())
        for (const auto& p : *it) n.lexicon.insert(p.get<std::string>());
    return n;
}

inline json to_json(const ChangeLogEntry& e) {
    return {{"version", e.version},
            {"kind", std::string(to_string(e.kind))},
            {"affected_ids", e.affected_ids},
            {"reason", e.reason},
            {"batch_index", e.batch_index}};
}

inline json to_json(const Taxonomy& t) {
    json nodes = json::array();
    for (const auto& [id, n] : t.nodes) nodes.push_back(to_json(n));
    json ledger = json::array();
    for (const auto& e : t.ledger) ledger.push_back(to_json(e));
    return {{"version", t.version}, {"nodes", nodes}, {"ledger", ledger}};
}

inline Taxonomy taxonomy_from_json(const json& j) {
    try {
        Taxonomy t;
        t.version = j.value("version", 0);
        for (const auto& n : j.at("nodes")) {
            auto node = topic_node_from_json(n);
            if (!t.nodes.emplace(node.id, node).second) throw Error("duplicate topic id '" + node.id + "'");
        }
        if (auto it = j.find("ledger"); it != j.end()) {
            for (const auto& e : *it) {
                ChangeLogEntry entry;
                entry.version = e.at("version").get<int>();
                entry.kind = parse_change_kind(e.at("kind").get<std::string>());
                entry.affected_ids = e.at("affected_ids").get<std::vector<std::string>>();
                entry.reason = e.at("reason").get<std::string>();
                entry.batch_index = e.value("batch_index", 0);
                t.ledger.push_back(std::move(entry));
            }
        }
        return t;
    } catch (const json::exception& e) {
        throw Error(std::string("taxonomy: ") + e.what());
    }
}

inline json to_json(const TaxonomyChange& c) {
    json j = {{"kind", std::string(to_string(c.kind))}, {"reason", c.reason}};
    if (c.kind == ChangeKind::Add) j["node"] = to_json(c.node);
    else j["ids"] = c.ids;
    return j;
}

inline TaxonomyChange change_from_json(const json& j) {
    TaxonomyChange c;
    c.kind = parse_change_kind(j.at("kind").get<std::string>());
    c.reason = j.value("reason", "");
    if (c.kind == ChangeKind::Add) c.node = topic_node_from_json(j.at("node"));
    else c.ids = j.at("ids").get<std::vector<std::string>>();
    return c;
}

// =============================================================================
// Backend contract
// =============================================================================

struct SeedParams {
    int main_target = 10;
};

struct MessageAssignment {
    std::string message_id;
    std::vector<Annotation> labels;
};

/// Proposes taxonomy changes and annotates messages. Implementations must be
/// safe to call concurrently for `annotate`.
class AnnotatorBackend {
public:
    virtual ~AnnotatorBackend() = default;

    virtual std::vector<TaxonomyChange> propose_seed(std::span<const MessageRecord> batch,
                                                     const SeedParams& params) = 0;
    virtual std::vector<TaxonomyChange> propose_update(const Taxonomy& tax,
                                                       std::span<const MessageRecord> batch) = 0;
    virtual std::vector<MessageAssignment> annotate(const Taxonomy& tax,
                                                    std::span<const MessageRecord> batch) = 0;
};

struct TaxonomyConfig {
    std::size_t seed_batch_size = 200;
    std::size_t update_batch_size = 50;
    int main_target = 10;
    std::size_t max_labels = 3;
    std::size_t max_in_flight = 4;
};

// =============================================================================
// Seed and update
// =============================================================================

inline Taxonomy seed_taxonomy(std::span<const MessageRecord> batch, AnnotatorBackend& backend,
                              const TaxonomyConfig& config = {}) {
    if (batch.empty()) throw Error("seed_taxonomy: empty batch");
    auto seed_batch = batch.first(std::min(batch.size(), config.seed_batch_size));
    auto proposal = backend.propose_seed(seed_batch, SeedParams{config.main_target});

    Taxonomy tax;
    tax.version = 1;
    ValidationReport report;
    for (auto& change : proposal) {
        if (change.kind != ChangeKind::Add) {
            report.violations.push_back("seed proposal contains a MERGE");
            continue;
        }
        const auto id = change.node.id;
        if (!tax.nodes.emplace(id, change.node).second) {
            report.violations.push_back(id + ": duplicate id in proposal");
            continue;
        }
        tax.ledger.push_back({1, ChangeKind::Add, {id}, change.reason.empty() ? "seed" : change.reason, 0});
    }
    auto structural = validate_hierarchy(tax);
    report.violations.insert(report.violations.end(), structural.violations.begin(),
                             structural.violations.end());
    if (!report.ok()) throw Error("seed proposal rejected: " + report.summary());
    return tax;
}

/// Applies one batch of changes to a copy of `tax`. The version advances by
/// exactly one even when `changes` is empty.
inline Taxonomy apply_changes(const Taxonomy& tax, const std::vector<TaxonomyChange>& changes,
                              int batch_index) {
    Taxonomy next = tax;
    next.version = tax.version + 1;
    for (const auto& change : changes) {
        if (change.reason.empty()) throw Error("change without a reason");
        if (change.kind == ChangeKind::Add) {
            if (next.nodes.count(change.node.id))
                throw Error("ADD of existing id '" + change.node.id + "'");
            next.nodes.emplace(change.node.id, change.node);
            next.ledger.push_back({next.version, ChangeKind::Add, {change.node.id}, change.reason, batch_index});
            continue;
        }
        if (change.ids.size() != 2 || change.ids[0] == change.ids[1])
            throw Error("MERGE needs two distinct ids");
        auto a = next.nodes.find(change.ids[0]);
        auto b = next.nodes.find(change.ids[1]);
        if (a == next.nodes.end() || b == next.nodes.end())
            throw Error("MERGE with unknown id '" + (a == next.nodes.end() ? change.ids[0] : change.ids[1]) + "'");
        if (a->second.level != b->second.level) throw Error("MERGE across levels");
        const std::string survivor = std::min(change.ids[0], change.ids[1]);
        const std::string removed = std::max(change.ids[0], change.ids[1]);
        auto& keep = next.nodes.at(survivor);
        const auto& gone = next.nodes.at(removed);
        keep.lexicon.insert(gone.lexicon.begin(), gone.lexicon.end());
        for (auto& [id, n] : next.nodes)
            if (n.parent_id && *n.parent_id == removed) n.parent_id = survivor;
        next.nodes.erase(removed);
        next.ledger.push_back({next.version, ChangeKind::Merge, {survivor, removed}, change.reason, batch_index});
    }
    auto report = validate_hierarchy(next);
    if (!report.ok()) throw Error("update rejected: " + report.summary());
    return next;
}

struct TaxonomyUpdate {
    Taxonomy taxonomy;
    std::vector<TaxonomyChange> changes;
};

inline TaxonomyUpdate update_taxonomy(const Taxonomy& tax, std::span<const MessageRecord> batch,
                                      AnnotatorBackend& backend, int batch_index = 1) {
    if (auto report = validate_hierarchy(tax); !report.ok())
        throw Error("update_taxonomy: invalid input taxonomy: " + report.summary());
    auto changes = backend.propose_update(tax, batch);
    return {apply_changes(tax, changes, batch_index), std::move(changes)};
}

/// Seeds on the first `seed_batch_size` messages, then streams the rest in
/// batches of `update_batch_size`.
inline Taxonomy build_taxonomy(std::span<const MessageRecord> messages, AnnotatorBackend& backend,
                               const TaxonomyConfig& config = {}) {
    auto tax = seed_taxonomy(messages, backend, config);
    std::size_t pos = std::min(messages.size(), config.seed_batch_size);
    int batch_index = 1;
    while (pos < messages.size()) {
        std::size_t n = std::min(config.update_batch_size, messages.size() - pos);
        tax = update_taxonomy(tax, messages.subspan(pos, n), backend, batch_index++).taxonomy;
        pos += n;
    }
    return tax;
}

// =============================================================================
// Annotation
// =============================================================================

/// Keeps the `max_labels` most confident labels (ties by id), one per SUB2.
inline std::vector<Annotation> cap_labels(std::vector<Annotation> labels, std::size_t max_labels) {
    std::sort(labels.begin(), labels.end(), [](const auto& a, const auto& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        return a.sub2_id < b.sub2_id;
    });
    std::vector<Annotation> out;
    std::set<std::string> seen;
    for (auto& l : labels) {
        if (out.size() >= max_labels) break;
        if (seen.insert(l.sub2_id).second) out.push_back(std::move(l));
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.sub2_id < b.sub2_id; });
    return out;
}

/// Annotates every message with up to `max_labels` SUB2 topics. Batches are
/// dispatched to the backend with at most `max_in_flight` concurrent
/// requests; results are merged by message_id so the output does not depend
/// on scheduling.
inline std::vector<MessageRecord> annotate_messages(std::span<const MessageRecord> messages, const Taxonomy& tax,
                                                    AnnotatorBackend& backend, const TaxonomyConfig& config = {}) {
    if (auto report = validate_hierarchy(tax); !report.ok())
        throw Error("annotate_messages: invalid taxonomy: " + report.summary());
    const std::size_t batch_size = std::max<std::size_t>(1, config.update_batch_size);
    const std::size_t n_batches = (messages.size() + batch_size - 1) / batch_size;
    std::vector<std::vector<MessageAssignment>> results(n_batches);
    std::vector<std::exception_ptr> errors(n_batches);
    std::atomic<std::size_t> next{0};

    auto worker = [&] {
        for (std::size_t b; (b = next.fetch_add(1)) < n_batches;) {
            try {
                auto chunk = messages.subspan(b * batch_size, std::min(batch_size, messages.size() - b * batch_size));
                results[b] = backend.annotate(tax, chunk);
            } catch (...) {
                errors[b] = std::current_exception();
            }
        }
    };
    std::size_t n_threads = std::min(std::max<std::size_t>(1, config.max_in_flight), n_batches);
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    std::map<std::string, std::vector<Annotation>> by_id;
    for (auto& batch : results) {
        for (auto& a : batch) {
            for (const auto& l : a.labels) {
                if (!tax.is_sub2(l.sub2_id))
                    throw Error("backend returned unknown sub2_id '" + l.sub2_id + "' for message '" +
                                a.message_id + "'");
                if (!(l.confidence >= 0.0 && l.confidence <= 1.0))
                    throw Error("backend returned confidence outside [0,1] for message '" + a.message_id + "'");
            }
            auto& slot = by_id[a.message_id];
            slot.insert(slot.end(), a.labels.begin(), a.labels.end());
        }
    }
    std::vector<MessageRecord> out(messages.begin(), messages.end());
    for (auto& m : out) {
        auto it = by_id.find(m.message_id);
        m.annotations = it == by_id.end() ? std::vector<Annotation>{} : cap_labels(it->second, config.max_labels);
    }
    return out;
}

// =============================================================================
// Agreement
// =============================================================================

/// Gwet's AC1 over an explicit category set (K >= 2).
template <typename T>
double gwet_ac1(std::span<const T> a, std::span<const T> b, std::span<const T> categories) {
    if (a.size() != b.size()) throw Error("gwet_ac1: rating lists differ in length");
    if (a.empty()) throw Error("gwet_ac1: empty ratings");
    if (categories.size() < 2) throw Error("gwet_ac1: need at least two categories");
    const double n = static_cast<double>(a.size());
    auto index_of = [&](const T& v) {
        auto it = std::find(categories.begin(), categories.end(), v);
        if (it == categories.end()) throw Error("gwet_ac1: rating outside the category set");
        return static_cast<std::size_t>(it - categories.begin());
    };
    std::vector<double> share(categories.size(), 0.0);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        share[index_of(a[i])] += 0.5 / n;
        share[index_of(b[i])] += 0.5 / n;
        if (a[i] == b[i]) ++agree;
    }
    const double pa = static_cast<double>(agree) / n;
    double pe = 0.0;
    for (double p : share) pe += p * (1.0 - p);
    pe /= static_cast<double>(categories.size() - 1);
    if (!(pe < 1.0)) throw Error("gwet_ac1: degenerate chance agreement (Pe = 1)");
    return (pa - pe) / (1.0 - pe);
}

/// Category set taken from the observed ratings; binary when fewer than two
/// categories were observed.
template <typename T>
double gwet_ac1(std::span<const T> a, std::span<const T> b) {
    std::set<T> seen(a.begin(), a.end());
    seen.insert(b.begin(), b.end());
    std::vector<T> cats(seen.begin(), seen.end());
    if (cats.size() < 2) {
        if constexpr (std::is_same_v<T, bool>) {
            cats = {false, true};
        } else if constexpr (std::is_arithmetic_v<T>) {
            if (cats.empty()) throw Error("gwet_ac1: empty ratings");
            cats.push_back(cats.front() + 1);
        } else {
            if (cats.empty()) throw Error("gwet_ac1: empty ratings");
            cats.push_back(T{});
        }
    }
    return gwet_ac1<T>(a, b, std::span<const T>(cats));
}

template <typename T>
double gwet_ac1(const std::vector<T>& a, const std::vector<T>& b) {
    return gwet_ac1<T>(std::span<const T>(a), std::span<const T>(b));
}

} // namespace msgscreen
