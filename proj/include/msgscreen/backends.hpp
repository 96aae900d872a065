#pragma once

// Annotator backends: an offline lexicon matcher, a scripted replay double
// keyed by request hash, and an HTTP-JSON client.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

// <resolv.h>, pulled in by httplib, defines `_res` as a macro; Eigen uses it
// as an identifier.
#ifdef _res
#undef _res
#endif

#include "msgscreen/taxonomy.hpp"

namespace msgscreen {

// =============================================================================
// Lexicon backend
// =============================================================================

/// True if `phrase` occurs in `text` delimited by non-alphanumeric characters.
/// Both arguments must already be lower-case.
inline bool contains_phrase(std::string_view text, std::string_view phrase) {
    if (phrase.empty()) return false;
    auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
    for (std::size_t pos = text.find(phrase); pos != std::string_view::npos; pos = text.find(phrase, pos + 1)) {
        bool left = pos == 0 || !is_word(text[pos - 1]);
        std::size_t end = pos + phrase.size();
        bool right = end == text.size() || !is_word(text[end]);
        if (left && right) return true;
    }
    return false;
}

/// Deterministic backend over a reference taxonomy whose SUB2 nodes carry
/// trigger phrases. A message is labelled with every SUB2 of the current
/// taxonomy whose lexicon matches, with confidence 1.
class LexiconBackend final : public AnnotatorBackend {
public:
    explicit LexiconBackend(Taxonomy reference) : reference_(std::move(reference)) {
        if (auto r = validate_hierarchy(reference_); !r.ok())
            throw Error("lexicon reference taxonomy invalid: " + r.summary());
    }

    std::vector<TaxonomyChange> propose_seed(std::span<const MessageRecord> batch,
                                             const SeedParams& params) override {
        auto hits = triggered(reference_, batch);
        // Rank MAIN topics by how many SUB2 triggers they received.
        std::map<std::string, int> main_hits;
        for (const auto& [sub2, why] : hits) ++main_hits[main_of(sub2)];
        std::vector<std::pair<int, std::string>> ranked;
        for (const auto& [id, n] : main_hits) ranked.emplace_back(-n, id);
        std::sort(ranked.begin(), ranked.end());
        std::set<std::string> mains;
        for (const auto& [n, id] : ranked)
            if (static_cast<int>(mains.size()) < params.main_target) mains.insert(id);
        for (const auto& id : reference_.ids(TopicLevel::Main))
            if (static_cast<int>(mains.size()) < params.main_target) mains.insert(id);

        std::vector<TaxonomyChange> out;
        std::set<std::string> added;
        for (const auto& id : mains) add_node(out, added, id, "seed: main category");
        for (const auto& [sub2, why] : hits) {
            if (!mains.count(main_of(sub2))) continue;
            add_with_ancestors(out, added, sub2, "seed: " + why);
        }
        return out;
    }

    std::vector<TaxonomyChange> propose_update(const Taxonomy& tax, std::span<const MessageRecord> batch) override {
        std::vector<TaxonomyChange> out;
        std::set<std::string> added;
        for (const auto& [id, n] : tax.nodes) added.insert(id);
        for (const auto& [sub2, why] : triggered(reference_, batch))
            if (!tax.nodes.count(sub2)) add_with_ancestors(out, added, sub2, "novel topic: " + why);
        return out;
    }

    std::vector<MessageAssignment> annotate(const Taxonomy& tax, std::span<const MessageRecord> batch) override {
        std::vector<MessageAssignment> out;
        for (const auto& m : batch) {
            MessageAssignment a{m.message_id, {}};
            auto text = to_lower(m.text);
            for (const auto& [id, node] : tax.nodes) {
                if (node.level != TopicLevel::Sub2) continue;
                for (const auto& phrase : node.lexicon) {
                    if (contains_phrase(text, to_lower(phrase))) {
                        a.labels.push_back({id, 1.0});
                        break;
                    }
                }
            }
            out.push_back(std::move(a));
        }
        return out;
    }

    const Taxonomy& reference() const { return reference_; }

private:
    /// SUB2 id -> reason for the first message that triggered it.
    static std::map<std::string, std::string> triggered(const Taxonomy& tax, std::span<const MessageRecord> batch) {
        std::map<std::string, std::string> hits;
        for (const auto& m : batch) {
            auto text = to_lower(m.text);
            for (const auto& [id, node] : tax.nodes) {
                if (node.level != TopicLevel::Sub2 || hits.count(id)) continue;
                for (const auto& phrase : node.lexicon) {
                    if (contains_phrase(text, to_lower(phrase))) {
                        hits[id] = "trigger '" + phrase + "' in message " + m.message_id;
                        break;
                    }
                }
            }
        }
        return hits;
    }

    std::string main_of(const std::string& id) const {
        const auto* n = reference_.find(id);
        while (n && n->parent_id) n = reference_.find(*n->parent_id);
        return n ? n->id : id;
    }

    void add_node(std::vector<TaxonomyChange>& out, std::set<std::string>& added, const std::string& id,
                  const std::string& reason) const {
        if (!added.insert(id).second) return;
        out.push_back({ChangeKind::Add, reference_.nodes.at(id), {}, reason});
    }

    void add_with_ancestors(std::vector<TaxonomyChange>& out, std::set<std::string>& added, const std::string& id,
                            const std::string& reason) const {
        std::vector<std::string> chain;
        for (const auto* n = reference_.find(id); n; n = n->parent_id ? reference_.find(*n->parent_id) : nullptr)
            chain.push_back(n->id);
        for (auto it = chain.rbegin(); it != chain.rend(); ++it)
            add_node(out, added, *it, *it == id ? reason : "parent of " + id);
    }

    Taxonomy reference_;
};

// =============================================================================
// Wire format
// =============================================================================

inline json make_wire_request(std::string_view op, const Taxonomy* tax, std::span<const MessageRecord> batch,
                              json params = json::object()) {
    json messages = json::array();
    for (const auto& m : batch) messages.push_back({{"message_id", m.message_id}, {"text", m.text}});
    return {{"op", std::string(op)},
            {"taxonomy", tax ? to_json(*tax) : json(nullptr)},
            {"messages", std::move(messages)},
            {"params", std::move(params)}};
}

/// Key of a request in a scripted-response directory: FNV-1a of the
/// canonical (sorted-key, compact) JSON dump, as 16 hex digits.
inline std::string request_key(const json& request) { return hex64(fnv1a64(request.dump())); }

/// Backend speaking the JSON request/response contract; subclasses only
/// provide the transport.
class JsonWireBackend : public AnnotatorBackend {
public:
    std::vector<TaxonomyChange> propose_seed(std::span<const MessageRecord> batch, const SeedParams& params) override {
        return parse_changes(exchange(make_wire_request("seed", nullptr, batch, {{"main_target", params.main_target}})));
    }

    std::vector<TaxonomyChange> propose_update(const Taxonomy& tax, std::span<const MessageRecord> batch) override {
        return parse_changes(exchange(make_wire_request("update", &tax, batch)));
    }

    std::vector<MessageAssignment> annotate(const Taxonomy& tax, std::span<const MessageRecord> batch) override {
        auto response = exchange(make_wire_request("annotate", &tax, batch));
        std::vector<MessageAssignment> out;
        try {
            for (const auto& a : response.at("assignments")) {
                MessageAssignment ma{a.at("message_id").get<std::string>(), {}};
                for (const auto& l : a.at("labels"))
                    ma.labels.push_back({l.at("sub2_id").get<std::string>(), l.at("confidence").get<double>()});
                out.push_back(std::move(ma));
            }
        } catch (const json::exception& e) {
            throw Error(std::string("malformed annotate response: ") + e.what());
        }
        return out;
    }

protected:
    virtual json exchange(const json& request) = 0;

private:
    static std::vector<TaxonomyChange> parse_changes(const json& response) {
        std::vector<TaxonomyChange> out;
        try {
            for (const auto& c : response.at("changes")) out.push_back(change_from_json(c));
        } catch (const json::exception& e) {
            throw Error(std::string("malformed changes response: ") + e.what());
        }
        return out;
    }
};

/// Replays canned responses stored as `<dir>/<request_key>.json`.
class ScriptedBackend final : public JsonWireBackend {
public:
    explicit ScriptedBackend(std::filesystem::path dir) : dir_(std::move(dir)) {
        if (!std::filesystem::is_directory(dir_)) throw Error("scripted backend: no directory '" + dir_.string() + "'");
    }

    static std::filesystem::path response_path(const std::filesystem::path& dir, const json& request) {
        return dir / (request_key(request) + ".json");
    }

protected:
    json exchange(const json& request) override {
        auto path = response_path(dir_, request);
        std::ifstream in(path);
        if (!in)
            throw Error("scripted backend: no response for op '" + request.at("op").get<std::string>() + "' at '" +
                        path.string() + "'");
        try {
            return json::parse(in);
        } catch (const json::exception& e) {
            throw Error("scripted backend: '" + path.string() + "': " + e.what());
        }
    }

private:
    std::filesystem::path dir_;
};

/// POSTs requests to an HTTP endpoint. A bearer token is read from
/// MSGSCREEN_BACKEND_TOKEN when set.
class HttpBackend final : public JsonWireBackend {
public:
    explicit HttpBackend(const std::string& url) {
        const std::string scheme = "http://";
        if (url.rfind(scheme, 0) != 0) throw Error("http backend: only http:// URLs are supported: '" + url + "'");
        auto rest = url.substr(scheme.size());
        auto slash = rest.find('/');
        host_ = scheme + (slash == std::string::npos ? rest : rest.substr(0, slash));
        path_ = slash == std::string::npos ? "/" : rest.substr(slash);
        if (const char* token = std::getenv("MSGSCREEN_BACKEND_TOKEN")) token_ = token;
    }

protected:
    json exchange(const json& request) override {
        httplib::Client client(host_);
        client.set_read_timeout(120, 0);
        httplib::Headers headers;
        if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
        auto res = client.Post(path_, headers, request.dump(), "application/json");
        if (!res) throw Error("http backend: request to " + host_ + path_ + " failed: " + httplib::to_string(res.error()));
        if (res->status != 200)
            throw Error("http backend: " + host_ + path_ + " returned status " + std::to_string(res->status));
        try {
            return json::parse(res->body);
        } catch (const json::exception& e) {
            throw Error(std::string("http backend: invalid JSON response: ") + e.what());
        }
    }

private:
    std::string host_;
    std::string path_;
    std::string token_;
};

/// Builds a backend from "lexicon", "scripted:<dir>" or "http:<url>".
inline std::unique_ptr<AnnotatorBackend> make_backend(const std::string& spec, const Taxonomy& lexicon_reference) {
    if (spec == "lexicon") return std::make_unique<LexiconBackend>(lexicon_reference);
    if (spec.rfind("scripted:", 0) == 0) return std::make_unique<ScriptedBackend>(spec.substr(9));
    if (spec.rfind("http:", 0) == 0) {
        auto url = spec.substr(5);
        if (url.rfind("//", 0) == 0) url = "http:" + url;
        return std::make_unique<HttpBackend>(url);
    }
    throw Error("unknown backend '" + spec + "' (expected lexicon, scripted:<dir> or http:<url>)");
}

} // namespace msgscreen
