#pragma once

// Heterogeneous patient / symptom / comorbidity graph with temporal edge
// attributes, semantic and patient-similarity edges, and symptom centrality.

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <unordered_map>

#include "msgscreen/corpus.hpp"
#include "msgscreen/taxonomy.hpp"

namespace msgscreen {

// =============================================================================
// Embeddings
// =============================================================================

/// Deterministic text embedding; every vector has unit L2 norm.
class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::size_t dim() const = 0;
    virtual std::vector<double> embed(std::string_view text) const = 0;
};

/// Signed feature hashing of lower-cased character trigrams.
class HashedTrigramEmbedding final : public EmbeddingProvider {
public:
    explicit HashedTrigramEmbedding(std::size_t dim = 64) : dim_(dim) {
        if (dim_ == 0) throw Error("embedding dimension must be >= 1");
    }

    std::size_t dim() const override { return dim_; }

    std::vector<double> embed(std::string_view text) const override {
        std::vector<double> v(dim_, 0.0);
        std::string padded = "<" + to_lower(text) + ">";
        for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
            auto h = fnv1a64(std::string_view(padded).substr(i, 3));
            v[h % dim_] += (h >> 63) ? -1.0 : 1.0;
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        if (norm == 0.0) {
            // Empty text, or trigram collisions that cancelled out.
            v[fnv1a64(padded) % dim_] = 1.0;
            return v;
        }
        norm = std::sqrt(norm);
        for (double& x : v) x /= norm;
        return v;
    }

private:
    std::size_t dim_;
};

inline double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw Error("cosine: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / std::sqrt(na * nb);
}

// =============================================================================
// Graph
// =============================================================================

struct PatientSymptomEdge {
    std::size_t patient = 0;
    std::size_t symptom = 0;
    int count = 0;         // annotated messages up to the anchor date
    double recency = 1.0;  // exp(-days from latest such message to anchor / tau)

    /// Message-passing weight: log(1 + count) * recency.
    double scale() const { return std::log1p(static_cast<double>(count)) * recency; }
};

struct PatientComorbidityEdge {
    std::size_t patient = 0;
    std::size_t comorbidity = 0;
};

struct WeightedEdge {
    std::size_t src = 0;
    std::size_t dst = 0;
    double weight = 1.0;
};

using FeatureRows = std::vector<std::vector<double>>;

struct HeteroGraph {
    std::vector<std::string> patient_ids;
    std::vector<std::string> symptom_ids;
    std::vector<std::string> symptom_labels;
    std::vector<std::string> comorbidity_codes;

    std::vector<std::string> patient_feature_names;
    FeatureRows patient_features;
    FeatureRows symptom_features;
    FeatureRows comorbidity_features;

    std::vector<PatientSymptomEdge> patient_symptom;
    std::vector<PatientComorbidityEdge> patient_comorbidity;
    std::vector<WeightedEdge> patient_patient;   // both directions stored
    std::vector<WeightedEdge> symptom_symptom;   // both directions stored

    std::size_t n_patients() const { return patient_ids.size(); }
    std::size_t n_symptoms() const { return symptom_ids.size(); }
    std::size_t n_comorbidities() const { return comorbidity_codes.size(); }

    std::optional<std::size_t> symptom_index(const std::string& id) const {
        auto it = std::find(symptom_ids.begin(), symptom_ids.end(), id);
        if (it == symptom_ids.end()) return std::nullopt;
        return static_cast<std::size_t>(it - symptom_ids.begin());
    }

    std::size_t patient_feature_dim() const { return patient_feature_names.size(); }
    std::size_t symptom_feature_dim() const { return symptom_features.empty() ? 0 : symptom_features[0].size(); }
};

struct GraphConfig {
    double tau_days = 30.0;
    double min_relevance = 0.5;
    double semantic_threshold = 0.7;
    std::size_t patient_k = 5;
};

/// Drops (message, label) pairs with confidence below `min_relevance`.
inline std::vector<MessageRecord> prune_messages(std::span<const MessageRecord> messages, double min_relevance) {
    if (!(min_relevance >= 0.0 && min_relevance <= 1.0)) throw Error("prune_messages: min_relevance outside [0,1]");
    std::vector<MessageRecord> out(messages.begin(), messages.end());
    for (auto& m : out)
        std::erase_if(m.annotations, [&](const Annotation& a) { return a.confidence < min_relevance; });
    return out;
}

/// One-hot demographics followed by multi-hot comorbidities. Vocabularies are
/// sorted so the encoding does not depend on patient order.
class PatientEncoder {
public:
    explicit PatientEncoder(std::span<const PatientRecord> patients) {
        for (const auto& p : patients) {
            races_.insert(p.race);
            ethnicities_.insert(p.ethnicity);
            sexes_.insert(p.sex);
            maritals_.insert(p.marital_status);
            comorbidities_.insert(p.comorbidities.begin(), p.comorbidities.end());
        }
        for (auto name : kAgeBandNames) names_.push_back("age_band=" + std::string(name));
        for (const auto& v : races_) names_.push_back("race=" + v);
        for (const auto& v : ethnicities_) names_.push_back("ethnicity=" + v);
        for (const auto& v : sexes_) names_.push_back("sex=" + v);
        for (const auto& v : maritals_) names_.push_back("marital_status=" + v);
        demographic_dim_ = names_.size();
        for (const auto& c : comorbidities_) names_.push_back("comorbidity=" + c);
    }

    const std::vector<std::string>& names() const { return names_; }
    std::size_t demographic_dim() const { return demographic_dim_; }
    const std::set<std::string>& comorbidity_codes() const { return comorbidities_; }

    std::vector<double> encode(const PatientRecord& p) const {
        std::vector<double> f(names_.size(), 0.0);
        std::size_t offset = 0;
        f[static_cast<std::size_t>(p.age_band)] = 1.0;
        offset += kAgeBandNames.size();
        auto put = [&](const std::set<std::string>& vocab, const std::string& value) {
            auto it = vocab.find(value);
            if (it != vocab.end()) f[offset + static_cast<std::size_t>(std::distance(vocab.begin(), it))] = 1.0;
            offset += vocab.size();
        };
        put(races_, p.race);
        put(ethnicities_, p.ethnicity);
        put(sexes_, p.sex);
        put(maritals_, p.marital_status);
        for (const auto& c : p.comorbidities) put_multi(f, offset, c);
        return f;
    }

private:
    void put_multi(std::vector<double>& f, std::size_t offset, const std::string& code) const {
        auto it = comorbidities_.find(code);
        if (it != comorbidities_.end()) f[offset + static_cast<std::size_t>(std::distance(comorbidities_.begin(), it))] = 1.0;
    }

    std::set<std::string> races_, ethnicities_, sexes_, maritals_, comorbidities_;
    std::vector<std::string> names_;
    std::size_t demographic_dim_ = 0;
};

/// Builds the graph from annotated messages. Messages after a patient's
/// anchor date and annotations below `min_relevance` are ignored.
inline HeteroGraph build_graph(std::span<const MessageRecord> messages, std::span<const PatientRecord> patients,
                               const Taxonomy& taxonomy, const EmbeddingProvider& provider,
                               const GraphConfig& config = {}) {
    if (!(config.tau_days > 0.0)) throw Error("build_graph: tau_days must be > 0");
    HeteroGraph g;
    PatientEncoder encoder(patients);
    g.patient_feature_names = encoder.names();

    std::unordered_map<std::string, std::size_t> patient_index;
    for (const auto& p : patients) {
        if (!p.anchor_date) throw Error("build_graph: patient '" + p.patient_id + "' has no anchor_date");
        if (!patient_index.emplace(p.patient_id, g.patient_ids.size()).second)
            throw Error("build_graph: duplicate patient '" + p.patient_id + "'");
        g.patient_ids.push_back(p.patient_id);
        g.patient_features.push_back(encoder.encode(p));
    }

    // (patient, sub2) -> (count, latest ts)
    std::map<std::pair<std::size_t, std::string>, std::pair<int, Date>> tally;
    for (const auto& m : messages) {
        auto pit = patient_index.find(m.patient_id);
        if (pit == patient_index.end()) continue;
        const auto& p = patients[pit->second];
        if (m.ts > *p.anchor_date) continue;
        std::set<std::string> seen;
        for (const auto& a : m.annotations) {
            if (!taxonomy.is_sub2(a.sub2_id))
                throw Error("build_graph: message '" + m.message_id + "' references unknown sub2_id '" + a.sub2_id + "'");
            if (a.confidence < config.min_relevance || !seen.insert(a.sub2_id).second) continue;
            auto [it, fresh] = tally.try_emplace({pit->second, a.sub2_id}, 0, m.ts);
            ++it->second.first;
            it->second.second = std::max(it->second.second, m.ts);
        }
    }

    std::set<std::string> symptoms;
    for (const auto& [key, v] : tally) symptoms.insert(key.second);
    std::map<std::string, std::size_t> symptom_index;
    for (const auto& s : symptoms) {
        symptom_index[s] = g.symptom_ids.size();
        g.symptom_ids.push_back(s);
        g.symptom_labels.push_back(taxonomy.nodes.at(s).label);
        g.symptom_features.push_back(provider.embed(g.symptom_labels.back()));
    }
    for (const auto& [key, v] : tally) {
        const auto& p = patients[key.first];
        double dt = days_between(v.second, *p.anchor_date);
        g.patient_symptom.push_back({key.first, symptom_index.at(key.second), v.first, std::exp(-dt / config.tau_days)});
    }

    const auto& codes = encoder.comorbidity_codes();
    g.comorbidity_codes.assign(codes.begin(), codes.end());
    for (std::size_t c = 0; c < codes.size(); ++c) {
        std::vector<double> one_hot(codes.size(), 0.0);
        one_hot[c] = 1.0;
        g.comorbidity_features.push_back(std::move(one_hot));
    }
    for (std::size_t i = 0; i < patients.size(); ++i)
        for (const auto& c : patients[i].comorbidities)
            g.patient_comorbidity.push_back(
                {i, static_cast<std::size_t>(std::distance(codes.begin(), codes.find(c)))});
    return g;
}

/// Replaces symptom-symptom edges with one symmetric edge per pair whose
/// label cosine is at least `threshold`.
inline HeteroGraph add_semantic_edges(HeteroGraph g, const EmbeddingProvider& provider, double threshold) {
    if (!(threshold > -1.0 && threshold < 1.0)) throw Error("add_semantic_edges: threshold must lie in (-1, 1)");
    if (g.n_symptoms() > 0 && provider.dim() != g.symptom_feature_dim())
        throw Error("add_semantic_edges: provider dimension " + std::to_string(provider.dim()) +
                    " does not match symptom features " + std::to_string(g.symptom_feature_dim()));
    std::vector<std::vector<double>> emb;
    for (const auto& label : g.symptom_labels) {
        emb.push_back(provider.embed(label));
        if (emb.back().size() != provider.dim()) throw Error("add_semantic_edges: provider returned wrong dimension");
    }
    g.symptom_symptom.clear();
    for (std::size_t i = 0; i < emb.size(); ++i) {
        for (std::size_t j = i + 1; j < emb.size(); ++j) {
            double c = cosine(emb[i], emb[j]);
            if (c >= threshold) {
                g.symptom_symptom.push_back({i, j, c});
                g.symptom_symptom.push_back({j, i, c});
            }
        }
    }
    return g;
}

/// Replaces patient-patient edges: each patient links to its k most similar
/// patients (cosine over demographic and comorbidity features, ties broken by
/// patient id); the union is stored symmetrically.
inline HeteroGraph add_patient_similarity_edges(HeteroGraph g, std::size_t k) {
    if (k < 1) throw Error("add_patient_similarity_edges: k must be >= 1");
    const std::size_t n = g.n_patients();
    if (n < 2) throw Error("add_patient_similarity_edges: need at least 2 patients");
    std::map<std::pair<std::size_t, std::size_t>, double> pairs;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::pair<double, std::size_t>> cand;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) cand.emplace_back(cosine(g.patient_features[i], g.patient_features[j]), j);
        std::sort(cand.begin(), cand.end(), [&](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return g.patient_ids[a.second] < g.patient_ids[b.second];
        });
        for (std::size_t r = 0; r < std::min(k, cand.size()); ++r)
            pairs[{std::min(i, cand[r].second), std::max(i, cand[r].second)}] = cand[r].first;
    }
    g.patient_patient.clear();
    for (const auto& [pq, w] : pairs) {
        g.patient_patient.push_back({pq.first, pq.second, w});
        g.patient_patient.push_back({pq.second, pq.first, w});
    }
    return g;
}

/// Weighted PageRank over the symptom-symptom subgraph (damping 0.85).
/// Dangling symptoms spread their mass uniformly; the result sums to 1.
inline std::vector<double> centrality(const HeteroGraph& g, double damping = 0.85, double tol = 1e-10,
                                      int max_iter = 10000) {
    const std::size_t n = g.n_symptoms();
    if (n == 0) return {};
    std::vector<double> out_weight(n, 0.0);
    for (const auto& e : g.symptom_symptom) out_weight[e.src] += e.weight;
    std::vector<double> rank(n, 1.0 / static_cast<double>(n)), next(n);
    for (int it = 0; it < max_iter; ++it) {
        double dangling = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            if (!(out_weight[i] > 0.0)) dangling += rank[i];
        double base = (1.0 - damping) / static_cast<double>(n) + damping * dangling / static_cast<double>(n);
        std::fill(next.begin(), next.end(), base);
        for (const auto& e : g.symptom_symptom)
            if (out_weight[e.src] > 0.0) next[e.dst] += damping * rank[e.src] * e.weight / out_weight[e.src];
        double total = std::accumulate(next.begin(), next.end(), 0.0);
        double delta = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            next[i] /= total;
            delta += std::abs(next[i] - rank[i]);
        }
        rank.swap(next);
        if (delta < tol) break;
    }
    return rank;
}

/// Writes one edge-list CSV per edge type into `dir`.
inline void write_graph_dump(const HeteroGraph& g, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto open = [&](const char* name) {
        std::ofstream out(dir / name, std::ios::binary);
        if (!out) throw Error("cannot write '" + (dir / name).string() + "'");
        return out;
    };
    {
        auto out = open("patient_symptom.csv");
        out << "src,dst,count,recency\n";
        for (const auto& e : g.patient_symptom)
            out << g.patient_ids[e.patient] << ',' << g.symptom_ids[e.symptom] << ',' << e.count << ','
                << fmt_double(e.recency) << '\n';
    }
    {
        auto out = open("patient_comorbidity.csv");
        out << "src,dst\n";
        for (const auto& e : g.patient_comorbidity)
            out << g.patient_ids[e.patient] << ',' << g.comorbidity_codes[e.comorbidity] << '\n';
    }
    {
        auto out = open("patient_patient.csv");
        out << "src,dst,weight\n";
        for (const auto& e : g.patient_patient)
            out << g.patient_ids[e.src] << ',' << g.patient_ids[e.dst] << ',' << fmt_double(e.weight) << '\n';
    }
    {
        auto out = open("symptom_symptom.csv");
        out << "src,dst,weight\n";
        for (const auto& e : g.symptom_symptom)
            out << g.symptom_ids[e.src] << ',' << g.symptom_ids[e.dst] << ',' << fmt_double(e.weight) << '\n';
    }
}

} // namespace msgscreen
