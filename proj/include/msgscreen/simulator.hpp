#pragma once

// Seeded synthetic cohorts with planted symptom-event structure, the
// end-to-end screening simulation over windows x temporal blocks, and report
// emission.

#include <filesystem>
#include <fstream>
#include <random>

#include "msgscreen/backends.hpp"
#include "msgscreen/enlasso.hpp"
#include "msgscreen/gnn.hpp"
#include "msgscreen/hetgraph.hpp"
#include "msgscreen/scoring.hpp"
#include "msgscreen/screener.hpp"
#include "msgscreen/taxonomy.hpp"

namespace msgscreen {

// =============================================================================
// Vocabulary
// =============================================================================

struct VocabularyEntry {
    std::string main_id, main_label;
    std::string sub1_id, sub1_label;
    std::string sub2_id, label;
    std::vector<std::string> phrases;
};

inline const std::vector<VocabularyEntry>& builtin_vocabulary() {
    static const std::vector<VocabularyEntry> v = [] {
        struct Row {
            const char *main, *main_label, *sub1, *sub1_label, *sub2, *label;
            std::vector<std::string> phrases;
        };
        std::vector<Row> rows = {
            {"neuro", "Neurological", "neuro.sensorimotor", "Sensory and motor", "neuro.dizziness", "Dizziness", {"dizzy", "dizziness", "vertigo"}},
            {"neuro", "Neurological", "neuro.sensorimotor", "Sensory and motor", "neuro.numbness", "Numbness", {"numb", "numbness"}},
            {"neuro", "Neurological", "neuro.sensorimotor", "Sensory and motor", "neuro.weakness", "Limb weakness", {"arm weakness", "weak leg", "weakness in my arm"}},
            {"neuro", "Neurological", "neuro.sensorimotor", "Sensory and motor", "neuro.tingling", "Tingling", {"tingling", "pins and needles"}},
            {"neuro", "Neurological", "neuro.sensorimotor", "Sensory and motor", "neuro.balance", "Balance problems", {"unsteady", "losing my balance"}},
            {"neuro", "Neurological", "neuro.cognition", "Cognition and speech", "neuro.confusion", "Confusion", {"confused", "confusion"}},
            {"neuro", "Neurological", "neuro.cognition", "Cognition and speech", "neuro.speech", "Slurred speech", {"slurred speech", "slurring my words"}},
            {"neuro", "Neurological", "neuro.cognition", "Cognition and speech", "neuro.memory", "Memory loss", {"memory loss", "forgetful"}},
            {"neuro", "Neurological", "neuro.cognition", "Cognition and speech", "neuro.vision", "Vision changes", {"blurry vision", "double vision"}},
            {"neuro", "Neurological", "neuro.cognition", "Cognition and speech", "neuro.headache", "Headache", {"headache", "migraine"}},
            {"cardio", "Cardiovascular", "cardio.symptoms", "Cardiac symptoms", "cardio.chest_pain", "Chest pain", {"chest pain", "chest tightness"}},
            {"cardio", "Cardiovascular", "cardio.symptoms", "Cardiac symptoms", "cardio.palpitations", "Palpitations", {"palpitations", "heart racing"}},
            {"cardio", "Cardiovascular", "cardio.symptoms", "Cardiac symptoms", "cardio.dyspnea", "Shortness of breath", {"short of breath", "shortness of breath"}},
            {"cardio", "Cardiovascular", "cardio.vitals", "Vital signs", "cardio.edema", "Leg swelling", {"swollen ankles", "leg swelling"}},
            {"cardio", "Cardiovascular", "cardio.vitals", "Vital signs", "cardio.hypertension", "High blood pressure reading", {"high blood pressure", "bp reading"}},
            {"gi", "Gastrointestinal", "gi.upper", "Upper GI", "gi.nausea", "Nausea", {"nausea", "nauseous"}},
            {"gi", "Gastrointestinal", "gi.upper", "Upper GI", "gi.vomiting", "Vomiting", {"vomiting", "threw up"}},
            {"gi", "Gastrointestinal", "gi.upper", "Upper GI", "gi.abdominal_pain", "Abdominal pain", {"stomach pain", "abdominal pain"}},
            {"gi", "Gastrointestinal", "gi.lower", "Lower GI", "gi.diarrhea", "Diarrhea", {"diarrhea"}},
            {"gi", "Gastrointestinal", "gi.lower", "Lower GI", "gi.constipation", "Constipation", {"constipated", "constipation"}},
            {"general", "General and musculoskeletal", "general.systemic", "Systemic", "general.fatigue", "Fatigue", {"fatigue", "exhausted"}},
            {"general", "General and musculoskeletal", "general.systemic", "Systemic", "general.fever", "Fever", {"fever", "chills"}},
            {"general", "General and musculoskeletal", "general.systemic", "Systemic", "general.insomnia", "Insomnia", {"insomnia", "trouble sleeping"}},
            {"general", "General and musculoskeletal", "general.msk", "Musculoskeletal", "general.back_pain", "Back pain", {"back pain"}},
            {"general", "General and musculoskeletal", "general.msk", "Musculoskeletal", "general.joint_pain", "Joint pain", {"joint pain", "knee pain"}},
            {"mental", "Mental health", "mental.mood", "Mood", "mental.anxiety", "Anxiety", {"anxious", "anxiety"}},
            {"mental", "Mental health", "mental.mood", "Mood", "mental.low_mood", "Low mood", {"depressed", "feeling down"}},
            {"mental", "Mental health", "mental.mood", "Mood", "mental.irritability", "Irritability", {"irritable"}},
            {"mental", "Mental health", "mental.acute", "Stress and panic", "mental.stress", "Stress", {"stressed", "overwhelmed"}},
            {"mental", "Mental health", "mental.acute", "Stress and panic", "mental.panic", "Panic attacks", {"panic attack"}},
        };
        std::vector<VocabularyEntry> out;
        for (auto& r : rows) out.push_back({r.main, r.main_label, r.sub1, r.sub1_label, r.sub2, r.label, r.phrases});
        return out;
    }();
    return v;
}

/// The first `size` built-in symptoms; larger vocabularies are padded with
/// generic "other concern" symptoms.
inline std::vector<VocabularyEntry> synthetic_vocabulary(std::size_t size) {
    if (size == 0) throw Error("synthetic vocabulary size must be >= 1");
    const auto& base = builtin_vocabulary();
    std::vector<VocabularyEntry> out(base.begin(), base.begin() + static_cast<std::ptrdiff_t>(std::min(size, base.size())));
    for (std::size_t k = base.size(); k < size; ++k) {
        auto n = std::to_string(k - base.size() + 1);
        out.push_back({"other", "Other concerns", "other.misc", "Miscellaneous", "other.concern_" + n,
                       "Other concern " + n, {"concern code " + n}});
    }
    return out;
}

/// Three-level taxonomy holding every vocabulary symptom, with trigger
/// phrases as SUB2 lexicons. Used as the lexicon backend's reference.
inline Taxonomy reference_taxonomy(const std::vector<VocabularyEntry>& vocab) {
    Taxonomy t;
    t.version = 1;
    for (const auto& e : vocab) {
        t.nodes.try_emplace(e.main_id, TopicNode{e.main_id, TopicLevel::Main, e.main_label, std::nullopt, {}});
        t.nodes.try_emplace(e.sub1_id, TopicNode{e.sub1_id, TopicLevel::Sub1, e.sub1_label, e.main_id, {}});
        if (!t.nodes.try_emplace(e.sub2_id, TopicNode{e.sub2_id, TopicLevel::Sub2, e.label, e.sub1_id, {e.phrases.begin(), e.phrases.end()}}).second)
            throw Error("vocabulary: duplicate symptom '" + e.sub2_id + "'");
    }
    if (auto r = validate_hierarchy(t); !r.ok()) throw Error("vocabulary taxonomy invalid: " + r.summary());
    return t;
}

// =============================================================================
// Synthetic cohort
// =============================================================================

struct PlantedSymptom {
    std::string sub2_id;
    double odds = 6.0;         // case-to-control reporting rate ratio
    double mean_days = 5.0;    // before the event
    double spread_days = 3.0;
};

struct SyntheticSpec {
    std::size_t n_cases = 150;
    std::size_t n_controls = 350;
    std::size_t vocabulary_size = 30;
    std::vector<PlantedSymptom> planted = {
        {"neuro.dizziness", 6.0, 4.0, 3.0}, {"neuro.speech", 6.0, 12.0, 6.0}, {"neuro.numbness", 6.0, 30.0, 12.0}};
    double planted_case_rate = 0.6;   // chance a case reports each planted symptom
    double planted_extra_messages = 0.5;  // Poisson mean of repeat messages
    double background_rate = 0.010;  // messages per patient-day
    double case_background_multiplier = 4.0;  // cases message this much more often
    double admin_fraction = 0.3;     // background messages naming no symptom
    Date span_start = from_day_number(0);
    Date span_end = from_day_number(0);
    int history_days = 120;          // background messages start this long before span_start
    std::vector<double> age_band_weights = {0.15, 0.2, 0.3, 0.2, 0.15};
    double female_fraction = 0.5;
    double comorbidity_case_multiplier = 1.5;
    std::uint64_t seed = 0;
};

struct SyntheticTruth {
    std::vector<std::string> planted_ids;
    std::map<std::string, std::string> message_symptom;  // message_id -> sub2 ("" for none)
};

struct SyntheticCohort {
    std::vector<PatientRecord> patients;
    std::vector<MessageRecord> messages;
    SyntheticTruth truth;
    Taxonomy reference;
};

namespace detail {

inline const std::vector<std::string>& message_templates() {
    static const std::vector<std::string> t = {
        "Hi doctor, I have been having {} since yesterday.",
        "Quick question: is {} something I should worry about?",
        "Over the past few days I noticed {} again.",
        "My family thinks I should tell you about {}.",
        "Still dealing with {} this week, please advise.",
        "Good morning. Experiencing {} on and off.",
    };
    return t;
}

inline const std::vector<std::string>& admin_messages() {
    static const std::vector<std::string> t = {
        "Could you please send a refill for my prescription?",
        "I need to reschedule my appointment next week.",
        "Can you forward my lab results to my new pharmacy?",
        "Thank you for the visit, everything went well.",
        "Is the clinic open on the holiday Monday?",
        "Please update my insurance information on file.",
        "What time is my follow-up visit?",
        "I would like a copy of my vaccination record.",
    };
    return t;
}

inline const std::vector<std::pair<std::string, double>>& comorbidity_rates() {
    static const std::vector<std::pair<std::string, double>> r = {
        {"atrial_fibrillation", 0.08}, {"chronic_kidney_disease", 0.1}, {"diabetes", 0.2},
        {"hyperlipidemia", 0.3},       {"hypertension", 0.35}};
    return r;
}

template <typename T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
    return v[d(rng)];
}

inline std::string render(const std::string& tmpl, const std::string& phrase) {
    auto pos = tmpl.find("{}");
    return tmpl.substr(0, pos) + phrase + tmpl.substr(pos + 2);
}

} // namespace detail

inline void validate_spec(const SyntheticSpec& s) {
    if (s.n_cases + s.n_controls == 0) throw Error("synthetic spec: no patients");
    if (!(s.span_start < s.span_end)) throw Error("synthetic spec: calendar span is empty");
    if (s.history_days < 0) throw Error("synthetic spec: history_days must be >= 0");
    if (!(s.background_rate > 0.0)) throw Error("synthetic spec: background_rate must be > 0");
    if (!(s.case_background_multiplier > 0.0)) throw Error("synthetic spec: case_background_multiplier must be > 0");
    if (!(s.admin_fraction >= 0.0 && s.admin_fraction < 1.0)) throw Error("synthetic spec: admin_fraction must lie in [0,1)");
    if (!(s.planted_case_rate > 0.0 && s.planted_case_rate <= 1.0))
        throw Error("synthetic spec: planted_case_rate must lie in (0,1]");
    if (!(s.planted_extra_messages >= 0.0)) throw Error("synthetic spec: planted_extra_messages must be >= 0");
    if (s.age_band_weights.size() != kAgeBandNames.size()) throw Error("synthetic spec: need 5 age band weights");
    for (double w : s.age_band_weights)
        if (!(w >= 0.0)) throw Error("synthetic spec: negative age band weight");
    if (!(s.female_fraction >= 0.0 && s.female_fraction <= 1.0)) throw Error("synthetic spec: female_fraction outside [0,1]");
    if (!(s.comorbidity_case_multiplier > 0.0)) throw Error("synthetic spec: comorbidity_case_multiplier must be > 0");
    auto vocab = synthetic_vocabulary(s.vocabulary_size);
    std::set<std::string> ids, planted;
    for (const auto& e : vocab) ids.insert(e.sub2_id);
    for (const auto& p : s.planted) {
        if (!ids.count(p.sub2_id)) throw Error("synthetic spec: planted symptom '" + p.sub2_id + "' not in vocabulary");
        if (!planted.insert(p.sub2_id).second) throw Error("synthetic spec: planted symptom '" + p.sub2_id + "' repeated");
        if (!(p.odds > 1.0)) throw Error("synthetic spec: planted odds for '" + p.sub2_id + "' must be > 1");
        if (!(p.mean_days >= 1.0) || !(p.spread_days > 0.0))
            throw Error("synthetic spec: invalid proximity profile for '" + p.sub2_id + "'");
    }
}

/// Patients and messages with planted symptom-event structure. Cases report
/// each planted symptom with probability `planted_case_rate` at offsets
/// drawn from a normal profile truncated to [1, history_days] days before
/// the event; controls report it at that rate divided by the odds, at a
/// uniform time. Background messages are uniform in time, with cases
/// sending them `case_background_multiplier` times as often.
inline SyntheticCohort generate_synthetic_cohort(const SyntheticSpec& spec) {
    validate_spec(spec);
    SyntheticCohort out;
    const auto vocab = synthetic_vocabulary(spec.vocabulary_size);
    out.reference = reference_taxonomy(vocab);
    for (const auto& p : spec.planted) out.truth.planted_ids.push_back(p.sub2_id);
    std::map<std::string, const VocabularyEntry*> by_id;
    for (const auto& e : vocab) by_id[e.sub2_id] = &e;

    std::mt19937_64 rng(spec.seed);
    const std::size_t n = spec.n_cases + spec.n_controls;
    std::vector<bool> is_case(n, false);
    std::fill(is_case.begin(), is_case.begin() + static_cast<std::ptrdiff_t>(spec.n_cases), true);
    std::shuffle(is_case.begin(), is_case.end(), rng);

    const int first_day = day_number(spec.span_start) - spec.history_days;
    const int last_day = day_number(spec.span_end) - 1;
    const int span_days = last_day - first_day + 1;
    std::uniform_int_distribution<int> any_day(first_day, last_day);
    std::uniform_int_distribution<int> event_day(day_number(spec.span_start), last_day);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::discrete_distribution<std::size_t> age(spec.age_band_weights.begin(), spec.age_band_weights.end());
    const std::vector<std::string> races = {"Asian", "Black", "Other", "White"};
    const std::vector<std::string> maritals = {"Married", "Single", "Widowed"};
    std::poisson_distribution<int> n_background(spec.background_rate * span_days);
    std::poisson_distribution<int> n_background_case(spec.background_rate * spec.case_background_multiplier * span_days);
    std::poisson_distribution<int> n_extra(spec.planted_extra_messages);

    std::size_t message_seq = 0;
    auto add_message = [&](const std::string& pid, int day, const std::string& sub2) {
        MessageRecord m;
        m.message_id = "M" + std::string(6 - std::min<std::size_t>(6, std::to_string(message_seq).size()), '0') +
                       std::to_string(message_seq);
        ++message_seq;
        m.patient_id = pid;
        m.ts = from_day_number(day);
        m.text = sub2.empty() ? detail::pick(detail::admin_messages(), rng)
                              : detail::render(detail::pick(detail::message_templates(), rng),
                                               detail::pick(by_id.at(sub2)->phrases, rng));
        out.truth.message_symptom[m.message_id] = sub2;
        out.messages.push_back(std::move(m));
    };

    for (std::size_t i = 0; i < n; ++i) {
        PatientRecord p;
        p.patient_id = "P" + std::string(4 - std::min<std::size_t>(4, std::to_string(i).size()), '0') + std::to_string(i);
        p.age_band = static_cast<AgeBand>(age(rng));
        p.sex = unit(rng) < spec.female_fraction ? "Female" : "Male";
        p.race = detail::pick(races, rng);
        p.ethnicity = unit(rng) < 0.15 ? "Hispanic" : "Non-Hispanic";
        p.marital_status = detail::pick(maritals, rng);
        p.event = is_case[i];
        if (p.event) {
            p.event_date = from_day_number(event_day(rng));
            p.anchor_date = p.event_date;
        }
        for (const auto& [code, rate] : detail::comorbidity_rates()) {
            double r = p.event ? std::min(1.0, rate * spec.comorbidity_case_multiplier) : rate;
            if (unit(rng) < r) p.comorbidities.insert(code);
        }

        int nb = p.event ? n_background_case(rng) : n_background(rng);
        for (int k = 0; k < nb; ++k) {
            int day = any_day(rng);
            std::string sub2 = unit(rng) < spec.admin_fraction ? "" : detail::pick(vocab, rng).sub2_id;
            add_message(p.patient_id, day, sub2);
        }
        for (const auto& ps : spec.planted) {
            double rate = p.event ? spec.planted_case_rate : spec.planted_case_rate / ps.odds;
            if (!(unit(rng) < rate)) continue;
            int count = 1 + n_extra(rng);
            for (int k = 0; k < count; ++k) {
                int day;
                if (p.event) {
                    std::normal_distribution<double> profile(ps.mean_days, ps.spread_days);
                    double d = profile(rng);
                    for (int tries = 0; (d < 1.0 || d > spec.history_days) && tries < 100; ++tries) d = profile(rng);
                    int offset = static_cast<int>(std::clamp(std::lround(d), 1L, static_cast<long>(std::max(1, spec.history_days))));
                    day = day_number(*p.event_date) - offset;
                } else {
                    day = any_day(rng);
                }
                add_message(p.patient_id, day, ps.sub2_id);
            }
        }
        out.patients.push_back(std::move(p));
    }
    return out;
}

// =============================================================================
// Pipeline configuration
// =============================================================================

struct PipelineConfig {
    TierConfig tiers;
    ScreenerConfig screener;
    std::vector<int> windows = default_windows();
    GraphConfig graph;
    std::size_t embedding_dim = 64;
    TaxonomyConfig taxonomy;
    TrainConfig gnn;
    ENConfig en;
    std::vector<TemporalBlock> blocks;
    std::string calibration_block;
    double cohort_ratio = 1.0;
    std::vector<std::string> strata_keys = {"age_band", "sex"};
    bool compare_pipelines = true;
    std::uint64_t seed = 0;
};

// =============================================================================
// Discovery: taxonomy, annotation, attribution and scores
// =============================================================================

struct Discovery {
    Taxonomy taxonomy;
    Corpus annotated;
    BlockAssignment blocks;
    std::size_t calibration_index = 0;
    std::vector<SymptomScoreRow> scores;
    std::map<std::string, Proximity> proximity;
    TierMap tiers;
    std::map<std::string, double> gnn_deltas;
    std::map<std::string, double> en_perms;
    FitResult en_fit;
    std::vector<double> gnn_history;
    std::optional<PipelineComparison> pipelines;
};

/// Per-symptom message counts in [anchor - days, anchor), one column per id.
inline DesignMatrix symptom_matrix(const Corpus& corpus, const std::vector<PatientRecord>& patients,
                                   const std::vector<std::string>& symptom_ids, int days) {
    std::map<std::string, std::size_t> col;
    for (std::size_t j = 0; j < symptom_ids.size(); ++j) col[symptom_ids[j]] = j;
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(patients.size()),
                                              static_cast<Eigen::Index>(symptom_ids.size()));
    for (std::size_t i = 0; i < patients.size(); ++i) {
        for (const auto* m : extract_window(patients[i], corpus, ScreeningWindow{days})) {
            std::set<std::string> seen;
            for (const auto& a : m->annotations) {
                auto it = col.find(a.sub2_id);
                if (it != col.end() && seen.insert(a.sub2_id).second)
                    x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(it->second)) += 1.0;
            }
        }
    }
    return {symptom_ids, std::move(x)};
}

inline HeteroGraph discovery_graph(const Corpus& corpus, const std::vector<PatientRecord>& patients,
                                   const Taxonomy& taxonomy, const PipelineConfig& config) {
    HashedTrigramEmbedding provider(config.embedding_dim);
    std::vector<MessageRecord> messages;
    for (const auto& p : patients)
        for (const auto* m : corpus.messages_of(p.patient_id)) messages.push_back(*m);
    auto pruned = prune_messages(messages, config.graph.min_relevance);
    auto g = build_graph(pruned, patients, taxonomy, provider, config.graph);
    g = add_semantic_edges(std::move(g), provider, config.graph.semantic_threshold);
    return add_patient_similarity_edges(std::move(g), config.graph.patient_k);
}

/// Builds the taxonomy from the calibration block's cohort, annotates the
/// whole corpus, then derives GNN and EN attributions, temporal proximity
/// and tiered symptom scores on that cohort.
inline Discovery discover(const Corpus& corpus, AnnotatorBackend& backend, const PipelineConfig& config) {
    Discovery d;
    d.blocks = build_temporal_blocks(corpus, BlockSpec{config.blocks, config.cohort_ratio, config.strata_keys,
                                                       mix_seed(config.seed, 3)});
    auto cal = std::find_if(config.blocks.begin(), config.blocks.end(),
                            [&](const auto& b) { return b.block_id == config.calibration_block; });
    if (cal == config.blocks.end()) throw Error("calibration block '" + config.calibration_block + "' is not defined");
    d.calibration_index = static_cast<std::size_t>(cal - config.blocks.begin());
    const Cohort& cohort = d.blocks.blocks[d.calibration_index].cohort;
    if (cohort.cases.empty() || cohort.controls.empty())
        throw Error("calibration block '" + config.calibration_block + "' needs both cases and controls");
    const auto patients = cohort.patients();

    std::vector<MessageRecord> discovery_messages;
    for (const auto& p : patients)
        for (const auto* m : corpus.messages_of(p.patient_id)) discovery_messages.push_back(*m);
    std::stable_sort(discovery_messages.begin(), discovery_messages.end(), [](const auto& a, const auto& b) {
        return std::tie(a.ts, a.message_id) < std::tie(b.ts, b.message_id);
    });
    d.taxonomy = build_taxonomy(discovery_messages, backend, config.taxonomy);
    d.annotated = Corpus(annotate_messages(corpus.messages(), d.taxonomy, backend, config.taxonomy), corpus.patients());

    Labels labels;
    for (const auto& p : patients) labels.push_back(p.event ? 1 : 0);

    // GNN event deltas.
    auto graph = discovery_graph(d.annotated, patients, d.taxonomy, config);
    TrainConfig gnn = config.gnn;
    gnn.seed = mix_seed(config.seed, 1);
    if (graph.n_symptoms() > 0) {
        auto trained = train(graph, labels, gnn);
        d.gnn_history = trained.history;
        auto deltas = event_deltas(trained.model, graph, labels);
        for (std::size_t s = 0; s < deltas.size(); ++s) d.gnn_deltas[graph.symptom_ids[s]] = deltas[s];
    }

    // EN permutation scores over all taxonomy symptoms.
    const auto symptom_ids = d.taxonomy.ids(TopicLevel::Sub2);
    auto X = symptom_matrix(d.annotated, patients, symptom_ids, config.tiers.observation_days);
    ENConfig en = config.en;
    en.seed = mix_seed(config.seed, 2);
    d.en_fit = fit_en(X, labels, en);
    auto importance = permutation_importance(d.en_fit, X, labels, en);
    for (std::size_t j = 0; j < symptom_ids.size(); ++j) d.en_perms[symptom_ids[j]] = importance[j];

    if (config.compare_pipelines) {
        PatientEncoder encoder(patients);
        auto demo = DesignMatrix::with_rows(patients.size());
        for (std::size_t j = 0; j < encoder.names().size(); ++j) {
            std::vector<double> col;
            for (const auto& p : patients) col.push_back(encoder.encode(p)[j]);
            demo.add_column(encoder.names()[j], col);
        }
        PipelineInputs in{X, demo, labels, {}};
        if (graph.n_symptoms() > 0)
            in.gnn_risk = [&](const std::vector<bool>& mask) { return predict(train(graph, labels, gnn, mask).model, graph); };
        d.pipelines = compare_pipelines(in, en);
    }

    std::map<std::string, Date> anchors;
    for (const auto& c : cohort.cases) anchors[c.patient_id] = *c.anchor_date;
    d.proximity = temporal_proximity(d.annotated.messages(), anchors, config.tiers);

    std::map<std::string, std::string> symptoms;
    for (const auto& id : symptom_ids) symptoms[id] = d.taxonomy.nodes.at(id).label;
    d.scores = build_score_table(symptoms, d.gnn_deltas, d.en_perms, d.proximity, config.tiers);
    for (const auto& r : d.scores) d.tiers[r.sub2_id] = r.tier;
    return d;
}

// =============================================================================
// Simulation
// =============================================================================

struct SimCell {
    int window = 0;
    std::string block_id;
    std::optional<MetricsReport> metrics;
    std::string skip_reason;  // set when metrics is empty
};

struct WindowSummary {
    int window = 0;
    std::size_t n_blocks = 0;
    std::optional<double> mean_sensitivity, sd_sensitivity;
    std::optional<double> mean_alert_burden, sd_alert_burden;
    std::optional<double> threshold;
    std::optional<std::string> warning;
};

struct SimReport {
    std::uint64_t seed = 0;
    std::string config_hash;
    std::vector<SimCell> cells;  // sorted by (window, block order)
    std::vector<WindowSummary> windows;
    std::vector<SymptomScoreRow> scores;
    std::map<std::string, Proximity> proximity;
    std::map<int, ScreenerModel> models;
    std::optional<PipelineComparison> pipelines;
    std::vector<std::string> excluded_cases;
};

/// Patients with at least one message in the window, with their window
/// messages.
inline std::vector<std::pair<const PatientRecord*, std::vector<const MessageRecord*>>>
eligible_patients(const Corpus& corpus, const std::vector<PatientRecord>& patients, int days) {
    std::vector<std::pair<const PatientRecord*, std::vector<const MessageRecord*>>> out;
    for (const auto& p : patients) {
        auto w = extract_window(p, corpus, ScreeningWindow{days});
        if (!w.empty()) out.emplace_back(&p, std::move(w));
    }
    return out;
}

namespace detail {

inline void summarise(WindowSummary& s, const std::vector<SimCell>& cells) {
    std::vector<double> se, burden;
    for (const auto& c : cells) {
        if (c.window != s.window || !c.metrics) continue;
        ++s.n_blocks;
        burden.push_back(c.metrics->alert_burden);
        if (c.metrics->sensitivity) se.push_back(*c.metrics->sensitivity);
    }
    if (!se.empty()) {
        s.mean_sensitivity = mean(se);
        s.sd_sensitivity = stddev(se);
    }
    if (!burden.empty()) {
        s.mean_alert_burden = mean(burden);
        s.sd_alert_burden = stddev(burden);
    }
}

} // namespace detail

/// Calibrates a screener per window on the calibration block and evaluates
/// every window x block cell on eligible patients.
inline SimReport screen_blocks(const Discovery& d, const PipelineConfig& config) {
    SimReport report;
    report.seed = config.seed;
    report.scores = d.scores;
    report.proximity = d.proximity;
    report.pipelines = d.pipelines;
    report.excluded_cases = d.blocks.excluded_cases;
    const auto& corpus = d.annotated;
    const auto calibration = d.blocks.blocks[d.calibration_index].cohort.patients();

    for (int w : config.windows) {
        if (w < 1) throw Error("screening window must be >= 1 day");
        WindowSummary summary;
        summary.window = w;
        std::optional<ScreenerModel> model;
        std::string skip;
        {
            std::vector<WindowFeatures> feats;
            Labels labels;
            for (const auto& [p, msgs] : eligible_patients(corpus, calibration, w)) {
                feats.push_back(window_features(msgs, d.tiers));
                labels.push_back(p->event ? 1 : 0);
            }
            const auto pos = std::count(labels.begin(), labels.end(), 1);
            if (pos == 0 || pos == static_cast<std::ptrdiff_t>(labels.size())) {
                skip = "calibration block has a single class or no eligible patients";
            } else {
                auto [m, cal] = fit_screener(feats, labels, config.screener);
                model = m;
                summary.threshold = m.threshold;
                summary.warning = cal.warning;
                report.models[w] = m;
            }
        }
        for (const auto& bc : d.blocks.blocks) {
            SimCell cell{w, bc.block.block_id, std::nullopt, {}};
            if (!model) {
                cell.skip_reason = skip;
            } else {
                auto eligible = eligible_patients(corpus, bc.cohort.patients(), w);
                if (eligible.empty()) {
                    cell.skip_reason = "no eligible patients";
                } else {
                    std::vector<bool> flags;
                    Labels labels;
                    std::size_t n_messages = 0;
                    for (const auto& [p, msgs] : eligible) {
                        flags.push_back(screen_patient(msgs, d.tiers, *model).flag);
                        labels.push_back(p->event ? 1 : 0);
                        n_messages += msgs.size();
                    }
                    auto m = evaluate(flags, labels, config.screener.prevalence);
                    m.window = w;
                    m.block_id = bc.block.block_id;
                    m.n_messages = n_messages;
                    cell.metrics = m;
                }
            }
            report.cells.push_back(std::move(cell));
        }
        detail::summarise(summary, report.cells);
        report.windows.push_back(std::move(summary));
    }
    return report;
}

/// Full simulation on an existing corpus.
inline SimReport run_simulation(const Corpus& corpus, AnnotatorBackend& backend, const PipelineConfig& config) {
    return screen_blocks(discover(corpus, backend, config), config);
}

// =============================================================================
// Report emission
// =============================================================================

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << content;
    out.close();
    if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline json optional_text(const std::optional<std::string>& s) { return s ? json(*s) : json(nullptr); }

} // namespace detail

inline json summary_json(const SimReport& r) {
    json windows = json::array();
    for (const auto& w : r.windows)
        windows.push_back({{"window", w.window},
                           {"n_blocks", w.n_blocks},
                           {"mean_sensitivity", optional_json(w.mean_sensitivity)},
                           {"sd_sensitivity", optional_json(w.sd_sensitivity)},
                           {"mean_alert_burden", optional_json(w.mean_alert_burden)},
                           {"sd_alert_burden", optional_json(w.sd_alert_burden)},
                           {"threshold", optional_json(w.threshold)},
                           {"warning", detail::optional_text(w.warning)}});
    json pipelines = nullptr;
    if (r.pipelines) {
        pipelines = json::object();
        for (const auto& [name, aucs] : r.pipelines->fold_aucs)
            pipelines[name] = {{"fold_aucs", aucs},
                               {"mean_auc", aucs.empty() ? json(nullptr) : json(mean(aucs))}};
        pipelines["skipped"] = r.pipelines->skipped;
    }
    return {{"seed", r.seed},
            {"config_hash", r.config_hash},
            {"windows", windows},
            {"pipelines", pipelines},
            {"excluded_cases", r.excluded_cases}};
}

/// Writes metrics.csv, summary.json, scores.csv, proximity_curves.csv,
/// screener_models.json, the figure data files and manifest.json. The
/// manifest is marked incomplete until every other file is written.
inline void emit_report(const SimReport& r, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw Error("cannot create '" + out_dir.string() + "': " + ec.message());
    detail::write_text(out_dir / "manifest.json", json{{"complete", false}}.dump(2) + "\n");

    std::map<std::string, std::string> files;
    std::string metrics = metrics_csv_header();
    for (const auto& c : r.cells)
        if (c.metrics) metrics += metrics_csv_row(*c.metrics);
    files["metrics.csv"] = metrics;
    files["summary.json"] = summary_json(r).dump(2) + "\n";
    files["scores.csv"] = scores_csv(r.scores);
    files["proximity_curves.csv"] = proximity_csv(r.proximity);

    json models = json::object();
    for (const auto& [w, m] : r.models) models[std::to_string(w)] = to_json(m);
    files["screener_models.json"] = models.dump(2) + "\n";

    std::map<std::string, std::string> labels;
    for (const auto& s : r.scores) labels[s.sub2_id] = s.label;
    std::string fig3 = "sub2_id,label,day_offset,probability\n";
    for (const auto& [id, p] : r.proximity)
        for (const auto& [day, v] : p.curve)
            fig3 += csv_field(id) + "," + csv_field(labels.count(id) ? labels[id] : id) + "," + std::to_string(day) +
                    "," + fmt_double(v) + "\n";
    files["fig3_proximity.csv"] = fig3;

    auto ranked = r.scores;
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.stt != b.stt) return a.stt > b.stt;
        return a.sub2_id < b.sub2_id;
    });
    std::string fig4 = "rank,sub2_id,label,pct7,pct30,stt,composite,tier\n";
    for (std::size_t i = 0; i < ranked.size(); ++i)
        fig4 += std::to_string(i + 1) + "," + csv_field(ranked[i].sub2_id) + "," + csv_field(ranked[i].label) + "," +
                fmt_double(ranked[i].pct7) + "," + fmt_double(ranked[i].pct30) + "," + fmt_double(ranked[i].stt) + "," +
                fmt_double(ranked[i].composite) + "," + std::string(to_string(ranked[i].tier)) + "\n";
    files["fig4_rankings.csv"] = fig4;

    std::string fig5 = "window,n_blocks,mean_sensitivity,sd_sensitivity,mean_alert_burden,sd_alert_burden\n";
    for (const auto& w : r.windows)
        fig5 += std::to_string(w.window) + "," + std::to_string(w.n_blocks) + "," + fmt_optional(w.mean_sensitivity) +
                "," + fmt_optional(w.sd_sensitivity) + "," + fmt_optional(w.mean_alert_burden) + "," +
                fmt_optional(w.sd_alert_burden) + "\n";
    files["fig5_window_performance.csv"] = fig5;

    for (const auto& [name, content] : files) detail::write_text(out_dir / name, content);

    json cells = json::array();
    for (const auto& c : r.cells)
        cells.push_back({{"window", c.window},
                         {"block_id", c.block_id},
                         {"status", c.metrics ? "ok" : "skipped"},
                         {"reason", c.metrics ? json(nullptr) : json(c.skip_reason)}});
    json listing = json::array();
    for (const auto& [name, content] : files)
        listing.push_back({{"path", name}, {"bytes", content.size()}, {"fnv1a64", hex64(fnv1a64(content))}});
    json manifest = {{"complete", true},
                     {"seed", r.seed},
                     {"config_hash", r.config_hash},
                     {"cells", cells},
                     {"files", listing}};
    detail::write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
}

} // namespace msgscreen
