#pragma once

// Shared fixtures for the test suites.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include <unistd.h>

#include "msgscreen/config.hpp"

namespace msgscreen::testing {

/// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("msgscreen_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::string str(const std::string& name = {}) const { return name.empty() ? path_.string() : (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline Date day(const char* iso) { return require_date(iso, "test date"); }

inline MessageRecord message(std::string id, std::string patient, Date ts, std::string text = {},
                             std::vector<Annotation> labels = {}) {
    return {std::move(id), std::move(patient), ts, std::move(text), std::move(labels)};
}

inline PatientRecord patient(std::string id, bool event = false, std::optional<Date> event_date = std::nullopt,
                             AgeBand band = AgeBand::A50_64, std::string sex = "Female") {
    PatientRecord p;
    p.patient_id = std::move(id);
    p.event = event;
    p.event_date = event_date;
    if (event) p.anchor_date = event_date;
    p.age_band = band;
    p.sex = std::move(sex);
    return p;
}

/// MAIN "neuro" and "gen", one SUB1 under each, and SUB2 nodes s1..s3 with
/// single-word lexicons.
inline Taxonomy small_taxonomy() {
    Taxonomy t;
    t.version = 1;
    auto add = [&](std::string id, TopicLevel level, std::string label, std::optional<std::string> parent,
                   std::set<std::string> lex = {}) {
        t.nodes[id] = TopicNode{id, level, std::move(label), std::move(parent), std::move(lex)};
    };
    add("neuro", TopicLevel::Main, "Neurological", std::nullopt);
    add("gen", TopicLevel::Main, "General", std::nullopt);
    add("neuro.a", TopicLevel::Sub1, "Sensation", "neuro");
    add("gen.a", TopicLevel::Sub1, "Systemic", "gen");
    add("s1", TopicLevel::Sub2, "Dizziness", "neuro.a", {"dizzy"});
    add("s2", TopicLevel::Sub2, "Numbness", "neuro.a", {"numb"});
    add("s3", TopicLevel::Sub2, "Fever", "gen.a", {"fever"});
    return t;
}

/// The standard 10-node heterograph: 5 patients, 3 symptoms and 2
/// comorbidities, with semantic and patient-similarity edges. Labels are
/// {1, 1, 0, 0, 1}.
struct StandardGraph {
    HeteroGraph graph;
    Labels labels;
    std::vector<PatientRecord> patients;
    std::vector<MessageRecord> messages;
};

inline StandardGraph standard_graph() {
    StandardGraph s;
    const Date anchor = day("2024-10-01");
    auto make = [&](std::string id, bool event, AgeBand band, std::string sex, std::set<std::string> comorb) {
        auto p = patient(std::move(id), event, event ? std::optional<Date>(anchor) : std::nullopt, band, std::move(sex));
        p.anchor_date = anchor;
        p.comorbidities = std::move(comorb);
        return p;
    };
    s.patients = {make("p1", true, AgeBand::A65_74, "Male", {"htn"}),
                  make("p2", true, AgeBand::A75Plus, "Female", {"htn", "dm"}),
                  make("p3", false, AgeBand::A35_49, "Female", {}),
                  make("p4", false, AgeBand::A50_64, "Male", {"dm"}),
                  make("p5", true, AgeBand::A65_74, "Female", {"htn"})};
    s.labels = {1, 1, 0, 0, 1};
    int seq = 0;
    auto msg = [&](const std::string& pid, int days_before, const std::string& sub2) {
        s.messages.push_back(message("m" + std::to_string(seq++), pid, anchor - std::chrono::days{days_before}, "text",
                                     {{sub2, 1.0}}));
    };
    msg("p1", 2, "s1");
    msg("p1", 10, "s2");
    msg("p2", 1, "s1");
    msg("p2", 40, "s3");
    msg("p3", 20, "s3");
    msg("p4", 5, "s2");
    msg("p4", 60, "s3");
    msg("p5", 3, "s1");
    msg("p5", 3, "s2");
    HashedTrigramEmbedding emb(8);
    s.graph = build_graph(s.messages, s.patients, small_taxonomy(), emb);
    s.graph = add_semantic_edges(s.graph, emb, -0.99);
    s.graph = add_patient_similarity_edges(s.graph, 2);
    return s;
}

/// Small, fast pipeline settings for end-to-end tests.
inline json quick_config(std::uint64_t seed = 7) {
    json c = default_config();
    c["seed"] = seed;
    c["synthetic"]["n_cases"] = 60;
    c["synthetic"]["n_controls"] = 140;
    c["gnn"]["epochs"] = 30;
    c["gnn"]["hidden"] = 8;
    c["en"]["n_lambda"] = 15;
    c["en"]["folds"] = 3;
    c["en"]["permutations"] = 3;
    c["en"]["compare_pipelines"] = false;
    return c;
}

} // namespace msgscreen::testing
