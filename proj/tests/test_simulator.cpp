#include <gtest/gtest.h>

#include "support.hpp"

using namespace msgscreen;
using namespace msgscreen::testing;

namespace {

struct Run {
    SyntheticCohort cohort;
    PipelineConfig config;
    Discovery discovery;
    SimReport report;
};

Run run(const json& c) {
    Run r;
    r.cohort = generate_synthetic_cohort(synthetic_spec(c));
    r.config = pipeline_config(c);
    Corpus corpus(r.cohort.messages, r.cohort.patients);
    auto backend = make_backend("lexicon", r.cohort.reference);
    r.discovery = discover(corpus, *backend, r.config);
    r.report = screen_blocks(r.discovery, r.config);
    r.report.config_hash = config_hash(c);
    return r;
}

const Run& shared_run() {
    static const Run r = run(quick_config(11));
    return r;
}

std::map<std::string, std::string> read_dir(const std::filesystem::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out[std::filesystem::relative(e.path(), dir).string()] = read_file(e.path());
    return out;
}

} // namespace

// -----------------------------------------------------------------------------
// Generator
// -----------------------------------------------------------------------------

TEST(GenerateSyntheticCohort, SameSeedIsByteIdentical) {
    auto spec = synthetic_spec(quick_config(5));
    auto dump = [](const SyntheticCohort& c) {
        std::string s;
        for (const auto& m : c.messages) s += to_json(m).dump() + "\n";
        for (const auto& p : c.patients) s += to_json(p).dump() + "\n";
        return s;
    };
    auto a = generate_synthetic_cohort(spec);
    auto b = generate_synthetic_cohort(spec);
    EXPECT_EQ(dump(a), dump(b));
    spec.seed += 1;
    EXPECT_NE(dump(a), dump(generate_synthetic_cohort(spec)));
}

TEST(GenerateSyntheticCohort, ExactLabelBalance) {
    auto spec = synthetic_spec(quick_config(5));
    spec.n_cases = 100;
    spec.n_controls = 100;
    auto c = generate_synthetic_cohort(spec);
    ASSERT_EQ(c.patients.size(), 200u);
    auto cases = std::count_if(c.patients.begin(), c.patients.end(), [](const auto& p) { return p.event; });
    EXPECT_EQ(cases, 100);
    for (const auto& p : c.patients) {
        EXPECT_EQ(p.event, p.event_date.has_value());
        if (p.event) {
            EXPECT_GE(*p.event_date, spec.span_start);
            EXPECT_LT(*p.event_date, spec.span_end);
        }
    }
}

TEST(GenerateSyntheticCohort, TruthAndReferenceAgree) {
    auto spec = synthetic_spec(quick_config(6));
    auto c = generate_synthetic_cohort(spec);
    EXPECT_EQ(c.truth.planted_ids, (std::vector<std::string>{"neuro.dizziness", "neuro.speech", "neuro.numbness"}));
    EXPECT_EQ(c.reference.ids(TopicLevel::Sub2).size(), spec.vocabulary_size);
    EXPECT_TRUE(validate_hierarchy(c.reference).ok());
    EXPECT_EQ(c.truth.message_symptom.size(), c.messages.size());
    auto backend = make_backend("lexicon", c.reference);
    // The lexicon backend recovers the generating symptom of every message.
    auto annotated = annotate_messages(c.messages, c.reference, *backend, {});
    for (const auto& m : annotated) {
        const auto& truth = c.truth.message_symptom.at(m.message_id);
        if (truth.empty()) {
            EXPECT_TRUE(m.annotations.empty()) << m.text;
        } else {
            ASSERT_EQ(m.annotations.size(), 1u) << m.text;
            EXPECT_EQ(m.annotations[0].sub2_id, truth);
        }
    }
}

TEST(GenerateSyntheticCohort, PlantedSymptomConcentratesNearEvent) {
    auto spec = synthetic_spec(quick_config(8));
    spec.planted = {{"neuro.dizziness", 6.0, 5.0, 2.0}};
    auto c = generate_synthetic_cohort(spec);
    std::map<std::string, Date> anchor;
    for (const auto& p : c.patients)
        if (p.event) anchor[p.patient_id] = *p.event_date;
    std::map<std::string, std::pair<int, int>> tally;  // symptom -> (within 7 days, within 120)
    for (const auto& m : c.messages) {
        auto it = anchor.find(m.patient_id);
        const auto& s = c.truth.message_symptom.at(m.message_id);
        if (it == anchor.end() || s.empty()) continue;
        const int d = day_number(it->second) - day_number(m.ts);
        if (d < 1 || d > 120) continue;
        tally[s].second += 1;
        if (d <= 7) tally[s].first += 1;
    }
    auto pct7 = [&](const std::string& s) { return static_cast<double>(tally[s].first) / tally[s].second; };
    const double planted = pct7("neuro.dizziness");
    for (const auto& [s, counts] : tally)
        if (s != "neuro.dizziness" && counts.second >= 5) EXPECT_GT(planted, pct7(s)) << s;
}

TEST(GenerateSyntheticCohort, InfeasibleSpecsRejected) {
    auto base = synthetic_spec(quick_config(1));
    auto bad = base;
    bad.span_end = bad.span_start;
    EXPECT_THROW(generate_synthetic_cohort(bad), Error);
    bad = base;
    bad.background_rate = 0.0;
    EXPECT_THROW(generate_synthetic_cohort(bad), Error);
    bad = base;
    bad.planted.push_back({"not.a.symptom", 2.0, 3.0, 1.0});
    EXPECT_THROW(generate_synthetic_cohort(bad), Error);
    bad = base;
    bad.planted[0].odds = 1.0;
    EXPECT_THROW(generate_synthetic_cohort(bad), Error);
    bad = base;
    bad.n_cases = bad.n_controls = 0;
    EXPECT_THROW(generate_synthetic_cohort(bad), Error);
}

TEST(SyntheticVocabulary, PadsBeyondBuiltins) {
    auto v = synthetic_vocabulary(35);
    ASSERT_EQ(v.size(), 35u);
    EXPECT_EQ(v.back().sub2_id, "other.concern_5");
    EXPECT_THROW(synthetic_vocabulary(0), Error);
}

// -----------------------------------------------------------------------------
// Simulation
// -----------------------------------------------------------------------------

TEST(RunSimulation, EighteenCellsInWindowOrder) {
    const auto& r = shared_run().report;
    ASSERT_EQ(r.cells.size(), 18u);
    const std::vector<int> windows = {3, 7, 14, 30, 60, 90};
    for (std::size_t i = 0; i < 18; ++i) {
        EXPECT_EQ(r.cells[i].window, windows[i / 3]);
        EXPECT_EQ(r.cells[i].block_id, "B" + std::to_string(i % 3 + 1));
        EXPECT_TRUE(r.cells[i].metrics || !r.cells[i].skip_reason.empty());
    }
    EXPECT_EQ(r.windows.size(), 6u);
}

TEST(RunSimulation, EligibilityMatchesCountingOracle) {
    const auto& run = shared_run();
    const auto& d = run.discovery;
    for (const auto& cell : run.report.cells) {
        if (!cell.metrics) continue;
        const auto& bc = *std::find_if(d.blocks.blocks.begin(), d.blocks.blocks.end(),
                                       [&](const auto& b) { return b.block.block_id == cell.block_id; });
        std::size_t eligible = 0, cases = 0, n_messages = 0;
        for (const auto& p : bc.cohort.patients()) {
            std::size_t k = 0;
            for (const auto& m : run.cohort.messages)
                if (m.patient_id == p.patient_id && m.ts < *p.anchor_date &&
                    m.ts >= *p.anchor_date - std::chrono::days{cell.window})
                    ++k;
            if (k > 0) {
                ++eligible;
                cases += p.event;
                n_messages += k;
            }
        }
        EXPECT_EQ(cell.metrics->n_patients, eligible) << cell.window << " " << cell.block_id;
        EXPECT_EQ(cell.metrics->tp + cell.metrics->fn, cases);
        EXPECT_EQ(cell.metrics->n_messages, n_messages);
    }
}

TEST(RunSimulation, LongerWindowsNeverShrinkEligibility) {
    const auto& d = shared_run().discovery;
    for (const auto& bc : d.blocks.blocks) {
        std::size_t prev = 0;
        for (int w : {1, 3, 7, 14, 30, 60, 90, 120}) {
            auto n = eligible_patients(d.annotated, bc.cohort.patients(), w).size();
            EXPECT_GE(n, prev);
            prev = n;
        }
    }
}

TEST(RunSimulation, SummaryMatchesCells) {
    const auto& r = shared_run().report;
    for (const auto& w : r.windows) {
        std::vector<double> se, burden;
        for (const auto& c : r.cells)
            if (c.window == w.window && c.metrics) {
                burden.push_back(c.metrics->alert_burden);
                if (c.metrics->sensitivity) se.push_back(*c.metrics->sensitivity);
            }
        EXPECT_EQ(w.n_blocks, burden.size());
        if (se.empty()) continue;
        double m = std::accumulate(se.begin(), se.end(), 0.0) / static_cast<double>(se.size()), ss = 0;
        for (double v : se) ss += (v - m) * (v - m);
        EXPECT_NEAR(*w.mean_sensitivity, m, 1e-12);
        EXPECT_NEAR(*w.sd_sensitivity, std::sqrt(ss / static_cast<double>(se.size())), 1e-12);
    }
}

TEST(RunSimulation, ScoresCoverTaxonomyAndTiersAreConsistent) {
    const auto& run = shared_run();
    const auto& d = run.discovery;
    EXPECT_EQ(d.scores.size(), d.taxonomy.ids(TopicLevel::Sub2).size());
    for (const auto& row : d.scores) EXPECT_EQ(d.tiers.at(row.sub2_id), row.tier);
    for (const auto& [w, model] : run.report.models) EXPECT_GE(model.threshold, 0.0);
    for (const auto& [id, p] : d.proximity) EXPECT_LE(p.pct7, p.pct30);
}

TEST(RunSimulation, ModelThatFlagsNobody) {
    const auto& d = shared_run().discovery;
    ScreenerModel silent;
    silent.rule = {1000, 1000};
    silent.intercept = -50.0;
    silent.threshold = 1.0;
    for (const auto& bc : d.blocks.blocks) {
        std::vector<bool> flags;
        Labels labels;
        for (const auto& [p, msgs] : eligible_patients(d.annotated, bc.cohort.patients(), 90)) {
            flags.push_back(screen_patient(msgs, d.tiers, silent).flag);
            labels.push_back(p->event);
        }
        auto m = evaluate(flags, labels);
        EXPECT_EQ(*m.sensitivity, 0.0);
        EXPECT_EQ(*m.specificity, 1.0);
        EXPECT_EQ(m.alert_burden, 0.0);
    }
}

TEST(RunSimulation, UndefinedCalibrationBlockRejected) {
    auto c = quick_config(3);
    auto cohort = generate_synthetic_cohort(synthetic_spec(c));
    auto p = pipeline_config(c);
    p.calibration_block = "B9";
    auto backend = make_backend("lexicon", cohort.reference);
    EXPECT_THROW(discover(Corpus(cohort.messages, cohort.patients), *backend, p), Error);
}

// -----------------------------------------------------------------------------
// Report emission
// -----------------------------------------------------------------------------

TEST(EmitReport, EmptyReportWritesHeadersAndValidJson) {
    TempDir dir;
    emit_report(SimReport{}, dir.path());
    EXPECT_EQ(read_file(dir.path() / "metrics.csv"), metrics_csv_header());
    auto summary = json::parse(read_file(dir.path() / "summary.json"));
    EXPECT_TRUE(summary["windows"].empty());
    auto manifest = json::parse(read_file(dir.path() / "manifest.json"));
    EXPECT_TRUE(manifest["complete"].get<bool>());
}

TEST(EmitReport, RowsMatchNonSkippedCells) {
    TempDir dir;
    const auto& r = shared_run().report;
    emit_report(r, dir.path());
    auto metrics = read_file(dir.path() / "metrics.csv");
    auto rows = std::count(metrics.begin(), metrics.end(), '\n') - 1;
    auto ok = std::count_if(r.cells.begin(), r.cells.end(), [](const auto& c) { return c.metrics.has_value(); });
    EXPECT_EQ(rows, ok);
    auto manifest = json::parse(read_file(dir.path() / "manifest.json"));
    EXPECT_EQ(manifest["cells"].size(), 18u);
    for (const auto& f : manifest["files"]) {
        auto content = read_file(dir.path() / f["path"].get<std::string>());
        EXPECT_EQ(f["bytes"].get<std::size_t>(), content.size());
        EXPECT_EQ(f["fnv1a64"].get<std::string>(), hex64(fnv1a64(content)));
    }
    for (const char* name : {"scores.csv", "proximity_curves.csv", "fig3_proximity.csv", "fig4_rankings.csv",
                             "fig5_window_performance.csv", "screener_models.json"})
        EXPECT_TRUE(std::filesystem::exists(dir.path() / name)) << name;
}

TEST(EmitReport, RerunIsByteIdentical) {
    TempDir a, b;
    emit_report(shared_run().report, a.path());
    emit_report(run(quick_config(11)).report, b.path());
    EXPECT_EQ(read_dir(a.path()), read_dir(b.path()));
}

TEST(EmitReport, UnwritableDirectoryNamesPath) {
    TempDir dir;
    write_file(dir.path() / "blocker", "x");
    try {
        emit_report(SimReport{}, dir.path() / "blocker" / "sub");
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("blocker"), std::string::npos);
    }
}
