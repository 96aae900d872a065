#pragma once

// Command-line front end. Exit codes: 0 success, 1 data or config error,
// 2 usage error.

#include <iostream>

#include <CLI11.hpp>

#include "msgscreen/config.hpp"

namespace msgscreen {

namespace cli {

struct Options {
    std::string config_path;
    std::string out_dir = "out";
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
    std::string backend = "lexicon";
    std::string messages, patients, taxonomy, lexicon, scores, models, gnn_deltas, en_coefficients;
};

/// Output directory whose manifest.json reads `complete: false` until
/// finish() lists the written files.
class OutputDir {
public:
    explicit OutputDir(std::filesystem::path dir) : dir_(std::move(dir)) {
        std::error_code ec;
        std::filesystem::create_directories(dir_, ec);
        if (ec) throw Error("cannot create '" + dir_.string() + "': " + ec.message());
        write_raw("manifest.json", json{{"complete", false}}.dump(2) + "\n");
    }

    void write(const std::string& name, const std::string& content) {
        write_raw(name, content);
        files_[name] = content;
    }

    void finish(const std::string& command, const std::string& config_hash) {
        json listing = json::array();
        for (const auto& [name, content] : files_)
            listing.push_back({{"path", name}, {"bytes", content.size()}, {"fnv1a64", hex64(fnv1a64(content))}});
        write_raw("manifest.json", json{{"complete", true}, {"command", command}, {"config_hash", config_hash},
                                        {"files", listing}}.dump(2) + "\n");
    }

    const std::filesystem::path& path() const { return dir_; }

private:
    void write_raw(const std::string& name, const std::string& content) {
        auto p = dir_ / name;
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write '" + p.string() + "'");
        out << content;
        out.close();
        if (!out) throw Error("write failed for '" + p.string() + "'");
    }

    std::filesystem::path dir_;
    std::map<std::string, std::string> files_;
};

inline std::string require(const std::string& value, const char* flag) {
    if (value.empty()) throw CLI::RequiredError(std::string("--") + flag);
    return value;
}

template <typename Range>
std::string ndjson(const Range& records) {
    std::string s;
    for (const auto& r : records) s += to_json(r).dump() + "\n";
    return s;
}

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw Error("'" + path + "': " + e.what());
    }
}

inline Taxonomy read_taxonomy(const std::string& path) {
    try {
        return taxonomy_from_json(read_json_file(path));
    } catch (const json::exception& e) {
        throw Error("'" + path + "': " + e.what());
    } catch (const Error& e) {
        throw Error("'" + path + "': " + e.what());
    }
}

/// Two-column numeric CSV (key in column 0, value in `value_column`).
inline std::map<std::string, double> read_keyed_csv(const std::string& path, std::size_t value_column) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    std::string line;
    std::getline(in, line);
    std::map<std::string, double> out;
    for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
        if (line.empty()) continue;
        auto f = csv_split(line);
        if (f.size() <= value_column) throw Error(path + ":" + std::to_string(lineno) + ": too few fields");
        try {
            out[f[0]] = std::stod(f[value_column]);
        } catch (const std::exception&) {
            throw Error(path + ":" + std::to_string(lineno) + ": invalid number");
        }
    }
    return out;
}

struct Context {
    Options opt;
    json config;
    PipelineConfig pipeline;
    std::string hash;

    Taxonomy lexicon_reference() const {
        if (!opt.lexicon.empty()) return read_taxonomy(opt.lexicon);
        return reference_taxonomy(synthetic_vocabulary(synthetic_spec(config).vocabulary_size));
    }

    std::unique_ptr<AnnotatorBackend> backend() const { return make_backend(opt.backend, lexicon_reference()); }

    std::vector<PatientRecord> anchored_patients() const {
        auto patients = load_patients(require(opt.patients, "patients"));
        for (const auto& p : patients)
            if (!p.anchor_date) throw Error("'" + opt.patients + "': patient '" + p.patient_id + "' has no anchor_date");
        return patients;
    }
};

inline Labels labels_of(const std::vector<PatientRecord>& patients) {
    Labels y;
    for (const auto& p : patients) y.push_back(p.event ? 1 : 0);
    return y;
}

inline std::vector<MessageRecord> messages_of(const Corpus& corpus, const std::vector<PatientRecord>& patients) {
    std::vector<MessageRecord> out;
    for (const auto& p : patients)
        for (const auto* m : corpus.messages_of(p.patient_id)) out.push_back(*m);
    return out;
}

// =============================================================================
// Subcommands
// =============================================================================

inline void cmd_ingest(const Context& ctx, OutputDir& out) {
    const auto messages = require(ctx.opt.messages, "messages");
    auto corpus = load_corpus(messages, require(ctx.opt.patients, "patients"));
    const auto& p = ctx.pipeline;
    auto blocks = build_temporal_blocks(corpus, BlockSpec{p.blocks, p.cohort_ratio, p.strata_keys, mix_seed(p.seed, 3)});
    out.write("messages.ndjson", ndjson(corpus.messages()));
    out.write("patients.ndjson", ndjson(corpus.patients()));
    json cohort = json::object();
    json block_list = json::array();
    for (const auto& bc : blocks.blocks) {
        json ids = json::array();
        for (const auto& pr : bc.cohort.patients()) ids.push_back({{"patient_id", pr.patient_id}, {"anchor_date", format_date(*pr.anchor_date)}});
        CohortSpec cs{p.cohort_ratio, p.strata_keys, false, 0};
        block_list.push_back({{"block_id", bc.block.block_id},
                              {"start", format_date(bc.block.start)},
                              {"end", format_date(bc.block.end)},
                              {"cases", bc.cohort.cases.size()},
                              {"controls", bc.cohort.controls.size()},
                              {"patients", ids},
                              {"shortfall", shortfall_report(bc.cohort, cs)}});
        out.write("cohort_" + bc.block.block_id + ".ndjson", ndjson(bc.cohort.patients()));
    }
    cohort["blocks"] = block_list;
    cohort["excluded_cases"] = blocks.excluded_cases;
    out.write("cohort.json", cohort.dump(2) + "\n");
}

inline void cmd_taxonomy_seed(const Context& ctx, OutputDir& out) {
    auto messages = Corpus(load_messages(require(ctx.opt.messages, "messages")), {}).messages();
    auto backend = ctx.backend();
    auto tax = seed_taxonomy(messages, *backend, ctx.pipeline.taxonomy);
    out.write("taxonomy.json", to_json(tax).dump(2) + "\n");
}

inline void cmd_taxonomy_update(const Context& ctx, OutputDir& out) {
    auto tax = read_taxonomy(require(ctx.opt.taxonomy, "taxonomy"));
    auto messages = Corpus(load_messages(require(ctx.opt.messages, "messages")), {}).messages();
    auto backend = ctx.backend();
    const std::size_t step = ctx.pipeline.taxonomy.update_batch_size;
    int batch_index = static_cast<int>(tax.ledger.empty() ? 1 : tax.ledger.back().batch_index + 1);
    std::span<const MessageRecord> all(messages);
    for (std::size_t pos = 0; pos < all.size(); pos += step)
        tax = update_taxonomy(tax, all.subspan(pos, std::min(step, all.size() - pos)), *backend, batch_index++).taxonomy;
    out.write("taxonomy.json", to_json(tax).dump(2) + "\n");
}

inline void cmd_annotate(const Context& ctx, OutputDir& out) {
    auto tax = read_taxonomy(require(ctx.opt.taxonomy, "taxonomy"));
    auto messages = Corpus(load_messages(require(ctx.opt.messages, "messages")), {}).messages();
    auto backend = ctx.backend();
    out.write("messages.ndjson", ndjson(annotate_messages(messages, tax, *backend, ctx.pipeline.taxonomy)));
}

inline HeteroGraph cli_graph(const Context& ctx, const Corpus& corpus, const std::vector<PatientRecord>& patients,
                             const Taxonomy& tax) {
    return discovery_graph(corpus, patients, tax, ctx.pipeline);
}

inline void cmd_graph(const Context& ctx, OutputDir& out) {
    auto tax = read_taxonomy(require(ctx.opt.taxonomy, "taxonomy"));
    auto patients = ctx.anchored_patients();
    Corpus corpus(load_messages(require(ctx.opt.messages, "messages")), patients);
    auto g = cli_graph(ctx, corpus, patients, tax);
    write_graph_dump(g, out.path());
    json meta = {{"patients", g.n_patients()},
                 {"symptoms", g.n_symptoms()},
                 {"comorbidities", g.n_comorbidities()},
                 {"patient_symptom_edges", g.patient_symptom.size()},
                 {"patient_patient_edges", g.patient_patient.size()},
                 {"symptom_symptom_edges", g.symptom_symptom.size()}};
    out.write("graph.json", meta.dump(2) + "\n");
}

inline void cmd_train_gnn(const Context& ctx, OutputDir& out) {
    auto tax = read_taxonomy(require(ctx.opt.taxonomy, "taxonomy"));
    auto patients = ctx.anchored_patients();
    Corpus corpus(load_messages(require(ctx.opt.messages, "messages")), patients);
    auto g = cli_graph(ctx, corpus, patients, tax);
    if (g.n_symptoms() == 0) throw Error("train-gnn: no annotated symptoms before the anchor dates");
    auto labels = labels_of(patients);
    TrainConfig tc = ctx.pipeline.gnn;
    tc.seed = mix_seed(ctx.pipeline.seed, 1);
    auto result = train(g, labels, tc);
    out.write("model.json", to_json(result.model).dump() + "\n");
    std::string history = "epoch,loss\n";
    for (std::size_t e = 0; e < result.history.size(); ++e) history += std::to_string(e) + "," + fmt_double(result.history[e]) + "\n";
    out.write("history.csv", history);
    auto deltas = event_deltas(result.model, g, labels);
    std::string d = "sub2_id,label,event_delta\n";
    for (std::size_t s = 0; s < deltas.size(); ++s)
        d += csv_field(g.symptom_ids[s]) + "," + csv_field(g.symptom_labels[s]) + "," + fmt_double(deltas[s]) + "\n";
    out.write("event_deltas.csv", d);
}

inline void cmd_fit_en(const Context& ctx, OutputDir& out) {
    auto tax = read_taxonomy(require(ctx.opt.taxonomy, "taxonomy"));
    auto patients = ctx.anchored_patients();
    Corpus corpus(load_messages(require(ctx.opt.messages, "messages")), patients);
    auto X = symptom_matrix(corpus, patients, tax.ids(TopicLevel::Sub2), ctx.pipeline.tiers.observation_days);
    auto labels = labels_of(patients);
    ENConfig en = ctx.pipeline.en;
    en.seed = mix_seed(ctx.pipeline.seed, 2);
    auto fit = fit_en(X, labels, en);
    auto importance = permutation_importance(fit, X, labels, en);
    out.write("en_coefficients.csv", coefficients_csv(fit, importance));
    json meta = {{"lambda", fit.lambda}, {"alpha", fit.alpha}, {"intercept", fit.intercept},
                 {"objective", fit.objective}, {"converged", fit.converged}, {"iterations", fit.iterations}};
    out.write("en_fit.json", meta.dump(2) + "\n");
}

inline void cmd_score(const Context& ctx, OutputDir& out) {
    auto tax = read_taxonomy(require(ctx.opt.taxonomy, "taxonomy"));
    auto patients = ctx.anchored_patients();
    Corpus corpus(load_messages(require(ctx.opt.messages, "messages")), patients);
    auto deltas = read_keyed_csv(require(ctx.opt.gnn_deltas, "gnn-deltas"), 2);
    auto perms = read_keyed_csv(require(ctx.opt.en_coefficients, "en-coefficients"), 2);
    std::map<std::string, Date> anchors;
    for (const auto& p : patients)
        if (p.event) anchors[p.patient_id] = *p.anchor_date;
    auto prox = temporal_proximity(corpus.messages(), anchors, ctx.pipeline.tiers);
    std::map<std::string, std::string> symptoms;
    for (const auto& id : tax.ids(TopicLevel::Sub2)) symptoms[id] = tax.nodes.at(id).label;
    for (const auto& [id, v] : deltas)
        if (!symptoms.count(id)) throw Error("'" + ctx.opt.gnn_deltas + "': unknown symptom '" + id + "'");
    auto rows = build_score_table(symptoms, deltas, perms, prox, ctx.pipeline.tiers);
    out.write("scores.csv", scores_csv(rows));
    out.write("proximity_curves.csv", proximity_csv(prox));
}

inline TierMap read_tiers(const std::string& path) {
    TierMap tiers;
    for (const auto& r : read_scores_csv(path)) tiers[r.sub2_id] = r.tier;
    return tiers;
}

inline void cmd_calibrate(const Context& ctx, OutputDir& out) {
    auto tiers = read_tiers(require(ctx.opt.scores, "scores"));
    auto patients = ctx.anchored_patients();
    Corpus corpus(load_messages(require(ctx.opt.messages, "messages")), patients);
    json models = json::object();
    json warnings = json::array();
    for (int w : ctx.pipeline.windows) {
        std::vector<WindowFeatures> feats;
        Labels labels;
        for (const auto& [p, msgs] : eligible_patients(corpus, patients, w)) {
            feats.push_back(window_features(msgs, tiers));
            labels.push_back(p->event ? 1 : 0);
        }
        const auto pos = std::count(labels.begin(), labels.end(), 1);
        if (pos == 0 || pos == static_cast<std::ptrdiff_t>(labels.size())) {
            models[std::to_string(w)] = nullptr;
            warnings.push_back({{"window", w}, {"warning", "skipped: eligible patients form a single class"}});
            continue;
        }
        auto [model, cal] = fit_screener(feats, labels, ctx.pipeline.screener);
        models[std::to_string(w)] = to_json(model);
        if (cal.warning) warnings.push_back({{"window", w}, {"warning", *cal.warning}});
    }
    out.write("screener_models.json", models.dump(2) + "\n");
    out.write("calibration_warnings.json", warnings.dump(2) + "\n");
}

inline void cmd_screen(const Context& ctx, OutputDir& out) {
    auto tiers = read_tiers(require(ctx.opt.scores, "scores"));
    auto models = read_json_file(require(ctx.opt.models, "models"));
    auto patients = ctx.anchored_patients();
    Corpus corpus(load_messages(require(ctx.opt.messages, "messages")), patients);
    std::string results = "window,patient_id,eligible,flag,prob,reason\n";
    std::string metrics = metrics_csv_header();
    for (int w : ctx.pipeline.windows) {
        auto key = std::to_string(w);
        if (!models.contains(key)) throw Error("'" + ctx.opt.models + "': no model for window " + key);
        if (models.at(key).is_null()) continue;  // skipped at calibration
        auto model = screener_from_json(models.at(key));
        std::vector<bool> flags;
        Labels labels;
        std::size_t n_messages = 0;
        for (const auto& p : patients) {
            auto msgs = extract_window(p, corpus, ScreeningWindow{w});
            if (msgs.empty()) {
                results += key + "," + csv_field(p.patient_id) + ",false,false,,none\n";
                continue;
            }
            auto r = screen_patient(msgs, tiers, model);
            results += key + "," + csv_field(p.patient_id) + ",true," + (r.flag ? "true" : "false") + "," +
                       fmt_double(r.prob) + "," + std::string(to_string(r.reason)) + "\n";
            flags.push_back(r.flag);
            labels.push_back(p.event ? 1 : 0);
            n_messages += msgs.size();
        }
        if (flags.empty()) continue;
        auto m = evaluate(flags, labels, model.prevalence);
        m.window = w;
        m.block_id = "all";
        m.n_messages = n_messages;
        metrics += metrics_csv_row(m);
    }
    out.write("screen_results.csv", results);
    out.write("metrics.csv", metrics);
}

inline void mark_incomplete(const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw Error("cannot create '" + out_dir.string() + "': " + ec.message());
    detail::write_text(out_dir / "manifest.json", json{{"complete", false}}.dump(2) + "\n");
}

inline void cmd_simulate(const Context& ctx, const std::filesystem::path& out_dir) {
    mark_incomplete(out_dir);
    auto cohort = generate_synthetic_cohort(synthetic_spec(ctx.config));
    Corpus corpus(cohort.messages, cohort.patients);
    auto backend = make_backend(ctx.opt.backend, cohort.reference);
    auto discovery = discover(corpus, *backend, ctx.pipeline);
    auto report = screen_blocks(discovery, ctx.pipeline);
    report.config_hash = ctx.hash;
    emit_report(report, out_dir);
    std::filesystem::create_directories(out_dir / "corpus");
    detail::write_text(out_dir / "corpus" / "messages.ndjson", ndjson(corpus.messages()));
    detail::write_text(out_dir / "corpus" / "patients.ndjson", ndjson(corpus.patients()));
    detail::write_text(out_dir / "corpus" / "truth.json", json{{"planted_ids", cohort.truth.planted_ids}}.dump(2) + "\n");
    detail::write_text(out_dir / "taxonomy.json", to_json(discovery.taxonomy).dump(2) + "\n");
    detail::write_text(out_dir / "config.json", ctx.config.dump(2) + "\n");
}

inline void cmd_report(const Context& ctx, const std::filesystem::path& out_dir) {
    mark_incomplete(out_dir);
    const auto messages = require(ctx.opt.messages, "messages");
    auto corpus = load_corpus(messages, require(ctx.opt.patients, "patients"));
    auto backend = ctx.backend();
    auto discovery = discover(corpus, *backend, ctx.pipeline);
    auto report = screen_blocks(discovery, ctx.pipeline);
    report.config_hash = ctx.hash;
    emit_report(report, out_dir);
    detail::write_text(out_dir / "taxonomy.json", to_json(discovery.taxonomy).dump(2) + "\n");
    detail::write_text(out_dir / "config.json", ctx.config.dump(2) + "\n");
}

} // namespace cli

/// Parses argv and runs one subcommand.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    using namespace cli;
    Options opt;
    CLI::App app{"msgscreen: symptom risk screening over patient messages"};
    app.require_subcommand(1, 1);
    app.fallthrough();
    app.add_option("--config", opt.config_path, "JSON configuration file");
    app.add_option("--out", opt.out_dir, "output directory");
    app.add_option("--seed", opt.seed, "override the configuration seed");
    app.add_option("--set", opt.overrides, "override a configuration field (key=value)")->take_all();
    app.add_option("--backend", opt.backend, "annotator backend: lexicon, scripted:<dir> or http:<url>");
    app.add_option("--messages", opt.messages, "messages NDJSON");
    app.add_option("--patients", opt.patients, "patients NDJSON");
    app.add_option("--taxonomy", opt.taxonomy, "taxonomy JSON");
    app.add_option("--lexicon", opt.lexicon, "reference taxonomy with lexicons for the lexicon backend");
    app.add_option("--scores", opt.scores, "scores CSV");
    app.add_option("--models", opt.models, "screener models JSON");
    app.add_option("--gnn-deltas", opt.gnn_deltas, "event_deltas.csv from train-gnn");
    app.add_option("--en-coefficients", opt.en_coefficients, "en_coefficients.csv from fit-en");

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"ingest", "validate a corpus and build matched temporal-block cohorts"},
        {"taxonomy-seed", "seed a taxonomy from the first message batch"},
        {"taxonomy-update", "stream messages through taxonomy updates"},
        {"annotate", "assign SUB2 symptoms to messages"},
        {"graph", "build the heterogeneous graph and dump its edges"},
        {"train-gnn", "train the graph model and compute event deltas"},
        {"fit-en", "fit the elastic-net model and permutation importance"},
        {"score", "compute proximity, composite scores and tiers"},
        {"calibrate", "fit screeners and thresholds per window"},
        {"screen", "screen patients and compute metrics"},
        {"simulate", "run the full synthetic pipeline"},
        {"report", "run the full pipeline on a corpus and write a report"},
    };
    for (const auto& [name, help] : commands) app.add_subcommand(name, help);

    // CLI11 takes mutable argv.
    std::vector<std::string> storage(argv, argv + argc);
    std::vector<char*> args;
    for (auto& s : storage) args.push_back(s.data());
    try {
        app.parse(static_cast<int>(args.size()), args.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return 2;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        Context ctx;
        ctx.opt = opt;
        ctx.config = opt.config_path.empty() ? default_config() : load_config(opt.config_path);
        for (const auto& o : opt.overrides) ctx.config = [&] {
            json c = ctx.config;
            apply_override(c, o);
            return c;
        }();
        if (opt.seed) ctx.config["seed"] = *opt.seed;
        ctx.pipeline = pipeline_config(ctx.config);
        ctx.hash = config_hash(ctx.config);

        if (command == "simulate") {
            cmd_simulate(ctx, opt.out_dir);
        } else if (command == "report") {
            cmd_report(ctx, opt.out_dir);
        } else {
            OutputDir dir(opt.out_dir);
            if (command == "ingest") cmd_ingest(ctx, dir);
            else if (command == "taxonomy-seed") cmd_taxonomy_seed(ctx, dir);
            else if (command == "taxonomy-update") cmd_taxonomy_update(ctx, dir);
            else if (command == "annotate") cmd_annotate(ctx, dir);
            else if (command == "graph") cmd_graph(ctx, dir);
            else if (command == "train-gnn") cmd_train_gnn(ctx, dir);
            else if (command == "fit-en") cmd_fit_en(ctx, dir);
            else if (command == "score") cmd_score(ctx, dir);
            else if (command == "calibrate") cmd_calibrate(ctx, dir);
            else if (command == "screen") cmd_screen(ctx, dir);
            dir.finish(command, ctx.hash);
        }
        out << command << ": wrote " << opt.out_dir << "\n";
        return 0;
    } catch (const CLI::RequiredError& e) {
        err << "error: " << command << ": " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace msgscreen
