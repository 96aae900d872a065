#include <gtest/gtest.h>

#include <sys/wait.h>

#include <mutex>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "msgscreen/cli.hpp"
#include "support.hpp"

using namespace msgscreen;
using namespace msgscreen::testing;

namespace {

struct CliResult {
    int code = -1;
    std::string out, err;
};

CliResult invoke(std::vector<std::string> args) {
    args.insert(args.begin(), "msgscreen");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    CliResult r;
    r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::map<std::string, std::string> read_dir(const std::filesystem::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out[std::filesystem::relative(e.path(), dir).string()] = read_file(e.path());
    return out;
}

/// Serves the wire protocol from a lexicon backend and records every
/// exchange as a scripted response.
class LexiconServer {
public:
    LexiconServer(Taxonomy reference, std::filesystem::path record_dir)
        : backend_(std::move(reference)), record_dir_(std::move(record_dir)) {
        server_.Post("/annotate", [this](const httplib::Request& req, httplib::Response& res) {
            auto request = json::parse(req.body);
            auto response = respond(request);
            {
                std::lock_guard lock(mutex_);
                ++requests_;
                if (!req.get_header_value("Authorization").empty()) auth_ = req.get_header_value("Authorization");
                write_file(ScriptedBackend::response_path(record_dir_, request), response.dump());
            }
            res.set_content(response.dump(), "application/json");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    ~LexiconServer() {
        server_.stop();
        thread_.join();
    }

    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/annotate"; }
    int requests() {
        std::lock_guard lock(mutex_);
        return requests_;
    }
    std::string auth() {
        std::lock_guard lock(mutex_);
        return auth_;
    }

private:
    json respond(const json& request) {
        std::vector<MessageRecord> batch;
        for (const auto& m : request.at("messages")) {
            MessageRecord r;
            r.message_id = m.at("message_id").get<std::string>();
            r.text = m.at("text").get<std::string>();
            batch.push_back(std::move(r));
        }
        const auto op = request.at("op").get<std::string>();
        if (op == "annotate") {
            json out = json::array();
            for (const auto& a : backend_.annotate(taxonomy_from_json(request.at("taxonomy")), batch)) {
                json labels = json::array();
                for (const auto& l : a.labels) labels.push_back({{"sub2_id", l.sub2_id}, {"confidence", l.confidence}});
                out.push_back({{"message_id", a.message_id}, {"labels", labels}});
            }
            return {{"assignments", out}};
        }
        std::vector<TaxonomyChange> changes =
            op == "seed" ? backend_.propose_seed(batch, SeedParams{request.at("params").at("main_target").get<int>()})
                         : backend_.propose_update(taxonomy_from_json(request.at("taxonomy")), batch);
        json out = json::array();
        for (const auto& c : changes) out.push_back(to_json(c));
        return {{"changes", out}};
    }

    LexiconBackend backend_;
    std::filesystem::path record_dir_;
    httplib::Server server_;
    std::thread thread_;
    std::mutex mutex_;
    int port_ = 0;
    int requests_ = 0;
    std::string auth_;
};

std::string write_quick_config(const TempDir& dir, std::uint64_t seed = 7) {
    write_file(dir.path() / "config.json", quick_config(seed).dump(2));
    return dir.str("config.json");
}

} // namespace

// -----------------------------------------------------------------------------
// Exit codes and usage
// -----------------------------------------------------------------------------

TEST(Cli, UnknownFlagIsUsageError) {
    auto r = invoke({"simulate", "--frobnicate"});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("Usage"), std::string::npos);
}

TEST(Cli, MissingOrUnknownSubcommandIsUsageError) {
    EXPECT_EQ(invoke({}).code, 2);
    EXPECT_EQ(invoke({"explode"}).code, 2);
}

TEST(Cli, MissingRequiredInputIsUsageError) {
    TempDir dir;
    auto r = invoke({"ingest", "--out", dir.str("o")});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("--messages"), std::string::npos);
}

TEST(Cli, MissingMessagesFileNamesPath) {
    TempDir dir;
    write_file(dir.path() / "patients.ndjson", "");
    const auto missing = dir.str("nowhere.ndjson");
    auto r = invoke({"ingest", "--messages", missing, "--patients", dir.str("patients.ndjson"), "--out", dir.str("o")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find(missing), std::string::npos);
}

TEST(Cli, ConfigErrorsNameTheField) {
    TempDir dir;
    write_file(dir.path() / "bad.json", R"({"gnn": {"hiddne": 4}})");
    auto r = invoke({"simulate", "--config", dir.str("bad.json"), "--out", dir.str("o")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("gnn.hiddne"), std::string::npos);

    r = invoke({"simulate", "--set", "spec_target=\"high\"", "--out", dir.str("o")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("spec_target"), std::string::npos);

    r = invoke({"simulate", "--config", dir.str("absent.json"), "--out", dir.str("o")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("absent.json"), std::string::npos);

    r = invoke({"simulate", "--set", "prevalence=1.5", "--out", dir.str("o")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("prevalence"), std::string::npos);
}

TEST(Cli, UnknownBackendIsDataError) {
    TempDir dir;
    auto r = invoke({"simulate", "--config", write_quick_config(dir), "--backend", "carrier-pigeon", "--out", dir.str("o")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("carrier-pigeon"), std::string::npos);
}

TEST(Cli, BinaryExitCodes) {
    TempDir dir;
    const std::string bin = MSGSCREEN_CLI;
    auto status = [](const std::string& cmd) {
        int s = std::system((cmd + " >/dev/null 2>&1").c_str());
        return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
    };
    EXPECT_EQ(status(bin + " --help"), 0);
    EXPECT_EQ(status(bin + " simulate --bogus"), 2);
    EXPECT_EQ(status(bin + " ingest --messages " + dir.str("x.ndjson") + " --patients " + dir.str("y.ndjson") +
                     " --out " + dir.str("o")),
              1);
}

// -----------------------------------------------------------------------------
// simulate
// -----------------------------------------------------------------------------

TEST(Simulate, DefaultConfigListsEighteenCells) {
    TempDir dir;
    const std::string bin = MSGSCREEN_CLI;
    const auto config = std::string(MSGSCREEN_SOURCE_DIR) + "/configs/default.json";
    int s = std::system((bin + " simulate --config " + config + " --out " + dir.str("out") + " >/dev/null").c_str());
    ASSERT_TRUE(WIFEXITED(s));
    ASSERT_EQ(WEXITSTATUS(s), 0);
    auto manifest = json::parse(read_file(dir.path() / "out" / "manifest.json"));
    EXPECT_TRUE(manifest["complete"].get<bool>());
    EXPECT_EQ(manifest["cells"].size(), 18u);
    auto summary = json::parse(read_file(dir.path() / "out" / "summary.json"));
    EXPECT_EQ(summary["seed"], json::parse(read_file(config))["seed"]);
}

TEST(Simulate, SeedFlagAndOverridesChangeOutputDeterministically) {
    TempDir dir;
    const auto config = write_quick_config(dir);
    ASSERT_EQ(invoke({"simulate", "--config", config, "--seed", "3", "--out", dir.str("a")}).code, 0);
    ASSERT_EQ(invoke({"simulate", "--config", config, "--seed", "3", "--out", dir.str("b")}).code, 0);
    ASSERT_EQ(invoke({"simulate", "--config", config, "--seed", "4", "--out", dir.str("c")}).code, 0);
    auto a = read_dir(dir.path() / "a");
    EXPECT_EQ(a, read_dir(dir.path() / "b"));
    EXPECT_NE(a.at("corpus/messages.ndjson"), read_dir(dir.path() / "c").at("corpus/messages.ndjson"));
    EXPECT_EQ(json::parse(a.at("config.json"))["seed"], 3);

    ASSERT_EQ(invoke({"simulate", "--config", config, "--set", "windows=[7,30]", "--out", dir.str("d")}).code, 0);
    auto manifest = json::parse(read_file(dir.path() / "d" / "manifest.json"));
    EXPECT_EQ(manifest["cells"].size(), 6u);
}

TEST(Simulate, HttpAndScriptedBackendsReproduceLexiconRun) {
    TempDir dir;
    const auto config = write_quick_config(dir, 9);
    std::filesystem::create_directories(dir.path() / "script");
    ASSERT_EQ(invoke({"simulate", "--config", config, "--out", dir.str("lexicon")}).code, 0);
    const auto reference = read_dir(dir.path() / "lexicon");

    auto spec = synthetic_spec(quick_config(9));
    LexiconServer server(reference_taxonomy(synthetic_vocabulary(spec.vocabulary_size)), dir.path() / "script");
    setenv("MSGSCREEN_BACKEND_TOKEN", "s3cret", 1);
    auto r = invoke({"simulate", "--config", config, "--backend", "http:" + server.url(), "--out", dir.str("http")});
    unsetenv("MSGSCREEN_BACKEND_TOKEN");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_GT(server.requests(), 0);
    EXPECT_EQ(server.auth(), "Bearer s3cret");
    EXPECT_EQ(read_dir(dir.path() / "http"), reference);

    r = invoke({"simulate", "--config", config, "--backend", "scripted:" + dir.str("script"), "--out", dir.str("scripted")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(read_dir(dir.path() / "scripted"), reference);
}

TEST(Simulate, UnreachableHttpBackendIsDataError) {
    TempDir dir;
    auto r = invoke({"simulate", "--config", write_quick_config(dir), "--backend", "http://127.0.0.1:1/x", "--out",
                  dir.str("o")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("127.0.0.1:1"), std::string::npos);
    auto manifest = json::parse(read_file(dir.path() / "o" / "manifest.json"));
    EXPECT_FALSE(manifest["complete"].get<bool>());
}

// -----------------------------------------------------------------------------
// Stage-by-stage pipeline
// -----------------------------------------------------------------------------

TEST(Stages, ChainFromIngestToScreen) {
    TempDir dir;
    const auto config = write_quick_config(dir, 13);
    ASSERT_EQ(invoke({"simulate", "--config", config, "--out", dir.str("sim")}).code, 0);
    const auto msgs = dir.str("sim/corpus/messages.ndjson");
    const auto pats = dir.str("sim/corpus/patients.ndjson");
    auto run = [&](std::vector<std::string> args) {
        args.insert(args.end(), {"--config", config});
        auto r = invoke(args);
        EXPECT_EQ(r.code, 0) << args[0] << ": " << r.err;
        return r;
    };

    run({"ingest", "--messages", msgs, "--patients", pats, "--out", dir.str("ingest")});
    const auto cohort = dir.str("ingest/cohort_B1.ndjson");
    auto cohort_json = json::parse(read_file(dir.path() / "ingest" / "cohort.json"));
    EXPECT_EQ(cohort_json["blocks"].size(), 3u);

    run({"taxonomy-seed", "--messages", msgs, "--out", dir.str("seed")});
    run({"taxonomy-update", "--taxonomy", dir.str("seed/taxonomy.json"), "--messages", msgs, "--out", dir.str("upd")});
    const auto tax = dir.str("upd/taxonomy.json");
    EXPECT_TRUE(validate_hierarchy(cli::read_taxonomy(tax)).ok());
    run({"annotate", "--taxonomy", tax, "--messages", msgs, "--out", dir.str("ann")});
    const auto annotated = dir.str("ann/messages.ndjson");

    run({"graph", "--taxonomy", tax, "--messages", annotated, "--patients", cohort, "--out", dir.str("graph")});
    auto g = json::parse(read_file(dir.path() / "graph" / "graph.json"));
    EXPECT_GT(g["symptoms"].get<int>(), 0);
    run({"train-gnn", "--taxonomy", tax, "--messages", annotated, "--patients", cohort, "--out", dir.str("gnn")});
    run({"fit-en", "--taxonomy", tax, "--messages", annotated, "--patients", cohort, "--out", dir.str("en")});
    run({"score", "--taxonomy", tax, "--messages", annotated, "--patients", cohort, "--gnn-deltas",
         dir.str("gnn/event_deltas.csv"), "--en-coefficients", dir.str("en/en_coefficients.csv"), "--out",
         dir.str("score")});
    auto rows = read_scores_csv(dir.str("score/scores.csv"));
    EXPECT_EQ(rows.size(), cli::read_taxonomy(tax).ids(TopicLevel::Sub2).size());
    run({"calibrate", "--scores", dir.str("score/scores.csv"), "--messages", annotated, "--patients", cohort, "--out",
         dir.str("cal")});
    auto models = json::parse(read_file(dir.path() / "cal" / "screener_models.json"));
    EXPECT_EQ(models.size(), 6u);
    run({"screen", "--scores", dir.str("score/scores.csv"), "--models", dir.str("cal/screener_models.json"),
         "--messages", annotated, "--patients", cohort, "--out", dir.str("screen")});
    auto metrics = read_file(dir.path() / "screen" / "metrics.csv");
    std::ptrdiff_t calibrated = 0;
    for (const auto& [w, m] : models.items()) calibrated += !m.is_null();
    EXPECT_GE(calibrated, 4);
    EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), calibrated + 1);

    for (const char* stage : {"ingest", "seed", "upd", "ann", "graph", "gnn", "en", "score", "cal", "screen"}) {
        auto manifest = json::parse(read_file(dir.path() / stage / "manifest.json"));
        EXPECT_TRUE(manifest["complete"].get<bool>()) << stage;
    }

    // Re-running a stage overwrites deterministically.
    auto before = read_dir(dir.path() / "score");
    run({"score", "--taxonomy", tax, "--messages", annotated, "--patients", cohort, "--gnn-deltas",
         dir.str("gnn/event_deltas.csv"), "--en-coefficients", dir.str("en/en_coefficients.csv"), "--out",
         dir.str("score")});
    EXPECT_EQ(read_dir(dir.path() / "score"), before);
}

TEST(Stages, UnanchoredPatientsRejected) {
    TempDir dir;
    const auto config = write_quick_config(dir, 13);
    ASSERT_EQ(invoke({"simulate", "--config", config, "--out", dir.str("sim")}).code, 0);
    auto r = invoke({"graph", "--taxonomy", dir.str("sim/taxonomy.json"), "--messages", dir.str("sim/corpus/messages.ndjson"),
                  "--patients", dir.str("sim/corpus/patients.ndjson"), "--out", dir.str("g")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("anchor_date"), std::string::npos);
}
