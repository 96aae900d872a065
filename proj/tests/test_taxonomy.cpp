#include <gtest/gtest.h>

#include "support.hpp"

using namespace msgscreen;
using namespace msgscreen::testing;

namespace {

TaxonomyChange add(std::string id, TopicLevel level, std::string label, std::optional<std::string> parent,
                   std::string reason = "test") {
    return {ChangeKind::Add, TopicNode{id, level, std::move(label), std::move(parent), {}}, {}, std::move(reason)};
}

TaxonomyChange merge(std::string a, std::string b, std::string reason = "test") {
    return {ChangeKind::Merge, {}, {std::move(a), std::move(b)}, std::move(reason)};
}

/// Backend that returns a fixed list of labels for every message.
class FixedBackend final : public AnnotatorBackend {
public:
    explicit FixedBackend(std::vector<Annotation> labels) : labels_(std::move(labels)) {}
    std::vector<TaxonomyChange> propose_seed(std::span<const MessageRecord>, const SeedParams&) override { return {}; }
    std::vector<TaxonomyChange> propose_update(const Taxonomy&, std::span<const MessageRecord>) override { return {}; }
    std::vector<MessageAssignment> annotate(const Taxonomy&, std::span<const MessageRecord> batch) override {
        std::vector<MessageAssignment> out;
        for (const auto& m : batch) out.push_back({m.message_id, labels_});
        return out;
    }

private:
    std::vector<Annotation> labels_;
};

std::vector<MessageRecord> texts(const std::vector<std::string>& bodies) {
    std::vector<MessageRecord> out;
    for (std::size_t i = 0; i < bodies.size(); ++i)
        out.push_back(message("m" + std::to_string(i), "p", day("2024-09-01"), bodies[i]));
    return out;
}

} // namespace

// -----------------------------------------------------------------------------
// Hierarchy validation
// -----------------------------------------------------------------------------

TEST(ValidateHierarchy, SmallTaxonomyIsValid) { EXPECT_TRUE(validate_hierarchy(small_taxonomy()).ok()); }

TEST(ValidateHierarchy, ReportsEachKindOfViolation) {
    auto orphan = small_taxonomy();
    orphan.nodes["s1"].parent_id = "nowhere";
    EXPECT_FALSE(validate_hierarchy(orphan).ok());

    auto skip = small_taxonomy();
    skip.nodes["s1"].parent_id = "neuro";
    EXPECT_FALSE(validate_hierarchy(skip).ok());

    auto rooted = small_taxonomy();
    rooted.nodes["neuro"].parent_id = "gen";
    EXPECT_FALSE(validate_hierarchy(rooted).ok());

    auto twin = small_taxonomy();
    twin.nodes["s2"].label = "Dizziness";
    auto report = validate_hierarchy(twin);
    ASSERT_EQ(report.violations.size(), 1u);
    EXPECT_NE(report.summary().find("Dizziness"), std::string::npos);

    auto unlabeled = small_taxonomy();
    unlabeled.nodes["s3"].label.clear();
    EXPECT_FALSE(validate_hierarchy(unlabeled).ok());
}

TEST(ValidateHierarchy, SameLabelUnderDifferentParentsIsAllowed) {
    auto t = small_taxonomy();
    t.nodes["gen.b"] = TopicNode{"gen.b", TopicLevel::Sub1, "Other", "gen", {}};
    t.nodes["s4"] = TopicNode{"s4", TopicLevel::Sub2, "Dizziness", "gen.b", {}};
    EXPECT_TRUE(validate_hierarchy(t).ok());
}

TEST(TaxonomyJson, RoundTrip) {
    auto t = apply_changes(small_taxonomy(), {add("s9", TopicLevel::Sub2, "Rash", "gen.a", "novel")}, 3);
    auto back = taxonomy_from_json(to_json(t));
    EXPECT_EQ(to_json(back).dump(), to_json(t).dump());
    EXPECT_EQ(back.version, 2);
    ASSERT_EQ(back.ledger.size(), 1u);
    EXPECT_EQ(back.ledger[0].batch_index, 3);
}

// -----------------------------------------------------------------------------
// Seed and update
// -----------------------------------------------------------------------------

TEST(SeedTaxonomy, LexiconSeedIsValidVersionOne) {
    LexiconBackend backend(small_taxonomy());
    auto msgs = texts({"so dizzy today", "my foot is numb", "nothing to report"});
    auto tax = seed_taxonomy(msgs, backend, {200, 50, 10, 3, 1});
    EXPECT_EQ(tax.version, 1);
    EXPECT_TRUE(validate_hierarchy(tax).ok());
    EXPECT_TRUE(tax.is_sub2("s1"));
    EXPECT_TRUE(tax.is_sub2("s2"));
    EXPECT_FALSE(tax.is_sub2("s3"));
    EXPECT_EQ(tax.ledger.size(), tax.nodes.size());
    for (const auto& e : tax.ledger) EXPECT_FALSE(e.reason.empty());
}

TEST(SeedTaxonomy, MainTargetLimitsMainCount) {
    LexiconBackend backend(small_taxonomy());
    auto tax = seed_taxonomy(texts({"fever and dizzy"}), backend, {200, 50, 1, 3, 1});
    EXPECT_EQ(tax.count(TopicLevel::Main), 1u);
}

TEST(SeedTaxonomy, EmptyBatchIsAnError) {
    LexiconBackend backend(small_taxonomy());
    EXPECT_THROW(seed_taxonomy(std::span<const MessageRecord>{}, backend), Error);
}

TEST(ApplyChanges, EmptyBatchStillAdvancesVersion) {
    auto t = small_taxonomy();
    auto next = apply_changes(t, {}, 1);
    EXPECT_EQ(next.version, t.version + 1);
    EXPECT_EQ(next.nodes.size(), t.nodes.size());
}

TEST(ApplyChanges, MergeKeepsSmallerIdAndRewiresChildren) {
    auto t = small_taxonomy();
    t.nodes["neuro.b"] = TopicNode{"neuro.b", TopicLevel::Sub1, "Balance", "neuro", {}};
    t.nodes["s4"] = TopicNode{"s4", TopicLevel::Sub2, "Vertigo", "neuro.b", {"spinning"}};
    auto next = apply_changes(t, {merge("neuro.b", "neuro.a", "same concept")}, 2);
    EXPECT_EQ(next.nodes.size(), t.nodes.size() - 1);
    EXPECT_FALSE(next.nodes.count("neuro.b"));
    EXPECT_EQ(*next.nodes.at("s4").parent_id, "neuro.a");
    ASSERT_EQ(next.ledger.size(), 1u);
    EXPECT_EQ(next.ledger[0].kind, ChangeKind::Merge);
    EXPECT_EQ(next.ledger[0].reason, "same concept");
}

TEST(ApplyChanges, MergeUnionsLexicons) {
    auto next = apply_changes(small_taxonomy(), {merge("s1", "s2")}, 1);
    EXPECT_EQ(next.nodes.at("s1").lexicon, (std::set<std::string>{"dizzy", "numb"}));
}

TEST(ApplyChanges, RejectsBadBatchesWithoutTouchingInput) {
    const auto t = small_taxonomy();
    const auto before = to_json(t).dump();
    EXPECT_THROW(apply_changes(t, {add("s1", TopicLevel::Sub2, "Again", "neuro.a")}, 1), Error);
    EXPECT_THROW(apply_changes(t, {add("s9", TopicLevel::Sub2, "Orphan", "nowhere")}, 1), Error);
    EXPECT_THROW(apply_changes(t, {add("s9", TopicLevel::Sub2, "Dizziness", "neuro.a")}, 1), Error);
    EXPECT_THROW(apply_changes(t, {add("s9", TopicLevel::Sub2, "Rash", "gen.a", "")}, 1), Error);
    EXPECT_THROW(apply_changes(t, {merge("s1", "neuro.a")}, 1), Error);
    EXPECT_THROW(apply_changes(t, {merge("s1", "s1")}, 1), Error);
    EXPECT_THROW(apply_changes(t, {merge("s1", "zz")}, 1), Error);
    EXPECT_EQ(to_json(t).dump(), before);
}

TEST(UpdateTaxonomy, LexiconAddsNovelTopicsWithAncestors) {
    auto reference = small_taxonomy();
    LexiconBackend backend(reference);
    auto seeded = seed_taxonomy(texts({"dizzy"}), backend, {200, 50, 1, 3, 1});
    ASSERT_FALSE(seeded.nodes.count("gen"));
    auto upd = update_taxonomy(seeded, texts({"high fever"}), backend, 1);
    EXPECT_EQ(upd.taxonomy.version, 2);
    EXPECT_TRUE(upd.taxonomy.is_sub2("s3"));
    EXPECT_TRUE(upd.taxonomy.nodes.count("gen.a"));
    EXPECT_TRUE(validate_hierarchy(upd.taxonomy).ok());
    EXPECT_EQ(upd.changes.size(), 3u);
}

TEST(BuildTaxonomy, StreamsBatchesAfterSeed) {
    LexiconBackend backend(small_taxonomy());
    std::vector<std::string> bodies(250, "ok");
    bodies[0] = "dizzy";
    bodies[240] = "fever";
    auto msgs = texts(bodies);
    auto tax = build_taxonomy(msgs, backend, {200, 50, 1, 3, 1});
    EXPECT_EQ(tax.version, 2);
    EXPECT_TRUE(tax.is_sub2("s3"));
}

TEST(TaxonomyProperty, RandomChangeStreamsKeepInvariants) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        auto t = small_taxonomy();
        std::size_t expected_ledger = 0;
        int fresh = 0;
        for (int step = 0; step < 15; ++step) {
            std::vector<TaxonomyChange> batch;
            std::uniform_int_distribution<int> kind(0, 2);
            const int k = kind(rng);
            if (k == 0) {
                auto parents = t.ids(TopicLevel::Sub1);
                std::uniform_int_distribution<std::size_t> pick(0, parents.size() - 1);
                std::string id = "n" + std::to_string(fresh++);
                batch.push_back(add(id, TopicLevel::Sub2, "Label " + id, parents[pick(rng)]));
            } else if (k == 1) {
                auto leaves = t.ids(TopicLevel::Sub2);
                if (leaves.size() >= 2) {
                    std::shuffle(leaves.begin(), leaves.end(), rng);
                    batch.push_back(merge(leaves[0], leaves[1]));
                }
            }
            auto next = apply_changes(t, batch, step);
            EXPECT_EQ(next.version, t.version + 1);
            EXPECT_TRUE(validate_hierarchy(next).ok());
            if (k == 0) EXPECT_EQ(next.nodes.size(), t.nodes.size() + batch.size());
            if (k == 1) EXPECT_EQ(next.nodes.size() + batch.size(), t.nodes.size());
            expected_ledger += batch.size();
            EXPECT_EQ(next.ledger.size(), expected_ledger);
            for (std::size_t i = 0; i < t.ledger.size(); ++i)
                EXPECT_EQ(to_json(next.ledger[i]).dump(), to_json(t.ledger[i]).dump());
            t = std::move(next);
        }
    }
}

// -----------------------------------------------------------------------------
// Annotation
// -----------------------------------------------------------------------------

TEST(CapLabels, KeepsMostConfidentDistinctLabels) {
    auto out = cap_labels({{"a", 0.2}, {"b", 0.9}, {"c", 0.9}, {"d", 0.5}, {"b", 0.1}}, 3);
    ASSERT_EQ(out.size(), 3u);
    EXPECT_EQ(out[0].sub2_id, "b");
    EXPECT_EQ(out[1].sub2_id, "c");
    EXPECT_EQ(out[2].sub2_id, "d");
}

TEST(CapLabels, MatchesSortOracle) {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> n(0, 8), id(0, 5), conf(0, 4);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<Annotation> labels;
        for (int i = n(rng); i > 0; --i) labels.push_back({"s" + std::to_string(id(rng)), conf(rng) / 4.0});
        // Oracle: best confidence per id, then top 3 by (confidence desc, id asc).
        std::map<std::string, double> best;
        for (const auto& l : labels) best[l.sub2_id] = std::max(best.count(l.sub2_id) ? best[l.sub2_id] : -1.0, l.confidence);
        std::vector<std::pair<double, std::string>> ranked;
        for (const auto& [k, v] : best) ranked.emplace_back(-v, k);
        std::sort(ranked.begin(), ranked.end());
        std::set<std::string> want;
        for (std::size_t i = 0; i < std::min<std::size_t>(3, ranked.size()); ++i) want.insert(ranked[i].second);

        auto out = cap_labels(labels, 3);
        std::set<std::string> got;
        for (const auto& l : out) {
            got.insert(l.sub2_id);
            EXPECT_EQ(l.confidence, best[l.sub2_id]);
        }
        EXPECT_EQ(got, want);
        EXPECT_TRUE(std::is_sorted(out.begin(), out.end(), [](auto& a, auto& b) { return a.sub2_id < b.sub2_id; }));
    }
}

TEST(AnnotateMessages, LexiconTriggersAndEmptyText) {
    LexiconBackend backend(small_taxonomy());
    auto out = annotate_messages(texts({"", "I am Dizzy and numb", "fevered"}), small_taxonomy(), backend);
    EXPECT_TRUE(out[0].annotations.empty());
    ASSERT_EQ(out[1].annotations.size(), 2u);
    EXPECT_EQ(out[1].annotations[0].sub2_id, "s1");
    EXPECT_EQ(out[1].annotations[0].confidence, 1.0);
    EXPECT_TRUE(out[2].annotations.empty()) << "phrases match on word boundaries";
}

TEST(AnnotateMessages, IndependentOfConcurrencyAndOrder) {
    LexiconBackend backend(small_taxonomy());
    std::vector<std::string> pool = {"dizzy", "numb", "fever", "fine", "dizzy and numb", "fever, numb"};
    std::vector<std::string> bodies;
    for (int i = 0; i < 400; ++i) bodies.push_back(pool[static_cast<std::size_t>(i * 7 % 6)]);
    auto msgs = texts(bodies);
    auto serial = annotate_messages(msgs, small_taxonomy(), backend, {200, 7, 10, 3, 1});
    auto parallel = annotate_messages(msgs, small_taxonomy(), backend, {200, 7, 10, 3, 8});
    auto reversed = msgs;
    std::reverse(reversed.begin(), reversed.end());
    auto rev = annotate_messages(reversed, small_taxonomy(), backend, {200, 13, 10, 3, 4});
    std::map<std::string, json> by_id;
    for (const auto& m : rev) by_id[m.message_id] = to_json(m);
    for (std::size_t i = 0; i < msgs.size(); ++i) {
        EXPECT_EQ(to_json(serial[i]).dump(), to_json(parallel[i]).dump());
        EXPECT_EQ(to_json(serial[i]).dump(), by_id[serial[i].message_id].dump());
    }
}

TEST(AnnotateMessages, RejectsUnknownIdsAndBadConfidence) {
    auto msgs = texts({"x"});
    FixedBackend unknown({{"zz", 0.5}});
    EXPECT_THROW(annotate_messages(msgs, small_taxonomy(), unknown), Error);
    FixedBackend main_level({{"neuro", 0.5}});
    EXPECT_THROW(annotate_messages(msgs, small_taxonomy(), main_level), Error);
    FixedBackend too_sure({{"s1", 1.5}});
    EXPECT_THROW(annotate_messages(msgs, small_taxonomy(), too_sure), Error);
}

TEST(AnnotateMessages, CapsAtMaxLabels) {
    auto t = small_taxonomy();
    t.nodes["s4"] = TopicNode{"s4", TopicLevel::Sub2, "Chills", "gen.a", {}};
    FixedBackend many({{"s1", 0.9}, {"s2", 0.8}, {"s3", 0.7}, {"s4", 0.95}});
    auto out = annotate_messages(texts({"x"}), t, many);
    ASSERT_EQ(out[0].annotations.size(), 3u);
    EXPECT_EQ(out[0].annotations[0].sub2_id, "s1");
    EXPECT_EQ(out[0].annotations[2].sub2_id, "s4");
}

TEST(ScriptedBackend, ReplaysTwoHundredMessageScript) {
    TempDir dir;
    const auto tax = small_taxonomy();
    std::vector<std::string> bodies;
    for (int i = 0; i < 200; ++i) bodies.push_back("message " + std::to_string(i));
    auto msgs = texts(bodies);

    const std::array<std::string, 3> ids = {"s1", "s2", "s3"};
    json assignments = json::array();
    std::vector<std::vector<Annotation>> expected;
    for (std::size_t i = 0; i < msgs.size(); ++i) {
        std::vector<Annotation> labels;
        for (std::size_t k = 0; k < ids.size(); ++k)
            if ((i >> k) & 1u) labels.push_back({ids[k], 0.25 * static_cast<double>(1 + (i + k) % 4)});
        json lj = json::array();
        for (const auto& l : labels) lj.push_back({{"sub2_id", l.sub2_id}, {"confidence", l.confidence}});
        assignments.push_back({{"message_id", msgs[i].message_id}, {"labels", lj}});
        expected.push_back(labels);
    }
    auto request = make_wire_request("annotate", &tax, msgs);
    write_file(ScriptedBackend::response_path(dir.path(), request), json{{"assignments", assignments}}.dump());

    auto backend = make_backend("scripted:" + dir.str(), tax);
    auto out = annotate_messages(msgs, tax, *backend, {200, 200, 10, 3, 1});
    for (std::size_t i = 0; i < out.size(); ++i) {
        ASSERT_EQ(out[i].annotations.size(), expected[i].size());
        for (std::size_t k = 0; k < expected[i].size(); ++k) {
            EXPECT_EQ(out[i].annotations[k].sub2_id, expected[i][k].sub2_id);
            EXPECT_EQ(out[i].annotations[k].confidence, expected[i][k].confidence);
        }
    }
}

TEST(ScriptedBackend, MissingResponseNamesPath) {
    TempDir dir;
    auto backend = make_backend("scripted:" + dir.str(), small_taxonomy());
    try {
        annotate_messages(texts({"x"}), small_taxonomy(), *backend);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find(dir.str()), std::string::npos) << e.what();
    }
}

TEST(MakeBackend, RejectsUnknownSpecs) {
    EXPECT_THROW(make_backend("oracle", small_taxonomy()), Error);
    EXPECT_THROW(make_backend("scripted:/nonexistent/dir", small_taxonomy()), Error);
    EXPECT_THROW(make_backend("http:ftp://x", small_taxonomy()), Error);
}

TEST(RequestKey, StableAcrossKeyOrder) {
    json a = json::parse(R"({"op":"seed","params":{"x":1,"y":2}})");
    json b = json::parse(R"({"params":{"y":2,"x":1},"op":"seed"})");
    EXPECT_EQ(request_key(a), request_key(b));
    EXPECT_EQ(request_key(a).size(), 16u);
}

// -----------------------------------------------------------------------------
// Agreement
// -----------------------------------------------------------------------------

namespace {

/// Direct transcription of the AC1 definition over categories {0..K-1}.
double ac1_oracle(const std::vector<int>& a, const std::vector<int>& b, int k) {
    const double n = static_cast<double>(a.size());
    double pa = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) pa += a[i] == b[i] ? 1.0 / n : 0.0;
    double pe = 0.0;
    for (int c = 0; c < k; ++c) {
        double pi = (std::count(a.begin(), a.end(), c) + std::count(b.begin(), b.end(), c)) / (2.0 * n);
        pe += pi * (1.0 - pi);
    }
    pe /= (k - 1);
    return (pa - pe) / (1.0 - pe);
}

} // namespace

TEST(GwetAc1, IdenticalRatingsGiveOne) {
    std::vector<int> a = {0, 1, 1, 0, 1, 0, 0, 1, 1, 1};
    EXPECT_DOUBLE_EQ(gwet_ac1(a, a), 1.0);
    std::vector<int> ones(10, 1);
    EXPECT_DOUBLE_EQ(gwet_ac1(ones, ones), 1.0);
}

TEST(GwetAc1, HalfPrevalenceNinetyPercentAgreement) {
    // 20 binary items, 18 agreements, two crossed disagreements: Pa = 0.9, Pe = 0.5.
    std::vector<int> a(20, 0), b(20, 0);
    for (int i = 0; i < 10; ++i) a[static_cast<std::size_t>(i)] = b[static_cast<std::size_t>(i)] = 1;
    b[0] = 0;
    b[10] = 1;
    EXPECT_NEAR(gwet_ac1(a, b), 0.8, 1e-12);
}

TEST(GwetAc1, TenItemsOneDisagreement) {
    std::vector<int> a = {1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
    auto b = a;
    b[5] = 1;  // prevalence (5 + 6) / 20
    EXPECT_NEAR(gwet_ac1(a, b), (0.9 - 2 * 0.55 * 0.45) / (1 - 2 * 0.55 * 0.45), 1e-12);
}

TEST(GwetAc1, Errors) {
    std::vector<int> a = {1, 0}, b = {1};
    EXPECT_THROW(gwet_ac1(a, b), Error);
    std::vector<int> e;
    EXPECT_THROW(gwet_ac1(e, e), Error);
    std::vector<int> cats = {0};
    EXPECT_THROW(gwet_ac1<int>(std::span<const int>(a), std::span<const int>(a), std::span<const int>(cats)), Error);
}

TEST(GwetAc1, MatchesOracleSymmetricAndPermutationInvariant) {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const int k = 2 + trial % 3;
        std::uniform_int_distribution<int> cat(0, k - 1), len(5, 40);
        std::vector<int> a(static_cast<std::size_t>(len(rng))), b;
        for (auto& v : a) v = cat(rng);
        b = a;
        for (auto& v : b)
            if (cat(rng) == 0) v = cat(rng);
        std::vector<int> cats(static_cast<std::size_t>(k));
        std::iota(cats.begin(), cats.end(), 0);
        auto score = [&](const std::vector<int>& x, const std::vector<int>& y) {
            return gwet_ac1<int>(std::span<const int>(x), std::span<const int>(y), std::span<const int>(cats));
        };
        const double s = score(a, b);
        EXPECT_NEAR(s, ac1_oracle(a, b, k), 1e-12);
        EXPECT_NEAR(s, score(b, a), 1e-12);
        std::vector<std::size_t> perm(a.size());
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<int> pa, pb;
        for (auto i : perm) {
            pa.push_back(a[i]);
            pb.push_back(b[i]);
        }
        EXPECT_NEAR(s, score(pa, pb), 1e-12);
        EXPECT_EQ(s == 1.0, a == b);
        EXPECT_GE(s, -1.0);
        EXPECT_LE(s, 1.0);
    }
}
