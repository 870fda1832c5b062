#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "rflab/sparse.hpp"
#include "rflab/trainer.hpp"
#include "testutil.hpp"

using namespace rflab;

namespace {

RankedList ranking_of(const std::string& query_id, const std::vector<std::string>& doc_ids) {
    std::vector<ScoredDoc> entries;
    double score = static_cast<double>(doc_ids.size());
    for (const auto& doc_id : doc_ids) entries.push_back({doc_id, score--});
    return RankedList::from_scores(query_id, entries, "test");
}

RolloutGroup one_token_group(const std::vector<double>& theta, const std::vector<double>& old_lp,
                             const std::vector<double>& ref) {
    RolloutGroup group;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        group.samples.push_back({0.0, {theta[i]}, {old_lp[i]}, {ref[i]}});
    }
    return group;
}

}  // namespace

TEST_CASE("rejection_sample_best keeps the argmax, ties to the lowest index") {
    QrelsTable qrels;
    qrels.set("q", "good", 1);
    auto baseline = ranking_of("q", {"bad"});

    // Candidate texts map straight to rankings via this scripted retriever.
    auto retrieve = [&](const std::string& text) -> RankedList {
        if (text == "neutral") return ranking_of("", {"bad"});
        if (text == "win-a" || text == "win-b") return ranking_of("", {"good"});
        return ranking_of("", {});
    };

    std::vector<RewriteCandidate> candidates = {
        {"lose", 0}, {"win-a", 1}, {"win-b", 2}, {"neutral", 3}};
    auto result = rejection_sample_best(candidates, retrieve, baseline, qrels);
    REQUIRE(result.utilities.size() == 4);
    CHECK(result.best_index == 1);  // utilities tie at +1 for indices 1 and 2
    CHECK(result.best.text == "win-a");
    CHECK(result.utilities[1] == doctest::Approx(1.0));
    CHECK(result.utilities[2] == doctest::Approx(1.0));
    CHECK(result.utilities[0] == doctest::Approx(0.0));
}

TEST_CASE("a single candidate is selected regardless of its utility") {
    QrelsTable qrels;
    qrels.set("q", "good", 1);
    auto baseline = ranking_of("q", {"good"});
    auto retrieve = [&](const std::string&) { return ranking_of("", {"junk"}); };
    auto result = rejection_sample_best({{"only", 0}}, retrieve, baseline, qrels);
    CHECK(result.best_index == 0);
    CHECK(result.utilities[0] == doctest::Approx(-1.0));
}

TEST_CASE("retrieval failures pin that candidate to -infinity without aborting") {
    testutil::LogCapture logs;
    QrelsTable qrels;
    qrels.set("q", "good", 1);
    auto baseline = ranking_of("q", {"bad"});
    auto retrieve = [&](const std::string& text) -> RankedList {
        if (text == "boom") throw Error("backend unavailable");
        return ranking_of("", {"good"});
    };
    auto result = rejection_sample_best({{"boom", 0}, {"fine", 1}}, retrieve, baseline, qrels);
    CHECK(result.best_index == 1);
    CHECK(std::isinf(result.utilities[0]));
    CHECK(result.utilities[0] < 0);
    CHECK(logs.saw_warning_containing("q"));
}

TEST_CASE("rejection sampling on a real index attains the exhaustively scored maximum") {
    std::vector<Document> docs = {{"d1", "apple pie"},
                                  {"d2", "banana split"},
                                  {"d3", "cherry orchard trees"},
                                  {"d4", "plain filler text"}};
    Collection collection;
    for (const auto& d : docs) collection.add(d);
    auto index = InvertedIndex::build(collection);
    QrelsTable qrels;
    qrels.set("q", "d3", 3);

    auto retrieve = [&](const std::string& text) {
        return search_sparse(index, QueryTermModel::from_text(text), 10);
    };
    auto baseline = retrieve("fruit stand").with_query_id("q");

    std::vector<RewriteCandidate> candidates = {
        {"apple pie", 0}, {"cherry orchard", 1}, {"banana", 2}};
    auto result = rejection_sample_best(candidates, retrieve, baseline, qrels);

    // Independent recomputation through the brute-force scorer and metric oracle.
    std::map<std::string, int> grades = {{"d3", 3}};
    double best_utility = -1e9;
    std::size_t best_index = 0;
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        auto scored = oracle::bm25_all_docs(docs, QueryTermModel::from_text(candidates[c].text).weights(),
                                            0.9, 0.4);
        std::vector<std::string> ids;
        for (const auto& s : scored) ids.push_back(s.doc_id);
        double u = oracle::ndcg_at_k(ids, grades, 10) - oracle::ndcg_at_k({}, grades, 10);
        if (u > best_utility) {
            best_utility = u;
            best_index = c;
        }
        CHECK(result.utilities[c] == doctest::Approx(u).epsilon(1e-12));
    }
    CHECK(result.best_index == best_index);
    CHECK(result.best_index == 1);  // the candidate carrying the relevant doc's terms
    CHECK(result.utilities[result.best_index] > 0.0);
    CHECK(result.utilities[result.best_index] == doctest::Approx(best_utility));
}

TEST_CASE("build_sft_dataset filters, sorts, and truncates deterministically") {
    auto record = [](const std::string& query_id, double utility) {
        SftRecord r;
        r.query_id = query_id;
        r.query = query_id;
        r.target = "t";
        r.utility = utility;
        return r;
    };
    std::vector<SftRecord> records = {record("qa", 0.5), record("qb", 0.0), record("qc", -0.2)};

    auto kept = build_sft_dataset(records, 10, 0.0);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].utility == 0.5);
    CHECK(kept[1].utility == 0.0);

    CHECK(build_sft_dataset(records, 1, 0.0).size() == 1);
    CHECK(build_sft_dataset(records, 1, 0.0)[0].query_id == "qa");
    CHECK(build_sft_dataset(records, 0, 0.0).empty());

    // Deterministic function of the input multiset: permutation changes nothing.
    std::vector<SftRecord> permuted = {records[2], records[0], records[1]};
    auto a = build_sft_dataset(records, 10, -1.0);
    auto b = build_sft_dataset(permuted, 10, -1.0);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].query_id == b[i].query_id);
    }
}

TEST_CASE("sft ties on utility order by query_id") {
    auto record = [](const std::string& query_id, double utility) {
        SftRecord r;
        r.query_id = query_id;
        r.utility = utility;
        return r;
    };
    auto kept = build_sft_dataset({record("qz", 0.3), record("qa", 0.3)}, 10, 0.0);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].query_id == "qa");
    CHECK(kept[1].query_id == "qz");
}

TEST_CASE("compute_reward combines ndcg@10 and lambda * recall@100") {
    QrelsTable qrels;
    qrels.set("q", "d1", 3);
    qrels.set("q", "d2", 1);

    GrpoConfig config;  // lambda 1.0
    CHECK(compute_reward(ranking_of("q", {"d1", "d2"}), qrels, config) == doctest::Approx(2.0));
    CHECK(compute_reward(ranking_of("q", {}), qrels, config) == 0.0);

    GrpoConfig half;
    half.lambda = 0.5;
    double reward = compute_reward(ranking_of("q", {"d2", "d1"}), qrels, half);
    CHECK(reward == doctest::Approx(0.70981 + 0.5 * 1.0).epsilon(1e-4));
}

TEST_CASE("compute_advantages normalizes with the population std") {
    auto advantages = compute_advantages({0.2, 0.4, 0.6});
    REQUIRE(advantages.size() == 3);
    CHECK(advantages[0] == doctest::Approx(-1.2247).epsilon(1e-4));
    CHECK(advantages[1] == doctest::Approx(0.0));
    CHECK(advantages[2] == doctest::Approx(1.2247).epsilon(1e-4));

    CHECK(compute_advantages({0.7, 0.7, 0.7}) == std::vector<double>{0.0, 0.0, 0.0});
    CHECK(compute_advantages({0.0, 1.0}) == std::vector<double>{-1.0, 1.0});
    CHECK_THROWS_AS(compute_advantages({1.0}), Error);
}

TEST_CASE("property: advantages have mean 0, std 1, and are shift/scale invariant") {
    oracle::Rng rng(60601);
    for (int trial = 0; trial < 200; ++trial) {
        int n = rng.uniform_int(2, 16);
        std::vector<double> rewards(n);
        for (auto& r : rewards) r = rng.uniform(0.0, 2.0);
        auto advantages = compute_advantages(rewards);

        double mean = 0.0;
        for (double a : advantages) mean += a;
        mean /= n;
        double var = 0.0;
        for (double a : advantages) var += (a - mean) * (a - mean);
        var /= n;
        bool degenerate = advantages == std::vector<double>(n, 0.0);
        CHECK(std::abs(mean) < 1e-9);
        if (!degenerate) {
            CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-6);
        }

        std::vector<double> shifted(rewards), scaled(rewards);
        double c = rng.uniform(-3.0, 3.0);
        double s = rng.uniform(0.1, 5.0);
        for (auto& r : shifted) r += c;
        for (auto& r : scaled) r *= s;
        auto from_shifted = compute_advantages(shifted);
        auto from_scaled = compute_advantages(scaled);
        for (int i = 0; i < n; ++i) {
            CHECK(std::abs(from_shifted[i] - advantages[i]) < 1e-9);
            CHECK(std::abs(from_scaled[i] - advantages[i]) < 1e-9);
        }
    }
}

TEST_CASE("on-policy grpo loss is zero for normalized advantages") {
    RolloutGroup group;
    group.samples.push_back({0.9, {-0.5, -0.2}, {-0.5, -0.2}, {-0.5, -0.2}});
    group.samples.push_back({0.1, {-1.0, -0.7}, {-1.0, -0.7}, {-1.0, -0.7}});
    group.samples.push_back({0.5, {-0.3, -0.9}, {-0.3, -0.9}, {-0.3, -0.9}});
    std::vector<double> rewards;
    for (const auto& s : group.samples) rewards.push_back(s.reward);
    auto advantages = compute_advantages(rewards);
    GrpoConfig config;  // beta 1e-3, but the KL term is 0 on-policy
    CHECK(std::abs(grpo_loss(group, advantages, config)) < 1e-9);
}

TEST_CASE("the clipped worked example evaluates to 0.4 exactly") {
    double old_lp = -1.0;
    double theta = old_lp + std::log(2.0);  // ratio 2
    auto group = one_token_group({theta, theta}, {old_lp, old_lp}, {theta, theta});
    GrpoConfig config;
    config.epsilon = 0.2;
    config.kl_beta = 0.0;
    CHECK(grpo_loss(group, {1.0, -1.0}, config) == 0.4);
}

TEST_CASE("zero advantages and zero beta give a zero loss") {
    auto group = one_token_group({-0.4, -0.9}, {-0.2, -1.1}, {-0.5, -0.5});
    GrpoConfig config;
    config.kl_beta = 0.0;
    CHECK(grpo_loss(group, {0.0, 0.0}, config) == 0.0);
}

TEST_CASE("grpo_loss validates shapes and log-probability signs") {
    auto group = one_token_group({-0.5, -0.5}, {-0.5, -0.5}, {-0.5, -0.5});
    GrpoConfig config;
    CHECK_THROWS_AS(grpo_loss(group, {1.0}, config), Error);

    RolloutGroup ragged;
    ragged.samples.push_back({0.0, {-0.5, -0.1}, {-0.5}, {-0.5, -0.1}});
    ragged.samples.push_back({0.0, {-0.5}, {-0.5}, {-0.5}});
    CHECK_THROWS_AS(grpo_loss(ragged, {0.0, 0.0}, config), Error);

    RolloutGroup positive;
    positive.samples.push_back({0.0, {0.25}, {-0.5}, {-0.5}});
    positive.samples.push_back({0.0, {-0.5}, {-0.5}, {-0.5}});
    CHECK_THROWS_AS(grpo_loss(positive, {0.0, 0.0}, config), Error);

    RolloutGroup tiny;
    tiny.samples.push_back({0.0, {-0.5}, {-0.5}, {-0.5}});
    CHECK_THROWS_AS(tiny.validate(), Error);
}

TEST_CASE("with beta 0 and ratios inside the clip range, clipping is inert") {
    auto group = one_token_group({-0.50, -0.75}, {-0.55, -0.70}, {-0.5, -0.5});
    std::vector<double> advantages = {0.8, -0.8};
    GrpoConfig tight;
    tight.epsilon = 0.2;
    tight.kl_beta = 0.0;
    GrpoConfig huge;
    huge.epsilon = 1e9;  // clip can never bind
    huge.kl_beta = 0.0;
    CHECK(grpo_loss(group, advantages, tight) ==
          doctest::Approx(grpo_loss(group, advantages, huge)).epsilon(1e-15));
}

TEST_CASE("finite differences match the analytic clip behavior") {
    const double h = 1e-7;
    GrpoConfig config;
    config.epsilon = 0.2;
    config.kl_beta = 0.0;
    std::vector<double> advantages = {1.0, -1.0};

    auto loss_with_theta0 = [&](double ratio0, double advantage0, double bump) {
        double old_lp = -1.0;
        double theta0 = old_lp + std::log(ratio0) + bump;
        auto group = one_token_group({theta0, -0.5}, {old_lp, -0.5}, {theta0, -0.5});
        return grpo_loss(group, {advantage0, advantages[1]}, config);
    };

    // Positive advantage, ratio inside the clip range: more probability
    // lowers the loss.
    double unclipped_pos =
        (loss_with_theta0(1.0, 1.0, h) - loss_with_theta0(1.0, 1.0, 0.0)) / h;
    CHECK(unclipped_pos < -0.1);

    // Positive advantage, ratio above 1+eps: clipped flat, no gradient.
    double clipped_pos = loss_with_theta0(1.5, 1.0, h) - loss_with_theta0(1.5, 1.0, 0.0);
    CHECK(std::abs(clipped_pos) < 1e-15);

    // Negative advantage, ratio above 1+eps: the min keeps the unclipped
    // branch, so more probability raises the loss.
    double unclipped_neg =
        (loss_with_theta0(1.5, -1.0, h) - loss_with_theta0(1.5, -1.0, 0.0)) / h;
    CHECK(unclipped_neg > 0.1);

    // Negative advantage, ratio below 1-eps: clipped flat again.
    double clipped_neg = loss_with_theta0(0.5, -1.0, h) - loss_with_theta0(0.5, -1.0, 0.0);
    CHECK(std::abs(clipped_neg) < 1e-15);
}

TEST_CASE("the KL penalty is non-negative and scales with beta") {
    auto group = one_token_group({-0.6, -0.8}, {-0.6, -0.8}, {-0.2, -1.5});  // off-reference
    std::vector<double> advantages = {0.0, 0.0};
    GrpoConfig no_kl;
    no_kl.kl_beta = 0.0;
    GrpoConfig with_kl;
    with_kl.kl_beta = 1e-3;
    double base = grpo_loss(group, advantages, no_kl);
    double penalized = grpo_loss(group, advantages, with_kl);
    CHECK(base == 0.0);
    CHECK(penalized > 0.0);
    GrpoConfig stronger;
    stronger.kl_beta = 2e-3;
    CHECK(grpo_loss(group, advantages, stronger) == doctest::Approx(2.0 * penalized));
}

TEST_CASE("sft_nll sums negative log-probabilities") {
    CHECK(sft_nll({0.0, 0.0}) == 0.0);
    CHECK(sft_nll({-std::log(2.0), -std::log(2.0)}) ==
          doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
    CHECK_THROWS_AS(sft_nll({}), Error);
    CHECK_THROWS_AS(sft_nll({0.1}), Error);
}

TEST_CASE("rollout JSONL parses groups with optional expected values") {
    testutil::TempDir tmp;
    auto path = tmp.write_file(
        "rollouts.jsonl",
        R"({"samples":[{"reward":0.2,"logp_theta":[-0.5],"logp_old":[-0.5],"logp_ref":[-0.5]},)"
        R"({"reward":0.6,"logp_theta":[-0.3],"logp_old":[-0.3],"logp_ref":[-0.3]}],)"
        R"("expected_advantages":[-1.0,1.0],"expected_loss":0.0})"
        "\n");
    auto checks = load_rollout_groups(path);
    REQUIRE(checks.size() == 1);
    CHECK(checks[0].group.samples.size() == 2);
    REQUIRE(checks[0].expected_advantages.has_value());
    CHECK((*checks[0].expected_advantages)[1] == 1.0);
    CHECK(checks[0].expected_loss == 0.0);

    auto bad = tmp.write_file("bad.jsonl",
                              R"({"samples":[{"reward":0.2,"logp_theta":[-0.5],)"
                              R"("logp_old":[-0.5,-0.1],"logp_ref":[-0.5]}]})"
                              "\n");
    CHECK_THROWS_AS(load_rollout_groups(bad), ParseError);
}

TEST_CASE("sft records serialize to the documented JSONL shape") {
    SftRecord record;
    record.instruction = "inst";
    record.query = "q text";
    record.feedback_passages = {"p1", "p2"};
    record.target = "rewritten";
    record.utility = 0.25;
    record.retriever_tag = "bm25";
    std::ostringstream out;
    write_sft_jsonl(out, {record});
    auto parsed = nlohmann::json::parse(out.str());
    CHECK(parsed["instruction"] == "inst");
    CHECK(parsed["query"] == "q text");
    CHECK(parsed["passages"].size() == 2);
    CHECK(parsed["target"] == "rewritten");
    CHECK(parsed["utility"] == 0.25);
    CHECK(parsed["retriever"] == "bm25");
}
