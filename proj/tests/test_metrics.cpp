#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "rflab/metrics.hpp"
#include "testutil.hpp"

using namespace rflab;

namespace {

QrelsTable make_qrels(const std::string& query_id,
                      const std::vector<std::pair<std::string, int>>& grades) {
    QrelsTable qrels;
    for (const auto& [doc_id, grade] : grades) qrels.set(query_id, doc_id, grade);
    return qrels;
}

RankedList make_ranking(const std::string& query_id, const std::vector<std::string>& doc_ids) {
    std::vector<ScoredDoc> entries;
    double score = static_cast<double>(doc_ids.size());
    for (const auto& doc_id : doc_ids) entries.push_back({doc_id, score--});
    return RankedList::from_scores(query_id, entries, "test");
}

}  // namespace

TEST_CASE("ndcg_at_k reproduces the worked 0.70981 example") {
    auto qrels = make_qrels("q1", {{"d1", 3}, {"d2", 1}});
    auto ranking = make_ranking("q1", {"d2", "d1", "d3"});
    double expected = (1.0 + 7.0 / std::log2(3.0)) / (7.0 + 1.0 / std::log2(3.0));
    CHECK(ndcg_at_k(ranking, qrels, 10) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(ndcg_at_k(ranking, qrels, 10) == doctest::Approx(0.70981).epsilon(1e-5));
}

TEST_CASE("an ideal ordering scores ndcg 1 and a query without qrels scores 0") {
    auto qrels = make_qrels("q1", {{"d1", 3}, {"d2", 1}, {"d3", 2}});
    CHECK(ndcg_at_k(make_ranking("q1", {"d1", "d3", "d2"}), qrels, 10) ==
          doctest::Approx(1.0).epsilon(1e-12));
    CHECK(ndcg_at_k(make_ranking("q1", {"d1"}), QrelsTable{}, 10) == 0.0);
}

TEST_CASE("ndcg ideal truncates at k so a perfect top-k still scores 1") {
    QrelsTable qrels;
    for (int i = 0; i < 8; ++i) qrels.set("q1", "d" + std::to_string(i), 1);
    auto perfect_top2 = make_ranking("q1", {"d0", "d1"});
    CHECK(ndcg_at_k(perfect_top2, qrels, 2) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("recall_at_k is the judged-relevant fraction retrieved") {
    auto qrels = make_qrels("q1", {{"a", 1}, {"b", 2}, {"c", 1}, {"d", 3}});
    CHECK(recall_at_k(make_ranking("q1", {"a", "x", "d"}), qrels, 10) == doctest::Approx(0.5));
    CHECK(recall_at_k(make_ranking("q1", {"a", "b", "c", "d"}), qrels, 10) == doctest::Approx(1.0));
    CHECK(recall_at_k(make_ranking("q1", {}), qrels, 10) == 0.0);
    CHECK(recall_at_k(make_ranking("q1", {"a"}), QrelsTable{}, 10) == 0.0);
}

TEST_CASE("recall is monotone in k") {
    oracle::Rng rng(4242);
    for (int trial = 0; trial < 50; ++trial) {
        QrelsTable qrels;
        std::map<std::string, int> grades;
        for (int d = 0; d < 12; ++d) {
            int grade = rng.uniform_int(0, 3);
            qrels.set("q", "d" + std::to_string(d), grade);
        }
        std::vector<std::string> docs;
        for (int d = 0; d < 12; ++d) docs.push_back("d" + std::to_string(rng.uniform_int(0, 20)));
        std::sort(docs.begin(), docs.end());
        docs.erase(std::unique(docs.begin(), docs.end()), docs.end());
        auto ranking = make_ranking("q", docs);
        for (std::size_t k = 1; k < 14; ++k) {
            CHECK(recall_at_k(ranking, qrels, k) <= recall_at_k(ranking, qrels, k + 1));
        }
    }
}

TEST_CASE("ndcg is invariant to swapping equal-grade documents") {
    auto qrels = make_qrels("q1", {{"a", 2}, {"b", 2}, {"c", 1}});
    double before = ndcg_at_k(make_ranking("q1", {"a", "b", "c"}), qrels, 10);
    double after = ndcg_at_k(make_ranking("q1", {"b", "a", "c"}), qrels, 10);
    CHECK(before == doctest::Approx(after).epsilon(1e-15));
}

TEST_CASE("utility_delta is the ndcg difference and checks query ids") {
    auto qrels = make_qrels("q1", {{"d1", 3}, {"d2", 1}});
    auto baseline = make_ranking("q1", {"d2", "d1", "d3"});
    CHECK(utility_delta(baseline, baseline, qrels) == 0.0);

    auto ideal = make_ranking("q1", {"d1", "d2"});
    CHECK(utility_delta(ideal, baseline, qrels) == doctest::Approx(0.29019).epsilon(1e-4));
    CHECK(utility_delta(make_ranking("q1", {}), ideal, qrels) == doctest::Approx(-1.0));

    CHECK_THROWS_AS(utility_delta(make_ranking("q2", {}), baseline, qrels), Error);
}

TEST_CASE("paired_t_test reproduces the worked example and its contracts") {
    std::vector<double> a = {0.2, 0.4, 0.6};
    std::vector<double> b = {0.1, 0.2, 0.3};
    double p = paired_t_test(a, b);
    // t = 3.4641 on 2 df; exact two-tailed p = 1 - sqrt(6/7).
    CHECK(p == doctest::Approx(1.0 - std::sqrt(6.0 / 7.0)).epsilon(1e-10));
    CHECK(p == doctest::Approx(0.0742).epsilon(2e-3));

    CHECK(paired_t_test({0.5, 0.7, 0.2}, {0.5, 0.7, 0.2}) == 1.0);
    CHECK_THROWS_AS(paired_t_test({1.0}, {2.0}), Error);
    CHECK_THROWS_AS(paired_t_test({1.0, 2.0}, {1.0}), Error);
}

TEST_CASE("paired_t_test is symmetric in its arguments") {
    oracle::Rng rng(11);
    for (int trial = 0; trial < 30; ++trial) {
        int n = rng.uniform_int(2, 40);
        std::vector<double> a(n), b(n);
        for (int i = 0; i < n; ++i) {
            a[i] = rng.uniform(0.0, 1.0);
            b[i] = rng.uniform(0.0, 1.0);
        }
        CHECK(paired_t_test(a, b) == doctest::Approx(paired_t_test(b, a)).epsilon(1e-12));
    }
}

TEST_CASE("regularized incomplete beta agrees with the closed form I_x(1, b)") {
    for (double x : {0.05, 0.2, 0.5, 0.9}) {
        CHECK(regularized_incomplete_beta(1.0, 0.5, x) ==
              doctest::Approx(1.0 - std::sqrt(1.0 - x)).epsilon(1e-12));
    }
    CHECK(regularized_incomplete_beta(2.0, 3.0, 0.0) == 0.0);
    CHECK(regularized_incomplete_beta(2.0, 3.0, 1.0) == 1.0);
}

TEST_CASE("bucket_report partitions by ascending baseline with remainder first") {
    std::map<std::string, double> baseline, improvements;
    for (int i = 0; i < 10; ++i) {
        std::string id = "q" + std::to_string(i);
        baseline[id] = static_cast<double>(9 - i);  // q9 weakest
        improvements[id] = 0.25;
    }
    auto buckets = bucket_report(baseline, improvements, 5);
    REQUIRE(buckets.size() == 5);
    for (const auto& bucket : buckets) {
        CHECK(bucket.count == 2);
        CHECK(bucket.median == doctest::Approx(0.25));  // constant improvements
        CHECK(bucket.q1 == doctest::Approx(0.25));
        CHECK(bucket.q3 == doctest::Approx(0.25));
    }
    CHECK(buckets.front().baseline_low == doctest::Approx(0.0));
    CHECK(buckets.back().baseline_high == doctest::Approx(9.0));

    std::map<std::string, double> seven_b, seven_i;
    for (int i = 0; i < 7; ++i) {
        seven_b["q" + std::to_string(i)] = i;
        seven_i["q" + std::to_string(i)] = 0.0;
    }
    auto sizes = bucket_report(seven_b, seven_i, 3);
    REQUIRE(sizes.size() == 3);
    CHECK(sizes[0].count == 3);
    CHECK(sizes[1].count == 2);
    CHECK(sizes[2].count == 2);

    CHECK_THROWS_AS(bucket_report({}, {}, 3), Error);
}

TEST_CASE("bucket medians summarize the improvement distribution") {
    std::map<std::string, double> baseline = {{"a", 0.1}, {"b", 0.2}, {"c", 0.3}, {"d", 0.9}};
    std::map<std::string, double> improvements = {{"a", 0.4}, {"b", 0.2}, {"c", -0.1}, {"d", 0.0}};
    auto buckets = bucket_report(baseline, improvements, 2);
    REQUIRE(buckets.size() == 2);
    CHECK(buckets[0].median == doctest::Approx(0.3));   // median of {0.4, 0.2}
    CHECK(buckets[1].median == doctest::Approx(-0.05));  // median of {-0.1, 0.0}
}

TEST_CASE("property: metrics match the brute-force oracle on random instances") {
    testutil::LogCapture logs;  // silence duplicate-qrels warnings from the generator
    oracle::Rng rng(314159);
    for (int trial = 0; trial < 300; ++trial) {
        std::map<std::string, int> grades;
        QrelsTable qrels;
        int judged = rng.uniform_int(0, 10);
        for (int d = 0; d < judged; ++d) {
            std::string doc = "d" + std::to_string(rng.uniform_int(0, 14));
            int grade = rng.uniform_int(0, 4);
            grades[doc] = grade;  // mirror last-wins
            qrels.set("q", doc, grade);
        }
        std::vector<std::string> docs;
        for (int d = 0; d < 15; ++d) {
            std::string doc = "d" + std::to_string(d);
            if (rng.uniform(0.0, 1.0) < 0.6) docs.push_back(doc);
        }
        auto ranking = make_ranking("q", docs);
        std::size_t k = static_cast<std::size_t>(rng.uniform_int(1, 18));
        CHECK(std::abs(ndcg_at_k(ranking, qrels, k) - oracle::ndcg_at_k(docs, grades, k)) < 1e-9);
        CHECK(std::abs(recall_at_k(ranking, qrels, k) - oracle::recall_at_k(docs, grades, k)) <
              1e-9);
    }
}

TEST_CASE("comparison_summary carries p-values and improvement buckets") {
    QrelsTable qrels;
    std::vector<RankedList> baseline_lists, candidate_lists;
    std::vector<std::string> ids;
    for (int i = 0; i < 6; ++i) {
        std::string qid = "q" + std::to_string(i);
        std::string relevant = "rel" + std::to_string(i);
        qrels.set(qid, relevant, 1);
        ids.push_back(qid);
        // Baseline ranks the relevant doc second; candidate ranks it first.
        baseline_lists.push_back(
            RankedList::from_scores(qid, {{"junk", 2.0}, {relevant, 1.0}}, "b"));
        candidate_lists.push_back(RankedList::from_scores(qid, {{relevant, 2.0}}, "c"));
    }
    auto baseline = evaluate_run(baseline_lists, qrels, ids);
    auto candidate = evaluate_run(candidate_lists, qrels, ids);
    auto summary = comparison_summary(candidate, baseline, 3);
    CHECK(summary["candidate"]["mean_ndcg"] == doctest::Approx(1.0));
    CHECK(summary["baseline"]["mean_ndcg"] == doctest::Approx(1.0 / std::log2(3.0)));
    CHECK(summary["p_values"]["ndcg"].get<double>() < 1e-6);   // uniform strict improvement
    CHECK(summary["p_values"]["recall"].get<double>() == 1.0);  // recall identical
    REQUIRE(summary["ndcg_buckets"].size() == 3);
    CHECK(summary["ndcg_buckets"][0]["count"] == 2);
    CHECK(summary["ndcg_buckets"][0]["median"].get<double>() ==
          doctest::Approx(1.0 - 1.0 / std::log2(3.0)));

    MetricReport mismatched;
    CHECK_THROWS_AS(comparison_summary(candidate, mismatched, 2), Error);
}

TEST_CASE("evaluate_run averages per-query metrics and flags unjudged queries") {
    auto qrels = make_qrels("q1", {{"d1", 1}});
    std::vector<RankedList> lists = {make_ranking("q1", {"d1"}), make_ranking("q2", {"d9"})};
    auto report = evaluate_run(lists, qrels, {"q1", "q2", "q3"});
    REQUIRE(report.per_query.size() == 3);
    CHECK(report.per_query.at("q1").ndcg == doctest::Approx(1.0));
    CHECK_FALSE(report.per_query.at("q1").no_relevant);
    CHECK(report.per_query.at("q2").no_relevant);
    CHECK(report.per_query.at("q3").ndcg == 0.0);  // missing from the run
    CHECK(report.mean_ndcg == doctest::Approx(1.0 / 3.0));

    auto tsv = report.to_tsv();
    CHECK(tsv.rfind("query_id\tndcg@10\trecall@100\n", 0) == 0);
    CHECK(tsv.find("q1\t1.000000\t1.000000\n") != std::string::npos);

    auto json = report.to_json();
    CHECK(json["query_count"] == 3);
    CHECK(json["queries_without_relevant"].size() == 2);  // q2 and q3
}
