#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "rflab/corpus.hpp"
#include "rflab/errors.hpp"

#include <json.hpp>

namespace rflab {

/// Exponential gain 2^grade - 1, exact for the integer grades qrels carry.
inline double ndcg_gain(int grade) {
    return std::ldexp(1.0, grade) - 1.0;
}

/// NDCG@k with DCG = sum_{rank<=k} (2^grade - 1) / log2(rank + 1) and the
/// ideal DCG taken from the query's positive grades sorted descending,
/// truncated at k. Queries with no relevant documents score 0.
inline double ndcg_at_k(const RankedList& ranking, const QrelsTable& qrels, std::size_t k) {
    if (k < 1) {
        throw Error("ndcg_at_k requires k >= 1");
    }
    std::vector<int> grades;
    for (const auto& [doc_id, grade] : qrels.judged(ranking.query_id())) {
        if (grade > 0) grades.push_back(grade);
    }
    if (grades.empty()) {
        return 0.0;
    }
    std::sort(grades.begin(), grades.end(), std::greater<int>());
    double ideal = 0.0;
    for (std::size_t i = 0; i < std::min(k, grades.size()); ++i) {
        ideal += ndcg_gain(grades[i]) / std::log2(static_cast<double>(i + 2));
    }
    double dcg = 0.0;
    const auto& entries = ranking.entries();
    for (std::size_t i = 0; i < std::min(k, entries.size()); ++i) {
        int grade = qrels.grade(ranking.query_id(), entries[i].doc_id);
        if (grade > 0) {
            dcg += ndcg_gain(grade) / std::log2(static_cast<double>(i + 2));
        }
    }
    return dcg / ideal;
}

/// Fraction of relevant (grade > 0) documents retrieved in the top k.
inline double recall_at_k(const RankedList& ranking, const QrelsTable& qrels, std::size_t k) {
    if (k < 1) {
        throw Error("recall_at_k requires k >= 1");
    }
    std::size_t relevant = 0;
    for (const auto& [doc_id, grade] : qrels.judged(ranking.query_id())) {
        if (grade > 0) ++relevant;
    }
    if (relevant == 0) {
        return 0.0;
    }
    std::size_t found = 0;
    const auto& entries = ranking.entries();
    for (std::size_t i = 0; i < std::min(k, entries.size()); ++i) {
        if (qrels.grade(ranking.query_id(), entries[i].doc_id) > 0) ++found;
    }
    return static_cast<double>(found) / static_cast<double>(relevant);
}

/// Utility of a candidate ranking: NDCG@k(candidate) - NDCG@k(baseline).
inline double utility_delta(const RankedList& candidate, const RankedList& baseline,
                            const QrelsTable& qrels, std::size_t k = 10) {
    if (candidate.query_id() != baseline.query_id()) {
        throw Error("utility_delta: query_id mismatch (\"" + candidate.query_id() + "\" vs \"" +
                    baseline.query_id() + "\")");
    }
    return ndcg_at_k(candidate, qrels, k) - ndcg_at_k(baseline, qrels, k);
}

namespace detail {

/// Continued-fraction evaluation for the regularized incomplete beta
/// function (Lentz's method).
inline double ibeta_cf(double a, double b, double x) {
    const double tiny = 1e-300;
    const double eps = 1e-15;
    double qab = a + b;
    double qap = a + 1.0;
    double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 300; ++m) {
        double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) break;
    }
    return h;
}

}  // namespace detail

/// Regularized incomplete beta function I_x(a, b).
inline double regularized_incomplete_beta(double a, double b, double x) {
    if (x < 0.0 || x > 1.0) {
        throw Error("regularized_incomplete_beta requires x in [0, 1]");
    }
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                      b * std::log(1.0 - x);
    double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * detail::ibeta_cf(a, b, x) / a;
    }
    return 1.0 - front * detail::ibeta_cf(b, a, 1.0 - x) / b;
}

/// Two-tailed paired t-test p-value over per-query score vectors. Identical
/// vectors (all differences zero) give p = 1; a zero-variance non-zero
/// difference gives p = 0.
inline double paired_t_test(const std::vector<double>& scores_a,
                            const std::vector<double>& scores_b) {
    if (scores_a.size() != scores_b.size()) {
        throw Error("paired_t_test: length mismatch (" + std::to_string(scores_a.size()) + " vs " +
                    std::to_string(scores_b.size()) + ")");
    }
    std::size_t n = scores_a.size();
    if (n < 2) {
        throw Error("paired_t_test requires at least 2 pairs");
    }
    std::vector<double> diffs(n);
    for (std::size_t i = 0; i < n; ++i) {
        diffs[i] = scores_a[i] - scores_b[i];
    }
    double mean = 0.0;
    for (double d : diffs) mean += d;
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double d : diffs) ss += (d - mean) * (d - mean);
    double variance = ss / static_cast<double>(n - 1);
    if (variance <= 0.0) {
        return mean == 0.0 ? 1.0 : 0.0;
    }
    double t = mean / std::sqrt(variance / static_cast<double>(n));
    double df = static_cast<double>(n - 1);
    // Two-tailed p from the exact t CDF: p = I_{df/(df+t^2)}(df/2, 1/2).
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

/// Linear-interpolation quantile (the common "type 7" rule) over a sorted
/// copy of the values.
inline double quantile(std::vector<double> values, double p) {
    if (values.empty()) {
        throw Error("quantile of an empty set");
    }
    std::sort(values.begin(), values.end());
    if (values.size() == 1) return values.front();
    double pos = p * static_cast<double>(values.size() - 1);
    auto lower = static_cast<std::size_t>(pos);
    if (lower + 1 >= values.size()) return values.back();
    double frac = pos - static_cast<double>(lower);
    return values[lower] + frac * (values[lower + 1] - values[lower]);
}

struct BucketSummary {
    std::size_t count = 0;
    double baseline_low = 0.0;   // smallest baseline score in the bucket
    double baseline_high = 0.0;  // largest baseline score in the bucket
    double q1 = 0.0;
    double median = 0.0;
    double q3 = 0.0;
};

/// Group queries into n_buckets contiguous equal-count buckets of ascending
/// baseline score (remainder spread to the earliest buckets) and summarize
/// the improvement distribution inside each bucket.
inline std::vector<BucketSummary> bucket_report(const std::map<std::string, double>& baseline_scores,
                                                const std::map<std::string, double>& improvements,
                                                std::size_t n_buckets) {
    if (baseline_scores.empty()) {
        throw Error("bucket_report requires at least one query");
    }
    if (n_buckets < 1) {
        throw Error("bucket_report requires n_buckets >= 1");
    }
    if (baseline_scores.size() != improvements.size()) {
        throw Error("bucket_report: query sets differ in size");
    }
    struct Row {
        std::string query_id;
        double baseline;
        double improvement;
    };
    std::vector<Row> rows;
    rows.reserve(baseline_scores.size());
    for (const auto& [query_id, baseline] : baseline_scores) {
        auto it = improvements.find(query_id);
        if (it == improvements.end()) {
            throw Error("bucket_report: no improvement value for query \"" + query_id + "\"");
        }
        rows.push_back({query_id, baseline, it->second});
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        if (a.baseline != b.baseline) return a.baseline < b.baseline;
        return a.query_id < b.query_id;
    });

    std::size_t n = rows.size();
    std::size_t base_size = n / n_buckets;
    std::size_t remainder = n % n_buckets;
    std::vector<BucketSummary> buckets;
    std::size_t offset = 0;
    for (std::size_t b = 0; b < n_buckets && offset < n; ++b) {
        std::size_t size = base_size + (b < remainder ? 1 : 0);
        if (size == 0) break;
        std::vector<double> bucket_improvements;
        bucket_improvements.reserve(size);
        for (std::size_t i = offset; i < offset + size; ++i) {
            bucket_improvements.push_back(rows[i].improvement);
        }
        BucketSummary summary;
        summary.count = size;
        summary.baseline_low = rows[offset].baseline;
        summary.baseline_high = rows[offset + size - 1].baseline;
        summary.q1 = quantile(bucket_improvements, 0.25);
        summary.median = quantile(bucket_improvements, 0.5);
        summary.q3 = quantile(bucket_improvements, 0.75);
        buckets.push_back(summary);
        offset += size;
    }
    return buckets;
}

struct QueryMetrics {
    double ndcg = 0.0;
    double recall = 0.0;
    bool no_relevant = false;  // flagged: the query has no relevant documents
};

struct MetricCutoffs {
    std::size_t ndcg_k = 10;
    std::size_t recall_k = 100;
};

/// Per-query metrics plus their arithmetic means.
struct MetricReport {
    std::map<std::string, QueryMetrics> per_query;
    MetricCutoffs cutoffs;
    double mean_ndcg = 0.0;
    double mean_recall = 0.0;

    std::vector<double> ndcg_vector() const {
        std::vector<double> v;
        v.reserve(per_query.size());
        for (const auto& [query_id, m] : per_query) v.push_back(m.ndcg);
        return v;
    }

    std::vector<double> recall_vector() const {
        std::vector<double> v;
        v.reserve(per_query.size());
        for (const auto& [query_id, m] : per_query) v.push_back(m.recall);
        return v;
    }

    /// TSV export: "query_id  ndcg@K  recall@K", one row per query.
    std::string to_tsv() const {
        std::string out = "query_id\tndcg@" + std::to_string(cutoffs.ndcg_k) + "\trecall@" +
                          std::to_string(cutoffs.recall_k) + "\n";
        for (const auto& [query_id, m] : per_query) {
            out += query_id + "\t" + format_run_score(m.ndcg) + "\t" + format_run_score(m.recall) +
                   "\n";
        }
        return out;
    }

    nlohmann::json to_json() const {
        nlohmann::json per;
        std::vector<std::string> flagged;
        for (const auto& [query_id, m] : per_query) {
            per[query_id] = {{"ndcg", m.ndcg}, {"recall", m.recall}};
            if (m.no_relevant) flagged.push_back(query_id);
        }
        return nlohmann::json{
            {"query_count", per_query.size()},
            {"ndcg_cutoff", cutoffs.ndcg_k},
            {"recall_cutoff", cutoffs.recall_k},
            {"mean_ndcg", mean_ndcg},
            {"mean_recall", mean_recall},
            {"queries_without_relevant", flagged},
            {"per_query", per},
        };
    }
};

/// JSON summary of a candidate report against a baseline report: means for
/// both sides, two-tailed paired significance over the per-query vectors,
/// and the improvement buckets by baseline strength.
inline nlohmann::json comparison_summary(const MetricReport& candidate,
                                         const MetricReport& baseline, std::size_t n_buckets) {
    if (candidate.per_query.size() != baseline.per_query.size()) {
        throw Error("comparison_summary: reports cover different query sets");
    }
    std::map<std::string, double> baseline_ndcg;
    std::map<std::string, double> ndcg_improvement;
    for (const auto& [query_id, metrics] : baseline.per_query) {
        auto it = candidate.per_query.find(query_id);
        if (it == candidate.per_query.end()) {
            throw Error("comparison_summary: candidate report is missing query \"" + query_id +
                        "\"");
        }
        baseline_ndcg[query_id] = metrics.ndcg;
        ndcg_improvement[query_id] = it->second.ndcg - metrics.ndcg;
    }
    nlohmann::json buckets = nlohmann::json::array();
    for (const auto& bucket : bucket_report(baseline_ndcg, ndcg_improvement, n_buckets)) {
        buckets.push_back({{"count", bucket.count},
                           {"baseline_low", bucket.baseline_low},
                           {"baseline_high", bucket.baseline_high},
                           {"q1", bucket.q1},
                           {"median", bucket.median},
                           {"q3", bucket.q3}});
    }
    return nlohmann::json{
        {"baseline", {{"mean_ndcg", baseline.mean_ndcg}, {"mean_recall", baseline.mean_recall}}},
        {"candidate", {{"mean_ndcg", candidate.mean_ndcg}, {"mean_recall", candidate.mean_recall}}},
        {"p_values",
         {{"ndcg", paired_t_test(candidate.ndcg_vector(), baseline.ndcg_vector())},
          {"recall", paired_t_test(candidate.recall_vector(), baseline.recall_vector())}}},
        {"ndcg_buckets", buckets},
    };
}

/// Evaluate ranked lists against qrels over a canonical query-id set.
/// Queries missing from the run contribute zero to both metrics.
inline MetricReport evaluate_run(const std::vector<RankedList>& lists, const QrelsTable& qrels,
                                 const std::vector<std::string>& query_ids,
                                 MetricCutoffs cutoffs = MetricCutoffs{}) {
    std::map<std::string, const RankedList*> by_query;
    for (const auto& list : lists) {
        by_query[list.query_id()] = &list;
    }
    MetricReport report;
    report.cutoffs = cutoffs;
    for (const auto& query_id : query_ids) {
        QueryMetrics m;
        m.no_relevant = !qrels.has_relevant(query_id);
        auto it = by_query.find(query_id);
        if (it != by_query.end()) {
            m.ndcg = ndcg_at_k(*it->second, qrels, cutoffs.ndcg_k);
            m.recall = recall_at_k(*it->second, qrels, cutoffs.recall_k);
        }
        report.per_query.emplace(query_id, m);
    }
    if (!report.per_query.empty()) {
        for (const auto& [query_id, m] : report.per_query) {
            report.mean_ndcg += m.ndcg;
            report.mean_recall += m.recall;
        }
        report.mean_ndcg /= static_cast<double>(report.per_query.size());
        report.mean_recall /= static_cast<double>(report.per_query.size());
    }
    return report;
}

}  // namespace rflab
