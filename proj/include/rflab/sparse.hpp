#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rflab/corpus.hpp"
#include "rflab/errors.hpp"
#include "rflab/log.hpp"
#include "rflab/tokenize.hpp"

#include <json.hpp>

namespace rflab {

struct Bm25Params {
    double k1 = 0.9;
    double b = 0.4;
};

/// Sparse term weights for a query. Ordered by term so that scoring walks the
/// vocabulary deterministically.
class QueryTermModel {
public:
    QueryTermModel() = default;

    /// Bag-of-words weights: w(t) = term frequency in the text.
    static QueryTermModel from_text(const std::string& text,
                                    const Tokenizer& tokenizer = Tokenizer{}) {
        QueryTermModel model;
        for (const auto& term : tokenizer(text)) {
            model.weights_[term] += 1.0;
        }
        return model;
    }

    static QueryTermModel from_weights(std::map<std::string, double> weights) {
        QueryTermModel model;
        model.weights_ = std::move(weights);
        return model;
    }

    /// Validated probability distribution: non-negative weights summing to 1.
    static QueryTermModel probability(std::map<std::string, double> weights) {
        double sum = 0.0;
        for (const auto& [term, w] : weights) {
            if (w < 0.0) {
                throw Error("probability model has negative weight for \"" + term + "\"");
            }
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-9) {
            throw Error("probability model weights sum to " + std::to_string(sum) + ", not 1");
        }
        QueryTermModel model;
        model.weights_ = std::move(weights);
        model.is_probability_ = true;
        return model;
    }

    /// Rescale weights to sum to 1. Total weight must be positive.
    QueryTermModel normalized() const {
        double sum = 0.0;
        for (const auto& [term, w] : weights_) sum += w;
        if (sum <= 0.0) {
            throw Error("cannot normalize a query model with non-positive total weight");
        }
        std::map<std::string, double> scaled;
        for (const auto& [term, w] : weights_) {
            scaled[term] = w / sum;
        }
        return probability(std::move(scaled));
    }

    const std::map<std::string, double>& weights() const { return weights_; }
    bool is_probability() const { return is_probability_; }
    bool empty() const { return weights_.empty(); }

    double weight(const std::string& term) const {
        auto it = weights_.find(term);
        return it == weights_.end() ? 0.0 : it->second;
    }

private:
    std::map<std::string, double> weights_;
    bool is_probability_ = false;
};

/// The top-k first-stage documents used as feedback for one query,
/// in ranking order.
struct FeedbackSet {
    std::string query_id;
    std::vector<ScoredDoc> docs;
    std::size_t k = 0;

    static FeedbackSet from_ranking(const RankedList& ranking, std::size_t k) {
        FeedbackSet fb;
        fb.query_id = ranking.query_id();
        fb.k = k;
        const auto& entries = ranking.entries();
        fb.docs.assign(entries.begin(), entries.begin() + std::min(k, entries.size()));
        return fb;
    }
};

struct Posting {
    std::string doc_id;
    int tf = 0;
};

/// Inverted index with the statistics BM25 and RM3 need. Immutable once
/// built; searches are pure reads.
class InvertedIndex {
public:
    static InvertedIndex build(const Collection& collection,
                               const Tokenizer& tokenizer = Tokenizer{}) {
        if (collection.empty()) {
            throw Error("cannot index an empty collection");
        }
        InvertedIndex index;
        long long total_length = 0;
        for (const auto& doc : collection.docs()) {
            auto terms = tokenizer(doc.text);
            std::map<std::string, int> counts;
            for (const auto& term : terms) {
                ++counts[term];
            }
            for (const auto& [term, tf] : counts) {
                index.postings_[term].push_back({doc.doc_id, tf});
            }
            index.doc_terms_.emplace(doc.doc_id, std::move(counts));
            index.doc_lengths_.emplace(doc.doc_id, terms.size());
            index.doc_order_.push_back(doc.doc_id);
            total_length += static_cast<long long>(terms.size());
        }
        index.avg_doc_length_ =
            static_cast<double>(total_length) / static_cast<double>(collection.size());
        return index;
    }

    std::size_t doc_count() const { return doc_lengths_.size(); }
    double avg_doc_length() const { return avg_doc_length_; }

    std::size_t doc_length(const std::string& doc_id) const {
        auto it = doc_lengths_.find(doc_id);
        if (it == doc_lengths_.end()) {
            throw Error("doc_id \"" + doc_id + "\" not in index");
        }
        return it->second;
    }

    std::size_t document_frequency(const std::string& term) const {
        auto it = postings_.find(term);
        return it == postings_.end() ? 0 : it->second.size();
    }

    const std::vector<Posting>* postings(const std::string& term) const {
        auto it = postings_.find(term);
        return it == postings_.end() ? nullptr : &it->second;
    }

    /// Term counts of one document (the forward index RM3 reads).
    const std::map<std::string, int>& term_counts(const std::string& doc_id) const {
        auto it = doc_terms_.find(doc_id);
        if (it == doc_terms_.end()) {
            throw Error("doc_id \"" + doc_id + "\" not in index");
        }
        return it->second;
    }

    std::size_t vocabulary_size() const { return postings_.size(); }
    const std::vector<std::string>& doc_order() const { return doc_order_; }

    /// Non-negative BM25 idf: ln((N - df + 0.5) / (df + 0.5) + 1).
    double idf(const std::string& term) const {
        double df = static_cast<double>(document_frequency(term));
        double n = static_cast<double>(doc_count());
        return std::log((n - df + 0.5) / (df + 0.5) + 1.0);
    }

    /// Persist as JSONL: a header record then one record per document.
    /// Postings are rebuilt on load, so save/load/save is byte-stable.
    void save(const std::string& path) const {
        auto out = detail::open_output(path);
        nlohmann::json header = {
            {"kind", "sparse_index"},
            {"version", 1},
            {"doc_count", doc_count()},
            {"avg_doc_length", avg_doc_length_},
        };
        out << header.dump() << "\n";
        for (const auto& doc_id : doc_order_) {
            nlohmann::json record = {
                {"doc_id", doc_id},
                {"length", doc_lengths_.at(doc_id)},
                {"terms", doc_terms_.at(doc_id)},
            };
            out << record.dump() << "\n";
        }
    }

    static InvertedIndex load(const std::string& path) {
        auto in = detail::open_input(path);
        std::string line;
        if (!std::getline(in, line)) {
            throw ParseError(path, 1, "missing index header");
        }
        InvertedIndex index;
        std::size_t line_no = 1;
        try {
            auto header = nlohmann::json::parse(line);
            if (header.value("kind", "") != "sparse_index" || header.value("version", 0) != 1) {
                throw ParseError("not a version-1 sparse_index artifact");
            }
            index.avg_doc_length_ = header.at("avg_doc_length").get<double>();
            std::size_t expected_docs = header.at("doc_count").get<std::size_t>();
            while (std::getline(in, line)) {
                ++line_no;
                if (line.empty()) continue;
                auto record = nlohmann::json::parse(line);
                std::string doc_id = record.at("doc_id").get<std::string>();
                std::map<std::string, int> counts =
                    record.at("terms").get<std::map<std::string, int>>();
                for (const auto& [term, tf] : counts) {
                    index.postings_[term].push_back({doc_id, tf});
                }
                index.doc_lengths_.emplace(doc_id, record.at("length").get<std::size_t>());
                index.doc_terms_.emplace(doc_id, std::move(counts));
                index.doc_order_.push_back(doc_id);
            }
            if (index.doc_count() != expected_docs) {
                throw ParseError("index header declares " + std::to_string(expected_docs) +
                                 " documents but file has " + std::to_string(index.doc_count()));
            }
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path, line_no, std::string("bad index record: ") + e.what());
        }
        return index;
    }

private:
    std::map<std::string, std::vector<Posting>> postings_;
    std::unordered_map<std::string, std::map<std::string, int>> doc_terms_;
    std::unordered_map<std::string, std::size_t> doc_lengths_;
    std::vector<std::string> doc_order_;
    double avg_doc_length_ = 0.0;
};

/// BM25 contribution of one (term, doc) match. Kept as a free function so the
/// scorer and the expansion code share the exact same arithmetic.
inline double bm25_term_score(double query_weight, double idf, int tf, std::size_t doc_length,
                              double avg_doc_length, const Bm25Params& params) {
    double f = static_cast<double>(tf);
    double norm = 1.0 - params.b + params.b * (static_cast<double>(doc_length) / avg_doc_length);
    return query_weight * idf * (f * (params.k1 + 1.0) / (f + params.k1 * norm));
}

/// Top-k BM25 retrieval. Documents scoring exactly 0 never appear; ties break
/// by doc_id ascending.
inline RankedList search_sparse(const InvertedIndex& index, const QueryTermModel& query,
                                std::size_t k, const Bm25Params& params = Bm25Params{},
                                const std::string& tag = "bm25") {
    if (k < 1) {
        throw Error("search_sparse requires k >= 1");
    }
    std::map<std::string, double> accumulator;
    for (const auto& [term, weight] : query.weights()) {
        const auto* postings = index.postings(term);
        if (!postings) continue;
        double idf = index.idf(term);
        for (const auto& posting : *postings) {
            accumulator[posting.doc_id] += bm25_term_score(
                weight, idf, posting.tf, index.doc_length(posting.doc_id),
                index.avg_doc_length(), params);
        }
    }
    std::vector<ScoredDoc> scored;
    scored.reserve(accumulator.size());
    for (const auto& [doc_id, score] : accumulator) {
        if (score != 0.0) {
            scored.push_back({doc_id, score});
        }
    }
    std::sort(scored.begin(), scored.end(), ranked_before);
    if (scored.size() > k) {
        scored.resize(k);
    }
    return RankedList::from_scores("", std::move(scored), tag);
}

struct Rm3Params {
    double alpha = 0.5;           // interpolation toward the feedback model
    std::size_t n_terms = 20;     // feedback model truncated to this many terms
    bool include_query_terms = true;  // keep original-query terms in the feedback model
};

/// RM3 expansion: p(t|q') = (1 - alpha) * p(t|q) + alpha * sum_d p(t|d) p(d|q).
///
/// p(t|d) is the document MLE tf/length; p(d|q) normalizes the first-stage
/// scores after shifting their minimum to zero (uniform when all scores
/// are equal). The feedback model is truncated to its top n_terms terms and
/// renormalized before interpolation. Zero-length feedback documents are
/// skipped with a warning; if none survive, that is an error.
inline QueryTermModel rm3_expand(const InvertedIndex& index, const QueryTermModel& original,
                                 const FeedbackSet& feedback, const Rm3Params& params = Rm3Params{}) {
    if (!original.is_probability()) {
        throw Error("rm3_expand requires the original model to be a probability model");
    }
    if (feedback.docs.empty()) {
        throw Error("rm3_expand requires a non-empty feedback set");
    }
    if (params.alpha < 0.0 || params.alpha > 1.0) {
        throw Error("rm3_expand requires alpha in [0, 1]");
    }

    std::vector<const ScoredDoc*> usable;
    for (const auto& doc : feedback.docs) {
        if (index.doc_length(doc.doc_id) == 0) {
            log_warn("rm3: skipping zero-length feedback document \"" + doc.doc_id + "\"");
            continue;
        }
        usable.push_back(&doc);
    }
    if (usable.empty()) {
        throw Error("rm3: every feedback document has length 0");
    }

    // p(d|q): min-shifted score normalization over the usable feedback docs.
    double min_score = usable.front()->score;
    for (const auto* doc : usable) min_score = std::min(min_score, doc->score);
    double shifted_sum = 0.0;
    for (const auto* doc : usable) shifted_sum += doc->score - min_score;
    std::vector<double> doc_probs;
    doc_probs.reserve(usable.size());
    for (const auto* doc : usable) {
        doc_probs.push_back(shifted_sum > 0.0 ? (doc->score - min_score) / shifted_sum
                                              : 1.0 / static_cast<double>(usable.size()));
    }

    std::map<std::string, double> feedback_model;
    for (std::size_t i = 0; i < usable.size(); ++i) {
        const auto& doc_id = usable[i]->doc_id;
        double length = static_cast<double>(index.doc_length(doc_id));
        for (const auto& [term, tf] : index.term_counts(doc_id)) {
            feedback_model[term] += (static_cast<double>(tf) / length) * doc_probs[i];
        }
    }
    if (!params.include_query_terms) {
        for (const auto& [term, w] : original.weights()) {
            feedback_model.erase(term);
        }
    }

    // Truncate to the heaviest n_terms (ties by term ascending), renormalize.
    std::vector<std::pair<std::string, double>> ordered(feedback_model.begin(),
                                                        feedback_model.end());
    std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (ordered.size() > params.n_terms) {
        ordered.resize(params.n_terms);
    }
    double kept_mass = 0.0;
    for (const auto& [term, w] : ordered) kept_mass += w;
    if (kept_mass <= 0.0 && params.alpha > 0.0) {
        // Possible only when exclude-query-terms stripped the whole feedback
        // model; the interpolation degenerates to the original query.
        log_warn("rm3: feedback model empty after truncation; returning original model");
        return original;
    }

    std::map<std::string, double> expanded;
    for (const auto& [term, w] : original.weights()) {
        double value = (1.0 - params.alpha) * w;
        if (value != 0.0) expanded[term] = value;
    }
    if (kept_mass > 0.0 && params.alpha > 0.0) {
        for (const auto& [term, w] : ordered) {
            expanded[term] += params.alpha * (w / kept_mass);
        }
    }

    // Both inputs are probability models, so the interpolation already sums
    // to 1 up to rounding; probability() just validates that.
    return QueryTermModel::probability(std::move(expanded));
}

}  // namespace rflab
