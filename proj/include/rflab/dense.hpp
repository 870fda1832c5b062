#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rflab/corpus.hpp"
#include "rflab/errors.hpp"
#include "rflab/log.hpp"
#include "rflab/tokenize.hpp"

#include <json.hpp>

namespace rflab {

using Embedding = std::vector<double>;

enum class Similarity { Dot, Cosine };

inline Similarity similarity_from_string(const std::string& name) {
    if (name == "dot") return Similarity::Dot;
    if (name == "cosine") return Similarity::Cosine;
    throw ConfigError("unknown similarity \"" + name + "\" (expected dot or cosine)");
}

inline const char* to_string(Similarity kind) {
    return kind == Similarity::Dot ? "dot" : "cosine";
}

inline double dot_product(const Embedding& a, const Embedding& b) {
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sum += a[i] * b[i];
    }
    return sum;
}

inline double l2_norm(const Embedding& v) {
    return std::sqrt(dot_product(v, v));
}

/// Fixed-dimension embeddings keyed by id, searched by exact brute force.
class EmbeddingStore {
public:
    EmbeddingStore(std::size_t dim, Similarity kind) : dim_(dim), kind_(kind) {
        if (dim_ == 0) {
            throw Error("embedding store dimension must be positive");
        }
    }

    void add(const std::string& id, Embedding vec) {
        if (vec.size() != dim_) {
            throw Error("embedding \"" + id + "\" has dimension " + std::to_string(vec.size()) +
                        ", store expects " + std::to_string(dim_));
        }
        for (double v : vec) {
            if (!std::isfinite(v)) {
                throw Error("embedding \"" + id + "\" contains a non-finite value");
            }
        }
        double norm = l2_norm(vec);
        if (kind_ == Similarity::Cosine && norm == 0.0) {
            throw Error("embedding \"" + id + "\" is a zero vector; cosine requires non-zero vectors");
        }
        if (!entries_.emplace(id, Entry{std::move(vec), norm}).second) {
            throw Error("duplicate embedding id \"" + id + "\"");
        }
    }

    std::size_t dim() const { return dim_; }
    Similarity similarity() const { return kind_; }
    std::size_t size() const { return entries_.size(); }

    const Embedding* find(const std::string& id) const {
        auto it = entries_.find(id);
        return it == entries_.end() ? nullptr : &it->second.vec;
    }

    const Embedding& at(const std::string& id) const {
        const Embedding* vec = find(id);
        if (!vec) {
            throw Error("no embedding for id \"" + id + "\"");
        }
        return *vec;
    }

    /// Exact top-k by dot product or cosine; ties break by doc_id ascending.
    RankedList search(const Embedding& query, std::size_t k, const std::string& tag = "dense") const {
        if (k < 1) {
            throw Error("search requires k >= 1");
        }
        if (query.size() != dim_) {
            throw Error("query dimension " + std::to_string(query.size()) + " does not match store dimension " +
                        std::to_string(dim_));
        }
        double query_norm = 0.0;
        if (kind_ == Similarity::Cosine) {
            query_norm = l2_norm(query);
            if (query_norm == 0.0) {
                throw Error("cosine similarity is undefined for a zero query vector");
            }
        }
        std::vector<ScoredDoc> scored;
        scored.reserve(entries_.size());
        for (const auto& [id, entry] : entries_) {
            double score = dot_product(query, entry.vec);
            if (kind_ == Similarity::Cosine) {
                score /= query_norm * entry.norm;
            }
            scored.push_back({id, score});
        }
        std::sort(scored.begin(), scored.end(), ranked_before);
        if (scored.size() > k) {
            scored.resize(k);
        }
        return RankedList::from_scores("", std::move(scored), tag);
    }

    /// Persist as JSONL records {"id": ..., "vector": [...]}, in id order.
    void save(const std::string& path) const {
        auto out = detail::open_output(path);
        for (const auto& [id, entry] : entries_) {
            nlohmann::json record = {{"id", id}, {"vector", entry.vec}};
            out << record.dump() << "\n";
        }
    }

private:
    struct Entry {
        Embedding vec;
        double norm = 0.0;
    };

    std::size_t dim_;
    Similarity kind_;
    std::map<std::string, Entry> entries_;
};

/// Load JSONL embeddings. Every record must share the first record's
/// dimension; an empty file is an error because an empty store is unusable.
inline EmbeddingStore load_embeddings(const std::string& path,
                                      Similarity kind = Similarity::Cosine) {
    auto in = detail::open_input(path);
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::pair<std::string, Embedding>> records;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            auto record = nlohmann::json::parse(line);
            records.emplace_back(record.at("id").get<std::string>(),
                                 record.at("vector").get<Embedding>());
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path, line_no, std::string("bad embedding record: ") + e.what());
        }
    }
    if (records.empty()) {
        throw ParseError(path + ": no embedding records (an empty store is unusable)");
    }
    EmbeddingStore store(records.front().second.size(), kind);
    for (auto& [id, vec] : records) {
        try {
            store.add(id, std::move(vec));
        } catch (const Error& e) {
            throw ParseError(path + ": " + e.what());
        }
    }
    return store;
}

/// Vector relevance feedback: q' = alpha * q + beta * sum_i d_i.
/// An empty feedback list with beta != 0 degrades to alpha * q with a warning.
inline Embedding vprf_refine(const Embedding& query, const std::vector<Embedding>& feedback,
                             double alpha, double beta) {
    for (const auto& vec : feedback) {
        if (vec.size() != query.size()) {
            throw Error("vprf_refine: feedback dimension " + std::to_string(vec.size()) +
                        " does not match query dimension " + std::to_string(query.size()));
        }
    }
    if (feedback.empty() && beta != 0.0) {
        log_warn("vprf_refine: empty feedback set; returning alpha * query");
    }
    Embedding refined(query.size(), 0.0);
    for (std::size_t i = 0; i < query.size(); ++i) {
        double feedback_sum = 0.0;
        for (const auto& vec : feedback) {
            feedback_sum += vec[i];
        }
        refined[i] = alpha * query[i] + beta * feedback_sum;
    }
    return refined;
}

/// Text-to-vector contract. Implementations must be deterministic for
/// identical input within one session and return one vector per input text,
/// in input order.
class EmbedderClient {
public:
    virtual ~EmbedderClient() = default;
    virtual std::vector<Embedding> embed(const std::vector<std::string>& texts) = 0;
    virtual std::size_t dim() const = 0;

    Embedding embed_one(const std::string& text) {
        auto vecs = embed({text});
        if (vecs.size() != 1) {
            throw ClientError("embedder returned " + std::to_string(vecs.size()) +
                              " vectors for 1 input");
        }
        return std::move(vecs[0]);
    }
};

namespace detail {

inline std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL) {
    std::uint64_t hash = seed;
    for (unsigned char c : data) {
        hash ^= c;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

}  // namespace detail

/// Deterministic test-double encoder: feature-hashes tokens into dim buckets
/// and L2-normalizes the counts. Texts with no tokens map to the zero vector.
class HashingEmbedder : public EmbedderClient {
public:
    explicit HashingEmbedder(std::size_t dim, std::uint64_t seed = 0) : dim_(dim), seed_(seed) {
        if (dim_ == 0) {
            throw Error("embedder dimension must be positive");
        }
    }

    std::size_t dim() const override { return dim_; }

    std::vector<Embedding> embed(const std::vector<std::string>& texts) override {
        std::vector<Embedding> out;
        out.reserve(texts.size());
        for (const auto& text : texts) {
            Embedding vec(dim_, 0.0);
            for (const auto& token : tokenize(text)) {
                auto bucket = detail::fnv1a64(token, 0xcbf29ce484222325ULL ^ seed_) % dim_;
                vec[bucket] += 1.0;
            }
            double norm = l2_norm(vec);
            if (norm > 0.0) {
                for (double& v : vec) v /= norm;
            }
            out.push_back(std::move(vec));
        }
        return out;
    }

private:
    std::size_t dim_;
    std::uint64_t seed_;
};

/// Embed every document of a collection into a store (artifact generation
/// for desk-scale dense experiments).
inline EmbeddingStore embed_collection(const Collection& collection, EmbedderClient& embedder,
                                       Similarity kind = Similarity::Cosine) {
    EmbeddingStore store(embedder.dim(), kind);
    std::vector<std::string> texts;
    std::vector<std::string> ids;
    texts.reserve(collection.size());
    ids.reserve(collection.size());
    for (const auto& doc : collection.docs()) {
        ids.push_back(doc.doc_id);
        texts.push_back(doc.text);
    }
    auto vecs = embedder.embed(texts);
    if (vecs.size() != ids.size()) {
        throw ClientError("embedder returned " + std::to_string(vecs.size()) + " vectors for " +
                          std::to_string(ids.size()) + " inputs");
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
        store.add(ids[i], std::move(vecs[i]));
    }
    return store;
}

}  // namespace rflab
