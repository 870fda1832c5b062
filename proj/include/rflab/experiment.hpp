#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "rflab/corpus.hpp"
#include "rflab/dense.hpp"
#include "rflab/digest.hpp"
#include "rflab/errors.hpp"
#include "rflab/fusion.hpp"
#include "rflab/log.hpp"
#include "rflab/metrics.hpp"
#include "rflab/rewrite.hpp"
#include "rflab/sparse.hpp"
#include "rflab/toml_lite.hpp"
#include "rflab/trainer.hpp"

#ifdef RFLAB_HAS_HTTP
#include "rflab/http.hpp"
#endif

#include <json.hpp>

namespace rflab {

enum class RetrieverKind { Bm25, Dense };
enum class Method { None, Rm3, Vprf, GrfConcat, Gprf };
enum class FusionMode { Concat, DenseAggregate, Rrf };

inline RetrieverKind retriever_from_string(const std::string& name) {
    if (name == "bm25") return RetrieverKind::Bm25;
    if (name == "dense") return RetrieverKind::Dense;
    throw ConfigError("unknown retriever \"" + name + "\" (expected bm25 or dense)");
}

inline const char* to_string(RetrieverKind kind) {
    return kind == RetrieverKind::Bm25 ? "bm25" : "dense";
}

inline Method method_from_string(const std::string& name) {
    if (name == "none") return Method::None;
    if (name == "rm3") return Method::Rm3;
    if (name == "vprf") return Method::Vprf;
    if (name == "grf_concat") return Method::GrfConcat;
    if (name == "gprf") return Method::Gprf;
    throw ConfigError("unknown method \"" + name +
                      "\" (expected none, rm3, vprf, grf_concat, or gprf)");
}

inline const char* to_string(Method method) {
    switch (method) {
        case Method::None: return "none";
        case Method::Rm3: return "rm3";
        case Method::Vprf: return "vprf";
        case Method::GrfConcat: return "grf_concat";
        case Method::Gprf: return "gprf";
    }
    return "none";
}

inline FusionMode fusion_from_string(const std::string& name) {
    if (name == "concat") return FusionMode::Concat;
    if (name == "dense_aggregate") return FusionMode::DenseAggregate;
    if (name == "rrf") return FusionMode::Rrf;
    throw ConfigError("unknown fusion \"" + name +
                      "\" (expected concat, dense_aggregate, or rrf)");
}

inline const char* to_string(FusionMode fusion) {
    switch (fusion) {
        case FusionMode::Concat: return "concat";
        case FusionMode::DenseAggregate: return "dense_aggregate";
        case FusionMode::Rrf: return "rrf";
    }
    return "concat";
}

enum class ClientKind { Mock, MockOracle, MockEcho, Http };

inline ClientKind client_kind_from_string(const std::string& name) {
    if (name == "mock") return ClientKind::Mock;
    if (name == "mock-oracle") return ClientKind::MockOracle;
    if (name == "mock-echo") return ClientKind::MockEcho;
    if (name == "http") return ClientKind::Http;
    throw ConfigError("unknown client kind \"" + name +
                      "\" (expected mock, mock-oracle, mock-echo, or http)");
}

inline const char* to_string(ClientKind kind) {
    switch (kind) {
        case ClientKind::Mock: return "mock";
        case ClientKind::MockOracle: return "mock-oracle";
        case ClientKind::MockEcho: return "mock-echo";
        case ClientKind::Http: return "http";
    }
    return "mock";
}

enum class FactoryRetrieverPolicy { Bm25, Dense, Uniform };

inline FactoryRetrieverPolicy factory_policy_from_string(const std::string& name) {
    if (name == "bm25") return FactoryRetrieverPolicy::Bm25;
    if (name == "dense") return FactoryRetrieverPolicy::Dense;
    if (name == "uniform") return FactoryRetrieverPolicy::Uniform;
    throw ConfigError("unknown datafactory retriever policy \"" + name +
                      "\" (expected bm25, dense, or uniform)");
}

inline const char* to_string(FactoryRetrieverPolicy policy) {
    switch (policy) {
        case FactoryRetrieverPolicy::Bm25: return "bm25";
        case FactoryRetrieverPolicy::Dense: return "dense";
        case FactoryRetrieverPolicy::Uniform: return "uniform";
    }
    return "uniform";
}

/// Every knob of one experiment, resolved. Serialized verbatim into the
/// manifest so a run can be replayed from it.
struct ExperimentConfig {
    // corpus
    std::string collection_path;
    std::string collection_format = "tsv";
    std::string queries_path;
    std::string qrels_path;

    // retrieval
    RetrieverKind feedback_retriever = RetrieverKind::Bm25;
    RetrieverKind final_retriever = RetrieverKind::Bm25;
    std::size_t feedback_k = 10;
    std::size_t depth = 1000;
    Bm25Params bm25;
    std::string sparse_index_path;  // optional prebuilt artifact
    std::string dense_store_path;   // required for dense retrieval
    std::string similarity = "cosine";

    // pipeline
    Method method = Method::None;
    std::optional<FusionMode> fusion;  // default derived from final retriever
    Rm3Params rm3;
    double vprf_alpha = 1.0;
    double vprf_beta = 0.2;
    double rrf_k0 = 60.0;

    // rewriter client
    ClientKind rewriter_kind = ClientKind::Mock;
    std::uint64_t rewriter_seed = 0;
    std::size_t samples_m = 10;
    double temperature = 0.0;
    std::string rewriter_endpoint;
    std::string rewriter_model;
    std::string rewriter_api_key_env;
    std::size_t rewriter_max_retries = 3;
    double rewriter_timeout = 60.0;
    std::string prompt_override;  // required for grf_concat
    std::size_t passage_char_budget = 1000;

    // embedder client
    ClientKind embedder_kind = ClientKind::Mock;
    std::uint64_t embedder_seed = 0;
    std::size_t embedder_dim = 256;
    std::string embedder_endpoint;
    std::string embedder_model;
    std::string embedder_api_key_env;
    std::size_t embedder_batch = 64;
    std::size_t embedder_max_retries = 3;
    double embedder_timeout = 60.0;

    // metrics
    MetricCutoffs cutoffs;

    // data factory
    FactoryRetrieverPolicy factory_policy = FactoryRetrieverPolicy::Uniform;
    std::uint64_t factory_policy_seed = 0;
    double min_utility = 0.0;
    std::size_t sft_top_n = 30000;
    double feedback_noise_fraction = 0.0;
    std::uint64_t noise_seed = 0;

    // execution
    std::size_t jobs = 1;
    std::string output_dir = "out";
    std::string run_tag;  // defaults to the method name

    FusionMode resolved_fusion() const {
        if (fusion) return *fusion;
        return final_retriever == RetrieverKind::Dense ? FusionMode::DenseAggregate
                                                       : FusionMode::Concat;
    }

    std::string resolved_tag() const { return run_tag.empty() ? to_string(method) : run_tag; }

    bool needs_dense() const {
        return final_retriever == RetrieverKind::Dense ||
               feedback_retriever == RetrieverKind::Dense || method == Method::Vprf ||
               resolved_fusion() == FusionMode::DenseAggregate;
    }

    bool needs_rewriter() const { return method == Method::GrfConcat || method == Method::Gprf; }

    /// Cross-field checks; throws ConfigError before any work happens.
    void validate() const {
        if (collection_path.empty()) throw ConfigError("corpus.collection is required");
        if (queries_path.empty()) throw ConfigError("corpus.queries is required");
        if (qrels_path.empty()) throw ConfigError("corpus.qrels is required");
        if (feedback_k < 1) throw ConfigError("retrieval.k must be >= 1");
        if (samples_m < 1) throw ConfigError("rewriter.m must be >= 1");
        if (depth < 1) throw ConfigError("retrieval.depth must be >= 1");
        if (method == Method::Rm3 && final_retriever != RetrieverKind::Bm25) {
            throw ConfigError("method rm3 requires final retriever bm25");
        }
        if (method == Method::Vprf && final_retriever != RetrieverKind::Dense) {
            throw ConfigError("method vprf requires final retriever dense");
        }
        if (resolved_fusion() == FusionMode::DenseAggregate &&
            final_retriever != RetrieverKind::Dense) {
            throw ConfigError("fusion dense_aggregate requires final retriever dense");
        }
        if (method == Method::GrfConcat && prompt_override.empty()) {
            throw ConfigError("method grf_concat requires rewriter.prompt_override");
        }
        if (needs_dense() && dense_store_path.empty()) {
            throw ConfigError("dense retrieval requires retrieval.dense_store");
        }
        if (needs_rewriter() && rewriter_kind == ClientKind::Http && rewriter_endpoint.empty()) {
            throw ConfigError("rewriter.kind http requires rewriter.endpoint");
        }
        if (needs_dense() && embedder_kind == ClientKind::Http && embedder_endpoint.empty()) {
            throw ConfigError("embedder.kind http requires embedder.endpoint");
        }
        if (rm3.alpha < 0.0 || rm3.alpha > 1.0) {
            throw ConfigError("rm3.alpha must lie in [0, 1]");
        }
        if (feedback_noise_fraction < 0.0 || feedback_noise_fraction > 1.0) {
            throw ConfigError("datafactory.noise_fraction must lie in [0, 1]");
        }
        similarity_from_string(similarity);
    }

    nlohmann::json to_json() const {
        return nlohmann::json{
            {"corpus",
             {{"collection", collection_path},
              {"format", collection_format},
              {"queries", queries_path},
              {"qrels", qrels_path}}},
            {"retrieval",
             {{"feedback", to_string(feedback_retriever)},
              {"final", to_string(final_retriever)},
              {"k", feedback_k},
              {"depth", depth},
              {"bm25_k1", bm25.k1},
              {"bm25_b", bm25.b},
              {"index", sparse_index_path},
              {"dense_store", dense_store_path},
              {"similarity", similarity}}},
            {"pipeline",
             {{"method", to_string(method)},
              {"fusion", to_string(resolved_fusion())},
              {"rm3_alpha", rm3.alpha},
              {"rm3_terms", rm3.n_terms},
              {"rm3_include_query_terms", rm3.include_query_terms},
              {"vprf_alpha", vprf_alpha},
              {"vprf_beta", vprf_beta},
              {"rrf_k0", rrf_k0}}},
            {"rewriter",
             {{"kind", to_string(rewriter_kind)},
              {"seed", rewriter_seed},
              {"m", samples_m},
              {"temperature", temperature},
              {"endpoint", rewriter_endpoint},
              {"model", rewriter_model},
              {"api_key_env", rewriter_api_key_env},
              {"max_retries", rewriter_max_retries},
              {"timeout", rewriter_timeout},
              {"prompt_override", prompt_override},
              {"passage_chars", passage_char_budget}}},
            {"embedder",
             {{"kind", to_string(embedder_kind)},
              {"seed", embedder_seed},
              {"dim", embedder_dim},
              {"endpoint", embedder_endpoint},
              {"model", embedder_model},
              {"api_key_env", embedder_api_key_env},
              {"batch", embedder_batch},
              {"max_retries", embedder_max_retries},
              {"timeout", embedder_timeout}}},
            {"metrics", {{"ndcg_k", cutoffs.ndcg_k}, {"recall_k", cutoffs.recall_k}}},
            {"datafactory",
             {{"retriever", to_string(factory_policy)},
              {"policy_seed", factory_policy_seed},
              {"min_utility", min_utility},
              {"top_n", sft_top_n},
              {"noise_fraction", feedback_noise_fraction},
              {"noise_seed", noise_seed}}},
            {"execution",
             {{"jobs", jobs}, {"output_dir", output_dir}, {"tag", resolved_tag()}}},
        };
    }

    static ExperimentConfig from_json(const nlohmann::json& j) {
        ExperimentConfig cfg;
        const auto& corpus = j.at("corpus");
        cfg.collection_path = corpus.at("collection").get<std::string>();
        cfg.collection_format = corpus.at("format").get<std::string>();
        cfg.queries_path = corpus.at("queries").get<std::string>();
        cfg.qrels_path = corpus.at("qrels").get<std::string>();
        const auto& retrieval = j.at("retrieval");
        cfg.feedback_retriever = retriever_from_string(retrieval.at("feedback").get<std::string>());
        cfg.final_retriever = retriever_from_string(retrieval.at("final").get<std::string>());
        cfg.feedback_k = retrieval.at("k").get<std::size_t>();
        cfg.depth = retrieval.at("depth").get<std::size_t>();
        cfg.bm25.k1 = retrieval.at("bm25_k1").get<double>();
        cfg.bm25.b = retrieval.at("bm25_b").get<double>();
        cfg.sparse_index_path = retrieval.at("index").get<std::string>();
        cfg.dense_store_path = retrieval.at("dense_store").get<std::string>();
        cfg.similarity = retrieval.at("similarity").get<std::string>();
        const auto& pipeline = j.at("pipeline");
        cfg.method = method_from_string(pipeline.at("method").get<std::string>());
        cfg.fusion = fusion_from_string(pipeline.at("fusion").get<std::string>());
        cfg.rm3.alpha = pipeline.at("rm3_alpha").get<double>();
        cfg.rm3.n_terms = pipeline.at("rm3_terms").get<std::size_t>();
        cfg.rm3.include_query_terms = pipeline.at("rm3_include_query_terms").get<bool>();
        cfg.vprf_alpha = pipeline.at("vprf_alpha").get<double>();
        cfg.vprf_beta = pipeline.at("vprf_beta").get<double>();
        cfg.rrf_k0 = pipeline.at("rrf_k0").get<double>();
        const auto& rewriter = j.at("rewriter");
        cfg.rewriter_kind = client_kind_from_string(rewriter.at("kind").get<std::string>());
        cfg.rewriter_seed = rewriter.at("seed").get<std::uint64_t>();
        cfg.samples_m = rewriter.at("m").get<std::size_t>();
        cfg.temperature = rewriter.at("temperature").get<double>();
        cfg.rewriter_endpoint = rewriter.at("endpoint").get<std::string>();
        cfg.rewriter_model = rewriter.at("model").get<std::string>();
        cfg.rewriter_api_key_env = rewriter.at("api_key_env").get<std::string>();
        cfg.rewriter_max_retries = rewriter.at("max_retries").get<std::size_t>();
        cfg.rewriter_timeout = rewriter.at("timeout").get<double>();
        cfg.prompt_override = rewriter.at("prompt_override").get<std::string>();
        cfg.passage_char_budget = rewriter.at("passage_chars").get<std::size_t>();
        const auto& embedder = j.at("embedder");
        cfg.embedder_kind = client_kind_from_string(embedder.at("kind").get<std::string>());
        cfg.embedder_seed = embedder.at("seed").get<std::uint64_t>();
        cfg.embedder_dim = embedder.at("dim").get<std::size_t>();
        cfg.embedder_endpoint = embedder.at("endpoint").get<std::string>();
        cfg.embedder_model = embedder.at("model").get<std::string>();
        cfg.embedder_api_key_env = embedder.at("api_key_env").get<std::string>();
        cfg.embedder_batch = embedder.at("batch").get<std::size_t>();
        cfg.embedder_max_retries = embedder.at("max_retries").get<std::size_t>();
        cfg.embedder_timeout = embedder.at("timeout").get<double>();
        const auto& metrics = j.at("metrics");
        cfg.cutoffs.ndcg_k = metrics.at("ndcg_k").get<std::size_t>();
        cfg.cutoffs.recall_k = metrics.at("recall_k").get<std::size_t>();
        const auto& factory = j.at("datafactory");
        cfg.factory_policy = factory_policy_from_string(factory.at("retriever").get<std::string>());
        cfg.factory_policy_seed = factory.at("policy_seed").get<std::uint64_t>();
        cfg.min_utility = factory.at("min_utility").get<double>();
        cfg.sft_top_n = factory.at("top_n").get<std::size_t>();
        cfg.feedback_noise_fraction = factory.at("noise_fraction").get<double>();
        cfg.noise_seed = factory.at("noise_seed").get<std::uint64_t>();
        const auto& execution = j.at("execution");
        cfg.jobs = execution.at("jobs").get<std::size_t>();
        cfg.output_dir = execution.at("output_dir").get<std::string>();
        cfg.run_tag = execution.at("tag").get<std::string>();
        return cfg;
    }

    /// Read config keys from a TOML file; missing keys keep their defaults.
    static ExperimentConfig from_toml(const TomlTable& t) {
        ExperimentConfig cfg;
        cfg.collection_path = t.get_string("corpus.collection");
        cfg.collection_format = t.get_string("corpus.format", cfg.collection_format);
        cfg.queries_path = t.get_string("corpus.queries");
        cfg.qrels_path = t.get_string("corpus.qrels");
        if (t.contains("retrieval.feedback")) {
            cfg.feedback_retriever = retriever_from_string(t.get_string("retrieval.feedback"));
        }
        if (t.contains("retrieval.final")) {
            cfg.final_retriever = retriever_from_string(t.get_string("retrieval.final"));
        }
        cfg.feedback_k = static_cast<std::size_t>(t.get_int("retrieval.k", cfg.feedback_k));
        cfg.depth = static_cast<std::size_t>(t.get_int("retrieval.depth", cfg.depth));
        cfg.bm25.k1 = t.get_double("retrieval.bm25_k1", cfg.bm25.k1);
        cfg.bm25.b = t.get_double("retrieval.bm25_b", cfg.bm25.b);
        cfg.sparse_index_path = t.get_string("retrieval.index", cfg.sparse_index_path);
        cfg.dense_store_path = t.get_string("retrieval.dense_store", cfg.dense_store_path);
        cfg.similarity = t.get_string("retrieval.similarity", cfg.similarity);
        if (t.contains("method")) cfg.method = method_from_string(t.get_string("method"));
        if (t.contains("fusion")) cfg.fusion = fusion_from_string(t.get_string("fusion"));
        cfg.rm3.alpha = t.get_double("rm3.alpha", cfg.rm3.alpha);
        cfg.rm3.n_terms = static_cast<std::size_t>(t.get_int("rm3.n_terms", cfg.rm3.n_terms));
        cfg.rm3.include_query_terms =
            t.get_bool("rm3.include_query_terms", cfg.rm3.include_query_terms);
        cfg.vprf_alpha = t.get_double("vprf.alpha", cfg.vprf_alpha);
        cfg.vprf_beta = t.get_double("vprf.beta", cfg.vprf_beta);
        cfg.rrf_k0 = t.get_double("rrf.k0", cfg.rrf_k0);
        if (t.contains("rewriter.kind")) {
            cfg.rewriter_kind = client_kind_from_string(t.get_string("rewriter.kind"));
        }
        cfg.rewriter_seed = static_cast<std::uint64_t>(t.get_int("rewriter.seed", 0));
        cfg.samples_m = static_cast<std::size_t>(t.get_int("rewriter.m", cfg.samples_m));
        cfg.temperature = t.get_double("rewriter.temperature", cfg.temperature);
        cfg.rewriter_endpoint = t.get_string("rewriter.endpoint", cfg.rewriter_endpoint);
        cfg.rewriter_model = t.get_string("rewriter.model", cfg.rewriter_model);
        cfg.rewriter_api_key_env = t.get_string("rewriter.api_key_env", cfg.rewriter_api_key_env);
        cfg.rewriter_max_retries =
            static_cast<std::size_t>(t.get_int("rewriter.max_retries", cfg.rewriter_max_retries));
        cfg.rewriter_timeout = t.get_double("rewriter.timeout", cfg.rewriter_timeout);
        cfg.prompt_override = t.get_string("rewriter.prompt_override", cfg.prompt_override);
        cfg.passage_char_budget =
            static_cast<std::size_t>(t.get_int("rewriter.passage_chars", cfg.passage_char_budget));
        if (t.contains("embedder.kind")) {
            cfg.embedder_kind = client_kind_from_string(t.get_string("embedder.kind"));
        }
        cfg.embedder_seed = static_cast<std::uint64_t>(t.get_int("embedder.seed", 0));
        cfg.embedder_dim = static_cast<std::size_t>(t.get_int("embedder.dim", cfg.embedder_dim));
        cfg.embedder_endpoint = t.get_string("embedder.endpoint", cfg.embedder_endpoint);
        cfg.embedder_model = t.get_string("embedder.model", cfg.embedder_model);
        cfg.embedder_api_key_env = t.get_string("embedder.api_key_env", cfg.embedder_api_key_env);
        cfg.embedder_batch =
            static_cast<std::size_t>(t.get_int("embedder.batch", cfg.embedder_batch));
        cfg.embedder_max_retries =
            static_cast<std::size_t>(t.get_int("embedder.max_retries", cfg.embedder_max_retries));
        cfg.embedder_timeout = t.get_double("embedder.timeout", cfg.embedder_timeout);
        cfg.cutoffs.ndcg_k = static_cast<std::size_t>(t.get_int("metrics.ndcg_k", cfg.cutoffs.ndcg_k));
        cfg.cutoffs.recall_k =
            static_cast<std::size_t>(t.get_int("metrics.recall_k", cfg.cutoffs.recall_k));
        if (t.contains("datafactory.retriever")) {
            cfg.factory_policy = factory_policy_from_string(t.get_string("datafactory.retriever"));
        }
        cfg.factory_policy_seed =
            static_cast<std::uint64_t>(t.get_int("datafactory.policy_seed", 0));
        cfg.min_utility = t.get_double("datafactory.min_utility", cfg.min_utility);
        cfg.sft_top_n = static_cast<std::size_t>(t.get_int("datafactory.top_n", cfg.sft_top_n));
        cfg.feedback_noise_fraction =
            t.get_double("datafactory.noise_fraction", cfg.feedback_noise_fraction);
        cfg.noise_seed = static_cast<std::uint64_t>(t.get_int("datafactory.noise_seed", 0));
        cfg.jobs = static_cast<std::size_t>(t.get_int("jobs", cfg.jobs));
        cfg.output_dir = t.get_string("output_dir", cfg.output_dir);
        cfg.run_tag = t.get_string("tag", cfg.run_tag);
        return cfg;
    }
};

namespace detail {

template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
    jobs = std::min(std::max<std::size_t>(jobs, 1), std::max<std::size_t>(n, 1));
    if (jobs <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::mutex error_mutex;
    std::exception_ptr first_error;
    std::vector<std::thread> workers;
    workers.reserve(jobs);
    for (std::size_t w = 0; w < jobs; ++w) {
        workers.emplace_back([&] {
            while (!failed.load(std::memory_order_relaxed)) {
                std::size_t i = next.fetch_add(1);
                if (i >= n) break;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                    failed.store(true, std::memory_order_relaxed);
                }
            }
        });
    }
    for (auto& worker : workers) worker.join();
    if (first_error) std::rethrow_exception(first_error);
}

/// Deterministic Fisher-Yates; std::shuffle's algorithm is unspecified.
inline void deterministic_shuffle(std::vector<std::size_t>& items, std::uint64_t seed) {
    std::uint64_t state = seed ? seed : 0x2545f4914f6cdd1dULL;
    auto next_u64 = [&state]() {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        return state;
    };
    for (std::size_t i = items.size(); i > 1; --i) {
        std::size_t j = next_u64() % i;
        std::swap(items[i - 1], items[j]);
    }
}

}  // namespace detail

/// Immutable retrieval state shared by all worker threads of one run.
struct RetrievalContext {
    Collection collection;
    QuerySet queries;
    QrelsTable qrels;
    std::optional<InvertedIndex> sparse_index;
    std::optional<EmbeddingStore> dense_store;
    std::shared_ptr<EmbedderClient> embedder;
    std::shared_ptr<RewriterClient> rewriter;
    Bm25Params bm25;

    RankedList retrieve_text(RetrieverKind kind, const std::string& text, std::size_t depth,
                             const std::string& tag) const {
        if (kind == RetrieverKind::Bm25) {
            if (!sparse_index) throw Error("sparse index not loaded");
            return search_sparse(*sparse_index, QueryTermModel::from_text(text), depth, bm25, tag);
        }
        if (!dense_store || !embedder) throw Error("dense store or embedder not loaded");
        return dense_store->search(embedder->embed_one(text), depth, tag);
    }

    RankedList retrieve_vector(const Embedding& vec, std::size_t depth,
                               const std::string& tag) const {
        if (!dense_store) throw Error("dense store not loaded");
        return dense_store->search(vec, depth, tag);
    }

    std::vector<std::string> passages_for(const FeedbackSet& feedback,
                                          std::size_t char_budget) const {
        std::vector<std::string> passages;
        passages.reserve(feedback.docs.size());
        for (const auto& doc : feedback.docs) {
            passages.push_back(collection.at(doc.doc_id).text);
        }
        return truncate_passages(passages, char_budget);
    }
};

/// Build the oracle rewrite map: each query maps to the text of its
/// highest-graded relevant document.
inline std::unordered_map<std::string, std::string> oracle_rewrites(const Collection& collection,
                                                                    const QuerySet& queries,
                                                                    const QrelsTable& qrels) {
    std::unordered_map<std::string, std::string> rewrites;
    for (const auto& query : queries.queries()) {
        const std::string* best_doc = nullptr;
        int best_grade = 0;
        for (const auto& [doc_id, grade] : qrels.judged(query.query_id)) {
            if (grade > best_grade && collection.find(doc_id)) {
                best_grade = grade;
                best_doc = &collection.find(doc_id)->text;
            }
        }
        if (best_doc) {
            rewrites.emplace(query.text, *best_doc);
        }
    }
    return rewrites;
}

inline std::shared_ptr<RewriterClient> make_rewriter(const ExperimentConfig& cfg,
                                                     const Collection& collection,
                                                     const QuerySet& queries,
                                                     const QrelsTable& qrels);
inline std::shared_ptr<EmbedderClient> make_embedder(const ExperimentConfig& cfg);

/// Load everything an experiment needs, once, up front.
inline RetrievalContext load_context(const ExperimentConfig& cfg) {
    cfg.validate();
    RetrievalContext ctx;
    ctx.collection =
        load_collection(cfg.collection_path, collection_format_from_string(cfg.collection_format));
    ctx.queries = load_queries(cfg.queries_path);
    ctx.qrels = load_qrels(cfg.qrels_path);
    ctx.bm25 = cfg.bm25;
    if (!cfg.sparse_index_path.empty()) {
        ctx.sparse_index = InvertedIndex::load(cfg.sparse_index_path);
    } else {
        ctx.sparse_index = InvertedIndex::build(ctx.collection);
    }
    // A configured store is loaded even when the method itself is sparse:
    // the data factory's retriever policy may still pick the dense side.
    if (cfg.needs_dense() || !cfg.dense_store_path.empty()) {
        ctx.dense_store =
            load_embeddings(cfg.dense_store_path, similarity_from_string(cfg.similarity));
        ctx.embedder = make_embedder(cfg);
        if (ctx.embedder->dim() != ctx.dense_store->dim()) {
            throw ConfigError("embedder dimension " + std::to_string(ctx.embedder->dim()) +
                              " does not match dense store dimension " +
                              std::to_string(ctx.dense_store->dim()));
        }
    }
    if (cfg.needs_rewriter()) {
        ctx.rewriter = make_rewriter(cfg, ctx.collection, ctx.queries, ctx.qrels);
    }
    return ctx;
}

inline std::shared_ptr<EmbedderClient> make_embedder(const ExperimentConfig& cfg) {
    if (cfg.embedder_kind == ClientKind::Mock) {
        return std::make_shared<HashingEmbedder>(cfg.embedder_dim, cfg.embedder_seed);
    }
    if (cfg.embedder_kind != ClientKind::Http) {
        throw ConfigError("embedder kind must be mock or http");
    }
#ifdef RFLAB_HAS_HTTP
    HttpClientOptions options;
    options.endpoint = cfg.embedder_endpoint;
    options.model = cfg.embedder_model;
    options.api_key_env = cfg.embedder_api_key_env;
    options.max_retries = cfg.embedder_max_retries;
    options.timeout_seconds = cfg.embedder_timeout;
    return std::make_shared<HttpEmbedder>(options, cfg.embedder_dim, cfg.embedder_batch);
#else
    throw ConfigError("this build has no HTTP client support");
#endif
}

inline std::shared_ptr<RewriterClient> make_rewriter(const ExperimentConfig& cfg,
                                                     const Collection& collection,
                                                     const QuerySet& queries,
                                                     const QrelsTable& qrels) {
    switch (cfg.rewriter_kind) {
        case ClientKind::Mock:
            return std::make_shared<SeededMockRewriter>(cfg.rewriter_seed);
        case ClientKind::MockOracle:
            return std::make_shared<OracleRewriter>(oracle_rewrites(collection, queries, qrels));
        case ClientKind::MockEcho:
            return std::make_shared<EchoRewriter>();
        case ClientKind::Http: {
#ifdef RFLAB_HAS_HTTP
            HttpClientOptions options;
            options.endpoint = cfg.rewriter_endpoint;
            options.model = cfg.rewriter_model;
            options.api_key_env = cfg.rewriter_api_key_env;
            options.max_retries = cfg.rewriter_max_retries;
            options.timeout_seconds = cfg.rewriter_timeout;
            return std::make_shared<HttpChatRewriter>(options);
#else
            throw ConfigError("this build has no HTTP client support");
#endif
        }
    }
    throw ConfigError("unhandled rewriter kind");
}

/// Replace a deterministic share of feedback passages with the text of
/// random collection documents. Positions and replacements derive from
/// (seed, query_id) only, so parallel execution cannot change them.
inline std::vector<std::string> inject_passage_noise(const std::vector<std::string>& passages,
                                                     double fraction, std::uint64_t seed,
                                                     const std::string& query_id,
                                                     const Collection& collection) {
    if (fraction <= 0.0 || passages.empty()) {
        return passages;
    }
    auto replace_count = static_cast<std::size_t>(
        std::llround(fraction * static_cast<double>(passages.size())));
    if (replace_count == 0) {
        return passages;
    }
    std::uint64_t per_query_seed = detail::fnv1a64(query_id, 0x51ed270b76a4f5cdULL ^ seed);
    std::vector<std::size_t> positions(passages.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
    detail::deterministic_shuffle(positions, per_query_seed);

    std::vector<std::string> noised = passages;
    std::uint64_t state = per_query_seed ^ 0x9e3779b97f4a7c15ULL;
    for (std::size_t r = 0; r < std::min(replace_count, positions.size()); ++r) {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        const auto& doc = collection.docs()[state % collection.size()];
        noised[positions[r]] = doc.text;
    }
    return noised;
}

/// The per-query pipeline shared by run_experiment and the data factory:
/// first-stage feedback, the configured feedback method, final retrieval.
inline RankedList run_pipeline_for_query(const ExperimentConfig& cfg, const RetrievalContext& ctx,
                                         const Query& query) {
    const std::string tag = cfg.resolved_tag();
    if (cfg.method == Method::None) {
        return ctx.retrieve_text(cfg.final_retriever, query.text, cfg.depth, tag)
            .with_query_id(query.query_id);
    }

    if (cfg.method == Method::Rm3) {
        auto first = ctx.retrieve_text(cfg.feedback_retriever, query.text, cfg.depth, tag)
                         .with_query_id(query.query_id);
        auto feedback = FeedbackSet::from_ranking(first, cfg.feedback_k);
        if (feedback.docs.empty()) {
            log_warn("no feedback documents for query \"" + query.query_id +
                     "\"; keeping the original query");
            return search_sparse(*ctx.sparse_index, QueryTermModel::from_text(query.text),
                                 cfg.depth, ctx.bm25, tag)
                .with_query_id(query.query_id);
        }
        auto original = QueryTermModel::from_text(query.text).normalized();
        auto expanded = rm3_expand(*ctx.sparse_index, original, feedback, cfg.rm3);
        return search_sparse(*ctx.sparse_index, expanded, cfg.depth, ctx.bm25, tag)
            .with_query_id(query.query_id);
    }

    if (cfg.method == Method::Vprf) {
        auto first = ctx.retrieve_text(cfg.feedback_retriever, query.text, cfg.depth, tag)
                         .with_query_id(query.query_id);
        auto feedback = FeedbackSet::from_ranking(first, cfg.feedback_k);
        std::vector<Embedding> feedback_vecs;
        feedback_vecs.reserve(feedback.docs.size());
        for (const auto& doc : feedback.docs) {
            feedback_vecs.push_back(ctx.dense_store->at(doc.doc_id));
        }
        Embedding query_vec = ctx.embedder->embed_one(query.text);
        Embedding refined = vprf_refine(query_vec, feedback_vecs, cfg.vprf_alpha, cfg.vprf_beta);
        return ctx.retrieve_vector(refined, cfg.depth, tag).with_query_id(query.query_id);
    }

    // Generative methods.
    std::vector<RewriteCandidate> candidates;
    if (cfg.method == Method::GrfConcat) {
        candidates = generate_pseudo_docs(*ctx.rewriter, query, cfg.prompt_override, cfg.samples_m,
                                          cfg.temperature);
    } else {  // Method::Gprf
        auto first = ctx.retrieve_text(cfg.feedback_retriever, query.text, cfg.depth, tag)
                         .with_query_id(query.query_id);
        auto feedback = FeedbackSet::from_ranking(first, cfg.feedback_k);
        RewriteRequest request;
        request.query = query;
        request.passages = ctx.passages_for(feedback, cfg.passage_char_budget);
        if (cfg.feedback_noise_fraction > 0.0) {
            request.passages = inject_passage_noise(request.passages, cfg.feedback_noise_fraction,
                                                    cfg.noise_seed, query.query_id, ctx.collection);
        }
        request.m = cfg.samples_m;
        request.temperature = cfg.temperature;
        candidates = generate_rewrites(*ctx.rewriter, request);
    }

    switch (cfg.resolved_fusion()) {
        case FusionMode::Concat: {
            Query fused = fuse_concat(query, candidates);
            return ctx.retrieve_text(cfg.final_retriever, fused.text, cfg.depth, tag)
                .with_query_id(query.query_id);
        }
        case FusionMode::DenseAggregate: {
            Embedding refined =
                fuse_dense(*ctx.embedder, query, candidates, cfg.vprf_alpha, cfg.vprf_beta);
            return ctx.retrieve_vector(refined, cfg.depth, tag).with_query_id(query.query_id);
        }
        case FusionMode::Rrf: {
            std::vector<RankedList> lists;
            lists.push_back(ctx.retrieve_text(cfg.final_retriever, query.text, cfg.depth, tag)
                                .with_query_id(query.query_id));
            for (const auto& candidate : candidates) {
                lists.push_back(
                    ctx.retrieve_text(cfg.final_retriever, candidate.text, cfg.depth, tag)
                        .with_query_id(query.query_id));
            }
            return rrf_fuse(lists, cfg.rrf_k0, tag).top(cfg.depth);
        }
    }
    throw Error("unhandled fusion mode");
}

struct ExperimentOutcome {
    std::vector<RankedList> runs;
    MetricReport report;
    std::filesystem::path run_path;
    std::filesystem::path report_tsv_path;
    std::filesystem::path report_json_path;
    std::filesystem::path manifest_path;
};

namespace detail {

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    auto out = open_output(path.string());
    out << content;
}

inline nlohmann::json digest_map(const std::vector<std::string>& paths) {
    nlohmann::json digests = nlohmann::json::object();
    for (const auto& path : paths) {
        if (!path.empty()) {
            digests[path] = sha256_file(path);
        }
    }
    return digests;
}

inline void write_manifest(const std::filesystem::path& path, const std::string& command,
                           const ExperimentConfig& cfg,
                           const std::vector<std::string>& output_files) {
    std::vector<std::string> inputs = {cfg.collection_path, cfg.queries_path, cfg.qrels_path,
                                       cfg.sparse_index_path, cfg.dense_store_path};
    nlohmann::json manifest = {
        {"format", "rflab-manifest/1"},
        {"command", command},
        {"config", cfg.to_json()},
        {"inputs", digest_map(inputs)},
        {"outputs", digest_map(output_files)},
    };
    write_text_file(path, manifest.dump(2) + "\n");
}

}  // namespace detail

/// Execute one experiment: first-stage retrieval, the configured feedback
/// method, final retrieval, then a TREC run file, a metric report, and a
/// manifest under output_dir. Deterministic given mock clients and a seed.
inline ExperimentOutcome run_experiment(const ExperimentConfig& cfg) {
    RetrievalContext ctx = load_context(cfg);
    const auto& queries = ctx.queries.queries();

    std::vector<RankedList> runs(queries.size());
    detail::parallel_for(queries.size(), cfg.jobs, [&](std::size_t i) {
        runs[i] = run_pipeline_for_query(cfg, ctx, queries[i]);
    });

    std::vector<std::string> query_ids;
    query_ids.reserve(queries.size());
    for (const auto& query : queries) query_ids.push_back(query.query_id);

    ExperimentOutcome outcome;
    outcome.report = evaluate_run(runs, ctx.qrels, query_ids, cfg.cutoffs);
    outcome.runs = std::move(runs);

    namespace fs = std::filesystem;
    fs::path out_dir(cfg.output_dir);
    fs::create_directories(out_dir / "runs");
    fs::create_directories(out_dir / "reports");
    const std::string tag = cfg.resolved_tag();
    outcome.run_path = out_dir / "runs" / (tag + ".run");
    outcome.report_tsv_path = out_dir / "reports" / (tag + ".tsv");
    outcome.report_json_path = out_dir / "reports" / (tag + ".json");
    outcome.manifest_path = out_dir / "manifest.json";

    write_run(outcome.run_path.string(), outcome.runs);
    detail::write_text_file(outcome.report_tsv_path, outcome.report.to_tsv());
    detail::write_text_file(outcome.report_json_path, outcome.report.to_json().dump(2) + "\n");
    detail::write_manifest(outcome.manifest_path, "retrieve", cfg,
                           {outcome.run_path.string(), outcome.report_tsv_path.string(),
                            outcome.report_json_path.string()});
    log_info("experiment \"" + tag + "\": mean ndcg@" + std::to_string(cfg.cutoffs.ndcg_k) + " = " +
             format_run_score(outcome.report.mean_ndcg));
    return outcome;
}

struct DatafactoryOutcome {
    std::vector<SftRecord> exported;
    std::size_t queries_processed = 0;
    std::size_t queries_failed = 0;
    std::filesystem::path sft_path;
    std::filesystem::path audit_path;
    std::filesystem::path manifest_path;
};

/// Rejection-sampling data factory: per query, k feedback passages, m
/// candidates, per-candidate utilities, argmax selection, then the filtered
/// SFT export plus a full utility audit. Per-query failures are logged and
/// skipped; only a total wipeout is an error.
inline DatafactoryOutcome run_datafactory(const ExperimentConfig& cfg) {
    if (!cfg.needs_rewriter()) {
        throw ConfigError("the data factory requires a generative method (gprf or grf_concat)");
    }
    RetrievalContext ctx = load_context(cfg);
    const auto& queries = ctx.queries.queries();

    auto pick_retriever = [&](const Query& query) {
        switch (cfg.factory_policy) {
            case FactoryRetrieverPolicy::Bm25: return RetrieverKind::Bm25;
            case FactoryRetrieverPolicy::Dense: return RetrieverKind::Dense;
            case FactoryRetrieverPolicy::Uniform: break;
        }
        if (!ctx.dense_store) return RetrieverKind::Bm25;
        std::uint64_t h =
            detail::fnv1a64(query.query_id, 0xa5b85c5e198ed849ULL ^ cfg.factory_policy_seed);
        return (h & 1) ? RetrieverKind::Dense : RetrieverKind::Bm25;
    };

    struct QueryResult {
        bool ok = false;
        std::string query_id;
        SftRecord record;
        std::vector<std::pair<std::size_t, double>> audit;  // (sample_index, utility)
        std::vector<std::string> candidate_texts;
    };
    std::vector<QueryResult> results(queries.size());

    detail::parallel_for(queries.size(), cfg.jobs, [&](std::size_t i) {
        const Query& query = queries[i];
        QueryResult& result = results[i];
        result.query_id = query.query_id;
        try {
            RetrieverKind kind = pick_retriever(query);
            const std::string tag = to_string(kind);
            RankedList baseline =
                ctx.retrieve_text(kind, query.text, cfg.depth, tag).with_query_id(query.query_id);
            auto feedback = FeedbackSet::from_ranking(baseline, cfg.feedback_k);

            RewriteRequest request;
            request.query = query;
            request.passages = ctx.passages_for(feedback, cfg.passage_char_budget);
            if (cfg.feedback_noise_fraction > 0.0) {
                request.passages =
                    inject_passage_noise(request.passages, cfg.feedback_noise_fraction,
                                         cfg.noise_seed, query.query_id, ctx.collection);
            }
            request.m = cfg.samples_m;
            request.temperature = cfg.temperature;
            auto candidates = generate_rewrites(*ctx.rewriter, request);

            auto retrieve = [&](const std::string& text) {
                return ctx.retrieve_text(kind, text, cfg.depth, tag);
            };
            auto rejection = rejection_sample_best(candidates, retrieve, baseline, ctx.qrels,
                                                   cfg.cutoffs.ndcg_k);

            result.record.instruction = kRewriteInstruction;
            result.record.query = query.text;
            result.record.feedback_passages = request.passages;
            result.record.target = rejection.best.text;
            result.record.utility = rejection.utilities[rejection.best_index];
            result.record.retriever_tag = tag;
            result.record.query_id = query.query_id;
            for (std::size_t c = 0; c < candidates.size(); ++c) {
                result.audit.emplace_back(candidates[c].sample_index, rejection.utilities[c]);
                result.candidate_texts.push_back(candidates[c].text);
            }
            result.ok = true;
        } catch (const std::exception& e) {
            log_warn("data factory skipping query \"" + query.query_id + "\": " + e.what());
        }
    });

    DatafactoryOutcome outcome;
    std::vector<SftRecord> records;
    for (auto& result : results) {
        if (result.ok) {
            records.push_back(std::move(result.record));
            ++outcome.queries_processed;
        } else {
            ++outcome.queries_failed;
        }
    }
    if (outcome.queries_processed == 0) {
        throw Error("data factory failed for every query");
    }
    outcome.exported = build_sft_dataset(std::move(records), cfg.sft_top_n, cfg.min_utility);

    namespace fs = std::filesystem;
    fs::path out_dir(cfg.output_dir);
    fs::create_directories(out_dir / "datasets");
    outcome.sft_path = out_dir / "datasets" / "sft.jsonl";
    outcome.audit_path = out_dir / "datasets" / "utilities.tsv";
    outcome.manifest_path = out_dir / "manifest.json";

    {
        auto out = detail::open_output(outcome.sft_path.string());
        write_sft_jsonl(out, outcome.exported);
    }
    {
        auto out = detail::open_output(outcome.audit_path.string());
        out << "query_id\tsample_index\tutility\tcandidate\n";
        for (std::size_t i = 0; i < results.size(); ++i) {
            const auto& result = results[i];
            if (!result.ok) continue;
            for (std::size_t c = 0; c < result.audit.size(); ++c) {
                std::string text = result.candidate_texts[c];
                for (char& ch : text) {
                    if (ch == '\t' || ch == '\n' || ch == '\r') ch = ' ';
                }
                out << result.query_id << "\t" << result.audit[c].first << "\t"
                    << format_run_score(result.audit[c].second) << "\t" << text << "\n";
            }
        }
    }
    detail::write_manifest(outcome.manifest_path, "datafactory", cfg,
                           {outcome.sft_path.string(), outcome.audit_path.string()});
    log_info("data factory exported " + std::to_string(outcome.exported.size()) + " of " +
             std::to_string(outcome.queries_processed) + " records");
    return outcome;
}

}  // namespace rflab
