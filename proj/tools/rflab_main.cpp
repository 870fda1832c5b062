#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rflab/corpus.hpp"
#include "rflab/dense.hpp"
#include "rflab/errors.hpp"
#include "rflab/experiment.hpp"
#include "rflab/metrics.hpp"
#include "rflab/rewrite.hpp"
#include "rflab/sparse.hpp"
#include "rflab/trainer.hpp"

namespace {

using rflab::ExperimentConfig;

/// Flag values for one experiment; only flags the user actually set override
/// the config file (flags win over TOML, TOML over defaults).
struct ExperimentFlags {
    std::string config_path;
    std::string from_manifest;

    std::string collection, format, queries, qrels;
    std::string feedback, final_retriever, method, fusion;
    std::string index_path, dense_store, similarity;
    std::string rewriter_kind, rewriter_endpoint, rewriter_model, rewriter_api_key_env;
    std::string embedder_kind, embedder_endpoint, embedder_model, embedder_api_key_env;
    std::string prompt_override, output_dir, tag, factory_policy;
    std::uint64_t rewriter_seed = 0, embedder_seed = 0, policy_seed = 0, noise_seed = 0;
    std::size_t k = 0, m = 0, depth = 0, embedder_dim = 0, jobs = 0, top_n = 0;
    std::size_t ndcg_k = 0, recall_k = 0, passage_chars = 0;
    double temperature = 0.0, rm3_alpha = 0.0, vprf_alpha = 0.0, vprf_beta = 0.0;
    double min_utility = 0.0, noise_fraction = 0.0;
    std::size_t rm3_terms = 0;

    std::map<std::string, CLI::Option*> options;

    bool is_set(const std::string& name) const {
        auto it = options.find(name);
        return it != options.end() && it->second->count() > 0;
    }
};

void add_experiment_flags(CLI::App* cmd, ExperimentFlags& f) {
    auto opt = [&](const std::string& name, auto& target, const std::string& desc) {
        // Key the lookup map by the primary long name, not the full spec.
        f.options[name.substr(0, name.find(','))] = cmd->add_option(name, target, desc);
    };
    opt("--config", f.config_path, "TOML config file (flags override its keys)");
    opt("--from-manifest", f.from_manifest, "replay the exact config stored in a manifest");
    opt("--collection", f.collection, "collection file");
    opt("--collection-format", f.format, "collection format: tsv or jsonl");
    opt("--queries", f.queries, "query TSV file");
    opt("--qrels", f.qrels, "TREC qrels file");
    opt("--feedback", f.feedback, "feedback retriever: bm25 or dense");
    opt("--final", f.final_retriever, "final retriever: bm25 or dense");
    opt("--method", f.method, "none, rm3, vprf, grf_concat, or gprf");
    opt("--fusion", f.fusion, "concat, dense_aggregate, or rrf");
    opt("--index", f.index_path, "prebuilt sparse index artifact");
    opt("--dense-store", f.dense_store, "embedding JSONL store");
    opt("--similarity", f.similarity, "dense similarity: dot or cosine");
    opt("--k", f.k, "feedback depth");
    opt("--m", f.m, "rewrite samples per query");
    opt("--depth", f.depth, "final retrieval depth");
    opt("--temperature", f.temperature, "rewriter sampling temperature");
    opt("--rm3-alpha", f.rm3_alpha, "RM3 interpolation weight");
    opt("--rm3-terms", f.rm3_terms, "RM3 expansion term count");
    opt("--vprf-alpha", f.vprf_alpha, "vector feedback query weight");
    opt("--vprf-beta", f.vprf_beta, "vector feedback document weight");
    opt("--rewriter", f.rewriter_kind, "rewriter client: mock, mock-oracle, mock-echo, http");
    opt("--rewriter-seed", f.rewriter_seed, "seed for the mock rewriter");
    opt("--rewriter-endpoint", f.rewriter_endpoint, "chat-completion endpoint URL");
    opt("--rewriter-model", f.rewriter_model, "model name for the rewriter endpoint");
    opt("--rewriter-api-key-env", f.rewriter_api_key_env, "env var holding the rewriter token");
    opt("--prompt-override", f.prompt_override, "prompt template with {question} placeholder");
    opt("--passage-chars", f.passage_chars, "per-passage character budget");
    opt("--embedder", f.embedder_kind, "embedder client: mock or http");
    opt("--embedder-seed", f.embedder_seed, "seed for the mock embedder");
    opt("--embedder-dim", f.embedder_dim, "embedding dimension");
    opt("--embedder-endpoint", f.embedder_endpoint, "embedding endpoint URL");
    opt("--embedder-model", f.embedder_model, "model name for the embedding endpoint");
    opt("--embedder-api-key-env", f.embedder_api_key_env, "env var holding the embedder token");
    opt("--ndcg-k", f.ndcg_k, "NDCG cutoff");
    opt("--recall-k", f.recall_k, "recall cutoff");
    opt("--policy", f.factory_policy, "data factory retriever: bm25, dense, or uniform");
    opt("--policy-seed", f.policy_seed, "seed for the uniform retriever policy");
    opt("--min-utility", f.min_utility, "minimum utility for SFT export");
    opt("--top-n", f.top_n, "maximum SFT records kept");
    opt("--noise-fraction", f.noise_fraction, "share of feedback passages replaced by random docs");
    opt("--noise-seed", f.noise_seed, "seed for feedback noise injection");
    opt("--jobs", f.jobs, "parallel worker count");
    opt("--output-dir,-o", f.output_dir, "output directory");
    opt("--tag", f.tag, "run tag (defaults to the method name)");
}

ExperimentConfig build_config(const ExperimentFlags& f) {
    ExperimentConfig cfg;
    if (!f.from_manifest.empty()) {
        std::ifstream in(f.from_manifest);
        if (!in) {
            throw rflab::ConfigError("cannot open manifest \"" + f.from_manifest + "\"");
        }
        nlohmann::json manifest;
        try {
            in >> manifest;
        } catch (const nlohmann::json::exception& e) {
            throw rflab::ConfigError("bad manifest JSON: " + std::string(e.what()));
        }
        cfg = ExperimentConfig::from_json(manifest.at("config"));
    } else if (!f.config_path.empty()) {
        cfg = ExperimentConfig::from_toml(rflab::TomlTable::parse_file(f.config_path));
    }

    auto set_if = [&](const std::string& name, auto apply) {
        if (f.is_set(name)) apply();
    };
    set_if("--collection", [&] { cfg.collection_path = f.collection; });
    set_if("--collection-format", [&] { cfg.collection_format = f.format; });
    set_if("--queries", [&] { cfg.queries_path = f.queries; });
    set_if("--qrels", [&] { cfg.qrels_path = f.qrels; });
    set_if("--feedback", [&] { cfg.feedback_retriever = rflab::retriever_from_string(f.feedback); });
    set_if("--final",
           [&] { cfg.final_retriever = rflab::retriever_from_string(f.final_retriever); });
    set_if("--method", [&] { cfg.method = rflab::method_from_string(f.method); });
    set_if("--fusion", [&] { cfg.fusion = rflab::fusion_from_string(f.fusion); });
    set_if("--index", [&] { cfg.sparse_index_path = f.index_path; });
    set_if("--dense-store", [&] { cfg.dense_store_path = f.dense_store; });
    set_if("--similarity", [&] { cfg.similarity = f.similarity; });
    set_if("--k", [&] { cfg.feedback_k = f.k; });
    set_if("--m", [&] { cfg.samples_m = f.m; });
    set_if("--depth", [&] { cfg.depth = f.depth; });
    set_if("--temperature", [&] { cfg.temperature = f.temperature; });
    set_if("--rm3-alpha", [&] { cfg.rm3.alpha = f.rm3_alpha; });
    set_if("--rm3-terms", [&] { cfg.rm3.n_terms = f.rm3_terms; });
    set_if("--vprf-alpha", [&] { cfg.vprf_alpha = f.vprf_alpha; });
    set_if("--vprf-beta", [&] { cfg.vprf_beta = f.vprf_beta; });
    set_if("--rewriter", [&] { cfg.rewriter_kind = rflab::client_kind_from_string(f.rewriter_kind); });
    set_if("--rewriter-seed", [&] { cfg.rewriter_seed = f.rewriter_seed; });
    set_if("--rewriter-endpoint", [&] { cfg.rewriter_endpoint = f.rewriter_endpoint; });
    set_if("--rewriter-model", [&] { cfg.rewriter_model = f.rewriter_model; });
    set_if("--rewriter-api-key-env", [&] { cfg.rewriter_api_key_env = f.rewriter_api_key_env; });
    set_if("--prompt-override", [&] { cfg.prompt_override = f.prompt_override; });
    set_if("--passage-chars", [&] { cfg.passage_char_budget = f.passage_chars; });
    set_if("--embedder", [&] { cfg.embedder_kind = rflab::client_kind_from_string(f.embedder_kind); });
    set_if("--embedder-seed", [&] { cfg.embedder_seed = f.embedder_seed; });
    set_if("--embedder-dim", [&] { cfg.embedder_dim = f.embedder_dim; });
    set_if("--embedder-endpoint", [&] { cfg.embedder_endpoint = f.embedder_endpoint; });
    set_if("--embedder-model", [&] { cfg.embedder_model = f.embedder_model; });
    set_if("--embedder-api-key-env", [&] { cfg.embedder_api_key_env = f.embedder_api_key_env; });
    set_if("--ndcg-k", [&] { cfg.cutoffs.ndcg_k = f.ndcg_k; });
    set_if("--recall-k", [&] { cfg.cutoffs.recall_k = f.recall_k; });
    set_if("--policy",
           [&] { cfg.factory_policy = rflab::factory_policy_from_string(f.factory_policy); });
    set_if("--policy-seed", [&] { cfg.factory_policy_seed = f.policy_seed; });
    set_if("--min-utility", [&] { cfg.min_utility = f.min_utility; });
    set_if("--top-n", [&] { cfg.sft_top_n = f.top_n; });
    set_if("--noise-fraction", [&] { cfg.feedback_noise_fraction = f.noise_fraction; });
    set_if("--noise-seed", [&] { cfg.noise_seed = f.noise_seed; });
    set_if("--jobs", [&] { cfg.jobs = f.jobs; });
    set_if("--output-dir", [&] { cfg.output_dir = f.output_dir; });
    set_if("--tag", [&] { cfg.run_tag = f.tag; });
    return cfg;
}

int run_index(const std::string& collection_path, const std::string& format,
              const std::string& index_out, const std::string& embeddings_out,
              std::uint64_t embedder_seed, std::size_t embedder_dim,
              const std::string& similarity) {
    if (index_out.empty() && embeddings_out.empty()) {
        throw rflab::ConfigError("index: nothing to do (give --out and/or --embeddings-out)");
    }
    auto collection =
        rflab::load_collection(collection_path, rflab::collection_format_from_string(format));
    if (!index_out.empty()) {
        auto index = rflab::InvertedIndex::build(collection);
        index.save(index_out);
        std::cout << "index: " << index_out << " (" << index.doc_count() << " docs, "
                  << index.vocabulary_size() << " terms)\n";
    }
    if (!embeddings_out.empty()) {
        rflab::HashingEmbedder embedder(embedder_dim, embedder_seed);
        auto store = rflab::embed_collection(collection, embedder,
                                             rflab::similarity_from_string(similarity));
        store.save(embeddings_out);
        std::cout << "embeddings: " << embeddings_out << " (" << store.size() << " vectors, dim "
                  << store.dim() << ")\n";
    }
    return 0;
}

int run_retrieve(const ExperimentFlags& flags) {
    auto cfg = build_config(flags);
    auto outcome = rflab::run_experiment(cfg);
    std::cout << "run: " << outcome.run_path.string() << "\n"
              << "report: " << outcome.report_tsv_path.string() << "\n"
              << "manifest: " << outcome.manifest_path.string() << "\n"
              << "mean ndcg@" << cfg.cutoffs.ndcg_k << ": "
              << rflab::format_run_score(outcome.report.mean_ndcg) << "\n"
              << "mean recall@" << cfg.cutoffs.recall_k << ": "
              << rflab::format_run_score(outcome.report.mean_recall) << "\n";
    return 0;
}

int run_rewrite(const ExperimentFlags& flags, const std::string& out_path) {
    auto cfg = build_config(flags);
    if (!cfg.needs_rewriter()) {
        throw rflab::ConfigError("rewrite requires --method gprf or grf_concat");
    }
    auto ctx = rflab::load_context(cfg);
    std::ostream* out = &std::cout;
    std::ofstream file;
    if (!out_path.empty()) {
        file.open(out_path, std::ios::binary);
        if (!file) throw rflab::Error("cannot open \"" + out_path + "\" for writing");
        out = &file;
    }
    for (const auto& query : ctx.queries.queries()) {
        std::vector<rflab::RewriteCandidate> candidates;
        if (cfg.method == rflab::Method::GrfConcat) {
            candidates = rflab::generate_pseudo_docs(*ctx.rewriter, query, cfg.prompt_override,
                                                     cfg.samples_m, cfg.temperature);
        } else {
            auto first = ctx.retrieve_text(cfg.feedback_retriever, query.text, cfg.depth, "feedback")
                             .with_query_id(query.query_id);
            auto feedback = rflab::FeedbackSet::from_ranking(first, cfg.feedback_k);
            rflab::RewriteRequest request;
            request.query = query;
            request.passages = ctx.passages_for(feedback, cfg.passage_char_budget);
            request.m = cfg.samples_m;
            request.temperature = cfg.temperature;
            candidates = rflab::generate_rewrites(*ctx.rewriter, request);
        }
        std::vector<std::string> texts;
        for (const auto& candidate : candidates) texts.push_back(candidate.text);
        nlohmann::json line = {
            {"query_id", query.query_id},
            {"query", query.text},
            {"candidates", texts},
            {"fused", rflab::fuse_concat(query, candidates).text},
        };
        (*out) << line.dump() << "\n";
    }
    return 0;
}

int run_evaluate(const std::string& run_path, const std::string& qrels_path,
                 const std::string& queries_path, std::size_t ndcg_k, std::size_t recall_k,
                 const std::string& out_tsv, const std::string& out_json,
                 const std::string& baseline_run, std::size_t n_buckets) {
    auto lists = rflab::read_run(run_path);
    auto qrels = rflab::load_qrels(qrels_path);
    std::vector<std::string> query_ids;
    if (!queries_path.empty()) {
        auto queries = rflab::load_queries(queries_path);
        for (const auto& query : queries.queries()) query_ids.push_back(query.query_id);
    } else {
        for (const auto& list : lists) query_ids.push_back(list.query_id());
    }
    rflab::MetricCutoffs cutoffs{ndcg_k, recall_k};
    auto report = rflab::evaluate_run(lists, qrels, query_ids, cutoffs);

    auto summary = report.to_json();
    if (!baseline_run.empty()) {
        auto baseline_lists = rflab::read_run(baseline_run);
        auto baseline_report = rflab::evaluate_run(baseline_lists, qrels, query_ids, cutoffs);
        summary["vs_baseline"] = rflab::comparison_summary(report, baseline_report, n_buckets);
    }

    std::string tsv = report.to_tsv();
    if (!out_tsv.empty()) {
        std::ofstream out(out_tsv, std::ios::binary);
        if (!out) throw rflab::Error("cannot open \"" + out_tsv + "\" for writing");
        out << tsv;
    } else {
        std::cout << tsv;
    }
    if (!out_json.empty()) {
        std::ofstream out(out_json, std::ios::binary);
        if (!out) throw rflab::Error("cannot open \"" + out_json + "\" for writing");
        out << summary.dump(2) << "\n";
    }
    std::cerr << "mean ndcg@" << ndcg_k << " = " << rflab::format_run_score(report.mean_ndcg)
              << ", mean recall@" << recall_k << " = "
              << rflab::format_run_score(report.mean_recall) << "\n";
    return 0;
}

int run_datafactory_cmd(const ExperimentFlags& flags) {
    auto cfg = build_config(flags);
    auto outcome = rflab::run_datafactory(cfg);
    std::cout << "sft: " << outcome.sft_path.string() << " (" << outcome.exported.size()
              << " records)\n"
              << "audit: " << outcome.audit_path.string() << "\n"
              << "manifest: " << outcome.manifest_path.string() << "\n"
              << "queries: " << outcome.queries_processed << " processed, "
              << outcome.queries_failed << " failed\n";
    return 0;
}

std::map<std::string, double> read_report_column(const std::string& path,
                                                 const std::string& metric) {
    std::ifstream in(path);
    if (!in) throw rflab::Error("cannot open report \"" + path + "\"");
    std::map<std::string, double> values;
    std::string line;
    std::size_t line_no = 0;
    std::size_t column = metric == "recall" ? 2 : 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (line_no == 1 && line.rfind("query_id", 0) == 0) continue;  // header
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            auto tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos
                                                                         : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (fields.size() < 3) {
            throw rflab::ParseError(path, line_no, "expected query_id<TAB>ndcg<TAB>recall");
        }
        values[fields[0]] = std::stod(fields[column]);
    }
    return values;
}

int run_bucket_report(const std::string& baseline_path, const std::string& candidate_path,
                      std::size_t n_buckets, const std::string& metric, bool as_json) {
    if (metric != "ndcg" && metric != "recall") {
        throw rflab::ConfigError("--metric must be ndcg or recall");
    }
    auto baseline = read_report_column(baseline_path, metric);
    auto candidate = read_report_column(candidate_path, metric);
    std::map<std::string, double> improvements;
    for (const auto& [query_id, base] : baseline) {
        auto it = candidate.find(query_id);
        if (it == candidate.end()) {
            throw rflab::Error("candidate report is missing query \"" + query_id + "\"");
        }
        improvements[query_id] = it->second - base;
    }
    auto buckets = rflab::bucket_report(baseline, improvements, n_buckets);
    if (as_json) {
        nlohmann::json out = nlohmann::json::array();
        for (std::size_t b = 0; b < buckets.size(); ++b) {
            out.push_back({{"bucket", b + 1},
                           {"count", buckets[b].count},
                           {"baseline_low", buckets[b].baseline_low},
                           {"baseline_high", buckets[b].baseline_high},
                           {"q1", buckets[b].q1},
                           {"median", buckets[b].median},
                           {"q3", buckets[b].q3}});
        }
        std::cout << out.dump(2) << "\n";
    } else {
        std::cout << "bucket\tcount\tbaseline_low\tbaseline_high\tq1\tmedian\tq3\n";
        for (std::size_t b = 0; b < buckets.size(); ++b) {
            std::cout << (b + 1) << "\t" << buckets[b].count << "\t"
                      << rflab::format_run_score(buckets[b].baseline_low) << "\t"
                      << rflab::format_run_score(buckets[b].baseline_high) << "\t"
                      << rflab::format_run_score(buckets[b].q1) << "\t"
                      << rflab::format_run_score(buckets[b].median) << "\t"
                      << rflab::format_run_score(buckets[b].q3) << "\n";
        }
    }
    return 0;
}

int run_grpo_check(const std::string& rollouts_path, double epsilon, double kl_beta, double tol) {
    auto checks = rflab::load_rollout_groups(rollouts_path);
    if (checks.empty()) {
        throw rflab::Error("no rollout groups in \"" + rollouts_path + "\"");
    }
    rflab::GrpoConfig cfg;
    cfg.epsilon = epsilon;
    cfg.kl_beta = kl_beta;
    bool all_ok = true;
    for (std::size_t g = 0; g < checks.size(); ++g) {
        const auto& check = checks[g];
        std::vector<double> rewards;
        for (const auto& sample : check.group.samples) rewards.push_back(sample.reward);
        auto advantages = rflab::compute_advantages(rewards);
        double loss = rflab::grpo_loss(check.group, advantages, cfg);

        bool ok = true;
        std::string detail;
        if (check.expected_advantages) {
            if (check.expected_advantages->size() != advantages.size()) {
                ok = false;
                detail = "advantage count mismatch";
            } else {
                for (std::size_t i = 0; i < advantages.size(); ++i) {
                    if (std::abs(advantages[i] - (*check.expected_advantages)[i]) > tol) {
                        ok = false;
                        detail = "advantage " + std::to_string(i) + " differs";
                        break;
                    }
                }
            }
        }
        if (ok && check.expected_loss && std::abs(*check.expected_loss - loss) > tol) {
            ok = false;
            detail = "loss differs (expected " + std::to_string(*check.expected_loss) + ")";
        }
        std::cout << "group " << (g + 1) << ": |G|=" << check.group.samples.size()
                  << " loss=" << loss;
        if (check.expected_advantages || check.expected_loss) {
            std::cout << (ok ? " [OK]" : " [FAIL " + detail + "]");
        }
        std::cout << "\n";
        all_ok = all_ok && ok;
    }
    if (!all_ok) {
        throw rflab::Error("grpo-check found mismatches");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"retrieval, relevance-feedback rewriting, and training-data experiments"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "rflab 0.1.0");
    int exit_code = 0;

    // index
    auto* index_cmd = app.add_subcommand("index", "build sparse index / embedding artifacts");
    std::string ix_collection, ix_format = "tsv", ix_out, ix_embeddings_out, ix_similarity = "cosine";
    std::uint64_t ix_embedder_seed = 0;
    std::size_t ix_embedder_dim = 256;
    index_cmd->add_option("--collection", ix_collection, "collection file")->required();
    index_cmd->add_option("--collection-format", ix_format, "tsv or jsonl");
    index_cmd->add_option("--out", ix_out, "sparse index artifact path");
    index_cmd->add_option("--embeddings-out", ix_embeddings_out, "embedding JSONL path");
    index_cmd->add_option("--embedder-seed", ix_embedder_seed, "mock embedder seed");
    index_cmd->add_option("--embedder-dim", ix_embedder_dim, "mock embedder dimension");
    index_cmd->add_option("--similarity", ix_similarity, "dot or cosine");
    index_cmd->callback([&] {
        exit_code = run_index(ix_collection, ix_format, ix_out, ix_embeddings_out,
                              ix_embedder_seed, ix_embedder_dim, ix_similarity);
    });

    // retrieve
    auto* retrieve_cmd = app.add_subcommand("retrieve", "run one experiment end to end");
    ExperimentFlags retrieve_flags;
    add_experiment_flags(retrieve_cmd, retrieve_flags);
    retrieve_cmd->callback([&] { exit_code = run_retrieve(retrieve_flags); });

    // rewrite
    auto* rewrite_cmd = app.add_subcommand("rewrite", "generate rewrites without retrieval fusion");
    ExperimentFlags rewrite_flags;
    std::string rewrite_out;
    add_experiment_flags(rewrite_cmd, rewrite_flags);
    rewrite_cmd->add_option("--out", rewrite_out, "output JSONL (default stdout)");
    rewrite_cmd->callback([&] { exit_code = run_rewrite(rewrite_flags, rewrite_out); });

    // evaluate
    auto* evaluate_cmd = app.add_subcommand("evaluate", "score a TREC run file against qrels");
    std::string ev_run, ev_qrels, ev_queries, ev_out_tsv, ev_out_json, ev_baseline;
    std::size_t ev_ndcg_k = 10, ev_recall_k = 100, ev_buckets = 5;
    evaluate_cmd->add_option("--run", ev_run, "TREC run file")->required();
    evaluate_cmd->add_option("--qrels", ev_qrels, "TREC qrels file")->required();
    evaluate_cmd->add_option("--queries", ev_queries, "query TSV (canonical query set)");
    evaluate_cmd->add_option("--ndcg-k", ev_ndcg_k, "NDCG cutoff");
    evaluate_cmd->add_option("--recall-k", ev_recall_k, "recall cutoff");
    evaluate_cmd->add_option("--out-tsv", ev_out_tsv, "write the per-query TSV here");
    evaluate_cmd->add_option("--out-json", ev_out_json, "write the JSON summary here");
    evaluate_cmd->add_option("--baseline-run", ev_baseline,
                             "baseline run file: adds p-values and buckets to the JSON summary");
    evaluate_cmd->add_option("--buckets", ev_buckets, "bucket count for the baseline comparison");
    evaluate_cmd->callback([&] {
        exit_code = run_evaluate(ev_run, ev_qrels, ev_queries, ev_ndcg_k, ev_recall_k, ev_out_tsv,
                                 ev_out_json, ev_baseline, ev_buckets);
    });

    // datafactory
    auto* factory_cmd =
        app.add_subcommand("datafactory", "rejection-sampling SFT data construction");
    ExperimentFlags factory_flags;
    add_experiment_flags(factory_cmd, factory_flags);
    factory_cmd->callback([&] { exit_code = run_datafactory_cmd(factory_flags); });

    // bucket-report
    auto* bucket_cmd =
        app.add_subcommand("bucket-report", "improvement buckets by baseline performance");
    std::string bk_baseline, bk_candidate, bk_metric = "ndcg";
    std::size_t bk_buckets = 5;
    bool bk_json = false;
    bucket_cmd->add_option("--baseline", bk_baseline, "baseline report TSV")->required();
    bucket_cmd->add_option("--candidate", bk_candidate, "candidate report TSV")->required();
    bucket_cmd->add_option("--buckets", bk_buckets, "bucket count");
    bucket_cmd->add_option("--metric", bk_metric, "ndcg or recall");
    bucket_cmd->add_flag("--json", bk_json, "emit JSON instead of TSV");
    bucket_cmd->callback([&] {
        exit_code = run_bucket_report(bk_baseline, bk_candidate, bk_buckets, bk_metric, bk_json);
    });

    // grpo-check
    auto* grpo_cmd = app.add_subcommand("grpo-check", "verify rollout JSONL against the loss math");
    std::string gr_rollouts;
    double gr_epsilon = 0.2, gr_beta = 1e-3, gr_tol = 1e-6;
    grpo_cmd->add_option("--rollouts", gr_rollouts, "rollout group JSONL")->required();
    grpo_cmd->add_option("--epsilon", gr_epsilon, "clip range");
    grpo_cmd->add_option("--beta", gr_beta, "KL penalty weight");
    grpo_cmd->add_option("--tol", gr_tol, "comparison tolerance for expected values");
    grpo_cmd->callback([&] { exit_code = run_grpo_check(gr_rollouts, gr_epsilon, gr_beta, gr_tol); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;  // bad flags are configuration errors
    } catch (const rflab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return exit_code;
}
