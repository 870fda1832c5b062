#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rflab/corpus.hpp"
#include "rflab/errors.hpp"
#include "rflab/log.hpp"
#include "rflab/metrics.hpp"
#include "rflab/rewrite.hpp"

#include <json.hpp>

namespace rflab {

/// One supervision pair produced by rejection sampling: prompt ingredients,
/// the selected target rewrite, and its audited utility.
struct SftRecord {
    std::string instruction;
    std::string query;
    std::vector<std::string> feedback_passages;
    std::string target;
    double utility = 0.0;
    std::string retriever_tag;
    std::string query_id;  // carried for deterministic tie-breaks and audits

    nlohmann::json to_json() const {
        return nlohmann::json{
            {"instruction", instruction}, {"query", query},     {"passages", feedback_passages},
            {"target", target},           {"utility", utility}, {"retriever", retriever_tag},
        };
    }
};

struct GrpoConfig {
    double lambda = 1.0;    // recall weight in the reward
    double epsilon = 0.2;   // importance-ratio clip range
    double kl_beta = 1e-3;  // weight of the KL penalty toward the reference policy
};

/// One sampled output inside a rollout group: its scalar reward and the
/// per-token log-probabilities under the current, behavior, and reference
/// policies.
struct RolloutSample {
    double reward = 0.0;
    std::vector<double> logp_theta;
    std::vector<double> logp_old;
    std::vector<double> logp_ref;
};

struct RolloutGroup {
    std::vector<RolloutSample> samples;

    void validate() const {
        if (samples.size() < 2) {
            throw Error("rollout group needs at least 2 samples, has " +
                        std::to_string(samples.size()));
        }
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const auto& s = samples[i];
            if (s.logp_theta.empty()) {
                throw Error("rollout sample " + std::to_string(i) + " has no tokens");
            }
            if (s.logp_theta.size() != s.logp_old.size() ||
                s.logp_theta.size() != s.logp_ref.size()) {
                throw Error("rollout sample " + std::to_string(i) +
                            " has log-prob lists of different lengths");
            }
            for (const auto* list : {&s.logp_theta, &s.logp_old, &s.logp_ref}) {
                for (double lp : *list) {
                    if (lp > 0.0) {
                        throw Error("rollout sample " + std::to_string(i) +
                                    " has a positive log-probability");
                    }
                }
            }
        }
    }
};

struct RejectionResult {
    RewriteCandidate best;
    std::size_t best_index = 0;
    std::vector<double> utilities;  // one per candidate, sample order; -inf marks failures
};

/// Retrieve and score every candidate, then keep the one with the highest
/// utility (ties break to the lowest sample index). A retrieval failure
/// pins that candidate's utility to -infinity instead of aborting the query.
inline RejectionResult rejection_sample_best(
    const std::vector<RewriteCandidate>& candidates,
    const std::function<RankedList(const std::string&)>& retrieve, const RankedList& baseline,
    const QrelsTable& qrels, std::size_t ndcg_k = 10) {
    if (candidates.empty()) {
        throw Error("rejection_sample_best requires at least one candidate");
    }
    RejectionResult result;
    result.utilities.reserve(candidates.size());
    for (const auto& candidate : candidates) {
        double utility = -std::numeric_limits<double>::infinity();
        try {
            RankedList ranking = retrieve(candidate.text).with_query_id(baseline.query_id());
            utility = utility_delta(ranking, baseline, qrels, ndcg_k);
        } catch (const std::exception& e) {
            log_warn("retrieval failed for candidate " + std::to_string(candidate.sample_index) +
                     " of query \"" + baseline.query_id() + "\": " + e.what());
        }
        result.utilities.push_back(utility);
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < result.utilities.size(); ++i) {
        if (result.utilities[i] > result.utilities[best]) {
            best = i;
        }
    }
    result.best = candidates[best];
    result.best_index = best;
    return result;
}

/// Filter scored records to utility >= min_utility, order by utility
/// descending (ties by query_id ascending), and keep the top_n best.
inline std::vector<SftRecord> build_sft_dataset(std::vector<SftRecord> records, std::size_t top_n,
                                                double min_utility) {
    std::vector<SftRecord> kept;
    kept.reserve(records.size());
    for (auto& record : records) {
        if (record.utility >= min_utility) {
            kept.push_back(std::move(record));
        }
    }
    std::sort(kept.begin(), kept.end(), [](const SftRecord& a, const SftRecord& b) {
        if (a.utility != b.utility) return a.utility > b.utility;
        return a.query_id < b.query_id;
    });
    if (kept.size() > top_n) {
        kept.resize(top_n);
    }
    return kept;
}

/// Multi-view reward: NDCG@10 + lambda * Recall@100.
inline double compute_reward(const RankedList& ranking, const QrelsTable& qrels,
                             const GrpoConfig& config) {
    return ndcg_at_k(ranking, qrels, 10) + config.lambda * recall_at_k(ranking, qrels, 100);
}

/// Group-normalized advantages (r_i - mean) / std with the population
/// standard deviation. Degenerate groups (std below 1e-8) map to all-zero
/// advantages instead of dividing by ~0.
inline std::vector<double> compute_advantages(const std::vector<double>& rewards) {
    if (rewards.size() < 2) {
        throw Error("compute_advantages requires at least 2 rewards");
    }
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= static_cast<double>(rewards.size());
    double variance = 0.0;
    for (double r : rewards) variance += (r - mean) * (r - mean);
    variance /= static_cast<double>(rewards.size());
    double std_dev = std::sqrt(variance);
    std::vector<double> advantages(rewards.size(), 0.0);
    if (std_dev < 1e-8) {
        return advantages;
    }
    for (std::size_t i = 0; i < rewards.size(); ++i) {
        advantages[i] = (rewards[i] - mean) / std_dev;
    }
    return advantages;
}

/// Clipped-surrogate group loss:
///
///   L = -(1/|G|) sum_i (1/|y_i|) sum_t min(r_it * A_i, clip(r_it, 1-eps, 1+eps) * A_i)
///       + beta * KL
///
/// with r_it = exp(logp_theta - logp_old) and the KL penalty realized as the
/// non-negative per-token estimator exp(d) - d - 1, d = logp_ref - logp_theta,
/// token-averaged per sample and then group-averaged.
inline double grpo_loss(const RolloutGroup& group, const std::vector<double>& advantages,
                        const GrpoConfig& config) {
    group.validate();
    if (advantages.size() != group.samples.size()) {
        throw Error("grpo_loss: " + std::to_string(advantages.size()) + " advantages for " +
                    std::to_string(group.samples.size()) + " samples");
    }
    double surrogate_sum = 0.0;
    double kl_sum = 0.0;
    for (std::size_t i = 0; i < group.samples.size(); ++i) {
        const auto& sample = group.samples[i];
        double advantage = advantages[i];
        double sample_surrogate = 0.0;
        double sample_kl = 0.0;
        for (std::size_t t = 0; t < sample.logp_theta.size(); ++t) {
            double ratio = std::exp(sample.logp_theta[t] - sample.logp_old[t]);
            double clipped = std::clamp(ratio, 1.0 - config.epsilon, 1.0 + config.epsilon);
            sample_surrogate += std::min(ratio * advantage, clipped * advantage);
            double delta = sample.logp_ref[t] - sample.logp_theta[t];
            sample_kl += std::exp(delta) - delta - 1.0;
        }
        double tokens = static_cast<double>(sample.logp_theta.size());
        surrogate_sum += sample_surrogate / tokens;
        kl_sum += sample_kl / tokens;
    }
    double group_size = static_cast<double>(group.samples.size());
    return -surrogate_sum / group_size + config.kl_beta * (kl_sum / group_size);
}

/// Sequence negative log-likelihood: -sum_i logp_i.
inline double sft_nll(const std::vector<double>& token_logprobs) {
    if (token_logprobs.empty()) {
        throw Error("sft_nll requires at least one token");
    }
    double nll = 0.0;
    for (double lp : token_logprobs) {
        if (lp > 0.0) {
            throw Error("sft_nll: positive log-probability " + std::to_string(lp));
        }
        nll -= lp;
    }
    return nll;
}

/// A rollout group parsed from JSONL, with optional expected values to
/// verify an external trainer against.
struct RolloutCheck {
    RolloutGroup group;
    std::optional<std::vector<double>> expected_advantages;
    std::optional<double> expected_loss;
};

/// Parse rollout groups from JSONL. Each line holds one group:
///   {"samples": [{"reward": r, "logp_theta": [...], "logp_old": [...],
///                 "logp_ref": [...]}, ...],
///    "expected_advantages": [...], "expected_loss": x}   // both optional
inline std::vector<RolloutCheck> load_rollout_groups(const std::string& path) {
    auto in = detail::open_input(path);
    std::vector<RolloutCheck> groups;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            auto record = nlohmann::json::parse(line);
            RolloutCheck check;
            for (const auto& sample_json : record.at("samples")) {
                RolloutSample sample;
                sample.reward = sample_json.at("reward").get<double>();
                sample.logp_theta = sample_json.at("logp_theta").get<std::vector<double>>();
                sample.logp_old = sample_json.at("logp_old").get<std::vector<double>>();
                sample.logp_ref = sample_json.at("logp_ref").get<std::vector<double>>();
                check.group.samples.push_back(std::move(sample));
            }
            check.group.validate();
            if (record.contains("expected_advantages")) {
                check.expected_advantages =
                    record.at("expected_advantages").get<std::vector<double>>();
            }
            if (record.contains("expected_loss")) {
                check.expected_loss = record.at("expected_loss").get<double>();
            }
            groups.push_back(std::move(check));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path, line_no, std::string("bad rollout record: ") + e.what());
        } catch (const Error& e) {
            throw ParseError(path, line_no, e.what());
        }
    }
    return groups;
}

inline void write_sft_jsonl(std::ostream& out, const std::vector<SftRecord>& records) {
    for (const auto& record : records) {
        out << record.to_json().dump() << "\n";
    }
}

}  // namespace rflab
