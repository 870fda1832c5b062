#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rflab/corpus.hpp"
#include "rflab/dense.hpp"
#include "rflab/errors.hpp"
#include "rflab/log.hpp"
#include "rflab/tokenize.hpp"

namespace rflab {

/// The uniform rewriting instruction used for every task and dataset.
inline constexpr const char* kRewriteInstruction =
    "Please rewrite the user's query based on several relevant passages (which may contain "
    "noise or errors). The rewritten query should preserve the original meaning while "
    "incorporating as much information as possible, so that search engines can more "
    "effectively retrieve relevant passages.";

/// Renders the rewriting prompt: the instruction, one "Passage i:" block per
/// feedback passage in feedback order, the user query, and a trailing
/// "Rewritten Query:" marker. Byte-stable for fixed inputs.
struct PromptTemplate {
    std::string instruction = kRewriteInstruction;

    std::string render(const std::string& query_text,
                       const std::vector<std::string>& passages) const {
        std::string prompt = instruction;
        prompt += "\n\nRelevant Passages:\n\n";
        if (passages.empty()) {
            prompt += "(no passages retrieved)\n\n";
        } else {
            for (std::size_t i = 0; i < passages.size(); ++i) {
                prompt += "Passage " + std::to_string(i + 1) + ": " + passages[i] + "\n\n";
            }
        }
        prompt += "User Query: " + query_text + "\n\nRewritten Query:";
        return prompt;
    }
};

/// Fill a user-supplied template: every "{question}" placeholder becomes the
/// query text. Used for feedback-free pseudo-document prompts.
inline std::string render_override_prompt(const std::string& prompt_template,
                                          const std::string& query_text) {
    static constexpr std::string_view kPlaceholder = "{question}";
    std::string out;
    std::size_t pos = 0;
    while (true) {
        auto hit = prompt_template.find(kPlaceholder, pos);
        if (hit == std::string::npos) {
            out.append(prompt_template, pos, std::string::npos);
            break;
        }
        out.append(prompt_template, pos, hit - pos);
        out += query_text;
        pos = hit + kPlaceholder.size();
    }
    return out;
}

struct RewriteCandidate {
    std::string text;
    std::size_t sample_index = 0;  // 0-based generation order
};

struct RewriteRequest {
    Query query;
    std::vector<std::string> passages;  // feedback resolved to text, ranking order
    std::size_t m = 10;
    double temperature = 0.0;
};

/// Text-generation contract: m completions for one prompt, in generation
/// order. Implementations must be deterministic at temperature 0.
class RewriterClient {
public:
    virtual ~RewriterClient() = default;
    virtual std::vector<std::string> generate(const std::string& prompt, std::size_t m,
                                              double temperature) = 0;
};

namespace detail {

inline std::string trim(std::string_view text) {
    std::size_t begin = 0;
    std::size_t end = text.size();
    while (begin < end && std::isspace(static_cast<unsigned char>(text[begin]))) ++begin;
    while (end > begin && std::isspace(static_cast<unsigned char>(text[end - 1]))) --end;
    return std::string(text.substr(begin, end - begin));
}

/// Recover the query text from a rendered prompt (mock clients can only see
/// what a real model would see: the prompt).
inline std::string extract_user_query(const std::string& prompt) {
    static constexpr std::string_view kMarker = "User Query: ";
    auto pos = prompt.rfind(kMarker);
    if (pos == std::string::npos) {
        return {};
    }
    auto start = pos + kMarker.size();
    auto end = prompt.find('\n', start);
    if (end == std::string::npos) end = prompt.size();
    return prompt.substr(start, end - start);
}

/// Recover "Passage i:" block texts from a rendered prompt, in order.
inline std::vector<std::string> extract_passages(const std::string& prompt) {
    std::vector<std::string> passages;
    std::size_t index = 1;
    std::size_t cursor = 0;
    while (true) {
        std::string marker = "Passage " + std::to_string(index) + ": ";
        auto pos = prompt.find(marker, cursor);
        if (pos == std::string::npos) break;
        auto start = pos + marker.size();
        std::string next_marker = "\n\nPassage " + std::to_string(index + 1) + ": ";
        auto end = prompt.find(next_marker, start);
        if (end == std::string::npos) {
            end = prompt.find("\n\nUser Query: ", start);
        }
        if (end == std::string::npos) end = prompt.size();
        passages.push_back(prompt.substr(start, end - start));
        cursor = end;
        ++index;
    }
    return passages;
}

inline std::string hash_word(std::uint64_t hash) {
    static constexpr char kAlphabet[] = "abcdefghijklmnopqrstuvwxyz";
    std::string word;
    for (int i = 0; i < 6; ++i) {
        word.push_back(kAlphabet[hash % 26]);
        hash /= 26;
    }
    return word;
}

}  // namespace detail

/// Deterministic stand-in for a live rewriter. The output is a pure function
/// of (seed, prompt, m, temperature): the query text plus synthetic expansion
/// words derived from a hash. At temperature 0 all m samples are identical,
/// mirroring greedy decoding.
class SeededMockRewriter : public RewriterClient {
public:
    explicit SeededMockRewriter(std::uint64_t seed) : seed_(seed) {}

    std::vector<std::string> generate(const std::string& prompt, std::size_t m,
                                      double temperature) override {
        std::string query = detail::extract_user_query(prompt);
        std::uint64_t base = detail::fnv1a64(prompt, 0x9e3779b97f4a7c15ULL ^ seed_);
        std::vector<std::string> out;
        out.reserve(m);
        for (std::size_t j = 0; j < m; ++j) {
            std::uint64_t sample_key = temperature == 0.0 ? 0 : static_cast<std::uint64_t>(j) + 1;
            std::uint64_t h = base ^ (sample_key * 0xbf58476d1ce4e5b9ULL);
            out.push_back(query + " " + detail::hash_word(h) + " " + detail::hash_word(h >> 24));
        }
        return out;
    }

private:
    std::uint64_t seed_;
};

/// Test-double rewriter that answers from a fixed query-text -> rewrite map
/// (e.g. the terms of the known relevant document). Unknown queries echo the
/// query itself with a warning.
class OracleRewriter : public RewriterClient {
public:
    explicit OracleRewriter(std::unordered_map<std::string, std::string> rewrites)
        : rewrites_(std::move(rewrites)) {}

    std::vector<std::string> generate(const std::string& prompt, std::size_t m,
                                      double /*temperature*/) override {
        std::string query = detail::extract_user_query(prompt);
        auto it = rewrites_.find(query);
        std::string text;
        if (it == rewrites_.end()) {
            log_warn("oracle rewriter has no entry for query \"" + query + "\"; echoing it");
            text = query;
        } else {
            text = it->second;
        }
        return std::vector<std::string>(m, text);
    }

private:
    std::unordered_map<std::string, std::string> rewrites_;
};

/// Test-double rewriter that parrots the feedback passages: sample j returns
/// passage j (cycling), so noisy feedback produces noisy candidates.
class EchoRewriter : public RewriterClient {
public:
    std::vector<std::string> generate(const std::string& prompt, std::size_t m,
                                      double /*temperature*/) override {
        auto passages = detail::extract_passages(prompt);
        std::vector<std::string> out;
        out.reserve(m);
        for (std::size_t j = 0; j < m; ++j) {
            if (passages.empty()) {
                out.push_back(detail::extract_user_query(prompt));
            } else {
                out.push_back(passages[j % passages.size()]);
            }
        }
        return out;
    }
};

/// Cap each passage at a character budget before prompting; oversized
/// passages are cut with a log record.
inline std::vector<std::string> truncate_passages(const std::vector<std::string>& passages,
                                                  std::size_t char_budget) {
    std::vector<std::string> out;
    out.reserve(passages.size());
    for (std::size_t i = 0; i < passages.size(); ++i) {
        if (char_budget > 0 && passages[i].size() > char_budget) {
            log_info("truncating passage " + std::to_string(i + 1) + " from " +
                     std::to_string(passages[i].size()) + " to " + std::to_string(char_budget) +
                     " chars");
            out.push_back(passages[i].substr(0, char_budget));
        } else {
            out.push_back(passages[i]);
        }
    }
    return out;
}

/// Sample m reformulations for one query. Returns exactly m candidates in
/// generation order; blank generations fall back to the original query text
/// so a broken sample can never regress the pipeline below "no rewriting".
inline std::vector<RewriteCandidate> generate_rewrites(RewriterClient& client,
                                                       const RewriteRequest& request,
                                                       const PromptTemplate& prompt_template = {}) {
    if (request.m < 1) {
        throw Error("generate_rewrites requires m >= 1");
    }
    std::string prompt = prompt_template.render(request.query.text, request.passages);
    std::vector<std::string> raw;
    try {
        raw = client.generate(prompt, request.m, request.temperature);
    } catch (const ClientError& e) {
        throw ClientError("rewriter failed for query \"" + request.query.query_id +
                          "\": " + e.what());
    }
    if (raw.size() != request.m) {
        throw ClientError("rewriter returned " + std::to_string(raw.size()) + " samples for query \"" +
                          request.query.query_id + "\", expected " + std::to_string(request.m));
    }
    std::vector<RewriteCandidate> candidates;
    candidates.reserve(raw.size());
    for (std::size_t j = 0; j < raw.size(); ++j) {
        std::string text = detail::trim(raw[j]);
        if (text.empty()) {
            log_warn("blank rewrite sample " + std::to_string(j) + " for query \"" +
                     request.query.query_id + "\"; using the original query");
            text = request.query.text;
        }
        candidates.push_back({std::move(text), j});
    }
    return candidates;
}

/// Feedback-free pseudo-document generation through a caller-supplied prompt
/// template containing a "{question}" placeholder.
inline std::vector<RewriteCandidate> generate_pseudo_docs(RewriterClient& client,
                                                          const Query& query,
                                                          const std::string& prompt_override,
                                                          std::size_t m, double temperature = 0.0) {
    if (prompt_override.empty()) {
        throw ConfigError("pseudo-document generation requires a prompt override template");
    }
    if (m == 0) {
        return {};
    }
    std::string prompt = render_override_prompt(prompt_override, query.text);
    std::vector<std::string> raw;
    try {
        raw = client.generate(prompt, m, temperature);
    } catch (const ClientError& e) {
        throw ClientError("pseudo-doc generation failed for query \"" + query.query_id +
                          "\": " + e.what());
    }
    std::vector<RewriteCandidate> docs;
    docs.reserve(raw.size());
    for (std::size_t j = 0; j < raw.size(); ++j) {
        std::string text = detail::trim(raw[j]);
        if (text.empty()) {
            log_warn("blank pseudo-doc sample " + std::to_string(j) + " for query \"" +
                     query.query_id + "\"; using the original query");
            text = query.text;
        }
        docs.push_back({std::move(text), j});
    }
    return docs;
}

/// Concatenate the original query with every candidate in sample order,
/// joined by single spaces. Newlines inside candidates are flattened.
inline Query fuse_concat(const Query& query, const std::vector<RewriteCandidate>& candidates) {
    std::string text = query.text;
    for (const auto& candidate : candidates) {
        std::string flattened = candidate.text;
        for (char& c : flattened) {
            if (c == '\n' || c == '\r') c = ' ';
        }
        text += " " + flattened;
    }
    if (candidates.empty()) {
        return query;
    }
    return Query{query.query_id, std::move(text)};
}

/// Aggregate rewrites in embedding space: embed the original query and every
/// candidate, then combine them with the vector-feedback rule
/// alpha * q + beta * sum_i v_i.
inline Embedding fuse_dense(EmbedderClient& embedder, const Query& query,
                            const std::vector<RewriteCandidate>& candidates, double alpha,
                            double beta) {
    std::vector<std::string> texts;
    texts.reserve(candidates.size() + 1);
    texts.push_back(query.text);
    for (const auto& candidate : candidates) {
        texts.push_back(candidate.text);
    }
    std::vector<Embedding> vecs;
    try {
        vecs = embedder.embed(texts);
    } catch (const ClientError& e) {
        throw ClientError("embedder failed for query \"" + query.query_id + "\": " + e.what());
    }
    if (vecs.size() != texts.size()) {
        throw ClientError("embedder returned " + std::to_string(vecs.size()) + " vectors for " +
                          std::to_string(texts.size()) + " inputs (query \"" + query.query_id +
                          "\")");
    }
    Embedding query_vec = std::move(vecs.front());
    std::vector<Embedding> candidate_vecs(std::make_move_iterator(vecs.begin() + 1),
                                          std::make_move_iterator(vecs.end()));
    return vprf_refine(query_vec, candidate_vecs, alpha, beta);
}

}  // namespace rflab
