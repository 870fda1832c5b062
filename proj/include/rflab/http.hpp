#pragma once

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#include "rflab/dense.hpp"
#include "rflab/errors.hpp"
#include "rflab/log.hpp"
#include "rflab/rewrite.hpp"

#include <httplib.h>
#include <json.hpp>

namespace rflab {

struct ParsedUrl {
    std::string host_port;  // "http://host:port" as httplib wants it
    std::string path;       // "/v1/chat/completions"
};

inline ParsedUrl parse_url(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) {
        throw ConfigError("endpoint URL \"" + url + "\" has no scheme");
    }
    auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) {
        return {url, "/"};
    }
    return {url.substr(0, path_start), url.substr(path_start)};
}

struct HttpClientOptions {
    std::string endpoint;     // full URL of the completion/embedding route
    std::string model;        // model name sent in the request body
    std::string api_key_env;  // env var holding the bearer token, may be empty
    std::size_t max_retries = 3;
    double timeout_seconds = 60.0;
    double backoff_seconds = 0.25;  // doubled per retry
};

namespace detail {

inline std::string read_api_key(const std::string& env_name) {
    if (env_name.empty()) return {};
    const char* value = std::getenv(env_name.c_str());
    return value ? value : "";
}

/// POST json with bounded retries on transport errors, 429, and 5xx.
inline nlohmann::json post_json_with_retries(const HttpClientOptions& options,
                                             const nlohmann::json& body) {
    ParsedUrl url = parse_url(options.endpoint);
    std::string payload = body.dump();
    std::string api_key = read_api_key(options.api_key_env);

    std::string last_error;
    for (std::size_t attempt = 0; attempt <= options.max_retries; ++attempt) {
        if (attempt > 0) {
            auto delay = options.backoff_seconds * static_cast<double>(1u << (attempt - 1));
            std::this_thread::sleep_for(std::chrono::duration<double>(delay));
        }
        // A fresh connection per call keeps concurrent per-query requests safe.
        httplib::Client client(url.host_port);
        client.set_connection_timeout(std::chrono::duration<double>(options.timeout_seconds));
        client.set_read_timeout(std::chrono::duration<double>(options.timeout_seconds));
        httplib::Headers headers;
        if (!api_key.empty()) {
            headers.emplace("Authorization", "Bearer " + api_key);
        }
        auto result = client.Post(url.path, headers, payload, "application/json");
        if (!result) {
            last_error = "transport error: " + httplib::to_string(result.error());
            log_warn("POST " + options.endpoint + " attempt " + std::to_string(attempt + 1) +
                     " failed: " + last_error);
            continue;
        }
        if (result->status == 429 || result->status >= 500) {
            last_error = "HTTP " + std::to_string(result->status);
            log_warn("POST " + options.endpoint + " attempt " + std::to_string(attempt + 1) +
                     " failed: " + last_error);
            continue;
        }
        if (result->status != 200) {
            throw ClientError("POST " + options.endpoint + " returned HTTP " +
                              std::to_string(result->status) + ": " + result->body);
        }
        try {
            return nlohmann::json::parse(result->body);
        } catch (const nlohmann::json::exception& e) {
            throw ClientError("bad JSON from " + options.endpoint + ": " + e.what());
        }
    }
    throw ClientError("POST " + options.endpoint + " failed after " +
                      std::to_string(options.max_retries + 1) + " attempts (" + last_error + ")");
}

}  // namespace detail

/// Chat-completion rewriter client. Sends one user message holding the full
/// prompt and asks for n = m completions.
class HttpChatRewriter : public RewriterClient {
public:
    explicit HttpChatRewriter(HttpClientOptions options) : options_(std::move(options)) {
        if (options_.endpoint.empty()) {
            throw ConfigError("rewriter endpoint is not configured");
        }
    }

    std::vector<std::string> generate(const std::string& prompt, std::size_t m,
                                      double temperature) override {
        nlohmann::json body = {
            {"model", options_.model},
            {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
            {"n", m},
            {"temperature", temperature},
        };
        auto response = detail::post_json_with_retries(options_, body);
        if (!response.contains("choices") || !response["choices"].is_array()) {
            throw ClientError("chat response has no choices array");
        }
        struct Choice {
            long long index;
            std::string content;
        };
        std::vector<Choice> choices;
        for (const auto& choice : response["choices"]) {
            Choice c;
            c.index = choice.value("index", static_cast<long long>(choices.size()));
            c.content = choice.contains("message") ? choice["message"].value("content", "")
                                                   : choice.value("text", "");
            choices.push_back(std::move(c));
        }
        std::sort(choices.begin(), choices.end(),
                  [](const Choice& a, const Choice& b) { return a.index < b.index; });
        std::vector<std::string> out;
        out.reserve(choices.size());
        for (auto& c : choices) {
            out.push_back(std::move(c.content));
        }
        if (out.size() != m) {
            throw ClientError("chat endpoint returned " + std::to_string(out.size()) +
                              " choices, expected " + std::to_string(m));
        }
        return out;
    }

private:
    HttpClientOptions options_;
};

/// Embedding client: POST {"input": [texts]} and read back data[i].embedding
/// in input order. Large inputs are chunked into batches.
class HttpEmbedder : public EmbedderClient {
public:
    HttpEmbedder(HttpClientOptions options, std::size_t dim, std::size_t batch_size = 64)
        : options_(std::move(options)), dim_(dim), batch_size_(batch_size == 0 ? 1 : batch_size) {
        if (options_.endpoint.empty()) {
            throw ConfigError("embedder endpoint is not configured");
        }
        if (dim_ == 0) {
            throw ConfigError("embedder dimension must be positive");
        }
    }

    std::size_t dim() const override { return dim_; }

    std::vector<Embedding> embed(const std::vector<std::string>& texts) override {
        std::vector<Embedding> out;
        out.reserve(texts.size());
        for (std::size_t start = 0; start < texts.size(); start += batch_size_) {
            std::size_t end = std::min(texts.size(), start + batch_size_);
            std::vector<std::string> batch(texts.begin() + start, texts.begin() + end);
            nlohmann::json body = {{"input", batch}};
            if (!options_.model.empty()) {
                body["model"] = options_.model;
            }
            auto response = detail::post_json_with_retries(options_, body);
            if (!response.contains("data") || !response["data"].is_array()) {
                throw ClientError("embedding response has no data array");
            }
            const auto& data = response["data"];
            if (data.size() != batch.size()) {
                throw ClientError("embedding endpoint returned " + std::to_string(data.size()) +
                                  " vectors for " + std::to_string(batch.size()) + " inputs");
            }
            for (const auto& item : data) {
                Embedding vec = item.at("embedding").get<Embedding>();
                if (vec.size() != dim_) {
                    throw ClientError("embedding dimension " + std::to_string(vec.size()) +
                                      " does not match configured dimension " +
                                      std::to_string(dim_));
                }
                out.push_back(std::move(vec));
            }
        }
        return out;
    }

private:
    HttpClientOptions options_;
    std::size_t dim_;
    std::size_t batch_size_;
};

}  // namespace rflab
