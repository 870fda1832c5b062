#pragma once

#include <cctype>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace rflab {

/// Lowercase a string ASCII-wise. Bytes outside [A-Z] pass through.
inline std::string to_lower(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    for (unsigned char c : text) {
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

/// Split text into lowercase terms on every non-alphanumeric byte.
/// Empty tokens are dropped; no stemming is applied.
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> terms;
    std::string current;
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            current.push_back(static_cast<char>(std::tolower(c)));
        } else if (!current.empty()) {
            terms.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) {
        terms.push_back(std::move(current));
    }
    return terms;
}

/// tokenize() with an optional stopword list. Stopwords are matched after
/// lowercasing. An empty set reproduces tokenize() exactly.
struct Tokenizer {
    std::unordered_set<std::string> stopwords;

    std::vector<std::string> operator()(std::string_view text) const {
        auto terms = tokenize(text);
        if (stopwords.empty()) {
            return terms;
        }
        std::vector<std::string> kept;
        kept.reserve(terms.size());
        for (auto& t : terms) {
            if (!stopwords.count(t)) {
                kept.push_back(std::move(t));
            }
        }
        return kept;
    }
};

}  // namespace rflab
