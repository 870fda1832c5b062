#pragma once

#include <map>
#include <string>
#include <vector>

#include "rflab/corpus.hpp"

namespace rflab {

/// Reciprocal rank fusion over several ranked lists of the same query:
/// score(d) = sum over lists of 1 / (k0 + rank(d)). Documents absent from a
/// list contribute nothing for it.
inline RankedList rrf_fuse(const std::vector<RankedList>& lists, double k0 = 60.0,
                           const std::string& tag = "rrf") {
    if (lists.empty()) {
        throw Error("rrf_fuse requires at least one ranked list");
    }
    const std::string& query_id = lists.front().query_id();
    for (const auto& list : lists) {
        if (list.query_id() != query_id) {
            throw Error("rrf_fuse: mixed query ids (\"" + query_id + "\" vs \"" +
                        list.query_id() + "\")");
        }
    }
    std::map<std::string, double> accumulator;
    for (const auto& list : lists) {
        std::size_t rank = 0;
        for (const auto& entry : list.entries()) {
            ++rank;
            accumulator[entry.doc_id] += 1.0 / (k0 + static_cast<double>(rank));
        }
    }
    std::vector<ScoredDoc> fused;
    fused.reserve(accumulator.size());
    for (const auto& [doc_id, score] : accumulator) {
        fused.push_back({doc_id, score});
    }
    return RankedList::from_scores(query_id, std::move(fused), tag);
}

}  // namespace rflab
