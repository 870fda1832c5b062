#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rflab/errors.hpp"
#include "rflab/log.hpp"

#include <json.hpp>

namespace rflab {

struct Document {
    std::string doc_id;
    std::string text;  // may be empty
};

struct Query {
    std::string query_id;
    std::string text;  // never empty
};

/// An in-memory document collection with unique doc_ids, in load order.
class Collection {
public:
    void add(Document doc) {
        if (doc.doc_id.empty()) {
            throw ParseError("document with empty doc_id");
        }
        auto [it, inserted] = index_.emplace(doc.doc_id, docs_.size());
        if (!inserted) {
            throw ParseError("duplicate doc_id \"" + doc.doc_id + "\"");
        }
        docs_.push_back(std::move(doc));
    }

    std::size_t size() const { return docs_.size(); }
    bool empty() const { return docs_.empty(); }
    const std::vector<Document>& docs() const { return docs_; }

    const Document* find(const std::string& doc_id) const {
        auto it = index_.find(doc_id);
        return it == index_.end() ? nullptr : &docs_[it->second];
    }

    const Document& at(const std::string& doc_id) const {
        const Document* doc = find(doc_id);
        if (!doc) {
            throw Error("unknown doc_id \"" + doc_id + "\"");
        }
        return *doc;
    }

private:
    std::vector<Document> docs_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Queries in file order, ids unique.
class QuerySet {
public:
    void add(Query query) {
        if (query.query_id.empty()) {
            throw ParseError("query with empty query_id");
        }
        if (query.text.empty()) {
            throw ParseError("query \"" + query.query_id + "\" has empty text");
        }
        if (!ids_.insert(query.query_id).second) {
            throw ParseError("duplicate query_id \"" + query.query_id + "\"");
        }
        queries_.push_back(std::move(query));
    }

    std::size_t size() const { return queries_.size(); }
    const std::vector<Query>& queries() const { return queries_; }

private:
    std::vector<Query> queries_;
    std::unordered_set<std::string> ids_;
};

/// Graded relevance judgments keyed by (query_id, doc_id). Absent pairs are
/// grade 0. Grades are arbitrary non-negative integers.
class QrelsTable {
public:
    void set(const std::string& query_id, const std::string& doc_id, int grade) {
        if (grade < 0) {
            throw ParseError("negative relevance grade for (" + query_id + ", " + doc_id + ")");
        }
        auto& per_query = entries_[query_id];
        auto it = per_query.find(doc_id);
        if (it != per_query.end()) {
            log_warn("qrels pair (" + query_id + ", " + doc_id + ") judged twice; keeping grade " +
                     std::to_string(grade));
            it->second = grade;
        } else {
            per_query.emplace(doc_id, grade);
        }
    }

    int grade(const std::string& query_id, const std::string& doc_id) const {
        auto q = entries_.find(query_id);
        if (q == entries_.end()) return 0;
        auto d = q->second.find(doc_id);
        return d == q->second.end() ? 0 : d->second;
    }

    /// All judged (doc_id, grade) pairs for one query, doc_id ascending.
    const std::map<std::string, int>& judged(const std::string& query_id) const {
        static const std::map<std::string, int> kEmpty;
        auto q = entries_.find(query_id);
        return q == entries_.end() ? kEmpty : q->second;
    }

    bool has_relevant(const std::string& query_id) const {
        for (const auto& [doc_id, grade] : judged(query_id)) {
            if (grade > 0) return true;
        }
        return false;
    }

    std::size_t query_count() const { return entries_.size(); }

    bool operator==(const QrelsTable& other) const { return entries_ == other.entries_; }

private:
    std::map<std::string, std::map<std::string, int>> entries_;
};

struct ScoredDoc {
    std::string doc_id;
    double score = 0.0;

    bool operator==(const ScoredDoc& other) const {
        return doc_id == other.doc_id && score == other.score;
    }
};

/// Canonical ranking order: score descending, ties by doc_id ascending.
inline bool ranked_before(const ScoredDoc& a, const ScoredDoc& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.doc_id < b.doc_id;
}

/// One query's ranked results. Construction through from_scores() sorts into
/// canonical order and rejects duplicate doc_ids; from_ranked_file() trusts
/// the file's rank order (scores rounded to 6 decimals can tie entries that
/// were distinct in memory, so re-sorting on read would break round trips).
class RankedList {
public:
    RankedList() = default;

    static RankedList from_scores(std::string query_id, std::vector<ScoredDoc> entries,
                                  std::string tag) {
        std::sort(entries.begin(), entries.end(), ranked_before);
        check_unique(entries);
        return RankedList(std::move(query_id), std::move(entries), std::move(tag));
    }

    static RankedList from_ranked_file(std::string query_id, std::vector<ScoredDoc> entries,
                                       std::string tag) {
        check_unique(entries);
        return RankedList(std::move(query_id), std::move(entries), std::move(tag));
    }

    const std::string& query_id() const { return query_id_; }
    const std::string& tag() const { return tag_; }
    const std::vector<ScoredDoc>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    RankedList top(std::size_t k) const {
        std::vector<ScoredDoc> head(entries_.begin(),
                                    entries_.begin() + std::min(k, entries_.size()));
        return RankedList(query_id_, std::move(head), tag_);
    }

    /// Same entries under a different query id (search functions do not know
    /// the query id; callers attach it).
    RankedList with_query_id(std::string query_id) const {
        return RankedList(std::move(query_id), entries_, tag_);
    }

    RankedList with_tag(std::string tag) const {
        return RankedList(query_id_, entries_, std::move(tag));
    }

    bool operator==(const RankedList& other) const {
        return query_id_ == other.query_id_ && tag_ == other.tag_ && entries_ == other.entries_;
    }

private:
    RankedList(std::string query_id, std::vector<ScoredDoc> entries, std::string tag)
        : query_id_(std::move(query_id)), entries_(std::move(entries)), tag_(std::move(tag)) {}

    static void check_unique(const std::vector<ScoredDoc>& entries) {
        std::unordered_set<std::string> seen;
        for (const auto& entry : entries) {
            if (!seen.insert(entry.doc_id).second) {
                throw Error("duplicate doc_id \"" + entry.doc_id + "\" in ranked list");
            }
        }
    }

    std::string query_id_;
    std::vector<ScoredDoc> entries_;
    std::string tag_;
};

namespace detail {

/// Split "id<TAB>rest" at the first tab.
inline std::pair<std::string_view, std::string_view> split_first_tab(std::string_view line) {
    auto pos = line.find('\t');
    if (pos == std::string_view::npos) {
        return {line, std::string_view{}};
    }
    return {line.substr(0, pos), line.substr(pos + 1)};
}

inline std::vector<std::string> split_whitespace(std::string_view line) {
    std::vector<std::string> fields;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
        std::size_t start = i;
        while (i < line.size() && line[i] != ' ' && line[i] != '\t') ++i;
        if (i > start) fields.emplace_back(line.substr(start, i - start));
    }
    return fields;
}

inline std::string strip_cr(std::string line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

inline std::ifstream open_input(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open \"" + path + "\" for reading");
    }
    return in;
}

inline std::ofstream open_output(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot open \"" + path + "\" for writing");
    }
    return out;
}

}  // namespace detail

enum class CollectionFormat { Tsv, Jsonl };

inline CollectionFormat collection_format_from_string(const std::string& name) {
    if (name == "tsv") return CollectionFormat::Tsv;
    if (name == "jsonl") return CollectionFormat::Jsonl;
    throw ConfigError("unknown collection format \"" + name + "\" (expected tsv or jsonl)");
}

/// Load a collection from "doc_id<TAB>text" lines or JSONL records
/// {"doc_id": ..., "text": ...}. Duplicate ids and malformed lines fail with
/// the offending line number.
inline Collection load_collection(const std::string& path,
                                  CollectionFormat format = CollectionFormat::Tsv) {
    auto in = detail::open_input(path);
    Collection collection;
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = detail::strip_cr(std::move(raw));
        if (line.empty()) continue;
        try {
            if (format == CollectionFormat::Tsv) {
                auto [id, text] = detail::split_first_tab(line);
                if (id.empty() || line.find('\t') == std::string::npos) {
                    throw ParseError("expected \"doc_id<TAB>text\"");
                }
                collection.add({std::string(id), std::string(text)});
            } else {
                auto record = nlohmann::json::parse(line);
                if (!record.is_object() || !record.contains("doc_id") || !record.contains("text")) {
                    throw ParseError("expected {\"doc_id\": ..., \"text\": ...}");
                }
                collection.add({record.at("doc_id").get<std::string>(),
                                record.at("text").get<std::string>()});
            }
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path, line_no, std::string("bad JSON record: ") + e.what());
        } catch (const ParseError& e) {
            throw ParseError(path, line_no, e.what());
        }
    }
    log_info("loaded " + std::to_string(collection.size()) + " documents from " + path);
    return collection;
}

/// Load "query_id<TAB>text" lines, preserving file order.
inline QuerySet load_queries(const std::string& path) {
    auto in = detail::open_input(path);
    QuerySet queries;
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = detail::strip_cr(std::move(raw));
        if (line.empty()) continue;
        if (line.find('\t') == std::string::npos) {
            throw ParseError(path, line_no, "expected \"query_id<TAB>text\"");
        }
        auto [id, text] = detail::split_first_tab(line);
        try {
            queries.add({std::string(id), std::string(text)});
        } catch (const ParseError& e) {
            throw ParseError(path, line_no, e.what());
        }
    }
    log_info("loaded " + std::to_string(queries.size()) + " queries from " + path);
    return queries;
}

/// Load TREC qrels: "query_id 0 doc_id grade", whitespace separated. A later
/// duplicate (query, doc) pair overwrites the earlier grade with a warning.
inline QrelsTable load_qrels(const std::string& path) {
    auto in = detail::open_input(path);
    QrelsTable qrels;
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = detail::strip_cr(std::move(raw));
        if (line.empty()) continue;
        auto fields = detail::split_whitespace(line);
        if (fields.size() != 4) {
            throw ParseError(path, line_no, "expected 4 columns \"query_id 0 doc_id grade\"");
        }
        int grade = 0;
        std::size_t consumed = 0;
        try {
            grade = std::stoi(fields[3], &consumed);
        } catch (const std::exception&) {
            throw ParseError(path, line_no, "non-integer grade \"" + fields[3] + "\"");
        }
        if (consumed != fields[3].size()) {
            throw ParseError(path, line_no, "non-integer grade \"" + fields[3] + "\"");
        }
        try {
            qrels.set(fields[0], fields[2], grade);
        } catch (const ParseError& e) {
            throw ParseError(path, line_no, e.what());
        }
    }
    return qrels;
}

/// Serialize a score the way run files store it: fixed 6 decimal places.
inline std::string format_run_score(double score) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", score);
    return buf;
}

/// Append one ranked list in TREC run format: "query_id Q0 doc_id rank score
/// tag", space separated, rank starting at 1.
inline void write_run_lines(std::ostream& out, const RankedList& list) {
    std::size_t rank = 0;
    for (const auto& entry : list.entries()) {
        ++rank;
        out << list.query_id() << " Q0 " << entry.doc_id << " " << rank << " "
            << format_run_score(entry.score) << " " << list.tag() << "\n";
    }
}

inline void write_run(const std::string& path, const std::vector<RankedList>& lists) {
    auto out = detail::open_output(path);
    for (const auto& list : lists) {
        write_run_lines(out, list);
    }
}

/// Read a TREC run file back into ranked lists, ordered by first appearance.
/// The rank column must count 1, 2, ... within each query.
inline std::vector<RankedList> read_run(const std::string& path) {
    auto in = detail::open_input(path);
    struct Partial {
        std::vector<ScoredDoc> entries;
        std::string tag;
    };
    std::vector<std::string> order;
    std::unordered_map<std::string, Partial> partial;

    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = detail::strip_cr(std::move(raw));
        if (line.empty()) continue;
        auto fields = detail::split_whitespace(line);
        if (fields.size() != 6) {
            throw ParseError(path, line_no, "expected 6 columns \"query_id Q0 doc_id rank score tag\"");
        }
        const std::string& query_id = fields[0];
        auto it = partial.find(query_id);
        if (it == partial.end()) {
            order.push_back(query_id);
            it = partial.emplace(query_id, Partial{{}, fields[5]}).first;
        }
        std::size_t expected_rank = it->second.entries.size() + 1;
        std::size_t parsed_rank = 0;
        try {
            parsed_rank = std::stoul(fields[3]);
        } catch (const std::exception&) {
            throw ParseError(path, line_no, "non-integer rank \"" + fields[3] + "\"");
        }
        if (parsed_rank != expected_rank) {
            throw ParseError(path, line_no,
                             "rank " + fields[3] + " out of order for query \"" + query_id +
                                 "\" (expected " + std::to_string(expected_rank) + ")");
        }
        double score = 0.0;
        try {
            score = std::stod(fields[4]);
        } catch (const std::exception&) {
            throw ParseError(path, line_no, "bad score \"" + fields[4] + "\"");
        }
        it->second.entries.push_back({fields[2], score});
    }

    std::vector<RankedList> lists;
    lists.reserve(order.size());
    for (const auto& query_id : order) {
        auto& p = partial.at(query_id);
        lists.push_back(RankedList::from_ranked_file(query_id, std::move(p.entries), p.tag));
    }
    return lists;
}

}  // namespace rflab
