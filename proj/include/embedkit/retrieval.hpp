#pragma once

// Exact cosine kNN over an in-memory gallery plus the retrieval evaluation:
// per-query average precision, global and per-vertical mAP, precision@5.
// Relevance is shared class label; verticals only stratify the report.

#include <cstddef>
#include <set>
#include <string>
#include <vector>

#include "embedkit/datastore.hpp"
#include "embedkit/numkit.hpp"

namespace embedkit {

struct Index {
    Matrix vectors;  // N x D, rows unit norm
    std::vector<std::string> ids;
    std::vector<std::string> classes;
    std::vector<std::string> verticals;

    std::size_t size() const { return ids.size(); }
};

// Rows are L2-normalized; class/vertical metadata is joined by id. Every bank
// id must appear in the manifest (extra manifest entries are ignored).
Index build_index(const FeatureBank& bank, const DatasetManifest& manifest);

struct RankedHit {
    std::string id;
    double score = 0.0;
};

struct Ranking {
    std::string query_id;
    std::vector<RankedHit> hits;  // scores non-increasing, ties by ascending id
};

// Exact top-k by cosine similarity; queries are row-normalized internally.
// Ties break by ascending index id. With exclude_self, a gallery entry whose
// id equals the query id is skipped. k larger than the candidate count is
// clipped with a warning on stderr.
std::vector<Ranking> knn(const Index& index, const Matrix& queries,
                         const std::vector<std::string>& query_ids, std::size_t k,
                         bool exclude_self);

// AP truncated at the ranking length: sum over hit ranks i of
// (hits so far / i), divided by total_relevant. Requires total_relevant >= 1.
double average_precision(const Ranking& ranking, const std::set<std::string>& relevant,
                         std::size_t total_relevant);

struct VerticalStat {
    std::string vertical;
    double map = 0.0;
    std::size_t n_queries = 0;
};

struct QueryResult {
    std::string query_id;
    std::string vertical;
    double ap = 0.0;
};

struct EvalReport {
    std::size_t n_queries = 0;   // evaluated
    std::size_t n_skipped = 0;   // class absent from the index
    std::size_t k = 0;
    double map = 0.0;
    double precision_at_5 = 0.0;
    std::vector<VerticalStat> per_vertical;  // sorted by vertical name
    std::vector<QueryResult> per_query;
};

// Queries whose class has no index member are skipped and counted. With
// exclude_self, a query's own gallery copy neither matches nor counts as
// relevant.
EvalReport evaluate(const Index& index, const FeatureBank& query_bank,
                    const DatasetManifest& query_manifest, std::size_t k,
                    bool exclude_self);

// Key/value text format with one `vertical,<name>,<mAP>,<n_queries>` line per
// vertical; deterministic for identical reports.
std::string format_eval_report(const EvalReport& report);
void write_eval_report(const EvalReport& report, const std::string& path);

// `query_id,vertical,ap` lines.
void write_per_query_ap(const EvalReport& report, const std::string& path);

}  // namespace embedkit
