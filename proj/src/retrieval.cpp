#include "embedkit/retrieval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <stdexcept>
#include <unordered_map>

namespace embedkit {

Index build_index(const FeatureBank& bank, const DatasetManifest& manifest) {
    if (bank.count() == 0) throw std::invalid_argument("build_index: empty feature bank");
    std::unordered_map<std::string, const ManifestEntry*> by_id;
    for (const auto& e : manifest.entries) by_id[e.id] = &e;

    Index index;
    index.vectors = l2_normalize_rows(bank.features);
    index.ids = bank.ids;
    index.classes.reserve(bank.count());
    index.verticals.reserve(bank.count());
    for (const auto& id : bank.ids) {
        auto it = by_id.find(id);
        if (it == by_id.end())
            throw std::invalid_argument("build_index: bank id '" + id +
                                        "' missing from manifest");
        index.classes.push_back(it->second->class_label);
        index.verticals.push_back(it->second->vertical);
    }
    return index;
}

std::vector<Ranking> knn(const Index& index, const Matrix& queries,
                         const std::vector<std::string>& query_ids, std::size_t k,
                         bool exclude_self) {
    if (queries.cols() != index.vectors.cols())
        throw std::invalid_argument("knn: query dim " + std::to_string(queries.cols()) +
                                    " != index dim " + std::to_string(index.vectors.cols()));
    if (query_ids.size() != queries.rows())
        throw std::invalid_argument("knn: query id count mismatch");
    if (k < 1) throw std::invalid_argument("knn: k must be >= 1");

    Matrix q_hat = l2_normalize_rows(queries);
    Matrix scores = matmul(q_hat, transpose(index.vectors));  // Q x N

    const std::size_t n = index.size();
    std::vector<Ranking> out;
    out.reserve(queries.rows());
    for (std::size_t q = 0; q < queries.rows(); ++q) {
        std::vector<std::size_t> cand;
        cand.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            if (exclude_self && index.ids[i] == query_ids[q]) continue;
            cand.push_back(i);
        }
        std::size_t kq = k;
        if (kq > cand.size()) {
            std::cerr << "knn: k=" << k << " clipped to " << cand.size()
                      << " available candidates for query '" << query_ids[q] << "'\n";
            kq = cand.size();
        }
        auto better = [&](std::size_t a, std::size_t b) {
            if (scores(q, a) != scores(q, b)) return scores(q, a) > scores(q, b);
            return index.ids[a] < index.ids[b];
        };
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(kq),
                          cand.end(), better);

        Ranking r;
        r.query_id = query_ids[q];
        r.hits.reserve(kq);
        for (std::size_t i = 0; i < kq; ++i)
            r.hits.push_back({index.ids[cand[i]], scores(q, cand[i])});
        out.push_back(std::move(r));
    }
    return out;
}

double average_precision(const Ranking& ranking, const std::set<std::string>& relevant,
                         std::size_t total_relevant) {
    if (total_relevant < 1)
        throw std::invalid_argument("average_precision: total_relevant must be >= 1");
    std::size_t hits = 0;
    double sum = 0.0;
    for (std::size_t i = 0; i < ranking.hits.size(); ++i) {
        if (relevant.count(ranking.hits[i].id)) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(i + 1);
        }
    }
    return sum / static_cast<double>(total_relevant);
}

EvalReport evaluate(const Index& index, const FeatureBank& query_bank,
                    const DatasetManifest& query_manifest, std::size_t k, bool exclude_self) {
    std::unordered_map<std::string, const ManifestEntry*> meta;
    for (const auto& e : query_manifest.entries) meta[e.id] = &e;
    for (const auto& id : query_bank.ids)
        if (!meta.count(id))
            throw std::invalid_argument("evaluate: query id '" + id + "' missing from manifest");

    // gallery members per class, for relevance sets and totals
    std::unordered_map<std::string, std::vector<std::size_t>> members_of;
    for (std::size_t i = 0; i < index.size(); ++i) members_of[index.classes[i]].push_back(i);

    std::vector<Ranking> rankings =
        knn(index, query_bank.features, query_bank.ids, k, exclude_self);

    EvalReport report;
    report.k = k;
    std::map<std::string, std::pair<double, std::size_t>> vertical_acc;  // sum AP, count
    double ap_sum = 0.0, p5_sum = 0.0;

    for (std::size_t q = 0; q < query_bank.ids.size(); ++q) {
        const ManifestEntry& entry = *meta[query_bank.ids[q]];
        auto mem = members_of.find(entry.class_label);

        std::set<std::string> relevant;
        if (mem != members_of.end())
            for (std::size_t i : mem->second) {
                if (exclude_self && index.ids[i] == entry.id) continue;
                relevant.insert(index.ids[i]);
            }
        if (relevant.empty()) {
            ++report.n_skipped;
            continue;
        }

        double ap = average_precision(rankings[q], relevant, relevant.size());
        ap_sum += ap;
        std::size_t hits5 = 0;
        for (std::size_t i = 0; i < std::min<std::size_t>(5, rankings[q].hits.size()); ++i)
            if (relevant.count(rankings[q].hits[i].id)) ++hits5;
        p5_sum += static_cast<double>(hits5) / 5.0;

        ++report.n_queries;
        auto& acc = vertical_acc[entry.vertical];
        acc.first += ap;
        acc.second += 1;
        report.per_query.push_back({entry.id, entry.vertical, ap});
    }

    if (report.n_queries == 0) throw std::invalid_argument("evaluate: zero evaluable queries");
    report.map = ap_sum / static_cast<double>(report.n_queries);
    report.precision_at_5 = p5_sum / static_cast<double>(report.n_queries);
    for (const auto& [vertical, acc] : vertical_acc)
        report.per_vertical.push_back(
            {vertical, acc.first / static_cast<double>(acc.second), acc.second});
    return report;
}

std::string format_eval_report(const EvalReport& report) {
    char buf[160];
    std::string out;
    std::snprintf(buf, sizeof(buf), "queries,%zu\n", report.n_queries);
    out += buf;
    std::snprintf(buf, sizeof(buf), "skipped,%zu\n", report.n_skipped);
    out += buf;
    std::snprintf(buf, sizeof(buf), "k,%zu\n", report.k);
    out += buf;
    std::snprintf(buf, sizeof(buf), "map,%.9f\n", report.map);
    out += buf;
    std::snprintf(buf, sizeof(buf), "precision_at_5,%.9f\n", report.precision_at_5);
    out += buf;
    for (const auto& v : report.per_vertical) {
        std::snprintf(buf, sizeof(buf), "vertical,%s,%.9f,%zu\n", v.vertical.c_str(), v.map,
                      v.n_queries);
        out += buf;
    }
    return out;
}

void write_eval_report(const EvalReport& report, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("write_eval_report: cannot open '" + path + "'");
    os << format_eval_report(report);
}

void write_per_query_ap(const EvalReport& report, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("write_per_query_ap: cannot open '" + path + "'");
    os << "query_id,vertical,ap\n";
    char buf[160];
    for (const auto& q : report.per_query) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%.9f\n", q.query_id.c_str(), q.vertical.c_str(),
                      q.ap);
        os << buf;
    }
}

}  // namespace embedkit
