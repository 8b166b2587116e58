#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "retkit/core.hpp"
#include "retkit/distance.hpp"

namespace retkit {

/// query row -> gallery rows with the same product (ascending).
using GroundTruth = std::unordered_map<std::int64_t, std::vector<std::int64_t>>;

GroundTruth build_ground_truth(const EmbeddingSet& queries, const EmbeddingSet& gallery);

enum class Protocol { Unconstrained, ConstrainedByCategory, CrossDomain };

const char* to_string(Protocol p);

struct CategoryMetrics {
    std::int64_t n_queries = 0;
    std::map<std::string, double> values;
};

/// Every metric value lies in [0, 1]. per_category counts sum to
/// n_queries_total; skipped queries (no ground truth in the candidate set)
/// are excluded from all averages and counted separately.
struct MetricsReport {
    Protocol protocol = Protocol::Unconstrained;
    std::map<std::string, double> overall;
    std::map<std::string, CategoryMetrics> per_category;
    std::map<std::string, double> category_simple_mean;   // each category weighs 1
    std::map<std::string, double> category_weighted_mean; // weighted by query count
    std::int64_t n_queries_total = 0;
    std::int64_t n_queries_skipped = 0;
    bool estimated = false;
    std::map<std::string, double> penalties; // set by the conservative estimator
};

/// Fraction of queries whose top-k prefix contains at least one ground-truth
/// row. Every query must have non-empty ground truth and a ranked list of
/// length >= k.
double acc_at_k(const std::vector<RankedResult>& results, const GroundTruth& ground_truth,
                std::int64_t k);

/// Mean over queries of average precision: AP = (1/|R|) * sum of precision at
/// each relevant rank. Ranked lists must cover all relevant items.
double mean_ap(const std::vector<RankedResult>& results, const GroundTruth& ground_truth);

/// Full evaluation pass over a distance store. Unconstrained ranks the whole
/// gallery per query; constrained restricts each query's candidates to
/// gallery rows sharing its category before ranking.
MetricsReport evaluate(const EmbeddingSet& queries, const EmbeddingSet& gallery,
                       const DistanceStore& store, const EvalConfig& config);

/// Conservative stand-in for an infeasible re-ranked unconstrained run:
/// penalty_m = max(0, weighted_avg_m(plain) - unconstrained_m(plain)),
/// estimate_m = clamp(weighted_avg_m(reranked) - penalty_m, 0, 1).
/// The result is flagged estimated and carries the per-metric penalties.
MetricsReport estimate_reranked_unconstrained(
    const std::map<std::string, CategoryMetrics>& per_category_reranked,
    const std::map<std::string, CategoryMetrics>& per_category_plain,
    const std::map<std::string, double>& unconstrained_plain);

} // namespace retkit
