#include "retkit/rerank.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "retkit/parallel.hpp"

namespace retkit {

CombinedDistances::CombinedDistances(const DistanceStore& qg, const DistanceStore& qq,
                                     const DistanceStore& gg)
    : qg_(&qg), qq_(&qq), gg_(&gg), n_queries_(qg.n_queries()), n_gallery_(qg.n_gallery()) {
    if (qq.n_queries() != n_queries_ || qq.n_gallery() != n_queries_)
        throw ValidationError("rerank: query-query store must be Q x Q");
    if (gg.n_queries() != n_gallery_ || gg.n_gallery() != n_gallery_)
        throw ValidationError("rerank: gallery-gallery store must be G x G");
    if (qq.metric() != qg.metric() || gg.metric() != qg.metric())
        throw ValidationError("rerank: the three stores use different metrics");
}

float CombinedDistances::at(std::int64_t i, std::int64_t j) const {
    const bool iq = i < n_queries_;
    const bool jq = j < n_queries_;
    if (iq && jq) return qq_->at(i, j);
    if (iq && !jq) return qg_->at(i, j - n_queries_);
    if (!iq && jq) return qg_->at(j, i - n_queries_);
    return gg_->at(i - n_queries_, j - n_queries_);
}

void CombinedDistances::read_row(std::int64_t i, float* out) const {
    if (i < n_queries_) {
        qq_->read_row(i, out);
        qg_->read_row(i, out + n_queries_);
        return;
    }
    const std::int64_t g = i - n_queries_;
    for (std::int64_t q = 0; q < n_queries_; ++q) out[q] = qg_->at(q, g);
    gg_->read_row(g, out + n_queries_);
}

namespace {

/// Ranked prefix of one combined row: ids by ascending (distance, index).
struct RankedPrefix {
    std::vector<std::int64_t> ids; // length min(prefix, n)
};

std::vector<RankedPrefix> ranked_prefixes(const CombinedDistances& all, std::int64_t prefix,
                                          int threads) {
    const std::int64_t n = all.size();
    std::vector<RankedPrefix> lists(static_cast<std::size_t>(n));
    const std::int64_t take = std::min(prefix, n);
    parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t a, std::size_t b) {
        std::vector<float> row(static_cast<std::size_t>(n));
        std::vector<std::int64_t> order(static_cast<std::size_t>(n));
        for (std::size_t i = a; i < b; ++i) {
            all.read_row(static_cast<std::int64_t>(i), row.data());
            std::iota(order.begin(), order.end(), std::int64_t{0});
            std::partial_sort(order.begin(), order.begin() + take, order.end(),
                              [&row](std::int64_t x, std::int64_t y) {
                                  const float dx = row[static_cast<std::size_t>(x)];
                                  const float dy = row[static_cast<std::size_t>(y)];
                                  return dx != dy ? dx < dy : x < y;
                              });
            lists[i].ids.assign(order.begin(), order.begin() + take);
        }
    });
    return lists;
}

bool in_prefix(const RankedPrefix& list, std::int64_t id, std::int64_t count) {
    const std::int64_t limit = std::min<std::int64_t>(count, static_cast<std::int64_t>(list.ids.size()));
    for (std::int64_t i = 0; i < limit; ++i)
        if (list.ids[static_cast<std::size_t>(i)] == id) return true;
    return false;
}

/// Base reciprocal set R(i, k): mutual membership in the k+1 ranked prefix.
std::vector<std::int64_t> reciprocal_set(const std::vector<RankedPrefix>& lists, std::int64_t i,
                                         std::int64_t k) {
    std::vector<std::int64_t> out;
    const auto& mine = lists[static_cast<std::size_t>(i)].ids;
    const std::int64_t limit = std::min<std::int64_t>(k + 1, static_cast<std::int64_t>(mine.size()));
    for (std::int64_t r = 0; r < limit; ++r) {
        const std::int64_t j = mine[static_cast<std::size_t>(r)];
        if (in_prefix(lists[static_cast<std::size_t>(j)], i, k + 1)) out.push_back(j);
    }
    return out;
}

std::vector<std::int64_t> expanded_reciprocal_set(const std::vector<RankedPrefix>& lists,
                                                  std::int64_t i, int k1) {
    const std::vector<std::int64_t> base = reciprocal_set(lists, i, k1);
    const std::unordered_set<std::int64_t> base_set(base.begin(), base.end());
    std::vector<std::int64_t> expanded = base;
    const std::int64_t half = (static_cast<std::int64_t>(k1) + 1) / 2;
    for (const std::int64_t j : base) {
        const std::vector<std::int64_t> candidate = reciprocal_set(lists, j, half);
        std::size_t overlap = 0;
        for (const std::int64_t c : candidate) overlap += base_set.count(c);
        if (3 * overlap >= 2 * candidate.size())
            expanded.insert(expanded.end(), candidate.begin(), candidate.end());
    }
    std::sort(expanded.begin(), expanded.end());
    expanded.erase(std::unique(expanded.begin(), expanded.end()), expanded.end());
    return expanded;
}

} // namespace

NeighborSet k_reciprocal_neighbors(const CombinedDistances& all, std::int64_t probe, int k1) {
    if (probe < 0 || probe >= all.size())
        throw ValidationError("k_reciprocal_neighbors: probe out of range");
    if (k1 < 1 || k1 >= all.size())
        throw ValidationError("k_reciprocal_neighbors: k1 out of range");
    const auto lists = ranked_prefixes(all, static_cast<std::int64_t>(k1) + 1, 1);
    NeighborSet set;
    set.members = expanded_reciprocal_set(lists, probe, k1);
    set.weights.reserve(set.members.size());
    for (const std::int64_t m : set.members)
        set.weights.push_back(std::exp(-static_cast<double>(all.at(probe, m))));
    return set;
}

DistanceStore rerank(const DistanceStore& store_qg, const DistanceStore& store_qq,
                     const DistanceStore& store_gg, const RerankParams& params, int threads) {
    const CombinedDistances all(store_qg, store_qq, store_gg);
    const std::int64_t n = all.size();
    const std::int64_t n_q = all.n_queries();
    const std::int64_t n_g = all.n_gallery();
    params.validate(n);

    // self distances must vanish for the ranked-prefix convention to hold
    for (std::int64_t i = 0; i < n; ++i)
        if (all.at(i, i) > 1e-5f)
            throw ValidationError("rerank: store diagonal entry " + std::to_string(i) +
                                  " is not ~0; stores are not slices of one metric space");

    const std::int64_t prefix = std::max<std::int64_t>(params.k1 + 1, params.k2);
    const auto lists = ranked_prefixes(all, prefix, threads);

    // sparse L1-normalized affinity encodings over the expanded reciprocal sets
    std::vector<std::vector<std::int64_t>> enc_ids(static_cast<std::size_t>(n));
    std::vector<std::vector<double>> enc_w(static_cast<std::size_t>(n));
    parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t a, std::size_t b) {
        for (std::size_t i = a; i < b; ++i) {
            auto members = expanded_reciprocal_set(lists, static_cast<std::int64_t>(i), params.k1);
            std::vector<double> w(members.size());
            double sum = 0.0;
            for (std::size_t m = 0; m < members.size(); ++m) {
                w[m] = std::exp(-static_cast<double>(all.at(static_cast<std::int64_t>(i), members[m])));
                sum += w[m];
            }
            for (double& v : w) v /= sum;
            enc_ids[i] = std::move(members);
            enc_w[i] = std::move(w);
        }
    });

    // local query expansion: average encodings over the k2 nearest probes
    std::vector<std::vector<std::int64_t>> lqe_ids(static_cast<std::size_t>(n));
    std::vector<std::vector<double>> lqe_w(static_cast<std::size_t>(n));
    parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t a, std::size_t b) {
        std::vector<double> dense; // scratch; weights are > 0 so zero means untouched
        for (std::size_t i = a; i < b; ++i) {
            std::vector<std::int64_t> touched;
            dense.assign(static_cast<std::size_t>(n), 0.0);
            const auto& near = lists[i].ids;
            const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(params.k2), near.size());
            for (std::size_t t = 0; t < take; ++t) {
                const auto l = static_cast<std::size_t>(near[t]);
                for (std::size_t m = 0; m < enc_ids[l].size(); ++m) {
                    const auto id = static_cast<std::size_t>(enc_ids[l][m]);
                    if (dense[id] == 0.0) touched.push_back(static_cast<std::int64_t>(id));
                    dense[id] += enc_w[l][m];
                }
            }
            std::sort(touched.begin(), touched.end());
            lqe_ids[i] = touched;
            lqe_w[i].resize(touched.size());
            for (std::size_t m = 0; m < touched.size(); ++m)
                lqe_w[i][m] = dense[static_cast<std::size_t>(touched[m])] / static_cast<double>(take);
        }
    });

    // inverted index over gallery encodings: feature id -> (gallery idx, weight)
    std::vector<std::vector<std::pair<std::int64_t, double>>> inverted(static_cast<std::size_t>(n));
    for (std::int64_t g = 0; g < n_g; ++g) {
        const auto i = static_cast<std::size_t>(n_q + g);
        for (std::size_t m = 0; m < lqe_ids[i].size(); ++m)
            inverted[static_cast<std::size_t>(lqe_ids[i][m])].emplace_back(g, lqe_w[i][m]);
    }

    // fuzzy Jaccard, one query row at a time; rows sum to 1 so
    // sum(max) = 2 - sum(min)
    std::vector<float> final_values(static_cast<std::size_t>(n_q * n_g));
    parallel_for(static_cast<std::size_t>(n_q), threads, [&](std::size_t qa, std::size_t qb) {
        std::vector<double> min_sum(static_cast<std::size_t>(n_g));
        std::vector<float> orig_row(static_cast<std::size_t>(n_g));
        for (std::size_t q = qa; q < qb; ++q) {
            std::fill(min_sum.begin(), min_sum.end(), 0.0);
            for (std::size_t m = 0; m < lqe_ids[q].size(); ++m) {
                const double wq = lqe_w[q][m];
                for (const auto& [g, wg] : inverted[static_cast<std::size_t>(lqe_ids[q][m])])
                    min_sum[static_cast<std::size_t>(g)] += std::min(wq, wg);
            }
            store_qg.read_row(static_cast<std::int64_t>(q), orig_row.data());
            for (std::int64_t g = 0; g < n_g; ++g) {
                const double jaccard =
                    1.0 - min_sum[static_cast<std::size_t>(g)] / (2.0 - min_sum[static_cast<std::size_t>(g)]);
                const double mixed = params.lambda * static_cast<double>(orig_row[static_cast<std::size_t>(g)]) +
                                     (1.0 - params.lambda) * jaccard;
                final_values[q * static_cast<std::size_t>(n_g) + static_cast<std::size_t>(g)] =
                    static_cast<float>(mixed);
            }
        }
    });

    return DistanceStore::from_values(std::move(final_values), n_q, n_g, store_qg.metric());
}

} // namespace retkit
