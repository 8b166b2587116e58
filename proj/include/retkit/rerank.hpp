#pragma once

#include <cstdint>
#include <vector>

#include "retkit/distance.hpp"

namespace retkit {

/// Symmetric (Q+G) x (Q+G) view over the three pairwise stores of one run.
/// Index layout: queries first (0..Q-1), then gallery (Q..Q+G-1).
class CombinedDistances {
public:
    CombinedDistances(const DistanceStore& qg, const DistanceStore& qq, const DistanceStore& gg);

    std::int64_t size() const { return n_queries_ + n_gallery_; }
    std::int64_t n_queries() const { return n_queries_; }
    std::int64_t n_gallery() const { return n_gallery_; }

    float at(std::int64_t i, std::int64_t j) const;
    /// Copies combined row i (size() values) into out.
    void read_row(std::int64_t i, float* out) const;

private:
    const DistanceStore* qg_;
    const DistanceStore* qq_;
    const DistanceStore* gg_;
    std::int64_t n_queries_ = 0;
    std::int64_t n_gallery_ = 0;
};

/// Expanded k-reciprocal neighborhood of one probe. members are combined
/// indices in ascending order; weights[i] = exp(-d(probe, members[i])).
struct NeighborSet {
    std::vector<std::int64_t> members;
    std::vector<double> weights;
};

/// R*(probe, k1): probes q with q in N(probe,k1) and probe in N(q,k1), where
/// N(p,k) is the first k+1 entries of p's ranked list (the probe itself ranks
/// first at distance 0). The set is expanded by each member's half-k1
/// reciprocal set whenever at least 2/3 of that set already overlaps the base
/// set; half-k1 = (k1+1)/2 in integer arithmetic.
NeighborSet k_reciprocal_neighbors(const CombinedDistances& all, std::int64_t probe, int k1);

/// k-reciprocal re-ranking. Builds weighted neighbor encodings for every
/// probe (L1-normalized Gaussian affinities over R*), averages them over each
/// probe's k2 nearest (local query expansion), and mixes the original
/// distance with the fuzzy Jaccard distance between encodings:
///
///   final(q,g) = lambda * d_original(q,g) + (1-lambda) * d_jaccard(q,g)
///
/// lambda = 1 returns the original distances exactly. Encodings stay sparse
/// and Jaccard rows are streamed one probe at a time; no dense (Q+G)^2 matrix
/// is ever held.
DistanceStore rerank(const DistanceStore& store_qg, const DistanceStore& store_qq,
                     const DistanceStore& store_gg, const RerankParams& params, int threads = 1);

} // namespace retkit
