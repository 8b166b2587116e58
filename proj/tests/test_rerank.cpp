#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "retkit/rerank.hpp"
#include "test_util.hpp"

using namespace retkit;
using rk_test::TempDir;

namespace {

struct Stores {
    DistanceStore qg, qq, gg;
};

Stores make_stores(const MatrixF& queries, const MatrixF& gallery) {
    EmbeddingSet q, g;
    q.matrix = queries;
    g.matrix = gallery;
    return {compute_distances(q, g, DistanceMetric::Euclidean),
            compute_distances(q, q, DistanceMetric::Euclidean),
            compute_distances(g, g, DistanceMetric::Euclidean)};
}

/// Set-arithmetic oracle for the expanded reciprocal neighborhood, written
/// directly from the definition (full sorts, explicit set operations).
std::vector<std::int64_t> oracle_expanded_set(const CombinedDistances& all, std::int64_t probe,
                                              int k1) {
    const std::int64_t n = all.size();
    const auto ranked = [&](std::int64_t i) {
        std::vector<std::int64_t> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
            const float da = all.at(i, a), db = all.at(i, b);
            return da != db ? da < db : a < b;
        });
        return order;
    };
    const auto top = [&](std::int64_t i, std::int64_t count) {
        const auto order = ranked(i);
        return std::set<std::int64_t>(order.begin(), order.begin() + std::min<std::int64_t>(count, n));
    };
    const auto reciprocal = [&](std::int64_t i, std::int64_t k) {
        std::set<std::int64_t> out;
        for (const std::int64_t j : top(i, k + 1))
            if (top(j, k + 1).count(i)) out.insert(j);
        return out;
    };

    const std::set<std::int64_t> base = reciprocal(probe, k1);
    std::set<std::int64_t> expanded = base;
    const std::int64_t half = (static_cast<std::int64_t>(k1) + 1) / 2;
    for (const std::int64_t j : base) {
        const std::set<std::int64_t> candidate = reciprocal(j, half);
        std::size_t overlap = 0;
        for (const std::int64_t c : candidate) overlap += base.count(c);
        if (3 * overlap >= 2 * candidate.size())
            expanded.insert(candidate.begin(), candidate.end());
    }
    return std::vector<std::int64_t>(expanded.begin(), expanded.end());
}

} // namespace

TEST_CASE("two mutually nearest points are in each other's reciprocal set at k1=1") {
    MatrixF queries(1, 1), gallery(3, 1);
    queries << 0.0f;
    gallery << 0.2f, 5.0f, 9.0f;
    const Stores s = make_stores(queries, gallery);
    const CombinedDistances all(s.qg, s.qq, s.gg);
    // combined ids: 0 = the query, 1..3 = gallery
    const NeighborSet of_query = k_reciprocal_neighbors(all, 0, 1);
    const NeighborSet of_match = k_reciprocal_neighbors(all, 1, 1);
    CHECK(std::count(of_query.members.begin(), of_query.members.end(), 1) == 1);
    CHECK(std::count(of_match.members.begin(), of_match.members.end(), 0) == 1);
    // weights are exp(-d)
    for (std::size_t i = 0; i < of_query.members.size(); ++i)
        CHECK(of_query.weights[i] ==
              doctest::Approx(std::exp(-static_cast<double>(all.at(0, of_query.members[i])))));
}

TEST_CASE("a nearest neighbor that does not reciprocate stays out of the basic set") {
    // line: A=0, B=1, C=1.5, D=100. A's nearest is B, but B's top-1 is C.
    MatrixF queries(1, 1), gallery(3, 1);
    queries << 0.0f;
    gallery << 1.0f, 1.5f, 100.0f;
    const Stores s = make_stores(queries, gallery);
    const CombinedDistances all(s.qg, s.qq, s.gg);
    const NeighborSet of_a = k_reciprocal_neighbors(all, 0, 1);
    CHECK(of_a.members == std::vector<std::int64_t>{0}); // only itself
    CHECK(oracle_expanded_set(all, 0, 1) == of_a.members);
}

TEST_CASE("expanded reciprocal sets match the set-arithmetic oracle on a random 30-point set") {
    const MatrixF queries = rk_test::random_matrix(61, 10, 4);
    const MatrixF gallery = rk_test::random_matrix(62, 20, 4);
    const Stores s = make_stores(queries, gallery);
    const CombinedDistances all(s.qg, s.qq, s.gg);
    for (std::int64_t probe = 0; probe < all.size(); ++probe) {
        const NeighborSet set = k_reciprocal_neighbors(all, probe, 5);
        CHECK(set.members == oracle_expanded_set(all, probe, 5));
    }
}

TEST_CASE("lambda = 1 reproduces the original distances and ranking exactly") {
    const MatrixF queries = rk_test::random_matrix(71, 12, 6);
    const MatrixF gallery = rk_test::random_matrix(72, 40, 6);
    const Stores s = make_stores(queries, gallery);
    RerankParams params;
    params.k1 = 8;
    params.k2 = 3;
    params.lambda = 1.0;
    const DistanceStore rr = rerank(s.qg, s.qq, s.gg, params);
    for (std::int64_t q = 0; q < 12; ++q)
        for (std::int64_t g = 0; g < 40; ++g) CHECK(rr.at(q, g) == s.qg.at(q, g));
    const auto before = topk_per_query(s.qg, 40);
    const auto after = topk_per_query(rr, 40);
    for (std::size_t i = 0; i < before.size(); ++i)
        CHECK(before[i].ranked_gallery == after[i].ranked_gallery);
}

TEST_CASE("identical neighbor encodings give zero Jaccard distance") {
    // gallery row 0 sits exactly on the query; both see the same neighborhood
    MatrixF queries(1, 2), gallery(4, 2);
    queries << 1.0f, 1.0f;
    gallery << 1.0f, 1.0f, 1.3f, 1.0f, 5.0f, 5.0f, 5.2f, 5.0f;
    const Stores s = make_stores(queries, gallery);
    RerankParams params;
    params.k1 = 2;
    params.k2 = 2;
    params.lambda = 0.0;
    const DistanceStore rr = rerank(s.qg, s.qq, s.gg, params);
    CHECK(rr.at(0, 0) == 0.0f);
    CHECK(rr.at(0, 2) > 0.5f); // far cluster stays far
}

TEST_CASE("re-ranked distances stay within [0, lambda*max_original + (1-lambda)]") {
    const MatrixF queries = rk_test::random_matrix(81, 8, 5);
    const MatrixF gallery = rk_test::random_matrix(82, 30, 5);
    const Stores s = make_stores(queries, gallery);
    RerankParams params;
    params.k1 = 6;
    params.k2 = 2;
    params.lambda = 0.3;
    float max_orig = 0.0f;
    for (std::int64_t q = 0; q < 8; ++q)
        for (std::int64_t g = 0; g < 30; ++g) max_orig = std::max(max_orig, s.qg.at(q, g));
    const DistanceStore rr = rerank(s.qg, s.qq, s.gg, params);
    const double bound = params.lambda * max_orig + (1.0 - params.lambda);
    for (std::int64_t q = 0; q < 8; ++q)
        for (std::int64_t g = 0; g < 30; ++g) {
            CHECK(rr.at(q, g) >= 0.0f);
            CHECK(rr.at(q, g) <= doctest::Approx(bound).epsilon(1e-6));
        }
}

TEST_CASE("disk-backed and in-memory re-ranking are bit-identical; threads do not matter") {
    TempDir dir("rrspill");
    const MatrixF queries = rk_test::random_matrix(91, 9, 4);
    const MatrixF gallery = rk_test::random_matrix(92, 25, 4);
    EmbeddingSet q, g;
    q.matrix = queries;
    g.matrix = gallery;

    const Stores mem = make_stores(queries, gallery);
    const DistanceStore qg_d = compute_distances(q, g, DistanceMetric::Euclidean, TileSpec{4, 8},
                                                 Backing::DiskSpilled, dir / "qg.dist");
    const DistanceStore qq_d = compute_distances(q, q, DistanceMetric::Euclidean, TileSpec{4, 8},
                                                 Backing::DiskSpilled, dir / "qq.dist");
    const DistanceStore gg_d = compute_distances(g, g, DistanceMetric::Euclidean, TileSpec{4, 8},
                                                 Backing::DiskSpilled, dir / "gg.dist");

    RerankParams params;
    params.k1 = 7;
    params.k2 = 3;
    params.lambda = 0.3;
    const DistanceStore a = rerank(mem.qg, mem.qq, mem.gg, params, 1);
    const DistanceStore b = rerank(qg_d, qq_d, gg_d, params, 1);
    const DistanceStore c = rerank(mem.qg, mem.qq, mem.gg, params, 4);
    for (std::int64_t qi = 0; qi < 9; ++qi)
        for (std::int64_t gi = 0; gi < 25; ++gi) {
            CHECK(a.at(qi, gi) == b.at(qi, gi));
            CHECK(a.at(qi, gi) == c.at(qi, gi));
        }
}

TEST_CASE("parameter and shape validation") {
    const MatrixF queries = rk_test::random_matrix(95, 4, 3);
    const MatrixF gallery = rk_test::random_matrix(96, 6, 3);
    const Stores s = make_stores(queries, gallery);
    RerankParams params;

    params.k1 = 0;
    CHECK_THROWS_AS(rerank(s.qg, s.qq, s.gg, params), ValidationError);
    params.k1 = 3;
    params.k2 = 5;
    CHECK_THROWS_AS(rerank(s.qg, s.qq, s.gg, params), ValidationError);
    params.k2 = 2;
    params.lambda = 1.5;
    CHECK_THROWS_AS(rerank(s.qg, s.qq, s.gg, params), ValidationError);
    params.lambda = 0.3;
    params.k1 = 10; // >= Q + G
    CHECK_THROWS_AS(rerank(s.qg, s.qq, s.gg, params), ValidationError);
    // mismatched shapes: gg of the wrong size
    CHECK_THROWS_AS(CombinedDistances(s.qg, s.qq, s.qq), ValidationError);
}
