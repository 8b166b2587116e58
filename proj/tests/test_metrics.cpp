#include "doctest.h"

#include <algorithm>
#include <numeric>
#include <set>

#include "retkit/metrics.hpp"
#include "test_util.hpp"

using namespace retkit;

namespace {

RankedResult make_result(std::int64_t query_row, std::vector<std::int64_t> order) {
    RankedResult r;
    r.query_row = query_row;
    r.distances.resize(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) r.distances[i] = static_cast<float>(i);
    r.ranked_gallery = std::move(order);
    return r;
}

/// Brute-force oracle: rescans the full ranked list per query.
double oracle_acc_at_k(const std::vector<RankedResult>& results, const GroundTruth& gt,
                       std::int64_t k) {
    std::int64_t hits = 0;
    for (const auto& r : results) {
        const auto& relevant = gt.at(r.query_row);
        bool hit = false;
        for (std::int64_t i = 0; i < k; ++i)
            for (const std::int64_t g : relevant)
                if (r.ranked_gallery[static_cast<std::size_t>(i)] == g) hit = true;
        hits += hit ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(results.size());
}

double oracle_mean_ap(const std::vector<RankedResult>& results, const GroundTruth& gt) {
    double sum = 0.0;
    for (const auto& r : results) {
        const auto& relevant = gt.at(r.query_row);
        double ap = 0.0;
        std::int64_t found = 0;
        for (std::size_t rank = 0; rank < r.ranked_gallery.size(); ++rank) {
            bool is_rel = false;
            for (const std::int64_t g : relevant)
                if (r.ranked_gallery[rank] == g) is_rel = true;
            if (is_rel) {
                ++found;
                ap += static_cast<double>(found) / static_cast<double>(rank + 1);
            }
        }
        sum += ap / static_cast<double>(relevant.size());
    }
    return sum / static_cast<double>(results.size());
}

EmbeddingSet make_labeled_set(const MatrixF& m, const std::vector<std::string>& products,
                              const std::vector<std::string>& categories, Domain domain) {
    EmbeddingSet set;
    set.matrix = m;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        set.records.push_back({(domain == Domain::Query ? "q" : "g") + std::to_string(r),
                               products[static_cast<std::size_t>(r)],
                               categories[static_cast<std::size_t>(r)], domain, r});
    return set;
}

} // namespace

TEST_CASE("acc_at_k: direct evaluations") {
    GroundTruth gt;
    gt[0] = {5};
    CHECK(acc_at_k({make_result(0, {5, 1, 2})}, gt, 1) == 1.0);

    // first-relevant ranks 2, 5, 11 with k = 10 -> 2/3
    GroundTruth gt3;
    gt3[0] = {1};
    gt3[1] = {4};
    gt3[2] = {10};
    std::vector<RankedResult> results;
    for (std::int64_t q = 0; q < 3; ++q) {
        std::vector<std::int64_t> order(12);
        std::iota(order.begin(), order.end(), 0);
        results.push_back(make_result(q, order)); // relevant id == its rank position
    }
    CHECK(acc_at_k(results, gt3, 10) == doctest::Approx(2.0 / 3.0));
    CHECK(acc_at_k(results, gt3, 10) == oracle_acc_at_k(results, gt3, 10));
}

TEST_CASE("acc_at_k: error paths") {
    GroundTruth gt;
    gt[0] = {};
    CHECK_THROWS_AS(acc_at_k({make_result(0, {1, 2})}, gt, 1), ValidationError);
    GroundTruth ok;
    ok[0] = {1};
    CHECK_THROWS_AS(acc_at_k({make_result(0, {1, 2})}, ok, 3), ValidationError);
}

TEST_CASE("mean_ap: direct evaluations") {
    GroundTruth gt;
    gt[0] = {7};
    CHECK(mean_ap({make_result(0, {7, 1, 2})}, gt) == 1.0);
    CHECK(mean_ap({make_result(0, {1, 7, 2})}, gt) == 0.5);
    GroundTruth two;
    two[0] = {3, 9};
    // relevant at ranks 1 and 3 -> (1 + 2/3)/2 = 5/6
    CHECK(mean_ap({make_result(0, {3, 1, 9, 2})}, two) == doctest::Approx(5.0 / 6.0));
}

TEST_CASE("metrics equal the brute-force oracle exactly on random instances") {
    Rng rng(2024);
    for (int instance = 0; instance < 25; ++instance) {
        const std::int64_t n_g = 20 + static_cast<std::int64_t>(rng.uniform_int(80));
        const std::int64_t n_q = 5 + static_cast<std::int64_t>(rng.uniform_int(30));
        GroundTruth gt;
        std::vector<RankedResult> results;
        for (std::int64_t q = 0; q < n_q; ++q) {
            std::vector<std::int64_t> order(static_cast<std::size_t>(n_g));
            std::iota(order.begin(), order.end(), 0);
            rng.shuffle(order);
            results.push_back(make_result(q, order));
            std::set<std::int64_t> rel;
            const std::size_t n_rel = 1 + rng.uniform_int(5);
            while (rel.size() < n_rel) rel.insert(static_cast<std::int64_t>(rng.uniform_int(n_g)));
            gt[q] = std::vector<std::int64_t>(rel.begin(), rel.end());
        }
        for (const std::int64_t k : {1, 5, 10, 20})
            CHECK(acc_at_k(results, gt, k) == oracle_acc_at_k(results, gt, k));
        CHECK(mean_ap(results, gt) == oracle_mean_ap(results, gt));
    }
}

TEST_CASE("acc_at_k is non-decreasing in k; mAP is 1 iff relevant items lead") {
    GroundTruth gt;
    gt[0] = {2, 4};
    const auto r = make_result(0, {2, 4, 0, 1, 3});
    CHECK(mean_ap({r}, gt) == 1.0);
    const auto worse = make_result(0, {2, 0, 4, 1, 3});
    CHECK(mean_ap({worse}, gt) < 1.0);
    double prev = 0.0;
    for (std::int64_t k = 1; k <= 5; ++k) {
        const double acc = acc_at_k({worse}, gt, k);
        CHECK(acc >= prev);
        prev = acc;
    }
}

TEST_CASE("evaluate: single-category data makes the constraint vacuous") {
    const MatrixF qm = rk_test::random_matrix(31, 6, 5);
    const MatrixF gm = rk_test::random_matrix(32, 18, 5);
    std::vector<std::string> q_products, g_products, q_cats, g_cats;
    for (int i = 0; i < 6; ++i) {
        q_products.push_back("p" + std::to_string(i));
        q_cats.push_back("only");
    }
    for (int i = 0; i < 18; ++i) {
        g_products.push_back("p" + std::to_string(i % 9));
        g_cats.push_back("only");
    }
    const EmbeddingSet q = make_labeled_set(qm, q_products, q_cats, Domain::Query);
    const EmbeddingSet g = make_labeled_set(gm, g_products, g_cats, Domain::Gallery);
    const DistanceStore store = compute_distances(q, g, DistanceMetric::Euclidean);

    EvalConfig cfg;
    cfg.k_values = {1, 5, 10};
    cfg.constrained = ConstraintMode::None;
    const MetricsReport unconstrained = evaluate(q, g, store, cfg);
    cfg.constrained = ConstraintMode::ByCategory;
    const MetricsReport constrained = evaluate(q, g, store, cfg);

    CHECK(unconstrained.overall == constrained.overall);
    CHECK(unconstrained.n_queries_total == constrained.n_queries_total);
    CHECK(constrained.protocol == Protocol::ConstrainedByCategory);
    // single category: weighted average equals that category's value
    for (const auto& [name, value] : constrained.category_weighted_mean)
        CHECK(value == constrained.per_category.at("only").values.at(name));
}

TEST_CASE("evaluate: cross-category distractors make constrained beat unconstrained") {
    // per query: true match at distance 0.5 (same category), distractor from
    // the other category at 0.3
    const int n = 4;
    MatrixF qm(n, 1), gm(2 * n, 1);
    std::vector<std::string> qp, gp, qc, gc;
    for (int i = 0; i < n; ++i) {
        const float base = 100.0f * static_cast<float>(i);
        qm(i, 0) = base;
        gm(2 * i, 0) = base + 0.5f;     // match, category A
        gm(2 * i + 1, 0) = base - 0.3f; // distractor, category B
        qp.push_back("p" + std::to_string(i));
        qc.push_back("A");
        gp.push_back("p" + std::to_string(i));
        gc.push_back("A");
        gp.push_back("other" + std::to_string(i));
        gc.push_back("B");
    }
    const EmbeddingSet q = make_labeled_set(qm, qp, qc, Domain::Query);
    const EmbeddingSet g = make_labeled_set(gm, gp, gc, Domain::Gallery);
    const DistanceStore store = compute_distances(q, g, DistanceMetric::Euclidean);

    EvalConfig cfg;
    cfg.k_values = {1};
    const MetricsReport plain = evaluate(q, g, store, cfg);
    cfg.constrained = ConstraintMode::ByCategory;
    const MetricsReport restricted = evaluate(q, g, store, cfg);

    CHECK(restricted.overall.at("Acc@1") == 1.0);
    CHECK(plain.overall.at("Acc@1") == 0.0);
    CHECK(restricted.overall.at("mAP") > plain.overall.at("mAP"));
}

TEST_CASE("evaluate: per-category counts sum to the total; skipped queries counted") {
    MatrixF qm(3, 1), gm(2, 1);
    qm << 0.0f, 1.0f, 2.0f;
    gm << 0.1f, 1.1f;
    const EmbeddingSet q = make_labeled_set(qm, {"a", "b", "ghost"}, {"c1", "c2", "c1"}, Domain::Query);
    const EmbeddingSet g = make_labeled_set(gm, {"a", "b"}, {"c1", "c2"}, Domain::Gallery);
    const DistanceStore store = compute_distances(q, g, DistanceMetric::Euclidean);
    EvalConfig cfg;
    cfg.k_values = {1};
    const MetricsReport report = evaluate(q, g, store, cfg);
    CHECK(report.n_queries_total == 2);
    CHECK(report.n_queries_skipped == 1); // "ghost" has no gallery match
    std::int64_t sum = 0;
    for (const auto& [cat, cm] : report.per_category) sum += cm.n_queries;
    CHECK(sum == report.n_queries_total);
}

TEST_CASE("estimator: identities and the hand-computed case") {
    const auto cat = [](std::int64_t n, double map_value) {
        CategoryMetrics cm;
        cm.n_queries = n;
        cm.values["mAP"] = map_value;
        return cm;
    };

    SUBCASE("zero penalty passes the re-ranked weighted average through") {
        std::map<std::string, CategoryMetrics> plain = {{"a", cat(10, 0.4)}, {"b", cat(30, 0.4)}};
        std::map<std::string, CategoryMetrics> rr = {{"a", cat(10, 0.6)}, {"b", cat(30, 0.5)}};
        const std::map<std::string, double> unconstrained = {{"mAP", 0.4}};
        const MetricsReport est = estimate_reranked_unconstrained(rr, plain, unconstrained);
        CHECK(est.estimated);
        CHECK(est.penalties.at("mAP") == 0.0);
        CHECK(est.overall.at("mAP") == doctest::Approx(0.525));
    }
    SUBCASE("weighted 0.44, unconstrained 0.40, re-ranked 0.50 -> estimate 0.46") {
        std::map<std::string, CategoryMetrics> plain = {{"a", cat(50, 0.44)}, {"b", cat(50, 0.44)}};
        std::map<std::string, CategoryMetrics> rr = {{"a", cat(50, 0.50)}, {"b", cat(50, 0.50)}};
        const std::map<std::string, double> unconstrained = {{"mAP", 0.40}};
        const MetricsReport est = estimate_reranked_unconstrained(rr, plain, unconstrained);
        CHECK(est.penalties.at("mAP") == doctest::Approx(0.04));
        CHECK(est.overall.at("mAP") == doctest::Approx(0.46));
    }
    SUBCASE("category mismatch and missing metric are rejected") {
        std::map<std::string, CategoryMetrics> plain = {{"a", cat(10, 0.4)}};
        std::map<std::string, CategoryMetrics> rr = {{"b", cat(10, 0.4)}};
        CHECK_THROWS_AS(estimate_reranked_unconstrained(rr, plain, {{"mAP", 0.4}}), ValidationError);
        std::map<std::string, CategoryMetrics> rr2 = {{"a", cat(10, 0.4)}};
        CHECK_THROWS_AS(estimate_reranked_unconstrained(rr2, plain, {{"Acc@1", 0.4}}),
                        ValidationError);
    }
}
