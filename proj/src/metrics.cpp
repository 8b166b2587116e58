#include "retkit/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_set>

namespace retkit {

const char* to_string(Protocol p) {
    switch (p) {
        case Protocol::Unconstrained: return "unconstrained";
        case Protocol::ConstrainedByCategory: return "constrained_by_category";
        case Protocol::CrossDomain: return "cross_domain";
    }
    return "unconstrained";
}

GroundTruth build_ground_truth(const EmbeddingSet& queries, const EmbeddingSet& gallery) {
    std::unordered_map<std::string, std::vector<std::int64_t>> by_product;
    for (const auto& rec : gallery.records) by_product[rec.product].push_back(rec.row);
    for (auto& [product, rows] : by_product) std::sort(rows.begin(), rows.end());

    GroundTruth gt;
    for (const auto& rec : queries.records) {
        auto it = by_product.find(rec.product);
        if (it != by_product.end()) gt.emplace(rec.row, it->second);
    }
    return gt;
}

double acc_at_k(const std::vector<RankedResult>& results, const GroundTruth& ground_truth,
                std::int64_t k) {
    if (k < 1) throw ValidationError("acc_at_k: k must be >= 1");
    if (results.empty()) throw ValidationError("acc_at_k: no queries");
    std::int64_t hits = 0;
    for (const auto& r : results) {
        auto it = ground_truth.find(r.query_row);
        if (it == ground_truth.end() || it->second.empty())
            throw ValidationError("acc_at_k: query " + std::to_string(r.query_row) +
                                  " has empty ground truth");
        if (k > static_cast<std::int64_t>(r.ranked_gallery.size()))
            throw ValidationError("acc_at_k: k exceeds ranked-list length for query " +
                                  std::to_string(r.query_row));
        const std::unordered_set<std::int64_t> relevant(it->second.begin(), it->second.end());
        for (std::int64_t i = 0; i < k; ++i) {
            if (relevant.count(r.ranked_gallery[static_cast<std::size_t>(i)])) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(results.size());
}

double mean_ap(const std::vector<RankedResult>& results, const GroundTruth& ground_truth) {
    if (results.empty()) throw ValidationError("mean_ap: no queries");
    double sum = 0.0;
    for (const auto& r : results) {
        auto it = ground_truth.find(r.query_row);
        if (it == ground_truth.end() || it->second.empty())
            throw ValidationError("mean_ap: query " + std::to_string(r.query_row) +
                                  " has empty ground truth");
        const std::unordered_set<std::int64_t> relevant(it->second.begin(), it->second.end());
        double ap = 0.0;
        std::int64_t found = 0;
        for (std::size_t rank = 0; rank < r.ranked_gallery.size(); ++rank) {
            if (relevant.count(r.ranked_gallery[rank])) {
                ++found;
                ap += static_cast<double>(found) / static_cast<double>(rank + 1);
            }
        }
        ap /= static_cast<double>(it->second.size());
        sum += ap;
    }
    return sum / static_cast<double>(results.size());
}

namespace {

struct QueryOutcome {
    std::string category;
    double ap = 0.0;
    std::vector<bool> hit_at_k; // aligned with config.k_values
};

std::string acc_key(std::int64_t k) { return "Acc@" + std::to_string(k); }

std::map<std::string, double> mean_metrics(const std::vector<const QueryOutcome*>& outcomes,
                                           const std::vector<int>& k_values) {
    std::map<std::string, double> out;
    const double n = static_cast<double>(outcomes.size());
    double ap_sum = 0.0;
    for (const auto* o : outcomes) ap_sum += o->ap;
    out["mAP"] = ap_sum / n;
    for (std::size_t ki = 0; ki < k_values.size(); ++ki) {
        std::int64_t hits = 0;
        for (const auto* o : outcomes) hits += o->hit_at_k[ki] ? 1 : 0;
        out[acc_key(k_values[ki])] = static_cast<double>(hits) / n;
    }
    return out;
}

} // namespace

MetricsReport evaluate(const EmbeddingSet& queries, const EmbeddingSet& gallery,
                       const DistanceStore& store, const EvalConfig& config) {
    config.validate();
    if (store.n_queries() != queries.rows() || store.n_gallery() != gallery.rows())
        throw ValidationError("evaluate: store shape does not match query/gallery sets");

    const bool constrained = config.constrained == ConstraintMode::ByCategory;
    const std::int64_t n_g = gallery.rows();

    // candidate rows per category (constrained mode)
    std::unordered_map<std::string, std::vector<std::int64_t>> by_category;
    if (constrained)
        for (const auto& rec : gallery.records) by_category[rec.category].push_back(rec.row);

    std::unordered_map<std::string, std::unordered_set<std::int64_t>> gt_products;
    {
        std::unordered_map<std::string, std::vector<std::int64_t>> tmp;
        for (const auto& rec : gallery.records) tmp[rec.product].push_back(rec.row);
        for (auto& [p, rows] : tmp) gt_products.emplace(p, std::unordered_set<std::int64_t>(rows.begin(), rows.end()));
    }

    std::vector<QueryOutcome> outcomes;
    outcomes.reserve(static_cast<std::size_t>(queries.rows()));
    std::int64_t skipped = 0;

    std::vector<float> row(static_cast<std::size_t>(n_g));
    std::vector<std::int64_t> order;
    order.reserve(static_cast<std::size_t>(n_g));

    for (std::int64_t q = 0; q < queries.rows(); ++q) {
        const ItemRecord& rec = queries.records[static_cast<std::size_t>(q)];

        order.clear();
        if (constrained) {
            auto it = by_category.find(rec.category);
            if (it == by_category.end()) {
                ++skipped; // category absent from gallery
                continue;
            }
            order.assign(it->second.begin(), it->second.end());
        } else {
            order.resize(static_cast<std::size_t>(n_g));
            std::iota(order.begin(), order.end(), std::int64_t{0});
        }

        auto pit = gt_products.find(rec.product);
        std::vector<std::int64_t> relevant;
        if (pit != gt_products.end())
            for (std::int64_t g : order)
                if (pit->second.count(g)) relevant.push_back(g);
        if (relevant.empty()) {
            ++skipped; // no ground truth within the candidate set
            continue;
        }

        store.read_row(q, row.data());
        std::sort(order.begin(), order.end(), [&row](std::int64_t a, std::int64_t b) {
            const float da = row[static_cast<std::size_t>(a)];
            const float db = row[static_cast<std::size_t>(b)];
            return da != db ? da < db : a < b;
        });

        const std::unordered_set<std::int64_t> rel_set(relevant.begin(), relevant.end());
        QueryOutcome o;
        o.category = rec.category;
        o.hit_at_k.assign(config.k_values.size(), false);
        double ap = 0.0;
        std::int64_t found = 0;
        std::int64_t first_hit_rank = -1;
        for (std::size_t rank = 0; rank < order.size(); ++rank) {
            if (rel_set.count(order[rank])) {
                ++found;
                ap += static_cast<double>(found) / static_cast<double>(rank + 1);
                if (first_hit_rank < 0) first_hit_rank = static_cast<std::int64_t>(rank) + 1;
            }
        }
        o.ap = ap / static_cast<double>(relevant.size());
        for (std::size_t ki = 0; ki < config.k_values.size(); ++ki)
            o.hit_at_k[ki] = first_hit_rank > 0 && first_hit_rank <= config.k_values[ki];
        outcomes.push_back(std::move(o));
    }

    if (outcomes.empty())
        throw ValidationError("evaluate: every query was skipped (no usable ground truth)");

    MetricsReport report;
    report.protocol = constrained ? Protocol::ConstrainedByCategory : Protocol::Unconstrained;
    report.n_queries_total = static_cast<std::int64_t>(outcomes.size());
    report.n_queries_skipped = skipped;

    std::vector<const QueryOutcome*> all;
    all.reserve(outcomes.size());
    for (const auto& o : outcomes) all.push_back(&o);
    report.overall = mean_metrics(all, config.k_values);

    std::map<std::string, std::vector<const QueryOutcome*>> grouped;
    for (const auto& o : outcomes) grouped[o.category].push_back(&o);
    for (const auto& [category, members] : grouped) {
        CategoryMetrics cm;
        cm.n_queries = static_cast<std::int64_t>(members.size());
        cm.values = mean_metrics(members, config.k_values);
        report.per_category.emplace(category, std::move(cm));
    }

    for (const auto& [name, value] : report.overall) {
        double simple = 0.0, weighted = 0.0, weight_sum = 0.0;
        for (const auto& [category, cm] : report.per_category) {
            simple += cm.values.at(name);
            weighted += static_cast<double>(cm.n_queries) * cm.values.at(name);
            weight_sum += static_cast<double>(cm.n_queries);
        }
        report.category_simple_mean[name] = simple / static_cast<double>(report.per_category.size());
        report.category_weighted_mean[name] = weighted / weight_sum;
        (void)value;
    }
    return report;
}

MetricsReport estimate_reranked_unconstrained(
    const std::map<std::string, CategoryMetrics>& per_category_reranked,
    const std::map<std::string, CategoryMetrics>& per_category_plain,
    const std::map<std::string, double>& unconstrained_plain) {
    // category sets must be identical
    auto it_a = per_category_reranked.begin();
    auto it_b = per_category_plain.begin();
    for (; it_a != per_category_reranked.end() && it_b != per_category_plain.end(); ++it_a, ++it_b)
        if (it_a->first != it_b->first)
            throw ValidationError("estimator: category sets differ ('" + it_a->first + "' vs '" +
                                  it_b->first + "')");
    if (it_a != per_category_reranked.end() || it_b != per_category_plain.end())
        throw ValidationError("estimator: category sets differ in size");
    if (per_category_plain.empty()) throw ValidationError("estimator: no categories");

    const auto weighted_avg = [](const std::map<std::string, CategoryMetrics>& per_category,
                                 const std::string& metric) {
        double weighted = 0.0, weight_sum = 0.0;
        for (const auto& [category, cm] : per_category) {
            auto it = cm.values.find(metric);
            if (it == cm.values.end())
                throw ValidationError("estimator: metric '" + metric + "' missing for category '" +
                                      category + "'");
            weighted += static_cast<double>(cm.n_queries) * it->second;
            weight_sum += static_cast<double>(cm.n_queries);
        }
        return weighted / weight_sum;
    };

    MetricsReport report;
    report.protocol = Protocol::Unconstrained;
    report.estimated = true;
    for (const auto& [metric, plain_value] : unconstrained_plain) {
        const double penalty = std::max(0.0, weighted_avg(per_category_plain, metric) - plain_value);
        const double estimate =
            std::clamp(weighted_avg(per_category_reranked, metric) - penalty, 0.0, 1.0);
        report.penalties[metric] = penalty;
        report.overall[metric] = estimate;
    }
    for (const auto& [category, cm] : per_category_reranked) {
        report.n_queries_total += cm.n_queries;
        report.per_category.emplace(category, cm);
    }
    return report;
}

} // namespace retkit
