#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "retkit/core.hpp"
#include "retkit/distance.hpp"
#include "retkit/gradcheck.hpp"
#include "retkit/metrics.hpp"
#include "retkit/rerank.hpp"
#include "retkit/report.hpp"
#include "retkit/toytrain.hpp"

namespace py = pybind11;
using namespace retkit;

namespace {

EmbeddingSet make_set(const MatrixF& matrix, const std::vector<std::string>& products,
                      const std::vector<std::string>& categories, bool normalized) {
    if (static_cast<Eigen::Index>(products.size()) != matrix.rows())
        throw ValidationError("products must have one entry per matrix row");
    EmbeddingSet set;
    set.matrix = matrix;
    set.normalized = normalized;
    for (Eigen::Index r = 0; r < matrix.rows(); ++r) {
        ItemRecord rec;
        rec.id = "row-" + std::to_string(r);
        rec.product = products[static_cast<std::size_t>(r)];
        rec.category = categories.empty() ? std::string("all") : categories[static_cast<std::size_t>(r)];
        rec.row = r;
        set.records.push_back(std::move(rec));
    }
    return set;
}

MatrixF store_to_matrix(const DistanceStore& store) {
    MatrixF out(store.n_queries(), store.n_gallery());
    for (std::int64_t q = 0; q < store.n_queries(); ++q) store.read_row(q, out.data() + q * store.n_gallery());
    return out;
}

DistanceStore matrix_to_store(const MatrixF& m, DistanceMetric metric) {
    std::vector<float> values(m.data(), m.data() + m.size());
    return DistanceStore::from_values(std::move(values), m.rows(), m.cols(), metric);
}

} // namespace

PYBIND11_MODULE(_retkit, m) {
    m.doc() = "Instance-retrieval evaluation engine and metric-learning numeric core";

    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<IoError>(m, "IoError", PyExc_IOError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    m.def("l2_normalize", &l2_normalize_rows, py::arg("matrix"),
          "Row-wise L2 normalization (rejects near-zero rows).");

    m.def(
        "pairwise_distances",
        [](const MatrixF& queries, const MatrixF& gallery, const std::string& metric,
           std::int64_t query_block, std::int64_t gallery_block, bool normalized, int threads) {
            EmbeddingSet q, g;
            q.matrix = queries;
            g.matrix = gallery;
            q.normalized = g.normalized = normalized;
            const DistanceStore store =
                compute_distances(q, g, metric_from_string(metric), TileSpec{query_block, gallery_block},
                                  Backing::InMemory, {}, threads);
            return store_to_matrix(store);
        },
        py::arg("queries"), py::arg("gallery"), py::arg("metric") = "euclidean",
        py::arg("query_block") = 1024, py::arg("gallery_block") = 4096,
        py::arg("normalized") = false, py::arg("threads") = 1,
        "Tiled pairwise distances (euclidean = unsquared L2, cosine = 1 - dot).");

    m.def(
        "topk",
        [](const MatrixF& distances, std::int64_t k, int threads) {
            const DistanceStore store = matrix_to_store(distances, DistanceMetric::Euclidean);
            const auto results = topk_per_query(store, k, threads);
            Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> idx(
                distances.rows(), k);
            MatrixF dist(distances.rows(), k);
            for (Eigen::Index q = 0; q < distances.rows(); ++q)
                for (std::int64_t i = 0; i < k; ++i) {
                    idx(q, i) = results[static_cast<std::size_t>(q)].ranked_gallery[static_cast<std::size_t>(i)];
                    dist(q, i) = results[static_cast<std::size_t>(q)].distances[static_cast<std::size_t>(i)];
                }
            return py::make_tuple(idx, dist);
        },
        py::arg("distances"), py::arg("k"), py::arg("threads") = 1,
        "Smallest-k per row; ties break to the lower column index.");

    m.def(
        "rerank_distances",
        [](const MatrixF& qg, const MatrixF& qq, const MatrixF& gg, int k1, int k2, double lam,
           int threads) {
            const DistanceStore s_qg = matrix_to_store(qg, DistanceMetric::Euclidean);
            const DistanceStore s_qq = matrix_to_store(qq, DistanceMetric::Euclidean);
            const DistanceStore s_gg = matrix_to_store(gg, DistanceMetric::Euclidean);
            RerankParams params;
            params.k1 = k1;
            params.k2 = k2;
            params.lambda = lam;
            return store_to_matrix(rerank(s_qg, s_qq, s_gg, params, threads));
        },
        py::arg("qg"), py::arg("qq"), py::arg("gg"), py::arg("k1") = 20, py::arg("k2") = 6,
        py::arg("lambda_") = 0.3, py::arg("threads") = 1, "k-reciprocal re-ranking of a Q x G block.");

    m.def(
        "evaluate_json",
        [](const MatrixF& query_matrix, const std::vector<std::string>& query_products,
           const std::vector<std::string>& query_categories, const MatrixF& gallery_matrix,
           const std::vector<std::string>& gallery_products,
           const std::vector<std::string>& gallery_categories, const std::string& metric,
           const std::vector<int>& k_values, bool constrained, bool normalize) {
            EmbeddingSet q = make_set(query_matrix, query_products, query_categories, false);
            EmbeddingSet g = make_set(gallery_matrix, gallery_products, gallery_categories, false);
            if (normalize) {
                q = l2_normalize(q);
                g = l2_normalize(g);
            }
            EvalConfig cfg;
            cfg.metric = metric_from_string(metric);
            cfg.k_values = k_values;
            cfg.constrained = constrained ? ConstraintMode::ByCategory : ConstraintMode::None;
            const DistanceStore store = compute_distances(q, g, cfg.metric);
            return report_to_json(evaluate(q, g, store, cfg)).dump();
        },
        py::arg("query_matrix"), py::arg("query_products"), py::arg("query_categories"),
        py::arg("gallery_matrix"), py::arg("gallery_products"), py::arg("gallery_categories"),
        py::arg("metric") = "euclidean", py::arg("k_values") = std::vector<int>{1, 10, 20, 50},
        py::arg("constrained") = false, py::arg("normalize") = true,
        "Full evaluation; returns the report as a JSON string.");

    m.def(
        "batch_hard_mine",
        [](const MatrixD& embeddings, const std::vector<int>& labels, bool squared) {
            const MinedIndices mined = batch_hard_mine({embeddings, labels}, squared);
            return py::make_tuple(mined.positive, mined.negative);
        },
        py::arg("embeddings"), py::arg("labels"), py::arg("squared") = true);

    m.def(
        "triplet_loss",
        [](const MatrixD& a, const MatrixD& p, const MatrixD& n, double margin) {
            const LossOutput out = triplet_loss(a, p, n, margin);
            return py::make_tuple(out.value, out.grad_embeddings);
        },
        py::arg("anchor"), py::arg("positive"), py::arg("negative"), py::arg("margin") = 0.3,
        "Returns (value, gradients stacked [dA; dP; dN]).");

    m.def(
        "quadruplet_loss",
        [](const MatrixD& a, const MatrixD& p, const MatrixD& n1, const MatrixD& n2, double g1,
           double g2) {
            LossParams params;
            params.quad_g1 = g1;
            params.quad_g2 = g2;
            const QuadrupletMargins margins = quadruplet_margins(a, p, n1, params);
            const LossOutput out = quadruplet_loss_fixed_margins(a, p, n1, n2, margins);
            return py::make_tuple(out.value, out.grad_embeddings, margins.alpha1, margins.alpha2);
        },
        py::arg("anchor"), py::arg("positive"), py::arg("negative1"), py::arg("negative2"),
        py::arg("g1") = 1.0, py::arg("g2") = 0.5,
        "Returns (value, gradients stacked [dA; dP; dN1; dN2], alpha1, alpha2).");

    m.def(
        "center_loss",
        [](const MatrixD& embeddings, const std::vector<int>& labels, const MatrixD& centers) {
            ClassCenters c;
            c.centers = centers;
            const LossOutput out = center_loss({embeddings, labels}, c);
            return py::make_tuple(out.value, out.grad_embeddings, *out.grad_centers);
        },
        py::arg("embeddings"), py::arg("labels"), py::arg("centers"));

    m.def(
        "label_smoothed_ce",
        [](const MatrixD& logits, const std::vector<int>& labels, double epsilon) {
            const LossOutput out = label_smoothed_ce(logits, labels, epsilon);
            return py::make_tuple(out.value, out.grad_embeddings);
        },
        py::arg("logits"), py::arg("labels"), py::arg("epsilon") = 0.1);

    m.def(
        "gradcheck_json",
        [](std::uint64_t seed, int points, double step, double tol) {
            const GradCheckSuiteReport suite = run_gradcheck_suite(seed, points, step, tol);
            nlohmann::json losses = nlohmann::json::array();
            for (const auto& l : suite.losses)
                losses.push_back({{"name", l.name},
                                  {"max_rel_error", l.max_rel_error},
                                  {"n_checked", l.n_checked},
                                  {"n_excluded", l.n_excluded},
                                  {"pass", l.pass}});
            return nlohmann::json{{"losses", losses}, {"all_pass", suite.all_pass}}.dump();
        },
        py::arg("seed") = 1234, py::arg("points") = 10, py::arg("step") = 1e-4,
        py::arg("tol") = 1e-4);

    py::class_<SynthConfig>(m, "SynthConfig")
        .def(py::init<>())
        .def_readwrite("train_products", &SynthConfig::train_products)
        .def_readwrite("test_products", &SynthConfig::test_products)
        .def_readwrite("raw_dim", &SynthConfig::raw_dim)
        .def_readwrite("embed_dim", &SynthConfig::embed_dim)
        .def_readwrite("hidden_dim", &SynthConfig::hidden_dim)
        .def_readwrite("shop_per_product", &SynthConfig::shop_per_product)
        .def_readwrite("street_per_product", &SynthConfig::street_per_product)
        .def_readwrite("test_shop_per_product", &SynthConfig::test_shop_per_product)
        .def_readwrite("test_street_per_product", &SynthConfig::test_street_per_product)
        .def_readwrite("n_categories", &SynthConfig::n_categories)
        .def_readwrite("clutter_dims", &SynthConfig::clutter_dims)
        .def_readwrite("shop_noise", &SynthConfig::shop_noise)
        .def_readwrite("street_noise", &SynthConfig::street_noise)
        .def_readwrite("distortion", &SynthConfig::distortion)
        .def_readwrite("seed", &SynthConfig::seed);

    m.def(
        "generate_synthetic",
        [](const SynthConfig& cfg) {
            const SynthData data = generate_synthetic(cfg);
            const auto pack = [](const EmbeddingSet& set) {
                std::vector<std::string> products, categories;
                for (const auto& rec : set.records) {
                    products.push_back(rec.product);
                    categories.push_back(rec.category);
                }
                return py::make_tuple(set.matrix, products, categories);
            };
            py::dict out;
            out["train"] = pack(data.train);
            out["test_queries"] = pack(data.test_queries);
            out["test_gallery"] = pack(data.test_gallery);
            return out;
        },
        py::arg("config"), "Returns {'train'|'test_queries'|'test_gallery': (matrix, products, categories)}.");

    py::class_<ToyEmbedder>(m, "ToyEmbedder")
        .def_static("init", &ToyEmbedder::init, py::arg("raw_dim"), py::arg("hidden_dim"),
                    py::arg("embed_dim"), py::arg("n_classes"), py::arg("seed"))
        .def_static("load", &ToyEmbedder::load, py::arg("path"))
        .def("save", &ToyEmbedder::save, py::arg("path"))
        .def("embed", [](const ToyEmbedder& model, const MatrixF& raw) { return embed_rows(model, raw); },
             py::arg("raw"), "L2-normalized inference features (frozen bottleneck statistics).")
        .def_property_readonly("raw_dim", &ToyEmbedder::raw_dim)
        .def_property_readonly("embed_dim", &ToyEmbedder::embed_dim)
        .def_property_readonly("n_classes", &ToyEmbedder::n_classes);

    m.def(
        "train_toy",
        [](const MatrixF& train_matrix, const std::vector<std::string>& products,
           const ToyEmbedder& model, int epochs, double base_lr, int batch_p, int batch_k,
           int warmup_epochs, int accumulation_steps, const std::string& loss, int steps_per_epoch,
           std::uint64_t seed) {
            const EmbeddingSet set = make_set(train_matrix, products, {}, false);
            TrainConfig tcfg;
            tcfg.epochs = epochs;
            tcfg.base_lr = base_lr;
            tcfg.batch_p = batch_p;
            tcfg.batch_k = batch_k;
            tcfg.warmup_epochs = warmup_epochs;
            tcfg.accumulation_steps = accumulation_steps;
            tcfg.loss = metric_loss_from_string(loss);
            tcfg.steps_per_epoch = steps_per_epoch;
            tcfg.seed = seed;
            const TrainResult result = train(set, model, tcfg, LossParams{});
            std::vector<double> losses;
            for (const auto& e : result.log) losses.push_back(e.loss_total);
            return py::make_tuple(result.model, losses);
        },
        py::arg("train_matrix"), py::arg("products"), py::arg("model"), py::arg("epochs") = 120,
        py::arg("base_lr") = 0.0001, py::arg("batch_p") = 16, py::arg("batch_k") = 4,
        py::arg("warmup_epochs") = 10, py::arg("accumulation_steps") = 1,
        py::arg("loss") = "quadruplet", py::arg("steps_per_epoch") = 0, py::arg("seed") = 1,
        "Returns (trained model, per-epoch total loss).");

    m.def(
        "warmup_lr",
        [](int epoch, int epochs, double base_lr, int warmup_epochs) {
            TrainConfig cfg;
            cfg.epochs = epochs;
            cfg.base_lr = base_lr;
            cfg.warmup_epochs = warmup_epochs;
            return warmup_lr(epoch, cfg);
        },
        py::arg("epoch"), py::arg("epochs") = 120, py::arg("base_lr") = 0.0001,
        py::arg("warmup_epochs") = 10);

    m.def("read_embeddings", &read_embeddings, py::arg("path"));
    m.def("write_embeddings", &write_embeddings, py::arg("matrix"), py::arg("path"));
}
