#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "retkit/core.hpp"
#include "retkit/distance.hpp"
#include "retkit/gradcheck.hpp"
#include "retkit/metrics.hpp"
#include "retkit/rerank.hpp"
#include "retkit/report.hpp"
#include "retkit/toytrain.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace retkit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

std::string now_iso_utc() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// meta holds the only volatile fields; everything else in a report document
/// is a pure function of (inputs, config, seed).
json make_meta() {
    return {{"created_at", now_iso_utc()}, {"tool", "retkit"}, {"tool_version", "0.1.0"}};
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open output file: " + path.string());
    out << text;
    if (!out) throw IoError("failed while writing: " + path.string());
}

void write_json(const fs::path& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open JSON file: " + path.string());
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw ValidationError(path.string() + ": malformed JSON: " + e.what());
    }
    return doc;
}

void require_input(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("input file does not exist: " + path.string());
}

void prepare_out_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
}

EmbeddingSet load_set(const fs::path& manifest, const fs::path& embeddings, bool normalize) {
    require_input(manifest);
    require_input(embeddings);
    EmbeddingSet set = attach_records(read_embeddings(embeddings), load_manifest(manifest));
    if (normalize) set = l2_normalize(set);
    return set;
}

/// Config-file support: values from --config fill any option the user did not
/// pass on the command line (flags > file > defaults).
void apply_config_file(CLI::App* cmd, const std::string& config_path) {
    if (config_path.empty()) return;
    const json cfg = read_json(config_path);
    if (!cfg.is_object()) throw ValidationError(config_path + ": config must be a JSON object");
    for (const auto& [key, value] : cfg.items()) {
        CLI::Option* opt = cmd->get_option_no_throw("--" + key);
        if (opt == nullptr) throw ValidationError(config_path + ": unknown config key '" + key + "'");
        if (opt->count() > 0) continue; // command line wins
        if (value.is_array()) {
            std::vector<std::string> parts;
            for (const auto& v : value) parts.push_back(v.dump());
            opt->add_result(CLI::detail::join(parts, ","));
        } else if (value.is_string()) {
            opt->add_result(value.get<std::string>());
        } else {
            opt->add_result(value.dump());
        }
        opt->run_callback();
    }
}

struct DataOptions {
    std::string query_manifest, query_emb, gallery_manifest, gallery_emb;
    bool no_normalize = false;

    void attach(CLI::App* cmd) {
        cmd->add_option("--queries", query_manifest, "query manifest (JSONL)")->required();
        cmd->add_option("--query-emb", query_emb, "query embedding file")->required();
        cmd->add_option("--gallery", gallery_manifest, "gallery manifest (JSONL)")->required();
        cmd->add_option("--gallery-emb", gallery_emb, "gallery embedding file")->required();
        cmd->add_flag("--no-normalize", no_normalize, "skip L2 normalization of inputs");
    }
};

struct EvalOptions {
    std::string metric = "euclidean";
    std::vector<int> k_values = {1, 10, 20, 50};
    std::string constrained = "none";
    std::int64_t tile_q = 1024, tile_g = 4096;
    std::string backing = "memory";
    std::string spill_dir;
    int threads = 1;

    void attach(CLI::App* cmd) {
        cmd->add_option("--metric", metric, "euclidean|cosine")->check(CLI::IsMember({"euclidean", "cosine"}));
        cmd->add_option("--k", k_values, "Acc@k cutoffs (ascending)")->delimiter(',');
        cmd->add_option("--constrained", constrained, "none|by_category")
            ->check(CLI::IsMember({"none", "by_category"}));
        cmd->add_option("--tile-q", tile_q, "query rows per tile");
        cmd->add_option("--tile-g", tile_g, "gallery columns per tile");
        cmd->add_option("--backing", backing, "memory|disk")->check(CLI::IsMember({"memory", "disk"}));
        cmd->add_option("--spill-dir", spill_dir, "directory for .dist spill files (disk backing)");
        cmd->add_option("--threads", threads, "worker threads (results are thread-count independent)");
    }

    EvalConfig eval_config() const {
        EvalConfig cfg;
        cfg.metric = metric_from_string(metric);
        cfg.k_values = k_values;
        cfg.constrained = constrained == "by_category" ? ConstraintMode::ByCategory : ConstraintMode::None;
        cfg.validate();
        return cfg;
    }

    TileSpec tiles() const { return TileSpec{tile_q, tile_g}; }

    json to_json() const {
        return {{"metric", metric},     {"k", k_values},       {"constrained", constrained},
                {"tile_q", tile_q},     {"tile_g", tile_g},    {"backing", backing},
                {"threads", threads}};
    }
};

DistanceStore make_store(const EmbeddingSet& q, const EmbeddingSet& g, const EvalOptions& opt,
                         const fs::path& out_dir, const std::string& name) {
    const Backing backing = opt.backing == "disk" ? Backing::DiskSpilled : Backing::InMemory;
    std::optional<fs::path> spill;
    if (backing == Backing::DiskSpilled) {
        const fs::path dir = opt.spill_dir.empty() ? out_dir : fs::path(opt.spill_dir);
        prepare_out_dir(dir);
        spill = dir / (name + ".dist");
    }
    return compute_distances(q, g, metric_from_string(opt.metric), opt.tiles(), backing, spill,
                             opt.threads);
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthCmd {
    std::string out_dir, config_file;
    SynthConfig cfg;

    void attach(CLI::App& app) {
        auto* cmd = app.add_subcommand("synth", "generate a synthetic two-domain dataset");
        cmd->add_option("--out", out_dir, "output directory")->required();
        cmd->add_option("--config", config_file, "JSON config file (flags override it)");
        cmd->add_option("--train-products", cfg.train_products);
        cmd->add_option("--test-products", cfg.test_products);
        cmd->add_option("--raw-dim", cfg.raw_dim);
        cmd->add_option("--embed-dim", cfg.embed_dim);
        cmd->add_option("--hidden-dim", cfg.hidden_dim);
        cmd->add_option("--shop-per-product", cfg.shop_per_product);
        cmd->add_option("--street-per-product", cfg.street_per_product);
        cmd->add_option("--test-shop-per-product", cfg.test_shop_per_product);
        cmd->add_option("--test-street-per-product", cfg.test_street_per_product);
        cmd->add_option("--categories", cfg.n_categories);
        cmd->add_option("--clutter-dims", cfg.clutter_dims);
        cmd->add_option("--shop-noise", cfg.shop_noise);
        cmd->add_option("--street-noise", cfg.street_noise);
        cmd->add_option("--distortion", cfg.distortion);
        cmd->add_option("--seed", cfg.seed);
        cmd->callback([this, cmd] {
            apply_config_file(cmd, config_file);
            run();
        });
    }

    json config_json() const {
        return {{"train-products", cfg.train_products},
                {"test-products", cfg.test_products},
                {"raw-dim", cfg.raw_dim},
                {"embed-dim", cfg.embed_dim},
                {"hidden-dim", cfg.hidden_dim},
                {"shop-per-product", cfg.shop_per_product},
                {"street-per-product", cfg.street_per_product},
                {"test-shop-per-product", cfg.test_shop_per_product},
                {"test-street-per-product", cfg.test_street_per_product},
                {"categories", cfg.n_categories},
                {"clutter-dims", cfg.clutter_dims},
                {"shop-noise", cfg.shop_noise},
                {"street-noise", cfg.street_noise},
                {"distortion", cfg.distortion},
                {"seed", cfg.seed}};
    }

    void run() const {
        const SynthData data = generate_synthetic(cfg);
        prepare_out_dir(out_dir);
        const fs::path dir(out_dir);
        save_manifest(data.train.records, dir / "train.jsonl");
        write_embeddings(data.train.matrix, dir / "train.emb");
        save_manifest(data.test_queries.records, dir / "queries.jsonl");
        write_embeddings(data.test_queries.matrix, dir / "queries.emb");
        save_manifest(data.test_gallery.records, dir / "gallery.jsonl");
        write_embeddings(data.test_gallery.matrix, dir / "gallery.emb");
        json doc = {{"meta", make_meta()}, {"config", config_json()}};
        write_json(dir / "synth_config.json", doc);
        std::cout << "synth: " << data.train.rows() << " train rows, " << data.test_queries.rows()
                  << " queries, " << data.test_gallery.rows() << " gallery rows -> " << out_dir
                  << "\n";
    }
};

// ---------------------------------------------------------------------------
// train-toy
// ---------------------------------------------------------------------------

struct TrainCmd {
    std::string data_dir, out_dir, config_file;
    TrainConfig tcfg;
    LossParams lcfg;
    int embed_dim = 16, hidden_dim = 32;
    std::string loss = "quadruplet";

    void attach(CLI::App& app) {
        auto* cmd = app.add_subcommand("train-toy", "train the toy embedder on a synthetic dataset");
        cmd->add_option("--data", data_dir, "dataset directory (from `synth`)")->required();
        cmd->add_option("--out", out_dir, "output directory")->required();
        cmd->add_option("--config", config_file, "JSON config file (flags override it)");
        cmd->add_option("--epochs", tcfg.epochs);
        cmd->add_option("--base-lr", tcfg.base_lr);
        cmd->add_option("--batch-p", tcfg.batch_p);
        cmd->add_option("--batch-k", tcfg.batch_k);
        cmd->add_option("--warmup-epochs", tcfg.warmup_epochs);
        cmd->add_option("--accumulation-steps", tcfg.accumulation_steps);
        cmd->add_option("--steps-per-epoch", tcfg.steps_per_epoch);
        cmd->add_option("--seed", tcfg.seed);
        cmd->add_option("--loss", loss, "triplet|quadruplet")->check(CLI::IsMember({"triplet", "quadruplet"}));
        cmd->add_option("--embed-dim", embed_dim);
        cmd->add_option("--hidden-dim", hidden_dim);
        cmd->add_option("--triplet-margin", lcfg.triplet_margin);
        cmd->add_option("--g1", lcfg.quad_g1);
        cmd->add_option("--g2", lcfg.quad_g2);
        cmd->add_option("--center-weight", lcfg.center_weight);
        cmd->add_option("--label-smoothing", lcfg.label_smoothing);
        cmd->callback([this, cmd] {
            apply_config_file(cmd, config_file);
            run();
        });
    }

    json config_json() const {
        return {{"epochs", tcfg.epochs},
                {"base-lr", tcfg.base_lr},
                {"batch-p", tcfg.batch_p},
                {"batch-k", tcfg.batch_k},
                {"warmup-epochs", tcfg.warmup_epochs},
                {"accumulation-steps", tcfg.accumulation_steps},
                {"steps-per-epoch", tcfg.steps_per_epoch},
                {"seed", tcfg.seed},
                {"loss", loss},
                {"embed-dim", embed_dim},
                {"hidden-dim", hidden_dim},
                {"triplet-margin", lcfg.triplet_margin},
                {"g1", lcfg.quad_g1},
                {"g2", lcfg.quad_g2},
                {"center-weight", lcfg.center_weight},
                {"label-smoothing", lcfg.label_smoothing}};
    }

    void run() {
        tcfg.loss = metric_loss_from_string(loss);
        const fs::path dir(data_dir);
        const EmbeddingSet train_set = load_set(dir / "train.jsonl", dir / "train.emb", false);

        std::set<std::string> products;
        for (const auto& rec : train_set.records) products.insert(rec.product);
        ToyEmbedder model = ToyEmbedder::init(static_cast<int>(train_set.dim()), hidden_dim,
                                              embed_dim, static_cast<int>(products.size()), tcfg.seed);

        const TrainResult result = train(train_set, model, tcfg, lcfg);

        prepare_out_dir(out_dir);
        const fs::path out(out_dir);
        result.model.save(out / "model.tem");

        json log = json::array();
        for (const auto& e : result.log)
            log.push_back({{"epoch", e.epoch},
                           {"lr", e.lr},
                           {"loss_total", e.loss_total},
                           {"loss_ce", e.loss_ce},
                           {"loss_metric", e.loss_metric},
                           {"loss_center", e.loss_center}});
        json doc = {{"meta", make_meta()}, {"config", config_json()}, {"epochs", log}};
        write_json(out / "train_log.json", doc);

        // embedded test split, ready for `eval`
        for (const auto& [stem, kind] : {std::pair<const char*, const char*>{"queries", "query"},
                                         std::pair<const char*, const char*>{"gallery", "gallery"}}) {
            (void)kind;
            const fs::path manifest = dir / (std::string(stem) + ".jsonl");
            const fs::path emb = dir / (std::string(stem) + ".emb");
            if (!fs::exists(manifest) || !fs::exists(emb)) continue;
            const EmbeddingSet raw = load_set(manifest, emb, false);
            const EmbeddingSet embedded = embed(result.model, raw);
            save_manifest(embedded.records, out / (std::string(stem) + ".jsonl"));
            write_embeddings(embedded.matrix, out / (std::string(stem) + ".emb"));
        }
        std::cout << "train-toy: " << result.log.size() << " epochs";
        if (!result.log.empty())
            std::cout << ", final loss " << result.log.back().loss_total;
        std::cout << " -> " << out_dir << "\n";
    }
};

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalCmd {
    DataOptions data;
    EvalOptions opts;
    std::string out_dir, config_file, model_path;
    bool cross_domain = false;

    void attach(CLI::App& app) {
        auto* cmd = app.add_subcommand("eval", "evaluate retrieval metrics");
        data.attach(cmd);
        opts.attach(cmd);
        cmd->add_option("--out", out_dir, "output directory")->required();
        cmd->add_option("--config", config_file, "JSON config file (flags override it)");
        cmd->add_option("--model", model_path, "toy embedder applied to raw inputs before evaluating");
        cmd->add_flag("--cross-domain", cross_domain, "tag the report as a cross-domain run");
        cmd->callback([this, cmd] {
            apply_config_file(cmd, config_file);
            run();
        });
    }

    void run() const {
        const EvalConfig cfg = opts.eval_config();
        EmbeddingSet queries, gallery;
        if (!model_path.empty()) {
            require_input(model_path);
            const ToyEmbedder model = ToyEmbedder::load(model_path);
            queries = embed(model, load_set(data.query_manifest, data.query_emb, false));
            gallery = embed(model, load_set(data.gallery_manifest, data.gallery_emb, false));
        } else {
            queries = load_set(data.query_manifest, data.query_emb, !data.no_normalize);
            gallery = load_set(data.gallery_manifest, data.gallery_emb, !data.no_normalize);
        }
        for (const auto& issue : validate_retrieval_sets(queries, gallery))
            std::cerr << "warning: " << issue << "\n";

        prepare_out_dir(out_dir);
        const DistanceStore store = make_store(queries, gallery, opts, out_dir, "eval");
        MetricsReport report = evaluate(queries, gallery, store, cfg);
        if (cross_domain) report.protocol = Protocol::CrossDomain;

        json doc = report_to_json(report);
        doc["meta"] = make_meta();
        doc["config"] = opts.to_json();
        write_json(fs::path(out_dir) / "report.json", doc);
        write_text(fs::path(out_dir) / "report.csv", report_to_csv(report));
        std::cout << render_report_table(report);
    }
};

// ---------------------------------------------------------------------------
// rerank
// ---------------------------------------------------------------------------

struct RerankCmd {
    DataOptions data;
    EvalOptions opts;
    std::string out_dir, config_file;
    RerankParams params;
    bool per_category = false;
    bool estimate = false;
    bool with_true = false;

    void attach(CLI::App& app) {
        auto* cmd = app.add_subcommand("rerank", "k-reciprocal re-ranking plus before/after metrics");
        data.attach(cmd);
        opts.attach(cmd);
        cmd->add_option("--out", out_dir, "output directory")->required();
        cmd->add_option("--config", config_file, "JSON config file (flags override it)");
        cmd->add_option("--k1", params.k1, "reciprocal neighborhood size");
        cmd->add_option("--k2", params.k2, "local query expansion size");
        cmd->add_option("--lambda", params.lambda, "original-distance mixing weight");
        cmd->add_flag("--per-category", per_category, "re-rank each category separately");
        cmd->add_flag("--estimate", estimate,
                      "estimate re-ranked unconstrained metrics from per-category runs");
        cmd->add_flag("--with-true", with_true,
                      "with --estimate: also compute the true re-ranked unconstrained values");
        cmd->callback([this, cmd] {
            apply_config_file(cmd, config_file);
            run();
        });
    }

    DistanceStore rerank_sets(const EmbeddingSet& q, const EmbeddingSet& g,
                              const fs::path& out, const std::string& name) const {
        const DistanceStore qg = make_store(q, g, opts, out, name + "_qg");
        const DistanceStore qq = make_store(q, q, opts, out, name + "_qq");
        const DistanceStore gg = make_store(g, g, opts, out, name + "_gg");
        return rerank(qg, qq, gg, params, opts.threads);
    }

    /// Per-category re-ranking: each category is an independent retrieval
    /// problem (candidates restricted up front, mirroring the constrained
    /// protocol), re-ranked and evaluated on its own.
    MetricsReport per_category_reranked(const EmbeddingSet& queries, const EmbeddingSet& gallery,
                                        const EvalConfig& cfg, const fs::path& out) const {
        std::map<std::string, std::vector<std::int64_t>> q_rows, g_rows;
        for (const auto& rec : queries.records) q_rows[rec.category].push_back(rec.row);
        for (const auto& rec : gallery.records) g_rows[rec.category].push_back(rec.row);

        const auto subset = [](const EmbeddingSet& set, const std::vector<std::int64_t>& rows) {
            EmbeddingSet out_set;
            out_set.matrix = MatrixF(static_cast<Eigen::Index>(rows.size()), set.dim());
            out_set.normalized = set.normalized;
            for (std::size_t i = 0; i < rows.size(); ++i) {
                out_set.matrix.row(static_cast<Eigen::Index>(i)) = set.matrix.row(rows[i]);
                ItemRecord rec = set.records[static_cast<std::size_t>(rows[i])];
                rec.row = static_cast<std::int64_t>(i);
                out_set.records.push_back(std::move(rec));
            }
            return out_set;
        };

        MetricsReport assembled;
        assembled.protocol = Protocol::ConstrainedByCategory;
        EvalConfig sub_cfg = cfg;
        sub_cfg.constrained = ConstraintMode::None;

        for (const auto& [category, qr] : q_rows) {
            auto git = g_rows.find(category);
            if (git == g_rows.end()) {
                assembled.n_queries_skipped += static_cast<std::int64_t>(qr.size());
                continue;
            }
            const EmbeddingSet qs = subset(queries, qr);
            const EmbeddingSet gs = subset(gallery, git->second);
            const DistanceStore rr = rerank_sets(qs, gs, out, "rr_" + category);
            const MetricsReport sub = evaluate(qs, gs, rr, sub_cfg);
            CategoryMetrics cm;
            cm.n_queries = sub.n_queries_total;
            cm.values = sub.overall;
            assembled.per_category.emplace(category, std::move(cm));
            assembled.n_queries_total += sub.n_queries_total;
            assembled.n_queries_skipped += sub.n_queries_skipped;
        }
        if (assembled.per_category.empty())
            throw ValidationError("rerank: no category shared between queries and gallery");

        for (const auto& [name, value] : assembled.per_category.begin()->second.values) {
            double simple = 0.0, weighted = 0.0, weight_sum = 0.0;
            for (const auto& [category, cm] : assembled.per_category) {
                simple += cm.values.at(name);
                weighted += static_cast<double>(cm.n_queries) * cm.values.at(name);
                weight_sum += static_cast<double>(cm.n_queries);
            }
            assembled.category_simple_mean[name] =
                simple / static_cast<double>(assembled.per_category.size());
            assembled.category_weighted_mean[name] = weighted / weight_sum;
            assembled.overall[name] = assembled.category_weighted_mean[name];
            (void)value;
        }
        return assembled;
    }

    void run() const {
        EvalConfig cfg = opts.eval_config();
        const EmbeddingSet queries = load_set(data.query_manifest, data.query_emb, !data.no_normalize);
        const EmbeddingSet gallery =
            load_set(data.gallery_manifest, data.gallery_emb, !data.no_normalize);
        prepare_out_dir(out_dir);
        const fs::path out(out_dir);

        json doc;
        doc["meta"] = make_meta();
        doc["config"] = opts.to_json();
        doc["config"]["k1"] = params.k1;
        doc["config"]["k2"] = params.k2;
        doc["config"]["lambda"] = params.lambda;
        doc["config"]["per_category"] = per_category;
        doc["config"]["estimate"] = estimate;

        const DistanceStore plain = make_store(queries, gallery, opts, out, "plain_qg");
        const MetricsReport before = evaluate(queries, gallery, plain, cfg);
        doc["before"] = report_to_json(before);
        write_text(out / "rerank_before.csv", report_to_csv(before));
        std::cout << "== before re-ranking ==\n" << render_report_table(before) << "\n";

        MetricsReport after;
        if (per_category || estimate) {
            after = per_category_reranked(queries, gallery, cfg, out);
        } else {
            const DistanceStore rr = rerank_sets(queries, gallery, out, "rr");
            after = evaluate(queries, gallery, rr, cfg);
        }
        doc["after"] = report_to_json(after);
        write_text(out / "rerank_after.csv", report_to_csv(after));
        std::cout << "== after re-ranking ==\n" << render_report_table(after) << "\n";

        if (estimate) {
            EvalConfig constrained_cfg = cfg;
            constrained_cfg.constrained = ConstraintMode::ByCategory;
            const MetricsReport plain_constrained =
                evaluate(queries, gallery, plain, constrained_cfg);
            EvalConfig unconstrained_cfg = cfg;
            unconstrained_cfg.constrained = ConstraintMode::None;
            const MetricsReport plain_unconstrained =
                evaluate(queries, gallery, plain, unconstrained_cfg);
            const MetricsReport est = estimate_reranked_unconstrained(
                after.per_category, plain_constrained.per_category, plain_unconstrained.overall);
            doc["estimate"] = report_to_json(est);
            write_text(out / "rerank_estimate.csv", report_to_csv(est));
            std::cout << "== estimated re-ranked unconstrained ==\n"
                      << render_report_table(est) << "\n";

            if (with_true) {
                const DistanceStore rr = rerank_sets(queries, gallery, out, "rr_true");
                const MetricsReport truth = evaluate(queries, gallery, rr, unconstrained_cfg);
                doc["true_unconstrained"] = report_to_json(truth);
                std::cout << "== true re-ranked unconstrained ==\n"
                          << render_report_table(truth) << "\n";
                for (const auto& [name, value] : truth.overall)
                    std::cout << "estimator gap " << name << ": "
                              << est.overall.at(name) - value << "\n";
            }
        }
        write_json(out / "rerank_report.json", doc);
    }
};

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradcheckCmd {
    std::string out_dir, config_file;
    int points = 50;
    double step = 1e-4, tolerance = 1e-4;
    std::uint64_t seed = 1234;

    void attach(CLI::App& app) {
        auto* cmd = app.add_subcommand("gradcheck", "finite-difference checks for all losses");
        cmd->add_option("--out", out_dir, "output directory")->required();
        cmd->add_option("--config", config_file, "JSON config file (flags override it)");
        cmd->add_option("--points", points, "random points per loss");
        cmd->add_option("--step", step, "central-difference step");
        cmd->add_option("--tol", tolerance, "relative-error tolerance");
        cmd->add_option("--seed", seed);
        cmd->callback([this, cmd] {
            apply_config_file(cmd, config_file);
            run();
        });
    }

    void run() const {
        const GradCheckSuiteReport suite = run_gradcheck_suite(seed, points, step, tolerance);
        prepare_out_dir(out_dir);
        json losses = json::array();
        for (const auto& l : suite.losses) {
            losses.push_back({{"name", l.name},
                              {"n_points", l.n_points},
                              {"max_rel_error", l.max_rel_error},
                              {"n_checked", l.n_checked},
                              {"n_excluded", l.n_excluded},
                              {"pass", l.pass}});
            std::printf("%-18s max_rel=%.3e checked=%lld excluded=%lld %s\n", l.name.c_str(),
                        l.max_rel_error, static_cast<long long>(l.n_checked),
                        static_cast<long long>(l.n_excluded), l.pass ? "PASS" : "FAIL");
        }
        json doc = {{"meta", make_meta()},
                    {"config", {{"points", points}, {"step", step}, {"tol", tolerance}, {"seed", seed}}},
                    {"losses", losses},
                    {"all_pass", suite.all_pass}};
        write_json(fs::path(out_dir) / "gradcheck.json", doc);
        if (!suite.all_pass) throw NumericError("gradcheck: at least one loss failed");
    }
};

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportCmd {
    std::string in_path, csv_path;

    void attach(CLI::App& app) {
        auto* cmd = app.add_subcommand("report", "render a JSON report as a table / CSV");
        cmd->add_option("--in", in_path, "report JSON file")->required();
        cmd->add_option("--csv", csv_path, "also write a flat CSV here");
        cmd->callback([this] { run(); });
    }

    void run() const {
        require_input(in_path);
        const json doc = read_json(in_path);
        std::string csv;
        const auto render_one = [&csv](const std::string& title, const json& section) {
            const MetricsReport report = report_from_json(section);
            if (!title.empty()) std::cout << "== " << title << " ==\n";
            std::cout << render_report_table(report) << "\n";
            csv += report_to_csv(report);
        };
        if (doc.contains("before")) {
            render_one("before re-ranking", doc.at("before"));
            render_one("after re-ranking", doc.at("after"));
            if (doc.contains("estimate")) render_one("estimated (starred)", doc.at("estimate"));
            if (doc.contains("true_unconstrained"))
                render_one("true re-ranked unconstrained", doc.at("true_unconstrained"));
        } else {
            render_one("", doc);
        }
        if (!csv_path.empty()) write_text(csv_path, csv);
    }
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"instance-retrieval evaluation engine and metric-learning numeric core"};
    app.require_subcommand(1);

    SynthCmd synth;
    TrainCmd train_toy;
    EvalCmd eval_cmd;
    RerankCmd rerank_cmd;
    GradcheckCmd gradcheck;
    ReportCmd report_cmd;
    synth.attach(app);
    train_toy.attach(app);
    eval_cmd.attach(app);
    rerank_cmd.attach(app);
    gradcheck.attach(app);
    report_cmd.attach(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitValidation;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
    return kExitOk;
}
