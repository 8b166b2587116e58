#include "doctest.h"

#include <cmath>
#include <set>

#include "retkit/distance.hpp"
#include "retkit/toytrain.hpp"
#include "test_util.hpp"

using namespace retkit;
using rk_test::TempDir;

namespace {

SynthConfig small_config() {
    SynthConfig cfg;
    cfg.train_products = 12;
    cfg.test_products = 6;
    cfg.raw_dim = 20;
    cfg.embed_dim = 8;
    cfg.hidden_dim = 12;
    cfg.shop_per_product = 4;
    cfg.street_per_product = 4;
    cfg.test_shop_per_product = 4;
    cfg.test_street_per_product = 2;
    cfg.n_categories = 2;
    cfg.clutter_dims = 4;
    cfg.seed = 99;
    return cfg;
}

TrainConfig small_train() {
    TrainConfig t;
    t.epochs = 5;
    t.batch_p = 4;
    t.batch_k = 3;
    t.warmup_epochs = 2;
    t.base_lr = 0.01;
    t.steps_per_epoch = 6;
    t.seed = 5;
    return t;
}

ToyEmbedder fresh_model(const SynthConfig& cfg) {
    return ToyEmbedder::init(cfg.raw_dim, cfg.hidden_dim, cfg.embed_dim, cfg.train_products, 17);
}

} // namespace

TEST_CASE("generator: identical seeds give bit-identical datasets") {
    const SynthConfig cfg = small_config();
    const SynthData a = generate_synthetic(cfg);
    const SynthData b = generate_synthetic(cfg);
    CHECK(std::memcmp(a.train.matrix.data(), b.train.matrix.data(),
                      sizeof(float) * a.train.matrix.size()) == 0);
    CHECK(std::memcmp(a.test_queries.matrix.data(), b.test_queries.matrix.data(),
                      sizeof(float) * a.test_queries.matrix.size()) == 0);
    SynthConfig other = cfg;
    other.seed = 100;
    const SynthData c = generate_synthetic(other);
    CHECK(std::memcmp(a.train.matrix.data(), c.train.matrix.data(),
                      sizeof(float) * a.train.matrix.size()) != 0);
}

TEST_CASE("generator: vanishing shop noise collapses a product's shop rows") {
    SynthConfig cfg = small_config();
    cfg.shop_noise = 1e-9;
    cfg.street_noise = 1e-8;
    const SynthData data = generate_synthetic(cfg);
    // rows 0..3 belong to the first product's shop domain
    for (int r = 1; r < cfg.shop_per_product; ++r)
        for (int c = 0; c < cfg.raw_dim; ++c)
            CHECK(std::abs(data.train.matrix(r, c) - data.train.matrix(0, c)) < 1e-6f);
}

TEST_CASE("generator: split sizes, domains and held-out products") {
    const SynthConfig cfg = small_config();
    const SynthData data = generate_synthetic(cfg);
    CHECK(data.train.rows() == 12 * 8);
    CHECK(data.test_queries.rows() == 6 * 2);
    CHECK(data.test_gallery.rows() == 6 * 4);
    std::set<std::string> train_products, test_products;
    for (const auto& rec : data.train.records) train_products.insert(rec.product);
    for (const auto& rec : data.test_gallery.records) test_products.insert(rec.product);
    for (const auto& p : test_products) CHECK(train_products.count(p) == 0);
    for (const auto& rec : data.test_queries.records) CHECK(rec.domain == Domain::Query);
    for (const auto& rec : data.test_gallery.records) CHECK(rec.domain == Domain::Gallery);
}

TEST_CASE("generator: invariant violations are rejected") {
    SynthConfig cfg = small_config();
    cfg.street_noise = cfg.shop_noise; // must be strictly larger
    CHECK_THROWS_AS(generate_synthetic(cfg), ValidationError);
    cfg = small_config();
    cfg.test_street_per_product = 0; // no queries possible
    CHECK_THROWS_AS(generate_synthetic(cfg), ValidationError);
    cfg = small_config();
    cfg.clutter_dims = cfg.raw_dim;
    CHECK_THROWS_AS(generate_synthetic(cfg), ValidationError);
}

TEST_CASE("warmup_lr matches the three-piece closed form over a 120-epoch sweep") {
    TrainConfig cfg;
    cfg.epochs = 120;
    cfg.base_lr = 0.0001;
    cfg.warmup_epochs = 10;
    CHECK(warmup_lr(0, cfg) == doctest::Approx(cfg.base_lr / 10.0));
    CHECK(warmup_lr(cfg.warmup_epochs, cfg) == doctest::Approx(cfg.base_lr));
    for (int epoch = 0; epoch <= 120; ++epoch) {
        double expected = cfg.base_lr;
        if (epoch < 10) expected = cfg.base_lr * (0.1 + 0.9 * epoch / 10.0);
        if (epoch >= 48) expected *= 0.1;
        if (epoch >= 84) expected *= 0.1;
        CHECK(warmup_lr(epoch, cfg) == doctest::Approx(expected).epsilon(1e-12));
    }
    CHECK_THROWS_AS(warmup_lr(-1, cfg), ValidationError);
}

TEST_CASE("embed: unit norms, batch independence, permutation equivariance") {
    const SynthConfig cfg = small_config();
    const SynthData data = generate_synthetic(cfg);
    const ToyEmbedder model = fresh_model(cfg);

    const MatrixF out = embed_rows(model, data.test_gallery.matrix);
    for (Eigen::Index r = 0; r < out.rows(); ++r)
        CHECK(std::abs(out.row(r).cast<double>().norm() - 1.0) < 1e-6);

    // one row alone embeds identically to the same row inside a batch
    const MatrixF single = embed_rows(model, data.test_gallery.matrix.topRows(1));
    for (Eigen::Index c = 0; c < out.cols(); ++c)
        CHECK(std::abs(single(0, c) - out(0, c)) < 1e-6f);

    // permuted inputs give identically permuted outputs
    MatrixF reversed(out.rows(), cfg.raw_dim);
    for (Eigen::Index r = 0; r < reversed.rows(); ++r)
        reversed.row(r) = data.test_gallery.matrix.row(out.rows() - 1 - r);
    const MatrixF out_rev = embed_rows(model, reversed);
    for (Eigen::Index r = 0; r < out.rows(); ++r)
        for (Eigen::Index c = 0; c < out.cols(); ++c)
            CHECK(out_rev(r, c) == out(out.rows() - 1 - r, c));

    CHECK_THROWS_AS(embed_rows(model, MatrixF::Ones(2, cfg.raw_dim + 1)), ValidationError);
}

TEST_CASE("train: zero epochs returns the model unchanged") {
    TempDir dir("toy0");
    const SynthConfig cfg = small_config();
    const SynthData data = generate_synthetic(cfg);
    const ToyEmbedder model = fresh_model(cfg);
    TrainConfig tcfg = small_train();
    tcfg.epochs = 0;
    tcfg.warmup_epochs = 0;
    const TrainResult result = train(data.train, model, tcfg, LossParams{});
    model.save(dir / "before.tem");
    result.model.save(dir / "after.tem");
    CHECK(rk_test::read_file(dir / "before.tem") == rk_test::read_file(dir / "after.tem"));
    CHECK(result.log.empty());
}

TEST_CASE("train: bit-deterministic given the seed") {
    TempDir dir("toydet");
    const SynthConfig cfg = small_config();
    const SynthData data = generate_synthetic(cfg);
    const TrainConfig tcfg = small_train();
    const TrainResult a = train(data.train, fresh_model(cfg), tcfg, LossParams{});
    const TrainResult b = train(data.train, fresh_model(cfg), tcfg, LossParams{});
    a.model.save(dir / "a.tem");
    b.model.save(dir / "b.tem");
    CHECK(rk_test::read_file(dir / "a.tem") == rk_test::read_file(dir / "b.tem"));
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i)
        CHECK(a.log[i].loss_total == b.log[i].loss_total);
}

TEST_CASE("train: gradient accumulation reproduces the single-pass trajectory") {
    const SynthConfig cfg = small_config();
    const SynthData data = generate_synthetic(cfg);
    const TrainConfig base = small_train();

    const TrainResult full = train(data.train, fresh_model(cfg), base, LossParams{});
    for (const int steps : {2, 4}) {
        TrainConfig chunked = base;
        chunked.accumulation_steps = steps;
        const TrainResult acc = train(data.train, fresh_model(cfg), chunked, LossParams{});
        CHECK((full.model.w1 - acc.model.w1).cwiseAbs().maxCoeff() < 1e-6);
        CHECK((full.model.w2 - acc.model.w2).cwiseAbs().maxCoeff() < 1e-6);
        CHECK((full.model.b1 - acc.model.b1).cwiseAbs().maxCoeff() < 1e-6);
        CHECK((full.model.b2 - acc.model.b2).cwiseAbs().maxCoeff() < 1e-6);
        CHECK((full.model.bn_gamma - acc.model.bn_gamma).cwiseAbs().maxCoeff() < 1e-6);
        CHECK((full.model.classifier - acc.model.classifier).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("train: losses trend down and training beats the raw baseline") {
    SynthConfig cfg = small_config();
    // harder setting so the raw baseline has headroom above it
    cfg.street_noise = 0.6;
    cfg.distortion = 0.5;
    cfg.clutter_dims = 8;
    const SynthData data = generate_synthetic(cfg);
    TrainConfig tcfg = small_train();
    tcfg.epochs = 30;
    tcfg.base_lr = 0.02;
    const TrainResult result = train(data.train, fresh_model(cfg), tcfg, LossParams{});
    REQUIRE(result.log.size() == 30);
    CHECK(result.log.back().loss_metric < result.log.front().loss_metric);

    EvalConfig ecfg;
    ecfg.k_values = {1};
    const EmbeddingSet raw_q = l2_normalize(data.test_queries);
    const EmbeddingSet raw_g = l2_normalize(data.test_gallery);
    const MetricsReport raw =
        evaluate(raw_q, raw_g, compute_distances(raw_q, raw_g, ecfg.metric), ecfg);
    const EmbeddingSet emb_q = embed(result.model, data.test_queries);
    const EmbeddingSet emb_g = embed(result.model, data.test_gallery);
    const MetricsReport trained =
        evaluate(emb_q, emb_g, compute_distances(emb_q, emb_g, ecfg.metric), ecfg);
    CHECK(trained.overall.at("mAP") > raw.overall.at("mAP"));
}

TEST_CASE("train: divergence is reported with the offending epoch") {
    const SynthConfig cfg = small_config();
    const SynthData data = generate_synthetic(cfg);
    TrainConfig tcfg = small_train();
    tcfg.base_lr = 1e18;
    tcfg.warmup_epochs = 0;
    tcfg.epochs = 4;
    CHECK_THROWS_AS(train(data.train, fresh_model(cfg), tcfg, LossParams{}), NumericError);
}

TEST_CASE("model file round-trips") {
    TempDir dir("model-rt");
    const SynthConfig cfg = small_config();
    const ToyEmbedder model = fresh_model(cfg);
    model.save(dir / "m.tem");
    const ToyEmbedder back = ToyEmbedder::load(dir / "m.tem");
    CHECK(back.w1 == model.w1);
    CHECK(back.classifier == model.classifier);
    back.save(dir / "m2.tem");
    CHECK(rk_test::read_file(dir / "m.tem") == rk_test::read_file(dir / "m2.tem"));
    CHECK_THROWS_AS(ToyEmbedder::load(dir / "absent.tem"), IoError);
}

TEST_CASE("cross_domain_eval on the in-domain split equals the in-domain report") {
    const SynthConfig cfg = small_config();
    const SynthData data = generate_synthetic(cfg);
    TrainConfig tcfg = small_train();
    const TrainResult result = train(data.train, fresh_model(cfg), tcfg, LossParams{});

    EvalConfig ecfg;
    ecfg.k_values = {1, 5};
    const EmbeddingSet emb_q = embed(result.model, data.test_queries);
    const EmbeddingSet emb_g = embed(result.model, data.test_gallery);
    const MetricsReport in_domain =
        evaluate(emb_q, emb_g, compute_distances(emb_q, emb_g, ecfg.metric), ecfg);
    const MetricsReport cross = cross_domain_eval(result.model, data.test_queries,
                                                  data.test_gallery, ecfg);
    CHECK(cross.protocol == Protocol::CrossDomain);
    CHECK(cross.overall == in_domain.overall);
}
