#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "retkit/core.hpp"
#include "retkit/losses.hpp"
#include "retkit/metrics.hpp"

namespace retkit {

/// Two-domain synthetic dataset. Products live in category-specific
/// coordinate blocks; shop rows are lightly-noised prototypes, street rows go
/// through a fixed per-product affine distortion, heavier noise and random
/// clutter dimensions. Held-out products form the test split (retrieval is
/// across identities never seen in training).
struct SynthConfig {
    int train_products = 128;
    int test_products = 32; // held out
    int raw_dim = 48;
    int embed_dim = 16;
    int hidden_dim = 32;
    int shop_per_product = 6;       // training rows per product, shop domain
    int street_per_product = 6;     // training rows per product, street domain
    int test_shop_per_product = 10; // gallery images per held-out product
    int test_street_per_product = 2; // query images per held-out product
    int n_categories = 4;
    int clutter_dims = 8;      // randomized for street rows only
    double shop_noise = 0.05;  // sigma_s
    double street_noise = 0.3; // sigma_c, must exceed sigma_s
    double domain_shift = 0.8; // global street-domain affine component (learnable)
    double distortion = 0.1;   // per-product street wiggle on top of it (not learnable)
    double prototype_scale = 2.0;
    std::uint64_t seed = 7;

    void validate() const;
    int total_products() const { return train_products + test_products; }
};

struct SynthData {
    EmbeddingSet train;        // raw features, both domains
    EmbeddingSet test_queries; // street rows of held-out products
    EmbeddingSet test_gallery; // shop rows of held-out products
};

SynthData generate_synthetic(const SynthConfig& config);

/// Two affine layers with a ReLU between, a batch-norm-style bottleneck on
/// the output features and a bias-free classifier attached after the
/// bottleneck. Metric and center losses see the pre-bottleneck features; the
/// classifier sees the post-bottleneck ones. Inference output is the
/// L2-normalized post-bottleneck feature computed with the frozen running
/// statistics, so it does not depend on batch composition.
struct ToyEmbedder {
    MatrixD w1; // hidden x raw
    Eigen::VectorXd b1;
    MatrixD w2; // embed x hidden
    Eigen::VectorXd b2;
    Eigen::VectorXd bn_gamma;   // bottleneck scale (shift fixed at 0)
    Eigen::VectorXd bn_mean;    // running statistics
    Eigen::VectorXd bn_var;
    MatrixD classifier; // n_classes x embed, no bias
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;

    int raw_dim() const { return static_cast<int>(w1.cols()); }
    int hidden_dim() const { return static_cast<int>(w1.rows()); }
    int embed_dim() const { return static_cast<int>(w2.rows()); }
    int n_classes() const { return static_cast<int>(classifier.rows()); }

    static ToyEmbedder init(int raw_dim, int hidden_dim, int embed_dim, int n_classes,
                            std::uint64_t seed);

    void save(const std::filesystem::path& path) const;
    static ToyEmbedder load(const std::filesystem::path& path);
};

enum class MetricLossKind { Triplet, Quadruplet };

const char* to_string(MetricLossKind k);
MetricLossKind metric_loss_from_string(const std::string& s);

struct TrainConfig {
    int epochs = 120;
    double base_lr = 0.0001;
    int batch_p = 16; // distinct products per batch
    int batch_k = 4;  // instances per product
    int warmup_epochs = 10;
    int accumulation_steps = 1;
    MetricLossKind loss = MetricLossKind::Quadruplet;
    int steps_per_epoch = 0; // 0 = ceil(n_rows / (P*K))
    std::uint64_t seed = 1;

    void validate() const;
};

/// Linear ramp from base_lr/10 to base_lr across warmup_epochs, then step
/// decay x0.1 at 40% and 70% of the epoch budget.
double warmup_lr(int epoch, const TrainConfig& cfg);

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double loss_total = 0.0;
    double loss_ce = 0.0;
    double loss_metric = 0.0;
    double loss_center = 0.0;
};

struct TrainResult {
    ToyEmbedder model;
    ClassCenters centers;
    std::vector<EpochLog> log;
    std::vector<std::string> class_products; // class index -> product id
};

/// Full training loop: P*K batches with batch-hard mining, label-smoothed CE
/// on the classifier, triplet or quadruplet metric loss on pre-bottleneck
/// features, weighted center loss, SGD with the warm-up/decay schedule.
/// Bit-deterministic given (data, model, configs). Batch statistics (BN
/// moments, mined indices, dynamic margins) are computed once per step from a
/// no-gradient pass and treated as constants in differentiation, which makes
/// gradient accumulation reproduce the single-pass trajectory.
TrainResult train(const EmbeddingSet& train_data, const ToyEmbedder& model,
                  const TrainConfig& tcfg, const LossParams& lcfg);

/// Inference features for a raw matrix (rows preserved, L2-normalized).
MatrixF embed_rows(const ToyEmbedder& model, const MatrixF& raw);
EmbeddingSet embed(const ToyEmbedder& model, const EmbeddingSet& raw);

/// Embeds set B with an A-trained model and evaluates; report tagged
/// cross_domain.
MetricsReport cross_domain_eval(const ToyEmbedder& model, const EmbeddingSet& raw_queries,
                                const EmbeddingSet& raw_gallery, const EvalConfig& config);

} // namespace retkit
