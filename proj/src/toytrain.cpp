#include "retkit/toytrain.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include "retkit/distance.hpp"
#include "retkit/rng.hpp"

namespace retkit {

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

void SynthConfig::validate() const {
    if (train_products < 0 || test_products < 1)
        throw ValidationError("synth: need test products (train may be 0 for eval-only sets)");
    if (raw_dim < 2 || embed_dim < 1 || hidden_dim < 1)
        throw ValidationError("synth: bad dimensions");
    if (clutter_dims < 0 || clutter_dims >= raw_dim)
        throw ValidationError("synth: clutter_dims must leave at least one signal dimension");
    if (n_categories < 1 || total_products() < n_categories)
        throw ValidationError("synth: need n_products >= n_categories >= 1");
    if ((raw_dim - clutter_dims) / n_categories < 1)
        throw ValidationError("synth: not enough signal dimensions for the category blocks");
    if (!(street_noise > shop_noise) || !(shop_noise > 0.0))
        throw ValidationError("synth: noise must satisfy street > shop > 0");
    if (domain_shift < 0.0 || distortion < 0.0 || prototype_scale <= 0.0)
        throw ValidationError("synth: bad shift/distortion/prototype scales");
    if (test_street_per_product < 1)
        throw ValidationError("synth: street_per_product = 0 leaves no queries");
    if (shop_per_product < 0 || street_per_product < 0 || test_shop_per_product < 1)
        throw ValidationError("synth: bad per-product counts");
}

namespace {

std::string zero_pad(std::int64_t v, int width) {
    std::string s = std::to_string(v);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

/// Systematic street-domain transform shared by every product (the
/// learnable part of the street/shop gap).
struct DomainShift {
    Eigen::VectorXd scale;
    Eigen::VectorXd shift;
};

DomainShift make_domain_shift(const SynthConfig& cfg) {
    DomainShift ds;
    ds.scale = Eigen::VectorXd::Ones(cfg.raw_dim);
    ds.shift = Eigen::VectorXd::Zero(cfg.raw_dim);
    Rng rng = Rng(cfg.seed).substream(0x53484946ULL);
    const int signal_dims = cfg.raw_dim - cfg.clutter_dims;
    for (int c = 0; c < signal_dims; ++c) {
        ds.scale[c] = 1.0 + cfg.domain_shift * rng.normal();
        ds.shift[c] = cfg.domain_shift * rng.normal();
    }
    return ds;
}

struct ProductModel {
    Eigen::VectorXd prototype;    // raw_dim, zero outside the category block
    Eigen::VectorXd street_base;  // domain shift + per-product wiggle applied
    int category = 0;
};

ProductModel make_product(const SynthConfig& cfg, const DomainShift& ds,
                          std::int64_t product_index) {
    const int signal_dims = cfg.raw_dim - cfg.clutter_dims;
    const int block = signal_dims / cfg.n_categories;
    ProductModel pm;
    pm.category = static_cast<int>(product_index % cfg.n_categories);
    pm.prototype = Eigen::VectorXd::Zero(cfg.raw_dim);
    pm.street_base = Eigen::VectorXd::Zero(cfg.raw_dim);

    Rng rng = Rng(cfg.seed).substream(0x50524F44ULL).substream(static_cast<std::uint64_t>(product_index));
    const int begin = pm.category * block;
    for (int c = 0; c < block; ++c) pm.prototype[begin + c] = cfg.prototype_scale * rng.normal();
    for (int c = 0; c < signal_dims; ++c) {
        const double wiggled =
            (1.0 + cfg.distortion * rng.normal()) * pm.prototype[c] + cfg.distortion * rng.normal();
        pm.street_base[c] = ds.scale[c] * wiggled + ds.shift[c];
    }
    return pm;
}

enum class RowKind { Shop, Street };

void fill_row(MatrixF& matrix, std::int64_t row, const SynthConfig& cfg, const ProductModel& pm,
              RowKind encoded, Rng rng) {
    const int signal_dims = cfg.raw_dim - cfg.clutter_dims;
    for (int c = 0; c < cfg.raw_dim; ++c) {
        double v = 0.0;
        if (c < signal_dims) {
            if (encoded == RowKind::Shop) {
                v = pm.prototype[c] + cfg.shop_noise * rng.normal();
            } else {
                v = pm.street_base[c] + cfg.street_noise * rng.normal();
            }
        } else if (encoded == RowKind::Street) {
            v = rng.normal(); // clutter: randomized per street row
        }
        matrix(row, c) = static_cast<float>(v);
    }
}

} // namespace

SynthData generate_synthetic(const SynthConfig& config) {
    config.validate();

    SynthData data;
    const DomainShift shift = make_domain_shift(config);
    const int train_rows_per_product = config.shop_per_product + config.street_per_product;
    const std::int64_t n_train = static_cast<std::int64_t>(config.train_products) * train_rows_per_product;
    data.train.matrix = MatrixF(n_train, config.raw_dim);
    data.train.records.reserve(static_cast<std::size_t>(n_train));

    std::int64_t row = 0;
    for (int p = 0; p < config.train_products; ++p) {
        const ProductModel pm = make_product(config, shift, p);
        const std::string product = "prod" + zero_pad(p, 4);
        const std::string category = "cat" + zero_pad(pm.category, 2);
        Rng product_rng = Rng(config.seed).substream(0x524F5753ULL).substream(static_cast<std::uint64_t>(p));
        for (int i = 0; i < config.shop_per_product; ++i, ++row) {
            fill_row(data.train.matrix, row, config, pm, RowKind::Shop,
                     product_rng.substream(static_cast<std::uint64_t>(i)));
            data.train.records.push_back({product + "-shop-" + zero_pad(i, 2), product, category,
                                          Domain::Gallery, row});
        }
        for (int i = 0; i < config.street_per_product; ++i, ++row) {
            fill_row(data.train.matrix, row, config, pm, RowKind::Street,
                     product_rng.substream(0x1000ULL + static_cast<std::uint64_t>(i)));
            data.train.records.push_back({product + "-street-" + zero_pad(i, 2), product, category,
                                          Domain::Query, row});
        }
    }

    const std::int64_t n_gallery =
        static_cast<std::int64_t>(config.test_products) * config.test_shop_per_product;
    const std::int64_t n_queries =
        static_cast<std::int64_t>(config.test_products) * config.test_street_per_product;
    data.test_gallery.matrix = MatrixF(n_gallery, config.raw_dim);
    data.test_queries.matrix = MatrixF(n_queries, config.raw_dim);

    std::int64_t grow = 0, qrow = 0;
    for (int t = 0; t < config.test_products; ++t) {
        const int p = config.train_products + t;
        const ProductModel pm = make_product(config, shift, p);
        const std::string product = "prod" + zero_pad(p, 4);
        const std::string category = "cat" + zero_pad(pm.category, 2);
        Rng product_rng = Rng(config.seed).substream(0x524F5753ULL).substream(static_cast<std::uint64_t>(p));
        for (int i = 0; i < config.test_shop_per_product; ++i, ++grow) {
            fill_row(data.test_gallery.matrix, grow, config, pm, RowKind::Shop,
                     product_rng.substream(static_cast<std::uint64_t>(i)));
            data.test_gallery.records.push_back({product + "-shop-" + zero_pad(i, 2), product,
                                                 category, Domain::Gallery, grow});
        }
        for (int i = 0; i < config.test_street_per_product; ++i, ++qrow) {
            fill_row(data.test_queries.matrix, qrow, config, pm, RowKind::Street,
                     product_rng.substream(0x1000ULL + static_cast<std::uint64_t>(i)));
            data.test_queries.records.push_back({product + "-street-" + zero_pad(i, 2), product,
                                                 category, Domain::Query, qrow});
        }
    }
    return data;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

ToyEmbedder ToyEmbedder::init(int raw_dim, int hidden_dim, int embed_dim, int n_classes,
                              std::uint64_t seed) {
    if (raw_dim < 1 || hidden_dim < 1 || embed_dim < 1 || n_classes < 1)
        throw ValidationError("embedder: all dimensions must be >= 1");
    ToyEmbedder m;
    Rng rng = Rng(seed).substream(0x4D4F44454CULL);
    const auto fill = [&rng](MatrixD& w, double scale) {
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = scale * rng.normal();
    };
    m.w1 = MatrixD(hidden_dim, raw_dim);
    fill(m.w1, 1.0 / std::sqrt(static_cast<double>(raw_dim)));
    m.b1 = Eigen::VectorXd::Zero(hidden_dim);
    m.w2 = MatrixD(embed_dim, hidden_dim);
    fill(m.w2, 1.0 / std::sqrt(static_cast<double>(hidden_dim)));
    m.b2 = Eigen::VectorXd::Zero(embed_dim);
    m.bn_gamma = Eigen::VectorXd::Ones(embed_dim);
    m.bn_mean = Eigen::VectorXd::Zero(embed_dim);
    m.bn_var = Eigen::VectorXd::Ones(embed_dim);
    m.classifier = MatrixD(n_classes, embed_dim);
    fill(m.classifier, 1.0 / std::sqrt(static_cast<double>(embed_dim)));
    return m;
}

namespace {

constexpr char kModelMagic[4] = {'T', 'E', 'M', '1'};

void write_block(std::ofstream& out, const double* data, std::size_t count) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
}

void read_block(std::ifstream& in, double* data, std::size_t count, const std::filesystem::path& p) {
    in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
    if (static_cast<std::size_t>(in.gcount()) != count * sizeof(double))
        throw ValidationError(p.string() + ": truncated model file");
}

} // namespace

void ToyEmbedder::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open model file for writing: " + path.string());
    out.write(kModelMagic, 4);
    const std::uint32_t version = 1;
    const std::uint32_t dims[4] = {static_cast<std::uint32_t>(raw_dim()),
                                   static_cast<std::uint32_t>(hidden_dim()),
                                   static_cast<std::uint32_t>(embed_dim()),
                                   static_cast<std::uint32_t>(n_classes())};
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    write_block(out, &bn_eps, 1);
    write_block(out, &bn_momentum, 1);
    write_block(out, w1.data(), static_cast<std::size_t>(w1.size()));
    write_block(out, b1.data(), static_cast<std::size_t>(b1.size()));
    write_block(out, w2.data(), static_cast<std::size_t>(w2.size()));
    write_block(out, b2.data(), static_cast<std::size_t>(b2.size()));
    write_block(out, bn_gamma.data(), static_cast<std::size_t>(bn_gamma.size()));
    write_block(out, bn_mean.data(), static_cast<std::size_t>(bn_mean.size()));
    write_block(out, bn_var.data(), static_cast<std::size_t>(bn_var.size()));
    write_block(out, classifier.data(), static_cast<std::size_t>(classifier.size()));
    if (!out) throw IoError("failed while writing model file: " + path.string());
}

ToyEmbedder ToyEmbedder::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open model file: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, kModelMagic, 4) != 0)
        throw ValidationError(path.string() + ": not a model file (bad magic)");
    std::uint32_t version = 0, dims[4] = {0, 0, 0, 0};
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(dims), sizeof(dims));
    if (!in || version != 1)
        throw ValidationError(path.string() + ": unsupported model version");
    ToyEmbedder m;
    m.w1 = MatrixD(dims[1], dims[0]);
    m.b1 = Eigen::VectorXd(dims[1]);
    m.w2 = MatrixD(dims[2], dims[1]);
    m.b2 = Eigen::VectorXd(dims[2]);
    m.bn_gamma = Eigen::VectorXd(dims[2]);
    m.bn_mean = Eigen::VectorXd(dims[2]);
    m.bn_var = Eigen::VectorXd(dims[2]);
    m.classifier = MatrixD(dims[3], dims[2]);
    read_block(in, &m.bn_eps, 1, path);
    read_block(in, &m.bn_momentum, 1, path);
    read_block(in, m.w1.data(), static_cast<std::size_t>(m.w1.size()), path);
    read_block(in, m.b1.data(), static_cast<std::size_t>(m.b1.size()), path);
    read_block(in, m.w2.data(), static_cast<std::size_t>(m.w2.size()), path);
    read_block(in, m.b2.data(), static_cast<std::size_t>(m.b2.size()), path);
    read_block(in, m.bn_gamma.data(), static_cast<std::size_t>(m.bn_gamma.size()), path);
    read_block(in, m.bn_mean.data(), static_cast<std::size_t>(m.bn_mean.size()), path);
    read_block(in, m.bn_var.data(), static_cast<std::size_t>(m.bn_var.size()), path);
    read_block(in, m.classifier.data(), static_cast<std::size_t>(m.classifier.size()), path);
    return m;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (epochs < 0) throw ValidationError("train: epochs must be >= 0");
    if (base_lr <= 0.0) throw ValidationError("train: base_lr must be > 0");
    if (batch_p < 2 || batch_k < 2)
        throw ValidationError("train: need P >= 2 and K >= 2 for mining");
    if (warmup_epochs < 0 || (epochs > 0 && warmup_epochs >= epochs))
        throw ValidationError("train: warmup_epochs must be < epochs");
    if (accumulation_steps < 1) throw ValidationError("train: accumulation_steps must be >= 1");
    if (steps_per_epoch < 0) throw ValidationError("train: steps_per_epoch must be >= 0");
}

const char* to_string(MetricLossKind k) {
    return k == MetricLossKind::Triplet ? "triplet" : "quadruplet";
}

MetricLossKind metric_loss_from_string(const std::string& s) {
    if (s == "triplet") return MetricLossKind::Triplet;
    if (s == "quadruplet") return MetricLossKind::Quadruplet;
    throw ValidationError("unknown metric loss: '" + s + "'");
}

double warmup_lr(int epoch, const TrainConfig& cfg) {
    if (epoch < 0) throw ValidationError("warmup_lr: epoch must be >= 0");
    double warm = 1.0;
    if (cfg.warmup_epochs > 0 && epoch < cfg.warmup_epochs)
        warm = 0.1 + 0.9 * static_cast<double>(epoch) / static_cast<double>(cfg.warmup_epochs);
    double decay = 1.0;
    const int d1 = static_cast<int>(0.4 * cfg.epochs);
    const int d2 = static_cast<int>(0.7 * cfg.epochs);
    if (epoch >= d1) decay *= 0.1;
    if (epoch >= d2) decay *= 0.1;
    return cfg.base_lr * warm * decay;
}

namespace {

struct ParamGrads {
    MatrixD w1, w2, classifier;
    Eigen::VectorXd b1, b2, gamma;

    explicit ParamGrads(const ToyEmbedder& m)
        : w1(MatrixD::Zero(m.w1.rows(), m.w1.cols())),
          w2(MatrixD::Zero(m.w2.rows(), m.w2.cols())),
          classifier(MatrixD::Zero(m.classifier.rows(), m.classifier.cols())),
          b1(Eigen::VectorXd::Zero(m.b1.size())),
          b2(Eigen::VectorXd::Zero(m.b2.size())),
          gamma(Eigen::VectorXd::Zero(m.bn_gamma.size())) {}
};

/// Pre-bottleneck forward, one sample per row.
struct Forward {
    MatrixD h_pre; // rows x hidden
    MatrixD h;
    MatrixD f; // rows x embed
};

Forward forward_rows(const ToyEmbedder& m, const MatrixD& x) {
    Forward fw;
    fw.h_pre = (x * m.w1.transpose()).rowwise() + m.b1.transpose();
    fw.h = fw.h_pre.cwiseMax(0.0);
    fw.f = (fw.h * m.w2.transpose()).rowwise() + m.b2.transpose();
    return fw;
}

} // namespace

TrainResult train(const EmbeddingSet& train_data, const ToyEmbedder& model,
                  const TrainConfig& tcfg, const LossParams& lcfg) {
    tcfg.validate();
    lcfg.validate();
    if (train_data.rows() == 0) throw ValidationError("train: empty training set");
    if (train_data.dim() != model.raw_dim())
        throw ValidationError("train: raw dim does not match model");

    // class indexing: distinct products, lexicographic
    std::map<std::string, int> class_of;
    for (const auto& rec : train_data.records) class_of.emplace(rec.product, 0);
    {
        int next = 0;
        for (auto& [product, idx] : class_of) idx = next++;
    }
    const int n_classes = static_cast<int>(class_of.size());
    if (n_classes != model.n_classes())
        throw ValidationError("train: classifier expects " + std::to_string(model.n_classes()) +
                              " classes but the data has " + std::to_string(n_classes));
    if (n_classes < tcfg.batch_p)
        throw ValidationError("train: batch_p exceeds the number of products");

    std::vector<int> row_class(static_cast<std::size_t>(train_data.rows()));
    std::vector<std::vector<std::int64_t>> rows_of_class(static_cast<std::size_t>(n_classes));
    for (const auto& rec : train_data.records) {
        const int cls = class_of.at(rec.product);
        row_class[static_cast<std::size_t>(rec.row)] = cls;
        rows_of_class[static_cast<std::size_t>(cls)].push_back(rec.row);
    }
    for (int cls = 0; cls < n_classes; ++cls)
        if (static_cast<int>(rows_of_class[static_cast<std::size_t>(cls)].size()) < tcfg.batch_k)
            throw ValidationError("train: class " + std::to_string(cls) + " has fewer than K rows");

    const int batch_size = tcfg.batch_p * tcfg.batch_k;
    const int steps =
        tcfg.steps_per_epoch > 0
            ? tcfg.steps_per_epoch
            : static_cast<int>((train_data.rows() + batch_size - 1) / batch_size);

    TrainResult result;
    result.model = model;
    result.centers.centers = MatrixD::Zero(n_classes, model.embed_dim());
    result.centers.update_rate = 0.5;
    result.class_products.resize(static_cast<std::size_t>(n_classes));
    for (const auto& [product, idx] : class_of)
        result.class_products[static_cast<std::size_t>(idx)] = product;

    ToyEmbedder& m = result.model;
    ClassCenters& centers = result.centers;
    const bool use_quad = tcfg.loss == MetricLossKind::Quadruplet;
    if (use_quad && tcfg.batch_p < 3)
        throw ValidationError("train: quadruplet loss needs P >= 3");

    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        const double lr = warmup_lr(epoch, tcfg);
        EpochLog log;
        log.epoch = epoch;
        log.lr = lr;

        for (int step = 0; step < steps; ++step) {
            // --- batch sampling (independent of accumulation mode) ---
            Rng rng = Rng(tcfg.seed).substream(0x42415443ULL)
                          .substream(static_cast<std::uint64_t>(epoch) * 1000003ULL +
                                     static_cast<std::uint64_t>(step));
            std::vector<int> class_order(static_cast<std::size_t>(n_classes));
            std::iota(class_order.begin(), class_order.end(), 0);
            rng.shuffle(class_order);
            std::vector<std::int64_t> batch_rows;
            std::vector<int> batch_labels;
            batch_rows.reserve(static_cast<std::size_t>(batch_size));
            for (int p = 0; p < tcfg.batch_p; ++p) {
                const int cls = class_order[static_cast<std::size_t>(p)];
                auto rows = rows_of_class[static_cast<std::size_t>(cls)];
                rng.shuffle(rows);
                for (int k = 0; k < tcfg.batch_k; ++k) {
                    batch_rows.push_back(rows[static_cast<std::size_t>(k)]);
                    batch_labels.push_back(cls);
                }
            }

            // --- phase A: value pass; batch statistics become constants ---
            const auto b = static_cast<Eigen::Index>(batch_size);
            MatrixD x_batch(b, m.raw_dim());
            for (Eigen::Index j = 0; j < b; ++j)
                for (int c = 0; c < m.raw_dim(); ++c)
                    x_batch(j, c) =
                        static_cast<double>(train_data.matrix(batch_rows[static_cast<std::size_t>(j)], c));

            const MatrixD features = forward_rows(m, x_batch).f; // pre-bottleneck
            if (!features.allFinite())
                throw NumericError("training diverged at epoch " + std::to_string(epoch) +
                                   " (non-finite features)");
            const Eigen::VectorXd mu = features.colwise().mean().transpose();
            Eigen::VectorXd var(m.embed_dim());
            for (int c = 0; c < m.embed_dim(); ++c) {
                double acc = 0.0;
                for (Eigen::Index j = 0; j < b; ++j) {
                    const double d = features(j, c) - mu[c];
                    acc += d * d;
                }
                var[c] = acc / static_cast<double>(b);
            }
            const Eigen::VectorXd inv_std =
                (var.array() + m.bn_eps).sqrt().inverse().matrix();

            const MatrixD post = ((features.rowwise() - mu.transpose()).array().rowwise() *
                                  (m.bn_gamma.cwiseProduct(inv_std)).transpose().array())
                                     .matrix();
            const MatrixD logits = post * m.classifier.transpose();

            const LossOutput ce = label_smoothed_ce(logits, batch_labels, lcfg.label_smoothing);

            MiningBatch mining{features, batch_labels};
            MatrixD d_features = MatrixD::Zero(b, m.embed_dim());
            double metric_value = 0.0;
            if (use_quad) {
                const QuadrupletIndices mined = mine_quadruplets(mining);
                MatrixD pos(b, m.embed_dim()), neg1(b, m.embed_dim()), neg2(b, m.embed_dim());
                for (Eigen::Index j = 0; j < b; ++j) {
                    pos.row(j) = features.row(mined.positive[static_cast<std::size_t>(j)]);
                    neg1.row(j) = features.row(mined.negative1[static_cast<std::size_t>(j)]);
                    neg2.row(j) = features.row(mined.negative2[static_cast<std::size_t>(j)]);
                }
                const LossOutput quad = quadruplet_loss(features, pos, neg1, neg2, lcfg);
                metric_value = quad.value;
                for (Eigen::Index j = 0; j < b; ++j) {
                    d_features.row(j) += quad.grad_embeddings.row(j);
                    d_features.row(mined.positive[static_cast<std::size_t>(j)]) +=
                        quad.grad_embeddings.row(b + j);
                    d_features.row(mined.negative1[static_cast<std::size_t>(j)]) +=
                        quad.grad_embeddings.row(2 * b + j);
                    d_features.row(mined.negative2[static_cast<std::size_t>(j)]) +=
                        quad.grad_embeddings.row(3 * b + j);
                }
            } else {
                const MinedIndices mined = batch_hard_mine(mining, true);
                MatrixD pos(b, m.embed_dim()), neg(b, m.embed_dim());
                for (Eigen::Index j = 0; j < b; ++j) {
                    pos.row(j) = features.row(mined.positive[static_cast<std::size_t>(j)]);
                    neg.row(j) = features.row(mined.negative[static_cast<std::size_t>(j)]);
                }
                const LossOutput tri = triplet_loss(features, pos, neg, lcfg.triplet_margin);
                metric_value = tri.value;
                for (Eigen::Index j = 0; j < b; ++j) {
                    d_features.row(j) += tri.grad_embeddings.row(j);
                    d_features.row(mined.positive[static_cast<std::size_t>(j)]) +=
                        tri.grad_embeddings.row(b + j);
                    d_features.row(mined.negative[static_cast<std::size_t>(j)]) +=
                        tri.grad_embeddings.row(2 * b + j);
                }
            }

            const LossOutput center = center_loss(mining, centers);
            d_features += lcfg.center_weight * center.grad_embeddings;

            const double total = ce.value + metric_value + lcfg.center_weight * center.value;
            if (!std::isfinite(total))
                throw NumericError("training diverged at epoch " + std::to_string(epoch) +
                                   " (non-finite loss)");
            log.loss_ce += ce.value;
            log.loss_metric += metric_value;
            log.loss_center += center.value;
            log.loss_total += total;

            // --- phase B: parameter gradients, optionally in sub-batches.
            // Batch statistics (mu, inv_std), mined partners and margins are
            // frozen constants here, so chunk gradients sum to the full-batch
            // gradient and accumulation matches the single pass to round-off.
            ParamGrads grads(m);
            const int chunks = std::min(tcfg.accumulation_steps, batch_size);
            const int chunk_rows = (batch_size + chunks - 1) / chunks;
            for (int chunk = 0; chunk < chunks; ++chunk) {
                const Eigen::Index j0 = static_cast<Eigen::Index>(chunk) * chunk_rows;
                const Eigen::Index j1 = std::min<Eigen::Index>(b, j0 + chunk_rows);
                if (j0 >= j1) break;
                const Eigen::Index rows = j1 - j0;

                const MatrixD x = x_batch.middleRows(j0, rows);
                const Forward fw = forward_rows(m, x);
                const MatrixD f_hat = ((fw.f.rowwise() - mu.transpose()).array().rowwise() *
                                       inv_std.transpose().array())
                                          .matrix();
                const MatrixD g =
                    (f_hat.array().rowwise() * m.bn_gamma.transpose().array()).matrix();

                const MatrixD d_logits = ce.grad_embeddings.middleRows(j0, rows);
                grads.classifier += d_logits.transpose() * g;
                const MatrixD d_g = d_logits * m.classifier;
                grads.gamma += (d_g.array() * f_hat.array()).colwise().sum().matrix().transpose();

                MatrixD d_f = d_features.middleRows(j0, rows);
                d_f += (d_g.array().rowwise() *
                        (m.bn_gamma.cwiseProduct(inv_std)).transpose().array())
                           .matrix();

                grads.b2 += d_f.colwise().sum().transpose();
                grads.w2 += d_f.transpose() * fw.h;
                MatrixD d_h = d_f * m.w2;
                d_h.array() *= (fw.h_pre.array() > 0.0).cast<double>();
                grads.b1 += d_h.colwise().sum().transpose();
                grads.w1 += d_h.transpose() * x;
            }

            // --- SGD update ---
            m.w1 -= lr * grads.w1;
            m.b1 -= lr * grads.b1;
            m.w2 -= lr * grads.w2;
            m.b2 -= lr * grads.b2;
            m.bn_gamma -= lr * grads.gamma;
            m.classifier -= lr * grads.classifier;

            // running statistics and center update use the phase-A features
            m.bn_mean = (1.0 - m.bn_momentum) * m.bn_mean + m.bn_momentum * mu;
            m.bn_var = (1.0 - m.bn_momentum) * m.bn_var + m.bn_momentum * var;
            centers.centers -= centers.update_rate * (*center.grad_centers);
        }

        const double inv_steps = 1.0 / static_cast<double>(steps);
        log.loss_ce *= inv_steps;
        log.loss_metric *= inv_steps;
        log.loss_center *= inv_steps;
        log.loss_total *= inv_steps;
        result.log.push_back(log);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

MatrixF embed_rows(const ToyEmbedder& model, const MatrixF& raw) {
    if (raw.cols() != model.raw_dim())
        throw ValidationError("embed: raw dim " + std::to_string(raw.cols()) +
                              " does not match model (" + std::to_string(model.raw_dim()) + ")");
    const Eigen::VectorXd inv_std = (model.bn_var.array() + model.bn_eps).sqrt().inverse().matrix();
    const Forward fw = forward_rows(model, raw.cast<double>());
    const MatrixD g = ((fw.f.rowwise() - model.bn_mean.transpose()).array().rowwise() *
                       (model.bn_gamma.cwiseProduct(inv_std)).transpose().array())
                          .matrix();
    MatrixF out(raw.rows(), model.embed_dim());
    for (Eigen::Index r = 0; r < raw.rows(); ++r) {
        const double norm = g.row(r).norm();
        if (norm < 1e-12)
            throw NumericError("embed: row " + std::to_string(r) + " maps to a near-zero feature");
        out.row(r) = (g.row(r) / norm).cast<float>();
    }
    return out;
}

EmbeddingSet embed(const ToyEmbedder& model, const EmbeddingSet& raw) {
    EmbeddingSet out;
    out.matrix = embed_rows(model, raw.matrix);
    out.records = raw.records;
    out.normalized = true;
    return out;
}

MetricsReport cross_domain_eval(const ToyEmbedder& model, const EmbeddingSet& raw_queries,
                                const EmbeddingSet& raw_gallery, const EvalConfig& config) {
    const EmbeddingSet q = embed(model, raw_queries);
    const EmbeddingSet g = embed(model, raw_gallery);
    const DistanceStore store = compute_distances(q, g, config.metric);
    MetricsReport report = evaluate(q, g, store, config);
    report.protocol = Protocol::CrossDomain;
    return report;
}

} // namespace retkit
