#include "retkit/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace retkit {

namespace {

double squared_distance(const MatrixD& a, std::int64_t i, const MatrixD& b, std::int64_t j) {
    double acc = 0.0;
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
        const double d = a(i, c) - b(j, c);
        acc += d * d;
    }
    return acc;
}

void require_same_shape(const MatrixD& a, const MatrixD& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ValidationError(std::string(what) + ": shape mismatch");
}

void require_finite(const MatrixD& m, const char* what) {
    if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite inputs");
}

} // namespace

int MiningBatch::validate() const {
    if (embeddings.rows() != static_cast<Eigen::Index>(labels.size()))
        throw ValidationError("mining batch: labels and embedding rows differ");
    if (labels.size() < 2) throw ValidationError("mining batch: need at least 2 rows");
    std::map<int, int> counts;
    for (int l : labels) ++counts[l];
    if (counts.size() < 2) throw ValidationError("mining batch: need at least 2 distinct labels");
    const int k = counts.begin()->second;
    for (const auto& [label, count] : counts)
        if (count != k)
            throw ValidationError("mining batch: label " + std::to_string(label) + " appears " +
                                  std::to_string(count) + " times, expected " + std::to_string(k));
    if (static_cast<int>(labels.size()) < 2 * k)
        throw ValidationError("mining batch: batch size must be >= 2K");
    return k;
}

void LossParams::validate() const {
    if (triplet_margin <= 0.0) throw ValidationError("loss params: triplet margin must be > 0");
    if (quad_g2 > quad_g1) throw ValidationError("loss params: g2 must be <= g1");
    if (margin_clamp_lo <= 0.0 || margin_clamp_hi < margin_clamp_lo)
        throw ValidationError("loss params: bad margin clamp range");
    if (center_weight < 0.0) throw ValidationError("loss params: center weight must be >= 0");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
        throw ValidationError("loss params: label smoothing must lie in [0, 1)");
}

MinedIndices batch_hard_mine(const MiningBatch& batch, bool squared) {
    const int k = batch.validate();
    if (k == 1) throw ValidationError("batch_hard_mine: K = 1 leaves anchors without positives");
    require_finite(batch.embeddings, "batch_hard_mine");
    const auto b = static_cast<int>(batch.size());

    MinedIndices mined;
    mined.positive.resize(static_cast<std::size_t>(b));
    mined.negative.resize(static_cast<std::size_t>(b));
    for (int a = 0; a < b; ++a) {
        double worst_pos = -1.0;
        double best_neg = std::numeric_limits<double>::infinity();
        int pos = -1, neg = -1;
        for (int j = 0; j < b; ++j) {
            if (j == a) continue;
            double d = squared_distance(batch.embeddings, a, batch.embeddings, j);
            if (!squared) d = std::sqrt(d);
            if (batch.labels[static_cast<std::size_t>(j)] == batch.labels[static_cast<std::size_t>(a)]) {
                if (d > worst_pos) {
                    worst_pos = d;
                    pos = j;
                }
            } else if (d < best_neg) {
                best_neg = d;
                neg = j;
            }
        }
        mined.positive[static_cast<std::size_t>(a)] = pos;
        mined.negative[static_cast<std::size_t>(a)] = neg;
    }
    return mined;
}

QuadrupletIndices mine_quadruplets(const MiningBatch& batch) {
    const MinedIndices base = batch_hard_mine(batch, true);
    const auto b = static_cast<int>(batch.size());

    QuadrupletIndices mined;
    mined.positive = base.positive;
    mined.negative1 = base.negative;
    mined.negative2.resize(static_cast<std::size_t>(b));
    for (int a = 0; a < b; ++a) {
        const int la = batch.labels[static_cast<std::size_t>(a)];
        const int ln1 = batch.labels[static_cast<std::size_t>(mined.negative1[static_cast<std::size_t>(a)])];
        double best = std::numeric_limits<double>::infinity();
        int pick = -1;
        for (int j = 0; j < b; ++j) {
            const int lj = batch.labels[static_cast<std::size_t>(j)];
            if (lj == la || lj == ln1) continue;
            const double d = squared_distance(batch.embeddings, a, batch.embeddings, j);
            if (d < best) {
                best = d;
                pick = j;
            }
        }
        if (pick < 0)
            throw ValidationError("mine_quadruplets: needs a third distinct label in the batch");
        mined.negative2[static_cast<std::size_t>(a)] = pick;
    }
    return mined;
}

LossOutput triplet_loss(const MatrixD& anchor, const MatrixD& positive, const MatrixD& negative,
                        double margin) {
    require_same_shape(anchor, positive, "triplet_loss");
    require_same_shape(anchor, negative, "triplet_loss");
    require_finite(anchor, "triplet_loss");
    require_finite(positive, "triplet_loss");
    require_finite(negative, "triplet_loss");
    if (margin <= 0.0) throw ValidationError("triplet_loss: margin must be > 0");
    if (anchor.rows() == 0) throw ValidationError("triplet_loss: empty batch");

    const auto b = anchor.rows();
    const auto dim = anchor.cols();
    const double inv_b = 1.0 / static_cast<double>(b);

    LossOutput out;
    out.grad_embeddings = MatrixD::Zero(3 * b, dim);
    out.hinge_activations.reserve(static_cast<std::size_t>(b));

    auto grad_a = out.grad_embeddings.topRows(b);
    auto grad_p = out.grad_embeddings.middleRows(b, b);
    auto grad_n = out.grad_embeddings.bottomRows(b);

    double total = 0.0;
    for (Eigen::Index i = 0; i < b; ++i) {
        const double dap = squared_distance(anchor, i, positive, i);
        const double dan = squared_distance(anchor, i, negative, i);
        const double z = dap - dan + margin;
        out.hinge_activations.push_back(z);
        if (z > 0.0) {
            total += z;
            for (Eigen::Index c = 0; c < dim; ++c) {
                const double ap = anchor(i, c) - positive(i, c);
                const double an = anchor(i, c) - negative(i, c);
                grad_a(i, c) = 2.0 * (ap - an) * inv_b;
                grad_p(i, c) = -2.0 * ap * inv_b;
                grad_n(i, c) = 2.0 * an * inv_b;
            }
        }
    }
    out.value = total * inv_b;
    return out;
}

QuadrupletMargins quadruplet_margins(const MatrixD& anchor, const MatrixD& positive,
                                     const MatrixD& negative1, const LossParams& params) {
    params.validate();
    require_same_shape(anchor, positive, "quadruplet_margins");
    require_same_shape(anchor, negative1, "quadruplet_margins");
    if (anchor.rows() == 0) throw ValidationError("quadruplet_margins: empty batch");

    double mu_p = 0.0, mu_n = 0.0;
    for (Eigen::Index i = 0; i < anchor.rows(); ++i) {
        mu_p += squared_distance(anchor, i, positive, i);
        mu_n += squared_distance(anchor, i, negative1, i);
    }
    mu_p /= static_cast<double>(anchor.rows());
    mu_n /= static_cast<double>(anchor.rows());
    const double gap = mu_n - mu_p;
    if (!std::isfinite(gap)) throw NumericError("quadruplet_margins: degenerate batch, batch skipped");
    QuadrupletMargins m;
    m.alpha1 = std::clamp(params.quad_g1 * gap, params.margin_clamp_lo, params.margin_clamp_hi);
    m.alpha2 = std::clamp(params.quad_g2 * gap, params.margin_clamp_lo, params.margin_clamp_hi);
    return m;
}

LossOutput quadruplet_loss_fixed_margins(const MatrixD& anchor, const MatrixD& positive,
                                         const MatrixD& negative1, const MatrixD& negative2,
                                         const QuadrupletMargins& margins) {
    require_same_shape(anchor, positive, "quadruplet_loss");
    require_same_shape(anchor, negative1, "quadruplet_loss");
    require_same_shape(anchor, negative2, "quadruplet_loss");
    require_finite(anchor, "quadruplet_loss");
    require_finite(positive, "quadruplet_loss");
    require_finite(negative1, "quadruplet_loss");
    require_finite(negative2, "quadruplet_loss");
    if (anchor.rows() == 0) throw ValidationError("quadruplet_loss: empty batch");

    const auto b = anchor.rows();
    const auto dim = anchor.cols();
    const double inv_b = 1.0 / static_cast<double>(b);

    LossOutput out;
    out.grad_embeddings = MatrixD::Zero(4 * b, dim);
    out.hinge_activations.reserve(static_cast<std::size_t>(2 * b));

    auto grad_a = out.grad_embeddings.topRows(b);
    auto grad_p = out.grad_embeddings.middleRows(b, b);
    auto grad_n1 = out.grad_embeddings.middleRows(2 * b, b);
    auto grad_n2 = out.grad_embeddings.bottomRows(b);

    double total = 0.0;
    for (Eigen::Index i = 0; i < b; ++i) {
        const double dap = squared_distance(anchor, i, positive, i);
        const double dan1 = squared_distance(anchor, i, negative1, i);
        const double dn2n1 = squared_distance(negative2, i, negative1, i);
        const double h1 = dap - dan1 + margins.alpha1;
        const double h2 = dap - dn2n1 + margins.alpha2;
        out.hinge_activations.push_back(h1);
        out.hinge_activations.push_back(h2);
        if (h1 > 0.0) {
            total += h1;
            for (Eigen::Index c = 0; c < dim; ++c) {
                const double ap = anchor(i, c) - positive(i, c);
                const double an = anchor(i, c) - negative1(i, c);
                grad_a(i, c) += 2.0 * (ap - an) * inv_b;
                grad_p(i, c) += -2.0 * ap * inv_b;
                grad_n1(i, c) += 2.0 * an * inv_b;
            }
        }
        if (h2 > 0.0) {
            total += h2;
            for (Eigen::Index c = 0; c < dim; ++c) {
                const double ap = anchor(i, c) - positive(i, c);
                const double nn = negative2(i, c) - negative1(i, c);
                grad_a(i, c) += 2.0 * ap * inv_b;
                grad_p(i, c) += -2.0 * ap * inv_b;
                grad_n1(i, c) += 2.0 * nn * inv_b;
                grad_n2(i, c) += -2.0 * nn * inv_b;
            }
        }
    }
    out.value = total * inv_b;
    return out;
}

LossOutput quadruplet_loss(const MatrixD& anchor, const MatrixD& positive, const MatrixD& negative1,
                           const MatrixD& negative2, const LossParams& params) {
    const QuadrupletMargins margins = quadruplet_margins(anchor, positive, negative1, params);
    return quadruplet_loss_fixed_margins(anchor, positive, negative1, negative2, margins);
}

LossOutput center_loss(const MiningBatch& batch, const ClassCenters& centers) {
    const auto b = batch.embeddings.rows();
    const auto dim = batch.embeddings.cols();
    if (centers.centers.cols() != dim)
        throw ValidationError("center_loss: center dim does not match embeddings");
    if (b == 0) throw ValidationError("center_loss: empty batch");

    LossOutput out;
    out.grad_embeddings = MatrixD::Zero(b, dim);
    out.grad_centers = MatrixD::Zero(centers.centers.rows(), dim);
    std::vector<std::int64_t> class_counts(static_cast<std::size_t>(centers.centers.rows()), 0);

    double total = 0.0;
    for (Eigen::Index j = 0; j < b; ++j) {
        const int y = batch.labels[static_cast<std::size_t>(j)];
        if (y < 0 || y >= centers.centers.rows())
            throw ValidationError("center_loss: unknown label " + std::to_string(y));
        ++class_counts[static_cast<std::size_t>(y)];
        for (Eigen::Index c = 0; c < dim; ++c) {
            const double diff = batch.embeddings(j, c) - centers.centers(y, c);
            total += 0.5 * diff * diff;
            out.grad_embeddings(j, c) = diff;
            (*out.grad_centers)(y, c) -= diff; // accumulated (c_y - f_j)
        }
    }
    for (Eigen::Index y = 0; y < centers.centers.rows(); ++y)
        if (class_counts[static_cast<std::size_t>(y)] > 0)
            out.grad_centers->row(y) /= static_cast<double>(class_counts[static_cast<std::size_t>(y)]);
    out.value = total;
    return out;
}

LossOutput label_smoothed_ce(const MatrixD& logits, const std::vector<int>& labels, double epsilon) {
    if (epsilon < 0.0 || epsilon >= 1.0)
        throw ValidationError("label_smoothed_ce: epsilon must lie in [0, 1)");
    if (logits.rows() != static_cast<Eigen::Index>(labels.size()))
        throw ValidationError("label_smoothed_ce: labels and logit rows differ");
    if (logits.rows() == 0) throw ValidationError("label_smoothed_ce: empty batch");
    require_finite(logits, "label_smoothed_ce");

    const auto b = logits.rows();
    const auto n_classes = logits.cols();
    const double inv_b = 1.0 / static_cast<double>(b);
    const double off_target = epsilon / static_cast<double>(n_classes);

    LossOutput out;
    out.grad_embeddings = MatrixD::Zero(b, n_classes);

    double total = 0.0;
    for (Eigen::Index i = 0; i < b; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= n_classes)
            throw ValidationError("label_smoothed_ce: label " + std::to_string(y) + " out of range");
        const double max_logit = logits.row(i).maxCoeff();
        double sum_exp = 0.0;
        for (Eigen::Index c = 0; c < n_classes; ++c) sum_exp += std::exp(logits(i, c) - max_logit);
        const double lse = max_logit + std::log(sum_exp);

        double dot = 0.0;
        for (Eigen::Index c = 0; c < n_classes; ++c) {
            const double target = off_target + (c == y ? 1.0 - epsilon : 0.0);
            dot += target * logits(i, c);
            const double softmax = std::exp(logits(i, c) - lse);
            out.grad_embeddings(i, c) = (softmax - target) * inv_b;
        }
        total += lse - dot;
    }
    out.value = total * inv_b;
    return out;
}

} // namespace retkit
