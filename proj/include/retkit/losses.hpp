#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <vector>

#include "retkit/errors.hpp"

namespace retkit {

using MatrixD = Eigen::MatrixXd;

/// P x K training batch: P distinct labels, K instances each, one embedding
/// per row.
struct MiningBatch {
    MatrixD embeddings;      // B x dim
    std::vector<int> labels; // B entries

    std::int64_t size() const { return embeddings.rows(); }
    /// Checks the P*K composition (every label exactly K times, at least two
    /// distinct labels, B >= 2K) and returns K.
    int validate() const;
};

struct LossParams {
    double triplet_margin = 0.3; // alpha
    double quad_g1 = 1.0;        // first dynamic-margin factor
    double quad_g2 = 0.5;        // second dynamic-margin factor (g2 <= g1)
    double margin_clamp_lo = 0.05;
    double margin_clamp_hi = 2.0;
    double center_weight = 0.0005; // beta
    double label_smoothing = 0.1;  // epsilon

    void validate() const;
};

struct ClassCenters {
    MatrixD centers; // n_classes x dim
    double update_rate = 0.5;
};

/// Loss value plus exact gradients. grad_embeddings rows follow the stacked
/// input order documented on each operation. hinge_activations carries the
/// pre-hinge values so a finite-difference checker can exclude kink
/// coordinates.
struct LossOutput {
    double value = 0.0;
    MatrixD grad_embeddings;
    std::optional<MatrixD> grad_centers;
    std::vector<double> hinge_activations;
};

struct MinedIndices {
    std::vector<int> positive; // hardest positive per anchor
    std::vector<int> negative; // hardest negative per anchor
};

/// Online hard mining: per anchor a, positive = argmax over same-label rows
/// (!= a) of d(a,.), negative = argmin over different-label rows. Ties break
/// to the lowest row index. `squared` selects squared L2 (selection is
/// identical either way). Batches with K = 1 are rejected.
MinedIndices batch_hard_mine(const MiningBatch& batch, bool squared = true);

/// Deterministic quadruplet companion to batch_hard_mine: negative2 is the
/// nearest row whose label differs from both the anchor's and negative1's.
/// Requires at least three distinct labels.
struct QuadrupletIndices {
    std::vector<int> positive;
    std::vector<int> negative1;
    std::vector<int> negative2;
};
QuadrupletIndices mine_quadruplets(const MiningBatch& batch);

/// mean_i [ |A_i-P_i|^2 - |A_i-N_i|^2 + margin ]_+ over the triplet rows.
/// Subgradient at the hinge kink is 0. grad_embeddings stacks [dA; dP; dN].
LossOutput triplet_loss(const MatrixD& anchor, const MatrixD& positive, const MatrixD& negative,
                        double margin);

struct QuadrupletMargins {
    double alpha1 = 0.0;
    double alpha2 = 0.0;
};

/// Dynamic margins alpha_i = clamp(g_i * (muN - muP)) where muP / muN are the
/// batch means of |A-P|^2 / |A-N1|^2.
QuadrupletMargins quadruplet_margins(const MatrixD& anchor, const MatrixD& positive,
                                     const MatrixD& negative1, const LossParams& params);

/// mean_i [ |A-P|^2 - |A-N1|^2 + a1 ]_+ + [ |A-P|^2 - |N2-N1|^2 + a2 ]_+.
/// Margins are computed from the batch and then treated as constants in the
/// differentiation (detached batch statistics), so with the second hinge
/// inactive the loss reduces exactly to triplet_loss with margin alpha1.
/// grad_embeddings stacks [dA; dP; dN1; dN2]; hinge_activations interleaves
/// (h1_0, h2_0, h1_1, h2_1, ...).
LossOutput quadruplet_loss(const MatrixD& anchor, const MatrixD& positive, const MatrixD& negative1,
                           const MatrixD& negative2, const LossParams& params);
LossOutput quadruplet_loss_fixed_margins(const MatrixD& anchor, const MatrixD& positive,
                                         const MatrixD& negative1, const MatrixD& negative2,
                                         const QuadrupletMargins& margins);

/// (1/2) * sum_j |f_j - c_{y_j}|^2. grad_embeddings row j = f_j - c_{y_j}
/// (the exact gradient). grad_centers holds the standard averaged update
/// direction: per class, mean over its batch members of (c_y - f_j); classes
/// absent from the batch get zero rows.
LossOutput center_loss(const MiningBatch& batch, const ClassCenters& centers);

/// Cross-entropy against the smoothed target (1 - eps) * onehot + eps / C.
/// Value is the batch mean; grad_embeddings holds d/d logits =
/// (softmax - target) / B.
LossOutput label_smoothed_ce(const MatrixD& logits, const std::vector<int>& labels, double epsilon);

} // namespace retkit
