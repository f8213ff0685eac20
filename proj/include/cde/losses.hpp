#pragma once

#include "cde/autodiff.hpp"

#include <optional>
#include <vector>

namespace cde {

struct LossConfig {
    double alpha_contrast = 2.0;
    double alpha_sparsity = 1.0;
    double temperature = 0.07;

    void validate() const;
};

/// Mean over the batch of -log softmax probability of the true class.
/// logits: [B, A]; labels: B ids in [0, A).
NodeId ce_loss(Graph& g, NodeId logits, const std::vector<int>& labels);

/// Supervised contrastive loss over a batch of deltas [B, l], summed over
/// anchors. Positives share the anchor's label; anchors without positives
/// contribute exactly zero. Similarity is eps-guarded cosine. Requires B >= 2.
NodeId supcon_loss(Graph& g, NodeId deltas, const std::vector<int>& labels, double tau);

/// (1/B) * sum_i ||delta_i||_1.
NodeId l1_loss(Graph& g, NodeId deltas);

struct TotalLoss {
    NodeId total;
    NodeId ce;
    std::optional<NodeId> contrast; // absent when its weight is 0
    std::optional<NodeId> sparsity;
};

/// L_CE + alpha_contrast * L_contrast + alpha_sparsity * L_sparsity.
/// Zero-weight components are not built at all, so a config with both alphas
/// zero produces a graph identical to plain cross-entropy training.
TotalLoss total_loss(Graph& g, NodeId logits, NodeId deltas, const std::vector<int>& labels,
                     const LossConfig& cfg);

} // namespace cde
