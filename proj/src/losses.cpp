#include "cde/losses.hpp"

#include "cde/errors.hpp"

namespace cde {

void LossConfig::validate() const {
    if (alpha_contrast < 0.0 || alpha_sparsity < 0.0) {
        throw ConfigError("loss: alpha weights must be >= 0");
    }
    if (temperature <= 0.0) throw ConfigError("loss: temperature must be > 0");
}

NodeId ce_loss(Graph& g, NodeId logits, const std::vector<int>& labels) {
    const Tensor& lv = g.value(logits);
    if (lv.rank() != 2 || lv.rows() != labels.size()) {
        throw NumericsError("ce_loss: logits " + lv.shape_str() + " vs " +
                            std::to_string(labels.size()) + " labels");
    }
    const std::size_t B = lv.rows(), A = lv.cols();
    Tensor pick = Tensor::zeros({B, A});
    for (std::size_t i = 0; i < B; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= A) {
            throw NumericsError("ce_loss: label " + std::to_string(labels[i]) +
                                " out of range for " + std::to_string(A) + " classes");
        }
        pick.at(i, static_cast<std::size_t>(labels[i])) = -1.0 / static_cast<double>(B);
    }
    const NodeId logp = g.log_softmax_rows(logits);
    return g.sum_all(g.mul(logp, g.constant(std::move(pick), "ce_pick")));
}

NodeId supcon_loss(Graph& g, NodeId deltas, const std::vector<int>& labels, double tau) {
    const Tensor& dv = g.value(deltas);
    if (dv.rank() != 2 || dv.rows() != labels.size()) {
        throw NumericsError("supcon_loss: deltas " + dv.shape_str() + " vs " +
                            std::to_string(labels.size()) + " labels");
    }
    const std::size_t B = dv.rows();
    if (B < 2) throw NumericsError("supcon_loss: batch size must be >= 2");
    if (tau <= 0.0) throw NumericsError("supcon_loss: temperature must be > 0");

    const NodeId unit = g.row_normalize(deltas);
    const NodeId sim = g.scale(g.matmul_nt(unit, unit), 1.0 / tau);
    const NodeId logp = g.log_softmax_rows_excl_diag(sim);

    // -1/|P(i)| at positive positions; rows without positives stay zero.
    Tensor weights = Tensor::zeros({B, B});
    for (std::size_t i = 0; i < B; ++i) {
        std::size_t positives = 0;
        for (std::size_t j = 0; j < B; ++j)
            if (j != i && labels[j] == labels[i]) ++positives;
        if (positives == 0) continue;
        const double w = -1.0 / static_cast<double>(positives);
        for (std::size_t j = 0; j < B; ++j)
            if (j != i && labels[j] == labels[i]) weights.at(i, j) = w;
    }
    return g.sum_all(g.mul(logp, g.constant(std::move(weights), "supcon_weights")));
}

NodeId l1_loss(Graph& g, NodeId deltas) {
    const Tensor& dv = g.value(deltas);
    if (dv.rows() < 1) throw NumericsError("l1_loss: empty batch");
    return g.scale(g.l1_norm(deltas), 1.0 / static_cast<double>(dv.rows()));
}

TotalLoss total_loss(Graph& g, NodeId logits, NodeId deltas, const std::vector<int>& labels,
                     const LossConfig& cfg) {
    cfg.validate();
    if (g.value(logits).rows() != g.value(deltas).rows()) {
        throw NumericsError("total_loss: logits and deltas batch sizes differ");
    }
    TotalLoss out{0, 0, std::nullopt, std::nullopt};
    out.ce = ce_loss(g, logits, labels);
    out.total = out.ce;
    if (cfg.alpha_contrast > 0.0) {
        out.contrast = supcon_loss(g, deltas, labels, cfg.temperature);
        out.total = g.add(out.total, g.scale(*out.contrast, cfg.alpha_contrast));
    }
    if (cfg.alpha_sparsity > 0.0) {
        out.sparsity = l1_loss(g, deltas);
        out.total = g.add(out.total, g.scale(*out.sparsity, cfg.alpha_sparsity));
    }
    return out;
}

} // namespace cde
