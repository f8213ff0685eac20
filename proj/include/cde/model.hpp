#pragma once

#include "cde/autodiff.hpp"
#include "cde/losses.hpp"
#include "cde/scm.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace cde {

enum class FeaturizerKind { Identity, RandomMap };

struct EncoderConfig {
    FeaturizerKind featurizer = FeaturizerKind::RandomMap;
    std::size_t feature_dim = 64;      // RandomMap output width
    std::size_t embedding_dim = 256;   // l
    std::size_t projector_hidden = 0;  // 0 = 4 * embedding_dim
    bool patchwise = false;
    std::size_t top_k = 4;
    bool featurizer_trainable = false; // fine-tune at featurizer_lr_scale
    bool straight_through_patches = false;

    std::size_t hidden() const { return projector_hidden ? projector_hidden : 4 * embedding_dim; }
    void validate(std::size_t patch_count) const;
};

struct TrainHyper {
    double base_lr = 1e-4;
    double featurizer_lr_scale = 0.10;
    std::size_t batch_size = 128;
    std::size_t epochs = 50;
    double weight_decay = 0.05;
    LossConfig loss;
    std::uint64_t seed = 1;

    void validate() const;
};

struct TrainResult {
    std::vector<double> epoch_mean_loss;
    std::vector<double> epoch_mean_ce;
    std::vector<double> epoch_mean_contrast;
    std::vector<double> epoch_mean_sparsity;
};

/// Value-level forward over a list of pairs.
struct BatchOutput {
    Tensor deltas;                       // [B, l]
    Tensor logits;                       // [B, A]
    Tensor z_pre, z_post;                // [B, l] encodings (patch models: mean over patches)
    std::vector<std::size_t> top1_patch; // patch models: argmax-norm patch per sample
};

/// Featurizer + causal projector + action classifier. Parameters live in a
/// flat declaration-order list (the checkpoint order); every forward pass
/// binds them into a fresh graph.
class CdeModel {
public:
    struct ParamSpec {
        std::string name;
        Tensor value;
        bool featurizer = false; // optimizer group with scaled lr
    };

    CdeModel() = default;
    static CdeModel build(const EncoderConfig& cfg, std::size_t input_dim,
                          std::size_t patch_count, std::size_t num_actions, std::uint64_t seed);

    const EncoderConfig& config() const { return cfg_; }
    std::size_t input_dim() const { return input_dim_; }
    std::size_t patch_count() const { return patch_count_; }
    std::size_t num_actions() const { return num_actions_; }
    std::size_t embedding_dim() const { return cfg_.embedding_dim; }

    std::vector<ParamSpec>& params() { return params_; }
    const std::vector<ParamSpec>& params() const { return params_; }

    const Tensor& norm_mean() const { return norm_mean_; }
    const Tensor& norm_std() const { return norm_std_; }
    void set_normalizer(Tensor mean, Tensor std);
    /// Per-input-dimension zero-mean/unit-variance stats over the pre and
    /// post observations of `pairs`.
    void fit_normalizer(const std::vector<InterventionPair>& pairs);

    /// One pass binding: parameter node ids in declaration order. When
    /// `trainable` is false everything is bound as constants.
    struct Bound {
        Graph* g = nullptr;
        std::vector<NodeId> param_nodes;
        std::vector<std::size_t> trainable_indices; // into params()
    };
    Bound bind(Graph& g, bool trainable) const;

    /// (x - mean)/std applied host-side before the graph input.
    Tensor normalize(const Tensor& raw) const;

    /// Raw observation rows [B, d] -> embeddings [B, l].
    NodeId encode(Bound& b, const Tensor& raw_rows, const std::string& label) const;
    NodeId classify(Bound& b, NodeId delta) const;

    /// Elementwise z_post - z (the delta embedding).
    static NodeId delta(Graph& g, NodeId z, NodeId z_post);

    /// Shared-projector per-patch deltas for a batch: raw patch rows
    /// [B*P, d] for pre and post -> [B*P, l].
    NodeId patch_deltas(Bound& b, const Tensor& raw_pre, const Tensor& raw_post) const;

    /// Top-k mean aggregation of per-patch deltas [B*P, l] -> [B, l].
    /// Selection is by L2 norm, ties to the lowest patch index; gradients
    /// flow only through selected patches unless straight_through_patches.
    NodeId aggregate_topk(Bound& b, NodeId patch_deltas, std::size_t batch, std::size_t k,
                          std::vector<std::size_t>* top1 = nullptr) const;

    /// Full pass over pairs (no gradients). Pairs must match the model variant.
    BatchOutput forward_pairs(const std::vector<InterventionPair>& pairs) const;
    /// Single-pair convenience.
    BatchOutput forward_pair(const InterventionPair& pair) const;

    /// Training-mode pass producing deltas and logits for a batch of pairs.
    struct TrainForward {
        NodeId deltas;
        NodeId logits;
    };
    TrainForward forward_training(Bound& b, const std::vector<const InterventionPair*>& batch) const;

private:
    Tensor batch_rows(const std::vector<const InterventionPair*>& batch, bool post) const;
    void check_pair_shape(const InterventionPair& pair) const;

    EncoderConfig cfg_;
    std::size_t input_dim_ = 0;
    std::size_t patch_count_ = 1;
    std::size_t num_actions_ = 0;
    std::vector<ParamSpec> params_;
    Tensor norm_mean_, norm_std_;

    friend CdeModel checkpoint_assemble(EncoderConfig, std::size_t, std::size_t, std::size_t,
                                        std::vector<ParamSpec>, Tensor, Tensor);
};

/// Norm-descending, index-ascending top-k selection over rows of [P, l].
std::vector<std::size_t> select_topk_rows(const Tensor& deltas, std::size_t k);

/// Standalone top-k mean over per-patch delta rows [P, l]; `selected`
/// receives the chosen patch indices in selection order.
Tensor topk_aggregate(const Tensor& deltas, std::size_t k,
                      std::vector<std::size_t>* selected = nullptr);

/// Minibatch training with AdamW and per-epoch cosine annealing. The
/// featurizer group (when trainable) runs at featurizer_lr_scale * lr.
TrainResult train(CdeModel& model, const DatasetSplit& data, const TrainHyper& hyper);

} // namespace cde
