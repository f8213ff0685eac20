#pragma once

#include "cde/model.hpp"
#include "cde/scm.hpp"
#include "cde/tensor.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cde {

/// Row-per-sample delta collection with action labels.
struct DeltaSet {
    Tensor deltas; // [B, l]
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
};

/// Per-action mean delta over a (training) delta set. Actions with no
/// samples are flagged absent rather than given a row of zeros.
struct PrototypeTable {
    Tensor mu; // [A, l]
    std::vector<std::size_t> counts;
    std::vector<bool> present;

    std::size_t num_actions() const { return counts.size(); }
};

struct SimilarityMatrix {
    Tensor values; // [A, A]
    std::vector<bool> valid; // row-major [A*A]; false for zero-norm/absent rows

    bool entry_valid(std::size_t a, std::size_t b) const { return valid[a * values.cols() + b]; }
};

/// Fraction of pairs whose argmax logit matches the label; ties go to the
/// lowest action index.
double accuracy(const CdeModel& model, const std::vector<InterventionPair>& pairs);

double generalization_gap(double iid, double ood);

/// Plain (unguarded) cosine; callers handle zero norms explicitly.
double cosine(const Tensor& a, const Tensor& b);

DeltaSet collect_deltas(const CdeModel& model, const std::vector<InterventionPair>& pairs);

/// Ground-truth latent deltas restricted to the intervened object's property
/// block: the object-invariant oracle the learned deltas are measured against.
DeltaSet oracle_deltas(const std::vector<InterventionPair>& pairs, const WorldConfig& config);

PrototypeTable compute_prototypes(const DeltaSet& train_deltas, std::size_t num_actions);

SimilarityMatrix prototype_similarity_matrix(const PrototypeTable& table);

/// Mean over pairs of cos(z + mu_a, z_post). Throws if any action in the
/// split lacks a prototype, listing the offenders.
double transfer_similarity(const CdeModel& model, const std::vector<InterventionPair>& pairs,
                           const PrototypeTable& table);

struct KnnResult {
    std::vector<int> predicted;
    double accuracy = 0.0;
};

/// Euclidean k-NN with majority vote. Distance ties resolve to the smallest
/// training index, vote ties to the smallest action index.
KnnResult knn_classify(const DeltaSet& train, const Tensor& queries,
                       const std::vector<int>& query_labels, std::size_t k);

/// Per action: mean over coordinates of the unbiased per-coordinate sample
/// variance. Actions with fewer than 2 samples are reported absent.
std::vector<std::optional<double>> delta_variance(const DeltaSet& deltas,
                                                  std::size_t num_actions);

/// Everything the report files carry for one trained model.
struct MetricsReport {
    double iid_accuracy = 0.0;
    double ood_comp_accuracy = 0.0;
    double ood_syst_accuracy = 0.0;
    double gap_comp = 0.0;
    double gap_syst = 0.0;
    std::map<std::string, double> knn_accuracy;        // per split
    std::map<std::string, double> transfer_similarity; // per split
    std::vector<std::optional<double>> variance_iid;   // per action, IID test deltas
    SimilarityMatrix prototype_similarity;             // train-split prototypes
    std::vector<std::size_t> prototype_counts;
    std::optional<double> top1_patch_locality;         // patch models only
};

struct EvalOptions {
    std::size_t knn_k = 5;
};

/// Runs the full metric battery for a trained model against all four splits.
/// Patch locality uses the manifest's patch layout.
MetricsReport evaluate(const CdeModel& model, const DatasetSplit& data,
                       const EvalOptions& opts = {});

} // namespace cde
