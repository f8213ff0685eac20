#include "cde/evalsuite.hpp"

#include "cde/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace cde {

namespace {

std::size_t argmax_row(const Tensor& t, std::size_t row) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < t.cols(); ++j) {
        if (t.at(row, j) > t.at(row, best)) best = j; // tie keeps the lowest index
    }
    return best;
}

double accuracy_from(const Tensor& logits, const std::vector<int>& labels) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (argmax_row(logits, i) == static_cast<std::size_t>(labels[i])) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<int> labels_of(const std::vector<InterventionPair>& pairs) {
    std::vector<int> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back(static_cast<int>(p.action));
    return out;
}

} // namespace

double accuracy(const CdeModel& model, const std::vector<InterventionPair>& pairs) {
    if (pairs.empty()) throw ConfigError("accuracy: empty split");
    const BatchOutput out = model.forward_pairs(pairs);
    return accuracy_from(out.logits, labels_of(pairs));
}

double generalization_gap(double iid, double ood) { return iid - ood; }

double cosine(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw NumericsError("cosine: size mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a.at(i) * b.at(i);
        na += a.at(i) * a.at(i);
        nb += b.at(i) * b.at(i);
    }
    if (na == 0.0 || nb == 0.0) throw NumericsError("cosine: zero-norm input");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

DeltaSet collect_deltas(const CdeModel& model, const std::vector<InterventionPair>& pairs) {
    if (pairs.empty()) throw ConfigError("collect_deltas: empty split");
    DeltaSet ds;
    const BatchOutput out = model.forward_pairs(pairs);
    ds.deltas = out.deltas;
    ds.labels = labels_of(pairs);
    return ds;
}

DeltaSet oracle_deltas(const std::vector<InterventionPair>& pairs, const WorldConfig& config) {
    DeltaSet ds;
    const std::size_t K = config.props_per_object, S = config.scene_dims;
    ds.deltas = Tensor::zeros({pairs.size(), K});
    ds.labels.reserve(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        if (!p.oracle) throw ConfigError("oracle_deltas: pair " + std::to_string(i) +
                                         " carries no oracle latents");
        const std::size_t off = S + p.object * K;
        for (std::size_t k = 0; k < K; ++k) {
            ds.deltas.at(i, k) = p.oracle->post[off + k] - p.oracle->pre[off + k];
        }
        ds.labels.push_back(static_cast<int>(p.action));
    }
    return ds;
}

PrototypeTable compute_prototypes(const DeltaSet& train_deltas, std::size_t num_actions) {
    if (train_deltas.size() == 0) throw ConfigError("compute_prototypes: empty delta set");
    PrototypeTable table;
    const std::size_t l = train_deltas.deltas.cols();
    table.mu = Tensor::zeros({num_actions, l});
    table.counts.assign(num_actions, 0);
    table.present.assign(num_actions, false);
    for (std::size_t i = 0; i < train_deltas.size(); ++i) {
        const std::size_t a = static_cast<std::size_t>(train_deltas.labels[i]);
        if (a >= num_actions) throw NumericsError("compute_prototypes: label out of range");
        ++table.counts[a];
        for (std::size_t j = 0; j < l; ++j) table.mu.at(a, j) += train_deltas.deltas.at(i, j);
    }
    for (std::size_t a = 0; a < num_actions; ++a) {
        if (table.counts[a] == 0) continue;
        table.present[a] = true;
        for (std::size_t j = 0; j < l; ++j)
            table.mu.at(a, j) /= static_cast<double>(table.counts[a]);
    }
    return table;
}

SimilarityMatrix prototype_similarity_matrix(const PrototypeTable& table) {
    const std::size_t A = table.num_actions();
    if (A == 0) throw ConfigError("prototype_similarity_matrix: empty table");
    SimilarityMatrix sm;
    sm.values = Tensor::zeros({A, A});
    sm.valid.assign(A * A, false);
    std::vector<double> norms(A, 0.0);
    for (std::size_t a = 0; a < A; ++a) {
        double acc = 0.0;
        for (std::size_t j = 0; j < table.mu.cols(); ++j)
            acc += table.mu.at(a, j) * table.mu.at(a, j);
        norms[a] = std::sqrt(acc);
    }
    for (std::size_t a = 0; a < A; ++a) {
        for (std::size_t b = 0; b < A; ++b) {
            if (!table.present[a] || !table.present[b] || norms[a] == 0.0 || norms[b] == 0.0) {
                continue; // undefined entry, reported missing
            }
            double dot = 0.0;
            for (std::size_t j = 0; j < table.mu.cols(); ++j)
                dot += table.mu.at(a, j) * table.mu.at(b, j);
            sm.values.at(a, b) = dot / (norms[a] * norms[b]);
            sm.valid[a * A + b] = true;
        }
    }
    return sm;
}

double transfer_similarity(const CdeModel& model, const std::vector<InterventionPair>& pairs,
                           const PrototypeTable& table) {
    if (pairs.empty()) throw ConfigError("transfer_similarity: empty split");
    std::vector<std::size_t> missing;
    for (const auto& p : pairs) {
        if (p.action >= table.num_actions() || !table.present[p.action]) {
            if (std::find(missing.begin(), missing.end(), p.action) == missing.end())
                missing.push_back(p.action);
        }
    }
    if (!missing.empty()) {
        std::ostringstream os;
        os << "transfer_similarity: no prototype for action(s)";
        for (std::size_t a : missing) os << ' ' << a;
        throw ConfigError(os.str());
    }
    const BatchOutput out = model.forward_pairs(pairs);
    const std::size_t l = out.z_pre.cols();
    constexpr double eps = 1e-12;
    double acc = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        double dot = 0.0, nu = 0.0, nv = 0.0;
        for (std::size_t j = 0; j < l; ++j) {
            const double u = out.z_pre.at(i, j) + table.mu.at(pairs[i].action, j);
            const double v = out.z_post.at(i, j);
            dot += u * v;
            nu += u * u;
            nv += v * v;
        }
        acc += dot / ((std::sqrt(nu) + eps) * (std::sqrt(nv) + eps));
    }
    return acc / static_cast<double>(pairs.size());
}

KnnResult knn_classify(const DeltaSet& train, const Tensor& queries,
                       const std::vector<int>& query_labels, std::size_t k) {
    if (train.size() == 0) throw ConfigError("knn_classify: empty training set");
    if (k < 1 || k > train.size()) {
        throw ConfigError("knn_classify: k=" + std::to_string(k) + " out of range [1," +
                          std::to_string(train.size()) + "]");
    }
    const std::size_t l = train.deltas.cols();
    if (queries.cols() != l) throw NumericsError("knn_classify: query width mismatch");

    KnnResult result;
    result.predicted.reserve(queries.rows());
    int max_label = 0;
    for (int lab : train.labels) max_label = std::max(max_label, lab);

    std::vector<std::size_t> order(train.size());
    std::vector<double> dist(train.size());
    for (std::size_t q = 0; q < queries.rows(); ++q) {
        for (std::size_t t = 0; t < train.size(); ++t) {
            double acc = 0.0;
            for (std::size_t j = 0; j < l; ++j) {
                const double d = queries.at(q, j) - train.deltas.at(t, j);
                acc += d * d;
            }
            dist[t] = acc;
        }
        std::iota(order.begin(), order.end(), 0);
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                          order.end(), [&](std::size_t a, std::size_t b) {
                              if (dist[a] != dist[b]) return dist[a] < dist[b];
                              return a < b; // distance tie: smallest training index
                          });
        std::vector<std::size_t> votes(static_cast<std::size_t>(max_label) + 1, 0);
        for (std::size_t i = 0; i < k; ++i) ++votes[static_cast<std::size_t>(train.labels[order[i]])];
        std::size_t winner = 0;
        for (std::size_t a = 1; a < votes.size(); ++a) {
            if (votes[a] > votes[winner]) winner = a; // vote tie: smallest action index
        }
        result.predicted.push_back(static_cast<int>(winner));
    }
    if (!query_labels.empty()) {
        if (query_labels.size() != result.predicted.size())
            throw NumericsError("knn_classify: label count mismatch");
        std::size_t hits = 0;
        for (std::size_t i = 0; i < query_labels.size(); ++i)
            if (result.predicted[i] == query_labels[i]) ++hits;
        result.accuracy = static_cast<double>(hits) / static_cast<double>(query_labels.size());
    }
    return result;
}

std::vector<std::optional<double>> delta_variance(const DeltaSet& deltas,
                                                  std::size_t num_actions) {
    const std::size_t l = deltas.deltas.cols();
    std::vector<std::optional<double>> out(num_actions);
    for (std::size_t a = 0; a < num_actions; ++a) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < deltas.size(); ++i) {
            if (deltas.labels[i] == static_cast<int>(a)) rows.push_back(i);
        }
        if (rows.size() < 2) continue; // flagged, not reported
        const double n = static_cast<double>(rows.size());
        double var_sum = 0.0;
        for (std::size_t j = 0; j < l; ++j) {
            double mean = 0.0;
            for (std::size_t i : rows) mean += deltas.deltas.at(i, j);
            mean /= n;
            double ss = 0.0;
            for (std::size_t i : rows) {
                const double d = deltas.deltas.at(i, j) - mean;
                ss += d * d;
            }
            var_sum += ss / (n - 1.0);
        }
        out[a] = var_sum / static_cast<double>(l);
    }
    return out;
}

MetricsReport evaluate(const CdeModel& model, const DatasetSplit& data, const EvalOptions& opts) {
    MetricsReport report;
    const std::size_t A = model.num_actions();

    const DeltaSet train_deltas = collect_deltas(model, data.train);
    const PrototypeTable prototypes = compute_prototypes(train_deltas, A);
    report.prototype_similarity = prototype_similarity_matrix(prototypes);
    report.prototype_counts = prototypes.counts;

    struct SplitEval {
        const char* name;
        const std::vector<InterventionPair>* pairs;
        double* accuracy_slot;
    };
    const SplitEval splits[] = {
        {"iid_test", &data.iid_test, &report.iid_accuracy},
        {"ood_compositional", &data.ood_compositional, &report.ood_comp_accuracy},
        {"ood_systematic", &data.ood_systematic, &report.ood_syst_accuracy},
    };

    std::size_t locality_hits = 0, locality_total = 0;
    for (const auto& se : splits) {
        const BatchOutput out = model.forward_pairs(*se.pairs);
        const std::vector<int> labels = labels_of(*se.pairs);
        *se.accuracy_slot = accuracy_from(out.logits, labels);

        const KnnResult knn = knn_classify(train_deltas, out.deltas, labels, opts.knn_k);
        report.knn_accuracy[se.name] = knn.accuracy;
        report.transfer_similarity[se.name] =
            transfer_similarity(model, *se.pairs, prototypes);

        if (se.name == std::string("iid_test")) {
            DeltaSet iid{out.deltas, labels};
            report.variance_iid = delta_variance(iid, A);
        }
        if (model.config().patchwise && !data.manifest.patch_of_object_begin.empty()) {
            for (std::size_t i = 0; i < se.pairs->size(); ++i) {
                const std::size_t obj = (*se.pairs)[i].object;
                const std::size_t p = out.top1_patch[i];
                if (p >= data.manifest.patch_of_object_begin[obj] &&
                    p < data.manifest.patch_of_object_end[obj]) {
                    ++locality_hits;
                }
                ++locality_total;
            }
        }
    }
    report.gap_comp = generalization_gap(report.iid_accuracy, report.ood_comp_accuracy);
    report.gap_syst = generalization_gap(report.iid_accuracy, report.ood_syst_accuracy);
    if (locality_total > 0) {
        report.top1_patch_locality =
            static_cast<double>(locality_hits) / static_cast<double>(locality_total);
    }
    return report;
}

} // namespace cde
