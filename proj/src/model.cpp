#include "cde/model.hpp"

#include "cde/errors.hpp"
#include "cde/optim.hpp"
#include "cde/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cde {

namespace {
constexpr std::uint64_t kSaltInit = 0x1417;
constexpr std::uint64_t kSaltShuffle = 0x5421;

Tensor fan_uniform(std::size_t rows, std::size_t cols, RngStream& rng) {
    Tensor t = Tensor::zeros({rows, cols});
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    for (auto& v : t.vec()) v = rng.uniform(-bound, bound);
    return t;
}
} // namespace

void EncoderConfig::validate(std::size_t patch_count) const {
    if (embedding_dim < 1) throw ConfigError("encoder: embedding_dim must be >= 1");
    if (featurizer == FeaturizerKind::RandomMap && feature_dim < 1) {
        throw ConfigError("encoder: feature_dim must be >= 1");
    }
    if (patchwise) {
        if (top_k < 1 || top_k > patch_count) {
            throw ConfigError("encoder: top_k must be in [1, patch count " +
                              std::to_string(patch_count) + "]");
        }
    }
}

void TrainHyper::validate() const {
    if (base_lr <= 0.0) throw ConfigError("train: base_lr must be > 0");
    if (featurizer_lr_scale <= 0.0) throw ConfigError("train: featurizer_lr_scale must be > 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    loss.validate();
}

CdeModel CdeModel::build(const EncoderConfig& cfg, std::size_t input_dim,
                         std::size_t patch_count, std::size_t num_actions, std::uint64_t seed) {
    cfg.validate(patch_count);
    if (input_dim < 1) throw ConfigError("model: input_dim must be >= 1");
    if (num_actions < 2) throw ConfigError("model: need >= 2 actions");
    if (cfg.patchwise && patch_count < 1) throw ConfigError("model: patch variant needs patches");

    CdeModel m;
    m.cfg_ = cfg;
    m.input_dim_ = input_dim;
    m.patch_count_ = cfg.patchwise ? patch_count : 1;
    m.num_actions_ = num_actions;
    m.norm_mean_ = Tensor::zeros({input_dim});
    m.norm_std_ = Tensor::full({input_dim}, 1.0);

    RngStream rng = RngStream::derive(seed, {kSaltInit});
    const std::size_t feat_out =
        cfg.featurizer == FeaturizerKind::RandomMap ? cfg.feature_dim : input_dim;
    const std::size_t h = cfg.hidden();
    const std::size_t l = cfg.embedding_dim;

    auto add = [&m](std::string name, Tensor t, bool featurizer) {
        m.params_.push_back({std::move(name), std::move(t), featurizer});
    };
    if (cfg.featurizer == FeaturizerKind::RandomMap) {
        add("featurizer.w", fan_uniform(feat_out, input_dim, rng), true);
        add("featurizer.b", Tensor::zeros({feat_out}), true);
    }
    add("projector.w1", fan_uniform(h, feat_out, rng), false);
    add("projector.b1", Tensor::zeros({h}), false);
    add("projector.w2", fan_uniform(h, h, rng), false);
    add("projector.b2", Tensor::zeros({h}), false);
    add("projector.w3", fan_uniform(l, h, rng), false);
    add("projector.b3", Tensor::zeros({l}), false);
    add("classifier.w1", fan_uniform(l, l, rng), false);
    add("classifier.b1", Tensor::zeros({l}), false);
    add("classifier.w2", fan_uniform(num_actions, l, rng), false);
    add("classifier.b2", Tensor::zeros({num_actions}), false);
    return m;
}

void CdeModel::set_normalizer(Tensor mean, Tensor std) {
    if (mean.size() != input_dim_ || std.size() != input_dim_) {
        throw ConfigError("normalizer dims do not match input_dim");
    }
    for (double s : std.vec()) {
        if (s <= 0.0) throw ConfigError("normalizer std entries must be positive");
    }
    norm_mean_ = std::move(mean);
    norm_std_ = std::move(std);
}

void CdeModel::fit_normalizer(const std::vector<InterventionPair>& pairs) {
    if (pairs.empty()) throw ConfigError("fit_normalizer: empty split");
    Tensor mean = Tensor::zeros({input_dim_});
    Tensor var = Tensor::zeros({input_dim_});
    std::size_t rows = 0;
    for (const auto& p : pairs) {
        check_pair_shape(p);
        for (const auto* obs : {&p.x, &p.x_post}) {
            for (std::size_t r = 0; r < p.rows; ++r) {
                for (std::size_t j = 0; j < input_dim_; ++j) {
                    mean.at(j) += static_cast<double>((*obs)[r * input_dim_ + j]);
                }
                ++rows;
            }
        }
    }
    for (auto& v : mean.vec()) v /= static_cast<double>(rows);
    for (const auto& p : pairs) {
        for (const auto* obs : {&p.x, &p.x_post}) {
            for (std::size_t r = 0; r < p.rows; ++r) {
                for (std::size_t j = 0; j < input_dim_; ++j) {
                    const double d = static_cast<double>((*obs)[r * input_dim_ + j]) - mean.at(j);
                    var.at(j) += d * d;
                }
            }
        }
    }
    Tensor stddev = Tensor::zeros({input_dim_});
    for (std::size_t j = 0; j < input_dim_; ++j) {
        stddev.at(j) = std::max(std::sqrt(var.at(j) / static_cast<double>(rows)), 1e-8);
    }
    set_normalizer(std::move(mean), std::move(stddev));
}

Tensor CdeModel::normalize(const Tensor& raw) const {
    if (raw.cols() != input_dim_) {
        throw NumericsError("model input has " + std::to_string(raw.cols()) +
                            " columns, expected " + std::to_string(input_dim_));
    }
    Tensor out = raw;
    const std::size_t R = out.rows(), C = out.cols();
    for (std::size_t i = 0; i < R; ++i) {
        for (std::size_t j = 0; j < C; ++j) {
            out.at(i, j) = (out.at(i, j) - norm_mean_.at(j)) / norm_std_.at(j);
        }
    }
    return out;
}

CdeModel::Bound CdeModel::bind(Graph& g, bool trainable) const {
    Bound b;
    b.g = &g;
    b.param_nodes.reserve(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const ParamSpec& p = params_[i];
        const bool train_this =
            trainable && (!p.featurizer || cfg_.featurizer_trainable);
        b.param_nodes.push_back(train_this ? g.param(p.value, p.name)
                                           : g.constant(p.value, p.name));
        if (train_this) b.trainable_indices.push_back(i);
    }
    return b;
}

namespace {
std::size_t param_index(const std::vector<CdeModel::ParamSpec>& params, const std::string& name) {
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].name == name) return i;
    throw NumericsError("unknown parameter '" + name + "'");
}
} // namespace

NodeId CdeModel::encode(Bound& b, const Tensor& raw_rows, const std::string& label) const {
    Graph& g = *b.g;
    NodeId x = g.constant(normalize(raw_rows), label);
    if (cfg_.featurizer == FeaturizerKind::RandomMap) {
        x = g.tanh(g.affine(x, b.param_nodes[param_index(params_, "featurizer.w")],
                            b.param_nodes[param_index(params_, "featurizer.b")]));
    }
    x = g.tanh(g.affine(x, b.param_nodes[param_index(params_, "projector.w1")],
                        b.param_nodes[param_index(params_, "projector.b1")]));
    x = g.tanh(g.affine(x, b.param_nodes[param_index(params_, "projector.w2")],
                        b.param_nodes[param_index(params_, "projector.b2")]));
    return g.affine(x, b.param_nodes[param_index(params_, "projector.w3")],
                    b.param_nodes[param_index(params_, "projector.b3")]);
}

NodeId CdeModel::classify(Bound& b, NodeId delta) const {
    Graph& g = *b.g;
    if (g.value(delta).cols() != cfg_.embedding_dim) {
        throw NumericsError("classify: delta width " + std::to_string(g.value(delta).cols()) +
                            " != embedding_dim " + std::to_string(cfg_.embedding_dim));
    }
    NodeId x = g.tanh(g.affine(delta, b.param_nodes[param_index(params_, "classifier.w1")],
                               b.param_nodes[param_index(params_, "classifier.b1")]));
    return g.affine(x, b.param_nodes[param_index(params_, "classifier.w2")],
                    b.param_nodes[param_index(params_, "classifier.b2")]);
}

NodeId CdeModel::delta(Graph& g, NodeId z, NodeId z_post) {
    return g.sub(z_post, z);
}

NodeId CdeModel::patch_deltas(Bound& b, const Tensor& raw_pre, const Tensor& raw_post) const {
    if (!raw_pre.same_shape(raw_post)) {
        throw NumericsError("patch_deltas: pre/post shapes differ: " + raw_pre.shape_str() +
                            " vs " + raw_post.shape_str());
    }
    const NodeId z = encode(b, raw_pre, "patches_pre");
    const NodeId z_post = encode(b, raw_post, "patches_post");
    return delta(*b.g, z, z_post);
}

std::vector<std::size_t> select_topk_rows(const Tensor& deltas, std::size_t k) {
    const std::size_t P = deltas.rows();
    if (k < 1 || k > P) {
        throw NumericsError("top-k: k=" + std::to_string(k) + " out of range [1," +
                            std::to_string(P) + "]");
    }
    std::vector<double> norms(P, 0.0);
    for (std::size_t p = 0; p < P; ++p) {
        double acc = 0.0;
        for (std::size_t j = 0; j < deltas.cols(); ++j) acc += deltas.at(p, j) * deltas.at(p, j);
        norms[p] = std::sqrt(acc);
    }
    std::vector<std::size_t> order(P);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) {
        if (norms[a] != norms[c]) return norms[a] > norms[c];
        return a < c; // tie: lowest patch index
    });
    order.resize(k);
    return order;
}

Tensor topk_aggregate(const Tensor& deltas, std::size_t k, std::vector<std::size_t>* selected) {
    const auto idx = select_topk_rows(deltas, k);
    Tensor out = Tensor::zeros({deltas.cols()});
    for (std::size_t p : idx) {
        for (std::size_t j = 0; j < deltas.cols(); ++j) out.at(j) += deltas.at(p, j);
    }
    for (auto& v : out.vec()) v /= static_cast<double>(k);
    if (selected) *selected = idx;
    return out;
}

NodeId CdeModel::aggregate_topk(Bound& b, NodeId patch_deltas, std::size_t batch, std::size_t k,
                                std::vector<std::size_t>* top1) const {
    Graph& g = *b.g;
    const Tensor& dv = g.value(patch_deltas);
    const std::size_t P = patch_count_;
    if (dv.rows() != batch * P) {
        throw NumericsError("aggregate_topk: got " + std::to_string(dv.rows()) +
                            " patch rows for batch " + std::to_string(batch) + " x " +
                            std::to_string(P) + " patches");
    }
    if (k < 1 || k > P) {
        throw NumericsError("aggregate_topk: k=" + std::to_string(k) + " out of range [1," +
                            std::to_string(P) + "]");
    }
    Tensor select = Tensor::zeros({batch, batch * P});
    Tensor bwd;
    if (cfg_.straight_through_patches) bwd = Tensor::zeros({batch, batch * P});
    if (top1) top1->assign(batch, 0);
    const double w = 1.0 / static_cast<double>(k);
    for (std::size_t i = 0; i < batch; ++i) {
        Tensor sample = Tensor::zeros({P, dv.cols()});
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t j = 0; j < dv.cols(); ++j)
                sample.at(p, j) = dv.at(i * P + p, j);
        const auto idx = select_topk_rows(sample, k);
        for (std::size_t p : idx) select.at(i, i * P + p) = w;
        if (top1) (*top1)[i] = idx.front();
        if (cfg_.straight_through_patches) {
            for (std::size_t p = 0; p < P; ++p)
                bwd.at(i, i * P + p) = 1.0 / static_cast<double>(P);
        }
    }
    return g.topk_select(select, patch_deltas, bwd);
}

void CdeModel::check_pair_shape(const InterventionPair& pair) const {
    const std::size_t expected_rows = cfg_.patchwise ? patch_count_ : 1;
    if (pair.rows != expected_rows || pair.cols != input_dim_) {
        throw NumericsError("pair shape [" + std::to_string(pair.rows) + "," +
                            std::to_string(pair.cols) + "] does not match " +
                            (cfg_.patchwise ? "patch" : "global") + " model expecting [" +
                            std::to_string(expected_rows) + "," + std::to_string(input_dim_) +
                            "]");
    }
    if (pair.x.size() != pair.x_post.size()) {
        throw NumericsError("pair pre/post observation sizes differ");
    }
}

Tensor CdeModel::batch_rows(const std::vector<const InterventionPair*>& batch, bool post) const {
    const std::size_t B = batch.size();
    const std::size_t rows_per = cfg_.patchwise ? patch_count_ : 1;
    Tensor out = Tensor::zeros({B * rows_per, input_dim_});
    for (std::size_t i = 0; i < B; ++i) {
        const auto& obs = post ? batch[i]->x_post : batch[i]->x;
        for (std::size_t r = 0; r < rows_per; ++r)
            for (std::size_t j = 0; j < input_dim_; ++j)
                out.at(i * rows_per + r, j) = static_cast<double>(obs[r * input_dim_ + j]);
    }
    return out;
}

CdeModel::TrainForward CdeModel::forward_training(
    Bound& b, const std::vector<const InterventionPair*>& batch) const {
    for (const auto* p : batch) check_pair_shape(*p);
    TrainForward out{};
    if (!cfg_.patchwise) {
        const NodeId z = encode(b, batch_rows(batch, false), "x");
        const NodeId z_post = encode(b, batch_rows(batch, true), "x_post");
        out.deltas = delta(*b.g, z, z_post);
    } else {
        const NodeId pd = patch_deltas(b, batch_rows(batch, false), batch_rows(batch, true));
        out.deltas = aggregate_topk(b, pd, batch.size(), cfg_.top_k);
    }
    out.logits = classify(b, out.deltas);
    return out;
}

BatchOutput CdeModel::forward_pairs(const std::vector<InterventionPair>& pairs) const {
    if (pairs.empty()) throw NumericsError("forward_pairs: empty pair list");
    std::vector<const InterventionPair*> ptrs;
    ptrs.reserve(pairs.size());
    for (const auto& p : pairs) {
        check_pair_shape(p);
        ptrs.push_back(&p);
    }

    Graph g;
    Bound b = bind(g, /*trainable=*/false);
    const std::size_t B = pairs.size();
    BatchOutput out;
    if (!cfg_.patchwise) {
        const NodeId z = encode(b, batch_rows(ptrs, false), "x");
        const NodeId z_post = encode(b, batch_rows(ptrs, true), "x_post");
        const NodeId d = delta(g, z, z_post);
        out.deltas = g.value(d);
        out.logits = g.value(classify(b, d));
        out.z_pre = g.value(z);
        out.z_post = g.value(z_post);
    } else {
        const NodeId z = encode(b, batch_rows(ptrs, false), "patches_pre");
        const NodeId z_post = encode(b, batch_rows(ptrs, true), "patches_post");
        const NodeId pd = delta(g, z, z_post);
        std::vector<std::size_t> top1;
        const NodeId agg = aggregate_topk(b, pd, B, cfg_.top_k, &top1);
        out.deltas = g.value(agg);
        out.logits = g.value(classify(b, agg));
        out.top1_patch = std::move(top1);
        // Per-sample encoding summary: mean over patch embeddings.
        const std::size_t l = cfg_.embedding_dim, P = patch_count_;
        out.z_pre = Tensor::zeros({B, l});
        out.z_post = Tensor::zeros({B, l});
        const Tensor& zv = g.value(z);
        const Tensor& zv_post = g.value(z_post);
        for (std::size_t i = 0; i < B; ++i) {
            for (std::size_t p = 0; p < P; ++p) {
                for (std::size_t j = 0; j < l; ++j) {
                    out.z_pre.at(i, j) += zv.at(i * P + p, j) / static_cast<double>(P);
                    out.z_post.at(i, j) += zv_post.at(i * P + p, j) / static_cast<double>(P);
                }
            }
        }
    }
    return out;
}

BatchOutput CdeModel::forward_pair(const InterventionPair& pair) const {
    return forward_pairs(std::vector<InterventionPair>{pair});
}

TrainResult train(CdeModel& model, const DatasetSplit& data, const TrainHyper& hyper) {
    hyper.validate();
    if (data.train.empty()) throw ConfigError("train: empty train split");
    model.fit_normalizer(data.train);

    // Two optimizer groups: head at base lr, featurizer (when trainable) at
    // the reduced rate.
    std::vector<std::size_t> head_idx, feat_idx;
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        if (model.params()[i].featurizer) {
            if (model.config().featurizer_trainable) feat_idx.push_back(i);
        } else {
            head_idx.push_back(i);
        }
    }
    auto gather = [&](const std::vector<std::size_t>& idx) {
        std::vector<Tensor> out;
        out.reserve(idx.size());
        for (std::size_t i : idx) out.push_back(model.params()[i].value);
        return out;
    };
    AdamWState head_state, feat_state;
    head_state.hyper.weight_decay = hyper.weight_decay;
    feat_state.hyper.weight_decay = hyper.weight_decay;

    TrainResult result;
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        const double lr = cosine_lr(epoch, hyper.epochs, hyper.base_lr);
        head_state.hyper.lr = lr;
        feat_state.hyper.lr = lr * hyper.featurizer_lr_scale;

        RngStream shuffle_rng = RngStream::derive(hyper.seed, {kSaltShuffle, epoch});
        std::shuffle(order.begin(), order.end(), shuffle_rng.engine());

        double loss_sum = 0.0, ce_sum = 0.0, con_sum = 0.0, sp_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
            const std::size_t end = std::min(order.size(), start + hyper.batch_size);
            std::vector<const InterventionPair*> batch;
            std::vector<int> labels;
            batch.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(&data.train[order[i]]);
                labels.push_back(static_cast<int>(data.train[order[i]].action));
            }
            try {
                Graph g;
                CdeModel::Bound bound = model.bind(g, /*trainable=*/true);
                const auto fwd = model.forward_training(bound, batch);
                LossConfig step_loss = hyper.loss;
                if (batch.size() < 2) step_loss.alpha_contrast = 0.0; // no anchors possible
                const TotalLoss losses = total_loss(g, fwd.logits, fwd.deltas, labels, step_loss);
                g.backward(losses.total);

                std::vector<Tensor> head_params = gather(head_idx), feat_params = gather(feat_idx);
                std::vector<Tensor> head_grads, feat_grads;
                for (std::size_t i : head_idx)
                    head_grads.push_back(g.grad(bound.param_nodes[i]));
                for (std::size_t i : feat_idx)
                    feat_grads.push_back(g.grad(bound.param_nodes[i]));
                adamw_step(head_params, head_grads, head_state);
                if (!feat_idx.empty()) adamw_step(feat_params, feat_grads, feat_state);
                for (std::size_t j = 0; j < head_idx.size(); ++j)
                    model.params()[head_idx[j]].value = std::move(head_params[j]);
                for (std::size_t j = 0; j < feat_idx.size(); ++j)
                    model.params()[feat_idx[j]].value = std::move(feat_params[j]);

                loss_sum += g.value(losses.total).item();
                ce_sum += g.value(losses.ce).item();
                if (losses.contrast) con_sum += g.value(*losses.contrast).item();
                if (losses.sparsity) sp_sum += g.value(*losses.sparsity).item();
                ++steps;
            } catch (const NumericsError& e) {
                throw TrainingError("training aborted at epoch " + std::to_string(epoch) +
                                    ", step " + std::to_string(steps) + ", batch [" +
                                    std::to_string(start) + "," + std::to_string(end) +
                                    "): " + e.what());
            }
        }
        const double denom = static_cast<double>(steps);
        result.epoch_mean_loss.push_back(loss_sum / denom);
        result.epoch_mean_ce.push_back(ce_sum / denom);
        result.epoch_mean_contrast.push_back(con_sum / denom);
        result.epoch_mean_sparsity.push_back(sp_sum / denom);
    }
    return result;
}

} // namespace cde
