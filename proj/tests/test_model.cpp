#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cde/errors.hpp"
#include "cde/model.hpp"
#include "cde/optim.hpp"
#include "cde/scm.hpp"
#include "test_support.hpp"

#include <cmath>

using namespace cde;
using namespace cde::testing;

namespace {

EncoderConfig tiny_encoder(std::size_t l = 6, bool patch = false, std::size_t k = 1) {
    EncoderConfig cfg;
    cfg.featurizer = FeaturizerKind::Identity;
    cfg.embedding_dim = l;
    cfg.projector_hidden = 8;
    cfg.patchwise = patch;
    cfg.top_k = k;
    return cfg;
}

InterventionPair make_pair_raw(std::size_t rows, std::size_t cols, std::uint32_t action,
                               std::uint32_t object, RngStream& rng) {
    InterventionPair p;
    p.rows = static_cast<std::uint32_t>(rows);
    p.cols = static_cast<std::uint32_t>(cols);
    p.action = action;
    p.object = object;
    for (std::size_t i = 0; i < rows * cols; ++i) {
        p.x.push_back(static_cast<float>(rng.uniform(-1, 1)));
        p.x_post.push_back(static_cast<float>(rng.uniform(-1, 1)));
    }
    return p;
}

// Independent reimplementation of the identity-featurizer encoder path:
// three affine layers with tanh on the hidden ones.
Tensor encode_by_hand(const CdeModel& m, const Tensor& x_row) {
    auto find = [&](const std::string& name) -> const Tensor& {
        for (const auto& p : m.params())
            if (p.name == name) return p.value;
        throw std::runtime_error("missing " + name);
    };
    auto affine_tanh = [](const Tensor& x, const Tensor& w, const Tensor& b, bool squash) {
        Tensor out = Tensor::zeros({w.rows()});
        for (std::size_t i = 0; i < w.rows(); ++i) {
            double acc = b.at(i);
            for (std::size_t j = 0; j < w.cols(); ++j) acc += w.at(i, j) * x.at(j);
            out.at(i) = squash ? std::tanh(acc) : acc;
        }
        return out;
    };
    Tensor h = affine_tanh(x_row, find("projector.w1"), find("projector.b1"), true);
    h = affine_tanh(h, find("projector.w2"), find("projector.b2"), true);
    return affine_tanh(h, find("projector.w3"), find("projector.b3"), false);
}

DatasetSplit toy_dataset(std::size_t pairs, std::uint64_t seed) {
    WorldConfig cfg;
    cfg.scene_dims = 1;
    cfg.num_objects = 3;
    cfg.props_per_object = 3;
    cfg.actions = "open:close,fill:empty";
    cfg.observation_dim = 16;
    cfg.pairs_per_split = pairs;
    cfg.holdout_objects = 1;
    cfg.comp_holdout_per_object = 1;
    cfg.confounding = 0.5;
    cfg.seed = seed;
    World world(cfg);
    return world.make_splits();
}

} // namespace

TEST_CASE("encode: identity featurizer is a pure projector pass") {
    RngStream rng(2);
    CdeModel m = CdeModel::build(tiny_encoder(5), 7, 1, 3, 99);
    const Tensor x = random_tensor({2, 7}, rng);

    Graph g;
    CdeModel::Bound b = m.bind(g, false);
    const NodeId z = m.encode(b, x, "x");
    CHECK(g.value(z).rows() == 2);
    CHECK(g.value(z).cols() == 5);
    for (std::size_t row = 0; row < 2; ++row) {
        Tensor xr = Tensor::zeros({7});
        for (std::size_t j = 0; j < 7; ++j) xr.at(j) = x.at(row, j);
        const Tensor byhand = encode_by_hand(m, xr);
        for (std::size_t j = 0; j < 5; ++j) CHECK(g.value(z).at(row, j) == byhand.at(j));
    }

    SUBCASE("same input twice encodes identically") {
        Graph g2;
        CdeModel::Bound b2 = m.bind(g2, false);
        const NodeId z2 = m.encode(b2, x, "x");
        for (std::size_t i = 0; i < g.value(z).size(); ++i)
            CHECK(g.value(z).at(i) == g2.value(z2).at(i));
    }
    SUBCASE("single-coordinate input shift moves the embedding") {
        Tensor shifted = x;
        shifted.at(0, 3) += 1.0;
        Graph g2;
        CdeModel::Bound b2 = m.bind(g2, false);
        const NodeId z2 = m.encode(b2, shifted, "x");
        double diff = 0.0;
        for (std::size_t j = 0; j < 5; ++j)
            diff += std::fabs(g2.value(z2).at(0, j) - g.value(z).at(0, j));
        CHECK(diff > 0.0);
    }
    SUBCASE("dimension mismatch errors") {
        Graph g2;
        CdeModel::Bound b2 = m.bind(g2, false);
        CHECK_THROWS_AS(m.encode(b2, random_tensor({2, 9}, rng), "x"), NumericsError);
    }
}

TEST_CASE("delta: zero at equal encodings, elementwise, antisymmetric") {
    Graph g;
    const NodeId a = g.leaf(Tensor::from({1, 2}, {1, 2}), false);
    const NodeId b = g.leaf(Tensor::from({1, 2}, {3, 2}), false);
    const NodeId d = CdeModel::delta(g, a, b);
    CHECK(g.value(d).at(0, 0) == 2.0);
    CHECK(g.value(d).at(0, 1) == 0.0);

    const NodeId dz = CdeModel::delta(g, a, a);
    for (std::size_t i = 0; i < 2; ++i) CHECK(g.value(dz).at(i) == 0.0);

    RngStream rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        Graph g2;
        const Tensor za = random_tensor({3, 4}, rng);
        const Tensor zb = random_tensor({3, 4}, rng);
        const NodeId fwd = CdeModel::delta(g2, g2.leaf(za, false), g2.leaf(zb, false));
        const NodeId rev = CdeModel::delta(g2, g2.leaf(zb, false), g2.leaf(za, false));
        for (std::size_t i = 0; i < 12; ++i)
            CHECK(g2.value(fwd).at(i) == -g2.value(rev).at(i));
    }
}

TEST_CASE("patch deltas: zero rows for untouched patches, count preserved") {
    RngStream rng(5);
    const std::size_t P = 4, d = 6;
    CdeModel m = CdeModel::build(tiny_encoder(5, true, 1), d, P, 3, 7);
    const Tensor pre = random_tensor({P, d}, rng);
    Tensor post = pre;
    for (std::size_t j = 0; j < d; ++j) post.at(3, j) += rng.uniform(0.5, 1.0);

    Graph g;
    CdeModel::Bound b = m.bind(g, false);
    const NodeId pd = m.patch_deltas(b, pre, post);
    CHECK(g.value(pd).rows() == P);
    for (std::size_t p = 0; p < P; ++p) {
        double norm = 0.0;
        for (std::size_t j = 0; j < 5; ++j) norm += std::fabs(g.value(pd).at(p, j));
        if (p == 3) CHECK(norm > 0.0);
        else CHECK(norm == 0.0);
    }
    SUBCASE("identical patch lists give all-zero deltas") {
        Graph g2;
        CdeModel::Bound b2 = m.bind(g2, false);
        const NodeId pd2 = m.patch_deltas(b2, pre, pre);
        for (std::size_t i = 0; i < g2.value(pd2).size(); ++i)
            CHECK(g2.value(pd2).at(i) == 0.0);
    }
    SUBCASE("count mismatch errors") {
        Graph g2;
        CdeModel::Bound b2 = m.bind(g2, false);
        CHECK_THROWS_AS(m.patch_deltas(b2, pre, random_tensor({P + 1, d}, rng)),
                        NumericsError);
    }
}

TEST_CASE("top-k aggregation selection rules") {
    SUBCASE("k = P averages everything") {
        const Tensor deltas = Tensor::from({3, 2}, {1, 0, 0, 2, 3, 0});
        const Tensor mean = topk_aggregate(deltas, 3);
        CHECK(mean.at(0) == doctest::Approx(4.0 / 3.0).epsilon(1e-15));
        CHECK(mean.at(1) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    }
    SUBCASE("largest norm wins at k=1") {
        const Tensor deltas = Tensor::from({3, 2}, {3, 0, 1, 0, 2, 0});
        std::vector<std::size_t> sel;
        const Tensor top = topk_aggregate(deltas, 1, &sel);
        CHECK(sel == std::vector<std::size_t>{0});
        CHECK(top.at(0) == 3.0);
    }
    SUBCASE("norm ties break toward the lowest patch index") {
        Tensor deltas = Tensor::zeros({6, 2});
        deltas.at(2, 0) = 2.0;
        deltas.at(5, 1) = 2.0; // same norm as patch 2
        std::vector<std::size_t> sel;
        topk_aggregate(deltas, 1, &sel);
        CHECK(sel == std::vector<std::size_t>{2});
    }
    SUBCASE("result lies in the convex hull of selected rows and k out of range errors") {
        RngStream rng(3);
        const Tensor deltas = random_tensor({5, 3}, rng);
        std::vector<std::size_t> sel;
        const Tensor mean = topk_aggregate(deltas, 2, &sel);
        for (std::size_t j = 0; j < 3; ++j) {
            double lo = 1e9, hi = -1e9;
            for (std::size_t p : sel) {
                lo = std::min(lo, deltas.at(p, j));
                hi = std::max(hi, deltas.at(p, j));
            }
            CHECK(mean.at(j) >= lo - 1e-12);
            CHECK(mean.at(j) <= hi + 1e-12);
        }
        CHECK_THROWS_AS(topk_aggregate(deltas, 0), NumericsError);
        CHECK_THROWS_AS(topk_aggregate(deltas, 6), NumericsError);
    }
    SUBCASE("selection is stable under permutation modulo the tie rule") {
        RngStream rng(17);
        const Tensor deltas = random_tensor({5, 3}, rng);
        const auto sel = select_topk_rows(deltas, 3);
        // reversed copy: same rows must be chosen, mapped through the flip
        Tensor flipped = Tensor::zeros({5, 3});
        for (std::size_t p = 0; p < 5; ++p)
            for (std::size_t j = 0; j < 3; ++j) flipped.at(4 - p, j) = deltas.at(p, j);
        auto sel_flipped = select_topk_rows(flipped, 3);
        for (auto& s : sel_flipped) s = 4 - s;
        std::sort(sel_flipped.begin(), sel_flipped.end());
        auto sorted = sel;
        std::sort(sorted.begin(), sorted.end());
        CHECK(sorted == sel_flipped);
    }
}

TEST_CASE("classifier is a function of the delta alone") {
    CdeModel m = CdeModel::build(tiny_encoder(4), 4, 1, 5, 123);
    SUBCASE("zero classifier weights give equal logits") {
        for (auto& p : m.params()) {
            if (p.name.rfind("classifier.", 0) == 0)
                p.value = Tensor::zeros(p.value.shape());
        }
        Graph g;
        CdeModel::Bound b = m.bind(g, false);
        RngStream rng(1);
        const NodeId logits = m.classify(b, g.leaf(random_tensor({2, 4}, rng), false));
        CHECK(g.value(logits).cols() == 5);
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 1; j < 5; ++j)
                CHECK(g.value(logits).at(i, j) == g.value(logits).at(i, 0));
    }
    SUBCASE("identical deltas from different graphs classify identically") {
        RngStream rng(15);
        const Tensor delta = random_tensor({1, 4}, rng);
        Graph ga, gb;
        CdeModel::Bound ba = m.bind(ga, false);
        CdeModel::Bound bb = m.bind(gb, false);
        const NodeId la = m.classify(ba, ga.leaf(delta, false));
        const NodeId lb = m.classify(bb, gb.leaf(delta, false));
        for (std::size_t i = 0; i < 5; ++i) CHECK(ga.value(la).at(i) == gb.value(lb).at(i));
    }
    SUBCASE("wrong delta width errors") {
        Graph g;
        CdeModel::Bound b = m.bind(g, false);
        CHECK_THROWS_AS(m.classify(b, g.leaf(Tensor::zeros({1, 3}), false)), NumericsError);
    }
}

TEST_CASE("forward_pair contracts") {
    RngStream rng(44);
    SUBCASE("global: identical observations give zero delta and classify(0) logits") {
        CdeModel m = CdeModel::build(tiny_encoder(4), 6, 1, 3, 5);
        InterventionPair p = make_pair_raw(1, 6, 1, 0, rng);
        p.x_post = p.x;
        const BatchOutput out = m.forward_pair(p);
        for (std::size_t j = 0; j < 4; ++j) CHECK(out.deltas.at(0, j) == 0.0);
        Graph g;
        CdeModel::Bound b = m.bind(g, false);
        const NodeId zero_logits = m.classify(b, g.leaf(Tensor::zeros({1, 4}), false));
        for (std::size_t j = 0; j < 3; ++j)
            CHECK(out.logits.at(0, j) == g.value(zero_logits).at(0, j));
        CHECK(out.deltas.cols() == m.embedding_dim());
    }
    SUBCASE("patch k=1 with one changed patch returns that patch's delta") {
        const std::size_t P = 4, d = 6;
        CdeModel m = CdeModel::build(tiny_encoder(4, true, 1), d, P, 3, 5);
        InterventionPair p = make_pair_raw(P, d, 0, 0, rng);
        p.x_post = p.x;
        for (std::size_t j = 0; j < d; ++j) p.x_post[2 * d + j] += 0.5f;
        const BatchOutput out = m.forward_pair(p);
        REQUIRE(out.top1_patch.size() == 1);
        CHECK(out.top1_patch[0] == 2);
        // aggregated delta equals the changed patch's delta
        Graph g;
        CdeModel::Bound b = m.bind(g, false);
        Tensor pre = Tensor::zeros({P, d}), post = Tensor::zeros({P, d});
        for (std::size_t r = 0; r < P; ++r)
            for (std::size_t j = 0; j < d; ++j) {
                pre.at(r, j) = static_cast<double>(p.x[r * d + j]);
                post.at(r, j) = static_cast<double>(p.x_post[r * d + j]);
            }
        const NodeId pd = m.patch_deltas(b, pre, post);
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(out.deltas.at(0, j) == g.value(pd).at(2, j));
        CHECK(out.deltas.cols() == m.embedding_dim());
    }
    SUBCASE("variant/shape mismatch is rejected") {
        CdeModel m = CdeModel::build(tiny_encoder(4), 6, 1, 3, 5);
        InterventionPair p = make_pair_raw(2, 6, 0, 0, rng); // looks like a patch pair
        CHECK_THROWS_AS(m.forward_pair(p), NumericsError);
    }
}

TEST_CASE("training: loss decreases, determinism, degenerate config") {
    DatasetSplit data = toy_dataset(64, 31);
    EncoderConfig enc;
    enc.featurizer = FeaturizerKind::RandomMap;
    enc.feature_dim = 16;
    enc.embedding_dim = 8;
    enc.projector_hidden = 16;

    TrainHyper hyper;
    hyper.base_lr = 3e-3;
    hyper.batch_size = 16;
    hyper.epochs = 3;
    hyper.seed = 7;

    SUBCASE("epoch-mean total loss decreases on a toy world") {
        CdeModel m = CdeModel::build(enc, 16, 1, 4, hyper.seed);
        const TrainResult r = train(m, data, hyper);
        REQUIRE(r.epoch_mean_loss.size() == 3);
        CHECK(r.epoch_mean_loss.back() < r.epoch_mean_loss.front());
    }
    SUBCASE("identical seeds give bit-identical parameters and traces") {
        CdeModel a = CdeModel::build(enc, 16, 1, 4, hyper.seed);
        CdeModel b = CdeModel::build(enc, 16, 1, 4, hyper.seed);
        const TrainResult ra = train(a, data, hyper);
        const TrainResult rb = train(b, data, hyper);
        CHECK(ra.epoch_mean_loss == rb.epoch_mean_loss);
        for (std::size_t i = 0; i < a.params().size(); ++i) {
            CHECK(a.params()[i].value.vec() == b.params()[i].value.vec());
        }
    }
    SUBCASE("zero-alpha training equals the pure-CE trace bit for bit") {
        TrainHyper ce = hyper;
        ce.loss.alpha_contrast = 0.0;
        ce.loss.alpha_sparsity = 0.0;
        CdeModel a = CdeModel::build(enc, 16, 1, 4, hyper.seed);
        CdeModel b = CdeModel::build(enc, 16, 1, 4, hyper.seed);
        const TrainResult ra = train(a, data, ce);
        const TrainResult rb = train(b, data, ce);
        CHECK(ra.epoch_mean_loss == rb.epoch_mean_loss);
        CHECK(ra.epoch_mean_loss == ra.epoch_mean_ce); // contrast/sparsity never built
        for (double v : ra.epoch_mean_contrast) CHECK(v == 0.0);
    }
    SUBCASE("one epoch improves the pre-training loss") {
        // mean total loss over fixed 16-pair slices, no parameter updates
        auto eval_mean_loss = [&](const CdeModel& model) {
            double sum = 0.0;
            std::size_t steps = 0;
            for (std::size_t start = 0; start < data.train.size(); start += 16) {
                std::vector<InterventionPair> slice(data.train.begin() + start,
                                                    data.train.begin() + start + 16);
                std::vector<int> labels;
                for (const auto& p : slice) labels.push_back(static_cast<int>(p.action));
                const BatchOutput out = model.forward_pairs(slice);
                Graph g;
                const TotalLoss t = total_loss(g, g.leaf(out.logits, false),
                                               g.leaf(out.deltas, false), labels, hyper.loss);
                sum += g.value(t.total).item();
                ++steps;
            }
            return sum / static_cast<double>(steps);
        };
        CdeModel m = CdeModel::build(enc, 16, 1, 4, hyper.seed);
        m.fit_normalizer(data.train);
        const double before = eval_mean_loss(m);
        TrainHyper one = hyper;
        one.epochs = 1;
        const TrainResult r = train(m, data, one);
        CHECK(r.epoch_mean_loss.size() == 1);
        CHECK(eval_mean_loss(m) < before);
    }
    SUBCASE("empty train split is a config error") {
        DatasetSplit empty = data;
        empty.train.clear();
        CdeModel m = CdeModel::build(enc, 16, 1, 4, 1);
        CHECK_THROWS_AS(train(m, empty, hyper), ConfigError);
    }
    SUBCASE("non-finite parameters abort with step diagnostics") {
        CdeModel m = CdeModel::build(enc, 16, 1, 4, 1);
        m.params()[0].value.at(0) = std::numeric_limits<double>::infinity();
        try {
            train(m, data, hyper);
            CHECK(false);
        } catch (const TrainingError& e) {
            CHECK(std::string(e.what()).find("epoch 0") != std::string::npos);
            CHECK(std::string(e.what()).find("batch") != std::string::npos);
        }
    }
}

TEST_CASE("gradient flow through the full model matches finite differences") {
    DatasetSplit data = toy_dataset(4, 13);
    EncoderConfig enc;
    enc.featurizer = FeaturizerKind::RandomMap;
    enc.feature_dim = 8;
    enc.embedding_dim = 6;
    enc.projector_hidden = 8;
    enc.featurizer_trainable = true;
    CdeModel m = CdeModel::build(enc, 16, 1, 4, 3);
    m.fit_normalizer(data.train);

    std::vector<const InterventionPair*> batch;
    std::vector<int> labels;
    for (const auto& p : data.train) {
        batch.push_back(&p);
        labels.push_back(static_cast<int>(p.action));
    }

    Graph g;
    CdeModel::Bound bound = m.bind(g, true);
    const auto fwd = m.forward_training(bound, batch);
    const TotalLoss t = total_loss(g, fwd.logits, fwd.deltas, labels, LossConfig{2.0, 1.0, 0.07});
    g.backward(t.total);

    for (std::size_t i : bound.trainable_indices) {
        const NodeId node = bound.param_nodes[i];
        const Tensor analytic = g.grad(node);
        const Tensor x0 = g.value(node);
        const Tensor numeric = finite_diff_grad(
            [&](const Tensor& v) {
                g.set_value(node, v);
                g.recompute();
                return g.value(t.total).item();
            },
            x0, 1e-6);
        g.set_value(node, x0);
        CHECK(max_rel_err(analytic, numeric) < 1e-4);
    }
}
