#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cde/errors.hpp"
#include "cde/evalsuite.hpp"
#include "test_support.hpp"

#include <cmath>

using namespace cde;
using namespace cde::testing;

namespace {

CdeModel zero_classifier_model(std::size_t d, std::size_t actions) {
    EncoderConfig enc;
    enc.featurizer = FeaturizerKind::Identity;
    enc.embedding_dim = 4;
    enc.projector_hidden = 6;
    CdeModel m = CdeModel::build(enc, d, 1, actions, 3);
    for (auto& p : m.params()) {
        if (p.name.rfind("classifier.", 0) == 0) p.value = Tensor::zeros(p.value.shape());
    }
    return m;
}

std::vector<InterventionPair> synthetic_pairs(std::size_t n, std::size_t d,
                                              const std::vector<std::uint32_t>& actions,
                                              RngStream& rng) {
    std::vector<InterventionPair> out;
    for (std::size_t i = 0; i < n; ++i) {
        InterventionPair p;
        p.rows = 1;
        p.cols = static_cast<std::uint32_t>(d);
        p.action = actions[i % actions.size()];
        p.object = 0;
        for (std::size_t j = 0; j < d; ++j) {
            p.x.push_back(static_cast<float>(rng.uniform(-1, 1)));
            p.x_post.push_back(static_cast<float>(rng.uniform(-1, 1)));
        }
        out.push_back(std::move(p));
    }
    return out;
}

} // namespace

TEST_CASE("accuracy: exact counting, ties to lowest index, range") {
    RngStream rng(2);
    SUBCASE("constant classifier scores the class-0 share exactly") {
        CdeModel m = zero_classifier_model(6, 6);
        // 12 pairs balanced over 6 actions -> exactly 2 of 12 are action 0
        const auto pairs = synthetic_pairs(12, 6, {0, 1, 2, 3, 4, 5}, rng);
        CHECK(accuracy(m, pairs) == 2.0 / 12.0);
    }
    SUBCASE("random models stay within [0,1]") {
        for (int trial = 0; trial < 20; ++trial) {
            EncoderConfig enc;
            enc.featurizer = FeaturizerKind::RandomMap;
            enc.feature_dim = 8;
            enc.embedding_dim = 4;
            enc.projector_hidden = 6;
            CdeModel m = CdeModel::build(enc, 6, 1, 4, 100 + trial);
            const auto pairs = synthetic_pairs(9, 6, {0, 1, 2, 3}, rng);
            const double a = accuracy(m, pairs);
            CHECK(a >= 0.0);
            CHECK(a <= 1.0);
        }
    }
    SUBCASE("empty split errors") {
        CdeModel m = zero_classifier_model(6, 3);
        CHECK_THROWS_AS(accuracy(m, {}), ConfigError);
    }
}

TEST_CASE("generalization gap") {
    CHECK(std::fabs(generalization_gap(0.96, 0.48) - 0.48) < 1e-12);
    CHECK(generalization_gap(0.7, 0.7) == 0.0);
    CHECK(std::fabs(generalization_gap(0.55, 0.33) - 0.22) < 1e-12);
}

TEST_CASE("prototypes: means, singletons, absent actions") {
    DeltaSet ds;
    ds.deltas = Tensor::from({3, 2}, {1, 0, 3, 0, 5, 5});
    ds.labels = {0, 0, 2};
    const PrototypeTable t = compute_prototypes(ds, 4);
    CHECK(t.mu.at(0, 0) == 2.0);
    CHECK(t.mu.at(0, 1) == 0.0);
    CHECK(t.counts[0] == 2);
    CHECK(t.present[0]);
    CHECK(t.mu.at(2, 0) == 5.0); // single delta: prototype equals it
    CHECK(t.present[2]);
    CHECK(!t.present[1]);
    CHECK(!t.present[3]);
}

TEST_CASE("prototype similarity matrix geometry") {
    SUBCASE("unit diagonal, anti-parallel -1, orthogonal 0") {
        DeltaSet ds;
        ds.deltas = Tensor::from({3, 3}, {1, 0, 0, -1, 0, 0, 0, 2, 0});
        ds.labels = {0, 1, 2};
        const SimilarityMatrix sm = prototype_similarity_matrix(compute_prototypes(ds, 3));
        CHECK(sm.values.at(0, 0) == 1.0);
        CHECK(sm.values.at(0, 1) == -1.0);
        CHECK(std::fabs(sm.values.at(0, 2)) < 1e-9);
        for (std::size_t a = 0; a < 3; ++a)
            for (std::size_t b = 0; b < 3; ++b) {
                CHECK(sm.entry_valid(a, b));
                CHECK(std::fabs(sm.values.at(a, b) - sm.values.at(b, a)) < 1e-12);
            }
    }
    SUBCASE("zero-norm prototype entries report missing") {
        DeltaSet ds;
        ds.deltas = Tensor::from({2, 2}, {0, 0, 1, 1});
        ds.labels = {0, 1};
        const SimilarityMatrix sm = prototype_similarity_matrix(compute_prototypes(ds, 2));
        CHECK(!sm.entry_valid(0, 0));
        CHECK(!sm.entry_valid(0, 1));
        CHECK(sm.entry_valid(1, 1));
    }
}

TEST_CASE("transfer similarity") {
    RngStream rng(5);
    CdeModel m = zero_classifier_model(6, 3);
    SUBCASE("identical pre/post with zero prototypes scores 1") {
        auto pairs = synthetic_pairs(4, 6, {0, 1, 2}, rng);
        for (auto& p : pairs) p.x_post = p.x;
        PrototypeTable table;
        table.mu = Tensor::zeros({3, 4});
        table.counts = {1, 1, 1};
        table.present = {true, true, true};
        CHECK(std::fabs(transfer_similarity(m, pairs, table) - 1.0) < 1e-9);
    }
    SUBCASE("matches a direct reimplementation on a real model") {
        const auto pairs = synthetic_pairs(6, 6, {0, 1, 2}, rng);
        const DeltaSet train = collect_deltas(m, pairs);
        const PrototypeTable table = compute_prototypes(train, 3);
        const double got = transfer_similarity(m, pairs, table);
        const BatchOutput out = m.forward_pairs(pairs);
        double expect = 0.0;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            double dot = 0, nu = 0, nv = 0;
            for (std::size_t j = 0; j < 4; ++j) {
                const double u = out.z_pre.at(i, j) + table.mu.at(pairs[i].action, j);
                const double v = out.z_post.at(i, j);
                dot += u * v;
                nu += u * u;
                nv += v * v;
            }
            expect += dot / ((std::sqrt(nu) + 1e-12) * (std::sqrt(nv) + 1e-12));
        }
        expect /= static_cast<double>(pairs.size());
        CHECK(got == doctest::Approx(expect).epsilon(1e-12));
    }
    SUBCASE("missing prototypes are reported with the action list") {
        const auto pairs = synthetic_pairs(4, 6, {0, 2}, rng);
        PrototypeTable table;
        table.mu = Tensor::zeros({3, 4});
        table.counts = {1, 0, 0};
        table.present = {true, false, false};
        try {
            transfer_similarity(m, pairs, table);
            CHECK(false);
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("2") != std::string::npos);
        }
    }
}

TEST_CASE("knn: degenerate and separated cases, oracle agreement") {
    SUBCASE("query coinciding with five copies classifies to their label") {
        DeltaSet train;
        train.deltas = Tensor::from({6, 2}, {1, 1, 1, 1, 1, 1, 1, 1, 1, 1, -5, 0});
        train.labels = {2, 2, 2, 2, 2, 0};
        const Tensor q = Tensor::from({1, 2}, {1, 1});
        const KnnResult r = knn_classify(train, q, {2}, 5);
        CHECK(r.predicted == std::vector<int>{2});
        CHECK(r.accuracy == 1.0);
    }
    SUBCASE("well-separated clusters classify perfectly") {
        RngStream rng(8);
        DeltaSet train;
        const std::size_t per = 20;
        train.deltas = Tensor::zeros({2 * per, 3});
        Tensor queries = Tensor::zeros({2 * per, 3});
        std::vector<int> qlabels;
        for (std::size_t i = 0; i < 2 * per; ++i) {
            const int label = i < per ? 0 : 1;
            const double center = label == 0 ? 0.0 : 10.0;
            for (std::size_t j = 0; j < 3; ++j) {
                train.deltas.at(i, j) = center + rng.uniform(-0.5, 0.5);
                queries.at(i, j) = center + rng.uniform(-0.5, 0.5);
            }
            train.labels.push_back(label);
            qlabels.push_back(label);
        }
        const KnnResult r = knn_classify(train, queries, qlabels, 5);
        CHECK(r.accuracy == 1.0);
    }
    SUBCASE("k equal to the whole balanced set falls back to the global tie rule") {
        DeltaSet train;
        train.deltas = Tensor::from({4, 1}, {0, 1, 2, 3});
        train.labels = {1, 1, 3, 3};
        const Tensor q = Tensor::from({1, 1}, {5.0});
        const KnnResult r = knn_classify(train, q, {}, 4);
        CHECK(r.predicted == std::vector<int>{1}); // vote tie -> smaller action id
    }
    SUBCASE("k out of range / empty train set error") {
        DeltaSet train;
        train.deltas = Tensor::from({2, 1}, {0, 1});
        train.labels = {0, 1};
        CHECK_THROWS_AS(knn_classify(train, Tensor::from({1, 1}, {0.0}), {}, 3), ConfigError);
        DeltaSet empty;
        empty.deltas = Tensor::zeros({0, 1});
        CHECK_THROWS_AS(knn_classify(empty, Tensor::from({1, 1}, {0.0}), {}, 1), ConfigError);
    }
    SUBCASE("agrees exactly with the brute-force oracle on 100 random instances") {
        RngStream rng(99);
        for (int inst = 0; inst < 100; ++inst) {
            const std::size_t n_train = 2 + rng.uniform_index(48);
            const std::size_t n_query = 1 + rng.uniform_index(20);
            const std::size_t l = 1 + rng.uniform_index(8);
            const std::size_t k = 1 + rng.uniform_index(n_train);
            DeltaSet train;
            train.deltas = random_tensor({n_train, l}, rng);
            for (std::size_t i = 0; i < n_train; ++i)
                train.labels.push_back(static_cast<int>(rng.uniform_index(4)));
            const Tensor queries = random_tensor({n_query, l}, rng);
            const KnnResult got = knn_classify(train, queries, {}, k);
            const auto expect = knn_oracle(train.deltas, train.labels, queries, k);
            CHECK(got.predicted == expect);
        }
    }
}

TEST_CASE("delta variance: closed forms and scaling") {
    SUBCASE("identical deltas have exactly zero variance") {
        DeltaSet ds;
        ds.deltas = Tensor::from({3, 2}, {1, 2, 1, 2, 1, 2});
        ds.labels = {0, 0, 0};
        const auto v = delta_variance(ds, 1);
        REQUIRE(v[0].has_value());
        CHECK(*v[0] == 0.0);
    }
    SUBCASE("two deltas (0,0) and (2,0) give mean variance 1") {
        DeltaSet ds;
        ds.deltas = Tensor::from({2, 2}, {0, 0, 2, 0});
        ds.labels = {0, 0};
        const auto v = delta_variance(ds, 1);
        CHECK(*v[0] == 1.0);
    }
    SUBCASE("translation invariance and quadratic scaling") {
        RngStream rng(3);
        DeltaSet ds;
        ds.deltas = random_tensor({6, 4}, rng);
        ds.labels = {0, 0, 0, 0, 0, 0};
        const double base = *delta_variance(ds, 1)[0];

        DeltaSet shifted = ds;
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t j = 0; j < 4; ++j) shifted.deltas.at(i, j) += 3.7;
        CHECK(std::fabs(*delta_variance(shifted, 1)[0] - base) < 1e-9);

        DeltaSet scaled = ds;
        for (auto& x : scaled.deltas.vec()) x *= 2.5;
        CHECK(std::fabs(*delta_variance(scaled, 1)[0] - 2.5 * 2.5 * base) < 1e-9);
    }
    SUBCASE("fewer than two samples is flagged, not reported") {
        DeltaSet ds;
        ds.deltas = Tensor::from({3, 1}, {1, 2, 3});
        ds.labels = {0, 0, 1};
        const auto v = delta_variance(ds, 3);
        CHECK(v[0].has_value());
        CHECK(!v[1].has_value());
        CHECK(!v[2].has_value());
    }
}

TEST_CASE("oracle latent deltas reach the ideal metric ceiling") {
    WorldConfig cfg;
    cfg.scene_dims = 2;
    cfg.num_objects = 6;
    cfg.props_per_object = 4;
    cfg.actions = "open:close,turn_on:turn_off,fill:empty";
    cfg.observation_dim = 32;
    cfg.pairs_per_split = 256;
    cfg.intervention_noise = 0.0; // exact arithmetic regime
    cfg.confounding = 0.9;
    cfg.holdout_objects = 2;
    cfg.seed = 55;
    const World world(cfg);
    const DatasetSplit data = world.make_splits();

    const DeltaSet train = oracle_deltas(data.train, cfg);
    const DeltaSet iid = oracle_deltas(data.iid_test, cfg);
    const PrototypeTable table = compute_prototypes(train, world.num_actions());
    const SimilarityMatrix sm = prototype_similarity_matrix(table);

    for (std::size_t a = 0; a < world.num_actions(); ++a) {
        const int inv = world.actions()[a].inverse;
        REQUIRE(inv >= 0);
        CHECK(sm.values.at(a, static_cast<std::size_t>(inv)) == -1.0);
        CHECK(sm.values.at(a, a) == 1.0);
    }
    const auto variances = delta_variance(train, world.num_actions());
    for (const auto& v : variances) {
        REQUIRE(v.has_value());
        CHECK(*v == 0.0);
    }
    const KnnResult knn = knn_classify(train, iid.deltas, iid.labels, 5);
    CHECK(knn.accuracy == 1.0);
}

TEST_CASE("evaluate assembles a full report") {
    WorldConfig cfg;
    cfg.scene_dims = 1;
    cfg.num_objects = 3;
    cfg.props_per_object = 3;
    cfg.actions = "open:close,fill:empty";
    cfg.observation_dim = 12;
    cfg.pairs_per_split = 24;
    cfg.holdout_objects = 1;
    cfg.comp_holdout_per_object = 1;
    cfg.seed = 21;
    const World world(cfg);
    const DatasetSplit data = world.make_splits();

    EncoderConfig enc;
    enc.featurizer = FeaturizerKind::RandomMap;
    enc.feature_dim = 8;
    enc.embedding_dim = 4;
    enc.projector_hidden = 8;
    CdeModel m = CdeModel::build(enc, 12, 1, 4, 5);
    m.fit_normalizer(data.train);

    const MetricsReport r = evaluate(m, data);
    CHECK(r.iid_accuracy >= 0.0);
    CHECK(r.iid_accuracy <= 1.0);
    CHECK(std::fabs(r.gap_syst - (r.iid_accuracy - r.ood_syst_accuracy)) < 1e-12);
    CHECK(r.knn_accuracy.count("iid_test") == 1);
    CHECK(r.transfer_similarity.count("ood_systematic") == 1);
    CHECK(r.variance_iid.size() == 4);
    CHECK(r.prototype_similarity.values.rows() == 4);
    CHECK(!r.top1_patch_locality.has_value()); // global model
}
