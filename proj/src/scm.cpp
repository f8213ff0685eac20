#include "cde/scm.hpp"

#include "cde/errors.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cde {

namespace {
constexpr std::uint64_t kSaltRenderer = 0xA11CE;
constexpr std::uint64_t kSaltSplitBase = 0x5717;

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, ',')) {
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}
} // namespace

std::vector<ActionSpec> WorldConfig::parse_actions() const {
    std::vector<ActionSpec> specs;
    std::size_t next_property = 0;
    for (const std::string& token : split_csv(actions)) {
        const auto colon = token.find(':');
        if (colon == std::string::npos) {
            specs.push_back({token, next_property++, +1, -1});
            continue;
        }
        const std::string a = token.substr(0, colon);
        const std::string b = token.substr(colon + 1);
        if (a.empty() || b.empty() || b.find(':') != std::string::npos) {
            throw ConfigError("malformed action token '" + token + "'");
        }
        const int ia = static_cast<int>(specs.size());
        specs.push_back({a, next_property, +1, ia + 1});
        specs.push_back({b, next_property, -1, ia});
        ++next_property;
    }
    for (std::size_t i = 0; i < specs.size(); ++i) {
        for (std::size_t j = i + 1; j < specs.size(); ++j) {
            if (specs[i].name == specs[j].name) {
                throw ConfigError("duplicate action name '" + specs[i].name + "'");
            }
        }
    }
    return specs;
}

void WorldConfig::validate() const {
    if (num_objects < 1) throw ConfigError("world: num_objects must be >= 1");
    if (props_per_object < 1) throw ConfigError("world: props_per_object must be >= 1");
    if (delta_magnitude <= 0.0) throw ConfigError("world: delta_magnitude must be > 0");
    if (intervention_noise < 0.0) throw ConfigError("world: intervention_noise must be >= 0");
    if (confounding < 0.0 || confounding > 1.0)
        throw ConfigError("world: confounding must be in [0,1]");
    if (pairs_per_split < 1) throw ConfigError("world: pairs_per_split must be >= 1");
    if (shift_block_width < 1) throw ConfigError("world: shift_block_width must be >= 1");
    if (render_object_specificity < 0.0 || render_object_specificity > 1.0)
        throw ConfigError("world: render_object_specificity must be in [0,1]");

    const auto specs = parse_actions();
    if (specs.empty()) throw ConfigError("world: no actions declared");
    std::size_t max_coord = 0;
    for (const auto& a : specs) max_coord = std::max(max_coord, a.property);
    if (max_coord + shift_block_width > props_per_object) {
        throw ConfigError("world: actions need " + std::to_string(max_coord + shift_block_width) +
                          " properties per object but props_per_object is " +
                          std::to_string(props_per_object));
    }

    if (patch_grid == 0) {
        if (observation_dim < latent_dim()) {
            throw ConfigError("world: observation_dim must be >= scene_dims + N*K (" +
                              std::to_string(latent_dim()) + ")");
        }
    } else {
        if (patch_grid < num_objects)
            throw ConfigError("world: patch_grid must be >= num_objects");
        if (observation_dim < scene_dims + props_per_object) {
            throw ConfigError("world: per-patch observation_dim must be >= scene_dims + K (" +
                              std::to_string(scene_dims + props_per_object) + ")");
        }
    }

    // Split feasibility.
    if (num_objects < 2) throw ConfigError("splits: need num_objects >= 2 to hold out objects");
    if (specs.size() < 2) throw ConfigError("splits: need >= 2 actions");
    if (systematic_holdout() >= num_objects) {
        throw ConfigError("splits: systematic holdout (" + std::to_string(systematic_holdout()) +
                          ") leaves no training objects");
    }
    if (comp_holdout_per_object < 1)
        throw ConfigError("splits: comp_holdout_per_object must be >= 1");
    const std::size_t n_train = train_object_count();
    // Preferred actions are distributed round-robin over the training objects;
    // a compositional holdout must fit in the non-preferred remainder.
    const std::size_t max_pref =
        (specs.size() + n_train - 1) / n_train; // ceil(|A| / n_train)
    if (comp_holdout_per_object + max_pref > specs.size()) {
        throw ConfigError("splits: comp_holdout_per_object (" +
                          std::to_string(comp_holdout_per_object) +
                          ") too large for " + std::to_string(specs.size()) +
                          " actions with up to " + std::to_string(max_pref) +
                          " preferred actions per object");
    }
}

Tensor GroundTruthDelta::property_block(std::size_t props_per_object) const {
    Tensor t = Tensor::zeros({props_per_object});
    t.at(property) = direction * magnitude;
    return t;
}

const std::vector<InterventionPair>& DatasetSplit::by_name(const std::string& name) const {
    if (name == "train") return train;
    if (name == "iid_test") return iid_test;
    if (name == "ood_compositional") return ood_compositional;
    if (name == "ood_systematic") return ood_systematic;
    throw ConfigError("unknown split '" + name + "'");
}

World::World(WorldConfig config) : config_(std::move(config)) {
    config_.validate();
    actions_ = config_.parse_actions();

    // Patch ownership: contiguous, as-equal-as-possible blocks.
    if (patchwise()) {
        const std::size_t P = config_.patch_grid, N = config_.num_objects;
        const std::size_t base = P / N, rem = P % N;
        patch_owner_.resize(P);
        std::size_t p = 0;
        for (std::size_t n = 0; n < N; ++n) {
            const std::size_t count = base + (n < rem ? 1 : 0);
            for (std::size_t i = 0; i < count; ++i) patch_owner_[p++] = n;
        }
    }

    // Renderer weights: drawn once from the dataset seed. Property columns
    // mix a direction shared across objects (and patches) with an
    // object-specific one, controlled by render_object_specificity.
    RngStream rng = RngStream::derive(config_.seed, {kSaltRenderer});
    const std::size_t blocks = patchwise() ? config_.patch_grid : 1;
    const std::size_t in_dim =
        patchwise() ? config_.scene_dims + config_.props_per_object : config_.latent_dim();
    const std::size_t out_dim = config_.observation_dim;
    const std::size_t hidden = std::max(in_dim + 8, out_dim);
    const std::size_t K = config_.props_per_object;
    const double a1 = 1.5 / std::sqrt(static_cast<double>(in_dim));
    const double a2 = 1.5 / std::sqrt(static_cast<double>(hidden));
    const double gamma = config_.render_object_specificity;
    const double shared_scale = std::sqrt(std::max(0.0, 1.0 - gamma * gamma));

    Tensor shared_cols = Tensor::zeros({K, hidden}); // c_k, one per property
    for (auto& w : shared_cols.vec()) w = rng.uniform(-a1, a1);

    renderers_.reserve(blocks);
    for (std::size_t b = 0; b < blocks; ++b) {
        PatchRenderer r;
        r.w1 = Tensor::zeros({hidden, in_dim});
        r.b1 = Tensor::zeros({hidden});
        r.w2 = Tensor::zeros({out_dim, hidden});
        r.b2 = Tensor::zeros({out_dim});
        for (std::size_t h = 0; h < hidden; ++h) {
            for (std::size_t j = 0; j < in_dim; ++j) {
                const double own = rng.uniform(-a1, a1);
                const bool is_property = j >= config_.scene_dims;
                if (!is_property) {
                    r.w1.at(h, j) = own;
                } else {
                    const std::size_t k = (j - config_.scene_dims) % K;
                    r.w1.at(h, j) = shared_scale * shared_cols.at(k, h) + gamma * own;
                }
            }
        }
        for (auto& w : r.b1.vec()) w = rng.uniform(-0.1, 0.1);
        for (auto& w : r.w2.vec()) w = rng.uniform(-a2, a2);
        for (auto& w : r.b2.vec()) w = rng.uniform(-0.1, 0.1);
        renderers_.push_back(std::move(r));
    }
}

std::size_t World::object_of_patch(std::size_t p) const {
    if (!patchwise() || p >= patch_owner_.size())
        throw ConfigError("object_of_patch: invalid patch index");
    return patch_owner_[p];
}

std::vector<std::size_t> World::patches_of_object(std::size_t n) const {
    std::vector<std::size_t> out;
    for (std::size_t p = 0; p < patch_owner_.size(); ++p)
        if (patch_owner_[p] == n) out.push_back(p);
    return out;
}

LatentState World::sample_latents(RngStream& rng) const {
    LatentState z;
    z.scene = Tensor::zeros({config_.scene_dims});
    z.objects = Tensor::zeros({config_.num_objects, config_.props_per_object});
    for (auto& v : z.scene.vec()) v = rng.grid_uniform();
    for (auto& v : z.objects.vec()) v = rng.grid_uniform();
    return z;
}

LatentState World::apply_intervention(const LatentState& z, std::size_t action,
                                      std::size_t object, RngStream& rng) const {
    if (action >= actions_.size()) {
        throw ConfigError("apply_intervention: unknown action id " + std::to_string(action));
    }
    if (object >= config_.num_objects) {
        throw ConfigError("apply_intervention: unknown object id " + std::to_string(object));
    }
    const ActionSpec& spec = actions_[action];
    LatentState out = z;
    const double shift = spec.direction * config_.delta_magnitude;
    for (std::size_t w = 0; w < config_.shift_block_width; ++w) {
        out.objects.at(object, spec.property + w) += shift;
    }
    const double sigma = config_.intervention_noise;
    if (sigma > 0.0) {
        if (config_.noise_all_coords) {
            // Noise over the intervened object's whole property block.
            for (std::size_t k = 0; k < config_.props_per_object; ++k) {
                out.objects.at(object, k) += rng.normal(0.0, sigma);
            }
        } else {
            for (std::size_t w = 0; w < config_.shift_block_width; ++w) {
                out.objects.at(object, spec.property + w) += rng.normal(0.0, sigma);
            }
        }
    }
    return out;
}

std::vector<double> World::flatten(const LatentState& z) {
    std::vector<double> out;
    out.reserve(z.scene.size() + z.objects.size());
    out.insert(out.end(), z.scene.vec().begin(), z.scene.vec().end());
    out.insert(out.end(), z.objects.vec().begin(), z.objects.vec().end());
    return out;
}

Tensor World::render_block(const PatchRenderer& r, const std::vector<double>& input) const {
    const std::size_t hidden = r.b1.size(), out_dim = r.b2.size(), in_dim = input.size();
    std::vector<double> h(hidden);
    for (std::size_t i = 0; i < hidden; ++i) {
        double acc = r.b1.at(i);
        const double* wrow = r.w1.data() + i * in_dim;
        for (std::size_t j = 0; j < in_dim; ++j) acc += wrow[j] * input[j];
        h[i] = std::tanh(acc);
    }
    Tensor out = Tensor::zeros({out_dim});
    for (std::size_t i = 0; i < out_dim; ++i) {
        double acc = r.b2.at(i);
        const double* wrow = r.w2.data() + i * hidden;
        for (std::size_t j = 0; j < hidden; ++j) acc += wrow[j] * h[j];
        out.at(i) = acc;
    }
    return out;
}

Tensor World::render(const LatentState& z) const {
    if (z.scene.size() != config_.scene_dims ||
        z.objects.size() != config_.num_objects * config_.props_per_object) {
        throw NumericsError("render: latent dims do not match world config");
    }
    if (!patchwise()) {
        return render_block(renderers_[0], flatten(z));
    }
    const std::size_t P = config_.patch_grid, d = config_.observation_dim;
    Tensor out = Tensor::zeros({P, d});
    std::vector<double> input(config_.scene_dims + config_.props_per_object);
    for (std::size_t p = 0; p < P; ++p) {
        const std::size_t n = patch_owner_[p];
        std::size_t idx = 0;
        for (std::size_t s = 0; s < config_.scene_dims; ++s) input[idx++] = z.scene.at(s);
        for (std::size_t k = 0; k < config_.props_per_object; ++k)
            input[idx++] = z.objects.at(n, k);
        const Tensor row = render_block(renderers_[p], input);
        for (std::size_t j = 0; j < d; ++j) out.at(p, j) = row.at(j);
    }
    return out;
}

InterventionPair World::make_pair(std::size_t action, std::size_t object, RngStream& rng) const {
    const LatentState z = sample_latents(rng);
    const LatentState z_post = apply_intervention(z, action, object, rng);
    const Tensor x = render(z);
    const Tensor x_post = render(z_post);

    InterventionPair pair;
    pair.rows = static_cast<std::uint32_t>(patchwise() ? config_.patch_grid : 1);
    pair.cols = static_cast<std::uint32_t>(config_.observation_dim);
    pair.action = static_cast<std::uint32_t>(action);
    pair.object = static_cast<std::uint32_t>(object);
    pair.x.reserve(x.size());
    pair.x_post.reserve(x_post.size());
    for (double v : x.vec()) pair.x.push_back(static_cast<float>(v));
    for (double v : x_post.vec()) pair.x_post.push_back(static_cast<float>(v));
    pair.oracle = OracleLatents{flatten(z), flatten(z_post)};
    return pair;
}

void World::sample_train_combo(RngStream& rng, const SplitManifest& man, std::size_t& object,
                               std::size_t& action) const {
    const std::size_t t = rng.uniform_index(man.train_objects.size());
    object = man.train_objects[t];
    const bool take_preferred = rng.uniform(0.0, 1.0) < config_.confounding;
    const auto& pool = take_preferred ? man.preferred_actions[t] : man.allowed_actions[t];
    action = pool[rng.uniform_index(pool.size())];
}

DatasetSplit World::make_splits() const {
    DatasetSplit ds;
    SplitManifest& man = ds.manifest;
    const std::size_t n_train = config_.train_object_count();
    const std::size_t A = actions_.size();

    for (std::size_t n = 0; n < config_.num_objects; ++n) {
        (n < n_train ? man.train_objects : man.test_objects).push_back(n);
    }

    // Preferred actions: round-robin so the training data covers every action.
    man.preferred_actions.assign(n_train, {});
    for (std::size_t a = 0; a < A; ++a) man.preferred_actions[a % n_train].push_back(a);

    // Compositional holdout: scan cyclically from t+1, skipping preferred.
    man.holdout_actions.assign(n_train, {});
    man.allowed_actions.assign(n_train, {});
    for (std::size_t t = 0; t < n_train; ++t) {
        const auto& pref = man.preferred_actions[t];
        auto is_pref = [&](std::size_t a) {
            return std::find(pref.begin(), pref.end(), a) != pref.end();
        };
        for (std::size_t j = 1; j <= A && man.holdout_actions[t].size() < config_.comp_holdout_per_object; ++j) {
            const std::size_t a = (t + j) % A;
            if (!is_pref(a)) man.holdout_actions[t].push_back(a);
        }
        if (man.holdout_actions[t].size() < config_.comp_holdout_per_object) {
            throw ConfigError("splits: cannot hold out " +
                              std::to_string(config_.comp_holdout_per_object) +
                              " non-preferred actions for object " + std::to_string(t));
        }
        std::sort(man.holdout_actions[t].begin(), man.holdout_actions[t].end());
        for (std::size_t a = 0; a < A; ++a) {
            if (!std::binary_search(man.holdout_actions[t].begin(), man.holdout_actions[t].end(), a))
                man.allowed_actions[t].push_back(a);
        }
    }

    if (patchwise()) {
        man.patch_of_object_begin.resize(config_.num_objects);
        man.patch_of_object_end.resize(config_.num_objects);
        for (std::size_t n = 0; n < config_.num_objects; ++n) {
            const auto patches = patches_of_object(n);
            man.patch_of_object_begin[n] = patches.front();
            man.patch_of_object_end[n] = patches.back() + 1;
        }
    }

    const std::size_t M = config_.pairs_per_split;
    ds.train.reserve(M);
    ds.iid_test.reserve(M);
    ds.ood_compositional.reserve(M);
    ds.ood_systematic.reserve(M);
    for (std::size_t split = 0; split < 4; ++split) {
        for (std::size_t i = 0; i < M; ++i) {
            RngStream rng = RngStream::derive(config_.seed, {kSaltSplitBase + split, i});
            std::size_t object = 0, action = 0;
            switch (split) {
            case 0:
            case 1:
                sample_train_combo(rng, man, object, action);
                break;
            case 2: {
                const std::size_t t = rng.uniform_index(man.train_objects.size());
                object = man.train_objects[t];
                const auto& h = man.holdout_actions[t];
                action = h[rng.uniform_index(h.size())];
                break;
            }
            default:
                object = man.test_objects[rng.uniform_index(man.test_objects.size())];
                action = rng.uniform_index(A);
                break;
            }
            InterventionPair pair = make_pair(action, object, rng);
            switch (split) {
            case 0: ds.train.push_back(std::move(pair)); break;
            case 1: ds.iid_test.push_back(std::move(pair)); break;
            case 2: ds.ood_compositional.push_back(std::move(pair)); break;
            default: ds.ood_systematic.push_back(std::move(pair)); break;
            }
        }
    }
    return ds;
}

} // namespace cde
