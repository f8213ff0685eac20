#include "cde/config.hpp"

#include "cde/dataset_io.hpp"
#include "cde/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <sstream>

namespace cde {

using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::size_t parse_count(const std::string& key, const std::string& v) {
    try {
        const long long n = std::stoll(v);
        if (n < 0) throw std::out_of_range("negative");
        return static_cast<std::size_t>(n);
    } catch (...) {
        throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
    }
}

double parse_real(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument("trailing");
        return x;
    } catch (...) {
        throw ConfigError("config: '" + key + "' expects a real number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: '" + key + "' expects true/false, got '" + v + "'");
}

std::vector<std::uint64_t> parse_seeds(const std::string& v) {
    std::vector<std::uint64_t> out;
    std::istringstream is(v);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        try {
            out.push_back(std::stoull(tok));
        } catch (...) {
            throw ConfigError("config: 'run.seeds' expects comma-separated integers");
        }
    }
    return out;
}

} // namespace

ExperimentConfig default_experiment() { return ExperimentConfig{}; }

void ExperimentConfig::finalize() {
    world.validate();
    encoder.patchwise = world.patch_grid > 0;
    if (encoder.featurizer == FeaturizerKind::Identity) {
        encoder.feature_dim = world.observation_dim;
    }
    encoder.validate(world.patch_grid > 0 ? world.patch_grid : 1);
    train.validate();
    if (seeds.empty()) throw ConfigError("config: run.seeds must be non-empty");
    std::vector<std::uint64_t> sorted = seeds;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        throw ConfigError("config: run.seeds must be distinct");
    }
}

void apply_config_entry(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    // world
    if (key == "world.scene_dims") cfg.world.scene_dims = parse_count(key, value);
    else if (key == "world.num_objects") cfg.world.num_objects = parse_count(key, value);
    else if (key == "world.props_per_object") cfg.world.props_per_object = parse_count(key, value);
    else if (key == "world.actions") cfg.world.actions = value;
    else if (key == "world.delta_magnitude") cfg.world.delta_magnitude = parse_real(key, value);
    else if (key == "world.intervention_noise") cfg.world.intervention_noise = parse_real(key, value);
    else if (key == "world.confounding") cfg.world.confounding = parse_real(key, value);
    else if (key == "world.pairs_per_split") cfg.world.pairs_per_split = parse_count(key, value);
    else if (key == "world.observation_dim") cfg.world.observation_dim = parse_count(key, value);
    else if (key == "world.patch_grid") cfg.world.patch_grid = parse_count(key, value);
    else if (key == "world.holdout_objects") cfg.world.holdout_objects = parse_count(key, value);
    else if (key == "world.comp_holdout_per_object")
        cfg.world.comp_holdout_per_object = parse_count(key, value);
    else if (key == "world.shift_block_width") cfg.world.shift_block_width = parse_count(key, value);
    else if (key == "world.noise_all_coords") cfg.world.noise_all_coords = parse_bool(key, value);
    else if (key == "world.render_object_specificity")
        cfg.world.render_object_specificity = parse_real(key, value);
    else if (key == "world.seed") cfg.world.seed = std::stoull(value);
    // encoder
    else if (key == "encoder.featurizer") {
        if (value == "identity") cfg.encoder.featurizer = FeaturizerKind::Identity;
        else if (value == "random") cfg.encoder.featurizer = FeaturizerKind::RandomMap;
        else throw ConfigError("config: encoder.featurizer must be identity|random");
    }
    else if (key == "encoder.feature_dim") cfg.encoder.feature_dim = parse_count(key, value);
    else if (key == "encoder.embedding_dim") cfg.encoder.embedding_dim = parse_count(key, value);
    else if (key == "encoder.projector_hidden") cfg.encoder.projector_hidden = parse_count(key, value);
    else if (key == "encoder.top_k") cfg.encoder.top_k = parse_count(key, value);
    else if (key == "encoder.featurizer_trainable")
        cfg.encoder.featurizer_trainable = parse_bool(key, value);
    else if (key == "encoder.straight_through_patches")
        cfg.encoder.straight_through_patches = parse_bool(key, value);
    // train
    else if (key == "train.base_lr") cfg.train.base_lr = parse_real(key, value);
    else if (key == "train.featurizer_lr_scale")
        cfg.train.featurizer_lr_scale = parse_real(key, value);
    else if (key == "train.batch_size") cfg.train.batch_size = parse_count(key, value);
    else if (key == "train.epochs") cfg.train.epochs = parse_count(key, value);
    else if (key == "train.weight_decay") cfg.train.weight_decay = parse_real(key, value);
    // loss
    else if (key == "loss.alpha_contrast") cfg.train.loss.alpha_contrast = parse_real(key, value);
    else if (key == "loss.alpha_sparsity") cfg.train.loss.alpha_sparsity = parse_real(key, value);
    else if (key == "loss.temperature") cfg.train.loss.temperature = parse_real(key, value);
    // run
    else if (key == "run.seeds") cfg.seeds = parse_seeds(value);
    else if (key == "run.output_dir") cfg.output_dir = value;
    else throw ConfigError("config: unknown key '" + key + "'");
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    ExperimentConfig cfg = default_experiment();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: line " + std::to_string(lineno) +
                              " is not 'key = value': " + line);
        }
        apply_config_entry(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

std::string config_reference() {
    return R"(# Experiment config keys (key = value per line, '#' comments).
# Defaults shown; world/encoder/train defaults follow the standard recipe.
world.scene_dims = 2                # scene-level latent dims (S)
world.num_objects = 6               # object slots (N)
world.props_per_object = 4          # properties per object (K)
world.actions = open:close,turn_on:turn_off,fill:empty   # "a:b" = inverse pair
world.delta_magnitude = 1.0         # latent shift per action (m)
world.intervention_noise = 0.01     # sigma on the shifted coordinate
world.confounding = 0.9             # rho: object->action skew in training
world.pairs_per_split = 512         # pairs per split (M)
world.observation_dim = 64          # d (per patch when patch_grid > 0)
world.patch_grid = 0                # patches per image; 0 = global
world.holdout_objects = 0           # systematic holdout; 0 = max(1, N/3)
world.comp_holdout_per_object = 2   # compositional holdout actions per object
world.shift_block_width = 1         # latent coordinates shifted per action
world.noise_all_coords = false      # sigma over the whole property block
world.render_object_specificity = 0.5  # 0 = shared render directions, 1 = per-object
world.seed = 7                      # dataset seed
encoder.featurizer = random         # identity | random
encoder.feature_dim = 64            # random featurizer width
encoder.embedding_dim = 256         # l (Epic-Kitchens-scale alternate: 512)
encoder.projector_hidden = 0        # 0 = 4 * embedding_dim
encoder.top_k = 4                   # patch aggregation k
encoder.featurizer_trainable = false
encoder.straight_through_patches = false
train.base_lr = 1e-4
train.featurizer_lr_scale = 0.1
train.batch_size = 128
train.epochs = 50                   # (Epic-Kitchens-scale alternate: 100)
train.weight_decay = 0.05
loss.alpha_contrast = 2.0
loss.alpha_sparsity = 1.0
loss.temperature = 0.07
run.seeds = 1,2,3
run.output_dir =                    # default: $CDE_OUTPUT_ROOT or ./runs
)";
}

json experiment_to_json(const ExperimentConfig& cfg) {
    json enc{{"featurizer",
              cfg.encoder.featurizer == FeaturizerKind::Identity ? "identity" : "random"},
             {"feature_dim", cfg.encoder.feature_dim},
             {"embedding_dim", cfg.encoder.embedding_dim},
             {"projector_hidden", cfg.encoder.projector_hidden},
             {"patchwise", cfg.encoder.patchwise},
             {"top_k", cfg.encoder.top_k},
             {"featurizer_trainable", cfg.encoder.featurizer_trainable},
             {"straight_through_patches", cfg.encoder.straight_through_patches}};
    json tr{{"base_lr", cfg.train.base_lr},
            {"featurizer_lr_scale", cfg.train.featurizer_lr_scale},
            {"batch_size", cfg.train.batch_size},
            {"epochs", cfg.train.epochs},
            {"weight_decay", cfg.train.weight_decay},
            {"alpha_contrast", cfg.train.loss.alpha_contrast},
            {"alpha_sparsity", cfg.train.loss.alpha_sparsity},
            {"temperature", cfg.train.loss.temperature}};
    return json{{"world", world_config_to_json(cfg.world)},
                {"encoder", enc},
                {"train", tr},
                {"seeds", cfg.seeds}};
}

} // namespace cde
