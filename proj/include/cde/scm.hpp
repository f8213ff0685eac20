#pragma once

#include "cde/rng.hpp"
#include "cde/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace cde {

/// One action: its name, the property index it shifts, the shift sign, and
/// the index of its declared inverse (-1 if none). Inverse actions share the
/// property index and have opposite signs.
struct ActionSpec {
    std::string name;
    std::size_t property = 0;
    int direction = +1;
    int inverse = -1;
};

struct WorldConfig {
    std::size_t scene_dims = 2;        // S
    std::size_t num_objects = 6;       // N
    std::size_t props_per_object = 4;  // K
    /// Action list in declaration order, e.g. "open:close,fill:empty,shake".
    /// "a:b" declares an inverse pair; a bare name is an unpaired action.
    std::string actions = "open:close,turn_on:turn_off,fill:empty";
    double delta_magnitude = 1.0;      // m
    double intervention_noise = 0.01;  // sigma
    double confounding = 0.9;          // rho
    std::size_t pairs_per_split = 512; // M
    std::size_t observation_dim = 64;  // d (per patch when patch_grid > 0)
    std::size_t patch_grid = 0;        // P; 0 = global observations
    std::size_t holdout_objects = 0;   // systematic holdout count; 0 = max(1, N/3)
    std::size_t comp_holdout_per_object = 2;
    std::size_t shift_block_width = 1; // coordinates shifted per action
    bool noise_all_coords = false;     // sigma on the whole latent vector instead
    /// How object-specific the rendered property directions are, in [0,1].
    /// The renderer column for property k of object n is
    /// sqrt(1-g^2)*c_k + g*r_{n,k} with c_k shared across objects. 0 renders
    /// a property identically for every object; 1 gives every object an
    /// unrelated direction (no cross-object structure to transfer).
    double render_object_specificity = 0.5;
    std::uint64_t seed = 7;

    std::size_t latent_dim() const { return scene_dims + num_objects * props_per_object; }
    std::size_t systematic_holdout() const {
        return holdout_objects > 0 ? holdout_objects : std::max<std::size_t>(1, num_objects / 3);
    }
    std::size_t train_object_count() const { return num_objects - systematic_holdout(); }

    /// Throws ConfigError naming the violated constraint.
    void validate() const;
    std::vector<ActionSpec> parse_actions() const;
};

/// Scene variables plus the N x K object-property matrix.
struct LatentState {
    Tensor scene;   // [S]
    Tensor objects; // [N, K]
};

/// The sparse latent shift an (action, object) intervention applies.
struct GroundTruthDelta {
    std::size_t action = 0;
    std::size_t object = 0;
    std::size_t property = 0;
    int direction = +1;
    double magnitude = 1.0;

    /// The shift as a K-vector over the intervened object's property block:
    /// one-hot at `property` with value direction * magnitude.
    Tensor property_block(std::size_t props_per_object) const;
};

struct OracleLatents {
    std::vector<double> pre;  // flattened [scene | objects]
    std::vector<double> post;
};

/// One pre/post observation pair. Observations are stored as float32, the
/// same precision they are serialized at, so a generated dataset and a
/// reloaded one feed the model identical numbers.
struct InterventionPair {
    std::vector<float> x;      // [d] or [P * d]
    std::vector<float> x_post;
    std::uint32_t rows = 1;    // P for patch observations, 1 for global
    std::uint32_t cols = 0;    // d
    std::uint32_t action = 0;
    std::uint32_t object = 0;
    std::optional<OracleLatents> oracle;
};

/// Per-split object/action tables; everything needed to audit disjointness.
struct SplitManifest {
    std::vector<std::size_t> train_objects;
    std::vector<std::size_t> test_objects;
    std::vector<std::vector<std::size_t>> preferred_actions; // per train object
    std::vector<std::vector<std::size_t>> holdout_actions;   // per train object (compositional)
    std::vector<std::vector<std::size_t>> allowed_actions;   // per train object
    std::vector<std::size_t> patch_of_object_begin;          // patch layout (patch worlds)
    std::vector<std::size_t> patch_of_object_end;
};

struct DatasetSplit {
    std::vector<InterventionPair> train;
    std::vector<InterventionPair> iid_test;
    std::vector<InterventionPair> ood_compositional;
    std::vector<InterventionPair> ood_systematic;
    SplitManifest manifest;

    const std::vector<InterventionPair>& by_name(const std::string& name) const;
};

inline const char* kSplitNames[] = {"train", "iid_test", "ood_compositional", "ood_systematic"};

/// A fully instantiated world: action table, renderer weights, patch layout.
/// All sampling derives per-pair substreams from (seed, split, pair index).
class World {
public:
    explicit World(WorldConfig config);

    const WorldConfig& config() const { return config_; }
    const std::vector<ActionSpec>& actions() const { return actions_; }
    std::size_t num_actions() const { return actions_.size(); }
    bool patchwise() const { return config_.patch_grid > 0; }
    std::size_t patch_count() const { return patchwise() ? config_.patch_grid : 1; }
    /// Object owning patch p (patch worlds).
    std::size_t object_of_patch(std::size_t p) const;
    std::vector<std::size_t> patches_of_object(std::size_t n) const;

    LatentState sample_latents(RngStream& rng) const;
    LatentState apply_intervention(const LatentState& z, std::size_t action, std::size_t object,
                                   RngStream& rng) const;
    /// Global: [d]. Patch: [P, d], row p mixing scene latents with the
    /// owning object's property block.
    Tensor render(const LatentState& z) const;

    DatasetSplit make_splits() const;

    /// Flattened [scene | objects] copy, used by the oracle records.
    static std::vector<double> flatten(const LatentState& z);

private:
    struct PatchRenderer {
        Tensor w1, b1, w2, b2; // two-layer tanh map
    };

    Tensor render_block(const PatchRenderer& r, const std::vector<double>& input) const;
    InterventionPair make_pair(std::size_t action, std::size_t object, RngStream& rng) const;
    void sample_train_combo(RngStream& rng, const SplitManifest& man, std::size_t& object,
                            std::size_t& action) const;

    WorldConfig config_;
    std::vector<ActionSpec> actions_;
    std::vector<PatchRenderer> renderers_; // one (global) or P (patch)
    std::vector<std::size_t> patch_owner_;
};

} // namespace cde
