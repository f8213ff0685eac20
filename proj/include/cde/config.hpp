#pragma once

#include "cde/model.hpp"
#include "cde/scm.hpp"

#include <nlohmann/json_fwd.hpp>
#include <cstdint>
#include <string>
#include <vector>

namespace cde {

struct ExperimentConfig {
    WorldConfig world;
    EncoderConfig encoder;
    TrainHyper train;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::string output_dir;

    /// Validates sub-configs, syncs encoder.patchwise with the world's patch
    /// grid, and checks the seed list (non-empty, distinct).
    void finalize();
};

ExperimentConfig default_experiment();

/// Flat "key = value" file; '#' starts a comment. Unknown keys are errors.
ExperimentConfig parse_config_file(const std::string& path);
/// Applies one key=value assignment (also used for CLI overrides).
void apply_config_entry(ExperimentConfig& cfg, const std::string& key, const std::string& value);

/// Documented key list with defaults, printed by the CLI.
std::string config_reference();

nlohmann::json experiment_to_json(const ExperimentConfig& cfg);

} // namespace cde
