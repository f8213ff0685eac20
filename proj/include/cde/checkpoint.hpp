#pragma once

#include "cde/model.hpp"

#include <cstdint>
#include <string>

namespace cde {

/// Internal: rebuilds a model from deserialized parts (validates shapes).
CdeModel checkpoint_assemble(EncoderConfig cfg, std::size_t input_dim, std::size_t patch_count,
                             std::size_t num_actions, std::vector<CdeModel::ParamSpec> params,
                             Tensor norm_mean, Tensor norm_std);

struct LoadedCheckpoint {
    CdeModel model;
    std::uint64_t seed = 0;
    TrainResult trace;
};

/// Text JSON header (config, seed, loss trace, parameter shapes) followed by
/// raw little-endian float64 arrays: normalizer mean, normalizer std, then
/// every parameter in declaration order. Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const CdeModel& model, std::uint64_t seed,
                     const TrainResult& trace);

LoadedCheckpoint load_checkpoint(const std::string& path);

/// Rejects checkpoints whose variant or observation width does not match the
/// dataset they are being evaluated against.
void ensure_checkpoint_matches(const CdeModel& model, const WorldConfig& dataset_config);

} // namespace cde
