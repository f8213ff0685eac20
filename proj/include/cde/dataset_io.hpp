#pragma once

#include "cde/scm.hpp"

#include <nlohmann/json_fwd.hpp>
#include <string>

namespace cde {

/// Record layout per pair: one ASCII header line
///   "pair <rows> <cols> <action> <object> <oracle 0|1> <latent_dim>\n"
/// followed by raw little-endian payload (x, x_post as float32; oracle pre /
/// post latents as float64) and a terminating newline.
void save_pairs(const std::string& path, const std::vector<InterventionPair>& pairs);
std::vector<InterventionPair> load_pairs(const std::string& path);

/// Writes one file per split plus manifest.json into `dir`.
void save_dataset(const std::string& dir, const DatasetSplit& ds, const WorldConfig& config);

struct LoadedDataset {
    DatasetSplit split;
    WorldConfig config;
    std::string manifest_hash;
};
LoadedDataset load_dataset(const std::string& dir);

nlohmann::json world_config_to_json(const WorldConfig& c);
WorldConfig world_config_from_json(const nlohmann::json& j);
nlohmann::json manifest_to_json(const SplitManifest& m, const WorldConfig& c);

/// FNV-1a 64 of the serialized manifest; identifies a dataset across runs.
std::string fnv1a_hex(const std::string& bytes);
std::string dataset_manifest_hash(const std::string& dir);

} // namespace cde
