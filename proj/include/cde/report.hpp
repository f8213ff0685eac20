#pragma once

#include "cde/config.hpp"
#include "cde/evalsuite.hpp"

#include <nlohmann/json_fwd.hpp>
#include <string>
#include <vector>

namespace cde {

nlohmann::json metrics_to_json(const MetricsReport& report,
                               const std::vector<std::string>& action_names);
MetricsReport metrics_from_json(const nlohmann::json& j);

/// One report document per (config, seed) run.
void write_report(const std::string& path, const MetricsReport& report, std::uint64_t seed,
                  const std::string& manifest_hash, const ExperimentConfig& cfg,
                  const TrainResult& trace, const std::vector<std::string>& action_names);

struct LoadedReport {
    MetricsReport metrics;
    std::uint64_t seed = 0;
    std::string manifest_hash;
    std::vector<std::string> action_names;
};
LoadedReport load_report(const std::string& path);

/// Flat (metric, split, seed, value) rows; `header` writes the column line.
void append_metrics_csv(std::ostream& os, const MetricsReport& report, std::uint64_t seed,
                        const std::vector<std::string>& action_names, bool header);

struct AggregateEntry {
    std::string metric;
    std::string split;
    double mean = 0.0;
    double stddev = 0.0; // unbiased; 0 and flagged when n == 1
    std::size_t n = 0;
};

/// Mean +- std per (metric, split) across per-seed reports.
std::vector<AggregateEntry> aggregate_reports(const std::vector<LoadedReport>& reports);
void write_aggregate(const std::string& json_path, const std::string& csv_path,
                     const std::vector<AggregateEntry>& entries, std::size_t num_seeds);

} // namespace cde
