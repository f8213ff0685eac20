#pragma once

#include "cde/config.hpp"
#include "cde/evalsuite.hpp"
#include "cde/report.hpp"

#include <string>
#include <vector>

namespace cde {

/// Thrown by the orchestration layer; `stage` names the failed step.
struct StageError : std::runtime_error {
    std::string stage;
    StageError(std::string stage_name, const std::string& msg)
        : std::runtime_error("[" + stage_name + "] " + msg), stage(std::move(stage_name)) {}
};

struct SeedRunResult {
    std::uint64_t seed = 0;
    MetricsReport report;
    std::string report_path;
    std::string checkpoint_path;
};

struct ExperimentResult {
    std::vector<SeedRunResult> per_seed;
    std::string dataset_dir;
    std::string manifest_hash;
    std::string aggregate_json;
    std::string aggregate_csv;
};

/// Generates (or reuses) the dataset, then trains + evaluates one model per
/// seed, writing seed<k>/report.json, seed<k>/checkpoint.cdeckpt, a combined
/// reports.csv and aggregate files under cfg.output_dir. `dataset_dir`
/// overrides where the dataset lives (ablation points share one).
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& dataset_dir = "");

struct AblationGrid {
    std::string axis;                // components | alphas | topk
    std::vector<std::string> values; // e.g. {"full","ce_only"} / {"2.0:1.0"} / {"1","2"}

    void validate() const;
};

struct AblationRow {
    std::string point;
    bool failed = false;
    std::string error;
    std::vector<AggregateEntry> aggregate;
};

struct AblationResult {
    std::vector<AblationRow> rows;
    std::string table_csv;
    bool any_failed = false;
};

/// One run_experiment per grid point, all sharing the base dataset; emits a
/// comparison CSV with IID/OOD accuracy per point.
AblationResult run_ablation(const ExperimentConfig& base, const AblationGrid& grid);

/// Applies a grid point to a config (exposed for tests).
ExperimentConfig ablation_point_config(const ExperimentConfig& base, const std::string& axis,
                                       const std::string& value);

std::vector<std::string> action_names_of(const WorldConfig& world);

} // namespace cde
