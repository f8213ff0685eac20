#include "cde/experiment.hpp"

#include "cde/checkpoint.hpp"
#include "cde/dataset_io.hpp"
#include "cde/errors.hpp"
#include "cde/heatmap.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace cde {

namespace fs = std::filesystem;

std::vector<std::string> action_names_of(const WorldConfig& world) {
    std::vector<std::string> names;
    for (const auto& a : world.parse_actions()) names.push_back(a.name);
    return names;
}

namespace {

template <typename Fn>
auto stage(const char* name, Fn&& fn) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

LoadedDataset ensure_dataset(const WorldConfig& world, const std::string& dir) {
    if (fs::exists(fs::path(dir) / "manifest.json")) {
        LoadedDataset loaded = load_dataset(dir);
        return loaded;
    }
    World w(world);
    DatasetSplit ds = w.make_splits();
    save_dataset(dir, ds, world);
    LoadedDataset out;
    out.split = std::move(ds);
    out.config = world;
    out.manifest_hash = dataset_manifest_hash(dir);
    return out;
}

} // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg_in, const std::string& dataset_dir) {
    ExperimentConfig cfg = cfg_in;
    cfg.finalize();
    if (cfg.output_dir.empty()) throw ConfigError("run_experiment: output_dir not set");
    fs::create_directories(cfg.output_dir);

    ExperimentResult result;
    result.dataset_dir =
        dataset_dir.empty() ? (fs::path(cfg.output_dir) / "dataset").string() : dataset_dir;

    const LoadedDataset dataset =
        stage("dataset", [&] { return ensure_dataset(cfg.world, result.dataset_dir); });
    result.manifest_hash = dataset.manifest_hash;
    const std::vector<std::string> action_names = action_names_of(cfg.world);

    const std::string csv_path = (fs::path(cfg.output_dir) / "reports.csv").string();
    std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
    if (!csv) throw StageError("report", "cannot write " + csv_path);

    std::vector<LoadedReport> loaded_reports;
    bool first = true;
    for (std::uint64_t seed : cfg.seeds) {
        const fs::path seed_dir = fs::path(cfg.output_dir) / ("seed" + std::to_string(seed));
        fs::create_directories(seed_dir);

        SeedRunResult run;
        run.seed = seed;

        CdeModel model = stage("train", [&] {
            CdeModel m = CdeModel::build(cfg.encoder, cfg.world.observation_dim,
                                         cfg.world.patch_grid > 0 ? cfg.world.patch_grid : 1,
                                         action_names.size(), seed);
            TrainHyper hyper = cfg.train;
            hyper.seed = seed;
            const TrainResult trace = train(m, dataset.split, hyper);
            run.checkpoint_path = (seed_dir / "checkpoint.cdeckpt").string();
            save_checkpoint(run.checkpoint_path, m, seed, trace);
            return m;
        });

        run.report = stage("eval", [&] { return evaluate(model, dataset.split); });

        stage("report", [&] {
            run.report_path = (seed_dir / "report.json").string();
            const LoadedCheckpoint ck = load_checkpoint(run.checkpoint_path);
            write_report(run.report_path, run.report, seed, dataset.manifest_hash, cfg, ck.trace,
                         action_names);
            append_metrics_csv(csv, run.report, seed, action_names, first);
            first = false;
            LoadedReport lr;
            lr.metrics = run.report;
            lr.seed = seed;
            lr.manifest_hash = dataset.manifest_hash;
            lr.action_names = action_names;
            loaded_reports.push_back(std::move(lr));
            return 0;
        });
        result.per_seed.push_back(std::move(run));
    }

    stage("aggregate", [&] {
        const auto entries = aggregate_reports(loaded_reports);
        result.aggregate_json = (fs::path(cfg.output_dir) / "aggregate.json").string();
        result.aggregate_csv = (fs::path(cfg.output_dir) / "aggregate.csv").string();
        write_aggregate(result.aggregate_json, result.aggregate_csv, entries, cfg.seeds.size());
        return 0;
    });
    return result;
}

void AblationGrid::validate() const {
    if (axis != "components" && axis != "alphas" && axis != "topk") {
        throw ConfigError("ablation: axis must be components|alphas|topk, got '" + axis + "'");
    }
    if (values.empty()) throw ConfigError("ablation: empty value list");
    for (const auto& v : values) {
        if (axis == "components") {
            if (v != "full" && v != "wo_contrast" && v != "wo_sparsity" && v != "ce_only") {
                throw ConfigError("ablation: component point must be "
                                  "full|wo_contrast|wo_sparsity|ce_only, got '" + v + "'");
            }
        } else if (axis == "alphas") {
            if (v.find(':') == std::string::npos) {
                throw ConfigError("ablation: alpha point must be '<contrast>:<sparsity>', got '" +
                                  v + "'");
            }
        } else {
            try {
                if (std::stoul(v) < 1) throw std::invalid_argument("k");
            } catch (...) {
                throw ConfigError("ablation: topk point must be a positive integer, got '" + v +
                                  "'");
            }
        }
    }
}

ExperimentConfig ablation_point_config(const ExperimentConfig& base, const std::string& axis,
                                       const std::string& value) {
    ExperimentConfig cfg = base;
    if (axis == "components") {
        if (value == "wo_contrast" || value == "ce_only") cfg.train.loss.alpha_contrast = 0.0;
        if (value == "wo_sparsity" || value == "ce_only") cfg.train.loss.alpha_sparsity = 0.0;
    } else if (axis == "alphas") {
        const auto colon = value.find(':');
        cfg.train.loss.alpha_contrast = std::stod(value.substr(0, colon));
        cfg.train.loss.alpha_sparsity = std::stod(value.substr(colon + 1));
    } else if (axis == "topk") {
        cfg.encoder.top_k = std::stoul(value);
    } else {
        throw ConfigError("ablation: unknown axis '" + axis + "'");
    }
    return cfg;
}

namespace {
std::string sanitize(const std::string& s) {
    std::string out = s;
    for (char& c : out) {
        if (c == ':' || c == '.' || c == '/') c = '_';
    }
    return out;
}

double find_entry(const std::vector<AggregateEntry>& entries, const std::string& metric,
                  const std::string& split, bool want_std) {
    for (const auto& e : entries) {
        if (e.metric == metric && e.split == split) return want_std ? e.stddev : e.mean;
    }
    return std::nan("");
}
} // namespace

AblationResult run_ablation(const ExperimentConfig& base_in, const AblationGrid& grid) {
    grid.validate();
    ExperimentConfig base = base_in;
    base.finalize();
    if (base.output_dir.empty()) throw ConfigError("run_ablation: output_dir not set");
    fs::create_directories(base.output_dir);

    // All points share the base world's dataset.
    const std::string dataset_dir = (fs::path(base.output_dir) / "dataset").string();

    AblationResult result;
    for (const std::string& value : grid.values) {
        AblationRow row;
        row.point = value;
        try {
            ExperimentConfig cfg = ablation_point_config(base, grid.axis, value);
            cfg.output_dir =
                (fs::path(base.output_dir) / (grid.axis + "_" + sanitize(value))).string();
            const ExperimentResult er = run_experiment(cfg, dataset_dir);
            std::vector<LoadedReport> reports;
            for (const auto& sr : er.per_seed) reports.push_back(load_report(sr.report_path));
            row.aggregate = aggregate_reports(reports);
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
            result.any_failed = true;
        }
        result.rows.push_back(std::move(row));
    }

    result.table_csv = (fs::path(base.output_dir) / "ablation.csv").string();
    std::ofstream os(result.table_csv, std::ios::binary | std::ios::trunc);
    if (!os) throw StageError("report", "cannot write " + result.table_csv);
    os << "point,iid_mean,iid_std,ood_comp_mean,ood_comp_std,ood_syst_mean,ood_syst_std,"
          "gap_syst_mean,status\n";
    for (const auto& row : result.rows) {
        if (row.failed) {
            os << row.point << ",,,,,,,,FAILED\n";
            continue;
        }
        os << row.point << ',' << find_entry(row.aggregate, "accuracy", "iid_test", false) << ','
           << find_entry(row.aggregate, "accuracy", "iid_test", true) << ','
           << find_entry(row.aggregate, "accuracy", "ood_compositional", false) << ','
           << find_entry(row.aggregate, "accuracy", "ood_compositional", true) << ','
           << find_entry(row.aggregate, "accuracy", "ood_systematic", false) << ','
           << find_entry(row.aggregate, "accuracy", "ood_systematic", true) << ','
           << find_entry(row.aggregate, "gap", "ood_systematic", false) << ",ok\n";
    }
    return result;
}

} // namespace cde
