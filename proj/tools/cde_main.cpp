#include "cde/checkpoint.hpp"
#include "cde/config.hpp"
#include "cde/dataset_io.hpp"
#include "cde/errors.hpp"
#include "cde/evalsuite.hpp"
#include "cde/experiment.hpp"
#include "cde/heatmap.hpp"
#include "cde/report.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace cde;

namespace {

std::string output_root() {
    if (const char* env = std::getenv("CDE_OUTPUT_ROOT")) return env;
    return "runs";
}

std::string resolve_out(const std::string& out, const ExperimentConfig& cfg) {
    if (!out.empty()) return fs::path(out).is_absolute() ? out : (fs::path(output_root()) / out).string();
    if (!cfg.output_dir.empty()) return cfg.output_dir;
    return (fs::path(output_root()) / "default").string();
}

ExperimentConfig load_config(const std::string& config_path,
                             const std::vector<std::string>& overrides) {
    ExperimentConfig cfg =
        config_path.empty() ? default_experiment() : parse_config_file(config_path);
    for (const std::string& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        apply_config_entry(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.finalize();
    return cfg;
}

int cmd_generate(const ExperimentConfig& cfg, const std::string& out) {
    const std::string dir = resolve_out(out, cfg);
    World world(cfg.world);
    DatasetSplit ds = world.make_splits();
    save_dataset(dir, ds, cfg.world);
    std::cout << "dataset written to " << dir << " (manifest hash " << dataset_manifest_hash(dir)
              << ")\n";
    return 0;
}

int cmd_train(const ExperimentConfig& cfg_in, const std::string& data_dir, const std::string& out,
              std::int64_t seed_override) {
    ExperimentConfig cfg = cfg_in;
    cfg.output_dir = resolve_out(out, cfg);
    if (seed_override >= 0) cfg.seeds = {static_cast<std::uint64_t>(seed_override)};

    const std::string dataset_dir =
        data_dir.empty() ? (fs::path(cfg.output_dir) / "dataset").string() : data_dir;
    LoadedDataset dataset;
    if (fs::exists(fs::path(dataset_dir) / "manifest.json")) {
        dataset = load_dataset(dataset_dir);
    } else {
        World world(cfg.world);
        dataset.split = world.make_splits();
        dataset.config = cfg.world;
        save_dataset(dataset_dir, dataset.split, cfg.world);
        dataset.manifest_hash = dataset_manifest_hash(dataset_dir);
    }

    const auto names = action_names_of(dataset.config);
    for (std::uint64_t seed : cfg.seeds) {
        CdeModel model = CdeModel::build(
            cfg.encoder, dataset.config.observation_dim,
            dataset.config.patch_grid > 0 ? dataset.config.patch_grid : 1, names.size(), seed);
        TrainHyper hyper = cfg.train;
        hyper.seed = seed;
        const TrainResult trace = train(model, dataset.split, hyper);
        const fs::path seed_dir = fs::path(cfg.output_dir) / ("seed" + std::to_string(seed));
        fs::create_directories(seed_dir);
        const std::string ckpt = (seed_dir / "checkpoint.cdeckpt").string();
        save_checkpoint(ckpt, model, seed, trace);
        std::cout << "seed " << seed << ": trained " << hyper.epochs << " epochs, final loss "
                  << trace.epoch_mean_loss.back() << ", checkpoint " << ckpt << "\n";
    }
    return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint_path,
             const std::string& data_dir, const std::string& out) {
    const std::string out_dir = resolve_out(out, cfg);
    fs::create_directories(out_dir);
    const LoadedDataset dataset = load_dataset(data_dir);
    LoadedCheckpoint ck = load_checkpoint(checkpoint_path);

    ensure_checkpoint_matches(ck.model, dataset.config);

    const MetricsReport report = evaluate(ck.model, dataset.split);
    const auto names = action_names_of(dataset.config);
    const std::string report_path =
        (fs::path(out_dir) / ("report_seed" + std::to_string(ck.seed) + ".json")).string();
    write_report(report_path, report, ck.seed, dataset.manifest_hash, cfg, ck.trace, names);

    const std::string csv_path = (fs::path(out_dir) / "reports.csv").string();
    const bool fresh = !fs::exists(csv_path);
    std::ofstream csv(csv_path, std::ios::binary | std::ios::app);
    append_metrics_csv(csv, report, ck.seed, names, fresh);

    std::cout << "iid=" << report.iid_accuracy << " ood_comp=" << report.ood_comp_accuracy
              << " ood_syst=" << report.ood_syst_accuracy << " gap_syst=" << report.gap_syst
              << "\nreport: " << report_path << "\n";
    return 0;
}

int cmd_ablate(const ExperimentConfig& cfg_in, const std::string& axis,
               const std::string& values_csv, const std::string& out) {
    ExperimentConfig cfg = cfg_in;
    cfg.output_dir = resolve_out(out, cfg);
    AblationGrid grid;
    grid.axis = axis;
    std::istringstream is(values_csv);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        if (!tok.empty()) grid.values.push_back(tok);
    }
    const AblationResult res = run_ablation(cfg, grid);
    std::cout << "ablation table: " << res.table_csv << "\n";
    for (const auto& row : res.rows) {
        std::cout << "  " << row.point << (row.failed ? " FAILED: " + row.error : "") << "\n";
    }
    return res.any_failed ? 2 : 0;
}

int cmd_report(const std::string& runs_dir, const std::string& out) {
    const std::string out_dir = out.empty() ? runs_dir : out;
    fs::create_directories(out_dir);
    std::vector<std::string> report_files;
    for (const auto& entry : fs::recursive_directory_iterator(runs_dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string name = entry.path().filename().string();
        if (name == "report.json" || (name.rfind("report_seed", 0) == 0 &&
                                      entry.path().extension() == ".json")) {
            report_files.push_back(entry.path().string());
        }
    }
    if (report_files.empty()) throw ConfigError("no report files under " + runs_dir);
    std::sort(report_files.begin(), report_files.end());

    std::vector<LoadedReport> reports;
    for (const auto& f : report_files) reports.push_back(load_report(f));

    const auto entries = aggregate_reports(reports);
    write_aggregate((fs::path(out_dir) / "aggregate.json").string(),
                    (fs::path(out_dir) / "aggregate.csv").string(), entries, reports.size());

    for (const auto& rep : reports) {
        const std::string ppm =
            (fs::path(out_dir) / ("prototype_similarity_seed" + std::to_string(rep.seed) + ".ppm"))
                .string();
        const std::size_t clamped =
            emit_heatmap(rep.metrics.prototype_similarity, rep.action_names, ppm);
        if (clamped > 0) {
            std::cerr << "warning: " << clamped << " heatmap entries clamped in " << ppm << "\n";
        }
        std::cout << "heatmap: " << ppm << "\n";
    }
    std::cout << "aggregate over " << reports.size() << " reports -> " << out_dir << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Causal delta embedding laboratory"};
    app.require_subcommand(1);

    std::string config_path, out_dir, data_dir, checkpoint_path, axis, values, runs_dir;
    std::vector<std::string> overrides;
    std::int64_t seed_override = -1;

    auto add_common = [&](CLI::App* sub, bool with_config = true) {
        if (with_config) {
            sub->add_option("--config,-c", config_path, "experiment config file");
            sub->add_option("--set", overrides, "override a config key: --set key=value");
        }
        sub->add_option("--out,-o", out_dir,
                        "output directory (relative paths live under $CDE_OUTPUT_ROOT)");
    };

    auto* gen = app.add_subcommand("generate", "synthesize a dataset from the world config");
    add_common(gen);

    auto* tr = app.add_subcommand("train", "train one model per configured seed");
    add_common(tr);
    tr->add_option("--data", data_dir, "existing dataset directory (default: <out>/dataset)");
    tr->add_option("--seed", seed_override, "train only this seed");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint against a dataset");
    add_common(ev);
    ev->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    ev->add_option("--data", data_dir, "dataset directory")->required();

    auto* ab = app.add_subcommand("ablate", "run an ablation grid sharing one dataset");
    add_common(ab);
    ab->add_option("--axis", axis, "components | alphas | topk")->required();
    ab->add_option("--values", values, "comma-separated grid points")->required();

    auto* rp = app.add_subcommand("report", "aggregate per-seed reports and emit heatmaps");
    rp->add_option("--runs", runs_dir, "directory containing per-seed report JSON files")
        ->required();
    rp->add_option("--out,-o", out_dir, "output directory (default: --runs)");

    auto* rn = app.add_subcommand("run", "generate + train + eval + aggregate in one step");
    add_common(rn);

    auto* cf = app.add_subcommand("config", "print the config key reference");

    CLI11_PARSE(app, argc, argv);

    try {
        if (cf->parsed()) {
            std::cout << config_reference();
            return 0;
        }
        if (rp->parsed()) return cmd_report(runs_dir, out_dir);

        ExperimentConfig cfg = load_config(config_path, overrides);
        if (gen->parsed()) return cmd_generate(cfg, out_dir);
        if (tr->parsed()) return cmd_train(cfg, data_dir, out_dir, seed_override);
        if (ev->parsed()) return cmd_eval(cfg, checkpoint_path, data_dir, out_dir);
        if (ab->parsed()) return cmd_ablate(cfg, axis, values, out_dir);
        if (rn->parsed()) {
            cfg.output_dir = resolve_out(out_dir, cfg);
            const ExperimentResult res = run_experiment(cfg);
            std::cout << "dataset: " << res.dataset_dir << " (hash " << res.manifest_hash
                      << ")\n";
            for (const auto& sr : res.per_seed) {
                std::cout << "seed " << sr.seed << ": iid=" << sr.report.iid_accuracy
                          << " ood_syst=" << sr.report.ood_syst_accuracy << "\n";
            }
            std::cout << "aggregate: " << res.aggregate_json << "\n";
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const StageError& e) {
        std::cerr << "stage '" << e.stage << "' failed: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
