#include "cde/report.hpp"

#include "cde/errors.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace cde {

using nlohmann::json;

namespace {
json optional_vec_to_json(const std::vector<std::optional<double>>& v) {
    json out = json::array();
    for (const auto& x : v) {
        if (x) out.push_back(*x);
        else out.push_back(nullptr);
    }
    return out;
}
} // namespace

json metrics_to_json(const MetricsReport& r, const std::vector<std::string>& action_names) {
    json proto_rows = json::array();
    json proto_valid = json::array();
    const std::size_t A = r.prototype_similarity.values.rows();
    for (std::size_t a = 0; a < A; ++a) {
        json row = json::array(), vrow = json::array();
        for (std::size_t b = 0; b < A; ++b) {
            row.push_back(r.prototype_similarity.values.at(a, b));
            vrow.push_back(static_cast<bool>(r.prototype_similarity.valid[a * A + b]));
        }
        proto_rows.push_back(std::move(row));
        proto_valid.push_back(std::move(vrow));
    }
    json j{{"actions", action_names},
           {"iid_accuracy", r.iid_accuracy},
           {"ood_comp_accuracy", r.ood_comp_accuracy},
           {"ood_syst_accuracy", r.ood_syst_accuracy},
           {"gap_comp", r.gap_comp},
           {"gap_syst", r.gap_syst},
           {"knn_accuracy", r.knn_accuracy},
           {"transfer_similarity", r.transfer_similarity},
           {"delta_variance_iid", optional_vec_to_json(r.variance_iid)},
           {"prototype_similarity", proto_rows},
           {"prototype_similarity_valid", proto_valid},
           {"prototype_counts", r.prototype_counts}};
    if (r.top1_patch_locality) j["top1_patch_locality"] = *r.top1_patch_locality;
    return j;
}

MetricsReport metrics_from_json(const json& j) {
    MetricsReport r;
    j.at("iid_accuracy").get_to(r.iid_accuracy);
    j.at("ood_comp_accuracy").get_to(r.ood_comp_accuracy);
    j.at("ood_syst_accuracy").get_to(r.ood_syst_accuracy);
    j.at("gap_comp").get_to(r.gap_comp);
    j.at("gap_syst").get_to(r.gap_syst);
    r.knn_accuracy = j.at("knn_accuracy").get<std::map<std::string, double>>();
    r.transfer_similarity = j.at("transfer_similarity").get<std::map<std::string, double>>();
    for (const auto& x : j.at("delta_variance_iid")) {
        if (x.is_null()) r.variance_iid.push_back(std::nullopt);
        else r.variance_iid.push_back(x.get<double>());
    }
    const auto& rows = j.at("prototype_similarity");
    const std::size_t A = rows.size();
    r.prototype_similarity.values = Tensor::zeros({A, A});
    r.prototype_similarity.valid.assign(A * A, false);
    for (std::size_t a = 0; a < A; ++a) {
        for (std::size_t b = 0; b < A; ++b) {
            r.prototype_similarity.values.at(a, b) = rows[a][b].get<double>();
            r.prototype_similarity.valid[a * A + b] =
                j.at("prototype_similarity_valid")[a][b].get<bool>();
        }
    }
    j.at("prototype_counts").get_to(r.prototype_counts);
    if (j.contains("top1_patch_locality")) {
        r.top1_patch_locality = j.at("top1_patch_locality").get<double>();
    }
    return r;
}

void write_report(const std::string& path, const MetricsReport& report, std::uint64_t seed,
                  const std::string& manifest_hash, const ExperimentConfig& cfg,
                  const TrainResult& trace, const std::vector<std::string>& action_names) {
    json j{{"format", 1},
           {"seed", seed},
           {"manifest_hash", manifest_hash},
           {"config", experiment_to_json(cfg)},
           {"metrics", metrics_to_json(report, action_names)},
           {"loss_trace", trace.epoch_mean_loss}};
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write report " + path);
    os << j.dump(2) << '\n';
}

LoadedReport load_report(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open report " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw IoError("report parse error in " + path + ": " + e.what());
    }
    LoadedReport out;
    out.metrics = metrics_from_json(j.at("metrics"));
    out.seed = j.at("seed").get<std::uint64_t>();
    out.manifest_hash = j.at("manifest_hash").get<std::string>();
    j.at("metrics").at("actions").get_to(out.action_names);
    return out;
}

namespace {
void for_each_metric(const MetricsReport& r, const std::vector<std::string>& action_names,
                     const std::function<void(const std::string&, const std::string&, double)>& fn) {
    fn("accuracy", "iid_test", r.iid_accuracy);
    fn("accuracy", "ood_compositional", r.ood_comp_accuracy);
    fn("accuracy", "ood_systematic", r.ood_syst_accuracy);
    fn("gap", "ood_compositional", r.gap_comp);
    fn("gap", "ood_systematic", r.gap_syst);
    for (const auto& [split, v] : r.knn_accuracy) fn("knn_accuracy", split, v);
    for (const auto& [split, v] : r.transfer_similarity) fn("transfer_similarity", split, v);
    for (std::size_t a = 0; a < r.variance_iid.size(); ++a) {
        if (!r.variance_iid[a]) continue;
        const std::string name =
            a < action_names.size() ? action_names[a] : "action" + std::to_string(a);
        fn("delta_variance." + name, "iid_test", *r.variance_iid[a]);
    }
    if (r.top1_patch_locality) fn("top1_patch_locality", "eval", *r.top1_patch_locality);
}
} // namespace

void append_metrics_csv(std::ostream& os, const MetricsReport& report, std::uint64_t seed,
                        const std::vector<std::string>& action_names, bool header) {
    if (header) os << "metric,split,seed,value\n";
    for_each_metric(report, action_names,
                    [&](const std::string& metric, const std::string& split, double v) {
                        os << metric << ',' << split << ',' << seed << ',' << v << '\n';
                    });
}

std::vector<AggregateEntry> aggregate_reports(const std::vector<LoadedReport>& reports) {
    if (reports.empty()) throw ConfigError("aggregate_reports: no reports");
    // Keyed by (metric, split); insertion order preserved for stable output.
    std::vector<AggregateEntry> entries;
    std::map<std::pair<std::string, std::string>, std::vector<double>> values;
    std::vector<std::pair<std::string, std::string>> order;
    for (const auto& rep : reports) {
        for_each_metric(rep.metrics, rep.action_names,
                        [&](const std::string& metric, const std::string& split, double v) {
                            const auto key = std::make_pair(metric, split);
                            if (values.find(key) == values.end()) order.push_back(key);
                            values[key].push_back(v);
                        });
    }
    for (const auto& key : order) {
        const auto& vs = values[key];
        AggregateEntry e;
        e.metric = key.first;
        e.split = key.second;
        e.n = vs.size();
        for (double v : vs) e.mean += v;
        e.mean /= static_cast<double>(vs.size());
        if (vs.size() > 1) {
            double ss = 0.0;
            for (double v : vs) ss += (v - e.mean) * (v - e.mean);
            e.stddev = std::sqrt(ss / static_cast<double>(vs.size() - 1));
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

void write_aggregate(const std::string& json_path, const std::string& csv_path,
                     const std::vector<AggregateEntry>& entries, std::size_t num_seeds) {
    json rows = json::array();
    for (const auto& e : entries) {
        json row{{"metric", e.metric}, {"split", e.split},   {"mean", e.mean},
                 {"std", e.stddev},    {"n", e.n}};
        if (e.n == 1) row["single_seed"] = true;
        rows.push_back(std::move(row));
    }
    json j{{"format", 1}, {"num_seeds", num_seeds}, {"entries", rows}};
    std::ofstream os(json_path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + json_path);
    os << j.dump(2) << '\n';

    std::ofstream cs(csv_path, std::ios::binary | std::ios::trunc);
    if (!cs) throw IoError("cannot write " + csv_path);
    cs << "metric,split,mean,std,n,flag\n";
    for (const auto& e : entries) {
        cs << e.metric << ',' << e.split << ',' << e.mean << ',' << e.stddev << ',' << e.n << ','
           << (e.n == 1 ? "single_seed" : "") << '\n';
    }
}

} // namespace cde
