#include "cde/dataset_io.hpp"

#include "cde/errors.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace cde {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
void write_raw(std::ostream& os, const std::vector<T>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
void read_raw(std::istream& is, std::vector<T>& v, std::size_t count, const std::string& path) {
    v.resize(count);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(T)));
    if (!is) throw IoError("truncated record payload in " + path);
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

} // namespace

void save_pairs(const std::string& path, const std::vector<InterventionPair>& pairs) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    for (const auto& p : pairs) {
        const std::size_t latent_dim = p.oracle ? p.oracle->pre.size() : 0;
        os << "pair " << p.rows << ' ' << p.cols << ' ' << p.action << ' ' << p.object << ' '
           << (p.oracle ? 1 : 0) << ' ' << latent_dim << '\n';
        write_raw(os, p.x);
        write_raw(os, p.x_post);
        if (p.oracle) {
            write_raw(os, p.oracle->pre);
            write_raw(os, p.oracle->post);
        }
        os << '\n';
    }
    if (!os) throw IoError("write failed for " + path);
}

std::vector<InterventionPair> load_pairs(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    std::vector<InterventionPair> out;
    std::string header;
    while (std::getline(is, header)) {
        if (header.empty()) continue;
        std::istringstream hs(header);
        std::string tag;
        InterventionPair p;
        int has_oracle = 0;
        std::size_t latent_dim = 0;
        hs >> tag >> p.rows >> p.cols >> p.action >> p.object >> has_oracle >> latent_dim;
        if (!hs || tag != "pair") throw IoError("malformed record header in " + path);
        const std::size_t n = static_cast<std::size_t>(p.rows) * p.cols;
        read_raw(is, p.x, n, path);
        read_raw(is, p.x_post, n, path);
        if (has_oracle) {
            OracleLatents oracle;
            read_raw(is, oracle.pre, latent_dim, path);
            read_raw(is, oracle.post, latent_dim, path);
            p.oracle = std::move(oracle);
        }
        const int sep = is.get();
        if (sep != '\n') throw IoError("missing record terminator in " + path);
        out.push_back(std::move(p));
    }
    return out;
}

json world_config_to_json(const WorldConfig& c) {
    return json{{"scene_dims", c.scene_dims},
                {"num_objects", c.num_objects},
                {"props_per_object", c.props_per_object},
                {"actions", c.actions},
                {"delta_magnitude", c.delta_magnitude},
                {"intervention_noise", c.intervention_noise},
                {"confounding", c.confounding},
                {"pairs_per_split", c.pairs_per_split},
                {"observation_dim", c.observation_dim},
                {"patch_grid", c.patch_grid},
                {"holdout_objects", c.holdout_objects},
                {"comp_holdout_per_object", c.comp_holdout_per_object},
                {"shift_block_width", c.shift_block_width},
                {"noise_all_coords", c.noise_all_coords},
                {"render_object_specificity", c.render_object_specificity},
                {"seed", c.seed}};
}

WorldConfig world_config_from_json(const json& j) {
    WorldConfig c;
    j.at("scene_dims").get_to(c.scene_dims);
    j.at("num_objects").get_to(c.num_objects);
    j.at("props_per_object").get_to(c.props_per_object);
    j.at("actions").get_to(c.actions);
    j.at("delta_magnitude").get_to(c.delta_magnitude);
    j.at("intervention_noise").get_to(c.intervention_noise);
    j.at("confounding").get_to(c.confounding);
    j.at("pairs_per_split").get_to(c.pairs_per_split);
    j.at("observation_dim").get_to(c.observation_dim);
    j.at("patch_grid").get_to(c.patch_grid);
    j.at("holdout_objects").get_to(c.holdout_objects);
    j.at("comp_holdout_per_object").get_to(c.comp_holdout_per_object);
    j.at("shift_block_width").get_to(c.shift_block_width);
    j.at("noise_all_coords").get_to(c.noise_all_coords);
    j.at("render_object_specificity").get_to(c.render_object_specificity);
    j.at("seed").get_to(c.seed);
    return c;
}

json manifest_to_json(const SplitManifest& m, const WorldConfig& c) {
    return json{{"format", 1},
                {"world", world_config_to_json(c)},
                {"train_objects", m.train_objects},
                {"test_objects", m.test_objects},
                {"preferred_actions", m.preferred_actions},
                {"holdout_actions", m.holdout_actions},
                {"allowed_actions", m.allowed_actions},
                {"patch_of_object_begin", m.patch_of_object_begin},
                {"patch_of_object_end", m.patch_of_object_end}};
}

void save_dataset(const std::string& dir, const DatasetSplit& ds, const WorldConfig& config) {
    fs::create_directories(dir);
    for (const char* name : kSplitNames) {
        save_pairs((fs::path(dir) / (std::string(name) + ".pairs")).string(), ds.by_name(name));
    }
    std::ofstream os(fs::path(dir) / "manifest.json", std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write manifest in " + dir);
    os << manifest_to_json(ds.manifest, config).dump(2) << '\n';
}

LoadedDataset load_dataset(const std::string& dir) {
    const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
    const std::string manifest_bytes = read_file(manifest_path);
    json j = json::parse(manifest_bytes);

    LoadedDataset out;
    out.config = world_config_from_json(j.at("world"));
    out.manifest_hash = fnv1a_hex(manifest_bytes);

    SplitManifest& m = out.split.manifest;
    j.at("train_objects").get_to(m.train_objects);
    j.at("test_objects").get_to(m.test_objects);
    j.at("preferred_actions").get_to(m.preferred_actions);
    j.at("holdout_actions").get_to(m.holdout_actions);
    j.at("allowed_actions").get_to(m.allowed_actions);
    j.at("patch_of_object_begin").get_to(m.patch_of_object_begin);
    j.at("patch_of_object_end").get_to(m.patch_of_object_end);

    out.split.train = load_pairs((fs::path(dir) / "train.pairs").string());
    out.split.iid_test = load_pairs((fs::path(dir) / "iid_test.pairs").string());
    out.split.ood_compositional =
        load_pairs((fs::path(dir) / "ood_compositional.pairs").string());
    out.split.ood_systematic = load_pairs((fs::path(dir) / "ood_systematic.pairs").string());
    return out;
}

std::string fnv1a_hex(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

std::string dataset_manifest_hash(const std::string& dir) {
    return fnv1a_hex(read_file((fs::path(dir) / "manifest.json").string()));
}

} // namespace cde
