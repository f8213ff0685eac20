#include "cde/checkpoint.hpp"

#include "cde/errors.hpp"

#include <nlohmann/json.hpp>

#include <fstream>

namespace cde {

using nlohmann::json;

namespace {
constexpr char kMagic[] = "CDECKPT1";

json encoder_to_json(const EncoderConfig& c) {
    return json{{"featurizer", c.featurizer == FeaturizerKind::Identity ? "identity" : "random"},
                {"feature_dim", c.feature_dim},
                {"embedding_dim", c.embedding_dim},
                {"projector_hidden", c.projector_hidden},
                {"patchwise", c.patchwise},
                {"top_k", c.top_k},
                {"featurizer_trainable", c.featurizer_trainable},
                {"straight_through_patches", c.straight_through_patches}};
}

EncoderConfig encoder_from_json(const json& j) {
    EncoderConfig c;
    const std::string kind = j.at("featurizer").get<std::string>();
    if (kind == "identity") {
        c.featurizer = FeaturizerKind::Identity;
    } else if (kind == "random") {
        c.featurizer = FeaturizerKind::RandomMap;
    } else {
        throw IoError("checkpoint: unknown featurizer kind '" + kind + "'");
    }
    j.at("feature_dim").get_to(c.feature_dim);
    j.at("embedding_dim").get_to(c.embedding_dim);
    j.at("projector_hidden").get_to(c.projector_hidden);
    j.at("patchwise").get_to(c.patchwise);
    j.at("top_k").get_to(c.top_k);
    j.at("featurizer_trainable").get_to(c.featurizer_trainable);
    j.at("straight_through_patches").get_to(c.straight_through_patches);
    return c;
}

void write_doubles(std::ostream& os, const std::vector<double>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> read_doubles(std::istream& is, std::size_t count, const char* what) {
    std::vector<double> v(count);
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!is) throw IoError(std::string("checkpoint truncated while reading ") + what);
    return v;
}
} // namespace

CdeModel checkpoint_assemble(EncoderConfig cfg, std::size_t input_dim, std::size_t patch_count,
                             std::size_t num_actions, std::vector<CdeModel::ParamSpec> params,
                             Tensor norm_mean, Tensor norm_std) {
    CdeModel fresh = CdeModel::build(cfg, input_dim, patch_count, num_actions, /*seed=*/0);
    if (fresh.params().size() != params.size()) {
        throw IoError("checkpoint: expected " + std::to_string(fresh.params().size()) +
                      " parameters, file has " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (fresh.params()[i].name != params[i].name) {
            throw IoError("checkpoint: parameter " + std::to_string(i) + " is '" +
                          params[i].name + "', expected '" + fresh.params()[i].name + "'");
        }
        if (!fresh.params()[i].value.same_shape(params[i].value)) {
            throw IoError("checkpoint: parameter '" + params[i].name + "' has shape " +
                          params[i].value.shape_str() + ", expected " +
                          fresh.params()[i].value.shape_str());
        }
        fresh.params()[i].value = std::move(params[i].value);
    }
    fresh.set_normalizer(std::move(norm_mean), std::move(norm_std));
    return fresh;
}

void save_checkpoint(const std::string& path, const CdeModel& model, std::uint64_t seed,
                     const TrainResult& trace) {
    json params = json::array();
    for (const auto& p : model.params()) {
        params.push_back(json{{"name", p.name}, {"shape", p.value.shape()}});
    }
    json header{{"format", 1},
                {"encoder", encoder_to_json(model.config())},
                {"input_dim", model.input_dim()},
                {"patch_count", model.patch_count()},
                {"num_actions", model.num_actions()},
                {"seed", seed},
                {"loss_trace", trace.epoch_mean_loss},
                {"ce_trace", trace.epoch_mean_ce},
                {"contrast_trace", trace.epoch_mean_contrast},
                {"sparsity_trace", trace.epoch_mean_sparsity},
                {"params", params}};
    const std::string head = header.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << kMagic << '\n' << head.size() << '\n' << head << '\n';
    write_doubles(os, model.norm_mean().vec());
    write_doubles(os, model.norm_std().vec());
    for (const auto& p : model.params()) write_doubles(os, p.value.vec());
    if (!os) throw IoError("write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    std::string magic;
    std::getline(is, magic);
    if (magic != kMagic) throw IoError("not a checkpoint file: " + path);
    std::string len_line;
    std::getline(is, len_line);
    std::size_t head_len = 0;
    try {
        head_len = std::stoul(len_line);
    } catch (...) {
        throw IoError("checkpoint header length corrupt in " + path);
    }
    std::string head(head_len, '\0');
    is.read(head.data(), static_cast<std::streamsize>(head_len));
    if (!is || is.get() != '\n') throw IoError("checkpoint truncated while reading header");

    json j;
    try {
        j = json::parse(head);
    } catch (const json::exception& e) {
        throw IoError(std::string("checkpoint header parse error: ") + e.what());
    }

    LoadedCheckpoint out;
    const EncoderConfig cfg = encoder_from_json(j.at("encoder"));
    const auto input_dim = j.at("input_dim").get<std::size_t>();
    const auto patch_count = j.at("patch_count").get<std::size_t>();
    const auto num_actions = j.at("num_actions").get<std::size_t>();
    out.seed = j.at("seed").get<std::uint64_t>();
    j.at("loss_trace").get_to(out.trace.epoch_mean_loss);
    j.at("ce_trace").get_to(out.trace.epoch_mean_ce);
    j.at("contrast_trace").get_to(out.trace.epoch_mean_contrast);
    j.at("sparsity_trace").get_to(out.trace.epoch_mean_sparsity);

    Tensor mean = Tensor::from({input_dim}, read_doubles(is, input_dim, "normalizer mean"));
    Tensor stddev = Tensor::from({input_dim}, read_doubles(is, input_dim, "normalizer std"));

    std::vector<CdeModel::ParamSpec> params;
    for (const auto& pj : j.at("params")) {
        CdeModel::ParamSpec p;
        p.name = pj.at("name").get<std::string>();
        std::vector<std::size_t> shape = pj.at("shape").get<std::vector<std::size_t>>();
        std::size_t count = 1;
        for (std::size_t d : shape) count *= d;
        p.value = Tensor::from(shape, read_doubles(is, count, p.name.c_str()));
        params.push_back(std::move(p));
    }
    out.model = checkpoint_assemble(cfg, input_dim, patch_count, num_actions, std::move(params),
                                    std::move(mean), std::move(stddev));
    return out;
}

void ensure_checkpoint_matches(const CdeModel& model, const WorldConfig& dataset_config) {
    const bool data_patch = dataset_config.patch_grid > 0;
    if (model.config().patchwise != data_patch) {
        throw ConfigError(std::string("checkpoint field 'encoder.patchwise' (") +
                          (model.config().patchwise ? "patch" : "global") +
                          ") does not match the dataset (" + (data_patch ? "patch" : "global") +
                          ")");
    }
    if (model.input_dim() != dataset_config.observation_dim) {
        throw ConfigError("checkpoint field 'input_dim' (" + std::to_string(model.input_dim()) +
                          ") does not match dataset observation_dim (" +
                          std::to_string(dataset_config.observation_dim) + ")");
    }
    if (data_patch && model.patch_count() != dataset_config.patch_grid) {
        throw ConfigError("checkpoint field 'patch_count' (" +
                          std::to_string(model.patch_count()) +
                          ") does not match dataset patch_grid (" +
                          std::to_string(dataset_config.patch_grid) + ")");
    }
    const std::size_t actions = dataset_config.parse_actions().size();
    if (model.num_actions() != actions) {
        throw ConfigError("checkpoint field 'num_actions' (" +
                          std::to_string(model.num_actions()) +
                          ") does not match dataset action count (" + std::to_string(actions) +
                          ")");
    }
}

} // namespace cde
