#pragma once

// Checkpoint directory:
//   manifest.json          format, version, configs, fold, split, file map
//   params/<name>.avol     one f32 volume per parameter tensor
//   history.csv            per-epoch training record

#include <filesystem>
#include <string>

#include "model.hpp"
#include "serialize.hpp"
#include "stats.hpp"
#include "training.hpp"
#include "volume_io.hpp"

namespace adruwams {

inline constexpr const char* checkpoint_format = "adruwams-checkpoint";
inline constexpr int checkpoint_version = 1;

struct Checkpoint {
    ModelConfig model_config;
    TrainConfig train_config;
    std::size_t fold = 0;
    FoldSplit split;
    std::size_t best_epoch = 0;
    ModelParams<float> params;
};

inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& c, const TrainHistory* history = nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "params");
    Json files = Json::object();
    for_each_param(c.params, [&](const std::string& name, const Param<float>& p) {
        const std::string rel = "params/" + name + ".avol";
        volume_write(dir / rel, p.value);
        files[name] = rel;
    });
    const Json manifest{{"format", checkpoint_format},
                        {"version", checkpoint_version},
                        {"model", to_json(c.model_config)},
                        {"train", to_json(c.train_config)},
                        {"fold", c.fold},
                        {"best_epoch", c.best_epoch},
                        {"split", to_json(c.split)},
                        {"params", files}};
    write_json(dir / "manifest.json", manifest);
    if (history) write_text(dir / "history.csv", history->to_csv());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    const Json m = read_json(dir / "manifest.json");
    detail::check_object(m, "manifest", {"format", "version", "model", "train", "fold", "best_epoch", "split", "params"});
    if (detail::get_string(m, "format", "manifest", "") != checkpoint_format)
        fail(Errc::io, dir.string() + ": not a checkpoint (bad format tag)");
    if (detail::get_count(m, "version", "manifest", 0) != static_cast<std::size_t>(checkpoint_version))
        fail(Errc::io, dir.string() + ": unsupported checkpoint version");
    for (const char* k : {"model", "train", "split", "params"})
        if (!m.contains(k)) fail(Errc::io, dir.string() + ": manifest lacks '" + k + "'");
    Checkpoint c;
    c.model_config = model_config_from_json(m.at("model"), "manifest.model");
    c.train_config = train_config_from_json(m.at("train"), "manifest.train");
    c.fold = detail::get_count(m, "fold", "manifest", 0);
    c.best_epoch = detail::get_count(m, "best_epoch", "manifest", 0);
    c.split = fold_split_from_json(m.at("split"), "manifest.split");
    c.params = make_model<float>(c.model_config);
    const Json& files = m.at("params");
    if (!files.is_object()) fail(Errc::io, dir.string() + ": manifest.params must be an object");
    std::size_t seen = 0;
    for_each_param(c.params, [&](const std::string& name, Param<float>& p) {
        if (!files.contains(name) || !files.at(name).is_string())
            fail(Errc::io, dir.string() + ": manifest has no file for parameter " + name);
        Tensor<float> t = volume_read_as<float>(dir / files.at(name).get<std::string>());
        if (t.shape() != p.value.shape())
            fail(Errc::validation, "checkpoint parameter " + name + " has shape " + shape_str(t.shape()) + ", expected " +
                                       shape_str(p.value.shape()));
        p.value = std::move(t);
        ++seen;
    });
    if (seen != files.size()) fail(Errc::validation, dir.string() + ": manifest lists parameters the model does not have");
    return c;
}

} // namespace adruwams
