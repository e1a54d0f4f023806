#pragma once

// JSON forms of configs, split assignments, metric reports and comparisons.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "error.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "stats.hpp"
#include "training.hpp"

namespace adruwams {

using Json = nlohmann::ordered_json;

namespace detail {

inline void check_object(const Json& j, const std::string& ctx, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) fail(Errc::validation, ctx + ": expected a JSON object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [k, v] : j.items())
        if (!ok.count(k)) fail(Errc::validation, ctx + ": unknown key '" + k + "'");
}

inline std::size_t get_count(const Json& j, const char* key, const std::string& ctx, std::size_t fallback) {
    if (!j.contains(key)) return fallback;
    const Json& v = j.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0)
        fail(Errc::validation, ctx + "." + key + ": expected a non-negative integer");
    return v.get<std::size_t>();
}

inline std::uint64_t get_seed(const Json& j, const char* key, const std::string& ctx, std::uint64_t fallback) {
    if (!j.contains(key)) return fallback;
    const Json& v = j.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
        fail(Errc::validation, ctx + "." + key + ": expected a non-negative integer");
    return v.get<std::uint64_t>();
}

inline double get_real(const Json& j, const char* key, const std::string& ctx, double fallback) {
    if (!j.contains(key)) return fallback;
    const Json& v = j.at(key);
    if (!v.is_number() || !std::isfinite(v.get<double>())) fail(Errc::validation, ctx + "." + key + ": expected a number");
    return v.get<double>();
}

inline bool get_bool(const Json& j, const char* key, const std::string& ctx, bool fallback) {
    if (!j.contains(key)) return fallback;
    if (!j.at(key).is_boolean()) fail(Errc::validation, ctx + "." + key + ": expected true or false");
    return j.at(key).get<bool>();
}

inline std::string get_string(const Json& j, const char* key, const std::string& ctx, std::string fallback) {
    if (!j.contains(key)) return fallback;
    if (!j.at(key).is_string()) fail(Errc::validation, ctx + "." + key + ": expected a string");
    return j.at(key).get<std::string>();
}

inline Json nullable(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

} // namespace detail

inline Json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(Errc::io, "cannot open " + path.string());
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        fail(Errc::io, path.string() + ": invalid JSON: " + e.what());
    }
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::io, "cannot open for writing: " + path.string());
    out << text;
    if (!out) fail(Errc::io, "write failed: " + path.string());
}

inline void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// Configs

inline Json to_json(const ModelConfig& c) {
    return {{"in_channels", c.in_channels}, {"out_classes", c.out_classes},
            {"base_filters", c.base_filters}, {"levels", c.levels},
            {"bottleneck_filters", c.bottleneck_filters}, {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const Json& j, const std::string& ctx = "model") {
    detail::check_object(j, ctx, {"in_channels", "out_classes", "base_filters", "levels", "bottleneck_filters", "seed"});
    ModelConfig c;
    c.in_channels = detail::get_count(j, "in_channels", ctx, c.in_channels);
    c.out_classes = detail::get_count(j, "out_classes", ctx, c.out_classes);
    c.base_filters = detail::get_count(j, "base_filters", ctx, c.base_filters);
    c.levels = detail::get_count(j, "levels", ctx, c.levels);
    c.bottleneck_filters = detail::get_count(j, "bottleneck_filters", ctx, c.bottleneck_filters);
    c.seed = detail::get_seed(j, "seed", ctx, c.seed);
    c.validate();
    return c;
}

inline Json to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate}, {"patience", c.patience}, {"decay_factor", c.decay_factor},
            {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"seed", c.seed},
            {"augment_flip", c.augment_flip}, {"loss_smooth", c.loss_smooth}};
}

inline TrainConfig train_config_from_json(const Json& j, const std::string& ctx = "train") {
    detail::check_object(j, ctx, {"learning_rate", "patience", "decay_factor", "epochs", "batch_size", "seed",
                                  "augment_flip", "loss_smooth"});
    TrainConfig c;
    c.learning_rate = detail::get_real(j, "learning_rate", ctx, c.learning_rate);
    c.patience = detail::get_count(j, "patience", ctx, c.patience);
    c.decay_factor = detail::get_real(j, "decay_factor", ctx, c.decay_factor);
    c.epochs = detail::get_count(j, "epochs", ctx, c.epochs);
    c.batch_size = detail::get_count(j, "batch_size", ctx, c.batch_size);
    c.seed = detail::get_seed(j, "seed", ctx, c.seed);
    c.augment_flip = detail::get_bool(j, "augment_flip", ctx, c.augment_flip);
    c.loss_smooth = detail::get_real(j, "loss_smooth", ctx, c.loss_smooth);
    c.validate();
    return c;
}

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::string data_dir;  ///< case directories
    std::string folds;     ///< split assignment JSON
};

inline Json to_json(const RunConfig& c) {
    return {{"model", to_json(c.model)}, {"train", to_json(c.train)}, {"data_dir", c.data_dir}, {"folds", c.folds}};
}

inline RunConfig run_config_from_json(const Json& j) {
    detail::check_object(j, "config", {"model", "train", "data_dir", "folds"});
    RunConfig c;
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"), "config.model");
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"), "config.train");
    c.data_dir = detail::get_string(j, "data_dir", "config", "");
    c.folds = detail::get_string(j, "folds", "config", "");
    return c;
}

// ---------------------------------------------------------------------------
// Split assignments

inline Json to_json(const FoldSplit& s) { return {{"train", s.train}, {"val", s.val}, {"test", s.test}}; }

inline Json to_json(const FoldAssignment& a) {
    Json folds = Json::array();
    for (const auto& f : a.folds) folds.push_back(to_json(f));
    Json strata = Json::object();
    for (const auto& [id, label] : a.strata) strata[id] = label;
    return {{"seed", a.seed}, {"strata", strata}, {"folds", folds}};
}

namespace detail {
inline std::vector<std::string> id_list(const Json& j, const std::string& ctx) {
    if (!j.is_array()) fail(Errc::validation, ctx + ": expected an array of case ids");
    std::vector<std::string> out;
    for (const auto& v : j) {
        if (!v.is_string()) fail(Errc::validation, ctx + ": case ids must be strings");
        out.push_back(v.get<std::string>());
    }
    return out;
}
} // namespace detail

inline FoldSplit fold_split_from_json(const Json& j, const std::string& ctx) {
    detail::check_object(j, ctx, {"train", "val", "test"});
    for (const char* k : {"train", "val", "test"})
        if (!j.contains(k)) fail(Errc::validation, ctx + ": missing '" + k + "'");
    return {detail::id_list(j.at("train"), ctx + ".train"), detail::id_list(j.at("val"), ctx + ".val"),
            detail::id_list(j.at("test"), ctx + ".test")};
}

inline FoldAssignment fold_assignment_from_json(const Json& j) {
    detail::check_object(j, "folds", {"seed", "strata", "folds"});
    FoldAssignment a;
    a.seed = detail::get_seed(j, "seed", "folds", 0);
    if (j.contains("strata")) {
        if (!j.at("strata").is_object()) fail(Errc::validation, "folds.strata: expected an object");
        for (const auto& [id, label] : j.at("strata").items()) {
            if (!label.is_string()) fail(Errc::validation, "folds.strata: labels must be strings");
            a.strata[id] = label.get<std::string>();
        }
    }
    if (!j.contains("folds") || !j.at("folds").is_array()) fail(Errc::validation, "folds: missing 'folds' array");
    for (std::size_t i = 0; i < j.at("folds").size(); ++i)
        a.folds.push_back(fold_split_from_json(j.at("folds")[i], "folds[" + std::to_string(i) + "]"));
    return a;
}

// ---------------------------------------------------------------------------
// Metric reports

inline Json to_json(const ClassMetrics& m) {
    return {{"dice", m.dice}, {"hd", detail::nullable(m.hd)}, {"hd95", detail::nullable(m.hd95)},
            {"sensitivity", detail::nullable(m.sensitivity)}, {"specificity", detail::nullable(m.specificity)}};
}

inline Json to_json(const MetricReport& r) {
    Json classes = Json::object();
    for (std::size_t k = 0; k < 3; ++k) classes[class_names[k]] = to_json(r.classes[k]);
    return {{"case_id", r.case_id}, {"classes", classes}};
}

inline Json to_json(const MetricSummary& s) {
    Json out = Json::object();
    for (std::size_t m = 0; m < metric_names.size(); ++m) {
        Json per = Json::object();
        for (std::size_t k = 0; k < 3; ++k) {
            const auto& st = s.stats[m][k];
            per[class_names[k]] = {{"mean", st.n ? Json(st.mean) : Json(nullptr)},
                                   {"sd", st.n ? Json(st.sd) : Json(nullptr)},
                                   {"n", st.n},
                                   {"excluded", st.excluded}};
        }
        out[metric_names[m]] = per;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Comparison report: {metric: {class: {...}}}

inline Json to_json(const std::vector<Comparison>& cs) {
    Json out = Json::object();
    for (const auto& c : cs) {
        const auto& r = c.result;
        out[c.metric][c.cls.empty() ? "value" : c.cls] = {
            {"n", r.n},         {"mean_diff", r.mean_diff}, {"sd_diff", r.sd_diff},
            {"t", r.t},         {"p", r.p},                 {"cohens_d", r.cohens_d},
            {"interpretation", effect_size_name(c.effect)}};
    }
    return out;
}

} // namespace adruwams
