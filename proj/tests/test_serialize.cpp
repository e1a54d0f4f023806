#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <adruwams/checkpoint.hpp>

using namespace adruwams;
namespace fs = std::filesystem;

namespace {

class TempDir {
public:
    TempDir() {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        path_ = fs::temp_directory_path() / (std::string("adruwams_") + info->test_suite_name() + "_" + info->name());
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

template <class F>
Errc error_code(F&& f, std::string* what = nullptr) {
    try {
        f();
    } catch (const Error& e) {
        if (what) *what = e.what();
        return e.code();
    }
    ADD_FAILURE() << "no error raised";
    return Errc{};
}

ModelConfig small_model() {
    ModelConfig c;
    c.levels = 2;
    c.base_filters = 2;
    c.bottleneck_filters = 4;
    c.seed = 5;
    return c;
}

Checkpoint sample_checkpoint() {
    Checkpoint c;
    c.model_config = small_model();
    c.train_config.epochs = 3;
    c.train_config.learning_rate = 2e-3;
    c.fold = 2;
    c.best_epoch = 3;
    c.split = {{"a", "b"}, {"c"}, {"d"}};
    c.params = init_params<float>(c.model_config, 8);
    return c;
}

void expect_same_params(ModelParams<float>& a, ModelParams<float>& b) {
    const auto pa = param_list(a), pb = param_list(b);
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_EQ(pa[i].first, pb[i].first);
        EXPECT_TRUE(pa[i].second->value == pb[i].second->value) << pa[i].first;
    }
}

Json manifest_of(const fs::path& dir) { return read_json(dir / "manifest.json"); }

} // namespace

TEST(Config, ModelRoundTrip) {
    const ModelConfig c = small_model();
    EXPECT_EQ(model_config_from_json(to_json(c)), c);
    EXPECT_EQ(model_config_from_json(Json::object()), ModelConfig{});
}

TEST(Config, TrainRoundTrip) {
    TrainConfig c;
    c.learning_rate = 0.0123;
    c.patience = 7;
    c.decay_factor = 0.25;
    c.epochs = 9;
    c.batch_size = 3;
    c.seed = 1ULL << 60;
    c.augment_flip = false;
    c.loss_smooth = 0.5;
    EXPECT_EQ(train_config_from_json(to_json(c)), c);
}

TEST(Config, RunConfigRoundTripAndDefaults) {
    RunConfig c;
    c.model = small_model();
    c.train.epochs = 4;
    c.data_dir = "cases";
    c.folds = "folds.json";
    const RunConfig back = run_config_from_json(to_json(c));
    EXPECT_EQ(back.model, c.model);
    EXPECT_EQ(back.train, c.train);
    EXPECT_EQ(back.data_dir, "cases");
    EXPECT_EQ(back.folds, "folds.json");
    const RunConfig d = run_config_from_json(Json::parse(R"({"train": {"epochs": 2}})"));
    EXPECT_EQ(d.model, ModelConfig{});
    EXPECT_EQ(d.train.epochs, 2u);
}

TEST(Config, StrictKeysAndTypes) {
    struct Bad {
        const char* json;
        const char* fragment;
    };
    for (const auto& b : std::vector<Bad>{
             {R"({"modle": {}})", "unknown key 'modle'"},
             {R"({"model": {"levels": 4, "lvels": 3}})", "config.model: unknown key 'lvels'"},
             {R"({"model": {"levels": -1}})", "config.model.levels"},
             {R"({"model": {"levels": 2.5}})", "config.model.levels"},
             {R"({"model": {"base_filters": "16"}})", "config.model.base_filters"},
             {R"({"train": {"learning_rate": "fast"}})", "config.train.learning_rate"},
             {R"({"train": {"augment_flip": 1}})", "config.train.augment_flip"},
             {R"({"train": {"decay_factor": 1.5}})", "decay_factor"},
             {R"({"train": {"patience": 0}})", "patience"},
             {R"({"data_dir": 3})", "config.data_dir"},
             {R"([1, 2])", "expected a JSON object"},
         }) {
        std::string what;
        EXPECT_EQ(error_code([&] { run_config_from_json(Json::parse(b.json)); }, &what), Errc::validation) << b.json;
        EXPECT_NE(what.find(b.fragment), std::string::npos) << b.json << " -> " << what;
    }
}

TEST(Json, FileErrorsAreIoErrors) {
    TempDir tmp;
    EXPECT_EQ(error_code([&] { read_json(tmp.path() / "missing.json"); }), Errc::io);
    write_text(tmp.path() / "bad.json", "{ not json");
    std::string what;
    EXPECT_EQ(error_code([&] { read_json(tmp.path() / "bad.json"); }, &what), Errc::io);
    EXPECT_NE(what.find("invalid JSON"), std::string::npos);
}

TEST(Folds, RoundTripAndErrors) {
    std::map<std::string, std::string> strata;
    for (int i = 0; i < 13; ++i) strata["c" + std::to_string(i)] = i % 2 ? "T1-ED" : "T0-NET";
    const auto fa = kfold_split(strata, 21);
    EXPECT_EQ(fold_assignment_from_json(to_json(fa)), fa);
    const Json j = to_json(fa);
    EXPECT_EQ(j.at("folds").size(), fold_count);
    EXPECT_EQ(j.at("seed"), 21);

    Json missing = j;
    missing["folds"][1].erase("val");
    std::string what;
    EXPECT_EQ(error_code([&] { fold_assignment_from_json(missing); }, &what), Errc::validation);
    EXPECT_NE(what.find("folds[1]: missing 'val'"), std::string::npos) << what;
    Json numeric = j;
    numeric["folds"][0]["test"][0] = 4;
    EXPECT_EQ(error_code([&] { fold_assignment_from_json(numeric); }), Errc::validation);
    EXPECT_EQ(error_code([&] { fold_assignment_from_json(Json::parse(R"({"seed": 1})")); }), Errc::validation);
}

TEST(Metrics, ReportJsonUsesNullForUndefined) {
    MetricReport r;
    r.case_id = "x";
    r.classes[0].dice = 0.5;
    r.classes[0].hd = 3.0;
    const Json j = to_json(r);
    EXPECT_EQ(j.at("case_id"), "x");
    EXPECT_EQ(j.at("classes").at("wt").at("dice"), 0.5);
    EXPECT_EQ(j.at("classes").at("wt").at("hd"), 3.0);
    EXPECT_TRUE(j.at("classes").at("wt").at("hd95").is_null());
    EXPECT_TRUE(j.at("classes").at("et").at("hd").is_null());
}

TEST(Checkpoint, RoundTripIsBitwise) {
    TempDir tmp;
    Checkpoint c = sample_checkpoint();
    TrainHistory h;
    h.epochs.push_back({1, 0.9, 0.8, 2e-3, {0.1, 0.2, 0.3}});
    save_checkpoint(tmp.path(), c, &h);
    EXPECT_TRUE(fs::exists(tmp.path() / "history.csv"));
    Checkpoint back = load_checkpoint(tmp.path());
    EXPECT_EQ(back.model_config, c.model_config);
    EXPECT_EQ(back.train_config, c.train_config);
    EXPECT_EQ(back.fold, 2u);
    EXPECT_EQ(back.best_epoch, 3u);
    EXPECT_EQ(back.split, c.split);
    expect_same_params(back.params, c.params);

    std::ifstream in(tmp.path() / "history.csv");
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "epoch,train_loss,val_loss,lr,dice_wt,dice_tc,dice_et");
}

TEST(Checkpoint, SavingTwiceGivesIdenticalFiles) {
    TempDir tmp;
    const Checkpoint c = sample_checkpoint();
    save_checkpoint(tmp.path() / "a", c);
    save_checkpoint(tmp.path() / "b", c);
    for (const auto& e : fs::recursive_directory_iterator(tmp.path() / "a")) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), tmp.path() / "a");
        EXPECT_EQ(read_bytes(e.path()), read_bytes(tmp.path() / "b" / rel)) << rel;
    }
}

TEST(Checkpoint, ManifestErrors) {
    TempDir tmp;
    const Checkpoint c = sample_checkpoint();
    save_checkpoint(tmp.path(), c);
    const Json good = manifest_of(tmp.path());
    auto with = [&](const Json& m) {
        write_json(tmp.path() / "manifest.json", m);
        std::string what;
        const Errc e = error_code([&] { load_checkpoint(tmp.path()); }, &what);
        return std::pair{e, what};
    };

    Json m = good;
    m["format"] = "something-else";
    EXPECT_EQ(with(m).first, Errc::io);
    m = good;
    m["version"] = 2;
    EXPECT_EQ(with(m).first, Errc::io);
    m = good;
    m.erase("params");
    EXPECT_EQ(with(m).first, Errc::io);
    m = good;
    m["params"].erase(m["params"].begin());
    auto [code, what] = with(m);
    EXPECT_EQ(code, Errc::io);
    EXPECT_NE(what.find("no file for parameter"), std::string::npos) << what;
    m = good;
    m["params"]["ghost.w"] = "params/ghost.w.avol";
    EXPECT_EQ(with(m).first, Errc::validation);
    m = good;
    m["model"]["base_filters"] = 3;
    std::tie(code, what) = with(m);
    EXPECT_EQ(code, Errc::validation);
    EXPECT_NE(what.find("has shape"), std::string::npos) << what;
    m = good;
    m["extra"] = true;
    EXPECT_EQ(with(m).first, Errc::validation);

    fs::remove(tmp.path() / "manifest.json");
    EXPECT_EQ(error_code([&] { load_checkpoint(tmp.path()); }), Errc::io);
}

TEST(Checkpoint, MissingParameterFileIsIoError) {
    TempDir tmp;
    save_checkpoint(tmp.path(), sample_checkpoint());
    const Json m = manifest_of(tmp.path());
    fs::remove(tmp.path() / m.at("params").begin().value().get<std::string>());
    EXPECT_EQ(error_code([&] { load_checkpoint(tmp.path()); }), Errc::io);
}
