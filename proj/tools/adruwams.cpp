// adruwams command-line driver.

#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <adruwams/adruwams.hpp>

namespace fs = std::filesystem;
using namespace adruwams;

namespace {

int print_error(const char* kind, int code, const std::string& message) {
    const Json j{{"error", kind}, {"code", code}, {"message", message}};
    std::cerr << j.dump() << std::endl;
    return code;
}

int print_error(Errc code, const std::string& message) {
    return print_error(errc_name(code), static_cast<int>(code), message);
}

bool dir_nonempty(const fs::path& p) { return fs::is_directory(p) && !fs::is_empty(p); }

std::string case_name(std::size_t i) {
    std::ostringstream os;
    os << "case_" << std::setw(3) << std::setfill('0') << i;
    return os.str();
}

std::vector<Sample> load_samples(const fs::path& data, const std::vector<std::string>& ids) {
    std::vector<Sample> out;
    for (const auto& id : ids) out.push_back(make_sample(load_case(data / id)));
    return out;
}

// ---------------------------------------------------------------------------

struct GenArgs {
    std::size_t count = 0, size = 32, levels = 4;
    std::uint64_t seed = 0;
    std::string out;
    bool force = false;
};

int cmd_gen_phantoms(const GenArgs& a) {
    require(a.count >= 1, "--count must be >= 1", Errc::usage);
    require(a.levels >= 1 && a.levels <= 8, "--levels must lie in [1, 8]", Errc::usage);
    const std::size_t div = std::size_t{1} << a.levels;
    if (a.size == 0 || a.size % div != 0)
        fail(Errc::validation, "--size " + std::to_string(a.size) + " is not divisible by " + std::to_string(div) +
                                   " (2^levels, levels=" + std::to_string(a.levels) + ")");
    if (dir_nonempty(a.out) && !a.force)
        fail(Errc::validation, "output directory " + a.out + " is not empty (use --force to overwrite)");
    PhantomSpec spec;
    spec.extent = {a.size, a.size, a.size};
    spec.validate();
    for (std::size_t i = 0; i < a.count; ++i) save_case(a.out, gen_phantom(spec, mix_seed(a.seed, i), case_name(i)));
    std::cout << "wrote " << a.count << " cases to " << a.out << "\n";
    return 0;
}

int cmd_split(const std::string& data, std::uint64_t seed, const std::string& out) {
    std::vector<CaseStats> stats;
    for (const auto& id : list_cases(data))
        stats.push_back(case_stats(id, volume_read_as<std::uint8_t>(fs::path(data) / id / "label.avol")));
    const FoldAssignment fa = kfold_split(stats, seed);
    write_json(out, to_json(fa));
    std::cout << "split " << stats.size() << " cases into " << fa.folds.size() << " folds -> " << out << "\n";
    return 0;
}

struct TrainArgs {
    std::string config, out;
    std::size_t fold = 0;
    std::optional<std::size_t> epochs;
    std::optional<double> lr;
    std::optional<std::string> data, folds;
    bool force = false;
};

int cmd_train(const TrainArgs& a) {
    RunConfig rc = run_config_from_json(read_json(a.config));
    if (a.epochs) rc.train.epochs = *a.epochs;
    if (a.lr) rc.train.learning_rate = *a.lr;
    if (a.data) rc.data_dir = *a.data;
    if (a.folds) rc.folds = *a.folds;
    rc.train.validate();
    require(!rc.data_dir.empty(), "config: data_dir is required (or pass --data)");
    require(!rc.folds.empty(), "config: folds is required (or pass --folds)");
    if (dir_nonempty(a.out) && !a.force)
        fail(Errc::validation, "checkpoint directory " + a.out + " is not empty (use --force to overwrite)");
    const FoldAssignment fa = fold_assignment_from_json(read_json(rc.folds));
    if (a.fold >= fa.folds.size())
        fail(Errc::validation, "--fold " + std::to_string(a.fold) + " out of range (" + std::to_string(fa.folds.size()) +
                                   " folds)");
    const FoldSplit& split = fa.folds[a.fold];
    const auto train_set = load_samples(rc.data_dir, split.train);
    const auto val_set = load_samples(rc.data_dir, split.val);
    if (!train_set.empty()) check_model_input(rc.model, train_set[0].input.reshaped({1, 4, train_set[0].input.dim(1),
                                                                                   train_set[0].input.dim(2),
                                                                                   train_set[0].input.dim(3)}));
    std::cout << "epoch,train_loss,val_loss,lr,dice_wt,dice_tc,dice_et" << std::endl;
    const TrainResult r = train(rc.model, rc.train, train_set, val_set, [](const EpochRecord& e) {
        std::cout << std::fixed << std::setprecision(6) << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ','
                  << e.lr << ',' << e.dice[0] << ',' << e.dice[1] << ',' << e.dice[2] << std::endl;
    });
    save_checkpoint(a.out, {rc.model, rc.train, a.fold, split, r.best_epoch, r.best}, &r.history);
    std::cout << "best epoch " << r.best_epoch << " (val mean dice " << r.best_dice << ") -> " << a.out << "\n";
    return 0;
}

struct EvalArgs {
    std::string ckpt, data, split = "test", out;
    std::optional<std::size_t> fold;
    std::optional<std::string> csv;
    double threshold = 0.5;
};

std::string fold_row(std::size_t fold, const MetricSummary& s) {
    std::ostringstream os;
    os << std::setprecision(17) << fold;
    for (std::size_t m : {0u, 2u, 3u, 4u}) // dice, hd95, sensitivity, specificity
        for (std::size_t k = 0; k < 3; ++k) {
            const auto& st = s.stats[m][k];
            os << ',';
            if (st.n) os << st.mean;
            else os << "nan";
        }
    return os.str();
}

int cmd_eval(const EvalArgs& a) {
    const Checkpoint ck = load_checkpoint(a.ckpt);
    if (a.fold && *a.fold != ck.fold)
        fail(Errc::validation, "--fold " + std::to_string(*a.fold) + " does not match checkpoint fold " +
                                   std::to_string(ck.fold));
    const std::vector<std::string>* ids = a.split == "test"    ? &ck.split.test
                                          : a.split == "val"   ? &ck.split.val
                                          : a.split == "train" ? &ck.split.train
                                                               : nullptr;
    if (!ids) fail(Errc::usage, "--split must be train, val or test");
    require(!ids->empty(), "split '" + a.split + "' of the checkpoint is empty");
    require(a.threshold > 0 && a.threshold < 1, "--threshold must lie in (0, 1)", Errc::usage);
    std::vector<MetricReport> reports;
    for (const auto& id : *ids) {
        const Case c = load_case(fs::path(a.data) / id);
        const Tensor<float> probs = predict(ck.params, make_sample(c));
        reports.push_back(evaluate_case(probs, c, a.threshold));
    }
    const MetricSummary summary = aggregate(reports);
    Json cases = Json::array();
    for (const auto& r : reports) cases.push_back(to_json(r));
    write_json(a.out, Json{{"fold", ck.fold},
                           {"split", a.split},
                           {"threshold", a.threshold},
                           {"cases", cases},
                           {"summary", to_json(summary)}});
    if (a.csv) {
        std::string text;
        for (std::size_t i = 0; i < fold_table_columns().size(); ++i)
            text += (i ? "," : "") + fold_table_columns()[i];
        write_text(*a.csv, text + "\n" + fold_row(ck.fold, summary) + "\n");
    }
    std::cout << "evaluated " << reports.size() << " cases -> " << a.out << "\n";
    return 0;
}

int cmd_stats(const std::string& a, const std::string& b, const std::string& out) {
    const auto cmp = compare_fold_tables(read_fold_table(a), read_fold_table(b));
    write_json(out, to_json(cmp));
    std::cout << std::left << std::setw(8) << "metric" << std::setw(6) << "class" << std::right << std::setw(12) << "t"
              << std::setw(14) << "p" << std::setw(12) << "cohens_d" << "  effect\n";
    for (const auto& c : cmp)
        std::cout << std::left << std::setw(8) << c.metric << std::setw(6) << c.cls << std::right << std::setw(12)
                  << std::setprecision(5) << c.result.t << std::setw(14) << std::setprecision(6) << c.result.p
                  << std::setw(12) << std::setprecision(5) << c.result.cohens_d << "  " << effect_size_name(c.effect)
                  << "\n";
    return 0;
}

int cmd_gradcheck(double tol, std::uint64_t seed) {
    require(tol > 0, "--tol must be positive", Errc::usage);
    GradCheckOptions opt;
    opt.tolerance = tol;
    opt.element_tolerance = std::min(tol, opt.element_tolerance);
    opt.seed = seed;
    const auto results = run_gradcheck_suite(opt);
    bool ok = true;
    std::cout << std::left << std::setw(34) << "check" << std::right << std::setw(8) << "coords" << std::setw(14)
              << "max_rel_err" << std::setw(10) << "tol" << "\n";
    for (const auto& r : results) {
        std::cout << std::left << std::setw(34) << r.name << std::right << std::setw(8) << r.coordinates << std::setw(14)
                  << std::scientific << std::setprecision(3) << r.max_rel_error << std::setw(10) << std::setprecision(0)
                  << r.tolerance << std::defaultfloat << (r.passed() ? "" : "  FAIL") << "\n";
        ok = ok && r.passed();
    }
    if (!ok) fail(Errc::numeric, "gradient check exceeded tolerance");
    return 0;
}

int cmd_info(const std::optional<std::string>& config, std::size_t extent) {
    ModelConfig mc;
    if (config) {
        const Json j = read_json(*config);
        const bool run = j.is_object() && (j.contains("model") || j.contains("train") || j.contains("data_dir") ||
                                           j.contains("folds"));
        mc = run ? run_config_from_json(j).model : model_config_from_json(j);
    }
    mc.validate();
    const Json out{{"model", to_json(mc)},
                   {"param_count", param_count(mc)},
                   {"flops_extent", extent},
                   {"flops", flops_estimate(mc, extent)}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"ADRUwAMS 3D tumor segmentation toolkit"};
    app.require_subcommand(1);
    std::size_t threads = 0;
    app.add_option("--threads", threads, "worker threads (0 = hardware concurrency)");

    GenArgs gen;
    auto* g = app.add_subcommand("gen-phantoms", "write synthetic phantom cases");
    g->add_option("--count", gen.count, "number of cases")->required();
    g->add_option("--size", gen.size, "cubic extent")->capture_default_str();
    g->add_option("--seed", gen.seed, "generator seed")->capture_default_str();
    g->add_option("--levels", gen.levels, "model depth the size must support")->capture_default_str();
    g->add_option("--out", gen.out, "output directory")->required();
    g->add_flag("--force", gen.force, "write into a non-empty directory");

    std::string split_data, split_out;
    std::uint64_t split_seed = 0;
    auto* s = app.add_subcommand("split", "stratified 5-fold split");
    s->add_option("--data", split_data, "case directory")->required();
    s->add_option("--seed", split_seed, "shuffle seed")->capture_default_str();
    s->add_option("--out", split_out, "folds JSON")->required();

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "train one fold");
    t->add_option("--config", tr.config, "run config JSON")->required();
    t->add_option("--fold", tr.fold, "fold index")->capture_default_str();
    t->add_option("--out", tr.out, "checkpoint directory")->required();
    t->add_option("--epochs", tr.epochs, "override train.epochs");
    t->add_option("--lr", tr.lr, "override train.learning_rate");
    t->add_option("--data", tr.data, "override data_dir");
    t->add_option("--folds", tr.folds, "override folds");
    t->add_flag("--force", tr.force, "overwrite a non-empty checkpoint directory");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
    e->add_option("--ckpt", ev.ckpt, "checkpoint directory")->required();
    e->add_option("--data", ev.data, "case directory")->required();
    e->add_option("--fold", ev.fold, "expected fold index");
    e->add_option("--split", ev.split, "train, val or test")->capture_default_str();
    e->add_option("--out", ev.out, "metrics JSON")->required();
    e->add_option("--csv", ev.csv, "also write a fold-table CSV row");
    e->add_option("--threshold", ev.threshold, "binarization threshold")->capture_default_str();

    std::string sa, sb, sout;
    auto* st = app.add_subcommand("stats", "paired comparison of two fold tables");
    st->add_option("--a", sa, "first fold-table CSV")->required();
    st->add_option("--b", sb, "second fold-table CSV")->required();
    st->add_option("--out", sout, "report JSON")->required();

    double tol = 1e-4;
    std::uint64_t gc_seed = 1234;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    gc->add_option("--tol", tol, "tolerance for layers and blocks")->capture_default_str();
    gc->add_option("--seed", gc_seed, "random seed")->capture_default_str();

    std::optional<std::string> info_cfg;
    std::size_t info_extent = 128;
    auto* in = app.add_subcommand("info", "parameter and FLOP accounting");
    in->add_option("--config", info_cfg, "model or run config JSON");
    in->add_option("--extent", info_extent, "cubic input extent for the FLOP estimate")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::CallForAllHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::ParseError& ex) {
        return print_error(Errc::usage, ex.what());
    }

    try {
        if (threads) set_num_threads(threads);
        if (*g) return cmd_gen_phantoms(gen);
        if (*s) return cmd_split(split_data, split_seed, split_out);
        if (*t) return cmd_train(tr);
        if (*e) return cmd_eval(ev);
        if (*st) return cmd_stats(sa, sb, sout);
        if (*gc) return cmd_gradcheck(tol, gc_seed);
        if (*in) return cmd_info(info_cfg, info_extent);
    } catch (const Error& ex) {
        return print_error(ex.code(), ex.what());
    } catch (const fs::filesystem_error& ex) {
        return print_error(Errc::io, ex.what());
    } catch (const std::exception& ex) {
        return print_error("internal", 1, ex.what());
    }
    return static_cast<int>(Errc::usage);
}
