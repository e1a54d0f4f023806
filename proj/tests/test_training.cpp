#include <gtest/gtest.h>

#include <cmath>

#include <adruwams/data.hpp>
#include <adruwams/training.hpp>

using namespace adruwams;

namespace {

PhantomSpec small_phantoms() {
    PhantomSpec s;
    s.extent = {16, 16, 16};
    s.wt_radius_min = 4.0;
    s.wt_radius_max = 6.0;
    return s;
}

std::vector<Sample> phantom_samples(std::size_t n, std::uint64_t seed) {
    std::vector<Sample> out;
    for (std::size_t i = 0; i < n; ++i)
        out.push_back(make_sample(gen_phantom(small_phantoms(), mix_seed(seed, i), "p" + std::to_string(i))));
    return out;
}

ModelConfig tiny_model() {
    ModelConfig c;
    c.levels = 2;
    c.base_filters = 2;
    c.bottleneck_filters = 4;
    c.seed = 11;
    return c;
}

template <typename T>
void expect_same_params(ModelParams<T>& a, ModelParams<T>& b) {
    auto pa = param_list(a), pb = param_list(b);
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].second->value, pb[i].second->value) << pa[i].first;
}

} // namespace

// --- loss -----------------------------------------------------------------

TEST(SoftDiceLoss, PerfectOverlapIsZero) {
    Rng rng(1);
    Tensor<double> t({2, 3, 4, 4, 4});
    for (auto& v : t.values()) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
    EXPECT_EQ(soft_dice_loss(t, t).loss, 0.0);
    EXPECT_EQ(soft_dice_loss(Tensor<double>({1, 3, 2, 2, 2}), Tensor<double>({1, 3, 2, 2, 2})).loss, 0.0);
}

TEST(SoftDiceLoss, DisjointHalfMaskIsNearMaximal) {
    Tensor<double> t({1, 1, 4, 4, 4}), p({1, 1, 4, 4, 4});
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = i % 2 ? 1.0 : 0.0;
        p[i] = 1.0 - t[i];
    }
    EXPECT_DOUBLE_EQ(soft_dice_loss(p, t).loss, 1.0 - 1.0 / 65.0);
}

TEST(SoftDiceLoss, BoundedForProbabilities) {
    Rng rng(2);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor<double> p({2, 3, 3, 3, 3}), t(p.shape());
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] = rng.uniform();
            t[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
        }
        const double l = soft_dice_loss(p, t).loss;
        EXPECT_GE(l, 0.0);
        EXPECT_LT(l, 1.0);
    }
}

TEST(SoftDiceLoss, GradientMatchesCentralDifference) {
    Rng rng(3);
    Tensor<double> p({2, 3, 2, 3, 2}), t(p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = 0.05 + 0.9 * rng.uniform();
        t[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
    }
    const auto r = soft_dice_loss(p, t);
    const double h = 1e-6;
    double diff = 0, scale = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        Tensor<double> a = p, b = p;
        a[i] += h;
        b[i] -= h;
        const double num = (soft_dice_loss(a, t).loss - soft_dice_loss(b, t).loss) / (2 * h);
        diff = std::max(diff, std::fabs(num - r.grad[i]));
        scale = std::max({scale, std::fabs(num), std::fabs(r.grad[i])});
    }
    EXPECT_LE(diff / scale, 1e-6);
}

TEST(SoftDiceLoss, RejectsBadInputs) {
    Tensor<double> p({1, 3, 2, 2, 2}, 0.5);
    EXPECT_THROW(soft_dice_loss(p, Tensor<double>({1, 3, 2, 2, 1})), Error);
    EXPECT_THROW(soft_dice_loss(p, Tensor<double>({1, 3, 2, 2, 2}, 0.5)), Error);
    EXPECT_THROW(soft_dice_loss(p, Tensor<double>({1, 3, 2, 2, 2}), 0.0), Error);
}

// --- Adam -----------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParamsAndDecaysMoments) {
    Tensor<double> w({3}, std::vector<double>{1, -2, 3}), g({3});
    Tensor<double> m = Tensor<double>::zeros({3}), v = Tensor<double>::zeros({3});
    const Tensor<double> w0 = w;
    for (std::size_t t = 1; t <= 3; ++t) adam_update(w, g, m, v, 0.1, t);
    EXPECT_EQ(w, w0);

    Tensor<double> m2({3}, 0.5), v2({3}, 0.25);
    adam_update(w, g, m2, v2, 0.1, 4);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_DOUBLE_EQ(m2[i], 0.45);
        EXPECT_DOUBLE_EQ(v2[i], 0.25 * 0.999);
    }
}

TEST(Adam, FirstStepMovesBySignTimesLr) {
    Tensor<double> w({4}, std::vector<double>{0, 0, 0, 0}), g({4}, std::vector<double>{3, -0.01, 1e3, -7});
    Tensor<double> m = Tensor<double>::zeros({4}), v = Tensor<double>::zeros({4});
    adam_update(w, g, m, v, 0.01, 1);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w[i], -0.01 * (g[i] > 0 ? 1 : -1), 1e-8);
}

TEST(Adam, QuadraticTrajectoryMatchesScalarReference) {
    Tensor<double> w({1}, 1.0), m = Tensor<double>::zeros({1}), v = Tensor<double>::zeros({1});
    double rw = 1.0, rm = 0, rv = 0, prev = 1.0;
    for (int t = 1; t <= 10; ++t) {
        const double g = 2 * rw;
        rm = 0.9 * rm + 0.1 * g;
        rv = 0.999 * rv + 0.001 * g * g;
        const double mhat = rm / (1 - std::pow(0.9, t)), vhat = rv / (1 - std::pow(0.999, t));
        rw -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);

        adam_update(w, Tensor<double>({1}, 2 * w[0]), m, v, 0.1, static_cast<std::size_t>(t));
        EXPECT_NEAR(w[0], rw, 1e-12) << "step " << t;
        EXPECT_LT(w[0], prev);
        EXPECT_GT(w[0], 0.0);
        prev = w[0];
    }
}

TEST(Adam, ShapeDriftAndStepIndex) {
    Tensor<double> w({2}), g({3}), m({2}), v({2});
    EXPECT_THROW(adam_update(w, g, m, v, 0.1, 1), Error);
    EXPECT_THROW(adam_update(w, Tensor<double>({2}), m, v, 0.1, 0), Error);
}

TEST(Adam, ModelStepRequiresGradients) {
    auto m = init_params<double>(tiny_model(), 1);
    AdamState<double> st;
    EXPECT_THROW(adam_step(m, st, 1e-3), Error);
    EXPECT_EQ(st.t, 0u);
    zero_grad(m);
    auto before = m;
    adam_step(m, st, 1e-3);
    EXPECT_EQ(st.t, 1u);
    expect_same_params(m, before);
}

// --- scheduler ------------------------------------------------------------

TEST(PlateauScheduler, DecreasingLossKeepsRate) {
    PlateauScheduler s(1e-3);
    for (int e = 0; e < 50; ++e) EXPECT_EQ(s.update(1.0 - 0.01 * e), 1e-3);
}

TEST(PlateauScheduler, ConstantLossDecaysOnceAtEpochFive) {
    PlateauScheduler s(1e-3, 4, 0.5);
    for (int e = 1; e <= 4; ++e) EXPECT_EQ(s.update(0.7), 1e-3) << "epoch " << e;
    EXPECT_EQ(s.update(0.7), 5e-4);
    for (int e = 6; e <= 9; ++e) EXPECT_EQ(s.update(0.7), 5e-4) << "epoch " << e;
    EXPECT_EQ(s.update(0.7), 2.5e-4);
}

TEST(PlateauScheduler, SawtoothImprovingEveryThirdEpochNeverDecays) {
    PlateauScheduler s(1e-3);
    double best = 1.0;
    for (int e = 1; e <= 60; ++e) {
        double loss;
        if (e % 3 == 0) {
            best *= 0.95;
            loss = best;
        } else {
            loss = best + 0.3 * (e % 3);
        }
        EXPECT_EQ(s.update(loss), 1e-3) << "epoch " << e;
    }
}

TEST(PlateauScheduler, SubThresholdImprovementCountsAsStagnant) {
    PlateauScheduler s(1.0, 1, 0.5, 1e-4);
    s.update(1.0);
    EXPECT_EQ(s.update(1.0 - 1e-5), 0.5);
    EXPECT_THROW(s.update(std::nan("")), Error);
}

TEST(PlateauScheduler, RateIsNonIncreasing) {
    Rng rng(4);
    PlateauScheduler s(1.0, 2, 0.5);
    double prev = s.lr();
    for (int e = 0; e < 200; ++e) {
        const double lr = s.update(rng.uniform());
        EXPECT_LE(lr, prev);
        prev = lr;
    }
    EXPECT_LT(prev, 1.0);
}

// --- flips ----------------------------------------------------------------

TEST(Flip, NoFlagsIsIdentityAndDoubleFlipIsInvolution) {
    Rng rng(5);
    Tensor<float> x({2, 3, 4, 5});
    for (auto& v : x.values()) v = static_cast<float>(rng.normal());
    EXPECT_EQ(flip_spatial(x, {false, false, false}), x);
    for (int f = 0; f < 8; ++f) {
        const FlipFlags fl{bool(f & 4), bool(f & 2), bool(f & 1)};
        EXPECT_EQ(flip_spatial(flip_spatial(x, fl), fl), x);
    }
}

TEST(Flip, MapsCoordinatesPerAxis) {
    Tensor<float> x({1, 3, 4, 5});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(i);
    const auto y = flip_spatial(x, {true, false, true});
    for (std::size_t z = 0; z < 3; ++z)
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(y.at(0, z, r, c), x.at(0, 2 - z, r, 4 - c));
}

TEST(Flip, SameFlipsForInputAndTargetAndCountsPreserved) {
    const Sample s = make_sample(gen_phantom(small_phantoms(), 3));
    Rng rng(6);
    for (int rep = 0; rep < 8; ++rep) {
        const FlipFlags fl = draw_flips(rng);
        const Sample a = augment_flip(s, fl);
        EXPECT_EQ(a.input, flip_spatial(s.input, fl));
        EXPECT_EQ(a.target, flip_spatial(s.target, fl));
        double before = 0, after = 0;
        for (float v : s.target.values()) before += v;
        for (float v : a.target.values()) after += v;
        EXPECT_EQ(before, after);
    }
}

TEST(Flip, DrawnFlagsAreRoughlyFair) {
    Rng rng(7);
    std::array<int, 3> hits{};
    for (int i = 0; i < 3000; ++i) {
        const auto f = draw_flips(rng);
        for (int a = 0; a < 3; ++a) hits[a] += f[a];
    }
    for (int h : hits) EXPECT_NEAR(h, 1500, 4 * std::sqrt(750.0));
}

// --- init -----------------------------------------------------------------

TEST(Init, NormAndBiasDefaults) {
    auto m = init_params<float>(ModelConfig{}, 1);
    for_each_param(m, [](const std::string& n, const Param<float>& p) {
        const float expected = n.ends_with(".gamma") ? 1.f : 0.f;
        if (p.value.ndim() == 1) {
            for (float v : p.value.values()) EXPECT_EQ(v, expected) << n;
        }
    });
}

TEST(Init, SeededAndGlorotBounded) {
    auto a = init_params<float>(ModelConfig{}, 5), b = init_params<float>(ModelConfig{}, 5);
    auto c = init_params<float>(ModelConfig{}, 6);
    expect_same_params(a, b);
    bool differs = false;
    auto pa = param_list(a), pc = param_list(c);
    for (std::size_t i = 0; i < pa.size(); ++i) differs |= !(pa[i].second->value == pc[i].second->value);
    EXPECT_TRUE(differs);

    for (auto& [name, p] : pa) {
        const auto& w = p->value;
        if (w.ndim() != 5) continue;
        const double rf = double(w.dim(2) * w.dim(3) * w.dim(4));
        const double bound = std::sqrt(6.0 / ((double(w.dim(0)) + double(w.dim(1))) * rf));
        double sum = 0;
        for (float v : w.values()) {
            EXPECT_LE(std::fabs(v), bound * (1 + 1e-6)) << name;
            sum += v;
        }
        if (w.size() >= 10000) {
            const double sigma = bound / std::sqrt(3.0 * double(w.size()));
            EXPECT_LE(std::fabs(sum / double(w.size())), 3 * sigma) << name;
        }
    }
}

TEST(Init, DefaultSeedComesFromConfig) {
    auto cfg = tiny_model();
    auto a = init_params<float>(cfg), b = init_params<float>(cfg, cfg.seed);
    expect_same_params(a, b);
}

// --- training loop --------------------------------------------------------

TEST(TrainConfig, Validation) {
    TrainConfig t;
    EXPECT_NO_THROW(t.validate());
    for (auto mutate : std::vector<std::function<void(TrainConfig&)>>{
             [](TrainConfig& c) { c.learning_rate = -1; }, [](TrainConfig& c) { c.patience = 0; },
             [](TrainConfig& c) { c.batch_size = 0; }, [](TrainConfig& c) { c.loss_smooth = 0; },
             [](TrainConfig& c) { c.decay_factor = 1.0; }, [](TrainConfig& c) { c.epochs = 0; }}) {
        TrainConfig c;
        mutate(c);
        EXPECT_THROW(c.validate(), Error);
    }
}

TEST(Train, ZeroLearningRateKeepsInitialization) {
    auto tr = phantom_samples(3, 1), va = phantom_samples(1, 2);
    TrainConfig t;
    t.learning_rate = 0;
    t.epochs = 1;
    t.batch_size = 2;
    auto r = train(tiny_model(), t, tr, va);
    auto init = init_params<float>(tiny_model());
    expect_same_params(r.last, init);
    expect_same_params(r.best, init);
    ASSERT_EQ(r.history.epochs.size(), 1u);
    EXPECT_EQ(r.history.epochs[0].lr, 0.0);
}

TEST(Train, SameSeedIsBitwiseReproducible) {
    auto tr = phantom_samples(4, 3), va = phantom_samples(2, 4);
    TrainConfig t;
    t.epochs = 3;
    t.batch_size = 3;
    t.learning_rate = 2e-3;
    t.seed = 9;
    std::vector<EpochRecord> seen;
    auto a = train(tiny_model(), t, tr, va, [&](const EpochRecord& e) { seen.push_back(e); });
    auto b = train(tiny_model(), t, tr, va);
    EXPECT_EQ(a.history.epochs, b.history.epochs);
    EXPECT_EQ(a.history.to_csv(), b.history.to_csv());
    EXPECT_EQ(seen, a.history.epochs);
    EXPECT_EQ(a.best_epoch, b.best_epoch);
    expect_same_params(a.best, b.best);
    expect_same_params(a.last, b.last);

    t.seed = 10;
    auto c = train(tiny_model(), t, tr, va);
    EXPECT_NE(a.history.epochs[0].train_loss, c.history.epochs[0].train_loss);
}

TEST(Train, HistoryRecordsEveryEpoch) {
    auto tr = phantom_samples(2, 5), va = phantom_samples(1, 6);
    TrainConfig t;
    t.epochs = 4;
    t.batch_size = 1;
    auto r = train(tiny_model(), t, tr, va);
    ASSERT_EQ(r.history.epochs.size(), 4u);
    for (std::size_t e = 0; e < 4; ++e) {
        EXPECT_EQ(r.history.epochs[e].epoch, e + 1);
        EXPECT_GE(r.history.epochs[e].train_loss, 0.0);
        EXPECT_LT(r.history.epochs[e].train_loss, 1.0);
    }
    EXPECT_GE(r.best_epoch, 1u);
    EXPECT_LE(r.best_epoch, 4u);
    const std::string csv = r.history.to_csv();
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,train_loss,val_loss,lr,dice_wt,dice_tc,dice_et");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
    EXPECT_NE(csv.find("\n1,"), std::string::npos);
    EXPECT_NE(csv.find(",0.000500,"), std::string::npos);
}

TEST(Train, NonFiniteLossNamesTheBatch) {
    auto tr = phantom_samples(2, 7), va = phantom_samples(1, 8);
    tr[1].input[5] = std::nanf("");
    TrainConfig t;
    t.epochs = 1;
    t.batch_size = 1;
    t.augment_flip = false;
    try {
        train(tiny_model(), t, tr, va);
        FAIL() << "expected a numeric error";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::numeric);
        EXPECT_NE(std::string(e.what()).find("batch"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("p1"), std::string::npos) << e.what();
    }
}

TEST(Train, EmptySetsAreRejected) {
    auto s = phantom_samples(1, 9);
    EXPECT_THROW(train(tiny_model(), TrainConfig{}, {}, s), Error);
    EXPECT_THROW(train(tiny_model(), TrainConfig{}, s, {}), Error);
}

TEST(Train, SmallStepDoesNotIncreaseFrozenBatchLoss) {
    auto samples = phantom_samples(2, 10);
    std::vector<const Sample*> batch{&samples[0], &samples[1]};
    auto [xf, yf] = stack_batch(batch);
    const Tensor<double> x = xf.cast<double>(), y = yf.cast<double>();
    auto m = init_params<double>(tiny_model(), 3);
    ModelCache<double> cache;
    const auto before = soft_dice_loss(model_forward(m, x, &cache), y);
    zero_grad(m);
    model_backward(before.grad, m, cache);
    AdamState<double> st;
    adam_step(m, st, 1e-6);
    const double after = soft_dice_loss(model_forward(m, x), y).loss;
    EXPECT_LE(after, before.loss);
    EXPECT_LT(after, before.loss);
}

TEST(Evaluate, PerfectPredictorScoresOne) {
    auto samples = phantom_samples(1, 11);
    const auto& s = samples[0];
    Tensor<float> p = s.target.reshaped({1, 3, 16, 16, 16});
    const Shape e{16, 16, 16};
    for (std::size_t k = 0; k < 3; ++k) {
        Mask truth(e);
        for (std::size_t i = 0; i < truth.size(); ++i) truth[i] = s.target[k * truth.size() + i] != 0;
        EXPECT_EQ(dice(binarize(p.data() + k * truth.size(), e, 0.5), truth), 1.0);
    }
    EXPECT_EQ(soft_dice_loss(p, p).loss, 0.0);
}
