#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "data.hpp"
#include "error.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace adruwams {

struct TrainConfig {
    double learning_rate = 5e-4;
    std::size_t patience = 4;
    double decay_factor = 0.5;
    std::size_t epochs = 30;
    std::size_t batch_size = 4;
    std::uint64_t seed = 0;
    bool augment_flip = true;
    double loss_smooth = 1.0;

    void validate() const {
        require(std::isfinite(learning_rate) && learning_rate >= 0, "train: learning_rate must be finite and >= 0");
        require(patience >= 1, "train: patience must be >= 1");
        require(decay_factor > 0 && decay_factor < 1, "train: decay_factor must lie in (0, 1)");
        require(epochs >= 1, "train: epochs must be >= 1");
        require(batch_size >= 1, "train: batch_size must be >= 1");
        require(std::isfinite(loss_smooth) && loss_smooth > 0, "train: loss_smooth must be > 0");
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// ---------------------------------------------------------------------------
// Soft Dice loss

template <typename T>
struct LossResult {
    double loss = 0;
    Tensor<T> grad; ///< dLoss/dPred, same shape as pred
};

/// 1 - mean_c (2 sum(p t) + eps) / (sum p + sum t + eps); sums run over the
/// batch and all voxels of class c (axis 1).
template <typename T>
LossResult<T> soft_dice_loss(const Tensor<T>& pred, const Tensor<T>& target, double eps = 1.0) {
    require(pred.defined() && pred.shape() == target.shape(),
            "soft_dice_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    require(pred.ndim() >= 2, "soft_dice_loss: expected (N, C, ...) tensors");
    require(eps > 0, "soft_dice_loss: eps must be positive");
    for (T t : target.values()) require(t == T(0) || t == T(1), "soft_dice_loss: target must be binary");
    const std::size_t N = pred.dim(0), C = pred.dim(1), V = pred.size() / (N * C);
    std::vector<double> inter(C, 0), psum(C, 0), tsum(C, 0);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const T* p = pred.data() + (n * C + c) * V;
            const T* t = target.data() + (n * C + c) * V;
            double a = 0, b = 0, d = 0;
            for (std::size_t i = 0; i < V; ++i) {
                a += static_cast<double>(p[i]) * t[i];
                b += p[i];
                d += t[i];
            }
            inter[c] += a;
            psum[c] += b;
            tsum[c] += d;
        }
    LossResult<T> r;
    r.grad = Tensor<T>(pred.shape());
    std::vector<double> ga(C), gb(C);
    double score = 0;
    for (std::size_t c = 0; c < C; ++c) {
        const double num = 2 * inter[c] + eps, den = psum[c] + tsum[c] + eps;
        score += num / den;
        // d(num/den)/dp_i = (2 t_i den - num) / den^2, scaled by -1/C
        ga[c] = -2.0 / (den * static_cast<double>(C));
        gb[c] = num / (den * den * static_cast<double>(C));
    }
    r.loss = 1.0 - score / static_cast<double>(C);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * V;
            for (std::size_t i = 0; i < V; ++i) r.grad[off + i] = static_cast<T>(ga[c] * target[off + i] + gb[c]);
        }
    return r;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamState {
    std::vector<Tensor<T>> m, v;
    std::size_t t = 0; ///< completed steps
};

/// One bias-corrected Adam update of `w` in place; `t` is the 1-based step.
template <typename T>
void adam_update(Tensor<T>& w, const Tensor<T>& g, Tensor<T>& m, Tensor<T>& v, double lr, std::size_t t,
                 const AdamHyper& h = {}) {
    require(t >= 1, "adam: step index must be >= 1");
    require(g.shape() == w.shape() && m.shape() == w.shape() && v.shape() == w.shape(),
            "adam: state shape drift for parameter " + shape_str(w.shape()));
    const double c1 = 1 - std::pow(h.beta1, static_cast<double>(t));
    const double c2 = 1 - std::pow(h.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        const double mi = h.beta1 * m[i] + (1 - h.beta1) * gi;
        const double vi = h.beta2 * v[i] + (1 - h.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        w[i] = static_cast<T>(w[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + h.eps));
    }
}

/// Applies one step to every parameter of the model using its accumulated grad.
template <typename T>
void adam_step(ModelParams<T>& model, AdamState<T>& state, double lr, const AdamHyper& h = {}) {
    const auto params = param_list(model);
    if (state.m.empty()) {
        for (const auto& [name, p] : params) {
            state.m.push_back(Tensor<T>::zeros(p->value.shape()));
            state.v.push_back(Tensor<T>::zeros(p->value.shape()));
        }
    }
    require(state.m.size() == params.size(), "adam: optimizer state does not match the model");
    for (const auto& [name, p] : params) require(p->grad.defined(), "adam: parameter " + name + " has no gradient");
    ++state.t;
    for (std::size_t i = 0; i < params.size(); ++i)
        adam_update(params[i].second->value, params[i].second->grad, state.m[i], state.v[i], lr, state.t, h);
}

// ---------------------------------------------------------------------------
// Learning-rate decay on plateau

/// The first epoch has nothing to improve on and counts as stagnant. A loss
/// below best*(1 - threshold) is an improvement and resets the count; after
/// patience+1 stagnant epochs the rate is multiplied by `factor`.
class PlateauScheduler {
public:
    PlateauScheduler(double lr, std::size_t patience = 4, double factor = 0.5, double threshold = 1e-4)
        : lr_(lr), patience_(patience), factor_(factor), threshold_(threshold) {}

    double update(double loss) {
        require(std::isfinite(loss), "scheduler: loss must be finite", Errc::numeric);
        if (!has_best_) {
            has_best_ = true;
            best_ = loss;
            bad_ = 1;
        } else if (loss < best_ - threshold_ * std::fabs(best_)) {
            best_ = loss;
            bad_ = 0;
        } else {
            ++bad_;
        }
        if (bad_ > patience_) {
            lr_ *= factor_;
            bad_ = 0;
        }
        return lr_;
    }

    double lr() const { return lr_; }
    std::size_t stagnant_epochs() const { return bad_; }

private:
    double lr_;
    std::size_t patience_;
    double factor_, threshold_;
    double best_ = 0;
    bool has_best_ = false;
    std::size_t bad_ = 0;
};

// ---------------------------------------------------------------------------
// Flip augmentation

using FlipFlags = std::array<bool, 3>; ///< flip along D, H, W

inline FlipFlags draw_flips(Rng& rng) {
    FlipFlags f{};
    for (auto& b : f) b = rng.uniform() < 0.5;
    return f;
}

/// Reverses the last three axes selected by `flags`; works for any ndim >= 3.
template <typename T>
Tensor<T> flip_spatial(const Tensor<T>& x, const FlipFlags& flags) {
    require(x.ndim() >= 3, "flip: tensor needs at least 3 axes");
    const std::size_t nd = x.ndim(), D = x.dim(nd - 3), H = x.dim(nd - 2), W = x.dim(nd - 1);
    const std::size_t V = D * H * W, lead = x.size() / V;
    Tensor<T> out(x.shape());
    for (std::size_t b = 0; b < lead; ++b) {
        const T* src = x.data() + b * V;
        T* dst = out.data() + b * V;
        for (std::size_t z = 0; z < D; ++z) {
            const std::size_t sz = flags[0] ? D - 1 - z : z;
            for (std::size_t y = 0; y < H; ++y) {
                const std::size_t sy = flags[1] ? H - 1 - y : y;
                const T* row = src + (sz * H + sy) * W;
                T* o = dst + (z * H + y) * W;
                if (flags[2])
                    for (std::size_t i = 0; i < W; ++i) o[i] = row[W - 1 - i];
                else
                    std::copy(row, row + W, o);
            }
        }
    }
    return out;
}

inline Sample augment_flip(const Sample& s, const FlipFlags& flags) {
    return {s.case_id, flip_spatial(s.input, flags), flip_spatial(s.target, flags)};
}

/// Draws one flag per axis (p = 0.5) and applies it to inputs and targets alike.
inline Sample augment_flip(const Sample& s, Rng& rng) { return augment_flip(s, draw_flips(rng)); }

// ---------------------------------------------------------------------------
// Initialization

/// Glorot-uniform conv weights, zero biases, GN gamma 1 / beta 0. Tensors are
/// filled in parameter visit order from a single generator.
template <typename T>
void init_params(ModelParams<T>& m, std::uint64_t seed) {
    Rng rng(seed);
    for_each_param(m, [&](const std::string& name, Param<T>& p) {
        auto ends_with = [&](const char* s) {
            const std::string suf(s);
            return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
        };
        if (ends_with(".gamma")) {
            p.value.fill(T(1));
        } else if (ends_with(".weight") && p.value.ndim() == 5) {
            const double receptive = static_cast<double>(p.value.size() / (p.value.dim(0) * p.value.dim(1)));
            const double bound = std::sqrt(6.0 / ((static_cast<double>(p.value.dim(0)) + p.value.dim(1)) * receptive));
            for (auto& w : p.value.values()) w = static_cast<T>(rng.uniform(-bound, bound));
        } else {
            p.value.fill(T(0));
        }
        p.grad = Tensor<T>();
    });
}

template <typename T = float>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams<T> m = make_model<T>(cfg);
    init_params(m, seed);
    return m;
}

template <typename T = float>
ModelParams<T> init_params(const ModelConfig& cfg) {
    return init_params<T>(cfg, cfg.seed);
}

// ---------------------------------------------------------------------------
// Batching and evaluation helpers

/// Stacks samples (C, D, H, W) into (N, C, D, H, W) inputs and targets.
inline std::pair<Tensor<float>, Tensor<float>> stack_batch(const std::vector<const Sample*>& batch) {
    require(!batch.empty(), "empty batch");
    const Shape in = batch[0]->input.shape(), tg = batch[0]->target.shape();
    Shape bi{batch.size()}, bt{batch.size()};
    bi.insert(bi.end(), in.begin(), in.end());
    bt.insert(bt.end(), tg.begin(), tg.end());
    Tensor<float> x(bi), y(bt);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        require(batch[i]->input.shape() == in && batch[i]->target.shape() == tg,
                "batch: sample " + batch[i]->case_id + " has a different extent");
        std::copy(batch[i]->input.values().begin(), batch[i]->input.values().end(), x.data() + i * batch[i]->input.size());
        std::copy(batch[i]->target.values().begin(), batch[i]->target.values().end(), y.data() + i * batch[i]->target.size());
    }
    return {std::move(x), std::move(y)};
}

/// Forward pass on a single sample; returns (1, classes, D, H, W).
template <typename T>
Tensor<T> predict(const ModelParams<T>& m, const Sample& s) {
    Shape sh{1};
    sh.insert(sh.end(), s.input.shape().begin(), s.input.shape().end());
    return model_forward(m, s.input.template cast<T>().reshaped(sh));
}

struct EvalSummary {
    double loss = 0;                   ///< mean per-sample soft Dice loss
    std::array<double, 3> dice{0, 0, 0}; ///< mean binary Dice (threshold 0.5) per class
    double mean_dice() const { return (dice[0] + dice[1] + dice[2]) / 3.0; }
};

inline EvalSummary evaluate_samples(const ModelParams<float>& m, const std::vector<Sample>& samples, double eps = 1.0) {
    require(!samples.empty(), "evaluate: no samples");
    EvalSummary s;
    for (const auto& smp : samples) {
        const Tensor<float> probs = predict(m, smp);
        s.loss += soft_dice_loss(probs, smp.target.reshaped(probs.shape()), eps).loss;
        const Shape e{smp.target.dim(1), smp.target.dim(2), smp.target.dim(3)};
        const std::size_t V = shape_volume(e);
        for (std::size_t k = 0; k < 3; ++k) {
            Mask truth(e);
            for (std::size_t i = 0; i < V; ++i) truth[i] = smp.target[k * V + i] != 0;
            s.dice[k] += dice(binarize(probs.data() + k * V, e, 0.5), truth);
        }
    }
    const double n = static_cast<double>(samples.size());
    s.loss /= n;
    for (auto& d : s.dice) d /= n;
    return s;
}

// ---------------------------------------------------------------------------
// History

struct EpochRecord {
    std::size_t epoch = 0; ///< 1-based
    double train_loss = 0, val_loss = 0, lr = 0;
    std::array<double, 3> dice{0, 0, 0};
    friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;

    std::string to_csv() const {
        std::ostringstream os;
        os << "epoch,train_loss,val_loss,lr,dice_wt,dice_tc,dice_et\n" << std::fixed << std::setprecision(6);
        for (const auto& e : epochs)
            os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.lr << ',' << e.dice[0] << ','
               << e.dice[1] << ',' << e.dice[2] << '\n';
        return os.str();
    }
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
    ModelParams<float> best;   ///< parameters at the best validation mean Dice
    ModelParams<float> last;
    TrainHistory history;
    std::size_t best_epoch = 0;
    double best_dice = -1;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Epoch e shuffles the training order and draws flips from a generator
/// seeded with mix_seed(seed, e); initialization uses the model config seed.
inline TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg, const std::vector<Sample>& train_set,
                         const std::vector<Sample>& val_set, const EpochCallback& on_epoch = {}) {
    mcfg.validate();
    tcfg.validate();
    require(!train_set.empty(), "train: training set is empty");
    require(!val_set.empty(), "train: validation set is empty");

    TrainResult r{init_params<float>(mcfg), {}, {}, 0, -1};
    ModelParams<float> model = r.best;
    AdamState<float> adam;
    PlateauScheduler sched(tcfg.learning_rate, tcfg.patience, tcfg.decay_factor);
    double lr = tcfg.learning_rate;

    for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
        Rng rng(mix_seed(tcfg.seed, epoch));
        std::vector<std::size_t> order(train_set.size());
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);

        double loss_sum = 0;
        std::size_t batch_no = 0;
        for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size, ++batch_no) {
            const std::size_t end = std::min(order.size(), start + tcfg.batch_size);
            std::vector<Sample> augmented;
            augmented.reserve(end - start);
            std::vector<const Sample*> batch;
            for (std::size_t i = start; i < end; ++i) {
                const Sample& s = train_set[order[i]];
                if (tcfg.augment_flip) {
                    augmented.push_back(augment_flip(s, rng));
                    batch.push_back(&augmented.back());
                } else {
                    batch.push_back(&s);
                }
            }
            auto [x, y] = stack_batch(batch);
            ModelCache<float> cache;
            const Tensor<float> probs = model_forward(model, x, &cache);
            const auto loss = soft_dice_loss(probs, y, tcfg.loss_smooth);
            if (!std::isfinite(loss.loss))
                fail(Errc::numeric, "non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                        std::to_string(batch_no) + " (first case " + batch[0]->case_id + ")");
            zero_grad(model);
            model_backward(loss.grad, model, cache);
            adam_step(model, adam, lr);
            loss_sum += loss.loss * static_cast<double>(end - start);
        }

        const EvalSummary val = evaluate_samples(model, val_set, tcfg.loss_smooth);
        if (!std::isfinite(val.loss))
            fail(Errc::numeric, "non-finite validation loss at epoch " + std::to_string(epoch));
        EpochRecord rec{epoch, loss_sum / static_cast<double>(train_set.size()), val.loss, lr, val.dice};
        r.history.epochs.push_back(rec);
        if (val.mean_dice() > r.best_dice) {
            r.best_dice = val.mean_dice();
            r.best_epoch = epoch;
            r.best = model;
        }
        lr = sched.update(val.loss);
        if (on_epoch) on_epoch(rec);
    }
    for_each_param(model, [](const std::string&, Param<float>& p) { p.grad = Tensor<float>(); });
    for_each_param(r.best, [](const std::string&, Param<float>& p) { p.grad = Tensor<float>(); });
    r.last = std::move(model);
    return r;
}

} // namespace adruwams
