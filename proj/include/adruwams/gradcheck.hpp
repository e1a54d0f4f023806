#pragma once

// Central finite-difference verification of every backward pass, in double.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "model.hpp"
#include "ops.hpp"
#include "random.hpp"
#include "training.hpp"

namespace adruwams {

struct GradCheckResult {
    std::string name;       ///< "<op>/<argument>"
    double max_rel_error = 0;
    double tolerance = 0;
    std::size_t coordinates = 0;
    bool passed() const { return max_rel_error <= tolerance; }
};

/// ||a - n||_inf / max(||a||_inf, ||n||_inf); 0 when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& n) {
    require(a.size() == n.size(), "relative_error: length mismatch");
    double diff = 0, scale = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, std::fabs(a[i] - n[i]));
        scale = std::max({scale, std::fabs(a[i]), std::fabs(n[i])});
    }
    return scale < 1e-300 ? 0.0 : diff / scale;
}

struct GradProbe {
    std::string group;            ///< results are reported per group
    Tensor<double>* value = nullptr;
    std::size_t max_coords = 0;   ///< 0 = every element, else a random sample
};

using GradForward = std::function<Tensor<double>()>;
/// Given dLoss/dOutput (after a fresh forward), returns one gradient per probe.
using GradBackward = std::function<std::vector<Tensor<double>>(const Tensor<double>&)>;

/// Checks d(sum(out * R))/d(probe) for a random projection R against central
/// differences with step h.
inline std::vector<GradCheckResult> check_gradients(const std::string& op, const std::vector<GradProbe>& probes,
                                                    const GradForward& forward, const GradBackward& backward,
                                                    Rng& rng, double tol, double h = 1e-5) {
    const Tensor<double> out = forward();
    Tensor<double> proj(out.shape());
    for (auto& v : proj.values()) v = rng.normal();
    const auto grads = backward(proj);
    require(grads.size() == probes.size(), "gradcheck: backward returned the wrong number of gradients");
    auto objective = [&] {
        const Tensor<double> y = forward();
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * proj[i];
        return s;
    };
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
    std::vector<std::string> order;
    for (std::size_t p = 0; p < probes.size(); ++p) {
        Tensor<double>& x = *probes[p].value;
        require(grads[p].shape() == x.shape(), "gradcheck: " + op + "/" + probes[p].group + " gradient shape " +
                                                   shape_str(grads[p].shape()) + " differs from " + shape_str(x.shape()));
        std::vector<std::size_t> coords;
        if (probes[p].max_coords == 0 || probes[p].max_coords >= x.size()) {
            coords.resize(x.size());
            for (std::size_t i = 0; i < x.size(); ++i) coords[i] = i;
        } else {
            for (std::size_t i = 0; i < probes[p].max_coords; ++i) coords.push_back(rng.index(x.size()));
        }
        if (!groups.count(probes[p].group)) order.push_back(probes[p].group);
        auto& [an, num] = groups[probes[p].group];
        for (std::size_t i : coords) {
            const double saved = x[i];
            x[i] = saved + h;
            const double fp = objective();
            x[i] = saved - h;
            const double fm = objective();
            x[i] = saved;
            an.push_back(grads[p][i]);
            num.push_back((fp - fm) / (2 * h));
        }
    }
    std::vector<GradCheckResult> res;
    for (const auto& g : order) {
        const auto& [an, num] = groups[g];
        res.push_back({op + "/" + g, relative_error(an, num), tol, an.size()});
    }
    return res;
}

namespace detail {

inline Tensor<double> random_tensor(Rng& rng, Shape s, double scale = 1.0, double shift = 0.0) {
    Tensor<double> t(std::move(s));
    for (auto& v : t.values()) v = shift + scale * rng.normal();
    return t;
}

/// Values bounded away from zero so ReLU kinks stay outside the FD stencil.
inline Tensor<double> away_from_zero(Rng& rng, Shape s) {
    Tensor<double> t(std::move(s));
    for (auto& v : t.values()) {
        const double u = rng.uniform(0.05, 1.5);
        v = rng.uniform() < 0.5 ? -u : u;
    }
    return t;
}

struct ParamCollector {
    std::vector<std::pair<std::string, Param<double>*>> out;
    void operator()(const std::string& n, Param<double>& p) { out.emplace_back(n, &p); }
};

inline void randomize(std::vector<std::pair<std::string, Param<double>*>>& ps, Rng& rng) {
    for (auto& [name, p] : ps) {
        const bool gamma = name.size() > 6 && name.ends_with(".gamma");
        const double scale = p->value.ndim() == 5 ? 1.0 / std::sqrt(static_cast<double>(p->value.size() / p->value.dim(0)))
                                                  : 0.2;
        for (auto& v : p->value.values()) v = (gamma ? 1.0 : 0.0) + scale * rng.normal();
    }
}

inline std::vector<GradProbe> probes_for(std::vector<std::pair<std::string, Param<double>*>>& ps,
                                         const std::string& group, std::size_t max_coords = 0) {
    std::vector<GradProbe> out;
    for (auto& [name, p] : ps) out.push_back({group, &p->value, max_coords});
    return out;
}

inline std::vector<Tensor<double>> take_grads(std::vector<std::pair<std::string, Param<double>*>>& ps) {
    std::vector<Tensor<double>> g;
    for (auto& [name, p] : ps) g.push_back(p->grad.defined() ? p->grad : Tensor<double>::zeros(p->value.shape()));
    return g;
}

inline void clear_grads(std::vector<std::pair<std::string, Param<double>*>>& ps) {
    for (auto& [name, p] : ps) p->grad = Tensor<double>();
}

inline void append(std::vector<GradCheckResult>& dst, std::vector<GradCheckResult> src) {
    dst.insert(dst.end(), src.begin(), src.end());
}

} // namespace detail

struct GradCheckOptions {
    double tolerance = 1e-4;         ///< layers and composite blocks
    double element_tolerance = 1e-6; ///< pointwise ops and the loss
    std::uint64_t seed = 1234;
    bool include_model = true;
};

/// Full suite: primitive ops, blocks, the loss and a levels=2 model.
inline std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& opt = {}) {
    using detail::append;
    using detail::away_from_zero;
    using detail::random_tensor;
    using PL = std::vector<std::pair<std::string, Param<double>*>>;
    Rng rng(opt.seed);
    std::vector<GradCheckResult> out;
    const double et = opt.element_tolerance, lt = opt.tolerance;

    // Pointwise ops
    {
        Tensor<double> x = away_from_zero(rng, {2, 3, 2, 3, 2});
        append(out, check_gradients("relu", {{"input", &x}}, [&] { return ops::relu(x); },
                                    [&](const Tensor<double>& g) { return std::vector{ops::relu_backward(g, x)}; }, rng, et));
    }
    {
        Tensor<double> x = random_tensor(rng, {2, 3, 2, 3, 2}, 2.0);
        append(out, check_gradients(
                        "sigmoid", {{"input", &x}}, [&] { return ops::sigmoid(x); },
                        [&](const Tensor<double>& g) { return std::vector{ops::sigmoid_backward(g, ops::sigmoid(x))}; }, rng,
                        et));
    }
    for (auto [name, op, bc] : {std::tuple{"add", ops::Binary::add, false}, std::tuple{"mul", ops::Binary::mul, false},
                                std::tuple{"mul_broadcast", ops::Binary::mul, true}}) {
        Tensor<double> a = random_tensor(rng, {2, 3, 2, 2, 3});
        Tensor<double> b = random_tensor(rng, {2, bc ? 1u : 3u, 2, 2, 3});
        append(out, check_gradients(
                        name, {{"a", &a}, {"b", &b}}, [&] { return ops::elementwise(a, b, op); },
                        [&](const Tensor<double>& g) {
                            auto [ga, gb] = ops::elementwise_backward(g, a, b, op);
                            return std::vector{ga, gb};
                        },
                        rng, et));
    }
    {
        Tensor<double> a = random_tensor(rng, {2, 2, 2, 2, 2}), b = random_tensor(rng, {2, 3, 2, 2, 2});
        append(out, check_gradients(
                        "concat", {{"a", &a}, {"b", &b}}, [&] { return ops::concat_channels(a, b); },
                        [&](const Tensor<double>& g) {
                            auto [ga, gb] = ops::split_channels(g, 2);
                            return std::vector{ga, gb};
                        },
                        rng, et));
    }
    {
        Tensor<double> logits = random_tensor(rng, {2, 3, 3, 2, 3}, 1.5);
        Tensor<double> target(logits.shape());
        for (auto& v : target.values()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
        append(out, check_gradients(
                        "soft_dice_loss", {{"pred", &logits}},
                        [&] { return Tensor<double>({1}, soft_dice_loss(ops::sigmoid(logits), target).loss); },
                        [&](const Tensor<double>& g) {
                            const auto p = ops::sigmoid(logits);
                            auto r = soft_dice_loss(p, target);
                            for (auto& v : r.grad.values()) v *= g[0];
                            return std::vector{ops::sigmoid_backward(r.grad, p)};
                        },
                        rng, et));
    }

    // Layers
    for (auto [name, cin, cout, k, stride, pad, ext] :
         {std::tuple{"conv3d_k3", 2u, 3u, 3u, 1u, 1u, 4u}, std::tuple{"conv3d_k1", 3u, 2u, 1u, 1u, 0u, 3u},
          std::tuple{"conv3d_k3_s2", 2u, 2u, 3u, 2u, 1u, 5u}, std::tuple{"conv3d_k5", 2u, 1u, 5u, 1u, 2u, 4u}}) {
        const ops::ConvSpec spec{cin, cout, k, stride, pad};
        Tensor<double> x = random_tensor(rng, {2, cin, ext, ext, ext});
        Tensor<double> w = random_tensor(rng, {cout, cin, k, k, k}, 0.5), b = random_tensor(rng, {cout});
        append(out, check_gradients(
                        name, {{"input", &x}, {"weight", &w}, {"bias", &b}}, [&] { return ops::conv3d(x, w, b, spec); },
                        [&](const Tensor<double>& g) {
                            auto r = ops::conv3d_backward(g, x, w, spec);
                            return std::vector{r.input, r.weight, r.bias};
                        },
                        rng, lt));
    }
    {
        Tensor<double> x = random_tensor(rng, {2, 3, 2, 3, 2});
        Tensor<double> w = random_tensor(rng, {3, 2, 2, 2, 2}, 0.5), b = random_tensor(rng, {2});
        append(out, check_gradients(
                        "conv_transpose3d", {{"input", &x}, {"weight", &w}, {"bias", &b}},
                        [&] { return ops::conv_transpose3d(x, w, b); },
                        [&](const Tensor<double>& g) {
                            auto r = ops::conv_transpose3d_backward(g, x, w);
                            return std::vector{r.input, r.weight, r.bias};
                        },
                        rng, lt));
    }
    {
        Tensor<double> x = random_tensor(rng, {2, 2, 4, 4, 2});
        append(out, check_gradients(
                        "maxpool3d", {{"input", &x}}, [&] { return ops::maxpool3d(x).out; },
                        [&](const Tensor<double>& g) {
                            auto r = ops::maxpool3d(x);
                            return std::vector{ops::maxpool3d_backward(g, r.argmax, x.shape())};
                        },
                        rng, lt));
    }
    {
        Tensor<double> x = random_tensor(rng, {2, 4, 3, 2, 3}, 3.0, 1.0);
        Tensor<double> gamma = random_tensor(rng, {4}, 0.3, 1.0), beta = random_tensor(rng, {4}, 0.3);
        append(out, check_gradients(
                        "group_norm", {{"input", &x}, {"gamma", &gamma}, {"beta", &beta}},
                        [&] { return ops::group_norm(x, gamma, beta, 2); },
                        [&](const Tensor<double>& g) {
                            ops::GroupNormCache<double> c;
                            ops::group_norm(x, gamma, beta, 2, 1e-5, &c);
                            auto r = ops::group_norm_backward(g, c, gamma);
                            return std::vector{r.input, r.gamma, r.beta};
                        },
                        rng, lt));
    }

    // Blocks: input probe plus every parameter tensor.
    auto block_check = [&](const std::string& name, std::vector<Tensor<double>*> inputs, PL& ps, GradForward fwd,
                           std::function<std::vector<Tensor<double>>(const Tensor<double>&)> bwd_inputs) {
        detail::randomize(ps, rng);
        std::vector<GradProbe> probes;
        for (std::size_t i = 0; i < inputs.size(); ++i)
            probes.push_back({inputs.size() == 1 ? "input" : "input" + std::to_string(i), inputs[i], 0});
        auto pp = detail::probes_for(ps, "params");
        probes.insert(probes.end(), pp.begin(), pp.end());
        append(out, check_gradients(
                        name, probes, fwd,
                        [&](const Tensor<double>& g) {
                            detail::clear_grads(ps);
                            auto gi = bwd_inputs(g);
                            auto gp = detail::take_grads(ps);
                            gi.insert(gi.end(), gp.begin(), gp.end());
                            return gi;
                        },
                        rng, lt));
    };

    for (auto [name, cin, cout] : {std::tuple{"res_block_identity", 4u, 4u}, std::tuple{"res_block_projection", 2u, 4u}}) {
        auto p = ResBlockParams<double>::make(cin, cout);
        detail::ParamCollector col;
        detail::visit_res("res", p, col);
        Tensor<double> x = random_tensor(rng, {1, cin, 3, 3, 3});
        block_check(name, {&x}, col.out, [&] { return res_block_forward(x, p); },
                    [&](const Tensor<double>& g) {
                        ResBlockCache<double> c;
                        res_block_forward(x, p, &c);
                        return std::vector{res_block_backward(g, p, c)};
                    });
    }
    {
        auto p = AttentionGateParams<double>::make(4, 4, attention_channels(4));
        detail::ParamCollector col;
        detail::visit_gate("gate", p, col);
        Tensor<double> gate = random_tensor(rng, {1, 4, 3, 3, 2}), xd = random_tensor(rng, {1, 4, 3, 3, 2});
        block_check("attention_gate", {&gate, &xd}, col.out, [&] { return attention_gate_forward(gate, xd, p).features; },
                    [&](const Tensor<double>& g) {
                        AttentionGateCache<double> c;
                        attention_gate_forward(gate, xd, p, &c);
                        auto [gg, gx] = attention_gate_backward(g, p, c);
                        return std::vector{gg, gx};
                    });
    }
    {
        auto p = MSAParams<double>::make(3);
        detail::ParamCollector col;
        detail::visit_msa("msa", p, col);
        Tensor<double> f = random_tensor(rng, {1, 3, 4, 3, 4});
        block_check("msa", {&f}, col.out, [&] { return msa_forward(f, p).features; },
                    [&](const Tensor<double>& g) {
                        MSACache<double> c;
                        msa_forward(f, p, &c);
                        return std::vector{msa_backward(g, p, c)};
                    });
    }
    {
        EncoderParams<double> p{ResBlockParams<double>::make(2, 4), ResBlockParams<double>::make(4, 4)};
        detail::ParamCollector col;
        detail::visit_encoder("enc", p, col);
        Tensor<double> x = random_tensor(rng, {1, 2, 4, 4, 2});
        // Project skip and pooled outputs through one concatenated tensor.
        auto fwd = [&] {
            auto e = encoder_block_forward(x, p);
            Tensor<double> flat({e.skip.size() + e.down.size()});
            std::copy(e.skip.values().begin(), e.skip.values().end(), flat.data());
            std::copy(e.down.values().begin(), e.down.values().end(), flat.data() + e.skip.size());
            return flat;
        };
        block_check("encoder_block", {&x}, col.out, fwd, [&](const Tensor<double>& g) {
            EncoderCache<double> c;
            auto e = encoder_block_forward(x, p, &c);
            Tensor<double> gs(e.skip.shape()), gd(e.down.shape());
            std::copy(g.data(), g.data() + gs.size(), gs.data());
            std::copy(g.data() + gs.size(), g.data() + g.size(), gd.data());
            return std::vector{encoder_block_backward(gs, gd, p, c)};
        });
    }
    {
        DecoderParams<double> p{UpLayer<double>::make(8, 4), AttentionGateParams<double>::make(4, 4, attention_channels(4)),
                                MSAParams<double>::make(4), ResBlockParams<double>::make(8, 4),
                                ResBlockParams<double>::make(4, 4)};
        detail::ParamCollector col;
        detail::visit_decoder("dec", p, col);
        Tensor<double> below = random_tensor(rng, {1, 8, 2, 2, 1}), skip = random_tensor(rng, {1, 4, 4, 4, 2});
        block_check("decoder_block", {&below, &skip}, col.out, [&] { return decoder_block_forward(below, skip, p); },
                    [&](const Tensor<double>& g) {
                        DecoderCache<double> c;
                        decoder_block_forward(below, skip, p, &c);
                        auto [gb, gs] = decoder_block_backward(g, p, c);
                        return std::vector{gb, gs};
                    });
    }

    // Whole network followed by the loss, sampled coordinates.
    if (opt.include_model) {
        ModelConfig cfg;
        cfg.levels = 2;
        cfg.base_filters = 4;
        cfg.bottleneck_filters = 8;
        ModelParams<double> m = init_params<double>(cfg, opt.seed);
        PL ps = param_list(m);
        for (auto& [name, p] : ps)
            if (p->value.ndim() == 1)
                for (auto& v : p->value.values()) v += 0.1 * rng.normal();
        Tensor<double> x = random_tensor(rng, {1, cfg.in_channels, 8, 8, 8});
        Tensor<double> target({1, cfg.out_classes, 8, 8, 8});
        for (auto& v : target.values()) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
        std::vector<GradProbe> probes{{"input", &x, 48}};
        auto pp = detail::probes_for(ps, "params", 2);
        probes.insert(probes.end(), pp.begin(), pp.end());
        append(out, check_gradients(
                        "model", probes,
                        [&] { return Tensor<double>({1}, soft_dice_loss(model_forward(m, x), target).loss); },
                        [&](const Tensor<double>& g) {
                            ModelCache<double> c;
                            auto probs = model_forward(m, x, &c);
                            auto loss = soft_dice_loss(probs, target);
                            for (auto& v : loss.grad.values()) v *= g[0];
                            detail::clear_grads(ps);
                            std::vector<Tensor<double>> grads{model_backward(loss.grad, m, c)};
                            auto gp = detail::take_grads(ps);
                            grads.insert(grads.end(), gp.begin(), gp.end());
                            return grads;
                        },
                        rng, lt));
    }
    return out;
}

} // namespace adruwams
