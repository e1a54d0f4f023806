#pragma once

// Dual-residual attention U-Net: residual blocks, attention gates and
// multiscale spatial attention assembled into an encoder / bottleneck /
// decoder network, each block with a hand-written backward pass.
//
// Note on the attention gate: the gating signal G is the encoder skip and the
// gated features are the upsampled decoder features X_dec, so the gate scales
// decoder features. Classic Attention U-Net gates the skip instead.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "ops.hpp"
#include "tensor.hpp"

namespace adruwams {

struct ModelConfig {
    std::size_t in_channels = 4;
    std::size_t out_classes = 3;
    std::size_t base_filters = 8;
    std::size_t levels = 4;
    std::size_t bottleneck_filters = 128;
    std::uint64_t seed = 0;

    std::size_t level_width(std::size_t level) const { return base_filters << level; }
    std::size_t required_divisor() const { return std::size_t{1} << levels; }

    void validate() const {
        require(in_channels >= 1, "model: in_channels must be >= 1");
        require(out_classes >= 1, "model: out_classes must be >= 1");
        require(base_filters >= 1, "model: base_filters must be >= 1");
        require(levels >= 1 && levels <= 8, "model: levels must be in [1, 8]");
        require(bottleneck_filters >= 1, "model: bottleneck_filters must be >= 1");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// GroupNorm group count: 4 when the width allows it, else a single group.
inline std::size_t norm_groups(std::size_t channels) { return channels % 4 == 0 ? 4 : 1; }

/// Intermediate width of the attention gate.
inline std::size_t attention_channels(std::size_t channels) { return std::max<std::size_t>(1, channels / 2); }

inline constexpr std::array<std::size_t, 3> msa_kernels{3, 5, 7};

template <typename T>
struct Param {
    Tensor<T> value;
    Tensor<T> grad;
};

template <typename T>
struct ConvLayer {
    ops::ConvSpec spec;
    Param<T> weight;
    Param<T> bias;

    static ConvLayer make(std::size_t cin, std::size_t cout, std::size_t k) {
        ConvLayer l;
        l.spec = ops::same_conv(cin, cout, k);
        l.weight.value = Tensor<T>::zeros({cout, cin, k, k, k});
        l.bias.value = Tensor<T>::zeros({cout});
        return l;
    }
};

template <typename T>
struct NormLayer {
    std::size_t groups = 1;
    double eps = 1e-5;
    Param<T> gamma;
    Param<T> beta;

    static NormLayer make(std::size_t channels) {
        NormLayer l;
        l.groups = norm_groups(channels);
        l.gamma.value = Tensor<T>({channels}, T(1));
        l.beta.value = Tensor<T>::zeros({channels});
        return l;
    }
};

/// Transposed 2x2x2 / stride-2 upsampling; weight is (Cin, Cout, 2, 2, 2).
template <typename T>
struct UpLayer {
    Param<T> weight;
    Param<T> bias;

    static UpLayer make(std::size_t cin, std::size_t cout) {
        UpLayer l;
        l.weight.value = Tensor<T>::zeros({cin, cout, 2, 2, 2});
        l.bias.value = Tensor<T>::zeros({cout});
        return l;
    }
};

template <typename T>
struct ResBlockParams {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    ConvLayer<T> conv1, conv2;
    NormLayer<T> gn1, gn2;
    // Projection shortcut; present iff in_channels != out_channels.
    std::optional<ConvLayer<T>> shortcut_conv;
    std::optional<NormLayer<T>> shortcut_gn;

    static ResBlockParams make(std::size_t cin, std::size_t cout) {
        ResBlockParams p;
        p.in_channels = cin;
        p.out_channels = cout;
        p.conv1 = ConvLayer<T>::make(cin, cout, 3);
        p.gn1 = NormLayer<T>::make(cout);
        p.conv2 = ConvLayer<T>::make(cout, cout, 3);
        p.gn2 = NormLayer<T>::make(cout);
        if (cin != cout) {
            p.shortcut_conv = ConvLayer<T>::make(cin, cout, 1);
            p.shortcut_gn = NormLayer<T>::make(cout);
        }
        p.check();
        return p;
    }

    bool has_projection() const { return shortcut_conv.has_value(); }

    void check() const {
        const bool need = in_channels != out_channels;
        require(need == shortcut_conv.has_value() && need == shortcut_gn.has_value(),
                "residual block " + std::to_string(in_channels) + "->" + std::to_string(out_channels) +
                    (need ? " requires a projection shortcut" : " must use the identity shortcut"));
    }
};

template <typename T>
struct AttentionGateParams {
    ConvLayer<T> gate_conv;  ///< G -> F_int
    NormLayer<T> gate_gn;
    ConvLayer<T> input_conv; ///< X_dec -> F_int
    NormLayer<T> input_gn;
    ConvLayer<T> psi_conv;   ///< F_int -> 1

    static AttentionGateParams make(std::size_t gate_channels, std::size_t input_channels,
                                    std::size_t inter_channels) {
        return {ConvLayer<T>::make(gate_channels, inter_channels, 1), NormLayer<T>::make(inter_channels),
                ConvLayer<T>::make(input_channels, inter_channels, 1), NormLayer<T>::make(inter_channels),
                ConvLayer<T>::make(inter_channels, 1, 1)};
    }
};

template <typename T>
struct MSAParams {
    std::array<ConvLayer<T>, 3> convs; ///< kernels 3, 5, 7; each C -> 1, shape preserving

    static MSAParams make(std::size_t channels) {
        MSAParams p;
        for (std::size_t i = 0; i < 3; ++i) p.convs[i] = ConvLayer<T>::make(channels, 1, msa_kernels[i]);
        return p;
    }
};

template <typename T>
struct EncoderParams {
    ResBlockParams<T> first, second;
};

template <typename T>
struct DecoderParams {
    UpLayer<T> up;
    AttentionGateParams<T> gate;
    MSAParams<T> msa;
    ResBlockParams<T> first, second;
};

template <typename T>
struct ModelParams {
    ModelConfig config;
    std::vector<EncoderParams<T>> encoders;   ///< index = level, full resolution first
    ResBlockParams<T> bottleneck_first, bottleneck_second;
    std::vector<DecoderParams<T>> decoders;   ///< index = level of the output resolution
    ConvLayer<T> head;
};

template <typename T>
ModelParams<T> make_model(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams<T> m;
    m.config = cfg;
    std::size_t c = cfg.in_channels;
    for (std::size_t l = 0; l < cfg.levels; ++l) {
        const std::size_t w = cfg.level_width(l);
        m.encoders.push_back({ResBlockParams<T>::make(c, w), ResBlockParams<T>::make(w, w)});
        c = w;
    }
    m.bottleneck_first = ResBlockParams<T>::make(c, cfg.bottleneck_filters);
    m.bottleneck_second = ResBlockParams<T>::make(cfg.bottleneck_filters, cfg.bottleneck_filters);
    m.decoders.resize(cfg.levels);
    std::size_t below = cfg.bottleneck_filters;
    for (std::size_t l = cfg.levels; l-- > 0;) {
        const std::size_t w = cfg.level_width(l);
        auto& d = m.decoders[l];
        d.up = UpLayer<T>::make(below, w);
        d.gate = AttentionGateParams<T>::make(w, w, attention_channels(w));
        d.msa = MSAParams<T>::make(w);
        d.first = ResBlockParams<T>::make(2 * w, w);
        d.second = ResBlockParams<T>::make(w, w);
        below = w;
    }
    m.head = ConvLayer<T>::make(cfg.base_filters, cfg.out_classes, 1);
    return m;
}

// ---------------------------------------------------------------------------
// Parameter traversal (stable order and names; used by init, optimizer,
// checkpoints and gradient checks).

namespace detail {

template <typename L, typename F>
void visit_conv(const std::string& name, L& l, F& f) {
    f(name + ".weight", l.weight);
    f(name + ".bias", l.bias);
}
template <typename L, typename F>
void visit_norm(const std::string& name, L& l, F& f) {
    f(name + ".gamma", l.gamma);
    f(name + ".beta", l.beta);
}
template <typename R, typename F>
void visit_res(const std::string& name, R& r, F& f) {
    visit_conv(name + ".conv1", r.conv1, f);
    visit_norm(name + ".gn1", r.gn1, f);
    visit_conv(name + ".conv2", r.conv2, f);
    visit_norm(name + ".gn2", r.gn2, f);
    if (r.shortcut_conv) {
        visit_conv(name + ".shortcut_conv", *r.shortcut_conv, f);
        visit_norm(name + ".shortcut_gn", *r.shortcut_gn, f);
    }
}

template <typename G, typename F>
void visit_gate(const std::string& name, G& g, F& f) {
    visit_conv(name + ".gate_conv", g.gate_conv, f);
    visit_norm(name + ".gate_gn", g.gate_gn, f);
    visit_conv(name + ".input_conv", g.input_conv, f);
    visit_norm(name + ".input_gn", g.input_gn, f);
    visit_conv(name + ".psi_conv", g.psi_conv, f);
}
template <typename M, typename F>
void visit_msa(const std::string& name, M& m, F& f) {
    for (std::size_t i = 0; i < 3; ++i) visit_conv(name + ".conv" + std::to_string(msa_kernels[i]), m.convs[i], f);
}
template <typename E, typename F>
void visit_encoder(const std::string& name, E& e, F& f) {
    visit_res(name + ".res0", e.first, f);
    visit_res(name + ".res1", e.second, f);
}
template <typename D, typename F>
void visit_decoder(const std::string& name, D& d, F& f) {
    f(name + ".up.weight", d.up.weight);
    f(name + ".up.bias", d.up.bias);
    visit_gate(name + ".gate", d.gate, f);
    visit_msa(name + ".msa", d.msa, f);
    visit_res(name + ".res0", d.first, f);
    visit_res(name + ".res1", d.second, f);
}

} // namespace detail

/// Calls f(name, Param&) for every trainable tensor.
template <typename M, typename F>
void for_each_param(M& m, F&& f) {
    for (std::size_t l = 0; l < m.encoders.size(); ++l) detail::visit_encoder("enc" + std::to_string(l), m.encoders[l], f);
    detail::visit_res("bottleneck.res0", m.bottleneck_first, f);
    detail::visit_res("bottleneck.res1", m.bottleneck_second, f);
    for (std::size_t l = m.decoders.size(); l-- > 0;) detail::visit_decoder("dec" + std::to_string(l), m.decoders[l], f);
    detail::visit_conv("head", m.head, f);
}

template <typename T>
std::vector<std::pair<std::string, Param<T>*>> param_list(ModelParams<T>& m) {
    std::vector<std::pair<std::string, Param<T>*>> out;
    for_each_param(m, [&](const std::string& n, Param<T>& p) { out.emplace_back(n, &p); });
    return out;
}

template <typename T>
void zero_grad(ModelParams<T>& m) {
    for_each_param(m, [](const std::string&, Param<T>& p) { p.grad = Tensor<T>::zeros(p.value.shape()); });
}

template <typename U, typename T>
ModelParams<U> cast_model(const ModelParams<T>& src) {
    ModelParams<U> dst = make_model<U>(src.config);
    std::vector<const Param<T>*> from;
    for_each_param(src, [&](const std::string&, const Param<T>& p) { from.push_back(&p); });
    std::size_t i = 0;
    for_each_param(dst, [&](const std::string&, Param<U>& p) { p.value = from[i++]->value.template cast<U>(); });
    return dst;
}

/// Exact number of trainable scalars.
inline std::size_t param_count(const ModelConfig& cfg) {
    const auto m = make_model<float>(cfg);
    std::size_t n = 0;
    for_each_param(m, [&](const std::string&, const Param<float>& p) { n += p.value.size(); });
    return n;
}

// ---------------------------------------------------------------------------
// Layer-level forward/backward

namespace detail {

template <typename T>
Tensor<T> conv_fwd(const ConvLayer<T>& l, const Tensor<T>& x) {
    return ops::conv3d(x, l.weight.value, l.bias.value, l.spec);
}

template <typename T>
Tensor<T> conv_bwd(ConvLayer<T>& l, const Tensor<T>& gy, const Tensor<T>& x) {
    auto g = ops::conv3d_backward(gy, x, l.weight.value, l.spec);
    ops::accumulate(l.weight.grad, g.weight);
    ops::accumulate(l.bias.grad, g.bias);
    return std::move(g.input);
}

template <typename T>
Tensor<T> norm_fwd(const NormLayer<T>& l, const Tensor<T>& x, ops::GroupNormCache<T>* cache) {
    return ops::group_norm(x, l.gamma.value, l.beta.value, l.groups, l.eps, cache);
}

template <typename T>
Tensor<T> norm_bwd(NormLayer<T>& l, const Tensor<T>& gy, const ops::GroupNormCache<T>& cache) {
    auto g = ops::group_norm_backward(gy, cache, l.gamma.value);
    ops::accumulate(l.gamma.grad, g.gamma);
    ops::accumulate(l.beta.grad, g.beta);
    return std::move(g.input);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return ops::elementwise(a, b, ops::Binary::add);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Residual block: ReLU(GN(Conv3(ReLU(GN(Conv3(x))))) + Y)

template <typename T>
struct ResBlockCache {
    Tensor<T> x, h1, r1, pre;
    ops::GroupNormCache<T> g1, g2, gs;
};

template <typename T>
Tensor<T> res_block_forward(const Tensor<T>& x, const ResBlockParams<T>& p, ResBlockCache<T>* cache = nullptr) {
    p.check();
    ops::detail::expect_5d(x, "residual block input");
    if (x.dim(1) != p.in_channels)
        fail(Errc::validation, "residual block expects " + std::to_string(p.in_channels) +
                                   " input channels, got " + std::to_string(x.dim(1)));
    ResBlockCache<T> local;
    ResBlockCache<T>& c = cache ? *cache : local;
    Tensor<T> h1 = detail::norm_fwd(p.gn1, detail::conv_fwd(p.conv1, x), &c.g1);
    Tensor<T> r1 = ops::relu(h1);
    Tensor<T> f1 = detail::norm_fwd(p.gn2, detail::conv_fwd(p.conv2, r1), &c.g2);
    Tensor<T> pre = p.has_projection()
                        ? detail::add(f1, detail::norm_fwd(*p.shortcut_gn, detail::conv_fwd(*p.shortcut_conv, x), &c.gs))
                        : detail::add(f1, x);
    Tensor<T> y = ops::relu(pre);
    if (cache) {
        c.x = x;
        c.h1 = std::move(h1);
        c.r1 = std::move(r1);
        c.pre = std::move(pre);
    }
    return y;
}

template <typename T>
Tensor<T> res_block_backward(const Tensor<T>& gy, ResBlockParams<T>& p, const ResBlockCache<T>& c) {
    require(c.x.defined(), "residual block backward: missing forward cache");
    const Tensor<T> gpre = ops::relu_backward(gy, c.pre);
    Tensor<T> g = detail::norm_bwd(p.gn2, gpre, c.g2);
    g = detail::conv_bwd(p.conv2, g, c.r1);
    g = ops::relu_backward(g, c.h1);
    g = detail::norm_bwd(p.gn1, g, c.g1);
    Tensor<T> gx = detail::conv_bwd(p.conv1, g, c.x);
    if (p.has_projection()) {
        Tensor<T> gs = detail::norm_bwd(*p.shortcut_gn, gpre, c.gs);
        ops::accumulate(gx, detail::conv_bwd(*p.shortcut_conv, gs, c.x));
    } else {
        ops::accumulate(gx, gpre);
    }
    return gx;
}

// ---------------------------------------------------------------------------
// Attention gate: psi = sigmoid(Conv1(ReLU(GN(Conv1(G))) + ReLU(GN(Conv1(X_dec))))),
// F_Attn = X_dec * psi (psi broadcast over channels).

template <typename T>
struct AttentionResult {
    Tensor<T> features; ///< F_Attn
    Tensor<T> psi;      ///< (N,1,D,H,W) coefficients in (0,1)
};

template <typename T>
struct AttentionGateCache {
    Tensor<T> gate, input, hg, hx, sum, psi;
    ops::GroupNormCache<T> gg, gx;
};

template <typename T>
AttentionResult<T> attention_gate_forward(const Tensor<T>& gate, const Tensor<T>& x_dec,
                                          const AttentionGateParams<T>& p,
                                          AttentionGateCache<T>* cache = nullptr) {
    ops::detail::expect_5d(gate, "attention gate signal");
    ops::detail::expect_5d(x_dec, "attention gate input");
    if (spatial(gate) != spatial(x_dec) || gate.dim(0) != x_dec.dim(0))
        fail(Errc::validation, "attention gate: gating signal " + shape_str(gate.shape()) +
                                   " and decoder features " + shape_str(x_dec.shape()) +
                                   " differ in batch or spatial extent");
    AttentionGateCache<T> local;
    AttentionGateCache<T>& c = cache ? *cache : local;
    Tensor<T> hg = detail::norm_fwd(p.gate_gn, detail::conv_fwd(p.gate_conv, gate), &c.gg);
    Tensor<T> hx = detail::norm_fwd(p.input_gn, detail::conv_fwd(p.input_conv, x_dec), &c.gx);
    Tensor<T> sum = detail::add(ops::relu(hg), ops::relu(hx));
    Tensor<T> psi = ops::sigmoid(detail::conv_fwd(p.psi_conv, sum));
    Tensor<T> out = ops::elementwise(x_dec, psi, ops::Binary::mul);
    if (cache) {
        c.gate = gate;
        c.input = x_dec;
        c.hg = std::move(hg);
        c.hx = std::move(hx);
        c.sum = std::move(sum);
        c.psi = psi;
    }
    return {std::move(out), std::move(psi)};
}

/// Returns (grad wrt gate, grad wrt x_dec).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> attention_gate_backward(const Tensor<T>& g_features, AttentionGateParams<T>& p,
                                                        const AttentionGateCache<T>& c) {
    require(c.psi.defined(), "attention gate backward: missing forward cache");
    auto [g_input, g_psi] = ops::elementwise_backward(g_features, c.input, c.psi, ops::Binary::mul);
    const Tensor<T> g_sum = detail::conv_bwd(p.psi_conv, ops::sigmoid_backward(g_psi, c.psi), c.sum);
    Tensor<T> g_gate = detail::conv_bwd(p.gate_conv, detail::norm_bwd(p.gate_gn, ops::relu_backward(g_sum, c.hg), c.gg),
                                        c.gate);
    ops::accumulate(g_input, detail::conv_bwd(p.input_conv,
                                              detail::norm_bwd(p.input_gn, ops::relu_backward(g_sum, c.hx), c.gx),
                                              c.input));
    return {std::move(g_gate), std::move(g_input)};
}

// ---------------------------------------------------------------------------
// Multiscale spatial attention: S = sum_k sigmoid(Conv_k(F)), F_MSA = F * S.

template <typename T>
struct MSAResult {
    Tensor<T> features; ///< F_MSA
    Tensor<T> scale;    ///< S, (N,1,D,H,W) in (0,3)
};

template <typename T>
struct MSACache {
    Tensor<T> input, scale;
    std::array<Tensor<T>, 3> maps;
};

template <typename T>
MSAResult<T> msa_forward(const Tensor<T>& f, const MSAParams<T>& p, MSACache<T>* cache = nullptr) {
    std::array<Tensor<T>, 3> maps;
    for (std::size_t i = 0; i < 3; ++i) maps[i] = ops::sigmoid(detail::conv_fwd(p.convs[i], f));
    Tensor<T> s = detail::add(detail::add(maps[0], maps[1]), maps[2]);
    Tensor<T> out = ops::elementwise(f, s, ops::Binary::mul);
    if (cache) {
        cache->input = f;
        cache->scale = s;
        cache->maps = std::move(maps);
    }
    return {std::move(out), std::move(s)};
}

template <typename T>
Tensor<T> msa_backward(const Tensor<T>& g_out, MSAParams<T>& p, const MSACache<T>& c) {
    require(c.input.defined(), "MSA backward: missing forward cache");
    auto [g_in, g_s] = ops::elementwise_backward(g_out, c.input, c.scale, ops::Binary::mul);
    for (std::size_t i = 0; i < 3; ++i)
        ops::accumulate(g_in, detail::conv_bwd(p.convs[i], ops::sigmoid_backward(g_s, c.maps[i]), c.input));
    return std::move(g_in);
}

// ---------------------------------------------------------------------------
// Encoder / decoder stages

template <typename T>
struct EncoderOutput {
    Tensor<T> skip; ///< full-resolution features (F_ResNet), fed to the decoder gate
    Tensor<T> down; ///< max-pooled to half resolution
};

template <typename T>
struct EncoderCache {
    ResBlockCache<T> first, second;
    std::vector<std::size_t> argmax;
    Shape skip_shape;
};

template <typename T>
EncoderOutput<T> encoder_block_forward(const Tensor<T>& x, const EncoderParams<T>& p,
                                       EncoderCache<T>* cache = nullptr) {
    ops::detail::expect_5d(x, "encoder input");
    for (std::size_t a = 2; a < 5; ++a)
        if (x.dim(a) % 2 != 0)
            fail(Errc::validation, "encoder block: spatial extents must be even, got " + shape_str(x.shape()));
    Tensor<T> skip = res_block_forward(res_block_forward(x, p.first, cache ? &cache->first : nullptr), p.second,
                                       cache ? &cache->second : nullptr);
    auto pooled = ops::maxpool3d(skip);
    if (cache) {
        cache->argmax = std::move(pooled.argmax);
        cache->skip_shape = skip.shape();
    }
    return {std::move(skip), std::move(pooled.out)};
}

/// Either gradient may be undefined (treated as zero).
template <typename T>
Tensor<T> encoder_block_backward(const Tensor<T>& g_skip, const Tensor<T>& g_down, EncoderParams<T>& p,
                                 const EncoderCache<T>& c) {
    Tensor<T> g = g_skip;
    if (g_down.defined()) ops::accumulate(g, ops::maxpool3d_backward(g_down, c.argmax, c.skip_shape));
    require(g.defined(), "encoder backward: no incoming gradient");
    return res_block_backward(res_block_backward(g, p.second, c.second), p.first, c.first);
}

template <typename T>
struct DecoderCache {
    Tensor<T> below;
    std::size_t width = 0;
    AttentionGateCache<T> gate;
    MSACache<T> msa;
    ResBlockCache<T> first, second;
};

template <typename T>
Tensor<T> decoder_block_forward(const Tensor<T>& below, const Tensor<T>& skip, const DecoderParams<T>& p,
                                DecoderCache<T>* cache = nullptr) {
    Tensor<T> x_dec = ops::conv_transpose3d(below, p.up.weight.value, p.up.bias.value);
    ops::detail::expect_5d(skip, "decoder skip");
    if (spatial(x_dec) != spatial(skip) || x_dec.dim(1) != skip.dim(1))
        fail(Errc::validation, "decoder block: upsampled features " + shape_str(x_dec.shape()) +
                                   " do not match skip " + shape_str(skip.shape()));
    auto att = attention_gate_forward(skip, x_dec, p.gate, cache ? &cache->gate : nullptr);
    auto msa = msa_forward(att.features, p.msa, cache ? &cache->msa : nullptr);
    Tensor<T> fused = ops::concat_channels(msa.features, skip);
    Tensor<T> out = res_block_forward(res_block_forward(fused, p.first, cache ? &cache->first : nullptr), p.second,
                                      cache ? &cache->second : nullptr);
    if (cache) {
        cache->below = below;
        cache->width = skip.dim(1);
    }
    return out;
}

/// Returns (grad wrt below, grad wrt skip).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> decoder_block_backward(const Tensor<T>& g_out, DecoderParams<T>& p,
                                                       const DecoderCache<T>& c) {
    require(c.below.defined(), "decoder backward: missing forward cache");
    Tensor<T> g_fused = res_block_backward(res_block_backward(g_out, p.second, c.second), p.first, c.first);
    auto [g_msa, g_skip] = ops::split_channels(g_fused, c.width);
    Tensor<T> g_att = msa_backward(g_msa, p.msa, c.msa);
    auto [g_gate, g_xdec] = attention_gate_backward(g_att, p.gate, c.gate);
    ops::accumulate(g_skip, g_gate);
    auto up = ops::conv_transpose3d_backward(g_xdec, c.below, p.up.weight.value);
    ops::accumulate(p.up.weight.grad, up.weight);
    ops::accumulate(p.up.bias.grad, up.bias);
    return {std::move(up.input), std::move(g_skip)};
}

// ---------------------------------------------------------------------------
// Whole network

template <typename T>
struct ModelCache {
    std::vector<EncoderCache<T>> encoders;
    ResBlockCache<T> bottleneck_first, bottleneck_second;
    std::vector<DecoderCache<T>> decoders;
    Tensor<T> head_input;
    Tensor<T> probs;
};

template <typename T>
void check_model_input(const ModelConfig& cfg, const Tensor<T>& x) {
    ops::detail::expect_5d(x, "model input");
    if (x.dim(1) != cfg.in_channels)
        fail(Errc::validation, "model input has " + std::to_string(x.dim(1)) + " channels, expected " +
                                   std::to_string(cfg.in_channels));
    const std::size_t div = cfg.required_divisor();
    for (std::size_t a = 2; a < 5; ++a)
        if (x.dim(a) % div != 0)
            fail(Errc::validation, "model input spatial extents " + shape_str(x.shape()) +
                                       " must be divisible by " + std::to_string(div) + " (2^levels, levels=" +
                                       std::to_string(cfg.levels) + ")");
}

/// Per-class probabilities (N, out_classes, D, H, W) in (0,1).
template <typename T>
Tensor<T> model_forward(const ModelParams<T>& m, const Tensor<T>& x, ModelCache<T>* cache = nullptr) {
    const ModelConfig& cfg = m.config;
    check_model_input(cfg, x);
    if (cache) {
        cache->encoders.assign(cfg.levels, {});
        cache->decoders.assign(cfg.levels, {});
    }
    std::vector<Tensor<T>> skips(cfg.levels);
    Tensor<T> h = x;
    for (std::size_t l = 0; l < cfg.levels; ++l) {
        auto e = encoder_block_forward(h, m.encoders[l], cache ? &cache->encoders[l] : nullptr);
        skips[l] = std::move(e.skip);
        h = std::move(e.down);
    }
    h = res_block_forward(h, m.bottleneck_first, cache ? &cache->bottleneck_first : nullptr);
    h = res_block_forward(h, m.bottleneck_second, cache ? &cache->bottleneck_second : nullptr);
    for (std::size_t l = cfg.levels; l-- > 0;) {
        h = decoder_block_forward(h, skips[l], m.decoders[l], cache ? &cache->decoders[l] : nullptr);
        skips[l] = Tensor<T>();
    }
    Tensor<T> probs = ops::sigmoid(detail::conv_fwd(m.head, h));
    if (cache) {
        cache->head_input = std::move(h);
        cache->probs = probs;
    }
    return probs;
}

/// Accumulates parameter gradients given dLoss/dProbs; returns dLoss/dInput.
template <typename T>
Tensor<T> model_backward(const Tensor<T>& g_probs, ModelParams<T>& m, const ModelCache<T>& c) {
    require(c.probs.defined(), "model backward: missing forward cache");
    const std::size_t L = m.config.levels;
    Tensor<T> g = detail::conv_bwd(m.head, ops::sigmoid_backward(g_probs, c.probs), c.head_input);
    std::vector<Tensor<T>> g_skips(L);
    for (std::size_t l = 0; l < L; ++l) {
        auto [g_below, g_skip] = decoder_block_backward(g, m.decoders[l], c.decoders[l]);
        g = std::move(g_below);
        g_skips[l] = std::move(g_skip);
    }
    g = res_block_backward(g, m.bottleneck_second, c.bottleneck_second);
    g = res_block_backward(g, m.bottleneck_first, c.bottleneck_first);
    for (std::size_t l = L; l-- > 0;) g = encoder_block_backward(g_skips[l], g, m.encoders[l], c.encoders[l]);
    return g;
}

// ---------------------------------------------------------------------------
// Compute accounting. Convolutions count 2*k^3*Cin*Cout per output voxel
// (multiply + add); norm, activation and elementwise ops add small linear terms.

inline double flops_estimate(const ModelConfig& cfg, std::size_t extent) {
    cfg.validate();
    require(extent % cfg.required_divisor() == 0,
            "flops_estimate: extent must be divisible by " + std::to_string(cfg.required_divisor()));
    auto conv = [](double k, double cin, double cout, double vox) { return 2.0 * k * k * k * cin * cout * vox; };
    constexpr double norm_cost = 7.0, sigmoid_cost = 4.0;
    auto res = [&](double cin, double cout, double vox) {
        double f = conv(3, cin, cout, vox) + conv(3, cout, cout, vox) + 2 * norm_cost * cout * vox;
        if (cin != cout) f += conv(1, cin, cout, vox) + norm_cost * cout * vox;
        return f + 3 * cout * vox; // relu, add, relu
    };
    double total = 0;
    double vox = static_cast<double>(extent) * extent * extent;
    std::vector<double> level_vox;
    double c = static_cast<double>(cfg.in_channels);
    for (std::size_t l = 0; l < cfg.levels; ++l) {
        const double w = static_cast<double>(cfg.level_width(l));
        total += res(c, w, vox) + res(w, w, vox) + w * vox; // + pooling compares
        level_vox.push_back(vox);
        vox /= 8;
        c = w;
    }
    const double bf = static_cast<double>(cfg.bottleneck_filters);
    total += res(c, bf, vox) + res(bf, bf, vox);
    double below = bf;
    for (std::size_t l = cfg.levels; l-- > 0;) {
        const double w = static_cast<double>(cfg.level_width(l)), v = level_vox[l];
        const double fi = static_cast<double>(attention_channels(cfg.level_width(l)));
        total += 2.0 * below * w * v;                                                 // transposed conv
        total += 2 * conv(1, w, fi, v) + 2 * (norm_cost + 1) * fi * v + fi * v;       // gate paths
        total += conv(1, fi, 1, v) + sigmoid_cost * v + w * v;                        // psi, F_Attn
        for (auto k : msa_kernels) total += conv(static_cast<double>(k), w, 1, v) + sigmoid_cost * v;
        total += 2 * v + w * v;                                                       // S, F_MSA
        total += res(2 * w, w, v) + res(w, w, v);
        below = w;
    }
    const double full = level_vox.front();
    total += conv(1, static_cast<double>(cfg.base_filters), static_cast<double>(cfg.out_classes), full) +
             sigmoid_cost * cfg.out_classes * full;
    return total;
}

} // namespace adruwams
