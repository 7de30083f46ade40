#pragma once

#include <string>
#include <vector>

#include "lifted3d/geometry.hpp"
#include "lifted3d/nn.hpp"
#include "lifted3d/shading.hpp"

namespace lifted3d {

// ---------------------------------------------------------------------------
// deconvolution decoders (shape / transformation map)
// ---------------------------------------------------------------------------

// The decoders follow a fixed pyramid: a 4-layer MLP feeds a 4x4 deconv
// block, stride-2 deconv stages double the resolution to out_hw/2, a final
// nearest upsample reaches out_hw, and 5x5/3x3 convolutions head the output.
// Channel counts start at 512 * width_mult and halve per stage (floored at 4
// and kept divisible by 4 so group normalization uses 4 channels per group).
// The shape variant interleaves stride-1 convolutions after every stage; the
// transform variant does not and has one fewer head convolution.
enum class DecoderKind { Shape, Transform };

struct ConvLayer {
    std::shared_ptr<Param> w, b;
    int stride = 1, pad = 0;
    bool transpose = false;
};

struct GnLayer {
    std::shared_ptr<Param> gamma, beta;
    int groups = 1;
};

// One entry of a decoder's execution plan. kind: 'd' deconv, 'c' conv,
// 'g' group norm (ci = channels), 'r' relu, 'u' nearest upsample x2.
struct DecoderLayerSpec {
    char kind;
    int ci = 0, co = 0, k = 0, s = 1, p = 0;
};

inline int decoder_stage_channels(real width_mult, int stage) {
    int c = static_cast<int>(std::lround(512.0 * width_mult / (1 << stage)));
    return std::max(4, (c + 3) / 4 * 4);
}

inline std::vector<DecoderLayerSpec> decoder_layer_plan(DecoderKind kind, int out_hw, real width_mult) {
    require(out_hw >= 8 && (out_hw & (out_hw - 1)) == 0,
            "decoder output size must be a power of two and at least 8");
    int n_up = 0;
    for (int r = out_hw / 8; r > 1; r >>= 1) ++n_up;  // 4 * 2^n_up = out_hw / 2
    std::vector<DecoderLayerSpec> plan;
    auto conv = [&](int ci, int co, int k, int s, int p) { plan.push_back({'c', ci, co, k, s, p}); };
    auto deconv = [&](int ci, int co, int k, int s, int p) { plan.push_back({'d', ci, co, k, s, p}); };
    auto gn = [&](int c) { plan.push_back({'g', c}); };
    auto relu_step = [&] { plan.push_back({'r'}); };

    bool shape = kind == DecoderKind::Shape;
    int c0 = decoder_stage_channels(width_mult, 0);
    deconv(c0, c0, 4, 1, 0);  // 1x1 -> 4x4
    relu_step();
    if (shape) {
        conv(c0, c0, 3, 1, 1);
        relu_step();
    }
    int prev = c0;
    for (int k = 1; k <= n_up; ++k) {
        int c = decoder_stage_channels(width_mult, k);
        deconv(prev, c, 4, 2, 1);
        gn(c);
        relu_step();
        if (shape) {
            conv(c, c, 3, 1, 1);
            gn(c);
            relu_step();
        }
        prev = c;
    }
    plan.push_back({'u'});
    conv(prev, prev, 3, 1, 1);
    gn(prev);
    relu_step();
    if (shape) {
        conv(prev, prev, 5, 1, 2);
        gn(prev);
        relu_step();
    }
    conv(prev, 1, 5, 1, 2);
    return plan;
}

// Parameter count implied by a plan plus its 4-layer MLP head (hidden size
// dw, output c0); group norm contributes gamma+beta per channel.
inline long long decoder_param_count(DecoderKind kind, int dw, int out_hw, real width_mult) {
    long long n = 0;
    int c0 = decoder_stage_channels(width_mult, 0);
    for (int i = 0; i < 4; ++i) {
        int in = dw, out = i == 3 ? c0 : dw;
        n += static_cast<long long>(out) * in + out;
    }
    for (const auto& l : decoder_layer_plan(kind, out_hw, width_mult)) {
        if (l.kind == 'c' || l.kind == 'd')
            n += static_cast<long long>(l.ci) * l.co * l.k * l.k + l.co;
        else if (l.kind == 'g')
            n += 2LL * l.ci;
    }
    return n;
}

struct ConvDecoder {
    Mlp head;
    std::vector<ConvLayer> convs;
    std::vector<GnLayer> gns;
    // execution plan: 'd'/'c' next conv, 'g' next groupnorm, 'r' relu, 'u' upsample
    std::string plan;
    int c0 = 0, out_hw = 0;
    bool inject_hook = false;  // reserved for a teacher feature-map injection; unused

    static ConvDecoder make(ParamRegistry& reg, Rng& rng, const std::string& name, DecoderKind kind,
                            int dw, int out_hw, real width_mult) {
        ConvDecoder d;
        d.out_hw = out_hw;
        d.c0 = decoder_stage_channels(width_mult, 0);
        d.head = Mlp::make(reg, rng, name + ".head", dw, dw, d.c0);
        for (const auto& spec : decoder_layer_plan(kind, out_hw, width_mult)) {
            switch (spec.kind) {
                case 'c':
                case 'd': {
                    ConvLayer l;
                    l.stride = spec.s;
                    l.pad = spec.p;
                    l.transpose = spec.kind == 'd';
                    std::string nm =
                        name + (l.transpose ? ".deconv" : ".conv") + std::to_string(d.convs.size());
                    long long fan_in = static_cast<long long>(spec.ci) * spec.k * spec.k;
                    std::vector<int> wshape = l.transpose
                                                  ? std::vector<int>{spec.ci, spec.co, spec.k, spec.k}
                                                  : std::vector<int>{spec.co, spec.ci, spec.k, spec.k};
                    l.w = reg.create(nm + ".w", wshape, init_uniform(rng, numel_of(wshape), fan_in));
                    l.b = reg.create(nm + ".b", {spec.co}, std::vector<real>(static_cast<size_t>(spec.co), 0.0));
                    d.convs.push_back(l);
                    d.plan += spec.kind;
                    break;
                }
                case 'g': {
                    GnLayer g;
                    g.groups = spec.ci / 4;
                    std::string nm = name + ".gn" + std::to_string(d.gns.size());
                    g.gamma = reg.create(nm + ".gamma", {spec.ci}, std::vector<real>(static_cast<size_t>(spec.ci), 1.0));
                    g.beta = reg.create(nm + ".beta", {spec.ci}, std::vector<real>(static_cast<size_t>(spec.ci), 0.0));
                    d.gns.push_back(g);
                    d.plan += 'g';
                    break;
                }
                default:
                    d.plan += spec.kind;
            }
        }
        return d;
    }

    // raw [H,W] map before any squashing
    Tensor forward_raw(Binder& B, const Tensor& w0) const {
        Tensor x = reshape(head.forward(B, w0), {c0, 1, 1});
        size_t ic = 0, ig = 0;
        for (char step : plan) {
            switch (step) {
                case 'd':
                case 'c': {
                    const ConvLayer& l = convs[ic++];
                    x = l.transpose ? conv_transpose2d(x, B(l.w), B(l.b), l.stride, l.pad)
                                    : conv2d(x, B(l.w), B(l.b), l.stride, l.pad);
                    break;
                }
                case 'g': {
                    const GnLayer& g = gns[ig++];
                    x = group_norm(x, B(g.gamma), B(g.beta), g.groups);
                    break;
                }
                case 'r':
                    x = relu(x);
                    break;
                case 'u':
                    x = upsample2_nearest(x);
                    break;
            }
        }
        require(x.dim(0) == 1 && x.dim(1) == out_hw && x.dim(2) == out_hw,
                "decoder produced " + shape_str(x.shape()) + ", expected 1x" +
                    std::to_string(out_hw) + "x" + std::to_string(out_hw));
        return reshape(x, {out_hw, out_hw});
    }

    long long param_count() const {
        long long n = head.param_count();
        for (const auto& l : convs) n += l.w->numel() + l.b->numel();
        for (const auto& g : gns) n += g.gamma->numel() + g.beta->numel();
        return n;
    }
};

// ---------------------------------------------------------------------------
// the trainable 3D generator: D_V, D_L, D_S, D_T, M and the background color
// ---------------------------------------------------------------------------

struct GeneratorConfig {
    int dw = 64;
    int image = 32;
    real width_mult = 0.125;
    std::uint64_t seed = 1;
};

struct Generator3D {
    GeneratorConfig cfg;
    ParamRegistry reg;
    Mlp view_mlp, light_mlp;
    ConvDecoder shape_dec, trans_dec;
    Mlp manip_enc_w, manip_enc_v, manip_enc_l, manip_head;
    std::shared_ptr<Param> background;
    std::vector<real> tmap_border;  // cached border mask

    explicit Generator3D(GeneratorConfig c) : cfg(c) {
        Rng rng(cfg.seed);
        view_mlp = Mlp::make(reg, rng, "view", cfg.dw, cfg.dw, 6);
        light_mlp = Mlp::make(reg, rng, "light", cfg.dw, cfg.dw, 4);
        shape_dec = ConvDecoder::make(reg, rng, "shape", DecoderKind::Shape, cfg.dw, cfg.image,
                                      cfg.width_mult);
        trans_dec = ConvDecoder::make(reg, rng, "transform", DecoderKind::Transform, cfg.dw,
                                      cfg.image, cfg.width_mult);
        manip_enc_w = Mlp::make(reg, rng, "manip.enc_w", cfg.dw, cfg.dw, cfg.dw);
        manip_enc_v = Mlp::make(reg, rng, "manip.enc_v", 6, cfg.dw, cfg.dw);
        manip_enc_l = Mlp::make(reg, rng, "manip.enc_l", 4, cfg.dw, cfg.dw);
        manip_head = Mlp::make(reg, rng, "manip.head", cfg.dw, cfg.dw, cfg.dw);
        background = reg.create("background", {3}, {0.5, 0.5, 0.5});
        tmap_border = border_mask(cfg.image, cfg.image);
    }

    // raw 6 outputs squashed by tanh, rotations scaled to +-60 deg,
    // translations to +-0.1
    Tensor decode_view(Binder& B, const Tensor& w) const {
        static const std::vector<real> scales = {60.0, 60.0, 60.0, 0.1, 0.1, 0.1};
        return mul_constvec(tanh_op(view_mlp.forward(B, w)), scales);
    }

    // lx, ly in [-1,1] by tanh; ka, kd in (0,1) by sigmoid
    Tensor decode_light(Binder& B, const Tensor& w) const {
        Tensor raw = light_mlp.forward(B, w);
        return concat1d({tanh_op(slice(raw, 0, 2)), sigmoid(slice(raw, 2, 4))});
    }

    // depth in (0.9, 1.1); raw 0 maps to exactly 1.0
    Tensor decode_shape(Binder& B, const Tensor& w0) const {
        return add_const(mul_const(sigmoid(shape_dec.forward_raw(B, w0)), 0.2), 0.9);
    }

    // transform map in [0,1] with the border band forced to zero
    Tensor decode_transform(Binder& B, const Tensor& w0) const {
        return mul_constvec(sigmoid(trans_dec.forward_raw(B, w0)), tmap_border);
    }

    // style manipulation: three encoders summed, then the output head
    Tensor manipulate(Binder& B, const Tensor& w, const Tensor& view, const Tensor& light) const {
        Tensor enc = add(add(manip_enc_w.forward(B, w), manip_enc_v.forward(B, view)),
                         manip_enc_l.forward(B, light));
        return manip_head.forward(B, enc);
    }

    Tensor background_color(Binder& B) const { return B(background); }
};

// ---------------------------------------------------------------------------
// frozen networks: identity embedding stand-in and perceptual pyramid
// ---------------------------------------------------------------------------

struct FrozenConv {
    Tensor w, b;
    int stride = 1, pad = 1;
};

inline FrozenConv frozen_conv(Rng& rng, int ci, int co, int k, int stride, int pad) {
    FrozenConv c;
    long long fan_in = static_cast<long long>(ci) * k * k;
    c.w = Tensor::constant({co, ci, k, k}, init_uniform(rng, static_cast<long long>(co) * ci * k * k, fan_in));
    c.b = Tensor::constant({co}, init_uniform(rng, co, fan_in));
    c.stride = stride;
    c.pad = pad;
    return c;
}

// Fixed, randomly initialized strided convolutional pyramid with an
// L2-normalized output; stands in for a pre-trained face recognition
// embedding. Never trained.
class IdentityEmbed {
public:
    explicit IdentityEmbed(std::uint64_t seed = 0xE3BEDull, int dim = 32) : dim_(dim) {
        Rng rng(seed);
        convs_.push_back(frozen_conv(rng, 3, 8, 3, 2, 1));
        convs_.push_back(frozen_conv(rng, 8, 16, 3, 2, 1));
        convs_.push_back(frozen_conv(rng, 16, 32, 3, 2, 1));
        fc_w_ = Tensor::constant({dim, 32}, init_uniform(rng, static_cast<long long>(dim) * 32, 32));
        fc_b_ = Tensor::constant({dim}, init_uniform(rng, dim, 32));
        digest_ = fnv1a(convs_[0].w.data().data(), convs_[0].w.data().size() * sizeof(real),
                        fnv1a(fc_w_.data().data(), fc_w_.data().size() * sizeof(real)));
    }

    int dim() const { return dim_; }
    std::uint64_t param_digest() const { return digest_; }

    // unit-norm embedding of an [H,W,3] image
    Tensor embed(const Tensor& image_hwc) const {
        Tensor x = hwc_to_chw(image_hwc);
        for (const auto& c : convs_) x = leaky_relu(conv2d(x, c.w, c.b, c.stride, c.pad), 0.2);
        Tensor v = add(matvec(fc_w_, mean_hw(x)), fc_b_);
        Tensor n = max_with(sqrt_op(sum_sq(v)), 1e-12);
        return div(v, n);
    }

private:
    std::vector<FrozenConv> convs_;
    Tensor fc_w_, fc_b_;
    int dim_ = 32;
    std::uint64_t digest_ = 0;
};

// Fixed random feature pyramid standing in for a pre-trained perceptual
// network: three depths, features L2-normalized per pixel before comparison.
class PerceptualNet {
public:
    explicit PerceptualNet(std::uint64_t seed = 0x9E4C11ull) {
        Rng rng(seed);
        convs_.push_back(frozen_conv(rng, 3, 8, 3, 1, 1));
        convs_.push_back(frozen_conv(rng, 8, 12, 3, 2, 1));
        convs_.push_back(frozen_conv(rng, 12, 16, 3, 2, 1));
    }

    // three feature maps of increasing depth for a [C,H,W] image
    std::vector<Tensor> features(const Tensor& chw) const {
        std::vector<Tensor> out;
        Tensor x = chw;
        for (const auto& c : convs_) {
            x = relu(conv2d(x, c.w, c.b, c.stride, c.pad));
            out.push_back(x);
        }
        return out;
    }

    const std::vector<FrozenConv>& layers() const { return convs_; }

private:
    std::vector<FrozenConv> convs_;
};

}  // namespace lifted3d
