#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "lifted3d/tensor.hpp"

namespace lifted3d {

// ---------------------------------------------------------------------------
// feature-map ops (CHW layout)
// ---------------------------------------------------------------------------

// Zero-padded 2D convolution. x: [Ci,H,W], w: [Co,Ci,kh,kw], b: [Co] or empty.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    require(x.rank() == 3 && w.rank() == 4, "conv2d expects x [C,H,W] and w [Co,Ci,kh,kw]");
    int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    require(w.dim(1) == ci, "conv2d: channel mismatch, x " + shape_str(x.shape()) + " vs w " +
                                shape_str(w.shape()));
    bool has_bias = b.defined() && b.numel() > 0;
    if (has_bias) require(b.rank() == 1 && b.dim(0) == co, "conv2d: bias shape mismatch");
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (wd + 2 * pad - kw) / stride + 1;
    require(oh > 0 && ow > 0, "conv2d: empty output");

    const auto& xd = x.data();
    const auto& wdat = w.data();
    std::vector<real> out(static_cast<size_t>(co) * oh * ow, 0.0);
    for (int oc = 0; oc < co; ++oc) {
        real bias = has_bias ? b[oc] : 0.0;
        real* op = out.data() + static_cast<size_t>(oc) * oh * ow;
        for (long long i = 0; i < static_cast<long long>(oh) * ow; ++i) op[i] = bias;
        for (int icx = 0; icx < ci; ++icx) {
            const real* xp = xd.data() + static_cast<size_t>(icx) * h * wd;
            const real* wp = wdat.data() + ((static_cast<size_t>(oc) * ci + icx) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    real wv = wp[ky * kw + kx];
                    if (wv == 0.0) continue;
                    for (int oy = 0; oy < oh; ++oy) {
                        int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        const real* xrow = xp + static_cast<size_t>(iy) * wd;
                        real* orow = op + static_cast<size_t>(oy) * ow;
                        for (int ox = 0; ox < ow; ++ox) {
                            int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= wd) continue;
                            orow[ox] += wv * xrow[ix];
                        }
                    }
                }
        }
    }

    Tape* tp = detail::tape_of({&x, &w, &b});
    if (!tp) return Tensor::constant({co, oh, ow}, std::move(out));
    int px = detail::node_or_neg1(x), pw = detail::node_or_neg1(w), pb = detail::node_or_neg1(b);
    auto xptr = x.data_ptr();
    auto wptr = w.data_ptr();
    return tp->record(
        {co, oh, ow}, std::move(out), {px, pw, pb},
        [=](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            const auto& xd2 = *xptr;
            const auto& wd2 = *wptr;
            if (pb >= 0) {
                auto& gb = t.grad_buf(pb);
                for (int oc = 0; oc < co; ++oc) {
                    const real* gp = g.data() + static_cast<size_t>(oc) * oh * ow;
                    real s = 0.0;
                    for (long long i = 0; i < static_cast<long long>(oh) * ow; ++i) s += gp[i];
                    gb[static_cast<size_t>(oc)] += s;
                }
            }
            std::vector<real>* gxv = px >= 0 ? &t.grad_buf(px) : nullptr;
            std::vector<real>* gwv = pw >= 0 ? &t.grad_buf(pw) : nullptr;
            if (!gxv && !gwv) return;
            for (int oc = 0; oc < co; ++oc) {
                const real* gp = g.data() + static_cast<size_t>(oc) * oh * ow;
                for (int icx = 0; icx < ci; ++icx) {
                    const real* xp = xd2.data() + static_cast<size_t>(icx) * h * wd;
                    const real* wp = wd2.data() + ((static_cast<size_t>(oc) * ci + icx) * kh) * kw;
                    real* gxp = gxv ? gxv->data() + static_cast<size_t>(icx) * h * wd : nullptr;
                    real* gwp = gwv ? gwv->data() + ((static_cast<size_t>(oc) * ci + icx) * kh) * kw : nullptr;
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            real wv = wp[ky * kw + kx];
                            real gw_acc = 0.0;
                            for (int oy = 0; oy < oh; ++oy) {
                                int iy = oy * stride - pad + ky;
                                if (iy < 0 || iy >= h) continue;
                                const real* grow = gp + static_cast<size_t>(oy) * ow;
                                const real* xrow = xp + static_cast<size_t>(iy) * wd;
                                real* gxrow = gxp ? gxp + static_cast<size_t>(iy) * wd : nullptr;
                                for (int ox = 0; ox < ow; ++ox) {
                                    int ix = ox * stride - pad + kx;
                                    if (ix < 0 || ix >= wd) continue;
                                    real gv = grow[ox];
                                    if (gxrow) gxrow[ix] += gv * wv;
                                    if (gwp) gw_acc += gv * xrow[ix];
                                }
                            }
                            if (gwp) gwp[ky * kw + kx] += gw_acc;
                        }
                }
            }
        },
        "conv2d");
}

// Transposed convolution. x: [Ci,H,W], w: [Ci,Co,kh,kw].
// out size = (H-1)*stride - 2*pad + kh.
inline Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    require(x.rank() == 3 && w.rank() == 4, "conv_transpose2d expects x [C,H,W] and w [Ci,Co,kh,kw]");
    int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    int co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    require(w.dim(0) == ci, "conv_transpose2d: channel mismatch, x " + shape_str(x.shape()) +
                                " vs w " + shape_str(w.shape()));
    bool has_bias = b.defined() && b.numel() > 0;
    if (has_bias) require(b.rank() == 1 && b.dim(0) == co, "conv_transpose2d: bias shape mismatch");
    int oh = (h - 1) * stride - 2 * pad + kh;
    int ow = (wd - 1) * stride - 2 * pad + kw;
    require(oh > 0 && ow > 0, "conv_transpose2d: empty output");

    const auto& xd = x.data();
    const auto& wdat = w.data();
    std::vector<real> out(static_cast<size_t>(co) * oh * ow, 0.0);
    if (has_bias) {
        for (int oc = 0; oc < co; ++oc) {
            real* op = out.data() + static_cast<size_t>(oc) * oh * ow;
            for (long long i = 0; i < static_cast<long long>(oh) * ow; ++i) op[i] = b[oc];
        }
    }
    for (int icx = 0; icx < ci; ++icx) {
        const real* xp = xd.data() + static_cast<size_t>(icx) * h * wd;
        for (int oc = 0; oc < co; ++oc) {
            const real* wp = wdat.data() + ((static_cast<size_t>(icx) * co + oc) * kh) * kw;
            real* op = out.data() + static_cast<size_t>(oc) * oh * ow;
            for (int iy = 0; iy < h; ++iy)
                for (int ix = 0; ix < wd; ++ix) {
                    real xv = xp[static_cast<size_t>(iy) * wd + ix];
                    if (xv == 0.0) continue;
                    for (int ky = 0; ky < kh; ++ky) {
                        int oy = iy * stride - pad + ky;
                        if (oy < 0 || oy >= oh) continue;
                        real* orow = op + static_cast<size_t>(oy) * ow;
                        const real* wrow = wp + static_cast<size_t>(ky) * kw;
                        for (int kx = 0; kx < kw; ++kx) {
                            int ox = ix * stride - pad + kx;
                            if (ox < 0 || ox >= ow) continue;
                            orow[ox] += xv * wrow[kx];
                        }
                    }
                }
        }
    }

    Tape* tp = detail::tape_of({&x, &w, &b});
    if (!tp) return Tensor::constant({co, oh, ow}, std::move(out));
    int px = detail::node_or_neg1(x), pw = detail::node_or_neg1(w), pb = detail::node_or_neg1(b);
    auto xptr = x.data_ptr();
    auto wptr = w.data_ptr();
    return tp->record(
        {co, oh, ow}, std::move(out), {px, pw, pb},
        [=](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            const auto& xd2 = *xptr;
            const auto& wd2 = *wptr;
            if (pb >= 0) {
                auto& gb = t.grad_buf(pb);
                for (int oc = 0; oc < co; ++oc) {
                    const real* gp = g.data() + static_cast<size_t>(oc) * oh * ow;
                    real s = 0.0;
                    for (long long i = 0; i < static_cast<long long>(oh) * ow; ++i) s += gp[i];
                    gb[static_cast<size_t>(oc)] += s;
                }
            }
            std::vector<real>* gxv = px >= 0 ? &t.grad_buf(px) : nullptr;
            std::vector<real>* gwv = pw >= 0 ? &t.grad_buf(pw) : nullptr;
            if (!gxv && !gwv) return;
            for (int icx = 0; icx < ci; ++icx) {
                const real* xp = xd2.data() + static_cast<size_t>(icx) * h * wd;
                real* gxp = gxv ? gxv->data() + static_cast<size_t>(icx) * h * wd : nullptr;
                for (int oc = 0; oc < co; ++oc) {
                    const real* wp = wd2.data() + ((static_cast<size_t>(icx) * co + oc) * kh) * kw;
                    real* gwp = gwv ? gwv->data() + ((static_cast<size_t>(icx) * co + oc) * kh) * kw : nullptr;
                    const real* gp = g.data() + static_cast<size_t>(oc) * oh * ow;
                    for (int iy = 0; iy < h; ++iy)
                        for (int ix = 0; ix < wd; ++ix) {
                            real xv = xp[static_cast<size_t>(iy) * wd + ix];
                            real gx_acc = 0.0;
                            for (int ky = 0; ky < kh; ++ky) {
                                int oy = iy * stride - pad + ky;
                                if (oy < 0 || oy >= oh) continue;
                                const real* grow = gp + static_cast<size_t>(oy) * ow;
                                const real* wrow = wp + static_cast<size_t>(ky) * kw;
                                real* gwrow = gwp ? gwp + static_cast<size_t>(ky) * kw : nullptr;
                                for (int kx = 0; kx < kw; ++kx) {
                                    int ox = ix * stride - pad + kx;
                                    if (ox < 0 || ox >= ow) continue;
                                    real gv = grow[ox];
                                    gx_acc += gv * wrow[kx];
                                    if (gwrow) gwrow[kx] += gv * xv;
                                }
                            }
                            if (gxp) gxp[static_cast<size_t>(iy) * wd + ix] += gx_acc;
                        }
                }
            }
        },
        "conv_transpose2d");
}

// Group normalization over [C,H,W]; gamma/beta per channel.
inline Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                         real eps = 1e-5) {
    require(x.rank() == 3, "group_norm expects [C,H,W]");
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    require(groups >= 1 && c % groups == 0,
            "group_norm: groups " + std::to_string(groups) + " must divide channels " +
                std::to_string(c));
    require(gamma.numel() == c && beta.numel() == c, "group_norm: gamma/beta must be [C]");
    int cg = c / groups;
    long long gsz = static_cast<long long>(cg) * h * w;
    const auto& xd = x.data();
    std::vector<real> mean(static_cast<size_t>(groups)), inv_std(static_cast<size_t>(groups));
    std::vector<real> xhat(xd.size());
    for (int g = 0; g < groups; ++g) {
        const real* xp = xd.data() + static_cast<size_t>(g) * gsz;
        real m = 0.0;
        for (long long i = 0; i < gsz; ++i) m += xp[i];
        m /= static_cast<real>(gsz);
        real var = 0.0;
        for (long long i = 0; i < gsz; ++i) {
            real d = xp[i] - m;
            var += d * d;
        }
        var /= static_cast<real>(gsz);
        real is = 1.0 / std::sqrt(var + eps);
        mean[static_cast<size_t>(g)] = m;
        inv_std[static_cast<size_t>(g)] = is;
        real* hp = xhat.data() + static_cast<size_t>(g) * gsz;
        for (long long i = 0; i < gsz; ++i) hp[i] = (xp[i] - m) * is;
    }
    std::vector<real> out(xd.size());
    long long hw = static_cast<long long>(h) * w;
    for (int ch = 0; ch < c; ++ch) {
        real ga = gamma[ch], be = beta[ch];
        const real* hp = xhat.data() + static_cast<size_t>(ch) * hw;
        real* op = out.data() + static_cast<size_t>(ch) * hw;
        for (long long i = 0; i < hw; ++i) op[i] = ga * hp[i] + be;
    }

    Tape* tp = detail::tape_of({&x, &gamma, &beta});
    if (!tp) return Tensor::constant(x.shape(), std::move(out));
    int px = detail::node_or_neg1(x), pg = detail::node_or_neg1(gamma), pb = detail::node_or_neg1(beta);
    auto gptr = gamma.data_ptr();
    auto xhat_sh = std::make_shared<std::vector<real>>(std::move(xhat));
    auto istd_sh = std::make_shared<std::vector<real>>(std::move(inv_std));
    return tp->record(
        x.shape(), std::move(out), {px, pg, pb},
        [=](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            const auto& xh = *xhat_sh;
            const auto& istd = *istd_sh;
            const auto& gam = *gptr;
            if (pb >= 0) {
                auto& gb = t.grad_buf(pb);
                for (int ch = 0; ch < c; ++ch) {
                    const real* gp = g.data() + static_cast<size_t>(ch) * hw;
                    real s = 0.0;
                    for (long long i = 0; i < hw; ++i) s += gp[i];
                    gb[static_cast<size_t>(ch)] += s;
                }
            }
            if (pg >= 0) {
                auto& gg = t.grad_buf(pg);
                for (int ch = 0; ch < c; ++ch) {
                    const real* gp = g.data() + static_cast<size_t>(ch) * hw;
                    const real* hp = xh.data() + static_cast<size_t>(ch) * hw;
                    real s = 0.0;
                    for (long long i = 0; i < hw; ++i) s += gp[i] * hp[i];
                    gg[static_cast<size_t>(ch)] += s;
                }
            }
            if (px >= 0) {
                auto& gx = t.grad_buf(px);
                for (int grp = 0; grp < groups; ++grp) {
                    // dL/dxhat = g * gamma (per channel); then the usual
                    // normalization backward within the group.
                    real sum_gh = 0.0, sum_gh_xh = 0.0;
                    for (int cc = 0; cc < cg; ++cc) {
                        int ch = grp * cg + cc;
                        real ga = gam[static_cast<size_t>(ch)];
                        const real* gp = g.data() + static_cast<size_t>(ch) * hw;
                        const real* hp = xh.data() + static_cast<size_t>(ch) * hw;
                        for (long long i = 0; i < hw; ++i) {
                            real gh = gp[i] * ga;
                            sum_gh += gh;
                            sum_gh_xh += gh * hp[i];
                        }
                    }
                    real inv_n = 1.0 / static_cast<real>(gsz);
                    real is = istd[static_cast<size_t>(grp)];
                    for (int cc = 0; cc < cg; ++cc) {
                        int ch = grp * cg + cc;
                        real ga = gam[static_cast<size_t>(ch)];
                        const real* gp = g.data() + static_cast<size_t>(ch) * hw;
                        const real* hp = xh.data() + static_cast<size_t>(ch) * hw;
                        real* gxp = gx.data() + static_cast<size_t>(ch) * hw;
                        for (long long i = 0; i < hw; ++i) {
                            real gh = gp[i] * ga;
                            gxp[i] += is * (gh - inv_n * sum_gh - hp[i] * inv_n * sum_gh_xh);
                        }
                    }
                }
            }
        },
        "group_norm");
}

// Nearest-neighbour 2x upsample of [C,H,W].
inline Tensor upsample2_nearest(const Tensor& x) {
    require(x.rank() == 3, "upsample2_nearest expects [C,H,W]");
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    int oh = 2 * h, ow = 2 * w;
    const auto& xd = x.data();
    std::vector<real> out(static_cast<size_t>(c) * oh * ow);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y) {
            const real* xrow = xd.data() + (static_cast<size_t>(ch) * h + y / 2) * w;
            real* orow = out.data() + (static_cast<size_t>(ch) * oh + y) * ow;
            for (int xq = 0; xq < ow; ++xq) orow[xq] = xrow[xq / 2];
        }
    Tape* tp = detail::tape_of({&x});
    if (!tp) return Tensor::constant({c, oh, ow}, std::move(out));
    int px = x.node();
    return tp->record(
        {c, oh, ow}, std::move(out), {px},
        [px, c, h, w, oh, ow](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            auto& gx = t.grad_buf(px);
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < oh; ++y) {
                    real* gxrow = gx.data() + (static_cast<size_t>(ch) * h + y / 2) * w;
                    const real* grow = g.data() + (static_cast<size_t>(ch) * oh + y) * ow;
                    for (int xq = 0; xq < ow; ++xq) gxrow[xq / 2] += grow[xq];
                }
        },
        "upsample2_nearest");
}

// Bilinear resize of [C,H,W] with half-pixel centers.
inline Tensor resize_bilinear(const Tensor& x, int oh, int ow) {
    require(x.rank() == 3, "resize_bilinear expects [C,H,W]");
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    require(oh >= 1 && ow >= 1, "resize_bilinear: bad output size");
    real sy = static_cast<real>(h) / oh, sx = static_cast<real>(w) / ow;
    struct Tap {
        int y0, y1, x0, x1;
        real wy, wx;
    };
    std::vector<Tap> taps(static_cast<size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
        for (int xq = 0; xq < ow; ++xq) {
            real fy = (y + 0.5) * sy - 0.5;
            real fx = (xq + 0.5) * sx - 0.5;
            int y0 = static_cast<int>(std::floor(fy));
            int x0 = static_cast<int>(std::floor(fx));
            real wy = fy - y0, wx = fx - x0;
            int y0c = std::clamp(y0, 0, h - 1), y1c = std::clamp(y0 + 1, 0, h - 1);
            int x0c = std::clamp(x0, 0, w - 1), x1c = std::clamp(x0 + 1, 0, w - 1);
            taps[static_cast<size_t>(y) * ow + xq] = {y0c, y1c, x0c, x1c, wy, wx};
        }
    const auto& xd = x.data();
    std::vector<real> out(static_cast<size_t>(c) * oh * ow);
    for (int ch = 0; ch < c; ++ch) {
        const real* xp = xd.data() + static_cast<size_t>(ch) * h * w;
        real* op = out.data() + static_cast<size_t>(ch) * oh * ow;
        for (size_t i = 0; i < taps.size(); ++i) {
            const Tap& tpx = taps[i];
            real a = xp[static_cast<size_t>(tpx.y0) * w + tpx.x0];
            real b = xp[static_cast<size_t>(tpx.y0) * w + tpx.x1];
            real cc = xp[static_cast<size_t>(tpx.y1) * w + tpx.x0];
            real d = xp[static_cast<size_t>(tpx.y1) * w + tpx.x1];
            op[i] = (1 - tpx.wy) * ((1 - tpx.wx) * a + tpx.wx * b) +
                    tpx.wy * ((1 - tpx.wx) * cc + tpx.wx * d);
        }
    }
    Tape* tp = detail::tape_of({&x});
    if (!tp) return Tensor::constant({c, oh, ow}, std::move(out));
    int px = x.node();
    auto taps_sh = std::make_shared<std::vector<Tap>>(std::move(taps));
    return tp->record(
        {c, oh, ow}, std::move(out), {px},
        [px, c, h, w, oh, ow, taps_sh](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            auto& gx = t.grad_buf(px);
            const auto& tps = *taps_sh;
            for (int ch = 0; ch < c; ++ch) {
                real* gxp = gx.data() + static_cast<size_t>(ch) * h * w;
                const real* gp = g.data() + static_cast<size_t>(ch) * oh * ow;
                for (size_t i = 0; i < tps.size(); ++i) {
                    const Tap& tpx = tps[i];
                    real gv = gp[i];
                    gxp[static_cast<size_t>(tpx.y0) * w + tpx.x0] += gv * (1 - tpx.wy) * (1 - tpx.wx);
                    gxp[static_cast<size_t>(tpx.y0) * w + tpx.x1] += gv * (1 - tpx.wy) * tpx.wx;
                    gxp[static_cast<size_t>(tpx.y1) * w + tpx.x0] += gv * tpx.wy * (1 - tpx.wx);
                    gxp[static_cast<size_t>(tpx.y1) * w + tpx.x1] += gv * tpx.wy * tpx.wx;
                }
            }
        },
        "resize_bilinear");
}

// Per-pixel L2 normalization of the channel vector of [C,H,W].
inline Tensor l2norm_channels(const Tensor& x, real eps = 1e-12) {
    require(x.rank() == 3, "l2norm_channels expects [C,H,W]");
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    long long hw = static_cast<long long>(h) * w;
    const auto& xd = x.data();
    std::vector<real> inv_norm(static_cast<size_t>(hw));
    for (long long i = 0; i < hw; ++i) {
        real s = 0.0;
        for (int ch = 0; ch < c; ++ch) {
            real v = xd[static_cast<size_t>(ch) * hw + i];
            s += v * v;
        }
        inv_norm[static_cast<size_t>(i)] = 1.0 / std::sqrt(s + eps);
    }
    std::vector<real> out(xd.size());
    for (int ch = 0; ch < c; ++ch)
        for (long long i = 0; i < hw; ++i)
            out[static_cast<size_t>(ch) * hw + i] = xd[static_cast<size_t>(ch) * hw + i] * inv_norm[static_cast<size_t>(i)];
    Tape* tp = detail::tape_of({&x});
    if (!tp) return Tensor::constant(x.shape(), std::move(out));
    int px = x.node();
    auto invn = std::make_shared<std::vector<real>>(std::move(inv_norm));
    return tp->record(
        x.shape(), std::move(out), {px},
        [px, c, hw, invn](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            const auto& y = t.value_of(self);
            auto& gx = t.grad_buf(px);
            const auto& in = *invn;
            for (long long i = 0; i < hw; ++i) {
                real dotgy = 0.0;
                for (int ch = 0; ch < c; ++ch)
                    dotgy += g[static_cast<size_t>(ch) * hw + i] * y[static_cast<size_t>(ch) * hw + i];
                for (int ch = 0; ch < c; ++ch) {
                    size_t k = static_cast<size_t>(ch) * hw + i;
                    gx[k] += (g[k] - y[k] * dotgy) * in[static_cast<size_t>(i)];
                }
            }
        },
        "l2norm_channels");
}

// Replicate-pad [C,H,W] by p on each side.
inline Tensor pad_replicate(const Tensor& x, int p) {
    require(x.rank() == 3 && p >= 0, "pad_replicate expects [C,H,W]");
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    int oh = h + 2 * p, ow = w + 2 * p;
    const auto& xd = x.data();
    std::vector<real> out(static_cast<size_t>(c) * oh * ow);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y) {
            int iy = std::clamp(y - p, 0, h - 1);
            const real* xrow = xd.data() + (static_cast<size_t>(ch) * h + iy) * w;
            real* orow = out.data() + (static_cast<size_t>(ch) * oh + y) * ow;
            for (int xq = 0; xq < ow; ++xq) orow[xq] = xrow[std::clamp(xq - p, 0, w - 1)];
        }
    Tape* tp = detail::tape_of({&x});
    if (!tp) return Tensor::constant({c, oh, ow}, std::move(out));
    int px = x.node();
    return tp->record(
        {c, oh, ow}, std::move(out), {px},
        [px, c, h, w, p, oh, ow](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            auto& gx = t.grad_buf(px);
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < oh; ++y) {
                    int iy = std::clamp(y - p, 0, h - 1);
                    real* gxrow = gx.data() + (static_cast<size_t>(ch) * h + iy) * w;
                    const real* grow = g.data() + (static_cast<size_t>(ch) * oh + y) * ow;
                    for (int xq = 0; xq < ow; ++xq) gxrow[std::clamp(xq - p, 0, w - 1)] += grow[xq];
                }
        },
        "pad_replicate");
}

// [H,W,C] -> [C,H,W]
inline Tensor hwc_to_chw(const Tensor& x) {
    require(x.rank() == 3, "hwc_to_chw expects [H,W,C]");
    int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    const auto& xd = x.data();
    std::vector<real> out(xd.size());
    for (int y = 0; y < h; ++y)
        for (int xq = 0; xq < w; ++xq)
            for (int ch = 0; ch < c; ++ch)
                out[(static_cast<size_t>(ch) * h + y) * w + xq] = xd[(static_cast<size_t>(y) * w + xq) * c + ch];
    Tape* tp = detail::tape_of({&x});
    if (!tp) return Tensor::constant({c, h, w}, std::move(out));
    int px = x.node();
    return tp->record(
        {c, h, w}, std::move(out), {px},
        [px, h, w, c](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            auto& gx = t.grad_buf(px);
            for (int y = 0; y < h; ++y)
                for (int xq = 0; xq < w; ++xq)
                    for (int ch = 0; ch < c; ++ch)
                        gx[(static_cast<size_t>(y) * w + xq) * c + ch] += g[(static_cast<size_t>(ch) * h + y) * w + xq];
        },
        "hwc_to_chw");
}

// [C,H,W] -> [H,W,C]
inline Tensor chw_to_hwc(const Tensor& x) {
    require(x.rank() == 3, "chw_to_hwc expects [C,H,W]");
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const auto& xd = x.data();
    std::vector<real> out(xd.size());
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int xq = 0; xq < w; ++xq)
                out[(static_cast<size_t>(y) * w + xq) * c + ch] = xd[(static_cast<size_t>(ch) * h + y) * w + xq];
    Tape* tp = detail::tape_of({&x});
    if (!tp) return Tensor::constant({h, w, c}, std::move(out));
    int px = x.node();
    return tp->record(
        {h, w, c}, std::move(out), {px},
        [px, h, w, c](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            auto& gx = t.grad_buf(px);
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < h; ++y)
                    for (int xq = 0; xq < w; ++xq)
                        gx[(static_cast<size_t>(ch) * h + y) * w + xq] += g[(static_cast<size_t>(y) * w + xq) * c + ch];
        },
        "chw_to_hwc");
}

// Spatial mean per channel: [C,H,W] -> [C]
inline Tensor mean_hw(const Tensor& x) {
    require(x.rank() == 3, "mean_hw expects [C,H,W]");
    int c = x.dim(0);
    long long hw = static_cast<long long>(x.dim(1)) * x.dim(2);
    const auto& xd = x.data();
    std::vector<real> out(static_cast<size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        real s = 0.0;
        const real* xp = xd.data() + static_cast<size_t>(ch) * hw;
        for (long long i = 0; i < hw; ++i) s += xp[i];
        out[static_cast<size_t>(ch)] = s / static_cast<real>(hw);
    }
    Tape* tp = detail::tape_of({&x});
    if (!tp) return Tensor::constant({c}, std::move(out));
    int px = x.node();
    return tp->record(
        {c}, std::move(out), {px},
        [px, c, hw](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            auto& gx = t.grad_buf(px);
            real inv = 1.0 / static_cast<real>(hw);
            for (int ch = 0; ch < c; ++ch) {
                real gv = g[static_cast<size_t>(ch)] * inv;
                real* gxp = gx.data() + static_cast<size_t>(ch) * hw;
                for (long long i = 0; i < hw; ++i) gxp[i] += gv;
            }
        },
        "mean_hw");
}

// ---------------------------------------------------------------------------
// trainable parameters and layer containers
// ---------------------------------------------------------------------------

struct Param {
    std::string name;
    std::vector<int> shape;
    std::shared_ptr<std::vector<real>> value;
    std::vector<real> adam_m, adam_v;

    long long numel() const { return numel_of(shape); }
};

// Owns all trainable parameters of a model, in creation order.
class ParamRegistry {
public:
    std::shared_ptr<Param> create(std::string name, std::vector<int> shape, std::vector<real> init) {
        require(numel_of(shape) == static_cast<long long>(init.size()), "param init size mismatch: " + name);
        auto p = std::make_shared<Param>();
        p->name = std::move(name);
        p->shape = std::move(shape);
        p->value = std::make_shared<std::vector<real>>(std::move(init));
        p->adam_m.assign(p->value->size(), 0.0);
        p->adam_v.assign(p->value->size(), 0.0);
        params_.push_back(p);
        return p;
    }

    const std::vector<std::shared_ptr<Param>>& all() const { return params_; }

    std::shared_ptr<Param> find(const std::string& name) const {
        for (const auto& p : params_)
            if (p->name == name) return p;
        return nullptr;
    }

    long long total_count() const {
        long long n = 0;
        for (const auto& p : params_) n += p->numel();
        return n;
    }

private:
    std::vector<std::shared_ptr<Param>> params_;
};

// Per-step bridge from persistent parameters to tape leaves. Each parameter
// is mounted once per tape so fan-out accumulates on a single leaf.
class Binder {
public:
    explicit Binder(Tape& tape) : tape_(&tape) {}

    Tensor operator()(const std::shared_ptr<Param>& p) {
        auto it = bound_.find(p.get());
        if (it != bound_.end()) return it->second;
        Tensor t = tape_->leaf(p->shape, p->value, p->name.c_str());
        bound_.emplace(p.get(), t);
        return t;
    }

    bool is_bound(const Param* p) const { return bound_.count(p) > 0; }
    const std::unordered_map<const Param*, Tensor>& bound() const { return bound_; }
    Tape& tape() { return *tape_; }

private:
    Tape* tape_;
    std::unordered_map<const Param*, Tensor> bound_;
};

// fan-in scaled uniform init
inline std::vector<real> init_uniform(Rng& rng, long long n, long long fan_in) {
    real bound = 1.0 / std::sqrt(static_cast<real>(fan_in > 0 ? fan_in : 1));
    std::vector<real> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return v;
}

struct LinearLayer {
    std::shared_ptr<Param> w, b;
    int in = 0, out = 0;

    static LinearLayer make(ParamRegistry& reg, Rng& rng, const std::string& name, int in, int out) {
        LinearLayer l;
        l.in = in;
        l.out = out;
        l.w = reg.create(name + ".w", {out, in}, init_uniform(rng, static_cast<long long>(out) * in, in));
        l.b = reg.create(name + ".b", {out}, std::vector<real>(static_cast<size_t>(out), 0.0));
        return l;
    }

    Tensor forward(Binder& B, const Tensor& x) const { return add(matvec(B(w), x), B(b)); }
};

// 4-layer perceptron, LeakyReLU(0.2) between layers, linear final layer.
struct Mlp {
    std::vector<LinearLayer> layers;

    static Mlp make(ParamRegistry& reg, Rng& rng, const std::string& name, int in, int hidden,
                    int out, int n_layers = 4) {
        Mlp m;
        for (int i = 0; i < n_layers; ++i) {
            int li = (i == 0) ? in : hidden;
            int lo = (i == n_layers - 1) ? out : hidden;
            m.layers.push_back(LinearLayer::make(reg, rng, name + ".fc" + std::to_string(i), li, lo));
        }
        return m;
    }

    Tensor forward(Binder& B, Tensor x) const {
        for (size_t i = 0; i < layers.size(); ++i) {
            x = layers[i].forward(B, x);
            if (i + 1 < layers.size()) x = leaky_relu(x, 0.2);
        }
        return x;
    }

    long long param_count() const {
        long long n = 0;
        for (const auto& l : layers) n += l.w->numel() + l.b->numel();
        return n;
    }
};

}  // namespace lifted3d
