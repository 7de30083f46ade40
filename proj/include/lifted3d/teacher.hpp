#pragma once

#include <vector>

#include "lifted3d/geometry.hpp"
#include "lifted3d/shading.hpp"
#include "lifted3d/tensor.hpp"

namespace lifted3d {

// Frozen procedural image generator standing in for a pre-trained 2D GAN.
// The first three latent coordinates linearly encode yaw, pitch and the
// horizontal light direction of the underlying head scene; the remaining
// coordinates drive identity and texture parameters through a fixed seeded
// projection. Everything is smooth in w, so gradients flow through
// generate() into the latent.
struct TeacherConfig {
    int dw = 64;
    int h = 32, w = 32;
    std::uint64_t seed = 0x7eac8e12ull;
    real fov_deg = 10.0;

    // latent-to-scene linear scales
    real yaw_per_unit = 25.0;    // degrees per unit of w[0]
    real pitch_per_unit = 10.0;  // degrees per unit of w[1]
    real lx_per_unit = 0.5;      // light-x per unit of w[2]

    // scene geometry
    real depth_base = 1.04;     // far plane of the head bump
    real depth_amp = 0.05;      // bump height toward the camera
    real mask_sharpness = 4.0;  // ellipse falloff

    // image-space parallax per degree, matched to the bump height
    real feat_shift_u = -0.0075;  // yaw > 0 moves features left
    real feat_shift_v = 0.0075;   // pitch > 0 moves features down
    real outline_shift = 0.3;     // outline moves this fraction of the feature shift
};

// Exact per-sample ground truth (evaluation-only). The depth map and mask
// are in the neutralized (frontal) frame, which is the frame the shape
// decoder predicts.
struct TeacherScene {
    real yaw_deg = 0, pitch_deg = 0, light_x = 0;
    std::vector<real> depth;  // h*w
    std::vector<real> mask;   // h*w in (0,1)
    int h = 0, w = 0;
};

class Teacher {
public:
    explicit Teacher(TeacherConfig cfg = {}) : cfg_(cfg) {
        require(cfg_.dw >= 8, "teacher latent dimension must be at least 8");
        Rng rng(cfg_.seed);
        int nid = kNumIdParams;
        int rest = cfg_.dw - 3;
        proj_.resize(static_cast<size_t>(nid) * rest);
        real scale = 1.0 / std::sqrt(static_cast<real>(rest));
        for (auto& v : proj_) v = rng.normal() * scale;

        // NDC pixel grids
        int n = cfg_.h * cfg_.w;
        std::vector<real> ug(static_cast<size_t>(n)), vg(static_cast<size_t>(n));
        for (int i = 0; i < cfg_.h; ++i)
            for (int j = 0; j < cfg_.w; ++j) {
                ug[static_cast<size_t>(i) * cfg_.w + j] = ndc_of(j, cfg_.w);
                vg[static_cast<size_t>(i) * cfg_.w + j] = ndc_of(i, cfg_.h);
            }
        ugrid_ = Tensor::constant({cfg_.h, cfg_.w}, ug);
        vgrid_ = Tensor::constant({cfg_.h, cfg_.w}, vg);

        // empirical latent prior from 10,000 draws
        Rng prior_rng = rng.fork(0x5A);
        const int draws = 10000;
        mu_.assign(static_cast<size_t>(cfg_.dw), 0.0);
        std::vector<real> sq(static_cast<size_t>(cfg_.dw), 0.0);
        for (int d = 0; d < draws; ++d)
            for (int k = 0; k < cfg_.dw; ++k) {
                real x = prior_rng.normal();
                mu_[static_cast<size_t>(k)] += x;
                sq[static_cast<size_t>(k)] += x * x;
            }
        sigma_ = 0.0;
        for (int k = 0; k < cfg_.dw; ++k) {
            mu_[static_cast<size_t>(k)] /= draws;
            real var = sq[static_cast<size_t>(k)] / draws - mu_[static_cast<size_t>(k)] * mu_[static_cast<size_t>(k)];
            sigma_ += std::sqrt(std::max<real>(var, 0.0));
        }
        sigma_ /= cfg_.dw;

        digest_ = fnv1a(proj_.data(), proj_.size() * sizeof(real), fnv1a(&cfg_, sizeof(cfg_)));
    }

    const TeacherConfig& config() const { return cfg_; }
    const std::vector<real>& latent_mean() const { return mu_; }
    real latent_std() const { return sigma_; }
    std::uint64_t param_digest() const { return digest_; }

    Tensor sample_latent(Rng& rng) const {
        std::vector<real> w(static_cast<size_t>(cfg_.dw));
        for (auto& v : w) v = rng.normal();
        return Tensor::constant({cfg_.dw}, w);
    }

    // Overwrites the pose/light coordinates with the values that realize
    // (V, L); identity coordinates are untouched. Evaluation-side oracle for
    // what the style manipulation network has to learn.
    Tensor oracle_manipulate(const Tensor& w, const Viewpoint& v, const LightParams& l) const {
        require(w.numel() == cfg_.dw, "oracle_manipulate: latent dimension mismatch");
        std::vector<real> out = w.data();
        out[0] = v.ry / cfg_.yaw_per_unit;
        out[1] = v.rx / cfg_.pitch_per_unit;
        out[2] = l.lx / cfg_.lx_per_unit;
        return Tensor::constant({cfg_.dw}, out);
    }

    // Renders the procedural head for latent w. Differentiable in w when w
    // is on a tape; the teacher's own parameters are constants.
    Tensor generate(const Tensor& w) const {
        require(w.numel() == cfg_.dw, "teacher generate: latent dimension mismatch, expected " +
                                          std::to_string(cfg_.dw));
        IdParams id = decode_id(w);
        Tensor yaw = mul_const(index(w, 0), cfg_.yaw_per_unit);
        Tensor pitch = mul_const(index(w, 1), cfg_.pitch_per_unit);
        Tensor lx = mul_const(index(w, 2), cfg_.lx_per_unit);

        Tensor du = mul_const(yaw, cfg_.feat_shift_u);
        Tensor dv = mul_const(pitch, cfg_.feat_shift_v);
        Tensor ocx = add(id.cx, mul_const(du, cfg_.outline_shift));
        Tensor ocy = add(id.cy, mul_const(dv, cfg_.outline_shift));

        // head mask from the ellipse around the (slightly shifted) outline
        Tensor ue = sub(ugrid_, ocx);
        Tensor ve = sub(vgrid_, ocy);
        Tensor qx = div(ue, id.rx), qy = div(ve, id.ry);
        Tensor q = add(mul(qx, qx), mul(qy, qy));
        Tensor mask = sigmoid(mul_const(add_const(neg(q), 1.0), cfg_.mask_sharpness));

        // Lambertian shading of the depth bump: depth = base - amp * mask,
        // world slope f = d(depth)/dx = amp * m(1-m) * sharpness * 2*ue/rx^2 / tan(fov/2)
        real tf = std::tan(deg2rad(cfg_.fov_deg) * 0.5);
        real cslope = 2.0 * cfg_.mask_sharpness * cfg_.depth_amp / tf;
        Tensor mflank = mul(mask, add_const(neg(mask), 1.0));  // m(1-m)
        Tensor fx = mul_const(mul(mflank, div(ue, mul(id.rx, id.rx))), cslope);
        Tensor fy = mul_const(mul(mflank, div(ve, mul(id.ry, id.ry))), cslope);
        Tensor nf = sqrt_op(add_const(add(mul(fx, fx), mul(fy, fy)), 1.0));
        Tensor nl = sqrt_op(add_const(add(mul(lx, lx), mul(id.ly, id.ly)), 1.0));
        Tensor ndotl = div(div(add_const(neg(add(mul(fx, lx), mul(fy, id.ly))), 1.0), nf), nl);
        Tensor shade = add(mul(relu(ndotl), id.dif), id.amb);

        // features ride the bump and shift with full parallax
        Tensor fu = sub(ugrid_, add(id.cx, du));
        Tensor fv = sub(vgrid_, add(id.cy, dv));
        auto blob = [&](const Tensor& x0, const Tensor& y0, const Tensor& sx, const Tensor& sy) {
            Tensor bx = div(sub(fu, x0), sx);
            Tensor by = div(sub(fv, y0), sy);
            return exp_op(neg(add(mul(bx, bx), mul(by, by))));
        };
        Tensor eye_l = blob(neg(id.eye_dx), id.eye_y, id.eye_s, mul_const(id.eye_s, 0.7));
        Tensor eye_r = blob(id.eye_dx, id.eye_y, id.eye_s, mul_const(id.eye_s, 0.7));
        Tensor mouth = blob(Tensor::scalar(0.0), id.mouth_y, id.mouth_w, id.mouth_h);
        Tensor dark = add_const(neg(add(mul_const(add(eye_l, eye_r), 0.8), mul_const(mouth, 0.5))), 1.0);

        Tensor face_shade = mul(shade, dark);
        std::vector<Tensor> channels;
        for (int c = 0; c < 3; ++c) {
            Tensor facec = mul(face_shade, id.skin[static_cast<size_t>(c)]);
            Tensor blended = add(mul(mask, sub(facec, id.bg[static_cast<size_t>(c)])), id.bg[static_cast<size_t>(c)]);
            channels.push_back(blended);
        }
        return stack_last(channels);
    }

    // Ground-truth scene parameters plus the neutral-frame depth/mask maps.
    TeacherScene scene(const Tensor& w) const {
        require(w.numel() == cfg_.dw, "teacher scene: latent dimension mismatch");
        TeacherScene s;
        s.h = cfg_.h;
        s.w = cfg_.w;
        s.yaw_deg = w[0] * cfg_.yaw_per_unit;
        s.pitch_deg = w[1] * cfg_.pitch_per_unit;
        s.light_x = w[2] * cfg_.lx_per_unit;

        // neutralized frame: pose coordinates zeroed
        std::vector<real> wn = w.data();
        wn[0] = 0.0;
        wn[1] = 0.0;
        IdParams id = decode_id(Tensor::constant({cfg_.dw}, wn));
        real cx = id.cx.scalar_value(), cy = id.cy.scalar_value();
        real rx = id.rx.scalar_value(), ry = id.ry.scalar_value();
        s.depth.resize(static_cast<size_t>(cfg_.h) * cfg_.w);
        s.mask.resize(s.depth.size());
        for (int i = 0; i < cfg_.h; ++i)
            for (int j = 0; j < cfg_.w; ++j) {
                real u = ndc_of(j, cfg_.w) - cx, v = ndc_of(i, cfg_.h) - cy;
                real q = (u / rx) * (u / rx) + (v / ry) * (v / ry);
                real m = 1.0 / (1.0 + std::exp(-cfg_.mask_sharpness * (1.0 - q)));
                s.mask[static_cast<size_t>(i) * cfg_.w + j] = m;
                s.depth[static_cast<size_t>(i) * cfg_.w + j] = cfg_.depth_base - cfg_.depth_amp * m;
            }
        return s;
    }

private:
    static constexpr int kNumIdParams = 17;

    struct IdParams {
        Tensor cx, cy, rx, ry;
        Tensor skin[3], bg[3];
        Tensor eye_dx, eye_y, eye_s;
        Tensor mouth_y, mouth_w, mouth_h;
        Tensor ly, amb, dif;
    };

    Tensor id_raw(const Tensor& w, int k) const {
        // dot of a fixed projection row with the identity part of the latent
        Tensor rest = slice(w, 3, cfg_.dw);
        std::vector<real> row(proj_.begin() + static_cast<long>(k) * (cfg_.dw - 3),
                              proj_.begin() + static_cast<long>(k + 1) * (cfg_.dw - 3));
        return sum_all(mul_constvec(rest, row));
    }

    Tensor squashed(const Tensor& w, int k, real mean, real scale) const {
        return add_const(mul_const(tanh_op(mul_const(id_raw(w, k), 0.8)), scale), mean);
    }

    IdParams decode_id(const Tensor& w) const {
        IdParams p;
        int k = 0;
        p.cx = squashed(w, k++, 0.0, 0.06);
        p.cy = squashed(w, k++, 0.0, 0.06);
        p.rx = squashed(w, k++, 0.58, 0.10);
        p.ry = squashed(w, k++, 0.66, 0.10);
        p.skin[0] = squashed(w, k++, 0.62, 0.18);
        p.skin[1] = squashed(w, k++, 0.50, 0.18);
        p.skin[2] = squashed(w, k++, 0.42, 0.18);
        p.bg[0] = squashed(w, k++, 0.22, 0.10);
        p.bg[1] = squashed(w, k++, 0.24, 0.10);
        p.bg[2] = squashed(w, k++, 0.28, 0.10);
        p.eye_dx = squashed(w, k++, 0.24, 0.05);
        p.eye_y = squashed(w, k++, -0.16, 0.05);
        p.eye_s = squashed(w, k++, 0.10, 0.025);
        p.mouth_y = squashed(w, k++, 0.32, 0.06);
        p.mouth_w = squashed(w, k++, 0.24, 0.06);
        p.mouth_h = squashed(w, k++, 0.08, 0.02);
        p.ly = squashed(w, k++, 0.0, 0.25);
        p.amb = Tensor::scalar(0.72);
        p.dif = Tensor::scalar(0.50);
        require(k == kNumIdParams, "identity parameter count drifted");
        return p;
    }

    TeacherConfig cfg_;
    std::vector<real> proj_;
    Tensor ugrid_, vgrid_;
    std::vector<real> mu_;
    real sigma_ = 1.0;
    std::uint64_t digest_ = 0;
};

// The trainer-facing view of the teacher: image generation and the latent
// prior only. Ground-truth scene data stays behind the Teacher type, which
// only the evaluation layer receives.
struct TeacherHandle {
    const Teacher* teacher = nullptr;

    Tensor generate(const Tensor& w) const { return teacher->generate(w); }
    Tensor sample_latent(Rng& rng) const { return teacher->sample_latent(rng); }
    const std::vector<real>& latent_mean() const { return teacher->latent_mean(); }
    real latent_std() const { return teacher->latent_std(); }
    std::uint64_t param_digest() const { return teacher->param_digest(); }
    int latent_dim() const { return teacher->config().dw; }
    int image_h() const { return teacher->config().h; }
    int image_w() const { return teacher->config().w; }
};

}  // namespace lifted3d
