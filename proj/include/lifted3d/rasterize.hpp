#pragma once

#include <array>
#include <vector>

#include "lifted3d/geometry.hpp"
#include "lifted3d/shading.hpp"
#include "lifted3d/tensor.hpp"

namespace lifted3d {

// Triangle mesh over a depth grid: two triangles per cell, uv at each vertex
// equal to the source pixel's normalized grid position.
struct Mesh {
    Tensor vertices;                           // [N,3] camera-space points
    std::vector<std::array<int, 3>> faces;     // M x 3 vertex indices
    std::vector<std::array<real, 2>> uv;       // N x 2 in [0,1]
    int grid_h = 0, grid_w = 0;
};

inline Mesh build_mesh(const Tensor& points) {
    require(points.rank() == 3 && points.dim(2) == 3, "build_mesh expects [H,W,3]");
    int h = points.dim(0), w = points.dim(1);
    require(h >= 2 && w >= 2, "build_mesh: grid must be at least 2x2");
    Mesh m;
    m.grid_h = h;
    m.grid_w = w;
    m.vertices = reshape(points, {h * w, 3});
    m.faces.reserve(static_cast<size_t>(h - 1) * (w - 1) * 2);
    for (int i = 0; i < h - 1; ++i)
        for (int j = 0; j < w - 1; ++j) {
            int p00 = i * w + j, p01 = i * w + j + 1;
            int p10 = (i + 1) * w + j, p11 = (i + 1) * w + j + 1;
            m.faces.push_back({p00, p10, p11});
            m.faces.push_back({p00, p11, p01});
        }
    m.uv.resize(static_cast<size_t>(h) * w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            m.uv[static_cast<size_t>(i) * w + j] = {static_cast<real>(j) / (w - 1),
                                                    static_cast<real>(i) / (h - 1)};
    return m;
}

struct RasterOpts {
    real sigma_ndc = 0.0;   // 0 -> 1/H
    real gamma = 1e-2;      // softmax depth temperature
    real pad_sigmas = 2.0;  // candidate window reach, in sigmas
    real z_near = 0.5, z_far = 1.5;
};

struct RenderOutput {
    Tensor image;                 // [H,W,3]; on the tape when inputs are
    std::vector<real> coverage;   // H*W in [0,1], exactly 0 off-mesh
    std::vector<real> zbuffer;    // H*W soft depths (z_far off-mesh)
    int h = 0, w = 0;
};

namespace rasterdetail {

struct Vert2 {
    real x, y, z;  // projected NDC x,y and camera z
};

struct PairEval {
    bool live = false;
    real dist = 0.0;       // signed edge-distance proxy
    int dmin_edge = 0;
    real s_edge = 0.0;     // sigmoid * C1 window
    real lam[3] = {0, 0, 0};
    bool lam_clamped[3] = {false, false, false};
    real scl = 0.0;        // sum of clamped raw barycentrics
    real a2 = 0.0;         // twice signed area
    real zp = 0.0;         // interpolated camera depth
    real zt = 0.0;         // normalized reversed depth in [0,1]
    bool zt_clamped = false;
    real uvx = 0.0, uvy = 0.0;
    real col[3] = {0, 0, 0};
    // bilinear taps
    int x0 = 0, x1 = 0, y0 = 0, y1 = 0;
    real fx = 0.0, fy = 0.0;
    bool fx_clamped = false, fy_clamped = false;
};

inline real cross2(real ax, real ay, real bx, real by) { return ax * by - ay * bx; }

// Forward evaluation of one pixel/triangle pair.
inline PairEval eval_pair(real qx, real qy, const Vert2& a, const Vert2& b, const Vert2& c,
                          const std::array<real, 2>& uva, const std::array<real, 2>& uvb,
                          const std::array<real, 2>& uvc, const real* tex, int th, int tw,
                          real sigma, real pad, real zn, real zf) {
    PairEval e;
    e.a2 = cross2(b.x - a.x, b.y - a.y, c.x - a.x, c.y - a.y);
    if (std::fabs(e.a2) < 1e-18) return e;  // degenerate: contributes nothing
    real orient = e.a2 > 0 ? 1.0 : -1.0;

    // signed distance proxy: min over edges of the signed perpendicular
    // distance (positive inside)
    const Vert2* p0s[3] = {&a, &b, &c};
    const Vert2* p1s[3] = {&b, &c, &a};
    e.dist = 1e30;
    for (int k = 0; k < 3; ++k) {
        const Vert2& p0 = *p0s[k];
        const Vert2& p1 = *p1s[k];
        real ef = cross2(p1.x - p0.x, p1.y - p0.y, qx - p0.x, qy - p0.y);
        real len = std::sqrt((p1.x - p0.x) * (p1.x - p0.x) + (p1.y - p0.y) * (p1.y - p0.y));
        if (len < 1e-18) return e;
        real d = orient * ef / len;
        if (d < e.dist) {
            e.dist = d;
            e.dmin_edge = k;
        }
    }
    if (e.dist <= -pad) return e;  // outside the smooth window

    // C1 window ramps from 0 at -pad to 1 at -pad + 2*sigma
    real t = (e.dist + pad) / (2.0 * sigma);
    real win = 1.0;
    if (t < 1.0) win = t * t * (3.0 - 2.0 * t);
    e.s_edge = win / (1.0 + std::exp(-e.dist / sigma));

    // unclamped barycentrics, then clamp and renormalize
    real nb = cross2(qx - a.x, qy - a.y, c.x - a.x, c.y - a.y);
    real nc = cross2(b.x - a.x, b.y - a.y, qx - a.x, qy - a.y);
    real wb = nb / e.a2, wc = nc / e.a2, wa = 1.0 - wb - wc;
    real raw[3] = {wa, wb, wc};
    real cl[3];
    for (int k = 0; k < 3; ++k) {
        cl[k] = raw[k];
        e.lam_clamped[k] = false;
        if (cl[k] < 0.0) {
            cl[k] = 0.0;
            e.lam_clamped[k] = true;
        } else if (cl[k] > 1.0) {
            cl[k] = 1.0;
            e.lam_clamped[k] = true;
        }
    }
    e.scl = cl[0] + cl[1] + cl[2];
    for (int k = 0; k < 3; ++k) e.lam[k] = cl[k] / e.scl;

    e.zp = e.lam[0] * a.z + e.lam[1] * b.z + e.lam[2] * c.z;
    e.zt = (zf - e.zp) / (zf - zn);
    e.zt_clamped = false;
    if (e.zt < 0.0) {
        e.zt = 0.0;
        e.zt_clamped = true;
    } else if (e.zt > 1.0) {
        e.zt = 1.0;
        e.zt_clamped = true;
    }

    e.uvx = e.lam[0] * uva[0] + e.lam[1] * uvb[0] + e.lam[2] * uvc[0];
    e.uvy = e.lam[0] * uva[1] + e.lam[1] * uvb[1] + e.lam[2] * uvc[1];

    // bilinear texture sample at uv * (size-1)
    real px = e.uvx * (tw - 1), py = e.uvy * (th - 1);
    e.fx_clamped = px <= 0.0 || px >= tw - 1;
    e.fy_clamped = py <= 0.0 || py >= th - 1;
    px = std::clamp<real>(px, 0.0, static_cast<real>(tw - 1));
    py = std::clamp<real>(py, 0.0, static_cast<real>(th - 1));
    e.x0 = std::min(static_cast<int>(px), tw - 2 >= 0 ? tw - 2 : 0);
    e.y0 = std::min(static_cast<int>(py), th - 2 >= 0 ? th - 2 : 0);
    e.x1 = std::min(e.x0 + 1, tw - 1);
    e.y1 = std::min(e.y0 + 1, th - 1);
    e.fx = px - e.x0;
    e.fy = py - e.y0;
    for (int ch = 0; ch < 3; ++ch) {
        real t00 = tex[(static_cast<size_t>(e.y0) * tw + e.x0) * 3 + ch];
        real t01 = tex[(static_cast<size_t>(e.y0) * tw + e.x1) * 3 + ch];
        real t10 = tex[(static_cast<size_t>(e.y1) * tw + e.x0) * 3 + ch];
        real t11 = tex[(static_cast<size_t>(e.y1) * tw + e.x1) * 3 + ch];
        e.col[ch] = (1 - e.fy) * ((1 - e.fx) * t00 + e.fx * t01) +
                    e.fy * ((1 - e.fx) * t10 + e.fx * t11);
    }
    e.live = true;
    return e;
}

}  // namespace rasterdetail

// Soft differentiable rasterization: per-pixel softmax aggregation over
// nearby triangles with sigmoid edge profiles of width sigma. Gradients flow
// to mesh vertices, the texture, and the background color. Coverage and the
// z-buffer are reported as plain (non-differentiated) buffers.
inline RenderOutput rasterize(const Mesh& mesh, const Tensor& texture, const Camera& cam,
                              const Tensor& background, const RasterOpts& opts = {}) {
    using namespace rasterdetail;
    require(texture.rank() == 3 && texture.dim(2) == 3, "rasterize expects [H,W,3] texture");
    require(background.numel() == 3, "rasterize expects a [3] background color");
    const Tensor& verts = mesh.vertices;
    require(verts.rank() == 2 && verts.dim(1) == 3, "rasterize: mesh vertices must be [N,3]");
    int n_verts = verts.dim(0);
    int h = cam.h, w = cam.w;
    int th = texture.dim(0), tw = texture.dim(1);
    real tf = cam.tan_half_fov();
    real sigma = opts.sigma_ndc > 0 ? opts.sigma_ndc : 1.0 / h;
    real pad = opts.pad_sigmas * sigma;
    real zn = opts.z_near, zf = opts.z_far;
    real inv_gamma = 1.0 / opts.gamma;

    // project vertices
    std::vector<Vert2> v2(static_cast<size_t>(n_verts));
    {
        const auto& vd = verts.data();
        for (int i = 0; i < n_verts; ++i) {
            real X = vd[static_cast<size_t>(i) * 3], Y = vd[static_cast<size_t>(i) * 3 + 1],
                 Z = vd[static_cast<size_t>(i) * 3 + 2];
            require(Z > 0.0, "rasterize: vertex depth must be positive");
            v2[static_cast<size_t>(i)] = {X / (Z * tf), Y / (Z * tf), Z};
        }
    }

    // candidate lists (CSR over pixels), bbox expanded by the window reach
    int n_faces = static_cast<int>(mesh.faces.size());
    std::vector<int> counts(static_cast<size_t>(h) * w + 1, 0);
    auto pixel_range = [&](const std::array<int, 3>& f, int& j0, int& j1, int& i0, int& i1) {
        real xmin = 1e30, xmax = -1e30, ymin = 1e30, ymax = -1e30;
        for (int k = 0; k < 3; ++k) {
            const Vert2& p = v2[static_cast<size_t>(f[static_cast<size_t>(k)])];
            xmin = std::min(xmin, p.x);
            xmax = std::max(xmax, p.x);
            ymin = std::min(ymin, p.y);
            ymax = std::max(ymax, p.y);
        }
        // pixel j has NDC x = 2j/(w-1)-1  =>  j = (x+1)(w-1)/2
        j0 = std::max(0, static_cast<int>(std::ceil((xmin - pad + 1.0) * (w - 1) * 0.5)));
        j1 = std::min(w - 1, static_cast<int>(std::floor((xmax + pad + 1.0) * (w - 1) * 0.5)));
        i0 = std::max(0, static_cast<int>(std::ceil((ymin - pad + 1.0) * (h - 1) * 0.5)));
        i1 = std::min(h - 1, static_cast<int>(std::floor((ymax + pad + 1.0) * (h - 1) * 0.5)));
    };
    for (int fidx = 0; fidx < n_faces; ++fidx) {
        int j0, j1, i0, i1;
        pixel_range(mesh.faces[static_cast<size_t>(fidx)], j0, j1, i0, i1);
        for (int i = i0; i <= i1; ++i)
            for (int j = j0; j <= j1; ++j) ++counts[static_cast<size_t>(i) * w + j + 1];
    }
    for (size_t i = 1; i < counts.size(); ++i) counts[i] += counts[i - 1];
    std::vector<int> cand(static_cast<size_t>(counts.back()));
    {
        std::vector<int> cursor(counts.begin(), counts.end() - 1);
        for (int fidx = 0; fidx < n_faces; ++fidx) {
            int j0, j1, i0, i1;
            pixel_range(mesh.faces[static_cast<size_t>(fidx)], j0, j1, i0, i1);
            for (int i = i0; i <= i1; ++i)
                for (int j = j0; j <= j1; ++j) cand[static_cast<size_t>(cursor[static_cast<size_t>(i) * w + j]++)] = fidx;
        }
    }

    const real* tex = texture.data().data();
    const real* bg = background.data().data();
    std::vector<real> image(static_cast<size_t>(h) * w * 3);
    std::vector<real> coverage(static_cast<size_t>(h) * w);
    std::vector<real> zbuf(static_cast<size_t>(h) * w);
    auto denom_sh = std::make_shared<std::vector<real>>(static_cast<size_t>(h) * w);
    auto mref_sh = std::make_shared<std::vector<real>>(static_cast<size_t>(h) * w);

    auto pixel_forward = [&](int i, int j) {
        size_t pix = static_cast<size_t>(i) * w + j;
        real qx = ndc_of(j, w), qy = ndc_of(i, h);
        real m = 0.0;  // background exponent is zt=0
        for (int ci = counts[pix]; ci < counts[pix + 1]; ++ci) {
            const auto& f = mesh.faces[static_cast<size_t>(cand[static_cast<size_t>(ci)])];
            PairEval e = eval_pair(qx, qy, v2[static_cast<size_t>(f[0])], v2[static_cast<size_t>(f[1])],
                                   v2[static_cast<size_t>(f[2])], mesh.uv[static_cast<size_t>(f[0])],
                                   mesh.uv[static_cast<size_t>(f[1])], mesh.uv[static_cast<size_t>(f[2])],
                                   tex, th, tw, sigma, pad, zn, zf);
            if (e.live && e.zt * inv_gamma > m) m = e.zt * inv_gamma;
        }
        real denom = std::exp(0.0 - m);  // background term
        real acc[3] = {bg[0] * denom, bg[1] * denom, bg[2] * denom};
        real zacc = zf * denom;
        for (int ci = counts[pix]; ci < counts[pix + 1]; ++ci) {
            const auto& f = mesh.faces[static_cast<size_t>(cand[static_cast<size_t>(ci)])];
            PairEval e = eval_pair(qx, qy, v2[static_cast<size_t>(f[0])], v2[static_cast<size_t>(f[1])],
                                   v2[static_cast<size_t>(f[2])], mesh.uv[static_cast<size_t>(f[0])],
                                   mesh.uv[static_cast<size_t>(f[1])], mesh.uv[static_cast<size_t>(f[2])],
                                   tex, th, tw, sigma, pad, zn, zf);
            if (!e.live) continue;
            real ek = e.s_edge * std::exp(e.zt * inv_gamma - m);
            denom += ek;
            for (int ch = 0; ch < 3; ++ch) acc[ch] += ek * e.col[ch];
            zacc += ek * e.zp;
        }
        real inv_denom = 1.0 / denom;
        for (int ch = 0; ch < 3; ++ch) image[pix * 3 + ch] = acc[ch] * inv_denom;
        real wbg = std::exp(0.0 - m) * inv_denom;
        coverage[pix] = 1.0 - wbg;
        zbuf[pix] = zacc * inv_denom;
        (*denom_sh)[pix] = denom;
        (*mref_sh)[pix] = m;
    };

    parallel_for(h, [&](int lo, int hi) {
        for (int i = lo; i < hi; ++i)
            for (int j = 0; j < w; ++j) pixel_forward(i, j);
    });

    RenderOutput out;
    out.h = h;
    out.w = w;
    out.coverage = std::move(coverage);
    out.zbuffer = std::move(zbuf);

    Tape* tp = detail::tape_of({&verts, &texture, &background});
    if (!tp) {
        out.image = Tensor::constant({h, w, 3}, std::move(image));
        return out;
    }

    int pv = detail::node_or_neg1(verts);
    int pt = detail::node_or_neg1(texture);
    int pb = detail::node_or_neg1(background);
    auto vptr = verts.data_ptr();
    auto tptr = texture.data_ptr();
    auto bptr = background.data_ptr();
    auto faces_sh = std::make_shared<std::vector<std::array<int, 3>>>(mesh.faces);
    auto uv_sh = std::make_shared<std::vector<std::array<real, 2>>>(mesh.uv);
    auto counts_sh = std::make_shared<std::vector<int>>(std::move(counts));
    auto cand_sh = std::make_shared<std::vector<int>>(std::move(cand));

    out.image = tp->record(
        {h, w, 3}, std::move(image), {pv, pt, pb},
        [=](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            const auto& outv = t.value_of(self);
            const auto& vd = *vptr;
            const real* tex2 = tptr->data();
            const real* bg2 = bptr->data();
            const auto& cnts = *counts_sh;
            const auto& cnd = *cand_sh;
            const auto& faces = *faces_sh;
            const auto& uvs = *uv_sh;
            std::vector<real>* gv = pv >= 0 ? &t.grad_buf(pv) : nullptr;
            std::vector<real>* gt = pt >= 0 ? &t.grad_buf(pt) : nullptr;
            std::vector<real>* gb = pb >= 0 ? &t.grad_buf(pb) : nullptr;

            int nv = static_cast<int>(vd.size() / 3);
            std::vector<Vert2> v2b(static_cast<size_t>(nv));
            for (int i = 0; i < nv; ++i) {
                real X = vd[static_cast<size_t>(i) * 3], Y = vd[static_cast<size_t>(i) * 3 + 1],
                     Z = vd[static_cast<size_t>(i) * 3 + 2];
                v2b[static_cast<size_t>(i)] = {X / (Z * tf), Y / (Z * tf), Z};
            }
            // accumulate grads w.r.t. projected 2D coords first, then chain
            // through the projection at the end
            std::vector<real> g2(static_cast<size_t>(nv) * 3, 0.0);  // (gx2d, gy2d, gz)

            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) {
                    size_t pix = static_cast<size_t>(i) * w + j;
                    const real* gc = g.data() + pix * 3;
                    if (gc[0] == 0.0 && gc[1] == 0.0 && gc[2] == 0.0) continue;
                    real qx = ndc_of(j, w), qy = ndc_of(i, h);
                    real denom = (*denom_sh)[pix];
                    real m = (*mref_sh)[pix];
                    const real* F = outv.data() + pix * 3;
                    real inv_denom = 1.0 / denom;

                    // background contribution
                    real wbg = std::exp(0.0 - m) * inv_denom;
                    if (gb) {
                        auto& gbr = *gb;
                        for (int ch = 0; ch < 3; ++ch) gbr[static_cast<size_t>(ch)] += gc[ch] * wbg;
                    }

                    for (int ci = cnts[pix]; ci < cnts[pix + 1]; ++ci) {
                        const auto& f = faces[static_cast<size_t>(cnd[static_cast<size_t>(ci)])];
                        const Vert2& A = v2b[static_cast<size_t>(f[0])];
                        const Vert2& B = v2b[static_cast<size_t>(f[1])];
                        const Vert2& C = v2b[static_cast<size_t>(f[2])];
                        PairEval e = eval_pair(qx, qy, A, B, C, uvs[static_cast<size_t>(f[0])],
                                               uvs[static_cast<size_t>(f[1])], uvs[static_cast<size_t>(f[2])],
                                               tex2, th, tw, sigma, pad, zn, zf);
                        if (!e.live) continue;
                        real Ek = std::exp(e.zt * inv_gamma - m);
                        real ek = e.s_edge * Ek;
                        real wk = ek * inv_denom;

                        // dF/de_k = (col - F)/denom reduced against upstream
                        real g_ek = 0.0;
                        for (int ch = 0; ch < 3; ++ch) g_ek += gc[ch] * (e.col[ch] - F[ch]) * inv_denom;
                        real g_s = g_ek * Ek;
                        real g_zt = g_ek * ek * inv_gamma;

                        // texture taps and uv via the bilinear sample
                        real g_fx = 0.0, g_fy = 0.0;
                        for (int ch = 0; ch < 3; ++ch) {
                            real gcol = gc[ch] * wk;
                            real t00 = tex2[(static_cast<size_t>(e.y0) * tw + e.x0) * 3 + ch];
                            real t01 = tex2[(static_cast<size_t>(e.y0) * tw + e.x1) * 3 + ch];
                            real t10 = tex2[(static_cast<size_t>(e.y1) * tw + e.x0) * 3 + ch];
                            real t11 = tex2[(static_cast<size_t>(e.y1) * tw + e.x1) * 3 + ch];
                            if (gt) {
                                auto& gtr = *gt;
                                gtr[(static_cast<size_t>(e.y0) * tw + e.x0) * 3 + ch] += gcol * (1 - e.fy) * (1 - e.fx);
                                gtr[(static_cast<size_t>(e.y0) * tw + e.x1) * 3 + ch] += gcol * (1 - e.fy) * e.fx;
                                gtr[(static_cast<size_t>(e.y1) * tw + e.x0) * 3 + ch] += gcol * e.fy * (1 - e.fx);
                                gtr[(static_cast<size_t>(e.y1) * tw + e.x1) * 3 + ch] += gcol * e.fy * e.fx;
                            }
                            g_fx += gcol * ((1 - e.fy) * (t01 - t00) + e.fy * (t11 - t10));
                            g_fy += gcol * ((1 - e.fx) * (t10 - t00) + e.fx * (t11 - t01));
                        }
                        if (!gv) continue;

                        real g_uvx = e.fx_clamped ? 0.0 : g_fx * (tw - 1);
                        real g_uvy = e.fy_clamped ? 0.0 : g_fy * (th - 1);

                        // depth path
                        real g_zp = e.zt_clamped ? 0.0 : -g_zt / (zf - zn);

                        // lambda grads from uv and depth interpolation
                        const std::array<real, 2>* uvv[3] = {&uvs[static_cast<size_t>(f[0])],
                                                             &uvs[static_cast<size_t>(f[1])],
                                                             &uvs[static_cast<size_t>(f[2])]};
                        real zs[3] = {A.z, B.z, C.z};
                        real g_lam[3];
                        for (int k = 0; k < 3; ++k)
                            g_lam[k] = g_uvx * (*uvv[k])[0] + g_uvy * (*uvv[k])[1] + g_zp * zs[k];
                        // vertex z gets the direct interpolation term
                        real gz_direct[3] = {g_zp * e.lam[0], g_zp * e.lam[1], g_zp * e.lam[2]};

                        // clamped renormalization jacobian: lam_k = cl_k/scl
                        real g_raw[3] = {0, 0, 0};
                        {
                            real dot = 0.0;
                            for (int k = 0; k < 3; ++k) dot += g_lam[k] * e.lam[k];
                            for (int k = 0; k < 3; ++k)
                                if (!e.lam_clamped[k]) g_raw[k] = (g_lam[k] - dot) / e.scl;
                        }
                        // raw barycentrics: wa = 1 - wb - wc
                        real g_wb = g_raw[1] - g_raw[0];
                        real g_wc = g_raw[2] - g_raw[0];

                        // wb = Nb/A2, wc = Nc/A2
                        real nb = cross2(qx - A.x, qy - A.y, C.x - A.x, C.y - A.y);
                        real nc = cross2(B.x - A.x, B.y - A.y, qx - A.x, qy - A.y);
                        real wbv = nb / e.a2, wcv = nc / e.a2;
                        real g_nb = g_wb / e.a2;
                        real g_nc = g_wc / e.a2;
                        real g_a2 = -(g_wb * wbv + g_wc * wcv) / e.a2;

                        real gax = 0, gay = 0, gbx = 0, gby = 0, gcx = 0, gcy = 0;
                        // dNb: independent of B
                        gax += g_nb * (qy - C.y);
                        gay += g_nb * (C.x - qx);
                        gcx += g_nb * (-(qy - A.y));
                        gcy += g_nb * (qx - A.x);
                        // dNc: independent of C
                        gax += g_nc * (B.y - qy);
                        gay += g_nc * (qx - B.x);
                        gbx += g_nc * (qy - A.y);
                        gby += g_nc * (-(qx - A.x));
                        // dA2
                        gax += g_a2 * (B.y - C.y);
                        gay += g_a2 * (C.x - B.x);
                        gbx += g_a2 * (C.y - A.y);
                        gby += g_a2 * (-(C.x - A.x));
                        gcx += g_a2 * (-(B.y - A.y));
                        gcy += g_a2 * (B.x - A.x);

                        // edge-distance path through the argmin edge
                        if (g_s != 0.0) {
                            real sig = 1.0 / (1.0 + std::exp(-e.dist / sigma));
                            real tt = (e.dist + pad) / (2.0 * sigma);
                            real win = tt < 1.0 ? tt * tt * (3.0 - 2.0 * tt) : 1.0;
                            real dwin = tt < 1.0 ? (6.0 * tt - 6.0 * tt * tt) / (2.0 * sigma) : 0.0;
                            real dsdD = sig * (1.0 - sig) / sigma * win + sig * dwin;
                            real g_D = g_s * dsdD;
                            static const int e0[3] = {0, 1, 2};
                            static const int e1[3] = {1, 2, 0};
                            int k = e.dmin_edge;
                            const Vert2* vs[3] = {&A, &B, &C};
                            const Vert2& P0 = *vs[e0[k]];
                            const Vert2& P1 = *vs[e1[k]];
                            real ex = P1.x - P0.x, ey = P1.y - P0.y;
                            real len = std::sqrt(ex * ex + ey * ey);
                            real ef = cross2(ex, ey, qx - P0.x, qy - P0.y);
                            real orient = e.a2 > 0 ? 1.0 : -1.0;
                            // D = orient * ef / len
                            real gD_ef = g_D * orient / len;
                            real gD_len = -g_D * orient * ef / (len * len);
                            real gp0x = gD_ef * (P1.y - qy) + gD_len * (-ex / len);
                            real gp0y = gD_ef * (qx - P1.x) + gD_len * (-ey / len);
                            real gp1x = gD_ef * (qy - P0.y) + gD_len * (ex / len);
                            real gp1y = gD_ef * (-(qx - P0.x)) + gD_len * (ey / len);
                            real* gtab[3][2] = {{&gax, &gay}, {&gbx, &gby}, {&gcx, &gcy}};
                            *gtab[e0[k]][0] += gp0x;
                            *gtab[e0[k]][1] += gp0y;
                            *gtab[e1[k]][0] += gp1x;
                            *gtab[e1[k]][1] += gp1y;
                        }

                        g2[static_cast<size_t>(f[0]) * 3 + 0] += gax;
                        g2[static_cast<size_t>(f[0]) * 3 + 1] += gay;
                        g2[static_cast<size_t>(f[0]) * 3 + 2] += gz_direct[0];
                        g2[static_cast<size_t>(f[1]) * 3 + 0] += gbx;
                        g2[static_cast<size_t>(f[1]) * 3 + 1] += gby;
                        g2[static_cast<size_t>(f[1]) * 3 + 2] += gz_direct[1];
                        g2[static_cast<size_t>(f[2]) * 3 + 0] += gcx;
                        g2[static_cast<size_t>(f[2]) * 3 + 1] += gcy;
                        g2[static_cast<size_t>(f[2]) * 3 + 2] += gz_direct[2];
                    }
                }

            if (gv) {
                auto& gvr = *gv;
                for (int i = 0; i < nv; ++i) {
                    real X = vd[static_cast<size_t>(i) * 3], Y = vd[static_cast<size_t>(i) * 3 + 1],
                         Z = vd[static_cast<size_t>(i) * 3 + 2];
                    real gx2 = g2[static_cast<size_t>(i) * 3], gy2 = g2[static_cast<size_t>(i) * 3 + 1],
                         gz = g2[static_cast<size_t>(i) * 3 + 2];
                    gvr[static_cast<size_t>(i) * 3 + 0] += gx2 / (Z * tf);
                    gvr[static_cast<size_t>(i) * 3 + 1] += gy2 / (Z * tf);
                    gvr[static_cast<size_t>(i) * 3 + 2] += gz - (gx2 * X + gy2 * Y) / (Z * Z * tf);
                }
            }
        },
        "rasterize");
    return out;
}

// Full renderer composition: back-project the depth map, view-transform,
// blend positions through the transformation map, build the mesh, relight
// the albedo in the canonical frame, rasterize.
inline RenderOutput render(const Tensor& albedo, const Tensor& depth, const Tensor& tmap,
                           const Tensor& view, const Tensor& light, const Camera& cam,
                           const Tensor& background, const RasterOpts& opts = {}) {
    require(albedo.rank() == 3 && albedo.dim(0) == cam.h && albedo.dim(1) == cam.w,
            "render: albedo/camera size mismatch");
    require(depth.rank() == 2 && depth.dim(0) == cam.h && depth.dim(1) == cam.w,
            "render: depth/camera size mismatch");
    require(tmap.rank() == 2 && tmap.dim(0) == cam.h && tmap.dim(1) == cam.w,
            "render: transform map/camera size mismatch");
    Tensor points = depth_to_points(depth, cam);
    Tensor p_tgt = apply_view(points, view);
    Tensor p_new = warp_positions(points, p_tgt, tmap);
    Mesh mesh = build_mesh(p_new);
    Tensor normals = compute_normals(points);
    Tensor texture = relight(albedo, normals, light);
    return rasterize(mesh, texture, cam, background, opts);
}

}  // namespace lifted3d
