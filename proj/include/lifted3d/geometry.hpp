#pragma once

#include <array>
#include <vector>

#include "lifted3d/tensor.hpp"

namespace lifted3d {

// Pinhole camera: principal point at image center, NDC corners at +-1.
struct Camera {
    real fov_deg = 10.0;
    int h = 32, w = 32;

    Camera() = default;
    Camera(real fov, int hh, int ww) : fov_deg(fov), h(hh), w(ww) {
        require(fov_deg > 0.0 && fov_deg < 90.0, "camera fov must be in (0, 90) degrees");
        require(h >= 2 && w >= 2, "camera image size must be at least 2x2");
    }

    real tan_half_fov() const { return std::tan(deg2rad(fov_deg) * 0.5); }
};

// 6-dof viewpoint: rotations in degrees (pitch rx, yaw ry, roll rz) and
// translations in camera units.
struct Viewpoint {
    real rx = 0, ry = 0, rz = 0;
    real tx = 0, ty = 0, tz = 0;

    bool in_range() const {
        auto rot_ok = [](real a) { return a >= -60.0 && a <= 60.0; };
        auto tr_ok = [](real t) { return t >= -0.1 && t <= 0.1; };
        return rot_ok(rx) && rot_ok(ry) && rot_ok(rz) && tr_ok(tx) && tr_ok(ty) && tr_ok(tz);
    }

    Tensor to_tensor() const { return Tensor::constant({6}, {rx, ry, rz, tx, ty, tz}); }

    static Viewpoint from_tensor(const Tensor& t) {
        require(t.numel() == 6, "viewpoint tensor must have 6 entries");
        return {t[0], t[1], t[2], t[3], t[4], t[5]};
    }
};

// Row-major 3x3 rotation R = Rz * Rx * Ry for plain (non-tape) uses.
inline std::array<real, 9> rotation_matrix(const Viewpoint& v) {
    real ax = deg2rad(v.rx), ay = deg2rad(v.ry), az = deg2rad(v.rz);
    real ca = std::cos(ax), sa = std::sin(ax);
    real cb = std::cos(ay), sb = std::sin(ay);
    real cc = std::cos(az), sc = std::sin(az);
    return {cc * cb - sc * sa * sb, -sc * ca, cc * sb + sc * sa * cb,
            sc * cb + cc * sa * sb, cc * ca,  sc * sb - cc * sa * cb,
            -ca * sb,               sa,       ca * cb};
}

// NDC coordinate of pixel column j / row i (corners at +-1).
inline real ndc_of(int idx, int n) { return 2.0 * idx / (n - 1) - 1.0; }

// Fixed per-pixel grids u*tan(fov/2) and v*tan(fov/2).
inline void ndc_tan_grids(const Camera& cam, std::vector<real>& ut, std::vector<real>& vt) {
    real tf = cam.tan_half_fov();
    ut.resize(static_cast<size_t>(cam.h) * cam.w);
    vt.resize(ut.size());
    for (int i = 0; i < cam.h; ++i)
        for (int j = 0; j < cam.w; ++j) {
            ut[static_cast<size_t>(i) * cam.w + j] = ndc_of(j, cam.w) * tf;
            vt[static_cast<size_t>(i) * cam.w + j] = ndc_of(i, cam.h) * tf;
        }
}

// Back-projects a depth map to camera-space points: pixel (i,j) with depth z
// maps to (u*tan(fov/2)*z, v*tan(fov/2)*z, z).
inline Tensor depth_to_points(const Tensor& depth, const Camera& cam) {
    require(depth.rank() == 2 && depth.dim(0) == cam.h && depth.dim(1) == cam.w,
            "depth_to_points: depth map " + shape_str(depth.shape()) + " does not match camera");
    std::vector<real> ut, vt;
    ndc_tan_grids(cam, ut, vt);
    Tensor x = mul_constvec(depth, ut, "depth_x");
    Tensor y = mul_constvec(depth, vt, "depth_y");
    return stack_last({x, y, depth});
}

// Central-difference gradient of a [H,W,C] (or [H,W]) grid along an axis,
// one-sided at the borders.
inline Tensor grid_diff(const Tensor& x, int axis) {
    require(x.rank() == 2 || x.rank() == 3, "grid_diff expects [H,W] or [H,W,C]");
    require(axis == 0 || axis == 1, "grid_diff: axis must be 0 or 1");
    int h = x.dim(0), w = x.dim(1);
    int c = x.rank() == 3 ? x.dim(2) : 1;
    require((axis == 0 ? h : w) >= 2, "grid_diff: grid must be at least 2 wide on the axis");
    const auto& xd = x.data();
    std::vector<real> out(xd.size());
    auto at = [&](int i, int j, int ch) -> real {
        return xd[(static_cast<size_t>(i) * w + j) * c + ch];
    };
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int ch = 0; ch < c; ++ch) {
                real v;
                if (axis == 0) {
                    if (i == 0) v = at(1, j, ch) - at(0, j, ch);
                    else if (i == h - 1) v = at(h - 1, j, ch) - at(h - 2, j, ch);
                    else v = 0.5 * (at(i + 1, j, ch) - at(i - 1, j, ch));
                } else {
                    if (j == 0) v = at(i, 1, ch) - at(i, 0, ch);
                    else if (j == w - 1) v = at(i, w - 1, ch) - at(i, w - 2, ch);
                    else v = 0.5 * (at(i, j + 1, ch) - at(i, j - 1, ch));
                }
                out[(static_cast<size_t>(i) * w + j) * c + ch] = v;
            }
    Tape* tp = detail::tape_of({&x});
    if (!tp) return Tensor::constant(x.shape(), std::move(out));
    int px = x.node();
    return tp->record(
        x.shape(), std::move(out), {px},
        [px, h, w, c, axis](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            auto& gx = t.grad_buf(px);
            auto gat = [&](int i, int j, int ch) -> real {
                return g[(static_cast<size_t>(i) * w + j) * c + ch];
            };
            auto acc = [&](int i, int j, int ch, real v) {
                gx[(static_cast<size_t>(i) * w + j) * c + ch] += v;
            };
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j)
                    for (int ch = 0; ch < c; ++ch) {
                        real gv = gat(i, j, ch);
                        if (gv == 0.0) continue;
                        if (axis == 0) {
                            if (i == 0) {
                                acc(1, j, ch, gv);
                                acc(0, j, ch, -gv);
                            } else if (i == h - 1) {
                                acc(h - 1, j, ch, gv);
                                acc(h - 2, j, ch, -gv);
                            } else {
                                acc(i + 1, j, ch, 0.5 * gv);
                                acc(i - 1, j, ch, -0.5 * gv);
                            }
                        } else {
                            if (j == 0) {
                                acc(i, 1, ch, gv);
                                acc(i, 0, ch, -gv);
                            } else if (j == w - 1) {
                                acc(i, w - 1, ch, gv);
                                acc(i, w - 2, ch, -gv);
                            } else {
                                acc(i, j + 1, ch, 0.5 * gv);
                                acc(i, j - 1, ch, -0.5 * gv);
                            }
                        }
                    }
        },
        "grid_diff");
}

// Normalizes each 3-vector of a [H,W,3] grid to unit length; degenerate
// (near-zero) vectors fall back to (0,0,-1) with zero gradient.
inline Tensor normalize_vec3_grid(const Tensor& v) {
    require(v.rank() == 3 && v.dim(2) == 3, "normalize_vec3_grid expects [H,W,3]");
    long long n = v.numel() / 3;
    const auto& vd = v.data();
    std::vector<real> out(vd.size());
    std::vector<real> inv_len(static_cast<size_t>(n));
    const real tiny = 1e-30;
    for (long long i = 0; i < n; ++i) {
        real a = vd[static_cast<size_t>(3 * i)], b = vd[static_cast<size_t>(3 * i + 1)],
             cz = vd[static_cast<size_t>(3 * i + 2)];
        real len = std::sqrt(a * a + b * b + cz * cz);
        if (len < tiny) {
            inv_len[static_cast<size_t>(i)] = 0.0;  // marks fallback
            out[static_cast<size_t>(3 * i)] = 0.0;
            out[static_cast<size_t>(3 * i + 1)] = 0.0;
            out[static_cast<size_t>(3 * i + 2)] = -1.0;
        } else {
            real il = 1.0 / len;
            inv_len[static_cast<size_t>(i)] = il;
            out[static_cast<size_t>(3 * i)] = a * il;
            out[static_cast<size_t>(3 * i + 1)] = b * il;
            out[static_cast<size_t>(3 * i + 2)] = cz * il;
        }
    }
    Tape* tp = detail::tape_of({&v});
    if (!tp) return Tensor::constant(v.shape(), std::move(out));
    int pv = v.node();
    auto il_sh = std::make_shared<std::vector<real>>(std::move(inv_len));
    return tp->record(
        v.shape(), std::move(out), {pv},
        [pv, n, il_sh](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            const auto& y = t.value_of(self);
            auto& gv = t.grad_buf(pv);
            const auto& il = *il_sh;
            for (long long i = 0; i < n; ++i) {
                real s = il[static_cast<size_t>(i)];
                if (s == 0.0) continue;  // fallback cell: no gradient
                size_t k = static_cast<size_t>(3 * i);
                real dotgy = g[k] * y[k] + g[k + 1] * y[k + 1] + g[k + 2] * y[k + 2];
                gv[k] += (g[k] - y[k] * dotgy) * s;
                gv[k + 1] += (g[k + 1] - y[k + 1] * dotgy) * s;
                gv[k + 2] += (g[k + 2] - y[k + 2] * dotgy) * s;
            }
        },
        "normalize_vec3");
}

// Elementwise cross product of two [H,W,3] grids.
inline Tensor cross_grid(const Tensor& a, const Tensor& b) {
    Tensor ax = chan(a, 0), ay = chan(a, 1), az = chan(a, 2);
    Tensor bx = chan(b, 0), by = chan(b, 1), bz = chan(b, 2);
    Tensor cx = sub(mul(ay, bz), mul(az, by));
    Tensor cy = sub(mul(az, bx), mul(ax, bz));
    Tensor cz = sub(mul(ax, by), mul(ay, bx));
    return stack_last({cx, cy, cz});
}

// Unit surface normals of a point grid, oriented toward the camera
// (negative z). Tangents come from central differences, one-sided at edges.
inline Tensor compute_normals(const Tensor& points) {
    require(points.rank() == 3 && points.dim(2) == 3, "compute_normals expects [H,W,3]");
    require(points.dim(0) >= 2 && points.dim(1) >= 2, "compute_normals: grid must be at least 2x2");
    Tensor tu = grid_diff(points, 1);  // along width
    Tensor tv = grid_diff(points, 0);  // along height
    return normalize_vec3_grid(cross_grid(tv, tu));
}

// Scalar tensor entries of R = Rz * Rx * Ry for a [6] viewpoint tensor
// (degrees). Row-major order.
inline std::array<Tensor, 9> rotation_entries(const Tensor& view) {
    require(view.numel() == 6, "rotation_entries expects a [6] viewpoint tensor");
    const real d2r = kPi / 180.0;
    Tensor ax = mul_const(index(view, 0), d2r);
    Tensor ay = mul_const(index(view, 1), d2r);
    Tensor az = mul_const(index(view, 2), d2r);
    Tensor ca = cos_op(ax), sa = sin_op(ax);
    Tensor cb = cos_op(ay), sb = sin_op(ay);
    Tensor cc = cos_op(az), sc = sin_op(az);
    return {
        sub(mul(cc, cb), mul(sc, mul(sa, sb))), neg(mul(sc, ca)), add(mul(cc, sb), mul(sc, mul(sa, cb))),
        add(mul(sc, cb), mul(cc, mul(sa, sb))), mul(cc, ca),      sub(mul(sc, sb), mul(cc, mul(sa, cb))),
        neg(mul(ca, sb)),                       sa,               mul(ca, cb),
    };
}

// Rigid view transform: rotate about the depth-weighted centroid by
// Rz*Rx*Ry, then translate. `view` is a [6] tensor in degrees / units.
inline Tensor apply_view(const Tensor& points, const Tensor& view) {
    require(points.rank() == 3 && points.dim(2) == 3, "apply_view expects [H,W,3]");
    Tensor px = chan(points, 0), py = chan(points, 1), pz = chan(points, 2);
    Tensor wsum = sum_all(pz);
    Tensor cx = div(sum_all(mul(px, pz)), wsum);
    Tensor cy = div(sum_all(mul(py, pz)), wsum);
    Tensor cz = div(sum_all(mul(pz, pz)), wsum);
    Tensor dx = sub(px, cx), dy = sub(py, cy), dz = sub(pz, cz);
    auto r = rotation_entries(view);
    Tensor tx = index(view, 3), ty = index(view, 4), tz = index(view, 5);
    Tensor ox = add(add(add(mul(dx, r[0]), mul(dy, r[1])), mul(dz, r[2])), add(cx, tx));
    Tensor oy = add(add(add(mul(dx, r[3]), mul(dy, r[4])), mul(dz, r[5])), add(cy, ty));
    Tensor oz = add(add(add(mul(dx, r[6]), mul(dy, r[7])), mul(dz, r[8])), add(cz, tz));
    return stack_last({ox, oy, oz});
}

// The per-pixel position blend: p_new = (1 - T) * p_old + T * p_tgt.
// Written in exactly that form so T == 0 and T == 1 reproduce the inputs
// bit-exactly.
inline Tensor warp_positions(const Tensor& p_old, const Tensor& p_tgt, const Tensor& tmap) {
    require(p_old.shape() == p_tgt.shape(), "warp_positions: position grids differ " +
                                                shape_str(p_old.shape()) + " vs " +
                                                shape_str(p_tgt.shape()));
    require(tmap.rank() == 2 && p_old.rank() == 3 && tmap.dim(0) == p_old.dim(0) &&
                tmap.dim(1) == p_old.dim(1),
            "warp_positions: transform map shape mismatch");
    Tensor one_minus = add_const(neg(tmap), 1.0);
    return add(mul_bcast_last(p_old, one_minus), mul_bcast_last(p_tgt, tmap));
}

// Mirrors albedo and depth about the vertical axis (column j -> W-1-j).
inline std::pair<Tensor, Tensor> flip_maps(const Tensor& albedo, const Tensor& depth) {
    return {flip_axis(albedo, 1), flip_axis(depth, 1)};
}

// Border band width for the transform map: 2 pixels at the 32-pixel desk
// resolution, scaled proportionally, never below 1.
inline int border_band_width(int h) {
    int b = static_cast<int>(std::lround(2.0 * h / 32.0));
    return b < 1 ? 1 : b;
}

// [H,W] mask that is 0 on the border band and 1 inside.
inline std::vector<real> border_mask(int h, int w) {
    int band = border_band_width(std::min(h, w));
    std::vector<real> m(static_cast<size_t>(h) * w, 1.0);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            if (i < band || j < band || i >= h - band || j >= w - band)
                m[static_cast<size_t>(i) * w + j] = 0.0;
    return m;
}

}  // namespace lifted3d
