#pragma once

#include "lifted3d/tensor.hpp"

namespace lifted3d {

// Lambertian light: x-y direction components plus ambient and diffuse
// intensities. Decoded lights keep ka, kd in (0,1); the fixed neutral light
// L0 = (0, 0, 1, 0) deliberately sits on the boundary so that de-lighting by
// it is the identity.
struct LightParams {
    real lx = 0, ly = 0, ka = 0.5, kd = 0.5;

    Tensor to_tensor() const { return Tensor::constant({4}, {lx, ly, ka, kd}); }

    static LightParams from_tensor(const Tensor& t) {
        require(t.numel() == 4, "light tensor must have 4 entries");
        return {t[0], t[1], t[2], t[3]};
    }
};

inline LightParams neutral_light() { return {0.0, 0.0, 1.0, 0.0}; }

constexpr real kShadingFloor = 1e-4;

// shading = ka + kd * max(0, n . l_hat), l_hat = normalize(lx, ly, 1).
// `light` is a [4] tensor (lx, ly, ka, kd); normals is [H,W,3].
inline Tensor compute_shading(const Tensor& normals, const Tensor& light) {
    require(normals.rank() == 3 && normals.dim(2) == 3, "compute_shading expects [H,W,3] normals");
    require(light.numel() == 4, "compute_shading expects a [4] light tensor");
    Tensor lx = index(light, 0), ly = index(light, 1);
    Tensor ka = index(light, 2), kd = index(light, 3);
    Tensor norm = sqrt_op(add_const(add(mul(lx, lx), mul(ly, ly)), 1.0));
    Tensor ex = div(lx, norm), ey = div(ly, norm), ez = div(Tensor::scalar(1.0), norm);
    Tensor d = add(add(mul(chan(normals, 0), ex), mul(chan(normals, 1), ey)),
                   mul(chan(normals, 2), ez));
    return add(mul(relu(d), kd), ka);
}

// The lit side of camera-facing geometry is the -n hemisphere; delight and
// relight agree on this so they stay mutual inverses.
inline Tensor shading_for_surface(const Tensor& camera_facing_normals, const Tensor& light) {
    return compute_shading(neg(camera_facing_normals), light);
}

// albedo = texture / max(shading, floor), per pixel per channel.
inline Tensor delight(const Tensor& texture, const Tensor& normals, const Tensor& light) {
    require(texture.rank() == 3 && texture.dim(2) == 3, "delight expects [H,W,3] texture");
    Tensor s = max_with(shading_for_surface(normals, light), kShadingFloor);
    return div_bcast_last(texture, s);
}

// texture = albedo * shading.
inline Tensor relight(const Tensor& albedo, const Tensor& normals, const Tensor& light) {
    require(albedo.rank() == 3 && albedo.dim(2) == 3, "relight expects [H,W,3] albedo");
    Tensor s = shading_for_surface(normals, light);
    return mul_bcast_last(albedo, s);
}

}  // namespace lifted3d
