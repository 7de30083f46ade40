#include <catch2/catch_amalgamated.hpp>

#include "lifted3d/nn.hpp"
#include "lifted3d/rasterize.hpp"

#include "fd_harness.hpp"

using namespace lifted3d;

namespace {

// Pixels within one pixel of an occlusion boundary (a z-buffer jump or a
// coverage transition) are excluded from gradient checks, per the renderer's
// stated tolerance regime.
std::vector<real> occlusion_free_mask(const RenderOutput& out, real z_jump = 0.03) {
    int h = out.h, w = out.w;
    std::vector<char> boundary(static_cast<size_t>(h) * w, 0);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            real z = out.zbuffer[static_cast<size_t>(i) * w + j];
            real cov = out.coverage[static_cast<size_t>(i) * w + j];
            if (cov > 0.02 && cov < 0.98) boundary[static_cast<size_t>(i) * w + j] = 1;
            for (int di = -1; di <= 1 && !boundary[static_cast<size_t>(i) * w + j]; ++di)
                for (int dj = -1; dj <= 1; ++dj) {
                    int ni = i + di, nj = j + dj;
                    if (ni < 0 || nj < 0 || ni >= h || nj >= w) continue;
                    if (std::fabs(out.zbuffer[static_cast<size_t>(ni) * w + nj] - z) > z_jump) {
                        boundary[static_cast<size_t>(i) * w + j] = 1;
                        break;
                    }
                }
        }
    std::vector<real> mask(static_cast<size_t>(h) * w * 3, 1.0);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            bool excluded = false;
            for (int di = -1; di <= 1 && !excluded; ++di)
                for (int dj = -1; dj <= 1; ++dj) {
                    int ni = i + di, nj = j + dj;
                    if (ni < 0 || nj < 0 || ni >= h || nj >= w) continue;
                    if (boundary[static_cast<size_t>(ni) * w + nj]) {
                        excluded = true;
                        break;
                    }
                }
            if (excluded)
                for (int c = 0; c < 3; ++c) mask[(static_cast<size_t>(i) * w + j) * 3 + c] = 0.0;
        }
    return mask;
}

Mesh single_triangle(Tape* tape, std::vector<real> verts) {
    Mesh m;
    if (tape)
        m.vertices = tape->leaf({3, 3}, verts);
    else
        m.vertices = Tensor::constant({3, 3}, verts);
    m.faces = {{0, 1, 2}};
    m.uv = {{0.25, 0.25}, {0.75, 0.25}, {0.5, 0.75}};
    m.grid_h = m.grid_w = 0;
    return m;
}

}  // namespace

TEST_CASE("build_mesh counts triangles and assigns corner uvs") {
    Tensor g2 = Tensor::full({2, 2, 3}, 1.0);
    Mesh m2 = build_mesh(g2);
    CHECK(m2.faces.size() == 2);
    CHECK(m2.vertices.dim(0) == 4);

    Tensor g3 = Tensor::full({3, 3, 3}, 1.0);
    Mesh m3 = build_mesh(g3);
    CHECK(m3.faces.size() == 8);

    Camera cam(10.0, 4, 5);
    Tensor pts = depth_to_points(Tensor::full({4, 5}, 1.0), cam);
    Mesh m = build_mesh(pts);
    CHECK(m.uv[0][0] == 0.0);
    CHECK(m.uv[0][1] == 0.0);
    CHECK(m.uv[static_cast<size_t>(4 * 5 - 1)][0] == 1.0);
    CHECK(m.uv[static_cast<size_t>(4 * 5 - 1)][1] == 1.0);
    for (const auto& f : m.faces)
        for (int k = 0; k < 3; ++k) CHECK((f[static_cast<size_t>(k)] >= 0 && f[static_cast<size_t>(k)] < 20));
}

TEST_CASE("a triangle covering every pixel yields the texture color") {
    Camera cam(10.0, 8, 8);
    real tf = cam.tan_half_fov();
    // NDC reach of +-4 at z=1 covers the whole image comfortably
    std::vector<real> verts = {-4 * tf, -4 * tf, 1.0, 9 * tf, -4 * tf, 1.0, -4 * tf, 9 * tf, 1.0};
    Mesh m = single_triangle(nullptr, verts);
    Tensor tex = Tensor::full({8, 8, 3}, 0.0);
    std::vector<real> texd(8 * 8 * 3);
    for (size_t i = 0; i < texd.size(); ++i) texd[i] = (i % 3 == 0) ? 0.7 : (i % 3 == 1 ? 0.4 : 0.2);
    tex = Tensor::constant({8, 8, 3}, texd);
    Tensor bg = Tensor::constant({3}, {0.0, 0.0, 1.0});
    RenderOutput out = rasterize(m, tex, cam, bg);
    for (int i = 1; i < 7; ++i)
        for (int j = 1; j < 7; ++j) {
            size_t p = static_cast<size_t>(i) * 8 + j;
            CHECK(out.coverage[p] >= 1.0 - 1e-3);
            CHECK(out.image[p * 3 + 0] == Catch::Approx(0.7).margin(1e-3));
            CHECK(out.image[p * 3 + 1] == Catch::Approx(0.4).margin(1e-3));
            CHECK(out.image[p * 3 + 2] == Catch::Approx(0.2).margin(1e-3));
        }
}

TEST_CASE("pixels with no nearby triangle get the background exactly") {
    Camera cam(10.0, 8, 8);
    real tf = cam.tan_half_fov();
    // a tiny triangle in the top-left corner
    std::vector<real> verts = {-0.9 * tf, -0.9 * tf, 1.0, -0.7 * tf, -0.9 * tf, 1.0,
                               -0.9 * tf, -0.7 * tf, 1.0};
    Mesh m = single_triangle(nullptr, verts);
    Tensor tex = Tensor::full({4, 4, 3}, 0.9);
    Tensor bg = Tensor::constant({3}, {0.11, 0.22, 0.33});
    RenderOutput out = rasterize(m, tex, cam, bg);
    size_t far_pixel = static_cast<size_t>(7) * 8 + 7;
    CHECK(out.coverage[far_pixel] == 0.0);
    CHECK(out.image[far_pixel * 3 + 0] == 0.11);
    CHECK(out.image[far_pixel * 3 + 1] == 0.22);
    CHECK(out.image[far_pixel * 3 + 2] == 0.33);
    CHECK(out.zbuffer[far_pixel] == 1.5);
}

TEST_CASE("single-pair aggregation matches the hand-computed softmax weight") {
    Camera cam(10.0, 9, 9);
    real tf = cam.tan_half_fov();
    real z = 1.0;
    // triangle in NDC (projected): a=(-0.6,-0.5), b=(0.5,-0.4), c=(0.0,0.62)
    std::vector<real> verts = {-0.6 * tf * z, -0.5 * tf * z, z, 0.5 * tf * z, -0.4 * tf * z, z,
                               0.0,           0.62 * tf * z, z};
    Mesh m = single_triangle(nullptr, verts);
    Tensor tex = Tensor::full({4, 4, 3}, 0.8);
    Tensor bg = Tensor::zeros({3});
    RasterOpts opts;
    RenderOutput out = rasterize(m, tex, cam, bg, opts);

    // hand evaluation at the center pixel (4,4): q = (0,0)
    real ax = -0.6, ay = -0.5, bx = 0.5, by = -0.4, cx = 0.0, cy = 0.62;
    auto edge_d = [&](real p0x, real p0y, real p1x, real p1y) {
        real e = (p1x - p0x) * (0.0 - p0y) - (p1y - p0y) * (0.0 - p0x);
        real len = std::sqrt((p1x - p0x) * (p1x - p0x) + (p1y - p0y) * (p1y - p0y));
        return e / len;
    };
    real a2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
    real orient = a2 > 0 ? 1.0 : -1.0;
    real dmin = std::min({orient * edge_d(ax, ay, bx, by), orient * edge_d(bx, by, cx, cy),
                          orient * edge_d(cx, cy, ax, ay)});
    real sigma = 1.0 / 9;
    real pad = 2.0 * sigma;
    real t = (dmin + pad) / (2 * sigma);
    real win = t < 1.0 ? t * t * (3 - 2 * t) : 1.0;
    real s = win / (1.0 + std::exp(-dmin / sigma));
    real zt = (1.5 - 1.0) / 1.0;
    real mref = zt / 0.01;
    real ek = s * std::exp(zt / 0.01 - mref);
    real denom = std::exp(0.0 - mref) + ek;
    real expect_cov = 1.0 - std::exp(0.0 - mref) / denom;
    real expect_col = ek * 0.8 / denom;
    size_t p = static_cast<size_t>(4) * 9 + 4;
    CHECK(out.coverage[p] == Catch::Approx(expect_cov).margin(1e-12));
    CHECK(out.image[p * 3 + 0] == Catch::Approx(expect_col).margin(1e-12));
}

TEST_CASE("rasterization is deterministic") {
    Rng rng(61);
    Camera cam(10.0, 12, 12);
    std::vector<real> d(144);
    for (auto& v : d) v = rng.uniform(0.9, 1.1);
    auto run = [&]() {
        Tensor pts = depth_to_points(Tensor::constant({12, 12}, d), cam);
        Mesh m = build_mesh(pts);
        std::vector<real> texd(144 * 3);
        Rng r2(5);
        for (auto& v : texd) v = r2.uniform(0, 1);
        RenderOutput out = rasterize(m, Tensor::constant({12, 12, 3}, texd), cam,
                                     Tensor::constant({3}, {0.5, 0.5, 0.5}));
        return out;
    };
    auto o1 = run();
    auto o2 = run();
    for (long long k = 0; k < o1.image.numel(); ++k) CHECK(o1.image[k] == o2.image[k]);
    for (size_t k = 0; k < o1.zbuffer.size(); ++k) CHECK(o1.zbuffer[k] == o2.zbuffer[k]);
}

TEST_CASE("neutral render reproduces the albedo at interior pixels") {
    Rng rng(67);
    Camera cam(10.0, 16, 16);
    // smooth depth and albedo
    std::vector<real> sd(256), ad(256 * 3);
    for (int i = 0; i < 16; ++i)
        for (int j = 0; j < 16; ++j) {
            real u = ndc_of(j, 16), v = ndc_of(i, 16);
            sd[static_cast<size_t>(i) * 16 + j] = 1.0 + 0.05 * std::sin(u * 2) * std::cos(v * 2);
            for (int c = 0; c < 3; ++c)
                ad[(static_cast<size_t>(i) * 16 + j) * 3 + c] =
                    0.5 + 0.4 * std::sin(u * (1 + c)) * std::cos(v * (2 - 0.5 * c));
        }
    Tensor albedo = Tensor::constant({16, 16, 3}, ad);
    Tensor depth = Tensor::constant({16, 16}, sd);
    Tensor tmap = Tensor::constant({16, 16}, border_mask(16, 16));
    RenderOutput out = render(albedo, depth, tmap, Viewpoint{}.to_tensor(),
                              neutral_light().to_tensor(), cam, Tensor::full({3}, 0.5));
    real mae = 0.0;
    int count = 0;
    for (int i = 2; i < 14; ++i)
        for (int j = 2; j < 14; ++j)
            for (int c = 0; c < 3; ++c) {
                mae += std::fabs(out.image[(static_cast<size_t>(i) * 16 + j) * 3 + c] -
                                 ad[(static_cast<size_t>(i) * 16 + j) * 3 + c]);
                ++count;
            }
    mae /= count;
    INFO("interior mae " << mae);
    CHECK(mae <= 1e-3);
}

TEST_CASE("neutral viewpoint makes the warp inert for any transform map") {
    Rng rng(71);
    Camera cam(10.0, 10, 10);
    std::vector<real> sd(100), ad(300), td(100);
    for (auto& v : sd) v = rng.uniform(0.92, 1.08);
    for (auto& v : ad) v = rng.uniform(0, 1);
    for (auto& v : td) v = rng.uniform(0, 1);
    Tensor albedo = Tensor::constant({10, 10, 3}, ad);
    Tensor depth = Tensor::constant({10, 10}, sd);
    Tensor light = LightParams{0.2, 0.1, 0.5, 0.4}.to_tensor();
    Tensor bg = Tensor::full({3}, 0.5);
    RenderOutput with_t = render(albedo, depth, Tensor::constant({10, 10}, td),
                                 Viewpoint{}.to_tensor(), light, cam, bg);
    RenderOutput zero_t =
        render(albedo, depth, Tensor::zeros({10, 10}), Viewpoint{}.to_tensor(), light, cam, bg);
    for (long long k = 0; k < with_t.image.numel(); ++k)
        CHECK(with_t.image[k] == Catch::Approx(zero_t.image[k]).margin(1e-12));
}

TEST_CASE("render gradients match finite differences away from occlusion boundaries") {
    Rng rng(73);
    Camera cam(10.0, 8, 8);
    // smooth random depth: coarse random grid upsampled bilinearly, so the
    // surface folds over in at most a few places
    auto sdat = std::make_shared<std::vector<real>>();
    {
        std::vector<real> coarse(9);
        for (auto& v : coarse) v = rng.uniform(0.94, 1.06);
        Tensor up = resize_bilinear(Tensor::constant({1, 3, 3}, coarse), 8, 8);
        *sdat = up.data();
    }
    auto adat = fdtest::random_data(rng, 192, 0.1, 0.9);
    auto tdat = fdtest::random_data(rng, 64, 0.1, 0.9);
    auto vdat = std::make_shared<std::vector<real>>(std::vector<real>{8.0, -20.0, 5.0, 0.02, -0.03, 0.04});
    auto ldat = std::make_shared<std::vector<real>>(std::vector<real>{0.3, -0.25, 0.45, 0.5});
    auto bdat = std::make_shared<std::vector<real>>(std::vector<real>{0.5, 0.45, 0.55});

    std::vector<real> target(192);
    for (auto& v : target) v = rng.uniform(0, 1);

    // forward once to fix the occlusion-exclusion mask
    std::vector<real> mask;
    {
        RenderOutput probe = render(Tensor::constant({8, 8, 3}, *adat), Tensor::constant({8, 8}, *sdat),
                                    Tensor::constant({8, 8}, *tdat), Tensor::constant({6}, *vdat),
                                    Tensor::constant({4}, *ldat), cam, Tensor::constant({3}, *bdat));
        mask = occlusion_free_mask(probe);
    }
    int kept = 0;
    for (real m : mask) kept += m > 0;
    INFO("mask keeps " << kept << " of " << mask.size());
    REQUIRE(kept > 30);

    std::vector<std::shared_ptr<std::vector<real>>> inputs{adat, sdat, tdat, vdat, ldat, bdat};
    auto rep = fdtest::check_graph(
        {{8, 8, 3}, {8, 8}, {8, 8}, {6}, {4}, {3}}, inputs,
        [&](Tape&, std::vector<Tensor>& xs) {
            RenderOutput out = render(xs[0], xs[1], xs[2], xs[3], xs[4], cam, xs[5]);
            Tensor diff = abs_op(sub(out.image, Tensor::constant({8, 8, 3}, target)));
            return mean_all(mul_constvec(diff, mask));
        },
        1e-2);
    INFO("worst rel " << rep.worst_rel << " input " << rep.worst_input << " coord "
                      << rep.worst_coord << " analytic " << rep.analytic << " fd " << rep.fd);
    CHECK(rep.pass);
}
