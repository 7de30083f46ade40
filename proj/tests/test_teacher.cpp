#include <catch2/catch_amalgamated.hpp>

#include <type_traits>

#include "lifted3d/teacher.hpp"

#include "fd_harness.hpp"

using namespace lifted3d;

namespace {

template <class T, class = void>
struct exposes_scene : std::false_type {};
template <class T>
struct exposes_scene<T, std::void_t<decltype(std::declval<const T&>().scene(std::declval<Tensor>()))>>
    : std::true_type {};

// Horizontal centroid of the bright head region against the darker
// background; tracks the face (outline and features) as pose shifts it.
real feature_centroid_x(const Teacher& t, const Tensor& w) {
    Tensor img = t.generate(w);
    int h = t.config().h, wd = t.config().w;
    auto gray = [&](int p) { return (img[3 * p] + img[3 * p + 1] + img[3 * p + 2]) / 3.0; };
    real bg = gray(0);  // corner pixel is always background
    real num = 0.0, den = 0.0;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < wd; ++j) {
            real d = gray(i * wd + j) - bg - 0.03;
            if (d <= 0) continue;
            real wgt = d * d;
            num += wgt * ndc_of(j, wd);
            den += wgt;
        }
    return num / den;
}

}  // namespace

TEST_CASE("teacher generation is deterministic and in range") {
    Teacher t;
    Rng rng(101);
    Tensor w = t.sample_latent(rng);
    Tensor a = t.generate(w);
    Tensor b = t.generate(w);
    REQUIRE(a.numel() == 32 * 32 * 3);
    for (long long k = 0; k < a.numel(); ++k) {
        CHECK(a[k] == b[k]);
        CHECK(std::isfinite(a[k]));
        CHECK(a[k] > -0.1);
        CHECK(a[k] < 1.5);
    }
}

TEST_CASE("latent sampling is seeded and has the right dimension") {
    Teacher t;
    Rng r1(7), r2(7);
    Tensor w1 = t.sample_latent(r1);
    Tensor w2 = t.sample_latent(r2);
    CHECK(w1.numel() == t.config().dw);
    for (long long k = 0; k < w1.numel(); ++k) CHECK(w1[k] == w2[k]);
}

TEST_CASE("empirical latent prior is close to the true standard normal") {
    Teacher t;
    for (real m : t.latent_mean()) CHECK(std::fabs(m) <= 0.05);
    CHECK(t.latent_std() == Catch::Approx(1.0).margin(0.05));
}

TEST_CASE("zero latent is the canonical frontal scene") {
    Teacher t;
    Tensor w0 = Tensor::zeros({t.config().dw});
    TeacherScene s = t.scene(w0);
    CHECK(s.yaw_deg == 0.0);
    CHECK(s.pitch_deg == 0.0);
    CHECK(s.light_x == 0.0);
    // depth range inside the shape decoder's output interval
    for (real d : s.depth) {
        CHECK(d > 0.9);
        CHECK(d < 1.1);
    }
}

TEST_CASE("increasing the yaw coordinate moves the feature centroid monotonically") {
    Teacher t;
    Rng rng(5150);
    Tensor base = t.sample_latent(rng);
    std::vector<real> cx;
    for (real y : {-1.6, -0.8, 0.0, 0.8, 1.6}) {
        std::vector<real> wd = base.data();
        wd[0] = y;
        wd[1] = 0.0;
        cx.push_back(feature_centroid_x(t, Tensor::constant({t.config().dw}, wd)));
    }
    INFO("centroids " << cx[0] << " " << cx[1] << " " << cx[2] << " " << cx[3] << " " << cx[4]);
    for (size_t i = 1; i < cx.size(); ++i) CHECK(cx[i] < cx[i - 1]);  // yaw>0 shifts left
}

TEST_CASE("oracle_manipulate is a fixed point on frontal latents and preserves identity") {
    Teacher t;
    Rng rng(11);
    Tensor w = t.sample_latent(rng);
    std::vector<real> frontal = w.data();
    frontal[0] = frontal[1] = frontal[2] = 0.0;
    Tensor wf = Tensor::constant({t.config().dw}, frontal);
    Tensor same = t.oracle_manipulate(wf, Viewpoint{}, neutral_light());
    for (long long k = 0; k < wf.numel(); ++k) CHECK(same[k] == wf[k]);

    Viewpoint v{7.0, -33.0, 0.0, 0, 0, 0};
    LightParams l{0.4, 0.0, 0.6, 0.4};
    Tensor moved = t.oracle_manipulate(w, v, l);
    for (int k = 3; k < t.config().dw; ++k) CHECK(moved[k] == w[k]);
    TeacherScene s = t.scene(moved);
    CHECK(s.yaw_deg == Catch::Approx(-33.0).margin(1e-12));
    CHECK(s.pitch_deg == Catch::Approx(7.0).margin(1e-12));
    CHECK(s.light_x == Catch::Approx(0.4).margin(1e-12));
}

TEST_CASE("teacher image is smooth in the latent (finite-difference check)") {
    Teacher t;
    Rng rng(13);
    auto wdat = std::make_shared<std::vector<real>>(t.sample_latent(rng).data());
    std::vector<std::shared_ptr<std::vector<real>>> inputs{wdat};
    auto rep = fdtest::check_graph(
        {{t.config().dw}}, inputs,
        [&](Tape&, std::vector<Tensor>& xs) {
            Rng prj(3);
            return fdtest::project_to_scalar(t.generate(xs[0]), prj);
        },
        1e-5, 1e-4, 16);
    INFO("worst rel " << rep.worst_rel << " coord " << rep.worst_coord << " analytic "
                      << rep.analytic << " fd " << rep.fd);
    CHECK(rep.pass);
}

TEST_CASE("trainer-facing handle carries no scene access") {
    static_assert(exposes_scene<Teacher>::value, "Teacher must expose scene() to evaluation");
    static_assert(!exposes_scene<TeacherHandle>::value,
                  "TeacherHandle must not expose ground-truth scenes");
    Teacher t;
    TeacherHandle h{&t};
    std::uint64_t d0 = h.param_digest();
    Rng rng(3);
    h.generate(h.sample_latent(rng));
    CHECK(h.param_digest() == d0);
    CHECK(h.latent_dim() == t.config().dw);
}
