#include <catch2/catch_amalgamated.hpp>

#include "lifted3d/svd.hpp"

#include "fd_harness.hpp"
#include "oracles.hpp"

using namespace lifted3d;

TEST_CASE("nuclear norm of identity and zero matrices") {
    std::vector<real> eye(9, 0.0);
    eye[0] = eye[4] = eye[8] = 1.0;
    Tensor k = Tensor::constant({3, 3}, eye);
    auto nn = svd_nuclear(k);
    CHECK(nn.value.scalar_value() == Catch::Approx(3.0).margin(1e-12));
    for (int i = 0; i < 9; ++i)
        CHECK(nn.subgradient[static_cast<size_t>(i)] == Catch::Approx(eye[static_cast<size_t>(i)]).margin(1e-12));

    Tensor z = Tensor::zeros({3, 3});
    CHECK(svd_nuclear(z).value.scalar_value() == 0.0);
}

TEST_CASE("nuclear norm matches the independent Jacobi eigen oracle") {
    Rng rng(2026);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<real> k(36);
        for (auto& v : k) v = rng.uniform(-1.0, 1.0);
        auto sv = oracle::jacobi_singular_values(k, 6, 6);
        real expected = 0.0;
        for (real s : sv) expected += s;
        auto nn = svd_nuclear(Tensor::constant({6, 6}, k));
        INFO("trial " << trial);
        CHECK(std::fabs(nn.value.scalar_value() - expected) <= 1e-8);
    }
}

TEST_CASE("nuclear norm handles tall and wide matrices") {
    Rng rng(5);
    std::vector<real> k(4 * 9);
    for (auto& v : k) v = rng.uniform(-1.0, 1.0);
    auto wide = svd_nuclear(Tensor::constant({4, 9}, k));
    // transpose
    std::vector<real> kt(9 * 4);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 9; ++j) kt[static_cast<size_t>(j) * 4 + i] = k[static_cast<size_t>(i) * 9 + j];
    auto tall = svd_nuclear(Tensor::constant({9, 4}, kt));
    CHECK(wide.value.scalar_value() == Catch::Approx(tall.value.scalar_value()).margin(1e-10));

    auto sv = oracle::jacobi_singular_values(k, 4, 9);
    real expected = 0.0;
    for (real s : sv) expected += s;
    CHECK(std::fabs(wide.value.scalar_value() - expected) <= 1e-8);
}

TEST_CASE("svd factors reconstruct the matrix") {
    Rng rng(77);
    std::vector<real> k(5 * 7);
    for (auto& v : k) v = rng.uniform(-1.0, 1.0);
    auto f = svd_thin(k, 5, 7);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 7; ++j) {
            real s = 0.0;
            for (int t = 0; t < f.r; ++t)
                s += f.u[static_cast<size_t>(i) * f.r + t] * f.sigma[static_cast<size_t>(t)] *
                     f.v[static_cast<size_t>(j) * f.r + t];
            CHECK(s == Catch::Approx(k[static_cast<size_t>(i) * 7 + j]).margin(1e-9));
        }
}

TEST_CASE("subgradient matches finite differences at distinct spectra") {
    Rng rng(31);
    for (int trial = 0; trial < 3; ++trial) {
        auto data = fdtest::random_data(rng, 36, -1.0, 1.0);
        {
            // re-draw until the spectrum is clearly separated
            auto sv = oracle::jacobi_singular_values(*data, 6, 6);
            bool ok = true;
            for (size_t i = 1; i < sv.size(); ++i)
                if (sv[i - 1] - sv[i] < 0.05) ok = false;
            if (!ok || sv.back() < 0.05) {
                --trial;
                continue;
            }
        }
        std::vector<std::shared_ptr<std::vector<real>>> inputs{data};
        auto rep = fdtest::check_graph(
            {{6, 6}}, inputs,
            [](Tape&, std::vector<Tensor>& xs) { return svd_nuclear(xs[0]).value; }, 1e-4);
        INFO("worst rel " << rep.worst_rel << " analytic " << rep.analytic << " fd " << rep.fd);
        CHECK(rep.pass);
    }
}

TEST_CASE("svd rejects non-finite input") {
    std::vector<real> k(4, 0.0);
    k[1] = std::numeric_limits<real>::quiet_NaN();
    CHECK_THROWS_AS(svd_thin(k, 2, 2), contract_error);
}
