#pragma once

// Finite-difference harness for tape graphs: rebuilds the graph through a
// caller-supplied builder so the same code path produces both the analytic
// gradient and the values differentiated numerically.

#include <functional>
#include <memory>
#include <vector>

#include "lifted3d/tensor.hpp"
#include "oracles.hpp"

namespace fdtest {

using lifted3d::Rng;
using lifted3d::Tape;
using lifted3d::Tensor;
using lifted3d::real;

using Builder = std::function<Tensor(Tape&, std::vector<Tensor>&)>;

struct FdReport {
    bool pass = true;
    real worst_rel = 0.0;
    int worst_input = -1;
    size_t worst_coord = 0;
    real analytic = 0.0, fd = 0.0;
};

inline FdReport check_graph(const std::vector<std::vector<int>>& shapes,
                            std::vector<std::shared_ptr<std::vector<real>>>& inputs,
                            const Builder& build, real rtol, real h = 1e-4,
                            int max_coords_per_input = 0) {
    auto eval = [&]() -> real {
        Tape t;
        std::vector<Tensor> xs;
        for (size_t i = 0; i < inputs.size(); ++i) xs.push_back(t.leaf(shapes[i], inputs[i]));
        return build(t, xs).scalar_value();
    };

    Tape t;
    std::vector<Tensor> xs;
    for (size_t i = 0; i < inputs.size(); ++i) xs.push_back(t.leaf(shapes[i], inputs[i]));
    Tensor loss = build(t, xs);
    t.backward(loss);

    FdReport rep;
    for (size_t i = 0; i < inputs.size(); ++i) {
        std::vector<real> g = t.grad(xs[i]);
        std::vector<size_t> idx;
        size_t n = inputs[i]->size();
        if (max_coords_per_input > 0 && n > static_cast<size_t>(max_coords_per_input)) {
            size_t stride = n / static_cast<size_t>(max_coords_per_input);
            for (size_t k = 0; k < n; k += stride) idx.push_back(k);
        }
        auto res = oracle::check_gradient(*inputs[i], g, eval, rtol, idx, h);
        if (res.worst_rel > rep.worst_rel) {
            rep.worst_rel = res.worst_rel;
            rep.worst_input = static_cast<int>(i);
            rep.worst_coord = res.worst_index;
            rep.analytic = res.analytic_at_worst;
            rep.fd = res.fd_at_worst;
        }
        rep.pass = rep.pass && res.pass;
    }
    return rep;
}

inline std::shared_ptr<std::vector<real>> random_data(Rng& rng, long long n, real lo, real hi) {
    auto v = std::make_shared<std::vector<real>>(static_cast<size_t>(n));
    for (auto& x : *v) x = rng.uniform(lo, hi);
    return v;
}

// Uniform values bounded away from zero (for kinked ops).
inline std::shared_ptr<std::vector<real>> random_data_nonzero(Rng& rng, long long n, real lo, real hi,
                                                              real gap = 0.05) {
    auto v = std::make_shared<std::vector<real>>(static_cast<size_t>(n));
    for (auto& x : *v) {
        do {
            x = rng.uniform(lo, hi);
        } while (std::fabs(x) < gap);
    }
    return v;
}

// Scalar-projection head so every output coordinate feeds the loss.
inline Tensor project_to_scalar(const Tensor& y, Rng& rng) {
    std::vector<real> proj(static_cast<size_t>(y.numel()));
    for (auto& p : proj) p = rng.uniform(0.5, 1.5);
    return lifted3d::sum_all(lifted3d::mul_constvec(y, proj));
}

}  // namespace fdtest
