#pragma once

// Test-side oracles, kept independent of the library's implementation paths:
// central finite differences, a classical two-sided Jacobi eigensolver for
// SVD cross-checks, and small helpers shared across suites.

#include <cmath>
#include <functional>
#include <vector>

#include "lifted3d/core.hpp"

namespace oracle {

using lifted3d::real;

// Central finite difference of f with respect to x[i].
inline real fd_partial(std::vector<real>& x, size_t i, const std::function<real()>& f,
                       real h = 1e-4) {
    real saved = x[i];
    x[i] = saved + h;
    real fp = f();
    x[i] = saved - h;
    real fm = f();
    x[i] = saved;
    return (fp - fm) / (2.0 * h);
}

struct GradCheckResult {
    real worst_rel = 0.0;
    size_t worst_index = 0;
    real analytic_at_worst = 0.0, fd_at_worst = 0.0;
    bool pass = true;
};

// |a - b| <= atol + rtol * max(|a|, |b|), reported as a scaled "relative"
// discrepancy so thresholds read like the tolerances they enforce.
inline real rel_gap(real a, real b, real atol, real rtol) {
    real gap = std::fabs(a - b);
    real scale = std::max(std::fabs(a), std::fabs(b));
    return gap / (atol / rtol + scale);
}

// Compares an analytic gradient vector against central differences of f.
// `indices` empty means every coordinate.
inline GradCheckResult check_gradient(std::vector<real>& x, const std::vector<real>& analytic,
                                      const std::function<real()>& f, real rtol,
                                      std::vector<size_t> indices = {}, real h = 1e-4,
                                      real atol_scale = 1e-7) {
    GradCheckResult r;
    if (indices.empty()) {
        indices.resize(x.size());
        for (size_t i = 0; i < x.size(); ++i) indices[i] = i;
    }
    for (size_t i : indices) {
        real fd = fd_partial(x, i, f, h);
        real rel = rel_gap(analytic[i], fd, atol_scale, rtol);
        if (rel > r.worst_rel) {
            r.worst_rel = rel;
            r.worst_index = i;
            r.analytic_at_worst = analytic[i];
            r.fd_at_worst = fd;
        }
    }
    r.pass = r.worst_rel <= rtol;
    return r;
}

// Independent SVD route: classical two-sided Jacobi eigendecomposition of the
// Gram matrix K^T K (or K K^T, whichever is smaller), singular values are the
// square roots of its eigenvalues.
inline std::vector<real> jacobi_singular_values(const std::vector<real>& k, int rows, int cols) {
    int n = std::min(rows, cols);
    std::vector<real> gram(static_cast<size_t>(n) * n, 0.0);
    bool use_kkt = rows <= cols;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            real s = 0.0;
            if (use_kkt) {
                for (int t = 0; t < cols; ++t)
                    s += k[static_cast<size_t>(i) * cols + t] * k[static_cast<size_t>(j) * cols + t];
            } else {
                for (int t = 0; t < rows; ++t)
                    s += k[static_cast<size_t>(t) * cols + i] * k[static_cast<size_t>(t) * cols + j];
            }
            gram[static_cast<size_t>(i) * n + j] = s;
        }
    // two-sided Jacobi eigen iterations on the symmetric Gram matrix
    for (int sweep = 0; sweep < 200; ++sweep) {
        real off = 0.0;
        for (int p = 0; p < n - 1; ++p)
            for (int q = p + 1; q < n; ++q) off += std::fabs(gram[static_cast<size_t>(p) * n + q]);
        if (off < 1e-15) break;
        for (int p = 0; p < n - 1; ++p)
            for (int q = p + 1; q < n; ++q) {
                real apq = gram[static_cast<size_t>(p) * n + q];
                if (std::fabs(apq) < 1e-18) continue;
                real app = gram[static_cast<size_t>(p) * n + p];
                real aqq = gram[static_cast<size_t>(q) * n + q];
                real theta = 0.5 * std::atan2(2.0 * apq, app - aqq);
                real c = std::cos(theta), s = std::sin(theta);
                for (int i = 0; i < n; ++i) {
                    real x = gram[static_cast<size_t>(p) * n + i];
                    real y = gram[static_cast<size_t>(q) * n + i];
                    gram[static_cast<size_t>(p) * n + i] = c * x + s * y;
                    gram[static_cast<size_t>(q) * n + i] = -s * x + c * y;
                }
                for (int i = 0; i < n; ++i) {
                    real x = gram[static_cast<size_t>(i) * n + p];
                    real y = gram[static_cast<size_t>(i) * n + q];
                    gram[static_cast<size_t>(i) * n + p] = c * x + s * y;
                    gram[static_cast<size_t>(i) * n + q] = -s * x + c * y;
                }
            }
    }
    std::vector<real> sv(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) sv[static_cast<size_t>(i)] = std::sqrt(std::max<real>(0.0, gram[static_cast<size_t>(i) * n + i]));
    std::sort(sv.begin(), sv.end(), std::greater<real>());
    return sv;
}

}  // namespace oracle
