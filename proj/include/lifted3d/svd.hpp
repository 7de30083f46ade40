#pragma once

#include <algorithm>
#include <vector>

#include "lifted3d/tensor.hpp"

namespace lifted3d {

// Thin SVD of a small dense matrix K (rows x cols): K = U diag(sigma) V^T
// with r = min(rows, cols). One-sided Jacobi: the columns of the taller of
// K / K^T are orthogonalized by plane rotations, which implicitly
// diagonalizes the corresponding Gram matrix. Cap 100 sweeps, relative
// off-diagonal threshold 1e-12.
struct SvdThin {
    int rows = 0, cols = 0, r = 0;
    std::vector<real> u;      // rows x r
    std::vector<real> sigma;  // r
    std::vector<real> v;      // cols x r
};

namespace detail_svd {

// One-sided Jacobi on A (m x n, m >= n, column-major storage for locality):
// returns A's column-orthogonalized form in place, rotation product in J
// (n x n, column-major), so original A = Q * diag(norms) * J^T with Q the
// normalized columns.
inline int jacobi_orthogonalize(std::vector<real>& a, int m, int n, std::vector<real>& j) {
    j.assign(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) j[static_cast<size_t>(i) * n + i] = 1.0;
    const real tol = 1e-12;
    const int max_sweeps = 100;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        real worst = 0.0;
        for (int p = 0; p < n - 1; ++p)
            for (int q = p + 1; q < n; ++q) {
                real* cp = a.data() + static_cast<size_t>(p) * m;
                real* cq = a.data() + static_cast<size_t>(q) * m;
                real app = 0.0, aqq = 0.0, apq = 0.0;
                for (int i = 0; i < m; ++i) {
                    app += cp[i] * cp[i];
                    aqq += cq[i] * cq[i];
                    apq += cp[i] * cq[i];
                }
                real denom = std::sqrt(app * aqq);
                real rel = denom > 0.0 ? std::fabs(apq) / denom : 0.0;
                worst = std::max(worst, rel);
                if (rel <= tol) continue;
                real theta = 0.5 * std::atan2(2.0 * apq, app - aqq);
                real c = std::cos(theta), s = std::sin(theta);
                for (int i = 0; i < m; ++i) {
                    real x = cp[i], y = cq[i];
                    cp[i] = c * x + s * y;
                    cq[i] = -s * x + c * y;
                }
                real* jp = j.data() + static_cast<size_t>(p) * n;
                real* jq = j.data() + static_cast<size_t>(q) * n;
                for (int i = 0; i < n; ++i) {
                    real x = jp[i], y = jq[i];
                    jp[i] = c * x + s * y;
                    jq[i] = -s * x + c * y;
                }
            }
        if (worst <= tol) return sweep + 1;
    }
    throw numeric_error("svd: one-sided Jacobi did not converge within 100 sweeps");
}

}  // namespace detail_svd

inline SvdThin svd_thin(const std::vector<real>& k, int rows, int cols) {
    require(static_cast<long long>(k.size()) == static_cast<long long>(rows) * cols,
            "svd_thin: data size mismatch");
    for (real v : k)
        require(std::isfinite(v), "svd_thin: non-finite input");
    SvdThin out;
    out.rows = rows;
    out.cols = cols;
    out.r = std::min(rows, cols);
    int r = out.r;

    // Work on the taller orientation so the rotated side is the small one.
    bool transposed = rows > cols;  // work matrix = K itself if rows > cols, else K^T
    int m = transposed ? rows : cols;
    int n = transposed ? cols : rows;
    // column-major work matrix a: m x n
    std::vector<real> a(static_cast<size_t>(m) * n);
    for (int i = 0; i < rows; ++i)
        for (int jx = 0; jx < cols; ++jx) {
            real v = k[static_cast<size_t>(i) * cols + jx];
            if (transposed)
                a[static_cast<size_t>(jx) * m + i] = v;  // column jx holds K(:,jx)
            else
                a[static_cast<size_t>(i) * m + jx] = v;  // column i holds K(i,:)^T
        }
    std::vector<real> j;
    detail_svd::jacobi_orthogonalize(a, m, n, j);

    // Column norms are the singular values.
    std::vector<real> sig(static_cast<size_t>(n));
    for (int c = 0; c < n; ++c) {
        real s = 0.0;
        const real* col = a.data() + static_cast<size_t>(c) * m;
        for (int i = 0; i < m; ++i) s += col[i] * col[i];
        sig[static_cast<size_t>(c)] = std::sqrt(s);
    }
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](int x, int y) { return sig[static_cast<size_t>(x)] > sig[static_cast<size_t>(y)]; });

    out.sigma.resize(static_cast<size_t>(r));
    out.u.assign(static_cast<size_t>(rows) * r, 0.0);
    out.v.assign(static_cast<size_t>(cols) * r, 0.0);
    for (int t = 0; t < r; ++t) {
        int c = order[static_cast<size_t>(t)];
        real s = sig[static_cast<size_t>(c)];
        out.sigma[static_cast<size_t>(t)] = s;
        real inv = s > 0.0 ? 1.0 / s : 0.0;  // zero singular value -> zero vectors
        const real* col = a.data() + static_cast<size_t>(c) * m;   // normalized -> tall-side basis
        const real* jc = j.data() + static_cast<size_t>(c) * n;    // rotation column -> short-side basis
        if (transposed) {
            // K = A = Q S J^T: U = Q (rows x r), V = J (cols x r)
            for (int i = 0; i < rows; ++i) out.u[static_cast<size_t>(i) * r + t] = col[i] * inv;
            for (int i = 0; i < cols; ++i) out.v[static_cast<size_t>(i) * r + t] = jc[i];
        } else {
            // K^T = A = Q S J^T -> K = J S Q^T: U = J (rows x r), V = Q (cols x r)
            for (int i = 0; i < rows; ++i) out.u[static_cast<size_t>(i) * r + t] = jc[i];
            for (int i = 0; i < cols; ++i) out.v[static_cast<size_t>(i) * r + t] = col[i] * inv;
        }
    }
    return out;
}

// Nuclear norm of a [B, N] tensor as a tape scalar. The backward pass uses
// the U V^T subgradient from the thin SVD (valid subgradient everywhere,
// gradient when the spectrum is distinct and nonzero).
struct NuclearNorm {
    Tensor value;                  // scalar, on the caller's tape when K is
    std::vector<real> subgradient; // B x N
};

inline NuclearNorm svd_nuclear(const Tensor& k) {
    require(k.rank() == 2, "svd_nuclear expects a matrix, got " + shape_str(k.shape()));
    int rows = k.dim(0), cols = k.dim(1);
    SvdThin f = svd_thin(k.data(), rows, cols);
    real total = 0.0;
    for (real s : f.sigma) total += s;
    std::vector<real> sub(static_cast<size_t>(rows) * cols, 0.0);
    for (int i = 0; i < rows; ++i)
        for (int jx = 0; jx < cols; ++jx) {
            real s = 0.0;
            for (int t = 0; t < f.r; ++t)
                s += f.u[static_cast<size_t>(i) * f.r + t] * f.v[static_cast<size_t>(jx) * f.r + t];
            sub[static_cast<size_t>(i) * cols + jx] = s;
        }
    NuclearNorm out;
    out.subgradient = sub;
    Tape* tp = detail::tape_of({&k});
    if (!tp) {
        out.value = Tensor::scalar(total);
        return out;
    }
    int pk = k.node();
    auto sub_sh = std::make_shared<std::vector<real>>(std::move(sub));
    out.value = tp->record(
        {}, {total}, {pk},
        [pk, sub_sh](Tape& t, int self) {
            real g = t.grad_of(self)[0];
            auto& gk = t.grad_buf(pk);
            const auto& s = *sub_sh;
            for (size_t i = 0; i < s.size(); ++i) gk[i] += g * s[i];
        },
        "nuclear_norm");
    out.subgradient = *sub_sh;
    return out;
}

}  // namespace lifted3d
