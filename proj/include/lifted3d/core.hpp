#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace lifted3d {

// 64-bit scalars everywhere: the gradient checks require them and the
// desk-scale problem sizes don't justify a float build.
using real = double;

constexpr real kPi = 3.14159265358979323846;

inline real deg2rad(real d) { return d * (kPi / 180.0); }

// Precondition breakage (bad shapes, bad arguments).
struct contract_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Numerical failure (iteration caps, non-finite values).
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw contract_error(msg);
}

// Deterministic RNG. All randomness in the project flows through this so a
// seed fully pins a run; distributions are hand-rolled because the standard
// ones are implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1)
    real uniform01() {
        return static_cast<real>(eng_() >> 11) * 0x1.0p-53;
    }

    real uniform(real lo, real hi) { return lo + (hi - lo) * uniform01(); }

    // standard normal via Box-Muller (one value per call, cached pair)
    real normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        real u1 = uniform01(), u2 = uniform01();
        while (u1 <= 1e-300) u1 = uniform01();
        real r = std::sqrt(-2.0 * std::log(u1));
        real a = 2.0 * kPi * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    int uniform_int(int n) {  // in [0, n)
        return static_cast<int>(eng_() % static_cast<std::uint64_t>(n));
    }

    std::vector<int> permutation(int n) {
        std::vector<int> p(n);
        for (int i = 0; i < n; ++i) p[i] = i;
        for (int i = n - 1; i > 0; --i) std::swap(p[i], p[uniform_int(i + 1)]);
        return p;
    }

    // independent stream for a named sub-task
    Rng fork(std::uint64_t tag) {
        return Rng(eng_() ^ (tag * 0x9E3779B97F4A7C15ull + 0x2545F4914F6CDD1Dull));
    }

private:
    std::mt19937_64 eng_;
    real spare_ = 0.0;
    bool have_spare_ = false;
};

// Worker cap from LIFTED3D_THREADS; defaults to hardware concurrency.
inline int worker_count() {
    static const int n = [] {
        int hw = static_cast<int>(std::thread::hardware_concurrency());
        if (hw < 1) hw = 1;
        if (const char* e = std::getenv("LIFTED3D_THREADS")) {
            int v = std::atoi(e);
            if (v >= 1 && v < hw) hw = v;
        }
        return hw;
    }();
    return n;
}

// Chunked parallel loop over [0, n). Work items must write to disjoint
// locations; the split is by contiguous ranges so results never depend on
// scheduling.
template <class F>
void parallel_for(int n, F&& body) {
    int workers = worker_count();
    if (workers <= 1 || n < 2 * workers) {
        body(0, n);
        return;
    }
    std::vector<std::thread> pool;
    int chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        int lo = w * chunk, hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    for (auto& t : pool) t.join();
}

// FNV-1a, used for config hashes and frozen-parameter digests.
inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

}  // namespace lifted3d
