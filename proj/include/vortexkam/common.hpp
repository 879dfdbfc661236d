#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <exception>
#include <thread>
#include <vector>

namespace vortexkam {

using cplx = std::complex<double>;
using IntVec = std::vector<int>;
using RealVec = std::vector<double>;

inline constexpr double kPi = std::numbers::pi;
inline constexpr cplx kI{0.0, 1.0};

/// Raised for violated preconditions and malformed inputs.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when an iteration fails to contract.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ValidationError(what);
}

// ---------------------------------------------------------------------------
// Physical parameters

struct Depth {
    std::optional<double> h;  // empty means infinite depth

    static Depth infinite() { return {}; }
    static Depth finite(double value) {
        require(value > 0.0, "depth: h must be positive");
        return Depth{value};
    }
    bool is_infinite() const { return !h.has_value(); }
};

struct DispersionParams {
    double g = 1.0;
    Depth depth{};
    double gamma_lo = 0.0;
    double gamma_hi = 0.0;

    void validate() const {
        require(g > 0.0, "dispersion.g must be positive");
        require(gamma_lo <= gamma_hi, "dispersion.gamma_interval: gamma_lo must not exceed gamma_hi");
        if (depth.h) require(*depth.h > 0.0, "dispersion.depth must be positive");
    }
};

/// Tangential sites: positive moduli n_a with signs sigma_a; momentum vector jvec_a = sigma_a n_a.
class TangentialSites {
public:
    TangentialSites() = default;
    TangentialSites(IntVec nbar, IntVec sigma) : nbar_(std::move(nbar)), sigma_(std::move(sigma)) {
        require(!nbar_.empty(), "sites: at least one site required");
        require(nbar_.size() == sigma_.size(), "sites: nbar and sigma lengths differ");
        for (std::size_t a = 0; a < nbar_.size(); ++a) {
            require(nbar_[a] >= 1, "sites: moduli must be positive");
            require(sigma_[a] == 1 || sigma_[a] == -1, "sites: signs must be +1 or -1");
            if (a > 0) require(nbar_[a] > nbar_[a - 1], "sites: moduli must be distinct and strictly increasing");
        }
        jvec_.resize(nbar_.size());
        for (std::size_t a = 0; a < nbar_.size(); ++a) jvec_[a] = sigma_[a] * nbar_[a];
    }

    std::size_t nu() const { return nbar_.size(); }
    const IntVec& nbar() const { return nbar_; }
    const IntVec& sigma() const { return sigma_; }
    const IntVec& jvec() const { return jvec_; }

    /// True when j belongs to the tangential set {sigma_a n_a}.
    bool is_tangential(int j) const {
        return std::find(jvec_.begin(), jvec_.end(), j) != jvec_.end();
    }
    /// True when j lies in the normal index set: nonzero and not tangential.
    bool is_normal(int j) const { return j != 0 && !is_tangential(j); }

    long long momentum(const IntVec& ell) const {
        long long s = 0;
        for (std::size_t a = 0; a < ell.size(); ++a) s += static_cast<long long>(jvec_[a]) * ell[a];
        return s;
    }

private:
    IntVec nbar_, sigma_, jvec_;
};

// ---------------------------------------------------------------------------
// Lattice helpers. |l| is the max norm throughout.

inline int linf(const IntVec& ell) {
    int m = 0;
    for (int v : ell) m = std::max(m, std::abs(v));
    return m;
}
inline double bracket(const IntVec& ell) { return std::max(1.0, static_cast<double>(linf(ell))); }

inline double dot(const RealVec& w, const IntVec& ell) {
    double s = 0.0;
    for (std::size_t a = 0; a < ell.size(); ++a) s += w[a] * ell[a];
    return s;
}

inline int sgn(int j) { return (j > 0) - (j < 0); }

/// All integer vectors of length nu with max norm <= bound, in lexicographic order.
inline std::vector<IntVec> lattice_box(std::size_t nu, int bound) {
    std::vector<IntVec> out;
    IntVec cur(nu, -bound);
    if (nu == 0) return {IntVec{}};
    while (true) {
        out.push_back(cur);
        std::size_t a = nu;
        while (a > 0) {
            --a;
            if (cur[a] < bound) {
                ++cur[a];
                for (std::size_t b = a + 1; b < nu; ++b) cur[b] = -bound;
                break;
            }
            if (a == 0) return out;
        }
    }
}

/// Dense index of ell inside the box |ell|_inf <= bound (row-major, first component slowest).
inline std::size_t box_index(const IntVec& ell, int bound) {
    std::size_t idx = 0;
    const std::size_t side = 2 * static_cast<std::size_t>(bound) + 1;
    for (int v : ell) idx = idx * side + static_cast<std::size_t>(v + bound);
    return idx;
}

inline IntVec negate(IntVec ell) {
    for (int& v : ell) v = -v;
    return ell;
}

// ---------------------------------------------------------------------------
// Counter-based random numbers: value k of stream s is a pure function of (seed, s, k).

class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

    std::uint64_t bits(std::uint64_t counter) const {
        std::uint64_t z = mix(seed_ ^ mix(stream_ + 0x9E3779B97F4A7C15ULL)) + counter * 0x9E3779B97F4A7C15ULL;
        return mix(z);
    }
    double uniform(std::uint64_t counter) const {  // in [0,1)
        return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
    }
    double uniform(std::uint64_t counter, double lo, double hi) const { return lo + (hi - lo) * uniform(counter); }

    std::uint64_t next_bits() { return bits(counter_++); }
    double next_uniform() { return uniform(counter_++); }
    double next_uniform(double lo, double hi) { return uniform(counter_++, lo, hi); }
    double next_normal() {
        const double u1 = std::max(next_uniform(), 1e-300);
        const double u2 = next_uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }
    std::uint64_t seed_, stream_;
    std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Thread budget and a static-partition parallel loop. Each index writes only its own
// output slot, so results never depend on scheduling.

inline unsigned& thread_budget_storage() {
    static unsigned n = [] {
        if (const char* env = std::getenv("VORTEXKAM_THREADS")) {
            const int v = std::atoi(env);
            if (v > 0) return static_cast<unsigned>(v);
        }
        return std::max(1u, std::thread::hardware_concurrency());
    }();
    return n;
}
inline unsigned thread_budget() { return thread_budget_storage(); }
inline void set_thread_budget(unsigned n) { thread_budget_storage() = std::max(1u, n); }

template <class Body>
void parallel_for(std::size_t count, Body&& body) {
    const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(thread_budget(), count));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < count; i += workers) body(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    // Rethrow the first failure by worker index so the reported error is deterministic.
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace vortexkam
