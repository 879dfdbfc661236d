#pragma once
// Measure of the vorticity parameters removed by the small-divisor conditions, evaluated on a
// synthetic perturbed-frequency model with the same size constraints as the true
// (unknown) final frequencies.

#include <map>

#include "vortexkam/transversality.hpp"

namespace vortexkam {

// ---------------------------------------------------------------------------
// Parameters

struct DivisorParams {
    double upsilon = 0.01;
    double tau = 9.0;
    double upsilon0 = 0.1;  // secondary pair used for the same-sign second-order family
    double tau0 = 2.0;

    void validate() const {
        require(upsilon > 0.0 && upsilon < 1.0, "divisors.upsilon must lie in (0,1)");
        require(upsilon0 >= upsilon && upsilon0 < 1.0, "divisors.upsilon0 must lie in [upsilon, 1)");
        require(tau0 >= 1.0 && tau >= tau0, "divisors: need tau >= tau0 >= 1");
    }

    /// Smallest admissible integer-plus-one exponent for the given non-degeneracy index.
    static double default_tau(int m0, std::size_t nu) {
        const double n = static_cast<double>(nu);
        return m0 * (2.0 * m0 * n + n + 2.0) + 1.0;
    }

    /// tau from default_tau, tau0 = m0 nu and upsilon0 = upsilon^(1/(4 m0)).
    static DivisorParams with_defaults(double upsilon, int m0, std::size_t nu) {
        require(m0 >= 1, "divisors: non-degeneracy index must be at least 1");
        DivisorParams d;
        d.upsilon = upsilon;
        d.tau = default_tau(m0, nu);
        d.tau0 = static_cast<double>(m0) * static_cast<double>(nu);
        d.upsilon0 = std::pow(upsilon, 1.0 / (4.0 * m0));
        d.validate();
        return d;
    }
};

/// Synthetic final frequencies. Every correction is eps times a unit coefficient times a
/// smooth profile in gamma:
///   tangential_a = Omega_{jvec_a} + eps a_a sin(kappa gamma + a)
///   mu_j = m1 j + m_half Omega_j - m0 sgn(j) + r_j
///   m1 = eps c1 cos(kappa gamma), m_half = 1 + eps c_half sin(kappa gamma),
///   m0 = eps c0 cos(kappa gamma), r_j = eps c_r |j|^{-1/2} cos(kappa gamma).
struct PerturbedFrequencies {
    TangentialSites sites;
    DispersionParams disp;
    double eps = 0.0;
    RealVec tangential_shift;  // a_a, one per site
    double transport = 0.0;         // c1
    double dispersion_scale = 0.0;  // c_half
    double sign_shift = 0.0;        // c0
    double correction = 0.0;        // c_r
    double kappa = 1.0;

    static PerturbedFrequencies unperturbed(const TangentialSites& s, const DispersionParams& p) {
        PerturbedFrequencies f;
        f.sites = s;
        f.disp = p;
        f.tangential_shift.assign(s.nu(), 0.0);
        return f;
    }

    /// All unit coefficients equal to one.
    static PerturbedFrequencies standard(const TangentialSites& s, const DispersionParams& p, double eps) {
        auto f = unperturbed(s, p);
        f.eps = eps;
        f.tangential_shift.assign(s.nu(), 1.0);
        f.transport = f.dispersion_scale = f.sign_shift = f.correction = 1.0;
        return f;
    }

    /// Unit coefficients drawn uniformly from [-1, 1].
    static PerturbedFrequencies random(const TangentialSites& s, const DispersionParams& p, double eps, CounterRng& rng) {
        auto f = unperturbed(s, p);
        f.eps = eps;
        for (auto& a : f.tangential_shift) a = rng.next_uniform(-1.0, 1.0);
        f.transport = rng.next_uniform(-1.0, 1.0);
        f.dispersion_scale = rng.next_uniform(-1.0, 1.0);
        f.sign_shift = rng.next_uniform(-1.0, 1.0);
        f.correction = rng.next_uniform(-1.0, 1.0);
        f.kappa = rng.next_uniform(0.5, 2.0);
        return f;
    }

    void validate() const {
        disp.validate();
        require(eps >= 0.0, "frequencies.eps must be nonnegative");
        require(tangential_shift.size() == sites.nu(), "frequencies.tangential_shift must have one entry per site");
    }

    double tangential(std::size_t a, double gamma) const {
        return Omega_j(sites.jvec()[a], disp, gamma) + eps * tangential_shift[a] * std::sin(kappa * gamma + static_cast<double>(a));
    }
    RealVec tangential(double gamma) const {
        RealVec w(sites.nu());
        for (std::size_t a = 0; a < w.size(); ++a) w[a] = tangential(a, gamma);
        return w;
    }
    double m1(double gamma) const { return eps * transport * std::cos(kappa * gamma); }
    double m_half(double gamma) const { return 1.0 + eps * dispersion_scale * std::sin(kappa * gamma); }
    double m0(double gamma) const { return eps * sign_shift * std::cos(kappa * gamma); }
    double r(int j, double gamma) const { return eps * correction * std::cos(kappa * gamma) / std::sqrt(std::abs(double(j))); }
    double mu(int j, double gamma) const {
        return m1(gamma) * j + m_half(gamma) * Omega_j(j, disp, gamma) - m0(gamma) * sgn(j) + r(j, gamma);
    }
};

// ---------------------------------------------------------------------------
// Families of nearly-resonant sets

enum class Family { tangential, transport, first, second_minus_opposite, second_minus_same, second_plus };

inline constexpr std::array<Family, 6> kAllFamilies{Family::tangential, Family::transport, Family::first,
                                                    Family::second_minus_opposite, Family::second_minus_same,
                                                    Family::second_plus};

inline std::string to_string(Family f) {
    switch (f) {
        case Family::tangential: return "tangential";
        case Family::transport: return "transport";
        case Family::first: return "first";
        case Family::second_minus_opposite: return "second-minus-opposite";
        case Family::second_minus_same: return "second-minus-same";
        case Family::second_plus: return "second-plus";
    }
    return "?";
}

/// Which family a tuple belongs to; zero-kind tuples feed two families, so they need `transport`.
inline Family family_of(const MomentumTuple& t, bool transport = false) {
    switch (t.kind) {
        case TupleKind::zero: return transport ? Family::transport : Family::tangential;
        case TupleKind::first: return Family::first;
        case TupleKind::second_minus:
            return (static_cast<long long>(t.j) * t.jprime < 0) ? Family::second_minus_opposite : Family::second_minus_same;
        case TupleKind::second_plus: return Family::second_plus;
    }
    return Family::tangential;
}

inline void require_family_matches(const MomentumTuple& t, Family f) {
    const bool ok = (t.kind == TupleKind::zero) ? (f == Family::tangential || f == Family::transport) : family_of(t) == f;
    require(ok, "measure: tuple kind does not match the requested family");
}

/// Threshold divided by upsilon: 8<l>^-tau, 4|j|^1/2<l>^-tau, 4<l>^-tau or 4(|j|^1/2+|j'|^1/2)<l>^-tau.
inline double threshold_coefficient(const MomentumTuple& t, Family f, double tau) {
    const double decay = std::pow(bracket(t.ell), -tau);
    switch (f) {
        case Family::tangential:
        case Family::transport: return 8.0 * decay;
        case Family::first: return 4.0 * std::sqrt(std::abs(double(t.j))) * decay;
        case Family::second_minus_opposite:
        case Family::second_minus_same: return 4.0 * decay;
        case Family::second_plus:
            return 4.0 * (std::sqrt(std::abs(double(t.j))) + std::sqrt(std::abs(double(t.jprime)))) * decay;
    }
    return 0.0;
}

inline double threshold(const MomentumTuple& t, Family f, const DivisorParams& d) {
    return d.upsilon * threshold_coefficient(t, f, d.tau);
}

/// Expected size of a resonant set, (threshold / (c <l>))^(1/m0) without the numeric factor c.
inline double russmann_shape(const MomentumTuple& t, Family f, const DivisorParams& d, int m0) {
    const double c = (f == Family::tangential || f == Family::transport) ? 8.0 : 4.0;
    return std::pow(threshold(t, f, d) / (c * bracket(t.ell)), 1.0 / m0);
}

/// Divisor value; the arithmetic is split so that tabulated and direct evaluation agree bitwise.
inline double combine_divisor(double lattice_part, double mu_j, double mu_jp, Family f) {
    switch (f) {
        case Family::tangential:
        case Family::transport: return lattice_part;
        case Family::first: return lattice_part + mu_j;
        case Family::second_minus_opposite:
        case Family::second_minus_same: return lattice_part + mu_j - mu_jp;
        case Family::second_plus: return lattice_part + mu_j + mu_jp;
    }
    return 0.0;
}

inline double divisor(const MomentumTuple& t, Family f, const PerturbedFrequencies& fr, double gamma) {
    RealVec w = fr.tangential(gamma);
    if (f == Family::transport) {
        const double m1 = fr.m1(gamma);
        for (std::size_t a = 0; a < w.size(); ++a) w[a] -= m1 * fr.sites.jvec()[a];
    }
    const double lat = dot(w, t.ell);
    const double mj = t.kind == TupleKind::zero ? 0.0 : fr.mu(t.j, gamma);
    const double mjp = (t.kind == TupleKind::second_minus || t.kind == TupleKind::second_plus) ? fr.mu(t.jprime, gamma) : 0.0;
    return combine_divisor(lat, mj, mjp, f);
}

// ---------------------------------------------------------------------------
// Sublevel sets {|f| < delta}

struct Interval {
    double lo = 0.0, hi = 0.0;
    double length() const { return hi - lo; }
};

struct SublevelResult {
    double measure = 0.0;
    std::vector<Interval> intervals;  // disjoint, sorted
    bool grid_insufficient = false;   // samples alternate direction at grid scale
};

/// Sorts and merges overlapping intervals; returns the measure of the union.
inline double merge_intervals(std::vector<Interval>& iv) {
    std::sort(iv.begin(), iv.end(), [](const Interval& a, const Interval& b) { return a.lo < b.lo || (a.lo == b.lo && a.hi < b.hi); });
    std::vector<Interval> out;
    for (const auto& x : iv) {
        if (x.hi <= x.lo) continue;
        if (!out.empty() && x.lo <= out.back().hi) out.back().hi = std::max(out.back().hi, x.hi);
        else out.push_back(x);
    }
    iv = std::move(out);
    double m = 0.0;
    for (const auto& x : iv) m += x.length();
    return m;
}

namespace detail {

inline constexpr double kEndpointTol = 1e-10;

/// Root of g on [a, b] given g(a) and g(b) of opposite sign (or one of them zero).
template <class G>
double bisect(G&& g, double a, double b, double ga) {
    while (b - a > kEndpointTol) {
        const double m = 0.5 * (a + b);
        const double gm = g(m);
        if ((gm < 0.0) == (ga < 0.0)) {
            a = m;
            ga = gm;
        } else {
            b = m;
        }
    }
    return 0.5 * (a + b);
}

/// Minimizer of a unimodal h on [a, b].
template <class H>
std::pair<double, double> golden_min(H&& h, double a, double b) {
    const double r = 0.5 * (std::sqrt(5.0) - 1.0);
    double c = b - r * (b - a), d = a + r * (b - a);
    double hc = h(c), hd = h(d);
    while (b - a > 1e-12 * std::max(1.0, std::abs(a))) {
        if (hc < hd) {
            b = d;
            d = c;
            hd = hc;
            c = b - r * (b - a);
            hc = h(c);
        } else {
            a = c;
            c = d;
            hc = hd;
            d = a + r * (b - a);
            hd = h(d);
        }
    }
    return hc < hd ? std::pair{c, hc} : std::pair{d, hd};
}

inline bool zigzag(const RealVec& v) {
    for (std::size_t k = 0; k + 3 < v.size(); ++k) {
        const double d0 = v[k + 1] - v[k], d1 = v[k + 2] - v[k + 1], d2 = v[k + 3] - v[k + 2];
        if (d0 * d1 < 0.0 && d1 * d2 < 0.0) return true;
    }
    return false;
}

/// Cheap per-sample summary used to skip tuples whose samples stay far above delta.
struct SampleStats {
    double min_abs = std::numeric_limits<double>::infinity();
    double max_step = 0.0;
    bool sign_change = false;
};

inline SampleStats sample_stats(const RealVec& v) {
    SampleStats s;
    for (std::size_t k = 0; k < v.size(); ++k) {
        s.min_abs = std::min(s.min_abs, std::abs(v[k]));
        if (k > 0) {
            s.max_step = std::max(s.max_step, std::abs(v[k] - v[k - 1]));
            if ((v[k] < 0.0) != (v[k - 1] < 0.0)) s.sign_change = true;
        }
    }
    return s;
}

/// Sublevel set from samples v at nodes x, refining every boundary on the exact function.
/// Out-of-set local minima of |f| close to delta are refined by a golden-section search so
/// that dips between nodes are not lost.
template <class F>
SublevelResult sublevel_sampled(F&& f, const RealVec& x, const RealVec& v, double delta, const SampleStats& st) {
    SublevelResult res;
    if (!st.sign_change && st.min_abs >= delta + st.max_step) return res;
    const std::size_t n = x.size();
    auto gap = [&](double t) { return std::abs(f(t)) - delta; };
    auto in = [&](std::size_t k) { return std::abs(v[k]) < delta; };
    std::vector<Interval> raw;
    for (std::size_t k = 0; k + 1 < n; ++k) {
        const double a = x[k], b = x[k + 1];
        const bool ia = in(k), ib = in(k + 1);
        if (ia && ib) {
            raw.push_back({a, b});
        } else if (ia) {
            raw.push_back({a, bisect(gap, a, b, std::abs(v[k]) - delta)});
        } else if (ib) {
            raw.push_back({bisect(gap, a, b, std::abs(v[k]) - delta), b});
        } else if ((v[k] < 0.0) != (v[k + 1] < 0.0)) {
            const double root = bisect(f, a, b, v[k]);
            const double lo = bisect(gap, a, root, std::abs(v[k]) - delta);
            const double hi = bisect(gap, root, b, -1.0);
            raw.push_back({lo, hi});
        }
    }
    // Dips: sample k is out of the set and a local minimum of |f| among same-sign neighbours.
    for (std::size_t k = 0; k < n; ++k) {
        if (in(k)) continue;
        const std::size_t lo = k == 0 ? 0 : k - 1, hi = std::min(n - 1, k + 1);
        if (in(lo) || in(hi)) continue;
        if ((v[lo] < 0.0) != (v[k] < 0.0) || (v[hi] < 0.0) != (v[k] < 0.0)) continue;
        const double here = std::abs(v[k]);
        if (here > std::abs(v[lo]) || here > std::abs(v[hi])) continue;
        const double rise = std::max(std::abs(v[lo]), std::abs(v[hi])) - here;
        if (here >= delta + rise) continue;
        auto [xm, fm] = golden_min([&](double t) { return std::abs(f(t)); }, x[lo], x[hi]);
        if (fm >= delta) continue;
        raw.push_back({bisect(gap, x[lo], xm, std::abs(v[lo]) - delta), bisect(gap, xm, x[hi], fm - delta)});
    }
    res.measure = merge_intervals(raw);
    res.intervals = std::move(raw);
    res.grid_insufficient = zigzag(v);
    return res;
}

inline RealVec grid_nodes(double a, double b, int grid) {
    require(grid >= 2, "measure: grid needs at least two nodes");
    require(b > a, "measure: empty parameter interval");
    RealVec x(grid);
    for (int k = 0; k < grid; ++k) x[k] = (k + 1 == grid) ? b : a + (b - a) * k / (grid - 1);
    return x;
}

}  // namespace detail

/// Measure of {gamma in [a, b] : |f(gamma)| < delta}, with intervals and the grid flag.
inline SublevelResult sublevel_set(const std::function<double(double)>& f, double a, double b, double delta, int grid = 4096) {
    require(delta > 0.0, "sublevel_measure: delta must be positive");
    const RealVec x = detail::grid_nodes(a, b, grid);
    RealVec v(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) v[k] = f(x[k]);
    return detail::sublevel_sampled(f, x, v, delta, detail::sample_stats(v));
}

inline double sublevel_measure(const std::function<double(double)>& f, double a, double b, double delta, int grid = 4096) {
    return sublevel_set(f, a, b, delta, grid).measure;
}

inline SublevelResult resonant_set_measure(const MomentumTuple& t, const PerturbedFrequencies& fr, const DivisorParams& d,
                                           Family f, int grid = 4096) {
    require_family_matches(t, f);
    require(satisfies_constraint(t, fr.sites), "resonant_set_measure: tuple violates its momentum constraint");
    d.validate();
    return sublevel_set([&](double g) { return divisor(t, f, fr, g); }, fr.disp.gamma_lo, fr.disp.gamma_hi,
                        threshold(t, f, d), grid);
}

// ---------------------------------------------------------------------------
// Emptiness of the second-plus sets

/// Constant C such that the second-plus set is provably empty once |j|^1/2 + |j'|^1/2 > C <l>.
/// Built from sup bounds of the model on the parameter interval and valid for any threshold
/// with this or a smaller upsilon.
inline double emptiness_constant(const PerturbedFrequencies& fr, double upsilon) {
    const auto& p = fr.disp;
    const double gmax = std::max(std::abs(p.gamma_lo), std::abs(p.gamma_hi));
    const double e = fr.eps;
    const double half_min = 1.0 - e * std::abs(fr.dispersion_scale);
    const double t1 = symbol_ratio(1, p.depth);  // smallest value of G_j/|j|
    double omega_l1 = 0.0;
    for (std::size_t a = 0; a < fr.sites.nu(); ++a) {
        const int j = fr.sites.jvec()[a];
        const double G = symbol_G0(j, p.depth);
        const double b = 0.5 * gmax * G / std::abs(j);
        omega_l1 += std::sqrt(p.g * G + b * b) + b + e * std::abs(fr.tangential_shift[a]);
    }
    double jl1 = 0.0;
    for (int j : fr.sites.jvec()) jl1 += std::abs(j);
    const double A = half_min * gmax + 2.0 * e * std::abs(fr.sign_shift) + 2.0 * e * std::abs(fr.correction);
    const double B = e * std::abs(fr.transport) * jl1 + omega_l1;
    const double den = half_min * std::sqrt(p.g * t1) - 4.0 * upsilon;
    require(den > 0.0, "emptiness_constant: upsilon too large for the growth bound");
    return (A + B) / den;
}

/// True when the second-plus set of (l, j, j') is provably empty and can be skipped.
inline bool emptiness_filter(const MomentumTuple& t, const PerturbedFrequencies& fr, double upsilon) {
    require(t.kind == TupleKind::second_plus, "emptiness_filter: only second-plus tuples are filtered");
    const double S = std::sqrt(std::abs(double(t.j))) + std::sqrt(std::abs(double(t.jprime)));
    return S > emptiness_constant(fr, upsilon) * bracket(t.ell);
}

// ---------------------------------------------------------------------------
// Same-sign second-order sets contained in the transport sets

/// Union of the transport sets R^T(upsilon0, tau0) over 0 < |l| <= ell_max, as merged intervals.
struct TransportExclusion {
    std::vector<Interval> covered;
    double length = 0.0;
    double measure = 0.0;

    TransportExclusion(const PerturbedFrequencies& fr, const DivisorParams& d, int ell_max, int grid) {
        DivisorParams d0 = d;
        d0.upsilon = d.upsilon0;
        d0.tau = d.tau0;
        for (const auto& t : enumerate_tuples(fr.sites, ell_max, 1, TupleKind::zero)) {
            auto r = sublevel_set([&](double g) { return divisor(t, Family::transport, fr, g); }, fr.disp.gamma_lo,
                                  fr.disp.gamma_hi, threshold(t, Family::transport, d0), grid);
            covered.insert(covered.end(), r.intervals.begin(), r.intervals.end());
        }
        measure = merge_intervals(covered);
        length = fr.disp.gamma_hi - fr.disp.gamma_lo;
    }
    double excluded_fraction() const { return length > 0.0 ? measure / length : 0.0; }

    /// Parts of the given disjoint sorted intervals not covered by the union.
    std::vector<Interval> uncovered(const std::vector<Interval>& sets) const {
        std::vector<Interval> out;
        for (Interval piece : sets) {
            for (const auto& c : covered) {
                if (c.hi <= piece.lo) continue;
                if (c.lo >= piece.hi) break;
                if (c.lo > piece.lo) out.push_back({piece.lo, c.lo});
                piece.lo = std::max(piece.lo, c.hi);
                if (piece.lo >= piece.hi) break;
            }
            if (piece.hi > piece.lo) out.push_back(piece);
        }
        return out;
    }
};

enum class InclusionStatus { holds, violated, not_applicable };

inline std::string to_string(InclusionStatus s) {
    switch (s) {
        case InclusionStatus::holds: return "holds";
        case InclusionStatus::violated: return "violated";
        case InclusionStatus::not_applicable: return "not-applicable";
    }
    return "?";
}

struct InclusionResult {
    InclusionStatus status = InclusionStatus::not_applicable;
    double j_threshold = 0.0;  // C1 upsilon0^-2 <l>^(2(tau0+1))
    RealVec violating_gamma;
};

inline double inclusion_j_threshold(const MomentumTuple& t, const DivisorParams& d, double C1) {
    return C1 * std::pow(d.upsilon0, -2.0) * std::pow(bracket(t.ell), 2.0 * (d.tau0 + 1.0));
}

/// Checks that the same-sign second-order set of a tuple with large |j|, |j'| lies inside the
/// union of transport sets. Both sides are exact interval unions from refined sublevel sets.
inline InclusionResult inclusion_check(const MomentumTuple& t, const PerturbedFrequencies& fr, const DivisorParams& d,
                                       double C1, const TransportExclusion& mask, int grid = 4096) {
    require(t.kind == TupleKind::second_minus, "inclusion_check: second-minus tuple required");
    require(static_cast<long long>(t.j) * t.jprime > 0, "inclusion_check: j and j' must have the same sign");
    require(satisfies_constraint(t, fr.sites), "inclusion_check: tuple violates its momentum constraint");
    InclusionResult r;
    r.j_threshold = inclusion_j_threshold(t, d, C1);
    if (std::min(std::abs(t.j), std::abs(t.jprime)) < r.j_threshold) return r;
    const auto set = resonant_set_measure(t, fr, d, Family::second_minus_same, grid);
    for (const auto& piece : mask.uncovered(set.intervals)) r.violating_gamma.push_back(0.5 * (piece.lo + piece.hi));
    r.status = r.violating_gamma.empty() ? InclusionStatus::holds : InclusionStatus::violated;
    return r;
}

/// Smallest C1 on the ladder 2^k, k = -20..20, for which every probe tuple sitting just above
/// the index threshold passes. Probes: each l with |l| <= ell_max and nonzero momentum, with
/// both signs of j. Larger C1 moves the probes to larger |j| where the divisor is closer to
/// its transport part, so passing is treated as monotone in k and the rung is found by
/// bisection. Returns infinity if even the top rung fails.
inline double fit_inclusion_constant(const PerturbedFrequencies& fr, const DivisorParams& d, int ell_max,
                                     const TransportExclusion& mask, int grid = 4096) {
    std::vector<IntVec> ells;
    for (const auto& ell : lattice_box(fr.sites.nu(), ell_max))
        if (fr.sites.momentum(ell) != 0) ells.push_back(ell);
    auto passes = [&](int k) {
        const double C1 = std::ldexp(1.0, k);
        for (const auto& ell : ells) {
            const long long m = fr.sites.momentum(ell);
            MomentumTuple probe{ell, 0, 0, TupleKind::second_minus};
            const double thr = inclusion_j_threshold(probe, d, C1);
            if (thr > 1e9) continue;  // beyond int indices
            for (int sign : {1, -1}) {
                const long long j = sign * (static_cast<long long>(std::ceil(thr)) + std::llabs(m) + 1);
                probe.j = static_cast<int>(j);
                probe.jprime = static_cast<int>(j + m);
                if (!satisfies_constraint(probe, fr.sites)) continue;
                if (inclusion_check(probe, fr, d, C1, mask, grid).status == InclusionStatus::violated) return false;
            }
        }
        return true;
    };
    int lo = -20, hi = 20;
    if (passes(lo)) return std::ldexp(1.0, lo);
    if (!passes(hi)) return std::numeric_limits<double>::infinity();
    while (hi - lo > 1) {
        const int mid = (lo + hi) / 2;
        (passes(mid) ? hi : lo) = mid;
    }
    return std::ldexp(1.0, hi);
}

// ---------------------------------------------------------------------------
// Cantor complement over a finite truncation

struct MeasureCutoffs {
    int ell_max = 4;
    int j_max = 24;
    int grid = 4096;
    void validate() const {
        require(ell_max >= 1 && j_max >= 1, "measure cutoffs must be positive");
        require(grid >= 16, "measure.grid must be at least 16");
    }
};

struct FamilySummary {
    Family family = Family::tangential;
    std::size_t tuples = 0;
    std::size_t nonempty = 0;
    std::size_t filtered = 0;  // second-plus tuples skipped as provably empty
    double sum = 0.0;          // sum of the per-tuple measures
    double union_measure = 0.0;
    double fitted_constant = 0.0;  // max over tuples of measure / russmann_shape
    double tail_bound = 0.0;       // analytic bound on the sets outside the truncation
};

struct TupleMeasure {
    MomentumTuple tuple;
    Family family;
    double measure;
};

struct InclusionSummary {
    double C1 = 0.0;
    std::size_t above_threshold = 0;  // same-sign tuples covered by the inclusion
    std::size_t violations = 0;
    double transport_union = 0.0;  // measure of the union of R^T(upsilon0, tau0) on the truncation
    double excluded_fraction = 0.0;  // grid share covered by that union; near 1 makes the check vacuous
};

struct ComplementReport {
    DivisorParams divisors;
    int m0 = 1;
    double union_measure = 0.0;  // measure of the union of all sets in the truncation
    double sum_measure = 0.0;    // sum over families and tuples
    double tail_bound = 0.0;
    double inclusion_bound = 0.0;  // transport union + measured small-index same-sign part
    std::size_t grid_insufficient = 0;
    std::vector<FamilySummary> families;
    InclusionSummary inclusion;
    std::vector<TupleMeasure> nonzero;
};

namespace detail {

/// Sum over n > L of (#{|l|_inf = n} in dimension nu) * A * n^e, for e < -nu.
inline double shell_tail(std::size_t nu, int L, double A, double e) {
    if (A == 0.0) return 0.0;
    const double d = static_cast<double>(nu);
    if (e >= -d) return std::numeric_limits<double>::infinity();
    const int N = L + 20000;
    double s = 0.0;
    for (int n = L + 1; n <= N; ++n) s += (std::pow(2.0 * n + 1, d) - std::pow(2.0 * n - 1, d)) * std::pow(double(n), e);
    s += 2.0 * d * std::pow(2.0, d - 1.0) * std::pow(double(N), e + d) / (-e - d);
    return A * s;
}

/// Tabulated model quantities on the parameter grid.
struct ModelTable {
    RealVec gamma;
    std::vector<RealVec> tangential;  // [node][a]
    std::vector<RealVec> transport;   // [node][a], tangential minus m1 jvec
    std::vector<RealVec> mu;          // [j + j_max][node]
    int j_max = 0;

    ModelTable(const PerturbedFrequencies& fr, int jmax, int grid) : j_max(jmax) {
        gamma = grid_nodes(fr.disp.gamma_lo, fr.disp.gamma_hi, grid);
        tangential.resize(gamma.size());
        transport.resize(gamma.size());
        for (std::size_t k = 0; k < gamma.size(); ++k) {
            tangential[k] = fr.tangential(gamma[k]);
            transport[k] = tangential[k];
            const double m1 = fr.m1(gamma[k]);
            for (std::size_t a = 0; a < transport[k].size(); ++a) transport[k][a] -= m1 * fr.sites.jvec()[a];
        }
        mu.assign(2 * jmax + 1, RealVec());
        for (int j = -jmax; j <= jmax; ++j) {
            if (!fr.sites.is_normal(j)) continue;
            RealVec& row = mu[j + jmax];
            row.resize(gamma.size());
            for (std::size_t k = 0; k < gamma.size(); ++k) row[k] = fr.mu(j, gamma[k]);
        }
    }

    RealVec samples(const MomentumTuple& t, Family f) const {
        RealVec v(gamma.size());
        const auto& lat = (f == Family::transport) ? transport : tangential;
        const RealVec* mj = t.kind == TupleKind::zero ? nullptr : &mu[t.j + j_max];
        const RealVec* mjp = (t.kind == TupleKind::second_minus || t.kind == TupleKind::second_plus) ? &mu[t.jprime + j_max] : nullptr;
        for (std::size_t k = 0; k < v.size(); ++k)
            v[k] = combine_divisor(dot(lat[k], t.ell), mj ? (*mj)[k] : 0.0, mjp ? (*mjp)[k] : 0.0, f);
        return v;
    }
};

struct FamilyTuple {
    MomentumTuple tuple;
    Family family;
};

inline std::vector<FamilyTuple> complement_tuples(const TangentialSites& s, const MeasureCutoffs& c) {
    std::vector<FamilyTuple> out;
    for (const auto& t : enumerate_tuples(s, c.ell_max, c.j_max, TupleKind::zero)) {
        out.push_back({t, Family::tangential});
        out.push_back({t, Family::transport});
    }
    for (auto kind : {TupleKind::first, TupleKind::second_minus, TupleKind::second_plus})
        for (const auto& t : enumerate_tuples(s, c.ell_max, c.j_max, kind))
            if (!(kind == TupleKind::second_minus && t.j == t.jprime)) out.push_back({t, family_of(t)});
    return out;
}

inline std::size_t family_slot(Family f) {
    return static_cast<std::size_t>(std::find(kAllFamilies.begin(), kAllFamilies.end(), f) - kAllFamilies.begin());
}

}  // namespace detail

/// Complement measures for several upsilon values sharing tau; the divisor samples are
/// computed once per tuple. `base` supplies tau, tau0; upsilon0 follows upsilon^(1/(4 m0)).
/// C1 <= 0 requests a fitted inclusion constant.
inline std::vector<ComplementReport> complement_scan(const PerturbedFrequencies& fr, const DivisorParams& base,
                                                     const RealVec& upsilons, const MeasureCutoffs& cut, int m0,
                                                     double C1 = 0.0) {
    fr.validate();
    cut.validate();
    require(!upsilons.empty(), "complement_scan: no upsilon values");
    require(m0 >= 1, "complement_scan: m0 must be at least 1");
    const std::size_t U = upsilons.size();
    std::vector<DivisorParams> dps(U);
    double upsilon_max = 0.0;
    for (std::size_t u = 0; u < U; ++u) {
        dps[u] = base;
        dps[u].upsilon = upsilons[u];
        dps[u].upsilon0 = std::pow(upsilons[u], 1.0 / (4.0 * m0));
        dps[u].validate();
        upsilon_max = std::max(upsilon_max, upsilons[u]);
    }
    const auto tuples = detail::complement_tuples(fr.sites, cut);
    const detail::ModelTable table(fr, cut.j_max, cut.grid);
    const double q_constant = emptiness_constant(fr, upsilon_max);

    struct PerTuple {
        bool filtered = false;
        bool insufficient = false;
        std::vector<SublevelResult> res;
    };
    std::vector<PerTuple> out(tuples.size());
    parallel_for(tuples.size(), [&](std::size_t i) {
        const auto& [t, fam] = tuples[i];
        PerTuple& pt = out[i];
        if (fam == Family::second_plus &&
            std::sqrt(std::abs(double(t.j))) + std::sqrt(std::abs(double(t.jprime))) > q_constant * bracket(t.ell)) {
            pt.filtered = true;
            return;
        }
        const RealVec v = table.samples(t, fam);
        const auto st = detail::sample_stats(v);
        auto f = [&](double g) { return divisor(t, fam, fr, g); };
        const double coeff = threshold_coefficient(t, fam, base.tau);
        pt.res.resize(U);
        for (std::size_t u = 0; u < U; ++u) {
            pt.res[u] = detail::sublevel_sampled(f, table.gamma, v, upsilons[u] * coeff, st);
            pt.insufficient = pt.insufficient || pt.res[u].grid_insufficient;
        }
    });

    std::vector<ComplementReport> reports(U);
    for (std::size_t u = 0; u < U; ++u) {
        ComplementReport& rep = reports[u];
        rep.divisors = dps[u];
        rep.m0 = m0;
        rep.families.resize(kAllFamilies.size());
        for (std::size_t s = 0; s < kAllFamilies.size(); ++s) rep.families[s].family = kAllFamilies[s];
        std::vector<Interval> all;
        std::vector<std::vector<Interval>> per_family(kAllFamilies.size());
        for (std::size_t i = 0; i < tuples.size(); ++i) {
            const auto& [t, fam] = tuples[i];
            FamilySummary& fs = rep.families[detail::family_slot(fam)];
            ++fs.tuples;
            if (out[i].filtered) {
                ++fs.filtered;
                continue;
            }
            if (out[i].insufficient && u == 0) ++rep.grid_insufficient;
            const SublevelResult& r = out[i].res[u];
            if (r.measure <= 0.0) continue;
            ++fs.nonempty;
            fs.sum += r.measure;
            fs.fitted_constant = std::max(fs.fitted_constant, r.measure / russmann_shape(t, fam, dps[u], m0));
            auto& pf = per_family[detail::family_slot(fam)];
            pf.insert(pf.end(), r.intervals.begin(), r.intervals.end());
            rep.nonzero.push_back({t, fam, r.measure});
        }
        for (std::size_t s = 0; s < kAllFamilies.size(); ++s) {
            all.insert(all.end(), per_family[s].begin(), per_family[s].end());
            rep.families[s].union_measure = merge_intervals(per_family[s]);
            rep.sum_measure += rep.families[s].sum;
        }
        rep.union_measure = merge_intervals(all);
    }

    // Tail bounds with a single constant (the largest fitted one at the smallest upsilon),
    // and the inclusion route for the same-sign family.
    const std::size_t nu = fr.sites.nu();
    double jl1 = 0.0;
    for (int j : fr.sites.jvec()) jl1 += std::abs(j);
    const std::size_t u_small = static_cast<std::size_t>(std::min_element(upsilons.begin(), upsilons.end()) - upsilons.begin());
    double C = 0.0;
    for (const auto& fs : reports[u_small].families) C = std::max(C, fs.fitted_constant);
    const int L = cut.ell_max;
    for (std::size_t u = 0; u < U; ++u) {
        ComplementReport& rep = reports[u];
        const DivisorParams& d = rep.divisors;
        const double M = static_cast<double>(m0);
        const double um = std::pow(d.upsilon, 1.0 / M);
        const double p = (d.tau + 1.0) / M;
        for (auto& fs : rep.families) {
            switch (fs.family) {
                case Family::tangential:
                case Family::transport: fs.tail_bound = detail::shell_tail(nu, L, C * um, -p); break;
                case Family::first: fs.tail_bound = detail::shell_tail(nu, L, C * um * std::pow(jl1, 0.5 / M), 0.5 / M - p); break;
                case Family::second_minus_opposite:
                    fs.tail_bound = detail::shell_tail(nu, L, C * um * (jl1 + 1.0), 1.0 - p);
                    break;
                case Family::second_plus: {
                    // Nonempty sets need |j| <= q^2 <l>^2, about (2 q^2 + 1) n^2 indices per l.
                    const double q2 = q_constant * q_constant;
                    double inside = 0.0;  // truncated l but |j| beyond j_max
                    for (int n = 1; n <= L; ++n) {
                        const double extra = std::max(0.0, 2.0 * (q2 * n * n - cut.j_max));
                        const double shell = std::pow(2.0 * n + 1, double(nu)) - std::pow(2.0 * n - 1, double(nu));
                        inside += shell * extra * C * um * std::pow(2.0 * q_constant * n, 1.0 / M) * std::pow(double(n), -p);
                    }
                    fs.tail_bound = inside + detail::shell_tail(nu, L, C * um * (2.0 * q2 + 1.0) * std::pow(2.0 * q_constant, 1.0 / M), 2.0 + 1.0 / M - p);
                    break;
                }
                case Family::second_minus_same: {
                    // Index sets of size upsilon0^-3 <l>^(2(tau0+1)) per l.
                    const double A = C * um * 2.0 * std::pow(d.upsilon0, -3.0);
                    fs.tail_bound = detail::shell_tail(nu, L, A, 2.0 * (d.tau0 + 1.0) - p);
                    break;
                }
            }
            rep.tail_bound += fs.tail_bound;
        }

        // Inclusion route: same-sign tuples above the index threshold are covered by R^T(upsilon0, tau0).
        const TransportExclusion mask(fr, d, L, cut.grid);
        InclusionSummary& inc = rep.inclusion;
        inc.C1 = C1 > 0.0 ? C1 : fit_inclusion_constant(fr, d, L, mask, cut.grid);
        inc.excluded_fraction = mask.excluded_fraction();
        inc.transport_union = mask.measure;
        double below = 0.0;
        for (std::size_t i = 0; i < tuples.size(); ++i) {
            const auto& [t, fam] = tuples[i];
            if (fam != Family::second_minus_same) continue;
            if (std::isfinite(inc.C1) && std::min(std::abs(t.j), std::abs(t.jprime)) >= inclusion_j_threshold(t, d, inc.C1)) {
                ++inc.above_threshold;
                // Same sets inclusion_check would compute, already available from the scan.
                if (!out[i].res.empty() && !mask.uncovered(out[i].res[u].intervals).empty()) ++inc.violations;
            } else {
                below += out[i].res.empty() ? 0.0 : out[i].res[u].measure;
            }
        }
        rep.inclusion_bound = inc.transport_union + below;
    }
    return reports;
}

inline ComplementReport cantor_complement_measure(const PerturbedFrequencies& fr, const DivisorParams& d,
                                                  const MeasureCutoffs& cut, int m0, double C1 = 0.0) {
    return complement_scan(fr, d, {d.upsilon}, cut, m0, C1).front();
}

/// Largest upsilon for which every set of the truncation is empty: the minimum over tuples of
/// min |divisor| / (threshold / upsilon). Zero when some divisor vanishes on the interval.
inline double empty_below_upsilon(const PerturbedFrequencies& fr, double tau, const MeasureCutoffs& cut) {
    const auto tuples = detail::complement_tuples(fr.sites, cut);
    const detail::ModelTable table(fr, cut.j_max, cut.grid);
    RealVec best(tuples.size(), 0.0);
    parallel_for(tuples.size(), [&](std::size_t i) {
        const auto& [t, fam] = tuples[i];
        const RealVec v = table.samples(t, fam);
        const auto st = detail::sample_stats(v);
        if (st.sign_change) return;
        double m = st.min_abs;
        for (std::size_t k = 0; k < v.size(); ++k) {
            const std::size_t lo = k == 0 ? 0 : k - 1, hi = std::min(v.size() - 1, k + 1);
            if (std::abs(v[k]) > std::abs(v[lo]) || std::abs(v[k]) > std::abs(v[hi])) continue;
            auto [x, fm] = detail::golden_min([&](double g) { return std::abs(divisor(t, fam, fr, g)); }, table.gamma[lo], table.gamma[hi]);
            (void)x;
            m = std::min(m, fm);
        }
        best[i] = m / threshold_coefficient(t, fam, tau);
    });
    double u = std::numeric_limits<double>::infinity();
    for (double b : best) u = std::min(u, b);
    return u;
}

// ---------------------------------------------------------------------------
// Power-law fits

struct PowerFit {
    double exponent = 0.0;  // fixed exponent used for the constant
    double constant = 0.0;  // C with log m ~ log C + exponent log upsilon (least squares)
    double max_residual = 0.0;
    double rms_residual = 0.0;
    double free_slope = 0.0;  // unconstrained least-squares slope
};

/// Fits m ~ C upsilon^exponent in log-log coordinates; all measures must be positive.
inline PowerFit fit_power_law(const RealVec& upsilon, const RealVec& measure, double exponent) {
    require(upsilon.size() == measure.size() && upsilon.size() >= 2, "fit_power_law: need two or more points");
    PowerFit fit;
    fit.exponent = exponent;
    const std::size_t n = upsilon.size();
    RealVec x(n), y(n);
    for (std::size_t k = 0; k < n; ++k) {
        require(upsilon[k] > 0.0 && measure[k] > 0.0, "fit_power_law: values must be positive");
        x[k] = std::log(upsilon[k]);
        y[k] = std::log(measure[k]);
    }
    double logC = 0.0;
    for (std::size_t k = 0; k < n; ++k) logC += y[k] - exponent * x[k];
    logC /= static_cast<double>(n);
    fit.constant = std::exp(logC);
    double ss = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const double r = y[k] - logC - exponent * x[k];
        fit.max_residual = std::max(fit.max_residual, std::abs(r));
        ss += r * r;
    }
    fit.rms_residual = std::sqrt(ss / static_cast<double>(n));
    double mx = 0.0, my = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        mx += x[k];
        my += y[k];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        sxy += (x[k] - mx) * (y[k] - my);
        sxx += (x[k] - mx) * (x[k] - mx);
    }
    fit.free_slope = sxy / sxx;
    return fit;
}

}  // namespace vortexkam
