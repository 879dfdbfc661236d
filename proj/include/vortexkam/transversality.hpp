#pragma once
// Non-degeneracy and transversality of the linear frequency curves gamma -> Omega_j(gamma),
// checked on finite index cutoffs with momentum-constrained enumeration.

#include <Eigen/Dense>

#include "vortexkam/dispersion.hpp"

namespace vortexkam {

enum class TupleKind { zero, first, second_minus, second_plus };

inline std::string to_string(TupleKind k) {
    switch (k) {
        case TupleKind::zero: return "zero";
        case TupleKind::first: return "first";
        case TupleKind::second_minus: return "second-minus";
        case TupleKind::second_plus: return "second-plus";
    }
    return "?";
}

inline TupleKind tuple_kind_from_string(const std::string& s) {
    if (s == "zero") return TupleKind::zero;
    if (s == "first") return TupleKind::first;
    if (s == "second-minus") return TupleKind::second_minus;
    if (s == "second-plus") return TupleKind::second_plus;
    throw ValidationError("unknown tuple kind '" + s + "'");
}

struct MomentumTuple {
    IntVec ell;
    int j = 0;       // unused for kind zero
    int jprime = 0;  // used by the second-order kinds
    TupleKind kind = TupleKind::zero;
};

/// Exact integer test of the constraint attached to the tuple's kind.
inline bool satisfies_constraint(const MomentumTuple& t, const TangentialSites& s) {
    const long long m = s.momentum(t.ell);
    const bool zero_ell = linf(t.ell) == 0;
    switch (t.kind) {
        case TupleKind::zero: return !zero_ell;
        case TupleKind::first: return s.is_normal(t.j) && m + t.j == 0;
        case TupleKind::second_minus:
            return s.is_normal(t.j) && s.is_normal(t.jprime) && m + t.j - t.jprime == 0 && !(zero_ell && t.j == t.jprime);
        case TupleKind::second_plus:
            return s.is_normal(t.j) && s.is_normal(t.jprime) && m + t.j + t.jprime == 0;
    }
    return false;
}

/// All tuples of the given kind with |l|_inf <= ell_max and |j|, |j'| <= j_max, ordered by
/// (l lexicographic, j, j'). Since j' is fixed by the constraint, the loop is O(#l * j_max).
inline std::vector<MomentumTuple> enumerate_tuples(const TangentialSites& s, int ell_max, int j_max, TupleKind kind) {
    require(ell_max >= 1 && j_max >= 1, "enumerate_tuples: cutoffs must be positive");
    std::vector<MomentumTuple> out;
    for (const IntVec& ell : lattice_box(s.nu(), ell_max)) {
        const long long m = s.momentum(ell);
        if (kind == TupleKind::zero) {
            if (linf(ell) != 0) out.push_back({ell, 0, 0, kind});
            continue;
        }
        if (kind == TupleKind::first) {
            const long long j = -m;
            if (std::llabs(j) <= j_max && s.is_normal(static_cast<int>(j))) out.push_back({ell, static_cast<int>(j), 0, kind});
            continue;
        }
        for (int j = -j_max; j <= j_max; ++j) {
            if (!s.is_normal(j)) continue;
            const long long jp = kind == TupleKind::second_minus ? m + j : -(m + j);
            if (std::llabs(jp) > j_max) continue;
            MomentumTuple t{ell, j, static_cast<int>(jp), kind};
            if (satisfies_constraint(t, s)) out.push_back(std::move(t));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Non-degeneracy at gamma = 0

/// Determinant of the jet matrix A(0) with rows = derivative orders 2,4,..,2N and columns =
/// sites, computed from the jets and from the closed Vandermonde product; the two must agree.
struct JetDeterminant {
    double from_jets;
    double from_product;
};

inline JetDeterminant jet_matrix_det0(const IntVec& js, const DispersionParams& p) {
    const std::size_t N = js.size();
    require(N >= 1, "jet_matrix_det0: empty site list");
    for (std::size_t a = 0; a < N; ++a) {
        require(js[a] != 0, "jet_matrix_det0: zero site");
        for (std::size_t b = 0; b < a; ++b)
            require(std::abs(js[a]) != std::abs(js[b]), "jet_matrix_det0: coincident moduli make the Vandermonde vanish");
    }
    require(static_cast<int>(2 * N) <= kMaxJetOrder, "jet_matrix_det0: too many sites for the jet length");
    Eigen::MatrixXd A(N, N);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t a = 0; a < N; ++a) A(n, a) = Omega_jet_at_zero(js[a], 2 * static_cast<int>(n + 1), p);
    const double det_jets = A.partialPivLu().determinant();

    double prod = 1.0;
    for (std::size_t n = 1; n <= N; ++n) prod *= jet_coefficient_b(static_cast<int>(n), p.g);
    for (int j : js) prod *= std::sqrt(p.g * symbol_G0(j, p.depth)) * f_weight(j, p.depth);
    for (std::size_t q = 0; q < N; ++q)
        for (std::size_t r = 0; r < q; ++r) prod *= f_weight(js[q], p.depth) - f_weight(js[r], p.depth);
    return {det_jets, prod};
}

struct MonotonicityReport {
    bool decreasing;
    double min_gap;  // min over j of f(j) - f(j+1)
    int worst_j;
};

inline MonotonicityReport f_monotonicity_check(const Depth& depth, int j_max) {
    require(j_max >= 2, "f_monotonicity_check: j_max must be at least 2");
    MonotonicityReport r{true, std::numeric_limits<double>::infinity(), 1};
    for (int j = 1; j < j_max; ++j) {
        const double gap = f_weight(j, depth) - f_weight(j + 1, depth);
        if (gap < r.min_gap) r = {r.decreasing, gap, j};
        if (!(gap > 0.0)) r.decreasing = false;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Transversality

struct TransversalityReport {
    TupleKind kind{};
    int m0 = -1;             // smallest derivative order with positive bound, -1 if none
    double rho0 = 0.0;       // bound using all orders up to m0_max
    RealVec rho_by_order;    // rho0(m) for m = 0..m0_max
    MomentumTuple worst_tuple;
    double worst_gamma = 0.0;
    std::size_t tuple_count = 0;
    int gamma_grid = 0;
    double tail_margin = 0.0;  // second-plus only: lower bound of |divisor| beyond j_max
    bool ok() const { return m0 >= 0; }
};

namespace detail {

/// Jets of gamma -> Omega.l + s1 Omega_j + s2 Omega_j' up to `order`.
struct DivisorJet {
    const TangentialSites* sites;
    const DispersionParams* params;
    int order;

    RealVec operator()(const MomentumTuple& t, double gamma) const {
        RealVec out(order + 1, 0.0);
        auto acc = [&](int j, double w) {
            if (w == 0.0) return;
            const RealVec d = Omega_jet(j, order, *params, gamma);
            for (int n = 0; n <= order; ++n) out[n] += w * d[n];
        };
        for (std::size_t a = 0; a < t.ell.size(); ++a) acc(sites->jvec()[a], t.ell[a]);
        switch (t.kind) {
            case TupleKind::zero: break;
            case TupleKind::first: acc(t.j, 1.0); break;
            case TupleKind::second_minus: acc(t.j, 1.0); acc(t.jprime, -1.0); break;
            case TupleKind::second_plus: acc(t.j, 1.0); acc(t.jprime, 1.0); break;
        }
        return out;
    }
};

}  // namespace detail

/// For each tuple and grid point computes max_{n<=m} |d^n divisor| / <l>, minimized over
/// tuples and gamma, for every m <= m0_max. Grid minima are refined on an 8x sub-grid, and a
/// sign change of the divisor itself forces the order-0 bound to zero.
inline TransversalityReport verify_transversality(const TangentialSites& s, const DispersionParams& p, TupleKind kind,
                                                  int ell_max, int j_max, int m0_max, int grid_n = 512,
                                                  double positivity_floor = 1e-9) {
    p.validate();
    require(grid_n >= 2, "verify_transversality: grid must have at least two points");
    require(m0_max >= 0 && m0_max < kMaxJetOrder, "verify_transversality: m0_max out of range");
    const auto tuples = enumerate_tuples(s, ell_max, j_max, kind);
    const int orders = m0_max + 1;
    const double g0 = p.gamma_lo, g1 = p.gamma_hi;
    auto grid_gamma = [&](int i) { return grid_n == 1 ? g0 : g0 + (g1 - g0) * i / (grid_n - 1); };

    // Jet tables per wavenumber and grid point; the tuple objective is a linear combination.
    const int jmax_all = std::max(j_max, *std::max_element(s.nbar().begin(), s.nbar().end()));
    std::vector<RealVec> table(2 * jmax_all + 1);
    parallel_for(table.size(), [&](std::size_t idx) {
        const int j = static_cast<int>(idx) - jmax_all;
        if (j == 0) return;
        RealVec& row = table[idx];
        row.resize(static_cast<std::size_t>(grid_n) * orders);
        for (int i = 0; i < grid_n; ++i) {
            const RealVec d = Omega_jet(j, m0_max, p, grid_gamma(i));
            std::copy(d.begin(), d.end(), row.begin() + static_cast<std::size_t>(i) * orders);
        }
    });
    auto tab = [&](int j, int i, int n) { return table[j + jmax_all][static_cast<std::size_t>(i) * orders + n]; };

    struct Local {
        RealVec best;   // per order
        RealVec gamma;  // argmin per order
    };
    std::vector<Local> local(tuples.size());
    const detail::DivisorJet jet{&s, &p, m0_max};

    parallel_for(tuples.size(), [&](std::size_t ti) {
        const auto& t = tuples[ti];
        const double br = bracket(t.ell);
        Local& L = local[ti];
        L.best.assign(orders, std::numeric_limits<double>::infinity());
        L.gamma.assign(orders, g0);
        std::vector<int> arg(orders, 0);
        RealVec f(orders);
        double prev0 = 0.0;
        bool sign_change = false;
        int change_cell = 0;
        for (int i = 0; i < grid_n; ++i) {
            std::fill(f.begin(), f.end(), 0.0);
            for (std::size_t a = 0; a < t.ell.size(); ++a)
                if (t.ell[a]) for (int n = 0; n < orders; ++n) f[n] += t.ell[a] * tab(s.jvec()[a], i, n);
            if (t.kind != TupleKind::zero)
                for (int n = 0; n < orders; ++n) f[n] += tab(t.j, i, n);
            if (t.kind == TupleKind::second_minus)
                for (int n = 0; n < orders; ++n) f[n] -= tab(t.jprime, i, n);
            if (t.kind == TupleKind::second_plus)
                for (int n = 0; n < orders; ++n) f[n] += tab(t.jprime, i, n);
            if (i > 0 && !sign_change && (f[0] == 0.0 || (prev0 < 0.0) != (f[0] < 0.0))) {
                sign_change = true;
                change_cell = i;
            }
            prev0 = f[0];
            double running = 0.0;
            for (int m = 0; m < orders; ++m) {
                running = std::max(running, std::abs(f[m]) / br);
                if (running < L.best[m]) {
                    L.best[m] = running;
                    arg[m] = i;
                }
            }
        }
        // Local refinement around each grid minimizer.
        for (int m = 0; m < orders; ++m) {
            L.gamma[m] = grid_gamma(arg[m]);
            const int lo = std::max(0, arg[m] - 1), hi = std::min(grid_n - 1, arg[m] + 1);
            const int sub = 8 * (hi - lo);
            for (int k = 0; k <= sub; ++k) {
                const double gm = grid_gamma(lo) + (grid_gamma(hi) - grid_gamma(lo)) * k / std::max(1, sub);
                const RealVec d = jet(t, gm);
                double v = 0.0;
                for (int n = 0; n <= m; ++n) v = std::max(v, std::abs(d[n]) / br);
                if (v < L.best[m]) {
                    L.best[m] = v;
                    L.gamma[m] = gm;
                }
            }
        }
        if (sign_change) {
            // Bisect the root of the divisor: the order-0 objective vanishes there.
            double a = grid_gamma(change_cell - 1), b = grid_gamma(change_cell);
            double fa = jet(t, a)[0];
            for (int it = 0; it < 60; ++it) {
                const double c = 0.5 * (a + b);
                const double fc = jet(t, c)[0];
                if ((fc < 0.0) == (fa < 0.0)) { a = c; fa = fc; } else { b = c; }
            }
            L.best[0] = 0.0;
            L.gamma[0] = 0.5 * (a + b);
        }
    });

    TransversalityReport rep;
    rep.kind = kind;
    rep.tuple_count = tuples.size();
    rep.gamma_grid = grid_n;
    rep.rho_by_order.assign(orders, std::numeric_limits<double>::infinity());
    std::vector<std::size_t> worst(orders, 0);
    for (std::size_t ti = 0; ti < tuples.size(); ++ti)
        for (int m = 0; m < orders; ++m)
            if (local[ti].best[m] < rep.rho_by_order[m]) {
                rep.rho_by_order[m] = local[ti].best[m];
                worst[m] = ti;
            }
    for (int m = 0; m < orders; ++m) {
        if (rep.rho_by_order[m] > positivity_floor) {
            rep.m0 = m;
            break;
        }
    }
    rep.rho0 = rep.rho_by_order[m0_max];
    const int report_m = rep.m0 >= 0 ? rep.m0 : m0_max;
    if (!tuples.empty()) {
        rep.worst_tuple = tuples[worst[report_m]];
        rep.worst_gamma = local[worst[report_m]].gamma[report_m];
    }

    if (kind == TupleKind::second_plus) {
        // Beyond the cutoff one index exceeds j_max, so
        // Omega_j + Omega_j' - |Omega.l| >= min_{|j|>j_max} Omega_j + min_j Omega_j - |Omega|_1 ell_max.
        double margin = std::numeric_limits<double>::infinity();
        for (int i = 0; i < grid_n; ++i) {
            const double gm = grid_gamma(i);
            double lower = std::numeric_limits<double>::infinity();
            for (int j : {j_max + 1, -(j_max + 1)}) {
                // Omega_j >= omega_j - |gamma| G/(2|j|) and both pieces are monotone in |j| here.
                const double G = symbol_G0(j, p.depth);
                lower = std::min(lower, omega_j(j, p, gm) - 0.5 * std::abs(gm) * G / std::abs(j));
            }
            double smallest = std::numeric_limits<double>::infinity();
            for (int j = -j_max; j <= j_max; ++j)
                if (s.is_normal(j)) smallest = std::min(smallest, Omega_j(j, p, gm));
            double tang = 0.0;
            for (int ja : s.jvec()) tang += std::abs(Omega_j(ja, p, gm));
            margin = std::min(margin, lower + smallest - tang * ell_max);
        }
        rep.tail_margin = margin;
    }
    return rep;
}

}  // namespace vortexkam
