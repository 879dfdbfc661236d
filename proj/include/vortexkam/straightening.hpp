#pragma once

// Almost-straightening of the quasi-periodic transport operator
//     X = omega . d_phi + (m1 + p(phi, x)) d_x
// acting on traveling waves u(phi, x) = U(psi), psi = phi - jvec x.  On such functions
// d_phi acts as grad_psi and d_x as -jvec . grad_psi, so every object in this module is a
// function on the torus T^nu stored by its Fourier coefficients in a max-norm box.

#include <fftw3.h>

#include <mutex>

#include "common.hpp"

namespace vortexkam {

// ---------------------------------------------------------------------------
// Smooth cutoff

/// Smooth even cutoff: 0 for |xi| <= 1/3, 1 for |xi| >= 2/3, strictly increasing in between.
inline double cutoff_chi(double xi) {
    const double t = 3.0 * std::abs(xi) - 1.0;
    if (t <= 0.0) return 0.0;
    if (t >= 1.0) return 1.0;
    const double a = std::exp(-1.0 / t), b = std::exp(-1.0 / (1.0 - t));
    return a / (a + b);
}

// ---------------------------------------------------------------------------
// Traveling-wave functions

enum class Parity { even, odd, none };

inline std::string to_string(Parity p) {
    switch (p) {
        case Parity::even: return "even";
        case Parity::odd: return "odd";
        case Parity::none: return "none";
    }
    return "?";
}

/// Exact coefficient-level structure checks. Each flag is a bitwise comparison, never a tolerance.
struct StructureReport {
    bool hermitian = true;  // U_{-l} == conj(U_l)
    bool parity = true;     // even: all imaginary parts are 0; odd: all real parts are 0
    bool momentum = true;   // every stored mode carries j = -jvec.l and lies in the box
    bool ok() const { return hermitian && parity && momentum; }
};

/// Real traveling wave u(phi, x) = sum_l U_l exp(i l.(phi - jvec x)), |l|_inf <= L.
class TravelingWaveFn {
public:
    TravelingWaveFn() = default;
    TravelingWaveFn(TangentialSites sites, int L, Parity parity)
        : sites_(std::move(sites)), L_(L), parity_(parity) {
        require(L >= 0, "traveling wave: box radius must be non-negative");
        coeffs_.assign(box_size(), cplx{});
    }

    const TangentialSites& sites() const { return sites_; }
    std::size_t nu() const { return sites_.nu(); }
    int L() const { return L_; }
    Parity parity() const { return parity_; }
    std::size_t box_size() const {
        std::size_t n = 1;
        for (std::size_t a = 0; a < nu(); ++a) n *= 2 * static_cast<std::size_t>(L_) + 1;
        return n;
    }
    const std::vector<cplx>& coeffs() const { return coeffs_; }

    /// Lattice point of a dense index.
    IntVec ell_of(std::size_t idx) const {
        IntVec ell(nu());
        const std::size_t side = 2 * static_cast<std::size_t>(L_) + 1;
        for (std::size_t a = nu(); a-- > 0;) {
            ell[a] = static_cast<int>(idx % side) - L_;
            idx /= side;
        }
        return ell;
    }
    std::size_t index_of(const IntVec& ell) const { return box_index(ell, L_); }
    bool contains(const IntVec& ell) const { return ell.size() == nu() && linf(ell) <= L_; }

    cplx at(const IntVec& ell) const { return contains(ell) ? coeffs_[index_of(ell)] : cplx{}; }

    /// Sets U_l and its mirror U_{-l} consistently with real-valuedness. For the even class the
    /// value must be real, for the odd class purely imaginary.
    void set(const IntVec& ell, cplx value) {
        require(contains(ell), "traveling wave: mode outside the box");
        if (parity_ == Parity::even) require(value.imag() == 0.0, "traveling wave: even coefficients are real");
        if (parity_ == Parity::odd) require(value.real() == 0.0, "traveling wave: odd coefficients are imaginary");
        const bool zero = linf(ell) == 0;
        if (zero) require(value.imag() == 0.0, "traveling wave: mean must be real");
        coeffs_[index_of(ell)] = value;
        const cplx mirror = parity_ == Parity::even ? value : (parity_ == Parity::odd ? -value : std::conj(value));
        coeffs_[index_of(negate(ell))] = zero ? value : mirror;
    }
    /// Raw write used by projections that already produce consistent pairs.
    cplx& raw(std::size_t idx) { return coeffs_[idx]; }

    /// Momentum of the 2-D mode carried by l: j = -jvec . l.
    long long j_of(const IntVec& ell) const { return -sites_.momentum(ell); }

    double mean() const { return coeffs_[index_of(IntVec(nu(), 0))].real(); }

    /// (sum |U_l|^2 <l>^{2s})^{1/2} with the max-norm bracket.
    double norm(double s) const {
        double acc = 0.0;
        for (std::size_t i = 0; i < coeffs_.size(); ++i) {
            const double w = std::pow(bracket(ell_of(i)), s);
            acc += std::norm(coeffs_[i]) * w * w;
        }
        return std::sqrt(acc);
    }
    /// sum |U_l|, an upper bound for the sup norm.
    double wiener_norm() const {
        double acc = 0.0;
        for (const auto& c : coeffs_) acc += std::abs(c);
        return acc;
    }

    StructureReport structure() const {
        StructureReport r;
        for (std::size_t i = 0; i < coeffs_.size(); ++i) {
            const IntVec ell = ell_of(i);
            const cplx c = coeffs_[i];
            if (coeffs_[index_of(negate(ell))] != std::conj(c)) r.hermitian = false;
            if (parity_ == Parity::even && c.imag() != 0.0) r.parity = false;
            if (parity_ == Parity::odd && c.real() != 0.0) r.parity = false;
            if (j_of(ell) + sites_.momentum(ell) != 0 || linf(ell) > L_) r.momentum = false;
        }
        return r;
    }

    /// Copy into a box of a different radius (modes outside the new box are dropped).
    TravelingWaveFn resized(int L) const {
        TravelingWaveFn out(sites_, L, parity_);
        for (std::size_t i = 0; i < coeffs_.size(); ++i) {
            const IntVec ell = ell_of(i);
            if (out.contains(ell)) out.coeffs_[out.index_of(ell)] = coeffs_[i];
        }
        return out;
    }

private:
    TangentialSites sites_;
    int L_ = 0;
    Parity parity_ = Parity::none;
    std::vector<cplx> coeffs_;
};

inline TravelingWaveFn operator+(TravelingWaveFn a, const TravelingWaveFn& b) {
    require(a.L() == b.L() && a.parity() == b.parity(), "traveling wave: sum of mismatched functions");
    for (std::size_t i = 0; i < a.coeffs().size(); ++i) a.raw(i) += b.coeffs()[i];
    return a;
}

/// Symbol of d_x on traveling waves: i j with j = -jvec . l. Maps even to odd and back.
inline TravelingWaveFn derivative_x(const TravelingWaveFn& u) {
    const Parity par = u.parity() == Parity::even ? Parity::odd
                       : u.parity() == Parity::odd ? Parity::even
                                                    : Parity::none;
    TravelingWaveFn out(u.sites(), u.L(), par);
    for (std::size_t i = 0; i < u.coeffs().size(); ++i) {
        const cplx c = u.coeffs()[i];
        const double j = static_cast<double>(u.j_of(u.ell_of(i)));
        // Multiply by i*j component-wise so the parity class stays exact.
        out.raw(i) = cplx{-j * c.imag(), j * c.real()};
    }
    return out;
}

/// Random even traveling wave: coefficients standard normal times exp(-decay |l|) on the box
/// |l| <= support, rescaled to the requested s-norm.
inline TravelingWaveFn random_even_wave(const TangentialSites& sites, int L, int support, double decay,
                                        double s, double target_norm, CounterRng& rng) {
    require(support <= L, "random wave: support exceeds box");
    TravelingWaveFn u(sites, L, Parity::even);
    for (const auto& ell : lattice_box(sites.nu(), support)) {
        if (linf(ell) == 0) continue;
        if (negate(ell) < ell) continue;  // one draw per mirror pair
        u.set(ell, cplx{rng.next_normal() * std::exp(-decay * linf(ell)), 0.0});
    }
    const double n = u.norm(s);
    require(n > 0.0, "random wave: empty support");
    TravelingWaveFn scaled(sites, L, Parity::even);
    for (std::size_t i = 0; i < u.coeffs().size(); ++i) scaled.raw(i) = u.coeffs()[i] * (target_norm / n);
    return scaled;
}

// ---------------------------------------------------------------------------
// Point evaluation and torus grids

namespace detail {

/// Evaluates U and optionally grad U at an arbitrary point by separable direct summation.
class PointEvaluator {
public:
    explicit PointEvaluator(const TravelingWaveFn& u) : u_(u), side_(2 * u.L() + 1), phases_(u.nu()) {
        for (auto& p : phases_) p.resize(side_);
    }

    double value(const RealVec& psi) { return eval(psi, nullptr); }
    double value_and_gradient(const RealVec& psi, RealVec& grad) { return eval(psi, &grad); }

private:
    double eval(const RealVec& psi, RealVec* grad) {
        const std::size_t nu = u_.nu();
        const int L = u_.L();
        for (std::size_t a = 0; a < nu; ++a) {
            phases_[a][L] = 1.0;
            for (int m = 1; m <= L; ++m) {
                // Direct polar evaluation keeps the phase error independent of m.
                phases_[a][L + m] = std::polar(1.0, m * psi[a]);
                phases_[a][L - m] = std::conj(phases_[a][L + m]);
            }
        }
        double val = 0.0;
        if (grad) grad->assign(nu, 0.0);
        const auto& c = u_.coeffs();
        IntVec idx(nu, 0);
        for (std::size_t i = 0; i < c.size(); ++i) {
            if (c[i] != cplx{}) {
                cplx ph = 1.0;
                for (std::size_t a = 0; a < nu; ++a) ph *= phases_[a][idx[a]];
                const cplx t = c[i] * ph;
                val += t.real();
                if (grad)
                    for (std::size_t a = 0; a < nu; ++a) (*grad)[a] -= (idx[a] - L) * t.imag();
            }
            for (std::size_t a = nu; a-- > 0;) {
                if (++idx[a] < side_) break;
                idx[a] = 0;
            }
        }
        return val;
    }

    const TravelingWaveFn& u_;
    int side_;
    std::vector<std::vector<cplx>> phases_;
};

inline std::mutex& fftw_plan_mutex() {
    static std::mutex m;
    return m;
}

}  // namespace detail

/// Uniform grid on T^nu with M points per direction, psi_k = 2 pi k / M.
class TorusGrid {
public:
    TorusGrid(std::size_t nu, int M) : nu_(nu), M_(M) {
        require(M >= 2, "grid: at least two points per direction");
        total_ = 1;
        for (std::size_t a = 0; a < nu; ++a) total_ *= static_cast<std::size_t>(M);
    }
    std::size_t nu() const { return nu_; }
    int M() const { return M_; }
    std::size_t size() const { return total_; }

    RealVec node(std::size_t k) const {
        RealVec psi(nu_);
        for (std::size_t a = nu_; a-- > 0;) {
            psi[a] = 2.0 * kPi * static_cast<double>(k % M_) / M_;
            k /= M_;
        }
        return psi;
    }

    /// Node values of u (exact for modes below the Nyquist index).
    RealVec values(const TravelingWaveFn& u) const {
        require(u.nu() == nu_ && 2 * u.L() < M_, "grid: too coarse for the function");
        std::vector<cplx> buf(total_, cplx{});
        for (std::size_t i = 0; i < u.coeffs().size(); ++i) buf[wrap(u.ell_of(i))] = u.coeffs()[i];
        transform(buf, FFTW_BACKWARD);
        RealVec out(total_);
        for (std::size_t k = 0; k < total_; ++k) out[k] = buf[k].real();
        return out;
    }

    /// Coefficients of node values on the box |l| <= L projected onto the parity class. The
    /// returned loss is the l^1 mass outside the box; defect is the largest parity correction.
    struct Projection {
        TravelingWaveFn fn;
        double loss = 0.0;
        double defect = 0.0;
    };
    Projection coefficients(const RealVec& vals, const TangentialSites& sites, int L, Parity parity) const {
        require(vals.size() == total_ && 2 * L < M_, "grid: box too large for the grid");
        std::vector<cplx> buf(vals.begin(), vals.end());
        transform(buf, FFTW_FORWARD);
        const double scale = 1.0 / static_cast<double>(total_);
        for (auto& c : buf) c *= scale;

        Projection pr{TravelingWaveFn(sites, L, parity), 0.0, 0.0};
        double inside = 0.0, all = 0.0;
        for (const auto& c : buf) all += std::abs(c);
        for (std::size_t i = 0; i < pr.fn.coeffs().size(); ++i) {
            const IntVec ell = pr.fn.ell_of(i);
            const cplx x = buf[wrap(ell)], y = buf[wrap(negate(ell))];
            cplx v;
            if (parity == Parity::even) v = {0.5 * (x.real() + y.real()), 0.0};
            else if (parity == Parity::odd) v = {0.0, 0.5 * (x.imag() - y.imag())};
            else v = 0.5 * (x + std::conj(y));
            if (linf(ell) == 0 && parity != Parity::odd) v = {v.real(), 0.0};
            if (linf(ell) == 0 && parity == Parity::odd) v = {};
            pr.fn.raw(i) = v;
            pr.defect = std::max(pr.defect, std::abs(v - x));
            inside += std::abs(x);
        }
        pr.loss = std::max(0.0, all - inside);
        return pr;
    }

private:
    std::size_t wrap(const IntVec& ell) const {
        std::size_t idx = 0;
        for (int v : ell) idx = idx * M_ + static_cast<std::size_t>(((v % M_) + M_) % M_);
        return idx;
    }
    void transform(std::vector<cplx>& buf, int sign) const {
        std::vector<int> dims(nu_, M_);
        auto* data = reinterpret_cast<fftw_complex*>(buf.data());
        fftw_plan plan;
        {
            std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
            plan = fftw_plan_dft(static_cast<int>(nu_), dims.data(), data, data, sign, FFTW_ESTIMATE);
        }
        fftw_execute(plan);
        std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
        fftw_destroy_plan(plan);
    }

    std::size_t nu_;
    int M_;
    std::size_t total_;
};

/// Default grid: twice the box diameter, so products of two box functions do not alias into the box.
inline int default_grid(int L) { return 2 * (2 * L + 1); }

/// Resamples a pointwise function onto the box. The callback receives the node index and point.
template <class F>
TorusGrid::Projection sample(const TangentialSites& sites, int L, Parity parity, int M, F&& f) {
    const TorusGrid grid(sites.nu(), M);
    RealVec vals(grid.size());
    parallel_for(grid.size(), [&](std::size_t k) { vals[k] = f(k, grid.node(k)); });
    return grid.coefficients(vals, sites, L, parity);
}

// ---------------------------------------------------------------------------
// Torus diffeomorphisms x -> x + beta(phi, x)

namespace detail {

/// sup over the grid of |jvec . grad B|; the map is a diffeomorphism when this is below 1.
inline double displacement_slope(const TravelingWaveFn& beta, int M) {
    const TorusGrid grid(beta.nu(), M);
    RealVec slope(grid.size());
    parallel_for(grid.size(), [&](std::size_t k) {
        PointEvaluator ev(beta);
        RealVec grad;
        ev.value_and_gradient(grid.node(k), grad);
        double s = 0.0;
        for (std::size_t a = 0; a < grad.size(); ++a) s += beta.sites().jvec()[a] * grad[a];
        slope[k] = std::abs(s);
    });
    return *std::max_element(slope.begin(), slope.end());
}

inline RealVec displaced(const RealVec& psi, const IntVec& jvec, double shift) {
    RealVec q(psi);
    for (std::size_t a = 0; a < q.size(); ++a) q[a] -= jvec[a] * shift;
    return q;
}

}  // namespace detail

struct ComposeResult {
    TravelingWaveFn fn;
    double loss = 0.0;  // l^1 mass of the resampled function outside the output box
};

/// u(phi, x + beta(phi, x)): the profile V(psi) = U(psi - jvec B(psi)), truncated to u's box.
inline ComposeResult compose(const TravelingWaveFn& u, const TravelingWaveFn& beta, int M = 0) {
    require(u.nu() == beta.nu(), "compose: dimension mismatch");
    const int L = std::max(u.L(), beta.L());
    if (M == 0) M = default_grid(L);
    require(detail::displacement_slope(beta, M) < 1.0, "compose: id + beta is not a diffeomorphism");
    const TorusGrid grid(u.nu(), M);
    const RealVec bvals = grid.values(beta);
    auto pr = sample(u.sites(), u.L(), u.parity(), M, [&](std::size_t k, const RealVec& psi) {
        detail::PointEvaluator ev(u);
        return ev.value(detail::displaced(psi, u.sites().jvec(), bvals[k]));
    });
    return {std::move(pr.fn), pr.loss};
}

struct InverseResult {
    TravelingWaveFn fn;
    double residual = 0.0;  // max over nodes of |B_breve + B(psi - jvec B_breve)|
    double loss = 0.0;
    int max_iterations = 0;
    bool damped = false;
};

/// beta_breve with y = x + beta(x) <=> x = y + beta_breve(y). Per node, solves
/// b = -B(psi - jvec b) by fixed-point iteration, undamped first and with damping 1/2 if that stalls.
inline InverseResult invert_diffeo(const TravelingWaveFn& beta, int M = 0, double tol = 1e-14,
                                   int max_iter = 200) {
    if (M == 0) M = default_grid(beta.L());
    require(detail::displacement_slope(beta, M) < 1.0, "invert_diffeo: id + beta is not a diffeomorphism");
    const TorusGrid grid(beta.nu(), M);
    RealVec vals(grid.size()), resid(grid.size());
    std::vector<int> iters(grid.size());
    std::vector<char> used_damping(grid.size(), 0);
    const IntVec& jvec = beta.sites().jvec();
    parallel_for(grid.size(), [&](std::size_t k) {
        detail::PointEvaluator ev(beta);
        const RealVec psi = grid.node(k);
        for (double damping : {1.0, 0.5}) {
            double b = 0.0;
            int it = 0;
            double step = std::numeric_limits<double>::infinity();
            for (; it < max_iter && step > tol; ++it) {
                const double next = -ev.value(detail::displaced(psi, jvec, b));
                step = std::abs(next - b);
                b += damping * (next - b);
            }
            vals[k] = b;
            iters[k] = it;
            resid[k] = std::abs(b + ev.value(detail::displaced(psi, jvec, b)));
            if (step <= tol) return;
            used_damping[k] = 1;
        }
        throw DivergenceError("invert_diffeo: fixed-point iteration did not contract");
    });
    auto pr = grid.coefficients(vals, beta.sites(), beta.L(), beta.parity());
    InverseResult out{std::move(pr.fn), 0.0, pr.loss, 0, false};
    out.residual = *std::max_element(resid.begin(), resid.end());
    out.max_iterations = *std::max_element(iters.begin(), iters.end());
    out.damped = std::any_of(used_damping.begin(), used_damping.end(), [](char c) { return c != 0; });
    return out;
}

// ---------------------------------------------------------------------------
// Iteration data

struct KamSchedule {
    int N0 = 8;
    double chi = 1.5;
    int nbar = 4;
    double upsilon = 0.1;
    double tau = 1.5;
    double tol = 1e-14;  // fixed-point tolerance for inversions
    int grid = 0;        // points per direction, 0 selects default_grid(L)
    int k0 = 3;

    void validate() const {
        require(N0 >= 2, "schedule.N0 must be at least 2");
        require(chi > 1.0, "schedule.chi must exceed 1");
        require(nbar >= 0, "schedule.nbar must be non-negative");
        require(upsilon > 0.0 && tau >= 0.0, "schedule: upsilon must be positive and tau non-negative");
        require(tol > 0.0, "schedule.tol must be positive");
        require(grid >= 0, "schedule.grid must be non-negative");
        require(k0 >= 0, "schedule.k0 must be non-negative");
    }
    /// N_n = N0^(chi^n), with N_{-1} = 1.
    double scale(int n) const { return n < 0 ? 1.0 : std::pow(static_cast<double>(N0), std::pow(chi, n)); }
    double tau1() const { return k0 + (k0 + 1) * tau; }
    double a() const { return 3.0 * (tau1() + 1.0); }
    int b() const { return static_cast<int>(std::floor(a())) + 2; }
    double tau2() const { return tau1() + a() + 2.0; }
};

struct TransportOp {
    double m1 = 0.0;
    TravelingWaveFn p;
    RealVec omega;
};

struct HomologicalResult {
    TravelingWaveFn g;         // odd
    TravelingWaveFn leftover;  // (1 - chi) part of Pi_N p - <p>, even
    double min_margin = std::numeric_limits<double>::infinity();  // min |d| upsilon^-1 <l>^tau over 0 < <l> <= N
    int damped_modes = 0;      // modes where the cutoff is below 1
};

/// Divisor of the mode l: omega.l + m1 j with j = -jvec.l.
inline double transport_divisor(const RealVec& omega, double m1, const TangentialSites& s, const IntVec& ell) {
    return dot(omega, ell) - m1 * static_cast<double>(s.momentum(ell));
}

/// Solves (omega.d_phi + m1 d_x) g + Pi_N p = <p> up to the cutoff on small divisors.
inline HomologicalResult solve_homological(const TravelingWaveFn& p, double m1, const RealVec& omega,
                                           double upsilon, double tau, double N) {
    require(p.parity() == Parity::even, "solve_homological: p must be even");
    require(omega.size() == p.nu(), "solve_homological: frequency dimension mismatch");
    HomologicalResult r{TravelingWaveFn(p.sites(), p.L(), Parity::odd),
                        TravelingWaveFn(p.sites(), p.L(), Parity::even)};
    for (std::size_t i = 0; i < p.coeffs().size(); ++i) {
        const IntVec ell = p.ell_of(i);
        if (linf(ell) == 0 || bracket(ell) > N) continue;
        const double d = transport_divisor(omega, m1, p.sites(), ell);
        const double margin = std::abs(d) * std::pow(bracket(ell), tau) / upsilon;
        r.min_margin = std::min(r.min_margin, margin);
        const double c = cutoff_chi(margin);
        const double pl = p.coeffs()[i].real();
        if (c < 1.0) ++r.damped_modes;
        // g_l = -c p_l / (i d) = i c p_l / d.
        r.g.raw(i) = c == 0.0 ? cplx{} : cplx{0.0, c * pl / d};
        r.leftover.raw(i) = cplx{(1.0 - c) * pl, 0.0};
    }
    return r;
}

struct StepDiagnostics {
    int n = 0;
    double N = 0.0;
    double m1 = 0.0;       // m1 after the step
    double mean = 0.0;     // <p_n> absorbed at this step
    double norm_s0 = 0.0;  // |p_{n+1}|_{s0}
    double norm_g = 0.0;   // |g_n|_{s0}
    double min_margin = 0.0;
    bool nonresonant = true;  // every divisor with <l> <= N_n sits above upsilon <l>^-tau
    int damped_modes = 0;
    double leftover = 0.0;    // |(1-chi) part|_{s0}
    double loss = 0.0;        // l^1 mass dropped by the box truncations of this step
    double inverse_residual = 0.0;
    StructureReport p_structure, g_structure, beta_structure;
};

struct StepResult {
    TransportOp next;
    TravelingWaveFn g;
    TravelingWaveFn g_inverse;
    StepDiagnostics diag;
};

/// One conjugation by x -> x + g_n. The new coefficient is the pullback of
/// Pi_N^perp p + (1 - chi) part + p g_x, which is what remains of
/// omega.d_phi g + (m1 + p)(1 + g_x) after the mean is absorbed into m1.
inline StepResult straighten_step(const TransportOp& op, const KamSchedule& sched, int n, double s0) {
    const TravelingWaveFn& p = op.p;
    const double N = sched.scale(n);
    auto hom = solve_homological(p, op.m1, op.omega, sched.upsilon, sched.tau, N);
    const int M = sched.grid > 0 ? sched.grid : default_grid(p.L());

    StepResult out;
    out.g = hom.g;
    auto inv = invert_diffeo(hom.g, M, sched.tol);
    out.g_inverse = inv.fn;

    // Terms that are exact in coefficient space: the high modes and the cutoff leftover.
    TravelingWaveFn rest(p.sites(), p.L(), Parity::even);
    for (std::size_t i = 0; i < p.coeffs().size(); ++i)
        if (bracket(p.ell_of(i)) > N) rest.raw(i) = p.coeffs()[i];
    rest = rest + hom.leftover;
    const TravelingWaveFn gx = derivative_x(hom.g);

    // Evaluate w = rest + p g_x directly at the displaced nodes psi - jvec g_breve(psi).
    const TorusGrid grid(p.nu(), M);
    const RealVec ginv = grid.values(inv.fn);
    auto pr = sample(p.sites(), p.L(), Parity::even, M, [&](std::size_t k, const RealVec& psi) {
        const RealVec q = detail::displaced(psi, p.sites().jvec(), ginv[k]);
        detail::PointEvaluator er(rest), ep(p), eg(gx);
        return er.value(q) + ep.value(q) * eg.value(q);
    });

    out.next.m1 = op.m1 + p.mean();
    out.next.p = std::move(pr.fn);
    out.next.omega = op.omega;

    auto& d = out.diag;
    d.n = n;
    d.N = N;
    d.m1 = out.next.m1;
    d.mean = p.mean();
    d.norm_s0 = out.next.p.norm(s0);
    d.norm_g = hom.g.norm(s0);
    d.min_margin = hom.min_margin;
    d.nonresonant = hom.min_margin >= 1.0;
    d.damped_modes = hom.damped_modes;
    d.leftover = hom.leftover.norm(s0);
    d.loss = pr.loss + inv.loss;
    d.inverse_residual = inv.residual;
    d.p_structure = out.next.p.structure();
    d.g_structure = out.g.structure();
    return out;
}

struct StraighteningHistory {
    std::vector<TransportOp> ops;  // X_0 .. X_nbar
    std::vector<StepDiagnostics> steps;
    TravelingWaveFn beta;          // cumulative displacement of B_nbar
    std::vector<double> norms;     // |p_n|_{s0}, n = 0..nbar
    double tail = 0.0;             // accumulated truncation loss, incl. the beta updates
    double smallness = 0.0;        // N0^tau2 |p0|_{s0} / upsilon
    bool small_enough = false;     // smallness <= 1 (advisory only)
    double decay_constant = 0.0;   // max_n |p_n| N_{n-1}^a / |p0|_{s0+b}
    bool diverged = false;
};

/// Runs nbar steps. The composite map B_{n+1} = B_n G_n has displacement
/// beta_{n+1} = beta_n + g_n(phi, x + beta_n).
inline StraighteningHistory run_straightening(const TravelingWaveFn& p0, const RealVec& omega,
                                              const KamSchedule& sched, double m1 = 0.0, double s0 = 2.0) {
    sched.validate();
    require(p0.parity() == Parity::even, "run_straightening: p0 must be declared even");
    require(p0.structure().ok(), "run_straightening: p0 violates its declared structure");
    require(omega.size() == p0.nu(), "run_straightening: frequency dimension mismatch");
    const int M = sched.grid > 0 ? sched.grid : default_grid(p0.L());

    StraighteningHistory h;
    h.ops.push_back({m1, p0, omega});
    h.norms.push_back(p0.norm(s0));
    h.beta = TravelingWaveFn(p0.sites(), p0.L(), Parity::odd);
    h.smallness = std::pow(sched.N0, sched.tau2()) * h.norms[0] / sched.upsilon;
    h.small_enough = h.smallness <= 1.0;
    const double base = p0.norm(s0 + sched.b());

    for (int n = 0; n < sched.nbar; ++n) {
        auto st = straighten_step(h.ops.back(), sched, n, s0);
        auto upd = compose(st.g, h.beta, M);
        h.beta = h.beta + upd.fn;
        st.diag.loss += upd.loss;
        st.diag.beta_structure = h.beta.structure();
        h.tail += st.diag.loss;
        if (st.diag.norm_s0 > h.norms.back()) h.diverged = true;
        h.norms.push_back(st.diag.norm_s0);
        if (base > 0.0)
            h.decay_constant = std::max(h.decay_constant, st.diag.norm_s0 * std::pow(sched.scale(n), sched.a()) / base);
        h.steps.push_back(st.diag);
        h.ops.push_back(std::move(st.next));
    }
    return h;
}

/// Conjugacy oracle for X0 B = B Xn with (B v)(phi, x) = v(phi, x + beta). For each test
/// profile V, both sides are evaluated pointwise on the grid (no truncation):
///   X0 (B v) = (omega - (m1_0 + p0) jvec) . grad W,   W(psi) = V(q), q = psi - jvec B(psi),
///   B (Xn v) = [(omega - (m1_n + p_n) jvec) . grad V](q).
/// Returns max over tests of sup|difference| / sup|d_x v|.
inline double verify_conjugacy(const TransportOp& X0, const TravelingWaveFn& beta, const TransportOp& Xn,
                               const std::vector<TravelingWaveFn>& tests, int M = 0) {
    if (M == 0) M = default_grid(std::max(X0.p.L(), beta.L()));
    const TorusGrid grid(beta.nu(), M);
    const IntVec& jv = beta.sites().jvec();
    const std::size_t nu = beta.nu();
    double worst = 0.0;
    for (const auto& v : tests) {
        RealVec diff(grid.size()), scale(grid.size());
        parallel_for(grid.size(), [&](std::size_t k) {
            detail::PointEvaluator eb(beta), ev(v), e0(X0.p), en(Xn.p);
            const RealVec psi = grid.node(k);
            RealVec gb, gv;
            const double b = eb.value_and_gradient(psi, gb);
            const RealVec q = detail::displaced(psi, jv, b);
            ev.value_and_gradient(q, gv);
            double jgv = 0.0;
            for (std::size_t a = 0; a < nu; ++a) jgv += jv[a] * gv[a];
            const double c0 = X0.m1 + e0.value(psi), cn = Xn.m1 + en.value(q);
            double lhs = 0.0, rhs = 0.0;
            for (std::size_t a = 0; a < nu; ++a) {
                const double gw = gv[a] - jgv * gb[a];
                lhs += (X0.omega[a] - c0 * jv[a]) * gw;
                rhs += (Xn.omega[a] - cn * jv[a]) * gv[a];
            }
            diff[k] = std::abs(lhs - rhs);
            RealVec g;
            ev.value_and_gradient(psi, g);
            double dx = 0.0;
            for (std::size_t a = 0; a < nu; ++a) dx += jv[a] * g[a];
            scale[k] = std::abs(dx);
        });
        const double den = *std::max_element(scale.begin(), scale.end());
        require(den > 0.0, "verify_conjugacy: test function has no x-dependence");
        worst = std::max(worst, *std::max_element(diff.begin(), diff.end()) / den);
    }
    return worst;
}

/// Frequency vector from quadratic irrationals: (1, sqrt2 - 1, sqrt3 - 1, ...) scaled by base.
inline RealVec quadratic_irrational_frequency(std::size_t nu, double base = 1.0) {
    static constexpr int radicands[] = {2, 3, 5, 7, 11, 13, 17, 19};
    require(nu >= 1 && nu <= 9, "frequency: nu must lie in 1..9");
    RealVec w(nu, base);
    for (std::size_t a = 1; a < nu; ++a) w[a] = base * (std::sqrt(static_cast<double>(radicands[a - 1])) - 1.0);
    return w;
}

}  // namespace vortexkam
