#pragma once
// Linear dispersion relation of gravity waves with constant vorticity on a flat surface:
// Dirichlet-Neumann symbol, frequencies, symmetrizer coefficients and gamma-jets.

#include <array>

#include "vortexkam/common.hpp"

namespace vortexkam {

/// Highest gamma-derivative order supported by dgamma_Omega.
inline constexpr int kMaxJetOrder = 16;

namespace detail {

/// tanh(x) for x >= 0, written in terms of exp(-2x) once the argument is large.
inline double stable_tanh(double x) {
    if (x > 20.0) {
        const double e = std::expm1(-2.0 * x);
        return -e / (2.0 + e);
    }
    return std::tanh(x);
}

}  // namespace detail

/// Ratio G_j(0)/|j|, which is tanh(h|j|) at finite depth and 1 at infinite depth.
inline double symbol_ratio(int j, const Depth& depth) {
    require(j != 0, "symbol_G0: zero mode has no symbol here");
    if (depth.is_infinite()) return 1.0;
    return detail::stable_tanh(*depth.h * std::abs(j));
}

/// G_j(0)/|j| - 1 evaluated without cancellation: -2/(1+exp(2h|j|)).
inline double symbol_ratio_minus_one(int j, const Depth& depth) {
    require(j != 0, "symbol_G0: zero mode has no symbol here");
    if (depth.is_infinite()) return 0.0;
    const double arg = 2.0 * *depth.h * std::abs(j);
    if (arg > 700.0) return 0.0;
    return -2.0 / (1.0 + std::exp(arg));
}

/// Dirichlet-Neumann symbol at the flat surface: j tanh(hj), or |j| at infinite depth.
inline double symbol_G0(int j, const Depth& depth) { return std::abs(j) * symbol_ratio(j, depth); }

inline double omega_j(int j, const DispersionParams& p, double gamma) {
    const double G = symbol_G0(j, p.depth);
    const double drift = 0.5 * gamma * G / j;
    return std::sqrt(p.g * G + drift * drift);
}

inline double Omega_j(int j, const DispersionParams& p, double gamma) {
    return omega_j(j, p, gamma) + 0.5 * gamma * symbol_G0(j, p.depth) / j;
}

/// Quarter-power symmetrizer M_j; even in j.
inline double coeff_M(int j, const DispersionParams& p, double gamma) {
    const double G = symbol_G0(j, p.depth);
    return std::pow(G / (p.g + 0.25 * gamma * gamma * G / (double(j) * j)), 0.25);
}

struct MPCoefficients {
    double M;       // M_n
    double P_plus;  // P_n
    double P_minus; // P_{-n}
};

inline MPCoefficients coeffs_M_P(int n, const DispersionParams& p, double gamma) {
    require(n >= 1, "coeffs_M_P: n must be positive");
    const double M = coeff_M(n, p, gamma);
    const double base = 0.5 * gamma * M / n;
    return {M, base + 1.0 / M, base - 1.0 / M};
}

/// P_j for signed j, so that P_{-n} is coeff_P(-n).
inline double coeff_P(int j, const DispersionParams& p, double gamma) {
    const auto mp = coeffs_M_P(std::abs(j), p, gamma);
    return j > 0 ? mp.P_plus : mp.P_minus;
}

/// (omega_j - sqrt(g|j|)) sqrt(g|j|) in rationalized form, bounded uniformly in j.
inline double c_j_remainder(int j, const DispersionParams& p, double gamma) {
    require(j != 0, "c_j_remainder: j must be nonzero");
    const double aj = std::abs(j);
    const double ratio = symbol_ratio(j, p.depth);
    const double drift = 0.5 * gamma * ratio;  // (gamma/2) G/|j|
    const double num = p.g * aj * symbol_ratio_minus_one(j, p.depth) + drift * drift;
    const double den = 1.0 + std::sqrt(ratio + drift * drift / (p.g * aj));
    return num / den;
}

/// Coefficient b_{2n} = (2n)! binom(1/2, n) / (g^n 4^n) of the even gamma-jets at gamma = 0.
inline double jet_coefficient_b(int n, double g) {
    double binom = 1.0;  // binom(1/2, n)
    for (int k = 0; k < n; ++k) binom *= (0.5 - k) / (k + 1);
    double fact = 1.0;
    for (int k = 2; k <= 2 * n; ++k) fact *= k;
    return fact * binom / std::pow(4.0 * g, n);
}

/// f(j) = G_|j|(0)/j^2, the quantity whose distinct values drive non-degeneracy.
inline double f_weight(int j, const Depth& depth) { return symbol_G0(j, depth) / (double(j) * j); }

/// Closed-form derivative of order n at gamma = 0.
inline double Omega_jet_at_zero(int j, int n, const DispersionParams& p) {
    const double G = symbol_G0(j, p.depth);
    if (n == 0) return std::sqrt(p.g * G);
    if (n == 1) return 0.5 * G / j;
    if (n % 2 == 1) return 0.0;
    const int m = n / 2;
    return jet_coefficient_b(m, p.g) * std::sqrt(p.g * G) * std::pow(f_weight(j, p.depth), m);
}

namespace detail {

/// Derivatives d^k/dgamma^k Omega_j for k = 0..order, via truncated power-series arithmetic
/// in the shifted variable gamma0 + t (exact up to rounding, no step-size choice).
inline RealVec Omega_series_jet(int j, int order, const DispersionParams& p, double gamma) {
    require(order >= 0 && order <= kMaxJetOrder, "dgamma_Omega: derivative order beyond supported jet length");
    RealVec out(order + 1);
    const double G = symbol_G0(j, p.depth);
    const double a = 0.5 * G / j;
    std::array<double, kMaxJetOrder + 1> s{}, r{};
    s[0] = p.g * G + a * a * gamma * gamma;
    if (order >= 1) s[1] = 2.0 * a * a * gamma;
    if (order >= 2) s[2] = a * a;
    r[0] = std::sqrt(s[0]);
    for (int k = 1; k <= order; ++k) {
        double acc = s[k];
        for (int i = 1; i < k; ++i) acc -= r[i] * r[k - i];
        r[k] = acc / (2.0 * r[0]);
    }
    r[0] += a * gamma;
    if (order >= 1) r[1] += a;
    double fact = 1.0;
    for (int k = 0; k <= order; ++k) {
        if (k > 0) fact *= k;
        out[k] = fact * r[k];
    }
    return out;
}

}  // namespace detail

/// Gamma-jet of Omega_j up to `order`; closed form at gamma = 0, power series elsewhere.
inline RealVec Omega_jet(int j, int order, const DispersionParams& p, double gamma) {
    require(order >= 0 && order <= kMaxJetOrder, "dgamma_Omega: derivative order beyond supported jet length");
    if (gamma != 0.0) return detail::Omega_series_jet(j, order, p, gamma);
    RealVec out(order + 1);
    for (int n = 0; n <= order; ++n) out[n] = Omega_jet_at_zero(j, n, p);
    return out;
}

inline double dgamma_Omega(int j, int n, const DispersionParams& p, double gamma) {
    require(n >= 0, "dgamma_Omega: negative order");
    return Omega_jet(j, n, p, gamma)[n];
}

inline RealVec tangential_vector(const TangentialSites& sites, const DispersionParams& p, double gamma) {
    RealVec w(sites.nu());
    for (std::size_t a = 0; a < sites.nu(); ++a) w[a] = Omega_j(sites.jvec()[a], p, gamma);
    return w;
}

}  // namespace vortexkam
