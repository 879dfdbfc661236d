#pragma once
// Reversible quasi-periodic traveling solutions of the linearized water-wave system,
// and the coordinate changes (Wahlen gauge, symmetrizer, complex coordinates) that
// diagonalize it.

#include <array>
#include <compare>
#include <map>
#include <ostream>

#include "vortexkam/dispersion.hpp"

namespace vortexkam {

/// Space-time Fourier mode e^{i(l.phi + j x)}.
struct ModeKey {
    IntVec ell;
    int j = 0;
    auto operator<=>(const ModeKey&) const = default;
};

/// A pair of real fields written as truncated Fourier series on T^nu x T.
/// The physical snapshot is obtained by evaluating the torus angle at `angle`;
/// along a solution the angle moves with velocity `frequency`.
struct WaveField {
    enum class Second { psi, zeta };

    std::size_t nu = 0;
    RealVec frequency;  // d(angle)/dt
    RealVec angle;      // current torus angle
    Second second = Second::psi;
    std::map<ModeKey, std::array<cplx, 2>> coeffs;  // (first, second) component

    std::array<cplx, 2>& at(const IntVec& ell, int j) { return coeffs[ModeKey{ell, j}]; }

    /// Point value (first, second) at position x.
    std::array<double, 2> evaluate(double x) const {
        std::array<double, 2> v{0.0, 0.0};
        for (const auto& [key, c] : coeffs) {
            const double phase = (angle.empty() ? 0.0 : dot(angle, key.ell)) + key.j * x;
            const cplx e = std::polar(1.0, phase);
            v[0] += (c[0] * e).real();
            v[1] += (c[1] * e).real();
        }
        return v;
    }

    /// Largest |c - conj(c_mirror)| over both components; zero for real fields.
    double hermitian_defect() const {
        double worst = 0.0;
        for (const auto& [key, c] : coeffs) {
            const auto it = coeffs.find(ModeKey{negate(key.ell), -key.j});
            for (int k = 0; k < 2; ++k) {
                const cplx mirror = it == coeffs.end() ? cplx{} : it->second[k];
                worst = std::max(worst, std::abs(c[k] - std::conj(mirror)));
            }
        }
        return worst;
    }
};

/// Complex coordinate z, stored as its own Fourier table (the conjugate is implied).
struct ComplexField {
    std::size_t nu = 0;
    RealVec frequency;
    RealVec angle;
    std::map<ModeKey, cplx> z;
};

struct LinearWaveSpec {
    TangentialSites sites;
    RealVec amplitudes;  // xi_a >= 0
    DispersionParams params;
    double gamma = 0.0;

    void validate() const {
        require(amplitudes.size() == sites.nu(), "synth: one amplitude per site required");
        for (double a : amplitudes) require(std::isfinite(a) && a >= 0.0, "synth: amplitudes must be finite and nonnegative");
        params.validate();
    }
};

namespace detail {
inline IntVec unit(std::size_t nu, std::size_t a, int s) {
    IntVec e(nu, 0);
    e[a] = s;
    return e;
}
inline double l2(const std::map<ModeKey, std::array<cplx, 2>>& c) {
    double s = 0.0;
    for (const auto& [k, v] : c) s += std::norm(v[0]) + std::norm(v[1]);
    return std::sqrt(s);
}
}  // namespace detail

/// Superposition of plane waves supported on the tangential sites, as a traveling wave
/// U(phi - jvec x) with frequency vector Omega(gamma), evaluated at time t.
inline WaveField synthesize_linear(const LinearWaveSpec& spec, double t) {
    spec.validate();
    const auto& s = spec.sites;
    WaveField f;
    f.nu = s.nu();
    f.frequency = tangential_vector(s, spec.params, spec.gamma);
    f.angle.resize(f.nu);
    for (std::size_t a = 0; a < f.nu; ++a) f.angle[a] = f.frequency[a] * t;
    for (std::size_t a = 0; a < f.nu; ++a) {
        const double amp = std::sqrt(spec.amplitudes[a]);
        if (amp == 0.0) continue;
        const int ja = s.jvec()[a];
        const int n = s.nbar()[a];
        const double M = coeff_M(n, spec.params, spec.gamma);
        const double P = coeff_P(ja, spec.params, spec.gamma);
        // eta = M amp cos(phi_a - ja x), psi = -sigma_a P amp sin(phi_a - ja x)
        const double psi_amp = -s.sigma()[a] * P * amp;
        for (int sgn_l : {1, -1}) {
            auto& c = f.at(detail::unit(f.nu, a, sgn_l), -sgn_l * ja);
            c[0] += 0.5 * M * amp;
            c[1] += psi_amp * cplx(0.0, -0.5 * sgn_l);
        }
    }
    return f;
}

/// Collapse the torus dependence at the current angle: a field of x alone (nu = 0).
inline WaveField snapshot(const WaveField& f) {
    WaveField out;
    out.second = f.second;
    for (const auto& [key, c] : f.coeffs) {
        const cplx e = std::polar(1.0, f.angle.empty() ? 0.0 : dot(f.angle, key.ell));
        auto& d = out.at({}, key.j);
        d[0] += c[0] * e;
        d[1] += c[1] * e;
    }
    return out;
}

/// Symbol of the zero-at-zero inverse derivative.
inline cplx inverse_dx_symbol(int j) { return j == 0 ? cplx{} : cplx(0.0, -1.0 / j); }

/// zeta = psi - (gamma/2) dx^{-1} eta (forward) or its inverse.
inline WaveField wahlen(const WaveField& in, double gamma, bool forward = true) {
    require(in.second == (forward ? WaveField::Second::psi : WaveField::Second::zeta),
            "wahlen: field is not in the expected coordinates");
    WaveField out = in;
    out.second = forward ? WaveField::Second::zeta : WaveField::Second::psi;
    const double s = forward ? -0.5 * gamma : 0.5 * gamma;
    for (auto& [key, c] : out.coeffs) c[1] += s * inverse_dx_symbol(key.j) * c[0];
    return out;
}

/// z = (M^{-1} eta + i M zeta)/sqrt(2) mode by mode, from a real (eta, zeta) field.
inline ComplexField complexify(const WaveField& f, const DispersionParams& p, double gamma) {
    require(f.second == WaveField::Second::zeta, "complexify: expects (eta, zeta) coordinates");
    ComplexField z{f.nu, f.frequency, f.angle, {}};
    for (const auto& [key, c] : f.coeffs) {
        if (key.j == 0) continue;  // zero mode quotiented out
        const double M = coeff_M(key.j, p, gamma);
        z.z[key] = (c[0] / M + kI * M * c[1]) / std::sqrt(2.0);
    }
    return z;
}

/// Inverse of complexify: (eta, zeta) = M C (z, conj z).
inline WaveField decomplexify(const ComplexField& z, const DispersionParams& p, double gamma) {
    WaveField f{z.nu, z.frequency, z.angle, WaveField::Second::zeta, {}};
    auto mirror = [&](const ModeKey& k) {
        const auto it = z.z.find(ModeKey{negate(k.ell), -k.j});
        return it == z.z.end() ? cplx{} : std::conj(it->second);
    };
    auto add = [&](const ModeKey& key) {
        if (f.coeffs.count(key)) return;
        const double M = coeff_M(key.j, p, gamma);
        const auto it = z.z.find(key);
        const cplx zk = it == z.z.end() ? cplx{} : it->second;
        const cplx zb = mirror(key);
        f.coeffs[key] = {M * (zk + zb) / std::sqrt(2.0), -kI * (zk - zb) / (M * std::sqrt(2.0))};
    };
    for (const auto& [key, v] : z.z) {
        add(key);
        add(ModeKey{negate(key.ell), -key.j});
    }
    return f;
}

/// Diagonal flow z_j(t) = exp(-i Omega_j t) z_j(0) on x-only data.
inline ComplexField evolve_linear(const ComplexField& z0, double t, const DispersionParams& p, double gamma) {
    require(z0.nu == 0, "evolve_linear: expects x-only complex data");
    ComplexField z = z0;
    for (auto& [key, v] : z.z) v *= std::polar(1.0, -Omega_j(key.j, p, gamma) * t);
    return z;
}

struct ReversibilityReport {
    bool reversible;
    double defect;
};

/// Defect ||u - S u|| for the involution (eta, psi)(phi, x) -> (eta, -psi)(-phi, -x).
inline ReversibilityReport check_reversible(const WaveField& f, double tol = 1e-12) {
    double s = 0.0;
    for (const auto& [key, c] : f.coeffs) {
        const auto it = f.coeffs.find(ModeKey{negate(key.ell), -key.j});
        const std::array<cplx, 2> m = it == f.coeffs.end() ? std::array<cplx, 2>{} : it->second;
        s += std::norm(c[0] - m[0]) + std::norm(c[1] + m[1]);
    }
    const double d = std::sqrt(s);
    return {d <= tol, d};
}

/// In complex coordinates the involution is z_j -> conj(z_j).
inline ReversibilityReport check_reversible(const ComplexField& z, double tol = 1e-12) {
    double s = 0.0;
    for (const auto& [key, v] : z.z) s += std::norm(v - std::conj(v));
    const double d = std::sqrt(s);
    return {d <= tol, d};
}

/// Normalized L2 norm of the residual of
///   eta_t = G(0) psi,   psi_t = -g eta + gamma dx^{-1} G(0) psi
/// along the path angle(t) = angle + frequency t, at the field's current angle.
inline double residual_linear_system(const WaveField& f, const DispersionParams& p, double gamma) {
    require(f.second == WaveField::Second::psi, "residual: expects (eta, psi) coordinates");
    WaveField r = f;
    for (auto& [key, c] : r.coeffs) {
        const cplx dt = kI * (f.frequency.empty() ? 0.0 : dot(f.frequency, key.ell));
        const auto& src = f.coeffs.at(key);
        if (key.j == 0) {
            c = {dt * src[0], dt * src[1] + p.g * src[0]};
            continue;
        }
        const double G = symbol_G0(key.j, p.depth);
        c[0] = dt * src[0] - G * src[1];
        c[1] = dt * src[1] + p.g * src[0] - gamma * inverse_dx_symbol(key.j) * G * src[1];
    }
    return detail::l2(snapshot(r).coeffs);
}

inline double field_norm(const WaveField& f) { return detail::l2(snapshot(f).coeffs); }

// ---------------------------------------------------------------------------
// Action-angle description of the tangential part.

struct ActionAngle {
    RealVec theta;   // angles
    RealVec action;  // I_a
    WaveField normal;  // (eta, zeta) component in the normal subspace
};

/// Split an x-only (eta, zeta) field into tangential action-angle variables and the normal part.
inline ActionAngle aa_coordinates(const WaveField& f, const TangentialSites& sites, const RealVec& xi,
                                  const DispersionParams& p, double gamma) {
    require(f.nu == 0, "aa_coordinates: expects an x-only field");
    require(xi.size() == sites.nu(), "aa_coordinates: one amplitude per site required");
    ComplexField z = complexify(f, p, gamma);
    ActionAngle out;
    out.theta.assign(sites.nu(), 0.0);
    out.action.assign(sites.nu(), 0.0);
    for (std::size_t a = 0; a < sites.nu(); ++a) {
        const ModeKey key{{}, sites.jvec()[a]};
        const auto it = z.z.find(key);
        const cplx za = it == z.z.end() ? cplx{} : it->second;
        out.action[a] = 2.0 * kPi * std::norm(za) - xi[a];
        out.theta[a] = -std::arg(za);
        if (it != z.z.end()) z.z.erase(it);
    }
    out.normal = decomplexify(z, p, gamma);
    return out;
}

/// Inverse of aa_coordinates: tangential torus point plus the normal component.
inline WaveField aa_embed(const ActionAngle& aa, const TangentialSites& sites, const RealVec& xi,
                          const DispersionParams& p, double gamma) {
    require(xi.size() == sites.nu() && aa.action.size() == sites.nu(), "aa_embed: size mismatch");
    ComplexField z = aa.normal.coeffs.empty() ? ComplexField{} : complexify(aa.normal, p, gamma);
    for (std::size_t a = 0; a < sites.nu(); ++a) {
        require(std::abs(aa.action[a]) < xi[a] || (aa.action[a] == 0.0 && xi[a] == 0.0),
                "aa_embed: action exceeds the amplitude bound |I| < xi");
        const double r = std::sqrt((aa.action[a] + xi[a]) / (2.0 * kPi));
        z.z[ModeKey{{}, sites.jvec()[a]}] = std::polar(r, -aa.theta[a]);
    }
    return decomplexify(z, p, gamma);
}

/// Energy matrix of the Wahlen system for mode j, acting on (eta_j, zeta_j).
inline std::array<std::array<cplx, 2>, 2> wahlen_energy_symbol(int j, const DispersionParams& p, double gamma) {
    const double G = symbol_G0(j, p.depth);
    const cplx off = kI * (0.5 * gamma * G / j);
    return {{{p.g + 0.25 * gamma * gamma * G / (double(j) * j), off}, {-off, G}}};
}

/// Real L2 pairing (u, Omega_W v) of two x-only (eta, zeta) fields, per unit length.
inline double energy_pairing(const WaveField& u, const WaveField& v, const DispersionParams& p, double gamma) {
    double s = 0.0;
    for (const auto& [key, c] : v.coeffs) {
        if (key.j == 0) continue;
        const auto it = u.coeffs.find(key);
        if (it == u.coeffs.end()) continue;
        const auto W = wahlen_energy_symbol(key.j, p, gamma);
        const cplx w0 = W[0][0] * c[0] + W[0][1] * c[1];
        const cplx w1 = W[1][0] * c[0] + W[1][1] * c[1];
        s += (std::conj(it->second[0]) * w0 + std::conj(it->second[1]) * w1).real();
    }
    return s;
}

// ---------------------------------------------------------------------------
// Export

inline void write_field_csv(std::ostream& os, const WaveField& f, int samples) {
    os << "x,first,second\n";
    os.precision(17);
    for (int k = 0; k < samples; ++k) {
        const double x = 2.0 * kPi * k / samples;
        const auto v = f.evaluate(x);
        os << x << ',' << v[0] << ',' << v[1] << '\n';
    }
}

}  // namespace vortexkam
