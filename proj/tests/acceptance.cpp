// End-to-end acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.
// Independent reference values come from oracles.hpp and kam_oracle.hpp.

#include <chrono>
#include <cstdio>
#include <functional>

#include "kam_oracle.hpp"
#include "oracles.hpp"
#include "vortexkam/cli.hpp"

using namespace vortexkam;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// Closed-form frequency written from the dispersion relation with the oracle symbol.
double oracle_Omega(int j, double g, double h, double gamma) {
    const double G = oracle::dn_symbol(j, g, h);
    const double drift = gamma * G / (2.0 * j);
    return std::sqrt(g * G + drift * drift) + drift;
}

// ---------------------------------------------------------------------------

Outcome dispersion_spectrum() {
    const int K = 32;
    double worst = 0.0;
    for (double gamma : {0.0, 1.0, 2.0})
        for (double h : {0.0, 1.0}) {
            const DispersionParams p{1.0, h > 0 ? Depth::finite(h) : Depth::infinite(), 0.0, 2.0};
            const auto eig = oracle::wahlen_spectrum(K, 1.0, gamma, h);
            RealVec expect;
            for (int j = -K; j <= K; ++j)
                if (j != 0) {
                    expect.push_back(Omega_j(j, p, gamma));
                    expect.push_back(-Omega_j(j, p, gamma));
                }
            std::sort(expect.begin(), expect.end());
            if (eig.size() != expect.size()) return {false, "eigenvalue count mismatch"};
            for (std::size_t k = 0; k < eig.size(); ++k) worst = std::max(worst, std::abs(eig[k] - expect[k]));
        }
    return {worst <= 1e-9, fmt("max |eig - Omega| = %.3e over 6 parameter sets", worst)};
}

Outcome linear_residual() {
    CounterRng rng(2024, 0);
    double worst_lib = 0.0, worst_fd = 0.0, worst_rev = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        int a = 1 + static_cast<int>(rng.next_uniform() * 6), b;
        do b = 1 + static_cast<int>(rng.next_uniform() * 6);
        while (b == a);
        if (a > b) std::swap(a, b);
        const TangentialSites sites({a, b}, {rng.next_uniform() < 0.5 ? 1 : -1, rng.next_uniform() < 0.5 ? 1 : -1});
        const double gamma = rng.next_uniform(0.0, 2.0);
        const double h = rng.next_uniform() < 0.5 ? 0.0 : rng.next_uniform(0.5, 3.0);
        const double g = 1.0;
        const DispersionParams p{g, h > 0 ? Depth::finite(h) : Depth::infinite(), 0.0, 2.0};
        const LinearWaveSpec spec{sites, {rng.next_uniform(0.01, 1.0), rng.next_uniform(0.01, 1.0)}, p, gamma};
        const double t = rng.next_uniform(0.0, 100.0);
        const auto f = synthesize_linear(spec, t);
        worst_lib = std::max(worst_lib, residual_linear_system(f, p, gamma));
        worst_rev = std::max(worst_rev, check_reversible(f).defect);

        // Second route: time derivative of the physical Fourier coefficients by Richardson
        // extrapolation, operator applied with the oracle symbol.
        const auto snap = snapshot(f);
        for (const auto& [key, c] : snap.coeffs) {
            auto coeff = [&](double s, int comp, bool imag) {
                const auto& cc = snapshot(synthesize_linear(spec, s)).coeffs.at(key)[comp];
                return imag ? cc.imag() : cc.real();
            };
            cplx dt[2];
            for (int comp = 0; comp < 2; ++comp)
                dt[comp] = {oracle::richardson_derivative([&](double s) { return coeff(s, comp, false); }, t, 1, 1e-2),
                            oracle::richardson_derivative([&](double s) { return coeff(s, comp, true); }, t, 1, 1e-2)};
            const double G = oracle::dn_symbol(key.j, g, h);
            const cplx r0 = dt[0] - G * c[1];
            const cplx r1 = dt[1] + g * c[0] - gamma * cplx(0.0, -1.0 / key.j) * G * c[1];
            worst_fd = std::max({worst_fd, std::abs(r0), std::abs(r1)});
        }
    }
    const bool ok = worst_lib <= 1e-10 && worst_fd <= 1e-10 && worst_rev <= 1e-12;
    return {ok, fmt("spectral residual %.3e, finite-difference residual %.3e, reversibility defect %.1e (20 times)",
                    worst_lib, worst_fd, worst_rev)};
}

Outcome vandermonde() {
    double worst = 0.0;
    bool nonzero = true;
    const std::vector<IntVec> lists{{1}, {1, 2}, {1, 2, 3}, {2, -5, 7, 3}, {1, 2, 3, 4, 5}, {-4, 1, 9, 6, 2}};
    for (double h : {0.0, 0.7, 3.0})
        for (double g : {1.0, 9.81})
            for (const auto& js : lists) {
                const DispersionParams p{g, h > 0 ? Depth::finite(h) : Depth::infinite(), 0.0, 1.0};
                const std::size_t N = js.size();
                // Jet matrix from the power-series route at gamma = 0.
                Eigen::MatrixXd A(N, N);
                for (std::size_t a = 0; a < N; ++a) {
                    const RealVec d = Omega_jet(js[a], 2 * static_cast<int>(N), p, 0.0);
                    for (std::size_t n = 0; n < N; ++n) A(n, a) = d[2 * (n + 1)];
                }
                const double det = A.partialPivLu().determinant();
                // Closed product assembled from scratch.
                double prod = 1.0;
                for (std::size_t n = 1; n <= N; ++n) {
                    double c = 1.0;
                    for (std::size_t k = 0; k < n; ++k) c *= (0.5 - k) / (k + 1);
                    for (std::size_t k = 1; k <= 2 * n; ++k) c *= k;
                    prod *= c / std::pow(4.0 * g, n);
                }
                RealVec f(N);
                for (std::size_t a = 0; a < N; ++a) {
                    const double G = oracle::dn_symbol(js[a], g, h);
                    f[a] = G / (double(js[a]) * js[a]);
                    prod *= std::sqrt(g * G) * f[a];
                }
                for (std::size_t q = 0; q < N; ++q)
                    for (std::size_t r = 0; r < q; ++r) prod *= f[q] - f[r];
                const auto lib = jet_matrix_det0(js, p);
                nonzero = nonzero && det != 0.0 && prod != 0.0;
                worst = std::max({worst, std::abs(det - prod) / std::abs(prod),
                                  std::abs(lib.from_jets - prod) / std::abs(prod),
                                  std::abs(lib.from_product - prod) / std::abs(prod)});
            }
    return {worst <= 1e-10 && nonzero, fmt("max relative deviation %.3e over %zu site lists, all nonzero: %s", worst,
                                           3 * 2 * lists.size(), nonzero ? "yes" : "no")};
}

Outcome transversality() {
    const TangentialSites sites({1, 2}, {1, 1});
    const DispersionParams p{1.0, Depth::infinite(), 0.5, 1.5};
    std::string detail;
    bool ok = true;
    double worst_cross = 0.0;
    for (auto kind : {TupleKind::zero, TupleKind::first, TupleKind::second_minus, TupleKind::second_plus}) {
        const auto rep = verify_transversality(sites, p, kind, 20, 40, 5);
        ok = ok && rep.ok() && rep.m0 <= 5 && rep.rho0 > 0.0;
        detail += fmt("%s m0=%d rho0=%.3e; ", to_string(kind).c_str(), rep.m0, rep.rho0);
        if (!rep.ok()) continue;
        // The reported minimizer belongs to the bound of order m0. Recompute that bound there
        // from finite differences of the closed-form frequencies.
        const auto& t = rep.worst_tuple;
        auto divisor = [&](double gamma) {
            double v = 0.0;
            for (std::size_t a = 0; a < t.ell.size(); ++a) v += t.ell[a] * oracle_Omega(sites.jvec()[a], 1.0, 0.0, gamma);
            if (kind != TupleKind::zero) v += oracle_Omega(t.j, 1.0, 0.0, gamma);
            if (kind == TupleKind::second_minus) v -= oracle_Omega(t.jprime, 1.0, 0.0, gamma);
            if (kind == TupleKind::second_plus) v += oracle_Omega(t.jprime, 1.0, 0.0, gamma);
            return v;
        };
        double bound = std::abs(divisor(rep.worst_gamma));
        for (int n = 1; n <= rep.m0; ++n)
            bound = std::max(bound, std::abs(oracle::richardson_derivative(divisor, rep.worst_gamma, n, 0.05)));
        bound /= bracket(t.ell);
        const double at_m0 = rep.rho_by_order[rep.m0];
        worst_cross = std::max(worst_cross, std::abs(bound - at_m0) / at_m0);
    }
    ok = ok && worst_cross <= 1e-4;
    return {ok, detail + fmt("finite-difference recheck rel. dev. %.1e", worst_cross)};
}

// ---------------------------------------------------------------------------
// Criteria 5-7 run through the same report builders as the command-line tool.

RunConfig measure_config() {
    RunConfig c;
    c.dispersion.g = 9.81;
    c.dispersion.gamma_lo = 0.0;
    c.dispersion.gamma_hi = 1.0;
    return c;  // measure section defaults: eps 1e-3, 2^-4 .. 2^-10, cutoffs 4 / 30, grid 4096
}

RunConfig default_config() { return RunConfig{}; }

Outcome measure_scaling(const Json& m) {
    const auto& scan = m["scan"];
    std::string unions;
    for (const auto& row : scan) unions += fmt("%.3g ", row["union"].get<double>());
    const bool monotone = m["monotone"].get<bool>();
    const bool fitted = !m["fit"].is_null();
    const double resid = fitted ? m["fit"]["max_residual"].get<double>() : 1e300;
    const double C = fitted ? m["fit"]["constant"].get<double>() : 0.0;
    const int m0 = m["m0"].get<int>();
    // Bound with the single fitted constant, checked at every upsilon.
    bool bounded = fitted;
    if (fitted)
        for (const auto& row : scan) {
            const double u = row["upsilon"].get<double>();
            bounded = bounded && row["union"].get<double>() <= C * std::pow(u, 1.0 / m0) * std::exp(resid) * (1 + 1e-12);
        }
    const auto& zero = m["unperturbed"];
    const double ustar = zero["upsilon_threshold"].get<double>();
    const bool zero_ok = zero["all_zero"].get<bool>() && ustar > 0.0;
    const bool ok = monotone && fitted && resid <= 0.15 && bounded && zero_ok;
    return {ok, fmt("m0=%d union=[%s] fit C=%.3g log-residual %.3f; eps=0 empty below %.4g (%zu checks)", m0,
                    unions.c_str(), C, resid, ustar, zero["checked"].size())};
}

Outcome straightening(const Json& s) {
    const auto norms = s["norms"].get<RealVec>();
    const auto ratios = s["ratios"].get<RealVec>();
    bool decreasing = norms.size() == 5;
    for (std::size_t n = 1; n < norms.size(); ++n) decreasing = decreasing && norms[n] < norms[n - 1];
    bool super = ratios.size() >= 2;
    for (std::size_t n = 1; n < ratios.size(); ++n) super = super && ratios[n] < ratios[n - 1];
    bool structure = true;
    for (const auto& st : s["steps"])
        for (const char* key : {"p", "g", "beta"})
            for (const char* prop : {"hermitian", "parity", "momentum"})
                structure = structure && st["structure"][key][prop].get<bool>();
    const double resid = s["conjugacy_residual"].get<double>(), tail = s["tail"].get<double>();
    const bool ok = decreasing && super && structure && resid <= 1e-8 + tail && !s["diverged"].get<bool>();
    std::string ns;
    for (double v : norms) ns += fmt("%.3e ", v);
    return {ok, fmt("norms [%s] conjugacy %.3e <= 1e-8 + tail %.3e, structure %s", ns.c_str(), resid, tail,
                    structure ? "exact" : "broken")};
}

// r_j reality through the complex-arithmetic route on a small truncation with the same
// normal form, frequency and schedule.
Outcome reality_oracle(const RunConfig& cfg, double& worst_imag, double& worst_agree) {
    const auto sites = make_sites(cfg.sites);
    const auto disp = make_dispersion(cfg.dispersion);
    const auto& k = cfg.reduction;
    const int Lop = 2, J = 6;
    const auto nf = NormalForm::initial(sites, disp, k.gamma, k.m1, k.m_half, k.m0, J);
    const RealVec omega = tangential_vector(sites, disp, k.gamma);
    const KamLattice lat(sites, Lop, J);
    const auto tables = build_remainder(sites, Lop, J, {k.eps, k.ell_decay, k.j_decay, cfg.seed});
    const auto sched = make_schedule(k.schedule);
    KamState st = build_L0(nf, lat, tables);
    auto op = kam_oracle::build(sites, tables, nf, omega, Lop);
    worst_imag = worst_agree = 0.0;
    for (int n = 0; n < sched.nbar; ++n) {
        auto rs = kam_step(lat, st, omega, sched, n);
        auto cs = kam_oracle::step(sites, op, nf, sched.upsilon, sched.tau, sched.scale(n));
        for (const auto& [j, r] : cs.corrections) {
            worst_imag = std::max(worst_imag, std::abs(r.imag()));
            worst_agree = std::max(worst_agree, std::abs(r.real() - rs.corrections.at(j)));
        }
        worst_agree = std::max(worst_agree, kam_oracle::compare(lat, rs.next.R, cs.next));
        st = std::move(rs.next);
        op = std::move(cs.next);
    }
    return {worst_imag <= 1e-12 && worst_agree <= 1e-12, ""};
}

Outcome kam_reduction(const Json& r, const RunConfig& cfg) {
    if (r.value("diverged", true)) return {false, "reduction diverged"};
    const auto norms = r["offdiag_norms"].get<RealVec>();
    const double conj = r["conjugacy_residual"].get<double>();
    bool structure = true;
    for (const auto& st : r["steps"]) structure = structure && st["structure_ok"].get<bool>();
    double imag = 0.0, agree = 0.0;
    const bool real_ok = reality_oracle(cfg, imag, agree).pass;
    const bool ok = norms.size() == 4 && norms.back() <= 1e-6 && conj <= 1e-10 && structure && real_ok;
    std::string ns;
    for (double v : norms) ns += fmt("%.3e ", v);
    return {ok, fmt("off-diagonal norms [%s] conjugacy %.2e, structure %s, small-instance complex route: "
                    "imag(r_j) %.1e, agreement %.1e",
                    ns.c_str(), conj, structure ? "exact" : "broken", imag, agree)};
}

Outcome eigen_weight(const Json& r, double eps) {
    if (r.value("diverged", true)) return {false, "reduction diverged"};
    // Recompute the weighted drift from the reported eigenvalue table.
    double recomputed = 0.0;
    for (const auto& row : r["mu"]) {
        const int j = row["j"].get<int>();
        recomputed = std::max(recomputed, std::sqrt(std::abs(double(j))) *
                                              std::abs(row["final"].get<double>() - row["initial"].get<double>()));
    }
    const double reported = r["eigen_weight"].get<double>();
    const bool ok = recomputed <= 10.0 * eps && std::abs(recomputed - reported) <= 1e-15 + 1e-12 * reported;
    return {ok, fmt("sup |j|^1/2 |mu_final - mu_initial| = %.3e (reported %.3e) vs 10 eps = %.1e", recomputed,
                    reported, 10.0 * eps)};
}

}  // namespace

int main() {
    set_thread_budget(thread_budget());
    int failures = 0;
    auto report = [&](int id, const char* name, double limit, const std::function<Outcome()>& body) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = body();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = limit <= 0.0 || secs < limit;
        const bool pass = o.pass && in_time;
        if (!pass) ++failures;
        std::printf("[%s] criterion %d (%s): %s; %.2f s%s\n", pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs,
                    in_time ? "" : " (over time limit)");
        std::fflush(stdout);
    };

    report(1, "dispersion spectrum", 5.0, dispersion_spectrum);
    report(2, "linear residual", 5.0, linear_residual);
    report(3, "jet determinant", 5.0, vandermonde);
    report(4, "transversality", 120.0, transversality);

    const RunConfig c5 = measure_config(), c67 = default_config();
    Json measure_json, straighten_json, reduce_json;
    report(5, "measure scaling", 120.0, [&] {
        measure_json = measure_report(c5).json;
        return measure_scaling(measure_json);
    });
    report(6, "straightening", 60.0, [&] {
        straighten_json = straighten_report(c67).json;
        return straightening(straighten_json);
    });
    const auto t7 = std::chrono::steady_clock::now();
    report(7, "KAM reduction", 120.0, [&] {
        reduce_json = reduce_report(c67).json;
        return kam_reduction(reduce_json, c67);
    });
    const double secs7 = std::chrono::duration<double>(std::chrono::steady_clock::now() - t7).count();
    report(8, "eigenvalue-correction weight", 0.0, [&] {
        auto o = eigen_weight(reduce_json, c67.reduction.eps);
        o.pass = o.pass && secs7 < 120.0;
        return o;
    });
    report(9, "determinism", 0.0, [&] {
        const bool same5 = io::to_text(measure_report(c5).json) == io::to_text(measure_json);
        const bool same6 = io::to_text(straighten_report(c67).json) == io::to_text(straighten_json);
        const bool same7 = io::to_text(reduce_report(c67).json) == io::to_text(reduce_json);
        return Outcome{same5 && same6 && same7, fmt("byte-identical reports: measure %s, straighten %s, reduce %s",
                                                    same5 ? "yes" : "no", same6 ? "yes" : "no", same7 ? "yes" : "no")};
    });

    std::printf("%d of 9 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
