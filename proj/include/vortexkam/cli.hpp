#pragma once

// Subcommand runners shared by the command-line tool and the tests. Each runner turns a
// validated configuration into a JSON report plus auxiliary text files; nothing here reads
// the clock, so equal configurations give byte-identical reports.

#include <bit>
#include <chrono>

#include "config.hpp"
#include "dispersion.hpp"
#include "io.hpp"
#include "kam_reduce.hpp"
#include "linear_waves.hpp"
#include "measure.hpp"
#include "straightening.hpp"
#include "transversality.hpp"

namespace vortexkam {

enum ExitCode : int { kExitOk = 0, kExitValidation = 2, kExitDivergence = 3 };

struct Report {
    std::string name;  // base name of the JSON file
    Json json;
    std::map<std::string, std::string> files;  // additional outputs, name -> content
    int exit_code = kExitOk;
};

inline const std::vector<std::string>& subcommands() {
    static const std::vector<std::string> names{"dispersion", "synth",   "transversality", "measure",
                                                "straighten", "reduce", "all"};
    return names;
}

namespace detail {

inline Json ints(const IntVec& v) { return Json(std::vector<int>(v.begin(), v.end())); }

inline Json tuple_json(const MomentumTuple& t) {
    return {{"l", ints(t.ell)}, {"j", t.j}, {"jprime", t.jprime}, {"kind", to_string(t.kind)}};
}

inline std::string csv_number(double x) {
    std::string s = io::format_double(x);
    if (!s.empty() && s.front() == '"') s = s.substr(1, s.size() - 2);
    return s;
}

inline RealVec ratios(const RealVec& v) {
    RealVec r;
    for (std::size_t n = 1; n < v.size(); ++n) r.push_back(v[n - 1] > 0.0 ? v[n] / v[n - 1] : 0.0);
    return r;
}

inline bool strictly_decreasing(const RealVec& v) {
    for (std::size_t n = 1; n < v.size(); ++n)
        if (!(v[n] < v[n - 1])) return false;
    return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------

inline Report dispersion_report(const RunConfig& cfg) {
    const auto p = make_dispersion(cfg.dispersion);
    const auto sites = make_sites(cfg.sites);
    const int K = cfg.dispersion.modes;
    const int S = cfg.dispersion.gamma_samples;
    Report r{"dispersion", Json::object(), {}, kExitOk};
    r.json["g"] = p.g;
    r.json["depth"] = cfg.dispersion.depth ? Json(*cfg.dispersion.depth) : Json("infinite");
    r.json["modes"] = K;
    r.json["samples"] = Json::array();
    std::ostringstream csv;
    csv << "gamma,j,Omega,omega,dgamma_Omega\n";
    for (int s = 0; s < S; ++s) {
        const double gamma = S == 1 ? p.gamma_lo : p.gamma_lo + (p.gamma_hi - p.gamma_lo) * s / (S - 1);
        Json row{{"gamma", gamma}, {"tangential", tangential_vector(sites, p, gamma)}, {"modes", Json::array()}};
        for (int j = -K; j <= K; ++j) {
            if (j == 0) continue;
            const double Om = Omega_j(j, p, gamma), om = omega_j(j, p, gamma), dOm = dgamma_Omega(j, 1, p, gamma);
            row["modes"].push_back({{"j", j}, {"Omega", Om}, {"omega", om}, {"dgamma_Omega", dOm}});
            csv << detail::csv_number(gamma) << ',' << j << ',' << detail::csv_number(Om) << ','
                << detail::csv_number(om) << ',' << detail::csv_number(dOm) << '\n';
        }
        r.json["samples"].push_back(std::move(row));
    }
    r.files["dispersion.csv"] = csv.str();
    return r;
}

inline Report synth_report(const RunConfig& cfg) {
    LinearWaveSpec spec{make_sites(cfg.sites), make_amplitudes(cfg.sites), make_dispersion(cfg.dispersion),
                        cfg.synth.gamma};
    Report r{"synth", Json::object(), {}, kExitOk};
    r.json["gamma"] = spec.gamma;
    r.json["frequency"] = tangential_vector(spec.sites, spec.params, spec.gamma);
    r.json["snapshots"] = Json::array();
    for (std::size_t k = 0; k < cfg.synth.times.size(); ++k) {
        const double t = cfg.synth.times[k];
        const auto f = synthesize_linear(spec, t);
        Json snap{{"t", t},
                  {"residual", residual_linear_system(f, spec.params, spec.gamma)},
                  {"reversibility_defect", check_reversible(f).defect},
                  {"norm", field_norm(f)},
                  {"coefficients", Json::array()}};
        for (const auto& [key, c] : f.coeffs)
            for (int comp = 0; comp < 2; ++comp)
                snap["coefficients"].push_back({{"l", detail::ints(key.ell)},
                                                {"j", key.j},
                                                {"component", comp == 0 ? "eta" : "psi"},
                                                {"re", c[comp].real()},
                                                {"im", c[comp].imag()}});
        r.json["snapshots"].push_back(std::move(snap));
        std::ostringstream csv;
        write_field_csv(csv, snapshot(f), cfg.synth.samples);
        r.files["synth_t" + std::to_string(k) + ".csv"] = csv.str();
    }
    return r;
}

inline Report transversality_report(const RunConfig& cfg) {
    const auto sites = make_sites(cfg.sites);
    const auto p = make_dispersion(cfg.dispersion);
    const auto& t = cfg.transversality;
    Report r{"transversality", Json::object(), {}, kExitOk};
    r.json["gamma_interval"] = {p.gamma_lo, p.gamma_hi};
    r.json["ell_max"] = t.ell_max;
    r.json["j_max"] = t.j_max;
    r.json["families"] = Json::array();
    int m0 = 0;
    bool all_ok = true;
    for (const auto& name : t.kinds) {
        const auto rep = verify_transversality(sites, p, tuple_kind_from_string(name), t.ell_max, t.j_max, t.m0_max,
                                               t.grid, t.positivity_floor);
        all_ok = all_ok && rep.ok();
        m0 = std::max(m0, rep.m0);
        Json fam{{"kind", to_string(rep.kind)},     {"m0", rep.m0},
                 {"rho0", rep.rho0},                {"margins", rep.rho_by_order},
                 {"worst_tuple", detail::tuple_json(rep.worst_tuple)},
                 {"worst_gamma", rep.worst_gamma}, {"tuples", rep.tuple_count},
                 {"gamma_grid", rep.gamma_grid}};
        if (rep.kind == TupleKind::second_plus) fam["tail_margin"] = rep.tail_margin;
        r.json["families"].push_back(std::move(fam));
    }
    r.json["all_positive"] = all_ok;
    r.json["m0"] = all_ok ? m0 : -1;
    return r;
}

/// Non-degeneracy index used by the measure run: configured, or derived from the jets on the
/// measure cutoffs (at least 1).
inline int measure_m0(const RunConfig& cfg, std::string& source) {
    if (cfg.measure.m0 > 0) {
        source = "config";
        return cfg.measure.m0;
    }
    const auto sites = make_sites(cfg.sites);
    const auto p = make_dispersion(cfg.dispersion);
    int m0 = 1;
    for (auto kind : {TupleKind::zero, TupleKind::first, TupleKind::second_minus, TupleKind::second_plus}) {
        const auto rep = verify_transversality(sites, p, kind, cfg.measure.ell_max, cfg.measure.j_max,
                                               cfg.transversality.m0_max, cfg.transversality.grid,
                                               cfg.transversality.positivity_floor);
        m0 = std::max(m0, rep.ok() ? rep.m0 : cfg.transversality.m0_max);
    }
    source = "transversality";
    return m0;
}

inline Report measure_report(const RunConfig& cfg) {
    const auto sites = make_sites(cfg.sites);
    const auto p = make_dispersion(cfg.dispersion);
    const auto& m = cfg.measure;
    PerturbedFrequencies fr = PerturbedFrequencies::standard(sites, p, m.eps);
    if (m.model == "random") {
        CounterRng rng(cfg.seed, 3);
        fr = PerturbedFrequencies::random(sites, p, m.eps, rng);
    }
    std::string m0_source;
    const int m0 = measure_m0(cfg, m0_source);
    RealVec ups;
    for (int k = m.k_min; k <= m.k_max; ++k) ups.push_back(std::ldexp(1.0, -k));
    auto base = DivisorParams::with_defaults(ups.front(), m0, sites.nu());
    if (cfg.divisors.tau) {
        base.tau = *cfg.divisors.tau;
        base.validate();
    }
    const MeasureCutoffs cut{m.ell_max, m.j_max, m.grid};
    const auto reps = complement_scan(fr, base, ups, cut, m0, m.C1);

    Report r{"measure", Json::object(), {}, kExitOk};
    r.json["eps"] = m.eps;
    r.json["model"] = m.model;
    r.json["m0"] = m0;
    r.json["m0_source"] = m0_source;
    r.json["tau"] = base.tau;
    r.json["tau0"] = base.tau0;
    r.json["cutoffs"] = {{"ell_max", cut.ell_max}, {"j_max", cut.j_max}, {"grid", cut.grid}};
    r.json["scan"] = Json::array();
    RealVec unions;
    std::ostringstream csv;
    csv << "upsilon,family,l,j,jprime,measure\n";
    for (const auto& rep : reps) {
        unions.push_back(rep.union_measure);
        Json row{{"upsilon", rep.divisors.upsilon},
                 {"upsilon0", rep.divisors.upsilon0},
                 {"union", rep.union_measure},
                 {"sum", rep.sum_measure},
                 {"tail_bound", rep.tail_bound},
                 {"inclusion_bound", rep.inclusion_bound},
                 {"grid_insufficient", rep.grid_insufficient},
                 {"inclusion",
                  {{"C1", rep.inclusion.C1},
                   {"above_threshold", rep.inclusion.above_threshold},
                   {"violations", rep.inclusion.violations},
                   {"transport_union", rep.inclusion.transport_union},
                   {"excluded_fraction", rep.inclusion.excluded_fraction}}},
                 {"families", Json::array()}};
        for (const auto& fs : rep.families)
            row["families"].push_back({{"family", to_string(fs.family)},
                                       {"tuples", fs.tuples},
                                       {"nonempty", fs.nonempty},
                                       {"filtered", fs.filtered},
                                       {"sum", fs.sum},
                                       {"union", fs.union_measure},
                                       {"fitted_constant", fs.fitted_constant},
                                       {"tail_bound", fs.tail_bound}});
        r.json["scan"].push_back(std::move(row));
        for (const auto& tm : rep.nonzero) {
            std::string l;
            for (std::size_t a = 0; a < tm.tuple.ell.size(); ++a) l += (a ? " " : "") + std::to_string(tm.tuple.ell[a]);
            csv << detail::csv_number(rep.divisors.upsilon) << ',' << to_string(tm.family) << ',' << l << ','
                << tm.tuple.j << ',' << tm.tuple.jprime << ',' << detail::csv_number(tm.measure) << '\n';
        }
    }
    r.files["measure.csv"] = csv.str();
    r.json["monotone"] = detail::strictly_decreasing(unions);
    bool positive = true;
    for (double u : unions) positive = positive && u > 0.0;
    if (positive && unions.size() >= 2) {
        const auto fit = fit_power_law(ups, unions, 1.0 / m0);
        r.json["fit"] = {{"exponent", fit.exponent},
                         {"constant", fit.constant},
                         {"max_residual", fit.max_residual},
                         {"rms_residual", fit.rms_residual},
                         {"free_slope", fit.free_slope}};
    } else {
        r.json["fit"] = nullptr;
    }

    {
        const auto at = complement_scan(fr, base, {cfg.divisors.upsilon}, cut, m0, m.C1).front();
        r.json["configured"] = {{"upsilon", cfg.divisors.upsilon},
                                {"union", at.union_measure},
                                {"sum", at.sum_measure},
                                {"tail_bound", at.tail_bound}};
    }

    // Unperturbed run: emptiness threshold on the small cutoffs, and the scan values below it.
    const auto fr0 = PerturbedFrequencies::unperturbed(sites, p);
    const MeasureCutoffs cut0{m.zero_ell_max, m.zero_j_max, m.grid};
    const double ustar = empty_below_upsilon(fr0, base.tau, cut0);
    RealVec below;
    for (double u : ups)
        if (u < ustar) below.push_back(u);
    if (ustar > 0.0 && std::isfinite(ustar)) below.push_back(0.5 * std::min(ustar, 1.0));
    Json zero{{"cutoffs", {{"ell_max", cut0.ell_max}, {"j_max", cut0.j_max}}},
              {"upsilon_threshold", ustar},
              {"full_cutoff_threshold", empty_below_upsilon(fr0, base.tau, cut)},
              {"checked", Json::array()}};
    bool all_zero = true;
    if (!below.empty()) {
        for (double& u : below) u = std::min(u, 0.99);
        const auto zreps = complement_scan(fr0, base, below, cut0, m0, m.C1);
        for (const auto& z : zreps) {
            zero["checked"].push_back({{"upsilon", z.divisors.upsilon}, {"measure", z.union_measure}});
            all_zero = all_zero && z.union_measure == 0.0;
        }
    }
    zero["all_zero"] = all_zero && !below.empty();
    r.json["unperturbed"] = std::move(zero);
    return r;
}

// ---------------------------------------------------------------------------

struct StraighteningRun {
    StraighteningHistory history;
    double conjugacy_residual = 0.0;
};

inline StraighteningRun run_straighten_config(const RunConfig& cfg) {
    const auto sites = make_sites(cfg.sites);
    const auto& s = cfg.straightening;
    CounterRng rng(cfg.seed, 0);
    const auto p0 = random_even_wave(sites, s.L, s.support, s.decay, s.s0, s.norm, rng);
    const RealVec omega = s.omega.empty() ? quadratic_irrational_frequency(sites.nu()) : RealVec(s.omega);
    StraighteningRun run{run_straightening(p0, omega, make_schedule(cfg.schedule), s.m1, s.s0), 0.0};
    CounterRng trng(cfg.seed, 1);
    std::vector<TravelingWaveFn> tests;
    for (int i = 0; i < s.tests; ++i) {
        TravelingWaveFn v(sites, s.test_L, Parity::none);
        for (const auto& e : lattice_box(sites.nu(), s.test_L))
            if (negate(e) < e) v.set(e, cplx(trng.next_normal(), trng.next_normal()));
        tests.push_back(std::move(v));
    }
    run.conjugacy_residual = verify_conjugacy(run.history.ops.front(), run.history.beta, run.history.ops.back(), tests);
    return run;
}

inline Json structure_json(const StructureReport& s) {
    return {{"hermitian", s.hermitian}, {"parity", s.parity}, {"momentum", s.momentum}};
}

inline Report straighten_report(const RunConfig& cfg) {
    const auto run = run_straighten_config(cfg);
    const auto& h = run.history;
    Report r{"straighten", Json::object(), {}, kExitOk};
    r.json["omega"] = h.ops.front().omega;
    r.json["s0"] = cfg.straightening.s0;
    r.json["norms"] = h.norms;
    r.json["ratios"] = detail::ratios(h.norms);
    r.json["steps"] = Json::array();
    for (std::size_t n = 0; n < h.steps.size(); ++n) {
        const auto& d = h.steps[n];
        const auto& p = h.ops[n + 1].p;
        Json norms = Json::object();
        for (int sv : {0, 1, 2, 3}) norms[std::to_string(sv)] = p.norm(sv);
        r.json["steps"].push_back({{"n", d.n},
                                   {"N", d.N},
                                   {"m1", d.m1},
                                   {"mean", d.mean},
                                   {"norm_s0", d.norm_s0},
                                   {"norms_by_s", std::move(norms)},
                                   {"norm_g", d.norm_g},
                                   {"min_margin", d.min_margin},
                                   {"nonresonant", d.nonresonant},
                                   {"damped_modes", d.damped_modes},
                                   {"leftover", d.leftover},
                                   {"loss", d.loss},
                                   {"inverse_residual", d.inverse_residual},
                                   {"structure",
                                    {{"p", structure_json(d.p_structure)},
                                     {"g", structure_json(d.g_structure)},
                                     {"beta", structure_json(d.beta_structure)}}}});
    }
    r.json["tail"] = h.tail;
    r.json["smallness"] = h.smallness;
    r.json["small_enough"] = h.small_enough;
    r.json["decay_constant"] = h.decay_constant;
    r.json["diverged"] = h.diverged;
    r.json["conjugacy_residual"] = run.conjugacy_residual;
    r.json["conjugacy_bound"] = 1e-8 + h.tail;
    if (cfg.straightening.profile_csv) {
        const int M = default_grid(cfg.straightening.L);
        const TorusGrid grid(h.ops.front().p.nu(), M);
        std::ostringstream csv;
        csv << "n,node,psi,value\n";
        for (std::size_t n = 0; n < h.ops.size(); ++n) {
            const RealVec v = grid.values(h.ops[n].p);
            for (std::size_t k = 0; k < grid.size(); ++k) {
                const RealVec psi = grid.node(k);
                std::string coords;
                for (std::size_t a = 0; a < psi.size(); ++a) coords += (a ? " " : "") + detail::csv_number(psi[a]);
                csv << n << ',' << k << ',' << coords << ',' << detail::csv_number(v[k]) << '\n';
            }
        }
        r.files["straighten_profiles.csv"] = csv.str();
    }
    if (h.diverged) r.exit_code = kExitDivergence;
    return r;
}

// ---------------------------------------------------------------------------

struct ReductionRun {
    KamLattice lattice;
    KamState L0;
    RealVec omega;
    ReductionHistory history;
};

inline ReductionRun run_reduce_config(const RunConfig& cfg) {
    const auto sites = make_sites(cfg.sites);
    const auto disp = make_dispersion(cfg.dispersion);
    const auto& k = cfg.reduction;
    const auto nf = NormalForm::initial(sites, disp, k.gamma, k.m1, k.m_half, k.m0, k.J);
    const RealVec omega = k.omega.empty() ? tangential_vector(sites, disp, k.gamma) : RealVec(k.omega);
    KamLattice lat(sites, k.Lop, k.J);
    RemainderSpec spec{k.eps, k.ell_decay, k.j_decay, cfg.seed};
    const auto tables = build_remainder(sites, k.Lop, k.J, spec);
    auto L0 = build_L0(nf, lat, tables);
    auto h = run_reduction(lat, L0, omega, make_schedule(k.schedule), k.eps, k.x_norm_guard);
    return {std::move(lat), std::move(L0), omega, std::move(h)};
}

/// Block-wise little-endian dump of the accumulated U and the final remainder.
inline std::string reduction_dump(const ReductionRun& run) {
    static_assert(std::endian::native == std::endian::little, "dump layout assumes a little-endian host");
    std::string out;
    auto put = [&](const auto& v) { out.append(reinterpret_cast<const char*>(&v), sizeof v); };
    out += "VKAMDUMP";
    put(std::int32_t(run.lattice.Lop()));
    put(std::int32_t(run.lattice.J()));
    put(std::int32_t(run.lattice.sites().nu()));
    put(std::int32_t(run.lattice.blocks().size()));
    for (std::size_t b = 0; b < run.lattice.blocks().size(); ++b) {
        const auto& blk = run.lattice.blocks()[b];
        const auto n = static_cast<std::int32_t>(blk.size());
        put(std::int64_t(blk.p));
        put(n);
        for (const auto& s : blk.states) {
            for (int l : s.ell) put(std::int32_t(l));
            put(std::int32_t(s.j));
            put(std::int32_t(s.conj ? 1 : 0));
        }
        const auto& U = run.history.U[b];
        const auto& R = run.history.final_state.R[b];
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                put(U(i, j));
                put(0.0);
            }
        // Remainder entries are i times the stored real values.
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                put(0.0);
                put(R(i, j));
            }
    }
    return out;
}

inline Json melnikov_json(const MelnikovRecord& m) {
    return {{"difference_checked", m.difference_checked},
            {"difference_violated", m.difference_violated},
            {"sum_checked", m.sum_checked},
            {"sum_violated", m.sum_violated},
            {"damped", m.damped},
            {"min_difference_margin", m.min_difference_margin},
            {"min_sum_margin", m.min_sum_margin}};
}

inline Report reduce_report(const RunConfig& cfg) {
    Report r{"reduce", Json::object(), {}, kExitOk};
    const auto& k = cfg.reduction;
    r.json["truncation"] = {{"Lop", k.Lop}, {"J", k.J}};
    r.json["eps"] = k.eps;
    ReductionRun run{KamLattice(make_sites(cfg.sites), k.Lop, k.J), {}, {}, {}};
    try {
        run = run_reduce_config(cfg);
    } catch (const DivergenceError& e) {
        r.json["diverged"] = true;
        r.json["error"] = e.what();
        r.exit_code = kExitDivergence;
        return r;
    }
    const auto& h = run.history;
    std::size_t max_block = 0;
    for (const auto& b : run.lattice.blocks()) max_block = std::max(max_block, b.size());
    r.json["lattice"] = {{"blocks", run.lattice.blocks().size()},
                         {"states", run.lattice.total_states()},
                         {"max_block", max_block}};
    r.json["omega"] = run.omega;
    r.json["smallness"] = h.smallness;
    r.json["offdiag_norms"] = h.offdiag_norms;
    r.json["ratios"] = detail::ratios(h.offdiag_norms);
    r.json["steps"] = Json::array();
    for (const auto& d : h.steps)
        r.json["steps"].push_back({{"n", d.n},
                                   {"N", d.melnikov.N},
                                   {"melnikov", melnikov_json(d.melnikov)},
                                   {"x_norm", d.x_norm},
                                   {"offdiag_before", d.before.weighted},
                                   {"offdiag_after", d.after.weighted},
                                   {"frobenius_after", d.after.frobenius},
                                   {"spectral_after", d.after.spectral},
                                   {"max_correction", d.max_correction},
                                   {"weighted_correction", d.weighted_correction},
                                   {"toeplitz_defect", d.toeplitz_defect},
                                   {"structure_ok", d.structure_ok}});
    r.json["eigen_drift"] = h.eigen_drift;
    r.json["eigen_weight"] = h.eigen_weight;
    r.json["conjugacy_residual"] = h.conjugacy_residual;
    r.json["quadratic_constant"] = h.quadratic_constant;
    r.json["diverged"] = h.diverged;
    Json mu = Json::array();
    for (const auto& [j, v] : h.final_state.normal.mu)
        mu.push_back({{"j", j}, {"initial", h.normals.front().at(j)}, {"final", v}});
    r.json["mu"] = std::move(mu);
    if (k.dump) r.files["reduce_dump.bin"] = reduction_dump(run);
    if (h.diverged) r.exit_code = kExitDivergence;
    return r;
}

// ---------------------------------------------------------------------------

inline Report make_report(const std::string& sub, const RunConfig& cfg) {
    if (sub == "dispersion") return dispersion_report(cfg);
    if (sub == "synth") return synth_report(cfg);
    if (sub == "transversality") return transversality_report(cfg);
    if (sub == "measure") return measure_report(cfg);
    if (sub == "straighten") return straighten_report(cfg);
    if (sub == "reduce") return reduce_report(cfg);
    throw ValidationError("unknown subcommand '" + sub + "'");
}

/// Runs one subcommand (or all of them) and writes the artifact directory. Returns the exit code.
inline int run_subcommand(const std::string& sub, const RunConfig& cfg, const std::filesystem::path& outdir) {
    io::ArtifactWriter out(outdir);
    out.write_json("config.json", to_json(cfg));
    std::vector<std::string> plan;
    if (sub == "all")
        plan.assign(subcommands().begin(), subcommands().end() - 1);
    else
        plan.push_back(sub);
    int code = kExitOk;
    for (const auto& name : plan) {
        const auto t0 = std::chrono::steady_clock::now();
        Report rep = make_report(name, cfg);
        out.add_timing(name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        out.write_json(rep.name + ".json", rep.json);
        for (const auto& [file, data] : rep.files) out.write(file, data);
        code = std::max(code, rep.exit_code);
    }
    out.finish(sub, cfg.seed);
    return code;
}

}  // namespace vortexkam
