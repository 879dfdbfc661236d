#pragma once

// Run configuration: a JSON document with one section per module. Every section has defaults;
// unknown keys are rejected with their path, and values are range-checked on load.

#include <json.hpp>

#include <fstream>
#include <optional>
#include <set>

#include "common.hpp"
#include "kam_reduce.hpp"
#include "measure.hpp"
#include "straightening.hpp"
#include "transversality.hpp"

namespace vortexkam {

using Json = nlohmann::ordered_json;

struct DispersionSection {
    double g = 1.0;
    std::optional<double> depth;  // absent means infinite depth
    double gamma_lo = 0.5;
    double gamma_hi = 1.5;
    int modes = 32;           // |j| range of the dispersion table
    int gamma_samples = 5;    // table rows across [gamma_lo, gamma_hi]
    bool operator==(const DispersionSection&) const = default;
};

struct SitesSection {
    std::vector<int> moduli{1, 2};
    std::vector<int> signs{1, 1};
    std::vector<double> amplitudes{0.01, 0.005};  // linear synthesis only
    bool operator==(const SitesSection&) const = default;
};

struct SynthSection {
    double gamma = 1.0;
    std::vector<double> times{0.0, 0.5, 1.0};
    int samples = 256;  // x-grid points in the CSV export
    bool operator==(const SynthSection&) const = default;
};

struct DivisorsSection {
    double upsilon = 0.01;
    std::optional<double> tau;  // absent selects the smallest admissible exponent for m0
    bool operator==(const DivisorsSection&) const = default;
};

struct ScheduleSection {
    int N0 = 8;
    double chi = 1.5;
    int nbar = 4;
    double upsilon = 0.1;
    double tau = 1.5;
    double tol = 1e-14;
    int grid = 0;
    int k0 = 3;
    bool operator==(const ScheduleSection&) const = default;
};

struct TransversalitySection {
    int ell_max = 20;
    int j_max = 40;
    int m0_max = 5;
    int grid = 512;
    double positivity_floor = 1e-9;
    std::vector<std::string> kinds{"zero", "first", "second-minus", "second-plus"};
    bool operator==(const TransversalitySection&) const = default;
};

struct MeasureSection {
    double eps = 1e-3;
    std::string model = "standard";  // standard | random
    int ell_max = 4;
    int j_max = 30;
    int grid = 4096;
    int k_min = 4;  // upsilon = 2^-k, k = k_min..k_max
    int k_max = 10;
    int m0 = 0;            // 0 derives m0 from a transversality check on the measure cutoffs
    double C1 = 0.0;       // inclusion constant, 0 fits it
    int zero_ell_max = 1;  // cutoffs of the unperturbed emptiness run
    int zero_j_max = 30;
    bool operator==(const MeasureSection&) const = default;
};

struct StraighteningSection {
    int L = 12;
    int support = 4;
    double decay = 0.5;
    double norm = 1e-3;
    double s0 = 2.0;
    double m1 = 0.0;
    std::vector<double> omega;  // empty selects quadratic irrationals
    int tests = 3;              // random test profiles for the conjugacy check
    int test_L = 3;
    bool profile_csv = false;
    bool operator==(const StraighteningSection&) const = default;
};

struct ReductionSection {
    int Lop = 8;
    int J = 16;
    double eps = 1e-3;
    double ell_decay = 3.0;
    double j_decay = 0.5;
    double gamma = 0.73;
    double m1 = 0.0;
    double m_half = 1.0;
    double m0 = 0.0;
    std::vector<double> omega;  // empty selects the tangential frequencies at gamma
    double x_norm_guard = 1.0;
    bool dump = false;
    ScheduleSection schedule{8, 1.5, 3, 1e-2, 1.5, 1e-14, 0, 3};
    bool operator==(const ReductionSection&) const = default;
};

struct RunConfig {
    std::uint64_t seed = 1;
    DispersionSection dispersion;
    SitesSection sites;
    SynthSection synth;
    DivisorsSection divisors;
    ScheduleSection schedule;
    TransversalitySection transversality;
    MeasureSection measure;
    StraighteningSection straightening;
    ReductionSection reduction;
    bool operator==(const RunConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Reading

namespace detail {

/// Typed access to one JSON object that remembers which keys were consumed.
class SectionReader {
public:
    SectionReader(const Json& node, std::string path) : node_(node), path_(std::move(path)) {
        require(node_.is_object(), where() + "must be an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        used_.insert(key);
        if (!node_.contains(key)) return;
        const Json& v = node_.at(key);
        try {
            assign(v, out);
        } catch (const nlohmann::json::exception&) {
            throw ValidationError(field(key) + ": wrong type");
        }
    }

    template <class T>
    void get(const char* key, std::optional<T>& out) {
        used_.insert(key);
        if (!node_.contains(key) || node_.at(key).is_null()) return;
        T value{};
        get(key, value);
        out = value;
    }

    SectionReader child(const char* key) {
        used_.insert(key);
        static const Json empty = Json::object();
        return SectionReader(node_.contains(key) ? node_.at(key) : empty, field(key));
    }

    void finish() const {
        for (auto it = node_.begin(); it != node_.end(); ++it)
            require(used_.count(it.key()) == 1, "unknown key '" + field(it.key().c_str()) + "'");
    }

    std::string field(const char* key) const { return path_.empty() ? std::string(key) : path_ + "." + key; }

private:
    std::string where() const { return (path_.empty() ? std::string("config") : path_) + ": "; }

    static void assign(const Json& v, double& out) {
        if (!v.is_number()) throw nlohmann::json::type_error::create(302, "number expected", nullptr);
        out = v.get<double>();
    }
    static void assign(const Json& v, int& out) {
        if (!v.is_number_integer()) throw nlohmann::json::type_error::create(302, "integer expected", nullptr);
        out = v.get<int>();
    }
    static void assign(const Json& v, std::uint64_t& out) {
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
            throw nlohmann::json::type_error::create(302, "unsigned integer expected", nullptr);
        out = v.get<std::uint64_t>();
    }
    static void assign(const Json& v, bool& out) { out = v.get<bool>(); }
    static void assign(const Json& v, std::string& out) { out = v.get<std::string>(); }
    template <class T>
    static void assign(const Json& v, std::vector<T>& out) {
        if (!v.is_array()) throw nlohmann::json::type_error::create(302, "array expected", nullptr);
        out.clear();
        for (const auto& e : v) {
            T x{};
            assign(e, x);
            out.push_back(x);
        }
    }

    const Json& node_;
    std::string path_;
    std::set<std::string> used_;
};

inline void read_schedule(SectionReader r, ScheduleSection& s) {
    r.get("N0", s.N0);
    r.get("chi", s.chi);
    r.get("nbar", s.nbar);
    r.get("upsilon", s.upsilon);
    r.get("tau", s.tau);
    r.get("tol", s.tol);
    r.get("grid", s.grid);
    r.get("k0", s.k0);
    r.finish();
    const std::string at = r.field("");
    require(s.N0 >= 2, at + "N0 must be at least 2");
    require(s.chi > 1.0, at + "chi must exceed 1");
    require(s.nbar >= 0 && s.nbar <= 12, at + "nbar must lie in [0, 12]");
    require(s.upsilon > 0.0 && s.upsilon < 1.0, at + "upsilon must lie in (0,1)");
    require(s.tau >= 0.0, at + "tau must be non-negative");
    require(s.tol > 0.0, at + "tol must be positive");
    require(s.grid >= 0, at + "grid must be non-negative");
    require(s.k0 >= 0, at + "k0 must be non-negative");
}

}  // namespace detail

/// Validates a parsed document and fills defaults.
inline RunConfig config_from_json(const Json& doc) {
    RunConfig c;
    detail::SectionReader root(doc, "");
    root.get("seed", c.seed);

    {
        auto r = root.child("dispersion");
        auto& d = c.dispersion;
        r.get("g", d.g);
        r.get("depth", d.depth);
        r.get("gamma_lo", d.gamma_lo);
        r.get("gamma_hi", d.gamma_hi);
        r.get("modes", d.modes);
        r.get("gamma_samples", d.gamma_samples);
        r.finish();
        require(d.g > 0.0 && std::isfinite(d.g), "dispersion.g must be positive");
        require(!d.depth || (*d.depth > 0.0 && std::isfinite(*d.depth)), "dispersion.depth must be positive (omit for infinite depth)");
        require(d.gamma_lo <= d.gamma_hi, "dispersion.gamma_lo must not exceed dispersion.gamma_hi");
        require(d.modes >= 1 && d.modes <= 4096, "dispersion.modes must lie in [1, 4096]");
        require(d.gamma_samples >= 1, "dispersion.gamma_samples must be positive");
    }
    {
        auto r = root.child("sites");
        auto& s = c.sites;
        r.get("moduli", s.moduli);
        r.get("signs", s.signs);
        r.get("amplitudes", s.amplitudes);
        r.finish();
        require(!s.moduli.empty(), "sites.moduli must not be empty");
        require(s.moduli.size() == s.signs.size(), "sites.signs must have one entry per modulus");
        require(s.amplitudes.size() == s.moduli.size(), "sites.amplitudes must have one entry per modulus");
        for (int n : s.moduli) require(n >= 1, "sites.moduli must be positive integers");
        for (int sg : s.signs) require(sg == 1 || sg == -1, "sites.signs must be +1 or -1");
        for (double a : s.amplitudes) require(a >= 0.0 && std::isfinite(a), "sites.amplitudes must be non-negative");
        std::set<int> distinct(s.moduli.begin(), s.moduli.end());
        require(distinct.size() == s.moduli.size(), "sites.moduli must be distinct: the tangential sites are finitely many distinct moduli");
    }
    {
        auto r = root.child("synth");
        r.get("gamma", c.synth.gamma);
        r.get("times", c.synth.times);
        r.get("samples", c.synth.samples);
        r.finish();
        require(!c.synth.times.empty(), "synth.times must not be empty");
        require(c.synth.samples >= 2, "synth.samples must be at least 2");
    }
    {
        auto r = root.child("divisors");
        r.get("upsilon", c.divisors.upsilon);
        r.get("tau", c.divisors.tau);
        r.finish();
        require(c.divisors.upsilon > 0.0 && c.divisors.upsilon < 1.0, "divisors.upsilon must lie in (0,1)");
        require(!c.divisors.tau || *c.divisors.tau >= 1.0, "divisors.tau must be at least 1");
    }
    detail::read_schedule(root.child("schedule"), c.schedule);
    {
        auto r = root.child("transversality");
        auto& t = c.transversality;
        r.get("ell_max", t.ell_max);
        r.get("j_max", t.j_max);
        r.get("m0_max", t.m0_max);
        r.get("grid", t.grid);
        r.get("positivity_floor", t.positivity_floor);
        r.get("kinds", t.kinds);
        r.finish();
        require(t.ell_max >= 1 && t.j_max >= 1, "transversality.ell_max and transversality.j_max must be positive");
        require(t.m0_max >= 0 && t.m0_max < kMaxJetOrder, "transversality.m0_max out of range");
        require(t.grid >= 2, "transversality.grid must be at least 2");
        require(t.positivity_floor >= 0.0, "transversality.positivity_floor must be non-negative");
        for (const auto& k : t.kinds) tuple_kind_from_string(k);
    }
    {
        auto r = root.child("measure");
        auto& m = c.measure;
        r.get("eps", m.eps);
        r.get("model", m.model);
        r.get("ell_max", m.ell_max);
        r.get("j_max", m.j_max);
        r.get("grid", m.grid);
        r.get("k_min", m.k_min);
        r.get("k_max", m.k_max);
        r.get("m0", m.m0);
        r.get("C1", m.C1);
        r.get("zero_ell_max", m.zero_ell_max);
        r.get("zero_j_max", m.zero_j_max);
        r.finish();
        require(m.eps >= 0.0 && std::isfinite(m.eps), "measure.eps must be non-negative");
        require(m.model == "standard" || m.model == "random", "measure.model must be 'standard' or 'random'");
        require(m.ell_max >= 1 && m.j_max >= 1, "measure.ell_max and measure.j_max must be positive");
        require(m.grid >= 16, "measure.grid must be at least 16");
        require(m.k_min >= 1 && m.k_max >= m.k_min && m.k_max <= 40, "measure: need 1 <= k_min <= k_max <= 40");
        require(m.m0 >= 0, "measure.m0 must be non-negative");
        require(m.C1 >= 0.0, "measure.C1 must be non-negative");
        require(m.zero_ell_max >= 1 && m.zero_j_max >= 1, "measure.zero_ell_max and measure.zero_j_max must be positive");
    }
    {
        auto r = root.child("straightening");
        auto& s = c.straightening;
        r.get("L", s.L);
        r.get("support", s.support);
        r.get("decay", s.decay);
        r.get("norm", s.norm);
        r.get("s0", s.s0);
        r.get("m1", s.m1);
        r.get("omega", s.omega);
        r.get("tests", s.tests);
        r.get("test_L", s.test_L);
        r.get("profile_csv", s.profile_csv);
        r.finish();
        require(s.L >= 1 && s.L <= 64, "straightening.L must lie in [1, 64]");
        require(s.support >= 1 && s.support <= s.L, "straightening.support must lie in [1, L]");
        require(s.decay >= 0.0, "straightening.decay must be non-negative");
        require(s.norm > 0.0 && std::isfinite(s.norm), "straightening.norm must be positive");
        require(s.s0 >= 0.0, "straightening.s0 must be non-negative");
        require(s.omega.empty() || s.omega.size() == c.sites.moduli.size(), "straightening.omega must have one entry per site");
        require(s.tests >= 1 && s.test_L >= 1, "straightening.tests and straightening.test_L must be positive");
    }
    {
        auto r = root.child("reduction");
        auto& k = c.reduction;
        r.get("Lop", k.Lop);
        r.get("J", k.J);
        r.get("eps", k.eps);
        r.get("ell_decay", k.ell_decay);
        r.get("j_decay", k.j_decay);
        r.get("gamma", k.gamma);
        r.get("m1", k.m1);
        r.get("m_half", k.m_half);
        r.get("m0", k.m0);
        r.get("omega", k.omega);
        r.get("x_norm_guard", k.x_norm_guard);
        r.get("dump", k.dump);
        detail::read_schedule(r.child("schedule"), k.schedule);
        r.finish();
        require(k.Lop >= 0 && k.Lop <= 16, "reduction.Lop must lie in [0, 16]");
        require(k.J >= 1 && k.J <= 256, "reduction.J must lie in [1, 256]");
        require(k.eps >= 0.0 && std::isfinite(k.eps), "reduction.eps must be non-negative");
        require(k.ell_decay >= 0.0 && k.j_decay >= 0.0, "reduction decay exponents must be non-negative");
        require(k.omega.empty() || k.omega.size() == c.sites.moduli.size(), "reduction.omega must have one entry per site");
        require(k.x_norm_guard > 0.0, "reduction.x_norm_guard must be positive");
    }
    root.finish();
    return c;
}

inline RunConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), "config: cannot open '" + path + "'");
    Json doc;
    try {
        doc = Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("config: malformed JSON in '" + path + "': " + e.what());
    }
    return config_from_json(doc);
}

// ---------------------------------------------------------------------------
// Snapshot and conversion to module types

namespace detail {
inline Json schedule_json(const ScheduleSection& s) {
    return Json{{"N0", s.N0}, {"chi", s.chi},   {"nbar", s.nbar}, {"upsilon", s.upsilon},
                {"tau", s.tau}, {"tol", s.tol}, {"grid", s.grid}, {"k0", s.k0}};
}
}  // namespace detail

/// Complete document with every default spelled out; config_from_json(to_json(c)) == c.
inline Json to_json(const RunConfig& c) {
    Json j;
    j["seed"] = c.seed;
    const auto& d = c.dispersion;
    j["dispersion"] = {{"g", d.g},
                       {"depth", d.depth ? Json(*d.depth) : Json(nullptr)},
                       {"gamma_lo", d.gamma_lo},
                       {"gamma_hi", d.gamma_hi},
                       {"modes", d.modes},
                       {"gamma_samples", d.gamma_samples}};
    j["sites"] = {{"moduli", c.sites.moduli}, {"signs", c.sites.signs}, {"amplitudes", c.sites.amplitudes}};
    j["synth"] = {{"gamma", c.synth.gamma}, {"times", c.synth.times}, {"samples", c.synth.samples}};
    j["divisors"] = {{"upsilon", c.divisors.upsilon}, {"tau", c.divisors.tau ? Json(*c.divisors.tau) : Json(nullptr)}};
    j["schedule"] = detail::schedule_json(c.schedule);
    const auto& t = c.transversality;
    j["transversality"] = {{"ell_max", t.ell_max}, {"j_max", t.j_max}, {"m0_max", t.m0_max},
                           {"grid", t.grid}, {"positivity_floor", t.positivity_floor}, {"kinds", t.kinds}};
    const auto& m = c.measure;
    j["measure"] = {{"eps", m.eps},     {"model", m.model}, {"ell_max", m.ell_max}, {"j_max", m.j_max},
                    {"grid", m.grid},   {"k_min", m.k_min}, {"k_max", m.k_max},     {"m0", m.m0},
                    {"C1", m.C1},       {"zero_ell_max", m.zero_ell_max},           {"zero_j_max", m.zero_j_max}};
    const auto& s = c.straightening;
    j["straightening"] = {{"L", s.L},         {"support", s.support}, {"decay", s.decay},
                          {"norm", s.norm},   {"s0", s.s0},           {"m1", s.m1},
                          {"omega", s.omega}, {"tests", s.tests},     {"test_L", s.test_L},
                          {"profile_csv", s.profile_csv}};
    const auto& k = c.reduction;
    j["reduction"] = {{"Lop", k.Lop},
                      {"J", k.J},
                      {"eps", k.eps},
                      {"ell_decay", k.ell_decay},
                      {"j_decay", k.j_decay},
                      {"gamma", k.gamma},
                      {"m1", k.m1},
                      {"m_half", k.m_half},
                      {"m0", k.m0},
                      {"omega", k.omega},
                      {"x_norm_guard", k.x_norm_guard},
                      {"dump", k.dump},
                      {"schedule", detail::schedule_json(k.schedule)}};
    return j;
}

/// Site indices ordered by increasing modulus, the order the library expects.
inline std::vector<std::size_t> site_order(const SitesSection& s) {
    std::vector<std::size_t> order(s.moduli.size());
    for (std::size_t a = 0; a < order.size(); ++a) order[a] = a;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.moduli[a] < s.moduli[b]; });
    return order;
}

inline TangentialSites make_sites(const SitesSection& s) {
    IntVec n, sg;
    for (std::size_t a : site_order(s)) {
        n.push_back(s.moduli[a]);
        sg.push_back(s.signs[a]);
    }
    return TangentialSites(n, sg);
}

inline RealVec make_amplitudes(const SitesSection& s) {
    RealVec xi;
    for (std::size_t a : site_order(s)) xi.push_back(s.amplitudes[a]);
    return xi;
}

inline DispersionParams make_dispersion(const DispersionSection& d) {
    DispersionParams p;
    p.g = d.g;
    p.depth = d.depth ? Depth::finite(*d.depth) : Depth::infinite();
    p.gamma_lo = d.gamma_lo;
    p.gamma_hi = d.gamma_hi;
    return p;
}

inline KamSchedule make_schedule(const ScheduleSection& s) {
    KamSchedule k;
    k.N0 = s.N0;
    k.chi = s.chi;
    k.nbar = s.nbar;
    k.upsilon = s.upsilon;
    k.tau = s.tau;
    k.tol = s.tol;
    k.grid = s.grid;
    k.k0 = s.k0;
    return k;
}

}  // namespace vortexkam
