#pragma once

// KAM almost-diagonalization of
//     L = omega . d_phi + i D + R
// acting on pairs (u, v), u = sum u_{l,j} e^{i(l.phi + j x)}, v = sum v_{l,k} e^{i(l.phi - k x)}, with
// j, k ranging over the normal indices. D is diag(mu_j) on u and diag(-mu_k) on v.
//
// Representation. The remainder has four blocks: the diagonal block R^d, the off-diagonal block
// R^o (stored with its column relabelled k = -j', so that both of its indices are normal), and
// their conjugates below. Reversible entries are purely imaginary, hence L = i A with A real;
// everything below works with A. The lattice truncation |l|_inf <= Lop, |j| <= J decomposes
// into blocks of fixed momentum p = jvec.l + j (u entries) or jvec.l - k (v entries). Reality
// gives A_{-p} = -P A_p P with P: u(l, j) <-> v(-l, j), so only blocks p >= 0 are stored.

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <map>

#include "dispersion.hpp"
#include "straightening.hpp"

namespace vortexkam {

// ---------------------------------------------------------------------------
// Normal form and synthetic remainders

struct NormalForm {
    TangentialSites sites;
    DispersionParams disp;
    double gamma = 0.0;
    double m1 = 0.0, m_half = 1.0, m0 = 0.0;
    int J = 0;
    std::map<int, double> mu;  // normal j with |j| <= J

    double mu_initial(int j) const { return m1 * j + m_half * Omega_j(j, disp, gamma) - m0 * sgn(j); }

    static NormalForm initial(const TangentialSites& sites, const DispersionParams& disp, double gamma, double m1,
                              double m_half, double m0, int J) {
        require(J >= 1, "normal form: J must be positive");
        NormalForm nf{sites, disp, gamma, m1, m_half, m0, J, {}};
        for (int j = -J; j <= J; ++j)
            if (sites.is_normal(j)) nf.mu[j] = nf.mu_initial(j);
        return nf;
    }
    double at(int j) const {
        const auto it = mu.find(j);
        require(it != mu.end(), "normal form: index outside the normal truncation");
        return it->second;
    }
};

struct RemainderSpec {
    double eps = 1e-3;
    double ell_decay = 3.0;  // entries scale like <l>^-ell_decay
    double j_decay = 0.5;    // and like (<j>^(1/2) <j'>^(1/2))^-j_decay
    std::uint64_t seed = 1;

    void validate() const {
        require(eps >= 0.0 && std::isfinite(eps), "remainder.eps must be finite and non-negative");
        require(ell_decay >= 0.0 && std::isfinite(ell_decay), "remainder.ell_decay must be finite and non-negative");
        require(j_decay >= 0.0 && std::isfinite(j_decay), "remainder.j_decay must be finite and non-negative");
    }
};

/// Toeplitz tables of the starting remainder. R^d_j^{j'}(l) = i * diag_value(l, j) with
/// j' = jvec.l + j; stored R^o_j^{k}(l) = i * off_value(l, j) with k = -(jvec.l + j).
class RemainderTables {
public:
    RemainderTables() = default;
    RemainderTables(TangentialSites sites, int radius, int J)
        : sites_(std::move(sites)), radius_(radius), J_(J) {
        std::size_t n = 1;
        for (std::size_t a = 0; a < sites_.nu(); ++a) n *= 2 * static_cast<std::size_t>(radius) + 1;
        const std::size_t width = 2 * static_cast<std::size_t>(J) + 1;
        diag_.assign(n * width, 0.0);
        off_.assign(n * width, 0.0);
    }
    int radius() const { return radius_; }
    int J() const { return J_; }
    const TangentialSites& sites() const { return sites_; }

    /// Column index forced by momentum, or nullopt when it leaves the normal truncation.
    std::optional<int> diag_partner(const IntVec& ell, int j) const {
        const long long jp = sites_.momentum(ell) + j;
        return in_range(jp) ? std::optional<int>(static_cast<int>(jp)) : std::nullopt;
    }
    std::optional<int> off_partner(const IntVec& ell, int j) const {
        const long long k = -(sites_.momentum(ell) + j);
        return in_range(k) ? std::optional<int>(static_cast<int>(k)) : std::nullopt;
    }

    double diag_value(const IntVec& ell, int j) const { return linf(ell) <= radius_ ? diag_[slot(ell, j)] : 0.0; }
    double off_value(const IntVec& ell, int j) const { return linf(ell) <= radius_ ? off_[slot(ell, j)] : 0.0; }
    double& diag_value(const IntVec& ell, int j) { return diag_[slot(ell, j)]; }
    double& off_value(const IntVec& ell, int j) { return off_[slot(ell, j)]; }

    /// Exact check: every nonzero entry sits on a momentum-compatible normal pair.
    bool momentum_consistent() const {
        for (const auto& ell : lattice_box(sites_.nu(), radius_))
            for (int j = -J_; j <= J_; ++j) {
                const double d = diag_[slot(ell, j)], o = off_[slot(ell, j)];
                if (d != 0.0 && (!sites_.is_normal(j) || !diag_partner(ell, j))) return false;
                if (o != 0.0 && (!sites_.is_normal(j) || !off_partner(ell, j))) return false;
            }
        return true;
    }

private:
    bool in_range(long long j) const { return std::llabs(j) <= J_ && sites_.is_normal(static_cast<int>(j)); }
    std::size_t slot(const IntVec& ell, int j) const {
        require(std::abs(j) <= J_, "remainder table: j out of range");
        return box_index(ell, radius_) * (2 * static_cast<std::size_t>(J_) + 1) + static_cast<std::size_t>(j + J_);
    }

    TangentialSites sites_;
    int radius_ = 0, J_ = 0;
    std::vector<double> diag_, off_;
};

inline double j_bracket(int j) { return std::max(1.0, static_cast<double>(std::abs(j))); }

/// Random reversible, momentum-preserving remainder on |l| <= 2 Lop (all differences of the
/// truncation). Each entry is eps * xi * <l>^-ell_decay * (<j><j'>)^(-j_decay/2) with xi drawn
/// from +-[1/2, 1]; the draw for an entry depends only on (seed, entry), not on the loop order.
inline RemainderTables build_remainder(const TangentialSites& sites, int Lop, int J, const RemainderSpec& spec) {
    spec.validate();
    require(Lop >= 0, "reduction: Lop must be non-negative");
    RemainderTables t(sites, 2 * Lop, J);
    if (spec.eps == 0.0) return t;
    const CounterRng diag_rng(spec.seed, 1), off_rng(spec.seed, 2);
    std::uint64_t counter = 0;
    for (const auto& ell : lattice_box(sites.nu(), 2 * Lop))
        for (int j = -J; j <= J; ++j, ++counter) {
            if (!sites.is_normal(j)) continue;
            auto draw = [&](const CounterRng& rng) {
                const double u = rng.uniform(counter);
                return (u < 0.5 ? -1.0 : 1.0) * (0.5 + std::abs(2.0 * u - 1.0) * 0.5);
            };
            const double base = spec.eps * std::pow(bracket(ell), -spec.ell_decay);
            if (auto jp = t.diag_partner(ell, j))
                t.diag_value(ell, j) = base * draw(diag_rng) * std::pow(j_bracket(j) * j_bracket(*jp), -0.5 * spec.j_decay);
            if (auto k = t.off_partner(ell, j))
                t.off_value(ell, j) = base * draw(off_rng) * std::pow(j_bracket(j) * j_bracket(*k), -0.5 * spec.j_decay);
        }
    return t;
}

// ---------------------------------------------------------------------------
// Divisors

enum class DivisorKind { difference, sum };

/// omega.l + mu_j - mu_j' (difference) or omega.l + mu_j + mu_{-j'} (sum, j' in -S0^c), with the
/// momentum constraint jvec.l + j - j' = 0 in both cases.
inline double melnikov_divisor(const RealVec& omega, const NormalForm& nf, const IntVec& ell, int j, int jprime,
                               DivisorKind kind) {
    require(nf.sites.momentum(ell) + j - jprime == 0, "melnikov_divisor: momentum constraint violated");
    if (kind == DivisorKind::difference) return dot(omega, ell) + nf.at(j) - nf.at(jprime);
    return dot(omega, ell) + nf.at(j) + nf.at(-jprime);
}

/// Thresholds upsilon <l>^-tau (difference) and upsilon (|j|^1/2 + |k|^1/2) <l>^-tau (sum).
inline double melnikov_threshold(DivisorKind kind, const IntVec& ell, int j, int k, double upsilon, double tau) {
    const double base = upsilon * std::pow(bracket(ell), -tau);
    if (kind == DivisorKind::difference) return base;
    return base * (std::sqrt(std::abs(static_cast<double>(j))) + std::sqrt(std::abs(static_cast<double>(k))));
}

// ---------------------------------------------------------------------------
// Momentum blocks

struct LatticeState {
    IntVec ell;
    int j = 0;          // u: exponent j; v: label k with exponent -k
    bool conj = false;  // false for u entries, true for v entries
};

struct MomentumBlock {
    long long p = 0;
    std::vector<LatticeState> states;  // u entries first, each group in lexicographic l
    std::size_t size() const { return states.size(); }
};

class KamLattice {
public:
    KamLattice(TangentialSites sites, int Lop, int J) : sites_(std::move(sites)), Lop_(Lop), J_(J) {
        require(Lop >= 0 && J >= 1, "lattice: Lop >= 0 and J >= 1 required");
        std::map<long long, MomentumBlock> by_p;
        const auto box = lattice_box(sites_.nu(), Lop);
        for (bool conj : {false, true})
            for (const auto& ell : box)
                for (int j = -J; j <= J; ++j) {
                    if (!sites_.is_normal(j)) continue;
                    const long long p = sites_.momentum(ell) + (conj ? -j : j);
                    if (p < 0) continue;
                    auto& blk = by_p[p];
                    blk.p = p;
                    blk.states.push_back({ell, j, conj});
                }
        for (auto& [p, blk] : by_p) blocks_.push_back(std::move(blk));
    }
    const TangentialSites& sites() const { return sites_; }
    int Lop() const { return Lop_; }
    int J() const { return J_; }
    const std::vector<MomentumBlock>& blocks() const { return blocks_; }
    long long momentum(const LatticeState& s) const { return sites_.momentum(s.ell) + (s.conj ? -s.j : s.j); }

    /// Number of states in the full truncation, both signs of p.
    std::size_t total_states() const {
        std::size_t n = 0;
        for (const auto& b : blocks_) n += (b.p == 0 ? 1 : 2) * b.size();
        return n;
    }

    /// Locates the state (l, j, conj) among stored blocks, applying the reality involution
    /// for negative momentum. Returns (block, index, sign) with sign = -1 when mirrored.
    struct Location {
        std::size_t block = 0, index = 0;
        double sign = 1.0;
    };
    std::optional<Location> locate(const LatticeState& s) const {
        LatticeState t = s;
        double sign = 1.0;
        if (momentum(s) < 0) {
            t = {negate(s.ell), s.j, !s.conj};
            sign = -1.0;
        }
        const long long p = momentum(t);
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
            if (blocks_[b].p != p) continue;
            const auto& st = blocks_[b].states;
            for (std::size_t i = 0; i < st.size(); ++i)
                if (st[i].conj == t.conj && st[i].j == t.j && st[i].ell == t.ell) return Location{b, i, sign};
        }
        return std::nullopt;
    }

private:
    TangentialSites sites_;
    int Lop_, J_;
    std::vector<MomentumBlock> blocks_;
};

namespace detail {

inline IntVec diff(const IntVec& a, const IntVec& b) {
    IntVec d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    return d;
}

inline double diagonal_entry(const LatticeState& s, const RealVec& omega, const NormalForm& nf) {
    return dot(omega, s.ell) + (s.conj ? -nf.at(s.j) : nf.at(s.j));
}

/// Real remainder matrix of one block from the Toeplitz tables (L = i A convention).
inline Eigen::MatrixXd assemble_block(const MomentumBlock& blk, const RemainderTables& t) {
    const std::size_t n = blk.size();
    Eigen::MatrixXd R = Eigen::MatrixXd::Zero(n, n);
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b) {
            const auto& sa = blk.states[a];
            const auto& sb = blk.states[b];
            if (!sa.conj && !sb.conj) R(a, b) = t.diag_value(diff(sa.ell, sb.ell), sa.j);
            if (!sa.conj && sb.conj) R(a, b) = t.off_value(diff(sa.ell, sb.ell), sa.j);
            if (sa.conj && sb.conj) R(a, b) = -t.diag_value(diff(sb.ell, sa.ell), sa.j);
            if (sa.conj && !sb.conj) R(a, b) = -t.off_value(diff(sb.ell, sa.ell), sa.j);
        }
    return R;
}

/// e^X - I, accurate relative to |X| for small X.
inline Eigen::MatrixXd expm1(const Eigen::MatrixXd& X) {
    const double nrm = X.cwiseAbs().colwise().sum().maxCoeff();
    const std::size_t n = X.rows();
    if (nrm > 0.5) return Eigen::MatrixXd(X.exp()) - Eigen::MatrixXd::Identity(n, n);
    // Horner form of X (I + X/2 (I + X/3 (...))) with enough terms for |X|^K / K! < 1e-18 |X|.
    int K = 1;
    for (double term = 1.0; term > 1e-18; ++K) term *= nrm / (K + 1);
    Eigen::MatrixXd acc = Eigen::MatrixXd::Identity(n, n);
    for (int k = K; k >= 2; --k) acc = Eigen::MatrixXd::Identity(n, n) + (X * acc) / static_cast<double>(k);
    return X * acc;
}

/// Largest singular value of M by power iteration on M^T M from a fixed start vector.
inline double spectral_norm(const Eigen::MatrixXd& M, int iterations = 60) {
    if (M.size() == 0) return 0.0;
    Eigen::VectorXd v = Eigen::VectorXd::Ones(M.cols()) / std::sqrt(static_cast<double>(M.cols()));
    double sigma = 0.0;
    for (int it = 0; it < iterations; ++it) {
        const Eigen::VectorXd w = M.transpose() * (M * v);
        const double nw = w.norm();
        if (nw == 0.0) return 0.0;
        v = w / nw;
        sigma = std::sqrt(nw);
    }
    return sigma;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Iteration state

struct KamState {
    NormalForm normal;
    std::vector<Eigen::MatrixXd> R;  // per stored block, real form of the remainder
};

/// Starting operator: normal form plus the remainder assembled on every stored block.
inline KamState build_L0(const NormalForm& nf, const KamLattice& lat, const RemainderTables& t) {
    require(nf.J == lat.J() && t.J() == lat.J(), "build_L0: truncation mismatch");
    require(t.radius() >= 2 * lat.Lop(), "build_L0: remainder table too small for the lattice");
    KamState s{nf, std::vector<Eigen::MatrixXd>(lat.blocks().size())};
    parallel_for(lat.blocks().size(), [&](std::size_t b) { s.R[b] = detail::assemble_block(lat.blocks()[b], t); });
    return s;
}

/// Per-block remainder with the diagonal removed.
inline Eigen::MatrixXd off_diagonal(const Eigen::MatrixXd& R) {
    Eigen::MatrixXd O = R;
    O.diagonal().setZero();
    return O;
}

struct RemainderNorms {
    double weighted = 0.0;   // || <D>^1/4 |R_off| <D>^1/4 ||, power iteration
    double frobenius = 0.0;  // Frobenius norm of the same matrix, an upper bound
    double spectral = 0.0;   // || R_off || without weights
    double diag_defect = 0.0;  // largest diagonal entry left in the remainder
};

inline RemainderNorms remainder_norms(const KamLattice& lat, const std::vector<Eigen::MatrixXd>& R) {
    std::vector<RemainderNorms> per(R.size());
    parallel_for(R.size(), [&](std::size_t b) {
        const auto& blk = lat.blocks()[b];
        Eigen::VectorXd w(blk.size());
        for (std::size_t a = 0; a < blk.size(); ++a) w(a) = std::pow(j_bracket(blk.states[a].j), 0.25);
        const Eigen::MatrixXd O = off_diagonal(R[b]);
        const Eigen::MatrixXd W = w.asDiagonal() * O.cwiseAbs() * w.asDiagonal();
        per[b].weighted = detail::spectral_norm(W);
        per[b].frobenius = W.norm();
        per[b].spectral = detail::spectral_norm(O);
        per[b].diag_defect = R[b].size() ? R[b].diagonal().cwiseAbs().maxCoeff() : 0.0;
    });
    RemainderNorms out;
    // The operator is block diagonal and blocks -p mirror blocks p, so maxima over stored blocks suffice.
    for (const auto& r : per) {
        out.weighted = std::max(out.weighted, r.weighted);
        out.frobenius = std::max(out.frobenius, r.frobenius);
        out.spectral = std::max(out.spectral, r.spectral);
        out.diag_defect = std::max(out.diag_defect, r.diag_defect);
    }
    return out;
}

struct MelnikovRecord {
    int n = 0;
    double N = 0.0;
    long long difference_checked = 0, difference_violated = 0;
    long long sum_checked = 0, sum_violated = 0;
    long long damped = 0;  // entries with cutoff below 1
    double min_difference_margin = std::numeric_limits<double>::infinity();
    double min_sum_margin = std::numeric_limits<double>::infinity();
};

struct HomologicalMatrix {
    std::vector<Eigen::MatrixXd> X;
    std::vector<Eigen::MatrixXd> solved;  // the part S of R removed by X: (lambda_a - lambda_b) X_ab = -S_ab
    MelnikovRecord record;
};

/// X_ab = -chi(d / rho) R_ab / d with d = lambda_a - lambda_b, restricted to <l_a - l_b> <= N and
/// a != b. The kind is "difference" when both states are of the same type and "sum" otherwise.
inline HomologicalMatrix solve_homological_matrix(const KamLattice& lat, const KamState& st, const RealVec& omega,
                                                  double upsilon, double tau, double N) {
    const auto& blocks = lat.blocks();
    HomologicalMatrix h{std::vector<Eigen::MatrixXd>(blocks.size()), std::vector<Eigen::MatrixXd>(blocks.size()), {}};
    std::vector<MelnikovRecord> rec(blocks.size());
    parallel_for(blocks.size(), [&](std::size_t b) {
        const auto& blk = blocks[b];
        const std::size_t n = blk.size();
        Eigen::VectorXd lam(n);
        for (std::size_t a = 0; a < n; ++a) lam(a) = detail::diagonal_entry(blk.states[a], omega, st.normal);
        Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n, n), S = Eigen::MatrixXd::Zero(n, n);
        auto& r = rec[b];
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t c = 0; c < n; ++c) {
                if (a == c) continue;
                const auto& sa = blk.states[a];
                const auto& sc = blk.states[c];
                const IntVec dl = detail::diff(sa.ell, sc.ell);
                if (bracket(dl) > N) continue;
                const DivisorKind kind = sa.conj == sc.conj ? DivisorKind::difference : DivisorKind::sum;
                const double d = lam(a) - lam(c);
                const double rho = melnikov_threshold(kind, dl, sa.j, sc.j, upsilon, tau);
                const double margin = std::abs(d) / rho;
                if (kind == DivisorKind::difference) {
                    ++r.difference_checked;
                    if (margin < 1.0) ++r.difference_violated;
                    r.min_difference_margin = std::min(r.min_difference_margin, margin);
                } else {
                    ++r.sum_checked;
                    if (margin < 1.0) ++r.sum_violated;
                    r.min_sum_margin = std::min(r.min_sum_margin, margin);
                }
                const double chi = cutoff_chi(margin);
                if (chi < 1.0) ++r.damped;
                const double rab = st.R[b](a, c);
                if (chi == 0.0 || rab == 0.0) continue;
                X(a, c) = -chi * rab / d;
                S(a, c) = chi * rab;
            }
        h.X[b] = std::move(X);
        h.solved[b] = std::move(S);
    });
    h.record.N = N;
    for (const auto& r : rec) {
        h.record.difference_checked += r.difference_checked;
        h.record.difference_violated += r.difference_violated;
        h.record.sum_checked += r.sum_checked;
        h.record.sum_violated += r.sum_violated;
        h.record.damped += r.damped;
        h.record.min_difference_margin = std::min(h.record.min_difference_margin, r.min_difference_margin);
        h.record.min_sum_margin = std::min(h.record.min_sum_margin, r.min_sum_margin);
    }
    return h;
}

/// Correction r_j read from the diagonal entry at l = 0 (mirrored for j < 0).
inline std::map<int, double> eigenvalue_corrections(const KamLattice& lat, const KamState& st) {
    std::map<int, double> r;
    const IntVec zero(lat.sites().nu(), 0);
    for (const auto& [j, mu] : st.normal.mu) {
        const auto loc = lat.locate({zero, j, false});
        require(loc.has_value(), "eigenvalue_corrections: l = 0 state missing");
        r[j] = loc->sign * st.R[loc->block](loc->index, loc->index);
    }
    return r;
}

struct KamStepDiagnostics {
    int n = 0;
    MelnikovRecord melnikov;
    double x_norm = 0.0;         // max block l1 norm of X
    RemainderNorms before, after;
    double max_correction = 0.0;        // sup_j |r_j|
    double weighted_correction = 0.0;   // sup_j |j|^1/2 |r_j|
    double toeplitz_defect = 0.0;       // spread of diagonal entries at equal j across l
    bool structure_ok = true;
};

struct KamStepResult {
    KamState next;
    std::vector<Eigen::MatrixXd> E, Einv;  // e^X and e^-X per block
    std::vector<Eigen::MatrixXd> X;
    std::vector<Eigen::MatrixXd> solved;
    std::map<int, double> corrections;
    KamStepDiagnostics diag;
};

/// One conjugation by e^X. The new remainder is computed exactly on the truncation as
///     e^-X (Lambda + R) e^X - Lambda_+ = e^-X ([Lambda, e^X - I] + R e^X) - diag(r),
/// a form that never subtracts the large diagonal from itself.
inline KamStepResult kam_step(const KamLattice& lat, const KamState& st, const RealVec& omega,
                              const KamSchedule& sched, int n, double x_norm_guard = 1.0) {
    const double N = sched.scale(n);
    auto hom = solve_homological_matrix(lat, st, omega, sched.upsilon, sched.tau, N);
    const auto& blocks = lat.blocks();

    KamStepResult out;
    out.corrections = eigenvalue_corrections(lat, st);
    out.diag.n = n;
    out.diag.melnikov = hom.record;
    out.diag.melnikov.n = n;
    for (const auto& X : hom.X)
        if (X.size()) out.diag.x_norm = std::max(out.diag.x_norm, X.cwiseAbs().colwise().sum().maxCoeff());
    if (!(out.diag.x_norm <= x_norm_guard))
        throw DivergenceError("kam_step: generator norm exceeds the guard; remainder too large for the iteration");

    out.next.normal = st.normal;
    for (auto& [j, mu] : out.next.normal.mu) mu += out.corrections.at(j);
    out.next.R.resize(blocks.size());
    out.E.resize(blocks.size());
    out.Einv.resize(blocks.size());
    parallel_for(blocks.size(), [&](std::size_t b) {
        const auto& blk = blocks[b];
        const std::size_t sz = blk.size();
        const Eigen::MatrixXd& X = hom.X[b];
        const Eigen::MatrixXd Y = detail::expm1(X), Z = detail::expm1(-X);
        const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(sz, sz);
        Eigen::VectorXd lam(sz), shift(sz);
        for (std::size_t a = 0; a < sz; ++a) {
            lam(a) = detail::diagonal_entry(blk.states[a], omega, st.normal);
            const double r = out.corrections.at(blk.states[a].j);
            shift(a) = blk.states[a].conj ? -r : r;
        }
        Eigen::MatrixXd comm(sz, sz);  // [Lambda, Y]_ac = (lambda_a - lambda_c) Y_ac
        for (std::size_t c = 0; c < sz; ++c)
            for (std::size_t a = 0; a < sz; ++a) comm(a, c) = (lam(a) - lam(c)) * Y(a, c);
        const Eigen::MatrixXd inner = comm + st.R[b] + st.R[b] * Y;
        Eigen::MatrixXd Rn = inner + Z * inner;
        Rn.diagonal() -= shift;
        out.next.R[b] = std::move(Rn);
        out.E[b] = I + Y;
        out.Einv[b] = I + Z;
    });
    out.X = std::move(hom.X);
    out.solved = std::move(hom.solved);

    auto& d = out.diag;
    d.before = remainder_norms(lat, st.R);
    d.after = remainder_norms(lat, out.next.R);
    for (const auto& [j, r] : out.corrections) {
        d.max_correction = std::max(d.max_correction, std::abs(r));
        d.weighted_correction = std::max(d.weighted_correction, std::sqrt(std::abs(static_cast<double>(j))) * std::abs(r));
    }
    // Toeplitz defect: how far diagonal entries at the same (j, type) drift across l after the step.
    for (std::size_t b = 0; b < blocks.size(); ++b)
        for (std::size_t a = 0; a < blocks[b].size(); ++a)
            d.toeplitz_defect = std::max(d.toeplitz_defect, std::abs(out.next.R[b](a, a)));
    // Structure: states carry their block momentum, X vanishes beyond the scale and on the
    // diagonal, and every entry is finite.
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const auto& blk = blocks[b];
        for (const auto& s : blk.states)
            if (lat.momentum(s) != blk.p || !lat.sites().is_normal(s.j)) d.structure_ok = false;
        for (std::size_t a = 0; a < blk.size(); ++a)
            for (std::size_t c = 0; c < blk.size(); ++c) {
                const double x = out.X[b](a, c);
                if ((a == c || bracket(detail::diff(blk.states[a].ell, blk.states[c].ell)) > N) && x != 0.0)
                    d.structure_ok = false;
                if (!std::isfinite(out.next.R[b](a, c))) d.structure_ok = false;
            }
    }
    return out;
}

/// Second-order Lie approximation of the new remainder for one block:
///     (R - S - diag(r)) + [R, X] - 1/2 [S, X].
inline Eigen::MatrixXd lie_second_order(const MomentumBlock& blk, const Eigen::MatrixXd& R, const Eigen::MatrixXd& X,
                                        const Eigen::MatrixXd& S, const std::map<int, double>& corrections) {
    Eigen::MatrixXd out = R - S + (R * X - X * R) - 0.5 * (S * X - X * S);
    for (std::size_t a = 0; a < blk.size(); ++a) {
        const double r = corrections.at(blk.states[a].j);
        out(a, a) -= blk.states[a].conj ? -r : r;
    }
    return out;
}

struct ReductionHistory {
    std::vector<NormalForm> normals;         // mu^(0) .. mu^(nbar)
    std::vector<KamStepDiagnostics> steps;
    std::vector<double> offdiag_norms;       // weighted off-diagonal norm of R^(n)
    std::vector<double> eigen_drift;         // sup_j |j|^1/2 |mu^(n) - mu^(n-1)|, n >= 1
    double eigen_weight = 0.0;               // sup_j |j|^1/2 |mu^(nbar) - mu^(0)|
    double conjugacy_residual = 0.0;         // max |U^-1 A0 U - A_nbar| over entries
    double smallness = 0.0;                  // N0^tau2 eps upsilon^-4 (advisory)
    double quadratic_constant = 0.0;         // max_n |R_{n+1}| / (N_n^tau1 |R_n|^2 / upsilon + N_n^-b |<d_phi>^b R_n|)
    bool diverged = false;
    KamState final_state;
    std::vector<Eigen::MatrixXd> U;          // accumulated e^X0 e^X1 ... per block
};

namespace detail {

inline double phi_weighted_norm(const KamLattice& lat, const std::vector<Eigen::MatrixXd>& R, double b) {
    double out = 0.0;
    for (std::size_t k = 0; k < R.size(); ++k) {
        const auto& blk = lat.blocks()[k];
        Eigen::MatrixXd W = off_diagonal(R[k]).cwiseAbs();
        for (std::size_t a = 0; a < blk.size(); ++a)
            for (std::size_t c = 0; c < blk.size(); ++c)
                W(a, c) *= std::pow(bracket(diff(blk.states[a].ell, blk.states[c].ell)), b) *
                           std::pow(j_bracket(blk.states[a].j) * j_bracket(blk.states[c].j), 0.25);
        out = std::max(out, spectral_norm(W));
    }
    return out;
}

}  // namespace detail

/// Runs nbar KAM steps and verifies the accumulated conjugation densely.
inline ReductionHistory run_reduction(const KamLattice& lat, const KamState& L0, const RealVec& omega,
                                      const KamSchedule& sched, double eps, double x_norm_guard = 1.0) {
    sched.validate();
    require(omega.size() == lat.sites().nu(), "run_reduction: frequency dimension mismatch");
    ReductionHistory h;
    h.smallness = std::pow(sched.N0, sched.tau2()) * eps * std::pow(sched.upsilon, -4.0);
    h.normals.push_back(L0.normal);
    h.offdiag_norms.push_back(remainder_norms(lat, L0.R).weighted);
    const auto& blocks = lat.blocks();
    h.U.resize(blocks.size());
    for (std::size_t b = 0; b < blocks.size(); ++b)
        h.U[b] = Eigen::MatrixXd::Identity(blocks[b].size(), blocks[b].size());

    KamState cur = L0;
    for (int n = 0; n < sched.nbar; ++n) {
        const double Nn = sched.scale(n);
        const double rn = h.offdiag_norms.back();
        const double rb = detail::phi_weighted_norm(lat, cur.R, sched.b());
        auto st = kam_step(lat, cur, omega, sched, n, x_norm_guard);
        parallel_for(blocks.size(), [&](std::size_t b) { h.U[b] = h.U[b] * st.E[b]; });
        const double next = st.diag.after.weighted;
        if (next > rn) h.diverged = true;
        const double model = std::pow(Nn, sched.tau1()) * rn * rn / sched.upsilon + std::pow(Nn, -sched.b()) * rb;
        if (model > 0.0) h.quadratic_constant = std::max(h.quadratic_constant, next / model);
        double drift = 0.0;
        for (const auto& [j, mu] : st.next.normal.mu)
            drift = std::max(drift, std::sqrt(std::abs(static_cast<double>(j))) * std::abs(mu - cur.normal.at(j)));
        h.eigen_drift.push_back(drift);
        h.offdiag_norms.push_back(next);
        h.normals.push_back(st.next.normal);
        h.steps.push_back(st.diag);
        cur = std::move(st.next);
    }
    for (const auto& [j, mu] : cur.normal.mu)
        h.eigen_weight = std::max(h.eigen_weight, std::sqrt(std::abs(static_cast<double>(j))) * std::abs(mu - L0.normal.at(j)));

    // Dense check: U^-1 (Lambda_0 + R_0) U against Lambda_nbar + R_nbar, with U^-1 from an LU solve.
    std::vector<double> resid(blocks.size(), 0.0);
    parallel_for(blocks.size(), [&](std::size_t b) {
        const auto& blk = blocks[b];
        const std::size_t sz = blk.size();
        Eigen::MatrixXd A0 = L0.R[b], An = cur.R[b];
        for (std::size_t a = 0; a < sz; ++a) {
            A0(a, a) += detail::diagonal_entry(blk.states[a], omega, L0.normal);
            An(a, a) += detail::diagonal_entry(blk.states[a], omega, cur.normal);
        }
        const Eigen::MatrixXd conj = h.U[b].partialPivLu().solve(A0 * h.U[b]);
        resid[b] = sz ? (conj - An).cwiseAbs().maxCoeff() : 0.0;
    });
    h.conjugacy_residual = *std::max_element(resid.begin(), resid.end());
    h.final_state = std::move(cur);
    return h;
}

}  // namespace vortexkam
