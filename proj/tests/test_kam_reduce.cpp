#include <gtest/gtest.h>

#include "kam_oracle.hpp"
#include "vortexkam/kam_reduce.hpp"

using namespace vortexkam;

namespace {

const TangentialSites kSites({1, 2}, {1, 1});

DispersionParams unit_gravity() {
    DispersionParams p;
    p.g = 1.0;
    return p;
}

struct Instance {
    NormalForm nf;
    RealVec omega;
    KamLattice lat;
    RemainderTables tables;
    KamState L0;
};

Instance make_instance(int Lop, int J, double eps, std::uint64_t seed = 5, double gamma = 0.73) {
    const auto disp = unit_gravity();
    auto nf = NormalForm::initial(kSites, disp, gamma, 0.0, 1.0, 0.0, J);
    auto omega = tangential_vector(kSites, disp, gamma);
    KamLattice lat(kSites, Lop, J);
    RemainderSpec spec;
    spec.eps = eps;
    spec.seed = seed;
    auto tables = build_remainder(kSites, Lop, J, spec);
    auto L0 = build_L0(nf, lat, tables);
    return {std::move(nf), std::move(omega), std::move(lat), std::move(tables), std::move(L0)};
}

KamSchedule small_schedule(int nbar) {
    KamSchedule s;
    s.nbar = nbar;
    s.upsilon = 1e-2;
    return s;
}

double max_abs(const std::vector<Eigen::MatrixXd>& blocks) {
    double m = 0.0;
    for (const auto& b : blocks)
        if (b.size()) m = std::max(m, b.cwiseAbs().maxCoeff());
    return m;
}

}  // namespace

TEST(NormalForm, InitialEigenvaluesFollowTheDispersion) {
    const auto disp = unit_gravity();
    const auto nf = NormalForm::initial(kSites, disp, 0.6, 0.25, 1.5, 0.1, 10);
    EXPECT_EQ(nf.mu.count(0), 0u);
    EXPECT_EQ(nf.mu.count(1), 0u);
    EXPECT_EQ(nf.mu.count(2), 0u);
    EXPECT_EQ(nf.mu.count(-1), 1u);
    for (const auto& [j, mu] : nf.mu)
        EXPECT_EQ(mu, 0.25 * j + 1.5 * Omega_j(j, disp, 0.6) - 0.1 * sgn(j));
    EXPECT_THROW(nf.at(2), ValidationError);
}

TEST(Remainder, ZeroAmplitudeGivesZeroTables) {
    const auto inst = make_instance(2, 6, 0.0);
    EXPECT_EQ(max_abs(inst.L0.R), 0.0);
}

TEST(Remainder, EntriesRespectMomentumAndIndexRange) {
    const auto inst = make_instance(3, 8, 1e-3);
    EXPECT_TRUE(inst.tables.momentum_consistent());
    std::size_t nonzero = 0;
    for (const auto& ell : lattice_box(2, inst.tables.radius()))
        for (int j = -8; j <= 8; ++j) {
            if (!kSites.is_normal(j)) {
                EXPECT_EQ(inst.tables.diag_value(ell, j), 0.0);
                EXPECT_EQ(inst.tables.off_value(ell, j), 0.0);
                continue;
            }
            if (inst.tables.diag_value(ell, j) != 0.0) {
                ++nonzero;
                const long long jp = kSites.momentum(ell) + j;
                EXPECT_TRUE(kSites.is_normal(static_cast<int>(jp)) && std::llabs(jp) <= 8);
            }
            if (inst.tables.off_value(ell, j) != 0.0) {
                const long long k = -(kSites.momentum(ell) + j);
                EXPECT_TRUE(kSites.is_normal(static_cast<int>(k)) && std::llabs(k) <= 8);
            }
        }
    EXPECT_GT(nonzero, 100u);
}

TEST(Remainder, DecayExponentsRecoveredByRegression) {
    RemainderSpec spec;
    spec.eps = 1e-3;
    spec.ell_decay = 2.5;
    spec.j_decay = 1.0;
    spec.seed = 11;
    const int Lop = 6, J = 30;
    const auto t = build_remainder(kSites, Lop, J, spec);
    // Least squares of log|entry| on (1, log<l>, log sqrt(<j><j'>)); the random factor in
    // +-[1/2, 1] only shifts the intercept on average.
    Eigen::MatrixXd A(0, 3);
    Eigen::VectorXd y(0);
    std::vector<std::array<double, 4>> rows;
    for (const auto& ell : lattice_box(2, 2 * Lop))
        for (int j = -J; j <= J; ++j) {
            const double v = t.diag_value(ell, j);
            if (v == 0.0) continue;
            const long long jp = kSites.momentum(ell) + j;
            rows.push_back({1.0, std::log(bracket(ell)),
                            0.5 * std::log(j_bracket(j) * j_bracket(static_cast<int>(jp))), std::log(std::abs(v))});
        }
    A.resize(rows.size(), 3);
    y.resize(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        A.row(r) << rows[r][0], rows[r][1], rows[r][2];
        y(r) = rows[r][3];
    }
    const Eigen::Vector3d c = A.colPivHouseholderQr().solve(y);
    EXPECT_NEAR(-c(1), spec.ell_decay, 0.1);
    EXPECT_NEAR(-c(2), spec.j_decay, 0.1);
}

TEST(Remainder, InvalidSpecRejected) {
    RemainderSpec spec;
    spec.ell_decay = -1.0;
    EXPECT_THROW(build_remainder(kSites, 2, 5, spec), ValidationError);
    spec = {};
    spec.eps = std::nan("");
    EXPECT_THROW(build_remainder(kSites, 2, 5, spec), ValidationError);
}

TEST(Divisor, ExcludedTupleAndCrossModuleValue) {
    const auto disp = unit_gravity();
    const auto nf = NormalForm::initial(kSites, disp, 0.4, 0.0, 1.0, 0.0, 12);
    const RealVec omega{1.3, 1.7};
    EXPECT_EQ(melnikov_divisor(omega, nf, {0, 0}, 5, 5, DivisorKind::difference), 0.0);
    // l = (1, 1): jvec.l = 3, so j' = j + 3 for both kinds.
    const double diff = melnikov_divisor(omega, nf, {1, 1}, 4, 7, DivisorKind::difference);
    EXPECT_NEAR(diff, 3.0 + Omega_j(4, disp, 0.4) - Omega_j(7, disp, 0.4), 1e-14);
    const double sum = melnikov_divisor(omega, nf, {1, 1}, -10, -7, DivisorKind::sum);
    EXPECT_NEAR(sum, 3.0 + Omega_j(-10, disp, 0.4) + Omega_j(7, disp, 0.4), 1e-14);
    EXPECT_THROW(melnikov_divisor(omega, nf, {1, 0}, 4, 4, DivisorKind::difference), ValidationError);
}

TEST(Divisor, SumKindAlgebraicIdentityAtZeroVorticity) {
    const auto disp = unit_gravity();
    const double m1 = 0.3, m_half = 1.2;
    const auto nf = NormalForm::initial(kSites, disp, 0.0, m1, m_half, 0.0, 12);
    const RealVec omega{0.0, 0.0};
    for (int j = -12; j <= 12; ++j)
        for (int jp = -12; jp <= 12; ++jp) {
            if (!kSites.is_normal(j) || !kSites.is_normal(-jp)) continue;
            // Pick l = (jp - j, 0) so the momentum constraint holds.
            const IntVec ell{jp - j, 0};
            const double expected = m_half * (std::sqrt(std::abs(double(j))) + std::sqrt(std::abs(double(jp)))) +
                                    m1 * (j - jp);
            EXPECT_NEAR(melnikov_divisor(omega, nf, ell, j, jp, DivisorKind::sum), expected, 1e-13);
        }
}

TEST(Lattice, BlocksPartitionTheTruncation) {
    const int Lop = 3, J = 7;
    const KamLattice lat(kSites, Lop, J);
    const auto sites = kam_oracle::enumerate_sites(kSites, Lop, J);
    EXPECT_EQ(lat.total_states(), sites.size());
    std::set<std::pair<std::size_t, std::size_t>> seen_pos, seen_neg;
    for (const auto& s : sites) {
        const LatticeState st{s.ell, s.label, s.conj};
        const auto loc = lat.locate(st);
        ASSERT_TRUE(loc.has_value());
        const auto& blk = lat.blocks()[loc->block];
        EXPECT_EQ(lat.momentum(st), loc->sign > 0 ? blk.p : -blk.p);
        auto& seen = loc->sign > 0 ? seen_pos : seen_neg;
        EXPECT_TRUE(seen.insert({loc->block, loc->index}).second);
    }
    for (const auto& blk : lat.blocks()) {
        EXPECT_GE(blk.p, 0);
        for (const auto& s : blk.states) EXPECT_EQ(lat.momentum(s), blk.p);
    }
}

TEST(Assembly, MatchesComplexOperatorOracle) {
    const auto inst = make_instance(2, 6, 1e-2);
    const auto op = kam_oracle::build(kSites, inst.tables, inst.nf, inst.omega, 2);
    EXPECT_EQ(kam_oracle::compare(inst.lat, inst.L0.R, op), 0.0);
    // Diagonal: lambda from the literal conjugate formula agrees with the real form.
    for (std::size_t a = 0; a < op.sites.size(); ++a) {
        const auto& s = op.sites[a];
        EXPECT_NEAR(op.lambda[a], detail::diagonal_entry({s.ell, s.label, s.conj}, inst.omega, inst.nf), 1e-14);
    }
}

TEST(Homological, ZeroRemainderGivesZeroGenerator) {
    const auto inst = make_instance(2, 6, 0.0);
    const auto h = solve_homological_matrix(inst.lat, inst.L0, inst.omega, 1e-2, 1.5, 8.0);
    EXPECT_EQ(max_abs(h.X), 0.0);
}

TEST(Homological, SingleEntryClosedForm) {
    auto inst = make_instance(2, 6, 0.0);
    // A single u <- u entry inside block p = 4: u((0,0), 4) <- u((1,0), 3).
    const auto a = inst.lat.locate({{0, 0}, 4, false});
    const auto b = inst.lat.locate({{1, 0}, 3, false});
    ASSERT_TRUE(a && b && a->block == b->block);
    inst.L0.R[a->block](a->index, b->index) = 2e-4;
    const auto h = solve_homological_matrix(inst.lat, inst.L0, inst.omega, 1e-3, 1.5, 8.0);
    const double d = inst.nf.at(4) - inst.omega[0] - inst.nf.at(3);
    ASSERT_GT(std::abs(d), 1e-3);
    // -R / (i d) with R = i * 2e-4.
    const cplx expected = -(kI * 2e-4) / (kI * d);
    EXPECT_NEAR(h.X[a->block](a->index, b->index), expected.real(), 1e-15 * std::abs(expected.real()));
    std::size_t nonzero = 0;
    for (const auto& X : h.X) nonzero += (X.array() != 0.0).count();
    EXPECT_EQ(nonzero, 1u);
}

TEST(Homological, ResidualVanishesWhereCutoffIsOne) {
    const auto inst = make_instance(3, 8, 1e-3);
    const double N = 4.0;
    const auto h = solve_homological_matrix(inst.lat, inst.L0, inst.omega, 1e-2, 1.5, N);
    double worst = 0.0;
    std::size_t checked = 0;
    for (std::size_t b = 0; b < inst.lat.blocks().size(); ++b) {
        const auto& blk = inst.lat.blocks()[b];
        for (std::size_t a = 0; a < blk.size(); ++a)
            for (std::size_t c = 0; c < blk.size(); ++c) {
                if (a == c) continue;
                const auto& sa = blk.states[a];
                const auto& sc = blk.states[c];
                IntVec dl{sa.ell[0] - sc.ell[0], sa.ell[1] - sc.ell[1]};
                if (bracket(dl) > N) continue;
                const double la = detail::diagonal_entry(sa, inst.omega, inst.nf);
                const double lc = detail::diagonal_entry(sc, inst.omega, inst.nf);
                const auto kind = sa.conj == sc.conj ? DivisorKind::difference : DivisorKind::sum;
                if (cutoff_chi(std::abs(la - lc) / melnikov_threshold(kind, dl, sa.j, sc.j, 1e-2, 1.5)) < 1.0) continue;
                // omega.d_phi X - i[X, D] + R on this entry, in the real form: (la - lc) X + R.
                worst = std::max(worst, std::abs((la - lc) * h.X[b](a, c) + inst.L0.R[b](a, c)));
                ++checked;
            }
    }
    EXPECT_GT(checked, 1000u);
    EXPECT_LE(worst, 1e-13);
    EXPECT_EQ(h.record.difference_violated + h.record.sum_violated, 0);
}

TEST(Step, ZeroRemainderIsAFixedPoint) {
    const auto inst = make_instance(2, 6, 0.0);
    const auto st = kam_step(inst.lat, inst.L0, inst.omega, small_schedule(1), 0);
    EXPECT_EQ(max_abs(st.next.R), 0.0);
    for (const auto& [j, mu] : st.next.normal.mu) EXPECT_EQ(mu, inst.nf.at(j));
}

TEST(Step, PhiIndependentDiagonalAbsorbedInOneStep) {
    auto inst = make_instance(2, 6, 0.0);
    // Toeplitz diagonal at l = 0 only: entries r_j on every (l, j), consistent with the mirror.
    for (std::size_t b = 0; b < inst.lat.blocks().size(); ++b) {
        const auto& blk = inst.lat.blocks()[b];
        for (std::size_t a = 0; a < blk.size(); ++a) {
            const int j = blk.states[a].j;
            const double r = 1e-4 / (1.0 + std::abs(j));
            inst.L0.R[b](a, a) = blk.states[a].conj ? -r : r;
        }
    }
    const auto st = kam_step(inst.lat, inst.L0, inst.omega, small_schedule(1), 0);
    EXPECT_EQ(max_abs(st.X), 0.0);
    EXPECT_EQ(max_abs(st.next.R), 0.0);
    for (const auto& [j, mu] : st.next.normal.mu) EXPECT_EQ(mu, inst.nf.at(j) + 1e-4 / (1.0 + std::abs(j)));
}

TEST(Step, AgreesWithComplexArithmeticRoute) {
    const auto inst = make_instance(2, 6, 5e-3);
    const auto sched = small_schedule(1);
    const auto real_step = kam_step(inst.lat, inst.L0, inst.omega, sched, 0);
    const auto op = kam_oracle::build(kSites, inst.tables, inst.nf, inst.omega, 2);
    const auto cstep = kam_oracle::step(kSites, op, inst.nf, sched.upsilon, sched.tau, sched.scale(0));
    double imag = 0.0;
    for (const auto& [j, r] : cstep.corrections) {
        imag = std::max(imag, std::abs(r.imag()));
        EXPECT_NEAR(r.real(), real_step.corrections.at(j), 1e-15);
    }
    EXPECT_LE(imag, 1e-12);
    EXPECT_LE(kam_oracle::compare(inst.lat, real_step.next.R, cstep.next), 1e-12);
}

TEST(Step, SmallGeneratorExponentialMatchesPade) {
    const auto inst = make_instance(2, 6, 1e-2);
    const auto h = solve_homological_matrix(inst.lat, inst.L0, inst.omega, 1e-2, 1.5, 8.0);
    for (const auto& X : h.X) {
        const Eigen::MatrixXd E = X.exp();
        const Eigen::MatrixXd Y = detail::expm1(X);
        EXPECT_LE((E - Eigen::MatrixXd::Identity(X.rows(), X.cols()) - Y).cwiseAbs().maxCoeff(), 1e-15);
    }
    // Larger norms take the scaling-and-squaring branch.
    Eigen::MatrixXd big = Eigen::MatrixXd::Zero(2, 2);
    big(0, 1) = 3.0;
    big(1, 0) = -3.0;
    const Eigen::MatrixXd Y = detail::expm1(big);
    EXPECT_NEAR(Y(0, 0), std::cos(3.0) - 1.0, 1e-14);
    EXPECT_NEAR(Y(0, 1), std::sin(3.0), 1e-14);
}

TEST(Step, LieSecondOrderCrossCheck) {
    for (double eps : {1e-3, 1e-4}) {
        const auto inst = make_instance(3, 8, eps);
        const auto st = kam_step(inst.lat, inst.L0, inst.omega, small_schedule(1), 0);
        double err = 0.0, xnorm = 0.0, rnorm = 0.0;
        for (std::size_t b = 0; b < inst.lat.blocks().size(); ++b) {
            const auto lie = lie_second_order(inst.lat.blocks()[b], inst.L0.R[b], st.X[b], st.solved[b], st.corrections);
            if (lie.size() == 0) continue;
            err = std::max(err, (lie - st.next.R[b]).cwiseAbs().maxCoeff());
            xnorm = std::max(xnorm, st.X[b].cwiseAbs().colwise().sum().maxCoeff());
            rnorm = std::max(rnorm, inst.L0.R[b].cwiseAbs().colwise().sum().maxCoeff());
        }
        // The neglected terms are third order: |X|^2 |R| up to a moderate constant.
        EXPECT_LE(err, 4.0 * xnorm * xnorm * rnorm) << "eps " << eps;
        EXPECT_GT(xnorm, 0.0);
    }
}

TEST(Step, NormGuardThrows) {
    const auto inst = make_instance(2, 6, 0.5);
    EXPECT_THROW(kam_step(inst.lat, inst.L0, inst.omega, small_schedule(1), 0), DivergenceError);
}

TEST(Run, QuadraticDecayAndExactConjugacy) {
    const auto inst = make_instance(4, 10, 1e-3);
    const auto h = run_reduction(inst.lat, inst.L0, inst.omega, small_schedule(3), 1e-3);
    ASSERT_EQ(h.offdiag_norms.size(), 4u);
    for (std::size_t n = 1; n < h.offdiag_norms.size(); ++n) EXPECT_LT(h.offdiag_norms[n], h.offdiag_norms[n - 1]);
    for (std::size_t n = 2; n < h.offdiag_norms.size(); ++n)
        EXPECT_LT(h.offdiag_norms[n] / h.offdiag_norms[n - 1], h.offdiag_norms[n - 1] / h.offdiag_norms[n - 2]);
    EXPECT_LE(h.offdiag_norms.back(), 1e-10);
    EXPECT_LE(h.conjugacy_residual, 1e-10);
    EXPECT_FALSE(h.diverged);
    for (const auto& s : h.steps) {
        EXPECT_TRUE(s.structure_ok);
        EXPECT_EQ(s.melnikov.damped, 0);
        EXPECT_LE(s.after.weighted, s.after.frobenius * (1.0 + 1e-12));
    }
    EXPECT_LE(h.eigen_weight, 10.0 * 1e-3);
    // Drift shrinks from step to step.
    for (std::size_t n = 1; n < h.eigen_drift.size(); ++n) EXPECT_LT(h.eigen_drift[n], h.eigen_drift[n - 1]);
}

TEST(Run, ConjugacyCheckDetectsCorruption) {
    const auto inst = make_instance(2, 6, 1e-3);
    const auto h = run_reduction(inst.lat, inst.L0, inst.omega, small_schedule(2), 1e-3);
    EXPECT_LE(h.conjugacy_residual, 1e-12);
    // Replaying the dense check with one starting entry perturbed must expose the change.
    const auto& blk = inst.lat.blocks()[0];
    Eigen::MatrixXd A0 = inst.L0.R[0], An = h.final_state.R[0];
    A0(0, 1) += 1e-6;
    for (std::size_t a = 0; a < blk.size(); ++a) {
        A0(a, a) += detail::diagonal_entry(blk.states[a], inst.omega, inst.nf);
        An(a, a) += detail::diagonal_entry(blk.states[a], inst.omega, h.final_state.normal);
    }
    const Eigen::MatrixXd conj = h.U[0].partialPivLu().solve(A0 * h.U[0]);
    EXPECT_GT((conj - An).cwiseAbs().maxCoeff(), 5e-7);
}

TEST(Run, AdversarialResonanceLeavesSuppressedMass) {
    auto inst = make_instance(3, 8, 1e-3);
    // omega_1 = mu_5 - mu_4 puts the difference divisor at l = (1, 0), j = 4, j' = 5 exactly on zero.
    inst.omega[0] = inst.nf.at(5) - inst.nf.at(4);
    auto L0 = build_L0(inst.nf, inst.lat, inst.tables);
    const auto h = run_reduction(inst.lat, L0, inst.omega, small_schedule(3), 1e-3);
    EXPECT_GT(h.steps.front().melnikov.difference_violated, 0);
    EXPECT_LE(h.steps.front().melnikov.min_difference_margin, 1e-10);
    EXPECT_GT(h.steps.front().melnikov.damped, 0);
    // The resonant entry u((l0+(1,0)), 4) <- u(l0, 5) is never removed.
    const auto a = inst.lat.locate({{1, 0}, 4, false});
    const auto b = inst.lat.locate({{0, 0}, 5, false});
    ASSERT_TRUE(a && b && a->block == b->block);
    const double start = L0.R[a->block](a->index, b->index);
    const double end = h.final_state.R[a->block](a->index, b->index);
    ASSERT_NE(start, 0.0);
    EXPECT_NEAR(end, start, 0.05 * std::abs(start));
    // The remainder floor is of the size of the suppressed entries, not below it.
    EXPECT_GE(h.offdiag_norms.back(), 0.5 * std::abs(start));
    EXPECT_LE(h.conjugacy_residual, 1e-10);
}

TEST(Run, ThreadCountDoesNotChangeResults) {
    const auto inst = make_instance(3, 8, 1e-3);
    const unsigned before = thread_budget();
    set_thread_budget(1);
    const auto h1 = run_reduction(inst.lat, inst.L0, inst.omega, small_schedule(2), 1e-3);
    set_thread_budget(3);
    const auto h3 = run_reduction(inst.lat, inst.L0, inst.omega, small_schedule(2), 1e-3);
    set_thread_budget(before);
    for (std::size_t b = 0; b < h1.final_state.R.size(); ++b)
        EXPECT_TRUE((h1.final_state.R[b].array() == h3.final_state.R[b].array()).all());
    EXPECT_EQ(h1.offdiag_norms, h3.offdiag_norms);
}
