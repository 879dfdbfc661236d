#include <gtest/gtest.h>

#include "oracles.hpp"
#include "vortexkam/dispersion.hpp"

using namespace vortexkam;

namespace {

DispersionParams deep(double g = 1.0) { return {g, Depth::infinite(), 0.0, 2.0}; }
DispersionParams shallow(double h, double g = 1.0) { return {g, Depth::finite(h), 0.0, 2.0}; }

}  // namespace

TEST(Dispersion, SymbolValues) {
    EXPECT_DOUBLE_EQ(symbol_G0(4, Depth::infinite()), 4.0);
    EXPECT_DOUBLE_EQ(symbol_G0(-3, Depth::infinite()), 3.0);
    EXPECT_NEAR(symbol_G0(1, Depth::finite(1.0)), static_cast<double>(oracle::tanh_series(1.0L)), 1e-15);
    EXPECT_THROW(symbol_G0(0, Depth::infinite()), ValidationError);
}

TEST(Dispersion, FiniteDepthLimitBound) {
    for (double h : {0.3, 1.0, 4.0})
        for (int j = 1; j <= 60; ++j) {
            const double G = symbol_G0(j, Depth::finite(h));
            EXPECT_LE(std::abs(G - j), 2.0 * j * std::exp(-2.0 * h * j) + 4.0 * j * 1e-16);
        }
    // Very large arguments stay finite and equal to |j|.
    EXPECT_DOUBLE_EQ(symbol_G0(100000, Depth::finite(5.0)), 100000.0);
}

TEST(Dispersion, FrequencyExamples) {
    EXPECT_NEAR(omega_j(1, deep(), 2.0), std::sqrt(2.0), 1e-15);
    EXPECT_NEAR(omega_j(5, deep(), 0.0), std::sqrt(5.0), 1e-15);
    EXPECT_NEAR(omega_j(-5, deep(), 0.0), std::sqrt(5.0), 1e-15);
    EXPECT_NEAR(omega_j(2, shallow(1.0, 9.81), 0.0), std::sqrt(9.81 * 2 * std::tanh(2.0)), 1e-14);
    EXPECT_NEAR(Omega_j(1, deep(), 2.0), std::sqrt(2.0) + 1.0, 1e-15);
    EXPECT_NEAR(Omega_j(-1, deep(), 2.0), std::sqrt(2.0) - 1.0, 1e-15);
    EXPECT_NEAR(Omega_j(4, deep(), 0.0), 2.0, 1e-15);
}

TEST(Dispersion, EvennessAndSplitting) {
    for (const auto& p : {deep(), shallow(0.7), shallow(2.0, 9.81)})
        for (double gamma : {-1.3, 0.0, 0.4, 2.0})
            for (int j = 1; j <= 40; ++j) {
                EXPECT_EQ(omega_j(j, p, gamma), omega_j(-j, p, gamma));
                EXPECT_EQ(symbol_G0(j, p.depth), symbol_G0(-j, p.depth));
                const double sum = Omega_j(j, p, gamma) + Omega_j(-j, p, gamma);
                const double diff = Omega_j(j, p, gamma) - Omega_j(-j, p, gamma);
                EXPECT_NEAR(sum, 2.0 * omega_j(j, p, gamma), 1e-12 * sum);
                const double expect = gamma * symbol_G0(j, p.depth) / j;
                EXPECT_NEAR(diff, expect, 1e-12 * std::max(1.0, std::abs(expect)));
            }
}

TEST(Dispersion, MatrixEigenvalueOracle) {
    for (double gamma : {0.0, 1.0, 2.0})
        for (double h : {0.0, 1.0}) {
            DispersionParams p{1.0, h > 0 ? Depth::finite(h) : Depth::infinite(), 0.0, 2.0};
            const int K = 32;
            const auto eig = oracle::wahlen_spectrum(K, 1.0, gamma, h);
            std::vector<double> expect;
            for (int j = -K; j <= K; ++j)
                if (j != 0) {
                    expect.push_back(Omega_j(j, p, gamma));
                    expect.push_back(-Omega_j(j, p, gamma));
                }
            std::sort(expect.begin(), expect.end());
            ASSERT_EQ(eig.size(), expect.size());
            for (std::size_t k = 0; k < eig.size(); ++k) EXPECT_NEAR(eig[k], expect[k], 1e-9);
        }
}

TEST(Dispersion, CoefficientsMP) {
    const auto a = coeffs_M_P(1, deep(), 0.0);
    EXPECT_DOUBLE_EQ(a.M, 1.0);
    EXPECT_DOUBLE_EQ(a.P_plus, 1.0);
    EXPECT_DOUBLE_EQ(a.P_minus, -1.0);
    const auto b = coeffs_M_P(2, deep(), 2.0);
    EXPECT_NEAR(b.P_plus - b.P_minus, 2.0 / b.M, 1e-15);
    // Quartic root evaluated with long double arithmetic.
    const auto p = shallow(2.0, 9.81);
    const long double G = 3.0L * oracle::tanh_series(6.0L);
    const long double M = std::pow(G / (9.81L + 0.25L * G / 9.0L), 0.25L);
    const auto c = coeffs_M_P(3, p, 1.0);
    EXPECT_NEAR(c.M, static_cast<double>(M), 1e-15);
    EXPECT_NEAR(c.P_plus, static_cast<double>(0.5L * M / 3.0L + 1.0L / M), 1e-14);
    EXPECT_NEAR(c.P_minus, static_cast<double>(0.5L * M / 3.0L - 1.0L / M), 1e-14);
    EXPECT_THROW(coeffs_M_P(0, p, 1.0), ValidationError);
}

TEST(Dispersion, RemainderCj) {
    EXPECT_EQ(c_j_remainder(1000, deep(), 0.0), 0.0);
    EXPECT_NEAR(c_j_remainder(1, deep(), 2.0), std::sqrt(2.0) - 1.0, 1e-15);
    // Rationalized form agrees with the naive one where the latter is accurate and stays bounded.
    for (const auto& p : {deep(), shallow(0.5), shallow(3.0, 9.81)}) {
        double sup = 0.0;
        for (double gamma : {0.0, 0.5, 2.0})
            for (int j = 1; j <= 10000; j += (j < 50 ? 1 : 97)) {
                const double c = c_j_remainder(j, p, gamma);
                sup = std::max(sup, std::abs(c));
                if (j <= 20) {
                    const double naive = (omega_j(j, p, gamma) - std::sqrt(p.g * j)) * std::sqrt(p.g * j);
                    EXPECT_NEAR(c, naive, 1e-10 * std::max(1.0, std::abs(naive)));
                }
            }
        EXPECT_LT(sup, 10.0);
    }
    // Deep water, gamma > 0: exact value gamma^2/4 / (1 + sqrt(1 + gamma^2/(4 g j))).
    const double j = 1e4, gam = 2.0;
    EXPECT_NEAR(c_j_remainder(10000, deep(), gam), 1.0 / (1.0 + std::sqrt(1.0 + gam * gam / (4 * j))), 1e-15);
}

TEST(Dispersion, JetsAtZero) {
    EXPECT_NEAR(dgamma_Omega(2, 2, deep(), 0.0), std::sqrt(2.0) / 8.0, 1e-15);
    EXPECT_NEAR(dgamma_Omega(1, 1, deep(), 0.0), 0.5, 1e-15);
    EXPECT_NEAR(dgamma_Omega(-1, 1, deep(), 0.0), -0.5, 1e-15);
    // Closed jets vs finite differences evaluated away from the closed-form branch.
    for (const auto& p : {deep(), shallow(1.0)})
        for (int j : {1, -2, 3, 5})
            for (int n = 1; n <= 6; ++n) {
                auto f = [&](double gm) { return Omega_j(j, p, gm); };
                const double closed = dgamma_Omega(j, n, p, 0.0);
                if (n <= 4) {  // double-precision differences lose accuracy beyond fourth order
                    const double fd = oracle::richardson_derivative(f, 0.0, n, 0.2);
                    EXPECT_NEAR(fd, closed, 1e-6 * std::max(1.0, std::abs(closed))) << "j=" << j << " n=" << n;
                }
                // The power-series branch used at gamma != 0, evaluated at gamma = 0.
                const double series = detail::Omega_series_jet(j, n, p, 0.0)[n];
                EXPECT_NEAR(series, closed, 1e-12 * std::max(1.0, std::abs(closed)));
            }
    EXPECT_THROW(dgamma_Omega(1, kMaxJetOrder + 1, deep(), 0.3), ValidationError);
}

TEST(Dispersion, JetsAwayFromZero) {
    for (const auto& p : {deep(), shallow(0.8, 9.81)})
        for (int j : {1, -1, 4, -7})
            for (double gm : {0.3, 1.1, -0.9})
                for (int n = 0; n <= 5; ++n) {
                    auto f = [&](double x) { return Omega_j(j, p, x); };
                    const double fd = oracle::richardson_derivative(f, gm, n, 0.25);
                    const double jet = dgamma_Omega(j, n, p, gm);
                    EXPECT_NEAR(jet, fd, 2e-6 * std::max(1.0, std::abs(fd))) << j << " " << gm << " " << n;
                }
    // Continuity of the two branches at gamma = 0.
    for (int n = 0; n <= 8; ++n)
        EXPECT_NEAR(dgamma_Omega(3, n, deep(), 1e-9), dgamma_Omega(3, n, deep(), 0.0), 1e-6);
}

TEST(Dispersion, TangentialVector) {
    TangentialSites s({1, 2}, {1, 1});
    const auto w = tangential_vector(s, deep(), 0.0);
    EXPECT_NEAR(w[0], 1.0, 1e-15);
    EXPECT_NEAR(w[1], std::sqrt(2.0), 1e-15);
    TangentialSites t({1, 2}, {1, -1});
    const auto v = tangential_vector(t, deep(), 2.0);
    EXPECT_NEAR(v[0], Omega_j(1, deep(), 2.0), 1e-15);
    EXPECT_NEAR(v[1], Omega_j(-2, deep(), 2.0), 1e-15);
    // Flipping a sign changes only the odd part.
    EXPECT_NEAR(v[1] + tangential_vector(s, deep(), 2.0)[1], 2.0 * omega_j(2, deep(), 2.0), 1e-14);
}
