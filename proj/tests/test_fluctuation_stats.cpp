#include "homog/fluctuation_stats.hpp"

#include <cmath>
#include <cstdio>
#include <vector>

#include <Eigen/Eigenvalues>

#include "homog/random_fields.hpp"
#include "doctest.h"

using namespace homog;

namespace {

EdgeField conductance(const TorusGrid& g, const ConductanceLaw& law, std::uint64_t realization,
                      std::uint64_t master = 9001) {
    return sample_field(g, law, SeedSpec{master, realization, StreamPurpose::field_draw});
}

double rel_gap(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

}  // namespace

TEST_CASE("test functions: profiles, support gate, sampling") {
    TorusGrid g(2, 16);
    double eps = 1.0 / 16.0;

    TestFunction wide = TestFunction::matrix_bump(2, TestFunctionKind::gaussian_bump, 0.2);
    CHECK_THROWS_AS(sample_matrix_function(wide, g, eps), SupportOverflow);
    TestFunction edge = TestFunction::matrix_bump(2, TestFunctionKind::gaussian_bump, 0.125);
    CHECK_NOTHROW(sample_matrix_function(edge, g, eps));  // 4w equals half the box exactly

    // tensor bump has exact compact support, gaussian peaks at the center
    TestFunction tb = TestFunction::vector_bump(2, TestFunctionKind::tensor_bump, 0.05);
    EdgeField ts = sample_vector_function(tb, g, eps);
    std::array<int, kMaxDim> corner{0, 0, 0, 0};
    CHECK(ts.at(g.index(corner), 0) == 0.0);
    std::array<int, kMaxDim> mid{8, 8, 0, 0};
    CHECK(ts.at(g.index(mid), 0) == doctest::Approx(1.0));
    CHECK(ts.at(g.index(mid), 1) == 0.0);  // amplitude e1

    // dipole is odd across the center in direction 1
    TestFunction dp = TestFunction::vector_bump(2, TestFunctionKind::dipole, 0.1);
    EdgeField ds = sample_vector_function(dp, g, eps);
    std::array<int, kMaxDim> xp{10, 8, 0, 0}, xm{6, 8, 0, 0};
    CHECK(ds.at(g.index(xp), 0) == doctest::Approx(-ds.at(g.index(xm), 0)).epsilon(1e-12));

    // doubled box with the same eps: support check uses the box side L*eps
    TorusGrid g2(2, 32);
    CHECK_NOTHROW(sample_matrix_function(wide, g2, eps));

    TestFunction bad = TestFunction::matrix_bump(2);
    bad.center = {0.5};
    CHECK_THROWS_AS(sample_matrix_function(bad, g, eps), std::invalid_argument);
}

TEST_CASE("rve statistics: two-formula identity, symmetry, PSD, jackknife") {
    TorusGrid g(2, 8);
    ConductanceLaw law = ConductanceLaw::two_point(0.5, 1.0, 0.5);
    const int N = 24;
    std::vector<EdgeField> fields;
    std::vector<std::vector<NodeField>> phis;
    std::vector<Eigen::MatrixXd> abars;
    for (int n = 0; n < N; ++n) {
        fields.push_back(conductance(g, law, static_cast<std::uint64_t>(n), 31337));
        std::vector<NodeField> phi;
        for (int i = 0; i < g.d; ++i) phi.push_back(solve_corrector(fields.back(), i).first);
        abars.push_back(homogenized_coefficient(fields.back(), phi));
        phis.push_back(std::move(phi));
    }
    RveEstimate est = rve_statistics(abars, g.d, g.L);
    CHECK(est.n_samples == N);

    // commutator-average form with abar_ref = abar_{L,N} gives the same Q
    double Ld = std::pow(static_cast<double>(g.L), g.d);
    Tensor4 q2(g.d);
    for (int n = 0; n < N; ++n) {
        CommutatorField xi = commutator(fields[static_cast<std::size_t>(n)],
                                        phis[static_cast<std::size_t>(n)], est.abar_mean);
        Eigen::MatrixXd m(g.d, g.d);
        for (int i = 0; i < g.d; ++i)
            for (int j = 0; j < g.d; ++j) m(i, j) = xi.xi.component_mean(i, j);
        for (int i = 0; i < g.d; ++i)
            for (int j = 0; j < g.d; ++j)
                for (int k = 0; k < g.d; ++k)
                    for (int l = 0; l < g.d; ++l) q2.at(i, j, k, l) += m(i, j) * m(k, l);
    }
    for (double& x : q2.v) x *= Ld / (N - 1.0);
    for (std::size_t e = 0; e < q2.v.size(); ++e)
        CHECK(std::abs(est.q.v[e] - q2.v[e]) <= 1e-10 * std::max(1.0, est.q.norm()));

    // pair-exchange symmetry is exact by construction
    for (int i = 0; i < g.d; ++i)
        for (int j = 0; j < g.d; ++j)
            for (int k = 0; k < g.d; ++k)
                for (int l = 0; l < g.d; ++l) CHECK(est.q.at(i, j, k, l) == est.q.at(k, l, i, j));

    // PSD as a quadratic form on d x d matrices
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(est.q.pair_matrix());
    CHECK(eig.eigenvalues().minCoeff() >= -1e-12 * est.q.norm());

    // jackknife standard error of the mean reduces to s/sqrt(N) exactly
    for (int i = 0; i < g.d; ++i)
        for (int j = 0; j < g.d; ++j) {
            double mean = 0.0, ss = 0.0;
            for (const auto& s : abars) mean += s(i, j);
            mean /= N;
            for (const auto& s : abars) ss += (s(i, j) - mean) * (s(i, j) - mean);
            double direct = std::sqrt(ss / (N - 1.0)) / std::sqrt(static_cast<double>(N));
            CHECK(est.abar_se(i, j) == doctest::Approx(direct).epsilon(1e-12));
        }
}

TEST_CASE("rve: degenerate law gives exactly zero Q") {
    ConductanceLaw law = ConductanceLaw::two_point(0.7, 0.7, 0.5);
    RveEstimate est = rve_estimate(2, 8, 3, law, 99);
    CHECK(est.n_samples == 3);
    CHECK(est.abar_mean(0, 0) == doctest::Approx(0.7).epsilon(1e-14));
    for (double x : est.q.v) CHECK(x == 0.0);
    for (double x : est.q_se.v) CHECK(x == 0.0);
}

TEST_CASE("rve: d=1 delta-method oracle Q = abar^4 Var(1/a) = 4/81") {
    ConductanceLaw law = ConductanceLaw::two_point(0.5, 1.0, 0.5);
    RveEstimate est = rve_estimate(1, 64, 2000, law, 4242);
    CHECK(est.n_samples == 2000);
    // abar_L is a harmonic mean; its O(1/L) upward bias abar^3 Var(1/a)/L
    // (~1.2e-3 at L=64) sits beside the statistical band
    double bias = std::pow(2.0 / 3.0, 3) * 0.25 / 64.0;
    CHECK(std::abs(est.abar_mean(0, 0) - 2.0 / 3.0) <= 3.0 * est.abar_se(0, 0) + 1.5 * bias);
    // Q carries its own O(1/L) systematic error (~1.5% here)
    CHECK(std::abs(est.q.at(0, 0, 0, 0) - 4.0 / 81.0) <=
          3.0 * est.q_se.at(0, 0, 0, 0) + 0.03 * 4.0 / 81.0);
    CHECK(est.q_se.at(0, 0, 0, 0) > 0.0);
    CHECK(est.law == "two_point(0.5,1,0.5)");
}

TEST_CASE("rve: jackknife errors shrink like 1/sqrt(N)") {
    ConductanceLaw law = ConductanceLaw::uniform(0.5);
    RveEstimate a = rve_estimate(1, 16, 500, law, 17);
    RveEstimate b = rve_estimate(1, 16, 1000, law, 17);
    double ratio_q = a.q_se.at(0, 0, 0, 0) / b.q_se.at(0, 0, 0, 0);
    double ratio_abar = a.abar_se(0, 0) / b.abar_se(0, 0);
    double root2 = std::sqrt(2.0);
    CHECK(ratio_q >= 0.85 * root2);
    CHECK(ratio_q <= 1.15 * root2);
    CHECK(ratio_abar >= 0.85 * root2);
    CHECK(ratio_abar <= 1.15 * root2);
}

TEST_CASE("rve edge cases: small N and failed solves") {
    ConductanceLaw law = ConductanceLaw::uniform(0.5);
    std::vector<Eigen::MatrixXd> two{Eigen::MatrixXd::Constant(1, 1, 0.6),
                                     Eigen::MatrixXd::Constant(1, 1, 0.7)};
    RveEstimate est = rve_statistics(two, 1, 8);
    CHECK(std::isnan(est.q_se.at(0, 0, 0, 0)));  // leave-one-out needs N >= 3
    CHECK(est.q.at(0, 0, 0, 0) > 0.0);
    CHECK_THROWS_AS(rve_statistics({two[0]}, 1, 8), InsufficientSamples);

    SolveConfig strangled;
    strangled.max_iter = 1;
    strangled.precond = Preconditioner::none;
    CHECK_THROWS_AS(rve_estimate(2, 8, 3, law, 5, strangled), InsufficientSamples);
}

TEST_CASE("functionals: linearity and constant-coefficient zeros") {
    TorusGrid g(2, 16);
    double eps = 1.0 / 16.0;
    ConductanceLaw law = ConductanceLaw::two_point(0.5, 1.0, 0.5);
    EdgeField a = conductance(g, law, 7);
    CorrectorPack pack = build_corrector_pack(a);
    CommutatorField xi = commutator(a, pack.phi, pack.abar);

    TestFunction F = TestFunction::matrix_bump(2);
    TestFunction G = TestFunction::matrix_bump(2, TestFunctionKind::tensor_bump, 0.07);
    G.amplitude << 0.3, -1.1, 0.5, 0.9;

    // raw-field linearity across different profiles
    MatrixField FS = sample_matrix_function(F, g, eps);
    MatrixField GS = sample_matrix_function(G, g, eps);
    MatrixField combo(g);
    const double alpha = 0.37;
    for (std::int64_t n = 0; n < g.nodes; ++n)
        for (int i = 0; i < g.d; ++i)
            for (int j = 0; j < g.d; ++j)
                combo.at(n, i, j) = alpha * FS.at(n, i, j) + GS.at(n, i, j);
    double lhs = j0_functional(xi, combo, eps);
    double rhs = alpha * j0_functional(xi, FS, eps) + j0_functional(xi, GS, eps);
    CHECK(rel_gap(lhs, rhs) <= 1e-12);

    // amplitude linearity for the corrector functionals
    TestFunction H = F;
    H.amplitude = alpha * F.amplitude + G.amplitude;
    TestFunction G1 = F;
    G1.amplitude = G.amplitude;
    CorrectorFunctionals cH = corrector_functionals(pack, pack.abar, H, eps);
    CorrectorFunctionals cF = corrector_functionals(pack, pack.abar, F, eps);
    CorrectorFunctionals cG = corrector_functionals(pack, pack.abar, G1, eps);
    CHECK(rel_gap(cH.j1, alpha * cF.j1 + cG.j1) <= 1e-12);
    CHECK(rel_gap(cH.j2, alpha * cF.j2 + cG.j2) <= 1e-12);

    // constant coefficients: everything vanishes against abar_ref = a Id
    EdgeField ac(g, 0.8);
    CorrectorPack cpack = build_corrector_pack(ac);
    CorrectorFunctionals cc = corrector_functionals(cpack, cpack.abar, F, eps);
    CHECK(std::abs(cc.j1) <= 1e-13);
    CHECK(std::abs(cc.j2) <= 1e-13);
    CommutatorField cxi = commutator(ac, cpack.phi, cpack.abar);
    TestFunction f = TestFunction::vector_bump(2);
    FunctionalSample fs = solution_functionals(ac, cxi, f, f, eps);
    // a - abar_ref and the commutator vanish up to the ulp-level roundoff of
    // the computed abar
    CHECK(std::abs(fs.e0_flux_raw) <= 1e-13);
    CHECK(std::abs(fs.e0_comm_raw) <= 1e-13);
    CHECK(std::abs(fs.pathwise_lhs) <= 1e-7);
    CHECK(std::abs(fs.pathwise_rhs) <= 1e-7);
    CHECK(std::isfinite(fs.i1_raw));
    CHECK(std::abs(fs.i1_raw) > 1e-6);  // the solve itself is nontrivial
}

TEST_CASE("functional identities: J2 = J0 + J1(F abar) and J1 = -J0 of the projected F") {
    TorusGrid g(2, 16);
    double eps = 1.0 / 16.0;
    EdgeField a = conductance(g, ConductanceLaw::uniform(0.5), 11);
    CorrectorPack pack = build_corrector_pack(a);

    TestFunction F = TestFunction::matrix_bump(2);
    F.amplitude << 1.0, 0.4, -0.2, 0.7;

    SUBCASE("flux form decomposes exactly") {
        Eigen::MatrixXd abar_ref(2, 2);
        abar_ref << 0.9, 0.05, 0.05, 0.8;
        CommutatorField xi = commutator(a, pack.phi, abar_ref);
        CorrectorFunctionals cf = corrector_functionals(pack, abar_ref, F, eps);
        TestFunction FA = F;
        FA.amplitude = F.amplitude * abar_ref;
        double j0 = j0_functional(xi, F, eps);
        double j1a = corrector_functionals(pack, abar_ref, FA, eps).j1;
        CHECK(rel_gap(cf.j2, j0 + j1a) <= 1e-12);
    }

    SUBCASE("gradient form matches the adjoint Helmholtz projection") {
        CommutatorField xi = commutator(a, pack.phi, pack.abar);
        CorrectorFunctionals cf = corrector_functionals(pack, pack.abar, F, eps);
        MatrixField FS = sample_matrix_function(F, g, eps);
        MatrixField proj(g);
        for (int i = 0; i < g.d; ++i) {
            EdgeField row(g);
            for (std::int64_t n = 0; n < g.nodes; ++n)
                for (int j = 0; j < g.d; ++j) row.at(n, j) = FS.at(n, i, j);
            EdgeField prow = helmholtz_project_adjoint(pack.abar, row);
            for (std::int64_t n = 0; n < g.nodes; ++n)
                for (int j = 0; j < g.d; ++j) proj.at(n, i, j) = prow.at(n, j);
        }
        double j0p = j0_functional(xi, proj, eps);
        CHECK(std::abs(cf.j1 + j0p) <= 1e-6 * std::max(1.0, std::abs(cf.j1)));
    }
}

TEST_CASE("solution functionals: d=1 quadrature oracle") {
    TorusGrid g(1, 32);
    double eps = 1.0 / 32.0;
    EdgeField a = conductance(g, ConductanceLaw::uniform(0.5), 3);
    NodeField phi = solve_corrector(a, 0).first;
    Eigen::MatrixXd abar = homogenized_coefficient(a, {phi});
    CommutatorField xi = commutator(a, {phi}, abar);
    TestFunction f = TestFunction::vector_bump(1);
    FunctionalSample fs = solution_functionals(a, xi, f, f, eps);

    // conserved flux: a grad U + h = c with c the a^{-1}-weighted mean of h
    EdgeField fv = sample_vector_function(f, g, eps);
    double num = 0.0, den = 0.0;
    for (std::int64_t n = 0; n < g.nodes; ++n) {
        num += eps * fv.at(n, 0) / a.at(n, 0);
        den += 1.0 / a.at(n, 0);
    }
    double c = num / den;
    double i1 = 0.0, i2 = 0.0;
    for (std::int64_t n = 0; n < g.nodes; ++n) {
        double grad = (c - eps * fv.at(n, 0)) / a.at(n, 0);
        i1 += fv.at(n, 0) * grad;
        i2 += fv.at(n, 0) * a.at(n, 0) * grad;
    }
    double pref = std::pow(eps, 0.5 * g.d - 1.0);
    CHECK(fs.i1_raw == doctest::Approx(pref * i1).epsilon(1e-7));
    CHECK(fs.i2_raw == doctest::Approx(pref * i2).epsilon(1e-7));
    CHECK(fs.reports.size() == 3);
}

TEST_CASE("pathwise identity holds per realization") {
    TorusGrid g(2, 16);
    double eps = 1.0 / 16.0;
    ConductanceLaw law = ConductanceLaw::two_point(0.5, 1.0, 0.5);
    SolveConfig cfg;
    TestFunction f = TestFunction::vector_bump(2);
    TestFunction gg = TestFunction::vector_bump(2, TestFunctionKind::dipole, 0.1);
    for (std::uint64_t r = 0; r < 3; ++r) {
        EdgeField a = conductance(g, law, r, 606);
        std::vector<NodeField> phi;
        for (int i = 0; i < g.d; ++i) phi.push_back(solve_corrector(a, i, cfg).first);
        // the identity holds for any consistent constant reference, not just abar_L
        Eigen::MatrixXd abar_ref =
            (r == 2) ? (0.7 * Eigen::MatrixXd::Identity(2, 2)).eval() : homogenized_coefficient(a, phi);
        CommutatorField xi = commutator(a, phi, abar_ref);
        FunctionalSample fs = solution_functionals(a, xi, f, gg, eps, cfg);
        double scale = std::max({1.0, std::abs(fs.pathwise_lhs), std::abs(fs.pathwise_rhs)});
        CHECK(std::abs(fs.pathwise_lhs - fs.pathwise_rhs) <= 100.0 * cfg.tol * scale);
        CHECK(std::abs(fs.pathwise_lhs) > 1e-12);
    }
}

TEST_CASE("green-kubo: unit covariance normalization on synthetic white noise") {
    auto normal_field = [](const TorusGrid& g, std::uint64_t realization) {
        MatrixField xi(g);
        for (std::int64_t n = 0; n < g.nodes; ++n) {
            CounterStream cs = stream_for(SeedSpec{808, realization, StreamPurpose::synthetic}, n, 0);
            for (int i = 0; i < g.d; ++i)
                for (int j = 0; j < g.d; ++j) xi.at(n, i, j) = cs.next_normal();
        }
        return xi;
    };
    TorusGrid g(2, 8);  // torus side 2L with L=4
    GreenKuboAccumulator acc(g, 4, 40);
    for (std::uint64_t r = 0; r < 400; ++r) acc.add(normal_field(g, r));
    CHECK(acc.completed_batches() == 10);
    Tensor4 est = acc.estimate();
    Tensor4 se = acc.standard_error();
    // iid N(0,1) entries: covariance is delta in lag and component pair, the
    // window weight at lag 0 is 1
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            for (int k = 0; k < 2; ++k)
                for (int l = 0; l < 2; ++l) {
                    double want = (i == k && j == l) ? 1.0 : 0.0;
                    CHECK(std::abs(est.at(i, j, k, l) - want) <=
                          3.0 * se.at(i, j, k, l) + 0.05);
                }
}

TEST_CASE("green-kubo: d=1 iid-site oracle 4/81 and degenerate zero") {
    ConductanceLaw law = ConductanceLaw::two_point(0.5, 1.0, 0.5);
    TorusGrid g(1, 128);  // 2L with L=64
    Eigen::MatrixXd abar_ref = Eigen::MatrixXd::Constant(1, 1, 2.0 / 3.0);
    GreenKuboAccumulator acc(g, 64, 100);
    for (std::uint64_t r = 0; r < 1000; ++r) {
        EdgeField a = conductance(g, law, r, 2718);
        NodeField phi = solve_corrector(a, 0).first;
        CommutatorField xi = commutator(a, {phi}, abar_ref);
        acc.add(xi.xi);
    }
    Tensor4 est = acc.estimate();
    Tensor4 se = acc.standard_error();
    // only the lag-0 term survives; O(1/L) corrections from the global
    // harmonic mean sit beside the statistical band
    CHECK(std::abs(est.at(0, 0, 0, 0) - 4.0 / 81.0) <=
          3.0 * se.at(0, 0, 0, 0) + 0.03 * 4.0 / 81.0);

    // degenerate law: commutator vanishes identically
    std::vector<MatrixField> xis;
    for (std::uint64_t r = 0; r < 4; ++r) {
        EdgeField a(g, 0.7);
        NodeField phi = solve_corrector(a, 0).first;
        Eigen::MatrixXd ab = homogenized_coefficient(a, {phi});
        xis.push_back(commutator(a, {phi}, ab).xi);
    }
    Tensor4 zero = green_kubo_window(xis, 64);
    CHECK(std::abs(zero.at(0, 0, 0, 0)) <= 1e-24);

    CHECK_THROWS_AS(green_kubo_window({xis[0]}, 64), InsufficientSamples);
    CHECK_THROWS_AS(GreenKuboAccumulator(g, 32, 10), std::invalid_argument);  // side != 2L
    GreenKuboAccumulator empty(g, 64, 2);
    CHECK_THROWS_AS(empty.estimate(), InsufficientSamples);
}

TEST_CASE("normality metrics: pinned normal sample, two-point gap, degenerate input") {
    std::vector<double> z;
    CounterStream cs = stream_for(SeedSpec{4242, 0, StreamPurpose::synthetic}, 0, 0);
    for (int k = 0; k < 10000; ++k) z.push_back(1.7 + 0.3 * cs.next_normal());
    NormalityMetrics nm = normality_metrics(z);
    CHECK(nm.kolmogorov <= 0.02);
    CHECK(nm.wasserstein1 <= 0.02);

    std::vector<double> pm;
    for (int k = 0; k < 10000; ++k) pm.push_back(k % 2 == 0 ? -1.0 : 1.0);
    NormalityMetrics nm2 = normality_metrics(pm);
    CHECK(nm2.kolmogorov >= 0.3);

    CHECK_THROWS_AS(normality_metrics(std::vector<double>(500, 3.25)), DegenerateSample);
    CHECK_THROWS_AS(normality_metrics(std::vector<double>(50, 0.0)), InsufficientSamples);
}

TEST_CASE("normal quantile: inverse of the CDF") {
    CHECK(normal_quantile(0.5) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(normal_quantile(0.975) == doctest::Approx(1.9599639845400545).epsilon(1e-8));
    for (double x : {-2.5, -1.0, -0.1, 0.7, 3.0})
        CHECK(normal_quantile(normal_cdf(x)) == doctest::Approx(x).epsilon(1e-8));
    CHECK_THROWS_AS(normal_quantile(0.0), std::invalid_argument);
    CHECK_THROWS_AS(normal_quantile(1.0), std::invalid_argument);
}

TEST_CASE("scaling fit: exact power laws and corrections") {
    std::vector<ScalingPoint> pts;
    for (double x : {4.0, 8.0, 16.0, 32.0}) pts.push_back({x, std::pow(x, -2.0), 0.0});
    ScalingFit fit = scaling_fit(pts);
    CHECK(std::abs(fit.slope + 2.0) <= 1e-12);

    std::vector<ScalingPoint> logpts;
    for (double x : {4.0, 8.0, 16.0, 32.0, 64.0})
        logpts.push_back({x, std::log(2.0 + x) / x, 0.01 * std::log(2.0 + x) / x});
    ScalingFit corrected = scaling_fit(logpts, 1.0);
    CHECK(std::abs(corrected.slope + 1.0) <= 0.02);
    CHECK(corrected.slope_stderr > 0.0);
    ScalingFit uncorrected = scaling_fit(logpts, 0.0);
    CHECK(std::abs(uncorrected.slope + 1.0) > 0.05);  // the log factor bends the fit

    CHECK_THROWS_AS(scaling_fit({{2.0, 1.0, 0.0}, {4.0, 0.5, 0.0}}), InsufficientPoints);
    CHECK_THROWS_AS(scaling_fit({{2.0, 1.0, 0.0}, {4.0, -0.5, 0.0}, {8.0, 0.1, 0.0}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(scaling_fit({{2.0, 1.0, 0.0}, {2.0, 0.5, 0.0}, {2.0, 0.1, 0.0}}),
                    std::invalid_argument);
}
