#include "test_helpers.hpp"

#include "qbranch/echo.hpp"
#include "qbranch/robservable.hpp"

using namespace qbranch;
using testutil::max_abs;
using testutil::random_hermitian;

namespace {

TotalModel dephasing_model(Index env_dim, std::uint64_t seed, double strength) {
    EnsembleSpec env{EnsembleKind::GUE, env_dim, 0.1, seed};
    auto ops = random_coupling_ops(2, env_dim, seed + 1);
    return build_nlevel_model({0.0, 1.0}, env, ops, strength);
}

}  // namespace

TEST_CASE("decoherence_check: one-subspace start decoheres instantly") {
    TotalModel m = dephasing_model(16, 50, 0.3);
    Rng rng(50);
    Vec app = Vec::Zero(2);
    app(1) = 1.0;
    StateVector psi0 = product_state({SpaceShape({2}), app},
                                     {SpaceShape({16}), random_unit_vector(16, rng)});
    DecoherenceCurve curve = decoherence_check(m, psi0, canonical_family(2), {0.0, 4.0}, Tolerance{}, 16);
    REQUIRE(curve.pass);
    REQUIRE(curve.tau_d.value() == 0.0);
    for (double v : curve.offblock) REQUIRE(v <= 1e-12);
}

TEST_CASE("decoherence_check: off-block magnitude follows the dephasing factor") {
    TotalModel m = dephasing_model(96, 51, 0.08);
    Rng rng(51);
    Vec phi0 = random_unit_vector(96, rng);
    Vec c(2);
    c << std::sqrt(0.62), std::sqrt(0.38);
    StateVector psi0 = product_state({SpaceShape({2}), c}, {SpaceShape({96}), phi0});

    Window window{0.0, 24.0};
    Index samples = 48;
    Tolerance tol = Tolerance::with_eps(0.15);
    DecoherenceCurve curve = decoherence_check(m, psi0, canonical_family(2), window, tol, samples);

    TimeGrid grid(0.0, window.length() / static_cast<double>(samples), samples);
    EchoSeries f = dephasing_factor(m, 0, 1, phi0, grid);
    double weight = std::sqrt(0.62 * 0.38);
    for (std::size_t k = 0; k < curve.times.size(); ++k)
        REQUIRE(curve.offblock[k] == Catch::Approx(weight * f.magnitude(k)).margin(1e-10));
}

TEST_CASE("decoherence_check: constant V never decoheres") {
    EnsembleSpec env{EnsembleKind::GUE, 16, 0.1, 52};
    auto ops = random_coupling_ops(2, 16, 53);
    ops[1] = ops[0];
    TotalModel m = build_nlevel_model({0.0, 1.0}, env, ops, 0.4);
    Rng rng(52);
    Vec c(2);
    c << 1, 1;
    c /= std::sqrt(2.0);
    StateVector psi0 = product_state({SpaceShape({2}), c},
                                     {SpaceShape({16}), random_unit_vector(16, rng)});
    DecoherenceCurve curve =
        decoherence_check(m, psi0, canonical_family(2), {0.0, 30.0}, Tolerance::with_eps(1e-3), 40);
    REQUIRE_FALSE(curve.pass);
    for (double v : curve.offblock) REQUIRE(v == Catch::Approx(0.5).margin(1e-9));
}

TEST_CASE("decoherence_check raises on ntc violation") {
    Mat h_r(2, 2);
    h_r << 0, 0.5, 0.5, 0;  // drives transitions between the subspaces
    TotalModel m(h_r, Mat::Zero(4, 4), Mat::Zero(8, 8));
    Rng rng(53);
    StateVector psi0 = product_state({SpaceShape({2}), random_unit_vector(2, rng)},
                                     {SpaceShape({4}), random_unit_vector(4, rng)});
    REQUIRE_THROWS_AS(
        decoherence_check(m, psi0, canonical_family(2), {0.0, 5.0}, Tolerance::with_eps(1e-6), 20),
        NtcViolation);
}

TEST_CASE("offblock curves are invariant under global phase and environment unitaries") {
    TotalModel m = dephasing_model(24, 54, 0.2);
    Rng rng(54);
    Vec phi0 = random_unit_vector(24, rng);
    Vec c(2);
    c << std::sqrt(0.5), std::sqrt(0.5);
    StateVector psi0 = product_state({SpaceShape({2}), c}, {SpaceShape({24}), phi0});
    Tolerance tol = Tolerance::with_eps(0.2);
    DecoherenceCurve base = decoherence_check(m, psi0, canonical_family(2), {0.0, 10.0}, tol, 20);

    StateVector phased{psi0.shape, std::exp(Complex(0, 0.931)) * psi0.amplitudes};
    DecoherenceCurve rotated = decoherence_check(m, phased, canonical_family(2), {0.0, 10.0}, tol, 20);
    for (std::size_t k = 0; k < base.offblock.size(); ++k)
        REQUIRE(base.offblock[k] == Catch::Approx(rotated.offblock[k]).margin(1e-12));

    // A unitary acting on the environment factor alone only relabels the
    // environment: it changes phi0 but not the off-block magnitude at t = 0.
    Mat u_env = testutil::random_unitary(24, rng);
    Vec phi_rot = u_env * phi0;
    StateVector psi_rot = product_state({SpaceShape({2}), c}, {SpaceShape({24}), phi_rot});
    Mat rho0 = reduced_apparatus_matrix(psi0);
    Mat rho_rot = reduced_apparatus_matrix(psi_rot);
    REQUIRE(max_abs(rho0 - rho_rot) < 1e-12);
}

TEST_CASE("certify_r_observable: one-subspace ensemble and dephasing ensemble") {
    TotalModel m = dephasing_model(16, 55, 0.3);
    Rng rng(55);
    Vec env_state = random_unit_vector(16, rng);
    StateVector env{SpaceShape({16}), env_state};

    std::vector<StateVector> trivial;
    for (Index mu = 0; mu < 2; ++mu) {
        Vec app = Vec::Zero(2);
        app(mu) = 1.0;
        trivial.push_back(product_state({SpaceShape({2}), app}, env));
    }
    RCertificate cert = certify_r_observable(m, canonical_family(2), trivial, {0.0, 5.0}, Tolerance{}, 16);
    REQUIRE(cert.verdict);
    REQUIRE(cert.tau_d == 0.0);
}

TEST_CASE("certify_r_observable: measured tau_d tracks the echo prediction") {
    Index n_env = 256;
    double strength = 0.07;
    TotalModel m = dephasing_model(n_env, 56, strength);
    PerturbationStats stats = perturbation_stats(m, 0, 1);
    REQUIRE(stats.epsilon > 3.0 * perturbative_border(stats));  // FGR regime

    Tolerance tol = Tolerance::with_eps(0.05);
    Rng rng(57);
    Vec phi0 = random_unit_vector(n_env, rng);
    StateVector env{SpaceShape({n_env}), phi0};
    // Moderately skewed superpositions: the off-block floor |c0 c1| / sqrt(N)
    // stays well below eps_x.
    std::vector<StateVector> ensemble;
    for (double w : {0.90, 0.93, 0.96}) {
        Vec c(2);
        c << std::sqrt(w), std::sqrt(1.0 - w);
        ensemble.push_back(product_state({SpaceShape({2}), c}, env));
    }
    Vec basis = Vec::Zero(2);
    basis(0) = 1.0;
    ensemble.push_back(product_state({SpaceShape({2}), basis}, env));

    Window window{0.0, 24.0};
    RCertificate cert = certify_r_observable(m, canonical_family(2), ensemble, window, tol, 64);
    REQUIRE(cert.verdict);
    REQUIRE(cert.pass_per_state.size() == 4);

    // Echo-module prediction: k_accuracy takes M(t) to eps_x; the off-block
    // magnitude tracks |f|, so the amplitude-scale time is twice predicted_tau_d.
    double predicted = 2.0 * (tol.k_accuracy * stats.delta /
                              (M_PI * stats.epsilon * stats.epsilon * stats.v_nd_sq));
    REQUIRE(cert.tau_d == Catch::Approx(predicted).epsilon(0.30));
}

TEST_CASE("certify_r_observable: isolated system fails for superposed members") {
    Mat h_r(2, 2);
    h_r << 0.0, 0, 0, 1.0;
    Rng rng(58);
    TotalModel m(h_r, random_hermitian(12, rng, 0.3), Mat::Zero(24, 24));
    Vec c(2);
    c << 1, 1;
    c /= std::sqrt(2.0);
    StateVector sup = product_state({SpaceShape({2}), c},
                                    {SpaceShape({12}), random_unit_vector(12, rng)});
    RCertificate cert = certify_r_observable(m, canonical_family(2), {sup}, {0.0, 10.0},
                                             Tolerance::with_eps(1e-3), 24);
    REQUIRE_FALSE(cert.verdict);
}

TEST_CASE("finest_division: degenerate conventions") {
    // {I}: any division works; canonical rank-1 blocks by convention.
    FinestDivision identity_case = finest_division({Mat::Identity(3, 3)});
    REQUIRE_FALSE(identity_case.unique);
    REQUIRE(identity_case.family.size() == 3);
    for (std::size_t k = 0; k < 3; ++k) {
        Mat expected = Mat::Zero(3, 3);
        expected(static_cast<Index>(k), static_cast<Index>(k)) = 1.0;
        REQUIRE(max_abs(identity_case.family.projectors[k] - expected) < 1e-12);
    }

    // {diag(a, a, b)}: diagonal inputs split to rank-1 in the eigenbasis.
    Eigen::VectorXd d(3);
    d << 0.4, 0.4, 1.7;
    FinestDivision diag_case = finest_division({d.asDiagonal().toDenseMatrix().cast<Complex>()});
    REQUIRE(diag_case.family.size() == 3);
    REQUIRE(diag_case.family.all_rank_one());
}

TEST_CASE("finest_division: planted partitions are recovered") {
    Rng rng(59);
    auto planted = [&](const std::vector<std::vector<Index>>& groups, Index n) {
        Mat u = testutil::random_unitary(n, rng);
        auto make_input = [&]() {
            Mat block = Mat::Zero(n, n);
            for (const auto& g : groups) {
                Mat sub = random_hermitian(static_cast<Index>(g.size()), rng);
                for (std::size_t a = 0; a < g.size(); ++a)
                    for (std::size_t b = 0; b < g.size(); ++b)
                        block(g[a], g[b]) = sub(static_cast<Index>(a), static_cast<Index>(b));
            }
            return Mat(u * block * u.adjoint());
        };
        std::vector<Mat> inputs{make_input(), make_input()};
        FinestDivision division = finest_division(inputs, 1e-9);
        REQUIRE(division.family.size() == groups.size());
        // Match recovered projectors to the planted ones via trace overlap.
        for (const auto& g : groups) {
            Mat truth = Mat::Zero(n, n);
            for (Index col : g) truth += u.col(col) * u.col(col).adjoint();
            double best = 0.0;
            for (std::size_t k = 0; k < division.family.size(); ++k) {
                double fidelity = (division.family.projectors[k] * truth).trace().real() /
                                  static_cast<double>(g.size());
                best = std::max(best, fidelity);
            }
            REQUIRE(best >= 1.0 - 1e-8);
        }
    };
    planted({{0, 1}, {2, 3}}, 4);
    planted({{0, 1}, {2}, {3}}, 4);
}

TEST_CASE("finest_division validates input") {
    REQUIRE_THROWS_AS(finest_division({}), std::invalid_argument);
    REQUIRE_THROWS_AS(finest_division({Mat::Identity(2, 2), Mat::Identity(3, 3)}),
                      std::invalid_argument);
}

TEST_CASE("coarse_grain: identity, all-into-one, random grouping") {
    ProjectorFamily fine = canonical_family(4);

    std::map<int, int> identity{{0, 0}, {1, 1}, {2, 2}, {3, 3}};
    ProjectorFamily same = coarse_grain(fine, identity);
    REQUIRE(same.size() == 4);
    for (std::size_t k = 0; k < 4; ++k)
        REQUIRE(max_abs(same.projectors[k] - fine.projectors[k]) < 1e-14);

    std::map<int, int> all{{0, 7}, {1, 7}, {2, 7}, {3, 7}};
    ProjectorFamily one = coarse_grain(fine, all);
    REQUIRE(one.size() == 1);
    REQUIRE(max_abs(one.projectors[0] - Mat::Identity(4, 4)) < 1e-14);

    std::map<int, int> random_grouping{{0, 1}, {1, 0}, {2, 1}, {3, 2}};
    ProjectorFamily grouped = coarse_grain(fine, random_grouping);
    REQUIRE_NOTHROW(grouped.validate());
    REQUIRE(grouped.size() == 3);

    std::map<int, int> partial{{0, 0}, {1, 0}};
    REQUIRE_THROWS_AS(coarse_grain(fine, partial), std::invalid_argument);
}

TEST_CASE("coarse-graining preserves decoherence of stored reduced matrices") {
    Rng rng(60);
    ProjectorFamily fine = canonical_family(4);
    std::map<int, int> grouping{{0, 0}, {1, 0}, {2, 1}, {3, 1}};
    ProjectorFamily coarse = coarse_grain(fine, grouping);
    auto max_entry_offblock = [](const Mat& rho, const ProjectorFamily& fam) {
        double worst = 0.0;
        for (std::size_t a = 0; a < fam.size(); ++a)
            for (std::size_t b = 0; b < fam.size(); ++b) {
                if (a == b) continue;
                worst = std::max(worst,
                                 (fam.projectors[a] * rho * fam.projectors[b]).cwiseAbs().maxCoeff());
            }
        return worst;
    };
    for (int trial = 0; trial < 10; ++trial) {
        Mat rho = random_hermitian(4, rng);
        rho = (rho * rho.adjoint()).eval();
        rho /= rho.trace().real();
        // Entrywise magnitude: coarse off-block entries are a subset of the
        // fine ones, so the bound is exact. (The Frobenius aggregate may grow
        // by the block count.)
        REQUIRE(max_entry_offblock(rho, coarse) <= max_entry_offblock(rho, fine) + 1e-12);
    }
}

TEST_CASE("certified family is a coarse-graining of the finest division") {
    TotalModel m = dephasing_model(128, 61, 0.1);
    Rng rng(61);
    Vec phi0 = random_unit_vector(128, rng);
    Vec c(2);
    c << std::sqrt(0.5), std::sqrt(0.5);
    StateVector psi0 = product_state({SpaceShape({2}), c}, {SpaceShape({128}), phi0});
    Tolerance tol = Tolerance::with_eps(0.14);
    Window window{0.0, 24.0};
    DecoherenceCurve curve = decoherence_check(m, psi0, canonical_family(2), window, tol, 48);
    REQUIRE(curve.pass);

    // Dataset: reduced matrices in the decohered tail.
    auto ev = m.evolver();
    std::vector<Mat> dataset;
    for (std::size_t k = 0; k < curve.times.size(); ++k) {
        if (curve.times[k] - window.begin < *curve.tau_d) continue;
        dataset.push_back(reduced_apparatus_matrix(ev->evolve(psi0, curve.times[k])));
    }
    REQUIRE(dataset.size() >= 4);
    FinestDivision division = finest_division(dataset, tol.eps_x);

    // Each certified projector is a sum of finest blocks.
    ProjectorFamily certified = canonical_family(2);
    for (std::size_t k = 0; k < certified.size(); ++k) {
        Mat assembled = Mat::Zero(2, 2);
        for (std::size_t f = 0; f < division.family.size(); ++f) {
            double overlap = (certified.projectors[k] * division.family.projectors[f]).trace().real();
            if (overlap > 0.5) assembled += division.family.projectors[f];
        }
        REQUIRE(max_abs(assembled - certified.projectors[k]) < 1e-8);
    }
}
