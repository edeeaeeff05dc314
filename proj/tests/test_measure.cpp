#include "test_helpers.hpp"

#include "qbranch/measure.hpp"

using namespace qbranch;

namespace {

TotalModel apparatus_model(Index n_r, Index env_dim, std::uint64_t seed, double strength) {
    EnsembleSpec env{EnsembleKind::GUE, env_dim, 0.1, seed};
    auto ops = random_coupling_ops(n_r, env_dim, seed + 1);
    std::vector<double> levels;
    for (Index k = 0; k < n_r; ++k) levels.push_back(static_cast<double>(k));
    return build_nlevel_model(levels, env, ops, strength);
}

MeasurementScenario basic_scenario(const TotalModel& model, std::vector<Complex> coeffs,
                                   std::uint64_t seed) {
    MeasurementScenario s;
    s.system_dim = static_cast<Index>(coeffs.size());
    s.coefficients = std::move(coeffs);
    s.apparatus_initial = Vec::Zero(model.apparatus_dim());
    s.apparatus_initial(0) = 1.0;
    for (Index b = 0; b < s.system_dim; ++b) s.pointer_map.push_back(b);
    Rng rng(seed);
    s.environment_state = random_unit_vector(model.environment_dim(), rng);
    s.t0 = 0.0;
    s.tau_1 = 1.0;
    s.t_1 = 3.0;
    s.tau_d = 0.5;
    return s;
}

}  // namespace

TEST_CASE("run_measurement: two outcomes with |C|^2 = (0.25, 0.75)") {
    TotalModel m = apparatus_model(2, 12, 100, 0.3);
    MeasurementScenario s = basic_scenario(m, {0.5, std::sqrt(0.75)}, 100);
    MeasurementRun run = run_measurement(s, m, Tolerance{});
    REQUIRE(run.report.max_deviation <= 1e-6);
    REQUIRE(run.report.pass);
    REQUIRE(run.report.rows[0].prob_tree == Catch::Approx(0.25).margin(1e-9));
    REQUIRE(run.report.rows[1].prob_tree == Catch::Approx(0.75).margin(1e-9));
    for (const auto& row : run.report.rows) {
        REQUIRE(row.factor_fidelity >= 1.0 - 1e-9);
        REQUIRE(run.report.inferred_value.at(static_cast<int>(row.mu)) == row.b);
    }
    // No amplitude is discarded: full vector equals the component sum.
    REQUIRE(run.tree.decomposition_residual(s.t_1) < 1e-9);
}

TEST_CASE("run_measurement: single outcome is deterministic") {
    TotalModel m = apparatus_model(2, 8, 101, 0.25);
    MeasurementScenario s = basic_scenario(m, {Complex(1.0, 0.0)}, 101);
    MeasurementRun run = run_measurement(s, m, Tolerance{});
    REQUIRE(run.report.rows.size() == 1);
    REQUIRE(run.report.rows[0].prob_tree == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("run_measurement: uniform three-outcome superposition") {
    TotalModel m = apparatus_model(3, 8, 102, 0.25);
    double a = 1.0 / std::sqrt(3.0);
    MeasurementScenario s = basic_scenario(m, {a, a, a}, 102);
    MeasurementRun run = run_measurement(s, m, Tolerance{});
    for (const auto& row : run.report.rows)
        REQUIRE(row.prob_tree == Catch::Approx(1.0 / 3.0).margin(1e-9));
}

TEST_CASE("run_measurement: rephased coefficients leave the outcome map unchanged") {
    TotalModel m = apparatus_model(2, 10, 103, 0.3);
    MeasurementScenario s = basic_scenario(m, {0.5, std::sqrt(0.75)}, 103);
    MeasurementRun base = run_measurement(s, m, Tolerance{});

    MeasurementScenario rephased = s;
    rephased.coefficients[0] *= std::exp(Complex(0, 1.13));
    rephased.coefficients[1] *= std::exp(Complex(0, -2.4));
    MeasurementRun moved = run_measurement(rephased, m, Tolerance{});
    for (std::size_t k = 0; k < base.report.rows.size(); ++k)
        REQUIRE(base.report.rows[k].prob_tree ==
                Catch::Approx(moved.report.rows[k].prob_tree).margin(1e-8));
}

TEST_CASE("run_measurement validation and failure modes") {
    TotalModel m = apparatus_model(2, 8, 104, 0.3);
    MeasurementScenario s = basic_scenario(m, {0.5, std::sqrt(0.75)}, 104);

    MeasurementScenario bad_sum = s;
    bad_sum.coefficients = {0.5, 0.5};
    REQUIRE_THROWS_AS(run_measurement(bad_sum, m, Tolerance{}), std::invalid_argument);

    MeasurementScenario bad_map = s;
    bad_map.pointer_map = {0, 0};
    REQUIRE_THROWS_AS(run_measurement(bad_map, m, Tolerance{}), std::invalid_argument);

    MeasurementScenario short_window = s;
    short_window.t_1 = s.tau_1 + 0.5 * s.tau_d;
    REQUIRE_THROWS_AS(run_measurement(short_window, m, Tolerance{}), std::invalid_argument);

    // Under-rotated premeasurement leaves pointer residuals above eps_x.
    MeasurementScenario incomplete = s;
    incomplete.rotation_fraction = 0.3;
    REQUIRE_THROWS_AS(run_measurement(incomplete, m, Tolerance{}), std::runtime_error);

    // A rotated R0 with partial overlap against its targets still completes.
    MeasurementScenario tilted = s;
    tilted.apparatus_initial = Vec(2);
    tilted.apparatus_initial << std::sqrt(0.8), std::sqrt(0.2);
    REQUIRE_NOTHROW(run_measurement(tilted, m, Tolerance{}));
}

TEST_CASE("pointer_correlation: constant without interaction, complete at tau_1") {
    TotalModel m = apparatus_model(2, 8, 105, 0.3);
    MeasurementScenario s = basic_scenario(m, {0.5, std::sqrt(0.75)}, 105);
    MeasurementRun run = run_measurement(s, m, Tolerance{});

    // At tau_1 the controlled rotation is exact.
    for (Index b = 0; b < 2; ++b)
        REQUIRE(run.report.pointer_fidelity[static_cast<std::size_t>(b)] >= 1.0 - 1e-10);

    // At t0 the fidelities equal the initial overlaps |<mu(b)|R0>|^2.
    Vec sys(2);
    sys << s.coefficients[0], s.coefficients[1];
    StateVector psi0 = tensor(tensor(StateVector{SpaceShape({2}), s.apparatus_initial},
                                     StateVector{SpaceShape({2}), sys}),
                              StateVector{SpaceShape({8}), s.environment_state});
    auto fid0 = pointer_correlation(psi0, s.pointer_map, 2);
    REQUIRE(fid0[0] == Catch::Approx(1.0).margin(1e-12));  // mu(0) = 0 = R0
    REQUIRE(fid0[1] == Catch::Approx(0.0).margin(1e-12));  // mu(1) = 1 orthogonal to R0

    // Without any interaction the fidelities stay constant.
    TotalModel free_model(m.h_r(), Mat::Zero(16, 16), Mat::Zero(32, 32));
    auto ctx = std::make_shared<ModelContext>(free_model);
    StateVector later = ctx->evolve(psi0, 0.0, 2.0);
    auto fid_later = pointer_correlation(later, s.pointer_map, 2);
    REQUIRE(fid_later[0] == Catch::Approx(fid0[0]).margin(1e-10));
    REQUIRE(fid_later[1] == Catch::Approx(fid0[1]).margin(1e-10));
}
