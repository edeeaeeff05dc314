#include "test_helpers.hpp"

#include "qbranch/echo.hpp"
#include "qbranch/tree.hpp"

using namespace qbranch;
using testutil::max_abs;
using testutil::random_hermitian;

namespace {

TotalModel dephasing_model(Index env_dim, std::uint64_t seed, double strength) {
    EnsembleSpec env{EnsembleKind::GUE, env_dim, 0.1, seed};
    auto ops = random_coupling_ops(2, env_dim, seed + 1);
    return build_nlevel_model({0.0, 1.0}, env, ops, strength);
}

StateVector superposed_product(const TotalModel& m, double w0, std::uint64_t seed) {
    Rng rng(seed);
    Vec c(2);
    c << std::sqrt(w0), std::sqrt(1.0 - w0);
    return product_state({SpaceShape({2}), c},
                         {SpaceShape({m.environment_dim()}), random_unit_vector(m.environment_dim(), rng)});
}

/// Dephasing segments interleaved with apparatus-mixing segments, so that
/// paths can straddle subspaces at later splits (nontrivial D matrices).
std::shared_ptr<PiecewiseContext> mixed_dephasing_context(const TotalModel& m, double mix_angle,
                                                          const std::vector<double>& mix_times,
                                                          double mix_length) {
    Index n = m.apparatus_dim(), N = m.environment_dim();
    Mat sx = Mat::Zero(n, n);
    sx(0, 1) = 1.0;
    sx(1, 0) = 1.0;
    TotalModel mixer(Mat((mix_angle / mix_length) * sx), Mat::Zero(N, N), Mat::Zero(n * N, n * N));
    std::vector<std::pair<double, TotalModel>> segments;
    segments.emplace_back(0.0, m);
    for (double t : mix_times) {
        segments.emplace_back(t, mixer);
        segments.emplace_back(t + mix_length, m);
    }
    return std::make_shared<PiecewiseContext>(m.shape(), std::move(segments));
}

}  // namespace

TEST_CASE("grow_tree: empty schedule keeps one path with unit probability") {
    TotalModel m = dephasing_model(8, 70, 0.2);
    StateVector psi0 = superposed_product(m, 0.5, 70);
    Tree tree = grow_tree(m, psi0, {}, Tolerance{});
    auto paths = tree.paths_at(3.0);
    REQUIRE(paths.size() == 1);
    REQUIRE(paths[0].probability == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(tree.decomposition_residual(3.0) < 1e-12);
}

TEST_CASE("grow_tree: one dephasing split realizes Born weights and product components") {
    TotalModel m = dephasing_model(12, 71, 0.3);
    double w0 = 0.37;
    StateVector psi0 = superposed_product(m, w0, 71);

    SplitSpec split;
    split.window = {0.5, 2.0};
    split.family = canonical_family(2);
    split.tau_d = 0.4;
    Tree tree = grow_tree(m, psi0, {split}, Tolerance{});
    double t_split = split.split_time();
    REQUIRE(t_split == Catch::Approx(0.9));

    auto paths = tree.paths_at(4.0);
    REQUIRE(paths.size() == 2);
    std::map<int, double> probs;
    for (const auto& p : paths) probs[p.labels.back()] = p.probability;
    REQUIRE(probs[0] == Catch::Approx(w0).margin(1e-10));
    REQUIRE(probs[1] == Catch::Approx(1.0 - w0).margin(1e-10));

    // Direct projection oracle: component = U(t, ts) P_mu U(ts, 0) psi0.
    auto ev = m.evolver();
    for (const auto& p : paths) {
        Vec at_split = ev->evolve(psi0.amplitudes, t_split);
        Vec proj = split.family.apply_embedded(split.family.index_of_label(p.labels.back()),
                                               {psi0.shape, at_split});
        Vec expected = ev->evolve(proj, 4.0 - t_split);
        REQUIRE((p.component.amplitudes - expected).norm() < 1e-10);
        // Dephasing model: component is |mu> (x) phi_mu(t).
        Index other = 1 - p.labels.back();
        REQUIRE(p.component.amplitudes.segment(other * 12, 12).norm() < 1e-12);
    }
}

TEST_CASE("grow_tree: nested complete splits keep the decomposition identity") {
    TotalModel m = dephasing_model(10, 72, 0.25);
    StateVector psi0 = superposed_product(m, 0.6, 72);
    std::vector<SplitSpec> schedule(2);
    schedule[0].window = {0.3, 1.0};
    schedule[0].family = canonical_family(2);
    schedule[0].tau_d = 0.2;
    schedule[1].window = {1.5, 2.5};
    schedule[1].family = canonical_family(2);
    schedule[1].tau_d = 0.3;
    Tree tree = grow_tree(m, psi0, schedule, Tolerance{});

    for (double t : {0.1, 0.7, 1.2, 2.0, 3.5}) {
        REQUIRE(tree.decomposition_residual(t) < 1e-10);
        REQUIRE(tree.probability_sum(t) == Catch::Approx(1.0).margin(1e-9));
    }
    // Second splits are trivial for exact dephasing: still two nonzero paths.
    REQUIRE(tree.paths_at(3.0).size() == 2);
}

TEST_CASE("grow_tree: schedule geometry is validated and short windows are rejected") {
    TotalModel m = dephasing_model(8, 73, 0.2);
    StateVector psi0 = superposed_product(m, 0.5, 73);

    SplitSpec bad;
    bad.window = {1.0, 1.4};
    bad.family = canonical_family(2);
    bad.tau_d = 0.8;  // longer than the window
    Tree tree = grow_tree(m, psi0, {bad}, Tolerance{});
    REQUIRE(tree.diagnostics().size() == 1);
    REQUIRE(tree.diagnostics()[0].reason == "window shorter than tau_d");
    REQUIRE(tree.paths_at(2.0).size() == 1);

    std::vector<SplitSpec> overlapping(2, bad);
    overlapping[0].window = {0.5, 2.0};
    overlapping[0].tau_d = 0.1;
    overlapping[1].window = {1.0, 3.0};
    overlapping[1].tau_d = 0.1;
    REQUIRE_THROWS_AS(grow_tree(m, psi0, overlapping, Tolerance{}), std::invalid_argument);

    StateVector unnormalized{psi0.shape, 2.0 * psi0.amplitudes};
    REQUIRE_THROWS_AS(grow_tree(m, unnormalized, {}, Tolerance{}), std::invalid_argument);
}

TEST_CASE("grow_tree: branch-dependent verdicts split only the clean branch") {
    // Level 0 keeps a frozen environment state orthogonal to |w>; level 1
    // scrambles it, so only branch 1 leaks through sigma_x (x) |w><w|.
    Index n_env = 16;
    Rng rng(74);
    Vec w = Vec::Zero(n_env);
    w(0) = 1.0;
    Vec phi0 = Vec::Zero(n_env);
    phi0(1) = 1.0;

    Mat h_r = Mat::Zero(2, 2);
    h_r(1, 1) = 1.0;
    Mat b1 = random_hermitian(n_env, rng, 1.0);
    Mat h_i = Mat::Zero(2 * n_env, 2 * n_env);
    h_i.block(n_env, n_env, n_env, n_env) = b1;  // dephasing drive on level 1
    double g = 0.05;
    Mat leak = g * (w * w.adjoint());
    h_i.block(0, n_env, n_env, n_env) += leak;
    h_i.block(n_env, 0, n_env, n_env) += leak.adjoint();
    TotalModel m(h_r, Mat::Zero(n_env, n_env), h_i);

    Vec c(2);
    c << 1, 1;
    c /= std::sqrt(2.0);
    StateVector psi0 = product_state({SpaceShape({2}), c}, {SpaceShape({n_env}), phi0});

    std::vector<SplitSpec> schedule(2);
    schedule[0].window = {0.0, 0.2};
    schedule[0].family = canonical_family(2);
    schedule[1].window = {3.0, 5.0};
    schedule[1].family = canonical_family(2);

    Tolerance tol = Tolerance::with_eps(2e-3);
    Tree tree = grow_tree(m, psi0, schedule, tol);
    REQUIRE(tree.events()[0].applied_to_all);
    REQUIRE_FALSE(tree.events()[1].applied_to_all);
    REQUIRE(tree.diagnostics().size() == 1);
    REQUIRE(tree.diagnostics()[0].event_index == 1);
    REQUIRE(tree.diagnostics()[0].path_labels == std::vector<int>{1});
    REQUIRE(tree.diagnostics()[0].max_leakage > tol.eps_x);
    REQUIRE(tree.probability_sum(6.0) == Catch::Approx(1.0).margin(1e-9));
    REQUIRE(tree.decomposition_residual(6.0) < 1e-9);
}

TEST_CASE("grow_tree: path cap overflow") {
    TotalModel m = dephasing_model(8, 75, 0.2);
    StateVector psi0 = superposed_product(m, 0.5, 75);
    std::vector<SplitSpec> schedule(2);
    schedule[0].window = {0.2, 0.8};
    schedule[0].family = canonical_family(2);
    schedule[1].window = {1.0, 1.6};
    schedule[1].family = canonical_family(2);
    GrowthOptions opts;
    opts.max_paths = 1;
    REQUIRE_THROWS_AS(grow_tree(std::make_shared<ModelContext>(m), psi0, 0.0, schedule, Tolerance{}, opts),
                      PathOverflow);
}

TEST_CASE("mixed_state: purity, block structure, trace and positivity") {
    TotalModel m = dephasing_model(6, 76, 0.3);
    StateVector psi0 = superposed_product(m, 0.42, 76);

    Tree plain = grow_tree(m, psi0, {}, Tolerance{});
    Operator rho_pure = mixed_state(plain, 1.0);
    Mat r = rho_pure.entries;
    REQUIRE(std::abs((r * r - r).cwiseAbs().maxCoeff()) < 1e-10);  // projector onto one path

    SplitSpec split;
    split.window = {0.4, 1.2};
    split.family = canonical_family(2);
    Tree tree = grow_tree(m, psi0, {split}, Tolerance{});
    Operator rho = mixed_state(tree, 2.0);
    REQUIRE(std::abs(rho.entries.trace().real() - 1.0) < 1e-9);
    // Orthogonal split: block-diagonal across the subspaces.
    REQUIRE(max_abs(rho.entries.block(0, 6, 6, 6)) < 1e-12);
    Spectral spec = eigh(rho);
    REQUIRE(spec.eigenvalues.minCoeff() >= -1e-10);
}

TEST_CASE("decoherence_matrix: siblings are exactly orthogonal and frozen afterwards") {
    TotalModel m = dephasing_model(10, 77, 0.3);
    StateVector psi0 = superposed_product(m, 0.5, 77);
    SplitSpec split;
    split.window = {0.5, 1.5};
    split.family = canonical_family(2);
    split.tau_d = 0.25;
    Tree tree = grow_tree(m, psi0, {split}, Tolerance{});

    DecoherenceMatrix at_split = decoherence_matrix(tree, split.split_time());
    REQUIRE(at_split.entries.rows() == 2);
    REQUIRE(at_split.max_offdiagonal() < 1e-14);
    REQUIRE(std::abs(at_split.entries.trace().real() - 1.0) < 1e-9);

    DecoherenceMatrix later = decoherence_matrix(tree, 4.0);
    REQUIRE(later.max_offdiagonal() < 1e-14);  // common unitary evolution preserves D
}

TEST_CASE("decoherence_matrix: mixing segments create off-diagonals; env route agrees") {
    TotalModel m = dephasing_model(64, 78, 0.35);
    auto ctx = mixed_dephasing_context(m, M_PI / 5.0, {2.0, 5.0}, 0.25);

    Vec phi0;
    {
        Rng rng(78);
        phi0 = random_unit_vector(64, rng);
    }
    Vec app = Vec::Zero(2);
    app(0) = 1.0;
    StateVector psi0 = product_state({SpaceShape({2}), app}, {SpaceShape({64}), phi0});

    std::vector<SplitSpec> schedule(2);
    schedule[0].window = {2.5, 4.0};
    schedule[0].family = canonical_family(2);
    schedule[0].tau_d = 0.5;
    schedule[1].window = {5.5, 7.0};
    schedule[1].family = canonical_family(2);
    schedule[1].tau_d = 0.5;

    Tree tree = grow_tree(ctx, psi0, 0.0, schedule, Tolerance{}, {});
    auto paths = tree.paths_at(8.0);
    REQUIRE(paths.size() == 4);

    DecoherenceMatrix direct = decoherence_matrix(tree, 8.0);
    REQUIRE(direct.max_offdiagonal() > 1e-6);  // cousins with equal last outcomes overlap

    DecoherenceMatrix env_route = decoherence_matrix_env_route(tree, 8.0);
    REQUIRE(max_abs(direct.entries - env_route.entries) < 1e-8);

    // Decomposition identity still holds through mixing segments.
    REQUIRE(tree.decomposition_residual(8.0) < 1e-9);

    // Same agreement on a 3-level apparatus with a larger environment.
    EnsembleSpec env3{EnsembleKind::GUE, 48, 0.1, 91};
    auto ops3 = random_coupling_ops(3, 48, 92);
    TotalModel m3 = build_nlevel_model({0.0, 1.0, 2.2}, env3, ops3, 0.3);
    auto ctx3 = mixed_dephasing_context(m3, M_PI / 6.0, {2.0}, 0.25);
    Vec app3 = Vec::Zero(3);
    app3(1) = 1.0;
    Rng rng3(93);
    StateVector psi3 = product_state({SpaceShape({3}), app3},
                                     {SpaceShape({48}), random_unit_vector(48, rng3)});
    std::vector<SplitSpec> sched3(2);
    sched3[0].window = {0.5, 1.5};
    sched3[0].family = canonical_family(3);
    sched3[1].window = {2.5, 3.5};
    sched3[1].family = canonical_family(3);
    Tree tree3 = grow_tree(ctx3, psi3, 0.0, sched3, Tolerance{}, {});
    DecoherenceMatrix direct3 = decoherence_matrix(tree3, 4.5);
    DecoherenceMatrix env_route3 = decoherence_matrix_env_route(tree3, 4.5);
    REQUIRE(max_abs(direct3.entries - env_route3.entries) < 1e-8);
}

TEST_CASE("component_via_w matches the projector construction") {
    TotalModel m = dephasing_model(12, 79, 0.3);
    StateVector psi0 = superposed_product(m, 0.48, 79);

    // No splits: W = U.
    Tree plain = grow_tree(m, psi0, {}, Tolerance{});
    StateVector via_w = component_via_w(plain, 0, 2.5);
    REQUIRE((via_w.amplitudes - plain.component_at(0, 2.5).amplitudes).norm() < 1e-12);

    // Exact dephasing: W route equals the projector route to machine precision.
    SplitSpec split;
    split.window = {0.5, 1.5};
    split.family = canonical_family(2);
    split.tau_d = 0.25;
    Tree tree = grow_tree(m, psi0, {split}, Tolerance{});
    for (std::size_t id : tree.path_ids_at(3.0)) {
        StateVector w_comp = component_via_w(tree, id, 3.0);
        REQUIRE((w_comp.amplitudes - tree.component_at(id, 3.0).amplitudes).norm() < 1e-10);
    }

    // Query inside the window uses the partial block evolution.
    for (std::size_t id : tree.path_ids_at(1.2)) {
        StateVector w_comp = component_via_w(tree, id, 1.2);
        REQUIRE((w_comp.amplitudes - tree.component_at(id, 1.2).amplitudes).norm() < 1e-10);
    }
}

TEST_CASE("component_via_w: discrepancy scales with weakly broken ntc") {
    Index n_env = 10;
    Rng rng(80);
    Mat h_e = random_hermitian(n_env, rng, 0.3);
    Mat coupling = random_hermitian(n_env, rng, 1.0);
    std::vector<double> discrepancies;
    for (double delta : {1e-4, 1e-3}) {
        Mat h_r = Mat::Zero(2, 2);
        h_r(1, 1) = 1.0;
        Mat h_i = Mat::Zero(2 * n_env, 2 * n_env);
        h_i.block(0, n_env, n_env, n_env) = delta * coupling;
        h_i.block(n_env, 0, n_env, n_env) = delta * coupling.adjoint();
        TotalModel m(h_r, h_e, h_i);
        Rng vrng(81);
        Vec c(2);
        c << std::sqrt(0.5), std::sqrt(0.5);
        StateVector psi0 = product_state({SpaceShape({2}), c},
                                         {SpaceShape({n_env}), random_unit_vector(n_env, vrng)});
        SplitSpec split;
        split.window = {0.5, 1.5};
        split.family = canonical_family(2);
        Tolerance tol = Tolerance::with_eps(10.0 * delta);
        Tree tree = grow_tree(m, psi0, {split}, tol);
        double worst = 0.0;
        for (std::size_t id : tree.path_ids_at(2.0)) {
            StateVector w_comp = component_via_w(tree, id, 2.0);
            worst = std::max(worst,
                             (w_comp.amplitudes - tree.component_at(id, 2.0).amplitudes).norm());
        }
        discrepancies.push_back(worst);
    }
    REQUIRE(discrepancies[0] < 10.0 * 1e-4);
    REQUIRE(discrepancies[1] < 10.0 * 1e-3);
    REQUIRE(discrepancies[0] < discrepancies[1]);
}

TEST_CASE("probability_of_value: definite components, coarse/fine agreement, straddle error") {
    Index n_env = 8;
    EnsembleSpec env{EnsembleKind::GUE, n_env, 0.1, 82};
    auto ops = random_coupling_ops(3, n_env, 83);
    TotalModel m = build_nlevel_model({0.0, 1.0, 2.2}, env, ops, 0.3);

    Rng rng(82);
    Vec c(3);
    c << std::sqrt(0.5), std::sqrt(0.3), std::sqrt(0.2);
    StateVector psi0 = product_state({SpaceShape({3}), c},
                                     {SpaceShape({n_env}), random_unit_vector(n_env, rng)});

    SplitSpec fine_split;
    fine_split.window = {0.4, 1.2};
    fine_split.family = canonical_family(3);
    Tree fine = grow_tree(m, psi0, {fine_split}, Tolerance{});

    std::map<int, int> grouping{{0, 0}, {1, 1}, {2, 1}};
    SplitSpec coarse_split = fine_split;
    coarse_split.family = coarse_grain(canonical_family(3), grouping);
    Tree coarse = grow_tree(m, psi0, {coarse_split}, Tolerance{});

    ProjectorFamily tested = coarse_split.family;
    auto fine_map = probability_of_value(fine, tested, 2.0, 1e-6);
    auto coarse_map = probability_of_value(coarse, tested, 2.0, 1e-6);
    REQUIRE(fine_map[0] == Catch::Approx(0.5).margin(1e-9));
    REQUIRE(fine_map[1] == Catch::Approx(0.5).margin(1e-9));
    for (int label : {0, 1})
        REQUIRE(fine_map[label] == Catch::Approx(coarse_map[label]).margin(1e-8));

    // The coarse tree's merged component straddles the finest family.
    REQUIRE_THROWS_AS(probability_of_value(coarse, canonical_family(3), 2.0, 1e-6), ValueUndefined);

    // Single path fully inside one subspace.
    Vec basis = Vec::Zero(3);
    basis(1) = 1.0;
    StateVector definite = product_state({SpaceShape({3}), basis},
                                         {SpaceShape({n_env}), random_unit_vector(n_env, rng)});
    Tree single = grow_tree(m, definite, {}, Tolerance{});
    auto single_map = probability_of_value(single, canonical_family(3), 1.0, 1e-6);
    REQUIRE(single_map[1] == Catch::Approx(1.0).margin(1e-10));
}

TEST_CASE("compare_coarse_fine: identity mapping and merged outcomes") {
    TotalModel m = dephasing_model(8, 84, 0.3);
    StateVector psi0 = superposed_product(m, 0.55, 84);
    SplitSpec split;
    split.window = {0.4, 1.2};
    split.family = canonical_family(2);
    Tree fine = grow_tree(m, psi0, {split}, Tolerance{});

    CoarseFineReport same = compare_coarse_fine(fine, fine, 2.0, 1e-10);
    REQUIRE(same.pass);
    REQUIRE(same.max_residual < 1e-12);
    for (const auto& group : same.groups) REQUIRE(group.size() == 1);

    SplitSpec merged = split;
    merged.family = coarse_grain(canonical_family(2), {{0, 0}, {1, 0}});
    Tree coarse = grow_tree(m, psi0, {merged}, Tolerance{});
    CoarseFineReport report = compare_coarse_fine(fine, coarse, 2.0, 1e-10);
    REQUIRE(report.pass);
    REQUIRE(report.groups.size() == 1);
    REQUIRE(report.groups[0].size() == 2);
    REQUIRE(report.max_residual < 1e-10);

    TotalModel other = dephasing_model(8, 85, 0.3);
    StateVector psi1 = superposed_product(other, 0.5, 86);
    Tree different = grow_tree(m, psi1, {split}, Tolerance{});
    REQUIRE_THROWS_AS(compare_coarse_fine(fine, different, 2.0, 1e-10), std::invalid_argument);
}

TEST_CASE("tree_entropy: staircase behavior") {
    TotalModel m = dephasing_model(10, 87, 0.3);
    StateVector psi0 = superposed_product(m, 0.5, 87);

    Tree plain = grow_tree(m, psi0, {}, Tolerance{});
    REQUIRE(tree_entropy(plain, 1.0) == Catch::Approx(0.0).margin(1e-12));

    SplitSpec split;
    split.window = {0.5, 1.5};
    split.family = canonical_family(2);
    split.tau_d = 0.25;
    Tree tree = grow_tree(m, psi0, {split}, Tolerance{});
    double ts = split.split_time();
    REQUIRE(tree_entropy(tree, ts - 0.01) == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(tree_entropy(tree, ts) == Catch::Approx(std::log(2.0)).margin(1e-9));

    // Constant between splits, non-decreasing across them.
    double before = tree_entropy(tree, ts + 0.5);
    double after = tree_entropy(tree, ts + 2.0);
    REQUIRE(before == Catch::Approx(after).margin(1e-9));
    REQUIRE(after >= -1e-12);
}

TEST_CASE("ivr_check: single-path scenario passes trivially") {
    TotalModel m = dephasing_model(8, 88, 0.3);
    Rng rng(88);
    Vec basis = Vec::Zero(2);
    basis(0) = 1.0;
    StateVector psi0 = product_state({SpaceShape({2}), basis},
                                     {SpaceShape({8}), random_unit_vector(8, rng)});
    IvrVerdict verdict = ivr_check(std::make_shared<ModelContext>(m), psi0, 0.0, {}, {}, 3.0,
                                   Tolerance::with_eps(1e-3), 8);
    REQUIRE(verdict.pass);
    REQUIRE(verdict.max_offdiagonal == 0.0);
}

TEST_CASE("ivr_check: coarse variants compose and re-ov residuals are recorded") {
    Index n_env = 8;
    EnsembleSpec env{EnsembleKind::GUE, n_env, 0.1, 89};
    auto ops = random_coupling_ops(3, n_env, 90);
    TotalModel m = build_nlevel_model({0.0, 1.0, 2.2}, env, ops, 0.3);
    Rng rng(89);
    Vec c(3);
    c << std::sqrt(0.4), std::sqrt(0.35), std::sqrt(0.25);
    StateVector psi0 = product_state({SpaceShape({3}), c},
                                     {SpaceShape({n_env}), random_unit_vector(n_env, rng)});

    std::vector<SplitSpec> schedule(1);
    schedule[0].window = {0.4, 1.4};
    schedule[0].family = canonical_family(3);
    CoarseVariant variant;
    variant.groupings[0] = {{0, 0}, {1, 1}, {2, 1}};

    IvrVerdict verdict = ivr_check(std::make_shared<ModelContext>(m), psi0, 0.0, schedule, {variant},
                                   3.0, Tolerance::with_eps(1e-3), 10);
    REQUIRE(verdict.pass);  // exact dephasing: D stays diagonal
    REQUIRE(verdict.coarse_reports.size() == 1);
    REQUIRE(verdict.coarse_reports[0].pass);
    REQUIRE(verdict.re_ov_residuals[0] < 1e-9);
}
