// Measurement scheme: measured system (x) apparatus (x) environment, a
// designed premeasurement correlating pointer subspaces with eigenvalues, and
// Born-rule recovery through the tree machinery.
#pragma once

#include <map>
#include <memory>
#include <vector>

#include "core.hpp"
#include "dynamics.hpp"
#include "model.hpp"
#include "tree.hpp"

namespace qbranch {

/// Measurement of an observable B with eigenbasis |b> on a system S adjoined
/// to the environment side of the apparatus R. The premeasurement interaction
/// H = sum_b K_{mu(b)} (x) |b><b| (x) I rotates R0 into the pointer subspace
/// H_{R mu(b)} over [t0, tau_1]; the apparatus then dephases over [tau_1, t_1].
struct MeasurementScenario {
    Index system_dim = 0;
    std::vector<Complex> coefficients;  // C_b(t0) in the B eigenbasis
    Vec apparatus_initial;              // R0
    std::vector<Index> pointer_map;     // b -> mu(b), injective
    Vec environment_state;              // phi0 of the residual environment
    double t0 = 0.0;
    double tau_1 = 1.0;  // premeasurement complete
    double t_1 = 2.0;    // split time; (tau_1, t_1] is the NTC window
    double tau_d = 0.0;  // certified decoherence time for the window
    double rotation_fraction = 1.0;  // < 1 under-rotates (incomplete premeasurement)

    void validate(Index apparatus_dim) const {
        if (system_dim < 1) throw std::invalid_argument("MeasurementScenario: system_dim < 1");
        if (static_cast<Index>(coefficients.size()) != system_dim)
            throw std::invalid_argument("MeasurementScenario: coefficient count != system_dim");
        double total = 0.0;
        for (Complex c : coefficients) total += std::norm(c);
        if (std::abs(total - 1.0) > 1e-10)
            throw std::invalid_argument("MeasurementScenario: sum |C_b|^2 != 1");
        if (static_cast<Index>(pointer_map.size()) != system_dim)
            throw std::invalid_argument("MeasurementScenario: pointer map size != system_dim");
        std::map<Index, Index> seen;
        for (Index b = 0; b < system_dim; ++b) {
            Index mu = pointer_map[static_cast<std::size_t>(b)];
            if (mu < 0 || mu >= apparatus_dim)
                throw std::invalid_argument("MeasurementScenario: pointer target out of range");
            if (!seen.emplace(mu, b).second)
                throw std::invalid_argument("MeasurementScenario: pointer map must be injective");
        }
        if (apparatus_initial.size() != apparatus_dim)
            throw std::invalid_argument("MeasurementScenario: apparatus_initial dim mismatch");
        if (!(tau_1 > t0) || !(t_1 > tau_1))
            throw std::invalid_argument("MeasurementScenario: need t0 < tau_1 < t_1");
    }
};

struct MeasurementOutcomeRow {
    Index b = 0;
    Index mu = 0;
    double prob_born = 0.0;      // |C_b(t0)|^2
    double prob_tree = 0.0;      // from the split at t_1
    double factor_fidelity = 0.0;  // overlap with |mu(b)>_R (x) |b>_S
};

struct MeasurementOutcomeReport {
    std::vector<MeasurementOutcomeRow> rows;
    double max_deviation = 0.0;
    std::vector<double> pointer_fidelity;  // per b at tau_1
    std::map<int, Index> inferred_value;   // mu -> b
    bool pass = false;
};

namespace detail {

/// Generator rotating |from> onto |to> (up to phase) in time `duration`.
inline Mat rotation_generator(const Vec& from, const Vec& to, double duration) {
    Index n = from.size();
    Complex overlap = from.dot(to);  // <from|to>
    Vec target = to;
    if (std::abs(overlap) > 0.0) target *= std::conj(overlap) / std::abs(overlap);  // make <from|target> real >= 0
    double c = std::min(1.0, std::max(-1.0, from.dot(target).real()));
    Vec w = target - c * from;
    double wn = w.norm();
    if (wn < 1e-14) return Mat::Zero(n, n);  // already aligned
    w /= wn;
    double angle = std::acos(c);
    // G = i|w><from| - i|from><w| generates from -> cos a * from + sin a * w.
    Mat g = Complex(0, 1) * (w * from.adjoint() - from * w.adjoint());
    return (angle / duration) * g;
}

}  // namespace detail

/// Per-b pointer-subspace fidelity || P_{mu(b)} |R_b(t)> ||^2 of a state on the
/// R (x) S (x) E space.
inline std::vector<double> pointer_correlation(const StateVector& psi, const std::vector<Index>& pointer_map,
                                               Index system_dim) {
    if (psi.shape.factors() != 3)
        throw std::invalid_argument("pointer_correlation: expected R (x) S (x) E shape");
    Index n_r = psi.shape.dims[0];
    Index n_b = psi.shape.dims[1];
    Index n_e = psi.shape.dims[2];
    if (n_b != system_dim) throw std::invalid_argument("pointer_correlation: system dim mismatch");
    std::vector<double> fidelity(static_cast<std::size_t>(system_dim), 0.0);
    for (Index b = 0; b < system_dim; ++b) {
        double inside = 0.0, total = 0.0;
        for (Index mu = 0; mu < n_r; ++mu) {
            double w = psi.amplitudes.segment((mu * n_b + b) * n_e, n_e).squaredNorm();
            total += w;
            if (mu == pointer_map[static_cast<std::size_t>(b)]) inside += w;
        }
        fidelity[static_cast<std::size_t>(b)] = total > 0.0 ? inside / total : 0.0;
    }
    return fidelity;
}

/// Lift a (R, E') model to R (x) S (x) E' with a trivial system Hamiltonian.
inline TotalModel lift_model_with_system(const TotalModel& model, Index system_dim) {
    Index n = model.apparatus_dim(), N = model.environment_dim();
    Mat h_e_lift = Mat::Zero(system_dim * N, system_dim * N);
    for (Index b = 0; b < system_dim; ++b) h_e_lift.block(b * N, b * N, N, N) = model.h_e();
    Mat h_i_lift = Mat::Zero(n * system_dim * N, n * system_dim * N);
    for (Index mu = 0; mu < n; ++mu)
        for (Index nu = 0; nu < n; ++nu) {
            Mat blk = model.interaction_block(mu, nu);
            if (blk.cwiseAbs().maxCoeff() == 0.0) continue;
            for (Index b = 0; b < system_dim; ++b)
                h_i_lift.block((mu * system_dim + b) * N, (nu * system_dim + b) * N, N, N) = blk;
        }
    return {model.h_r(), std::move(h_e_lift), std::move(h_i_lift)};
}

struct MeasurementRun {
    MeasurementOutcomeReport report;
    std::shared_ptr<const PropagationContext> context;
    Tree tree;
    SpaceShape shape;  // [n_r, n_b, N]
};

inline MeasurementRun run_measurement(const MeasurementScenario& scenario, const TotalModel& model,
                                      const Tolerance& tol) {
    Index n_r = model.apparatus_dim();
    Index N = model.environment_dim();
    Index n_b = scenario.system_dim;
    scenario.validate(n_r);
    if (scenario.environment_state.size() != N)
        throw std::invalid_argument("run_measurement: environment_state dim mismatch");
    if (scenario.t_1 - scenario.tau_1 <= scenario.tau_d)
        throw std::invalid_argument("run_measurement: NTC window too short (t_1 - tau_1 <= tau_d)");

    SpaceShape lifted_shape(std::vector<Index>{n_r, n_b, N});

    // Segment 1: controlled rotation of R0 into the pointer subspaces.
    double duration = scenario.tau_1 - scenario.t0;
    Vec r0 = scenario.apparatus_initial / scenario.apparatus_initial.norm();
    Mat h_pre = Mat::Zero(n_r * n_b * N, n_r * n_b * N);
    for (Index b = 0; b < n_b; ++b) {
        Vec target = Vec::Zero(n_r);
        target(scenario.pointer_map[static_cast<std::size_t>(b)]) = 1.0;
        Mat k = scenario.rotation_fraction * detail::rotation_generator(r0, target, duration);
        for (Index i = 0; i < n_r; ++i)
            for (Index j = 0; j < n_r; ++j) {
                if (k(i, j) == Complex(0, 0)) continue;
                h_pre.block((i * n_b + b) * N, (j * n_b + b) * N, N, N) =
                    k(i, j) * Mat::Identity(N, N);
            }
    }
    TotalModel pre_model(Mat::Zero(n_r, n_r), Mat::Zero(n_b * N, n_b * N), std::move(h_pre));
    TotalModel post_model = lift_model_with_system(model, n_b);

    auto ctx = std::make_shared<PiecewiseContext>(
        lifted_shape, std::vector<std::pair<double, TotalModel>>{
                          {scenario.t0, std::move(pre_model)}, {scenario.tau_1, std::move(post_model)}});

    // |Psi(t0)> = |R0> (x) (sum_b C_b |b>) (x) |phi0>
    Vec sys(n_b);
    for (Index b = 0; b < n_b; ++b) sys(b) = scenario.coefficients[static_cast<std::size_t>(b)];
    StateVector psi0 = tensor(tensor(StateVector{SpaceShape({n_r}), r0},
                                     StateVector{SpaceShape({n_b}), sys}),
                              StateVector{SpaceShape({N}), scenario.environment_state / scenario.environment_state.norm()});

    // Premeasurement completeness at tau_1.
    StateVector at_tau1 = ctx->evolve(psi0, scenario.t0, scenario.tau_1);
    std::vector<double> fidelity = pointer_correlation(at_tau1, scenario.pointer_map, n_b);
    for (Index b = 0; b < n_b; ++b) {
        if (std::norm(sys(b)) < 1e-14) continue;
        if (fidelity[static_cast<std::size_t>(b)] < 1.0 - tol.eps_x)
            throw std::runtime_error("run_measurement: premeasurement incomplete for outcome " +
                                     std::to_string(b));
    }

    SplitSpec split;
    split.window = {scenario.tau_1, scenario.t_1};
    split.family = canonical_family(n_r);
    split.tau_d = scenario.tau_d;
    split.time_override = scenario.t_1;
    Tree tree = grow_tree(ctx, psi0, scenario.t0, {split}, tol);

    MeasurementOutcomeReport report;
    report.pointer_fidelity = fidelity;
    std::map<int, double> prob;
    std::map<int, std::size_t> node_of_label;
    for (const PathView& path : tree.paths_at(scenario.t_1)) {
        int label = path.labels.empty() ? -1 : path.labels.back();
        prob[label] += path.probability;
        node_of_label[label] = path.node_id;
    }
    if (tree.events().empty() || !tree.events().front().applied_to_any)
        throw std::runtime_error("run_measurement: NTC failed over the split window");

    report.pass = true;
    for (Index b = 0; b < n_b; ++b) {
        MeasurementOutcomeRow row;
        row.b = b;
        row.mu = scenario.pointer_map[static_cast<std::size_t>(b)];
        row.prob_born = std::norm(sys(b));
        auto it = prob.find(static_cast<int>(row.mu));
        row.prob_tree = it != prob.end() ? it->second : 0.0;
        // Component factorization |b> |R_mu(b)>: weight of the (mu(b), b) slice.
        auto node_it = node_of_label.find(static_cast<int>(row.mu));
        if (node_it != node_of_label.end() && row.prob_tree > 1e-20) {
            StateVector comp = tree.component_at(node_it->second, scenario.t_1);
            double inside = comp.amplitudes.segment((row.mu * n_b + b) * N, N).squaredNorm();
            row.factor_fidelity = inside / comp.squared_norm();
        }
        report.max_deviation = std::max(report.max_deviation, std::abs(row.prob_tree - row.prob_born));
        if (row.prob_born > 1e-14 && row.factor_fidelity < 1.0 - tol.eps_x) report.pass = false;
        report.inferred_value[static_cast<int>(row.mu)] = b;
        report.rows.push_back(row);
    }
    if (report.max_deviation > 10.0 * tol.eps_x) report.pass = false;

    return {std::move(report), ctx, std::move(tree), lifted_shape};
}

}  // namespace qbranch
