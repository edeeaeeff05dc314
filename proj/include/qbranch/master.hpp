// Ideal branching case: per-step transition rates Gamma_n, the master-equation
// iteration for p_mu(t_n), the Delta p discrepancy and the apparatus entropy.
#pragma once

#include <cmath>
#include <map>
#include <vector>

#include "core.hpp"
#include "tree.hpp"

namespace qbranch {

/// Transition rates at one step of an ideal (shared-schedule) tree.
/// gamma(mu', mu) is the unweighted average of the per-path rates over paths
/// whose latest outcome is mu'; gamma_weighted is the probability-weighted
/// variant, kept for comparison.
struct TransitionMatrix {
    std::size_t step = 0;  // transition from event step-1 to event step
    std::vector<int> labels;
    Eigen::MatrixXd gamma;
    Eigen::MatrixXd gamma_weighted;
    std::vector<bool> row_defined;
    std::vector<std::size_t> group_sizes;
    std::size_t path_count = 0;  // M_n: parent paths entering the transition

    struct RawRow {
        std::size_t node_id = 0;
        int mu_prev = 0;
        Eigen::VectorXd gamma;  // Gamma_n(alpha, mu) per label
        double probability = 0.0;
    };
    std::vector<RawRow> raw;

    Index label_index(int mu) const {
        for (std::size_t k = 0; k < labels.size(); ++k)
            if (labels[k] == mu) return static_cast<Index>(k);
        throw std::invalid_argument("TransitionMatrix: unknown label");
    }

    /// deltaGamma_n(alpha, mu) = Gamma_n(alpha, mu) - Gamma_n(mu'_alpha, mu)
    Eigen::VectorXd delta_gamma(std::size_t raw_index) const {
        const RawRow& row = raw[raw_index];
        return row.gamma - gamma.row(label_index(row.mu_prev)).transpose();
    }
};

namespace detail {

inline void require_ideal(const Tree& tree) {
    if (!tree.ideal_schedule())
        throw std::invalid_argument("master: tree is not in the ideal branching regime "
                                    "(shared, path-independent split schedule)");
}

inline std::vector<std::size_t> nodes_created_by_event(const Tree& tree, std::size_t event) {
    std::vector<std::size_t> out;
    for (std::size_t id = 0; id < tree.nodes().size(); ++id)
        if (tree.nodes()[id].event_index == static_cast<int>(event)) out.push_back(id);
    return out;
}

}  // namespace detail

/// Rates of the transition entering event `step` (1 <= step < #events):
/// Gamma_n(alpha, mu) = <Psi_alpha| U^dag P_mu U |Psi_alpha> / P_alpha, read
/// off the child probabilities of the grown tree.
inline TransitionMatrix step_rates(const Tree& tree, std::size_t step) {
    detail::require_ideal(tree);
    if (step < 1 || step >= tree.events().size())
        throw std::invalid_argument("step_rates: step out of range (needs a previous outcome)");
    const auto& family_prev = tree.events()[step - 1].spec.family;
    const auto& family_next = tree.events()[step].spec.family;
    if (family_prev.labels != family_next.labels)
        throw std::invalid_argument("step_rates: the ideal case uses one R-observable; "
                                    "family labels differ between steps");

    TransitionMatrix tm;
    tm.step = step;
    tm.labels = family_next.labels;
    Index m = static_cast<Index>(tm.labels.size());
    tm.gamma = Eigen::MatrixXd::Zero(m, m);
    tm.gamma_weighted = Eigen::MatrixXd::Zero(m, m);
    tm.row_defined.assign(static_cast<std::size_t>(m), false);
    tm.group_sizes.assign(static_cast<std::size_t>(m), 0);

    Eigen::VectorXd weight_sums = Eigen::VectorXd::Zero(m);
    std::vector<std::size_t> parents = detail::nodes_created_by_event(tree, step - 1);
    tm.path_count = parents.size();
    for (std::size_t pid : parents) {
        const Tree::Node& parent = tree.nodes()[pid];
        if (parent.probability <= 0.0) continue;
        TransitionMatrix::RawRow row;
        row.node_id = pid;
        row.mu_prev = parent.outcome_label;
        row.probability = parent.probability;
        row.gamma = Eigen::VectorXd::Zero(m);
        for (std::size_t cid : parent.children) {
            const Tree::Node& child = tree.nodes()[cid];
            row.gamma(tm.label_index(child.outcome_label)) = child.probability / parent.probability;
        }
        Index r = tm.label_index(row.mu_prev);
        tm.gamma.row(r) += row.gamma.transpose();
        tm.gamma_weighted.row(r) += row.probability * row.gamma.transpose();
        weight_sums(r) += row.probability;
        tm.group_sizes[static_cast<std::size_t>(r)] += 1;
        tm.raw.push_back(std::move(row));
    }
    for (Index r = 0; r < m; ++r) {
        std::size_t count = tm.group_sizes[static_cast<std::size_t>(r)];
        if (count > 0) {
            tm.row_defined[static_cast<std::size_t>(r)] = true;
            tm.gamma.row(r) /= static_cast<double>(count);
            if (weight_sums(r) > 0.0) tm.gamma_weighted.row(r) /= weight_sums(r);
        }
    }
    return tm;
}

/// p_mu(t_{n+1}) = sum_mu' Gamma_n(mu', mu) p_mu'(t_n)
inline Eigen::VectorXd master_step(const Eigen::VectorXd& p, const TransitionMatrix& tm) {
    Index m = static_cast<Index>(tm.labels.size());
    if (p.size() != m) throw std::invalid_argument("master_step: population size mismatch");
    if (std::abs(p.sum() - 1.0) > 1e-9)
        throw std::invalid_argument("master_step: populations must sum to 1");
    for (Index r = 0; r < m; ++r)
        if (!tm.row_defined[static_cast<std::size_t>(r)] && p(r) > 1e-12)
            throw std::invalid_argument("master_step: row " + std::to_string(tm.labels[static_cast<std::size_t>(r)]) +
                                        " undefined but populated");
    return tm.gamma.transpose() * p;
}

/// 0 ln 0 := 0; entries may dip to -1e-12 from roundoff.
inline double apparatus_entropy(const Eigen::VectorXd& p) {
    double s = 0.0;
    for (Index k = 0; k < p.size(); ++k) {
        if (p(k) < -1e-12) throw std::invalid_argument("apparatus_entropy: negative population");
        if (p(k) > 0.0) s -= p(k) * std::log(p(k));
    }
    return s;
}

/// Exact populations from path sums against the iterated master equation.
struct PopulationSeries {
    std::vector<int> labels;
    std::vector<double> times;                  // split times t_1 .. t_K
    std::vector<Eigen::VectorXd> p_exact;       // per step
    std::vector<Eigen::VectorXd> p_master;      // per step, iterated from p_exact[0]
    std::vector<Eigen::VectorXd> delta_p;       // one-step residual entering step k+1
    std::vector<std::size_t> path_counts;       // M_n entering each transition
    std::vector<double> entropy;                // S_R from p_exact
    std::vector<double> gamma_variant_gap;      // max |gamma - gamma_weighted|
    std::vector<bool> delta_p_within_bound;     // |delta_p| <= 5 / sqrt(M_n)

    bool all_within_bound() const {
        for (bool b : delta_p_within_bound)
            if (!b) return false;
        return true;
    }
};

inline PopulationSeries master_vs_exact(const Tree& tree) {
    detail::require_ideal(tree);
    std::size_t n_events = tree.events().size();
    if (n_events < 2) throw std::invalid_argument("master_vs_exact: need at least two splits");
    const auto& family = tree.events().front().spec.family;

    PopulationSeries series;
    series.labels = family.labels;
    Index m = static_cast<Index>(family.labels.size());
    auto label_index = [&](int mu) {
        for (std::size_t k = 0; k < family.labels.size(); ++k)
            if (family.labels[k] == mu) return static_cast<Index>(k);
        throw std::logic_error("master_vs_exact: unknown label");
    };

    for (std::size_t e = 0; e < n_events; ++e) {
        Eigen::VectorXd p = Eigen::VectorXd::Zero(m);
        for (std::size_t id : detail::nodes_created_by_event(tree, e))
            p(label_index(tree.nodes()[id].outcome_label)) += tree.nodes()[id].probability;
        series.p_exact.push_back(p);
        series.times.push_back(tree.events()[e].time);
        series.entropy.push_back(apparatus_entropy(p));
    }

    series.p_master.push_back(series.p_exact.front());
    for (std::size_t e = 1; e < n_events; ++e) {
        TransitionMatrix tm = step_rates(tree, e);
        series.p_master.push_back(master_step(series.p_master.back(), tm));
        Eigen::VectorXd residual = series.p_exact[e] - tm.gamma.transpose() * series.p_exact[e - 1];
        series.delta_p.push_back(residual);
        series.path_counts.push_back(tm.path_count);
        series.gamma_variant_gap.push_back((tm.gamma - tm.gamma_weighted).cwiseAbs().maxCoeff());
        double bound = 5.0 / std::sqrt(static_cast<double>(tm.path_count));
        series.delta_p_within_bound.push_back(residual.cwiseAbs().maxCoeff() <= bound);
    }
    return series;
}

}  // namespace qbranch
