// Branching trees of splitting paths: growth under per-branch non-transition
// verification, path components and probabilities, mixed-state descriptions,
// the decoherence matrix D, coarse/fine compatibility and the
// Initial-vector-restriction verdict.
#pragma once

#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "core.hpp"
#include "dynamics.hpp"
#include "model.hpp"
#include "robservable.hpp"

namespace qbranch {

struct PathOverflow : std::runtime_error {
    explicit PathOverflow(std::size_t count, std::size_t cap)
        : std::runtime_error("path count " + std::to_string(count) + " exceeds cap " +
                             std::to_string(cap)) {}
};

/// Scheduled candidate split: a window [tau, tau~] over which the
/// non-transition condition must hold, the family, and the certified tau_d.
/// The split happens at tau + tau_d unless overridden.
struct SplitSpec {
    Window window;
    ProjectorFamily family;
    double tau_d = 0.0;
    std::optional<double> time_override;

    double split_time() const { return time_override ? *time_override : window.begin + tau_d; }
};

struct SplitDiagnostic {
    std::size_t event_index = 0;
    std::vector<int> path_labels;  // lineage of the affected branch; empty = whole event
    std::string reason;
    double max_leakage = 0.0;
};

struct GrowthOptions {
    Index ntc_samples = 32;
    std::size_t max_paths = 4096;
    double prune_weight = 1e-24;  // drop outcomes with squared norm below this
};

/// One path of the tree at a query time.
struct PathView {
    std::size_t node_id = 0;
    std::vector<int> labels;
    std::vector<double> split_times;
    StateVector component;  // unnormalized
    double probability = 0.0;
};

class Tree {
  public:
    struct Node {
        int parent = -1;
        int event_index = -1;  // event that created this node (-1 for root)
        int outcome_label = 0;
        double birth_time = 0.0;
        double probability = 0.0;  // squared norm of the snapshot
        Vec snapshot;              // component at birth_time, unnormalized
        std::vector<std::size_t> children;
    };

    struct AppliedEvent {
        SplitSpec spec;
        double time = 0.0;
        bool applied_to_any = false;
        bool applied_to_all = false;
    };

    Tree() = default;

    const StateVector& initial() const { return initial_; }
    double t0() const { return t0_; }
    const PropagationContext& context() const { return *ctx_; }
    std::shared_ptr<const PropagationContext> context_ptr() const { return ctx_; }
    const std::vector<AppliedEvent>& events() const { return events_; }
    const std::vector<SplitDiagnostic>& diagnostics() const { return diagnostics_; }
    const std::vector<Node>& nodes() const { return nodes_; }

    /// Shared, path-independent schedule with every branch split at every
    /// applied event (the ideal branching regime of the master equation).
    bool ideal_schedule() const {
        if (!diagnostics_.empty()) return false;
        for (const auto& e : events_)
            if (!e.applied_to_all) return false;
        return true;
    }

    std::vector<int> lineage_labels(std::size_t node_id) const {
        std::vector<int> labels;
        for (int id = static_cast<int>(node_id); id > 0; id = nodes_[static_cast<std::size_t>(id)].parent)
            labels.push_back(nodes_[static_cast<std::size_t>(id)].outcome_label);
        std::reverse(labels.begin(), labels.end());
        return labels;
    }

    std::vector<double> lineage_times(std::size_t node_id) const {
        std::vector<double> times;
        for (int id = static_cast<int>(node_id); id > 0; id = nodes_[static_cast<std::size_t>(id)].parent)
            times.push_back(nodes_[static_cast<std::size_t>(id)].birth_time);
        std::reverse(times.begin(), times.end());
        return times;
    }

    std::vector<int> lineage_events(std::size_t node_id) const {
        std::vector<int> events;
        for (int id = static_cast<int>(node_id); id > 0; id = nodes_[static_cast<std::size_t>(id)].parent)
            events.push_back(nodes_[static_cast<std::size_t>(id)].event_index);
        std::reverse(events.begin(), events.end());
        return events;
    }

    /// Node ids of the paths alive at time t (children take effect at their
    /// split time).
    std::vector<std::size_t> path_ids_at(double t) const {
        if (t < t0_ - 1e-12) throw std::invalid_argument("Tree: query before t0");
        std::vector<std::size_t> out;
        collect_alive(0, t, out);
        return out;
    }

    StateVector component_at(std::size_t node_id, double t) const {
        const Node& node = nodes_[node_id];
        if (t < node.birth_time - 1e-12)
            throw std::invalid_argument("Tree: query before the path existed");
        return {initial_.shape, ctx_->evolve(node.snapshot, node.birth_time, t)};
    }

    std::vector<PathView> paths_at(double t) const {
        std::vector<PathView> out;
        for (std::size_t id : path_ids_at(t)) {
            PathView view;
            view.node_id = id;
            view.labels = lineage_labels(id);
            view.split_times = lineage_times(id);
            view.component = component_at(id, t);
            view.probability = nodes_[id].probability;
            out.push_back(std::move(view));
        }
        return out;
    }

    /// || Psi(t) - sum_alpha Psi_alpha(t) ||
    double decomposition_residual(double t) const {
        Vec full = ctx_->evolve(initial_.amplitudes, t0_, t);
        Vec sum = Vec::Zero(full.size());
        for (std::size_t id : path_ids_at(t)) sum += component_at(id, t).amplitudes;
        return (full - sum).norm();
    }

    double probability_sum(double t) const {
        double p = 0.0;
        for (std::size_t id : path_ids_at(t)) p += nodes_[id].probability;
        return p;
    }

  private:
    void collect_alive(std::size_t id, double t, std::vector<std::size_t>& out) const {
        const Node& node = nodes_[id];
        if (!node.children.empty()) {
            double child_time = nodes_[node.children.front()].birth_time;
            if (child_time <= t + 1e-12) {
                for (std::size_t c : node.children) collect_alive(c, t, out);
                return;
            }
        }
        out.push_back(id);
    }

    std::shared_ptr<const PropagationContext> ctx_;
    StateVector initial_;
    double t0_ = 0.0;
    std::vector<Node> nodes_;
    std::vector<AppliedEvent> events_;
    std::vector<SplitDiagnostic> diagnostics_;

    friend Tree grow_tree(std::shared_ptr<const PropagationContext>, const StateVector&, double,
                          const std::vector<SplitSpec>&, const Tolerance&, const GrowthOptions&);
};

/// Grow a tree from psi0 at t0 through the scheduled candidate splits. At each
/// event the non-transition condition is verified per branch at tol.eps_x; a
/// branch splits only if its own verdict holds, otherwise a diagnostic is
/// recorded and the branch continues unsplit.
inline Tree grow_tree(std::shared_ptr<const PropagationContext> ctx, const StateVector& psi0,
                      double t0, const std::vector<SplitSpec>& schedule, const Tolerance& tol,
                      const GrowthOptions& opts = {}) {
    if (std::abs(psi0.norm() - 1.0) > 1e-10)
        throw std::invalid_argument("grow_tree: psi0 must be normalized");
    for (std::size_t k = 0; k < schedule.size(); ++k) {
        if (schedule[k].window.length() <= 0.0)
            throw std::invalid_argument("grow_tree: empty schedule window");
        if (k > 0 && schedule[k].window.begin < schedule[k - 1].window.end - 1e-12)
            throw std::invalid_argument("grow_tree: schedule windows must be non-overlapping and increasing");
        if (schedule[k].window.begin < t0 - 1e-12)
            throw std::invalid_argument("grow_tree: schedule window before t0");
    }

    Tree tree;
    tree.ctx_ = std::move(ctx);
    tree.initial_ = psi0;
    tree.t0_ = t0;
    tree.nodes_.push_back({-1, -1, 0, t0, psi0.squared_norm(), psi0.amplitudes, {}});

    std::vector<std::size_t> leaves{0};
    for (std::size_t e = 0; e < schedule.size(); ++e) {
        const SplitSpec& spec = schedule[e];
        double t_split = spec.split_time();
        Tree::AppliedEvent event{spec, t_split, false, false};

        if (spec.window.length() < spec.tau_d - 1e-12) {
            tree.diagnostics_.push_back({e, {}, "window shorter than tau_d", 0.0});
            tree.events_.push_back(event);
            continue;
        }
        if (t_split < spec.window.begin + spec.tau_d - 1e-9 || t_split > spec.window.end + 1e-9) {
            tree.diagnostics_.push_back({e, {}, "split time outside [tau + tau_d, window end]", 0.0});
            tree.events_.push_back(event);
            continue;
        }

        std::vector<std::size_t> next_leaves;
        std::size_t splits_applied = 0;
        for (std::size_t leaf : leaves) {
            Tree::Node& node = tree.nodes_[leaf];
            StateVector at_begin{psi0.shape,
                                 tree.ctx_->evolve(node.snapshot, node.birth_time, spec.window.begin)};
            NtcReport ntc = ntc_scan(*tree.ctx_, at_begin, spec.family, spec.window, tol.eps_x,
                                     opts.ntc_samples);
            if (!ntc.verdict) {
                tree.diagnostics_.push_back(
                    {e, tree.lineage_labels(leaf), "ntc violated", ntc.max_leakage});
                next_leaves.push_back(leaf);
                continue;
            }
            ++splits_applied;
            event.applied_to_any = true;
            Vec at_split = tree.ctx_->evolve(at_begin.amplitudes, spec.window.begin, t_split);
            for (std::size_t f = 0; f < spec.family.size(); ++f) {
                Vec comp = spec.family.apply_embedded(f, {psi0.shape, at_split});
                double weight = comp.squaredNorm();
                if (weight <= opts.prune_weight) continue;
                Tree::Node child;
                child.parent = static_cast<int>(leaf);
                child.event_index = static_cast<int>(e);
                child.outcome_label = spec.family.labels[f];
                child.birth_time = t_split;
                child.probability = weight;
                child.snapshot = std::move(comp);
                tree.nodes_.push_back(std::move(child));
                std::size_t id = tree.nodes_.size() - 1;
                tree.nodes_[leaf].children.push_back(id);
                next_leaves.push_back(id);
            }
        }
        event.applied_to_all = splits_applied == leaves.size();
        tree.events_.push_back(event);
        if (next_leaves.size() > opts.max_paths)
            throw PathOverflow(next_leaves.size(), opts.max_paths);
        leaves = std::move(next_leaves);
    }
    return tree;
}

inline Tree grow_tree(const TotalModel& model, const StateVector& psi0,
                      const std::vector<SplitSpec>& schedule, const Tolerance& tol,
                      const GrowthOptions& opts = {}) {
    return grow_tree(std::make_shared<ModelContext>(model), psi0, 0.0, schedule, tol, opts);
}

/// rho_Upsilon(t) = sum_alpha |Psi_alpha(t)><Psi_alpha(t)|
inline Operator mixed_state(const Tree& tree, double t) {
    Index d = tree.initial().shape.total_dim();
    Mat rho = Mat::Zero(d, d);
    for (std::size_t id : tree.path_ids_at(t)) {
        Vec c = tree.component_at(id, t).amplitudes;
        rho += c * c.adjoint();
    }
    return {tree.initial().shape, std::move(rho), true};
}

/// Gram matrix D_{alpha alpha'} = <Psi_alpha(t)|Psi_alpha'(t)> over the paths
/// alive at t (ordered as paths_at(t)).
struct DecoherenceMatrix {
    double time = 0.0;
    std::vector<std::size_t> path_ids;
    Mat entries;

    double max_offdiagonal(std::size_t* row = nullptr, std::size_t* col = nullptr) const {
        double worst = 0.0;
        for (Index a = 0; a < entries.rows(); ++a)
            for (Index b = 0; b < entries.cols(); ++b) {
                if (a == b) continue;
                double m = std::abs(entries(a, b));
                if (m > worst) {
                    worst = m;
                    if (row) *row = static_cast<std::size_t>(a);
                    if (col) *col = static_cast<std::size_t>(b);
                }
            }
        return worst;
    }
};

inline DecoherenceMatrix decoherence_matrix(const Tree& tree, double t) {
    DecoherenceMatrix d;
    d.time = t;
    d.path_ids = tree.path_ids_at(t);
    std::size_t m = d.path_ids.size();
    std::vector<Vec> comps;
    comps.reserve(m);
    for (std::size_t id : d.path_ids) comps.push_back(tree.component_at(id, t).amplitudes);
    d.entries.resize(static_cast<Index>(m), static_cast<Index>(m));
    for (std::size_t a = 0; a < m; ++a)
        for (std::size_t b = 0; b < m; ++b)
            d.entries(static_cast<Index>(a), static_cast<Index>(b)) = comps[a].dot(comps[b]);
    return d;
}

namespace detail {

/// True when the projector is |mu><mu| for a canonical basis vector mu.
inline std::optional<Index> canonical_rank1_index(const Mat& p, double tol = 1e-10) {
    Index n = p.rows();
    std::optional<Index> hit;
    for (Index i = 0; i < n; ++i) {
        double d = p(i, i).real();
        if (d > 0.5) {
            if (hit) return std::nullopt;
            hit = i;
        }
    }
    if (!hit) return std::nullopt;
    Mat expect = Mat::Zero(n, n);
    expect(*hit, *hit) = 1.0;
    if ((p - expect).cwiseAbs().maxCoeff() > tol) return std::nullopt;
    return hit;
}

}  // namespace detail

/// D via the environment-space representation (rank-1 canonical families,
/// initial vector |mu0> (x) |phi0>): chains of N-dimensional window evolutions
/// U^E_mu joined by full-space transition blocks Y_{mu mu'}.
inline DecoherenceMatrix decoherence_matrix_env_route(const Tree& tree, double t) {
    const SpaceShape& shape = tree.initial().shape;
    Index n = shape.apparatus_dim();
    Index N = shape.environment_dim();

    // Initial vector must live in a single canonical subspace.
    Index mu0 = -1;
    for (Index mu = 0; mu < n; ++mu) {
        double w = tree.initial().amplitudes.segment(mu * N, N).squaredNorm();
        if (w > 1e-20) {
            if (mu0 >= 0)
                throw std::invalid_argument("env route: initial vector spans several subspaces");
            mu0 = mu;
        }
    }
    if (mu0 < 0) throw std::invalid_argument("env route: zero initial vector");
    Vec phi0 = tree.initial().amplitudes.segment(mu0 * N, N);

    // Per-event env-block evolvers, built on demand.
    std::map<std::pair<int, Index>, std::shared_ptr<Evolver>> block_cache;
    auto env_evolver = [&](int event_index, Index mu) {
        auto key = std::make_pair(event_index, mu);
        auto it = block_cache.find(key);
        if (it != block_cache.end()) return it->second;
        const auto& ev = tree.events()[static_cast<std::size_t>(event_index)];
        const TotalModel& m = tree.context().model_over(ev.spec.window.begin, ev.spec.window.end);
        auto e = std::make_shared<Evolver>(
            Operator(SpaceShape({N}), m.env_block_hamiltonian(mu), true));
        block_cache.emplace(key, e);
        return e;
    };

    DecoherenceMatrix d;
    d.time = t;
    d.path_ids = tree.path_ids_at(t);
    std::vector<Mat> final_slices;  // column mu = phi^alpha_mu(t)

    for (std::size_t id : d.path_ids) {
        std::vector<int> events = tree.lineage_events(id);
        std::vector<int> labels = tree.lineage_labels(id);
        Vec w = phi0;
        Index mu_cur = mu0;
        double t_cur = tree.t0();
        for (std::size_t k = 0; k < events.size(); ++k) {
            const auto& ev = tree.events()[static_cast<std::size_t>(events[k])];
            auto target = detail::canonical_rank1_index(
                ev.spec.family.projectors[ev.spec.family.index_of_label(labels[k])]);
            if (!target)
                throw std::invalid_argument("env route: family is not canonical rank-1");
            // Y_{mu_k, mu_{k-1}}(tau_k, tau~_{k-1}) via one full-space evolution.
            Vec full = Vec::Zero(n * N);
            full.segment(mu_cur * N, N) = w;
            full = tree.context().evolve(full, t_cur, ev.spec.window.begin);
            w = full.segment(*target * N, N);
            mu_cur = *target;
            // U^E_mu over the whole window.
            if (t >= ev.spec.window.end - 1e-12 || k + 1 < events.size()) {
                w = env_evolver(events[k], mu_cur)->evolve(w, ev.spec.window.length());
                t_cur = ev.spec.window.end;
            } else {
                // Query inside the last window: evolve the block up to t.
                w = env_evolver(events[k], mu_cur)->evolve(w, t - ev.spec.window.begin);
                t_cur = t;
            }
        }
        // Trailing full evolution to t, keeping every apparatus slice.
        Vec full = Vec::Zero(n * N);
        full.segment(mu_cur * N, N) = w;
        full = tree.context().evolve(full, t_cur, t);
        Mat slices(N, n);
        for (Index mu = 0; mu < n; ++mu) slices.col(mu) = full.segment(mu * N, N);
        final_slices.push_back(std::move(slices));
    }

    std::size_t m = d.path_ids.size();
    d.entries.resize(static_cast<Index>(m), static_cast<Index>(m));
    for (std::size_t a = 0; a < m; ++a)
        for (std::size_t b = 0; b < m; ++b) {
            Complex sum = 0.0;
            for (Index mu = 0; mu < n; ++mu)
                sum += final_slices[a].col(mu).dot(final_slices[b].col(mu));
            d.entries(static_cast<Index>(a), static_cast<Index>(b)) = sum;
        }
    return d;
}

/// Component of one path computed through the W_alpha factorization: full
/// unitaries between windows, block unitaries inside them, no projectors.
inline StateVector component_via_w(const Tree& tree, std::size_t node_id, double t) {
    const SpaceShape& shape = tree.initial().shape;
    std::vector<int> events = tree.lineage_events(node_id);
    std::vector<int> labels = tree.lineage_labels(node_id);

    Vec v = tree.initial().amplitudes;
    double t_cur = tree.t0();
    std::map<std::pair<int, int>, BlockHamiltonian> cache;
    for (std::size_t k = 0; k < events.size(); ++k) {
        const auto& ev = tree.events()[static_cast<std::size_t>(events[k])];
        const Window& win = ev.spec.window;
        if (t < win.begin - 1e-12)
            throw std::invalid_argument("component_via_w: query before the path's last window");
        v = tree.context().evolve(v, t_cur, win.begin);
        auto key = std::make_pair(events[k], labels[k]);
        auto it = cache.find(key);
        if (it == cache.end()) {
            const TotalModel& m = tree.context().model_over(win.begin, win.end);
            auto blocks = block_hamiltonians(m, ev.spec.family);
            BlockHamiltonian blk = blocks[ev.spec.family.index_of_label(labels[k])];
            it = cache.emplace(key, std::move(blk)).first;
        }
        const BlockHamiltonian& blk = it->second;
        double upto = (k + 1 == events.size() && t < win.end) ? t : win.end;
        Vec sub = blk.restrict_to_subspace(v);
        sub = blk.evolver()->evolve(sub, upto - win.begin);
        v = blk.embed(sub);
        t_cur = upto;
    }
    v = tree.context().evolve(v, t_cur, t);
    return {shape, std::move(v)};
}

/// S_Upsilon(t) = -sum_alpha P_alpha ln P_alpha
inline double tree_entropy(const Tree& tree, double t) {
    double s = 0.0;
    for (std::size_t id : tree.path_ids_at(t)) {
        double p = tree.nodes()[id].probability;
        if (p > 0.0) s -= p * std::log(p);
    }
    return s;
}

/// Thrown when a component straddles subspaces of the queried family.
struct ValueUndefined : std::runtime_error {
    ValueUndefined(std::vector<int> path, std::map<int, double> weights_in)
        : std::runtime_error("component has no definite value for the family"),
          path_labels(std::move(path)),
          weights(std::move(weights_in)) {}
    std::vector<int> path_labels;
    std::map<int, double> weights;  // label -> squared projected norm
};

/// P_Upsilon(mu, t) = sum over paths whose component lies in H_mu of P_alpha.
/// Requires every component to have a definite value within eps_x.
inline std::map<int, double> probability_of_value(const Tree& tree, const ProjectorFamily& family,
                                                  double t, double eps_x) {
    std::map<int, double> out;
    for (int label : family.labels) out[label] = 0.0;
    for (std::size_t id : tree.path_ids_at(t)) {
        double p = tree.nodes()[id].probability;
        if (p <= 1e-20) continue;
        StateVector comp = tree.component_at(id, t);
        std::map<int, double> weights;
        int best_label = family.labels.front();
        double best_w = -1.0;
        for (std::size_t f = 0; f < family.size(); ++f) {
            double w = family.apply_embedded(f, comp).squaredNorm();
            weights[family.labels[f]] = w;
            if (w > best_w) {
                best_w = w;
                best_label = family.labels[f];
            }
        }
        double residual = std::sqrt(std::max(0.0, 1.0 - best_w / p));
        if (residual > eps_x) throw ValueUndefined(tree.lineage_labels(id), weights);
        out[best_label] += p;
    }
    return out;
}

/// Mapping of fine paths onto coarse paths by subspace membership, residuals
/// of the component-sum relation, and any coarse-tree splits that were
/// invalidated downstream of a coarse-graining.
struct CoarseFineReport {
    std::vector<std::vector<std::size_t>> groups;  // per coarse path: indices into fine paths
    std::vector<double> residuals;                 // per coarse path
    bool mapping_total = true;
    bool pass = false;
    double max_residual = 0.0;
    std::vector<SplitDiagnostic> invalidated_downstream;
};

inline CoarseFineReport compare_coarse_fine(const Tree& fine, const Tree& coarse, double t,
                                            double tol, double membership_tol = 1e-6) {
    if ((fine.initial().amplitudes - coarse.initial().amplitudes).norm() > 1e-12)
        throw std::invalid_argument("compare_coarse_fine: trees start from different initial vectors");

    std::vector<std::size_t> fine_ids = fine.path_ids_at(t);
    std::vector<std::size_t> coarse_ids = coarse.path_ids_at(t);

    // Fine ancestor alive at a given time.
    auto fine_ancestor_at = [&](std::size_t leaf, double when) {
        std::vector<std::size_t> chain;
        for (int id = static_cast<int>(leaf); id >= 0; id = fine.nodes()[static_cast<std::size_t>(id)].parent)
            chain.push_back(static_cast<std::size_t>(id));
        std::reverse(chain.begin(), chain.end());
        std::size_t best = chain.front();
        for (std::size_t id : chain)
            if (fine.nodes()[id].birth_time <= when + 1e-12) best = id;
        return best;
    };

    CoarseFineReport report;
    report.groups.assign(coarse_ids.size(), {});
    report.residuals.assign(coarse_ids.size(), 0.0);

    std::vector<bool> assigned(fine_ids.size(), false);
    for (std::size_t ci = 0; ci < coarse_ids.size(); ++ci) {
        std::size_t cid = coarse_ids[ci];
        std::vector<int> c_events = coarse.lineage_events(cid);
        std::vector<int> c_labels = coarse.lineage_labels(cid);
        for (std::size_t fi = 0; fi < fine_ids.size(); ++fi) {
            bool member = true;
            for (std::size_t k = 0; k < c_events.size() && member; ++k) {
                const auto& ev = coarse.events()[static_cast<std::size_t>(c_events[k])];
                if (ev.time > t + 1e-12) break;
                std::size_t anc = fine_ancestor_at(fine_ids[fi], ev.time);
                StateVector comp = fine.component_at(anc, ev.time);
                double norm_sq = comp.squared_norm();
                if (norm_sq <= 1e-28) {
                    member = false;
                    break;
                }
                std::size_t f = ev.spec.family.index_of_label(c_labels[k]);
                double inside = ev.spec.family.apply_embedded(f, comp).squaredNorm();
                double residual = std::sqrt(std::max(0.0, 1.0 - inside / norm_sq));
                if (residual > membership_tol) member = false;
            }
            if (member) {
                if (assigned[fi]) report.mapping_total = false;  // overlap: not disjoint
                assigned[fi] = true;
                report.groups[ci].push_back(fi);
            }
        }
    }
    for (bool a : assigned)
        if (!a) report.mapping_total = false;

    // Residuals of the component-sum relation.
    std::vector<StateVector> fine_comps;
    fine_comps.reserve(fine_ids.size());
    for (std::size_t id : fine_ids) fine_comps.push_back(fine.component_at(id, t));
    for (std::size_t ci = 0; ci < coarse_ids.size(); ++ci) {
        Vec sum = Vec::Zero(fine.initial().amplitudes.size());
        for (std::size_t fi : report.groups[ci]) sum += fine_comps[fi].amplitudes;
        Vec cvec = coarse.component_at(coarse_ids[ci], t).amplitudes;
        report.residuals[ci] = (cvec - sum).norm();
        report.max_residual = std::max(report.max_residual, report.residuals[ci]);
    }

    for (const auto& diag : coarse.diagnostics()) {
        const auto& ev = coarse.events()[diag.event_index];
        if (ev.time <= t + 1e-12 && diag.reason == "ntc violated")
            report.invalidated_downstream.push_back(diag);
    }

    report.pass = report.mapping_total && report.max_residual <= tol;
    return report;
}

/// One coarse-grained variant of a fine schedule: per-event label groupings.
struct CoarseVariant {
    std::map<std::size_t, std::map<int, int>> groupings;  // event index -> (mu -> eta)
};

inline std::vector<SplitSpec> coarse_schedule(const std::vector<SplitSpec>& fine,
                                              const CoarseVariant& variant) {
    std::vector<SplitSpec> out = fine;
    for (const auto& [event, grouping] : variant.groupings) {
        if (event >= out.size()) throw std::invalid_argument("coarse_schedule: event index out of range");
        out[event].family = coarse_grain(out[event].family, grouping);
    }
    return out;
}

struct IvrVerdict {
    bool pass = false;
    double max_offdiagonal = 0.0;
    double worst_time = 0.0;
    std::pair<std::size_t, std::size_t> worst_pair{0, 0};
    std::vector<double> checkpoint_times;
    std::vector<double> offdiagonal_per_checkpoint;
    std::vector<CoarseFineReport> coarse_reports;
    std::vector<double> re_ov_residuals;  // per coarse variant
};

/// Initial-vector-restriction check: D stays diagonal (within eps_x) at every
/// checkpoint and every coarse-grained variant composes from the fine tree.
inline IvrVerdict ivr_check(std::shared_ptr<const PropagationContext> ctx, const StateVector& psi0,
                            double t0, const std::vector<SplitSpec>& fine_schedule,
                            const std::vector<CoarseVariant>& coarse_variants, double t_end,
                            const Tolerance& tol, Index checkpoints = 16,
                            const GrowthOptions& opts = {}) {
    Tree fine = grow_tree(ctx, psi0, t0, fine_schedule, tol, opts);

    IvrVerdict verdict;
    double dt = (t_end - t0) / static_cast<double>(checkpoints);
    for (Index k = 0; k <= checkpoints; ++k) {
        double t = t0 + dt * static_cast<double>(k);
        DecoherenceMatrix d = decoherence_matrix(fine, t);
        std::size_t row = 0, col = 0;
        double off = d.max_offdiagonal(&row, &col);
        verdict.checkpoint_times.push_back(t);
        verdict.offdiagonal_per_checkpoint.push_back(off);
        if (off > verdict.max_offdiagonal) {
            verdict.max_offdiagonal = off;
            verdict.worst_time = t;
            verdict.worst_pair = {row, col};
        }
    }

    bool coarse_ok = true;
    for (const CoarseVariant& variant : coarse_variants) {
        Tree coarse = grow_tree(ctx, psi0, t0, coarse_schedule(fine_schedule, variant), tol, opts);
        CoarseFineReport report = compare_coarse_fine(fine, coarse, t_end, 10.0 * tol.eps_x);
        coarse_ok = coarse_ok && report.pass;

        // Eq.-style compatibility residual: per value of the final coarse
        // family, the sum of cross terms within each group.
        double worst = 0.0;
        std::vector<std::size_t> fine_ids = fine.path_ids_at(t_end);
        std::vector<Vec> comps;
        for (std::size_t id : fine_ids) comps.push_back(fine.component_at(id, t_end).amplitudes);
        for (std::size_t ci = 0; ci < report.groups.size(); ++ci) {
            Complex cross = 0.0;
            for (std::size_t a : report.groups[ci])
                for (std::size_t b : report.groups[ci])
                    if (a != b) cross += comps[a].dot(comps[b]);
            worst = std::max(worst, std::abs(cross));
        }
        verdict.re_ov_residuals.push_back(worst);
        verdict.coarse_reports.push_back(std::move(report));
    }

    verdict.pass = verdict.max_offdiagonal <= tol.eps_x && coarse_ok;
    return verdict;
}

}  // namespace qbranch
