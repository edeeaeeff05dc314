// R-observable certification: decoherence of the reduced density matrix over
// ensembles of product initial states, decoherence-time readout, the finest
// common block division and coarse-graining.
#pragma once

#include <algorithm>
#include <atomic>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <thread>
#include <vector>

#include "core.hpp"
#include "dynamics.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace qbranch {

/// Thrown when an operation requires the non-transition condition and the
/// supplied family/window pair violates it.
struct NtcViolation : std::runtime_error {
    explicit NtcViolation(double max_leakage)
        : std::runtime_error("non-transition condition violated, max leakage = " +
                             std::to_string(max_leakage)),
          leakage(max_leakage) {}
    double leakage;
};

/// Off-block magnitude curve of the reduced density matrix over a window.
struct DecoherenceCurve {
    std::vector<double> times;
    std::vector<double> offblock;         // max_{mu != nu} ||P_mu rho_re(t) P_nu||_F
    std::optional<double> tau_d;          // measured from the window start
    bool pass = false;
    double eps_x = 0.0;
};

inline double max_offblock(const Mat& rho, const ProjectorFamily& family) {
    double worst = 0.0;
    for (std::size_t a = 0; a < family.size(); ++a)
        for (std::size_t b = 0; b < family.size(); ++b) {
            if (a == b) continue;
            worst = std::max(worst, (family.projectors[a] * rho * family.projectors[b]).norm());
        }
    return worst;
}

/// Track the decoherence of psi0 with respect to the family over the window.
/// The non-transition condition is verified first; its violation means the
/// family/window pair is outside the scope of the R-observable definition.
inline DecoherenceCurve decoherence_check(const TotalModel& model, const StateVector& psi0,
                                          const ProjectorFamily& family, const Window& window,
                                          const Tolerance& tol, Index samples = 64) {
    StateVector psi = psi0.normalized();
    ModelContext ctx(model);
    StateVector at_start = ctx.evolve(psi, 0.0, window.begin);
    NtcReport ntc = ntc_scan(ctx, at_start, family, window, tol.eps_x, samples);
    if (!ntc.verdict) throw NtcViolation(ntc.max_leakage);

    DecoherenceCurve curve;
    curve.eps_x = tol.eps_x;
    double dt = window.length() / static_cast<double>(samples);
    for (Index k = 0; k <= samples; ++k) {
        double t = window.begin + dt * static_cast<double>(k);
        StateVector state = ctx.evolve(psi, 0.0, t);
        Mat rho = reduced_apparatus_matrix(state);
        curve.times.push_back(t);
        curve.offblock.push_back(max_offblock(rho, family));
    }
    // tau_d: first time after which the off-block magnitude stays <= eps_x
    // through the window end.
    std::size_t stay_from = curve.offblock.size();
    for (std::size_t k = curve.offblock.size(); k-- > 0;) {
        if (curve.offblock[k] <= tol.eps_x)
            stay_from = k;
        else
            break;
    }
    if (stay_from < curve.offblock.size()) {
        curve.tau_d = curve.times[stay_from] - window.begin;
        curve.pass = true;
    }
    return curve;
}

/// Verdict over an ensemble of tested product initial states.
struct RCertificate {
    ProjectorFamily family;
    std::size_t ensemble_size = 0;
    std::vector<double> tau_d_per_state;  // NaN when a member never decoheres
    std::vector<bool> pass_per_state;
    double tau_d = 0.0;  // max over passing members: the family's tau_d({mu})
    bool verdict = false;
    DecoherenceCurve worst_curve;  // member with the largest tau_d (or a failure)
};

/// Default witness ensemble: Haar-random apparatus states plus all two-subspace
/// equal superpositions, each paired with one fixed environment vector.
inline std::vector<StateVector> default_initial_ensemble(const TotalModel& model,
                                                         const ProjectorFamily& family,
                                                         const Vec& phi_env, std::size_t random_count,
                                                         std::uint64_t seed) {
    Index n = model.apparatus_dim();
    StateVector env{SpaceShape({model.environment_dim()}), phi_env};
    std::vector<StateVector> ensemble;
    Rng rng(seed ^ 0x5eedull);
    for (std::size_t k = 0; k < random_count; ++k) {
        Rng sub = rng.stream(k);
        StateVector app{SpaceShape({n}), random_unit_vector(n, sub)};
        ensemble.push_back(product_state(app, env));
    }
    for (std::size_t a = 0; a < family.size(); ++a)
        for (std::size_t b = a + 1; b < family.size(); ++b) {
            Vec u = family.range_basis(a).col(0);
            Vec v = family.range_basis(b).col(0);
            Vec w = (u + v) / std::sqrt(2.0);
            ensemble.push_back(product_state({SpaceShape({n}), w}, env));
        }
    return ensemble;
}

/// Thermal-like environment vector: e^{-beta E_k / 2} weights over the H_E
/// eigenbasis. beta defaults to 4 / bandwidth.
inline Vec thermal_like_env_state(const TotalModel& model, double beta = -1.0) {
    Spectral spec = eigh(Mat(model.h_e()));
    double lo = spec.eigenvalues.minCoeff(), hi = spec.eigenvalues.maxCoeff();
    if (beta < 0.0) beta = hi > lo ? 4.0 / (hi - lo) : 0.0;
    Vec weights(spec.dim());
    for (Index k = 0; k < spec.dim(); ++k)
        weights(k) = std::exp(-0.5 * beta * (spec.eigenvalues(k) - lo));
    Vec phi = spec.eigenvectors * weights;
    return phi / phi.norm();
}

inline RCertificate certify_r_observable(const TotalModel& model, const ProjectorFamily& family,
                                         const std::vector<StateVector>& ensemble,
                                         const Window& window, const Tolerance& tol,
                                         Index samples = 64) {
    if (ensemble.empty()) throw std::invalid_argument("certify_r_observable: empty ensemble");
    RCertificate cert;
    cert.family = family;
    cert.ensemble_size = ensemble.size();
    cert.tau_d_per_state.assign(ensemble.size(), std::numeric_limits<double>::quiet_NaN());
    cert.pass_per_state.assign(ensemble.size(), false);
    std::vector<DecoherenceCurve> curves(ensemble.size());

    auto worker = [&](std::size_t k) {
        try {
            curves[k] = decoherence_check(model, ensemble[k], family, window, tol, samples);
        } catch (const NtcViolation&) {
            curves[k].pass = false;
            curves[k].eps_x = tol.eps_x;
        }
    };
    int threads = std::min<int>(worker_count(), static_cast<int>(ensemble.size()));
    if (threads <= 1) {
        for (std::size_t k = 0; k < ensemble.size(); ++k) worker(k);
    } else {
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        for (int w = 0; w < threads; ++w)
            pool.emplace_back([&] {
                for (std::size_t k = next.fetch_add(1); k < ensemble.size(); k = next.fetch_add(1))
                    worker(k);
            });
        for (auto& th : pool) th.join();
    }

    cert.verdict = true;
    std::size_t worst = 0;
    for (std::size_t k = 0; k < ensemble.size(); ++k) {
        cert.pass_per_state[k] = curves[k].pass;
        if (curves[k].pass) {
            cert.tau_d_per_state[k] = *curves[k].tau_d;
            if (*curves[k].tau_d >= cert.tau_d) {
                cert.tau_d = *curves[k].tau_d;
                worst = k;
            }
        } else {
            cert.verdict = false;
            worst = k;
        }
    }
    cert.worst_curve = curves[worst];
    if (!cert.verdict) cert.tau_d = 0.0;
    return cert;
}

struct FinestDivision {
    ProjectorFamily family;
    bool unique = true;  // false for degenerate datasets (convention applied)
};

/// Finest orthogonal division block-diagonalizing every matrix in the set.
///
/// A random real-weighted combination X of the inputs is eigendecomposed;
/// eigenvectors are joined by an edge whenever some input couples them, and
/// connected components define the subspaces. Verified against the inputs and
/// retried with fresh weights (X degeneracies are measure zero but possible).
inline FinestDivision finest_division(const std::vector<Mat>& reduced_set, double tol = 1e-8,
                                      std::uint64_t seed = 0xf1de5ull) {
    if (reduced_set.empty()) throw std::invalid_argument("finest_division: empty set");
    Index n = reduced_set.front().rows();
    for (const Mat& m : reduced_set)
        if (m.rows() != n || m.cols() != n)
            throw std::invalid_argument("finest_division: inconsistent dimensions");

    // Degenerate convention: all inputs proportional to the identity.
    bool all_scalar = true;
    for (const Mat& m : reduced_set) {
        Complex mean = m.trace() / static_cast<double>(n);
        if ((m - mean * Mat::Identity(n, n)).cwiseAbs().maxCoeff() > tol) {
            all_scalar = false;
            break;
        }
    }
    if (all_scalar) return {canonical_family(n), false};

    Rng rng(seed);
    for (int attempt = 0; attempt < 5; ++attempt) {
        Mat x = Mat::Zero(n, n);
        for (const Mat& m : reduced_set) x += rng.uniform(0.25, 1.0) * (m + m.adjoint()) / 2.0;
        Spectral spec = eigh(x);

        // Union-find over eigenvectors.
        std::vector<Index> parent(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) parent[static_cast<std::size_t>(i)] = i;
        std::function<Index(Index)> find = [&](Index i) {
            while (parent[static_cast<std::size_t>(i)] != i) {
                parent[static_cast<std::size_t>(i)] =
                    parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(i)])];
                i = parent[static_cast<std::size_t>(i)];
            }
            return i;
        };
        for (const Mat& m : reduced_set) {
            Mat coupled = spec.eigenvectors.adjoint() * m * spec.eigenvectors;
            for (Index u = 0; u < n; ++u)
                for (Index v = u + 1; v < n; ++v)
                    if (std::abs(coupled(u, v)) > tol) {
                        Index ru = find(u), rv = find(v);
                        if (ru != rv) parent[static_cast<std::size_t>(ru)] = rv;
                    }
        }
        std::map<Index, std::vector<Index>> components;
        for (Index i = 0; i < n; ++i) components[find(i)].push_back(i);

        // Order components by their smallest dominant canonical index for a
        // deterministic labelling.
        std::vector<std::vector<Index>> groups;
        for (auto& [root, cols] : components) groups.push_back(cols);
        std::sort(groups.begin(), groups.end(), [&](const auto& a, const auto& b) {
            auto dominant = [&](const std::vector<Index>& cols) {
                Index best = 0;
                double best_w = -1.0;
                for (Index row = 0; row < n; ++row) {
                    double w = 0.0;
                    for (Index c : cols) w += std::norm(spec.eigenvectors(row, c));
                    if (w > best_w + 1e-12) {
                        best_w = w;
                        best = row;
                    }
                }
                return best;
            };
            return dominant(a) < dominant(b);
        });

        // Split components on which every input acts as a scalar; the finest
        // division there is any rank-1 refinement (flagged non-unique).
        bool unique = true;
        std::vector<std::vector<Index>> refined;
        for (const auto& cols : groups) {
            if (cols.size() >= 2) {
                bool scalar = true;
                for (const Mat& m : reduced_set) {
                    Mat sub(cols.size(), cols.size());
                    for (std::size_t a = 0; a < cols.size(); ++a)
                        for (std::size_t b = 0; b < cols.size(); ++b)
                            sub(static_cast<Index>(a), static_cast<Index>(b)) =
                                spec.eigenvectors.col(cols[a]).dot(m * spec.eigenvectors.col(cols[b]));
                    Complex mean = sub.trace() / static_cast<double>(cols.size());
                    if ((sub - mean * Mat::Identity(sub.rows(), sub.cols())).cwiseAbs().maxCoeff() >
                        tol) {
                        scalar = false;
                        break;
                    }
                }
                if (scalar) {
                    unique = false;
                    for (Index c : cols) refined.push_back({c});
                    continue;
                }
            }
            refined.push_back(cols);
        }

        ProjectorFamily family = family_from_basis_groups(spec.eigenvectors, refined);
        // Verify block-diagonality of every input; retry with new weights on failure.
        bool ok = true;
        for (const Mat& m : reduced_set) {
            for (std::size_t a = 0; a < family.size() && ok; ++a)
                for (std::size_t b = 0; b < family.size() && ok; ++b) {
                    if (a == b) continue;
                    if ((family.projectors[a] * m * family.projectors[b]).cwiseAbs().maxCoeff() >
                        10.0 * tol)
                        ok = false;
                }
            if (!ok) break;
        }
        if (ok) return {std::move(family), unique};
    }
    throw std::runtime_error("finest_division: no block-consistent division found in 5 attempts");
}

/// P_eta = sum_{mu in eta} P_mu for a total grouping of the labels.
inline ProjectorFamily coarse_grain(const ProjectorFamily& family,
                                    const std::map<int, int>& grouping) {
    std::map<int, Mat> merged;
    for (std::size_t k = 0; k < family.size(); ++k) {
        auto it = grouping.find(family.labels[k]);
        if (it == grouping.end())
            throw std::invalid_argument("coarse_grain: grouping does not cover label " +
                                        std::to_string(family.labels[k]));
        auto [pos, inserted] = merged.try_emplace(it->second, family.projectors[k]);
        if (!inserted) pos->second += family.projectors[k];
    }
    std::vector<int> labels;
    std::vector<Mat> projectors;
    for (auto& [eta, p] : merged) {
        labels.push_back(eta);
        projectors.push_back(std::move(p));
    }
    return {std::move(labels), std::move(projectors)};
}

}  // namespace qbranch
