// Total-system model construction: n-level apparatus + chaotic environment,
// dephasing-form interactions, projector families and the spectral statistics
// entering the echo rate formulas.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "core.hpp"
#include "rng.hpp"

namespace qbranch {

inline Vec random_unit_vector(Index dim, Rng& rng) {
    Vec v(dim);
    for (Index i = 0; i < dim; ++i) v(i) = Complex(rng.gaussian(), rng.gaussian());
    v /= v.norm();
    return v;
}

enum class EnsembleKind { GUE, GOE, DiagonalBanded };

inline std::string to_string(EnsembleKind k) {
    switch (k) {
        case EnsembleKind::GUE: return "gue";
        case EnsembleKind::GOE: return "goe";
        case EnsembleKind::DiagonalBanded: return "diagonal_banded";
    }
    return "?";
}

/// Seeded random-matrix environment. energy_scale is the target mean level
/// spacing at the band center; generation is bit-reproducible per (kind, N, seed).
struct EnsembleSpec {
    EnsembleKind kind = EnsembleKind::GUE;
    Index dim = 0;
    double energy_scale = 1.0;
    std::uint64_t seed = 0;

    Mat generate() const {
        if (dim < 1) throw std::invalid_argument("EnsembleSpec: dim must be >= 1");
        Rng rng(seed ^ 0x454e53u);  // mix a fixed tag so seed 0 is usable
        Mat h(dim, dim);
        switch (kind) {
            case EnsembleKind::GUE: {
                // Entry convention <|H_ij|^2> = sigma^2 for all entries; the
                // semicircle then has center density sqrt(N)/(pi sigma), so
                // sigma = scale * sqrt(N) / pi puts the central spacing at scale.
                double sigma = energy_scale * std::sqrt(static_cast<double>(dim)) / M_PI;
                for (Index i = 0; i < dim; ++i) {
                    h(i, i) = Complex(sigma * rng.gaussian(), 0.0);
                    for (Index j = i + 1; j < dim; ++j) {
                        Complex z(rng.gaussian(), rng.gaussian());
                        h(i, j) = sigma * z / std::sqrt(2.0);
                        h(j, i) = std::conj(h(i, j));
                    }
                }
                break;
            }
            case EnsembleKind::GOE: {
                double sigma = energy_scale * std::sqrt(static_cast<double>(dim)) / M_PI;
                for (Index i = 0; i < dim; ++i) {
                    h(i, i) = Complex(sigma * std::sqrt(2.0) * rng.gaussian(), 0.0);
                    for (Index j = i + 1; j < dim; ++j) {
                        h(i, j) = Complex(sigma * rng.gaussian(), 0.0);
                        h(j, i) = h(i, j);
                    }
                }
                break;
            }
            case EnsembleKind::DiagonalBanded: {
                h.setZero();
                const Index bandwidth = std::min<Index>(8, dim - 1);
                double center = 0.5 * static_cast<double>(dim - 1);
                for (Index i = 0; i < dim; ++i)
                    h(i, i) = Complex((static_cast<double>(i) - center) * energy_scale, 0.0);
                for (Index i = 0; i < dim; ++i) {
                    for (Index k = 1; k <= bandwidth && i + k < dim; ++k) {
                        Complex z(rng.gaussian(), rng.gaussian());
                        h(i, i + k) = energy_scale * z;
                        h(i + k, i) = std::conj(h(i, i + k));
                    }
                }
                break;
            }
        }
        return h;
    }
};

/// Complete orthogonal family {P_mu} on the apparatus factor, labelled by
/// integer values mu. The embedded total-space projector P_mu (x) I_E is formed
/// on demand.
struct ProjectorFamily {
    std::vector<int> labels;
    std::vector<Mat> projectors;  // n x n Hermitian idempotents

    ProjectorFamily() = default;
    ProjectorFamily(std::vector<int> lab, std::vector<Mat> proj)
        : labels(std::move(lab)), projectors(std::move(proj)) {
        validate();
    }

    std::size_t size() const { return projectors.size(); }
    Index apparatus_dim() const { return projectors.empty() ? 0 : projectors.front().rows(); }

    Index rank(std::size_t k) const {
        return static_cast<Index>(std::lround(projectors[k].trace().real()));
    }

    bool all_rank_one() const {
        for (std::size_t k = 0; k < size(); ++k)
            if (rank(k) != 1) return false;
        return true;
    }

    /// P_mu (x) I_E on a product space with environment dimension env_dim.
    Mat embedded(std::size_t k, Index env_dim) const {
        const Mat& p = projectors[k];
        Index n = p.rows();
        Mat out = Mat::Zero(n * env_dim, n * env_dim);
        for (Index i = 0; i < n; ++i)
            for (Index j = 0; j < n; ++j)
                if (p(i, j) != Complex(0, 0))
                    out.block(i * env_dim, j * env_dim, env_dim, env_dim) =
                        p(i, j) * Mat::Identity(env_dim, env_dim);
        return out;
    }

    /// (P_mu (x) I_E) |psi> without forming the embedded matrix.
    Vec apply_embedded(std::size_t k, const StateVector& psi) const {
        Index n = psi.shape.apparatus_dim();
        Index N = psi.shape.environment_dim();
        if (n != apparatus_dim())
            throw std::invalid_argument("ProjectorFamily: apparatus dim mismatch");
        const Mat& p = projectors[k];
        Vec out = Vec::Zero(psi.amplitudes.size());
        for (Index i = 0; i < n; ++i)
            for (Index j = 0; j < n; ++j)
                if (p(i, j) != Complex(0, 0))
                    out.segment(i * N, N) += p(i, j) * psi.amplitudes.segment(j * N, N);
        return out;
    }

    /// Orthonormal basis (columns) of the range of P_mu on the apparatus factor.
    Mat range_basis(std::size_t k) const {
        Spectral s = eigh(projectors[k]);
        Index r = rank(k);
        return s.eigenvectors.rightCols(r);  // eigenvalues ascending: ones last
    }

    void validate(double tol = 1e-10) const {
        if (projectors.empty()) throw std::invalid_argument("ProjectorFamily: empty");
        if (labels.size() != projectors.size())
            throw std::invalid_argument("ProjectorFamily: labels/projectors size mismatch");
        Index n = projectors.front().rows();
        Mat sum = Mat::Zero(n, n);
        for (std::size_t k = 0; k < projectors.size(); ++k) {
            const Mat& p = projectors[k];
            if (p.rows() != n || p.cols() != n)
                throw std::invalid_argument("ProjectorFamily: inconsistent dims");
            if ((p - p.adjoint()).cwiseAbs().maxCoeff() > tol)
                throw std::invalid_argument("ProjectorFamily: projector not Hermitian");
            if ((p * p - p).cwiseAbs().maxCoeff() > tol)
                throw std::invalid_argument("ProjectorFamily: projector not idempotent");
            if (p.trace().real() < 0.5)
                throw std::invalid_argument("ProjectorFamily: projector rank < 1");
            sum += p;
            for (std::size_t l = 0; l < k; ++l)
                if ((projectors[k] * projectors[l]).cwiseAbs().maxCoeff() > tol)
                    throw std::invalid_argument("ProjectorFamily: projectors not orthogonal");
        }
        if ((sum - Mat::Identity(n, n)).cwiseAbs().maxCoeff() > tol)
            throw std::invalid_argument("ProjectorFamily: completeness violated");
    }

    std::size_t index_of_label(int mu) const {
        for (std::size_t k = 0; k < labels.size(); ++k)
            if (labels[k] == mu) return k;
        throw std::invalid_argument("ProjectorFamily: unknown label " + std::to_string(mu));
    }
};

/// Rank-1 projectors onto the canonical apparatus basis, labels 0..n-1.
inline ProjectorFamily canonical_family(Index n) {
    std::vector<int> labels;
    std::vector<Mat> proj;
    for (Index mu = 0; mu < n; ++mu) {
        Mat p = Mat::Zero(n, n);
        p(mu, mu) = 1.0;
        labels.push_back(static_cast<int>(mu));
        proj.push_back(std::move(p));
    }
    return {std::move(labels), std::move(proj)};
}

/// Family built from groups of columns of an orthonormal basis.
inline ProjectorFamily family_from_basis_groups(const Mat& basis,
                                                const std::vector<std::vector<Index>>& groups) {
    std::vector<int> labels;
    std::vector<Mat> proj;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        Mat p = Mat::Zero(basis.rows(), basis.rows());
        for (Index col : groups[g]) p += basis.col(col) * basis.col(col).adjoint();
        labels.push_back(static_cast<int>(g));
        proj.push_back(std::move(p));
    }
    return {std::move(labels), std::move(proj)};
}

/// H = H_R (x) I + I (x) H_E + H_I with all pieces retained.
class TotalModel {
  public:
    TotalModel() = default;

    /// General constructor from explicit pieces (h_i given on the total space).
    TotalModel(Mat h_r, Mat h_e, Mat h_i) : h_r_(std::move(h_r)), h_e_(std::move(h_e)), h_i_(std::move(h_i)) {
        Index n = h_r_.rows(), N = h_e_.rows();
        shape_ = SpaceShape(n, N);
        if (h_i_.rows() != n * N)
            throw std::invalid_argument("TotalModel: interaction dim != total dim");
        check_hermitian(h_r_, "H_R");
        check_hermitian(h_e_, "H_E");
        check_hermitian(h_i_, "H_I");
        Operator idr = Operator::identity(SpaceShape({n}));
        Operator ide = Operator::identity(SpaceShape({N}));
        h_total_ = tensor(Operator(SpaceShape({n}), h_r_, true), ide).entries +
                   tensor(idr, Operator(SpaceShape({N}), h_e_, true)).entries + h_i_;
    }

    const SpaceShape& shape() const { return shape_; }
    Index apparatus_dim() const { return shape_.apparatus_dim(); }
    Index environment_dim() const { return shape_.environment_dim(); }

    const Mat& h_r() const { return h_r_; }
    const Mat& h_e() const { return h_e_; }
    const Mat& h_i() const { return h_i_; }
    const Mat& h_total() const { return h_total_; }

    Operator total_operator() const { return {shape_, h_total_, true}; }

    double level_energy(Index mu) const { return h_r_(mu, mu).real(); }

    /// <mu| H_I |nu> as an environment-space matrix (canonical apparatus basis).
    Mat interaction_block(Index mu, Index nu) const {
        Index N = environment_dim();
        return h_i_.block(mu * N, nu * N, N, N);
    }

    /// H^E_mu = E_mu + H_E + <mu|H_I|mu> for the canonical basis state |mu>.
    Mat env_block_hamiltonian(Index mu) const {
        Index N = environment_dim();
        return level_energy(mu) * Mat::Identity(N, N) + h_e_ + interaction_block(mu, mu);
    }

    /// True when <mu|H_I|nu> = 0 for all mu != nu (within tol) and H_R is
    /// diagonal, i.e. the canonical family satisfies the non-transition
    /// condition exactly.
    bool is_dephasing_form(double tol = 1e-12) const {
        Index n = apparatus_dim();
        double scale = std::max(1.0, h_i_.cwiseAbs().maxCoeff());
        for (Index mu = 0; mu < n; ++mu)
            for (Index nu = 0; nu < n; ++nu) {
                if (mu == nu) continue;
                if (std::abs(h_r_(mu, nu)) > tol * std::max(1.0, h_r_.cwiseAbs().maxCoeff()))
                    return false;
                if (interaction_block(mu, nu).cwiseAbs().maxCoeff() > tol * scale) return false;
            }
        return true;
    }

    /// Spectral decomposition of H, computed once and shared afterwards.
    std::shared_ptr<const Evolver> evolver() const {
        std::lock_guard<std::mutex> lock(cache_mutex_);
        if (!evolver_cache_) evolver_cache_ = std::make_shared<Evolver>(total_operator());
        return evolver_cache_;
    }

    TotalModel(const TotalModel& o)
        : shape_(o.shape_), h_r_(o.h_r_), h_e_(o.h_e_), h_i_(o.h_i_), h_total_(o.h_total_) {}
    TotalModel& operator=(const TotalModel& o) {
        if (this != &o) {
            shape_ = o.shape_;
            h_r_ = o.h_r_;
            h_e_ = o.h_e_;
            h_i_ = o.h_i_;
            h_total_ = o.h_total_;
            std::lock_guard<std::mutex> lock(cache_mutex_);
            evolver_cache_.reset();
        }
        return *this;
    }

  private:
    static void check_hermitian(const Mat& m, const char* name) {
        double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
        if ((m - m.adjoint()).cwiseAbs().maxCoeff() > kHermitianTol * scale)
            throw std::invalid_argument(std::string("TotalModel: ") + name + " not Hermitian");
    }

    SpaceShape shape_;
    Mat h_r_, h_e_, h_i_, h_total_;
    mutable std::mutex cache_mutex_;
    mutable std::shared_ptr<const Evolver> evolver_cache_;
};

/// Statistics of the perturbation eps*V = H^E_I(nu) - H^E_I(mu) entering the
/// Loschmidt-echo rate formulas. V is normalized to unit entrywise second
/// moment; eps carries the magnitude.
struct PerturbationStats {
    double delta = 0.0;     // mean nearest-neighbor spacing, central half of spectrum
    double sigma_v = 0.0;   // std dev of <n|V|n> in the H^E_mu eigenbasis
    double v_nd_sq = 0.0;   // mean |<n|V|n'>|^2 over n != n'
    double epsilon = 0.0;   // magnitude of the perturbation
};

/// Dephasing-form builder: H_I = strength * sum_mu |mu><mu| (x) B_mu.
inline TotalModel build_nlevel_model(const std::vector<double>& level_energies,
                                     const EnsembleSpec& env_spec,
                                     const std::vector<Mat>& coupling_ops,
                                     double coupling_strength) {
    Index n = static_cast<Index>(level_energies.size());
    if (n < 2) throw std::invalid_argument("build_nlevel_model: need n >= 2 levels");
    Index N = env_spec.dim;
    Mat h_r = Mat::Zero(n, n);
    for (Index mu = 0; mu < n; ++mu) h_r(mu, mu) = level_energies[static_cast<std::size_t>(mu)];
    Mat h_e = env_spec.generate();
    Mat h_i = Mat::Zero(n * N, n * N);
    if (!coupling_ops.empty() && coupling_strength != 0.0) {
        if (static_cast<Index>(coupling_ops.size()) != n)
            throw std::invalid_argument("build_nlevel_model: need one coupling op per level");
        for (Index mu = 0; mu < n; ++mu) {
            const Mat& b = coupling_ops[static_cast<std::size_t>(mu)];
            if (b.rows() != N || b.cols() != N)
                throw std::invalid_argument("build_nlevel_model: coupling op dim != env dim");
            if ((b - b.adjoint()).cwiseAbs().maxCoeff() >
                kHermitianTol * std::max(1.0, b.cwiseAbs().maxCoeff()))
                throw std::invalid_argument("build_nlevel_model: coupling op not Hermitian");
            h_i.block(mu * N, mu * N, N, N) = coupling_strength * b;
        }
    }
    return {std::move(h_r), std::move(h_e), std::move(h_i)};
}

/// Per-level coupling operators with GUE-like statistics (unit entrywise
/// second moment) plus an optional extra diagonal component of weight
/// diag_weight, used to steer sigma_v relative to v_nd_sq.
inline std::vector<Mat> random_coupling_ops(Index n, Index N, std::uint64_t seed,
                                            double diag_weight = 0.0) {
    std::vector<Mat> ops;
    Rng base(seed ^ 0xc0117e5ull);
    for (Index mu = 0; mu < n; ++mu) {
        Rng rng = base.stream(static_cast<std::uint64_t>(mu));
        Mat b(N, N);
        for (Index i = 0; i < N; ++i) {
            b(i, i) = Complex(rng.gaussian() + diag_weight * rng.gaussian(), 0.0);
            for (Index j = i + 1; j < N; ++j) {
                Complex z(rng.gaussian(), rng.gaussian());
                b(i, j) = z / std::sqrt(2.0);
                b(j, i) = std::conj(b(i, j));
            }
        }
        ops.push_back(std::move(b));
    }
    return ops;
}

inline PerturbationStats perturbation_stats(const TotalModel& model, Index mu, Index nu) {
    Index N = model.environment_dim();
    if (N < 8) throw std::invalid_argument("perturbation_stats: environment dim < 8");
    if (mu == nu) throw std::invalid_argument("perturbation_stats: need mu != nu");

    Mat h_mu = model.env_block_hamiltonian(mu);
    Spectral spec = eigh(h_mu);

    // Mean nearest-neighbor spacing over the central 50% of the spectrum.
    Index lo = N / 4, hi = (3 * N) / 4;
    double delta = 0.0;
    Index count = 0;
    for (Index i = lo; i + 1 < hi; ++i) {
        delta += spec.eigenvalues(i + 1) - spec.eigenvalues(i);
        ++count;
    }
    if (count < 1) throw std::invalid_argument("perturbation_stats: spectrum too small");
    delta /= static_cast<double>(count);

    Mat diff = model.interaction_block(nu, nu) - model.interaction_block(mu, mu);
    double eps = diff.norm() / static_cast<double>(N);  // sqrt of entrywise second moment
    PerturbationStats out;
    out.delta = delta;
    out.epsilon = eps;
    if (eps == 0.0) return out;  // constant V: sigma_v = 0, v_nd_sq = 0

    Mat v = (diff / eps).eval();
    Mat v_eig = spec.eigenvectors.adjoint() * v * spec.eigenvectors;
    double mean = 0.0;
    for (Index i = 0; i < N; ++i) mean += v_eig(i, i).real();
    mean /= static_cast<double>(N);
    double variance = 0.0;
    for (Index i = 0; i < N; ++i) {
        double d = v_eig(i, i).real() - mean;
        variance += d * d;
    }
    out.sigma_v = std::sqrt(variance / static_cast<double>(N));
    double frob_sq = v_eig.squaredNorm();
    double diag_sq = 0.0;
    for (Index i = 0; i < N; ++i) diag_sq += std::norm(v_eig(i, i));
    out.v_nd_sq = (frob_sq - diag_sq) / static_cast<double>(N * (N - 1));
    return out;
}

inline StateVector product_state(const StateVector& psi_r, const StateVector& phi_e) {
    if (std::abs(psi_r.norm() - 1.0) > 1e-10 || std::abs(phi_e.norm() - 1.0) > 1e-10)
        throw std::invalid_argument("product_state: factors must be normalized");
    return tensor(psi_r, phi_e);
}

/// Eigenprojector family of a Hermitian apparatus operator; eigenvalues closer
/// than degeneracy_tol * ||h_r|| merge into one higher-rank projector.
inline ProjectorFamily eigenprojector_family(const Mat& h_r, double degeneracy_tol = 1e-8) {
    Spectral spec = eigh(h_r);
    Index n = h_r.rows();
    double scale = std::max(spec.eigenvalues.cwiseAbs().maxCoeff(), 1e-300);
    double gap_tol = degeneracy_tol * scale;
    std::vector<std::vector<Index>> groups;
    for (Index i = 0; i < n; ++i) {
        if (!groups.empty() &&
            spec.eigenvalues(i) - spec.eigenvalues(groups.back().back()) < gap_tol)
            groups.back().push_back(i);
        else
            groups.push_back({i});
    }
    return family_from_basis_groups(spec.eigenvectors, groups);
}

}  // namespace qbranch
