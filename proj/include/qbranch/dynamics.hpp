// Schroedinger propagation, non-transition condition scans, block
// Hamiltonians and the isolatable-system check.
#pragma once

#include <map>
#include <memory>
#include <optional>
#include <utility>

#include "core.hpp"
#include "model.hpp"

namespace qbranch {

struct Window {
    double begin = 0.0;
    double end = 0.0;

    double length() const { return end - begin; }
    bool contains(double t) const { return t >= begin - 1e-12 && t <= end + 1e-12; }
};

/// Propagation backend for tree growth and measurement runs. Implementations
/// are immutable after construction and safe to share across threads.
class PropagationContext {
  public:
    virtual ~PropagationContext() = default;

    virtual const SpaceShape& shape() const = 0;
    virtual Vec evolve(const Vec& v, double t_from, double t_to) const = 0;

    /// The model generating the evolution over [a, b]. Throws if the span
    /// crosses a segment boundary (piecewise-constant schedules).
    virtual const TotalModel& model_over(double a, double b) const = 0;

    /// Largest |eigenvalue| of the generator active over [a, b]; used for the
    /// sampling-density recommendation dt <= 0.1 / ||H||.
    virtual double hamiltonian_norm(double a, double b) const = 0;

    StateVector evolve(const StateVector& psi, double t_from, double t_to) const {
        require_compatible_shape(psi.shape, shape(), "PropagationContext::evolve");
        return {psi.shape, evolve(psi.amplitudes, t_from, t_to)};
    }
};

/// One time-independent model for all times.
class ModelContext final : public PropagationContext {
  public:
    explicit ModelContext(TotalModel model) : model_(std::move(model)), evolver_(model_.evolver()) {}

    using PropagationContext::evolve;

    const SpaceShape& shape() const override { return model_.shape(); }

    Vec evolve(const Vec& v, double t_from, double t_to) const override {
        return evolver_->evolve(v, t_to - t_from);
    }

    const TotalModel& model_over(double, double) const override { return model_; }

    double hamiltonian_norm(double, double) const override {
        return evolver_->spectral().eigenvalues.cwiseAbs().maxCoeff();
    }

    const TotalModel& model() const { return model_; }
    const Evolver& evolver() const { return *evolver_; }

  private:
    TotalModel model_;
    std::shared_ptr<const Evolver> evolver_;
};

/// Piecewise-constant schedule: a sequence of models, each active from its
/// start time until the next segment begins (the last one indefinitely).
class PiecewiseContext final : public PropagationContext {
  public:
    struct Segment {
        double start;
        std::shared_ptr<const TotalModel> model;
        std::shared_ptr<const Evolver> evolver;
    };

    PiecewiseContext(SpaceShape shape, std::vector<std::pair<double, TotalModel>> segments)
        : shape_(std::move(shape)) {
        if (segments.empty()) throw std::invalid_argument("PiecewiseContext: no segments");
        for (auto& [start, model] : segments) {
            if (!segments_.empty() && start <= segments_.back().start)
                throw std::invalid_argument("PiecewiseContext: segment starts must increase");
            require_compatible_shape(model.shape(), shape_, "PiecewiseContext");
            auto m = std::make_shared<TotalModel>(std::move(model));
            segments_.push_back({start, m, m->evolver()});
        }
    }

    using PropagationContext::evolve;

    const SpaceShape& shape() const override { return shape_; }

    Vec evolve(const Vec& v, double t_from, double t_to) const override {
        if (t_to == t_from) return v;
        if (t_to < t_from) {
            // Backward evolution: at a boundary, step into the earlier segment.
            Vec w = v;
            double t = t_from;
            while (t > t_to + 1e-12) {
                std::size_t k = segments_.size() - 1;
                while (k > 0 && segments_[k].start >= t - 1e-12) --k;
                double lower = std::max(t_to, segments_[k].start);
                w = segments_[k].evolver->evolve(w, lower - t);
                t = lower;
            }
            return w;
        }
        Vec w = v;
        double t = t_from;
        while (t < t_to - 1e-12) {
            std::size_t k = segment_index(t);
            double upper = (k + 1 < segments_.size() && segments_[k + 1].start < t_to)
                               ? segments_[k + 1].start
                               : t_to;
            if (upper <= t) upper = t_to;
            w = segments_[k].evolver->evolve(w, upper - t);
            t = upper;
        }
        return w;
    }

    const TotalModel& model_over(double a, double b) const override {
        std::size_t k = segment_index(a);
        double seg_end = (k + 1 < segments_.size()) ? segments_[k + 1].start : std::numeric_limits<double>::infinity();
        if (b > seg_end + 1e-12)
            throw std::invalid_argument("PiecewiseContext: span crosses a segment boundary");
        return *segments_[k].model;
    }

    double hamiltonian_norm(double a, double b) const override {
        double norm = 0.0;
        for (std::size_t k = 0; k < segments_.size(); ++k) {
            double s = segments_[k].start;
            double e = (k + 1 < segments_.size()) ? segments_[k + 1].start : std::numeric_limits<double>::infinity();
            if (e < a || s > b) continue;
            norm = std::max(norm, segments_[k].evolver->spectral().eigenvalues.cwiseAbs().maxCoeff());
        }
        return norm;
    }

  private:
    std::size_t segment_index(double t) const {
        if (t < segments_.front().start - 1e-9)
            throw std::invalid_argument("PiecewiseContext: time before first segment");
        std::size_t k = segments_.size() - 1;
        while (k > 0 && segments_[k].start > t + 1e-15) --k;
        return k;
    }

    SpaceShape shape_;
    std::vector<Segment> segments_;
};

/// trajectory[k] = U(t_k, t0) psi0, each step computed from the cached
/// eigendecomposition (no step-to-step error accumulation).
inline std::vector<StateVector> evolve(const TotalModel& model, const StateVector& psi0,
                                       const TimeGrid& grid) {
    auto ev = model.evolver();
    std::vector<StateVector> out;
    out.reserve(static_cast<std::size_t>(grid.size()));
    for (Index k = 0; k < grid.size(); ++k) out.push_back(ev->evolve(psi0, grid.time(k) - grid.t0));
    return out;
}

/// Per-time subspace leakage of the non-transition condition.
struct NtcReport {
    ProjectorFamily family;
    Window window;
    std::vector<double> times;
    std::vector<std::vector<double>> leakage;  // [subspace][time]
    double max_leakage = 0.0;
    double eps_x = 0.0;
    bool verdict = false;
    bool grid_resolves_hamiltonian = true;  // sample spacing <= 0.1 / ||H||
};

/// Scan l_mu(t) = ||P_mubar U(t, w.begin) P_mu psi|| / ||psi|| over the window,
/// where psi is the (possibly unnormalized) component at the window start.
inline NtcReport ntc_scan(const PropagationContext& ctx, const StateVector& psi_at_window_start,
                          const ProjectorFamily& family, const Window& window, double eps_x,
                          Index samples = 32) {
    if (window.length() <= 0.0) throw std::invalid_argument("ntc_scan: empty window");
    if (samples < 1) throw std::invalid_argument("ntc_scan: need >= 1 samples");
    double norm = psi_at_window_start.norm();
    if (norm == 0.0) throw std::invalid_argument("ntc_scan: zero component");

    NtcReport report;
    report.family = family;
    report.window = window;
    report.eps_x = eps_x;
    double dt = window.length() / static_cast<double>(samples);
    report.grid_resolves_hamiltonian = dt <= 0.1 / std::max(ctx.hamiltonian_norm(window.begin, window.end), 1e-300);
    report.leakage.assign(family.size(), {});
    for (Index k = 0; k <= samples; ++k) report.times.push_back(window.begin + dt * static_cast<double>(k));

    for (std::size_t f = 0; f < family.size(); ++f) {
        StateVector part{psi_at_window_start.shape, family.apply_embedded(f, psi_at_window_start)};
        double part_norm = part.norm();
        for (double t : report.times) {
            double leak = 0.0;
            if (part_norm > 0.0) {
                Vec evolved = ctx.evolve(part.amplitudes, window.begin, t);
                Vec inside = family.apply_embedded(f, {part.shape, evolved});
                double outside_sq = std::max(0.0, evolved.squaredNorm() - inside.squaredNorm());
                leak = std::sqrt(outside_sq) / norm;
            }
            report.leakage[f].push_back(leak);
            report.max_leakage = std::max(report.max_leakage, leak);
        }
    }
    report.verdict = report.max_leakage <= eps_x;
    return report;
}

/// Non-transition condition for an initial state given at t = grid origin 0.
inline NtcReport ntc_evaluate(const TotalModel& model, const StateVector& psi0,
                              const ProjectorFamily& family, const Window& window, double eps_x,
                              Index samples = 32) {
    ModelContext ctx(model);
    StateVector at_start = ctx.evolve(psi0, 0.0, window.begin);
    return ntc_scan(ctx, at_start, family, window, eps_x, samples);
}

struct NtcDecomposition {
    int label;
    double system_leakage;       // ||P_mubar (H_R (x) I) P_mu psi||
    double interaction_leakage;  // ||P_mubar H_I P_mu psi||
};

/// Apply an apparatus-factor operator a (n x n) to a total-space vector.
inline Vec apply_apparatus_operator(const Mat& a, const StateVector& psi) {
    Index n = psi.shape.apparatus_dim();
    Index N = psi.shape.environment_dim();
    Eigen::Map<const Mat> x(psi.amplitudes.data(), N, n);
    Mat y = x * a.transpose();  // y(e, i) = sum_j a(i, j) x(e, j)
    return Eigen::Map<const Vec>(y.data(), n * N);
}

/// Split the instantaneous NTC requirement into its H_R and H_I parts.
inline std::vector<NtcDecomposition> ntc_decompose(const TotalModel& model, const StateVector& psi_t,
                                                   const ProjectorFamily& family) {
    std::vector<NtcDecomposition> out;
    for (std::size_t f = 0; f < family.size(); ++f) {
        StateVector proj{psi_t.shape, family.apply_embedded(f, psi_t)};
        Vec hr_part = apply_apparatus_operator(model.h_r(), proj);
        Vec hi_part = model.h_i() * proj.amplitudes;
        auto outside_norm = [&](const Vec& v) {
            Vec inside = family.apply_embedded(f, {psi_t.shape, v});
            return std::sqrt(std::max(0.0, v.squaredNorm() - inside.squaredNorm()));
        };
        out.push_back({family.labels[f], outside_norm(hr_part), outside_norm(hi_part)});
    }
    return out;
}

/// H_mu = P_mu H P_mu restricted to range(P_mu) (x) H_E.
class BlockHamiltonian {
  public:
    BlockHamiltonian() = default;
    BlockHamiltonian(int label, Mat apparatus_basis, Mat h_sub, Index env_dim)
        : label_(label), apparatus_basis_(std::move(apparatus_basis)), h_sub_(std::move(h_sub)), env_dim_(env_dim) {}

    int label() const { return label_; }
    Index rank() const { return apparatus_basis_.cols(); }
    Index env_dim() const { return env_dim_; }
    Index sub_dim() const { return rank() * env_dim_; }
    const Mat& apparatus_basis() const { return apparatus_basis_; }
    const Mat& matrix() const { return h_sub_; }

    /// Subspace coordinates -> total-space vector (exactly inside the block).
    Vec embed(const Vec& sub) const {
        Index n = apparatus_basis_.rows(), r = rank(), N = env_dim_;
        Eigen::Map<const Mat> s(sub.data(), N, r);
        Mat full = s * apparatus_basis_.transpose();  // (e, i)
        return Eigen::Map<const Vec>(full.data(), n * N);
    }

    /// Total-space vector -> subspace coordinates.
    Vec restrict_to_subspace(const Vec& full) const {
        Index n = apparatus_basis_.rows(), r = rank(), N = env_dim_;
        Eigen::Map<const Mat> x(full.data(), N, n);
        Mat s = x * apparatus_basis_.conjugate();  // (e, a)
        (void)n;
        (void)r;
        return Eigen::Map<const Vec>(s.data(), s.size());
    }

    /// Cached spectral decomposition of the restricted Hamiltonian.
    std::shared_ptr<const Evolver> evolver() const {
        std::lock_guard<std::mutex> lock(mutex_);
        if (!evolver_) {
            SpaceShape sub_shape(rank(), env_dim_);
            evolver_ = std::make_shared<Evolver>(Operator(sub_shape, h_sub_, true));
        }
        return evolver_;
    }

    BlockHamiltonian(const BlockHamiltonian& o)
        : label_(o.label_), apparatus_basis_(o.apparatus_basis_), h_sub_(o.h_sub_), env_dim_(o.env_dim_) {}
    BlockHamiltonian& operator=(const BlockHamiltonian& o) {
        if (this != &o) {
            label_ = o.label_;
            apparatus_basis_ = o.apparatus_basis_;
            h_sub_ = o.h_sub_;
            env_dim_ = o.env_dim_;
            std::lock_guard<std::mutex> lock(mutex_);
            evolver_.reset();
        }
        return *this;
    }

  private:
    int label_ = 0;
    Mat apparatus_basis_;  // n x r isometry Q
    Mat h_sub_;            // (rN) x (rN) = (Q (x) I)^dag H (Q (x) I)
    Index env_dim_ = 0;
    mutable std::mutex mutex_;
    mutable std::shared_ptr<const Evolver> evolver_;
};

inline std::vector<BlockHamiltonian> block_hamiltonians(const TotalModel& model,
                                                        const ProjectorFamily& family) {
    Index N = model.environment_dim();
    std::vector<BlockHamiltonian> out;
    for (std::size_t f = 0; f < family.size(); ++f) {
        Mat q = family.range_basis(f);
        Index r = q.cols();
        Mat h_sub = Mat::Zero(r * N, r * N);
        for (Index a = 0; a < r; ++a)
            for (Index b = 0; b < r; ++b) {
                Mat block = Mat::Zero(N, N);
                for (Index i = 0; i < model.apparatus_dim(); ++i)
                    for (Index j = 0; j < model.apparatus_dim(); ++j) {
                        Complex w = std::conj(q(i, a)) * q(j, b);
                        if (w == Complex(0, 0)) continue;
                        Complex hr = model.h_r()(i, j);
                        if (i == j)
                            block += w * (hr * Mat::Identity(N, N) + model.h_e() + model.interaction_block(i, j));
                        else
                            block += w * (hr * Mat::Identity(N, N) + model.interaction_block(i, j));
                    }
                h_sub.block(a * N, b * N, N, N) = block;
            }
        h_sub = ((h_sub + h_sub.adjoint()) / 2.0).eval();  // clean roundoff
        out.emplace_back(family.labels[f], std::move(q), std::move(h_sub), N);
    }
    return out;
}

/// exp(-i H_mu (t - w.begin)) applied to a component supported on the block;
/// the result stays in the subspace exactly.
inline std::vector<StateVector> block_evolve(const BlockHamiltonian& block, const StateVector& psi_mu,
                                             const Window& window, Index samples = 32) {
    Vec sub = block.restrict_to_subspace(psi_mu.amplitudes);
    double outside = std::sqrt(std::max(0.0, psi_mu.squared_norm() - sub.squaredNorm()));
    if (outside > 1e-10 * std::max(1.0, psi_mu.norm()))
        throw std::invalid_argument("block_evolve: component has weight outside the subspace");
    auto ev = block.evolver();
    std::vector<StateVector> out;
    double dt = window.length() / static_cast<double>(samples);
    for (Index k = 0; k <= samples; ++k) {
        Vec evolved = ev->evolve(sub, dt * static_cast<double>(k));
        out.push_back({psi_mu.shape, block.embed(evolved)});
    }
    return out;
}

struct IsolatableReport {
    bool isolated = false;
    double eps_x = 0.0;
    double max_residual = 0.0;          // max_t ||H_I psi(t)|| / ||H_I||_F
    double max_prediction_error = 0.0;  // vs closed-form reduced matrix
    std::vector<double> times;
    std::vector<double> residual;
    std::vector<double> max_offdiagonal;  // of rho_re(t), for coherence tracking
};

/// Check H_I |psi(t)> ~= 0 over the window and compare the reduced matrix with
/// the uncoupled closed form rho(t) = |psi_R(t)><psi_R(t)|.
inline IsolatableReport isolatable_check(const TotalModel& model, const StateVector& psi0_in,
                                         const Window& window, double eps_x, Index samples = 64) {
    StateVector psi0 = psi0_in.normalized();
    Mat rho0 = reduced_apparatus_matrix(psi0);
    double purity = (rho0 * rho0).trace().real() / std::pow(rho0.trace().real(), 2);
    if (std::abs(purity - 1.0) > 1e-8)
        throw std::invalid_argument("isolatable_check: psi0 is not a product state");
    Spectral rspec = eigh(rho0);
    Vec psi_r = rspec.eigenvectors.col(rho0.rows() - 1);  // apparatus factor
    Spectral hr_spec = eigh(Mat(model.h_r()));

    auto ev = model.evolver();
    double hi_scale = model.h_i().norm();
    IsolatableReport report;
    report.eps_x = eps_x;
    double dt = window.length() / static_cast<double>(samples);
    for (Index k = 0; k <= samples; ++k) {
        double t = window.begin + dt * static_cast<double>(k);
        StateVector psi = ev->evolve(psi0, t);
        double res = hi_scale > 0.0 ? (model.h_i() * psi.amplitudes).norm() / (hi_scale * psi.norm()) : 0.0;
        Mat rho = reduced_apparatus_matrix(psi);
        Vec coeffs = hr_spec.eigenvectors.adjoint() * psi_r;
        coeffs.array() *= (Complex(0, -t) * hr_spec.eigenvalues.cast<Complex>()).array().exp();
        Vec psi_r_t = hr_spec.eigenvectors * coeffs;
        Mat rho_pred = psi_r_t * psi_r_t.adjoint();
        double offdiag = 0.0;
        for (Index i = 0; i < rho.rows(); ++i)
            for (Index j = 0; j < rho.cols(); ++j)
                if (i != j) offdiag = std::max(offdiag, std::abs(rho(i, j)));
        report.times.push_back(t);
        report.residual.push_back(res);
        report.max_offdiagonal.push_back(offdiag);
        report.max_residual = std::max(report.max_residual, res);
        report.max_prediction_error =
            std::max(report.max_prediction_error, (rho - rho_pred).cwiseAbs().maxCoeff());
    }
    report.isolated = report.max_residual <= eps_x;
    return report;
}

}  // namespace qbranch
