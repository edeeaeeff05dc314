// Dense complex linear-algebra substrate: tensor-product spaces, states,
// operators, Hermitian eigendecomposition and exact unitary propagators.
#pragma once

#include <cmath>
#include <complex>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace qbranch {

using Complex = std::complex<double>;
using Vec = Eigen::VectorXcd;
using Mat = Eigen::MatrixXcd;
using Index = Eigen::Index;

constexpr double kHermitianTol = 1e-12;
constexpr double kSpectralTol = 1e-10;
constexpr double kUnitaryTol = 1e-9;

// Desk-scale guard: O(total_dim^3) dense eigendecompositions stay tractable.
constexpr Index kMaxTotalDim = 4096;

/// Ordered factor dimensions of a tensor-product space.
/// Factor 0 is the apparatus; every factor after it belongs to the environment.
struct SpaceShape {
    std::vector<Index> dims;

    SpaceShape() = default;
    explicit SpaceShape(std::vector<Index> d) : dims(std::move(d)) {
        for (Index n : dims) {
            if (n < 1) throw std::invalid_argument("SpaceShape: every factor dim must be >= 1");
        }
        if (total_dim() > kMaxTotalDim) {
            throw std::invalid_argument("SpaceShape: total dimension exceeds desk-scale cap " +
                                        std::to_string(kMaxTotalDim));
        }
    }
    SpaceShape(Index apparatus, Index environment) : SpaceShape(std::vector<Index>{apparatus, environment}) {}

    Index total_dim() const {
        return std::accumulate(dims.begin(), dims.end(), Index{1}, std::multiplies<>());
    }
    Index apparatus_dim() const {
        if (dims.empty()) throw std::logic_error("SpaceShape: empty shape");
        return dims.front();
    }
    Index environment_dim() const { return total_dim() / apparatus_dim(); }
    std::size_t factors() const { return dims.size(); }

    bool operator==(const SpaceShape& o) const { return dims == o.dims; }
    bool operator!=(const SpaceShape& o) const { return !(*this == o); }
};

/// Vector in a tensor-product space. Components are stored with the apparatus
/// index slowest: amplitude(mu, e) = amplitudes[mu * environment_dim + e].
struct StateVector {
    SpaceShape shape;
    Vec amplitudes;

    StateVector() = default;
    StateVector(SpaceShape s, Vec a) : shape(std::move(s)), amplitudes(std::move(a)) {
        if (amplitudes.size() != shape.total_dim())
            throw std::invalid_argument("StateVector: amplitude length != total dim");
    }

    double norm() const { return amplitudes.norm(); }
    double squared_norm() const { return amplitudes.squaredNorm(); }

    StateVector normalized() const {
        double n = norm();
        if (n == 0.0) throw std::invalid_argument("StateVector: cannot normalize zero vector");
        return {shape, amplitudes / n};
    }
};

/// Dense operator on a tensor-product space.
struct Operator {
    SpaceShape shape;
    Mat entries;
    bool hermitian = false;

    Operator() = default;
    Operator(SpaceShape s, Mat m, bool herm = false)
        : shape(std::move(s)), entries(std::move(m)), hermitian(herm) {
        if (entries.rows() != shape.total_dim() || entries.cols() != shape.total_dim())
            throw std::invalid_argument("Operator: matrix size != total dim");
        if (hermitian) {
            double dev = (entries - entries.adjoint()).cwiseAbs().maxCoeff();
            double scale = std::max(1.0, entries.cwiseAbs().maxCoeff());
            if (dev > kHermitianTol * scale)
                throw std::invalid_argument("Operator: hermitian flag set but max |A - A^dag| = " +
                                            std::to_string(dev));
        }
    }

    static Operator identity(SpaceShape s) {
        Index d = s.total_dim();
        return {std::move(s), Mat::Identity(d, d), true};
    }
    static Operator zero(SpaceShape s) {
        Index d = s.total_dim();
        return {std::move(s), Mat::Zero(d, d), true};
    }
};

/// Eigendecomposition of a Hermitian operator (hbar = 1, energies ascending).
struct Spectral {
    Eigen::VectorXd eigenvalues;
    Mat eigenvectors;  // columns, unitary

    Index dim() const { return eigenvalues.size(); }
};

inline void require_same_shape(const SpaceShape& a, const SpaceShape& b, const char* where) {
    if (a != b) throw std::invalid_argument(std::string(where) + ": shape mismatch");
}

/// Same apparatus/environment division; finer environment factorizations are
/// interchangeable (e.g. a measured system adjoined to the environment).
inline void require_compatible_shape(const SpaceShape& a, const SpaceShape& b, const char* where) {
    if (a.total_dim() != b.total_dim() || a.apparatus_dim() != b.apparatus_dim())
        throw std::invalid_argument(std::string(where) + ": incompatible shapes");
}

/// Kronecker product of two operators; factor dims concatenate, apparatus-side
/// factor leftmost (slow index).
inline Operator tensor(const Operator& a, const Operator& b) {
    std::vector<Index> dims = a.shape.dims;
    dims.insert(dims.end(), b.shape.dims.begin(), b.shape.dims.end());
    Index ra = a.entries.rows(), rb = b.entries.rows();
    Mat out(ra * rb, ra * rb);
    for (Index i = 0; i < ra; ++i)
        for (Index j = 0; j < ra; ++j) out.block(i * rb, j * rb, rb, rb) = a.entries(i, j) * b.entries;
    return {SpaceShape(std::move(dims)), std::move(out), a.hermitian && b.hermitian};
}

/// Kronecker product of state vectors (apparatus-side vector first).
inline StateVector tensor(const StateVector& a, const StateVector& b) {
    std::vector<Index> dims = a.shape.dims;
    dims.insert(dims.end(), b.shape.dims.begin(), b.shape.dims.end());
    Index na = a.amplitudes.size(), nb = b.amplitudes.size();
    Vec out(na * nb);
    for (Index i = 0; i < na; ++i) out.segment(i * nb, nb) = a.amplitudes(i) * b.amplitudes;
    return {SpaceShape(std::move(dims)), std::move(out)};
}

/// Reduced density matrix of the apparatus factor:
/// rho_R(m, n) = sum_e rho(m*N + e, n*N + e).
inline Operator partial_trace_env(const Operator& rho) {
    Index n = rho.shape.apparatus_dim();
    Index N = rho.shape.environment_dim();
    Mat out = Mat::Zero(n, n);
    for (Index m = 0; m < n; ++m)
        for (Index mp = 0; mp < n; ++mp)
            out(m, mp) = rho.entries.block(m * N, mp * N, N, N).trace();
    return {SpaceShape({n}), std::move(out), rho.hermitian};
}

/// Reduced density matrix of the apparatus factor of a (possibly unnormalized)
/// pure state, without forming the total-space projector.
inline Mat reduced_apparatus_matrix(const StateVector& psi) {
    Index n = psi.shape.apparatus_dim();
    Index N = psi.shape.environment_dim();
    Eigen::Map<const Mat> block(psi.amplitudes.data(), N, n);  // column mu = env amplitudes
    return block.transpose() * block.conjugate();              // (m, n) = sum_e psi(m,e) conj(psi(n,e))
}

inline Spectral eigh(const Operator& a) {
    if (!a.hermitian) throw std::invalid_argument("eigh: operator not flagged Hermitian");
    Eigen::SelfAdjointEigenSolver<Mat> solver(a.entries);
    if (solver.info() != Eigen::Success) throw std::runtime_error("eigh: eigensolver failed");
    return {solver.eigenvalues(), solver.eigenvectors()};
}

inline Spectral eigh(const Mat& hermitian_matrix) {
    Eigen::SelfAdjointEigenSolver<Mat> solver(hermitian_matrix);
    if (solver.info() != Eigen::Success) throw std::runtime_error("eigh: eigensolver failed");
    return {solver.eigenvalues(), solver.eigenvectors()};
}

/// U(dt) = V exp(-i lambda dt) V^dag from a cached decomposition.
inline Mat propagator_matrix(const Spectral& spec, double dt) {
    Vec phases = (Complex(0, -dt) * spec.eigenvalues.cast<Complex>()).array().exp();
    return spec.eigenvectors * phases.asDiagonal() * spec.eigenvectors.adjoint();
}

/// Exact propagator U = exp(-i H dt) of a time-independent Hermitian H.
inline Operator propagator(const Operator& h, double dt) {
    return {h.shape, propagator_matrix(eigh(h), dt), false};
}

/// Exact evolution backend for one time-independent Hamiltonian.
/// The eigendecomposition is computed once at construction; all queries are
/// const and safe to issue concurrently.
class Evolver {
  public:
    explicit Evolver(const Operator& h) : shape_(h.shape), spec_(eigh(h)) {}
    Evolver(SpaceShape shape, Spectral spec) : shape_(std::move(shape)), spec_(std::move(spec)) {}

    const SpaceShape& shape() const { return shape_; }
    const Spectral& spectral() const { return spec_; }

    Mat unitary(double dt) const { return propagator_matrix(spec_, dt); }

    Vec evolve(const Vec& v, double dt) const {
        Vec coeffs = spec_.eigenvectors.adjoint() * v;
        coeffs.array() *= (Complex(0, -dt) * spec_.eigenvalues.cast<Complex>()).array().exp();
        return spec_.eigenvectors * coeffs;
    }

    StateVector evolve(const StateVector& psi, double dt) const {
        require_compatible_shape(psi.shape, shape_, "Evolver::evolve");
        return {psi.shape, evolve(psi.amplitudes, dt)};
    }

  private:
    SpaceShape shape_;
    Spectral spec_;
};

namespace detail {
inline int& worker_count_ref() {
    static int count = 1;
    return count;
}
}  // namespace detail

/// Bound the number of worker threads used by embarrassingly parallel loops.
inline void set_worker_count(int n) { detail::worker_count_ref() = n < 1 ? 1 : n; }
inline int worker_count() { return detail::worker_count_ref(); }

/// Central numeric thresholds. eps_x is the experimental-indistinguishability
/// scale; k_accuracy maps it to predicted decoherence times (default takes the
/// echo M(t) down to eps_x); degeneracy_tol merges numerically tied eigenvalues.
struct Tolerance {
    double eps_x = 1e-6;
    double k_accuracy = 0.5 * std::log(1e6);  // = -ln(eps_x)/2
    double degeneracy_tol = 1e-8;

    Tolerance() = default;
    static Tolerance with_eps(double eps) {
        if (eps <= 0.0) throw std::invalid_argument("Tolerance: eps_x must be > 0");
        Tolerance t;
        t.eps_x = eps;
        t.k_accuracy = -0.5 * std::log(eps);
        return t;
    }
};

/// Uniform time grid: times t0 + k*dt for k = 0..steps.
struct TimeGrid {
    double t0 = 0.0;
    double dt = 0.0;
    Index steps = 0;

    TimeGrid() = default;
    TimeGrid(double start, double step, Index n) : t0(start), dt(step), steps(n) {
        if (dt <= 0.0) throw std::invalid_argument("TimeGrid: dt must be > 0");
        if (steps < 1) throw std::invalid_argument("TimeGrid: steps must be >= 1");
    }

    Index size() const { return steps + 1; }
    double time(Index k) const { return t0 + static_cast<double>(k) * dt; }
    double t_end() const { return time(steps); }

    std::vector<double> times() const {
        std::vector<double> out(static_cast<std::size_t>(size()));
        for (Index k = 0; k < size(); ++k) out[static_cast<std::size_t>(k)] = time(k);
        return out;
    }
};

}  // namespace qbranch
