// Loschmidt-echo computations and rate theory: echo amplitudes m(t),
// dephasing factors f_numu(t), generalized echoes L_G(t), the perturbative
// border and Gaussian/FGR regime fits.
#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "core.hpp"
#include "dynamics.hpp"
#include "model.hpp"

namespace qbranch {

/// Complex echo amplitude series; M(t) = |m(t)|^2.
struct EchoSeries {
    std::vector<double> times;
    std::vector<Complex> amplitude;

    double magnitude(std::size_t k) const { return std::abs(amplitude[k]); }
    double echo(std::size_t k) const { return std::norm(amplitude[k]); }
    std::size_t size() const { return times.size(); }
    double t_end() const { return times.empty() ? 0.0 : times.back(); }

    void check_invariants() const {
        if (times.empty()) throw std::invalid_argument("EchoSeries: empty");
        if (std::abs(echo(0) - 1.0) > 1e-12)
            throw std::invalid_argument("EchoSeries: M(0) != 1");
        for (std::size_t k = 0; k < size(); ++k)
            if (echo(k) > 1.0 + 1e-10) throw std::invalid_argument("EchoSeries: M(t) > 1");
    }
};

/// m(t) = <psi0| e^{i h1 t} e^{-i h0 t} |psi0>. The grid must start at 0.
inline EchoSeries loschmidt_echo(const Mat& h0, const Mat& h1, const Vec& psi0, const TimeGrid& grid) {
    if (h0.rows() != h1.rows() || h0.rows() != psi0.size())
        throw std::invalid_argument("loschmidt_echo: dimension mismatch");
    if (grid.t0 != 0.0) throw std::invalid_argument("loschmidt_echo: grid must start at t = 0");
    if (std::abs(psi0.norm() - 1.0) > 1e-10)
        throw std::invalid_argument("loschmidt_echo: psi0 must be normalized");
    Spectral s0 = eigh(h0);
    Spectral s1 = eigh(h1);
    Vec a = s0.eigenvectors.adjoint() * psi0;
    Vec b = s1.eigenvectors.adjoint() * psi0;
    EchoSeries out;
    for (Index k = 0; k < grid.size(); ++k) {
        double t = grid.time(k);
        Vec fwd0 = a.array() * (Complex(0, -t) * s0.eigenvalues.cast<Complex>()).array().exp();
        Vec fwd1 = b.array() * (Complex(0, -t) * s1.eigenvalues.cast<Complex>()).array().exp();
        Vec v0 = s0.eigenvectors * fwd0;
        Vec v1 = s1.eigenvectors * fwd1;
        out.times.push_back(t);
        out.amplitude.push_back(v1.dot(v0));  // Eigen dot conjugates the left argument
    }
    out.check_invariants();
    return out;
}

inline EchoSeries loschmidt_echo(const Operator& h0, const Operator& h1, const StateVector& psi0,
                                 const TimeGrid& grid) {
    if (!h0.hermitian || !h1.hermitian)
        throw std::invalid_argument("loschmidt_echo: Hamiltonians must be Hermitian");
    return loschmidt_echo(h0.entries, h1.entries, psi0.amplitudes, grid);
}

/// f_numu(t) = <phi0| e^{i H^E_nu t} e^{-i H^E_mu t} |phi0> for a rank-1
/// n-level model (canonical apparatus basis). Requires exact dephasing form
/// unless the caller has verified the non-transition condition.
inline EchoSeries dephasing_factor(const TotalModel& model, Index mu, Index nu, const Vec& phi0,
                                   const TimeGrid& grid, bool ntc_verified = false) {
    if (!ntc_verified && !model.is_dephasing_form())
        throw std::invalid_argument("dephasing_factor: model is not of dephasing form and the "
                                    "non-transition condition was not verified");
    if (mu == nu) {
        EchoSeries out;
        for (Index k = 0; k < grid.size(); ++k) {
            out.times.push_back(grid.time(k));
            out.amplitude.push_back(Complex(1.0, 0.0));
        }
        return out;
    }
    return loschmidt_echo(model.env_block_hamiltonian(mu), model.env_block_hamiltonian(nu), phi0, grid);
}

/// L_G(t) = <phi0| V^dag_{n nu, n'_nu}(t) V_{m_mu, m'_mu}(t) |phi0> with
/// V_{m m'}(t) = <m_mu| e^{-i H_mu t} |m'_mu>, an environment-space operator.
inline EchoSeries generalized_echo(const TotalModel& model, const BlockHamiltonian& block_mu,
                                   const BlockHamiltonian& block_nu, const Vec& m_mu, const Vec& m_mu_p,
                                   const Vec& n_nu, const Vec& n_nu_p, const Vec& phi0,
                                   const TimeGrid& grid) {
    if (block_mu.label() == block_nu.label())
        throw std::invalid_argument("generalized_echo: need mu != nu");
    Index n = model.apparatus_dim();
    Index N = model.environment_dim();
    if (m_mu.size() != n || n_nu.size() != n || phi0.size() != N)
        throw std::invalid_argument("generalized_echo: dimension mismatch");

    auto check_in_subspace = [&](const Vec& v, const BlockHamiltonian& b) {
        Vec proj = b.apparatus_basis() * (b.apparatus_basis().adjoint() * v);
        if ((v - proj).norm() > 1e-10 * std::max(1.0, v.norm()))
            throw std::invalid_argument("generalized_echo: basis vector outside its subspace");
    };
    check_in_subspace(m_mu, block_mu);
    check_in_subspace(m_mu_p, block_mu);
    check_in_subspace(n_nu, block_nu);
    check_in_subspace(n_nu_p, block_nu);

    // V_{m m'}(t) |phi0> evolves |m'> (x) |phi0> inside the block and reads out
    // the <m| apparatus slice.
    auto propagate_slice = [&](const BlockHamiltonian& b, const Vec& bra, const Vec& ket,
                               double t) -> Vec {
        StateVector start{SpaceShape(n, N), Vec::Zero(n * N)};
        for (Index i = 0; i < n; ++i) start.amplitudes.segment(i * N, N) = ket(i) * phi0;
        Vec sub = b.restrict_to_subspace(start.amplitudes);
        Vec evolved_sub = b.evolver()->evolve(sub, t);
        Vec full = b.embed(evolved_sub);
        Vec out = Vec::Zero(N);
        for (Index i = 0; i < n; ++i) out += std::conj(bra(i)) * full.segment(i * N, N);
        return out;
    };

    EchoSeries out;
    for (Index k = 0; k < grid.size(); ++k) {
        double t = grid.time(k);
        Vec u = propagate_slice(block_mu, m_mu, m_mu_p, t);
        Vec w = propagate_slice(block_nu, n_nu, n_nu_p, t);
        out.times.push_back(t);
        out.amplitude.push_back(w.dot(u));
    }
    return out;
}

enum class DecayRegime { Gaussian, FGR, Indeterminate };

inline std::string to_string(DecayRegime r) {
    switch (r) {
        case DecayRegime::Gaussian: return "Gaussian";
        case DecayRegime::FGR: return "FGR";
        case DecayRegime::Indeterminate: return "indeterminate";
    }
    return "?";
}

/// Perturbative border eps_p solving 2 pi eps_p v_nd_sq = sigma_v delta.
inline double perturbative_border(const PerturbationStats& stats) {
    if (stats.v_nd_sq <= 0.0)
        return stats.sigma_v > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
    return stats.sigma_v * stats.delta / (2.0 * M_PI * stats.v_nd_sq);
}

struct EchoReport {
    EchoSeries series;
    PerturbationStats stats;
    double eps_p = 0.0;
    DecayRegime regime = DecayRegime::Indeterminate;
    double fitted_rate = 0.0;     // Gaussian: g in |f| = exp(-g t^2 / 2); FGR: Gamma in |f| = exp(-Gamma t / 2)
    double predicted_rate = 0.0;  // eps^2 sigma_v^2  or  2 pi eps^2 v_nd_sq / delta
    double predicted_tau_d = 0.0;
    double saturation_level = 0.0;  // mean of |f|^2 over the final quarter
    double fit_t_begin = 0.0;
    double fit_t_end = 0.0;
    std::size_t fit_points = 0;
    bool fit_ok = false;
    std::string note;
};

/// Identify the decay regime, fit the decay law on the window between the
/// early shoulder and the saturation tail, and attach the rate predictions.
inline EchoReport rate_analysis(const PerturbationStats& stats, const EchoSeries& series,
                                const Tolerance& tol) {
    if (series.size() < 8) throw std::invalid_argument("rate_analysis: series too short");
    EchoReport report;
    report.series = series;
    report.stats = stats;
    report.eps_p = perturbative_border(stats);

    double eps = stats.epsilon;
    if (report.eps_p > 0.0 && std::isfinite(report.eps_p) &&
        std::abs(eps - report.eps_p) <= 0.1 * report.eps_p) {
        report.regime = DecayRegime::Indeterminate;
        report.note = "eps within 10% of the perturbative border";
    } else if (eps < report.eps_p) {
        report.regime = DecayRegime::Gaussian;
        report.predicted_rate = eps * eps * stats.sigma_v * stats.sigma_v;
    } else {
        report.regime = DecayRegime::FGR;
        report.predicted_rate = stats.delta > 0.0
                                    ? 2.0 * M_PI * eps * eps * stats.v_nd_sq / stats.delta
                                    : 0.0;
    }
    if (stats.v_nd_sq > 0.0 && eps > 0.0)
        report.predicted_tau_d = tol.k_accuracy * stats.delta / (M_PI * eps * eps * stats.v_nd_sq);
    else
        report.predicted_tau_d = std::numeric_limits<double>::infinity();

    // Saturation from the final quarter of the series (echo scale M = |f|^2).
    std::size_t q = series.size() - series.size() / 4;
    double sat = 0.0;
    for (std::size_t k = q; k < series.size(); ++k) sat += series.echo(k);
    sat /= static_cast<double>(series.size() - q);
    report.saturation_level = sat;

    // Coverage precondition: three predicted decay times or visible saturation.
    double decay_time = 0.0;
    if (report.regime == DecayRegime::FGR && report.predicted_rate > 0.0)
        decay_time = 2.0 / report.predicted_rate;
    else if (report.regime == DecayRegime::Gaussian && report.predicted_rate > 0.0)
        decay_time = std::sqrt(2.0 / report.predicted_rate);
    bool saturated = sat < 0.25 && series.magnitude(series.size() - 1) <= 2.5 * std::sqrt(std::max(sat, 0.0));
    if (decay_time > 0.0 && series.t_end() < 3.0 * decay_time && !saturated)
        throw std::invalid_argument("rate_analysis: series covers neither 3 predicted decay times "
                                    "nor saturation");

    // Fit window on the amplitude scale: below the 0.9 shoulder, above three
    // times the amplitude-scale saturation, past the early Zeno-like shoulder.
    double f_floor = 3.0 * std::sqrt(std::max(sat, 0.0));
    double t_min = stats.delta > 0.0 ? 0.01 / stats.delta : 0.0;
    std::vector<double> xs, ys;
    double t_begin = 0.0, t_end = 0.0;
    bool entered = false;
    for (std::size_t k = 0; k < series.size(); ++k) {
        double f = series.magnitude(k);
        double t = series.times[k];
        if (t < t_min) continue;
        if (!entered) {
            if (f <= 0.9) {
                entered = true;
                t_begin = t;
            } else {
                continue;
            }
        }
        if (f <= f_floor || f <= 0.0) break;  // stop at the first floor crossing
        double x = report.regime == DecayRegime::Gaussian ? t * t : t;
        xs.push_back(x);
        ys.push_back(std::log(f));
        t_end = t;
    }
    report.fit_t_begin = t_begin;
    report.fit_t_end = t_end;
    report.fit_points = xs.size();

    if (report.regime == DecayRegime::Indeterminate || xs.size() < 4) {
        report.fit_ok = false;
        if (report.note.empty()) report.note = "fit window too small";
        return report;
    }

    // Least squares y = c + s x.
    double n = static_cast<double>(xs.size());
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        sx += xs[k];
        sy += ys[k];
        sxx += xs[k] * xs[k];
        sxy += xs[k] * ys[k];
    }
    double denom = n * sxx - sx * sx;
    if (denom <= 0.0) {
        report.fit_ok = false;
        report.note = "degenerate fit";
        return report;
    }
    double slope = (n * sxy - sx * sy) / denom;
    if (slope >= 0.0) {
        report.regime = DecayRegime::Indeterminate;
        report.fit_ok = false;
        report.note = "non-decaying window";
        return report;
    }
    report.fitted_rate = -2.0 * slope;  // both laws carry the 1/2 in the exponent
    report.fit_ok = true;
    return report;
}

}  // namespace qbranch
