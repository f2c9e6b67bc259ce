#pragma once

// Anti-symmetric pulse-group (APG) sequences of state-dependent kicks, their
// expansion into individually timed signed kicks at a finite repetition
// rate, and the closed-form gate metrics: two-qubit phase, residual mode
// displacements, state-averaged gate error and SDK-weighted costs.

#include <cmath>
#include <complex>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fastgate/chain.hpp"

namespace fastgate {

// Unpaired: each SDK is a single effective pi-pulse (momentum hbar*k, spin
// flip).  Paired: counter-propagating pi-pulse pairs (momentum 2 hbar*k, no
// net spin flip); phase and displacement scale by 4 and 2 respectively.
enum class Scheme { Unpaired, Paired };

inline double kick_scale(Scheme s) { return s == Scheme::Paired ? 2.0 : 1.0; }

struct PulseGroup {
    int z = 0;       // signed kick count; sign = phase-space direction
    double time = 0.0;  // group center, s (> 0 for the stored half)
};

// Positive-time half of an anti-symmetric sequence.  The full gate is the
// mirror closure {(-z_j, -t_j)} + {(z_j, t_j)}, which keeps the total kick
// count even and restores one quadrature of every mode exactly.
struct APGSequence {
    std::vector<PulseGroup> half_groups;   // strictly increasing times
    std::optional<double> f_rep;           // Hz; nullopt = unbounded rate
    Scheme scheme = Scheme::Unpaired;

    int kick_count() const {
        int n = 0;
        for (const auto& g : half_groups) n += std::abs(g.z);
        return 2 * n;
    }

    int half_kick_sum() const {  // sum |z_j| over the stored half
        return kick_count() / 2;
    }

    void validate(int z_max = 0) const {
        double prev = 0.0;
        for (const auto& g : half_groups) {
            if (!(g.time > prev))
                throw std::invalid_argument("APGSequence: group times must be positive and strictly increasing");
            prev = g.time;
            if (z_max > 0 && std::abs(g.z) > z_max)
                throw std::invalid_argument("APGSequence: |z| exceeds z_max");
        }
        if (f_rep && !(*f_rep > 0.0))
            throw std::invalid_argument("APGSequence: f_rep must be positive");
    }
};

// Expanded kick train.  effective_signs are the phase-space directions
// after the spin-flip parity bookkeeping has been resolved: every kick in
// group j displaces toward sign(z_j), realized physically by alternating
// the beam direction between consecutive pulses of the group.
struct FlatKicks {
    std::vector<double> times;       // non-decreasing
    std::vector<int> effective_signs;  // +-1
    Scheme scheme = Scheme::Unpaired;

    size_t size() const { return times.size(); }
};

// Per-kick laser phase phi(t) = omega_A t + phi0.
struct PhaseModel {
    double detuning = 0.0;  // omega_A, rad/s
    double offset = 0.0;    // phi0, rad

    double operator()(double t) const { return detuning * t + offset; }
};

struct GateMetrics {
    double theta_2q = 0.0;        // Theta, rad
    double phase_mismatch = 0.0;  // |Theta| - pi/4
    std::vector<std::complex<double>> residual_displacements;  // per mode
    double epsilon_av = 0.0;      // state-averaged gate error
    double sdk_cost = 0.0;        // SDK-error-weighted cost
    int kick_count = 0;
};

enum class Regime { Supersonic, Subsonic };

inline const char* to_string(Regime r) {
    return r == Regime::Supersonic ? "supersonic" : "subsonic";
}

// ---------------------------------------------------------------------------
// Expansion

namespace detail {

// Shared expansion body.  enforce_spacing turns on the physical feasibility
// checks; the optimizer's finite-difference probes evaluate marginally
// infeasible timing vectors and use the lenient form.
inline FlatKicks expand_impl(const APGSequence& seq, bool enforce_spacing) {
    seq.validate();
    const double dt = seq.f_rep ? 1.0 / *seq.f_rep : 0.0;
    const double slack = 1.0 - 1e-9;

    std::vector<double> times;
    std::vector<int> signs;
    const int k = static_cast<int>(seq.half_groups.size());
    for (int j = 0; j < k; ++j) {
        const auto& g = seq.half_groups[j];
        if (g.z == 0) continue;
        const int nk = std::abs(g.z);
        const double span = (nk - 1) * dt;
        const double start = g.time - 0.5 * span;
        if (enforce_spacing) {
            // Earliest kick must stay strictly positive and a full spacing
            // away from its mirror image at -start.
            if (start <= 0.0 || 2.0 * start < dt * slack)
                throw std::runtime_error("expand: group " + std::to_string(j + 1) +
                                         " crosses t=0 / collides with its mirror image");
            if (!times.empty() && start - times.back() < dt * slack)
                throw std::runtime_error("expand: groups " + std::to_string(j) + " and " +
                                         std::to_string(j + 1) + " overlap");
        }
        for (int i = 0; i < nk; ++i) {
            times.push_back(start + i * dt);
            signs.push_back(g.z > 0 ? 1 : -1);
        }
    }

    FlatKicks out;
    out.scheme = seq.scheme;
    const size_t n = times.size();
    out.times.reserve(2 * n);
    out.effective_signs.reserve(2 * n);
    for (size_t i = 0; i < n; ++i) {  // mirrored half, time-ascending
        out.times.push_back(-times[n - 1 - i]);
        out.effective_signs.push_back(-signs[n - 1 - i]);
    }
    for (size_t i = 0; i < n; ++i) {
        out.times.push_back(times[i]);
        out.effective_signs.push_back(signs[i]);
    }
    return out;
}

}  // namespace detail

// Expand an APG sequence into individual kicks.  Each group's |z| kicks are
// centered on the group time with spacing 1/f_rep (all coincident when the
// rate is unbounded).  The mirrored half is generated by exact negation of
// the positive half so the anti-symmetry holds bit-for-bit.  Throws if any
// two kicks would be closer than 1/f_rep or a group would cross t = 0.
inline FlatKicks expand(const APGSequence& seq) {
    return detail::expand_impl(seq, true);
}

// ---------------------------------------------------------------------------
// Closed-form metrics.  The evaluators accept real amplitudes so that
// perturbed sequences (missing or doubled kicks) reuse the same path; the
// nominal case passes +-1.

namespace detail {

inline std::vector<double> amplitudes_of(const FlatKicks& kicks) {
    return {kicks.effective_signs.begin(), kicks.effective_signs.end()};
}

}  // namespace detail

// Two-qubit phase, time-ordered pair sum:
//   Theta = 2 s^2 sum_a eta_a^2 b_a^m b_a^n sum_{k<j} a_j a_k sin(w_a (t_j - t_k))
// with s the paired-scheme kick scale.  Evaluated per mode with a running
// prefix of sum_k a_k e^{i w t_k}, O(N_kicks * N_modes).
inline double entangling_phase(std::span<const double> times, std::span<const double> amplitudes,
                               const ModeStructure& modes, int ion_m, int ion_n, Scheme scheme) {
    if (times.size() != amplitudes.size())
        throw std::invalid_argument("entangling_phase: times/amplitudes size mismatch");
    const int n_modes = modes.mode_count();
    if (ion_m == ion_n || ion_m < 0 || ion_n < 0 || ion_m >= n_modes || ion_n >= n_modes)
        throw std::invalid_argument("entangling_phase: bad ion pair");

    const double s2 = kick_scale(scheme) * kick_scale(scheme);
    double theta = 0.0;
    for (int a = 0; a < n_modes; ++a) {
        const double w = modes.frequencies[a];
        const double eta = modes.lamb_dicke[a];
        const double weight = eta * eta * modes.couplings(ion_m, a) * modes.couplings(ion_n, a);
        if (weight == 0.0) continue;
        std::complex<double> prefix = 0.0;
        double pair_sum = 0.0;  // sum_{k<j} a_j a_k sin(w (t_j - t_k))
        for (size_t j = 0; j < times.size(); ++j) {
            const std::complex<double> e = std::polar(1.0, w * times[j]);
            pair_sum += amplitudes[j] * std::imag(e * std::conj(prefix));
            prefix += amplitudes[j] * e;
        }
        theta += 2.0 * s2 * weight * pair_sum;
    }
    return theta;
}

inline double entangling_phase(const FlatKicks& kicks, const ModeStructure& modes, int ion_m,
                               int ion_n, Scheme scheme) {
    const auto amps = detail::amplitudes_of(kicks);
    return entangling_phase(kicks.times, amps, modes, ion_m, ion_n, scheme);
}

inline double entangling_phase(const FlatKicks& kicks, const ModeStructure& modes, int ion_m,
                               int ion_n) {
    return entangling_phase(kicks, modes, ion_m, ion_n, kicks.scheme);
}

// Residual state-dependent displacement of each mode,
//   dbeta_a = i s eta_a sum_j a_j e^{i w_a t_j}.
inline std::vector<std::complex<double>> residual_displacement(std::span<const double> times,
                                                               std::span<const double> amplitudes,
                                                               const ModeStructure& modes,
                                                               Scheme scheme) {
    if (times.size() != amplitudes.size())
        throw std::invalid_argument("residual_displacement: times/amplitudes size mismatch");
    const double s = kick_scale(scheme);
    std::vector<std::complex<double>> out(modes.mode_count());
    for (int a = 0; a < modes.mode_count(); ++a) {
        const double w = modes.frequencies[a];
        std::complex<double> sum = 0.0;
        for (size_t j = 0; j < times.size(); ++j)
            sum += amplitudes[j] * std::polar(1.0, w * times[j]);
        out[a] = std::complex<double>(0.0, 1.0) * s * modes.lamb_dicke[a] * sum;
    }
    return out;
}

inline std::vector<std::complex<double>> residual_displacement(const FlatKicks& kicks,
                                                               const ModeStructure& modes,
                                                               Scheme scheme) {
    const auto amps = detail::amplitudes_of(kicks);
    return residual_displacement(kicks.times, amps, modes, scheme);
}

inline std::vector<std::complex<double>> residual_displacement(const FlatKicks& kicks,
                                                               const ModeStructure& modes) {
    return residual_displacement(kicks, modes, kicks.scheme);
}

// State-averaged gate error:
//   eps = 2/3 |dTheta|^2
//       + 4/3 sum_a (1/2 + nbar_a) [ (b_a^m)^2 + (b_a^n)^2 ] |dbeta_a|^2
// with dTheta = |Theta| - pi/4, so solutions of either phase sign count.
inline double gate_error(double theta, std::span<const std::complex<double>> displacements,
                         const ModeStructure& modes, const ThermalState& thermal, int ion_m,
                         int ion_n) {
    const double dtheta = std::abs(theta) - std::numbers::pi / 4.0;
    double eps = (2.0 / 3.0) * dtheta * dtheta;
    for (int a = 0; a < modes.mode_count(); ++a) {
        const double bm = modes.couplings(ion_m, a);
        const double bn = modes.couplings(ion_n, a);
        eps += (4.0 / 3.0) * (0.5 + thermal.occupations[a]) * (bm * bm + bn * bn) *
               std::norm(displacements[a]);
    }
    return eps;
}

// Motional part of the gate error only (the dbeta term of the error
// formula); used by the temperature scans.
inline double motional_error(std::span<const std::complex<double>> displacements,
                             const ModeStructure& modes, const ThermalState& thermal, int ion_m,
                             int ion_n) {
    double eps = 0.0;
    for (int a = 0; a < modes.mode_count(); ++a) {
        const double bm = modes.couplings(ion_m, a);
        const double bn = modes.couplings(ion_n, a);
        eps += (4.0 / 3.0) * (0.5 + thermal.occupations[a]) * (bm * bm + bn * bn) *
               std::norm(displacements[a]);
    }
    return eps;
}

// SDK-weighted optimization cost, eps_eps = 2 eps_pi (sum_k |z_k|) eps_av,
// the per-kick error probability times the pulse budget of the half
// sequence.
inline double sdk_weighted_cost(double epsilon_av, const APGSequence& seq, double epsilon_pi) {
    if (epsilon_pi < 0.0 || epsilon_pi >= 1.0)
        throw std::invalid_argument("sdk_weighted_cost: epsilon_pi must lie in [0, 1)");
    return 2.0 * epsilon_pi * seq.half_kick_sum() * epsilon_av;
}

// Total reported error with imperfect SDKs:
//   eps_tot = 1 - (1 - eps_pi)^(2 N) (1 - eps_av).
inline double total_error_with_sdk(double epsilon_av, int kick_count, double epsilon_pi) {
    if (epsilon_pi < 0.0 || epsilon_pi >= 1.0)
        throw std::invalid_argument("total_error_with_sdk: epsilon_pi must lie in [0, 1)");
    return 1.0 - std::pow(1.0 - epsilon_pi, 2.0 * kick_count) * (1.0 - epsilon_av);
}

// Residual single-qubit rotation from the laser phase, Phi = sum_j c_j phi(t_j).
// Anti-symmetric sequences cancel any constant phase exactly.
inline double single_qubit_phase(const FlatKicks& kicks, const PhaseModel& phase) {
    double phi = 0.0;
    for (size_t j = 0; j < kicks.size(); ++j)
        phi += kicks.effective_signs[j] * phase(kicks.times[j]);
    return phi;
}

template <typename PhaseFn>
inline double single_qubit_phase(const FlatKicks& kicks, PhaseFn&& phase) {
    double phi = 0.0;
    for (size_t j = 0; j < kicks.size(); ++j)
        phi += kicks.effective_signs[j] * phase(kicks.times[j]);
    return phi;
}

// Supersonic iff the gate completes before phonons can traverse the chain;
// the boundary tau_G = tau_travel is assigned to Subsonic.
inline Regime classify_regime(double gate_time, const ModeStructure& modes) {
    if (!(gate_time > 0.0)) throw std::invalid_argument("classify_regime: gate time must be positive");
    return gate_time < modes.travel_time ? Regime::Supersonic : Regime::Subsonic;
}

// Convenience bundle: all closed-form metrics of an expanded sequence.
inline GateMetrics evaluate_gate(const APGSequence& seq, const ModeStructure& modes,
                                 const ThermalState& thermal, int ion_m, int ion_n,
                                 double epsilon_pi) {
    const FlatKicks kicks = expand(seq);
    GateMetrics m;
    m.theta_2q = entangling_phase(kicks, modes, ion_m, ion_n);
    m.residual_displacements = residual_displacement(kicks, modes);
    m.phase_mismatch = std::abs(m.theta_2q) - std::numbers::pi / 4.0;
    m.epsilon_av = gate_error(m.theta_2q, m.residual_displacements, modes, thermal, ion_m, ion_n);
    m.sdk_cost = sdk_weighted_cost(m.epsilon_av, seq, epsilon_pi);
    m.kick_count = seq.kick_count();
    return m;
}

}  // namespace fastgate
