#pragma once

// Independent oracle for the gate dynamics: mode-by-mode, branch-by-branch
// phase-space trajectories under piecewise free rotation and instantaneous
// momentum kicks.  The free evolution between kicks is the closed-form
// rotation of the (X, Y) quadratures, so there is no truncation error; the
// formulation (trajectories + overlap phases) stays independent of the
// closed-form pair sums it cross-checks.

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "fastgate/chain.hpp"
#include "fastgate/kicks.hpp"

namespace fastgate {

struct QuadratureState {
    double x = 0.0;
    double y = 0.0;
};

// State bookkeeping at one kick: quadratures just before the kick and the
// momentum increment applied.
struct KickEvent {
    double t = 0.0;
    double x_before = 0.0;
    double y_before = 0.0;
    double dy = 0.0;
};

// Same-spin branch (uu) couples through b+ = b^m + b^n, opposite-spin (ud)
// through b- = b^m - b^n.  The dd and du branches are the pointwise
// negations of uu and ud.
struct BranchTrack {
    std::vector<KickEvent> events;
    QuadratureState final;  // after the last kick
};

struct ModeTrack {
    double omega = 0.0;
    double b_plus = 0.0;
    double b_minus = 0.0;
    BranchTrack same_spin;
    BranchTrack opposite_spin;
};

struct Trajectory {
    std::vector<ModeTrack> modes;
    std::vector<double> kick_times;  // copy of the driving kick times
};

// Clockwise rotation of (X, Y) by w*dt: free harmonic evolution
// X' = w Y, Y' = -w X.
inline QuadratureState rotate(QuadratureState s, double omega, double dt) {
    const double c = std::cos(omega * dt), sn = std::sin(omega * dt);
    return {s.x * c + s.y * sn, -s.x * sn + s.y * c};
}

// Propagate one mode/branch through a kick train.  dys[j] is the momentum
// increment of kick j for this branch; the initial state is given at time
// t_start.
inline BranchTrack propagate_branch(QuadratureState initial, std::span<const double> times,
                                    std::span<const double> dys, double omega, double t_start) {
    BranchTrack track;
    track.events.reserve(times.size());
    QuadratureState s = initial;
    double t_prev = t_start;
    for (size_t j = 0; j < times.size(); ++j) {
        s = rotate(s, omega, times[j] - t_prev);
        track.events.push_back({times[j], s.x, s.y, dys[j]});
        s.y += dys[j];
        t_prev = times[j];
    }
    track.final = s;
    return track;
}

// Simulate all modes and both independent spin branches from the origin.
// At kick j the momentum quadrature jumps by sqrt(2) s a_j b^(+-) eta_a,
// with s = 2 for the paired scheme.
inline Trajectory simulate(std::span<const double> times, std::span<const double> amplitudes,
                           const ModeStructure& modes, int ion_m, int ion_n, Scheme scheme) {
    if (times.size() != amplitudes.size())
        throw std::invalid_argument("simulate: times/amplitudes size mismatch");
    for (size_t j = 1; j < times.size(); ++j)
        if (times[j] < times[j - 1]) throw std::invalid_argument("simulate: kick times not ordered");

    const double scale = kick_scale(scheme);
    Trajectory traj;
    traj.kick_times.assign(times.begin(), times.end());
    traj.modes.resize(modes.mode_count());
    std::vector<double> dys(times.size());
    for (int a = 0; a < modes.mode_count(); ++a) {
        ModeTrack& mt = traj.modes[a];
        mt.omega = modes.frequencies[a];
        mt.b_plus = modes.couplings(ion_m, a) + modes.couplings(ion_n, a);
        mt.b_minus = modes.couplings(ion_m, a) - modes.couplings(ion_n, a);
        const double eta = modes.lamb_dicke[a];
        const double t0 = times.empty() ? 0.0 : times.front();
        for (size_t j = 0; j < times.size(); ++j)
            dys[j] = std::numbers::sqrt2 * scale * amplitudes[j] * mt.b_plus * eta;
        mt.same_spin = propagate_branch({}, times, dys, mt.omega, t0);
        for (size_t j = 0; j < times.size(); ++j)
            dys[j] = std::numbers::sqrt2 * scale * amplitudes[j] * mt.b_minus * eta;
        mt.opposite_spin = propagate_branch({}, times, dys, mt.omega, t0);
    }
    return traj;
}

inline Trajectory simulate(const FlatKicks& kicks, const ModeStructure& modes, int ion_m,
                           int ion_n, Scheme scheme) {
    const auto amps = detail::amplitudes_of(kicks);
    return simulate(kicks.times, amps, modes, ion_m, ion_n, scheme);
}

inline Trajectory simulate(const FlatKicks& kicks, const ModeStructure& modes, int ion_m,
                           int ion_n) {
    return simulate(kicks, modes, ion_m, ion_n, kicks.scheme);
}

// Phase accumulated along one branch: each kick contributes the coherent
// state overlap term X(t_j^-) dY / 2, summed over kicks and modes.
struct BranchPhases {
    std::vector<double> same_spin;      // theta per mode, uu branch
    std::vector<double> opposite_spin;  // theta per mode, ud branch
};

inline double branch_phase(const BranchTrack& track) {
    double theta = 0.0;
    for (const auto& e : track.events) theta += 0.5 * e.x_before * e.dy;
    return theta;
}

inline BranchPhases accumulated_phase(const Trajectory& traj) {
    BranchPhases p;
    p.same_spin.reserve(traj.modes.size());
    p.opposite_spin.reserve(traj.modes.size());
    for (const auto& mt : traj.modes) {
        p.same_spin.push_back(branch_phase(mt.same_spin));
        p.opposite_spin.push_back(branch_phase(mt.opposite_spin));
    }
    return p;
}

// Two-qubit phase via the four-branch combination
//   Theta = 1/4 (theta_uu + theta_dd - theta_ud - theta_du)
// where dd = uu and du = ud by the negation symmetry of the trajectories.
inline double two_qubit_phase(const Trajectory& traj) {
    const BranchPhases p = accumulated_phase(traj);
    double theta = 0.0;
    for (size_t a = 0; a < traj.modes.size(); ++a)
        theta += 0.5 * (p.same_spin[a] - p.opposite_spin[a]);
    return theta;
}

// |dbeta|^2 of a branch's final state, (dX^2 + dY^2)/2.
inline double branch_displacement_sq(const BranchTrack& track) {
    return 0.5 * (track.final.x * track.final.x + track.final.y * track.final.y);
}

// Gate error from the trajectory route.  The four spin branches come in
// negated pairs (dd = -uu, du = -ud pointwise), so summing the branch sum
// over the two independent branches reproduces the state-averaged error
// formula exactly:
//   eps = 2/3 (|Theta| - pi/4)^2
//       + 2/3 sum_{branch in {uu, ud}} sum_a (1/2 + nbar_a) |dbeta_{a,branch}|^2.
inline double ode_gate_error(const Trajectory& traj, const ThermalState& thermal) {
    if (thermal.occupations.size() != traj.modes.size())
        throw std::invalid_argument("ode_gate_error: thermal/mode count mismatch");
    const double theta = two_qubit_phase(traj);
    const double dtheta = std::abs(theta) - std::numbers::pi / 4.0;
    double eps = (2.0 / 3.0) * dtheta * dtheta;
    for (size_t a = 0; a < traj.modes.size(); ++a) {
        const double w = 0.5 + thermal.occupations[a];
        eps += (2.0 / 3.0) * w *
               (branch_displacement_sq(traj.modes[a].same_spin) +
                branch_displacement_sq(traj.modes[a].opposite_spin));
    }
    return eps;
}

// Dense (X, Y) samples of one branch for plotting/export, including the
// kick discontinuities.  sample_dt is the time between samples.
struct TrajectorySample {
    double t, x, y;
};

inline std::vector<TrajectorySample> dense_branch_samples(std::span<const double> times,
                                                          std::span<const double> dys,
                                                          double omega, double t_start,
                                                          double t_end, double sample_dt) {
    if (!(sample_dt > 0.0))
        throw std::invalid_argument("dense_branch_samples: sample_dt must be positive");
    std::vector<TrajectorySample> out;
    QuadratureState s{};
    double t = t_start;
    size_t j = 0;
    out.push_back({t, s.x, s.y});
    while (t < t_end) {
        double t_next = std::min(t + sample_dt, t_end);
        if (j < times.size() && times[j] <= t_next) t_next = times[j];
        s = rotate(s, omega, t_next - t);
        t = t_next;
        while (j < times.size() && times[j] <= t) {
            out.push_back({t, s.x, s.y});
            s.y += dys[j];
            ++j;
        }
        out.push_back({t, s.x, s.y});
    }
    return out;
}

}  // namespace fastgate
