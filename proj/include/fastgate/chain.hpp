#pragma once

// Ion-chain model: axial trapping potentials, equilibrium geometry of the
// Coulomb crystal, normal-mode structure, Lamb-Dicke parameters, thermal
// occupations and the Raman beam geometry.  Everything is SI internally
// (kg, m, s, rad/s); reporting layers convert to um / us / tau0 units.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "fastgate/constants.hpp"

namespace fastgate {

struct IonSpecies {
    double mass = 0.0;  // kg
    std::string label;
};

// 133Ba+, the default species throughout.
inline IonSpecies barium133() {
    return {2.207e-25, "Ba133"};
}

inline IonSpecies calcium40() {
    return {39.9626 * constants::atomic_mass_unit, "Ca40"};
}

// Counter-propagating Raman beams tilted by half_angle from the transverse
// axis on either side; the effective wavevector along the chain axis is
// k_eff = 2 k sin(theta).
struct BeamGeometry {
    double wavelength = 532e-9;  // m
    double half_angle = std::numbers::pi / 6.0;  // rad

    double k_eff() const {
        return 2.0 * (2.0 * std::numbers::pi / wavelength) * std::sin(half_angle);
    }

    void validate() const {
        if (!(wavelength > 0.0))
            throw std::invalid_argument("BeamGeometry: wavelength must be positive");
        if (!(half_angle > 0.0 && half_angle < std::numbers::pi / 2.0))
            throw std::invalid_argument("BeamGeometry: half angle must lie in (0, pi/2)");
    }
};

struct HarmonicPotential {
    double omega_t = 0.0;  // rad/s
};

// V(z) = kappa2 z^2/2 + kappa4 z^4/4
struct QuarticPotential {
    double kappa2 = 0.0;  // J m^-2
    double kappa4 = 0.0;  // J m^-4
};

struct TrapModel {
    IonSpecies species;
    std::variant<HarmonicPotential, QuarticPotential> potential;
    int ion_count = 0;

    bool is_harmonic() const { return std::holds_alternative<HarmonicPotential>(potential); }

    // Quadratic coefficient of the on-axis potential, kappa2 = m omega_t^2
    // for the harmonic family.
    double kappa2() const {
        if (auto* h = std::get_if<HarmonicPotential>(&potential))
            return species.mass * h->omega_t * h->omega_t;
        return std::get<QuarticPotential>(potential).kappa2;
    }

    double kappa4() const {
        if (std::holds_alternative<HarmonicPotential>(potential)) return 0.0;
        return std::get<QuarticPotential>(potential).kappa4;
    }

    void validate() const {
        if (!(species.mass > 0.0))
            throw std::invalid_argument("TrapModel: ion mass must be positive");
        if (ion_count < 2)
            throw std::invalid_argument("TrapModel: need at least two ions");
        if (auto* h = std::get_if<HarmonicPotential>(&potential)) {
            if (!(h->omega_t > 0.0))
                throw std::invalid_argument("TrapModel: omega_t must be positive");
        } else {
            auto& q = std::get<QuarticPotential>(potential);
            if (!(q.kappa2 > 0.0) || q.kappa4 < 0.0)
                throw std::invalid_argument("TrapModel: require kappa2 > 0 and kappa4 >= 0");
        }
    }
};

struct ChainGeometry {
    std::vector<double> positions;  // m, ascending, symmetric about 0
    double min_separation = 0.0;    // smallest adjacent gap
};

struct ModeStructure {
    std::vector<double> frequencies;  // rad/s, ascending
    Eigen::MatrixXd couplings;        // N x N, column alpha = unit eigenvector of mode alpha
    std::vector<double> lamb_dicke;   // eta_alpha = k_eff sqrt(hbar/(2 m omega_alpha))
    double com_period = 0.0;          // tau0 = 2 pi / omega_COM
    double travel_time = 0.0;         // tau0 / (omega_BR/omega_COM - 1)

    int mode_count() const { return static_cast<int>(frequencies.size()); }
};

struct ThermalState {
    double temperature = 0.0;          // K
    std::vector<double> occupations;   // nbar per mode
};

// ---------------------------------------------------------------------------
// Trap potential and its derivatives

namespace detail {

inline double total_potential(const TrapModel& trap, const std::vector<double>& z) {
    const double k2 = trap.kappa2(), k4 = trap.kappa4();
    double v = 0.0;
    for (double zi : z) v += 0.5 * k2 * zi * zi + 0.25 * k4 * zi * zi * zi * zi;
    const int n = static_cast<int>(z.size());
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) v += constants::coulomb_q2 / std::abs(z[j] - z[i]);
    return v;
}

inline Eigen::VectorXd potential_gradient(const TrapModel& trap, const std::vector<double>& z) {
    const double k2 = trap.kappa2(), k4 = trap.kappa4();
    const int n = static_cast<int>(z.size());
    Eigen::VectorXd g(n);
    for (int i = 0; i < n; ++i) g(i) = k2 * z[i] + k4 * z[i] * z[i] * z[i];
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            const double d = z[j] - z[i];
            const double f = constants::coulomb_q2 / (d * d) * (d > 0 ? 1.0 : -1.0);
            g(i) += f;
            g(j) -= f;
        }
    }
    return g;
}

// Hessian of the full potential (not mass-scaled).  The quartic term enters
// exactly as 3 kappa4 z^2; the Coulomb interaction is linearized about z.
inline Eigen::MatrixXd potential_hessian(const TrapModel& trap, const std::vector<double>& z) {
    const double k2 = trap.kappa2(), k4 = trap.kappa4();
    const int n = static_cast<int>(z.size());
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i) h(i, i) = k2 + 3.0 * k4 * z[i] * z[i];
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            const double d = std::abs(z[j] - z[i]);
            const double c = 2.0 * constants::coulomb_q2 / (d * d * d);
            h(i, i) += c;
            h(j, j) += c;
            h(i, j) -= c;
            h(j, i) -= c;
        }
    }
    return h;
}

// Enforce the mirror symmetry z_j = -z_{N-1-j} exactly.
inline void symmetrize(std::vector<double>& z) {
    const int n = static_cast<int>(z.size());
    for (int i = 0; i < n / 2; ++i) {
        const double s = 0.5 * (z[n - 1 - i] - z[i]);
        z[i] = -s;
        z[n - 1 - i] = s;
    }
    if (n % 2 == 1) z[n / 2] = 0.0;
}

// Uniform-spacing initializer.  For the quartic family the spacing comes
// from inverting kappa2 = 8 q^2/(d^3 N^2); for the harmonic family from the
// empirical minimum-separation scaling ~ 2 l / N^0.56 with l = (q^2/k2)^(1/3).
inline std::vector<double> initial_positions(const TrapModel& trap) {
    const int n = trap.ion_count;
    double d;
    if (!trap.is_harmonic() && trap.kappa4() > 0.0) {
        d = std::cbrt(8.0 * constants::coulomb_q2 / (trap.kappa2() * double(n) * double(n)));
    } else {
        const double scale = std::cbrt(constants::coulomb_q2 / trap.kappa2());
        d = 2.0 * scale / std::pow(double(n), 0.56);
    }
    std::vector<double> z(n);
    for (int i = 0; i < n; ++i) z[i] = d * (i - 0.5 * (n - 1));
    return z;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations

// Quartic trap coefficients that keep a continuous N-ion chain uniform at
// spacing d: kappa2 = 8 q^2/(d^3 N^2), kappa4 = 32 q^2/(d^5 N^4).
inline QuarticPotential quartic_coefficients(int ion_count, double spacing) {
    if (ion_count < 2) throw std::domain_error("quartic_coefficients: need N >= 2");
    if (!(spacing > 0.0)) throw std::domain_error("quartic_coefficients: spacing must be positive");
    const double q2 = constants::coulomb_q2;
    const double n2 = double(ion_count) * double(ion_count);
    const double d3 = spacing * spacing * spacing;
    const double d5 = d3 * spacing * spacing;
    return {8.0 * q2 / (d3 * n2), 32.0 * q2 / (d5 * n2 * n2)};
}

// Equilibrium positions of the chain: damped Newton iteration on the exact
// potential gradient, falling back to gradient descent if a Newton step
// fails to reduce the residual.
inline ChainGeometry equilibrium_positions(const TrapModel& trap) {
    trap.validate();
    std::vector<double> z = detail::initial_positions(trap);
    const int n = trap.ion_count;

    // Characteristic force: Coulomb force at the initial spacing.
    const double s0 = z[1] - z[0];
    const double force_scale = constants::coulomb_q2 / (s0 * s0);
    const double tol = 1e-13 * force_scale;

    Eigen::VectorXd g = detail::potential_gradient(trap, z);
    double res = g.cwiseAbs().maxCoeff();
    for (int iter = 0; iter < 200 && res > tol; ++iter) {
        Eigen::MatrixXd h = detail::potential_hessian(trap, z);
        Eigen::VectorXd step = h.ldlt().solve(g);
        if (!step.allFinite()) step = g / h.diagonal().maxCoeff();

        // Backtracking on the residual norm; cap the step so ions never pass
        // each other.
        double max_step = step.cwiseAbs().maxCoeff();
        double damp = 1.0;
        if (max_step > 0.4 * s0) damp = 0.4 * s0 / max_step;
        bool improved = false;
        for (int bt = 0; bt < 30; ++bt) {
            std::vector<double> trial = z;
            for (int i = 0; i < n; ++i) trial[i] -= damp * step(i);
            detail::symmetrize(trial);
            if (std::is_sorted(trial.begin(), trial.end())) {
                Eigen::VectorXd gt = detail::potential_gradient(trap, trial);
                const double rt = gt.cwiseAbs().maxCoeff();
                if (rt < res) {
                    z = std::move(trial);
                    g = std::move(gt);
                    res = rt;
                    improved = true;
                    break;
                }
            }
            damp *= 0.5;
        }
        if (!improved) {
            // Gradient-descent fallback with a conservative step.
            const double lam = detail::potential_hessian(trap, z).diagonal().maxCoeff();
            std::vector<double> trial = z;
            for (int i = 0; i < n; ++i) trial[i] -= g(i) / lam;
            detail::symmetrize(trial);
            Eigen::VectorXd gt = detail::potential_gradient(trap, trial);
            const double rt = gt.cwiseAbs().maxCoeff();
            if (rt >= res)
                throw std::runtime_error("equilibrium_positions: solver stalled, residual " +
                                         std::to_string(res / force_scale) + " of force scale");
            z = std::move(trial);
            g = std::move(gt);
            res = rt;
        }
    }
    if (res > 10.0 * tol)
        throw std::runtime_error("equilibrium_positions: no convergence, residual " +
                                 std::to_string(res / force_scale) + " of force scale");

    ChainGeometry geom;
    geom.positions = std::move(z);
    double min_sep = std::numeric_limits<double>::infinity();
    for (int i = 0; i + 1 < n; ++i)
        min_sep = std::min(min_sep, geom.positions[i + 1] - geom.positions[i]);
    geom.min_separation = min_sep;
    return geom;
}

// Find the trap (quartic family: over the spacing parameter d; harmonic:
// over omega_t) whose equilibrium chain has the requested minimum ion
// separation.  min_separation is monotone in either knob, so bisection.
enum class TrapFamily { Harmonic, Quartic };

inline TrapModel calibrate_min_separation(const IonSpecies& species, TrapFamily family,
                                          int ion_count, double s_min) {
    if (!(s_min > 0.0)) throw std::domain_error("calibrate_min_separation: s_min must be positive");

    auto make_trap = [&](double knob) {
        TrapModel t;
        t.species = species;
        t.ion_count = ion_count;
        if (family == TrapFamily::Quartic)
            t.potential = quartic_coefficients(ion_count, knob);
        else
            t.potential = HarmonicPotential{knob};
        return t;
    };
    auto min_sep = [&](double knob) {
        return equilibrium_positions(make_trap(knob)).min_separation;
    };

    // Looser confinement widens the chain, so min_sep decreases with
    // omega_t and increases with the quartic spacing parameter d.
    double lo, hi;
    if (family == TrapFamily::Quartic) {
        lo = 0.05 * s_min;
        hi = s_min;  // formula spacing underestimates the realized separation
        while (min_sep(hi) < s_min) {
            hi *= 1.5;
            if (hi > 1e3 * s_min)
                throw std::runtime_error("calibrate_min_separation: bracketing failed");
        }
    } else {
        // Two-ion analytic solution as the scale seed: omega for which a
        // 2-ion chain sits at s_min; longer chains need weaker traps.
        const double w2 = std::sqrt(2.0 * constants::coulomb_q2 /
                                    (species.mass * s_min * s_min * s_min));
        lo = w2 * 1e-3;
        hi = w2;
        while (min_sep(hi) > s_min) {
            hi *= 2.0;
            if (hi > 1e6 * w2)
                throw std::runtime_error("calibrate_min_separation: bracketing failed");
        }
        while (min_sep(lo) < s_min) {
            lo *= 0.5;
            if (lo < 1e-9 * w2)
                throw std::runtime_error("calibrate_min_separation: bracketing failed");
        }
    }

    for (int iter = 0; iter < 200; ++iter) {
        const double mid = 0.5 * (lo + hi);
        const double s = min_sep(mid);
        if (std::abs(s - s_min) < 1e-5 * s_min) return make_trap(mid);
        const bool too_wide = s > s_min;
        if (family == TrapFamily::Quartic) (too_wide ? hi : lo) = mid;
        else (too_wide ? lo : hi) = mid;
        if (std::abs(hi - lo) < 1e-14 * std::abs(hi)) break;
    }
    TrapModel t = make_trap(0.5 * (lo + hi));
    if (std::abs(equilibrium_positions(t).min_separation - s_min) > 1e-3 * s_min)
        throw std::runtime_error("calibrate_min_separation: bisection did not converge");
    return t;
}

// Axial normal modes: eigenpairs of the mass-scaled Hessian at equilibrium.
// Columns of the coupling matrix are orthonormal and ordered by ascending
// frequency; each column's sign is fixed so its largest-magnitude component
// is positive.
inline ModeStructure normal_modes(const TrapModel& trap, const ChainGeometry& geometry,
                                  const BeamGeometry& beam) {
    trap.validate();
    beam.validate();
    const int n = trap.ion_count;
    if (static_cast<int>(geometry.positions.size()) != n)
        throw std::invalid_argument("normal_modes: geometry/trap size mismatch");

    Eigen::MatrixXd h = detail::potential_hessian(trap, geometry.positions) / trap.species.mass;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(h);
    if (eig.info() != Eigen::Success)
        throw std::runtime_error("normal_modes: eigensolver failed");

    ModeStructure modes;
    modes.couplings = eig.eigenvectors();
    modes.frequencies.resize(n);
    for (int a = 0; a < n; ++a) {
        const double lam = eig.eigenvalues()(a);
        if (!(lam > 0.0))
            throw std::runtime_error("normal_modes: non-positive eigenvalue (input not an equilibrium?)");
        modes.frequencies[a] = std::sqrt(lam);
        int imax = 0;
        modes.couplings.col(a).cwiseAbs().maxCoeff(&imax);
        if (modes.couplings(imax, a) < 0.0) modes.couplings.col(a) *= -1.0;
    }

    const double k_eff = beam.k_eff();
    modes.lamb_dicke.resize(n);
    for (int a = 0; a < n; ++a)
        modes.lamb_dicke[a] =
            k_eff * std::sqrt(constants::hbar / (2.0 * trap.species.mass * modes.frequencies[a]));

    modes.com_period = 2.0 * std::numbers::pi / modes.frequencies[0];
    modes.travel_time = modes.com_period / (modes.frequencies[1] / modes.frequencies[0] - 1.0);
    return modes;
}

// Bose-Einstein occupation of each mode at temperature T.
inline ThermalState thermal_occupation(const ModeStructure& modes, double temperature) {
    if (temperature < 0.0) throw std::invalid_argument("thermal_occupation: T must be >= 0");
    ThermalState state;
    state.temperature = temperature;
    state.occupations.resize(modes.frequencies.size());
    for (size_t a = 0; a < modes.frequencies.size(); ++a) {
        if (temperature == 0.0) {
            state.occupations[a] = 0.0;
        } else {
            const double x = constants::hbar * modes.frequencies[a] /
                             (constants::k_boltzmann * temperature);
            state.occupations[a] = 1.0 / std::expm1(x);
        }
    }
    return state;
}

}  // namespace fastgate
