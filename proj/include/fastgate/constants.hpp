#pragma once

#include <numbers>

namespace fastgate::constants {

// CODATA 2018 values, SI units.
inline constexpr double hbar = 1.054571817e-34;        // J s
inline constexpr double k_boltzmann = 1.380649e-23;    // J/K
inline constexpr double elementary_charge = 1.602176634e-19;  // C
inline constexpr double vacuum_permittivity = 8.8541878128e-12;  // F/m
inline constexpr double atomic_mass_unit = 1.66053906660e-27;    // kg

// Coulomb coupling q^2 = e^2/(4 pi eps0), the force constant between two
// unit charges: F = q^2 / r^2.  Units J m.
inline constexpr double coulomb_q2 =
    elementary_charge * elementary_charge /
    (4.0 * std::numbers::pi * vacuum_permittivity);

}  // namespace fastgate::constants
