#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <vector>

#include "fastgate/chain.hpp"
#include "fastgate/kicks.hpp"
#include "fastgate/phasespace.hpp"

using namespace fastgate;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

ModeStructure make_modes(int n) {
    TrapModel trap;
    trap.species = barium133();
    trap.ion_count = n;
    trap.potential = HarmonicPotential{1.6e6};
    return normal_modes(trap, equilibrium_positions(trap), BeamGeometry{});
}

struct RandomCase {
    std::vector<double> times;
    std::vector<double> amps;
};

RandomCase random_kicks(std::mt19937_64& rng, double tau0, int max_kicks) {
    std::uniform_int_distribution<int> n_dist(2, max_kicks);
    std::uniform_real_distribution<double> t_dist(0.0, 3.0 * tau0);
    RandomCase c;
    const int n = n_dist(rng);
    c.times.resize(n);
    c.amps.resize(n);
    for (int j = 0; j < n; ++j) {
        c.times[j] = t_dist(rng);
        c.amps[j] = (rng() & 1) ? 1.0 : -1.0;
    }
    std::sort(c.times.begin(), c.times.end());
    return c;
}

}  // namespace

TEST_CASE("no kicks: every branch stays at the origin") {
    const auto modes = make_modes(3);
    std::vector<double> none;
    const auto traj = simulate(none, none, modes, 0, 1, Scheme::Unpaired);
    for (const auto& mt : traj.modes) {
        CHECK(mt.same_spin.final.x == 0.0);
        CHECK(mt.same_spin.final.y == 0.0);
        CHECK(mt.opposite_spin.final.x == 0.0);
        CHECK(mt.opposite_spin.final.y == 0.0);
    }
    CHECK(two_qubit_phase(traj) == 0.0);
}

TEST_CASE("a single kick rotates as a pure momentum displacement") {
    // dY at t=0 observed at t = tau: X = dY sin(w tau), Y = dY cos(w tau)
    const double omega = 2.3e6;
    const double dy = 0.42;
    const double tau = 0.7e-6;
    std::vector<double> times{0.0, tau}, dys{dy, 0.0};
    const auto track = propagate_branch({}, times, dys, omega, 0.0);
    CHECK_THAT(track.events[1].x_before, WithinRel(dy * std::sin(omega * tau), 1e-12));
    CHECK_THAT(track.events[1].y_before, WithinRel(dy * std::cos(omega * tau), 1e-12));
}

TEST_CASE("free rotation conserves X^2 + Y^2 between kicks") {
    const auto modes = make_modes(4);
    std::mt19937_64 rng(5);
    const auto c = random_kicks(rng, modes.com_period, 30);
    const auto traj = simulate(c.times, c.amps, modes, 1, 2, Scheme::Unpaired);
    for (const auto& mt : traj.modes) {
        for (const auto* branch : {&mt.same_spin, &mt.opposite_spin}) {
            for (size_t j = 1; j < branch->events.size(); ++j) {
                const auto& prev = branch->events[j - 1];
                const auto& cur = branch->events[j];
                const double r_after_kick = (prev.x_before) * (prev.x_before) +
                                            (prev.y_before + prev.dy) * (prev.y_before + prev.dy);
                const double r_next = cur.x_before * cur.x_before + cur.y_before * cur.y_before;
                CHECK_THAT(r_next, WithinAbs(r_after_kick, 1e-12));
            }
        }
    }
}

TEST_CASE("two-kick accumulated phase matches the hand expansion") {
    // theta = 1/2 dY1 sin(w dt) dY2
    const double omega = 1.9e6;
    const double dy1 = 0.3, dy2 = -0.55;
    const double t1 = 0.2e-6, t2 = 0.9e-6;
    std::vector<double> times{t1, t2}, dys{dy1, dy2};
    const auto track = propagate_branch({}, times, dys, omega, t1);
    CHECK_THAT(branch_phase(track),
               WithinRel(0.5 * dy1 * std::sin(omega * (t2 - t1)) * dy2, 1e-12));
}

TEST_CASE("all kicks at one instant accumulate no phase") {
    const auto modes = make_modes(2);
    std::vector<double> times(5, 1.0e-7), amps{1, -1, 1, 1, -1};
    const auto traj = simulate(times, amps, modes, 0, 1, Scheme::Unpaired);
    CHECK(two_qubit_phase(traj) == 0.0);
}

TEST_CASE("down-spin branches are the pointwise negation of up-spin") {
    // dd evolves under negated momentum increments, so by linearity its
    // trajectory is -(uu) pointwise and its phase equals theta_uu.
    const auto modes = make_modes(3);
    std::mt19937_64 rng(9);
    const auto c = random_kicks(rng, modes.com_period, 20);
    const auto traj = simulate(c.times, c.amps, modes, 0, 2, Scheme::Unpaired);
    for (const auto& mt : traj.modes) {
        std::vector<double> dys(c.times.size());
        for (size_t j = 0; j < c.times.size(); ++j) dys[j] = -mt.same_spin.events[j].dy;
        const auto dd = propagate_branch({}, c.times, dys, mt.omega, c.times.front());
        for (size_t j = 0; j < dd.events.size(); ++j) {
            CHECK_THAT(dd.events[j].x_before, WithinAbs(-mt.same_spin.events[j].x_before, 1e-12));
            CHECK_THAT(dd.events[j].y_before, WithinAbs(-mt.same_spin.events[j].y_before, 1e-12));
        }
        CHECK_THAT(dd.final.x, WithinAbs(-mt.same_spin.final.x, 1e-12));
        CHECK_THAT(dd.final.y, WithinAbs(-mt.same_spin.final.y, 1e-12));
        CHECK_THAT(branch_phase(dd), WithinAbs(branch_phase(mt.same_spin), 1e-12));
    }
}

TEST_CASE("reversed, sign-flipped replay returns every branch to the origin") {
    // Conjugating by the point reflection (X,Y) -> (-X,Y at reversed time)
    // shows: starting from (-X_f, Y_f), the time-reversed kick train with
    // flipped signs retraces the trajectory back to the origin.
    const auto modes = make_modes(3);
    std::mt19937_64 rng(13);
    const auto c = random_kicks(rng, modes.com_period, 16);
    const auto traj = simulate(c.times, c.amps, modes, 0, 1, Scheme::Unpaired);

    const double t_end = c.times.back();
    std::vector<double> rev_times(c.times.size());
    for (size_t j = 0; j < c.times.size(); ++j)
        rev_times[j] = t_end - c.times[c.times.size() - 1 - j];

    for (const auto& mt : traj.modes) {
        for (const auto* branch : {&mt.same_spin, &mt.opposite_spin}) {
            std::vector<double> rev_dys(c.times.size());
            for (size_t j = 0; j < c.times.size(); ++j)
                rev_dys[j] = -branch->events[c.times.size() - 1 - j].dy;
            const QuadratureState start{-branch->final.x, branch->final.y};
            const auto back = propagate_branch(start, rev_times, rev_dys, mt.omega, 0.0);
            CHECK_THAT(back.final.x, WithinAbs(0.0, 1e-10));
            CHECK_THAT(back.final.y, WithinAbs(0.0, 1e-10));
        }
    }
}

TEST_CASE("scaling eta scales displacements linearly and phases quadratically") {
    auto modes = make_modes(2);
    std::mt19937_64 rng(17);
    const auto c = random_kicks(rng, modes.com_period, 12);
    const auto base = simulate(c.times, c.amps, modes, 0, 1, Scheme::Unpaired);

    const double lambda = 1.7;
    auto scaled_modes = modes;
    for (auto& eta : scaled_modes.lamb_dicke) eta *= lambda;
    const auto scaled = simulate(c.times, c.amps, scaled_modes, 0, 1, Scheme::Unpaired);

    for (size_t a = 0; a < base.modes.size(); ++a) {
        CHECK_THAT(scaled.modes[a].same_spin.final.x,
                   WithinAbs(lambda * base.modes[a].same_spin.final.x, 1e-12));
        CHECK_THAT(scaled.modes[a].same_spin.final.y,
                   WithinAbs(lambda * base.modes[a].same_spin.final.y, 1e-12));
    }
    CHECK_THAT(two_qubit_phase(scaled),
               WithinRel(lambda * lambda * two_qubit_phase(base), 1e-9));
}

TEST_CASE("closed-form and trajectory routes agree on random sequences") {
    // The central cross-module oracle check: Theta and per-branch |dbeta|^2
    // from the closed forms match the trajectory simulation to 1e-9
    // relative over randomized sequences and chain sizes.
    std::mt19937_64 rng(21);
    for (int n : {2, 5, 12, 20}) {
        const auto modes = make_modes(n);
        for (int trial = 0; trial < 60; ++trial) {
            const auto c = random_kicks(rng, modes.com_period, 60);
            const int m = static_cast<int>(rng() % n);
            int nn = static_cast<int>(rng() % n);
            if (nn == m) nn = (m + 1) % n;
            const Scheme scheme = trial % 3 == 0 ? Scheme::Paired : Scheme::Unpaired;

            const double theta_cf = entangling_phase(c.times, c.amps, modes, m, nn, scheme);
            const auto disp_cf = residual_displacement(c.times, c.amps, modes, scheme);
            const auto traj = simulate(c.times, c.amps, modes, m, nn, scheme);
            const double theta_ps = two_qubit_phase(traj);

            CHECK_THAT(theta_ps, WithinRel(theta_cf, 1e-9));
            for (int a = 0; a < n; ++a) {
                const double bp = traj.modes[a].b_plus, bm = traj.modes[a].b_minus;
                const double same_sq = branch_displacement_sq(traj.modes[a].same_spin);
                const double opp_sq = branch_displacement_sq(traj.modes[a].opposite_spin);
                const double expect_same = bp * bp * std::norm(disp_cf[a]);
                const double expect_opp = bm * bm * std::norm(disp_cf[a]);
                CHECK_THAT(same_sq, WithinRel(expect_same, 1e-9) || WithinAbs(expect_same, 1e-18));
                CHECK_THAT(opp_sq, WithinRel(expect_opp, 1e-9) || WithinAbs(expect_opp, 1e-18));
            }
        }
    }
}

TEST_CASE("gate errors agree between the two routes") {
    std::mt19937_64 rng(23);
    const auto modes = make_modes(6);
    const auto thermal = thermal_occupation(modes, 30e-6);
    for (int trial = 0; trial < 100; ++trial) {
        const auto c = random_kicks(rng, modes.com_period, 40);
        const double theta = entangling_phase(c.times, c.amps, modes, 0, 3, Scheme::Unpaired);
        const auto disp = residual_displacement(c.times, c.amps, modes, Scheme::Unpaired);
        const double eps_cf = gate_error(theta, disp, modes, thermal, 0, 3);
        const auto traj = simulate(c.times, c.amps, modes, 0, 3, Scheme::Unpaired);
        const double eps_ps = ode_gate_error(traj, thermal);
        CHECK_THAT(eps_ps, WithinRel(eps_cf, 1e-9));
    }
}

TEST_CASE("closed trajectories with the target phase give zero error") {
    // Synthetic single-mode structure shared by two ions.  Kicks at quarter
    // periods with signs +,-,+,- close the loop (sum a_j e^{i w t_j} =
    // 1 - i - 1 + i = 0); eta is then scaled to land |Theta| = pi/4.
    ModeStructure two;
    two.frequencies = {2.0e6};
    two.couplings = Eigen::MatrixXd::Constant(2, 1, 1.0 / std::numbers::sqrt2);
    two.lamb_dicke = {0.1};
    two.com_period = 2.0 * std::numbers::pi / 2.0e6;
    two.travel_time = two.com_period;

    const double T = two.com_period;
    std::vector<double> times{0.0, 0.25 * T, 0.5 * T, 0.75 * T};
    std::vector<double> amps{1.0, -1.0, 1.0, -1.0};
    ThermalState cold{0.0, {0.0}};
    auto traj = simulate(times, amps, two, 0, 1, Scheme::Unpaired);
    CHECK_THAT(branch_displacement_sq(traj.modes[0].same_spin), WithinAbs(0.0, 1e-24));

    const double theta0 = std::abs(two_qubit_phase(traj));
    REQUIRE(theta0 > 0.0);
    const double scale = std::sqrt(std::numbers::pi / 4.0 / theta0);
    two.lamb_dicke[0] *= scale;
    traj = simulate(times, amps, two, 0, 1, Scheme::Unpaired);
    CHECK_THAT(std::abs(two_qubit_phase(traj)), WithinRel(std::numbers::pi / 4.0, 1e-12));
    CHECK_THAT(ode_gate_error(traj, cold), WithinAbs(0.0, 1e-15));
}

TEST_CASE("dense samples respect the requested density and the kick jumps") {
    const double omega = 2.0e6;
    std::vector<double> times{0.3e-6, 0.6e-6}, dys{0.5, -0.2};
    const double t0 = 0.0, t1 = 1.0e-6, dt = 0.05e-6;
    const auto samples = dense_branch_samples(times, dys, omega, t0, t1, dt);
    REQUIRE(samples.size() >= 20);
    CHECK(samples.front().t == t0);
    CHECK(samples.back().t == t1);
    // discontinuity bookkeeping: both pre- and post-kick states present
    int at_kick = 0;
    for (const auto& s : samples)
        if (s.t == times[0]) ++at_kick;
    CHECK(at_kick == 2);
}

TEST_CASE("simulate rejects unordered kick times") {
    const auto modes = make_modes(2);
    std::vector<double> times{2.0e-7, 1.0e-7}, amps{1.0, 1.0};
    CHECK_THROWS_AS(simulate(times, amps, modes, 0, 1, Scheme::Unpaired),
                    std::invalid_argument);
}
