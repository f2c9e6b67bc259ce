#pragma once

// Two-stage machine design of APG gate sequences.  Stage 1 is a global
// integer search over the group sizes z (groups treated as simultaneous
// kicks at fixed uniform timings, which turns the cost into a precomputed
// quadratic form).  Stage 2 expands the groups at the finite repetition
// rate and locally refines the group centers under ordering, non-overlap
// and mirror constraints.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <thread>
#include <vector>

#include "fastgate/chain.hpp"
#include "fastgate/kicks.hpp"

namespace fastgate {

struct SearchConfig {
    int group_count = 30;   // K, even; the search stores K/2 half-groups
    int z_max = 5;
    double gate_time = 0.0;  // s
    std::optional<double> f_rep;  // Hz; nullopt = unbounded
    double epsilon_pi = 1e-4;
    bool grid_mode = false;  // restrict kick times to integer multiples of 1/f_rep
    Scheme scheme = Scheme::Unpaired;
    int restarts = 4;
    long eval_budget = 200000;  // stage-1 cost evaluations per restart
    std::uint64_t seed = 1;
    std::optional<int> kick_cap;  // N_max on the total kick count
    int stage2_candidates = 8;    // stage-1 vectors promoted to stage 2
    int stage2_starts = 3;        // timing initializations per candidate
    int stage2_sweeps = 40;       // max coordinate-descent sweeps
    int threads = 1;

    void validate() const {
        if (group_count < 2 || group_count % 2 != 0)
            throw std::invalid_argument("SearchConfig: group_count must be even and >= 2");
        if (z_max < 1) throw std::invalid_argument("SearchConfig: z_max must be >= 1");
        if (!(gate_time > 0.0)) throw std::invalid_argument("SearchConfig: gate_time must be positive");
        if (epsilon_pi < 0.0 || epsilon_pi >= 1.0)
            throw std::invalid_argument("SearchConfig: epsilon_pi must lie in [0, 1)");
        if (restarts < 1) throw std::invalid_argument("SearchConfig: restarts must be >= 1");
        if (eval_budget < 100) throw std::invalid_argument("SearchConfig: eval_budget too small");
        if (f_rep && !(*f_rep > 0.0))
            throw std::invalid_argument("SearchConfig: f_rep must be positive");
        if (grid_mode && !f_rep)
            throw std::invalid_argument("SearchConfig: grid_mode needs a finite f_rep");
        if (kick_cap && *kick_cap < 2)
            throw std::invalid_argument("SearchConfig: kick_cap must allow at least one kick pair");
        if (stage2_candidates < 1 || stage2_starts < 1 || stage2_sweeps < 1 || threads < 1)
            throw std::invalid_argument("SearchConfig: counts must be >= 1");
    }
};

struct GateSolution {
    APGSequence sequence;
    GateMetrics metrics;
    Regime regime = Regime::Subsonic;
    SearchConfig config;       // provenance echo
    double cost = std::numeric_limits<double>::infinity();  // eps_av + eps_eps
    double wall_time = 0.0;    // s
    bool stage1_budget_exhausted = false;
};

struct Stage1Candidate {
    std::vector<int> z;   // half-group sizes, signed
    double cost = 0.0;    // eps_av + eps_eps
    double eps_av = 0.0;
    int kick_count = 0;
    long discovery = 0;   // evaluation index of first appearance
};

struct Stage1Result {
    std::vector<Stage1Candidate> candidates;  // ranked best-first
    bool budget_exhausted = false;  // still improving when the budget ran out
    long evals_used = 0;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream + 1));
}

// Stage-1 cost: with every group's kicks coincident at the uniform centers
// t_j = j tau_G / K, the two-qubit phase is the quadratic form z^T G z over
// the half-vector z, and the motional error is sum_a W_a (Sin z)_a^2.
class Stage1Cost {
public:
    Stage1Cost(const ModeStructure& modes, const ThermalState& thermal, int ion_m, int ion_n,
               const SearchConfig& cfg)
        : half_(cfg.group_count / 2), epsilon_pi_(cfg.epsilon_pi) {
        const int n = modes.mode_count();
        const double s = kick_scale(cfg.scheme);
        times_.resize(half_);
        for (int j = 0; j < half_; ++j)
            times_[j] = cfg.gate_time * double(j + 1) / double(cfg.group_count);

        quad_ = Eigen::MatrixXd::Zero(half_, half_);
        sin_table_ = Eigen::MatrixXd::Zero(n, half_);
        weights_ = Eigen::VectorXd::Zero(n);
        for (int a = 0; a < n; ++a) {
            const double w = modes.frequencies[a];
            const double eta = modes.lamb_dicke[a];
            const double bm = modes.couplings(ion_m, a);
            const double bn = modes.couplings(ion_n, a);
            const double phase_w = 2.0 * s * s * eta * eta * bm * bn;
            for (int j = 0; j < half_; ++j) {
                sin_table_(a, j) = std::sin(w * times_[j]);
                quad_(j, j) -= phase_w * std::sin(2.0 * w * times_[j]);
                for (int k = j + 1; k < half_; ++k) {
                    const double coupling = phase_w * (std::sin(w * (times_[k] - times_[j])) -
                                                       std::sin(w * (times_[k] + times_[j])));
                    quad_(j, k) += coupling;
                    quad_(k, j) += coupling;
                }
            }
            weights_(a) = (4.0 / 3.0) * (0.5 + thermal.occupations[a]) * (bm * bm + bn * bn) *
                          4.0 * s * s * eta * eta;
        }
    }

    int dims() const { return half_; }
    const std::vector<double>& uniform_times() const { return times_; }

    double eps_av(const std::vector<int>& z) const {
        Eigen::VectorXd zd(half_);
        for (int j = 0; j < half_; ++j) zd(j) = z[j];
        const double theta = zd.dot(quad_ * zd);
        const double dtheta = std::abs(theta) - std::numbers::pi / 4.0;
        const Eigen::VectorXd s = sin_table_ * zd;
        return (2.0 / 3.0) * dtheta * dtheta + s.cwiseAbs2().dot(weights_);
    }

    double cost(const std::vector<int>& z) const {
        int kicks = 0;
        for (int v : z) kicks += std::abs(v);
        return eps_av(z) * (1.0 + 2.0 * epsilon_pi_ * kicks);
    }

private:
    int half_;
    double epsilon_pi_;
    std::vector<double> times_;
    Eigen::MatrixXd quad_;       // half x half
    Eigen::MatrixXd sin_table_;  // modes x half
    Eigen::VectorXd weights_;
};

// Clip sum|z| to the cap by shaving the largest-magnitude entries first.
inline void project_kick_cap(std::vector<int>& z, int half_cap) {
    int total = 0;
    for (int v : z) total += std::abs(v);
    while (total > half_cap) {
        int best = 0;
        for (size_t j = 1; j < z.size(); ++j)
            if (std::abs(z[j]) > std::abs(z[best])) best = static_cast<int>(j);
        z[best] += z[best] > 0 ? -1 : 1;
        --total;
    }
}

inline int kick_count_of(const std::vector<int>& z) {
    int n = 0;
    for (int v : z) n += std::abs(v);
    return 2 * n;
}

// Ranking order: cheaper cost, then fewer kicks, then earlier discovery.
inline bool candidate_before(const Stage1Candidate& a, const Stage1Candidate& b) {
    if (a.cost != b.cost) return a.cost < b.cost;
    if (a.kick_count != b.kick_count) return a.kick_count < b.kick_count;
    return a.discovery < b.discovery;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage 1: global integer search (differential-evolution recombination on
// the integer lattice with a greedy +-1 polish of the incumbent).

inline Stage1Result stage1_global(const ModeStructure& modes, const ThermalState& thermal,
                                  int ion_m, int ion_n, const SearchConfig& cfg) {
    cfg.validate();
    const detail::Stage1Cost evaluator(modes, thermal, ion_m, ion_n, cfg);
    const int dims = evaluator.dims();
    const int half_cap = cfg.kick_cap ? *cfg.kick_cap / 2 : dims * cfg.z_max;
    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<int> z_dist(-cfg.z_max, cfg.z_max);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    long evals = 0;
    long last_improvement = 0;
    std::vector<Stage1Candidate> archive;  // ranked, distinct, size <= M

    auto archive_add = [&](const std::vector<int>& z, double cost) {
        Stage1Candidate cand{z, cost, 0.0, detail::kick_count_of(z), evals};
        const size_t max_keep = static_cast<size_t>(std::max(cfg.stage2_candidates, 1));
        for (const auto& c : archive)
            if (c.z == z) return;
        if (!archive.empty() && detail::candidate_before(cand, archive.front()))
            last_improvement = evals;
        archive.push_back(std::move(cand));
        std::sort(archive.begin(), archive.end(), detail::candidate_before);
        if (archive.size() > max_keep) archive.resize(max_keep);
    };

    auto evaluate = [&](const std::vector<int>& z) {
        ++evals;
        const double c = evaluator.cost(z);
        const double worst =
            archive.size() < static_cast<size_t>(cfg.stage2_candidates)
                ? std::numeric_limits<double>::infinity()
                : archive.back().cost;
        if (c <= worst) archive_add(z, c);
        return c;
    };

    const int pop_size = std::min<long>(std::max(24, 4 * dims), cfg.eval_budget / 4);
    std::vector<std::vector<int>> pop(pop_size);
    std::vector<double> pop_cost(pop_size);
    // the all-zero sequence anchors the archive at the do-nothing cost
    pop[0].assign(dims, 0);
    pop_cost[0] = evaluate(pop[0]);
    for (int i = 1; i < pop_size; ++i) {
        pop[i].resize(dims);
        for (int d = 0; d < dims; ++d) pop[i][d] = z_dist(rng);
        detail::project_kick_cap(pop[i], half_cap);
        pop_cost[i] = evaluate(pop[i]);
    }

    std::vector<int> trial(dims);
    int generation = 0;
    while (evals < cfg.eval_budget) {
        for (int i = 0; i < pop_size && evals < cfg.eval_budget; ++i) {
            int a, b, c;
            do { a = static_cast<int>(rng() % pop_size); } while (a == i);
            do { b = static_cast<int>(rng() % pop_size); } while (b == i || b == a);
            do { c = static_cast<int>(rng() % pop_size); } while (c == i || c == a || c == b);
            const double f = 0.4 + 0.5 * unit(rng);
            const int j_rand = static_cast<int>(rng() % dims);
            for (int d = 0; d < dims; ++d) {
                if (d == j_rand || unit(rng) < 0.85) {
                    const double v = pop[a][d] + f * (pop[b][d] - pop[c][d]);
                    trial[d] = std::clamp(static_cast<int>(std::lround(v)), -cfg.z_max, cfg.z_max);
                } else {
                    trial[d] = pop[i][d];
                }
            }
            // occasional single-site jolt keeps the lattice search lively
            if (unit(rng) < 0.15) {
                const int d = static_cast<int>(rng() % dims);
                trial[d] = std::clamp(trial[d] + (rng() & 1 ? 1 : -1), -cfg.z_max, cfg.z_max);
            }
            detail::project_kick_cap(trial, half_cap);
            const double trial_cost = evaluate(trial);
            if (trial_cost <= pop_cost[i]) {
                pop[i] = trial;
                pop_cost[i] = trial_cost;
            }
        }

        // Greedy +-1 polish of the incumbent every few generations.
        if (++generation % 6 == 0 && !archive.empty()) {
            std::vector<int> best = archive.front().z;
            double best_cost = archive.front().cost;
            bool improved = true;
            while (improved && evals < cfg.eval_budget) {
                improved = false;
                for (int d = 0; d < dims && evals < cfg.eval_budget; ++d) {
                    for (int step : {1, -1}) {
                        std::vector<int> probe = best;
                        probe[d] = std::clamp(probe[d] + step, -cfg.z_max, cfg.z_max);
                        if (probe[d] == best[d]) continue;
                        detail::project_kick_cap(probe, half_cap);
                        const double pc = evaluate(probe);
                        if (pc < best_cost) {
                            best = std::move(probe);
                            best_cost = pc;
                            improved = true;
                        }
                    }
                }
            }
            // replace the worst population member with the polished incumbent
            int worst = 0;
            for (int i = 1; i < pop_size; ++i)
                if (pop_cost[i] > pop_cost[worst]) worst = i;
            pop[worst] = best;
            pop_cost[worst] = best_cost;
        }
    }

    Stage1Result result;
    for (auto& cand : archive) {
        cand.eps_av = evaluator.eps_av(cand.z);
        result.candidates.push_back(cand);
    }
    result.evals_used = evals;
    result.budget_exhausted = (cfg.eval_budget - last_improvement) < cfg.eval_budget / 5;
    return result;
}

// ---------------------------------------------------------------------------
// Stage 2: timing refinement at the finite repetition rate.

namespace detail {

struct TimingProblem {
    std::vector<int> z;          // nonzero half-group sizes
    std::vector<double> lo_gap;  // minimal center gap to the previous group
    double lo_first = 0.0;       // minimal first center (mirror clearance)
    double hi_last = 0.0;        // maximal last center
    double spacing = 0.0;        // 1/f_rep (0 when unbounded)
    double grid_delta = 0.0;     // > 0 in grid mode
    std::vector<double> grid_rho;  // per-group grid offset (0 or 1/2)
};

inline TimingProblem make_timing_problem(const std::vector<int>& z_full,
                                         const SearchConfig& cfg) {
    TimingProblem p;
    for (int v : z_full)
        if (v != 0) p.z.push_back(v);
    const double dt = cfg.f_rep ? 1.0 / *cfg.f_rep : 0.0;
    p.spacing = dt;
    const double eps_gap = 1e-9 * cfg.gate_time;
    const int kp = static_cast<int>(p.z.size());
    p.lo_gap.assign(kp, 0.0);
    for (int j = 1; j < kp; ++j)
        p.lo_gap[j] = std::max(eps_gap, 0.5 * (std::abs(p.z[j - 1]) + std::abs(p.z[j])) * dt);
    p.lo_first = std::max(eps_gap, 0.5 * std::abs(p.z.empty() ? 0 : p.z[0]) * dt);
    p.hi_last = 0.5 * cfg.gate_time;
    if (kp > 0) p.hi_last -= 0.5 * (std::abs(p.z.back()) - 1) * dt;
    if (cfg.grid_mode) {
        p.grid_delta = dt;
        p.grid_rho.resize(kp);
        for (int j = 0; j < kp; ++j) p.grid_rho[j] = std::abs(p.z[j]) % 2 == 1 ? 0.0 : 0.5;
    }
    return p;
}

// Push the centers into the feasible polytope; returns false if the groups
// simply do not fit in the half-gate window.
inline bool repair_timings(const TimingProblem& p, std::vector<double>& t) {
    const int kp = static_cast<int>(t.size());
    if (kp == 0) return true;
    const double pad = 1.0 + 1e-12;
    t[0] = std::max(t[0], p.lo_first * pad);
    for (int j = 1; j < kp; ++j) t[j] = std::max(t[j], t[j - 1] + p.lo_gap[j] * pad);
    if (t[kp - 1] > p.hi_last) {
        t[kp - 1] = p.hi_last;
        for (int j = kp - 2; j >= 0; --j) t[j] = std::min(t[j], t[j + 1] - p.lo_gap[j + 1] * pad);
        if (t[0] < p.lo_first) return false;
    }
    if (p.grid_delta > 0.0) {
        // Re-run the separation on the integer lattice: group j sits at
        // (n_j + rho_j) delta, gaps and bounds become integer constraints.
        const double inv = 1.0 / p.grid_delta;
        std::vector<long> n(kp), gap(kp, 0);
        for (int j = 0; j < kp; ++j) n[j] = std::lround(t[j] * inv - p.grid_rho[j]);
        for (int j = 1; j < kp; ++j)
            gap[j] = static_cast<long>(
                std::ceil(p.lo_gap[j] * inv - (p.grid_rho[j] - p.grid_rho[j - 1]) - 1e-9));
        const long n_first =
            static_cast<long>(std::ceil(p.lo_first * inv - p.grid_rho[0] - 1e-9));
        const long n_last_max =
            static_cast<long>(std::floor(p.hi_last * inv - p.grid_rho[kp - 1] + 1e-9));
        n[0] = std::max(n[0], n_first);
        for (int j = 1; j < kp; ++j) n[j] = std::max(n[j], n[j - 1] + gap[j]);
        if (n[kp - 1] > n_last_max) {
            n[kp - 1] = n_last_max;
            for (int j = kp - 2; j >= 0; --j) n[j] = std::min(n[j], n[j + 1] - gap[j + 1]);
            if (n[0] < n_first) return false;
        }
        for (int j = 0; j < kp; ++j) t[j] = (n[j] + p.grid_rho[j]) * p.grid_delta;
    }
    return true;
}

inline APGSequence sequence_from(const TimingProblem& p, const std::vector<double>& t,
                                 const SearchConfig& cfg) {
    APGSequence seq;
    seq.scheme = cfg.scheme;
    seq.f_rep = cfg.f_rep;
    for (size_t j = 0; j < p.z.size(); ++j) seq.half_groups.push_back({p.z[j], t[j]});
    return seq;
}

class Stage2Cost {
public:
    Stage2Cost(const TimingProblem& p, const ModeStructure& modes, const ThermalState& thermal,
               int ion_m, int ion_n, const SearchConfig& cfg)
        : problem_(p), modes_(modes), thermal_(thermal), ion_m_(ion_m), ion_n_(ion_n),
          cfg_(cfg) {
        int kicks = 0;
        for (int v : p.z) kicks += std::abs(v);
        cost_factor_ = 1.0 + 2.0 * cfg.epsilon_pi * kicks;

        const int n = modes.mode_count();
        res_weights_.resize(n);
        const double s = kick_scale(cfg.scheme);
        for (int a = 0; a < n; ++a) {
            const double eta = modes.lamb_dicke[a];
            const double bm = modes.couplings(ion_m, a);
            const double bn = modes.couplings(ion_n, a);
            res_weights_[a] = std::sqrt((4.0 / 3.0) * (0.5 + thermal.occupations[a]) *
                                        (bm * bm + bn * bn)) *
                              2.0 * s * eta;
        }
    }

    double eps_av(const std::vector<double>& t) const {
        const APGSequence seq = sequence_from(problem_, t, cfg_);
        const FlatKicks kicks = detail::expand_impl(seq, false);
        const double theta = entangling_phase(kicks, modes_, ion_m_, ion_n_);
        const auto disp = residual_displacement(kicks, modes_);
        return gate_error(theta, disp, modes_, thermal_, ion_m_, ion_n_);
    }

    double cost(const std::vector<double>& t) const { return eps_av(t) * cost_factor_; }
    double cost_factor() const { return cost_factor_; }

    // The error is a sum of squares: r_0 = sqrt(2/3) (|Theta| - pi/4) and
    // r_a = sqrt(W_a) S_a with S_a the surviving quadrature of mode a.
    // Residual form drives the Levenberg-Marquardt polish.
    void residuals(const std::vector<double>& t, Eigen::VectorXd& r) const {
        const APGSequence seq = sequence_from(problem_, t, cfg_);
        const FlatKicks kicks = detail::expand_impl(seq, false);
        const double theta = entangling_phase(kicks, modes_, ion_m_, ion_n_);
        const int n = modes_.mode_count();
        r.resize(n + 1);
        r(0) = std::sqrt(2.0 / 3.0) * (std::abs(theta) - std::numbers::pi / 4.0);
        const size_t half = kicks.size() / 2;
        for (int a = 0; a < n; ++a) {
            const double w = modes_.frequencies[a];
            double s_alpha = 0.0;
            for (size_t i = half; i < kicks.size(); ++i)
                s_alpha += kicks.effective_signs[i] * std::sin(w * kicks.times[i]);
            r(a + 1) = res_weights_[a] * s_alpha;
        }
    }

    // Residuals plus the analytic Jacobian with respect to the group
    // centers.  Every kick of positive-half group j moves with velocity +1
    // and its mirror image with velocity -1; the pair-sum derivative folds
    // into per-kick forward/backward complex prefixes, so the whole
    // Jacobian costs about one extra residual evaluation.
    void residuals_and_jacobian(const std::vector<double>& t, Eigen::VectorXd& r,
                                Eigen::MatrixXd& jac) const {
        const APGSequence seq = sequence_from(problem_, t, cfg_);
        const FlatKicks kicks = detail::expand_impl(seq, false);
        const int n = modes_.mode_count();
        const int kp = static_cast<int>(t.size());
        const size_t total = kicks.size();
        const size_t half = total / 2;
        r.resize(n + 1);
        jac.setZero(n + 1, kp);

        // positive-half kick index ranges per group
        std::vector<size_t> group_begin(kp + 1, 0);
        for (int j = 0; j < kp; ++j)
            group_begin[j + 1] = group_begin[j] + std::abs(problem_.z[j]);

        const double s = kick_scale(cfg_.scheme);
        double theta = 0.0;
        Eigen::VectorXd dtheta = Eigen::VectorXd::Zero(kp);
        std::vector<std::complex<double>> phases(total);
        std::vector<double> dpair(total);  // omega-scaled F_i - G_i per kick

        for (int a = 0; a < n; ++a) {
            const double w = modes_.frequencies[a];
            const double eta = modes_.lamb_dicke[a];
            const double phase_w =
                2.0 * s * s * eta * eta * modes_.couplings(ion_m_, a) * modes_.couplings(ion_n_, a);

            for (size_t i = 0; i < total; ++i)
                phases[i] = double(kicks.effective_signs[i]) * std::polar(1.0, w * kicks.times[i]);

            // forward pass: pair sum and the "later element" sensitivities F_i
            std::complex<double> prefix = 0.0;
            double pair_sum = 0.0;
            for (size_t i = 0; i < total; ++i) {
                const std::complex<double> cross = phases[i] * std::conj(prefix);
                pair_sum += cross.imag();
                dpair[i] = cross.real();
                prefix += phases[i];
            }
            // backward pass: earlier-element sensitivities G_i
            std::complex<double> suffix = 0.0;
            for (size_t i = total; i-- > 0;) {
                dpair[i] -= (std::conj(phases[i]) * suffix).real();
                suffix += phases[i];
            }
            theta += phase_w * pair_sum;

            double s_alpha = 0.0;
            double ds_alpha;
            for (int j = 0; j < kp; ++j) {
                double acc = 0.0;
                ds_alpha = 0.0;
                for (size_t p = group_begin[j]; p < group_begin[j + 1]; ++p) {
                    const size_t pos = half + p;       // positive-half kick
                    const size_t neg = half - 1 - p;   // its mirror image
                    acc += dpair[pos] - dpair[neg];
                    s_alpha += kicks.effective_signs[pos] * std::sin(w * kicks.times[pos]);
                    ds_alpha += kicks.effective_signs[pos] * std::cos(w * kicks.times[pos]);
                }
                dtheta(j) += phase_w * w * acc;
                jac(a + 1, j) = res_weights_[a] * w * ds_alpha;
            }
            r(a + 1) = res_weights_[a] * s_alpha;
        }

        const double sign = theta >= 0.0 ? 1.0 : -1.0;
        r(0) = std::sqrt(2.0 / 3.0) * (std::abs(theta) - std::numbers::pi / 4.0);
        jac.row(0) = std::sqrt(2.0 / 3.0) * sign * dtheta.transpose();
    }

private:
    const TimingProblem& problem_;
    const ModeStructure& modes_;
    const ThermalState& thermal_;
    int ion_m_, ion_n_;
    const SearchConfig& cfg_;
    double cost_factor_;
    std::vector<double> res_weights_;
};

// One coordinate-descent pass: each center scans its feasible interval
// (coarse grid + local shrink, or the integer lattice in grid mode) and
// keeps any improvement.  Monotone by construction.
inline bool descend_once(const TimingProblem& p, const Stage2Cost& evaluator,
                         std::vector<double>& t, double& best) {
    const int kp = static_cast<int>(t.size());
    bool improved = false;
    for (int j = 0; j < kp; ++j) {
        const double pad = 1.0 + 1e-12;
        const double lo = (j == 0 ? p.lo_first * pad : t[j - 1] + p.lo_gap[j] * pad);
        const double hi = (j == kp - 1 ? p.hi_last : t[j + 1] - p.lo_gap[j + 1] * pad);
        if (!(hi > lo)) continue;

        double cand_t = t[j];
        double cand_cost = best;
        auto consider = [&](double v) {
            if (v < lo || v > hi) return;
            const double old = t[j];
            t[j] = v;
            const double c = evaluator.cost(t);
            t[j] = old;
            if (c < cand_cost) {
                cand_cost = c;
                cand_t = v;
            }
        };

        if (p.grid_delta > 0.0) {
            const double rho = p.grid_rho[j];
            const long n_lo = static_cast<long>(std::ceil(lo / p.grid_delta - rho - 1e-9));
            const long n_hi = static_cast<long>(std::floor(hi / p.grid_delta - rho + 1e-9));
            const long count = n_hi - n_lo + 1;
            if (count <= 0) continue;
            const long stride = std::max<long>(1, count / 48);
            for (long n = n_lo; n <= n_hi; n += stride) consider((n + rho) * p.grid_delta);
            const long n_best = std::lround(cand_t / p.grid_delta - rho);
            for (long d = 1; d < stride; ++d) {
                consider((n_best + d + rho) * p.grid_delta);
                consider((n_best - d + rho) * p.grid_delta);
            }
        } else {
            const int coarse = 24;
            for (int i = 0; i <= coarse; ++i)
                consider(lo + (hi - lo) * double(i) / double(coarse));
            double h = (hi - lo) / double(coarse);
            for (int round = 0; round < 10 && h > 1e-7 * (hi - lo); ++round) {
                h *= 0.5;
                consider(cand_t + h);
                consider(cand_t - h);
            }
        }

        if (cand_cost < best) {
            t[j] = cand_t;
            best = cand_cost;
            improved = true;
        }
    }
    return improved;
}

// Levenberg-Marquardt polish on the residual form (analytic Jacobian,
// trust damping, feasibility projection of every step, accepted on
// improvement only).  Zeroes the motional residuals far more effectively
// than coordinate moves once the basin is right.
inline bool lm_refine(const TimingProblem& p, const Stage2Cost& evaluator,
                      std::vector<double>& t, double& cost, int max_iter) {
    const int kp = static_cast<int>(t.size());
    if (kp == 0) return false;
    Eigen::VectorXd r, r_trial;
    Eigen::MatrixXd jac;
    evaluator.residuals_and_jacobian(t, r, jac);
    double sse = r.squaredNorm();
    const double factor = evaluator.cost_factor();
    double lambda = 1e-3;
    bool any = false;

    for (int iter = 0; iter < max_iter; ++iter) {
        const Eigen::MatrixXd jtj = jac.transpose() * jac;
        const Eigen::VectorXd grad = jac.transpose() * r;

        bool stepped = false;
        for (int tries = 0; tries < 8; ++tries) {
            Eigen::MatrixXd a = jtj;
            a.diagonal() += lambda * jtj.diagonal().cwiseMax(1e-30);
            const Eigen::VectorXd delta = a.ldlt().solve(-grad);
            if (!delta.allFinite()) {
                lambda *= 4.0;
                continue;
            }
            std::vector<double> trial = t;
            for (int j = 0; j < kp; ++j) trial[j] += delta(j);
            if (!repair_timings(p, trial)) {
                lambda *= 4.0;
                continue;
            }
            evaluator.residuals(trial, r_trial);
            const double sse_trial = r_trial.squaredNorm();
            if (sse_trial < sse) {
                const double gain = sse - sse_trial;
                t = std::move(trial);
                sse = sse_trial;
                lambda = std::max(lambda / 3.0, 1e-12);
                stepped = true;
                any = true;
                if (gain < 1e-8 * sse) iter = max_iter;  // stalled
                break;
            }
            lambda *= 4.0;
        }
        if (!stepped || sse * factor < 1e-18) break;
        evaluator.residuals_and_jacobian(t, r, jac);
        sse = r.squaredNorm();
    }
    cost = sse * factor;
    return any;
}

}  // namespace detail

// Refine the group centers of one stage-1 vector.  initial_t, when given,
// overrides the uniform-timing initializer (it is repaired into the
// feasible set first).  Deterministic given cfg.seed.
inline GateSolution stage2_local(const std::vector<int>& z_half, const ModeStructure& modes,
                                 const ThermalState& thermal, int ion_m, int ion_n,
                                 const SearchConfig& cfg,
                                 std::optional<std::vector<double>> initial_t = std::nullopt) {
    cfg.validate();
    const auto t_start = std::chrono::steady_clock::now();
    const detail::TimingProblem problem = detail::make_timing_problem(z_half, cfg);
    const detail::Stage2Cost evaluator(problem, modes, thermal, ion_m, ion_n, cfg);
    const int kp = static_cast<int>(problem.z.size());

    // Default initializer: the stage-1 uniform centers of the surviving groups.
    std::vector<double> t0;
    if (initial_t) {
        if (static_cast<int>(initial_t->size()) != kp)
            throw std::invalid_argument("stage2_local: initial timing size mismatch");
        t0 = *initial_t;
    } else {
        for (size_t j = 0; j < z_half.size(); ++j) {
            if (z_half[j] == 0) continue;
            t0.push_back(cfg.gate_time * double(j + 1) / double(cfg.group_count));
        }
    }
    if (!detail::repair_timings(problem, t0))
        throw std::runtime_error("stage2_local: groups do not fit in the gate window "
                                 "(overlapping expansion)");

    std::mt19937_64 rng(detail::mix_seed(cfg.seed, 0xdecaf));
    std::uniform_real_distribution<double> unit(-1.0, 1.0);

    // Improving moves only, so the final cost never exceeds the expanded
    // initializer's cost.
    std::vector<double> best_t = t0;
    double best_cost = evaluator.cost(t0);

    auto descend_rounds = [&](std::vector<double>& t, double& cost, int rounds) {
        for (int round = 0; round < rounds; ++round) {
            bool moved = false;
            for (int sweep = 0; sweep < cfg.stage2_sweeps; ++sweep) {
                const double before = cost;
                if (!detail::descend_once(problem, evaluator, t, cost)) break;
                moved = true;
                if (before - cost < 1e-4 * cost) break;
            }
            if (!cfg.grid_mode) moved |= detail::lm_refine(problem, evaluator, t, cost, 150);
            if (!moved) break;
        }
    };

    // Thorough pass from the provided / uniform initializer.
    {
        std::vector<double> t = t0;
        double cost = best_cost;
        descend_rounds(t, cost, 3);
        if (cost < best_cost) {
            best_cost = cost;
            best_t = t;
        }
    }

    // Cheap diversified restarts: jittered and fully random feasible
    // timings, refined by the damped least-squares polish alone and
    // escalated to full rounds only when competitive.
    for (int start = 1; start < cfg.stage2_starts && kp > 0; ++start) {
        std::vector<double> t(kp);
        if (start % 2 == 1) {
            const double slot = cfg.gate_time / cfg.group_count;
            t = t0;
            for (auto& v : t) v += 0.45 * slot * unit(rng);
        } else {
            for (auto& v : t)
                v = problem.lo_first +
                    (0.5 + 0.5 * unit(rng)) * (problem.hi_last - problem.lo_first);
            std::sort(t.begin(), t.end());
        }
        if (!detail::repair_timings(problem, t)) continue;
        double cost = evaluator.cost(t);
        if (cfg.grid_mode) {
            descend_rounds(t, cost, 2);
        } else {
            detail::lm_refine(problem, evaluator, t, cost, 150);
            if (cost < 4.0 * best_cost) descend_rounds(t, cost, 2);
        }
        if (cost < best_cost) {
            best_cost = cost;
            best_t = t;
        }
    }

    GateSolution sol;
    sol.sequence = detail::sequence_from(problem, best_t, cfg);
    sol.config = cfg;
    sol.metrics = evaluate_gate(sol.sequence, modes, thermal, ion_m, ion_n, cfg.epsilon_pi);
    sol.cost = sol.metrics.epsilon_av + sol.metrics.sdk_cost;
    sol.regime = classify_regime(cfg.gate_time, modes);
    sol.wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return sol;
}

namespace detail {

inline bool solution_before(const GateSolution& a, const GateSolution& b) {
    if (a.cost != b.cost) return a.cost < b.cost;
    return a.metrics.kick_count < b.metrics.kick_count;
}

// Run fn(unit) for unit in [0, n) over the requested worker count and fold
// the results with the deterministic order relation, so the outcome is
// independent of scheduling.
template <typename Fn>
inline std::optional<GateSolution> best_over_units(int n, int threads, Fn&& fn) {
    std::vector<std::optional<GateSolution>> results(n);
    if (threads <= 1 || n <= 1) {
        for (int u = 0; u < n; ++u) results[u] = fn(u);
    } else {
        std::atomic<int> next{0};
        auto worker = [&] {
            for (int u = next.fetch_add(1); u < n; u = next.fetch_add(1)) results[u] = fn(u);
        };
        std::vector<std::thread> pool;
        const int count = std::min(threads, n);
        pool.reserve(count);
        for (int i = 0; i < count; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    std::optional<GateSolution> best;
    for (auto& r : results)
        if (r && (!best || solution_before(*r, *best))) best = std::move(r);
    return best;
}

}  // namespace detail

// Full pipeline: stage-1 search, promotion of the top candidates, stage-2
// refinement, best-of-restarts.  Deterministic given the config (restart
// outcomes are folded in index order, never scheduling order).
inline GateSolution design_gate(const ModeStructure& modes, const ThermalState& thermal,
                                int ion_m, int ion_n, const SearchConfig& cfg) {
    cfg.validate();
    const auto t_begin = std::chrono::steady_clock::now();

    auto run_restart = [&](int r) -> std::optional<GateSolution> {
        SearchConfig sub = cfg;
        sub.seed = detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(r));
        const Stage1Result s1 = stage1_global(modes, thermal, ion_m, ion_n, sub);
        std::optional<GateSolution> best;
        for (const auto& cand : s1.candidates) {
            try {
                GateSolution sol = stage2_local(cand.z, modes, thermal, ion_m, ion_n, sub);
                sol.stage1_budget_exhausted = s1.budget_exhausted;
                if (!best || detail::solution_before(sol, *best)) best = std::move(sol);
            } catch (const std::exception&) {
                // infeasible expansion for this candidate; keep scanning
            }
        }
        return best;
    };

    auto best = detail::best_over_units(cfg.restarts, cfg.threads, run_restart);
    if (!best)
        throw std::runtime_error("design_gate: no feasible solution found in any restart");
    best->config = cfg;
    best->wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
    return best.value();
}

// ---------------------------------------------------------------------------
// Sweep over (gate time, kick cap) cells, one best solution per cell.
// Within a gate time, cells run in ascending cap order and each cell warm
// starts from the previous cell's winner (still feasible under the larger
// cap), which makes the best-found error monotone in the cap.

struct ParetoCell {
    double gate_time = 0.0;
    std::optional<int> kick_cap;
    std::optional<GateSolution> solution;
    std::string error;
};

inline std::vector<ParetoCell> pareto_scan(const ModeStructure& modes,
                                           const ThermalState& thermal, int ion_m, int ion_n,
                                           std::vector<double> gate_times,
                                           std::vector<std::optional<int>> kick_caps,
                                           const SearchConfig& base_cfg) {
    if (gate_times.empty() || kick_caps.empty())
        throw std::invalid_argument("pareto_scan: empty scan lists");
    std::sort(kick_caps.begin(), kick_caps.end(),
              [](const std::optional<int>& a, const std::optional<int>& b) {
                  if (a && b) return *a < *b;
                  return a.has_value() && !b.has_value();  // capped before uncapped
              });

    std::vector<ParetoCell> table;
    std::uint64_t cell_index = 0;
    for (double tau : gate_times) {
        std::optional<GateSolution> carry;
        for (const auto& cap : kick_caps) {
            ParetoCell cell;
            cell.gate_time = tau;
            cell.kick_cap = cap;
            SearchConfig cfg = base_cfg;
            cfg.gate_time = tau;
            cfg.kick_cap = cap;
            cfg.seed = detail::mix_seed(base_cfg.seed, 0xce11 + cell_index);
            try {
                GateSolution sol = design_gate(modes, thermal, ion_m, ion_n, cfg);
                if (carry) {
                    // re-refine the smaller-cap winner under this config
                    std::vector<int> z;
                    for (const auto& g : carry->sequence.half_groups) z.push_back(g.z);
                    std::vector<double> t;
                    for (const auto& g : carry->sequence.half_groups) t.push_back(g.time);
                    try {
                        GateSolution warm =
                            stage2_local(z, modes, thermal, ion_m, ion_n, cfg, t);
                        if (detail::solution_before(warm, sol)) sol = std::move(warm);
                    } catch (const std::exception&) {
                    }
                }
                carry = sol;
                cell.solution = std::move(sol);
            } catch (const std::exception& e) {
                cell.error = e.what();
            }
            table.push_back(std::move(cell));
            ++cell_index;
        }
    }
    return table;
}

}  // namespace fastgate
