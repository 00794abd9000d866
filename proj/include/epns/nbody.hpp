#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "epns/rng.hpp"

namespace epns {

using Vec3 = std::array<double, 3>;

struct BodyState {
    std::vector<double> masses;  // [n], strictly positive
    std::vector<Vec3> positions; // [n]
    std::vector<Vec3> velocities;

    int n() const { return static_cast<int>(masses.size()); }
    bool finite() const;
};

struct NBodyConfig {
    int n = 5;
    double grav_const = 1.0;
    double softening = 0.1;
    double noise_scale = 0.05; // sigma_f, additive forcing noise
    double dt = 0.01;
    int steps_per_frame = 10;  // model step = steps_per_frame * dt = 0.1
    int frames = 100;
    std::uint64_t seed = 1;

    // initial condition law
    double mass_lo = 0.5, mass_hi = 2.0;
    double ball_radius = 4.0;
    double min_separation = 0.5;
    double velocity_jitter = 0.1;

    double energy_jump_limit = 20.0; // trajectory quality filter
};

struct NBodyTrajectory {
    std::vector<BodyState> frames; // frames+1 states including x^0
    double frame_interval = 0.1;
    std::uint64_t seed = 0;
};

// a_i = sum_j G m_j (p_j - p_i) / (|p_j - p_i|^2 + eps^2)^(3/2)
std::vector<Vec3> pairwise_acceleration(const BodyState& state, const NBodyConfig& cfg);

// Euler-Maruyama with a semi-implicit (kick-then-drift) deterministic part:
// v += a(p) dt + sigma_f sqrt(dt) xi;  p += v_new dt.
BodyState euler_maruyama_step(const BodyState& state, const NBodyConfig& cfg, Rng& rng);
// Same update with the noise draws supplied by the caller (one xi per body).
BodyState euler_maruyama_step_with_noise(const BodyState& state, const NBodyConfig& cfg,
                                         const std::vector<Vec3>& xi);

double kinetic_energy(const BodyState& state);
double potential_energy(const BodyState& state, const NBodyConfig& cfg);
double total_energy(const BodyState& state, const NBodyConfig& cfg);

// Bound configuration: log-uniform masses, positions in a ball with minimum
// separation, near-circular velocities about the barycenter, momentum centered,
// resampled until the total energy is negative. Throws after 1000 attempts.
BodyState sample_initial_condition(const NBodyConfig& cfg, Rng& rng);

// Integrates frames*steps_per_frame steps, storing every steps_per_frame-th
// state. Trajectories whose stored-frame total energy jumps by more than
// energy_jump_limit are rejected and regenerated from a fresh initial
// condition; throws after 100 consecutive rejections.
NBodyTrajectory generate_trajectory(const NBodyConfig& cfg, Rng& rng);
// Trajectory from a fixed initial state (no quality filter retry on x0 itself).
NBodyTrajectory generate_trajectory_from(const BodyState& x0, const NBodyConfig& cfg, Rng& rng);

double max_energy_jump(const NBodyTrajectory& traj, const NBodyConfig& cfg);

} // namespace epns
