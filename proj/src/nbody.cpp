#include "epns/nbody.hpp"

#include <cmath>
#include <stdexcept>

namespace epns {

namespace {

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
double norm(const Vec3& a) { return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]); }

} // namespace

bool BodyState::finite() const {
    for (double m : masses)
        if (!(m > 0.0) || !std::isfinite(m)) return false;
    for (const auto& p : positions)
        for (double v : p)
            if (!std::isfinite(v)) return false;
    for (const auto& p : velocities)
        for (double v : p)
            if (!std::isfinite(v)) return false;
    return true;
}

std::vector<Vec3> pairwise_acceleration(const BodyState& state, const NBodyConfig& cfg) {
    const int n = state.n();
    const double eps2 = cfg.softening * cfg.softening;
    std::vector<Vec3> acc(static_cast<std::size_t>(n), Vec3{0.0, 0.0, 0.0});
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            const Vec3 d = sub(state.positions[static_cast<std::size_t>(j)], state.positions[static_cast<std::size_t>(i)]);
            const double r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + eps2;
            const double inv_r3 = 1.0 / (r2 * std::sqrt(r2));
            const double s = cfg.grav_const * state.masses[static_cast<std::size_t>(j)] * inv_r3;
            acc[static_cast<std::size_t>(i)][0] += s * d[0];
            acc[static_cast<std::size_t>(i)][1] += s * d[1];
            acc[static_cast<std::size_t>(i)][2] += s * d[2];
        }
    }
    return acc;
}

BodyState euler_maruyama_step_with_noise(const BodyState& state, const NBodyConfig& cfg,
                                         const std::vector<Vec3>& xi) {
    const int n = state.n();
    if (static_cast<int>(xi.size()) != n) throw std::invalid_argument("noise count does not match body count");
    const auto acc = pairwise_acceleration(state, cfg);
    const double noise_amp = cfg.noise_scale * std::sqrt(cfg.dt);
    BodyState out = state;
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < 3; ++k) {
            out.velocities[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] +=
                acc[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] * cfg.dt +
                noise_amp * xi[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
            out.positions[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] +=
                out.velocities[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] * cfg.dt;
        }
    }
    return out;
}

BodyState euler_maruyama_step(const BodyState& state, const NBodyConfig& cfg, Rng& rng) {
    std::vector<Vec3> xi(static_cast<std::size_t>(state.n()));
    for (auto& x : xi)
        for (auto& v : x) v = rng.normal();
    return euler_maruyama_step_with_noise(state, cfg, xi);
}

double kinetic_energy(const BodyState& state) {
    double ke = 0.0;
    for (int i = 0; i < state.n(); ++i) {
        const auto& v = state.velocities[static_cast<std::size_t>(i)];
        ke += 0.5 * state.masses[static_cast<std::size_t>(i)] * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    }
    return ke;
}

double potential_energy(const BodyState& state, const NBodyConfig& cfg) {
    const double eps2 = cfg.softening * cfg.softening;
    double pe = 0.0;
    for (int i = 0; i < state.n(); ++i)
        for (int j = i + 1; j < state.n(); ++j) {
            const Vec3 d = sub(state.positions[static_cast<std::size_t>(i)], state.positions[static_cast<std::size_t>(j)]);
            const double r = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + eps2);
            pe -= cfg.grav_const * state.masses[static_cast<std::size_t>(i)] * state.masses[static_cast<std::size_t>(j)] / r;
        }
    return pe;
}

double total_energy(const BodyState& state, const NBodyConfig& cfg) {
    return kinetic_energy(state) + potential_energy(state, cfg);
}

BodyState sample_initial_condition(const NBodyConfig& cfg, Rng& rng) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
        BodyState s;
        s.masses.resize(static_cast<std::size_t>(cfg.n));
        for (auto& m : s.masses)
            m = std::exp(rng.uniform(std::log(cfg.mass_lo), std::log(cfg.mass_hi)));

        // positions uniform in a ball, rejecting overlaps closer than min_separation
        s.positions.clear();
        bool placed_all = true;
        for (int i = 0; i < cfg.n; ++i) {
            bool ok = false;
            for (int tries = 0; tries < 200 && !ok; ++tries) {
                Vec3 p;
                do {
                    for (auto& c : p) c = rng.uniform(-cfg.ball_radius, cfg.ball_radius);
                } while (norm(p) > cfg.ball_radius);
                ok = true;
                for (const auto& q : s.positions)
                    if (norm(sub(p, q)) < cfg.min_separation) {
                        ok = false;
                        break;
                    }
                if (ok) s.positions.push_back(p);
            }
            if (!ok) {
                placed_all = false;
                break;
            }
        }
        if (!placed_all) continue;

        // near-circular velocity about the barycenter plus relative jitter
        double mtot = 0.0;
        Vec3 bary{0, 0, 0};
        for (int i = 0; i < cfg.n; ++i) {
            mtot += s.masses[static_cast<std::size_t>(i)];
            for (int k = 0; k < 3; ++k)
                bary[static_cast<std::size_t>(k)] +=
                    s.masses[static_cast<std::size_t>(i)] * s.positions[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
        }
        for (auto& c : bary) c /= mtot;

        s.velocities.resize(static_cast<std::size_t>(cfg.n));
        for (int i = 0; i < cfg.n; ++i) {
            const Vec3 r = sub(s.positions[static_cast<std::size_t>(i)], bary);
            const double rn = std::max(norm(r), 1e-6);
            const double v_circ = std::sqrt(cfg.grav_const * mtot / rn);
            // unit vector perpendicular to r: cross with the least-aligned axis
            int axis = 0;
            for (int k = 1; k < 3; ++k)
                if (std::abs(r[static_cast<std::size_t>(k)]) < std::abs(r[static_cast<std::size_t>(axis)])) axis = k;
            Vec3 e{0, 0, 0};
            e[static_cast<std::size_t>(axis)] = 1.0;
            Vec3 t{r[1] * e[2] - r[2] * e[1], r[2] * e[0] - r[0] * e[2], r[0] * e[1] - r[1] * e[0]};
            const double tn = std::max(norm(t), 1e-12);
            for (int k = 0; k < 3; ++k)
                s.velocities[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] =
                    v_circ * (t[static_cast<std::size_t>(k)] / tn + cfg.velocity_jitter * rng.normal());
        }

        // remove net momentum
        Vec3 pnet{0, 0, 0};
        for (int i = 0; i < cfg.n; ++i)
            for (int k = 0; k < 3; ++k)
                pnet[static_cast<std::size_t>(k)] +=
                    s.masses[static_cast<std::size_t>(i)] * s.velocities[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
        for (int i = 0; i < cfg.n; ++i)
            for (int k = 0; k < 3; ++k)
                s.velocities[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] -= pnet[static_cast<std::size_t>(k)] / mtot;

        if (total_energy(s, cfg) < 0.0) return s;
    }
    throw std::runtime_error("sample_initial_condition: resample limit (1000) exceeded");
}

NBodyTrajectory generate_trajectory_from(const BodyState& x0, const NBodyConfig& cfg, Rng& rng) {
    NBodyTrajectory traj;
    traj.frame_interval = cfg.dt * cfg.steps_per_frame;
    traj.frames.reserve(static_cast<std::size_t>(cfg.frames) + 1);
    traj.frames.push_back(x0);
    BodyState cur = x0;
    for (int f = 0; f < cfg.frames; ++f) {
        for (int s = 0; s < cfg.steps_per_frame; ++s) cur = euler_maruyama_step(cur, cfg, rng);
        traj.frames.push_back(cur);
    }
    return traj;
}

double max_energy_jump(const NBodyTrajectory& traj, const NBodyConfig& cfg) {
    double worst = 0.0;
    double prev = total_energy(traj.frames.front(), cfg);
    for (std::size_t f = 1; f < traj.frames.size(); ++f) {
        const double e = total_energy(traj.frames[f], cfg);
        worst = std::max(worst, std::abs(e - prev));
        prev = e;
    }
    return worst;
}

NBodyTrajectory generate_trajectory(const NBodyConfig& cfg, Rng& rng) {
    for (int rejected = 0; rejected < 100; ++rejected) {
        const BodyState x0 = sample_initial_condition(cfg, rng);
        NBodyTrajectory traj = generate_trajectory_from(x0, cfg, rng);
        bool ok = true;
        for (const auto& f : traj.frames)
            if (!f.finite()) ok = false;
        if (ok && max_energy_jump(traj, cfg) <= cfg.energy_jump_limit) return traj;
    }
    throw std::runtime_error("generate_trajectory: 100 consecutive rejections by the energy-jump filter");
}

} // namespace epns
