#include "epns/eval.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace epns {

EmpiricalDistribution EmpiricalDistribution::of(std::vector<double> xs) {
    if (xs.empty()) throw std::invalid_argument("empty sample set");
    std::sort(xs.begin(), xs.end());
    return EmpiricalDistribution{std::move(xs)};
}

double ks_statistic(const EmpiricalDistribution& a, const EmpiricalDistribution& b) {
    if (a.samples.empty() || b.samples.empty()) throw std::invalid_argument("ks_statistic: empty sample set");
    const std::size_t n = a.samples.size(), m = b.samples.size();
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < n && j < m) {
        const double x = std::min(a.samples[i], b.samples[j]);
        while (i < n && a.samples[i] <= x) ++i;
        while (j < m && b.samples[j] <= x) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / n - static_cast<double>(j) / m));
    }
    return d;
}

double ks_two_sample_pvalue(double d, int n, int m) {
    if (d <= 0.0) return 1.0;
    const double en = std::sqrt(static_cast<double>(n) * m / (static_cast<double>(n) + m));
    const double lambda = (en + 0.12 + 0.11 / en) * d;
    double p = 0.0;
    double sign = 1.0;
    for (int k = 1; k <= 200; ++k) {
        const double term = std::exp(-2.0 * lambda * lambda * k * k);
        p += 2.0 * sign * term;
        if (term < 1e-10) break;
        sign = -sign;
    }
    return std::min(1.0, std::max(0.0, p));
}

namespace {

struct UnionFind {
    std::vector<int> parent;
    explicit UnionFind(int n) : parent(static_cast<std::size_t>(n)) {
        for (int i = 0; i < n; ++i) parent[static_cast<std::size_t>(i)] = i;
    }
    int find(int x) {
        while (parent[static_cast<std::size_t>(x)] != x) {
            parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
            x = parent[static_cast<std::size_t>(x)];
        }
        return x;
    }
    void unite(int a, int b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[static_cast<std::size_t>(a)] = b;
    }
};

} // namespace

int cluster_count(const Lattice& lat) {
    const int n = lat.n_cells();
    UnionFind uf(n + 1);
    std::vector<char> present(static_cast<std::size_t>(n) + 1, 0);
    for (int r = 0; r < lat.h; ++r)
        for (int c = 0; c < lat.w; ++c) {
            const int a = lat.at(r, c);
            if (a != 0) present[static_cast<std::size_t>(a)] = 1;
            if (a == 0) continue;
            if (c + 1 < lat.w) {
                const int b = lat.at(r, c + 1);
                if (b != 0 && lat.cell_types[static_cast<std::size_t>(a)] == lat.cell_types[static_cast<std::size_t>(b)])
                    uf.unite(a, b);
            }
            if (r + 1 < lat.h) {
                const int b = lat.at(r + 1, c);
                if (b != 0 && lat.cell_types[static_cast<std::size_t>(a)] == lat.cell_types[static_cast<std::size_t>(b)])
                    uf.unite(a, b);
            }
        }
    int clusters = 0;
    for (int id = 1; id <= n; ++id)
        if (present[static_cast<std::size_t>(id)] && uf.find(id) == id) ++clusters;
    // roots may have been united into absent-rooted chains only when both were
    // present, so counting present roots is exact
    return clusters;
}

std::vector<double> observable_series(const NBodyTrajectory& traj, NBodyObservable obs, const NBodyConfig& cfg) {
    std::vector<double> out;
    out.reserve(traj.frames.size());
    for (const auto& f : traj.frames) {
        switch (obs) {
            case NBodyObservable::KineticEnergy: out.push_back(kinetic_energy(f)); break;
            case NBodyObservable::PotentialEnergy: out.push_back(potential_energy(f, cfg)); break;
            case NBodyObservable::TotalEnergy: out.push_back(total_energy(f, cfg)); break;
        }
    }
    return out;
}

std::vector<double> cluster_count_series(const CpmTrajectory& traj) {
    std::vector<double> out;
    out.reserve(traj.frames.size());
    for (const auto& f : traj.frames) out.push_back(static_cast<double>(cluster_count(f)));
    return out;
}

std::vector<DksRow> dks_at_times(const std::vector<std::vector<double>>& model_series,
                                 const std::vector<std::vector<double>>& gt_series, const std::vector<int>& frames) {
    std::vector<DksRow> rows;
    for (int frame : frames) {
        std::vector<double> mv, gv;
        for (const auto& s : model_series) {
            if (frame >= static_cast<int>(s.size())) throw std::out_of_range("dks_at_times: frame out of range");
            mv.push_back(s[static_cast<std::size_t>(frame)]);
        }
        for (const auto& s : gt_series) {
            if (frame >= static_cast<int>(s.size())) throw std::out_of_range("dks_at_times: frame out of range");
            gv.push_back(s[static_cast<std::size_t>(frame)]);
        }
        DksRow row;
        row.frame = frame;
        row.dks = ks_statistic(EmpiricalDistribution::of(mv), EmpiricalDistribution::of(gv));
        row.pvalue = ks_two_sample_pvalue(row.dks, static_cast<int>(mv.size()), static_cast<int>(gv.size()));
        rows.push_back(row);
    }
    return rows;
}

BodyState rotate_state(const BodyState& s, const Mat3& r) {
    BodyState out = s;
    for (int i = 0; i < s.n(); ++i) {
        out.positions[static_cast<std::size_t>(i)] = mat3_apply(r, s.positions[static_cast<std::size_t>(i)]);
        out.velocities[static_cast<std::size_t>(i)] = mat3_apply(r, s.velocities[static_cast<std::size_t>(i)]);
    }
    return out;
}

EquivarianceResult verify_equivariance_celestial(
    const std::function<NBodyTrajectory(const BodyState&, std::uint64_t)>& simulate,
    const std::vector<BodyState>& x0s, int rollouts_per_x0, std::uint64_t seed) {
    Rng rng(derive_seed(seed, {0xEC0BULL}));
    const Mat3 r = random_rotation(rng);
    if (x0s.empty()) throw std::invalid_argument("verify_equivariance: no initial states");
    const int body = rng.uniform_int(x0s[0].n());
    const int axis = rng.uniform_int(3);

    std::vector<double> d1, d2;
    std::uint64_t roll = 0;
    for (const auto& x0 : x0s) {
        for (int k = 0; k < rollouts_per_x0; ++k) {
            const NBodyTrajectory t1 = simulate(x0, derive_seed(seed, {1, roll}));
            const Vec3 p = mat3_apply(r, t1.frames.back().positions[static_cast<std::size_t>(body)]);
            d1.push_back(p[static_cast<std::size_t>(axis)]);
            const NBodyTrajectory t2 = simulate(rotate_state(x0, r), derive_seed(seed, {2, roll}));
            d2.push_back(t2.frames.back().positions[static_cast<std::size_t>(body)][static_cast<std::size_t>(axis)]);
            ++roll;
        }
    }
    EquivarianceResult res;
    res.n1 = static_cast<int>(d1.size());
    res.n2 = static_cast<int>(d2.size());
    res.low_sample_warning = res.n1 < 30 || res.n2 < 30;
    res.dks = ks_statistic(EmpiricalDistribution::of(d1), EmpiricalDistribution::of(d2));
    res.pvalue = ks_two_sample_pvalue(res.dks, res.n1, res.n2);
    return res;
}

namespace {

// displacement of a cell's volume centroid between the first and last frame;
// NaN when the cell has no sites in either frame
double centroid_displacement(const CpmTrajectory& traj, int cell) {
    auto centroid = [cell](const Lattice& lat, bool& ok) {
        double cr = 0.0, cc = 0.0;
        int cnt = 0;
        for (int r = 0; r < lat.h; ++r)
            for (int c = 0; c < lat.w; ++c)
                if (lat.at(r, c) == cell) {
                    cr += r;
                    cc += c;
                    ++cnt;
                }
        ok = cnt > 0;
        if (cnt == 0) return std::pair<double, double>{0.0, 0.0};
        return std::pair<double, double>{cr / cnt, cc / cnt};
    };
    bool ok0 = false, ok1 = false;
    const auto c0 = centroid(traj.frames.front(), ok0);
    const auto c1 = centroid(traj.frames.back(), ok1);
    if (!ok0 || !ok1) return std::numeric_limits<double>::quiet_NaN();
    const double dr = c1.first - c0.first, dc = c1.second - c0.second;
    return std::sqrt(dr * dr + dc * dc);
}

CpmTrajectory permute_trajectory(const CpmTrajectory& traj, const std::vector<int>& perm) {
    CpmTrajectory out;
    out.seed = traj.seed;
    out.frames.reserve(traj.frames.size());
    for (const auto& f : traj.frames) out.frames.push_back(permute_cell_ids(f, perm));
    out.cell_types = out.frames.front().cell_types;
    return out;
}

} // namespace

EquivarianceResult verify_equivariance_cellular(
    const std::function<CpmTrajectory(const Lattice&, std::uint64_t)>& simulate, const std::vector<Lattice>& x0s,
    int rollouts_per_x0, std::uint64_t seed) {
    if (x0s.empty()) throw std::invalid_argument("verify_equivariance: no initial states");
    Rng rng(derive_seed(seed, {0xEC0CULL}));
    const int n = x0s[0].n_cells();
    std::vector<int> perm(static_cast<std::size_t>(n) + 1);
    for (int i = 0; i <= n; ++i) perm[static_cast<std::size_t>(i)] = i;
    for (int i = n; i > 1; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(1 + rng.uniform_int(i))]);
    const int cell = 1 + rng.uniform_int(n);

    std::vector<double> d1, d2;
    std::uint64_t roll = 0;
    for (const auto& x0 : x0s) {
        for (int k = 0; k < rollouts_per_x0; ++k) {
            const CpmTrajectory t1 = simulate(x0, derive_seed(seed, {1, roll}));
            const double a1 = centroid_displacement(permute_trajectory(t1, perm), cell);
            if (std::isfinite(a1)) d1.push_back(a1);
            const CpmTrajectory t2 = simulate(permute_cell_ids(x0, perm), derive_seed(seed, {2, roll}));
            const double a2 = centroid_displacement(t2, cell);
            if (std::isfinite(a2)) d2.push_back(a2);
            ++roll;
        }
    }
    EquivarianceResult res;
    res.n1 = static_cast<int>(d1.size());
    res.n2 = static_cast<int>(d2.size());
    res.low_sample_warning = res.n1 < 30 || res.n2 < 30;
    res.dks = ks_statistic(EmpiricalDistribution::of(d1), EmpiricalDistribution::of(d2));
    res.pvalue = ks_two_sample_pvalue(res.dks, res.n1, res.n2);
    return res;
}

StabilityCriterion energy_jump_criterion(double threshold) {
    StabilityCriterion c;
    c.kind = StabilityCriterion::Kind::EnergyJump;
    c.threshold = threshold;
    return c;
}

StabilityCriterion volume_range_criterion(const std::vector<CpmTrajectory>& training, double fraction) {
    StabilityCriterion c;
    c.kind = StabilityCriterion::Kind::VolumeRange;
    c.fraction = fraction;
    c.vol_min = std::numeric_limits<double>::infinity();
    c.vol_max = -std::numeric_limits<double>::infinity();
    for (const auto& traj : training)
        for (const auto& f : traj.frames) {
            const auto vols = cell_volumes(f);
            for (int id = 1; id < static_cast<int>(vols.size()); ++id) {
                c.vol_min = std::min(c.vol_min, static_cast<double>(vols[static_cast<std::size_t>(id)]));
                c.vol_max = std::max(c.vol_max, static_cast<double>(vols[static_cast<std::size_t>(id)]));
            }
        }
    if (!(c.vol_min <= c.vol_max)) throw std::invalid_argument("volume_range_criterion: empty training set");
    return c;
}

int first_unstable_frame(const NBodyTrajectory& traj, const StabilityCriterion& c, const NBodyConfig& cfg) {
    if (c.kind != StabilityCriterion::Kind::EnergyJump)
        throw std::invalid_argument("celestial stability uses the energy-jump criterion");
    const int frames = static_cast<int>(traj.frames.size());
    double prev = total_energy(traj.frames.front(), cfg);
    for (int f = 1; f < frames; ++f) {
        const double e = total_energy(traj.frames[static_cast<std::size_t>(f)], cfg);
        if (!std::isfinite(e) || std::abs(e - prev) > c.threshold) return f;
        prev = e;
    }
    return frames;
}

int first_unstable_frame(const CpmTrajectory& traj, const StabilityCriterion& c) {
    if (c.kind != StabilityCriterion::Kind::VolumeRange)
        throw std::invalid_argument("cellular stability uses the volume-range criterion");
    const int frames = static_cast<int>(traj.frames.size());
    for (int f = 0; f < frames; ++f) {
        const auto vols = cell_volumes(traj.frames[static_cast<std::size_t>(f)]);
        const int n = static_cast<int>(vols.size()) - 1;
        int outside = 0;
        for (int id = 1; id <= n; ++id) {
            const double v = vols[static_cast<std::size_t>(id)];
            if (v < c.vol_min || v > c.vol_max) ++outside;
        }
        if (outside > c.fraction * n) return f == 0 ? 1 : f; // frame 0 is the given initial state
    }
    return frames;
}

std::vector<double> stability_fraction(const std::vector<int>& first_violation, int frames) {
    if (first_violation.empty()) throw std::invalid_argument("stability_fraction: no rollouts");
    std::vector<double> out(static_cast<std::size_t>(frames), 0.0);
    for (int f = 0; f < frames; ++f) {
        int stable = 0;
        for (int v : first_violation)
            if (v > f) ++stable;
        out[static_cast<std::size_t>(f)] = static_cast<double>(stable) / static_cast<double>(first_violation.size());
    }
    return out;
}

QuantileBand quantile_bands(const std::vector<std::vector<double>>& ensemble_series, double q_lo, double q_hi) {
    if (ensemble_series.size() < 10) throw std::invalid_argument("quantile_bands: need at least 10 ensemble members");
    const std::size_t frames = ensemble_series[0].size();
    for (const auto& s : ensemble_series)
        if (s.size() != frames) throw std::invalid_argument("quantile_bands: ragged ensemble");
    auto quantile = [](std::vector<double>& xs, double q) {
        std::sort(xs.begin(), xs.end());
        const double pos = q * static_cast<double>(xs.size() - 1);
        const std::size_t i = static_cast<std::size_t>(pos);
        const double frac = pos - static_cast<double>(i);
        return i + 1 < xs.size() ? xs[i] * (1.0 - frac) + xs[i + 1] * frac : xs[i];
    };
    QuantileBand band;
    for (std::size_t f = 0; f < frames; ++f) {
        std::vector<double> xs;
        xs.reserve(ensemble_series.size());
        for (const auto& s : ensemble_series) xs.push_back(s[f]);
        band.lo.push_back(quantile(xs, q_lo));
        band.median.push_back(quantile(xs, 0.5));
        band.hi.push_back(quantile(xs, q_hi));
    }
    return band;
}

} // namespace epns
