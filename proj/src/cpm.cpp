#include "epns/cpm.hpp"

#include <cmath>
#include <stdexcept>

namespace epns {

namespace {

constexpr int kMooreDr[8] = {-1, -1, -1, 0, 0, 1, 1, 1};
constexpr int kMooreDc[8] = {-1, 0, 1, -1, 1, -1, 0, 1};

// half neighborhood so each unordered Moore pair is visited exactly once
constexpr int kHalfDr[4] = {0, 1, 1, 1};
constexpr int kHalfDc[4] = {1, -1, 0, 1};

} // namespace

CPMConfig make_cell_sorting_config() {
    CPMConfig cfg;
    const int t = cfg.n_types;
    cfg.contact.assign(static_cast<std::size_t>((t + 1) * (t + 1)), 0.0);
    for (int a = 1; a <= t; ++a) {
        cfg.contact[static_cast<std::size_t>(a) * (t + 1) + 0] = 8.0; // cell-medium
        cfg.contact[0 * static_cast<std::size_t>(t + 1) + a] = 8.0;
        for (int b = 1; b <= t; ++b)
            cfg.contact[static_cast<std::size_t>(a) * (t + 1) + b] = (a == b) ? 4.0 : 11.0;
    }
    return cfg;
}

double hamiltonian(const Lattice& lat, const CPMConfig& cfg) {
    double h_contact = 0.0;
    for (int r = 0; r < lat.h; ++r) {
        for (int c = 0; c < lat.w; ++c) {
            const int a = lat.at(r, c);
            for (int k = 0; k < 4; ++k) {
                const int nr = r + kHalfDr[k], nc = c + kHalfDc[k];
                if (nr < 0 || nr >= lat.h || nc < 0 || nc >= lat.w) continue;
                const int b = lat.at(nr, nc);
                if (a != b) h_contact += cfg.contact_energy(lat.cell_types[static_cast<std::size_t>(a)],
                                                           lat.cell_types[static_cast<std::size_t>(b)]);
            }
        }
    }
    double h_volume = 0.0;
    const auto vols = cell_volumes(lat);
    for (int id = 1; id < static_cast<int>(vols.size()); ++id) {
        const double d = vols[static_cast<std::size_t>(id)] - cfg.target_volume;
        h_volume += cfg.volume_weight * d * d;
    }
    return h_contact + h_volume;
}

namespace {

double delta_h_volumes(int old_id, int new_id, const CPMConfig& cfg,
                       const std::vector<int>& vols) {
    double dh = 0.0;
    if (old_id != 0) {
        const double v = vols[static_cast<std::size_t>(old_id)];
        const double t = cfg.target_volume;
        dh += cfg.volume_weight * ((v - 1 - t) * (v - 1 - t) - (v - t) * (v - t));
    }
    if (new_id != 0) {
        const double v = vols[static_cast<std::size_t>(new_id)];
        const double t = cfg.target_volume;
        dh += cfg.volume_weight * ((v + 1 - t) * (v + 1 - t) - (v - t) * (v - t));
    }
    return dh;
}

double delta_h_with_volumes(const Lattice& lat, int r, int c, int proposed_id, const CPMConfig& cfg,
                            const std::vector<int>& vols) {
    const int old_id = lat.at(r, c);
    if (proposed_id == old_id) return 0.0;
    const int t_old = lat.cell_types[static_cast<std::size_t>(old_id)];
    const int t_new = lat.cell_types[static_cast<std::size_t>(proposed_id)];
    double dh = 0.0;
    for (int k = 0; k < 8; ++k) {
        const int nr = r + kMooreDr[k], nc = c + kMooreDc[k];
        if (nr < 0 || nr >= lat.h || nc < 0 || nc >= lat.w) continue;
        const int nb = lat.at(nr, nc);
        const int t_nb = lat.cell_types[static_cast<std::size_t>(nb)];
        if (proposed_id != nb) dh += cfg.contact_energy(t_new, t_nb);
        if (old_id != nb) dh -= cfg.contact_energy(t_old, t_nb);
    }
    return dh + delta_h_volumes(old_id, proposed_id, cfg, vols);
}

} // namespace

double delta_h(const Lattice& lat, int r, int c, int proposed_id, const CPMConfig& cfg) {
    if (r < 0 || r >= lat.h || c < 0 || c >= lat.w) throw std::out_of_range("delta_h: site out of range");
    return delta_h_with_volumes(lat, r, c, proposed_id, cfg, cell_volumes(lat));
}

bool metropolis_accept(double delta_h, double temperature, Rng& rng) {
    if (delta_h <= 0.0) return true;
    return rng.uniform() < std::exp(-delta_h / temperature);
}

Lattice mcs_step(const Lattice& lat, const CPMConfig& cfg, Rng& rng, McsStats* stats) {
    Lattice cur = lat;
    auto vols = cell_volumes(cur);
    const std::int64_t attempts = static_cast<std::int64_t>(lat.h) * lat.w;
    for (std::int64_t a = 0; a < attempts; ++a) {
        const int r = rng.uniform_int(cur.h);
        const int c = rng.uniform_int(cur.w);
        const int k = rng.uniform_int(8);
        if (stats) ++stats->attempts;
        const int nr = r + kMooreDr[k], nc = c + kMooreDc[k];
        if (nr < 0 || nr >= cur.h || nc < 0 || nc >= cur.w) continue;
        const int src = cur.at(nr, nc);
        const int dst = cur.at(r, c);
        if (src == dst) continue;
        const double dh = delta_h_with_volumes(cur, r, c, src, cfg, vols);
        if (metropolis_accept(dh, cfg.temperature, rng)) {
            cur.at(r, c) = static_cast<std::uint16_t>(src);
            --vols[static_cast<std::size_t>(dst)];
            ++vols[static_cast<std::size_t>(src)];
            if (stats) ++stats->accepted;
        }
    }
    return cur;
}

Lattice init_random_culture(const CPMConfig& cfg, Rng& rng) {
    const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(cfg.target_volume))));
    int cols = 1;
    while (cols * cols < cfg.n_cells) ++cols;
    const int rows = (cfg.n_cells + cols - 1) / cols;
    if (rows * side > cfg.h || cols * side > cfg.w)
        throw std::runtime_error("init_random_culture: culture does not fit grid");
    if (static_cast<std::int64_t>(cfg.n_cells) * cfg.target_volume > static_cast<std::int64_t>(cfg.h) * cfg.w)
        throw std::runtime_error("init_random_culture: total target volume exceeds lattice");

    for (int attempt = 0; attempt < 50; ++attempt) {
        Lattice lat;
        lat.h = cfg.h;
        lat.w = cfg.w;
        lat.sites.assign(static_cast<std::size_t>(cfg.h) * cfg.w, 0);
        lat.cell_types.assign(static_cast<std::size_t>(cfg.n_cells) + 1, 0);
        for (int id = 1; id <= cfg.n_cells; ++id)
            lat.cell_types[static_cast<std::size_t>(id)] = static_cast<std::uint8_t>(1 + rng.uniform_int(cfg.n_types));

        const int r0 = (cfg.h - rows * side) / 2;
        const int c0 = (cfg.w - cols * side) / 2;
        for (int id = 1; id <= cfg.n_cells; ++id) {
            const int br = (id - 1) / cols, bc = (id - 1) % cols;
            for (int r = 0; r < side; ++r)
                for (int c = 0; c < side; ++c) lat.at(r0 + br * side + r, c0 + bc * side + c) = static_cast<std::uint16_t>(id);
        }

        for (int m = 0; m < cfg.burn_in_mcs; ++m) lat = mcs_step(lat, cfg, rng);

        const auto vols = cell_volumes(lat);
        bool alive = true;
        for (int id = 1; id <= cfg.n_cells; ++id)
            if (vols[static_cast<std::size_t>(id)] == 0) alive = false;
        if (alive) {
            lat.frame_index = 0;
            return lat;
        }
    }
    throw std::runtime_error("init_random_culture: burn-in repeatedly eliminated a cell");
}

CpmTrajectory generate_cpm_trajectory_from(const Lattice& x0, const CPMConfig& cfg, Rng& rng) {
    CpmTrajectory traj;
    traj.cell_types = x0.cell_types;
    traj.frames.reserve(static_cast<std::size_t>(cfg.frames) + 1);
    traj.frames.push_back(x0);
    Lattice cur = x0;
    for (int f = 1; f <= cfg.frames; ++f) {
        for (int m = 0; m < cfg.mcs_per_frame; ++m) cur = mcs_step(cur, cfg, rng);
        cur.frame_index = f;
        traj.frames.push_back(cur);
    }
    return traj;
}

CpmTrajectory generate_cell_sorting_trajectory(const CPMConfig& cfg, Rng& rng) {
    Lattice x0 = init_random_culture(cfg, rng);
    CpmTrajectory traj = generate_cpm_trajectory_from(x0, cfg, rng);
    traj.seed = cfg.seed;
    return traj;
}

std::vector<int> cell_volumes(const Lattice& lat) {
    std::vector<int> vols(lat.cell_types.size(), 0);
    for (std::uint16_t id : lat.sites) {
        if (id >= vols.size()) throw std::runtime_error("lattice site id outside cell table");
        ++vols[id];
    }
    return vols;
}

Lattice permute_cell_ids(const Lattice& lat, const std::vector<int>& perm) {
    if (perm.size() != lat.cell_types.size() || perm[0] != 0)
        throw std::invalid_argument("permute_cell_ids: bad permutation");
    Lattice out = lat;
    for (auto& s : out.sites) s = static_cast<std::uint16_t>(perm[s]);
    for (std::size_t id = 0; id < perm.size(); ++id)
        out.cell_types[static_cast<std::size_t>(perm[id])] = lat.cell_types[id];
    return out;
}

} // namespace epns
