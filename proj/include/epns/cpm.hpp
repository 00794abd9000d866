#pragma once

#include <cstdint>
#include <vector>

#include "epns/rng.hpp"

namespace epns {

// h x w grid of cell ids; id 0 is medium. cell_types[id] gives the type of
// each cell id (type 0 reserved for medium).
struct Lattice {
    int h = 0, w = 0;
    std::vector<std::uint16_t> sites;    // row-major, h*w
    std::vector<std::uint8_t> cell_types; // indexed by id, size n_cells+1, [0]=0
    int frame_index = 0;

    std::uint16_t at(int r, int c) const { return sites[static_cast<std::size_t>(r) * w + c]; }
    std::uint16_t& at(int r, int c) { return sites[static_cast<std::size_t>(r) * w + c]; }
    int n_cells() const { return static_cast<int>(cell_types.size()) - 1; }
};

struct CPMConfig {
    int h = 48, w = 48;
    int n_cells = 12;
    int n_types = 2;
    std::vector<double> contact; // (n_types+1)^2 symmetric J matrix, row-major
    int target_volume = 64;
    double volume_weight = 1.0;
    double temperature = 8.0;
    int mcs_per_frame = 50;
    int frames = 59;
    int burn_in_mcs = 20;
    std::uint64_t seed = 1;

    double contact_energy(int type_a, int type_b) const {
        return contact[static_cast<std::size_t>(type_a) * (n_types + 1) + type_b];
    }
};

// Cell-sorting defaults: same-type adhesion < cross-type so that same-type
// clustering increases over a run.
CPMConfig make_cell_sorting_config();

struct McsStats {
    std::int64_t attempts = 0;
    std::int64_t accepted = 0;
};

// Contact energy over Moore (8-neighbor) pairs counted once, plus the
// volume constraint; the medium has no volume term.
double hamiltonian(const Lattice& lat, const CPMConfig& cfg);

// H(after copy of proposed_id into site) - H(before), computed locally.
double delta_h(const Lattice& lat, int r, int c, int proposed_id, const CPMConfig& cfg);

// Metropolis rule: accept with probability min(1, exp(-dH/T)).
bool metropolis_accept(double delta_h, double temperature, Rng& rng);

// One Monte Carlo step: h*w copy attempts with Metropolis acceptance
// min(1, exp(-dH/T)). Proposal draws address sites only, never ids.
Lattice mcs_step(const Lattice& lat, const CPMConfig& cfg, Rng& rng, McsStats* stats = nullptr);

// Adjacent square blocks of roughly target_volume sites, random types,
// followed by a short burn-in at the run temperature.
Lattice init_random_culture(const CPMConfig& cfg, Rng& rng);

struct CpmTrajectory {
    std::vector<Lattice> frames; // frames+1 states including x^0
    std::vector<std::uint8_t> cell_types;
    std::uint64_t seed = 0;
};

CpmTrajectory generate_cell_sorting_trajectory(const CPMConfig& cfg, Rng& rng);
// Continuation from a fixed initial lattice (no fresh culture).
CpmTrajectory generate_cpm_trajectory_from(const Lattice& x0, const CPMConfig& cfg, Rng& rng);

std::vector<int> cell_volumes(const Lattice& lat); // indexed by id, [0] = medium sites

// Relabels cell ids (perm[id] -> new id, perm[0] must be 0), carrying types along.
Lattice permute_cell_ids(const Lattice& lat, const std::vector<int>& perm);

} // namespace epns
