#pragma once

#include <string>

#include "epns/cpm.hpp"
#include "epns/io.hpp"
#include "epns/model.hpp"
#include "epns/nbody.hpp"
#include "epns/train.hpp"

namespace epns {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// One config drives generation, training and evaluation for a run. The desk
// and paper presets share every algorithmic setting and differ only in scale:
// dataset counts, network widths/kernels, epochs, batch size, unroll length K
// and the annealing period (kept proportional to the run length).
struct RunConfig {
    std::string system = "celestial"; // or "cellular"
    std::string preset = "desk";
    std::string variant = "epns"; // "pns" selects the plain-GNN ablation (celestial)

    NBodyConfig nbody;
    CPMConfig cpm;
    SplitCounts counts{80, 10, 10};

    CelestialConfig celestial_model;
    CellularConfig cellular_model;

    TrainConfig train;
    int workers = 2;
    std::uint64_t seed = 1;

    bool is_celestial() const { return system == "celestial"; }
};

RunConfig make_preset(const std::string& system, const std::string& preset);

std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& text);

// Loads a JSON config file; missing keys fall back to the preset named inside
// the file (or "desk").
RunConfig load_run_config(const fs::path& path);
void save_run_config(const fs::path& path, const RunConfig& cfg);

// hash of the canonical JSON serialization, echoed into output artifacts
std::uint64_t run_config_hash(const RunConfig& cfg);

} // namespace epns
