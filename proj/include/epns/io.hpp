#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "epns/cpm.hpp"
#include "epns/nbody.hpp"
#include "epns/nn.hpp"
#include "epns/train.hpp"

namespace epns {

namespace fs = std::filesystem;

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// trajectory container: header {magic "EPNS", version, dtype, dims, frames},
// body of contiguous little-endian frames; file size is exactly
// header + frames * frame_bytes
// ---------------------------------------------------------------------------

constexpr std::uint32_t kTrajectoryFormatVersion = 1;

void write_nbody_trajectory(const fs::path& path, const NBodyTrajectory& traj);
NBodyTrajectory read_nbody_trajectory(const fs::path& path, const std::vector<double>& masses);

void write_cpm_trajectory(const fs::path& path, const CpmTrajectory& traj);
CpmTrajectory read_cpm_trajectory(const fs::path& path, const std::vector<std::uint8_t>& cell_types);

std::uint64_t file_checksum(const fs::path& path); // FNV-1a over the bytes

// ---------------------------------------------------------------------------
// datasets on disk: manifest.json + one trajectory file per split member
// ---------------------------------------------------------------------------

struct SplitCounts {
    int train = 0, val = 0, test = 0;
};

struct CelestialDataset {
    NBodyConfig cfg;
    std::vector<NBodyTrajectory> train, val, test;
};

struct CellularDataset {
    CPMConfig cfg;
    std::vector<CpmTrajectory> train, val, test;
};

// Generation is deterministic in (seed, trajectory index); regenerating with
// the same seed reproduces the dataset byte for byte.
void generate_celestial_dataset(const fs::path& dir, const NBodyConfig& cfg, const SplitCounts& counts,
                                std::uint64_t seed, int workers);
void generate_cellular_dataset(const fs::path& dir, const CPMConfig& cfg, const SplitCounts& counts,
                               std::uint64_t seed, int workers);

std::string dataset_system(const fs::path& dir); // "celestial" | "cellular"
CelestialDataset load_celestial_dataset(const fs::path& dir);
CellularDataset load_cellular_dataset(const fs::path& dir);

std::vector<TrajectoryData<BodyState>> training_data(const std::vector<NBodyTrajectory>& trajs);
std::vector<TrajectoryData<Lattice>> training_data(const std::vector<CpmTrajectory>& trajs);

// ---------------------------------------------------------------------------
// checkpoints: parameters + optimizer state + config echo, bit-exact round trip
// ---------------------------------------------------------------------------

struct Checkpoint {
    std::string config_json;
    int epoch = 0;
    double best_val_elbo = 0.0;
    std::vector<std::pair<std::string, Tensor>> blocks;
    AdamState adam;
};

void save_checkpoint(const fs::path& path, const ParamStore& params, const AdamState& adam, int epoch,
                     double best_val_elbo, const std::string& config_json);
Checkpoint load_checkpoint(const fs::path& path);
void restore_params(const Checkpoint& ckpt, ParamStore& params);

// ---------------------------------------------------------------------------
// metric and figure emission
// ---------------------------------------------------------------------------

void write_csv(const fs::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows);

struct SvgSeries {
    std::vector<double> y;
    std::string color = "#1f77b4";
    std::string label;
};
// simple line plot; band_lo/band_hi, when nonempty, render as a shaded region
void write_svg_plot(const fs::path& path, const std::string& title, const std::vector<SvgSeries>& series,
                    const std::vector<double>& band_lo = {}, const std::vector<double>& band_hi = {});

} // namespace epns
