#pragma once

#include <functional>
#include <optional>
#include <string>

#include "epns/config.hpp"
#include "epns/eval.hpp"
#include "epns/io.hpp"
#include "epns/model.hpp"

namespace epns {

struct TrainResult {
    std::vector<EpochMetrics> history;
    double best_val_elbo = -1e300;
    int best_epoch = -1;
    fs::path best_checkpoint, last_checkpoint, metrics_csv;
};

// Full training loop with per-epoch metrics CSV, best/last checkpoint
// retention and bitwise-reproducible resume. `progress`, when set, receives
// each epoch's metrics as they complete.
TrainResult train_celestial_model(CelestialModel& model, const CelestialDataset& ds, const TrainConfig& tcfg,
                                  const fs::path& out_dir, const std::string& config_json,
                                  const std::optional<fs::path>& resume_from = std::nullopt,
                                  const std::function<void(const EpochMetrics&)>& progress = nullptr);
TrainResult train_cellular_model(CellularModel& model, const CellularDataset& ds, const TrainConfig& tcfg,
                                 const fs::path& out_dir, const std::string& config_json,
                                 const std::optional<fs::path>& resume_from = std::nullopt,
                                 const std::function<void(const EpochMetrics&)>& progress = nullptr);

// model construction honoring cfg.variant (epns | pns)
CelestialModel build_celestial_model(const RunConfig& cfg);
CellularModel build_cellular_model(const RunConfig& cfg);

// rollout ensembles (parallel across members, one rng stream per member)
std::vector<NBodyTrajectory> model_rollout_ensemble(const CelestialModel& model, const BodyState& x0, int members,
                                                    int steps, std::uint64_t seed, int workers);
std::vector<NBodyTrajectory> gt_rollout_ensemble(const BodyState& x0, const NBodyConfig& cfg, int members,
                                                 std::uint64_t seed, int workers);
std::vector<CpmTrajectory> model_rollout_ensemble(const CellularModel& model, const Lattice& x0, int members,
                                                  int steps, std::uint64_t seed, int workers);
std::vector<CpmTrajectory> gt_rollout_ensemble(const Lattice& x0, const CPMConfig& cfg, int members,
                                               std::uint64_t seed, int workers);

// ---------------------------------------------------------------------------
// CLI subcommand drivers; each returns a process exit code
// ---------------------------------------------------------------------------

int cmd_generate(const RunConfig& cfg, const fs::path& out_dir);
int cmd_train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir, bool resume);
int cmd_simulate(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out_dir, int members,
                 int steps, std::uint64_t seed, int workers);
int cmd_evaluate(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out_dir, int members,
                 std::uint64_t seed, int workers);
int cmd_verify_equivariance(const std::optional<fs::path>& checkpoint, const fs::path& data_dir,
                            const fs::path& out_dir, int x0_count, int rollouts_per_x0, std::uint64_t seed);
int cmd_stability(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out_dir, int steps,
                  std::uint64_t seed, int workers);
int cmd_gradcheck(const fs::path& out_dir, double tolerance);

// FD verification of the full models at tiny shapes; worst relative error.
FdReport gradcheck_celestial(bool equivariant, std::uint64_t seed);
FdReport gradcheck_cellular(std::uint64_t seed);

} // namespace epns
