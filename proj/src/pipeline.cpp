#include "epns/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

namespace epns {

namespace {

constexpr std::uint64_t kRolloutStream = 0x726f11ULL;

template <class Model>
TrainResult run_training(Model& model, const std::vector<TrajectoryData<typename Model::State>>& train,
                         const std::vector<TrajectoryData<typename Model::State>>& val, const TrainConfig& tcfg,
                         const fs::path& out_dir, const std::string& config_json,
                         const std::optional<fs::path>& resume_from,
                         const std::function<void(const EpochMetrics&)>& progress) {
    fs::create_directories(out_dir);
    TrainResult result;
    result.metrics_csv = out_dir / "metrics.csv";
    result.best_checkpoint = out_dir / "checkpoint_best.bin";
    result.last_checkpoint = out_dir / "checkpoint_last.bin";

    AdamState adam;
    int start_epoch = 0;
    if (resume_from) {
        Checkpoint ckpt = load_checkpoint(*resume_from);
        restore_params(ckpt, model.params());
        adam = std::move(ckpt.adam);
        start_epoch = ckpt.epoch + 1;
        result.best_val_elbo = ckpt.best_val_elbo;
        // keep already-written metric rows for the epochs being skipped
        std::ifstream is(result.metrics_csv);
        if (is) {
            std::string line;
            std::getline(is, line); // header
            while (std::getline(is, line) && !line.empty()) {
                EpochMetrics m;
                std::istringstream row(line);
                char comma;
                row >> m.epoch >> comma >> m.recon >> comma >> m.kl >> comma >> m.beta >> comma >> m.val_elbo >>
                    comma >> m.skipped_batches;
                if (m.epoch < start_epoch) result.history.push_back(m);
            }
        }
    }

    const int n_workers = std::max(1, std::min(tcfg.workers, tcfg.batch_size));
    std::vector<std::unique_ptr<Model>> replica_storage;
    std::vector<Model*> replicas;
    for (int w = 0; w < n_workers; ++w) {
        replica_storage.push_back(std::make_unique<Model>(model.config(), /*seed=*/0));
        replicas.push_back(replica_storage.back().get());
    }

    auto write_metrics = [&]() {
        std::vector<std::vector<double>> rows;
        for (const auto& m : result.history)
            rows.push_back({static_cast<double>(m.epoch), m.recon, m.kl, m.beta, m.val_elbo,
                            static_cast<double>(m.skipped_batches)});
        write_csv(result.metrics_csv, {"epoch", "recon", "kl", "beta", "val_elbo", "skipped_batches"}, rows);
    };

    for (int epoch = start_epoch; epoch < tcfg.epochs; ++epoch) {
        EpochMetrics m = multi_step_train_epoch(model, replicas, train, adam, tcfg, epoch);
        m.val_elbo = validation_elbo(model, val, tcfg, epoch);
        result.history.push_back(m);
        write_metrics();
        save_checkpoint(result.last_checkpoint, model.params(), adam, epoch, result.best_val_elbo, config_json);
        if (m.val_elbo > result.best_val_elbo || result.best_epoch < 0) {
            result.best_val_elbo = m.val_elbo;
            result.best_epoch = epoch;
            save_checkpoint(result.best_checkpoint, model.params(), adam, epoch, result.best_val_elbo, config_json);
        }
        if (progress) progress(m);
    }
    if (result.history.empty()) throw ConfigError("no training epochs configured");
    return result;
}

} // namespace

TrainResult train_celestial_model(CelestialModel& model, const CelestialDataset& ds, const TrainConfig& tcfg,
                                  const fs::path& out_dir, const std::string& config_json,
                                  const std::optional<fs::path>& resume_from,
                                  const std::function<void(const EpochMetrics&)>& progress) {
    return run_training(model, training_data(ds.train), training_data(ds.val), tcfg, out_dir, config_json,
                        resume_from, progress);
}

TrainResult train_cellular_model(CellularModel& model, const CellularDataset& ds, const TrainConfig& tcfg,
                                 const fs::path& out_dir, const std::string& config_json,
                                 const std::optional<fs::path>& resume_from,
                                 const std::function<void(const EpochMetrics&)>& progress) {
    return run_training(model, training_data(ds.train), training_data(ds.val), tcfg, out_dir, config_json,
                        resume_from, progress);
}

CelestialModel build_celestial_model(const RunConfig& cfg) {
    CelestialConfig mc = cfg.celestial_model;
    mc.equivariant = cfg.variant != "pns";
    return CelestialModel(mc, cfg.seed);
}

CellularModel build_cellular_model(const RunConfig& cfg) {
    CellularConfig mc = cfg.cellular_model;
    mc.n_types = cfg.cpm.n_types;
    return CellularModel(mc, cfg.seed);
}

std::vector<NBodyTrajectory> model_rollout_ensemble(const CelestialModel& model, const BodyState& x0, int members,
                                                    int steps, std::uint64_t seed, int workers) {
    std::vector<NBodyTrajectory> out(static_cast<std::size_t>(members));
    detail::run_partitioned(members, workers, [&](int i, int) {
        Rng rng(derive_seed(seed, {kRolloutStream, static_cast<std::uint64_t>(i)}));
        out[static_cast<std::size_t>(i)] = model.rollout(x0, steps, rng);
    });
    return out;
}

std::vector<NBodyTrajectory> gt_rollout_ensemble(const BodyState& x0, const NBodyConfig& cfg, int members,
                                                 std::uint64_t seed, int workers) {
    std::vector<NBodyTrajectory> out(static_cast<std::size_t>(members));
    detail::run_partitioned(members, workers, [&](int i, int) {
        Rng rng(derive_seed(seed, {kRolloutStream, 0xD7, static_cast<std::uint64_t>(i)}));
        out[static_cast<std::size_t>(i)] = generate_trajectory_from(x0, cfg, rng);
    });
    return out;
}

std::vector<CpmTrajectory> model_rollout_ensemble(const CellularModel& model, const Lattice& x0, int members,
                                                  int steps, std::uint64_t seed, int workers) {
    std::vector<CpmTrajectory> out(static_cast<std::size_t>(members));
    detail::run_partitioned(members, workers, [&](int i, int) {
        Rng rng(derive_seed(seed, {kRolloutStream, static_cast<std::uint64_t>(i)}));
        out[static_cast<std::size_t>(i)] = model.rollout(x0, steps, rng);
    });
    return out;
}

std::vector<CpmTrajectory> gt_rollout_ensemble(const Lattice& x0, const CPMConfig& cfg, int members,
                                               std::uint64_t seed, int workers) {
    std::vector<CpmTrajectory> out(static_cast<std::size_t>(members));
    detail::run_partitioned(members, workers, [&](int i, int) {
        Rng rng(derive_seed(seed, {kRolloutStream, 0xD7, static_cast<std::uint64_t>(i)}));
        out[static_cast<std::size_t>(i)] = generate_cpm_trajectory_from(x0, cfg, rng);
    });
    return out;
}

// ---------------------------------------------------------------------------
// CLI drivers
// ---------------------------------------------------------------------------

int cmd_generate(const RunConfig& cfg, const fs::path& out_dir) {
    if (cfg.is_celestial()) {
        NBodyConfig g = cfg.nbody;
        g.seed = cfg.seed;
        generate_celestial_dataset(out_dir, g, cfg.counts, cfg.seed, cfg.workers);
    } else {
        CPMConfig g = cfg.cpm;
        g.seed = cfg.seed;
        generate_cellular_dataset(out_dir, g, cfg.counts, cfg.seed, cfg.workers);
    }
    save_run_config(out_dir / "run_config.json", cfg);
    std::cout << "dataset written to " << out_dir.string() << " (config hash " << run_config_hash(cfg) << ")\n";
    return 0;
}

int cmd_train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir, bool resume) {
    const std::string config_json = run_config_to_json(cfg);
    std::optional<fs::path> resume_from;
    if (resume && fs::exists(out_dir / "checkpoint_last.bin")) resume_from = out_dir / "checkpoint_last.bin";
    auto progress = [](const EpochMetrics& m) {
        std::cout << "epoch " << m.epoch << " recon " << m.recon << " kl " << m.kl << " beta " << m.beta
                  << " val_elbo " << m.val_elbo << " skipped " << m.skipped_batches << "\n";
    };
    if (cfg.is_celestial()) {
        CelestialDataset ds = load_celestial_dataset(data_dir);
        CelestialModel model = build_celestial_model(cfg);
        TrainResult r = train_celestial_model(model, ds, cfg.train, out_dir, config_json, resume_from, progress);
        std::cout << "best val ELBO " << r.best_val_elbo << " at epoch " << r.best_epoch << "\n";
    } else {
        CellularDataset ds = load_cellular_dataset(data_dir);
        CellularModel model = build_cellular_model(cfg);
        TrainResult r = train_cellular_model(model, ds, cfg.train, out_dir, config_json, resume_from, progress);
        std::cout << "best val ELBO " << r.best_val_elbo << " at epoch " << r.best_epoch << "\n";
    }
    return 0;
}

namespace {

RunConfig config_of_checkpoint(const Checkpoint& ckpt) { return run_config_from_json(ckpt.config_json); }

} // namespace

int cmd_simulate(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out_dir, int members,
                 int steps, std::uint64_t seed, int workers) {
    Checkpoint ckpt = load_checkpoint(checkpoint);
    RunConfig cfg = config_of_checkpoint(ckpt);
    fs::create_directories(out_dir);
    if (cfg.is_celestial()) {
        CelestialDataset ds = load_celestial_dataset(data_dir);
        if (ds.test.empty()) throw IoError("dataset has no test split");
        CelestialModel model = build_celestial_model(cfg);
        restore_params(ckpt, model.params());
        const BodyState& x0 = ds.test.front().frames.front();
        const int n_steps = steps > 0 ? steps : static_cast<int>(ds.test.front().frames.size()) - 1;
        auto ens = model_rollout_ensemble(model, x0, members, n_steps, seed, workers);
        for (int i = 0; i < members; ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "rollout_%04d.bin", i);
            write_nbody_trajectory(out_dir / name, ens[static_cast<std::size_t>(i)]);
        }
    } else {
        CellularDataset ds = load_cellular_dataset(data_dir);
        if (ds.test.empty()) throw IoError("dataset has no test split");
        CellularModel model = build_cellular_model(cfg);
        restore_params(ckpt, model.params());
        const Lattice& x0 = ds.test.front().frames.front();
        const int n_steps = steps > 0 ? steps : static_cast<int>(ds.test.front().frames.size()) - 1;
        auto ens = model_rollout_ensemble(model, x0, members, n_steps, seed, workers);
        for (int i = 0; i < members; ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "rollout_%04d.bin", i);
            write_cpm_trajectory(out_dir / name, ens[static_cast<std::size_t>(i)]);
        }
    }
    std::cout << members << " rollouts written to " << out_dir.string() << "\n";
    return 0;
}

int cmd_evaluate(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out_dir, int members,
                 std::uint64_t seed, int workers) {
    Checkpoint ckpt = load_checkpoint(checkpoint);
    RunConfig cfg = config_of_checkpoint(ckpt);
    fs::create_directories(out_dir);
    if (cfg.is_celestial()) {
        CelestialDataset ds = load_celestial_dataset(data_dir);
        if (ds.test.empty()) throw IoError("dataset has no test split");
        CelestialModel model = build_celestial_model(cfg);
        restore_params(ckpt, model.params());

        const double elbo = test_elbo(model, training_data(ds.test), seed);
        write_csv(out_dir / "elbo.csv", {"test_elbo"}, {{elbo}});

        const BodyState& x0 = ds.test.front().frames.front();
        const int steps = static_cast<int>(ds.test.front().frames.size()) - 1;
        auto model_ens = model_rollout_ensemble(model, x0, members, steps, seed, workers);
        auto gt_ens = gt_rollout_ensemble(x0, ds.cfg, members, seed, workers);
        std::vector<std::vector<double>> model_ke, gt_ke, model_pe, gt_pe;
        for (const auto& t : model_ens) {
            model_ke.push_back(observable_series(t, NBodyObservable::KineticEnergy, ds.cfg));
            model_pe.push_back(observable_series(t, NBodyObservable::PotentialEnergy, ds.cfg));
        }
        for (const auto& t : gt_ens) {
            gt_ke.push_back(observable_series(t, NBodyObservable::KineticEnergy, ds.cfg));
            gt_pe.push_back(observable_series(t, NBodyObservable::PotentialEnergy, ds.cfg));
        }
        // truncated rollouts are shorter than requested; evaluate at frames all
        // members reached
        std::size_t min_len = static_cast<std::size_t>(steps) + 1;
        for (const auto& s : model_ke) min_len = std::min(min_len, s.size());
        const int t_final = static_cast<int>(min_len) - 1;
        const std::vector<int> frames{t_final / 2, t_final};
        auto rows = dks_at_times(model_ke, gt_ke, frames);
        std::vector<std::vector<double>> csv_rows;
        for (const auto& r : rows)
            csv_rows.push_back({static_cast<double>(r.frame), r.dks, r.pvalue});
        write_csv(out_dir / "dks.csv", {"frame", "dks_kinetic_energy", "pvalue"}, csv_rows);

        QuantileBand mb = quantile_bands(model_pe);
        QuantileBand gb = quantile_bands(gt_pe);
        write_svg_plot(out_dir / "potential_energy_band.svg", "potential energy, model band vs ground truth",
                       {{mb.median, "#d62728", "model median"}, {gb.median, "#1f77b4", "gt median"},
                        {gb.lo, "#1f77b4", ""}, {gb.hi, "#1f77b4", ""}},
                       mb.lo, mb.hi);
        std::vector<std::vector<double>> band_rows;
        for (std::size_t f = 0; f < mb.median.size(); ++f)
            band_rows.push_back({static_cast<double>(f), mb.lo[f], mb.median[f], mb.hi[f], gb.lo[f], gb.median[f], gb.hi[f]});
        write_csv(out_dir / "potential_energy_band.csv",
                  {"frame", "model_q10", "model_median", "model_q90", "gt_q10", "gt_median", "gt_q90"}, band_rows);
    } else {
        CellularDataset ds = load_cellular_dataset(data_dir);
        if (ds.test.empty()) throw IoError("dataset has no test split");
        CellularModel model = build_cellular_model(cfg);
        restore_params(ckpt, model.params());

        const double elbo = test_elbo(model, training_data(ds.test), seed);
        write_csv(out_dir / "elbo.csv", {"test_elbo"}, {{elbo}});

        const Lattice& x0 = ds.test.front().frames.front();
        const int steps = static_cast<int>(ds.test.front().frames.size()) - 1;
        auto model_ens = model_rollout_ensemble(model, x0, members, steps, seed, workers);
        auto gt_ens = gt_rollout_ensemble(x0, ds.cfg, members, seed, workers);
        std::vector<std::vector<double>> model_cc, gt_cc;
        for (const auto& t : model_ens) model_cc.push_back(cluster_count_series(t));
        for (const auto& t : gt_ens) gt_cc.push_back(cluster_count_series(t));
        const std::vector<int> frames{std::min(30, steps), std::min(45, steps)};
        auto rows = dks_at_times(model_cc, gt_cc, frames);
        std::vector<std::vector<double>> csv_rows;
        for (const auto& r : rows)
            csv_rows.push_back({static_cast<double>(r.frame), r.dks, r.pvalue});
        write_csv(out_dir / "dks.csv", {"frame", "dks_cluster_count", "pvalue"}, csv_rows);

        QuantileBand mb = quantile_bands(model_cc);
        QuantileBand gb = quantile_bands(gt_cc);
        write_svg_plot(out_dir / "cluster_count_band.svg", "cluster count, model band vs ground truth",
                       {{mb.median, "#d62728", "model median"}, {gb.median, "#1f77b4", "gt median"},
                        {gb.lo, "#1f77b4", ""}, {gb.hi, "#1f77b4", ""}},
                       mb.lo, mb.hi);
    }
    std::cout << "evaluation written to " << out_dir.string() << "\n";
    return 0;
}

int cmd_verify_equivariance(const std::optional<fs::path>& checkpoint, const fs::path& data_dir,
                            const fs::path& out_dir, int x0_count, int rollouts_per_x0, std::uint64_t seed) {
    fs::create_directories(out_dir);
    const std::string system = dataset_system(data_dir);
    EquivarianceResult res;
    std::string model_name;
    if (system == "celestial") {
        CelestialDataset ds = load_celestial_dataset(data_dir);
        std::vector<BodyState> x0s;
        for (const auto& t : ds.test) {
            x0s.push_back(t.frames.front());
            if (static_cast<int>(x0s.size()) >= x0_count) break;
        }
        const int steps = static_cast<int>(ds.test.front().frames.size()) - 1;
        std::function<NBodyTrajectory(const BodyState&, std::uint64_t)> sim;
        if (checkpoint) {
            Checkpoint ckpt = load_checkpoint(*checkpoint);
            RunConfig cfg = config_of_checkpoint(ckpt);
            auto model = std::make_shared<CelestialModel>(build_celestial_model(cfg));
            restore_params(ckpt, model->params());
            model_name = cfg.variant;
            sim = [model, steps](const BodyState& x0, std::uint64_t s) {
                Rng rng(s);
                return model->rollout(x0, steps, rng);
            };
        } else {
            model_name = "ground-truth";
            NBodyConfig gcfg = ds.cfg;
            sim = [gcfg](const BodyState& x0, std::uint64_t s) {
                Rng rng(s);
                return generate_trajectory_from(x0, gcfg, rng);
            };
        }
        res = verify_equivariance_celestial(sim, x0s, rollouts_per_x0, seed);
    } else {
        CellularDataset ds = load_cellular_dataset(data_dir);
        std::vector<Lattice> x0s;
        for (const auto& t : ds.test) {
            x0s.push_back(t.frames.front());
            if (static_cast<int>(x0s.size()) >= x0_count) break;
        }
        const int steps = static_cast<int>(ds.test.front().frames.size()) - 1;
        std::function<CpmTrajectory(const Lattice&, std::uint64_t)> sim;
        if (checkpoint) {
            Checkpoint ckpt = load_checkpoint(*checkpoint);
            RunConfig cfg = config_of_checkpoint(ckpt);
            auto model = std::make_shared<CellularModel>(build_cellular_model(cfg));
            restore_params(ckpt, model->params());
            model_name = "epns";
            sim = [model, steps](const Lattice& x0, std::uint64_t s) {
                Rng rng(s);
                return model->rollout(x0, steps, rng);
            };
        } else {
            model_name = "ground-truth";
            CPMConfig gcfg = ds.cfg;
            sim = [gcfg](const Lattice& x0, std::uint64_t s) {
                Rng rng(s);
                return generate_cpm_trajectory_from(x0, gcfg, rng);
            };
        }
        res = verify_equivariance_cellular(sim, x0s, rollouts_per_x0, seed);
    }
    write_csv(out_dir / "equivariance.csv", {"dks", "pvalue", "n1", "n2", "low_sample_warning"},
              {{res.dks, res.pvalue, static_cast<double>(res.n1), static_cast<double>(res.n2),
                res.low_sample_warning ? 1.0 : 0.0}});
    std::cout << "equivariance verification (" << model_name << ", " << system << "): D_KS=" << res.dks
              << " p=" << res.pvalue << "\n";
    return 0;
}

int cmd_stability(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out_dir, int steps,
                  std::uint64_t seed, int workers) {
    Checkpoint ckpt = load_checkpoint(checkpoint);
    RunConfig cfg = config_of_checkpoint(ckpt);
    fs::create_directories(out_dir);
    std::vector<double> fraction;
    if (cfg.is_celestial()) {
        CelestialDataset ds = load_celestial_dataset(data_dir);
        CelestialModel model = build_celestial_model(cfg);
        restore_params(ckpt, model.params());
        const StabilityCriterion crit = energy_jump_criterion(ds.cfg.energy_jump_limit);
        std::vector<int> first;
        int i = 0;
        for (const auto& t : ds.test) {
            Rng rng(derive_seed(seed, {0x57AB, static_cast<std::uint64_t>(i++)}));
            NBodyTrajectory roll = model.rollout(t.frames.front(), steps, rng);
            int fv = first_unstable_frame(roll, crit, ds.cfg);
            // a rollout truncated by non-finite states is unstable from there on
            if (static_cast<int>(roll.frames.size()) < steps + 1 && fv >= static_cast<int>(roll.frames.size()))
                fv = static_cast<int>(roll.frames.size());
            first.push_back(fv);
        }
        fraction = stability_fraction(first, steps + 1);
    } else {
        CellularDataset ds = load_cellular_dataset(data_dir);
        CellularModel model = build_cellular_model(cfg);
        restore_params(ckpt, model.params());
        const StabilityCriterion crit = volume_range_criterion(ds.train);
        std::vector<int> first;
        int i = 0;
        for (const auto& t : ds.test) {
            Rng rng(derive_seed(seed, {0x57AB, static_cast<std::uint64_t>(i++)}));
            CpmTrajectory roll = model.rollout(t.frames.front(), steps, rng);
            first.push_back(first_unstable_frame(roll, crit));
        }
        fraction = stability_fraction(first, steps + 1);
    }
    (void)workers;
    std::vector<std::vector<double>> rows;
    for (std::size_t f = 0; f < fraction.size(); ++f)
        rows.push_back({static_cast<double>(f), fraction[f]});
    write_csv(out_dir / "stability.csv", {"frame", "fraction_stable"}, rows);
    write_svg_plot(out_dir / "stability.svg", "fraction of stable rollouts", {{fraction, "#2ca02c", "stable fraction"}});
    std::cout << "stability curve written to " << out_dir.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// gradient checking of the full models at tiny shapes
// ---------------------------------------------------------------------------

FdReport gradcheck_celestial(bool equivariant, std::uint64_t seed) {
    CelestialConfig mc;
    mc.width = 8;
    mc.latent = 4;
    mc.equivariant = equivariant;
    CelestialModel model(mc, seed);

    NBodyConfig gcfg;
    gcfg.n = 3;
    Rng gen(derive_seed(seed, {0xFD0, 0x1}));
    BodyState x0 = sample_initial_condition(gcfg, gen);
    BodyState x1 = euler_maruyama_step(x0, gcfg, gen);

    auto loss_value = [&](bool with_grad) {
        Tape tape(with_grad);
        Rng rng(derive_seed(seed, {0xFACE}));
        auto step = model.elbo_step(tape, x0, x1, rng);
        Tensor loss = free_bits_objective(tape, step.elbo.recon, step.elbo.kl_per_dim, 0.7, 0.0);
        if (with_grad) tape.backward(loss);
        return loss.item();
    };
    return finite_difference_check(
        model.params(), [&]() { return loss_value(true); }, [&]() { return loss_value(false); }, 1e-5, 3,
        derive_seed(seed, {0xFD5E1EC7}));
}

FdReport gradcheck_cellular(std::uint64_t seed) {
    CellularConfig mc;
    mc.n_types = 2;
    mc.embed = 4;
    mc.phi_kernel = 3;
    mc.phi_blocks = 2;
    mc.unet_widths = {4, 6, 8};
    mc.unet_kernel = 3;
    mc.latent = 3;
    mc.enc_kernel = 3;
    mc.enc_hidden = 8;
    CellularModel model(mc, seed);

    CPMConfig gcfg = make_cell_sorting_config();
    gcfg.h = 16;
    gcfg.w = 16;
    gcfg.n_cells = 3;
    gcfg.target_volume = 16;
    Rng gen(derive_seed(seed, {0xFD0, 0x2}));
    Lattice x0 = init_random_culture(gcfg, gen);
    Lattice x1 = mcs_step(x0, gcfg, gen);

    auto loss_value = [&](bool with_grad) {
        Tape tape(with_grad);
        Rng rng(derive_seed(seed, {0xFACE}));
        auto step = model.elbo_step(tape, x0, x1, rng);
        Tensor loss = free_bits_objective(tape, step.elbo.recon, step.elbo.kl_per_dim, 0.7, 0.05);
        if (with_grad) tape.backward(loss);
        return loss.item();
    };
    return finite_difference_check(
        model.params(), [&]() { return loss_value(true); }, [&]() { return loss_value(false); }, 1e-5, 2,
        derive_seed(seed, {0xFD5E1EC8}));
}

int cmd_gradcheck(const fs::path& out_dir, double tolerance) {
    fs::create_directories(out_dir);
    struct Entry {
        std::string name;
        FdReport report;
    };
    std::vector<Entry> entries;
    entries.push_back({"celestial_epns", gradcheck_celestial(true, 11)});
    entries.push_back({"celestial_pns", gradcheck_celestial(false, 12)});
    entries.push_back({"cellular_epns", gradcheck_cellular(13)});

    std::vector<std::vector<double>> rows;
    double worst = 0.0;
    for (const auto& e : entries) {
        worst = std::max(worst, e.report.worst_rel_err);
        std::cout << e.name << ": worst rel err " << e.report.worst_rel_err << " over "
                  << e.report.blocks.size() << " parameter blocks\n";
        rows.push_back({e.report.worst_rel_err});
    }
    write_csv(out_dir / "gradcheck.csv", {"worst_rel_err"}, rows);
    if (worst >= tolerance) {
        std::cout << "gradcheck FAILED: worst rel err " << worst << " >= " << tolerance << "\n";
        return 3;
    }
    std::cout << "gradcheck passed: worst rel err " << worst << " < " << tolerance << "\n";
    return 0;
}

} // namespace epns
