#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "epns/pipeline.hpp"

namespace {

// exit codes: 0 success, 1 usage, 2 runtime failure, 3 validation failure
constexpr int kExitRuntime = 2;

epns::RunConfig resolve_config(const std::string& config_path, const std::string& system, const std::string& preset,
                               std::uint64_t seed, const std::string& variant, int workers) {
    epns::RunConfig cfg;
    if (!config_path.empty()) {
        cfg = epns::load_run_config(config_path);
    } else {
        cfg = epns::make_preset(system, preset);
    }
    if (seed != 0) cfg.seed = seed;
    if (!variant.empty()) cfg.variant = variant;
    if (workers > 0) cfg.workers = workers;
    cfg.train.seed = cfg.seed;
    cfg.train.workers = cfg.workers;
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"EPNS: equivariant probabilistic neural simulation at desk scale"};
    app.require_subcommand(1);

    std::string config_path, system = "celestial", preset = "desk", variant, split = "test";
    std::string data_dir, out_dir = "out", checkpoint;
    std::uint64_t seed = 0;
    int workers = 0, members = 100, steps = 0, x0_count = 25, rollouts_per_x0 = 10;
    bool resume = false;
    double tolerance = 1e-4;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON run-config file");
        cmd->add_option("--system", system, "celestial | cellular")->check(CLI::IsMember({"celestial", "cellular"}));
        cmd->add_option("--preset", preset, "desk | paper")->check(CLI::IsMember({"desk", "paper"}));
        cmd->add_option("--seed", seed, "override the run seed");
        cmd->add_option("--workers", workers, "worker thread count");
        cmd->add_option("--out", out_dir, "output directory");
    };

    CLI::App* gen = app.add_subcommand("generate", "generate a ground-truth dataset");
    add_common(gen);

    CLI::App* train = app.add_subcommand("train", "train a model on a dataset");
    add_common(train);
    train->add_option("--data", data_dir, "dataset directory")->required();
    train->add_option("--variant", variant, "epns | pns")->check(CLI::IsMember({"epns", "pns"}));
    train->add_flag("--resume", resume, "resume from checkpoint_last.bin in --out");

    CLI::App* sim = app.add_subcommand("simulate", "sample a rollout ensemble from a checkpoint");
    sim->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    sim->add_option("--data", data_dir, "dataset directory (provides x0)")->required();
    sim->add_option("--out", out_dir, "output directory");
    sim->add_option("--members", members, "ensemble size");
    sim->add_option("--steps", steps, "rollout steps (default: dataset trajectory length)");
    sim->add_option("--seed", seed, "sampling seed");
    sim->add_option("--workers", workers, "worker thread count");

    CLI::App* eval = app.add_subcommand("evaluate", "test ELBO, D_KS table and quantile bands");
    eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    eval->add_option("--data", data_dir, "dataset directory")->required();
    eval->add_option("--out", out_dir, "output directory");
    eval->add_option("--members", members, "ensemble size");
    eval->add_option("--seed", seed, "sampling seed");
    eval->add_option("--workers", workers, "worker thread count");

    CLI::App* veq = app.add_subcommand("verify-equivariance", "statistical equivariance protocol");
    veq->add_option("--checkpoint", checkpoint, "model checkpoint (omit to test the ground-truth generator)");
    veq->add_option("--data", data_dir, "dataset directory")->required();
    veq->add_option("--out", out_dir, "output directory");
    veq->add_option("--x0s", x0_count, "number of initial states");
    veq->add_option("--rollouts-per-x0", rollouts_per_x0, "rollouts per initial state");
    veq->add_option("--seed", seed, "protocol seed");

    CLI::App* stab = app.add_subcommand("stability", "fraction of stable rollouts over time");
    stab->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    stab->add_option("--data", data_dir, "dataset directory")->required();
    stab->add_option("--out", out_dir, "output directory");
    stab->add_option("--steps", steps, "rollout length")->required();
    stab->add_option("--seed", seed, "sampling seed");
    stab->add_option("--workers", workers, "worker thread count");

    CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference verification of model gradients");
    grad->add_option("--out", out_dir, "output directory");
    grad->add_option("--tolerance", tolerance, "max allowed relative error");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e); // CLI11 prints the message; nonzero on bad usage
    }

    try {
        if (gen->parsed()) {
            return epns::cmd_generate(resolve_config(config_path, system, preset, seed, variant, workers), out_dir);
        }
        if (train->parsed()) {
            return epns::cmd_train(resolve_config(config_path, system, preset, seed, variant, workers), data_dir,
                                   out_dir, resume);
        }
        if (sim->parsed()) {
            return epns::cmd_simulate(checkpoint, data_dir, out_dir, members, steps,
                                      seed ? seed : 1234, workers > 0 ? workers : 2);
        }
        if (eval->parsed()) {
            return epns::cmd_evaluate(checkpoint, data_dir, out_dir, members, seed ? seed : 1234,
                                      workers > 0 ? workers : 2);
        }
        if (veq->parsed()) {
            std::optional<epns::fs::path> ckpt;
            if (!checkpoint.empty()) ckpt = checkpoint;
            return epns::cmd_verify_equivariance(ckpt, data_dir, out_dir, x0_count, rollouts_per_x0,
                                                 seed ? seed : 1234);
        }
        if (stab->parsed()) {
            return epns::cmd_stability(checkpoint, data_dir, out_dir, steps, seed ? seed : 1234,
                                       workers > 0 ? workers : 2);
        }
        if (grad->parsed()) {
            return epns::cmd_gradcheck(out_dir, tolerance);
        }
    } catch (const epns::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const epns::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return 1;
}
