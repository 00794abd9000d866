#include "epns/config.hpp"

#include <fstream>

#include <json.hpp>

namespace epns {

using nlohmann::json;

RunConfig make_preset(const std::string& system, const std::string& preset) {
    if (system != "celestial" && system != "cellular") throw ConfigError("unknown system: " + system);
    if (preset != "desk" && preset != "paper") throw ConfigError("unknown preset: " + preset);
    RunConfig cfg;
    cfg.system = system;
    cfg.preset = preset;
    cfg.cpm = make_cell_sorting_config();

    if (system == "celestial") {
        cfg.train.beta1 = 0.9;
        cfg.train.beta2 = 0.999;
        cfg.train.adam_eps = 1e-8;
        cfg.train.free_bits = 0.0;
        if (preset == "paper") {
            cfg.counts = {800, 100, 100};
            cfg.celestial_model.width = 128;
            cfg.train.epochs = 40000;
            cfg.train.batch_size = 64;
            cfg.train.rollout_k = 16;
            cfg.train.beta_increment = 0.005;
            cfg.train.beta_period = 200;
        } else {
            cfg.counts = {80, 10, 10};
            cfg.celestial_model.width = 64;
            cfg.train.epochs = 60;
            cfg.train.batch_size = 8;
            cfg.train.rollout_k = 8;
            cfg.train.beta_increment = 0.02;
            cfg.train.beta_period = 1;
        }
    } else {
        cfg.train.beta1 = 0.9;
        cfg.train.beta2 = 0.9;
        cfg.train.adam_eps = 1e-6;
        cfg.train.free_bits = 0.1175;
        cfg.train.beta_increment = 0.04;
        cfg.train.beta_period = 1;
        cfg.cellular_model.n_types = cfg.cpm.n_types;
        if (preset == "paper") {
            cfg.counts = {800, 100, 100};
            cfg.cellular_model.embed = 32;
            cfg.cellular_model.phi_kernel = 9;
            cfg.cellular_model.unet_widths = {64, 128, 256};
            cfg.cellular_model.unet_kernel = 5;
            cfg.cellular_model.latent = 64;
            cfg.cellular_model.enc_kernel = 9;
            cfg.cellular_model.enc_hidden = 128;
            cfg.train.epochs = 180;
            cfg.train.batch_size = 8;
            cfg.train.rollout_k = 14;
        } else {
            cfg.counts = {80, 10, 10};
            cfg.cellular_model.embed = 8;
            cfg.cellular_model.phi_kernel = 3;
            cfg.cellular_model.unet_widths = {6, 8, 12};
            cfg.cellular_model.unet_kernel = 3;
            cfg.cellular_model.latent = 4;
            cfg.cellular_model.enc_kernel = 3;
            cfg.cellular_model.enc_hidden = 32;
            cfg.train.epochs = 20;
            cfg.train.batch_size = 4;
            cfg.train.rollout_k = 4;
        }
    }
    return cfg;
}

namespace {

json to_json_tree(const RunConfig& c) {
    json j;
    j["system"] = c.system;
    j["preset"] = c.preset;
    j["variant"] = c.variant;
    j["seed"] = c.seed;
    j["workers"] = c.workers;
    j["counts"] = {{"train", c.counts.train}, {"val", c.counts.val}, {"test", c.counts.test}};
    j["nbody"] = {{"n", c.nbody.n},
                  {"grav_const", c.nbody.grav_const},
                  {"softening", c.nbody.softening},
                  {"noise_scale", c.nbody.noise_scale},
                  {"dt", c.nbody.dt},
                  {"steps_per_frame", c.nbody.steps_per_frame},
                  {"frames", c.nbody.frames},
                  {"energy_jump_limit", c.nbody.energy_jump_limit}};
    j["cpm"] = {{"h", c.cpm.h},
                {"w", c.cpm.w},
                {"n_cells", c.cpm.n_cells},
                {"n_types", c.cpm.n_types},
                {"contact", c.cpm.contact},
                {"target_volume", c.cpm.target_volume},
                {"volume_weight", c.cpm.volume_weight},
                {"temperature", c.cpm.temperature},
                {"mcs_per_frame", c.cpm.mcs_per_frame},
                {"frames", c.cpm.frames},
                {"burn_in_mcs", c.cpm.burn_in_mcs}};
    j["celestial_model"] = {{"width", c.celestial_model.width},
                            {"forward_layers", c.celestial_model.forward_layers},
                            {"prior_layers", c.celestial_model.prior_layers},
                            {"decoder_layers", c.celestial_model.decoder_layers},
                            {"latent", c.celestial_model.latent},
                            {"sigma_floor", c.celestial_model.sigma_floor}};
    j["cellular_model"] = {{"embed", c.cellular_model.embed},
                           {"phi_kernel", c.cellular_model.phi_kernel},
                           {"phi_blocks", c.cellular_model.phi_blocks},
                           {"unet_widths", c.cellular_model.unet_widths},
                           {"unet_kernel", c.cellular_model.unet_kernel},
                           {"latent", c.cellular_model.latent},
                           {"enc_kernel", c.cellular_model.enc_kernel},
                           {"enc_hidden", c.cellular_model.enc_hidden},
                           {"sigma_floor", c.cellular_model.sigma_floor},
                           {"sample_categorical", c.cellular_model.sample_categorical}};
    j["train"] = {{"epochs", c.train.epochs},
                  {"lr", c.train.lr},
                  {"weight_decay", c.train.weight_decay},
                  {"beta1", c.train.beta1},
                  {"beta2", c.train.beta2},
                  {"adam_eps", c.train.adam_eps},
                  {"batch_size", c.train.batch_size},
                  {"rollout_k", c.train.rollout_k},
                  {"beta_increment", c.train.beta_increment},
                  {"beta_period", c.train.beta_period},
                  {"free_bits", c.train.free_bits},
                  {"grad_clip", c.train.grad_clip},
                  {"val_pairs_per_traj", c.train.val_pairs_per_traj}};
    return j;
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

RunConfig from_json_tree(const json& j) {
    const std::string system = j.value("system", std::string("celestial"));
    const std::string preset = j.value("preset", std::string("desk"));
    RunConfig c = make_preset(system, preset);
    maybe(j, "variant", c.variant);
    if (c.variant != "epns" && c.variant != "pns") throw ConfigError("unknown variant: " + c.variant);
    maybe(j, "seed", c.seed);
    maybe(j, "workers", c.workers);
    if (j.contains("counts")) {
        const json& s = j.at("counts");
        maybe(s, "train", c.counts.train);
        maybe(s, "val", c.counts.val);
        maybe(s, "test", c.counts.test);
    }
    if (j.contains("nbody")) {
        const json& s = j.at("nbody");
        maybe(s, "n", c.nbody.n);
        maybe(s, "grav_const", c.nbody.grav_const);
        maybe(s, "softening", c.nbody.softening);
        maybe(s, "noise_scale", c.nbody.noise_scale);
        maybe(s, "dt", c.nbody.dt);
        maybe(s, "steps_per_frame", c.nbody.steps_per_frame);
        maybe(s, "frames", c.nbody.frames);
        maybe(s, "energy_jump_limit", c.nbody.energy_jump_limit);
    }
    if (j.contains("cpm")) {
        const json& s = j.at("cpm");
        maybe(s, "h", c.cpm.h);
        maybe(s, "w", c.cpm.w);
        maybe(s, "n_cells", c.cpm.n_cells);
        maybe(s, "n_types", c.cpm.n_types);
        maybe(s, "contact", c.cpm.contact);
        maybe(s, "target_volume", c.cpm.target_volume);
        maybe(s, "volume_weight", c.cpm.volume_weight);
        maybe(s, "temperature", c.cpm.temperature);
        maybe(s, "mcs_per_frame", c.cpm.mcs_per_frame);
        maybe(s, "frames", c.cpm.frames);
        maybe(s, "burn_in_mcs", c.cpm.burn_in_mcs);
        c.cellular_model.n_types = c.cpm.n_types;
    }
    if (j.contains("celestial_model")) {
        const json& s = j.at("celestial_model");
        maybe(s, "width", c.celestial_model.width);
        maybe(s, "forward_layers", c.celestial_model.forward_layers);
        maybe(s, "prior_layers", c.celestial_model.prior_layers);
        maybe(s, "decoder_layers", c.celestial_model.decoder_layers);
        maybe(s, "latent", c.celestial_model.latent);
        maybe(s, "sigma_floor", c.celestial_model.sigma_floor);
    }
    if (j.contains("cellular_model")) {
        const json& s = j.at("cellular_model");
        maybe(s, "embed", c.cellular_model.embed);
        maybe(s, "phi_kernel", c.cellular_model.phi_kernel);
        maybe(s, "phi_blocks", c.cellular_model.phi_blocks);
        maybe(s, "unet_widths", c.cellular_model.unet_widths);
        maybe(s, "unet_kernel", c.cellular_model.unet_kernel);
        maybe(s, "latent", c.cellular_model.latent);
        maybe(s, "enc_kernel", c.cellular_model.enc_kernel);
        maybe(s, "enc_hidden", c.cellular_model.enc_hidden);
        maybe(s, "sigma_floor", c.cellular_model.sigma_floor);
        maybe(s, "sample_categorical", c.cellular_model.sample_categorical);
    }
    if (j.contains("train")) {
        const json& s = j.at("train");
        maybe(s, "epochs", c.train.epochs);
        maybe(s, "lr", c.train.lr);
        maybe(s, "weight_decay", c.train.weight_decay);
        maybe(s, "beta1", c.train.beta1);
        maybe(s, "beta2", c.train.beta2);
        maybe(s, "adam_eps", c.train.adam_eps);
        maybe(s, "batch_size", c.train.batch_size);
        maybe(s, "rollout_k", c.train.rollout_k);
        maybe(s, "beta_increment", c.train.beta_increment);
        maybe(s, "beta_period", c.train.beta_period);
        maybe(s, "free_bits", c.train.free_bits);
        maybe(s, "grad_clip", c.train.grad_clip);
        maybe(s, "val_pairs_per_traj", c.train.val_pairs_per_traj);
    }
    c.celestial_model.equivariant = c.variant == "epns";
    c.train.workers = c.workers;
    c.train.seed = c.seed;
    if (c.train.rollout_k < 1) throw ConfigError("rollout_k must be >= 1");
    return c;
}

} // namespace

std::string run_config_to_json(const RunConfig& cfg) { return to_json_tree(cfg).dump(2); }

RunConfig run_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    return from_json_tree(j);
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path.string());
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return run_config_from_json(text);
}

void save_run_config(const fs::path& path, const RunConfig& cfg) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ConfigError("cannot write config file: " + path.string());
    os << run_config_to_json(cfg) << "\n";
}

std::uint64_t run_config_hash(const RunConfig& cfg) {
    const std::string s = run_config_to_json(cfg);
    return fnv1a(s.data(), s.size());
}

} // namespace epns
