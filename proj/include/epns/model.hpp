#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "epns/cellgrid.hpp"
#include "epns/cpm.hpp"
#include "epns/graph.hpp"
#include "epns/nbody.hpp"
#include "epns/nn.hpp"

namespace epns {

struct GaussParams {
    Tensor mu;    // [rows, latent]
    Tensor sigma; // [rows, latent], strictly positive
};

// z = mu + sigma * eps, recorded with its noise
struct LatentSample {
    Tensor z;
    Tensor eps; // constant
};

LatentSample reparameterize(Tape& tape, const GaussParams& g, const Tensor& eps);
// KL(q || p) per latent entry, same shape as mu
Tensor gaussian_kl(Tape& tape, const GaussParams& q, const GaussParams& p);
// log-likelihood of the target's cell ids under per-pixel categorical logits
// [n_nodes, h, w], softmax taken along the node axis
Tensor categorical_recon(Tape& tape, const Tensor& logits, const Lattice& target);

struct ElboParts {
    Tensor recon;      // scalar log-likelihood of the target under the decoder
    Tensor kl_per_dim; // [latent]; for cellular models already summed over cells
};

// ---------------------------------------------------------------------------
// celestial dynamics
// ---------------------------------------------------------------------------

struct CelestialConfig {
    int width = 128;
    int forward_layers = 5;
    int prior_layers = 5;
    int decoder_layers = 3;
    int latent = 16;
    bool equivariant = true; // false: PNS ablation (plain message passing GNN)
    double sigma_floor = 1e-4;
};

class CelestialModel {
public:
    CelestialModel(const CelestialConfig& cfg, std::uint64_t seed);

    const CelestialConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    struct Hidden {
        Tensor h; // [n, width]
        GeometricGraph graph;
        FrameSet frames; // unused by the PNS variant
    };

    Hidden forward_embed(Tape& tape, const BodyState& x) const;
    GaussParams prior(Tape& tape, const Hidden& hid) const;
    GaussParams posterior(Tape& tape, const Hidden& hid, const BodyState& next) const;

    struct Decoded {
        Tensor mu_p, mu_v;       // [n, 3]
        Tensor sigma_p, sigma_v; // [n, 1] per-node isotropic scales
    };
    Decoded decode(Tape& tape, const Hidden& hid, const Tensor& z) const;

    struct CelestialNoise {
        Tensor eps;              // [1, latent]
        std::vector<Vec3> eta_p; // decoder position noise, one per body
        std::vector<Vec3> eta_v;
    };
    CelestialNoise draw_noise(int n, Rng& rng) const;

    BodyState one_step_sample(const BodyState& x, Rng& rng) const;
    BodyState one_step_with_noise(const BodyState& x, const CelestialNoise& noise) const;
    BodyState one_step_reconstruct(const BodyState& xhat, const BodyState& target, Rng& rng) const;

    NBodyTrajectory rollout(const BodyState& x0, int steps, Rng& rng, bool* truncated = nullptr) const;

    struct StepElbo {
        ElboParts elbo;
        BodyState reconstruction; // posterior-guided sample for the next step
    };
    // Posterior-guided one-step ELBO; all noise drawn from rng.
    StepElbo elbo_step(Tape& tape, const BodyState& xhat, const BodyState& target, Rng& rng) const;
    // Plain ELBO value (recon - KL), no gradients; used for validation/test.
    double one_step_elbo_value(const BodyState& x, const BodyState& next, Rng& rng) const;

    using State = BodyState;

private:
    CelestialConfig cfg_;
    ParamStore params_;

    Linear mass_embed_;  // 1 -> width
    FaGnnBackbone fwd_;  // equivariant forward trunk
    MpGnn fwd_plain_;    // PNS trunk
    Linear fwd_plain_in_;
    MpGnn prior_gnn_;
    Linear prior_mu_, prior_sigma_;
    MpGnn post_gnn_;
    Linear post_mu_, post_sigma_;
    FaGnnBackbone dec_;
    MpGnn dec_plain_;
    Linear dec_plain_in_;
    Linear dec_vec_;                 // width -> 6 (delta-v, delta-p)
    Linear dec_sigma_;               // width -> 2
    Mlp dec_scale_;                  // width -> 1, the velocity-effect scale
    Linear dec_in_;                  // width+latent -> width (pre-trunk mix, equivariant path)

    GaussParams gauss_head(Tape& tape, const Tensor& pooled, const Linear& mu, const Linear& sigma) const;
};

// ---------------------------------------------------------------------------
// cellular dynamics
// ---------------------------------------------------------------------------

struct CellularConfig {
    int n_types = 2;
    int embed = 32;
    int phi_kernel = 9;
    int phi_blocks = 3;
    std::vector<int> unet_widths = {64, 128, 256};
    int unet_kernel = 5;
    int latent = 64; // per cell
    int enc_kernel = 9;
    int enc_hidden = 128;
    double sigma_floor = 1e-4;
    bool sample_categorical = false; // default argmax emission
};

class CellularModel {
public:
    CellularModel(const CellularConfig& cfg, std::uint64_t seed);

    const CellularConfig& config() const { return cfg_; }
    CellularConfig& mutable_config() { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    struct Hidden {
        CellNodeGrid h; // [embed, h, w] per node
        const Lattice* x = nullptr;
    };

    Hidden forward_embed(Tape& tape, const Lattice& x) const;
    // one (mu, sigma) row per node, [n_nodes, latent]
    GaussParams prior(Tape& tape, const Hidden& hid) const;
    GaussParams posterior(Tape& tape, const Hidden& hid, const Lattice& next) const;

    // pixel-wise categorical logits over the node axis, [n_nodes, h, w]
    Tensor decode_logits(Tape& tape, const Hidden& hid, const Tensor& z) const;

    struct CellularNoise {
        Tensor eps;                  // [n_nodes, latent]
        std::vector<double> gumbel;  // per (node, pixel), empty unless sampling
    };
    CellularNoise draw_noise(int n_nodes, int hw, Rng& rng, bool categorical) const;

    Lattice one_step_sample(const Lattice& x, Rng& rng) const;
    Lattice one_step_with_noise(const Lattice& x, const CellularNoise& noise) const;
    Lattice one_step_reconstruct(const Lattice& xhat, const Lattice& target, Rng& rng) const;

    CpmTrajectory rollout(const Lattice& x0, int steps, Rng& rng, bool* truncated = nullptr) const;

    struct StepElbo {
        ElboParts elbo;
        Lattice reconstruction;
    };
    StepElbo elbo_step(Tape& tape, const Lattice& xhat, const Lattice& target, Rng& rng) const;
    double one_step_elbo_value(const Lattice& x, const Lattice& next, Rng& rng) const;

    using State = Lattice;

private:
    CellularConfig cfg_;
    ParamStore params_;

    Conv2d embed_conv_; // 1x1, (n_types+2) -> embed
    SpatialConvLayer fwd_layer_;

    struct EncoderNet {
        Conv2d in_conv;
        std::vector<Conv2d> blocks; // conv -> ReLU -> maxpool, 3x
        Linear hidden;
        Linear mu, sigma;
    };
    EncoderNet prior_net_, posterior_net_;
    SpatialConvLayer dec_layer_;
    Conv2d dec_out_; // 1x1 -> 1 channel per node

    EncoderNet make_encoder(const std::string& name, int in_ch, Rng& rng);
    GaussParams run_encoder(Tape& tape, const EncoderNet& net, const std::vector<Tensor>& node_inputs) const;
    Lattice emit(const Tensor& logits, const Lattice& x, const std::vector<double>& gumbel) const;
};

} // namespace epns
