#include "epns/model.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace epns {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

Tensor rows_of(Tape& tape, const Tensor& row, int n) {
    std::vector<int> idx(static_cast<std::size_t>(n), 0);
    return tape.gather_rows(row, idx);
}

void assert_positive(const Tensor& sigma, const char* what) {
    // softplus cannot emit sigma <= 0; NaN/Inf pass through so that divergent
    // training steps surface as a non-finite loss and get skipped, not thrown
    for (double v : sigma.data())
        if (v <= 0.0) throw std::runtime_error(std::string(what) + ": non-positive scale parameter");
}

} // namespace

LatentSample reparameterize(Tape& tape, const GaussParams& g, const Tensor& eps) {
    LatentSample s;
    s.eps = eps;
    s.z = tape.add(g.mu, tape.mul(g.sigma, eps));
    return s;
}

Tensor gaussian_kl(Tape& tape, const GaussParams& q, const GaussParams& p) {
    // log(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2
    Tensor log_ratio = tape.sub(tape.log(p.sigma), tape.log(q.sigma));
    Tensor var_q = tape.mul(q.sigma, q.sigma);
    Tensor dmu = tape.sub(q.mu, p.mu);
    Tensor num = tape.add(var_q, tape.mul(dmu, dmu));
    Tensor den = tape.mul_scalar(tape.mul(p.sigma, p.sigma), 2.0);
    return tape.add_scalar(tape.add(log_ratio, tape.div(num, den)), -0.5);
}

Tensor categorical_recon(Tape& tape, const Tensor& logits, const Lattice& target) {
    const int n_nodes = logits.dim(0);
    const int hw = logits.dim(1) * logits.dim(2);
    if (logits.dim(1) != target.h || logits.dim(2) != target.w)
        throw ShapeError("categorical_recon: logits " + shape_str(logits.dims()) + " do not match the lattice");
    Tensor lsm = tape.log_softmax(logits, 0);
    std::vector<double> mask(static_cast<std::size_t>(n_nodes) * hw, 0.0);
    for (int px = 0; px < hw; ++px) {
        const int id = target.sites[static_cast<std::size_t>(px)];
        if (id >= n_nodes) throw ShapeError("categorical_recon: target id outside the node axis");
        mask[static_cast<std::size_t>(id) * hw + px] = 1.0;
    }
    return tape.sum_all(tape.mul(lsm, Tensor::from(logits.dims(), std::move(mask))));
}

// ---------------------------------------------------------------------------
// celestial
// ---------------------------------------------------------------------------

CelestialModel::CelestialModel(const CelestialConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(derive_seed(seed, {0xCE1E57ULL}));
    const int w = cfg_.width;
    mass_embed_ = Linear::create(params_, "mass_embed", 1, w, rng);
    if (cfg_.equivariant) {
        fwd_ = FaGnnBackbone::create(params_, "forward", w, w, cfg_.forward_layers, 2, rng);
    } else {
        fwd_plain_in_ = Linear::create(params_, "forward.embed", w + 6, w, rng);
        fwd_plain_ = MpGnn::create(params_, "forward.gnn", w, 2, cfg_.forward_layers, rng);
    }
    prior_gnn_ = MpGnn::create(params_, "prior.gnn", w, 2, cfg_.prior_layers, rng);
    prior_mu_ = Linear::create(params_, "prior.mu", w, cfg_.latent, rng);
    prior_sigma_ = Linear::create(params_, "prior.sigma", w, cfg_.latent, rng);
    post_gnn_ = MpGnn::create(params_, "posterior.gnn", w, 4, cfg_.prior_layers, rng);
    post_mu_ = Linear::create(params_, "posterior.mu", w, cfg_.latent, rng);
    post_sigma_ = Linear::create(params_, "posterior.sigma", w, cfg_.latent, rng);
    dec_in_ = Linear::create(params_, "decoder.in", w + cfg_.latent, w, rng);
    if (cfg_.equivariant) {
        dec_ = FaGnnBackbone::create(params_, "decoder", w, w, cfg_.decoder_layers, 2, rng);
    } else {
        dec_plain_in_ = Linear::create(params_, "decoder.embed", w + 6, w, rng);
        dec_plain_ = MpGnn::create(params_, "decoder.gnn", w, 2, cfg_.decoder_layers, rng);
    }
    dec_vec_ = Linear::create(params_, "decoder.vec", w, 6, rng);
    dec_sigma_ = Linear::create(params_, "decoder.sigma", w, 2, rng);
    dec_scale_ = Mlp::create(params_, "decoder.scale", w, w, 1, 2, rng);
}

CelestialModel::Hidden CelestialModel::forward_embed(Tape& tape, const BodyState& x) const {
    Hidden hid;
    hid.graph = graph_from_state(x);
    Tensor h0 = tape.relu(mass_embed_.apply(tape, hid.graph.node_invariant));
    if (cfg_.equivariant) {
        hid.frames = compute_frames(x.positions);
        auto frames = fwd_.run_frames(tape, h0, hid.graph, hid.frames);
        hid.h = fa_invariant(tape, frames);
    } else {
        Tensor in = tape.concat({h0, hid.graph.positions, hid.graph.velocities}, 1);
        const EdgeIndex edges = fully_connected_edges(hid.graph.n);
        hid.h = fwd_plain_.apply(tape, fwd_plain_in_.apply(tape, in), edges, hid.graph.edge_scalar);
    }
    return hid;
}

GaussParams CelestialModel::gauss_head(Tape& tape, const Tensor& pooled, const Linear& mu,
                                       const Linear& sigma) const {
    GaussParams g;
    g.mu = mu.apply(tape, pooled);
    g.sigma = tape.softplus(sigma.apply(tape, pooled));
    assert_positive(g.sigma, "gauss_head");
    return g;
}

GaussParams CelestialModel::prior(Tape& tape, const Hidden& hid) const {
    const EdgeIndex edges = fully_connected_edges(hid.graph.n);
    Tensor h = prior_gnn_.apply(tape, hid.h, edges, hid.graph.edge_scalar);
    std::vector<int> all_zero(static_cast<std::size_t>(hid.graph.n), 0);
    Tensor pooled = tape.segment_mean(h, all_zero, 1);
    return gauss_head(tape, pooled, prior_mu_, prior_sigma_);
}

GaussParams CelestialModel::posterior(Tape& tape, const Hidden& hid, const BodyState& next) const {
    Tensor e_next = edge_scalars_of(next);
    Tensor e = tape.concat({hid.graph.edge_scalar, e_next}, 1);
    const EdgeIndex edges = fully_connected_edges(hid.graph.n);
    Tensor h = post_gnn_.apply(tape, hid.h, edges, e);
    std::vector<int> all_zero(static_cast<std::size_t>(hid.graph.n), 0);
    Tensor pooled = tape.segment_mean(h, all_zero, 1);
    return gauss_head(tape, pooled, post_mu_, post_sigma_);
}

CelestialModel::Decoded CelestialModel::decode(Tape& tape, const Hidden& hid, const Tensor& z) const {
    const int n = hid.graph.n;
    Tensor zr = rows_of(tape, z, n); // [n, latent]
    Tensor in = tape.relu(dec_in_.apply(tape, tape.concat({hid.h, zr}, 1)));

    Tensor vec6;    // [n, 6] world-frame delta vectors
    Tensor inv_out; // [n, width] invariant embeddings for the scalar heads
    if (cfg_.equivariant) {
        auto frames = dec_.run_frames(tape, in, hid.graph, hid.frames);
        std::vector<Tensor> per_frame_vec;
        per_frame_vec.reserve(frames.size());
        for (std::size_t f = 0; f < frames.size(); ++f) {
            Tensor u = dec_vec_.apply(tape, frames[f]); // [n,6] in frame coords
            Tensor dv = tape.slice(u, 1, 0, 3);
            Tensor dp = tape.slice(u, 1, 3, 3);
            const Mat3 bt = mat3_transpose(hid.frames.bases[f]);
            Tensor btt = Tensor::from({3, 3}, std::vector<double>(bt.begin(), bt.end()));
            per_frame_vec.push_back(tape.concat({tape.matmul(dv, btt), tape.matmul(dp, btt)}, 1));
        }
        vec6 = tape.mean_stack(per_frame_vec);
        inv_out = fa_invariant(tape, frames);
    } else {
        Tensor raw = tape.concat({in, hid.graph.positions, hid.graph.velocities}, 1);
        const EdgeIndex edges = fully_connected_edges(n);
        inv_out = dec_plain_.apply(tape, dec_plain_in_.apply(tape, raw), edges, hid.graph.edge_scalar);
        vec6 = dec_vec_.apply(tape, inv_out);
    }

    Tensor mu_dv = tape.slice(vec6, 1, 0, 3);
    Tensor mu_dp = tape.slice(vec6, 1, 3, 3);
    Tensor sig = tape.add_scalar(tape.softplus(dec_sigma_.apply(tape, inv_out)), cfg_.sigma_floor);
    Tensor scale = dec_scale_.apply(tape, inv_out); // [n,1]

    Decoded d;
    d.mu_v = tape.add(hid.graph.velocities, mu_dv);
    d.mu_p = tape.add(tape.add(hid.graph.positions, tape.mul(scale, d.mu_v)), mu_dp);
    d.sigma_p = tape.slice(sig, 1, 0, 1);
    d.sigma_v = tape.slice(sig, 1, 1, 1);
    assert_positive(d.sigma_p, "decoder sigma_p");
    assert_positive(d.sigma_v, "decoder sigma_v");
    return d;
}

CelestialModel::CelestialNoise CelestialModel::draw_noise(int n, Rng& rng) const {
    CelestialNoise noise;
    std::vector<double> e(static_cast<std::size_t>(cfg_.latent));
    for (auto& v : e) v = rng.normal();
    noise.eps = Tensor::from({1, cfg_.latent}, std::move(e));
    noise.eta_p.resize(static_cast<std::size_t>(n));
    noise.eta_v.resize(static_cast<std::size_t>(n));
    for (auto& v : noise.eta_p)
        for (auto& c : v) c = rng.normal();
    for (auto& v : noise.eta_v)
        for (auto& c : v) c = rng.normal();
    return noise;
}

BodyState CelestialModel::one_step_with_noise(const BodyState& x, const CelestialNoise& noise) const {
    Tape tape(false);
    Hidden hid = forward_embed(tape, x);
    GaussParams pr = prior(tape, hid);
    LatentSample zs = reparameterize(tape, pr, noise.eps);
    Decoded dec = decode(tape, hid, zs.z);
    BodyState out = x;
    for (int i = 0; i < x.n(); ++i) {
        const double sp = dec.sigma_p.at({i, 0});
        const double sv = dec.sigma_v.at({i, 0});
        for (int k = 0; k < 3; ++k) {
            out.positions[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] =
                dec.mu_p.at({i, k}) + sp * noise.eta_p[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
            out.velocities[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] =
                dec.mu_v.at({i, k}) + sv * noise.eta_v[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
        }
    }
    return out;
}

BodyState CelestialModel::one_step_sample(const BodyState& x, Rng& rng) const {
    return one_step_with_noise(x, draw_noise(x.n(), rng));
}

BodyState CelestialModel::one_step_reconstruct(const BodyState& xhat, const BodyState& target, Rng& rng) const {
    const CelestialNoise noise = draw_noise(xhat.n(), rng);
    Tape tape(false);
    Hidden hid = forward_embed(tape, xhat);
    GaussParams q = posterior(tape, hid, target);
    LatentSample zs = reparameterize(tape, q, noise.eps);
    Decoded dec = decode(tape, hid, zs.z);
    BodyState out = xhat;
    for (int i = 0; i < xhat.n(); ++i) {
        const double sp = dec.sigma_p.at({i, 0});
        const double sv = dec.sigma_v.at({i, 0});
        for (int k = 0; k < 3; ++k) {
            out.positions[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] =
                dec.mu_p.at({i, k}) + sp * noise.eta_p[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
            out.velocities[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] =
                dec.mu_v.at({i, k}) + sv * noise.eta_v[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
        }
    }
    return out;
}

NBodyTrajectory CelestialModel::rollout(const BodyState& x0, int steps, Rng& rng, bool* truncated) const {
    NBodyTrajectory traj;
    traj.frame_interval = 0.1;
    traj.frames.push_back(x0);
    if (truncated) *truncated = false;
    BodyState cur = x0;
    for (int t = 0; t < steps; ++t) {
        cur = one_step_sample(cur, rng);
        if (!cur.finite()) {
            if (truncated) *truncated = true;
            break;
        }
        traj.frames.push_back(cur);
    }
    return traj;
}

namespace {

// sum over bodies/axes of log N(target; mu, sigma) with per-node scalar sigma
Tensor gaussian_logprob_rows(Tape& tape, const Tensor& target, const Tensor& mu, const Tensor& sigma) {
    Tensor diff = tape.sub(target, mu);
    Tensor z = tape.div(diff, sigma);
    Tensor quad = tape.mul_scalar(tape.sum_all(tape.mul(z, z)), -0.5);
    const double cols = static_cast<double>(target.dim(1));
    Tensor logsig = tape.mul_scalar(tape.sum_all(tape.log(sigma)), -cols);
    Tensor c = Tensor::scalar(-0.5 * kLog2Pi * static_cast<double>(target.size()));
    return tape.add(tape.add(quad, logsig), c);
}

} // namespace

CelestialModel::StepElbo CelestialModel::elbo_step(Tape& tape, const BodyState& xhat, const BodyState& target,
                                                   Rng& rng) const {
    const CelestialNoise noise = draw_noise(xhat.n(), rng);
    Hidden hid = forward_embed(tape, xhat);
    GaussParams q = posterior(tape, hid, target);
    GaussParams p = prior(tape, hid);
    LatentSample zs = reparameterize(tape, q, noise.eps);
    Decoded dec = decode(tape, hid, zs.z);

    Tensor target_p = graph_from_state(target).positions;
    Tensor target_v = graph_from_state(target).velocities;
    Tensor recon = tape.add(gaussian_logprob_rows(tape, target_p, dec.mu_p, dec.sigma_p),
                            gaussian_logprob_rows(tape, target_v, dec.mu_v, dec.sigma_v));
    Tensor kl = gaussian_kl(tape, q, p); // [1, latent]

    StepElbo out;
    out.elbo.recon = recon;
    out.elbo.kl_per_dim = tape.reshape(kl, {cfg_.latent});
    out.reconstruction = xhat;
    for (int i = 0; i < xhat.n(); ++i) {
        const double sp = dec.sigma_p.at({i, 0});
        const double sv = dec.sigma_v.at({i, 0});
        for (int k = 0; k < 3; ++k) {
            out.reconstruction.positions[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] =
                dec.mu_p.at({i, k}) + sp * noise.eta_p[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
            out.reconstruction.velocities[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] =
                dec.mu_v.at({i, k}) + sv * noise.eta_v[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
        }
    }
    return out;
}

double CelestialModel::one_step_elbo_value(const BodyState& x, const BodyState& next, Rng& rng) const {
    Tape tape(false);
    StepElbo step = elbo_step(tape, x, next, rng);
    double kl = 0.0;
    for (double v : step.elbo.kl_per_dim.data()) kl += v;
    return step.elbo.recon.item() - kl;
}

// ---------------------------------------------------------------------------
// cellular
// ---------------------------------------------------------------------------

CellularModel::EncoderNet CellularModel::make_encoder(const std::string& name, int in_ch, Rng& rng) {
    EncoderNet net;
    const int k = cfg_.enc_kernel;
    const int pad = (k - 1) / 2;
    net.in_conv = Conv2d::create(params_, name + ".in", in_ch, cfg_.embed, k, 1, pad, rng);
    for (int b = 0; b < 3; ++b)
        net.blocks.push_back(Conv2d::create(params_, name + ".b" + std::to_string(b), cfg_.embed, cfg_.embed, k, 1, pad, rng));
    net.hidden = Linear::create(params_, name + ".hidden", cfg_.embed, cfg_.enc_hidden, rng);
    net.mu = Linear::create(params_, name + ".mu", cfg_.enc_hidden, cfg_.latent, rng);
    net.sigma = Linear::create(params_, name + ".sigma", cfg_.enc_hidden, cfg_.latent, rng);
    return net;
}

CellularModel::CellularModel(const CellularConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(derive_seed(seed, {0xCE11ULL}));
    embed_conv_ = Conv2d::create(params_, "embed", cfg_.n_types + 2, cfg_.embed, 1, 1, 0, rng);
    fwd_layer_ = SpatialConvLayer::create(params_, "forward", cfg_.embed, cfg_.phi_kernel, cfg_.phi_blocks,
                                          cfg_.unet_widths, cfg_.unet_kernel, rng);
    prior_net_ = make_encoder("prior", cfg_.embed, rng);
    posterior_net_ = make_encoder("posterior", cfg_.embed + cfg_.n_types + 2, rng);
    dec_layer_ = SpatialConvLayer::create(params_, "decoder", cfg_.embed + cfg_.latent, cfg_.phi_kernel,
                                          cfg_.phi_blocks, cfg_.unet_widths, cfg_.unet_kernel, rng);
    dec_out_ = Conv2d::create(params_, "decoder.out", cfg_.embed + cfg_.latent, 1, 1, 1, 0, rng);
}

CellularModel::Hidden CellularModel::forward_embed(Tape& tape, const Lattice& x) const {
    CellNodeGrid raw = encode_onehot_cells(x, cfg_.n_types);
    CellNodeGrid embedded;
    embedded.h = raw.h;
    embedded.w = raw.w;
    embedded.nodes.reserve(raw.nodes.size());
    for (const Tensor& node : raw.nodes) embedded.nodes.push_back(embed_conv_.apply(tape, node));
    Hidden hid;
    hid.h = fwd_layer_.apply(tape, embedded);
    hid.x = &x;
    return hid;
}

GaussParams CellularModel::run_encoder(Tape& tape, const EncoderNet& net, const std::vector<Tensor>& node_inputs) const {
    std::vector<Tensor> mus, sigmas;
    mus.reserve(node_inputs.size());
    sigmas.reserve(node_inputs.size());
    for (const Tensor& node : node_inputs) {
        Tensor f = tape.relu(net.in_conv.apply(tape, node));
        for (const auto& conv : net.blocks) f = tape.pool2d(tape.relu(conv.apply(tape, f)), PoolKind::Max, 2);
        Tensor pooled = tape.reshape(tape.global_mean_pool(f), {1, cfg_.embed});
        Tensor hid = tape.relu(net.hidden.apply(tape, pooled));
        mus.push_back(net.mu.apply(tape, hid));
        sigmas.push_back(tape.softplus(net.sigma.apply(tape, hid)));
    }
    GaussParams g;
    g.mu = tape.concat(mus, 0);
    g.sigma = tape.concat(sigmas, 0);
    assert_positive(g.sigma, "cellular encoder");
    return g;
}

GaussParams CellularModel::prior(Tape& tape, const Hidden& hid) const {
    return run_encoder(tape, prior_net_, hid.h.nodes);
}

GaussParams CellularModel::posterior(Tape& tape, const Hidden& hid, const Lattice& next) const {
    CellNodeGrid next_raw = encode_onehot_cells(next, cfg_.n_types);
    if (next_raw.n_nodes() != hid.h.n_nodes())
        throw std::runtime_error("posterior: cell count mismatch between steps");
    std::vector<Tensor> ins;
    ins.reserve(hid.h.nodes.size());
    for (std::size_t k = 0; k < hid.h.nodes.size(); ++k)
        ins.push_back(tape.concat({hid.h.nodes[k], next_raw.nodes[k]}, 0));
    return run_encoder(tape, posterior_net_, ins);
}

Tensor CellularModel::decode_logits(Tape& tape, const Hidden& hid, const Tensor& z) const {
    const int n_nodes = hid.h.n_nodes();
    CellNodeGrid grid;
    grid.h = hid.h.h;
    grid.w = hid.h.w;
    grid.nodes.reserve(static_cast<std::size_t>(n_nodes));
    for (int k = 0; k < n_nodes; ++k) {
        Tensor zk = tape.reshape(tape.slice(z, 0, k, 1), {cfg_.latent});
        grid.nodes.push_back(tape.concat({hid.h.nodes[static_cast<std::size_t>(k)],
                                          tape.tile_spatial(zk, grid.h, grid.w)}, 0));
    }
    CellNodeGrid out = dec_layer_.apply(tape, grid);
    std::vector<Tensor> logits;
    logits.reserve(out.nodes.size());
    for (const Tensor& node : out.nodes) logits.push_back(dec_out_.apply(tape, node));
    return tape.concat(logits, 0); // [n_nodes, h, w]
}

CellularModel::CellularNoise CellularModel::draw_noise(int n_nodes, int hw, Rng& rng, bool categorical) const {
    CellularNoise noise;
    std::vector<double> e(static_cast<std::size_t>(n_nodes) * cfg_.latent);
    for (auto& v : e) v = rng.normal();
    noise.eps = Tensor::from({n_nodes, cfg_.latent}, std::move(e));
    if (categorical) {
        noise.gumbel.resize(static_cast<std::size_t>(n_nodes) * hw);
        for (auto& v : noise.gumbel) v = rng.gumbel();
    }
    return noise;
}

Lattice CellularModel::emit(const Tensor& logits, const Lattice& x, const std::vector<double>& gumbel) const {
    const int n_nodes = logits.dim(0);
    const int hw = logits.dim(1) * logits.dim(2);
    Lattice out = x;
    out.frame_index = x.frame_index + 1;
    for (int px = 0; px < hw; ++px) {
        int best = 0;
        double best_v = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < n_nodes; ++k) {
            double v = logits.data()[static_cast<std::size_t>(k) * hw + px];
            if (!gumbel.empty()) v += gumbel[static_cast<std::size_t>(k) * hw + px];
            if (v > best_v) {
                best_v = v;
                best = k;
            }
        }
        out.sites[static_cast<std::size_t>(px)] = static_cast<std::uint16_t>(best);
    }
    return out;
}

Lattice CellularModel::one_step_with_noise(const Lattice& x, const CellularNoise& noise) const {
    Tape tape(false);
    Hidden hid = forward_embed(tape, x);
    GaussParams pr = prior(tape, hid);
    LatentSample zs = reparameterize(tape, pr, noise.eps);
    Tensor logits = decode_logits(tape, hid, zs.z);
    return emit(logits, x, noise.gumbel);
}

Lattice CellularModel::one_step_sample(const Lattice& x, Rng& rng) const {
    return one_step_with_noise(x, draw_noise(x.n_cells() + 1, x.h * x.w, rng, cfg_.sample_categorical));
}

Lattice CellularModel::one_step_reconstruct(const Lattice& xhat, const Lattice& target, Rng& rng) const {
    const CellularNoise noise = draw_noise(xhat.n_cells() + 1, xhat.h * xhat.w, rng, cfg_.sample_categorical);
    Tape tape(false);
    Hidden hid = forward_embed(tape, xhat);
    GaussParams q = posterior(tape, hid, target);
    LatentSample zs = reparameterize(tape, q, noise.eps);
    Tensor logits = decode_logits(tape, hid, zs.z);
    return emit(logits, xhat, noise.gumbel);
}

CpmTrajectory CellularModel::rollout(const Lattice& x0, int steps, Rng& rng, bool* truncated) const {
    CpmTrajectory traj;
    traj.cell_types = x0.cell_types;
    traj.frames.push_back(x0);
    if (truncated) *truncated = false;
    Lattice cur = x0;
    for (int t = 0; t < steps; ++t) {
        cur = one_step_sample(cur, rng);
        traj.frames.push_back(cur);
    }
    return traj;
}

CellularModel::StepElbo CellularModel::elbo_step(Tape& tape, const Lattice& xhat, const Lattice& target,
                                                 Rng& rng) const {
    const int n_nodes = xhat.n_cells() + 1;
    const CellularNoise noise = draw_noise(n_nodes, xhat.h * xhat.w, rng, cfg_.sample_categorical);
    Hidden hid = forward_embed(tape, xhat);
    GaussParams q = posterior(tape, hid, target);
    GaussParams p = prior(tape, hid);
    LatentSample zs = reparameterize(tape, q, noise.eps);
    Tensor logits = decode_logits(tape, hid, zs.z);
    Tensor recon = categorical_recon(tape, logits, target);
    Tensor kl = gaussian_kl(tape, q, p); // [n_nodes, latent]
    // free-bits clamping happens per latent dim after summing over the cells
    Tensor ones = Tensor::from({1, n_nodes}, std::vector<double>(static_cast<std::size_t>(n_nodes), 1.0));
    Tensor kl_per_dim = tape.reshape(tape.matmul(ones, kl), {cfg_.latent});

    StepElbo out;
    out.elbo.recon = recon;
    out.elbo.kl_per_dim = kl_per_dim;
    out.reconstruction = emit(logits, xhat, noise.gumbel);
    return out;
}

double CellularModel::one_step_elbo_value(const Lattice& x, const Lattice& next, Rng& rng) const {
    Tape tape(false);
    StepElbo step = elbo_step(tape, x, next, rng);
    double kl = 0.0;
    for (double v : step.elbo.kl_per_dim.data()) kl += v;
    return step.elbo.recon.item() - kl;
}

} // namespace epns
