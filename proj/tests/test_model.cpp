#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "epns/model.hpp"

using namespace epns;

namespace {

CelestialConfig small_celestial() {
    CelestialConfig c;
    c.width = 12;
    c.forward_layers = 2;
    c.prior_layers = 2;
    c.decoder_layers = 2;
    c.latent = 4;
    return c;
}

CellularConfig small_cellular() {
    CellularConfig c;
    c.n_types = 2;
    c.embed = 4;
    c.phi_kernel = 3;
    c.phi_blocks = 2;
    c.unet_widths = {4, 6, 8};
    c.unet_kernel = 3;
    c.latent = 3;
    c.enc_kernel = 3;
    c.enc_hidden = 8;
    return c;
}

BodyState random_state(int n, Rng& rng) {
    BodyState s;
    for (int i = 0; i < n; ++i) {
        s.masses.push_back(rng.uniform(0.5, 2.0));
        s.positions.push_back({rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)});
        s.velocities.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    }
    return s;
}

BodyState transform_state(const BodyState& s, const Mat3& r, const Vec3& t) {
    BodyState g = s;
    for (std::size_t i = 0; i < s.positions.size(); ++i) {
        g.positions[i] = mat3_apply(r, s.positions[i]);
        for (int k = 0; k < 3; ++k) g.positions[i][static_cast<std::size_t>(k)] += t[static_cast<std::size_t>(k)];
        g.velocities[i] = mat3_apply(r, s.velocities[i]);
    }
    return g;
}

Lattice small_lattice(std::uint64_t seed, int cells = 4) {
    CPMConfig cfg = make_cell_sorting_config();
    cfg.h = 16;
    cfg.w = 16;
    cfg.n_cells = cells;
    cfg.target_volume = 16;
    Rng rng(seed);
    return init_random_culture(cfg, rng);
}

} // namespace

TEST_CASE("latent reparameterization and gaussian KL closed forms") {
    Tape tape;
    GaussParams q{Tensor::from({1, 3}, {1, 1, 1}), Tensor::from({1, 3}, {1, 1, 1})};
    GaussParams p{Tensor::from({1, 3}, {0, 0, 0}), Tensor::from({1, 3}, {1, 1, 1})};
    Tensor kl = gaussian_kl(tape, q, p);
    for (double v : kl.data()) CHECK(v == doctest::Approx(0.5)); // KL(N(1,1)||N(0,1)) = 1/2 per dim

    Tensor kl0 = gaussian_kl(tape, q, q);
    for (double v : kl0.data()) CHECK(v == doctest::Approx(0.0));

    // z = mu + sigma*eps holds exactly
    Tensor eps = Tensor::from({1, 3}, {0.3, -1.2, 0.7});
    LatentSample s = reparameterize(tape, q, eps);
    for (int j = 0; j < 3; ++j)
        CHECK(s.z.at({0, j}) == q.mu.at({0, j}) + q.sigma.at({0, j}) * eps.at({0, j}));

    // KL >= 0 on random parameters
    Rng rng(4);
    for (int rep = 0; rep < 50; ++rep) {
        GaussParams a{Tensor::from({1, 1}, {rng.uniform(-2, 2)}), Tensor::from({1, 1}, {rng.uniform(0.1, 3)})};
        GaussParams b{Tensor::from({1, 1}, {rng.uniform(-2, 2)}), Tensor::from({1, 1}, {rng.uniform(0.1, 3)})};
        CHECK(gaussian_kl(tape, a, b).item() >= 0.0);
    }
}

TEST_CASE("categorical reconstruction closed forms") {
    // mass 1 on the truth -> 0; mass 1/e on the truth -> -1 per pixel
    Lattice target;
    target.h = 2;
    target.w = 2;
    target.cell_types = {0, 1};
    target.sites = {1, 0, 0, 1};

    Tape tape;
    // logits that put (numerically) all mass on the target id
    std::vector<double> sure(2 * 4, 0.0);
    for (int px = 0; px < 4; ++px) sure[static_cast<std::size_t>(target.sites[static_cast<std::size_t>(px)]) * 4 + px] = 200.0;
    CHECK(categorical_recon(tape, Tensor::from({2, 2, 2}, sure), target).item() == doctest::Approx(0.0).epsilon(1e-12));

    // two ids with logit gap log(e-1) give mass exactly 1/e on the loser;
    // putting the truth on the loser yields -1 per pixel
    const double gap = std::log(M_E - 1.0);
    std::vector<double> unsure(2 * 4, 0.0);
    for (int px = 0; px < 4; ++px) {
        const int truth = target.sites[static_cast<std::size_t>(px)];
        unsure[static_cast<std::size_t>(1 - truth) * 4 + px] = gap;
    }
    CHECK(categorical_recon(tape, Tensor::from({2, 2, 2}, unsure), target).item() ==
          doctest::Approx(-4.0).epsilon(1e-12));
}

TEST_CASE("celestial: shapes, invariances, identity drift") {
    CelestialConfig mc = small_celestial();
    CelestialModel model(mc, 5);
    Rng rng(2);
    BodyState x = random_state(5, rng);

    Tape tape(false);
    auto hid = model.forward_embed(tape, x);
    CHECK(hid.h.dims() == Shape{5, mc.width});

    auto prior = model.prior(tape, hid);
    CHECK(prior.mu.dims() == Shape{1, mc.latent});
    for (double v : prior.sigma.data()) CHECK(v > 0.0);

    // h^t and the prior are invariant under rotation+translation
    const Mat3 r = random_rotation(rng);
    const Vec3 t{1.0, -0.5, 2.0};
    BodyState gx = transform_state(x, r, t);
    Tape t2(false);
    auto ghid = model.forward_embed(t2, gx);
    for (std::size_t i = 0; i < hid.h.data().size(); ++i)
        CHECK(std::abs(ghid.h.data()[i] - hid.h.data()[i]) < 1e-8);
    auto gprior = model.prior(t2, ghid);
    for (std::size_t i = 0; i < prior.mu.data().size(); ++i) {
        CHECK(std::abs(gprior.mu.data()[i] - prior.mu.data()[i]) < 1e-8);
        CHECK(std::abs(gprior.sigma.data()[i] - prior.sigma.data()[i]) < 1e-8);
    }

    // zeroed decoder heads give the identity drift: mu_v = v, mu_p = p
    CelestialModel zeroed(mc, 5);
    for (std::size_t b = 0; b < zeroed.params().size(); ++b) {
        const std::string& name = zeroed.params().name(b);
        if (name.rfind("decoder.vec", 0) == 0 || name.rfind("decoder.scale", 0) == 0)
            std::fill(zeroed.params().tensor(b).data().begin(), zeroed.params().tensor(b).data().end(), 0.0);
    }
    Tape t3(false);
    auto zhid = zeroed.forward_embed(t3, x);
    auto zprior = zeroed.prior(t3, zhid);
    LatentSample zs = reparameterize(t3, zprior, Tensor::zeros({1, mc.latent}));
    auto dec = zeroed.decode(t3, zhid, zs.z);
    for (int i = 0; i < 5; ++i)
        for (int k = 0; k < 3; ++k) {
            CHECK(dec.mu_v.at({i, k}) == doctest::Approx(x.velocities[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]).epsilon(1e-12));
            CHECK(dec.mu_p.at({i, k}) == doctest::Approx(x.positions[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]).epsilon(1e-12));
        }
    for (double v : dec.sigma_p.data()) CHECK(v >= mc.sigma_floor);
}

TEST_CASE("celestial one-step: determinism and matched-noise equivariance") {
    CelestialModel model(small_celestial(), 7);
    Rng rng(3);
    BodyState x = random_state(5, rng);

    Rng s1(42), s2(42);
    BodyState a = model.one_step_sample(x, s1);
    BodyState b = model.one_step_sample(x, s2);
    CHECK(a.positions == b.positions);
    CHECK(a.n() == x.n());

    // Lemma-1 mechanics: invariant prior, noise rotated with the frame
    for (int rep = 0; rep < 5; ++rep) {
        const Mat3 r = random_rotation(rng);
        const Vec3 t{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        Rng noise_rng(derive_seed(100, {static_cast<std::uint64_t>(rep)}));
        auto noise = model.draw_noise(x.n(), noise_rng);
        auto gnoise = noise;
        for (int i = 0; i < x.n(); ++i) {
            gnoise.eta_p[static_cast<std::size_t>(i)] = mat3_apply(r, noise.eta_p[static_cast<std::size_t>(i)]);
            gnoise.eta_v[static_cast<std::size_t>(i)] = mat3_apply(r, noise.eta_v[static_cast<std::size_t>(i)]);
        }
        BodyState up = model.one_step_with_noise(x, noise);
        BodyState gup = model.one_step_with_noise(transform_state(x, r, t), gnoise);
        BodyState want = transform_state(up, r, t);
        for (int i = 0; i < x.n(); ++i)
            for (int k = 0; k < 3; ++k) {
                CHECK(std::abs(gup.positions[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] -
                               want.positions[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]) < 1e-6);
                CHECK(std::abs(gup.velocities[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] -
                               want.velocities[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]) < 1e-6);
            }
    }
}

TEST_CASE("celestial rollout and elbo") {
    CelestialModel model(small_celestial(), 9);
    Rng rng(5);
    BodyState x = random_state(4, rng);

    Rng r0(1);
    NBodyTrajectory empty = model.rollout(x, 0, r0);
    CHECK(empty.frames.size() == 1);

    Rng ra(2), rb(2);
    NBodyTrajectory t1 = model.rollout(x, 5, ra);
    NBodyTrajectory t2 = model.rollout(x, 5, rb);
    CHECK(t1.frames.size() == 6);
    for (std::size_t f = 0; f < t1.frames.size(); ++f) CHECK(t1.frames[f].positions == t2.frames[f].positions);

    Tape tape;
    Rng re(3);
    auto step = model.elbo_step(tape, x, t1.frames[1], re);
    CHECK(std::isfinite(step.elbo.recon.item()));
    for (double v : step.elbo.kl_per_dim.data()) CHECK(v >= 0.0);
    CHECK(step.elbo.kl_per_dim.dims() == Shape{4});
    CHECK(step.reconstruction.n() == x.n());
}

TEST_CASE("celestial one_step_reconstruct matches one_step_sample when q == p") {
    CelestialConfig mc = small_celestial();
    CelestialModel model(mc, 11);
    // zero both GNN stacks so pooled features vanish, then copy the prior
    // heads into the posterior heads: q and p become identical functions
    auto& ps = model.params();
    for (std::size_t b = 0; b < ps.size(); ++b) {
        const std::string& name = ps.name(b);
        if (name.rfind("prior.gnn", 0) == 0 || name.rfind("posterior.gnn", 0) == 0)
            std::fill(ps.tensor(b).data().begin(), ps.tensor(b).data().end(), 0.0);
    }
    ps.find("posterior.mu.w").data() = ps.find("prior.mu.w").data();
    ps.find("posterior.mu.b").data() = ps.find("prior.mu.b").data();
    ps.find("posterior.sigma.w").data() = ps.find("prior.sigma.w").data();
    ps.find("posterior.sigma.b").data() = ps.find("prior.sigma.b").data();

    Rng rng(6);
    BodyState x = random_state(4, rng);
    BodyState target = random_state(4, rng);
    Rng sa(77), sb(77);
    BodyState via_prior = model.one_step_sample(x, sa);
    BodyState via_posterior = model.one_step_reconstruct(x, target, sb);
    CHECK(via_prior.positions == via_posterior.positions); // same noise, same distribution
    CHECK(via_prior.velocities == via_posterior.velocities);
}

TEST_CASE("pns ablation: same contracts, no equivariance") {
    CelestialConfig mc = small_celestial();
    mc.equivariant = false;
    CelestialModel model(mc, 13);
    Rng rng(8);
    BodyState x = random_state(5, rng);
    Rng s1(4), s2(4);
    BodyState a = model.one_step_sample(x, s1);
    CHECK(a.n() == 5);
    BodyState b = model.one_step_sample(x, s2);
    CHECK(a.positions == b.positions);

    // the plain-GNN forward embedding is NOT rotation invariant
    const Mat3 r = random_rotation(rng);
    Tape tape(false);
    auto hid = model.forward_embed(tape, x);
    Tape t2(false);
    auto ghid = model.forward_embed(t2, transform_state(x, r, {0, 0, 0}));
    double diff = 0.0;
    for (std::size_t i = 0; i < hid.h.data().size(); ++i)
        diff = std::max(diff, std::abs(hid.h.data()[i] - ghid.h.data()[i]));
    CHECK(diff > 1e-6);
}

TEST_CASE("cellular: pixel-wise categorical, permutation equivariance, support") {
    CellularConfig mc = small_cellular();
    CellularModel model(mc, 3);
    Lattice x = small_lattice(12);

    Tape tape(false);
    auto hid = model.forward_embed(tape, x);
    CHECK(hid.h.n_nodes() == x.n_cells() + 1);
    CHECK(hid.h.nodes[0].dims() == Shape{mc.embed, 16, 16});

    auto prior = model.prior(tape, hid);
    CHECK(prior.mu.dims() == Shape{x.n_cells() + 1, mc.latent});
    for (double v : prior.sigma.data()) CHECK(v > 0.0);

    Rng rng(5);
    auto noise = model.draw_noise(x.n_cells() + 1, x.h * x.w, rng, false);
    LatentSample zs = reparameterize(tape, prior, noise.eps);
    Tensor logits = model.decode_logits(tape, hid, zs.z);
    CHECK(logits.dims() == Shape{x.n_cells() + 1, 16, 16});

    Tensor pi = tape.softmax(logits, 0);
    for (int px = 0; px < 256; ++px) {
        double s = 0.0;
        for (int k = 0; k <= x.n_cells(); ++k) s += pi.data()[static_cast<std::size_t>(k) * 256 + px];
        CHECK(std::abs(s - 1.0) < 1e-12);
    }

    // one-step output ids stay within the node axis (categorical support)
    Lattice next = model.one_step_with_noise(x, noise);
    for (auto id : next.sites) CHECK(id <= x.n_cells());
    CHECK(next.frame_index == x.frame_index + 1);

    // determinism
    Rng sa(9), sb(9);
    CHECK(model.one_step_sample(x, sa).sites == model.one_step_sample(x, sb).sites);

    // exact permutation equivariance with matched per-cell noise
    std::vector<int> perm{0, 3, 1, 4, 2};
    Lattice px_ = permute_cell_ids(x, perm);
    auto pnoise = noise;
    {
        std::vector<double> permuted(noise.eps.data().size());
        for (int k = 0; k <= x.n_cells(); ++k)
            for (int d = 0; d < mc.latent; ++d)
                permuted[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)]) * mc.latent + d] =
                    noise.eps.at({k, d});
        pnoise.eps = Tensor::from({x.n_cells() + 1, mc.latent}, std::move(permuted));
    }
    Lattice pnext = model.one_step_with_noise(px_, pnoise);
    CHECK(pnext.sites == permute_cell_ids(next, perm).sites); // exact

    // gumbel-max categorical sampling commutes the same way
    auto cat_noise = model.draw_noise(x.n_cells() + 1, x.h * x.w, rng, true);
    auto pcat = cat_noise;
    {
        const int hw = x.h * x.w;
        std::vector<double> eps_p(cat_noise.eps.data().size());
        std::vector<double> gum_p(cat_noise.gumbel.size());
        for (int k = 0; k <= x.n_cells(); ++k) {
            for (int d = 0; d < mc.latent; ++d)
                eps_p[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)]) * mc.latent + d] = cat_noise.eps.at({k, d});
            for (int i = 0; i < hw; ++i)
                gum_p[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)]) * hw + i] =
                    cat_noise.gumbel[static_cast<std::size_t>(k) * hw + i];
        }
        pcat.eps = Tensor::from({x.n_cells() + 1, mc.latent}, std::move(eps_p));
        pcat.gumbel = std::move(gum_p);
    }
    Lattice cnext = model.one_step_with_noise(x, cat_noise);
    Lattice pcnext = model.one_step_with_noise(px_, pcat);
    CHECK(pcnext.sites == permute_cell_ids(cnext, perm).sites);
}

TEST_CASE("cellular elbo and reconstruct") {
    CellularConfig mc = small_cellular();
    CellularModel model(mc, 21);
    Lattice x = small_lattice(31);
    CPMConfig gcfg = make_cell_sorting_config();
    gcfg.h = 16;
    gcfg.w = 16;
    gcfg.n_cells = 4;
    gcfg.target_volume = 16;
    Rng grng(7);
    Lattice next = mcs_step(x, gcfg, grng);

    Tape tape;
    Rng rng(9);
    auto step = model.elbo_step(tape, x, next, rng);
    CHECK(std::isfinite(step.elbo.recon.item()));
    CHECK(step.elbo.recon.item() <= 0.0); // log-likelihood of a categorical
    CHECK(step.elbo.kl_per_dim.dims() == Shape{mc.latent});
    for (double v : step.elbo.kl_per_dim.data()) CHECK(v >= 0.0);

    Rng ra(3), rb(3);
    Lattice rec1 = model.one_step_reconstruct(x, next, ra);
    Lattice rec2 = model.one_step_reconstruct(x, next, rb);
    CHECK(rec1.sites == rec2.sites);

    Rng rr(5);
    CpmTrajectory roll = model.rollout(x, 3, rr);
    CHECK(roll.frames.size() == 4);
}
