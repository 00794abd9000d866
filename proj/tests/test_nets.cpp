#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "epns/cellgrid.hpp"
#include "epns/graph.hpp"
#include "epns/nbody.hpp"

using namespace epns;

namespace {

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

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace

TEST_CASE("compute_frames: canonical cases") {
    // points along the x axis: leading eigenvector is +-e_x
    std::vector<Vec3> line{{-2, 0, 0}, {-1, 0.01, 0}, {0, -0.01, 0}, {1, 0.02, 0}, {2, -0.02, 0}};
    FrameSet fs = compute_frames(line);
    for (const auto& b : fs.bases) {
        CHECK(std::abs(std::abs(b[0]) - 1.0) < 1e-3); // first column ~ +-e_x
        // orthonormality B^T B = I
        const Mat3 btb = mat3_mul(mat3_transpose(b), b);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                CHECK(std::abs(btb[static_cast<std::size_t>(3 * i + j)] - (i == j ? 1.0 : 0.0)) < 1e-10);
        CHECK(std::abs(std::abs(mat3_det(b)) - 1.0) < 1e-10); // |det rho(g)| = 1
    }
    CHECK_THROWS(compute_frames({{1, 2, 3}}));

    // translation moves the centroid, leaves the bases unchanged
    std::vector<Vec3> shifted = line;
    for (auto& p : shifted) {
        p[0] += 5;
        p[1] -= 2;
        p[2] += 0.5;
    }
    FrameSet fs2 = compute_frames(shifted);
    CHECK(fs2.centroid[0] == doctest::Approx(fs.centroid[0] + 5));
    CHECK(fs2.centroid[1] == doctest::Approx(fs.centroid[1] - 2));
    for (int f = 0; f < 8; ++f)
        for (int e = 0; e < 9; ++e)
            CHECK(fs2.bases[static_cast<std::size_t>(f)][static_cast<std::size_t>(e)] ==
                  doctest::Approx(fs.bases[static_cast<std::size_t>(f)][static_cast<std::size_t>(e)]).epsilon(1e-9));
}

TEST_CASE("frame-set closure under rotation") {
    Rng rng(5);
    for (int rep = 0; rep < 20; ++rep) {
        BodyState s = random_state(5, rng);
        const Mat3 r = random_rotation(rng);
        FrameSet fs = compute_frames(s.positions);
        std::vector<Vec3> rotated = s.positions;
        for (auto& p : rotated) p = mat3_apply(r, p);
        FrameSet fsr = compute_frames(rotated);
        // {bases of Rx} equals {R * bases of x} as a set
        for (const auto& b : fs.bases) {
            const Mat3 rb = mat3_mul(r, b);
            double best = 1e300;
            for (const auto& c : fsr.bases) {
                double d = 0.0;
                for (int e = 0; e < 9; ++e) d = std::max(d, std::abs(rb[static_cast<std::size_t>(e)] - c[static_cast<std::size_t>(e)]));
                best = std::min(best, d);
            }
            CHECK(best < 1e-8);
        }
    }
}

TEST_CASE("degenerate configurations fall back to deterministic jitter") {
    // perfectly symmetric square: two equal eigenvalues
    std::vector<Vec3> sq{{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}};
    FrameSet a = compute_frames(sq);
    FrameSet b = compute_frames(sq);
    CHECK(a.degenerate);
    for (int f = 0; f < 8; ++f)
        CHECK(a.bases[static_cast<std::size_t>(f)] == b.bases[static_cast<std::size_t>(f)]); // pure function
}

TEST_CASE("mp_gnn: n=1, permutation equivariance, gradients") {
    Rng rng(7);
    ParamStore ps;
    MpGnn gnn = MpGnn::create(ps, "g", 16, 2, 3, rng);

    // single node: aggregation over the self edge only, finite output
    Tape tape;
    Tensor h1 = Tensor::from({1, 16}, std::vector<double>(16, 0.3));
    Tensor e1 = Tensor::from({1, 2}, {0.0, 0.0});
    Tensor o1 = gnn.apply(tape, h1, fully_connected_edges(1), e1);
    for (double v : o1.data()) CHECK(std::isfinite(v));

    // permutation equivariance
    const int n = 5;
    BodyState s = random_state(n, rng);
    GeometricGraph g = graph_from_state(s);
    Tensor h0 = Tensor::zeros({n, 16});
    for (auto& v : h0.data()) v = rng.uniform(-1, 1);
    Tensor out = gnn.apply(tape, h0, fully_connected_edges(n), g.edge_scalar);

    std::vector<int> perm{2, 0, 4, 1, 3}; // node i -> row perm[i]
    BodyState sp;
    sp.masses.resize(n);
    sp.positions.resize(n);
    sp.velocities.resize(n);
    Tensor h0p = Tensor::zeros({n, 16});
    for (int i = 0; i < n; ++i) {
        sp.masses[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = s.masses[static_cast<std::size_t>(i)];
        sp.positions[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = s.positions[static_cast<std::size_t>(i)];
        sp.velocities[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = s.velocities[static_cast<std::size_t>(i)];
        for (int d = 0; d < 16; ++d)
            h0p.data()[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)] * 16 + d)] = h0.at({i, d});
    }
    Tensor outp = gnn.apply(tape, h0p, fully_connected_edges(n), graph_from_state(sp).edge_scalar);
    for (int i = 0; i < n; ++i)
        for (int d = 0; d < 16; ++d)
            CHECK(outp.at({perm[static_cast<std::size_t>(i)], d}) == doctest::Approx(out.at({i, d})).epsilon(1e-12));

    // gradient check through the stack
    auto run = [&](bool grad) {
        Tape t(grad);
        Tensor o = gnn.apply(t, h0, fully_connected_edges(n), g.edge_scalar);
        Tensor l = t.sum_all(t.mul(o, o));
        if (grad) t.backward(l);
        return l.item();
    };
    FdReport rep = finite_difference_check(
        ps, [&]() { return run(true); }, [&]() { return run(false); }, 1e-5, 3, 777);
    CHECK(rep.within(1e-4));
}

TEST_CASE("fa_gnn: exact E(3) equivariance and invariance") {
    Rng rng(19);
    ParamStore ps;
    FaGnnBackbone fa = FaGnnBackbone::create(ps, "fa", 1, 12, 2, 2, rng);
    Linear point_head = Linear::create(ps, "head", 12, 3, rng);

    BodyState s = random_state(5, rng);
    GeometricGraph g = graph_from_state(s);
    Tape tape(false);
    auto frames = fa.run_frames(tape, g.node_invariant, g, compute_frames(s.positions));
    Tensor inv = fa_invariant(tape, frames);
    Tensor pts = fa_vector(tape, frames, compute_frames(s.positions), point_head, VectorKind::Point);

    for (int rep = 0; rep < 25; ++rep) {
        const Mat3 r = random_rotation(rng);
        const Vec3 t{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
        BodyState gs = transform_state(s, r, t);
        GeometricGraph gg = graph_from_state(gs);
        Tape t2(false);
        auto gframes = fa.run_frames(t2, gg.node_invariant, gg, compute_frames(gs.positions));

        // invariant read-out: f(Rx+t) = f(x)
        Tensor ginv = fa_invariant(t2, gframes);
        CHECK(max_abs_diff(ginv.data(), inv.data()) < 1e-8);

        // point read-out: f(Rx+t) = R f(x) + t
        Tensor gpts = fa_vector(t2, gframes, compute_frames(gs.positions), point_head, VectorKind::Point);
        for (int i = 0; i < 5; ++i) {
            const Vec3 want = mat3_apply(r, {pts.at({i, 0}), pts.at({i, 1}), pts.at({i, 2})});
            for (int k = 0; k < 3; ++k)
                CHECK(std::abs(gpts.at({i, k}) - (want[static_cast<std::size_t>(k)] + t[static_cast<std::size_t>(k)])) < 1e-8);
        }
    }
}

TEST_CASE("fa_gnn permutes with the nodes") {
    Rng rng(23);
    ParamStore ps;
    FaGnnBackbone fa = FaGnnBackbone::create(ps, "fa", 1, 8, 2, 2, rng);
    BodyState s = random_state(4, rng);
    GeometricGraph g = graph_from_state(s);
    Tape tape(false);
    Tensor out = fa_invariant(tape, fa.run_frames(tape, g.node_invariant, g, compute_frames(s.positions)));

    std::vector<int> perm{3, 1, 0, 2};
    BodyState sp;
    sp.masses.resize(4);
    sp.positions.resize(4);
    sp.velocities.resize(4);
    for (int i = 0; i < 4; ++i) {
        sp.masses[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = s.masses[static_cast<std::size_t>(i)];
        sp.positions[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = s.positions[static_cast<std::size_t>(i)];
        sp.velocities[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = s.velocities[static_cast<std::size_t>(i)];
    }
    GeometricGraph gp = graph_from_state(sp);
    Tape t2(false);
    Tensor outp = fa_invariant(t2, fa.run_frames(t2, gp.node_invariant, gp, compute_frames(sp.positions)));
    for (int i = 0; i < 4; ++i)
        for (int d = 0; d < 8; ++d)
            CHECK(outp.at({perm[static_cast<std::size_t>(i)], d}) == doctest::Approx(out.at({i, d})).epsilon(1e-10));
}

TEST_CASE("encode_onehot_cells: inverse, partition of unity, permutation") {
    CPMConfig cfg = make_cell_sorting_config();
    cfg.h = 16;
    cfg.w = 16;
    cfg.n_cells = 4;
    cfg.target_volume = 16;
    Rng rng(3);
    Lattice lat = init_random_culture(cfg, rng);

    CellNodeGrid grid = encode_onehot_cells(lat, cfg.n_types);
    CHECK(grid.n_nodes() == cfg.n_cells + 1);
    CHECK(grid.channels() == 1 + cfg.n_types + 1);

    // id channels are one-hot along the node axis at every pixel
    for (int px = 0; px < lat.h * lat.w; ++px) {
        double s = 0.0;
        for (int k = 0; k < grid.n_nodes(); ++k) s += grid.nodes[static_cast<std::size_t>(k)].data()[static_cast<std::size_t>(px)];
        CHECK(s == 1.0);
    }

    // argmax over the node axis recovers the lattice exactly
    Lattice back = decode_argmax(grid, lat.cell_types);
    CHECK(back.sites == lat.sites);

    // permuting ids permutes the node axis
    std::vector<int> perm{0, 2, 4, 1, 3};
    Lattice plat = permute_cell_ids(lat, perm);
    CellNodeGrid pgrid = encode_onehot_cells(plat, cfg.n_types);
    for (int k = 0; k <= cfg.n_cells; ++k) {
        // id channel moves with the permutation
        const auto& a = grid.nodes[static_cast<std::size_t>(k)].data();
        const auto& b = pgrid.nodes[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])].data();
        const int hw = lat.h * lat.w;
        for (int px = 0; px < hw; ++px) CHECK(a[static_cast<std::size_t>(px)] == b[static_cast<std::size_t>(px)]);
    }

    Lattice bad = lat;
    bad.sites[0] = 999;
    CHECK_THROWS(encode_onehot_cells(bad, cfg.n_types));
}

TEST_CASE("spatialconv: permutation equivariance, identical nodes, shape") {
    Rng rng(9);
    ParamStore ps;
    SpatialConvLayer layer = SpatialConvLayer::create(ps, "l", 6, 3, 2, {4, 6, 8}, 3, rng);

    CellNodeGrid grid;
    grid.h = 16;
    grid.w = 16;
    for (int k = 0; k < 5; ++k) {
        Tensor t = Tensor::zeros({6, 16, 16});
        for (auto& v : t.data()) v = rng.uniform(-1, 1);
        grid.nodes.push_back(t);
    }
    // make nodes 1 and 3 identical
    grid.nodes[3] = Tensor::from({6, 16, 16}, grid.nodes[1].data());

    Tape tape(false);
    CellNodeGrid out = layer.apply(tape, grid);
    CHECK(out.n_nodes() == 5);
    CHECK(out.nodes[0].dims() == Shape{6, 16, 16}); // shape preserved
    CHECK(out.nodes[1].data() == out.nodes[3].data()); // identical nodes -> identical outputs

    // permuting the node axis permutes outputs bitwise (value-sorted aggregate)
    std::vector<int> perm{4, 2, 0, 3, 1};
    CellNodeGrid pgrid;
    pgrid.h = grid.h;
    pgrid.w = grid.w;
    pgrid.nodes.resize(5);
    for (int k = 0; k < 5; ++k) pgrid.nodes[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])] = grid.nodes[static_cast<std::size_t>(k)];
    Tape t2(false);
    CellNodeGrid pout = layer.apply(t2, pgrid);
    for (int k = 0; k < 5; ++k)
        CHECK(pout.nodes[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])].data() ==
              out.nodes[static_cast<std::size_t>(k)].data());

    // spatial dims must be divisible by 8
    CellNodeGrid bad;
    bad.h = 12;
    bad.w = 16;
    bad.nodes.push_back(Tensor::zeros({6, 12, 16}));
    CHECK_THROWS_AS(layer.apply(tape, bad), ShapeError);
}
