#include "epns/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace epns {

Vec3 mat3_apply(const Mat3& m, const Vec3& v) {
    return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

Mat3 mat3_transpose(const Mat3& m) { return {m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]}; }

Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
    Mat3 c{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0.0;
            for (int k = 0; k < 3; ++k) s += a[static_cast<std::size_t>(3 * i + k)] * b[static_cast<std::size_t>(3 * k + j)];
            c[static_cast<std::size_t>(3 * i + j)] = s;
        }
    return c;
}

double mat3_det(const Mat3& m) {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
}

Mat3 random_rotation(Rng& rng) {
    // Gram-Schmidt on a Gaussian matrix gives a Haar-uniform rotation (up to
    // the determinant fix at the end).
    std::array<Vec3, 3> v;
    for (auto& row : v)
        for (auto& x : row) x = rng.normal();
    auto dot = [](const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; };
    auto scale = [](Vec3& a, double s) { for (auto& x : a) x *= s; };
    auto axpy = [](Vec3& a, const Vec3& b, double s) { for (int k = 0; k < 3; ++k) a[static_cast<std::size_t>(k)] += s * b[static_cast<std::size_t>(k)]; };
    scale(v[0], 1.0 / std::sqrt(dot(v[0], v[0])));
    axpy(v[1], v[0], -dot(v[1], v[0]));
    scale(v[1], 1.0 / std::sqrt(dot(v[1], v[1])));
    axpy(v[2], v[0], -dot(v[2], v[0]));
    axpy(v[2], v[1], -dot(v[2], v[1]));
    scale(v[2], 1.0 / std::sqrt(dot(v[2], v[2])));
    Mat3 r{v[0][0], v[0][1], v[0][2], v[1][0], v[1][1], v[1][2], v[2][0], v[2][1], v[2][2]};
    if (mat3_det(r) < 0.0)
        for (int j = 0; j < 3; ++j) r[static_cast<std::size_t>(6 + j)] = -r[static_cast<std::size_t>(6 + j)];
    return r;
}

void symmetric_eigen3(const Mat3& a_in, std::array<double, 3>& eigenvalues, Mat3& eigenvectors) {
    Mat3 a = a_in;
    Mat3 v{1, 0, 0, 0, 1, 0, 0, 0, 1};
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = std::abs(a[1]) + std::abs(a[2]) + std::abs(a[5]);
        if (off < 1e-15 * (std::abs(a[0]) + std::abs(a[4]) + std::abs(a[8]) + 1e-300)) break;
        static constexpr int pairs[3][2] = {{0, 1}, {0, 2}, {1, 2}};
        for (const auto& pq : pairs) {
            const int p = pq[0], q = pq[1];
            const double apq = a[static_cast<std::size_t>(3 * p + q)];
            if (apq == 0.0) continue;
            const double app = a[static_cast<std::size_t>(3 * p + p)];
            const double aqq = a[static_cast<std::size_t>(3 * q + q)];
            const double theta = 0.5 * (aqq - app) / apq;
            const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
            const double c = 1.0 / std::sqrt(t * t + 1.0);
            const double s = t * c;
            // A <- J^T A J with a Givens rotation in the (p,q) plane
            for (int k = 0; k < 3; ++k) {
                const double akp = a[static_cast<std::size_t>(3 * k + p)];
                const double akq = a[static_cast<std::size_t>(3 * k + q)];
                a[static_cast<std::size_t>(3 * k + p)] = c * akp - s * akq;
                a[static_cast<std::size_t>(3 * k + q)] = s * akp + c * akq;
            }
            for (int k = 0; k < 3; ++k) {
                const double apk = a[static_cast<std::size_t>(3 * p + k)];
                const double aqk = a[static_cast<std::size_t>(3 * q + k)];
                a[static_cast<std::size_t>(3 * p + k)] = c * apk - s * aqk;
                a[static_cast<std::size_t>(3 * q + k)] = s * apk + c * aqk;
            }
            for (int k = 0; k < 3; ++k) {
                const double vkp = v[static_cast<std::size_t>(3 * k + p)];
                const double vkq = v[static_cast<std::size_t>(3 * k + q)];
                v[static_cast<std::size_t>(3 * k + p)] = c * vkp - s * vkq;
                v[static_cast<std::size_t>(3 * k + q)] = s * vkp + c * vkq;
            }
        }
    }
    std::array<int, 3> order{0, 1, 2};
    std::array<double, 3> ev{a[0], a[4], a[8]};
    std::sort(order.begin(), order.end(), [&](int x, int y) { return ev[static_cast<std::size_t>(x)] > ev[static_cast<std::size_t>(y)]; });
    Mat3 vs{};
    for (int j = 0; j < 3; ++j) {
        eigenvalues[static_cast<std::size_t>(j)] = ev[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])];
        for (int i = 0; i < 3; ++i)
            vs[static_cast<std::size_t>(3 * i + j)] = v[static_cast<std::size_t>(3 * i + order[static_cast<std::size_t>(j)])];
    }
    eigenvectors = vs;
}

FrameSet compute_frames(const std::vector<Vec3>& positions_in) {
    const int n = static_cast<int>(positions_in.size());
    if (n < 2) throw std::invalid_argument("compute_frames requires at least 2 points");
    for (const auto& p : positions_in)
        for (double c : p)
            if (!std::isfinite(c)) throw std::runtime_error("compute_frames: non-finite input");

    std::vector<Vec3> positions = positions_in;
    FrameSet fs;
    for (int pass = 0; pass < 2; ++pass) {
        Vec3 t{0, 0, 0};
        for (const auto& p : positions)
            for (int k = 0; k < 3; ++k) t[static_cast<std::size_t>(k)] += p[static_cast<std::size_t>(k)];
        for (auto& c : t) c /= n;

        Mat3 cov{};
        for (const auto& p : positions)
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j)
                    cov[static_cast<std::size_t>(3 * i + j)] +=
                        (p[static_cast<std::size_t>(i)] - t[static_cast<std::size_t>(i)]) *
                        (p[static_cast<std::size_t>(j)] - t[static_cast<std::size_t>(j)]);
        for (auto& c : cov) c /= n;

        std::array<double, 3> ev;
        Mat3 basis;
        symmetric_eigen3(cov, ev, basis);

        const double scale = std::max(1.0, std::abs(ev[0]));
        const bool degen = (ev[0] - ev[1] < 1e-9 * scale) || (ev[1] - ev[2] < 1e-9 * scale);
        if (degen && pass == 0) {
            // frame averaging is ill-defined at symmetric configurations;
            // deterministic jitter seeded from the input bytes breaks the tie
            fs.degenerate = true;
            Rng jit(fnv1a(positions_in.data(), positions_in.size() * sizeof(Vec3)));
            for (auto& p : positions)
                for (auto& c : p) c += jit.uniform(-1e-7, 1e-7);
            continue;
        }

        // canonical sign: largest-magnitude entry of each eigenvector positive
        for (int j = 0; j < 3; ++j) {
            int arg = 0;
            for (int i = 1; i < 3; ++i)
                if (std::abs(basis[static_cast<std::size_t>(3 * i + j)]) >
                    std::abs(basis[static_cast<std::size_t>(3 * arg + j)]))
                    arg = i;
            if (basis[static_cast<std::size_t>(3 * arg + j)] < 0.0)
                for (int i = 0; i < 3; ++i) basis[static_cast<std::size_t>(3 * i + j)] = -basis[static_cast<std::size_t>(3 * i + j)];
        }

        fs.centroid = t;
        for (int combo = 0; combo < 8; ++combo) {
            Mat3 b = basis;
            for (int j = 0; j < 3; ++j)
                if (combo & (1 << j))
                    for (int i = 0; i < 3; ++i) b[static_cast<std::size_t>(3 * i + j)] = -b[static_cast<std::size_t>(3 * i + j)];
            fs.bases[static_cast<std::size_t>(combo)] = b;
        }
        return fs;
    }
    throw std::runtime_error("compute_frames: degenerate covariance after jitter");
}

GeometricGraph graph_from_state(const BodyState& state) {
    GeometricGraph g;
    g.n = state.n();
    std::vector<double> mass(state.masses.begin(), state.masses.end());
    g.node_invariant = Tensor::from({g.n, 1}, std::move(mass));
    std::vector<double> pos, vel;
    pos.reserve(static_cast<std::size_t>(g.n) * 3);
    vel.reserve(static_cast<std::size_t>(g.n) * 3);
    for (int i = 0; i < g.n; ++i)
        for (int k = 0; k < 3; ++k) {
            pos.push_back(state.positions[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]);
            vel.push_back(state.velocities[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]);
        }
    g.positions = Tensor::from({g.n, 3}, std::move(pos));
    g.velocities = Tensor::from({g.n, 3}, std::move(vel));
    g.edge_scalar = edge_scalars_of(state);
    return g;
}

Tensor edge_scalars_of(const BodyState& state) {
    const int n = state.n();
    std::vector<double> e;
    e.reserve(static_cast<std::size_t>(n) * n * 2);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double dp = 0.0, dv = 0.0;
            for (int k = 0; k < 3; ++k) {
                const double a = state.positions[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] -
                                 state.positions[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)];
                const double b = state.velocities[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] -
                                 state.velocities[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)];
                dp += a * a;
                dv += b * b;
            }
            e.push_back(std::sqrt(dp));
            e.push_back(std::sqrt(dv));
        }
    return Tensor::from({n * n, 2}, std::move(e));
}

EdgeIndex fully_connected_edges(int n, int copies) {
    EdgeIndex e;
    e.n_nodes = n * copies;
    e.src.reserve(static_cast<std::size_t>(n) * n * copies);
    e.dst.reserve(static_cast<std::size_t>(n) * n * copies);
    for (int c = 0; c < copies; ++c)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                e.dst.push_back(c * n + i);
                e.src.push_back(c * n + j);
            }
    return e;
}

MpGnn MpGnn::create(ParamStore& ps, const std::string& name, int width, int edge_dim, int n_layers, Rng& rng) {
    MpGnn g;
    g.width = width;
    for (int l = 0; l < n_layers; ++l) {
        MpGnnLayer layer;
        layer.message = Mlp::create(ps, name + ".l" + std::to_string(l) + ".msg", 2 * width + edge_dim, width, width, 2, rng);
        layer.update = Mlp::create(ps, name + ".l" + std::to_string(l) + ".upd", 2 * width, width, width, 2, rng);
        g.layers.push_back(std::move(layer));
    }
    return g;
}

Tensor MpGnn::apply(Tape& tape, const Tensor& node_feats, const EdgeIndex& edges, const Tensor& edge_feats) const {
    Tensor h = node_feats;
    for (const auto& layer : layers) {
        Tensor hi = tape.gather_rows(h, edges.dst);
        Tensor hj = tape.gather_rows(h, edges.src);
        Tensor m = layer.message.apply(tape, tape.concat({hi, hj, edge_feats}, 1));
        m = tape.relu(m);
        Tensor agg = tape.segment_mean(m, edges.dst, edges.n_nodes);
        h = layer.update.apply(tape, tape.concat({h, agg}, 1));
    }
    return h;
}

FaGnnBackbone FaGnnBackbone::create(ParamStore& ps, const std::string& name, int invariant_dim, int width,
                                    int n_layers, int edge_dim, Rng& rng) {
    FaGnnBackbone b;
    b.width = width;
    b.input_embed = Linear::create(ps, name + ".embed", invariant_dim + 6, width, rng);
    b.gnn = MpGnn::create(ps, name + ".gnn", width, edge_dim, n_layers, rng);
    return b;
}

std::vector<Tensor> FaGnnBackbone::run_frames(Tape& tape, const Tensor& node_invariant, const GeometricGraph& g,
                                              const FrameSet& frames, const Tensor* extra_edge_feats) const {
    const int n = g.n;
    // stack the 8 frame views into one block-diagonal graph so the message
    // passing stack runs once; the invariant features replicate on-tape, the
    // scalarized coordinates are constants of the input state
    std::vector<int> rep;
    rep.reserve(static_cast<std::size_t>(8) * n);
    for (int f = 0; f < 8; ++f)
        for (int i = 0; i < n; ++i) rep.push_back(i);
    Tensor inv_rep = tape.gather_rows(node_invariant, rep);

    std::vector<double> coords;
    coords.reserve(static_cast<std::size_t>(8 * n) * 6);
    for (int f = 0; f < 8; ++f) {
        const Mat3 bt = mat3_transpose(frames.bases[static_cast<std::size_t>(f)]);
        for (int i = 0; i < n; ++i) {
            Vec3 p{g.positions.at({i, 0}) - frames.centroid[0], g.positions.at({i, 1}) - frames.centroid[1],
                   g.positions.at({i, 2}) - frames.centroid[2]};
            Vec3 v{g.velocities.at({i, 0}), g.velocities.at({i, 1}), g.velocities.at({i, 2})};
            const Vec3 pf = mat3_apply(bt, p);
            const Vec3 vf = mat3_apply(bt, v);
            for (double c : pf) coords.push_back(c);
            for (double c : vf) coords.push_back(c);
        }
    }
    Tensor x = tape.concat({inv_rep, Tensor::from({8 * n, 6}, std::move(coords))}, 1);
    Tensor h0 = input_embed.apply(tape, x);

    const int edge_dim = extra_edge_feats ? extra_edge_feats->dim(1) : g.edge_scalar.dim(1);
    const Tensor& base_edges = extra_edge_feats ? *extra_edge_feats : g.edge_scalar;
    std::vector<double> erep;
    erep.reserve(static_cast<std::size_t>(8) * n * n * edge_dim);
    for (int f = 0; f < 8; ++f)
        erep.insert(erep.end(), base_edges.data().begin(), base_edges.data().end());
    Tensor edge_feats = Tensor::from({8 * n * n, edge_dim}, std::move(erep));

    const EdgeIndex edges = fully_connected_edges(n, 8);
    Tensor h = gnn.apply(tape, h0, edges, edge_feats);

    std::vector<Tensor> per_frame;
    per_frame.reserve(8);
    for (int f = 0; f < 8; ++f) per_frame.push_back(tape.slice(h, 0, f * n, n));
    return per_frame;
}

Tensor fa_invariant(Tape& tape, const std::vector<Tensor>& frame_embeds) {
    return tape.mean_stack(frame_embeds);
}

Tensor fa_vector(Tape& tape, const std::vector<Tensor>& frame_embeds, const FrameSet& frames, const Linear& head,
                 VectorKind kind) {
    std::vector<Tensor> world;
    world.reserve(frame_embeds.size());
    for (std::size_t f = 0; f < frame_embeds.size(); ++f) {
        Tensor u = head.apply(tape, frame_embeds[f]); // [n,3] in frame coordinates
        const Mat3 bt = mat3_transpose(frames.bases[f]);
        Tensor btt = Tensor::from({3, 3}, std::vector<double>(bt.begin(), bt.end()));
        Tensor uw = tape.matmul(u, btt); // rows: B * u
        if (kind == VectorKind::Point) {
            Tensor t = Tensor::from({3}, {frames.centroid[0], frames.centroid[1], frames.centroid[2]});
            uw = tape.add(uw, t);
        }
        world.push_back(uw);
    }
    return tape.mean_stack(world);
}

} // namespace epns
