#pragma once

#include <array>
#include <vector>

#include "epns/nbody.hpp"
#include "epns/nn.hpp"
#include "epns/tensor.hpp"

namespace epns {

using Mat3 = std::array<double, 9>; // row-major 3x3

Vec3 mat3_apply(const Mat3& m, const Vec3& v);
Mat3 mat3_transpose(const Mat3& m);
Mat3 mat3_mul(const Mat3& a, const Mat3& b);
double mat3_det(const Mat3& m);
// deterministic random rotation (uniform via QR of a Gaussian matrix)
Mat3 random_rotation(Rng& rng);

// Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi sweeps.
// Eigenvalues are returned in descending order with matching eigenvector
// columns in v (row-major).
void symmetric_eigen3(const Mat3& a, std::array<double, 3>& eigenvalues, Mat3& eigenvectors);

// The 8 PCA sign frames of a point cloud: centroid plus every column-sign
// choice of the canonicalized covariance eigenbasis.
struct FrameSet {
    Vec3 centroid{0, 0, 0};
    std::array<Mat3, 8> bases;
    bool degenerate = false; // eigenvalue gap fell below tolerance; jitter applied
};

FrameSet compute_frames(const std::vector<Vec3>& positions);

// Fully connected geometric graph with n^2 directed edges (self edges
// included, zero edge scalars on the diagonal).
struct GeometricGraph {
    int n = 0;
    Tensor node_invariant; // [n, d]
    Tensor positions;      // [n, 3]
    Tensor velocities;     // [n, 3]
    Tensor edge_scalar;    // [n^2, 2]: |p_i - p_j|, |v_i - v_j|
};

GeometricGraph graph_from_state(const BodyState& state);
Tensor edge_scalars_of(const BodyState& state); // [n^2, 2]

struct EdgeIndex {
    std::vector<int> src, dst;
    int n_nodes = 0;
};
// copies > 1 builds a block-diagonal union of identical graphs (used to run
// all frames of a frame average through one message passing stack)
EdgeIndex fully_connected_edges(int n, int copies = 1);

struct MpGnnLayer {
    Mlp message; // [h_i, h_j, e_ij] -> width
    Mlp update;  // [h_i, mean_j m_ij] -> width
};

// Plain message passing stack on a fully connected edge set; permutation
// equivariant by construction.
struct MpGnn {
    std::vector<MpGnnLayer> layers;
    int width = 0;

    static MpGnn create(ParamStore& ps, const std::string& name, int width, int edge_dim, int n_layers, Rng& rng);
    Tensor apply(Tape& tape, const Tensor& node_feats, const EdgeIndex& edges, const Tensor& edge_feats) const;
};

enum class VectorKind { Direction, Point }; // points gain the frame centroid back

// Frame-averaging backbone: scalarizes positions/velocities in each of the 8
// frames, runs a shared message passing stack, and maps outputs back.
struct FaGnnBackbone {
    Linear input_embed; // [inv_dim + 6] -> width
    MpGnn gnn;
    int width = 0;

    static FaGnnBackbone create(ParamStore& ps, const std::string& name, int invariant_dim, int width, int n_layers,
                                int edge_dim, Rng& rng);

    // per-frame final node embeddings, each [n, width]; node_invariant may be
    // any on-tape [n, invariant_dim] tensor (embeddings, latents, ...)
    std::vector<Tensor> run_frames(Tape& tape, const Tensor& node_invariant, const GeometricGraph& g,
                                   const FrameSet& frames, const Tensor* extra_edge_feats = nullptr) const;
};

// E(3)-invariant read-out: plain average of the per-frame embeddings.
Tensor fa_invariant(Tape& tape, const std::vector<Tensor>& frame_embeds);
// E(3)-equivariant read-out: apply a shared linear head per frame, rotate the
// resulting 3-vectors back by the frame basis (adding the centroid for
// point-like outputs), then average.
Tensor fa_vector(Tape& tape, const std::vector<Tensor>& frame_embeds, const FrameSet& frames, const Linear& head,
                 VectorKind kind);

} // namespace epns
