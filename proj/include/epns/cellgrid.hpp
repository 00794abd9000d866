#pragma once

#include <vector>

#include "epns/cpm.hpp"
#include "epns/nn.hpp"
#include "epns/tensor.hpp"

namespace epns {

// Per-cell grid stack: node k holds a [channels, h, w] tensor. Node 0 is the
// medium channel; permutations of cell ids act on nodes 1..c.
struct CellNodeGrid {
    std::vector<Tensor> nodes;
    int h = 0, w = 0;

    int n_nodes() const { return static_cast<int>(nodes.size()); }
    int channels() const { return nodes.empty() ? 0 : nodes[0].dim(0); }
};

// One-hot node encoding of a lattice: channel 0 of node k indicates sites with
// id k; the (n_types+1) type channels of the site grid are appended to every
// node. Along the node axis the id channels are one-hot at every pixel.
CellNodeGrid encode_onehot_cells(const Lattice& lat, int n_types);

// inverse of the id channels: argmax over the node axis
Lattice decode_argmax(const CellNodeGrid& grid, const std::vector<std::uint8_t>& cell_types);

// Message passing layer on cell-channel nodes (update equation
// h_i <- psi(h_i, mean_j phi(h_j)) with convolutional phi/psi and the mean
// shared across all nodes).
struct SpatialConvLayer {
    Conv2d phi_down;           // 2x2 stride-2 downsample
    std::vector<Conv2d> phi;   // conv->ReLU blocks
    ConvT2d psi_up;            // 2x2 stride-2 upsample of the shared aggregate
    UNet psi_unet;             // concat(h_i, upsampled aggregate) -> channels

    static SpatialConvLayer create(ParamStore& ps, const std::string& name, int channels, int phi_kernel,
                                   int phi_blocks, const std::vector<int>& unet_widths, int unet_kernel, Rng& rng);
    CellNodeGrid apply(Tape& tape, const CellNodeGrid& in) const;
};

} // namespace epns
