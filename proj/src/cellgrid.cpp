#include "epns/cellgrid.hpp"

#include <stdexcept>

namespace epns {

CellNodeGrid encode_onehot_cells(const Lattice& lat, int n_types) {
    const int hw = lat.h * lat.w;
    const int tch = n_types + 1;
    for (std::uint16_t id : lat.sites)
        if (id >= lat.cell_types.size())
            throw std::runtime_error("encode_onehot_cells: site id outside 0..c");

    std::vector<double> type_onehot(static_cast<std::size_t>(tch) * hw, 0.0);
    for (int i = 0; i < hw; ++i) {
        const int t = lat.cell_types[lat.sites[static_cast<std::size_t>(i)]];
        type_onehot[static_cast<std::size_t>(t) * hw + i] = 1.0;
    }

    CellNodeGrid grid;
    grid.h = lat.h;
    grid.w = lat.w;
    const int n_nodes = lat.n_cells() + 1;
    grid.nodes.reserve(static_cast<std::size_t>(n_nodes));
    for (int k = 0; k < n_nodes; ++k) {
        std::vector<double> data(static_cast<std::size_t>(1 + tch) * hw, 0.0);
        for (int i = 0; i < hw; ++i)
            if (lat.sites[static_cast<std::size_t>(i)] == k) data[static_cast<std::size_t>(i)] = 1.0;
        std::copy(type_onehot.begin(), type_onehot.end(), data.begin() + hw);
        grid.nodes.push_back(Tensor::from({1 + tch, lat.h, lat.w}, std::move(data)));
    }
    return grid;
}

Lattice decode_argmax(const CellNodeGrid& grid, const std::vector<std::uint8_t>& cell_types) {
    Lattice lat;
    lat.h = grid.h;
    lat.w = grid.w;
    lat.cell_types = cell_types;
    const int hw = grid.h * grid.w;
    lat.sites.assign(static_cast<std::size_t>(hw), 0);
    for (int i = 0; i < hw; ++i) {
        int best = 0;
        double best_v = grid.nodes[0].data()[static_cast<std::size_t>(i)];
        for (int k = 1; k < grid.n_nodes(); ++k) {
            const double v = grid.nodes[static_cast<std::size_t>(k)].data()[static_cast<std::size_t>(i)];
            if (v > best_v) {
                best_v = v;
                best = k;
            }
        }
        lat.sites[static_cast<std::size_t>(i)] = static_cast<std::uint16_t>(best);
    }
    return lat;
}

SpatialConvLayer SpatialConvLayer::create(ParamStore& ps, const std::string& name, int channels, int phi_kernel,
                                          int phi_blocks, const std::vector<int>& unet_widths, int unet_kernel,
                                          Rng& rng) {
    SpatialConvLayer l;
    l.phi_down = Conv2d::create(ps, name + ".phi_down", channels, channels, 2, 2, 0, rng);
    for (int b = 0; b < phi_blocks; ++b)
        l.phi.push_back(Conv2d::create(ps, name + ".phi" + std::to_string(b), channels, channels, phi_kernel, 1,
                                       (phi_kernel - 1) / 2, rng));
    l.psi_up = ConvT2d::create(ps, name + ".psi_up", channels, channels, 2, 2, rng);
    l.psi_unet = UNet::create(ps, name + ".psi_unet", 2 * channels, channels, unet_widths, unet_kernel, rng);
    return l;
}

CellNodeGrid SpatialConvLayer::apply(Tape& tape, const CellNodeGrid& in) const {
    if (in.h % 8 != 0 || in.w % 8 != 0)
        throw ShapeError("SpatialConvLayer requires spatial dims divisible by 8, got " +
                         std::to_string(in.h) + "x" + std::to_string(in.w));
    // phi on every node, then one shared permutation-invariant mean
    std::vector<Tensor> msgs;
    msgs.reserve(in.nodes.size());
    for (const Tensor& hj : in.nodes) {
        Tensor f = phi_down.apply(tape, hj);
        for (const auto& conv : phi) f = tape.relu(conv.apply(tape, f));
        msgs.push_back(f);
    }
    Tensor agg = tape.mean_stack(msgs);
    Tensor up = psi_up.apply(tape, agg);

    CellNodeGrid out;
    out.h = in.h;
    out.w = in.w;
    out.nodes.reserve(in.nodes.size());
    for (const Tensor& hi : in.nodes) out.nodes.push_back(psi_unet.apply(tape, tape.concat({hi, up}, 0)));
    return out;
}

} // namespace epns
