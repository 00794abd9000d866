#pragma once

#include <string>
#include <vector>

#include "epns/rng.hpp"
#include "epns/tensor.hpp"

namespace epns {

// Ordered, named collection of trainable tensors. Construction order is
// deterministic for a given model config, so two stores built from the same
// config align index-by-index (used for replica sync and gradient reduction).
class ParamStore {
public:
    // uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]
    Tensor add(const std::string& name, Shape dims, int fan_in, Rng& rng);
    Tensor add_zeros(const std::string& name, Shape dims);

    std::size_t size() const { return items_.size(); }
    Tensor tensor(std::size_t i) { return items_[i].t; }
    const Tensor& tensor(std::size_t i) const { return items_[i].t; }
    const std::string& name(std::size_t i) const { return items_[i].name; }
    Tensor find(const std::string& name) const;

    std::int64_t total_entries() const;
    void zero_grads();
    // copies values elementwise from another store with identical layout
    void copy_values_from(const ParamStore& other);
    bool grads_finite() const;

private:
    struct Item {
        std::string name;
        Tensor t;
    };
    std::vector<Item> items_;
};

struct Linear {
    Tensor w; // [in, out]
    Tensor b; // [out]

    static Linear create(ParamStore& ps, const std::string& name, int in, int out, Rng& rng);
    Tensor apply(Tape& tape, const Tensor& x) const; // [n,in] -> [n,out]
};

// Two-layer ReLU MLP unless depth says otherwise; hidden width == out width.
struct Mlp {
    std::vector<Linear> layers;

    static Mlp create(ParamStore& ps, const std::string& name, int in, int hidden, int out, int depth, Rng& rng);
    Tensor apply(Tape& tape, const Tensor& x) const;
};

struct Conv2d {
    Tensor k; // [co, ci, kh, kw]
    Tensor b; // [co]
    int stride = 1;
    int padding = 0;

    static Conv2d create(ParamStore& ps, const std::string& name, int ci, int co, int kernel, int stride,
                         int padding, Rng& rng);
    Tensor apply(Tape& tape, const Tensor& x) const;
};

// Transposed convolution layer (upsampling); weight layout [ci, co, kh, kw]
// matches the adjoint kernel layout used by Tape::conv_transpose2d.
struct ConvT2d {
    Tensor k;
    Tensor b; // [co]
    int stride = 2;

    static ConvT2d create(ParamStore& ps, const std::string& name, int ci, int co, int kernel, int stride, Rng& rng);
    Tensor apply(Tape& tape, const Tensor& x) const;
};

// Three-level encoder/decoder with skip concatenations, nearest-neighbor
// upsampling and a linear 1x1 output conv. Spatial dims must be divisible by 8.
struct UNet {
    Conv2d enc0, enc1, enc2, mid, dec2, dec1, dec0, out;
    int in_channels = 0, out_channels = 0;

    static UNet create(ParamStore& ps, const std::string& name, int in_ch, int out_ch, const std::vector<int>& widths,
                       int kernel, Rng& rng);
    Tensor apply(Tape& tape, const Tensor& x) const;
};

} // namespace epns
