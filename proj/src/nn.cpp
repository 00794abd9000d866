#include "epns/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace epns {

Tensor ParamStore::add(const std::string& name, Shape dims, int fan_in, Rng& rng) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor t = Tensor::zeros(dims, true);
    for (auto& v : t.data()) v = rng.uniform(-scale, scale);
    items_.push_back({name, t});
    return t;
}

Tensor ParamStore::add_zeros(const std::string& name, Shape dims) {
    Tensor t = Tensor::zeros(dims, true);
    items_.push_back({name, t});
    return t;
}

Tensor ParamStore::find(const std::string& name) const {
    for (const auto& it : items_)
        if (it.name == name) return it.t;
    throw std::runtime_error("parameter not found: " + name);
}

std::int64_t ParamStore::total_entries() const {
    std::int64_t n = 0;
    for (const auto& it : items_) n += it.t.size();
    return n;
}

void ParamStore::zero_grads() {
    for (auto& it : items_) it.t.zero_grad();
}

void ParamStore::copy_values_from(const ParamStore& other) {
    if (other.size() != size()) throw std::runtime_error("ParamStore layout mismatch in copy_values_from");
    for (std::size_t i = 0; i < items_.size(); ++i) {
        if (items_[i].t.dims() != other.items_[i].t.dims())
            throw std::runtime_error("ParamStore shape mismatch at " + items_[i].name);
        items_[i].t.data() = other.items_[i].t.data();
    }
}

bool ParamStore::grads_finite() const {
    for (const auto& it : items_)
        for (double g : it.t.grad())
            if (!std::isfinite(g)) return false;
    return true;
}

Linear Linear::create(ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
    Linear l;
    l.w = ps.add(name + ".w", {in, out}, in, rng);
    l.b = ps.add_zeros(name + ".b", {out});
    return l;
}

Tensor Linear::apply(Tape& tape, const Tensor& x) const {
    return tape.add_bias(tape.matmul(x, w), b);
}

Mlp Mlp::create(ParamStore& ps, const std::string& name, int in, int hidden, int out, int depth, Rng& rng) {
    Mlp m;
    int cur = in;
    for (int i = 0; i < depth; ++i) {
        const int width = i + 1 == depth ? out : hidden;
        m.layers.push_back(Linear::create(ps, name + ".l" + std::to_string(i), cur, width, rng));
        cur = width;
    }
    return m;
}

Tensor Mlp::apply(Tape& tape, const Tensor& x) const {
    Tensor h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        h = layers[i].apply(tape, h);
        if (i + 1 < layers.size()) h = tape.relu(h);
    }
    return h;
}

Conv2d Conv2d::create(ParamStore& ps, const std::string& name, int ci, int co, int kernel, int stride, int padding,
                      Rng& rng) {
    Conv2d c;
    c.k = ps.add(name + ".k", {co, ci, kernel, kernel}, ci * kernel * kernel, rng);
    c.b = ps.add_zeros(name + ".b", {co});
    c.stride = stride;
    c.padding = padding;
    return c;
}

Tensor Conv2d::apply(Tape& tape, const Tensor& x) const {
    return tape.add_bias(tape.conv2d(x, k, stride, padding), b);
}

ConvT2d ConvT2d::create(ParamStore& ps, const std::string& name, int ci, int co, int kernel, int stride, Rng& rng) {
    ConvT2d c;
    c.k = ps.add(name + ".k", {ci, co, kernel, kernel}, ci * kernel * kernel, rng);
    c.b = ps.add_zeros(name + ".b", {co});
    c.stride = stride;
    return c;
}

Tensor ConvT2d::apply(Tape& tape, const Tensor& x) const {
    return tape.add_bias(tape.conv_transpose2d(x, k, stride, 0), b);
}

UNet UNet::create(ParamStore& ps, const std::string& name, int in_ch, int out_ch, const std::vector<int>& widths,
                  int kernel, Rng& rng) {
    if (widths.size() != 3) throw std::runtime_error("UNet expects exactly 3 level widths");
    const int pad = (kernel - 1) / 2;
    UNet u;
    u.in_channels = in_ch;
    u.out_channels = out_ch;
    u.enc0 = Conv2d::create(ps, name + ".enc0", in_ch, widths[0], kernel, 1, pad, rng);
    u.enc1 = Conv2d::create(ps, name + ".enc1", widths[0], widths[1], kernel, 1, pad, rng);
    u.enc2 = Conv2d::create(ps, name + ".enc2", widths[1], widths[2], kernel, 1, pad, rng);
    u.mid = Conv2d::create(ps, name + ".mid", widths[2], widths[2], kernel, 1, pad, rng);
    u.dec2 = Conv2d::create(ps, name + ".dec2", widths[2] * 2, widths[1], kernel, 1, pad, rng);
    u.dec1 = Conv2d::create(ps, name + ".dec1", widths[1] * 2, widths[0], kernel, 1, pad, rng);
    u.dec0 = Conv2d::create(ps, name + ".dec0", widths[0] * 2, widths[0], kernel, 1, pad, rng);
    u.out = Conv2d::create(ps, name + ".out", widths[0], out_ch, 1, 1, 0, rng);
    return u;
}

Tensor UNet::apply(Tape& tape, const Tensor& x) const {
    if (x.dim(1) % 8 != 0 || x.dim(2) % 8 != 0)
        throw ShapeError("UNet requires spatial dims divisible by 8, got " + shape_str(x.dims()));
    Tensor s0 = tape.relu(enc0.apply(tape, x));              // [w0, h, w]
    Tensor p0 = tape.pool2d(s0, PoolKind::Max, 2);           // h/2
    Tensor s1 = tape.relu(enc1.apply(tape, p0));             // [w1, h/2, w/2]
    Tensor p1 = tape.pool2d(s1, PoolKind::Max, 2);           // h/4
    Tensor s2 = tape.relu(enc2.apply(tape, p1));             // [w2, h/4, w/4]
    Tensor p2 = tape.pool2d(s2, PoolKind::Max, 2);           // h/8
    Tensor m = tape.relu(mid.apply(tape, p2));               // [w2, h/8, w/8]
    Tensor u2 = tape.upsample_nearest2x(m);                  // h/4
    Tensor d2 = tape.relu(dec2.apply(tape, tape.concat({u2, s2}, 0)));
    Tensor u1 = tape.upsample_nearest2x(d2);                 // h/2
    Tensor d1 = tape.relu(dec1.apply(tape, tape.concat({u1, s1}, 0)));
    Tensor u0 = tape.upsample_nearest2x(d1);                 // h
    Tensor d0 = tape.relu(dec0.apply(tape, tape.concat({u0, s0}, 0)));
    return out.apply(tape, d0);
}

} // namespace epns
