#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "epns/nn.hpp"
#include "epns/rng.hpp"
#include "epns/tensor.hpp"

using namespace epns;

namespace {

Tensor random_tensor(Shape dims, Rng& rng, bool requires_grad = false, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(dims), requires_grad);
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// triple-loop reference product
std::vector<double> matmul_oracle(const Tensor& a, const Tensor& b) {
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            for (int p = 0; p < k; ++p)
                c[static_cast<std::size_t>(i) * n + j] += a.at({i, p}) * b.at({p, j});
    return c;
}

// direct six-loop convolution
std::vector<double> conv2d_oracle(const Tensor& x, const Tensor& k, int stride, int pad, int& oh, int& ow) {
    const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    oh = (h + 2 * pad - kh) / stride + 1;
    ow = (w + 2 * pad - kw) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(co) * oh * ow, 0.0);
    for (int oc = 0; oc < co; ++oc)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox)
                for (int ic = 0; ic < ci; ++ic)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            const int iy = oy * stride + ky - pad;
                            const int ix = ox * stride + kx - pad;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            out[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox] +=
                                x.at({ic, iy, ix}) * k.at({oc, ic, ky, kx});
                        }
    return out;
}

// FD gradient of a scalar function of one tensor
double fd_grad(const std::function<double()>& f, double& slot, double step = 1e-5) {
    const double orig = slot;
    slot = orig + step;
    const double up = f();
    slot = orig - step;
    const double dn = f();
    slot = orig;
    return (up - dn) / (2.0 * step);
}

} // namespace

TEST_CASE("elementwise basics") {
    Tape tape;
    Tensor r = tape.relu(Tensor::from({3}, {-1, 0, 2}));
    CHECK(r.data() == std::vector<double>{0, 0, 2});

    Tensor sp = tape.softplus(Tensor::scalar(0.0));
    CHECK(sp.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Tensor s = tape.add(Tensor::from({2}, {1, 2}), Tensor::from({2}, {3, 4}));
    CHECK(s.data() == std::vector<double>{4, 6});

    // softplus is overflow-safe on both tails
    CHECK(tape.softplus(Tensor::scalar(1000.0)).item() == doctest::Approx(1000.0));
    CHECK(tape.softplus(Tensor::scalar(-1000.0)).item() == doctest::Approx(0.0));
    CHECK(std::isfinite(tape.softplus(Tensor::scalar(750.0)).item()));
}

TEST_CASE("broadcast rules and errors") {
    Tape tape;
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from({3}, {10, 20, 30});
    Tensor c = tape.add(a, b);
    CHECK(c.data() == std::vector<double>{11, 22, 33, 14, 25, 36});

    Tensor col = Tensor::from({2, 1}, {100, 200});
    Tensor d = tape.add(a, col);
    CHECK(d.data() == std::vector<double>{101, 102, 103, 204, 205, 206});

    CHECK_THROWS_AS(tape.add(a, Tensor::from({2}, {1, 2})), ShapeError);
    CHECK_THROWS_AS(tape.matmul(a, a), ShapeError);
}

TEST_CASE("matmul against triple-loop oracle") {
    Rng rng(7);
    Tensor a = random_tensor({4, 5}, rng);
    Tensor b = random_tensor({5, 3}, rng);
    Tape tape;
    Tensor c = tape.matmul(a, b);
    const auto expect = matmul_oracle(a, b);
    for (std::size_t i = 0; i < expect.size(); ++i)
        CHECK(std::abs(c.data()[i] - expect[i]) < 1e-12);

    // identity times M = M
    Tensor eye = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) eye.data()[static_cast<std::size_t>(i) * 3 + i] = 1.0;
    Tensor m = random_tensor({3, 3}, rng);
    Tensor im = tape.matmul(eye, m);
    for (std::size_t i = 0; i < m.data().size(); ++i) CHECK(im.data()[i] == doctest::Approx(m.data()[i]));

    Tensor r = tape.matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
    CHECK(r.item() == doctest::Approx(11.0));
}

TEST_CASE("conv2d against six-loop oracle") {
    Rng rng(21);
    for (const auto& [stride, pad, kh] : std::vector<std::tuple<int, int, int>>{{1, 1, 3}, {1, 2, 5}, {2, 0, 2}, {1, 4, 9}}) {
        Tensor x = random_tensor({3, 12, 12}, rng);
        Tensor k = random_tensor({4, 3, kh, kh}, rng);
        Tape tape;
        Tensor y = tape.conv2d(x, k, stride, pad);
        int oh = 0, ow = 0;
        const auto expect = conv2d_oracle(x, k, stride, pad, oh, ow);
        REQUIRE(y.dims() == Shape{4, oh, ow});
        for (std::size_t i = 0; i < expect.size(); ++i) CHECK(std::abs(y.data()[i] - expect[i]) < 1e-12);
    }

    // 1x1 kernel of value 1 is the identity map
    Tape tape;
    Tensor x = random_tensor({1, 5, 5}, *(new Rng(3)));
    Tensor k1 = Tensor::from({1, 1, 1, 1}, {1.0});
    Tensor y = tape.conv2d(x, k1, 1, 0);
    for (std::size_t i = 0; i < x.data().size(); ++i) CHECK(y.data()[i] == x.data()[i]);

    // all-ones 3x3 kernel on all-ones 5x5 input, padding 1: center value 9
    Tensor ones = Tensor::full({1, 5, 5}, 1.0);
    Tensor k3 = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor y3 = tape.conv2d(ones, k3, 1, 1);
    CHECK(y3.at({0, 2, 2}) == doctest::Approx(9.0));

    CHECK_THROWS_AS(tape.conv2d(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 7, 7}), 1, 0), ShapeError);
}

TEST_CASE("pooling against loop oracle and gradient routing") {
    Tape tape;
    Tensor x = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
    CHECK(tape.pool2d(x, PoolKind::Max, 2).item() == doctest::Approx(4.0));

    Tensor c = Tensor::full({3, 4, 4}, 2.5);
    Tensor g = tape.global_mean_pool(c);
    for (double v : g.data()) CHECK(v == doctest::Approx(2.5));

    Rng rng(5);
    Tensor r = random_tensor({2, 6, 6}, rng);
    Tensor mp = tape.pool2d(r, PoolKind::Mean, 2);
    for (int ch = 0; ch < 2; ++ch)
        for (int oy = 0; oy < 3; ++oy)
            for (int ox = 0; ox < 3; ++ox) {
                double s = 0.0;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) s += r.at({ch, 2 * oy + dy, 2 * ox + dx});
                CHECK(mp.at({ch, oy, ox}) == doctest::Approx(s / 4.0).epsilon(1e-12));
            }

    // non-divisible dims: max ignores the padding, mean averages over members
    Tensor odd = Tensor::from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor mx = tape.pool2d(odd, PoolKind::Max, 2);
    CHECK(mx.dims() == Shape{1, 2, 2});
    CHECK(mx.at({0, 1, 1}) == doctest::Approx(9.0));
    Tensor mn = tape.pool2d(odd, PoolKind::Mean, 2);
    CHECK(mn.at({0, 1, 1}) == doctest::Approx(9.0)); // single member window

    // max pool routes gradient to the argmax element only
    Tape t2;
    Tensor xx = Tensor::from({1, 2, 2}, {1, 7, 3, 4}, true);
    Tensor y = t2.pool2d(xx, PoolKind::Max, 2);
    t2.backward(t2.sum_all(y));
    CHECK(xx.grad() == std::vector<double>{0, 1, 0, 0});
}

TEST_CASE("transposed conv: shape rule and adjoint identity") {
    Rng rng(11);
    Tape tape;
    // stride-2 upsample of 4x4 -> 8x8
    Tensor x = random_tensor({3, 4, 4}, rng);
    Tensor k = random_tensor({3, 2, 2, 2}, rng);
    Tensor y = tape.conv_transpose2d(x, k, 2, 0);
    CHECK(y.dims() == Shape{2, 8, 8});

    // 1x1 kernel of value 1: identity
    Tensor k1 = Tensor::from({1, 1, 1, 1}, {1.0});
    Tensor x1 = random_tensor({1, 5, 5}, rng);
    Tensor y1 = tape.conv_transpose2d(x1, k1, 1, 0);
    for (std::size_t i = 0; i < x1.data().size(); ++i) CHECK(y1.data()[i] == x1.data()[i]);

    // <conv(x), y> == <x, convT(y)> with the same kernel
    for (const auto& [stride, pad] : std::vector<std::pair<int, int>>{{1, 1}, {2, 0}, {1, 0}}) {
        const int kh = stride == 1 ? 3 : 2;
        Tensor xa = random_tensor({2, 8, 8}, rng);
        Tensor kk = random_tensor({3, 2, kh, kh}, rng);
        Tensor cx = tape.conv2d(xa, kk, stride, pad);
        Tensor yb = random_tensor(cx.dims(), rng);
        double lhs = 0.0;
        for (std::size_t i = 0; i < cx.data().size(); ++i) lhs += cx.data()[i] * yb.data()[i];
        Tensor xt = tape.conv_transpose2d(yb, kk, stride, pad);
        REQUIRE(xt.dims() == xa.dims());
        double rhs = 0.0;
        for (std::size_t i = 0; i < xa.data().size(); ++i) rhs += xa.data()[i] * xt.data()[i];
        CHECK(std::abs(lhs - rhs) < 1e-10);
    }
}

TEST_CASE("softmax properties and gradient") {
    Tape tape;
    Tensor s = tape.softmax(Tensor::from({2}, {0, 0}), 0);
    CHECK(s.data()[0] == doctest::Approx(0.5));
    CHECK(s.data()[1] == doctest::Approx(0.5));

    // shift invariance
    Rng rng(2);
    Tensor a = random_tensor({5}, rng);
    Tensor b = Tensor::zeros({5});
    for (int i = 0; i < 5; ++i) b.data()[static_cast<std::size_t>(i)] = a.data()[static_cast<std::size_t>(i)] + 123.45;
    Tensor sa = tape.softmax(a, 0), sb = tape.softmax(b, 0);
    for (int i = 0; i < 5; ++i) CHECK(sa.data()[static_cast<std::size_t>(i)] == doctest::Approx(sb.data()[static_cast<std::size_t>(i)]).epsilon(1e-12));

    // positive, sums to one along the axis
    Tensor m = random_tensor({3, 4}, rng);
    Tensor sm = tape.softmax(m, 1);
    for (int r = 0; r < 3; ++r) {
        double total = 0.0;
        for (int c = 0; c < 4; ++c) {
            CHECK(sm.at({r, c}) > 0.0);
            total += sm.at({r, c});
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }

    // gradient vs central differences
    Tensor x = random_tensor({4}, rng, true);
    auto loss = [&]() {
        Tape t;
        Tensor y = t.softmax(x, 0);
        Tensor w = Tensor::from({4}, {0.3, -0.7, 1.1, 0.2});
        return t.sum_all(t.mul(y, w)).item();
    };
    {
        Tape t;
        Tensor y = t.softmax(x, 0);
        Tensor w = Tensor::from({4}, {0.3, -0.7, 1.1, 0.2});
        x.zero_grad();
        t.backward(t.sum_all(t.mul(y, w)));
    }
    for (int i = 0; i < 4; ++i) {
        const double fd = fd_grad(loss, x.data()[static_cast<std::size_t>(i)]);
        const double an = x.grad()[static_cast<std::size_t>(i)];
        CHECK(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8}) < 1e-6);
    }
}

TEST_CASE("backward basics and determinism") {
    // loss = sum(x) -> grad ones
    Tensor x = Tensor::from({4}, {1, 2, 3, 4}, true);
    Tape tape;
    Tensor loss = tape.sum_all(x);
    tape.backward(loss);
    CHECK(x.grad() == std::vector<double>{1, 1, 1, 1});

    // loss = sum(x*y) -> grad(x) = y
    Tensor a = Tensor::from({3}, {1, 2, 3}, true);
    Tensor b = Tensor::from({3}, {5, 6, 7});
    Tape t2;
    Tensor l2 = t2.sum_all(t2.mul(a, b));
    t2.backward(l2);
    CHECK(a.grad() == std::vector<double>{5, 6, 7});

    CHECK_THROWS(t2.backward(t2.mul(a, b))); // non-scalar loss

    // replay with cleared grads gives identical results
    Rng rng(9);
    Tensor p = random_tensor({6}, rng, true);
    Tape t3;
    Tensor h = t3.relu(t3.mul(p, p));
    Tensor l3 = t3.sum_all(h);
    t3.backward(l3);
    const auto g1 = p.grad();
    t3.zero_grads();
    t3.backward(l3);
    CHECK(p.grad() == g1);
}

TEST_CASE("grad accumulates across uses") {
    Tensor x = Tensor::from({1}, {3.0}, true);
    Tape tape;
    Tensor y = tape.add(tape.mul(x, x), x); // x^2 + x -> dy/dx = 2x + 1 = 7
    tape.backward(tape.sum_all(y));
    CHECK(x.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("structural ops round trip gradients") {
    Rng rng(31);
    Tensor a = random_tensor({2, 3}, rng, true);
    Tensor b = random_tensor({2, 2}, rng, true);
    Tape tape;
    Tensor cat = tape.concat({a, b}, 1);
    CHECK(cat.dims() == Shape{2, 5});
    Tensor sl = tape.slice(cat, 1, 3, 2);
    tape.backward(tape.sum_all(sl));
    CHECK(b.grad() == std::vector<double>{1, 1, 1, 1});
    for (double g : a.grad()) CHECK(g == 0.0);

    Tape t2;
    std::vector<int> idx{1, 1, 0};
    Tensor g = t2.gather_rows(a, idx);
    CHECK(g.dims() == Shape{3, 3});
    t2.backward(t2.sum_all(g));
    CHECK(a.grad()[0] == doctest::Approx(1.0));
    CHECK(a.grad()[3] == doctest::Approx(2.0));
}

TEST_CASE("segment_mean is order-invariant and differentiates") {
    Rng rng(13);
    Tensor msg = random_tensor({6, 2}, rng, true);
    std::vector<int> recv{0, 1, 0, 1, 0, 2};
    Tape tape;
    Tensor out = tape.segment_mean(msg, recv, 3);
    CHECK(out.dims() == Shape{3, 2});
    const double expect0 = (msg.at({0, 0}) + msg.at({2, 0}) + msg.at({4, 0})) / 3.0;
    CHECK(out.at({0, 0}) == doctest::Approx(expect0).epsilon(1e-12));
    tape.backward(tape.sum_all(out));
    CHECK(msg.grad()[0] == doctest::Approx(1.0 / 3.0));
    CHECK(msg.grad()[10] == doctest::Approx(1.0));

    // permuting edges leaves each segment's value bitwise unchanged
    std::vector<int> perm{4, 2, 0, 3, 1, 5};
    std::vector<double> pdata;
    for (int e : perm)
        for (int d = 0; d < 2; ++d) pdata.push_back(msg.at({e, d}));
    std::vector<int> precv;
    for (int e : perm) precv.push_back(recv[static_cast<std::size_t>(e)]);
    Tape t2;
    Tensor out2 = t2.segment_mean(Tensor::from({6, 2}, pdata), precv, 3);
    CHECK(out2.data() == out.data());
}

TEST_CASE("finite_difference_check on small closed forms") {
    // quadratic f(w) = w^T w at w = [1,2]: grad [2,4]
    ParamStore ps;
    Rng rng(1);
    Tensor w = ps.add_zeros("w", {2});
    w.data() = {1.0, 2.0};
    auto loss_grad = [&]() {
        Tape t;
        Tensor l = t.sum_all(t.mul(w, w));
        t.backward(l);
        return l.item();
    };
    auto loss_val = [&]() {
        Tape t(false);
        return t.sum_all(t.mul(w, w)).item();
    };
    ps.zero_grads();
    loss_grad();
    CHECK(w.grad()[0] == doctest::Approx(2.0));
    CHECK(w.grad()[1] == doctest::Approx(4.0));
    FdReport rep = finite_difference_check(ps, loss_grad, loss_val, 1e-5, 2, 99);
    CHECK(rep.worst_rel_err < 1e-8);

    // softplus chain
    ParamStore ps2;
    Tensor v = ps2.add("v", {3}, 3, rng);
    auto chain_grad = [&]() {
        Tape t;
        Tensor l = t.sum_all(t.softplus(t.mul_scalar(v, 1.7)));
        t.backward(l);
        return l.item();
    };
    auto chain_val = [&]() {
        Tape t(false);
        return t.sum_all(t.softplus(t.mul_scalar(v, 1.7))).item();
    };
    FdReport rep2 = finite_difference_check(ps2, chain_grad, chain_val, 1e-5, 3, 7);
    CHECK(rep2.within(1e-7));
}

TEST_CASE("gradients of composite network blocks match finite differences") {
    Rng rng(17);
    ParamStore ps;
    Linear l1 = Linear::create(ps, "l1", 4, 5, rng);
    Conv2d cv = Conv2d::create(ps, "cv", 2, 3, 3, 1, 1, rng);
    ConvT2d ct = ConvT2d::create(ps, "ct", 3, 2, 2, 2, rng);
    Tensor x = random_tensor({3, 4}, rng);
    Tensor img = random_tensor({2, 6, 6}, rng);
    Tensor w = random_tensor({5}, rng);

    auto run = [&](bool grad) {
        Tape t(grad);
        Tensor y = t.relu(l1.apply(t, x));
        Tensor c = t.relu(cv.apply(t, img));
        Tensor u = ct.apply(t, c);
        Tensor pooled = t.global_mean_pool(t.upsample_nearest2x(u));
        Tensor mixed = t.add(t.sum_all(t.mul(y, t.reshape(t.gather_rows(t.reshape(w, {5, 1}), {0, 1, 2, 3, 4}), {5}))),
                             t.sum_all(pooled));
        Tensor l = t.add(mixed, t.sum_all(t.log_softmax(t.slice(y, 1, 0, 3), 1)));
        if (grad) t.backward(l);
        return l.item();
    };
    FdReport rep = finite_difference_check(
        ps, [&]() { return run(true); }, [&]() { return run(false); }, 1e-5, 4, 4242);
    CHECK(rep.within(1e-6));
}
