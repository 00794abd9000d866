#include "epns/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "epns/nn.hpp"
#include "epns/rng.hpp"

namespace epns {

namespace {

// Activation tensors are allocated and freed at a high rate; keep glibc from
// serving them with mmap/munmap round trips (page faults dominate otherwise).
struct MallocTuning {
    MallocTuning() {
#if defined(__GLIBC__)
        mallopt(M_MMAP_THRESHOLD, 64 << 20);
        mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
    }
};
const MallocTuning g_malloc_tuning;

} // namespace

std::int64_t shape_numel(const Shape& dims) {
    std::int64_t n = 1;
    for (int d : dims) n *= d;
    return n;
}

std::string shape_str(const Shape& dims) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
    os << "]";
    return os.str();
}

namespace {

void check_dims_positive(const Shape& dims) {
    for (int d : dims) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(dims));
    }
}

// Sums a small scratch vector in ascending value order. Addition order then
// depends only on the multiset of values, which makes aggregations invariant
// to node/edge relabeling at the bit level. NaNs skip the sort (sum is NaN
// regardless of order).
double sorted_sum(std::vector<double>& vals) {
    bool has_nan = false;
    for (double v : vals) {
        if (std::isnan(v)) {
            has_nan = true;
            break;
        }
    }
    if (!has_nan) std::sort(vals.begin(), vals.end());
    double s = 0.0;
    for (double v : vals) s += v;
    return s;
}

} // namespace

Tensor Tensor::zeros(Shape dims, bool requires_grad) {
    check_dims_positive(dims);
    auto node = std::make_shared<TensorNode>();
    node->value.assign(static_cast<std::size_t>(shape_numel(dims)), 0.0);
    node->dims = std::move(dims);
    node->requires_grad = requires_grad;
    if (requires_grad) node->grad.assign(node->value.size(), 0.0);
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

Tensor Tensor::full(Shape dims, double v, bool requires_grad) {
    Tensor t = zeros(std::move(dims), requires_grad);
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
}

Tensor Tensor::from(Shape dims, std::vector<double> data, bool requires_grad) {
    check_dims_positive(dims);
    if (static_cast<std::int64_t>(data.size()) != shape_numel(dims))
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(dims));
    auto node = std::make_shared<TensorNode>();
    node->dims = std::move(dims);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    if (requires_grad) node->grad.assign(node->value.size(), 0.0);
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

std::vector<double>& Tensor::grad() {
    if (!node_->requires_grad) throw std::runtime_error("tensor does not require grad");
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (!node_->requires_grad) throw std::runtime_error("tensor does not require grad");
    return node_->grad;
}

void Tensor::set_requires_grad(bool b) {
    node_->requires_grad = b;
    if (b && node_->grad.size() != node_->value.size()) node_->grad.assign(node_->value.size(), 0.0);
}

void Tensor::zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(dims()));
    return node_->value[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    const Shape& d = dims();
    if (idx.size() != d.size()) throw ShapeError("index rank mismatch for " + shape_str(d));
    std::int64_t off = 0;
    std::size_t k = 0;
    for (int i : idx) {
        off = off * d[k] + i;
        ++k;
    }
    return node_->value[static_cast<std::size_t>(off)];
}

// ---------------------------------------------------------------------------
// tape plumbing
// ---------------------------------------------------------------------------

bool Tape::wants_grad(std::initializer_list<const Tensor*> inputs) const {
    if (!grad_enabled) return false;
    for (const Tensor* t : inputs) {
        if (t && t->defined() && t->requires_grad()) return true;
    }
    return false;
}

void Tape::note(const Tensor& t) {
    if (t.defined() && t.requires_grad()) touched_.push_back(t.shared_node());
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.dims()));
    if (!loss.requires_grad())
        throw std::runtime_error("backward: loss is not connected to any grad-requiring tensor");
    loss.node()->grad[0] += 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->fn();
}

void Tape::zero_grads() {
    for (auto& n : touched_) std::fill(n->grad.begin(), n->grad.end(), 0.0);
}

// ---------------------------------------------------------------------------
// elementwise with trailing broadcast
// ---------------------------------------------------------------------------

namespace {

struct BroadcastPlan {
    Shape out;
    std::vector<std::int64_t> stride_a, stride_b; // strides in out space, 0 on broadcast axes
    bool same_shape = false;
};

BroadcastPlan make_broadcast(const Shape& a, const Shape& b) {
    BroadcastPlan plan;
    if (a == b) {
        plan.out = a;
        plan.same_shape = true;
        return plan;
    }
    const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    plan.out.resize(r);
    for (int i = 0; i < r; ++i) {
        const int da = i < r - ra ? 1 : a[i - (r - ra)];
        const int db = i < r - rb ? 1 : b[i - (r - rb)];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("broadcast mismatch between " + shape_str(a) + " and " + shape_str(b));
        plan.out[i] = std::max(da, db);
    }
    auto strides_for = [&](const Shape& s) {
        std::vector<std::int64_t> st(r, 0);
        std::int64_t acc = 1;
        const int rs = static_cast<int>(s.size());
        for (int i = rs - 1; i >= 0; --i) {
            const int axis = i + (r - rs);
            st[axis] = (s[i] == 1 && plan.out[axis] != 1) ? 0 : acc;
            acc *= s[i];
        }
        return st;
    };
    plan.stride_a = strides_for(a);
    plan.stride_b = strides_for(b);
    return plan;
}

double ew_unary(EwKind k, double x) {
    switch (k) {
        case EwKind::Relu: return x > 0.0 ? x : 0.0;
        case EwKind::Softplus:
            // log(1 + e^x), overflow safe on both tails
            return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
        case EwKind::Exp: return std::exp(x);
        case EwKind::Log: return std::log(x);
        case EwKind::Neg: return -x;
        case EwKind::Sqrt: return std::sqrt(x);
        default: return 0.0;
    }
}

double ew_unary_bw(EwKind k, double x, double y, double g) {
    switch (k) {
        case EwKind::Relu: return x > 0.0 ? g : 0.0;
        case EwKind::Softplus: {
            const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            return g * s;
        }
        case EwKind::Exp: return g * y;
        case EwKind::Log: return g / x;
        case EwKind::Neg: return -g;
        case EwKind::Sqrt: return g * 0.5 / y;
        default: return 0.0;
    }
}

} // namespace

Tensor Tape::elementwise(EwKind kind, const Tensor& a, const Tensor* b) {
    const bool binary = kind == EwKind::Add || kind == EwKind::Sub || kind == EwKind::Mul || kind == EwKind::Div;
    if (binary && (b == nullptr || !b->defined()))
        throw ShapeError("binary elementwise op requires two operands");

    if (!binary) {
        Tensor out = Tensor::zeros(a.dims());
        const auto& x = a.data();
        auto& y = out.data();
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = ew_unary(kind, x[i]);
        if (wants_grad({&a})) {
            out.set_requires_grad(true);
            note(a);
            note(out);
            Tensor ac = a, oc = out;
            push([kind, ac, oc]() {
                const auto& g = oc.node()->grad;
                const auto& x = ac.node()->value;
                const auto& y = oc.node()->value;
                auto& gx = ac.node()->grad;
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += ew_unary_bw(kind, x[i], y[i], g[i]);
            });
        }
        return out;
    }

    const BroadcastPlan plan = make_broadcast(a.dims(), b->dims());
    Tensor out = Tensor::zeros(plan.out);
    const double* pa = a.data().data();
    const double* pb = b->data().data();
    double* po = out.data().data();
    const std::int64_t n = out.size();

    auto apply = [kind](double x, double y) {
        switch (kind) {
            case EwKind::Add: return x + y;
            case EwKind::Sub: return x - y;
            case EwKind::Mul: return x * y;
            default: return x / y;
        }
    };

    std::vector<std::int64_t> off_a, off_b;
    if (plan.same_shape) {
        switch (kind) {
            case EwKind::Add: for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
            case EwKind::Sub: for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
            case EwKind::Mul: for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
            default:          for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i]; break;
        }
    } else {
        // precompute flat offsets once; reused by the backward closure
        off_a.resize(static_cast<std::size_t>(n));
        off_b.resize(static_cast<std::size_t>(n));
        const int r = static_cast<int>(plan.out.size());
        std::vector<int> idx(r, 0);
        std::int64_t oa = 0, ob = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            off_a[static_cast<std::size_t>(i)] = oa;
            off_b[static_cast<std::size_t>(i)] = ob;
            po[i] = apply(pa[oa], pb[ob]);
            for (int ax = r - 1; ax >= 0; --ax) {
                ++idx[ax];
                oa += plan.stride_a[ax];
                ob += plan.stride_b[ax];
                if (idx[ax] < plan.out[ax]) break;
                idx[ax] = 0;
                oa -= plan.stride_a[ax] * plan.out[ax];
                ob -= plan.stride_b[ax] * plan.out[ax];
            }
        }
    }

    if (wants_grad({&a, b})) {
        out.set_requires_grad(true);
        note(a);
        note(*b);
        note(out);
        Tensor ac = a, bc = *b, oc = out;
        auto offs_a = std::make_shared<std::vector<std::int64_t>>(std::move(off_a));
        auto offs_b = std::make_shared<std::vector<std::int64_t>>(std::move(off_b));
        const bool same = plan.same_shape;
        push([kind, ac, bc, oc, offs_a, offs_b, same]() {
            const auto& g = oc.node()->grad;
            const auto& xa = ac.node()->value;
            const auto& xb = bc.node()->value;
            const bool ga = ac.node()->requires_grad;
            const bool gb = bc.node()->requires_grad;
            auto contribute = [&](std::size_t i, std::int64_t ia, std::int64_t ib) {
                const double gi = g[i];
                switch (kind) {
                    case EwKind::Add:
                        if (ga) ac.node()->grad[static_cast<std::size_t>(ia)] += gi;
                        if (gb) bc.node()->grad[static_cast<std::size_t>(ib)] += gi;
                        break;
                    case EwKind::Sub:
                        if (ga) ac.node()->grad[static_cast<std::size_t>(ia)] += gi;
                        if (gb) bc.node()->grad[static_cast<std::size_t>(ib)] -= gi;
                        break;
                    case EwKind::Mul:
                        if (ga) ac.node()->grad[static_cast<std::size_t>(ia)] += gi * xb[static_cast<std::size_t>(ib)];
                        if (gb) bc.node()->grad[static_cast<std::size_t>(ib)] += gi * xa[static_cast<std::size_t>(ia)];
                        break;
                    default: {
                        const double bv = xb[static_cast<std::size_t>(ib)];
                        if (ga) ac.node()->grad[static_cast<std::size_t>(ia)] += gi / bv;
                        if (gb)
                            bc.node()->grad[static_cast<std::size_t>(ib)] -=
                                gi * xa[static_cast<std::size_t>(ia)] / (bv * bv);
                        break;
                    }
                }
            };
            if (same) {
                for (std::size_t i = 0; i < g.size(); ++i) contribute(i, static_cast<std::int64_t>(i), static_cast<std::int64_t>(i));
            } else {
                for (std::size_t i = 0; i < g.size(); ++i) contribute(i, (*offs_a)[i], (*offs_b)[i]);
            }
        });
    }
    return out;
}

Tensor Tape::add_bias(const Tensor& a, const Tensor& bias) {
    if (bias.rank() != 1) throw ShapeError("add_bias expects a rank-1 bias, got " + shape_str(bias.dims()));
    const int d = bias.dim(0);
    std::int64_t rows, inner;
    if (a.rank() == 2 && a.dim(1) == d) {
        rows = a.dim(0);
        inner = 1;
    } else if (a.rank() == 3 && a.dim(0) == d) {
        rows = 1;
        inner = static_cast<std::int64_t>(a.dim(1)) * a.dim(2);
    } else {
        throw ShapeError("add_bias shape mismatch: " + shape_str(a.dims()) + " with bias " + shape_str(bias.dims()));
    }
    Tensor out = Tensor::zeros(a.dims());
    const double* x = a.data().data();
    const double* bv = bias.data().data();
    double* y = out.data().data();
    if (inner == 1) {
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* xr = x + r * d;
            double* yr = y + r * d;
            for (int j = 0; j < d; ++j) yr[j] = xr[j] + bv[j];
        }
    } else {
        for (int c = 0; c < d; ++c) {
            const double add = bv[c];
            const double* xc = x + c * inner;
            double* yc = y + c * inner;
            for (std::int64_t i = 0; i < inner; ++i) yc[i] = xc[i] + add;
        }
    }
    if (wants_grad({&a, &bias})) {
        out.set_requires_grad(true);
        note(a);
        note(bias);
        note(out);
        Tensor ac = a, bc = bias, oc = out;
        const bool row_mode = inner == 1;
        push([ac, bc, oc, rows, inner, d, row_mode]() {
            const auto& g = oc.node()->grad;
            if (ac.node()->requires_grad) {
                auto& gx = ac.node()->grad;
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (bc.node()->requires_grad) {
                auto& gb = bc.node()->grad;
                if (row_mode) {
                    for (std::int64_t r = 0; r < rows; ++r)
                        for (int j = 0; j < d; ++j) gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(r * d + j)];
                } else {
                    for (int c = 0; c < d; ++c) {
                        double s = 0.0;
                        for (std::int64_t i = 0; i < inner; ++i) s += g[static_cast<std::size_t>(c * inner + i)];
                        gb[static_cast<std::size_t>(c)] += s;
                    }
                }
            }
        });
    }
    return out;
}

Tensor Tape::add_scalar(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.dims());
    const auto& x = a.data();
    auto& y = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + c;
    if (wants_grad({&a})) {
        out.set_requires_grad(true);
        note(a);
        note(out);
        Tensor ac = a, oc = out;
        push([ac, oc]() {
            const auto& g = oc.node()->grad;
            auto& gx = ac.node()->grad;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

Tensor Tape::mul_scalar(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.dims());
    const auto& x = a.data();
    auto& y = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * c;
    if (wants_grad({&a})) {
        out.set_requires_grad(true);
        note(a);
        note(out);
        Tensor ac = a, oc = out;
        push([ac, oc, c]() {
            const auto& g = oc.node()->grad;
            auto& gx = ac.node()->grad;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
        });
    }
    return out;
}

Tensor Tape::maximum_scalar(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.dims());
    const auto& x = a.data();
    auto& y = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > c ? x[i] : c;
    if (wants_grad({&a})) {
        out.set_requires_grad(true);
        note(a);
        note(out);
        Tensor ac = a, oc = out;
        push([ac, oc, c]() {
            const auto& g = oc.node()->grad;
            const auto& x = ac.node()->value;
            auto& gx = ac.node()->grad;
            for (std::size_t i = 0; i < g.size(); ++i)
                if (x[i] > c) gx[i] += g[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// GEMM
// ---------------------------------------------------------------------------

// Both kernels process four accumulator rows per pass so each row of the
// streamed matrix is loaded once per four outputs instead of once per output.
void gemm_accum(const double* a, const double* b, double* c, int m, int k, int n) {
    int i = 0;
    for (; i + 4 <= m; i += 4) {
        const double* a0 = a + static_cast<std::size_t>(i) * k;
        const double* a1 = a0 + k;
        const double* a2 = a1 + k;
        const double* a3 = a2 + k;
        double* c0 = c + static_cast<std::size_t>(i) * n;
        double* c1 = c0 + n;
        double* c2 = c1 + n;
        double* c3 = c2 + n;
        for (int p = 0; p < k; ++p) {
            const double* bp = b + static_cast<std::size_t>(p) * n;
            const double v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
            for (int j = 0; j < n; ++j) {
                const double bv = bp[j];
                c0[j] += v0 * bv;
                c1[j] += v1 * bv;
                c2[j] += v2 * bv;
                c3[j] += v3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

void gemm_at_b(const double* a, const double* b, double* c, int m, int k, int n) {
    int i = 0;
    for (; i + 4 <= m; i += 4) {
        const double* a0 = a + static_cast<std::size_t>(i) * k;
        const double* a1 = a0 + k;
        const double* a2 = a1 + k;
        const double* a3 = a2 + k;
        const double* b0 = b + static_cast<std::size_t>(i) * n;
        const double* b1 = b0 + n;
        const double* b2 = b1 + n;
        const double* b3 = b2 + n;
        for (int p = 0; p < k; ++p) {
            double* cp = c + static_cast<std::size_t>(p) * n;
            const double v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
            for (int j = 0; j < n; ++j) cp[j] += v0 * b0[j] + v1 * b1[j] + v2 * b2[j] + v3 * b3[j];
        }
    }
    for (; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        const double* bi = b + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul requires rank-2 tensors, got " + shape_str(a.dims()) + " and " + shape_str(b.dims()));
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
    Tensor out = Tensor::zeros({m, n});
    gemm_accum(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    if (wants_grad({&a, &b})) {
        out.set_requires_grad(true);
        note(a);
        note(b);
        note(out);
        Tensor ac = a, bc = b, oc = out;
        push([ac, bc, oc, m, k, n]() {
            const double* g = oc.node()->grad.data();
            if (ac.node()->requires_grad) {
                // dA += G * B^T, via a transposed copy of B for contiguous access
                std::vector<double> bt(static_cast<std::size_t>(n) * k);
                const double* pb = bc.node()->value.data();
                for (int p = 0; p < k; ++p)
                    for (int j = 0; j < n; ++j)
                        bt[static_cast<std::size_t>(j) * k + p] = pb[static_cast<std::size_t>(p) * n + j];
                gemm_accum(g, bt.data(), ac.node()->grad.data(), m, n, k);
            }
            if (bc.node()->requires_grad) {
                gemm_at_b(ac.node()->value.data(), g, bc.node()->grad.data(), m, k, n);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// convolution, computed directly so activation planes stay cache resident
// (an im2col buffer per op would be DRAM-bandwidth bound at these sizes)
// ---------------------------------------------------------------------------

namespace {

struct ConvGeom {
    int ci, h, w, co, kh, kw, stride, pad, oh, ow;
};

ConvGeom conv_geom(const Tensor& input, const Tensor& kernel, int stride, int padding) {
    if (input.rank() != 3 || kernel.rank() != 4)
        throw ShapeError("conv2d expects input [c,h,w] and kernel [co,ci,kh,kw], got " + shape_str(input.dims()) +
                         " and " + shape_str(kernel.dims()));
    ConvGeom g;
    g.ci = input.dim(0);
    g.h = input.dim(1);
    g.w = input.dim(2);
    g.co = kernel.dim(0);
    g.kh = kernel.dim(2);
    g.kw = kernel.dim(3);
    g.stride = stride;
    g.pad = padding;
    if (kernel.dim(1) != g.ci)
        throw ShapeError("conv2d channel mismatch: input " + shape_str(input.dims()) + " kernel " +
                         shape_str(kernel.dims()));
    if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
    if (stride == 1 && (g.kh % 2 == 0 || g.kw % 2 == 0))
        throw ShapeError("conv2d kernel dims must be odd when stride is 1");
    if (g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding)
        throw ShapeError("conv2d kernel " + shape_str(kernel.dims()) + " larger than padded input " +
                         shape_str(input.dims()));
    g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
    g.ow = (g.w + 2 * padding - g.kw) / stride + 1;
    return g;
}

// valid output-index range so that ox*stride + kx - pad lands inside [0, extent)
inline void valid_range(int k_off, int pad, int stride, int extent, int out_extent, int& lo, int& hi) {
    int lo_num = pad - k_off;
    lo = lo_num <= 0 ? 0 : (lo_num + stride - 1) / stride;
    int hi_num = extent - 1 - k_off + pad;
    hi = hi_num < 0 ? -1 : hi_num / stride;
    if (hi >= out_extent) hi = out_extent - 1;
}

// out[a, oy, ox] += sum_{b,ky,kx} k[a,b,ky,kx] * in[b, oy*s+ky-p, ox*s+kx-p]
void conv_gather(double* out, const double* in, const double* kern, const ConvGeom& g, int A, int B) {
    const std::size_t out_plane = static_cast<std::size_t>(g.oh) * g.ow;
    const std::size_t in_plane = static_cast<std::size_t>(g.h) * g.w;
    for (int a0 = 0; a0 < A; a0 += 4) {
        const int ab = std::min(4, A - a0);
        for (int b = 0; b < B; ++b) {
            const double* xp = in + static_cast<std::size_t>(b) * in_plane;
            for (int ai = 0; ai < ab; ++ai) {
                const int a = a0 + ai;
                double* op = out + static_cast<std::size_t>(a) * out_plane;
                const double* kp = kern + (static_cast<std::size_t>(a) * B + b) * g.kh * g.kw;
                for (int ky = 0; ky < g.kh; ++ky) {
                    for (int kx = 0; kx < g.kw; ++kx) {
                        const double kv = kp[ky * g.kw + kx];
                        if (kv == 0.0) continue;
                        int xlo, xhi;
                        valid_range(kx, g.pad, g.stride, g.w, g.ow, xlo, xhi);
                        for (int oy = 0; oy < g.oh; ++oy) {
                            const int iy = oy * g.stride + ky - g.pad;
                            if (iy < 0 || iy >= g.h) continue;
                            const double* xrow = xp + static_cast<std::size_t>(iy) * g.w + kx - g.pad;
                            double* orow = op + static_cast<std::size_t>(oy) * g.ow;
                            if (g.stride == 1) {
                                for (int ox = xlo; ox <= xhi; ++ox) orow[ox] += kv * xrow[ox];
                            } else {
                                for (int ox = xlo; ox <= xhi; ++ox) orow[ox] += kv * xrow[static_cast<std::size_t>(ox) * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

// out[b, oy*s+ky-p, ox*s+kx-p] += sum_{a,ky,kx} k[a,b,ky,kx] * in[a, oy, ox]
void conv_scatter(double* out, const double* in, const double* kern, const ConvGeom& g, int A, int B) {
    const std::size_t small_plane = static_cast<std::size_t>(g.oh) * g.ow;
    const std::size_t big_plane = static_cast<std::size_t>(g.h) * g.w;
    for (int b0 = 0; b0 < B; b0 += 4) {
        const int bb = std::min(4, B - b0);
        for (int a = 0; a < A; ++a) {
            const double* ip = in + static_cast<std::size_t>(a) * small_plane;
            for (int bi = 0; bi < bb; ++bi) {
                const int b = b0 + bi;
                double* op = out + static_cast<std::size_t>(b) * big_plane;
                const double* kp = kern + (static_cast<std::size_t>(a) * B + b) * g.kh * g.kw;
                for (int ky = 0; ky < g.kh; ++ky) {
                    for (int kx = 0; kx < g.kw; ++kx) {
                        const double kv = kp[ky * g.kw + kx];
                        if (kv == 0.0) continue;
                        int xlo, xhi;
                        valid_range(kx, g.pad, g.stride, g.w, g.ow, xlo, xhi);
                        for (int oy = 0; oy < g.oh; ++oy) {
                            const int iy = oy * g.stride + ky - g.pad;
                            if (iy < 0 || iy >= g.h) continue;
                            double* xrow = op + static_cast<std::size_t>(iy) * g.w + kx - g.pad;
                            const double* irow = ip + static_cast<std::size_t>(oy) * g.ow;
                            if (g.stride == 1) {
                                for (int ox = xlo; ox <= xhi; ++ox) xrow[ox] += kv * irow[ox];
                            } else {
                                for (int ox = xlo; ox <= xhi; ++ox) xrow[static_cast<std::size_t>(ox) * g.stride] += kv * irow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

// dk[a,b,ky,kx] += sum_{oy,ox} gout[a,oy,ox] * x[b, oy*s+ky-p, ox*s+kx-p]
void conv_corr(double* dk, const double* gout, const double* x, const ConvGeom& g, int A, int B) {
    const std::size_t out_plane = static_cast<std::size_t>(g.oh) * g.ow;
    const std::size_t in_plane = static_cast<std::size_t>(g.h) * g.w;
    for (int a = 0; a < A; ++a) {
        const double* gp = gout + static_cast<std::size_t>(a) * out_plane;
        for (int b = 0; b < B; ++b) {
            const double* xp = x + static_cast<std::size_t>(b) * in_plane;
            double* kp = dk + (static_cast<std::size_t>(a) * B + b) * g.kh * g.kw;
            for (int ky = 0; ky < g.kh; ++ky) {
                for (int kx = 0; kx < g.kw; ++kx) {
                    int xlo, xhi;
                    valid_range(kx, g.pad, g.stride, g.w, g.ow, xlo, xhi);
                    double acc = 0.0;
                    for (int oy = 0; oy < g.oh; ++oy) {
                        const int iy = oy * g.stride + ky - g.pad;
                        if (iy < 0 || iy >= g.h) continue;
                        const double* xrow = xp + static_cast<std::size_t>(iy) * g.w + kx - g.pad;
                        const double* grow = gp + static_cast<std::size_t>(oy) * g.ow;
                        double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
                        int ox = xlo;
                        if (g.stride == 1) {
                            for (; ox + 3 <= xhi; ox += 4) {
                                s0 += grow[ox] * xrow[ox];
                                s1 += grow[ox + 1] * xrow[ox + 1];
                                s2 += grow[ox + 2] * xrow[ox + 2];
                                s3 += grow[ox + 3] * xrow[ox + 3];
                            }
                            for (; ox <= xhi; ++ox) s0 += grow[ox] * xrow[ox];
                        } else {
                            for (; ox <= xhi; ++ox) s0 += grow[ox] * xrow[static_cast<std::size_t>(ox) * g.stride];
                        }
                        acc += (s0 + s1) + (s2 + s3);
                    }
                    kp[ky * g.kw + kx] += acc;
                }
            }
        }
    }
}

} // namespace

Tensor Tape::conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
    const ConvGeom g = conv_geom(input, kernel, stride, padding);
    Tensor out = Tensor::zeros({g.co, g.oh, g.ow});
    conv_gather(out.data().data(), input.data().data(), kernel.data().data(), g, g.co, g.ci);
    if (wants_grad({&input, &kernel})) {
        out.set_requires_grad(true);
        note(input);
        note(kernel);
        note(out);
        Tensor ic = input, kc = kernel, oc = out;
        push([ic, kc, oc, g]() {
            const double* grad_out = oc.node()->grad.data();
            if (kc.node()->requires_grad)
                conv_corr(kc.node()->grad.data(), grad_out, ic.node()->value.data(), g, g.co, g.ci);
            if (ic.node()->requires_grad)
                conv_scatter(ic.node()->grad.data(), grad_out, kc.node()->value.data(), g, g.co, g.ci);
        });
    }
    return out;
}

Tensor Tape::conv_transpose2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
    if (input.rank() != 3 || kernel.rank() != 4)
        throw ShapeError("conv_transpose2d expects input [co,h,w] and kernel [co,ci,kh,kw], got " +
                         shape_str(input.dims()) + " and " + shape_str(kernel.dims()));
    const int co = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (kernel.dim(0) != co)
        throw ShapeError("conv_transpose2d channel mismatch: input " + shape_str(input.dims()) + " kernel " +
                         shape_str(kernel.dims()));
    const int ci = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    const int H = (h - 1) * stride + kh - 2 * padding;
    const int W = (w - 1) * stride + kw - 2 * padding;
    if (H <= 0 || W <= 0) throw ShapeError("conv_transpose2d output would be empty");

    ConvGeom g; // geometry of the forward conv this op is the adjoint of
    g.ci = ci;
    g.h = H;
    g.w = W;
    g.co = co;
    g.kh = kh;
    g.kw = kw;
    g.stride = stride;
    g.pad = padding;
    g.oh = h;
    g.ow = w;

    Tensor out = Tensor::zeros({ci, H, W});
    conv_scatter(out.data().data(), input.data().data(), kernel.data().data(), g, co, ci);

    if (wants_grad({&input, &kernel})) {
        out.set_requires_grad(true);
        note(input);
        note(kernel);
        note(out);
        Tensor ic = input, kc = kernel, oc = out;
        push([ic, kc, oc, g]() {
            const double* grad_out = oc.node()->grad.data();
            if (ic.node()->requires_grad)
                conv_gather(ic.node()->grad.data(), grad_out, kc.node()->value.data(), g, g.co, g.ci);
            if (kc.node()->requires_grad)
                conv_corr(kc.node()->grad.data(), ic.node()->value.data(), grad_out, g, g.co, g.ci);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// pooling / resampling
// ---------------------------------------------------------------------------

Tensor Tape::pool2d(const Tensor& input, PoolKind kind, int window) {
    if (input.rank() != 3) throw ShapeError("pool2d expects [c,h,w], got " + shape_str(input.dims()));
    if (window < 1) throw ShapeError("pool window must be positive");
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int oh = (h + window - 1) / window, ow = (w + window - 1) / window;
    Tensor out = Tensor::zeros({c, oh, ow});
    // argmax index per output cell (max pool) or member count (mean pool)
    auto aux = std::make_shared<std::vector<std::int32_t>>(out.data().size());
    const double* x = input.data().data();
    double* y = out.data().data();
    for (int ch = 0; ch < c; ++ch) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const std::size_t oidx = (static_cast<std::size_t>(ch) * oh + oy) * ow + ox;
                if (kind == PoolKind::Max) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::int32_t best_idx = -1;
                    for (int dy = 0; dy < window; ++dy) {
                        const int iy = oy * window + dy;
                        if (iy >= h) break;
                        for (int dx = 0; dx < window; ++dx) {
                            const int ix = ox * window + dx;
                            if (ix >= w) break;
                            const std::size_t ii = (static_cast<std::size_t>(ch) * h + iy) * w + ix;
                            if (x[ii] > best) {
                                best = x[ii];
                                best_idx = static_cast<std::int32_t>(ii);
                            }
                        }
                    }
                    y[oidx] = best;
                    (*aux)[oidx] = best_idx;
                } else {
                    double s = 0.0;
                    std::int32_t cnt = 0;
                    for (int dy = 0; dy < window; ++dy) {
                        const int iy = oy * window + dy;
                        if (iy >= h) break;
                        for (int dx = 0; dx < window; ++dx) {
                            const int ix = ox * window + dx;
                            if (ix >= w) break;
                            s += x[(static_cast<std::size_t>(ch) * h + iy) * w + ix];
                            ++cnt;
                        }
                    }
                    y[oidx] = s / cnt;
                    (*aux)[oidx] = cnt;
                }
            }
        }
    }
    if (wants_grad({&input})) {
        out.set_requires_grad(true);
        note(input);
        note(out);
        Tensor ic = input, oc = out;
        push([ic, oc, aux, kind, window, c, h, w, oh, ow]() {
            const auto& g = oc.node()->grad;
            auto& gx = ic.node()->grad;
            if (kind == PoolKind::Max) {
                for (std::size_t i = 0; i < g.size(); ++i)
                    if ((*aux)[i] >= 0) gx[static_cast<std::size_t>((*aux)[i])] += g[i];
            } else {
                for (int ch = 0; ch < c; ++ch)
                    for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox) {
                            const std::size_t oidx = (static_cast<std::size_t>(ch) * oh + oy) * ow + ox;
                            const double share = g[oidx] / (*aux)[oidx];
                            for (int dy = 0; dy < window; ++dy) {
                                const int iy = oy * window + dy;
                                if (iy >= h) break;
                                for (int dx = 0; dx < window; ++dx) {
                                    const int ix = ox * window + dx;
                                    if (ix >= w) break;
                                    gx[(static_cast<std::size_t>(ch) * h + iy) * w + ix] += share;
                                }
                            }
                        }
            }
        });
    }
    return out;
}

Tensor Tape::global_mean_pool(const Tensor& input) {
    if (input.rank() != 3) throw ShapeError("global_mean_pool expects [c,h,w], got " + shape_str(input.dims()));
    const int c = input.dim(0);
    const std::int64_t hw = static_cast<std::int64_t>(input.dim(1)) * input.dim(2);
    Tensor out = Tensor::zeros({c});
    const double* x = input.data().data();
    for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::int64_t i = 0; i < hw; ++i) s += x[ch * hw + i];
        out.data()[static_cast<std::size_t>(ch)] = s / static_cast<double>(hw);
    }
    if (wants_grad({&input})) {
        out.set_requires_grad(true);
        note(input);
        note(out);
        Tensor ic = input, oc = out;
        push([ic, oc, c, hw]() {
            const auto& g = oc.node()->grad;
            auto& gx = ic.node()->grad;
            for (int ch = 0; ch < c; ++ch) {
                const double share = g[static_cast<std::size_t>(ch)] / static_cast<double>(hw);
                for (std::int64_t i = 0; i < hw; ++i) gx[static_cast<std::size_t>(ch * hw + i)] += share;
            }
        });
    }
    return out;
}

Tensor Tape::upsample_nearest2x(const Tensor& input) {
    if (input.rank() != 3) throw ShapeError("upsample_nearest2x expects [c,h,w], got " + shape_str(input.dims()));
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    Tensor out = Tensor::zeros({c, 2 * h, 2 * w});
    const double* x = input.data().data();
    double* y = out.data().data();
    for (int ch = 0; ch < c; ++ch)
        for (int iy = 0; iy < h; ++iy)
            for (int ix = 0; ix < w; ++ix) {
                const double v = x[(static_cast<std::size_t>(ch) * h + iy) * w + ix];
                const std::size_t base = (static_cast<std::size_t>(ch) * 2 * h + 2 * iy) * 2 * w + 2 * ix;
                y[base] = v;
                y[base + 1] = v;
                y[base + 2 * w] = v;
                y[base + 2 * w + 1] = v;
            }
    if (wants_grad({&input})) {
        out.set_requires_grad(true);
        note(input);
        note(out);
        Tensor ic = input, oc = out;
        push([ic, oc, c, h, w]() {
            const auto& g = oc.node()->grad;
            auto& gx = ic.node()->grad;
            for (int ch = 0; ch < c; ++ch)
                for (int iy = 0; iy < h; ++iy)
                    for (int ix = 0; ix < w; ++ix) {
                        const std::size_t base = (static_cast<std::size_t>(ch) * 2 * h + 2 * iy) * 2 * w + 2 * ix;
                        gx[(static_cast<std::size_t>(ch) * h + iy) * w + ix] +=
                            g[base] + g[base + 1] + g[base + 2 * w] + g[base + 2 * w + 1];
                    }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

namespace {

struct AxisPlan {
    std::int64_t outer, lane, inner;
};

AxisPlan axis_plan(const Shape& dims, int axis) {
    if (axis < 0 || axis >= static_cast<int>(dims.size()))
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(dims));
    AxisPlan p{1, dims[static_cast<std::size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) p.outer *= dims[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < dims.size(); ++i) p.inner *= dims[i];
    return p;
}

} // namespace

Tensor Tape::softmax(const Tensor& input, int axis) {
    const AxisPlan p = axis_plan(input.dims(), axis);
    Tensor out = Tensor::zeros(input.dims());
    const double* x = input.data().data();
    double* y = out.data().data();
    for (std::int64_t o = 0; o < p.outer; ++o)
        for (std::int64_t in = 0; in < p.inner; ++in) {
            const std::int64_t base = o * p.lane * p.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t l = 0; l < p.lane; ++l) mx = std::max(mx, x[base + l * p.inner]);
            double denom = 0.0;
            for (std::int64_t l = 0; l < p.lane; ++l) {
                const double e = std::exp(x[base + l * p.inner] - mx);
                y[base + l * p.inner] = e;
                denom += e;
            }
            for (std::int64_t l = 0; l < p.lane; ++l) y[base + l * p.inner] /= denom;
        }
    if (wants_grad({&input})) {
        out.set_requires_grad(true);
        note(input);
        note(out);
        Tensor ic = input, oc = out;
        push([ic, oc, p]() {
            const auto& g = oc.node()->grad;
            const auto& y = oc.node()->value;
            auto& gx = ic.node()->grad;
            for (std::int64_t o = 0; o < p.outer; ++o)
                for (std::int64_t in = 0; in < p.inner; ++in) {
                    const std::int64_t base = o * p.lane * p.inner + in;
                    double dot = 0.0;
                    for (std::int64_t l = 0; l < p.lane; ++l) {
                        const std::int64_t i = base + l * p.inner;
                        dot += g[static_cast<std::size_t>(i)] * y[static_cast<std::size_t>(i)];
                    }
                    for (std::int64_t l = 0; l < p.lane; ++l) {
                        const std::int64_t i = base + l * p.inner;
                        gx[static_cast<std::size_t>(i)] +=
                            y[static_cast<std::size_t>(i)] * (g[static_cast<std::size_t>(i)] - dot);
                    }
                }
        });
    }
    return out;
}

Tensor Tape::log_softmax(const Tensor& input, int axis) {
    const AxisPlan p = axis_plan(input.dims(), axis);
    Tensor out = Tensor::zeros(input.dims());
    const double* x = input.data().data();
    double* y = out.data().data();
    for (std::int64_t o = 0; o < p.outer; ++o)
        for (std::int64_t in = 0; in < p.inner; ++in) {
            const std::int64_t base = o * p.lane * p.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t l = 0; l < p.lane; ++l) mx = std::max(mx, x[base + l * p.inner]);
            double denom = 0.0;
            for (std::int64_t l = 0; l < p.lane; ++l) denom += std::exp(x[base + l * p.inner] - mx);
            const double lse = mx + std::log(denom);
            for (std::int64_t l = 0; l < p.lane; ++l) y[base + l * p.inner] = x[base + l * p.inner] - lse;
        }
    if (wants_grad({&input})) {
        out.set_requires_grad(true);
        note(input);
        note(out);
        Tensor ic = input, oc = out;
        push([ic, oc, p]() {
            const auto& g = oc.node()->grad;
            const auto& y = oc.node()->value;
            auto& gx = ic.node()->grad;
            for (std::int64_t o = 0; o < p.outer; ++o)
                for (std::int64_t in = 0; in < p.inner; ++in) {
                    const std::int64_t base = o * p.lane * p.inner + in;
                    double gsum = 0.0;
                    for (std::int64_t l = 0; l < p.lane; ++l) gsum += g[static_cast<std::size_t>(base + l * p.inner)];
                    for (std::int64_t l = 0; l < p.lane; ++l) {
                        const std::int64_t i = base + l * p.inner;
                        gx[static_cast<std::size_t>(i)] +=
                            g[static_cast<std::size_t>(i)] - std::exp(y[static_cast<std::size_t>(i)]) * gsum;
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

Tensor Tape::concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const Shape& d0 = parts[0].dims();
    if (axis < 0 || axis >= static_cast<int>(d0.size()))
        throw ShapeError("concat axis out of range for " + shape_str(d0));
    Shape out_dims = d0;
    int total = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != static_cast<int>(d0.size())) throw ShapeError("concat rank mismatch");
        for (int i = 0; i < t.rank(); ++i)
            if (i != axis && t.dim(i) != d0[static_cast<std::size_t>(i)])
                throw ShapeError("concat dim mismatch: " + shape_str(t.dims()) + " vs " + shape_str(d0));
        total += t.dim(axis);
    }
    out_dims[static_cast<std::size_t>(axis)] = total;
    Tensor out = Tensor::zeros(out_dims);
    const AxisPlan p = axis_plan(out_dims, axis);
    double* y = out.data().data();
    std::int64_t lane_off = 0;
    for (const Tensor& t : parts) {
        const std::int64_t lane = t.dim(axis);
        const double* x = t.data().data();
        for (std::int64_t o = 0; o < p.outer; ++o)
            std::memcpy(y + (o * p.lane + lane_off) * p.inner, x + o * lane * p.inner,
                        static_cast<std::size_t>(lane * p.inner) * sizeof(double));
        lane_off += lane;
    }
    bool any = false;
    for (const Tensor& t : parts)
        if (grad_enabled && t.requires_grad()) any = true;
    if (any) {
        out.set_requires_grad(true);
        for (const Tensor& t : parts) note(t);
        note(out);
        std::vector<Tensor> pc = parts;
        std::vector<std::int64_t> lanes;
        for (const Tensor& t : parts) lanes.push_back(t.dim(axis));
        Tensor oc = out;
        push([pc, oc, p, lanes]() {
            const auto& g = oc.node()->grad;
            std::int64_t lane_off = 0;
            for (std::size_t k = 0; k < pc.size(); ++k) {
                const std::int64_t lane = lanes[k];
                if (pc[k].node()->requires_grad) {
                    auto& gx = pc[k].node()->grad;
                    for (std::int64_t o = 0; o < p.outer; ++o)
                        for (std::int64_t i = 0; i < lane * p.inner; ++i)
                            gx[static_cast<std::size_t>(o * lane * p.inner + i)] +=
                                g[static_cast<std::size_t>((o * p.lane + lane_off) * p.inner + i)];
                }
                lane_off += lane;
            }
        });
    }
    return out;
}

Tensor Tape::slice(const Tensor& input, int axis, int start, int len) {
    const Shape& d = input.dims();
    if (axis < 0 || axis >= static_cast<int>(d.size())) throw ShapeError("slice axis out of range");
    if (start < 0 || len <= 0 || start + len > d[static_cast<std::size_t>(axis)])
        throw ShapeError("slice range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of bounds for " + shape_str(d));
    Shape out_dims = d;
    out_dims[static_cast<std::size_t>(axis)] = len;
    Tensor out = Tensor::zeros(out_dims);
    const AxisPlan p = axis_plan(d, axis);
    const double* x = input.data().data();
    double* y = out.data().data();
    for (std::int64_t o = 0; o < p.outer; ++o)
        std::memcpy(y + o * len * p.inner, x + (o * p.lane + start) * p.inner,
                    static_cast<std::size_t>(len * p.inner) * sizeof(double));
    if (wants_grad({&input})) {
        out.set_requires_grad(true);
        note(input);
        note(out);
        Tensor ic = input, oc = out;
        push([ic, oc, p, start, len]() {
            const auto& g = oc.node()->grad;
            auto& gx = ic.node()->grad;
            for (std::int64_t o = 0; o < p.outer; ++o)
                for (std::int64_t i = 0; i < len * p.inner; ++i)
                    gx[static_cast<std::size_t>((o * p.lane + start) * p.inner + i)] +=
                        g[static_cast<std::size_t>(o * len * p.inner + i)];
        });
    }
    return out;
}

Tensor Tape::reshape(const Tensor& input, Shape dims) {
    if (shape_numel(dims) != input.size())
        throw ShapeError("reshape " + shape_str(input.dims()) + " -> " + shape_str(dims) + " changes element count");
    Tensor out = Tensor::from(std::move(dims), input.data());
    if (wants_grad({&input})) {
        out.set_requires_grad(true);
        note(input);
        note(out);
        Tensor ic = input, oc = out;
        push([ic, oc]() {
            const auto& g = oc.node()->grad;
            auto& gx = ic.node()->grad;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

Tensor Tape::sum_all(const Tensor& input) {
    double s = 0.0;
    for (double v : input.data()) s += v;
    Tensor out = Tensor::scalar(s);
    if (wants_grad({&input})) {
        out.set_requires_grad(true);
        note(input);
        note(out);
        Tensor ic = input, oc = out;
        push([ic, oc]() {
            const double g = oc.node()->grad[0];
            auto& gx = ic.node()->grad;
            for (auto& v : gx) v += g;
        });
    }
    return out;
}

Tensor Tape::mean_all(const Tensor& input) {
    return mul_scalar(sum_all(input), 1.0 / static_cast<double>(input.size()));
}

Tensor Tape::gather_rows(const Tensor& input, const std::vector<int>& idx) {
    if (input.rank() < 2) throw ShapeError("gather_rows expects rank >= 2, got " + shape_str(input.dims()));
    const int n = input.dim(0);
    const std::int64_t row = input.size() / n;
    Shape out_dims = input.dims();
    out_dims[0] = static_cast<int>(idx.size());
    Tensor out = Tensor::zeros(out_dims);
    const double* x = input.data().data();
    double* y = out.data().data();
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0 || idx[r] >= n) throw ShapeError("gather_rows index out of range");
        std::memcpy(y + r * row, x + static_cast<std::size_t>(idx[r]) * row,
                    static_cast<std::size_t>(row) * sizeof(double));
    }
    if (wants_grad({&input})) {
        out.set_requires_grad(true);
        note(input);
        note(out);
        Tensor ic = input, oc = out;
        auto ix = std::make_shared<std::vector<int>>(idx);
        push([ic, oc, ix, row]() {
            const auto& g = oc.node()->grad;
            auto& gx = ic.node()->grad;
            for (std::size_t r = 0; r < ix->size(); ++r)
                for (std::int64_t j = 0; j < row; ++j)
                    gx[static_cast<std::size_t>((*ix)[r]) * row + j] += g[r * row + j];
        });
    }
    return out;
}

Tensor Tape::segment_mean(const Tensor& messages, const std::vector<int>& receiver, int n_segments) {
    if (messages.rank() != 2) throw ShapeError("segment_mean expects [E,d], got " + shape_str(messages.dims()));
    const int e = messages.dim(0), d = messages.dim(1);
    if (static_cast<int>(receiver.size()) != e) throw ShapeError("segment_mean receiver list length mismatch");
    std::vector<std::vector<int>> members(static_cast<std::size_t>(n_segments));
    for (int i = 0; i < e; ++i) {
        if (receiver[static_cast<std::size_t>(i)] < 0 || receiver[static_cast<std::size_t>(i)] >= n_segments)
            throw ShapeError("segment_mean receiver index out of range");
        members[static_cast<std::size_t>(receiver[static_cast<std::size_t>(i)])].push_back(i);
    }
    Tensor out = Tensor::zeros({n_segments, d});
    const double* x = messages.data().data();
    double* y = out.data().data();
    std::vector<double> vals;
    for (int s = 0; s < n_segments; ++s) {
        const auto& m = members[static_cast<std::size_t>(s)];
        if (m.empty()) continue;
        for (int j = 0; j < d; ++j) {
            vals.clear();
            for (int ei : m) vals.push_back(x[static_cast<std::size_t>(ei) * d + j]);
            y[static_cast<std::size_t>(s) * d + j] = sorted_sum(vals) / static_cast<double>(m.size());
        }
    }
    if (wants_grad({&messages})) {
        out.set_requires_grad(true);
        note(messages);
        note(out);
        Tensor mc = messages, oc = out;
        auto rcv = std::make_shared<std::vector<int>>(receiver);
        std::vector<double> inv_count(static_cast<std::size_t>(n_segments), 0.0);
        for (int s = 0; s < n_segments; ++s)
            if (!members[static_cast<std::size_t>(s)].empty())
                inv_count[static_cast<std::size_t>(s)] = 1.0 / static_cast<double>(members[static_cast<std::size_t>(s)].size());
        auto invc = std::make_shared<std::vector<double>>(std::move(inv_count));
        push([mc, oc, rcv, invc, e, d]() {
            const auto& g = oc.node()->grad;
            auto& gx = mc.node()->grad;
            for (int i = 0; i < e; ++i) {
                const int s = (*rcv)[static_cast<std::size_t>(i)];
                const double ic = (*invc)[static_cast<std::size_t>(s)];
                for (int j = 0; j < d; ++j)
                    gx[static_cast<std::size_t>(i) * d + j] += g[static_cast<std::size_t>(s) * d + j] * ic;
            }
        });
    }
    return out;
}

Tensor Tape::mean_stack(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("mean_stack of zero tensors");
    const Shape& d = parts[0].dims();
    for (const Tensor& t : parts)
        if (t.dims() != d) throw ShapeError("mean_stack shape mismatch: " + shape_str(t.dims()) + " vs " + shape_str(d));
    Tensor out = Tensor::zeros(d);
    const std::size_t n = out.data().size();
    const double inv = 1.0 / static_cast<double>(parts.size());
    std::vector<double> vals(parts.size());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < parts.size(); ++k) vals[k] = parts[k].data()[i];
        out.data()[i] = sorted_sum(vals) * inv;
    }
    bool any = false;
    for (const Tensor& t : parts)
        if (grad_enabled && t.requires_grad()) any = true;
    if (any) {
        out.set_requires_grad(true);
        for (const Tensor& t : parts) note(t);
        note(out);
        std::vector<Tensor> pc = parts;
        Tensor oc = out;
        push([pc, oc, inv]() {
            const auto& g = oc.node()->grad;
            for (const Tensor& t : pc) {
                if (!t.node()->requires_grad) continue;
                auto& gx = t.node()->grad;
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * inv;
            }
        });
    }
    return out;
}

Tensor Tape::tile_spatial(const Tensor& vec, int h, int w) {
    if (vec.rank() != 1) throw ShapeError("tile_spatial expects [d], got " + shape_str(vec.dims()));
    const int d = vec.dim(0);
    Tensor out = Tensor::zeros({d, h, w});
    const double* x = vec.data().data();
    double* y = out.data().data();
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    for (int c = 0; c < d; ++c) std::fill(y + c * hw, y + (c + 1) * hw, x[c]);
    if (wants_grad({&vec})) {
        out.set_requires_grad(true);
        note(vec);
        note(out);
        Tensor vc = vec, oc = out;
        push([vc, oc, d, hw]() {
            const auto& g = oc.node()->grad;
            auto& gx = vc.node()->grad;
            for (int c = 0; c < d; ++c) {
                double s = 0.0;
                for (std::int64_t i = 0; i < hw; ++i) s += g[static_cast<std::size_t>(c * hw + i)];
                gx[static_cast<std::size_t>(c)] += s;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

FdReport finite_difference_check(ParamStore& params,
                                 const std::function<double()>& loss_with_grad,
                                 const std::function<double()>& loss_value,
                                 double step,
                                 int entries_per_block,
                                 std::uint64_t seed) {
    params.zero_grads();
    const double base = loss_with_grad();
    // snapshot analytic gradients before perturbing anything
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) analytic.push_back(params.tensor(i).grad());

    // cancellation in (up - dn) floors the resolvable gradient near
    // ulp(loss)/step; entries below that scale carry no signal at the target
    // tolerance and are compared against the floor instead
    const double grad_floor = std::max(1e-8, 2e-5 * std::abs(base));

    FdReport report;
    Rng rng(derive_seed(seed, {0xFDFDULL}));
    for (std::size_t bi = 0; bi < params.size(); ++bi) {
        Tensor t = params.tensor(bi);
        FdBlockReport block;
        block.name = params.name(bi);
        const int n = static_cast<int>(t.size());
        const int checks = std::min(entries_per_block, n);
        for (int c = 0; c < checks; ++c) {
            const int j = checks == n ? c : rng.uniform_int(n);
            double& pj = t.data()[static_cast<std::size_t>(j)];
            const double orig = pj;
            struct Diff {
                double central, fwd, bwd;
            };
            auto diffs = [&](double h) {
                pj = orig + h;
                const double up = loss_value();
                pj = orig - h;
                const double dn = loss_value();
                pj = orig;
                return Diff{(up - dn) / (2.0 * h), (up - base) / h, (base - dn) / h};
            };
            // Central differences are only meaningful where the loss is locally
            // smooth. A ReLU kink in (or exactly at) the window makes the
            // one-sided slopes disagree by an amount that does NOT shrink with
            // the step, unlike curvature, which shrinks linearly. Entries on
            // such kinks are skipped rather than misreported; a genuine
            // gradient bug shows consistent one-sided slopes that still
            // disagree with the analytic value, and is still caught.
            const double an = analytic[bi][static_cast<std::size_t>(j)];
            auto gap_of = [&](const Diff& d) {
                return std::abs(d.fwd - d.bwd) / std::max({std::abs(d.fwd), std::abs(d.bwd), grad_floor});
            };
            const Diff d1 = diffs(step);
            const Diff d2 = diffs(step / 8.0);
            const double step_gap =
                std::abs(d1.central - d2.central) / std::max({std::abs(d1.central), std::abs(d2.central), grad_floor});
            bool usable = true;
            double fd;
            if (gap_of(d1) < 1e-4 && step_gap < 1e-4) {
                fd = d1.central; // smooth window, slope stable under refinement
            } else if (gap_of(d2) < std::max(1e-3, 0.25 * gap_of(d1))) {
                fd = d2.central; // kink left the smaller window
            } else {
                // one-sided slopes disagree at every scale: the point itself
                // sits on a kink, central differences carry no information
                usable = false;
                fd = 0.0;
            }
            if (!usable) {
                ++block.entries_skipped;
                continue;
            }
            const double abs_err = std::abs(fd - an);
            const double rel = abs_err / std::max({std::abs(fd), std::abs(an), grad_floor});
            block.max_abs_err = std::max(block.max_abs_err, abs_err);
            block.max_rel_err = std::max(block.max_rel_err, rel);
            ++block.entries_checked;
        }
        report.worst_rel_err = std::max(report.worst_rel_err, block.max_rel_err);
        report.blocks.push_back(std::move(block));
    }
    return report;
}

} // namespace epns
