#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace epns {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& dims);
std::string shape_str(const Shape& dims);

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TensorNode {
    Shape dims;
    std::vector<double> value;
    std::vector<double> grad; // sized like value iff requires_grad
    bool requires_grad = false;
};

// Cheap shared handle to a dense row-major float64 array. Values are written
// once by the op that creates them; only grad buffers mutate afterwards.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape dims, bool requires_grad = false);
    static Tensor full(Shape dims, double v, bool requires_grad = false);
    static Tensor from(Shape dims, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v);

    bool defined() const { return node_ != nullptr; }
    const Shape& dims() const { return node_->dims; }
    int dim(int i) const { return node_->dims[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(node_->dims.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(node_->value.size()); }

    std::vector<double>& data() { return node_->value; }
    const std::vector<double>& data() const { return node_->value; }
    std::vector<double>& grad();
    const std::vector<double>& grad() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b);
    void zero_grad();

    double item() const;
    double at(std::initializer_list<int> idx) const;

    TensorNode* node() const { return node_.get(); }
    std::shared_ptr<TensorNode> shared_node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

enum class EwKind { Add, Sub, Mul, Div, Relu, Softplus, Exp, Log, Neg, Sqrt };
enum class PoolKind { Max, Mean };

// Records every operation that touches a grad-requiring tensor and replays the
// backward rules in reverse order. A tape is rebuilt for every forward pass
// and is confined to one worker thread together with its tensors.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled(grad_enabled) {}

    bool grad_enabled;

    // elementwise, trailing-dimension broadcast for binary kinds
    Tensor elementwise(EwKind kind, const Tensor& a, const Tensor* b = nullptr);
    Tensor add(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Add, a, &b); }
    Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Sub, a, &b); }
    Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Mul, a, &b); }
    Tensor div(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Div, a, &b); }
    Tensor relu(const Tensor& a) { return elementwise(EwKind::Relu, a); }
    Tensor softplus(const Tensor& a) { return elementwise(EwKind::Softplus, a); }
    Tensor exp(const Tensor& a) { return elementwise(EwKind::Exp, a); }
    Tensor log(const Tensor& a) { return elementwise(EwKind::Log, a); }
    Tensor neg(const Tensor& a) { return elementwise(EwKind::Neg, a); }
    Tensor sqrt(const Tensor& a) { return elementwise(EwKind::Sqrt, a); }

    // bias [d] added to the rows of [n,d] (rank 2) or to the channels of
    // [c,h,w] (rank 3); cheaper than the generic broadcast path
    Tensor add_bias(const Tensor& a, const Tensor& bias);

    Tensor add_scalar(const Tensor& a, double c);
    Tensor mul_scalar(const Tensor& a, double c);
    // max(a, c) elementwise; gradient flows only where a > c
    Tensor maximum_scalar(const Tensor& a, double c);

    Tensor matmul(const Tensor& a, const Tensor& b);

    Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);
    // Adjoint of conv2d with the same kernel layout [c_out, c_in, kh, kw]:
    // maps [c_out, h, w] back to [c_in, H, W].
    Tensor conv_transpose2d(const Tensor& input, const Tensor& kernel, int stride, int padding);

    Tensor pool2d(const Tensor& input, PoolKind kind, int window);
    Tensor global_mean_pool(const Tensor& input); // [c,h,w] -> [c]
    Tensor upsample_nearest2x(const Tensor& input);

    Tensor softmax(const Tensor& input, int axis);
    Tensor log_softmax(const Tensor& input, int axis);

    Tensor concat(const std::vector<Tensor>& parts, int axis);
    Tensor slice(const Tensor& input, int axis, int start, int len);
    Tensor reshape(const Tensor& input, Shape dims);
    Tensor sum_all(const Tensor& input);
    Tensor mean_all(const Tensor& input);

    // rows of a rank>=2 tensor; backward scatter-adds
    Tensor gather_rows(const Tensor& input, const std::vector<int>& idx);
    // mean over messages grouped by receiver; summands are value-sorted so the
    // result is independent of edge enumeration order
    Tensor segment_mean(const Tensor& messages, const std::vector<int>& receiver, int n_segments);
    // elementwise mean over a stack of same-shape tensors, value-sorted sums
    Tensor mean_stack(const std::vector<Tensor>& parts);
    // [d] -> [d,h,w] constant spatial tile
    Tensor tile_spatial(const Tensor& vec, int h, int w);

    void backward(const Tensor& loss);
    void zero_grads();
    std::size_t num_records() const { return records_.size(); }

private:
    struct Record {
        std::function<void()> fn;
    };
    std::vector<Record> records_;
    std::vector<std::shared_ptr<TensorNode>> touched_;

    bool wants_grad(std::initializer_list<const Tensor*> inputs) const;
    void note(const Tensor& t);
    void push(std::function<void()> fn) { records_.push_back({std::move(fn)}); }
};

// ---- low level kernels (exposed for tests/oracles) ----

// c[m x n] += a[m x k] * b[k x n]
void gemm_accum(const double* a, const double* b, double* c, int m, int k, int n);
// c[k x n] += a^T * b with a[m x k], b[m x n]
void gemm_at_b(const double* a, const double* b, double* c, int m, int k, int n);

// ---- finite difference verification ----

struct FdBlockReport {
    std::string name;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    int entries_checked = 0;
    int entries_skipped = 0; // loss not locally smooth there (ReLU kink in the window)
};

struct FdReport {
    std::vector<FdBlockReport> blocks;
    double worst_rel_err = 0.0;
    bool within(double tol) const { return worst_rel_err < tol; }
};

class ParamStore; // nn.hpp

// Central-difference check of analytic gradients. `loss_with_grad` must build a
// fresh tape, backpropagate, and leave gradients on the parameters;
// `loss_value` must evaluate the same deterministic loss without gradients.
// Checks up to `entries_per_block` randomly chosen entries of every block.
FdReport finite_difference_check(ParamStore& params,
                                 const std::function<double()>& loss_with_grad,
                                 const std::function<double()>& loss_value,
                                 double step,
                                 int entries_per_block,
                                 std::uint64_t seed);

} // namespace epns
