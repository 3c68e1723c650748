#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace mft {

// Extents of a row-major dense array.
using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense float32 array with an optional gradient buffer. Copies are shallow
// handles onto the same storage; ops produce fresh tensors. A tensor is
// written once by its producing op and treated as immutable afterwards.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
    static Tensor scalar(float value);

    bool defined() const { return p_ != nullptr; }
    const Shape& shape() const { return p_->shape; }
    int ndim() const { return int(p_->shape.size()); }
    int dim(int i) const { return p_->shape[size_t(i)]; }
    int64_t size() const { return int64_t(p_->v.size()); }

    float* data() { return p_->v.data(); }
    const float* data() const { return p_->v.data(); }
    const std::vector<float>& values() const { return p_->v; }

    bool requires_grad() const { return p_->requires_grad; }
    void set_requires_grad(bool r) { p_->requires_grad = r; }

    // Gradient buffer, zero-initialized on first access.
    float* grad();
    const std::vector<float>& grad_values() const;
    bool has_grad() const { return !p_->g.empty(); }
    void zero_grad();

    float item() const;
    float at(std::initializer_list<int> idx) const;

    Tensor clone() const;  // deep copy of values, no grad

    bool same_storage(const Tensor& other) const { return p_ == other.p_; }

private:
    struct Impl {
        Shape shape;
        std::vector<float> v;
        std::vector<float> g;
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> p_;

    explicit Tensor(std::shared_ptr<Impl> p) : p_(std::move(p)) {}
    friend class Tape;
};

// Ordered record of executed ops. backward() replays adjoints in exact
// reverse execution order; gradients accumulate additively. A tape lives for
// one forward pass and is confined to one worker.
class Tape {
public:
    void record(std::function<void()> backward_fn) {
        ops_.push_back(std::move(backward_fn));
    }

    size_t size() const { return ops_.size(); }
    void clear() { ops_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and propagates through the recorded ops.
    void backward(Tensor& loss);

private:
    std::vector<std::function<void()>> ops_;
};

// Free-function spelling of Tape::backward.
void backward(Tensor& loss, Tape& tape);

// ---- Differentiable ops -------------------------------------------------
//
// Each op takes an optional tape; with tape == nullptr nothing is recorded
// and the result carries requires_grad = false (evaluation mode).

// Batched matrix product [..., m, k] x [..., k, n] -> [..., m, n] with
// numpy-style broadcasting over the leading batch extents.
Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape);

// Softmax along `axis` with max-subtraction; sums accumulate in double.
Tensor softmax(const Tensor& x, int axis, Tape* tape);

// Per-vector normalization over the last extent followed by an affine map.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps, Tape* tape);

Tensor gelu(const Tensor& x, Tape* tape);

// Elementwise a + b; b broadcasts against a (numpy rules, b rank <= a rank).
Tensor add(const Tensor& a, const Tensor& b, Tape* tape);

// Elementwise a * b, same shape.
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape);

Tensor scale(const Tensor& x, float s, Tape* tape);

// Materializing axis permutation.
Tensor transpose(const Tensor& x, const std::vector<int>& perm, Tape* tape);

Tensor reshape(const Tensor& x, Shape new_shape, Tape* tape);

Tensor concat(const std::vector<Tensor>& xs, int axis, Tape* tape);

// Selects slices x[..., index[j], ...] along `axis`; shared index list.
// The adjoint scatter-adds back into the source slices.
Tensor gather(const Tensor& x, const std::vector<int>& index, int axis, Tape* tape);

// Per-sample row selection: x is (N, T, D), idx[i] holds K row indices for
// sample i (same K for all samples). Result is (N, K, D).
Tensor gather_tokens(const Tensor& x, const std::vector<std::vector<int>>& idx, Tape* tape);

// Full reduction to a scalar (shape {1}); double accumulation.
Tensor sum(const Tensor& x, Tape* tape);

// ---- Non-differentiable helpers ----------------------------------------

// Indices that sort `v` ascending; ties keep the lower index first.
std::vector<int> argsort(const float* v, int n);
std::vector<int> argsort(const std::vector<float>& v);

// Row-major sgemm helpers used by matmul; exposed for reuse in the model.
// c = alpha * op(a) * op(b) + beta * c
void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
           const float* a, int lda, const float* b, int ldb, float beta,
           float* c, int ldc);

}  // namespace mft
