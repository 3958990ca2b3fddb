#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "droplab/error.hpp"
#include "droplab/rng.hpp"

namespace droplab {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until first accumulation
    bool requires_grad = false;
    uint64_t tape_uid = 0;    // unique id of the tape that recorded this tensor
    int64_t node_id = -1;
};
} // namespace detail

// Dense row-major f64 tensor. A Tensor is a cheap handle onto shared
// storage; values are immutable once an op has produced them, except for
// gradient accumulation during backward and explicit mutable_data() access
// used by initialization and optimizer updates between passes.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor from_vector(const Shape& shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int64_t ndim() const;
    int64_t numel() const;
    int64_t dim(int axis) const; // negative axis counts from the back

    std::span<const double> data() const;
    std::span<double> mutable_data();
    double item() const;
    double at(std::initializer_list<int64_t> index) const;

    bool requires_grad() const;
    void set_requires_grad(bool value);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> grad_accum(); // allocates zeros on first use
    void zero_grad();

    detail::TensorImpl* impl() const { return impl_.get(); }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode tape. Construction makes it the active tape for the current
// thread; ops record one node per output in creation order, which is also a
// valid topological order. backward() walks the nodes exactly once in strict
// reverse creation order and then marks the tape consumed.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    // Register a backward step for `out`. Exposed so tests can install
    // custom (or deliberately wrong) rules through the public surface.
    void record(const char* op, const Tensor& out, std::function<void()> step);

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    // requires_grad tensor reachable from `loss`. Errors: non-scalar loss,
    // loss not produced on this tape, tape already consumed.
    void backward(const Tensor& loss);

private:
    struct Node {
        const char* op;
        Tensor out;
        std::function<void()> step;
    };
    std::vector<Node> nodes_;
    bool consumed_ = false;
    Tape* prev_ = nullptr;
    uint64_t uid_ = 0;
};

namespace ops {

// Binary elementwise with trailing-dimension broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// Unary elementwise.
Tensor scale(const Tensor& a, double factor);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a); // DomainError on non-positive input
Tensor tanh(const Tensor& a);
Tensor gelu(const Tensor& a); // tanh approximation

// Row-wise along one axis.
Tensor softmax(const Tensor& a, int axis);
Tensor layernorm(const Tensor& a, int axis, double eps);

// Batched matrix product over the last two dims; leading dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

// Layout.
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor slice_rows(const Tensor& a, int64_t begin, int64_t count); // axis 0

// Reductions to scalar.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Row gather: out[..., :] = table[ids[...], :]; backward scatter-adds.
Tensor embedding(const Tensor& table, const std::vector<int32_t>& ids,
                 const Shape& id_shape);

// Mean token-level cross entropy in nats. logits [..., vocab], one target
// id per row; backward is (softmax - onehot) / rows.
Tensor cross_entropy(const Tensor& logits, const std::vector<int32_t>& targets);

// Each element is 0 with probability p_zero, else 1. Never requires grad.
Tensor bernoulli_mask(const Shape& shape, double p_zero, Rng& rng);

} // namespace ops

// True when every element of every tensor is finite.
bool all_finite(const Tensor& t);

} // namespace droplab
