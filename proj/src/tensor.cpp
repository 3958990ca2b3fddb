#include "droplab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace droplab {

#if defined(_OPENMP)
#define DROPLAB_PRAGMA(x) _Pragma(#x)
#define DROPLAB_OMP_FOR(c) DROPLAB_PRAGMA(omp parallel for schedule(static) if (c))
#else
#define DROPLAB_OMP_FOR(c)
#endif

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

static void check_shape(const Shape& shape) {
    for (int64_t d : shape) {
        if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
    }
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    check_shape(shape);
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = shape;
    impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    Tensor t = zeros(shape, requires_grad);
    std::fill(t.impl()->data.begin(), t.impl()->data.end(), value);
    return t;
}

Tensor Tensor::from_vector(const Shape& shape, std::vector<double> values, bool requires_grad) {
    check_shape(shape);
    if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
        throw ShapeError("from_vector: " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = shape;
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = {};
    impl->data = {value};
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

const Shape& Tensor::shape() const { return impl_->shape; }
int64_t Tensor::ndim() const { return static_cast<int64_t>(impl_->shape.size()); }
int64_t Tensor::numel() const { return static_cast<int64_t>(impl_->data.size()); }

int64_t Tensor::dim(int axis) const {
    const int64_t nd = ndim();
    int64_t a = axis < 0 ? axis + nd : axis;
    if (a < 0 || a >= nd) {
        throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(impl_->shape));
    }
    return impl_->shape[static_cast<size_t>(a)];
}

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item: tensor is not scalar, shape " + shape_str(shape()));
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> index) const {
    if (static_cast<int64_t>(index.size()) != ndim()) {
        throw ShapeError("at: rank mismatch for " + shape_str(shape()));
    }
    int64_t off = 0;
    size_t d = 0;
    for (int64_t i : index) {
        off = off * impl_->shape[d] + i;
        ++d;
    }
    return impl_->data[static_cast<size_t>(off)];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }
bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw StateError("grad: gradient not populated");
    return impl_->grad;
}

std::span<double> Tensor::grad_accum() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
thread_local uint64_t g_tape_counter = 0;
}

Tape::Tape() {
    prev_ = g_active_tape;
    g_active_tape = this;
    uid_ = ++g_tape_counter;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const char* op, const Tensor& out, std::function<void()> step) {
    if (consumed_) throw StateError("tape: cannot record after backward");
    out.impl()->tape_uid = uid_;
    out.impl()->node_id = static_cast<int64_t>(nodes_.size());
    nodes_.push_back(Node{op, out, std::move(step)});
}

void Tape::backward(const Tensor& loss) {
    if (consumed_) throw StateError("tape: backward called twice; a tape is single use");
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (loss.impl()->tape_uid != uid_) {
        throw ContractError("backward: loss was not produced on this tape");
    }
    const_cast<Tensor&>(loss).grad_accum()[0] = 1.0;
    for (size_t i = nodes_.size(); i-- > 0;) {
        if (nodes_[i].out.has_grad()) nodes_[i].step();
    }
    consumed_ = true;
    nodes_.clear();
}

// ---------------------------------------------------------------------------
// Broadcasting machinery (trailing-dimension alignment)
// ---------------------------------------------------------------------------

namespace {

struct BroadcastPlan {
    Shape out_shape;
    std::vector<int64_t> a_strides; // aligned to out rank; 0 on broadcast dims
    std::vector<int64_t> b_strides;
};

std::vector<int64_t> contiguous_strides(const Shape& shape) {
    std::vector<int64_t> s(shape.size());
    int64_t acc = 1;
    for (size_t i = shape.size(); i-- > 0;) {
        s[i] = acc;
        acc *= shape[i];
    }
    return s;
}

BroadcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
    const size_t rank = std::max(a.size(), b.size());
    BroadcastPlan plan;
    plan.out_shape.assign(rank, 1);
    const auto as = contiguous_strides(a);
    const auto bs = contiguous_strides(b);
    plan.a_strides.assign(rank, 0);
    plan.b_strides.assign(rank, 0);
    for (size_t i = 0; i < rank; ++i) {
        const size_t oi = rank - 1 - i;
        const int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        const int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1) {
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                             shape_str(b) + " are not broadcastable");
        }
        plan.out_shape[oi] = std::max(da, db);
        if (da != 1 && i < a.size()) plan.a_strides[oi] = as[a.size() - 1 - i];
        if (db != 1 && i < b.size()) plan.b_strides[oi] = bs[b.size() - 1 - i];
    }
    return plan;
}

// Walks every element of `out_shape` in row-major order, maintaining two
// strided cursors. No divisions; the carry loop keeps it cheap.
template <class F>
void for_each_broadcast(const Shape& out_shape, const std::vector<int64_t>& a_strides,
                        const std::vector<int64_t>& b_strides, F&& f) {
    const size_t rank = out_shape.size();
    const int64_t total = shape_numel(out_shape);
    if (rank == 0) {
        if (total > 0) f(0, 0, 0);
        return;
    }
    std::vector<int64_t> counter(rank, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t io = 0; io < total; ++io) {
        f(io, ia, ib);
        for (size_t d = rank; d-- > 0;) {
            ++counter[d];
            ia += a_strides[d];
            ib += b_strides[d];
            if (counter[d] < out_shape[d]) break;
            ia -= a_strides[d] * out_shape[d];
            ib -= b_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
}

bool any_requires_grad(std::initializer_list<Tensor> inputs) {
    for (const Tensor& t : inputs) {
        if (t.requires_grad()) return true;
    }
    return false;
}

// Common recording guard: gradients are tracked only while a tape is active.
bool tracking(std::initializer_list<Tensor> inputs) {
    return Tape::active() != nullptr && any_requires_grad(inputs);
}

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw StateError(std::string(op) + ": undefined tensor");
}

} // namespace

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

namespace ops {

namespace {

template <class FwdF>
Tensor binary_forward(const Tensor& a, const Tensor& b, const char* name, FwdF f,
                      BroadcastPlan& plan_out) {
    require_defined(a, name);
    require_defined(b, name);
    plan_out = broadcast_plan(a.shape(), b.shape(), name);
    Tensor out = Tensor::zeros(plan_out.out_shape);
    auto od = out.mutable_data();
    const auto ad = a.data();
    const auto bd = b.data();
    if (a.shape() == b.shape()) {
        for (int64_t i = 0; i < out.numel(); ++i) od[i] = f(ad[i], bd[i]);
    } else {
        for_each_broadcast(plan_out.out_shape, plan_out.a_strides, plan_out.b_strides,
                           [&](int64_t io, int64_t ia, int64_t ib) { od[io] = f(ad[ia], bd[ib]); });
    }
    return out;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    BroadcastPlan plan;
    Tensor out = binary_forward(a, b, "add", [](double x, double y) { return x + y; }, plan);
    if (tracking({a, b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record("add", out, [ac, bc, oc, plan]() mutable {
            const auto go = oc.grad();
            if (ac.requires_grad()) {
                auto ga = ac.grad_accum();
                for_each_broadcast(plan.out_shape, plan.a_strides, plan.b_strides,
                                   [&](int64_t io, int64_t ia, int64_t) { ga[ia] += go[io]; });
            }
            if (bc.requires_grad()) {
                auto gb = bc.grad_accum();
                for_each_broadcast(plan.out_shape, plan.a_strides, plan.b_strides,
                                   [&](int64_t io, int64_t, int64_t ib) { gb[ib] += go[io]; });
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    BroadcastPlan plan;
    Tensor out = binary_forward(a, b, "sub", [](double x, double y) { return x - y; }, plan);
    if (tracking({a, b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record("sub", out, [ac, bc, oc, plan]() mutable {
            const auto go = oc.grad();
            if (ac.requires_grad()) {
                auto ga = ac.grad_accum();
                for_each_broadcast(plan.out_shape, plan.a_strides, plan.b_strides,
                                   [&](int64_t io, int64_t ia, int64_t) { ga[ia] += go[io]; });
            }
            if (bc.requires_grad()) {
                auto gb = bc.grad_accum();
                for_each_broadcast(plan.out_shape, plan.a_strides, plan.b_strides,
                                   [&](int64_t io, int64_t, int64_t ib) { gb[ib] -= go[io]; });
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    BroadcastPlan plan;
    Tensor out = binary_forward(a, b, "mul", [](double x, double y) { return x * y; }, plan);
    if (tracking({a, b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record("mul", out, [ac, bc, oc, plan]() mutable {
            const auto go = oc.grad();
            const auto ad = ac.data();
            const auto bd = bc.data();
            if (ac.requires_grad()) {
                auto ga = ac.grad_accum();
                for_each_broadcast(plan.out_shape, plan.a_strides, plan.b_strides,
                                   [&](int64_t io, int64_t ia, int64_t ib) { ga[ia] += go[io] * bd[ib]; });
            }
            if (bc.requires_grad()) {
                auto gb = bc.grad_accum();
                for_each_broadcast(plan.out_shape, plan.a_strides, plan.b_strides,
                                   [&](int64_t io, int64_t ia, int64_t ib) { gb[ib] += go[io] * ad[ia]; });
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace {

template <class FwdF, class BwdF>
Tensor unary_op(const Tensor& a, const char* name, FwdF fwd, BwdF make_backward) {
    require_defined(a, name);
    Tensor out = Tensor::zeros(a.shape());
    auto od = out.mutable_data();
    const auto ad = a.data();
    for (int64_t i = 0; i < a.numel(); ++i) od[i] = fwd(ad[i]);
    if (tracking({a})) {
        out.set_requires_grad(true);
        Tape::active()->record(name, out, make_backward(a, out));
    }
    return out;
}

} // namespace

Tensor scale(const Tensor& a, double factor) {
    return unary_op(
        a, "scale", [factor](double x) { return x * factor; },
        [factor](Tensor in, Tensor out) {
            return [in, out, factor]() mutable {
                const auto go = out.grad();
                auto ga = in.grad_accum();
                for (int64_t i = 0; i < in.numel(); ++i) ga[i] += factor * go[i];
            };
        });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        a, "exp", [](double x) { return std::exp(x); },
        [](Tensor in, Tensor out) {
            return [in, out]() mutable {
                const auto go = out.grad();
                const auto od = out.data();
                auto ga = in.grad_accum();
                for (int64_t i = 0; i < in.numel(); ++i) ga[i] += go[i] * od[i];
            };
        });
}

Tensor log(const Tensor& a) {
    require_defined(a, "log");
    const auto ad = a.data();
    for (int64_t i = 0; i < a.numel(); ++i) {
        if (!(ad[i] > 0.0)) {
            throw DomainError("log: non-positive input " + std::to_string(ad[i]) +
                              " at flat index " + std::to_string(i));
        }
    }
    return unary_op(
        a, "log", [](double x) { return std::log(x); },
        [](Tensor in, Tensor out) {
            return [in, out]() mutable {
                const auto go = out.grad();
                const auto id = in.data();
                auto ga = in.grad_accum();
                for (int64_t i = 0; i < in.numel(); ++i) ga[i] += go[i] / id[i];
            };
        });
}

Tensor tanh(const Tensor& a) {
    return unary_op(
        a, "tanh", [](double x) { return std::tanh(x); },
        [](Tensor in, Tensor out) {
            return [in, out]() mutable {
                const auto go = out.grad();
                const auto od = out.data();
                auto ga = in.grad_accum();
                for (int64_t i = 0; i < in.numel(); ++i) ga[i] += go[i] * (1.0 - od[i] * od[i]);
            };
        });
}

namespace {
constexpr double kGeluAlpha = 0.7978845608028653558798921198687; // sqrt(2/pi)
constexpr double kGeluBeta = 0.044715;
} // namespace

Tensor gelu(const Tensor& a) {
    return unary_op(
        a, "gelu",
        [](double x) {
            const double u = kGeluAlpha * (x + kGeluBeta * x * x * x);
            return 0.5 * x * (1.0 + std::tanh(u));
        },
        [](Tensor in, Tensor out) {
            return [in, out]() mutable {
                const auto go = out.grad();
                const auto id = in.data();
                auto ga = in.grad_accum();
                for (int64_t i = 0; i < in.numel(); ++i) {
                    const double x = id[i];
                    const double t = std::tanh(kGeluAlpha * (x + kGeluBeta * x * x * x));
                    const double du = kGeluAlpha * (1.0 + 3.0 * kGeluBeta * x * x);
                    ga[i] += go[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                }
            };
        });
}

// ---------------------------------------------------------------------------
// Axis ops: softmax, layernorm
// ---------------------------------------------------------------------------

namespace {

struct AxisDims {
    int64_t outer, len, inner;
    int axis;
};

AxisDims axis_dims(const Tensor& a, int axis, const char* op) {
    const int64_t nd = a.ndim();
    int64_t ax = axis < 0 ? axis + nd : axis;
    if (ax < 0 || ax >= nd) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for " + shape_str(a.shape()));
    }
    AxisDims d{1, a.shape()[static_cast<size_t>(ax)], 1, static_cast<int>(ax)};
    for (int64_t i = 0; i < ax; ++i) d.outer *= a.shape()[static_cast<size_t>(i)];
    for (int64_t i = ax + 1; i < nd; ++i) d.inner *= a.shape()[static_cast<size_t>(i)];
    return d;
}

// Applies f(base_offset, stride) to every row along the axis.
template <class F>
void for_each_row(const AxisDims& d, F&& f) {
    for (int64_t o = 0; o < d.outer; ++o) {
        for (int64_t in = 0; in < d.inner; ++in) {
            f(o * d.len * d.inner + in, d.inner);
        }
    }
}

} // namespace

Tensor softmax(const Tensor& a, int axis) {
    require_defined(a, "softmax");
    const AxisDims dims = axis_dims(a, axis, "softmax");
    Tensor out = Tensor::zeros(a.shape());
    auto od = out.mutable_data();
    const auto ad = a.data();
    for_each_row(dims, [&](int64_t base, int64_t stride) {
        double mx = ad[base];
        for (int64_t i = 1; i < dims.len; ++i) mx = std::max(mx, ad[base + i * stride]);
        double sum = 0.0;
        for (int64_t i = 0; i < dims.len; ++i) {
            const double e = std::exp(ad[base + i * stride] - mx);
            od[base + i * stride] = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (int64_t i = 0; i < dims.len; ++i) od[base + i * stride] *= inv;
    });
    if (tracking({a})) {
        out.set_requires_grad(true);
        Tensor ac = a, oc = out;
        Tape::active()->record("softmax", out, [ac, oc, dims]() mutable {
            const auto go = oc.grad();
            const auto p = oc.data();
            auto ga = ac.grad_accum();
            for_each_row(dims, [&](int64_t base, int64_t stride) {
                double dot = 0.0;
                for (int64_t i = 0; i < dims.len; ++i) {
                    const int64_t k = base + i * stride;
                    dot += p[k] * go[k];
                }
                for (int64_t i = 0; i < dims.len; ++i) {
                    const int64_t k = base + i * stride;
                    ga[k] += p[k] * (go[k] - dot);
                }
            });
        });
    }
    return out;
}

Tensor layernorm(const Tensor& a, int axis, double eps) {
    require_defined(a, "layernorm");
    if (eps < 0.0) throw DomainError("layernorm: eps must be non-negative");
    const AxisDims dims = axis_dims(a, axis, "layernorm");
    Tensor out = Tensor::zeros(a.shape());
    auto od = out.mutable_data();
    const auto ad = a.data();
    auto inv_std = std::make_shared<std::vector<double>>();
    inv_std->reserve(static_cast<size_t>(dims.outer * dims.inner));
    const double inv_len = 1.0 / static_cast<double>(dims.len);
    for_each_row(dims, [&](int64_t base, int64_t stride) {
        double mean = 0.0;
        for (int64_t i = 0; i < dims.len; ++i) mean += ad[base + i * stride];
        mean *= inv_len;
        double var = 0.0;
        for (int64_t i = 0; i < dims.len; ++i) {
            const double c = ad[base + i * stride] - mean;
            var += c * c;
        }
        var *= inv_len;
        const double r = 1.0 / std::sqrt(var + eps);
        inv_std->push_back(r);
        for (int64_t i = 0; i < dims.len; ++i) {
            const int64_t k = base + i * stride;
            od[k] = (ad[k] - mean) * r;
        }
    });
    if (tracking({a})) {
        out.set_requires_grad(true);
        Tensor ac = a, oc = out;
        Tape::active()->record("layernorm", out, [ac, oc, dims, inv_std]() mutable {
            const auto go = oc.grad();
            const auto y = oc.data();
            auto ga = ac.grad_accum();
            const double inv_len = 1.0 / static_cast<double>(dims.len);
            size_t row = 0;
            for_each_row(dims, [&](int64_t base, int64_t stride) {
                const double r = (*inv_std)[row++];
                double mean_g = 0.0, mean_gy = 0.0;
                for (int64_t i = 0; i < dims.len; ++i) {
                    const int64_t k = base + i * stride;
                    mean_g += go[k];
                    mean_gy += go[k] * y[k];
                }
                mean_g *= inv_len;
                mean_gy *= inv_len;
                for (int64_t i = 0; i < dims.len; ++i) {
                    const int64_t k = base + i * stride;
                    ga[k] += r * (go[k] - mean_g - y[k] * mean_gy);
                }
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace {

// C[m,n] (+)= A[m,k] * B[k,n], row-major. Each output row is accumulated
// sequentially over k, so results are bit-identical for any thread count.
void gemm(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
          bool accumulate) {
    DROPLAB_OMP_FOR(m >= 4 && m * k * n >= (1 << 15))
    for (int64_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        if (!accumulate) std::memset(crow, 0, static_cast<size_t>(n) * sizeof(double));
        const double* arow = a + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const double* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

std::vector<double> transpose2d(const double* src, int64_t rows, int64_t cols) {
    std::vector<double> out(static_cast<size_t>(rows * cols));
    for (int64_t i = 0; i < rows; ++i) {
        for (int64_t j = 0; j < cols; ++j) out[static_cast<size_t>(j * rows + i)] = src[i * cols + j];
    }
    return out;
}

struct MatmulPlan {
    Shape out_shape;
    Shape batch_shape;                  // broadcast batch dims
    std::vector<int64_t> a_batch_strides; // in units of matrix slices
    std::vector<int64_t> b_batch_strides;
    int64_t m, k, n;
    int64_t batches;
};

MatmulPlan matmul_plan(const Tensor& a, const Tensor& b) {
    if (a.ndim() < 2 || b.ndim() < 2) {
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    MatmulPlan plan;
    plan.m = a.dim(-2);
    plan.k = a.dim(-1);
    const int64_t bk = b.dim(-2);
    plan.n = b.dim(-1);
    if (plan.k != bk) {
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    Shape a_batch(a.shape().begin(), a.shape().end() - 2);
    Shape b_batch(b.shape().begin(), b.shape().end() - 2);
    BroadcastPlan bp = broadcast_plan(a_batch, b_batch, "matmul");
    plan.batch_shape = bp.out_shape;
    plan.a_batch_strides = bp.a_strides;
    plan.b_batch_strides = bp.b_strides;
    plan.batches = shape_numel(plan.batch_shape);
    plan.out_shape = plan.batch_shape;
    plan.out_shape.push_back(plan.m);
    plan.out_shape.push_back(plan.n);
    return plan;
}

// Iterates batch slices; fa/fb are offsets in slice units.
template <class F>
void for_each_batch(const MatmulPlan& plan, F&& f) {
    int64_t slice = 0;
    for_each_broadcast(plan.batch_shape, plan.a_batch_strides, plan.b_batch_strides,
                       [&](int64_t, int64_t ia, int64_t ib) { f(slice++, ia, ib); });
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_defined(a, "matmul");
    require_defined(b, "matmul");
    const MatmulPlan plan = matmul_plan(a, b);
    Tensor out = Tensor::zeros(plan.out_shape);
    auto od = out.mutable_data();
    const auto ad = a.data();
    const auto bd = b.data();
    const int64_t a_sz = plan.m * plan.k, b_sz = plan.k * plan.n, o_sz = plan.m * plan.n;
    for_each_batch(plan, [&](int64_t slice, int64_t ia, int64_t ib) {
        gemm(ad.data() + ia * a_sz, bd.data() + ib * b_sz, od.data() + slice * o_sz, plan.m,
             plan.k, plan.n, false);
    });
    if (tracking({a, b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record("matmul", out, [ac, bc, oc, plan]() mutable {
            const auto go = oc.grad();
            const auto ad2 = ac.data();
            const auto bd2 = bc.data();
            const int64_t a_sz = plan.m * plan.k, b_sz = plan.k * plan.n, o_sz = plan.m * plan.n;
            // dA = dC * B^T
            if (ac.requires_grad()) {
                auto ga = ac.grad_accum();
                const bool b_is_shared = shape_numel(Shape(bc.shape().begin(), bc.shape().end() - 2)) == 1;
                std::vector<double> bt_shared;
                if (b_is_shared) bt_shared = transpose2d(bd2.data(), plan.k, plan.n);
                for_each_batch(plan, [&](int64_t slice, int64_t ia, int64_t ib) {
                    const std::vector<double>& bt =
                        b_is_shared ? bt_shared : transpose2d(bd2.data() + ib * b_sz, plan.k, plan.n);
                    gemm(go.data() + slice * o_sz, bt.data(), ga.data() + ia * a_sz, plan.m, plan.n,
                         plan.k, true);
                });
            }
            // dB = A^T * dC
            if (bc.requires_grad()) {
                auto gb = bc.grad_accum();
                for_each_batch(plan, [&](int64_t slice, int64_t ia, int64_t ib) {
                    const std::vector<double> at = transpose2d(ad2.data() + ia * a_sz, plan.m, plan.k);
                    gemm(at.data(), go.data() + slice * o_sz, gb.data() + ib * b_sz, plan.k, plan.m,
                         plan.n, true);
                });
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layout ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& shape) {
    require_defined(a, "reshape");
    check_shape(shape);
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    Tensor out = Tensor::from_vector(shape, std::vector<double>(a.data().begin(), a.data().end()));
    if (tracking({a})) {
        out.set_requires_grad(true);
        Tensor ac = a, oc = out;
        Tape::active()->record("reshape", out, [ac, oc]() mutable {
            const auto go = oc.grad();
            auto ga = ac.grad_accum();
            for (int64_t i = 0; i < ac.numel(); ++i) ga[i] += go[i];
        });
    }
    return out;
}

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
    require_defined(a, "permute");
    const size_t rank = a.shape().size();
    if (axes.size() != rank) throw ShapeError("permute: axes rank mismatch");
    std::vector<bool> seen(rank, false);
    Shape out_shape(rank);
    for (size_t i = 0; i < rank; ++i) {
        const int ax = axes[i];
        if (ax < 0 || static_cast<size_t>(ax) >= rank || seen[static_cast<size_t>(ax)]) {
            throw ShapeError("permute: invalid axis list");
        }
        seen[static_cast<size_t>(ax)] = true;
        out_shape[i] = a.shape()[static_cast<size_t>(ax)];
    }
    const auto src_strides = contiguous_strides(a.shape());
    std::vector<int64_t> gather(rank);
    for (size_t i = 0; i < rank; ++i) gather[i] = src_strides[static_cast<size_t>(axes[i])];

    Tensor out = Tensor::zeros(out_shape);
    auto od = out.mutable_data();
    const auto ad = a.data();
    std::vector<int64_t> zero(rank, 0);
    for_each_broadcast(out_shape, gather, zero,
                       [&](int64_t io, int64_t ia, int64_t) { od[io] = ad[ia]; });
    if (tracking({a})) {
        out.set_requires_grad(true);
        Tensor ac = a, oc = out;
        Tape::active()->record("permute", out, [ac, oc, out_shape, gather, zero]() mutable {
            const auto go = oc.grad();
            auto ga = ac.grad_accum();
            for_each_broadcast(out_shape, gather, zero,
                               [&](int64_t io, int64_t ia, int64_t) { ga[ia] += go[io]; });
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& a, int64_t begin, int64_t count) {
    require_defined(a, "slice_rows");
    if (a.ndim() < 1) throw ShapeError("slice_rows: rank must be >= 1");
    const int64_t rows = a.shape()[0];
    if (begin < 0 || count <= 0 || begin + count > rows) {
        throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") exceeds " + std::to_string(rows) +
                         " rows");
    }
    Shape out_shape = a.shape();
    out_shape[0] = count;
    const int64_t row_sz = a.numel() / rows;
    Tensor out = Tensor::zeros(out_shape);
    std::copy_n(a.data().data() + begin * row_sz, count * row_sz, out.mutable_data().data());
    if (tracking({a})) {
        out.set_requires_grad(true);
        Tensor ac = a, oc = out;
        Tape::active()->record("slice_rows", out, [ac, oc, begin, count, row_sz]() mutable {
            const auto go = oc.grad();
            auto ga = ac.grad_accum();
            for (int64_t i = 0; i < count * row_sz; ++i) ga[begin * row_sz + i] += go[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
    require_defined(a, "sum");
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (tracking({a})) {
        out.set_requires_grad(true);
        Tensor ac = a, oc = out;
        Tape::active()->record("sum", out, [ac, oc]() mutable {
            const double g = oc.grad()[0];
            auto ga = ac.grad_accum();
            for (int64_t i = 0; i < ac.numel(); ++i) ga[i] += g;
        });
    }
    return out;
}

Tensor mean(const Tensor& a) {
    require_defined(a, "mean");
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    const double inv_n = 1.0 / static_cast<double>(a.numel());
    Tensor out = Tensor::scalar(acc * inv_n);
    if (tracking({a})) {
        out.set_requires_grad(true);
        Tensor ac = a, oc = out;
        Tape::active()->record("mean", out, [ac, oc, inv_n]() mutable {
            const double g = oc.grad()[0] * inv_n;
            auto ga = ac.grad_accum();
            for (int64_t i = 0; i < ac.numel(); ++i) ga[i] += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding and cross entropy
// ---------------------------------------------------------------------------

Tensor embedding(const Tensor& table, const std::vector<int32_t>& ids, const Shape& id_shape) {
    require_defined(table, "embedding");
    if (table.ndim() != 2) throw ShapeError("embedding: table must be rank 2");
    if (shape_numel(id_shape) != static_cast<int64_t>(ids.size())) {
        throw ShapeError("embedding: id_shape " + shape_str(id_shape) + " does not hold " +
                         std::to_string(ids.size()) + " ids");
    }
    const int64_t vocab = table.shape()[0];
    const int64_t dim = table.shape()[1];
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= vocab) {
            throw DataError("embedding: id " + std::to_string(ids[i]) + " at position " +
                            std::to_string(i) + " outside vocabulary of " + std::to_string(vocab));
        }
    }
    Shape out_shape = id_shape;
    out_shape.push_back(dim);
    Tensor out = Tensor::zeros(out_shape);
    auto od = out.mutable_data();
    const auto td = table.data();
    for (size_t r = 0; r < ids.size(); ++r) {
        std::copy_n(td.data() + static_cast<int64_t>(ids[r]) * dim, dim,
                    od.data() + static_cast<int64_t>(r) * dim);
    }
    if (tracking({table})) {
        out.set_requires_grad(true);
        Tensor tc = table, oc = out;
        auto ids_copy = std::make_shared<std::vector<int32_t>>(ids);
        Tape::active()->record("embedding", out, [tc, oc, ids_copy, dim]() mutable {
            const auto go = oc.grad();
            auto gt = tc.grad_accum();
            for (size_t r = 0; r < ids_copy->size(); ++r) {
                const int64_t row = (*ids_copy)[r];
                for (int64_t j = 0; j < dim; ++j) {
                    gt[row * dim + j] += go[static_cast<int64_t>(r) * dim + j];
                }
            }
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int32_t>& targets) {
    require_defined(logits, "cross_entropy");
    if (logits.ndim() < 1) throw ShapeError("cross_entropy: logits must have rank >= 1");
    const int64_t vocab = logits.dim(-1);
    const int64_t rows = logits.numel() / vocab;
    if (static_cast<int64_t>(targets.size()) != rows) {
        throw ShapeError("cross_entropy: expected " + std::to_string(rows) + " targets, got " +
                         std::to_string(targets.size()));
    }
    for (size_t r = 0; r < targets.size(); ++r) {
        if (targets[r] < 0 || targets[r] >= vocab) {
            throw DataError("cross_entropy: target " + std::to_string(targets[r]) + " at row " +
                            std::to_string(r) + " outside vocabulary of " + std::to_string(vocab));
        }
    }
    const auto ld = logits.data();
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(rows * vocab));
    double total = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = ld.data() + r * vocab;
        double mx = row[0];
        for (int64_t v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
        double sum = 0.0;
        for (int64_t v = 0; v < vocab; ++v) sum += std::exp(row[v] - mx);
        const double lse = mx + std::log(sum);
        total += lse - row[targets[static_cast<size_t>(r)]];
        const double inv = 1.0 / sum;
        for (int64_t v = 0; v < vocab; ++v) {
            (*probs)[static_cast<size_t>(r * vocab + v)] = std::exp(row[v] - mx) * inv;
        }
    }
    const double inv_rows = 1.0 / static_cast<double>(rows);
    Tensor out = Tensor::scalar(total * inv_rows);
    if (tracking({logits})) {
        out.set_requires_grad(true);
        Tensor lc = logits, oc = out;
        auto tgt = std::make_shared<std::vector<int32_t>>(targets);
        Tape::active()->record("cross_entropy", out, [lc, oc, probs, tgt, rows, vocab, inv_rows]() mutable {
            const double g = oc.grad()[0] * inv_rows;
            auto gl = lc.grad_accum();
            for (int64_t r = 0; r < rows; ++r) {
                const int64_t t = (*tgt)[static_cast<size_t>(r)];
                for (int64_t v = 0; v < vocab; ++v) {
                    const double onehot = (v == t) ? 1.0 : 0.0;
                    gl[r * vocab + v] += g * ((*probs)[static_cast<size_t>(r * vocab + v)] - onehot);
                }
            }
        });
    }
    return out;
}

Tensor bernoulli_mask(const Shape& shape, double p_zero, Rng& rng) {
    if (!(p_zero >= 0.0 && p_zero <= 1.0)) {
        throw DomainError("bernoulli_mask: p_zero " + std::to_string(p_zero) +
                          " outside [0, 1]");
    }
    Tensor out = Tensor::zeros(shape);
    auto od = out.mutable_data();
    for (int64_t i = 0; i < out.numel(); ++i) od[i] = rng.uniform() < p_zero ? 0.0 : 1.0;
    return out;
}

} // namespace ops

bool all_finite(const Tensor& t) {
    for (double v : t.data()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

} // namespace droplab
