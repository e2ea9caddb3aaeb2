#include "icreg/autodiff.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <numeric>
#include <sstream>

#include <cblas.h>
#include <nlohmann/json.hpp>

namespace icreg::ad {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace {

[[noreturn]] void fail(std::string_view kind, const std::string& what) {
    throw ShapeError(std::string(kind) + ": " + what);
}

void check_shape(const Shape& shape) {
    for (auto e : shape)
        if (e == 0) throw ShapeError("zero extent in shape " + shape_to_string(shape));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
    check_shape(shape);
    if (shape_size(shape) != values.size())
        throw ShapeError("constant: shape " + shape_to_string(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<const std::vector<double>>(std::move(values));
    return t;
}

Tensor Tensor::scalar(double value) { return constant({1}, {value}); }

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    auto n = shape_size(shape);
    return constant(std::move(shape), std::vector<double>(n, value));
}

std::span<const double> Tensor::data() const {
    if (!data_) return {};
    return {data_->data(), data_->size()};
}

const std::vector<double>& Tensor::values() const {
    static const std::vector<double> empty;
    return data_ ? *data_ : empty;
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + shape_to_string(shape_) + " is not a scalar");
    return (*data_)[0];
}

Tensor Tensor::detached() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
}

// ---------------------------------------------------------------------------
// Tape

Tensor Tape::variable(Shape shape, std::vector<double> values) {
    Tensor t = Tensor::constant(std::move(shape), std::move(values));
    nodes_.push_back(Node{"leaf", {}, t.shape_, nullptr});
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size() - 1);
    return t;
}

Tensor Tape::variable(const Tensor& value) {
    Tensor t = value.detached();
    nodes_.push_back(Node{"leaf", {}, t.shape_, nullptr});
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size() - 1);
    return t;
}

Tensor Tape::record(std::string kind, std::span<const Tensor> inputs, Shape shape,
                    std::vector<double> values, BackwardFn backward) {
    Tensor t = Tensor::constant(std::move(shape), std::move(values));
    Node n{std::move(kind), {}, t.shape_, std::move(backward)};
    n.parents.reserve(inputs.size());
    for (const auto& in : inputs) n.parents.push_back(in.tape() == this ? in.node() : -1);
    nodes_.push_back(std::move(n));
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size() - 1);
    return t;
}

std::vector<double> Gradients::of(const Tensor& t) const {
    if (t.is_constant() || t.node() < 0 || static_cast<std::size_t>(t.node()) >= grads_.size() ||
        grads_[t.node()].empty())
        return std::vector<double>(t.size(), 0.0);
    return grads_[t.node()];
}

Gradients backprop(const Tensor& loss) {
    if (loss.size() != 1)
        throw ShapeError("backprop: loss must have exactly one element, got shape " +
                         shape_to_string(loss.shape()));
    Tape* tape = loss.tape();
    if (!tape) return Gradients({}, {});
    const std::size_t n = tape->size();
    std::vector<std::vector<double>> grads(n);
    std::vector<Shape> shapes(n);
    for (std::size_t i = 0; i < n; ++i) shapes[i] = tape->node(i).shape;
    grads[loss.node()] = {1.0};

    std::vector<std::vector<double>*> parent_ptrs;
    for (std::size_t id = static_cast<std::size_t>(loss.node()) + 1; id-- > 0;) {
        const auto& node = tape->node(id);
        if (grads[id].empty() || !node.backward) continue;
        parent_ptrs.assign(node.parents.size(), nullptr);
        for (std::size_t k = 0; k < node.parents.size(); ++k) {
            int p = node.parents[k];
            if (p < 0) continue;
            if (grads[p].empty()) grads[p].assign(shape_size(shapes[p]), 0.0);
            parent_ptrs[k] = &grads[p];
        }
        node.backward(grads[id], parent_ptrs);
    }
    for (std::size_t i = 0; i < n; ++i)
        if (grads[i].empty()) grads[i].assign(shape_size(shapes[i]), 0.0);
    return Gradients(std::move(grads), std::move(shapes));
}

// ---------------------------------------------------------------------------
// Primitive helpers

namespace {

Tape* common_tape(std::string_view kind, std::span<const Tensor> inputs) {
    Tape* tape = nullptr;
    for (const auto& t : inputs) {
        if (!t.defined()) fail(kind, "undefined input tensor");
        if (!t.tape()) continue;
        if (tape && tape != t.tape()) fail(kind, "inputs belong to different tapes");
        tape = t.tape();
    }
    return tape;
}

Tensor make(std::string_view kind, std::span<const Tensor> inputs, Shape shape,
            std::vector<double> values, BackwardFn backward) {
    Tape* tape = common_tape(kind, inputs);
    if (!tape) return Tensor::constant(std::move(shape), std::move(values));
    return tape->record(std::string(kind), inputs, std::move(shape), std::move(values), std::move(backward));
}

Tensor make(std::string_view kind, std::initializer_list<Tensor> inputs, Shape shape,
            std::vector<double> values, BackwardFn backward) {
    std::vector<Tensor> v(inputs);
    return make(kind, std::span<const Tensor>(v), std::move(shape), std::move(values), std::move(backward));
}

void require_same_shape(std::string_view kind, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        fail(kind, "shape mismatch " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
}

using DataPtr = std::shared_ptr<const std::vector<double>>;

DataPtr share(const Tensor& t) { return t.storage(); }

// Unary elementwise op given f(x) and df/dx(x, y).
template <class F, class D>
Tensor unary(std::string_view kind, const Tensor& a, F f, D dfdx) {
    const auto& x = a.values();
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    if (a.is_constant()) return Tensor::constant(a.shape(), std::move(y));
    auto xs = share(a);
    auto ys = std::make_shared<const std::vector<double>>(y);
    return make(kind, {a}, a.shape(), std::move(y),
                [xs, ys, dfdx](std::span<const double> g, std::span<std::vector<double>*> pg) {
                    auto& ga = *pg[0];
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx((*xs)[i], (*ys)[i]);
                });
}

struct Dims2 {
    std::size_t channels, height, width;
};

Dims2 spatial_dims(std::string_view kind, const Shape& s) {
    if (s.size() == 2) return {1, s[0], s[1]};
    if (s.size() == 3) return {s[0], s[1], s[2]};
    fail(kind, "expected [H,W] or [C,H,W], got " + shape_to_string(s));
}

Shape with_spatial(const Shape& s, std::size_t h, std::size_t w) {
    Shape out = s;
    out[s.size() - 2] = h;
    out[s.size() - 1] = w;
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise binary

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
    return make("add", {a, b}, a.shape(), std::move(y), [](std::span<const double> g, std::span<std::vector<double>*> pg) {
        for (auto* p : pg)
            if (p)
                for (std::size_t i = 0; i < g.size(); ++i) (*p)[i] += g[i];
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
    return make("sub", {a, b}, a.shape(), std::move(y), [](std::span<const double> g, std::span<std::vector<double>*> pg) {
        if (pg[0])
            for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
        if (pg[1])
            for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
    if (a.is_constant() && b.is_constant()) return Tensor::constant(a.shape(), std::move(y));
    auto as = share(a), bs = share(b);
    return make("mul", {a, b}, a.shape(), std::move(y),
                [as, bs](std::span<const double> g, std::span<std::vector<double>*> pg) {
                    if (pg[0])
                        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * (*bs)[i];
                    if (pg[1])
                        for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * (*as)[i];
                });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape("div", a, b);
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] / b[i];
    if (a.is_constant() && b.is_constant()) return Tensor::constant(a.shape(), std::move(y));
    auto as = share(a), bs = share(b);
    return make("div", {a, b}, a.shape(), std::move(y),
                [as, bs](std::span<const double> g, std::span<std::vector<double>*> pg) {
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        double bi = (*bs)[i];
                        if (pg[0]) (*pg[0])[i] += g[i] / bi;
                        if (pg[1]) (*pg[1])[i] -= g[i] * (*as)[i] / (bi * bi);
                    }
                });
}

Tensor scalar_mul(const Tensor& a, double c) {
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * c;
    return make("scalar_mul", {a}, a.shape(), std::move(y), [c](std::span<const double> g, std::span<std::vector<double>*> pg) {
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += c * g[i];
    });
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + c;
    return make("add_scalar", {a}, a.shape(), std::move(y), [](std::span<const double> g, std::span<std::vector<double>*> pg) {
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
    });
}

// ---------------------------------------------------------------------------
// Linear algebra and shape manipulation


Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        fail("matmul", "incompatible shapes " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> y(m * n, 0.0);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, int(m), int(n), int(k), 1.0, a.values().data(), int(k),
                b.values().data(), int(n), 0.0, y.data(), int(n));
    if (a.is_constant() && b.is_constant()) return Tensor::constant({m, n}, std::move(y));
    auto as = share(a), bs = share(b);
    return make("matmul", {a, b}, {m, n}, std::move(y),
                [as, bs, m, k, n](std::span<const double> g, std::span<std::vector<double>*> pg) {
                    if (pg[0])  // dA += G B^T
                        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, int(m), int(k), int(n), 1.0, g.data(),
                                    int(n), bs->data(), int(n), 1.0, pg[0]->data(), int(k));
                    if (pg[1])  // dB += A^T G
                        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(k), int(n), int(m), 1.0, as->data(),
                                    int(k), g.data(), int(n), 1.0, pg[1]->data(), int(n));
                });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) fail("transpose", "expected rank 2, got " + shape_to_string(a.shape()));
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> y(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) y[j * m + i] = a[i * n + j];
    return make("transpose", {a}, {n, m}, std::move(y), [m, n](std::span<const double> g, std::span<std::vector<double>*> pg) {
        auto& ga = *pg[0];
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    check_shape(shape);
    if (shape_size(shape) != a.size())
        fail("reshape", "cannot reshape " + shape_to_string(a.shape()) + " to " + shape_to_string(shape));
    return make("reshape", {a}, std::move(shape), a.values(), [](std::span<const double> g, std::span<std::vector<double>*> pg) {
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
    });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) fail("concat", "no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) fail("concat", "axis out of range for " + shape_to_string(s0));
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d)
            if (d != axis && s[d] != s0[d]) ok = false;
        if (!ok) fail("concat", "incompatible shapes " + shape_to_string(s0) + " and " + shape_to_string(s));
        total += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
    for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
    Shape out_shape = s0;
    out_shape[axis] = total;
    std::vector<double> y(outer * total * inner);
    std::vector<std::size_t> widths;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::size_t w = p.shape()[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(p.values().data() + o * w, w, y.data() + o * total * inner + offset);
        widths.push_back(w);
        offset += w;
    }
    return make("concat", parts, std::move(out_shape), std::move(y),
                [widths, outer, row = total * inner](std::span<const double> g, std::span<std::vector<double>*> pg) {
                    std::size_t off = 0;
                    for (std::size_t k = 0; k < widths.size(); ++k) {
                        if (pg[k])
                            for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t i = 0; i < widths[k]; ++i) (*pg[k])[o * widths[k] + i] += g[o * row + off + i];
                        off += widths[k];
                    }
                });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
    const Shape& s = a.shape();
    if (axis >= s.size() || length == 0 || start + length > s[axis])
        fail("slice", "range [" + std::to_string(start) + ", +" + std::to_string(length) + ") on axis " +
                          std::to_string(axis) + " out of bounds for " + shape_to_string(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    Shape out_shape = s;
    out_shape[axis] = length;
    const std::size_t src_row = s[axis] * inner, dst_row = length * inner, off = start * inner;
    std::vector<double> y(outer * dst_row);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(a.values().data() + o * src_row + off, dst_row, y.data() + o * dst_row);
    return make("slice", {a}, std::move(out_shape), std::move(y),
                [outer, src_row, dst_row, off](std::span<const double> g, std::span<std::vector<double>*> pg) {
                    auto& ga = *pg[0];
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t i = 0; i < dst_row; ++i) ga[o * src_row + off + i] += g[o * dst_row + i];
                });
}

// ---------------------------------------------------------------------------
// Reductions and elementwise unary

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    return make("sum", {a}, {1}, {s}, [](std::span<const double> g, std::span<std::vector<double>*> pg) {
        for (auto& v : *pg[0]) v += g[0];
    });
}

Tensor mean(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    const double inv = 1.0 / static_cast<double>(a.size());
    return make("mean", {a}, {1}, {s * inv}, [inv](std::span<const double> g, std::span<std::vector<double>*> pg) {
        for (auto& v : *pg[0]) v += g[0] * inv;
    });
}

Tensor square(const Tensor& a) {
    return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
    return unary("sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor exp(const Tensor& a) {
    return unary("exp_elementwise", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

namespace {

// exp(x) for x <= 0 by ln2 range reduction and a degree-12 Taylor polynomial
// (relative error ~2e-16); written so that the tanh loop vectorizes.
inline double exp_nonpositive(double x) {
    x = std::max(x, -700.0);
    // Truncation of a non-positive value rounds toward zero: k = round(x / ln2).
    const double k = static_cast<double>(static_cast<std::int64_t>(x * 1.4426950408889634 - 0.5));
    const double r = (x - k * 0.6931471805599453) - k * 2.3190468138462996e-17;
    double p = 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    const auto bits = static_cast<std::uint64_t>(static_cast<std::int64_t>(k) + 1023) << 52;
    return p * std::bit_cast<double>(bits);
}

}  // namespace

Tensor tanh(const Tensor& a) {
    // Vectorizable exp-based form; libm tanh dominates MLP flows otherwise.
    const auto& x = a.values();
    const std::size_t n = x.size();
    std::vector<double> y(n);
    const double* xp = x.data();
    double* yp = y.data();
#pragma omp simd
    for (std::size_t i = 0; i < n; ++i) {
        const double ax = std::abs(xp[i]);
        const double e = exp_nonpositive(-2.0 * ax);
        const double t = ax < 1e-4 ? ax - ax * ax * ax / 3.0 : (1.0 - e) / (1.0 + e);
        yp[i] = xp[i] < 0.0 ? -t : t;
    }
    if (a.is_constant()) return Tensor::constant(a.shape(), std::move(y));
    auto ys = std::make_shared<const std::vector<double>>(y);
    return make("tanh", {a}, a.shape(), std::move(y), [ys](std::span<const double> g, std::span<std::vector<double>*> pg) {
        auto& ga = *pg[0];
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - (*ys)[i] * (*ys)[i]);
    });
}

Tensor leaky_relu(const Tensor& a, double slope) {
    return unary("leaky_relu", a, [slope](double x) { return x > 0.0 ? x : slope * x; },
                 [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    if (!(lo <= hi)) fail("clamp", "lo > hi");
    return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                 [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Image primitives

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride) {
    if (x.rank() != 3) fail("conv2d", "input must be [C,H,W], got " + shape_to_string(x.shape()));
    if (weight.rank() != 4 || weight.shape()[1] != x.shape()[0] || weight.shape()[2] != weight.shape()[3] ||
        weight.shape()[2] % 2 == 0)
        fail("conv2d", "weight " + shape_to_string(weight.shape()) + " incompatible with input " +
                           shape_to_string(x.shape()));
    if (bias.rank() != 1 || bias.shape()[0] != weight.shape()[0])
        fail("conv2d", "bias " + shape_to_string(bias.shape()) + " incompatible with weight " +
                           shape_to_string(weight.shape()));
    if (stride != 1 && stride != 2) fail("conv2d", "stride must be 1 or 2");

    const std::size_t cin = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const std::size_t cout = weight.shape()[0], k = weight.shape()[2], p = k / 2;
    const std::size_t s = static_cast<std::size_t>(stride);
    const std::size_t ho = (h + s - 1) / s, wo = (w + s - 1) / s;
    const std::size_t hp = h + 2 * p, wp = w + 2 * p;

    // Replicate-edge padded copy of the input.
    auto padded = std::make_shared<std::vector<double>>(cin * hp * wp);
    const auto& xv = x.values();
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t i = 0; i < hp; ++i) {
            std::size_t si = std::min(h - 1, static_cast<std::size_t>(std::max<long>(0, static_cast<long>(i) - static_cast<long>(p))));
            for (std::size_t j = 0; j < wp; ++j) {
                std::size_t sj = std::min(w - 1, static_cast<std::size_t>(std::max<long>(0, static_cast<long>(j) - static_cast<long>(p))));
                (*padded)[(c * hp + i) * wp + j] = xv[(c * h + si) * w + sj];
            }
        }

    // im2col: cols[(ci*k + ky)*k + kx, oy*wo + ox] = padded[ci, oy*s + ky, ox*s + kx].
    const std::size_t kk = cin * k * k, npix = ho * wo;
    auto cols = std::make_shared<std::vector<double>>(kk * npix);
    for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                double* crow = cols->data() + ((ci * k + ky) * k + kx) * npix;
                const double* in = padded->data() + ci * hp * wp;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const double* row = in + (oy * s + ky) * wp + kx;
                    for (std::size_t ox = 0; ox < wo; ++ox) crow[oy * wo + ox] = row[ox * s];
                }
            }
    std::vector<double> y(cout * npix);
    for (std::size_t co = 0; co < cout; ++co) std::fill_n(y.data() + co * npix, npix, bias[co]);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, int(cout), int(npix), int(kk), 1.0, weight.values().data(),
                int(kk), cols->data(), int(npix), 1.0, y.data(), int(npix));
    if (x.is_constant() && weight.is_constant() && bias.is_constant())
        return Tensor::constant({cout, ho, wo}, std::move(y));

    auto ws = share(weight);
    std::shared_ptr<const std::vector<double>> cols_in = cols;
    return make("conv2d", {x, weight, bias}, {cout, ho, wo}, std::move(y),
                [=](std::span<const double> g, std::span<std::vector<double>*> pg) {
                    if (pg[2])
                        for (std::size_t co = 0; co < cout; ++co) {
                            double acc = 0.0;
                            for (std::size_t i = 0; i < npix; ++i) acc += g[co * npix + i];
                            (*pg[2])[co] += acc;
                        }
                    if (pg[1])  // dW += G cols^T
                        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, int(cout), int(kk), int(npix), 1.0,
                                    g.data(), int(npix), cols_in->data(), int(npix), 1.0, pg[1]->data(), int(kk));
                    if (!pg[0]) return;
                    std::vector<double> dcols(kk * npix, 0.0);  // W^T G
                    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(kk), int(npix), int(cout), 1.0,
                                ws->data(), int(kk), g.data(), int(npix), 0.0, dcols.data(), int(npix));
                    std::vector<double> gpad(cin * hp * wp, 0.0);
                    for (std::size_t ci = 0; ci < cin; ++ci)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const double* crow = dcols.data() + ((ci * k + ky) * k + kx) * npix;
                                double* gin = gpad.data() + ci * hp * wp;
                                for (std::size_t oy = 0; oy < ho; ++oy) {
                                    double* row = gin + (oy * s + ky) * wp + kx;
                                    for (std::size_t ox = 0; ox < wo; ++ox) row[ox * s] += crow[oy * wo + ox];
                                }
                            }
                    auto& gx = *pg[0];
                    for (std::size_t c = 0; c < cin; ++c)
                        for (std::size_t i = 0; i < hp; ++i) {
                            std::size_t si = std::min(h - 1, static_cast<std::size_t>(std::max<long>(0, static_cast<long>(i) - static_cast<long>(p))));
                            for (std::size_t j = 0; j < wp; ++j) {
                                std::size_t sj = std::min(w - 1, static_cast<std::size_t>(std::max<long>(0, static_cast<long>(j) - static_cast<long>(p))));
                                gx[(c * h + si) * w + sj] += gpad[(c * hp + i) * wp + j];
                            }
                        }
                });
}

Tensor avg_pool2(const Tensor& x) {
    auto [c, h, w] = spatial_dims("avg_pool2", x.shape());
    if (h % 2 || w % 2) fail("avg_pool2", "spatial extents must be even, got " + shape_to_string(x.shape()));
    const std::size_t ho = h / 2, wo = w / 2;
    std::vector<double> y(c * ho * wo);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j) {
                const double* b = x.values().data() + (ch * h + 2 * i) * w + 2 * j;
                y[(ch * ho + i) * wo + j] = 0.25 * (b[0] + b[1] + b[w] + b[w + 1]);
            }
    return make("avg_pool2", {x}, with_spatial(x.shape(), ho, wo), std::move(y),
                [c, h, w, ho, wo](std::span<const double> g, std::span<std::vector<double>*> pg) {
                    auto& gx = *pg[0];
                    for (std::size_t ch = 0; ch < c; ++ch)
                        for (std::size_t i = 0; i < ho; ++i)
                            for (std::size_t j = 0; j < wo; ++j) {
                                double v = 0.25 * g[(ch * ho + i) * wo + j];
                                std::size_t b = (ch * h + 2 * i) * w + 2 * j;
                                gx[b] += v;
                                gx[b + 1] += v;
                                gx[b + w] += v;
                                gx[b + w + 1] += v;
                            }
                });
}

Tensor upsample2(const Tensor& x) {
    auto [c, h, w] = spatial_dims("upsample2", x.shape());
    const std::size_t ho = 2 * h, wo = 2 * w;
    std::vector<double> y(c * ho * wo);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j) y[(ch * ho + i) * wo + j] = x[(ch * h + i / 2) * w + j / 2];
    return make("upsample2", {x}, with_spatial(x.shape(), ho, wo), std::move(y),
                [c, h, w, ho, wo](std::span<const double> g, std::span<std::vector<double>*> pg) {
                    auto& gx = *pg[0];
                    for (std::size_t ch = 0; ch < c; ++ch)
                        for (std::size_t i = 0; i < ho; ++i)
                            for (std::size_t j = 0; j < wo; ++j) gx[(ch * h + i / 2) * w + j / 2] += g[(ch * ho + i) * wo + j];
                });
}

Tensor pad(const Tensor& x, std::size_t top, std::size_t bottom, std::size_t left, std::size_t right) {
    auto [c, h, w] = spatial_dims("pad", x.shape());
    const std::size_t ho = h + top + bottom, wo = w + left + right;
    std::vector<double> y(c * ho * wo, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
            std::copy_n(x.values().data() + (ch * h + i) * w, w, y.data() + (ch * ho + i + top) * wo + left);
    return make("pad", {x}, with_spatial(x.shape(), ho, wo), std::move(y),
                [=](std::span<const double> g, std::span<std::vector<double>*> pg) {
                    auto& gx = *pg[0];
                    for (std::size_t ch = 0; ch < c; ++ch)
                        for (std::size_t i = 0; i < h; ++i)
                            for (std::size_t j = 0; j < w; ++j) gx[(ch * h + i) * w + j] += g[(ch * ho + i + top) * wo + left + j];
                });
}

namespace {

// Row-normalized 1-D Gaussian filter matrix restricted to in-bounds taps:
// out[i] = sum_t weights[i][t] * in[i - radius + t].
struct BlurAxis {
    std::size_t n, radius;
    std::vector<double> weights;  // n x (2 radius + 1), zero for out-of-bounds taps

    BlurAxis(std::size_t n_, double sigma) : n(n_) {
        radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
        const std::size_t taps = 2 * radius + 1;
        std::vector<double> g(taps);
        for (std::size_t t = 0; t < taps; ++t) {
            double d = static_cast<double>(t) - static_cast<double>(radius);
            g[t] = std::exp(-0.5 * d * d / (sigma * sigma));
        }
        weights.assign(n * taps, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double z = 0.0;
            for (std::size_t t = 0; t < taps; ++t) {
                long src = static_cast<long>(i) - static_cast<long>(radius) + static_cast<long>(t);
                if (src >= 0 && src < static_cast<long>(n)) z += g[t];
            }
            for (std::size_t t = 0; t < taps; ++t) {
                long src = static_cast<long>(i) - static_cast<long>(radius) + static_cast<long>(t);
                if (src >= 0 && src < static_cast<long>(n)) weights[i * taps + t] = g[t] / z;
            }
        }
    }

    // Applies along an axis with element stride `step`, `count` independent lines
    // whose starts are given by line_start(l).
    template <class Start>
    void apply(const double* in, double* out, std::size_t count, std::size_t step, Start line_start, bool adjoint) const {
        const std::size_t taps = 2 * radius + 1;
        for (std::size_t l = 0; l < count; ++l) {
            const std::size_t base = line_start(l);
            for (std::size_t i = 0; i < n; ++i) {
                const double* wrow = weights.data() + i * taps;
                long first = static_cast<long>(i) - static_cast<long>(radius);
                std::size_t t0 = first < 0 ? static_cast<std::size_t>(-first) : 0;
                std::size_t t1 = std::min(taps, n + radius - i);
                if (!adjoint) {
                    double acc = 0.0;
                    for (std::size_t t = t0; t < t1; ++t) acc += wrow[t] * in[base + (i - radius + t) * step];
                    out[base + i * step] = acc;
                } else {
                    const double gi = in[base + i * step];
                    for (std::size_t t = t0; t < t1; ++t) out[base + (i - radius + t) * step] += wrow[t] * gi;
                }
            }
        }
    }
};

std::vector<double> blur_pass(const std::vector<double>& in, std::size_t c, std::size_t h, std::size_t w,
                              const BlurAxis& by, const BlurAxis& bx, bool adjoint) {
    std::vector<double> tmp(in.size(), 0.0), out(in.size(), 0.0);
    if (!adjoint) {
        bx.apply(in.data(), tmp.data(), c * h, 1, [w](std::size_t l) { return l * w; }, false);
        by.apply(tmp.data(), out.data(), c * w, w, [h, w](std::size_t l) { return (l / w) * h * w + l % w; }, false);
    } else {
        by.apply(in.data(), tmp.data(), c * w, w, [h, w](std::size_t l) { return (l / w) * h * w + l % w; }, true);
        bx.apply(tmp.data(), out.data(), c * h, 1, [w](std::size_t l) { return l * w; }, true);
    }
    return out;
}

}  // namespace

Tensor gaussian_blur(const Tensor& x, double sigma) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) fail("gaussian_blur", "sigma must be positive");
    auto [c, h, w] = spatial_dims("gaussian_blur", x.shape());
    auto by = std::make_shared<const BlurAxis>(h, sigma);
    auto bx = std::make_shared<const BlurAxis>(w, sigma);
    auto y = blur_pass(x.values(), c, h, w, *by, *bx, false);
    return make("gaussian_blur", {x}, x.shape(), std::move(y),
                [=](std::span<const double> g, std::span<std::vector<double>*> pg) {
                    std::vector<double> gv(g.begin(), g.end());
                    auto back = blur_pass(gv, c, h, w, *by, *bx, true);
                    auto& gx = *pg[0];
                    for (std::size_t i = 0; i < back.size(); ++i) gx[i] += back[i];
                });
}

Tensor grid_sample(const Tensor& field, const Tensor& coords) {
    if (field.rank() != 2 && field.rank() != 3)
        fail("grid_sample", "field must be [H,W] or [H,W,C], got " + shape_to_string(field.shape()));
    if (coords.rank() < 1 || coords.shape().back() != 2)
        fail("grid_sample", "coords must have trailing extent 2, got " + shape_to_string(coords.shape()));
    const std::size_t h = field.shape()[0], w = field.shape()[1];
    const std::size_t ch = field.rank() == 3 ? field.shape()[2] : 1;
    const std::size_t npts = coords.size() / 2;
    const auto& cv = coords.values();
    for (double v : cv)
        if (!std::isfinite(v)) fail("grid_sample", "non-finite coordinate");

    Shape out_shape(coords.shape().begin(), coords.shape().end() - 1);
    if (out_shape.empty()) out_shape.push_back(1);
    if (field.rank() == 3) out_shape.push_back(ch);

    // Per point: integer corner, fractional weights, and whether each axis was clamped.
    struct Sample {
        std::size_t x0, x1, y0, y1;
        double fx, fy;
        bool cx, cy;
    };
    auto samples = std::make_shared<std::vector<Sample>>(npts);
    const double wd = static_cast<double>(w), hd = static_cast<double>(h);
    for (std::size_t p = 0; p < npts; ++p) {
        double px = cv[2 * p] * wd - 0.5, py = cv[2 * p + 1] * hd - 0.5;
        Sample s{};
        s.cx = px < 0.0 || px > wd - 1.0;
        s.cy = py < 0.0 || py > hd - 1.0;
        px = std::clamp(px, 0.0, wd - 1.0);
        py = std::clamp(py, 0.0, hd - 1.0);
        // The last cell is [n-2, n-1] so a point on the far edge keeps a one-sided slope.
        double flx = std::min(std::floor(px), std::max(0.0, wd - 2.0));
        double fly = std::min(std::floor(py), std::max(0.0, hd - 2.0));
        s.x0 = static_cast<std::size_t>(flx);
        s.y0 = static_cast<std::size_t>(fly);
        s.x1 = std::min(s.x0 + 1, w - 1);
        s.y1 = std::min(s.y0 + 1, h - 1);
        s.fx = px - flx;
        s.fy = py - fly;
        (*samples)[p] = s;
    }
    const auto& fv = field.values();
    std::vector<double> y(npts * ch);
    for (std::size_t p = 0; p < npts; ++p) {
        const auto& s = (*samples)[p];
        for (std::size_t c = 0; c < ch; ++c) {
            double v00 = fv[(s.y0 * w + s.x0) * ch + c], v01 = fv[(s.y0 * w + s.x1) * ch + c];
            double v10 = fv[(s.y1 * w + s.x0) * ch + c], v11 = fv[(s.y1 * w + s.x1) * ch + c];
            y[p * ch + c] = (1 - s.fy) * ((1 - s.fx) * v00 + s.fx * v01) + s.fy * ((1 - s.fx) * v10 + s.fx * v11);
        }
    }
    if (field.is_constant() && coords.is_constant()) return Tensor::constant(std::move(out_shape), std::move(y));
    auto fs = share(field);
    return make("grid_sample", {field, coords}, std::move(out_shape), std::move(y),
                [=](std::span<const double> g, std::span<std::vector<double>*> pg) {
                    for (std::size_t p = 0; p < npts; ++p) {
                        const auto& s = (*samples)[p];
                        double gxc = 0.0, gyc = 0.0;
                        for (std::size_t c = 0; c < ch; ++c) {
                            const double go = g[p * ch + c];
                            if (pg[0]) {
                                auto& gf = *pg[0];
                                gf[(s.y0 * w + s.x0) * ch + c] += go * (1 - s.fy) * (1 - s.fx);
                                gf[(s.y0 * w + s.x1) * ch + c] += go * (1 - s.fy) * s.fx;
                                gf[(s.y1 * w + s.x0) * ch + c] += go * s.fy * (1 - s.fx);
                                gf[(s.y1 * w + s.x1) * ch + c] += go * s.fy * s.fx;
                            }
                            if (pg[1]) {
                                double v00 = (*fs)[(s.y0 * w + s.x0) * ch + c], v01 = (*fs)[(s.y0 * w + s.x1) * ch + c];
                                double v10 = (*fs)[(s.y1 * w + s.x0) * ch + c], v11 = (*fs)[(s.y1 * w + s.x1) * ch + c];
                                gxc += go * ((1 - s.fy) * (v01 - v00) + s.fy * (v11 - v10));
                                gyc += go * ((1 - s.fx) * (v10 - v00) + s.fx * (v11 - v01));
                            }
                        }
                        if (pg[1]) {
                            if (!s.cx) (*pg[1])[2 * p] += gxc * wd;
                            if (!s.cy) (*pg[1])[2 * p + 1] += gyc * hd;
                        }
                    }
                });
}

// ---------------------------------------------------------------------------
// Dispatch

Tensor primitive(std::string_view kind, std::span<const Tensor> in, const nlohmann::json& attrs) {
    auto need = [&](std::size_t n) {
        if (in.size() != n)
            fail(kind, "expected " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
    };
    auto num = [&](const char* key, double dflt) { return attrs.is_object() && attrs.contains(key) ? attrs.at(key).get<double>() : dflt; };
    auto idx = [&](const char* key, std::size_t dflt) {
        return attrs.is_object() && attrs.contains(key) ? attrs.at(key).get<std::size_t>() : dflt;
    };
    if (kind == "add") return need(2), add(in[0], in[1]);
    if (kind == "sub") return need(2), sub(in[0], in[1]);
    if (kind == "mul") return need(2), mul(in[0], in[1]);
    if (kind == "div") return need(2), div(in[0], in[1]);
    if (kind == "scalar_mul") return need(1), scalar_mul(in[0], num("c", 1.0));
    if (kind == "add_scalar") return need(1), add_scalar(in[0], num("c", 0.0));
    if (kind == "matmul") return need(2), matmul(in[0], in[1]);
    if (kind == "transpose") return need(1), transpose(in[0]);
    if (kind == "reshape") return need(1), reshape(in[0], attrs.at("shape").get<Shape>());
    if (kind == "concat") return concat(in, idx("axis", 0));
    if (kind == "slice") return need(1), slice(in[0], idx("axis", 0), idx("start", 0), attrs.at("length").get<std::size_t>());
    if (kind == "sum") return need(1), sum(in[0]);
    if (kind == "mean") return need(1), mean(in[0]);
    if (kind == "square") return need(1), square(in[0]);
    if (kind == "sqrt") return need(1), sqrt(in[0]);
    if (kind == "exp_elementwise") return need(1), exp(in[0]);
    if (kind == "tanh") return need(1), tanh(in[0]);
    if (kind == "leaky_relu") return need(1), leaky_relu(in[0], num("slope", 0.1));
    if (kind == "clamp") return need(1), clamp(in[0], num("lo", 0.0), num("hi", 1.0));
    if (kind == "conv2d") return need(3), conv2d(in[0], in[1], in[2], static_cast<int>(idx("stride", 1)));
    if (kind == "avg_pool2") return need(1), avg_pool2(in[0]);
    if (kind == "upsample2") return need(1), upsample2(in[0]);
    if (kind == "pad") {
        need(1);
        auto a = idx("amount", 0);
        return pad(in[0], idx("top", a), idx("bottom", a), idx("left", a), idx("right", a));
    }
    if (kind == "gaussian_blur") return need(1), gaussian_blur(in[0], num("sigma", 1.0));
    if (kind == "grid_sample") return need(2), grid_sample(in[0], in[1]);
    throw ShapeError("unknown primitive kind '" + std::string(kind) + "'");
}

}  // namespace icreg::ad
