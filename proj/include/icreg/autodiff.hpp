#pragma once

// Reverse-mode automatic differentiation over dense row-major double arrays.
//
// A Tape records every primitive evaluated on tensors that belong to it.
// Tensors with no tape are constants: operations on constants only are
// evaluated eagerly and recorded nowhere, which is how models are evaluated
// without gradients.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace icreg::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Thrown for malformed primitive inputs (shapes, attributes, kinds).
class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class Tape;

/// Immutable n-d array, optionally attached to a node of a Tape.
class Tensor {
  public:
    Tensor() = default;

    static Tensor constant(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);
    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_ ? data_->size() : 0; }
    std::span<const double> data() const;
    const std::vector<double>& values() const;
    double operator[](std::size_t i) const { return (*data_)[i]; }
    double item() const;

    Tape* tape() const { return tape_; }
    int node() const { return node_; }
    bool is_constant() const { return tape_ == nullptr; }
    bool defined() const { return static_cast<bool>(data_); }

    /// Same values, detached from any tape.
    Tensor detached() const;
    std::shared_ptr<const std::vector<double>> storage() const { return data_; }

  private:
    friend class Tape;
    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

/// Accumulates the vector-Jacobian product into parent gradient buffers.
/// parent_grads[k] is null when parent k is a constant.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<std::vector<double>*> parent_grads)>;

class Gradients;

class Tape {
  public:
    struct Node {
        std::string kind;
        std::vector<int> parents;  // -1 for constant inputs
        Shape shape;
        BackwardFn backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// New leaf node holding the given values.
    Tensor variable(Shape shape, std::vector<double> values);
    Tensor variable(const Tensor& value);

    /// Records a primitive output. Parents are the node ids of inputs that
    /// live on this tape.
    Tensor record(std::string kind, std::span<const Tensor> inputs, Shape shape,
                  std::vector<double> values, BackwardFn backward);

    std::size_t size() const { return nodes_.size(); }
    const Node& node(std::size_t id) const { return nodes_.at(id); }

  private:
    std::vector<Node> nodes_;
};

/// Result of backprop: one gradient array per tape node.
class Gradients {
  public:
    explicit Gradients(std::vector<std::vector<double>> per_node, std::vector<Shape> shapes)
        : grads_(std::move(per_node)), shapes_(std::move(shapes)) {}

    /// Gradient with respect to t; all zeros when t did not influence the loss.
    std::vector<double> of(const Tensor& t) const;
    const std::vector<double>& node(std::size_t id) const { return grads_.at(id); }
    std::size_t size() const { return grads_.size(); }

  private:
    std::vector<std::vector<double>> grads_;
    std::vector<Shape> shapes_;
};

Gradients backprop(const Tensor& loss);

// ---------------------------------------------------------------------------
// Primitives. Every function records a node when any input is on a tape.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.1);
Tensor clamp(const Tensor& a, double lo, double hi);

/// x: [Cin,H,W], weight: [Cout,Cin,k,k] (k odd), bias: [Cout].
/// Same padding with replicated edges; output extent ceil(H/stride).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride);
/// 2x2 mean pooling over the last two axes of [H,W] or [C,H,W]; extents must be even.
Tensor avg_pool2(const Tensor& x);
/// Nearest-neighbour 2x upsampling over the last two axes.
Tensor upsample2(const Tensor& x);
/// Zero padding of the last two axes.
Tensor pad(const Tensor& x, std::size_t top, std::size_t bottom, std::size_t left, std::size_t right);
/// Separable Gaussian filter over the last two axes; taps truncated at
/// ceil(3 sigma) and renormalized over the in-bounds part of the window.
Tensor gaussian_blur(const Tensor& x, double sigma);

/// Bilinear sampling of field [H,W] or [H,W,C] at coords [..., 2] holding
/// normalized (x, y) positions with pixel centers at ((j+0.5)/W, (i+0.5)/H).
/// Positions outside the image are clamped to the border.
/// Output shape is coords.shape()[:-1] (+ [C]).
Tensor grid_sample(const Tensor& field, const Tensor& coords);

/// Generic dispatch by primitive name. Attributes are read from a JSON
/// object (e.g. {"stride":2}, {"slope":0.1}, {"sigma":5}).
Tensor primitive(std::string_view kind, std::span<const Tensor> inputs, const nlohmann::json& attrs);

// Convenience operators.
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double c, const Tensor& a) { return scalar_mul(a, c); }

}  // namespace icreg::ad
