#pragma once

// Lie algebra elements, their exponentials, and composable transforms over
// normalized coordinates in [0,1]^D.
//
// Warp convention: compose(first, second) maps x to first(second(x)), and
// warping image I by T samples I at T(x). So I o Phi o Psi is
// warp_image(I, compose(Phi, Psi)).

#include <memory>
#include <optional>
#include <variant>
#include <vector>

#include "icreg/autodiff.hpp"

namespace icreg::lie {

using ad::Tensor;

/// (D+1)x(D+1) homogeneous matrix in the affine algebra (last row zero).
struct HomMatrix {
    Tensor matrix;
};

/// Stationary velocity field [H,W,D] of displacements in normalized units.
struct VelocityGrid {
    Tensor field;
};

/// A coordinate MLP z -> W_n(tanh(... tanh(W_1 [z;1]) ...)) with each layer
/// stored as an augmented [out, in+1] matrix (bias in the last column).
struct MlpTerm {
    double coefficient = 1.0;
    std::vector<Tensor> layers;
};

/// Velocity v(z) = sum_k coefficient_k * mlp_k(z).
struct VelocityMlp {
    std::vector<MlpTerm> terms;
};

class AlgebraElement {
  public:
    using Variant = std::variant<HomMatrix, VelocityGrid, VelocityMlp>;

    AlgebraElement(Variant v, std::size_t dim);

    static AlgebraElement matrix(Tensor m);
    static AlgebraElement grid(Tensor field);
    static AlgebraElement mlp(VelocityMlp v, std::size_t dim);

    std::size_t dim() const { return dim_; }
    const Variant& value() const { return value_; }

    /// s * g, exact: a scalar multiple of the tensors (or of the MLP coefficients).
    AlgebraElement scaled(double s) const;

  private:
    Variant value_;
    std::size_t dim_;
};

struct ExpSettings {
    int squaring_steps = 7;
    int rk4_steps = 16;
};

/// Matrix exponential by scaling to 1-norm <= 0.5, an 18-term Taylor series
/// and repeated squaring. Built from tape primitives.
Tensor mat_exp(const Tensor& m);

/// Scaling and squaring of a velocity grid; returns the [H,W,D] position field
/// over the identity grid of the same extents.
Tensor svf_exp(const Tensor& velocity, int squaring_steps);

/// Integrates dz/dt = v(z) from t=0 to 1 with classical RK4. points: [N,D].
Tensor rk4_flow(const VelocityMlp& velocity, int steps, const Tensor& points);

/// Evaluates v(points) for an MLP velocity.
Tensor eval_mlp(const VelocityMlp& velocity, const Tensor& points);

/// [H,W,2] tensor with entry (i,j) = ((j+0.5)/W, (i+0.5)/H).
Tensor identity_grid(std::size_t height, std::size_t width);

class Transform {
  public:
    /// exp(scale * g).
    static Transform exponential(AlgebraElement g, double scale = 1.0, ExpSettings settings = {});
    /// A homogeneous matrix used directly as the transform (no exponential).
    /// Its square root is available in closed form for D = 2.
    static Transform direct_matrix(Tensor m);
    static Transform identity(std::size_t dim);

    std::size_t dim() const;
    bool can_apply() const { return true; }
    /// True only for exponential transforms.
    bool can_scale_algebra() const;
    /// True when square_root() is available.
    bool has_square_root() const;
    bool is_identity() const;

    /// Exponential transforms only: exp(factor * s * g).
    Transform scaled(double factor) const;
    /// exp(g/2) for exponential transforms, principal root for direct 2-D matrices.
    Transform square_root() const;

    const AlgebraElement* algebra() const;
    double algebra_scale() const;

    /// points: [..., D] -> [..., D].
    Tensor apply(const Tensor& points) const;

    /// Dense [H,W,D] position field T(identity grid).
    Tensor position_field(std::size_t height, std::size_t width) const;

    struct Impl;
    explicit Transform(std::shared_ptr<const Impl> impl) : impl_(std::move(impl)) {}

  private:
    friend Transform compose(const Transform&, const Transform&);
    std::shared_ptr<const Impl> impl_;
};

/// x -> first(second(x)). Throws std::invalid_argument on dimension mismatch.
Transform compose(const Transform& first, const Transform& second);

/// Samples image [H,W] at T(identity grid).
Tensor warp_image(const Tensor& image, const Transform& transform);

}  // namespace icreg::lie
