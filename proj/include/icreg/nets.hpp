#pragma once

// Step networks that emit Lie algebra elements from an image pair, and the
// composition operators that build multi-step registration models from them.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icreg/autodiff.hpp"
#include "icreg/lie.hpp"
#include "icreg/params.hpp"

namespace icreg::nets {

using ad::Tensor;

enum class Family { rigid, affine, svf, mlp };

/// How the backbone output becomes a transform:
///   antisymmetric  exp(N[A,B] - N[B,A])
///   exponential    exp(N[A,B])
///   direct         the homogeneous matrix I + N[A,B] (matrix families only)
enum class Parameterization { antisymmetric, exponential, direct };

enum class BackboneKind { conv_matrix_net, small_unet };

Family parse_family(const std::string& s);
Parameterization parse_parameterization(const std::string& s);
BackboneKind parse_backbone(const std::string& s);
std::string to_string(Family f);
std::string to_string(Parameterization p);
std::string to_string(BackboneKind b);

inline constexpr double kLeakySlope = 0.1;
inline constexpr std::size_t kMlpHidden = 16;

/// Number of scalars packed into an MLP velocity (D -> 16 -> 16 -> D,
/// augmented [out, in+1] layers in order).
std::size_t mlp_packed_size(std::size_t dim);

/// Convolutional backbone over a two-channel [2,H,W] input.
///
/// conv_matrix_net: four 3x3 stride-2 convolutions (16/32/64/128 channels,
/// leaky ReLU), global average pooling and a dense head with `outputs` values.
///
/// small_unet: three-level encoder (16/32/64 channels), nearest-upsampling
/// decoder with concatenated skips, and a 3x3 head with `outputs` channels.
///
/// The head starts at zero weight and bias, except for `head_bias_init`
/// entries that are copied into the head bias.
class Backbone {
  public:
    Backbone(BackboneKind kind, std::string prefix, std::size_t outputs);

    BackboneKind kind() const { return kind_; }
    std::size_t outputs() const { return outputs_; }
    const std::string& prefix() const { return prefix_; }

    void init(ParamStore& store, std::uint64_t seed, const std::vector<double>& head_bias_init = {}) const;
    /// conv_matrix_net: [outputs]; small_unet: [outputs, H, W].
    Tensor forward(const ParamBinding& params, const Tensor& pair) const;

  private:
    BackboneKind kind_;
    std::string prefix_;
    std::size_t outputs_;
};

/// One registration step: backbone + family-specific post-processing.
class StepNetwork {
  public:
    StepNetwork(Family family, Parameterization param, BackboneKind backbone, int level, std::uint64_t seed,
                std::string prefix, std::size_t dim = 2);

    Family family() const { return family_; }
    Parameterization parameterization() const { return param_; }
    int level() const { return level_; }
    const Backbone& backbone() const { return backbone_; }
    const std::string& prefix() const { return backbone_.prefix(); }
    std::uint64_t seed() const { return seed_; }

    void init(ParamStore& store) const;

    /// Backbone output on (A, B) at this step's working resolution.
    Tensor raw_output(const ParamBinding& params, const Tensor& a, const Tensor& b) const;

    /// g(A,B) = N[A,B] - N[B,A] followed by family post-processing (skew
    /// projection for rigid, zero homogeneous row for matrices). For the
    /// exponential parameterization this is N[A,B] alone.
    lie::AlgebraElement algebra(const ParamBinding& params, const Tensor& a, const Tensor& b) const;

    lie::Transform forward(const ParamBinding& params, const Tensor& a, const Tensor& b,
                           lie::ExpSettings settings = {}) const;

  private:
    lie::AlgebraElement post_process(const Tensor& raw) const;
    lie::VelocityMlp unpack_mlp(const Tensor& raw, double coefficient) const;

    Family family_;
    Parameterization param_;
    int level_;
    std::uint64_t seed_;
    std::size_t dim_;
    Backbone backbone_;
};

struct ModelOutput {
    lie::Transform transform;
    /// Velocity grids of the SVF steps that produced the transform (regularized in training).
    std::vector<Tensor> velocity_fields;
};

class RegistrationModel {
  public:
    virtual ~RegistrationModel() = default;
    virtual ModelOutput forward(const ParamBinding& params, const Tensor& a, const Tensor& b) const = 0;
    /// True when the output transform has an explicit square root.
    virtual bool yields_square_root() const = 0;
    virtual void collect_leaves(std::vector<const StepNetwork*>& out) const = 0;
    virtual std::string describe() const = 0;

    std::vector<const StepNetwork*> leaves() const;
    void init(ParamStore& store) const;

    lie::ExpSettings settings;
};

using ModelPtr = std::shared_ptr<const RegistrationModel>;

class StepNode final : public RegistrationModel {
  public:
    explicit StepNode(StepNetwork net) : net_(std::move(net)) {}
    ModelOutput forward(const ParamBinding& params, const Tensor& a, const Tensor& b) const override;
    bool yields_square_root() const override;
    void collect_leaves(std::vector<const StepNetwork*>& out) const override { out.push_back(&net_); }
    std::string describe() const override;
    const StepNetwork& network() const { return net_; }

  private:
    StepNetwork net_;
};

/// Phi[A,B] o Psi[A o Phi[A,B], B].
class TwoStepNode final : public RegistrationModel {
  public:
    TwoStepNode(ModelPtr first, ModelPtr rest) : first_(std::move(first)), rest_(std::move(rest)) {}
    ModelOutput forward(const ParamBinding& params, const Tensor& a, const Tensor& b) const override;
    bool yields_square_root() const override { return false; }
    void collect_leaves(std::vector<const StepNetwork*>& out) const override;
    std::string describe() const override;

  private:
    ModelPtr first_, rest_;
};

/// sqrt(Phi[A,B]) o Psi[A^, B^] o sqrt(Phi[A,B]) with A^ = A o sqrt(Phi[A,B])
/// and B^ = B o sqrt(Phi[B,A]).
class TwoStepConsistentNode final : public RegistrationModel {
  public:
    /// Throws std::invalid_argument unless first yields a square root.
    TwoStepConsistentNode(ModelPtr first, ModelPtr rest);
    ModelOutput forward(const ParamBinding& params, const Tensor& a, const Tensor& b) const override;
    bool yields_square_root() const override { return false; }
    void collect_leaves(std::vector<const StepNetwork*>& out) const override;
    std::string describe() const override;

  private:
    ModelPtr first_, rest_;
};

/// Right fold of TwoStepConsistent; a single step is returned unchanged.
ModelPtr n_step_consistent(std::vector<ModelPtr> steps);

/// Builds a model from a descriptor JSON:
///   {"version":1, "dim":2, "tree": node}
///   node := {"op":"step", "family", "parameterization", "backbone", "level", "seed"}
///         | {"op":"two_step"|"tsc", "first": node, "rest": node}
///         | {"op":"nsc", "steps": [node, ...]}
/// Leaves are named step0., step1., ... in depth-first order.
ModelPtr build_model(const nlohmann::json& descriptor);

/// Descriptors for the named example models: rigid, affine, svf, mlp,
/// tsc (TSC{mlp, svf}), nsc (NSC{affine, affine, svf, svf}).
nlohmann::json zoo_descriptor(const std::string& name, std::uint64_t seed);

/// Affine model for the parameterization x composition grid.
/// composition: "one_step" | "two_step" | "tsc".
nlohmann::json affine_grid_descriptor(Parameterization param, const std::string& composition, std::uint64_t seed);

}  // namespace icreg::nets
