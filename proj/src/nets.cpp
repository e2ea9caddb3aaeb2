#include "icreg/nets.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace icreg::nets {

namespace {

struct ConvShape {
    const char* name;
    std::size_t cin, cout;
};

// conv_matrix_net layers
constexpr ConvShape kMatrixNetConvs[] = {{"conv0", 2, 16}, {"conv1", 16, 32}, {"conv2", 32, 64}, {"conv3", 64, 128}};
constexpr std::size_t kMatrixNetFeatures = 128;

// small_unet layers (head added separately)
constexpr ConvShape kUnetConvs[] = {{"enc0", 2, 16}, {"enc1", 16, 32}, {"enc2", 32, 64}, {"dec1", 96, 32}, {"dec0", 48, 16}};
constexpr std::size_t kUnetHeadIn = 16;

std::vector<double> normal_values(std::mt19937_64& rng, std::size_t n, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

void add_conv(ParamStore& store, std::mt19937_64& rng, const std::string& prefix, const ConvShape& c) {
    const double stddev = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope) / static_cast<double>(c.cin * 9));
    store.add(prefix + c.name + ".weight", {c.cout, c.cin, 3, 3}, normal_values(rng, c.cout * c.cin * 9, stddev));
    store.add(prefix + c.name + ".bias", {c.cout}, std::vector<double>(c.cout, 0.0));
}

Tensor conv_layer(const ParamBinding& p, const std::string& prefix, const char* name, const Tensor& x, int stride,
                  bool activate = true) {
    Tensor y = ad::conv2d(x, p[prefix + name + ".weight"], p[prefix + name + ".bias"], stride);
    return activate ? ad::leaky_relu(y, kLeakySlope) : y;
}

Tensor cat(const Tensor& a, const Tensor& b, std::size_t axis) {
    Tensor parts[] = {a, b};
    return ad::concat(parts, axis);
}

}  // namespace

// ---------------------------------------------------------------------------
// Names

Family parse_family(const std::string& s) {
    if (s == "rigid") return Family::rigid;
    if (s == "affine") return Family::affine;
    if (s == "svf") return Family::svf;
    if (s == "mlp") return Family::mlp;
    throw std::invalid_argument("unknown family '" + s + "'");
}

Parameterization parse_parameterization(const std::string& s) {
    if (s == "antisymmetric") return Parameterization::antisymmetric;
    if (s == "exponential") return Parameterization::exponential;
    if (s == "direct") return Parameterization::direct;
    throw std::invalid_argument("unknown parameterization '" + s + "'");
}

BackboneKind parse_backbone(const std::string& s) {
    if (s == "conv_matrix_net") return BackboneKind::conv_matrix_net;
    if (s == "small_unet") return BackboneKind::small_unet;
    throw std::invalid_argument("unknown backbone '" + s + "'");
}

std::string to_string(Family f) {
    switch (f) {
        case Family::rigid: return "rigid";
        case Family::affine: return "affine";
        case Family::svf: return "svf";
        case Family::mlp: return "mlp";
    }
    return "?";
}

std::string to_string(Parameterization p) {
    switch (p) {
        case Parameterization::antisymmetric: return "antisymmetric";
        case Parameterization::exponential: return "exponential";
        case Parameterization::direct: return "direct";
    }
    return "?";
}

std::string to_string(BackboneKind b) {
    return b == BackboneKind::conv_matrix_net ? "conv_matrix_net" : "small_unet";
}

std::size_t mlp_packed_size(std::size_t dim) {
    return kMlpHidden * (dim + 1) + kMlpHidden * (kMlpHidden + 1) + dim * (kMlpHidden + 1);
}

// ---------------------------------------------------------------------------
// Backbone

Backbone::Backbone(BackboneKind kind, std::string prefix, std::size_t outputs)
    : kind_(kind), prefix_(std::move(prefix)), outputs_(outputs) {}

void Backbone::init(ParamStore& store, std::uint64_t seed, const std::vector<double>& head_bias_init) const {
    std::mt19937_64 rng(seed);
    std::vector<double> head_bias(outputs_, 0.0);
    for (std::size_t i = 0; i < head_bias_init.size() && i < outputs_; ++i) head_bias[i] = head_bias_init[i];
    if (kind_ == BackboneKind::conv_matrix_net) {
        for (const auto& c : kMatrixNetConvs) add_conv(store, rng, prefix_, c);
        store.add(prefix_ + "head.weight", {outputs_, kMatrixNetFeatures}, std::vector<double>(outputs_ * kMatrixNetFeatures, 0.0));
        store.add(prefix_ + "head.bias", {outputs_}, head_bias);
    } else {
        for (const auto& c : kUnetConvs) add_conv(store, rng, prefix_, c);
        store.add(prefix_ + "head.weight", {outputs_, kUnetHeadIn, 3, 3}, std::vector<double>(outputs_ * kUnetHeadIn * 9, 0.0));
        store.add(prefix_ + "head.bias", {outputs_}, head_bias);
    }
}

Tensor Backbone::forward(const ParamBinding& p, const Tensor& pair) const {
    if (pair.rank() != 3 || pair.shape()[0] != 2)
        throw ad::ShapeError("backbone: expected [2,H,W] input, got " + ad::shape_to_string(pair.shape()));
    if (kind_ == BackboneKind::conv_matrix_net) {
        Tensor x = pair;
        for (const auto& c : kMatrixNetConvs) x = conv_layer(p, prefix_, c.name, x, 2);
        const std::size_t hw = x.shape()[1] * x.shape()[2];
        Tensor pooled = ad::matmul(ad::reshape(x, {kMatrixNetFeatures, hw}),
                                   Tensor::full({hw, 1}, 1.0 / static_cast<double>(hw)));
        Tensor out = ad::add(ad::matmul(p[prefix_ + "head.weight"], pooled), ad::reshape(p[prefix_ + "head.bias"], {outputs_, 1}));
        return ad::reshape(out, {outputs_});
    }
    const std::size_t h = pair.shape()[1], w = pair.shape()[2];
    if (h % 4 || w % 4) throw ad::ShapeError("small_unet: extents must be multiples of 4, got " + ad::shape_to_string(pair.shape()));
    Tensor e0 = conv_layer(p, prefix_, "enc0", pair, 1);
    Tensor e1 = conv_layer(p, prefix_, "enc1", e0, 2);
    Tensor e2 = conv_layer(p, prefix_, "enc2", e1, 2);
    Tensor d1 = conv_layer(p, prefix_, "dec1", cat(ad::upsample2(e2), e1, 0), 1);
    Tensor d0 = conv_layer(p, prefix_, "dec0", cat(ad::upsample2(d1), e0, 0), 1);
    return ad::conv2d(d0, p[prefix_ + "head.weight"], p[prefix_ + "head.bias"], 1);
}

// ---------------------------------------------------------------------------
// StepNetwork

namespace {

std::size_t backbone_outputs(Family f, std::size_t dim) {
    switch (f) {
        case Family::rigid:
        case Family::affine: return dim * (dim + 1);
        case Family::svf: return dim;
        case Family::mlp: return mlp_packed_size(dim);
    }
    return 0;
}

}  // namespace

StepNetwork::StepNetwork(Family family, Parameterization param, BackboneKind backbone, int level, std::uint64_t seed,
                         std::string prefix, std::size_t dim)
    : family_(family), param_(param), level_(level), seed_(seed), dim_(dim),
      backbone_(backbone, std::move(prefix), backbone_outputs(family, dim)) {
    if (dim != 2) throw std::invalid_argument("step network: only 2-D images are supported");
    if (level < 0 || level > 2) throw std::invalid_argument("step network: level must be 0, 1 or 2");
    if (param == Parameterization::direct && (family == Family::svf || family == Family::mlp))
        throw std::invalid_argument("step network: direct parameterization requires a matrix family");
    if (family == Family::svf && backbone != BackboneKind::small_unet)
        throw std::invalid_argument("step network: svf family needs a small_unet backbone");
    if (family != Family::svf && backbone != BackboneKind::conv_matrix_net)
        throw std::invalid_argument("step network: " + to_string(family) + " family needs a conv_matrix_net backbone");
}

void StepNetwork::init(ParamStore& store) const {
    std::vector<double> head_bias;
    if (family_ == Family::mlp) {
        // Hidden layers get a random base so that the velocity MLP is not
        // degenerate; the output layer base stays zero (velocity 0).
        std::mt19937_64 rng(seed_ ^ 0x9e3779b97f4a7c15ull);
        const std::size_t n0 = kMlpHidden * (dim_ + 1), n1 = kMlpHidden * (kMlpHidden + 1);
        head_bias = normal_values(rng, n0, 1.0);
        auto l1 = normal_values(rng, n1, 1.0 / std::sqrt(static_cast<double>(kMlpHidden)));
        head_bias.insert(head_bias.end(), l1.begin(), l1.end());
    }
    backbone_.init(store, seed_, head_bias);
}

Tensor StepNetwork::raw_output(const ParamBinding& params, const Tensor& a, const Tensor& b) const {
    if (a.rank() != 2 || a.shape() != b.shape())
        throw ad::ShapeError("step network: image shapes " + ad::shape_to_string(a.shape()) + " and " +
                             ad::shape_to_string(b.shape()) + " differ or are not [H,W]");
    Tensor pa = a, pb = b;
    for (int l = 0; l < level_; ++l) {
        pa = ad::avg_pool2(pa);
        pb = ad::avg_pool2(pb);
    }
    const std::size_t h = pa.shape()[0], w = pa.shape()[1];
    Tensor pair = cat(ad::reshape(pa, {1, h, w}), ad::reshape(pb, {1, h, w}), 0);
    return backbone_.forward(params, pair);
}

lie::VelocityMlp StepNetwork::unpack_mlp(const Tensor& raw, double coefficient) const {
    lie::MlpTerm term;
    term.coefficient = coefficient;
    std::size_t offset = 0;
    const std::size_t widths[] = {dim_, kMlpHidden, kMlpHidden, dim_};
    for (int l = 0; l < 3; ++l) {
        const std::size_t out = widths[l + 1], in = widths[l] + 1;
        term.layers.push_back(ad::reshape(ad::slice(raw, 0, offset, out * in), {out, in}));
        offset += out * in;
    }
    return lie::VelocityMlp{{std::move(term)}};
}

lie::AlgebraElement StepNetwork::post_process(const Tensor& raw) const {
    if (family_ == Family::svf) {
        const std::size_t h = raw.shape()[1], w = raw.shape()[2];
        return lie::AlgebraElement::grid(ad::reshape(ad::transpose(ad::reshape(raw, {dim_, h * w})), {h, w, dim_}));
    }
    // Matrix families: [D, D+1] block, homogeneous row of zeros.
    Tensor block = ad::reshape(raw, {dim_, dim_ + 1});
    if (family_ == Family::rigid) {
        Tensor lin = ad::slice(block, 1, 0, dim_);
        Tensor skew = ad::scalar_mul(ad::sub(lin, ad::transpose(lin)), 0.5);
        block = cat(skew, ad::slice(block, 1, dim_, 1), 1);
    }
    return lie::AlgebraElement::matrix(cat(block, Tensor::zeros({1, dim_ + 1}), 0));
}

lie::AlgebraElement StepNetwork::algebra(const ParamBinding& params, const Tensor& a, const Tensor& b) const {
    Tensor ab = raw_output(params, a, b);
    if (family_ == Family::mlp) {
        lie::VelocityMlp v = unpack_mlp(ab, 1.0);
        if (param_ == Parameterization::antisymmetric) {
            // v(z) = N[A,B](z) - N[B,A](z): antisymmetry is over the MLP functions.
            auto neg = unpack_mlp(raw_output(params, b, a), -1.0);
            v.terms.push_back(std::move(neg.terms.front()));
        }
        return lie::AlgebraElement::mlp(std::move(v), dim_);
    }
    if (param_ == Parameterization::antisymmetric) return post_process(ad::sub(ab, raw_output(params, b, a)));
    return post_process(ab);
}

lie::Transform StepNetwork::forward(const ParamBinding& params, const Tensor& a, const Tensor& b,
                                    lie::ExpSettings settings) const {
    if (param_ == Parameterization::direct) {
        const lie::AlgebraElement element = algebra(params, a, b);
        const auto& g = std::get<lie::HomMatrix>(element.value());
        const std::size_t n = dim_ + 1;
        std::vector<double> eye(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
        return lie::Transform::direct_matrix(ad::add(g.matrix, Tensor::constant({n, n}, std::move(eye))));
    }
    return lie::Transform::exponential(algebra(params, a, b), 1.0, settings);
}

// ---------------------------------------------------------------------------
// Models

std::vector<const StepNetwork*> RegistrationModel::leaves() const {
    std::vector<const StepNetwork*> out;
    collect_leaves(out);
    return out;
}

void RegistrationModel::init(ParamStore& store) const {
    for (const auto* leaf : leaves()) leaf->init(store);
}

ModelOutput StepNode::forward(const ParamBinding& params, const Tensor& a, const Tensor& b) const {
    lie::AlgebraElement g = net_.algebra(params, a, b);
    ModelOutput out{lie::Transform::identity(2), {}};
    if (net_.parameterization() == Parameterization::direct) {
        out.transform = net_.forward(params, a, b, settings);
        return out;
    }
    if (const auto* v = std::get_if<lie::VelocityGrid>(&g.value())) out.velocity_fields.push_back(v->field);
    out.transform = lie::Transform::exponential(std::move(g), 1.0, settings);
    return out;
}

bool StepNode::yields_square_root() const { return true; }

std::string StepNode::describe() const {
    std::string s = to_string(net_.family());
    if (net_.parameterization() != Parameterization::antisymmetric) s += "/" + to_string(net_.parameterization());
    return s;
}

ModelOutput TwoStepNode::forward(const ParamBinding& params, const Tensor& a, const Tensor& b) const {
    ModelOutput o1 = first_->forward(params, a, b);
    ModelOutput o2 = rest_->forward(params, lie::warp_image(a, o1.transform), b);
    ModelOutput out{lie::compose(o1.transform, o2.transform), std::move(o1.velocity_fields)};
    out.velocity_fields.insert(out.velocity_fields.end(), o2.velocity_fields.begin(), o2.velocity_fields.end());
    return out;
}

void TwoStepNode::collect_leaves(std::vector<const StepNetwork*>& out) const {
    first_->collect_leaves(out);
    rest_->collect_leaves(out);
}

std::string TwoStepNode::describe() const { return "TwoStep{" + first_->describe() + ", " + rest_->describe() + "}"; }

TwoStepConsistentNode::TwoStepConsistentNode(ModelPtr first, ModelPtr rest)
    : first_(std::move(first)), rest_(std::move(rest)) {
    if (!first_ || !rest_) throw std::invalid_argument("TwoStepConsistent: missing child");
    if (!first_->yields_square_root())
        throw std::invalid_argument("TwoStepConsistent: first argument " + first_->describe() +
                                    " does not produce a transform with an explicit square root");
}

ModelOutput TwoStepConsistentNode::forward(const ParamBinding& params, const Tensor& a, const Tensor& b) const {
    ModelOutput o1 = first_->forward(params, a, b);
    const lie::Transform half = o1.transform.square_root();

    // B^ = B o sqrt(Phi[B,A]); with an antisymmetric first step Phi[B,A] = exp(-g).
    lie::Transform half_reverse = lie::Transform::identity(2);
    const auto* leaf = dynamic_cast<const StepNode*>(first_.get());
    if (leaf && leaf->network().parameterization() == Parameterization::antisymmetric)
        half_reverse = o1.transform.scaled(-0.5);
    else
        half_reverse = first_->forward(params, b, a).transform.square_root();

    ModelOutput o2 = rest_->forward(params, lie::warp_image(a, half), lie::warp_image(b, half_reverse));
    ModelOutput out{lie::compose(half, lie::compose(o2.transform, half)), std::move(o1.velocity_fields)};
    out.velocity_fields.insert(out.velocity_fields.end(), o2.velocity_fields.begin(), o2.velocity_fields.end());
    return out;
}

void TwoStepConsistentNode::collect_leaves(std::vector<const StepNetwork*>& out) const {
    first_->collect_leaves(out);
    rest_->collect_leaves(out);
}

std::string TwoStepConsistentNode::describe() const {
    return "TSC{" + first_->describe() + ", " + rest_->describe() + "}";
}

ModelPtr n_step_consistent(std::vector<ModelPtr> steps) {
    if (steps.empty()) throw std::invalid_argument("n_step_consistent: empty step list");
    ModelPtr acc = steps.back();
    for (std::size_t i = steps.size() - 1; i-- > 0;) acc = std::make_shared<TwoStepConsistentNode>(steps[i], acc);
    return acc;
}

// ---------------------------------------------------------------------------
// Descriptors

namespace {

ModelPtr build_node(const nlohmann::json& node, std::size_t& leaf_index, std::uint64_t base_seed,
                    const lie::ExpSettings& settings) {
    const std::string op = node.value("op", "step");
    if (op == "step") {
        const Family family = parse_family(node.at("family").get<std::string>());
        const auto param = parse_parameterization(node.value("parameterization", "antisymmetric"));
        const auto backbone = parse_backbone(
            node.value("backbone", family == Family::svf ? "small_unet" : "conv_matrix_net"));
        const int level = node.value("level", 0);
        const std::uint64_t seed = node.value("seed", base_seed + leaf_index);
        std::string prefix = "step" + std::to_string(leaf_index++) + ".";
        auto step = std::make_shared<StepNode>(StepNetwork(family, param, backbone, level, seed, std::move(prefix)));
        step->settings = settings;
        return step;
    }
    if (op == "two_step" || op == "tsc") {
        ModelPtr first = build_node(node.at("first"), leaf_index, base_seed, settings);
        ModelPtr rest = build_node(node.at("rest"), leaf_index, base_seed, settings);
        if (op == "two_step") return std::make_shared<TwoStepNode>(std::move(first), std::move(rest));
        return std::make_shared<TwoStepConsistentNode>(std::move(first), std::move(rest));
    }
    if (op == "nsc") {
        std::vector<ModelPtr> steps;
        for (const auto& s : node.at("steps")) steps.push_back(build_node(s, leaf_index, base_seed, settings));
        return n_step_consistent(std::move(steps));
    }
    throw std::invalid_argument("model descriptor: unknown op '" + op + "'");
}

nlohmann::json leaf(const std::string& family, int level, std::uint64_t seed,
                    const std::string& param = "antisymmetric") {
    return {{"op", "step"}, {"family", family}, {"parameterization", param}, {"level", level}, {"seed", seed}};
}

}  // namespace

ModelPtr build_model(const nlohmann::json& descriptor) {
    if (descriptor.value("version", 1) != 1) throw std::invalid_argument("model descriptor: unsupported version");
    if (descriptor.value("dim", 2) != 2) throw std::invalid_argument("model descriptor: only dim 2 is supported");
    lie::ExpSettings settings;
    if (descriptor.contains("exp")) {
        settings.squaring_steps = descriptor["exp"].value("squaring_steps", settings.squaring_steps);
        settings.rk4_steps = descriptor["exp"].value("rk4_steps", settings.rk4_steps);
    }
    std::size_t leaf_index = 0;
    return build_node(descriptor.at("tree"), leaf_index, descriptor.value("seed", std::uint64_t{0}), settings);
}

nlohmann::json zoo_descriptor(const std::string& name, std::uint64_t seed) {
    const std::uint64_t s = seed * 100;
    nlohmann::json tree;
    if (name == "rigid" || name == "affine" || name == "svf" || name == "mlp") {
        tree = leaf(name, 0, s);
    } else if (name == "tsc") {
        tree = {{"op", "tsc"}, {"first", leaf("mlp", 1, s)}, {"rest", leaf("svf", 0, s + 1)}};
    } else if (name == "nsc") {
        tree = {{"op", "nsc"},
                {"steps", {leaf("affine", 1, s), leaf("affine", 1, s + 1), leaf("svf", 1, s + 2), leaf("svf", 0, s + 3)}}};
    } else {
        throw std::invalid_argument("unknown zoo model '" + name + "'");
    }
    // Four RK4 steps keep the MLP flows affordable on a CPU; the velocities
    // these small networks produce are smooth enough for that step size.
    return {{"version", 1}, {"dim", 2},  {"name", name}, {"seed", s},
            {"tree", tree}, {"exp", {{"squaring_steps", 7}, {"rk4_steps", 4}}}};
}

nlohmann::json affine_grid_descriptor(Parameterization param, const std::string& composition, std::uint64_t seed) {
    const std::uint64_t s = seed * 100;
    const std::string p = to_string(param);
    nlohmann::json tree;
    if (composition == "one_step") {
        tree = leaf("affine", 0, s, p);
    } else if (composition == "two_step" || composition == "tsc") {
        tree = {{"op", composition}, {"first", leaf("affine", 0, s, p)}, {"rest", leaf("affine", 0, s + 1, p)}};
    } else {
        throw std::invalid_argument("unknown composition '" + composition + "'");
    }
    return {{"version", 1}, {"dim", 2}, {"name", p + "/" + composition}, {"seed", s}, {"tree", tree}};
}

}  // namespace icreg::nets
