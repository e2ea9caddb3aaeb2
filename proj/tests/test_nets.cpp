#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "icreg/data.hpp"
#include "icreg/lie.hpp"
#include "icreg/metrics.hpp"
#include "icreg/nets.hpp"
#include "support.hpp"

using namespace icreg;
using ad::Tensor;

namespace {

constexpr std::size_t kSize = 32;

bool has_grid_or_mlp(const nets::RegistrationModel& m) {
    for (const auto* leaf : m.leaves())
        if (leaf->family() == nets::Family::svf || leaf->family() == nets::Family::mlp) return true;
    return false;
}

// Adds noise to every parameter so that the heads are no longer zero.
void perturb(ParamStore& store, std::uint64_t seed, double scale) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    for (const auto& name : store.names())
        for (auto& v : store.at(name).value) v += n(rng);
}

double max_identity_deviation(const lie::Transform& t) {
    const auto f = t.position_field(kSize, kSize).values();
    const auto id = lie::identity_grid(kSize, kSize).values();
    double worst = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) worst = std::max(worst, std::abs(f[i] - id[i]));
    return worst;
}

struct Fixture {
    data::Dataset ds = data::gen_tri_circ(4, kSize, 11);
    Tensor a = ds.images[0].tensor(), b = ds.images[1].tensor();
};

}  // namespace

class ZooModel : public ::testing::TestWithParam<std::string> {};

TEST_P(ZooModel, InverseConsistentAndIdentityOnSelf) {
    const auto model = nets::build_model(nets::zoo_descriptor(GetParam(), 3));
    ParamStore store;
    model->init(store);
    Fixture f;
    const double bound = has_grid_or_mlp(*model) ? 5e-2 : 1e-10;
    for (int trial = 0; trial < 2; ++trial) {
        if (trial == 1) perturb(store, 5, 0.002);  // displacements of up to about a pixel
        const auto params = store.bind(nullptr);
        const auto ab = model->forward(params, f.a, f.b).transform;
        const auto ba = model->forward(params, f.b, f.a).transform;
        EXPECT_LT(metrics::inv_consistency_error(ab, ba, kSize, kSize), bound) << "trial " << trial;
        EXPECT_LT(max_identity_deviation(model->forward(params, f.a, f.a).transform), 1e-12) << "trial " << trial;
    }
    // The perturbation must actually produce a non-trivial transform.
    EXPECT_GT(max_identity_deviation(model->forward(store.bind(nullptr), f.a, f.b).transform), 1e-3);
}

INSTANTIATE_TEST_SUITE_P(Zoo, ZooModel, ::testing::ValuesIn(std::vector<std::string>{"rigid", "affine", "svf", "mlp",
                                                                                         "tsc", "nsc"}));

TEST(StepNetwork, AntisymmetricAlgebraNegatesUnderSwap) {
    Fixture f;
    for (auto family : {nets::Family::rigid, nets::Family::affine, nets::Family::svf}) {
        const auto backbone =
            family == nets::Family::svf ? nets::BackboneKind::small_unet : nets::BackboneKind::conv_matrix_net;
        nets::StepNetwork net(family, nets::Parameterization::antisymmetric, backbone, 0, 7, "s.");
        ParamStore store;
        net.init(store);
        perturb(store, 8, 0.05);
        const auto p = store.bind(nullptr);
        const auto gab = net.algebra(p, f.a, f.b), gba = net.algebra(p, f.b, f.a);
        const Tensor& x = family == nets::Family::svf ? std::get<lie::VelocityGrid>(gab.value()).field
                                                      : std::get<lie::HomMatrix>(gab.value()).matrix;
        const Tensor& y = family == nets::Family::svf ? std::get<lie::VelocityGrid>(gba.value()).field
                                                      : std::get<lie::HomMatrix>(gba.value()).matrix;
        for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i], -y[i]);
        if (family == nets::Family::rigid) {  // skew linear block, zero last row
            EXPECT_EQ(x[0], 0.0);
            EXPECT_EQ(x[4], 0.0);
            EXPECT_EQ(x[1], -x[3]);
        }
        if (family != nets::Family::svf)
            for (std::size_t j = 6; j < 9; ++j) EXPECT_EQ(x[j], 0.0);
    }
}

TEST(StepNetwork, ExponentialParameterizationIsNotInverseConsistent) {
    Fixture f;
    const auto model = nets::build_model(nets::affine_grid_descriptor(nets::Parameterization::exponential, "one_step", 2));
    ParamStore store;
    model->init(store);
    perturb(store, 9, 0.05);
    const auto p = store.bind(nullptr);
    EXPECT_GT(metrics::inv_consistency_error(model->forward(p, f.a, f.b).transform,
                                             model->forward(p, f.b, f.a).transform, kSize, kSize),
              1e-3);
}

TEST(Composition, TscOfAntisymmetricAffineIsInverseConsistent) {
    Fixture f;
    const auto model = nets::build_model(nets::affine_grid_descriptor(nets::Parameterization::antisymmetric, "tsc", 4));
    ParamStore store;
    model->init(store);
    perturb(store, 10, 0.05);
    const auto p = store.bind(nullptr);
    const auto ab = model->forward(p, f.a, f.b).transform, ba = model->forward(p, f.b, f.a).transform;
    EXPECT_LT(metrics::inv_consistency_error(ab, ba, kSize, kSize), 1e-10);

    const auto two = nets::build_model(nets::affine_grid_descriptor(nets::Parameterization::antisymmetric, "two_step", 4));
    const auto ab2 = two->forward(p, f.a, f.b).transform, ba2 = two->forward(p, f.b, f.a).transform;
    EXPECT_GT(metrics::inv_consistency_error(ab2, ba2, kSize, kSize), 1e-6);
}

TEST(Composition, TscNeedsASquareRoot) {
    const auto leaf = [](int seed) {
        return nlohmann::json{{"op", "step"},        {"family", "affine"}, {"parameterization", "antisymmetric"},
                              {"backbone", "conv_matrix_net"}, {"level", 0}, {"seed", seed}};
    };
    nlohmann::json bad = {{"version", 1},
                          {"tree", {{"op", "tsc"},
                                    {"first", {{"op", "two_step"}, {"first", leaf(1)}, {"rest", leaf(2)}}},
                                    {"rest", leaf(3)}}}};
    EXPECT_THROW(nets::build_model(bad), std::invalid_argument);
}

TEST(Composition, NestingOfOneStepIsTheStep) {
    const auto step = nets::build_model(nets::zoo_descriptor("affine", 1));
    EXPECT_EQ(nets::n_step_consistent({step}), step);
    EXPECT_THROW(nets::n_step_consistent({}), std::invalid_argument);
}

TEST(Descriptor, LeafNamingAndErrors) {
    const auto model = nets::build_model(nets::zoo_descriptor("nsc", 1));
    const auto leaves = model->leaves();
    ASSERT_EQ(leaves.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(leaves[i]->prefix(), "step" + std::to_string(i) + ".");
    EXPECT_EQ(nets::build_model(nets::zoo_descriptor("mlp", 1))->settings.rk4_steps, 4);

    EXPECT_THROW(nets::zoo_descriptor("nope", 1), std::invalid_argument);
    EXPECT_THROW(nets::build_model({{"version", 2}, {"tree", {{"op", "step"}}}}), std::invalid_argument);
    EXPECT_THROW(nets::build_model({{"version", 1}, {"tree", {{"op", "fold"}}}}), std::invalid_argument);
    EXPECT_THROW(nets::parse_family("spline"), std::invalid_argument);
    EXPECT_THROW(nets::StepNetwork(nets::Family::svf, nets::Parameterization::direct, nets::BackboneKind::small_unet, 0,
                                   1, "x."),
                 std::invalid_argument);
}

TEST(Backbone, HeadStartsAtZero) {
    Fixture f;
    nets::Backbone net(nets::BackboneKind::conv_matrix_net, "b.", 6);
    ParamStore store;
    net.init(store, 1);
    Tensor parts[] = {ad::reshape(f.a, {1, kSize, kSize}), ad::reshape(f.b, {1, kSize, kSize})};
    const auto out = net.forward(store.bind(nullptr), ad::concat(parts, 0));
    EXPECT_EQ(out.shape(), (ad::Shape{6}));
    for (double v : out.values()) EXPECT_EQ(v, 0.0);

    nets::Backbone unet(nets::BackboneKind::small_unet, "u.", 2);
    unet.init(store, 2);
    EXPECT_EQ(unet.forward(store.bind(nullptr), ad::concat(parts, 0)).shape(), (ad::Shape{2, kSize, kSize}));
}

TEST(StepNetwork, ParameterGradientMatchesDirectionalDifference) {
    // d/dh of a scalar functional of the output transform along a random parameter direction.
    Fixture f;
    const auto model = nets::build_model(nets::zoo_descriptor("mlp", 2));
    ParamStore store;
    model->init(store);
    perturb(store, 12, 0.02);
    const auto pts = check::random_tensor({10, 2}, 13, 0.2, 0.8);
    const auto weights = check::random_tensor({10, 2}, 14);
    auto objective = [&](const ParamBinding& p) {
        return ad::sum(ad::mul(model->forward(p, f.a, f.b).transform.apply(pts), weights));
    };
    ad::Tape tape;
    const auto bound = store.bind(&tape);
    const auto grads = ad::backprop(objective(bound));

    std::mt19937_64 rng(15);
    std::normal_distribution<double> n(0.0, 1.0);
    std::map<std::string, std::vector<double>> dir;
    double analytic = 0.0;
    for (const auto& name : store.names()) {
        auto& d = dir[name];
        const auto g = grads.of(bound[name]);
        for (std::size_t i = 0; i < g.size(); ++i) {
            d.push_back(n(rng));
            analytic += g[i] * d.back();
        }
    }
    auto shifted = [&](double h) {
        ParamStore s = store;
        for (const auto& name : s.names())
            for (std::size_t i = 0; i < dir[name].size(); ++i) s.at(name).value[i] += h * dir[name][i];
        return objective(s.bind(nullptr)).item();
    };
    const double h = 1e-6;
    const double fd = (shifted(h) - shifted(-h)) / (2 * h);
    EXPECT_LT(std::abs(analytic - fd) / std::abs(fd), 1e-5);
}
