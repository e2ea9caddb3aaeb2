#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "icreg/lie.hpp"
#include "icreg/metrics.hpp"
#include "support.hpp"

using namespace icreg;
using ad::Tensor;

namespace {

// Direct 2-D windowed sums with the truncated, renormalized Gaussian.
double lncc_oracle(const std::vector<double>& a, const std::vector<double>& b, std::size_t h, std::size_t w,
                   double sigma) {
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    double total = 0.0;
    for (int i = 0; i < static_cast<int>(h); ++i)
        for (int j = 0; j < static_cast<int>(w); ++j) {
            double sw = 0, sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
            for (int di = -r; di <= r; ++di)
                for (int dj = -r; dj <= r; ++dj) {
                    const int y = i + di, x = j + dj;
                    if (y < 0 || x < 0 || y >= static_cast<int>(h) || x >= static_cast<int>(w)) continue;
                    const double g = std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
                    const double va = a[y * w + x], vb = b[y * w + x];
                    sw += g, sa += g * va, sb += g * vb;
                    saa += g * va * va, sbb += g * vb * vb, sab += g * va * vb;
                }
            const double ma = sa / sw, mb = sb / sw;
            const double cov = sab / sw - ma * mb;
            const double var_a = saa / sw - ma * ma, var_b = sbb / sw - mb * mb;
            total += cov / std::sqrt((var_a + metrics::kLnccEpsilon) * (var_b + metrics::kLnccEpsilon));
        }
    return total / static_cast<double>(h * w);
}

Tensor field_from(std::size_t h, std::size_t w, double (*fx)(double, double), double (*fy)(double, double)) {
    std::vector<double> v;
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const double x = (j + 0.5) / w, y = (i + 0.5) / h;
            v.push_back(fx(x, y));
            v.push_back(fy(x, y));
        }
    return Tensor::constant({h, w, 2}, v);
}

lie::Transform matrix_transform(std::vector<double> m) {
    return lie::Transform::direct_matrix(Tensor::constant({3, 3}, std::move(m)));
}

}  // namespace

TEST(Lncc, MatchesBruteForceWindowedOracle) {
    const std::size_t h = 12, w = 10;
    const auto a = check::random_values(h * w, 1, 0.0, 1.0), b = check::random_values(h * w, 2, 0.0, 1.0);
    for (double sigma : {1.0, 2.5, 5.0}) {
        const double got = metrics::lncc(Tensor::constant({h, w}, a), Tensor::constant({h, w}, b), sigma).item();
        EXPECT_NEAR(got, lncc_oracle(a, b, h, w, sigma), 1e-12) << "sigma=" << sigma;
    }
}

TEST(Lncc, SelfSimilarityAndSymmetry) {
    const auto a = check::random_tensor({32, 32}, 3, 0.0, 1.0), b = check::random_tensor({32, 32}, 4, 0.0, 1.0);
    EXPECT_GE(metrics::lncc(a, a, 5.0).item(), 0.999);
    EXPECT_NEAR(metrics::lncc(a, b, 5.0).item(), metrics::lncc(b, a, 5.0).item(), 1e-12);
    // Intensity-affine invariance up to the epsilon regularizer.
    const auto scaled = ad::add_scalar(ad::scalar_mul(a, 3.0), 0.2);
    EXPECT_GE(metrics::lncc(a, scaled, 5.0).item(), 0.999);
    EXPECT_LE(metrics::lncc(a, ad::scalar_mul(a, -1.0), 5.0).item(), -0.999);
}

TEST(Lncc, GradientMatchesFiniteDifferences) {
    const auto a = check::random_tensor({8, 8}, 5, 0.0, 1.0), b = check::random_tensor({8, 8}, 6, 0.0, 1.0);
    const auto err =
        check::gradient_error([](std::span<const Tensor> x) { return metrics::lncc(x[0], x[1], 2.0); }, {a, b});
    EXPECT_LT(err, 1e-5);
}

TEST(Lncc, RejectsBadInputs) {
    EXPECT_THROW(metrics::lncc(Tensor::zeros({4, 4}), Tensor::zeros({4, 5}), 1.0), ad::ShapeError);
    EXPECT_THROW(metrics::lncc(Tensor::zeros({4, 4}), Tensor::zeros({4, 4}), 0.0), std::invalid_argument);
}

TEST(BendingEnergy, QuadraticAndAffineFields) {
    const auto quad = field_from(16, 16, [](double x, double) { return x * x; }, [](double, double) { return 0.0; });
    EXPECT_NEAR(metrics::bending_energy(quad).item(), 4.0, 1e-9);
    const auto mixed = field_from(16, 16, [](double, double) { return 0.0; }, [](double x, double y) { return x * y; });
    EXPECT_NEAR(metrics::bending_energy(mixed).item(), 2.0, 1e-9);  // d2/dxdy = 1, counted twice
    const auto affine =
        field_from(16, 16, [](double x, double y) { return 0.3 * x - 0.2 * y + 0.1; }, [](double x, double) { return -x; });
    EXPECT_NEAR(metrics::bending_energy(affine).item(), 0.0, 1e-9);
}

TEST(BendingEnergy, GradientMatchesFiniteDifferences) {
    const auto v = check::random_tensor({6, 7, 2}, 7, -0.01, 0.01);
    const auto err = check::gradient_error([](std::span<const Tensor> x) { return metrics::bending_energy(x[0]); }, {v});
    EXPECT_LT(err, 1e-5);
    EXPECT_THROW(metrics::bending_energy(Tensor::zeros({2, 5, 2})), ad::ShapeError);
}

TEST(JacobianStats, IdentityHasUnitDeterminant) {
    const auto s = metrics::jacobian_stats(lie::Transform::identity(2), 32, 32);
    EXPECT_EQ(s.pct_negative, 0.0);
    EXPECT_EQ(s.rows, 28u);
    EXPECT_EQ(s.determinants.size(), 28u * 28u);
    for (double d : s.determinants) EXPECT_NEAR(d, 1.0, 1e-12);
    EXPECT_NEAR(s.mean_determinant, 1.0, 1e-12);
}

TEST(JacobianStats, ReflectionIsFullyNegative) {
    const auto s = metrics::jacobian_stats(matrix_transform({1, 0, 0, 0, -1, 1, 0, 0, 1}), 32, 32);
    EXPECT_EQ(s.pct_negative, 100.0);
    EXPECT_NEAR(s.mean_determinant, -1.0, 1e-12);
    const auto scaled = metrics::jacobian_stats(matrix_transform({2, 0, 0, 0, 1.5, 0, 0, 0, 1}), 20, 24);
    EXPECT_NEAR(scaled.mean_determinant, 3.0, 1e-12);
}

TEST(Dice, HandAndCountingOracles) {
    const std::vector<int> a = {1, 1, 0, 0}, b = {0, 1, 1, 0};
    EXPECT_EQ(metrics::dice(a, b), 0.5);
    EXPECT_EQ(metrics::dice(a, a), 1.0);
    const std::vector<int> none = {0, 0, 0, 0};
    EXPECT_EQ(metrics::dice(a, none), 0.0);
    EXPECT_EQ(metrics::dice(none, none), 1.0);

    std::mt19937 rng(9);
    std::vector<int> x(500), y(500);
    for (auto& v : x) v = static_cast<int>(rng() % 3);  // nonzero labels all count as foreground
    for (auto& v : y) v = static_cast<int>(rng() % 2);
    int nx = 0, ny = 0, both = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        nx += x[i] != 0, ny += y[i] != 0, both += x[i] != 0 && y[i] != 0;
    }
    EXPECT_EQ(metrics::dice(x, y), 2.0 * both / (nx + ny));
    EXPECT_THROW(metrics::dice(a, x), std::invalid_argument);
}

TEST(Mtre, PixelDistances) {
    const std::vector<std::array<double, 2>> a = {{0.0, 0.0}, {0.5, 0.5}};
    const std::vector<std::array<double, 2>> b = {{3.0 / 32, 4.0 / 16}, {0.5, 0.5}};
    EXPECT_EQ(metrics::landmark_mtre(a, b, 16, 32), 2.5);  // (5 + 0) / 2
    EXPECT_THROW(metrics::landmark_mtre(a, std::span(b).first(1), 16, 32), std::invalid_argument);
}

TEST(InverseConsistency, TranslationsAddUp) {
    const double cx = 0.05, cy = -0.025;
    const auto t = matrix_transform({1, 0, cx, 0, 1, cy, 0, 0, 1});
    const auto t_inv = matrix_transform({1, 0, -cx, 0, 1, -cy, 0, 0, 1});
    // Applying the same translation twice leaves a residual of 2c.
    EXPECT_NEAR(metrics::inv_consistency_error(t, t, 32, 32), 2.0 * std::hypot(cx * 32, cy * 32), 1e-12);
    EXPECT_NEAR(metrics::inv_consistency_error(t, t_inv, 32, 32), 0.0, 1e-13);
}

TEST(InteriorPoints, ExcludesBorder) {
    const auto p = metrics::interior_points(10, 8);
    EXPECT_EQ(p.shape(), (ad::Shape{6 * 4, 2}));
    EXPECT_DOUBLE_EQ(p[0], (metrics::kBorder + 0.5) / 8);
    EXPECT_DOUBLE_EQ(p[1], (metrics::kBorder + 0.5) / 10);
}

TEST(MetricsCsv, GoldenHeaderAndRow) {
    EXPECT_EQ(metrics::csv_header(),
              "run_id,step,similarity,regularizer,loss,pct_neg_jacobian,inv_consistency_err,dice,mtre");
    metrics::MetricsReport r;
    r.similarity = -0.5;
    r.loss = -0.25;
    r.regularizer = 0.05;
    r.inv_consistency_err = 1e-15;
    EXPECT_EQ(metrics::csv_row("x", 3, r), "x,3,-0.5,0.05,-0.25,0,1e-15,,");
    r.dice = 0.75;
    r.landmark_mtre = 2;
    EXPECT_EQ(metrics::csv_row("x", 3, r), "x,3,-0.5,0.05,-0.25,0,1e-15,0.75,2");
}
