#include "icreg/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <iostream>
#include <stdexcept>

namespace icreg::metrics {

Tensor lncc(const Tensor& a, const Tensor& b, double sigma) {
    if (a.shape() != b.shape())
        throw ad::ShapeError("lncc: shape mismatch " + ad::shape_to_string(a.shape()) + " vs " +
                             ad::shape_to_string(b.shape()));
    if (!(sigma > 0.0)) throw std::invalid_argument("lncc: sigma must be positive");
    using namespace ad;
    Tensor mu_a = gaussian_blur(a, sigma), mu_b = gaussian_blur(b, sigma);
    Tensor cov = sub(gaussian_blur(mul(a, b), sigma), mul(mu_a, mu_b));
    Tensor var_a = sub(gaussian_blur(square(a), sigma), square(mu_a));
    Tensor var_b = sub(gaussian_blur(square(b), sigma), square(mu_b));
    Tensor denom = sqrt(mul(add_scalar(var_a, kLnccEpsilon), add_scalar(var_b, kLnccEpsilon)));
    return mean(div(cov, denom));
}

Tensor bending_energy(const Tensor& v) {
    if (v.rank() != 3 || v.shape()[0] < 3 || v.shape()[1] < 3)
        throw ad::ShapeError("bending_energy: need [H,W,D] with H,W >= 3, got " + ad::shape_to_string(v.shape()));
    using namespace ad;
    const std::size_t h = v.shape()[0], w = v.shape()[1];
    const double hx = 1.0 / static_cast<double>(w), hy = 1.0 / static_cast<double>(h);
    // Shifted interior views: at(di, dj) is v[i+di, j+dj] for interior (i, j).
    auto at = [&](int di, int dj) { return slice(slice(v, 0, 1 + di, h - 2), 1, 1 + dj, w - 2); };
    Tensor c2 = scalar_mul(at(0, 0), 2.0);
    Tensor dxx = scalar_mul(sub(add(at(0, 1), at(0, -1)), c2), 1.0 / (hx * hx));
    Tensor dyy = scalar_mul(sub(add(at(1, 0), at(-1, 0)), c2), 1.0 / (hy * hy));
    Tensor dxy = scalar_mul(sub(add(at(1, 1), at(-1, -1)), add(at(1, -1), at(-1, 1))), 1.0 / (4.0 * hx * hy));
    Tensor e = add(add(square(dxx), square(dyy)), scalar_mul(square(dxy), 2.0));
    return scalar_mul(sum(e), 1.0 / static_cast<double>((h - 2) * (w - 2)));
}

JacobianStats jacobian_stats(const lie::Transform& transform, std::size_t height, std::size_t width) {
    if (height < 2 * kBorder + 1 || width < 2 * kBorder + 1) throw std::invalid_argument("jacobian_stats: grid too small");
    const Tensor field = transform.position_field(height, width);
    const auto& p = field.values();
    auto at = [&](std::size_t i, std::size_t j, std::size_t c) { return p[(i * width + j) * 2 + c]; };
    JacobianStats s;
    s.rows = height - 2 * kBorder;
    s.cols = width - 2 * kBorder;
    s.determinants.reserve(s.rows * s.cols);
    const double sx = static_cast<double>(width) / 2.0, sy = static_cast<double>(height) / 2.0;
    std::size_t negative = 0;
    double total = 0.0;
    for (std::size_t i = kBorder; i < height - kBorder; ++i)
        for (std::size_t j = kBorder; j < width - kBorder; ++j) {
            double dxdx = (at(i, j + 1, 0) - at(i, j - 1, 0)) * sx;
            double dydx = (at(i, j + 1, 1) - at(i, j - 1, 1)) * sx;
            double dxdy = (at(i + 1, j, 0) - at(i - 1, j, 0)) * sy;
            double dydy = (at(i + 1, j, 1) - at(i - 1, j, 1)) * sy;
            double det = dxdx * dydy - dxdy * dydx;
            s.determinants.push_back(det);
            total += det;
            if (det < 0.0) ++negative;
        }
    const double n = static_cast<double>(s.determinants.size());
    s.pct_negative = 100.0 * static_cast<double>(negative) / n;
    s.mean_determinant = total / n;
    return s;
}

Tensor interior_points(std::size_t height, std::size_t width) {
    if (height <= 2 * kBorder || width <= 2 * kBorder) throw std::invalid_argument("interior_points: grid too small");
    std::vector<double> v;
    v.reserve((height - 2 * kBorder) * (width - 2 * kBorder) * 2);
    for (std::size_t i = kBorder; i < height - kBorder; ++i)
        for (std::size_t j = kBorder; j < width - kBorder; ++j) {
            v.push_back((static_cast<double>(j) + 0.5) / static_cast<double>(width));
            v.push_back((static_cast<double>(i) + 0.5) / static_cast<double>(height));
        }
    const std::size_t n = v.size() / 2;
    return Tensor::constant({n, 2}, std::move(v));
}

double inv_consistency_error(const lie::Transform& ab, const lie::Transform& ba, std::size_t height, std::size_t width) {
    if (ab.dim() != ba.dim()) throw std::invalid_argument("inv_consistency_error: dimension mismatch");
    const Tensor x = interior_points(height, width);
    const Tensor y = ab.apply(ba.apply(x));
    const std::size_t n = x.shape()[0];
    double total = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        double dx = (y[2 * k] - x[2 * k]) * static_cast<double>(width);
        double dy = (y[2 * k + 1] - x[2 * k + 1]) * static_cast<double>(height);
        total += std::hypot(dx, dy);
    }
    return total / static_cast<double>(n);
}

double dice(std::span<const int> mask_a, std::span<const int> mask_b) {
    if (mask_a.size() != mask_b.size()) throw std::invalid_argument("dice: masks differ in size");
    std::size_t na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < mask_a.size(); ++i) {
        const bool a = mask_a[i] != 0, b = mask_b[i] != 0;
        na += a;
        nb += b;
        both += a && b;
    }
    if (na + nb == 0) {
        std::clog << "warning: dice of two empty masks is defined as 1\n";
        return 1.0;
    }
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double landmark_mtre(std::span<const std::array<double, 2>> points_a, std::span<const std::array<double, 2>> points_b,
                     std::size_t height, std::size_t width) {
    if (points_a.size() != points_b.size()) throw std::invalid_argument("landmark_mtre: landmark counts differ");
    if (points_a.empty()) throw std::invalid_argument("landmark_mtre: no landmarks");
    double total = 0.0;
    for (std::size_t k = 0; k < points_a.size(); ++k)
        total += std::hypot((points_a[k][0] - points_b[k][0]) * static_cast<double>(width),
                            (points_a[k][1] - points_b[k][1]) * static_cast<double>(height));
    return total / static_cast<double>(points_a.size());
}

std::string csv_header() {
    return "run_id,step,similarity,regularizer,loss,pct_neg_jacobian,inv_consistency_err,dice,mtre";
}

std::string csv_row(const std::string& run_id, std::size_t step, const MetricsReport& r) {
    auto num = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.12g", v);
        return std::string(buf);
    };
    std::string row = run_id + "," + std::to_string(step) + "," + num(r.similarity) + "," + num(r.regularizer) + "," +
                      num(r.loss) + "," + num(r.pct_neg_jacobian) + "," + num(r.inv_consistency_err) + ",";
    if (r.dice) row += num(*r.dice);
    row += ",";
    if (r.landmark_mtre) row += num(*r.landmark_mtre);
    return row;
}

}  // namespace icreg::metrics
