#pragma once

// Shared helpers: random tensors, a central finite-difference gradient check
// and independent oracles for the exponentials.

#include <cmath>
#include <array>
#include <functional>
#include <numbers>
#include <string>
#include <random>
#include <vector>

#include "icreg/autodiff.hpp"
#include "icreg/lie.hpp"
#include "icreg/metrics.hpp"

namespace icreg::check {

inline std::vector<double> random_values(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

inline ad::Tensor random_tensor(ad::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    const auto n = ad::shape_size(shape);
    return ad::Tensor::constant(std::move(shape), random_values(n, seed, lo, hi));
}

using Fn = std::function<ad::Tensor(std::span<const ad::Tensor>)>;

/// Largest relative error (||analytic - fd|| / max(||fd||, floor)) over the
/// inputs. Non-scalar outputs are contracted with fixed random weights.
inline double gradient_error(const Fn& f, const std::vector<ad::Tensor>& inputs, double h = 1e-6,
                             double floor = 1e-8) {
    const ad::Tensor probe = f(inputs);
    const ad::Tensor weights = random_tensor(probe.shape(), 99);
    auto scalar = [&](std::span<const ad::Tensor> xs) {
        const auto out = f(xs);
        return out.size() == 1 ? ad::sum(out) : ad::sum(ad::mul(out, weights));
    };

    ad::Tape tape;
    std::vector<ad::Tensor> vars;
    for (const auto& x : inputs) vars.push_back(tape.variable(x));
    const auto grads = ad::backprop(scalar(vars));

    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const auto analytic = grads.of(vars[k]);
        double diff2 = 0.0, ref2 = 0.0;
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            std::vector<ad::Tensor> shifted = inputs;
            auto v = inputs[k].values();
            const double x0 = v[i];
            v[i] = x0 + h;
            shifted[k] = ad::Tensor::constant(inputs[k].shape(), v);
            const double up = scalar(shifted).item();
            v[i] = x0 - h;
            shifted[k] = ad::Tensor::constant(inputs[k].shape(), v);
            const double down = scalar(shifted).item();
            const double fd = (up - down) / (2.0 * h);
            diff2 += (analytic[i] - fd) * (analytic[i] - fd);
            ref2 += fd * fd;
        }
        worst = std::max(worst, std::sqrt(diff2) / std::max(std::sqrt(ref2), floor));
    }
    return worst;
}

// Oracles and fixtures shared with the acceptance run.

using Mat = std::vector<double>;

inline Mat matmul(const Mat& a, const Mat& b, std::size_t n) {
    Mat c(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t j = 0; j < n; ++j) c[i * n + j] += a[i * n + k] * b[k * n + j];
    return c;
}

// Plain truncated Taylor series, sum_{k<terms} M^k / k!.
inline Mat taylor_exp(const Mat& m, std::size_t n, int terms) {
    Mat result(n * n, 0.0), power(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) result[i * n + i] = power[i * n + i] = 1.0;
    for (int k = 1; k < terms; ++k) {
        power = matmul(power, m, n);
        for (auto& v : power) v /= k;
        for (std::size_t i = 0; i < n * n; ++i) result[i] += power[i];
    }
    return result;
}

inline double norm1(const Mat& m, std::size_t n) {
    double best = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        double col = 0.0;
        for (std::size_t i = 0; i < n; ++i) col += std::abs(m[i * n + j]);
        best = std::max(best, col);
    }
    return best;
}

inline double frobenius(const Mat& m) {
    double s = 0.0;
    for (double v : m) s += v * v;
    return std::sqrt(s);
}

// Mean distance in pixels between two transforms over the interior of an HxW grid.
inline double mean_gap_px(const lie::Transform& p, const lie::Transform& q, std::size_t h, std::size_t w) {
    const auto pts = metrics::interior_points(h, w);
    const auto a = p.apply(pts), b = q.apply(pts);
    double total = 0.0;
    const std::size_t n = pts.shape()[0];
    for (std::size_t k = 0; k < n; ++k) {
        const double dx = (a[2 * k] - b[2 * k]) * w, dy = (a[2 * k + 1] - b[2 * k + 1]) * h;
        total += std::hypot(dx, dy);
    }
    return total / n;
}

// Smooth analytic velocity: a small rotation about the centre plus a sinusoidal bump.
inline std::array<double, 2> smooth_velocity(double x, double y) {
    const double rx = x - 0.5, ry = y - 0.5;
    return {-0.3 * ry + 0.04 * std::sin(2 * std::numbers::pi * y),
            0.3 * rx + 0.03 * std::cos(2 * std::numbers::pi * x)};
}

inline ad::Tensor sample_grid(std::size_t h, std::size_t w, std::array<double, 2> (*v)(double, double)) {
    std::vector<double> out;
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const auto f = v((j + 0.5) / w, (i + 0.5) / h);
            out.push_back(f[0]);
            out.push_back(f[1]);
        }
    return ad::Tensor::constant({h, w, 2}, out);
}

// Dense RK4 flow of the analytic field from (x, y) for unit time.
inline std::array<double, 2> rk4_oracle(std::array<double, 2> (*v)(double, double), double x, double y, int steps) {
    const double dt = 1.0 / steps;
    for (int s = 0; s < steps; ++s) {
        const auto k1 = v(x, y);
        const auto k2 = v(x + 0.5 * dt * k1[0], y + 0.5 * dt * k1[1]);
        const auto k3 = v(x + 0.5 * dt * k2[0], y + 0.5 * dt * k2[1]);
        const auto k4 = v(x + dt * k3[0], y + dt * k3[1]);
        x += dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]);
        y += dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]);
    }
    return {x, y};
}

inline lie::VelocityMlp random_mlp(std::uint64_t seed, double scale) {
    lie::MlpTerm term;
    term.layers = {random_tensor({16, 3}, seed, -scale, scale), random_tensor({16, 17}, seed + 1, -scale, scale),
                   random_tensor({2, 17}, seed + 2, -scale, scale)};
    return {{term}};
}

/// One differentiable use of every primitive, with inputs kept away from kinks.
struct PrimitiveCase {
    std::string name;
    Fn fn;
    std::vector<ad::Tensor> inputs;
};

inline std::vector<PrimitiveCase> primitive_cases() {
    const auto a = random_tensor({3, 4}, 1), b = random_tensor({3, 4}, 2);
    const auto positive = random_tensor({3, 4}, 3, 0.5, 2.0);
    // Away from the kinks of leaky_relu (0) and clamp (-0.5, 0.5).
    std::vector<double> kinked = {-0.9, -0.3, 0.2, 0.7, 0.35, -0.75, 0.1, -0.15, 0.8, 0.45, -0.6, 0.05};
    const auto away = ad::Tensor::constant({3, 4}, kinked);
    const auto img = random_tensor({2, 6, 6}, 4);
    const auto weight = random_tensor({3, 2, 3, 3}, 5), bias = random_tensor({3}, 6);
    const auto field = random_tensor({5, 6, 2}, 7);
    // Sample positions kept off pixel centres, where bilinear weights have kinks.
    std::vector<double> coords = {0.31, 0.27, 0.52, 0.63, 0.77, 0.12, 0.05, 0.91, 0.44, 0.38, 1.2, -0.3};
    const auto pts = ad::Tensor::constant({6, 2}, coords);

    using S = std::span<const ad::Tensor>;
    return {
        {"add", [](S x) { return ad::add(x[0], x[1]); }, {a, b}},
        {"sub", [](S x) { return ad::sub(x[0], x[1]); }, {a, b}},
        {"mul", [](S x) { return ad::mul(x[0], x[1]); }, {a, b}},
        {"div", [](S x) { return ad::div(x[0], x[1]); }, {a, positive}},
        {"scalar_mul", [](S x) { return ad::scalar_mul(x[0], -2.5); }, {a}},
        {"add_scalar", [](S x) { return ad::add_scalar(x[0], 0.75); }, {a}},
        {"matmul", [](S x) { return ad::matmul(x[0], x[1]); }, {a, random_tensor({4, 5}, 8)}},
        {"transpose", [](S x) { return ad::transpose(x[0]); }, {a}},
        {"reshape", [](S x) { return ad::reshape(x[0], {2, 6}); }, {a}},
        {"concat", [](S x) { return ad::concat(x, 1); }, {a, random_tensor({3, 2}, 9)}},
        {"slice", [](S x) { return ad::slice(x[0], 1, 1, 2); }, {a}},
        {"sum", [](S x) { return ad::sum(x[0]); }, {a}},
        {"mean", [](S x) { return ad::mean(x[0]); }, {a}},
        {"square", [](S x) { return ad::square(x[0]); }, {a}},
        {"sqrt", [](S x) { return ad::sqrt(x[0]); }, {positive}},
        {"exp", [](S x) { return ad::exp(x[0]); }, {a}},
        {"tanh", [](S x) { return ad::tanh(x[0]); }, {random_tensor({3, 4}, 10, -3.0, 3.0)}},
        {"leaky_relu", [](S x) { return ad::leaky_relu(x[0], 0.1); }, {away}},
        {"clamp", [](S x) { return ad::clamp(x[0], -0.5, 0.5); }, {away}},
        {"conv2d_stride1", [](S x) { return ad::conv2d(x[0], x[1], x[2], 1); }, {img, weight, bias}},
        {"conv2d_stride2", [](S x) { return ad::conv2d(x[0], x[1], x[2], 2); }, {img, weight, bias}},
        {"avg_pool2", [](S x) { return ad::avg_pool2(x[0]); }, {img}},
        {"upsample2", [](S x) { return ad::upsample2(x[0]); }, {img}},
        {"pad", [](S x) { return ad::pad(x[0], 1, 2, 0, 3); }, {img}},
        {"gaussian_blur", [](S x) { return ad::gaussian_blur(x[0], 1.3); }, {img}},
        {"grid_sample", [](S x) { return ad::grid_sample(x[0], x[1]); }, {field, pts}},
        {"grid_sample_scalar", [](S x) { return ad::grid_sample(x[0], x[1]); }, {random_tensor({5, 6}, 11), pts}},
    };
}

}  // namespace icreg::check
