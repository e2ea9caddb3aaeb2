#pragma once

// Training losses (LNCC, bending energy) and evaluation metrics.

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "icreg/autodiff.hpp"
#include "icreg/lie.hpp"

namespace icreg::metrics {

using ad::Tensor;

inline constexpr double kLnccEpsilon = 1e-5;
/// Pixels excluded from each side when evaluating metrics on a grid.
inline constexpr std::size_t kBorder = 2;

/// Mean over pixels of the Gaussian-windowed correlation coefficient.
Tensor lncc(const Tensor& a, const Tensor& b, double sigma);

/// Mean over interior pixels of sum_channels sum_ab (d2 v / dx_a dx_b)^2,
/// derivatives in normalized coordinates. v: [H,W,D] with H,W >= 3.
Tensor bending_energy(const Tensor& velocity);

struct JacobianStats {
    double pct_negative = 0.0;
    double mean_determinant = 0.0;
    std::size_t rows = 0, cols = 0;   // interior extents
    std::vector<double> determinants;  // rows x cols
};

/// Central-difference Jacobian determinant of T's position field on an
/// HxW grid, interior pixels only.
JacobianStats jacobian_stats(const lie::Transform& transform, std::size_t height, std::size_t width);

/// Interior pixel centers of an HxW grid as [N,2].
Tensor interior_points(std::size_t height, std::size_t width);

/// Mean over interior grid points of |T_ab(T_ba(x)) - x| in pixels.
double inv_consistency_error(const lie::Transform& ab, const lie::Transform& ba, std::size_t height, std::size_t width);

/// 2|A n B| / (|A| + |B|) over nonzero entries; 1 when both are empty.
double dice(std::span<const int> mask_a, std::span<const int> mask_b);

/// Mean Euclidean distance in pixels between corresponding normalized points.
double landmark_mtre(std::span<const std::array<double, 2>> points_a, std::span<const std::array<double, 2>> points_b,
                     std::size_t height, std::size_t width);

struct MetricsReport {
    double similarity = 0.0;
    double regularizer = 0.0;
    double loss = 0.0;
    double pct_neg_jacobian = 0.0;
    double inv_consistency_err = 0.0;
    std::optional<double> dice;
    std::optional<double> landmark_mtre;
};

std::string csv_header();
std::string csv_row(const std::string& run_id, std::size_t step, const MetricsReport& report);

}  // namespace icreg::metrics
