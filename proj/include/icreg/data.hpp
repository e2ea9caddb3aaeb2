#pragma once

// Synthetic 2-D datasets, IDX ingestion and the on-disk dataset layout.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "icreg/autodiff.hpp"

namespace icreg::data {

struct Image {
    std::size_t height = 0, width = 0;
    std::vector<double> pixels;                    // row-major, [0,1]
    std::vector<int> labels;                       // optional label mask, empty when absent
    std::vector<std::array<double, 2>> landmarks;  // normalized (x, y)
    int shape_class = -1;

    ad::Tensor tensor() const { return ad::Tensor::constant({height, width}, pixels); }
};

struct Dataset {
    std::string generator;
    std::uint64_t seed = 0;
    std::size_t size = 0;
    std::vector<std::string> class_names;
    std::vector<Image> images;
};

/// Anti-aliased outline rasterization: intensity clamp(stroke/2 + 0.5 - d, 0, 1)
/// where d is the pixel-center distance (in pixels) to the curve.
Image render_ring(std::size_t size, double cx, double cy, double radius, double stroke);
Image render_polyline(std::size_t size, const std::vector<std::array<double, 2>>& vertices, bool closed, double stroke);

/// Hollow circles and equilateral triangles. Coordinates used while drawing
/// are pixels; landmarks are stored normalized.
Dataset gen_tri_circ(std::size_t count, std::size_t size, std::uint64_t seed);

/// Closed strokes made of 2-4 cubic Bezier segments. One random prototype per
/// seed; each image perturbs its control points and applies a small random
/// rotation, shift and scale, like instances of a single digit class.
Dataset gen_blob_digits(std::size_t count, std::size_t size, std::uint64_t seed);

/// IDX images (magic 0x00000803) and labels (0x00000801); pixels scaled to
/// [0,1] and zero-padded by 2 pixels per side (28x28 -> 32x32).
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::optional<int> digit_filter);

/// Foreground mask (intensity >= 0.5) used as label mask for synthetic data.
std::vector<int> threshold_mask(const std::vector<double>& pixels, double level = 0.5);

/// Directory layout: images.bin (ICIMGS01), meta.json, landmarks.csv.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// Uniform random ordered pairs (i != j when more than one image).
class PairSampler {
  public:
    PairSampler(std::size_t count, std::uint64_t seed);
    std::pair<std::size_t, std::size_t> next();

  private:
    std::size_t count_;
    std::mt19937_64 rng_;
};

}  // namespace icreg::data
