#pragma once

// Experiment drivers (registration zoo, affine parameterization grid), a
// bounded job runner and a minimal raster plotter.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "icreg/data.hpp"
#include "icreg/nets.hpp"
#include "icreg/training.hpp"

namespace icreg::experiments {

/// Worker count: ICREG_WORKERS when set, otherwise the requested value (>= 1).
std::size_t resolve_workers(std::size_t requested);

/// Runs jobs 0..n-1 on up to `workers` threads. Exceptions are captured per
/// job and returned (empty string on success).
std::vector<std::string> run_jobs(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& job);

/// Grayscale canvas with 1 = white background; (x, y) in pixels, y down.
class Canvas {
  public:
    Canvas(std::size_t width, std::size_t height, double background = 1.0);
    std::size_t width() const { return width_; }
    std::size_t height() const { return height_; }
    double at(std::size_t x, std::size_t y) const { return pixels_[y * width_ + x]; }
    void set(long x, long y, double value);
    void line(double x0, double y0, double x1, double y1, double value);
    void rect(long x0, long y0, long x1, long y1, double value);  // filled, inclusive
    void blit(const std::vector<double>& image, std::size_t h, std::size_t w, long x0, long y0);
    void save(const std::filesystem::path& path) const;
    const std::vector<double>& pixels() const { return pixels_; }

  private:
    std::size_t width_, height_;
    std::vector<double> pixels_;
};

/// Line plot of several series (shared x axis) into a framed canvas.
Canvas plot_lines(const std::vector<std::vector<double>>& series, std::size_t width = 480, std::size_t height = 320);

/// One violin per group of values, side by side.
Canvas plot_violins(const std::vector<std::vector<double>>& groups, std::size_t width = 480, std::size_t height = 320);

/// Image with the isolines of a position field's coordinates drawn on top
/// (every `spacing` pixels), showing the deformed grid.
std::vector<double> grid_overlay(const std::vector<double>& image, const ad::Tensor& position_field,
                                 std::size_t spacing = 4);

/// A trained model: `path` is a training output directory (model.json and
/// ckpt_final.icckpt) or a checkpoint file with model.json next to it.
struct TrainedModel {
    nlohmann::json descriptor;
    nets::ModelPtr model;
    ParamStore store;
};
TrainedModel load_trained(const std::filesystem::path& path);

double mean_squared_difference(const std::vector<double>& a, const std::vector<double>& b);

// ---------------------------------------------------------------------------
// Registration zoo

inline const std::vector<std::string> kZooModels = {"rigid", "affine", "svf", "mlp", "tsc", "nsc"};

struct ZooConfig {
    std::vector<std::string> models = kZooModels;
    std::size_t train_images = 64;
    std::size_t heldout_images = 16;
    std::size_t eval_pairs = 8;
    std::size_t panel_pairs = 2;
    std::size_t image_size = 32;
    std::uint64_t data_seed = 5;
    std::uint64_t seed = 1;
    training::TrainConfig train;  // model and dataset fields are filled per model
    std::size_t workers = 1;
};

struct ZooModelResult {
    std::string name;
    std::string description;
    nets::ModelPtr model;
    ParamStore store;
    double mse_identity = 0.0;
    double mse_warped = 0.0;
    double ic_untrained = 0.0;
    double ic_trained = 0.0;
    double self_identity_deviation = 0.0;  // max |model(A,A)(x) - x|, normalized
    metrics::MetricsReport heldout;
    std::string error;  // non-empty when training failed
};

struct ZooResult {
    std::vector<ZooModelResult> models;
    data::Dataset train_set, heldout_set;
    std::vector<std::pair<std::size_t, std::size_t>> heldout_pairs;
};

/// Splits a generated (or given) dataset into train / held-out images.
std::pair<data::Dataset, data::Dataset> split_dataset(const data::Dataset& all, std::size_t train_count);

/// Trains every zoo model and evaluates it on held-out pairs. With out_dir,
/// writes per-model training outputs, zoo_summary.csv, zoo_panels.csv and
/// panel images.
ZooResult run_zoo(const ZooConfig& cfg, const std::optional<data::Dataset>& dataset,
                  const std::optional<std::filesystem::path>& out_dir);

std::string zoo_summary_header();
std::string zoo_panels_header();

// ---------------------------------------------------------------------------
// Affine parameterization x composition grid

inline const std::vector<nets::Parameterization> kGridParameterizations = {
    nets::Parameterization::direct, nets::Parameterization::exponential, nets::Parameterization::antisymmetric};
inline const std::vector<std::string> kGridCompositions = {"one_step", "two_step", "tsc"};

struct GridConfig {
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    std::size_t iterations = 400;
    std::size_t log_every = 25;
    std::size_t dataset_count = 64;
    std::size_t image_size = 32;
    std::uint64_t data_seed = 3;
    std::size_t eval_pairs = 8;
    training::TrainConfig train;  // lambda, sigma, lr, batch
    std::size_t workers = 1;
};

/// True for the two cells whose output is inverse consistent by construction.
bool inverse_consistent_by_construction(nets::Parameterization p, const std::string& composition);
std::string cell_id(nets::Parameterization p, const std::string& composition);

struct GridRun {
    nets::Parameterization parameterization;
    std::string composition;
    std::uint64_t seed = 0;
    bool failed = false;
    bool non_finite = false;
    std::optional<std::size_t> fail_iteration;
    std::string error;
    std::vector<double> similarity;  // per iteration, batch mean
    std::vector<std::pair<std::size_t, metrics::MetricsReport>> logs;
    double final_similarity = 0.0;
    double final_ic = 0.0;
    double final_pct_neg = 0.0;

    /// Logged evaluation similarity at the given iteration (nullopt if absent).
    std::optional<double> logged_similarity(std::size_t iteration) const;
};

struct GridCellSummary {
    std::string id;
    nets::Parameterization parameterization;
    std::string composition;
    bool by_construction = false;
    std::size_t runs = 0, failures = 0;
    double median_final = 0.0, q1 = 0.0, q3 = 0.0;
    double median_ic = 0.0;
};

struct GridResult {
    std::vector<GridRun> runs;
    std::vector<GridCellSummary> cells;  // 9, in parameterization-major order
};

GridResult run_affine_grid(const GridConfig& cfg, const std::optional<std::filesystem::path>& out_dir);

std::vector<GridCellSummary> summarize_grid(const std::vector<GridRun>& runs);

std::string grid_summary_header();
std::string grid_runs_header();
std::string grid_curves_header();

double median(std::vector<double> v);
/// Linear-interpolated quantile, q in [0,1].
double quantile(std::vector<double> v, double q);

}  // namespace icreg::experiments
