#include "icreg/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "icreg/io.hpp"

namespace icreg::experiments {

namespace {

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

}  // namespace

std::size_t resolve_workers(std::size_t requested) {
    if (const char* env = std::getenv("ICREG_WORKERS"); env && *env) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (*end != '\0' || v < 1) throw std::invalid_argument(std::string("ICREG_WORKERS: invalid value '") + env + "'");
        return static_cast<std::size_t>(v);
    }
    return std::max<std::size_t>(requested, 1);
}

std::vector<std::string> run_jobs(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& job) {
    std::vector<std::string> errors(n);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                job(i);
            } catch (const std::exception& e) {
                errors[i] = e.what();
                if (errors[i].empty()) errors[i] = "unknown error";
            }
        }
    };
    const std::size_t count = std::min(std::max<std::size_t>(workers, 1), std::max<std::size_t>(n, 1));
    if (count == 1) {
        worker();
        return errors;
    }
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < count; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    return errors;
}

// ---------------------------------------------------------------------------
// Raster plotting

Canvas::Canvas(std::size_t width, std::size_t height, double background)
    : width_(width), height_(height), pixels_(width * height, background) {
    if (width == 0 || height == 0) throw std::invalid_argument("Canvas: empty extents");
}

void Canvas::set(long x, long y, double value) {
    if (x < 0 || y < 0 || x >= static_cast<long>(width_) || y >= static_cast<long>(height_)) return;
    pixels_[static_cast<std::size_t>(y) * width_ + static_cast<std::size_t>(x)] = value;
}

void Canvas::line(double x0, double y0, double x1, double y1, double value) {
    const double steps = std::max({std::abs(x1 - x0), std::abs(y1 - y0), 1.0});
    for (int s = 0; s <= static_cast<int>(std::ceil(steps)); ++s) {
        const double t = s / std::ceil(steps);
        set(std::lround(x0 + t * (x1 - x0)), std::lround(y0 + t * (y1 - y0)), value);
    }
}

void Canvas::rect(long x0, long y0, long x1, long y1, double value) {
    for (long y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
        for (long x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, value);
}

void Canvas::blit(const std::vector<double>& image, std::size_t h, std::size_t w, long x0, long y0) {
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
            set(x0 + static_cast<long>(j), y0 + static_cast<long>(i), image[i * w + j]);
}

void Canvas::save(const std::filesystem::path& path) const { io::write_pgm(path, height_, width_, pixels_); }

namespace {

struct Frame {
    double left = 40, right = 10, top = 10, bottom = 30;
};

void draw_frame(Canvas& c, const Frame& f) {
    const double x0 = f.left, x1 = static_cast<double>(c.width()) - f.right;
    const double y0 = f.top, y1 = static_cast<double>(c.height()) - f.bottom;
    c.line(x0, y0, x0, y1, 0.0);
    c.line(x0, y1, x1, y1, 0.0);
    for (int k = 0; k <= 4; ++k) {  // ticks
        const double y = y0 + (y1 - y0) * k / 4.0, x = x0 + (x1 - x0) * k / 4.0;
        c.line(x0 - 4, y, x0, y, 0.0);
        c.line(x, y1, x, y1 + 4, 0.0);
    }
}

std::pair<double, double> value_range(const std::vector<std::vector<double>>& groups) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& g : groups)
        for (double v : g)
            if (std::isfinite(v)) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
    if (!std::isfinite(lo)) return {0.0, 1.0};
    if (hi - lo < 1e-12) return {lo - 0.5, hi + 0.5};
    const double pad = 0.05 * (hi - lo);
    return {lo - pad, hi + pad};
}

}  // namespace

Canvas plot_lines(const std::vector<std::vector<double>>& series, std::size_t width, std::size_t height) {
    Canvas c(width, height);
    const Frame f;
    draw_frame(c, f);
    const auto [lo, hi] = value_range(series);
    std::size_t n = 0;
    for (const auto& s : series) n = std::max(n, s.size());
    if (n < 2) return c;
    const double x0 = f.left, x1 = static_cast<double>(width) - f.right;
    const double y0 = f.top, y1 = static_cast<double>(height) - f.bottom;
    for (std::size_t k = 0; k < series.size(); ++k) {
        const double shade = 0.7 * static_cast<double>(k) / std::max<std::size_t>(series.size() - 1, 1);
        const auto& s = series[k];
        for (std::size_t i = 1; i < s.size(); ++i) {
            if (!std::isfinite(s[i - 1]) || !std::isfinite(s[i])) continue;
            auto px = [&](std::size_t j) { return x0 + (x1 - x0) * static_cast<double>(j) / static_cast<double>(n - 1); };
            auto py = [&](double v) { return y1 - (y1 - y0) * (v - lo) / (hi - lo); };
            c.line(px(i - 1), py(s[i - 1]), px(i), py(s[i]), shade);
        }
    }
    return c;
}

Canvas plot_violins(const std::vector<std::vector<double>>& groups, std::size_t width, std::size_t height) {
    Canvas c(width, height);
    const Frame f;
    draw_frame(c, f);
    if (groups.empty()) return c;
    const auto [lo, hi] = value_range(groups);
    const double x0 = f.left, x1 = static_cast<double>(width) - f.right;
    const double y0 = f.top, y1 = static_cast<double>(height) - f.bottom;
    const double slot = (x1 - x0) / static_cast<double>(groups.size());
    for (std::size_t k = 0; k < groups.size(); ++k) {
        std::vector<double> g;
        for (double v : groups[k])
            if (std::isfinite(v)) g.push_back(v);
        if (g.empty()) continue;
        const double center = x0 + slot * (static_cast<double>(k) + 0.5);
        const double mean = std::accumulate(g.begin(), g.end(), 0.0) / static_cast<double>(g.size());
        double var = 0.0;
        for (double v : g) var += (v - mean) * (v - mean);
        const double sd = std::sqrt(var / static_cast<double>(g.size()));
        // Silverman bandwidth with a floor relative to the plotted range.
        const double bw = std::max(1.06 * sd * std::pow(static_cast<double>(g.size()), -0.2), 0.02 * (hi - lo));
        std::vector<double> density;
        double peak = 0.0;
        for (long y = static_cast<long>(y0); y <= static_cast<long>(y1); ++y) {
            const double v = lo + (hi - lo) * (y1 - static_cast<double>(y)) / (y1 - y0);
            double d = 0.0;
            for (double s : g) d += std::exp(-0.5 * ((v - s) / bw) * ((v - s) / bw));
            density.push_back(d);
            peak = std::max(peak, d);
        }
        for (std::size_t i = 0; i < density.size(); ++i) {
            const double half = 0.45 * slot * density[i] / peak;
            if (half < 0.5) continue;
            const long y = static_cast<long>(y0) + static_cast<long>(i);
            c.rect(std::lround(center - half), y, std::lround(center + half), y, 0.6);
        }
        const double med = median(g);
        const double ym = y1 - (y1 - y0) * (med - lo) / (hi - lo);
        c.line(center - 0.3 * slot, ym, center + 0.3 * slot, ym, 0.0);
    }
    return c;
}

std::vector<double> grid_overlay(const std::vector<double>& image, const ad::Tensor& field, std::size_t spacing) {
    if (field.rank() != 3 || field.shape()[2] != 2) throw ad::ShapeError("grid_overlay: expected [H,W,2] field");
    const std::size_t h = field.shape()[0], w = field.shape()[1];
    if (image.size() != h * w) throw ad::ShapeError("grid_overlay: image and field differ in size");
    std::vector<double> out = image;
    // A pixel is on a grid line when a coordinate isoline (spaced `spacing`
    // pixels in the source frame) passes between it and its right/lower neighbor.
    auto cell = [&](std::size_t i, std::size_t j, std::size_t c) {
        const double extent = static_cast<double>(c == 0 ? w : h);
        return std::floor(field[(i * w + j) * 2 + c] * extent / static_cast<double>(spacing));
    };
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            bool on = false;
            for (std::size_t c = 0; c < 2; ++c) {
                if (j + 1 < w && cell(i, j, c) != cell(i, j + 1, c)) on = true;
                if (i + 1 < h && cell(i, j, c) != cell(i + 1, j, c)) on = true;
            }
            if (on) out[i * w + j] = 0.5;
        }
    return out;
}

TrainedModel load_trained(const std::filesystem::path& path) {
    std::filesystem::path ckpt = path, json_path;
    if (std::filesystem::is_directory(path)) ckpt = path / "ckpt_final.icckpt";
    json_path = ckpt.parent_path() / "model.json";
    TrainedModel t;
    try {
        t.descriptor = nlohmann::json::parse(io::read_file(json_path));
    } catch (const nlohmann::json::exception& e) {
        throw io::IoError(json_path.string() + ": " + e.what());
    }
    t.model = nets::build_model(t.descriptor);
    t.store = load_checkpoint(ckpt);
    ParamStore expected;
    t.model->init(expected);
    for (const auto& name : expected.names()) {
        if (!t.store.contains(name)) throw io::IoError(ckpt.string() + ": missing parameter '" + name + "'");
        if (t.store.at(name).shape != expected.at(name).shape)
            throw io::IoError(ckpt.string() + ": parameter '" + name + "' has shape " +
                              ad::shape_to_string(t.store.at(name).shape) + ", model expects " +
                              ad::shape_to_string(expected.at(name).shape));
    }
    return t;
}

double mean_squared_difference(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty()) throw std::invalid_argument("mean_squared_difference: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

double quantile(std::vector<double> v, double q) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(i);
    return i + 1 < v.size() ? v[i] + frac * (v[i + 1] - v[i]) : v[i];
}

// ---------------------------------------------------------------------------
// Zoo

std::pair<data::Dataset, data::Dataset> split_dataset(const data::Dataset& all, std::size_t train_count) {
    if (train_count == 0 || train_count >= all.images.size())
        throw std::invalid_argument("split_dataset: need 0 < train_count < " + std::to_string(all.images.size()));
    data::Dataset a = all, b = all;
    a.images.assign(all.images.begin(), all.images.begin() + static_cast<std::ptrdiff_t>(train_count));
    b.images.assign(all.images.begin() + static_cast<std::ptrdiff_t>(train_count), all.images.end());
    return {a, b};
}

std::string zoo_summary_header() {
    return "model,description,iterations,mse_identity,mse_warped,mse_reduction,ic_untrained,ic_trained,"
           "self_identity_deviation,pct_neg_jacobian,dice,mtre,status";
}

std::string zoo_panels_header() { return "pair,moving,fixed,model,mse_identity,mse_warped,composed_deviation_px"; }

namespace {

double self_identity_deviation(const nets::RegistrationModel& model, const ParamStore& store,
                               const data::Dataset& ds) {
    const ParamBinding params = store.bind(nullptr);
    double worst = 0.0;
    for (std::size_t k = 0; k < std::min<std::size_t>(ds.images.size(), 4); ++k) {
        const auto& img = ds.images[k];
        const auto t = model.forward(params, img.tensor(), img.tensor()).transform;
        const auto field = t.position_field(img.height, img.width);
        const auto id = lie::identity_grid(img.height, img.width);
        for (std::size_t i = 0; i < field.size(); ++i) worst = std::max(worst, std::abs(field[i] - id[i]));
    }
    return worst;
}

std::vector<double> upscale(const std::vector<double>& img, std::size_t h, std::size_t w, std::size_t f) {
    std::vector<double> out(h * w * f * f);
    for (std::size_t i = 0; i < h * f; ++i)
        for (std::size_t j = 0; j < w * f; ++j) out[i * w * f + j] = img[(i / f) * w + j / f];
    return out;
}

}  // namespace

ZooResult run_zoo(const ZooConfig& cfg, const std::optional<data::Dataset>& dataset,
                  const std::optional<std::filesystem::path>& out_dir) {
    ZooResult res;
    const data::Dataset all = dataset ? *dataset
                                      : data::gen_blob_digits(cfg.train_images + cfg.heldout_images, cfg.image_size,
                                                              cfg.data_seed);
    std::tie(res.train_set, res.heldout_set) = split_dataset(all, std::min(cfg.train_images, all.images.size() - 2));
    res.heldout_pairs = training::eval_pairs(res.heldout_set.images.size(), cfg.eval_pairs, cfg.seed + 17);

    res.models.resize(cfg.models.size());
    const auto errors = run_jobs(cfg.models.size(), cfg.workers, [&](std::size_t k) {
        ZooModelResult& r = res.models[k];
        r.name = cfg.models[k];
        training::TrainConfig tc = cfg.train;
        tc.model = nets::zoo_descriptor(r.name, cfg.seed);
        tc.dataset = {{"generator", all.generator}, {"seed", all.seed}, {"count", res.train_set.images.size()}};
        tc.seed = cfg.seed;
        r.model = nets::build_model(tc.model);
        r.description = r.model->describe();

        ParamStore untrained;
        r.model->init(untrained);
        r.ic_untrained =
            training::evaluate_pairs(*r.model, untrained, res.heldout_set, res.heldout_pairs, tc.lambda, tc.sigma)
                .inv_consistency_err;

        std::optional<std::filesystem::path> dir;
        if (out_dir) dir = *out_dir / r.name;
        auto trained = training::train(tc, res.train_set, dir, r.name);
        r.store = std::move(trained.store);
        r.heldout = training::evaluate_pairs(*r.model, r.store, res.heldout_set, res.heldout_pairs, tc.lambda, tc.sigma);
        r.ic_trained = r.heldout.inv_consistency_err;
        r.self_identity_deviation = self_identity_deviation(*r.model, r.store, res.heldout_set);

        const ParamBinding params = r.store.bind(nullptr);
        for (const auto& [i, j] : res.heldout_pairs) {
            const auto& A = res.heldout_set.images[i];
            const auto& B = res.heldout_set.images[j];
            const auto warped = lie::warp_image(A.tensor(), r.model->forward(params, A.tensor(), B.tensor()).transform);
            r.mse_identity += mean_squared_difference(A.pixels, B.pixels);
            r.mse_warped += mean_squared_difference(warped.values(), B.pixels);
        }
        r.mse_identity /= static_cast<double>(res.heldout_pairs.size());
        r.mse_warped /= static_cast<double>(res.heldout_pairs.size());
    });
    for (std::size_t k = 0; k < errors.size(); ++k) {
        res.models[k].error = errors[k];
        if (res.models[k].name.empty()) res.models[k].name = cfg.models[k];
    }
    if (!out_dir) return res;

    std::ostringstream summary;
    summary << zoo_summary_header() << '\n';
    for (const auto& r : res.models) {
        const bool ok = r.error.empty();
        summary << r.name << ",\"" << r.description << "\"," << cfg.train.iterations << ',' << num(r.mse_identity)
                << ',' << num(r.mse_warped) << ','
                << num(r.mse_identity > 0 ? 1.0 - r.mse_warped / r.mse_identity : 0.0) << ',' << num(r.ic_untrained)
                << ',' << num(r.ic_trained) << ',' << num(r.self_identity_deviation) << ','
                << num(r.heldout.pct_neg_jacobian) << ',' << (r.heldout.dice ? num(*r.heldout.dice) : "") << ','
                << (r.heldout.landmark_mtre ? num(*r.heldout.landmark_mtre) : "") << ','
                << (ok ? "ok" : "failed: " + r.error) << '\n';
    }
    io::write_file(*out_dir / "zoo_summary.csv", summary.str());

    // Panels: one row per model with fixed, moving, |warped - fixed|, warped
    // with the deformed grid, and the grid of Phi_AB o Phi_BA.
    constexpr std::size_t kScale = 4, kGap = 4, kColumns = 5;
    std::ostringstream panels;
    panels << zoo_panels_header() << '\n';
    const std::size_t h = res.heldout_set.images.front().height, w = res.heldout_set.images.front().width;
    const std::size_t tile_w = w * kScale, tile_h = h * kScale;
    for (std::size_t p = 0; p < std::min(cfg.panel_pairs, res.heldout_pairs.size()); ++p) {
        const auto [i, j] = res.heldout_pairs[p];
        const auto& A = res.heldout_set.images[i];
        const auto& B = res.heldout_set.images[j];
        Canvas canvas(kColumns * (tile_w + kGap) + kGap, res.models.size() * (tile_h + kGap) + kGap, 1.0);
        for (std::size_t m = 0; m < res.models.size(); ++m) {
            const auto& r = res.models[m];
            if (!r.error.empty()) continue;
            const ParamBinding params = r.store.bind(nullptr);
            const auto ab = r.model->forward(params, A.tensor(), B.tensor()).transform;
            const auto ba = r.model->forward(params, B.tensor(), A.tensor()).transform;
            const auto field = ab.position_field(h, w);
            const auto warped = ad::grid_sample(A.tensor(), field).values();
            std::vector<double> diff(warped.size());
            for (std::size_t q = 0; q < diff.size(); ++q) diff[q] = 1.0 - std::abs(warped[q] - B.pixels[q]);
            const auto composed = lie::compose(ab, ba).position_field(h, w);
            const std::vector<double> blank(h * w, 1.0);
            const std::vector<std::vector<double>> tiles = {B.pixels, A.pixels, diff, grid_overlay(warped, field),
                                                            grid_overlay(blank, composed)};
            for (std::size_t c = 0; c < tiles.size(); ++c)
                canvas.blit(upscale(tiles[c], h, w, kScale), tile_h, tile_w,
                            static_cast<long>(kGap + c * (tile_w + kGap)), static_cast<long>(kGap + m * (tile_h + kGap)));
            panels << p << ',' << i << ',' << j << ',' << r.name << ','
                   << num(mean_squared_difference(A.pixels, B.pixels)) << ','
                   << num(mean_squared_difference(warped, B.pixels)) << ','
                   << num(metrics::inv_consistency_error(ab, ba, h, w)) << '\n';
        }
        canvas.save(*out_dir / ("zoo_pair" + std::to_string(p) + ".pgm"));
    }
    io::write_file(*out_dir / "zoo_panels.csv", panels.str());
    return res;
}

// ---------------------------------------------------------------------------
// Affine grid

bool inverse_consistent_by_construction(nets::Parameterization p, const std::string& composition) {
    return p == nets::Parameterization::antisymmetric && (composition == "one_step" || composition == "tsc");
}

std::string cell_id(nets::Parameterization p, const std::string& composition) {
    return nets::to_string(p) + "/" + composition;
}

std::optional<double> GridRun::logged_similarity(std::size_t iteration) const {
    for (const auto& [it, rep] : logs)
        if (it == iteration) return rep.similarity;
    return std::nullopt;
}

std::string grid_summary_header() {
    return "cell_id,parameterization,composition,inverse_consistent_by_construction,runs,failures,"
           "median_final_similarity,q1_final_similarity,q3_final_similarity,iqr_final_similarity,"
           "median_inv_consistency_err";
}

std::string grid_runs_header() {
    return "cell_id,parameterization,composition,seed,status,fail_iteration,final_similarity,inv_consistency_err,"
           "pct_neg_jacobian,error";
}

std::string grid_curves_header() {
    return "cell_id,parameterization,composition,seed,iteration,similarity,eval_similarity,inv_consistency_err";
}

std::vector<GridCellSummary> summarize_grid(const std::vector<GridRun>& runs) {
    std::vector<GridCellSummary> cells;
    for (auto p : kGridParameterizations)
        for (const auto& comp : kGridCompositions) {
            GridCellSummary s;
            s.id = cell_id(p, comp);
            s.parameterization = p;
            s.composition = comp;
            s.by_construction = inverse_consistent_by_construction(p, comp);
            std::vector<double> finals, ics;
            for (const auto& r : runs) {
                if (r.parameterization != p || r.composition != comp) continue;
                ++s.runs;
                if (r.failed) {
                    ++s.failures;
                    continue;
                }
                finals.push_back(r.final_similarity);
                ics.push_back(r.final_ic);
            }
            s.median_final = median(finals);
            s.q1 = quantile(finals, 0.25);
            s.q3 = quantile(finals, 0.75);
            s.median_ic = median(ics);
            cells.push_back(s);
        }
    return cells;
}

GridResult run_affine_grid(const GridConfig& cfg, const std::optional<std::filesystem::path>& out_dir) {
    if (cfg.seeds.empty()) throw std::invalid_argument("affine grid: no seeds");
    const data::Dataset ds = data::gen_tri_circ(cfg.dataset_count, cfg.image_size, cfg.data_seed);
    GridResult res;
    for (auto p : kGridParameterizations)
        for (const auto& comp : kGridCompositions)
            for (auto seed : cfg.seeds) {
                GridRun r;
                r.parameterization = p;
                r.composition = comp;
                r.seed = seed;
                res.runs.push_back(r);
            }
    const auto errors = run_jobs(res.runs.size(), cfg.workers, [&](std::size_t k) {
        GridRun& r = res.runs[k];
        training::TrainConfig tc = cfg.train;
        tc.model = nets::affine_grid_descriptor(r.parameterization, r.composition, r.seed);
        tc.dataset = {{"generator", "tri_circ"}, {"count", cfg.dataset_count}, {"size", cfg.image_size},
                      {"seed", cfg.data_seed}};
        tc.iterations = cfg.iterations;
        tc.log_every = cfg.log_every;
        tc.eval_pairs = cfg.eval_pairs;
        tc.seed = r.seed;
        try {
            auto out = training::train(tc, ds);
            for (const auto& h : out.history) r.similarity.push_back(h.similarity);
            r.logs = std::move(out.logs);
            const auto& last = r.logs.back().second;
            r.final_similarity = last.similarity;
            r.final_ic = last.inv_consistency_err;
            r.final_pct_neg = last.pct_neg_jacobian;
        } catch (const training::NonFiniteLoss& e) {
            r.failed = r.non_finite = true;
            r.fail_iteration = e.iteration();
            r.error = e.what();
        } catch (const training::TrainingFailed& e) {
            r.failed = true;
            r.fail_iteration = e.iteration();
            r.error = e.what();
        }
    });
    for (std::size_t k = 0; k < errors.size(); ++k)
        if (!errors[k].empty()) {
            res.runs[k].failed = true;
            res.runs[k].error = errors[k];
        }
    res.cells = summarize_grid(res.runs);
    if (!out_dir) return res;

    std::filesystem::create_directories(*out_dir);
    std::ostringstream runs_csv, curves_csv, summary_csv;
    runs_csv << grid_runs_header() << '\n';
    curves_csv << grid_curves_header() << '\n';
    auto quoted = [](std::string s) {
        std::replace(s.begin(), s.end(), '"', '\'');
        return "\"" + s + "\"";
    };
    for (const auto& r : res.runs) {
        const std::string id = cell_id(r.parameterization, r.composition);
        const std::string prefix = id + "," + nets::to_string(r.parameterization) + "," + r.composition + "," +
                                   std::to_string(r.seed) + ",";
        runs_csv << prefix << (r.failed ? (r.non_finite ? "non_finite" : "failed") : "ok") << ','
                 << (r.fail_iteration ? std::to_string(*r.fail_iteration) : "") << ','
                 << (r.failed ? "" : num(r.final_similarity)) << ',' << (r.failed ? "" : num(r.final_ic)) << ','
                 << (r.failed ? "" : num(r.final_pct_neg)) << ',' << (r.error.empty() ? "" : quoted(r.error)) << '\n';
        std::size_t li = 0;
        for (std::size_t it = 0; it < r.similarity.size(); ++it) {
            curves_csv << prefix << it << ',' << num(r.similarity[it]) << ',';
            while (li < r.logs.size() && r.logs[li].first < it) ++li;
            if (li < r.logs.size() && r.logs[li].first == it)
                curves_csv << num(r.logs[li].second.similarity) << ',' << num(r.logs[li].second.inv_consistency_err);
            else
                curves_csv << ',';
            curves_csv << '\n';
        }
        if (!r.logs.empty() && r.logs.back().first == r.similarity.size())
            curves_csv << prefix << r.similarity.size() << ",," << num(r.logs.back().second.similarity) << ','
                       << num(r.logs.back().second.inv_consistency_err) << '\n';
    }
    summary_csv << grid_summary_header() << '\n';
    for (const auto& c : res.cells)
        summary_csv << c.id << ',' << nets::to_string(c.parameterization) << ',' << c.composition << ','
                    << (c.by_construction ? 1 : 0) << ',' << c.runs << ',' << c.failures << ',' << num(c.median_final)
                    << ',' << num(c.q1) << ',' << num(c.q3) << ',' << num(c.q3 - c.q1) << ',' << num(c.median_ic)
                    << '\n';
    io::write_file(*out_dir / "grid_runs.csv", runs_csv.str());
    io::write_file(*out_dir / "grid_curves.csv", curves_csv.str());
    io::write_file(*out_dir / "grid_summary.csv", summary_csv.str());

    // Mean similarity curve per cell (10-iteration moving average) and the
    // distribution of final similarities.
    std::vector<std::vector<double>> curves, finals;
    for (const auto& c : res.cells) {
        std::vector<double> mean_curve(cfg.iterations, 0.0);
        std::vector<double> counts(cfg.iterations, 0.0), fin;
        for (const auto& r : res.runs) {
            if (cell_id(r.parameterization, r.composition) != c.id || r.failed) continue;
            for (std::size_t it = 0; it < r.similarity.size() && it < cfg.iterations; ++it) {
                mean_curve[it] += r.similarity[it];
                counts[it] += 1.0;
            }
            fin.push_back(r.final_similarity);
        }
        std::vector<double> smooth(cfg.iterations, std::numeric_limits<double>::quiet_NaN());
        for (std::size_t it = 0; it < cfg.iterations; ++it) {
            double s = 0.0, n = 0.0;
            for (std::size_t q = it >= 9 ? it - 9 : 0; q <= it; ++q)
                if (counts[q] > 0) {
                    s += mean_curve[q] / counts[q];
                    n += 1.0;
                }
            if (n > 0) smooth[it] = s / n;
        }
        curves.push_back(std::move(smooth));
        finals.push_back(std::move(fin));
    }
    plot_lines(curves).save(*out_dir / "grid_curves.pgm");
    plot_violins(finals).save(*out_dir / "grid_final.pgm");
    return res;
}

}  // namespace icreg::experiments
