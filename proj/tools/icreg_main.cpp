// icreg command line: dataset generation, training, registration, evaluation
// and the two synthetic experiments.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "icreg/data.hpp"
#include "icreg/experiments.hpp"
#include "icreg/io.hpp"
#include "icreg/lie.hpp"
#include "icreg/metrics.hpp"
#include "icreg/training.hpp"

namespace fs = std::filesystem;
using namespace icreg;

namespace {

struct Globals {
    std::uint64_t seed = 1;
    bool seed_given = false;
    std::size_t workers = 1;
    std::string out;
};

fs::path require_out(const Globals& g, const std::string& command) {
    if (g.out.empty()) throw std::invalid_argument(command + ": --out is required");
    return g.out;
}

ad::Tensor read_image(const fs::path& path) {
    const auto img = io::read_pgm(path);
    return ad::Tensor::constant({img.height, img.width}, img.pixels);
}

int cmd_gen_data(const Globals& g, const std::string& generator, std::size_t count, std::size_t size,
                 const std::string& images, const std::string& labels, std::optional<int> digit) {
    const fs::path out = require_out(g, "gen-data");
    data::Dataset ds;
    if (generator == "tri_circ")
        ds = data::gen_tri_circ(count, size, g.seed);
    else if (generator == "blob_digits")
        ds = data::gen_blob_digits(count, size, g.seed);
    else if (generator == "idx") {
        if (images.empty() || labels.empty()) throw std::invalid_argument("gen-data idx: --images and --labels required");
        ds = data::load_idx(images, labels, digit);
        if (count > 0 && ds.images.size() > count) ds.images.resize(count);
    } else {
        throw std::invalid_argument("gen-data: unknown generator '" + generator + "'");
    }
    data::save_dataset(ds, out);
    std::cout << "wrote " << ds.images.size() << " images to " << out.string() << '\n';
    return 0;
}

int cmd_train(const Globals& g, const std::string& config_path) {
    const fs::path out = require_out(g, "train");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(config_path));
    } catch (const nlohmann::json::exception& e) {
        throw io::IoError(config_path + ": " + e.what());
    }
    auto cfg = training::TrainConfig::from_json(j);
    if (g.seed_given) cfg.seed = g.seed;
    const auto res = training::train(cfg, out);
    const auto& last = res.logs.back().second;
    std::cout << "trained " << cfg.iterations << " iterations; final similarity " << last.similarity
              << ", inverse consistency " << last.inv_consistency_err << " px\n";
    return 0;
}

int cmd_register(const Globals& g, const std::string& model_path, const std::string& moving, const std::string& fixed) {
    const fs::path out = require_out(g, "register");
    const auto trained = experiments::load_trained(model_path);
    const auto a = read_image(moving), b = read_image(fixed);
    if (a.shape() != b.shape()) throw std::invalid_argument("register: moving and fixed images differ in size");
    const std::size_t h = a.shape()[0], w = a.shape()[1];
    const auto t = trained.model->forward(trained.store.bind(nullptr), a, b).transform;
    const auto field = t.position_field(h, w);
    const auto warped = ad::grid_sample(a, field);
    const std::uint32_t extents[] = {static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(w), 2u};
    io::write_array_file(out / "warp.icwarp", io::kWarpMagic, extents, field.values());
    io::write_pgm(out / "warped.pgm", h, w, warped.values());
    std::cout << "wrote " << (out / "warp.icwarp").string() << " and " << (out / "warped.pgm").string() << '\n';
    return 0;
}

int cmd_warp(const Globals& g, const std::string& warp_path, const std::string& image_path) {
    const fs::path out = require_out(g, "warp");
    const auto file = io::read_array_file(warp_path, io::kWarpMagic);
    if (file.extents.size() != 3 || file.extents[2] != 2) throw io::IoError(warp_path + ": expected [H,W,2] extents");
    const auto img = read_image(image_path);
    const ad::Tensor field = ad::Tensor::constant({file.extents[0], file.extents[1], 2}, file.values);
    const auto warped = ad::grid_sample(img, field);
    io::write_pgm(out, field.shape()[0], field.shape()[1], warped.values());
    return 0;
}

int cmd_evaluate(const Globals& g, const std::string& model_path, const std::string& data_dir, std::size_t pairs,
                 double lambda, double sigma) {
    const auto trained = experiments::load_trained(model_path);
    const auto ds = data::load_dataset(data_dir);
    const auto list = training::eval_pairs(ds.images.size(), pairs, g.seed);
    std::ostringstream csv;
    csv << metrics::csv_header() << '\n';
    for (std::size_t k = 0; k < list.size(); ++k) {
        const auto rep = training::evaluate_pairs(*trained.model, trained.store, ds, {list[k]}, lambda, sigma);
        csv << metrics::csv_row("pair_" + std::to_string(list[k].first) + "_" + std::to_string(list[k].second), k, rep)
            << '\n';
    }
    const auto mean = training::evaluate_pairs(*trained.model, trained.store, ds, list, lambda, sigma);
    csv << metrics::csv_row("mean", list.size(), mean) << '\n';
    if (g.out.empty())
        std::cout << csv.str();
    else
        io::write_file(g.out, csv.str());
    return 0;
}

int cmd_zoo(const Globals& g, const std::string& data_dir, const training::TrainConfig& tc) {
    const fs::path out = require_out(g, "zoo");
    experiments::ZooConfig cfg;
    cfg.seed = g.seed;
    cfg.workers = experiments::resolve_workers(g.workers);
    cfg.train = tc;
    std::optional<data::Dataset> ds;
    if (!data_dir.empty()) ds = data::load_dataset(data_dir);
    const auto res = experiments::run_zoo(cfg, ds, out);
    int status = 0;
    for (const auto& m : res.models) {
        if (!m.error.empty()) {
            std::cerr << m.name << ": " << m.error << '\n';
            status = 1;
            continue;
        }
        std::cout << m.name << ": mse " << m.mse_identity << " -> " << m.mse_warped << ", inverse consistency "
                  << m.ic_trained << " px\n";
    }
    return status;
}

int cmd_affine_grid(const Globals& g, std::size_t seeds, std::size_t iterations, const training::TrainConfig& tc) {
    const fs::path out = require_out(g, "affine-grid");
    experiments::GridConfig cfg;
    cfg.seeds.clear();
    for (std::size_t s = 0; s < seeds; ++s) cfg.seeds.push_back(g.seed + s);
    cfg.iterations = iterations;
    cfg.train = tc;
    cfg.workers = experiments::resolve_workers(g.workers);
    const auto res = experiments::run_affine_grid(cfg, out);
    for (const auto& c : res.cells)
        std::cout << c.id << ": median final similarity " << c.median_final << ", median inverse consistency "
                  << c.median_ic << " px, failures " << c.failures << "/" << c.runs << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Inverse-consistent image registration"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--seed", g.seed, "Random seed")->each([&](const std::string&) { g.seed_given = true; });
    app.add_option("--workers", g.workers, "Concurrent jobs (ICREG_WORKERS overrides)")->check(CLI::PositiveNumber);
    app.add_option("--out", g.out, "Output path");

    std::string generator = "tri_circ", images, labels;
    std::size_t count = 64, size = 32;
    std::optional<int> digit;
    auto* gen = app.add_subcommand("gen-data", "Generate or import a dataset directory");
    gen->add_option("--generator", generator)->check(CLI::IsMember({"tri_circ", "blob_digits", "idx"}));
    gen->add_option("--count", count);
    gen->add_option("--size", size);
    gen->add_option("--images", images, "IDX image file");
    gen->add_option("--labels", labels, "IDX label file");
    gen->add_option("--digit", digit, "Keep one digit class");

    std::string config;
    auto* train = app.add_subcommand("train", "Train a model from a JSON config");
    train->add_option("--config", config)->required()->check(CLI::ExistingFile);

    std::string model, moving, fixed;
    auto* reg = app.add_subcommand("register", "Register a moving image to a fixed image");
    reg->add_option("--model", model)->required();
    reg->add_option("--moving", moving)->required()->check(CLI::ExistingFile);
    reg->add_option("--fixed", fixed)->required()->check(CLI::ExistingFile);

    std::string warp_file, image;
    auto* warp = app.add_subcommand("warp", "Apply a warp file to an image");
    warp->add_option("--warp", warp_file)->required()->check(CLI::ExistingFile);
    warp->add_option("--image", image)->required()->check(CLI::ExistingFile);

    std::string data_dir;
    std::size_t pairs = 16;
    double lambda = 5.0, sigma = 5.0;
    auto* eval = app.add_subcommand("evaluate", "Metrics of a trained model over sampled pairs");
    eval->add_option("--model", model)->required();
    eval->add_option("--data", data_dir)->required();
    eval->add_option("--pairs", pairs);
    eval->add_option("--lambda", lambda);
    eval->add_option("--sigma", sigma);

    training::TrainConfig zoo_tc;
    zoo_tc.iterations = 500;
    zoo_tc.batch = 2;
    zoo_tc.learning_rate = 1e-3;
    zoo_tc.lambda = 5.0 / 1024.0;
    zoo_tc.log_every = 100;
    auto* zoo = app.add_subcommand("zoo", "Train and compare the six example models");
    zoo->add_option("--data", data_dir, "Dataset directory (default: generated blob digits)");
    zoo->add_option("--iterations", zoo_tc.iterations);
    zoo->add_option("--batch", zoo_tc.batch);
    zoo->add_option("--lr", zoo_tc.learning_rate);
    zoo->add_option("--lambda", zoo_tc.lambda);

    training::TrainConfig grid_tc;
    grid_tc.batch = 8;
    std::size_t grid_seeds = 5, grid_iterations = 400;
    auto* grid = app.add_subcommand("affine-grid", "Parameterization x composition grid on triangles and circles");
    grid->add_option("--seeds", grid_seeds)->check(CLI::PositiveNumber);
    grid->add_option("--iterations", grid_iterations)->check(CLI::PositiveNumber);
    grid->add_option("--batch", grid_tc.batch)->check(CLI::PositiveNumber);
    grid->add_option("--lr", grid_tc.learning_rate);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*gen) return cmd_gen_data(g, generator, count, size, images, labels, digit);
        if (*train) return cmd_train(g, config);
        if (*reg) return cmd_register(g, model, moving, fixed);
        if (*warp) return cmd_warp(g, warp_file, image);
        if (*eval) return cmd_evaluate(g, model, data_dir, pairs, lambda, sigma);
        if (*zoo) return cmd_zoo(g, data_dir, zoo_tc);
        if (*grid) return cmd_affine_grid(g, grid_seeds, grid_iterations, grid_tc);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
