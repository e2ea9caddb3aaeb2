#include "icreg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "icreg/io.hpp"

namespace icreg::data {

namespace {

using Point = std::array<double, 2>;

double segment_distance(const Point& p, const Point& a, const Point& b) {
    const double vx = b[0] - a[0], vy = b[1] - a[1];
    const double wx = p[0] - a[0], wy = p[1] - a[1];
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0.0 ? std::clamp((wx * vx + wy * vy) / len2, 0.0, 1.0) : 0.0;
    return std::hypot(wx - t * vx, wy - t * vy);
}

template <class Distance>
Image rasterize(std::size_t size, double stroke, Distance distance) {
    Image img;
    img.height = img.width = size;
    img.pixels.resize(size * size);
    for (std::size_t i = 0; i < size; ++i)
        for (std::size_t j = 0; j < size; ++j) {
            const Point p{static_cast<double>(j) + 0.5, static_cast<double>(i) + 0.5};
            img.pixels[i * size + j] = std::clamp(stroke / 2.0 + 0.5 - distance(p), 0.0, 1.0);
        }
    img.labels = threshold_mask(img.pixels);
    return img;
}

Point normalized(const Point& p, std::size_t size) {
    return {p[0] / static_cast<double>(size), p[1] / static_cast<double>(size)};
}

Point cubic_bezier(const Point& p0, const Point& p1, const Point& p2, const Point& p3, double t) {
    const double u = 1.0 - t;
    const double b0 = u * u * u, b1 = 3 * u * u * t, b2 = 3 * u * t * t, b3 = t * t * t;
    return {b0 * p0[0] + b1 * p1[0] + b2 * p2[0] + b3 * p3[0], b0 * p0[1] + b1 * p1[1] + b2 * p2[1] + b3 * p3[1]};
}

}  // namespace

std::vector<int> threshold_mask(const std::vector<double>& pixels, double level) {
    std::vector<int> m(pixels.size());
    for (std::size_t i = 0; i < pixels.size(); ++i) m[i] = pixels[i] >= level ? 1 : 0;
    return m;
}

Image render_ring(std::size_t size, double cx, double cy, double radius, double stroke) {
    return rasterize(size, stroke, [&](const Point& p) { return std::abs(std::hypot(p[0] - cx, p[1] - cy) - radius); });
}

Image render_polyline(std::size_t size, const std::vector<Point>& vertices, bool closed, double stroke) {
    if (vertices.size() < 2) throw std::invalid_argument("render_polyline: need at least two vertices");
    return rasterize(size, stroke, [&](const Point& p) {
        double d = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k + 1 < vertices.size(); ++k) d = std::min(d, segment_distance(p, vertices[k], vertices[k + 1]));
        if (closed) d = std::min(d, segment_distance(p, vertices.back(), vertices.front()));
        return d;
    });
}

Dataset gen_tri_circ(std::size_t count, std::size_t size, std::uint64_t seed) {
    if (size < 32) throw std::invalid_argument("gen_tri_circ: size must be >= 32");
    Dataset ds;
    ds.generator = "tri_circ";
    ds.seed = seed;
    ds.size = size;
    ds.class_names = {"circle", "triangle"};
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double w = static_cast<double>(size);
    for (std::size_t n = 0; n < count; ++n) {
        const int cls = unit(rng) < 0.5 ? 0 : 1;
        const double radius = (0.15 + 0.20 * unit(rng)) * w;
        const double stroke = 2.0 + unit(rng);
        const double angle = 2.0 * std::numbers::pi * unit(rng);
        // Center inside the middle 60% of the frame, and far enough from the
        // edges that the whole outline stays visible.
        const double margin = radius + stroke;
        const double lo = std::max(0.2 * w, margin), hi = std::min(0.8 * w, w - margin);
        const double cx = lo + (hi - lo) * unit(rng);
        const double cy = lo + (hi - lo) * unit(rng);
        std::vector<Point> anchors;
        for (int k = 0; k < 3; ++k) {
            const double a = angle + 2.0 * std::numbers::pi * k / 3.0;
            anchors.push_back({cx + radius * std::cos(a), cy + radius * std::sin(a)});
        }
        Image img = cls == 0 ? render_ring(size, cx, cy, radius, stroke) : render_polyline(size, anchors, true, stroke);
        img.shape_class = cls;
        for (const auto& a : anchors) img.landmarks.push_back(normalized(a, size));
        ds.images.push_back(std::move(img));
    }
    return ds;
}

Dataset gen_blob_digits(std::size_t count, std::size_t size, std::uint64_t seed) {
    if (size < 32) throw std::invalid_argument("gen_blob_digits: size must be >= 32");
    constexpr double kStroke = 2.5;
    constexpr int kSamplesPerSegment = 24;
    constexpr double kJitter = 0.02;       // control point noise, fraction of width
    constexpr double kMaxAngle = 0.35;     // radians
    constexpr double kMaxShift = 0.08;     // fraction of width
    constexpr double kMaxScale = 0.06;
    Dataset ds;
    ds.generator = "blob_digits";
    ds.seed = seed;
    ds.size = size;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, kJitter);
    const double w = static_cast<double>(size);

    // One "digit class" per dataset: a prototype closed stroke in unit
    // coordinates around the origin; every image is a jittered, rigidly moved
    // and slightly rescaled copy.
    const int segments = 2 + static_cast<int>(unit(rng) * 3.0);
    ds.class_names = {std::to_string(segments) + "_segment_blob"};
    std::vector<Point> knots, controls;
    const double phase = 2.0 * std::numbers::pi * unit(rng);
    for (int k = 0; k < segments; ++k) {
        const double a = phase + 2.0 * std::numbers::pi * (k + 0.3 * (unit(rng) - 0.5)) / segments;
        const double r = 0.18 + 0.1 * unit(rng);
        knots.push_back({r * std::cos(a), r * std::sin(a)});
    }
    for (int k = 0; k < 2 * segments; ++k) controls.push_back({0.5 * (unit(rng) - 0.5), 0.5 * (unit(rng) - 0.5)});

    for (std::size_t n = 0; n < count; ++n) {
        const double angle = kMaxAngle * (2.0 * unit(rng) - 1.0);
        const double scale = 1.0 + kMaxScale * (2.0 * unit(rng) - 1.0);
        const double tx = kMaxShift * (2.0 * unit(rng) - 1.0), ty = kMaxShift * (2.0 * unit(rng) - 1.0);
        const double c = std::cos(angle) * scale, sn = std::sin(angle) * scale;
        auto place = [&](const Point& p) {
            const double x = p[0] + noise(rng), y = p[1] + noise(rng);
            return Point{(0.5 + tx + c * x - sn * y) * w, (0.5 + ty + sn * x + c * y) * w};
        };
        std::vector<Point> k_img, c_img;
        for (const auto& p : knots) k_img.push_back(place(p));
        for (const auto& p : controls) c_img.push_back(place(p));
        std::vector<Point> poly;
        for (int s = 0; s < segments; ++s) {
            const Point p0 = k_img[s], p3 = k_img[(s + 1) % segments];
            for (int k = 0; k < kSamplesPerSegment; ++k)
                poly.push_back(cubic_bezier(p0, c_img[2 * s], c_img[2 * s + 1], p3,
                                            static_cast<double>(k) / kSamplesPerSegment));
        }
        Image img = render_polyline(size, poly, true, kStroke);
        img.shape_class = 0;
        for (const auto& k : k_img) img.landmarks.push_back(normalized(k, size));
        ds.images.push_back(std::move(img));
    }
    return ds;
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::optional<int> digit_filter) {
    constexpr std::size_t kPad = 2;
    const std::string ib = io::read_file(images_path), lb = io::read_file(labels_path);
    auto be32 = [](const std::string& b, std::size_t off) {
        return (static_cast<std::uint32_t>(static_cast<unsigned char>(b[off])) << 24) |
               (static_cast<std::uint32_t>(static_cast<unsigned char>(b[off + 1])) << 16) |
               (static_cast<std::uint32_t>(static_cast<unsigned char>(b[off + 2])) << 8) |
               static_cast<std::uint32_t>(static_cast<unsigned char>(b[off + 3]));
    };
    auto need = [](const std::string& b, const std::filesystem::path& p, std::size_t off, std::size_t len) {
        if (off + len > b.size()) throw io::IoError(p.string() + ": truncated at byte offset " + std::to_string(b.size()));
    };
    need(ib, images_path, 0, 16);
    if (be32(ib, 0) != 0x00000803u) throw io::IoError(images_path.string() + ": bad IDX image magic at byte offset 0");
    need(lb, labels_path, 0, 8);
    if (be32(lb, 0) != 0x00000801u) throw io::IoError(labels_path.string() + ": bad IDX label magic at byte offset 0");
    const std::size_t count = be32(ib, 4), rows = be32(ib, 8), cols = be32(ib, 12);
    if (be32(lb, 4) != count)
        throw io::IoError(labels_path.string() + ": label count at byte offset 4 does not match image count");
    need(ib, images_path, 16, count * rows * cols);
    need(lb, labels_path, 8, count);

    Dataset ds;
    ds.generator = "idx";
    ds.size = rows + 2 * kPad;
    for (int d = 0; d < 10; ++d) ds.class_names.push_back(std::to_string(d));
    for (std::size_t n = 0; n < count; ++n) {
        const int label = static_cast<unsigned char>(lb[8 + n]);
        if (digit_filter && label != *digit_filter) continue;
        Image img;
        img.height = rows + 2 * kPad;
        img.width = cols + 2 * kPad;
        img.pixels.assign(img.height * img.width, 0.0);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j)
                img.pixels[(i + kPad) * img.width + j + kPad] =
                    static_cast<unsigned char>(ib[16 + n * rows * cols + i * cols + j]) / 255.0;
        img.labels = threshold_mask(img.pixels);
        img.shape_class = label;
        ds.images.push_back(std::move(img));
    }
    return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    if (ds.images.empty()) throw std::invalid_argument("save_dataset: empty dataset");
    const std::size_t h = ds.images.front().height, w = ds.images.front().width;
    std::vector<double> all;
    all.reserve(ds.images.size() * h * w);
    nlohmann::json classes = nlohmann::json::array();
    std::ostringstream lm;
    lm << "image,index,x,y\n";
    lm.precision(17);
    for (std::size_t n = 0; n < ds.images.size(); ++n) {
        const auto& img = ds.images[n];
        if (img.height != h || img.width != w) throw std::invalid_argument("save_dataset: images differ in size");
        all.insert(all.end(), img.pixels.begin(), img.pixels.end());
        classes.push_back(img.shape_class);
        for (std::size_t k = 0; k < img.landmarks.size(); ++k)
            lm << n << ',' << k << ',' << img.landmarks[k][0] << ',' << img.landmarks[k][1] << '\n';
    }
    const std::uint32_t extents[] = {static_cast<std::uint32_t>(ds.images.size()), static_cast<std::uint32_t>(h),
                                     static_cast<std::uint32_t>(w)};
    io::write_array_file(dir / "images.bin", io::kImagesMagic, extents, all);
    nlohmann::json meta{{"count", ds.images.size()}, {"size", ds.size},   {"seed", ds.seed},
                        {"generator", ds.generator},  {"classes", classes}, {"class_names", ds.class_names}};
    io::write_file(dir / "meta.json", meta.dump(2) + "\n");
    io::write_file(dir / "landmarks.csv", lm.str());
}

Dataset load_dataset(const std::filesystem::path& dir) {
    const auto arr = io::read_array_file(dir / "images.bin", io::kImagesMagic);
    if (arr.extents.size() != 3) throw io::IoError((dir / "images.bin").string() + ": expected rank 3");
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(io::read_file(dir / "meta.json"));
    } catch (const nlohmann::json::exception& e) {
        throw io::IoError((dir / "meta.json").string() + ": " + e.what());
    }
    Dataset ds;
    ds.generator = meta.value("generator", "");
    ds.seed = meta.value("seed", std::uint64_t{0});
    ds.size = meta.value("size", std::size_t{arr.extents[1]});
    ds.class_names = meta.value("class_names", std::vector<std::string>{});
    const std::size_t count = arr.extents[0], h = arr.extents[1], w = arr.extents[2];
    const auto classes = meta.value("classes", std::vector<int>(count, -1));
    for (std::size_t n = 0; n < count; ++n) {
        Image img;
        img.height = h;
        img.width = w;
        img.pixels.assign(arr.values.begin() + static_cast<std::ptrdiff_t>(n * h * w),
                          arr.values.begin() + static_cast<std::ptrdiff_t>((n + 1) * h * w));
        img.labels = threshold_mask(img.pixels);
        img.shape_class = n < classes.size() ? classes[n] : -1;
        ds.images.push_back(std::move(img));
    }
    if (std::filesystem::exists(dir / "landmarks.csv")) {
        std::istringstream in(io::read_file(dir / "landmarks.csv"));
        std::string line;
        std::getline(in, line);
        std::size_t lineno = 1;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            std::istringstream ls(line);
            std::string f[4];
            for (auto& s : f) std::getline(ls, s, ',');
            try {
                const std::size_t img = std::stoul(f[0]);
                if (img >= ds.images.size()) throw std::out_of_range("image index");
                ds.images[img].landmarks.push_back({std::stod(f[2]), std::stod(f[3])});
            } catch (const std::logic_error&) {
                throw io::IoError((dir / "landmarks.csv").string() + ": malformed line " + std::to_string(lineno));
            }
        }
    }
    return ds;
}

PairSampler::PairSampler(std::size_t count, std::uint64_t seed) : count_(count), rng_(seed) {
    if (count == 0) throw std::invalid_argument("PairSampler: empty dataset");
}

std::pair<std::size_t, std::size_t> PairSampler::next() {
    std::uniform_int_distribution<std::size_t> pick(0, count_ - 1);
    const std::size_t a = pick(rng_);
    if (count_ == 1) return {a, a};
    std::uniform_int_distribution<std::size_t> other(0, count_ - 2);
    std::size_t b = other(rng_);
    if (b >= a) ++b;
    return {a, b};
}

}  // namespace icreg::data
