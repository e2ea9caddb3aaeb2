#include "icreg/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace icreg::io {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::uint32_t get_u32_le(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

double get_f64_le(const unsigned char* p) { return std::bit_cast<double>(get_u64_le(p)); }

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path.string() + ": cannot open for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(path.string() + ": cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(path.string() + ": write failed");
}

void write_array_file(const std::filesystem::path& path, const std::array<char, 8>& magic,
                      std::span<const std::uint32_t> extents, std::span<const double> values) {
    std::size_t n = 1;
    for (auto e : extents) n *= e;
    if (n != values.size()) throw IoError(path.string() + ": extents do not match value count");
    std::string bytes(magic.begin(), magic.end());
    put_u32(bytes, static_cast<std::uint32_t>(extents.size()));
    for (auto e : extents) put_u32(bytes, e);
    bytes.reserve(bytes.size() + 8 * values.size());
    for (double v : values) put_f64(bytes, v);
    write_file(path, bytes);
}

ArrayFile read_array_file(const std::filesystem::path& path, const std::array<char, 8>& magic) {
    const std::string bytes = read_file(path);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    auto need = [&](std::size_t offset, std::size_t len) {
        if (offset + len > bytes.size())
            throw IoError(path.string() + ": truncated at byte offset " + std::to_string(offset));
    };
    need(0, 12);
    if (!std::equal(magic.begin(), magic.end(), bytes.begin()))
        throw IoError(path.string() + ": bad magic at byte offset 0, expected " + std::string(magic.begin(), magic.end()));
    ArrayFile f;
    const std::uint32_t rank = get_u32_le(p + 8);
    need(12, 4ull * rank);
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        f.extents.push_back(get_u32_le(p + 12 + 4 * i));
        n *= f.extents.back();
    }
    const std::size_t data_off = 12 + 4ull * rank;
    need(data_off, 8 * n);
    if (bytes.size() != data_off + 8 * n)
        throw IoError(path.string() + ": trailing bytes at offset " + std::to_string(data_off + 8 * n));
    f.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) f.values[i] = get_f64_le(p + data_off + 8 * i);
    return f;
}

std::uint8_t quantize(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               std::span<const double> pixels) {
    if (pixels.size() != height * width) throw IoError(path.string() + ": pixel count does not match extents");
    std::string bytes = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    for (double v : pixels) bytes.push_back(static_cast<char>(quantize(v)));
    write_file(path, bytes);
}

GrayImage read_pgm(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    std::size_t pos = 0;
    auto token = [&]() {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
        std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos) throw IoError(path.string() + ": truncated PGM header at byte offset " + std::to_string(start));
        return bytes.substr(start, pos - start);
    };
    if (token() != "P5") throw IoError(path.string() + ": not a binary PGM (P5)");
    GrayImage img;
    try {
        img.width = std::stoul(token());
        img.height = std::stoul(token());
        const unsigned long maxval = std::stoul(token());
        if (maxval != 255) throw IoError(path.string() + ": only maxval 255 is supported");
    } catch (const std::logic_error&) {
        throw IoError(path.string() + ": malformed PGM header");
    }
    ++pos;  // single whitespace after maxval
    if (pos + img.width * img.height > bytes.size())
        throw IoError(path.string() + ": truncated PGM payload at byte offset " + std::to_string(pos));
    img.pixels.resize(img.width * img.height);
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        img.pixels[i] = static_cast<unsigned char>(bytes[pos + i]) / 255.0;
    return img;
}

}  // namespace icreg::io
