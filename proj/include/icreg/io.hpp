#pragma once

// Binary containers and image files shared by the tools.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace icreg::io {

class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::array<char, 8> kWarpMagic{'I', 'C', 'W', 'A', 'R', 'P', '0', '1'};
inline constexpr std::array<char, 8> kImagesMagic{'I', 'C', 'I', 'M', 'G', 'S', '0', '1'};

struct ArrayFile {
    std::vector<std::uint32_t> extents;
    std::vector<double> values;
};

/// magic, u32 rank, u32 extents[rank], little-endian doubles in row-major order.
void write_array_file(const std::filesystem::path& path, const std::array<char, 8>& magic,
                      std::span<const std::uint32_t> extents, std::span<const double> values);
ArrayFile read_array_file(const std::filesystem::path& path, const std::array<char, 8>& magic);

struct GrayImage {
    std::size_t height = 0, width = 0;
    std::vector<double> pixels;  // [0,1]
};

/// Binary PGM (P5, maxval 255). Values are clamped to [0,1] and rounded.
void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               std::span<const double> pixels);
GrayImage read_pgm(const std::filesystem::path& path);
std::uint8_t quantize(double v);

// Little-endian helpers.
void put_u32(std::string& out, std::uint32_t v);
void put_u64(std::string& out, std::uint64_t v);
void put_f64(std::string& out, double v);
std::uint32_t get_u32_le(const unsigned char* p);
std::uint64_t get_u64_le(const unsigned char* p);
double get_f64_le(const unsigned char* p);
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace icreg::io
