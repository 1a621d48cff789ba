#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace ecf {

/// Grayscale image with intensities in [0, 1], row-major.
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;

    Image() = default;
    Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w, fill) {}

    double& operator()(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
    double operator()(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
};

/// Binary 8-bit PGM (P5). Intensities are mapped by round(255 v) after
/// clamping to [0, 1]; reading divides by 255.
void write_pgm(const std::filesystem::path& path, const Image& image);
void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& bytes);
Image read_pgm(const std::filesystem::path& path);

}  // namespace ecf
