#include "ecf/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

namespace ecf {

void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() != height * width) throw std::invalid_argument("write_pgm: pixel count mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << "P5\n" << width << ' ' << height << "\n255\n";
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

void write_pgm(const std::filesystem::path& path, const Image& image) {
    std::vector<std::uint8_t> bytes(image.pixels.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.pixels[i], 0.0, 1.0) * 255.0));
    }
    write_pgm(path, image.height, image.width, bytes);
}

Image read_pgm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::string magic;
    std::size_t width = 0;
    std::size_t height = 0;
    int maxval = 0;
    is >> magic >> width >> height >> maxval;
    if (!is || magic != "P5" || maxval != 255 || width == 0 || height == 0) {
        throw std::runtime_error(path.string() + ": not an 8-bit binary PGM");
    }
    is.get();  // single whitespace after the header
    std::vector<unsigned char> bytes(width * height);
    if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
        throw std::runtime_error(path.string() + ": truncated pixel data");
    }
    Image image(height, width);
    for (std::size_t i = 0; i < bytes.size(); ++i) image.pixels[i] = bytes[i] / 255.0;
    return image;
}

}  // namespace ecf
