#include "ecf/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace ecf {

namespace {

constexpr std::array<char, 4> kMagic{'E', 'C', 'T', '1'};
constexpr std::uint64_t kMaxRank = 16;

void put_u64(std::ostream& os, std::uint64_t v) {
    std::array<char, 8> bytes;
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(bytes.data(), bytes.size());
}

std::uint64_t get_u64(std::istream& is, const char* what) {
    std::array<unsigned char, 8> bytes;
    if (!is.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
        throw FormatError(std::string("ECT1: truncated while reading ") + what);
    }
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kMagic.data(), kMagic.size());
    put_u64(os, t.rank());
    for (std::size_t extent : t.shape()) put_u64(os, extent);
    for (double v : t.data()) put_u64(os, std::bit_cast<std::uint64_t>(v));
    if (!os) throw FormatError("ECT1: write failed");
}

Tensor read_tensor(std::istream& is) {
    std::array<char, 4> magic{};
    if (!is.read(magic.data(), magic.size())) throw FormatError("ECT1: truncated header");
    if (magic != kMagic) throw FormatError("ECT1: bad magic bytes");
    const std::uint64_t rank = get_u64(is, "rank");
    if (rank == 0 || rank > kMaxRank) throw FormatError("ECT1: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& extent : shape) {
        extent = get_u64(is, "extents");
        if (extent == 0 || extent > (std::uint64_t{1} << 40)) throw FormatError("ECT1: implausible extent");
    }
    std::vector<double> values(numel_of(shape));
    for (double& v : values) v = std::bit_cast<double>(get_u64(is, "values"));
    return Tensor::from(std::move(shape), std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    try {
        return read_tensor(is);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

}  // namespace ecf
