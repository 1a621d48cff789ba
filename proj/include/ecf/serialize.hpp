#pragma once

// "ECT1" tensor files: magic bytes "ECT1", u64 rank, rank x u64 extents, then
// the values as float64, everything little-endian.

#include <filesystem>
#include <iosfwd>
#include <stdexcept>

#include "ecf/tensor.hpp"

namespace ecf {

class FormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace ecf
