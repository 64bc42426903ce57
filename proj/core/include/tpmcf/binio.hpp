#pragma once

// Little-endian binary streams for caches and checkpoints.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string_view>

#include "tpmcf/numcore.hpp"

namespace tpmcf {

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::filesystem::path& path);

  void magic(std::string_view four_cc);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  /// Raw row-major block, no shape header.
  void block(const Matrix& m);
  /// Flushes and reports any deferred write failure.
  void finish();

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path);

  void expect_magic(std::string_view four_cc);
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  Matrix block(Eigen::Index rows, Eigen::Index cols);
  bool at_end();

 private:
  void read(unsigned char* dst, std::size_t n);

  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace tpmcf
