#include "tpmcf/binio.hpp"

#include <array>
#include <bit>

#include "tpmcf/errors.hpp"

namespace tpmcf {

namespace {

template <std::size_t N>
std::array<unsigned char, N> to_le(std::uint64_t v) {
  std::array<unsigned char, N> out{};
  for (std::size_t k = 0; k < N; ++k) out[k] = static_cast<unsigned char>((v >> (8 * k)) & 0xFF);
  return out;
}

template <std::size_t N>
std::uint64_t from_le(const std::array<unsigned char, N>& b) {
  std::uint64_t v = 0;
  for (std::size_t k = 0; k < N; ++k) v |= static_cast<std::uint64_t>(b[k]) << (8 * k);
  return v;
}

}  // namespace

BinaryWriter::BinaryWriter(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary) {
  if (!out_) throw IoError("cannot open for writing: " + path.string());
}

void BinaryWriter::magic(std::string_view four_cc) { out_.write(four_cc.data(), static_cast<std::streamsize>(four_cc.size())); }

void BinaryWriter::u32(std::uint32_t v) {
  const auto b = to_le<4>(v);
  out_.write(reinterpret_cast<const char*>(b.data()), 4);
}

void BinaryWriter::u64(std::uint64_t v) {
  const auto b = to_le<8>(v);
  out_.write(reinterpret_cast<const char*>(b.data()), 8);
}

void BinaryWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void BinaryWriter::block(const Matrix& m) {
  for (Eigen::Index k = 0; k < m.size(); ++k) f64(m.data()[k]);
}

void BinaryWriter::finish() {
  out_.flush();
  if (!out_) throw IoError("write failed: " + path_.string());
}

BinaryReader::BinaryReader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
  if (!in_) throw IoError("cannot open for reading: " + path.string());
}

void BinaryReader::read(unsigned char* dst, std::size_t n) {
  in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) throw IoError("truncated file: " + path_.string());
}

void BinaryReader::expect_magic(std::string_view four_cc) {
  std::array<unsigned char, 4> b{};
  read(b.data(), 4);
  if (std::string_view(reinterpret_cast<const char*>(b.data()), 4) != four_cc) {
    throw IoError(path_.string() + ": bad magic, expected " + std::string(four_cc));
  }
}

std::uint32_t BinaryReader::u32() {
  std::array<unsigned char, 4> b{};
  read(b.data(), 4);
  return static_cast<std::uint32_t>(from_le(b));
}

std::uint64_t BinaryReader::u64() {
  std::array<unsigned char, 8> b{};
  read(b.data(), 8);
  return from_le(b);
}

double BinaryReader::f64() { return std::bit_cast<double>(u64()); }

Matrix BinaryReader::block(Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = f64();
  return m;
}

bool BinaryReader::at_end() { return in_.peek() == std::char_traits<char>::eof(); }

}  // namespace tpmcf
