#pragma once

#include <cstdint>
#include <stdexcept>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace feddeo {

/// Lowercase hex SHA-256 of a byte stream.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

/// Little-endian byte writer used by every binary format in the project.
class ByteWriter {
 public:
  void u32(std::uint32_t v);
  void f32(float v);
  void f64(double v);
  void bytes(std::string_view s);
  const std::vector<std::uint8_t>& data() const { return buf_; }
  std::vector<std::uint8_t> release() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little-endian reader; throws TruncatedInput past the end.
class ByteReader {
 public:
  struct TruncatedInput : std::runtime_error {
    using std::runtime_error::runtime_error;
  };

  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}
  std::uint32_t u32();
  float f32();
  double f64();
  std::string bytes(std::size_t n);
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace feddeo

namespace feddeo {

/// A frozen artifact no longer matches the digest it was distributed with.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace feddeo
