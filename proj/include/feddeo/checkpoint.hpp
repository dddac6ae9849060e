#pragma once

#include "feddeo/numerics.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace feddeo {

enum class CheckpointErrorCode { BadMagic, UnsupportedVersion, Truncated, Corrupt, Io, MissingEntry };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  CheckpointErrorCode code() const noexcept { return code_; }

 private:
  CheckpointErrorCode code_;
};

struct NamedArray {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

/// "FDEO" container of named f32 arrays, f64 scalars and text metadata.
///
/// Layout v1 (little-endian): "FDEO", version u32,
///   array count u32, per array: name_len u32, name, rank u32, rank x u32
///     dims, prod(dims) x f32;
///   scalar count u32, per scalar: name_len u32, name, f64;
///   metadata count u32, per entry: key_len u32, key, value_len u32, value.
/// Every table is written in ascending name order, which makes the byte
/// stream canonical.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::map<std::string, NamedArray> arrays;
  std::map<std::string, double> scalars;
  std::map<std::string, std::string> metadata;

  void put_matrix(const std::string& name, const Matrix& m);
  Matrix matrix(const std::string& name) const;
  double scalar(const std::string& name) const;
  const std::string& meta(const std::string& key) const;

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint parse(std::span<const std::uint8_t> bytes);
  /// SHA-256 of serialize().
  std::string digest() const;
};

/// Writes through a temporary file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Atomic text/binary file helpers shared by every output writer.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace feddeo
