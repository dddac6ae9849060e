#include "feddeo/checkpoint.hpp"

#include "feddeo/digest.hpp"

#include <fstream>
#include <iterator>

namespace feddeo {

void Checkpoint::put_matrix(const std::string& name, const Matrix& m) {
  NamedArray a;
  a.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  a.data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) a.data.push_back(static_cast<float>(m.data()[i]));
  arrays[name] = std::move(a);
}

Matrix Checkpoint::matrix(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw CheckpointError(CheckpointErrorCode::MissingEntry, "checkpoint: no array '" + name + "'");
  const NamedArray& a = it->second;
  Eigen::Index rows = 1, cols = 1;
  if (a.dims.size() == 1) {
    cols = a.dims[0];
  } else if (a.dims.size() == 2) {
    rows = a.dims[0];
    cols = a.dims[1];
  } else {
    throw CheckpointError(CheckpointErrorCode::Corrupt, "checkpoint: array '" + name + "' is not rank 1 or 2");
  }
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = a.data[static_cast<std::size_t>(i)];
  return m;
}

double Checkpoint::scalar(const std::string& name) const {
  auto it = scalars.find(name);
  if (it == scalars.end()) throw CheckpointError(CheckpointErrorCode::MissingEntry, "checkpoint: no scalar '" + name + "'");
  return it->second;
}

const std::string& Checkpoint::meta(const std::string& key) const {
  auto it = metadata.find(key);
  if (it == metadata.end()) throw CheckpointError(CheckpointErrorCode::MissingEntry, "checkpoint: no metadata '" + key + "'");
  return it->second;
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  ByteWriter w;
  w.bytes("FDEO");
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, a] : arrays) {
    std::size_t count = 1;
    for (std::uint32_t d : a.dims) count *= d;
    if (count != a.data.size())
      throw CheckpointError(CheckpointErrorCode::Corrupt, "checkpoint: array '" + name + "' dims do not match data");
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(a.dims.size()));
    for (std::uint32_t d : a.dims) w.u32(d);
    for (float v : a.data) w.f32(v);
  }
  w.u32(static_cast<std::uint32_t>(scalars.size()));
  for (const auto& [name, v] : scalars) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.f64(v);
  }
  w.u32(static_cast<std::uint32_t>(metadata.size()));
  for (const auto& [key, value] : metadata) {
    w.u32(static_cast<std::uint32_t>(key.size()));
    w.bytes(key);
    w.u32(static_cast<std::uint32_t>(value.size()));
    w.bytes(value);
  }
  return w.release();
}

Checkpoint Checkpoint::parse(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  try {
    if (r.remaining() < 4 || r.bytes(4) != "FDEO")
      throw CheckpointError(CheckpointErrorCode::BadMagic, "checkpoint: bad magic");
    const std::uint32_t version = r.u32();
    if (version != kVersion)
      throw CheckpointError(CheckpointErrorCode::UnsupportedVersion,
                            "checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ck;
    auto read_string = [&r] {
      const std::uint32_t len = r.u32();
      return r.bytes(len);
    };
    const std::uint32_t n_arrays = r.u32();
    for (std::uint32_t i = 0; i < n_arrays; ++i) {
      std::string name = read_string();
      NamedArray a;
      const std::uint32_t rank = r.u32();
      if (rank > 8) throw CheckpointError(CheckpointErrorCode::Corrupt, "checkpoint: implausible rank");
      std::uint64_t count = 1;
      for (std::uint32_t k = 0; k < rank; ++k) {
        a.dims.push_back(r.u32());
        count *= a.dims.back();
      }
      if (count * 4 > r.remaining())
        throw CheckpointError(CheckpointErrorCode::Truncated, "checkpoint: truncated array '" + name + "'");
      a.data.reserve(count);
      for (std::uint64_t k = 0; k < count; ++k) a.data.push_back(r.f32());
      ck.arrays.emplace(std::move(name), std::move(a));
    }
    const std::uint32_t n_scalars = r.u32();
    for (std::uint32_t i = 0; i < n_scalars; ++i) {
      std::string name = read_string();
      ck.scalars.emplace(std::move(name), r.f64());
    }
    const std::uint32_t n_meta = r.u32();
    for (std::uint32_t i = 0; i < n_meta; ++i) {
      std::string key = read_string();
      ck.metadata.emplace(std::move(key), read_string());
    }
    if (r.remaining() != 0) throw CheckpointError(CheckpointErrorCode::Corrupt, "checkpoint: trailing bytes");
    return ck;
  } catch (const ByteReader::TruncatedInput& e) {
    throw CheckpointError(CheckpointErrorCode::Truncated, std::string("checkpoint: ") + e.what());
  }
}

std::string Checkpoint::digest() const { return sha256_hex(serialize()); }

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointErrorCode::Io, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointErrorCode::Io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrorCode::Io, "cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, ckpt.serialize());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return Checkpoint::parse(read_file(path)); }

}  // namespace feddeo
