#include "crfill/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "crfill/config.hpp"

namespace crfill {

namespace {
constexpr char kMagic[4] = {'C', 'R', 'F', 'A'};

template <typename V>
void write_pod(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& in, const std::string& path) {
  V v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(V))) {
    throw CheckpointError(CheckpointError::Kind::kCorrupt, "truncated archive " + path);
  }
  return v;
}
}  // namespace

const Tensor<float>& TensorArchive::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw CheckpointError(CheckpointError::Kind::kCorrupt, "archive has no tensor '" + name + "'");
}

bool TensorArchive::contains(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.first == name) return true;
  }
  return false;
}

void TensorArchive::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(CheckpointError::Kind::kMissing, "cannot write " + path);
  out.write(kMagic, 4);
  write_pod<std::uint32_t>(out, kCheckpointVersion);
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [name, t] : entries_) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) write_pod<std::int32_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  if (!out) throw CheckpointError(CheckpointError::Kind::kCorrupt, "write failed for " + path);
}

TensorArchive TensorArchive::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::kMissing, "missing archive " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::kCorrupt, path + " is not a tensor archive");
  }
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::kVersion,
                          path + ": archive version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
  }
  TensorArchive archive;
  const auto count = read_pod<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = read_pod<std::uint32_t>(in, path);
    if (len > 4096) throw CheckpointError(CheckpointError::Kind::kCorrupt, path + ": bad name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw CheckpointError(CheckpointError::Kind::kCorrupt, "truncated archive " + path);
    const auto rank = read_pod<std::uint32_t>(in, path);
    if (rank > 8) throw CheckpointError(CheckpointError::Kind::kCorrupt, path + ": bad rank");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto d = read_pod<std::int32_t>(in, path);
      if (d < 0) throw CheckpointError(CheckpointError::Kind::kCorrupt, path + ": negative dimension");
      shape.push_back(d);
    }
    Tensor<float> t(shape);
    if (!in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)))) {
      throw CheckpointError(CheckpointError::Kind::kCorrupt, "truncated archive " + path);
    }
    archive.put(name, t);
  }
  return archive;
}

void write_manifest(const std::string& path, const std::map<std::string, std::string>& fields) {
  std::ofstream out(path);
  if (!out) throw CheckpointError(CheckpointError::Kind::kMissing, "cannot write " + path);
  for (const auto& [k, v] : fields) out << k << '=' << v << '\n';
}

std::map<std::string, std::string> read_manifest(const std::string& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError(CheckpointError::Kind::kMissing, "missing " + path);
  try {
    return Config::load(path).entries();
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointError::Kind::kCorrupt, e.what());
  }
}

}  // namespace crfill
