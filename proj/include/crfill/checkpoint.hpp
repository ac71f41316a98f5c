#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "crfill/tensor.hpp"

namespace crfill {

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kMissing, kVersion, kConfigMismatch, kCorrupt };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Named float tensors in a little binary file: magic, version, then (name, shape, data) records.
class TensorArchive {
 public:
  void put(const std::string& name, const Tensor<float>& t) { entries_.emplace_back(name, t); }
  /// Throws CheckpointError(kCorrupt) if the name is absent.
  const Tensor<float>& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor<float>>>& entries() const { return entries_; }

  void save(const std::string& path) const;
  static TensorArchive load(const std::string& path);

 private:
  std::vector<std::pair<std::string, Tensor<float>>> entries_;
};

/// `key=value` manifest lines.
void write_manifest(const std::string& path, const std::map<std::string, std::string>& fields);
std::map<std::string, std::string> read_manifest(const std::string& path);

}  // namespace crfill
