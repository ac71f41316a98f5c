#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "crfill/checkpoint.hpp"
#include "support/oracles.hpp"

using namespace crfill;
namespace fs = std::filesystem;

namespace {
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};
}  // namespace

TEST_CASE("tensor archives round trip bitwise") {
  TempDir dir("crfill_test_archive");
  std::mt19937_64 rng(1);
  TensorArchive a;
  a.put("conv.weight", oracle::random_tensor<float>({4, 3, 3, 3}, rng));
  a.put("conv.bias", oracle::random_tensor<float>({4}, rng));
  a.put("empty", Tensor<float>({0}));
  const std::string path = (dir.path / "a.crfa").string();
  a.save(path);
  auto b = TensorArchive::load(path);
  REQUIRE(b.size() == 3);
  for (const auto& [name, t] : a.entries()) {
    CHECK(b.contains(name));
    CHECK(b.get(name) == t);
  }
  CHECK(b.entries()[0].first == "conv.weight");
  CHECK_FALSE(b.contains("missing"));
  CHECK_THROWS_AS(b.get("missing"), CheckpointError);
}

TEST_CASE("archive errors are classified") {
  TempDir dir("crfill_test_archive_errors");
  auto kind_of = [](const std::string& path) {
    try {
      TensorArchive::load(path);
    } catch (const CheckpointError& e) {
      return static_cast<int>(e.kind());
    }
    return -1;
  };
  CHECK(kind_of((dir.path / "none.crfa").string()) == static_cast<int>(CheckpointError::Kind::kMissing));

  std::ofstream((dir.path / "junk.crfa").string()) << "definitely not";
  CHECK(kind_of((dir.path / "junk.crfa").string()) == static_cast<int>(CheckpointError::Kind::kCorrupt));

  TensorArchive a;
  a.put("w", Tensor<float>({16, 16}, 1.0f));
  const auto good = (dir.path / "good.crfa").string();
  a.save(good);
  const auto size = fs::file_size(good);
  fs::copy_file(good, dir.path / "cut.crfa");
  fs::resize_file(dir.path / "cut.crfa", size - 7);
  CHECK(kind_of((dir.path / "cut.crfa").string()) == static_cast<int>(CheckpointError::Kind::kCorrupt));

  // Bump the version field that follows the 4-byte magic.
  std::fstream f(good, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(4);
  const char bumped[4] = {99, 0, 0, 0};
  f.write(bumped, 4);
  f.close();
  CHECK(kind_of(good) == static_cast<int>(CheckpointError::Kind::kVersion));
}

TEST_CASE("manifests") {
  TempDir dir("crfill_test_manifest");
  const std::string path = (dir.path / "manifest.txt").string();
  write_manifest(path, {{"step", "12"}, {"config_hash", "abc"}, {"seed", "3"}});
  auto m = read_manifest(path);
  CHECK(m.size() == 3);
  CHECK(m["step"] == "12");
  CHECK(m["config_hash"] == "abc");
  CHECK_THROWS_AS(read_manifest((dir.path / "nope.txt").string()), CheckpointError);
}
