#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "crfill/maskgen.hpp"
#include "crfill/tensor.hpp"

namespace crfill {

/// splitmix64 finaliser; combines a seed with stream identifiers into an independent seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

enum class TextureFamily { kStripes, kChecker, kRandomDot };

std::string to_string(TextureFamily family);
TextureFamily parse_texture_family(const std::string& name);

/// (1,3,size,size) image in [-1,1] made by repeating a random tile x tile motif.
Tensor<float> synth_texture(int size, int tile, TextureFamily family, std::uint64_t seed);

/// Ground truth X, mask M and U = X (x) (1 - M). Tensors are (N,C,H,W).
struct Sample {
  Tensor<float> x;
  Tensor<float> mask;
  Tensor<float> u;
};

/// X (x) (1 - M), missing pixels exactly zero.
Tensor<float> apply_mask(const Tensor<float>& x, const Tensor<float>& mask);
/// Builds a sample; throws if X leaves [-1,1] or the mask is not binary or does not fit.
Sample make_sample(const Tensor<float>& x, const Tensor<float>& mask);
/// The sample as it survives 8-bit export and reload.
Sample quantize_sample(const Sample& s);
/// Writes <stem>_x.png, <stem>_u.png, <stem>_mask.png for item 0.
void save_sample(const std::string& dir, const std::string& stem, const Sample& s);
Sample load_sample(const std::string& dir, const std::string& stem);

struct DatasetSpec {
  enum class Source { kSynthetic, kFolder };
  Source source = Source::kSynthetic;
  std::string folder;
  int crop = 64;
  int tile = 16;
  bool flip = false;  // random horizontal flips (folder source)
  std::uint64_t split_seed = 0;
  std::vector<TextureFamily> families{TextureFamily::kStripes, TextureFamily::kChecker, TextureFamily::kRandomDot};
};

/// Index-addressable image stream; item i is a pure function of (spec, seed, i).
class ImageSource {
 public:
  virtual ~ImageSource() = default;
  virtual Tensor<float> image(std::uint64_t index) const = 0;
  /// Images per epoch; 0 when unbounded.
  virtual std::size_t epoch_size() const = 0;
  virtual int crop() const = 0;
};

class SyntheticSource : public ImageSource {
 public:
  SyntheticSource(DatasetSpec spec, std::uint64_t seed);
  Tensor<float> image(std::uint64_t index) const override;
  std::size_t epoch_size() const override { return 0; }
  int crop() const override { return spec_.crop; }
  TextureFamily family(std::uint64_t index) const;

 private:
  DatasetSpec spec_;
  std::uint64_t seed_;
};

class EmptyDatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decoded images of a folder; order per epoch is a seeded permutation, crops are seeded per item.
class FolderSource : public ImageSource {
 public:
  Tensor<float> image(std::uint64_t index) const override;
  std::size_t epoch_size() const override { return images_.size(); }
  int crop() const override { return spec_.crop; }

  const std::vector<std::string>& warnings() const { return warnings_; }
  const std::vector<std::string>& paths() const { return paths_; }
  /// One line per item of the epoch: "path top left seed".
  std::vector<std::string> manifest(std::uint64_t epoch) const;

 private:
  friend std::unique_ptr<FolderSource> load_folder(const std::string& path, const DatasetSpec& spec,
                                                   std::uint64_t seed);
  struct Placement {
    std::size_t image;
    int top, left;
    bool flip;
    std::uint64_t seed;
  };
  Placement place(std::uint64_t index) const;

  DatasetSpec spec_;
  std::uint64_t seed_ = 0;
  std::vector<std::string> paths_;
  std::vector<Tensor<float>> images_;
  std::vector<std::string> warnings_;
};

/// Scans `path` (sorted by name) for PNG/JPEG images. Unreadable files and images smaller than the crop
/// are skipped with a warning; throws EmptyDatasetError when nothing usable remains.
std::unique_ptr<FolderSource> load_folder(const std::string& path, const DatasetSpec& spec, std::uint64_t seed);

std::unique_ptr<ImageSource> make_image_source(const DatasetSpec& spec, std::uint64_t seed);

struct Batch {
  std::uint64_t step = 0;
  MaskKind kind = MaskKind::kSquare;
  Sample sample;
};

/// Mini-batch for `step`: images step*n .. step*n+n-1 and masks from a generator seeded by (seed, step).
Batch assemble_batch(const ImageSource& images, const MaskPolicy& policy, std::uint64_t seed, std::uint64_t step,
                     int batch_size);

/// Computes items ahead of time on worker threads but hands them out strictly by sequence number,
/// so the emitted order equals the single-worker order.
template <typename Item>
class Prefetcher {
 public:
  Prefetcher(std::function<Item(std::uint64_t)> produce, std::uint64_t first, int workers, int depth = 4)
      : produce_(std::move(produce)), next_out_(first), next_claim_(first), depth_(std::max(1, depth)) {
    for (int i = 0; i < workers; ++i) threads_.emplace_back([this] { work(); });
  }
  ~Prefetcher() {
    {
      std::lock_guard lock(mutex_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }
  Prefetcher(const Prefetcher&) = delete;
  Prefetcher& operator=(const Prefetcher&) = delete;

  Item next() {
    if (threads_.empty()) return produce_(next_out_++);
    std::unique_lock lock(mutex_);
    // A failure surfaces only when its item is due, so earlier items are still handed out.
    cv_.wait(lock, [this] { return ready_.count(next_out_) != 0 || (failure_ && failure_seq_ == next_out_); });
    if (ready_.count(next_out_) == 0) std::rethrow_exception(failure_);
    Item item = std::move(ready_.at(next_out_));
    ready_.erase(next_out_++);
    cv_.notify_all();
    return item;
  }

 private:
  void work() {
    for (;;) {
      std::uint64_t seq;
      {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [this] { return stop_ || next_claim_ < next_out_ + depth_; });
        if (stop_) return;
        seq = next_claim_++;
      }
      try {
        Item item = produce_(seq);
        std::lock_guard lock(mutex_);
        ready_.emplace(seq, std::move(item));
      } catch (...) {
        std::lock_guard lock(mutex_);
        if (!failure_ || seq < failure_seq_) {
          failure_ = std::current_exception();
          failure_seq_ = seq;
        }
      }
      cv_.notify_all();
    }
  }

  std::function<Item(std::uint64_t)> produce_;
  std::uint64_t next_out_;
  std::uint64_t next_claim_;
  std::uint64_t depth_;
  std::map<std::uint64_t, Item> ready_;
  std::exception_ptr failure_;
  std::uint64_t failure_seq_ = 0;
  bool stop_ = false;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::vector<std::thread> threads_;
};

}  // namespace crfill
