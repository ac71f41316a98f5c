#include "crfill/data.hpp"

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "crfill/imageio.hpp"

namespace crfill {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ (b * 0x2545f4914f6cdd1dULL));
}

std::string to_string(TextureFamily family) {
  switch (family) {
    case TextureFamily::kStripes:
      return "stripes";
    case TextureFamily::kChecker:
      return "checker";
    case TextureFamily::kRandomDot:
      return "dots";
  }
  return "unknown";
}

TextureFamily parse_texture_family(const std::string& name) {
  if (name == "stripes") return TextureFamily::kStripes;
  if (name == "checker") return TextureFamily::kChecker;
  if (name == "dots") return TextureFamily::kRandomDot;
  throw std::invalid_argument("unknown texture family '" + name + "'");
}

namespace {

using Colour = std::array<float, 3>;

Colour random_colour(Rng& rng) {
  std::uniform_real_distribution<float> d(-0.9f, 0.9f);
  return {d(rng), d(rng), d(rng)};
}

std::vector<Colour> make_motif(int tile, TextureFamily family, Rng& rng) {
  std::vector<Colour> motif(static_cast<std::size_t>(tile) * tile);
  auto at = [&](int y, int x) -> Colour& { return motif[static_cast<std::size_t>(y) * tile + x]; };
  switch (family) {
    case TextureFamily::kStripes: {
      std::vector<Colour> palette{random_colour(rng), random_colour(rng), random_colour(rng)};
      const int dy = std::uniform_int_distribution<int>(0, 1)(rng);
      const int dx = dy == 0 ? 1 : std::uniform_int_distribution<int>(0, 1)(rng);
      const int bands = std::uniform_int_distribution<int>(2, 5)(rng);
      const int shift = std::uniform_int_distribution<int>(0, tile - 1)(rng);
      for (int y = 0; y < tile; ++y) {
        for (int x = 0; x < tile; ++x) {
          const int phase = (dy * y + dx * x + shift) % tile;
          at(y, x) = palette[static_cast<std::size_t>(phase * bands / tile % 3)];
        }
      }
      break;
    }
    case TextureFamily::kChecker: {
      const Colour a = random_colour(rng), b = random_colour(rng);
      const int cells = std::uniform_int_distribution<int>(0, 1)(rng) ? 2 : 4;
      const int cell = std::max(1, tile / cells);
      std::normal_distribution<float> jitter(0.0f, 0.08f);
      std::vector<Colour> shades;
      for (int i = 0; i < cells * cells; ++i) {
        Colour c = (i / cells + i % cells) % 2 ? a : b;
        for (auto& v : c) v = std::clamp(v + jitter(rng), -1.0f, 1.0f);
        shades.push_back(c);
      }
      for (int y = 0; y < tile; ++y) {
        for (int x = 0; x < tile; ++x) {
          const int cy = std::min(cells - 1, y / cell), cx = std::min(cells - 1, x / cell);
          at(y, x) = shades[static_cast<std::size_t>(cy * cells + cx)];
        }
      }
      break;
    }
    case TextureFamily::kRandomDot: {
      const Colour background = random_colour(rng);
      for (auto& c : motif) c = background;
      const int dots = std::uniform_int_distribution<int>(3, 6)(rng);
      std::uniform_int_distribution<int> pos(0, tile - 1);
      std::uniform_int_distribution<int> rad(1, std::max(1, tile / 4));
      for (int d = 0; d < dots; ++d) {
        const Colour c = random_colour(rng);
        const int cy = pos(rng), cx = pos(rng), r = rad(rng);
        for (int y = -r; y <= r; ++y) {
          for (int x = -r; x <= r; ++x) {
            if (x * x + y * y > r * r) continue;
            at(((cy + y) % tile + tile) % tile, ((cx + x) % tile + tile) % tile) = c;
          }
        }
      }
      break;
    }
  }
  return motif;
}

}  // namespace

Tensor<float> synth_texture(int size, int tile, TextureFamily family, std::uint64_t seed) {
  if (tile <= 0 || size <= 0 || size % tile != 0) {
    throw std::invalid_argument("synth_texture: tile " + std::to_string(tile) + " does not divide size " +
                                std::to_string(size));
  }
  Rng rng(seed);
  const auto motif = make_motif(tile, family, rng);
  Tensor<float> img({1, 3, size, size});
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        img.at(0, c, y, x) = motif[static_cast<std::size_t>(y % tile) * tile + x % tile][static_cast<std::size_t>(c)];
      }
    }
  }
  return img;
}

Tensor<float> apply_mask(const Tensor<float>& x, const Tensor<float>& mask) {
  if (x.rank() != 4 || mask.rank() != 4 || mask.dim(1) != 1 || mask.dim(0) != x.dim(0) || mask.dim(2) != x.dim(2) ||
      mask.dim(3) != x.dim(3)) {
    throw DimensionError("apply_mask: image " + to_string(x.shape()) + " and mask " + to_string(mask.shape()) +
                         " disagree");
  }
  Tensor<float> u = x;
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (int b = 0; b < n; ++b) {
    const float* m = mask.data() + static_cast<std::size_t>(b) * hw;
    for (int ch = 0; ch < c; ++ch) {
      float* p = u.data() + (static_cast<std::size_t>(b) * c + ch) * hw;
      for (int i = 0; i < hw; ++i) {
        if (m[i] != 0.0f) p[i] = 0.0f;
      }
    }
  }
  return u;
}

Sample make_sample(const Tensor<float>& x, const Tensor<float>& mask) {
  for (float v : x.values()) {
    if (!(v >= -1.0f && v <= 1.0f)) throw std::invalid_argument("make_sample: X outside [-1, 1]");
  }
  for (float v : mask.values()) {
    if (v != 0.0f && v != 1.0f) throw std::invalid_argument("make_sample: mask is not binary");
  }
  return Sample{x, mask, apply_mask(x, mask)};
}

Sample quantize_sample(const Sample& s) { return make_sample(quantize_tensor(s.x), s.mask); }

void save_sample(const std::string& dir, const std::string& stem, const Sample& s) {
  const std::filesystem::path base(dir);
  save_image((base / (stem + "_x.png")).string(), batch_item(s.x, 0));
  save_image((base / (stem + "_u.png")).string(), batch_item(s.u, 0));
  save_mask_png((base / (stem + "_mask.png")).string(), batch_item(s.mask, 0));
}

Sample load_sample(const std::string& dir, const std::string& stem) {
  const std::filesystem::path base(dir);
  Tensor<float> x = load_image((base / (stem + "_x.png")).string());
  Tensor<float> mask = load_mask_png((base / (stem + "_mask.png")).string());
  // U is re-derived: its stored hole pixels hold the quantised zero, not zero.
  Tensor<float> u = apply_mask(load_image((base / (stem + "_u.png")).string()), mask);
  Sample s = make_sample(x, mask);
  if (!(s.u == u)) throw ImageError("load_sample: stored U does not match X outside the hole");
  return s;
}

SyntheticSource::SyntheticSource(DatasetSpec spec, std::uint64_t seed) : spec_(std::move(spec)), seed_(seed) {
  if (spec_.families.empty()) throw std::invalid_argument("synthetic source needs at least one texture family");
  if (spec_.crop % spec_.tile != 0) throw std::invalid_argument("synthetic source: tile must divide crop");
}

TextureFamily SyntheticSource::family(std::uint64_t index) const {
  const std::uint64_t h = derive_seed(seed_ ^ spec_.split_seed, index, 1);
  return spec_.families[static_cast<std::size_t>(h % spec_.families.size())];
}

Tensor<float> SyntheticSource::image(std::uint64_t index) const {
  return synth_texture(spec_.crop, spec_.tile, family(index), derive_seed(seed_ ^ spec_.split_seed, index, 2));
}

FolderSource::Placement FolderSource::place(std::uint64_t index) const {
  const std::size_t n = images_.size();
  const std::uint64_t epoch = index / n;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle(derive_seed(seed_ ^ spec_.split_seed, epoch, 3));
  std::shuffle(order.begin(), order.end(), shuffle);
  Placement p{};
  p.image = order[static_cast<std::size_t>(index % n)];
  p.seed = derive_seed(seed_ ^ spec_.split_seed, index, 4);
  Rng rng(p.seed);
  const Tensor<float>& img = images_[p.image];
  p.top = std::uniform_int_distribution<int>(0, img.dim(2) - spec_.crop)(rng);
  p.left = std::uniform_int_distribution<int>(0, img.dim(3) - spec_.crop)(rng);
  p.flip = spec_.flip && std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  return p;
}

Tensor<float> FolderSource::image(std::uint64_t index) const {
  const Placement p = place(index);
  const Tensor<float>& img = images_[p.image];
  const int crop = spec_.crop;
  Tensor<float> out({1, 3, crop, crop});
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < crop; ++y) {
      for (int x = 0; x < crop; ++x) {
        out.at(0, c, y, x) = img.at(0, c, p.top + y, p.left + (p.flip ? crop - 1 - x : x));
      }
    }
  }
  return out;
}

std::vector<std::string> FolderSource::manifest(std::uint64_t epoch) const {
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < images_.size(); ++i) {
    const Placement p = place(epoch * images_.size() + i);
    std::ostringstream os;
    os << paths_[p.image] << ' ' << p.top << ' ' << p.left << ' ' << p.seed;
    lines.push_back(os.str());
  }
  return lines;
}

std::unique_ptr<FolderSource> load_folder(const std::string& path, const DatasetSpec& spec, std::uint64_t seed) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(path)) throw EmptyDatasetError("dataset folder " + path + " does not exist");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(path)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  auto source = std::unique_ptr<FolderSource>(new FolderSource());
  source->spec_ = spec;
  source->seed_ = seed;
  for (const auto& f : files) {
    Tensor<float> img;
    try {
      img = load_image(f.string());
    } catch (const ImageError& e) {
      source->warnings_.push_back("skipped unreadable image " + f.string());
      continue;
    }
    if (std::min(img.dim(2), img.dim(3)) < spec.crop) {
      source->warnings_.push_back("skipped " + f.string() + ": smaller than crop " + std::to_string(spec.crop));
      continue;
    }
    source->paths_.push_back(f.string());
    source->images_.push_back(std::move(img));
  }
  for (const auto& w : source->warnings_) std::cerr << "warning: " << w << '\n';
  if (source->images_.empty()) throw EmptyDatasetError("no usable images in " + path);
  return source;
}

std::unique_ptr<ImageSource> make_image_source(const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.source == DatasetSpec::Source::kFolder) return load_folder(spec.folder, spec, seed);
  return std::make_unique<SyntheticSource>(spec, seed);
}

Batch assemble_batch(const ImageSource& images, const MaskPolicy& policy, std::uint64_t seed, std::uint64_t step,
                     int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  std::vector<Tensor<float>> xs;
  for (int i = 0; i < batch_size; ++i) xs.push_back(images.image(step * static_cast<std::uint64_t>(batch_size) + i));
  MaskGenerator masks(policy, derive_seed(seed, step, 5));
  auto mb = masks.next_batch(batch_size, images.crop(), images.crop());
  Batch b;
  b.step = step;
  b.kind = mb.kind;
  b.sample = make_sample(stack_batch(xs), mb.masks);
  return b;
}

}  // namespace crfill
