#include "crfill/train.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "crfill/imageio.hpp"

namespace crfill {

namespace fs = std::filesystem;

// ---- configuration ----------------------------------------------------------

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "seed",          "scale",        "lambda",        "beta",         "alpha",       "lr",
      "adam_beta1",    "adam_beta2",   "batch",         "max_steps",    "ckpt_every",  "log_every",
      "cr",            "freeze_cr",    "workers",       "eval_samples", "mask_kinds",  "square_side",
      "strokes",       "max_width",    "blobs",         "coverage_low", "coverage_high", "data_source",
      "data_folder",   "crop",         "tile",          "families",     "flip",        "split_seed",
      "base_width",    "depth",        "dilations",     "attention",    "patch",       "stride",
      "disc_width",    "disc_layers",  "cr_width"};
  return keys;
}

namespace {
const std::set<std::string> kRunControlKeys{"max_steps", "ckpt_every", "log_every", "workers", "eval_samples"};

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <typename V, typename F>
std::string join(const std::vector<V>& items, F f) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + f(items[i]);
  return out;
}

}  // namespace

std::string resolve_data_folder(const std::string& folder) {
  if (folder.empty() || fs::path(folder).is_absolute()) return folder;
  if (const char* root = std::getenv("CRFILL_DATA_ROOT")) return (fs::path(root) / folder).string();
  return folder;
}

void TrainConfig::validate() const {
  weights.validate();
  if (!(lr > 0)) throw ConfigError("lr must be > 0");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (masks.kinds.empty()) throw ConfigError("mask_kinds must not be empty");
  if (data.crop % 4 != 0 || data.crop < 16) throw ConfigError("crop must be a multiple of 4 and >= 16");
  if (data.source == DatasetSpec::Source::kSynthetic && (data.tile < 1 || data.crop % data.tile != 0)) {
    throw ConfigError("tile must divide crop");
  }
  if (data.source == DatasetSpec::Source::kFolder && data.folder.empty()) {
    throw ConfigError("data_folder is required for data_source=folder");
  }
  if (nets.generator.patch < 1 || nets.generator.stride < 1) throw ConfigError("patch and stride must be >= 1");
  if (nets.generator.base_width < 2 || nets.generator.depth < 1) throw ConfigError("base_width >= 2, depth >= 1");
  if (nets.cr_width < 1 || nets.discriminator.base_width < 1 || nets.discriminator.layers < 1) {
    throw ConfigError("network widths must be positive");
  }
  if (workers < 0) throw ConfigError("workers must be >= 0");
  if (eval_samples < 1) throw ConfigError("eval_samples must be >= 1");
  if (masks.band.low > masks.band.high) throw ConfigError("coverage_low must not exceed coverage_high");
}

TrainConfig train_config_from(const Config& config) {
  const std::set<std::string> known(config_keys().begin(), config_keys().end());
  for (const auto& [key, value] : config.entries()) {
    if (!known.count(key)) throw UnknownKeyError("unknown config key '" + key + "'");
  }
  TrainConfig c;
  auto has = [&](const char* k) { return config.has(k); };
  auto str = [&](const char* k) { return config.get(k); };
  if (has("scale")) {
    const std::string s = str("scale");
    if (s == "paper") {
      c.nets.generator = GeneratorConfig::paper_scale();
      c.nets.discriminator = DiscriminatorConfig{};
      c.nets.cr_width = 32;
      c.data.crop = 256;
      c.data.tile = 32;
    } else if (s != "toy") {
      throw ConfigError("key 'scale': expected toy or paper, got '" + s + "'");
    }
  }
  if (has("seed")) c.seed = parse_uint("seed", str("seed"));
  if (has("lambda")) c.weights.lambda = parse_double("lambda", str("lambda"));
  if (has("beta")) c.weights.beta = parse_double("beta", str("beta"));
  if (has("alpha")) c.weights.alpha = parse_double("alpha", str("alpha"));
  if (has("lr")) c.lr = parse_double("lr", str("lr"));
  if (has("adam_beta1")) c.adam_beta1 = parse_double("adam_beta1", str("adam_beta1"));
  if (has("adam_beta2")) c.adam_beta2 = parse_double("adam_beta2", str("adam_beta2"));
  if (has("batch")) c.batch = parse_int("batch", str("batch"));
  if (has("max_steps")) c.max_steps = parse_uint("max_steps", str("max_steps"));
  if (has("ckpt_every")) c.ckpt_every = parse_uint("ckpt_every", str("ckpt_every"));
  if (has("log_every")) c.log_every = std::max<std::uint64_t>(1, parse_uint("log_every", str("log_every")));
  if (has("cr")) c.cr = parse_switch("cr", str("cr"));
  if (has("freeze_cr")) c.freeze_cr_nets = parse_switch("freeze_cr", str("freeze_cr"));
  if (has("workers")) c.workers = parse_int("workers", str("workers"));
  if (has("eval_samples")) c.eval_samples = parse_int("eval_samples", str("eval_samples"));
  if (has("mask_kinds")) {
    c.masks.kinds.clear();
    for (const auto& k : split_list(str("mask_kinds"))) {
      try {
        c.masks.kinds.push_back(parse_mask_kind(k));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("key 'mask_kinds': ") + e.what());
      }
    }
  }
  if (has("square_side")) c.masks.square_side = parse_int("square_side", str("square_side"));
  if (has("strokes")) c.masks.strokes = parse_int("strokes", str("strokes"));
  if (has("max_width")) c.masks.max_width = parse_int("max_width", str("max_width"));
  if (has("blobs")) c.masks.blobs = parse_int("blobs", str("blobs"));
  if (has("coverage_low")) c.masks.band.low = parse_double("coverage_low", str("coverage_low"));
  if (has("coverage_high")) c.masks.band.high = parse_double("coverage_high", str("coverage_high"));
  if (has("data_source")) {
    const std::string s = str("data_source");
    if (s == "synthetic") {
      c.data.source = DatasetSpec::Source::kSynthetic;
    } else if (s == "folder") {
      c.data.source = DatasetSpec::Source::kFolder;
    } else {
      throw ConfigError("key 'data_source': expected synthetic or folder, got '" + s + "'");
    }
  }
  if (has("data_folder")) c.data.folder = str("data_folder");
  if (has("crop")) c.data.crop = parse_int("crop", str("crop"));
  if (has("tile")) c.data.tile = parse_int("tile", str("tile"));
  if (has("families")) {
    c.data.families.clear();
    for (const auto& f : split_list(str("families"))) {
      try {
        c.data.families.push_back(parse_texture_family(f));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("key 'families': ") + e.what());
      }
    }
    if (c.data.families.empty()) throw ConfigError("key 'families': empty list");
  }
  if (has("flip")) c.data.flip = parse_switch("flip", str("flip"));
  if (has("split_seed")) c.data.split_seed = parse_uint("split_seed", str("split_seed"));
  auto& g = c.nets.generator;
  if (has("base_width")) g.base_width = parse_int("base_width", str("base_width"));
  if (has("depth")) g.depth = parse_int("depth", str("depth"));
  if (has("dilations")) {
    g.dilations.clear();
    for (const auto& d : split_list(str("dilations"))) g.dilations.push_back(parse_int("dilations", d));
  }
  if (has("attention")) g.contextual_attention = parse_switch("attention", str("attention"));
  if (has("patch")) g.patch = parse_int("patch", str("patch"));
  if (has("stride")) g.stride = parse_int("stride", str("stride"));
  g.alpha = c.weights.alpha;
  if (has("disc_width")) c.nets.discriminator.base_width = parse_int("disc_width", str("disc_width"));
  if (has("disc_layers")) c.nets.discriminator.layers = parse_int("disc_layers", str("disc_layers"));
  if (has("cr_width")) c.nets.cr_width = parse_int("cr_width", str("cr_width"));
  c.validate();
  return c;
}

Config to_config(const TrainConfig& c) {
  Config out;
  const auto& g = c.nets.generator;
  out.set("seed", std::to_string(c.seed));
  out.set("lambda", fmt(c.weights.lambda));
  out.set("beta", fmt(c.weights.beta));
  out.set("alpha", fmt(c.weights.alpha));
  out.set("lr", fmt(c.lr));
  out.set("adam_beta1", fmt(c.adam_beta1));
  out.set("adam_beta2", fmt(c.adam_beta2));
  out.set("batch", std::to_string(c.batch));
  out.set("max_steps", std::to_string(c.max_steps));
  out.set("ckpt_every", std::to_string(c.ckpt_every));
  out.set("log_every", std::to_string(c.log_every));
  out.set("cr", c.cr ? "on" : "off");
  out.set("freeze_cr", c.freeze_cr_nets ? "on" : "off");
  out.set("workers", std::to_string(c.workers));
  out.set("eval_samples", std::to_string(c.eval_samples));
  out.set("mask_kinds", join(c.masks.kinds, [](MaskKind k) { return to_string(k); }));
  out.set("square_side", std::to_string(c.masks.square_side));
  out.set("strokes", std::to_string(c.masks.strokes));
  out.set("max_width", std::to_string(c.masks.max_width));
  out.set("blobs", std::to_string(c.masks.blobs));
  out.set("coverage_low", fmt(c.masks.band.low));
  out.set("coverage_high", fmt(c.masks.band.high));
  out.set("data_source", c.data.source == DatasetSpec::Source::kFolder ? "folder" : "synthetic");
  out.set("data_folder", c.data.folder);
  out.set("crop", std::to_string(c.data.crop));
  out.set("tile", std::to_string(c.data.tile));
  out.set("families", join(c.data.families, [](TextureFamily f) { return to_string(f); }));
  out.set("flip", c.data.flip ? "on" : "off");
  out.set("split_seed", std::to_string(c.data.split_seed));
  out.set("base_width", std::to_string(g.base_width));
  out.set("depth", std::to_string(g.depth));
  out.set("dilations", join(g.dilations, [](int d) { return std::to_string(d); }));
  out.set("attention", g.contextual_attention ? "on" : "off");
  out.set("patch", std::to_string(g.patch));
  out.set("stride", std::to_string(g.stride));
  out.set("disc_width", std::to_string(c.nets.discriminator.base_width));
  out.set("disc_layers", std::to_string(c.nets.discriminator.layers));
  out.set("cr_width", std::to_string(c.nets.cr_width));
  return out;
}

std::uint64_t config_hash(const TrainConfig& c) {
  std::string text;
  const Config resolved = to_config(c);
  for (const auto& [k, v] : resolved.entries()) {
    if (!kRunControlKeys.count(k)) text += k + "=" + v + "\n";
  }
  return fnv1a(text);
}

// ---- optimiser ----------------------------------------------------------------

Adam::Adam(std::vector<Var<float>> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.shape());
    v_.emplace_back(p.shape());
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  const float step_size = static_cast<float>(lr_ / c1);
  const float inv_c2 = static_cast<float>(1.0 / c2), eps = static_cast<float>(eps_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var<float>& p = params_[i];
    const float* g = p.grad().data();
    float* w = p.mutable_value().data();
    float* m = m_[i].data();
    float* v = v_[i].data();
    const std::size_t n = p.value().size();
    for (std::size_t j = 0; j < n; ++j) {
      m[j] = b1 * m[j] + (1.0f - b1) * g[j];
      v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
      w[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_c2) + eps);
    }
  }
}

void Adam::save(TensorArchive& archive, const std::string& prefix) const {
  archive.put(prefix + ".t", Tensor<float>({2}, {static_cast<float>(t_ >> 24), static_cast<float>(t_ & 0xffffff)}));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    archive.put(prefix + ".m" + std::to_string(i), m_[i]);
    archive.put(prefix + ".v" + std::to_string(i), v_[i]);
  }
}

void Adam::load(const TensorArchive& archive, const std::string& prefix) {
  const Tensor<float>& t = archive.get(prefix + ".t");
  t_ = (static_cast<std::uint64_t>(t[0]) << 24) | static_cast<std::uint64_t>(t[1]);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor<float>& m = archive.get(prefix + ".m" + std::to_string(i));
    const Tensor<float>& v = archive.get(prefix + ".v" + std::to_string(i));
    if (m.shape() != m_[i].shape() || v.shape() != v_[i].shape()) {
      throw CheckpointError(CheckpointError::Kind::kCorrupt, "optimizer state shape mismatch at " + prefix);
    }
    m_[i] = m;
    v_[i] = v;
  }
}

// ---- training state -----------------------------------------------------------

namespace {
std::vector<Var<float>> generator_side_params(TrainState& s) {
  std::vector<Var<float>> p = parameters_of<float>(s.generator);
  if (s.config.cr && !s.config.freeze_cr_nets) {
    for (auto& v : parameters_of<float>(s.similarity)) p.push_back(v);
    for (auto& v : parameters_of<float>(s.auxiliary)) p.push_back(v);
  }
  return p;
}
}  // namespace

TrainState::TrainState(const TrainConfig& cfg)
    : config(cfg),
      generator(cfg.nets.generator, derive_seed(cfg.seed, 100)),
      discriminator(cfg.nets.discriminator, derive_seed(cfg.seed, 101)),
      similarity(cfg.nets.cr_width, derive_seed(cfg.seed, 102)),
      auxiliary(cfg.nets.cr_width, derive_seed(cfg.seed, 103)) {
  config.validate();
  config.nets.generator.alpha = config.weights.alpha;
  g_opt = Adam(generator_side_params(*this), config.lr, config.adam_beta1, config.adam_beta2);
  d_opt = Adam(parameters_of<float>(discriminator), config.lr, config.adam_beta1, config.adam_beta2);
}

namespace {

Tensor<float> concat_batch(const Tensor<float>& a, const Tensor<float>& b) {
  Shape s = a.shape();
  s[0] += b.dim(0);
  std::vector<float> v(a.values().begin(), a.values().end());
  v.insert(v.end(), b.values().begin(), b.values().end());
  return Tensor<float>(std::move(s), std::move(v));
}

std::vector<int> range(int from, int to) {
  std::vector<int> r;
  for (int i = from; i < to; ++i) r.push_back(i);
  return r;
}

/// Freezes a parameter set for the lifetime of the guard.
class FreezeGuard {
 public:
  explicit FreezeGuard(std::vector<Var<float>> params) : params_(std::move(params)) {
    for (auto& p : params_) p.set_requires_grad(false);
  }
  ~FreezeGuard() {
    for (auto& p : params_) p.set_requires_grad(true);
  }

 private:
  std::vector<Var<float>> params_;
};

void require_finite(const LossRecord& r, const char* phase) {
  const double values[] = {r.d_loss, r.l1, r.adv, r.cr, r.total, r.coarse_l1};
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NonFiniteLossError(std::string("non-finite loss in ") + phase + " at step " + std::to_string(r.step), r);
    }
  }
}

}  // namespace

LossRecord train_step(TrainState& s, const Batch& batch) {
  const TrainConfig& cfg = s.config;
  const auto beta = static_cast<float>(cfg.weights.beta);
  const auto lambda = static_cast<float>(cfg.weights.lambda);
  const auto alpha = static_cast<float>(cfg.weights.alpha);
  const int patch = cfg.nets.generator.patch, stride = cfg.nets.generator.stride;
  const Tensor<float>& x = batch.sample.x;
  const Tensor<float>& mask = batch.sample.mask;
  const Var<float> u(batch.sample.u);
  const int n = x.dim(0);

  LossRecord rec;
  rec.step = s.step;

  // One generator pass serves both updates: G's parameters do not change during the D update, so its
  // detached composite is exactly what a separate no-grad pass would produce.
  GeneratorOutput<float> out = s.generator.forward(u, mask, /*detach_coarse=*/true);
  Tensor<float> fake;
  {
    NoGradGuard guard;
    fake = compose(detach(out.refined), u, mask).value();
  }

  // Discriminator on real and composited fake images in one pass.
  s.d_opt.zero_grad();
  Var<float> scores = s.discriminator.forward(Var<float>(concat_batch(x, fake)), true);
  Var<float> dl = d_loss(select_batch(scores, range(0, n)), select_batch(scores, range(n, 2 * n)));
  rec.d_loss = dl.value()[0];
  require_finite(rec, "discriminator update");
  backward(dl);
  s.d_opt.step();

  // Generator side; D is a fixed function here.
  FreezeGuard freeze(parameters_of<float>(s.discriminator));
  s.g_opt.zero_grad();
  Discriminate<float> discriminate = [&s](const Var<float>& img) { return s.discriminator.forward(img, false); };
  InpaintLoss<float> ly = g_inpaint_loss(out.refined, u, mask, x, discriminate, beta);
  Var<float> coarse = coarse_loss(out.coarse, x, beta);
  Var<float> total;
  if (cfg.cr) {
    Var<float> features = s.similarity.forward(compose(out.refined, u, mask), mask);
    SimilarityMap<float> sim = cosine_similarity(extract_patches(features, patch, stride));
    sim.known = known_sets(mask, patch, stride, kContextScale);
    Reconstruct<float> aux = [&](const Var<float>& uu, const Tensor<float>& mm, const SimilarityMap<float>& ss) {
      return s.auxiliary.reconstruct(uu, mm, ss, alpha, patch, stride);
    };
    CrLoss<float> cr = cr_loss(u, mask, x, sim, aux, discriminate, beta);
    rec.cr = cr.value.value()[0];
    rec.cr_skipped = cr.all_skipped();
    total = add(g_total_loss(ly.total, cr.value, lambda), coarse);
  } else {
    total = add(ly.total, coarse);
  }
  rec.l1 = ly.l1.value()[0];
  rec.adv = ly.adversarial.value()[0];
  {
    NoGradGuard guard;
    rec.coarse_l1 = mean_abs_diff(out.coarse, Var<float>(x)).value()[0];
  }
  rec.total = total.value()[0];
  require_finite(rec, "generator update");
  backward(total);
  s.g_opt.step();
  ++s.step;
  return rec;
}

std::vector<LossRecord> train_steps(TrainState& state, const ImageSource& images, std::uint64_t steps) {
  std::vector<LossRecord> records;
  const TrainConfig& c = state.config;
  const std::uint64_t first = state.step;
  Prefetcher<Batch> batches(
      [&](std::uint64_t step) { return assemble_batch(images, c.masks, c.seed, step, c.batch); }, first, c.workers);
  for (std::uint64_t i = 0; i < steps; ++i) records.push_back(train_step(state, batches.next()));
  return records;
}

// ---- checkpoints ----------------------------------------------------------------

namespace {

template <typename Net>
void save_params(Net& net, const std::string& path) {
  TensorArchive archive;
  net.visit_parameters("", [&](const std::string& name, Var<float>& p) { archive.put(name, p.value()); });
  if constexpr (requires { net.visit_buffers("", BufferVisitor<float>{}); }) {
    net.visit_buffers("", [&](const std::string& name, Tensor<float>& b) { archive.put(name, b); });
  }
  archive.save(path);
}

template <typename Net>
void load_params(Net& net, const std::string& path) {
  const TensorArchive archive = TensorArchive::load(path);
  net.visit_parameters("", [&](const std::string& name, Var<float>& p) {
    const Tensor<float>& t = archive.get(name);
    if (t.shape() != p.shape()) {
      throw CheckpointError(CheckpointError::Kind::kCorrupt,
                            path + ": tensor '" + name + "' has shape " + to_string(t.shape()) + ", expected " +
                                to_string(p.shape()));
    }
    p.mutable_value() = t;
  });
  if constexpr (requires { net.visit_buffers("", BufferVisitor<float>{}); }) {
    net.visit_buffers("", [&](const std::string& name, Tensor<float>& b) { b = archive.get(name); });
  }
}

std::string hash_hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::map<std::string, std::string> checked_manifest(const std::string& dir) {
  if (!fs::is_directory(dir)) throw CheckpointError(CheckpointError::Kind::kMissing, "no checkpoint at " + dir);
  auto manifest = read_manifest((fs::path(dir) / "manifest.txt").string());
  if (manifest["format"] != "crfill-checkpoint") {
    throw CheckpointError(CheckpointError::Kind::kCorrupt, dir + " is not a checkpoint");
  }
  if (manifest["version"] != std::to_string(kCheckpointVersion)) {
    throw CheckpointError(CheckpointError::Kind::kVersion, "checkpoint version " + manifest["version"] +
                                                               " is not supported (expected " +
                                                               std::to_string(kCheckpointVersion) + ")");
  }
  return manifest;
}

void load_state(TrainState& s, const std::string& dir, const std::map<std::string, std::string>& manifest) {
  const fs::path base(dir);
  load_params(s.generator, (base / "generator.crfa").string());
  load_params(s.discriminator, (base / "discriminator.crfa").string());
  load_params(s.similarity, (base / "similarity.crfa").string());
  load_params(s.auxiliary, (base / "auxiliary.crfa").string());
  const TensorArchive opt = TensorArchive::load((base / "optimizer.crfa").string());
  s.g_opt.load(opt, "g");
  s.d_opt.load(opt, "d");
  s.step = parse_uint("step", manifest.at("step"));
}

}  // namespace

void save_checkpoint(TrainState& s, const std::string& dir) {
  fs::create_directories(dir);
  const fs::path base(dir);
  save_params(s.generator, (base / "generator.crfa").string());
  save_params(s.discriminator, (base / "discriminator.crfa").string());
  save_params(s.similarity, (base / "similarity.crfa").string());
  save_params(s.auxiliary, (base / "auxiliary.crfa").string());
  TensorArchive opt;
  s.g_opt.save(opt, "g");
  s.d_opt.save(opt, "d");
  opt.save((base / "optimizer.crfa").string());
  {
    std::ofstream cfg(base / "config.cfg");
    cfg << to_config(s.config).serialize();
  }
  write_manifest((base / "manifest.txt").string(), {{"format", "crfill-checkpoint"},
                                                    {"version", std::to_string(kCheckpointVersion)},
                                                    {"config_hash", hash_hex(config_hash(s.config))},
                                                    {"step", std::to_string(s.step)},
                                                    {"seed", std::to_string(s.config.seed)},
                                                    {"code_version", kCodeVersion}});
}

TrainConfig checkpoint_config(const std::string& dir) {
  const auto manifest = checked_manifest(dir);
  const fs::path cfg_path = fs::path(dir) / "config.cfg";
  if (!fs::exists(cfg_path)) throw CheckpointError(CheckpointError::Kind::kMissing, "missing " + cfg_path.string());
  TrainConfig cfg = train_config_from(Config::load(cfg_path.string()));
  if (hash_hex(config_hash(cfg)) != manifest.at("config_hash")) {
    throw CheckpointError(CheckpointError::Kind::kConfigMismatch, "config.cfg does not match the manifest hash");
  }
  return cfg;
}

std::unique_ptr<TrainState> restore_checkpoint(const std::string& dir, const TrainConfig& config) {
  const auto manifest = checked_manifest(dir);
  const std::string want = hash_hex(config_hash(config));
  if (manifest.at("config_hash") != want) {
    throw CheckpointError(CheckpointError::Kind::kConfigMismatch,
                          "checkpoint config hash " + manifest.at("config_hash") + " differs from " + want);
  }
  auto state = std::make_unique<TrainState>(config);
  load_state(*state, dir, manifest);
  return state;
}

std::unique_ptr<TrainState> load_checkpoint(const std::string& dir) {
  const TrainConfig cfg = checkpoint_config(dir);
  return restore_checkpoint(dir, cfg);
}

Generator<float> load_generator(const std::string& dir) {
  const TrainConfig cfg = checkpoint_config(dir);
  TrainState probe(cfg);
  load_params(probe.generator, (fs::path(dir) / "generator.crfa").string());
  return probe.generator;
}

// ---- logging and full runs -------------------------------------------------------

void write_loss_header(std::ostream& out) { out << "step,d_loss,l1,adv,cr,total,coarse_l1,cr_skipped\n"; }

void write_loss_row(std::ostream& out, const LossRecord& r) {
  std::ostringstream os;
  os << std::setprecision(9) << r.step << ',' << r.d_loss << ',' << r.l1 << ',' << r.adv << ',' << r.cr << ','
     << r.total << ',' << r.coarse_l1 << ',' << (r.cr_skipped ? 1 : 0) << '\n';
  out << os.str();
}

void write_run_manifest(const std::string& path, const TrainConfig& config, const std::string& command) {
  std::map<std::string, std::string> fields = to_config(config).entries();
  fields["code_version"] = kCodeVersion;
  fields["command"] = command;
  fields["config_hash"] = hash_hex(config_hash(config));
  write_manifest(path, fields);
}

namespace {
void dump_diagnostics(const std::string& dir, const TrainConfig& c, const Batch& batch, const NonFiniteLossError& e) {
  fs::create_directories(dir);
  std::ofstream info(fs::path(dir) / "diagnostic.txt");
  const LossRecord& r = e.record();
  info << "error=" << e.what() << "\nstep=" << batch.step << "\nseed=" << c.seed
       << "\nmask_seed=" << derive_seed(c.seed, batch.step, 5) << "\nmask_kind=" << to_string(batch.kind)
       << "\nd_loss=" << r.d_loss << "\nl1=" << r.l1 << "\nadv=" << r.adv << "\ncr=" << r.cr << "\ntotal=" << r.total
       << '\n';
  try {
    save_sample(dir, "input", batch.sample);
  } catch (const std::exception&) {
    // Non-finite inputs cannot be quantised meaningfully; the text dump still stands.
  }
}
}  // namespace

TrainRun run_training(const TrainConfig& config_in, const std::string& out_dir, bool resume) {
  TrainConfig config = config_in;
  config.data.folder = resolve_data_folder(config.data.folder);
  fs::create_directories(out_dir);
  const fs::path base(out_dir);
  write_run_manifest((base / "run_manifest.txt").string(), config, "train");

  TrainRun run;
  run.checkpoint_dir = (base / "ckpt").string();
  std::unique_ptr<TrainState> state;
  if (resume && fs::exists(base / "ckpt" / "manifest.txt")) {
    state = restore_checkpoint(run.checkpoint_dir, config);
    state->config = config;
  } else {
    state = std::make_unique<TrainState>(config);
  }
  const auto images = make_image_source(config.data, config.seed);

  const bool append = resume && state->step > 0 && fs::exists(base / "losses.csv");
  std::ofstream csv(base / "losses.csv", append ? std::ios::app : std::ios::trunc);
  if (!append) write_loss_header(csv);

  Prefetcher<Batch> batches(
      [&](std::uint64_t step) { return assemble_batch(*images, config.masks, config.seed, step, config.batch); },
      state->step, config.workers);
  while (state->step < config.max_steps) {
    Batch batch = batches.next();
    LossRecord rec;
    try {
      rec = train_step(*state, batch);
    } catch (const NonFiniteLossError& e) {
      dump_diagnostics((base / "diagnostics").string(), config, batch, e);
      throw;
    }
    run.records.push_back(rec);
    if (rec.step % config.log_every == 0 || state->step == config.max_steps) {
      write_loss_row(csv, rec);
      csv.flush();
    }
    if (config.ckpt_every > 0 && state->step % config.ckpt_every == 0) save_checkpoint(*state, run.checkpoint_dir);
  }
  save_checkpoint(*state, run.checkpoint_dir);
  return run;
}

}  // namespace crfill
