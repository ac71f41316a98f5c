#include "crfill/cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "crfill/evalbench.hpp"
#include "crfill/imageio.hpp"
#include "crfill/metrics.hpp"
#include "crfill/ops.hpp"
#include "crfill/train.hpp"

namespace fs = std::filesystem;

namespace crfill {

namespace {

/// Failure carrying its exit code and category.
struct CliError : std::runtime_error {
  CliError(int code, std::string category, const std::string& what)
      : std::runtime_error(what), code(code), category(std::move(category)) {}
  int code;
  std::string category;
};

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string ckpt;
  std::vector<std::string> mask_kinds;
  std::vector<int> resolutions;
  std::string cr;
  bool highres = false;
  bool resume = false;
  std::string source = "gt";
  std::string image;
  std::string mask;
  int count = 8;
  int repeats = 5;
};

std::string one_line(std::string text) {
  for (auto& c : text) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return text;
}

void ensure_dir(const std::string& dir) {
  if (dir.empty()) throw CliError(kExitUsage, "usage", "--out is required");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw CliError(kExitFailure, "io", "cannot create " + dir + ": " + ec.message());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw CliError(kExitFailure, "io", "cannot write " + path.string());
  return f;
}

/// Config file, then --set overrides, then the dedicated flags.
TrainConfig resolve_config(const Options& o) {
  Config cfg;
  if (!o.config_path.empty()) {
    if (!fs::exists(o.config_path)) throw CliError(kExitUsage, "config", "config file not found: " + o.config_path);
    cfg = Config::load(o.config_path);
  }
  for (const auto& kv : o.overrides) cfg.apply_override(kv);
  if (o.seed) cfg.set("seed", std::to_string(*o.seed));
  if (!o.cr.empty()) cfg.set("cr", o.cr);
  if (!o.mask_kinds.empty()) {
    std::string joined;
    for (const auto& k : o.mask_kinds) joined += (joined.empty() ? "" : ",") + k;
    cfg.set("mask_kinds", joined);
  }
  if (!o.resolutions.empty()) cfg.set("crop", std::to_string(o.resolutions.front()));
  TrainConfig config = train_config_from(cfg);
  config.validate();
  return config;
}

std::string command_line(const std::vector<std::string>& args) {
  std::string s;
  for (const auto& a : args) s += (s.empty() ? "" : " ") + a;
  return s;
}

/// Checkpoint config with --set overrides and the evaluation flags applied on top. The networks always
/// come from the checkpoint.
TrainConfig eval_config(const TrainConfig& trained, const Options& o) {
  Config cfg = to_config(trained);
  for (const auto& kv : o.overrides) cfg.apply_override(kv);
  if (o.seed) cfg.set("seed", std::to_string(*o.seed));
  if (!o.mask_kinds.empty()) {
    std::string joined;
    for (const auto& k : o.mask_kinds) joined += (joined.empty() ? "" : ",") + k;
    cfg.set("mask_kinds", joined);
  }
  if (!o.resolutions.empty()) cfg.set("crop", std::to_string(o.resolutions.front()));
  TrainConfig config = train_config_from(cfg);
  config.validate();
  config.data.folder = resolve_data_folder(config.data.folder);
  return config;
}

std::unique_ptr<TrainState> require_checkpoint(const std::string& dir) {
  if (dir.empty()) throw CliError(kExitUsage, "usage", "--ckpt is required");
  return load_checkpoint(dir);
}

int cmd_train(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  TrainConfig config = resolve_config(o);
  ensure_dir(o.out);
  config.data.folder = resolve_data_folder(config.data.folder);
  write_run_manifest((fs::path(o.out) / "run_manifest.txt").string(), config, command_line(args));
  TrainRun run = run_training(config, o.out, o.resume);
  const std::uint64_t steps = run.records.empty() ? 0 : run.records.back().step + 1;
  const double total = run.records.empty() ? 0.0 : run.records.back().total;
  out << "trained steps=" << steps << " total=" << total << " ckpt=" << run.checkpoint_dir << "\n";
  return kExitOk;
}

int cmd_eval(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  auto state = require_checkpoint(o.ckpt);
  const TrainConfig config = eval_config(state->config, o);
  ensure_dir(o.out);
  write_run_manifest((fs::path(o.out) / "run_manifest.txt").string(), config, command_line(args));
  auto images = make_image_source(held_out_spec(config.data), config.seed);
  EvalSet set{images.get(), config.masks, config.seed, config.eval_samples};
  const MetricsRecord record = eval_model(state->generator, set, o.highres);
  {
    auto f = open_out(fs::path(o.out) / "metrics.csv");
    write_metrics_csv(f, record);
  }
  {
    auto f = open_out(fs::path(o.out) / "samples.csv");
    write_samples_csv(f, record);
  }
  const MetricsRow& all = record.overall();
  out << "eval count=" << all.count << " l1=" << all.l1 << " psnr=" << all.psnr << " ssim=" << all.ssim << "\n";
  return kExitOk;
}

int cmd_infer(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  if (o.image.empty() || o.mask.empty()) throw CliError(kExitUsage, "usage", "--image and --mask are required");
  if (o.out.empty()) throw CliError(kExitUsage, "usage", "--out is required");
  auto state = require_checkpoint(o.ckpt);
  const fs::path target(o.out);
  if (target.has_parent_path()) ensure_dir(target.parent_path().string());
  write_run_manifest(target.string() + ".manifest.txt", state->config, command_line(args));
  const Tensor<float> x = load_image(o.image);
  const Mask mask = load_mask_png(o.mask);
  if (mask.dim(2) != x.dim(2) || mask.dim(3) != x.dim(3)) {
    throw ImageError("mask " + to_string(mask.shape()) + " does not match image " + to_string(x.shape()));
  }
  const Tensor<float> u = apply_mask(x, mask);
  const Tensor<float> y =
      o.highres ? state->generator.highres_inpaint(u, mask) : state->generator.inpaint(u, mask);
  save_image(target.string(), y);
  out << "infer out=" << target.string() << " coverage=" << coverage(mask) << "\n";
  return kExitOk;
}

int cmd_jigsaw(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  std::unique_ptr<TrainState> state;
  TrainConfig config;
  if (!o.ckpt.empty()) {
    state = load_checkpoint(o.ckpt);
    config = eval_config(state->config, o);
  } else {
    config = resolve_config(o);
    config.data.folder = resolve_data_folder(config.data.folder);
  }
  const int patch = config.nets.generator.patch;
  SimilarityFn source;
  if (o.source == "gt") {
    source = ground_truth_similarity(kContextScale, kContextScale);
  } else if (o.source == "random") {
    source = random_similarity(kContextScale, kContextScale, config.seed);
  } else if (o.source == "encoder" || o.source == "ca") {
    if (!state) throw CliError(kExitUsage, "usage", "--source " + o.source + " needs --ckpt");
    if (o.source == "encoder") {
      source = encoder_similarity(state->generator, state->similarity, patch, config.nets.generator.stride);
    } else {
      if (!state->config.nets.generator.contextual_attention) {
        throw CliError(kExitUsage, "usage", "--source ca needs a checkpoint trained with attention=on");
      }
      source = attention_similarity(state->generator);
    }
  } else {
    throw CliError(kExitUsage, "usage", "unknown --source " + o.source + " (gt, random, encoder, ca)");
  }
  ensure_dir(o.out);
  write_run_manifest((fs::path(o.out) / "run_manifest.txt").string(), config, command_line(args));
  auto images = make_image_source(held_out_spec(config.data), config.seed);
  EvalSet set{images.get(), config.masks, config.seed, config.eval_samples};
  const MetricsRecord record = eval_jigsaw(source, set);
  {
    auto f = open_out(fs::path(o.out) / "jigsaw.csv");
    write_metrics_csv(f, record);
  }
  {
    auto f = open_out(fs::path(o.out) / "jigsaw_samples.csv");
    write_samples_csv(f, record);
  }
  const MetricsRow& all = record.overall();
  out << "jigsaw source=" << o.source << " count=" << all.count << " l1=" << all.l1 << " psnr=" << all.psnr
      << "\n";
  return kExitOk;
}

int cmd_bench(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  BenchOptions options;
  if (!o.resolutions.empty()) options.resolutions = o.resolutions;
  options.repeats = o.repeats;
  options.highres = o.highres;
  if (o.seed) options.seed = *o.seed;
  if (options.repeats < 5) throw CliError(kExitUsage, "usage", "--repeats must be >= 5");
  for (int r : options.resolutions) {
    if (r < 16 || r % 16 != 0) throw CliError(kExitUsage, "usage", "bench resolutions must be multiples of 16");
  }
  ensure_dir(o.out);
  TrainConfig config;
  config.seed = options.seed;
  write_run_manifest((fs::path(o.out) / "run_manifest.txt").string(), config, command_line(args));
  const auto records = bench_complexity(options);
  auto f = open_out(fs::path(o.out) / "bench.csv");
  write_bench_csv(f, records);
  for (const auto& r : records) {
    out << "bench variant=" << r.variant << " resolution=" << r.resolution << " seconds=" << r.seconds
        << (r.unstable ? " unstable" : "") << "\n";
  }
  return kExitOk;
}

int cmd_masks(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  TrainConfig config = resolve_config(o);
  const int size = o.resolutions.empty() ? config.data.crop : o.resolutions.front();
  if (o.count < 1) throw CliError(kExitUsage, "usage", "--count must be >= 1");
  ensure_dir(o.out);
  write_run_manifest((fs::path(o.out) / "run_manifest.txt").string(), config, command_line(args));
  MaskGenerator gen(config.masks, config.seed);
  auto f = open_out(fs::path(o.out) / "masks.csv");
  f << "file,kind,coverage\n";
  for (int i = 0; i < o.count; ++i) {
    const MaskKind kind = config.masks.kinds[static_cast<std::size_t>(i) % config.masks.kinds.size()];
    const Mask m = gen.generate(kind, size, size);
    char name[32];
    std::snprintf(name, sizeof name, "mask_%04d.png", i);
    save_mask_png((fs::path(o.out) / name).string(), m);
    f << name << ',' << to_string(kind) << ',' << coverage(m) << '\n';
  }
  out << "masks count=" << o.count << " resolution=" << size << "\n";
  return kExitOk;
}


int report(std::ostream& err, int code, const std::string& category, const std::string& msg) {
  err << "error category=" << category << " msg=" << one_line(msg) << "\n";
  return code;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  init_runtime();
  CLI::App app{"crfill: coarse-to-fine inpainting with contextual reconstruction", "crfill"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "flat key=value config file");
    sub->add_option("--set", o.overrides, "key=value override (repeatable)");
    sub->add_option("--seed", o.seed, "master seed");
    sub->add_option("--out", o.out, "output directory (infer: output PNG)");
    sub->add_option("--mask-kind", o.mask_kinds, "square, irregular or blob (repeatable)")->delimiter(',');
    sub->add_option("--resolution", o.resolutions, "image side (bench: repeatable)")->delimiter(',');
  };
  auto add_ckpt = [&](CLI::App* sub) { sub->add_option("--ckpt", o.ckpt, "checkpoint directory"); };

  auto* train = app.add_subcommand("train", "train a generator");
  add_common(train);
  train->add_option("--cr", o.cr, "contextual reconstruction branch")->check(CLI::IsMember({"on", "off"}));
  train->add_flag("--resume", o.resume, "continue from <out>/ckpt");

  auto* eval = app.add_subcommand("eval", "L1/PSNR/SSIM on held-out samples");
  add_common(eval);
  add_ckpt(eval);
  eval->add_flag("--highres", o.highres, "run the coarse network at half resolution");

  auto* infer = app.add_subcommand("infer", "inpaint one image");
  add_common(infer);
  add_ckpt(infer);
  infer->add_option("--image", o.image, "input image")->required();
  infer->add_option("--mask", o.mask, "mask PNG, nonzero = missing")->required();
  infer->add_flag("--highres", o.highres, "run the coarse network at half resolution");

  auto* jigsaw = app.add_subcommand("jigsaw", "reference-patch quality of a similarity source");
  add_common(jigsaw);
  add_ckpt(jigsaw);
  jigsaw->add_option("--source", o.source, "gt, random, encoder or ca")
      ->check(CLI::IsMember({"gt", "random", "encoder", "ca"}));

  auto* bench = app.add_subcommand("bench", "wall-time of the CA layer vs the attention-free generator");
  add_common(bench);
  bench->add_option("--repeats", o.repeats, "timed runs per point");
  bench->add_flag("--highres", o.highres, "add a 1024x1024 half-scale row");

  auto* masks = app.add_subcommand("masks", "export masks as 1-bit PNG");
  add_common(masks);
  masks->add_option("--count", o.count, "number of masks");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    return report(err, kExitUsage, "usage", e.what());
  }

  std::vector<std::string> full{"crfill"};
  full.insert(full.end(), args.begin(), args.end());
  try {
    if (train->parsed()) return cmd_train(o, full, out);
    if (eval->parsed()) return cmd_eval(o, full, out);
    if (infer->parsed()) return cmd_infer(o, full, out);
    if (jigsaw->parsed()) return cmd_jigsaw(o, full, out);
    if (bench->parsed()) return cmd_bench(o, full, out);
    if (masks->parsed()) return cmd_masks(o, full, out);
    return report(err, kExitUsage, "usage", "no subcommand");
  } catch (const CliError& e) {
    return report(err, e.code, e.category, e.what());
  } catch (const UnknownKeyError& e) {
    return report(err, kExitUsage, "unknown_key", e.what());
  } catch (const ConfigError& e) {
    return report(err, kExitUsage, "config", e.what());
  } catch (const CheckpointError& e) {
    switch (e.kind()) {
      case CheckpointError::Kind::kMissing:
        return report(err, kExitMissingCheckpoint, "missing_checkpoint", e.what());
      case CheckpointError::Kind::kVersion:
      case CheckpointError::Kind::kConfigMismatch:
        return report(err, kExitCheckpointMismatch, "checkpoint_mismatch", e.what());
      case CheckpointError::Kind::kCorrupt:
        return report(err, kExitMissingCheckpoint, "corrupt_checkpoint", e.what());
    }
    return report(err, kExitFailure, "checkpoint", e.what());
  } catch (const ImageError& e) {
    return report(err, kExitBadImage, "bad_image", e.what());
  } catch (const NonFiniteLossError& e) {
    return report(err, kExitNonFinite, "non_finite_loss", e.what());
  } catch (const EmptyDatasetError& e) {
    return report(err, kExitEmptyDataset, "empty_dataset", e.what());
  } catch (const std::invalid_argument& e) {
    return report(err, kExitUsage, "invalid_argument", e.what());
  } catch (const std::exception& e) {
    return report(err, kExitFailure, "internal", e.what());
  }
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace crfill
