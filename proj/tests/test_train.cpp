#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "crfill/train.hpp"

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

TrainConfig small_config(const std::string& extra = "") {
  return train_config_from(Config::parse_string(
      "crop=32\ntile=8\nbatch=2\nbase_width=8\ndilations=2,4\ndisc_width=8\ndisc_layers=3\ncr_width=4\n" + extra));
}

template <typename Net>
std::vector<Tensor<float>> snapshot(Net& net) {
  std::vector<Tensor<float>> out;
  for (auto& p : parameters_of<float>(net)) out.push_back(p.value());
  return out;
}

template <typename Net>
std::vector<Tensor<float>> snapshot_prefix(Net& net, const std::string& prefix) {
  std::vector<Tensor<float>> out;
  net.visit_parameters("", [&](const std::string& name, Var<float>& p) {
    if (name.rfind(prefix, 0) == 0) out.push_back(p.value());
  });
  return out;
}

std::vector<LossRecord> run(TrainState& s, std::uint64_t steps) {
  const auto images = make_image_source(s.config.data, s.config.seed);
  return train_steps(s, *images, steps);
}

bool same_records(const std::vector<LossRecord>& a, const std::vector<LossRecord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].d_loss != b[i].d_loss || a[i].l1 != b[i].l1 || a[i].adv != b[i].adv || a[i].total != b[i].total ||
        a[i].coarse_l1 != b[i].coarse_l1) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("Adam takes bias-corrected steps of size lr and converges on a quadratic") {
  auto p = Var<float>::parameter(Tensor<float>({2}, {5.0f, -5.0f}));
  Adam opt({p}, 0.1, 0.9, 0.999);
  opt.zero_grad();
  backward(sum(mul(p, p)));
  opt.step();
  CHECK(p.value()[0] == doctest::Approx(4.9f).epsilon(1e-6));
  CHECK(p.value()[1] == doctest::Approx(-4.9f).epsilon(1e-6));
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    backward(sum(mul(p, p)));
    opt.step();
  }
  CHECK(std::abs(p.value()[0]) < 1e-2);
  CHECK(opt.steps() == 2001);
}

TEST_CASE("training is deterministic under a fixed seed") {
  const TrainConfig c = small_config();
  TrainState a(c), b(c);
  auto ra = run(a, 3);
  auto rb = run(b, 3);
  CHECK(same_records(ra, rb));
  CHECK(snapshot(a.generator) == snapshot(b.generator));
  CHECK(snapshot(a.discriminator) == snapshot(b.discriminator));
  CHECK(a.step == 3);

  TrainState other(small_config("seed=2\n"));
  CHECK_FALSE(same_records(run(other, 3), ra));
}

TEST_CASE("prefetch workers do not change the trajectory") {
  TrainState a(small_config()), b(small_config("workers=2\n"));
  CHECK(same_records(run(a, 3), run(b, 3)));
  CHECK(snapshot(a.generator) == snapshot(b.generator));
}

TEST_CASE("zero CR weight with frozen CR nets matches training without the CR branch") {
  TrainState with(small_config("cr=on\nlambda=0\nfreeze_cr=on\n")), without(small_config("cr=off\n"));
  auto rw = run(with, 3);
  auto ro = run(without, 3);
  CHECK(same_records(rw, ro));
  CHECK(snapshot(with.generator) == snapshot(without.generator));
  CHECK(snapshot(with.discriminator) == snapshot(without.discriminator));
  for (const auto& r : ro) CHECK(r.cr == 0.0);
  CHECK(rw[0].cr > 0.0);
}

TEST_CASE("gradient isolation") {
  SUBCASE("the auxiliary and similarity nets learn only from the CR term") {
    TrainState s(small_config("lambda=0\n"));
    const auto aux = snapshot(s.auxiliary);
    const auto sim = snapshot(s.similarity);
    const auto gen = snapshot(s.generator);
    run(s, 2);
    CHECK(snapshot(s.auxiliary) == aux);
    CHECK(snapshot(s.similarity) == sim);
    CHECK_FALSE(snapshot(s.generator) == gen);

    TrainState t(small_config("lambda=0.5\n"));
    run(t, 1);
    CHECK_FALSE(snapshot(t.auxiliary) == aux);
    CHECK_FALSE(snapshot(t.similarity) == sim);
  }

  SUBCASE("the coarse stage gets nothing but its own L1 term") {
    // beta = 0 removes the coarse L1, so any remaining coarse update would come from the adversarial or CR terms.
    TrainState s(small_config("beta=0\n"));
    const auto coarse = snapshot_prefix(s.generator, "coarse");
    const auto refine = snapshot_prefix(s.generator, "refine");
    run(s, 2);
    CHECK(snapshot_prefix(s.generator, "coarse") == coarse);
    CHECK_FALSE(snapshot_prefix(s.generator, "refine") == refine);
  }

  SUBCASE("frozen CR nets stay fixed while CR still shapes the generator") {
    TrainState s(small_config("freeze_cr=on\n"));
    const auto aux = snapshot(s.auxiliary);
    run(s, 2);
    CHECK(snapshot(s.auxiliary) == aux);
  }
}

TEST_CASE("non-finite losses abort before the offending update") {
  TrainState s(small_config());
  const auto images = make_image_source(s.config.data, s.config.seed);
  Batch batch = assemble_batch(*images, s.config.masks, s.config.seed, 0, s.config.batch);
  batch.sample.x[3] = std::numeric_limits<float>::quiet_NaN();
  const auto gen = snapshot(s.generator);
  const auto disc = snapshot(s.discriminator);
  try {
    train_step(s, batch);
    FAIL("expected a non-finite loss");
  } catch (const NonFiniteLossError& e) {
    CHECK(std::isnan(e.record().d_loss));
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
  CHECK(snapshot(s.generator) == gen);
  CHECK(snapshot(s.discriminator) == disc);
  CHECK(s.step == 0);
}

TEST_CASE("a training run writes a diagnostic dump when a loss overflows") {
  TempDir dir("crfill_test_train_nonfinite");
  TrainConfig c = small_config("beta=1e300\nmax_steps=3\n");
  CHECK_THROWS_AS(run_training(c, dir.path.string()), NonFiniteLossError);
  const fs::path diag = dir.path / "diagnostics" / "diagnostic.txt";
  REQUIRE(fs::exists(diag));
  std::ifstream in(diag);
  std::stringstream text;
  text << in.rdbuf();
  CHECK(text.str().find("step=0") != std::string::npos);
  CHECK(text.str().find("seed=1") != std::string::npos);
  CHECK(fs::exists(dir.path / "diagnostics" / "input_x.png"));
}

TEST_CASE("checkpoints restore the exact trajectory") {
  TempDir dir("crfill_test_train_ckpt");
  const TrainConfig c = small_config();
  TrainState a(c);
  run(a, 2);
  const std::string ckpt = (dir.path / "ckpt").string();
  save_checkpoint(a, ckpt);
  for (const char* f : {"manifest.txt", "config.cfg", "generator.crfa", "discriminator.crfa", "optimizer.crfa"}) {
    CHECK(fs::exists(dir.path / "ckpt" / f));
  }
  auto b = restore_checkpoint(ckpt, c);
  CHECK(b->step == 2);
  auto ra = run(a, 1);
  auto rb = run(*b, 1);
  CHECK(same_records(ra, rb));
  CHECK(std::abs(ra[0].total - rb[0].total) <= 1e-6);
  CHECK(snapshot(a.generator) == snapshot(b->generator));
  CHECK(snapshot(a.discriminator) == snapshot(b->discriminator));

  // Extending the step budget is not a config change.
  TrainConfig longer = c;
  longer.max_steps = 10000;
  CHECK_NOTHROW(restore_checkpoint(ckpt, longer));
  CHECK(checkpoint_config(ckpt).lr == c.lr);
  CHECK(load_generator(ckpt).config().base_width == 8);

  auto kind_of = [&](const std::string& d, const TrainConfig& cfg) {
    try {
      restore_checkpoint(d, cfg);
    } catch (const CheckpointError& e) {
      return static_cast<int>(e.kind());
    }
    return -1;
  };
  TrainConfig other = c;
  other.lr = 3e-4;
  CHECK(kind_of(ckpt, other) == static_cast<int>(CheckpointError::Kind::kConfigMismatch));
  CHECK(kind_of((dir.path / "absent").string(), c) == static_cast<int>(CheckpointError::Kind::kMissing));

  auto manifest = read_manifest(ckpt + "/manifest.txt");
  manifest["version"] = "999";
  write_manifest(ckpt + "/manifest.txt", manifest);
  CHECK(kind_of(ckpt, c) == static_cast<int>(CheckpointError::Kind::kVersion));

  fs::remove(dir.path / "ckpt" / "generator.crfa");
  manifest["version"] = std::to_string(kCheckpointVersion);
  write_manifest(ckpt + "/manifest.txt", manifest);
  CHECK(kind_of(ckpt, c) == static_cast<int>(CheckpointError::Kind::kMissing));
}

TEST_CASE("full runs log, checkpoint and resume") {
  TempDir dir("crfill_test_train_run");
  TrainConfig c = small_config("max_steps=3\nckpt_every=2\n");
  auto first = run_training(c, dir.path.string());
  CHECK(first.records.size() == 3);
  CHECK(fs::exists(dir.path / "run_manifest.txt"));
  CHECK(read_manifest((dir.path / "run_manifest.txt").string())["code_version"] == kCodeVersion);

  std::ifstream csv(dir.path / "losses.csv");
  std::string header, line;
  std::getline(csv, header);
  CHECK(header == "step,d_loss,l1,adv,cr,total,coarse_l1,cr_skipped");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 3);

  c.max_steps = 5;
  auto resumed = run_training(c, dir.path.string(), true);
  REQUIRE(resumed.records.size() == 2);
  CHECK(resumed.records[0].step == 3);

  TempDir straight_dir("crfill_test_train_run_straight");
  auto straight = run_training(c, straight_dir.path.string());
  CHECK(straight.records[3].total == resumed.records[0].total);
  CHECK(straight.records[4].total == resumed.records[1].total);
}

TEST_CASE("loss rows") {
  std::ostringstream os;
  write_loss_header(os);
  LossRecord r;
  r.step = 4;
  r.l1 = 0.25;
  r.cr_skipped = true;
  write_loss_row(os, r);
  CHECK(os.str().rfind("step,", 0) == 0);
  CHECK(os.str().find("\n4,0,0.25,0,0,0,0,1\n") != std::string::npos);
}

TEST_CASE("training fits a fixed batch") {
  TrainState s(small_config("mask_kinds=square\nlr=1e-3\n"));
  const auto images = make_image_source(s.config.data, s.config.seed);
  const Batch batch = assemble_batch(*images, s.config.masks, s.config.seed, 0, s.config.batch);
  std::vector<double> l1;
  for (int i = 0; i < 200; ++i) l1.push_back(train_step(s, batch).l1);
  MESSAGE("L1 " << l1.front() << " -> " << l1.back());
  CHECK(l1.back() < 0.5 * l1.front());
}
