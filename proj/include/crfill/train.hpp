#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "crfill/checkpoint.hpp"
#include "crfill/config.hpp"
#include "crfill/data.hpp"
#include "crfill/losses.hpp"
#include "crfill/maskgen.hpp"
#include "crfill/nets.hpp"

namespace crfill {

inline constexpr const char* kCodeVersion = "0.1.0";

struct NetworkConfig {
  GeneratorConfig generator = GeneratorConfig::toy();
  DiscriminatorConfig discriminator = DiscriminatorConfig::toy();
  int cr_width = 16;  // base width of the similarity encoder and auxiliary net
};

struct TrainConfig {
  LossWeights weights;
  double lr = 1e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  int batch = 4;
  std::uint64_t max_steps = 2000;
  MaskPolicy masks;
  DatasetSpec data;
  std::uint64_t seed = 1;
  std::uint64_t ckpt_every = 0;  // 0: only at the end
  std::uint64_t log_every = 1;
  bool cr = true;
  bool freeze_cr_nets = false;  // similarity encoder and auxiliary net receive no updates
  NetworkConfig nets;
  int workers = 0;  // prefetch threads
  int eval_samples = 64;

  void validate() const;
};

/// Every key the config file accepts, in documentation order.
const std::vector<std::string>& config_keys();
/// Throws UnknownKeyError on keys outside config_keys() and ConfigError on malformed values.
TrainConfig train_config_from(const Config& config);
/// Fully resolved configuration (every key present).
Config to_config(const TrainConfig& config);
/// FNV-1a of the resolved configuration, ignoring run-control keys (max_steps, ckpt_every, log_every, workers,
/// eval_samples) so a run can be extended or resumed.
std::uint64_t config_hash(const TrainConfig& config);

/// Adam over a fixed list of parameters (bias-corrected).
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Var<float>> params, double lr, double beta1, double beta2, double eps = 1e-8);

  void step();
  void zero_grad();
  std::uint64_t steps() const { return t_; }
  const std::vector<Var<float>>& params() const { return params_; }

  void save(TensorArchive& archive, const std::string& prefix) const;
  void load(const TensorArchive& archive, const std::string& prefix);

 private:
  std::vector<Var<float>> params_;
  std::vector<Tensor<float>> m_, v_;
  double lr_ = 1e-4, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::uint64_t t_ = 0;
};

struct LossRecord {
  std::uint64_t step = 0;
  double d_loss = 0;
  double l1 = 0;   // mean |Y - X| of the refined output
  double adv = 0;  // generator hinge term
  double cr = 0;   // L_CR (0 when off or skipped)
  double total = 0;
  double coarse_l1 = 0;
  bool cr_skipped = false;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(const std::string& what, LossRecord record) : std::runtime_error(what), record_(record) {}
  const LossRecord& record() const { return record_; }

 private:
  LossRecord record_;
};

/// Networks, optimisers and the step counter of one training run.
struct TrainState {
  explicit TrainState(const TrainConfig& config);
  TrainState(const TrainState&) = delete;
  TrainState& operator=(const TrainState&) = delete;

  TrainConfig config;
  Generator<float> generator;
  Discriminator<float> discriminator;
  SimilarityEncoder<float> similarity;
  AuxiliaryNet<float> auxiliary;
  Adam g_opt;
  Adam d_opt;
  std::uint64_t step = 0;
};

/// One discriminator update then one generator (+ CR branch) update. Each update is preceded by a check of
/// its losses; a non-finite value throws NonFiniteLossError before that update is applied.
LossRecord train_step(TrainState& state, const Batch& batch);

/// Runs `steps` steps on batches assembled from `images`, starting at state.step.
std::vector<LossRecord> train_steps(TrainState& state, const ImageSource& images, std::uint64_t steps);

/// Directory layout: manifest.txt, config.cfg and one .crfa archive per network plus optimizer.crfa.
void save_checkpoint(TrainState& state, const std::string& dir);
/// Refuses (CheckpointError kConfigMismatch) when the stored config hash differs from `config`'s.
std::unique_ptr<TrainState> restore_checkpoint(const std::string& dir, const TrainConfig& config);
/// The configuration a checkpoint was trained with (hash-checked against the manifest).
TrainConfig checkpoint_config(const std::string& dir);
/// Generator weights of a checkpoint.
Generator<float> load_generator(const std::string& dir);
/// Generator, similarity encoder (for jigsaw), and configuration of a checkpoint.
std::unique_ptr<TrainState> load_checkpoint(const std::string& dir);

void write_loss_header(std::ostream& out);
void write_loss_row(std::ostream& out, const LossRecord& r);

struct TrainRun {
  std::vector<LossRecord> records;
  std::string checkpoint_dir;
};

/// Full run into `out_dir`: run manifest first, then losses.csv, checkpoints in out_dir/ckpt. With `resume`
/// an existing checkpoint in out_dir/ckpt is restored first. On a non-finite loss a diagnostic dump is written
/// to out_dir/diagnostics and the error is rethrown.
TrainRun run_training(const TrainConfig& config, const std::string& out_dir, bool resume = false);

/// Relative folders are taken under $CRFILL_DATA_ROOT when it is set.
std::string resolve_data_folder(const std::string& folder);

/// Writes `key=value` lines: the resolved config plus seed, code version and command.
void write_run_manifest(const std::string& path, const TrainConfig& config, const std::string& command);

}  // namespace crfill
