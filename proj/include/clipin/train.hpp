#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "clipin/augment.hpp"
#include "clipin/data.hpp"
#include "clipin/eval.hpp"
#include "clipin/losses.hpp"
#include "clipin/model.hpp"

namespace clipin {

struct AblationFlags {
  bool use_contrastive = true;
  bool use_inter = true;
  bool use_intra = true;
  bool share_pre_projectors = true;

  // The four rows of the component ablation, in order:
  // 0 contrastive only, 1 + inter, 2 + intra, 3 + shared pre-projectors.
  static AblationFlags row(std::size_t index);
  static constexpr std::size_t kRows = 4;
  std::string label() const;  // e.g. "cl+inter+intra+shared"
  void validate() const;
};

struct TrainConfig {
  double lr = 3e-5;
  std::size_t warmup_iters = 100;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-6;
  double weight_decay = 0.001;
  double ema_beta = 0.95;
  double tau = 0.07;
  std::size_t batch_size = 32;
  std::size_t total_steps = 1000;
  std::uint64_t seed = 0;
  WeightScheme weighting = WeightScheme::Fixed;
  AblationFlags ablation;
  std::string dims = "desk";
  bool learnable_tau = false;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint

  // Corpus. data_dir, when set, replaces the synthetic generator.
  std::size_t n_samples = 2048;
  std::size_t latent_dims = 8;
  std::size_t classes = 8;
  double noise_sigma = 0.35;
  double looseness_rate = 0.0;
  double redundancy_rate = 0.0;
  std::uint64_t corpus_seed = 0;
  std::string data_dir;

  AugmentConfig augment;

  void validate() const;
  LatentSpec latent_spec() const;
};

// Field registry: every TrainConfig field is addressable by its name, which
// is also the config-file key and (with '_' -> '-') the CLI flag.
const std::vector<std::string>& config_keys();
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const TrainConfig& cfg, const std::string& key);
// `key = value` lines; '#' starts a comment. Unknown keys are errors.
void apply_config_file(TrainConfig& cfg, const std::filesystem::path& path);
std::string config_echo(const TrainConfig& cfg);  // every key, registry order

// Model geometry for a config, with input sizes taken from the corpus.
DimsConfig resolve_dims(const TrainConfig& cfg, const LatentSpec& corpus);
Dataset make_dataset(const TrainConfig& cfg);

struct OptimizerState {
  std::uint64_t t = 0;
  std::vector<std::string> names;  // online parameter names, in order
  std::vector<Buffer> m;
  std::vector<Buffer> v;
};

OptimizerState init_optimizer(const ModelState& state);

// Decoupled-weight-decay Adam on every parameter that holds a gradient.
// Parameters never reached by backward are left untouched.
void adamw_step(const std::vector<NamedTensor>& params, OptimizerState& opt, double lr_t,
                const TrainConfig& cfg);

double lr_at(std::uint64_t step, const TrainConfig& cfg);

// Forward of every enabled objective for one batch. Online paths read view
// 1, target paths read view 2. Builds the graph; does not step.
struct StepGraph {
  LossTerms terms;
  Tensor total;
};
StepGraph forward_losses(const ModelState& state, const PairBatch& batch, const TrainConfig& cfg);

// forward -> backward -> AdamW on online params -> EMA -> step += 1.
LossBreakdown train_step(ModelState& state, const PairBatch& batch, const TrainConfig& cfg,
                         OptimizerState& opt);

struct TraceRow {
  std::uint64_t step = 0;
  double lr = 0.0;
  LossBreakdown loss;
};

std::string trace_header();
std::string trace_line(const TraceRow& row);

struct RunOptions {
  std::filesystem::path out_dir;  // empty: no log, no checkpoints
  std::optional<std::filesystem::path> resume_from;
  bool quiet = true;
  std::function<void(const TraceRow&)> on_step;
};

struct TrainResult {
  ModelState state;
  OptimizerState optimizer;
  std::vector<TraceRow> trace;
  std::vector<std::filesystem::path> checkpoints;
};

ModelState init_model_for(const TrainConfig& cfg, const Dataset& dataset);
TrainResult run_training(const TrainConfig& cfg, const Dataset& dataset, const RunOptions& options = {});
TrainResult run_training(const TrainConfig& cfg, const RunOptions& options = {});

struct AblationRow {
  AblationFlags flags;
  EvalReport report;
  std::vector<TraceRow> trace;
};

std::vector<AblationRow> run_ablation_suite(const TrainConfig& cfg, const EvalOptions& eval = {},
                                            const std::filesystem::path& out_dir = {});
std::string ablation_tsv(const std::vector<AblationRow>& rows);

}  // namespace clipin
