#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "clipin/checkpoint.hpp"
#include "clipin/error.hpp"
#include "clipin/train.hpp"
#include "test_support.hpp"

using namespace clipin;
namespace fs = std::filesystem;

namespace {

void expect_code(ErrorCode code, const std::function<void()>& fn, const std::string& needle = "") {
  try {
    fn();
    ADD_FAILURE() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
    if (!needle.empty()) EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.dims = "tiny";
  cfg.n_samples = 64;
  cfg.batch_size = 8;
  cfg.total_steps = 12;
  return cfg;
}

std::vector<Buffer> snapshot(const std::vector<NamedTensor>& params) {
  std::vector<Buffer> out;
  for (const auto& p : params) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

}  // namespace

TEST(AdamW, FirstStepReference) {
  TrainConfig cfg;  // lr 3e-5, betas 0.9/0.98, eps 1e-6, decay 0.001
  Tensor moving = Tensor::scalar(0.0, true);
  Tensor decayed = Tensor::scalar(1.0, true);
  Tensor frozen = Tensor::scalar(1.0, true);
  Tensor untouched = Tensor::scalar(5.0, true);
  moving.mutable_grad()[0] = 1.0;
  decayed.mutable_grad()[0] = 0.0;
  frozen.mutable_grad()[0] = 0.0;
  const std::vector<NamedTensor> params{{"a", moving, true}, {"b", decayed, true}, {"c", frozen, false}, {"d", untouched, true}};
  OptimizerState opt;
  for (const auto& p : params) {
    opt.names.push_back(p.name);
    opt.m.emplace_back(1, 0.0);
    opt.v.emplace_back(1, 0.0);
  }
  adamw_step(params, opt, cfg.lr, cfg);
  // Bias correction makes m_hat = g and v_hat = g^2 on the first step.
  EXPECT_NEAR(moving[0], -3e-5 / (1.0 + 1e-6), 1e-20);
  EXPECT_NEAR(moving[0], -2.999997e-5, 1e-12);
  EXPECT_DOUBLE_EQ(decayed[0], 1.0 - 3e-5 * 0.001);
  EXPECT_EQ(frozen[0], 1.0);
  EXPECT_EQ(untouched[0], 5.0);  // no gradient buffer: skipped
  EXPECT_EQ(opt.t, 1u);
  EXPECT_NEAR(opt.m[0][0], 0.1, 1e-15);
  EXPECT_NEAR(opt.v[0][0], 0.02, 1e-15);

  // Second step with the same gradient, against a hand-rolled recurrence.
  adamw_step(params, opt, cfg.lr, cfg);
  const double m = 0.9 * 0.1 + 0.1, v = 0.98 * 0.02 + 0.02;
  const double m_hat = m / (1 - 0.81), v_hat = v / (1 - 0.98 * 0.98);
  const double old = -3e-5 / (1.0 + 1e-6);
  EXPECT_NEAR(moving[0], old - 3e-5 * m_hat / (std::sqrt(v_hat) + 1e-6) - 3e-5 * 0.001 * old, 1e-18);
}

TEST(AdamW, RejectsMismatchedState) {
  TrainConfig cfg;
  Tensor t = Tensor::scalar(0.0, true);
  OptimizerState empty;
  expect_code(ErrorCode::ShapeMismatch, [&] { adamw_step({{"a", t, true}}, empty, 1e-3, cfg); });
}

TEST(Schedule, LinearWarmupThenConstant) {
  TrainConfig cfg;
  EXPECT_DOUBLE_EQ(lr_at(0, cfg), 3e-5 / 100);
  EXPECT_DOUBLE_EQ(lr_at(49, cfg) / cfg.lr, 0.5);
  EXPECT_DOUBLE_EQ(lr_at(99, cfg) / cfg.lr, 1.0);
  EXPECT_DOUBLE_EQ(lr_at(5000, cfg) / cfg.lr, 1.0);
  cfg.warmup_iters = 0;
  EXPECT_DOUBLE_EQ(lr_at(0, cfg), cfg.lr);
}

TEST(Defaults, MatchTheReferenceHyperparameters) {
  const TrainConfig cfg;
  EXPECT_EQ(cfg.lr, 3e-5);
  EXPECT_EQ(cfg.warmup_iters, 100u);
  EXPECT_EQ(cfg.adam_beta1, 0.9);
  EXPECT_EQ(cfg.adam_beta2, 0.98);
  EXPECT_EQ(cfg.adam_eps, 1e-6);
  EXPECT_EQ(cfg.weight_decay, 0.001);
  EXPECT_EQ(cfg.ema_beta, 0.95);
  EXPECT_EQ(cfg.tau, 0.07);
  EXPECT_EQ(cfg.weighting, WeightScheme::Fixed);
  EXPECT_TRUE(cfg.ablation.use_inter && cfg.ablation.use_intra && cfg.ablation.share_pre_projectors);
}

TEST(Ablation, Rows) {
  EXPECT_EQ(AblationFlags::row(0).label(), "cl");
  EXPECT_EQ(AblationFlags::row(1).label(), "cl+inter");
  EXPECT_EQ(AblationFlags::row(2).label(), "cl+inter+intra");
  EXPECT_EQ(AblationFlags::row(3).label(), "cl+inter+intra+shared");
  expect_code(ErrorCode::InvalidConfig, [] { AblationFlags::row(4); });
  TrainConfig cfg;
  cfg.ablation.use_contrastive = false;
  expect_code(ErrorCode::InvalidConfig, [&] { cfg.validate(); });
}

TEST(Config, EchoRoundTrips) {
  TrainConfig cfg;
  set_config_value(cfg, "lr", "0.000123");
  set_config_value(cfg, "weighting", "learnable");
  set_config_value(cfg, "share_pre_projectors", "false");
  set_config_value(cfg, "dims", "tiny");
  set_config_value(cfg, "token_drop_prob", "0.25");
  set_config_value(cfg, "ema_beta", "0.1");
  const fs::path dir = test::scratch_dir("config");
  std::ofstream(dir / "a.cfg") << config_echo(cfg);
  TrainConfig back;
  apply_config_file(back, dir / "a.cfg");
  EXPECT_EQ(config_echo(back), config_echo(cfg));
  EXPECT_EQ(back.lr, 0.000123);
  EXPECT_EQ(back.ema_beta, 0.1);
  EXPECT_EQ(back.weighting, WeightScheme::Learnable);
  EXPECT_FALSE(back.ablation.share_pre_projectors);
  EXPECT_EQ(back.augment.token_drop_prob, 0.25);
  const std::string echo = config_echo(cfg);
  EXPECT_EQ(config_keys().size(), static_cast<std::size_t>(std::count(echo.begin(), echo.end(), '\n')));
  for (const auto& k : config_keys()) EXPECT_NO_THROW(get_config_value(cfg, k));
}

TEST(Config, FileErrorsCarryLineNumbers) {
  const fs::path dir = test::scratch_dir("config_bad");
  std::ofstream(dir / "bad.cfg") << "# comment\nlr = 1e-4  # trailing\n\nbogus = 3\n";
  TrainConfig cfg;
  expect_code(ErrorCode::InvalidConfig, [&] { apply_config_file(cfg, dir / "bad.cfg"); }, "bad.cfg:4");
  EXPECT_EQ(cfg.lr, 1e-4);
  std::ofstream(dir / "noeq.cfg") << "lr 3\n";
  expect_code(ErrorCode::InvalidConfig, [&] { apply_config_file(cfg, dir / "noeq.cfg"); }, "noeq.cfg:1");
  expect_code(ErrorCode::InvalidConfig, [&] { set_config_value(cfg, "batch_size", "-3"); });
  expect_code(ErrorCode::InvalidConfig, [&] { set_config_value(cfg, "lr", "fast"); });
  expect_code(ErrorCode::InvalidConfig, [&] { set_config_value(cfg, "dims", "giant"); });
  expect_code(ErrorCode::Io, [&] { apply_config_file(cfg, dir / "none.cfg"); });
}

TEST(Config, Validation) {
  TrainConfig cfg;
  cfg.tau = 0;
  expect_code(ErrorCode::NonPositiveTau, [&] { cfg.validate(); });
  cfg = {};
  cfg.batch_size = 1;
  expect_code(ErrorCode::BatchTooSmall, [&] { cfg.validate(); });
  cfg = {};
  cfg.ema_beta = 1.0;
  expect_code(ErrorCode::InvalidConfig, [&] { cfg.validate(); });
}

TEST(Step, ContrastiveOnlyBreakdown) {
  TrainConfig cfg = tiny_config();
  cfg.ablation = AblationFlags::row(0);
  const Dataset d = make_dataset(cfg);
  ModelState s = init_model_for(cfg, d);
  OptimizerState opt = init_optimizer(s);
  const PairBatch batch = make_batches(d, 8, cfg.augment, Rng(1)).batch_at(0);
  const auto pre_before = snapshot(online_parameters(s));
  const LossBreakdown b = train_step(s, batch, cfg, opt);
  ASSERT_TRUE(b.l_cl_i2t && b.l_cl_t2i);
  EXPECT_FALSE(b.l_inter_i2t || b.l_inter_t2i || b.l_intra_i || b.l_intra_t);
  EXPECT_NEAR(b.total, *b.l_cl_i2t + *b.l_cl_t2i, 1e-12);
  const std::string line = trace_line({0, 1e-3, b});
  EXPECT_NE(line.find("NA"), std::string::npos);
  const std::string header = trace_header();
  EXPECT_EQ(std::count(line.begin(), line.end(), '\t'), std::count(header.begin(), header.end(), '\t'));
  // Non-contrastive heads are outside the graph and do not move.
  const auto params = online_parameters(s);
  for (std::size_t k = 0; k < params.size(); ++k) {
    const bool moved = !std::equal(pre_before[k].begin(), pre_before[k].end(), params[k].tensor.values().begin());
    const bool ncl_side = params[k].name.find("ncl_") != std::string::npos ||
                          params[k].name.find("inter_") != std::string::npos ||
                          params[k].name.find("intra_") != std::string::npos ||
                          params[k].name.find("online.pre_image") == 0 || params[k].name.find("online.pre_text") == 0 ||
                          params[k].name.find("s_inter") != std::string::npos ||
                          params[k].name.find("s_intra") != std::string::npos ||
                          params[k].name.find("log_tau") != std::string::npos;
    if (ncl_side) {
      EXPECT_FALSE(moved) << params[k].name;
    } else if (params[k].name.find(".bias") == std::string::npos && params[k].name.find(".gain") == std::string::npos) {
      EXPECT_TRUE(moved) << params[k].name;
    }
  }
}

TEST(Step, TargetFollowsOnlineThroughEmaOnly) {
  TrainConfig cfg = tiny_config();
  const Dataset d = make_dataset(cfg);
  ModelState s = init_model_for(cfg, d);
  OptimizerState opt = init_optimizer(s);
  for (const auto& name : opt.names) EXPECT_EQ(name.rfind("online.", 0), 0u);
  BatchStream stream = make_batches(d, 8, cfg.augment, Rng(2));
  for (int step = 0; step < 3; ++step) {
    const auto target_before = snapshot(target_parameters(s));
    const LossBreakdown b = train_step(s, stream.next(), cfg, opt);
    EXPECT_TRUE(b.l_inter_i2t && b.l_intra_t);
    EXPECT_NEAR(recompose_total(b, cfg.weighting, 0, 0), b.total, 1e-10);
    std::size_t k = 0;
    bool changed = false;
    for (const auto& [target, online] : ema_pairs(s)) {
      for (std::size_t i = 0; i < target.size(); ++i) {
        const double expected = 0.95 * target_before[k][i] + (1.0 - 0.95) * online[i];
        EXPECT_EQ(target[i], expected);
        changed = changed || target[i] != target_before[k][i];
      }
      ++k;
    }
    EXPECT_TRUE(changed);
  }
  EXPECT_EQ(s.step, 3u);
  EXPECT_EQ(opt.t, 3u);
}

TEST(Step, LearnableWeightsMove) {
  TrainConfig cfg = tiny_config();
  cfg.weighting = WeightScheme::Learnable;
  const Dataset d = make_dataset(cfg);
  ModelState s = init_model_for(cfg, d);
  OptimizerState opt = init_optimizer(s);
  const LossBreakdown b = train_step(s, make_batches(d, 8, cfg.augment, Rng(3)).batch_at(0), cfg, opt);
  EXPECT_EQ(b.lambda_inter, 1.0);  // recorded before the update, s = 0
  EXPECT_NE(s.online.s_inter.item(), 0.0);
  EXPECT_NEAR(recompose_total(b, cfg.weighting, 0.0, 0.0), b.total, 1e-10);
}

TEST(Step, NonFiniteLossCarriesDiagnostics) {
  TrainConfig cfg = tiny_config();
  const Dataset d = make_dataset(cfg);
  ModelState s = init_model_for(cfg, d);
  OptimizerState opt = init_optimizer(s);
  s.online.cl_image.weight.mutable_values()[0] = std::numeric_limits<double>::infinity();
  expect_code(ErrorCode::NonFiniteLoss, [&] { train_step(s, make_batches(d, 8, cfg.augment, Rng(4)).batch_at(0), cfg, opt); },
              "online.cl_image.weight");
}

TEST(Run, DeterministicTraces) {
  TrainConfig cfg = tiny_config();
  const TrainResult a = run_training(cfg);
  const TrainResult b = run_training(cfg);
  ASSERT_EQ(a.trace.size(), 12u);
  for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_EQ(trace_line(a.trace[i]), trace_line(b.trace[i]));
  cfg.seed = 1;
  const TrainResult c = run_training(cfg);
  EXPECT_NE(trace_line(a.trace[0]), trace_line(c.trace[0]));
}

TEST(Run, ZeroStepsStillWritesFinalCheckpoint) {
  TrainConfig cfg = tiny_config();
  cfg.total_steps = 0;
  const fs::path dir = test::scratch_dir("zero_steps");
  const TrainResult r = run_training(cfg, RunOptions{dir});
  EXPECT_TRUE(r.trace.empty());
  ASSERT_EQ(r.checkpoints.size(), 1u);
  EXPECT_EQ(read_checkpoint_info(dir / "final.clpn").step, 0u);
  EXPECT_EQ(test::read_file(dir / "train_log.tsv"), trace_header() + "\n");
  EXPECT_EQ(test::read_file(dir / "config.txt"), config_echo(cfg));
}

TEST(Run, PeriodicCheckpointsAndLog) {
  TrainConfig cfg = tiny_config();
  cfg.checkpoint_every = 5;
  const fs::path dir = test::scratch_dir("periodic");
  const TrainResult r = run_training(cfg, RunOptions{dir});
  EXPECT_TRUE(fs::exists(dir / "checkpoints" / "step_000005.clpn"));
  EXPECT_TRUE(fs::exists(dir / "checkpoints" / "step_000010.clpn"));
  EXPECT_EQ(r.checkpoints.size(), 3u);
  const std::string log = test::read_file(dir / "train_log.tsv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 13);
}

TEST(Run, LossDecreasesOnTinyModel) {
  TrainConfig cfg = tiny_config();
  cfg.dims = "desk";
  cfg.n_samples = 512;
  cfg.total_steps = 150;
  cfg.lr = 3e-4;
  cfg.warmup_iters = 20;
  cfg.ablation = AblationFlags::row(0);
  cfg.batch_size = 32;
  const TrainResult r = run_training(cfg);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    first += r.trace[i].loss.total;
    last += r.trace[r.trace.size() - 1 - i].loss.total;
  }
  EXPECT_LT(last, first * 0.9);
}

TEST(Run, ResumeRejectsOtherGeometry) {
  TrainConfig cfg = tiny_config();
  cfg.total_steps = 2;
  const fs::path dir = test::scratch_dir("resume_geom");
  run_training(cfg, RunOptions{dir});
  TrainConfig other = cfg;
  other.ablation.share_pre_projectors = false;
  RunOptions opts;
  opts.resume_from = dir / "final.clpn";
  expect_code(ErrorCode::InvalidConfig, [&] { run_training(other, opts); });
}

TEST(Ablation, SuiteRunsFourRowsAndTabulates) {
  TrainConfig cfg = tiny_config();
  cfg.total_steps = 3;
  const auto rows = run_ablation_suite(cfg);
  ASSERT_EQ(rows.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(rows[i].flags.label(), AblationFlags::row(i).label());
    EXPECT_EQ(rows[i].trace.size(), 3u);
  }
  EXPECT_FALSE(rows[0].trace[0].loss.l_inter_i2t);
  EXPECT_TRUE(rows[1].trace[0].loss.l_inter_i2t);
  EXPECT_FALSE(rows[1].trace[0].loss.l_intra_i);
  const std::string tsv = ablation_tsv(rows);
  EXPECT_EQ(std::count(tsv.begin(), tsv.end(), '\n'), 5);
  EXPECT_NE(tsv.find("cl+inter+intra+shared\t1\t1\t1\t1\t"), std::string::npos);
  EXPECT_NE(tsv.find("cl\t1\t0\t0\t0\t"), std::string::npos);
}
