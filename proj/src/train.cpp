#include "clipin/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "clipin/checkpoint.hpp"
#include "clipin/error.hpp"

namespace clipin {

namespace fs = std::filesystem;

// ------------------------------------------------------------ ablation rows

AblationFlags AblationFlags::row(std::size_t index) {
  switch (index) {
    case 0:
      return {true, false, false, false};
    case 1:
      return {true, true, false, false};
    case 2:
      return {true, true, true, false};
    case 3:
      return {true, true, true, true};
    default:
      throw Error(ErrorCode::InvalidConfig, "ablation row " + std::to_string(index) + " out of range");
  }
}

std::string AblationFlags::label() const {
  std::string out = use_contrastive ? "cl" : "";
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += "+";
    out += name;
  };
  add(use_inter, "inter");
  add(use_intra, "intra");
  add(share_pre_projectors, "shared");
  return out.empty() ? "none" : out;
}

void AblationFlags::validate() const {
  if (!use_contrastive) {
    throw Error(ErrorCode::InvalidConfig, "use_contrastive must stay on; every ablation row keeps it");
  }
}

// ----------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw Error(ErrorCode::InvalidConfig, "lr must be > 0");
  if (!(ema_beta >= 0.0 && ema_beta < 1.0)) throw Error(ErrorCode::InvalidConfig, "ema_beta must lie in [0, 1)");
  if (!(tau > 0.0)) throw Error(ErrorCode::NonPositiveTau, "tau must be > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw Error(ErrorCode::InvalidConfig, "Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0) || !(weight_decay >= 0.0) || !(grad_clip >= 0.0)) {
    throw Error(ErrorCode::InvalidConfig, "adam_eps must be > 0; weight_decay and grad_clip >= 0");
  }
  if (batch_size < 2 && ablation.use_contrastive) {
    throw Error(ErrorCode::BatchTooSmall, "contrastive training needs batch_size >= 2");
  }
  ablation.validate();
  augment.validate();
  if (data_dir.empty()) latent_spec().validate();
  DimsConfig::preset(dims);
}

LatentSpec TrainConfig::latent_spec() const {
  LatentSpec s;
  s.k = latent_dims;
  s.classes = classes;
  s.noise_sigma = noise_sigma;
  s.looseness_rate = looseness_rate;
  s.redundancy_rate = redundancy_rate;
  return s;
}

namespace {

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::InvalidConfig, key + ": '" + v + "' is not a number");
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] != '-') {
      const auto x = std::stoull(v, &used);
      if (used == v.size()) return x;
    }
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::InvalidConfig, key + ": '" + v + "' is not a non-negative integer");
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw Error(ErrorCode::InvalidConfig, key + ": '" + v + "' is not a boolean");
}

struct Field {
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
};

template <typename T>
Field real(T TrainConfig::*m) {
  return {[m](const TrainConfig& c) { return format_double(c.*m); },
          [m](TrainConfig& c, const std::string& k, const std::string& v) { c.*m = parse_double(k, v); }};
}

template <typename T>
Field integer(T TrainConfig::*m) {
  return {[m](const TrainConfig& c) { return std::to_string(c.*m); },
          [m](TrainConfig& c, const std::string& k, const std::string& v) {
            c.*m = static_cast<T>(parse_uint(k, v));
          }};
}

Field flag(bool AblationFlags::*m) {
  return {[m](const TrainConfig& c) { return std::string(c.ablation.*m ? "true" : "false"); },
          [m](TrainConfig& c, const std::string& k, const std::string& v) { c.ablation.*m = parse_bool(k, v); }};
}

Field aug_real(double AugmentConfig::*m) {
  return {[m](const TrainConfig& c) { return format_double(c.augment.*m); },
          [m](TrainConfig& c, const std::string& k, const std::string& v) { c.augment.*m = parse_double(k, v); }};
}

const std::vector<std::pair<std::string, Field>>& registry() {
  static const std::vector<std::pair<std::string, Field>> fields = {
      {"lr", real(&TrainConfig::lr)},
      {"warmup_iters", integer(&TrainConfig::warmup_iters)},
      {"adam_beta1", real(&TrainConfig::adam_beta1)},
      {"adam_beta2", real(&TrainConfig::adam_beta2)},
      {"adam_eps", real(&TrainConfig::adam_eps)},
      {"weight_decay", real(&TrainConfig::weight_decay)},
      {"ema_beta", real(&TrainConfig::ema_beta)},
      {"tau", real(&TrainConfig::tau)},
      {"batch_size", integer(&TrainConfig::batch_size)},
      {"total_steps", integer(&TrainConfig::total_steps)},
      {"seed", integer(&TrainConfig::seed)},
      {"weighting",
       {[](const TrainConfig& c) { return std::string(c.weighting == WeightScheme::Fixed ? "fixed" : "learnable"); },
        [](TrainConfig& c, const std::string& k, const std::string& v) {
          if (v == "fixed") c.weighting = WeightScheme::Fixed;
          else if (v == "learnable") c.weighting = WeightScheme::Learnable;
          else throw Error(ErrorCode::InvalidConfig, k + ": expected fixed|learnable, got '" + v + "'");
        }}},
      {"use_contrastive", flag(&AblationFlags::use_contrastive)},
      {"use_inter", flag(&AblationFlags::use_inter)},
      {"use_intra", flag(&AblationFlags::use_intra)},
      {"share_pre_projectors", flag(&AblationFlags::share_pre_projectors)},
      {"dims",
       {[](const TrainConfig& c) { return c.dims; },
        [](TrainConfig& c, const std::string&, const std::string& v) {
          DimsConfig::preset(v);
          c.dims = v;
        }}},
      {"learnable_tau",
       {[](const TrainConfig& c) { return std::string(c.learnable_tau ? "true" : "false"); },
        [](TrainConfig& c, const std::string& k, const std::string& v) { c.learnable_tau = parse_bool(k, v); }}},
      {"grad_clip", real(&TrainConfig::grad_clip)},
      {"checkpoint_every", integer(&TrainConfig::checkpoint_every)},
      {"n_samples", integer(&TrainConfig::n_samples)},
      {"latent_dims", integer(&TrainConfig::latent_dims)},
      {"classes", integer(&TrainConfig::classes)},
      {"noise_sigma", real(&TrainConfig::noise_sigma)},
      {"looseness_rate", real(&TrainConfig::looseness_rate)},
      {"redundancy_rate", real(&TrainConfig::redundancy_rate)},
      {"corpus_seed", integer(&TrainConfig::corpus_seed)},
      {"data_dir",
       {[](const TrainConfig& c) { return c.data_dir; },
        [](TrainConfig& c, const std::string&, const std::string& v) { c.data_dir = v; }}},
      {"flip_prob", aug_real(&AugmentConfig::flip_prob)},
      {"jitter_strength", aug_real(&AugmentConfig::jitter_strength)},
      {"token_drop_prob", aug_real(&AugmentConfig::token_drop_prob)},
  };
  return fields;
}

const Field& field(const std::string& key) {
  for (const auto& [name, f] : registry())
    if (name == key) return f;
  throw Error(ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, f] : registry()) k.push_back(name);
    return k;
  }();
  return keys;
}

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  field(key).set(cfg, key, value);
}

std::string get_config_value(const TrainConfig& cfg, const std::string& key) {
  return field(key).get(cfg);
}

void apply_config_file(TrainConfig& cfg, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open config " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::InvalidConfig, path.string() + ":" + std::to_string(line_no) + ": expected key = value");
    }
    try {
      set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      throw Error(ErrorCode::InvalidConfig, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

std::string config_echo(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [name, f] : registry()) out += name + " = " + f.get(cfg) + "\n";
  return out;
}

DimsConfig resolve_dims(const TrainConfig& cfg, const LatentSpec& corpus) {
  DimsConfig d = DimsConfig::preset(cfg.dims);
  d.image_side = corpus.image_side;
  d.max_text_len = corpus.max_text_len;
  d.vocab_size = Codebook(corpus.k, corpus.buckets).vocab_size();
  return d;
}

Dataset make_dataset(const TrainConfig& cfg) {
  if (!cfg.data_dir.empty()) return load_corpus(cfg.data_dir);
  return generate_corpus(cfg.latent_spec(), cfg.n_samples, cfg.corpus_seed);
}

// --------------------------------------------------------------- optimizer

OptimizerState init_optimizer(const ModelState& state) {
  OptimizerState opt;
  for (const auto& p : online_parameters(state)) {
    opt.names.push_back(p.name);
    opt.m.emplace_back(p.tensor.size(), 0.0);
    opt.v.emplace_back(p.tensor.size(), 0.0);
  }
  return opt;
}

void adamw_step(const std::vector<NamedTensor>& params, OptimizerState& opt, double lr_t,
                const TrainConfig& cfg) {
  if (params.size() != opt.m.size()) {
    throw Error(ErrorCode::ShapeMismatch, "optimizer state tracks " + std::to_string(opt.m.size()) +
                                              " tensors, got " + std::to_string(params.size()));
  }
  ++opt.t;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(opt.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(opt.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k].tensor;
    if (!p.has_grad()) continue;
    auto& m = opt.m[k];
    auto& v = opt.v[k];
    if (m.size() != p.size()) throw Error(ErrorCode::ShapeMismatch, "moment size mismatch for " + params[k].name);
    const auto g = p.grad();
    auto theta = p.mutable_values();
    const double decay = params[k].decay ? cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double m_hat = m[i] / c1, v_hat = v[i] / c2;
      const double old = theta[i];
      theta[i] = old - lr_t * (m_hat / (std::sqrt(v_hat) + cfg.adam_eps)) - lr_t * decay * old;
    }
  }
}

double lr_at(std::uint64_t step, const TrainConfig& cfg) {
  if (cfg.warmup_iters == 0) return cfg.lr;
  return cfg.lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_iters));
}

// ------------------------------------------------------------------- step

StepGraph forward_losses(const ModelState& state, const PairBatch& batch, const TrainConfig& cfg) {
  const auto& f = cfg.ablation;
  const bool ncl = f.use_inter || f.use_intra;
  const auto img = encode_image_online(state, batch.images_v1, ncl);
  const auto txt = encode_text_online(state, batch.tokens_v1, ncl);
  StepGraph g;
  auto& t = g.terms;
  if (f.use_contrastive) {
    auto [u_cl, v_cl] = project_contrastive(state, contrastive_input(state, img, Modality::Image),
                                            contrastive_input(state, txt, Modality::Text));
    auto [i2t, t2i] = cfg.learnable_tau ? info_nce_loss(u_cl, v_cl, state.online.log_tau)
                                        : info_nce_loss(u_cl, v_cl, cfg.tau);
    t.cl_i2t = i2t;
    t.cl_t2i = t2i;
  }
  if (ncl) {
    const Tensor u_tgt = encode_image_target(state, batch.images_v2);
    const Tensor v_tgt = encode_text_target(state, batch.tokens_v2);
    if (f.use_inter) {
      auto [a, b] = inter_modal_loss(predict_inter(state, img.ncl, Modality::Image),
                                     predict_inter(state, txt.ncl, Modality::Text), u_tgt, v_tgt);
      t.inter_i2t = a;
      t.inter_t2i = b;
    }
    if (f.use_intra) {
      auto [a, b] = intra_modal_loss(predict_intra(state, img.ncl, Modality::Image),
                                     predict_intra(state, txt.ncl, Modality::Text), u_tgt, v_tgt);
      t.intra_i = a;
      t.intra_t = b;
    }
  }
  g.total = total_loss(t, {f.use_contrastive, f.use_inter, f.use_intra}, cfg.weighting,
                       state.online.s_inter, state.online.s_intra);
  return g;
}

namespace {

std::string diagnostic_dump(const ModelState& state, const PairBatch& batch, const TrainConfig& cfg) {
  std::ostringstream out;
  out << "step " << state.step << ", lr " << lr_at(state.step, cfg) << ", batch starts at "
      << (batch.ids.empty() ? "?" : batch.ids.front()) << "; parameter norms:";
  for (const auto& p : online_parameters(state)) {
    double s = 0.0;
    bool finite = true;
    for (double x : p.tensor.values()) {
      s += x * x;
      finite = finite && std::isfinite(x);
    }
    if (!finite || s > 1e8) out << ' ' << p.name << '=' << std::sqrt(s);
  }
  return out.str();
}

void clip_gradients(const std::vector<NamedTensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double k = max_norm / norm;
  for (const auto& p : params) {
    Tensor t = p.tensor;
    if (!t.has_grad()) continue;
    for (double& g : t.mutable_grad()) g *= k;
  }
}

}  // namespace

LossBreakdown train_step(ModelState& state, const PairBatch& batch, const TrainConfig& cfg,
                         OptimizerState& opt) {
  if (cfg.ablation.use_contrastive && batch.size() < 2) {
    throw Error(ErrorCode::BatchTooSmall, "contrastive step needs B >= 2");
  }
  zero_grads(state);
  StepGraph g;
  try {
    g = forward_losses(state, batch, cfg);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NonFiniteValue) throw;
    throw Error(ErrorCode::NonFiniteLoss, std::string(e.what()) + "; " + diagnostic_dump(state, batch, cfg));
  }
  if (!std::isfinite(g.total.item())) {
    throw Error(ErrorCode::NonFiniteLoss, "total loss is not finite; " + diagnostic_dump(state, batch, cfg));
  }
  LossBreakdown parts = make_breakdown(g.terms, cfg.weighting, state.online.s_inter, state.online.s_intra, g.total);
  backward(g.total);
  const auto params = online_parameters(state);
  if (cfg.grad_clip > 0.0) clip_gradients(params, cfg.grad_clip);
  adamw_step(params, opt, lr_at(state.step, cfg), cfg);
  ema_update(state, cfg.ema_beta);
  ++state.step;
  return parts;
}

// ------------------------------------------------------------------- loop

std::string trace_header() {
  return "step\tl_cl_i2t\tl_cl_t2i\tl_inter_i2t\tl_inter_t2i\tl_intra_i\tl_intra_t\tlambda_inter\t"
         "lambda_intra\ttotal\tlr";
}

std::string trace_line(const TraceRow& row) {
  auto opt = [](const std::optional<double>& x) { return x ? format_double(*x) : std::string("NA"); };
  const auto& l = row.loss;
  std::string out = std::to_string(row.step);
  for (const auto& s : {opt(l.l_cl_i2t), opt(l.l_cl_t2i), opt(l.l_inter_i2t), opt(l.l_inter_t2i),
                        opt(l.l_intra_i), opt(l.l_intra_t), format_double(l.lambda_inter),
                        format_double(l.lambda_intra), format_double(l.total), format_double(row.lr)}) {
    out += '\t';
    out += s;
  }
  return out;
}

ModelState init_model_for(const TrainConfig& cfg, const Dataset& dataset) {
  Rng rng = Rng(cfg.seed).split("model");
  ModelOptions options;
  options.share_pre_projectors = cfg.ablation.share_pre_projectors;
  options.initial_tau = cfg.tau;
  return init_model(resolve_dims(cfg, dataset.spec), rng, options);
}

TrainResult run_training(const TrainConfig& cfg, const Dataset& dataset, const RunOptions& options) {
  cfg.validate();
  const std::string echo = config_echo(cfg);
  TrainResult result;
  if (options.resume_from) {
    auto loaded = load_checkpoint(*options.resume_from);
    if (loaded.state.dims != resolve_dims(cfg, dataset.spec) ||
        loaded.state.shared_pre != cfg.ablation.share_pre_projectors) {
      throw Error(ErrorCode::InvalidConfig, "checkpoint geometry does not match the config");
    }
    result.state = std::move(loaded.state);
    result.optimizer = std::move(loaded.optimizer);
  } else {
    result.state = init_model_for(cfg, dataset);
    result.optimizer = init_optimizer(result.state);
  }
  ModelState& state = result.state;

  std::ofstream log;
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    const fs::path log_path = options.out_dir / "train_log.tsv";
    const bool append = options.resume_from && fs::exists(log_path);
    log.open(log_path, append ? std::ios::app : std::ios::trunc);
    if (!log) throw Error(ErrorCode::Io, "cannot write " + log_path.string());
    if (!append) log << trace_header() << '\n';
    std::ofstream(options.out_dir / "config.txt") << echo;
  }
  auto checkpoint = [&](const fs::path& path) {
    save_checkpoint(path, state, result.optimizer, echo, cfg.corpus_seed);
    result.checkpoints.push_back(path);
  };

  if (state.step < cfg.total_steps) {
    BatchStream stream = make_batches(dataset, cfg.batch_size, cfg.augment, Rng(cfg.seed).split("batches"));
    stream.seek(state.step);
    while (state.step < cfg.total_steps) {
      TraceRow row;
      row.step = state.step;
      row.lr = lr_at(state.step, cfg);
      try {
        row.loss = train_step(state, stream.next(), cfg, result.optimizer);
      } catch (const Error& e) {
        throw Error(e.code(), "at step " + std::to_string(row.step) + ": " + e.what());
      }
      if (log) log << trace_line(row) << '\n';
      if (options.on_step) options.on_step(row);
      if (!options.quiet && (row.step % 50 == 0 || state.step == cfg.total_steps)) {
        std::cerr << "step " << row.step << " total " << row.loss.total << '\n';
      }
      result.trace.push_back(row);
      if (!options.out_dir.empty() && cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 &&
          state.step < cfg.total_steps) {
        char name[64];
        std::snprintf(name, sizeof name, "step_%06llu.clpn", static_cast<unsigned long long>(state.step));
        fs::create_directories(options.out_dir / "checkpoints");
        checkpoint(options.out_dir / "checkpoints" / name);
      }
    }
  }
  if (!options.out_dir.empty()) checkpoint(options.out_dir / "final.clpn");
  return result;
}

TrainResult run_training(const TrainConfig& cfg, const RunOptions& options) {
  cfg.validate();
  return run_training(cfg, make_dataset(cfg), options);
}

std::vector<AblationRow> run_ablation_suite(const TrainConfig& cfg, const EvalOptions& eval,
                                            const fs::path& out_dir) {
  cfg.validate();
  const Dataset dataset = make_dataset(cfg);
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < AblationFlags::kRows; ++i) {
    TrainConfig row_cfg = cfg;
    row_cfg.ablation = AblationFlags::row(i);
    RunOptions run;
    if (!out_dir.empty()) run.out_dir = out_dir / ("row" + std::to_string(i) + "_" + row_cfg.ablation.label());
    TrainResult r = run_training(row_cfg, dataset, run);
    rows.push_back({row_cfg.ablation, evaluate_model(r.state, dataset, eval), std::move(r.trace)});
  }
  return rows;
}

std::string ablation_tsv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "row\tcontrastive\tinter_modal\tintra_modal\tshared_pre_projectors\tmean_auc\tmap\tzsc_top1\t"
         "feature_std_min\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& f = rows[i].flags;
    const auto& r = rows[i].report;
    out << rows[i].flags.label() << '\t' << f.use_contrastive << '\t' << f.use_inter << '\t' << f.use_intra
        << '\t' << f.share_pre_projectors << '\t' << format_double(r.mean_auc) << '\t' << format_double(r.map)
        << '\t' << format_double(r.zsc_top1) << '\t' << format_double(r.feature_std_min) << '\n';
  }
  return out.str();
}

}  // namespace clipin
