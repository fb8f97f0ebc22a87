#include "clipin/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "clipin/error.hpp"
#include "clipin/finite_diff.hpp"
#include "clipin/ops.hpp"
#include "clipin/train.hpp"

namespace clipin {

std::string loss_kind_name(LossKind kind) {
  switch (kind) {
    case LossKind::Contrastive:
      return "contrastive";
    case LossKind::Inter:
      return "inter";
    case LossKind::Intra:
      return "intra";
    case LossKind::TotalFixed:
      return "total_fixed";
    case LossKind::TotalLearnable:
      return "total_learnable";
  }
  return "?";
}

GradCheckCase make_grad_check_case(const GradCheckOptions& options) {
  if (options.batch < 2) throw Error(ErrorCode::BatchTooSmall, "grad check needs batch >= 2");
  const Rng root = Rng(options.seed).split("grad-check");
  const DimsConfig dims = DimsConfig::preset(options.dims);
  Rng init = root.split("model");
  GradCheckCase c{init_model(dims, init, {}), {}};

  Rng noise = root.split("target-noise");
  for (auto& [target, online] : ema_pairs(c.state)) {
    for (double& x : target.mutable_values()) x += 0.1 * noise.normal();
  }
  Rng s = root.split("weights");
  c.state.online.s_inter.mutable_values()[0] = s.uniform(-0.5, 0.5);
  c.state.online.s_intra.mutable_values()[0] = s.uniform(-0.5, 0.5);

  const std::size_t b = options.batch, pixels = dims.pixels(), len = dims.max_text_len;
  Rng data = root.split("batch");
  auto images = [&] {
    Buffer v(b * pixels);
    for (double& x : v) x = data.uniform();
    return Tensor::from({b, dims.channels, dims.image_side, dims.image_side}, std::move(v));
  };
  auto tokens = [&] {
    TokenBatch t{b, len, std::vector<std::int32_t>(b * len, kPadToken)};
    for (std::size_t i = 0; i < b; ++i) {
      const std::size_t n = 1 + data.below(len);
      for (std::size_t j = 0; j < n; ++j) {
        t.ids[i * len + j] = static_cast<std::int32_t>(1 + data.below(dims.vocab_size - 1));
      }
    }
    return t;
  };
  c.batch.images_v1 = images();
  c.batch.images_v2 = images();
  c.batch.tokens_v1 = tokens();
  c.batch.tokens_v2 = tokens();
  for (std::size_t i = 0; i < b; ++i) c.batch.ids.push_back("g" + std::to_string(i));
  return c;
}

Tensor grad_check_loss(const ModelState& state, const PairBatch& batch, LossKind kind, double tau) {
  TrainConfig cfg;
  cfg.tau = tau;
  cfg.ablation = {true, true, true, state.shared_pre};
  if (kind == LossKind::TotalLearnable) cfg.weighting = WeightScheme::Learnable;
  const StepGraph g = forward_losses(state, batch, cfg);
  switch (kind) {
    case LossKind::Contrastive:
      return ops::add(*g.terms.cl_i2t, *g.terms.cl_t2i);
    case LossKind::Inter:
      return ops::add(*g.terms.inter_i2t, *g.terms.inter_t2i);
    case LossKind::Intra:
      return ops::add(*g.terms.intra_i, *g.terms.intra_t);
    case LossKind::TotalFixed:
    case LossKind::TotalLearnable:
      break;
  }
  return g.total;
}

GradCheckRow grad_check(LossKind kind, const GradCheckOptions& options) {
  GradCheckCase c = make_grad_check_case(options);
  const auto params = online_parameters(c.state);
  zero_grads(c.state);
  backward(grad_check_loss(c.state, c.batch, kind, options.tau));

  // Snapshot analytic gradients; parameters outside the loss have none.
  std::vector<Buffer> analytic;
  for (const auto& p : params) {
    const auto g = p.tensor.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(p.tensor.size(), 0.0);
  }

  auto f = [&] {
    NoGradGuard no_grad;
    return grad_check_loss(c.state, c.batch, kind, options.tau).item();
  };
  GradCheckRow row;
  row.kind = kind;
  Rng pick = Rng(options.seed).split("grad-check").split("coords");
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor t = params[k].tensor;
    std::vector<std::size_t> coords;
    if (options.coords_per_tensor == 0 || options.coords_per_tensor >= t.size()) {
      coords.resize(t.size());
      for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
      for (std::size_t i = 0; i < options.coords_per_tensor; ++i) coords.push_back(pick.below(t.size()));
    }
    for (std::size_t i : coords) {
      const double numeric = finite_diff_coordinate(f, t, i, options.h, options.extrapolate);
      const double err = relative_error(analytic[k][i], numeric, options.rel_floor);
      ++row.coordinates;
      if (err > row.max_rel_error || row.worst.empty()) {
        row.max_rel_error = std::max(row.max_rel_error, err);
        if (err >= row.max_rel_error) row.worst = params[k].name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return row;
}

}  // namespace clipin
