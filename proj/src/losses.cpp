#include "clipin/losses.hpp"

#include <cmath>

#include "clipin/error.hpp"
#include "clipin/ops.hpp"

namespace clipin {

namespace {

void check_pair(const Tensor& pred, const Tensor& tgt, const char* what) {
  if (pred.rank() != 2 || pred.shape() != tgt.shape()) {
    throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": " + shape_string(pred.shape()) +
                                              " vs " + shape_string(tgt.shape()));
  }
}

Tensor negative_cosine(const Tensor& pred, const Tensor& tgt) {
  return ops::scale(ops::mean(ops::row_dot(ops::l2_normalize(pred), ops::l2_normalize(tgt))), -1.0);
}

// logits are already scaled by 1/tau.
std::pair<Tensor, Tensor> symmetric_cross_entropy(const Tensor& logits) {
  Tensor i2t = ops::scale(ops::mean(ops::diag(ops::log_softmax_rows(logits))), -1.0);
  Tensor t2i =
      ops::scale(ops::mean(ops::diag(ops::log_softmax_rows(ops::transpose(logits)))), -1.0);
  return {i2t, t2i};
}

Tensor cosine_matrix(const Tensor& u_cl, const Tensor& v_cl) {
  check_pair(u_cl, v_cl, "info_nce_loss");
  if (u_cl.rows() < 2) {
    throw Error(ErrorCode::BatchTooSmall, "InfoNCE needs B >= 2, got " + std::to_string(u_cl.rows()));
  }
  return ops::matmul(ops::l2_normalize(u_cl), ops::transpose(ops::l2_normalize(v_cl)));
}

const Tensor& need(const std::optional<Tensor>& t, const char* name) {
  if (!t) throw Error(ErrorCode::MissingComponent, std::string(name) + " is enabled but missing");
  return *t;
}

}  // namespace

std::pair<Tensor, Tensor> inter_modal_loss(const Tensor& u, const Tensor& v, const Tensor& u_tgt,
                                           const Tensor& v_tgt) {
  check_pair(u, v_tgt, "inter_modal_loss");
  check_pair(v, u_tgt, "inter_modal_loss");
  return {negative_cosine(u, v_tgt), negative_cosine(v, u_tgt)};
}

std::pair<Tensor, Tensor> intra_modal_loss(const Tensor& u_intra, const Tensor& v_intra,
                                           const Tensor& u_tgt, const Tensor& v_tgt) {
  check_pair(u_intra, u_tgt, "intra_modal_loss");
  check_pair(v_intra, v_tgt, "intra_modal_loss");
  return {negative_cosine(u_intra, u_tgt), negative_cosine(v_intra, v_tgt)};
}

std::pair<Tensor, Tensor> info_nce_loss(const Tensor& u_cl, const Tensor& v_cl, double tau) {
  if (!(tau > 0.0)) throw Error(ErrorCode::NonPositiveTau, "tau must be > 0");
  return symmetric_cross_entropy(ops::scale(cosine_matrix(u_cl, v_cl), 1.0 / tau));
}

std::pair<Tensor, Tensor> info_nce_loss(const Tensor& u_cl, const Tensor& v_cl,
                                        const Tensor& log_tau) {
  Tensor inv_tau = ops::exp(ops::scale(log_tau, -1.0));
  return symmetric_cross_entropy(ops::scale_by(cosine_matrix(u_cl, v_cl), inv_tau));
}

Tensor total_loss(const LossTerms& terms, const EnabledTerms& enabled, WeightScheme weighting,
                  const Tensor& s_inter, const Tensor& s_intra) {
  Tensor total = Tensor::scalar(0.0);
  if (enabled.contrastive) {
    total = ops::add(total, ops::add(need(terms.cl_i2t, "L_cl_i2t"), need(terms.cl_t2i, "L_cl_t2i")));
  }
  auto weighted = [&](const Tensor& a, const Tensor& b, const Tensor& s) {
    Tensor part = ops::add(a, b);
    if (weighting == WeightScheme::Fixed) return part;
    Tensor lambda = ops::exp(ops::scale(s, -1.0));
    return ops::add(ops::mul(lambda, ops::add_scalar(part, kCosineOffset)), ops::reshape(s, {}));
  };
  if (enabled.inter) {
    total = ops::add(total, weighted(need(terms.inter_i2t, "L_inter_i2t"),
                                     need(terms.inter_t2i, "L_inter_t2i"), s_inter));
  }
  if (enabled.intra) {
    total = ops::add(total, weighted(need(terms.intra_i, "L_intra_i"),
                                     need(terms.intra_t, "L_intra_t"), s_intra));
  }
  return total;
}

LossBreakdown make_breakdown(const LossTerms& terms, WeightScheme weighting,
                             const Tensor& s_inter, const Tensor& s_intra, const Tensor& total) {
  LossBreakdown b;
  auto take = [](const std::optional<Tensor>& t) -> std::optional<double> {
    if (!t) return std::nullopt;
    return t->item();
  };
  b.l_cl_i2t = take(terms.cl_i2t);
  b.l_cl_t2i = take(terms.cl_t2i);
  b.l_inter_i2t = take(terms.inter_i2t);
  b.l_inter_t2i = take(terms.inter_t2i);
  b.l_intra_i = take(terms.intra_i);
  b.l_intra_t = take(terms.intra_t);
  if (weighting == WeightScheme::Learnable) {
    b.lambda_inter = std::exp(-s_inter.item());
    b.lambda_intra = std::exp(-s_intra.item());
  }
  b.total = total.item();
  return b;
}

double recompose_total(const LossBreakdown& p, WeightScheme weighting, double s_inter,
                       double s_intra) {
  double total = 0.0;
  if (p.l_cl_i2t && p.l_cl_t2i) total += *p.l_cl_i2t + *p.l_cl_t2i;
  auto term = [&](const std::optional<double>& a, const std::optional<double>& b, double lambda,
                  double s) {
    if (!a || !b) return 0.0;
    if (weighting == WeightScheme::Fixed) return *a + *b;
    return lambda * (*a + *b + kCosineOffset) + s;
  };
  total += term(p.l_inter_i2t, p.l_inter_t2i, p.lambda_inter, s_inter);
  total += term(p.l_intra_i, p.l_intra_t, p.lambda_intra, s_intra);
  return total;
}

}  // namespace clipin
