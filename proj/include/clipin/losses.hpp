#pragma once

#include <optional>
#include <utility>

#include "clipin/tensor.hpp"

namespace clipin {

// Batch-mean negative cosine between predictions and stop-gradient targets.
// Returns (image->text, text->image): -cos(u, v_tgt) and -cos(v, u_tgt).
std::pair<Tensor, Tensor> inter_modal_loss(const Tensor& u, const Tensor& v, const Tensor& u_tgt,
                                           const Tensor& v_tgt);

// Same-modality counterpart: (-cos(u_intra, u_tgt), -cos(v_intra, v_tgt)).
std::pair<Tensor, Tensor> intra_modal_loss(const Tensor& u_intra, const Tensor& v_intra,
                                           const Tensor& u_tgt, const Tensor& v_tgt);

// Symmetric InfoNCE over the BxB cosine-similarity matrix scaled by 1/tau,
// positives on the diagonal. Returns (image->text, text->image).
std::pair<Tensor, Tensor> info_nce_loss(const Tensor& u_cl, const Tensor& v_cl, double tau);
// Learnable-temperature variant; tau = exp(log_tau).
std::pair<Tensor, Tensor> info_nce_loss(const Tensor& u_cl, const Tensor& v_cl,
                                        const Tensor& log_tau);

enum class WeightScheme { Fixed, Learnable };

// Component losses of one step; terms of disabled objectives stay empty.
struct LossTerms {
  std::optional<Tensor> cl_i2t, cl_t2i;
  std::optional<Tensor> inter_i2t, inter_t2i;
  std::optional<Tensor> intra_i, intra_t;
};

struct EnabledTerms {
  bool contrastive = true;
  bool inter = true;
  bool intra = true;
};

// Offset that makes each summed cosine objective (range [-2, 2]) non-negative
// before it is weighted by exp(-s) in the learnable scheme.
inline constexpr double kCosineOffset = 2.0;

// Fixed:      L = L_cl + L_inter + L_intra  (both weights held at 1).
// Learnable:  L = L_cl + exp(-s_inter) (L_inter + 2) + exp(-s_intra) (L_intra + 2)
//                 + s_inter + s_intra
// where L_cl, L_inter and L_intra each sum their two directions.
Tensor total_loss(const LossTerms& terms, const EnabledTerms& enabled, WeightScheme weighting,
                  const Tensor& s_inter, const Tensor& s_intra);

struct LossBreakdown {
  std::optional<double> l_cl_i2t, l_cl_t2i;
  std::optional<double> l_inter_i2t, l_inter_t2i;
  std::optional<double> l_intra_i, l_intra_t;
  double lambda_inter = 1.0;
  double lambda_intra = 1.0;
  double total = 0.0;
};

LossBreakdown make_breakdown(const LossTerms& terms, WeightScheme weighting,
                             const Tensor& s_inter, const Tensor& s_intra, const Tensor& total);

// Recomputes the combined loss from the recorded parts, for consistency checks.
double recompose_total(const LossBreakdown& parts, WeightScheme weighting, double s_inter,
                       double s_intra);

}  // namespace clipin
