#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "clipin/data.hpp"
#include "clipin/model.hpp"

namespace clipin {

enum class LossKind { Contrastive, Inter, Intra, TotalFixed, TotalLearnable };

inline constexpr LossKind kAllLossKinds[] = {LossKind::Contrastive, LossKind::Inter, LossKind::Intra,
                                            LossKind::TotalFixed, LossKind::TotalLearnable};

std::string loss_kind_name(LossKind kind);

struct GradCheckOptions {
  std::string dims = "tiny";
  std::size_t batch = 4;
  std::uint64_t seed = 0;
  std::size_t coords_per_tensor = 0;  // 0: every coordinate
  double h = 1e-5;
  // Gradients below this magnitude are compared absolutely: central
  // differences at h = 1e-5 on O(10) losses resolve only ~1e-10.
  double rel_floor = 1e-5;
  bool extrapolate = true;
  double tau = 0.07;
};

struct GradCheckRow {
  LossKind kind = LossKind::Contrastive;
  double max_rel_error = 0.0;
  std::string worst;  // "<tensor>[index]"
  std::size_t coordinates = 0;
};

// Random model and batch for one trial. Target tensors are nudged away from
// the online ones so the regression targets are not trivially aligned.
struct GradCheckCase {
  ModelState state;
  PairBatch batch;
};
GradCheckCase make_grad_check_case(const GradCheckOptions& options);

// The scalar being checked, built on the given state and batch.
Tensor grad_check_loss(const ModelState& state, const PairBatch& batch, LossKind kind, double tau);

// Analytic gradients of every online parameter against central differences.
GradCheckRow grad_check(LossKind kind, const GradCheckOptions& options);

}  // namespace clipin
