#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "clipin/data.hpp"
#include "clipin/model.hpp"

namespace clipin {

// Tap point for frozen features.
enum class Branch { Encoder, Pre, Contrastive };

Branch parse_branch(const std::string& name);  // "encoder" | "pre" | "cl"
std::string branch_name(Branch branch);

// Un-augmented online forward with gradients off, in chunks of `chunk` rows.
Tensor extract_features(const ModelState& state, const Tensor& images, Branch branch,
                        std::size_t chunk = 256);
Tensor extract_text_features(const ModelState& state, const TokenBatch& tokens, Branch branch,
                             std::size_t chunk = 256);
Tensor extract_features(const ModelState& state, const Dataset& dataset, Branch branch);

using BitMatrix = std::vector<std::vector<std::uint8_t>>;  // [N][classes]

// Mann-Whitney AUC; ties between a positive and a negative count one half.
double auc(std::span<const double> scores, std::span<const std::uint8_t> labels);
// Mean precision at the rank of each positive; descending score, ties in input order.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct CollapseStats {
  double feature_std_min = 0.0;
  double effective_rank = 0.0;
};
// Per-dimension std of the l2-normalized rows, and exp(entropy) of the
// normalized singular-value distribution.
CollapseStats collapse_diagnostics(const Tensor& features);

struct EvalReport {
  std::vector<double> per_class_auc;  // NaN for skipped classes
  double mean_auc = 0.0;
  std::vector<double> per_class_ap;
  double map = 0.0;
  double zsc_top1 = 0.0;
  double feature_std_min = 0.0;
  double effective_rank = 0.0;
  std::vector<std::size_t> skipped_classes;

  std::string to_tsv() const;    // header line + one row
  std::string to_jsonl() const;  // single line, no trailing newline
};

struct ProbeConfig {
  std::size_t iterations = 500;
  double lr = 0.1;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
};

// One-vs-rest logistic regression per class by full-batch gradient descent
// on a seeded 80/20 split; metrics are taken on the held-out part. Features
// are standardized with train-split statistics. Classes whose train (or
// held-out) labels are single-valued are skipped and listed.
EvalReport linear_probe(const Tensor& features, const BitMatrix& labels, const ProbeConfig& cfg = {});

// score[n, c] = cosine(image embedding n, prompt embedding c).
Tensor zero_shot_classify(const ModelState& state, const Tensor& images, const TokenBatch& prompts);

struct ZscResult {
  std::vector<double> per_class_auc;
  double mean_auc = 0.0;
  std::vector<double> per_class_ap;
  double map = 0.0;
  double top1 = 0.0;
};
// Top-1 uses argmax with lowest-index tie-break against `primary`.
ZscResult score_zero_shot(const Tensor& scores, const BitMatrix& labels,
                          std::span<const int> primary);

struct EvalOptions {
  Branch branch = Branch::Contrastive;
  ProbeConfig probe;
};

// Linear probe on `branch`, zero-shot with the class prompts, and collapse
// statistics of the contrastive image embedding.
EvalReport evaluate_model(const ModelState& state, const Dataset& dataset,
                          const EvalOptions& options = {});

}  // namespace clipin
