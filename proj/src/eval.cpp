#include "clipin/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>
#include <json.hpp>

#include "clipin/error.hpp"
#include "clipin/ops.hpp"

namespace clipin {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrix> as_matrix(const Tensor& t) {
  return {t.values().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  const std::size_t stride = t.size() / t.dim(0);
  Shape shape = t.shape();
  shape[0] = end - begin;
  auto v = t.values();
  return Tensor::from(shape, Buffer(v.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                    v.begin() + static_cast<std::ptrdiff_t>(end * stride)));
}

TokenBatch slice_rows(const TokenBatch& t, std::size_t begin, std::size_t end) {
  return {end - begin, t.length,
          std::vector<std::int32_t>(t.ids.begin() + static_cast<std::ptrdiff_t>(begin * t.length),
                                    t.ids.begin() + static_cast<std::ptrdiff_t>(end * t.length))};
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  std::size_t rows = 0;
  Buffer values;
  for (const auto& p : parts) {
    rows += p.rows();
    values.insert(values.end(), p.values().begin(), p.values().end());
  }
  const std::size_t cols = parts.empty() ? 0 : parts.front().cols();
  return Tensor::from({rows, cols}, std::move(values));
}

Tensor tap(const ModelState& state, const OnlineFeatures& f, Branch branch, Modality modality) {
  switch (branch) {
    case Branch::Encoder:
      return f.encoded;
    case Branch::Pre:
      return f.pre;
    case Branch::Contrastive:
      break;
  }
  const auto& proj = modality == Modality::Image ? state.online.cl_image : state.online.cl_text;
  return proj.forward(contrastive_input(state, f, modality));
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  std::size_t n = 0;
  for (double x : xs)
    if (!std::isnan(x)) s += x, ++n;
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

void check_scores(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    throw Error(ErrorCode::ShapeMismatch, "scores and labels differ in length");
  }
}

}  // namespace

Branch parse_branch(const std::string& name) {
  if (name == "encoder") return Branch::Encoder;
  if (name == "pre") return Branch::Pre;
  if (name == "cl") return Branch::Contrastive;
  throw Error(ErrorCode::InvalidConfig, "unknown branch '" + name + "' (encoder|pre|cl)");
}

std::string branch_name(Branch branch) {
  switch (branch) {
    case Branch::Encoder:
      return "encoder";
    case Branch::Pre:
      return "pre";
    case Branch::Contrastive:
      return "cl";
  }
  return "?";
}

Tensor extract_features(const ModelState& state, const Tensor& images, Branch branch,
                        std::size_t chunk) {
  check_images(state.dims, images);
  NoGradGuard no_grad;
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < images.dim(0); b += chunk) {
    const std::size_t e = std::min(images.dim(0), b + chunk);
    auto f = encode_image_online(state, slice_rows(images, b, e), false);
    parts.push_back(tap(state, f, branch, Modality::Image));
  }
  return concat_rows(parts);
}

Tensor extract_text_features(const ModelState& state, const TokenBatch& tokens, Branch branch,
                             std::size_t chunk) {
  NoGradGuard no_grad;
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < tokens.batch; b += chunk) {
    const std::size_t e = std::min(tokens.batch, b + chunk);
    auto f = encode_text_online(state, slice_rows(tokens, b, e), false);
    parts.push_back(tap(state, f, branch, Modality::Text));
  }
  return concat_rows(parts);
}

Tensor extract_features(const ModelState& state, const Dataset& dataset, Branch branch) {
  return extract_features(state, stack_images(dataset), branch);
}

double auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_scores(scores, labels);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double positives = 0.0, negatives_below = 0.0, credit = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    double pos = 0.0, neg = 0.0;
    for (; j < order.size() && scores[order[j]] == scores[order[i]]; ++j) {
      (labels[order[j]] ? pos : neg) += 1.0;
    }
    credit += pos * negatives_below + 0.5 * pos * neg;
    negatives_below += neg;
    positives += pos;
    i = j;
  }
  if (positives == 0.0 || negatives_below == 0.0) {
    throw Error(ErrorCode::SingleClass, "AUC needs both positive and negative labels");
  }
  return credit / (positives * negatives_below);
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_scores(scores, labels);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double hits = 0.0, sum = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (!labels[order[r]]) continue;
    hits += 1.0;
    sum += hits / static_cast<double>(r + 1);
  }
  if (hits == 0.0) throw Error(ErrorCode::NoPositives, "average precision needs a positive label");
  return sum / hits;
}

CollapseStats collapse_diagnostics(const Tensor& features) {
  if (features.rank() != 2 || features.rows() == 0) {
    throw Error(ErrorCode::ShapeMismatch, "collapse_diagnostics expects a non-empty [N, d] matrix");
  }
  RowMatrix x = as_matrix(features);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double n = x.row(i).norm();
    x.row(i) /= std::max(n, ops::kNormEps);
  }
  CollapseStats out;
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const Eigen::RowVectorXd var = (x.rowwise() - mu).array().square().colwise().mean();
  out.feature_std_min = var.cwiseSqrt().minCoeff();

  Eigen::BDCSVD<Eigen::MatrixXd> svd(x);
  const Eigen::VectorXd sv = svd.singularValues();
  const double cutoff = sv.size() ? sv(0) * 1e-12 : 0.0;
  double total = 0.0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > cutoff) total += sv(i);
  double entropy = 0.0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv(i) <= cutoff) continue;
    const double p = sv(i) / total;
    entropy -= p * std::log(p);
  }
  out.effective_rank = total > 0.0 ? std::exp(entropy) : 0.0;
  return out;
}

EvalReport linear_probe(const Tensor& features, const BitMatrix& labels, const ProbeConfig& cfg) {
  if (features.rank() != 2 || features.rows() != labels.size()) {
    throw Error(ErrorCode::ShapeMismatch, "probe features " + shape_string(features.shape()) +
                                              " vs " + std::to_string(labels.size()) + " label rows");
  }
  const std::size_t n = features.rows(), d = features.cols();
  const std::size_t classes = labels.empty() ? 0 : labels.front().size();
  for (const auto& row : labels) {
    if (row.size() != classes) throw Error(ErrorCode::ShapeMismatch, "ragged label matrix");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng(cfg.seed).split("probe-split");
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(n)));
  if (n_train < 2 || n_train >= n) {
    throw Error(ErrorCode::EmptyDataset, "probe split leaves an empty side");
  }

  const auto all = as_matrix(features);
  Eigen::MatrixXd train(n_train, d), test(n - n_train, d);
  for (std::size_t i = 0; i < n; ++i) {
    (i < n_train ? train.row(i) : test.row(i - n_train)) = all.row(order[i]);
  }
  const Eigen::RowVectorXd mu = train.colwise().mean();
  Eigen::RowVectorXd sd = (train.rowwise() - mu).array().square().colwise().mean().sqrt();
  for (Eigen::Index j = 0; j < sd.size(); ++j) sd(j) = sd(j) > 1e-12 ? sd(j) : 1.0;
  train = (train.rowwise() - mu).array().rowwise() / sd.array();
  test = (test.rowwise() - mu).array().rowwise() / sd.array();

  EvalReport report;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t c = 0; c < classes; ++c) {
    Eigen::VectorXd y(n_train);
    std::vector<std::uint8_t> y_test(n - n_train);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint8_t bit = labels[order[i]][c];
      if (i < n_train) y(static_cast<Eigen::Index>(i)) = bit;
      else y_test[i - n_train] = bit;
    }
    const double pos_train = y.sum();
    const auto pos_test = std::count(y_test.begin(), y_test.end(), 1);
    if (pos_train == 0.0 || pos_train == static_cast<double>(n_train) || pos_test == 0 ||
        pos_test == static_cast<std::ptrdiff_t>(y_test.size())) {
      report.skipped_classes.push_back(c);
      report.per_class_auc.push_back(nan);
      report.per_class_ap.push_back(nan);
      continue;
    }
    Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
    double b = 0.0;
    const double inv_n = 1.0 / static_cast<double>(n_train);
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
      Eigen::VectorXd z = train * w;
      z.array() += b;
      const Eigen::VectorXd r = (1.0 / (1.0 + (-z.array()).exp())).matrix() - y;
      w -= cfg.lr * inv_n * (train.transpose() * r);
      b -= cfg.lr * inv_n * r.sum();
    }
    Eigen::VectorXd s = test * w;
    s.array() += b;
    std::vector<double> scores(s.data(), s.data() + s.size());
    report.per_class_auc.push_back(auc(scores, y_test));
    report.per_class_ap.push_back(average_precision(scores, y_test));
  }
  if (classes > 0 && report.skipped_classes.size() == classes) {
    throw Error(ErrorCode::DegenerateClass, "every class has single-valued labels in a probe split");
  }
  report.mean_auc = mean_of(report.per_class_auc);
  report.map = mean_of(report.per_class_ap);
  return report;
}

Tensor zero_shot_classify(const ModelState& state, const Tensor& images, const TokenBatch& prompts) {
  if (prompts.batch == 0) throw Error(ErrorCode::EmptyPrompts, "zero-shot needs at least one prompt");
  NoGradGuard no_grad;
  Tensor u = ops::l2_normalize(extract_features(state, images, Branch::Contrastive));
  Tensor v = ops::l2_normalize(extract_text_features(state, prompts, Branch::Contrastive));
  return ops::matmul(u, ops::transpose(v));
}

ZscResult score_zero_shot(const Tensor& scores, const BitMatrix& labels, std::span<const int> primary) {
  const std::size_t n = scores.rows(), c = scores.cols();
  if (labels.size() != n || primary.size() != n) {
    throw Error(ErrorCode::ShapeMismatch, "zero-shot scores and labels differ in rows");
  }
  ZscResult out;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t k = 0; k < c; ++k) {
    std::vector<double> col(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = scores.at(i, k);
      y[i] = k < labels[i].size() ? labels[i][k] : 0;
    }
    const auto pos = std::count(y.begin(), y.end(), 1);
    const bool usable = pos > 0 && pos < static_cast<std::ptrdiff_t>(n);
    out.per_class_auc.push_back(usable ? auc(col, y) : nan);
    out.per_class_ap.push_back(usable ? average_precision(col, y) : nan);
  }
  std::size_t correct = 0, counted = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (primary[i] < 0) continue;
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (scores.at(i, k) > scores.at(i, best)) best = k;
    ++counted;
    if (static_cast<int>(best) == primary[i]) ++correct;
  }
  out.mean_auc = mean_of(out.per_class_auc);
  out.map = mean_of(out.per_class_ap);
  out.top1 = counted ? static_cast<double>(correct) / static_cast<double>(counted) : nan;
  return out;
}

EvalReport evaluate_model(const ModelState& state, const Dataset& dataset, const EvalOptions& options) {
  const Tensor images = stack_images(dataset);
  BitMatrix labels;
  std::vector<int> primary;
  for (const auto& s : dataset.samples) {
    labels.push_back(s.labels);
    primary.push_back(s.primary);
  }
  const Tensor probe_feats = extract_features(state, images, options.branch);
  EvalReport report = linear_probe(probe_feats, labels, options.probe);

  const TokenBatch prompts = class_prompts(dataset.codebook(), dataset.spec.classes, state.dims.max_text_len);
  report.zsc_top1 = score_zero_shot(zero_shot_classify(state, images, prompts), labels, primary).top1;

  const Tensor cl = options.branch == Branch::Contrastive
                        ? probe_feats
                        : extract_features(state, images, Branch::Contrastive);
  const CollapseStats stats = collapse_diagnostics(cl);
  report.feature_std_min = stats.feature_std_min;
  report.effective_rank = stats.effective_rank;
  return report;
}

namespace {

std::string join(const std::vector<double>& xs) {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t i = 0; i < xs.size(); ++i) out << (i ? "," : "") << xs[i];
  return out.str();
}

}  // namespace

std::string EvalReport::to_tsv() const {
  std::ostringstream out;
  out.precision(17);
  out << "mean_auc\tmap\tzsc_top1\tfeature_std_min\teffective_rank\tper_class_auc\tper_class_ap\n"
      << mean_auc << '\t' << map << '\t' << zsc_top1 << '\t' << feature_std_min << '\t'
      << effective_rank << '\t' << join(per_class_auc) << '\t' << join(per_class_ap) << '\n';
  return out.str();
}

std::string EvalReport::to_jsonl() const {
  nlohmann::json j;
  j["per_class_auc"] = per_class_auc;
  j["mean_auc"] = mean_auc;
  j["per_class_ap"] = per_class_ap;
  j["map"] = map;
  j["zsc_top1"] = zsc_top1;
  j["feature_std_min"] = feature_std_min;
  j["effective_rank"] = effective_rank;
  j["skipped_classes"] = skipped_classes;
  return j.dump();
}

}  // namespace clipin
