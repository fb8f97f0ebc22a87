#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>
#include <json.hpp>

#include "clipin/error.hpp"
#include "clipin/eval.hpp"
#include "clipin/train.hpp"

using namespace clipin;

namespace {

void expect_code(ErrorCode code, const std::function<void()>& fn) {
  try {
    fn();
    ADD_FAILURE() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

using Labels = std::vector<std::uint8_t>;

double pairwise_auc(const std::vector<double>& s, const Labels& y) {
  double credit = 0, pairs = 0;
  for (std::size_t p = 0; p < s.size(); ++p)
    for (std::size_t n = 0; n < s.size(); ++n) {
      if (!y[p] || y[n]) continue;
      pairs += 1;
      credit += s[p] > s[n] ? 1.0 : (s[p] == s[n] ? 0.5 : 0.0);
    }
  return credit / pairs;
}

// Rank of i: items scored higher, or equal and listed earlier, come first.
double rank_ap(const std::vector<double>& s, const Labels& y) {
  auto before = [&](std::size_t j, std::size_t i) { return s[j] > s[i] || (s[j] == s[i] && j < i); };
  double sum = 0, positives = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    positives += 1;
    double rank = 1, hits = 1;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (j != i && before(j, i)) {
        rank += 1;
        hits += y[j];
      }
    }
    sum += hits / rank;
  }
  return sum / positives;
}

// Cyclic Jacobi eigenvalues of a symmetric matrix.
std::vector<double> jacobi_eigenvalues(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const double t = (theta >= 0 ? 1 : -1) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i][i];
  return ev;
}

Tensor random_features(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<double> v(n * d);
  for (double& x : v) x = rng.normal();
  return Tensor::from({n, d}, std::move(v));
}

}  // namespace

TEST(Auc, WorkedExample) {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const Labels y{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(auc(s, y), 0.75);
  EXPECT_DOUBLE_EQ(auc(std::vector<double>{1, 1, 1, 1}, y), 0.5);
  expect_code(ErrorCode::SingleClass, [] { auc(std::vector<double>{1, 2}, Labels{1, 1}); });
  expect_code(ErrorCode::SingleClass, [] { auc(std::vector<double>{1, 2}, Labels{0, 0}); });
  expect_code(ErrorCode::ShapeMismatch, [] { auc(std::vector<double>{1, 2}, Labels{0}); });
}

TEST(AveragePrecision, WorkedExamples) {
  EXPECT_NEAR(average_precision(std::vector<double>{0.1, 0.4, 0.35, 0.8}, Labels{0, 0, 1, 1}), 5.0 / 6.0, 1e-15);
  EXPECT_DOUBLE_EQ(average_precision(std::vector<double>{0.9, 0.8, 0.7, 0.1}, Labels{0, 0, 0, 1}), 0.25);
  expect_code(ErrorCode::NoPositives, [] { average_precision(std::vector<double>{1, 2}, Labels{0, 0}); });
}

TEST(Metrics, MatchBruteForceEnumeration) {
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    Rng rng(seed);
    const std::size_t n = 2 + rng.below(11);
    std::vector<double> s(n);
    Labels y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(4));  // many ties
      y[i] = rng.uniform() < 0.5;
    }
    y[0] = 1;
    y[1] = 0;
    EXPECT_NEAR(auc(s, y), pairwise_auc(s, y), 1e-15) << seed;
    EXPECT_NEAR(average_precision(s, y), rank_ap(s, y), 1e-15) << seed;
  }
}

TEST(Metrics, InvariantUnderMonotoneTransforms) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::size_t n = 20;
    std::vector<double> s(n), t(n);
    Labels y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rng.uniform(-2, 2);
      t[i] = std::exp(3 * s[i]) + 7;
      y[i] = i % 3 == 0;
    }
    EXPECT_DOUBLE_EQ(auc(s, y), auc(t, y));
    EXPECT_DOUBLE_EQ(average_precision(s, y), average_precision(t, y));
  }
}

TEST(Collapse, IdenticalRowsHaveRankOne) {
  const Tensor x = Tensor::from({5, 3}, std::vector<double>{1, 2, 2, 1, 2, 2, 1, 2, 2, 1, 2, 2, 1, 2, 2});
  const CollapseStats s = collapse_diagnostics(x);
  EXPECT_NEAR(s.effective_rank, 1.0, 1e-12);
  EXPECT_NEAR(s.feature_std_min, 0.0, 1e-15);
}

TEST(Collapse, OrthonormalBasisHasFullRank) {
  const std::size_t d = 6;
  std::vector<double> v(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) v[i * d + i] = 3.0;  // row norms do not matter
  const CollapseStats s = collapse_diagnostics(Tensor::from({d, d}, v));
  EXPECT_NEAR(s.effective_rank, static_cast<double>(d), 1e-12);
  // Each column holds one 1 and five 0s.
  EXPECT_NEAR(s.feature_std_min, std::sqrt(1.0 / 6 - 1.0 / 36), 1e-15);
  expect_code(ErrorCode::ShapeMismatch, [] { collapse_diagnostics(Tensor::zeros({0, 3})); });
}

TEST(Collapse, MatchesJacobiOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t n = 5 + rng.below(20), d = 2 + rng.below(8);
    const Tensor x = random_features(rng, n, d);
    std::vector<std::vector<double>> rows(n, std::vector<double>(d));
    for (std::size_t i = 0; i < n; ++i) {
      double norm = 0;
      for (std::size_t j = 0; j < d; ++j) norm += x.at(i, j) * x.at(i, j);
      for (std::size_t j = 0; j < d; ++j) rows[i][j] = x.at(i, j) / std::sqrt(norm);
    }
    std::vector<std::vector<double>> gram(d, std::vector<double>(d, 0.0));
    for (const auto& r : rows)
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) gram[a][b] += r[a] * r[b];
    double total = 0, entropy = 0;
    std::vector<double> sv;
    for (double e : jacobi_eigenvalues(gram)) sv.push_back(std::sqrt(std::max(e, 0.0)));
    // Squaring loses half the digits: exact zeros come back near 1e-8.
    const double zero = 1e-6 * *std::max_element(sv.begin(), sv.end());
    for (double s : sv)
      if (s > zero) total += s;
    for (double s : sv)
      if (s > zero) entropy -= s / total * std::log(s / total);
    double std_min = 1e300;
    for (std::size_t j = 0; j < d; ++j) {
      double m = 0, v = 0;
      for (const auto& r : rows) m += r[j] / n;
      for (const auto& r : rows) v += (r[j] - m) * (r[j] - m) / n;
      std_min = std::min(std_min, std::sqrt(v));
    }
    const CollapseStats s = collapse_diagnostics(x);
    EXPECT_NEAR(s.effective_rank, std::exp(entropy), 1e-9) << seed;
    EXPECT_NEAR(s.feature_std_min, std_min, 1e-12) << seed;
  }
}

TEST(Probe, SeparableFeaturesScorePerfectly) {
  Rng rng(1);
  const std::size_t n = 400, classes = 3;
  BitMatrix labels(n, Labels(classes));
  std::vector<double> v(n * classes);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < classes; ++c) {
      labels[i][c] = rng.uniform() < 0.5;
      v[i * classes + c] = (labels[i][c] ? 1.0 : -1.0) + 0.1 * rng.normal();
    }
  const EvalReport r = linear_probe(Tensor::from({n, classes}, v), labels);
  EXPECT_DOUBLE_EQ(r.mean_auc, 1.0);
  EXPECT_DOUBLE_EQ(r.map, 1.0);
  EXPECT_TRUE(r.skipped_classes.empty());
  EXPECT_EQ(r.per_class_auc.size(), classes);
}

TEST(Probe, RandomLabelsScoreNearChance) {
  Rng rng(2);
  const std::size_t n = 2000;
  const Tensor x = random_features(rng, n, 8);
  BitMatrix labels(n, Labels(4));
  for (auto& row : labels)
    for (auto& b : row) b = rng.uniform() < 0.5;
  const EvalReport r = linear_probe(x, labels);
  EXPECT_NEAR(r.mean_auc, 0.5, 0.05);
}

TEST(Probe, SkipsDegenerateClasses) {
  Rng rng(3);
  const std::size_t n = 100;
  BitMatrix labels(n, Labels{0, 0});
  for (auto& row : labels) row[1] = rng.uniform() < 0.5;
  const EvalReport r = linear_probe(random_features(rng, n, 4), labels);
  ASSERT_EQ(r.skipped_classes, std::vector<std::size_t>{0});
  EXPECT_TRUE(std::isnan(r.per_class_auc[0]));
  EXPECT_FALSE(std::isnan(r.mean_auc));
  BitMatrix all_zero(n, Labels{0, 0});
  expect_code(ErrorCode::DegenerateClass, [&] { linear_probe(random_features(rng, n, 4), all_zero); });
  expect_code(ErrorCode::ShapeMismatch, [&] { linear_probe(random_features(rng, n - 1, 4), labels); });
}

TEST(Probe, SeededAndDeterministic) {
  Rng rng(4);
  const Tensor x = random_features(rng, 300, 5);
  BitMatrix labels(300, Labels(2));
  for (std::size_t i = 0; i < 300; ++i) {
    labels[i][0] = x.at(i, 0) + 0.5 * x.at(i, 1) > 0;
    labels[i][1] = x.at(i, 2) > 0.3;
  }
  const EvalReport a = linear_probe(x, labels), b = linear_probe(x, labels);
  EXPECT_EQ(a.per_class_auc, b.per_class_auc);
  ProbeConfig other;
  other.seed = 9;
  EXPECT_NE(linear_probe(x, labels, other).per_class_auc, a.per_class_auc);
  EXPECT_GT(a.mean_auc, 0.95);
}

TEST(ZeroShot, ScoringRules) {
  // Equal scores everywhere: AUC is exactly chance and argmax takes class 0.
  const Tensor flat = Tensor::full({4, 3}, 0.2);
  const BitMatrix labels{{1, 0, 0}, {0, 1, 1}, {1, 1, 0}, {0, 0, 1}};
  const std::vector<int> primary{0, 1, 0, 2};
  const ZscResult r = score_zero_shot(flat, labels, primary);
  for (double a : r.per_class_auc) EXPECT_DOUBLE_EQ(a, 0.5);
  EXPECT_DOUBLE_EQ(r.top1, 0.5);

  const Tensor s = Tensor::from({4, 3}, std::vector<double>{0.9, 0.1, 0.0, 0.2, 0.8, 0.3, 0.5, 0.6, 0.1, 0.0, 0.1, 0.7});
  const ZscResult base = score_zero_shot(s, labels, primary);
  EXPECT_DOUBLE_EQ(base.top1, 0.75);
  std::vector<double> scaled(s.values().begin(), s.values().end());
  for (double& v : scaled) v = 3 * v + 1;
  const ZscResult r2 = score_zero_shot(Tensor::from({4, 3}, scaled), labels, primary);
  EXPECT_EQ(r2.per_class_auc, base.per_class_auc);
  EXPECT_EQ(r2.top1, base.top1);

  const std::vector<int> unknown{-1, -1, 1, -1};
  EXPECT_DOUBLE_EQ(score_zero_shot(s, labels, unknown).top1, 1.0);
  expect_code(ErrorCode::ShapeMismatch, [&] { score_zero_shot(s, BitMatrix(3, Labels(3)), primary); });
}

class EvalWithModel : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg.dims = "tiny";
    cfg.n_samples = 64;
    cfg.latent_dims = 4;
    cfg.classes = 4;
    cfg.batch_size = 8;
    dataset = make_dataset(cfg);
    state = init_model_for(cfg, dataset);
  }
  TrainConfig cfg;
  Dataset dataset;
  ModelState state;
};

TEST_F(EvalWithModel, PromptOrderPermutesScoreColumns) {
  const Tensor images = stack_images(dataset);
  const TokenBatch prompts = class_prompts(dataset.codebook(), 4, state.dims.max_text_len);
  TokenBatch reversed = prompts;
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t j = 0; j < prompts.length; ++j) reversed.ids[c * prompts.length + j] = prompts.at(3 - c, j);
  const Tensor a = zero_shot_classify(state, images, prompts);
  const Tensor b = zero_shot_classify(state, images, reversed);
  ASSERT_EQ(a.shape(), (Shape{64, 4}));
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_EQ(a.at(i, c), b.at(i, 3 - c));
      EXPECT_LE(std::abs(a.at(i, c)), 1.0 + 1e-12);
    }
  expect_code(ErrorCode::EmptyPrompts, [&] { zero_shot_classify(state, images, TokenBatch{0, prompts.length, {}}); });
}

TEST_F(EvalWithModel, FeatureChunkingDoesNotChangeValues) {
  const Tensor images = stack_images(dataset);
  for (Branch b : {Branch::Encoder, Branch::Pre, Branch::Contrastive}) {
    const Tensor whole = extract_features(state, images, b, 256);
    const Tensor chunked = extract_features(state, images, b, 7);
    ASSERT_EQ(whole.shape(), chunked.shape());
    // GEMM kernels block by row count, so only the last bits may move.
    for (std::size_t i = 0; i < whole.size(); ++i) EXPECT_NEAR(whole[i], chunked[i], 1e-12);
  }
  EXPECT_EQ(extract_features(state, images, Branch::Encoder).cols(), state.dims.d_enc);
  EXPECT_EQ(extract_features(state, images, Branch::Contrastive).cols(), state.dims.d_cl);
}

TEST_F(EvalWithModel, ReportSerializes) {
  const EvalReport r = evaluate_model(state, dataset);
  EXPECT_EQ(r.per_class_auc.size(), 4u);
  EXPECT_GE(r.zsc_top1, 0.0);
  EXPECT_LE(r.zsc_top1, 1.0);
  EXPECT_GT(r.effective_rank, 0.0);
  const auto j = nlohmann::json::parse(r.to_jsonl());
  EXPECT_DOUBLE_EQ(j.at("mean_auc").get<double>(), r.mean_auc);
  EXPECT_TRUE(j.contains("feature_std_min"));
  const std::string tsv = r.to_tsv();
  EXPECT_EQ(std::count(tsv.begin(), tsv.end(), '\n'), 2);
  EXPECT_EQ(tsv.rfind("mean_auc\t", 0), 0u);
}

TEST(Branch, Names) {
  for (Branch b : {Branch::Encoder, Branch::Pre, Branch::Contrastive}) EXPECT_EQ(parse_branch(branch_name(b)), b);
  expect_code(ErrorCode::InvalidConfig, [] { parse_branch("ncl"); });
}
