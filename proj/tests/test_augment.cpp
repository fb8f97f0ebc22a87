#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "clipin/augment.hpp"
#include "clipin/error.hpp"

using namespace clipin;

namespace {

Image random_image(std::size_t side, Rng rng) {
  Image img(3 * side * side);
  for (double& v : img) v = rng.uniform();
  return img;
}

Tokens random_tokens(std::size_t len, std::size_t used, std::size_t vocab, Rng rng) {
  Tokens t(len, kPadToken);
  for (std::size_t i = 0; i < used; ++i) t[i] = static_cast<std::int32_t>(2 + rng.below(vocab - 2));
  return t;
}

void expect_code(ErrorCode code, const std::function<void()>& fn) {
  try {
    fn();
    ADD_FAILURE() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

}  // namespace

TEST(Augment, IdentityConfigIsNoOp) {
  const AugmentConfig id = AugmentConfig::identity();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Image img = random_image(5, Rng(seed));
    const auto [a, b] = augment_image(img, 5, id, Rng(seed + 100));
    EXPECT_EQ(a, img);
    EXPECT_EQ(b, img);
    const Tokens t = random_tokens(16, 9, 66, Rng(seed));
    const auto [ta, tb] = augment_text(t, 66, id, Rng(seed + 200));
    EXPECT_EQ(ta, t);
    EXPECT_EQ(tb, t);
  }
}

TEST(Augment, FlipIsAnInvolution) {
  const Image img = random_image(7, Rng(1));
  const Image once = flip_horizontal(img, 7);
  EXPECT_NE(once, img);
  EXPECT_EQ(flip_horizontal(once, 7), img);
  // Pixel (c=1, y=2, x=0) lands at x=6.
  EXPECT_EQ(once[(1 * 7 + 2) * 7 + 6], img[(1 * 7 + 2) * 7 + 0]);
}

TEST(Augment, ImageViewReplaysItsStream) {
  const std::size_t side = 4;
  Image img(3 * side * side, 0.5);
  img[0] = 0.25;
  const AugmentConfig cfg{0.5, 0.1, 0.0, kMaskToken};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Rng root(seed);
    const Image out = augment_image_view(img, side, cfg, root);
    Rng replay = root;
    const bool flip = replay.uniform() < cfg.flip_prob;
    const Image base = flip ? flip_horizontal(img, side) : img;
    for (std::size_t c = 0; c < 3; ++c) {
      const double gain = 1.0 + 0.1 * (2.0 * replay.uniform() - 1.0);
      EXPECT_GE(gain, 0.9);
      EXPECT_LE(gain, 1.1);
      for (std::size_t i = 0; i < side * side; ++i) {
        EXPECT_DOUBLE_EQ(out[c * side * side + i], std::clamp(base[c * side * side + i] * gain, 0.0, 1.0));
      }
    }
  }
}

TEST(Augment, OutputStaysInUnitRange) {
  const AugmentConfig strong{1.0, 0.9, 0.0, kMaskToken};
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto [a, b] = augment_image(random_image(6, Rng(seed)), 6, strong, Rng(seed));
    for (double v : a) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
    for (double v : b) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
  }
}

TEST(Augment, MaskRate) {
  const AugmentConfig cfg{0.0, 0.0, 0.1, kMaskToken};
  std::size_t masked = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const Tokens t = random_tokens(16, 10, 66, Rng(seed));
    const Tokens out = augment_text_view(t, 66, cfg, Rng(seed).split("aug"));
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t[i] == kPadToken) {
        EXPECT_EQ(out[i], kPadToken);
        continue;
      }
      ++total;
      if (out[i] == kMaskToken) {
        ++masked;
      } else {
        EXPECT_EQ(out[i], t[i]);
      }
    }
  }
  EXPECT_NEAR(static_cast<double>(masked) / total, 0.1, 0.02);
}

TEST(Augment, FullDropMasksEveryWord) {
  const AugmentConfig cfg{1.0, 0.0, 1.0, kMaskToken};
  const Tokens t = random_tokens(8, 5, 66, Rng(3));
  const Tokens out = augment_text_view(t, 66, cfg, Rng(4));
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(out[i], i < 5 ? kMaskToken : kPadToken);
  // flip_prob 1 always mirrors.
  const Image img = random_image(3, Rng(5));
  EXPECT_EQ(augment_image_view(img, 3, cfg, Rng(6)), flip_horizontal(img, 3));
}

TEST(Augment, ViewsUseDistinctSubStreams) {
  const AugmentConfig cfg;
  const Image img = random_image(8, Rng(1));
  const Rng rng(77);
  const auto [a, b] = augment_image(img, 8, cfg, rng);
  EXPECT_NE(a, b);
  EXPECT_EQ(a, augment_image_view(img, 8, cfg, rng.split(1)));
  EXPECT_EQ(b, augment_image_view(img, 8, cfg, rng.split(2)));
  const Tokens t = random_tokens(16, 16, 66, Rng(2));
  const auto [ta, tb] = augment_text(t, 66, AugmentConfig{0, 0, 0.5, kMaskToken}, rng);
  EXPECT_EQ(ta, augment_text_view(t, 66, AugmentConfig{0, 0, 0.5, kMaskToken}, rng.split(1)));
  EXPECT_EQ(tb, augment_text_view(t, 66, AugmentConfig{0, 0, 0.5, kMaskToken}, rng.split(2)));
}

TEST(Augment, Errors) {
  Image img = random_image(2, Rng(1));
  expect_code(ErrorCode::ShapeMismatch, [&] { augment_image_view(img, 3, {}, Rng(0)); });
  img[3] = 1.5;
  expect_code(ErrorCode::OutOfRangePixels, [&] { augment_image_view(img, 2, {}, Rng(0)); });
  const Tokens bad{2, 70};
  expect_code(ErrorCode::TokenOutOfRange, [&] { augment_text_view(bad, 66, {}, Rng(0)); });
  expect_code(ErrorCode::InvalidConfig, [] { AugmentConfig{1.5, 0.1, 0.1, kMaskToken}.validate(); });
  expect_code(ErrorCode::InvalidConfig, [] { AugmentConfig{0.5, -0.1, 0.1, kMaskToken}.validate(); });
}
