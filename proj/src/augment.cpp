#include "clipin/augment.hpp"

#include <algorithm>
#include <string>

#include "clipin/error.hpp"

namespace clipin {

namespace {

constexpr std::size_t kChannels = 3;

void check_pixels(std::span<const double> image, std::size_t side) {
  if (image.size() != kChannels * side * side) {
    throw Error(ErrorCode::ShapeMismatch, "image holds " + std::to_string(image.size()) +
                                              " values, expected 3x" + std::to_string(side) + "x" +
                                              std::to_string(side));
  }
  for (double v : image) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw Error(ErrorCode::OutOfRangePixels, "pixel " + std::to_string(v) + " outside [0, 1]");
    }
  }
}

void check_tokens(std::span<const std::int32_t> tokens, std::size_t vocab_size) {
  for (auto id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
      throw Error(ErrorCode::TokenOutOfRange, "token " + std::to_string(id) + " outside vocab of " +
                                                  std::to_string(vocab_size));
    }
  }
}

}  // namespace

void AugmentConfig::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(flip_prob) || !prob(token_drop_prob) || !(jitter_strength >= 0.0)) {
    throw Error(ErrorCode::InvalidConfig,
                "augmentation probabilities must lie in [0, 1] and jitter must be >= 0");
  }
}

Image flip_horizontal(std::span<const double> image, std::size_t side) {
  Image out(image.begin(), image.end());
  for (std::size_t c = 0; c < kChannels; ++c)
    for (std::size_t y = 0; y < side; ++y) {
      double* row = out.data() + (c * side + y) * side;
      std::reverse(row, row + side);
    }
  return out;
}

Image augment_image_view(std::span<const double> image, std::size_t side, const AugmentConfig& cfg,
                         Rng rng) {
  check_pixels(image, side);
  const bool flip = rng.uniform() < cfg.flip_prob;
  Image out = flip ? flip_horizontal(image, side) : Image(image.begin(), image.end());
  const std::size_t plane = side * side;
  for (std::size_t c = 0; c < kChannels; ++c) {
    const double gain = 1.0 + cfg.jitter_strength * (2.0 * rng.uniform() - 1.0);
    for (std::size_t i = 0; i < plane; ++i) {
      double& v = out[c * plane + i];
      v = std::clamp(v * gain, 0.0, 1.0);
    }
  }
  return out;
}

std::pair<Image, Image> augment_image(std::span<const double> image, std::size_t side,
                                      const AugmentConfig& cfg, const Rng& rng) {
  return {augment_image_view(image, side, cfg, rng.split(1)),
          augment_image_view(image, side, cfg, rng.split(2))};
}

Tokens augment_text_view(std::span<const std::int32_t> tokens, std::size_t vocab_size,
                         const AugmentConfig& cfg, Rng rng) {
  check_tokens(tokens, vocab_size);
  Tokens out(tokens.begin(), tokens.end());
  for (auto& id : out) {
    if (id == kPadToken) continue;
    if (rng.uniform() < cfg.token_drop_prob) id = cfg.mask_token_id;
  }
  return out;
}

std::pair<Tokens, Tokens> augment_text(std::span<const std::int32_t> tokens, std::size_t vocab_size,
                                       const AugmentConfig& cfg, const Rng& rng) {
  return {augment_text_view(tokens, vocab_size, cfg, rng.split(1)),
          augment_text_view(tokens, vocab_size, cfg, rng.split(2))};
}

}  // namespace clipin
