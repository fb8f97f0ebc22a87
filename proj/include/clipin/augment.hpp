#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "clipin/rng.hpp"
#include "clipin/tensor.hpp"

namespace clipin {

struct AugmentConfig {
  double flip_prob = 0.5;
  double jitter_strength = 0.1;
  double token_drop_prob = 0.1;
  std::int32_t mask_token_id = kMaskToken;

  void validate() const;
  static AugmentConfig identity() { return {0.0, 0.0, 0.0, kMaskToken}; }
};

using Image = std::vector<double>;  // [3, H, W] row-major, values in [0, 1]
using Tokens = std::vector<std::int32_t>;

// One view: horizontal flip with flip_prob, then a per-channel gain drawn
// uniformly from [1 - jitter, 1 + jitter], clamped to [0, 1].
Image augment_image_view(std::span<const double> image, std::size_t side, const AugmentConfig& cfg,
                         Rng rng);
// Two views drawn from the sub-streams rng.split(1) and rng.split(2).
std::pair<Image, Image> augment_image(std::span<const double> image, std::size_t side,
                                      const AugmentConfig& cfg, const Rng& rng);

// One view: each non-pad token becomes mask_token_id with token_drop_prob.
Tokens augment_text_view(std::span<const std::int32_t> tokens, std::size_t vocab_size,
                         const AugmentConfig& cfg, Rng rng);
std::pair<Tokens, Tokens> augment_text(std::span<const std::int32_t> tokens, std::size_t vocab_size,
                                       const AugmentConfig& cfg, const Rng& rng);

// Mirror along the width axis of a [3, H, W] image.
Image flip_horizontal(std::span<const double> image, std::size_t side);

}  // namespace clipin
