#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "clipin/augment.hpp"
#include "clipin/rng.hpp"
#include "clipin/tensor.hpp"

namespace clipin {

// Knobs of the synthetic paired corpus. A latent z ~ N(0, I_k) drives both
// the image (through a fixed random projection) and the caption (one
// codebook word per latent dimension).
struct LatentSpec {
  std::size_t k = 8;
  std::size_t classes = 8;
  double noise_sigma = 0.35;
  double redundancy_rate = 0.0;  // chance a sample reuses an earlier latent
  double looseness_rate = 0.0;   // chance a caption keeps only a random subset of words
  std::size_t image_side = 16;
  std::size_t max_text_len = 16;
  std::size_t buckets = 4;  // magnitude buckets per sign

  void validate() const;
};

// Word <-> id mapping. Id 0 is padding, 1 is the mask token; each latent
// dimension owns 2 * buckets words "a<dim><+|-><bucket>".
class Codebook {
 public:
  Codebook(std::size_t k, std::size_t buckets);

  std::size_t vocab_size() const { return 2 + k_ * 2 * buckets_; }
  std::size_t dims() const { return k_; }
  std::size_t buckets() const { return buckets_; }

  std::int32_t token(std::size_t dim, bool positive, std::size_t bucket) const;
  std::string word(std::int32_t id) const;
  std::optional<std::int32_t> lookup(const std::string& word) const;

  struct Entry {
    std::size_t dim;
    bool positive;
    std::size_t bucket;
  };
  std::optional<Entry> decode(std::int32_t id) const;

  // Magnitude bucket of |z| using equal-mass quantiles of the half-normal.
  std::size_t bucket_of(double abs_z) const;

 private:
  std::size_t k_;
  std::size_t buckets_;
  std::vector<double> thresholds_;
};

struct Sample {
  std::string id;
  Image image;                  // [3, side, side]
  Tokens tokens;                // length max_text_len, pad-filled
  std::vector<std::uint8_t> labels;
  int primary = -1;             // single-label reduction, -1 if unknown
  std::vector<double> latent;   // empty for samples loaded from disk
};

struct Dataset {
  LatentSpec spec;
  std::vector<Sample> samples;
  std::size_t truncated = 0;       // captions cut to max_text_len
  std::size_t unknown_tokens = 0;  // words mapped to the mask token

  Codebook codebook() const { return {spec.k, spec.buckets}; }
  std::size_t size() const { return samples.size(); }
};

class SyntheticGenerator {
 public:
  SyntheticGenerator(const LatentSpec& spec, const Rng& rng);

  Sample gen_sample();

  const LatentSpec& spec() const { return spec_; }
  const Codebook& codebook() const { return codebook_; }
  std::size_t cache_size() const { return cache_.size(); }

  // Caption words for a latent before looseness is applied.
  Tokens encode_latent(const std::vector<double>& z) const;

 private:
  LatentSpec spec_;
  Codebook codebook_;
  std::vector<double> projection_;  // [pixels, k]
  Rng latent_rng_;
  Rng noise_rng_;
  Rng structure_rng_;
  std::vector<std::vector<double>> cache_;
  std::size_t count_ = 0;
};

Dataset generate_corpus(const LatentSpec& spec, std::size_t n, std::uint64_t seed);

// One prompt per class: the top positive-magnitude word of that attribute.
TokenBatch class_prompts(const Codebook& codebook, std::size_t classes, std::size_t max_text_len);

struct PairBatch {
  Tensor images_v1;  // [B, 3, H, W]
  Tensor images_v2;
  TokenBatch tokens_v1;
  TokenBatch tokens_v2;
  std::vector<std::vector<std::uint8_t>> labels;
  std::vector<std::string> ids;

  std::size_t size() const { return ids.size(); }
};

// Epoch-deterministic batch stream: batch `step` is a pure function of
// (dataset, seed, step), so a resumed run sees exactly the same batches.
class BatchStream {
 public:
  BatchStream(const Dataset& dataset, std::size_t batch_size, const AugmentConfig& aug,
              const Rng& rng);

  std::size_t batches_per_epoch() const { return batches_per_epoch_; }
  std::vector<std::size_t> epoch_order(std::uint64_t epoch) const;
  PairBatch batch_at(std::uint64_t step) const;

  PairBatch next() { return batch_at(position_++); }
  void seek(std::uint64_t step) { position_ = step; }
  std::uint64_t position() const { return position_; }

 private:
  const Dataset* dataset_;
  std::size_t batch_size_;
  std::size_t batches_per_epoch_;
  AugmentConfig aug_;
  Rng shuffle_rng_;
  Rng augment_rng_;
  std::uint64_t position_ = 0;
  mutable std::uint64_t cached_epoch_ = ~std::uint64_t{0};
  mutable std::vector<std::size_t> cached_order_;
};

BatchStream make_batches(const Dataset& dataset, std::size_t batch_size, const AugmentConfig& aug,
                         const Rng& rng);

// Un-augmented tensors for evaluation.
Tensor stack_images(const Dataset& dataset, std::span<const std::size_t> indices);
Tensor stack_images(const Dataset& dataset);
TokenBatch stack_tokens(const Dataset& dataset);

// --- on-disk corpus -------------------------------------------------------
// pairs.tsv:   id <TAB> relative_image_path <TAB> caption
// labels.tsv:  id <TAB> label bitstring [<TAB> primary class]
// corpus.txt:  key = value geometry (k, buckets, classes, image_side, ...)
// images are binary PPM (P6, 8-bit RGB).

void write_ppm(const std::filesystem::path& path, std::span<const double> image, std::size_t side);
// Reads a P6 file and center-crops / nearest-resizes it to side x side.
Image read_ppm(const std::filesystem::path& path, std::size_t side);

// Tokenizes whitespace-separated codebook words. Unknown words become the
// mask token (counted); sequences longer than max_len are truncated (counted).
Tokens tokenize(const std::string& caption, const Codebook& codebook, std::size_t max_len,
                std::size_t* unknown = nullptr, bool* truncated = nullptr);
std::string caption_of(const Tokens& tokens, const Codebook& codebook);

Dataset load_pairs(const std::filesystem::path& pairs_file, const LatentSpec& geometry);
void write_corpus(const Dataset& dataset, const std::filesystem::path& dir, std::uint64_t seed);
// Reads corpus.txt for the geometry, then pairs.tsv and labels.tsv.
Dataset load_corpus(const std::filesystem::path& dir);

}  // namespace clipin
