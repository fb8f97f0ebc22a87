#include "clipin/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "clipin/error.hpp"

namespace clipin {

namespace fs = std::filesystem;

void LatentSpec::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (classes < 1 || classes > k) {
    throw Error(ErrorCode::InvalidConfig, "need 1 <= classes <= k");
  }
  if (!prob(redundancy_rate) || !prob(looseness_rate) || !(noise_sigma >= 0.0)) {
    throw Error(ErrorCode::InvalidConfig, "rates must lie in [0, 1] and noise_sigma >= 0");
  }
  if (image_side < 1 || max_text_len < 1 || buckets < 1) {
    throw Error(ErrorCode::InvalidConfig, "image_side, max_text_len and buckets must be >= 1");
  }
}

// ---------------------------------------------------------------- Codebook

Codebook::Codebook(std::size_t k, std::size_t buckets) : k_(k), buckets_(buckets) {
  // Equal-mass quantiles of |z| for z ~ N(0,1): P(|z| < q) = i / buckets.
  for (std::size_t i = 1; i < buckets; ++i) {
    const double target = static_cast<double>(i) / static_cast<double>(buckets);
    double lo = 0.0, hi = 10.0;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (std::erf(mid / std::sqrt(2.0)) < target ? lo : hi) = mid;
    }
    thresholds_.push_back(0.5 * (lo + hi));
  }
}

std::int32_t Codebook::token(std::size_t dim, bool positive, std::size_t bucket) const {
  return static_cast<std::int32_t>(2 + dim * 2 * buckets_ + (positive ? buckets_ : 0) + bucket);
}

std::size_t Codebook::bucket_of(double abs_z) const {
  return static_cast<std::size_t>(
      std::upper_bound(thresholds_.begin(), thresholds_.end(), abs_z) - thresholds_.begin());
}

std::optional<Codebook::Entry> Codebook::decode(std::int32_t id) const {
  if (id < 2 || static_cast<std::size_t>(id) >= vocab_size()) return std::nullopt;
  const std::size_t rel = static_cast<std::size_t>(id) - 2;
  const std::size_t within = rel % (2 * buckets_);
  return Entry{rel / (2 * buckets_), within >= buckets_, within % buckets_};
}

std::string Codebook::word(std::int32_t id) const {
  if (id == kPadToken) return "<pad>";
  if (id == kMaskToken) return "<mask>";
  auto e = decode(id);
  if (!e) return "<unk>";
  return "a" + std::to_string(e->dim) + (e->positive ? "+" : "-") + std::to_string(e->bucket);
}

std::optional<std::int32_t> Codebook::lookup(const std::string& w) const {
  if (w == "<mask>") return kMaskToken;
  if (w.size() < 4 || w[0] != 'a') return std::nullopt;
  const auto sign_pos = w.find_first_of("+-");
  if (sign_pos == std::string::npos || sign_pos == 1 || sign_pos + 1 >= w.size()) return std::nullopt;
  try {
    std::size_t used = 0;
    const auto dim = std::stoul(w.substr(1, sign_pos - 1), &used);
    if (used != sign_pos - 1) return std::nullopt;
    const auto bucket = std::stoul(w.substr(sign_pos + 1), &used);
    if (used != w.size() - sign_pos - 1) return std::nullopt;
    if (dim >= k_ || bucket >= buckets_) return std::nullopt;
    return token(dim, w[sign_pos] == '+', bucket);
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

// -------------------------------------------------------------- generator

SyntheticGenerator::SyntheticGenerator(const LatentSpec& spec, const Rng& rng)
    : spec_(spec),
      codebook_(spec.k, spec.buckets),
      latent_rng_(rng.split("latent")),
      noise_rng_(rng.split("noise")),
      structure_rng_(rng.split("structure")) {
  spec_.validate();
  Rng proj = rng.split("projection");
  const std::size_t pixels = 3 * spec.image_side * spec.image_side;
  projection_.resize(pixels * spec.k);
  const double scale = 1.0 / std::sqrt(static_cast<double>(spec.k));
  for (auto& w : projection_) w = proj.normal() * scale;
}

Tokens SyntheticGenerator::encode_latent(const std::vector<double>& z) const {
  Tokens words;
  words.reserve(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) {
    words.push_back(codebook_.token(j, z[j] > 0.0, codebook_.bucket_of(std::abs(z[j]))));
  }
  return words;
}

Sample SyntheticGenerator::gen_sample() {
  const std::size_t k = spec_.k;
  std::vector<double> z;
  const bool reuse = structure_rng_.uniform() < spec_.redundancy_rate;
  if (reuse && !cache_.empty()) {
    z = cache_[structure_rng_.below(cache_.size())];
  } else {
    z.resize(k);
    for (auto& v : z) v = latent_rng_.normal();
    cache_.push_back(z);
  }

  Sample s;
  char id[32];
  std::snprintf(id, sizeof id, "s%06zu", count_++);
  s.id = id;

  const std::size_t pixels = 3 * spec_.image_side * spec_.image_side;
  s.image.resize(pixels);
  for (std::size_t p = 0; p < pixels; ++p) {
    double a = 0.0;
    for (std::size_t j = 0; j < k; ++j) a += projection_[p * k + j] * z[j];
    const double noise = noise_rng_.normal() * spec_.noise_sigma;
    s.image[p] = std::clamp(1.0 / (1.0 + std::exp(-a)) + noise, 0.0, 1.0);
  }

  Tokens words = encode_latent(z);
  if (structure_rng_.uniform() < spec_.looseness_rate) {
    Tokens kept;
    for (auto w : words)
      if (structure_rng_.uniform() < 0.5) kept.push_back(w);
    if (kept.empty()) kept.push_back(words[structure_rng_.below(words.size())]);
    words = std::move(kept);
  }
  words.resize(spec_.max_text_len, kPadToken);
  s.tokens = std::move(words);

  s.labels.resize(spec_.classes);
  for (std::size_t j = 0; j < spec_.classes; ++j) s.labels[j] = z[j] > 0.0 ? 1 : 0;
  s.primary = static_cast<int>(std::max_element(z.begin(), z.begin() + spec_.classes) - z.begin());
  s.latent = std::move(z);
  return s;
}

Dataset generate_corpus(const LatentSpec& spec, std::size_t n, std::uint64_t seed) {
  SyntheticGenerator gen(spec, Rng(seed).split("corpus"));
  Dataset d;
  d.spec = spec;
  d.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) d.samples.push_back(gen.gen_sample());
  return d;
}

TokenBatch class_prompts(const Codebook& codebook, std::size_t classes, std::size_t max_text_len) {
  if (classes == 0) throw Error(ErrorCode::EmptyPrompts, "no classes to prompt");
  TokenBatch prompts{classes, max_text_len, std::vector<std::int32_t>(classes * max_text_len, kPadToken)};
  for (std::size_t c = 0; c < classes; ++c) {
    prompts.ids[c * max_text_len] = codebook.token(c, true, codebook.buckets() - 1);
  }
  return prompts;
}

// ------------------------------------------------------------ batch stream

BatchStream::BatchStream(const Dataset& dataset, std::size_t batch_size, const AugmentConfig& aug,
                         const Rng& rng)
    : dataset_(&dataset),
      batch_size_(batch_size),
      batches_per_epoch_(batch_size ? dataset.size() / batch_size : 0),
      aug_(aug),
      shuffle_rng_(rng.split("shuffle")),
      augment_rng_(rng.split("augment")) {
  if (batch_size < 1 || dataset.size() < batch_size) {
    throw Error(ErrorCode::BatchTooSmall, "dataset of " + std::to_string(dataset.size()) +
                                              " cannot fill a batch of " + std::to_string(batch_size));
  }
  aug_.validate();
}

std::vector<std::size_t> BatchStream::epoch_order(std::uint64_t epoch) const {
  std::vector<std::size_t> order(dataset_->size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = shuffle_rng_.split(epoch);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

PairBatch BatchStream::batch_at(std::uint64_t step) const {
  const std::uint64_t epoch = step / batches_per_epoch_;
  const std::size_t slot = static_cast<std::size_t>(step % batches_per_epoch_);
  if (epoch != cached_epoch_) {
    cached_order_ = epoch_order(epoch);
    cached_epoch_ = epoch;
  }
  const auto& spec = dataset_->spec;
  const std::size_t side = spec.image_side, len = spec.max_text_len;
  const std::size_t pixels = 3 * side * side;
  const std::size_t vocab = dataset_->codebook().vocab_size();
  const std::size_t b = batch_size_;

  Buffer v1(b * pixels), v2(b * pixels);
  PairBatch out;
  out.tokens_v1 = {b, len, std::vector<std::int32_t>(b * len)};
  out.tokens_v2 = {b, len, std::vector<std::int32_t>(b * len)};
  const Rng epoch_rng = augment_rng_.split(epoch);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t idx = cached_order_[slot * b + i];
    const Sample& s = dataset_->samples[idx];
    const Rng rng = epoch_rng.split(idx);
    auto [a1, a2] = augment_image(s.image, side, aug_, rng.split("image"));
    auto [t1, t2] = augment_text(s.tokens, vocab, aug_, rng.split("text"));
    std::copy(a1.begin(), a1.end(), v1.begin() + static_cast<std::ptrdiff_t>(i * pixels));
    std::copy(a2.begin(), a2.end(), v2.begin() + static_cast<std::ptrdiff_t>(i * pixels));
    std::copy(t1.begin(), t1.end(), out.tokens_v1.ids.begin() + static_cast<std::ptrdiff_t>(i * len));
    std::copy(t2.begin(), t2.end(), out.tokens_v2.ids.begin() + static_cast<std::ptrdiff_t>(i * len));
    out.labels.push_back(s.labels);
    out.ids.push_back(s.id);
  }
  out.images_v1 = Tensor::from({b, 3, side, side}, std::move(v1));
  out.images_v2 = Tensor::from({b, 3, side, side}, std::move(v2));
  return out;
}

BatchStream make_batches(const Dataset& dataset, std::size_t batch_size, const AugmentConfig& aug,
                         const Rng& rng) {
  return BatchStream(dataset, batch_size, aug, rng);
}

Tensor stack_images(const Dataset& dataset, std::span<const std::size_t> indices) {
  const std::size_t side = dataset.spec.image_side;
  const std::size_t pixels = 3 * side * side;
  Buffer values(indices.size() * pixels);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& img = dataset.samples[indices[i]].image;
    std::copy(img.begin(), img.end(), values.begin() + static_cast<std::ptrdiff_t>(i * pixels));
  }
  return Tensor::from({indices.size(), 3, side, side}, std::move(values));
}

Tensor stack_images(const Dataset& dataset) {
  std::vector<std::size_t> all(dataset.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return stack_images(dataset, all);
}

TokenBatch stack_tokens(const Dataset& dataset) {
  const std::size_t len = dataset.spec.max_text_len;
  TokenBatch t{dataset.size(), len, {}};
  t.ids.reserve(dataset.size() * len);
  for (const auto& s : dataset.samples) t.ids.insert(t.ids.end(), s.tokens.begin(), s.tokens.end());
  return t;
}

// ------------------------------------------------------------------ disk IO

void write_ppm(const fs::path& path, std::span<const double> image, std::size_t side) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "P6\n" << side << ' ' << side << "\n255\n";
  const std::size_t plane = side * side;
  std::string bytes(plane * 3, '\0');
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(image[c * plane + i], 0.0, 1.0);
      bytes[i * 3 + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
    }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

namespace {

std::string read_ppm_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      tok.push_back(c);
      break;
    }
  }
  while (in.get(c) && !std::isspace(static_cast<unsigned char>(c))) tok.push_back(c);
  return tok;
}

}  // namespace

Image read_ppm(const fs::path& path, std::size_t side) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  if (read_ppm_token(in) != "P6") throw Error(ErrorCode::MalformedRecord, path.string() + " is not P6");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(read_ppm_token(in));
    h = std::stoul(read_ppm_token(in));
    maxval = std::stoul(read_ppm_token(in));
  } catch (const std::exception&) {
    throw Error(ErrorCode::MalformedRecord, path.string() + " has a bad PPM header");
  }
  if (w == 0 || h == 0 || maxval != 255) {
    throw Error(ErrorCode::MalformedRecord, path.string() + " must be 8-bit PPM");
  }
  std::string bytes(w * h * 3, '\0');
  if (!in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw Error(ErrorCode::MalformedRecord, path.string() + " is truncated");
  }
  // Center square crop, then nearest-neighbour resize.
  const std::size_t crop = std::min(w, h);
  const std::size_t x0 = (w - crop) / 2, y0 = (h - crop) / 2;
  Image out(3 * side * side);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const std::size_t sy = y0 + (y * crop) / side, sx = x0 + (x * crop) / side;
      for (std::size_t c = 0; c < 3; ++c) {
        const auto byte = static_cast<unsigned char>(bytes[(sy * w + sx) * 3 + c]);
        out[c * side * side + y * side + x] = byte / 255.0;
      }
    }
  return out;
}

Tokens tokenize(const std::string& caption, const Codebook& codebook, std::size_t max_len,
                std::size_t* unknown, bool* truncated) {
  std::istringstream words(caption);
  Tokens out;
  std::string w;
  bool cut = false;
  while (words >> w) {
    if (out.size() == max_len) {
      cut = true;
      break;
    }
    auto id = codebook.lookup(w);
    if (!id) {
      if (unknown) ++*unknown;
      id = kMaskToken;
    }
    out.push_back(*id);
  }
  if (truncated) *truncated = cut;
  out.resize(max_len, kPadToken);
  return out;
}

std::string caption_of(const Tokens& tokens, const Codebook& codebook) {
  std::string out;
  for (auto id : tokens) {
    if (id == kPadToken) continue;
    if (!out.empty()) out.push_back(' ');
    out += codebook.word(id);
  }
  return out;
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    const auto tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return fields;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace

Dataset load_pairs(const fs::path& pairs_file, const LatentSpec& geometry) {
  std::ifstream in(pairs_file);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + pairs_file.string());
  Dataset d;
  d.spec = geometry;
  const Codebook codebook = d.codebook();
  const fs::path base = pairs_file.parent_path();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    auto fields = split_tabs(line);
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty()) {
      throw Error(ErrorCode::MalformedRecord,
                  pairs_file.string() + ":" + std::to_string(line_no) + ": expected 3 tab-separated fields");
    }
    Sample s;
    s.id = fields[0];
    try {
      s.image = read_ppm(base / fields[1], geometry.image_side);
    } catch (const Error& e) {
      throw Error(ErrorCode::MalformedRecord,
                  pairs_file.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    bool cut = false;
    s.tokens = tokenize(fields[2], codebook, geometry.max_text_len, &d.unknown_tokens, &cut);
    if (cut) ++d.truncated;
    d.samples.push_back(std::move(s));
  }
  if (d.samples.empty()) throw Error(ErrorCode::EmptyDataset, pairs_file.string() + " has no records");

  const fs::path labels_file = base / "labels.tsv";
  if (fs::exists(labels_file)) {
    std::map<std::string, std::pair<std::vector<std::uint8_t>, int>> by_id;
    std::ifstream lin(labels_file);
    std::size_t lno = 0;
    while (std::getline(lin, line)) {
      ++lno;
      line = strip_cr(line);
      if (line.empty()) continue;
      auto f = split_tabs(line);
      if (f.size() < 2 || f.size() > 3 || f[1].size() != geometry.classes ||
          f[1].find_first_not_of("01") != std::string::npos) {
        throw Error(ErrorCode::MalformedRecord,
                    labels_file.string() + ":" + std::to_string(lno) + ": bad label record");
      }
      std::vector<std::uint8_t> bits;
      for (char c : f[1]) bits.push_back(c == '1');
      int primary = -1;
      if (f.size() == 3) primary = std::stoi(f[2]);
      by_id[f[0]] = {bits, primary};
    }
    for (auto& s : d.samples) {
      auto it = by_id.find(s.id);
      if (it == by_id.end()) continue;
      s.labels = it->second.first;
      s.primary = it->second.second;
      if (s.primary < 0) {
        auto pos = std::find(s.labels.begin(), s.labels.end(), 1);
        if (pos != s.labels.end()) s.primary = static_cast<int>(pos - s.labels.begin());
      }
    }
  }
  return d;
}

void write_corpus(const Dataset& dataset, const fs::path& dir, std::uint64_t seed) {
  fs::create_directories(dir / "images");
  const Codebook codebook = dataset.codebook();
  const auto& g = dataset.spec;
  {
    std::ofstream meta(dir / "corpus.txt");
    meta << "k = " << g.k << "\nbuckets = " << g.buckets << "\nclasses = " << g.classes
         << "\nimage_side = " << g.image_side << "\nmax_text_len = " << g.max_text_len
         << "\nnoise_sigma = " << g.noise_sigma << "\nredundancy_rate = " << g.redundancy_rate
         << "\nlooseness_rate = " << g.looseness_rate << "\nseed = " << seed
         << "\nsamples = " << dataset.size() << "\n";
  }
  std::ofstream pairs(dir / "pairs.tsv");
  std::ofstream labels(dir / "labels.tsv");
  if (!pairs || !labels) throw Error(ErrorCode::Io, "cannot write corpus into " + dir.string());
  for (const auto& s : dataset.samples) {
    const std::string rel = "images/" + s.id + ".ppm";
    write_ppm(dir / rel, s.image, g.image_side);
    pairs << s.id << '\t' << rel << '\t' << caption_of(s.tokens, codebook) << '\n';
    labels << s.id << '\t';
    for (auto b : s.labels) labels << (b ? '1' : '0');
    labels << '\t' << s.primary << '\n';
  }
}

Dataset load_corpus(const fs::path& dir) {
  LatentSpec g;
  std::ifstream meta(dir / "corpus.txt");
  if (meta) {
    std::string line;
    while (std::getline(meta, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      auto trim = [](std::string s) {
        s.erase(0, s.find_first_not_of(" \t"));
        s.erase(s.find_last_not_of(" \t\r") + 1);
        return s;
      };
      const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
      if (key == "k") g.k = std::stoul(value);
      else if (key == "buckets") g.buckets = std::stoul(value);
      else if (key == "classes") g.classes = std::stoul(value);
      else if (key == "image_side") g.image_side = std::stoul(value);
      else if (key == "max_text_len") g.max_text_len = std::stoul(value);
    }
  }
  return load_pairs(dir / "pairs.tsv", g);
}

}  // namespace clipin
