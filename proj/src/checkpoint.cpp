#include "clipin/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "clipin/error.hpp"

namespace clipin {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'C', 'L', 'P', 'N'};

class Writer {
 public:
  explicit Writer(const fs::path& path) : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
    if (!out_) throw Error(ErrorCode::Io, "cannot write " + path.string());
  }
  template <typename T>
  void pod(T x) {
    out_.write(reinterpret_cast<const char*>(&x), sizeof x);
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void finish() {
    out_.flush();
    if (!out_) throw Error(ErrorCode::Io, "write failed for " + path_.string());
  }

 private:
  std::ofstream out_;
  fs::path path_;
};

class Reader {
 public:
  explicit Reader(const fs::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw Error(ErrorCode::Io, "cannot open " + path.string());
  }
  template <typename T>
  T pod() {
    T x{};
    bytes(&x, sizeof x);
    return x;
  }
  void bytes(void* p, std::size_t n) {
    if (!in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n))) {
      throw Error(ErrorCode::MalformedRecord, path_.string() + ": truncated checkpoint");
    }
  }
  void skip(std::size_t n) {
    in_.seekg(static_cast<std::streamoff>(n), std::ios::cur);
    if (!in_) throw Error(ErrorCode::MalformedRecord, path_.string() + ": truncated checkpoint");
  }
  std::string string(std::size_t n) {
    if (n > (1u << 26)) throw Error(ErrorCode::MalformedRecord, path_.string() + ": implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  const fs::path& path() const { return path_; }

 private:
  std::ifstream in_;
  fs::path path_;
};

void write_dims(Writer& w, const DimsConfig& d) {
  for (std::size_t x : {d.image_side, d.channels, d.vocab_size, d.max_text_len, d.image_hidden, d.d_enc,
                        d.d_pre, d.d_cl, d.d_ncl, d.predictor_bottleneck}) {
    w.pod<std::uint64_t>(x);
  }
}

DimsConfig read_dims(Reader& r) {
  DimsConfig d;
  for (std::size_t* x : {&d.image_side, &d.channels, &d.vocab_size, &d.max_text_len, &d.image_hidden, &d.d_enc,
                         &d.d_pre, &d.d_cl, &d.d_ncl, &d.predictor_bottleneck}) {
    *x = static_cast<std::size_t>(r.pod<std::uint64_t>());
  }
  return d;
}

void write_tensor(Writer& w, const std::string& name, const Shape& shape, const double* data, std::size_t n) {
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
  for (std::size_t s : shape) w.pod<std::uint64_t>(s);
  w.bytes(data, n * sizeof(double));
}

CheckpointInfo read_header(Reader& r) {
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw Error(ErrorCode::MalformedRecord, r.path().string() + " is not a checkpoint (bad magic)");
  }
  CheckpointInfo info;
  info.version = r.pod<std::uint32_t>();
  if (info.version != kCheckpointVersion) {
    throw Error(ErrorCode::MalformedRecord, r.path().string() + ": unsupported version " + std::to_string(info.version));
  }
  info.dims = read_dims(r);
  info.shared_pre = r.pod<std::uint8_t>() != 0;
  info.step = r.pod<std::uint64_t>();
  info.corpus_seed = r.pod<std::uint64_t>();
  info.adam_t = r.pod<std::uint64_t>();
  info.config_echo = r.string(r.pod<std::uint64_t>());
  return info;
}

TensorEntry read_entry(Reader& r) {
  TensorEntry e;
  e.name = r.string(r.pod<std::uint32_t>());
  const auto rank = r.pod<std::uint32_t>();
  if (rank > 8) throw Error(ErrorCode::MalformedRecord, r.path().string() + ": implausible rank for " + e.name);
  for (std::uint32_t i = 0; i < rank; ++i) e.shape.push_back(static_cast<std::size_t>(r.pod<std::uint64_t>()));
  return e;
}

}  // namespace

void save_checkpoint(const fs::path& path, const ModelState& state, const OptimizerState& opt,
                     const std::string& config_echo, std::uint64_t corpus_seed) {
  const auto online = online_parameters(state);
  const auto target = target_parameters(state);
  if (opt.m.size() != online.size()) {
    throw Error(ErrorCode::ShapeMismatch, "optimizer state does not match the model");
  }
  Writer w(path);
  w.bytes(kMagic, 4);
  w.pod<std::uint32_t>(kCheckpointVersion);
  write_dims(w, state.dims);
  w.pod<std::uint8_t>(state.shared_pre ? 1 : 0);
  w.pod<std::uint64_t>(state.step);
  w.pod<std::uint64_t>(corpus_seed);
  w.pod<std::uint64_t>(opt.t);
  w.pod<std::uint64_t>(config_echo.size());
  w.bytes(config_echo.data(), config_echo.size());
  w.pod<std::uint64_t>(online.size() * 3 + target.size());
  for (const auto& p : online) write_tensor(w, p.name, p.tensor.shape(), p.tensor.values().data(), p.tensor.size());
  for (const auto& p : target) write_tensor(w, p.name, p.tensor.shape(), p.tensor.values().data(), p.tensor.size());
  for (std::size_t k = 0; k < online.size(); ++k) {
    write_tensor(w, "adam.m/" + online[k].name, online[k].tensor.shape(), opt.m[k].data(), opt.m[k].size());
  }
  for (std::size_t k = 0; k < online.size(); ++k) {
    write_tensor(w, "adam.v/" + online[k].name, online[k].tensor.shape(), opt.v[k].data(), opt.v[k].size());
  }
  w.finish();
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  Reader r(path);
  LoadedCheckpoint out;
  out.info = read_header(r);
  out.info.dims.validate();

  // Build a skeleton with the right tensor shapes, then overwrite every value.
  Rng rng(0);
  ModelOptions options;
  options.share_pre_projectors = out.info.shared_pre;
  out.state = init_model(out.info.dims, rng, options);
  out.state.step = out.info.step;
  out.optimizer = init_optimizer(out.state);
  out.optimizer.t = out.info.adam_t;

  std::map<std::string, std::pair<Shape, double*>> slots;
  const auto online = online_parameters(out.state);
  for (const auto& p : online) {
    Tensor t = p.tensor;
    slots[p.name] = {t.shape(), t.mutable_values().data()};
  }
  for (const auto& p : target_parameters(out.state)) {
    Tensor t = p.tensor;
    slots[p.name] = {t.shape(), t.mutable_values().data()};
  }
  for (std::size_t k = 0; k < online.size(); ++k) {
    slots["adam.m/" + online[k].name] = {online[k].tensor.shape(), out.optimizer.m[k].data()};
    slots["adam.v/" + online[k].name] = {online[k].tensor.shape(), out.optimizer.v[k].data()};
  }

  const auto count = r.pod<std::uint64_t>();
  if (count != slots.size()) {
    throw Error(ErrorCode::MalformedRecord, path.string() + ": expected " + std::to_string(slots.size()) +
                                                " tensors, found " + std::to_string(count));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorEntry e = read_entry(r);
    auto it = slots.find(e.name);
    if (it == slots.end()) throw Error(ErrorCode::MalformedRecord, path.string() + ": unexpected tensor " + e.name);
    if (it->second.first != e.shape) {
      throw Error(ErrorCode::ShapeMismatch, path.string() + ": " + e.name + " has shape " + shape_string(e.shape) +
                                                ", expected " + shape_string(it->second.first));
    }
    r.bytes(it->second.second, shape_size(e.shape) * sizeof(double));
    out.info.tensors.push_back(std::move(e));
    slots.erase(it);
  }
  return out;
}

CheckpointInfo read_checkpoint_info(const fs::path& path) {
  Reader r(path);
  CheckpointInfo info = read_header(r);
  const auto count = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorEntry e = read_entry(r);
    r.skip(shape_size(e.shape) * sizeof(double));
    info.tensors.push_back(std::move(e));
  }
  return info;
}

}  // namespace clipin
