#include "clipin/model.hpp"

#include <cmath>

#include "clipin/error.hpp"
#include "clipin/ops.hpp"

namespace clipin {

DimsConfig DimsConfig::preset(const std::string& name) {
  DimsConfig d;
  if (name == "desk") return d;
  if (name == "paper-ratio") {
    d.image_hidden = 1024;
    d.d_enc = 768;
    d.d_pre = 1024;
    d.d_cl = 512;
    d.d_ncl = 8192;
    d.predictor_bottleneck = 2048;
    return d;
  }
  if (name == "tiny") {
    d.image_side = 2;
    d.vocab_size = 10;
    d.max_text_len = 4;
    d.image_hidden = 6;
    d.d_enc = 5;
    d.d_pre = 6;
    d.d_cl = 4;
    d.d_ncl = 8;
    d.predictor_bottleneck = 5;
    return d;
  }
  throw Error(ErrorCode::InvalidConfig, "unknown dims preset '" + name + "'");
}

void DimsConfig::validate() const {
  const std::size_t all[] = {image_side, channels,     vocab_size, max_text_len,
                             image_hidden, d_enc, d_pre, d_cl, d_ncl, predictor_bottleneck};
  for (auto v : all) {
    if (v < 1) throw Error(ErrorCode::InvalidConfig, "every dimension must be >= 1");
  }
  if (vocab_size < 3) {
    throw Error(ErrorCode::InvalidConfig, "vocab_size must cover pad, mask and one word");
  }
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = ops::matmul(x, weight);
  return bias.defined() ? ops::add_row_bias(y, bias) : y;
}

Tensor LayerNormParams::forward(const Tensor& x) const { return ops::layer_norm(x, gain, bias); }

Tensor ImageEncoder::forward(const Tensor& images) const {
  const std::size_t batch = images.dim(0);
  Tensor flat = ops::reshape(images, {batch, images.size() / batch});
  return fc2.forward(ops::relu(norm.forward(fc1.forward(flat))));
}

Tensor TextEncoder::forward(const TokenBatch& tokens) const {
  return proj.forward(ops::embedding_mean(embedding, tokens));
}

Tensor PreProjector::forward(const Tensor& x) const {
  return ops::relu(norm.forward(fc.forward(x)));
}

Tensor BottleneckMlp::forward(const Tensor& x) const {
  return fc2.forward(ops::relu(norm.forward(fc1.forward(x))));
}

namespace {

Tensor uniform_weight(Rng rng, std::size_t fan_in, std::size_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Buffer values(fan_in * fan_out);
  for (auto& v : values) v = rng.uniform(-limit, limit);
  return Tensor::from({fan_in, fan_out}, std::move(values), true);
}

Linear make_linear(const Rng& rng, const std::string& name, std::size_t in, std::size_t out,
                   bool with_bias = true) {
  Linear l;
  l.weight = uniform_weight(rng.split(name + ".weight"), in, out);
  if (with_bias) l.bias = Tensor::zeros({out}, true);
  return l;
}

LayerNormParams make_norm(std::size_t d) {
  return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
}

PreProjector make_pre(const Rng& rng, const std::string& name, const DimsConfig& d) {
  return {make_linear(rng, name + ".fc", d.d_enc, d.d_pre), make_norm(d.d_pre)};
}

BottleneckMlp make_mlp(const Rng& rng, const std::string& name, std::size_t in,
                       std::size_t hidden, std::size_t out) {
  return {make_linear(rng, name + ".fc1", in, hidden), make_norm(hidden),
          make_linear(rng, name + ".fc2", hidden, out)};
}

Linear clone(const Linear& l) {
  return {l.weight.clone(), l.bias.defined() ? l.bias.clone() : Tensor{}};
}
LayerNormParams clone(const LayerNormParams& n) { return {n.gain.clone(), n.bias.clone()}; }
ImageEncoder clone(const ImageEncoder& e) { return {clone(e.fc1), clone(e.norm), clone(e.fc2)}; }
TextEncoder clone(const TextEncoder& e) { return {e.embedding.clone(), clone(e.proj)}; }
PreProjector clone(const PreProjector& p) { return {clone(p.fc), clone(p.norm)}; }
BottleneckMlp clone(const BottleneckMlp& m) { return {clone(m.fc1), clone(m.norm), clone(m.fc2)}; }

// Visitors shared by online and target enumeration so names stay in sync.
using Sink = std::vector<NamedTensor>;

void add(Sink& out, const std::string& name, const Linear& l) {
  out.push_back({name + ".weight", l.weight, true});
  if (l.bias.defined()) out.push_back({name + ".bias", l.bias, false});
}
void add(Sink& out, const std::string& name, const LayerNormParams& n) {
  out.push_back({name + ".gain", n.gain, false});
  out.push_back({name + ".bias", n.bias, false});
}
void add(Sink& out, const std::string& name, const ImageEncoder& e) {
  add(out, name + ".fc1", e.fc1);
  add(out, name + ".norm", e.norm);
  add(out, name + ".fc2", e.fc2);
}
void add(Sink& out, const std::string& name, const TextEncoder& e) {
  out.push_back({name + ".embedding", e.embedding, true});
  add(out, name + ".proj", e.proj);
}
void add(Sink& out, const std::string& name, const PreProjector& p) {
  add(out, name + ".fc", p.fc);
  add(out, name + ".norm", p.norm);
}
void add(Sink& out, const std::string& name, const BottleneckMlp& m) {
  add(out, name + ".fc1", m.fc1);
  add(out, name + ".norm", m.norm);
  add(out, name + ".fc2", m.fc2);
}

// The online subset mirrored by the target branch, with target-side names.
template <typename Branch>
void add_mirrored(Sink& out, const std::string& prefix, const Branch& b) {
  add(out, prefix + ".image_encoder", b.image_encoder);
  add(out, prefix + ".text_encoder", b.text_encoder);
  add(out, prefix + ".pre_image", b.pre_image);
  add(out, prefix + ".pre_text", b.pre_text);
  add(out, prefix + ".ncl_image", b.ncl_image);
  add(out, prefix + ".ncl_text", b.ncl_text);
}

}  // namespace

void check_images(const DimsConfig& dims, const Tensor& images) {
  const Shape expected{images.rank() == 4 ? images.dim(0) : 0, dims.channels, dims.image_side,
                       dims.image_side};
  if (images.rank() != 4 || images.shape() != expected) {
    throw Error(ErrorCode::ShapeMismatch, "images " + shape_string(images.shape()) +
                                              " do not match [B, " + std::to_string(dims.channels) +
                                              ", " + std::to_string(dims.image_side) + ", " +
                                              std::to_string(dims.image_side) + "]");
  }
}

void check_tokens(const DimsConfig& dims, const TokenBatch& tokens) {
  if (tokens.length != dims.max_text_len || tokens.ids.size() != tokens.batch * tokens.length) {
    throw Error(ErrorCode::ShapeMismatch, "token batch length " + std::to_string(tokens.length) +
                                              " does not match max_text_len " +
                                              std::to_string(dims.max_text_len));
  }
  for (auto id : tokens.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= dims.vocab_size) {
      throw Error(ErrorCode::TokenOutOfRange, "token " + std::to_string(id) +
                                                  " outside vocab of " +
                                                  std::to_string(dims.vocab_size));
    }
  }
}

ModelState init_model(const DimsConfig& dims, Rng& rng, const ModelOptions& options) {
  dims.validate();
  const Rng init = rng.split("init");
  ModelState s;
  s.dims = dims;
  s.shared_pre = options.share_pre_projectors;
  auto& o = s.online;
  o.image_encoder = {make_linear(init, "image_encoder.fc1", dims.pixels(), dims.image_hidden),
                     make_norm(dims.image_hidden),
                     make_linear(init, "image_encoder.fc2", dims.image_hidden, dims.d_enc)};
  o.text_encoder.embedding =
      uniform_weight(init.split("text_encoder.embedding"), dims.vocab_size, dims.d_enc);
  o.text_encoder.proj = make_linear(init, "text_encoder.proj", dims.d_enc, dims.d_enc);
  o.pre_image = make_pre(init, "pre_image", dims);
  o.pre_text = make_pre(init, "pre_text", dims);
  if (!s.shared_pre) {
    o.pre_cl_image = make_pre(init, "pre_cl_image", dims);
    o.pre_cl_text = make_pre(init, "pre_cl_text", dims);
  }
  o.ncl_image = make_mlp(init, "ncl_image", dims.d_pre, dims.d_ncl, dims.d_ncl);
  o.ncl_text = make_mlp(init, "ncl_text", dims.d_pre, dims.d_ncl, dims.d_ncl);
  o.cl_image = make_linear(init, "cl_image", dims.d_pre, dims.d_cl, false);
  o.cl_text = make_linear(init, "cl_text", dims.d_pre, dims.d_cl, false);
  const auto hb = dims.predictor_bottleneck;
  o.inter_image = make_mlp(init, "inter_image", dims.d_ncl, hb, dims.d_ncl);
  o.inter_text = make_mlp(init, "inter_text", dims.d_ncl, hb, dims.d_ncl);
  o.intra_image = make_mlp(init, "intra_image", dims.d_ncl, hb, dims.d_ncl);
  o.intra_text = make_mlp(init, "intra_text", dims.d_ncl, hb, dims.d_ncl);
  o.log_tau = Tensor::scalar(std::log(options.initial_tau), true);
  o.s_inter = Tensor::scalar(0.0, true);
  o.s_intra = Tensor::scalar(0.0, true);

  auto& t = s.target;
  t.image_encoder = clone(o.image_encoder);
  t.text_encoder = clone(o.text_encoder);
  t.pre_image = clone(o.pre_image);
  t.pre_text = clone(o.pre_text);
  t.ncl_image = clone(o.ncl_image);
  t.ncl_text = clone(o.ncl_text);
  return s;
}

OnlineFeatures encode_image_online(const ModelState& state, const Tensor& images, bool with_ncl) {
  check_images(state.dims, images);
  OnlineFeatures f;
  f.encoded = state.online.image_encoder.forward(images);
  f.pre = state.online.pre_image.forward(f.encoded);
  if (with_ncl) f.ncl = state.online.ncl_image.forward(f.pre);
  return f;
}

OnlineFeatures encode_text_online(const ModelState& state, const TokenBatch& tokens,
                                  bool with_ncl) {
  check_tokens(state.dims, tokens);
  OnlineFeatures f;
  f.encoded = state.online.text_encoder.forward(tokens);
  f.pre = state.online.pre_text.forward(f.encoded);
  if (with_ncl) f.ncl = state.online.ncl_text.forward(f.pre);
  return f;
}

Tensor encode_image_target(const ModelState& state, const Tensor& images) {
  check_images(state.dims, images);
  const auto& t = state.target;
  return ops::stop_grad(t.ncl_image.forward(t.pre_image.forward(t.image_encoder.forward(images))));
}

Tensor encode_text_target(const ModelState& state, const TokenBatch& tokens) {
  check_tokens(state.dims, tokens);
  const auto& t = state.target;
  return ops::stop_grad(t.ncl_text.forward(t.pre_text.forward(t.text_encoder.forward(tokens))));
}

namespace {

void check_feature(const ModelState& state, const Tensor& feat, const char* what) {
  if (feat.rank() != 2 || feat.cols() != state.dims.d_ncl) {
    throw Error(ErrorCode::ShapeMismatch, std::string(what) + " input " +
                                              shape_string(feat.shape()) + ", expected [B, " +
                                              std::to_string(state.dims.d_ncl) + "]");
  }
}

}  // namespace

Tensor predict_inter(const ModelState& state, const Tensor& online_feat, Modality modality) {
  check_feature(state, online_feat, "predict_inter");
  const auto& p = modality == Modality::Image ? state.online.inter_image : state.online.inter_text;
  return p.forward(online_feat);
}

Tensor predict_intra(const ModelState& state, const Tensor& online_feat, Modality modality) {
  check_feature(state, online_feat, "predict_intra");
  const auto& p = modality == Modality::Image ? state.online.intra_image : state.online.intra_text;
  return p.forward(online_feat);
}

Tensor contrastive_input(const ModelState& state, const OnlineFeatures& feats, Modality modality) {
  if (state.shared_pre) return feats.pre;
  const auto& pre = modality == Modality::Image ? state.online.pre_cl_image : state.online.pre_cl_text;
  return pre->forward(feats.encoded);
}

std::pair<Tensor, Tensor> project_contrastive(const ModelState& state, const Tensor& pre_image,
                                              const Tensor& pre_text) {
  for (const Tensor* t : {&pre_image, &pre_text}) {
    if (t->rank() != 2 || t->cols() != state.dims.d_pre) {
      throw Error(ErrorCode::ShapeMismatch, "contrastive projector input " +
                                                shape_string(t->shape()) + ", expected [B, " +
                                                std::to_string(state.dims.d_pre) + "]");
    }
  }
  return {state.online.cl_image.forward(pre_image), state.online.cl_text.forward(pre_text)};
}

void ema_update(ModelState& state, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) {
    throw Error(ErrorCode::InvalidConfig, "EMA beta must lie in [0, 1)");
  }
  for (auto& [target, online] : ema_pairs(state)) {
    auto tv = target.mutable_values();
    auto ov = online.values();
    for (std::size_t i = 0; i < tv.size(); ++i) tv[i] = beta * tv[i] + (1.0 - beta) * ov[i];
  }
}

std::vector<NamedTensor> online_parameters(const ModelState& state) {
  const auto& o = state.online;
  Sink out;
  add_mirrored(out, "online", o);
  if (o.pre_cl_image) add(out, "online.pre_cl_image", *o.pre_cl_image);
  if (o.pre_cl_text) add(out, "online.pre_cl_text", *o.pre_cl_text);
  add(out, "online.cl_image", o.cl_image);
  add(out, "online.cl_text", o.cl_text);
  add(out, "online.inter_image", o.inter_image);
  add(out, "online.inter_text", o.inter_text);
  add(out, "online.intra_image", o.intra_image);
  add(out, "online.intra_text", o.intra_text);
  out.push_back({"online.log_tau", o.log_tau, false});
  out.push_back({"online.s_inter", o.s_inter, false});
  out.push_back({"online.s_intra", o.s_intra, false});
  return out;
}

std::vector<NamedTensor> target_parameters(const ModelState& state) {
  Sink out;
  add_mirrored(out, "target", state.target);
  return out;
}

std::vector<std::pair<Tensor, Tensor>> ema_pairs(const ModelState& state) {
  Sink online;
  add_mirrored(online, "online", state.online);
  Sink target;
  add_mirrored(target, "target", state.target);
  std::vector<std::pair<Tensor, Tensor>> pairs;
  pairs.reserve(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) pairs.emplace_back(target[i].tensor, online[i].tensor);
  return pairs;
}

void zero_grads(const ModelState& state) {
  for (auto& p : online_parameters(state)) p.tensor.zero_grad();
}

}  // namespace clipin
