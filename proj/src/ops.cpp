#include "clipin/ops.hpp"

#include <algorithm>
#include <cmath>

#include "clipin/error.hpp"

namespace clipin::ops {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor, Eigen::AlignedMax>;
using MutMap = Eigen::Map<RowMajor, Eigen::AlignedMax>;

thread_local bool g_probe_active = false;
thread_local std::uint64_t g_probe_hash = 0;

constexpr std::uint64_t kProbeSeed = 0xcbf29ce484222325ULL;

void mix_probe(std::uint64_t bits) {
  g_probe_hash ^= bits + 0x9e3779b97f4a7c15ULL + (g_probe_hash << 6) + (g_probe_hash >> 2);
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw Error(ErrorCode::ShapeMismatch, std::string(op) + " expects rank " + std::to_string(rank) +
                                              ", got " + shape_string(x.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": " + shape_string(a.shape()) +
                                              " vs " + shape_string(b.shape()));
  }
}

// Rows/cols view for row-wise ops; 1-D tensors are a single row.
std::pair<std::size_t, std::size_t> as_rows(const Tensor& x, const char* op) {
  if (x.rank() == 1) return {1, x.dim(0)};
  if (x.rank() == 2) return {x.dim(0), x.dim(1)};
  throw Error(ErrorCode::ShapeMismatch,
              std::string(op) + " expects 1-D or 2-D, got " + shape_string(x.shape()));
}

detail::Node& parent(detail::Node& self, std::size_t i) { return *self.parents[i]; }

bool wants(detail::Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

ConstMap cmap(const Buffer& b, std::size_t r, std::size_t c) {
  return ConstMap(b.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

MutMap mmap(Buffer& b, std::size_t r, std::size_t c) {
  return MutMap(b.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

}  // namespace

KinkProbe::KinkProbe() : previous_active_(g_probe_active), previous_hash_(g_probe_hash) {
  g_probe_active = true;
  g_probe_hash = kProbeSeed;
}

KinkProbe::~KinkProbe() {
  g_probe_active = previous_active_;
  g_probe_hash = previous_hash_;
}

std::uint64_t KinkProbe::signature() const { return g_probe_hash; }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw Error(ErrorCode::ShapeMismatch,
                "matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Buffer out(n * m);
  mmap(out, n, m).noalias() = cmap(a.node()->value, n, k) * cmap(b.node()->value, k, m);
  return Tensor::from_op({n, m}, std::move(out), {a, b}, [n, k, m](detail::Node& self) {
    auto g = cmap(self.grad, n, m);
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    if (pa.requires_grad) {
      mmap(pa.grad_buffer(), n, k).noalias() += g * cmap(pb.value, k, m).transpose();
    }
    if (pb.requires_grad) {
      mmap(pb.grad_buffer(), k, m).noalias() += cmap(pa.value, n, k).transpose() * g;
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t n = x.rows(), m = x.cols();
  Buffer out(n * m);
  const auto& v = x.node()->value;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = v[i * m + j];
  return Tensor::from_op({m, n}, std::move(out), {x}, [n, m](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad[j * n + i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw Error(ErrorCode::ShapeMismatch,
                "reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  return Tensor::from_op(std::move(shape), x.node()->value, {x}, [](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  Buffer out(a.size());
  const auto &av = a.node()->value, &bv = b.node()->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants(self, p)) continue;
      auto& g = parent(self, p).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  Buffer out(a.size());
  const auto &av = a.node()->value, &bv = b.node()->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (wants(self, 0)) {
      auto& g = parent(self, 0).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = parent(self, 1).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  Buffer out(a.size());
  const auto &av = a.node()->value, &bv = b.node()->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  require_rank(bias, 1, "add_row_bias");
  const std::size_t n = x.rows(), d = x.cols();
  if (bias.dim(0) != d) {
    throw Error(ErrorCode::ShapeMismatch,
                "bias " + shape_string(bias.shape()) + " for " + shape_string(x.shape()));
  }
  Buffer out(x.node()->value);
  const auto& bv = bias.node()->value;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += bv[j];
  return Tensor::from_op(x.shape(), std::move(out), {x, bias}, [n, d](detail::Node& self) {
    if (wants(self, 0)) {
      auto& g = parent(self, 0).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = parent(self, 1).grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[i * d + j];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  Buffer out(x.node()->value);
  for (auto& v : out) v *= factor;
  return Tensor::from_op(x.shape(), std::move(out), {x}, [factor](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Tensor scale_by(const Tensor& x, const Tensor& factor) {
  if (factor.size() != 1) {
    throw Error(ErrorCode::ShapeMismatch, "scale_by factor must be scalar, got " +
                                              shape_string(factor.shape()));
  }
  const double f = factor.item();
  Buffer out(x.node()->value);
  for (auto& v : out) v *= f;
  return Tensor::from_op(x.shape(), std::move(out), {x, factor}, [](detail::Node& self) {
    auto& px = parent(self, 0);
    auto& pf = parent(self, 1);
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += pf.value[0] * self.grad[i];
    }
    if (pf.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * px.value[i];
      pf.grad_buffer()[0] += acc;
    }
  });
}

Tensor add_scalar(const Tensor& x, double offset) {
  Buffer out(x.node()->value);
  for (auto& v : out) v += offset;
  return Tensor::from_op(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor exp(const Tensor& x) {
  Buffer out(x.node()->value);
  for (auto& v : out) v = std::exp(v);
  return Tensor::from_op(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

Tensor relu(const Tensor& x) {
  Buffer out(x.node()->value);
  std::uint64_t word = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool on = out[i] > 0.0;
    if (!on) out[i] = 0.0;
    if (g_probe_active) {
      word = (word << 1) | static_cast<std::uint64_t>(on);
      if ((i & 63) == 63) {
        mix_probe(word);
        word = 0;
      }
    }
  }
  if (g_probe_active) mix_probe(word ^ out.size());
  return Tensor::from_op(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& px = parent(self, 0);
    auto& g = px.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (px.value[i] > 0.0) g[i] += self.grad[i];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const auto [n, d] = as_rows(x, "layer_norm");
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw Error(ErrorCode::ShapeMismatch, "layer_norm params " + shape_string(gain.shape()) +
                                              " for " + shape_string(x.shape()));
  }
  const auto& xv = x.node()->value;
  const auto& gv = gain.node()->value;
  const auto& bv = bias.node()->value;
  Buffer normed(n * d);
  std::vector<double> inv_std(n);
  Buffer out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = xv.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      normed[i * d + j] = (row[j] - mu) * inv_std[i];
      out[i * d + j] = gv[j] * normed[i * d + j] + bv[j];
    }
  }
  return Tensor::from_op(
      x.shape(), std::move(out), {x, gain, bias},
      [n = n, d = d, normed = std::move(normed), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& px = parent(self, 0);
        auto& pg = parent(self, 1);
        auto& pb = parent(self, 2);
        const auto& gy = self.grad;
        if (pg.requires_grad) {
          auto& g = pg.grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) g[j] += gy[i * d + j] * normed[i * d + j];
        }
        if (pb.requires_grad) {
          auto& g = pb.grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) g[j] += gy[i * d + j];
        }
        if (px.requires_grad) {
          auto& g = px.grad_buffer();
          const auto& gain_v = pg.value;
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t i = 0; i < n; ++i) {
            double mean_dn = 0.0, mean_dn_n = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dn = gy[i * d + j] * gain_v[j];
              mean_dn += dn;
              mean_dn_n += dn * normed[i * d + j];
            }
            mean_dn *= inv_d;
            mean_dn_n *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double dn = gy[i * d + j] * gain_v[j];
              g[i * d + j] += inv_std[i] * (dn - mean_dn - normed[i * d + j] * mean_dn_n);
            }
          }
        }
      });
}

Tensor softmax_rows(const Tensor& x) {
  const auto [n, d] = as_rows(x, "softmax_rows");
  Buffer out(x.node()->value);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * d;
    const double mx = *std::max_element(row, row + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < d; ++j) row[j] /= z;
  }
  return Tensor::from_op(x.shape(), std::move(out), {x}, [n = n, d = d](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += self.grad[i * d + j] * self.value[i * d + j];
      for (std::size_t j = 0; j < d; ++j)
        g[i * d + j] += self.value[i * d + j] * (self.grad[i * d + j] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& x) {
  const auto [n, d] = as_rows(x, "log_softmax_rows");
  Buffer out(x.node()->value);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * d;
    const double mx = *std::max_element(row, row + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < d; ++j) row[j] -= lse;
  }
  return Tensor::from_op(x.shape(), std::move(out), {x}, [n = n, d = d](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < d; ++j) total += self.grad[i * d + j];
      for (std::size_t j = 0; j < d; ++j)
        g[i * d + j] += self.grad[i * d + j] - std::exp(self.value[i * d + j]) * total;
    }
  });
}

Tensor l2_normalize(const Tensor& x) {
  const auto [n, d] = as_rows(x, "l2_normalize");
  Buffer out(x.node()->value);
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * d;
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += row[j] * row[j];
    const double norm = std::sqrt(sq);
    if (!(norm > kNormEps)) {
      throw Error(ErrorCode::ZeroNormRow, "row " + std::to_string(i) + " has norm " +
                                              std::to_string(norm));
    }
    norms[i] = norm;
    for (std::size_t j = 0; j < d; ++j) row[j] /= norm;
  }
  return Tensor::from_op(x.shape(), std::move(out), {x},
                         [n = n, d = d, norms = std::move(norms)](detail::Node& self) {
                           auto& g = parent(self, 0).grad_buffer();
                           for (std::size_t i = 0; i < n; ++i) {
                             const double* y = self.value.data() + i * d;
                             const double* gy = self.grad.data() + i * d;
                             double dot = 0.0;
                             for (std::size_t j = 0; j < d; ++j) dot += gy[j] * y[j];
                             for (std::size_t j = 0; j < d; ++j)
                               g[i * d + j] += (gy[j] - y[j] * dot) / norms[i];
                           }
                         });
}

Tensor row_dot(const Tensor& a, const Tensor& b) {
  require_same(a, b, "row_dot");
  const auto [n, d] = as_rows(a, "row_dot");
  Buffer out(n, 0.0);
  const auto &av = a.node()->value, &bv = b.node()->value;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i] += av[i * d + j] * bv[i * d + j];
  return Tensor::from_op({n}, std::move(out), {a, b}, [n = n, d = d](detail::Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[i] * pb.value[i * d + j];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[i] * pa.value[i * d + j];
    }
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return Tensor::from_op({}, Buffer{acc}, {x}, [](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (auto& gi : g) gi += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const double count = static_cast<double>(x.size());
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return Tensor::from_op({}, Buffer{acc / count}, {x}, [count](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (auto& gi : g) gi += self.grad[0] / count;
  });
}

Tensor diag(const Tensor& x) {
  require_rank(x, 2, "diag");
  const std::size_t n = x.rows();
  if (x.cols() != n) throw Error(ErrorCode::ShapeMismatch, "diag of " + shape_string(x.shape()));
  Buffer out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x.node()->value[i * n + i];
  return Tensor::from_op({n}, std::move(out), {x}, [n](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < n; ++i) g[i * n + i] += self.grad[i];
  });
}

Tensor embedding_mean(const Tensor& table, const TokenBatch& tokens) {
  require_rank(table, 2, "embedding_mean");
  const std::size_t vocab = table.rows(), d = table.cols();
  if (tokens.ids.size() != tokens.batch * tokens.length) {
    throw Error(ErrorCode::ShapeMismatch, "token batch holds " + std::to_string(tokens.ids.size()) +
                                              " ids for [" + std::to_string(tokens.batch) + ", " +
                                              std::to_string(tokens.length) + "]");
  }
  std::vector<double> inv_count(tokens.batch);
  Buffer out(tokens.batch * d, 0.0);
  const auto& tv = table.node()->value;
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    std::size_t count = 0;
    for (std::int32_t id : tokens.row(b)) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
        throw Error(ErrorCode::TokenOutOfRange,
                    "token " + std::to_string(id) + " not in vocab of " + std::to_string(vocab));
      }
      if (id == kPadToken) continue;
      ++count;
      for (std::size_t j = 0; j < d; ++j) out[b * d + j] += tv[static_cast<std::size_t>(id) * d + j];
    }
    if (count == 0) {
      throw Error(ErrorCode::PadOnlySequence, "sequence " + std::to_string(b) + " is all padding");
    }
    inv_count[b] = 1.0 / static_cast<double>(count);
    for (std::size_t j = 0; j < d; ++j) out[b * d + j] *= inv_count[b];
  }
  return Tensor::from_op({tokens.batch, d}, std::move(out), {table},
                         [tokens, d, inv_count = std::move(inv_count)](detail::Node& self) {
                           auto& g = parent(self, 0).grad_buffer();
                           for (std::size_t b = 0; b < tokens.batch; ++b) {
                             for (std::int32_t id : tokens.row(b)) {
                               if (id == kPadToken) continue;
                               const std::size_t base = static_cast<std::size_t>(id) * d;
                               for (std::size_t j = 0; j < d; ++j)
                                 g[base + j] += self.grad[b * d + j] * inv_count[b];
                             }
                           }
                         });
}

Tensor stop_grad(const Tensor& x) { return Tensor::from(x.shape(), x.node()->value, false); }

}  // namespace clipin::ops
