#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "sharelora/errors.hpp"
#include "sharelora/tensor.hpp"

namespace sharelora {

namespace {

using detail::Node;

bool records(std::initializer_list<const Tensor*> inputs) {
  if (!grad_mode_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

// Result node; the backward closure is attached only when some input needs grad.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (records(inputs)) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) {
      if (t->defined()) node->inputs.push_back(t->node());
    }
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Gradient buffer of an input, or nullptr if it does not take gradients.
double* grad_of(const std::shared_ptr<Node>& n) {
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Length of the trailing block that b repeats over a.
std::size_t broadcast_inner(const Tensor& a, const Tensor& b, const char* op) {
  if (b.numel() == 1 && b.ndim() <= 1) return 1;
  if (is_suffix(a.shape(), b.shape())) return b.numel();
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                       shape_str(a.shape()));
}

enum class Binary { kAdd, kSub, kMul };

Tensor binary(const Tensor& a_in, const Tensor& b_in, Binary kind, const char* name) {
  const Tensor* a = &a_in;
  const Tensor* b = &b_in;
  // add/mul commute, so the smaller operand may come first.
  if (kind != Binary::kSub && a->numel() < b->numel()) std::swap(a, b);
  const std::size_t inner = broadcast_inner(*a, *b, name);
  const auto ad = a->data();
  const auto bd = b->data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const double y = bd[i % inner];
    switch (kind) {
      case Binary::kAdd: out[i] = ad[i] + y; break;
      case Binary::kSub: out[i] = ad[i] - y; break;
      case Binary::kMul: out[i] = ad[i] * y; break;
    }
  }
  return make_result(a->shape(), std::move(out), {a, b}, [kind, inner](Node& self) {
    const auto& an = self.inputs[0];
    const auto& bn = self.inputs.size() > 1 ? self.inputs[1] : self.inputs[0];
    const std::size_t n = self.grad.size();
    if (double* ga = grad_of(an)) {
      for (std::size_t i = 0; i < n; ++i) {
        ga[i] += kind == Binary::kMul ? self.grad[i] * bn->data[i % inner] : self.grad[i];
      }
    }
    if (self.inputs.size() < 2) return;
    if (double* gb = grad_of(bn)) {
      for (std::size_t i = 0; i < n; ++i) {
        const double g = self.grad[i];
        switch (kind) {
          case Binary::kAdd: gb[i % inner] += g; break;
          case Binary::kSub: gb[i % inner] -= g; break;
          case Binary::kMul: gb[i % inner] += g * an->data[i]; break;
        }
      }
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kMul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * factor;
  return make_result(a.shape(), std::move(out), {&a}, [factor](Node& self) {
    double* ga = grad_of(self.inputs[0]);
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * factor;
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  std::size_t batch = 1;
  std::size_t m = 0, k = 0, n = 0;
  Shape out_shape;
  if (as.size() == 2 && bs.size() == 2 && as[1] == bs[0]) {
    m = as[0], k = as[1], n = bs[1];
    out_shape = {m, n};
  } else if (as.size() == 3 && bs.size() == 3 && as[0] == bs[0] && as[2] == bs[1]) {
    batch = as[0], m = as[1], k = as[2], n = bs[2];
    out_shape = {batch, m, n};
  } else {
    throw DimensionError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  }
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t p = 0; p < batch; ++p) {
    const double* A = ad.data() + p * m * k;
    const double* B = bd.data() + p * k * n;
    double* C = out.data() + p * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t l = 0; l < k; ++l) {
        const double x = A[i * k + l];
        for (std::size_t j = 0; j < n; ++j) C[i * n + j] += x * B[l * n + j];
      }
    }
  }
  return make_result(std::move(out_shape), std::move(out), {&a, &b}, [batch, m, k, n](Node& self) {
    const auto& an = self.inputs[0];
    const auto& bn = self.inputs[1];
    double* ga = grad_of(an);
    double* gb = grad_of(bn);
    for (std::size_t p = 0; p < batch; ++p) {
      const double* A = an->data.data() + p * m * k;
      const double* B = bn->data.data() + p * k * n;
      const double* G = self.grad.data() + p * m * n;
      if (ga) {
        double* GA = ga + p * m * k;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t l = 0; l < k; ++l) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[l * n + j];
            GA[i * k + l] += acc;
          }
        }
      }
      if (gb) {
        double* GB = gb + p * k * n;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t l = 0; l < k; ++l) {
            const double x = A[i * k + l];
            for (std::size_t j = 0; j < n; ++j) GB[l * n + j] += x * G[i * n + j];
          }
        }
      }
    }
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const auto& s = a.shape();
  const std::size_t rank = s.size();
  if (perm.size() != rank) throw DimensionError("permute: order length does not match " + shape_str(s));
  std::vector<bool> seen(rank, false);
  for (std::size_t p : perm) {
    if (p >= rank || seen[p]) throw DimensionError("permute: invalid axis order for " + shape_str(s));
    seen[p] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = s[perm[i]];

  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
  // Source offset of every destination element, shared by forward and backward.
  const std::size_t total = a.numel();
  auto source = std::make_shared<std::vector<std::size_t>>(total);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < rank; ++d) off += idx[d] * in_strides[perm[d]];
    (*source)[flat] = off;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  const auto ad = a.data();
  std::vector<double> out(total);
  for (std::size_t i = 0; i < total; ++i) out[i] = ad[(*source)[i]];
  return make_result(std::move(out_shape), std::move(out), {&a}, [source](Node& self) {
    double* ga = grad_of(self.inputs[0]);
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[(*source)[i]] += self.grad[i];
  });
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() == 2) return permute(a, {1, 0});
  if (a.ndim() == 3) return permute(a, {0, 2, 1});
  throw DimensionError("transpose: expected 2-D or 3-D tensor, got " + shape_str(a.shape()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {&a}, [](Node& self) {
    double* ga = grad_of(self.inputs[0]);
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return make_result({}, {acc}, {&a}, [](Node& self) {
    const auto& an = self.inputs[0];
    double* ga = grad_of(an);
    for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.ndim() == 0 || x.shape().back() == 0) {
    throw DimensionError("softmax_lastdim: last dimension must be >= 1, got " + shape_str(x.shape()));
  }
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.numel() / cols;
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * cols;
    double* y = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (y[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
  }
  auto y_saved = std::make_shared<std::vector<double>>(out);
  return make_result(x.shape(), std::move(out), {&x}, [rows, cols, y_saved](Node& self) {
    double* gx = grad_of(self.inputs[0]);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = y_saved->data() + r * cols;
      const double* g = self.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[c] * (g[c] - dot);
    }
  });
}

Tensor gelu(const Tensor& x) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] / std::numbers::sqrt2));
  return make_result(x.shape(), std::move(out), {&x}, [](Node& self) {
    const auto& xn = self.inputs[0];
    double* gx = grad_of(xn);
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double v = xn->data[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      gx[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.ndim() == 0) throw DimensionError("layernorm: scalar input");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.numel() / cols;
  for (const Tensor* p : {&gain, &bias}) {
    if (p->defined() && (p->ndim() != 1 || p->dim(0) != cols)) {
      throw DimensionError("layernorm: affine parameter " + shape_str(p->shape()) + " does not match " +
                           shape_str(x.shape()));
    }
  }
  const auto xd = x.data();
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += in[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (in[c] - mu) * rs;
      (*xhat)[r * cols + c] = h;
      double y = h;
      if (gain.defined()) y *= gain.data()[c];
      if (bias.defined()) y += bias.data()[c];
      out[r * cols + c] = y;
    }
  }
  const bool has_gain = gain.defined();
  const bool has_bias = bias.defined();
  return make_result(x.shape(), std::move(out), {&x, &gain, &bias},
                     [rows, cols, xhat, rstd, has_gain, has_bias](Node& self) {
                       std::size_t slot = 1;
                       const std::shared_ptr<Node>* gn = has_gain ? &self.inputs[slot++] : nullptr;
                       const std::shared_ptr<Node>* bn = has_bias ? &self.inputs[slot++] : nullptr;
                       double* gx = grad_of(self.inputs[0]);
                       double* gg = gn ? grad_of(*gn) : nullptr;
                       double* gb = bn ? grad_of(*bn) : nullptr;
                       std::vector<double> dxhat(cols);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* g = self.grad.data() + r * cols;
                         const double* h = xhat->data() + r * cols;
                         double mean_d = 0.0, mean_dh = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) {
                           dxhat[c] = gn ? g[c] * (*gn)->data[c] : g[c];
                           mean_d += dxhat[c];
                           mean_dh += dxhat[c] * h[c];
                           if (gg) gg[c] += g[c] * h[c];
                           if (gb) gb[c] += g[c];
                         }
                         mean_d /= static_cast<double>(cols);
                         mean_dh /= static_cast<double>(cols);
                         if (gx) {
                           for (std::size_t c = 0; c < cols; ++c) {
                             gx[r * cols + c] += (*rstd)[r] * (dxhat[c] - mean_d - h[c] * mean_dh);
                           }
                         }
                       }
                     });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  if (table.ndim() != 2) throw DimensionError("embedding_lookup: table must be 2-D, got " + shape_str(table.shape()));
  const std::size_t vocab = table.dim(0);
  const std::size_t width = table.dim(1);
  auto rows = std::make_shared<std::vector<std::size_t>>(ids.size());
  std::vector<double> out(ids.size() * width);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding_lookup: id " + std::to_string(ids[i]) + " outside vocab of " + std::to_string(vocab));
    }
    (*rows)[i] = static_cast<std::size_t>(ids[i]);
    std::copy_n(td.data() + (*rows)[i] * width, width, out.data() + i * width);
  }
  return make_result({ids.size(), width}, std::move(out), {&table}, [rows, width](Node& self) {
    double* gt = grad_of(self.inputs[0]);
    for (std::size_t i = 0; i < rows->size(); ++i) {
      for (std::size_t c = 0; c < width; ++c) gt[(*rows)[i] * width + c] += self.grad[i * width + c];
    }
  });
}

Tensor causal_mask(const Tensor& scores) {
  const auto& s = scores.shape();
  if (s.size() < 2 || s[s.size() - 1] != s[s.size() - 2]) {
    throw DimensionError("causal_mask: expected [..., T, T], got " + shape_str(s));
  }
  const std::size_t t = s.back();
  const std::size_t blocks = scores.numel() / (t * t);
  std::vector<double> out(scores.data().begin(), scores.data().end());
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = i + 1; j < t; ++j) out[b * t * t + i * t + j] = -std::numeric_limits<double>::infinity();
    }
  }
  return make_result(s, std::move(out), {&scores}, [t](Node& self) {
    double* gs = grad_of(self.inputs[0]);
    for (std::size_t idx = 0; idx < self.grad.size(); ++idx) {
      const std::size_t i = (idx / t) % t;
      const std::size_t j = idx % t;
      if (j <= i) gs[idx] += self.grad[idx];
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  if (logits.ndim() != 2) throw DimensionError("cross_entropy: logits must be [N,V], got " + shape_str(logits.shape()));
  const std::size_t rows = logits.dim(0);
  const std::size_t vocab = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
  }
  const auto ld = logits.data();
  auto probs = std::make_shared<std::vector<double>>(ld.size());
  std::vector<int> tgt(targets.begin(), targets.end());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t == kIgnoreIndex) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside vocab of " + std::to_string(vocab));
    }
    const double* in = ld.data() + r * vocab;
    const double mx = *std::max_element(in, in + vocab);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) z += std::exp(in[c] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t c = 0; c < vocab; ++c) (*probs)[r * vocab + c] = std::exp(in[c] - log_z);
    total += log_z - in[t];
    ++count;
  }
  const double inv = count ? 1.0 / static_cast<double>(count) : 0.0;
  return make_result({}, {total * inv}, {&logits}, [probs, tgt = std::move(tgt), vocab, inv](Node& self) {
    double* gl = grad_of(self.inputs[0]);
    const double g = self.grad[0] * inv;
    for (std::size_t r = 0; r < tgt.size(); ++r) {
      if (tgt[r] == kIgnoreIndex) continue;
      for (std::size_t c = 0; c < vocab; ++c) {
        const double onehot = static_cast<std::size_t>(tgt[r]) == c ? 1.0 : 0.0;
        gl[r * vocab + c] += g * ((*probs)[r * vocab + c] - onehot);
      }
    }
  });
}

}  // namespace sharelora
