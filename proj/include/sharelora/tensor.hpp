#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace sharelora {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;
  std::string name;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

/// Dense row-major f64 array with reverse-mode autodiff.
///
/// Tensor is a handle: copies share the same underlying storage and graph
/// node, which is what lets one adapter matrix sit at many layers. Use
/// clone() for an independent value copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t i) const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writable view; only legal on leaves (tensors without recorded inputs).
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  const std::string& name() const;
  void set_name(std::string name);

  // Runs reverse-mode accumulation from this scalar.
  void backward() const;

  Tensor clone(bool requires_grad = false) const;
  Tensor detach() const { return clone(false); }

  bool is_leaf() const;
  bool same_object(const Tensor& other) const { return node_ == other.node_; }
  const void* identity() const { return node_.get(); }

  // Internal: ops build nodes through these.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on this thread while in scope.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// Class index that cross_entropy skips.
inline constexpr int kIgnoreIndex = -1;

// ---- operations -----------------------------------------------------------

// [m,k]x[k,n] -> [m,n], or batched [b,m,k]x[b,k,n] -> [b,m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

// Swap of the last two axes (2-D or 3-D).
Tensor transpose(const Tensor& a);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm);
Tensor reshape(const Tensor& a, Shape shape);

// Elementwise with b either a scalar, the same shape, or a trailing suffix of a's shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor softmax_lastdim(const Tensor& x);
Tensor gelu(const Tensor& x);

// Normalizes over the last dim. gain and bias may be undefined (no affine).
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Rows of table [V,D] for each id -> [ids.size(), D].
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

// [..., T, T] scores; entries with column > row are set to -inf.
Tensor causal_mask(const Tensor& scores);

// Mean negative log-likelihood over rows of logits [N,V] whose target is not kIgnoreIndex.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

}  // namespace sharelora
