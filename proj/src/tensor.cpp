#include "sharelora/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "sharelora/errors.hpp"

namespace sharelora {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->data.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("Tensor::from: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " + std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor Tensor::randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = dist(rng);
  return from(std::move(shape), std::move(values), requires_grad);
}

namespace {
const detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw ContractError("use of an undefined tensor");
  return *node;
}
}  // namespace

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t i) const {
  const auto& s = shape();
  if (i >= s.size()) throw DimensionError("dim index " + std::to_string(i) + " out of range for " + shape_str(s));
  return s[i];
}

std::size_t Tensor::numel() const { return checked(node_).data.size(); }
std::span<const double> Tensor::data() const { return checked(node_).data; }

std::span<double> Tensor::mutable_data() {
  checked(node_);
  if (!node_->inputs.empty()) throw ContractError("mutable_data on a non-leaf tensor");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("at(): rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t idx : index) {
    if (idx >= s[axis]) throw IndexError("at(): index out of range for " + shape_str(s));
    flat = flat * s[axis] + idx;
    ++axis;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }
void Tensor::set_requires_grad(bool value) {
  checked(node_);
  node_->requires_grad = value;
}
bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }
std::span<const double> Tensor::grad() const { return checked(node_).grad; }
std::span<double> Tensor::mutable_grad() {
  checked(node_);
  node_->ensure_grad();
  return node_->grad;
}
void Tensor::zero_grad() {
  checked(node_);
  node_->grad.clear();
}

const std::string& Tensor::name() const { return checked(node_).name; }
void Tensor::set_name(std::string name) {
  checked(node_);
  node_->name = std::move(name);
}

bool Tensor::is_leaf() const { return checked(node_).inputs.empty(); }

Tensor Tensor::clone(bool requires_grad) const {
  auto t = from(shape(), node_->data, requires_grad);
  t.node_->name = node_->name;
  return t;
}

void Tensor::backward() const {
  const auto& root = checked(node_);
  if (root.data.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(root.shape));
  }
  if (!root.requires_grad) throw ContractError("backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order with each node once.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients belong to this pass only; leaves keep accumulating.
  for (detail::Node* node : order) {
    if (!node->inputs.empty()) node->grad.clear();
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

}  // namespace sharelora
