#include "tasl/nn/tensor.hpp"

#include <unordered_set>

#include "tasl/error.hpp"

namespace tasl::nn {

namespace {
thread_local bool g_grad_enabled = true;
thread_local bool g_meta = false;
}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

bool grad_enabled() { return g_grad_enabled; }
bool meta_mode() { return g_meta; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

MetaGuard::MetaGuard() : prev_(g_meta) { g_meta = true; }
MetaGuard::~MetaGuard() { g_meta = prev_; }

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) { return full(shape, 0.0, requires_grad); }

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = shape;
  if (!g_meta) n->data.assign(numel(shape), value);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values, bool requires_grad) {
  if (values.size() != numel(shape)) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + shape_string(shape));
  }
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->data = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

int Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for shape " + shape_string(shape()));
  return node_->shape[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (node_->data.size() != 1) throw ShapeError("item() on a tensor of shape " + shape_string(shape()));
  return node_->data[0];
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<Node>();
  n->shape = node_->shape;
  n->data = node_->data;
  return Tensor(std::move(n));
}

void Tensor::backward() {
  if (node_->data.size() != 1) throw ShapeError("backward() needs a scalar, got " + shape_string(shape()));
  if (!node_->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward_fn) continue;
    for (auto& in : n->inputs) {
      if (in->requires_grad) in->ensure_grad();
    }
    n->backward_fn(*n);
  }
  for (Node* n : order) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->inputs.clear();
      if (n != node_.get()) n->grad.clear();
    }
  }
}

Tensor make_result(const Shape& shape, const std::vector<Tensor>& inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = shape;
  if (!g_meta) n->data.assign(numel(shape), 0.0);
  bool needs = false;
  if (g_grad_enabled && !g_meta) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (const auto& t : inputs) n->inputs.push_back(t.ptr());
    n->backward_fn = std::move(backward);
  }
  return Tensor(std::move(n));
}

}  // namespace tasl::nn
