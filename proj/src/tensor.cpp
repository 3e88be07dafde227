// SPDX-License-Identifier: Apache-2.0
#include "ca3d/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "ca3d/error.hpp"

namespace ca3d {

namespace {
thread_local bool g_grad_enabled = true;
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<float>(static_cast<std::size_t>(n), value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
  for (auto d : shape) {
    if (d <= 0) fail(ErrorCode::kShape, "tensor: non-positive dimension in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    fail(ErrorCode::kShape, "tensor: shape " + shape_str(shape) + " does not match " +
                                std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return from_data({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }

std::int64_t Tensor::dim(int i) const {
  const int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) fail(ErrorCode::kShape, "tensor: dim index out of range for " + shape_str(shape()));
  return shape()[static_cast<std::size_t>(i)];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(node_->data.size()); }

std::span<const float> Tensor::data() const { return node_->data; }

std::span<float> Tensor::mutable_data() { return node_->data; }

std::vector<float> Tensor::to_vector() const { return node_->data; }

float Tensor::item() const {
  if (numel() != 1) fail(ErrorCode::kShape, "item: tensor has shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) { node_->requires_grad = value; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const float> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() { node_->grad.clear(); }

void Tensor::backward() const {
  if (numel() != 1) {
    fail(ErrorCode::kShape, "backward: loss must be a scalar, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; reversed it is a valid reverse-topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      detail::Node* child = n->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Intermediate gradients are no longer needed once propagated.
  for (detail::Node* n : order) {
    if (n->backward) n->grad.clear();
  }
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const { return detach(); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

namespace detail {

Tensor make_result(const char* op, Shape shape, std::vector<float> data, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward) {
#ifndef NDEBUG
  bool inputs_finite = true;
  for (const auto& in : inputs) {
    for (float v : in.data()) inputs_finite = inputs_finite && std::isfinite(v);
  }
  if (inputs_finite) {
    for (float v : data) {
      if (!std::isfinite(v)) fail(ErrorCode::kNumerical, std::string(op) + ": produced a non-finite value");
    }
  }
#endif
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool track = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

}  // namespace ca3d
