// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ca3d {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

/// One vertex of the dynamic autodiff graph. Values are immutable after
/// construction; only `grad` is written during backward.
struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  std::vector<float>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major float32 tensor with reverse-mode gradient tracking.
/// Copies share storage; use `clone()` for an independent buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  /// Size of dimension `i`; negative indices count from the back.
  std::int64_t dim(int i) const;
  std::int64_t numel() const;

  std::span<const float> data() const;
  /// In-place access for leaf tensors (parameter updates, test setup).
  std::span<float> mutable_data();
  std::vector<float> to_vector() const;
  float item() const;
  float at(std::int64_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const float> grad() const;
  void zero_grad();

  /// Populates gradients on every requires_grad ancestor. The tensor must
  /// hold exactly one element.
  void backward() const;

  /// Same values, no history.
  Tensor detach() const;
  Tensor clone() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph construction for its lifetime (sampling, evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace detail {

/// Wraps freshly computed output values as a graph node. The backward
/// closure is only kept when some input tracks gradients.
Tensor make_result(const char* op, Shape shape, std::vector<float> data,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward);

}  // namespace detail

}  // namespace ca3d
