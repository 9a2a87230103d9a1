#pragma once

// Minimal reverse-mode automatic differentiation over dense float tensors.
// Each op records its parents and a backward closure; backward() walks the
// graph in reverse topological order. Image tensors are channel-last (NHWC).

#include <cassert>
#include <functional>
#include <memory>
#include <initializer_list>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "kfd/common.hpp"

namespace kfd::nn {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) n *= static_cast<size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + "]";
}

/// Storage aligned to the widest SIMD packet, so the vectorized kernels
/// take the same code path (and round the same way) in every process.
using FloatBuffer = std::vector<float, Eigen::aligned_allocator<float>>;

struct Tensor {
  Shape shape;
  FloatBuffer data;

  Tensor() = default;
  explicit Tensor(Shape s, float fill = 0.f) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, FloatBuffer d) : shape(std::move(s)), data(std::move(d)) { check(); }
  Tensor(Shape s, const std::vector<float>& d) : shape(std::move(s)), data(d.begin(), d.end()) { check(); }
  Tensor(Shape s, std::initializer_list<float> d) : shape(std::move(s)), data(d) { check(); }

  size_t numel() const { return data.size(); }
  int dim(int i) const { return shape[i < 0 ? shape.size() + i : i]; }
  int rank() const { return static_cast<int>(shape.size()); }
  float* ptr() { return data.data(); }
  const float* ptr() const { return data.data(); }
  float& operator[](size_t i) { return data[i]; }
  float operator[](size_t i) const { return data[i]; }
  bool empty() const { return data.empty(); }
  std::vector<float> to_vector() const { return {data.begin(), data.end()}; }

 private:
  void check() const {
    if (data.size() != shape_numel(shape)) throw ConfigError("Tensor: data size does not match shape " + shape_str(shape));
  }
};

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad() {
    if (grad.data.size() != value.data.size()) grad = Tensor(value.shape, 0.f);
    return grad;
  }
};

inline thread_local bool g_grad_enabled = true;

}  // namespace detail

inline bool grad_enabled() { return detail::g_grad_enabled; }

/// Disables graph recording in this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
  ~NoGradGuard() { detail::g_grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor t, bool requires_grad = false) : node_(std::make_shared<detail::Node>()) {
    node_->value = std::move(t);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& grad() { return node_->ensure_grad(); }
  const Tensor& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.numel() == node_->value.numel(); }
  void zero_grad() { node_->grad = Tensor(); }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Create an op result. The backward closure receives the result node and
/// accumulates into parents that require gradients.
inline Var make_op(Tensor value, std::vector<Var> parents, std::function<void(detail::Node&)> bw) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(value);
  if (!grad_enabled()) return Var(n);
  bool any = false;
  for (auto& p : parents) any = any || p.requires_grad();
  if (!any) return Var(n);
  n->requires_grad = true;
  for (auto& p : parents) n->parents.push_back(p.node());
  n->backward_fn = std::move(bw);
  return Var(n);
}

/// Accumulate d(root)/d(x) into every reachable leaf with requires_grad.
/// The root gradient is seeded with ones (scalar losses: 1).
inline void backward(const Var& root) {
  if (!root.requires_grad()) return;
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      detail::Node* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  auto& g = root.node()->ensure_grad();
  std::fill(g.data.begin(), g.data.end(), 1.f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn && n->grad.numel() == n->value.numel()) n->backward_fn(*n);
  }
  // Release intermediate gradients; leaves keep theirs.
  for (auto* n : order)
    if (n->backward_fn) n->grad = Tensor();
}

inline Tensor& parent_grad(detail::Node& n, size_t i) { return n.parents[i]->ensure_grad(); }
inline bool parent_needs(detail::Node& n, size_t i) { return n.parents[i]->requires_grad; }

}  // namespace kfd::nn
