// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cmoe {

class Rng;

/// Extents of a tensor, outermost first. Rank is 0 (scalar) to 3.
using Shape = std::vector<std::size_t>;

constexpr std::size_t kMaxRank = 3;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::optional<std::vector<double>> grad;
  // Leaf: trainable. Interior: some input is trainable, so gradient flows here.
  bool requires_grad = false;
  bool is_leaf = true;
  std::string name;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Dense row-major float64 array with an optional gradient slot.
///
/// Tensor is a handle: copies share storage, which is what lets a parameter
/// appear in many graphs. Use clone() for an independent deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor uniform(Shape shape, double bound, Rng& rng, bool requires_grad = false);
  static Tensor normal(Shape shape, double stddev, Rng& rng, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Direct write access. Only meaningful on leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  /// Marks a leaf trainable or frozen. Freezing drops any stored gradient.
  void set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void clear_grad();

  const std::string& name() const;
  Tensor& set_name(std::string name);

  /// Deep copy as a new leaf with the same requires_grad flag and name.
  Tensor clone() const;
  /// New leaf sharing no graph history; values copied.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const noexcept { return node_ == other.node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

 private:
  detail::Node& checked() const;
  std::shared_ptr<detail::Node> node_;
};

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// trainable leaf reachable from the loss; frozen leaves are never touched.
/// The graph is released afterwards.
void backward(const Tensor& loss);

/// FNV-1a over the raw bytes of the values; used to assert bitwise stability.
std::uint64_t content_hash(std::span<const double> values);

}  // namespace cmoe
