#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace fabricvs::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Shape rule violated by a primitive's inputs.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A primitive produced NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// API misuse (non-scalar backward root, bad arguments).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

[[noreturn]] void throw_dimension(std::string_view op, const Shape& a, const Shape& b);

struct Node {
  Shape shape;
  std::vector<double> value;
  // Persistent accumulated gradient (leaves only).
  std::vector<double> grad;
  // Scratch gradient for the backward pass in flight.
  std::vector<double> pass_grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::string name;

  std::span<double> ensure_pass_grad();
};

/// Dense float64 array, row-major. Cheap to copy (shared node).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  /// Trainable leaf; participates in gradient recording.
  static Tensor parameter(Shape shape, std::vector<double> values, std::string name = {});
  static Tensor scalar(double v) { return from({}, {v}); }

  [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }
  [[nodiscard]] const Shape& shape() const { return node_->shape; }
  [[nodiscard]] std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  [[nodiscard]] std::size_t rank() const { return node_->shape.size(); }
  [[nodiscard]] std::size_t size() const { return node_->value.size(); }
  [[nodiscard]] std::span<const double> data() const { return node_->value; }
  [[nodiscard]] double item() const;
  [[nodiscard]] double at(std::size_t flat) const { return node_->value.at(flat); }

  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  [[nodiscard]] bool is_leaf() const { return node_->is_leaf; }
  [[nodiscard]] std::span<const double> grad() const { return node_->grad; }
  [[nodiscard]] const std::string& name() const { return node_->name; }
  void zero_grad();

  /// Mutable view for optimizer updates of leaf parameters between steps.
  [[nodiscard]] std::span<double> mutable_data();

  [[nodiscard]] Node* node() const { return node_.get(); }
  [[nodiscard]] const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Ordered record of primitive applications for reverse-mode differentiation.
class Tape {
 public:
  struct Entry {
    std::string_view op;
    std::vector<std::shared_ptr<Node>> inputs;
    std::shared_ptr<Node> output;
    std::function<void(Node& out)> backward;
  };

  void record(Entry entry);
  void clear() { entries_.clear(); }
  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] const std::vector<Entry>& entries() const { return entries_; }
  [[nodiscard]] bool contains(const Node* node) const;

 private:
  std::vector<Entry> entries_;
};

/// The tape primitives record onto for the current thread (may be null).
Tape* active_tape();

/// Installs a tape as active for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Per-leaf gradients of one backward pass.
class GradientMap {
 public:
  [[nodiscard]] bool empty() const { return grads_.empty(); }
  [[nodiscard]] std::size_t size() const { return grads_.size(); }
  [[nodiscard]] bool contains(const Tensor& t) const { return grads_.contains(t.node()); }
  [[nodiscard]] const std::vector<double>& at(const Tensor& t) const;
  void insert(const Node* node, std::vector<double> g) { grads_[node] = std::move(g); }

 private:
  std::unordered_map<const Node*, std::vector<double>> grads_;
};

/// Reverse sweep from a scalar root. Leaf gradients are also accumulated into
/// each leaf's persistent grad buffer.
GradientMap backward(Tape& tape, const Tensor& root);

}  // namespace fabricvs::ad
