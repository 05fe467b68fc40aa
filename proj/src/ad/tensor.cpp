#include "fabricvs/ad/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace fabricvs::ad {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

void throw_dimension(std::string_view op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
                       to_string(b));
}

std::span<double> Node::ensure_pass_grad() {
  if (pass_grad.empty()) pass_grad.assign(value.size(), 0.0);
  return pass_grad;
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto node = std::make_shared<Node>();
  node->value.assign(numel(shape), value);
  node->shape = std::move(shape);
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size()) {
    throw DimensionError("Tensor::from: shape " + to_string(shape) + " needs " +
                         std::to_string(numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values, std::string name) {
  Tensor t = from(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  t.node_->name = std::move(name);
  return t;
}

double Tensor::item() const {
  if (node_->value.size() != 1) {
    throw ContractError("item() on tensor of shape " + to_string(node_->shape));
  }
  return node_->value[0];
}

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

std::span<double> Tensor::mutable_data() {
  if (!node_->is_leaf) throw ContractError("mutable_data() on a non-leaf tensor");
  return node_->value;
}

void Tape::record(Entry entry) { entries_.push_back(std::move(entry)); }

bool Tape::contains(const Node* node) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [node](const Entry& e) { return e.output.get() == node; });
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

const std::vector<double>& GradientMap::at(const Tensor& t) const {
  auto it = grads_.find(t.node());
  if (it == grads_.end()) throw ContractError("no gradient recorded for tensor '" + t.name() + "'");
  return it->second;
}

GradientMap backward(Tape& tape, const Tensor& root) {
  if (root.size() != 1) {
    throw ContractError("backward: root must be scalar, got shape " + to_string(root.shape()));
  }
  GradientMap result;
  if (!root.requires_grad()) return result;

  const auto& entries = tape.entries();
  std::vector<Node*> leaves;
  auto remember_leaf = [&leaves](Node* n) {
    if (n->is_leaf && n->requires_grad &&
        std::find(leaves.begin(), leaves.end(), n) == leaves.end()) {
      leaves.push_back(n);
    }
  };
  for (const auto& e : entries) {
    e.output->pass_grad.clear();
    for (const auto& in : e.inputs) {
      in->pass_grad.clear();
      remember_leaf(in.get());
    }
  }
  Node* r = root.node();
  remember_leaf(r);
  r->pass_grad.assign(1, 1.0);

  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    Node& out = *it->output;
    if (out.pass_grad.empty()) continue;
    it->backward(out);
    // Intermediate gradients are no longer needed once propagated.
    if (!out.is_leaf) {
      out.pass_grad.clear();
      out.pass_grad.shrink_to_fit();
    }
  }

  for (Node* leaf : leaves) {
    if (leaf->pass_grad.empty()) continue;
    if (leaf->grad.empty()) leaf->grad.assign(leaf->value.size(), 0.0);
    for (std::size_t i = 0; i < leaf->grad.size(); ++i) leaf->grad[i] += leaf->pass_grad[i];
    result.insert(leaf, std::move(leaf->pass_grad));
    leaf->pass_grad.clear();
  }
  return result;
}

}  // namespace fabricvs::ad
