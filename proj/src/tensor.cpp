#include "hiseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace hiseg {

std::int64_t shape_numel(const std::vector<int>& s) {
  std::int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor extent must be positive, got shape " + shape_str(shape));
  }
  data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
}

Tensor::Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor extent must be positive, got shape " + shape_str(shape));
  }
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
    throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
}

Tensor Tensor::full(std::vector<int> s, double v) {
  Tensor t(std::move(s));
  std::fill(t.data.begin(), t.data.end(), v);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

const Tensor& BackwardCtx::out_grad() const { return g_.nodes_[node_].grad; }
const Tensor& BackwardCtx::out_value() const { return g_.nodes_[node_].value; }
int BackwardCtx::num_inputs() const { return static_cast<int>(g_.nodes_[node_].inputs.size()); }
const Tensor& BackwardCtx::in(int i) const { return g_.nodes_[g_.nodes_[node_].inputs[i]].value; }
Tensor& BackwardCtx::grad(int i) { return g_.grad_slot(g_.nodes_[node_].inputs[i]); }

Tensor& Graph::grad_slot(int node) {
  Node& n = nodes_[node];
  if (!n.has_grad) {
    n.grad = Tensor::zeros(n.value.shape);
    n.has_grad = true;
  }
  return n.grad;
}

Tensor Graph::leaf(const Tensor& value) {
  Tensor t = value.detached();
  t.node = static_cast<int>(nodes_.size());
  t.graph = this;
  nodes_.push_back(Node{t.detached(), {}, nullptr, Tensor{}, false});
  return t;
}

Tensor Graph::param(Parameter& p) {
  Tensor t = leaf(p.value);
  bindings_.emplace_back(&p, t.node);
  return t;
}

Tensor Graph::record(Tensor value, std::vector<int> inputs, BackwardFn fn) {
  for (int i : inputs) {
    if (i < 0 || i >= static_cast<int>(nodes_.size()))
      throw std::logic_error("graph record: input node out of range");
  }
  value.node = static_cast<int>(nodes_.size());
  value.graph = this;
  nodes_.push_back(Node{value.detached(), std::move(inputs), std::move(fn), Tensor{}, false});
  return value;
}

void Graph::backward(const Tensor& loss) {
  if (loss.graph != this || loss.node < 0)
    throw std::invalid_argument("backward: loss is not attached to this graph");
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape));

  // Reachability from the loss over input edges.
  std::vector<char> needed(nodes_.size(), 0);
  std::vector<int> stack{loss.node};
  needed[loss.node] = 1;
  while (!stack.empty()) {
    const int n = stack.back();
    stack.pop_back();
    for (int i : nodes_[n].inputs) {
      if (!needed[i]) {
        needed[i] = 1;
        stack.push_back(i);
      }
    }
  }

  grad_slot(loss.node).data[0] = 1.0;
  for (int n = loss.node; n >= 0; --n) {
    if (!needed[n] || !nodes_[n].backward || !nodes_[n].has_grad) continue;
    BackwardCtx ctx(*this, n);
    nodes_[n].backward(ctx);
  }
  ran_backward_ = true;
}

Tensor Graph::grad_of(const Tensor& t) const {
  if (t.graph != this || t.node < 0)
    throw std::invalid_argument("grad_of: tensor is not attached to this graph");
  const Node& n = nodes_[t.node];
  return n.has_grad ? n.grad.detached() : Tensor::zeros(n.value.shape);
}

void Graph::write_param_grads(double scale) {
  if (!ran_backward_) throw std::logic_error("write_param_grads called before backward");
  for (auto& [p, node] : bindings_) {
    if (!p->trainable) continue;
    const Node& n = nodes_[node];
    if (!n.has_grad) continue;  // unreached parameters keep zero grad
    for (std::size_t i = 0; i < p->grad.data.size(); ++i)
      p->grad.data[i] += scale * n.grad.data[i];
  }
}

namespace detail {

Graph* common_graph(std::initializer_list<const Tensor*> ins) {
  Graph* g = nullptr;
  for (const Tensor* t : ins) {
    if (!t->attached()) continue;
    if (g && g != t->graph)
      throw std::invalid_argument("op inputs belong to two different graphs");
    g = t->graph;
  }
  return g;
}

int node_on(Graph& g, const Tensor& t) {
  if (t.attached()) return t.node;
  return g.leaf(t).node;
}

Tensor finish_op(Tensor out, std::initializer_list<const Tensor*> ins, const BackwardFn& fn) {
  Graph* g = common_graph(ins);
  if (!g) return out;
  std::vector<int> nodes;
  nodes.reserve(ins.size());
  for (const Tensor* t : ins) nodes.push_back(node_on(*g, *t));
  return g->record(std::move(out), std::move(nodes), fn);
}

}  // namespace detail

}  // namespace hiseg
