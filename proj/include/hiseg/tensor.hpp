#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace hiseg {

class Graph;

// Dense row-major tensor of 64-bit floats. A tensor is either detached
// (plain value) or attached to a recording Graph via its node index, in
// which case every op consuming it appends a node with an analytic
// backward rule.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  int node = -1;
  Graph* graph = nullptr;

  Tensor() = default;
  explicit Tensor(std::vector<int> s);
  Tensor(std::vector<int> s, std::vector<double> d);

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, double v);
  static Tensor ones(std::vector<int> s) { return full(std::move(s), 1.0); }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  bool attached() const { return graph != nullptr; }

  double& operator()(int i) { return data[static_cast<std::size_t>(i)]; }
  double operator()(int i) const { return data[static_cast<std::size_t>(i)]; }
  double& operator()(int i, int j) { return data[idx2(i, j)]; }
  double operator()(int i, int j) const { return data[idx2(i, j)]; }
  double& operator()(int i, int j, int k) { return data[idx3(i, j, k)]; }
  double operator()(int i, int j, int k) const { return data[idx3(i, j, k)]; }
  double& operator()(int i, int j, int k, int l) { return data[idx4(i, j, k, l)]; }
  double operator()(int i, int j, int k, int l) const { return data[idx4(i, j, k, l)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  // Value copy with no graph membership.
  Tensor detached() const { return Tensor(shape, data); }

  bool all_finite() const;

 private:
  std::size_t idx2(int i, int j) const {
    return static_cast<std::size_t>(i) * shape[1] + j;
  }
  std::size_t idx3(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k;
  }
  std::size_t idx4(int i, int j, int k, int l) const {
    return ((static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l;
  }
};

std::string shape_str(const std::vector<int>& s);
std::int64_t shape_numel(const std::vector<int>& s);

// Named trainable value. Gradients accumulate here after Graph backward
// passes via write_param_grads.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape)) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

// Bundled arguments for a node's backward rule.
class BackwardCtx {
 public:
  BackwardCtx(Graph& g, int node_index) : g_(g), node_(node_index) {}
  const Tensor& out_grad() const;
  const Tensor& out_value() const;
  int num_inputs() const;
  const Tensor& in(int i) const;   // value of input i
  Tensor& grad(int i);             // gradient accumulator of input i
 private:
  Graph& g_;
  int node_;
};

using BackwardFn = std::function<void(BackwardCtx&)>;

// Recording tape. Nodes are appended in evaluation order, which is a
// valid topological order by construction; backward walks it in reverse.
// A graph is rebuilt for every forward pass and never reused.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Constant leaf: gradients flow to it but are not surfaced anywhere.
  Tensor leaf(const Tensor& value);

  // Leaf bound to a Parameter; write_param_grads later adds the node's
  // gradient into p.grad. Attaching the same parameter twice is fine,
  // both contributions accumulate.
  Tensor param(Parameter& p);

  Tensor record(Tensor value, std::vector<int> inputs, BackwardFn fn);

  // Reverse accumulation from a scalar loss on this graph. Fills a
  // gradient slot for every node reachable from the loss.
  void backward(const Tensor& loss);

  // Gradient of an attached tensor after backward(); zeros if unreached.
  Tensor grad_of(const Tensor& t) const;

  // p.grad += scale * d(loss)/dp for every bound parameter, in binding
  // order (fixed summation order keeps training deterministic).
  void write_param_grads(double scale = 1.0);

  std::size_t size() const { return nodes_.size(); }

 private:
  friend class BackwardCtx;
  struct Node {
    Tensor value;
    std::vector<int> inputs;
    BackwardFn backward;
    Tensor grad;
    bool has_grad = false;
  };
  Tensor& grad_slot(int node);
  std::vector<Node> nodes_;
  std::vector<std::pair<Parameter*, int>> bindings_;
  bool ran_backward_ = false;
};

namespace detail {

// Graph shared by a set of op inputs; throws if two distinct graphs mix.
Graph* common_graph(std::initializer_list<const Tensor*> ins);

// Node index of t on g, auto-wrapping detached tensors as constant leaves.
int node_on(Graph& g, const Tensor& t);

// Records out on the inputs' graph when there is one, else returns the
// detached value untouched.
Tensor finish_op(Tensor out, std::initializer_list<const Tensor*> ins, const BackwardFn& fn);

}  // namespace detail

}  // namespace hiseg
