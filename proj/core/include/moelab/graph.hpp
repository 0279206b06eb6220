#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include <moelab/tensor.hpp>

namespace moelab {

// Learnable tensor with a persistent gradient accumulator. Gradients add up
// across backward passes and reset only on zero_grad().
struct Parameter {
    Tensor value;
    Tensor grad;
    std::string name;

    Parameter() = default;
    Parameter(std::string name_, Tensor value_) :
            value(std::move(value_)),
            grad(Tensor::zeros_like(value)),
            name(std::move(name_))
    {
    }

    void zero_grad() { grad.fill(0.0); }
};

class Graph;

// Handle to a node in a Graph. Cheap to copy; invalidated when the graph is
// destroyed.
class Var {
public:
    Var() = default;
    const Tensor &value() const;
    const Tensor &grad() const;
    Graph *graph() const { return g_; }
    int id() const { return id_; }
    bool valid() const { return g_ != nullptr; }

private:
    friend class Graph;
    Var(Graph *g, int id) : g_(g), id_(id) {}
    Graph *g_ = nullptr;
    int id_ = -1;
};

// Records one forward computation; backward() replays the recorded ops in
// reverse creation order, which is a valid topological order by
// construction. Node values are immutable once recorded and the graph has a
// single writer, so gradient accumulation order is deterministic.
class Graph {
public:
    Graph() = default;
    Graph(const Graph &) = delete;
    Graph &operator=(const Graph &) = delete;

    Var constant(Tensor t);
    Var scalar(double v) { return constant(Tensor::scalar(v)); }
    // One node per Parameter per graph; repeated calls return the same Var.
    Var param(Parameter &p);

    // Accumulates d(loss)/d(node) for every node, then adds the gradients of
    // bound leaves into their Parameters. loss must be a scalar.
    void backward(Var loss);

    std::size_t node_count() const { return nodes_.size(); }

    // Node construction API used by the operator library.
    Var node(const char *what, Tensor value);
    void set_backward(Var v, std::function<void()> back);
    const Tensor &value_of(Var v) const { return nodes_[v.id_].value; }
    Tensor &grad_of(Var v) { return nodes_[v.id_].grad; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void()> back;
        Parameter *bound = nullptr;
    };
    std::vector<Node> nodes_;
    std::unordered_map<Parameter *, int> param_nodes_;

    friend class Var;
};

// ----- operator library (all with registered gradient rules) -----

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b); // elementwise
Var neg(Var a);
Var scale(Var a, double c);
Var square(Var a);
Var vsum(Var a);  // sum of all entries -> scalar
Var vmean(Var a); // mean of all entries -> scalar
Var dot(Var a, Var b);
Var matmul(Var a, Var b);    // [m×k]·[k×n]
Var matmul_nt(Var a, Var b); // [m×k]·[n×k]ᵀ -> [m×n]
Var matvec(Var a, Var x);    // [m×n]·[n] -> [m]
Var swish(Var x);            // x·sigmoid(x), elementwise
Var softmax(Var v);          // rank-1, max-subtracted
Var softmax_rows(Var m);     // per-row, max-subtracted
Var logsumexp_rows(Var m);   // [B×E] -> [B], stable
// Cosine similarity with an epsilon guard: if either norm is below 1e-12
// the value is 0 with zero gradient; otherwise the denominator is
// max(‖u‖‖v‖, 1e-12) and the result is clamped to [-1, 1].
Var cosine(Var u, Var v);
Var row(Var m, std::size_t r);                  // copy of one row as rank-1
Var elem(Var m, std::size_t r, std::size_t c);  // single entry as scalar
Var mul_scalar(Var v, Var s);                   // tensor × scalar node
Var stack_rows(const std::vector<Var> &rows);   // n rank-1 [w] -> [n×w]
Var mean_cols(Var m);                           // [B×E] -> [E] column means
Var embed(Var table, const std::vector<std::uint32_t> &ids); // [V×h] gather -> [B×h]
Var gather_rows(Var m, const std::vector<std::size_t> &rows); // row subset, scatter-add grads
// Mean over rows of (logsumexp(row) − row[target]).
Var cross_entropy_mean(Var logits, const std::vector<std::uint32_t> &targets);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

} // namespace moelab
