#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "segnet/error.hpp"
#include "segnet/rng.hpp"

namespace segnet {

#ifdef SEGNET_REAL_FLOAT
using Real = float;
#else
using Real = double;
#endif

class Tensor;
using BackwardFn = std::function<void(struct Node&)>;

// One vertex of the computation graph: a row-major 2-D value buffer, an
// optional gradient buffer of the same shape, and backward wiring to the
// inputs that produced it. Graphs are DAGs by construction (an op node
// can only reference tensors that already exist).
struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<Real> values;
    std::vector<Real> grad;     // lazily allocated, same extent as values
    bool requires_grad = false;
    std::vector<Tensor> inputs; // keeps producers alive
    BackwardFn backward_fn;     // absent for leaves
    const char* op = "leaf";

    std::size_t size() const { return rows * cols; }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), Real(0));
    }

    ~Node();
};

// Forward evaluation runs everywhere; graph recording can be switched off
// for inference paths. The flag is thread-local so concurrent sessions on
// independent graphs stay isolated.
inline bool& grad_recording_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool previous;
    NoGradGuard() : previous(grad_recording_flag()) { grad_recording_flag() = false; }
    ~NoGradGuard() { grad_recording_flag() = previous; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Value-semantic handle to a shared graph node. All tensors in this
// library are rank-2; vectors are 1xN or Nx1 and scalars are 1x1.
class Tensor {
public:
    Tensor() = default;

    Tensor(std::size_t rows, std::size_t cols, Real fill = Real(0)) {
        node_ = std::make_shared<Node>();
        node_->rows = rows;
        node_->cols = cols;
        node_->values.assign(rows * cols, fill);
    }

    static Tensor scalar(Real v) {
        Tensor t(1, 1);
        t.node_->values[0] = v;
        return t;
    }

    static Tensor row(std::initializer_list<Real> vals) {
        Tensor t(1, vals.size());
        std::size_t i = 0;
        for (Real v : vals) t.node_->values[i++] = v;
        return t;
    }

    static Tensor column(std::initializer_list<Real> vals) {
        Tensor t(vals.size(), 1);
        std::size_t i = 0;
        for (Real v : vals) t.node_->values[i++] = v;
        return t;
    }

    static Tensor from(std::initializer_list<std::initializer_list<Real>> rows_list) {
        const std::size_t r = rows_list.size();
        const std::size_t c = r ? rows_list.begin()->size() : 0;
        Tensor t(r, c);
        std::size_t i = 0;
        for (const auto& row : rows_list) {
            if (row.size() != c) throw ShapeError("ragged initializer for Tensor::from");
            for (Real v : row) t.node_->values[i++] = v;
        }
        return t;
    }

    static Tensor from_vector(std::size_t rows, std::size_t cols, std::vector<Real> vals) {
        if (vals.size() != rows * cols)
            throw ShapeError("Tensor::from_vector: buffer length " + std::to_string(vals.size()) +
                             " does not match shape [" + std::to_string(rows) + "x" +
                             std::to_string(cols) + "]");
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->rows = rows;
        t.node_->cols = cols;
        t.node_->values = std::move(vals);
        return t;
    }

    static Tensor rand_uniform(Rng& rng, std::size_t rows, std::size_t cols, Real lo, Real hi) {
        Tensor t(rows, cols);
        for (auto& v : t.node_->values) v = static_cast<Real>(rng.uniform(lo, hi));
        return t;
    }

    static Tensor rand_normal(Rng& rng, std::size_t rows, std::size_t cols, Real mean, Real stddev) {
        Tensor t(rows, cols);
        for (auto& v : t.node_->values) v = static_cast<Real>(rng.normal(mean, stddev));
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    std::size_t rows() const { return node_->rows; }
    std::size_t cols() const { return node_->cols; }
    std::size_t size() const { return node_->size(); }
    std::vector<std::size_t> shape() const { return {rows(), cols()}; }

    std::string shape_str() const {
        return "[" + std::to_string(rows()) + "x" + std::to_string(cols()) + "]";
    }

    Real& at(std::size_t r, std::size_t c) { return node_->values[r * cols() + c]; }
    Real at(std::size_t r, std::size_t c) const { return node_->values[r * cols() + c]; }
    Real item() const {
        if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str());
        return node_->values[0];
    }

    std::vector<Real>& values() { return node_->values; }
    const std::vector<Real>& values() const { return node_->values; }
    std::vector<Real>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<Real>& grad() const { return node_->grad; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        node_->requires_grad = on;
        if (on) node_->ensure_grad();
        return *this;
    }

    void zero_grad() {
        if (node_) node_->grad.assign(node_->values.size(), Real(0));
    }

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& handle() const { return node_; }

    // Reverse-mode sweep from this scalar. Gradients accumulate into every
    // reachable node that requires grad; repeated calls without zeroing add up.
    void backward() const;

    friend struct Node;

private:
    std::shared_ptr<Node> node_;
};

// Iterative teardown: long op chains (training unrolls) would otherwise
// recurse through shared_ptr destructors and exhaust the stack.
inline Node::~Node() {
    std::vector<std::shared_ptr<Node>> work;
    for (auto& t : inputs)
        if (t.node_) work.push_back(std::move(t.node_));
    inputs.clear();
    while (!work.empty()) {
        std::shared_ptr<Node> n = std::move(work.back());
        work.pop_back();
        if (n && n.use_count() == 1) {
            for (auto& t : n->inputs)
                if (t.node_) work.push_back(std::move(t.node_));
            n->inputs.clear();
        }
    }
}

inline void Tensor::backward() const {
    if (!node_) throw ContractError("backward() on undefined tensor");
    if (node_->size() != 1)
        throw ContractError("backward() requires a scalar loss, got " + shape_str());

    // post-order DFS for a topological ordering of the grad-requiring subgraph
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->inputs.size()) {
            Node* child = n->inputs[idx].node();
            ++idx;
            if (child && child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    // Leaves accumulate across repeated backward calls; interior op nodes
    // are scratch space and start each sweep at zero.
    for (Node* n : order) {
        n->ensure_grad();
        if (n->backward_fn) std::fill(n->grad.begin(), n->grad.end(), Real(0));
    }
    node_->grad[0] += Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

namespace detail {

// Op-node constructor used by every operation in ops.hpp.
inline Tensor make_op(std::size_t rows, std::size_t cols, const char* op,
                      std::vector<Tensor> inputs, BackwardFn backward) {
    Tensor out(rows, cols);
    Node* n = out.node();
    n->op = op;
    if (grad_recording_flag()) {
        bool needs = false;
        for (const auto& in : inputs)
            if (in.requires_grad()) { needs = true; break; }
        if (needs) {
            n->requires_grad = true;
            n->inputs = std::move(inputs);
            n->backward_fn = std::move(backward);
        }
    }
    return out;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
}

} // namespace detail

} // namespace segnet
