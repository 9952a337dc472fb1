#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "mdsgen/errors.hpp"
#include "mdsgen/rng.hpp"

namespace mds {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Global switch for tape recording; sampling/eval run under NoGradGuard so
// forward passes allocate no graph.
struct GradMode {
    static inline bool enabled = true;
};

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(GradMode::enabled) { GradMode::enabled = false; }
    ~NoGradGuard() { GradMode::enabled = prev; }
};

// When enabled, every op additionally evaluates a float64 shadow of its output
// (reading parents' shadows when present). grad_check runs its finite-difference
// evaluations under this mode; otherwise float32 rounding of intermediates
// swamps the difference quotient.
struct PreciseMode {
    static inline bool enabled = false;
};

struct PreciseGuard {
    bool prev;
    PreciseGuard() : prev(PreciseMode::enabled) { PreciseMode::enabled = true; }
    ~PreciseGuard() { PreciseMode::enabled = prev; }
};

// Dense row-major float32 tensor participating in a reverse-mode tape.
// Immutable after creation except for grad accumulation via backward().
class Tensor {
public:
    std::vector<int> shape;
    std::vector<float> data;
    std::vector<float> grad;  // allocated lazily, same length as data
    std::vector<double> ddata;  // float64 shadow, populated under PreciseMode
    bool requires_grad = false;

    // Reductions additionally keep their value in double; finite-difference
    // checks read this to avoid float32 cancellation in the loss itself.
    double precise = std::numeric_limits<double>::quiet_NaN();

    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backward_fn;

    static TensorPtr create(std::vector<int> shape, bool requires_grad = false) {
        auto t = std::make_shared<Tensor>();
        t->shape = std::move(shape);
        size_t n = 1;
        for (int e : t->shape) {
            if (e <= 0) throw ShapeError("non-positive extent");
            n *= (size_t)e;
        }
        t->data.assign(n, 0.0f);
        t->requires_grad = requires_grad;
        return t;
    }

    static TensorPtr from_data(std::vector<int> shape, std::vector<float> values,
                               bool requires_grad = false) {
        auto t = create(std::move(shape), requires_grad);
        if (values.size() != t->data.size()) throw ShapeError("data length != product(shape)");
        t->data = std::move(values);
        for (float v : t->data)
            if (!std::isfinite(v)) throw ValueError("non-finite value in tensor payload");
        return t;
    }

    static TensorPtr scalar(float v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    static TensorPtr randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f,
                           bool requires_grad = false) {
        auto t = create(std::move(shape), requires_grad);
        for (auto& v : t->data) v = (float)(rng.normal() * stddev);
        return t;
    }

    size_t numel() const { return data.size(); }
    int ndim() const { return (int)shape.size(); }
    int rows() const { return shape.size() == 2 ? shape[0] : throw ShapeError("rows() on non-2D"); }
    int cols() const { return shape.size() == 2 ? shape[1] : throw ShapeError("cols() on non-2D"); }
    float item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar");
        return data[0];
    }
    double item_precise() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar");
        if (!ddata.empty()) return ddata[0];
        return std::isnan(precise) ? (double)data[0] : precise;
    }

    // shadow-aware element read
    double dval(size_t i) const { return ddata.empty() ? (double)data[i] : ddata[i]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0f);
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline void assert_finite(const Tensor& t, const char* op) {
    for (float v : t.data)
        if (!std::isfinite(v)) throw ValueError(std::string("non-finite output of ") + op);
}

// Reverse topological order from root, then run the tape and free it.
inline void backward(const TensorPtr& root) {
    if (root->numel() != 1) throw ShapeError("backward() root must be scalar");
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> seen;
    std::vector<std::pair<TensorPtr, size_t>> stack;  // (node, next child index)
    std::vector<TensorPtr> keepalive;
    stack.push_back({root, 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorPtr child = node->parents[idx++];
            if (seen.insert(child.get()).second) stack.push_back({child, 0});
        } else {
            order.push_back(node.get());
            keepalive.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* t = *it;
        if (t->backward_fn) t->backward_fn(*t);
    }
    // explicit graph freeing: the step's intermediates die here
    for (Tensor* t : order) {
        t->parents.clear();
        t->backward_fn = nullptr;
    }
}

}  // namespace mds
