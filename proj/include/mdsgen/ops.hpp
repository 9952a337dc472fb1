#pragma once

#include <algorithm>
#include <cmath>

#include "mdsgen/kernels.hpp"
#include "mdsgen/tensor.hpp"

namespace mds {

namespace detail {

inline TensorPtr make_out(std::vector<int> shape, std::initializer_list<TensorPtr> parents) {
    auto out = Tensor::create(std::move(shape));
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    out->requires_grad = rg;
    if (GradMode::enabled && rg)
        out->parents.assign(parents.begin(), parents.end());
    return out;
}

inline bool taped(const TensorPtr& out) {
    return GradMode::enabled && out->requires_grad;
}

inline void require_2d(const TensorPtr& t, const char* op) {
    if (t->ndim() != 2) throw ShapeError(std::string(op) + ": expected 2-D tensor");
}

// materialize a contiguous double buffer for a parent under PreciseMode
inline const double* dbuf(const TensorPtr& t, std::vector<double>& scratch) {
    if (!t->ddata.empty()) return t->ddata.data();
    scratch.resize(t->numel());
    for (size_t i = 0; i < t->numel(); ++i) scratch[i] = t->data[i];
    return scratch.data();
}

inline void sync_from_shadow(Tensor& out) {
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] = (float)out.ddata[i];
}

// elementwise shadow evaluation helpers
template <typename F>
inline void shadow_unary(const TensorPtr& a, const TensorPtr& out, F f) {
    out->ddata.resize(out->numel());
    for (size_t i = 0; i < out->numel(); ++i) out->ddata[i] = f(a->dval(i));
    sync_from_shadow(*out);
}

template <typename F>
inline void shadow_binary(const TensorPtr& a, const TensorPtr& b, const TensorPtr& out, F f) {
    out->ddata.resize(out->numel());
    for (size_t i = 0; i < out->numel(); ++i) out->ddata[i] = f(a->dval(i), b->dval(i));
    sync_from_shadow(*out);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    if (!a->same_shape(*b)) throw ShapeError("add: shape mismatch");
    auto out = detail::make_out(a->shape, {a, b});
    for (size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
    if (PreciseMode::enabled)
        detail::shadow_binary(a, b, out, [](double x, double y) { return x + y; });
    assert_finite(*out, "add");
    if (detail::taped(out))
        out->backward_fn = [a, b](Tensor& o) {
            if (a->requires_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < o.numel(); ++i) a->grad[i] += o.grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (size_t i = 0; i < o.numel(); ++i) b->grad[i] += o.grad[i];
            }
        };
    return out;
}

inline TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    if (!a->same_shape(*b)) throw ShapeError("sub: shape mismatch");
    auto out = detail::make_out(a->shape, {a, b});
    for (size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] - b->data[i];
    if (PreciseMode::enabled)
        detail::shadow_binary(a, b, out, [](double x, double y) { return x - y; });
    assert_finite(*out, "sub");
    if (detail::taped(out))
        out->backward_fn = [a, b](Tensor& o) {
            if (a->requires_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < o.numel(); ++i) a->grad[i] += o.grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (size_t i = 0; i < o.numel(); ++i) b->grad[i] -= o.grad[i];
            }
        };
    return out;
}

inline TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    if (!a->same_shape(*b)) throw ShapeError("mul: shape mismatch");
    auto out = detail::make_out(a->shape, {a, b});
    for (size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
    if (PreciseMode::enabled)
        detail::shadow_binary(a, b, out, [](double x, double y) { return x * y; });
    assert_finite(*out, "mul");
    if (detail::taped(out))
        out->backward_fn = [a, b](Tensor& o) {
            if (a->requires_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < o.numel(); ++i) a->grad[i] += o.grad[i] * b->data[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (size_t i = 0; i < o.numel(); ++i) b->grad[i] += o.grad[i] * a->data[i];
            }
        };
    return out;
}

inline TensorPtr scale(const TensorPtr& a, float s) {
    auto out = detail::make_out(a->shape, {a});
    for (size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * s;
    if (PreciseMode::enabled)
        detail::shadow_unary(a, out, [s](double x) { return x * (double)s; });
    assert_finite(*out, "scale");
    if (detail::taped(out))
        out->backward_fn = [a, s](Tensor& o) {
            a->ensure_grad();
            for (size_t i = 0; i < o.numel(); ++i) a->grad[i] += o.grad[i] * s;
        };
    return out;
}

inline TensorPtr add_scalar(const TensorPtr& a, float s) {
    auto out = detail::make_out(a->shape, {a});
    for (size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] + s;
    if (PreciseMode::enabled)
        detail::shadow_unary(a, out, [s](double x) { return x + (double)s; });
    assert_finite(*out, "add_scalar");
    if (detail::taped(out))
        out->backward_fn = [a](Tensor& o) {
            a->ensure_grad();
            for (size_t i = 0; i < o.numel(); ++i) a->grad[i] += o.grad[i];
        };
    return out;
}

inline TensorPtr exp_op(const TensorPtr& a) {
    auto out = detail::make_out(a->shape, {a});
    for (size_t i = 0; i < out->numel(); ++i) out->data[i] = std::exp(a->data[i]);
    if (PreciseMode::enabled)
        detail::shadow_unary(a, out, [](double x) { return std::exp(x); });
    assert_finite(*out, "exp");
    if (detail::taped(out))
        out->backward_fn = [a](Tensor& o) {
            a->ensure_grad();
            for (size_t i = 0; i < o.numel(); ++i) a->grad[i] += o.grad[i] * o.data[i];
        };
    return out;
}

// tanh-approximated GELU
inline TensorPtr gelu(const TensorPtr& a) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    auto out = detail::make_out(a->shape, {a});
    for (size_t i = 0; i < out->numel(); ++i) {
        float x = a->data[i];
        out->data[i] =
            0.5f * x * (1.0f + std::tanh((float)kC * (x + (float)kA * x * x * x)));
    }
    if (PreciseMode::enabled)
        detail::shadow_unary(a, out, [](double x) {
            return 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
        });
    assert_finite(*out, "gelu");
    if (detail::taped(out))
        out->backward_fn = [a](Tensor& o) {
            a->ensure_grad();
            for (size_t i = 0; i < o.numel(); ++i) {
                float x = a->data[i];
                float t = std::tanh((float)kC * (x + (float)kA * x * x * x));
                float d = 0.5f * (1.0f + t) +
                          0.5f * x * (1.0f - t * t) * (float)kC *
                              (1.0f + 3.0f * (float)kA * x * x);
                a->grad[i] += o.grad[i] * d;
            }
        };
    return out;
}

// ------------------------------------------------------------- row broadcasts
// Explicit broadcast of a length-n vector over the rows of an [m,n] matrix.

inline TensorPtr add_rowvec(const TensorPtr& x, const TensorPtr& v) {
    detail::require_2d(x, "add_rowvec");
    int m = x->shape[0], n = x->shape[1];
    if ((int)v->numel() != n) throw ShapeError("add_rowvec: vector length != cols");
    auto out = detail::make_out(x->shape, {x, v});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out->data[(size_t)i * n + j] = x->data[(size_t)i * n + j] + v->data[j];
    if (PreciseMode::enabled) {
        out->ddata.resize(out->numel());
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                out->ddata[(size_t)i * n + j] = x->dval((size_t)i * n + j) + v->dval(j);
        detail::sync_from_shadow(*out);
    }
    assert_finite(*out, "add_rowvec");
    if (detail::taped(out))
        out->backward_fn = [x, v, m, n](Tensor& o) {
            if (x->requires_grad) {
                x->ensure_grad();
                for (size_t i = 0; i < o.numel(); ++i) x->grad[i] += o.grad[i];
            }
            if (v->requires_grad) {
                v->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) v->grad[j] += o.grad[(size_t)i * n + j];
            }
        };
    return out;
}

inline TensorPtr mul_rowvec(const TensorPtr& x, const TensorPtr& v) {
    detail::require_2d(x, "mul_rowvec");
    int m = x->shape[0], n = x->shape[1];
    if ((int)v->numel() != n) throw ShapeError("mul_rowvec: vector length != cols");
    auto out = detail::make_out(x->shape, {x, v});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out->data[(size_t)i * n + j] = x->data[(size_t)i * n + j] * v->data[j];
    if (PreciseMode::enabled) {
        out->ddata.resize(out->numel());
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                out->ddata[(size_t)i * n + j] = x->dval((size_t)i * n + j) * v->dval(j);
        detail::sync_from_shadow(*out);
    }
    assert_finite(*out, "mul_rowvec");
    if (detail::taped(out))
        out->backward_fn = [x, v, m, n](Tensor& o) {
            if (x->requires_grad) {
                x->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        x->grad[(size_t)i * n + j] += o.grad[(size_t)i * n + j] * v->data[j];
            }
            if (v->requires_grad) {
                v->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        v->grad[j] += o.grad[(size_t)i * n + j] * x->data[(size_t)i * n + j];
            }
        };
    return out;
}

// --------------------------------------------------------------------- matmul

inline TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    int m = a->shape[0], k = a->shape[1];
    if (b->shape[0] != k) throw ShapeError("matmul: inner dimensions disagree");
    int n = b->shape[1];
    auto out = detail::make_out({m, n}, {a, b});
    kern::gemm_nn(m, k, n, a->data.data(), b->data.data(), out->data.data(), false);
    if (PreciseMode::enabled) {
        std::vector<double> sa, sb;
        out->ddata.assign(out->numel(), 0.0);
        kern::gemm_nn(m, k, n, detail::dbuf(a, sa), detail::dbuf(b, sb), out->ddata.data(),
                      false);
        detail::sync_from_shadow(*out);
    }
    assert_finite(*out, "matmul");
    if (detail::taped(out))
        out->backward_fn = [a, b, m, k, n](Tensor& o) {
            if (a->requires_grad) {
                a->ensure_grad();
                kern::gemm_nt(m, n, k, o.grad.data(), b->data.data(), a->grad.data(), true);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                kern::gemm_tn(k, m, n, a->data.data(), o.grad.data(), b->grad.data(), true);
            }
        };
    return out;
}

// a[m,k] * b[n,k]^T
inline TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b) {
    detail::require_2d(a, "matmul_nt");
    detail::require_2d(b, "matmul_nt");
    int m = a->shape[0], k = a->shape[1];
    if (b->shape[1] != k) throw ShapeError("matmul_nt: inner dimensions disagree");
    int n = b->shape[0];
    auto out = detail::make_out({m, n}, {a, b});
    kern::gemm_nt(m, k, n, a->data.data(), b->data.data(), out->data.data(), false);
    if (PreciseMode::enabled) {
        std::vector<double> sa, sb;
        out->ddata.assign(out->numel(), 0.0);
        kern::gemm_nt(m, k, n, detail::dbuf(a, sa), detail::dbuf(b, sb), out->ddata.data(),
                      false);
        detail::sync_from_shadow(*out);
    }
    assert_finite(*out, "matmul_nt");
    if (detail::taped(out))
        out->backward_fn = [a, b, m, k, n](Tensor& o) {
            if (a->requires_grad) {
                a->ensure_grad();
                kern::gemm_nn(m, n, k, o.grad.data(), b->data.data(), a->grad.data(), true);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                kern::gemm_tn(n, m, k, o.grad.data(), a->data.data(), b->grad.data(), true);
            }
        };
    return out;
}

// --------------------------------------------------------- slicing / indexing

inline TensorPtr slice_cols(const TensorPtr& x, int c0, int c1) {
    detail::require_2d(x, "slice_cols");
    int m = x->shape[0], n = x->shape[1];
    if (c0 < 0 || c1 > n || c0 >= c1) throw ShapeError("slice_cols: bad column range");
    int w = c1 - c0;
    auto out = detail::make_out({m, w}, {x});
    for (int i = 0; i < m; ++i)
        std::copy_n(x->data.data() + (size_t)i * n + c0, w, out->data.data() + (size_t)i * w);
    if (PreciseMode::enabled) {
        out->ddata.resize(out->numel());
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                out->ddata[(size_t)i * w + j] = x->dval((size_t)i * n + c0 + j);
        detail::sync_from_shadow(*out);
    }
    if (detail::taped(out))
        out->backward_fn = [x, c0, w, m, n](Tensor& o) {
            x->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < w; ++j)
                    x->grad[(size_t)i * n + c0 + j] += o.grad[(size_t)i * w + j];
        };
    return out;
}

inline TensorPtr concat_cols(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    int m = parts[0]->shape[0];
    int n = 0;
    bool rg = false;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat_cols");
        if (p->shape[0] != m) throw ShapeError("concat_cols: row count mismatch");
        n += p->shape[1];
        rg = rg || p->requires_grad;
    }
    auto out = Tensor::create({m, n});
    out->requires_grad = rg;
    if (GradMode::enabled && rg) out->parents = parts;
    if (PreciseMode::enabled) out->ddata.resize(out->numel());
    int off = 0;
    for (const auto& p : parts) {
        int w = p->shape[1];
        for (int i = 0; i < m; ++i) {
            std::copy_n(p->data.data() + (size_t)i * w, w,
                        out->data.data() + (size_t)i * n + off);
            if (PreciseMode::enabled)
                for (int j = 0; j < w; ++j)
                    out->ddata[(size_t)i * n + off + j] = p->dval((size_t)i * w + j);
        }
        off += w;
    }
    if (PreciseMode::enabled) detail::sync_from_shadow(*out);
    if (detail::taped(out))
        out->backward_fn = [parts, m, n](Tensor& o) {
            int off = 0;
            for (const auto& p : parts) {
                int w = p->shape[1];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                            p->grad[(size_t)i * w + j] += o.grad[(size_t)i * n + off + j];
                }
                off += w;
            }
        };
    return out;
}

inline TensorPtr gather_rows(const TensorPtr& x, std::vector<int> idx) {
    detail::require_2d(x, "gather_rows");
    int m = x->shape[0], n = x->shape[1];
    for (int i : idx)
        if (i < 0 || i >= m) throw ShapeError("gather_rows: index out of range");
    auto out = detail::make_out({(int)idx.size(), n}, {x});
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy_n(x->data.data() + (size_t)idx[r] * n, n, out->data.data() + r * n);
    if (PreciseMode::enabled) {
        out->ddata.resize(out->numel());
        for (size_t r = 0; r < idx.size(); ++r)
            for (int j = 0; j < n; ++j)
                out->ddata[r * (size_t)n + j] = x->dval((size_t)idx[r] * n + j);
        detail::sync_from_shadow(*out);
    }
    if (detail::taped(out))
        out->backward_fn = [x, idx, n](Tensor& o) {
            x->ensure_grad();
            for (size_t r = 0; r < idx.size(); ++r)
                for (int j = 0; j < n; ++j)
                    x->grad[(size_t)idx[r] * n + j] += o.grad[r * (size_t)n + j];
        };
    return out;
}

// Rows listed in idx come from `visible` (in order); every other row is a copy
// of the 1xD fill token.
inline TensorPtr scatter_rows_fill(const TensorPtr& visible, const std::vector<int>& idx,
                                   int total_rows, const TensorPtr& fill) {
    detail::require_2d(visible, "scatter_rows_fill");
    int n = visible->shape[1];
    if ((int)idx.size() != visible->shape[0])
        throw ShapeError("scatter_rows_fill: index count != visible rows");
    if ((int)fill->numel() != n) throw ShapeError("scatter_rows_fill: fill token width mismatch");
    auto out = detail::make_out({total_rows, n}, {visible, fill});
    std::vector<char> is_vis(total_rows, 0);
    for (int i : idx) {
        if (i < 0 || i >= total_rows) throw ShapeError("scatter_rows_fill: index out of range");
        is_vis[i] = 1;
    }
    for (int r = 0; r < total_rows; ++r)
        std::copy_n(fill->data.data(), n, out->data.data() + (size_t)r * n);
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy_n(visible->data.data() + r * (size_t)n, n,
                    out->data.data() + (size_t)idx[r] * n);
    if (PreciseMode::enabled) {
        out->ddata.resize(out->numel());
        for (int r = 0; r < total_rows; ++r)
            for (int j = 0; j < n; ++j) out->ddata[(size_t)r * n + j] = fill->dval(j);
        for (size_t r = 0; r < idx.size(); ++r)
            for (int j = 0; j < n; ++j)
                out->ddata[(size_t)idx[r] * n + j] = visible->dval(r * (size_t)n + j);
        detail::sync_from_shadow(*out);
    }
    if (detail::taped(out))
        out->backward_fn = [visible, fill, idx, is_vis, total_rows, n](Tensor& o) {
            if (visible->requires_grad) {
                visible->ensure_grad();
                for (size_t r = 0; r < idx.size(); ++r)
                    for (int j = 0; j < n; ++j)
                        visible->grad[r * (size_t)n + j] += o.grad[(size_t)idx[r] * n + j];
            }
            if (fill->requires_grad) {
                fill->ensure_grad();
                for (int r = 0; r < total_rows; ++r)
                    if (!is_vis[r])
                        for (int j = 0; j < n; ++j)
                            fill->grad[j] += o.grad[(size_t)r * n + j];
            }
        };
    return out;
}

// Pure metadata change; data copied, gradient passes through.
inline TensorPtr reshape(const TensorPtr& x, std::vector<int> shape) {
    size_t n = 1;
    for (int e : shape) n *= (size_t)e;
    if (n != x->numel()) throw ShapeError("reshape: element count mismatch");
    auto out = detail::make_out(std::move(shape), {x});
    out->data = x->data;
    if (PreciseMode::enabled && !x->ddata.empty()) out->ddata = x->ddata;
    if (detail::taped(out))
        out->backward_fn = [x](Tensor& o) {
            x->ensure_grad();
            for (size_t i = 0; i < o.numel(); ++i) x->grad[i] += o.grad[i];
        };
    return out;
}

// ----------------------------------------------------------------- reductions

inline TensorPtr sum(const TensorPtr& x) {
    auto out = detail::make_out({1}, {x});
    double acc = 0.0;
    for (size_t i = 0; i < x->numel(); ++i) acc += x->dval(i);
    out->data[0] = (float)acc;
    out->precise = acc;
    if (PreciseMode::enabled) out->ddata = {acc};
    assert_finite(*out, "sum");
    if (detail::taped(out))
        out->backward_fn = [x](Tensor& o) {
            x->ensure_grad();
            for (size_t i = 0; i < x->numel(); ++i) x->grad[i] += o.grad[0];
        };
    return out;
}

inline TensorPtr mean(const TensorPtr& x) {
    auto out = detail::make_out({1}, {x});
    double acc = 0.0;
    for (size_t i = 0; i < x->numel(); ++i) acc += x->dval(i);
    acc /= (double)x->numel();
    out->data[0] = (float)acc;
    out->precise = acc;
    if (PreciseMode::enabled) out->ddata = {acc};
    assert_finite(*out, "mean");
    if (detail::taped(out))
        out->backward_fn = [x](Tensor& o) {
            x->ensure_grad();
            float g = o.grad[0] / (float)x->numel();
            for (size_t i = 0; i < x->numel(); ++i) x->grad[i] += g;
        };
    return out;
}

// mean squared error over all elements
inline TensorPtr mse(const TensorPtr& a, const TensorPtr& b) {
    if (!a->same_shape(*b)) throw ShapeError("mse: shape mismatch");
    auto out = detail::make_out({1}, {a, b});
    double acc = 0.0;
    for (size_t i = 0; i < a->numel(); ++i) {
        double d = a->dval(i) - b->dval(i);
        acc += d * d;
    }
    acc /= (double)a->numel();
    out->data[0] = (float)acc;
    out->precise = acc;
    if (PreciseMode::enabled) out->ddata = {acc};
    assert_finite(*out, "mse");
    if (detail::taped(out))
        out->backward_fn = [a, b](Tensor& o) {
            float g = 2.0f * o.grad[0] / (float)a->numel();
            if (a->requires_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < a->numel(); ++i)
                    a->grad[i] += g * (a->data[i] - b->data[i]);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (size_t i = 0; i < a->numel(); ++i)
                    b->grad[i] -= g * (a->data[i] - b->data[i]);
            }
        };
    return out;
}

// --------------------------------------------------------------- nn primitives

// Layer norm over the last dimension; gain/bias have length D.
inline TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                            float eps = 1e-5f) {
    if (x->shape.empty()) throw ShapeError("layer_norm: scalar input");
    int d = x->shape.back();
    if (d == 0) throw ShapeError("layer_norm: zero feature dim");
    if ((int)gain->numel() != d || (int)bias->numel() != d)
        throw ShapeError("layer_norm: gain/bias length != last dim");
    if (eps <= 0.0f) throw ConfigError("layer_norm: eps must be > 0");
    size_t rows = x->numel() / d;
    auto out = detail::make_out(x->shape, {x, gain, bias});
    // cache per-row inv-std and normalized values for backward
    auto xhat = std::make_shared<std::vector<float>>(x->numel());
    auto istd = std::make_shared<std::vector<float>>(rows);
    for (size_t r = 0; r < rows; ++r) {
        const float* px = x->data.data() + r * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += px[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            double dv = px[j] - mu;
            var += dv * dv;
        }
        var /= d;
        float is = (float)(1.0 / std::sqrt(var + eps));
        (*istd)[r] = is;
        for (int j = 0; j < d; ++j) {
            float h = (float)((px[j] - mu) * is);
            (*xhat)[r * d + j] = h;
            out->data[r * d + j] = h * gain->data[j] + bias->data[j];
        }
    }
    if (PreciseMode::enabled) {
        out->ddata.resize(out->numel());
        for (size_t r = 0; r < rows; ++r) {
            double mu = 0.0;
            for (int j = 0; j < d; ++j) mu += x->dval(r * d + j);
            mu /= d;
            double var = 0.0;
            for (int j = 0; j < d; ++j) {
                double dv = x->dval(r * d + j) - mu;
                var += dv * dv;
            }
            var /= d;
            double is = 1.0 / std::sqrt(var + eps);
            for (int j = 0; j < d; ++j)
                out->ddata[r * d + j] =
                    (x->dval(r * d + j) - mu) * is * gain->dval(j) + bias->dval(j);
        }
        detail::sync_from_shadow(*out);
    }
    assert_finite(*out, "layer_norm");
    if (detail::taped(out))
        out->backward_fn = [x, gain, bias, xhat, istd, rows, d](Tensor& o) {
            for (size_t r = 0; r < rows; ++r) {
                const float* g = o.grad.data() + r * d;
                const float* h = xhat->data() + r * d;
                if (gain->requires_grad) {
                    gain->ensure_grad();
                    for (int j = 0; j < d; ++j) gain->grad[j] += g[j] * h[j];
                }
                if (bias->requires_grad) {
                    bias->ensure_grad();
                    for (int j = 0; j < d; ++j) bias->grad[j] += g[j];
                }
                if (x->requires_grad) {
                    x->ensure_grad();
                    double s1 = 0.0, s2 = 0.0;
                    for (int j = 0; j < d; ++j) {
                        float dh = g[j] * gain->data[j];
                        s1 += dh;
                        s2 += (double)dh * h[j];
                    }
                    s1 /= d;
                    s2 /= d;
                    float is = (*istd)[r];
                    float* gx = x->grad.data() + r * d;
                    for (int j = 0; j < d; ++j) {
                        float dh = g[j] * gain->data[j];
                        gx[j] += is * (dh - (float)s1 - h[j] * (float)s2);
                    }
                }
            }
        };
    return out;
}

// Numerically stabilized softmax over the last dimension.
inline TensorPtr softmax_lastdim(const TensorPtr& x) {
    if (x->shape.empty() || x->shape.back() == 0)
        throw ShapeError("softmax_lastdim: empty last dim");
    int d = x->shape.back();
    size_t rows = x->numel() / d;
    auto out = detail::make_out(x->shape, {x});
    for (size_t r = 0; r < rows; ++r) {
        const float* px = x->data.data() + r * d;
        float* po = out->data.data() + r * d;
        float mx = px[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, px[j]);
        double z = 0.0;
        for (int j = 0; j < d; ++j) {
            po[j] = std::exp(px[j] - mx);
            z += po[j];
        }
        float iz = (float)(1.0 / z);
        for (int j = 0; j < d; ++j) po[j] *= iz;
    }
    if (PreciseMode::enabled) {
        out->ddata.resize(out->numel());
        for (size_t r = 0; r < rows; ++r) {
            double mx = x->dval(r * d);
            for (int j = 1; j < d; ++j) mx = std::max(mx, x->dval(r * d + j));
            double z = 0.0;
            for (int j = 0; j < d; ++j) {
                out->ddata[r * d + j] = std::exp(x->dval(r * d + j) - mx);
                z += out->ddata[r * d + j];
            }
            for (int j = 0; j < d; ++j) out->ddata[r * d + j] /= z;
        }
        detail::sync_from_shadow(*out);
    }
    assert_finite(*out, "softmax_lastdim");
    if (detail::taped(out))
        out->backward_fn = [x, rows, d](Tensor& o) {
            x->ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                const float* p = o.data.data() + r * d;
                const float* g = o.grad.data() + r * d;
                double dot = 0.0;
                for (int j = 0; j < d; ++j) dot += (double)p[j] * g[j];
                float* gx = x->grad.data() + r * d;
                for (int j = 0; j < d; ++j) gx[j] += p[j] * (g[j] - (float)dot);
            }
        };
    return out;
}

// Standard scaled dot-product multi-head attention on [L, D] sequences.
inline TensorPtr attention(const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                           int heads) {
    detail::require_2d(q, "attention");
    if (!q->same_shape(*k) || !q->same_shape(*v))
        throw ShapeError("attention: q/k/v shapes differ");
    int d = q->shape[1];
    if (heads <= 0 || d % heads != 0)
        throw ConfigError("attention: model dim not divisible by heads");
    int dh = d / heads;
    float sc = 1.0f / std::sqrt((float)dh);
    std::vector<TensorPtr> outs;
    outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        auto qh = slice_cols(q, h * dh, (h + 1) * dh);
        auto kh = slice_cols(k, h * dh, (h + 1) * dh);
        auto vh = slice_cols(v, h * dh, (h + 1) * dh);
        auto att = softmax_lastdim(scale(matmul_nt(qh, kh), sc));
        outs.push_back(matmul(att, vh));
    }
    return heads == 1 ? outs[0] : concat_cols(outs);
}

// -------------------------------------------------------------- convolutions

namespace detail {

template <typename T>
inline void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride, int pad,
                   int ho, int wo, T* cols) {
    // cols: [c*kh*kw, ho*wo]
    int span = ho * wo;
    for (int ci = 0; ci < c; ++ci)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                T* dst = cols + (size_t)((ci * kh + ki) * kw + kj) * span;
                for (int oi = 0; oi < ho; ++oi) {
                    int ii = oi * stride + ki - pad;
                    for (int oj = 0; oj < wo; ++oj) {
                        int jj = oj * stride + kj - pad;
                        dst[oi * wo + oj] = (ii >= 0 && ii < h && jj >= 0 && jj < w)
                                                ? x[((size_t)ci * h + ii) * w + jj]
                                                : T(0);
                    }
                }
            }
}

inline void col2im_add(const float* cols, int c, int h, int w, int kh, int kw, int stride,
                       int pad, int ho, int wo, float* x) {
    int span = ho * wo;
    for (int ci = 0; ci < c; ++ci)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                const float* src = cols + (size_t)((ci * kh + ki) * kw + kj) * span;
                for (int oi = 0; oi < ho; ++oi) {
                    int ii = oi * stride + ki - pad;
                    if (ii < 0 || ii >= h) continue;
                    for (int oj = 0; oj < wo; ++oj) {
                        int jj = oj * stride + kj - pad;
                        if (jj >= 0 && jj < w)
                            x[((size_t)ci * h + ii) * w + jj] += src[oi * wo + oj];
                    }
                }
            }
}

}  // namespace detail

// x: [Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout]
inline TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride,
                        int pad) {
    if (x->ndim() != 3 || w->ndim() != 4)
        throw ShapeError("conv2d: expected [C,H,W] and [O,C,kh,kw]");
    int cin = x->shape[0], h = x->shape[1], wd = x->shape[2];
    int cout = w->shape[0], kh = w->shape[2], kw = w->shape[3];
    if (w->shape[1] != cin) throw ShapeError("conv2d: channel mismatch");
    if ((int)b->numel() != cout) throw ShapeError("conv2d: bias length mismatch");
    int ho = (h + 2 * pad - kh) / stride + 1;
    int wo = (wd + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: output collapses to zero");
    int kdim = cin * kh * kw, span = ho * wo;
    auto cols = std::make_shared<std::vector<float>>((size_t)kdim * span);
    detail::im2col(x->data.data(), cin, h, wd, kh, kw, stride, pad, ho, wo, cols->data());
    auto out = detail::make_out({cout, ho, wo}, {x, w, b});
    kern::gemm_nn(cout, kdim, span, w->data.data(), cols->data(), out->data.data(), false);
    for (int co = 0; co < cout; ++co) {
        float bv = b->data[co];
        float* po = out->data.data() + (size_t)co * span;
        for (int i = 0; i < span; ++i) po[i] += bv;
    }
    if (PreciseMode::enabled) {
        std::vector<double> sx, sw;
        const double* dx = detail::dbuf(x, sx);
        const double* dw = detail::dbuf(w, sw);
        std::vector<double> dcols((size_t)kdim * span);
        detail::im2col(dx, cin, h, wd, kh, kw, stride, pad, ho, wo, dcols.data());
        out->ddata.assign(out->numel(), 0.0);
        kern::gemm_nn(cout, kdim, span, dw, dcols.data(), out->ddata.data(), false);
        for (int co = 0; co < cout; ++co)
            for (int i = 0; i < span; ++i) out->ddata[(size_t)co * span + i] += b->dval(co);
        detail::sync_from_shadow(*out);
    }
    assert_finite(*out, "conv2d");
    if (detail::taped(out))
        out->backward_fn = [x, w, b, cols, cin, h, wd, cout, kh, kw, stride, pad, ho, wo,
                            kdim, span](Tensor& o) {
            if (b->requires_grad) {
                b->ensure_grad();
                for (int co = 0; co < cout; ++co) {
                    double acc = 0.0;
                    const float* g = o.grad.data() + (size_t)co * span;
                    for (int i = 0; i < span; ++i) acc += g[i];
                    b->grad[co] += (float)acc;
                }
            }
            if (w->requires_grad) {
                w->ensure_grad();
                kern::gemm_nt(cout, span, kdim, o.grad.data(), cols->data(), w->grad.data(),
                              true);
            }
            if (x->requires_grad) {
                x->ensure_grad();
                std::vector<float> dcols((size_t)kdim * span);
                kern::gemm_tn(kdim, cout, span, w->data.data(), o.grad.data(), dcols.data(),
                              false);
                detail::col2im_add(dcols.data(), cin, h, wd, kh, kw, stride, pad, ho, wo,
                                   x->grad.data());
            }
        };
    return out;
}

// nearest-neighbor 2x upsample of [C,H,W]
inline TensorPtr upsample2x(const TensorPtr& x) {
    if (x->ndim() != 3) throw ShapeError("upsample2x: expected [C,H,W]");
    int c = x->shape[0], h = x->shape[1], w = x->shape[2];
    auto out = detail::make_out({c, 2 * h, 2 * w}, {x});
    if (PreciseMode::enabled) out->ddata.resize(out->numel());
    for (int ci = 0; ci < c; ++ci)
        for (int i = 0; i < 2 * h; ++i)
            for (int j = 0; j < 2 * w; ++j) {
                size_t src = ((size_t)ci * h + i / 2) * w + j / 2;
                size_t dst = ((size_t)ci * 2 * h + i) * 2 * w + j;
                out->data[dst] = x->data[src];
                if (PreciseMode::enabled) out->ddata[dst] = x->dval(src);
            }
    if (PreciseMode::enabled) detail::sync_from_shadow(*out);
    if (detail::taped(out))
        out->backward_fn = [x, c, h, w](Tensor& o) {
            x->ensure_grad();
            for (int ci = 0; ci < c; ++ci)
                for (int i = 0; i < 2 * h; ++i)
                    for (int j = 0; j < 2 * w; ++j)
                        x->grad[((size_t)ci * h + i / 2) * w + j / 2] +=
                            o.grad[((size_t)ci * 2 * h + i) * 2 * w + j];
        };
    return out;
}

// ------------------------------------------------------------------ gradcheck

// Compares tape gradients of f() against central finite differences on up to
// max_coords_per_tensor coordinates of each parameter. The difference quotient
// is evaluated through the float64 shadow path (PreciseMode); relative error
// uses a unit floor in the denominator so near-zero gradients are judged on
// absolute error.
inline double grad_check(const std::function<TensorPtr()>& f,
                         const std::vector<TensorPtr>& params, double h, Rng& rng,
                         size_t max_coords_per_tensor = 64) {
    if (h < 1e-5 || h > 1e-2) throw ConfigError("grad_check: h outside [1e-5, 1e-2]");
    for (auto& p : params) p->zero_grad();
    auto loss = f();
    backward(loss);
    double worst = 0.0;
    for (auto& p : params) {
        p->ensure_grad();
        std::vector<size_t> coords;
        if (p->numel() <= max_coords_per_tensor) {
            coords.resize(p->numel());
            for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        } else {
            for (size_t i = 0; i < max_coords_per_tensor; ++i)
                coords.push_back(rng.randint(p->numel()));
        }
        NoGradGuard ng;
        PreciseGuard pg;
        for (auto& q : params) {
            q->ddata.assign(q->numel(), 0.0);
            for (size_t i = 0; i < q->numel(); ++i) q->ddata[i] = q->data[i];
        }
        for (size_t ci : coords) {
            double saved = p->ddata[ci];
            float savedf = p->data[ci];
            p->ddata[ci] = saved + h;
            p->data[ci] = (float)(saved + h);
            double fp = f()->item_precise();
            p->ddata[ci] = saved - h;
            p->data[ci] = (float)(saved - h);
            double fm = f()->item_precise();
            p->ddata[ci] = saved;
            p->data[ci] = savedf;
            double fd = (fp - fm) / (2.0 * h);
            double ad = p->grad[ci];
            double rel = std::abs(fd - ad) / std::max({std::abs(fd), std::abs(ad), 1.0});
            worst = std::max(worst, rel);
        }
        for (auto& q : params) q->ddata.clear();
    }
    return worst;
}

}  // namespace mds
