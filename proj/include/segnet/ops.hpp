#pragma once

// Differentiable operations over rank-2 tensors. Forward semantics follow
// the standard definitions; every backward here is covered by the
// finite-difference harness in gradcheck.hpp.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "segnet/tensor.hpp"

namespace segnet {

using Mask = std::vector<std::uint8_t>; // nonzero = position is valid

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out = detail::make_op(a.rows(), a.cols(), "add", {a, b}, [](Node& n) {
        Node* a = n.inputs[0].node();
        Node* b = n.inputs[1].node();
        for (std::size_t i = 0; i < n.size(); ++i) {
            if (a->requires_grad) a->grad[i] += n.grad[i];
            if (b->requires_grad) b->grad[i] += n.grad[i];
        }
    });
    for (std::size_t i = 0; i < out.size(); ++i)
        out.values()[i] = a.values()[i] + b.values()[i];
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out = detail::make_op(a.rows(), a.cols(), "sub", {a, b}, [](Node& n) {
        Node* a = n.inputs[0].node();
        Node* b = n.inputs[1].node();
        for (std::size_t i = 0; i < n.size(); ++i) {
            if (a->requires_grad) a->grad[i] += n.grad[i];
            if (b->requires_grad) b->grad[i] -= n.grad[i];
        }
    });
    for (std::size_t i = 0; i < out.size(); ++i)
        out.values()[i] = a.values()[i] - b.values()[i];
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out = detail::make_op(a.rows(), a.cols(), "mul", {a, b}, [](Node& n) {
        Node* a = n.inputs[0].node();
        Node* b = n.inputs[1].node();
        for (std::size_t i = 0; i < n.size(); ++i) {
            if (a->requires_grad) a->grad[i] += n.grad[i] * b->values[i];
            if (b->requires_grad) b->grad[i] += n.grad[i] * a->values[i];
        }
    });
    for (std::size_t i = 0; i < out.size(); ++i)
        out.values()[i] = a.values()[i] * b.values()[i];
    return out;
}

inline Tensor scale(const Tensor& a, Real c) {
    Tensor out = detail::make_op(a.rows(), a.cols(), "scale", {a}, [c](Node& n) {
        Node* a = n.inputs[0].node();
        if (!a->requires_grad) return;
        for (std::size_t i = 0; i < n.size(); ++i) a->grad[i] += n.grad[i] * c;
    });
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a.values()[i] * c;
    return out;
}

inline Tensor neg(const Tensor& a) { return scale(a, Real(-1)); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// broadcast a 1xC row across every row of a
inline Tensor add_row(const Tensor& a, const Tensor& row) {
    if (row.rows() != 1 || row.cols() != a.cols())
        throw ShapeError("add_row: " + a.shape_str() + " with row " + row.shape_str());
    Tensor out = detail::make_op(a.rows(), a.cols(), "add_row", {a, row}, [](Node& n) {
        Node* a = n.inputs[0].node();
        Node* r = n.inputs[1].node();
        const std::size_t c = n.cols;
        for (std::size_t i = 0; i < n.size(); ++i) {
            if (a->requires_grad) a->grad[i] += n.grad[i];
            if (r->requires_grad) r->grad[i % c] += n.grad[i];
        }
    });
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c)
            out.at(r, c) = a.at(r, c) + row.at(0, c);
    return out;
}

// broadcast multiply by a 1x1 tensor (gradient flows into both factors)
inline Tensor mul_scalar(const Tensor& a, const Tensor& s) {
    if (s.size() != 1) throw ShapeError("mul_scalar: scalar operand is " + s.shape_str());
    Tensor out = detail::make_op(a.rows(), a.cols(), "mul_scalar", {a, s}, [](Node& n) {
        Node* a = n.inputs[0].node();
        Node* s = n.inputs[1].node();
        const Real sv = s->values[0];
        for (std::size_t i = 0; i < n.size(); ++i) {
            if (a->requires_grad) a->grad[i] += n.grad[i] * sv;
            if (s->requires_grad) s->grad[0] += n.grad[i] * a->values[i];
        }
    });
    const Real sv = s.values()[0];
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a.values()[i] * sv;
    return out;
}

// ------------------------------------------------------------------- matmul

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions disagree " + a.shape_str() + " x " +
                         b.shape_str());
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = detail::make_op(m, n, "matmul", {a, b}, [m, k, n](Node& o) {
        Node* a = o.inputs[0].node();
        Node* b = o.inputs[1].node();
        if (a->requires_grad) { // dA = dOut * B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const Real g = o.grad[i * n + j];
                    if (g == Real(0)) continue;
                    for (std::size_t p = 0; p < k; ++p)
                        a->grad[i * k + p] += g * b->values[p * n + j];
                }
        }
        if (b->requires_grad) { // dB = A^T * dOut
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const Real av = a->values[i * k + p];
                    if (av == Real(0)) continue;
                    for (std::size_t j = 0; j < n; ++j)
                        b->grad[p * n + j] += av * o.grad[i * n + j];
                }
        }
    });
    const Real* av = a.values().data();
    const Real* bv = b.values().data();
    Real* ov = out.values().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const Real x = av[i * k + p];
            if (x == Real(0)) continue;
            const Real* brow = bv + p * n;
            Real* orow = ov + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
        }
    return out;
}

// A * B^T without materializing the transpose
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols())
        throw ShapeError("matmul_nt: inner dimensions disagree " + a.shape_str() + " x " +
                         b.shape_str() + "^T");
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor out = detail::make_op(m, n, "matmul_nt", {a, b}, [m, k, n](Node& o) {
        Node* a = o.inputs[0].node();
        Node* b = o.inputs[1].node();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const Real g = o.grad[i * n + j];
                if (g == Real(0)) continue;
                for (std::size_t p = 0; p < k; ++p) {
                    if (a->requires_grad) a->grad[i * k + p] += g * b->values[j * k + p];
                    if (b->requires_grad) b->grad[j * k + p] += g * a->values[i * k + p];
                }
            }
    });
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            Real acc = 0;
            const Real* arow = a.values().data() + i * k;
            const Real* brow = b.values().data() + j * k;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            out.at(i, j) = acc;
        }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out = detail::make_op(n, m, "transpose", {a}, [m, n](Node& o) {
        Node* a = o.inputs[0].node();
        if (!a->requires_grad) return;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) a->grad[i * n + j] += o.grad[j * m + i];
    });
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

// -------------------------------------------------------------- nonlinearity

inline Tensor sigmoid(const Tensor& a) {
    Tensor out = detail::make_op(a.rows(), a.cols(), "sigmoid", {a}, [](Node& n) {
        Node* a = n.inputs[0].node();
        if (!a->requires_grad) return;
        for (std::size_t i = 0; i < n.size(); ++i) {
            const Real y = n.values[i];
            a->grad[i] += n.grad[i] * y * (Real(1) - y);
        }
    });
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Real x = a.values()[i];
        // stable in both tails
        out.values()[i] = x >= Real(0) ? Real(1) / (Real(1) + std::exp(-x))
                                       : std::exp(x) / (Real(1) + std::exp(x));
    }
    return out;
}

inline Tensor tanh_op(const Tensor& a) {
    Tensor out = detail::make_op(a.rows(), a.cols(), "tanh", {a}, [](Node& n) {
        Node* a = n.inputs[0].node();
        if (!a->requires_grad) return;
        for (std::size_t i = 0; i < n.size(); ++i) {
            const Real y = n.values[i];
            a->grad[i] += n.grad[i] * (Real(1) - y * y);
        }
    });
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = std::tanh(a.values()[i]);
    return out;
}

inline Tensor relu(const Tensor& a) {
    Tensor out = detail::make_op(a.rows(), a.cols(), "relu", {a}, [](Node& n) {
        Node* a = n.inputs[0].node();
        if (!a->requires_grad) return;
        for (std::size_t i = 0; i < n.size(); ++i)
            if (a->values[i] > Real(0)) a->grad[i] += n.grad[i];
    });
    for (std::size_t i = 0; i < out.size(); ++i)
        out.values()[i] = std::max(Real(0), a.values()[i]);
    return out;
}

inline Tensor exp_op(const Tensor& a) {
    Tensor out = detail::make_op(a.rows(), a.cols(), "exp", {a}, [](Node& n) {
        Node* a = n.inputs[0].node();
        if (!a->requires_grad) return;
        for (std::size_t i = 0; i < n.size(); ++i) a->grad[i] += n.grad[i] * n.values[i];
    });
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = std::exp(a.values()[i]);
    return out;
}

inline Tensor log_op(const Tensor& a) {
    Tensor out = detail::make_op(a.rows(), a.cols(), "log", {a}, [](Node& n) {
        Node* a = n.inputs[0].node();
        if (!a->requires_grad) return;
        for (std::size_t i = 0; i < n.size(); ++i) a->grad[i] += n.grad[i] / a->values[i];
    });
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = std::log(a.values()[i]);
    return out;
}

// pass-through gradient inside [lo, hi], zero outside
inline Tensor clamp(const Tensor& a, Real lo, Real hi) {
    Tensor out = detail::make_op(a.rows(), a.cols(), "clamp", {a}, [lo, hi](Node& n) {
        Node* a = n.inputs[0].node();
        if (!a->requires_grad) return;
        for (std::size_t i = 0; i < n.size(); ++i)
            if (a->values[i] >= lo && a->values[i] <= hi) a->grad[i] += n.grad[i];
    });
    for (std::size_t i = 0; i < out.size(); ++i)
        out.values()[i] = std::min(hi, std::max(lo, a.values()[i]));
    return out;
}

// elementwise maximum; the maxout activation is max over linear pieces
inline Tensor max_elem(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "max_elem");
    Tensor out = detail::make_op(a.rows(), a.cols(), "max_elem", {a, b}, [](Node& n) {
        Node* a = n.inputs[0].node();
        Node* b = n.inputs[1].node();
        for (std::size_t i = 0; i < n.size(); ++i) {
            // ties route to the first piece
            if (a->values[i] >= b->values[i]) {
                if (a->requires_grad) a->grad[i] += n.grad[i];
            } else if (b->requires_grad) {
                b->grad[i] += n.grad[i];
            }
        }
    });
    for (std::size_t i = 0; i < out.size(); ++i)
        out.values()[i] = std::max(a.values()[i], b.values()[i]);
    return out;
}

// ------------------------------------------------------------------ softmax

// Row softmax with optional validity mask; masked entries are exactly 0 and
// each row is stabilized by its max. A row with no valid entry is an error.
inline Tensor softmax_rows(const Tensor& x, const Mask* valid = nullptr) {
    if (valid && valid->size() != x.size())
        throw ShapeError("softmax_rows: mask length mismatch");
    const std::size_t m = x.rows(), n = x.cols();
    Mask mask_copy = valid ? *valid : Mask();
    Tensor out = detail::make_op(m, n, "softmax_rows", {x}, [m, n](Node& o) {
        Node* a = o.inputs[0].node();
        if (!a->requires_grad) return;
        for (std::size_t i = 0; i < m; ++i) {
            Real dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += o.grad[i * n + j] * o.values[i * n + j];
            for (std::size_t j = 0; j < n; ++j) {
                const Real y = o.values[i * n + j];
                a->grad[i * n + j] += y * (o.grad[i * n + j] - dot);
            }
        }
    });
    for (std::size_t i = 0; i < m; ++i) {
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (!valid || mask_copy[i * n + j]) mx = std::max(mx, x.at(i, j));
        if (mx == -std::numeric_limits<Real>::infinity())
            throw MaskError("softmax_rows: row " + std::to_string(i) + " is fully masked");
        Real sum = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (!valid || mask_copy[i * n + j]) {
                const Real e = std::exp(x.at(i, j) - mx);
                out.at(i, j) = e;
                sum += e;
            } else {
                out.at(i, j) = Real(0);
            }
        }
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= sum;
    }
    return out;
}

// ---------------------------------------------------------- shape reassembly

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const std::size_t c = parts[0].cols();
    std::size_t r = 0;
    for (const auto& p : parts) {
        if (p.cols() != c) throw ShapeError("concat_rows: column mismatch");
        r += p.rows();
    }
    Tensor out = detail::make_op(r, c, "concat_rows", parts, [c](Node& o) {
        std::size_t row0 = 0;
        for (auto& in : o.inputs) {
            Node* p = in.node();
            if (p->requires_grad)
                for (std::size_t i = 0; i < p->size(); ++i)
                    p->grad[i] += o.grad[row0 * c + i];
            row0 += p->rows;
        }
    });
    std::size_t row0 = 0;
    for (const auto& p : parts) {
        std::copy(p.values().begin(), p.values().end(), out.values().begin() + row0 * c);
        row0 += p.rows();
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t r = parts[0].rows();
    std::size_t c = 0;
    for (const auto& p : parts) {
        if (p.rows() != r) throw ShapeError("concat_cols: row mismatch");
        c += p.cols();
    }
    Tensor out = detail::make_op(r, c, "concat_cols", parts, [r, c](Node& o) {
        std::size_t col0 = 0;
        for (auto& in : o.inputs) {
            Node* p = in.node();
            if (p->requires_grad)
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < p->cols; ++j)
                        p->grad[i * p->cols + j] += o.grad[i * c + col0 + j];
            col0 += p->cols;
        }
    });
    std::size_t col0 = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) out.at(i, col0 + j) = p.at(i, j);
        col0 += p.cols();
    }
    return out;
}

// rows [r0, r1)
inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
    if (r0 >= r1 || r1 > a.rows())
        throw ShapeError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) +
                         ") of " + a.shape_str());
    const std::size_t c = a.cols();
    Tensor out = detail::make_op(r1 - r0, c, "slice_rows", {a}, [r0, c](Node& o) {
        Node* a = o.inputs[0].node();
        if (!a->requires_grad) return;
        for (std::size_t i = 0; i < o.size(); ++i) a->grad[r0 * c + i] += o.grad[i];
    });
    std::copy(a.values().begin() + r0 * c, a.values().begin() + r1 * c, out.values().begin());
    return out;
}

// ------------------------------------------------------------------ pooling

inline Tensor max_pool_rows(const Tensor& a) {
    const std::size_t m = a.rows(), n = a.cols();
    if (m == 0) throw ContractError("max_pool_rows: empty input");
    std::vector<std::size_t> arg(n, 0);
    Tensor out(1, n);
    for (std::size_t j = 0; j < n; ++j) {
        Real best = a.at(0, j);
        for (std::size_t i = 1; i < m; ++i)
            if (a.at(i, j) > best) { best = a.at(i, j); arg[j] = i; }
        out.at(0, j) = best;
    }
    Tensor wired = detail::make_op(1, n, "max_pool_rows", {a}, [arg, n](Node& o) {
        Node* a = o.inputs[0].node();
        if (!a->requires_grad) return;
        for (std::size_t j = 0; j < n; ++j) a->grad[arg[j] * n + j] += o.grad[j];
    });
    wired.values() = out.values();
    return wired;
}

inline Tensor mean_pool_rows(const Tensor& a) {
    const std::size_t m = a.rows(), n = a.cols();
    if (m == 0) throw ContractError("mean_pool_rows: empty input");
    Tensor out = detail::make_op(1, n, "mean_pool_rows", {a}, [m, n](Node& o) {
        Node* a = o.inputs[0].node();
        if (!a->requires_grad) return;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) a->grad[i * n + j] += o.grad[j] / Real(m);
    });
    for (std::size_t j = 0; j < n; ++j) {
        Real s = 0;
        for (std::size_t i = 0; i < m; ++i) s += a.at(i, j);
        out.at(0, j) = s / Real(m);
    }
    return out;
}

// ---------------------------------------------------------------- reductions

inline Tensor sum_all(const Tensor& a) {
    Tensor out = detail::make_op(1, 1, "sum_all", {a}, [](Node& o) {
        Node* a = o.inputs[0].node();
        if (!a->requires_grad) return;
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += o.grad[0];
    });
    Real s = 0;
    for (Real v : a.values()) s += v;
    out.values()[0] = s;
    return out;
}

inline Tensor mean_all(const Tensor& a) {
    const Real inv = Real(1) / Real(a.size());
    Tensor out = detail::make_op(1, 1, "mean_all", {a}, [inv](Node& o) {
        Node* a = o.inputs[0].node();
        if (!a->requires_grad) return;
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += o.grad[0] * inv;
    });
    Real s = 0;
    for (Real v : a.values()) s += v;
    out.values()[0] = s * inv;
    return out;
}

// out[t] = P[t][ids[t]]
inline Tensor pick_per_row(const Tensor& p, const std::vector<int>& ids) {
    const std::size_t m = p.rows(), n = p.cols();
    if (ids.size() != m) throw ShapeError("pick_per_row: ids length mismatch");
    for (int id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= n)
            throw ContractError("pick_per_row: index out of range");
    Tensor out = detail::make_op(m, 1, "pick_per_row", {p}, [ids, n](Node& o) {
        Node* a = o.inputs[0].node();
        if (!a->requires_grad) return;
        for (std::size_t t = 0; t < o.rows; ++t)
            a->grad[t * n + static_cast<std::size_t>(ids[t])] += o.grad[t];
    });
    for (std::size_t t = 0; t < m; ++t) out.at(t, 0) = p.at(t, static_cast<std::size_t>(ids[t]));
    return out;
}

// ---------------------------------------------------------------- embeddings

// Gather rows of an embedding table; backward scatter-adds.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    const std::size_t n = ids.size(), d = table.cols();
    for (int id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= table.rows())
            throw ContractError("gather_rows: id " + std::to_string(id) +
                                " outside table " + table.shape_str());
    Tensor out = detail::make_op(n, d, "gather_rows", {table}, [ids, d](Node& o) {
        Node* t = o.inputs[0].node();
        if (!t->requires_grad) return;
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < d; ++j)
                t->grad[static_cast<std::size_t>(ids[i]) * d + j] += o.grad[i * d + j];
    });
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
            out.at(i, j) = table.at(static_cast<std::size_t>(ids[i]), j);
    return out;
}

// ------------------------------------------------------------- convolution

// Valid 1-D convolution over time. x is [T x Cin]; w is [width*Cin x F]
// (filter taps stacked row-major); output is [T-width+1 x F].
inline Tensor conv1d_valid(const Tensor& x, const Tensor& w, std::size_t width) {
    const std::size_t T = x.rows(), cin = x.cols(), f = w.cols();
    if (w.rows() != width * cin)
        throw ShapeError("conv1d_valid: weight " + w.shape_str() + " incompatible with width " +
                         std::to_string(width) + " and Cin " + std::to_string(cin));
    if (T < width) throw ShapeError("conv1d_valid: input shorter than filter");
    const std::size_t to = T - width + 1;
    Tensor out = detail::make_op(to, f, "conv1d", {x, w}, [width, cin, f, to](Node& o) {
        Node* x = o.inputs[0].node();
        Node* w = o.inputs[1].node();
        for (std::size_t t = 0; t < to; ++t)
            for (std::size_t dx = 0; dx < width; ++dx)
                for (std::size_t c = 0; c < cin; ++c) {
                    const std::size_t xi = (t + dx) * cin + c;
                    const std::size_t wrow = dx * cin + c;
                    for (std::size_t j = 0; j < f; ++j) {
                        const Real g = o.grad[t * f + j];
                        if (x->requires_grad) x->grad[xi] += g * w->values[wrow * f + j];
                        if (w->requires_grad) w->grad[wrow * f + j] += g * x->values[xi];
                    }
                }
    });
    for (std::size_t t = 0; t < to; ++t)
        for (std::size_t dx = 0; dx < width; ++dx)
            for (std::size_t c = 0; c < cin; ++c) {
                const Real xv = x.at(t + dx, c);
                if (xv == Real(0)) continue;
                const std::size_t wrow = dx * cin + c;
                for (std::size_t j = 0; j < f; ++j) out.at(t, j) += xv * w.at(wrow, j);
            }
    return out;
}

// ------------------------------------------------------------ normalization

// Per-row layer normalization with learned gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         Real eps = Real(1e-5)) {
    const std::size_t m = x.rows(), n = x.cols();
    if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n)
        throw ShapeError("layer_norm: gamma/beta must be [1x" + std::to_string(n) + "]");
    std::vector<Real> inv_std(m), mean(m);
    for (std::size_t i = 0; i < m; ++i) {
        Real mu = 0;
        for (std::size_t j = 0; j < n; ++j) mu += x.at(i, j);
        mu /= Real(n);
        Real var = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const Real d = x.at(i, j) - mu;
            var += d * d;
        }
        var /= Real(n);
        mean[i] = mu;
        inv_std[i] = Real(1) / std::sqrt(var + eps);
    }
    Tensor out = detail::make_op(m, n, "layer_norm", {x, gamma, beta},
                                 [m, n, inv_std, mean](Node& o) {
        Node* x = o.inputs[0].node();
        Node* g = o.inputs[1].node();
        Node* b = o.inputs[2].node();
        for (std::size_t i = 0; i < m; ++i) {
            const Real is = inv_std[i];
            Real sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (std::size_t j = 0; j < n; ++j) {
                const Real xhat = (x->values[i * n + j] - mean[i]) * is;
                const Real dy = o.grad[i * n + j];
                const Real dxhat = dy * g->values[j];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                if (g->requires_grad) g->grad[j] += dy * xhat;
                if (b->requires_grad) b->grad[j] += dy;
            }
            if (x->requires_grad)
                for (std::size_t j = 0; j < n; ++j) {
                    const Real xhat = (x->values[i * n + j] - mean[i]) * is;
                    const Real dxhat = o.grad[i * n + j] * g->values[j];
                    x->grad[i * n + j] +=
                        is * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / Real(n));
                }
        }
    });
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out.at(i, j) = (x.at(i, j) - mean[i]) * inv_std[i] * gamma.at(0, j) + beta.at(0, j);
    return out;
}

// Batch normalization over rows (features are columns). Training mode
// normalizes by batch statistics and optionally folds them into the running
// buffers; inference mode applies the running statistics as a fixed affine.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         std::vector<Real>& running_mean, std::vector<Real>& running_var,
                         bool training, bool update_running, Real momentum = Real(0.1),
                         Real eps = Real(1e-5)) {
    const std::size_t m = x.rows(), n = x.cols();
    if (gamma.cols() != n || beta.cols() != n || running_mean.size() != n ||
        running_var.size() != n)
        throw ShapeError("batch_norm: feature width mismatch");
    if (m == 0) throw ContractError("batch_norm: empty batch");

    if (!training) {
        std::vector<Real> inv_std(n);
        for (std::size_t j = 0; j < n; ++j) inv_std[j] = Real(1) / std::sqrt(running_var[j] + eps);
        std::vector<Real> rm = running_mean;
        Tensor out = detail::make_op(m, n, "batch_norm_eval", {x, gamma, beta},
                                     [m, n, inv_std, rm](Node& o) {
            Node* x = o.inputs[0].node();
            Node* g = o.inputs[1].node();
            Node* b = o.inputs[2].node();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const Real dy = o.grad[i * n + j];
                    const Real xhat = (x->values[i * n + j] - rm[j]) * inv_std[j];
                    if (x->requires_grad) x->grad[i * n + j] += dy * g->values[j] * inv_std[j];
                    if (g->requires_grad) g->grad[j] += dy * xhat;
                    if (b->requires_grad) b->grad[j] += dy;
                }
        });
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                out.at(i, j) =
                    (x.at(i, j) - rm[j]) * inv_std[j] * gamma.at(0, j) + beta.at(0, j);
        return out;
    }

    std::vector<Real> mu(n, Real(0)), var(n, Real(0));
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < m; ++i) mu[j] += x.at(i, j);
        mu[j] /= Real(m);
        for (std::size_t i = 0; i < m; ++i) {
            const Real d = x.at(i, j) - mu[j];
            var[j] += d * d;
        }
        var[j] /= Real(m);
    }
    if (update_running) {
        for (std::size_t j = 0; j < n; ++j) {
            const Real unbiased = m > 1 ? var[j] * Real(m) / Real(m - 1) : var[j];
            running_mean[j] = (Real(1) - momentum) * running_mean[j] + momentum * mu[j];
            running_var[j] = (Real(1) - momentum) * running_var[j] + momentum * unbiased;
        }
    }
    std::vector<Real> inv_std(n);
    for (std::size_t j = 0; j < n; ++j) inv_std[j] = Real(1) / std::sqrt(var[j] + eps);
    Tensor out = detail::make_op(m, n, "batch_norm", {x, gamma, beta},
                                 [m, n, mu, inv_std](Node& o) {
        Node* x = o.inputs[0].node();
        Node* g = o.inputs[1].node();
        Node* b = o.inputs[2].node();
        for (std::size_t j = 0; j < n; ++j) {
            const Real is = inv_std[j];
            Real sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (std::size_t i = 0; i < m; ++i) {
                const Real xhat = (x->values[i * n + j] - mu[j]) * is;
                const Real dy = o.grad[i * n + j];
                const Real dxhat = dy * g->values[j];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                if (g->requires_grad) g->grad[j] += dy * xhat;
                if (b->requires_grad) b->grad[j] += dy;
            }
            if (x->requires_grad)
                for (std::size_t i = 0; i < m; ++i) {
                    const Real xhat = (x->values[i * n + j] - mu[j]) * is;
                    const Real dxhat = o.grad[i * n + j] * g->values[j];
                    x->grad[i * n + j] +=
                        is * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / Real(m));
                }
        }
    });
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out.at(i, j) = (x.at(i, j) - mu[j]) * inv_std[j] * gamma.at(0, j) + beta.at(0, j);
    return out;
}

// --------------------------------------------------- attention specials

// Relative-position logit term: out[i][j] = q_i . table[clip(j-i', k) + k]
// where i' = i + query_offset (nonzero during incremental decoding, when a
// single query row stands at absolute position query_offset).
inline Tensor relative_logits(const Tensor& q, const Tensor& table, int clip_k,
                              std::size_t key_len, long query_offset = 0) {
    const std::size_t m = q.rows(), d = q.cols(), n = key_len;
    if (table.rows() != static_cast<std::size_t>(2 * clip_k + 1) || table.cols() != d)
        throw ShapeError("relative_logits: table must be [" + std::to_string(2 * clip_k + 1) +
                         "x" + std::to_string(d) + "], got " + table.shape_str());
    auto offs = [clip_k, query_offset](std::size_t i, std::size_t j) {
        long rel = static_cast<long>(j) - (static_cast<long>(i) + query_offset);
        rel = std::max<long>(-clip_k, std::min<long>(clip_k, rel));
        return static_cast<std::size_t>(rel + clip_k);
    };
    Tensor out = detail::make_op(m, n, "relative_logits", {q, table}, [m, n, d, offs](Node& o) {
        Node* q = o.inputs[0].node();
        Node* t = o.inputs[1].node();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const Real g = o.grad[i * n + j];
                if (g == Real(0)) continue;
                const std::size_t r = offs(i, j);
                for (std::size_t p = 0; p < d; ++p) {
                    if (q->requires_grad) q->grad[i * d + p] += g * t->values[r * d + p];
                    if (t->requires_grad) t->grad[r * d + p] += g * q->values[i * d + p];
                }
            }
    });
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t r = offs(i, j);
            Real acc = 0;
            for (std::size_t p = 0; p < d; ++p) acc += q.at(i, p) * table.at(r, p);
            out.at(i, j) = acc;
        }
    return out;
}

// Relative-position value term: out[i] = sum_j alpha[i][j] table[clip(j-i',k)+k].
inline Tensor relative_values(const Tensor& alpha, const Tensor& table, int clip_k,
                              long query_offset = 0) {
    const std::size_t m = alpha.rows(), n = alpha.cols(), d = table.cols();
    if (table.rows() != static_cast<std::size_t>(2 * clip_k + 1))
        throw ShapeError("relative_values: table rows must be 2k+1");
    auto offs = [clip_k, query_offset](std::size_t i, std::size_t j) {
        long rel = static_cast<long>(j) - (static_cast<long>(i) + query_offset);
        rel = std::max<long>(-clip_k, std::min<long>(clip_k, rel));
        return static_cast<std::size_t>(rel + clip_k);
    };
    Tensor out = detail::make_op(m, d, "relative_values", {alpha, table}, [m, n, d, offs](Node& o) {
        Node* a = o.inputs[0].node();
        Node* t = o.inputs[1].node();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const std::size_t r = offs(i, j);
                for (std::size_t p = 0; p < d; ++p) {
                    const Real g = o.grad[i * d + p];
                    if (a->requires_grad) a->grad[i * n + j] += g * t->values[r * d + p];
                    if (t->requires_grad) t->grad[r * d + p] += g * a->values[i * n + j];
                }
            }
    });
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const Real av = alpha.at(i, j);
            if (av == Real(0)) continue;
            const std::size_t r = offs(i, j);
            for (std::size_t p = 0; p < d; ++p) out.at(i, p) += av * table.at(r, p);
        }
    return out;
}

namespace detail {
inline Real log_add_exp(Real a, Real b) {
    const Real hi = std::max(a, b), lo = std::min(a, b);
    if (hi == -std::numeric_limits<Real>::infinity()) return hi;
    return hi + std::log1p(std::exp(lo - hi));
}
} // namespace detail

// Coverage reweighting in log space. For teacher-forced decoding the raw
// encoder-decoder logits e[t][j] become g[t][j] = e[t][j] - M[t][j] where
// M[t][j] is the log of the accumulated exponentiated scores of steps
// before t (and 0 at t=0, matching the t=1 branch of the formula).
// softmax_rows(g) then yields exactly f_ij / sum_k f_ik.
inline Tensor coverage_shift(const Tensor& e) {
    const std::size_t m = e.rows(), n = e.cols();
    std::vector<Real> big_m(m * n);
    std::vector<Real> run(n, Real(0));
    for (std::size_t t = 0; t < m; ++t) {
        for (std::size_t j = 0; j < n; ++j) {
            big_m[t * n + j] = t == 0 ? Real(0) : run[j];
            run[j] = t == 0 ? e.at(0, j) : detail::log_add_exp(run[j], e.at(t, j));
        }
    }
    Tensor out = detail::make_op(m, n, "coverage_shift", {e}, [m, n, big_m](Node& o) {
        Node* a = o.inputs[0].node();
        if (!a->requires_grad) return;
        for (std::size_t t = 0; t < m; ++t)
            for (std::size_t j = 0; j < n; ++j) {
                const Real g = o.grad[t * n + j];
                if (g == Real(0)) continue;
                a->grad[t * n + j] += g;
                // dM[t][j]/de[k][j] = exp(e[k][j] - M[t][j]) for k < t
                for (std::size_t k = 0; k < t; ++k)
                    a->grad[k * n + j] -= g * std::exp(a->values[k * n + j] - big_m[t * n + j]);
            }
    });
    for (std::size_t i = 0; i < m * n; ++i) out.values()[i] = e.values()[i] - big_m[i];
    return out;
}

// Pointer-generator mixture over the copy-extended vocabulary.
//   out[t][v]            = (1 - gate[t]) * p_gen[t][v]         for v < V
//   out[t][ext_ids[i]]  += gate[t] * a[t][i]                    per source i
// ext_ids maps each source position to its column in the extended
// vocabulary (the word id for in-vocabulary words, V + oov index
// otherwise); repeated surface forms share a column, which realizes the
// sum over positions. Blocked positions must already carry a[t][i] == 0.
inline Tensor mix_copy(const Tensor& p_gen, const Tensor& a, const Tensor& gate,
                       const std::vector<int>& ext_ids, std::size_t ext_vocab) {
    const std::size_t t_steps = p_gen.rows(), v = p_gen.cols(), n = a.cols();
    if (a.rows() != t_steps || gate.rows() != t_steps || gate.cols() != 1)
        throw ShapeError("mix_copy: row mismatch between p_gen, a, gate");
    if (ext_ids.size() != n) throw ShapeError("mix_copy: ext_ids length mismatch");
    if (ext_vocab < v) throw ShapeError("mix_copy: extended vocab smaller than vocab");
    for (int id : ext_ids)
        if (id < 0 || static_cast<std::size_t>(id) >= ext_vocab)
            throw ContractError("mix_copy: extended id out of range");
    Tensor out = detail::make_op(t_steps, ext_vocab, "mix_copy", {p_gen, a, gate},
                                 [t_steps, v, n, ext_ids, ext_vocab](Node& o) {
        Node* pg = o.inputs[0].node();
        Node* pa = o.inputs[1].node();
        Node* gt = o.inputs[2].node();
        for (std::size_t t = 0; t < t_steps; ++t) {
            const Real g = gt->values[t];
            Real dgate = 0;
            for (std::size_t j = 0; j < v; ++j) {
                const Real dy = o.grad[t * ext_vocab + j];
                if (pg->requires_grad) pg->grad[t * v + j] += dy * (Real(1) - g);
                dgate -= dy * pg->values[t * v + j];
            }
            for (std::size_t i = 0; i < n; ++i) {
                const Real dy = o.grad[t * ext_vocab + static_cast<std::size_t>(ext_ids[i])];
                if (pa->requires_grad) pa->grad[t * n + i] += dy * g;
                dgate += dy * pa->values[t * n + i];
            }
            if (gt->requires_grad) gt->grad[t] += dgate;
        }
    });
    for (std::size_t t = 0; t < t_steps; ++t) {
        const Real g = gate.at(t, 0);
        for (std::size_t j = 0; j < v; ++j)
            out.at(t, j) = (Real(1) - g) * p_gen.at(t, j);
        for (std::size_t i = 0; i < n; ++i)
            out.at(t, static_cast<std::size_t>(ext_ids[i])) += g * a.at(t, i);
    }
    return out;
}

// Inverted dropout; identity when not training or rate is zero.
inline Tensor dropout(const Tensor& x, Real rate, Rng& rng, bool training) {
    if (!training || rate <= Real(0)) return x;
    if (rate >= Real(1)) throw ContractError("dropout: rate must be < 1");
    const Real keep = Real(1) - rate;
    std::vector<Real> mask(x.size());
    for (auto& mv : mask) mv = rng.uniform() < keep ? Real(1) / keep : Real(0);
    Tensor out = detail::make_op(x.rows(), x.cols(), "dropout", {x}, [mask](Node& o) {
        Node* a = o.inputs[0].node();
        if (!a->requires_grad) return;
        for (std::size_t i = 0; i < o.size(); ++i) a->grad[i] += o.grad[i] * mask[i];
    });
    for (std::size_t i = 0; i < x.size(); ++i) out.values()[i] = x.values()[i] * mask[i];
    return out;
}

} // namespace segnet
