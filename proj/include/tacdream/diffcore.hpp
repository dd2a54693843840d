#pragma once

// Dense tensors with reverse-mode autodiff, the standard layers needed by the
// encoders/policy stack, AdamW, and the DTWT checkpoint format. Scalar type is
// a template parameter: float is the training path, double backs the
// finite-difference gradient tests.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tacdream/common.hpp"

namespace tacdream::diffcore {

// ---------------------------------------------------------------------------
// grad mode
// ---------------------------------------------------------------------------

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGrad {
    NoGrad() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGrad() { grad_mode_flag() = prev_; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;
private:
    bool prev_;
};

// ---------------------------------------------------------------------------
// tensor node
// ---------------------------------------------------------------------------

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += "x";
    }
    return out + "]";
}

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;     // allocated lazily, same length as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // reads self.grad, accumulates into parents

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
    for (const T& x : v) {
        if (!std::isfinite(double(x))) {
            TD_CHECK(false, std::string("non-finite value produced by op '") + op + "'");
        }
    }
}

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return make(std::move(shape), {}, requires_grad, T(0));
    }
    static Tensor full(Shape shape, T fill, bool requires_grad = false) {
        return make(std::move(shape), {}, requires_grad, fill);
    }
    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        TD_CHECK(shape_numel(shape) == data.size(),
                 "from_data: shape " + shape_str(shape) + " does not match data length " +
                     std::to_string(data.size()));
        Tensor t;
        t.n_ = std::make_shared<Node<T>>();
        t.n_->shape = std::move(shape);
        t.n_->value = std::move(data);
        t.n_->requires_grad = requires_grad;
        return t;
    }
    static Tensor scalar(T v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }
    static Tensor randn(Shape shape, Rng& rng, T stddev, bool requires_grad = false) {
        std::vector<T> d(shape_numel(shape));
        for (auto& x : d) x = T(rng.normal()) * stddev;
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    size_t numel() const { return n_->value.size(); }
    size_t rank() const { return n_->shape.size(); }
    size_t rows() const { return n_->shape.size() == 1 ? 1 : n_->shape[0]; }
    size_t cols() const { return n_->shape.back(); }
    bool requires_grad() const { return n_->requires_grad; }

    std::vector<T>& value() { return n_->value; }
    const std::vector<T>& value() const { return n_->value; }
    std::vector<T>& grad() { n_->ensure_grad(); return n_->grad; }
    const std::vector<T>& grad_raw() const { return n_->grad; }

    T item() const {
        TD_CHECK(numel() == 1, "item() requires a scalar tensor");
        return n_->value[0];
    }

    void zero_grad() { if (n_) n_->grad.assign(n_->value.size(), T(0)); }

    Tensor detach() const {
        return from_data(n_->shape, n_->value, false);
    }

    // reverse-mode sweep from a scalar; reverse DFS postorder gives the
    // deterministic topological order
    void backward() {
        TD_CHECK(numel() == 1, "backward() requires a scalar loss");
        TD_CHECK(n_->requires_grad, "backward() on a tensor with no grad path");
        std::vector<Node<T>*> order;
        std::unordered_set<Node<T>*> seen;
        std::vector<std::pair<Node<T>*, size_t>> stack;
        stack.emplace_back(n_.get(), 0);
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Node<T>* p = node->parents[idx++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        n_->ensure_grad();
        n_->grad[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node<T>* node = *it;
            if (node->backward_fn) node->backward_fn(*node);
        }
    }

    std::shared_ptr<Node<T>> node() const { return n_; }

    static Tensor adopt(std::shared_ptr<Node<T>> n) {
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

private:
    static Tensor make(Shape shape, std::vector<T>, bool requires_grad, T fill) {
        Tensor t;
        t.n_ = std::make_shared<Node<T>>();
        t.n_->value.assign(shape_numel(shape), fill);
        t.n_->shape = std::move(shape);
        t.n_->requires_grad = requires_grad;
        return t;
    }

    std::shared_ptr<Node<T>> n_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

template <typename T>
Tensor<T> result(Shape shape, const char* op,
                 std::initializer_list<Tensor<T>> inputs,
                 std::function<void(Node<T>&)> backward_fn) {
    auto t = Tensor<T>::zeros(std::move(shape), false);
    auto n = t.node();
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
        n->requires_grad = true;
        for (const auto& in : inputs) n->parents.push_back(in.node());
        n->backward_fn = std::move(backward_fn);
    }
    (void)op;
    return t;
}

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void mm_acc(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        T* ci = c + i * n;
        const T* ai = a + i * k;
        for (size_t p = 0; p < k; ++p) {
            const T av = ai[p];
            const T* bp = b + p * n;
            for (size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <typename T>
void mmnt_acc(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        T* ci = c + i * n;
        for (size_t j = 0; j < n; ++j) {
            const T* bj = b + j * k;
            T s = 0;
            for (size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] += s;
        }
    }
}

// C[k x n] += A[m x k]^T * B[m x n]
template <typename T>
void mmtn_acc(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        const T* bi = b + i * n;
        for (size_t p = 0; p < k; ++p) {
            const T av = ai[p];
            T* cp = c + p * n;
            for (size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    TD_CHECK(a.rank() == 2 && b.rank() == 2, "matmul expects 2-D tensors");
    const size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    TD_CHECK(b.shape()[0] == k, "matmul: inner dims disagree " + shape_str(a.shape()) + " * " +
                                    shape_str(b.shape()));
    auto an = a.node(), bn = b.node();
    auto out = detail::result<T>({m, n}, "matmul", {a, b}, [an, bn, m, k, n](Node<T>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            detail::mmnt_acc(self.grad.data(), bn->value.data(), an->grad.data(), m, n, k);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            detail::mmtn_acc(an->value.data(), self.grad.data(), bn->grad.data(), m, k, n);
        }
    });
    detail::mm_acc(an->value.data(), bn->value.data(), out.value().data(), m, k, n);
    check_finite(out.value(), "matmul");
    return out;
}

// a [m x k] * b[n x k]^T -> [m x n]
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    TD_CHECK(a.rank() == 2 && b.rank() == 2, "matmul_nt expects 2-D tensors");
    const size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    TD_CHECK(b.shape()[1] == k, "matmul_nt: inner dims disagree");
    auto an = a.node(), bn = b.node();
    auto out = detail::result<T>({m, n}, "matmul_nt", {a, b}, [an, bn, m, k, n](Node<T>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            detail::mm_acc(self.grad.data(), bn->value.data(), an->grad.data(), m, n, k);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            detail::mmtn_acc(self.grad.data(), an->value.data(), bn->grad.data(), m, n, k);
        }
    });
    detail::mmnt_acc(an->value.data(), bn->value.data(), out.value().data(), m, k, n);
    check_finite(out.value(), "matmul_nt");
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    TD_CHECK(a.shape() == b.shape(), "add: shape mismatch");
    auto an = a.node(), bn = b.node();
    auto out = detail::result<T>(a.shape(), "add", {a, b}, [an, bn](Node<T>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
        }
    });
    for (size_t i = 0; i < out.numel(); ++i) out.value()[i] = an->value[i] + bn->value[i];
    check_finite(out.value(), "add");
    return out;
}

// a [m x n] + row [n], broadcast over the leading dim
template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row) {
    const size_t n = a.cols(), m = a.numel() / n;
    TD_CHECK(row.numel() == n, "add_row: width mismatch");
    auto an = a.node(), rn = row.node();
    auto out = detail::result<T>(a.shape(), "add_row", {a, row}, [an, rn, m, n](Node<T>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (rn->requires_grad) {
            rn->ensure_grad();
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < n; ++j) rn->grad[j] += self.grad[i * n + j];
        }
    });
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out.value()[i * n + j] = an->value[i * n + j] + rn->value[j];
    check_finite(out.value(), "add_row");
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    TD_CHECK(a.shape() == b.shape(), "sub: shape mismatch");
    auto an = a.node(), bn = b.node();
    auto out = detail::result<T>(a.shape(), "sub", {a, b}, [an, bn](Node<T>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
        }
    });
    for (size_t i = 0; i < out.numel(); ++i) out.value()[i] = an->value[i] - bn->value[i];
    check_finite(out.value(), "sub");
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    TD_CHECK(a.shape() == b.shape(), "mul: shape mismatch");
    auto an = a.node(), bn = b.node();
    auto out = detail::result<T>(a.shape(), "mul", {a, b}, [an, bn](Node<T>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
        }
    });
    for (size_t i = 0; i < out.numel(); ++i) out.value()[i] = an->value[i] * bn->value[i];
    check_finite(out.value(), "mul");
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    auto an = a.node();
    auto out = detail::result<T>(a.shape(), "scale", {a}, [an, s](Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * s;
    });
    for (size_t i = 0; i < out.numel(); ++i) out.value()[i] = an->value[i] * s;
    check_finite(out.value(), "scale");
    return out;
}

// elementwise sqrt(x + eps); eps keeps the derivative finite at zero
template <typename T>
Tensor<T> sqrt_eps(const Tensor<T>& a, T eps) {
    auto an = a.node();
    auto out = detail::result<T>(a.shape(), "sqrt_eps", {a}, [an](Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i] * T(0.5) / self.value[i];
    });
    for (size_t i = 0; i < out.numel(); ++i) out.value()[i] = std::sqrt(an->value[i] + eps);
    check_finite(out.value(), "sqrt_eps");
    return out;
}

// multiply by a learnable scalar (1-element tensor)
template <typename T>
Tensor<T> scale_by_scalar(const Tensor<T>& a, const Tensor<T>& s) {
    TD_CHECK(s.numel() == 1, "scale_by_scalar: scale must be a 1-element tensor");
    auto an = a.node(), sn = s.node();
    auto out = detail::result<T>(a.shape(), "scale_by_scalar", {a, s}, [an, sn](Node<T>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            const T sv = sn->value[0];
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * sv;
        }
        if (sn->requires_grad) {
            sn->ensure_grad();
            T acc = 0;
            for (size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * an->value[i];
            sn->grad[0] += acc;
        }
    });
    const T sv = sn->value[0];
    for (size_t i = 0; i < out.numel(); ++i) out.value()[i] = an->value[i] * sv;
    check_finite(out.value(), "scale_by_scalar");
    return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    auto an = a.node();
    auto out = detail::result<T>(a.shape(), "gelu", {a}, [an](Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        constexpr double inv_sqrt2 = 0.7071067811865476;
        constexpr double inv_sqrt2pi = 0.3989422804014327;
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const double x = double(an->value[i]);
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            an->grad[i] += self.grad[i] * T(cdf + x * pdf);
        }
    });
    constexpr double inv_sqrt2 = 0.7071067811865476;
    for (size_t i = 0; i < out.numel(); ++i) {
        const double x = double(an->value[i]);
        out.value()[i] = T(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
    }
    check_finite(out.value(), "gelu");
    return out;
}

template <typename T>
Tensor<T> absval(const Tensor<T>& a) {
    auto an = a.node();
    auto out = detail::result<T>(a.shape(), "absval", {a}, [an](Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const T x = an->value[i];
            an->grad[i] += self.grad[i] * (x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)));
        }
    });
    for (size_t i = 0; i < out.numel(); ++i) out.value()[i] = std::abs(an->value[i]);
    return out;
}

// softmax along the last dim of a 2-D tensor, stabilized by max subtraction
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
    const size_t n = a.cols(), m = a.numel() / n;
    auto an = a.node();
    auto out = detail::result<T>(a.shape(), "softmax", {a}, [an, m, n](Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < m; ++i) {
            const T* y = self.value.data() + i * n;
            const T* dy = self.grad.data() + i * n;
            T dot = 0;
            for (size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
            T* dx = an->grad.data() + i * n;
            for (size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
    });
    for (size_t i = 0; i < m; ++i) {
        const T* x = an->value.data() + i * n;
        T* y = out.value().data() + i * n;
        T mx = x[0];
        for (size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        T sum = 0;
        for (size_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        const T inv = T(1) / sum;
        for (size_t j = 0; j < n; ++j) y[j] *= inv;
    }
    check_finite(out.value(), "softmax");
    return out;
}

// per-row layer norm with affine parameters
template <typename T>
Tensor<T> layernorm_rows(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias,
                         T eps = T(1e-5)) {
    const size_t n = a.cols(), m = a.numel() / n;
    TD_CHECK(gain.numel() == n && bias.numel() == n, "layernorm: affine width mismatch");
    auto an = a.node(), gn = gain.node(), bn = bias.node();
    auto xhat = std::make_shared<std::vector<T>>(m * n);
    auto istd = std::make_shared<std::vector<T>>(m);
    auto out = detail::result<T>(a.shape(), "layernorm", {a, gain, bias},
                                 [an, gn, bn, xhat, istd, m, n](Node<T>& self) {
        for (size_t i = 0; i < m; ++i) {
            const T* dy = self.grad.data() + i * n;
            const T* xh = xhat->data() + i * n;
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (size_t j = 0; j < n; ++j) gn->grad[j] += dy[j] * xh[j];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t j = 0; j < n; ++j) bn->grad[j] += dy[j];
            }
            if (an->requires_grad) {
                an->ensure_grad();
                T sum_g = 0, sum_gx = 0;
                for (size_t j = 0; j < n; ++j) {
                    const T g = dy[j] * gn->value[j];
                    sum_g += g;
                    sum_gx += g * xh[j];
                }
                const T inv_n = T(1) / T(n);
                T* dx = an->grad.data() + i * n;
                for (size_t j = 0; j < n; ++j) {
                    const T g = dy[j] * gn->value[j];
                    dx[j] += (*istd)[i] * (g - inv_n * sum_g - xh[j] * inv_n * sum_gx);
                }
            }
        }
    });
    for (size_t i = 0; i < m; ++i) {
        const T* x = an->value.data() + i * n;
        T mean = 0;
        for (size_t j = 0; j < n; ++j) mean += x[j];
        mean /= T(n);
        T var = 0;
        for (size_t j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
        var /= T(n);
        const T is = T(1) / std::sqrt(var + eps);
        (*istd)[i] = is;
        T* xh = xhat->data() + i * n;
        T* y = out.value().data() + i * n;
        for (size_t j = 0; j < n; ++j) {
            xh[j] = (x[j] - mean) * is;
            y[j] = xh[j] * gn->value[j] + bn->value[j];
        }
    }
    check_finite(out.value(), "layernorm");
    return out;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double p, bool training, Rng& rng) {
    TD_CHECK(p >= 0.0 && p < 1.0, "dropout: p must be in [0,1)");
    if (!training || p == 0.0) return a;
    auto an = a.node();
    auto mask = std::make_shared<std::vector<T>>(a.numel());
    const T keep_scale = T(1.0 / (1.0 - p));
    for (auto& mv : *mask) mv = (rng.uniform() < p) ? T(0) : keep_scale;
    auto out = detail::result<T>(a.shape(), "dropout", {a}, [an, mask](Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * (*mask)[i];
    });
    for (size_t i = 0; i < out.numel(); ++i) out.value()[i] = an->value[i] * (*mask)[i];
    return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    TD_CHECK(!parts.empty(), "concat_rows: empty input");
    const size_t n = parts[0].cols();
    size_t m = 0;
    for (const auto& p : parts) {
        TD_CHECK(p.cols() == n, "concat_rows: width mismatch");
        m += p.numel() / n;
    }
    auto out = Tensor<T>::zeros({m, n}, false);
    auto on = out.node();
    size_t off = 0;
    bool needs = false;
    std::vector<std::pair<std::shared_ptr<Node<T>>, size_t>> spans;
    for (const auto& p : parts) {
        auto pn = p.node();
        std::copy(pn->value.begin(), pn->value.end(), on->value.begin() + off);
        spans.emplace_back(pn, off);
        off += pn->value.size();
        needs = needs || p.requires_grad();
    }
    if (grad_enabled() && needs) {
        on->requires_grad = true;
        for (const auto& p : parts) on->parents.push_back(p.node());
        on->backward_fn = [spans](Node<T>& self) {
            for (const auto& [pn, start] : spans) {
                if (!pn->requires_grad) continue;
                pn->ensure_grad();
                for (size_t i = 0; i < pn->value.size(); ++i) pn->grad[i] += self.grad[start + i];
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, size_t r0, size_t r1) {
    const size_t n = a.cols(), m = a.numel() / n;
    TD_CHECK(r0 < r1 && r1 <= m, "slice_rows: bad range");
    auto an = a.node();
    auto out = detail::result<T>({r1 - r0, n}, "slice_rows", {a}, [an, r0, n](Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[r0 * n + i] += self.grad[i];
    });
    std::copy(an->value.begin() + r0 * n, an->value.begin() + r1 * n, out.value().begin());
    return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, size_t c0, size_t c1) {
    const size_t n = a.cols(), m = a.numel() / n;
    TD_CHECK(c0 < c1 && c1 <= n, "slice_cols: bad range");
    const size_t w = c1 - c0;
    auto an = a.node();
    auto out = detail::result<T>({m, w}, "slice_cols", {a}, [an, c0, w, n, m](Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < w; ++j) an->grad[i * n + c0 + j] += self.grad[i * w + j];
    });
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < w; ++j) out.value()[i * w + j] = an->value[i * n + c0 + j];
    return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    TD_CHECK(!parts.empty(), "concat_cols: empty input");
    const size_t m = parts[0].rows();
    size_t n = 0;
    for (const auto& p : parts) {
        TD_CHECK(p.rows() == m, "concat_cols: height mismatch");
        n += p.cols();
    }
    auto out = Tensor<T>::zeros({m, n}, false);
    auto on = out.node();
    bool needs = false;
    size_t coff = 0;
    std::vector<std::tuple<std::shared_ptr<Node<T>>, size_t, size_t>> spans;
    for (const auto& p : parts) {
        auto pn = p.node();
        const size_t w = p.cols();
        for (size_t i = 0; i < m; ++i)
            std::copy(pn->value.begin() + i * w, pn->value.begin() + (i + 1) * w,
                      on->value.begin() + i * n + coff);
        spans.emplace_back(pn, coff, w);
        coff += w;
        needs = needs || p.requires_grad();
    }
    if (grad_enabled() && needs) {
        on->requires_grad = true;
        for (const auto& p : parts) on->parents.push_back(p.node());
        on->backward_fn = [spans, m, n](Node<T>& self) {
            for (const auto& [pn, start, w] : spans) {
                if (!pn->requires_grad) continue;
                pn->ensure_grad();
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < w; ++j) pn->grad[i * w + j] += self.grad[i * n + start + j];
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    TD_CHECK(shape_numel(shape) == a.numel(), "reshape: numel mismatch");
    auto an = a.node();
    auto out = detail::result<T>(std::move(shape), "reshape", {a}, [an](Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
    out.value() = an->value;
    return out;
}

template <typename T>
Tensor<T> rows_select(const Tensor<T>& a, const std::vector<size_t>& idx) {
    const size_t n = a.cols(), m = a.numel() / n;
    TD_CHECK(!idx.empty(), "rows_select: empty selection");
    for (size_t r : idx) TD_CHECK(r < m, "rows_select: index out of range");
    auto an = a.node();
    auto ids = std::make_shared<std::vector<size_t>>(idx);
    auto out = detail::result<T>({idx.size(), n}, "rows_select", {a}, [an, ids, n](Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < ids->size(); ++i)
            for (size_t j = 0; j < n; ++j) an->grad[(*ids)[i] * n + j] += self.grad[i * n + j];
    });
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy(an->value.begin() + idx[i] * n, an->value.begin() + (idx[i] + 1) * n,
                  out.value().begin() + i * n);
    return out;
}

// mean over the leading dim -> [1 x n]
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& a) {
    const size_t n = a.cols(), m = a.numel() / n;
    auto an = a.node();
    auto out = detail::result<T>({1, n}, "mean_rows", {a}, [an, m, n](Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const T inv = T(1) / T(m);
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) an->grad[i * n + j] += self.grad[j] * inv;
    });
    const T inv = T(1) / T(m);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out.value()[j] += an->value[i * n + j] * inv;
    check_finite(out.value(), "mean_rows");
    return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    auto an = a.node();
    auto out = detail::result<T>({1}, "sum_all", {a}, [an](Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += self.grad[0];
    });
    T s = 0;
    for (const T& v : an->value) s += v;
    out.value()[0] = s;
    check_finite(out.value(), "sum_all");
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return scale(sum_all(a), T(1) / T(a.numel()));
}

// sum of the elementwise product; the building block for dot products and
// cosine numerators
template <typename T>
Tensor<T> dot_all(const Tensor<T>& a, const Tensor<T>& b) {
    TD_CHECK(a.numel() == b.numel(), "dot_all: size mismatch");
    auto an = a.node(), bn = b.node();
    auto out = detail::result<T>({1}, "dot_all", {a, b}, [an, bn](Node<T>& self) {
        const T g = self.grad[0];
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += g * an->value[i];
        }
    });
    T s = 0;
    for (size_t i = 0; i < a.numel(); ++i) s += an->value[i] * bn->value[i];
    out.value()[0] = s;
    check_finite(out.value(), "dot_all");
    return out;
}

// per-row L2 normalization: x / sqrt(|x|^2 + eps)
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& a, T eps = T(1e-12)) {
    const size_t n = a.cols(), m = a.numel() / n;
    auto an = a.node();
    auto inv_norm = std::make_shared<std::vector<T>>(m);
    auto out = detail::result<T>(a.shape(), "l2_normalize", {a},
                                 [an, inv_norm, m, n](Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < m; ++i) {
            const T* dy = self.grad.data() + i * n;
            const T* x = an->value.data() + i * n;
            const T in = (*inv_norm)[i];
            T dot_xdy = 0;
            for (size_t j = 0; j < n; ++j) dot_xdy += dy[j] * x[j];
            T* dx = an->grad.data() + i * n;
            for (size_t j = 0; j < n; ++j) dx[j] += in * dy[j] - in * in * in * x[j] * dot_xdy;
        }
    });
    for (size_t i = 0; i < m; ++i) {
        const T* x = an->value.data() + i * n;
        T s = 0;
        for (size_t j = 0; j < n; ++j) s += x[j] * x[j];
        const T in = T(1) / std::sqrt(s + eps);
        (*inv_norm)[i] = in;
        T* y = out.value().data() + i * n;
        for (size_t j = 0; j < n; ++j) y[j] = x[j] * in;
    }
    check_finite(out.value(), "l2_normalize");
    return out;
}

// -log softmax(logits)[target]; logits is a vector (or 1 x n)
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, size_t target) {
    const size_t n = logits.numel();
    TD_CHECK(target < n, "cross_entropy_logits: target out of range");
    auto ln = logits.node();
    auto probs = std::make_shared<std::vector<T>>(n);
    auto out = detail::result<T>({1}, "cross_entropy", {logits}, [ln, probs, target](Node<T>& self) {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        const T g = self.grad[0];
        for (size_t j = 0; j < ln->grad.size(); ++j)
            ln->grad[j] += g * ((*probs)[j] - (j == target ? T(1) : T(0)));
    });
    T mx = ln->value[0];
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, ln->value[j]);
    T sum = 0;
    for (size_t j = 0; j < n; ++j) {
        (*probs)[j] = std::exp(ln->value[j] - mx);
        sum += (*probs)[j];
    }
    const T inv = T(1) / sum;
    for (size_t j = 0; j < n; ++j) (*probs)[j] *= inv;
    out.value()[0] = std::log(sum) + mx - ln->value[target];
    check_finite(out.value(), "cross_entropy");
    return out;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

template <typename T>
struct OptimizerState {
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    uint64_t step_count = 0;
};

template <typename T>
class AdamW {
public:
    AdamW(std::vector<Tensor<T>> params, T lr, T weight_decay, T beta1 = T(0.9),
          T beta2 = T(0.999), T eps = T(1e-8))
        : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2),
          eps_(eps) {
        state_.m.resize(params_.size());
        state_.v.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            state_.m[i].assign(params_[i].numel(), T(0));
            state_.v[i].assign(params_[i].numel(), T(0));
        }
    }

    void set_lr(T lr) { lr_ = lr; }
    T lr() const { return lr_; }
    uint64_t step_count() const { return state_.step_count; }
    OptimizerState<T>& state() { return state_; }
    const std::vector<Tensor<T>>& params() const { return params_; }

    void step() {
        state_.step_count += 1;
        const T t = T(state_.step_count);
        const T bc1 = T(1) - std::pow(b1_, t);
        const T bc2 = T(1) - std::pow(b2_, t);
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            const auto& g = p.grad_raw();
            if (g.empty()) continue;  // never touched by backward
            check_finite(g, "adamw_step(grad)");
            auto& val = p.value();
            auto& m = state_.m[i];
            auto& v = state_.v[i];
            for (size_t j = 0; j < val.size(); ++j) {
                m[j] = b1_ * m[j] + (T(1) - b1_) * g[j];
                v[j] = b2_ * v[j] + (T(1) - b2_) * g[j] * g[j];
                const T mhat = m[j] / bc1;
                const T vhat = v[j] / bc2;
                val[j] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * val[j]);
            }
            check_finite(val, "adamw_step(param)");
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

private:
    std::vector<Tensor<T>> params_;
    T lr_, wd_, b1_, b2_, eps_;
    OptimizerState<T> state_;
};

// ---------------------------------------------------------------------------
// checkpoint I/O (DTWT: magic, u32 version, then name/rank/dims/f32 records)
// ---------------------------------------------------------------------------

struct NamedBuffer {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

inline void save_dtwt(const std::string& path, const std::vector<NamedBuffer>& bufs) {
    std::ofstream f(path, std::ios::binary);
    TD_CHECK(f.good(), "cannot open checkpoint for writing: " + path);
    f.write("DTWT", 4);
    const uint32_t version = 1;
    f.write(reinterpret_cast<const char*>(&version), 4);
    for (const auto& b : bufs) {
        const uint32_t name_len = uint32_t(b.name.size());
        f.write(reinterpret_cast<const char*>(&name_len), 4);
        f.write(b.name.data(), name_len);
        const uint32_t rank = uint32_t(b.shape.size());
        f.write(reinterpret_cast<const char*>(&rank), 4);
        for (size_t d : b.shape) {
            const uint64_t d64 = d;
            f.write(reinterpret_cast<const char*>(&d64), 8);
        }
        f.write(reinterpret_cast<const char*>(b.data.data()),
                std::streamsize(b.data.size() * sizeof(float)));
    }
    TD_CHECK(f.good(), "checkpoint write failed: " + path);
}

inline std::vector<NamedBuffer> load_dtwt(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    TD_CHECK(f.good(), "cannot open checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    TD_CHECK(f.good() && std::memcmp(magic, "DTWT", 4) == 0, "bad checkpoint magic: " + path);
    uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    TD_CHECK(version == 1, "unsupported checkpoint version");
    std::vector<NamedBuffer> out;
    while (true) {
        uint32_t name_len = 0;
        f.read(reinterpret_cast<char*>(&name_len), 4);
        if (!f.good()) break;
        NamedBuffer b;
        b.name.resize(name_len);
        f.read(b.name.data(), name_len);
        uint32_t rank = 0;
        f.read(reinterpret_cast<char*>(&rank), 4);
        TD_CHECK(f.good() && rank <= 8, "corrupt checkpoint record: " + path);
        size_t numel = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            uint64_t d = 0;
            f.read(reinterpret_cast<char*>(&d), 8);
            b.shape.push_back(size_t(d));
            numel *= size_t(d);
        }
        b.data.resize(numel);
        f.read(reinterpret_cast<char*>(b.data.data()), std::streamsize(numel * sizeof(float)));
        TD_CHECK(f.good(), "truncated checkpoint payload: " + path);
        out.push_back(std::move(b));
    }
    return out;
}

} // namespace tacdream::diffcore
