#pragma once

// Dense f64 tensors with reverse-mode automatic differentiation.
//
// Ops record backward closures onto the innermost active Tape (a thread-local
// stack, activated by constructing a Tape). With no tape active, ops run in
// pure inference mode and never allocate gradient state. Every op validates
// its output for NaN/Inf and raises NumericError instead of propagating.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "captok/common.hpp"

namespace captok {

struct TensorImpl {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily, same length as value
    bool requires_grad = false;
};

inline size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        // zero extents are allowed: empty captions and masked streams produce
        // legitimate 0 x d tensors that flow through concat and projections
        if (d < 0) throw ShapeError("tensor shape entries must be non-negative");
        n *= static_cast<size_t>(d);
    }
    return n;
}

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl>();
        t.impl_->shape = std::move(shape);
        t.impl_->value.assign(shape_numel(t.impl_->shape), 0.0);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(std::vector<int> shape, double v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.impl_->value.begin(), t.impl_->value.end(), v);
        return t;
    }

    static Tensor from_vector(std::vector<int> shape, std::vector<double> data,
                              bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("from_vector: data length does not match shape");
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl>();
        t.impl_->shape = std::move(shape);
        t.impl_->value = std::move(data);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from_vector({1}, {v}, requires_grad);
    }

    static Tensor randn(Rng& rng, std::vector<int> shape, double stdev,
                        bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (double& v : t.impl_->value) v = rng.normal() * stdev;
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int dim(int i) const { return impl_->shape.at(static_cast<size_t>(i)); }
    size_t numel() const { return impl_->value.size(); }
    int rows() const { return impl_->shape.at(0); }
    int cols() const { return impl_->shape.size() >= 2 ? impl_->shape.at(1) : 1; }

    std::vector<double>& data() { return impl_->value; }
    const std::vector<double>& data() const { return impl_->value; }
    double item() const {
        if (numel() != 1) throw ShapeError("item: tensor is not a scalar");
        return impl_->value[0];
    }
    double at(int r, int c) const { return impl_->value[static_cast<size_t>(r) * cols() + c]; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    bool has_grad() const { return !impl_->grad.empty(); }
    // Tensor is a shared handle; grad storage lives in the pointee, so access
    // through a const handle still yields a writable buffer (shared_ptr rules).
    std::vector<double>& grad() const {
        ensure_grad();
        return impl_->grad;
    }
    void ensure_grad() const {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), 0.0);
    }
    void zero_grad() const { impl_->grad.clear(); }

    TensorImpl* impl() const { return impl_.get(); }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Gradient tape. Ops executed while a Tape is active append one entry each,
// in execution order; backward() replays the entries in reverse, which is a
// valid reverse topological order because every op creates its output fresh.
class Tape {
public:
    Tape() { stack().push_back(this); }
    ~Tape() { stack().pop_back(); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return stack().empty() ? nullptr : stack().back(); }

    void record(Tensor output, std::function<void()> backward_fn) {
        entries_.push_back({std::move(output), std::move(backward_fn)});
    }

    size_t size() const { return entries_.size(); }

    void backward(Tensor& loss) {
        if (consumed_) throw TapeError("backward called twice on a consumed tape");
        if (loss.numel() != 1) throw ShapeError("backward: loss must be a scalar");
        consumed_ = true;
        loss.ensure_grad();
        loss.grad()[0] = 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (it->output.has_grad()) it->fn();
        }
    }

private:
    friend class NoTape;
    struct Entry {
        Tensor output;
        std::function<void()> fn;
    };
    static std::vector<Tape*>& stack() {
        thread_local std::vector<Tape*> s;
        return s;
    }
    std::vector<Entry> entries_;
    bool consumed_ = false;
};

// Temporarily suspends recording on the active tape; used for frozen
// submodules whose outputs enter a taped graph as constants.
class NoTape {
public:
    NoTape() { Tape::stack().push_back(nullptr); }
    ~NoTape() { Tape::stack().pop_back(); }
    NoTape(const NoTape&) = delete;
    NoTape& operator=(const NoTape&) = delete;
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
    for (double v : t.data()) {
        if (!std::isfinite(v))
            throw NumericError(std::string(op) + ": non-finite value in result");
    }
}

inline bool grad_mode(std::initializer_list<const Tensor*> inputs) {
    if (Tape::current() == nullptr) return false;
    for (const Tensor* t : inputs)
        if ((*t).requires_grad()) return true;
    return false;
}

inline void finish(Tensor& out, const char* op, std::initializer_list<const Tensor*> inputs,
                   std::function<void()> backward_fn) {
    check_finite(out, op);
    if (grad_mode(inputs)) {
        out.set_requires_grad(true);
        Tape::current()->record(out, std::move(backward_fn));
    }
}

}  // namespace detail

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("add: shape mismatch");
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    detail::finish(out, "add", {&a, &b}, [a, b, out]() mutable {
        const auto& g = out.grad();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("sub: shape mismatch");
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    detail::finish(out, "sub", {&a, &b}, [a, b, out]() mutable {
        const auto& g = out.grad();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("mul: shape mismatch");
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    detail::finish(out, "mul", {&a, &b}, [a, b, out]() mutable {
        const auto& g = out.grad();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
        }
    });
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    detail::finish(out, "scale", {&a}, [a, out, c]() mutable {
        if (!a.requires_grad()) return;
        const auto& g = out.grad();
        auto& ga = a.grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
    return out;
}

// x[N x d] + b[d], broadcast over rows
inline Tensor add_rowwise(const Tensor& x, const Tensor& b) {
    if (x.shape().size() != 2 || b.shape().size() != 1 || x.cols() != b.dim(0))
        throw ShapeError("add_rowwise: expected [N x d] + [d]");
    const int N = x.rows(), d = x.cols();
    Tensor out = Tensor::zeros({N, d});
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < d; ++j)
            out.data()[static_cast<size_t>(i) * d + j] =
                x.data()[static_cast<size_t>(i) * d + j] + b.data()[j];
    detail::finish(out, "add_rowwise", {&x, &b}, [x, b, out, N, d]() mutable {
        const auto& g = out.grad();
        if (x.requires_grad()) {
            auto& gx = x.grad();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < d; ++j) gb[j] += g[static_cast<size_t>(i) * d + j];
        }
    });
    return out;
}

inline Tensor relu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    for (size_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    detail::finish(out, "relu", {&x}, [x, out]() mutable {
        if (!x.requires_grad()) return;
        const auto& g = out.grad();
        auto& gx = x.grad();
        for (size_t i = 0; i < g.size(); ++i)
            if (x.data()[i] > 0.0) gx[i] += g[i];
    });
    return out;
}

// exact GELU: 0.5 x (1 + erf(x / sqrt(2)))
inline Tensor gelu(const Tensor& x) {
    static const double kInvSqrt2 = 0.70710678118654752440;
    static const double kInvSqrt2Pi = 0.39894228040143267794;
    Tensor out = Tensor::zeros(x.shape());
    for (size_t i = 0; i < x.numel(); ++i) {
        double v = x.data()[i];
        out.data()[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
    detail::finish(out, "gelu", {&x}, [x, out]() mutable {
        if (!x.requires_grad()) return;
        const auto& g = out.grad();
        auto& gx = x.grad();
        for (size_t i = 0; i < g.size(); ++i) {
            double v = x.data()[i];
            double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            gx[i] += g[i] * (cdf + v * pdf);
        }
    });
    return out;
}

// ---- matrix ops ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions disagree");
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (int i = 0; i < m; ++i) {
        const double* arow = pa + static_cast<size_t>(i) * k;
        double* orow = po + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const double* brow = pb + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    detail::finish(out, "matmul", {&a, &b}, [a, b, out, m, k, n]() mutable {
        const double* g = out.grad().data();
        if (a.requires_grad()) {
            // ga += g . b^T
            double* ga = a.grad().data();
            const double* pb = b.data().data();
            for (int i = 0; i < m; ++i) {
                const double* grow = g + static_cast<size_t>(i) * n;
                double* garow = ga + static_cast<size_t>(i) * k;
                for (int kk = 0; kk < k; ++kk) {
                    const double* brow = pb + static_cast<size_t>(kk) * n;
                    double acc = 0.0;
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    garow[kk] += acc;
                }
            }
        }
        if (b.requires_grad()) {
            // gb += a^T . g
            double* gb = b.grad().data();
            const double* pa = a.data().data();
            for (int kk = 0; kk < k; ++kk) {
                double* gbrow = gb + static_cast<size_t>(kk) * n;
                for (int i = 0; i < m; ++i) {
                    const double av = pa[static_cast<size_t>(i) * k + kk];
                    const double* grow = g + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                }
            }
        }
    });
    return out;
}

inline Tensor transpose(const Tensor& x) {
    if (x.shape().size() != 2) throw ShapeError("transpose: expected 2-d tensor");
    const int m = x.rows(), n = x.cols();
    Tensor out = Tensor::zeros({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out.data()[static_cast<size_t>(j) * m + i] = x.data()[static_cast<size_t>(i) * n + j];
    detail::finish(out, "transpose", {&x}, [x, out, m, n]() mutable {
        if (!x.requires_grad()) return;
        const auto& g = out.grad();
        auto& gx = x.grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                gx[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(j) * m + i];
    });
    return out;
}

// value copy that drops gradient tracking entirely
inline Tensor detach(const Tensor& x) {
    return Tensor::from_vector(x.shape(), x.data());
}

// ---- reductions / normalizations ----

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor out = Tensor::scalar(acc);
    detail::finish(out, "sum", {&x}, [x, out]() mutable {
        if (!x.requires_grad()) return;
        const double g = out.grad()[0];
        auto& gx = x.grad();
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
    return out;
}

inline Tensor mean(const Tensor& x) {
    const double inv = 1.0 / static_cast<double>(x.numel());
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor out = Tensor::scalar(acc * inv);
    detail::finish(out, "mean", {&x}, [x, out, inv]() mutable {
        if (!x.requires_grad()) return;
        const double g = out.grad()[0] * inv;
        auto& gx = x.grad();
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
    return out;
}

namespace detail {
// softmax over row segment [0, len); remaining entries set to 0
inline void softmax_row(const double* in, double* out, int len, int total) {
    double mx = in[0];
    for (int j = 1; j < len; ++j) mx = std::max(mx, in[j]);
    double denom = 0.0;
    for (int j = 0; j < len; ++j) {
        out[j] = std::exp(in[j] - mx);
        denom += out[j];
    }
    for (int j = 0; j < len; ++j) out[j] /= denom;
    for (int j = len; j < total; ++j) out[j] = 0.0;
}

inline void softmax_row_backward(const double* y, const double* g, double* gx, int len) {
    double dot = 0.0;
    for (int j = 0; j < len; ++j) dot += g[j] * y[j];
    for (int j = 0; j < len; ++j) gx[j] += y[j] * (g[j] - dot);
}
}  // namespace detail

inline Tensor softmax_rows(const Tensor& x) {
    if (x.shape().size() != 2) throw ShapeError("softmax_rows: expected 2-d tensor");
    for (double v : x.data())
        if (std::isnan(v)) throw NumericError("softmax_rows: NaN input");
    const int m = x.rows(), n = x.cols();
    Tensor out = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i)
        detail::softmax_row(x.data().data() + static_cast<size_t>(i) * n,
                            out.data().data() + static_cast<size_t>(i) * n, n, n);
    detail::finish(out, "softmax_rows", {&x}, [x, out, m, n]() mutable {
        if (!x.requires_grad()) return;
        for (int i = 0; i < m; ++i)
            detail::softmax_row_backward(out.data().data() + static_cast<size_t>(i) * n,
                                         out.grad().data() + static_cast<size_t>(i) * n,
                                         x.grad().data() + static_cast<size_t>(i) * n, n);
    });
    return out;
}

// softmax over a square score matrix where row t only sees columns 0..t
inline Tensor causal_softmax(const Tensor& scores) {
    if (scores.shape().size() != 2 || scores.rows() != scores.cols())
        throw ShapeError("causal_softmax: expected square score matrix");
    for (double v : scores.data())
        if (std::isnan(v)) throw NumericError("causal_softmax: NaN input");
    const int n = scores.rows();
    Tensor out = Tensor::zeros({n, n});
    for (int t = 0; t < n; ++t)
        detail::softmax_row(scores.data().data() + static_cast<size_t>(t) * n,
                            out.data().data() + static_cast<size_t>(t) * n, t + 1, n);
    detail::finish(out, "causal_softmax", {&scores}, [scores, out, n]() mutable {
        if (!scores.requires_grad()) return;
        for (int t = 0; t < n; ++t)
            detail::softmax_row_backward(out.data().data() + static_cast<size_t>(t) * n,
                                         out.grad().data() + static_cast<size_t>(t) * n,
                                         scores.grad().data() + static_cast<size_t>(t) * n, t + 1);
    });
    return out;
}

// layer norm over the trailing axis with affine gain/bias
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    if (x.shape().empty()) throw ShapeError("layer_norm: scalar input");
    const int d = x.shape().back();
    if (gain.numel() != static_cast<size_t>(d) || bias.numel() != static_cast<size_t>(d))
        throw ShapeError("layer_norm: gain/bias length must equal trailing axis");
    if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
    const int R = static_cast<int>(x.numel()) / d;
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> mu(R), istd(R);
    for (int r = 0; r < R; ++r) {
        const double* row = x.data().data() + static_cast<size_t>(r) * d;
        double m = 0.0;
        for (int j = 0; j < d; ++j) m += row[j];
        m /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (row[j] - m) * (row[j] - m);
        var /= d;
        mu[r] = m;
        istd[r] = 1.0 / std::sqrt(var + eps);
        double* orow = out.data().data() + static_cast<size_t>(r) * d;
        for (int j = 0; j < d; ++j)
            orow[j] = (row[j] - m) * istd[r] * gain.data()[j] + bias.data()[j];
    }
    detail::finish(out, "layer_norm", {&x, &gain, &bias},
                   [x, gain, bias, out, mu, istd, R, d]() mutable {
                       const auto& g = out.grad();
                       for (int r = 0; r < R; ++r) {
                           const double* row = x.data().data() + static_cast<size_t>(r) * d;
                           const double* grow = g.data() + static_cast<size_t>(r) * d;
                           // xhat_j and gy_j = grow_j * gain_j
                           double sum_gy = 0.0, sum_gy_xhat = 0.0;
                           for (int j = 0; j < d; ++j) {
                               double xhat = (row[j] - mu[r]) * istd[r];
                               double gy = grow[j] * gain.data()[j];
                               sum_gy += gy;
                               sum_gy_xhat += gy * xhat;
                           }
                           if (x.requires_grad()) {
                               double* gx = x.grad().data() + static_cast<size_t>(r) * d;
                               for (int j = 0; j < d; ++j) {
                                   double xhat = (row[j] - mu[r]) * istd[r];
                                   double gy = grow[j] * gain.data()[j];
                                   gx[j] += istd[r] * (gy - sum_gy / d - xhat * sum_gy_xhat / d);
                               }
                           }
                           if (gain.requires_grad()) {
                               auto& gg = gain.grad();
                               for (int j = 0; j < d; ++j)
                                   gg[j] += grow[j] * (row[j] - mu[r]) * istd[r];
                           }
                           if (bias.requires_grad()) {
                               auto& gb = bias.grad();
                               for (int j = 0; j < d; ++j) gb[j] += grow[j];
                           }
                       }
                   });
    return out;
}

// ---- gather / scatter style ops ----

// rows of x selected by index; doubles as embedding lookup
inline Tensor take_rows(const Tensor& x, const std::vector<int>& idx) {
    if (x.shape().size() != 2) throw ShapeError("take_rows: expected 2-d tensor");
    const int N = x.rows(), d = x.cols();
    for (int i : idx)
        if (i < 0 || i >= N)
            throw DataError("take_rows: index " + std::to_string(i) + " outside table of " +
                            std::to_string(N) + " rows");
    const int k = static_cast<int>(idx.size());
    if (k == 0) throw ShapeError("take_rows: empty index list");
    Tensor out = Tensor::zeros({k, d});
    for (int i = 0; i < k; ++i)
        std::copy_n(x.data().data() + static_cast<size_t>(idx[i]) * d, d,
                    out.data().data() + static_cast<size_t>(i) * d);
    detail::finish(out, "take_rows", {&x}, [x, out, idx, d]() mutable {
        if (!x.requires_grad()) return;
        const auto& g = out.grad();
        auto& gx = x.grad();
        for (size_t i = 0; i < idx.size(); ++i)
            for (int j = 0; j < d; ++j)
                gx[static_cast<size_t>(idx[i]) * d + j] += g[i * d + j];
    });
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    const int d = parts[0].cols();
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.shape().size() != 2 || p.cols() != d)
            throw ShapeError("concat_rows: column mismatch");
        total += p.rows();
    }
    Tensor out = Tensor::zeros({total, d});
    int row = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data().begin(), p.data().end(),
                  out.data().begin() + static_cast<size_t>(row) * d);
        row += p.rows();
    }
    bool rg = false;
    for (const Tensor& p : parts) rg = rg || p.requires_grad();
    detail::check_finite(out, "concat_rows");
    if (Tape::current() && rg) {
        out.set_requires_grad(true);
        Tape::current()->record(out, [parts, out, d]() mutable {
            const auto& g = out.grad();
            int row = 0;
            for (Tensor p : parts) {
                if (p.requires_grad()) {
                    auto& gp = p.grad();
                    for (size_t i = 0; i < p.numel(); ++i)
                        gp[i] += g[static_cast<size_t>(row) * d + i];
                }
                row += p.rows();
            }
        });
    }
    return out;
}

inline Tensor slice_rows(const Tensor& x, int start, int len) {
    if (x.shape().size() != 2) throw ShapeError("slice_rows: expected 2-d tensor");
    if (start < 0 || len <= 0 || start + len > x.rows()) throw ShapeError("slice_rows: bad range");
    const int d = x.cols();
    Tensor out = Tensor::zeros({len, d});
    std::copy_n(x.data().data() + static_cast<size_t>(start) * d, static_cast<size_t>(len) * d,
                out.data().data());
    detail::finish(out, "slice_rows", {&x}, [x, out, start, len, d]() mutable {
        if (!x.requires_grad()) return;
        const auto& g = out.grad();
        auto& gx = x.grad();
        for (size_t i = 0; i < static_cast<size_t>(len) * d; ++i)
            gx[static_cast<size_t>(start) * d + i] += g[i];
    });
    return out;
}

inline Tensor slice_cols(const Tensor& x, int start, int len) {
    if (x.shape().size() != 2) throw ShapeError("slice_cols: expected 2-d tensor");
    if (start < 0 || len <= 0 || start + len > x.cols()) throw ShapeError("slice_cols: bad range");
    const int N = x.rows(), d = x.cols();
    Tensor out = Tensor::zeros({N, len});
    for (int i = 0; i < N; ++i)
        std::copy_n(x.data().data() + static_cast<size_t>(i) * d + start, len,
                    out.data().data() + static_cast<size_t>(i) * len);
    detail::finish(out, "slice_cols", {&x}, [x, out, start, len, N, d]() mutable {
        if (!x.requires_grad()) return;
        const auto& g = out.grad();
        auto& gx = x.grad();
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < len; ++j)
                gx[static_cast<size_t>(i) * d + start + j] += g[static_cast<size_t>(i) * len + j];
    });
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    const int N = parts[0].rows();
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.shape().size() != 2 || p.rows() != N) throw ShapeError("concat_cols: row mismatch");
        total += p.cols();
    }
    Tensor out = Tensor::zeros({N, total});
    int col = 0;
    for (const Tensor& p : parts) {
        const int d = p.cols();
        for (int i = 0; i < N; ++i)
            std::copy_n(p.data().data() + static_cast<size_t>(i) * d, d,
                        out.data().data() + static_cast<size_t>(i) * total + col);
        col += d;
    }
    bool rg = false;
    for (const Tensor& p : parts) rg = rg || p.requires_grad();
    detail::check_finite(out, "concat_cols");
    if (Tape::current() && rg) {
        out.set_requires_grad(true);
        Tape::current()->record(out, [parts, out, N, total]() mutable {
            const auto& g = out.grad();
            int col = 0;
            for (Tensor p : parts) {
                const int d = p.cols();
                if (p.requires_grad()) {
                    auto& gp = p.grad();
                    for (int i = 0; i < N; ++i)
                        for (int j = 0; j < d; ++j)
                            gp[static_cast<size_t>(i) * d + j] +=
                                g[static_cast<size_t>(i) * total + col + j];
                }
                col += d;
            }
        });
    }
    return out;
}

// Adaptive average pooling over a square token grid stored row-major as
// [G*G x d]. Output side O partitions each axis into windows
// [floor(i*G/O), ceil((i+1)*G/O)).
inline Tensor adaptive_pool_grid(const Tensor& x, int grid_side, int out_side) {
    if (x.shape().size() != 2) throw ShapeError("adaptive_pool_grid: expected 2-d tensor");
    if (grid_side < 1 || out_side < 1 || x.rows() != grid_side * grid_side)
        throw ShapeError("adaptive_pool_grid: rows must equal grid_side^2");
    const int d = x.cols(), G = grid_side, O = out_side;
    auto lo = [G, O](int i) { return (i * G) / O; };
    auto hi = [G, O](int i) { return ((i + 1) * G + O - 1) / O; };
    Tensor out = Tensor::zeros({O * O, d});
    for (int oi = 0; oi < O; ++oi) {
        for (int oj = 0; oj < O; ++oj) {
            const int r0 = lo(oi), r1 = hi(oi), c0 = lo(oj), c1 = hi(oj);
            const double inv = 1.0 / static_cast<double>((r1 - r0) * (c1 - c0));
            double* orow = out.data().data() + (static_cast<size_t>(oi) * O + oj) * d;
            for (int r = r0; r < r1; ++r)
                for (int c = c0; c < c1; ++c) {
                    const double* cell = x.data().data() + (static_cast<size_t>(r) * G + c) * d;
                    for (int j = 0; j < d; ++j) orow[j] += cell[j] * inv;
                }
        }
    }
    detail::finish(out, "adaptive_pool_grid", {&x}, [x, out, G, O, d, lo, hi]() mutable {
        if (!x.requires_grad()) return;
        const auto& g = out.grad();
        auto& gx = x.grad();
        for (int oi = 0; oi < O; ++oi)
            for (int oj = 0; oj < O; ++oj) {
                const int r0 = lo(oi), r1 = hi(oi), c0 = lo(oj), c1 = hi(oj);
                const double inv = 1.0 / static_cast<double>((r1 - r0) * (c1 - c0));
                const double* grow = g.data() + (static_cast<size_t>(oi) * O + oj) * d;
                for (int r = r0; r < r1; ++r)
                    for (int c = c0; c < c1; ++c)
                        for (int j = 0; j < d; ++j)
                            gx[(static_cast<size_t>(r) * G + c) * d + j] += grow[j] * inv;
            }
    });
    return out;
}

// mean negative log-likelihood over positions whose target != ignore_index
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            int ignore_index = -1) {
    if (logits.shape().size() != 2) throw ShapeError("cross_entropy: expected [N x V] logits");
    const int N = logits.rows(), V = logits.cols();
    if (static_cast<int>(targets.size()) != N)
        throw ShapeError("cross_entropy: targets length must equal logit rows");
    int n_valid = 0;
    for (int t : targets) {
        if (t == ignore_index) continue;
        if (t < 0 || t >= V) throw DataError("cross_entropy: target id outside vocabulary");
        ++n_valid;
    }
    if (n_valid == 0) throw NumericError("cross_entropy: every position ignored, mean undefined");
    double acc = 0.0;
    for (int i = 0; i < N; ++i) {
        if (targets[i] == ignore_index) continue;
        const double* row = logits.data().data() + static_cast<size_t>(i) * V;
        double mx = row[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < V; ++j) denom += std::exp(row[j] - mx);
        acc += std::log(denom) + mx - row[targets[i]];
    }
    Tensor out = Tensor::scalar(acc / n_valid);
    detail::finish(out, "cross_entropy", {&logits}, [logits, out, targets, ignore_index, N, V,
                                                     n_valid]() mutable {
        if (!logits.requires_grad()) return;
        const double g = out.grad()[0] / n_valid;
        auto& gl = logits.grad();
        for (int i = 0; i < N; ++i) {
            if (targets[i] == ignore_index) continue;
            const double* row = logits.data().data() + static_cast<size_t>(i) * V;
            double mx = row[0];
            for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
            double denom = 0.0;
            for (int j = 0; j < V; ++j) denom += std::exp(row[j] - mx);
            for (int j = 0; j < V; ++j) {
                double p = std::exp(row[j] - mx) / denom;
                gl[static_cast<size_t>(i) * V + j] += g * (p - (j == targets[i] ? 1.0 : 0.0));
            }
        }
    });
    return out;
}

}  // namespace captok
