#include "mism/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>

#include "mism/error.hpp"

namespace mism {

namespace {

std::atomic<bool> g_strict{true};
thread_local Tape* g_active_tape = nullptr;

void require(bool cond, const std::string& msg) {
    if (!cond) {
        throw DimensionError(msg);
    }
}

}  // namespace

std::string shape_to_string(const Shape& s) {
    std::ostringstream out;
    out << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) {
            out << ", ";
        }
        out << s[i];
    }
    out << ")";
    return out.str();
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) {
        n *= e;
    }
    return n;
}

void set_strict_numerics(bool on) { g_strict.store(on); }
bool strict_numerics() { return g_strict.load(); }

// --- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    for (int64_t e : shape) {
        if (e <= 0) {
            throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape));
        }
    }
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(static_cast<size_t>(shape_numel(t.impl_->shape)), value);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
    Tensor t = zeros(shape, requires_grad);
    if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
        throw DimensionError("value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_to_string(shape));
    }
    t.impl_->data = std::move(values);
    return t;
}

Tensor Tensor::scalar_value(double v, bool requires_grad) {
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = {};
    t.impl_->data = {v};
    t.impl_->requires_grad = requires_grad;
    return t;
}

double Tensor::item() const {
    if (size() != 1) {
        throw ContractError("item() requires a single-element tensor, got shape " +
                            shape_to_string(shape()));
    }
    return impl_->data[0];
}

std::vector<double>& Tensor::grad() {
    if (impl_->grad.empty()) {
        throw ContractError("tensor has no gradient buffer");
    }
    return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (impl_->grad.empty()) {
        throw ContractError("tensor has no gradient buffer");
    }
    return impl_->grad;
}

std::vector<double>& Tensor::grad_buffer() const {
    if (impl_->grad.empty()) {
        throw ContractError("tensor has no gradient buffer");
    }
    return impl_->grad;
}

void Tensor::ensure_zero_grad() {
    impl_->grad.assign(impl_->data.size(), 0.0);
}

Tensor Tensor::clone_detached() const {
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = false;
    return t;
}

// --- Tape -------------------------------------------------------------------

void Tape::record(std::function<void()> backward_step) {
    steps_.push_back(std::move(backward_step));
}

void Tape::replay_reverse() {
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
        (*it)();
    }
}

void Tape::clear() { steps_.clear(); }

Tape* Tape::active() noexcept { return g_active_tape; }

TapeScope::TapeScope() : prev_(g_active_tape) { g_active_tape = &tape_; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

NoGradScope::NoGradScope() : prev_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = prev_; }

void backward(Tensor& loss) {
    Tape* tape = Tape::active();
    if (tape == nullptr) {
        throw ContractError("backward: no active tape on this thread");
    }
    if (loss.size() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " +
                            shape_to_string(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw ContractError("backward: loss is not connected to the tape");
    }
    if (!loss.has_grad()) {
        loss.ensure_zero_grad();
    }
    loss.grad_buffer()[0] += 1.0;
    tape->replay_reverse();
    tape->clear();
}

// --- op plumbing ------------------------------------------------------------

namespace {

void check_finite(const Tensor& t, const char* op) {
    if (!g_strict.load()) {
        return;
    }
    for (double v : t.values()) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + " produced a non-finite value");
        }
    }
}

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

// Marks the output as grad-carrying, allocates grad buffers for it and for
// any grad-requiring input that lacks one, and records the backward step.
void finalize(const char* op, Tensor& out, std::initializer_list<const Tensor*> inputs,
              std::function<void()> backward_step) {
    check_finite(out, op);
    Tape* tape = Tape::active();
    if (tape == nullptr || !any_requires_grad(inputs)) {
        return;
    }
    out.set_requires_grad(true);
    out.ensure_zero_grad();
    for (const Tensor* t : inputs) {
        if (t->requires_grad() && !t->has_grad()) {
            const_cast<Tensor*>(t)->ensure_zero_grad();
        }
    }
    tape->record(std::move(backward_step));
}

// Sorting puts each reduction slice into a value-canonical order so the fp
// sum is identical for any row permutation of the input.
double sorted_sum(std::vector<double>& scratch) {
    std::sort(scratch.begin(), scratch.end());
    double s = 0.0;
    for (double v : scratch) {
        s += v;
    }
    return s;
}

struct AxisSplit {
    int64_t outer, n, inner;
};

AxisSplit split_axis(const Tensor& a, int64_t axis, const char* op) {
    if (axis < 0 || axis >= a.rank()) {
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                             " out of range for shape " + shape_to_string(a.shape()));
    }
    AxisSplit s{1, a.extent(axis), 1};
    for (int64_t i = 0; i < axis; ++i) {
        s.outer *= a.extent(i);
    }
    for (int64_t i = axis + 1; i < a.rank(); ++i) {
        s.inner *= a.extent(i);
    }
    return s;
}

}  // namespace

// --- ops --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 tensors, got " +
                                                shape_to_string(a.shape()) + " and " +
                                                shape_to_string(b.shape()));
    if (a.extent(1) != b.extent(0)) {
        throw DimensionError("matmul: inner dimensions disagree: " + shape_to_string(a.shape()) +
                             " x " + shape_to_string(b.shape()));
    }
    const int64_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    Tensor c = Tensor::zeros({m, n});
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* pc = c.values().data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t kk = 0; kk < k; ++kk) {
            const double av = pa[i * k + kk];
            const double* brow = pb + kk * n;
            double* crow = pc + i * n;
            for (int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
    finalize("matmul", c, {&a, &b}, [a, b, c]() mutable {
        const auto& dc = c.grad_buffer();
        const int64_t m2 = a.extent(0), k2 = a.extent(1), n2 = b.extent(1);
        if (a.requires_grad()) {
            auto& da = a.grad_buffer();
            for (int64_t i = 0; i < m2; ++i) {
                for (int64_t j = 0; j < n2; ++j) {
                    const double g = dc[static_cast<size_t>(i * n2 + j)];
                    for (int64_t kk = 0; kk < k2; ++kk) {
                        da[static_cast<size_t>(i * k2 + kk)] +=
                            g * b.values()[static_cast<size_t>(kk * n2 + j)];
                    }
                }
            }
        }
        if (b.requires_grad()) {
            auto& db = b.grad_buffer();
            for (int64_t kk = 0; kk < k2; ++kk) {
                for (int64_t i = 0; i < m2; ++i) {
                    const double av = a.values()[static_cast<size_t>(i * k2 + kk)];
                    for (int64_t j = 0; j < n2; ++j) {
                        db[static_cast<size_t>(kk * n2 + j)] +=
                            av * dc[static_cast<size_t>(i * n2 + j)];
                    }
                }
            }
        }
    });
    return c;
}

Tensor transpose(const Tensor& a) {
    require(a.rank() == 2, "transpose expects a rank-2 tensor, got " + shape_to_string(a.shape()));
    const int64_t m = a.extent(0), n = a.extent(1);
    Tensor t = Tensor::zeros({n, m});
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            t.values()[static_cast<size_t>(j * m + i)] = a.values()[static_cast<size_t>(i * n + j)];
        }
    }
    finalize("transpose", t, {&a}, [a, t]() mutable {
        if (!a.requires_grad()) {
            return;
        }
        const int64_t m2 = a.extent(0), n2 = a.extent(1);
        for (int64_t i = 0; i < m2; ++i) {
            for (int64_t j = 0; j < n2; ++j) {
                a.grad_buffer()[static_cast<size_t>(i * n2 + j)] +=
                    t.grad_buffer()[static_cast<size_t>(j * m2 + i)];
            }
        }
    });
    return t;
}

namespace {

Tensor elementwise_binary(const char* op, const Tensor& a, const Tensor& b, double sign_b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shapes differ: " + shape_to_string(a.shape()) +
                             " vs " + shape_to_string(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape());
    for (size_t i = 0; i < out.values().size(); ++i) {
        out.values()[i] = a.values()[i] + sign_b * b.values()[i];
    }
    finalize(op, out, {&a, &b}, [a, b, out, sign_b]() mutable {
        const auto& d = out.grad_buffer();
        if (a.requires_grad()) {
            for (size_t i = 0; i < d.size(); ++i) {
                a.grad_buffer()[i] += d[i];
            }
        }
        if (b.requires_grad()) {
            for (size_t i = 0; i < d.size(); ++i) {
                b.grad_buffer()[i] += sign_b * d[i];
            }
        }
    });
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise_binary("add", a, b, 1.0); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise_binary("sub", a, b, -1.0); }

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("mul: shapes differ: " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape());
    for (size_t i = 0; i < out.values().size(); ++i) {
        out.values()[i] = a.values()[i] * b.values()[i];
    }
    finalize("mul", out, {&a, &b}, [a, b, out]() mutable {
        const auto& d = out.grad_buffer();
        if (a.requires_grad()) {
            for (size_t i = 0; i < d.size(); ++i) {
                a.grad_buffer()[i] += d[i] * b.values()[i];
            }
        }
        if (b.requires_grad()) {
            for (size_t i = 0; i < d.size(); ++i) {
                b.grad_buffer()[i] += d[i] * a.values()[i];
            }
        }
    });
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    for (size_t i = 0; i < out.values().size(); ++i) {
        out.values()[i] = c * a.values()[i];
    }
    finalize("scale", out, {&a}, [a, out, c]() mutable {
        if (!a.requires_grad()) {
            return;
        }
        for (size_t i = 0; i < out.grad_buffer().size(); ++i) {
            a.grad_buffer()[i] += c * out.grad_buffer()[i];
        }
    });
    return out;
}

Tensor add_rowwise(const Tensor& m, const Tensor& v) {
    require(m.rank() == 2 && v.rank() == 1, "add_rowwise expects (S,d) and (d,), got " +
                                                shape_to_string(m.shape()) + " and " +
                                                shape_to_string(v.shape()));
    if (m.extent(1) != v.extent(0)) {
        throw DimensionError("add_rowwise: width mismatch: " + shape_to_string(m.shape()) +
                             " vs " + shape_to_string(v.shape()));
    }
    const int64_t s = m.extent(0), d = m.extent(1);
    Tensor out = Tensor::zeros({s, d});
    for (int64_t i = 0; i < s; ++i) {
        for (int64_t j = 0; j < d; ++j) {
            out.values()[static_cast<size_t>(i * d + j)] =
                m.values()[static_cast<size_t>(i * d + j)] + v.values()[static_cast<size_t>(j)];
        }
    }
    finalize("add_rowwise", out, {&m, &v}, [m, v, out]() mutable {
        const int64_t s2 = m.extent(0), d2 = m.extent(1);
        const auto& dout = out.grad_buffer();
        if (m.requires_grad()) {
            for (size_t i = 0; i < dout.size(); ++i) {
                m.grad_buffer()[i] += dout[i];
            }
        }
        if (v.requires_grad()) {
            for (int64_t i = 0; i < s2; ++i) {
                for (int64_t j = 0; j < d2; ++j) {
                    v.grad_buffer()[static_cast<size_t>(j)] += dout[static_cast<size_t>(i * d2 + j)];
                }
            }
        }
    });
    return out;
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) {
        s += v;
    }
    Tensor out = Tensor::scalar_value(s);
    finalize("sum_all", out, {&a}, [a, out]() mutable {
        if (!a.requires_grad()) {
            return;
        }
        const double g = out.grad_buffer()[0];
        for (auto& x : a.grad_buffer()) {
            x += g;
        }
    });
    return out;
}

Tensor softmax(const Tensor& a, int64_t axis) {
    const AxisSplit ax = split_axis(a, axis, "softmax");
    Tensor out = Tensor::zeros(a.shape());
    const double* in = a.values().data();
    double* y = out.values().data();
    for (int64_t o = 0; o < ax.outer; ++o) {
        for (int64_t i = 0; i < ax.inner; ++i) {
            const int64_t base = o * ax.n * ax.inner + i;
            double mx = in[base];
            for (int64_t t = 1; t < ax.n; ++t) {
                mx = std::max(mx, in[base + t * ax.inner]);
            }
            double z = 0.0;
            for (int64_t t = 0; t < ax.n; ++t) {
                const double e = std::exp(in[base + t * ax.inner] - mx);
                y[base + t * ax.inner] = e;
                z += e;
            }
            for (int64_t t = 0; t < ax.n; ++t) {
                y[base + t * ax.inner] /= z;
            }
        }
    }
    finalize("softmax", out, {&a}, [a, out, ax]() mutable {
        if (!a.requires_grad()) {
            return;
        }
        const auto& yv = out.values();
        const auto& dy = out.grad_buffer();
        auto& dx = a.grad_buffer();
        for (int64_t o = 0; o < ax.outer; ++o) {
            for (int64_t i = 0; i < ax.inner; ++i) {
                const int64_t base = o * ax.n * ax.inner + i;
                double dot = 0.0;
                for (int64_t t = 0; t < ax.n; ++t) {
                    const size_t idx = static_cast<size_t>(base + t * ax.inner);
                    dot += dy[idx] * yv[idx];
                }
                for (int64_t t = 0; t < ax.n; ++t) {
                    const size_t idx = static_cast<size_t>(base + t * ax.inner);
                    dx[idx] += yv[idx] * (dy[idx] - dot);
                }
            }
        }
    });
    return out;
}

Tensor log_softmax(const Tensor& a, int64_t axis) {
    const AxisSplit ax = split_axis(a, axis, "log_softmax");
    Tensor out = Tensor::zeros(a.shape());
    const double* in = a.values().data();
    double* y = out.values().data();
    for (int64_t o = 0; o < ax.outer; ++o) {
        for (int64_t i = 0; i < ax.inner; ++i) {
            const int64_t base = o * ax.n * ax.inner + i;
            double mx = in[base];
            for (int64_t t = 1; t < ax.n; ++t) {
                mx = std::max(mx, in[base + t * ax.inner]);
            }
            double z = 0.0;
            for (int64_t t = 0; t < ax.n; ++t) {
                z += std::exp(in[base + t * ax.inner] - mx);
            }
            const double lse = mx + std::log(z);
            for (int64_t t = 0; t < ax.n; ++t) {
                y[base + t * ax.inner] = in[base + t * ax.inner] - lse;
            }
        }
    }
    finalize("log_softmax", out, {&a}, [a, out, ax]() mutable {
        if (!a.requires_grad()) {
            return;
        }
        const auto& yv = out.values();
        const auto& dy = out.grad_buffer();
        auto& dx = a.grad_buffer();
        for (int64_t o = 0; o < ax.outer; ++o) {
            for (int64_t i = 0; i < ax.inner; ++i) {
                const int64_t base = o * ax.n * ax.inner + i;
                double dsum = 0.0;
                for (int64_t t = 0; t < ax.n; ++t) {
                    dsum += dy[static_cast<size_t>(base + t * ax.inner)];
                }
                for (int64_t t = 0; t < ax.n; ++t) {
                    const size_t idx = static_cast<size_t>(base + t * ax.inner);
                    dx[idx] += dy[idx] - std::exp(yv[idx]) * dsum;
                }
            }
        }
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require(x.rank() >= 1, "layer_norm expects rank >= 1");
    const int64_t d = x.extent(x.rank() - 1);
    require(gain.rank() == 1 && gain.extent(0) == d && bias.rank() == 1 && bias.extent(0) == d,
            "layer_norm: gain/bias must have shape (" + std::to_string(d) + ",), got " +
                shape_to_string(gain.shape()) + " and " + shape_to_string(bias.shape()));
    if (eps <= 0.0) {
        throw ContractError("layer_norm: eps must be positive");
    }
    const int64_t slices = x.size() / d;
    Tensor out = Tensor::zeros(x.shape());
    auto mu = std::make_shared<std::vector<double>>(static_cast<size_t>(slices));
    auto inv = std::make_shared<std::vector<double>>(static_cast<size_t>(slices));
    for (int64_t s = 0; s < slices; ++s) {
        const double* xs = x.values().data() + s * d;
        double m = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            m += xs[j];
        }
        m /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double c = xs[j] - m;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double iv = 1.0 / std::sqrt(var + eps);
        (*mu)[static_cast<size_t>(s)] = m;
        (*inv)[static_cast<size_t>(s)] = iv;
        double* ys = out.values().data() + s * d;
        for (int64_t j = 0; j < d; ++j) {
            ys[j] = gain.values()[static_cast<size_t>(j)] * (xs[j] - m) * iv +
                    bias.values()[static_cast<size_t>(j)];
        }
    }
    finalize("layer_norm", out, {&x, &gain, &bias}, [x, gain, bias, out, mu, inv, d, slices]() mutable {
        const auto& dy = out.grad_buffer();
        for (int64_t s = 0; s < slices; ++s) {
            const double m = (*mu)[static_cast<size_t>(s)];
            const double iv = (*inv)[static_cast<size_t>(s)];
            const double* xs = x.values().data() + s * d;
            const double* dys = dy.data() + s * d;
            double sum1 = 0.0, sum2 = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                const double xhat = (xs[j] - m) * iv;
                const double dxhat = dys[j] * gain.values()[static_cast<size_t>(j)];
                sum1 += dxhat;
                sum2 += dxhat * xhat;
            }
            if (x.requires_grad()) {
                double* dxs = x.grad_buffer().data() + s * d;
                for (int64_t j = 0; j < d; ++j) {
                    const double xhat = (xs[j] - m) * iv;
                    const double dxhat = dys[j] * gain.values()[static_cast<size_t>(j)];
                    dxs[j] += iv * (dxhat - sum1 / static_cast<double>(d) -
                                    xhat * sum2 / static_cast<double>(d));
                }
            }
            if (gain.requires_grad()) {
                for (int64_t j = 0; j < d; ++j) {
                    gain.grad_buffer()[static_cast<size_t>(j)] += dys[j] * (xs[j] - m) * iv;
                }
            }
            if (bias.requires_grad()) {
                for (int64_t j = 0; j < d; ++j) {
                    bias.grad_buffer()[static_cast<size_t>(j)] += dys[j];
                }
            }
        }
    });
    return out;
}

Tensor gelu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (size_t i = 0; i < a.values().size(); ++i) {
        const double x = a.values()[i];
        out.values()[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    finalize("gelu", out, {&a}, [a, out]() mutable {
        if (!a.requires_grad()) {
            return;
        }
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        for (size_t i = 0; i < a.values().size(); ++i) {
            const double x = a.values()[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            a.grad_buffer()[i] += out.grad_buffer()[i] * (cdf + x * pdf);
        }
    });
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.size()) {
        throw DimensionError("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                             shape_to_string(shape));
    }
    Tensor out = Tensor::from_values(shape, a.values());
    finalize("reshape", out, {&a}, [a, out]() mutable {
        if (!a.requires_grad()) {
            return;
        }
        for (size_t i = 0; i < out.grad_buffer().size(); ++i) {
            a.grad_buffer()[i] += out.grad_buffer()[i];
        }
    });
    return out;
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) {
        throw ContractError("stack_rows: need at least one row");
    }
    const int64_t d = rows[0].extent(0);
    for (const Tensor& r : rows) {
        require(r.rank() == 1 && r.extent(0) == d,
                "stack_rows: all rows must be rank-1 of equal length");
    }
    const int64_t s = static_cast<int64_t>(rows.size());
    Tensor out = Tensor::zeros({s, d});
    for (int64_t i = 0; i < s; ++i) {
        std::copy(rows[static_cast<size_t>(i)].values().begin(),
                  rows[static_cast<size_t>(i)].values().end(),
                  out.values().begin() + i * d);
    }
    bool any_rg = false;
    for (const Tensor& r : rows) {
        any_rg = any_rg || r.requires_grad();
    }
    check_finite(out, "stack_rows");
    Tape* tape = Tape::active();
    if (tape != nullptr && any_rg) {
        out.set_requires_grad(true);
        out.ensure_zero_grad();
        for (const Tensor& r : rows) {
            if (r.requires_grad() && !r.has_grad()) {
                const_cast<Tensor&>(r).ensure_zero_grad();
            }
        }
        std::vector<Tensor> captured = rows;
        tape->record([captured, out, d]() mutable {
            for (size_t i = 0; i < captured.size(); ++i) {
                if (!captured[i].requires_grad()) {
                    continue;
                }
                for (int64_t j = 0; j < d; ++j) {
                    captured[i].grad_buffer()[static_cast<size_t>(j)] +=
                        out.grad_buffer()[i * static_cast<size_t>(d) + static_cast<size_t>(j)];
                }
            }
        });
    }
    return out;
}

Tensor row(const Tensor& m, int64_t i) {
    require(m.rank() == 2, "row expects a rank-2 tensor");
    if (i < 0 || i >= m.extent(0)) {
        throw DimensionError("row: index " + std::to_string(i) + " out of range for " +
                             shape_to_string(m.shape()));
    }
    const int64_t d = m.extent(1);
    Tensor out = Tensor::zeros({d});
    std::copy(m.values().begin() + i * d, m.values().begin() + (i + 1) * d, out.values().begin());
    finalize("row", out, {&m}, [m, out, i, d]() mutable {
        if (!m.requires_grad()) {
            return;
        }
        for (int64_t j = 0; j < d; ++j) {
            m.grad_buffer()[static_cast<size_t>(i * d + j)] += out.grad_buffer()[static_cast<size_t>(j)];
        }
    });
    return out;
}

Tensor slice_cols(const Tensor& m, int64_t c0, int64_t c1) {
    require(m.rank() == 2, "slice_cols expects a rank-2 tensor");
    if (c0 < 0 || c1 <= c0 || c1 > m.extent(1)) {
        throw DimensionError("slice_cols: bad range [" + std::to_string(c0) + ", " +
                             std::to_string(c1) + ") for " + shape_to_string(m.shape()));
    }
    const int64_t s = m.extent(0), d = m.extent(1), w = c1 - c0;
    Tensor out = Tensor::zeros({s, w});
    for (int64_t i = 0; i < s; ++i) {
        std::copy(m.values().begin() + i * d + c0, m.values().begin() + i * d + c1,
                  out.values().begin() + i * w);
    }
    finalize("slice_cols", out, {&m}, [m, out, c0, s, d, w]() mutable {
        if (!m.requires_grad()) {
            return;
        }
        for (int64_t i = 0; i < s; ++i) {
            for (int64_t j = 0; j < w; ++j) {
                m.grad_buffer()[static_cast<size_t>(i * d + c0 + j)] +=
                    out.grad_buffer()[static_cast<size_t>(i * w + j)];
            }
        }
    });
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw ContractError("concat_cols: need at least one part");
    }
    const int64_t s = parts[0].extent(0);
    int64_t total = 0;
    for (const Tensor& p : parts) {
        require(p.rank() == 2 && p.extent(0) == s, "concat_cols: row counts must match");
        total += p.extent(1);
    }
    Tensor out = Tensor::zeros({s, total});
    int64_t off = 0;
    for (const Tensor& p : parts) {
        const int64_t w = p.extent(1);
        for (int64_t i = 0; i < s; ++i) {
            std::copy(p.values().begin() + i * w, p.values().begin() + (i + 1) * w,
                      out.values().begin() + i * total + off);
        }
        off += w;
    }
    bool any_rg = false;
    for (const Tensor& p : parts) {
        any_rg = any_rg || p.requires_grad();
    }
    check_finite(out, "concat_cols");
    Tape* tape = Tape::active();
    if (tape != nullptr && any_rg) {
        out.set_requires_grad(true);
        out.ensure_zero_grad();
        for (const Tensor& p : parts) {
            if (p.requires_grad() && !p.has_grad()) {
                const_cast<Tensor&>(p).ensure_zero_grad();
            }
        }
        std::vector<Tensor> captured = parts;
        tape->record([captured, out, s, total]() mutable {
            int64_t off2 = 0;
            for (auto& p : captured) {
                const int64_t w = p.extent(1);
                if (p.requires_grad()) {
                    for (int64_t i = 0; i < s; ++i) {
                        for (int64_t j = 0; j < w; ++j) {
                            p.grad_buffer()[static_cast<size_t>(i * w + j)] +=
                                out.grad_buffer()[static_cast<size_t>(i * total + off2 + j)];
                        }
                    }
                }
                off2 += w;
            }
        });
    }
    return out;
}

Tensor embed_rows(const Tensor& table, const std::vector<int>& ids) {
    require(table.rank() == 2, "embed_rows expects a rank-2 table");
    if (ids.empty()) {
        throw ContractError("embed_rows: need at least one id");
    }
    const int64_t v = table.extent(0), d = table.extent(1);
    for (int id : ids) {
        if (id < -1 || id >= v) {
            throw DimensionError("embed_rows: id " + std::to_string(id) +
                                 " out of range for table " + shape_to_string(table.shape()));
        }
    }
    const int64_t t = static_cast<int64_t>(ids.size());
    Tensor out = Tensor::zeros({t, d});
    for (int64_t i = 0; i < t; ++i) {
        const int id = ids[static_cast<size_t>(i)];
        if (id >= 0) {
            std::copy(table.values().begin() + id * d, table.values().begin() + (id + 1) * d,
                      out.values().begin() + i * d);
        }
    }
    finalize("embed_rows", out, {&table}, [table, out, ids, d]() mutable {
        if (!table.requires_grad()) {
            return;
        }
        for (size_t i = 0; i < ids.size(); ++i) {
            const int id = ids[i];
            if (id < 0) {
                continue;
            }
            for (int64_t j = 0; j < d; ++j) {
                table.grad_buffer()[static_cast<size_t>(id * d + j)] +=
                    out.grad_buffer()[i * static_cast<size_t>(d) + static_cast<size_t>(j)];
            }
        }
    });
    return out;
}

Tensor nll_pick_sum(const Tensor& log_probs, const std::vector<int>& targets) {
    require(log_probs.rank() == 2, "nll_pick_sum expects (T, V) log-probs");
    const int64_t t = log_probs.extent(0), v = log_probs.extent(1);
    if (static_cast<int64_t>(targets.size()) != t) {
        throw ContractError("nll_pick_sum: target count " + std::to_string(targets.size()) +
                            " does not match " + std::to_string(t) + " rows");
    }
    for (int id : targets) {
        if (id < 0 || id >= v) {
            throw DataError("nll_pick_sum: target id " + std::to_string(id) + " out of range");
        }
    }
    double s = 0.0;
    for (int64_t i = 0; i < t; ++i) {
        s -= log_probs.values()[static_cast<size_t>(i * v + targets[static_cast<size_t>(i)])];
    }
    Tensor out = Tensor::scalar_value(s);
    finalize("nll_pick_sum", out, {&log_probs}, [log_probs, out, targets, v]() mutable {
        if (!log_probs.requires_grad()) {
            return;
        }
        const double g = out.grad_buffer()[0];
        for (size_t i = 0; i < targets.size(); ++i) {
            log_probs.grad_buffer()[i * static_cast<size_t>(v) + static_cast<size_t>(targets[i])] -= g;
        }
    });
    return out;
}

Tensor mean_rows_canonical(const Tensor& e) {
    require(e.rank() == 2, "mean_rows_canonical expects an (N, K) matrix, got " +
                               shape_to_string(e.shape()));
    const int64_t n = e.extent(0), k = e.extent(1);
    Tensor out = Tensor::zeros({k});
    std::vector<double> col(static_cast<size_t>(n));
    for (int64_t j = 0; j < k; ++j) {
        for (int64_t i = 0; i < n; ++i) {
            col[static_cast<size_t>(i)] = e.values()[static_cast<size_t>(i * k + j)];
        }
        out.values()[static_cast<size_t>(j)] = sorted_sum(col) / static_cast<double>(n);
    }
    finalize("mean_rows_canonical", out, {&e}, [e, out, n, k]() mutable {
        if (!e.requires_grad()) {
            return;
        }
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = 0; j < k; ++j) {
                e.grad_buffer()[static_cast<size_t>(i * k + j)] +=
                    out.grad_buffer()[static_cast<size_t>(j)] / static_cast<double>(n);
            }
        }
    });
    return out;
}

Tensor std_rows_canonical(const Tensor& e) {
    require(e.rank() == 2, "std_rows_canonical expects an (N, K) matrix, got " +
                               shape_to_string(e.shape()));
    const int64_t n = e.extent(0), k = e.extent(1);
    Tensor out = Tensor::zeros({k});
    auto means = std::make_shared<std::vector<double>>(static_cast<size_t>(k));
    std::vector<double> col(static_cast<size_t>(n));
    std::vector<double> sq(static_cast<size_t>(n));
    for (int64_t j = 0; j < k; ++j) {
        for (int64_t i = 0; i < n; ++i) {
            col[static_cast<size_t>(i)] = e.values()[static_cast<size_t>(i * k + j)];
        }
        std::vector<double> tmp = col;
        std::sort(tmp.begin(), tmp.end());
        // Equal column values have exactly zero spread; the summed mean would
        // round and leave ~1e-16 residue.
        if (tmp.front() == tmp.back()) {
            (*means)[static_cast<size_t>(j)] = tmp.front();
            out.values()[static_cast<size_t>(j)] = 0.0;
            continue;
        }
        double mean = 0.0;
        for (double v : tmp) {
            mean += v;
        }
        mean /= static_cast<double>(n);
        (*means)[static_cast<size_t>(j)] = mean;
        for (int64_t i = 0; i < n; ++i) {
            const double d = col[static_cast<size_t>(i)] - mean;
            sq[static_cast<size_t>(i)] = d * d;
        }
        std::vector<double> tmp2 = sq;
        out.values()[static_cast<size_t>(j)] =
            std::sqrt(sorted_sum(tmp2) / static_cast<double>(n));
    }
    finalize("std_rows_canonical", out, {&e}, [e, out, means, n, k]() mutable {
        if (!e.requires_grad()) {
            return;
        }
        // d sigma_j / d E_ij = (E_ij - mean_j) / (N * sigma_j); zero subgradient at sigma_j == 0.
        for (int64_t j = 0; j < k; ++j) {
            const double sigma = out.values()[static_cast<size_t>(j)];
            if (sigma == 0.0) {
                continue;
            }
            const double g = out.grad_buffer()[static_cast<size_t>(j)];
            const double mean = (*means)[static_cast<size_t>(j)];
            for (int64_t i = 0; i < n; ++i) {
                e.grad_buffer()[static_cast<size_t>(i * k + j)] +=
                    g * (e.values()[static_cast<size_t>(i * k + j)] - mean) /
                    (static_cast<double>(n) * sigma);
            }
        }
    });
    return out;
}

// --- gradient checking --------------------------------------------------------

double check_gradients(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                       double eps) {
    std::vector<std::vector<double>> autodiff;
    {
        for (const Tensor& p : params) {
            const_cast<Tensor&>(p).ensure_zero_grad();
        }
        TapeScope scope;
        Tensor loss = f();
        if (loss.size() != 1) {
            throw ContractError("check_gradients: f must return a scalar");
        }
        if (strict_numerics() && !std::isfinite(loss.item())) {
            throw NumericError("check_gradients: f produced a non-finite value");
        }
        backward(loss);
        for (const Tensor& p : params) {
            autodiff.push_back(p.grad_buffer());
        }
    }
    double max_rel = 0.0;
    NoGradScope no_grad;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = const_cast<Tensor&>(params[pi]);
        for (size_t ci = 0; ci < p.values().size(); ++ci) {
            const double orig = p.values()[ci];
            p.values()[ci] = orig + eps;
            const double f_plus = f().item();
            p.values()[ci] = orig - eps;
            const double f_minus = f().item();
            p.values()[ci] = orig;
            if (strict_numerics() && (!std::isfinite(f_plus) || !std::isfinite(f_minus))) {
                throw NumericError("check_gradients: f produced a non-finite value");
            }
            const double fd = (f_plus - f_minus) / (2.0 * eps);
            const double rel = std::abs(autodiff[pi][ci] - fd) / std::max(1.0, std::abs(fd));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace mism
