#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mism {

using Shape = std::vector<int64_t>;

std::string shape_to_string(const Shape& s);
int64_t shape_numel(const Shape& s);

// When strict numerics are on (the default), every op validates its output
// and throws NumericError on NaN/Inf instead of propagating it.
void set_strict_numerics(bool on);
bool strict_numerics();

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until an op or backward needs it
    bool requires_grad = false;
};
}  // namespace detail

// Dense row-major fp64 tensor. Copies share storage; training code updates
// parameters in place through any handle.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar_value(double v, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t rank() const { return static_cast<int64_t>(impl_->shape.size()); }
    int64_t extent(int64_t axis) const { return impl_->shape[static_cast<size_t>(axis)]; }
    int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }

    std::vector<double>& values() { return impl_->data; }
    const std::vector<double>& values() const { return impl_->data; }
    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    // Handles share storage, so backward steps accumulate through const
    // handles; this is the explicit mutable view they use.
    std::vector<double>& grad_buffer() const;
    void ensure_zero_grad();  // allocates (or re-zeroes) the grad buffer
    void clear_grad() { impl_->grad.clear(); }

    // Deep copy with no grad state.
    Tensor clone_detached() const;

    detail::TensorImpl* raw() const { return impl_.get(); }

  private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Ordered record of executed ops. Replaying it in reverse visits every
// recorded op exactly once; clearing releases all captured intermediates.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> backward_step);
    size_t num_recorded() const { return steps_.size(); }
    void replay_reverse();
    void clear();

    static Tape* active() noexcept;

  private:
    friend class TapeScope;
    friend class NoGradScope;
    std::vector<std::function<void()>> steps_;
};

// Activates a fresh tape on this thread for its lifetime.
class TapeScope {
  public:
    TapeScope();
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;
    Tape& tape() { return tape_; }

  private:
    Tape tape_;
    Tape* prev_;
};

// Suspends recording for its lifetime (inference / finite differences).
class NoGradScope {
  public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

  private:
    Tape* prev_;
};

// Runs reverse-mode accumulation from a scalar loss through the active tape,
// adding d(loss)/d(leaf) into each requires-grad leaf. Consumes the tape.
void backward(Tensor& loss);

// --- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_rowwise(const Tensor& m, const Tensor& v);
Tensor sum_all(const Tensor& a);
Tensor softmax(const Tensor& a, int64_t axis);
Tensor log_softmax(const Tensor& a, int64_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor gelu(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor stack_rows(const std::vector<Tensor>& rows);
Tensor row(const Tensor& m, int64_t i);
Tensor slice_cols(const Tensor& m, int64_t c0, int64_t c1);
Tensor concat_cols(const std::vector<Tensor>& parts);
// Embedding lookup; id -1 yields a zero row that receives no gradient.
Tensor embed_rows(const Tensor& table, const std::vector<int>& ids);
// Sum over rows t of -log_probs[t, targets[t]].
Tensor nll_pick_sum(const Tensor& log_probs, const std::vector<int>& targets);

// Column reductions over an (N, K) matrix that sum each column's values in
// ascending value order, making the result exactly invariant to row
// permutations. std_rows_canonical is the population (1/N) form.
Tensor mean_rows_canonical(const Tensor& e);
Tensor std_rows_canonical(const Tensor& e);

// --- verification ---------------------------------------------------------

// Compares reverse-mode gradients of f() against central finite differences
// over every coordinate of every parameter. Returns
// max |autodiff - fd| / max(1, |fd|).
double check_gradients(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                       double eps = 1e-5);

}  // namespace mism
