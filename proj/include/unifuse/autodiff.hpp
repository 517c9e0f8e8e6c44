#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unifuse/tensor.hpp"

namespace unifuse {

/// A named, shaped block of model weights. `index` is assigned by the owning
/// ParameterSet and addresses the matching slot in a Gradients object.
struct Parameter {
    std::string name;
    Tensor2 value;
    bool trainable = true;
    std::size_t index = 0;
};

/// Owns parameters with stable addresses and insertion order. Insertion order
/// defines checkpoint section order and gradient slot order.
class ParameterSet {
public:
    Parameter& add(std::string name, std::size_t rows, std::size_t cols, bool trainable = true);

    [[nodiscard]] Parameter& at(std::string_view name);
    [[nodiscard]] const Parameter& at(std::string_view name) const;
    [[nodiscard]] Parameter* find(std::string_view name) noexcept;
    [[nodiscard]] const Parameter* find(std::string_view name) const noexcept;

    [[nodiscard]] std::size_t size() const noexcept { return params_.size(); }
    [[nodiscard]] Parameter& operator[](std::size_t i) noexcept { return *params_[i]; }
    [[nodiscard]] const Parameter& operator[](std::size_t i) const noexcept { return *params_[i]; }

    /// Total scalar count, optionally restricted to trainable parameters.
    [[nodiscard]] std::size_t scalar_count(bool trainable_only = false) const noexcept;

    void set_trainable_prefix(std::string_view prefix, bool trainable);

private:
    std::vector<std::unique_ptr<Parameter>> params_;
};

/// One gradient tensor per parameter, shaped like the parameter. Slots for
/// frozen parameters stay zero.
class Gradients {
public:
    Gradients() = default;
    explicit Gradients(const ParameterSet& params);

    [[nodiscard]] Tensor2& operator[](std::size_t i) noexcept { return grads_[i]; }
    [[nodiscard]] const Tensor2& operator[](std::size_t i) const noexcept { return grads_[i]; }
    [[nodiscard]] std::size_t size() const noexcept { return grads_.size(); }

    /// True once a backward pass reached parameter i (cleared by zero()).
    [[nodiscard]] bool touched(std::size_t i) const noexcept { return touched_[i] != 0; }
    void mark_touched(std::size_t i) noexcept { touched_[i] = 1; }

    void zero();
    void add(const Gradients& other);
    void scale(double s);
    [[nodiscard]] double global_norm() const;

private:
    std::vector<Tensor2> grads_;
    std::vector<std::uint8_t> touched_;
};

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    [[nodiscard]] const Tensor2& value() const;
    [[nodiscard]] std::size_t rows() const { return value().rows(); }
    [[nodiscard]] std::size_t cols() const { return value().cols(); }
};

/// Reverse-mode autodiff tape. Nodes are recorded in evaluation order and
/// replayed backwards. Nodes that do not depend on any trainable parameter are
/// never differentiated, so frozen weights cost no weight-gradient work.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    /// A tape built with grad_enabled = false treats every parameter as frozen,
    /// so no op keeps backward state. Used for evaluation.
    explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor2 value);
    /// Leaf referring to a parameter; its value is not copied, so the parameter
    /// must outlive the tape and stay unchanged until backward() returns.
    Var param(const Parameter& p);

    /// Records an op node. `needs_grad` should be true when any parent needs a gradient.
    Var record(Tensor2 value, std::vector<std::size_t> parents, BackwardFn backward);

    [[nodiscard]] const Tensor2& value(std::size_t id) const;
    [[nodiscard]] bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    /// Gradient buffer of a node, allocated on first access.
    Tensor2& grad(std::size_t id);

    /// Backpropagates from a 1x1 root, accumulating into `out` (which must be
    /// shaped for the parameter set the leaves came from).
    void backward(Var root, Gradients& out, double seed = 1.0);

    [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor2 owned;
        const Parameter* param = nullptr;
        Tensor2 grad;
        bool needs_grad = false;
        std::vector<std::size_t> parents;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    bool grad_enabled_ = true;
};

namespace ops {

Var matmul(Var a, Var b);
/// a * b^T.
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var scale(Var x, double s);
/// y = x W + b with W (C_in x C_out) and b (1 x C_out).
Var affine(Var x, Var weights, Var bias);
Var gelu(Var x);
/// Per-row normalization with gain/shift of shape 1 x D.
Var layer_norm(Var x, Var gain, Var shift, double eps = 1e-5);
/// Valid (unpadded) strided 1-D convolution over rows. weights has shape
/// (k * C_in) x C_out where row (j * C_in + c) is tap j, input channel c.
/// `what` names the caller in length errors.
Var conv1d(Var x, Var weights, Var bias, std::size_t kernel, std::size_t stride, std::string_view what = "conv1d");
/// Repeats the first and last row `n` times on each side.
Var edge_extend(Var x, std::size_t n);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
/// Rows [begin, end) of x.
Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var gather_rows(Var table, std::span<const std::size_t> ids);
/// Multi-head causal attention core: softmax(Q K^T / sqrt(d_h) + causal) V per head.
Var causal_attention(Var q, Var k, Var v, std::size_t n_heads);
/// Same core over several sequences stacked row-wise: `segments` lists their
/// lengths in order, and no row attends outside its own sequence.
Var causal_attention(Var q, Var k, Var v, std::size_t n_heads, std::span<const std::size_t> segments);

struct AttentionWeights {
    Var wq, bq, wk, bk, wv, bv, wo, bo;
};
/// Projections around causal_attention. Position t depends on rows <= t only.
Var causal_self_attention(Var x, std::size_t n_heads, const AttentionWeights& w);

enum class Reduction { mean, sum };
/// Masked softmax cross-entropy with max-subtraction, returned as 1x1.
/// Throws ConfigError when the mask selects no position.
Var softmax_cross_entropy(Var logits, std::span<const std::size_t> targets, std::span<const std::uint8_t> mask,
                          Reduction reduction = Reduction::mean);
/// sum(x .* w) as a 1x1 node; handy for probing gradients of any op.
Var weighted_sum(Var x, const Tensor2& w);

}  // namespace ops

/// Result of a finite-difference gradient comparison.
struct GradReport {
    double max_rel_err = 0.0;  ///< over elements whose absolute error exceeds the floor
    double max_abs_err = 0.0;
    std::string worst_param;
    bool passed = true;
    std::size_t checked = 0;
};

struct GradCheckOptions {
    double eps = 1e-6;
    double rel_tol = 1e-4;
    double abs_floor = 1e-7;
};

/// One block of the flat parameter view: values are perturbed in place,
/// `analytic` holds the gradient to verify.
struct GradCheckEntry {
    std::string name;
    std::span<double> values;
    std::span<const double> analytic;
};

/// Compares analytic gradients with central differences
/// (f(p+eps) - f(p-eps)) / (2 eps). An element passes when its relative error
/// is within rel_tol or its absolute error within abs_floor.
GradReport grad_check(const std::function<double()>& loss_fn, std::span<const GradCheckEntry> params,
                      const GradCheckOptions& options = {});

/// grad_check over every trainable parameter of `params`, with the analytic
/// gradient taken from a tape built by `build`.
GradReport grad_check(ParameterSet& params, const std::function<Var(Tape&)>& build,
                      const GradCheckOptions& options = {});

/// Gaussian initialisation helper.
void fill_normal(Tensor2& t, double stddev, std::mt19937_64& rng);

}  // namespace unifuse
