#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "elastic/rng.hpp"

namespace elastic {

// Counts floating-point work performed by tensor ops on this thread.
// Conventions (fixed, forward ops only):
//   matmul                       2*m*p*n
//   add/sub/mul/scale/relu       output element count
//   data movement (reshape, transpose, concat, slice, gather)
//                                output element count
//   softmax / gelu / layer_norm  5 per output element
//   cross-entropy                7 per logit
//   reductions (sum, mean, ...)  input element count
namespace flops {
std::uint64_t count();
void reset();
void add(std::uint64_t n);
}  // namespace flops

// Live tensor-buffer byte accounting (data + gradient storage) per thread.
namespace membytes {
std::uint64_t live();
std::uint64_t peak();
void reset_peak();
}  // namespace membytes

struct TensorNode;

// Dense row-major tensor of doubles with optional reverse-mode gradient.
// A Tensor is a cheap shared handle; ops never mutate their inputs.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double value);
    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> values);
    static Tensor scalar(double value);
    // 2-D helper: rows given as nested braces.
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor randn(std::vector<std::size_t> shape, RngState& rng, double stddev = 1.0);

    bool valid() const { return node_ != nullptr; }

    const std::vector<std::size_t>& shape() const;
    std::size_t rank() const;
    std::size_t numel() const;
    // Rank-2 accessors.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> data() const;
    std::span<double> mutable_data();
    double at(std::size_t i) const;
    double at(std::size_t i, std::size_t j) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool v);

    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    // Value copy with no gradient tracking.
    Tensor detach() const;

    std::uint64_t node_id() const;

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<TensorNode> node_;

    friend Tensor make_tensor_from_node(std::shared_ptr<TensorNode> node);
};

Tensor make_tensor_from_node(std::shared_ptr<TensorNode> node);

// Ordered record of executed differentiable ops. Execution order is a
// topological order of the graph, so the backward pass simply walks the
// record in reverse, visiting each op once.
class Tape {
public:
    void record(std::function<void()> backward_step);
    void run_backward();  // reverse walk, then clear
    void clear();
    std::size_t size() const { return steps_.size(); }

private:
    std::vector<std::function<void()>> steps_;
};

// Thread-local active tape. Null means inference mode: ops compute values
// and count FLOPs but record nothing.
Tape* active_tape();

// RAII scope installing a fresh tape for one unit of work.
class TapeScope {
public:
    TapeScope();
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;
    Tape& tape() { return tape_; }

private:
    Tape tape_;
    Tape* previous_;
};

// ---- Ops ----------------------------------------------------------------
// All ops validate shapes (DimensionError) and reject non-finite outputs
// (NumericError). Gradients are recorded only while a tape is active.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<std::size_t> shape);

Tensor add(const Tensor& a, const Tensor& b);              // same shape
Tensor add_rows(const Tensor& a, const Tensor& row);       // m x n + 1 x n
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);              // elementwise
Tensor mul_rows(const Tensor& a, const Tensor& row);       // m x n ∘ 1 x n
Tensor mul_cols(const Tensor& a, const Tensor& col);       // m x n ∘ m x 1
Tensor scale(const Tensor& a, double c);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& offset,
                       double eps = 1e-5);

Tensor sum(const Tensor& a);             // -> {1}
Tensor mean(const Tensor& a);            // -> {1}
Tensor sum_over_rows(const Tensor& a);   // m x n -> 1 x n
Tensor sum_over_cols(const Tensor& a);   // m x n -> m x 1
Tensor mean_over_rows(const Tensor& a);  // m x n -> 1 x n

Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, std::size_t row_begin, std::size_t row_end);
Tensor slice_cols(const Tensor& a, std::size_t col_begin, std::size_t col_end);
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);

// Numerically stable -log softmax(logits)[target]; logits is 1 x n.
Tensor cross_entropy_logits(const Tensor& logits, std::size_t target);

// Seeds d(loss)/d(loss) = 1, runs the active tape backward and clears it.
// loss must be scalar.
void backward(const Tensor& loss);

}  // namespace elastic
