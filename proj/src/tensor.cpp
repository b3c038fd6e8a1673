#include "elastic/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

#include "elastic/errors.hpp"

namespace elastic {

namespace {

thread_local std::uint64_t t_flops = 0;
thread_local std::uint64_t t_live_bytes = 0;
thread_local std::uint64_t t_peak_bytes = 0;
thread_local std::uint64_t t_next_node_id = 1;
thread_local Tape* t_tape = nullptr;

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (const std::size_t e : shape) {
        n *= e;
    }
    return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

void account_alloc(std::uint64_t bytes) {
    t_live_bytes += bytes;
    t_peak_bytes = std::max(t_peak_bytes, t_live_bytes);
}

void account_free(std::uint64_t bytes) {
    t_live_bytes -= std::min<std::uint64_t>(bytes, t_live_bytes);
}

}  // namespace

namespace flops {
std::uint64_t count() { return t_flops; }
void reset() { t_flops = 0; }
void add(std::uint64_t n) { t_flops += n; }
}  // namespace flops

namespace membytes {
std::uint64_t live() { return t_live_bytes; }
std::uint64_t peak() { return t_peak_bytes; }
void reset_peak() { t_peak_bytes = t_live_bytes; }
}  // namespace membytes

struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::uint64_t id = 0;

    TensorNode(std::vector<std::size_t> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)), id(t_next_node_id++) {
        account_alloc(data.size() * sizeof(double));
    }

    ~TensorNode() {
        account_free((data.size() + grad.size()) * sizeof(double));
    }

    std::size_t numel() const { return data.size(); }

    void ensure_grad() {
        if (grad.empty() && !data.empty()) {
            grad.assign(data.size(), 0.0);
            account_alloc(grad.size() * sizeof(double));
        }
    }

    void drop_grad() {
        if (!grad.empty()) {
            account_free(grad.size() * sizeof(double));
            grad.clear();
            grad.shrink_to_fit();
        }
    }
};

namespace {

Tensor wrap(std::shared_ptr<TensorNode> node) {
    return make_tensor_from_node(std::move(node));
}

void check_positive_shape(const std::vector<std::size_t>& shape, const char* op) {
    if (shape.empty()) {
        throw DimensionError(std::string(op) + ": shape must have at least one extent");
    }
    for (const std::size_t e : shape) {
        if (e == 0) {
            throw DimensionError(std::string(op) + ": zero extent in shape " + shape_str(shape));
        }
    }
}

void check_valid(const Tensor& t, const char* op) {
    if (!t.valid()) {
        throw DimensionError(std::string(op) + ": empty tensor handle");
    }
}

void check_rank2(const Tensor& t, const char* op) {
    check_valid(t, op);
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected rank-2 tensor, got shape " +
                             shape_str(t.shape()));
    }
}

void check_finite(const std::vector<double>& values, const char* op) {
    for (const double v : values) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + ": produced non-finite value");
        }
    }
}

Tensor make_result(std::vector<std::size_t> shape, std::vector<double> values, const char* op) {
    check_finite(values, op);
    return wrap(std::make_shared<TensorNode>(std::move(shape), std::move(values)));
}

bool recording(std::initializer_list<const Tensor*> inputs) {
    if (t_tape == nullptr) {
        return false;
    }
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

// Raw kernels shared by forward and backward paths (backward work is not
// added to the FLOP counter; the counter tracks forward ops only).
void mm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t p,
            std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < p; ++kk) {
            const double av = a[i * p + kk];
            if (av == 0.0) continue;
            const double* brow = b + kk * n;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// c += aᵀ · b where a is m x p (so result is p x n).
void mm_ta_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t p,
               std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < p; ++kk) {
            const double av = a[i * p + kk];
            if (av == 0.0) continue;
            const double* brow = b + i * n;
            double* crow = c + kk * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// c += a · bᵀ where b is n x p (a is m x p, result m x n).
void mm_tb_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t p,
               std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double* arow = a + i * p;
            const double* brow = b + j * p;
            double acc = 0.0;
            for (std::size_t kk = 0; kk < p; ++kk) {
                acc += arow[kk] * brow[kk];
            }
            c[i * n + j] += acc;
        }
    }
}

}  // namespace

// ---- Tensor -------------------------------------------------------------

Tensor make_tensor_from_node(std::shared_ptr<TensorNode> node) {
    return Tensor(std::move(node));
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    check_positive_shape(shape, "zeros");
    const std::size_t n = shape_product(shape);
    return wrap(std::make_shared<TensorNode>(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    check_positive_shape(shape, "full");
    if (!std::isfinite(value)) {
        throw NumericError("full: non-finite fill value");
    }
    const std::size_t n = shape_product(shape);
    return wrap(std::make_shared<TensorNode>(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> values) {
    check_positive_shape(shape, "from_data");
    if (shape_product(shape) != values.size()) {
        throw DimensionError("from_data: shape " + shape_str(shape) + " expects " +
                             std::to_string(shape_product(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    check_finite(values, "from_data");
    return wrap(std::make_shared<TensorNode>(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double value) {
    return from_data({1}, {value});
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t m = rows.size();
    if (m == 0) {
        throw DimensionError("matrix: no rows");
    }
    const std::size_t n = rows.begin()->size();
    std::vector<double> values;
    values.reserve(m * n);
    for (const auto& row : rows) {
        if (row.size() != n) {
            throw DimensionError("matrix: ragged rows");
        }
        values.insert(values.end(), row.begin(), row.end());
    }
    return from_data({m, n}, std::move(values));
}

Tensor Tensor::randn(std::vector<std::size_t> shape, RngState& rng, double stddev) {
    check_positive_shape(shape, "randn");
    const std::size_t n = shape_product(shape);
    std::vector<double> values(n);
    for (double& v : values) {
        v = rng.normal() * stddev;
    }
    return wrap(std::make_shared<TensorNode>(std::move(shape), std::move(values)));
}

const std::vector<std::size_t>& Tensor::shape() const {
    check_valid(*this, "shape");
    return node_->shape;
}

std::size_t Tensor::rank() const {
    return shape().size();
}

std::size_t Tensor::numel() const {
    check_valid(*this, "numel");
    return node_->numel();
}

std::size_t Tensor::rows() const {
    check_rank2(*this, "rows");
    return node_->shape[0];
}

std::size_t Tensor::cols() const {
    check_rank2(*this, "cols");
    return node_->shape[1];
}

std::span<const double> Tensor::data() const {
    check_valid(*this, "data");
    return {node_->data.data(), node_->data.size()};
}

std::span<double> Tensor::mutable_data() {
    check_valid(*this, "mutable_data");
    return {node_->data.data(), node_->data.size()};
}

double Tensor::at(std::size_t i) const {
    const auto d = data();
    if (i >= d.size()) {
        throw DimensionError("at: flat index out of range");
    }
    return d[i];
}

double Tensor::at(std::size_t i, std::size_t j) const {
    check_rank2(*this, "at");
    if (i >= node_->shape[0] || j >= node_->shape[1]) {
        throw DimensionError("at: index out of range for shape " + shape_str(node_->shape));
    }
    return node_->data[i * node_->shape[1] + j];
}

bool Tensor::requires_grad() const {
    return node_ && node_->requires_grad;
}

Tensor& Tensor::set_requires_grad(bool v) {
    check_valid(*this, "set_requires_grad");
    node_->requires_grad = v;
    return *this;
}

bool Tensor::has_grad() const {
    return node_ && !node_->grad.empty();
}

std::span<const double> Tensor::grad() const {
    check_valid(*this, "grad");
    if (node_->grad.empty()) {
        throw ContractError("grad: no gradient accumulated for this tensor");
    }
    return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
    check_valid(*this, "zero_grad");
    node_->drop_grad();
}

Tensor Tensor::detach() const {
    check_valid(*this, "detach");
    return wrap(std::make_shared<TensorNode>(node_->shape, node_->data));
}

std::uint64_t Tensor::node_id() const {
    check_valid(*this, "node_id");
    return node_->id;
}

// ---- Tape ----------------------------------------------------------------

void Tape::record(std::function<void()> backward_step) {
    steps_.push_back(std::move(backward_step));
}

void Tape::run_backward() {
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
        (*it)();
    }
    clear();
}

void Tape::clear() {
    steps_.clear();
}

Tape* active_tape() {
    return t_tape;
}

TapeScope::TapeScope() : previous_(t_tape) {
    t_tape = &tape_;
}

TapeScope::~TapeScope() {
    t_tape = previous_;
}

void backward(const Tensor& loss) {
    check_valid(loss, "backward");
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " +
                            shape_str(loss.shape()));
    }
    if (t_tape == nullptr) {
        throw ContractError("backward: no active tape");
    }
    auto node = loss.node();
    node->ensure_grad();
    node->grad[0] = 1.0;
    t_tape->run_backward();
}

// ---- Ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_rank2(a, "matmul");
    check_rank2(b, "matmul");
    const std::size_t m = a.rows(), p = a.cols(), n = b.cols();
    if (b.rows() != p) {
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    mm_acc(a.data().data(), b.data().data(), out.data(), m, p, n);
    flops::add(static_cast<std::uint64_t>(2) * m * p * n);
    Tensor result = make_result({m, n}, std::move(out), "matmul");
    if (recording({&a, &b})) {
        result.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = result.node();
        t_tape->record([an, bn, on, m, p, n]() {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                mm_tb_acc(on->grad.data(), bn->data.data(), an->grad.data(), m, n, p);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                mm_ta_acc(an->data.data(), on->grad.data(), bn->grad.data(), m, p, n);
            }
        });
    }
    return result;
}

Tensor transpose(const Tensor& a) {
    check_rank2(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    const auto src = a.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[j * m + i] = src[i * n + j];
        }
    }
    flops::add(m * n);
    Tensor result = make_result({n, m}, std::move(out), "transpose");
    if (recording({&a})) {
        result.set_requires_grad(true);
        auto an = a.node(), on = result.node();
        t_tape->record([an, on, m, n]() {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    an->grad[i * n + j] += on->grad[j * m + i];
                }
            }
        });
    }
    return result;
}

Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
    check_valid(a, "reshape");
    check_positive_shape(shape, "reshape");
    if (shape_product(shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    flops::add(out.size());
    Tensor result = make_result(std::move(shape), std::move(out), "reshape");
    if (recording({&a})) {
        result.set_requires_grad(true);
        auto an = a.node(), on = result.node();
        t_tape->record([an, on]() {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                an->grad[i] += on->grad[i];
            }
        });
    }
    return result;
}

namespace {

enum class BinKind { add, sub, mul };

Tensor binary_same_shape(const Tensor& a, const Tensor& b, BinKind kind, const char* op) {
    check_valid(a, op);
    check_valid(b, op);
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<double> out(ad.size());
    switch (kind) {
        case BinKind::add:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
            break;
        case BinKind::sub:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
            break;
        case BinKind::mul:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
            break;
    }
    flops::add(out.size());
    Tensor result = make_result(a.shape(), std::move(out), op);
    if (recording({&a, &b})) {
        result.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = result.node();
        t_tape->record([an, bn, on, kind]() {
            if (on->grad.empty()) return;
            const auto& g = on->grad;
            if (an->requires_grad) {
                an->ensure_grad();
                if (kind == BinKind::mul) {
                    for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bn->data[i];
                } else {
                    for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                switch (kind) {
                    case BinKind::add:
                        for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i];
                        break;
                    case BinKind::sub:
                        for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] -= g[i];
                        break;
                    case BinKind::mul:
                        for (std::size_t i = 0; i < g.size(); ++i)
                            bn->grad[i] += g[i] * an->data[i];
                        break;
                }
            }
        });
    }
    return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_same_shape(a, b, BinKind::add, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_same_shape(a, b, BinKind::sub, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_same_shape(a, b, BinKind::mul, "mul");
}

Tensor add_rows(const Tensor& a, const Tensor& row) {
    check_rank2(a, "add_rows");
    check_rank2(row, "add_rows");
    const std::size_t m = a.rows(), n = a.cols();
    if (row.rows() != 1 || row.cols() != n) {
        throw DimensionError("add_rows: row must be 1x" + std::to_string(n) + ", got " +
                             shape_str(row.shape()));
    }
    const auto ad = a.data();
    const auto rd = row.data();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = ad[i * n + j] + rd[j];
        }
    }
    flops::add(m * n);
    Tensor result = make_result({m, n}, std::move(out), "add_rows");
    if (recording({&a, &row})) {
        result.set_requires_grad(true);
        auto an = a.node(), rn = row.node(), on = result.node();
        t_tape->record([an, rn, on, m, n]() {
            if (on->grad.empty()) return;
            const auto& g = on->grad;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
            }
            if (rn->requires_grad) {
                rn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        rn->grad[j] += g[i * n + j];
                    }
                }
            }
        });
    }
    return result;
}

Tensor mul_rows(const Tensor& a, const Tensor& row) {
    check_rank2(a, "mul_rows");
    check_rank2(row, "mul_rows");
    const std::size_t m = a.rows(), n = a.cols();
    if (row.rows() != 1 || row.cols() != n) {
        throw DimensionError("mul_rows: row must be 1x" + std::to_string(n) + ", got " +
                             shape_str(row.shape()));
    }
    const auto ad = a.data();
    const auto rd = row.data();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = ad[i * n + j] * rd[j];
        }
    }
    flops::add(m * n);
    Tensor result = make_result({m, n}, std::move(out), "mul_rows");
    if (recording({&a, &row})) {
        result.set_requires_grad(true);
        auto an = a.node(), rn = row.node(), on = result.node();
        t_tape->record([an, rn, on, m, n]() {
            if (on->grad.empty()) return;
            const auto& g = on->grad;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        an->grad[i * n + j] += g[i * n + j] * rn->data[j];
                    }
                }
            }
            if (rn->requires_grad) {
                rn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        rn->grad[j] += g[i * n + j] * an->data[i * n + j];
                    }
                }
            }
        });
    }
    return result;
}

Tensor mul_cols(const Tensor& a, const Tensor& col) {
    check_rank2(a, "mul_cols");
    check_rank2(col, "mul_cols");
    const std::size_t m = a.rows(), n = a.cols();
    if (col.rows() != m || col.cols() != 1) {
        throw DimensionError("mul_cols: col must be " + std::to_string(m) + "x1, got " +
                             shape_str(col.shape()));
    }
    const auto ad = a.data();
    const auto cd = col.data();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = ad[i * n + j] * cd[i];
        }
    }
    flops::add(m * n);
    Tensor result = make_result({m, n}, std::move(out), "mul_cols");
    if (recording({&a, &col})) {
        result.set_requires_grad(true);
        auto an = a.node(), cn = col.node(), on = result.node();
        t_tape->record([an, cn, on, m, n]() {
            if (on->grad.empty()) return;
            const auto& g = on->grad;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        an->grad[i * n + j] += g[i * n + j] * cn->data[i];
                    }
                }
            }
            if (cn->requires_grad) {
                cn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        cn->grad[i] += g[i * n + j] * an->data[i * n + j];
                    }
                }
            }
        });
    }
    return result;
}

Tensor scale(const Tensor& a, double c) {
    check_valid(a, "scale");
    if (!std::isfinite(c)) {
        throw NumericError("scale: non-finite factor");
    }
    const auto ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * c;
    flops::add(out.size());
    Tensor result = make_result(a.shape(), std::move(out), "scale");
    if (recording({&a})) {
        result.set_requires_grad(true);
        auto an = a.node(), on = result.node();
        t_tape->record([an, on, c]() {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                an->grad[i] += on->grad[i] * c;
            }
        });
    }
    return result;
}

Tensor relu(const Tensor& a) {
    check_valid(a, "relu");
    const auto ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] > 0.0 ? ad[i] : 0.0;
    flops::add(out.size());
    Tensor result = make_result(a.shape(), std::move(out), "relu");
    if (recording({&a})) {
        result.set_requires_grad(true);
        auto an = a.node(), on = result.node();
        t_tape->record([an, on]() {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                if (an->data[i] > 0.0) an->grad[i] += on->grad[i];
            }
        });
    }
    return result;
}

Tensor gelu(const Tensor& a) {
    check_valid(a, "gelu");
    constexpr double kRoot2OverPi = 0.7978845608028654;
    constexpr double kCubic = 0.044715;
    const auto ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = ad[i];
        const double t = std::tanh(kRoot2OverPi * (x + kCubic * x * x * x));
        out[i] = 0.5 * x * (1.0 + t);
    }
    flops::add(5 * out.size());
    Tensor result = make_result(a.shape(), std::move(out), "gelu");
    if (recording({&a})) {
        result.set_requires_grad(true);
        auto an = a.node(), on = result.node();
        t_tape->record([an, on]() {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                const double x = an->data[i];
                const double u = kRoot2OverPi * (x + kCubic * x * x * x);
                const double t = std::tanh(u);
                const double du = kRoot2OverPi * (1.0 + 3.0 * kCubic * x * x);
                const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                an->grad[i] += on->grad[i] * d;
            }
        });
    }
    return result;
}

Tensor softmax_rows(const Tensor& a) {
    check_rank2(a, "softmax_rows");
    const std::size_t m = a.rows(), n = a.cols();
    const auto ad = a.data();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = ad.data() + i * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double e = std::exp(row[j] - mx);
            out[i * n + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
    }
    flops::add(5 * m * n);
    Tensor result = make_result({m, n}, std::move(out), "softmax_rows");
    if (recording({&a})) {
        result.set_requires_grad(true);
        auto an = a.node(), on = result.node();
        t_tape->record([an, on, m, n]() {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                const double* y = on->data.data() + i * n;
                const double* gy = on->grad.data() + i * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += y[j] * gy[j];
                for (std::size_t j = 0; j < n; ++j) {
                    an->grad[i * n + j] += y[j] * (gy[j] - dot);
                }
            }
        });
    }
    return result;
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& offset, double eps) {
    check_rank2(x, "layer_norm_rows");
    check_rank2(gain, "layer_norm_rows");
    check_rank2(offset, "layer_norm_rows");
    const std::size_t m = x.rows(), n = x.cols();
    if (gain.rows() != 1 || gain.cols() != n || offset.rows() != 1 || offset.cols() != n) {
        throw DimensionError("layer_norm_rows: gain/offset must be 1x" + std::to_string(n));
    }
    const auto xd = x.data();
    const auto gd = gain.data();
    const auto bd = offset.data();
    std::vector<double> out(m * n);
    std::vector<double> xhat(m * n);
    std::vector<double> inv(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = xd.data() + i * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = row[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        inv[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (row[j] - mu) * inv[i];
            xhat[i * n + j] = h;
            out[i * n + j] = gd[j] * h + bd[j];
        }
    }
    flops::add(5 * m * n);
    Tensor result = make_result({m, n}, std::move(out), "layer_norm_rows");
    if (recording({&x, &gain, &offset})) {
        result.set_requires_grad(true);
        auto xn = x.node(), gn = gain.node(), bn = offset.node(), on = result.node();
        t_tape->record([xn, gn, bn, on, m, n, xhat = std::move(xhat), inv = std::move(inv)]() {
            if (on->grad.empty()) return;
            const auto& g = on->grad;
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dxh = g[i * n + j] * gn->data[j];
                        m1 += dxh;
                        m2 += dxh * xhat[i * n + j];
                    }
                    m1 /= static_cast<double>(n);
                    m2 /= static_cast<double>(n);
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dxh = g[i * n + j] * gn->data[j];
                        xn->grad[i * n + j] += inv[i] * (dxh - m1 - xhat[i * n + j] * m2);
                    }
                }
            }
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        gn->grad[j] += g[i * n + j] * xhat[i * n + j];
                    }
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        bn->grad[j] += g[i * n + j];
                    }
                }
            }
        });
    }
    return result;
}

namespace {

Tensor reduce_all(const Tensor& a, bool take_mean, const char* op) {
    check_valid(a, op);
    const auto ad = a.data();
    double acc = 0.0;
    for (const double v : ad) acc += v;
    const double denom = take_mean ? static_cast<double>(ad.size()) : 1.0;
    flops::add(ad.size());
    Tensor result = make_result({1}, {acc / denom}, op);
    if (recording({&a})) {
        result.set_requires_grad(true);
        auto an = a.node(), on = result.node();
        t_tape->record([an, on, denom]() {
            if (on->grad.empty()) return;
            an->ensure_grad();
            const double g = on->grad[0] / denom;
            for (double& v : an->grad) v += g;
        });
    }
    return result;
}

}  // namespace

Tensor sum(const Tensor& a) {
    return reduce_all(a, false, "sum");
}

Tensor mean(const Tensor& a) {
    return reduce_all(a, true, "mean");
}

namespace {

Tensor reduce_rows(const Tensor& a, bool take_mean, const char* op) {
    check_rank2(a, op);
    const std::size_t m = a.rows(), n = a.cols();
    const auto ad = a.data();
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[j] += ad[i * n + j];
        }
    }
    const double denom = take_mean ? static_cast<double>(m) : 1.0;
    if (take_mean) {
        for (double& v : out) v /= denom;
    }
    flops::add(m * n);
    Tensor result = make_result({1, n}, std::move(out), op);
    if (recording({&a})) {
        result.set_requires_grad(true);
        auto an = a.node(), on = result.node();
        t_tape->record([an, on, m, n, denom]() {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    an->grad[i * n + j] += on->grad[j] / denom;
                }
            }
        });
    }
    return result;
}

}  // namespace

Tensor sum_over_rows(const Tensor& a) {
    return reduce_rows(a, false, "sum_over_rows");
}

Tensor mean_over_rows(const Tensor& a) {
    return reduce_rows(a, true, "mean_over_rows");
}

Tensor sum_over_cols(const Tensor& a) {
    check_rank2(a, "sum_over_cols");
    const std::size_t m = a.rows(), n = a.cols();
    const auto ad = a.data();
    std::vector<double> out(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i] += ad[i * n + j];
        }
    }
    flops::add(m * n);
    Tensor result = make_result({m, 1}, std::move(out), "sum_over_cols");
    if (recording({&a})) {
        result.set_requires_grad(true);
        auto an = a.node(), on = result.node();
        t_tape->record([an, on, m, n]() {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    an->grad[i * n + j] += on->grad[i];
                }
            }
        });
    }
    return result;
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) {
        throw DimensionError("concat_rows: no inputs");
    }
    const std::size_t n = parts[0].cols();
    std::size_t total_rows = 0;
    for (const Tensor& p : parts) {
        check_rank2(p, "concat_rows");
        if (p.cols() != n) {
            throw DimensionError("concat_rows: column mismatch");
        }
        total_rows += p.rows();
    }
    std::vector<double> out;
    out.reserve(total_rows * n);
    for (const Tensor& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    flops::add(out.size());
    Tensor result = make_result({total_rows, n}, std::move(out), "concat_rows");
    bool any_grad = false;
    for (const Tensor& p : parts) {
        if (p.requires_grad()) any_grad = true;
    }
    if (t_tape != nullptr && any_grad) {
        result.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorNode>> part_nodes;
        part_nodes.reserve(parts.size());
        for (const Tensor& p : parts) part_nodes.push_back(p.node());
        auto on = result.node();
        t_tape->record([part_nodes = std::move(part_nodes), on]() {
            if (on->grad.empty()) return;
            std::size_t offset = 0;
            for (const auto& pn : part_nodes) {
                const std::size_t count = pn->data.size();
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (std::size_t i = 0; i < count; ++i) {
                        pn->grad[i] += on->grad[offset + i];
                    }
                }
                offset += count;
            }
        });
    }
    return result;
}

Tensor slice_rows(const Tensor& a, std::size_t row_begin, std::size_t row_end) {
    check_rank2(a, "slice_rows");
    const std::size_t m = a.rows(), n = a.cols();
    if (row_begin >= row_end || row_end > m) {
        throw DimensionError("slice_rows: invalid range [" + std::to_string(row_begin) + ", " +
                             std::to_string(row_end) + ") for " + std::to_string(m) + " rows");
    }
    const std::size_t k = row_end - row_begin;
    const auto ad = a.data();
    std::vector<double> out(ad.begin() + row_begin * n, ad.begin() + row_end * n);
    flops::add(out.size());
    Tensor result = make_result({k, n}, std::move(out), "slice_rows");
    if (recording({&a})) {
        result.set_requires_grad(true);
        auto an = a.node(), on = result.node();
        t_tape->record([an, on, row_begin, n]() {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                an->grad[row_begin * n + i] += on->grad[i];
            }
        });
    }
    return result;
}

Tensor slice_cols(const Tensor& a, std::size_t col_begin, std::size_t col_end) {
    check_rank2(a, "slice_cols");
    const std::size_t m = a.rows(), n = a.cols();
    if (col_begin >= col_end || col_end > n) {
        throw DimensionError("slice_cols: invalid range [" + std::to_string(col_begin) + ", " +
                             std::to_string(col_end) + ") for " + std::to_string(n) + " cols");
    }
    const std::size_t k = col_end - col_begin;
    const auto ad = a.data();
    std::vector<double> out(m * k);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            out[i * k + j] = ad[i * n + col_begin + j];
        }
    }
    flops::add(out.size());
    Tensor result = make_result({m, k}, std::move(out), "slice_cols");
    if (recording({&a})) {
        result.set_requires_grad(true);
        auto an = a.node(), on = result.node();
        t_tape->record([an, on, m, n, k, col_begin]() {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < k; ++j) {
                    an->grad[i * n + col_begin + j] += on->grad[i * k + j];
                }
            }
        });
    }
    return result;
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
    check_rank2(table, "gather_rows");
    const std::size_t v = table.rows(), n = table.cols();
    if (indices.empty()) {
        throw DimensionError("gather_rows: no indices");
    }
    for (const std::size_t idx : indices) {
        if (idx >= v) {
            throw DimensionError("gather_rows: index " + std::to_string(idx) +
                                 " out of range for " + std::to_string(v) + " rows");
        }
    }
    const auto td = table.data();
    std::vector<double> out(indices.size() * n);
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const double* src = td.data() + indices[r] * n;
        std::copy(src, src + n, out.begin() + r * n);
    }
    flops::add(out.size());
    Tensor result = make_result({indices.size(), n}, std::move(out), "gather_rows");
    if (recording({&table})) {
        result.set_requires_grad(true);
        auto tn = table.node(), on = result.node();
        std::vector<std::size_t> idx(indices.begin(), indices.end());
        t_tape->record([tn, on, idx = std::move(idx), n]() {
            if (on->grad.empty()) return;
            tn->ensure_grad();
            for (std::size_t r = 0; r < idx.size(); ++r) {
                for (std::size_t j = 0; j < n; ++j) {
                    tn->grad[idx[r] * n + j] += on->grad[r * n + j];
                }
            }
        });
    }
    return result;
}

Tensor cross_entropy_logits(const Tensor& logits, std::size_t target) {
    check_rank2(logits, "cross_entropy_logits");
    if (logits.rows() != 1) {
        throw DimensionError("cross_entropy_logits: logits must be 1xN");
    }
    const std::size_t n = logits.cols();
    if (target >= n) {
        throw ContractError("cross_entropy_logits: target " + std::to_string(target) +
                            " out of range for " + std::to_string(n) + " classes");
    }
    const auto zd = logits.data();
    double mx = zd[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, zd[j]);
    std::vector<double> probs(n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        probs[j] = std::exp(zd[j] - mx);
        z += probs[j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[j] /= z;
    const double loss = std::log(z) + mx - zd[target];
    flops::add(7 * n);
    Tensor result = make_result({1}, {loss}, "cross_entropy_logits");
    if (recording({&logits})) {
        result.set_requires_grad(true);
        auto ln = logits.node(), on = result.node();
        t_tape->record([ln, on, probs = std::move(probs), target]() {
            if (on->grad.empty()) return;
            ln->ensure_grad();
            const double g = on->grad[0];
            for (std::size_t j = 0; j < probs.size(); ++j) {
                ln->grad[j] += g * (probs[j] - (j == target ? 1.0 : 0.0));
            }
        });
    }
    return result;
}

}  // namespace elastic
