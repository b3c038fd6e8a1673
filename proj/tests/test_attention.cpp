#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "elastic/attention.hpp"
#include "elastic/errors.hpp"
#include "elastic/rng.hpp"
#include "elastic/tensor.hpp"
#include "gradcheck.hpp"

using namespace elastic;
using elastic_test::gradcheck;

namespace {

// Independent dense-loop reference for scaled dot-product attention.
std::vector<double> ref_attention(const std::vector<double>& xq, std::size_t m,
                                  const std::vector<double>& xkv, std::size_t n,
                                  const std::vector<double>& wq, const std::vector<double>& wk,
                                  const std::vector<double>& wv, std::size_t d) {
    auto project = [d](const std::vector<double>& in, std::size_t rows,
                       const std::vector<double>& w) {
        std::vector<double> out(rows * d, 0.0);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t c = 0; c < d; ++c)
                for (std::size_t j = 0; j < d; ++j) out[i * d + j] += in[i * d + c] * w[c * d + j];
        return out;
    };
    const std::vector<double> q = project(xq, m, wq);
    const std::vector<double> k = project(xkv, n, wk);
    const std::vector<double> v = project(xkv, n, wv);
    std::vector<double> out(m * d, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        std::vector<double> row(n, 0.0);
        double mx = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += q[i * d + c] * k[j * d + c];
            row[j] = s / std::sqrt(static_cast<double>(d));
            mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            z += row[j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            const double a = row[j] / z;
            for (std::size_t c = 0; c < d; ++c) out[i * d + c] += a * v[j * d + c];
        }
    }
    return out;
}

std::vector<double> tensor_values(const Tensor& t) {
    return {t.data().begin(), t.data().end()};
}

AttentionParams random_params(std::size_t d, std::uint64_t seed) {
    return init_attention_params(d, seed, "t");
}

void zero_fill(Tensor t) {
    for (double& v : t.mutable_data()) v = 0.0;
}

}  // namespace

TEST_CASE("single-token self-attention reduces to the value projection") {
    RngState rng(31);
    const Tensor x = Tensor::randn({1, 4}, rng);
    const AttentionParams p = random_params(4, 5);
    const Tensor out = self_attention(x, p);
    const Tensor expected = matmul(x, p.w_v);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        CHECK(out.at(i) == doctest::Approx(expected.at(i)).epsilon(1e-12));
    }
}

TEST_CASE("zero query/key weights give uniform attention") {
    RngState rng(37);
    const Tensor x = Tensor::randn({5, 3}, rng);
    AttentionParams p = random_params(3, 7);
    zero_fill(p.w_q);
    zero_fill(p.w_k);
    zero_fill(p.w_v);
    for (std::size_t i = 0; i < 3; ++i) p.w_v.mutable_data()[i * 3 + i] = 1.0;  // identity

    const Tensor out = self_attention(x, p);
    for (std::size_t j = 0; j < 3; ++j) {
        double col_mean = 0.0;
        for (std::size_t i = 0; i < 5; ++i) col_mean += x.at(i, j);
        col_mean /= 5.0;
        for (std::size_t i = 0; i < 5; ++i) {
            CHECK(out.at(i, j) == doctest::Approx(col_mean).epsilon(1e-12));
        }
    }
}

TEST_CASE("self-attention matches the dense loop reference") {
    RngState rng(41);
    const Tensor x = Tensor::randn({3, 2}, rng);
    const AttentionParams p = random_params(2, 43);
    const Tensor out = self_attention(x, p);
    const auto expected = ref_attention(tensor_values(x), 3, tensor_values(x), 3,
                                        tensor_values(p.w_q), tensor_values(p.w_k),
                                        tensor_values(p.w_v), 2);
    for (std::size_t i = 0; i < expected.size(); ++i) {
        CHECK(std::abs(out.at(i) - expected[i]) < 1e-12);
    }
}

TEST_CASE("aggregate with zero query weights averages the projected sequence") {
    RngState rng(47);
    const Tensor x = Tensor::randn({6, 4}, rng);
    const Tensor p0 = Tensor::randn({1, 4}, rng);
    AttentionParams p = random_params(4, 53);
    zero_fill(p.w_q);
    const Tensor out = lda_aggregate(p0, x, p);
    const Tensor projected = matmul(x, p.w_v);
    for (std::size_t j = 0; j < 4; ++j) {
        double col_mean = 0.0;
        for (std::size_t i = 0; i < 6; ++i) col_mean += projected.at(i, j);
        col_mean /= 6.0;
        CHECK(out.at(0, j) == doctest::Approx(col_mean).epsilon(1e-12));
    }
}

TEST_CASE("aggregate and dispatch match the loop reference") {
    RngState rng(59);
    const Tensor x = Tensor::randn({4, 2}, rng);
    const Tensor p0 = Tensor::randn({2, 2}, rng);
    const AttentionParams par = random_params(2, 61);

    const Tensor agg = lda_aggregate(p0, x, par);
    const auto agg_ref = ref_attention(tensor_values(p0), 2, tensor_values(x), 4,
                                       tensor_values(par.w_q), tensor_values(par.w_k),
                                       tensor_values(par.w_v), 2);
    for (std::size_t i = 0; i < agg_ref.size(); ++i) {
        CHECK(std::abs(agg.at(i) - agg_ref[i]) < 1e-12);
    }

    const Tensor dis = lda_dispatch(x, p0, par);
    const auto dis_ref = ref_attention(tensor_values(x), 4, tensor_values(p0), 2,
                                       tensor_values(par.w_q), tensor_values(par.w_k),
                                       tensor_values(par.w_v), 2);
    for (std::size_t i = 0; i < dis_ref.size(); ++i) {
        CHECK(std::abs(dis.at(i) - dis_ref[i]) < 1e-12);
    }
}

TEST_CASE("dispatch with a single interest token copies its value row") {
    RngState rng(67);
    const Tensor x = Tensor::randn({4, 3}, rng);
    const Tensor p_next = Tensor::randn({1, 3}, rng);
    const AttentionParams par = random_params(3, 71);
    const Tensor out = lda_dispatch(x, p_next, par);
    const Tensor v = matmul(p_next, par.w_v);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(out.at(i, j) == doctest::Approx(v.at(0, j)).epsilon(1e-12));
        }
    }
}

TEST_CASE("aggregate cost is linear in sequence length") {
    const std::size_t k = 8, d = 32;
    RngState rng(73);
    const AttentionParams par = random_params(d, 79);
    const Tensor p0 = Tensor::randn({k, d}, rng);

    auto measure = [&](std::size_t n) {
        RngState local(101 + n);
        const Tensor x = Tensor::randn({n, d}, local);
        flops::reset();
        lda_aggregate(p0, x, par);
        return static_cast<double>(flops::count());
    };
    const double ratio = measure(512) / measure(256);
    CHECK(ratio > 1.9);
    CHECK(ratio < 2.1);

    auto measure_dispatch = [&](std::size_t n) {
        RngState local(103 + n);
        const Tensor x = Tensor::randn({n, d}, local);
        flops::reset();
        lda_dispatch(x, p0, par);
        return static_cast<double>(flops::count());
    };
    const double dratio = measure_dispatch(512) / measure_dispatch(256);
    CHECK(dratio > 1.9);
    CHECK(dratio < 2.1);
}

TEST_CASE("self-attention cost is quadratic in sequence length") {
    const std::size_t d = 32;
    const AttentionParams par = random_params(d, 83);
    auto measure = [&](std::size_t n) {
        RngState local(107 + n);
        const Tensor x = Tensor::randn({n, d}, local);
        flops::reset();
        self_attention(x, par);
        return static_cast<double>(flops::count());
    };
    const double ratio = measure(512) / measure(256);
    CHECK(ratio > 3.5);
    CHECK(ratio < 4.5);
}

TEST_CASE("feedforward with zero second layer is the identity around the residual") {
    RngState rng(89);
    LdaLayerParams layer = init_lda_layer_params(4, false, 91, "l");
    zero_fill(layer.ffn_x.w2);
    zero_fill(layer.ffn_x.b2);
    zero_fill(layer.ffn_p.w2);
    zero_fill(layer.ffn_p.b2);

    const Tensor x = Tensor::randn({6, 4}, rng);
    const Tensor p = Tensor::randn({2, 4}, rng);
    auto [x_out, p_out] = lda_layer(x, p, layer);

    // With a zeroed FFN output, each stream equals its post-attention value.
    const Tensor p_mid = add(p, lda_aggregate(p, x, layer.aggregate));
    const Tensor x_mid = add(x, lda_dispatch(x, p_mid, layer.dispatch));
    for (std::size_t i = 0; i < x_out.numel(); ++i) {
        CHECK(x_out.at(i) == doctest::Approx(x_mid.at(i)).epsilon(1e-12));
    }
    for (std::size_t i = 0; i < p_out.numel(); ++i) {
        CHECK(p_out.at(i) == doctest::Approx(p_mid.at(i)).epsilon(1e-12));
    }
}

TEST_CASE("lda layer shape contract") {
    RngState rng(97);
    const LdaLayerParams layer = init_lda_layer_params(8, true, 101, "l");
    const Tensor x = Tensor::randn({16, 8}, rng);
    const Tensor p = Tensor::randn({4, 8}, rng);
    auto [x_out, p_out] = lda_layer(x, p, layer);
    CHECK(x_out.rows() == 16);
    CHECK(x_out.cols() == 8);
    CHECK(p_out.rows() == 4);
    CHECK(p_out.cols() == 8);
}

TEST_CASE("lda layer gradients match finite differences") {
    RngState rng(103);
    const LdaLayerParams layer = init_lda_layer_params(4, true, 109, "l");
    Tensor x = Tensor::randn({8, 4}, rng, 0.5).set_requires_grad(true);
    Tensor p = Tensor::randn({2, 4}, rng, 0.5).set_requires_grad(true);

    NamedParams named;
    collect_params(layer, "l", named);
    std::vector<Tensor> params{x, p};
    for (auto& [name, t] : named) params.push_back(t);

    const auto forward = [&]() {
        auto [x_out, p_out] = lda_layer(x, p, layer);
        return add(mean(x_out), mean(p_out));
    };
    const auto report = gradcheck(params, forward);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("stack composition equals manual layer chaining") {
    RngState rng(113);
    const LdaStack stack = init_lda_stack(4, 2, true, 127, "s");
    const Tensor x = Tensor::randn({6, 4}, rng);
    const Tensor p = Tensor::randn({2, 4}, rng);

    const LdaStack first{{stack.layers[0]}};
    const Tensor single = lda_stack_forward(x, p, first);
    auto [x1, p1] = lda_layer(x, p, stack.layers[0]);
    for (std::size_t i = 0; i < single.numel(); ++i) {
        CHECK(single.at(i) == x1.at(i));
    }

    const Tensor full = lda_stack_forward(x, p, stack);
    auto [x2, p2] = lda_layer(x1, p1, stack.layers[1]);
    for (std::size_t i = 0; i < full.numel(); ++i) {
        CHECK(full.at(i) == x2.at(i));
    }
}

TEST_CASE("stack cost is layer count times single-layer cost") {
    RngState rng(131);
    const LdaStack stack = init_lda_stack(8, 3, true, 137, "s");
    const Tensor x = Tensor::randn({32, 8}, rng);
    const Tensor p = Tensor::randn({4, 8}, rng);

    flops::reset();
    lda_stack_forward(x, p, LdaStack{{stack.layers[0]}});
    const double single = static_cast<double>(flops::count());
    flops::reset();
    lda_stack_forward(x, p, stack);
    const double triple = static_cast<double>(flops::count());
    CHECK(triple == doctest::Approx(3.0 * single).epsilon(0.01));
}

TEST_CASE("full stack cost doubles when the sequence doubles") {
    const LdaStack stack = init_lda_stack(8, 2, true, 151, "s");
    RngState rng(149);
    const Tensor p = Tensor::randn({4, 8}, rng);
    auto measure = [&](std::size_t n) {
        RngState local(157 + n);
        const Tensor x = Tensor::randn({n, 8}, local);
        flops::reset();
        lda_stack_forward(x, p, stack);
        return static_cast<double>(flops::count());
    };
    const double ratio = measure(512) / measure(256);
    CHECK(ratio > 1.8);
    CHECK(ratio < 2.2);
}

TEST_CASE("dispatch output is invariant to permuting interest tokens") {
    RngState rng(139);
    const Tensor x = Tensor::randn({5, 4}, rng);
    const Tensor p = Tensor::randn({3, 4}, rng);
    const AttentionParams par = random_params(4, 149);

    const std::vector<std::size_t> perm{2, 0, 1};
    const Tensor p_perm = gather_rows(p, perm);

    const Tensor out = lda_dispatch(x, p, par);
    const Tensor out_perm = lda_dispatch(x, p_perm, par);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        CHECK(std::abs(out.at(i) - out_perm.at(i)) < 1e-12);
    }
}
