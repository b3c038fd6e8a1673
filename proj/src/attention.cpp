#include "elastic/attention.hpp"

#include <cmath>

#include "elastic/errors.hpp"

namespace elastic {

namespace {

constexpr double kInitStddev = 0.02;

Tensor init_weight(std::size_t rows, std::size_t cols, std::uint64_t seed,
                   const std::string& name) {
    RngState rng = RngState(seed).fork(name);
    return Tensor::randn({rows, cols}, rng, kInitStddev).set_requires_grad(true);
}

Tensor init_bias(std::size_t cols) {
    return Tensor::zeros({1, cols}).set_requires_grad(true);
}

}  // namespace

AttentionParams init_attention_params(std::size_t dim, std::uint64_t seed,
                                      const std::string& name) {
    AttentionParams p;
    p.w_q = init_weight(dim, dim, seed, name + ".w_q");
    p.w_k = init_weight(dim, dim, seed, name + ".w_k");
    p.w_v = init_weight(dim, dim, seed, name + ".w_v");
    return p;
}

void collect_params(const AttentionParams& p, const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".w_q", p.w_q);
    out.emplace_back(prefix + ".w_k", p.w_k);
    out.emplace_back(prefix + ".w_v", p.w_v);
}

Tensor cross_attention(const Tensor& query_input, const Tensor& kv_input,
                       const AttentionParams& params) {
    if (query_input.cols() != kv_input.cols()) {
        throw DimensionError("cross_attention: query and key/value widths differ");
    }
    const std::size_t dim = params.w_q.cols();
    if (query_input.cols() != params.w_q.rows()) {
        throw DimensionError("cross_attention: input width does not match projections");
    }
    const Tensor q = matmul(query_input, params.w_q);
    const Tensor k = matmul(kv_input, params.w_k);
    const Tensor v = matmul(kv_input, params.w_v);
    const Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dim)));
    const Tensor attn = softmax_rows(scores);
    return matmul(attn, v);
}

Tensor self_attention(const Tensor& x, const AttentionParams& params) {
    return cross_attention(x, x, params);
}

Tensor lda_aggregate(const Tensor& p, const Tensor& x, const AttentionParams& params) {
    return cross_attention(p, x, params);
}

Tensor lda_dispatch(const Tensor& x, const Tensor& p_next, const AttentionParams& params) {
    return cross_attention(x, p_next, params);
}

FeedForwardParams init_feed_forward_params(std::size_t dim, std::uint64_t seed,
                                           const std::string& name) {
    FeedForwardParams p;
    const std::size_t hidden = 2 * dim;
    p.w1 = init_weight(dim, hidden, seed, name + ".w1");
    p.b1 = init_bias(hidden);
    p.w2 = init_weight(hidden, dim, seed, name + ".w2");
    p.b2 = init_bias(dim);
    return p;
}

void collect_params(const FeedForwardParams& p, const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".w1", p.w1);
    out.emplace_back(prefix + ".b1", p.b1);
    out.emplace_back(prefix + ".w2", p.w2);
    out.emplace_back(prefix + ".b2", p.b2);
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& params) {
    const Tensor h = gelu(add_rows(matmul(x, params.w1), params.b1));
    return add_rows(matmul(h, params.w2), params.b2);
}

LayerNormParams init_layer_norm_params(std::size_t dim) {
    LayerNormParams p;
    p.gain = Tensor::full({1, dim}, 1.0).set_requires_grad(true);
    p.offset = Tensor::zeros({1, dim}).set_requires_grad(true);
    return p;
}

void collect_params(const LayerNormParams& p, const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".gain", p.gain);
    out.emplace_back(prefix + ".offset", p.offset);
}

LdaLayerParams init_lda_layer_params(std::size_t dim, bool use_norm, std::uint64_t seed,
                                     const std::string& name) {
    LdaLayerParams p;
    p.aggregate = init_attention_params(dim, seed, name + ".agg");
    p.dispatch = init_attention_params(dim, seed, name + ".dis");
    p.ffn_x = init_feed_forward_params(dim, seed, name + ".ffn_x");
    p.ffn_p = init_feed_forward_params(dim, seed, name + ".ffn_p");
    p.use_norm = use_norm;
    if (use_norm) {
        p.ln_agg_q = init_layer_norm_params(dim);
        p.ln_agg_kv = init_layer_norm_params(dim);
        p.ln_p_ffn = init_layer_norm_params(dim);
        p.ln_dis_q = init_layer_norm_params(dim);
        p.ln_dis_kv = init_layer_norm_params(dim);
        p.ln_x_ffn = init_layer_norm_params(dim);
    }
    return p;
}

void collect_params(const LdaLayerParams& p, const std::string& prefix, NamedParams& out) {
    collect_params(p.aggregate, prefix + ".agg", out);
    collect_params(p.dispatch, prefix + ".dis", out);
    collect_params(p.ffn_x, prefix + ".ffn_x", out);
    collect_params(p.ffn_p, prefix + ".ffn_p", out);
    if (p.use_norm) {
        collect_params(p.ln_agg_q, prefix + ".ln_agg_q", out);
        collect_params(p.ln_agg_kv, prefix + ".ln_agg_kv", out);
        collect_params(p.ln_p_ffn, prefix + ".ln_p_ffn", out);
        collect_params(p.ln_dis_q, prefix + ".ln_dis_q", out);
        collect_params(p.ln_dis_kv, prefix + ".ln_dis_kv", out);
        collect_params(p.ln_x_ffn, prefix + ".ln_x_ffn", out);
    }
}

namespace {

Tensor maybe_norm(const Tensor& t, const LayerNormParams& ln, bool use_norm) {
    return use_norm ? layer_norm_rows(t, ln.gain, ln.offset) : t;
}

}  // namespace

std::pair<Tensor, Tensor> lda_layer(const Tensor& x, const Tensor& p,
                                    const LdaLayerParams& params) {
    // Interest stream aggregates from the sequence, residual around attention.
    const Tensor p_agg = lda_aggregate(maybe_norm(p, params.ln_agg_q, params.use_norm),
                                       maybe_norm(x, params.ln_agg_kv, params.use_norm),
                                       params.aggregate);
    const Tensor p_mid = add(p, p_agg);

    // Sequence stream queries the freshly aggregated interests.
    const Tensor x_att = lda_dispatch(maybe_norm(x, params.ln_dis_q, params.use_norm),
                                      maybe_norm(p_mid, params.ln_dis_kv, params.use_norm),
                                      params.dispatch);
    const Tensor x_mid = add(x, x_att);

    const Tensor p_out =
        add(p_mid, feed_forward(maybe_norm(p_mid, params.ln_p_ffn, params.use_norm), params.ffn_p));
    const Tensor x_out =
        add(x_mid, feed_forward(maybe_norm(x_mid, params.ln_x_ffn, params.use_norm), params.ffn_x));
    return {x_out, p_out};
}

LdaStack init_lda_stack(std::size_t dim, std::size_t num_layers, bool use_norm,
                        std::uint64_t seed, const std::string& name) {
    if (num_layers == 0) {
        throw ContractError("init_lda_stack: need at least one layer");
    }
    LdaStack s;
    s.layers.reserve(num_layers);
    for (std::size_t i = 0; i < num_layers; ++i) {
        s.layers.push_back(
            init_lda_layer_params(dim, use_norm, seed, name + ".layer" + std::to_string(i)));
    }
    return s;
}

void collect_params(const LdaStack& s, const std::string& prefix, NamedParams& out) {
    for (std::size_t i = 0; i < s.layers.size(); ++i) {
        collect_params(s.layers[i], prefix + ".layer" + std::to_string(i), out);
    }
}

Tensor lda_stack_forward(const Tensor& x0, const Tensor& p0, const LdaStack& stack) {
    if (stack.layers.empty()) {
        throw ContractError("lda_stack_forward: empty stack");
    }
    Tensor x = x0;
    Tensor p = p0;
    for (const LdaLayerParams& layer : stack.layers) {
        auto [x_next, p_next] = lda_layer(x, p, layer);
        x = x_next;
        p = p_next;
    }
    return x;
}

SelfAttnLayerParams init_self_attn_layer_params(std::size_t dim, bool use_norm,
                                                std::uint64_t seed, const std::string& name) {
    SelfAttnLayerParams p;
    p.attn = init_attention_params(dim, seed, name + ".attn");
    p.ffn = init_feed_forward_params(dim, seed, name + ".ffn");
    p.use_norm = use_norm;
    if (use_norm) {
        p.ln_attn = init_layer_norm_params(dim);
        p.ln_ffn = init_layer_norm_params(dim);
    }
    return p;
}

void collect_params(const SelfAttnLayerParams& p, const std::string& prefix, NamedParams& out) {
    collect_params(p.attn, prefix + ".attn", out);
    collect_params(p.ffn, prefix + ".ffn", out);
    if (p.use_norm) {
        collect_params(p.ln_attn, prefix + ".ln_attn", out);
        collect_params(p.ln_ffn, prefix + ".ln_ffn", out);
    }
}

Tensor self_attn_layer(const Tensor& x, const SelfAttnLayerParams& params) {
    const Tensor att = self_attention(maybe_norm(x, params.ln_attn, params.use_norm), params.attn);
    const Tensor x_mid = add(x, att);
    const Tensor x_out =
        add(x_mid, feed_forward(maybe_norm(x_mid, params.ln_ffn, params.use_norm), params.ffn));
    return x_out;
}

}  // namespace elastic
