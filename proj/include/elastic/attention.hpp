#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "elastic/tensor.hpp"

namespace elastic {

// Named parameter list; registration order is the checkpoint order.
using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// Projection triple for one attention site. All projections are d x d.
struct AttentionParams {
    Tensor w_q, w_k, w_v;
};

AttentionParams init_attention_params(std::size_t dim, std::uint64_t seed,
                                      const std::string& name);
void collect_params(const AttentionParams& p, const std::string& prefix, NamedParams& out);

// Scaled dot-product attention: softmax(Q Kᵀ / sqrt(d)) V with Q from
// query_input and K, V from kv_input.
Tensor cross_attention(const Tensor& query_input, const Tensor& kv_input,
                       const AttentionParams& params);

// Quadratic reference: query/key/value all from x.
Tensor self_attention(const Tensor& x, const AttentionParams& params);

// Interest tokens p (k x d) attend over the sequence x (N x d). O(Nk).
Tensor lda_aggregate(const Tensor& p, const Tensor& x, const AttentionParams& params);

// Sequence tokens query the aggregated interests p_next (k x d). O(Nk).
Tensor lda_dispatch(const Tensor& x, const Tensor& p_next, const AttentionParams& params);

// Two-layer position-wise feedforward, d -> 2d -> d with GELU.
struct FeedForwardParams {
    Tensor w1, b1, w2, b2;
};

FeedForwardParams init_feed_forward_params(std::size_t dim, std::uint64_t seed,
                                           const std::string& name);
void collect_params(const FeedForwardParams& p, const std::string& prefix, NamedParams& out);

Tensor feed_forward(const Tensor& x, const FeedForwardParams& params);

struct LayerNormParams {
    Tensor gain, offset;  // 1 x d each
};

LayerNormParams init_layer_norm_params(std::size_t dim);
void collect_params(const LayerNormParams& p, const std::string& prefix, NamedParams& out);

// One dispatcher layer: aggregate into the interest stream, dispatch back to
// the sequence stream, then a feedforward with residual on each stream.
// Pre-normalization on every sub-block input when use_norm is set.
struct LdaLayerParams {
    AttentionParams aggregate;
    AttentionParams dispatch;
    FeedForwardParams ffn_x;
    FeedForwardParams ffn_p;
    bool use_norm = true;
    LayerNormParams ln_agg_q, ln_agg_kv, ln_p_ffn;
    LayerNormParams ln_dis_q, ln_dis_kv, ln_x_ffn;
};

LdaLayerParams init_lda_layer_params(std::size_t dim, bool use_norm, std::uint64_t seed,
                                     const std::string& name);
void collect_params(const LdaLayerParams& p, const std::string& prefix, NamedParams& out);

// Returns (x_out, p_out), shapes (N x d, k x d).
std::pair<Tensor, Tensor> lda_layer(const Tensor& x, const Tensor& p,
                                    const LdaLayerParams& params);

struct LdaStack {
    std::vector<LdaLayerParams> layers;
};

LdaStack init_lda_stack(std::size_t dim, std::size_t num_layers, bool use_norm,
                        std::uint64_t seed, const std::string& name);
void collect_params(const LdaStack& s, const std::string& prefix, NamedParams& out);

// Threads (x, p) through every layer and returns the final sequence
// representation X^L.
Tensor lda_stack_forward(const Tensor& x0, const Tensor& p0, const LdaStack& stack);

// Plain pre-norm self-attention encoder layer; backbone of the
// no-dispatcher variant.
struct SelfAttnLayerParams {
    AttentionParams attn;
    FeedForwardParams ffn;
    bool use_norm = true;
    LayerNormParams ln_attn, ln_ffn;
};

SelfAttnLayerParams init_self_attn_layer_params(std::size_t dim, bool use_norm,
                                                std::uint64_t seed, const std::string& name);
void collect_params(const SelfAttnLayerParams& p, const std::string& prefix, NamedParams& out);

Tensor self_attn_layer(const Tensor& x, const SelfAttnLayerParams& params);

}  // namespace elastic
