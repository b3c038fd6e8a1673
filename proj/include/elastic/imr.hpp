#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "elastic/attention.hpp"
#include "elastic/tensor.hpp"

namespace elastic {

// Two learnable sub-key sets of sqrt(K) half-width keys each. Expert i of
// the bank corresponds to the pair (i / sqrt(K), i mod sqrt(K)); its full
// key is the concatenation of the two sub-keys.
struct SubKeySets {
    Tensor c_keys;        // sqrt(K) x d/2
    Tensor c_prime_keys;  // sqrt(K) x d/2
};

SubKeySets init_sub_key_sets(std::size_t bank_size, std::size_t dim, std::uint64_t seed,
                             const std::string& name);
void collect_params(const SubKeySets& p, const std::string& prefix, NamedParams& out);

// Pool of K learnable d-dimensional interest experts.
struct ExpertBank {
    Tensor experts;  // K x d
};

ExpertBank init_expert_bank(std::size_t bank_size, std::size_t dim, std::uint64_t seed,
                            const std::string& name);
void collect_params(const ExpertBank& p, const std::string& prefix, NamedParams& out);

// Returns sqrt(K), validating that K is a perfect square.
std::size_t bank_root(std::size_t bank_size);

// One pooling stage: reshape groups of `stride` tokens, project back to
// width d, run self-attention on the shortened sequence.
struct QueryStageParams {
    Tensor proj_w;  // (stride*d) x d
    Tensor proj_b;  // 1 x d
    AttentionParams attn;
};

struct QueryNetworkParams {
    std::vector<QueryStageParams> stages;
    std::size_t stride = 4;
};

// Number of stages the network applies for a given input length: one per
// division by `stride` while the length stays divisible and greater than 1.
std::size_t query_network_stage_count(std::size_t seq_len, std::size_t stride);

QueryNetworkParams init_query_network(std::size_t seq_len, std::size_t stride, std::size_t dim,
                                      std::uint64_t seed, const std::string& name);
void collect_params(const QueryNetworkParams& p, const std::string& prefix, NamedParams& out);

// N x d -> 1 x d query vector. The input length must match the stage plan
// the network was built for.
Tensor query_network(const Tensor& x, const QueryNetworkParams& params);

// Top-k retrieval outcome. Scores are non-increasing; ties are broken by
// the lower expert index. Indices are distinct.
struct RetrievalResult {
    std::vector<std::size_t> indices;
    std::vector<double> scores;
};

// Exact reference: scores the query against every concatenated key.
RetrievalResult retrieve_bruteforce(const Tensor& q, const ExpertBank& bank,
                                    const SubKeySets& sub, std::size_t k);

// Product-key retrieval: top-k per sub-key set, then exact top-k over the
// k x k candidate pairs. Requires k <= sqrt(K); returns the same indices and
// scores as retrieve_bruteforce.
RetrievalResult retrieve_product_keys(const Tensor& q, const ExpertBank& bank,
                                      const SubKeySets& sub, std::size_t k);

// Differentiable read of the selected experts. Plain gather by default;
// with score weighting each row is scaled by the softmax of its retrieval
// score, recomputed through the sub-keys so they receive gradient.
Tensor gather_experts(const RetrievalResult& result, const ExpertBank& bank,
                      const SubKeySets& sub, const Tensor& q, bool score_weighting);

struct ImrParams {
    QueryNetworkParams query_net;
    SubKeySets sub_keys;
    ExpertBank bank;
    std::size_t top_k = 8;
    bool score_weighting = false;
};

void collect_params(const ImrParams& p, const std::string& prefix, NamedParams& out);

// Full layer: query the sequence, retrieve, gather. Returns (P0, result).
std::pair<Tensor, RetrievalResult> imr_forward(const Tensor& x, const ImrParams& params);

// Variant with an externally supplied query (the no-query-net ablation).
std::pair<Tensor, RetrievalResult> imr_forward_with_query(const Tensor& q,
                                                          const ImrParams& params);

// Per-expert selection counts and softmax-normalized score mass.
struct UsageStats {
    explicit UsageStats(std::size_t bank_size);
    void record(const RetrievalResult& result);

    std::uint64_t total_load() const;
    double usage_rate() const;  // fraction of experts selected at least once

    std::vector<std::uint64_t> load;
    std::vector<double> traffic;
    std::uint64_t queries = 0;
};

UsageStats record_usage(std::span<const RetrievalResult> results, std::size_t bank_size);

// Tabular text output: expert_id, load, traffic, cumulative load fraction,
// sorted by load descending (ties by id).
void write_usage_table(std::ostream& os, const UsageStats& stats);

}  // namespace elastic
