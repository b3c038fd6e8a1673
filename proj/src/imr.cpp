#include "elastic/imr.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>

#include "elastic/errors.hpp"

namespace elastic {

std::size_t bank_root(std::size_t bank_size) {
    if (bank_size == 0) {
        throw ConfigError("bank size must be positive");
    }
    const auto root = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(bank_size))));
    if (root * root != bank_size) {
        throw ConfigError("bank size " + std::to_string(bank_size) + " is not a perfect square");
    }
    return root;
}

SubKeySets init_sub_key_sets(std::size_t bank_size, std::size_t dim, std::uint64_t seed,
                             const std::string& name) {
    if (dim % 2 != 0) {
        throw ConfigError("embedding dim must be even for product keys");
    }
    const std::size_t root = bank_root(bank_size);
    SubKeySets s;
    RngState rng_c = RngState(seed).fork(name + ".c");
    RngState rng_cp = RngState(seed).fork(name + ".c_prime");
    s.c_keys = Tensor::randn({root, dim / 2}, rng_c, 0.02).set_requires_grad(true);
    s.c_prime_keys = Tensor::randn({root, dim / 2}, rng_cp, 0.02).set_requires_grad(true);
    return s;
}

void collect_params(const SubKeySets& p, const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".c", p.c_keys);
    out.emplace_back(prefix + ".c_prime", p.c_prime_keys);
}

ExpertBank init_expert_bank(std::size_t bank_size, std::size_t dim, std::uint64_t seed,
                            const std::string& name) {
    bank_root(bank_size);
    ExpertBank b;
    RngState rng = RngState(seed).fork(name + ".experts");
    b.experts = Tensor::randn({bank_size, dim}, rng, 0.02).set_requires_grad(true);
    return b;
}

void collect_params(const ExpertBank& p, const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".experts", p.experts);
}

std::size_t query_network_stage_count(std::size_t seq_len, std::size_t stride) {
    if (stride < 2) {
        throw ConfigError("query network stride must be at least 2");
    }
    std::size_t count = 0;
    std::size_t len = seq_len;
    while (len > 1 && len % stride == 0) {
        len /= stride;
        ++count;
    }
    return count;
}

QueryNetworkParams init_query_network(std::size_t seq_len, std::size_t stride, std::size_t dim,
                                      std::uint64_t seed, const std::string& name) {
    QueryNetworkParams qn;
    qn.stride = stride;
    const std::size_t stages = query_network_stage_count(seq_len, stride);
    qn.stages.reserve(stages);
    for (std::size_t s = 0; s < stages; ++s) {
        QueryStageParams stage;
        const std::string stage_name = name + ".stage" + std::to_string(s);
        RngState rng = RngState(seed).fork(stage_name + ".proj_w");
        stage.proj_w = Tensor::randn({stride * dim, dim}, rng, 0.02).set_requires_grad(true);
        stage.proj_b = Tensor::zeros({1, dim}).set_requires_grad(true);
        stage.attn = init_attention_params(dim, seed, stage_name + ".attn");
        qn.stages.push_back(std::move(stage));
    }
    return qn;
}

void collect_params(const QueryNetworkParams& p, const std::string& prefix, NamedParams& out) {
    for (std::size_t s = 0; s < p.stages.size(); ++s) {
        const std::string stage_prefix = prefix + ".stage" + std::to_string(s);
        out.emplace_back(stage_prefix + ".proj_w", p.stages[s].proj_w);
        out.emplace_back(stage_prefix + ".proj_b", p.stages[s].proj_b);
        collect_params(p.stages[s].attn, stage_prefix + ".attn", out);
    }
}

Tensor query_network(const Tensor& x, const QueryNetworkParams& params) {
    const std::size_t dim = x.cols();
    const std::size_t expected_stages = query_network_stage_count(x.rows(), params.stride);
    if (expected_stages != params.stages.size()) {
        throw ContractError("query_network: input length " + std::to_string(x.rows()) +
                            " needs " + std::to_string(expected_stages) +
                            " stages, network has " + std::to_string(params.stages.size()));
    }
    Tensor h = x;
    for (const QueryStageParams& stage : params.stages) {
        const std::size_t len = h.rows();
        h = reshape(h, {len / params.stride, params.stride * dim});
        h = add_rows(matmul(h, stage.proj_w), stage.proj_b);
        h = self_attention(h, stage.attn);
    }
    return mean_over_rows(h);
}

namespace {

void check_query(const Tensor& q, std::size_t dim, const char* op) {
    if (q.rank() != 2 || q.rows() != 1 || q.cols() != dim) {
        throw DimensionError(std::string(op) + ": query must be 1x" + std::to_string(dim));
    }
}

struct Scored {
    double score;
    std::size_t index;
};

// Non-increasing score, ties by lower index.
bool scored_before(const Scored& a, const Scored& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;
}

}  // namespace

RetrievalResult retrieve_bruteforce(const Tensor& q, const ExpertBank& bank,
                                    const SubKeySets& sub, std::size_t k) {
    const std::size_t bank_size = bank.experts.rows();
    const std::size_t dim = bank.experts.cols();
    const std::size_t root = bank_root(bank_size);
    const std::size_t half = dim / 2;
    check_query(q, dim, "retrieve_bruteforce");
    if (k == 0 || k > bank_size) {
        throw ContractError("retrieve_bruteforce: k must be in [1, K]");
    }

    const auto qd = q.data();
    const auto cd = sub.c_keys.data();
    const auto cpd = sub.c_prime_keys.data();

    std::vector<Scored> all(bank_size);
    for (std::size_t i = 0; i < root; ++i) {
        for (std::size_t j = 0; j < root; ++j) {
            // Score against the concatenated key (c_i, c'_j), one running sum.
            double s = 0.0;
            for (std::size_t c = 0; c < half; ++c) s += qd[c] * cd[i * half + c];
            for (std::size_t c = 0; c < half; ++c) s += qd[half + c] * cpd[j * half + c];
            const std::size_t id = i * root + j;
            all[id] = {s, id};
        }
    }
    flops::add(static_cast<std::uint64_t>(2) * bank_size * dim);

    std::partial_sort(all.begin(), all.begin() + k, all.end(), scored_before);
    RetrievalResult result;
    result.indices.reserve(k);
    result.scores.reserve(k);
    for (std::size_t t = 0; t < k; ++t) {
        result.indices.push_back(all[t].index);
        result.scores.push_back(all[t].score);
    }
    return result;
}

RetrievalResult retrieve_product_keys(const Tensor& q, const ExpertBank& bank,
                                      const SubKeySets& sub, std::size_t k) {
    const std::size_t bank_size = bank.experts.rows();
    const std::size_t dim = bank.experts.cols();
    const std::size_t root = bank_root(bank_size);
    const std::size_t half = dim / 2;
    check_query(q, dim, "retrieve_product_keys");
    if (k == 0 || k > root) {
        throw ContractError("retrieve_product_keys: k must be in [1, sqrt(K)], got k=" +
                            std::to_string(k) + " with sqrt(K)=" + std::to_string(root));
    }

    const auto qd = q.data();
    const auto cd = sub.c_keys.data();
    const auto cpd = sub.c_prime_keys.data();

    auto sub_topk = [&](const std::span<const double>& keys, std::size_t offset) {
        std::vector<Scored> scored(root);
        for (std::size_t i = 0; i < root; ++i) {
            double s = 0.0;
            for (std::size_t c = 0; c < half; ++c) s += qd[offset + c] * keys[i * half + c];
            scored[i] = {s, i};
        }
        std::partial_sort(scored.begin(), scored.begin() + k, scored.end(), scored_before);
        scored.resize(k);
        return scored;
    };
    const std::vector<Scored> top_c = sub_topk(cd, 0);
    const std::vector<Scored> top_cp = sub_topk(cpd, half);
    flops::add(static_cast<std::uint64_t>(2) * root * dim);

    // Score the k*k candidate pairs against their concatenated keys.
    std::vector<Scored> candidates;
    candidates.reserve(k * k);
    for (const Scored& a : top_c) {
        for (const Scored& b : top_cp) {
            double s = 0.0;
            for (std::size_t c = 0; c < half; ++c) s += qd[c] * cd[a.index * half + c];
            double s2 = 0.0;
            for (std::size_t c = 0; c < half; ++c) s2 += qd[half + c] * cpd[b.index * half + c];
            candidates.push_back({s + s2, a.index * root + b.index});
        }
    }
    flops::add(static_cast<std::uint64_t>(k) * k * (2 * dim + 1));

    std::partial_sort(candidates.begin(), candidates.begin() + k, candidates.end(), scored_before);
    RetrievalResult result;
    result.indices.reserve(k);
    result.scores.reserve(k);
    for (std::size_t t = 0; t < k; ++t) {
        result.indices.push_back(candidates[t].index);
        result.scores.push_back(candidates[t].score);
    }
    return result;
}

Tensor gather_experts(const RetrievalResult& result, const ExpertBank& bank,
                      const SubKeySets& sub, const Tensor& q, bool score_weighting) {
    const Tensor gathered = gather_rows(bank.experts, result.indices);
    if (!score_weighting) {
        return gathered;
    }
    const std::size_t dim = bank.experts.cols();
    const std::size_t root = bank_root(bank.experts.rows());
    const std::size_t half = dim / 2;
    const std::size_t k = result.indices.size();

    std::vector<std::size_t> c_idx(k), cp_idx(k);
    for (std::size_t t = 0; t < k; ++t) {
        c_idx[t] = result.indices[t] / root;
        cp_idx[t] = result.indices[t] % root;
    }
    const Tensor q1 = slice_cols(q, 0, half);
    const Tensor q2 = slice_cols(q, half, dim);
    const Tensor ck = gather_rows(sub.c_keys, c_idx);
    const Tensor cpk = gather_rows(sub.c_prime_keys, cp_idx);
    const Tensor scores =
        add(sum_over_cols(mul_rows(ck, q1)), sum_over_cols(mul_rows(cpk, q2)));  // k x 1
    const Tensor weights = reshape(softmax_rows(reshape(scores, {1, k})), {k, 1});
    return mul_cols(gathered, weights);
}

void collect_params(const ImrParams& p, const std::string& prefix, NamedParams& out) {
    collect_params(p.query_net, prefix + ".query", out);
    collect_params(p.sub_keys, prefix + ".keys", out);
    collect_params(p.bank, prefix + ".bank", out);
}

std::pair<Tensor, RetrievalResult> imr_forward(const Tensor& x, const ImrParams& params) {
    const Tensor q = query_network(x, params.query_net);
    return imr_forward_with_query(q, params);
}

std::pair<Tensor, RetrievalResult> imr_forward_with_query(const Tensor& q,
                                                          const ImrParams& params) {
    RetrievalResult result = retrieve_product_keys(q, params.bank, params.sub_keys, params.top_k);
    Tensor p0 = gather_experts(result, params.bank, params.sub_keys, q, params.score_weighting);
    return {std::move(p0), std::move(result)};
}

UsageStats::UsageStats(std::size_t bank_size)
    : load(bank_size, 0), traffic(bank_size, 0.0) {}

void UsageStats::record(const RetrievalResult& result) {
    if (result.indices.empty()) {
        throw ContractError("UsageStats::record: empty retrieval result");
    }
    double mx = result.scores[0];
    for (const double s : result.scores) mx = std::max(mx, s);
    double z = 0.0;
    std::vector<double> w(result.scores.size());
    for (std::size_t t = 0; t < result.scores.size(); ++t) {
        w[t] = std::exp(result.scores[t] - mx);
        z += w[t];
    }
    for (std::size_t t = 0; t < result.indices.size(); ++t) {
        const std::size_t id = result.indices[t];
        if (id >= load.size()) {
            throw ContractError("UsageStats::record: expert id out of range");
        }
        load[id] += 1;
        traffic[id] += w[t] / z;
    }
    ++queries;
}

std::uint64_t UsageStats::total_load() const {
    return std::accumulate(load.begin(), load.end(), std::uint64_t{0});
}

double UsageStats::usage_rate() const {
    if (load.empty()) return 0.0;
    std::size_t used = 0;
    for (const std::uint64_t l : load) {
        if (l > 0) ++used;
    }
    return static_cast<double>(used) / static_cast<double>(load.size());
}

UsageStats record_usage(std::span<const RetrievalResult> results, std::size_t bank_size) {
    UsageStats stats(bank_size);
    for (const RetrievalResult& r : results) {
        stats.record(r);
    }
    return stats;
}

void write_usage_table(std::ostream& os, const UsageStats& stats) {
    std::vector<std::size_t> order(stats.load.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (stats.load[a] != stats.load[b]) return stats.load[a] > stats.load[b];
        return a < b;
    });
    const double total = static_cast<double>(std::max<std::uint64_t>(stats.total_load(), 1));
    os << "expert_id\tload\ttraffic\tcum_load_frac\n";
    std::uint64_t running = 0;
    for (const std::size_t id : order) {
        running += stats.load[id];
        os << id << '\t' << stats.load[id] << '\t' << std::setprecision(6) << std::fixed
           << stats.traffic[id] << '\t' << static_cast<double>(running) / total << '\n';
        os.unsetf(std::ios_base::fixed);
    }
}

}  // namespace elastic
