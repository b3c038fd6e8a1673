#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "elastic/attention.hpp"
#include "elastic/imr.hpp"
#include "elastic/tensor.hpp"

namespace elastic {

struct OptimizerConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct ModelConfig {
    std::size_t embed_dim = 32;   // d
    std::size_t max_len = 64;     // input window length N
    std::size_t num_layers = 2;   // L
    std::size_t top_k = 8;        // retrieved interest experts k
    std::size_t bank_size = 256;  // expert pool size K, a perfect square
    std::size_t stride = 4;       // query network pool size

    bool use_imr = true;         // off: one shared learnable interest block
    bool use_query_net = true;   // off: masked mean pooling builds the query
    bool use_dispatcher = true;  // off: plain self-attention encoder
    bool use_norm = true;
    bool score_weighting = false;
    bool mask_padding = true;

    OptimizerConfig optimizer;
    std::size_t batch_size = 128;
    std::size_t max_epochs = 500;
    std::size_t patience = 10;
    std::uint64_t seed = 42;

    void validate() const;  // throws ConfigError
};

// key=value lines, '#' comments. Unknown keys raise ConfigError naming the key.
ModelConfig parse_config_text(const std::string& text);
ModelConfig load_config_file(const std::filesystem::path& path);
void apply_override(ModelConfig& config, const std::string& key, const std::string& value);
std::string config_to_text(const ModelConfig& config);

struct ForwardTrace {
    bool imr_used = false;
    RetrievalResult retrieval;
};

// Embeddings -> interest retrieval -> dispatcher stack -> score every item.
class ElasticModel {
public:
    ElasticModel(const ModelConfig& config, std::size_t vocab_size);

    // window: padded dense-id window of length config.max_len (0 = padding).
    // Returns scores over the real items, shape 1 x vocab_size.
    // pinned_retrieval, when given, bypasses the top-k search and reuses the
    // supplied expert selection; retrieval indices are discrete, so gradient
    // checks differentiate the smooth remainder with the selection held
    // fixed.
    Tensor forward(std::span<const std::uint32_t> window, ForwardTrace* trace = nullptr,
                   const RetrievalResult* pinned_retrieval = nullptr) const;

    const ModelConfig& config() const { return config_; }
    std::size_t vocab_size() const { return vocab_size_; }
    const NamedParams& params() const { return params_; }
    NamedParams& params() { return params_; }

    Tensor item_embeddings;      // (vocab+1) x d; row 0 is the pad slot
    Tensor position_embeddings;  // N x d
    ImrParams imr;               // when use_imr and use_dispatcher
    Tensor shared_interests;     // k x d, the no-IMR fallback
    LdaStack stack;              // when use_dispatcher
    std::vector<SelfAttnLayerParams> encoder;  // when not use_dispatcher

private:
    ModelConfig config_;
    std::size_t vocab_size_;
    NamedParams params_;
};

// Cross-entropy of the target item under the softmax over all candidates.
// target is a dense item id in [1, vocab].
Tensor recommendation_loss(const Tensor& scores, std::uint32_t target);

// 1-based rank of the target among all candidate scores; score ties rank
// the lower item id first.
std::size_t rank_of_target(const Tensor& scores, std::uint32_t target);

}  // namespace elastic
