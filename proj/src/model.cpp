#include "elastic/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "elastic/errors.hpp"

namespace elastic {

void ModelConfig::validate() const {
    if (embed_dim < 2 || embed_dim % 2 != 0) {
        throw ConfigError("d must be an even value >= 2");
    }
    if (max_len == 0) throw ConfigError("max_len must be positive");
    if (num_layers == 0) throw ConfigError("layers must be positive");
    if (stride < 2) throw ConfigError("stride must be at least 2");
    const std::size_t root = bank_root(bank_size);  // checks the perfect square
    if (top_k == 0 || top_k > root) {
        throw ConfigError("k must be in [1, sqrt(bank_size)]; got k=" + std::to_string(top_k) +
                          " with sqrt(K)=" + std::to_string(root));
    }
    if (use_dispatcher && use_imr && use_query_net) {
        std::size_t len = max_len;
        while (len > 1 && len % stride == 0) len /= stride;
        if (len != 1) {
            throw ConfigError("max_len must be a power of stride when the query network is on");
        }
    }
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
    if (patience == 0) throw ConfigError("patience must be positive");
    if (!(optimizer.lr > 0.0)) throw ConfigError("lr must be positive");
    if (optimizer.beta1 < 0.0 || optimizer.beta1 >= 1.0 || optimizer.beta2 < 0.0 ||
        optimizer.beta2 >= 1.0) {
        throw ConfigError("betas must lie in [0, 1)");
    }
    if (!(optimizer.eps > 0.0)) throw ConfigError("eps must be positive");
}

namespace {

bool parse_bool(const std::string& value, const std::string& key) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config key '" + key + "' expects a boolean, got '" + value + "'");
}

std::size_t parse_size(const std::string& value, const std::string& key) {
    try {
        const long long v = std::stoll(value);
        if (v < 0) throw ConfigError("config key '" + key + "' must be non-negative");
        return static_cast<std::size_t>(v);
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        throw ConfigError("config key '" + key + "' expects an integer, got '" + value + "'");
    }
}

double parse_double(const std::string& value, const std::string& key) {
    try {
        return std::stod(value);
    } catch (...) {
        throw ConfigError("config key '" + key + "' expects a number, got '" + value + "'");
    }
}

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

}  // namespace

void apply_override(ModelConfig& config, const std::string& key, const std::string& value) {
    if (key == "d") {
        config.embed_dim = parse_size(value, key);
    } else if (key == "max_len") {
        config.max_len = parse_size(value, key);
    } else if (key == "layers") {
        config.num_layers = parse_size(value, key);
    } else if (key == "k") {
        config.top_k = parse_size(value, key);
    } else if (key == "bank_size") {
        config.bank_size = parse_size(value, key);
    } else if (key == "stride") {
        config.stride = parse_size(value, key);
    } else if (key == "use_imr") {
        config.use_imr = parse_bool(value, key);
    } else if (key == "use_query_net") {
        config.use_query_net = parse_bool(value, key);
    } else if (key == "use_dispatcher") {
        config.use_dispatcher = parse_bool(value, key);
    } else if (key == "use_norm") {
        config.use_norm = parse_bool(value, key);
    } else if (key == "score_weighting") {
        config.score_weighting = parse_bool(value, key);
    } else if (key == "mask_padding") {
        config.mask_padding = parse_bool(value, key);
    } else if (key == "lr") {
        config.optimizer.lr = parse_double(value, key);
    } else if (key == "beta1") {
        config.optimizer.beta1 = parse_double(value, key);
    } else if (key == "beta2") {
        config.optimizer.beta2 = parse_double(value, key);
    } else if (key == "eps") {
        config.optimizer.eps = parse_double(value, key);
    } else if (key == "batch_size") {
        config.batch_size = parse_size(value, key);
    } else if (key == "max_epochs") {
        config.max_epochs = parse_size(value, key);
    } else if (key == "patience") {
        config.patience = parse_size(value, key);
    } else if (key == "seed") {
        config.seed = static_cast<std::uint64_t>(std::stoull(value));
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

ModelConfig parse_config_text(const std::string& text) {
    ModelConfig config;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t comment = line.find('#');
        if (comment != std::string::npos) line.resize(comment);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) +
                              " is not key=value: '" + line + "'");
        }
        apply_override(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return config;
}

ModelConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open config " + path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_config_text(buffer.str());
}

std::string config_to_text(const ModelConfig& c) {
    std::ostringstream os;
    os << "d=" << c.embed_dim << '\n'
       << "max_len=" << c.max_len << '\n'
       << "layers=" << c.num_layers << '\n'
       << "k=" << c.top_k << '\n'
       << "bank_size=" << c.bank_size << '\n'
       << "stride=" << c.stride << '\n'
       << "use_imr=" << (c.use_imr ? "true" : "false") << '\n'
       << "use_query_net=" << (c.use_query_net ? "true" : "false") << '\n'
       << "use_dispatcher=" << (c.use_dispatcher ? "true" : "false") << '\n'
       << "use_norm=" << (c.use_norm ? "true" : "false") << '\n'
       << "score_weighting=" << (c.score_weighting ? "true" : "false") << '\n'
       << "mask_padding=" << (c.mask_padding ? "true" : "false") << '\n';
    os.precision(17);
    os << "lr=" << c.optimizer.lr << '\n'
       << "beta1=" << c.optimizer.beta1 << '\n'
       << "beta2=" << c.optimizer.beta2 << '\n'
       << "eps=" << c.optimizer.eps << '\n'
       << "batch_size=" << c.batch_size << '\n'
       << "max_epochs=" << c.max_epochs << '\n'
       << "patience=" << c.patience << '\n'
       << "seed=" << c.seed << '\n';
    return os.str();
}

ElasticModel::ElasticModel(const ModelConfig& config, std::size_t vocab_size)
    : config_(config), vocab_size_(vocab_size) {
    config_.validate();
    if (vocab_size_ == 0) {
        throw ConfigError("model needs a non-empty item vocabulary");
    }
    const std::size_t d = config_.embed_dim;
    const std::uint64_t seed = config_.seed;

    RngState emb_rng = RngState(seed).fork("item_embeddings");
    item_embeddings = Tensor::randn({vocab_size_ + 1, d}, emb_rng, 0.02).set_requires_grad(true);
    RngState pos_rng = RngState(seed).fork("position_embeddings");
    position_embeddings =
        Tensor::randn({config_.max_len, d}, pos_rng, 0.02).set_requires_grad(true);
    params_.emplace_back("item_embeddings", item_embeddings);
    params_.emplace_back("position_embeddings", position_embeddings);

    if (config_.use_dispatcher) {
        if (config_.use_imr) {
            if (config_.use_query_net) {
                imr.query_net =
                    init_query_network(config_.max_len, config_.stride, d, seed, "imr.query");
            }
            imr.sub_keys = init_sub_key_sets(config_.bank_size, d, seed, "imr.keys");
            imr.bank = init_expert_bank(config_.bank_size, d, seed, "imr.bank");
            imr.top_k = config_.top_k;
            imr.score_weighting = config_.score_weighting;
            if (config_.use_query_net) {
                collect_params(imr.query_net, "imr.query", params_);
            }
            collect_params(imr.sub_keys, "imr.keys", params_);
            collect_params(imr.bank, "imr.bank", params_);
        } else {
            RngState p_rng = RngState(seed).fork("shared_interests");
            shared_interests =
                Tensor::randn({config_.top_k, d}, p_rng, 0.02).set_requires_grad(true);
            params_.emplace_back("shared_interests", shared_interests);
        }
        stack = init_lda_stack(d, config_.num_layers, config_.use_norm, seed, "stack");
        collect_params(stack, "stack", params_);
    } else {
        encoder.reserve(config_.num_layers);
        for (std::size_t l = 0; l < config_.num_layers; ++l) {
            encoder.push_back(init_self_attn_layer_params(
                d, config_.use_norm, seed, "encoder.layer" + std::to_string(l)));
            collect_params(encoder.back(), "encoder.layer" + std::to_string(l), params_);
        }
    }
}

Tensor ElasticModel::forward(std::span<const std::uint32_t> window, ForwardTrace* trace,
                             const RetrievalResult* pinned_retrieval) const {
    const std::size_t n = config_.max_len;
    if (window.size() != n) {
        throw ContractError("forward: window length " + std::to_string(window.size()) +
                            " does not match max_len " + std::to_string(n));
    }
    std::vector<std::size_t> ids(n);
    std::size_t real_count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (window[i] > vocab_size_) {
            throw DataError("forward: unknown item id " + std::to_string(window[i]));
        }
        ids[i] = window[i];
        if (window[i] != 0) ++real_count;
    }
    if (real_count == 0) {
        throw DataError("forward: window holds only padding");
    }

    Tensor x = add(gather_rows(item_embeddings, ids), position_embeddings);
    Tensor pad_mask;
    if (config_.mask_padding) {
        std::vector<double> mask(n);
        for (std::size_t i = 0; i < n; ++i) mask[i] = window[i] != 0 ? 1.0 : 0.0;
        pad_mask = Tensor::from_data({n, 1}, std::move(mask));
        x = mul_cols(x, pad_mask);
    }

    Tensor sequence_out;
    if (config_.use_dispatcher) {
        Tensor interests;
        if (config_.use_imr) {
            // No-query-net ablation: plain average of the (masked) embedded
            // sequence stands in as the query.
            const Tensor q = config_.use_query_net
                                 ? query_network(x, imr.query_net)
                                 : scale(sum_over_rows(x),
                                         1.0 / static_cast<double>(real_count));
            RetrievalResult result =
                pinned_retrieval != nullptr
                    ? *pinned_retrieval
                    : retrieve_product_keys(q, imr.bank, imr.sub_keys, imr.top_k);
            interests = gather_experts(result, imr.bank, imr.sub_keys, q, imr.score_weighting);
            if (trace != nullptr) {
                trace->imr_used = true;
                trace->retrieval = std::move(result);
            }
        } else {
            interests = shared_interests;
        }
        sequence_out = lda_stack_forward(x, interests, stack);
    } else {
        Tensor h = x;
        for (const SelfAttnLayerParams& layer : encoder) {
            h = self_attn_layer(h, layer);
        }
        sequence_out = h;
    }

    // Final position holds the most recent real item under left padding.
    const Tensor rep = slice_rows(sequence_out, n - 1, n);
    const Tensor candidates = slice_rows(item_embeddings, 1, vocab_size_ + 1);
    return matmul(rep, transpose(candidates));
}

Tensor recommendation_loss(const Tensor& scores, std::uint32_t target) {
    if (target == 0 || target > scores.cols()) {
        throw DataError("recommendation_loss: target " + std::to_string(target) +
                        " outside the item vocabulary");
    }
    return cross_entropy_logits(scores, target - 1);
}

std::size_t rank_of_target(const Tensor& scores, std::uint32_t target) {
    if (target == 0 || target > scores.cols()) {
        throw DataError("rank_of_target: target outside the item vocabulary");
    }
    const auto s = scores.data();
    const std::size_t t = target - 1;
    std::size_t rank = 1;
    for (std::size_t j = 0; j < s.size(); ++j) {
        if (s[j] > s[t] || (s[j] == s[t] && j < t)) ++rank;
    }
    return rank;
}

}  // namespace elastic
