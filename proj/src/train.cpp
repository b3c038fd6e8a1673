#include "elastic/train.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "elastic/errors.hpp"
#include "elastic/rng.hpp"

namespace elastic {

AdamState init_adam_state(const NamedParams& params) {
    AdamState state;
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (const auto& [name, tensor] : params) {
        state.m.emplace_back(tensor.numel(), 0.0);
        state.v.emplace_back(tensor.numel(), 0.0);
    }
    return state;
}

void adam_step(AdamState& state, NamedParams& params, const OptimizerConfig& opt) {
    if (state.m.size() != params.size()) {
        throw ContractError("adam_step: state does not match the parameter list");
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& tensor = params[p].second;
        auto values = tensor.mutable_data();
        const bool has_grad = tensor.has_grad();
        const auto grad = has_grad ? tensor.grad() : std::span<const double>{};
        auto& m = state.m[p];
        auto& v = state.v[p];
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double g = has_grad ? grad[i] : 0.0;
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            values[i] -= opt.lr * m_hat / (std::sqrt(v_hat) + opt.eps);
        }
    }
}

void zero_grads(NamedParams& params) {
    for (auto& [name, tensor] : params) {
        tensor.zero_grad();
    }
}

std::vector<std::size_t> evaluate_ranks(const ElasticModel& model, const SequenceDataset& data,
                                        Split split) {
    std::vector<std::size_t> ranks;
    ranks.reserve(data.num_users());
    for (std::size_t u = 0; u < data.num_users(); ++u) {
        if (data.sequences[u].size() < 3) continue;
        const Example ex = eval_example(data, u, split);
        const std::vector<std::uint32_t> window =
            pad_window(ex.input_items, model.config().max_len);
        const Tensor scores = model.forward(window);
        ranks.push_back(rank_of_target(scores, ex.target));
    }
    if (ranks.empty()) {
        throw DataError("evaluate_ranks: no user has enough interactions");
    }
    return ranks;
}

namespace {

// Deterministic Fisher-Yates; avoids std::shuffle's unspecified draws.
void seeded_shuffle(std::vector<std::size_t>& order, RngState& rng) {
    for (std::size_t i = order.size(); i > 1; --i) {
        const std::size_t j = rng.uniform_int(i);
        std::swap(order[i - 1], order[j]);
    }
}

std::vector<std::vector<double>> snapshot_params(const NamedParams& params) {
    std::vector<std::vector<double>> snap;
    snap.reserve(params.size());
    for (const auto& [name, tensor] : params) {
        snap.emplace_back(tensor.data().begin(), tensor.data().end());
    }
    return snap;
}

void restore_params(NamedParams& params, const std::vector<std::vector<double>>& snap) {
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto values = params[p].second.mutable_data();
        std::copy(snap[p].begin(), snap[p].end(), values.begin());
    }
}

}  // namespace

TrainResult train_model(ElasticModel& model, const SequenceDataset& data,
                        std::ostream* epoch_log) {
    const ModelConfig& config = model.config();

    // Users whose training view supports at least one (prefix, target) pair.
    std::vector<std::size_t> trainable;
    for (std::size_t u = 0; u < data.num_users(); ++u) {
        if (data.sequences[u].size() >= 4) trainable.push_back(u);
    }
    if (trainable.empty()) {
        throw DataError("train_model: dataset has no trainable users");
    }

    AdamState adam = init_adam_state(model.params());
    RngState order_rng = RngState(config.seed).fork("epoch_order");

    TrainResult result;
    std::vector<std::vector<double>> best = snapshot_params(model.params());
    std::size_t stale_epochs = 0;

    if (epoch_log != nullptr) {
        (*epoch_log) << "epoch,train_loss,val_ndcg10,val_hr10,val_mrr10\n";
    }

    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        std::vector<std::size_t> order = trainable;
        seeded_shuffle(order, order_rng);

        double loss_sum = 0.0;
        std::size_t loss_count = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            TapeScope scope;
            Tensor batch_loss;
            for (std::size_t b = start; b < end; ++b) {
                const auto items = train_items(data, order[b]);
                // One supervised prefix per user per epoch: next-item
                // prediction at the prefix's final position.
                const std::size_t cut = 1 + order_rng.uniform_int(items.size() - 1);
                const std::vector<std::uint32_t> window =
                    pad_window(items.subspan(0, cut), config.max_len);
                const Tensor scores = model.forward(window);
                const Tensor loss = recommendation_loss(scores, items[cut]);
                batch_loss = batch_loss.valid() ? add(batch_loss, loss) : loss;
            }
            batch_loss = scale(batch_loss, 1.0 / static_cast<double>(end - start));
            loss_sum += batch_loss.at(0) * static_cast<double>(end - start);
            loss_count += end - start;
            backward(batch_loss);
            adam_step(adam, model.params(), config.optimizer);
            zero_grads(model.params());
        }

        const std::vector<std::size_t> val_ranks = evaluate_ranks(model, data, Split::valid);
        const MetricsAtK val = metrics_at_k(val_ranks, 10);
        EpochLog row;
        row.epoch = epoch;
        row.train_loss = loss_sum / static_cast<double>(loss_count);
        row.val_ndcg10 = val.ndcg;
        row.val_hr10 = val.hr;
        row.val_mrr10 = val.mrr;
        result.history.push_back(row);
        if (epoch_log != nullptr) {
            (*epoch_log) << row.epoch << ',' << row.train_loss << ',' << row.val_ndcg10 << ','
                         << row.val_hr10 << ',' << row.val_mrr10 << '\n';
        }

        if (result.history.size() == 1 || val.ndcg > result.best_val_ndcg10) {
            result.best_val_ndcg10 = val.ndcg;
            result.best_epoch = epoch;
            best = snapshot_params(model.params());
            stale_epochs = 0;
        } else {
            ++stale_epochs;
            if (stale_epochs >= config.patience) {
                result.early_stopped = true;
                break;
            }
        }
    }

    restore_params(model.params(), best);
    return result;
}

}  // namespace elastic
