#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "elastic/data.hpp"
#include "elastic/model.hpp"

namespace elastic {

// Adam moment buffers, one pair per registered parameter.
struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::uint64_t step = 0;
};

AdamState init_adam_state(const NamedParams& params);

// One bias-corrected Adam update from the gradients currently stored on the
// parameters. Missing gradients count as zero.
void adam_step(AdamState& state, NamedParams& params, const OptimizerConfig& opt);

void zero_grads(NamedParams& params);

struct EpochLog {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_ndcg10 = 0.0;
    double val_hr10 = 0.0;
    double val_mrr10 = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> history;
    std::size_t best_epoch = 0;
    double best_val_ndcg10 = 0.0;
    bool early_stopped = false;
};

// 1-based target ranks on a leave-one-out split, one per usable user.
std::vector<std::size_t> evaluate_ranks(const ElasticModel& model, const SequenceDataset& data,
                                        Split split);

// Mini-batch training with per-epoch validation, early stopping on
// validation NDCG@10, and restoration of the best-validation parameters.
// epoch_log, when given, receives one CSV row per epoch.
TrainResult train_model(ElasticModel& model, const SequenceDataset& data,
                        std::ostream* epoch_log = nullptr);

}  // namespace elastic
