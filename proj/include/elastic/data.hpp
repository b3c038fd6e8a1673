#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace elastic {

struct Interaction {
    std::uint64_t user = 0;
    std::uint64_t item = 0;
    std::int64_t timestamp = 0;
};

struct InteractionLog {
    std::vector<Interaction> records;
    // (line number, content) of lines that failed to parse.
    std::vector<std::pair<std::size_t, std::string>> malformed;
};

enum class LogFormat { auto_detect, ml1m, csv };

// Reads an interaction log. ml1m lines look like "user::item::rating::ts";
// csv needs a header naming user/item/timestamp columns (order free, comma
// or tab separated). More than 1% malformed lines is a format error.
InteractionLog ingest(const std::filesystem::path& path,
                      LogFormat format = LogFormat::auto_detect);

// Chronological per-user sequences over a dense item vocabulary.
// Dense id 0 is reserved for padding; real items are 1..vocab_size().
struct SequenceDataset {
    std::vector<std::vector<std::uint32_t>> sequences;
    std::vector<std::uint64_t> user_ids;  // raw user id per sequence
    std::vector<std::uint64_t> item_ids;  // dense -> raw, index 0 is the pad slot
    std::size_t max_len = 0;

    std::size_t num_users() const { return sequences.size(); }
    std::size_t vocab_size() const { return item_ids.empty() ? 0 : item_ids.size() - 1; }
    std::uint64_t vocab_hash() const;
};

// Iterative min-count filtering to a fixpoint, then chronological ordering
// (timestamp ties broken by raw item id).
SequenceDataset preprocess(const InteractionLog& log, std::size_t min_count = 5,
                           std::size_t max_len = 64);

// Most recent max_len items, left-padded with the 0 sentinel.
std::vector<std::uint32_t> pad_window(std::span<const std::uint32_t> items,
                                      std::size_t max_len);

enum class Split { train, valid, test };

struct Example {
    std::vector<std::uint32_t> input_items;  // unpadded; window it with pad_window
    std::uint32_t target = 0;
};

// Leave-one-out views: test target is the last item (input: all before it),
// valid target the second-to-last (input: all before it).
Example eval_example(const SequenceDataset& data, std::size_t user, Split split);

// Items available for training: everything except the last two.
std::span<const std::uint32_t> train_items(const SequenceDataset& data, std::size_t user);

// Synthetic interaction generators over items 1..num_items.
//   successor:   next = (prev % V) + 1, deterministic cycle
//   uniform:     next drawn uniformly, history carries no signal
//   two_cluster: users split into two latent groups with different cyclic
//                step sizes; the group is only visible from item order
enum class SynthKind { successor, uniform, two_cluster };

SequenceDataset synth_markov(std::size_t num_users, std::size_t num_items, std::size_t seq_len,
                             SynthKind kind, std::uint64_t seed);

struct MetricsAtK {
    double ndcg = 0.0;
    double hr = 0.0;
    double mrr = 0.0;
};

// ranks are 1-based positions of the ground truth among all candidates.
MetricsAtK metrics_at_k(std::span<const std::size_t> ranks, std::size_t k);

// Binary dataset cache (native-endian): vocab table plus sequence arrays.
void save_dataset_cache(const std::filesystem::path& path, const SequenceDataset& data);
SequenceDataset load_dataset_cache(const std::filesystem::path& path);

// Interaction CSV (user_id,item_id,timestamp) that round-trips through
// ingest/preprocess; timestamps are sequence positions.
void write_interactions_csv(const std::filesystem::path& path, const SequenceDataset& data);

}  // namespace elastic
