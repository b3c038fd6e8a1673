#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <vector>

namespace elastic {

// The two sequence-encoding backbones under comparison. Each backbone is a
// stack of attention blocks (projections, score matrix, softmax, value mix):
//   full_attn  N x N attention over the sequence, quadratic in N
//   lda        aggregate into k interest tokens, dispatch back, linear in N
enum class Backbone { lda, full_attn };

const char* backbone_name(Backbone b);

struct BenchConfig {
    std::size_t embed_dim = 32;       // d
    std::size_t interest_tokens = 16; // k
    std::size_t num_layers = 2;       // L
    std::uint64_t seed = 42;
};

struct BenchRow {
    Backbone backbone = Backbone::lda;
    std::size_t seq_len = 0;
    std::size_t embed_dim = 0;
    std::size_t interest_tokens = 0;
    std::size_t num_layers = 0;
    std::size_t repeats = 0;
    std::uint64_t flop_count = 0;     // deterministic, machine independent
    std::uint64_t peak_bytes = 0;     // live tensor buffers incl. parameters
    double median_latency_ms = 0.0;   // environment dependent
    bool failed = false;              // out-of-memory at this length
};

struct BenchReport {
    BenchConfig config;
    std::vector<BenchRow> rows;
};

// For every backbone x length: build seeded inputs and weights, run >= 2
// warmup forwards, then `repeats` (at least 5) timed forwards in inference
// mode. Lengths must be sorted ascending. An allocation failure marks the
// row failed and the run continues.
BenchReport run_scaling(const BenchConfig& config, std::span<const std::size_t> lengths,
                        std::size_t repeats);

// Least-squares slope of log(flops) against log(N), one per backbone with
// at least 3 usable rows. Fewer rows is a contract error.
std::map<Backbone, double> fit_complexity(const BenchReport& report);

// Human-readable aligned table with a header documenting the counting
// conventions, and a machine-readable CSV with a fixed column order.
void write_bench_table(std::ostream& os, const BenchReport& report);
void write_bench_csv(std::ostream& os, const BenchReport& report);

}  // namespace elastic
