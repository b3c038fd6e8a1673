#include "elastic/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <new>
#include <ostream>
#include <sstream>

#include "elastic/attention.hpp"
#include "elastic/errors.hpp"
#include "elastic/tensor.hpp"

namespace elastic {

const char* backbone_name(Backbone b) {
    return b == Backbone::lda ? "lda" : "full-attn";
}

namespace {

struct LdaBlocks {
    std::vector<AttentionParams> aggregate;
    std::vector<AttentionParams> dispatch;
};

LdaBlocks build_lda_blocks(const BenchConfig& c) {
    LdaBlocks blocks;
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        blocks.aggregate.push_back(
            init_attention_params(c.embed_dim, c.seed, "bench.lda" + std::to_string(l) + ".agg"));
        blocks.dispatch.push_back(
            init_attention_params(c.embed_dim, c.seed, "bench.lda" + std::to_string(l) + ".dis"));
    }
    return blocks;
}

std::vector<AttentionParams> build_full_blocks(const BenchConfig& c) {
    std::vector<AttentionParams> blocks;
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        blocks.push_back(
            init_attention_params(c.embed_dim, c.seed, "bench.full" + std::to_string(l)));
    }
    return blocks;
}

void lda_forward(const Tensor& x0, const Tensor& p0, const LdaBlocks& blocks) {
    Tensor x = x0;
    Tensor p = p0;
    for (std::size_t l = 0; l < blocks.aggregate.size(); ++l) {
        p = lda_aggregate(p, x, blocks.aggregate[l]);
        x = lda_dispatch(x, p, blocks.dispatch[l]);
    }
}

void full_forward(const Tensor& x0, const std::vector<AttentionParams>& blocks) {
    Tensor x = x0;
    for (const AttentionParams& params : blocks) {
        x = self_attention(x, params);
    }
}

double median(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace

BenchReport run_scaling(const BenchConfig& config, std::span<const std::size_t> lengths,
                        std::size_t repeats) {
    if (lengths.empty()) {
        throw ContractError("run_scaling: no lengths");
    }
    if (!std::is_sorted(lengths.begin(), lengths.end())) {
        throw ContractError("run_scaling: lengths must be sorted ascending");
    }
    repeats = std::max<std::size_t>(repeats, 5);

    BenchReport report;
    report.config = config;

    const LdaBlocks lda_blocks = build_lda_blocks(config);
    const std::vector<AttentionParams> full_blocks = build_full_blocks(config);

    for (const Backbone backbone : {Backbone::lda, Backbone::full_attn}) {
        for (const std::size_t n : lengths) {
            BenchRow row;
            row.backbone = backbone;
            row.seq_len = n;
            row.embed_dim = config.embed_dim;
            row.interest_tokens = config.interest_tokens;
            row.num_layers = config.num_layers;
            row.repeats = repeats;
            try {
                RngState rng = RngState(config.seed).fork("bench.x" + std::to_string(n));
                const Tensor x0 = Tensor::randn({n, config.embed_dim}, rng);
                RngState prng = RngState(config.seed).fork("bench.p");
                const Tensor p0 = Tensor::randn({config.interest_tokens, config.embed_dim}, prng);

                auto run_once = [&]() {
                    if (backbone == Backbone::lda) {
                        lda_forward(x0, p0, lda_blocks);
                    } else {
                        full_forward(x0, full_blocks);
                    }
                };

                run_once();  // warmup
                run_once();

                flops::reset();
                membytes::reset_peak();
                run_once();
                row.flop_count = flops::count();
                row.peak_bytes = membytes::peak();

                std::vector<double> latencies;
                latencies.reserve(repeats);
                for (std::size_t r = 0; r < repeats; ++r) {
                    const auto start = std::chrono::steady_clock::now();
                    run_once();
                    const auto stop = std::chrono::steady_clock::now();
                    latencies.push_back(
                        std::chrono::duration<double, std::milli>(stop - start).count());
                }
                row.median_latency_ms = median(std::move(latencies));
            } catch (const std::bad_alloc&) {
                row.failed = true;
            }
            report.rows.push_back(row);
        }
    }
    return report;
}

std::map<Backbone, double> fit_complexity(const BenchReport& report) {
    std::map<Backbone, std::vector<std::pair<double, double>>> points;
    for (const BenchRow& row : report.rows) {
        if (row.failed) continue;
        points[row.backbone].emplace_back(std::log(static_cast<double>(row.seq_len)),
                                          std::log(static_cast<double>(row.flop_count)));
    }
    if (points.empty()) {
        throw ContractError("fit_complexity: report has no usable rows");
    }
    std::map<Backbone, double> slopes;
    for (const auto& [backbone, xy] : points) {
        if (xy.size() < 3) {
            throw ContractError(std::string("fit_complexity: backbone ") +
                                backbone_name(backbone) + " has fewer than 3 rows");
        }
        double mean_x = 0.0, mean_y = 0.0;
        for (const auto& [x, y] : xy) {
            mean_x += x;
            mean_y += y;
        }
        mean_x /= static_cast<double>(xy.size());
        mean_y /= static_cast<double>(xy.size());
        double num = 0.0, den = 0.0;
        for (const auto& [x, y] : xy) {
            num += (x - mean_x) * (y - mean_y);
            den += (x - mean_x) * (x - mean_x);
        }
        slopes[backbone] = num / den;
    }
    return slopes;
}

void write_bench_table(std::ostream& os, const BenchReport& report) {
    os << "# scaling benchmark: stacked attention backbones, forward pass only\n"
       << "# flops: matmul 2mpn, softmax 5/elem, data movement 1/elem; counter is\n"
       << "#        machine independent. peak_bytes: live tensor buffers including\n"
       << "#        weights. latency: median of " << (report.rows.empty() ? 0 : report.rows[0].repeats)
       << " runs after 2 warmups, wall clock.\n"
       << "# d=" << report.config.embed_dim << " k=" << report.config.interest_tokens
       << " layers=" << report.config.num_layers << " seed=" << report.config.seed << "\n";
    os << std::left << std::setw(11) << "backbone" << std::right << std::setw(7) << "N"
       << std::setw(14) << "flops" << std::setw(14) << "peak_bytes" << std::setw(14)
       << "latency_ms" << std::setw(8) << "status" << '\n';
    for (const BenchRow& row : report.rows) {
        os << std::left << std::setw(11) << backbone_name(row.backbone) << std::right
           << std::setw(7) << row.seq_len << std::setw(14) << row.flop_count << std::setw(14)
           << row.peak_bytes << std::setw(14) << std::fixed << std::setprecision(3)
           << row.median_latency_ms << std::setw(8) << (row.failed ? "failed" : "ok") << '\n';
        os.unsetf(std::ios_base::fixed);
    }
}

void write_bench_csv(std::ostream& os, const BenchReport& report) {
    os << "backbone,seq_len,embed_dim,interest_tokens,layers,flops,peak_bytes,"
          "median_latency_ms,repeats,failed\n";
    for (const BenchRow& row : report.rows) {
        os << backbone_name(row.backbone) << ',' << row.seq_len << ',' << row.embed_dim << ','
           << row.interest_tokens << ',' << row.num_layers << ',' << row.flop_count << ','
           << row.peak_bytes << ',' << std::setprecision(6) << row.median_latency_ms << ','
           << row.repeats << ',' << (row.failed ? 1 : 0) << '\n';
    }
}

}  // namespace elastic
