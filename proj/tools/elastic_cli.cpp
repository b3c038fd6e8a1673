#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "elastic/bench.hpp"
#include "elastic/checkpoint.hpp"
#include "elastic/data.hpp"
#include "elastic/errors.hpp"
#include "elastic/imr.hpp"
#include "elastic/model.hpp"
#include "elastic/train.hpp"

namespace {

using namespace elastic;

// Exit codes: 0 ok, 2 config/contract, 3 data/format, 4 I/O, 5 numeric or
// internal. CLI11 usage errors keep CLI11's own nonzero codes.
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitIo = 4;
constexpr int kExitInternal = 5;

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

SequenceDataset load_any_dataset(const std::string& path, std::size_t min_count,
                                 std::size_t max_len) {
    if (ends_with(path, ".dscache")) {
        return load_dataset_cache(path);
    }
    return preprocess(ingest(path), min_count, max_len);
}

ModelConfig resolve_config(const std::string& config_path,
                           const std::vector<std::string>& overrides, std::uint64_t seed,
                           bool seed_given) {
    ModelConfig config =
        config_path.empty() ? ModelConfig{} : load_config_file(config_path);
    for (const std::string& kv : overrides) {
        const std::size_t eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        }
        apply_override(config, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed_given) {
        config.seed = seed;
    }
    config.validate();
    return config;
}

void print_metrics_table(std::ostream& os, std::span<const std::size_t> ranks) {
    os << "metric\t@10\t@20\n";
    const MetricsAtK at10 = metrics_at_k(ranks, 10);
    const MetricsAtK at20 = metrics_at_k(ranks, 20);
    os.precision(4);
    os << std::fixed;
    os << "NDCG\t" << at10.ndcg << '\t' << at20.ndcg << '\n';
    os << "HR\t" << at10.hr << '\t' << at20.hr << '\n';
    os << "MRR\t" << at10.mrr << '\t' << at20.mrr << '\n';
    os.unsetf(std::ios_base::fixed);
}

struct SynthArgs {
    std::string out;
    std::string kind = "successor";
    std::size_t users = 500;
    std::size_t items = 50;
    std::size_t seq_len = 20;
    std::uint64_t seed = 42;
};

int run_synth(const SynthArgs& args) {
    SynthKind kind;
    if (args.kind == "successor") {
        kind = SynthKind::successor;
    } else if (args.kind == "uniform") {
        kind = SynthKind::uniform;
    } else if (args.kind == "two_cluster") {
        kind = SynthKind::two_cluster;
    } else {
        throw ConfigError("unknown synth kind '" + args.kind + "'");
    }
    const SequenceDataset data =
        synth_markov(args.users, args.items, args.seq_len, kind, args.seed);
    if (ends_with(args.out, ".dscache")) {
        save_dataset_cache(args.out, data);
    } else {
        write_interactions_csv(args.out, data);
    }
    std::cout << "synth: kind=" << args.kind << " users=" << args.users
              << " items=" << args.items << " seq_len=" << args.seq_len
              << " seed=" << args.seed << " -> " << args.out << '\n';
    return 0;
}

struct TrainArgs {
    std::string config_path;
    std::string data_path;
    std::string out_dir;
    std::vector<std::string> overrides;
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::size_t min_count = 5;
};

int run_train(const TrainArgs& args) {
    const ModelConfig config =
        resolve_config(args.config_path, args.overrides, args.seed, args.seed_given);
    const SequenceDataset data =
        load_any_dataset(args.data_path, args.min_count, config.max_len);

    std::filesystem::create_directories(args.out_dir);
    const std::filesystem::path out_dir(args.out_dir);

    // Full resolved configuration up front, for reproducibility.
    {
        std::ofstream manifest(out_dir / "run_manifest.txt");
        if (!manifest) {
            throw IoError("cannot write " + (out_dir / "run_manifest.txt").string());
        }
        manifest << "command=train\n"
                 << "data=" << args.data_path << '\n'
                 << "vocab_size=" << data.vocab_size() << '\n'
                 << "vocab_hash=" << data.vocab_hash() << '\n'
                 << config_to_text(config);
    }
    std::cout << "train: users=" << data.num_users() << " items=" << data.vocab_size()
              << " seed=" << config.seed << '\n'
              << config_to_text(config);

    ElasticModel model(config, data.vocab_size());
    std::ofstream epochs(out_dir / "epochs.csv");
    if (!epochs) {
        throw IoError("cannot write " + (out_dir / "epochs.csv").string());
    }
    const TrainResult result = train_model(model, data, &epochs);
    std::cout << "trained " << result.history.size() << " epochs, best epoch "
              << result.best_epoch << " (val NDCG@10 " << result.best_val_ndcg10 << ")"
              << (result.early_stopped ? ", early stop" : "") << '\n';

    save_checkpoint(out_dir / "checkpoint.ckpt", model, data.vocab_hash());
    std::cout << "checkpoint: " << (out_dir / "checkpoint.ckpt").string() << '\n';

    const std::vector<std::size_t> ranks = evaluate_ranks(model, data, Split::test);
    std::cout << "test split:\n";
    print_metrics_table(std::cout, ranks);
    return 0;
}

struct EvalArgs {
    std::string checkpoint_path;
    std::string data_path;
    std::size_t min_count = 5;
};

int run_eval(const EvalArgs& args) {
    std::uint64_t stored_hash = 0;
    const ElasticModel model = load_checkpoint(args.checkpoint_path, &stored_hash);
    const SequenceDataset data =
        load_any_dataset(args.data_path, args.min_count, model.config().max_len);
    if (data.vocab_hash() != stored_hash) {
        throw DataError("dataset vocabulary does not match the checkpoint");
    }
    std::cout << "eval: checkpoint=" << args.checkpoint_path << " users=" << data.num_users()
              << " items=" << data.vocab_size() << " seed=" << model.config().seed << '\n';
    const std::vector<std::size_t> ranks = evaluate_ranks(model, data, Split::test);
    print_metrics_table(std::cout, ranks);
    return 0;
}

struct BenchArgs {
    std::string out_dir;
    std::vector<std::size_t> lengths{64, 128, 256, 512, 1024};
    std::size_t repeats = 5;
    std::size_t embed_dim = 32;
    std::size_t interest_tokens = 16;
    std::size_t layers = 2;
    std::uint64_t seed = 42;
};

int run_bench(const BenchArgs& args) {
    BenchConfig config;
    config.embed_dim = args.embed_dim;
    config.interest_tokens = args.interest_tokens;
    config.num_layers = args.layers;
    config.seed = args.seed;

    const BenchReport report = run_scaling(config, args.lengths, args.repeats);
    write_bench_table(std::cout, report);
    const auto slopes = fit_complexity(report);
    std::cout.precision(4);
    std::cout << "log-log flop slope: lda=" << slopes.at(Backbone::lda)
              << " full-attn=" << slopes.at(Backbone::full_attn) << '\n';

    if (!args.out_dir.empty()) {
        std::filesystem::create_directories(args.out_dir);
        const std::filesystem::path out_dir(args.out_dir);
        std::ofstream table(out_dir / "bench.txt");
        std::ofstream csv(out_dir / "bench.csv");
        if (!table || !csv) {
            throw IoError("cannot write bench outputs under " + args.out_dir);
        }
        write_bench_table(table, report);
        write_bench_csv(csv, report);
        std::cout << "wrote " << (out_dir / "bench.txt").string() << " and "
                  << (out_dir / "bench.csv").string() << '\n';
    }
    return 0;
}

struct RetrieveArgs {
    std::size_t queries = 1000;
    std::size_t bank_size = 256;
    std::size_t top_k = 8;
    std::size_t embed_dim = 64;
    std::uint64_t seed = 42;
};

int run_retrieve(const RetrieveArgs& args) {
    RngState rng = RngState(args.seed).fork("retrieve.demo");
    std::size_t matches = 0;
    double max_score_err = 0.0;
    std::uint64_t brute_flops = 0, product_flops = 0;
    for (std::size_t i = 0; i < args.queries; ++i) {
        const std::uint64_t draw_seed = rng.next_u64();
        const SubKeySets sub =
            init_sub_key_sets(args.bank_size, args.embed_dim, draw_seed, "demo.keys");
        ExpertBank bank = init_expert_bank(args.bank_size, args.embed_dim, draw_seed, "demo.bank");
        RngState qrng = RngState(draw_seed).fork("demo.query");
        const Tensor q = Tensor::randn({1, args.embed_dim}, qrng);

        flops::reset();
        const RetrievalResult brute = retrieve_bruteforce(q, bank, sub, args.top_k);
        brute_flops += flops::count();
        flops::reset();
        const RetrievalResult product = retrieve_product_keys(q, bank, sub, args.top_k);
        product_flops += flops::count();

        if (product.indices == brute.indices) ++matches;
        for (std::size_t t = 0; t < product.scores.size(); ++t) {
            max_score_err = std::max(max_score_err,
                                     std::abs(product.scores[t] - brute.scores[t]));
        }
    }
    const double analytic = (std::sqrt(static_cast<double>(args.bank_size)) +
                             static_cast<double>(args.top_k * args.top_k)) /
                            static_cast<double>(args.bank_size);
    std::cout << "retrieve: seed=" << args.seed << " K=" << args.bank_size << " k=" << args.top_k
              << " d=" << args.embed_dim << '\n'
              << "queries matching brute force: " << matches << "/" << args.queries << '\n'
              << "max |score difference|: " << max_score_err << '\n'
              << "flops product/brute: "
              << static_cast<double>(product_flops) / static_cast<double>(brute_flops)
              << " (analytic (sqrt(K)+k^2)/K = " << analytic << ")\n";
    if (matches != args.queries) {
        std::cerr << "retrieval mismatch against the exact oracle\n";
        return kExitInternal;
    }
    return 0;
}

struct ExpertStatsArgs {
    std::string checkpoint_path;
    std::string data_path;
    std::string out_path;
    std::size_t min_count = 5;
};

int run_expert_stats(const ExpertStatsArgs& args) {
    const ElasticModel model = load_checkpoint(args.checkpoint_path);
    if (!model.config().use_imr || !model.config().use_dispatcher) {
        throw ContractError("expert-stats needs a checkpoint trained with interest retrieval");
    }
    const SequenceDataset data =
        load_any_dataset(args.data_path, args.min_count, model.config().max_len);

    UsageStats stats(model.config().bank_size);
    for (std::size_t u = 0; u < data.num_users(); ++u) {
        if (data.sequences[u].size() < 3) continue;
        const Example ex = eval_example(data, u, Split::test);
        ForwardTrace trace;
        model.forward(pad_window(ex.input_items, model.config().max_len), &trace);
        stats.record(trace.retrieval);
    }
    std::cout << "expert-stats: checkpoint=" << args.checkpoint_path
              << " seed=" << model.config().seed << " queries=" << stats.queries << '\n';

    std::ostringstream table;
    write_usage_table(table, stats);
    table << "total_load\t" << stats.total_load() << '\n';
    table << "key_usage_rate\t" << stats.usage_rate() << '\n';
    std::cout << table.str();
    if (!args.out_path.empty()) {
        std::ofstream out(args.out_path);
        if (!out) {
            throw IoError("cannot write " + args.out_path);
        }
        out << table.str();
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ELASTIC: linear dispatcher attention with interest memory retrieval"};
    app.require_subcommand(1);

    SynthArgs synth_args;
    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic interaction dataset");
    synth->add_option("--out", synth_args.out, "output path (.csv or .dscache)")->required();
    synth->add_option("--kind", synth_args.kind, "successor | uniform | two_cluster");
    synth->add_option("--users", synth_args.users, "number of users");
    synth->add_option("--items", synth_args.items, "number of items");
    synth->add_option("--seq-len", synth_args.seq_len, "interactions per user");
    synth->add_option("--seed", synth_args.seed, "generator seed");

    TrainArgs train_args;
    CLI::App* train = app.add_subcommand("train", "train a model and write a checkpoint");
    train->add_option("--config", train_args.config_path, "key=value config file");
    train->add_option("--data", train_args.data_path, "interaction log or .dscache")->required();
    train->add_option("--out", train_args.out_dir, "output directory")->required();
    train->add_option("--set", train_args.overrides, "config override key=value (repeatable)");
    train->add_option("--seed", train_args.seed, "seed override")
        ->each([&](const std::string&) { train_args.seed_given = true; });
    train->add_option("--min-count", train_args.min_count, "min interactions per user/item");

    EvalArgs eval_args;
    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    eval->add_option("--checkpoint", eval_args.checkpoint_path, "checkpoint file")->required();
    eval->add_option("--data", eval_args.data_path, "interaction log or .dscache")->required();
    eval->add_option("--min-count", eval_args.min_count, "min interactions per user/item");

    BenchArgs bench_args;
    CLI::App* bench = app.add_subcommand("bench", "scaling benchmark of the two backbones");
    bench->add_option("--out", bench_args.out_dir, "output directory for table and csv");
    bench->add_option("--lengths", bench_args.lengths, "sequence lengths, ascending")
        ->delimiter(',');
    bench->add_option("--repeats", bench_args.repeats, "timed runs per row (min 5)");
    bench->add_option("--d", bench_args.embed_dim, "embedding dim");
    bench->add_option("--k", bench_args.interest_tokens, "interest tokens");
    bench->add_option("--layers", bench_args.layers, "stacked layers");
    bench->add_option("--seed", bench_args.seed, "weight/input seed");

    RetrieveArgs retrieve_args;
    CLI::App* retrieve =
        app.add_subcommand("retrieve", "product-key retrieval vs the exact oracle");
    retrieve->add_option("--queries", retrieve_args.queries, "number of random queries");
    retrieve->add_option("--bank-size", retrieve_args.bank_size, "expert pool size K");
    retrieve->add_option("--k", retrieve_args.top_k, "retrieved experts per query");
    retrieve->add_option("--d", retrieve_args.embed_dim, "key dimension");
    retrieve->add_option("--seed", retrieve_args.seed, "draw seed");

    ExpertStatsArgs stats_args;
    CLI::App* stats = app.add_subcommand("expert-stats", "expert load/traffic over a dataset");
    stats->add_option("--checkpoint", stats_args.checkpoint_path, "checkpoint file")->required();
    stats->add_option("--data", stats_args.data_path, "interaction log or .dscache")->required();
    stats->add_option("--out", stats_args.out_path, "also write the table to this file");
    stats->add_option("--min-count", stats_args.min_count, "min interactions per user/item");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (synth->parsed()) return run_synth(synth_args);
        if (train->parsed()) return run_train(train_args);
        if (eval->parsed()) return run_eval(eval_args);
        if (bench->parsed()) return run_bench(bench_args);
        if (retrieve->parsed()) return run_retrieve(retrieve_args);
        if (stats->parsed()) return run_expert_stats(stats_args);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const ContractError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return kExitData;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInternal;
    }
    return 0;
}
