#include "elastic/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "elastic/errors.hpp"
#include "elastic/rng.hpp"

namespace elastic {

namespace {

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::vector<std::string> split_on(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(sep, start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

bool parse_u64(const std::string& s, std::uint64_t& out) {
    const char* begin = s.data();
    const char* end = s.data() + s.size();
    while (begin != end && std::isspace(static_cast<unsigned char>(*begin))) ++begin;
    while (end != begin && std::isspace(static_cast<unsigned char>(end[-1]))) --end;
    if (begin == end) return false;
    const auto [ptr, ec] = std::from_chars(begin, end, out);
    return ec == std::errc{} && ptr == end;
}

bool parse_i64(const std::string& s, std::int64_t& out) {
    const char* begin = s.data();
    const char* end = s.data() + s.size();
    while (begin != end && std::isspace(static_cast<unsigned char>(*begin))) ++begin;
    while (end != begin && std::isspace(static_cast<unsigned char>(end[-1]))) --end;
    if (begin == end) return false;
    const auto [ptr, ec] = std::from_chars(begin, end, out);
    return ec == std::errc{} && ptr == end;
}

bool parse_ml1m_line(const std::string& line, Interaction& rec) {
    // user::item::rating::timestamp
    const std::size_t p1 = line.find("::");
    if (p1 == std::string::npos) return false;
    const std::size_t p2 = line.find("::", p1 + 2);
    if (p2 == std::string::npos) return false;
    const std::size_t p3 = line.find("::", p2 + 2);
    if (p3 == std::string::npos) return false;
    return parse_u64(line.substr(0, p1), rec.user) &&
           parse_u64(line.substr(p1 + 2, p2 - p1 - 2), rec.item) &&
           parse_i64(line.substr(p3 + 2), rec.timestamp);
}

struct CsvLayout {
    char sep = ',';
    std::size_t user_col = 0, item_col = 0, ts_col = 0;
    std::size_t width = 0;
};

bool resolve_csv_header(const std::string& header, CsvLayout& layout) {
    layout.sep = header.find('\t') != std::string::npos ? '\t' : ',';
    const std::vector<std::string> names = split_on(header, layout.sep);
    layout.width = names.size();
    bool have_user = false, have_item = false, have_ts = false;
    for (std::size_t i = 0; i < names.size(); ++i) {
        const std::string n = lower(names[i]);
        if (n == "user" || n == "user_id" || n == "userid") {
            layout.user_col = i;
            have_user = true;
        } else if (n == "item" || n == "item_id" || n == "itemid" || n == "movie_id" ||
                   n == "movieid") {
            layout.item_col = i;
            have_item = true;
        } else if (n == "timestamp" || n == "ts" || n == "time") {
            layout.ts_col = i;
            have_ts = true;
        }
    }
    return have_user && have_item && have_ts;
}

}  // namespace

InteractionLog ingest(const std::filesystem::path& path, LogFormat format) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    if (in.bad()) {
        throw IoError("read failure on " + path.string());
    }

    std::size_t first_content = 0;
    while (first_content < lines.size() && lines[first_content].empty()) ++first_content;
    if (first_content == lines.size()) {
        throw FormatError(path.string() + ": file has no content");
    }

    LogFormat resolved = format;
    if (resolved == LogFormat::auto_detect) {
        resolved = lines[first_content].find("::") != std::string::npos ? LogFormat::ml1m
                                                                        : LogFormat::csv;
    }

    InteractionLog log;
    std::size_t parsed_lines = 0;
    std::size_t body_lines = 0;

    if (resolved == LogFormat::ml1m) {
        for (std::size_t i = first_content; i < lines.size(); ++i) {
            if (lines[i].empty()) continue;
            ++body_lines;
            Interaction rec;
            if (parse_ml1m_line(lines[i], rec)) {
                log.records.push_back(rec);
                ++parsed_lines;
            } else {
                log.malformed.emplace_back(i + 1, lines[i]);
            }
        }
    } else {
        CsvLayout layout;
        if (!resolve_csv_header(lines[first_content], layout)) {
            throw FormatError(path.string() +
                              ": csv header must name user, item and timestamp columns");
        }
        for (std::size_t i = first_content + 1; i < lines.size(); ++i) {
            if (lines[i].empty()) continue;
            ++body_lines;
            const std::vector<std::string> fields = split_on(lines[i], layout.sep);
            Interaction rec;
            if (fields.size() == layout.width && parse_u64(fields[layout.user_col], rec.user) &&
                parse_u64(fields[layout.item_col], rec.item) &&
                parse_i64(fields[layout.ts_col], rec.timestamp)) {
                log.records.push_back(rec);
                ++parsed_lines;
            } else {
                log.malformed.emplace_back(i + 1, lines[i]);
            }
        }
    }

    if (body_lines == 0) {
        throw FormatError(path.string() + ": no data rows");
    }
    if (log.malformed.size() * 100 > body_lines) {
        std::ostringstream os;
        os << path.string() << ": " << log.malformed.size() << " of " << body_lines
           << " lines malformed; first offenders:";
        for (std::size_t i = 0; i < std::min<std::size_t>(3, log.malformed.size()); ++i) {
            os << " [line " << log.malformed[i].first << "] " << log.malformed[i].second;
        }
        throw FormatError(os.str());
    }
    return log;
}

std::uint64_t SequenceDataset::vocab_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const std::uint64_t raw : item_ids) {
        for (int b = 0; b < 8; ++b) {
            h ^= (raw >> (8 * b)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

SequenceDataset preprocess(const InteractionLog& log, std::size_t min_count,
                           std::size_t max_len) {
    if (max_len == 0) {
        throw ContractError("preprocess: max_len must be positive");
    }
    std::vector<Interaction> records = log.records;

    // Iterate the min-count filter until nothing changes.
    while (true) {
        std::map<std::uint64_t, std::size_t> user_count, item_count;
        for (const Interaction& r : records) {
            ++user_count[r.user];
            ++item_count[r.item];
        }
        std::set<std::uint64_t> bad_users, bad_items;
        for (const auto& [u, c] : user_count) {
            if (c < min_count) bad_users.insert(u);
        }
        for (const auto& [it, c] : item_count) {
            if (c < min_count) bad_items.insert(it);
        }
        if (bad_users.empty() && bad_items.empty()) break;
        std::vector<Interaction> kept;
        kept.reserve(records.size());
        for (const Interaction& r : records) {
            if (!bad_users.count(r.user) && !bad_items.count(r.item)) {
                kept.push_back(r);
            }
        }
        records.swap(kept);
    }
    if (records.empty()) {
        throw DataError("preprocess: no interactions survive the min-count filter");
    }

    std::map<std::uint64_t, std::vector<Interaction>> per_user;
    std::set<std::uint64_t> items;
    for (const Interaction& r : records) {
        per_user[r.user].push_back(r);
        items.insert(r.item);
    }

    SequenceDataset out;
    out.max_len = max_len;
    out.item_ids.push_back(0);  // padding slot
    std::map<std::uint64_t, std::uint32_t> dense;
    for (const std::uint64_t raw : items) {
        dense[raw] = static_cast<std::uint32_t>(out.item_ids.size());
        out.item_ids.push_back(raw);
    }

    for (auto& [user, recs] : per_user) {
        std::stable_sort(recs.begin(), recs.end(), [](const Interaction& a, const Interaction& b) {
            if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
            return a.item < b.item;
        });
        std::vector<std::uint32_t> seq;
        seq.reserve(recs.size());
        for (const Interaction& r : recs) {
            seq.push_back(dense.at(r.item));
        }
        out.user_ids.push_back(user);
        out.sequences.push_back(std::move(seq));
    }
    return out;
}

std::vector<std::uint32_t> pad_window(std::span<const std::uint32_t> items,
                                      std::size_t max_len) {
    if (max_len == 0) {
        throw ContractError("pad_window: max_len must be positive");
    }
    std::vector<std::uint32_t> window(max_len, 0);
    const std::size_t take = std::min(items.size(), max_len);
    for (std::size_t i = 0; i < take; ++i) {
        window[max_len - take + i] = items[items.size() - take + i];
    }
    return window;
}

Example eval_example(const SequenceDataset& data, std::size_t user, Split split) {
    if (user >= data.num_users()) {
        throw ContractError("eval_example: user index out of range");
    }
    const std::vector<std::uint32_t>& seq = data.sequences[user];
    if (seq.size() < 3) {
        throw DataError("eval_example: sequence too short for leave-one-out splits");
    }
    Example ex;
    if (split == Split::test) {
        ex.input_items.assign(seq.begin(), seq.end() - 1);
        ex.target = seq.back();
    } else if (split == Split::valid) {
        ex.input_items.assign(seq.begin(), seq.end() - 2);
        ex.target = seq[seq.size() - 2];
    } else {
        throw ContractError("eval_example: train split has no single target; use train_items");
    }
    return ex;
}

std::span<const std::uint32_t> train_items(const SequenceDataset& data, std::size_t user) {
    if (user >= data.num_users()) {
        throw ContractError("train_items: user index out of range");
    }
    const std::vector<std::uint32_t>& seq = data.sequences[user];
    if (seq.size() < 3) {
        throw DataError("train_items: sequence too short for leave-one-out splits");
    }
    return {seq.data(), seq.size() - 2};
}

namespace {

// Random single-cycle successor table over {0, ..., n-1}: a walk visits
// every item whatever its start, so the table is invisible in item
// frequencies and shows up only in which items are adjacent.
std::vector<std::uint32_t> seeded_ring(std::size_t n, RngState rng) {
    std::vector<std::uint32_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
    for (std::size_t i = n; i > 1; --i) {
        std::swap(order[i - 1], order[rng.uniform_int(i)]);
    }
    std::vector<std::uint32_t> table(n);
    for (std::size_t i = 0; i < n; ++i) {
        table[order[i]] = order[(i + 1) % n];
    }
    return table;
}

}  // namespace

SequenceDataset synth_markov(std::size_t num_users, std::size_t num_items, std::size_t seq_len,
                             SynthKind kind, std::uint64_t seed) {
    if (num_users == 0 || num_items == 0 || seq_len == 0) {
        throw ContractError("synth_markov: users, items and length must be positive");
    }
    SequenceDataset out;
    out.max_len = seq_len;
    out.item_ids.push_back(0);
    for (std::size_t i = 1; i <= num_items; ++i) {
        out.item_ids.push_back(i);
    }

    // Two-cluster mode: even and odd users follow different hidden rings
    // over the same items; 15% of steps jump uniformly so no model can
    // score perfectly. Which ring a user follows is only visible from the
    // order of their items.
    constexpr double kJumpRate = 0.15;
    const std::vector<std::uint32_t> table_a =
        seeded_ring(num_items, RngState(seed).fork("table_a"));
    const std::vector<std::uint32_t> table_b =
        seeded_ring(num_items, RngState(seed).fork("table_b"));

    RngState rng = RngState(seed).fork("synth");
    const std::uint32_t v = static_cast<std::uint32_t>(num_items);
    for (std::size_t u = 0; u < num_users; ++u) {
        std::vector<std::uint32_t> seq;
        seq.reserve(seq_len);
        std::uint32_t current = static_cast<std::uint32_t>(rng.uniform_int(v)) + 1;
        seq.push_back(current);
        const std::vector<std::uint32_t>& table = (u % 2 == 0) ? table_a : table_b;
        for (std::size_t t = 1; t < seq_len; ++t) {
            std::uint32_t next = 0;
            switch (kind) {
                case SynthKind::successor:
                    next = current % v + 1;
                    break;
                case SynthKind::uniform:
                    next = static_cast<std::uint32_t>(rng.uniform_int(v)) + 1;
                    break;
                case SynthKind::two_cluster:
                    if (rng.uniform() < kJumpRate) {
                        next = static_cast<std::uint32_t>(rng.uniform_int(v)) + 1;
                    } else {
                        next = table[current - 1] + 1;
                    }
                    break;
            }
            seq.push_back(next);
            current = next;
        }
        out.user_ids.push_back(u + 1);
        out.sequences.push_back(std::move(seq));
    }
    return out;
}

MetricsAtK metrics_at_k(std::span<const std::size_t> ranks, std::size_t k) {
    if (ranks.empty()) {
        throw ContractError("metrics_at_k: no outcomes");
    }
    if (k == 0) {
        throw ContractError("metrics_at_k: k must be positive");
    }
    MetricsAtK m;
    for (const std::size_t rank : ranks) {
        if (rank == 0) {
            throw ContractError("metrics_at_k: ranks are 1-based");
        }
        if (rank <= k) {
            m.hr += 1.0;
            m.mrr += 1.0 / static_cast<double>(rank);
            m.ndcg += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
        }
    }
    const double n = static_cast<double>(ranks.size());
    m.hr /= n;
    m.mrr /= n;
    m.ndcg /= n;
    return m;
}

namespace {

constexpr char kCacheMagic[8] = {'E', 'L', 'S', 'T', 'D', 'S', '1', '\n'};

template <typename T>
void write_pod(std::ofstream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& value) {
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
}

}  // namespace

void save_dataset_cache(const std::filesystem::path& path, const SequenceDataset& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out.write(kCacheMagic, sizeof(kCacheMagic));
    write_pod(out, static_cast<std::uint64_t>(data.max_len));
    write_pod(out, static_cast<std::uint64_t>(data.item_ids.size()));
    for (const std::uint64_t raw : data.item_ids) write_pod(out, raw);
    write_pod(out, static_cast<std::uint64_t>(data.num_users()));
    for (std::size_t u = 0; u < data.num_users(); ++u) {
        write_pod(out, data.user_ids[u]);
        write_pod(out, static_cast<std::uint64_t>(data.sequences[u].size()));
        for (const std::uint32_t item : data.sequences[u]) write_pod(out, item);
    }
    if (!out) {
        throw IoError("write failure on " + path.string());
    }
}

SequenceDataset load_dataset_cache(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || !std::equal(magic, magic + 8, kCacheMagic)) {
        throw FormatError(path.string() + ": not a dataset cache");
    }
    SequenceDataset data;
    std::uint64_t max_len = 0, vocab_rows = 0, users = 0;
    read_pod(in, max_len);
    read_pod(in, vocab_rows);
    data.max_len = static_cast<std::size_t>(max_len);
    data.item_ids.resize(vocab_rows);
    for (auto& raw : data.item_ids) read_pod(in, raw);
    read_pod(in, users);
    data.user_ids.resize(users);
    data.sequences.resize(users);
    for (std::uint64_t u = 0; u < users; ++u) {
        read_pod(in, data.user_ids[u]);
        std::uint64_t len = 0;
        read_pod(in, len);
        data.sequences[u].resize(len);
        for (auto& item : data.sequences[u]) read_pod(in, item);
    }
    if (!in) {
        throw FormatError(path.string() + ": truncated dataset cache");
    }
    return data;
}

void write_interactions_csv(const std::filesystem::path& path, const SequenceDataset& data) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << "user_id,item_id,timestamp\n";
    for (std::size_t u = 0; u < data.num_users(); ++u) {
        for (std::size_t t = 0; t < data.sequences[u].size(); ++t) {
            out << data.user_ids[u] << ',' << data.item_ids[data.sequences[u][t]] << ',' << t
                << '\n';
        }
    }
    if (!out) {
        throw IoError("write failure on " + path.string());
    }
}

}  // namespace elastic
