#include "elastic/checkpoint.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "elastic/errors.hpp"

namespace elastic {

namespace {

constexpr const char* kHeader = "elastic-checkpoint v1";

std::string hex_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%a", v);
    return buf;
}

double parse_hex_double(const std::string& token, const std::filesystem::path& path) {
    char* end = nullptr;
    const double v = std::strtod(token.c_str(), &end);
    if (end == token.c_str() || *end != '\0') {
        throw FormatError(path.string() + ": bad tensor value '" + token + "'");
    }
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ElasticModel& model,
                     std::uint64_t vocab_hash) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write checkpoint " + path.string());
    }
    out << kHeader << '\n';
    out << "vocab_size " << model.vocab_size() << '\n';
    out << "vocab_hash " << vocab_hash << '\n';
    out << "config-begin\n" << config_to_text(model.config()) << "config-end\n";
    out << "tensors " << model.params().size() << '\n';
    for (const auto& [name, tensor] : model.params()) {
        out << "tensor " << name << ' ' << tensor.rank();
        for (const std::size_t e : tensor.shape()) out << ' ' << e;
        out << '\n';
        const auto values = tensor.data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            out << hex_double(values[i]) << ((i + 1) % 4 == 0 ? '\n' : ' ');
        }
        if (values.size() % 4 != 0) out << '\n';
    }
    out << "end\n";
    if (!out) {
        throw IoError("write failure on checkpoint " + path.string());
    }
}

ElasticModel load_checkpoint(const std::filesystem::path& path, std::uint64_t* vocab_hash_out) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open checkpoint " + path.string());
    }
    std::string line;
    if (!std::getline(in, line) || line != kHeader) {
        throw FormatError(path.string() + ": not a checkpoint file");
    }

    std::size_t vocab_size = 0;
    std::uint64_t vocab_hash = 0;
    {
        std::string key;
        in >> key >> vocab_size;
        if (key != "vocab_size") throw FormatError(path.string() + ": missing vocab_size");
        in >> key >> vocab_hash;
        if (key != "vocab_hash") throw FormatError(path.string() + ": missing vocab_hash");
        std::getline(in, line);
    }

    if (!std::getline(in, line) || line != "config-begin") {
        throw FormatError(path.string() + ": missing config block");
    }
    std::ostringstream config_text;
    while (std::getline(in, line) && line != "config-end") {
        config_text << line << '\n';
    }
    const ModelConfig config = parse_config_text(config_text.str());

    std::size_t tensor_count = 0;
    {
        std::string key;
        in >> key >> tensor_count;
        if (key != "tensors") throw FormatError(path.string() + ": missing tensor count");
    }

    ElasticModel model(config, vocab_size);
    if (tensor_count != model.params().size()) {
        throw FormatError(path.string() + ": checkpoint holds " + std::to_string(tensor_count) +
                          " tensors, model expects " + std::to_string(model.params().size()));
    }
    std::map<std::string, Tensor> by_name;
    for (auto& [name, tensor] : model.params()) {
        by_name.emplace(name, tensor);
    }

    for (std::size_t t = 0; t < tensor_count; ++t) {
        std::string key, name;
        std::size_t rank = 0;
        in >> key >> name >> rank;
        if (key != "tensor" || rank == 0) {
            throw FormatError(path.string() + ": malformed tensor header");
        }
        std::vector<std::size_t> shape(rank);
        for (auto& e : shape) in >> e;
        const auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw FormatError(path.string() + ": unexpected tensor '" + name + "'");
        }
        Tensor target = it->second;
        if (shape != target.shape()) {
            throw FormatError(path.string() + ": shape mismatch for tensor '" + name + "'");
        }
        auto values = target.mutable_data();
        std::string token;
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (!(in >> token)) {
                throw FormatError(path.string() + ": truncated values for tensor '" + name + "'");
            }
            values[i] = parse_hex_double(token, path);
        }
        by_name.erase(it);
    }
    if (!by_name.empty()) {
        throw FormatError(path.string() + ": checkpoint misses tensor '" +
                          by_name.begin()->first + "'");
    }
    std::string tail;
    in >> tail;
    if (tail != "end") {
        throw FormatError(path.string() + ": missing end marker");
    }
    if (vocab_hash_out != nullptr) {
        *vocab_hash_out = vocab_hash;
    }
    return model;
}

}  // namespace elastic
