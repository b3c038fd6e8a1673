#pragma once

#include <cstdint>
#include <filesystem>

#include "elastic/model.hpp"

namespace elastic {

// Self-describing text container: config block, vocabulary fingerprint and
// every parameter tensor as hexfloat values. Hexfloat round-trips doubles
// bit-exactly, so save -> load -> forward reproduces scores bit for bit.
void save_checkpoint(const std::filesystem::path& path, const ElasticModel& model,
                     std::uint64_t vocab_hash);

// Rebuilds the model from the stored config and overwrites its parameters.
ElasticModel load_checkpoint(const std::filesystem::path& path,
                             std::uint64_t* vocab_hash_out = nullptr);

}  // namespace elastic
