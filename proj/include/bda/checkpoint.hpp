#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "bda/config.hpp"
#include "bda/downstream.hpp"
#include "bda/params.hpp"
#include "bda/pretrain.hpp"
#include "json.hpp"

// Named-tensor archive: a plain-text index, a raw little-endian float64
// payload, and a CRC-32 trailer over everything before it.
namespace bda::cli {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    int format_version = kCheckpointVersion;
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();  // stage, counters, config snapshot
    ParameterSet tensors;

    std::string stage() const;
    bool has_head() const;
    ParameterSet encoder_params() const { return tensors.with_prefix(encoder::kPrefix); }
    RunConfig config() const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
// IntegrityError on truncation or checksum mismatch, VersionError on a format
// version this build cannot read.
Checkpoint deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint pretrain_checkpoint(const pretrain::TwinState& state, const RunConfig& config);
pretrain::TwinState restore_pretrain_state(const Checkpoint& ckpt, const RunConfig& config);

Checkpoint finetune_checkpoint(const downstream::FinetuneState& state, const RunConfig& config, std::size_t epoch);
downstream::FinetuneState restore_finetune_state(const Checkpoint& ckpt, const RunConfig& config);

}  // namespace bda::cli
