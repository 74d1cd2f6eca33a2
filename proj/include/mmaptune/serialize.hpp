#pragma once

#include "mmaptune/encoders.hpp"
#include "mmaptune/trainer.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mmaptune {

/// 64-bit FNV-1a over a canonical (sorted-key) JSON document string.
std::uint64_t fnv1a64(const std::string& bytes);

/// Backbone checkpoint: one JSON document {format_version, config, seed,
/// parameters: name -> {shape, values}}. Values round-trip bit-exactly.
void save_backbone(const BackboneWeights& w, const EncoderConfig& config, std::uint64_t seed,
                   const std::string& path);

struct LoadedBackbone {
    BackboneWeights weights;
    EncoderConfig config;
    std::uint64_t seed = 0;
};
LoadedBackbone load_backbone(const std::string& path);

/// Prompt/trainer checkpoint: same document shape as the backbone file with
/// unit role labels (global, group:<gid>, task:<tid>) plus the method tag,
/// partition, config hash and final losses. `dims` is recorded so the units
/// can be rebuilt on load.
void save_checkpoint(const Checkpoint& ck, const PromptDims& dims, const std::string& path);
Checkpoint load_checkpoint(const std::string& path, const EncoderConfig& enc);

/// Per-run metrics log: line-delimited JSON, one record per epoch.
void save_metrics(const std::vector<EpochRecord>& log, const std::string& path);
std::vector<EpochRecord> load_metrics(const std::string& path);

struct GroupingReport {
    Tensor similarity;
    int snapshots = 0;
    Partition partition;
    std::string config_hash;
};

/// Grouping report: {similarity_matrix, snapshots, partition, objective,
/// config_hash}. `group` emits it; `train` consumes the partition.
void save_grouping_report(const GroupingResult& gr, const std::string& config_hash,
                          const std::string& path);
GroupingReport load_grouping_report(const std::string& path);

}  // namespace mmaptune
