#pragma once

#include "mmaptune/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mmaptune {

/// Synthetic multi-task dataset description. Tasks in the same planted group
/// draw their class prototypes from a shared pool (mixed by rho) and reuse the
/// group's class-name token sequences.
struct SyntheticSpec {
    int n_tasks = 4;
    int n_classes = 5;         // C
    int samples_per_class = 60;
    int img_h = 8;
    int img_w = 8;
    int channels = 1;
    int name_tokens = 3;       // tokens per class name
    std::vector<std::vector<int>> planted{{0, 1}, {2, 3}};
    double rho = 0.9;          // intra-group prototype correlation
    double sigma = 0.1;        // pixel noise level
    std::uint64_t seed = 0;
    int vocab = 64;
    std::vector<int> template_tokens{1, 2, 3};  // fixed prefix, "a photo of a"

    int pixel_count() const { return img_h * img_w * channels; }
    void validate() const;  // config errors on violation
};

struct ClassRecord {
    int id = 0;
    std::vector<int> tokens;  // name tokens, template excluded
};

struct Sample {
    std::string split;  // "train" or "test"
    int label = 0;
    Tensor pixels;      // flat, row-major H*W*channels
};

struct TaskManifest {
    int format_version = 1;
    std::string task;
    int C = 0;
    int H = 0;
    int W = 0;
    int channels = 1;
    int vocab = 0;
    std::vector<int> template_tokens;
    std::vector<ClassRecord> classes;
    std::vector<Sample> samples;

    /// Full token sequence for a class: template followed by the name tokens.
    std::vector<int> class_sequence(int label) const;
    /// Checks all manifest invariants; throws a data error naming the field.
    void validate() const;
};

/// Deterministic generation: same spec, same files, bit for bit.
std::vector<TaskManifest> generate_synthetic(const SyntheticSpec& spec);

/// Line-delimited JSON: header line, then one sample per line.
void save_manifest(const TaskManifest& m, const std::string& path);
TaskManifest load_manifest(const std::string& path);

/// Index sets into TaskManifest::samples.
struct SplitIndices {
    std::vector<int> train, test;
};

/// Few-shot selection: `shots` samples per class drawn from the train-tagged
/// pool (shots = 0 keeps the whole pool); the test side is every test-tagged
/// sample. Stratified, disjoint, deterministic in `seed`.
SplitIndices split_with_shots(const TaskManifest& m, int shots, std::uint64_t seed);

}  // namespace mmaptune
