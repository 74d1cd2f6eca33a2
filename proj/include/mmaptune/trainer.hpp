#pragma once

#include "mmaptune/data.hpp"
#include "mmaptune/encoders.hpp"
#include "mmaptune/grouping.hpp"
#include "mmaptune/prompts.hpp"

#include <map>
#include <memory>

namespace mmaptune {

struct TrainConfig {
    std::string method = "MmAP";
    double lr = 0.0035;
    double momentum = 0.0;
    int epochs = 5;
    int batch = 4;
    std::uint64_t seed = 0;
    int snapshot_stride = 5;   // optimizer steps between similarity snapshots
    bool cosine_sim = false;   // cosine-normalize gradient similarities
    int grouping_epochs = 5;   // epochs of the grouping phase
    int shots = 6;             // few-shot train selection; 0 = full train pool
    PromptDims dims;

    void validate() const;
};

/// One task ready for optimization: pixel tensors and full class token
/// sequences pulled out of a manifest. The held split is the train-tagged
/// remainder outside the few-shot selection; similarity snapshots read it so
/// their gradients neither vanish nor turn to noise once the training stream
/// is memorized. It is empty when shots=0 consumes the whole pool.
struct TaskData {
    std::string name;
    int C = 0;
    std::vector<std::vector<int>> class_tokens;  // template + name, per class
    std::vector<Tensor> train_images;
    std::vector<int> train_labels;
    std::vector<Tensor> held_images;
    std::vector<int> held_labels;
    std::vector<Tensor> test_images;
    std::vector<int> test_labels;
};

TaskData prepare_task(const TaskManifest& m, int shots, std::uint64_t split_seed);

/// Mean cross-entropy of an image batch under cosine/tau logits against the
/// task's class embeddings; text and image branches share the provider's
/// prompts.
Value batch_loss(Tape& t, const BoundBackbone& bb, const TaskData& task,
                 const std::vector<const Tensor*>& images, const std::vector<int>& labels,
                 const PromptProvider& provider, double tau);

/// batch_loss over train-split samples selected by index.
Value task_loss(Tape& t, const BoundBackbone& bb, const TaskData& task,
                const std::vector<int>& batch_idx, const PromptProvider& provider, double tau);

/// p <- p - lr * g, elementwise.
void sgd_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr);

/// Gradient of one batch's loss w.r.t. every parameter of `unit`, flattened in
/// for_each_param order. The backbone stays frozen.
std::vector<double> batch_gradient(const BackboneWeights& backbone, const EncoderConfig& enc,
                                   PromptUnit& unit, const TaskData& task,
                                   const std::vector<const Tensor*>& images,
                                   const std::vector<int>& labels);

/// batch_gradient over train-split samples selected by index.
std::vector<double> task_gradient(const BackboneWeights& backbone, const EncoderConfig& enc,
                                  PromptUnit& unit, const TaskData& task,
                                  const std::vector<int>& batch_idx);

/// Central-difference audit of the one-batch pipeline loss for one method
/// tag, over every parameter that method trains: MmAP checks a group and a
/// task unit jointly, "-MT" variants one shared unit, single-task baselines
/// one unit, BitFit the backbone bias arrays. `seed` fixes the Gaussian
/// init of the checked parameters.
GradCheckReport pipeline_gradcheck(const BackboneWeights& backbone, const EncoderConfig& enc,
                                   const std::string& method, const PromptDims& dims,
                                   const TaskData& task, const std::vector<int>& batch_idx,
                                   std::uint64_t seed, double eps);

struct GroupingResult {
    SimilarityMatrix sim;                // averaged over snapshots
    std::vector<Tensor> snapshot_mats;   // each raw snapshot, in order
    Partition partition;
    std::unique_ptr<PromptUnit> global_unit;  // the trained shared MmAP
};

/// Grouping phase: trains one globally shared MmAP over all tasks round-robin,
/// snapshots pairwise gradient similarity at init and every snapshot_stride
/// steps, averages, and searches for the best partition.
GroupingResult run_grouping_phase(const BackboneWeights& backbone, const EncoderConfig& enc,
                                  const std::vector<TaskData>& tasks, const TrainConfig& cfg);

struct EpochRecord {
    int epoch = 0;
    std::vector<double> task_loss;      // per task, epoch mean
    std::vector<double> task_accuracy;  // per task, train-split accuracy
};

struct Checkpoint {
    std::string method;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::map<std::string, std::unique_ptr<PromptUnit>> units;       // role -> unit
    std::map<std::string, std::map<std::string, Tensor>> bias_deltas;  // role -> name -> delta
    Partition partition;                // MmAP only
    std::vector<double> final_losses;   // last epoch, per task
};

/// Called after each optimizer step with the parameter deltas (new - old,
/// flattened) of every unit the step updated, keyed by role.
using StepObserver =
    std::function<void(int step, int task, const std::map<std::string, std::vector<double>>&)>;

/// Two-tier MmAP training: per step on task T in group G, the loss updates
/// G's shared unit and T's own unit simultaneously; the backbone is frozen.
Checkpoint train_multitask(const BackboneWeights& backbone, const EncoderConfig& enc,
                           const std::vector<TaskData>& tasks, const Partition& partition,
                           const TrainConfig& cfg, std::vector<EpochRecord>* log = nullptr,
                           const StepObserver& observer = nullptr);

/// Baseline training: single-task methods fit one unit per task; "-MT"
/// variants share one unit round-robin; BitFit tunes bias copies of the
/// backbone and stores deltas.
Checkpoint train_baseline(const BackboneWeights& backbone, const EncoderConfig& enc,
                          const std::vector<TaskData>& tasks, const TrainConfig& cfg,
                          std::vector<EpochRecord>* log = nullptr);

struct EvalResult {
    std::vector<double> task_accuracy;
    double macro = 0.0;
};

/// Accuracy per task and macro average on "train" or "test".
EvalResult evaluate(const BackboneWeights& backbone, const EncoderConfig& enc,
                    const Checkpoint& ckpt, const std::vector<TaskData>& tasks,
                    const std::string& split);

}  // namespace mmaptune
