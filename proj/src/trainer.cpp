#include "mmaptune/trainer.hpp"

#include "mmaptune/threads.hpp"

#include <algorithm>
#include <numeric>
#include <set>

namespace mmaptune {

namespace {

// Seed-fork labels. Data generation owns 1000-4999; everything here stays
// clear of that range.
constexpr std::uint64_t kGlobalUnitLabel = 50;
constexpr std::uint64_t kGroupUnitLabel = 100;      // + group index
constexpr std::uint64_t kTaskUnitLabel = 200;       // + task index
constexpr std::uint64_t kTrainBatchLabel = 10000;   // + epoch*256 + task
constexpr std::uint64_t kGroupingBatchLabel = 20000;  // + epoch*256 + task

int cycles_per_epoch(const std::vector<TaskData>& tasks, int batch) {
    int max_n = 0;
    for (const auto& t : tasks) max_n = std::max(max_n, static_cast<int>(t.train_images.size()));
    return (max_n + batch - 1) / batch;
}

std::vector<int> epoch_order(size_t n, Rng rng) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    return idx;
}

std::vector<int> cycle_batch(const std::vector<int>& order, int cycle, int batch) {
    std::vector<int> out;
    out.reserve(static_cast<size_t>(batch));
    const int n = static_cast<int>(order.size());
    for (int i = 0; i < batch; ++i) {
        out.push_back(order[static_cast<size_t>((cycle * batch + i) % n)]);
    }
    return out;
}

struct SnapBatch {
    std::vector<const Tensor*> images;
    std::vector<int> labels;
};

/// Fixed class-stratified batch used for similarity snapshots and zero-epoch
/// loss reporting; drawn from the held split when it exists, so the measured
/// gradients stay meaningful after the training stream has been memorized.
SnapBatch snapshot_batch(const TaskData& task, int batch) {
    const bool use_held = !task.held_images.empty();
    const auto& images = use_held ? task.held_images : task.train_images;
    const auto& labels = use_held ? task.held_labels : task.train_labels;
    std::vector<std::vector<int>> by_class(static_cast<size_t>(task.C));
    for (int i = 0; i < static_cast<int>(labels.size()); ++i) {
        by_class[static_cast<size_t>(labels[static_cast<size_t>(i)])].push_back(i);
    }
    SnapBatch out;
    int want = std::min(batch, static_cast<int>(labels.size()));
    int round = 0;
    while (static_cast<int>(out.labels.size()) < want) {
        bool took = false;
        for (int c = 0; c < task.C && static_cast<int>(out.labels.size()) < want; ++c) {
            const auto& pool = by_class[static_cast<size_t>(c)];
            if (round < static_cast<int>(pool.size())) {
                const int i = pool[static_cast<size_t>(round)];
                out.images.push_back(&images[static_cast<size_t>(i)]);
                out.labels.push_back(labels[static_cast<size_t>(i)]);
                took = true;
            }
        }
        if (!took) break;
        ++round;
    }
    return out;
}

/// Momentum-aware optimizer over host tensors, keyed by unit role so state
/// survives per-step rebinding.
class SgdState {
  public:
    SgdState(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

    std::vector<double> apply(const std::string& role, const std::vector<BoundParam>& params,
                              Tape& t, bool capture_delta) {
        std::vector<Tensor*> hosts;
        std::vector<Tensor> grads;
        hosts.reserve(params.size());
        grads.reserve(params.size());
        for (const BoundParam& p : params) {
            hosts.push_back(p.host);
            grads.push_back(t.grad(p.value));
        }
        if (momentum_ != 0.0) {
            auto& vel = velocity_[role];
            if (vel.empty()) {
                for (const Tensor& g : grads) vel.push_back(Tensor::zeros_like(g));
            }
            for (size_t i = 0; i < grads.size(); ++i) {
                Tensor& v = vel[i];
                for (int64_t k = 0; k < v.size(); ++k) {
                    v[k] = momentum_ * v[k] + grads[i][k];
                    grads[i][k] = v[k];
                }
            }
        }
        std::vector<double> delta;
        std::vector<double> before;
        if (capture_delta) {
            for (Tensor* h : hosts) {
                before.insert(before.end(), h->data(), h->data() + h->size());
            }
        }
        sgd_step(hosts, grads, lr_);
        if (capture_delta) {
            size_t k = 0;
            for (Tensor* h : hosts) {
                for (int64_t i = 0; i < h->size(); ++i) delta.push_back((*h)[i] - before[k++]);
            }
        }
        return delta;
    }

  private:
    double lr_, momentum_;
    std::map<std::string, std::vector<Tensor>> velocity_;
};

/// Binds whichever units are present and returns their joint provider. The
/// BoundUnit slots must outlive the returned provider.
PromptProvider bind_units(Tape& tape, PromptUnit* group, PromptUnit* task, BoundUnit& bg,
                          BoundUnit& bt) {
    const BoundUnit* gp = nullptr;
    const BoundUnit* tp = nullptr;
    if (group != nullptr) {
        bg = group->bind(tape);
        gp = &bg;
    }
    if (task != nullptr) {
        bt = task->bind(tape);
        tp = &bt;
    }
    if (gp == nullptr && tp == nullptr) return nullptr;
    return make_provider(gp, tp);
}

std::vector<int> predict_labels(const BackboneWeights& bw, const EncoderConfig& enc,
                                PromptUnit* group, PromptUnit* task_unit, const TaskData& task,
                                const std::vector<Tensor>& images) {
    Tensor class_embeds;
    {
        Tape tape;
        BoundBackbone bb = bind_backbone(tape, bw);
        BoundUnit bg, bt;
        PromptProvider prov = bind_units(tape, group, task_unit, bg, bt);
        std::vector<Value> zs;
        for (int c = 0; c < task.C; ++c) {
            zs.push_back(text_forward(tape, bb, task.class_tokens[static_cast<size_t>(c)], prov));
        }
        class_embeds = tape.value(concat_rows(zs));
    }
    std::vector<int> preds(images.size(), -1);
    parallel_for(static_cast<int>(images.size()), [&](int i) {
        Tape tape;
        BoundBackbone bb = bind_backbone(tape, bw);
        BoundUnit bg, bt;
        PromptProvider prov = bind_units(tape, group, task_unit, bg, bt);
        Value x = image_forward(tape, bb, images[static_cast<size_t>(i)], prov);
        preds[static_cast<size_t>(i)] = zero_shot_predict(tape.value(x), class_embeds, enc.tau).label;
    });
    return preds;
}

double accuracy_from(const std::vector<int>& preds, const std::vector<int>& labels) {
    if (preds.empty()) return 0.0;
    int hit = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] == labels[i]) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(preds.size());
}

void check_tasks_nonempty(const std::vector<TaskData>& tasks) {
    if (tasks.empty()) throw ConfigError("trainer: no tasks");
    for (const TaskData& t : tasks) {
        if (t.train_images.empty()) {
            throw DataError("trainer: task " + t.name + " has no training samples");
        }
        if (t.C < 2 || static_cast<int>(t.class_tokens.size()) != t.C) {
            throw DataError("trainer: task " + t.name + " has malformed class records");
        }
    }
}

double snapshot_loss_value(const BackboneWeights& bw, const EncoderConfig& enc, PromptUnit* group,
                           PromptUnit* task_unit, const TaskData& task, int batch) {
    SnapBatch sb = snapshot_batch(task, batch);
    Tape tape;
    BoundBackbone bb = bind_backbone(tape, bw);
    BoundUnit bg, bt;
    PromptProvider prov = bind_units(tape, group, task_unit, bg, bt);
    Value loss = batch_loss(tape, bb, task, sb.images, sb.labels, prov, enc.tau);
    return tape.value(loss)[0];
}

}  // namespace

void TrainConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("train config: lr must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) {
        throw ConfigError("train config: momentum must be in [0,1)");
    }
    if (epochs < 0) throw ConfigError("train config: epochs must be >= 0");
    if (batch < 1) throw ConfigError("train config: batch must be >= 1");
    if (snapshot_stride < 1) throw ConfigError("train config: snapshot_stride must be >= 1");
    if (grouping_epochs < 0) throw ConfigError("train config: grouping_epochs must be >= 0");
    if (shots < 0) throw ConfigError("train config: shots must be >= 0");
}

TaskData prepare_task(const TaskManifest& m, int shots, std::uint64_t split_seed) {
    SplitIndices si = split_with_shots(m, shots, split_seed);
    TaskData t;
    t.name = m.task;
    t.C = m.C;
    for (int c = 0; c < m.C; ++c) t.class_tokens.push_back(m.class_sequence(c));
    for (int idx : si.train) {
        t.train_images.push_back(m.samples[static_cast<size_t>(idx)].pixels);
        t.train_labels.push_back(m.samples[static_cast<size_t>(idx)].label);
    }
    // held split: train-tagged samples the shot selection left behind
    std::set<int> selected(si.train.begin(), si.train.end());
    for (int idx = 0; idx < static_cast<int>(m.samples.size()); ++idx) {
        const Sample& s = m.samples[static_cast<size_t>(idx)];
        if (s.split != "train" || selected.count(idx) != 0) continue;
        t.held_images.push_back(s.pixels);
        t.held_labels.push_back(s.label);
    }
    for (int idx : si.test) {
        t.test_images.push_back(m.samples[static_cast<size_t>(idx)].pixels);
        t.test_labels.push_back(m.samples[static_cast<size_t>(idx)].label);
    }
    return t;
}

Value batch_loss(Tape& t, const BoundBackbone& bb, const TaskData& task,
                 const std::vector<const Tensor*>& images, const std::vector<int>& labels,
                 const PromptProvider& provider, double tau) {
    if (images.empty()) throw DataError("batch_loss: empty batch");
    if (images.size() != labels.size()) {
        throw ShapeError("batch_loss: " + std::to_string(images.size()) + " images vs " +
                         std::to_string(labels.size()) + " labels");
    }
    if (tau <= 0.0) throw ConfigError("batch_loss: tau must be > 0");
    std::vector<Value> zs;
    for (int c = 0; c < task.C; ++c) {
        zs.push_back(text_forward(t, bb, task.class_tokens[static_cast<size_t>(c)], provider));
    }
    Value z = concat_rows(zs);  // class embeddings, computed once per step
    std::vector<Value> xs;
    for (const Tensor* img : images) xs.push_back(image_forward(t, bb, *img, provider));
    Value logits = scale(cosine_scores(concat_rows(xs), z), 1.0 / tau);
    return cross_entropy(logits, labels);
}

Value task_loss(Tape& t, const BoundBackbone& bb, const TaskData& task,
                const std::vector<int>& batch_idx, const PromptProvider& provider, double tau) {
    if (batch_idx.empty()) throw DataError("task_loss: empty batch");
    std::vector<const Tensor*> images;
    std::vector<int> labels;
    for (int idx : batch_idx) {
        if (idx < 0 || idx >= static_cast<int>(task.train_images.size())) {
            throw ContractError("task_loss: batch index out of range");
        }
        images.push_back(&task.train_images[static_cast<size_t>(idx)]);
        labels.push_back(task.train_labels[static_cast<size_t>(idx)]);
    }
    return batch_loss(t, bb, task, images, labels, provider, tau);
}

void sgd_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr) {
    if (params.size() != grads.size()) {
        throw ShapeError("sgd_step: " + std::to_string(params.size()) + " params vs " +
                         std::to_string(grads.size()) + " grads");
    }
    for (size_t i = 0; i < params.size(); ++i) {
        if (!params[i]->same_shape(grads[i])) {
            throw ShapeError("sgd_step: shape mismatch at param " + std::to_string(i) + ": " +
                             params[i]->shape_str() + " vs " + grads[i].shape_str());
        }
        Tensor& p = *params[i];
        const Tensor& g = grads[i];
        for (int64_t k = 0; k < p.size(); ++k) p[k] -= lr * g[k];
    }
}

std::vector<double> batch_gradient(const BackboneWeights& backbone, const EncoderConfig& enc,
                                   PromptUnit& unit, const TaskData& task,
                                   const std::vector<const Tensor*>& images,
                                   const std::vector<int>& labels) {
    if (images.empty()) throw DataError("batch_gradient: empty batch");
    Tape tape;
    BoundBackbone bb = bind_backbone(tape, backbone);
    BoundUnit bu = unit.bind(tape);
    Value loss = batch_loss(tape, bb, task, images, labels, make_provider(&bu, nullptr), enc.tau);
    tape.backward(loss);
    std::vector<double> flat;
    for (const BoundParam& p : bu.params) {
        Tensor g = tape.grad(p.value);
        flat.insert(flat.end(), g.data(), g.data() + g.size());
    }
    return flat;
}

std::vector<double> task_gradient(const BackboneWeights& backbone, const EncoderConfig& enc,
                                  PromptUnit& unit, const TaskData& task,
                                  const std::vector<int>& batch_idx) {
    if (batch_idx.empty()) throw DataError("task_gradient: empty batch");
    std::vector<const Tensor*> images;
    std::vector<int> labels;
    for (int idx : batch_idx) {
        if (idx < 0 || idx >= static_cast<int>(task.train_images.size())) {
            throw ContractError("task_gradient: batch index out of range");
        }
        images.push_back(&task.train_images[static_cast<size_t>(idx)]);
        labels.push_back(task.train_labels[static_cast<size_t>(idx)]);
    }
    return batch_gradient(backbone, enc, unit, task, images, labels);
}

GradCheckReport pipeline_gradcheck(const BackboneWeights& backbone, const EncoderConfig& enc,
                                   const std::string& method, const PromptDims& dims,
                                   const TaskData& task, const std::vector<int>& batch_idx,
                                   std::uint64_t seed, double eps) {
    if (batch_idx.empty()) throw DataError("pipeline_gradcheck: empty batch");
    Rng master(seed);

    if (base_method(method) == "BitFit") {
        // Nudge the bias arrays off their zero init so the check runs at a
        // generic point, then hand copies of them to the oracle as the
        // perturbable parameter set.
        BackboneWeights w = backbone;
        Rng init = master.fork(kTaskUnitLabel);
        std::vector<Tensor> params;
        w.for_each_param([&](const std::string& name, Tensor& tt) {
            if (!bitfit_trains(name)) return;
            for (int64_t i = 0; i < tt.size(); ++i) tt[i] += init.normal(0.02);
            params.push_back(tt);
        });
        auto build = [&](Tape& t, const std::vector<Value>& leaves) {
            BoundBackbone bb = bind_backbone_given_biases(t, w, leaves);
            return task_loss(t, bb, task, batch_idx, nullptr, enc.tau);
        };
        return finite_diff_check(build, params, eps);
    }

    std::unique_ptr<PromptUnit> gu, tu;
    if (method == "MmAP") {
        gu = make_prompt_unit(method, enc, dims);
        Rng gi = master.fork(kGroupUnitLabel);
        randomize_unit(*gu, gi);
        tu = make_prompt_unit(method, enc, dims);
        Rng ti = master.fork(kTaskUnitLabel);
        randomize_unit(*tu, ti);
    } else if (is_multi_task_variant(method)) {
        gu = make_prompt_unit(method, enc, dims);
        Rng gi = master.fork(kGlobalUnitLabel);
        randomize_unit(*gu, gi);
    } else {
        tu = make_prompt_unit(method, enc, dims);
        Rng ti = master.fork(kTaskUnitLabel);
        randomize_unit(*tu, ti);
    }

    std::vector<Tensor> params;
    for (PromptUnit* u : {gu.get(), tu.get()}) {
        if (u == nullptr) continue;
        u->for_each_param([&](const std::string&, Tensor& tt) { params.push_back(tt); });
    }

    auto build = [&](Tape& t, const std::vector<Value>& leaves) {
        size_t next = 0;
        auto bind_from = [&](PromptUnit& u) {
            std::vector<BoundParam> ps;
            u.for_each_param([&](const std::string& name, Tensor& host) {
                ps.push_back(BoundParam{name, leaves[next++], &host});
            });
            return u.bind_with(t, ps);
        };
        BoundUnit bg, bt;
        if (gu) bg = bind_from(*gu);
        if (tu) bt = bind_from(*tu);
        BoundBackbone bb = bind_backbone(t, backbone);
        PromptProvider prov = make_provider(gu ? &bg : nullptr, tu ? &bt : nullptr);
        return task_loss(t, bb, task, batch_idx, prov, enc.tau);
    };
    return finite_diff_check(build, params, eps);
}

GroupingResult run_grouping_phase(const BackboneWeights& backbone, const EncoderConfig& enc,
                                  const std::vector<TaskData>& tasks, const TrainConfig& cfg) {
    cfg.validate();
    if (tasks.size() < 2) throw ConfigError("grouping phase needs at least 2 tasks");
    check_tasks_nonempty(tasks);
    const int n = static_cast<int>(tasks.size());

    Rng master(cfg.seed);
    auto unit = make_prompt_unit("MmAP", enc, cfg.dims);
    {
        Rng init = master.fork(kGlobalUnitLabel);
        randomize_unit(*unit, init);
    }

    std::vector<SnapBatch> snap_batches;
    for (const TaskData& t : tasks) {
        // several samples per class, so a few noisy images cannot flip the
        // sign of a pairwise similarity estimate
        snap_batches.push_back(snapshot_batch(t, std::max(cfg.batch, 4 * t.C)));
    }

    std::vector<Tensor> snaps;
    auto take_snapshot = [&] {
        std::vector<std::vector<double>> grads(static_cast<size_t>(n));
        parallel_for(n, [&](int t) {
            const SnapBatch& sb = snap_batches[static_cast<size_t>(t)];
            grads[static_cast<size_t>(t)] = batch_gradient(
                backbone, enc, *unit, tasks[static_cast<size_t>(t)], sb.images, sb.labels);
        });
        snaps.push_back(snapshot_similarity(grads, cfg.cosine_sim));
    };

    take_snapshot();  // state at initialization
    SgdState opt(cfg.lr, cfg.momentum);
    const int cycles = cycles_per_epoch(tasks, cfg.batch);
    int step = 0;
    for (int epoch = 0; epoch < cfg.grouping_epochs; ++epoch) {
        std::vector<std::vector<int>> orders;
        for (int t = 0; t < n; ++t) {
            orders.push_back(epoch_order(
                tasks[static_cast<size_t>(t)].train_images.size(),
                master.fork(kGroupingBatchLabel + static_cast<std::uint64_t>(epoch) * 256 +
                            static_cast<std::uint64_t>(t))));
        }
        for (int cycle = 0; cycle < cycles; ++cycle) {
            for (int t = 0; t < n; ++t) {
                Tape tape;
                BoundBackbone bb = bind_backbone(tape, backbone);
                BoundUnit bu = unit->bind(tape);
                Value loss =
                    task_loss(tape, bb, tasks[static_cast<size_t>(t)],
                              cycle_batch(orders[static_cast<size_t>(t)], cycle, cfg.batch),
                              make_provider(&bu, nullptr), enc.tau);
                tape.backward(loss);
                opt.apply("global", bu.params, tape, false);
                ++step;
                if (step % cfg.snapshot_stride == 0) take_snapshot();
            }
        }
    }

    GroupingResult res;
    res.snapshot_mats = snaps;
    res.sim.s = average_snapshots(snaps);
    res.sim.snapshots = static_cast<int>(snaps.size());
    res.partition = best_partition(res.sim.s);
    res.global_unit = std::move(unit);
    return res;
}

Checkpoint train_multitask(const BackboneWeights& backbone, const EncoderConfig& enc,
                           const std::vector<TaskData>& tasks, const Partition& partition,
                           const TrainConfig& cfg, std::vector<EpochRecord>* log,
                           const StepObserver& observer) {
    cfg.validate();
    if (cfg.method != "MmAP") {
        throw ConfigError("train_multitask handles method MmAP, got " + cfg.method);
    }
    check_tasks_nonempty(tasks);
    const int n = static_cast<int>(tasks.size());
    if (!is_valid_partition(partition.groups, n)) {
        throw ConfigError("partition does not cover the task set");
    }

    Rng master(cfg.seed);
    std::vector<std::unique_ptr<PromptUnit>> group_units, task_units;
    for (size_t g = 0; g < partition.groups.size(); ++g) {
        auto u = make_prompt_unit("MmAP", enc, cfg.dims);
        Rng init = master.fork(kGroupUnitLabel + static_cast<std::uint64_t>(g));
        randomize_unit(*u, init);
        group_units.push_back(std::move(u));
    }
    for (int t = 0; t < n; ++t) {
        auto u = make_prompt_unit("MmAP", enc, cfg.dims);
        Rng init = master.fork(kTaskUnitLabel + static_cast<std::uint64_t>(t));
        randomize_unit(*u, init);
        task_units.push_back(std::move(u));
    }
    std::vector<int> group_of(static_cast<size_t>(n), -1);
    for (size_t g = 0; g < partition.groups.size(); ++g) {
        for (int t : partition.groups[g]) group_of[static_cast<size_t>(t)] = static_cast<int>(g);
    }

    SgdState opt(cfg.lr, cfg.momentum);
    const int cycles = cycles_per_epoch(tasks, cfg.batch);
    int step = 0;
    std::vector<double> last_losses(static_cast<size_t>(n), 0.0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::vector<int>> orders;
        for (int t = 0; t < n; ++t) {
            orders.push_back(epoch_order(
                tasks[static_cast<size_t>(t)].train_images.size(),
                master.fork(kTrainBatchLabel + static_cast<std::uint64_t>(epoch) * 256 +
                            static_cast<std::uint64_t>(t))));
        }
        std::vector<double> loss_sum(static_cast<size_t>(n), 0.0);
        for (int cycle = 0; cycle < cycles; ++cycle) {
            for (int t = 0; t < n; ++t) {
                const int g = group_of[static_cast<size_t>(t)];
                Tape tape;
                BoundBackbone bb = bind_backbone(tape, backbone);
                BoundUnit bg = group_units[static_cast<size_t>(g)]->bind(tape);
                BoundUnit bt = task_units[static_cast<size_t>(t)]->bind(tape);
                Value loss =
                    task_loss(tape, bb, tasks[static_cast<size_t>(t)],
                              cycle_batch(orders[static_cast<size_t>(t)], cycle, cfg.batch),
                              make_provider(&bg, &bt), enc.tau);
                tape.backward(loss);
                loss_sum[static_cast<size_t>(t)] += tape.value(loss)[0];
                const bool cap = static_cast<bool>(observer);
                std::map<std::string, std::vector<double>> deltas;
                auto dg = opt.apply("group:" + std::to_string(g), bg.params, tape, cap);
                auto dt = opt.apply("task:" + std::to_string(t), bt.params, tape, cap);
                if (observer) {
                    deltas["group:" + std::to_string(g)] = std::move(dg);
                    deltas["task:" + std::to_string(t)] = std::move(dt);
                    observer(step, t, deltas);
                }
                ++step;
            }
        }
        for (int t = 0; t < n; ++t) {
            last_losses[static_cast<size_t>(t)] = loss_sum[static_cast<size_t>(t)] / cycles;
        }
        if (log != nullptr) {
            EpochRecord rec;
            rec.epoch = epoch + 1;
            rec.task_loss = last_losses;
            for (int t = 0; t < n; ++t) {
                const TaskData& td = tasks[static_cast<size_t>(t)];
                auto preds =
                    predict_labels(backbone, enc, group_units[static_cast<size_t>(group_of[static_cast<size_t>(t)])].get(),
                                   task_units[static_cast<size_t>(t)].get(), td, td.train_images);
                rec.task_accuracy.push_back(accuracy_from(preds, td.train_labels));
            }
            log->push_back(rec);
        }
    }
    if (cfg.epochs == 0) {
        for (int t = 0; t < n; ++t) {
            const TaskData& td = tasks[static_cast<size_t>(t)];
            last_losses[static_cast<size_t>(t)] = snapshot_loss_value(
                backbone, enc, group_units[static_cast<size_t>(group_of[static_cast<size_t>(t)])].get(),
                task_units[static_cast<size_t>(t)].get(), td, cfg.batch);
        }
    }

    Checkpoint ck;
    ck.method = cfg.method;
    ck.seed = cfg.seed;
    ck.partition = partition;
    ck.final_losses = last_losses;
    for (size_t g = 0; g < group_units.size(); ++g) {
        ck.units["group:" + std::to_string(g)] = group_units[g]->clone();
    }
    for (int t = 0; t < n; ++t) {
        ck.units["task:" + std::to_string(t)] = task_units[static_cast<size_t>(t)]->clone();
    }
    return ck;
}

Checkpoint train_baseline(const BackboneWeights& backbone, const EncoderConfig& enc,
                          const std::vector<TaskData>& tasks, const TrainConfig& cfg,
                          std::vector<EpochRecord>* log) {
    cfg.validate();
    check_tasks_nonempty(tasks);
    const int n = static_cast<int>(tasks.size());
    const std::string base = base_method(cfg.method);
    const bool multi = is_multi_task_variant(cfg.method);
    const bool bitfit = base == "BitFit";

    Rng master(cfg.seed);
    std::unique_ptr<PromptUnit> shared_unit;
    std::vector<std::unique_ptr<PromptUnit>> task_units;
    std::vector<BackboneWeights> tuned;  // BitFit: one bias-tunable copy per task
    if (bitfit) {
        for (int t = 0; t < n; ++t) tuned.push_back(backbone);
    } else if (multi) {
        shared_unit = make_prompt_unit(cfg.method, enc, cfg.dims);
        Rng init = master.fork(kGlobalUnitLabel);
        randomize_unit(*shared_unit, init);
    } else {
        for (int t = 0; t < n; ++t) {
            auto u = make_prompt_unit(cfg.method, enc, cfg.dims);
            Rng init = master.fork(kTaskUnitLabel + static_cast<std::uint64_t>(t));
            randomize_unit(*u, init);
            task_units.push_back(std::move(u));
        }
    }

    auto units_for = [&](int t) -> std::pair<PromptUnit*, PromptUnit*> {
        if (bitfit) return {nullptr, nullptr};
        if (multi) return {shared_unit.get(), nullptr};  // shared unit rides the group slot
        return {nullptr, task_units[static_cast<size_t>(t)].get()};
    };

    SgdState opt(cfg.lr, cfg.momentum);
    const int cycles = cycles_per_epoch(tasks, cfg.batch);
    std::vector<double> last_losses(static_cast<size_t>(n), 0.0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::vector<int>> orders;
        for (int t = 0; t < n; ++t) {
            orders.push_back(epoch_order(
                tasks[static_cast<size_t>(t)].train_images.size(),
                master.fork(kTrainBatchLabel + static_cast<std::uint64_t>(epoch) * 256 +
                            static_cast<std::uint64_t>(t))));
        }
        std::vector<double> loss_sum(static_cast<size_t>(n), 0.0);
        for (int cycle = 0; cycle < cycles; ++cycle) {
            for (int t = 0; t < n; ++t) {
                const auto batch =
                    cycle_batch(orders[static_cast<size_t>(t)], cycle, cfg.batch);
                Tape tape;
                if (bitfit) {
                    BoundBackbone bb =
                        bind_backbone_trainable_biases(tape, tuned[static_cast<size_t>(t)]);
                    Value loss =
                        task_loss(tape, bb, tasks[static_cast<size_t>(t)], batch, nullptr, enc.tau);
                    tape.backward(loss);
                    loss_sum[static_cast<size_t>(t)] += tape.value(loss)[0];
                    opt.apply("task:" + std::to_string(t), bb.bias_params, tape, false);
                } else {
                    auto [gu, tu] = units_for(t);
                    BoundBackbone bb = bind_backbone(tape, backbone);
                    BoundUnit bg, bt;
                    PromptProvider prov = bind_units(tape, gu, tu, bg, bt);
                    Value loss =
                        task_loss(tape, bb, tasks[static_cast<size_t>(t)], batch, prov, enc.tau);
                    tape.backward(loss);
                    loss_sum[static_cast<size_t>(t)] += tape.value(loss)[0];
                    if (gu != nullptr) opt.apply("global", bg.params, tape, false);
                    if (tu != nullptr) opt.apply("task:" + std::to_string(t), bt.params, tape, false);
                }
            }
        }
        for (int t = 0; t < n; ++t) {
            last_losses[static_cast<size_t>(t)] = loss_sum[static_cast<size_t>(t)] / cycles;
        }
        if (log != nullptr) {
            EpochRecord rec;
            rec.epoch = epoch + 1;
            rec.task_loss = last_losses;
            for (int t = 0; t < n; ++t) {
                const TaskData& td = tasks[static_cast<size_t>(t)];
                auto [gu, tu] = units_for(t);
                const BackboneWeights& bw = bitfit ? tuned[static_cast<size_t>(t)] : backbone;
                rec.task_accuracy.push_back(
                    accuracy_from(predict_labels(bw, enc, gu, tu, td, td.train_images),
                                  td.train_labels));
            }
            log->push_back(rec);
        }
    }
    if (cfg.epochs == 0) {
        for (int t = 0; t < n; ++t) {
            const TaskData& td = tasks[static_cast<size_t>(t)];
            auto [gu, tu] = units_for(t);
            const BackboneWeights& bw = bitfit ? tuned[static_cast<size_t>(t)] : backbone;
            last_losses[static_cast<size_t>(t)] =
                snapshot_loss_value(bw, enc, gu, tu, td, cfg.batch);
        }
    }

    Checkpoint ck;
    ck.method = cfg.method;
    ck.seed = cfg.seed;
    ck.final_losses = last_losses;
    if (bitfit) {
        // store per-task (tuned - original) for every trained bias array
        for (int t = 0; t < n; ++t) {
            std::map<std::string, const Tensor*> orig;
            backbone.for_each_param(
                [&](const std::string& name, const Tensor& v) { orig[name] = &v; });
            std::map<std::string, Tensor> deltas;
            tuned[static_cast<size_t>(t)].for_each_param(
                [&](const std::string& name, const Tensor& v) {
                    if (!bitfit_trains(name)) return;
                    Tensor d = Tensor::zeros_like(v);
                    const Tensor& o = *orig.at(name);
                    for (int64_t k = 0; k < v.size(); ++k) d[k] = v[k] - o[k];
                    deltas[name] = std::move(d);
                });
            ck.bias_deltas["task:" + std::to_string(t)] = std::move(deltas);
        }
    } else if (multi) {
        ck.units["global"] = shared_unit->clone();
    } else {
        for (int t = 0; t < n; ++t) {
            ck.units["task:" + std::to_string(t)] = task_units[static_cast<size_t>(t)]->clone();
        }
    }
    return ck;
}

EvalResult evaluate(const BackboneWeights& backbone, const EncoderConfig& enc,
                    const Checkpoint& ckpt, const std::vector<TaskData>& tasks,
                    const std::string& split) {
    if (split != "train" && split != "test") {
        throw ConfigError("evaluate: split must be train or test, got '" + split + "'");
    }
    check_tasks_nonempty(tasks);
    const int n = static_cast<int>(tasks.size());
    const bool bitfit = base_method(ckpt.method) == "BitFit";
    const bool multi = is_multi_task_variant(ckpt.method);
    // An MmAP checkpoint with a partition is two-tier (group + task units);
    // without one it came from single-task training and holds task units only.
    const bool mmap = ckpt.method == "MmAP" && !ckpt.partition.groups.empty();

    std::vector<int> group_of(static_cast<size_t>(n), -1);
    if (mmap) {
        if (!is_valid_partition(ckpt.partition.groups, n)) {
            throw ConfigError("evaluate: checkpoint partition does not cover the tasks");
        }
        for (size_t g = 0; g < ckpt.partition.groups.size(); ++g) {
            for (int t : ckpt.partition.groups[g]) {
                group_of[static_cast<size_t>(t)] = static_cast<int>(g);
            }
        }
    }

    auto unit_of = [&](const std::string& role) -> PromptUnit* {
        auto it = ckpt.units.find(role);
        if (it == ckpt.units.end()) {
            throw ConfigError("evaluate: checkpoint is missing unit '" + role + "'");
        }
        // binding only reads the parameter hosts
        return const_cast<PromptUnit*>(it->second.get());
    };

    EvalResult res;
    for (int t = 0; t < n; ++t) {
        const TaskData& td = tasks[static_cast<size_t>(t)];
        const auto& images = split == "train" ? td.train_images : td.test_images;
        const auto& labels = split == "train" ? td.train_labels : td.test_labels;
        if (images.empty()) throw DataError("evaluate: task " + td.name + " has an empty split");

        double acc = 0.0;
        if (bitfit) {
            BackboneWeights bw = backbone;
            const std::string role = "task:" + std::to_string(t);
            auto it = ckpt.bias_deltas.find(role);
            if (it == ckpt.bias_deltas.end()) {
                throw ConfigError("evaluate: checkpoint is missing bias deltas for " + role);
            }
            std::map<std::string, Tensor*> hosts;
            bw.for_each_param([&](const std::string& name, Tensor& v) { hosts[name] = &v; });
            for (const auto& [name, delta] : it->second) {
                auto host = hosts.find(name);
                if (host == hosts.end()) {
                    throw ConfigError("evaluate: unknown bias array " + name);
                }
                for (int64_t k = 0; k < delta.size(); ++k) (*host->second)[k] += delta[k];
            }
            acc = accuracy_from(predict_labels(bw, enc, nullptr, nullptr, td, images), labels);
        } else if (mmap) {
            PromptUnit* g = unit_of("group:" + std::to_string(group_of[static_cast<size_t>(t)]));
            PromptUnit* u = unit_of("task:" + std::to_string(t));
            acc = accuracy_from(predict_labels(backbone, enc, g, u, td, images), labels);
        } else if (multi) {
            acc = accuracy_from(
                predict_labels(backbone, enc, unit_of("global"), nullptr, td, images), labels);
        } else {
            acc = accuracy_from(
                predict_labels(backbone, enc, nullptr, unit_of("task:" + std::to_string(t)), td,
                               images),
                labels);
        }
        res.task_accuracy.push_back(acc);
    }
    double sum = 0.0;
    for (double a : res.task_accuracy) sum += a;
    res.macro = sum / static_cast<double>(n);
    return res;
}

}  // namespace mmaptune
