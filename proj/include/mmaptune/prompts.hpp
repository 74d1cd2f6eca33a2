#pragma once

#include "mmaptune/encoders.hpp"

#include <memory>

namespace mmaptune {

struct PromptDims {
    int b = 4;      // prompt length (rows inserted per branch)
    int m = 2;      // source prompt rows
    int n = 4;      // source prompt cols
    int depth = 2;  // layers receiving fresh prompts (deep prompting: == n_layers)
};

/// A prompt unit bound onto a tape: trainable leaves plus the per-layer prompt
/// values generated from them. Entries are absent for branches/layers the
/// method does not prompt.
struct BoundUnit {
    std::vector<std::optional<Value>> text;   // depth entries, b x d_text
    std::vector<std::optional<Value>> image;  // depth entries, b x d_image
    std::vector<BoundParam> params;           // in for_each_param order
};

/// One trainable prompt parameterization (global, group-shared, or
/// task-specific, depending on how the trainer labels it).
class PromptUnit {
  public:
    virtual ~PromptUnit() = default;
    virtual std::string method() const = 0;
    virtual int depth() const = 0;
    /// Creates trainable leaves and the generation subgraph.
    BoundUnit bind(Tape& t);
    /// Generation subgraph over caller-built leaves, one per for_each_param
    /// entry in order. Lets the finite-difference oracle route its own
    /// perturbed leaves through the exact production graph.
    virtual BoundUnit bind_with(Tape& t, const std::vector<BoundParam>& params) = 0;
    /// Fixed traversal order; doubles as the serialization and gradient
    /// flattening contract.
    virtual void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) = 0;
    void for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const;
    virtual std::unique_ptr<PromptUnit> clone() const = 0;
    int64_t param_count() const;
};

/// MmAP: per layer, P_text = kron(M_l, P_s) and P_image = kron(M_v, P_s).
class MmapUnit : public PromptUnit {
  public:
    MmapUnit(const EncoderConfig& enc, const PromptDims& dims);
    std::string method() const override { return "MmAP"; }
    int depth() const override { return dims_.depth; }
    BoundUnit bind_with(Tape& t, const std::vector<BoundParam>& params) override;
    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) override;
    std::unique_ptr<PromptUnit> clone() const override { return std::make_unique<MmapUnit>(*this); }
    const PromptDims& dims() const { return dims_; }

  private:
    PromptDims dims_;
    std::vector<Tensor> p_s_, m_l_, m_v_;  // per layer
};

/// Unstructured per-layer prompts: CoOp (text only), VPT (image only),
/// JointTV (both, independent).
class FreePromptUnit : public PromptUnit {
  public:
    FreePromptUnit(std::string tag, const EncoderConfig& enc, const PromptDims& dims);
    std::string method() const override { return tag_; }
    int depth() const override { return static_cast<int>(std::max(text_.size(), image_.size())); }
    BoundUnit bind_with(Tape& t, const std::vector<BoundParam>& params) override;
    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) override;
    std::unique_ptr<PromptUnit> clone() const override {
        return std::make_unique<FreePromptUnit>(*this);
    }

  private:
    std::string tag_;
    std::vector<Tensor> text_, image_;  // one of them may be empty (CoOp/VPT)
};

/// Rowwise two-affine generator with a gelu in between.
Value mlp_generate(Tape& t, Value x, Value fc_w, Value fc_b, Value proj_w, Value proj_b);

/// MaPLe: free text prompts; visual prompts generated from them by one
/// generator shared across layers.
class MapleUnit : public PromptUnit {
  public:
    MapleUnit(const EncoderConfig& enc, const PromptDims& dims);
    std::string method() const override { return "MaPLe"; }
    int depth() const override { return static_cast<int>(text_.size()); }
    BoundUnit bind_with(Tape& t, const std::vector<BoundParam>& params) override;
    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) override;
    std::unique_ptr<PromptUnit> clone() const override { return std::make_unique<MapleUnit>(*this); }

  private:
    std::vector<Tensor> text_;
    Tensor fc_w_, fc_b_, proj_w_, proj_b_;
};

/// Shared-source ablation: per-layer shared prompts feed two generators, one
/// per branch (Kronecker-free counterpart of MmAP).
class MlpSharedUnit : public PromptUnit {
  public:
    MlpSharedUnit(const EncoderConfig& enc, const PromptDims& dims);
    std::string method() const override { return "MLPShared"; }
    int depth() const override { return static_cast<int>(source_.size()); }
    BoundUnit bind_with(Tape& t, const std::vector<BoundParam>& params) override;
    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) override;
    std::unique_ptr<PromptUnit> clone() const override {
        return std::make_unique<MlpSharedUnit>(*this);
    }

  private:
    std::vector<Tensor> source_;
    Tensor text_fc_w_, text_fc_b_, text_proj_w_, text_proj_b_;
    Tensor img_fc_w_, img_fc_b_, img_proj_w_, img_proj_b_;
};

/// Strips a trailing "-MT" marker ("CoOp-MT" -> "CoOp").
std::string base_method(const std::string& method);
bool is_multi_task_variant(const std::string& method);

/// Zero-initialized unit for `method` (base or -MT tag). Unknown tags and
/// dimension violations are config errors. BitFit has no prompt unit.
std::unique_ptr<PromptUnit> make_prompt_unit(const std::string& method, const EncoderConfig& enc,
                                             const PromptDims& dims);

/// Gaussian std-0.02 draw for every parameter, in for_each_param order.
void randomize_unit(PromptUnit& unit, Rng& rng);

/// Prompt provider combining an optional group-shared and task-specific unit.
PromptProvider make_provider(const BoundUnit* group, const BoundUnit* task);

/// Closed-form trainable-scalar count for one unit of `base_method`.
int64_t count_trainable_unit(const std::string& base_method, const EncoderConfig& enc,
                             const PromptDims& dims);

/// Framework-level count: MmAP uses (n_groups + n_tasks) units; single-task
/// baselines use n_tasks units; -MT variants one; BitFit counts backbone bias
/// scalars per task.
int64_t count_trainable(const std::string& method, const EncoderConfig& enc,
                        const PromptDims& dims, int n_tasks, int n_groups);

}  // namespace mmaptune
