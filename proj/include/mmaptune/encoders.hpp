#pragma once

#include "mmaptune/autodiff.hpp"

#include <optional>

namespace mmaptune {

struct EncoderConfig {
    int n_layers = 2;   // K transformer layers per encoder
    int d_text = 16;    // text width d_l
    int d_image = 24;   // image width d_v
    int d_embed = 8;    // joint embedding width d_e
    int n_heads = 2;
    int img_h = 8;
    int img_w = 8;
    int patch = 4;
    int channels = 1;
    int n_ctx = 16;     // max text length
    int vocab = 64;
    double tau = 0.1;   // fixed temperature for cosine logits

    int patch_count() const { return (img_h / patch) * (img_w / patch); }
    int patch_dim() const { return patch * patch * channels; }
    void validate() const;  // throws ConfigError
};

struct LayerWeights {
    Tensor ln1_w, ln1_b;
    Tensor q_w, q_b, k_w, k_b, v_w, v_b, out_w, out_b;
    Tensor ln2_w, ln2_b;
    Tensor fc_w, fc_b, proj_w, proj_b;  // MLP, hidden = 4x width
};

/// Frozen dual-encoder parameters. Deterministic in (config, seed); the
/// for_each_param order doubles as the serialization and init-stream order.
struct BackboneWeights {
    EncoderConfig config;
    uint64_t seed = 0;

    Tensor patch_w;      // patch_dim x d_image
    Tensor patch_b;      // d_image
    Tensor img_pos;      // (M+1) x d_image
    Tensor class_token;  // 1 x d_image
    std::vector<LayerWeights> img_layers;

    Tensor token_table;  // vocab x d_text
    Tensor txt_pos;      // n_ctx x d_text
    std::vector<LayerWeights> txt_layers;

    Tensor img_proj;     // d_image x d_embed
    Tensor txt_proj;     // d_text x d_embed

    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const;
};

/// Seeded stand-in for pretraining: Gaussian std 0.02 everywhere except
/// layer-norm affines (weight 1, bias 0).
BackboneWeights init_backbone(const EncoderConfig& config, uint64_t seed);

/// Row-major patch extraction: patches ordered by (patch_row, patch_col), each
/// flattened by (dy, dx, channel). Accepts a flat H*W*channels tensor, or H x W
/// when channels == 1.
Tensor patchify(const Tensor& image, const EncoderConfig& config);

/// Trainable-parameter handle used by the optimizers: a tape leaf plus the
/// storage it was loaded from.
struct BoundParam {
    std::string name;
    Value value;
    Tensor* host;
};

struct BoundLayer {
    Value ln1_w, ln1_b;
    Value q_w, q_b, k_w, k_b, v_w, v_b, out_w, out_b;
    Value ln2_w, ln2_b;
    Value fc_w, fc_b, proj_w, proj_b;
};

struct BoundBackbone {
    const BackboneWeights* weights = nullptr;
    Value patch_w, patch_b, img_pos, class_token;
    std::vector<BoundLayer> img_layers;
    Value token_table, txt_pos;
    std::vector<BoundLayer> txt_layers;
    Value img_proj, txt_proj;
    std::vector<BoundParam> bias_params;  // nonempty only when biases train
};

/// Fully frozen binding (every array a constant).
BoundBackbone bind_backbone(Tape& t, const BackboneWeights& w);
/// BitFit's trainable set: every bias array except the attention key bias.
/// A shared key offset adds q.c to every score in a row, which the softmax
/// cancels, so the loss is exactly flat in that direction.
bool bitfit_trains(const std::string& param_name);

/// BitFit binding: arrays selected by bitfit_trains become trainable leaves
/// whose hosts point into `w`; everything else stays constant.
BoundBackbone bind_backbone_trainable_biases(Tape& t, BackboneWeights& w);
/// BitFit binding from caller-built leaves, one per trainable bias array in
/// for_each_param order; the finite-difference oracle routes its own
/// perturbed leaves through the encoders this way.
BoundBackbone bind_backbone_given_biases(Tape& t, const BackboneWeights& w,
                                         const std::vector<Value>& bias_leaves);

/// Pre-LN transformer block: x += attn(ln1(x)); x += mlp(ln2(x)).
Value transformer_layer(Tape& t, Value x, const BoundLayer& w, int heads);

/// Patch projection plus class token and positional embeddings:
/// returns the (M+1) x d_image layer-0 token matrix [c_0; E_0].
Value embed_image(Tape& t, const BoundBackbone& bb, const Tensor& image);

/// Per-layer prompt values for both branches; absent entries contribute no
/// rows to the layer input.
struct LayerPrompts {
    std::optional<Value> text_group, text_task;
    std::optional<Value> image_group, image_task;
};
using PromptProvider = std::function<LayerPrompts(int layer)>;

/// Image branch with deep prompting: layer input [class, group, task, patches],
/// prompt rows discarded after each layer. Returns 1 x d_embed.
Value image_forward(Tape& t, const BoundBackbone& bb, const Tensor& image,
                    const PromptProvider& prompts);
/// Text branch: layer input [group, task, words]; pooled at the last real
/// token. Returns 1 x d_embed.
Value text_forward(Tape& t, const BoundBackbone& bb, const std::vector<int>& tokens,
                   const PromptProvider& prompts);

/// Promptless reference pipelines (separate code path; the prompted forwards
/// must reduce to these bit-for-bit when no prompts are supplied).
Value plain_image_forward(Tape& t, const BoundBackbone& bb, const Tensor& image);
Value plain_text_forward(Tape& t, const BoundBackbone& bb, const std::vector<int>& tokens);

struct Prediction {
    Tensor probs;  // length C
    int label = -1;
};

/// Softmax over cosine(x, z_i)/tau; argmax ties resolve to the lowest index.
Prediction zero_shot_predict(const Tensor& x, const Tensor& class_embeds, double tau);

}  // namespace mmaptune
