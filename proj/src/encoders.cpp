#include "mmaptune/encoders.hpp"

#include <algorithm>
#include <cmath>

namespace mmaptune {

void EncoderConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("encoder config: " + msg); };
    if (n_layers < 1) fail("n_layers must be >= 1");
    if (d_text < 1 || d_image < 1 || d_embed < 1) fail("widths must be positive");
    if (n_heads < 1) fail("n_heads must be >= 1");
    if (d_text % n_heads != 0) fail("n_heads must divide d_text");
    if (d_image % n_heads != 0) fail("n_heads must divide d_image");
    if (patch < 1 || img_h < 1 || img_w < 1 || channels < 1) fail("image dims must be positive");
    if (img_h % patch != 0 || img_w % patch != 0) fail("patch must divide img_h and img_w");
    if (n_ctx < 1) fail("n_ctx must be >= 1");
    if (vocab < 2) fail("vocab must be >= 2");
    if (!(tau > 0.0)) fail("tau must be positive");
}

namespace {

LayerWeights make_layer(int d) {
    LayerWeights l;
    l.ln1_w = Tensor({d});
    l.ln1_b = Tensor({d});
    l.q_w = Tensor({d, d});
    l.q_b = Tensor({d});
    l.k_w = Tensor({d, d});
    l.k_b = Tensor({d});
    l.v_w = Tensor({d, d});
    l.v_b = Tensor({d});
    l.out_w = Tensor({d, d});
    l.out_b = Tensor({d});
    l.ln2_w = Tensor({d});
    l.ln2_b = Tensor({d});
    l.fc_w = Tensor({d, 4 * d});
    l.fc_b = Tensor({4 * d});
    l.proj_w = Tensor({4 * d, d});
    l.proj_b = Tensor({d});
    return l;
}

// Shared traversal for the const and mutable for_each_param overloads. The
// visit order is the init-stream and serialization contract.
template <typename BW, typename Fn>
void visit_params(BW& w, Fn&& fn) {
    auto layer = [&](auto& l, const std::string& p) {
        fn(p + ".ln1.weight", l.ln1_w);
        fn(p + ".ln1.bias", l.ln1_b);
        fn(p + ".attn.q.weight", l.q_w);
        fn(p + ".attn.q.bias", l.q_b);
        fn(p + ".attn.k.weight", l.k_w);
        fn(p + ".attn.k.bias", l.k_b);
        fn(p + ".attn.v.weight", l.v_w);
        fn(p + ".attn.v.bias", l.v_b);
        fn(p + ".attn.out.weight", l.out_w);
        fn(p + ".attn.out.bias", l.out_b);
        fn(p + ".ln2.weight", l.ln2_w);
        fn(p + ".ln2.bias", l.ln2_b);
        fn(p + ".mlp.fc.weight", l.fc_w);
        fn(p + ".mlp.fc.bias", l.fc_b);
        fn(p + ".mlp.proj.weight", l.proj_w);
        fn(p + ".mlp.proj.bias", l.proj_b);
    };
    fn("image.patch_embed.weight", w.patch_w);
    fn("image.patch_embed.bias", w.patch_b);
    fn("image.pos_embed", w.img_pos);
    fn("image.class_token", w.class_token);
    for (size_t i = 0; i < w.img_layers.size(); ++i) {
        layer(w.img_layers[i], "image.layers." + std::to_string(i));
    }
    fn("image.proj.weight", w.img_proj);
    fn("text.token_embed.weight", w.token_table);
    fn("text.pos_embed", w.txt_pos);
    for (size_t i = 0; i < w.txt_layers.size(); ++i) {
        layer(w.txt_layers[i], "text.layers." + std::to_string(i));
    }
    fn("text.proj.weight", w.txt_proj);
}

}  // namespace

void BackboneWeights::for_each_param(
    const std::function<void(const std::string&, Tensor&)>& fn) {
    visit_params(*this, fn);
}

void BackboneWeights::for_each_param(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
    visit_params(*this, fn);
}

BackboneWeights init_backbone(const EncoderConfig& config, uint64_t seed) {
    config.validate();
    BackboneWeights w;
    w.config = config;
    w.seed = seed;
    w.patch_w = Tensor({config.patch_dim(), config.d_image});
    w.patch_b = Tensor({config.d_image});
    w.img_pos = Tensor({config.patch_count() + 1, config.d_image});
    w.class_token = Tensor({1, config.d_image});
    for (int i = 0; i < config.n_layers; ++i) w.img_layers.push_back(make_layer(config.d_image));
    w.token_table = Tensor({config.vocab, config.d_text});
    w.txt_pos = Tensor({config.n_ctx, config.d_text});
    for (int i = 0; i < config.n_layers; ++i) w.txt_layers.push_back(make_layer(config.d_text));
    w.img_proj = Tensor({config.d_image, config.d_embed});
    w.txt_proj = Tensor({config.d_text, config.d_embed});

    Rng rng(seed);
    w.for_each_param([&](const std::string& name, Tensor& t) {
        const bool is_ln = name.find(".ln") != std::string::npos;
        const bool is_proj = name.ends_with(".weight") && t.rank() == 2 &&
                             name != "text.token_embed.weight";
        if (is_ln && name.ends_with(".weight")) {
            for (int64_t i = 0; i < t.size(); ++i) t[i] = 1.0;
        } else if (is_ln && name.ends_with(".bias")) {
            // already zero
        } else if (is_proj) {
            // Fan-in scaling keeps attention logits O(1); a uniform tiny std
            // yields near-uniform attention everywhere, and prompt tokens then
            // shift every position identically, which no optimizer can turn
            // into class-discriminative behavior.
            const double s = 1.0 / std::sqrt(static_cast<double>(t.rows()));
            for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(s);
        } else {
            for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.02);
        }
    });
    return w;
}

Tensor patchify(const Tensor& image, const EncoderConfig& config) {
    const int64_t need =
        static_cast<int64_t>(config.img_h) * config.img_w * config.channels;
    const bool flat_ok = image.rank() == 1 && image.size() == need;
    const bool grid_ok = image.rank() == 2 && config.channels == 1 &&
                         image.rows() == config.img_h && image.cols() == config.img_w;
    if (!flat_ok && !grid_ok) {
        throw ShapeError("patchify: image shape " + image.shape_str() + " does not match " +
                         std::to_string(config.img_h) + "x" + std::to_string(config.img_w) + "x" +
                         std::to_string(config.channels));
    }
    const double* px = image.data();
    Tensor out({config.patch_count(), config.patch_dim()});
    int row = 0;
    for (int ph = 0; ph < config.img_h / config.patch; ++ph) {
        for (int pw = 0; pw < config.img_w / config.patch; ++pw, ++row) {
            int col = 0;
            for (int dy = 0; dy < config.patch; ++dy) {
                for (int dx = 0; dx < config.patch; ++dx) {
                    for (int ch = 0; ch < config.channels; ++ch, ++col) {
                        const int64_t y = static_cast<int64_t>(ph) * config.patch + dy;
                        const int64_t x = static_cast<int64_t>(pw) * config.patch + dx;
                        out.at(row, col) = px[(y * config.img_w + x) * config.channels + ch];
                    }
                }
            }
        }
    }
    return out;
}

namespace {

BoundBackbone bind_impl(Tape& t, BackboneWeights& w, bool train_biases,
                        const std::vector<Value>* bias_leaves = nullptr) {
    BoundBackbone bb;
    bb.weights = &w;
    size_t next_leaf = 0;
    auto cst = [&](const Tensor& x) { return t.constant(x); };
    auto bias = [&](Tensor& x, const std::string& name) {
        if (!train_biases || !bitfit_trains(name)) return t.constant(x);
        if (bias_leaves != nullptr) {
            if (next_leaf >= bias_leaves->size()) {
                throw ContractError("bind_backbone_given_biases: too few bias leaves");
            }
            Value v = (*bias_leaves)[next_leaf++];
            bb.bias_params.push_back({name, v, &x});
            return v;
        }
        Value v = t.leaf(x, true);
        bb.bias_params.push_back({name, v, &x});
        return v;
    };
    auto layer = [&](LayerWeights& l, const std::string& p) {
        BoundLayer b;
        b.ln1_w = cst(l.ln1_w);
        b.ln1_b = bias(l.ln1_b, p + ".ln1.bias");
        b.q_w = cst(l.q_w);
        b.q_b = bias(l.q_b, p + ".attn.q.bias");
        b.k_w = cst(l.k_w);
        b.k_b = bias(l.k_b, p + ".attn.k.bias");
        b.v_w = cst(l.v_w);
        b.v_b = bias(l.v_b, p + ".attn.v.bias");
        b.out_w = cst(l.out_w);
        b.out_b = bias(l.out_b, p + ".attn.out.bias");
        b.ln2_w = cst(l.ln2_w);
        b.ln2_b = bias(l.ln2_b, p + ".ln2.bias");
        b.fc_w = cst(l.fc_w);
        b.fc_b = bias(l.fc_b, p + ".mlp.fc.bias");
        b.proj_w = cst(l.proj_w);
        b.proj_b = bias(l.proj_b, p + ".mlp.proj.bias");
        return b;
    };
    bb.patch_w = cst(w.patch_w);
    bb.patch_b = bias(w.patch_b, "image.patch_embed.bias");
    bb.img_pos = cst(w.img_pos);
    bb.class_token = cst(w.class_token);
    for (size_t i = 0; i < w.img_layers.size(); ++i) {
        bb.img_layers.push_back(layer(w.img_layers[i], "image.layers." + std::to_string(i)));
    }
    bb.token_table = cst(w.token_table);
    bb.txt_pos = cst(w.txt_pos);
    for (size_t i = 0; i < w.txt_layers.size(); ++i) {
        bb.txt_layers.push_back(layer(w.txt_layers[i], "text.layers." + std::to_string(i)));
    }
    bb.img_proj = cst(w.img_proj);
    bb.txt_proj = cst(w.txt_proj);
    if (bias_leaves != nullptr && next_leaf != bias_leaves->size()) {
        throw ContractError("bind_backbone_given_biases: too many bias leaves");
    }
    return bb;
}

}  // namespace

bool bitfit_trains(const std::string& param_name) {
    return param_name.ends_with(".bias") && !param_name.ends_with(".attn.k.bias");
}

BoundBackbone bind_backbone(Tape& t, const BackboneWeights& w) {
    // Frozen mode never writes through the hosts, so the cast is safe.
    return bind_impl(t, const_cast<BackboneWeights&>(w), false);
}

BoundBackbone bind_backbone_trainable_biases(Tape& t, BackboneWeights& w) {
    return bind_impl(t, w, true);
}

BoundBackbone bind_backbone_given_biases(Tape& t, const BackboneWeights& w,
                                         const std::vector<Value>& bias_leaves) {
    // The leaves replace the trainable bias arrays; the hosts stay read-only.
    return bind_impl(t, const_cast<BackboneWeights&>(w), true, &bias_leaves);
}

Value transformer_layer(Tape& t, Value x, const BoundLayer& w, int heads) {
    Value h = layer_norm(x, w.ln1_w, w.ln1_b);
    Value q = bias_add(matmul(h, w.q_w), w.q_b);
    Value k = bias_add(matmul(h, w.k_w), w.k_b);
    Value v = bias_add(matmul(h, w.v_w), w.v_b);
    Value attn = bias_add(matmul(multi_head_attention(q, k, v, heads), w.out_w), w.out_b);
    x = add(x, attn);
    Value m = layer_norm(x, w.ln2_w, w.ln2_b);
    m = bias_add(matmul(m, w.fc_w), w.fc_b);
    m = bias_add(matmul(gelu(m), w.proj_w), w.proj_b);
    return add(x, m);
}

Value embed_image(Tape& t, const BoundBackbone& bb, const Tensor& image) {
    Value patches = t.constant(patchify(image, bb.weights->config));
    Value e = bias_add(matmul(patches, bb.patch_w), bb.patch_b);
    return add(concat_rows({bb.class_token, e}), bb.img_pos);
}

Value image_forward(Tape& t, const BoundBackbone& bb, const Tensor& image,
                    const PromptProvider& prompts) {
    const EncoderConfig& c = bb.weights->config;
    const int m_patches = c.patch_count();
    Value tokens = embed_image(t, bb, image);
    for (int k = 0; k < c.n_layers; ++k) {
        LayerPrompts lp = prompts ? prompts(k) : LayerPrompts{};
        if (lp.image_group || lp.image_task) {
            // Eq-style insertion: [class, group, task, patches]
            std::vector<Value> parts{slice_rows(tokens, 0, 1)};
            int prompt_rows = 0;
            for (const auto& p : {lp.image_group, lp.image_task}) {
                if (p) {
                    parts.push_back(*p);
                    prompt_rows += t.value(*p).rows();
                }
            }
            parts.push_back(slice_rows(tokens, 1, m_patches));
            Value out = transformer_layer(t, concat_rows(parts), bb.img_layers[k], c.n_heads);
            tokens = concat_rows(
                {slice_rows(out, 0, 1), slice_rows(out, 1 + prompt_rows, m_patches)});
        } else {
            tokens = transformer_layer(t, tokens, bb.img_layers[k], c.n_heads);
        }
    }
    return matmul(slice_rows(tokens, 0, 1), bb.img_proj);
}

Value text_forward(Tape& t, const BoundBackbone& bb, const std::vector<int>& tokens,
                   const PromptProvider& prompts) {
    const EncoderConfig& c = bb.weights->config;
    const int len = static_cast<int>(tokens.size());
    if (len == 0) throw DataError("text_forward: empty token sequence");
    if (len > c.n_ctx) {
        throw DataError("text_forward: sequence length " + std::to_string(len) +
                        " exceeds max " + std::to_string(c.n_ctx));
    }
    Value w = add(embed_rows(bb.token_table, tokens), slice_rows(bb.txt_pos, 0, len));
    for (int k = 0; k < c.n_layers; ++k) {
        LayerPrompts lp = prompts ? prompts(k) : LayerPrompts{};
        if (lp.text_group || lp.text_task) {
            // Eq-style insertion: [group, task, words]
            std::vector<Value> parts;
            int prompt_rows = 0;
            for (const auto& p : {lp.text_group, lp.text_task}) {
                if (p) {
                    parts.push_back(*p);
                    prompt_rows += t.value(*p).rows();
                }
            }
            parts.push_back(w);
            Value out = transformer_layer(t, concat_rows(parts), bb.txt_layers[k], c.n_heads);
            w = slice_rows(out, prompt_rows, len);
        } else {
            w = transformer_layer(t, w, bb.txt_layers[k], c.n_heads);
        }
    }
    return matmul(slice_rows(w, len - 1, 1), bb.txt_proj);
}

Value plain_image_forward(Tape& t, const BoundBackbone& bb, const Tensor& image) {
    const EncoderConfig& c = bb.weights->config;
    Value tokens = embed_image(t, bb, image);
    for (int k = 0; k < c.n_layers; ++k) {
        tokens = transformer_layer(t, tokens, bb.img_layers[k], c.n_heads);
    }
    return matmul(slice_rows(tokens, 0, 1), bb.img_proj);
}

Value plain_text_forward(Tape& t, const BoundBackbone& bb, const std::vector<int>& tokens) {
    const EncoderConfig& c = bb.weights->config;
    const int len = static_cast<int>(tokens.size());
    if (len == 0) throw DataError("plain_text_forward: empty token sequence");
    if (len > c.n_ctx) {
        throw DataError("plain_text_forward: sequence length " + std::to_string(len) +
                        " exceeds max " + std::to_string(c.n_ctx));
    }
    Value w = add(embed_rows(bb.token_table, tokens), slice_rows(bb.txt_pos, 0, len));
    for (int k = 0; k < c.n_layers; ++k) {
        w = transformer_layer(t, w, bb.txt_layers[k], c.n_heads);
    }
    return matmul(slice_rows(w, len - 1, 1), bb.txt_proj);
}

Prediction zero_shot_predict(const Tensor& x, const Tensor& class_embeds, double tau) {
    if (!(tau > 0.0)) throw ConfigError("zero_shot_predict: tau must be positive");
    class_embeds.require_matrix("zero_shot_predict class embeddings");
    const int d = class_embeds.cols();
    const bool vec_ok = x.rank() == 1 && x.size() == d;
    const bool row_ok = x.rank() == 2 && x.rows() == 1 && x.cols() == d;
    if (!vec_ok && !row_ok) {
        throw ShapeError("zero_shot_predict: x shape " + x.shape_str() +
                         " incompatible with embeddings " + class_embeds.shape_str());
    }
    double xnorm = 0.0;
    for (int j = 0; j < d; ++j) xnorm += x[j] * x[j];
    xnorm = std::sqrt(xnorm);
    if (xnorm == 0.0) throw NumericError("zero_shot_predict: zero-norm input");

    const int n_classes = class_embeds.rows();
    Tensor logits({n_classes});
    for (int i = 0; i < n_classes; ++i) {
        double dot = 0.0, znorm = 0.0;
        for (int j = 0; j < d; ++j) {
            dot += x[j] * class_embeds.at(i, j);
            znorm += class_embeds.at(i, j) * class_embeds.at(i, j);
        }
        znorm = std::sqrt(znorm);
        if (znorm == 0.0) throw NumericError("zero_shot_predict: zero-norm class embedding");
        logits[i] = dot / (xnorm * znorm) / tau;
    }

    Prediction pred;
    pred.probs = Tensor({n_classes});
    double mx = logits[0];
    pred.label = 0;
    for (int i = 1; i < n_classes; ++i) {
        if (logits[i] > mx) {
            mx = logits[i];
            pred.label = i;
        }
    }
    double sum = 0.0;
    for (int i = 0; i < n_classes; ++i) {
        pred.probs[i] = std::exp(logits[i] - mx);
        sum += pred.probs[i];
    }
    for (int i = 0; i < n_classes; ++i) pred.probs[i] /= sum;
    return pred;
}

}  // namespace mmaptune
