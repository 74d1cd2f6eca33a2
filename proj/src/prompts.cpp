#include "mmaptune/prompts.hpp"

#include <algorithm>
#include <set>

namespace mmaptune {

namespace {

const std::set<std::string>& known_methods() {
    static const std::set<std::string> methods{"MmAP",  "CoOp",   "CoOp-MT",   "VPT",
                                              "VPT-MT", "MaPLe",  "MaPLe-MT",  "JointTV",
                                              "MLPShared", "BitFit"};
    return methods;
}

void check_common_dims(const EncoderConfig& enc, const PromptDims& d) {
    if (d.b < 1) throw ConfigError("prompt dims: b must be >= 1");
    if (d.depth < 1 || d.depth > enc.n_layers) {
        throw ConfigError("prompt dims: depth must be in [1, n_layers]");
    }
}

void check_mmap_dims(const EncoderConfig& enc, const PromptDims& d) {
    check_common_dims(enc, d);
    if (d.m < 1 || d.n < 1) throw ConfigError("prompt dims: m and n must be >= 1");
    if (d.b % d.m != 0) throw ConfigError("prompt dims: m must divide b");
    if (enc.d_text % d.n != 0) throw ConfigError("prompt dims: n must divide d_text");
    if (enc.d_image % d.n != 0) throw ConfigError("prompt dims: n must divide d_image");
}

std::string layer_name(int k, const char* suffix) {
    return "layers." + std::to_string(k) + "." + suffix;
}

BoundParam bind_param(Tape& t, const std::string& name, Tensor& host) {
    return BoundParam{name, t.leaf(host, true), &host};
}

void check_param_count(const std::vector<BoundParam>& params, size_t want, const char* tag) {
    if (params.size() != want) {
        throw ContractError(std::string(tag) + ": bind_with expects " + std::to_string(want) +
                            " params, got " + std::to_string(params.size()));
    }
}

}  // namespace

void PromptUnit::for_each_param(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
    const_cast<PromptUnit*>(this)->for_each_param(
        [&](const std::string& name, Tensor& t) { fn(name, t); });
}

int64_t PromptUnit::param_count() const {
    int64_t total = 0;
    for_each_param([&](const std::string&, const Tensor& t) { total += t.size(); });
    return total;
}

BoundUnit PromptUnit::bind(Tape& t) {
    std::vector<BoundParam> params;
    for_each_param([&](const std::string& name, Tensor& host) {
        params.push_back(bind_param(t, name, host));
    });
    return bind_with(t, params);
}

// --- MmapUnit ----------------------------------------------------------------

MmapUnit::MmapUnit(const EncoderConfig& enc, const PromptDims& dims) : dims_(dims) {
    check_mmap_dims(enc, dims);
    for (int k = 0; k < dims.depth; ++k) {
        p_s_.emplace_back(std::vector<int>{dims.m, dims.n});
        m_l_.emplace_back(std::vector<int>{dims.b / dims.m, enc.d_text / dims.n});
        m_v_.emplace_back(std::vector<int>{dims.b / dims.m, enc.d_image / dims.n});
    }
}

void MmapUnit::for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) {
    for (int k = 0; k < dims_.depth; ++k) {
        fn(layer_name(k, "p_s"), p_s_[static_cast<size_t>(k)]);
        fn(layer_name(k, "m_l"), m_l_[static_cast<size_t>(k)]);
        fn(layer_name(k, "m_v"), m_v_[static_cast<size_t>(k)]);
    }
}

BoundUnit MmapUnit::bind_with(Tape&, const std::vector<BoundParam>& params) {
    check_param_count(params, static_cast<size_t>(dims_.depth) * 3, "MmAP");
    BoundUnit u;
    u.text.resize(static_cast<size_t>(dims_.depth));
    u.image.resize(static_cast<size_t>(dims_.depth));
    for (int k = 0; k < dims_.depth; ++k) {
        const BoundParam& ps = params[static_cast<size_t>(k) * 3];
        const BoundParam& ml = params[static_cast<size_t>(k) * 3 + 1];
        const BoundParam& mv = params[static_cast<size_t>(k) * 3 + 2];
        // Eq-order Kronecker: scaling matrix left, source prompt right.
        u.text[static_cast<size_t>(k)] = kron(ml.value, ps.value);
        u.image[static_cast<size_t>(k)] = kron(mv.value, ps.value);
        u.params.push_back(ps);
        u.params.push_back(ml);
        u.params.push_back(mv);
    }
    return u;
}

// --- FreePromptUnit ----------------------------------------------------------

FreePromptUnit::FreePromptUnit(std::string tag, const EncoderConfig& enc, const PromptDims& dims)
    : tag_(std::move(tag)) {
    check_common_dims(enc, dims);
    const bool want_text = tag_ == "CoOp" || tag_ == "JointTV";
    const bool want_image = tag_ == "VPT" || tag_ == "JointTV";
    if (!want_text && !want_image) {
        throw ConfigError("free prompt unit: unsupported tag " + tag_);
    }
    for (int k = 0; k < dims.depth; ++k) {
        if (want_text) text_.emplace_back(std::vector<int>{dims.b, enc.d_text});
        if (want_image) image_.emplace_back(std::vector<int>{dims.b, enc.d_image});
    }
}

void FreePromptUnit::for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) {
    for (int k = 0; k < depth(); ++k) {
        if (!text_.empty()) fn(layer_name(k, "text"), text_[static_cast<size_t>(k)]);
        if (!image_.empty()) fn(layer_name(k, "image"), image_[static_cast<size_t>(k)]);
    }
}

BoundUnit FreePromptUnit::bind_with(Tape&, const std::vector<BoundParam>& params) {
    const size_t per_layer = (text_.empty() ? 0u : 1u) + (image_.empty() ? 0u : 1u);
    check_param_count(params, static_cast<size_t>(depth()) * per_layer, tag_.c_str());
    BoundUnit u;
    u.text.resize(static_cast<size_t>(depth()));
    u.image.resize(static_cast<size_t>(depth()));
    size_t next = 0;
    for (int k = 0; k < depth(); ++k) {
        if (!text_.empty()) {
            const BoundParam& p = params[next++];
            u.text[static_cast<size_t>(k)] = p.value;
            u.params.push_back(p);
        }
        if (!image_.empty()) {
            const BoundParam& p = params[next++];
            u.image[static_cast<size_t>(k)] = p.value;
            u.params.push_back(p);
        }
    }
    return u;
}

// --- generators --------------------------------------------------------------

Value mlp_generate(Tape&, Value x, Value fc_w, Value fc_b, Value proj_w, Value proj_b) {
    return bias_add(matmul(gelu(bias_add(matmul(x, fc_w), fc_b)), proj_w), proj_b);
}

MapleUnit::MapleUnit(const EncoderConfig& enc, const PromptDims& dims) {
    check_common_dims(enc, dims);
    const int hidden = std::max(enc.d_text, enc.d_image);
    for (int k = 0; k < dims.depth; ++k) {
        text_.emplace_back(std::vector<int>{dims.b, enc.d_text});
    }
    fc_w_ = Tensor({enc.d_text, hidden});
    fc_b_ = Tensor({hidden});
    proj_w_ = Tensor({hidden, enc.d_image});
    proj_b_ = Tensor({enc.d_image});
}

void MapleUnit::for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) {
    for (int k = 0; k < depth(); ++k) fn(layer_name(k, "text"), text_[static_cast<size_t>(k)]);
    fn("gen.fc.weight", fc_w_);
    fn("gen.fc.bias", fc_b_);
    fn("gen.proj.weight", proj_w_);
    fn("gen.proj.bias", proj_b_);
}

BoundUnit MapleUnit::bind_with(Tape& t, const std::vector<BoundParam>& params) {
    check_param_count(params, static_cast<size_t>(depth()) + 4, "MaPLe");
    BoundUnit u;
    u.text.resize(static_cast<size_t>(depth()));
    u.image.resize(static_cast<size_t>(depth()));
    const BoundParam& fw = params[static_cast<size_t>(depth())];
    const BoundParam& fb = params[static_cast<size_t>(depth()) + 1];
    const BoundParam& pw = params[static_cast<size_t>(depth()) + 2];
    const BoundParam& pb = params[static_cast<size_t>(depth()) + 3];
    for (int k = 0; k < depth(); ++k) {
        const BoundParam& tp = params[static_cast<size_t>(k)];
        u.text[static_cast<size_t>(k)] = tp.value;
        u.image[static_cast<size_t>(k)] =
            mlp_generate(t, tp.value, fw.value, fb.value, pw.value, pb.value);
        u.params.push_back(tp);
    }
    u.params.push_back(fw);
    u.params.push_back(fb);
    u.params.push_back(pw);
    u.params.push_back(pb);
    return u;
}

MlpSharedUnit::MlpSharedUnit(const EncoderConfig& enc, const PromptDims& dims) {
    check_common_dims(enc, dims);
    const int width = std::max(enc.d_text, enc.d_image);  // shared source width
    const int hidden = width;
    for (int k = 0; k < dims.depth; ++k) {
        source_.emplace_back(std::vector<int>{dims.b, width});
    }
    text_fc_w_ = Tensor({width, hidden});
    text_fc_b_ = Tensor({hidden});
    text_proj_w_ = Tensor({hidden, enc.d_text});
    text_proj_b_ = Tensor({enc.d_text});
    img_fc_w_ = Tensor({width, hidden});
    img_fc_b_ = Tensor({hidden});
    img_proj_w_ = Tensor({hidden, enc.d_image});
    img_proj_b_ = Tensor({enc.d_image});
}

void MlpSharedUnit::for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) {
    for (int k = 0; k < depth(); ++k) fn(layer_name(k, "source"), source_[static_cast<size_t>(k)]);
    fn("gen_text.fc.weight", text_fc_w_);
    fn("gen_text.fc.bias", text_fc_b_);
    fn("gen_text.proj.weight", text_proj_w_);
    fn("gen_text.proj.bias", text_proj_b_);
    fn("gen_image.fc.weight", img_fc_w_);
    fn("gen_image.fc.bias", img_fc_b_);
    fn("gen_image.proj.weight", img_proj_w_);
    fn("gen_image.proj.bias", img_proj_b_);
}

BoundUnit MlpSharedUnit::bind_with(Tape& t, const std::vector<BoundParam>& params) {
    check_param_count(params, static_cast<size_t>(depth()) + 8, "MLPShared");
    BoundUnit u;
    u.text.resize(static_cast<size_t>(depth()));
    u.image.resize(static_cast<size_t>(depth()));
    const size_t gen = static_cast<size_t>(depth());
    const BoundParam& tfw = params[gen];
    const BoundParam& tfb = params[gen + 1];
    const BoundParam& tpw = params[gen + 2];
    const BoundParam& tpb = params[gen + 3];
    const BoundParam& ifw = params[gen + 4];
    const BoundParam& ifb = params[gen + 5];
    const BoundParam& ipw = params[gen + 6];
    const BoundParam& ipb = params[gen + 7];
    for (int k = 0; k < depth(); ++k) {
        Value src = params[static_cast<size_t>(k)].value;
        u.text[static_cast<size_t>(k)] =
            mlp_generate(t, src, tfw.value, tfb.value, tpw.value, tpb.value);
        u.image[static_cast<size_t>(k)] =
            mlp_generate(t, src, ifw.value, ifb.value, ipw.value, ipb.value);
        u.params.push_back(params[static_cast<size_t>(k)]);
    }
    for (const BoundParam* p : {&tfw, &tfb, &tpw, &tpb, &ifw, &ifb, &ipw, &ipb})
        u.params.push_back(*p);
    return u;
}

// --- factory and accounting --------------------------------------------------

std::string base_method(const std::string& method) {
    if (method.size() > 3 && method.ends_with("-MT")) {
        return method.substr(0, method.size() - 3);
    }
    return method;
}

bool is_multi_task_variant(const std::string& method) { return method.ends_with("-MT"); }

std::unique_ptr<PromptUnit> make_prompt_unit(const std::string& method, const EncoderConfig& enc,
                                             const PromptDims& dims) {
    if (!known_methods().count(method)) {
        throw ConfigError("unknown method: " + method);
    }
    const std::string base = base_method(method);
    if (base == "MmAP") return std::make_unique<MmapUnit>(enc, dims);
    if (base == "CoOp" || base == "VPT" || base == "JointTV") {
        return std::make_unique<FreePromptUnit>(base, enc, dims);
    }
    if (base == "MaPLe") return std::make_unique<MapleUnit>(enc, dims);
    if (base == "MLPShared") return std::make_unique<MlpSharedUnit>(enc, dims);
    throw ConfigError("method has no prompt unit: " + method);  // BitFit
}

void randomize_unit(PromptUnit& unit, Rng& rng) {
    unit.for_each_param([&](const std::string&, Tensor& t) {
        for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.02);
    });
}

PromptProvider make_provider(const BoundUnit* group, const BoundUnit* task) {
    return [group, task](int layer) {
        LayerPrompts lp;
        auto pick = [layer](const BoundUnit* u, bool text) -> std::optional<Value> {
            if (u == nullptr) return std::nullopt;
            const auto& slots = text ? u->text : u->image;
            if (layer < 0 || layer >= static_cast<int>(slots.size())) return std::nullopt;
            return slots[static_cast<size_t>(layer)];
        };
        lp.text_group = pick(group, true);
        lp.text_task = pick(task, true);
        lp.image_group = pick(group, false);
        lp.image_task = pick(task, false);
        return lp;
    };
}

int64_t count_trainable_unit(const std::string& base, const EncoderConfig& enc,
                             const PromptDims& d) {
    const int64_t depth = d.depth, b = d.b;
    const int64_t dl = enc.d_text, dv = enc.d_image;
    const int64_t h = std::max(dl, dv);
    if (base == "MmAP") {
        check_mmap_dims(enc, d);
        const int64_t m = d.m, n = d.n;
        return depth * (m * n + (b / m) * (dl / n) + (b / m) * (dv / n));
    }
    if (base == "BitFit") {
        // patch-embed bias + 7 bias arrays per layer per encoder (10*d
        // scalars: ln1 + q + v + out + ln2 + 4d mlp.fc + proj); the inert
        // attention key bias stays frozen.
        return dv + 10LL * enc.n_layers * (dl + dv);
    }
    check_common_dims(enc, d);
    if (base == "CoOp") return depth * b * dl;
    if (base == "VPT") return depth * b * dv;
    if (base == "JointTV") return depth * b * (dl + dv);
    if (base == "MaPLe") return depth * b * dl + (dl * h + h) + (h * dv + dv);
    if (base == "MLPShared") {
        return depth * b * h + (h * h + h) + (h * dl + dl) + (h * h + h) + (h * dv + dv);
    }
    throw ConfigError("unknown method: " + base);
}

int64_t count_trainable(const std::string& method, const EncoderConfig& enc,
                        const PromptDims& dims, int n_tasks, int n_groups) {
    if (!known_methods().count(method)) {
        throw ConfigError("unknown method: " + method);
    }
    if (n_tasks < 1) throw ConfigError("count_trainable: n_tasks must be >= 1");
    const int64_t unit = count_trainable_unit(base_method(method), enc, dims);
    if (method == "MmAP") {
        if (n_groups < 1) throw ConfigError("count_trainable: n_groups must be >= 1 for MmAP");
        return (static_cast<int64_t>(n_groups) + n_tasks) * unit;
    }
    if (is_multi_task_variant(method)) return unit;
    return n_tasks * unit;
}

}  // namespace mmaptune
