#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mmaptune/prompts.hpp"

#include <cmath>
#include <set>
#include <string>
#include <vector>

using namespace mmaptune;

namespace {

EncoderConfig tiny_config() { return EncoderConfig{}; }  // d_text=16, d_image=24, 2 layers

PromptDims default_dims() { return PromptDims{}; }  // b=4, m=2, n=4, depth=2

std::vector<std::string> param_names(const PromptUnit& u) {
    std::vector<std::string> names;
    u.for_each_param([&](const std::string& n, const Tensor&) { names.push_back(n); });
    return names;
}

std::vector<double> flatten_params(const PromptUnit& u) {
    std::vector<double> out;
    u.for_each_param([&](const std::string&, const Tensor& t) {
        for (int64_t i = 0; i < t.size(); ++i) out.push_back(t[i]);
    });
    return out;
}

void fill_params(PromptUnit& u, Rng& rng) {
    u.for_each_param([&](const std::string&, Tensor& t) {
        for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(1.0);
    });
}

}  // namespace

TEST_CASE("mmap unit allocates factorized parameters with stable names") {
    MmapUnit unit(tiny_config(), default_dims());
    auto names = param_names(unit);
    std::vector<std::string> want{"layers.0.p_s", "layers.0.m_l", "layers.0.m_v",
                                  "layers.1.p_s", "layers.1.m_l", "layers.1.m_v"};
    CHECK(names == want);
    unit.for_each_param([&](const std::string& n, const Tensor& t) {
        if (n.ends_with("p_s")) {
            CHECK(t.rows() == 2);
            CHECK(t.cols() == 4);
        } else if (n.ends_with("m_l")) {
            CHECK(t.rows() == 2);  // b/m
            CHECK(t.cols() == 4);  // d_text/n
        } else {
            CHECK(t.rows() == 2);
            CHECK(t.cols() == 6);  // d_image/n
        }
        for (int64_t i = 0; i < t.size(); ++i) CHECK(t[i] == 0.0);
    });
    CHECK(unit.param_count() == 2 * (8 + 8 + 12));
}

TEST_CASE("mmap generation matches explicit block expansion") {
    EncoderConfig enc = tiny_config();
    PromptDims dims = default_dims();
    MmapUnit unit(enc, dims);
    Rng rng(99);
    fill_params(unit, rng);

    // pull out the layer-0 factors
    Tensor ps({dims.m, dims.n}), ml({dims.b / dims.m, enc.d_text / dims.n}),
        mv({dims.b / dims.m, enc.d_image / dims.n});
    unit.for_each_param([&](const std::string& n, const Tensor& t) {
        if (n == "layers.0.p_s") ps = t;
        if (n == "layers.0.m_l") ml = t;
        if (n == "layers.0.m_v") mv = t;
    });

    Tape tape;
    BoundUnit bu = unit.bind(tape);
    REQUIRE(bu.text.size() == 2);
    REQUIRE(bu.text[0].has_value());
    REQUIRE(bu.image[0].has_value());
    const Tensor& text = tape.value(*bu.text[0]);
    const Tensor& image = tape.value(*bu.image[0]);
    CHECK(text.rows() == dims.b);
    CHECK(text.cols() == enc.d_text);
    CHECK(image.rows() == dims.b);
    CHECK(image.cols() == enc.d_image);

    // independent oracle: P[i*m+p, j*n+q] = M[i,j] * P_s[p,q]
    auto check_blocks = [&](const Tensor& got, const Tensor& M) {
        for (int i = 0; i < M.rows(); ++i)
            for (int j = 0; j < M.cols(); ++j)
                for (int p = 0; p < ps.rows(); ++p)
                    for (int q = 0; q < ps.cols(); ++q) {
                        double want = M.at(i, j) * ps.at(p, q);
                        CHECK(got.at(i * ps.rows() + p, j * ps.cols() + q) == want);
                    }
    };
    check_blocks(text, ml);
    check_blocks(image, mv);
}

TEST_CASE("mmap degenerate factorization reproduces the source prompt exactly") {
    EncoderConfig enc = tiny_config();
    enc.d_text = 4;
    enc.d_image = 8;
    PromptDims dims;
    dims.b = 2;
    dims.m = 2;  // m == b
    dims.n = 4;  // n == d_text
    dims.depth = 1;
    MmapUnit unit(enc, dims);
    Rng rng(5);
    fill_params(unit, rng);
    unit.for_each_param([&](const std::string& n, Tensor& t) {
        if (n == "layers.0.m_l") t[0] = 1.0;  // 1x1 scaling factor
    });
    Tensor ps({2, 4});
    unit.for_each_param([&](const std::string& n, const Tensor& t) {
        if (n == "layers.0.p_s") ps = t;
    });
    Tape tape;
    BoundUnit bu = unit.bind(tape);
    CHECK(tape.value(*bu.text[0]).bit_equal(ps));
}

TEST_CASE("zero-initialized units emit zero prompts everywhere") {
    EncoderConfig enc = tiny_config();
    for (const char* method : {"MmAP", "CoOp", "VPT", "JointTV", "MaPLe", "MLPShared"}) {
        auto unit = make_prompt_unit(method, enc, default_dims());
        Tape tape;
        BoundUnit bu = unit->bind(tape);
        for (const auto& slot : bu.text) {
            if (!slot) continue;
            const Tensor& v = tape.value(*slot);
            for (int64_t i = 0; i < v.size(); ++i) CHECK(v[i] == 0.0);
        }
        for (const auto& slot : bu.image) {
            if (!slot) continue;
            const Tensor& v = tape.value(*slot);
            for (int64_t i = 0; i < v.size(); ++i) CHECK(v[i] == 0.0);
        }
    }
}

TEST_CASE("bound params mirror for_each_param order and alias the host tensors") {
    for (const char* method : {"MmAP", "CoOp", "VPT", "JointTV", "MaPLe", "MLPShared"}) {
        auto unit = make_prompt_unit(method, tiny_config(), default_dims());
        Tape tape;
        BoundUnit bu = unit->bind(tape);
        auto names = param_names(*unit);
        REQUIRE(bu.params.size() == names.size());
        for (size_t i = 0; i < names.size(); ++i) {
            CHECK(bu.params[i].name == names[i]);
            CHECK(tape.trainable(bu.params[i].value));
            CHECK(tape.value(bu.params[i].value).bit_equal(*bu.params[i].host));
        }
        // writing through the host is visible on the next traversal
        *bu.params[0].host->data() = 7.5;
        bool seen = false;
        unit->for_each_param([&](const std::string& n, const Tensor& t) {
            if (n == bu.params[0].name) {
                CHECK(t[0] == 7.5);
                seen = true;
            }
        });
        CHECK(seen);
    }
}

TEST_CASE("free prompt units cover exactly the branches their tag names") {
    EncoderConfig enc = tiny_config();
    auto coop = make_prompt_unit("CoOp", enc, default_dims());
    auto vpt = make_prompt_unit("VPT", enc, default_dims());
    auto joint = make_prompt_unit("JointTV", enc, default_dims());
    Tape tape;
    BoundUnit bc = coop->bind(tape);
    BoundUnit bv = vpt->bind(tape);
    BoundUnit bj = joint->bind(tape);
    for (int k = 0; k < 2; ++k) {
        CHECK(bc.text[k].has_value());
        CHECK_FALSE(bc.image[k].has_value());
        CHECK_FALSE(bv.text[k].has_value());
        CHECK(bv.image[k].has_value());
        CHECK(bj.text[k].has_value());
        CHECK(bj.image[k].has_value());
    }
    CHECK(param_names(*coop) == std::vector<std::string>{"layers.0.text", "layers.1.text"});
    CHECK(param_names(*vpt) == std::vector<std::string>{"layers.0.image", "layers.1.image"});
    CHECK(param_names(*joint) == std::vector<std::string>{"layers.0.text", "layers.0.image",
                                                          "layers.1.text", "layers.1.image"});
}

TEST_CASE("generator mlp computes affine-gelu-affine") {
    // scalar pipeline: x=2, fc=0.5 -> gelu(1) -> *2 + 1
    Tape tape;
    Value x = tape.constant(Tensor({1, 1}, {2.0}));
    Value fw = tape.constant(Tensor({1, 1}, {0.5}));
    Value fb = tape.constant(Tensor({1}, {0.0}));
    Value pw = tape.constant(Tensor({1, 1}, {2.0}));
    Value pb = tape.constant(Tensor({1}, {1.0}));
    Value y = mlp_generate(tape, x, fw, fb, pw, pb);
    const double g1 = 0.5 * (1.0 + std::erf(M_SQRT1_2));  // gelu(1) = Phi(1)
    CHECK(tape.value(y)[0] == g1 * 2.0 + 1.0);
    CHECK(g1 == doctest::Approx(0.8413447460685429).epsilon(1e-15));
}

TEST_CASE("maple shares one generator across layers and couples image to text") {
    EncoderConfig enc = tiny_config();
    MapleUnit unit(enc, default_dims());
    auto names = param_names(unit);
    std::vector<std::string> want{"layers.0.text",  "layers.1.text", "gen.fc.weight",
                                  "gen.fc.bias",    "gen.proj.weight", "gen.proj.bias"};
    CHECK(names == want);
    Rng rng(3);
    randomize_unit(unit, rng);

    Tape tape;
    BoundUnit bu = unit.bind(tape);
    // hidden width is max(d_text, d_image)
    int h = std::max(enc.d_text, enc.d_image);
    unit.for_each_param([&](const std::string& n, const Tensor& t) {
        if (n == "gen.fc.weight") {
            CHECK(t.rows() == enc.d_text);
            CHECK(t.cols() == h);
        }
        if (n == "gen.proj.weight") {
            CHECK(t.rows() == h);
            CHECK(t.cols() == enc.d_image);
        }
    });
    CHECK(tape.value(*bu.image[0]).rows() == 4);
    CHECK(tape.value(*bu.image[0]).cols() == enc.d_image);

    // same text rows through the shared generator give the same image rows
    Tensor before_img0 = tape.value(*bu.image[0]);
    MapleUnit twin = unit;
    twin.for_each_param([&](const std::string& n, Tensor& t) {
        if (n == "layers.1.text") t[0] += 0.25;  // only layer 1 text changes
    });
    Tape tape2;
    BoundUnit bu2 = twin.bind(tape2);
    CHECK(tape2.value(*bu2.image[0]).bit_equal(before_img0));
    CHECK_FALSE(tape2.value(*bu2.image[1]).bit_equal(tape.value(*bu.image[1])));
}

TEST_CASE("mlpshared drives both branches from one source sequence") {
    EncoderConfig enc = tiny_config();
    MlpSharedUnit unit(enc, default_dims());
    auto names = param_names(unit);
    REQUIRE(names.size() == 10);
    CHECK(names[0] == "layers.0.source");
    CHECK(names[1] == "layers.1.source");
    CHECK(names[2] == "gen_text.fc.weight");
    CHECK(names[9] == "gen_image.proj.bias");
    Rng rng(11);
    randomize_unit(unit, rng);
    Tape tape;
    BoundUnit bu = unit.bind(tape);
    CHECK(tape.value(*bu.text[0]).cols() == enc.d_text);
    CHECK(tape.value(*bu.image[0]).cols() == enc.d_image);

    // perturbing the shared source moves both branches
    MlpSharedUnit twin = unit;
    twin.for_each_param([&](const std::string& n, Tensor& t) {
        if (n == "layers.0.source") t[0] += 0.5;
    });
    Tape tape2;
    BoundUnit bu2 = twin.bind(tape2);
    CHECK_FALSE(tape2.value(*bu2.text[0]).bit_equal(tape.value(*bu.text[0])));
    CHECK_FALSE(tape2.value(*bu2.image[0]).bit_equal(tape.value(*bu.image[0])));
}

TEST_CASE("mmap couples branches through the source prompt, jointtv does not") {
    EncoderConfig enc = tiny_config();
    PromptDims dims = default_dims();
    MmapUnit mm(enc, dims);
    Rng rng(21);
    randomize_unit(mm, rng);
    Tape t1;
    BoundUnit b1 = mm.bind(t1);
    MmapUnit mm2 = mm;
    mm2.for_each_param([&](const std::string& n, Tensor& t) {
        if (n == "layers.0.p_s") t[0] += 0.125;
    });
    Tape t2;
    BoundUnit b2 = mm2.bind(t2);
    CHECK_FALSE(t2.value(*b2.text[0]).bit_equal(t1.value(*b1.text[0])));
    CHECK_FALSE(t2.value(*b2.image[0]).bit_equal(t1.value(*b1.image[0])));

    FreePromptUnit joint("JointTV", enc, dims);
    Rng rng2(22);
    randomize_unit(joint, rng2);
    Tape t3;
    BoundUnit b3 = joint.bind(t3);
    FreePromptUnit joint2 = joint;
    joint2.for_each_param([&](const std::string& n, Tensor& t) {
        if (n == "layers.0.text") t[0] += 0.125;
    });
    Tape t4;
    BoundUnit b4 = joint2.bind(t4);
    CHECK_FALSE(t4.value(*b4.text[0]).bit_equal(t3.value(*b3.text[0])));
    CHECK(t4.value(*b4.image[0]).bit_equal(t3.value(*b3.image[0])));
}

TEST_CASE("kron generation formula passes gradient check") {
    Rng rng(31);
    Tensor ps({2, 3}), ml({2, 2});
    for (int64_t i = 0; i < ps.size(); ++i) ps[i] = rng.normal(1.0);
    for (int64_t i = 0; i < ml.size(); ++i) ml[i] = rng.normal(1.0);
    auto build = [](Tape& t, const std::vector<Value>& p) {
        return sum_all(gelu(kron(p[1], p[0])));
    };
    GradCheckReport rep = finite_diff_check(build, {ps, ml}, 1e-5);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("generator mlp formula passes gradient check") {
    Rng rng(32);
    Tensor x({3, 4}), fw({4, 5}), fb({5}), pw({5, 2}), pb({2});
    for (Tensor* t : {&x, &fw, &fb, &pw, &pb})
        for (int64_t i = 0; i < t->size(); ++i) (*t)[i] = rng.normal(0.5);
    auto build = [](Tape& t, const std::vector<Value>& p) {
        return mean_all(mlp_generate(t, p[0], p[1], p[2], p[3], p[4]));
    };
    GradCheckReport rep = finite_diff_check(build, {x, fw, fb, pw, pb}, 1e-5);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("gradients reach every parameter of every bound unit") {
    EncoderConfig enc = tiny_config();
    for (const char* method : {"MmAP", "CoOp", "VPT", "JointTV", "MaPLe", "MLPShared"}) {
        auto unit = make_prompt_unit(method, enc, default_dims());
        Rng rng(41);
        randomize_unit(*unit, rng);
        Tape tape;
        BoundUnit bu = unit->bind(tape);
        std::vector<Value> pieces;
        for (const auto& slot : bu.text)
            if (slot) pieces.push_back(sum_all(gelu(*slot)));
        for (const auto& slot : bu.image)
            if (slot) pieces.push_back(sum_all(gelu(*slot)));
        REQUIRE_FALSE(pieces.empty());
        Value loss = pieces[0];
        for (size_t i = 1; i < pieces.size(); ++i) loss = add(loss, pieces[i]);
        tape.backward(loss);
        for (const BoundParam& p : bu.params) {
            Tensor g = tape.grad(p.value);
            bool any = false;
            for (int64_t i = 0; i < g.size(); ++i)
                if (g[i] != 0.0) any = true;
            CHECK_MESSAGE(any, method << " param " << p.name << " received no gradient");
        }
    }
}

TEST_CASE("prompted image forward backpropagates into mmap factors") {
    EncoderConfig enc = tiny_config();
    BackboneWeights w = init_backbone(enc, 7);
    MmapUnit unit(enc, default_dims());
    Rng rng(51);
    randomize_unit(unit, rng);
    Tape tape;
    BoundBackbone bb = bind_backbone(tape, w);
    BoundUnit bu = unit.bind(tape);
    Tensor image({enc.img_h * enc.img_w * enc.channels});
    Rng img_rng(52);
    for (int64_t i = 0; i < image.size(); ++i) image[i] = img_rng.uniform();
    auto nonzero = [&](const BoundParam& p) {
        Tensor g = tape.grad(p.value);
        for (int64_t i = 0; i < g.size(); ++i)
            if (g[i] != 0.0) return true;
        return false;
    };

    Value x = image_forward(tape, bb, image, make_provider(nullptr, &bu));
    tape.backward(mean_all(x));
    for (const BoundParam& p : bu.params) {
        if (p.name.ends_with("m_l")) {
            // the text factor cannot influence an image-only loss
            CHECK_MESSAGE(!nonzero(p), "image loss leaked into " << p.name);
        } else {
            CHECK_MESSAGE(nonzero(p), "no gradient into " << p.name);
        }
    }

    Value txt = text_forward(tape, bb, std::vector<int>{1, 2, 3}, make_provider(nullptr, &bu));
    tape.backward(mean_all(txt));
    for (const BoundParam& p : bu.params) {
        if (p.name.ends_with("m_l") || p.name.ends_with("p_s")) {
            CHECK_MESSAGE(nonzero(p), "no gradient into " << p.name);
        }
    }
}

TEST_CASE("provider composes group and task units and respects depth") {
    EncoderConfig enc = tiny_config();
    Tape tape;
    auto group = make_prompt_unit("MmAP", enc, default_dims());
    auto task = make_prompt_unit("CoOp", enc, default_dims());
    BoundUnit bg = group->bind(tape);
    BoundUnit bt = task->bind(tape);

    PromptProvider both = make_provider(&bg, &bt);
    LayerPrompts l0 = both(0);
    CHECK(l0.text_group.has_value());
    CHECK(l0.text_task.has_value());
    CHECK(l0.image_group.has_value());
    CHECK_FALSE(l0.image_task.has_value());  // CoOp has no image branch
    LayerPrompts l5 = both(5);               // past depth: nothing
    CHECK_FALSE(l5.text_group.has_value());
    CHECK_FALSE(l5.text_task.has_value());
    CHECK_FALSE(l5.image_group.has_value());
    CHECK_FALSE(l5.image_task.has_value());

    PromptProvider task_only = make_provider(nullptr, &bt);
    LayerPrompts t0 = task_only(0);
    CHECK_FALSE(t0.text_group.has_value());
    CHECK(t0.text_task.has_value());

    PromptProvider none = make_provider(nullptr, nullptr);
    LayerPrompts n0 = none(0);
    CHECK_FALSE(n0.text_group.has_value());
    CHECK_FALSE(n0.text_task.has_value());
    CHECK_FALSE(n0.image_group.has_value());
    CHECK_FALSE(n0.image_task.has_value());
}

TEST_CASE("method tags: -MT stripping and factory dispatch") {
    CHECK(base_method("CoOp-MT") == "CoOp");
    CHECK(base_method("CoOp") == "CoOp");
    CHECK(base_method("MaPLe-MT") == "MaPLe");
    CHECK(is_multi_task_variant("VPT-MT"));
    CHECK_FALSE(is_multi_task_variant("VPT"));
    CHECK_FALSE(is_multi_task_variant("MmAP"));

    EncoderConfig enc = tiny_config();
    PromptDims dims = default_dims();
    CHECK(make_prompt_unit("CoOp-MT", enc, dims)->method() == "CoOp");
    CHECK(make_prompt_unit("MmAP", enc, dims)->method() == "MmAP");
    CHECK_THROWS_AS(make_prompt_unit("BitFit", enc, dims), ConfigError);
    CHECK_THROWS_AS(make_prompt_unit("DeepPrompt", enc, dims), ConfigError);
    CHECK_THROWS_AS(make_prompt_unit("JointTV-MT", enc, dims), ConfigError);
}

TEST_CASE("prompt dimension validation") {
    EncoderConfig enc = tiny_config();
    PromptDims dims = default_dims();

    PromptDims bad = dims;
    bad.b = 0;
    CHECK_THROWS_AS(make_prompt_unit("CoOp", enc, bad), ConfigError);
    bad = dims;
    bad.depth = 3;  // > n_layers
    CHECK_THROWS_AS(make_prompt_unit("VPT", enc, bad), ConfigError);
    bad = dims;
    bad.m = 3;  // does not divide b=4
    CHECK_THROWS_AS(make_prompt_unit("MmAP", enc, bad), ConfigError);
    bad = dims;
    bad.n = 5;  // does not divide d_text=16
    CHECK_THROWS_AS(make_prompt_unit("MmAP", enc, bad), ConfigError);
    bad = dims;
    bad.n = 16;  // divides d_text but not d_image=24
    CHECK_THROWS_AS(make_prompt_unit("MmAP", enc, bad), ConfigError);
    // the same n is fine for CoOp, which ignores the factorization
    CHECK_NOTHROW(make_prompt_unit("CoOp", enc, bad));
}

TEST_CASE("closed-form counts match enumerated parameters") {
    Rng rng(61);
    int checked = 0;
    for (int it = 0; it < 100; ++it) {
        EncoderConfig enc = tiny_config();
        int n = static_cast<int>(rng.uniform_int(1, 4));
        enc.d_text = n * static_cast<int>(rng.uniform_int(1, 6));
        enc.d_image = n * static_cast<int>(rng.uniform_int(1, 6));
        enc.n_layers = static_cast<int>(rng.uniform_int(1, 4));
        PromptDims dims;
        dims.m = static_cast<int>(rng.uniform_int(1, 3));
        dims.b = dims.m * static_cast<int>(rng.uniform_int(1, 4));
        dims.n = n;
        dims.depth = static_cast<int>(rng.uniform_int(1, enc.n_layers));
        for (const char* method : {"MmAP", "CoOp", "VPT", "JointTV", "MaPLe", "MLPShared"}) {
            auto unit = make_prompt_unit(method, enc, dims);
            CHECK(count_trainable_unit(method, enc, dims) == unit->param_count());
            ++checked;
        }
    }
    CHECK(checked == 600);
}

TEST_CASE("bitfit count matches the bias arrays a trainable binding exposes") {
    EncoderConfig enc = tiny_config();
    BackboneWeights w = init_backbone(enc, 123);
    Tape tape;
    BoundBackbone bb = bind_backbone_trainable_biases(tape, w);
    int64_t enumerated = 0;
    for (const BoundParam& p : bb.bias_params) enumerated += p.host->size();
    CHECK(count_trainable_unit("BitFit", enc, default_dims()) == enumerated);
    CHECK(enumerated == 904);  // 24 + 11*2*(16+24)
}

TEST_CASE("worked count examples") {
    // depth 1, b=m=n=1, d_text=16, d_image=24: 1 + 16 + 24 = 41
    EncoderConfig enc = tiny_config();
    enc.n_layers = 1;
    PromptDims dims;
    dims.b = 1;
    dims.m = 1;
    dims.n = 1;
    dims.depth = 1;
    CHECK(count_trainable_unit("MmAP", enc, dims) == 41);
    auto unit = make_prompt_unit("MmAP", enc, dims);
    CHECK(unit->param_count() == 41);

    // depth 2, b=2 joint prompts over both widths: 2*2*(16+24) = 160
    EncoderConfig enc2 = tiny_config();
    PromptDims dims2;
    dims2.b = 2;
    dims2.depth = 2;
    dims2.m = 1;
    dims2.n = 1;
    CHECK(count_trainable_unit("JointTV", enc2, dims2) == 160);
    CHECK(make_prompt_unit("JointTV", enc2, dims2)->param_count() == 160);
}

TEST_CASE("mmap is smaller than unfactorized and generator baselines at defaults") {
    EncoderConfig enc = tiny_config();
    PromptDims dims = default_dims();
    int64_t mmap = count_trainable_unit("MmAP", enc, dims);
    CHECK(mmap == 56);
    CHECK(mmap < count_trainable_unit("JointTV", enc, dims));
    CHECK(mmap < count_trainable_unit("MLPShared", enc, dims));
    CHECK(count_trainable_unit("JointTV", enc, dims) <
          count_trainable_unit("MLPShared", enc, dims));
}

TEST_CASE("framework-level multiplicities") {
    EncoderConfig enc = tiny_config();
    PromptDims dims = default_dims();
    int64_t unit = count_trainable_unit("MmAP", enc, dims);
    CHECK(count_trainable("MmAP", enc, dims, 4, 2) == 6 * unit);
    CHECK(count_trainable("MmAP", enc, dims, 4, 1) == 5 * unit);

    int64_t coop = count_trainable_unit("CoOp", enc, dims);
    CHECK(count_trainable("CoOp", enc, dims, 4, 0) == 4 * coop);
    CHECK(count_trainable("CoOp-MT", enc, dims, 4, 0) == coop);
    CHECK(count_trainable("VPT-MT", enc, dims, 7, 0) ==
          count_trainable_unit("VPT", enc, dims));

    int64_t bitfit = count_trainable_unit("BitFit", enc, dims);
    CHECK(count_trainable("BitFit", enc, dims, 3, 0) == 3 * bitfit);

    CHECK_THROWS_AS(count_trainable("MmAP", enc, dims, 4, 0), ConfigError);
    CHECK_THROWS_AS(count_trainable("CoOp", enc, dims, 0, 0), ConfigError);
    CHECK_THROWS_AS(count_trainable("NoSuch", enc, dims, 1, 1), ConfigError);
}

TEST_CASE("randomize_unit is deterministic with the right scale") {
    EncoderConfig enc = tiny_config();
    enc.d_text = 64;
    PromptDims dims;
    dims.b = 32;
    dims.depth = 2;
    auto a = make_prompt_unit("CoOp", enc, dims);
    auto b = make_prompt_unit("CoOp", enc, dims);
    Rng ra(77), rb(77);
    randomize_unit(*a, ra);
    randomize_unit(*b, rb);
    auto va = flatten_params(*a), vb = flatten_params(*b);
    REQUIRE(va.size() == vb.size());
    for (size_t i = 0; i < va.size(); ++i) CHECK(va[i] == vb[i]);

    double mean = 0.0;
    for (double v : va) mean += v;
    mean /= static_cast<double>(va.size());
    double var = 0.0;
    for (double v : va) var += (v - mean) * (v - mean);
    var /= static_cast<double>(va.size());
    CHECK(std::abs(mean) < 0.002);
    CHECK(std::abs(std::sqrt(var) - 0.02) < 0.002);
}

TEST_CASE("clone detaches parameter storage") {
    auto unit = make_prompt_unit("MmAP", tiny_config(), default_dims());
    Rng rng(88);
    randomize_unit(*unit, rng);
    auto copy = unit->clone();
    CHECK(copy->method() == "MmAP");
    CHECK(copy->param_count() == unit->param_count());
    auto before = flatten_params(*copy);
    unit->for_each_param([](const std::string&, Tensor& t) { t[0] = 1e9; });
    auto after = flatten_params(*copy);
    CHECK(before == after);
    CHECK(flatten_params(*unit) != before);
}
