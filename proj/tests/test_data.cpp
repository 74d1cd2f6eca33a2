#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mmaptune/data.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

using namespace mmaptune;

namespace {

SyntheticSpec small_spec() {
    SyntheticSpec spec;
    spec.n_tasks = 4;
    spec.n_classes = 3;
    spec.samples_per_class = 10;
    spec.seed = 42;
    return spec;  // planted pairs {0,1},{2,3} by default
}

double l2_dist(const Tensor& a, const Tensor& b) {
    double d = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(d);
}

/// Mean pixel vector of one class, a noise-robust prototype estimate.
Tensor class_mean(const TaskManifest& m, int label) {
    Tensor sum({static_cast<int>(m.H) * m.W * m.channels});
    int count = 0;
    for (const Sample& s : m.samples) {
        if (s.label != label) continue;
        for (int64_t i = 0; i < sum.size(); ++i) sum[i] += s.pixels[i];
        ++count;
    }
    REQUIRE(count > 0);
    for (int64_t i = 0; i < sum.size(); ++i) sum[i] /= count;
    return sum;
}

std::string temp_path(const std::string& name) { return "/tmp/mmaptune_test_" + name; }

}  // namespace

TEST_CASE("spec validation") {
    CHECK_NOTHROW(small_spec().validate());
    SyntheticSpec s = small_spec();
    s.rho = 1.5;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = small_spec();
    s.n_classes = 1;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = small_spec();
    s.planted = {{0, 1}, {2}};  // misses task 3
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = small_spec();
    s.planted = {{0, 1}, {1, 2, 3}};  // duplicate
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = small_spec();
    s.template_tokens = {70};  // outside vocab 64
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = small_spec();
    s.sigma = -0.1;
    CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("generation is deterministic and structurally sound") {
    SyntheticSpec spec = small_spec();
    auto a = generate_synthetic(spec);
    auto b = generate_synthetic(spec);
    REQUIRE(a.size() == 4);
    for (size_t t = 0; t < a.size(); ++t) {
        CHECK(a[t].task == "task" + std::to_string(t));
        CHECK(a[t].C == 3);
        CHECK(a[t].samples.size() == 30);
        CHECK_NOTHROW(a[t].validate());
        REQUIRE(a[t].samples.size() == b[t].samples.size());
        for (size_t i = 0; i < a[t].samples.size(); ++i) {
            CHECK(a[t].samples[i].pixels.bit_equal(b[t].samples[i].pixels));
            CHECK(a[t].samples[i].label == b[t].samples[i].label);
            CHECK(a[t].samples[i].split == b[t].samples[i].split);
        }
    }
    auto c = generate_synthetic([&] {
        SyntheticSpec s2 = spec;
        s2.seed = 43;
        return s2;
    }());
    CHECK_FALSE(c[0].samples[0].pixels.bit_equal(a[0].samples[0].pixels));
}

TEST_CASE("same planted group shares class names, different groups do not collide by construction") {
    auto tasks = generate_synthetic(small_spec());
    for (int c = 0; c < 3; ++c) {
        CHECK(tasks[0].classes[c].tokens == tasks[1].classes[c].tokens);
        CHECK(tasks[2].classes[c].tokens == tasks[3].classes[c].tokens);
    }
    // full class sequence = template + name
    auto seq = tasks[0].class_sequence(1);
    REQUIRE(seq.size() == tasks[0].template_tokens.size() + tasks[0].classes[1].tokens.size());
    for (size_t i = 0; i < tasks[0].template_tokens.size(); ++i) {
        CHECK(seq[i] == tasks[0].template_tokens[i]);
    }
    CHECK_THROWS_AS(tasks[0].class_sequence(99), DataError);
}

TEST_CASE("rho=1 makes same-group prototypes identical, rho=0 unrelated") {
    SyntheticSpec spec = small_spec();
    spec.sigma = 0.0;  // samples equal the prototypes exactly
    spec.rho = 1.0;
    auto same = generate_synthetic(spec);
    // with no noise and full mixing, the k-th sample of class c is the shared
    // prototype in both pair members
    for (int c = 0; c < spec.n_classes; ++c) {
        Tensor p0 = class_mean(same[0], c);
        Tensor p1 = class_mean(same[1], c);
        CHECK(l2_dist(p0, p1) < 1e-12);
    }

    spec.rho = 0.0;
    auto diff = generate_synthetic(spec);
    for (int c = 0; c < spec.n_classes; ++c) {
        // independent Gaussian prototypes in 64 dims concentrate around
        // distance sqrt(2*64) ~ 11.3; far from zero
        CHECK(l2_dist(class_mean(diff[0], c), class_mean(diff[1], c)) > 3.0);
    }
}

TEST_CASE("intra-task class prototypes stay separable at the default noise") {
    SyntheticSpec spec = small_spec();
    auto tasks = generate_synthetic(spec);
    for (const auto& m : tasks) {
        for (int c1 = 0; c1 < m.C; ++c1) {
            for (int c2 = c1 + 1; c2 < m.C; ++c2) {
                double d = l2_dist(class_mean(m, c1), class_mean(m, c2));
                CHECK(d > 4.0 * spec.sigma);  // documented separability margin
            }
        }
    }
}

TEST_CASE("manifest round trip is exact") {
    auto tasks = generate_synthetic(small_spec());
    std::string path = temp_path("roundtrip.jsonl");
    save_manifest(tasks[0], path);
    TaskManifest back = load_manifest(path);
    CHECK(back.task == tasks[0].task);
    CHECK(back.C == tasks[0].C);
    CHECK(back.vocab == tasks[0].vocab);
    CHECK(back.template_tokens == tasks[0].template_tokens);
    REQUIRE(back.classes.size() == tasks[0].classes.size());
    for (size_t c = 0; c < back.classes.size(); ++c) {
        CHECK(back.classes[c].id == tasks[0].classes[c].id);
        CHECK(back.classes[c].tokens == tasks[0].classes[c].tokens);
    }
    REQUIRE(back.samples.size() == tasks[0].samples.size());
    for (size_t i = 0; i < back.samples.size(); ++i) {
        CHECK(back.samples[i].split == tasks[0].samples[i].split);
        CHECK(back.samples[i].label == tasks[0].samples[i].label);
        CHECK(back.samples[i].pixels.bit_equal(tasks[0].samples[i].pixels));
    }
    std::remove(path.c_str());
}

TEST_CASE("malformed files are rejected with line information") {
    auto tasks = generate_synthetic(small_spec());
    std::string path = temp_path("broken.jsonl");

    {  // truncated sample line
        save_manifest(tasks[0], path);
        std::ifstream in(path);
        std::string all, line;
        int n = 0;
        while (std::getline(in, line) && n < 3) {
            all += line + "\n";
            ++n;
        }
        in.close();
        all += "{\"split\": \"train\", \"label\"";  // cut mid-record
        std::ofstream out(path);
        out << all;
        out.close();
        try {
            load_manifest(path);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("line 4") != std::string::npos);
        }
    }

    {  // header with a wrong-typed field
        std::ofstream out(path);
        out << "{\"format_version\": 1, \"task\": 5}\n";
        out.close();
        CHECK_THROWS_AS(load_manifest(path), ParseError);
    }

    {  // empty file
        std::ofstream out(path);
        out.close();
        CHECK_THROWS_AS(load_manifest(path), ParseError);
    }

    CHECK_THROWS_AS(load_manifest(temp_path("no_such_file.jsonl")), DataError);
    std::remove(path.c_str());
}

TEST_CASE("invariant violations name the offending field") {
    auto tasks = generate_synthetic(small_spec());
    TaskManifest m = tasks[0];
    m.samples[0].label = m.C;  // out of range
    try {
        m.validate();
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("label") != std::string::npos);
    }

    m = tasks[0];
    m.samples[0].split = "validation";
    try {
        m.validate();
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("split") != std::string::npos);
    }

    m = tasks[0];
    m.samples[0].pixels = Tensor({3});
    try {
        m.validate();
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("pixels") != std::string::npos);
    }

    m = tasks[0];
    m.classes[1].tokens = {999};  // outside vocab
    try {
        m.validate();
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("tokens") != std::string::npos);
    }

    m = tasks[0];
    for (Sample& s : m.samples) {
        if (s.label == 0 && s.split == "test") s.split = "train";
    }
    try {
        m.validate();
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("split") != std::string::npos);
    }
}

TEST_CASE("every class appears in both stored splits") {
    auto tasks = generate_synthetic(small_spec());
    for (const auto& m : tasks) {
        std::set<std::pair<int, std::string>> seen;
        for (const Sample& s : m.samples) seen.insert({s.label, s.split});
        CHECK(seen.size() == static_cast<size_t>(2 * m.C));
    }
}

TEST_CASE("few-shot split is stratified, disjoint and deterministic") {
    SyntheticSpec spec = small_spec();
    spec.samples_per_class = 60;  // 12 test-tagged, 48 train-tagged per class
    auto tasks = generate_synthetic(spec);
    const TaskManifest& m = tasks[0];

    SplitIndices a = split_with_shots(m, 6, 7);
    SplitIndices b = split_with_shots(m, 6, 7);
    CHECK(a.train == b.train);
    CHECK(a.test == b.test);
    CHECK(a.train.size() == static_cast<size_t>(6 * m.C));

    std::vector<int> per_class(static_cast<size_t>(m.C), 0);
    std::set<int> train_set(a.train.begin(), a.train.end());
    for (int idx : a.train) {
        const Sample& s = m.samples[static_cast<size_t>(idx)];
        CHECK(s.split == "train");
        ++per_class[static_cast<size_t>(s.label)];
    }
    for (int count : per_class) CHECK(count == 6);
    for (int idx : a.test) {
        CHECK(m.samples[static_cast<size_t>(idx)].split == "test");
        CHECK(train_set.count(idx) == 0);
    }
    CHECK(a.test.size() == static_cast<size_t>(12 * m.C));

    SplitIndices c = split_with_shots(m, 6, 8);
    CHECK(c.train != a.train);  // different seed draws a different shot set

    SplitIndices all = split_with_shots(m, 0, 7);
    CHECK(all.train.size() == static_cast<size_t>(48 * m.C));

    CHECK_THROWS_AS(split_with_shots(m, 49, 7), DataError);
    CHECK_THROWS_AS(split_with_shots(m, -1, 7), ConfigError);
}
