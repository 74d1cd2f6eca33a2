#include "mmaptune/data.hpp"

#include "mmaptune/grouping.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace mmaptune {

using nlohmann::json;

void SyntheticSpec::validate() const {
    if (n_tasks < 1) throw ConfigError("synthetic spec: n_tasks must be >= 1");
    if (n_classes < 2) throw ConfigError("synthetic spec: C must be >= 2");
    if (samples_per_class < 2) throw ConfigError("synthetic spec: samples_per_class must be >= 2");
    if (img_h < 1 || img_w < 1 || channels < 1) {
        throw ConfigError("synthetic spec: image dims must be positive");
    }
    if (name_tokens < 1) throw ConfigError("synthetic spec: name_tokens must be >= 1");
    if (rho < 0.0 || rho > 1.0) throw ConfigError("synthetic spec: rho must be in [0,1]");
    if (sigma < 0.0) throw ConfigError("synthetic spec: sigma must be >= 0");
    if (vocab < 1) throw ConfigError("synthetic spec: vocab must be >= 1");
    for (int tok : template_tokens) {
        if (tok < 0 || tok >= vocab) {
            throw ConfigError("synthetic spec: template token out of vocab range");
        }
    }
    if (!is_valid_partition(planted, n_tasks)) {
        throw ConfigError("synthetic spec: planted grouping is not a partition of the tasks");
    }
}

std::vector<int> TaskManifest::class_sequence(int label) const {
    if (label < 0 || label >= static_cast<int>(classes.size())) {
        throw DataError("class_sequence: label " + std::to_string(label) + " out of range");
    }
    std::vector<int> seq = template_tokens;
    const auto& name = classes[static_cast<size_t>(label)].tokens;
    seq.insert(seq.end(), name.begin(), name.end());
    return seq;
}

void TaskManifest::validate() const {
    if (format_version != 1) throw DataError("manifest field format_version: unsupported value");
    if (C < 2) throw DataError("manifest field C: must be >= 2");
    if (H < 1 || W < 1) throw DataError("manifest field H/W: must be positive");
    if (channels < 1) throw DataError("manifest field channels: must be positive");
    if (vocab < 1) throw DataError("manifest field vocab: must be positive");
    for (int tok : template_tokens) {
        if (tok < 0 || tok >= vocab) {
            throw DataError("manifest field template_tokens: token out of vocab range");
        }
    }
    if (static_cast<int>(classes.size()) != C) {
        throw DataError("manifest field classes: expected " + std::to_string(C) + " records");
    }
    size_t name_len = 0;
    for (int c = 0; c < C; ++c) {
        const ClassRecord& rec = classes[static_cast<size_t>(c)];
        if (rec.id != c) throw DataError("manifest field classes: ids must be 0..C-1 in order");
        if (rec.tokens.empty()) throw DataError("manifest field tokens: empty class name");
        if (c == 0) name_len = rec.tokens.size();
        if (rec.tokens.size() != name_len) {
            throw DataError("manifest field tokens: class names must share one length");
        }
        for (int tok : rec.tokens) {
            if (tok < 0 || tok >= vocab) {
                throw DataError("manifest field tokens: token out of vocab range");
            }
        }
    }
    const int64_t want_pixels = static_cast<int64_t>(H) * W * channels;
    std::vector<std::set<std::string>> splits_seen(static_cast<size_t>(C));
    for (const Sample& s : samples) {
        if (s.split != "train" && s.split != "test") {
            throw DataError("manifest field split: expected train or test, got '" + s.split + "'");
        }
        if (s.label < 0 || s.label >= C) {
            throw DataError("manifest field label: " + std::to_string(s.label) +
                            " outside [0," + std::to_string(C) + ")");
        }
        if (s.pixels.rank() != 1 || s.pixels.size() != want_pixels) {
            throw DataError("manifest field pixels: expected " + std::to_string(want_pixels) +
                            " values");
        }
        if (!s.pixels.all_finite()) throw DataError("manifest field pixels: non-finite value");
        splits_seen[static_cast<size_t>(s.label)].insert(s.split);
    }
    for (int c = 0; c < C; ++c) {
        if (splits_seen[static_cast<size_t>(c)].size() != 2) {
            throw DataError("manifest field split: class " + std::to_string(c) +
                            " must appear in both train and test");
        }
    }
}

std::vector<TaskManifest> generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    Rng master(spec.seed);
    const int D = spec.pixel_count();
    const int C = spec.n_classes;

    // One global class-name vocabulary: every task labels the same C classes,
    // mirroring a multi-domain benchmark. What a class looks like is decided
    // per group, so same-group tasks agree on name->appearance while tasks in
    // different groups genuinely disagree about the same names.
    std::vector<std::vector<int>> names;
    {
        Rng name_rng = master.fork(4000);
        for (int c = 0; c < C; ++c) {
            std::vector<int> name(static_cast<size_t>(spec.name_tokens));
            for (int& tok : name) tok = name_rng.uniform_int(0, spec.vocab - 1);
            names.push_back(std::move(name));
        }
    }
    std::vector<std::vector<Tensor>> pools(spec.planted.size());
    std::vector<int> group_of(static_cast<size_t>(spec.n_tasks), -1);
    for (size_t g = 0; g < spec.planted.size(); ++g) {
        Rng proto_rng = master.fork(1000 + static_cast<std::uint64_t>(g));
        for (int c = 0; c < C; ++c) {
            Tensor p({D});
            for (int64_t i = 0; i < p.size(); ++i) p[i] = proto_rng.normal(1.0);
            pools[g].push_back(std::move(p));
        }
        for (int t : spec.planted[g]) group_of[static_cast<size_t>(t)] = static_cast<int>(g);
    }
    // Center each class's appearance across groups: the groups then disagree
    // about every name (cross-group correlation -1/(G-1)) instead of merely
    // being independent, so helping one group's reading of a name costs the
    // others. Single-group specs keep raw prototypes.
    const size_t G = spec.planted.size();
    if (G >= 2) {
        for (int c = 0; c < C; ++c) {
            Tensor mean({D});
            for (size_t g = 0; g < G; ++g) {
                for (int64_t i = 0; i < mean.size(); ++i) {
                    mean[i] += pools[g][static_cast<size_t>(c)][i] / static_cast<double>(G);
                }
            }
            for (size_t g = 0; g < G; ++g) {
                for (int64_t i = 0; i < mean.size(); ++i) {
                    pools[g][static_cast<size_t>(c)][i] -= mean[i];
                }
            }
        }
    }

    const int test_count = std::max(1, spec.samples_per_class / 5);
    std::vector<TaskManifest> out;
    for (int t = 0; t < spec.n_tasks; ++t) {
        const auto& protos = pools[static_cast<size_t>(group_of[static_cast<size_t>(t)])];
        Rng priv_rng = master.fork(2000 + static_cast<std::uint64_t>(t));
        Rng noise_rng = master.fork(3000 + static_cast<std::uint64_t>(t));

        TaskManifest m;
        m.task = "task" + std::to_string(t);
        m.C = C;
        m.H = spec.img_h;
        m.W = spec.img_w;
        m.channels = spec.channels;
        m.vocab = spec.vocab;
        m.template_tokens = spec.template_tokens;
        for (int c = 0; c < C; ++c) {
            m.classes.push_back({c, names[static_cast<size_t>(c)]});
        }

        for (int c = 0; c < C; ++c) {
            Tensor proto({D});
            for (int64_t i = 0; i < proto.size(); ++i) {
                double priv = priv_rng.normal(1.0);
                proto[i] = spec.rho * protos[static_cast<size_t>(c)][i] +
                           (1.0 - spec.rho) * priv;
            }
            for (int k = 0; k < spec.samples_per_class; ++k) {
                Sample s;
                s.split = k < test_count ? "test" : "train";
                s.label = c;
                s.pixels = Tensor({D});
                for (int64_t i = 0; i < s.pixels.size(); ++i) {
                    s.pixels[i] = proto[i] + noise_rng.normal(spec.sigma);
                }
                m.samples.push_back(std::move(s));
            }
        }
        m.validate();
        out.push_back(std::move(m));
    }
    return out;
}

namespace {

json header_to_json(const TaskManifest& m) {
    json classes = json::array();
    for (const ClassRecord& c : m.classes) {
        classes.push_back({{"id", c.id}, {"tokens", c.tokens}});
    }
    return json{{"format_version", m.format_version}, {"task", m.task},       {"C", m.C},
                {"H", m.H},                           {"W", m.W},             {"channels", m.channels},
                {"vocab", m.vocab},                   {"template_tokens", m.template_tokens},
                {"classes", classes}};
}

}  // namespace

void save_manifest(const TaskManifest& m, const std::string& path) {
    m.validate();
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << header_to_json(m).dump() << '\n';
    for (const Sample& s : m.samples) {
        std::vector<double> px(s.pixels.data(), s.pixels.data() + s.pixels.size());
        json line{{"split", s.split}, {"label", s.label}, {"pixels", px}};
        out << line.dump() << '\n';
    }
    if (!out) throw DataError("write failed for " + path);
}

TaskManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::string line;
    int line_no = 0;
    TaskManifest m;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("malformed record: ") + e.what(), line_no);
        }
        try {
            if (line_no == 1) {
                m.format_version = j.at("format_version").get<int>();
                m.task = j.at("task").get<std::string>();
                m.C = j.at("C").get<int>();
                m.H = j.at("H").get<int>();
                m.W = j.at("W").get<int>();
                m.channels = j.at("channels").get<int>();
                m.vocab = j.at("vocab").get<int>();
                m.template_tokens = j.at("template_tokens").get<std::vector<int>>();
                for (const json& c : j.at("classes")) {
                    m.classes.push_back(
                        {c.at("id").get<int>(), c.at("tokens").get<std::vector<int>>()});
                }
            } else {
                Sample s;
                s.split = j.at("split").get<std::string>();
                s.label = j.at("label").get<int>();
                auto px = j.at("pixels").get<std::vector<double>>();
                if (px.empty()) throw DataError("manifest field pixels: empty");
                s.pixels = Tensor({static_cast<int>(px.size())}, px);
                m.samples.push_back(std::move(s));
            }
        } catch (const json::exception& e) {
            throw ParseError(std::string("bad record field: ") + e.what(), line_no);
        }
    }
    if (line_no == 0) throw ParseError("missing header", 1);
    m.validate();
    return m;
}

SplitIndices split_with_shots(const TaskManifest& m, int shots, std::uint64_t seed) {
    if (shots < 0) throw ConfigError("split: shots must be >= 0");
    m.validate();
    std::vector<std::vector<int>> pool(static_cast<size_t>(m.C));
    SplitIndices out;
    for (int i = 0; i < static_cast<int>(m.samples.size()); ++i) {
        const Sample& s = m.samples[static_cast<size_t>(i)];
        if (s.split == "train") {
            pool[static_cast<size_t>(s.label)].push_back(i);
        } else {
            out.test.push_back(i);
        }
    }
    Rng rng(seed);
    for (int c = 0; c < m.C; ++c) {
        auto& p = pool[static_cast<size_t>(c)];
        if (shots == 0) {
            out.train.insert(out.train.end(), p.begin(), p.end());
            continue;
        }
        if (static_cast<int>(p.size()) < shots) {
            throw DataError("split: class " + std::to_string(c) + " has only " +
                            std::to_string(p.size()) + " train samples, need " +
                            std::to_string(shots));
        }
        rng.shuffle(p);
        p.resize(static_cast<size_t>(shots));
        out.train.insert(out.train.end(), p.begin(), p.end());
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

}  // namespace mmaptune
