#include "mmaptune/serialize.hpp"

#include "json.hpp"

#include <fstream>
#include <sstream>

namespace mmaptune {

using nlohmann::json;

namespace {

json tensor_to_json(const std::string& name, const Tensor& t) {
    if (!t.all_finite()) {
        throw NumericError("serialize: tensor '" + name + "' holds non-finite values");
    }
    json j;
    j["shape"] = t.shape();
    j["values"] = std::vector<double>(t.data(), t.data() + t.size());
    return j;
}

Tensor tensor_from_json(const std::string& name, const json& j) {
    if (!j.is_object() || !j.contains("shape") || !j.contains("values")) {
        throw DataError("deserialize: entry '" + name + "' lacks shape/values");
    }
    std::vector<int> shape = j.at("shape").get<std::vector<int>>();
    std::vector<double> values = j.at("values").get<std::vector<double>>();
    int64_t expect = 1;
    for (int d : shape) expect *= d;
    if (shape.empty() || expect != static_cast<int64_t>(values.size())) {
        throw DataError("deserialize: entry '" + name + "' shape does not match value count");
    }
    return Tensor(std::move(shape), std::move(values));
}

json parse_file(const std::string& path, const std::string& what) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + what + " file " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw DataError(what + " file " + path + ": " + e.what());
    }
}

void write_file(const std::string& path, const json& doc, const std::string& what) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + what + " file " + path);
    out << doc.dump() << '\n';
    if (!out) throw DataError("write failed for " + what + " file " + path);
}

json config_to_json(const EncoderConfig& c) {
    return json{{"n_layers", c.n_layers}, {"d_text", c.d_text},     {"d_image", c.d_image},
                {"d_embed", c.d_embed},   {"n_heads", c.n_heads},   {"img_h", c.img_h},
                {"img_w", c.img_w},       {"patch", c.patch},       {"channels", c.channels},
                {"n_ctx", c.n_ctx},       {"vocab", c.vocab},       {"tau", c.tau}};
}

EncoderConfig config_from_json(const json& j) {
    EncoderConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.d_text = j.at("d_text").get<int>();
    c.d_image = j.at("d_image").get<int>();
    c.d_embed = j.at("d_embed").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.img_h = j.at("img_h").get<int>();
    c.img_w = j.at("img_w").get<int>();
    c.patch = j.at("patch").get<int>();
    c.channels = j.at("channels").get<int>();
    c.n_ctx = j.at("n_ctx").get<int>();
    c.vocab = j.at("vocab").get<int>();
    c.tau = j.at("tau").get<double>();
    return c;
}

json partition_to_json(const Partition& p) {
    return json{{"groups", p.groups}, {"objective", p.objective}};
}

Partition partition_from_json(const json& j) {
    Partition p;
    p.groups = j.at("groups").get<std::vector<std::vector<int>>>();
    p.objective = j.at("objective").get<double>();
    return p;
}

/// Overwrites a freshly built unit's parameters from the stored map; every
/// stored name must be used and every parameter must be stored.
void fill_unit(PromptUnit& unit, const std::string& role, const json& stored) {
    size_t used = 0;
    unit.for_each_param([&](const std::string& name, Tensor& t) {
        if (!stored.contains(name)) {
            throw DataError("checkpoint unit '" + role + "' is missing parameter '" + name + "'");
        }
        Tensor v = tensor_from_json(name, stored.at(name));
        if (!v.same_shape(t)) {
            throw DataError("checkpoint unit '" + role + "' parameter '" + name +
                            "' has shape " + v.shape_str() + ", expected " + t.shape_str());
        }
        t = std::move(v);
        ++used;
    });
    if (used != stored.size()) {
        throw DataError("checkpoint unit '" + role + "' holds " + std::to_string(stored.size()) +
                        " parameters, expected " + std::to_string(used));
    }
}

}  // namespace

std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

void save_backbone(const BackboneWeights& w, const EncoderConfig& config, std::uint64_t seed,
                   const std::string& path) {
    json params = json::object();
    w.for_each_param([&](const std::string& name, const Tensor& t) {
        params[name] = tensor_to_json(name, t);
    });
    json doc{{"format_version", 1},
             {"kind", "backbone"},
             {"config", config_to_json(config)},
             {"seed", seed},
             {"parameters", std::move(params)}};
    write_file(path, doc, "backbone");
}

LoadedBackbone load_backbone(const std::string& path) {
    json doc = parse_file(path, "backbone");
    if (doc.value("kind", "") != "backbone") {
        throw DataError("backbone file " + path + ": kind is not 'backbone'");
    }
    LoadedBackbone out;
    out.config = config_from_json(doc.at("config"));
    out.seed = doc.at("seed").get<std::uint64_t>();
    out.weights = init_backbone(out.config, out.seed);
    const json& params = doc.at("parameters");
    size_t used = 0;
    out.weights.for_each_param([&](const std::string& name, Tensor& t) {
        if (!params.contains(name)) {
            throw DataError("backbone file " + path + " is missing parameter '" + name + "'");
        }
        Tensor v = tensor_from_json(name, params.at(name));
        if (!v.same_shape(t)) {
            throw DataError("backbone parameter '" + name + "' has shape " + v.shape_str() +
                            ", expected " + t.shape_str());
        }
        t = std::move(v);
        ++used;
    });
    if (used != params.size()) {
        throw DataError("backbone file " + path + " holds " + std::to_string(params.size()) +
                        " parameters, expected " + std::to_string(used));
    }
    return out;
}

void save_checkpoint(const Checkpoint& ck, const PromptDims& dims, const std::string& path) {
    json units = json::object();
    for (const auto& [role, unit] : ck.units) {
        json stored = json::object();
        const PromptUnit& u = *unit;
        u.for_each_param([&](const std::string& name, const Tensor& t) {
            stored[name] = tensor_to_json(role + "/" + name, t);
        });
        units[role] = std::move(stored);
    }
    json deltas = json::object();
    for (const auto& [role, named] : ck.bias_deltas) {
        json stored = json::object();
        for (const auto& [name, t] : named) stored[name] = tensor_to_json(role + "/" + name, t);
        deltas[role] = std::move(stored);
    }
    json doc{{"format_version", 1},
             {"kind", "checkpoint"},
             {"method", ck.method},
             {"seed", ck.seed},
             {"config_hash", ck.config_hash},
             {"dims", json{{"b", dims.b}, {"m", dims.m}, {"n", dims.n}, {"depth", dims.depth}}},
             {"partition", partition_to_json(ck.partition)},
             {"final_losses", ck.final_losses},
             {"units", std::move(units)},
             {"bias_deltas", std::move(deltas)}};
    write_file(path, doc, "checkpoint");
}

Checkpoint load_checkpoint(const std::string& path, const EncoderConfig& enc) {
    json doc = parse_file(path, "checkpoint");
    if (doc.value("kind", "") != "checkpoint") {
        throw DataError("checkpoint file " + path + ": kind is not 'checkpoint'");
    }
    Checkpoint ck;
    ck.method = doc.at("method").get<std::string>();
    ck.seed = doc.at("seed").get<std::uint64_t>();
    ck.config_hash = doc.at("config_hash").get<std::string>();
    ck.partition = partition_from_json(doc.at("partition"));
    ck.final_losses = doc.at("final_losses").get<std::vector<double>>();
    PromptDims dims;
    dims.b = doc.at("dims").at("b").get<int>();
    dims.m = doc.at("dims").at("m").get<int>();
    dims.n = doc.at("dims").at("n").get<int>();
    dims.depth = doc.at("dims").at("depth").get<int>();
    for (const auto& [role, stored] : doc.at("units").items()) {
        auto unit = make_prompt_unit(ck.method, enc, dims);
        fill_unit(*unit, role, stored);
        ck.units[role] = std::move(unit);
    }
    for (const auto& [role, stored] : doc.at("bias_deltas").items()) {
        std::map<std::string, Tensor> named;
        for (const auto& [name, entry] : stored.items()) {
            named[name] = tensor_from_json(role + "/" + name, entry);
        }
        ck.bias_deltas[role] = std::move(named);
    }
    return ck;
}

void save_metrics(const std::vector<EpochRecord>& log, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write metrics file " + path);
    for (const EpochRecord& rec : log) {
        json line{{"epoch", rec.epoch},
                  {"task_loss", rec.task_loss},
                  {"task_accuracy", rec.task_accuracy}};
        out << line.dump() << '\n';
    }
    if (!out) throw DataError("write failed for metrics file " + path);
}

std::vector<EpochRecord> load_metrics(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open metrics file " + path);
    std::vector<EpochRecord> log;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("metrics: ") + e.what(), lineno);
        }
        EpochRecord rec;
        rec.epoch = j.at("epoch").get<int>();
        rec.task_loss = j.at("task_loss").get<std::vector<double>>();
        rec.task_accuracy = j.at("task_accuracy").get<std::vector<double>>();
        log.push_back(std::move(rec));
    }
    return log;
}

void save_grouping_report(const GroupingResult& gr, const std::string& config_hash,
                          const std::string& path) {
    json doc{{"format_version", 1},
             {"kind", "grouping_report"},
             {"similarity_matrix", tensor_to_json("similarity_matrix", gr.sim.s)},
             {"snapshots", gr.sim.snapshots},
             {"partition", partition_to_json(gr.partition)},
             {"objective", gr.partition.objective},
             {"config_hash", config_hash}};
    write_file(path, doc, "grouping report");
}

GroupingReport load_grouping_report(const std::string& path) {
    json doc = parse_file(path, "grouping report");
    if (doc.value("kind", "") != "grouping_report") {
        throw DataError("grouping report file " + path + ": kind is not 'grouping_report'");
    }
    GroupingReport rep;
    rep.similarity = tensor_from_json("similarity_matrix", doc.at("similarity_matrix"));
    rep.snapshots = doc.at("snapshots").get<int>();
    rep.partition = partition_from_json(doc.at("partition"));
    rep.config_hash = doc.at("config_hash").get<std::string>();
    return rep;
}

}  // namespace mmaptune
