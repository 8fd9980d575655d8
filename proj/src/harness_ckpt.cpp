#include "deqr/harness.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are raw little-endian doubles");
static_assert(sizeof(double) == 8);

namespace deqr::harness {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'D', 'E', 'Q', 'R', 'C', 'K', 'P', '1'};
constexpr int kVersion = 1;

struct ArrayEntry {
    std::string name;
    std::vector<std::int64_t> shape;
    const ad::Tensor* tensor;
};

void collect(std::vector<ArrayEntry>& out, const std::string& prefix,
             const std::map<std::string, ad::Tensor>& tensors) {
    for (const auto& [name, t] : tensors)
        out.push_back({prefix + name, t.shape(), &t});
}

void write_u64(std::ofstream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::ifstream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw ParseError("checkpoint truncated");
    return v;
}

} // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::vector<ArrayEntry> arrays;
    collect(arrays, "param/", ckpt.params.tensors);
    collect(arrays, "adam_m/", ckpt.adam_m);
    collect(arrays, "adam_v/", ckpt.adam_v);

    json meta;
    meta["version"] = kVersion;
    meta["epoch"] = ckpt.epoch;
    // +infinity marks "no validation epoch completed". JSON has no literal
    // for it, so the sentinel is stored as null.
    meta["valid_loss"] = std::isfinite(ckpt.valid_loss) ? json(ckpt.valid_loss) : json();
    meta["adam_step"] = ckpt.adam_step;
    meta["config"] = json::parse(config_to_json_text(ckpt.config));
    json dir = json::array();
    for (const auto& a : arrays) dir.push_back({{"name", a.name}, {"shape", a.shape}});
    meta["arrays"] = dir;
    const std::string meta_text = meta.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw ContractViolation("cannot open checkpoint for writing: " + path.string());
    out.write(kMagic, sizeof(kMagic));
    write_u64(out, meta_text.size());
    out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
    for (const auto& a : arrays)
        out.write(reinterpret_cast<const char*>(a.tensor->data()),
                  static_cast<std::streamsize>(a.tensor->size() * sizeof(double)));
    if (!out) throw ContractViolation("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ContractViolation("cannot open checkpoint: " + path.string());
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw ParseError("not a checkpoint file: " + path.string());
    const std::uint64_t meta_len = read_u64(in);
    std::string meta_text(meta_len, '\0');
    in.read(meta_text.data(), static_cast<std::streamsize>(meta_len));
    if (!in) throw ParseError("checkpoint truncated");

    json meta;
    try {
        meta = json::parse(meta_text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
    }
    if (meta.at("version").get<int>() != kVersion)
        throw ParseError("unsupported checkpoint version");

    Checkpoint ckpt;
    ckpt.epoch = meta.at("epoch").get<int>();
    const json& jloss = meta.at("valid_loss");
    ckpt.valid_loss =
        jloss.is_null() ? std::numeric_limits<double>::infinity() : jloss.get<double>();
    ckpt.adam_step = meta.at("adam_step").get<std::int64_t>();
    ckpt.config = config_from_json_text(meta.at("config").dump());

    for (const auto& entry : meta.at("arrays")) {
        const auto name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
        ad::Tensor t = ad::Tensor::zeros(shape);
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!in) throw ParseError("checkpoint truncated inside array " + name);
        const auto slash = name.find('/');
        if (slash == std::string::npos) throw ParseError("malformed array name: " + name);
        const std::string prefix = name.substr(0, slash), base = name.substr(slash + 1);
        if (prefix == "param")
            ckpt.params.tensors.emplace(base, std::move(t));
        else if (prefix == "adam_m")
            ckpt.adam_m.emplace(base, std::move(t));
        else if (prefix == "adam_v")
            ckpt.adam_v.emplace(base, std::move(t));
        else
            throw ParseError("unknown array group: " + prefix);
    }
    if (in.peek() != std::ifstream::traits_type::eof())
        throw ParseError("trailing bytes after checkpoint payload");
    return ckpt;
}

void Adam::update(model::ModelParams& params, const eq::GradMap& grads) {
    ++step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (const auto& [name, g] : grads) {
        ad::Tensor& p = params.at(name);
        if (p.shape() != g.shape())
            throw ContractViolation("gradient shape mismatch for " + name);
        auto mi = m.find(name);
        if (mi == m.end()) mi = m.emplace(name, ad::Tensor::zeros(p.shape())).first;
        auto vi = v.find(name);
        if (vi == v.end()) vi = v.emplace(name, ad::Tensor::zeros(p.shape())).first;
        double* mp = mi->second.data();
        double* vp = vi->second.data();
        double* pp = p.data();
        const double* gp = g.data();
        for (std::int64_t i = 0; i < p.size(); ++i) {
            mp[i] = beta1 * mp[i] + (1.0 - beta1) * gp[i];
            vp[i] = beta2 * vp[i] + (1.0 - beta2) * gp[i] * gp[i];
            pp[i] -= lr * (mp[i] / c1) / (std::sqrt(vp[i] / c2) + eps);
        }
    }
}

} // namespace deqr::harness
