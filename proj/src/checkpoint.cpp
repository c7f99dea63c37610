#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "hvae/trainer.hpp"

namespace hvae::train {

namespace {

constexpr char kMagic[8] = {'L', 'W', 'C', 'K', 'P', 'T', '0', '1'};
constexpr int kVersion = 1;

uint64_t fnv1a(const uint8_t* data, size_t len, uint64_t h = 1469598103934665603ULL) {
    for (size_t i = 0; i < len; ++i) {
        h ^= data[i];
        h *= 1099511628211ULL;
    }
    return h;
}

nlohmann::json config_to_json(const model::ModelConfig& c) {
    return {{"n1", c.n1},       {"n2", c.n2},           {"n3", c.n3},
            {"z_size", c.z_size}, {"d_model", c.d_model}, {"heads", c.heads},
            {"enc_layers", c.enc_layers}, {"dec_layers", c.dec_layers},
            {"vocab_size", c.vocab_size}, {"max_len", c.max_len}, {"seed", c.seed}};
}

model::ModelConfig config_from_json(const nlohmann::json& j) {
    model::ModelConfig c;
    c.n1 = j.at("n1");
    c.n2 = j.at("n2");
    c.n3 = j.at("n3");
    c.z_size = j.at("z_size");
    c.d_model = j.at("d_model");
    c.heads = j.at("heads");
    c.enc_layers = j.at("enc_layers");
    c.dec_layers = j.at("dec_layers");
    c.vocab_size = j.at("vocab_size");
    c.max_len = j.at("max_len");
    c.seed = j.at("seed");
    return c;
}

nlohmann::json schedule_to_json(const objective::ScheduleState& s) {
    nlohmann::json hist = nlohmann::json::array();
    for (auto& [epoch, perp] : s.perplexity_history) hist.push_back({epoch, perp});
    return {{"step", s.step},
            {"beta", s.beta},
            {"warmup_steps", s.warmup_steps},
            {"anneal_steps", s.anneal_steps},
            {"beta_start", s.beta_start},
            {"beta_floor", s.beta_floor},
            {"perplexity_history", hist}};
}

objective::ScheduleState schedule_from_json(const nlohmann::json& j) {
    objective::ScheduleState s;
    s.step = j.at("step");
    s.beta = j.at("beta");
    s.warmup_steps = j.at("warmup_steps");
    s.anneal_steps = j.at("anneal_steps");
    s.beta_start = j.at("beta_start");
    s.beta_floor = j.at("beta_floor");
    for (auto& h : j.at("perplexity_history"))
        s.perplexity_history.emplace_back(h.at(0).get<long>(), h.at(1).get<double>());
    return s;
}

void append_floats(std::vector<uint8_t>& buf, const std::vector<float>& v) {
    const size_t at = buf.size();
    buf.resize(at + v.size() * sizeof(float));
    std::memcpy(buf.data() + at, v.data(), v.size() * sizeof(float));
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    nlohmann::json header;
    header["version"] = kVersion;
    header["config"] = config_to_json(ckpt.config);
    header["schedule"] = schedule_to_json(ckpt.schedule);
    header["vocab"] = ckpt.vocab_words;
    nlohmann::json params = nlohmann::json::array();
    for (size_t i = 0; i < ckpt.params.paths.size(); ++i)
        params.push_back({{"path", ckpt.params.paths[i]},
                          {"rows", ckpt.params.values[i].rows},
                          {"cols", ckpt.params.values[i].cols}});
    header["params"] = params;
    header["adam"] = {{"lr", ckpt.adam.lr},   {"beta1", ckpt.adam.beta1},
                      {"beta2", ckpt.adam.beta2}, {"eps", ckpt.adam.eps},
                      {"t", ckpt.adam.t},
                      {"moments", !ckpt.adam.m.empty()}};
    header["rng"] = ckpt.rng_state;
    const std::string hs = header.dump();

    std::vector<uint8_t> body;
    const uint64_t hlen = hs.size();
    body.insert(body.end(), reinterpret_cast<const uint8_t*>(&hlen),
                reinterpret_cast<const uint8_t*>(&hlen) + sizeof(hlen));
    body.insert(body.end(), hs.begin(), hs.end());
    for (const auto& t : ckpt.params.values) append_floats(body, t.v);
    if (!ckpt.adam.m.empty()) {
        for (const auto& t : ckpt.adam.m) append_floats(body, t.v);
        for (const auto& t : ckpt.adam.v) append_floats(body, t.v);
    }
    const uint64_t checksum = fnv1a(body.data(), body.size());

    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot open " + path + " for writing");
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(body.data()),
              static_cast<std::streamsize>(body.size()));
    out.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
    if (!out) throw CheckpointError("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path);
    std::vector<uint8_t> all((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
    if (all.size() < sizeof(kMagic) + sizeof(uint64_t) * 2)
        throw CheckpointError(path + ": truncated checkpoint");
    if (std::memcmp(all.data(), kMagic, sizeof(kMagic)) != 0)
        throw CheckpointError(path + ": bad magic");
    const uint8_t* body = all.data() + sizeof(kMagic);
    const size_t body_len = all.size() - sizeof(kMagic) - sizeof(uint64_t);
    uint64_t stored;
    std::memcpy(&stored, all.data() + all.size() - sizeof(uint64_t), sizeof(stored));
    if (fnv1a(body, body_len) != stored)
        throw CheckpointError(path + ": checksum mismatch (corrupt or truncated)");

    uint64_t hlen;
    std::memcpy(&hlen, body, sizeof(hlen));
    if (sizeof(hlen) + hlen > body_len) throw CheckpointError(path + ": bad header length");
    nlohmann::json header = nlohmann::json::parse(
        std::string(reinterpret_cast<const char*>(body) + sizeof(hlen), hlen));
    if (header.at("version").get<int>() != kVersion)
        throw CheckpointError(path + ": unsupported checkpoint version " +
                              std::to_string(header.at("version").get<int>()));

    Checkpoint ckpt;
    ckpt.version = kVersion;
    ckpt.config = config_from_json(header.at("config"));
    ckpt.schedule = schedule_from_json(header.at("schedule"));
    ckpt.vocab_words = header.at("vocab").get<std::vector<std::string>>();
    ckpt.rng_state = header.value("rng", "");
    ckpt.adam.lr = header.at("adam").at("lr");
    ckpt.adam.beta1 = header.at("adam").at("beta1");
    ckpt.adam.beta2 = header.at("adam").at("beta2");
    ckpt.adam.eps = header.at("adam").at("eps");
    ckpt.adam.t = header.at("adam").at("t");
    const bool moments = header.at("adam").at("moments");

    const uint8_t* cursor = body + sizeof(hlen) + hlen;
    size_t remaining = body_len - sizeof(hlen) - hlen;
    auto read_tensor = [&](int rows, int cols) {
        Tensor<float> t(rows, cols);
        const size_t bytes = t.v.size() * sizeof(float);
        if (bytes > remaining) throw CheckpointError(path + ": payload too short");
        std::memcpy(t.v.data(), cursor, bytes);
        cursor += bytes;
        remaining -= bytes;
        return t;
    };
    for (auto& p : header.at("params")) {
        const int idx = ckpt.params.add(p.at("path"), p.at("rows"), p.at("cols"));
        ckpt.params.values[idx] = read_tensor(p.at("rows"), p.at("cols"));
    }
    if (moments) {
        for (const auto& t : ckpt.params.values) ckpt.adam.m.push_back(t);
        for (auto& t : ckpt.adam.m) t = read_tensor(t.rows, t.cols);
        for (const auto& t : ckpt.params.values) ckpt.adam.v.push_back(t);
        for (auto& t : ckpt.adam.v) t = read_tensor(t.rows, t.cols);
    }
    if (remaining != 0) throw CheckpointError(path + ": trailing bytes in payload");
    return ckpt;
}

}  // namespace hvae::train
