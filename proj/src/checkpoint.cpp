#include "simscore/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "simscore/errors.hpp"

namespace simscore {

namespace {

constexpr char kMagic[] = "SIMSCKPT1\n";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

void put_f64_le(std::string& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64_le(out, bits);
}

double get_f64_le(const unsigned char* p) {
    const std::uint64_t bits = get_u64_le(p);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) {
    nlohmann::json j{{"vocab_size", cfg.vocab_size},
                     {"embed_dim", cfg.embed_dim},
                     {"n_layers", cfg.n_layers},
                     {"n_heads", cfg.n_heads},
                     {"ffn_dim", cfg.ffn_dim},
                     {"lstm_hidden", cfg.lstm_hidden},
                     {"lstm_layers", cfg.lstm_layers},
                     {"max_seq_len", cfg.max_seq_len},
                     {"sector_hidden", cfg.sector_hidden},
                     {"head_variant", to_string(cfg.head_variant)},
                     {"encoder_variant", to_string(cfg.encoder_variant)},
                     {"freeze_embeddings", cfg.freeze_embeddings}};
    return j.dump(2);
}

ModelConfig model_config_from_json(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("model config json: ") + e.what());
    }
    ModelConfig cfg;
    try {
        cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
        cfg.embed_dim = j.at("embed_dim").get<std::size_t>();
        cfg.n_layers = j.at("n_layers").get<std::size_t>();
        cfg.n_heads = j.at("n_heads").get<std::size_t>();
        cfg.ffn_dim = j.at("ffn_dim").get<std::size_t>();
        cfg.lstm_hidden = j.at("lstm_hidden").get<std::size_t>();
        cfg.lstm_layers = j.at("lstm_layers").get<std::size_t>();
        cfg.max_seq_len = j.at("max_seq_len").get<std::size_t>();
        cfg.sector_hidden = j.at("sector_hidden").get<std::size_t>();
        cfg.head_variant = head_variant_of(j.at("head_variant").get<std::string>());
        cfg.encoder_variant = encoder_variant_of(j.at("encoder_variant").get<std::string>());
        cfg.freeze_embeddings = j.at("freeze_embeddings").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("model config json: ") + e.what());
    }
    return cfg;
}

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const Vocabulary& vocab,
                     const ParamStore& params) {
    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["config"] = nlohmann::json::parse(model_config_to_json(cfg));
    manifest["vocab"] = vocab.tokens();
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, t] : params.items()) {
        tensors.push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f64"}});
    }
    manifest["tensors"] = std::move(tensors);
    const std::string mtext = manifest.dump();

    std::string blob;
    blob.reserve(kMagicLen + 8 + mtext.size());
    blob.append(kMagic, kMagicLen);
    put_u64_le(blob, mtext.size());
    blob += mtext;
    for (const auto& [name, t] : params.items()) {
        (void)name;
        for (double d : t.data()) put_f64_le(blob, d);
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    out.flush();
    if (!out) throw IoError("short write on checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string blob = buf.str();

    if (blob.size() < kMagicLen + 8 || blob.compare(0, kMagicLen, kMagic) != 0)
        throw DataError("not a checkpoint file: " + path);
    const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
    const std::uint64_t mlen = get_u64_le(bytes + kMagicLen);
    if (kMagicLen + 8 + mlen > blob.size())
        throw DataError("truncated checkpoint manifest: " + path);

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(blob.substr(kMagicLen + 8, mlen));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint manifest: ") + e.what());
    }

    Checkpoint ck;
    try {
        if (manifest.at("version").get<int>() != 1)
            throw DataError("unsupported checkpoint version in " + path);
        ck.config = model_config_from_json(manifest.at("config").dump());
        ck.vocab_tokens = manifest.at("vocab").get<std::vector<std::string>>();

        std::size_t off = kMagicLen + 8 + mlen;
        for (const auto& entry : manifest.at("tensors")) {
            const std::string name = entry.at("name").get<std::string>();
            const Shape shape = entry.at("shape").get<Shape>();
            if (entry.at("dtype").get<std::string>() != "f64")
                throw DataError("tensor '" + name + "' has unsupported dtype in " + path);
            std::size_t n = 1;
            for (std::size_t d : shape) n *= d;
            if (off + 8 * n > blob.size())
                throw DataError("truncated checkpoint payload at tensor '" + name + "': " + path);
            std::vector<double> data(n);
            for (std::size_t i = 0; i < n; ++i) data[i] = get_f64_le(bytes + off + 8 * i);
            off += 8 * n;
            Tensor t(shape, std::move(data));
            const bool trainable = name != "embed.table" || !ck.config.freeze_embeddings;
            ck.params.add(name, t.set_requires_grad(trainable));
        }
        if (off != blob.size()) throw DataError("trailing bytes after checkpoint payload: " + path);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint manifest: ") + e.what());
    }
    return ck;
}

}  // namespace simscore
