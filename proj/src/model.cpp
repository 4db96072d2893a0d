#include "simscore/model.hpp"

#include <cctype>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "simscore/errors.hpp"
#include "simscore/ops.hpp"
#include "simscore/rng.hpp"

namespace simscore {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kMaskFill = -1e30;

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return ops::add(ops::matmul(x, w), b);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    const std::size_t last = x.shape().size() - 1;
    Tensor centered = ops::sub(x, ops::mean(x, last, true));
    Tensor denom = ops::sqrt(ops::shift(ops::variance(x, last, true), kLnEps));
    return ops::add(ops::mul(ops::div(centered, denom), gamma), beta);
}

std::string lstm_name(const std::string& prefix, std::size_t layer, const char* side,
                      const char* leaf) {
    return prefix + ".l" + std::to_string(layer) + "." + side + "." + leaf;
}

}  // namespace

std::string to_string(HeadVariant v) {
    switch (v) {
        case HeadVariant::standard: return "standard";
        case HeadVariant::wide: return "wide";
        case HeadVariant::sector: return "sector";
    }
    throw ConfigError("unknown head variant value");
}

std::string to_string(EncoderVariant v) {
    switch (v) {
        case EncoderVariant::mlm_style: return "mlm_style";
        case EncoderVariant::rtd_style: return "rtd_style";
    }
    throw ConfigError("unknown encoder variant value");
}

HeadVariant head_variant_of(const std::string& s) {
    if (s == "standard") return HeadVariant::standard;
    if (s == "wide") return HeadVariant::wide;
    if (s == "sector") return HeadVariant::sector;
    throw ConfigError("head_variant '" + s + "' is not standard/wide/sector");
}

EncoderVariant encoder_variant_of(const std::string& s) {
    if (s == "mlm_style") return EncoderVariant::mlm_style;
    if (s == "rtd_style") return EncoderVariant::rtd_style;
    throw ConfigError("encoder_variant '" + s + "' is not mlm_style/rtd_style");
}

void ModelConfig::validate() const {
    if (vocab_size < 4) throw ConfigError("vocab_size must cover the 4 special tokens");
    if (embed_dim == 0) throw ConfigError("embed_dim must be positive");
    if (n_layers == 0) throw ConfigError("n_layers must be positive");
    if (n_heads == 0) throw ConfigError("n_heads must be positive");
    if (embed_dim % n_heads != 0)
        throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by n_heads " +
                          std::to_string(n_heads));
    if (ffn_dim == 0) throw ConfigError("ffn_dim must be positive");
    if (lstm_hidden == 0) throw ConfigError("lstm_hidden must be positive");
    if (lstm_layers == 0) throw ConfigError("lstm_layers must be positive");
    if (max_seq_len < 6) throw ConfigError("max_seq_len must be at least 6");
    if (head_variant == HeadVariant::sector && sector_hidden == 0)
        throw ConfigError("sector head variant needs sector_hidden > 0");
}

std::size_t ModelConfig::context_width() const {
    switch (head_variant) {
        case HeadVariant::standard: return 0;
        case HeadVariant::wide: return embed_dim;
        case HeadVariant::sector: return 2 * sector_hidden;
    }
    throw ConfigError("unknown head variant value");
}

Tensor& ParamStore::add(std::string name, Tensor t) {
    if (contains(name)) throw ContractError("param '" + name + "' already registered");
    items_.emplace_back(std::move(name), std::move(t));
    return items_.back().second;
}

Tensor& ParamStore::at(const std::string& name) {
    for (auto& [n, t] : items_)
        if (n == name) return t;
    throw ContractError("param '" + name + "' not found");
}

const Tensor& ParamStore::at(const std::string& name) const {
    for (const auto& [n, t] : items_)
        if (n == name) return t;
    throw ContractError("param '" + name + "' not found");
}

bool ParamStore::contains(const std::string& name) const {
    for (const auto& [n, t] : items_)
        if (n == name) return true;
    return false;
}

BatchInput make_batch(const std::vector<TokenRow>& rows) {
    if (rows.empty()) throw ContractError("make_batch: empty batch");
    const std::size_t seq = rows[0].ids.size();
    BatchInput b;
    std::vector<double> mask;
    mask.reserve(rows.size() * seq);
    for (const TokenRow& r : rows) {
        if (r.ids.size() != seq || r.mask.size() != seq)
            throw DimError("make_batch: ragged row of length " + std::to_string(r.ids.size()) +
                           " in a batch of width " + std::to_string(seq));
        b.token_ids.push_back(r.ids);
        mask.insert(mask.end(), r.mask.begin(), r.mask.end());
    }
    b.mask = Tensor({rows.size(), seq}, std::move(mask));
    return b;
}

BatchInput make_sector_batch(const Vocabulary& v, const std::vector<Record>& recs) {
    if (recs.empty()) throw ContractError("make_sector_batch: empty batch");
    BatchInput b;
    for (const Record& r : recs) {
        std::string sym = sector_of(r.context);
        sym[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(sym[0])));
        b.token_ids.push_back({v.id_strict(sym)});
    }
    b.mask = Tensor({recs.size(), 1}, std::vector<double>(recs.size(), 1.0));
    return b;
}

void check_batch(const ModelConfig& cfg, const BatchInput& batch) {
    const std::size_t B = batch.token_ids.size();
    if (B == 0) throw ContractError("batch is empty");
    const std::size_t S = batch.token_ids[0].size();
    if (S == 0) throw ContractError("batch rows have no tokens");
    if (batch.mask.shape() != Shape{B, S})
        throw DimError("mask shape " + shape_str(batch.mask.shape()) + " does not match ids [" +
                       std::to_string(B) + "x" + std::to_string(S) + "]");
    for (std::size_t r = 0; r < B; ++r) {
        if (batch.token_ids[r].size() != S)
            throw DimError("ragged token row " + std::to_string(r));
        bool any = false;
        for (std::size_t t = 0; t < S; ++t) {
            const int id = batch.token_ids[r][t];
            if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
                throw VocabError("token id " + std::to_string(id) + " outside vocabulary of " +
                                 std::to_string(cfg.vocab_size));
            const double m = batch.mask.data()[r * S + t];
            if (m != 0.0 && m != 1.0) throw ContractError("mask values must be exactly 0 or 1");
            any = any || m == 1.0;
        }
        if (!any) throw ContractError("row " + std::to_string(r) + " is entirely padding");
    }
}

ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, "init"));
    ParamStore p;
    auto u = [&](const std::string& name, Shape shape) -> Tensor& {
        Tensor t = Tensor::uniform(std::move(shape), -0.05, 0.05, rng);
        return p.add(name, t.set_requires_grad(true));
    };

    u("embed.table", {cfg.vocab_size, cfg.embed_dim})
        .set_requires_grad(!cfg.freeze_embeddings);

    const std::size_t d = cfg.embed_dim;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const std::string base = "enc.l" + std::to_string(l) + ".";
        u(base + "attn.wq", {d, d});
        u(base + "attn.bq", {d});
        u(base + "attn.wk", {d, d});
        u(base + "attn.bk", {d});
        u(base + "attn.wv", {d, d});
        u(base + "attn.bv", {d});
        u(base + "attn.wo", {d, d});
        u(base + "attn.bo", {d});
        u(base + "attn.rel", {cfg.n_heads, 2 * cfg.max_seq_len - 1});
        u(base + "ln1.g", {d});
        u(base + "ln1.b", {d});
        u(base + "ffn.w1", {d, cfg.ffn_dim});
        u(base + "ffn.b1", {cfg.ffn_dim});
        u(base + "ffn.w2", {cfg.ffn_dim, d});
        u(base + "ffn.b2", {d});
        u(base + "ln2.g", {d});
        u(base + "ln2.b", {d});
    }

    auto lstm_stack = [&](const std::string& prefix, std::size_t layers, std::size_t hidden,
                          std::size_t in_width) {
        for (std::size_t l = 0; l < layers; ++l) {
            const std::size_t in = l == 0 ? in_width : 2 * hidden;
            for (const char* side : {"fw", "bw"}) {
                u(lstm_name(prefix, l, side, "w_ih"), {in, 4 * hidden});
                u(lstm_name(prefix, l, side, "w_hh"), {hidden, 4 * hidden});
                Tensor& b = u(lstm_name(prefix, l, side, "b"), {4 * hidden});
                for (std::size_t j = hidden; j < 2 * hidden; ++j) b.impl()->data[j] += 1.0;
            }
        }
    };
    lstm_stack("lstm", cfg.lstm_layers, cfg.lstm_hidden, d);

    u("pool.v", {cfg.pooled_width(), 1});

    if (cfg.head_variant == HeadVariant::sector)
        lstm_stack("sector", 1, cfg.sector_hidden, d);

    u("fc.w", {cfg.head_width(), 1});
    u("fc.b", {1});

    if (cfg.encoder_variant == EncoderVariant::rtd_style) {
        u("rtd.w", {d, 1});
        u("rtd.b", {1});
    }
    return p;
}

Tensor encode(const ModelConfig& cfg, ParamStore& p, const BatchInput& batch) {
    cfg.validate();
    check_batch(cfg, batch);
    const std::size_t B = batch.token_ids.size();
    const std::size_t S = batch.token_ids[0].size();
    if (S > cfg.max_seq_len)
        throw ConfigError("sequence length " + std::to_string(S) + " exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len));
    const std::size_t d = cfg.embed_dim;
    const std::size_t dh = d / cfg.n_heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor x = ops::embedding(p.at("embed.table"), batch.token_ids);
    Tensor key_mask = ops::reshape(batch.mask, {B, 1, S});

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const std::string base = "enc.l" + std::to_string(l) + ".";
        Tensor q = linear(x, p.at(base + "attn.wq"), p.at(base + "attn.bq"));
        Tensor k = linear(x, p.at(base + "attn.wk"), p.at(base + "attn.bk"));
        Tensor v = linear(x, p.at(base + "attn.wv"), p.at(base + "attn.bv"));

        std::vector<Tensor> heads;
        heads.reserve(cfg.n_heads);
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            Tensor qh = ops::slice(q, 2, h * dh, dh);
            Tensor kh = ops::slice(k, 2, h * dh, dh);
            Tensor vh = ops::slice(v, 2, h * dh, dh);
            Tensor scores = ops::scale(ops::matmul(qh, ops::transpose_last2(kh)), inv_sqrt_dh);
            scores = ops::add(scores, ops::relative_bias(p.at(base + "attn.rel"), h, S));
            scores = ops::masked_fill(scores, key_mask, kMaskFill);
            heads.push_back(ops::matmul(ops::softmax(scores, 2), vh));
        }
        Tensor attn_out =
            linear(ops::concat(heads, 2), p.at(base + "attn.wo"), p.at(base + "attn.bo"));
        x = layer_norm(ops::add(x, attn_out), p.at(base + "ln1.g"), p.at(base + "ln1.b"));

        Tensor inner = ops::relu(linear(x, p.at(base + "ffn.w1"), p.at(base + "ffn.b1")));
        Tensor ffn_out = linear(inner, p.at(base + "ffn.w2"), p.at(base + "ffn.b2"));
        x = layer_norm(ops::add(x, ffn_out), p.at(base + "ln2.g"), p.at(base + "ln2.b"));
    }
    return x;
}

Tensor bilstm(ParamStore& p, const std::string& prefix, std::size_t layers, std::size_t hidden,
              const Tensor& x, const Tensor& mask) {
    if (x.shape().size() != 3)
        throw DimError("bilstm expects [batch,seq,width], got " + shape_str(x.shape()));
    const std::size_t B = x.shape()[0], S = x.shape()[1];
    if (mask.shape() != Shape{B, S})
        throw DimError("bilstm mask " + shape_str(mask.shape()) + " does not match input " +
                       shape_str(x.shape()));
    const std::size_t H = hidden;

    Tensor cur = x;
    for (std::size_t l = 0; l < layers; ++l) {
        const std::size_t w = cur.shape()[2];
        std::vector<Tensor> fw(S), bw(S);
        for (int dir = 0; dir < 2; ++dir) {
            const char* side = dir == 0 ? "fw" : "bw";
            Tensor wih = p.at(lstm_name(prefix, l, side, "w_ih"));
            Tensor whh = p.at(lstm_name(prefix, l, side, "w_hh"));
            Tensor bias = p.at(lstm_name(prefix, l, side, "b"));
            Tensor h = Tensor::zeros({B, H});
            Tensor c = Tensor::zeros({B, H});
            for (std::size_t step = 0; step < S; ++step) {
                const std::size_t t = dir == 0 ? step : S - 1 - step;
                Tensor xt = ops::reshape(ops::slice(cur, 1, t, 1), {B, w});
                Tensor keep = ops::slice(mask, 1, t, 1);        // [B,1]
                Tensor drop = ops::shift(ops::neg(keep), 1.0);  // 1 - mask

                Tensor gates = ops::add(ops::add(ops::matmul(xt, wih), ops::matmul(h, whh)), bias);
                Tensor ig = ops::sigmoid(ops::slice(gates, 1, 0, H));
                Tensor fg = ops::sigmoid(ops::slice(gates, 1, H, H));
                Tensor gg = ops::tanh(ops::slice(gates, 1, 2 * H, H));
                Tensor og = ops::sigmoid(ops::slice(gates, 1, 3 * H, H));
                Tensor c_new = ops::add(ops::mul(fg, c), ops::mul(ig, gg));
                Tensor h_new = ops::mul(og, ops::tanh(c_new));

                // padded step: zero output, carry both states through
                Tensor h_keep = ops::mul(keep, h_new);
                c = ops::add(ops::mul(keep, c_new), ops::mul(drop, c));
                h = ops::add(h_keep, ops::mul(drop, h));
                (dir == 0 ? fw : bw)[t] = ops::reshape(h_keep, {B, 1, H});
            }
        }
        std::vector<Tensor> both{ops::concat(fw, 1), ops::concat(bw, 1)};
        cur = ops::concat(both, 2);
    }
    return cur;
}

PoolResult attention_pool_full(ParamStore& p, const Tensor& x, const Tensor& mask) {
    if (x.shape().size() != 3)
        throw DimError("attention_pool expects [batch,seq,width], got " + shape_str(x.shape()));
    const std::size_t B = x.shape()[0], S = x.shape()[1];
    if (mask.shape() != Shape{B, S})
        throw DimError("attention_pool mask " + shape_str(mask.shape()) + " does not match input " +
                       shape_str(x.shape()));
    for (std::size_t b = 0; b < B; ++b) {
        bool any = false;
        for (std::size_t t = 0; t < S && !any; ++t) any = mask.data()[b * S + t] == 1.0;
        if (!any) throw ContractError("attention_pool: row " + std::to_string(b) +
                                      " has no unmasked positions");
    }
    Tensor scores = ops::reshape(ops::matmul(x, p.at("pool.v")), {B, S});
    scores = ops::masked_fill(scores, mask, kMaskFill);
    Tensor alpha = ops::softmax(scores, 1);
    Tensor pooled = ops::sum(ops::mul(x, ops::reshape(alpha, {B, S, 1})), 1);
    return {pooled, alpha};
}

Tensor attention_pool(ParamStore& p, const Tensor& x, const Tensor& mask) {
    return attention_pool_full(p, x, mask).pooled;
}

Tensor fc_head(ParamStore& p, const Tensor& x) {
    if (x.shape().size() != 2)
        throw DimError("fc_head expects [batch,width], got " + shape_str(x.shape()));
    const std::size_t B = x.shape()[0];
    return ops::add(ops::reshape(ops::matmul(x, p.at("fc.w")), {B}), p.at("fc.b"));
}

Tensor expand_dims(const Tensor& x, const Tensor& proj) {
    if (proj.shape().size() != 2)
        throw ConfigError("expand_dims projection must be a matrix, got " + shape_str(proj.shape()));
    if (proj.shape()[1] < proj.shape()[0])
        throw ConfigError("expand_dims cannot narrow: " + shape_str(proj.shape()));
    return ops::matmul(x, proj);
}

Tensor wide_output(const Tensor& x_transformer, const Tensor& x_context) {
    if (x_transformer.shape().size() != 2 || x_context.shape().size() != 2 ||
        x_transformer.shape()[0] != x_context.shape()[0])
        throw DimError("wide_output batch mismatch: " + shape_str(x_transformer.shape()) + " vs " +
                       shape_str(x_context.shape()));
    std::vector<Tensor> parts{x_transformer, x_context};
    return ops::concat(parts, 1);
}

Tensor sector_path(const ModelConfig& cfg, ParamStore& p, const BatchInput& sector) {
    check_batch(cfg, sector);
    const std::size_t B = sector.token_ids.size();
    if (sector.token_ids[0].size() != 1)
        throw ContractError("sector_path expects single-token rows");
    Tensor emb = ops::embedding(p.at("embed.table"), sector.token_ids);
    Tensor out = bilstm(p, "sector", 1, cfg.sector_hidden, emb, sector.mask);
    return ops::reshape(out, {B, 2 * cfg.sector_hidden});
}

Tensor masked_mean(const Tensor& x, const Tensor& mask) {
    const std::size_t B = x.shape()[0], S = x.shape()[1];
    Tensor weighted = ops::mul(x, ops::reshape(mask, {B, S, 1}));
    return ops::div(ops::sum(weighted, 1), ops::sum(mask, 1, true));
}

ModelOutput forward(const ModelConfig& cfg, ParamStore& p, const BatchInput& batch,
                    const BatchInput* sector) {
    Tensor enc = encode(cfg, p, batch);
    Tensor seq = bilstm(p, "lstm", cfg.lstm_layers, cfg.lstm_hidden, enc, batch.mask);
    PoolResult pool = attention_pool_full(p, seq, batch.mask);

    Tensor head_in = pool.pooled;
    if (cfg.head_variant == HeadVariant::wide) {
        head_in = wide_output(pool.pooled, masked_mean(enc, batch.mask));
    } else if (cfg.head_variant == HeadVariant::sector) {
        if (sector == nullptr)
            throw ContractError("sector head variant requires sector tokens");
        head_in = wide_output(pool.pooled, sector_path(cfg, p, *sector));
    }
    return {fc_head(p, head_in), head_in, pool.weights};
}

Tensor rtd_logits(const ModelConfig& cfg, ParamStore& p, const BatchInput& batch) {
    if (cfg.encoder_variant != EncoderVariant::rtd_style || !p.contains("rtd.w"))
        throw ContractError("rtd_logits requires the rtd_style encoder variant");
    Tensor enc = encode(cfg, p, batch);
    const std::size_t B = batch.token_ids.size();
    const std::size_t S = batch.token_ids[0].size();
    return ops::add(ops::reshape(ops::matmul(enc, p.at("rtd.w")), {B, S}), p.at("rtd.b"));
}

}  // namespace simscore
