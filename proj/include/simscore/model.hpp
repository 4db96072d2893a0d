#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "simscore/data.hpp"
#include "simscore/tensor.hpp"

// Scoring model: token embedding -> small transformer encoder with a
// learned relative-position bias -> stacked Bi-LSTM -> linear attention
// pooling -> FC head emitting one raw scalar per example. Variants bolt a
// context vector onto the head input (wide: mean-pooled encoder state,
// sector: a dedicated Bi-LSTM over the sector token) and, for the
// rtd-style encoder, add a per-token binary head used during pretraining.

namespace simscore {

enum class HeadVariant { standard, wide, sector };
enum class EncoderVariant { mlm_style, rtd_style };

std::string to_string(HeadVariant v);
std::string to_string(EncoderVariant v);
HeadVariant head_variant_of(const std::string& s);        // ConfigError
EncoderVariant encoder_variant_of(const std::string& s);  // ConfigError

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t embed_dim = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t ffn_dim = 128;
    std::size_t lstm_hidden = 32;
    std::size_t lstm_layers = 2;
    std::size_t max_seq_len = 64;
    std::size_t sector_hidden = 8;  // sector context vector is 2*sector_hidden wide
    HeadVariant head_variant = HeadVariant::standard;
    EncoderVariant encoder_variant = EncoderVariant::mlm_style;
    bool freeze_embeddings = true;

    void validate() const;  // ConfigError
    std::size_t pooled_width() const { return 2 * lstm_hidden; }
    // Extra width concatenated onto the head input: 0 for standard,
    // embed_dim for wide, 2*sector_hidden for sector.
    std::size_t context_width() const;
    std::size_t head_width() const { return pooled_width() + context_width(); }
};

// Insertion-ordered parameter table. Order is the initialization order,
// the optimizer-state order, and the checkpoint layout, so it must stay
// stable for a given config.
class ParamStore {
  public:
    Tensor& add(std::string name, Tensor t);         // ContractError on duplicate
    Tensor& at(const std::string& name);             // ContractError when missing
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const;
    std::size_t size() const { return items_.size(); }

    std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

  private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

struct BatchInput {
    std::vector<std::vector<int>> token_ids;  // [batch][seq]
    Tensor mask;                              // [batch, seq], 1.0 real / 0.0 pad
};

BatchInput make_batch(const std::vector<TokenRow>& rows);  // DimError on ragged rows
// One-token rows holding each record's sector symbol. VocabError when a
// sector is not in the vocabulary.
BatchInput make_sector_batch(const Vocabulary& v, const std::vector<Record>& recs);
// Batch invariants: rectangular, ids < vocab_size, mask is {0,1} with at
// least one real token per row.
void check_batch(const ModelConfig& cfg, const BatchInput& batch);

// All weights uniform(-0.05, 0.05), LSTM forget-gate bias +1, embedding
// frozen when the config says so. Same config+seed -> bit-identical store.
ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed);

// Contextual token embeddings [batch, seq, embed_dim]. Padded keys get
// attention weight exactly 0 from every query.
Tensor encode(const ModelConfig& cfg, ParamStore& p, const BatchInput& batch);

// Stacked Bi-LSTM under `prefix` ("lstm" / "sector"): per-direction outputs
// concatenated per step -> [batch, seq, 2*hidden]. Padded steps output
// zeros and carry state through unchanged.
Tensor bilstm(ParamStore& p, const std::string& prefix, std::size_t layers,
              std::size_t hidden, const Tensor& x, const Tensor& mask);

struct PoolResult {
    Tensor pooled;   // [batch, d]
    Tensor weights;  // [batch, seq]; exactly 0 on masked positions
};
PoolResult attention_pool_full(ParamStore& p, const Tensor& x, const Tensor& mask);
Tensor attention_pool(ParamStore& p, const Tensor& x, const Tensor& mask);

Tensor fc_head(ParamStore& p, const Tensor& x);  // [batch]

// Linear projection to a wider width; ConfigError when proj narrows.
Tensor expand_dims(const Tensor& x, const Tensor& proj);
// Feature concat, transformer features first.
Tensor wide_output(const Tensor& x_transformer, const Tensor& x_context);
// Sector token -> embedding -> dedicated one-layer Bi-LSTM -> [batch, 2*sector_hidden].
Tensor sector_path(const ModelConfig& cfg, ParamStore& p, const BatchInput& sector);
// Mean of x over mask==1 steps, [batch, d].
Tensor masked_mean(const Tensor& x, const Tensor& mask);

struct ModelOutput {
    Tensor pred;       // [batch] raw scores
    Tensor head_in;    // [batch, head_width]
    Tensor attention;  // [batch, seq] pooling weights
};
// Full forward pass. `sector` is required for the sector head variant and
// ignored otherwise.
ModelOutput forward(const ModelConfig& cfg, ParamStore& p, const BatchInput& batch,
                    const BatchInput* sector = nullptr);

// Per-token replaced-vs-original logits [batch, seq] (rtd_style only).
Tensor rtd_logits(const ModelConfig& cfg, ParamStore& p, const BatchInput& batch);

}  // namespace simscore
