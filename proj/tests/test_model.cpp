#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "simscore/checkpoint.hpp"
#include "simscore/errors.hpp"
#include "simscore/gradcheck.hpp"
#include "simscore/model.hpp"
#include "simscore/objectives.hpp"
#include "simscore/ops.hpp"
#include "simscore/rng.hpp"

using namespace simscore;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 12;
    cfg.embed_dim = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.ffn_dim = 16;
    cfg.lstm_hidden = 4;
    cfg.lstm_layers = 2;
    cfg.max_seq_len = 10;
    cfg.sector_hidden = 3;
    return cfg;
}

// Batch with ragged real lengths under a common padded width.
BatchInput tiny_batch(std::size_t batch, std::size_t seq, std::uint64_t seed,
                      std::size_t vocab_size) {
    Rng rng(seed);
    BatchInput b;
    b.token_ids.resize(batch);
    std::vector<double> m(batch * seq, 0.0);
    for (std::size_t r = 0; r < batch; ++r) {
        const std::size_t real = 1 + rng.next_u64() % seq;
        for (std::size_t t = 0; t < seq; ++t) {
            const bool live = t < real;
            b.token_ids[r].push_back(live ? static_cast<int>(rng.next_u64() % vocab_size) : 0);
            m[r * seq + t] = live ? 1.0 : 0.0;
        }
    }
    b.mask = Tensor({batch, seq}, m);
    return b;
}

double sig(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Plain-loop stacked Bi-LSTM, the oracle for model::bilstm. Reads the same
// parameter tensors but touches no ops/tape code.
std::vector<double> ref_bilstm(const ParamStore& p, const std::string& prefix, std::size_t layers,
                               std::size_t hidden, const Tensor& x, const Tensor& mask) {
    const std::size_t B = x.shape()[0], S = x.shape()[1];
    const std::size_t H = hidden;
    std::vector<double> in(x.data());
    std::size_t in_w = x.shape()[2];
    for (std::size_t l = 0; l < layers; ++l) {
        std::vector<double> out(B * S * 2 * H, 0.0);
        for (int dir = 0; dir < 2; ++dir) {
            const std::string side = dir == 0 ? "fw" : "bw";
            const auto& wih = p.at(prefix + ".l" + std::to_string(l) + "." + side + ".w_ih").data();
            const auto& whh = p.at(prefix + ".l" + std::to_string(l) + "." + side + ".w_hh").data();
            const auto& bias = p.at(prefix + ".l" + std::to_string(l) + "." + side + ".b").data();
            for (std::size_t b = 0; b < B; ++b) {
                std::vector<double> h(H, 0.0), c(H, 0.0), z(4 * H);
                for (std::size_t step = 0; step < S; ++step) {
                    const std::size_t t = dir == 0 ? step : S - 1 - step;
                    if (mask.data()[b * S + t] == 0.0) continue;  // zero output, state held
                    for (std::size_t j = 0; j < 4 * H; ++j) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < in_w; ++i)
                            acc += in[(b * S + t) * in_w + i] * wih[i * 4 * H + j];
                        for (std::size_t i = 0; i < H; ++i) acc += h[i] * whh[i * 4 * H + j];
                        z[j] = acc + bias[j];
                    }
                    for (std::size_t j = 0; j < H; ++j) {
                        const double ig = sig(z[j]), fg = sig(z[H + j]);
                        const double gg = std::tanh(z[2 * H + j]), og = sig(z[3 * H + j]);
                        c[j] = fg * c[j] + ig * gg;
                        h[j] = og * std::tanh(c[j]);
                        out[(b * S + t) * 2 * H + dir * H + j] = h[j];
                    }
                }
            }
        }
        in = std::move(out);
        in_w = 2 * H;
    }
    return in;
}

// Plain-loop pooling oracle.
void ref_pool(const ParamStore& p, const Tensor& x, const Tensor& mask,
              std::vector<double>& pooled, std::vector<double>& weights) {
    const std::size_t B = x.shape()[0], S = x.shape()[1], D = x.shape()[2];
    const auto& v = p.at("pool.v").data();
    pooled.assign(B * D, 0.0);
    weights.assign(B * S, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<double> s(S, 0.0);
        double hi = -1e300;
        for (std::size_t t = 0; t < S; ++t) {
            for (std::size_t d = 0; d < D; ++d) s[t] += x.data()[(b * S + t) * D + d] * v[d];
            if (mask.data()[b * S + t] == 1.0) hi = std::max(hi, s[t]);
        }
        double z = 0.0;
        for (std::size_t t = 0; t < S; ++t)
            if (mask.data()[b * S + t] == 1.0) z += std::exp(s[t] - hi);
        for (std::size_t t = 0; t < S; ++t) {
            if (mask.data()[b * S + t] != 1.0) continue;
            weights[b * S + t] = std::exp(s[t] - hi) / z;
            for (std::size_t d = 0; d < D; ++d)
                pooled[b * D + d] += weights[b * S + t] * x.data()[(b * S + t) * D + d];
        }
    }
}

Tensor rand_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    return Tensor::uniform(std::move(shape), lo, hi, rng);
}

}  // namespace

TEST_CASE("config validation catches the usual suspects") {
    ModelConfig cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());

    ModelConfig bad = cfg;
    bad.vocab_size = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.embed_dim = 9;  // not divisible by n_heads
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.n_heads = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.lstm_layers = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.max_seq_len = 5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.head_variant = HeadVariant::sector;
    bad.sector_hidden = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    CHECK(cfg.pooled_width() == 8);
    CHECK(cfg.context_width() == 0);
    cfg.head_variant = HeadVariant::wide;
    CHECK(cfg.context_width() == cfg.embed_dim);
    cfg.head_variant = HeadVariant::sector;
    CHECK(cfg.context_width() == 6);
    CHECK(cfg.head_width() == 14);
}

TEST_CASE("variant names round-trip and reject junk") {
    for (auto v : {HeadVariant::standard, HeadVariant::wide, HeadVariant::sector})
        CHECK(head_variant_of(to_string(v)) == v);
    for (auto v : {EncoderVariant::mlm_style, EncoderVariant::rtd_style})
        CHECK(encoder_variant_of(to_string(v)) == v);
    CHECK_THROWS_AS(head_variant_of("narrow"), ConfigError);
    CHECK_THROWS_AS(encoder_variant_of("bert"), ConfigError);
}

TEST_CASE("param store enforces unique names and known lookups") {
    ParamStore p;
    p.add("a", Tensor::scalar(1.0));
    CHECK_THROWS_AS(p.add("a", Tensor::scalar(2.0)), ContractError);
    CHECK(p.contains("a"));
    CHECK(!p.contains("b"));
    CHECK_THROWS_AS(p.at("b"), ContractError);
    CHECK(p.at("a").value() == 1.0);
}

TEST_CASE("init is deterministic, frozen where asked, forget-gate shifted") {
    ModelConfig cfg = tiny_config();
    ParamStore a = init_params(cfg, 7);
    ParamStore b = init_params(cfg, 7);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a.items()[i].first == b.items()[i].first);
        CHECK(a.items()[i].second.data() == b.items()[i].second.data());
    }
    ParamStore c = init_params(cfg, 8);
    CHECK(c.at("fc.w").data() != a.at("fc.w").data());

    CHECK(!a.at("embed.table").requires_grad());
    cfg.freeze_embeddings = false;
    CHECK(init_params(cfg, 7).at("embed.table").requires_grad());

    // forget-gate block sits in [H, 2H) and carries the +1 shift
    const auto& bias = a.at("lstm.l0.fw.b").data();
    const std::size_t H = cfg.lstm_hidden;
    for (std::size_t j = 0; j < 4 * H; ++j) {
        const bool forget = j >= H && j < 2 * H;
        CHECK(std::abs(bias[j] - (forget ? 1.0 : 0.0)) <= 0.05);
    }

    for (const auto& [name, t] : a.items()) {
        CAPTURE(name);
        CHECK(t.all_finite());
        if (name.find(".b") == std::string::npos) {
            for (double x : t.data()) CHECK(std::abs(x) <= 0.05);
        }
    }

    // rtd head appears only for the rtd-style encoder
    CHECK(!a.contains("rtd.w"));
    cfg = tiny_config();
    cfg.encoder_variant = EncoderVariant::rtd_style;
    ParamStore r = init_params(cfg, 7);
    CHECK(r.contains("rtd.w"));
    CHECK(r.contains("rtd.b"));
}

TEST_CASE("batch assembly and validation") {
    TokenRow r1{{3, 5, 2, 0}, {1, 1, 1, 0}, false};
    TokenRow r2{{3, 7, 2, 2}, {1, 1, 1, 1}, false};
    BatchInput b = make_batch({r1, r2});
    CHECK(b.token_ids.size() == 2);
    CHECK(b.mask.shape() == Shape{2, 4});
    CHECK(b.mask.data() == std::vector<double>{1, 1, 1, 0, 1, 1, 1, 1});

    TokenRow ragged{{3, 5}, {1, 1}, false};
    CHECK_THROWS_AS(make_batch({r1, ragged}), DimError);

    ModelConfig cfg = tiny_config();
    CHECK_NOTHROW(check_batch(cfg, b));

    BatchInput bad = b;
    bad.token_ids[0][1] = static_cast<int>(cfg.vocab_size);
    CHECK_THROWS_AS(check_batch(cfg, bad), VocabError);

    bad = b;
    bad.mask = Tensor({2, 4}, {0, 0, 0, 0, 1, 1, 1, 1});
    CHECK_THROWS_AS(check_batch(cfg, bad), ContractError);

    bad = b;
    bad.mask = Tensor({2, 4}, {1, 0.5, 1, 0, 1, 1, 1, 1});
    CHECK_THROWS_AS(check_batch(cfg, bad), ContractError);

    bad = b;
    bad.mask = Tensor({2, 3}, {1, 1, 1, 1, 1, 1});
    CHECK_THROWS_AS(check_batch(cfg, bad), DimError);

    CHECK_THROWS_AS(check_batch(cfg, BatchInput{}), ContractError);
}

TEST_CASE("encode shapes, determinism, and the sequence-length guard") {
    ModelConfig cfg = tiny_config();
    ParamStore p = init_params(cfg, 3);
    BatchInput b = tiny_batch(3, 6, 11, cfg.vocab_size);

    Tensor h = encode(cfg, p, b);
    CHECK(h.shape() == Shape{3, 6, cfg.embed_dim});
    CHECK(h.all_finite());

    // identical rows give identical outputs
    BatchInput twin;
    twin.token_ids = {b.token_ids[1], b.token_ids[1]};
    std::vector<double> m, row1;
    for (std::size_t t = 0; t < 6; ++t) row1.push_back(b.mask.data()[6 + t]);
    m.insert(m.end(), row1.begin(), row1.end());
    m.insert(m.end(), row1.begin(), row1.end());
    twin.mask = Tensor({2, 6}, m);
    Tensor ht = encode(cfg, p, twin);
    for (std::size_t i = 0; i < 6 * cfg.embed_dim; ++i)
        CHECK(ht.data()[i] == ht.data()[6 * cfg.embed_dim + i]);

    // swapping two (distinct) tokens moves the output: position matters
    BatchInput swapped = twin;
    REQUIRE(swapped.token_ids[0].size() >= 2);
    swapped.token_ids[0][0] = 4;
    swapped.token_ids[0][1] = 9;
    BatchInput reversed = swapped;
    std::swap(reversed.token_ids[0][0], reversed.token_ids[0][1]);
    Tensor hs = encode(cfg, p, swapped);
    Tensor hr = encode(cfg, p, reversed);
    double diff = 0.0;
    for (std::size_t i = 0; i < cfg.embed_dim; ++i)
        diff = std::max(diff, std::abs(hs.data()[i] - hr.data()[i]));
    CHECK(diff > 1e-9);

    BatchInput longer = tiny_batch(1, cfg.max_seq_len + 1, 5, cfg.vocab_size);
    CHECK_THROWS_AS(encode(cfg, p, longer), ConfigError);
}

TEST_CASE("bilstm matches the loop oracle on random inputs") {
    ModelConfig cfg = tiny_config();
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        ParamStore p = init_params(cfg, seed);
        BatchInput b = tiny_batch(3, 5, seed + 40, cfg.vocab_size);
        Tensor x = rand_tensor({3, 5, cfg.embed_dim}, seed + 80);
        Tensor got = bilstm(p, "lstm", cfg.lstm_layers, cfg.lstm_hidden, x, b.mask);
        std::vector<double> want = ref_bilstm(p, "lstm", cfg.lstm_layers, cfg.lstm_hidden, x, b.mask);
        REQUIRE(got.shape() == Shape{3, 5, 2 * cfg.lstm_hidden});
        REQUIRE(got.numel() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i)
            CHECK(std::abs(got.data()[i] - want[i]) <= 1e-12);
    }
}

TEST_CASE("bilstm edge behavior: zero weights, length one, width mismatch") {
    ModelConfig cfg = tiny_config();
    ParamStore p = init_params(cfg, 1);
    // zero every lstm tensor -> all gate pre-activations 0 -> h = sig(0)*tanh(0) = 0
    for (auto& [name, t] : p.items()) {
        if (name.rfind("lstm.", 0) != 0) continue;
        std::fill(t.impl()->data.begin(), t.impl()->data.end(), 0.0);
    }
    Tensor x = rand_tensor({2, 4, cfg.embed_dim}, 9);
    Tensor mask({2, 4}, {1, 1, 1, 1, 1, 1, 0, 0});
    Tensor out = bilstm(p, "lstm", cfg.lstm_layers, cfg.lstm_hidden, x, mask);
    for (double v : out.data()) CHECK(v == 0.0);

    // single step: forward and backward halves both read that step
    ParamStore q = init_params(cfg, 2);
    Tensor x1 = rand_tensor({2, 1, cfg.embed_dim}, 10);
    Tensor m1({2, 1}, {1, 1});
    Tensor o1 = bilstm(q, "lstm", 1, cfg.lstm_hidden, x1, m1);
    std::vector<double> w1 = ref_bilstm(q, "lstm", 1, cfg.lstm_hidden, x1, m1);
    for (std::size_t i = 0; i < w1.size(); ++i) CHECK(std::abs(o1.data()[i] - w1[i]) <= 1e-13);

    Tensor narrow = rand_tensor({2, 4, 3}, 11);
    CHECK_THROWS_AS(bilstm(q, "lstm", cfg.lstm_layers, cfg.lstm_hidden, narrow, mask), DimError);
}

TEST_CASE("padded steps emit zeros and leave carried state alone") {
    ModelConfig cfg = tiny_config();
    ParamStore p = init_params(cfg, 5);
    // row 0: 3 real + 2 pad; row 1: same 3 real, no pad columns at all
    Tensor x5 = rand_tensor({1, 5, cfg.embed_dim}, 21);
    std::vector<double> first3(x5.data().begin(), x5.data().begin() + 3 * cfg.embed_dim);
    Tensor x3({1, 3, cfg.embed_dim}, first3);
    Tensor m5({1, 5}, {1, 1, 1, 0, 0});
    Tensor m3({1, 3}, {1, 1, 1});
    Tensor o5 = bilstm(p, "lstm", cfg.lstm_layers, cfg.lstm_hidden, x5, m5);
    Tensor o3 = bilstm(p, "lstm", cfg.lstm_layers, cfg.lstm_hidden, x3, m3);
    const std::size_t W = 2 * cfg.lstm_hidden;
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t j = 0; j < W; ++j)
            CHECK(o5.data()[t * W + j] == o3.data()[t * W + j]);
    for (std::size_t t = 3; t < 5; ++t)
        for (std::size_t j = 0; j < W; ++j) CHECK(o5.data()[t * W + j] == 0.0);
}

TEST_CASE("attention pool matches the loop oracle and behaves at the edges") {
    ModelConfig cfg = tiny_config();
    ParamStore p = init_params(cfg, 6);
    Tensor x = rand_tensor({3, 5, cfg.pooled_width()}, 31);
    Tensor mask({3, 5}, {1, 1, 1, 1, 0, 1, 0, 0, 0, 0, 1, 1, 1, 1, 1});
    PoolResult pr = attention_pool_full(p, x, mask);
    std::vector<double> pooled, weights;
    ref_pool(p, x, mask, pooled, weights);
    REQUIRE(pr.pooled.shape() == Shape{3, cfg.pooled_width()});
    REQUIRE(pr.weights.shape() == Shape{3, 5});
    for (std::size_t i = 0; i < pooled.size(); ++i)
        CHECK(std::abs(pr.pooled.data()[i] - pooled[i]) <= 1e-12);
    for (std::size_t i = 0; i < weights.size(); ++i)
        CHECK(std::abs(pr.weights.data()[i] - weights[i]) <= 1e-12);

    // weights: sum to 1 over live steps, exactly 0 on pads, nonnegative
    for (std::size_t b = 0; b < 3; ++b) {
        double s = 0.0;
        for (std::size_t t = 0; t < 5; ++t) {
            const double w = pr.weights.data()[b * 5 + t];
            CHECK(w >= 0.0);
            if (mask.data()[b * 5 + t] == 0.0) CHECK(w == 0.0);
            s += w;
        }
        CHECK(std::abs(s - 1.0) <= 1e-12);
    }

    // single live step pools to exactly that step
    for (std::size_t d = 0; d < cfg.pooled_width(); ++d)
        CHECK(pr.pooled.data()[cfg.pooled_width() + d] ==
              x.data()[(1 * 5 + 0) * cfg.pooled_width() + d]);

    // identical timesteps: any convex combination is the timestep itself
    std::vector<double> rep;
    for (int t = 0; t < 4; ++t)
        for (std::size_t d = 0; d < cfg.pooled_width(); ++d) rep.push_back(0.3 * (d + 1));
    Tensor same({1, 4, cfg.pooled_width()}, rep);
    Tensor msame({1, 4}, {1, 1, 1, 1});
    Tensor psame = attention_pool(p, same, msame);
    for (std::size_t d = 0; d < cfg.pooled_width(); ++d)
        CHECK(std::abs(psame.data()[d] - 0.3 * (d + 1)) <= 1e-12);

    // convex hull: pooled stays inside per-dim extremes of live steps
    for (std::size_t b = 0; b < 3; ++b) {
        for (std::size_t d = 0; d < cfg.pooled_width(); ++d) {
            double lo = 1e300, hi = -1e300;
            for (std::size_t t = 0; t < 5; ++t) {
                if (mask.data()[b * 5 + t] == 0.0) continue;
                lo = std::min(lo, x.data()[(b * 5 + t) * cfg.pooled_width() + d]);
                hi = std::max(hi, x.data()[(b * 5 + t) * cfg.pooled_width() + d]);
            }
            CHECK(pr.pooled.data()[b * cfg.pooled_width() + d] >= lo - 1e-12);
            CHECK(pr.pooled.data()[b * cfg.pooled_width() + d] <= hi + 1e-12);
        }
    }

    Tensor dead({1, 2}, {0, 0});
    Tensor x2 = rand_tensor({1, 2, cfg.pooled_width()}, 32);
    CHECK_THROWS_AS(attention_pool(p, x2, dead), ContractError);
}

TEST_CASE("fc head is the affine map it claims to be") {
    ModelConfig cfg = tiny_config();
    ParamStore p = init_params(cfg, 8);
    const std::size_t D = cfg.head_width();
    Tensor x = rand_tensor({3, D}, 33);

    std::fill(p.at("fc.w").impl()->data.begin(), p.at("fc.w").impl()->data.end(), 0.0);
    p.at("fc.b").impl()->data[0] = 0.75;
    Tensor y = fc_head(p, x);
    REQUIRE(y.shape() == Shape{3});
    for (double v : y.data()) CHECK(v == 0.75);

    p.at("fc.w").impl()->data[2] = 1.0;  // one-hot on feature 2
    y = fc_head(p, x);
    for (std::size_t b = 0; b < 3; ++b) CHECK(y.data()[b] == doctest::Approx(x.data()[b * D + 2] + 0.75));

    Tensor wrong = rand_tensor({3, D + 1}, 34);
    CHECK_THROWS_AS(fc_head(p, wrong), DimError);
}

TEST_CASE("expand_dims widens, never narrows") {
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor same = expand_dims(x, eye);
    CHECK(same.data() == x.data());

    Tensor zero = Tensor::zeros({3, 5});
    Tensor wide = expand_dims(x, zero);
    CHECK(wide.shape() == Shape{2, 5});
    for (double v : wide.data()) CHECK(v == 0.0);

    Tensor narrow = Tensor::zeros({3, 2});
    CHECK_THROWS_AS(expand_dims(x, narrow), ConfigError);
}

TEST_CASE("wide_output keeps transformer features first") {
    Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor c({2, 2}, {7, 8, 9, 10});
    Tensor w = wide_output(a, c);
    CHECK(w.shape() == Shape{2, 5});
    CHECK(w.data() == std::vector<double>{1, 2, 3, 7, 8, 4, 5, 6, 9, 10});

    Tensor empty({2, 0}, std::vector<double>{});
    Tensor w0 = wide_output(a, empty);
    CHECK(w0.shape() == Shape{2, 3});
    CHECK(w0.data() == a.data());

    Tensor mism({3, 2}, {1, 2, 3, 4, 5, 6});
    CHECK_THROWS_AS(wide_output(a, mism), DimError);
}

TEST_CASE("sector path: stable per sector, distinct across sectors, right width") {
    std::vector<Record> recs{{"a", "x", "y", "F21", 0.5},
                             {"b", "x", "y", "H04", 0.5},
                             {"c", "x", "y", "F21", 0.5}};
    Vocabulary v = Vocabulary::build(recs, 1);
    ModelConfig cfg = tiny_config();
    cfg.vocab_size = v.size();
    cfg.head_variant = HeadVariant::sector;
    ParamStore p = init_params(cfg, 12);

    BatchInput sb = make_sector_batch(v, recs);
    CHECK(sb.token_ids.size() == 3);
    CHECK(sb.token_ids[0].size() == 1);
    Tensor ctx = sector_path(cfg, p, sb);
    REQUIRE(ctx.shape() == Shape{3, 2 * cfg.sector_hidden});
    for (std::size_t d = 0; d < 2 * cfg.sector_hidden; ++d) {
        CHECK(ctx.data()[d] == ctx.data()[2 * 2 * cfg.sector_hidden + d]);  // F == F
    }
    double diff = 0.0;
    for (std::size_t d = 0; d < 2 * cfg.sector_hidden; ++d)
        diff = std::max(diff, std::abs(ctx.data()[d] - ctx.data()[2 * cfg.sector_hidden + d]));
    CHECK(diff > 1e-9);  // F vs H

    std::vector<Record> alien{{"z", "x", "y", "Q77", 0.5}};
    CHECK_THROWS_AS(make_sector_batch(v, alien), VocabError);
}

TEST_CASE("masked_mean averages only live steps") {
    Tensor x({1, 3, 2}, {1, 2, 3, 4, 100, 200});
    Tensor m({1, 3}, {1, 1, 0});
    Tensor got = masked_mean(x, m);
    CHECK(got.shape() == Shape{1, 2});
    CHECK(got.data()[0] == doctest::Approx(2.0));
    CHECK(got.data()[1] == doctest::Approx(3.0));
}

TEST_CASE("forward emits one raw score per row in every variant") {
    std::vector<Record> recs{{"a", "x", "y", "A01", 0.5}, {"b", "u", "w", "B02", 0.5}};
    Vocabulary v = Vocabulary::build(recs, 1);
    for (HeadVariant hv : {HeadVariant::standard, HeadVariant::wide, HeadVariant::sector}) {
        ModelConfig cfg = tiny_config();
        cfg.vocab_size = v.size();
        cfg.head_variant = hv;
        ParamStore p = init_params(cfg, 14);
        BatchInput b = tiny_batch(2, 6, 55, cfg.vocab_size);
        BatchInput sb = make_sector_batch(v, recs);
        ModelOutput out = forward(cfg, p, b, hv == HeadVariant::sector ? &sb : nullptr);
        CHECK(out.pred.shape() == Shape{2});
        CHECK(out.head_in.shape() == Shape{2, cfg.head_width()});
        CHECK(out.attention.shape() == Shape{2, 6});
        CHECK(out.pred.all_finite());
    }
    // sector variant without sector tokens is a contract violation
    ModelConfig cfg = tiny_config();
    cfg.vocab_size = v.size();
    cfg.head_variant = HeadVariant::sector;
    ParamStore p = init_params(cfg, 14);
    BatchInput b = tiny_batch(2, 6, 55, cfg.vocab_size);
    CHECK_THROWS_AS(forward(cfg, p, b, nullptr), ContractError);
}

TEST_CASE("padding invariance: extra pad columns change nothing") {
    ModelConfig cfg = tiny_config();
    ParamStore p = init_params(cfg, 17);
    BatchInput b = tiny_batch(4, 6, 70, cfg.vocab_size);

    BatchInput padded = b;
    std::vector<double> m = b.mask.data();
    std::vector<double> m2;
    for (std::size_t r = 0; r < 4; ++r) {
        padded.token_ids[r].push_back(0);
        padded.token_ids[r].push_back(0);
        m2.insert(m2.end(), m.begin() + r * 6, m.begin() + (r + 1) * 6);
        m2.push_back(0.0);
        m2.push_back(0.0);
    }
    padded.mask = Tensor({4, 8}, m2);

    Tensor pa = forward(cfg, p, b).pred;
    Tensor pb = forward(cfg, p, padded).pred;
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(pa.data()[i] - pb.data()[i]) <= 1e-10);
}

TEST_CASE("batch order equivariance") {
    ModelConfig cfg = tiny_config();
    ParamStore p = init_params(cfg, 19);
    BatchInput b = tiny_batch(5, 6, 71, cfg.vocab_size);

    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    BatchInput shuffled;
    std::vector<double> m(5 * 6);
    for (std::size_t r = 0; r < 5; ++r) {
        shuffled.token_ids.push_back(b.token_ids[perm[r]]);
        for (std::size_t t = 0; t < 6; ++t) m[r * 6 + t] = b.mask.data()[perm[r] * 6 + t];
    }
    shuffled.mask = Tensor({5, 6}, m);

    Tensor pa = forward(cfg, p, b).pred;
    Tensor pb = forward(cfg, p, shuffled).pred;
    for (std::size_t r = 0; r < 5; ++r) CHECK(pb.data()[r] == pa.data()[perm[r]]);
}

TEST_CASE("frozen embeddings take no gradient; unfrozen ones do") {
    ModelConfig cfg = tiny_config();
    ParamStore p = init_params(cfg, 23);
    BatchInput b = tiny_batch(3, 5, 72, cfg.vocab_size);
    Tensor target({3}, {0.2, 0.5, 0.9});
    const std::vector<double> before = p.at("embed.table").data();
    {
        TapeScope scope;
        Tensor loss = mse_loss(forward(cfg, p, b).pred, target);
        backward(loss);
    }
    CHECK(!p.at("embed.table").has_grad());
    CHECK(p.at("embed.table").data() == before);
    CHECK(p.at("fc.w").has_grad());

    cfg.freeze_embeddings = false;
    ParamStore q = init_params(cfg, 23);
    {
        TapeScope scope;
        Tensor loss = mse_loss(forward(cfg, q, b).pred, target);
        backward(loss);
    }
    REQUIRE(q.at("embed.table").has_grad());
    double g = 0.0;
    for (double x : q.at("embed.table").grad()) g += std::abs(x);
    CHECK(g > 0.0);
}

TEST_CASE("end-to-end gradients match finite differences") {
    std::vector<Record> recs{{"a", "x", "y", "A01", 0.5}, {"b", "u", "w", "B02", 0.5}};
    Vocabulary v = Vocabulary::build(recs, 1);
    for (std::uint64_t seed : {101ULL, 102ULL, 103ULL}) {
        ModelConfig cfg = tiny_config();
        cfg.vocab_size = v.size();
        cfg.freeze_embeddings = false;
        cfg.head_variant = seed == 103 ? HeadVariant::sector : HeadVariant::standard;
        ParamStore p = init_params(cfg, seed);
        // ~unit-scale weights: the default tiny init leaves most true
        // gradients at 1e-9 and below, unresolvable by central differences
        for (auto& [name, t] : p.items())
            for (double& x : t.impl()->data) x *= 8.0;
        BatchInput b = tiny_batch(4, 8, seed, cfg.vocab_size);
        BatchInput sb = make_sector_batch(v, {recs[0], recs[1], recs[0], recs[1]});
        Rng trng(seed + 500);
        Tensor target = Tensor::uniform({4}, 0.0, 1.0, trng);

        std::vector<std::pair<std::string, Tensor>> params;
        for (auto& [name, t] : p.items()) params.emplace_back(name, t);
        auto f = [&] {
            const BatchInput* sp = cfg.head_variant == HeadVariant::sector ? &sb : nullptr;
            return pearson_loss(forward(cfg, p, b, sp).pred, target);
        };
        GradcheckReport rep = gradcheck(f, params, 1e-5, 1e-4, 3, seed, 1e-5);
        CAPTURE(rep.summary());
        CHECK(rep.pass());
    }
}

TEST_CASE("rtd logits: shape, guard, and gradient flow") {
    ModelConfig cfg = tiny_config();
    ParamStore p0 = init_params(cfg, 31);
    BatchInput b = tiny_batch(2, 5, 77, cfg.vocab_size);
    CHECK_THROWS_AS(rtd_logits(cfg, p0, b), ContractError);  // mlm-style has no rtd head

    cfg.encoder_variant = EncoderVariant::rtd_style;
    ParamStore p = init_params(cfg, 31);
    Tensor lg = rtd_logits(cfg, p, b);
    CHECK(lg.shape() == Shape{2, 5});
    CHECK(lg.all_finite());

    std::vector<std::pair<std::string, Tensor>> params{{"rtd.w", p.at("rtd.w")},
                                                       {"rtd.b", p.at("rtd.b")}};
    Tensor labels({2, 5}, {1, 0, 0, 1, 0, 0, 0, 1, 0, 0});
    auto f = [&] { return ops::bce_with_logits(rtd_logits(cfg, p, b), labels, b.mask); };
    GradcheckReport rep = gradcheck(f, params, 1e-6, 1e-6);
    CAPTURE(rep.summary());
    CHECK(rep.pass());
}

TEST_CASE("checkpoints round-trip byte-exactly") {
    std::vector<Record> recs{{"a", "torque wrench", "socket wrench", "F21", 0.5},
                             {"b", "lens", "optical lens", "G06", 0.75}};
    Vocabulary v = Vocabulary::build(recs, 1);
    ModelConfig cfg = tiny_config();
    cfg.vocab_size = v.size();
    cfg.head_variant = HeadVariant::sector;
    cfg.encoder_variant = EncoderVariant::rtd_style;
    ParamStore p = init_params(cfg, 99);

    const std::string dir = "/tmp/simscore_ckpt_test";
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/model.ckpt";
    save_checkpoint(path, cfg, v, p);

    Checkpoint ck = load_checkpoint(path);
    CHECK(ck.config.vocab_size == cfg.vocab_size);
    CHECK(ck.config.head_variant == cfg.head_variant);
    CHECK(ck.config.encoder_variant == cfg.encoder_variant);
    CHECK(ck.vocab_tokens == v.tokens());
    REQUIRE(ck.params.size() == p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        CHECK(ck.params.items()[i].first == p.items()[i].first);
        CHECK(ck.params.items()[i].second.shape() == p.items()[i].second.shape());
        CHECK(ck.params.items()[i].second.data() == p.items()[i].second.data());
    }
    CHECK(!ck.params.at("embed.table").requires_grad());
    CHECK(ck.params.at("fc.w").requires_grad());

    // saving the loaded store reproduces the file byte for byte
    const std::string path2 = dir + "/model2.ckpt";
    Vocabulary v2 = Vocabulary::from_tokens(ck.vocab_tokens);
    save_checkpoint(path2, ck.config, v2, ck.params);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::stringstream s1, s2;
    s1 << f1.rdbuf();
    s2 << f2.rdbuf();
    CHECK(s1.str() == s2.str());
    CHECK(!s1.str().empty());

    // loaded model predicts identically
    BatchInput b = tiny_batch(2, 6, 7, cfg.vocab_size);
    BatchInput sb = make_sector_batch(v, recs);
    Tensor pa = forward(cfg, p, b, &sb).pred;
    Tensor pb = forward(ck.config, ck.params, b, &sb).pred;
    CHECK(pa.data() == pb.data());

    CHECK_THROWS_AS(load_checkpoint(dir + "/nope.ckpt"), IoError);

    std::ofstream bad(dir + "/bad.ckpt", std::ios::binary);
    bad << "NOTACKPT\n" << std::string(64, 'x');
    bad.close();
    CHECK_THROWS_AS(load_checkpoint(dir + "/bad.ckpt"), DataError);

    std::string blob = s1.str();
    std::ofstream trunc(dir + "/trunc.ckpt", std::ios::binary);
    trunc.write(blob.data(), static_cast<std::streamsize>(blob.size() / 2));
    trunc.close();
    CHECK_THROWS_AS(load_checkpoint(dir + "/trunc.ckpt"), DataError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("model config json mirror") {
    ModelConfig cfg = tiny_config();
    cfg.head_variant = HeadVariant::wide;
    cfg.freeze_embeddings = false;
    ModelConfig back = model_config_from_json(model_config_to_json(cfg));
    CHECK(back.vocab_size == cfg.vocab_size);
    CHECK(back.embed_dim == cfg.embed_dim);
    CHECK(back.n_layers == cfg.n_layers);
    CHECK(back.n_heads == cfg.n_heads);
    CHECK(back.ffn_dim == cfg.ffn_dim);
    CHECK(back.lstm_hidden == cfg.lstm_hidden);
    CHECK(back.lstm_layers == cfg.lstm_layers);
    CHECK(back.max_seq_len == cfg.max_seq_len);
    CHECK(back.sector_hidden == cfg.sector_hidden);
    CHECK(back.head_variant == cfg.head_variant);
    CHECK(back.freeze_embeddings == cfg.freeze_embeddings);
    CHECK_THROWS_AS(model_config_from_json("{"), DataError);
    CHECK_THROWS_AS(model_config_from_json("{\"vocab_size\": 4}"), DataError);
}
