#include "simscore/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "simscore/errors.hpp"
#include "simscore/ops.hpp"
#include "simscore/rng.hpp"

namespace simscore {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

struct PreparedBatch {
    BatchInput tokens;
    BatchInput sector;
    bool has_sector = false;
    Tensor target;  // [n]
};

PreparedBatch prepare_batch(const ModelConfig& mcfg, const Vocabulary& vocab,
                            const std::vector<Record>& recs, std::size_t max_len) {
    std::vector<TokenRow> rows;
    std::vector<double> targets;
    rows.reserve(recs.size());
    for (const Record& r : recs) {
        rows.push_back(tokenize_pad(vocab, r.anchor, r.target, sector_of(r.context), max_len));
        targets.push_back(r.score);
    }
    PreparedBatch b;
    b.tokens = make_batch(rows);
    if (mcfg.head_variant == HeadVariant::sector) {
        b.sector = make_sector_batch(vocab, recs);
        b.has_sector = true;
    }
    b.target = Tensor({recs.size()}, targets);
    return b;
}

using PredictFn = std::function<Tensor(const PreparedBatch&)>;

EvalResult evaluate_impl(const PredictFn& predict, const ModelConfig& mcfg,
                         const Vocabulary& vocab, const std::vector<Record>& records,
                         std::size_t max_len, std::size_t batch_size, double f1_threshold) {
    if (records.empty()) throw DomainError("evaluate: no records");
    if (batch_size == 0) throw ConfigError("evaluate: batch_size must be at least 1");
    EvalResult out;
    std::vector<double> targets;
    for (std::size_t start = 0; start < records.size(); start += batch_size) {
        const std::size_t n = std::min(batch_size, records.size() - start);
        std::vector<Record> chunk(records.begin() + start, records.begin() + start + n);
        PreparedBatch b = prepare_batch(mcfg, vocab, chunk, max_len);
        Tensor pred = predict(b);  // no tape active: inference mode
        for (double v : pred.data()) out.raw.push_back(v);
        for (const Record& r : chunk) targets.push_back(r.score);
    }
    out.clamped.reserve(out.raw.size());
    for (double v : out.raw) out.clamped.push_back(std::clamp(v, 0.0, 1.0));
    out.metrics = compute_metrics(out.clamped, targets, f1_threshold);
    return out;
}

ParamStore copy_params(const ParamStore& src) {
    ParamStore out;
    for (const auto& [name, t] : src.items()) {
        Tensor c(t.shape(), t.data());
        c.set_requires_grad(t.requires_grad());
        out.add(name, std::move(c));
    }
    return out;
}

// Core loop shared by train() and the ablation stages. `predict` owns the
// architecture; everything else (batching, AWP, clipping, updates,
// reporting) is identical across configurations. When `best_out` is set it
// receives a deep copy of the parameters from the end of the best epoch.
TrainReport run_loop(const ModelConfig& mcfg, const TrainConfig& tcfg, ParamStore& params,
                     const Vocabulary& vocab, const std::vector<Record>& train_recs,
                     const std::vector<Record>& val_recs, const PredictFn& predict,
                     bool shuffle_on, ParamStore* best_out = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    OptimizerState opt = make_optimizer(params);
    TrainReport report;
    std::size_t global_step = 0;
    double last_grad_norm = 0.0;
    std::size_t best = 0;
    bool any_defined = false;

    std::vector<std::size_t> order(train_recs.size());
    std::iota(order.begin(), order.end(), 0);

    auto run_eval = [&] {
        return evaluate_impl(predict, mcfg, vocab, val_recs, tcfg.max_len, tcfg.batch_size,
                             tcfg.f1_threshold);
    };

    for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
        Rng rng(derive_seed(tcfg.seed, "batch_order", epoch));
        rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t steps_in_epoch = 0;

        for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
            const std::size_t n = std::min(tcfg.batch_size, order.size() - start);
            std::vector<Record> batch_recs;
            batch_recs.reserve(n);
            for (std::size_t i = 0; i < n; ++i) batch_recs.push_back(train_recs[order[start + i]]);
            if (shuffle_on)
                batch_recs = shuffle_targets(std::move(batch_recs), global_step, tcfg.seed);
            PreparedBatch batch = prepare_batch(mcfg, vocab, batch_recs, tcfg.max_len);
            ++global_step;

            auto loss_fn = [&] {
                return combined_loss(predict(batch), batch.target, tcfg.lambda_mse);
            };

            for (auto& [name, t] : params.items()) t.zero_grad();
            double loss_value = 0.0;
            {
                TapeScope scope;
                Tensor loss = loss_fn();
                loss_value = loss.value();
                if (!std::isfinite(loss_value)) {
                    std::ostringstream os;
                    os << "non-finite loss at step " << global_step << " (epoch " << epoch
                       << "): lr_transformer=" << tcfg.lr_transformer << " lr_head=" << tcfg.lr_head
                       << " last_grad_norm=" << last_grad_norm;
                    throw NumericError(os.str());
                }
                backward(loss);
            }
            if (tcfg.awp_start_epoch > 0 && epoch >= tcfg.awp_start_epoch)
                awp_step(params, loss_fn, tcfg.awp_epsilon, tcfg.awp_encoder_only);
            last_grad_norm = clip_gradients(params, tcfg.clip_norm);
            if (!std::isfinite(last_grad_norm)) {
                std::ostringstream os;
                os << "non-finite gradient norm at step " << global_step << " (epoch " << epoch
                   << "): lr_transformer=" << tcfg.lr_transformer << " lr_head=" << tcfg.lr_head;
                throw NumericError(os.str());
            }
            update(params, opt, tcfg);

            loss_sum += loss_value;
            ++steps_in_epoch;
            StepPoint sp;
            sp.step = global_step;
            sp.loss = loss_value;
            if (tcfg.eval_every > 0 && global_step % tcfg.eval_every == 0)
                sp.val = run_eval().metrics;
            report.series.push_back(sp);
        }

        EpochStats es;
        es.train_loss = loss_sum / static_cast<double>(steps_in_epoch);
        es.val = run_eval().metrics;
        report.epochs.push_back(es);

        // running best by validation pearson; while no epoch has a defined
        // pearson, fall back to lowest MSE
        const std::size_t e = report.epochs.size() - 1;
        const MetricReport& m = report.epochs[e].val;
        bool take = false;
        if (m.pearson_defined) {
            take = !any_defined || m.pearson > report.epochs[best].val.pearson;
            any_defined = true;
        } else if (!any_defined) {
            take = e == 0 || m.mse < report.epochs[best].val.mse;
        }
        if (take) {
            best = e;
            if (best_out) *best_out = copy_params(params);
        }
    }
    report.best_epoch = best + 1;
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

struct Split {
    std::vector<Record> train;
    std::vector<Record> val;
};

Split split_records(const std::vector<Record>& records, const FoldAssignment& folds,
                    std::size_t fold_index) {
    if (folds.k == 0 || fold_index >= folds.k)
        throw ConfigError("fold_index " + std::to_string(fold_index) + " out of range for k=" +
                          std::to_string(folds.k));
    Split s;
    for (const Record& r : records) {
        auto it = folds.fold_of.find(r.id);
        if (it == folds.fold_of.end())
            throw DataError("record '" + r.id + "' missing from the fold assignment");
        (it->second == fold_index ? s.val : s.train).push_back(r);
    }
    if (s.train.empty()) throw DataError("training split is empty");
    if (s.val.empty()) throw DataError("validation split is empty");
    return s;
}

// Resolve vocab_size == 0 to the built vocabulary; a configured size must
// cover it (larger tables just leave unused rows).
ModelConfig resolve_config(const ModelConfig& mcfg, const Vocabulary& vocab) {
    ModelConfig cfg = mcfg;
    if (cfg.vocab_size == 0)
        cfg.vocab_size = vocab.size();
    else if (cfg.vocab_size < vocab.size())
        throw ConfigError("vocab_size " + std::to_string(cfg.vocab_size) +
                          " is smaller than the training vocabulary (" +
                          std::to_string(vocab.size()) + ")");
    cfg.validate();
    return cfg;
}

std::size_t worker_count() {
    const char* env = std::getenv("SIMSCORE_THREADS");
    if (env == nullptr || *env == '\0') return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || v < 1) return 1;
    return std::min<std::size_t>(static_cast<std::size_t>(v), 8);
}

}  // namespace

std::string to_string(ArchMode m) {
    switch (m) {
        case ArchMode::encoder_only: return "encoder_only";
        case ArchMode::lstm_mean: return "lstm_mean";
        case ArchMode::full: return "full";
    }
    throw ContractError("unknown ArchMode");
}

void TrainConfig::validate() const {
    if (epochs == 0) throw ConfigError("epochs must be at least 1");
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (max_len < 6) throw ConfigError("max_len must be at least 6");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
    if (lambda_mse < 0.0) throw ConfigError("lambda_mse must be non-negative");
    if (!(awp_epsilon > 0.0)) throw ConfigError("awp_epsilon must be positive");
    if (lr_transformer < 0.0 || lr_head < 0.0)
        throw ConfigError("learning rates must be non-negative");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (!(f1_threshold > 0.0) || !(f1_threshold < 1.0))
        throw ConfigError("f1_threshold must lie in (0, 1)");
}

OptimizerState make_optimizer(const ParamStore& params) {
    OptimizerState s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& [name, t] : params.items()) {
        s.m.emplace_back(t.numel(), 0.0);
        s.v.emplace_back(t.numel(), 0.0);
    }
    return s;
}

bool is_transformer_param(const std::string& name) {
    return name.rfind("embed.", 0) == 0 || name.rfind("enc.", 0) == 0;
}

double clip_gradients(ParamStore& params, double clip_norm) {
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
    double sq = 0.0;
    for (const auto& [name, t] : params.items()) {
        if (!t.requires_grad() || !t.has_grad()) continue;
        for (double g : t.impl()->grad) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > clip_norm) {
        const double scale = clip_norm / norm;
        for (auto& [name, t] : params.items()) {
            if (!t.requires_grad() || !t.has_grad()) continue;
            for (double& g : t.impl()->grad) g *= scale;
        }
    }
    return norm;
}

void update(ParamStore& params, OptimizerState& opt, const TrainConfig& cfg) {
    if (opt.m.size() != params.size() || opt.v.size() != params.size())
        throw ContractError("optimizer state does not match the parameter store");
    ++opt.step;
    const double t = static_cast<double>(opt.step);
    const double bc1 = 1.0 - std::pow(kBeta1, t);
    const double bc2 = 1.0 - std::pow(kBeta2, t);

    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, w] = params.items()[i];
        if (!w.requires_grad()) continue;
        if (!w.has_grad())
            throw ContractError("update: trainable parameter '" + name + "' has no gradient");
        const double lr = is_transformer_param(name) ? cfg.lr_transformer : cfg.lr_head;
        const bool decay = w.shape().size() >= 2;
        auto& m = opt.m[i];
        auto& v = opt.v[i];
        auto& data = w.impl()->data;
        const auto& g = w.impl()->grad;
        for (std::size_t c = 0; c < data.size(); ++c) {
            m[c] = kBeta1 * m[c] + (1.0 - kBeta1) * g[c];
            v[c] = kBeta2 * v[c] + (1.0 - kBeta2) * g[c] * g[c];
            double step = (m[c] / bc1) / (std::sqrt(v[c] / bc2) + kAdamEps);
            if (decay) step += cfg.weight_decay * data[c];
            data[c] -= lr * step;
        }
    }
}

void awp_step(ParamStore& params, const std::function<Tensor()>& loss_fn, double epsilon,
              bool encoder_only) {
    if (!(epsilon > 0.0)) throw ContractError("awp_step: epsilon must be positive");
    std::vector<std::vector<double>> saved(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, w] = params.items()[i];
        if (!w.requires_grad() || !w.has_grad()) continue;
        if (encoder_only && !is_transformer_param(name)) continue;
        double wn = 0.0, gn = 0.0;
        for (double x : w.impl()->data) wn += x * x;
        for (double x : w.impl()->grad) gn += x * x;
        if (gn == 0.0) continue;  // flat direction: nothing to perturb along
        saved[i] = w.data();
        const double s = epsilon * std::sqrt(wn) / std::sqrt(gn);
        auto& data = w.impl()->data;
        const auto& g = w.impl()->grad;
        for (std::size_t c = 0; c < data.size(); ++c) data[c] += s * g[c];
    }
    {
        TapeScope scope;
        backward(loss_fn());  // adversarial gradients accumulate onto clean ones
    }
    for (std::size_t i = 0; i < params.size(); ++i)
        if (!saved[i].empty()) params.items()[i].second.impl()->data = std::move(saved[i]);
}

std::string TrainReport::text() const {
    std::ostringstream os;
    for (std::size_t e = 0; e < epochs.size(); ++e)
        os << "epoch " << (e + 1) << ": train_loss=" << epochs[e].train_loss << " | "
           << epochs[e].val.text() << "\n";
    os << "best epoch: " << best_epoch << "\n";
    return os.str();
}

EvalResult evaluate(const ModelConfig& mcfg, ParamStore& params, const Vocabulary& vocab,
                    const std::vector<Record>& records, std::size_t max_len,
                    std::size_t batch_size, double f1_threshold) {
    auto predict = [&](const PreparedBatch& b) {
        return forward(mcfg, params, b.tokens, b.has_sector ? &b.sector : nullptr).pred;
    };
    return evaluate_impl(predict, mcfg, vocab, records, max_len, batch_size, f1_threshold);
}

TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const std::vector<Record>& records, const FoldAssignment& folds,
                  std::size_t fold_index, const std::function<void(ParamStore&)>& init_hook) {
    tcfg.validate();
    Split split = split_records(records, folds, fold_index);

    TrainResult out;
    out.vocab = Vocabulary::build(split.train, 1);
    const ModelConfig cfg = resolve_config(mcfg, out.vocab);
    out.params = init_params(cfg, derive_seed(tcfg.seed, "model"));
    if (init_hook) init_hook(out.params);
    // the pretraining head takes no part in the scoring objective
    if (out.params.contains("rtd.w")) {
        out.params.at("rtd.w").set_requires_grad(false);
        out.params.at("rtd.b").set_requires_grad(false);
    }

    auto predict = [&cfg, &out](const PreparedBatch& b) {
        return forward(cfg, out.params, b.tokens, b.has_sector ? &b.sector : nullptr).pred;
    };
    out.report = run_loop(cfg, tcfg, out.params, out.vocab, split.train, split.val, predict,
                          tcfg.shuffle_targets_on, &out.best_params);
    return out;
}

RtdReport rtd_pretrain(const ModelConfig& mcfg, ParamStore& params, const Vocabulary& vocab,
                       const std::vector<Record>& corpus, std::size_t steps, double replace_prob,
                       const TrainConfig& tcfg) {
    if (!(replace_prob > 0.0) || !(replace_prob < 1.0))
        throw ConfigError("replace_prob must lie strictly between 0 and 1");
    if (mcfg.encoder_variant != EncoderVariant::rtd_style)
        throw ContractError("rtd_pretrain requires the rtd_style encoder variant");
    if (!params.contains("rtd.w")) throw ContractError("parameter store lacks the rtd head");
    if (corpus.empty()) throw DomainError("rtd_pretrain: empty corpus");
    if (steps == 0) throw ConfigError("steps must be at least 1");
    if (vocab.size() <= 4) throw ConfigError("vocabulary holds no replaceable tokens");
    tcfg.validate();

    // only the encoder and the rtd head take part; park everything else
    std::vector<Tensor> parked;
    for (auto& [name, t] : params.items()) {
        if (is_transformer_param(name) || name.rfind("rtd.", 0) == 0) continue;
        if (!t.requires_grad()) continue;
        t.set_requires_grad(false);
        parked.push_back(t);
    }
    struct Unpark {
        std::vector<Tensor>& ts;
        ~Unpark() {
            for (Tensor& t : ts) t.set_requires_grad(true);
        }
    } unpark{parked};

    OptimizerState opt = make_optimizer(params);
    RtdReport rep;
    rep.losses.reserve(steps);

    for (std::size_t step = 0; step < steps; ++step) {
        Rng rng(derive_seed(tcfg.seed, "rtd", step));
        std::vector<Record> recs;
        recs.reserve(tcfg.batch_size);
        for (std::size_t i = 0; i < tcfg.batch_size; ++i)
            recs.push_back(corpus[rng.next_u64() % corpus.size()]);

        std::vector<TokenRow> rows;
        for (const Record& r : recs)
            rows.push_back(tokenize_pad(vocab, r.anchor, r.target, sector_of(r.context),
                                        tcfg.max_len));
        BatchInput batch = make_batch(rows);
        const std::size_t seq = rows.front().ids.size();
        std::vector<double> labels(recs.size() * seq, 0.0);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            for (std::size_t t = 0; t < seq; ++t) {
                if (rows[r].mask[t] != 1.0) continue;
                if (rng.uniform01() >= replace_prob) continue;
                const int original = batch.token_ids[r][t];
                const int drawn = 4 + static_cast<int>(rng.next_u64() % (vocab.size() - 4));
                batch.token_ids[r][t] = drawn;
                if (drawn != original) labels[r * seq + t] = 1.0;
            }
        }
        Tensor label_t({recs.size(), seq}, labels);

        for (auto& [name, t] : params.items()) t.zero_grad();
        double loss_value = 0.0;
        {
            TapeScope scope;
            Tensor loss = ops::bce_with_logits(rtd_logits(mcfg, params, batch), label_t,
                                               batch.mask);
            loss_value = loss.value();
            if (!std::isfinite(loss_value))
                throw NumericError("non-finite rtd loss at step " + std::to_string(step + 1));
            backward(loss);
        }
        clip_gradients(params, tcfg.clip_norm);
        update(params, opt, tcfg);
        rep.losses.push_back(loss_value);
    }
    rep.initial_loss = rep.losses.front();
    rep.final_loss = rep.losses.back();
    return rep;
}

namespace {

struct Stage {
    std::string label;
    ArchMode mode;
    bool shuffle;
};

// Ablation stages run the standard head / mlm-style encoder; the grid
// varies architecture depth and the shuffling switch only.
ParamStore stage_params(const ModelConfig& cfg, ArchMode mode, std::uint64_t seed) {
    ParamStore base = init_params(cfg, derive_seed(seed, "model"));
    if (mode == ArchMode::full) return base;
    ParamStore p;
    for (auto& [name, t] : base.items()) {
        const bool encoder = is_transformer_param(name);
        const bool lstm = name.rfind("lstm.", 0) == 0;
        if (encoder || (mode == ArchMode::lstm_mean && (lstm || name.rfind("fc.", 0) == 0)))
            p.add(name, t);
    }
    if (mode == ArchMode::encoder_only) {
        // the mean-pooled encoder state is embed_dim wide, not head_width
        Rng rng(derive_seed(seed, "arch_fc"));
        p.add("fc.w", Tensor::uniform({cfg.embed_dim, 1}, -0.05, 0.05, rng)
                          .set_requires_grad(true));
        p.add("fc.b", Tensor::uniform({1}, -0.05, 0.05, rng).set_requires_grad(true));
    }
    return p;
}

PredictFn stage_predict(const ModelConfig& cfg, ParamStore& params, ArchMode mode) {
    switch (mode) {
        case ArchMode::encoder_only:
            return [&cfg, &params](const PreparedBatch& b) {
                Tensor enc = encode(cfg, params, b.tokens);
                return fc_head(params, masked_mean(enc, b.tokens.mask));
            };
        case ArchMode::lstm_mean:
            return [&cfg, &params](const PreparedBatch& b) {
                Tensor enc = encode(cfg, params, b.tokens);
                Tensor h = bilstm(params, "lstm", cfg.lstm_layers, cfg.lstm_hidden, enc,
                                  b.tokens.mask);
                return fc_head(params, masked_mean(h, b.tokens.mask));
            };
        case ArchMode::full:
            return [&cfg, &params](const PreparedBatch& b) {
                Tensor enc = encode(cfg, params, b.tokens);
                Tensor h = bilstm(params, "lstm", cfg.lstm_layers, cfg.lstm_hidden, enc,
                                  b.tokens.mask);
                return fc_head(params, attention_pool(params, h, b.tokens.mask));
            };
    }
    throw ContractError("unknown ArchMode");
}

}  // namespace

std::string AblationTable::text() const {
    std::ostringstream os;
    os << "Model                | Pearson (%) |      MSE | F1-Score (%) | AUC (%)\n";
    os << "---------------------+-------------+----------+--------------+--------\n";
    for (const AblationRow& row : rows) {
        os << row.label;
        for (std::size_t i = row.label.size(); i < 20; ++i) os << ' ';
        if (row.failed) {
            os << " | FAILED: " << row.error << "\n";
            continue;
        }
        char buf[128];
        std::snprintf(buf, sizeof(buf), " | %11.2f | %8.5f | %12.2f | %7.2f",
                      row.metrics.pearson_defined ? 100.0 * row.metrics.pearson : 0.0,
                      row.metrics.mse, 100.0 * row.metrics.f1,
                      row.metrics.auc_defined ? 100.0 * row.metrics.auc : 0.0);
        os << buf;
        if (!row.metrics.pearson_defined || !row.metrics.auc_defined) os << "  (undefined: ";
        if (!row.metrics.pearson_defined) os << "pearson ";
        if (!row.metrics.auc_defined) os << "auc";
        if (!row.metrics.pearson_defined || !row.metrics.auc_defined) os << ")";
        os << "\n";
    }
    return os.str();
}

AblationTable run_ablation(const ModelConfig& mcfg, const TrainConfig& tcfg,
                           const std::vector<Record>& records, const FoldAssignment& folds,
                           std::size_t fold_index, const std::vector<std::string>& wanted) {
    tcfg.validate();
    const std::vector<Stage> stages = {
        {"encoder_only", ArchMode::encoder_only, false},
        {"+lstm", ArchMode::lstm_mean, false},
        {"+attention_pooling", ArchMode::full, false},
        {"+target_shuffling", ArchMode::full, true},
    };

    // which of the five canonical rows to emit, and which stages must
    // actually train to support them
    std::vector<bool> emit(stages.size() + 1, wanted.empty());
    for (const std::string& name : wanted) {
        bool hit = false;
        for (std::size_t i = 0; i < stages.size(); ++i)
            if (stages[i].label == name) emit[i] = hit = true;
        if (name == "ensemble") emit[stages.size()] = hit = true;
        if (!hit) throw ConfigError("unknown ablation stage '" + name + "'");
    }
    std::vector<bool> need(emit.begin(), emit.begin() + stages.size());
    if (emit[stages.size()]) need[stages.size() - 2] = need[stages.size() - 1] = true;

    std::vector<AblationRow> rows(stages.size() + 1);
    std::vector<std::vector<double>> stage_raw(stages.size());
    std::vector<double> val_targets;
    std::mutex targets_mutex;

    auto run_stage = [&](std::size_t idx) {
        AblationRow& row = rows[idx];
        row.label = stages[idx].label;
        try {
            Split split = split_records(records, folds, fold_index);
            Vocabulary vocab = Vocabulary::build(split.train, 1);
            ModelConfig cfg = resolve_config(mcfg, vocab);
            cfg.head_variant = HeadVariant::standard;
            cfg.encoder_variant = EncoderVariant::mlm_style;
            ParamStore params = stage_params(cfg, stages[idx].mode, tcfg.seed);
            PredictFn predict = stage_predict(cfg, params, stages[idx].mode);
            run_loop(cfg, tcfg, params, vocab, split.train, split.val, predict,
                     stages[idx].shuffle);
            EvalResult ev = evaluate_impl(predict, cfg, vocab, split.val, tcfg.max_len,
                                          tcfg.batch_size, tcfg.f1_threshold);
            row.metrics = ev.metrics;
            stage_raw[idx] = ev.raw;
            std::lock_guard<std::mutex> lock(targets_mutex);
            if (val_targets.empty())
                for (const Record& r : split.val) val_targets.push_back(r.score);
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
        }
    };

    std::vector<std::size_t> jobs;
    for (std::size_t i = 0; i < stages.size(); ++i)
        if (need[i]) jobs.push_back(i);

    const std::size_t workers = std::min(worker_count(), jobs.size());
    if (workers <= 1) {
        for (std::size_t j : jobs) run_stage(j);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t i = next.fetch_add(1); i < jobs.size(); i = next.fetch_add(1))
                    run_stage(jobs[i]);
            });
        for (std::thread& t : pool) t.join();
    }

    AblationRow& ens = rows.back();
    ens.label = "ensemble";
    const std::size_t a = stages.size() - 2, b = stages.size() - 1;
    if (emit[stages.size()]) {
        if (rows[a].failed || rows[b].failed) {
            ens.failed = true;
            ens.error = "member run failed";
        } else {
            std::vector<double> blended(stage_raw[a].size());
            for (std::size_t i = 0; i < blended.size(); ++i)
                blended[i] = std::clamp(0.5 * (stage_raw[a][i] + stage_raw[b][i]), 0.0, 1.0);
            ens.metrics = compute_metrics(blended, val_targets, tcfg.f1_threshold);
        }
    }

    AblationTable table;
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (emit[i]) table.rows.push_back(std::move(rows[i]));
    return table;
}

}  // namespace simscore
