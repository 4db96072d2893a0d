#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "simscore/data.hpp"
#include "simscore/model.hpp"
#include "simscore/objectives.hpp"
#include "simscore/tensor.hpp"

// Training loop: AdamW with differentiated learning rates (transformer
// group vs head group), global-norm gradient clipping, adversarial weight
// perturbation from a configurable epoch, per-step target shuffling, and
// epoch-cadence evaluation. Also hosts RTD pretraining and the ablation
// harness since both are optimization procedures over model pieces.

namespace simscore {

// Ablation architecture stages: masked-mean over the encoder, Bi-LSTM with
// mean pooling, or the full attention-pooled model.
enum class ArchMode { encoder_only, lstm_mean, full };
std::string to_string(ArchMode m);

struct TrainConfig {
    std::size_t epochs = 5;
    std::size_t batch_size = 16;
    double lr_transformer = 2e-5;
    double lr_head = 1e-3;
    double awp_epsilon = 1e-3;
    std::size_t awp_start_epoch = 2;  // 1-based; 0 disables AWP entirely
    double lambda_mse = 0.0;
    std::uint64_t seed = 42;
    std::size_t eval_every = 0;  // extra mid-epoch evals every N steps; 0 = epoch end only
    double clip_norm = 1.0;
    double weight_decay = 0.01;
    bool awp_encoder_only = false;
    bool shuffle_targets_on = true;
    std::size_t max_len = 32;  // tokenizer pad length
    double f1_threshold = 0.5;

    void validate() const;  // ConfigError
};

struct OptimizerState {
    std::vector<std::vector<double>> m;  // parallel to ParamStore items
    std::vector<std::vector<double>> v;
    std::size_t step = 0;
};
OptimizerState make_optimizer(const ParamStore& params);

// true -> lr_transformer group (embedding + encoder), false -> lr_head.
bool is_transformer_param(const std::string& name);

// Scales all trainable gradients so the global L2 norm is at most
// clip_norm; returns the pre-clip norm.
double clip_gradients(ParamStore& params, double clip_norm);

// One AdamW step (beta1 0.9, beta2 0.999, eps 1e-8, decoupled weight decay
// on rank>=2 tensors). Frozen tensors are untouched; a trainable tensor
// without a gradient is a ContractError.
void update(ParamStore& params, OptimizerState& opt, const TrainConfig& cfg);

// Adversarial weight perturbation: perturb each trainable tensor by
// epsilon * (|w|/|g|) * g, re-run loss_fn forward+backward so adversarial
// gradients accumulate onto the clean ones, then restore weights bitwise.
// Zero-gradient tensors are skipped. encoder_only restricts the
// perturbation to the transformer group.
void awp_step(ParamStore& params, const std::function<Tensor()>& loss_fn, double epsilon,
              bool encoder_only = false);

struct StepPoint {
    std::size_t step = 0;
    double loss = 0.0;
    MetricReport val;  // filled on eval steps only (val.n > 0)
};

struct EpochStats {
    double train_loss = 0.0;  // mean step loss
    MetricReport val;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    std::vector<StepPoint> series;  // per-step losses (+ periodic eval rows)
    std::size_t best_epoch = 0;     // 1-based argmax of validation pearson
    double wall_seconds = 0.0;      // never serialized into artifacts
    std::string text() const;
};

struct EvalResult {
    MetricReport metrics;  // over clamped predictions
    std::vector<double> raw;
    std::vector<double> clamped;
};
// Deterministic no-grad pass in batches; predictions clamped to [0,1] for
// reporting. DomainError on empty records.
EvalResult evaluate(const ModelConfig& mcfg, ParamStore& params, const Vocabulary& vocab,
                    const std::vector<Record>& records, std::size_t max_len,
                    std::size_t batch_size, double f1_threshold = 0.5);

struct TrainResult {
    ParamStore params;       // state after the final epoch
    ParamStore best_params;  // deep copy from the end of report.best_epoch
    TrainReport report;
    Vocabulary vocab;  // built from the training split
};
// Trains on every fold except fold_index, validates on fold_index.
// Deterministic given (configs, records, folds, seed). NumericError with
// step/lr/grad-norm diagnostics when the loss goes non-finite. init_hook,
// when set, runs once on the freshly initialized parameters (warm starts,
// fault injection in tests).
TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const std::vector<Record>& records, const FoldAssignment& folds,
                  std::size_t fold_index,
                  const std::function<void(ParamStore&)>& init_hook = {});

struct RtdReport {
    std::vector<double> losses;  // per step
    double initial_loss = 0.0;
    double final_loss = 0.0;
};
// Replaced-token-detection pretraining on the encoder: per step, corrupt
// replace_prob of the real tokens with random vocabulary ids and train the
// per-token binary head. ConfigError unless 0 < replace_prob < 1.
RtdReport rtd_pretrain(const ModelConfig& mcfg, ParamStore& params, const Vocabulary& vocab,
                       const std::vector<Record>& corpus, std::size_t steps, double replace_prob,
                       const TrainConfig& tcfg);

struct AblationRow {
    std::string label;
    bool failed = false;
    std::string error;
    MetricReport metrics;
};
struct AblationTable {
    std::vector<AblationRow> rows;
    std::string text() const;  // fixed column set: Pearson (%), MSE, F1-Score (%), AUC (%)
};
// The five-stage ablation: encoder_only, +lstm, +attention_pooling,
// +target_shuffling, ensemble (blend of the last two stages). All rows run
// on the same fold split and seed. Worker count respects SIMSCORE_THREADS.
// A non-empty `stages` keeps only the named rows (ensemble still trains
// its two members); unknown names raise ConfigError.
AblationTable run_ablation(const ModelConfig& mcfg, const TrainConfig& tcfg,
                           const std::vector<Record>& records, const FoldAssignment& folds,
                           std::size_t fold_index, const std::vector<std::string>& stages = {});

}  // namespace simscore
