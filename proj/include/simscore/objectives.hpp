#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "simscore/tensor.hpp"

namespace simscore {

// ---- differentiable losses -------------------------------------------------

// Negative Pearson correlation between predictions and targets. Population
// sigmas, each floored at 1e-8 so the loss stays finite and differentiable
// on (near-)constant inputs. Minimum is -1 at perfect correlation.
Tensor pearson_loss(const Tensor& pred, const Tensor& target);

Tensor mse_loss(const Tensor& pred, const Tensor& target);

// pearson_loss + lambda_mse * mse_loss
Tensor combined_loss(const Tensor& pred, const Tensor& target, double lambda_mse);

// ---- evaluation metrics (plain doubles, never on the tape) -----------------

struct PearsonResult {
    double r = 0.0;
    bool defined = false;  // false when either side has zero variance
};

PearsonResult pearson_metric(const std::vector<double>& pred, const std::vector<double>& target);

double mse_metric(const std::vector<double>& pred, const std::vector<double>& target);

struct BinaryEval {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    double precision = 0.0, recall = 0.0, f1 = 0.0;
};

// Both sides binarized at `threshold` (>= is positive). Ratios with an
// empty denominator are reported as 0 rather than NaN.
BinaryEval f1_score(const std::vector<double>& pred, const std::vector<double>& target,
                    double threshold);

struct AucResult {
    double auc = 0.0;
    bool defined = false;  // false unless both classes are present
};

// Mann-Whitney statistic via average ranks; ties count one half. Equals
// exhaustive pair enumeration exactly.
AucResult auc_metric(const std::vector<double>& pred, const std::vector<double>& target,
                     double threshold);

struct MetricReport {
    std::size_t n = 0;
    double pearson = 0.0;
    bool pearson_defined = false;
    double mse = 0.0;
    double f1 = 0.0;
    double auc = 0.0;
    bool auc_defined = false;

    std::string text() const;
};

MetricReport compute_metrics(const std::vector<double>& pred, const std::vector<double>& target,
                             double threshold = 0.5);

}  // namespace simscore
