#include "simscore/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "simscore/ops.hpp"

namespace simscore {

namespace {

void check_pair(const Tensor& pred, const Tensor& target, const char* op) {
    if (pred.shape() != target.shape()) {
        throw DimError(std::string(op) + ": predictions " + shape_str(pred.shape()) +
                       " and targets " + shape_str(target.shape()) + " must match");
    }
    if (pred.numel() < 2) {
        throw DomainError(std::string(op) + ": needs at least 2 elements");
    }
}

void check_pair(const std::vector<double>& pred, const std::vector<double>& target, const char* op) {
    if (pred.size() != target.size()) {
        throw DimError(std::string(op) + ": size mismatch, " + std::to_string(pred.size()) + " vs " +
                       std::to_string(target.size()));
    }
    if (pred.empty()) throw DomainError(std::string(op) + ": empty input");
}

}  // namespace

Tensor pearson_loss(const Tensor& pred, const Tensor& target) {
    check_pair(pred, target, "pearson_loss");
    Tensor dp = ops::sub(pred, ops::mean(pred));
    Tensor dt = ops::sub(target, ops::mean(target));
    Tensor cov = ops::mean(ops::mul(dp, dt));
    // flooring the variance at 1e-16 floors sigma at 1e-8 and keeps the
    // gradient zero (not NaN) through a flat denominator
    Tensor sp = ops::sqrt(ops::clamp_min(ops::variance(pred), 1e-16));
    Tensor st = ops::sqrt(ops::clamp_min(ops::variance(target), 1e-16));
    return ops::neg(ops::div(cov, ops::mul(sp, st)));
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    check_pair(pred, target, "mse_loss");
    Tensor d = ops::sub(pred, target);
    return ops::mean(ops::mul(d, d));
}

Tensor combined_loss(const Tensor& pred, const Tensor& target, double lambda_mse) {
    Tensor p = pearson_loss(pred, target);
    if (lambda_mse == 0.0) return p;
    return ops::add(p, ops::scale(mse_loss(pred, target), lambda_mse));
}

PearsonResult pearson_metric(const std::vector<double>& pred, const std::vector<double>& target) {
    check_pair(pred, target, "pearson_metric");
    const std::size_t n = pred.size();
    double mp = 0.0, mt = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mp += pred[i];
        mt += target[i];
    }
    mp /= static_cast<double>(n);
    mt /= static_cast<double>(n);
    double cov = 0.0, vp = 0.0, vt = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double a = pred[i] - mp, b = target[i] - mt;
        cov += a * b;
        vp += a * a;
        vt += b * b;
    }
    PearsonResult res;
    if (vp == 0.0 || vt == 0.0) return res;
    res.r = cov / std::sqrt(vp * vt);
    res.defined = true;
    return res;
}

double mse_metric(const std::vector<double>& pred, const std::vector<double>& target) {
    check_pair(pred, target, "mse_metric");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - target[i];
        s += d * d;
    }
    return s / static_cast<double>(pred.size());
}

BinaryEval f1_score(const std::vector<double>& pred, const std::vector<double>& target,
                    double threshold) {
    check_pair(pred, target, "f1_score");
    BinaryEval e;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] >= threshold;
        const bool t = target[i] >= threshold;
        if (p && t) ++e.tp;
        else if (p && !t) ++e.fp;
        else if (!p && t) ++e.fn;
        else ++e.tn;
    }
    if (e.tp + e.fp > 0) e.precision = static_cast<double>(e.tp) / static_cast<double>(e.tp + e.fp);
    if (e.tp + e.fn > 0) e.recall = static_cast<double>(e.tp) / static_cast<double>(e.tp + e.fn);
    if (e.precision + e.recall > 0.0) e.f1 = 2.0 * e.precision * e.recall / (e.precision + e.recall);
    return e;
}

AucResult auc_metric(const std::vector<double>& pred, const std::vector<double>& target,
                     double threshold) {
    check_pair(pred, target, "auc_metric");
    const std::size_t n = pred.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return pred[a] < pred[b]; });

    AucResult res;
    std::size_t npos = 0;
    for (double t : target) npos += (t >= threshold) ? 1 : 0;
    const std::size_t nneg = n - npos;
    if (npos == 0 || nneg == 0) return res;

    // average ranks over tie groups, 1-based
    double pos_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && pred[order[j]] == pred[order[i]]) ++j;
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k) {
            if (target[order[k]] >= threshold) pos_rank_sum += avg_rank;
        }
        i = j;
    }
    const double u = pos_rank_sum -
                     static_cast<double>(npos) * (static_cast<double>(npos) + 1.0) / 2.0;
    res.auc = u / (static_cast<double>(npos) * static_cast<double>(nneg));
    res.defined = true;
    return res;
}

std::string MetricReport::text() const {
    std::ostringstream os;
    os << "n=" << n;
    os << " pearson=";
    if (pearson_defined) os << pearson;
    else os << "undefined";
    os << " mse=" << mse << " f1=" << f1 << " auc=";
    if (auc_defined) os << auc;
    else os << "undefined";
    return os.str();
}

MetricReport compute_metrics(const std::vector<double>& pred, const std::vector<double>& target,
                             double threshold) {
    MetricReport r;
    r.n = pred.size();
    const PearsonResult p = pearson_metric(pred, target);
    r.pearson = p.r;
    r.pearson_defined = p.defined;
    r.mse = mse_metric(pred, target);
    r.f1 = f1_score(pred, target, threshold).f1;
    const AucResult a = auc_metric(pred, target, threshold);
    r.auc = a.auc;
    r.auc_defined = a.defined;
    return r;
}

}  // namespace simscore
