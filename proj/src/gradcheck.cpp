#include "simscore/gradcheck.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "simscore/errors.hpp"
#include "simscore/rng.hpp"

namespace simscore {

namespace {

double eval_scalar(const std::function<Tensor()>& f) {
    Tensor loss = f();
    const double v = loss.value();
    if (!std::isfinite(v)) throw NumericError("gradcheck: loss is not finite");
    return v;
}

std::vector<std::size_t> pick_coords(std::size_t n, std::size_t max_coords, std::uint64_t seed,
                                     std::size_t tensor_index) {
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords == 0 || max_coords >= n) return coords;
    Rng rng(derive_seed(seed, "gradcheck", tensor_index));
    rng.shuffle(coords);
    coords.resize(max_coords);
    return coords;
}

}  // namespace

std::string GradcheckReport::summary() const {
    std::ostringstream os;
    os << (pass() ? "PASS" : "FAIL") << " max_rel_err=" << max_rel_err << " tol=" << tol;
    for (const auto& e : tensors) {
        os << "\n  " << e.name << ": max_rel_err=" << e.max_rel_err << " at coord " << e.worst_coord
           << " (analytic=" << e.analytic << ", numeric=" << e.numeric << ", checked " << e.coords_checked
           << ")";
    }
    return os.str();
}

GradcheckReport gradcheck(const std::function<Tensor()>& f,
                          const std::vector<std::pair<std::string, Tensor>>& params, double eps,
                          double tol, std::size_t max_coords_per_tensor, std::uint64_t sample_seed,
                          double abs_floor) {
    if (eps <= 0.0) throw ContractError("gradcheck: eps must be positive");
    if (abs_floor <= 0.0) throw ContractError("gradcheck: abs_floor must be positive");
    if (Tape::recording()) throw ContractError("gradcheck: must not run under an active tape");

    for (const auto& [name, t] : params) {
        (void)name;
        t.zero_grad();
    }

    std::vector<std::vector<double>> analytic;
    {
        TapeScope scope;
        Tensor loss = f();
        if (!std::isfinite(loss.value())) throw NumericError("gradcheck: loss is not finite");
        backward(loss);
    }
    for (const auto& [name, t] : params) {
        (void)name;
        analytic.push_back(t.impl()->grad.empty() ? std::vector<double>(t.numel(), 0.0) : t.impl()->grad);
    }

    GradcheckReport report;
    report.tol = tol;
    for (std::size_t p = 0; p < params.size(); ++p) {
        const auto& [name, t] = params[p];
        GradcheckEntry entry;
        entry.name = name;
        auto& data = t.impl()->data;
        const auto coords = pick_coords(data.size(), max_coords_per_tensor, sample_seed, p);
        entry.coords_checked = coords.size();
        for (std::size_t c : coords) {
            const double saved = data[c];
            data[c] = saved + eps;
            const double up = eval_scalar(f);
            data[c] = saved - eps;
            const double down = eval_scalar(f);
            data[c] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[p][c];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), abs_floor});
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_coord = c;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.tensors.push_back(std::move(entry));
    }
    return report;
}

}  // namespace simscore
