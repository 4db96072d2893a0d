#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "simscore/tensor.hpp"

namespace simscore {

struct GradcheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t worst_coord = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coords_checked = 0;
};

struct GradcheckReport {
    std::vector<GradcheckEntry> tensors;
    double max_rel_err = 0.0;
    double tol = 0.0;
    bool pass() const { return max_rel_err <= tol; }
    std::string summary() const;
};

// Compares the tape gradient of the scalar loss returned by `f` against
// central differences on every parameter. `f` must rebuild the forward pass
// on each call and must not open its own TapeScope. With
// max_coords_per_tensor > 0 only a seeded sample of coordinates per tensor
// is perturbed, which keeps whole-model checks affordable. `abs_floor` is
// the denominator floor of the relative error: gradients whose analytic and
// numeric values both sit below it count as matching, since central
// differences on an O(1) loss cannot resolve them.
GradcheckReport gradcheck(const std::function<Tensor()>& f,
                          const std::vector<std::pair<std::string, Tensor>>& params, double eps,
                          double tol, std::size_t max_coords_per_tensor = 0,
                          std::uint64_t sample_seed = 0, double abs_floor = 1e-8);

}  // namespace simscore
