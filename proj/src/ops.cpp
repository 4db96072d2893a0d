#include "simscore/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>

namespace simscore {
namespace ops {

namespace {

bool want_grad(std::initializer_list<const Tensor*> ins) {
    if (!Tape::recording()) return false;
    for (const Tensor* t : ins) {
        if (t->requires_grad()) return true;
    }
    return false;
}

void record(const char* op, std::function<void()> fn) { Tape::current()->record(op, std::move(fn)); }

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da == db || da == 1 || db == 1) {
            out[rank - 1 - i] = std::max(da, db);
        } else {
            throw DimError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcastable");
        }
    }
    return out;
}

// Row-major strides of `s` aligned to the (broader) `out` shape from the
// right; broadcast dimensions get stride 0.
std::vector<std::size_t> aligned_strides(const Shape& s, const Shape& out) {
    std::vector<std::size_t> st(s.size());
    std::size_t acc = 1;
    for (std::size_t d = s.size(); d-- > 0;) {
        st[d] = acc;
        acc *= s[d];
    }
    std::vector<std::size_t> res(out.size(), 0);
    const std::size_t off = out.size() - s.size();
    for (std::size_t d = 0; d < s.size(); ++d) {
        res[off + d] = (s[d] == out[off + d]) ? st[d] : 0;
    }
    return res;
}

template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
    const std::size_t n = shape_numel(out);
    const std::size_t rank = out.size();
    for (std::size_t lin = 0; lin < n; ++lin) {
        std::size_t rem = lin, ia = 0, ib = 0;
        for (std::size_t d = rank; d-- > 0;) {
            const std::size_t coord = rem % out[d];
            rem /= out[d];
            ia += coord * sa[d];
            ib += coord * sb[d];
        }
        f(lin, ia, ib);
    }
}

// Generic broadcasting binary op. `fwd(a,b)` computes the output value,
// `da`/`db` the partials w.r.t. each input evaluated at (a,b).
template <class Fwd, class Da, class Db>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
    const auto sa = aligned_strides(a.shape(), out_shape);
    const auto sb = aligned_strides(b.shape(), out_shape);

    Tensor out(out_shape);
    {
        const auto& av = a.data();
        const auto& bv = b.data();
        auto& ov = out.data();
        for_each_broadcast(out_shape, sa, sb,
                           [&](std::size_t lin, std::size_t ia, std::size_t ib) { ov[lin] = fwd(av[ia], bv[ib]); });
    }

    if (want_grad({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        record(name, [name, ai, bi, oi, out_shape, sa, sb, da, db] {
            if (oi->grad.empty()) return;
            const bool ga = ai->requires_grad;
            const bool gb = bi->requires_grad;
            if (ga) ai->ensure_grad();
            if (gb) bi->ensure_grad();
            for_each_broadcast(out_shape, sa, sb, [&](std::size_t lin, std::size_t ia, std::size_t ib) {
                const double g = oi->grad[lin];
                if (ga) ai->grad[ia] += g * da(ai->data[ia], bi->data[ib]);
                if (gb) bi->grad[ib] += g * db(ai->data[ia], bi->data[ib]);
            });
        });
    }
    return out;
}

template <class Fwd, class Dydx>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Dydx dydx) {
    Tensor out(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i]);

    if (want_grad({&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        record(name, [ai, oi, dydx] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            for (std::size_t i = 0; i < ai->data.size(); ++i) {
                ai->grad[i] += oi->grad[i] * dydx(ai->data[i], oi->data[i]);
            }
        });
    }
    return out;
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// outer/inner decomposition around a reduction axis
struct AxisSplit {
    std::size_t outer, len, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
    AxisSplit r{1, s[axis], 1};
    for (std::size_t d = 0; d < axis; ++d) r.outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) r.inner *= s[d];
    return r;
}

Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdims) {
    Shape out = s;
    if (keepdims) {
        out[axis] = 1;
    } else {
        out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
        if (out.empty()) out.push_back(1);
    }
    return out;
}

void check_axis(const Tensor& a, std::size_t axis, const char* op) {
    if (axis >= a.rank()) {
        throw DimError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                       shape_str(a.shape()));
    }
}

void check_nonempty(const Tensor& a, const char* op) {
    if (a.numel() == 0) {
        throw DomainError(std::string(op) + ": empty tensor");
    }
}

// C[m,n] += A[m,k] * B[k,n], with optional transposes applied to the
// logical operands (dimensions given are post-transpose).
void mm_acc(double* c, const double* a, bool ta, const double* b, bool tb, std::size_t m, std::size_t k,
            std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ta ? a[p * m + i] : a[i * k + p];
            if (tb) {
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
            } else {
                const double* brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& a) {
    return unary_op(
        "neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor tanh(const Tensor& a) {
    return unary_op(
        "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        "sigmoid", a, [](double x) { return stable_sigmoid(x); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (double v : a.data()) {
        if (v <= 0.0) throw DomainError("log: input must be positive");
    }
    return unary_op(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
    for (double v : a.data()) {
        if (v < 0.0) throw DomainError("sqrt: input must be nonnegative");
    }
    return unary_op(
        "sqrt", a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

Tensor scale(const Tensor& a, double c) {
    return unary_op(
        "scale", a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor shift(const Tensor& a, double c) {
    return unary_op(
        "shift", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor clamp_min(const Tensor& a, double c) {
    return unary_op(
        "clamp_min", a, [c](double x) { return x > c ? x : c; },
        [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
    check_nonempty(a, "sum");
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor out = Tensor::scalar(s);
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        record("sum", [ai, oi] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            const double g = oi->grad[0];
            for (double& gv : ai->grad) gv += g;
        });
    }
    return out;
}

Tensor mean(const Tensor& a) {
    check_nonempty(a, "mean");
    const double n = static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor out = Tensor::scalar(s / n);
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        record("mean", [ai, oi, n] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            const double g = oi->grad[0] / n;
            for (double& gv : ai->grad) gv += g;
        });
    }
    return out;
}

Tensor variance(const Tensor& a) {
    check_nonempty(a, "variance");
    const double n = static_cast<double>(a.numel());
    double m = 0.0;
    for (double v : a.data()) m += v;
    m /= n;
    double s = 0.0;
    for (double v : a.data()) s += (v - m) * (v - m);
    Tensor out = Tensor::scalar(s / n);
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        record("variance", [ai, oi, m, n] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            const double g = oi->grad[0];
            for (std::size_t i = 0; i < ai->data.size(); ++i) {
                ai->grad[i] += g * 2.0 * (ai->data[i] - m) / n;
            }
        });
    }
    return out;
}

Tensor sum(const Tensor& a, std::size_t axis, bool keepdims) {
    check_axis(a, axis, "sum");
    check_nonempty(a, "sum");
    const AxisSplit sp = split_axis(a.shape(), axis);
    Tensor out(reduced_shape(a.shape(), axis, keepdims));
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
            double s = 0.0;
            for (std::size_t k = 0; k < sp.len; ++k) s += av[(o * sp.len + k) * sp.inner + i];
            ov[o * sp.inner + i] = s;
        }
    }
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        record("sum_axis", [ai, oi, sp] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            for (std::size_t o = 0; o < sp.outer; ++o) {
                for (std::size_t i = 0; i < sp.inner; ++i) {
                    const double g = oi->grad[o * sp.inner + i];
                    for (std::size_t k = 0; k < sp.len; ++k) ai->grad[(o * sp.len + k) * sp.inner + i] += g;
                }
            }
        });
    }
    return out;
}

Tensor mean(const Tensor& a, std::size_t axis, bool keepdims) {
    check_axis(a, axis, "mean");
    check_nonempty(a, "mean");
    Tensor s = sum(a, axis, keepdims);
    return scale(s, 1.0 / static_cast<double>(a.dim(axis)));
}

Tensor variance(const Tensor& a, std::size_t axis, bool keepdims) {
    check_axis(a, axis, "variance");
    check_nonempty(a, "variance");
    const AxisSplit sp = split_axis(a.shape(), axis);
    Tensor out(reduced_shape(a.shape(), axis, keepdims));
    std::vector<double> means(sp.outer * sp.inner);
    const auto& av = a.data();
    auto& ov = out.data();
    const double n = static_cast<double>(sp.len);
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
            double m = 0.0;
            for (std::size_t k = 0; k < sp.len; ++k) m += av[(o * sp.len + k) * sp.inner + i];
            m /= n;
            double s = 0.0;
            for (std::size_t k = 0; k < sp.len; ++k) {
                const double d = av[(o * sp.len + k) * sp.inner + i] - m;
                s += d * d;
            }
            means[o * sp.inner + i] = m;
            ov[o * sp.inner + i] = s / n;
        }
    }
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        record("variance_axis", [ai, oi, sp, means, n] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            for (std::size_t o = 0; o < sp.outer; ++o) {
                for (std::size_t i = 0; i < sp.inner; ++i) {
                    const double g = oi->grad[o * sp.inner + i];
                    const double m = means[o * sp.inner + i];
                    for (std::size_t k = 0; k < sp.len; ++k) {
                        const std::size_t idx = (o * sp.len + k) * sp.inner + i;
                        ai->grad[idx] += g * 2.0 * (ai->data[idx] - m) / n;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- structure

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    Tensor out(std::move(shape), a.data());
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        record("reshape", [ai, oi] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[i];
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& ts, std::size_t axis) {
    if (ts.empty()) throw DimError("concat: no inputs");
    const std::size_t rank = ts[0].rank();
    check_axis(ts[0], axis, "concat");
    Shape out_shape = ts[0].shape();
    std::size_t total = ts[0].dim(axis);
    for (std::size_t t = 1; t < ts.size(); ++t) {
        if (ts[t].rank() != rank) {
            throw DimError("concat: rank mismatch between " + shape_str(ts[0].shape()) + " and " +
                           shape_str(ts[t].shape()));
        }
        for (std::size_t d = 0; d < rank; ++d) {
            if (d != axis && ts[t].dim(d) != out_shape[d]) {
                throw DimError("concat: shapes " + shape_str(ts[0].shape()) + " and " +
                               shape_str(ts[t].shape()) + " differ off the concat axis");
            }
        }
        total += ts[t].dim(axis);
    }
    out_shape[axis] = total;

    AxisSplit sp = split_axis(out_shape, axis);
    Tensor out(out_shape);
    auto& ov = out.data();
    std::vector<std::size_t> offsets(ts.size());
    std::size_t off = 0;
    for (std::size_t t = 0; t < ts.size(); ++t) {
        offsets[t] = off;
        const std::size_t len = ts[t].dim(axis);
        const auto& av = ts[t].data();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t k = 0; k < len; ++k) {
                const double* src = av.data() + (o * len + k) * sp.inner;
                double* dst = ov.data() + (o * sp.len + off + k) * sp.inner;
                std::copy(src, src + sp.inner, dst);
            }
        }
        off += len;
    }

    bool any = false;
    for (const Tensor& t : ts) any = any || t.requires_grad();
    if (Tape::recording() && any) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorImpl>> ins;
        std::vector<std::size_t> lens;
        for (const Tensor& t : ts) {
            ins.push_back(t.impl());
            lens.push_back(t.dim(axis));
        }
        auto oi = out.impl();
        record("concat", [ins, lens, offsets, oi, sp] {
            if (oi->grad.empty()) return;
            for (std::size_t t = 0; t < ins.size(); ++t) {
                if (!ins[t]->requires_grad) continue;
                ins[t]->ensure_grad();
                for (std::size_t o = 0; o < sp.outer; ++o) {
                    for (std::size_t k = 0; k < lens[t]; ++k) {
                        const double* src = oi->grad.data() + (o * sp.len + offsets[t] + k) * sp.inner;
                        double* dst = ins[t]->grad.data() + (o * lens[t] + k) * sp.inner;
                        for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
                    }
                }
            }
        });
    }
    return out;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
    check_axis(a, axis, "slice");
    if (start + len > a.dim(axis)) {
        throw DimError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                       ") exceeds extent " + std::to_string(a.dim(axis)));
    }
    const AxisSplit sp = split_axis(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape[axis] = len;
    Tensor out(out_shape);
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t k = 0; k < len; ++k) {
            const double* src = av.data() + (o * sp.len + start + k) * sp.inner;
            std::copy(src, src + sp.inner, ov.data() + (o * len + k) * sp.inner);
        }
    }
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        record("slice", [ai, oi, sp, start, len] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            for (std::size_t o = 0; o < sp.outer; ++o) {
                for (std::size_t k = 0; k < len; ++k) {
                    const double* src = oi->grad.data() + (o * len + k) * sp.inner;
                    double* dst = ai->grad.data() + (o * sp.len + start + k) * sp.inner;
                    for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

Tensor transpose_last2(const Tensor& a) {
    if (a.rank() < 2) throw DimError("transpose_last2: rank must be >= 2, got " + shape_str(a.shape()));
    Shape out_shape = a.shape();
    std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
    const std::size_t rows = a.dim(a.rank() - 2);
    const std::size_t cols = a.dim(a.rank() - 1);
    const std::size_t batch = a.numel() / (rows * cols);
    Tensor out(out_shape);
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t b = 0; b < batch; ++b) {
        const double* src = av.data() + b * rows * cols;
        double* dst = ov.data() + b * rows * cols;
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
        }
    }
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        record("transpose_last2", [ai, oi, batch, rows, cols] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            for (std::size_t b = 0; b < batch; ++b) {
                const double* src = oi->grad.data() + b * rows * cols;
                double* dst = ai->grad.data() + b * rows * cols;
                for (std::size_t i = 0; i < rows; ++i) {
                    for (std::size_t j = 0; j < cols; ++j) dst[i * cols + j] += src[j * rows + i];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
    const std::size_t ra = a.rank(), rb = b.rank();
    std::size_t batch = 1, m = 0, k = 0, n = 0;
    bool batched_a = false, batched_b = false;

    if (ra == 2 && rb == 2) {
        m = a.dim(0), k = a.dim(1), n = b.dim(1);
    } else if (ra == 3 && rb == 2) {
        batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
        batched_a = true;
    } else if (ra == 3 && rb == 3) {
        if (a.dim(0) != b.dim(0)) {
            throw DimError("matmul: batch dims disagree, " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
        }
        batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
        batched_a = batched_b = true;
    } else {
        throw DimError("matmul: unsupported ranks " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t bk = batched_b ? b.dim(1) : b.dim(0);
    if (k != bk) {
        throw DimError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    }

    Shape out_shape = batched_a ? Shape{batch, m, n} : Shape{m, n};
    Tensor out(out_shape);
    for (std::size_t bi = 0; bi < batch; ++bi) {
        const double* pa = a.data().data() + (batched_a ? bi * m * k : 0);
        const double* pb = b.data().data() + (batched_b ? bi * k * n : 0);
        mm_acc(out.data().data() + bi * m * n, pa, false, pb, false, m, k, n);
    }

    if (want_grad({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi_ = b.impl(), oi = out.impl();
        record("matmul", [ai, bi_, oi, batch, m, k, n, batched_a, batched_b] {
            if (oi->grad.empty()) return;
            if (ai->requires_grad) ai->ensure_grad();
            if (bi_->requires_grad) bi_->ensure_grad();
            for (std::size_t bt = 0; bt < batch; ++bt) {
                const double* go = oi->grad.data() + bt * m * n;
                const double* pa = ai->data.data() + (batched_a ? bt * m * k : 0);
                const double* pb = bi_->data.data() + (batched_b ? bt * k * n : 0);
                if (ai->requires_grad) {
                    // dA += dOut * B^T
                    mm_acc(ai->grad.data() + (batched_a ? bt * m * k : 0), go, false, pb, true, m, n, k);
                }
                if (bi_->requires_grad) {
                    // dB += A^T * dOut
                    mm_acc(bi_->grad.data() + (batched_b ? bt * k * n : 0), pa, true, go, false, k, m, n);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- softmax

Tensor softmax(const Tensor& a, std::size_t axis) {
    check_axis(a, axis, "softmax");
    check_nonempty(a, "softmax");
    const AxisSplit sp = split_axis(a.shape(), axis);
    Tensor out(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t s = 0; s < sp.len; ++s) mx = std::max(mx, av[(o * sp.len + s) * sp.inner + i]);
            double z = 0.0;
            for (std::size_t s = 0; s < sp.len; ++s) {
                const double e = std::exp(av[(o * sp.len + s) * sp.inner + i] - mx);
                ov[(o * sp.len + s) * sp.inner + i] = e;
                z += e;
            }
            for (std::size_t s = 0; s < sp.len; ++s) ov[(o * sp.len + s) * sp.inner + i] /= z;
        }
    }
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        record("softmax", [ai, oi, sp] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            for (std::size_t o = 0; o < sp.outer; ++o) {
                for (std::size_t i = 0; i < sp.inner; ++i) {
                    double dot = 0.0;
                    for (std::size_t s = 0; s < sp.len; ++s) {
                        const std::size_t idx = (o * sp.len + s) * sp.inner + i;
                        dot += oi->grad[idx] * oi->data[idx];
                    }
                    for (std::size_t s = 0; s < sp.len; ++s) {
                        const std::size_t idx = (o * sp.len + s) * sp.inner + i;
                        ai->grad[idx] += oi->data[idx] * (oi->grad[idx] - dot);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- nn ops

Tensor embedding(const Tensor& table, const std::vector<std::vector<int>>& ids) {
    if (table.rank() != 2) throw DimError("embedding: table must be rank 2, got " + shape_str(table.shape()));
    const std::size_t vocab = table.dim(0), width = table.dim(1);
    const std::size_t batch = ids.size();
    const std::size_t seq = batch == 0 ? 0 : ids[0].size();
    for (const auto& row : ids) {
        if (row.size() != seq) throw DimError("embedding: ragged id rows");
        for (int id : row) {
            if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
                throw VocabError("embedding: token id " + std::to_string(id) + " outside vocabulary of " +
                                 std::to_string(vocab));
            }
        }
    }
    Tensor out(Shape{batch, seq, width});
    auto& ov = out.data();
    const auto& tv = table.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t s = 0; s < seq; ++s) {
            const double* src = tv.data() + static_cast<std::size_t>(ids[b][s]) * width;
            std::copy(src, src + width, ov.data() + (b * seq + s) * width);
        }
    }
    if (want_grad({&table})) {
        out.set_requires_grad(true);
        auto ti = table.impl(), oi = out.impl();
        record("embedding", [ti, oi, ids, batch, seq, width] {
            if (oi->grad.empty()) return;
            ti->ensure_grad();
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t s = 0; s < seq; ++s) {
                    const double* src = oi->grad.data() + (b * seq + s) * width;
                    double* dst = ti->grad.data() + static_cast<std::size_t>(ids[b][s]) * width;
                    for (std::size_t i = 0; i < width; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

Tensor masked_fill(const Tensor& a, const Tensor& mask, double fill) {
    const Shape out_shape = broadcast_shape(a.shape(), mask.shape(), "masked_fill");
    if (out_shape != a.shape()) {
        throw DimError("masked_fill: mask " + shape_str(mask.shape()) + " does not broadcast into " +
                       shape_str(a.shape()));
    }
    const auto sm = aligned_strides(mask.shape(), out_shape);
    const auto sa = aligned_strides(a.shape(), out_shape);
    Tensor out(a.shape());
    const auto& av = a.data();
    const auto& mv = mask.data();
    auto& ov = out.data();
    for_each_broadcast(out_shape, sa, sm, [&](std::size_t lin, std::size_t ia, std::size_t im) {
        ov[lin] = mv[im] != 0.0 ? av[ia] : fill;
    });
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), mi = mask.impl(), oi = out.impl();
        record("masked_fill", [ai, mi, oi, out_shape, sa, sm] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            for_each_broadcast(out_shape, sa, sm, [&](std::size_t lin, std::size_t ia, std::size_t im) {
                if (mi->data[im] != 0.0) ai->grad[ia] += oi->grad[lin];
            });
        });
    }
    return out;
}

Tensor relative_bias(const Tensor& table, std::size_t head, std::size_t seq_len) {
    if (table.rank() != 2) throw DimError("relative_bias: table must be rank 2");
    if (head >= table.dim(0)) throw DimError("relative_bias: head index out of range");
    const std::size_t span = table.dim(1);
    if (span % 2 == 0) throw DimError("relative_bias: table span must be odd");
    const std::ptrdiff_t center = static_cast<std::ptrdiff_t>((span - 1) / 2);

    auto offset_of = [center](std::size_t i, std::size_t j) {
        std::ptrdiff_t rel = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(i);
        rel = std::clamp(rel, -center, center);
        return static_cast<std::size_t>(center + rel);
    };

    Tensor out(Shape{seq_len, seq_len});
    const auto& tv = table.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < seq_len; ++i) {
        for (std::size_t j = 0; j < seq_len; ++j) {
            ov[i * seq_len + j] = tv[head * span + offset_of(i, j)];
        }
    }
    if (want_grad({&table})) {
        out.set_requires_grad(true);
        auto ti = table.impl(), oi = out.impl();
        record("relative_bias", [ti, oi, head, span, seq_len, offset_of] {
            if (oi->grad.empty()) return;
            ti->ensure_grad();
            for (std::size_t i = 0; i < seq_len; ++i) {
                for (std::size_t j = 0; j < seq_len; ++j) {
                    ti->grad[head * span + offset_of(i, j)] += oi->grad[i * seq_len + j];
                }
            }
        });
    }
    return out;
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& labels, const Tensor& mask) {
    if (logits.shape() != labels.shape() || logits.shape() != mask.shape()) {
        throw DimError("bce_with_logits: logits " + shape_str(logits.shape()) + ", labels " +
                       shape_str(labels.shape()) + " and mask " + shape_str(mask.shape()) + " must match");
    }
    double count = 0.0;
    for (double m : mask.data()) count += (m != 0.0) ? 1.0 : 0.0;
    if (count == 0.0) throw DomainError("bce_with_logits: mask selects no elements");

    const auto& zv = logits.data();
    const auto& yv = labels.data();
    const auto& mv = mask.data();
    double total = 0.0;
    for (std::size_t i = 0; i < zv.size(); ++i) {
        if (mv[i] == 0.0) continue;
        const double z = zv[i];
        total += std::max(z, 0.0) - z * yv[i] + std::log1p(std::exp(-std::abs(z)));
    }
    Tensor out = Tensor::scalar(total / count);
    if (want_grad({&logits})) {
        out.set_requires_grad(true);
        auto zi = logits.impl(), yi = labels.impl(), mi = mask.impl(), oi = out.impl();
        record("bce_with_logits", [zi, yi, mi, oi, count] {
            if (oi->grad.empty()) return;
            zi->ensure_grad();
            const double g = oi->grad[0] / count;
            for (std::size_t i = 0; i < zi->data.size(); ++i) {
                if (mi->data[i] == 0.0) continue;
                zi->grad[i] += g * (stable_sigmoid(zi->data[i]) - yi->data[i]);
            }
        });
    }
    return out;
}

}  // namespace ops
}  // namespace simscore
