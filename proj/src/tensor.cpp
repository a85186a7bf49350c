#include "coopdet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <deque>
#include <numeric>
#include <sstream>

namespace coopdet {

namespace {

thread_local std::vector<Tape*> g_tape_stack;
thread_local MacCounter* g_mac_counter = nullptr;

Precision promote(const Tensor& a, const Tensor& b) {
    return (a.precision() == Precision::f64 || b.precision() == Precision::f64) ? Precision::f64
                                                                                : Precision::f32;
}

void require(bool cond, const char* op, const std::string& msg) {
    if (!cond) throw ShapeError(std::string(op) + ": " + msg);
}

}  // namespace

std::int64_t shape_size(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

// Rounds through f32 when requested and rejects non-finite values; every
// operation funnels its output through here.
Tensor make_result(const char* op, Shape shape, std::vector<double> data, Precision prec,
                   bool requires_grad) {
    if (shape_size(shape) != static_cast<std::int64_t>(data.size()))
        throw ShapeError(std::string(op) + ": data length does not match shape " + shape_str(shape));
    if (prec == Precision::f32)
        for (auto& v : data) v = static_cast<double>(static_cast<float>(v));
    // fast scan: the absolute sum is finite iff no element is NaN/Inf,
    // except for an (astronomically unlikely) overflow of the sum itself,
    // which the exact re-scan below sorts out
    double abs_sum = 0.0;
    for (const double v : data) abs_sum += std::abs(v);
    if (!std::isfinite(abs_sum)) {
        for (const double v : data)
            if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value produced");
    }
    Tensor t;
    t.data_ = std::make_shared<std::vector<double>>(std::move(data));
    t.shape_ = std::move(shape);
    t.prec_ = prec;
    t.requires_grad_ = requires_grad;
    return t;
}

Tensor Tensor::of(Shape shape, std::vector<double> data, Precision prec) {
    return make_result("tensor", std::move(shape), std::move(data), prec, false);
}

Tensor Tensor::zeros(Shape shape, Precision prec) {
    auto n = shape_size(shape);
    return make_result("zeros", std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0),
                       prec, false);
}

Tensor Tensor::full(Shape shape, double value, Precision prec) {
    auto n = shape_size(shape);
    return make_result("full", std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value),
                       prec, false);
}

Tensor Tensor::scalar(double value, Precision prec) { return full({1}, value, prec); }

Tensor Tensor::uniform(Shape shape, double bound, Rng& rng, Precision prec) {
    auto n = shape_size(shape);
    std::vector<double> d(static_cast<std::size_t>(n));
    for (auto& v : d) v = rng.uniform(-bound, bound);
    return make_result("uniform", std::move(shape), std::move(d), prec, false);
}

double Tensor::value() const {
    if (size() != 1) throw ShapeError("value(): tensor is not scalar, shape " + shape_str(shape_));
    return (*data_)[0];
}

// ---- Tape ----

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() {
    if (!g_tape_stack.empty() && g_tape_stack.back() == this) g_tape_stack.pop_back();
}

Tape* Tape::active() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

bool recording(const Tensor& t) { return Tape::active() != nullptr && t.requires_grad(); }

void Tape::record(std::function<void(Tape&)> backward_rule) { ops_.push_back(std::move(backward_rule)); }

std::vector<double>& Tape::slot(const Tensor& t) {
    auto it = slots_.find(t.key());
    if (it == slots_.end()) {
        it = slots_.emplace(t.key(), grads_.size()).first;
        grads_.emplace_back(static_cast<std::size_t>(t.size()), 0.0);
    }
    auto& g = grads_[it->second];
    if (g.size() != static_cast<std::size_t>(t.size()))
        throw ShapeError("tape: gradient slot size mismatch");
    return g;
}

const std::vector<double>* Tape::find_grad(const void* key) const {
    auto it = slots_.find(key);
    return it == slots_.end() ? nullptr : &grads_[it->second];
}

void Tape::accumulate(const Tensor& t, const std::vector<double>& g) {
    accumulate(t, g.data(), static_cast<std::int64_t>(g.size()));
}

void Tape::accumulate(const Tensor& t, const double* g, std::int64_t n) {
    if (n != t.size()) throw ShapeError("tape: gradient length mismatch");
    auto& s = slot(t);
    for (std::int64_t i = 0; i < n; ++i) s[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
}

void Tape::backward(const Tensor& output) {
    if (output.size() != 1) throw ShapeError("backward: output must be scalar");
    if (!output.requires_grad()) throw DomainError("backward: output does not require gradients");
    slot(output)[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)(*this);
}

bool Tape::has_grad(const Tensor& t) const { return find_grad(t.key()) != nullptr; }

Tensor Tape::grad(const Tensor& t) const {
    const auto* g = find_grad(t.key());
    if (!g) return Tensor::zeros(t.shape());
    return Tensor::of(t.shape(), *g);
}

// ---- op helpers ----

namespace {

// One input.
template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& x, Shape out_shape, Fwd fwd, Bwd bwd) {
    Tensor out = make_result(name, std::move(out_shape), fwd(), x.precision(), x.requires_grad());
    if (Tape* tp = Tape::active(); tp != nullptr && out.requires_grad()) {
        tp->record([x, out, bwd](Tape& t) {
            const auto* go = t.find_grad(out.key());
            if (!go) return;
            std::vector<double> gx(static_cast<std::size_t>(x.size()), 0.0);
            bwd(*go, gx);
            t.accumulate(x, gx);
        });
    }
    return out;
}

template <typename F, typename G>
Tensor elementwise(const char* name, const Tensor& x, F f, G df) {
    const auto& xs = x.data();
    std::vector<double> d(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) d[i] = f(xs[i]);
    return unary_op(
        name, x, x.shape(), [&] { return std::move(d); },
        [x, df](const std::vector<double>& go, std::vector<double>& gx) {
            const auto& xs2 = x.data();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = go[i] * df(xs2[i]);
        });
}

}  // namespace

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "add", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> d(a.data().size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] + b.data()[i];
    Tensor out = make_result("add", a.shape(), std::move(d), promote(a, b),
                             a.requires_grad() || b.requires_grad());
    if (Tape* tp = Tape::active(); tp != nullptr && out.requires_grad()) {
        tp->record([a, b, out](Tape& t) {
            const auto* go = t.find_grad(out.key());
            if (!go) return;
            if (a.requires_grad()) t.accumulate(a, *go);
            if (b.requires_grad()) t.accumulate(b, *go);
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "sub", "shape mismatch");
    std::vector<double> d(a.data().size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] - b.data()[i];
    Tensor out = make_result("sub", a.shape(), std::move(d), promote(a, b),
                             a.requires_grad() || b.requires_grad());
    if (Tape* tp = Tape::active(); tp != nullptr && out.requires_grad()) {
        tp->record([a, b, out](Tape& t) {
            const auto* go = t.find_grad(out.key());
            if (!go) return;
            if (a.requires_grad()) t.accumulate(a, *go);
            if (b.requires_grad()) {
                std::vector<double> gb(go->size());
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = -(*go)[i];
                t.accumulate(b, gb);
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul", "shape mismatch");
    std::vector<double> d(a.data().size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] * b.data()[i];
    Tensor out = make_result("mul", a.shape(), std::move(d), promote(a, b),
                             a.requires_grad() || b.requires_grad());
    if (Tape* tp = Tape::active(); tp != nullptr && out.requires_grad()) {
        tp->record([a, b, out](Tape& t) {
            const auto* go = t.find_grad(out.key());
            if (!go) return;
            if (a.requires_grad()) {
                std::vector<double> ga(go->size());
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = (*go)[i] * b.data()[i];
                t.accumulate(a, ga);
            }
            if (b.requires_grad()) {
                std::vector<double> gb(go->size());
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = (*go)[i] * a.data()[i];
                t.accumulate(b, gb);
            }
        });
    }
    return out;
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "maximum", "shape mismatch");
    std::vector<double> d(a.data().size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::max(a.data()[i], b.data()[i]);
    Tensor out = make_result("maximum", a.shape(), std::move(d), promote(a, b),
                             a.requires_grad() || b.requires_grad());
    if (Tape* tp = Tape::active(); tp != nullptr && out.requires_grad()) {
        tp->record([a, b, out](Tape& t) {
            const auto* go = t.find_grad(out.key());
            if (!go) return;
            std::vector<double> ga, gb;
            if (a.requires_grad()) ga.assign(go->size(), 0.0);
            if (b.requires_grad()) gb.assign(go->size(), 0.0);
            for (std::size_t i = 0; i < go->size(); ++i) {
                if (a.data()[i] >= b.data()[i]) {
                    if (!ga.empty()) ga[i] = (*go)[i];
                } else if (!gb.empty()) {
                    gb[i] = (*go)[i];
                }
            }
            if (!ga.empty()) t.accumulate(a, ga);
            if (!gb.empty()) t.accumulate(b, gb);
        });
    }
    return out;
}

Tensor neg(const Tensor& x) {
    return elementwise(
        "neg", x, [](double v) { return -v; }, [](double) { return -1.0; });
}

Tensor add_scalar(const Tensor& x, double c) {
    return elementwise(
        "add_scalar", x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
    return elementwise(
        "mul_scalar", x, [c](double v) { return v * c; }, [c](double) { return c; });
}

Tensor relu(const Tensor& x) {
    return elementwise(
        "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
    auto f = [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); };
    return elementwise("sigmoid", x, f, [f](double v) {
        double s = f(v);
        return s * (1.0 - s);
    });
}

Tensor softplus(const Tensor& x) {
    auto f = [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); };
    auto s = [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); };
    return elementwise("softplus", x, f, s);
}

Tensor log_(const Tensor& x) {
    for (double v : x.data())
        if (v <= 0.0) throw DomainError("log: non-positive input");
    return elementwise(
        "log", x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

Tensor pow_scalar(const Tensor& x, double p) {
    for (double v : x.data())
        if (v < 0.0 && p != std::floor(p)) throw DomainError("pow: negative base with fractional exponent");
    return elementwise(
        "pow", x, [p](double v) { return std::pow(v, p); },
        [p](double v) { return p * std::pow(v, p - 1.0); });
}

Tensor huber(const Tensor& x, double sigma) {
    if (sigma <= 0.0) throw DomainError("huber: sigma must be positive");
    const double s2 = sigma * sigma;
    const double knee = 1.0 / s2;
    return elementwise(
        "huber", x,
        [s2, knee](double v) { return std::abs(v) < knee ? 0.5 * s2 * v * v : std::abs(v) - 0.5 * knee; },
        [s2, knee](double v) { return std::abs(v) < knee ? s2 * v : (v > 0.0 ? 1.0 : -1.0); });
}

// ---- reductions ----

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return unary_op(
        "sum_all", x, {1}, [&] { return std::vector<double>{s}; },
        [](const std::vector<double>& go, std::vector<double>& gx) {
            for (auto& g : gx) g = go[0];
        });
}

Tensor mean_all(const Tensor& x) { return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.size())); }

Tensor row_sum(const Tensor& x) {
    require(x.rank() == 2, "row_sum", "expects a matrix");
    const auto m = x.dim(0), n = x.dim(1);
    std::vector<double> d(static_cast<std::size_t>(m), 0.0);
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) d[static_cast<std::size_t>(i)] += x.at(i * n + j);
    return unary_op(
        "row_sum", x, {m}, [&] { return std::move(d); },
        [m, n](const std::vector<double>& go, std::vector<double>& gx) {
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j)
                    gx[static_cast<std::size_t>(i * n + j)] = go[static_cast<std::size_t>(i)];
        });
}

Tensor col_max(const Tensor& x) {
    require(x.rank() == 2, "col_max", "expects a matrix");
    const auto m = x.dim(0), n = x.dim(1);
    std::vector<double> d(static_cast<std::size_t>(n));
    std::vector<std::int64_t> arg(static_cast<std::size_t>(n), 0);
    for (std::int64_t j = 0; j < n; ++j) {
        double best = x.at(j);
        std::int64_t bi = 0;
        for (std::int64_t i = 1; i < m; ++i) {
            double v = x.at(i * n + j);
            if (v > best) {
                best = v;
                bi = i;
            }
        }
        d[static_cast<std::size_t>(j)] = best;
        arg[static_cast<std::size_t>(j)] = bi;
    }
    return unary_op(
        "col_max", x, {n}, [&] { return std::move(d); },
        [n, arg](const std::vector<double>& go, std::vector<double>& gx) {
            for (std::int64_t j = 0; j < n; ++j)
                gx[static_cast<std::size_t>(arg[static_cast<std::size_t>(j)] * n + j)] +=
                    go[static_cast<std::size_t>(j)];
        });
}

Tensor segment_max_rows(const Tensor& x, const std::vector<std::int64_t>& offsets) {
    require(x.rank() == 2, "segment_max", "expects a matrix");
    require(offsets.size() >= 2 && offsets.front() == 0 && offsets.back() == x.dim(0), "segment_max",
            "offsets must start at 0 and end at the row count");
    const auto p = static_cast<std::int64_t>(offsets.size()) - 1;
    const auto n = x.dim(1);
    std::vector<double> d(static_cast<std::size_t>(p * n));
    std::vector<std::int64_t> arg(static_cast<std::size_t>(p * n));
    for (std::int64_t s = 0; s < p; ++s) {
        const auto lo = offsets[static_cast<std::size_t>(s)];
        const auto hi = offsets[static_cast<std::size_t>(s) + 1];
        if (hi <= lo) throw ShapeError("segment_max: empty segment");
        for (std::int64_t j = 0; j < n; ++j) {
            double best = x.at(lo * n + j);
            std::int64_t bi = lo;
            for (std::int64_t i = lo + 1; i < hi; ++i) {
                const double v = x.at(i * n + j);
                if (v > best) {
                    best = v;
                    bi = i;
                }
            }
            d[static_cast<std::size_t>(s * n + j)] = best;
            arg[static_cast<std::size_t>(s * n + j)] = bi;
        }
    }
    return unary_op(
        "segment_max", x, {p, n}, [&] { return std::move(d); },
        [n, arg = std::move(arg)](const std::vector<double>& go, std::vector<double>& gx) {
            for (std::size_t i = 0; i < go.size(); ++i)
                gx[static_cast<std::size_t>(arg[i] * n + static_cast<std::int64_t>(i % static_cast<std::size_t>(n)))] += go[i];
        });
}

Tensor global_avg_pool(const Tensor& x) {
    require(x.rank() == 3, "global_avg_pool", "expects (C,H,W)");
    const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const double inv = 1.0 / static_cast<double>(h * w);
    std::vector<double> d(static_cast<std::size_t>(c), 0.0);
    for (std::int64_t ci = 0; ci < c; ++ci) {
        double s = 0.0;
        for (std::int64_t i = 0; i < h * w; ++i) s += x.at(ci * h * w + i);
        d[static_cast<std::size_t>(ci)] = s * inv;
    }
    return unary_op(
        "global_avg_pool", x, {c}, [&] { return std::move(d); },
        [c, h, w, inv](const std::vector<double>& go, std::vector<double>& gx) {
            for (std::int64_t ci = 0; ci < c; ++ci)
                for (std::int64_t i = 0; i < h * w; ++i)
                    gx[static_cast<std::size_t>(ci * h * w + i)] = go[static_cast<std::size_t>(ci)] * inv;
        });
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul", "expects matrices");
    const auto m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    require(k == k2, "matmul",
            "inner extents differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> d(static_cast<std::size_t>(m * n), 0.0);
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double av = ad[static_cast<std::size_t>(i * k + kk)];
            const std::size_t brow = static_cast<std::size_t>(kk * n);
            const std::size_t orow = static_cast<std::size_t>(i * n);
            for (std::int64_t j = 0; j < n; ++j) d[orow + static_cast<std::size_t>(j)] += av * bd[brow + static_cast<std::size_t>(j)];
        }
    }
    if (g_mac_counter != nullptr) g_mac_counter->macs += static_cast<std::uint64_t>(m) * static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(k);
    Tensor out = make_result("matmul", {m, n}, std::move(d), promote(a, b),
                             a.requires_grad() || b.requires_grad());
    if (Tape* tp = Tape::active(); tp != nullptr && out.requires_grad()) {
        tp->record([a, b, out, m, k, n](Tape& t) {
            const auto* go = t.find_grad(out.key());
            if (!go) return;
            if (a.requires_grad()) {
                // dA = dOut * B^T, contiguous inner loops
                std::vector<double> ga(static_cast<std::size_t>(m * k), 0.0);
                const double* gd = go->data();
                const double* bd = b.data().data();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t kk = 0; kk < k; ++kk) {
                        double s = 0.0;
                        const double* gr = gd + i * n;
                        const double* br = bd + kk * n;
                        for (std::int64_t j = 0; j < n; ++j) s += gr[j] * br[j];
                        ga[static_cast<std::size_t>(i * k + kk)] = s;
                    }
                t.accumulate(a, ga);
            }
            if (b.requires_grad()) {
                // dB = A^T * dOut
                std::vector<double> gb(static_cast<std::size_t>(k * n), 0.0);
                const double* gd = go->data();
                const double* ad = a.data().data();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t kk = 0; kk < k; ++kk) {
                        const double av = ad[i * k + kk];
                        if (av == 0.0) continue;
                        double* gbr = gb.data() + kk * n;
                        const double* gr = gd + i * n;
                        for (std::int64_t j = 0; j < n; ++j) gbr[j] += av * gr[j];
                    }
                t.accumulate(b, gb);
            }
        });
    }
    return out;
}

Tensor transpose2d(const Tensor& x) {
    require(x.rank() == 2, "transpose", "expects a matrix");
    const auto m = x.dim(0), n = x.dim(1);
    std::vector<double> d(static_cast<std::size_t>(m * n));
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) d[static_cast<std::size_t>(j * m + i)] = x.at(i * n + j);
    return unary_op(
        "transpose", x, {n, m}, [&] { return std::move(d); },
        [m, n](const std::vector<double>& go, std::vector<double>& gx) {
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j)
                    gx[static_cast<std::size_t>(i * n + j)] = go[static_cast<std::size_t>(j * m + i)];
        });
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    require(x.rank() == 2 && b.rank() == 1 && b.dim(0) == x.dim(1), "add_rowvec",
            "expects (m,n) plus (n)");
    const auto m = x.dim(0), n = x.dim(1);
    std::vector<double> d(static_cast<std::size_t>(m * n));
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) d[static_cast<std::size_t>(i * n + j)] = x.at(i * n + j) + b.at(j);
    Tensor out = make_result("add_rowvec", x.shape(), std::move(d), promote(x, b),
                             x.requires_grad() || b.requires_grad());
    if (Tape* tp = Tape::active(); tp != nullptr && out.requires_grad()) {
        tp->record([x, b, out, m, n](Tape& t) {
            const auto* go = t.find_grad(out.key());
            if (!go) return;
            if (x.requires_grad()) t.accumulate(x, *go);
            if (b.requires_grad()) {
                std::vector<double> gb(static_cast<std::size_t>(n), 0.0);
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j) gb[static_cast<std::size_t>(j)] += (*go)[static_cast<std::size_t>(i * n + j)];
                t.accumulate(b, gb);
            }
        });
    }
    return out;
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
    require(x.rank() == 2 && s.rank() == 1 && s.dim(0) == x.dim(0), "scale_rows",
            "expects (m,n) scaled by (m)");
    const auto m = x.dim(0), n = x.dim(1);
    std::vector<double> d(static_cast<std::size_t>(m * n));
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) d[static_cast<std::size_t>(i * n + j)] = x.at(i * n + j) * s.at(i);
    Tensor out = make_result("scale_rows", x.shape(), std::move(d), promote(x, s),
                             x.requires_grad() || s.requires_grad());
    if (Tape* tp = Tape::active(); tp != nullptr && out.requires_grad()) {
        tp->record([x, s, out, m, n](Tape& t) {
            const auto* go = t.find_grad(out.key());
            if (!go) return;
            if (x.requires_grad()) {
                std::vector<double> gx(static_cast<std::size_t>(m * n));
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j)
                        gx[static_cast<std::size_t>(i * n + j)] = (*go)[static_cast<std::size_t>(i * n + j)] * s.at(i);
                t.accumulate(x, gx);
            }
            if (s.requires_grad()) {
                std::vector<double> gs(static_cast<std::size_t>(m), 0.0);
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j)
                        gs[static_cast<std::size_t>(i)] += (*go)[static_cast<std::size_t>(i * n + j)] * x.at(i * n + j);
                t.accumulate(s, gs);
            }
        });
    }
    return out;
}

// ---- shape and data movement ----

Tensor reshape(const Tensor& x, Shape shape) {
    require(shape_size(shape) == x.size(), "reshape",
            "size mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
    Tensor out = x;  // shares the buffer; gradient slots are keyed per buffer
    out.shape_ = std::move(shape);
    return out;
}

Tensor gather_flat(const Tensor& x, const std::vector<std::int64_t>& idx, Shape out_shape) {
    require(shape_size(out_shape) == static_cast<std::int64_t>(idx.size()), "gather",
            "index count does not match output shape");
    std::vector<double> d(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= x.size()) throw ShapeError("gather: index out of range");
        d[i] = x.at(idx[i]);
    }
    // shared table: gather indices can be map-sized, no per-closure copies
    auto table = std::make_shared<const std::vector<std::int64_t>>(idx);
    return unary_op(
        "gather", x, std::move(out_shape), [&] { return std::move(d); },
        [table](const std::vector<double>& go, std::vector<double>& gx) {
            const auto& ix = *table;
            for (std::size_t i = 0; i < ix.size(); ++i) gx[static_cast<std::size_t>(ix[i])] += go[i];
        });
}

namespace {

Tensor concat_impl(const char* name, const std::vector<Tensor>& xs, const Shape& out_shape,
                   std::vector<std::vector<std::int64_t>>&& placement_in) {
    bool req = false;
    Precision prec = Precision::f32;
    for (const auto& x : xs) {
        req = req || x.requires_grad();
        if (x.precision() == Precision::f64) prec = Precision::f64;
    }
    auto placement = std::make_shared<const std::vector<std::vector<std::int64_t>>>(std::move(placement_in));
    std::vector<double> d(static_cast<std::size_t>(shape_size(out_shape)), 0.0);
    for (std::size_t xi = 0; xi < xs.size(); ++xi)
        for (std::int64_t i = 0; i < xs[xi].size(); ++i)
            d[static_cast<std::size_t>((*placement)[xi][static_cast<std::size_t>(i)])] = xs[xi].at(i);
    Tensor out = make_result(name, out_shape, std::move(d), prec, req);
    if (Tape* tp = Tape::active(); tp != nullptr && out.requires_grad()) {
        tp->record([xs, out, placement](Tape& t) {
            const auto* go = t.find_grad(out.key());
            if (!go) return;
            for (std::size_t xi = 0; xi < xs.size(); ++xi) {
                if (!xs[xi].requires_grad()) continue;
                std::vector<double> gx(static_cast<std::size_t>(xs[xi].size()));
                for (std::int64_t i = 0; i < xs[xi].size(); ++i)
                    gx[static_cast<std::size_t>(i)] = (*go)[static_cast<std::size_t>((*placement)[xi][static_cast<std::size_t>(i)])];
                t.accumulate(xs[xi], gx);
            }
        });
    }
    return out;
}

}  // namespace

Tensor concat_cols(const std::vector<Tensor>& xs) {
    require(!xs.empty(), "concat_cols", "needs at least one input");
    const auto m = xs[0].rank() == 1 ? xs[0].dim(0) : xs[0].dim(0);
    std::int64_t total = 0;
    for (const auto& x : xs) {
        require(x.rank() == 1 || x.rank() == 2, "concat_cols", "expects vectors or matrices");
        require(x.dim(0) == m, "concat_cols", "row count mismatch");
        total += x.rank() == 1 ? 1 : x.dim(1);
    }
    std::vector<std::vector<std::int64_t>> placement(xs.size());
    std::int64_t col = 0;
    for (std::size_t xi = 0; xi < xs.size(); ++xi) {
        const std::int64_t ci = xs[xi].rank() == 1 ? 1 : xs[xi].dim(1);
        placement[xi].resize(static_cast<std::size_t>(m * ci));
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < ci; ++j)
                placement[xi][static_cast<std::size_t>(i * ci + j)] = i * total + col + j;
        col += ci;
    }
    return concat_impl("concat_cols", xs, {m, total}, std::move(placement));
}

Tensor concat_rows(const std::vector<Tensor>& xs) {
    require(!xs.empty(), "concat_rows", "needs at least one input");
    const auto n = xs[0].dim(1);
    std::int64_t total = 0;
    for (const auto& x : xs) {
        require(x.rank() == 2 && x.dim(1) == n, "concat_rows", "column count mismatch");
        total += x.dim(0);
    }
    std::vector<std::vector<std::int64_t>> placement(xs.size());
    std::int64_t row = 0;
    for (std::size_t xi = 0; xi < xs.size(); ++xi) {
        placement[xi].resize(static_cast<std::size_t>(xs[xi].size()));
        for (std::int64_t i = 0; i < xs[xi].size(); ++i) placement[xi][static_cast<std::size_t>(i)] = row * n + i;
        row += xs[xi].dim(0);
    }
    return concat_impl("concat_rows", xs, {total, n}, std::move(placement));
}

Tensor stack_rows(const std::vector<Tensor>& xs) {
    require(!xs.empty(), "stack_rows", "needs at least one input");
    const auto n = xs[0].dim(0);
    std::vector<std::vector<std::int64_t>> placement(xs.size());
    for (std::size_t xi = 0; xi < xs.size(); ++xi) {
        require(xs[xi].rank() == 1 && xs[xi].dim(0) == n, "stack_rows", "expects equal-length vectors");
        placement[xi].resize(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) placement[xi][static_cast<std::size_t>(i)] = static_cast<std::int64_t>(xi) * n + i;
    }
    return concat_impl("stack_rows", xs, {static_cast<std::int64_t>(xs.size()), n}, std::move(placement));
}

Tensor concat_channels(const std::vector<Tensor>& xs) {
    require(!xs.empty(), "concat_channels", "needs at least one input");
    const auto h = xs[0].dim(1), w = xs[0].dim(2);
    std::int64_t total = 0;
    for (const auto& x : xs) {
        require(x.rank() == 3 && x.dim(1) == h && x.dim(2) == w, "concat_channels",
                "spatial extents mismatch");
        total += x.dim(0);
    }
    std::vector<std::vector<std::int64_t>> placement(xs.size());
    std::int64_t c0 = 0;
    for (std::size_t xi = 0; xi < xs.size(); ++xi) {
        placement[xi].resize(static_cast<std::size_t>(xs[xi].size()));
        for (std::int64_t i = 0; i < xs[xi].size(); ++i) placement[xi][static_cast<std::size_t>(i)] = c0 * h * w + i;
        c0 += xs[xi].dim(0);
    }
    return concat_impl("concat_channels", xs, {total, h, w}, std::move(placement));
}

// ---- softmax ----

Tensor softmax_lastdim(const Tensor& x) {
    require(x.rank() >= 1, "softmax", "expects rank >= 1");
    const auto n = x.shape().back();
    require(n >= 1, "softmax", "empty last dimension");
    const auto rows = x.size() / n;
    std::vector<double> d(static_cast<std::size_t>(x.size()));
    for (std::int64_t r = 0; r < rows; ++r) {
        const std::int64_t base = r * n;
        double mx = x.at(base);
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, x.at(base + j));
        double sum = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
            const double e = std::exp(x.at(base + j) - mx);
            d[static_cast<std::size_t>(base + j)] = e;
            sum += e;
        }
        for (std::int64_t j = 0; j < n; ++j) d[static_cast<std::size_t>(base + j)] /= sum;
    }
    Tensor out = make_result("softmax", x.shape(), std::move(d), x.precision(), x.requires_grad());
    if (Tape* tp = Tape::active(); tp != nullptr && out.requires_grad()) {
        tp->record([x, out, rows, n](Tape& t) {
            const auto* go = t.find_grad(out.key());
            if (!go) return;
            std::vector<double> gx(static_cast<std::size_t>(x.size()));
            for (std::int64_t r = 0; r < rows; ++r) {
                const std::int64_t base = r * n;
                double dot = 0.0;
                for (std::int64_t j = 0; j < n; ++j)
                    dot += (*go)[static_cast<std::size_t>(base + j)] * out.at(base + j);
                for (std::int64_t j = 0; j < n; ++j)
                    gx[static_cast<std::size_t>(base + j)] =
                        out.at(base + j) * ((*go)[static_cast<std::size_t>(base + j)] - dot);
            }
            t.accumulate(x, gx);
        });
    }
    return out;
}

// ---- spatial ----

std::int64_t same_pad(std::int64_t kernel, std::int64_t dilation) {
    if (kernel % 2 == 0) throw DomainError("same padding requires an odd kernel extent");
    return dilation * (kernel - 1) / 2;
}

Tensor conv2d(const Tensor& x, const Tensor& k, const Conv2dSpec& spec) {
    require(x.rank() == 3, "conv2d", "input must be (C,H,W)");
    require(k.rank() == 4, "conv2d", "kernel must be (O,C,kh,kw)");
    require(x.dim(0) == k.dim(1), "conv2d",
            "channel mismatch: input " + shape_str(x.shape()) + " kernel " + shape_str(k.shape()));
    if (spec.stride < 1 || spec.dilation < 1 || spec.pad < 0) throw DomainError("conv2d: bad stride/dilation/pad");
    const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const auto o = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    const auto span_h = spec.dilation * (kh - 1) + 1;
    const auto span_w = spec.dilation * (kw - 1) + 1;
    const auto ho = (h + 2 * spec.pad - span_h) / spec.stride + 1;
    const auto wo = (w + 2 * spec.pad - span_w) / spec.stride + 1;
    require(ho >= 1 && wo >= 1, "conv2d", "output would be empty");

    std::vector<double> d(static_cast<std::size_t>(o * ho * wo), 0.0);
    const double* xd = x.data().data();
    const double* kd = k.data().data();
    if (kh == 1 && kw == 1 && spec.pad == 0 && spec.stride == 1) {
        // pointwise convolution: a channel-mixing matmul over contiguous maps
        const std::int64_t hw = h * w;
        for (std::int64_t oc = 0; oc < o; ++oc) {
            double* orow = d.data() + oc * hw;
            for (std::int64_t ic = 0; ic < c; ++ic) {
                const double kv = kd[oc * c + ic];
                if (kv == 0.0) continue;
                const double* xrow = xd + ic * hw;
                for (std::int64_t i = 0; i < hw; ++i) orow[i] += kv * xrow[i];
            }
        }
        Tensor out = make_result("conv2d", {o, ho, wo}, std::move(d), promote(x, k),
                                 x.requires_grad() || k.requires_grad());
        if (Tape* tp = Tape::active(); tp != nullptr && out.requires_grad()) {
            tp->record([x, k, out, c, o, hw](Tape& t) {
                const auto* go = t.find_grad(out.key());
                if (!go) return;
                if (x.requires_grad()) {
                    std::vector<double> gx(static_cast<std::size_t>(x.size()), 0.0);
                    for (std::int64_t oc = 0; oc < o; ++oc)
                        for (std::int64_t ic = 0; ic < c; ++ic) {
                            const double kv = k.data()[static_cast<std::size_t>(oc * c + ic)];
                            if (kv == 0.0) continue;
                            const double* gr = go->data() + oc * hw;
                            double* gxr = gx.data() + ic * hw;
                            for (std::int64_t i = 0; i < hw; ++i) gxr[i] += kv * gr[i];
                        }
                    t.accumulate(x, gx);
                }
                if (k.requires_grad()) {
                    std::vector<double> gk(static_cast<std::size_t>(k.size()), 0.0);
                    for (std::int64_t oc = 0; oc < o; ++oc)
                        for (std::int64_t ic = 0; ic < c; ++ic) {
                            const double* gr = go->data() + oc * hw;
                            const double* xr = x.data().data() + ic * hw;
                            double s = 0.0;
                            for (std::int64_t i = 0; i < hw; ++i) s += gr[i] * xr[i];
                            gk[static_cast<std::size_t>(oc * c + ic)] = s;
                        }
                    t.accumulate(k, gk);
                }
            });
        }
        return out;
    }
    for (std::int64_t oc = 0; oc < o; ++oc) {
        const double* kroot = kd + oc * c * kh * kw;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
            const std::int64_t iy0 = oy * spec.stride - spec.pad;
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                const std::int64_t ix0 = ox * spec.stride - spec.pad;
                double acc = 0.0;
                const bool interior = iy0 >= 0 && ix0 >= 0 && iy0 + spec.dilation * (kh - 1) < h &&
                                      ix0 + spec.dilation * (kw - 1) < w;
                if (interior && kh == 3 && kw == 3 && spec.dilation == 1) {
                    for (std::int64_t ic = 0; ic < c; ++ic) {
                        const double* xr = xd + (ic * h + iy0) * w + ix0;
                        const double* kr = kroot + ic * 9;
                        acc += xr[0] * kr[0] + xr[1] * kr[1] + xr[2] * kr[2];
                        xr += w;
                        acc += xr[0] * kr[3] + xr[1] * kr[4] + xr[2] * kr[5];
                        xr += w;
                        acc += xr[0] * kr[6] + xr[1] * kr[7] + xr[2] * kr[8];
                    }
                } else if (interior) {
                    for (std::int64_t ic = 0; ic < c; ++ic) {
                        const double* xroot = xd + (ic * h + iy0) * w + ix0;
                        const double* kr = kroot + ic * kh * kw;
                        for (std::int64_t ky = 0; ky < kh; ++ky) {
                            const double* xr = xroot + ky * spec.dilation * w;
                            const double* krr = kr + ky * kw;
                            for (std::int64_t kx = 0; kx < kw; ++kx)
                                acc += xr[kx * spec.dilation] * krr[kx];
                        }
                    }
                } else {
                    for (std::int64_t ic = 0; ic < c; ++ic) {
                        for (std::int64_t ky = 0; ky < kh; ++ky) {
                            const std::int64_t iy = iy0 + ky * spec.dilation;
                            if (iy < 0 || iy >= h) continue;
                            for (std::int64_t kx = 0; kx < kw; ++kx) {
                                const std::int64_t ix = ix0 + kx * spec.dilation;
                                if (ix < 0 || ix >= w) continue;
                                acc += xd[(ic * h + iy) * w + ix] * kroot[(ic * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
                d[static_cast<std::size_t>((oc * ho + oy) * wo + ox)] = acc;
            }
        }
    }
    Tensor out = make_result("conv2d", {o, ho, wo}, std::move(d), promote(x, k),
                             x.requires_grad() || k.requires_grad());
    if (Tape* tp = Tape::active(); tp != nullptr && out.requires_grad()) {
        tp->record([x, k, out, spec, c, h, w, o, kh, kw, ho, wo](Tape& t) {
            const auto* go = t.find_grad(out.key());
            if (!go) return;
            std::vector<double> gx;
            std::vector<double> gk;
            if (x.requires_grad()) gx.assign(static_cast<std::size_t>(x.size()), 0.0);
            if (k.requires_grad()) gk.assign(static_cast<std::size_t>(k.size()), 0.0);
            const double* xd = x.data().data();
            const double* kd = k.data().data();
            for (std::int64_t oc = 0; oc < o; ++oc) {
                const double* kroot = kd + oc * c * kh * kw;
                double* gkroot = gk.empty() ? nullptr : gk.data() + oc * c * kh * kw;
                for (std::int64_t oy = 0; oy < ho; ++oy) {
                    const std::int64_t iy0 = oy * spec.stride - spec.pad;
                    for (std::int64_t ox = 0; ox < wo; ++ox) {
                        const double g = (*go)[static_cast<std::size_t>((oc * ho + oy) * wo + ox)];
                        if (g == 0.0) continue;
                        const std::int64_t ix0 = ox * spec.stride - spec.pad;
                        const bool interior = iy0 >= 0 && ix0 >= 0 &&
                                              iy0 + spec.dilation * (kh - 1) < h &&
                                              ix0 + spec.dilation * (kw - 1) < w;
                        if (interior && kh == 3 && kw == 3 && spec.dilation == 1 && !gx.empty() &&
                            gkroot != nullptr) {
                            for (std::int64_t ic = 0; ic < c; ++ic) {
                                double* gxr = gx.data() + (ic * h + iy0) * w + ix0;
                                const double* xr = xd + (ic * h + iy0) * w + ix0;
                                const double* kr = kroot + ic * 9;
                                double* gkr = gkroot + ic * 9;
                                for (int ky = 0; ky < 3; ++ky) {
                                    gxr[0] += g * kr[0];
                                    gxr[1] += g * kr[1];
                                    gxr[2] += g * kr[2];
                                    gkr[0] += g * xr[0];
                                    gkr[1] += g * xr[1];
                                    gkr[2] += g * xr[2];
                                    gxr += w;
                                    xr += w;
                                    kr += 3;
                                    gkr += 3;
                                }
                            }
                        } else if (interior) {
                            for (std::int64_t ic = 0; ic < c; ++ic) {
                                const std::int64_t xbase = (ic * h + iy0) * w + ix0;
                                const std::int64_t kbase = ic * kh * kw;
                                for (std::int64_t ky = 0; ky < kh; ++ky) {
                                    const std::int64_t xrow = xbase + ky * spec.dilation * w;
                                    const std::int64_t krow = kbase + ky * kw;
                                    for (std::int64_t kx = 0; kx < kw; ++kx) {
                                        const std::int64_t xi = xrow + kx * spec.dilation;
                                        if (!gx.empty()) gx[static_cast<std::size_t>(xi)] += g * kroot[krow + kx];
                                        if (gkroot != nullptr) gkroot[krow + kx] += g * xd[xi];
                                    }
                                }
                            }
                        } else {
                            for (std::int64_t ic = 0; ic < c; ++ic) {
                                for (std::int64_t ky = 0; ky < kh; ++ky) {
                                    const std::int64_t iy = iy0 + ky * spec.dilation;
                                    if (iy < 0 || iy >= h) continue;
                                    for (std::int64_t kx = 0; kx < kw; ++kx) {
                                        const std::int64_t ix = ix0 + kx * spec.dilation;
                                        if (ix < 0 || ix >= w) continue;
                                        const std::int64_t xi = (ic * h + iy) * w + ix;
                                        const std::int64_t ki = (ic * kh + ky) * kw + kx;
                                        if (!gx.empty()) gx[static_cast<std::size_t>(xi)] += g * kroot[ki];
                                        if (gkroot != nullptr) gkroot[ki] += g * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if (!gx.empty()) t.accumulate(x, gx);
            if (!gk.empty()) t.accumulate(k, gk);
        });
    }
    return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    require(x.rank() == 3 && b.rank() == 1 && b.dim(0) == x.dim(0), "add_channel_bias",
            "expects (C,H,W) plus (C)");
    const auto c = x.dim(0), hw = x.dim(1) * x.dim(2);
    std::vector<double> d(static_cast<std::size_t>(x.size()));
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t i = 0; i < hw; ++i) d[static_cast<std::size_t>(ci * hw + i)] = x.at(ci * hw + i) + b.at(ci);
    Tensor out = make_result("add_channel_bias", x.shape(), std::move(d), promote(x, b),
                             x.requires_grad() || b.requires_grad());
    if (Tape* tp = Tape::active(); tp != nullptr && out.requires_grad()) {
        tp->record([x, b, out, c, hw](Tape& t) {
            const auto* go = t.find_grad(out.key());
            if (!go) return;
            if (x.requires_grad()) t.accumulate(x, *go);
            if (b.requires_grad()) {
                std::vector<double> gb(static_cast<std::size_t>(c), 0.0);
                for (std::int64_t ci = 0; ci < c; ++ci)
                    for (std::int64_t i = 0; i < hw; ++i) gb[static_cast<std::size_t>(ci)] += (*go)[static_cast<std::size_t>(ci * hw + i)];
                t.accumulate(b, gb);
            }
        });
    }
    return out;
}

Tensor channel_scale(const Tensor& x, const Tensor& g) {
    require(x.rank() == 3 && g.rank() == 1 && g.dim(0) == x.dim(0), "channel_scale",
            "expects (C,H,W) scaled by (C)");
    const auto c = x.dim(0), hw = x.dim(1) * x.dim(2);
    std::vector<double> d(static_cast<std::size_t>(x.size()));
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t i = 0; i < hw; ++i) d[static_cast<std::size_t>(ci * hw + i)] = x.at(ci * hw + i) * g.at(ci);
    Tensor out = make_result("channel_scale", x.shape(), std::move(d), promote(x, g),
                             x.requires_grad() || g.requires_grad());
    if (Tape* tp = Tape::active(); tp != nullptr && out.requires_grad()) {
        tp->record([x, g, out, c, hw](Tape& t) {
            const auto* go = t.find_grad(out.key());
            if (!go) return;
            if (x.requires_grad()) {
                std::vector<double> gx(static_cast<std::size_t>(x.size()));
                for (std::int64_t ci = 0; ci < c; ++ci)
                    for (std::int64_t i = 0; i < hw; ++i)
                        gx[static_cast<std::size_t>(ci * hw + i)] = (*go)[static_cast<std::size_t>(ci * hw + i)] * g.at(ci);
                t.accumulate(x, gx);
            }
            if (g.requires_grad()) {
                std::vector<double> gg(static_cast<std::size_t>(c), 0.0);
                for (std::int64_t ci = 0; ci < c; ++ci)
                    for (std::int64_t i = 0; i < hw; ++i)
                        gg[static_cast<std::size_t>(ci)] += (*go)[static_cast<std::size_t>(ci * hw + i)] * x.at(ci * hw + i);
                t.accumulate(g, gg);
            }
        });
    }
    return out;
}

Tensor scale_spatial(const Tensor& x, const Tensor& w) {
    require(x.rank() == 3 && w.rank() == 2 && w.dim(0) == x.dim(1) && w.dim(1) == x.dim(2),
            "scale_spatial", "expects (C,H,W) scaled by (H,W)");
    const auto c = x.dim(0), hw = x.dim(1) * x.dim(2);
    std::vector<double> d(static_cast<std::size_t>(x.size()));
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t i = 0; i < hw; ++i) d[static_cast<std::size_t>(ci * hw + i)] = x.at(ci * hw + i) * w.at(i);
    Tensor out = make_result("scale_spatial", x.shape(), std::move(d), promote(x, w),
                             x.requires_grad() || w.requires_grad());
    if (Tape* tp = Tape::active(); tp != nullptr && out.requires_grad()) {
        tp->record([x, w, out, c, hw](Tape& t) {
            const auto* go = t.find_grad(out.key());
            if (!go) return;
            if (x.requires_grad()) {
                std::vector<double> gx(static_cast<std::size_t>(x.size()));
                for (std::int64_t ci = 0; ci < c; ++ci)
                    for (std::int64_t i = 0; i < hw; ++i)
                        gx[static_cast<std::size_t>(ci * hw + i)] = (*go)[static_cast<std::size_t>(ci * hw + i)] * w.at(i);
                t.accumulate(x, gx);
            }
            if (w.requires_grad()) {
                std::vector<double> gw(static_cast<std::size_t>(hw), 0.0);
                for (std::int64_t ci = 0; ci < c; ++ci)
                    for (std::int64_t i = 0; i < hw; ++i)
                        gw[static_cast<std::size_t>(i)] += (*go)[static_cast<std::size_t>(ci * hw + i)] * x.at(ci * hw + i);
                t.accumulate(w, gw);
            }
        });
    }
    return out;
}

Tensor broadcast_spatial(const Tensor& v, std::int64_t h, std::int64_t w) {
    require(v.rank() == 1, "broadcast_spatial", "expects a vector");
    const auto c = v.dim(0);
    std::vector<double> d(static_cast<std::size_t>(c * h * w));
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t i = 0; i < h * w; ++i) d[static_cast<std::size_t>(ci * h * w + i)] = v.at(ci);
    return unary_op(
        "broadcast_spatial", v, {c, h, w}, [&] { return std::move(d); },
        [c, h, w](const std::vector<double>& go, std::vector<double>& gv) {
            for (std::int64_t ci = 0; ci < c; ++ci)
                for (std::int64_t i = 0; i < h * w; ++i) gv[static_cast<std::size_t>(ci)] += go[static_cast<std::size_t>(ci * h * w + i)];
        });
}

Tensor channel_norm(const Tensor& x, const Tensor& scale, const Tensor& shift, double eps) {
    require(x.rank() == 3, "channel_norm", "expects (C,H,W)");
    const auto c = x.dim(0), hw = x.dim(1) * x.dim(2);
    require(scale.rank() == 1 && scale.dim(0) == c && shift.rank() == 1 && shift.dim(0) == c,
            "channel_norm", "affine extents must match channels");
    // RMS normalization, no centering: a spatially constant contribution
    // (global-context branch, convolution bias) must stay connected to the
    // output, which mean subtraction would sever exactly.
    std::vector<double> xhat(static_cast<std::size_t>(x.size()));
    std::vector<double> invrms(static_cast<std::size_t>(c));
    std::vector<double> d(static_cast<std::size_t>(x.size()));
    const double m = static_cast<double>(hw);
    for (std::int64_t ci = 0; ci < c; ++ci) {
        double ms = 0.0;
        for (std::int64_t i = 0; i < hw; ++i) {
            const double v = x.at(ci * hw + i);
            ms += v * v;
        }
        ms /= m;
        const double inv = 1.0 / std::sqrt(ms + eps);
        invrms[static_cast<std::size_t>(ci)] = inv;
        for (std::int64_t i = 0; i < hw; ++i) {
            const double xh = x.at(ci * hw + i) * inv;
            xhat[static_cast<std::size_t>(ci * hw + i)] = xh;
            d[static_cast<std::size_t>(ci * hw + i)] = xh * scale.at(ci) + shift.at(ci);
        }
    }
    Tensor out = make_result("channel_norm", x.shape(), std::move(d), x.precision(),
                             x.requires_grad() || scale.requires_grad() || shift.requires_grad());
    if (Tape* tp = Tape::active(); tp != nullptr && out.requires_grad()) {
        tp->record([x, scale, shift, out, c, hw, xhat = std::move(xhat), invrms = std::move(invrms), m](Tape& t) {
            const auto* go = t.find_grad(out.key());
            if (!go) return;
            std::vector<double> sum_dy(static_cast<std::size_t>(c), 0.0);
            std::vector<double> sum_dy_xhat(static_cast<std::size_t>(c), 0.0);
            for (std::int64_t ci = 0; ci < c; ++ci) {
                for (std::int64_t i = 0; i < hw; ++i) {
                    const double dy = (*go)[static_cast<std::size_t>(ci * hw + i)];
                    sum_dy[static_cast<std::size_t>(ci)] += dy;
                    sum_dy_xhat[static_cast<std::size_t>(ci)] += dy * xhat[static_cast<std::size_t>(ci * hw + i)];
                }
            }
            if (shift.requires_grad()) t.accumulate(shift, sum_dy);
            if (scale.requires_grad()) t.accumulate(scale, sum_dy_xhat);
            if (x.requires_grad()) {
                std::vector<double> gx(static_cast<std::size_t>(x.size()));
                for (std::int64_t ci = 0; ci < c; ++ci) {
                    const double g = scale.at(ci) * invrms[static_cast<std::size_t>(ci)];
                    const double mix = sum_dy_xhat[static_cast<std::size_t>(ci)] / m;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        const double dy = (*go)[static_cast<std::size_t>(ci * hw + i)];
                        gx[static_cast<std::size_t>(ci * hw + i)] =
                            g * (dy - xhat[static_cast<std::size_t>(ci * hw + i)] * mix);
                    }
                }
                t.accumulate(x, gx);
            }
        });
    }
    return out;
}

Tensor avg_pool2(const Tensor& x) {
    require(x.rank() == 3, "avg_pool2", "expects (C,H,W)");
    const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const auto ho = (h + 1) / 2, wo = (w + 1) / 2;
    std::vector<double> d(static_cast<std::size_t>(c * ho * wo), 0.0);
    for (std::int64_t ci = 0; ci < c; ++ci) {
        for (std::int64_t oy = 0; oy < ho; ++oy) {
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                double acc = 0.0;
                int cnt = 0;
                for (std::int64_t dy = 0; dy < 2; ++dy)
                    for (std::int64_t dx = 0; dx < 2; ++dx) {
                        const std::int64_t iy = 2 * oy + dy, ix = 2 * ox + dx;
                        if (iy < h && ix < w) {
                            acc += x.at((ci * h + iy) * w + ix);
                            ++cnt;
                        }
                    }
                d[static_cast<std::size_t>((ci * ho + oy) * wo + ox)] = acc / cnt;
            }
        }
    }
    return unary_op(
        "avg_pool2", x, {c, ho, wo}, [&] { return std::move(d); },
        [c, h, w, ho, wo](const std::vector<double>& go, std::vector<double>& gx) {
            for (std::int64_t ci = 0; ci < c; ++ci)
                for (std::int64_t oy = 0; oy < ho; ++oy)
                    for (std::int64_t ox = 0; ox < wo; ++ox) {
                        int cnt = 0;
                        for (std::int64_t dy = 0; dy < 2; ++dy)
                            for (std::int64_t dx = 0; dx < 2; ++dx)
                                if (2 * oy + dy < h && 2 * ox + dx < w) ++cnt;
                        const double g = go[static_cast<std::size_t>((ci * ho + oy) * wo + ox)] / cnt;
                        for (std::int64_t dy = 0; dy < 2; ++dy)
                            for (std::int64_t dx = 0; dx < 2; ++dx) {
                                const std::int64_t iy = 2 * oy + dy, ix = 2 * ox + dx;
                                if (iy < h && ix < w) gx[static_cast<std::size_t>((ci * h + iy) * w + ix)] += g;
                            }
                    }
        });
}

Tensor bilinear_upsample(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
    require(x.rank() == 3, "bilinear_upsample", "expects (C,H,W)");
    if (out_h < 1 || out_w < 1) throw DomainError("bilinear_upsample: bad target size");
    const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
    struct Corner {
        std::int64_t y0, y1, x0, x1;
        double wy, wx;
    };
    std::vector<Corner> corners(static_cast<std::size_t>(out_h * out_w));
    const double sy = static_cast<double>(h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(w) / static_cast<double>(out_w);
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
            double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
            double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
            fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
            fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
            Corner cr;
            cr.y0 = static_cast<std::int64_t>(std::floor(fy));
            cr.x0 = static_cast<std::int64_t>(std::floor(fx));
            cr.y1 = std::min(cr.y0 + 1, h - 1);
            cr.x1 = std::min(cr.x0 + 1, w - 1);
            cr.wy = fy - static_cast<double>(cr.y0);
            cr.wx = fx - static_cast<double>(cr.x0);
            corners[static_cast<std::size_t>(oy * out_w + ox)] = cr;
        }
    }
    std::vector<double> d(static_cast<std::size_t>(c * out_h * out_w));
    for (std::int64_t ci = 0; ci < c; ++ci) {
        for (std::int64_t i = 0; i < out_h * out_w; ++i) {
            const auto& cr = corners[static_cast<std::size_t>(i)];
            const double v00 = x.at((ci * h + cr.y0) * w + cr.x0);
            const double v01 = x.at((ci * h + cr.y0) * w + cr.x1);
            const double v10 = x.at((ci * h + cr.y1) * w + cr.x0);
            const double v11 = x.at((ci * h + cr.y1) * w + cr.x1);
            d[static_cast<std::size_t>(ci * out_h * out_w + i)] =
                (1 - cr.wy) * ((1 - cr.wx) * v00 + cr.wx * v01) + cr.wy * ((1 - cr.wx) * v10 + cr.wx * v11);
        }
    }
    return unary_op(
        "bilinear_upsample", x, {c, out_h, out_w}, [&] { return std::move(d); },
        [c, h, w, out_h, out_w, corners = std::move(corners)](const std::vector<double>& go,
                                                              std::vector<double>& gx) {
            for (std::int64_t ci = 0; ci < c; ++ci)
                for (std::int64_t i = 0; i < out_h * out_w; ++i) {
                    const auto& cr = corners[static_cast<std::size_t>(i)];
                    const double g = go[static_cast<std::size_t>(ci * out_h * out_w + i)];
                    gx[static_cast<std::size_t>((ci * h + cr.y0) * w + cr.x0)] += g * (1 - cr.wy) * (1 - cr.wx);
                    gx[static_cast<std::size_t>((ci * h + cr.y0) * w + cr.x1)] += g * (1 - cr.wy) * cr.wx;
                    gx[static_cast<std::size_t>((ci * h + cr.y1) * w + cr.x0)] += g * cr.wy * (1 - cr.wx);
                    gx[static_cast<std::size_t>((ci * h + cr.y1) * w + cr.x1)] += g * cr.wy * cr.wx;
                }
        });
}

Tensor pad_spatial(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
    require(x.rank() == 3, "pad_spatial", "expects (C,H,W)");
    const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
    require(out_h >= h && out_w >= w, "pad_spatial", "target smaller than input");
    std::vector<double> d(static_cast<std::size_t>(c * out_h * out_w), 0.0);
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t xx = 0; xx < w; ++xx)
                d[static_cast<std::size_t>((ci * out_h + y) * out_w + xx)] = x.at((ci * h + y) * w + xx);
    return unary_op(
        "pad_spatial", x, {c, out_h, out_w}, [&] { return std::move(d); },
        [c, h, w, out_h, out_w](const std::vector<double>& go, std::vector<double>& gx) {
            for (std::int64_t ci = 0; ci < c; ++ci)
                for (std::int64_t y = 0; y < h; ++y)
                    for (std::int64_t xx = 0; xx < w; ++xx)
                        gx[static_cast<std::size_t>((ci * h + y) * w + xx)] =
                            go[static_cast<std::size_t>((ci * out_h + y) * out_w + xx)];
        });
}

Tensor roll_spatial(const Tensor& x, std::int64_t dy, std::int64_t dx) {
    require(x.rank() == 3, "roll_spatial", "expects (C,H,W)");
    const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
    auto wrap = [](std::int64_t v, std::int64_t n) { return ((v % n) + n) % n; };
    std::vector<double> d(static_cast<std::size_t>(x.size()));
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t xx = 0; xx < w; ++xx)
                d[static_cast<std::size_t>((ci * h + wrap(y + dy, h)) * w + wrap(xx + dx, w))] =
                    x.at((ci * h + y) * w + xx);
    return unary_op(
        "roll_spatial", x, x.shape(), [&] { return std::move(d); },
        [c, h, w, dy, dx, wrap](const std::vector<double>& go, std::vector<double>& gx) {
            for (std::int64_t ci = 0; ci < c; ++ci)
                for (std::int64_t y = 0; y < h; ++y)
                    for (std::int64_t xx = 0; xx < w; ++xx)
                        gx[static_cast<std::size_t>((ci * h + y) * w + xx)] =
                            go[static_cast<std::size_t>((ci * h + wrap(y + dy, h)) * w + wrap(xx + dx, w))];
        });
}

Tensor scatter_pillars(const Tensor& feats, const std::vector<std::pair<std::int64_t, std::int64_t>>& cells,
                       std::int64_t h, std::int64_t w) {
    require(feats.rank() == 2, "scatter_pillars", "expects (P,C) features");
    const auto p = feats.dim(0), c = feats.dim(1);
    require(p == static_cast<std::int64_t>(cells.size()), "scatter_pillars", "cell count mismatch");
    for (const auto& [cy, cx] : cells)
        if (cy < 0 || cy >= h || cx < 0 || cx >= w)
            throw ShapeError("scatter_pillars: cell outside grid");
    std::vector<double> d(static_cast<std::size_t>(c * h * w), 0.0);
    for (std::int64_t pi = 0; pi < p; ++pi) {
        const auto [cy, cx] = cells[static_cast<std::size_t>(pi)];
        for (std::int64_t ci = 0; ci < c; ++ci)
            d[static_cast<std::size_t>((ci * h + cy) * w + cx)] = feats.at(pi * c + ci);
    }
    return unary_op(
        "scatter_pillars", feats, {c, h, w}, [&] { return std::move(d); },
        [cells, c, h, w](const std::vector<double>& go, std::vector<double>& gf) {
            for (std::size_t pi = 0; pi < cells.size(); ++pi) {
                const auto [cy, cx] = cells[pi];
                for (std::int64_t ci = 0; ci < c; ++ci)
                    gf[pi * static_cast<std::size_t>(c) + static_cast<std::size_t>(ci)] +=
                        go[static_cast<std::size_t>((ci * h + cy) * w + cx)];
            }
        });
}

// Zero-feature scatter for an empty pillar set is handled by callers via
// Tensor::zeros; this overload keeps the contract explicit.

// ---- MAC instrumentation ----

MacScope::MacScope(MacCounter* counter) : prev_(g_mac_counter) { g_mac_counter = counter; }
MacScope::~MacScope() { g_mac_counter = prev_; }
MacCounter* active_mac_counter() { return g_mac_counter; }

// ---- gradient checking ----

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

const GradReport::Entry* GradReport::worst() const {
    const Entry* w = nullptr;
    for (const auto& e : entries)
        if (w == nullptr || e.rel_err > w->rel_err) w = &e;
    return w;
}

GradReport grad_check(const std::function<Tensor()>& f,
                      const std::vector<std::pair<std::string, Tensor*>>& params, double step,
                      std::int64_t max_coords_per_param, std::uint64_t seed) {
    GradReport report;
    // Analytic pass.
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tensor out = f();
        if (!std::isfinite(out.value())) throw NumericError("grad_check: objective is non-finite");
        tape.backward(out);
        for (const auto& [name, p] : params) analytic.push_back(tape.grad(*p).data());
    }
    // Central finite differences, no tape active inside evaluations.
    Rng rng(seed ^ 0x67726164636865ull);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor* p = params[pi].second;
        std::vector<std::int64_t> coords;
        if (max_coords_per_param > 0 && p->size() > max_coords_per_param) {
            Rng sub = rng.derive(pi);
            std::vector<std::int64_t> all(static_cast<std::size_t>(p->size()));
            std::iota(all.begin(), all.end(), 0);
            for (std::int64_t i = 0; i < max_coords_per_param; ++i) {
                const auto j = i + static_cast<std::int64_t>(sub.below(static_cast<std::uint64_t>(all.size() - static_cast<std::size_t>(i))));
                std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
                coords.push_back(all[static_cast<std::size_t>(i)]);
            }
        } else {
            coords.resize(static_cast<std::size_t>(p->size()));
            std::iota(coords.begin(), coords.end(), 0);
        }
        for (const auto ci : coords) {
            auto& buf = p->mutable_data();
            const double orig = buf[static_cast<std::size_t>(ci)];
            buf[static_cast<std::size_t>(ci)] = orig + step;
            const double fp = f().value();
            buf[static_cast<std::size_t>(ci)] = orig - step;
            const double fm = f().value();
            buf[static_cast<std::size_t>(ci)] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("grad_check: objective is non-finite under perturbation");
            const double fd = (fp - fm) / (2.0 * step);
            GradReport::Entry e;
            e.param = params[pi].first;
            e.index = ci;
            e.analytic = analytic[pi][static_cast<std::size_t>(ci)];
            e.fd = fd;
            e.rel_err = rel_err(e.analytic, e.fd);
            report.max_rel_err = std::max(report.max_rel_err, e.rel_err);
            report.entries.push_back(std::move(e));
        }
    }
    return report;
}

}  // namespace coopdet
