#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "coopdet/common.hpp"
#include "coopdet/rng.hpp"

namespace coopdet {

// Storage precision of a tensor. In f32 mode values are rounded through
// IEEE single precision after every operation while accumulations still
// run in double; f64 is the verification mode used by all gradient checks.
enum class Precision { f32, f64 };

using Shape = std::vector<std::int64_t>;

std::int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

// Dense channels-first tensor with value semantics. Copies share the
// underlying buffer; operations never mutate their inputs. Construction
// and every operation reject non-finite values.
class Tensor {
public:
    Tensor() = default;

    static Tensor of(Shape shape, std::vector<double> data, Precision prec = Precision::f64);
    static Tensor zeros(Shape shape, Precision prec = Precision::f64);
    static Tensor full(Shape shape, double value, Precision prec = Precision::f64);
    static Tensor scalar(double value, Precision prec = Precision::f64);
    // Uniform(-bound, bound) init used for parameters.
    static Tensor uniform(Shape shape, double bound, Rng& rng, Precision prec = Precision::f64);

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }
    std::int64_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    Precision precision() const { return prec_; }

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool v) {
        requires_grad_ = v;
        return *this;
    }

    const std::vector<double>& data() const { return *data_; }
    // Owner-side mutation (optimizer updates, checkpoint load). Buffers are
    // shared by copies, so this must never run while a tape references it.
    std::vector<double>& mutable_data() { return *data_; }

    double value() const;                 // scalar tensors only
    double at(std::int64_t flat) const { return (*data_)[static_cast<std::size_t>(flat)]; }

    // Identity used by the tape to key gradient slots; reshapes share it.
    const void* key() const { return data_.get(); }

    friend class Tape;
    friend Tensor make_result(const char* op, Shape shape, std::vector<double> data, Precision prec,
                              bool requires_grad);
    friend Tensor reshape(const Tensor& x, Shape shape);

private:
    std::shared_ptr<std::vector<double>> data_;
    Shape shape_;
    Precision prec_ = Precision::f64;
    bool requires_grad_ = false;
};

// Reverse-mode tape. Constructing a Tape makes it the active tape for the
// current thread; differentiable operations append their backward rules in
// execution order while one is active and any input requires a gradient.
// backward() replays the record in exact reverse, accumulating gradients
// additively at fan-out. A tape is confined to one logical thread.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    void backward(const Tensor& output);

    bool has_grad(const Tensor& t) const;
    Tensor grad(const Tensor& t) const;  // zeros when the tensor was never reached

    std::size_t op_count() const { return ops_.size(); }

    // Recording interface used by operations.
    void record(std::function<void(Tape&)> backward_rule);
    const std::vector<double>* find_grad(const void* key) const;
    void accumulate(const Tensor& t, const std::vector<double>& g);
    void accumulate(const Tensor& t, const double* g, std::int64_t n);

private:
    std::vector<double>& slot(const Tensor& t);

    std::vector<std::function<void(Tape&)>> ops_;
    std::unordered_map<const void*, std::size_t> slots_;
    // deque: appending never invalidates references handed to closures
    std::deque<std::vector<double>> grads_;
};

// True when a tape is active and the tensor participates in it.
bool recording(const Tensor& t);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);  // grad flows to the larger input (ties: a)
Tensor neg(const Tensor& x);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor log_(const Tensor& x);
Tensor pow_scalar(const Tensor& x, double p);
// Smooth-L1 with transition at |d| = 1/sigma^2.
Tensor huber(const Tensor& x, double sigma);

// ---- reductions ----
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor row_sum(const Tensor& x);          // (m,n) -> (m)
Tensor col_max(const Tensor& x);          // (m,n) -> (n), grad to first argmax
// Per-segment column max over contiguous row ranges (CSR-style offsets of
// length P+1); grad to the first argmax row of each segment.
Tensor segment_max_rows(const Tensor& x, const std::vector<std::int64_t>& offsets);
Tensor global_avg_pool(const Tensor& x);  // (C,H,W) -> (C)

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& x);
Tensor add_rowvec(const Tensor& x, const Tensor& b);  // (m,n) + (n)
Tensor scale_rows(const Tensor& x, const Tensor& s);  // row i scaled by s[i]

// ---- shape and data movement ----
Tensor reshape(const Tensor& x, Shape shape);  // shares the buffer
Tensor gather_flat(const Tensor& x, const std::vector<std::int64_t>& idx, Shape out_shape);
Tensor concat_cols(const std::vector<Tensor>& xs);      // (m,ci) or (m) -> (m, sum ci)
Tensor concat_rows(const std::vector<Tensor>& xs);      // (mi,n) -> (sum mi, n)
Tensor stack_rows(const std::vector<Tensor>& xs);       // k x (n) -> (k,n)
Tensor concat_channels(const std::vector<Tensor>& xs);  // (ci,H,W) -> (sum ci,H,W)

// ---- softmax ----
Tensor softmax_lastdim(const Tensor& x);

// ---- spatial (channels-first maps) ----
struct Conv2dSpec {
    std::int64_t stride = 1;
    std::int64_t dilation = 1;
    std::int64_t pad = 0;
};
// "same" padding for odd kernels: dilation*(k-1)/2.
std::int64_t same_pad(std::int64_t kernel, std::int64_t dilation);
Tensor conv2d(const Tensor& x, const Tensor& k, const Conv2dSpec& spec);

Tensor add_channel_bias(const Tensor& x, const Tensor& b);  // (C,H,W) + (C)
Tensor channel_scale(const Tensor& x, const Tensor& g);     // (C,H,W) * (C)
Tensor scale_spatial(const Tensor& x, const Tensor& w);     // (C,H,W) * (H,W)
Tensor broadcast_spatial(const Tensor& v, std::int64_t h, std::int64_t w);  // (C) -> (C,H,W)
// Per-channel RMS normalization over the spatial extent with learned affine.
Tensor channel_norm(const Tensor& x, const Tensor& scale, const Tensor& shift, double eps = 1e-5);
Tensor avg_pool2(const Tensor& x);  // (C,H,W) -> (C,ceil(H/2),ceil(W/2))
Tensor bilinear_upsample(const Tensor& x, std::int64_t out_h, std::int64_t out_w);
Tensor pad_spatial(const Tensor& x, std::int64_t out_h, std::int64_t out_w);  // zero pad bottom/right
Tensor roll_spatial(const Tensor& x, std::int64_t dy, std::int64_t dx);       // cyclic
// Scatter per-pillar feature rows (P,C) into a zero (C,H,W) map.
Tensor scatter_pillars(const Tensor& feats, const std::vector<std::pair<std::int64_t, std::int64_t>>& cells,
                       std::int64_t h, std::int64_t w);

// ---- multiply-accumulate instrumentation ----
// While a counter is installed (thread-local), matmul adds its inner-loop
// MAC count per output element. Used by the attention complexity benchmark.
struct MacCounter {
    std::uint64_t macs = 0;
};
class MacScope {
public:
    explicit MacScope(MacCounter* counter);
    ~MacScope();
    MacScope(const MacScope&) = delete;
    MacScope& operator=(const MacScope&) = delete;

private:
    MacCounter* prev_;
};
MacCounter* active_mac_counter();

// ---- gradient checking ----
struct GradReport {
    struct Entry {
        std::string param;
        std::int64_t index = 0;
        double analytic = 0.0;
        double fd = 0.0;
        double rel_err = 0.0;
    };
    std::vector<Entry> entries;
    double max_rel_err = 0.0;
    const Entry* worst() const;
};

// Compares analytic gradients of the scalar-valued callable against central
// finite differences for every named parameter. Each call of f must rebuild
// the computation from the current parameter values. max_coords_per_param
// limits how many coordinates are probed per tensor (<=0 means all),
// sampled deterministically from `seed`.
GradReport grad_check(const std::function<Tensor()>& f,
                      const std::vector<std::pair<std::string, Tensor*>>& params, double step = 1e-5,
                      std::int64_t max_coords_per_param = -1, std::uint64_t seed = 0);

double rel_err(double a, double b);

}  // namespace coopdet
