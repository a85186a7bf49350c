#include <doctest.h>

#include <cmath>
#include <vector>

#include "coopdet/tensor.hpp"

using namespace coopdet;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> d(static_cast<std::size_t>(shape_size(shape)));
    for (auto& v : d) v = rng.uniform(lo, hi);
    return Tensor::of(std::move(shape), std::move(d));
}

// Independent direct convolution used as the oracle: walks every output
// cell and kernel tap over a virtually zero-padded input.
std::vector<double> direct_conv(const std::vector<double>& x, std::int64_t c, std::int64_t h,
                                std::int64_t w, const std::vector<double>& k, std::int64_t o,
                                std::int64_t kh, std::int64_t kw, std::int64_t stride,
                                std::int64_t dilation, std::int64_t pad, std::int64_t& ho,
                                std::int64_t& wo) {
    ho = (h + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
    wo = (w + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(o * ho * wo), 0.0);
    for (std::int64_t oc = 0; oc < o; ++oc)
        for (std::int64_t oy = 0; oy < ho; ++oy)
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                double acc = 0.0;
                for (std::int64_t ic = 0; ic < c; ++ic)
                    for (std::int64_t ky = 0; ky < kh; ++ky)
                        for (std::int64_t kx = 0; kx < kw; ++kx) {
                            const std::int64_t iy = oy * stride - pad + ky * dilation;
                            const std::int64_t ix = ox * stride - pad + kx * dilation;
                            double xv = 0.0;
                            if (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                xv = x[static_cast<std::size_t>((ic * h + iy) * w + ix)];
                            acc += xv * k[static_cast<std::size_t>(((oc * c + ic) * kh + ky) * kw + kx)];
                        }
                out[static_cast<std::size_t>((oc * ho + oy) * wo + ox)] = acc;
            }
    return out;
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("matmul identity and hand-computed product") {
    auto eye = Tensor::of({2, 2}, {1, 0, 0, 1});
    auto a = Tensor::of({2, 2}, {3, 1, 4, 1});
    auto r = matmul(eye, a);
    for (std::int64_t i = 0; i < 4; ++i) CHECK(r.at(i) == a.at(i));

    auto m = Tensor::of({2, 2}, {1, 2, 3, 4});
    auto v = Tensor::of({2, 1}, {5, 6});
    auto p = matmul(m, v);
    CHECK(p.at(0) == doctest::Approx(17.0));
    CHECK(p.at(1) == doctest::Approx(39.0));
}

TEST_CASE("matmul shape mismatch raises") {
    auto a = Tensor::of({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = Tensor::of({2, 2}, {1, 2, 3, 4});
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("grad of sum(A*B) w.r.t. A is row-broadcast of column sums of B") {
    Rng rng(7);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    a.set_requires_grad(true);

    Tape tape;
    auto loss = sum_all(matmul(a, b));
    tape.backward(loss);
    auto ga = tape.grad(a);
    // d/dA[i,k] sum(A*B) = sum_j B[k,j], independent of the row i.
    for (std::int64_t i = 0; i < 3; ++i)
        for (std::int64_t k = 0; k < 4; ++k) {
            double col_sum = 0.0;
            for (std::int64_t j = 0; j < 2; ++j) col_sum += b.at(k * 2 + j);
            CHECK(ga.at(i * 4 + k) == doctest::Approx(col_sum).epsilon(1e-12));
        }

    // Agrees with finite differences too.
    auto report = grad_check([&] { return sum_all(matmul(a, b)); }, {{"a", &a}});
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("softmax examples") {
    auto s0 = softmax_lastdim(Tensor::of({2}, {0, 0}));
    CHECK(s0.at(0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(s0.at(1) == doctest::Approx(0.5).epsilon(1e-12));

    auto s1 = softmax_lastdim(Tensor::of({3}, {1, 2, 3}));
    const double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
    const double z = e1 + e2 + e3;
    CHECK(s1.at(0) == doctest::Approx(e1 / z).epsilon(1e-12));
    CHECK(s1.at(1) == doctest::Approx(e2 / z).epsilon(1e-12));
    CHECK(s1.at(2) == doctest::Approx(e3 / z).epsilon(1e-12));
    CHECK(s1.at(0) == doctest::Approx(0.09003).epsilon(1e-4));
    CHECK(s1.at(1) == doctest::Approx(0.24473).epsilon(1e-4));
    CHECK(s1.at(2) == doctest::Approx(0.66524).epsilon(1e-4));

    // Max-subtraction keeps extreme logits finite.
    auto s2 = softmax_lastdim(Tensor::of({2}, {1000, 0}));
    CHECK(s2.at(0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s2.at(1) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one for random shapes") {
    Rng rng(11);
    for (int rep = 0; rep < 50; ++rep) {
        Shape shape;
        const int rank = 1 + static_cast<int>(rng.below(3));
        for (int i = 0; i < rank; ++i) shape.push_back(1 + static_cast<std::int64_t>(rng.below(6)));
        auto x = random_tensor(shape, rng, -20.0, 20.0);
        auto s = softmax_lastdim(x);
        const auto n = shape.back();
        for (std::int64_t r = 0; r < s.size() / n; ++r) {
            double sum = 0.0;
            for (std::int64_t j = 0; j < n; ++j) sum += s.at(r * n + j);
            CHECK(std::abs(sum - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("softmax rejects empty last dimension") {
    CHECK_THROWS_AS(shape_size(Shape{2, 0}), ShapeError);
}

TEST_CASE("conv2d center-delta kernel is the identity, bit-exact") {
    Rng rng(3);
    auto x = random_tensor({2, 5, 4}, rng);
    std::vector<double> kd(2 * 2 * 3 * 3, 0.0);
    kd[(0 * 2 + 0) * 9 + 4] = 1.0;  // out 0 <- in 0 center tap
    kd[(1 * 2 + 1) * 9 + 4] = 1.0;  // out 1 <- in 1 center tap
    auto k = Tensor::of({2, 2, 3, 3}, kd);
    auto y = conv2d(x, k, {.stride = 1, .dilation = 1, .pad = same_pad(3, 1)});
    REQUIRE(y.shape() == x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("conv2d all-ones kernel on a constant map gives 9c in the interior") {
    auto x = Tensor::full({1, 5, 5}, 2.5);
    auto k = Tensor::full({1, 1, 3, 3}, 1.0);
    auto y = conv2d(x, k, {.stride = 1, .dilation = 1, .pad = 1});
    CHECK(y.at(2 * 5 + 2) == doctest::Approx(9 * 2.5));
    CHECK(y.at(0) == doctest::Approx(4 * 2.5));  // corner sees 4 taps
}

TEST_CASE("dilated conv matches the direct convolution oracle") {
    Rng rng(5);
    auto x = random_tensor({2, 7, 6}, rng);
    auto k = random_tensor({3, 2, 3, 3}, rng);
    for (const auto& [stride, dilation, pad] :
         std::vector<std::array<std::int64_t, 3>>{{1, 1, 0}, {1, 2, 2}, {2, 1, 1}, {1, 2, 0}}) {
        std::int64_t ho, wo;
        auto expect = direct_conv(x.data(), 2, 7, 6, k.data(), 3, 3, 3, stride, dilation, pad, ho, wo);
        auto y = conv2d(x, k, {.stride = stride, .dilation = dilation, .pad = pad});
        REQUIRE(y.shape() == Shape{3, ho, wo});
        for (std::int64_t i = 0; i < y.size(); ++i)
            CHECK(y.at(i) == doctest::Approx(expect[static_cast<std::size_t>(i)]).epsilon(1e-12));
    }
}

TEST_CASE("dilation-2 delta input touches only offsets {-2,0,+2}") {
    // Delta input at (0,0); a dilated 3x3 kernel of ones can only produce
    // nonzero outputs where a tap lands on the delta.
    std::vector<double> xd(5 * 5, 0.0);
    xd[0] = 1.0;
    auto x = Tensor::of({1, 5, 5}, xd);
    auto k = Tensor::full({1, 1, 3, 3}, 1.0);
    auto y = conv2d(x, k, {.stride = 1, .dilation = 2, .pad = 2});
    for (std::int64_t oy = 0; oy < 5; ++oy)
        for (std::int64_t ox = 0; ox < 5; ++ox) {
            const bool reachable = (oy == 0 || oy == 2) && (ox == 0 || ox == 2);
            CHECK(y.at(oy * 5 + ox) == doctest::Approx(reachable ? 1.0 : 0.0));
        }
}

TEST_CASE("conv2d channel mismatch raises") {
    auto x = Tensor::zeros({2, 4, 4});
    auto k = Tensor::zeros({1, 3, 3, 3});
    CHECK_THROWS_AS(conv2d(x, k, {.stride = 1, .dilation = 1, .pad = 1}), ShapeError);
}

TEST_CASE("same padding requires odd kernels") { CHECK_THROWS_AS(same_pad(4, 1), DomainError); }

TEST_CASE("global_avg_pool basics") {
    auto c = global_avg_pool(Tensor::full({3, 4, 4}, 1.25));
    for (std::int64_t i = 0; i < 3; ++i) CHECK(c.at(i) == doctest::Approx(1.25));
    auto m = global_avg_pool(Tensor::of({1, 2, 2}, {1, 3, 5, 7}));
    CHECK(m.at(0) == doctest::Approx(4.0));
    auto z = global_avg_pool(Tensor::zeros({2, 3, 3}));
    CHECK(z.at(0) == 0.0);
    CHECK(z.at(1) == 0.0);
}

TEST_CASE("grad_check: x^2 at x=3") {
    auto x = Tensor::scalar(3.0);
    x.set_requires_grad(true);
    auto report = grad_check([&] { return mul(x, x); }, {{"x", &x}});
    REQUIRE(report.entries.size() == 1);
    CHECK(report.entries[0].analytic == doctest::Approx(6.0).epsilon(1e-9));
    CHECK(report.max_rel_err < 1e-9);
}

TEST_CASE("grad_check: softmax-then-weighted-sum composite") {
    Rng rng(17);
    auto x = random_tensor({4}, rng);
    auto w = random_tensor({4}, rng);
    x.set_requires_grad(true);
    auto report = grad_check([&] { return sum_all(mul(softmax_lastdim(x), w)); }, {{"x", &x}});
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("grad_check: dilated conv + pooling composite") {
    Rng rng(23);
    auto x = random_tensor({2, 6, 6}, rng);
    auto k = random_tensor({2, 2, 3, 3}, rng, -0.5, 0.5);
    x.set_requires_grad(true);
    k.set_requires_grad(true);
    auto f = [&] {
        auto y = conv2d(x, k, {.stride = 1, .dilation = 2, .pad = 2});
        return sum_all(global_avg_pool(relu(y)));
    };
    auto report = grad_check(f, {{"x", &x}, {"k", &k}});
    CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("every primitive op passes grad_check on small random tensors") {
    Rng rng(29);
    auto check = [&](const char* name, const std::function<Tensor()>& f,
                     std::vector<std::pair<std::string, Tensor*>> params) {
        auto report = grad_check(f, params);
        INFO(name << " worst " << (report.worst() ? report.worst()->param : ""));
        CHECK(report.max_rel_err < 1e-5);
    };

    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    check("add", [&] { return sum_all(mul(add(a, b), b)); }, {{"a", &a}, {"b", &b}});
    check("sub", [&] { return sum_all(mul(sub(a, b), a)); }, {{"a", &a}, {"b", &b}});
    check("mul", [&] { return sum_all(mul(a, b)); }, {{"a", &a}, {"b", &b}});
    check("neg", [&] { return sum_all(mul(neg(a), b)); }, {{"a", &a}});
    check("scalar ops", [&] { return sum_all(mul_scalar(add_scalar(a, 0.3), 1.7)); }, {{"a", &a}});
    check("relu", [&] { return sum_all(mul(relu(a), b)); }, {{"a", &a}});
    check("sigmoid", [&] { return sum_all(mul(sigmoid(a), b)); }, {{"a", &a}});
    check("softplus", [&] { return sum_all(mul(softplus(a), b)); }, {{"a", &a}});
    check("huber", [&] { return sum_all(huber(a, 3.0)); }, {{"a", &a}});
    check("mean_all", [&] { return mean_all(mul(a, a)); }, {{"a", &a}});
    check("row_sum", [&] { return sum_all(mul(row_sum(a), row_sum(b))); }, {{"a", &a}});
    check("transpose", [&] { return sum_all(mul(transpose2d(a), transpose2d(b))); }, {{"a", &a}});

    auto pos = random_tensor({6}, rng, 0.2, 2.0);
    pos.set_requires_grad(true);
    check("log", [&] { return sum_all(log_(pos)); }, {{"pos", &pos}});
    check("pow", [&] { return sum_all(pow_scalar(pos, 2.5)); }, {{"pos", &pos}});

    auto m = random_tensor({4, 3}, rng);
    auto v = random_tensor({3}, rng);
    auto s = random_tensor({4}, rng);
    m.set_requires_grad(true);
    v.set_requires_grad(true);
    s.set_requires_grad(true);
    check("add_rowvec", [&] { return sum_all(mul(add_rowvec(m, v), m)); }, {{"m", &m}, {"v", &v}});
    check("scale_rows", [&] { return sum_all(mul(scale_rows(m, s), m)); }, {{"m", &m}, {"s", &s}});
    check("col_max", [&] { return sum_all(col_max(m)); }, {{"m", &m}});
    std::vector<std::int64_t> segs{0, 1, 4};
    check("segment_max", [&] { return sum_all(mul(segment_max_rows(m, segs), segment_max_rows(m, segs))); },
          {{"m", &m}});
    check("softmax", [&] { return sum_all(mul(softmax_lastdim(m), m)); }, {{"m", &m}});
    check("matmul", [&] { return sum_all(matmul(m, transpose2d(m))); }, {{"m", &m}});

    auto map = random_tensor({2, 4, 5}, rng);
    auto cvec = random_tensor({2}, rng);
    auto wmap = random_tensor({4, 5}, rng);
    map.set_requires_grad(true);
    cvec.set_requires_grad(true);
    wmap.set_requires_grad(true);
    check("gap", [&] { return sum_all(mul(global_avg_pool(map), cvec)); }, {{"map", &map}});
    check("add_channel_bias", [&] { return sum_all(mul(add_channel_bias(map, cvec), map)); },
          {{"map", &map}, {"cvec", &cvec}});
    check("channel_scale", [&] { return sum_all(mul(channel_scale(map, cvec), map)); },
          {{"map", &map}, {"cvec", &cvec}});
    check("scale_spatial", [&] { return sum_all(mul(scale_spatial(map, wmap), map)); },
          {{"map", &map}, {"wmap", &wmap}});
    check("broadcast_spatial", [&] { return sum_all(mul(broadcast_spatial(cvec, 4, 5), map)); },
          {{"cvec", &cvec}});
    check("avg_pool2", [&] { return sum_all(avg_pool2(map)); }, {{"map", &map}});
    check("bilinear_upsample", [&] { return sum_all(mul(bilinear_upsample(avg_pool2(map), 4, 5), map)); },
          {{"map", &map}});
    check("pad_spatial", [&] { return sum_all(pad_spatial(map, 6, 6)); }, {{"map", &map}});
    check("roll_spatial", [&] { return sum_all(mul(roll_spatial(map, 1, 2), map)); }, {{"map", &map}});

    auto scale = random_tensor({2}, rng, 0.5, 1.5);
    auto shift = random_tensor({2}, rng);
    scale.set_requires_grad(true);
    shift.set_requires_grad(true);
    check("channel_norm", [&] { return sum_all(mul(channel_norm(map, scale, shift), map)); },
          {{"map", &map}, {"scale", &scale}, {"shift", &shift}});

    auto feats = random_tensor({3, 2}, rng);
    feats.set_requires_grad(true);
    std::vector<std::pair<std::int64_t, std::int64_t>> cells{{0, 1}, {2, 0}, {1, 1}};
    check("scatter_pillars", [&] { return sum_all(mul(scatter_pillars(feats, cells, 3, 2),
                                                      scatter_pillars(feats, cells, 3, 2))); },
          {{"feats", &feats}});

    std::vector<std::int64_t> idx{5, 1, 1, 7, 0};
    check("gather", [&] { return sum_all(mul(gather_flat(a, idx, {5}), gather_flat(b, idx, {5}))); },
          {{"a", &a}});
    check("concat_cols", [&] { return sum_all(mul(concat_cols({m, s}), concat_cols({m, s}))); },
          {{"m", &m}, {"s", &s}});
    check("concat_rows", [&] { return sum_all(mul(concat_rows({a, b}), concat_rows({a, b}))); },
          {{"a", &a}, {"b", &b}});
    check("stack_rows", [&] { return sum_all(mul(stack_rows({v, v}), stack_rows({v, v}))); }, {{"v", &v}});
    check("concat_channels",
          [&] { return sum_all(mul(concat_channels({map, map}), concat_channels({map, map}))); },
          {{"map", &map}});
    check("reshape", [&] { return sum_all(mul(reshape(a, {4, 3}), reshape(b, {4, 3}))); },
          {{"a", &a}, {"b", &b}});
}

TEST_CASE("fan-out of k consumers accumulates k times the single-consumer gradient") {
    auto x = Tensor::of({3}, {0.5, -1.0, 2.0});
    x.set_requires_grad(true);

    Tape t1;
    auto single = sum_all(mul_scalar(x, 1.0));
    t1.backward(single);
    auto g1 = t1.grad(x);

    constexpr int k = 4;
    Tape t2;
    Tensor acc = mul_scalar(x, 1.0);
    for (int i = 1; i < k; ++i) acc = add(acc, mul_scalar(x, 1.0));
    t2.backward(sum_all(acc));
    auto gk = t2.grad(x);
    for (std::int64_t i = 0; i < 3; ++i) CHECK(gk.at(i) == k * g1.at(i));
}

TEST_CASE("non-finite intermediates raise instead of propagating") {
    CHECK_THROWS_AS(Tensor::of({1}, {std::nan("")}), NumericError);
    auto big = Tensor::of({1}, {1e308});
    CHECK_THROWS_AS(mul(big, big), NumericError);
    auto z = Tensor::of({1}, {0.0});
    CHECK_THROWS_AS(log_(z), DomainError);
}

TEST_CASE("f32 precision quantizes storage and propagates") {
    auto a = Tensor::of({2}, {0.1, 0.2}, Precision::f32);
    CHECK(a.at(0) == static_cast<double>(static_cast<float>(0.1)));
    auto b = Tensor::of({2}, {1.0, 2.0}, Precision::f32);
    auto c = add(a, b);
    CHECK(c.precision() == Precision::f32);
    CHECK(c.at(1) == static_cast<double>(static_cast<float>(a.at(1) + 2.0)));
    auto d = add(a, Tensor::of({2}, {1.0, 2.0}, Precision::f64));
    CHECK(d.precision() == Precision::f64);
}

TEST_CASE("tape grad for untouched tensor is zeros and backward wants scalars") {
    auto x = Tensor::of({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    auto y = Tensor::of({2}, {1.0, 2.0});
    y.set_requires_grad(true);
    Tape tape;
    auto loss = sum_all(mul(x, x));
    CHECK_THROWS_AS(tape.backward(mul(x, x)), ShapeError);
    tape.backward(loss);
    CHECK(tape.grad(y).at(0) == 0.0);
    CHECK(tape.grad(y).at(1) == 0.0);
}

}  // TEST_SUITE
