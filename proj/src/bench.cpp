#include "coopdet/bench.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

#include "coopdet/attention.hpp"

namespace coopdet {

namespace {

Tensor random_map(std::int64_t c, std::int64_t h, std::int64_t w, Rng& rng) {
    std::vector<double> d(static_cast<std::size_t>(c * h * w));
    for (auto& v : d) v = rng.uniform(-1, 1);
    return Tensor::of({c, h, w}, std::move(d));
}

double run_layer_ms(const Tensor& f, const ScaleAttentionParams& params, std::int64_t win,
                    std::int64_t dim, MacCounter* counter) {
    const auto t0 = std::chrono::steady_clock::now();
    auto part = partition_windows(f, win, 0);
    auto attended = window_self_attention(part.windows, params, win, 1, dim, counter);
    auto merged = merge_windows(part, attended);
    (void)merged;
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

}  // namespace

std::vector<BenchRow> bench_attention(const std::vector<std::int64_t>& sizes, std::int64_t window,
                                      std::int64_t dim, int reps, std::uint64_t seed) {
    if (reps < 1) throw DomainError("bench: reps must be >= 1");
    Rng rng(seed ^ 0x62656e6368ull);
    std::vector<BenchRow> rows;
    for (const auto size : sizes) {
        if (size < window || size % window != 0)
            throw DomainError("bench: sizes must be positive multiples of the window");
        auto f = random_map(dim, size, size, rng);
        for (const bool global : {false, true}) {
            const auto win = global ? size : window;
            WindowConfig cfg;
            cfg.sizes = {win};
            cfg.heads = {1};
            cfg.head_dims = {dim};
            cfg.channels = dim;
            Rng prng = rng.derive(static_cast<std::uint64_t>(size) * 2 + (global ? 1 : 0));
            auto params = init_attention_params(cfg, prng);

            BenchRow row;
            row.size = size;
            row.mode = global ? "global" : "windowed";
            MacCounter counter;
            run_layer_ms(f, params.scales[0], win, dim, &counter);  // counting pass, untimed
            row.macs = counter.macs;

            std::vector<double> times;
            run_layer_ms(f, params.scales[0], win, dim, nullptr);  // warmup
            for (int r = 0; r < reps; ++r) times.push_back(run_layer_ms(f, params.scales[0], win, dim, nullptr));
            std::sort(times.begin(), times.end());
            row.median_ms = times[times.size() / 2];
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

std::string bench_to_csv(const std::vector<BenchRow>& rows) {
    std::ostringstream os;
    os << "size,mode,macs,median_ms\n";
    for (const auto& r : rows) os << r.size << "," << r.mode << "," << r.macs << "," << r.median_ms << "\n";
    return os.str();
}

}  // namespace coopdet
