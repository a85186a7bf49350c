#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coopdet/tensor.hpp"

namespace coopdet {

struct BenchRow {
    std::int64_t size = 0;      // square map extent
    std::string mode;           // "windowed" or "global"
    std::uint64_t macs = 0;     // instrumented Q*K^T multiply-adds
    double median_ms = 0.0;
};

// One attention layer per mode at each size: windowed uses the fixed
// window, global attends over the whole map as a single window. MAC
// counts come from the instrumented path; wall times are medians over
// `reps` untimed-counter runs.
std::vector<BenchRow> bench_attention(const std::vector<std::int64_t>& sizes, std::int64_t window = 4,
                                      std::int64_t dim = 16, int reps = 5, std::uint64_t seed = 0);

// columns: size,mode,macs,median_ms
std::string bench_to_csv(const std::vector<BenchRow>& rows);

}  // namespace coopdet
