#include "coopdet/common.hpp"

#include <cmath>

namespace coopdet {

double wrap_two_pi(double a) {
    double r = std::fmod(a, 2.0 * kPi);
    if (r < 0.0) r += 2.0 * kPi;
    return r;
}

double wrap_half_pi(double a) {
    double r = std::fmod(a, kPi);
    if (r > kPi / 2.0) r -= kPi;
    if (r <= -kPi / 2.0) r += kPi;
    return r;
}

}  // namespace coopdet
