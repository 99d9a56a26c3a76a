#include "dseg/tensor.hpp"

#include <cmath>
#include <string>

namespace dseg {

Tensor4::Tensor4(int n_, int c_, int h_, int w_, double fill)
    : n(n_), c(c_), h(h_), w(w_) {
    if (n < 0 || c < 0 || h < 0 || w < 0) {
        throw ArgumentError("Tensor4 dims must be non-negative");
    }
    data.assign(static_cast<std::size_t>(n) * c * h * w, fill);
}

void ConvParams::validate() const {
    if (weight.h < 1 || weight.w < 1) {
        throw ConfigError("conv kernel dims must be >= 1");
    }
    if (dilation < 1) {
        throw ConfigError("conv dilation must be >= 1");
    }
    if (stride < 1) {
        throw ConfigError("conv stride must be >= 1");
    }
    if (padding < 0) {
        throw ConfigError("conv padding must be >= 0");
    }
    if (static_cast<int>(bias.size()) != weight.n) {
        throw ConfigError("conv bias size " + std::to_string(bias.size()) +
                          " does not match out channels " + std::to_string(weight.n));
    }
}

void check_finite(const Tensor4& t, const char* what) {
    for (double v : t.data) {
        if (!std::isfinite(v)) {
            throw DataError(std::string(what) + ": non-finite value");
        }
    }
}

void check_finite(const std::vector<double>& v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw DataError(std::string(what) + ": non-finite value");
        }
    }
}

}  // namespace dseg
