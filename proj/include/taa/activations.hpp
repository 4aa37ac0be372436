#pragma once

// The fixed, ordered basis of scalar activation functions mixed by the
// learnable activation machinery. Order is part of the contract:
//   0 ELU(alpha=1), 1 hard sigmoid, 2 ReLU, 3 softplus, 4 swish, 5 tanh
// Hard sigmoid is clip(x/6 + 0.5, 0, 1); softplus uses an overflow-safe
// branch; swish is x*sigmoid(x).

#include "taa/common.hpp"

#include <array>
#include <cmath>
#include <cstddef>
#include <string>

namespace taa {

inline constexpr std::size_t kActivationCount = 6;

enum class ActivationId : int {
    ELU = 0,
    HARD_SIGMOID = 1,
    RELU = 2,
    SOFTPLUS = 3,
    SWISH = 4,
    TANH = 5,
};

inline const std::array<std::string, kActivationCount>& activation_names() {
    static const std::array<std::string, kActivationCount> names = {
        "elu", "hard_sigmoid", "relu", "softplus", "swish", "tanh"};
    return names;
}

inline double activation_value(ActivationId id, double x) {
    switch (id) {
        case ActivationId::ELU:
            return x > 0.0 ? x : std::expm1(x);
        case ActivationId::HARD_SIGMOID: {
            const double y = x / 6.0 + 0.5;
            return y < 0.0 ? 0.0 : (y > 1.0 ? 1.0 : y);
        }
        case ActivationId::RELU:
            return x > 0.0 ? x : 0.0;
        case ActivationId::SOFTPLUS:
            return softplus(x);
        case ActivationId::SWISH:
            return x * sigmoid(x);
        case ActivationId::TANH:
            return std::tanh(x);
    }
    return 0.0;
}

inline double activation_derivative(ActivationId id, double x) {
    switch (id) {
        case ActivationId::ELU:
            return x > 0.0 ? 1.0 : std::exp(x);
        case ActivationId::HARD_SIGMOID:
            return (x > -3.0 && x < 3.0) ? 1.0 / 6.0 : 0.0;
        case ActivationId::RELU:
            return x > 0.0 ? 1.0 : 0.0;
        case ActivationId::SOFTPLUS:
            return sigmoid(x);
        case ActivationId::SWISH: {
            const double s = sigmoid(x);
            return s + x * s * (1.0 - s);
        }
        case ActivationId::TANH: {
            const double t = std::tanh(x);
            return 1.0 - t * t;
        }
    }
    return 0.0;
}

// The ordered basis. A single shared instance is enough: the functions are
// fixed by contract and never learned.
struct ActivationBasis {
    static constexpr std::size_t size() { return kActivationCount; }

    static ActivationId id(std::size_t i) { return static_cast<ActivationId>(i); }

    static double value(std::size_t i, double x) {
        return activation_value(id(i), x);
    }

    static double derivative(std::size_t i, double x) {
        return activation_derivative(id(i), x);
    }

    // a^-1 * sum_i A_i(x); the reference level for normalized profiles.
    static double mean_value(double x) {
        double s = 0.0;
        for (std::size_t i = 0; i < size(); ++i) s += value(i, x);
        return s / static_cast<double>(size());
    }
};

} // namespace taa
