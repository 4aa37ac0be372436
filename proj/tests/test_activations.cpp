#include "taa/activations.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace taa;

TEST_CASE("basis order and count are fixed") {
    REQUIRE(ActivationBasis::size() == 6);
    REQUIRE(activation_names()[0] == "elu");
    REQUIRE(activation_names()[1] == "hard_sigmoid");
    REQUIRE(activation_names()[2] == "relu");
    REQUIRE(activation_names()[3] == "softplus");
    REQUIRE(activation_names()[4] == "swish");
    REQUIRE(activation_names()[5] == "tanh");
}

TEST_CASE("activation values at reference points") {
    // ELU(alpha=1)
    CHECK(activation_value(ActivationId::ELU, 2.0) == 2.0);
    CHECK(activation_value(ActivationId::ELU, -1.0) ==
          Catch::Approx(std::exp(-1.0) - 1.0).epsilon(1e-14));
    // hard sigmoid = clip(x/6 + 0.5, 0, 1)
    CHECK(activation_value(ActivationId::HARD_SIGMOID, 0.0) == 0.5);
    CHECK(activation_value(ActivationId::HARD_SIGMOID, -3.0) == 0.0);
    CHECK(activation_value(ActivationId::HARD_SIGMOID, 3.0) == 1.0);
    CHECK(activation_value(ActivationId::HARD_SIGMOID, 1.5) == Catch::Approx(0.75));
    // ReLU
    CHECK(activation_value(ActivationId::RELU, -2.0) == 0.0);
    CHECK(activation_value(ActivationId::RELU, 2.5) == 2.5);
    // softplus
    CHECK(activation_value(ActivationId::SOFTPLUS, 0.0) ==
          Catch::Approx(std::log(2.0)).epsilon(1e-14));
    // large-x overflow safety: softplus(x) ~ x
    CHECK(activation_value(ActivationId::SOFTPLUS, 800.0) == Catch::Approx(800.0));
    CHECK(std::isfinite(activation_value(ActivationId::SOFTPLUS, 1e4)));
    // swish
    CHECK(activation_value(ActivationId::SWISH, 0.0) == 0.0);
    CHECK(activation_value(ActivationId::SWISH, 1.0) ==
          Catch::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-14));
    // tanh
    CHECK(activation_value(ActivationId::TANH, 0.5) == Catch::Approx(std::tanh(0.5)));
}

TEST_CASE("derivatives match central finite differences away from kinks") {
    const double h = 1e-6;
    // sample points avoiding 0 (ReLU/ELU kink) and +-3 (hard sigmoid kinks)
    const double points[] = {-2.3, -1.1, -0.4, 0.7, 1.9, 2.6};
    for (std::size_t i = 0; i < ActivationBasis::size(); ++i) {
        for (double x : points) {
            const double fd = (ActivationBasis::value(i, x + h) -
                               ActivationBasis::value(i, x - h)) /
                              (2.0 * h);
            const double an = ActivationBasis::derivative(i, x);
            INFO("basis " << activation_names()[i] << " at x=" << x);
            CHECK(an == Catch::Approx(fd).margin(1e-8));
        }
    }
}

TEST_CASE("basis mean is the average of the six functions") {
    for (double x : {-3.0, -0.5, 0.0, 1.2, 3.0}) {
        double s = 0.0;
        for (std::size_t i = 0; i < ActivationBasis::size(); ++i)
            s += ActivationBasis::value(i, x);
        CHECK(ActivationBasis::mean_value(x) == Catch::Approx(s / 6.0).epsilon(1e-15));
    }
}
