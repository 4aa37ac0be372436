#include "taa/encoder.hpp"
#include "taa/nn.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

using namespace taa;

namespace {

BatchSeq random_batch(int channels, std::initializer_list<int> lengths, Rng& rng,
                      double sd = 1.0) {
    BatchSeq x;
    for (int t : lengths)
        x.items.push_back(
            Mat::NullaryExpr(channels, t, [&]() { return rng.normal(0.0, sd); }));
    return x;
}

BatchSeq like(const BatchSeq& x, Rng& rng) {
    BatchSeq w;
    for (const Mat& m : x.items)
        w.items.push_back(
            Mat::NullaryExpr(m.rows(), m.cols(), [&]() { return rng.normal(); }));
    return w;
}

double dot(const BatchSeq& a, const BatchSeq& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += (a.items[i].array() * b.items[i].array()).sum();
    return s;
}

// Central-difference check of dL/dp for one parameter tensor, where
// loss_fn() recomputes the scalar loss from scratch.
void check_param_grad(Parameter& p, const std::function<double()>& loss_fn,
                      double eps = 1e-6, double tol = 1e-5) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
        const double save = p.value.data()[i];
        p.value.data()[i] = save + eps;
        const double lp = loss_fn();
        p.value.data()[i] = save - eps;
        const double lm = loss_fn();
        p.value.data()[i] = save;
        const double fd = (lp - lm) / (2 * eps);
        INFO(p.name << "[" << i << "]");
        CHECK(p.grad.data()[i] == Catch::Approx(fd).epsilon(tol).margin(1e-7));
    }
}

} // namespace

TEST_CASE("conv1d: dilation preserves length and matches a direct sum") {
    Rng rng(3);
    Conv1d conv(2, 3, 3, 2, rng);
    BatchSeq x = random_batch(2, {7}, rng);
    const BatchSeq y = conv.forward(x, nullptr);
    REQUIRE(y.items[0].rows() == 3);
    REQUIRE(y.items[0].cols() == 7);
    // direct evaluation at one output position
    const Mat& w = conv.weight.value;
    const Mat& xi = x.items[0];
    for (Eigen::Index o = 0; o < 3; ++o) {
        double acc = conv.bias.value(o, 0);
        for (int tap = 0; tap < 3; ++tap) {
            const Eigen::Index src = 3 + (tap - 1) * 2; // center position 3
            for (Eigen::Index c = 0; c < 2; ++c)
                acc += w(o, tap * 2 + c) * xi(c, src);
        }
        CHECK(y.items[0](o, 3) == Catch::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("conv1d gradients match finite differences") {
    Rng rng(5);
    Conv1d conv(3, 4, 3, 2, rng);
    BatchSeq x = random_batch(3, {6, 9}, rng);
    BatchSeq w_loss = like(conv.forward(x, nullptr), rng);

    auto loss_fn = [&]() { return dot(conv.forward(x, nullptr), w_loss); };

    Conv1d::Trace tr;
    conv.forward(x, &tr);
    conv.weight.zero_grad();
    conv.bias.zero_grad();
    const BatchSeq dx = conv.backward(w_loss, tr);

    check_param_grad(conv.weight, loss_fn);
    check_param_grad(conv.bias, loss_fn);
    // input gradient
    const double eps = 1e-6;
    for (std::size_t it = 0; it < x.size(); ++it)
        for (Eigen::Index i = 0; i < x.items[it].size(); ++i) {
            const double save = x.items[it].data()[i];
            x.items[it].data()[i] = save + eps;
            const double lp = loss_fn();
            x.items[it].data()[i] = save - eps;
            const double lm = loss_fn();
            x.items[it].data()[i] = save;
            CHECK(dx.items[it].data()[i] ==
                  Catch::Approx((lp - lm) / (2 * eps)).epsilon(1e-5).margin(1e-8));
        }
}

TEST_CASE("batchnorm eval mode applies running statistics") {
    BatchNorm1d bn(2);
    bn.running_mean.value << 1.0, -2.0;
    bn.running_var.value << 4.0, 0.25;
    bn.gamma.value << 2.0, 1.0;
    bn.beta.value << 0.5, 0.0;
    BatchSeq x;
    x.items.push_back((Mat(2, 2) << 3.0, 1.0, -2.0, -1.5).finished());
    const BatchSeq y = bn.forward_eval(x);
    CHECK(y.items[0](0, 0) ==
          Catch::Approx(2.0 * (3.0 - 1.0) / std::sqrt(4.0 + 1e-5) + 0.5));
    CHECK(y.items[0](1, 1) ==
          Catch::Approx((-1.5 + 2.0) / std::sqrt(0.25 + 1e-5)));
}

TEST_CASE("batchnorm batch mode normalizes over every frame in the batch") {
    BatchNorm1d bn(2);
    bn.adapted = true;
    Rng rng(7);
    BatchSeq x = random_batch(2, {4, 6}, rng, 2.0);
    BatchNorm1d::Trace tr;
    const BatchSeq y = bn.forward_train(x, &tr);
    // per-channel mean of the output is 0, variance 1 (gamma=1, beta=0)
    for (int c = 0; c < 2; ++c) {
        double mean = 0.0, sq = 0.0;
        Eigen::Index n = 0;
        for (const Mat& m : y.items) {
            mean += m.row(c).sum();
            sq += m.row(c).array().square().sum();
            n += m.cols();
        }
        mean /= static_cast<double>(n);
        sq /= static_cast<double>(n);
        CHECK(mean == Catch::Approx(0.0).margin(1e-12));
        CHECK(sq - mean * mean == Catch::Approx(1.0).epsilon(1e-3));
    }
    // running stats moved toward the batch stats
    CHECK(bn.running_mean.value.col(0).norm() > 0.0);
}

TEST_CASE("batchnorm non-adapted training forward equals eval forward") {
    Rng rng(9);
    BatchNorm1d bn(3);
    bn.adapted = false;
    bn.running_mean.value << 0.2, -0.4, 1.0;
    bn.running_var.value << 1.1, 0.6, 2.0;
    BatchSeq x = random_batch(3, {5}, rng);
    BatchNorm1d::Trace tr;
    const BatchSeq a = bn.forward_train(x, &tr);
    const BatchSeq b = bn.forward_eval(x);
    CHECK((a.items[0] - b.items[0]).norm() == 0.0);
    CHECK_FALSE(tr.batch_mode);
}

TEST_CASE("batchnorm gradients: batch mode") {
    Rng rng(11);
    BatchNorm1d bn(3);
    bn.adapted = true;
    bn.gamma.value << 1.3, 0.7, -0.4;
    bn.beta.value << 0.2, -0.1, 0.05;
    BatchSeq x = random_batch(3, {5, 4}, rng);
    BatchSeq w_loss = like(x, rng);

    // forward_train mutates running stats; use throwaway copies in loss_fn
    auto loss_fn = [&]() {
        BatchNorm1d probe = bn;
        return dot(probe.forward_train(x, nullptr), w_loss);
    };

    BatchNorm1d work = bn;
    BatchNorm1d::Trace tr;
    work.forward_train(x, &tr);
    work.gamma.zero_grad();
    work.beta.zero_grad();
    const BatchSeq dx = work.backward(w_loss, tr);

    const double eps = 1e-6;
    for (std::size_t it = 0; it < x.size(); ++it)
        for (Eigen::Index i = 0; i < x.items[it].size(); ++i) {
            const double save = x.items[it].data()[i];
            x.items[it].data()[i] = save + eps;
            const double lp = loss_fn();
            x.items[it].data()[i] = save - eps;
            const double lm = loss_fn();
            x.items[it].data()[i] = save;
            CHECK(dx.items[it].data()[i] ==
                  Catch::Approx((lp - lm) / (2 * eps)).epsilon(1e-4).margin(1e-8));
        }
    for (Eigen::Index i = 0; i < 3; ++i) {
        const double save = bn.gamma.value(i, 0);
        bn.gamma.value(i, 0) = save + eps;
        const double lp = loss_fn();
        bn.gamma.value(i, 0) = save - eps;
        const double lm = loss_fn();
        bn.gamma.value(i, 0) = save;
        CHECK(work.gamma.grad(i, 0) ==
              Catch::Approx((lp - lm) / (2 * eps)).epsilon(1e-5).margin(1e-8));
    }
}

TEST_CASE("batchnorm gradients: eval mode (frozen stats)") {
    Rng rng(13);
    BatchNorm1d bn(2);
    bn.running_mean.value << 0.3, -0.6;
    bn.running_var.value << 1.5, 0.8;
    bn.gamma.value << 1.1, 0.9;
    BatchSeq x = random_batch(2, {4}, rng);
    BatchSeq w_loss = like(x, rng);

    auto loss_fn = [&]() { return dot(bn.forward_eval(x), w_loss); };

    BatchNorm1d::Trace tr;
    bn.forward_eval(x, &tr);
    bn.gamma.zero_grad();
    bn.beta.zero_grad();
    const BatchSeq dx = bn.backward(w_loss, tr);

    const double eps = 1e-6;
    for (Eigen::Index i = 0; i < x.items[0].size(); ++i) {
        const double save = x.items[0].data()[i];
        x.items[0].data()[i] = save + eps;
        const double lp = loss_fn();
        x.items[0].data()[i] = save - eps;
        const double lm = loss_fn();
        x.items[0].data()[i] = save;
        CHECK(dx.items[0].data()[i] ==
              Catch::Approx((lp - lm) / (2 * eps)).epsilon(1e-6).margin(1e-10));
    }
    check_param_grad(bn.gamma, loss_fn);
    check_param_grad(bn.beta, loss_fn);
}

TEST_CASE("SE module gates channels and its gradients check out") {
    Rng rng(17);
    SEModule se(4, 2, rng);
    BatchSeq x = random_batch(4, {5, 3}, rng);
    BatchSeq w_loss = like(x, rng);

    auto loss_fn = [&]() { return dot(se.forward(x, nullptr), w_loss); };

    SEModule::Trace tr;
    se.forward(x, &tr);
    for (Parameter* p : {&se.w1, &se.b1_, &se.w2, &se.b2_}) p->zero_grad();
    const BatchSeq dx = se.backward(w_loss, tr);

    check_param_grad(se.w1, loss_fn);
    check_param_grad(se.b1_, loss_fn);
    check_param_grad(se.w2, loss_fn);
    check_param_grad(se.b2_, loss_fn);

    const double eps = 1e-6;
    for (std::size_t it = 0; it < x.size(); ++it)
        for (Eigen::Index i = 0; i < x.items[it].size(); ++i) {
            const double save = x.items[it].data()[i];
            x.items[it].data()[i] = save + eps;
            const double lp = loss_fn();
            x.items[it].data()[i] = save - eps;
            const double lm = loss_fn();
            x.items[it].data()[i] = save;
            CHECK(dx.items[it].data()[i] ==
                  Catch::Approx((lp - lm) / (2 * eps)).epsilon(1e-4).margin(1e-8));
        }
}

TEST_CASE("L2 normalization: unit output and correct backward") {
    Rng rng(19);
    Mat x = Mat::NullaryExpr(4, 3, [&]() { return rng.normal(); });
    L2Normalize::Trace tr;
    const Mat y = L2Normalize::forward(x, &tr);
    for (Eigen::Index c = 0; c < 3; ++c)
        CHECK(y.col(c).norm() == Catch::Approx(1.0).margin(1e-12));

    Mat w_loss = Mat::NullaryExpr(4, 3, [&]() { return rng.normal(); });
    const Mat dx = L2Normalize::backward(w_loss, tr);
    auto loss_fn = [&]() {
        return (L2Normalize::forward(x).array() * w_loss.array()).sum();
    };
    const double eps = 1e-6;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double save = x.data()[i];
        x.data()[i] = save + eps;
        const double lp = loss_fn();
        x.data()[i] = save - eps;
        const double lm = loss_fn();
        x.data()[i] = save;
        CHECK(dx.data()[i] ==
              Catch::Approx((lp - lm) / (2 * eps)).epsilon(1e-5).margin(1e-9));
    }
}

TEST_CASE("res2 section: split-conv-chain forward and gradients") {
    Rng rng(23);
    Res2Section res2(8, 4, 3, 2, rng);
    BatchSeq x = random_batch(8, {6}, rng);
    // keep values away from ReLU kinks for the FD check
    for (Mat& m : x.items)
        m = m.unaryExpr([](double v) { return std::abs(v) < 0.05 ? v + 0.1 : v; });
    BatchSeq w_loss = like(x, rng);

    auto loss_fn = [&]() { return dot(res2.forward(x, nullptr, nullptr), w_loss); };

    Res2Section::Trace tr;
    const BatchSeq y = res2.forward(x, nullptr, &tr);
    REQUIRE(y.items[0].rows() == 8);
    // chunk 0 passes through untouched
    CHECK((y.items[0].topRows(2) - x.items[0].topRows(2)).norm() == 0.0);

    for (auto& c : res2.convs()) {
        c.weight.zero_grad();
        c.bias.zero_grad();
    }
    const BatchSeq dx = res2.backward(w_loss, tr, nullptr);
    for (auto& c : res2.convs()) {
        check_param_grad(c.weight, loss_fn, 1e-6, 1e-4);
        check_param_grad(c.bias, loss_fn, 1e-6, 1e-4);
    }
    const double eps = 1e-6;
    for (Eigen::Index i = 0; i < x.items[0].size(); ++i) {
        const double save = x.items[0].data()[i];
        x.items[0].data()[i] = save + eps;
        const double lp = loss_fn();
        x.items[0].data()[i] = save - eps;
        const double lm = loss_fn();
        x.items[0].data()[i] = save;
        CHECK(dx.items[0].data()[i] ==
              Catch::Approx((lp - lm) / (2 * eps)).epsilon(1e-4).margin(1e-7));
    }
}

TEST_CASE("attentive stats pooling: output block structure and gradients") {
    Rng rng(29);
    AttentiveStatsPool pool(4, 3, rng);
    BatchSeq x = random_batch(4, {7, 5}, rng);
    Mat w_loss = Mat::NullaryExpr(8, 2, [&]() { return rng.normal(); });

    auto loss_fn = [&]() {
        return (pool.forward(x, nullptr, nullptr).array() * w_loss.array()).sum();
    };

    AttentiveStatsPool::Trace tr;
    const Mat out = pool.forward(x, nullptr, &tr);
    REQUIRE(out.rows() == 8);
    REQUIRE(out.cols() == 2);
    // sigma entries are nonnegative
    for (Eigen::Index c = 0; c < 2; ++c)
        for (Eigen::Index r = 4; r < 8; ++r) CHECK(out(r, c) >= 0.0);

    for (Parameter* p : {&pool.w1, &pool.b1, &pool.w2, &pool.b2}) p->zero_grad();
    const BatchSeq dx = pool.backward(w_loss, tr, nullptr);

    check_param_grad(pool.w1, loss_fn, 1e-6, 1e-4);
    check_param_grad(pool.b1, loss_fn, 1e-6, 1e-4);
    check_param_grad(pool.w2, loss_fn, 1e-6, 1e-4);
    check_param_grad(pool.b2, loss_fn, 1e-6, 1e-4);
    const double eps = 1e-6;
    for (std::size_t it = 0; it < x.size(); ++it)
        for (Eigen::Index i = 0; i < x.items[it].size(); ++i) {
            const double save = x.items[it].data()[i];
            x.items[it].data()[i] = save + eps;
            const double lp = loss_fn();
            x.items[it].data()[i] = save - eps;
            const double lm = loss_fn();
            x.items[it].data()[i] = save;
            CHECK(dx.items[it].data()[i] ==
                  Catch::Approx((lp - lm) / (2 * eps)).epsilon(1e-4).margin(1e-7));
        }
}

TEST_CASE("linear gradients") {
    Rng rng(31);
    Linear lin(3, 2, rng);
    Mat x = Mat::NullaryExpr(3, 4, [&]() { return rng.normal(); });
    Mat w_loss = Mat::NullaryExpr(2, 4, [&]() { return rng.normal(); });
    auto loss_fn = [&]() { return (lin.forward(x).array() * w_loss.array()).sum(); };
    Linear::Trace tr;
    lin.forward(x, &tr);
    lin.weight.zero_grad();
    lin.bias.zero_grad();
    const Mat dx = lin.backward(w_loss, tr);
    check_param_grad(lin.weight, loss_fn);
    check_param_grad(lin.bias, loss_fn);
    const double eps = 1e-6;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double save = x.data()[i];
        x.data()[i] = save + eps;
        const double lp = loss_fn();
        x.data()[i] = save - eps;
        const double lm = loss_fn();
        x.data()[i] = save;
        CHECK(dx.data()[i] ==
              Catch::Approx((lp - lm) / (2 * eps)).epsilon(1e-6).margin(1e-10));
    }
}
