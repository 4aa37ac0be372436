#include "taa/metrics.hpp"
#include "taa/rng.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

using namespace taa;

namespace {

ScoreSet make_set(std::initializer_list<double> pos, std::initializer_list<double> neg) {
    ScoreSet s;
    for (double v : pos) s.scores.push_back({v, true});
    for (double v : neg) s.scores.push_back({v, false});
    return s;
}

// ─── Brute-force oracles ─────────────────────────────────────────────────────
// Independent O(n^2) recount implementations used to pin the fast paths.

// EER oracle: recount FAR/FRR at every operating point by scanning the whole
// set per threshold, then apply the documented linear interpolation between
// the two points bracketing FAR = FRR.
double eer_oracle(const ScoreSet& set) {
    std::vector<double> thresholds;
    for (const auto& s : set.scores) thresholds.push_back(s.score);
    std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()),
                     thresholds.end());

    int np = 0, nn = 0;
    for (const auto& s : set.scores) (s.positive ? np : nn)++;

    std::vector<std::pair<double, double>> pts; // (far, frr)
    pts.emplace_back(0.0, 1.0);
    for (double th : thresholds) {
        int fa = 0, fr = 0;
        for (const auto& s : set.scores) {
            const bool accept = s.score >= th;
            if (accept && !s.positive) ++fa;
            if (!accept && s.positive) ++fr;
        }
        pts.emplace_back(static_cast<double>(fa) / nn, static_cast<double>(fr) / np);
    }
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
        const auto [a_far, a_frr] = pts[i];
        const auto [b_far, b_frr] = pts[i + 1];
        if (b_far - b_frr < 0.0) continue;
        if (a_far - a_frr == 0.0) return 100.0 * a_far;
        const double denom = (b_far - a_far) - (b_frr - a_frr);
        const double t = denom != 0.0 ? (a_frr - a_far) / denom : 1.0;
        return 100.0 * (a_far + t * (b_far - a_far));
    }
    return 100.0 * pts.back().first;
}

// AP oracle: explicit rank-by-rank precision recount (O(n^2)), stable
// descending order with input order breaking ties.
double ap_oracle(const ScoreSet& set) {
    const auto n = set.scores.size();
    std::vector<std::size_t> order;
    std::vector<bool> used(n, false);
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t best = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (used[i]) continue;
            if (best == n || set.scores[i].score > set.scores[best].score) best = i;
        }
        used[best] = true;
        order.push_back(best);
    }
    int np = 0;
    for (const auto& s : set.scores) np += s.positive ? 1 : 0;
    double sum = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        if (!set.scores[order[r]].positive) continue;
        int tp = 0;
        for (std::size_t q = 0; q <= r; ++q)
            if (set.scores[order[q]].positive) ++tp;
        sum += static_cast<double>(tp) / static_cast<double>(r + 1);
    }
    return 100.0 * sum / np;
}

} // namespace

TEST_CASE("keyword probability: sigma of the cosine") {
    Vec te = Vec::Zero(4);
    te(0) = 1.0;
    SECTION("identical embeddings -> sigma(1)") {
        CHECK(keyword_probability(te, te) == Catch::Approx(0.7310585786).margin(1e-9));
    }
    SECTION("orthogonal -> 0.5") {
        Vec ae = Vec::Zero(4);
        ae(1) = 1.0;
        CHECK(keyword_probability(ae, te) == 0.5);
    }
    SECTION("opposite -> sigma(-1)") {
        CHECK(keyword_probability((-te).eval(), te) ==
              Catch::Approx(0.2689414214).margin(1e-9));
    }
    SECTION("dimension mismatch") {
        CHECK_THROWS_AS(keyword_probability(Vec::Zero(3), te), ShapeError);
    }
}

TEST_CASE("logit equals cosine for unit-norm inputs") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        Vec a = Vec::NullaryExpr(8, [&]() { return rng.normal(); });
        Vec b = Vec::NullaryExpr(8, [&]() { return rng.normal(); });
        a /= a.norm();
        b /= b.norm();
        const double cosine = a.dot(b) / (a.norm() * b.norm());
        CHECK(std::abs(sigmoid(a.dot(b)) - sigmoid(cosine)) < 1e-9);
    }
}

TEST_CASE("bce loss reference values") {
    CHECK(bce_loss(0.5, 1) == Catch::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(bce_loss(0.5, 0) == Catch::Approx(std::log(2.0)).epsilon(1e-12));
    // BCE(sigmoid(1), 1) = softplus(-1)
    CHECK(bce_loss(sigmoid(1.0), 1) ==
          Catch::Approx(std::log1p(std::exp(-1.0))).margin(1e-10));
    // clamping keeps extreme probabilities finite
    CHECK(std::isfinite(bce_loss(0.0, 1)));
    CHECK(std::isfinite(bce_loss(1.0, 0)));
}

TEST_CASE("batch BCE equals the mean of per-element oracle values") {
    Rng rng(5);
    double sum = 0.0;
    std::vector<std::pair<double, int>> batch;
    for (int i = 0; i < 16; ++i) {
        const double p = rng.uniform(0.01, 0.99);
        const int y = rng.index(2) == 0 ? 0 : 1;
        batch.emplace_back(p, y);
        sum += y == 1 ? -std::log(p) : -std::log(1 - p); // scalar oracle
    }
    double mean = 0.0;
    for (const auto& [p, y] : batch) mean += bce_loss(p, y);
    mean /= batch.size();
    CHECK(mean == Catch::Approx(sum / batch.size()).epsilon(1e-12));
}

TEST_CASE("EER reference cases") {
    CHECK(compute_eer(make_set({0.9, 0.8}, {0.1, 0.2})) == 0.0);
    CHECK(compute_eer(make_set({0.8, 0.4}, {0.6, 0.2})) == 50.0);
    CHECK(compute_eer(make_set({0.9}, {0.9})) == 50.0); // tie = one step
}

TEST_CASE("AP reference cases") {
    // ranking pos, neg, pos, neg
    CHECK(compute_ap(make_set({0.9, 0.7}, {0.8, 0.6})) ==
          Catch::Approx(100.0 * (1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-12));
    CHECK(compute_ap(make_set({0.9, 0.8}, {0.2, 0.1})) == 100.0);
    // single positive ranked last of four
    CHECK(compute_ap(make_set({0.1}, {0.9, 0.8, 0.7})) == 25.0);
}

TEST_CASE("degenerate sets raise metric errors") {
    ScoreSet all_pos = make_set({0.5, 0.6}, {});
    CHECK_THROWS_AS(compute_eer(all_pos), MetricError);
    CHECK_THROWS_AS(compute_ap(all_pos), MetricError);
    ScoreSet all_neg = make_set({}, {0.5});
    CHECK_THROWS_AS(compute_eer(all_neg), MetricError);
    CHECK_THROWS_AS(compute_ap(all_neg), MetricError);
}

TEST_CASE("randomized sweep: fast metrics equal brute-force oracles exactly") {
    std::mt19937_64 gen(12345);
    std::uniform_int_distribution<int> size_dist(2, 12);
    std::uniform_int_distribution<int> grid(0, 10);
    int cases = 0;
    while (cases < 2000) {
        const int n = size_dist(gen);
        ScoreSet set;
        for (int i = 0; i < n; ++i)
            set.scores.push_back({grid(gen) / 10.0, gen() % 2 == 0});
        if (set.n_pos() == 0 || set.n_neg() == 0) continue;
        ++cases;
        CHECK(compute_eer(set) == eer_oracle(set));
        CHECK(compute_ap(set) == ap_oracle(set));
    }
}

TEST_CASE("strictly increasing transforms leave EER and AP unchanged") {
    std::mt19937_64 gen(777);
    std::uniform_real_distribution<double> val(-1.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        ScoreSet set;
        const int n = 3 + static_cast<int>(gen() % 9);
        for (int i = 0; i < n; ++i) set.scores.push_back({val(gen), gen() % 2 == 0});
        if (set.n_pos() == 0 || set.n_neg() == 0) continue;
        ScoreSet warped = set;
        for (auto& s : warped.scores) s.score = std::tanh(2.0 * s.score) + 3.0;
        CHECK(compute_eer(set) == Catch::Approx(compute_eer(warped)).margin(1e-12));
        CHECK(compute_ap(set) == Catch::Approx(compute_ap(warped)).margin(1e-12));
    }
}

TEST_CASE("EER is symmetric under score negation with swapped labels") {
    std::mt19937_64 gen(999);
    std::uniform_real_distribution<double> val(-1.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        ScoreSet set;
        const int n = 3 + static_cast<int>(gen() % 9);
        for (int i = 0; i < n; ++i) set.scores.push_back({val(gen), gen() % 2 == 0});
        if (set.n_pos() == 0 || set.n_neg() == 0) continue;
        ScoreSet mirrored = set;
        for (auto& s : mirrored.scores) {
            s.score = -s.score;
            s.positive = !s.positive;
        }
        CHECK(compute_eer(set) == Catch::Approx(compute_eer(mirrored)).margin(1e-12));
    }
}

TEST_CASE("AP is 100 exactly when every positive outranks every negative") {
    std::mt19937_64 gen(31337);
    std::uniform_real_distribution<double> val(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        ScoreSet set;
        const int n = 4 + static_cast<int>(gen() % 8);
        for (int i = 0; i < n; ++i) set.scores.push_back({val(gen), gen() % 2 == 0});
        if (set.n_pos() == 0 || set.n_neg() == 0) continue;
        double min_pos = 1e9, max_neg = -1e9;
        for (const auto& s : set.scores)
            if (s.positive)
                min_pos = std::min(min_pos, s.score);
            else
                max_neg = std::max(max_neg, s.score);
        const bool separated = min_pos > max_neg;
        CHECK((compute_ap(set) == 100.0) == separated);
    }
}

TEST_CASE("aggregate: arithmetic mean with mode/keyword guards") {
    MetricsReport a;
    a.eer = 10.0;
    a.ap = 80.0;
    a.keyword = "seven";
    a.mode = ScoreMode::COSINE;
    MetricsReport b = a;
    b.eer = 20.0;
    b.ap = 90.0;

    SECTION("two reports average") {
        const auto m = aggregate({a, b});
        CHECK(m.ap == 85.0);
        CHECK(m.eer == 15.0);
    }
    SECTION("five identical reports keep their values") {
        const auto m = aggregate({a, a, a, a, a});
        CHECK(m.ap == a.ap);
        CHECK(m.eer == a.eer);
    }
    SECTION("five distinct reports match an independent mean") {
        std::vector<MetricsReport> rs;
        double sum_ap = 0.0, sum_eer = 0.0;
        for (int i = 0; i < 5; ++i) {
            MetricsReport r = a;
            r.ap = 70.0 + 3.0 * i;
            r.eer = 5.0 + 1.7 * i;
            sum_ap += r.ap;
            sum_eer += r.eer;
            rs.push_back(r);
        }
        const auto m = aggregate(rs);
        CHECK(m.ap == Catch::Approx(sum_ap / 5.0).epsilon(1e-12));
        CHECK(m.eer == Catch::Approx(sum_eer / 5.0).epsilon(1e-12));
    }
    SECTION("mixed modes are rejected") {
        MetricsReport c = a;
        c.mode = ScoreMode::PROBABILITY;
        CHECK_THROWS_AS(aggregate({a, c}), MetricError);
    }
    SECTION("empty input is rejected") {
        CHECK_THROWS_AS(aggregate({}), MetricError);
    }
}
