#pragma once

// Detection scoring and evaluation: keyword probability via the fixed-TE
// classifier (sigmoid of the AE/TE cosine), binary cross-entropy, EER with
// linear interpolation between bracketing operating points, and
// step-interpolated average precision. Scores carry a mode tag so cosine
// scores and probabilities are never mixed in one set.

#include "taa/common.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

namespace taa {

enum class ScoreMode { COSINE, PROBABILITY };

struct DetectionScore {
    double score = 0.0;
    bool positive = false;
};

struct ScoreSet {
    std::vector<DetectionScore> scores;
    std::string keyword;
    ScoreMode mode = ScoreMode::COSINE;

    int n_pos() const {
        return static_cast<int>(
            std::count_if(scores.begin(), scores.end(),
                          [](const DetectionScore& s) { return s.positive; }));
    }
    int n_neg() const { return static_cast<int>(scores.size()) - n_pos(); }
};

struct MetricsReport {
    double eer = 0.0; // percent
    double ap = 0.0;  // percent
    int n_pos = 0;
    int n_neg = 0;
    int sampling_id = 0;
    std::string keyword;
    ScoreMode mode = ScoreMode::COSINE;
};

// p(k|x) = sigmoid(te . ae); the logit is the cosine of the two unit-norm
// embeddings.
inline double keyword_probability(const Vec& ae, const Vec& te) {
    if (ae.size() != te.size())
        throw ShapeError("keyword_probability: dimension mismatch (" +
                         std::to_string(ae.size()) + " vs " +
                         std::to_string(te.size()) + ")");
    return sigmoid(te.dot(ae));
}

// -[y log p + (1-y) log(1-p)], with p clamped to [1e-7, 1-1e-7].
inline double bce_loss(double p, int label) {
    const double q = std::min(1.0 - 1e-7, std::max(1e-7, p));
    return label == 1 ? -std::log(q) : -std::log(1.0 - q);
}

namespace detail {

// Operating points of the accept-if-score>=threshold rule, sweeping the
// threshold from +inf down through every distinct score. Equal scores
// collapse into one step.
struct RocPoint {
    double far; // false accepts / negatives
    double frr; // false rejects / positives
};

inline std::vector<RocPoint> roc_points(const ScoreSet& set) {
    const int np = set.n_pos();
    const int nn = set.n_neg();
    std::vector<const DetectionScore*> sorted;
    sorted.reserve(set.scores.size());
    for (const auto& s : set.scores) sorted.push_back(&s);
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const DetectionScore* a, const DetectionScore* b) {
                         return a->score > b->score;
                     });
    std::vector<RocPoint> pts;
    pts.push_back({0.0, 1.0}); // threshold above every score
    int accepted_pos = 0, accepted_neg = 0;
    std::size_t i = 0;
    while (i < sorted.size()) {
        const double v = sorted[i]->score;
        while (i < sorted.size() && sorted[i]->score == v) {
            if (sorted[i]->positive)
                ++accepted_pos;
            else
                ++accepted_neg;
            ++i;
        }
        pts.push_back({static_cast<double>(accepted_neg) / nn,
                       static_cast<double>(np - accepted_pos) / np});
    }
    return pts;
}

} // namespace detail

// Equal error rate in percent. Linear interpolation between the two
// operating points that bracket FAR = FRR.
inline double compute_eer(const ScoreSet& set) {
    if (set.n_pos() == 0 || set.n_neg() == 0)
        throw MetricError("compute_eer: needs at least one positive and one negative");
    const auto pts = detail::roc_points(set);
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
        const auto& a = pts[i];
        const auto& b = pts[i + 1];
        const double da = a.far - a.frr; // <= 0 before the crossing
        const double db = b.far - b.frr;
        if (db < 0.0) continue;
        if (da == 0.0) return 100.0 * a.far;
        // crossing inside (a, b]
        const double denom = (b.far - a.far) - (b.frr - a.frr);
        const double t = denom != 0.0 ? (a.frr - a.far) / denom : 1.0;
        return 100.0 * (a.far + t * (b.far - a.far));
    }
    return 100.0 * pts.back().far; // FAR never reaches FRR: accept-all point
}

// Average precision in percent: sum over positives of precision-at-rank,
// descending-score order, ties broken by stable input order.
inline double compute_ap(const ScoreSet& set) {
    if (set.n_pos() == 0)
        throw MetricError("compute_ap: needs at least one positive");
    if (set.n_neg() == 0)
        throw MetricError("compute_ap: needs at least one negative");
    std::vector<std::size_t> order(set.scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return set.scores[a].score > set.scores[b].score;
    });
    double sum_prec = 0.0;
    int tp = 0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
        if (!set.scores[order[rank]].positive) continue;
        ++tp;
        sum_prec += static_cast<double>(tp) / static_cast<double>(rank + 1);
    }
    return 100.0 * sum_prec / static_cast<double>(set.n_pos());
}

inline MetricsReport evaluate(const ScoreSet& set, int sampling_id = 0) {
    MetricsReport r;
    r.eer = compute_eer(set);
    r.ap = compute_ap(set);
    r.n_pos = set.n_pos();
    r.n_neg = set.n_neg();
    r.sampling_id = sampling_id;
    r.keyword = set.keyword;
    r.mode = set.mode;
    return r;
}

// Arithmetic mean over samplings of the same keyword and score mode.
inline MetricsReport aggregate(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw MetricError("aggregate: empty report list");
    MetricsReport out = reports.front();
    for (const auto& r : reports) {
        if (r.mode != out.mode)
            throw MetricError("aggregate: mixed score modes");
        if (r.keyword != out.keyword)
            throw MetricError("aggregate: mixed keywords");
    }
    out.eer = 0.0;
    out.ap = 0.0;
    for (const auto& r : reports) {
        out.eer += r.eer;
        out.ap += r.ap;
    }
    const auto n = static_cast<double>(reports.size());
    out.eer /= n;
    out.ap /= n;
    out.sampling_id = -1; // aggregate row
    return out;
}

} // namespace taa
