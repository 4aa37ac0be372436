#pragma once

// Text-conditioned feature modulation: learnable activation functions whose
// mixture weights come from the text embedding, plus the AdaIN-style
// conditioning used by the KAM baseline. All functions here are pure given
// their inputs; activation sites compute the mixture weights once per
// forward call and reuse them for every frame of every utterance in the
// batch (the weights depend only on the text embedding, not on time).

#include "taa/activations.hpp"
#include "taa/common.hpp"
#include "taa/nn.hpp"

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace taa {

// Conditioning carried through a forward pass. `te` must be unit-norm.
struct ConditioningContext {
    Vec te;
};

// ─── LAF site ────────────────────────────────────────────────────────────────
// Per-location parameters of the learnable activation: s = softmax(te.w + b),
// y = sum_i s_i A_i(h). Trainable count per site is d*a weights + a biases.

struct LAFSite {
    Parameter w; // d x a
    Parameter b; // a x 1

    LAFSite() = default;
    explicit LAFSite(int d) {
        w.init_zero(d, static_cast<Eigen::Index>(ActivationBasis::size()));
        b.init_zero(static_cast<Eigen::Index>(ActivationBasis::size()), 1);
    }

    int embed_dim() const { return static_cast<int>(w.value.rows()); }

    // Biases the softmax toward ReLU so a freshly attached site starts close
    // to the activation it replaces.
    void bias_toward_relu(double strength) {
        b.value.setZero();
        b.value(static_cast<int>(ActivationId::RELU), 0) = strength;
    }
};

// Mixture weights for one (te, site) pair; always a point on the simplex.
inline Vec laf_weights(const Vec& te, const LAFSite& site) {
    if (te.size() != site.w.value.rows())
        throw ShapeError("laf_weights: te dimension " + std::to_string(te.size()) +
                         " does not match site d=" +
                         std::to_string(site.w.value.rows()));
    Vec z = site.w.value.transpose() * te + site.b.value.col(0);
    return softmax(z);
}

// Elementwise mixture of the basis activations; same shape as h.
inline Mat laf_apply(const Mat& h, const Vec& s) {
    Mat y = Mat::Zero(h.rows(), h.cols());
    for (std::size_t i = 0; i < ActivationBasis::size(); ++i) {
        const double si = s(static_cast<Eigen::Index>(i));
        if (si == 0.0) continue;
        y += si * h.unaryExpr([i](double v) { return ActivationBasis::value(i, v); });
    }
    return y;
}

// Profile of the learned activation relative to the basis average:
// y(h) = LAF(h|te) - a^-1 sum_i A_i(h), evaluated on a grid in [-3, 3].
inline std::vector<std::pair<double, double>>
laf_normalized_profile(const LAFSite& site, const Vec& te,
                       const std::vector<double>& grid) {
    if (grid.empty())
        throw ConfigError("laf_normalized_profile: empty grid");
    for (double h : grid)
        if (h < -3.0 || h > 3.0)
            throw ConfigError("laf_normalized_profile: grid point outside [-3, 3]");
    const Vec s = laf_weights(te, site);
    std::vector<std::pair<double, double>> out;
    out.reserve(grid.size());
    for (double h : grid) {
        double y = 0.0;
        for (std::size_t i = 0; i < ActivationBasis::size(); ++i)
            y += s(static_cast<Eigen::Index>(i)) * ActivationBasis::value(i, h);
        out.emplace_back(h, y - ActivationBasis::mean_value(h));
    }
    return out;
}

inline std::vector<double> laf_profile_grid(int points = 121) {
    std::vector<double> grid(static_cast<std::size_t>(points));
    for (int i = 0; i < points; ++i)
        grid[static_cast<std::size_t>(i)] =
            -3.0 + 6.0 * static_cast<double>(i) / static_cast<double>(points - 1);
    return grid;
}

// ─── Conditioning parameter accounting ──────────────────────────────────────

enum class ConditioningKind { TCFM, ADAIN };

struct ConditioningCost {
    long long weights = 0;
    long long biases = 0;
    long long total() const { return weights + biases; }
};

// TCFM per-site cost is d*a weights (+a bias, reported separately); AdaIN
// costs d*2*f for the projection (+2f bias).
inline ConditioningCost conditioning_param_count(ConditioningKind kind, int d,
                                                 int f, int a) {
    if (d <= 0 || (kind == ConditioningKind::TCFM ? a <= 0 : f <= 0))
        throw ConfigError("conditioning_param_count: dimensions must be positive");
    ConditioningCost c;
    if (kind == ConditioningKind::TCFM) {
        c.weights = static_cast<long long>(d) * a;
        c.biases = a;
    } else {
        c.weights = static_cast<long long>(d) * 2 * f;
        c.biases = 2LL * f;
    }
    return c;
}

// ─── AdaIN site ──────────────────────────────────────────────────────────────
// Linear projection of the text embedding into per-channel scale/bias applied
// to instance-normalized features: y_c = gamma_c * (h_c - mu_c)/sd_c + beta_c.

struct AdaINSite {
    Parameter w; // 2f x d
    Parameter b; // 2f x 1, top half gamma bias (init 1), bottom half beta
    int channels = 0;

    AdaINSite() = default;
    AdaINSite(int d, int f) : channels(f) {
        w.init_zero(2 * f, d);
        b.init_zero(2 * f, 1);
        b.value.topRows(f).setOnes();
    }

    static constexpr double kEps = 1e-5;

    struct Trace {
        Mat xhat;
        Vec invstd;
        Vec gamma;
        Vec te;
    };

    // h: f x T single utterance.
    Mat apply(const Mat& h, const Vec& te, Trace* tr = nullptr) const {
        if (h.rows() != channels)
            throw ShapeError("adain_apply: feature channels " +
                             std::to_string(h.rows()) + " != site f=" +
                             std::to_string(channels));
        Vec proj = w.value * te + b.value.col(0);
        Vec gamma = proj.head(channels);
        Vec beta = proj.tail(channels);

        const double t_len = static_cast<double>(h.cols());
        Vec mean = h.rowwise().mean();
        Vec var = (h.colwise() - mean).array().square().rowwise().sum() / t_len;
        Vec invstd = (var.array() + kEps).sqrt().inverse();
        Mat xhat = (h.colwise() - mean).array().colwise() * invstd.array();
        Mat y = xhat.array().colwise() * gamma.array();
        y.colwise() += beta;
        if (tr) {
            tr->xhat = xhat;
            tr->invstd = invstd;
            tr->gamma = gamma;
            tr->te = te;
        }
        return y;
    }

    // Accumulates grads for w, b; returns dh.
    Mat backward(const Mat& dy, const Trace& tr) {
        const auto f = static_cast<Eigen::Index>(channels);
        Vec dgamma = (dy.array() * tr.xhat.array()).rowwise().sum();
        Vec dbeta = dy.rowwise().sum();
        Vec dproj(2 * f);
        dproj << dgamma, dbeta;
        w.grad.noalias() += dproj * tr.te.transpose();
        b.grad.col(0) += dproj;

        // Instance-norm backward per channel (row), biased variance.
        const double t_len = static_cast<double>(dy.cols());
        Mat dxhat = dy.array().colwise() * tr.gamma.array();
        Vec mean_dxhat = dxhat.rowwise().mean();
        Vec mean_dxhat_xhat = (dxhat.array() * tr.xhat.array()).rowwise().sum() / t_len;
        Mat term = dxhat.colwise() - mean_dxhat;
        term -= (tr.xhat.array().colwise() * mean_dxhat_xhat.array()).matrix();
        return term.array().colwise() * tr.invstd.array();
    }
};

inline Mat adain_apply(const Mat& h, const Vec& te, const AdaINSite& site) {
    return site.apply(h, te);
}

// ─── Activation site ─────────────────────────────────────────────────────────
// One replaceable nonlinearity in the encoder. Defaults to a fixed ReLU;
// attaching a LAFSite makes it text-conditioned. The mixture weights are
// computed once per forward call and shared by the whole batch.

class ActSite {
  public:
    LayerGroupId group = LayerGroupId::G0;
    int site_index = 0;
    std::unique_ptr<LAFSite> laf; // null -> fixed activation
    ActivationId fixed = ActivationId::RELU;

    bool conditioned() const { return laf != nullptr; }

    struct Trace {
        BatchSeq h;
        Vec s; // mixture weights when conditioned
    };

    BatchSeq forward(const BatchSeq& h, const ConditioningContext* ctx,
                     Trace* tr) const {
        BatchSeq y;
        y.items.reserve(h.size());
        if (!laf) {
            const ActivationId id = fixed;
            for (const Mat& hi : h.items)
                y.items.push_back(hi.unaryExpr(
                    [id](double v) { return activation_value(id, v); }));
            if (tr) tr->h = h;
            return y;
        }
        if (!ctx)
            throw MissingConditioningError(
                "activation site " + to_string(group) + "#" +
                std::to_string(site_index) +
                " has an active LAF but no conditioning context was provided");
        const Vec s = laf_weights(ctx->te, *laf);
        for (const Mat& hi : h.items) y.items.push_back(laf_apply(hi, s));
        if (tr) {
            tr->h = h;
            tr->s = s;
        }
        return y;
    }

    // Accumulates LAF parameter grads (when conditioned); returns dh.
    BatchSeq backward(const BatchSeq& dy, const Trace& tr,
                      const ConditioningContext* ctx) {
        BatchSeq dh;
        dh.items.reserve(dy.size());
        if (!laf) {
            const ActivationId id = fixed;
            for (std::size_t i = 0; i < dy.size(); ++i)
                dh.items.push_back(
                    dy.items[i].array() *
                    tr.h.items[i]
                        .unaryExpr([id](double v) {
                            return activation_derivative(id, v);
                        })
                        .array());
            return dh;
        }
        Vec ds = Vec::Zero(static_cast<Eigen::Index>(ActivationBasis::size()));
        for (std::size_t i = 0; i < dy.size(); ++i) {
            const Mat& hi = tr.h.items[i];
            const Mat& dyi = dy.items[i];
            Mat dhi = Mat::Zero(hi.rows(), hi.cols());
            for (std::size_t a = 0; a < ActivationBasis::size(); ++a) {
                const double sa = tr.s(static_cast<Eigen::Index>(a));
                ds(static_cast<Eigen::Index>(a)) +=
                    (dyi.array() *
                     hi.unaryExpr([a](double v) { return ActivationBasis::value(a, v); })
                         .array())
                        .sum();
                dhi += sa * (dyi.array() *
                             hi.unaryExpr([a](double v) {
                                   return ActivationBasis::derivative(a, v);
                               }).array())
                                .matrix();
            }
            dh.items.push_back(std::move(dhi));
        }
        const Vec dz = softmax_backward(tr.s, ds);
        laf->w.grad.noalias() += ctx->te * dz.transpose();
        laf->b.grad.col(0) += dz;
        return dh;
    }
};

} // namespace taa
