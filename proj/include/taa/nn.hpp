#pragma once

// Minimal layer zoo with explicit forward/backward passes over ragged
// batches of channel-major sequences. Forward paths that only read the
// model are const; traces needed for backprop live in caller-owned Trace
// structs so a frozen model can serve concurrent readers.

#include "taa/common.hpp"
#include "taa/rng.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace taa {

// A named, tagged parameter tensor. Gradients accumulate into `grad`;
// `trainable` is flipped by adapter plans, never by layers themselves.
struct Parameter {
    std::string name;
    LayerGroupId group = LayerGroupId::G0;
    ParamKind kind = ParamKind::CONV;
    Mat value;
    Mat grad;
    bool trainable = false;

    void init_zero(Eigen::Index rows, Eigen::Index cols) {
        value = Mat::Zero(rows, cols);
        grad = Mat::Zero(rows, cols);
    }

    void init_uniform(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
        value = Mat::NullaryExpr(rows, cols,
                                 [&]() { return rng.uniform(-bound, bound); });
        grad = Mat::Zero(rows, cols);
    }

    Eigen::Index count() const { return value.size(); }
    void zero_grad() { grad.setZero(); }
};

// Non-trainable state saved in snapshots/checkpoints (BN running stats).
struct BufferTensor {
    std::string name;
    Mat value;
};

// ─── Conv1d ──────────────────────────────────────────────────────────────────
// Dilated 1-D convolution along time, zero padding chosen so T is preserved
// (odd kernels). Weight layout is out x (in*kernel), tap-major.

class Conv1d {
  public:
    Conv1d() = default;
    Conv1d(int in, int out, int kernel, int dilation, Rng& rng)
        : in_(in), out_(out), kernel_(kernel), dilation_(dilation) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel));
        weight.init_uniform(out, static_cast<Eigen::Index>(in) * kernel, bound, rng);
        bias.init_uniform(out, 1, bound, rng);
    }

    struct Trace {
        BatchSeq x;
    };

    BatchSeq forward(const BatchSeq& x, Trace* tr) const {
        BatchSeq y;
        y.items.reserve(x.size());
        const int center = (kernel_ - 1) / 2;
        for (const Mat& xi : x.items) {
            const Eigen::Index t_len = xi.cols();
            Mat yi = bias.value.replicate(1, t_len);
            for (int tap = 0; tap < kernel_; ++tap) {
                const Eigen::Index off =
                    static_cast<Eigen::Index>(tap - center) * dilation_;
                const Eigen::Index t0 = std::max<Eigen::Index>(0, -off);
                const Eigen::Index t1 = std::min<Eigen::Index>(t_len, t_len - off);
                if (t1 <= t0) continue;
                yi.middleCols(t0, t1 - t0).noalias() +=
                    weight.value.middleCols(static_cast<Eigen::Index>(tap) * in_, in_) *
                    xi.middleCols(t0 + off, t1 - t0);
            }
            y.items.push_back(std::move(yi));
        }
        if (tr) tr->x = x;
        return y;
    }

    BatchSeq backward(const BatchSeq& dy, const Trace& tr) {
        BatchSeq dx;
        dx.items.reserve(dy.size());
        const int center = (kernel_ - 1) / 2;
        for (std::size_t i = 0; i < dy.size(); ++i) {
            const Mat& dyi = dy.items[i];
            const Mat& xi = tr.x.items[i];
            const Eigen::Index t_len = xi.cols();
            Mat dxi = Mat::Zero(in_, t_len);
            bias.grad += dyi.rowwise().sum();
            for (int tap = 0; tap < kernel_; ++tap) {
                const Eigen::Index off =
                    static_cast<Eigen::Index>(tap - center) * dilation_;
                const Eigen::Index t0 = std::max<Eigen::Index>(0, -off);
                const Eigen::Index t1 = std::min<Eigen::Index>(t_len, t_len - off);
                if (t1 <= t0) continue;
                weight.grad.middleCols(static_cast<Eigen::Index>(tap) * in_, in_)
                    .noalias() += dyi.middleCols(t0, t1 - t0) *
                                  xi.middleCols(t0 + off, t1 - t0).transpose();
                dxi.middleCols(t0 + off, t1 - t0).noalias() +=
                    weight.value.middleCols(static_cast<Eigen::Index>(tap) * in_, in_)
                        .transpose() *
                    dyi.middleCols(t0, t1 - t0);
            }
            dx.items.push_back(std::move(dxi));
        }
        return dx;
    }

    int in_channels() const { return in_; }
    int out_channels() const { return out_; }

    Parameter weight, bias;

  private:
    int in_ = 0, out_ = 0, kernel_ = 1, dilation_ = 1;
};

// ─── BatchNorm1d ─────────────────────────────────────────────────────────────
// Per-channel normalization over every frame of every item in the batch.
// Batch statistics are used only when the layer is marked `adapted` and the
// run is in training mode; otherwise the frozen running stats apply. Running
// stats update with momentum in batch mode (normalization uses biased
// variance, the running estimate stores the unbiased one).

class BatchNorm1d {
  public:
    BatchNorm1d() = default;
    explicit BatchNorm1d(int channels) : channels_(channels) {
        gamma.init_zero(channels, 1);
        gamma.value.setOnes();
        beta.init_zero(channels, 1);
        running_mean = {"", Mat::Zero(channels, 1)};
        running_var = {"", Mat::Ones(channels, 1)};
    }

    struct Trace {
        BatchSeq xhat;
        Vec invstd;
        Vec mean;
        bool batch_mode = false;
        Eigen::Index n_frames = 0;
    };

    BatchSeq forward_eval(const BatchSeq& x, Trace* tr = nullptr) const {
        const Vec invstd =
            (running_var.value.col(0).array() + eps).sqrt().inverse();
        return normalize(x, running_mean.value.col(0), invstd, false, 0, tr);
    }

    // Training-run forward. Uses batch statistics (and refreshes the running
    // estimates) only when this layer is adapted.
    BatchSeq forward_train(const BatchSeq& x, Trace* tr) {
        if (!adapted) return forward_eval(x, tr);

        Vec mean = Vec::Zero(channels_);
        Vec sqmean = Vec::Zero(channels_);
        Eigen::Index n = 0;
        for (const Mat& xi : x.items) {
            mean += xi.rowwise().sum();
            sqmean += xi.array().square().matrix().rowwise().sum();
            n += xi.cols();
        }
        mean /= static_cast<double>(n);
        sqmean /= static_cast<double>(n);
        Vec var = (sqmean.array() - mean.array().square()).cwiseMax(0.0);

        const Vec invstd = (var.array() + eps).sqrt().inverse();
        BatchSeq y = normalize(x, mean, invstd, true, n, tr);

        const double unbias =
            n > 1 ? static_cast<double>(n) / static_cast<double>(n - 1) : 1.0;
        running_mean.value.col(0) =
            (1.0 - momentum) * running_mean.value.col(0) + momentum * mean;
        running_var.value.col(0) = (1.0 - momentum) * running_var.value.col(0) +
                                   momentum * (unbias * var);
        return y;
    }

    BatchSeq backward(const BatchSeq& dy, const Trace& tr) {
        const Vec& invstd = tr.invstd;
        Vec dgamma = Vec::Zero(channels_);
        Vec dbeta = Vec::Zero(channels_);
        for (std::size_t i = 0; i < dy.size(); ++i) {
            dgamma +=
                (dy.items[i].array() * tr.xhat.items[i].array()).matrix().rowwise().sum();
            dbeta += dy.items[i].rowwise().sum();
        }
        gamma.grad.col(0) += dgamma;
        beta.grad.col(0) += dbeta;

        BatchSeq dx;
        dx.items.reserve(dy.size());
        if (!tr.batch_mode) {
            const Vec scale = gamma.value.col(0).cwiseProduct(invstd);
            for (const Mat& dyi : dy.items)
                dx.items.push_back(dyi.array().colwise() * scale.array());
            return dx;
        }
        // Batch-stats path: dxhat terms couple through the shared mean/var.
        const double n = static_cast<double>(tr.n_frames);
        const Vec mean_dy = dbeta / n;
        const Vec mean_dy_xhat = dgamma / n;
        for (std::size_t i = 0; i < dy.size(); ++i) {
            Mat term = dy.items[i];
            term.colwise() -= mean_dy;
            term -= (tr.xhat.items[i].array().colwise() * mean_dy_xhat.array()).matrix();
            dx.items.push_back(
                term.array().colwise() *
                (gamma.value.col(0).cwiseProduct(invstd)).array());
        }
        return dx;
    }

    Parameter gamma, beta;
    BufferTensor running_mean, running_var;
    double eps = 1e-5;
    double momentum = 0.1;
    bool adapted = false;

  private:
    BatchSeq normalize(const BatchSeq& x, const Vec& mean, const Vec& invstd,
                       bool batch_mode, Eigen::Index n, Trace* tr) const {
        BatchSeq y;
        y.items.reserve(x.size());
        if (tr) {
            tr->xhat.items.clear();
            tr->xhat.items.reserve(x.size());
            tr->invstd = invstd;
            tr->mean = mean;
            tr->batch_mode = batch_mode;
            tr->n_frames = n;
        }
        for (const Mat& xi : x.items) {
            Mat xhat = (xi.colwise() - mean).array().colwise() * invstd.array();
            Mat yi = (xhat.array().colwise() * gamma.value.col(0).array()).matrix();
            yi.colwise() += beta.value.col(0);
            if (tr) tr->xhat.items.push_back(std::move(xhat));
            y.items.push_back(std::move(yi));
        }
        return y;
    }

    int channels_ = 0;
};

// ─── Linear ──────────────────────────────────────────────────────────────────

class Linear {
  public:
    Linear() = default;
    Linear(int in, int out, Rng& rng) : in_(in), out_(out) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        weight.init_uniform(out, in, bound, rng);
        bias.init_uniform(out, 1, bound, rng);
    }

    struct Trace {
        Mat x;
    };

    // x: in x N columns.
    Mat forward(const Mat& x, Trace* tr = nullptr) const {
        if (tr) tr->x = x;
        Mat y = weight.value * x;
        y.colwise() += bias.value.col(0);
        return y;
    }

    Mat backward(const Mat& dy, const Trace& tr) {
        weight.grad.noalias() += dy * tr.x.transpose();
        bias.grad.col(0) += dy.rowwise().sum();
        return weight.value.transpose() * dy;
    }

    Parameter weight, bias;

  private:
    int in_ = 0, out_ = 0;
};

// ─── Squeeze-Excitation ──────────────────────────────────────────────────────
// Channel gate from the per-utterance time average: g = sigmoid(W2 relu(W1 z)).

class SEModule {
  public:
    SEModule() = default;
    SEModule(int channels, int bottleneck, Rng& rng)
        : channels_(channels), bottleneck_(bottleneck) {
        const double b1 = 1.0 / std::sqrt(static_cast<double>(channels));
        w1.init_uniform(bottleneck, channels, b1, rng);
        b1_.init_uniform(bottleneck, 1, b1, rng);
        const double b2 = 1.0 / std::sqrt(static_cast<double>(bottleneck));
        w2.init_uniform(channels, bottleneck, b2, rng);
        b2_.init_uniform(channels, 1, b2, rng);
    }

    struct Trace {
        BatchSeq x;
        Mat z, u, g; // per-item columns: z C x N, u bottleneck x N, g C x N
    };

    BatchSeq forward(const BatchSeq& x, Trace* tr) const {
        const auto n = static_cast<Eigen::Index>(x.size());
        Mat z(channels_, n);
        for (Eigen::Index i = 0; i < n; ++i)
            z.col(i) = x.items[static_cast<std::size_t>(i)].rowwise().mean();
        Mat u = (w1.value * z).colwise() + b1_.value.col(0);
        Mat relu_u = u.cwiseMax(0.0);
        Mat pre = (w2.value * relu_u).colwise() + b2_.value.col(0);
        Mat g = pre.unaryExpr([](double v) { return sigmoid(v); });

        BatchSeq y;
        y.items.reserve(x.size());
        for (Eigen::Index i = 0; i < n; ++i)
            y.items.push_back(
                x.items[static_cast<std::size_t>(i)].array().colwise() *
                g.col(i).array());
        if (tr) {
            tr->x = x;
            tr->z = std::move(z);
            tr->u = std::move(u);
            tr->g = std::move(g);
        }
        return y;
    }

    BatchSeq backward(const BatchSeq& dy, const Trace& tr) {
        const auto n = static_cast<Eigen::Index>(dy.size());
        Mat dg(channels_, n);
        BatchSeq dx;
        dx.items.reserve(dy.size());
        for (Eigen::Index i = 0; i < n; ++i) {
            const Mat& dyi = dy.items[static_cast<std::size_t>(i)];
            const Mat& xi = tr.x.items[static_cast<std::size_t>(i)];
            dg.col(i) = (dyi.array() * xi.array()).matrix().rowwise().sum();
            dx.items.push_back(dyi.array().colwise() * tr.g.col(i).array());
        }
        Mat dpre2 =
            dg.array() * tr.g.array() * (1.0 - tr.g.array());
        Mat relu_u = tr.u.cwiseMax(0.0);
        w2.grad.noalias() += dpre2 * relu_u.transpose();
        b2_.grad.col(0) += dpre2.rowwise().sum();
        Mat du = w2.value.transpose() * dpre2;
        Mat dpre1 = (tr.u.array() > 0.0).cast<double>() * du.array();
        w1.grad.noalias() += dpre1 * tr.z.transpose();
        b1_.grad.col(0) += dpre1.rowwise().sum();
        Mat dz = w1.value.transpose() * dpre1;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double t_len =
                static_cast<double>(tr.x.items[static_cast<std::size_t>(i)].cols());
            dx.items[static_cast<std::size_t>(i)].colwise() +=
                (dz.col(i) / t_len).eval();
        }
        return dx;
    }

    Parameter w1, b1_, w2, b2_;

  private:
    int channels_ = 0, bottleneck_ = 0;
};

// ─── L2 normalization of embedding columns ───────────────────────────────────

struct L2Normalize {
    struct Trace {
        Mat y;
        Vec norm;
    };

    static Mat forward(const Mat& x, Trace* tr = nullptr) {
        Vec norm = x.colwise().norm();
        norm = norm.cwiseMax(1e-12);
        Mat y = x.array().rowwise() / norm.transpose().array();
        if (tr) {
            tr->y = y;
            tr->norm = norm;
        }
        return y;
    }

    static Mat backward(const Mat& dy, const Trace& tr) {
        // dx = (dy - y * (y . dy)) / ||x||, per column
        Vec dots = (tr.y.array() * dy.array()).colwise().sum();
        Mat dx = dy - (tr.y.array().rowwise() * dots.transpose().array()).matrix();
        dx = dx.array().rowwise() / tr.norm.transpose().array();
        return dx;
    }
};

inline Vec softmax(const Vec& z) {
    const double m = z.maxCoeff();
    Vec e = (z.array() - m).exp();
    return e / e.sum();
}

// d/dz of softmax given s = softmax(z) and upstream ds.
inline Vec softmax_backward(const Vec& s, const Vec& ds) {
    const double dot = s.dot(ds);
    return (ds.array() - dot) * s.array();
}

} // namespace taa
