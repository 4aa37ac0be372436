#pragma once

// AdamW with decoupled weight decay and the halving learning-rate schedule:
// lr(epoch) = lr0 * 2^(-floor(epoch / period)).

#include "taa/common.hpp"
#include "taa/nn.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace taa {

struct OptimizerConfig {
    double lr = 1e-5;
    int lr_halving_period_epochs = 20;
    int epochs = 150;
    double weight_decay = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const {
        if (lr <= 0.0 || weight_decay < 0.0 || lr_halving_period_epochs <= 0 ||
            epochs < 0)
            throw ConfigError("OptimizerConfig: lr > 0, weight_decay >= 0, "
                              "positive halving period and epochs >= 0 required");
    }
};

inline double scheduled_lr(const OptimizerConfig& cfg, int epoch) {
    return cfg.lr * std::pow(2.0, -static_cast<double>(
                                       epoch / cfg.lr_halving_period_epochs));
}

class AdamW {
  public:
    explicit AdamW(const OptimizerConfig& cfg) : cfg_(cfg) { cfg.validate(); }

    // One update over the trainable parameters; frozen parameters are never
    // touched (freezing soundness depends on this).
    void step(const std::vector<Parameter*>& params, double lr) {
        for (Parameter* p : params) {
            if (!p->trainable) continue;
            State& st = state_[p->name];
            if (st.m.size() == 0) {
                st.m = Mat::Zero(p->value.rows(), p->value.cols());
                st.v = Mat::Zero(p->value.rows(), p->value.cols());
            }
            ++st.t;
            st.m = cfg_.beta1 * st.m + (1.0 - cfg_.beta1) * p->grad;
            st.v = cfg_.beta2 * st.v.array() +
                   (1.0 - cfg_.beta2) * p->grad.array().square();
            const double bc1 = 1.0 - std::pow(cfg_.beta1, st.t);
            const double bc2 = 1.0 - std::pow(cfg_.beta2, st.t);
            Mat update = (st.m.array() / bc1) /
                         ((st.v.array() / bc2).sqrt() + cfg_.eps);
            p->value -= lr * (update + cfg_.weight_decay * p->value);
        }
    }

    void reset() { state_.clear(); }

  private:
    struct State {
        Mat m, v;
        int t = 0;
    };

    OptimizerConfig cfg_;
    std::map<std::string, State> state_;
};

} // namespace taa
