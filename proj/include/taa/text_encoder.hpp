#pragma once

// Frozen-after-pretraining text encoder: character embedding table, a small
// stack of 1-D convolutions, mean pooling over characters, FC to the shared
// embedding dimension, L2 normalization. The alphabet is closed: a-z,
// digits, space, apostrophe, hyphen.

#include "taa/common.hpp"
#include "taa/nn.hpp"
#include "taa/rng.hpp"

#include <string>
#include <vector>

namespace taa {

inline const std::string& text_alphabet() {
    static const std::string chars = "abcdefghijklmnopqrstuvwxyz0123456789 '-";
    return chars;
}

// Validated keyword orthography.
struct KeywordText {
    std::string text;

    explicit KeywordText(std::string t) : text(std::move(t)) {
        if (text.empty()) throw ConfigError("KeywordText: empty keyword");
        for (char c : text)
            if (text_alphabet().find(c) == std::string::npos)
                throw ConfigError(std::string("KeywordText: character '") + c +
                                  "' outside the supported alphabet");
    }
};

using TextEmbedding = Vec; // unit-norm, d entries

struct TextEncoderConfig {
    int embed_dim = 512; // d, must match the acoustic encoder
    int char_dim = 48;
    int conv_layers = 2;
    int kernel = 3;

    void validate() const {
        if (embed_dim < 1 || char_dim < 1 || conv_layers < 1 || kernel < 1 ||
            kernel % 2 == 0)
            throw ConfigError("TextEncoderConfig: dims must be positive, kernel odd");
    }
};

class TextEncoder {
  public:
    explicit TextEncoder(const TextEncoderConfig& cfg, std::uint64_t seed = 0)
        : cfg_(cfg) {
        cfg.validate();
        Rng rng = Rng::derive(seed, "text-init");
        const auto n_chars = static_cast<Eigen::Index>(text_alphabet().size());
        table.init_uniform(cfg.char_dim, n_chars, 1.0 / std::sqrt(cfg.char_dim), rng);
        convs_.reserve(static_cast<std::size_t>(cfg.conv_layers));
        for (int i = 0; i < cfg.conv_layers; ++i)
            convs_.emplace_back(cfg.char_dim, cfg.char_dim, cfg.kernel, 1, rng);
        fc_ = Linear(cfg.char_dim, cfg.embed_dim, rng);
        rebuild_registry();
    }

    TextEncoder(const TextEncoder&) = delete;
    TextEncoder& operator=(const TextEncoder&) = delete;

    const TextEncoderConfig& config() const { return cfg_; }
    bool frozen() const { return frozen_; }

    // Idempotent; freezing also clears trainable flags.
    void freeze() {
        frozen_ = true;
        for (Parameter* p : params_) p->trainable = false;
    }

    TextEmbedding encode(const KeywordText& kw) const {
        Mat emb = embed_chars(kw.text);
        BatchSeq x;
        x.items.push_back(std::move(emb));
        for (const auto& conv : convs_) {
            x = conv.forward(x, nullptr);
            x.items[0] = x.items[0].cwiseMax(0.0);
        }
        Vec pooled = x.items[0].rowwise().mean();
        Vec z = fc_.weight.value * pooled + fc_.bias.value.col(0);
        const double n = std::max(z.norm(), 1e-12);
        return z / n;
    }

    struct Trace {
        std::vector<std::string> texts;
        std::vector<std::vector<Conv1d::Trace>> conv_tr;
        std::vector<std::vector<Mat>> relu_in; // pre-ReLU activations per layer
        Mat pooled;                            // char_dim x N
        Linear::Trace fc_tr;
        L2Normalize::Trace l2_tr;
        std::vector<Eigen::Index> lengths;
    };

    // Batched training forward (pre-training only; throws once frozen).
    Mat forward_train(const std::vector<KeywordText>& kws, Trace& tr) {
        if (frozen_)
            throw TrainingError("text encoder is frozen; training forward rejected");
        const auto n = static_cast<Eigen::Index>(kws.size());
        Mat pooled(cfg_.char_dim, n);
        tr.texts.clear();
        tr.conv_tr.assign(kws.size(), {});
        tr.relu_in.assign(kws.size(), {});
        tr.lengths.resize(kws.size());
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto& kw = kws[static_cast<std::size_t>(i)];
            tr.texts.push_back(kw.text);
            tr.lengths[static_cast<std::size_t>(i)] =
                static_cast<Eigen::Index>(kw.text.size());
            BatchSeq x;
            x.items.push_back(embed_chars(kw.text));
            auto& ctr = tr.conv_tr[static_cast<std::size_t>(i)];
            auto& rin = tr.relu_in[static_cast<std::size_t>(i)];
            ctr.resize(convs_.size());
            rin.resize(convs_.size());
            for (std::size_t l = 0; l < convs_.size(); ++l) {
                x = convs_[l].forward(x, &ctr[l]);
                rin[l] = x.items[0];
                x.items[0] = x.items[0].cwiseMax(0.0);
            }
            pooled.col(i) = x.items[0].rowwise().mean();
        }
        tr.pooled = pooled;
        Mat z = fc_.forward(pooled, &tr.fc_tr);
        return L2Normalize::forward(z, &tr.l2_tr);
    }

    void backward(const Mat& d_emb, const Trace& tr) {
        if (frozen_)
            throw TrainingError("text encoder is frozen; gradient update rejected");
        Mat dz = L2Normalize::backward(d_emb, tr.l2_tr);
        Mat dpooled = fc_.backward(dz, tr.fc_tr);
        for (std::size_t i = 0; i < tr.texts.size(); ++i) {
            const auto t_len = static_cast<double>(tr.lengths[i]);
            BatchSeq d;
            d.items.push_back(
                (dpooled.col(static_cast<Eigen::Index>(i)) / t_len)
                    .replicate(1, tr.lengths[i]));
            for (std::size_t l = convs_.size(); l-- > 0;) {
                d.items[0] =
                    (tr.relu_in[i][l].array() > 0.0).cast<double>() * d.items[0].array();
                d = convs_[l].backward(d, tr.conv_tr[i][l]);
            }
            // scatter into the embedding table
            for (std::size_t c = 0; c < tr.texts[i].size(); ++c) {
                const auto col = static_cast<Eigen::Index>(
                    text_alphabet().find(tr.texts[i][c]));
                table.grad.col(col) += d.items[0].col(static_cast<Eigen::Index>(c));
            }
        }
    }

    const std::vector<Parameter*>& parameters() { return params_; }

    void zero_grads() {
        for (Parameter* p : params_) p->zero_grad();
    }

    void rebuild_registry() {
        params_.clear();
        table.name = "text/embed.table";
        table.group = LayerGroupId::G0;
        table.kind = ParamKind::FC;
        params_.push_back(&table);
        for (std::size_t l = 0; l < convs_.size(); ++l) {
            const std::string base = "text/conv" + std::to_string(l + 1);
            convs_[l].weight.name = base + ".weight";
            convs_[l].bias.name = base + ".bias";
            convs_[l].weight.kind = convs_[l].bias.kind = ParamKind::CONV;
            params_.push_back(&convs_[l].weight);
            params_.push_back(&convs_[l].bias);
        }
        fc_.weight.name = "text/fc.weight";
        fc_.bias.name = "text/fc.bias";
        fc_.weight.kind = fc_.bias.kind = ParamKind::FC;
        params_.push_back(&fc_.weight);
        params_.push_back(&fc_.bias);
    }

    Parameter table;

  private:
    Mat embed_chars(const std::string& text) const {
        Mat emb(cfg_.char_dim, static_cast<Eigen::Index>(text.size()));
        for (std::size_t c = 0; c < text.size(); ++c) {
            const auto col =
                static_cast<Eigen::Index>(text_alphabet().find(text[c]));
            emb.col(static_cast<Eigen::Index>(c)) = table.value.col(col);
        }
        return emb;
    }

    TextEncoderConfig cfg_;
    std::vector<Conv1d> convs_;
    Linear fc_;
    bool frozen_ = false;
    std::vector<Parameter*> params_;
};

} // namespace taa
