#pragma once

// Few-shot adaptation and desk-scale pre-training. Batches follow the
// target/non-target/noise composition; few-shot positives are resampled with
// replacement and augmented to fill the target slots. Model selection is by
// validation AP (ties: earliest epoch). Pre-training is a symmetric
// temperature-scaled contrastive alignment between acoustic and text
// embeddings over the keyword inventory.

#include "taa/adapter.hpp"
#include "taa/checkpoint.hpp"
#include "taa/data.hpp"
#include "taa/metrics.hpp"
#include "taa/optim.hpp"

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace taa {

enum class UttClass : int { TARGET = 0, NONTARGET = 1, NOISE = 2 };

// ─── Batch composition ───────────────────────────────────────────────────────

struct BatchComposition {
    int total = 256;
    int n_target = 128;
    int n_nontarget = 96;
    int n_noise = 32;

    void validate() const {
        if (total <= 0 || n_target < 0 || n_nontarget < 0 || n_noise < 0)
            throw ConfigError("BatchComposition: counts must be non-negative");
        if (n_target + n_nontarget + n_noise != total)
            throw ConfigError("BatchComposition: parts (" +
                              std::to_string(n_target) + "+" +
                              std::to_string(n_nontarget) + "+" +
                              std::to_string(n_noise) + ") do not sum to total " +
                              std::to_string(total));
    }

    // Ratio-preserving rescale via largest-remainder rounding; ties go to the
    // earlier slot (target, then non-target, then noise).
    BatchComposition scaled(int new_total) const {
        validate();
        if (new_total <= 0)
            throw ConfigError("BatchComposition: scaled total must be positive");
        const double f = static_cast<double>(new_total) / total;
        const double exact[3] = {n_target * f, n_nontarget * f, n_noise * f};
        int parts[3];
        int assigned = 0;
        for (int i = 0; i < 3; ++i) {
            parts[i] = static_cast<int>(std::floor(exact[i]));
            assigned += parts[i];
        }
        // hand out the remainder by descending fractional part
        std::vector<int> order = {0, 1, 2};
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return (exact[a] - std::floor(exact[a])) >
                   (exact[b] - std::floor(exact[b]));
        });
        for (int i = 0; assigned < new_total; ++i, ++assigned) parts[order[i % 3]] += 1;
        return BatchComposition{new_total, parts[0], parts[1], parts[2]};
    }
};

struct ComposedBatch {
    std::vector<MelFeatureSequence> features;
    std::vector<UttClass> labels;
};

inline std::vector<Mat> load_noise_pool(const DatasetManifest& manifest,
                                        const FeatureProvider& provider,
                                        const std::string& split) {
    std::vector<Mat> pool;
    for (const auto* rec : manifest.noise(split))
        pool.push_back(provider.load(*rec).frames);
    return pool;
}

inline ComposedBatch compose_batch(const DatasetManifest& manifest,
                                   const FeatureProvider& provider,
                                   const FewShotTask& task,
                                   const BatchComposition& comp,
                                   const AugmentationConfig& aug,
                                   const std::vector<Mat>* noise_pool, Rng& rng) {
    comp.validate();
    if (comp.n_target < 1)
        throw ConfigError("compose_batch: n_target must be at least 1");
    if (task.positive_ids.empty())
        throw DataError("compose_batch: task has no few-shot positives");

    std::map<std::string, const UtteranceRecord*> by_id;
    for (const auto& r : manifest.records) by_id[r.id] = &r;

    const auto nontargets = manifest.negatives(task.keyword, "train");
    if (comp.n_nontarget > 0 && nontargets.empty())
        throw DataError("compose_batch: non-target pool is empty");
    const auto noise_recs = manifest.noise("train");
    if (comp.n_noise > 0 && noise_recs.empty())
        throw DataError("compose_batch: noise pool is empty");

    ComposedBatch batch;
    batch.features.reserve(static_cast<std::size_t>(comp.total));
    batch.labels.reserve(static_cast<std::size_t>(comp.total));

    auto push = [&](const MelFeatureSequence& f, UttClass c, bool do_aug) {
        if (do_aug && aug.enabled)
            batch.features.push_back(augment(f, aug, rng, noise_pool));
        else
            batch.features.push_back(f);
        batch.labels.push_back(c);
    };

    for (int i = 0; i < comp.n_target; ++i) {
        const auto& id = task.positive_ids[rng.index(task.positive_ids.size())];
        auto it = by_id.find(id);
        if (it == by_id.end())
            throw DataError("compose_batch: unknown few-shot id '" + id + "'");
        push(provider.load(*it->second), UttClass::TARGET, true);
    }
    for (int i = 0; i < comp.n_nontarget; ++i)
        push(provider.load(*nontargets[rng.index(nontargets.size())]),
             UttClass::NONTARGET, true);
    for (int i = 0; i < comp.n_noise; ++i)
        push(provider.load(*noise_recs[rng.index(noise_recs.size())]),
             UttClass::NOISE, false);
    return batch;
}

// ─── Evaluation scoring ──────────────────────────────────────────────────────

struct EvalOptions {
    AugmentationConfig aug; // expansion_factor copies per eval record
    bool expand = false;
    std::uint64_t seed = 0;
    int forward_chunk = 32;
};

// Scores every utterance of `split` against the keyword: positives are the
// keyword's utterances, negatives everything else including noise.
inline ScoreSet score_keyword(const ModelBundle& bundle,
                              const DatasetManifest& manifest,
                              const FeatureProvider& provider,
                              const std::string& keyword, const std::string& split,
                              const Vec& te, const EvalOptions& opts,
                              const std::vector<Mat>* noise_pool = nullptr) {
    ScoreSet set;
    set.keyword = keyword;
    set.mode = bundle.head && bundle.head->kind != DetectionHead::Kind::COSINE_TE
                   ? ScoreMode::PROBABILITY
                   : ScoreMode::COSINE;
    const ConditioningContext ctx{te};

    std::vector<MelFeatureSequence> feats;
    std::vector<bool> is_pos;
    auto add_record = [&](const UtteranceRecord& rec, bool positive) {
        if (opts.expand) {
            for (auto& f :
                 expanded_features(provider, rec, opts.aug, opts.seed, noise_pool)) {
                feats.push_back(std::move(f));
                is_pos.push_back(positive);
            }
        } else {
            feats.push_back(provider.load(rec));
            is_pos.push_back(positive);
        }
    };
    for (const auto* rec : manifest.select(keyword, split)) add_record(*rec, true);
    for (const auto* rec : manifest.negatives(keyword, split)) add_record(*rec, false);
    for (const auto* rec : manifest.noise(split)) add_record(*rec, false);

    const DetectionHead cosine_head = DetectionHead::cosine_te();
    const DetectionHead& head = bundle.head ? *bundle.head : cosine_head;
    for (std::size_t start = 0; start < feats.size();
         start += static_cast<std::size_t>(opts.forward_chunk)) {
        const std::size_t stop =
            std::min(feats.size(), start + static_cast<std::size_t>(opts.forward_chunk));
        std::vector<MelFeatureSequence> chunk(feats.begin() + static_cast<long>(start),
                                              feats.begin() + static_cast<long>(stop));
        const Mat ae = bundle.encoder->forward(chunk, &ctx);
        const Mat logits = head.logits(ae, &te);
        for (Eigen::Index c = 0; c < ae.cols(); ++c) {
            double score = 0.0;
            switch (head.kind) {
                case DetectionHead::Kind::COSINE_TE:
                    score = logits(0, c);
                    break;
                case DetectionHead::Kind::LEARNED_VECTOR:
                    score = sigmoid(logits(0, c));
                    break;
                case DetectionHead::Kind::SOFTMAX: {
                    Vec probs = softmax(logits.col(c));
                    score = probs(static_cast<int>(UttClass::TARGET));
                    break;
                }
            }
            set.scores.push_back({score, is_pos[start + static_cast<std::size_t>(c)]});
        }
    }
    return set;
}

// ─── Train log ───────────────────────────────────────────────────────────────

struct TrainLogRow {
    int epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    double valid_ap = 0.0;
};

struct TrainLog {
    std::vector<TrainLogRow> rows;
    int best_epoch = -1;
    double best_valid_ap = 0.0;

    std::string to_csv() const {
        std::ostringstream os;
        os << "epoch,loss,lr,valid_ap\n";
        for (const auto& r : rows) {
            char buf[128];
            std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.6f\n", r.epoch, r.loss,
                          r.lr, r.valid_ap);
            os << buf;
        }
        return os.str();
    }
};

// ─── Adaptation ──────────────────────────────────────────────────────────────

struct AdaptOptions {
    OptimizerConfig opt;
    BatchComposition comp;
    AugmentationConfig train_aug;
    EvalOptions eval;
    int batches_per_epoch = 4;
    double laf_init_relu_bias = 5.0;
    bool learned_head_from_scratch = false;
    std::uint64_t seed = 0;
};

enum class HeadChoice { FROM_SPEC, SOFTMAX_2, SOFTMAX_3 };

namespace detail {

struct LossGrad {
    double loss = 0.0;
    Mat dlogits;
};

inline LossGrad binary_loss(const Mat& logits, const std::vector<UttClass>& labels) {
    const auto n = logits.cols();
    LossGrad out;
    out.dlogits = Mat::Zero(1, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int y = labels[static_cast<std::size_t>(i)] == UttClass::TARGET ? 1 : 0;
        const double p = sigmoid(logits(0, i));
        out.loss += bce_loss(p, y);
        out.dlogits(0, i) = (p - y) / static_cast<double>(n);
    }
    out.loss /= static_cast<double>(n);
    return out;
}

inline LossGrad softmax_loss(const Mat& logits, const std::vector<UttClass>& labels,
                             int n_classes) {
    const auto n = logits.cols();
    LossGrad out;
    out.dlogits = Mat::Zero(logits.rows(), n);
    for (Eigen::Index i = 0; i < n; ++i) {
        Vec p = softmax(logits.col(i));
        int cls = static_cast<int>(labels[static_cast<std::size_t>(i)]);
        if (n_classes == 2 && cls == static_cast<int>(UttClass::NOISE))
            cls = static_cast<int>(UttClass::NONTARGET);
        out.loss += -std::log(std::max(p(cls), 1e-12));
        p(cls) -= 1.0;
        out.dlogits.col(i) = p / static_cast<double>(n);
    }
    out.loss /= static_cast<double>(n);
    return out;
}

} // namespace detail

// Adapts `bundle` in place for the task. Attaches whatever the spec needs
// (LAF sites, KAM, learned head), trains only the selected subset, and ends
// on the best-validation-AP parameters.
inline TrainLog adapt(ModelBundle& bundle, const DatasetManifest& manifest,
                      const FeatureProvider& provider, const FewShotTask& task,
                      const AdapterSpec& spec, const AdaptOptions& options,
                      HeadChoice head_choice = HeadChoice::FROM_SPEC) {
    spec.validate();
    options.opt.validate();
    bundle.text->freeze();
    const Vec te = bundle.text->encode(KeywordText(task.keyword));

    if (spec.conditioning == AdapterSpec::Conditioning::TCFM)
        bundle.encoder->attach_laf(spec.tcfm_sites, options.laf_init_relu_bias);
    if (spec.conditioning == AdapterSpec::Conditioning::ADAIN_KAM) {
        bundle.kam = std::make_unique<AdaINSite>(bundle.enc_cfg.embed_dim,
                                                 bundle.enc_cfg.concat_channels());
        bundle.kam->w.name = "kam.proj.weight";
        bundle.kam->b.name = "kam.proj.bias";
        bundle.encoder->kam_site = bundle.kam.get();
    }
    switch (head_choice) {
        case HeadChoice::FROM_SPEC:
            if (spec.classifier == AdapterSpec::Classifier::LEARNED_FC)
                bundle.head = std::make_unique<DetectionHead>(DetectionHead::learned_vector(
                    bundle.enc_cfg.embed_dim,
                    options.learned_head_from_scratch ? std::nullopt
                                                      : std::make_optional(te),
                    options.seed));
            else
                bundle.head = std::make_unique<DetectionHead>(DetectionHead::cosine_te());
            break;
        case HeadChoice::SOFTMAX_2:
            bundle.head = std::make_unique<DetectionHead>(
                DetectionHead::softmax_head(bundle.enc_cfg.embed_dim, 2, options.seed));
            break;
        case HeadChoice::SOFTMAX_3:
            bundle.head = std::make_unique<DetectionHead>(
                DetectionHead::softmax_head(bundle.enc_cfg.embed_dim, 3, options.seed));
            break;
    }

    ModelView view = bundle.view();
    const TrainablePlan plan = select_trainable(view, spec);
    plan.apply(view);

    const std::vector<Mat> noise_pool = load_noise_pool(manifest, provider, "train");
    AdamW optimizer(options.opt);
    Rng rng = Rng::derive(options.seed, "adapt:" + task.keyword, task.sampling_seed);
    const ConditioningContext ctx{te};

    TrainLog log;
    ParamSnapshot best;
    bool have_best = false;
    for (int epoch = 0; epoch < options.opt.epochs; ++epoch) {
        const double lr = scheduled_lr(options.opt, epoch);
        double epoch_loss = 0.0;
        for (int b = 0; b < options.batches_per_epoch; ++b) {
            ComposedBatch batch =
                compose_batch(manifest, provider, task, options.comp,
                              options.train_aug, &noise_pool, rng);
            for (Parameter* p : view.params()) p->zero_grad();
            EncoderModel::Trace tr;
            const Mat ae = bundle.encoder->forward_train(batch.features, &ctx, tr);
            const Mat logits = bundle.head->logits(ae, &te);
            detail::LossGrad lg =
                bundle.head->kind == DetectionHead::Kind::SOFTMAX
                    ? detail::softmax_loss(logits, batch.labels, bundle.head->n_classes)
                    : detail::binary_loss(logits, batch.labels);
            if (!logits.allFinite() || !std::isfinite(lg.loss))
                throw TrainingError("training diverged: non-finite loss at epoch " +
                                    std::to_string(epoch) + " (lr " +
                                    std::to_string(lr) + ")");
            epoch_loss += lg.loss;
            const Mat dae = bundle.head->backward(lg.dlogits, ae, &te);
            bundle.encoder->backward(dae, tr, &ctx);
            optimizer.step(view.params(), lr);
        }
        epoch_loss /= static_cast<double>(options.batches_per_epoch);

        const ScoreSet valid = score_keyword(bundle, manifest, provider, task.keyword,
                                             "valid", te, options.eval, &noise_pool);
        const double ap = compute_ap(valid);
        log.rows.push_back({epoch, epoch_loss, lr, ap});
        if (!have_best || ap > log.best_valid_ap) {
            log.best_valid_ap = ap;
            log.best_epoch = epoch;
            best = snapshot(view);
            have_best = true;
        }
    }
    if (have_best) restore(view, best);
    return log;
}

// ─── Toy pre-training ────────────────────────────────────────────────────────

struct PretrainOptions {
    OptimizerConfig opt{1e-3, 20, 30, 1e-6};
    int batch_size = 32;
    int steps_per_epoch = 8;
    double temperature = 0.1;
    bool seen_only = true;
    std::uint64_t seed = 0;
};

// Symmetric contrastive alignment: acoustic embeddings are pushed toward
// their keyword's text embedding and away from the others. Reports mean AP
// over the pre-training keywords on the valid split per epoch.
inline TrainLog pretrain_toy(ModelBundle& bundle, const DatasetManifest& manifest,
                             const FeatureProvider& provider,
                             const PretrainOptions& options) {
    options.opt.validate();
    std::vector<std::string> keywords;
    for (const auto& kw : manifest.keyword_inventory)
        if (!options.seen_only || manifest.seen.count(kw)) keywords.push_back(kw);
    if (keywords.size() < 2)
        throw TrainingError("pre-training requires at least 2 keywords, got " +
                            std::to_string(keywords.size()));

    std::vector<KeywordText> kw_texts;
    kw_texts.reserve(keywords.size());
    std::map<std::string, int> kw_index;
    for (std::size_t k = 0; k < keywords.size(); ++k) {
        kw_texts.emplace_back(keywords[k]);
        kw_index[keywords[k]] = static_cast<int>(k);
    }

    std::map<std::string, std::vector<const UtteranceRecord*>> train_pools;
    for (const auto& kw : keywords) {
        train_pools[kw] = manifest.select(kw, "train");
        if (train_pools[kw].empty())
            throw DataError("pre-training: keyword '" + kw + "' has no train data");
    }

    // everything trains during pre-training
    ModelView view = bundle.view();
    for (Parameter* p : view.params()) p->trainable = true;
    bundle.encoder->set_adapted_bn({LayerGroupId::G0, LayerGroupId::G1,
                                    LayerGroupId::G2, LayerGroupId::G3,
                                    LayerGroupId::G5, LayerGroupId::G6});

    AdamW optimizer(options.opt);
    Rng rng = Rng::derive(options.seed, "pretrain");
    const double inv_tau = 1.0 / options.temperature;

    TrainLog log;
    for (int epoch = 0; epoch < options.opt.epochs; ++epoch) {
        const double lr = scheduled_lr(options.opt, epoch);
        double epoch_loss = 0.0;
        for (int s = 0; s < options.steps_per_epoch; ++s) {
            std::vector<MelFeatureSequence> feats;
            std::vector<int> targets;
            for (int i = 0; i < options.batch_size; ++i) {
                const auto& kw = keywords[rng.index(keywords.size())];
                const auto& pool = train_pools[kw];
                feats.push_back(provider.load(*pool[rng.index(pool.size())]));
                targets.push_back(kw_index[kw]);
            }
            for (Parameter* p : view.params()) p->zero_grad();

            TextEncoder::Trace text_tr;
            const Mat te_mat = bundle.text->forward_train(kw_texts, text_tr); // d x K
            EncoderModel::Trace tr;
            const Mat ae = bundle.encoder->forward_train(feats, nullptr, tr); // d x B

            const Mat logits = inv_tau * (te_mat.transpose() * ae); // K x B
            const auto n = logits.cols();
            Mat dlogits = Mat::Zero(logits.rows(), n);
            double loss = 0.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                Vec p = softmax(logits.col(i));
                loss += -std::log(std::max(p(targets[static_cast<std::size_t>(i)]), 1e-12));
                p(targets[static_cast<std::size_t>(i)]) -= 1.0;
                dlogits.col(i) = p / static_cast<double>(n);
            }
            loss /= static_cast<double>(n);
            if (!std::isfinite(loss))
                throw TrainingError("pre-training diverged: non-finite loss at epoch " +
                                    std::to_string(epoch) + " (lr " +
                                    std::to_string(lr) + ")");
            epoch_loss += loss;

            const Mat dae = inv_tau * (te_mat * dlogits);           // d x B
            const Mat dte = inv_tau * (ae * dlogits.transpose());   // d x K
            bundle.encoder->backward(dae, tr, nullptr);
            bundle.text->backward(dte, text_tr);
            optimizer.step(view.params(), lr);
        }
        epoch_loss /= static_cast<double>(options.steps_per_epoch);

        // mean cosine-scoring AP over the pre-training keywords
        double mean_ap = 0.0;
        EvalOptions ev;
        for (const auto& kw : keywords) {
            const Vec te = bundle.text->encode(KeywordText(kw));
            const ScoreSet sc =
                score_keyword(bundle, manifest, provider, kw, "valid", te, ev);
            mean_ap += compute_ap(sc);
        }
        mean_ap /= static_cast<double>(keywords.size());
        log.rows.push_back({epoch, epoch_loss, lr, mean_ap});
        if (log.best_epoch < 0 || mean_ap > log.best_valid_ap) {
            log.best_valid_ap = mean_ap;
            log.best_epoch = epoch;
        }
    }
    bundle.text->freeze();
    return log;
}

// ─── Baseline method suite ───────────────────────────────────────────────────

enum class MethodKind {
    PT, // frozen pre-trained scoring, no adaptation
    TA_ADAPTER,
    FT_FULL,
    FT_CLF,
    TWO_CLASS_CLF,
    THREE_CLASS_CLF,
    KAM_ADAIN,
};

inline std::string to_string(MethodKind k) {
    switch (k) {
        case MethodKind::PT: return "PT";
        case MethodKind::TA_ADAPTER: return "TA_ADAPTER";
        case MethodKind::FT_FULL: return "FT_FULL";
        case MethodKind::FT_CLF: return "FT_CLF";
        case MethodKind::TWO_CLASS_CLF: return "TWO_CLASS_CLF";
        case MethodKind::THREE_CLASS_CLF: return "THREE_CLASS_CLF";
        case MethodKind::KAM_ADAIN: return "KAM_ADAIN";
    }
    return "?";
}

inline MethodKind method_from_string(const std::string& s) {
    for (MethodKind k : {MethodKind::PT, MethodKind::TA_ADAPTER, MethodKind::FT_FULL,
                         MethodKind::FT_CLF, MethodKind::TWO_CLASS_CLF,
                         MethodKind::THREE_CLASS_CLF, MethodKind::KAM_ADAIN})
        if (to_string(k) == s) return k;
    throw ConfigError("unknown method '" + s + "'");
}

struct MethodResult {
    MetricsReport test;
    TrainLog log;
    long long tunable_params = 0;
};

// Runs one method on a task and restores the bundle to its pre-run state
// (the adapter contract: methods never leave residue on the pre-trained
// model).
inline MethodResult run_method(MethodKind kind, ModelBundle& bundle,
                               const DatasetManifest& manifest,
                               const FeatureProvider& provider,
                               const FewShotTask& task, const AdaptOptions& options) {
    bundle.text->freeze();
    ModelView base_view = bundle.view();
    const ParamSnapshot base = snapshot(base_view);

    AdapterSpec spec;
    HeadChoice head = HeadChoice::FROM_SPEC;
    switch (kind) {
        case MethodKind::PT:
        case MethodKind::TA_ADAPTER:
            spec = AdapterSpec::ta_adapter();
            break;
        case MethodKind::FT_FULL:
            spec.full_model = true;
            spec.classifier = AdapterSpec::Classifier::LEARNED_FC;
            break;
        case MethodKind::FT_CLF:
            spec.classifier = AdapterSpec::Classifier::LEARNED_FC;
            break;
        case MethodKind::TWO_CLASS_CLF:
            spec.full_model = true;
            head = HeadChoice::SOFTMAX_2;
            break;
        case MethodKind::THREE_CLASS_CLF:
            spec.full_model = true;
            head = HeadChoice::SOFTMAX_3;
            break;
        case MethodKind::KAM_ADAIN:
            spec.full_model = true;
            spec.conditioning = AdapterSpec::Conditioning::ADAIN_KAM;
            break;
    }

    MethodResult result;
    if (kind == MethodKind::PT) {
        const Vec te = bundle.text->encode(KeywordText(task.keyword));
        const std::vector<Mat> noise_pool =
            load_noise_pool(manifest, provider, "test");
        const ScoreSet sc = score_keyword(bundle, manifest, provider, task.keyword,
                                          "test", te, options.eval, &noise_pool);
        result.test = evaluate(sc, static_cast<int>(task.sampling_seed));
        result.tunable_params = 0;
    } else {
        result.log = adapt(bundle, manifest, provider, task, spec, options, head);
        ModelView view = bundle.view();
        result.tunable_params = select_trainable(view, spec).count(view);
        const Vec te = bundle.text->encode(KeywordText(task.keyword));
        const std::vector<Mat> noise_pool =
            load_noise_pool(manifest, provider, "test");
        const ScoreSet sc = score_keyword(bundle, manifest, provider, task.keyword,
                                          "test", te, options.eval, &noise_pool);
        result.test = evaluate(sc, static_cast<int>(task.sampling_seed));
    }

    // revert to the pre-run model
    bundle.encoder->detach_laf();
    bundle.encoder->kam_site = nullptr;
    bundle.kam.reset();
    bundle.head.reset();
    ModelView after = bundle.view();
    restore(after, base);
    return result;
}

} // namespace taa
