#pragma once

// Compact ECAPA-TDNN-style acoustic encoder with an explicit G0-G6 layer
// group taxonomy:
//   G0 stem conv + activation + BN
//   G1-G3 SE-Res2Blocks (1x1 conv/act/BN, dilated Res2 convs+acts, BN,
//          1x1 conv/act/BN, SE gate, residual add)
//   G4 dense 1x1 conv + activation over the concatenated block outputs
//   G5 attentive statistics pooling + BN
//   G6 final FC + BN, then L2 normalization to the embedding
// Every activation in G0-G5 is a replaceable site (fixed ReLU by default,
// LAF when text conditioning is attached).

#include "taa/common.hpp"
#include "taa/conditioning.hpp"
#include "taa/nn.hpp"
#include "taa/rng.hpp"

#include <algorithm>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

namespace taa {

struct EncoderConfig {
    int n_mels = 40;
    int channels = 256;   // block width C
    int res2_scale = 8;   // Res2 split factor
    int n_blocks = 3;     // fixed by the architecture
    int attn_channels = 128;
    int embed_dim = 512;  // d, shared with the text encoder
    std::vector<int> dilations = {2, 3, 4};

    static constexpr int kStemKernel = 5;
    static constexpr int kRes2Kernel = 3;

    int se_bottleneck() const { return std::max(4, channels / 4); }
    int concat_channels() const { return channels * n_blocks; }
    int stats_channels() const { return 2 * concat_channels(); }

    void validate() const {
        if (n_blocks != 3)
            throw ConfigError("EncoderConfig: n_blocks must be 3 (got " +
                              std::to_string(n_blocks) + ")");
        if (n_mels < 1) throw ConfigError("EncoderConfig: n_mels must be >= 1");
        if (channels < 1 || res2_scale < 2)
            throw ConfigError("EncoderConfig: channels >= 1 and res2_scale >= 2 required");
        if (channels % res2_scale != 0)
            throw ConfigError("EncoderConfig: channels (" + std::to_string(channels) +
                              ") not divisible by res2_scale (" +
                              std::to_string(res2_scale) + ")");
        if (attn_channels < 1)
            throw ConfigError("EncoderConfig: attn_channels must be >= 1");
        if (embed_dim < 1)
            throw ConfigError("EncoderConfig: embed_dim must be >= 1");
        if (static_cast<int>(dilations.size()) != n_blocks)
            throw ConfigError("EncoderConfig: dilations must list one value per block");
        for (int d : dilations)
            if (d < 1) throw ConfigError("EncoderConfig: dilations must be >= 1");
    }
};

// Input features: one column per frame, n_mels rows.
struct MelFeatureSequence {
    Mat frames;

    Eigen::Index duration_frames() const { return frames.cols(); }

    void validate(int n_mels) const {
        if (frames.rows() != n_mels)
            throw ShapeError("MelFeatureSequence: expected " +
                             std::to_string(n_mels) + " mel bins, got " +
                             std::to_string(frames.rows()));
        if (frames.cols() < 1)
            throw DataError("MelFeatureSequence: empty sequence (T must be >= 1)");
        if (!frames.allFinite())
            throw DataError("MelFeatureSequence: non-finite feature values");
    }
};

using AcousticEmbedding = Vec; // unit-norm, d entries

// Metadata view of one registered parameter tensor.
struct TaggedParameter {
    std::string name;
    LayerGroupId group;
    ParamKind kind;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    Eigen::Index count = 0;
};

// ─── Res2 section ────────────────────────────────────────────────────────────
// Split channels into `scale` chunks; chunk 0 passes through, chunk 1 goes
// through conv+act, chunks j>=2 add the previous output before their conv.

class Res2Section {
  public:
    Res2Section() = default;
    Res2Section(int channels, int scale, int kernel, int dilation, Rng& rng)
        : scale_(scale), width_(channels / scale) {
        convs_.reserve(static_cast<std::size_t>(scale - 1));
        acts_.resize(static_cast<std::size_t>(scale - 1));
        for (int j = 0; j < scale - 1; ++j)
            convs_.emplace_back(width_, width_, kernel, dilation, rng);
    }

    struct Trace {
        std::vector<Conv1d::Trace> conv_tr;
        std::vector<ActSite::Trace> act_tr;
    };

    BatchSeq forward(const BatchSeq& x, const ConditioningContext* ctx,
                     Trace* tr) const {
        if (tr) {
            tr->conv_tr.resize(convs_.size());
            tr->act_tr.resize(convs_.size());
        }
        std::vector<BatchSeq> outs(static_cast<std::size_t>(scale_));
        outs[0] = chunk(x, 0);
        BatchSeq prev;
        for (int j = 1; j < scale_; ++j) {
            BatchSeq in_j = chunk(x, j);
            if (j >= 2)
                for (std::size_t i = 0; i < in_j.size(); ++i)
                    in_j.items[i] += prev.items[i];
            const auto cidx = static_cast<std::size_t>(j - 1);
            BatchSeq c = convs_[cidx].forward(in_j, tr ? &tr->conv_tr[cidx] : nullptr);
            prev = acts_[cidx].forward(c, ctx, tr ? &tr->act_tr[cidx] : nullptr);
            outs[static_cast<std::size_t>(j)] = prev;
        }
        return stack(outs, x);
    }

    BatchSeq backward(const BatchSeq& dy, const Trace& tr,
                      const ConditioningContext* ctx) {
        std::vector<BatchSeq> dout(static_cast<std::size_t>(scale_));
        for (int j = 0; j < scale_; ++j) dout[static_cast<std::size_t>(j)] = chunk(dy, j);

        std::vector<BatchSeq> dx(static_cast<std::size_t>(scale_));
        dx[0] = dout[0];
        for (int j = scale_ - 1; j >= 1; --j) {
            const auto cidx = static_cast<std::size_t>(j - 1);
            BatchSeq da = acts_[cidx].backward(dout[static_cast<std::size_t>(j)],
                                               tr.act_tr[cidx], ctx);
            BatchSeq din = convs_[cidx].backward(da, tr.conv_tr[cidx]);
            if (j >= 2)
                for (std::size_t i = 0; i < din.size(); ++i)
                    dout[static_cast<std::size_t>(j - 1)].items[i] += din.items[i];
            dx[static_cast<std::size_t>(j)] = std::move(din);
        }
        return stack(dx, dy);
    }

    std::vector<Conv1d>& convs() { return convs_; }
    std::vector<ActSite>& acts() { return acts_; }

  private:
    BatchSeq chunk(const BatchSeq& x, int j) const {
        BatchSeq out;
        out.items.reserve(x.size());
        for (const Mat& xi : x.items)
            out.items.push_back(xi.middleRows(static_cast<Eigen::Index>(j) * width_, width_));
        return out;
    }

    BatchSeq stack(const std::vector<BatchSeq>& chunks, const BatchSeq& like) const {
        BatchSeq out;
        out.items.reserve(like.size());
        for (std::size_t i = 0; i < like.size(); ++i) {
            Mat m(static_cast<Eigen::Index>(scale_) * width_, like.items[i].cols());
            for (int j = 0; j < scale_; ++j)
                m.middleRows(static_cast<Eigen::Index>(j) * width_, width_) =
                    chunks[static_cast<std::size_t>(j)].items[i];
            out.items.push_back(std::move(m));
        }
        return out;
    }

    int scale_ = 0, width_ = 0;
    std::vector<Conv1d> convs_;
    std::vector<ActSite> acts_;
};

// ─── SE-Res2Block ────────────────────────────────────────────────────────────

class SERes2Block {
  public:
    SERes2Block() = default;
    SERes2Block(const EncoderConfig& cfg, int dilation, Rng& rng)
        : conv_in(cfg.channels, cfg.channels, 1, 1, rng),
          bn_in(cfg.channels),
          res2(cfg.channels, cfg.res2_scale, EncoderConfig::kRes2Kernel, dilation, rng),
          bn_mid(cfg.channels),
          conv_out(cfg.channels, cfg.channels, 1, 1, rng),
          bn_out(cfg.channels),
          se(cfg.channels, cfg.se_bottleneck(), rng) {}

    struct Trace {
        Conv1d::Trace conv_in_tr, conv_out_tr;
        ActSite::Trace act_in_tr, act_out_tr;
        BatchNorm1d::Trace bn_in_tr, bn_mid_tr, bn_out_tr;
        Res2Section::Trace res2_tr;
        SEModule::Trace se_tr;
    };

    BatchSeq forward(const BatchSeq& x, const ConditioningContext* ctx,
                     bool training, Trace* tr) {
        BatchSeq h = conv_in.forward(x, tr ? &tr->conv_in_tr : nullptr);
        h = act_in.forward(h, ctx, tr ? &tr->act_in_tr : nullptr);
        h = bn_fwd(bn_in, h, training, tr ? &tr->bn_in_tr : nullptr);
        h = res2.forward(h, ctx, tr ? &tr->res2_tr : nullptr);
        h = bn_fwd(bn_mid, h, training, tr ? &tr->bn_mid_tr : nullptr);
        h = conv_out.forward(h, tr ? &tr->conv_out_tr : nullptr);
        h = act_out.forward(h, ctx, tr ? &tr->act_out_tr : nullptr);
        h = bn_fwd(bn_out, h, training, tr ? &tr->bn_out_tr : nullptr);
        h = se.forward(h, tr ? &tr->se_tr : nullptr);
        for (std::size_t i = 0; i < h.size(); ++i) h.items[i] += x.items[i];
        return h;
    }

    BatchSeq backward(const BatchSeq& dy, const Trace& tr,
                      const ConditioningContext* ctx) {
        BatchSeq d = se.backward(dy, tr.se_tr);
        d = bn_out.backward(d, tr.bn_out_tr);
        d = act_out.backward(d, tr.act_out_tr, ctx);
        d = conv_out.backward(d, tr.conv_out_tr);
        d = bn_mid.backward(d, tr.bn_mid_tr);
        d = res2.backward(d, tr.res2_tr, ctx);
        d = bn_in.backward(d, tr.bn_in_tr);
        d = act_in.backward(d, tr.act_in_tr, ctx);
        d = conv_in.backward(d, tr.conv_in_tr);
        for (std::size_t i = 0; i < d.size(); ++i) d.items[i] += dy.items[i];
        return d;
    }

    Conv1d conv_in;
    ActSite act_in;
    BatchNorm1d bn_in;
    Res2Section res2;
    BatchNorm1d bn_mid;
    Conv1d conv_out;
    ActSite act_out;
    BatchNorm1d bn_out;
    SEModule se;

  private:
    static BatchSeq bn_fwd(BatchNorm1d& bn, const BatchSeq& x, bool training,
                           BatchNorm1d::Trace* tr) {
        return training ? bn.forward_train(x, tr) : bn.forward_eval(x, tr);
    }
};

// ─── Attentive statistics pooling ────────────────────────────────────────────
// Channel- and time-dependent attention; pooled output is [mu; sigma].

class AttentiveStatsPool {
  public:
    AttentiveStatsPool() = default;
    AttentiveStatsPool(int channels, int attn_channels, Rng& rng)
        : channels_(channels), attn_(attn_channels) {
        const double bw1 = 1.0 / std::sqrt(static_cast<double>(channels));
        w1.init_uniform(attn_channels, channels, bw1, rng);
        b1.init_uniform(attn_channels, 1, bw1, rng);
        const double bw2 = 1.0 / std::sqrt(static_cast<double>(attn_channels));
        w2.init_uniform(channels, attn_channels, bw2, rng);
        b2.init_uniform(channels, 1, bw2, rng);
    }

    static constexpr double kVarFloor = 1e-10;

    struct Trace {
        BatchSeq x;
        BatchSeq hu; // post-activation attention features
        ActSite::Trace act_tr;
        std::vector<Mat> alpha;  // per item, channels x T
        Mat mu, m2, sigma;       // channels x N
    };

    Mat forward(const BatchSeq& x, const ConditioningContext* ctx,
                Trace* tr) const {
        const auto n = static_cast<Eigen::Index>(x.size());
        BatchSeq u;
        u.items.reserve(x.size());
        for (const Mat& xi : x.items)
            u.items.push_back(((w1.value * xi).colwise() + b1.value.col(0)).eval());
        BatchSeq hu = act.forward(u, ctx, tr ? &tr->act_tr : nullptr);

        Mat mu(channels_, n), m2(channels_, n), sigma(channels_, n);
        std::vector<Mat> alphas;
        alphas.reserve(x.size());
        for (Eigen::Index i = 0; i < n; ++i) {
            const Mat& xi = x.items[static_cast<std::size_t>(i)];
            Mat e = (w2.value * hu.items[static_cast<std::size_t>(i)]).colwise() +
                    b2.value.col(0);
            // softmax over time, per channel row
            Vec rowmax = e.rowwise().maxCoeff();
            Mat a = (e.colwise() - rowmax).array().exp();
            Vec denom = a.rowwise().sum();
            a = a.array().colwise() / denom.array();
            mu.col(i) = (a.array() * xi.array()).rowwise().sum();
            m2.col(i) = (a.array() * xi.array().square()).rowwise().sum();
            sigma.col(i) = ((m2.col(i) - mu.col(i).cwiseAbs2()).cwiseMax(0.0).array() +
                            kVarFloor)
                               .sqrt();
            alphas.push_back(std::move(a));
        }
        Mat out(2 * channels_, n);
        out.topRows(channels_) = mu;
        out.bottomRows(channels_) = sigma;
        if (tr) {
            tr->x = x;
            tr->hu = std::move(hu);
            tr->alpha = std::move(alphas);
            tr->mu = std::move(mu);
            tr->m2 = std::move(m2);
            tr->sigma = std::move(sigma);
        }
        return out;
    }

    BatchSeq backward(const Mat& dout, const Trace& tr,
                      const ConditioningContext* ctx) {
        const auto n = static_cast<Eigen::Index>(tr.x.size());
        BatchSeq dx, dhu;
        dx.items.reserve(tr.x.size());
        dhu.items.reserve(tr.x.size());
        for (Eigen::Index i = 0; i < n; ++i) {
            const Mat& xi = tr.x.items[static_cast<std::size_t>(i)];
            const Mat& a = tr.alpha[static_cast<std::size_t>(i)];
            Vec dmu = dout.col(i).head(channels_);
            const Vec dsig = dout.col(i).tail(channels_);

            // sigma = sqrt(max(m2 - mu^2, 0) + floor); clamp kills the grad
            const Vec raw = tr.m2.col(i) - tr.mu.col(i).cwiseAbs2();
            Vec dvar = (raw.array() > 0.0)
                           .select(dsig.array() / (2.0 * tr.sigma.col(i).array()),
                                   Vec::Zero(channels_).array());
            const Vec dm2 = dvar;
            dmu -= 2.0 * dvar.cwiseProduct(tr.mu.col(i));

            Mat dalpha = (xi.array().colwise() * dmu.array()) +
                         (xi.array().square().colwise() * dm2.array());
            Mat dxi = (a.array().colwise() * dmu.array()) +
                      ((2.0 * a.array() * xi.array()).colwise() * dm2.array());

            // softmax over time backward, per row
            Vec dot = (dalpha.array() * a.array()).rowwise().sum();
            Mat de = a.array() * (dalpha.colwise() - dot).array();

            w2.grad.noalias() +=
                de * tr.hu.items[static_cast<std::size_t>(i)].transpose();
            b2.grad.col(0) += de.rowwise().sum();
            dhu.items.push_back(w2.value.transpose() * de);
            dx.items.push_back(std::move(dxi));
        }

        BatchSeq du = act.backward(dhu, tr.act_tr, ctx);
        for (Eigen::Index i = 0; i < n; ++i) {
            const Mat& dui = du.items[static_cast<std::size_t>(i)];
            w1.grad.noalias() +=
                dui * tr.x.items[static_cast<std::size_t>(i)].transpose();
            b1.grad.col(0) += dui.rowwise().sum();
            dx.items[static_cast<std::size_t>(i)].noalias() +=
                w1.value.transpose() * dui;
        }
        return dx;
    }

    Parameter w1, b1, w2, b2;
    ActSite act;

  private:
    int channels_ = 0, attn_ = 0;
};

// ─── Encoder model ───────────────────────────────────────────────────────────

class EncoderModel {
  public:
    explicit EncoderModel(const EncoderConfig& cfg, std::uint64_t seed = 0)
        : cfg_(cfg) {
        cfg.validate();
        Rng rng = Rng::derive(seed, "encoder-init");
        stem_conv = Conv1d(cfg.n_mels, cfg.channels, EncoderConfig::kStemKernel, 1, rng);
        stem_bn = BatchNorm1d(cfg.channels);
        blocks.clear();
        blocks.reserve(static_cast<std::size_t>(cfg.n_blocks));
        for (int b = 0; b < cfg.n_blocks; ++b)
            blocks.emplace_back(std::make_unique<SERes2Block>(
                cfg, cfg.dilations[static_cast<std::size_t>(b)], rng));
        g4_conv = Conv1d(cfg.concat_channels(), cfg.concat_channels(), 1, 1, rng);
        pool = AttentiveStatsPool(cfg.concat_channels(), cfg.attn_channels, rng);
        g5_bn = BatchNorm1d(cfg.stats_channels());
        g6_fc = Linear(cfg.stats_channels(), cfg.embed_dim, rng);
        g6_bn = BatchNorm1d(cfg.embed_dim);
        tag_sites();
        rebuild_registry();
    }

    EncoderModel(const EncoderModel&) = delete;
    EncoderModel& operator=(const EncoderModel&) = delete;

    const EncoderConfig& config() const { return cfg_; }

    struct Trace {
        Conv1d::Trace stem_conv_tr, g4_conv_tr;
        ActSite::Trace stem_act_tr, g4_act_tr;
        BatchNorm1d::Trace stem_bn_tr, g5_bn_tr, g6_bn_tr;
        std::vector<SERes2Block::Trace> block_tr;
        std::vector<AdaINSite::Trace> kam_tr;
        AttentiveStatsPool::Trace pool_tr;
        Linear::Trace g6_fc_tr;
        L2Normalize::Trace l2_tr;
    };

    // Evaluation forward: running-stat BN, no traces, no mutation. Safe for
    // concurrent readers on a frozen model.
    Mat forward(const std::vector<MelFeatureSequence>& feats,
                const ConditioningContext* ctx = nullptr) const {
        return const_cast<EncoderModel*>(this)->run(feats, ctx, false, nullptr);
    }

    AcousticEmbedding forward_one(const MelFeatureSequence& f,
                                  const ConditioningContext* ctx = nullptr) const {
        return forward({f}, ctx).col(0);
    }

    // Training forward: adapted BN layers use batch statistics and refresh
    // their running estimates; traces are recorded for backward.
    Mat forward_train(const std::vector<MelFeatureSequence>& feats,
                      const ConditioningContext* ctx, Trace& tr) {
        return run(feats, ctx, true, &tr);
    }

    // d_embed: d x N gradient at the unit-norm embeddings.
    void backward(const Mat& d_embed, const Trace& tr,
                  const ConditioningContext* ctx) {
        Mat d = L2Normalize::backward(d_embed, tr.l2_tr);
        d = bseq1(g6_bn.backward(seq1(d), tr.g6_bn_tr));
        d = g6_fc.backward(d, tr.g6_fc_tr);
        d = bseq1(g5_bn.backward(seq1(d), tr.g5_bn_tr));
        BatchSeq ds = pool.backward(d, tr.pool_tr, ctx);
        if (kam_site)
            for (std::size_t i = 0; i < ds.size(); ++i)
                ds.items[i] = kam_site->backward(ds.items[i], tr.kam_tr[i]);
        ds = g4_act.backward(ds, tr.g4_act_tr, ctx);
        ds = g4_conv.backward(ds, tr.g4_conv_tr);

        // split concat grads back to the per-block outputs
        const int c = cfg_.channels;
        std::vector<BatchSeq> dblock(blocks.size());
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            dblock[b].items.reserve(ds.size());
            for (const Mat& m : ds.items)
                dblock[b].items.push_back(
                    m.middleRows(static_cast<Eigen::Index>(b) * c, c));
        }
        // blocks are sequential: the gradient into block b is its concat share
        // plus whatever flows back from block b+1's input.
        BatchSeq carry;
        for (std::size_t b = blocks.size(); b-- > 0;) {
            BatchSeq dy = std::move(dblock[b]);
            if (!carry.items.empty())
                for (std::size_t i = 0; i < dy.size(); ++i)
                    dy.items[i] += carry.items[i];
            carry = blocks[b]->backward(dy, tr.block_tr[b], ctx);
        }
        BatchSeq dstem = stem_bn.backward(carry, tr.stem_bn_tr);
        dstem = stem_act.backward(dstem, tr.stem_act_tr, ctx);
        stem_conv.backward(dstem, tr.stem_conv_tr);
    }

    // ── Registry ────────────────────────────────────────────────────────────

    const std::vector<Parameter*>& parameters() { return params_; }
    const std::vector<BufferTensor*>& buffers() { return buffers_; }

    Parameter* find_parameter(const std::string& name) {
        for (Parameter* p : params_)
            if (p->name == name) return p;
        return nullptr;
    }

    std::vector<TaggedParameter> list_parameters() const {
        std::vector<TaggedParameter> out;
        out.reserve(params_.size());
        for (const Parameter* p : params_)
            out.push_back({p->name, p->group, p->kind, p->value.rows(),
                           p->value.cols(), p->count()});
        return out;
    }

    long long total_param_count() const {
        long long n = 0;
        for (const Parameter* p : params_) n += p->count();
        return n;
    }

    void zero_grads() {
        for (Parameter* p : params_) p->zero_grad();
    }

    // ── Activation sites & conditioning ─────────────────────────────────────

    std::vector<ActSite*> sites() {
        std::vector<ActSite*> s;
        s.push_back(&stem_act);
        for (auto& blk : blocks) {
            s.push_back(&blk->act_in);
            for (auto& a : blk->res2.acts()) s.push_back(&a);
            s.push_back(&blk->act_out);
        }
        s.push_back(&g4_act);
        s.push_back(&pool.act);
        return s;
    }

    // Attach LAF parameters to every site in the given groups. `relu_bias`
    // > 0 starts the mixture near the ReLU the site replaces; 0 starts it
    // uniform.
    void attach_laf(const std::set<LayerGroupId>& groups, double relu_bias = 0.0) {
        for (ActSite* s : sites()) {
            if (!groups.count(s->group)) continue;
            s->laf = std::make_unique<LAFSite>(cfg_.embed_dim);
            if (relu_bias != 0.0) s->laf->bias_toward_relu(relu_bias);
        }
        rebuild_registry();
    }

    void detach_laf() {
        for (ActSite* s : sites()) s->laf.reset();
        rebuild_registry();
    }

    std::set<LayerGroupId> laf_groups() {
        std::set<LayerGroupId> g;
        for (ActSite* s : sites())
            if (s->conditioned()) g.insert(s->group);
        return g;
    }

    // Number of activation sites per group: 1 in G0, res2_scale+1 per block,
    // 1 in G4, 1 in G5 (the attention nonlinearity).
    std::map<LayerGroupId, int> site_count_by_group() const {
        std::map<LayerGroupId, int> m;
        m[LayerGroupId::G0] = 1;
        for (int b = 0; b < cfg_.n_blocks; ++b)
            m[static_cast<LayerGroupId>(static_cast<int>(LayerGroupId::G1) + b)] =
                cfg_.res2_scale + 1;
        m[LayerGroupId::G4] = 1;
        m[LayerGroupId::G5] = 1;
        return m;
    }

    std::vector<std::pair<BatchNorm1d*, LayerGroupId>> bn_layers() {
        std::vector<std::pair<BatchNorm1d*, LayerGroupId>> v;
        v.emplace_back(&stem_bn, LayerGroupId::G0);
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            const auto g = static_cast<LayerGroupId>(static_cast<int>(LayerGroupId::G1) +
                                                     static_cast<int>(b));
            v.emplace_back(&blocks[b]->bn_in, g);
            v.emplace_back(&blocks[b]->bn_mid, g);
            v.emplace_back(&blocks[b]->bn_out, g);
        }
        v.emplace_back(&g5_bn, LayerGroupId::G5);
        v.emplace_back(&g6_bn, LayerGroupId::G6);
        return v;
    }

    void set_adapted_bn(const std::set<LayerGroupId>& groups) {
        for (auto& [bn, g] : bn_layers()) bn->adapted = groups.count(g) > 0;
    }

    // Rebuilds the name/tag registry. Must be called after any structural
    // change (LAF attach/detach).
    void rebuild_registry() {
        params_.clear();
        buffers_.clear();
        reg_conv("g0.conv", LayerGroupId::G0, stem_conv);
        reg_site("g0.act", LayerGroupId::G0, stem_act);
        reg_bn("g0.bn", LayerGroupId::G0, stem_bn);
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            const std::string base = "g" + std::to_string(b + 1);
            const auto g = static_cast<LayerGroupId>(static_cast<int>(LayerGroupId::G1) +
                                                     static_cast<int>(b));
            auto& blk = *blocks[b];
            reg_conv(base + ".conv_in", g, blk.conv_in);
            reg_site(base + ".act_in", g, blk.act_in);
            reg_bn(base + ".bn_in", g, blk.bn_in);
            for (std::size_t j = 0; j < blk.res2.convs().size(); ++j) {
                reg_conv(base + ".res2.conv" + std::to_string(j + 1), g,
                         blk.res2.convs()[j]);
                reg_site(base + ".res2.act" + std::to_string(j + 1), g,
                         blk.res2.acts()[j]);
            }
            reg_bn(base + ".bn_mid", g, blk.bn_mid);
            reg_conv(base + ".conv_out", g, blk.conv_out);
            reg_site(base + ".act_out", g, blk.act_out);
            reg_bn(base + ".bn_out", g, blk.bn_out);
            reg_param(base + ".se.fc1.weight", g, ParamKind::SE, blk.se.w1);
            reg_param(base + ".se.fc1.bias", g, ParamKind::SE, blk.se.b1_);
            reg_param(base + ".se.fc2.weight", g, ParamKind::SE, blk.se.w2);
            reg_param(base + ".se.fc2.bias", g, ParamKind::SE, blk.se.b2_);
        }
        reg_conv("g4.conv", LayerGroupId::G4, g4_conv);
        reg_site("g4.act", LayerGroupId::G4, g4_act);
        reg_param("g5.attn.w1", LayerGroupId::G5, ParamKind::ATTN, pool.w1);
        reg_param("g5.attn.b1", LayerGroupId::G5, ParamKind::ATTN, pool.b1);
        reg_site("g5.attn.act", LayerGroupId::G5, pool.act);
        reg_param("g5.attn.w2", LayerGroupId::G5, ParamKind::ATTN, pool.w2);
        reg_param("g5.attn.b2", LayerGroupId::G5, ParamKind::ATTN, pool.b2);
        reg_bn("g5.bn", LayerGroupId::G5, g5_bn);
        reg_param("g6.fc.weight", LayerGroupId::G6, ParamKind::FC, g6_fc.weight);
        reg_param("g6.fc.bias", LayerGroupId::G6, ParamKind::FC, g6_fc.bias);
        reg_bn("g6.bn", LayerGroupId::G6, g6_bn);
    }

    Conv1d stem_conv;
    ActSite stem_act;
    BatchNorm1d stem_bn;
    std::vector<std::unique_ptr<SERes2Block>> blocks;
    Conv1d g4_conv;
    ActSite g4_act;
    AttentiveStatsPool pool;
    BatchNorm1d g5_bn;
    Linear g6_fc;
    BatchNorm1d g6_bn;
    // Optional AdaIN conditioning at the G4 feature output (KAM baseline);
    // owned by the surrounding model bundle, not the encoder.
    AdaINSite* kam_site = nullptr;

  private:
    Mat run(const std::vector<MelFeatureSequence>& feats,
            const ConditioningContext* ctx, bool training, Trace* tr) {
        if (feats.empty()) throw DataError("encoder forward: empty batch");
        BatchSeq x;
        x.items.reserve(feats.size());
        for (const auto& f : feats) {
            f.validate(cfg_.n_mels);
            x.items.push_back(f.frames);
        }
        if (ctx && ctx->te.size() != cfg_.embed_dim)
            throw ShapeError("conditioning te dimension mismatch");

        x = stem_conv.forward(x, tr ? &tr->stem_conv_tr : nullptr);
        x = stem_act.forward(x, ctx, tr ? &tr->stem_act_tr : nullptr);
        x = training ? stem_bn.forward_train(x, &tr->stem_bn_tr)
                     : stem_bn.forward_eval(x, tr ? &tr->stem_bn_tr : nullptr);

        if (tr) tr->block_tr.resize(blocks.size());
        std::vector<BatchSeq> outs;
        outs.reserve(blocks.size());
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            x = blocks[b]->forward(x, ctx, training, tr ? &tr->block_tr[b] : nullptr);
            outs.push_back(x);
        }

        BatchSeq cat;
        cat.items.reserve(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            Mat m(cfg_.concat_channels(), x.items[i].cols());
            for (std::size_t b = 0; b < blocks.size(); ++b)
                m.middleRows(static_cast<Eigen::Index>(b) * cfg_.channels,
                             cfg_.channels) = outs[b].items[i];
            cat.items.push_back(std::move(m));
        }

        cat = g4_conv.forward(cat, tr ? &tr->g4_conv_tr : nullptr);
        cat = g4_act.forward(cat, ctx, tr ? &tr->g4_act_tr : nullptr);

        if (kam_site) {
            if (!ctx)
                throw MissingConditioningError(
                    "KAM conditioning active but no text embedding provided");
            if (tr) tr->kam_tr.resize(cat.size());
            for (std::size_t i = 0; i < cat.size(); ++i)
                cat.items[i] = kam_site->apply(cat.items[i], ctx->te,
                                               tr ? &tr->kam_tr[i] : nullptr);
        }

        Mat pooled = pool.forward(cat, ctx, tr ? &tr->pool_tr : nullptr);
        pooled = bseq1(training ? g5_bn.forward_train(seq1(pooled), &tr->g5_bn_tr)
                                : g5_bn.forward_eval(seq1(pooled),
                                                     tr ? &tr->g5_bn_tr : nullptr));
        Mat z = g6_fc.forward(pooled, tr ? &tr->g6_fc_tr : nullptr);
        z = bseq1(training ? g6_bn.forward_train(seq1(z), &tr->g6_bn_tr)
                           : g6_bn.forward_eval(seq1(z), tr ? &tr->g6_bn_tr : nullptr));
        return L2Normalize::forward(z, tr ? &tr->l2_tr : nullptr);
    }

    static BatchSeq seq1(const Mat& m) {
        BatchSeq s;
        s.items.push_back(m);
        return s;
    }

    static Mat bseq1(const BatchSeq& s) { return s.items.front(); }

    void tag_sites() {
        int idx = 0;
        for (ActSite* s : sites()) s->site_index = idx++;
        stem_act.group = LayerGroupId::G0;
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            const auto g = static_cast<LayerGroupId>(static_cast<int>(LayerGroupId::G1) +
                                                     static_cast<int>(b));
            blocks[b]->act_in.group = g;
            for (auto& a : blocks[b]->res2.acts()) a.group = g;
            blocks[b]->act_out.group = g;
        }
        g4_act.group = LayerGroupId::G4;
        pool.act.group = LayerGroupId::G5;
    }

    void reg_param(const std::string& name, LayerGroupId g, ParamKind k,
                   Parameter& p) {
        p.name = name;
        p.group = g;
        p.kind = k;
        params_.push_back(&p);
    }

    void reg_conv(const std::string& base, LayerGroupId g, Conv1d& c) {
        reg_param(base + ".weight", g, ParamKind::CONV, c.weight);
        reg_param(base + ".bias", g, ParamKind::CONV, c.bias);
    }

    void reg_bn(const std::string& base, LayerGroupId g, BatchNorm1d& bn) {
        reg_param(base + ".gamma", g, ParamKind::BN, bn.gamma);
        reg_param(base + ".beta", g, ParamKind::BN, bn.beta);
        bn.running_mean.name = base + ".running_mean";
        bn.running_var.name = base + ".running_var";
        buffers_.push_back(&bn.running_mean);
        buffers_.push_back(&bn.running_var);
    }

    void reg_site(const std::string& base, LayerGroupId g, ActSite& s) {
        if (!s.laf) return;
        reg_param(base + ".laf.w", g, ParamKind::LAF, s.laf->w);
        reg_param(base + ".laf.b", g, ParamKind::LAF, s.laf->b);
    }

    EncoderConfig cfg_;
    std::vector<Parameter*> params_;
    std::vector<BufferTensor*> buffers_;
};

} // namespace taa
