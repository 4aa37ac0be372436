#pragma once

// Feature-weight adapter machinery: declarative selection of trainable
// parameter subsets (BN by group, SE by group, TCFM sites, classifier mode),
// bit-exact snapshot/restore, and the tunable-parameter audit.

#include "taa/common.hpp"
#include "taa/conditioning.hpp"
#include "taa/encoder.hpp"
#include "taa/text_encoder.hpp"

#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace taa {

// ─── Detection heads ─────────────────────────────────────────────────────────
// COSINE_TE scores with the frozen text embedding as the classifier weight
// (logit = te . ae). LEARNED_VECTOR is the fine-tunable binary head;
// SOFTMAX covers the 2-/3-class baselines.

struct DetectionHead {
    enum class Kind { COSINE_TE, LEARNED_VECTOR, SOFTMAX };

    Kind kind = Kind::COSINE_TE;
    int n_classes = 0; // SOFTMAX only
    Parameter weight;  // LEARNED_VECTOR: 1 x d; SOFTMAX: K x d
    Parameter bias;    // 1 x 1 or K x 1

    static DetectionHead cosine_te() { return DetectionHead{}; }

    // te_init seeds the learned vector with the keyword's text embedding;
    // pass std::nullopt for from-scratch initialization.
    static DetectionHead learned_vector(int d, std::optional<Vec> te_init,
                                        std::uint64_t seed = 0) {
        DetectionHead h;
        h.kind = Kind::LEARNED_VECTOR;
        if (te_init) {
            h.weight.init_zero(1, d);
            h.weight.value.row(0) = te_init->transpose();
        } else {
            Rng rng = Rng::derive(seed, "head-init");
            h.weight.init_uniform(1, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
        }
        h.bias.init_zero(1, 1);
        h.tag();
        return h;
    }

    static DetectionHead softmax_head(int d, int n_classes, std::uint64_t seed = 0) {
        DetectionHead h;
        h.kind = Kind::SOFTMAX;
        h.n_classes = n_classes;
        Rng rng = Rng::derive(seed, "head-init");
        h.weight.init_uniform(n_classes, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
        h.bias.init_zero(n_classes, 1);
        h.tag();
        return h;
    }

    bool has_params() const { return kind != Kind::COSINE_TE; }

    long long param_count() const {
        return has_params() ? weight.count() + bias.count() : 0;
    }

    void tag() {
        weight.name = "clf.weight";
        bias.name = "clf.bias";
        weight.group = bias.group = LayerGroupId::G6;
        weight.kind = bias.kind = ParamKind::FC;
    }

    // Logits from embeddings (d x N). COSINE_TE needs the te.
    Mat logits(const Mat& ae, const Vec* te) const {
        switch (kind) {
            case Kind::COSINE_TE:
                if (!te)
                    throw MissingConditioningError(
                        "cosine head requires a text embedding");
                return te->transpose() * ae;
            case Kind::LEARNED_VECTOR:
                return (weight.value * ae).array() + bias.value(0, 0);
            case Kind::SOFTMAX: {
                Mat l = weight.value * ae;
                l.colwise() += bias.value.col(0);
                return l;
            }
        }
        return {};
    }

    // d(loss)/d(ae) given d(loss)/d(logits); accumulates head grads.
    Mat backward(const Mat& dlogits, const Mat& ae, const Vec* te) {
        switch (kind) {
            case Kind::COSINE_TE:
                return *te * dlogits; // d x N
            case Kind::LEARNED_VECTOR:
            case Kind::SOFTMAX:
                weight.grad.noalias() += dlogits * ae.transpose();
                bias.grad.col(0) += dlogits.rowwise().sum();
                return weight.value.transpose() * dlogits;
        }
        return {};
    }
};

// ─── Adapter spec ────────────────────────────────────────────────────────────

struct AdapterSpec {
    enum class Classifier { FIXED_TE, LEARNED_FC };
    enum class Conditioning { NONE, TCFM, ADAIN_KAM };

    std::set<LayerGroupId> bn_groups;
    std::set<LayerGroupId> se_groups;   // must lie in G1..G3
    std::set<LayerGroupId> tcfm_sites;  // must lie in G0..G5
    Classifier classifier = Classifier::FIXED_TE;
    Conditioning conditioning = Conditioning::NONE;
    // Baseline switch: fine-tune every model parameter (FT / 2-class /
    // 3-class / KAM baselines). Selective sets above are ignored when set.
    bool full_model = false;

    static const std::set<LayerGroupId>& all_bn_groups() {
        static const std::set<LayerGroupId> g = {
            LayerGroupId::G0, LayerGroupId::G1, LayerGroupId::G2,
            LayerGroupId::G3, LayerGroupId::G5, LayerGroupId::G6};
        return g;
    }

    void validate() const {
        static const std::set<LayerGroupId> se_ok = {
            LayerGroupId::G1, LayerGroupId::G2, LayerGroupId::G3};
        for (LayerGroupId g : se_groups)
            if (!se_ok.count(g))
                throw ConfigError("AdapterSpec: group " + to_string(g) +
                                  " has no SE module");
        for (LayerGroupId g : bn_groups)
            if (g == LayerGroupId::G4)
                throw ConfigError("AdapterSpec: G4 carries no BN layer");
        for (LayerGroupId g : tcfm_sites)
            if (g == LayerGroupId::G6)
                throw ConfigError("AdapterSpec: G6 has no activation site");
        if (conditioning != Conditioning::TCFM && !tcfm_sites.empty())
            throw ConfigError("AdapterSpec: tcfm_sites set but conditioning is not TCFM");
        if (conditioning == Conditioning::TCFM && tcfm_sites.empty())
            throw ConfigError("AdapterSpec: TCFM conditioning needs at least one site");
    }

    // The paper's headline configuration: TCFM at G4+G5, SE G3, all BN,
    // fixed-TE classifier.
    static AdapterSpec ta_adapter() {
        AdapterSpec s;
        s.bn_groups = all_bn_groups();
        s.se_groups = {LayerGroupId::G3};
        s.tcfm_sites = {LayerGroupId::G4, LayerGroupId::G5};
        s.classifier = Classifier::FIXED_TE;
        s.conditioning = Conditioning::TCFM;
        return s;
    }
};

// Everything adaptation can touch: the acoustic encoder plus the optional
// head and KAM module, and the (frozen) text encoder for snapshots.
struct ModelView {
    EncoderModel* encoder = nullptr;
    TextEncoder* text = nullptr;
    DetectionHead* head = nullptr;
    AdaINSite* kam = nullptr;

    std::vector<Parameter*> params() const {
        std::vector<Parameter*> out;
        if (encoder)
            for (Parameter* p : encoder->parameters()) out.push_back(p);
        if (text)
            for (Parameter* p : text->parameters()) out.push_back(p);
        if (head && head->has_params()) {
            out.push_back(&head->weight);
            out.push_back(&head->bias);
        }
        if (kam) {
            out.push_back(&kam->w);
            out.push_back(&kam->b);
        }
        return out;
    }

    std::vector<BufferTensor*> bufs() const {
        std::vector<BufferTensor*> out;
        if (encoder)
            for (BufferTensor* b : encoder->buffers()) out.push_back(b);
        return out;
    }
};

// ─── Trainable plan ──────────────────────────────────────────────────────────

struct TrainablePlan {
    std::vector<std::string> names; // exact trainable set, registry order
    std::set<LayerGroupId> adapted_bn_groups;
    bool all_bn_adapted = false;

    long long count(const ModelView& view) const {
        std::set<std::string> sel(names.begin(), names.end());
        long long n = 0;
        for (const Parameter* p : view.params())
            if (sel.count(p->name)) n += p->count();
        return n;
    }

    // Flips trainable flags and BN modes; everything else is frozen.
    void apply(ModelView& view) const {
        std::set<std::string> sel(names.begin(), names.end());
        for (Parameter* p : view.params()) p->trainable = sel.count(p->name) > 0;
        if (view.encoder) {
            if (all_bn_adapted)
                view.encoder->set_adapted_bn(
                    {LayerGroupId::G0, LayerGroupId::G1, LayerGroupId::G2,
                     LayerGroupId::G3, LayerGroupId::G5, LayerGroupId::G6});
            else
                view.encoder->set_adapted_bn(adapted_bn_groups);
        }
    }
};

// Resolve a spec into the exact trainable name set. Side-effect-free; the
// plan mutates nothing until applied. TCFM sites must already be attached.
inline TrainablePlan select_trainable(const ModelView& view, const AdapterSpec& spec) {
    spec.validate();
    TrainablePlan plan;
    if (!view.encoder) throw ConfigError("select_trainable: no encoder in view");

    if (spec.conditioning == AdapterSpec::Conditioning::TCFM) {
        const auto attached = view.encoder->laf_groups();
        for (LayerGroupId g : spec.tcfm_sites)
            if (!attached.count(g))
                throw ConfigError("select_trainable: TCFM site " + to_string(g) +
                                  " selected but no LAF attached there");
    }

    if (spec.full_model) {
        for (const Parameter* p : view.encoder->parameters())
            plan.names.push_back(p->name);
        plan.all_bn_adapted = true;
    } else {
        for (const Parameter* p : view.encoder->parameters()) {
            const bool bn_sel = p->kind == ParamKind::BN && spec.bn_groups.count(p->group);
            const bool se_sel = p->kind == ParamKind::SE && spec.se_groups.count(p->group);
            const bool laf_sel =
                p->kind == ParamKind::LAF && spec.tcfm_sites.count(p->group);
            if (bn_sel || se_sel || laf_sel) plan.names.push_back(p->name);
        }
        plan.adapted_bn_groups = spec.bn_groups;
    }
    if (view.head && view.head->has_params()) {
        plan.names.push_back(view.head->weight.name);
        plan.names.push_back(view.head->bias.name);
    }
    if (view.kam && spec.conditioning == AdapterSpec::Conditioning::ADAIN_KAM) {
        plan.names.push_back(view.kam->w.name);
        plan.names.push_back(view.kam->b.name);
    }
    return plan;
}

// ─── Snapshot / restore ──────────────────────────────────────────────────────

struct ParamSnapshot {
    struct Entry {
        std::string name;
        Mat value;
    };
    std::vector<Entry> params;
    std::vector<Entry> buffers;
    std::uint64_t checksum = 0;

    static std::uint64_t compute_checksum(const ParamSnapshot& s) {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& e : s.params)
            h = fnv1a(e.value.data(),
                      static_cast<std::size_t>(e.value.size()) * sizeof(double), h);
        for (const auto& e : s.buffers)
            h = fnv1a(e.value.data(),
                      static_cast<std::size_t>(e.value.size()) * sizeof(double), h);
        return h;
    }
};

inline ParamSnapshot snapshot(const ModelView& view) {
    ParamSnapshot s;
    for (const Parameter* p : view.params()) s.params.push_back({p->name, p->value});
    for (const BufferTensor* b : view.bufs()) s.buffers.push_back({b->name, b->value});
    s.checksum = ParamSnapshot::compute_checksum(s);
    return s;
}

// Bitwise restore. The snapshot must cover exactly the view's current
// parameter/buffer sets (names and shapes).
inline void restore(ModelView& view, const ParamSnapshot& snap) {
    if (ParamSnapshot::compute_checksum(snap) != snap.checksum)
        throw SnapshotError("snapshot corrupted: checksum mismatch");

    auto match = [](auto& live, const auto& saved, const char* what) {
        if (live.size() != saved.size())
            throw SnapshotError(std::string("incompatible snapshot: ") + what +
                                " count differs");
        for (std::size_t i = 0; i < live.size(); ++i) {
            if (live[i]->name != saved[i].name)
                throw SnapshotError(std::string("incompatible snapshot: ") + what +
                                    " '" + saved[i].name + "' vs '" + live[i]->name +
                                    "'");
            if (live[i]->value.rows() != saved[i].value.rows() ||
                live[i]->value.cols() != saved[i].value.cols())
                throw SnapshotError("incompatible snapshot: shape mismatch at '" +
                                    saved[i].name + "'");
        }
    };
    auto params = view.params();
    auto bufs = view.bufs();
    match(params, snap.params, "parameter");
    match(bufs, snap.buffers, "buffer");
    for (std::size_t i = 0; i < params.size(); ++i)
        params[i]->value = snap.params[i].value;
    for (std::size_t i = 0; i < bufs.size(); ++i)
        bufs[i]->value = snap.buffers[i].value;
}

// ─── Audit ───────────────────────────────────────────────────────────────────

struct AuditRow {
    std::string selector;
    long long params = 0;
    double percent = 0.0;
    std::string note;
};

struct AuditReport {
    std::vector<AuditRow> rows;
    long long total_params = 0;

    std::string to_csv() const {
        std::ostringstream os;
        os << "selector,params,percent_of_total,note\n";
        for (const auto& r : rows) {
            os << '"' << r.selector << "\"," << r.params << ',';
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.4f", r.percent);
            os << buf << ",\"" << r.note << "\"\n";
        }
        os << "\"total\"," << total_params << ",100.0000,\"\"\n";
        return os.str();
    }
};

// Tunable-parameter count for a spec, from tag metadata plus the per-site
// TCFM law (d*a+a per site) for rows whose sites are not attached.
inline long long spec_param_count(EncoderModel& model, const AdapterSpec& spec,
                                  int head_params) {
    spec.validate();
    if (spec.full_model) return model.total_param_count() + head_params;
    long long n = 0;
    const auto attached = model.laf_groups();
    for (const Parameter* p : model.parameters()) {
        if (p->kind == ParamKind::BN && spec.bn_groups.count(p->group)) n += p->count();
        if (p->kind == ParamKind::SE && spec.se_groups.count(p->group)) n += p->count();
        if (p->kind == ParamKind::LAF && spec.tcfm_sites.count(p->group) &&
            attached.count(p->group))
            n += p->count();
    }
    // sites selected but not attached: count arithmetically
    const auto census = model.site_count_by_group();
    const auto cost = conditioning_param_count(ConditioningKind::TCFM,
                                               model.config().embed_dim, 0,
                                               static_cast<int>(ActivationBasis::size()));
    for (LayerGroupId g : spec.tcfm_sites)
        if (!attached.count(g) && census.count(g))
            n += census.at(g) * cost.total();
    return n + head_params;
}

inline AuditReport audit(EncoderModel& model,
                         const std::vector<std::pair<std::string, AdapterSpec>>& specs) {
    AuditReport report;
    report.total_params = model.total_param_count();
    for (const auto& [name, spec] : specs) {
        AuditRow row;
        row.selector = name;
        const int head = spec.classifier == AdapterSpec::Classifier::LEARNED_FC
                             ? model.config().embed_dim + 1
                             : 0;
        row.params = spec_param_count(model, spec, head);
        row.percent = 100.0 * static_cast<double>(row.params) /
                      static_cast<double>(report.total_params);
        if (spec.tcfm_sites.count(LayerGroupId::G5))
            row.note = "uniform d*a+a TCFM cost applied at every site including G5";
        report.rows.push_back(std::move(row));
    }
    return report;
}

} // namespace taa
