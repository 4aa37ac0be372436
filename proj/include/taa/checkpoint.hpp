#pragma once

// Single-file checkpoint container: an 8-byte magic, a JSON metadata record
// (configs, structural info, array directory, payload checksum) and a raw
// little-endian float64 payload. Save/load round-trips are bit-exact.

#include "taa/adapter.hpp"
#include "taa/common.hpp"
#include "taa/encoder.hpp"
#include "taa/text_encoder.hpp"

#include <json.hpp>

#include <fstream>
#include <memory>
#include <set>
#include <string>
#include <vector>

namespace taa {

using json = nlohmann::json;

inline void to_json(json& j, const EncoderConfig& c) {
    j = json{{"n_mels", c.n_mels},
             {"channels", c.channels},
             {"res2_scale", c.res2_scale},
             {"n_blocks", c.n_blocks},
             {"attn_channels", c.attn_channels},
             {"embed_dim", c.embed_dim},
             {"dilations", c.dilations}};
}

inline void from_json(const json& j, EncoderConfig& c) {
    j.at("n_mels").get_to(c.n_mels);
    j.at("channels").get_to(c.channels);
    j.at("res2_scale").get_to(c.res2_scale);
    j.at("n_blocks").get_to(c.n_blocks);
    j.at("attn_channels").get_to(c.attn_channels);
    j.at("embed_dim").get_to(c.embed_dim);
    j.at("dilations").get_to(c.dilations);
}

inline void to_json(json& j, const TextEncoderConfig& c) {
    j = json{{"embed_dim", c.embed_dim},
             {"char_dim", c.char_dim},
             {"conv_layers", c.conv_layers},
             {"kernel", c.kernel}};
}

inline void from_json(const json& j, TextEncoderConfig& c) {
    j.at("embed_dim").get_to(c.embed_dim);
    j.at("char_dim").get_to(c.char_dim);
    j.at("conv_layers").get_to(c.conv_layers);
    j.at("kernel").get_to(c.kernel);
}

// The full set of model components a run operates on. `head` and `kam` stay
// null unless a method attaches them.
struct ModelBundle {
    EncoderConfig enc_cfg;
    TextEncoderConfig text_cfg;
    std::unique_ptr<EncoderModel> encoder;
    std::unique_ptr<TextEncoder> text;
    std::unique_ptr<DetectionHead> head;
    std::unique_ptr<AdaINSite> kam;

    ModelView view() {
        return ModelView{encoder.get(), text.get(),
                         head && head->has_params() ? head.get() : nullptr,
                         kam.get()};
    }
};

inline ModelBundle make_model_bundle(const EncoderConfig& enc_cfg,
                                     const TextEncoderConfig& text_cfg,
                                     std::uint64_t seed) {
    if (enc_cfg.embed_dim != text_cfg.embed_dim)
        throw ConfigError("model bundle: encoder embed_dim " +
                          std::to_string(enc_cfg.embed_dim) +
                          " differs from text embed_dim " +
                          std::to_string(text_cfg.embed_dim));
    ModelBundle b;
    b.enc_cfg = enc_cfg;
    b.text_cfg = text_cfg;
    b.encoder = std::make_unique<EncoderModel>(enc_cfg, seed);
    b.text = std::make_unique<TextEncoder>(text_cfg, seed);
    return b;
}

namespace detail {

constexpr char kCkptMagic[8] = {'T', 'A', 'A', 'C', 'K', 'P', 'T', '1'};

struct ArrayRef {
    std::string name;
    const Mat* value;
    bool buffer;
};

inline std::vector<ArrayRef> array_dir(const ModelView& view) {
    std::vector<ArrayRef> arrays;
    for (const Parameter* p : view.params())
        arrays.push_back({p->name, &p->value, false});
    for (const BufferTensor* b : view.bufs())
        arrays.push_back({b->name, &b->value, true});
    return arrays;
}

} // namespace detail

inline void save_checkpoint(const std::string& path, ModelBundle& bundle) {
    ModelView view = bundle.view();
    const auto arrays = detail::array_dir(view);

    json meta;
    meta["format_version"] = 1;
    meta["encoder_config"] = bundle.enc_cfg;
    meta["text_config"] = bundle.text_cfg;
    std::vector<std::string> laf;
    for (LayerGroupId g : bundle.encoder->laf_groups()) laf.push_back(to_string(g));
    meta["laf_groups"] = laf;
    if (bundle.head && bundle.head->has_params()) {
        meta["head"] = {
            {"kind", bundle.head->kind == DetectionHead::Kind::SOFTMAX
                         ? "softmax"
                         : "learned_vector"},
            {"n_classes", bundle.head->n_classes}};
    }
    if (bundle.kam) meta["kam"] = {{"channels", bundle.kam->channels}};

    json dir = json::array();
    std::uint64_t offset = 0;
    std::uint64_t checksum = 0xcbf29ce484222325ULL;
    for (const auto& a : arrays) {
        dir.push_back({{"name", a.name},
                       {"rows", a.value->rows()},
                       {"cols", a.value->cols()},
                       {"buffer", a.buffer},
                       {"offset", offset}});
        const auto bytes = static_cast<std::size_t>(a.value->size()) * sizeof(double);
        checksum = fnv1a(a.value->data(), bytes, checksum);
        offset += bytes;
    }
    meta["arrays"] = dir;
    meta["payload_checksum"] = checksum;

    const std::string meta_str = meta.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint '" + path + "'");
    out.write(detail::kCkptMagic, 8);
    const std::uint64_t meta_len = meta_str.size();
    out.write(reinterpret_cast<const char*>(&meta_len), 8);
    out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    for (const auto& a : arrays)
        out.write(reinterpret_cast<const char*>(a.value->data()),
                  static_cast<std::streamsize>(a.value->size() * sizeof(double)));
    if (!out) throw DataError("write failure on checkpoint '" + path + "'");
}

inline ModelBundle load_checkpoint(const std::string& path,
                                   std::uint64_t build_seed = 0) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != std::string(detail::kCkptMagic, 8))
        throw DataError("'" + path + "' is not a checkpoint file");
    std::uint64_t meta_len = 0;
    in.read(reinterpret_cast<char*>(&meta_len), 8);
    std::string meta_str(meta_len, '\0');
    in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
    if (!in) throw DataError("checkpoint '" + path + "' is truncated");
    json meta = json::parse(meta_str, nullptr, false);
    if (meta.is_discarded())
        throw DataError("checkpoint '" + path + "' has corrupt metadata");
    if (meta.at("format_version").get<int>() != 1)
        throw DataError("checkpoint '" + path + "' has unsupported format version");

    ModelBundle bundle = make_model_bundle(meta.at("encoder_config").get<EncoderConfig>(),
                                           meta.at("text_config").get<TextEncoderConfig>(),
                                           build_seed);
    std::set<LayerGroupId> laf;
    for (const auto& g : meta.at("laf_groups"))
        laf.insert(group_from_string(g.get<std::string>()));
    if (!laf.empty()) bundle.encoder->attach_laf(laf);
    if (meta.contains("head")) {
        const auto kind = meta["head"].at("kind").get<std::string>();
        if (kind == "softmax")
            bundle.head = std::make_unique<DetectionHead>(DetectionHead::softmax_head(
                bundle.enc_cfg.embed_dim, meta["head"].at("n_classes").get<int>()));
        else
            bundle.head = std::make_unique<DetectionHead>(
                DetectionHead::learned_vector(bundle.enc_cfg.embed_dim, std::nullopt));
    }
    if (meta.contains("kam")) {
        bundle.kam = std::make_unique<AdaINSite>(
            bundle.enc_cfg.embed_dim, meta["kam"].at("channels").get<int>());
        bundle.kam->w.name = "kam.proj.weight";
        bundle.kam->b.name = "kam.proj.bias";
        bundle.encoder->kam_site = bundle.kam.get();
    }

    ModelView view = bundle.view();
    auto arrays = detail::array_dir(view);
    const auto& dir = meta.at("arrays");
    if (dir.size() != arrays.size())
        throw DataError("checkpoint '" + path + "': array count mismatch");
    std::uint64_t checksum = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < arrays.size(); ++i) {
        const auto& entry = dir[i];
        if (entry.at("name").get<std::string>() != arrays[i].name)
            throw DataError("checkpoint '" + path + "': unexpected array '" +
                            entry.at("name").get<std::string>() + "' (want '" +
                            arrays[i].name + "')");
        auto* m = const_cast<Mat*>(arrays[i].value);
        if (entry.at("rows").get<Eigen::Index>() != m->rows() ||
            entry.at("cols").get<Eigen::Index>() != m->cols())
            throw DataError("checkpoint '" + path + "': shape mismatch at '" +
                            arrays[i].name + "'");
        in.read(reinterpret_cast<char*>(m->data()),
                static_cast<std::streamsize>(m->size() * sizeof(double)));
        if (!in) throw DataError("checkpoint '" + path + "' payload truncated");
        checksum = fnv1a(m->data(),
                         static_cast<std::size_t>(m->size()) * sizeof(double),
                         checksum);
    }
    if (checksum != meta.at("payload_checksum").get<std::uint64_t>())
        throw DataError("checkpoint '" + path + "' payload is corrupt (checksum)");
    return bundle;
}

} // namespace taa
