#pragma once

// Dataset ingestion and synthesis: a GSC-style folder/manifest loader, a
// seeded synthetic toy-keyword generator for desk-scale runs, feature-domain
// augmentation (exponential-decay reverb kernels + additive noise at a drawn
// SNR), and few-shot sampling. Manifests are immutable after load; every
// random draw derives from (seed, record id, draw index).

#include "taa/common.hpp"
#include "taa/encoder.hpp"
#include "taa/rng.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace taa {

inline const std::string kNoiseLabel = "_noise_";

struct UtteranceRecord {
    std::string id;
    std::string keyword; // kNoiseLabel for background noise
    std::string split;   // train | valid | test
    std::string path;    // file-backed records; empty for synthetic
    int synth_class = -1; // toy template index; -1 for noise/file records

    bool is_noise() const { return keyword == kNoiseLabel; }
};

struct DatasetManifest {
    std::vector<UtteranceRecord> records;
    std::vector<std::string> keyword_inventory; // non-noise, sorted
    std::set<std::string> seen, unseen;
    std::vector<std::string> warnings;

    std::vector<const UtteranceRecord*> select(const std::string& keyword,
                                               const std::string& split) const {
        std::vector<const UtteranceRecord*> out;
        for (const auto& r : records)
            if (r.keyword == keyword && r.split == split) out.push_back(&r);
        return out;
    }

    std::vector<const UtteranceRecord*> negatives(const std::string& target,
                                                  const std::string& split) const {
        std::vector<const UtteranceRecord*> out;
        for (const auto& r : records)
            if (r.split == split && !r.is_noise() && r.keyword != target)
                out.push_back(&r);
        return out;
    }

    std::vector<const UtteranceRecord*> noise(const std::string& split) const {
        return select(kNoiseLabel, split);
    }
};

class FeatureProvider {
  public:
    virtual ~FeatureProvider() = default;
    virtual MelFeatureSequence load(const UtteranceRecord& rec) const = 0;
};

// ─── Toy dataset ─────────────────────────────────────────────────────────────
// Each keyword is a class of mel-like sequences built from a keyword-specific
// template of spectro-temporal bumps, warped in time and jittered per
// utterance. Noise records are smoothed Gaussian sheets.

struct ToyDatasetConfig {
    int n_keywords = 8;
    int n_per_keyword = 40;
    int n_noise = 40;
    std::uint64_t seed = 0;
    int n_mels = 20;
    int base_frames = 32;
    double jitter = 0.15;
    int n_seen = -1; // keywords tagged seen; -1 = all

    void validate() const {
        if (n_keywords < 2)
            throw DataError("toy dataset: need at least 2 keywords (got " +
                            std::to_string(n_keywords) + ")");
        if (n_per_keyword < 5)
            throw DataError("toy dataset: need at least 5 utterances per keyword");
        if (n_mels < 4 || base_frames < 8)
            throw DataError("toy dataset: n_mels >= 4 and base_frames >= 8 required");
    }
};

inline std::string toy_keyword_name(int index) {
    static const std::vector<std::string> words = {
        "alpha", "bravo", "charlie", "delta", "echo",  "foxtrot", "golf",
        "hotel", "india", "juliet",  "kilo",  "lima",  "mike",    "november",
        "oscar", "papa",  "quebec",  "romeo", "sierra", "tango",  "uniform",
        "victor", "whiskey", "xray", "yankee", "zulu"};
    if (index < static_cast<int>(words.size()))
        return words[static_cast<std::size_t>(index)];
    return "kw" + std::to_string(index);
}

class ToyFeatureProvider : public FeatureProvider {
  public:
    explicit ToyFeatureProvider(const ToyDatasetConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        templates_.reserve(static_cast<std::size_t>(cfg.n_keywords));
        for (int k = 0; k < cfg.n_keywords; ++k)
            templates_.push_back(make_template(k));
    }

    MelFeatureSequence load(const UtteranceRecord& rec) const override {
        Rng rng = Rng::derive(cfg_.seed, "utt:" + rec.id);
        if (rec.is_noise()) return {noise_sheet(rng)};
        if (rec.synth_class < 0 ||
            rec.synth_class >= static_cast<int>(templates_.size()))
            throw DataError("toy provider: record '" + rec.id +
                            "' has no valid template index");
        return {utterance_from_template(
            templates_[static_cast<std::size_t>(rec.synth_class)], rng)};
    }

    const ToyDatasetConfig& config() const { return cfg_; }

  private:
    Mat make_template(int k) const {
        Rng rng = Rng::derive(cfg_.seed, "template", static_cast<std::uint64_t>(k));
        Mat t = Mat::Zero(cfg_.n_mels, cfg_.base_frames);
        const int n_bumps = 3 + static_cast<int>(rng.index(3));
        for (int b = 0; b < n_bumps; ++b) {
            const double amp = rng.uniform(0.8, 1.6);
            const double mu_m = rng.uniform(0.1, 0.9) * (cfg_.n_mels - 1);
            const double mu_t = rng.uniform(0.1, 0.9) * (cfg_.base_frames - 1);
            const double sd_m = rng.uniform(1.0, 2.5);
            const double sd_t = rng.uniform(2.0, 5.0);
            for (int m = 0; m < cfg_.n_mels; ++m)
                for (int f = 0; f < cfg_.base_frames; ++f)
                    t(m, f) += amp * std::exp(-0.5 * (std::pow((m - mu_m) / sd_m, 2) +
                                                      std::pow((f - mu_t) / sd_t, 2)));
        }
        return t;
    }

    Mat utterance_from_template(const Mat& tmpl, Rng& rng) const {
        const double warp = rng.uniform(0.85, 1.15);
        const auto t_out = std::max<Eigen::Index>(
            8, static_cast<Eigen::Index>(std::lround(warp * cfg_.base_frames)));
        const double gain = rng.uniform(0.8, 1.25);
        Mat out(cfg_.n_mels, t_out);
        const double scale =
            static_cast<double>(tmpl.cols() - 1) / static_cast<double>(t_out - 1);
        for (Eigen::Index f = 0; f < t_out; ++f) {
            const double src = f * scale;
            const auto lo = static_cast<Eigen::Index>(src);
            const auto hi = std::min<Eigen::Index>(lo + 1, tmpl.cols() - 1);
            const double frac = src - lo;
            out.col(f) = gain * ((1.0 - frac) * tmpl.col(lo) + frac * tmpl.col(hi));
        }
        for (Eigen::Index m = 0; m < out.rows(); ++m)
            for (Eigen::Index f = 0; f < out.cols(); ++f)
                out(m, f) += rng.normal(0.0, cfg_.jitter);
        return out;
    }

    Mat noise_sheet(Rng& rng) const {
        const auto t_len = static_cast<Eigen::Index>(
            cfg_.base_frames + static_cast<int>(rng.index(9)) - 4);
        const double level = rng.uniform(0.4, 1.0);
        Mat raw = Mat::NullaryExpr(cfg_.n_mels, t_len,
                                   [&]() { return rng.normal(0.0, level); });
        // short moving average along time: smooth, colored sheets
        Mat out = raw;
        for (Eigen::Index f = 1; f + 1 < t_len; ++f)
            out.col(f) = (raw.col(f - 1) + raw.col(f) + raw.col(f + 1)) / 3.0;
        return out;
    }

    ToyDatasetConfig cfg_;
    std::vector<Mat> templates_;
};

struct ToyDataset {
    DatasetManifest manifest;
    std::shared_ptr<ToyFeatureProvider> provider;
};

// Deterministic under (config contents); splits cycle train/train/train/
// valid/test per class index.
inline ToyDataset make_toy_dataset(const ToyDatasetConfig& cfg) {
    cfg.validate();
    ToyDataset ds;
    ds.provider = std::make_shared<ToyFeatureProvider>(cfg);
    auto split_of = [](int i) {
        switch (i % 5) {
            case 3: return "valid";
            case 4: return "test";
            default: return "train";
        }
    };
    for (int k = 0; k < cfg.n_keywords; ++k) {
        const std::string kw = toy_keyword_name(k);
        ds.manifest.keyword_inventory.push_back(kw);
        for (int i = 0; i < cfg.n_per_keyword; ++i) {
            UtteranceRecord r;
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%s_%03d", kw.c_str(), i);
            r.id = buf;
            r.keyword = kw;
            r.split = split_of(i);
            r.synth_class = k;
            ds.manifest.records.push_back(std::move(r));
        }
    }
    for (int i = 0; i < cfg.n_noise; ++i) {
        UtteranceRecord r;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "noise_%03d", i);
        r.id = buf;
        r.keyword = kNoiseLabel;
        r.split = split_of(i);
        ds.manifest.records.push_back(std::move(r));
    }
    std::sort(ds.manifest.keyword_inventory.begin(),
              ds.manifest.keyword_inventory.end());
    const int n_seen = cfg.n_seen < 0 ? cfg.n_keywords : cfg.n_seen;
    for (int k = 0; k < cfg.n_keywords; ++k) {
        const std::string kw = toy_keyword_name(k);
        if (k < n_seen)
            ds.manifest.seen.insert(kw);
        else
            ds.manifest.unseen.insert(kw);
    }
    return ds;
}

// ─── Augmentation ────────────────────────────────────────────────────────────

struct AugmentationConfig {
    bool enabled = true;
    double snr_db_min = 5.0;
    double snr_db_max = 25.0;
    bool apply_rir = true;
    bool apply_noise = true;
    int rir_length = 8;
    double rir_decay_min = 0.5; // time constant in frames
    double rir_decay_max = 2.5;
    int expansion_factor = 4;

    void validate() const {
        if (snr_db_min > snr_db_max)
            throw ConfigError("augmentation: snr range is degenerate");
        if (expansion_factor < 1)
            throw ConfigError("augmentation: expansion_factor must be >= 1");
        if (rir_length < 1 || rir_decay_min <= 0.0 ||
            rir_decay_min > rir_decay_max)
            throw ConfigError("augmentation: invalid reverb kernel settings");
    }
};

namespace detail {

inline double feature_power(const Mat& m) {
    return m.array().square().mean();
}

// Crop or cyclically tile a noise sheet to t columns.
inline Mat fit_noise(const Mat& n, Eigen::Index t, Rng& rng) {
    Mat out(n.rows(), t);
    const auto offset = static_cast<Eigen::Index>(rng.index(
        static_cast<std::uint64_t>(std::max<Eigen::Index>(1, n.cols()))));
    for (Eigen::Index f = 0; f < t; ++f) out.col(f) = n.col((offset + f) % n.cols());
    return out;
}

} // namespace detail

// Additive noise at a drawn SNR (power measured on the feature values) with
// an optional causal exponential-decay reverb kernel applied first. The
// noise pool holds pre-loaded noise sheets; it must be non-empty whenever
// noise is requested.
inline MelFeatureSequence augment(const MelFeatureSequence& x,
                                  const AugmentationConfig& cfg, Rng& rng,
                                  const std::vector<Mat>* noise_pool = nullptr) {
    cfg.validate();
    if (!cfg.enabled) return x;
    Mat out = x.frames;

    if (cfg.apply_rir) {
        const double tau = rng.uniform(cfg.rir_decay_min, cfg.rir_decay_max);
        Vec kernel(cfg.rir_length);
        for (int j = 0; j < cfg.rir_length; ++j)
            kernel(j) = std::exp(-static_cast<double>(j) / tau);
        kernel /= kernel.norm();
        Mat rev = Mat::Zero(out.rows(), out.cols());
        for (Eigen::Index f = 0; f < out.cols(); ++f)
            for (int j = 0; j <= std::min<Eigen::Index>(f, cfg.rir_length - 1); ++j)
                rev.col(f) += kernel(j) * out.col(f - j);
        out = std::move(rev);
    }

    if (cfg.apply_noise) {
        if (!noise_pool || noise_pool->empty())
            throw ConfigError("augmentation: noise requested but the noise pool is empty");
        const double snr_db = rng.uniform(cfg.snr_db_min, cfg.snr_db_max);
        const Mat& src = (*noise_pool)[rng.index(noise_pool->size())];
        Mat noise = detail::fit_noise(src, out.cols(), rng);
        const double p_sig = detail::feature_power(out);
        const double p_noise = std::max(detail::feature_power(noise), 1e-12);
        const double beta =
            std::sqrt(p_sig / (p_noise * std::pow(10.0, snr_db / 10.0)));
        out += beta * noise;
    }
    return {out};
}

// Deterministic augmented copies of an eval record: copy 0 is the original,
// copies 1..E-1 are augmented draws keyed by (seed, record id, copy index).
inline std::vector<MelFeatureSequence>
expanded_features(const FeatureProvider& provider, const UtteranceRecord& rec,
                  const AugmentationConfig& cfg, std::uint64_t seed,
                  const std::vector<Mat>* noise_pool) {
    std::vector<MelFeatureSequence> out;
    const MelFeatureSequence base = provider.load(rec);
    out.push_back(base);
    for (int c = 1; c < cfg.expansion_factor; ++c) {
        Rng rng = Rng::derive(seed, "expand:" + rec.id, static_cast<std::uint64_t>(c));
        out.push_back(augment(base, cfg, rng, noise_pool));
    }
    return out;
}

// ─── Few-shot sampling ───────────────────────────────────────────────────────

struct FewShotTask {
    std::string keyword;
    int shots = 0;
    std::uint64_t sampling_seed = 0;
    std::vector<std::string> positive_ids; // drawn from the train split only
};

inline FewShotTask sample_few_shot(const DatasetManifest& manifest,
                                   const std::string& keyword, int shots,
                                   std::uint64_t sampling_seed) {
    if (std::find(manifest.keyword_inventory.begin(),
                  manifest.keyword_inventory.end(),
                  keyword) == manifest.keyword_inventory.end())
        throw DataError("few-shot sampling: unknown keyword '" + keyword + "'");
    auto pool = manifest.select(keyword, "train");
    if (static_cast<int>(pool.size()) < shots)
        throw DataError("few-shot sampling: keyword '" + keyword + "' has only " +
                        std::to_string(pool.size()) + " train utterances, need " +
                        std::to_string(shots));
    std::vector<std::string> ids;
    ids.reserve(pool.size());
    for (const auto* r : pool) ids.push_back(r->id);
    Rng rng = Rng::derive(sampling_seed, "fewshot:" + keyword);
    std::shuffle(ids.begin(), ids.end(), rng.engine());
    ids.resize(static_cast<std::size_t>(shots));
    std::sort(ids.begin(), ids.end());
    FewShotTask task;
    task.keyword = keyword;
    task.shots = shots;
    task.sampling_seed = sampling_seed;
    task.positive_ids = std::move(ids);
    return task;
}

// ─── GSC-style folder loader ────────────────────────────────────────────────
// Layout: <root>/<keyword>/<clip>, <root>/_background_noise_/<clip>, plus the
// official split lists validation_list.txt / testing_list.txt with lines of
// the form "keyword/clip". Everything not listed is train.

inline DatasetManifest load_manifest(const std::string& root) {
    namespace fs = std::filesystem;
    const fs::path base(root);
    if (!fs::is_directory(base))
        throw DataError("load_manifest: '" + root + "' is not a directory");

    std::vector<std::string> missing;
    for (const char* name : {"validation_list.txt", "testing_list.txt"})
        if (!fs::exists(base / name)) missing.push_back(name);
    if (!missing.empty()) {
        std::string msg = "load_manifest: missing split lists:";
        for (const auto& m : missing) msg += " " + m;
        throw DataError(msg);
    }

    auto read_list = [&](const char* name) {
        std::set<std::string> out;
        std::ifstream in(base / name);
        std::string line;
        while (std::getline(in, line)) {
            while (!line.empty() && (line.back() == '\r' || line.back() == '\n' ||
                                     line.back() == ' '))
                line.pop_back();
            if (!line.empty()) out.insert(line);
        }
        return out;
    };
    const auto valid_list = read_list("validation_list.txt");
    const auto test_list = read_list("testing_list.txt");
    for (const auto& id : valid_list)
        if (test_list.count(id))
            throw DataError("load_manifest: '" + id +
                            "' appears in both validation and testing lists");

    DatasetManifest m;
    std::vector<fs::path> keyword_dirs;
    for (const auto& entry : fs::directory_iterator(base))
        if (entry.is_directory()) keyword_dirs.push_back(entry.path());
    std::sort(keyword_dirs.begin(), keyword_dirs.end());

    for (const auto& dir : keyword_dirs) {
        const std::string kw = dir.filename().string();
        const bool is_noise_dir = kw == "_background_noise_";
        if (!is_noise_dir) m.keyword_inventory.push_back(kw);
        std::vector<fs::path> files;
        for (const auto& f : fs::directory_iterator(dir))
            if (f.is_regular_file()) files.push_back(f.path());
        std::sort(files.begin(), files.end());
        if (files.empty() && !is_noise_dir) {
            m.warnings.push_back("keyword folder '" + kw + "' is empty");
            continue;
        }
        for (const auto& f : files) {
            UtteranceRecord r;
            r.id = kw + "/" + f.filename().string();
            r.keyword = is_noise_dir ? kNoiseLabel : kw;
            r.path = f.string();
            if (valid_list.count(r.id))
                r.split = "valid";
            else if (test_list.count(r.id))
                r.split = "test";
            else
                r.split = "train";
            m.records.push_back(std::move(r));
        }
    }

    // Seen/unseen partition: an optional seen_keywords.txt wins; otherwise
    // the GSC-35 partition applies when it matches, else everything is seen.
    static const std::set<std::string> gsc_seen = {
        "backward", "follow", "forward", "happy", "house",
        "one",      "seven",  "sheila",  "visual", "zero"};
    std::set<std::string> seen;
    if (fs::exists(base / "seen_keywords.txt")) {
        std::ifstream in(base / "seen_keywords.txt");
        std::string line;
        while (std::getline(in, line)) {
            while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
                line.pop_back();
            if (!line.empty()) seen.insert(line);
        }
    } else {
        bool all_gsc_seen_present = true;
        for (const auto& kw : gsc_seen)
            if (std::find(m.keyword_inventory.begin(), m.keyword_inventory.end(),
                          kw) == m.keyword_inventory.end())
                all_gsc_seen_present = false;
        if (m.keyword_inventory.size() == 35 && all_gsc_seen_present)
            seen = gsc_seen;
    }
    for (const auto& kw : m.keyword_inventory) {
        if (seen.empty() || seen.count(kw))
            m.seen.insert(kw);
        else
            m.unseen.insert(kw);
    }
    return m;
}

// ─── Feature files ───────────────────────────────────────────────────────────
// Simple binary container for a single feature matrix: magic, rows, cols,
// little-endian doubles in column-major order.

inline void save_feature_file(const std::string& path, const Mat& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write feature file '" + path + "'");
    const char magic[8] = {'T', 'A', 'A', 'F', 'E', 'A', '1', '\0'};
    out.write(magic, 8);
    const std::uint32_t rows = static_cast<std::uint32_t>(m.rows());
    const std::uint32_t cols = static_cast<std::uint32_t>(m.cols());
    out.write(reinterpret_cast<const char*>(&rows), 4);
    out.write(reinterpret_cast<const char*>(&cols), 4);
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(double)) * m.size());
}

inline Mat load_feature_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open feature file '" + path + "'");
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 7) != "TAAFEA1")
        throw DataError("'" + path + "' is not a feature file");
    std::uint32_t rows = 0, cols = 0;
    in.read(reinterpret_cast<char*>(&rows), 4);
    in.read(reinterpret_cast<char*>(&cols), 4);
    Mat m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double)) * m.size());
    if (!in) throw DataError("feature file '" + path + "' is truncated");
    return m;
}

class FileFeatureProvider : public FeatureProvider {
  public:
    MelFeatureSequence load(const UtteranceRecord& rec) const override {
        if (rec.path.empty())
            throw DataError("record '" + rec.id + "' has no feature path");
        return {load_feature_file(rec.path)};
    }
};

} // namespace taa
