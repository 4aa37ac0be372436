#pragma once

// Shared error taxonomy, layer-group/kind tags and small helpers used
// across the library.

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace taa {

using Mat = Eigen::MatrixXd; // column-major, double precision throughout
using Vec = Eigen::VectorXd;

// A batch of channel-major feature sequences. Each item is C x T_i; items
// may differ in T (ragged batch).
struct BatchSeq {
    std::vector<Mat> items;

    std::size_t size() const { return items.size(); }
    Eigen::Index total_frames() const {
        Eigen::Index n = 0;
        for (const auto& m : items) n += m.cols();
        return n;
    }
};

// ─── Errors ──────────────────────────────────────────────────────────────────
// The CLI maps these onto distinct exit codes (config=2, data=3, runtime=4).

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct SnapshotError : std::runtime_error {
    explicit SnapshotError(const std::string& msg) : std::runtime_error(msg) {}
};

struct MetricError : std::runtime_error {
    explicit MetricError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

struct MissingConditioningError : std::runtime_error {
    explicit MissingConditioningError(const std::string& msg)
        : std::runtime_error(msg) {}
};

// ─── Layer groups ────────────────────────────────────────────────────────────
// G0 stem, G1-G3 the three SE-Res2Blocks, G4 post-concat dense conv,
// G5 attentive statistics pooling, G6 final FC + BN.

enum class LayerGroupId : int { G0 = 0, G1, G2, G3, G4, G5, G6 };

inline constexpr std::array<LayerGroupId, 7> kAllGroups = {
    LayerGroupId::G0, LayerGroupId::G1, LayerGroupId::G2, LayerGroupId::G3,
    LayerGroupId::G4, LayerGroupId::G5, LayerGroupId::G6};

inline std::string to_string(LayerGroupId g) {
    return "G" + std::to_string(static_cast<int>(g));
}

inline LayerGroupId group_from_string(std::string_view s) {
    for (LayerGroupId g : kAllGroups)
        if (s == to_string(g)) return g;
    throw ConfigError("unknown layer group: '" + std::string(s) + "'");
}

enum class ParamKind : int { CONV = 0, BN, SE, FC, ATTN, LAF };

inline std::string to_string(ParamKind k) {
    switch (k) {
        case ParamKind::CONV: return "CONV";
        case ParamKind::BN: return "BN";
        case ParamKind::SE: return "SE";
        case ParamKind::FC: return "FC";
        case ParamKind::ATTN: return "ATTN";
        case ParamKind::LAF: return "LAF";
    }
    return "?";
}

// ─── Small numeric helpers ───────────────────────────────────────────────────

inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline double sigmoid(double x) {
    if (x >= 0.0) {
        const double z = std::exp(-x);
        return 1.0 / (1.0 + z);
    }
    const double z = std::exp(x);
    return z / (1.0 + z);
}

// log(1 + e^x) without overflow for large |x|.
inline double softplus(double x) {
    if (x > 30.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

// FNV-1a over raw bytes; used for snapshot/checkpoint integrity checks.
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t seed = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace taa
