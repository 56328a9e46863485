#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "thermalgen/image.hpp"
#include "thermalgen/random.hpp"

namespace thermalgen {

enum class Split { train, val, test };

inline std::string split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

inline Split split_by_name(const std::string& name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw DataError("unknown split '" + name + "' (expected train, val or test)");
}

using Mask = Raster<std::uint8_t>;  // nonzero = set

struct ImagePair {
    Image8 rgb;      // H x W x 3
    Image8 thermal;  // H x W x 1
    std::string style_id;
    Split split = Split::train;
    std::string source;
    std::optional<Mask> valid_mask;

    void validate() const {
        if (rgb.channels != 3 || thermal.channels != 1) throw DataError("pair must be RGB + single-channel thermal");
        if (rgb.height != thermal.height || rgb.width != thermal.width) {
            throw DataError("RGB and thermal dimensions differ");
        }
    }
};

/// Co-registered satellite RGB map and aerial thermal map.
struct AlignedMapPair {
    Image8 rgb_map;
    Image16 thermal_map;
    int thermal_bits = 16;  // 8 or 16
    double meters_per_pixel = 1.0;
    Mask invalid_mask;  // empty or same size; nonzero marks no-data thermal pixels
};

// ---------------------------------------------------------------------------
// Thermal normalization

struct NormalizeMethod {
    enum class Kind { minmax, percentile } kind = Kind::percentile;
    double p_lo = 1.0;
    double p_hi = 99.0;

    static NormalizeMethod minmax() { return {Kind::minmax, 0.0, 100.0}; }
    static NormalizeMethod percentile(double lo, double hi) { return {Kind::percentile, lo, hi}; }
};

/// Linear-interpolated percentile of sorted values, p in [0, 100].
inline double percentile_sorted(const std::vector<double>& sorted, double p) {
    const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// Maps the chosen range of valid raw values linearly onto [0, 255] with
/// clipping. Invalid pixels (and every pixel of a constant raster) become 0.
inline Image8 normalize_thermal(const Image16& raw, const NormalizeMethod& method, const Mask* invalid = nullptr) {
    if (raw.channels != 1) throw DataError("thermal raster must be single-channel");
    if (invalid && !invalid->empty() && (invalid->height != raw.height || invalid->width != raw.width)) {
        throw DataError("invalid mask does not match thermal raster");
    }
    auto is_valid = [&](std::size_t i) { return !invalid || invalid->empty() || invalid->data[i] == 0; };
    std::vector<double> vals;
    vals.reserve(raw.data.size());
    for (std::size_t i = 0; i < raw.data.size(); ++i) {
        if (is_valid(i)) vals.push_back(raw.data[i]);
    }
    if (vals.empty()) throw DataError("thermal raster has no valid pixels");
    std::sort(vals.begin(), vals.end());
    double lo = vals.front(), hi = vals.back();
    if (method.kind == NormalizeMethod::Kind::percentile) {
        if (!(method.p_lo >= 0.0 && method.p_lo < method.p_hi && method.p_hi <= 100.0)) {
            throw ConfigError("percentile bounds must satisfy 0 <= lo < hi <= 100");
        }
        lo = percentile_sorted(vals, method.p_lo);
        hi = percentile_sorted(vals, method.p_hi);
    }
    Image8 out(raw.height, raw.width, 1, 0);
    if (!(hi > lo)) return out;
    for (std::size_t i = 0; i < raw.data.size(); ++i) {
        if (!is_valid(i)) continue;
        const double v = (static_cast<double>(raw.data[i]) - lo) / (hi - lo) * 255.0;
        out.data[i] = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Grid sampling of aligned maps

/// Top-left offsets of crops of size `crop` spaced `stride_px` apart along an
/// axis of `length` pixels: floor((length - crop) / stride) + 1 positions.
inline std::vector<std::size_t> grid_positions(std::size_t length, double stride_px, std::size_t crop) {
    if (!(stride_px > 0.0)) throw DomainError("grid stride must be positive");
    if (crop == 0 || crop > length) {
        throw DimensionError("crop of " + std::to_string(crop) + " px does not fit in " + std::to_string(length) + " px");
    }
    const auto count = static_cast<std::size_t>(std::floor(static_cast<double>(length - crop) / stride_px)) + 1;
    std::vector<std::size_t> out(count);
    for (std::size_t k = 0; k < count; ++k) {
        out[k] = std::min(static_cast<std::size_t>(std::floor(static_cast<double>(k) * stride_px)), length - crop);
    }
    return out;
}

struct GridSampleOptions {
    double max_invalid_fraction = 0.01;
    NormalizeMethod normalize{};
    std::string style_id;
    std::string source;
    Split split = Split::train;
};

/// Crops the maps on a regular metric grid, dropping crops whose invalid
/// fraction exceeds the threshold. 16-bit thermal maps are normalized over
/// their valid pixels first.
inline std::vector<ImagePair> grid_sample(const AlignedMapPair& maps, double stride_m, std::size_t crop_px,
                                          const GridSampleOptions& opt = {}) {
    if (!(stride_m > 0.0) || !(maps.meters_per_pixel > 0.0)) throw DomainError("stride and resolution must be positive");
    const std::size_t h = maps.rgb_map.height, w = maps.rgb_map.width;
    if (maps.rgb_map.channels != 3 || maps.thermal_map.channels != 1 || maps.thermal_map.height != h ||
        maps.thermal_map.width != w) {
        throw DimensionError("RGB and thermal maps must share dimensions");
    }
    const bool has_mask = !maps.invalid_mask.empty();
    if (has_mask && (maps.invalid_mask.height != h || maps.invalid_mask.width != w)) {
        throw DimensionError("invalid mask does not match the maps");
    }
    const double stride_px = stride_m / maps.meters_per_pixel;
    const auto ys = grid_positions(h, stride_px, crop_px);
    const auto xs = grid_positions(w, stride_px, crop_px);

    // summed-area table of invalid pixels
    std::vector<std::uint64_t> sat((h + 1) * (w + 1), 0);
    if (has_mask) {
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                sat[(y + 1) * (w + 1) + x + 1] = (maps.invalid_mask.at(y, x) ? 1 : 0) + sat[y * (w + 1) + x + 1] +
                                                 sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
    }
    auto invalid_in = [&](std::size_t y0, std::size_t x0) {
        const std::size_t y1 = y0 + crop_px, x1 = x0 + crop_px;
        return sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
    };
    const double limit = opt.max_invalid_fraction * static_cast<double>(crop_px * crop_px);
    std::vector<std::pair<std::size_t, std::size_t>> kept;
    for (std::size_t y : ys)
        for (std::size_t x : xs)
            if (static_cast<double>(invalid_in(y, x)) <= limit) kept.emplace_back(y, x);
    if (kept.empty()) return {};

    Image8 thermal8;
    if (maps.thermal_bits == 16) {
        thermal8 = normalize_thermal(maps.thermal_map, opt.normalize, has_mask ? &maps.invalid_mask : nullptr);
    } else {
        thermal8 = Image8(h, w, 1);
        for (std::size_t i = 0; i < thermal8.data.size(); ++i) {
            thermal8.data[i] = static_cast<std::uint8_t>(std::min<std::uint16_t>(maps.thermal_map.data[i], 255));
        }
    }
    std::vector<ImagePair> out;
    out.reserve(kept.size());
    for (auto [y, x] : kept) {
        ImagePair pair{maps.rgb_map.crop(y, x, crop_px, crop_px), thermal8.crop(y, x, crop_px, crop_px), opt.style_id,
                       opt.split, opt.source, std::nullopt};
        if (has_mask && invalid_in(y, x) > 0) {
            Mask valid = maps.invalid_mask.crop(y, x, crop_px, crop_px);
            for (auto& v : valid.data) v = v ? 0 : 1;
            pair.valid_mask = std::move(valid);
        }
        out.push_back(std::move(pair));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Geometric augmentation

/// Bilinear resize with half-pixel centres; a same-size resize is the identity.
inline Image8 resize_bilinear(const Image8& img, std::size_t out_h, std::size_t out_w) {
    Image8 out(out_h, out_w, img.channels);
    const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
    const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
            const double fx =
                std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < img.channels; ++c) {
                const double v = (1 - wy) * ((1 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c)) +
                                 wy * ((1 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c));
                out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
            }
        }
    }
    return out;
}

inline Mask resize_nearest(const Mask& m, std::size_t out_h, std::size_t out_w) {
    Mask out(out_h, out_w, m.channels);
    for (std::size_t y = 0; y < out_h; ++y) {
        const std::size_t sy = std::min(y * m.height / out_h, m.height - 1);
        for (std::size_t x = 0; x < out_w; ++x) {
            const std::size_t sx = std::min(x * m.width / out_w, m.width - 1);
            for (std::size_t c = 0; c < m.channels; ++c) out.at(y, x, c) = m.at(sy, sx, c);
        }
    }
    return out;
}

struct ResizeCrop {
    std::size_t resized_h = 0;
    std::size_t resized_w = 0;
    std::size_t offset_y = 0;
    std::size_t offset_x = 0;
    std::size_t out_px = 0;
};

inline constexpr double kResizeScaleMin = 1.0;
inline constexpr double kResizeScaleMax = 1.5;

/// Draws a resize of the short side to out_px * s, s ~ U[1, 1.5], and a crop offset.
inline ResizeCrop draw_resize_crop(std::size_t h, std::size_t w, std::size_t out_px, Rng& rng) {
    const std::size_t short_side = std::min(h, w);
    if (short_side < out_px) {
        throw DataError("image " + std::to_string(h) + "x" + std::to_string(w) + " smaller than crop " +
                        std::to_string(out_px));
    }
    const double s = uniform(rng, kResizeScaleMin, kResizeScaleMax);
    const double factor = static_cast<double>(out_px) * s / static_cast<double>(short_side);
    ResizeCrop rc;
    rc.out_px = out_px;
    rc.resized_h = std::max(out_px, static_cast<std::size_t>(std::lround(static_cast<double>(h) * factor)));
    rc.resized_w = std::max(out_px, static_cast<std::size_t>(std::lround(static_cast<double>(w) * factor)));
    rc.offset_y = std::uniform_int_distribution<std::size_t>(0, rc.resized_h - out_px)(rng);
    rc.offset_x = std::uniform_int_distribution<std::size_t>(0, rc.resized_w - out_px)(rng);
    return rc;
}

/// Applies one geometric transform to every raster of the pair.
inline ImagePair apply_resize_crop(const ImagePair& pair, const ResizeCrop& rc) {
    pair.validate();
    auto geom = [&](const Image8& img) {
        const Image8 resized = (img.height == rc.resized_h && img.width == rc.resized_w)
                                   ? img
                                   : resize_bilinear(img, rc.resized_h, rc.resized_w);
        return resized.crop(rc.offset_y, rc.offset_x, rc.out_px, rc.out_px);
    };
    ImagePair out{geom(pair.rgb), geom(pair.thermal), pair.style_id, pair.split, pair.source, std::nullopt};
    if (pair.valid_mask) {
        out.valid_mask =
            resize_nearest(*pair.valid_mask, rc.resized_h, rc.resized_w).crop(rc.offset_y, rc.offset_x, rc.out_px, rc.out_px);
    }
    return out;
}

inline ImagePair random_resize_crop(const ImagePair& pair, std::size_t out_px, Rng& rng) {
    pair.validate();
    return apply_resize_crop(pair, draw_resize_crop(pair.rgb.height, pair.rgb.width, out_px, rng));
}

// ---------------------------------------------------------------------------
// Synthetic paired data with a known per-style thermal oracle

inline const std::vector<std::string>& synth_styles() {
    static const std::vector<std::string> styles{"synthA", "synthB"};
    return styles;
}

/// Thermal that style `style_id` assigns to an RGB image: luminance for
/// synthA, 255 - luminance for synthB.
inline Image8 synth_oracle(const std::string& style_id, const Image8& rgb) {
    if (style_id != "synthA" && style_id != "synthB") throw LookupError("unknown synthetic style '" + style_id + "'");
    if (rgb.channels != 3) throw DataError("synthetic oracle needs an RGB image");
    Image8 t = to_gray(rgb);
    if (style_id == "synthB") {
        for (auto& v : t.data) v = static_cast<std::uint8_t>(255 - v);
    }
    return t;
}

/// Smooth random RGB field: two octaves of bilinearly interpolated random
/// lattices (4x4 and 8x8 nodes).
inline Image8 smooth_rgb_field(std::size_t size, Rng& rng) {
    auto lattice = [&](std::size_t nodes) {
        std::vector<double> v(nodes * nodes * 3);
        for (double& x : v) x = uniform(rng, 0.0, 255.0);
        return v;
    };
    const std::size_t n1 = 4, n2 = 8;
    const auto coarse = lattice(n1);
    const auto fine = lattice(n2);
    auto sample = [&](const std::vector<double>& lat, std::size_t nodes, double u, double v, std::size_t c) {
        const double fy = v * static_cast<double>(nodes - 1), fx = u * static_cast<double>(nodes - 1);
        const auto y0 = std::min(static_cast<std::size_t>(fy), nodes - 2);
        const auto x0 = std::min(static_cast<std::size_t>(fx), nodes - 2);
        const double wy = fy - static_cast<double>(y0), wx = fx - static_cast<double>(x0);
        auto at = [&](std::size_t y, std::size_t x) { return lat[(y * nodes + x) * 3 + c]; };
        return (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x0 + 1)) +
               wy * ((1 - wx) * at(y0 + 1, x0) + wx * at(y0 + 1, x0 + 1));
    };
    Image8 img(size, size, 3);
    const double denom = size > 1 ? static_cast<double>(size - 1) : 1.0;
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                const double u = static_cast<double>(x) / denom, v = static_cast<double>(y) / denom;
                const double val = 0.75 * sample(coarse, n1, u, v, c) + 0.25 * sample(fine, n2, u, v, c);
                img.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::round(val), 0.0, 255.0));
            }
    return img;
}

/// n pairs whose RGB depends only on (seed, index); the thermal follows the style oracle.
inline std::vector<ImagePair> synth_generate(const std::string& style_id, std::size_t n, std::size_t size,
                                             std::uint64_t seed, Split split = Split::train) {
    if (style_id != "synthA" && style_id != "synthB") throw LookupError("unknown synthetic style '" + style_id + "'");
    if (n == 0) throw DomainError("synth_generate needs n > 0");
    if (size < 2) throw DomainError("synthetic images need size >= 2");
    std::vector<ImagePair> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng = derive_rng(seed, i);
        Image8 rgb = smooth_rgb_field(size, rng);
        Image8 thermal = synth_oracle(style_id, rgb);
        out.push_back({std::move(rgb), std::move(thermal), style_id, split, style_id, std::nullopt});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Manifests (JSON Lines) and batching

struct ManifestRecord {
    std::string rgb_path;
    std::string thermal_path;
    std::string style_id;
    Split split = Split::train;
    std::string source;
};

struct Manifest {
    std::filesystem::path base_dir;  // relative paths resolve against this
    std::vector<ManifestRecord> records;

    std::filesystem::path resolve(const std::string& p) const {
        const std::filesystem::path path(p);
        return path.is_absolute() ? path : base_dir / path;
    }
};

inline nlohmann::json manifest_record_json(const ManifestRecord& r) {
    return {{"rgb_path", r.rgb_path},
            {"thermal_path", r.thermal_path},
            {"style_id", r.style_id},
            {"split", split_name(r.split)},
            {"source", r.source}};
}

inline Manifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    static const std::set<std::string> fields{"rgb_path", "thermal_path", "style_id", "split", "source"};
    Manifest m;
    m.base_dir = path.parent_path();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(where + ": " + e.what());
        }
        if (!j.is_object()) throw DataError(where + ": record must be a JSON object");
        for (const auto& [key, value] : j.items()) {
            if (!fields.count(key)) throw DataError(where + ": unknown field '" + key + "'");
            if (!value.is_string()) throw DataError(where + ": field '" + key + "' must be a string");
        }
        for (const auto& f : fields) {
            if (!j.contains(f)) throw DataError(where + ": missing field '" + f + "'");
        }
        Split split;
        try {
            split = split_by_name(j["split"]);
        } catch (const DataError& e) {
            throw DataError(where + ": " + e.what());
        }
        m.records.push_back({j["rgb_path"], j["thermal_path"], j["style_id"], split, j["source"]});
    }
    return m;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest " + path.string());
    for (const auto& r : records) out << manifest_record_json(r).dump() << '\n';
}

inline ImagePair load_pair(const Manifest& m, const ManifestRecord& r) {
    ImagePair pair;
    pair.rgb = read_png8(m.resolve(r.rgb_path));
    pair.thermal = to_gray(read_png8(m.resolve(r.thermal_path)));
    if (pair.rgb.channels == 1) throw DataError("expected an RGB image: " + m.resolve(r.rgb_path).string());
    pair.style_id = r.style_id;
    pair.split = r.split;
    pair.source = r.source;
    pair.validate();
    return pair;
}

/// Checks that every referenced file exists and decodes as a valid pair and,
/// when `known_styles` is non-empty, that every style id is registered.
inline void validate_manifest(const Manifest& m, const std::vector<std::string>& known_styles = {}) {
    for (const auto& r : m.records) {
        for (const auto& p : {r.rgb_path, r.thermal_path}) {
            if (!std::filesystem::exists(m.resolve(p))) throw IoError("missing file " + m.resolve(p).string());
        }
        if (!known_styles.empty() &&
            std::find(known_styles.begin(), known_styles.end(), r.style_id) == known_styles.end()) {
            throw DataError("manifest style '" + r.style_id + "' is not registered");
        }
        load_pair(m, r);
    }
}

/// Endless stream of index batches: per-epoch seeded shuffles of [0, n),
/// concatenated, cut into batches.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::size_t batch_size, Rng rng) : n_(n), batch_(batch_size), rng_(std::move(rng)) {
        if (n == 0) throw DataError("cannot batch an empty dataset");
        if (batch_size == 0) throw ConfigError("batch size must be positive");
    }

    std::vector<std::size_t> next() {
        std::vector<std::size_t> out;
        out.reserve(batch_);
        while (out.size() < batch_) {
            if (cursor_ == order_.size()) {
                order_.resize(n_);
                std::iota(order_.begin(), order_.end(), std::size_t{0});
                std::shuffle(order_.begin(), order_.end(), rng_);
                cursor_ = 0;
            }
            out.push_back(order_[cursor_++]);
        }
        return out;
    }

private:
    std::size_t n_;
    std::size_t batch_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

/// Seeded shuffled batches of one split, mixing all sources, decoded lazily.
class BatchStream {
public:
    BatchStream(Manifest manifest, Split split, std::size_t batch_size, Rng rng)
        : manifest_(std::move(manifest)), sampler_(init(split), batch_size, std::move(rng)) {}

    std::vector<ImagePair> next() {
        std::vector<ImagePair> out;
        for (std::size_t i : sampler_.next()) out.push_back(load_pair(manifest_, manifest_.records[indices_[i]]));
        return out;
    }

    std::size_t size() const noexcept { return indices_.size(); }

private:
    std::size_t init(Split split) {
        for (std::size_t i = 0; i < manifest_.records.size(); ++i) {
            if (manifest_.records[i].split == split) indices_.push_back(i);
        }
        if (indices_.empty()) throw DataError("manifest has no records in split " + split_name(split));
        return indices_.size();
    }

    Manifest manifest_;
    std::vector<std::size_t> indices_;
    BatchSampler sampler_;
};

inline BatchStream load_split(const Manifest& manifest, Split split, std::size_t batch_size, Rng rng) {
    return BatchStream(manifest, split, batch_size, std::move(rng));
}

/// Eagerly decodes every record of a split.
inline std::vector<ImagePair> load_pairs(const Manifest& m, Split split) {
    std::vector<ImagePair> out;
    for (const auto& r : m.records) {
        if (r.split == split) out.push_back(load_pair(m, r));
    }
    return out;
}

/// Writes pairs as PNGs under `dir` (rgb/, thermal/) and returns manifest
/// records with paths relative to `dir`.
inline std::vector<ManifestRecord> write_pairs(const std::filesystem::path& dir, const std::vector<ImagePair>& pairs,
                                               const std::string& prefix) {
    std::vector<ManifestRecord> records;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        std::ostringstream name;
        name << prefix << '_' << std::setw(6) << std::setfill('0') << i << ".png";
        const std::string rgb = "rgb/" + name.str();
        const std::string thermal = "thermal/" + name.str();
        write_png(dir / rgb, pairs[i].rgb);
        write_png(dir / thermal, pairs[i].thermal);
        records.push_back({rgb, thermal, pairs[i].style_id, pairs[i].split, pairs[i].source});
    }
    return records;
}

}  // namespace thermalgen
