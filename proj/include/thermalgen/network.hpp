#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "thermalgen/checkpoint.hpp"
#include "thermalgen/interpolant.hpp"
#include "thermalgen/ops.hpp"
#include "thermalgen/optim.hpp"
#include "thermalgen/random.hpp"
#include "thermalgen/style.hpp"

namespace thermalgen {

enum class Conditioning { concat, cross_attn };

inline Conditioning conditioning_by_name(const std::string& name) {
    if (name == "concat") return Conditioning::concat;
    if (name == "cross_attn") return Conditioning::cross_attn;
    throw ConfigError("unknown conditioning '" + name + "' (expected concat or cross_attn)");
}

inline std::string conditioning_name(Conditioning c) { return c == Conditioning::concat ? "concat" : "cross_attn"; }

struct ModelConfig {
    std::size_t latent_h = 16;
    std::size_t latent_w = 16;
    std::size_t latent_channels = 4;
    std::size_t rgb_channels = 4;
    std::size_t patch_size = 2;
    std::size_t width = 128;
    std::size_t depth = 4;
    std::size_t heads = 4;
    Conditioning conditioning = Conditioning::concat;
    std::size_t style_dim = 64;
    std::size_t mlp_ratio = 4;
    std::size_t time_embed_dim = 256;

    std::size_t grid_h() const { return latent_h / patch_size; }
    std::size_t grid_w() const { return latent_w / patch_size; }
    std::size_t tokens() const { return grid_h() * grid_w(); }

    void validate() const {
        if (!latent_h || !latent_w || !latent_channels || !rgb_channels || !width || !depth || !heads || !style_dim ||
            !mlp_ratio || !time_embed_dim) {
            throw ConfigError("model config sizes must all be positive");
        }
        if (patch_size != 2 && patch_size != 4 && patch_size != 8) throw ConfigError("patch_size must be 2, 4 or 8");
        if (latent_h % patch_size || latent_w % patch_size) {
            throw ConfigError("latent_h and latent_w must be divisible by patch_size");
        }
        if (width % heads) throw ConfigError("width must be divisible by heads");
        if (width % 4) throw ConfigError("width must be divisible by 4 for 2-D positional embeddings");
        if (time_embed_dim % 2) throw ConfigError("time_embed_dim must be even");
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"latent_h", c.latent_h},         {"latent_w", c.latent_w},   {"latent_channels", c.latent_channels},
         {"rgb_channels", c.rgb_channels}, {"patch_size", c.patch_size}, {"width", c.width},
         {"depth", c.depth},               {"heads", c.heads},         {"conditioning", conditioning_name(c.conditioning)},
         {"style_dim", c.style_dim},       {"mlp_ratio", c.mlp_ratio}, {"time_embed_dim", c.time_embed_dim}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.latent_h = j.at("latent_h").get<std::size_t>();
    c.latent_w = j.at("latent_w").get<std::size_t>();
    c.latent_channels = j.at("latent_channels").get<std::size_t>();
    c.rgb_channels = j.at("rgb_channels").get<std::size_t>();
    c.patch_size = j.at("patch_size").get<std::size_t>();
    c.width = j.at("width").get<std::size_t>();
    c.depth = j.at("depth").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.conditioning = conditioning_by_name(j.at("conditioning").get<std::string>());
    c.style_dim = j.at("style_dim").get<std::size_t>();
    c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    c.time_embed_dim = j.at("time_embed_dim").get<std::size_t>();
}

/// Sinusoidal features [B, dim] of the flow time; t is scaled by kTimeScale so
/// that t in [0, 1] spans the frequency range.
inline constexpr double kTimeScale = 1000.0;

inline Tensor timestep_features(const std::vector<double>& ts, std::size_t dim) {
    const std::size_t half = dim / 2;
    Buffer v(ts.size() * dim);
    for (std::size_t b = 0; b < ts.size(); ++b) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            const double arg = ts[b] * kTimeScale * freq;
            v[b * dim + i] = std::cos(arg);
            v[b * dim + half + i] = std::sin(arg);
        }
    }
    return Tensor({ts.size(), dim}, std::move(v));
}

/// Fixed 2-D sin-cos positional table [gh * gw, width]: first half encodes the
/// column, second half the row.
inline Tensor positional_embedding_2d(std::size_t gh, std::size_t gw, std::size_t width) {
    const std::size_t half = width / 2;
    const std::size_t quarter = half / 2;
    Buffer v(gh * gw * width);
    for (std::size_t y = 0; y < gh; ++y) {
        for (std::size_t x = 0; x < gw; ++x) {
            double* row = v.data() + (y * gw + x) * width;
            for (std::size_t i = 0; i < quarter; ++i) {
                const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(quarter));
                row[i] = std::sin(static_cast<double>(x) * omega);
                row[quarter + i] = std::cos(static_cast<double>(x) * omega);
                row[half + i] = std::sin(static_cast<double>(y) * omega);
                row[half + quarter + i] = std::cos(static_cast<double>(y) * omega);
            }
        }
    }
    return Tensor({gh * gw, width}, std::move(v));
}

struct LinearParams {
    Tensor w;
    Tensor b;

    static LinearParams xavier(std::size_t in, std::size_t out, Rng& rng) {
        return {xavier_uniform({in, out}, rng), zeros_param({out})};
    }
    static LinearParams normal(std::size_t in, std::size_t out, Rng& rng, double stddev) {
        return {normal_param({in, out}, rng, stddev), zeros_param({out})};
    }
    static LinearParams zero(std::size_t in, std::size_t out) { return {zeros_param({in, out}), zeros_param({out})}; }

    Tensor operator()(const Tensor& x) const { return linear(x, w, b); }

    void collect(const std::string& prefix, ParameterList& out) const {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

/// One SiT block. The adaLN head emits shift/scale/gate triplets in the order
/// (self-attention, MLP[, cross-attention]).
struct SitBlock {
    LinearParams ada;
    LinearParams qkv;
    LinearParams proj;
    std::optional<LinearParams> cross_q;
    std::optional<LinearParams> cross_kv;
    std::optional<LinearParams> cross_proj;
    LinearParams fc1;
    LinearParams fc2;

    bool has_cross() const { return cross_q.has_value(); }
    std::size_t sublayers() const { return has_cross() ? 3 : 2; }

    static SitBlock init(std::size_t width, std::size_t mlp_ratio, bool cross, Rng& rng) {
        SitBlock blk;
        blk.ada = LinearParams::zero(width, (cross ? 9 : 6) * width);
        blk.qkv = LinearParams::xavier(width, 3 * width, rng);
        blk.proj = LinearParams::xavier(width, width, rng);
        if (cross) {
            blk.cross_q = LinearParams::xavier(width, width, rng);
            blk.cross_kv = LinearParams::xavier(width, 2 * width, rng);
            blk.cross_proj = LinearParams::xavier(width, width, rng);
        }
        blk.fc1 = LinearParams::xavier(width, mlp_ratio * width, rng);
        blk.fc2 = LinearParams::xavier(mlp_ratio * width, width, rng);
        return blk;
    }

    void collect(const std::string& prefix, ParameterList& out) const {
        ada.collect(prefix + ".ada", out);
        qkv.collect(prefix + ".attn.qkv", out);
        proj.collect(prefix + ".attn.proj", out);
        if (has_cross()) {
            cross_q->collect(prefix + ".cross.q", out);
            cross_kv->collect(prefix + ".cross.kv", out);
            cross_proj->collect(prefix + ".cross.proj", out);
        }
        fc1.collect(prefix + ".mlp.fc1", out);
        fc2.collect(prefix + ".mlp.fc2", out);
    }
};

namespace detail {
/// Chunk j of width w from [B, k*w] as [B, 1, w] for token broadcasting.
inline Tensor mod_chunk(const Tensor& mod, std::size_t j, std::size_t w) {
    return reshape(slice(mod, 1, j * w, w), {mod.dim(0), 1, w});
}
inline Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale_) {
    return add(mul(x, add_scalar(scale_, 1.0)), shift);
}
}  // namespace detail

/// Applies one block to thermal tokens x [B, N, W] under the activated
/// condition silu(c) [B, W]. `rgb_tokens` must be given exactly when the block
/// carries a cross-attention sublayer.
inline Tensor sit_block(const SitBlock& blk, const Tensor& x, const Tensor& c_act, const Tensor* rgb_tokens,
                        std::size_t heads) {
    if (blk.has_cross() != (rgb_tokens != nullptr)) {
        throw ContractError(blk.has_cross() ? "cross-attention block requires RGB tokens"
                                            : "RGB tokens passed to a block without cross-attention");
    }
    const std::size_t w = x.dim(2);
    if (blk.qkv.w.dim(0) != w) throw DimensionError("token width does not match block width");
    const Tensor mod = blk.ada(c_act);

    Tensor h = detail::modulate(layernorm(x), detail::mod_chunk(mod, 0, w), detail::mod_chunk(mod, 1, w));
    const Tensor qkv = blk.qkv(h);
    const Tensor att = attention(slice(qkv, 2, 0, w), slice(qkv, 2, w, w), slice(qkv, 2, 2 * w, w), heads);
    Tensor out = add(x, mul(detail::mod_chunk(mod, 2, w), blk.proj(att)));

    if (blk.has_cross()) {
        // RGB tokens query the modulated thermal stream; the attended features
        // are gated back onto the thermal tokens.
        const Tensor kv_in = detail::modulate(layernorm(out), detail::mod_chunk(mod, 6, w), detail::mod_chunk(mod, 7, w));
        const Tensor q = (*blk.cross_q)(layernorm(*rgb_tokens));
        const Tensor kv = (*blk.cross_kv)(kv_in);
        const Tensor ca = attention(q, slice(kv, 2, 0, w), slice(kv, 2, w, w), heads);
        out = add(out, mul(detail::mod_chunk(mod, 8, w), (*blk.cross_proj)(ca)));
    }

    h = detail::modulate(layernorm(out), detail::mod_chunk(mod, 3, w), detail::mod_chunk(mod, 4, w));
    const Tensor mlp = blk.fc2(silu(blk.fc1(h)));
    return add(out, mul(detail::mod_chunk(mod, 5, w), mlp));
}

/// Velocity model v(z_t, t, z_rgb, y): SiT-style transformer with adaLN-Zero
/// conditioning on (t, style) and RGB conditioning by channel concatenation or
/// cross-attention. Owns the style bank.
class VelocityModel {
public:
    VelocityModel(ModelConfig cfg, const std::vector<std::string>& style_ids, Rng& rng, double dropout_prob = 0.1)
        : cfg_(cfg), styles_(cfg.style_dim, dropout_prob, rng) {
        cfg_.validate();
        const std::size_t w = cfg_.width;
        const std::size_t p2 = cfg_.patch_size * cfg_.patch_size;
        const bool cross = cfg_.conditioning == Conditioning::cross_attn;
        const std::size_t in_ch = cross ? cfg_.latent_channels : cfg_.latent_channels + cfg_.rgb_channels;
        x_embed_ = LinearParams::xavier(p2 * in_ch, w, rng);
        if (cross) rgb_embed_ = LinearParams::xavier(p2 * cfg_.rgb_channels, w, rng);
        t_mlp1_ = LinearParams::normal(cfg_.time_embed_dim, w, rng, 0.02);
        t_mlp2_ = LinearParams::normal(w, w, rng, 0.02);
        y_proj_ = LinearParams::xavier(cfg_.style_dim, w, rng);
        for (std::size_t i = 0; i < cfg_.depth; ++i) blocks_.push_back(SitBlock::init(w, cfg_.mlp_ratio, cross, rng));
        final_ada_ = LinearParams::zero(w, 2 * w);
        final_proj_ = LinearParams::zero(w, p2 * cfg_.latent_channels);
        pos_embed_ = positional_embedding_2d(cfg_.grid_h(), cfg_.grid_w(), w);
        for (const auto& id : style_ids) styles_.extend(id, StyleInit::gaussian, rng);
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    StyleBank& styles() noexcept { return styles_; }
    const StyleBank& styles() const noexcept { return styles_; }
    Tensor style_embedding(const std::string& id) const { return styles_.lookup(id); }
    std::vector<SitBlock>& blocks() noexcept { return blocks_; }
    const std::vector<SitBlock>& blocks() const noexcept { return blocks_; }
    const Tensor& positional_embedding() const noexcept { return pos_embed_; }

    /// c_{y,t} = MLP(sinusoid(t)) + W_y y, shape [B, width].
    Tensor condition_embed(const std::vector<double>& ts, const Tensor& y) const {
        if (y.rank() != 2 || y.dim(1) != cfg_.style_dim || y.dim(0) != ts.size()) {
            throw DimensionError("style embeddings must be [B, " + std::to_string(cfg_.style_dim) + "], got " +
                                 shape_str(y.shape()));
        }
        for (double t : ts) detail::check_time(t);
        const Tensor te = t_mlp2_(silu(t_mlp1_(timestep_features(ts, cfg_.time_embed_dim))));
        return add(te, y_proj_(y));
    }

    /// Token embedding of the thermal stream (with RGB channels concatenated in
    /// concat mode) and, in cross-attention mode, of the RGB stream.
    std::pair<Tensor, Tensor> embed_tokens(const Tensor& z_t, const Tensor& z_rgb) const {
        check_latent(z_t, cfg_.latent_channels, "z_t");
        check_latent(z_rgb, cfg_.rgb_channels, "z_rgb");
        if (z_t.dim(0) != z_rgb.dim(0)) throw DimensionError("z_t and z_rgb batch sizes differ");
        const std::size_t p = cfg_.patch_size;
        if (cfg_.conditioning == Conditioning::concat) {
            const Tensor joint = concat({z_t, z_rgb}, 3);
            return {add(x_embed_(patchify(joint, p)), pos_embed_), Tensor()};
        }
        return {add(x_embed_(patchify(z_t, p)), pos_embed_), add((*rgb_embed_)(patchify(z_rgb, p)), pos_embed_)};
    }

    Tensor forward(const Tensor& z_t, const std::vector<double>& ts, const Tensor& z_rgb, const Tensor& y) const {
        if (ts.size() != z_t.dim(0)) throw DimensionError("one time value per batch item required");
        auto [x, r] = embed_tokens(z_t, z_rgb);
        const Tensor c_act = silu(condition_embed(ts, y));
        for (const auto& blk : blocks_) x = sit_block(blk, x, c_act, r.defined() ? &r : nullptr, cfg_.heads);
        const Tensor mod = final_ada_(c_act);
        const std::size_t w = cfg_.width;
        x = detail::modulate(layernorm(x), detail::mod_chunk(mod, 0, w), detail::mod_chunk(mod, 1, w));
        return unpatchify(final_proj_(x), cfg_.latent_h, cfg_.latent_w, cfg_.patch_size);
    }

    /// Network weights without the style bank.
    ParameterList network_parameters() const {
        ParameterList out;
        x_embed_.collect("x_embed", out);
        if (rgb_embed_) rgb_embed_->collect("rgb_embed", out);
        t_mlp1_.collect("t_embed.fc1", out);
        t_mlp2_.collect("t_embed.fc2", out);
        y_proj_.collect("y_proj", out);
        for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect("blocks." + std::to_string(i), out);
        final_ada_.collect("final.ada", out);
        final_proj_.collect("final.proj", out);
        return out;
    }

    ParameterList parameters() const {
        ParameterList out = network_parameters();
        for (auto& entry : styles_.parameters()) out.push_back(std::move(entry));
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : network_parameters()) n += t.numel();
        return n;
    }

    Checkpoint to_checkpoint() const {
        Checkpoint ckpt;
        ckpt.meta["kind"] = "flow";
        ckpt.meta["model_config"] = cfg_;
        ckpt.meta["styles"] = styles_.describe();
        for (const auto& [name, t] : parameters()) ckpt.tensors.emplace_back(name, t.detach());
        return ckpt;
    }

    static VelocityModel from_checkpoint(const Checkpoint& ckpt) {
        if (ckpt.meta.value("kind", "") != "flow") throw DataError("checkpoint is not a flow model");
        const auto cfg = ckpt.meta.at("model_config").get<ModelConfig>();
        const auto& st = ckpt.meta.at("styles");
        Rng rng(0);
        VelocityModel model(cfg, st.at("ids").get<std::vector<std::string>>(), rng,
                            st.at("dropout_prob").get<double>());
        auto params = model.parameters();
        load_into(ckpt, params);
        return model;
    }

    /// Registers a new style embedding after construction.
    void extend_style(const std::string& id, StyleInit init, Rng& rng) { styles_.extend(id, init, rng); }

private:
    void check_latent(const Tensor& z, std::size_t channels, const char* what) const {
        if (z.rank() != 4 || z.dim(1) != cfg_.latent_h || z.dim(2) != cfg_.latent_w || z.dim(3) != channels) {
            throw DimensionError(std::string(what) + " must be [B, " + std::to_string(cfg_.latent_h) + ", " +
                                 std::to_string(cfg_.latent_w) + ", " + std::to_string(channels) + "], got " +
                                 shape_str(z.shape()));
        }
    }

    ModelConfig cfg_;
    StyleBank styles_;
    LinearParams x_embed_;
    std::optional<LinearParams> rgb_embed_;
    LinearParams t_mlp1_;
    LinearParams t_mlp2_;
    LinearParams y_proj_;
    std::vector<SitBlock> blocks_;
    LinearParams final_ada_;
    LinearParams final_proj_;
    Tensor pos_embed_;
};

static_assert(StyledVelocityField<VelocityModel>);

}  // namespace thermalgen
