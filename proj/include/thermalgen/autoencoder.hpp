#pragma once

#include <bit>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "thermalgen/checkpoint.hpp"
#include "thermalgen/ops.hpp"
#include "thermalgen/optim.hpp"
#include "thermalgen/random.hpp"

namespace thermalgen {

struct AutoencoderConfig {
    std::size_t downsample_factor = 4;
    std::size_t latent_channels = 4;
    std::size_t channels_in = 1;
    double kl_weight = 1e-6;
    /// Channel width at full resolution and after each 2x downsampling;
    /// log2(downsample_factor) + 1 entries.
    std::vector<std::size_t> hidden_widths{8, 16, 32};

    std::size_t stages() const { return static_cast<std::size_t>(std::countr_zero(downsample_factor)); }

    void validate() const {
        if (downsample_factor == 0 || !std::has_single_bit(downsample_factor)) {
            throw ConfigError("downsample_factor must be a power of two");
        }
        if (latent_channels == 0) throw ConfigError("latent_channels must be positive");
        if (channels_in != 1 && channels_in != 3) throw ConfigError("channels_in must be 1 or 3");
        if (!(kl_weight >= 0.0)) throw ConfigError("kl_weight must be non-negative");
        if (hidden_widths.size() != stages() + 1) {
            throw ConfigError("hidden_widths needs log2(downsample_factor) + 1 entries");
        }
        for (auto w : hidden_widths) {
            if (w == 0) throw ConfigError("hidden widths must be positive");
        }
    }
};

inline void to_json(nlohmann::json& j, const AutoencoderConfig& c) {
    j = {{"downsample_factor", c.downsample_factor},
         {"latent_channels", c.latent_channels},
         {"channels_in", c.channels_in},
         {"kl_weight", c.kl_weight},
         {"hidden_widths", c.hidden_widths}};
}

inline void from_json(const nlohmann::json& j, AutoencoderConfig& c) {
    c.downsample_factor = j.at("downsample_factor").get<std::size_t>();
    c.latent_channels = j.at("latent_channels").get<std::size_t>();
    c.channels_in = j.at("channels_in").get<std::size_t>();
    c.kl_weight = j.at("kl_weight").get<double>();
    c.hidden_widths = j.at("hidden_widths").get<std::vector<std::size_t>>();
}

inline constexpr double kLogVarMin = -30.0;
inline constexpr double kLogVarMax = 20.0;
// initial log-variance bias of the moment head
inline constexpr double kInitLogVar = -6.0;

struct LatentDistribution {
    Tensor mean;
    Tensor logvar;  // clamped to [kLogVarMin, kLogVarMax]
};

/// Reparameterized draw mean + exp(logvar / 2) * eps.
inline Tensor sample_latent(const LatentDistribution& d, Rng& rng) {
    const Tensor eps = randn(d.mean.shape(), rng);
    return add(d.mean, mul(exp(scale(d.logvar, 0.5)), eps));
}

/// Per-element KL(N(mean, exp(logvar)) || N(0, 1)), averaged over elements.
inline Tensor kl_divergence(const LatentDistribution& d) {
    // 0.5 * (mu^2 + var - 1 - logvar)
    const Tensor terms = sub(add(square(d.mean), exp(d.logvar)), add_scalar(d.logvar, 1.0));
    return scale(mean(terms), 0.5);
}

/// Mean absolute reconstruction error plus kl_weight times the mean KL term.
inline Tensor vae_loss(const Tensor& x, const Tensor& recon, const LatentDistribution& d, double kl_weight) {
    if (x.shape() != recon.shape()) {
        throw DimensionError("vae_loss: " + shape_str(x.shape()) + " vs " + shape_str(recon.shape()));
    }
    const Tensor l1 = mean(abs(sub(x, recon)));
    if (kl_weight == 0.0) return l1;
    return add(l1, scale(kl_divergence(d), kl_weight));
}

struct ConvParams {
    Tensor w;
    Tensor b;
    std::size_t stride = 1;

    static ConvParams init(std::size_t ci, std::size_t co, std::size_t stride, Rng& rng) {
        return {xavier_uniform({3, 3, ci, co}, rng), zeros_param({co}), stride};
    }
    static ConvParams zero(std::size_t ci, std::size_t co) {
        return {zeros_param({3, 3, ci, co}), zeros_param({co}), 1};
    }
    Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, stride, 1); }
    void collect(const std::string& prefix, ParameterList& out) const {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

/// Convolutional KL autoencoder: strided 3x3 convs down, sub-pixel (depth to
/// space) convs up, tanh output in [-1, 1]. Images are NHWC in [-1, 1].
///
/// Same-width convs are residual and the moment head starts random with a
/// narrow posterior. Without both, multi-channel inputs learn one channel at
/// a time and can stall with a channel stuck at its mean.
class Autoencoder {
public:
    Autoencoder(AutoencoderConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const auto& hw = cfg_.hidden_widths;
        const std::size_t s = cfg_.stages();
        enc_.push_back(ConvParams::init(cfg_.channels_in, hw[0], 1, rng));
        for (std::size_t i = 1; i <= s; ++i) {
            enc_.push_back(ConvParams::init(hw[i - 1], hw[i], 2, rng));
            enc_.push_back(ConvParams::init(hw[i], hw[i], 1, rng));
        }
        enc_out_ = ConvParams::init(hw[s], 2 * cfg_.latent_channels, 1, rng);
        {
            auto bias = enc_out_.b.mutable_values();
            for (std::size_t c = cfg_.latent_channels; c < bias.size(); ++c) bias[c] = kInitLogVar;
        }

        dec_.push_back(ConvParams::init(cfg_.latent_channels, hw[s], 1, rng));
        dec_.push_back(ConvParams::init(hw[s], hw[s], 1, rng));
        for (std::size_t i = s; i >= 1; --i) {
            up_.push_back(ConvParams::init(hw[i], 4 * hw[i - 1], 1, rng));
            if (i > 1) refine_.push_back(ConvParams::init(hw[i - 1], hw[i - 1], 1, rng));
        }
        dec_out_ = ConvParams::init(hw[0], cfg_.channels_in, 1, rng);
    }

    const AutoencoderConfig& config() const noexcept { return cfg_; }
    double latent_scale() const noexcept { return latent_scale_; }
    void set_latent_scale(double s) {
        if (!(s > 0.0) || !std::isfinite(s)) throw NumericalError("latent scale must be positive and finite");
        latent_scale_ = s;
    }

    LatentDistribution encode(const Tensor& x) const {
        const std::size_t f = cfg_.downsample_factor;
        if (x.rank() != 4 || x.dim(3) != cfg_.channels_in) {
            throw DimensionError("encoder input must be [B, H, W, " + std::to_string(cfg_.channels_in) + "], got " +
                                 shape_str(x.shape()));
        }
        if (x.dim(1) % f || x.dim(2) % f) {
            throw DimensionError("image " + std::to_string(x.dim(1)) + "x" + std::to_string(x.dim(2)) +
                                 " not divisible by downsample factor " + std::to_string(f));
        }
        Tensor h = silu(enc_[0](x));
        for (std::size_t i = 1; i < enc_.size(); i += 2) {
            h = silu(enc_[i](h));
            h = add(h, silu(enc_[i + 1](h)));
        }
        const Tensor moments = enc_out_(h);
        const std::size_t c = cfg_.latent_channels;
        return {slice(moments, 3, 0, c), clamp(slice(moments, 3, c, c), kLogVarMin, kLogVarMax)};
    }

    Tensor decode(const Tensor& z) const {
        if (z.rank() != 4 || z.dim(3) != cfg_.latent_channels) {
            throw DimensionError("latent must be [B, h, w, " + std::to_string(cfg_.latent_channels) + "], got " +
                                 shape_str(z.shape()));
        }
        Tensor h = silu(dec_[0](z));
        h = add(h, silu(dec_[1](h)));
        for (std::size_t i = 0; i < up_.size(); ++i) {
            h = silu(depth_to_space(up_[i](h)));
            if (i < refine_.size()) h = add(h, silu(refine_[i](h)));
        }
        return tanh(dec_out_(h));
    }

    ParameterList encoder_parameters() const {
        ParameterList out;
        for (std::size_t i = 0; i < enc_.size(); ++i) enc_[i].collect("encoder." + std::to_string(i), out);
        enc_out_.collect("encoder.out", out);
        return out;
    }

    ParameterList parameters() const {
        ParameterList out = encoder_parameters();
        for (std::size_t i = 0; i < dec_.size(); ++i) dec_[i].collect("decoder." + std::to_string(i), out);
        for (std::size_t i = 0; i < up_.size(); ++i) up_[i].collect("decoder.up." + std::to_string(i), out);
        for (std::size_t i = 0; i < refine_.size(); ++i) refine_[i].collect("decoder.refine." + std::to_string(i), out);
        dec_out_.collect("decoder.out", out);
        return out;
    }

    Checkpoint to_checkpoint() const {
        Checkpoint ckpt;
        ckpt.meta["kind"] = "autoencoder";
        ckpt.meta["config"] = cfg_;
        ckpt.meta["latent_scale"] = latent_scale_;
        for (const auto& [name, t] : parameters()) ckpt.tensors.emplace_back(name, t.detach());
        return ckpt;
    }

    static Autoencoder from_checkpoint(const Checkpoint& ckpt) {
        if (ckpt.meta.value("kind", "") != "autoencoder") throw DataError("checkpoint is not an autoencoder");
        Rng rng(0);
        Autoencoder ae(ckpt.meta.at("config").get<AutoencoderConfig>(), rng);
        ae.latent_scale_ = ckpt.meta.at("latent_scale").get<double>();
        auto params = ae.parameters();
        load_into(ckpt, params);
        return ae;
    }

private:
    /// [B, h, w, 4c] -> [B, 2h, 2w, c]
    static Tensor depth_to_space(const Tensor& x) {
        const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c4 = x.dim(3);
        return unpatchify(reshape(x, {b, h * w, c4}), 2 * h, 2 * w, 2);
    }

    AutoencoderConfig cfg_;
    double latent_scale_ = 1.0;
    std::vector<ConvParams> enc_;
    ConvParams enc_out_;
    std::vector<ConvParams> dec_;
    std::vector<ConvParams> up_;
    std::vector<ConvParams> refine_;
    ConvParams dec_out_;
};

}  // namespace thermalgen
