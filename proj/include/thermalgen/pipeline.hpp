#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "thermalgen/autoencoder.hpp"
#include "thermalgen/config.hpp"
#include "thermalgen/data.hpp"
#include "thermalgen/image.hpp"
#include "thermalgen/interpolant.hpp"
#include "thermalgen/network.hpp"
#include "thermalgen/optim.hpp"

namespace thermalgen {

using StepCallback = std::function<void(std::size_t step, double loss)>;

/// Gathers rows `idx` of the leading axis of `all` into a new tensor.
inline Tensor gather_rows(const Tensor& all, const std::vector<std::size_t>& idx) {
    const std::size_t per = all.numel() / all.dim(0);
    Buffer v(idx.size() * per);
    auto src = all.values();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= all.dim(0)) throw DimensionError("row index out of range");
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(idx[i] * per), per,
                    v.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    Shape shape = all.shape();
    shape[0] = idx.size();
    return Tensor(std::move(shape), std::move(v));
}

// ---------------------------------------------------------------------------
// Autoencoder training

inline std::vector<const Image8*> pointers_of(const std::vector<Image8>& images) {
    std::vector<const Image8*> out;
    out.reserve(images.size());
    for (const auto& img : images) out.push_back(&img);
    return out;
}

/// Posterior means of `images` (scaled by the autoencoder's latent scale),
/// encoded in chunks without recording gradients.
inline Tensor encode_images(const Autoencoder& ae, const std::vector<const Image8*>& images, std::size_t chunk = 32) {
    if (images.empty()) throw DataError("no images to encode");
    NoGradScope no_grad;
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < images.size(); i += chunk) {
        const std::vector<const Image8*> part(images.begin() + static_cast<std::ptrdiff_t>(i),
                                              images.begin() + static_cast<std::ptrdiff_t>(std::min(images.size(), i + chunk)));
        parts.push_back(ae.encode(images_to_tensor(part)).mean);
    }
    const Tensor z = parts.size() == 1 ? parts.front() : concat(parts, 0);
    return scale(z, ae.latent_scale());
}

/// 1 / standard deviation of the unscaled posterior means over `images`.
inline double compute_latent_scale(const Autoencoder& ae, const std::vector<const Image8*>& images) {
    const Tensor z = scale(encode_images(ae, images), 1.0 / ae.latent_scale());
    double m = 0.0;
    for (double v : z.values()) m += v;
    m /= static_cast<double>(z.numel());
    double var = 0.0;
    for (double v : z.values()) var += (v - m) * (v - m);
    var /= static_cast<double>(z.numel());
    if (!(var > 0.0)) throw NumericalError("latent variance is zero; cannot compute a latent scale");
    return 1.0 / std::sqrt(var);
}

struct VaeTrainOptions {
    std::size_t batch_size = 16;
    std::size_t steps = 2000;
    double lr = 6e-5;
    double weight_decay = 1e-3;
    std::uint64_t seed = 0;
    StepCallback on_step;
};

/// Trains a fresh autoencoder on same-sized images whose channel count
/// matches `cfg.channels_in`, then sets its latent scale.
inline Autoencoder train_autoencoder(const AutoencoderConfig& cfg, const std::vector<Image8>& images,
                                     const VaeTrainOptions& opt) {
    if (images.empty()) throw DataError("no images to train the autoencoder on");
    for (const auto& img : images) {
        if (img.channels != cfg.channels_in) throw DataError("image channels do not match the autoencoder input");
    }
    Rng init_rng = derive_rng(opt.seed, 0);
    Autoencoder ae(cfg, init_rng);
    const auto params = tensors_of(ae.parameters());
    AdamW optim(params, {opt.lr, 0.9, 0.999, 1e-8, opt.weight_decay});
    BatchSampler sampler(images.size(), opt.batch_size, derive_rng(opt.seed, 1));
    Rng noise = derive_rng(opt.seed, 2);
    for (std::size_t step = 1; step <= opt.steps; ++step) {
        std::vector<const Image8*> batch;
        for (std::size_t i : sampler.next()) batch.push_back(&images[i]);
        const Tensor x = images_to_tensor(batch);
        Tape tape;
        double value = 0.0;
        {
            TapeScope scope(tape);
            const LatentDistribution d = ae.encode(x);
            const Tensor recon = ae.decode(sample_latent(d, noise));
            const Tensor loss = vae_loss(x, recon, d, cfg.kl_weight);
            value = loss.item();
            tape.backward(loss);
        }
        for (auto p : params) p.ensure_grad();
        optim.step();
        optim.zero_grad();
        if (opt.on_step) opt.on_step(step, value);
    }
    if (opt.steps > 0) ae.set_latent_scale(compute_latent_scale(ae, pointers_of(images)));
    return ae;
}

// ---------------------------------------------------------------------------
// Flow training

/// Encoded training pairs: scaled thermal and RGB latents plus style ids.
struct LatentPairs {
    Tensor z_thermal;  // [N, h, w, C]
    Tensor z_rgb;      // [N, h, w, C_rgb]
    std::vector<std::string> style_ids;

    std::size_t size() const noexcept { return style_ids.size(); }
};

inline LatentPairs encode_pairs(const Autoencoder& thermal_ae, const Autoencoder& rgb_ae,
                                const std::vector<ImagePair>& pairs) {
    std::vector<const Image8*> th, rgb;
    LatentPairs out;
    for (const auto& p : pairs) {
        th.push_back(&p.thermal);
        rgb.push_back(&p.rgb);
        out.style_ids.push_back(p.style_id);
    }
    out.z_thermal = encode_images(thermal_ae, th);
    out.z_rgb = encode_images(rgb_ae, rgb);
    return out;
}

using BatchProvider = std::function<LatentPairs()>;

/// Shuffled batches drawn from pre-encoded latents.
inline BatchProvider cached_batches(LatentPairs data, std::size_t batch_size, Rng rng) {
    auto sampler = std::make_shared<BatchSampler>(data.size(), batch_size, std::move(rng));
    auto shared = std::make_shared<LatentPairs>(std::move(data));
    return [sampler, shared] {
        const auto idx = sampler->next();
        LatentPairs b;
        b.z_thermal = gather_rows(shared->z_thermal, idx);
        b.z_rgb = gather_rows(shared->z_rgb, idx);
        for (std::size_t i : idx) b.style_ids.push_back(shared->style_ids[i]);
        return b;
    };
}

/// Shuffled batches with a fresh random resize-crop per pair, encoded on the fly.
inline BatchProvider augmented_batches(std::vector<ImagePair> pairs, Autoencoder thermal_ae, Autoencoder rgb_ae,
                                       std::size_t image_size, std::size_t batch_size, Rng rng) {
    auto sampler = std::make_shared<BatchSampler>(pairs.size(), batch_size, derive_rng(rng(), 0));
    auto aug_rng = std::make_shared<Rng>(derive_rng(rng(), 1));
    auto shared = std::make_shared<std::vector<ImagePair>>(std::move(pairs));
    return [=] {
        std::vector<ImagePair> batch;
        for (std::size_t i : sampler->next()) batch.push_back(random_resize_crop((*shared)[i], image_size, *aug_rng));
        return encode_pairs(thermal_ae, rgb_ae, batch);
    };
}

struct FlowTrainOptions {
    TrainingConfig training;
    Schedule schedule = linear_schedule();
    std::filesystem::path checkpoint_dir;  // empty: no checkpoints written
    std::filesystem::path loss_log;        // empty: no CSV log
    nlohmann::json extra_meta = nlohmann::json::object();
    StepCallback on_step;
};

struct FlowTrainResult {
    std::vector<double> losses;
    std::vector<std::filesystem::path> checkpoints;
};

inline std::filesystem::path flow_checkpoint_path(const std::filesystem::path& dir, std::size_t step) {
    std::ostringstream name;
    name << "flow_step_" << std::setw(7) << std::setfill('0') << step << ".ckpt";
    return dir / name.str();
}

inline Checkpoint flow_checkpoint(const VelocityModel& model, const FlowTrainOptions& opt, std::size_t step) {
    Checkpoint ckpt = model.to_checkpoint();
    ckpt.meta["step"] = step;
    ckpt.meta["schedule"] = opt.schedule.name;
    for (const auto& [k, v] : opt.extra_meta.items()) ckpt.meta[k] = v;
    return ckpt;
}

/// Builds the [B, D] style matrix with per-item dropout to y_un.
inline Tensor select_styles(const VelocityModel& model, const std::vector<std::string>& ids, Rng& rng) {
    std::vector<Tensor> rows;
    rows.reserve(ids.size());
    for (const auto& id : ids) {
        const Tensor y = model.styles().train_select(id, rng).embedding;
        rows.push_back(reshape(y, {1, y.numel()}));
    }
    return concat(rows, 0);
}

/// AdamW flow-matching training. Checkpoints every `checkpoint_every` steps
/// and at the end; if a step throws, the last completed state is flushed to
/// disk before the exception propagates.
inline FlowTrainResult train_flow(VelocityModel& model, const BatchProvider& next_batch, const FlowTrainOptions& opt) {
    const auto& tc = opt.training;
    model.styles().set_dropout_prob(tc.dropout_prob);
    const auto params = tensors_of(model.parameters());
    AdamW optim(params, {tc.lr, 0.9, 0.999, 1e-8, tc.weight_decay});
    Rng rng = derive_rng(tc.seed, 2);
    FlowTrainResult result;

    std::ofstream log;
    if (!opt.loss_log.empty()) {
        if (opt.loss_log.has_parent_path()) std::filesystem::create_directories(opt.loss_log.parent_path());
        log.open(opt.loss_log, std::ios::trunc);
        if (!log) throw IoError("cannot write loss log " + opt.loss_log.string());
        log << "step,loss,wallclock\n";
    }
    auto save = [&](std::size_t step) {
        if (opt.checkpoint_dir.empty()) return;
        const auto path = flow_checkpoint_path(opt.checkpoint_dir, step);
        save_checkpoint(path, flow_checkpoint(model, opt, step));
        result.checkpoints.push_back(path);
    };

    const auto start = std::chrono::steady_clock::now();
    std::size_t done = 0;
    try {
        for (std::size_t step = 1; step <= tc.steps; ++step) {
            const LatentPairs b = next_batch();
            Tape tape;
            double value = 0.0;
            {
                TapeScope scope(tape);
                const FlowBatch batch{b.z_thermal, b.z_rgb, select_styles(model, b.style_ids, rng)};
                const Tensor loss = flow_matching_loss(model, batch, rng, opt.schedule);
                value = loss.item();
                tape.backward(loss);
            }
            for (auto p : params) p.ensure_grad();
            optim.step();
            optim.zero_grad();
            done = step;
            result.losses.push_back(value);
            if (log) {
                const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
                log << step << ',' << std::setprecision(17) << value << ',' << std::setprecision(6) << secs << '\n';
            }
            if (opt.on_step) opt.on_step(step, value);
            if (step % tc.checkpoint_every == 0 && step != tc.steps) save(step);
        }
    } catch (...) {
        if (log) log.flush();
        save(done);
        throw;
    }
    save(done);
    return result;
}

// ---------------------------------------------------------------------------
// Sampling

/// Initial noise for input `index`: a function of (seed, index) only, so a
/// given input gets the same draw regardless of batching.
inline Tensor sample_noise(const ModelConfig& cfg, std::uint64_t seed, std::size_t index) {
    Rng rng = derive_rng(seed, index);
    return randn({1, cfg.latent_h, cfg.latent_w, cfg.latent_channels}, rng);
}

/// RGB images -> thermal images for one style.
inline std::vector<Image8> generate_thermal(const VelocityModel& model, const Autoencoder& thermal_ae,
                                            const Autoencoder& rgb_ae, const std::vector<Image8>& rgb,
                                            const std::string& style_id, const SamplerConfig& cfg,
                                            std::uint64_t seed, std::size_t chunk = 16) {
    model.styles().lookup(style_id);
    std::vector<Image8> out;
    out.reserve(rgb.size());
    NoGradScope no_grad;
    for (std::size_t i = 0; i < rgb.size(); i += chunk) {
        const std::size_t end = std::min(rgb.size(), i + chunk);
        std::vector<const Image8*> part;
        std::vector<Tensor> noise;
        for (std::size_t j = i; j < end; ++j) {
            part.push_back(&rgb[j]);
            noise.push_back(sample_noise(model.config(), seed, j));
        }
        const Tensor z_rgb = encode_images(rgb_ae, part);
        const Tensor eps = noise.size() == 1 ? noise.front() : concat(noise, 0);
        const Tensor z = sample(model, eps, z_rgb, style_id, cfg);
        for (auto& img : tensor_to_images(thermal_ae.decode(scale(z, 1.0 / thermal_ae.latent_scale())))) {
            out.push_back(std::move(img));
        }
    }
    return out;
}

}  // namespace thermalgen
