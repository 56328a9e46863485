#pragma once

#include <cmath>
#include <concepts>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "thermalgen/ops.hpp"
#include "thermalgen/random.hpp"

namespace thermalgen {

/// Reserved style id that selects the unconditional embedding.
inline const std::string kUnconditional = "<unconditional>";

/// Interpolation path z_t = alpha(t) z0 + sigma(t) eps between data (t = 0)
/// and Gaussian noise (t = 1).
struct Schedule {
    std::string name;
    std::function<double(double)> alpha;
    std::function<double(double)> sigma;
    std::function<double(double)> alpha_dot;
    std::function<double(double)> sigma_dot;
};

inline Schedule linear_schedule() {
    return {"linear", [](double t) { return 1.0 - t; }, [](double t) { return t; }, [](double) { return -1.0; },
            [](double) { return 1.0; }};
}

/// alpha = cos(pi t / 2), sigma = sin(pi t / 2). Endpoints are pinned exactly.
inline Schedule cosine_schedule() {
    constexpr double h = std::numbers::pi / 2.0;
    return {"cosine", [](double t) { return t >= 1.0 ? 0.0 : std::cos(h * t); },
            [](double t) { return t <= 0.0 ? 0.0 : (t >= 1.0 ? 1.0 : std::sin(h * t)); },
            [](double t) { return -h * std::sin(h * t); }, [](double t) { return h * std::cos(h * t); }};
}

inline Schedule schedule_by_name(const std::string& name) {
    if (name == "linear") return linear_schedule();
    if (name == "cosine") return cosine_schedule();
    throw ConfigError("unknown schedule '" + name + "' (expected linear or cosine)");
}

namespace detail {
inline void check_time(double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("t must lie in [0, 1], got " + std::to_string(t));
}
inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(what) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}
}  // namespace detail

inline Tensor forward_process(const Tensor& z0, const Tensor& eps, double t, const Schedule& sched) {
    detail::check_time(t);
    detail::check_same_shape(z0, eps, "forward_process");
    const double a = sched.alpha(t);
    const double s = sched.sigma(t);
    if (s == 0.0 && a == 1.0) return reshape(z0, z0.shape());
    if (a == 0.0 && s == 1.0) return reshape(eps, eps.shape());
    return add(scale(z0, a), scale(eps, s));
}

inline Tensor velocity_target(const Tensor& z0, const Tensor& eps, double t, const Schedule& sched) {
    detail::check_time(t);
    detail::check_same_shape(z0, eps, "velocity_target");
    return add(scale(z0, sched.alpha_dot(t)), scale(eps, sched.sigma_dot(t)));
}

/// A velocity model v(z_t, t, z_rgb, y) over batched latents [B, h, w, C], one
/// time per batch item and style embeddings y of shape [B, D].
template <class M>
concept VelocityField = requires(const M& m, const Tensor& z, const std::vector<double>& t, const Tensor& y) {
    { m.forward(z, t, z, y) } -> std::convertible_to<Tensor>;
};

/// A velocity field that also owns a style bank addressable by id.
template <class M>
concept StyledVelocityField = VelocityField<M> && requires(const M& m, const std::string& id) {
    { m.style_embedding(id) } -> std::convertible_to<Tensor>;
};

/// Stacks one style embedding per batch item into [B, D].
template <StyledVelocityField M>
Tensor batch_styles(const M& model, const std::vector<std::string>& ids) {
    std::vector<Tensor> rows;
    rows.reserve(ids.size());
    for (const auto& id : ids) {
        const Tensor y = model.style_embedding(id);
        rows.push_back(reshape(y, {1, y.numel()}));
    }
    return concat(rows, 0);
}

struct FlowBatch {
    Tensor z0;     // [B, h, w, C] thermal latents
    Tensor z_rgb;  // [B, h, w, C_rgb] RGB latents
    Tensor y;      // [B, D] style embeddings (already dropout-selected)
};

/// Flow-matching regression loss at fixed times and noise: mean over all
/// entries of (v_theta(z_t) - v_target)^2.
template <VelocityField M>
Tensor flow_matching_loss_at(const M& model, const FlowBatch& batch, const std::vector<double>& ts, const Tensor& eps,
                             const Schedule& sched) {
    detail::check_same_shape(batch.z0, eps, "flow_matching_loss");
    const std::size_t b = batch.z0.dim(0);
    if (ts.size() != b) throw DimensionError("one time value per batch item required");
    const std::size_t per = batch.z0.numel() / b;
    Buffer zt(batch.z0.numel()), target(batch.z0.numel());
    auto z0 = batch.z0.values();
    auto ev = eps.values();
    for (std::size_t i = 0; i < b; ++i) {
        detail::check_time(ts[i]);
        const double a = sched.alpha(ts[i]), s = sched.sigma(ts[i]);
        const double ad = sched.alpha_dot(ts[i]), sd = sched.sigma_dot(ts[i]);
        for (std::size_t j = i * per; j < (i + 1) * per; ++j) {
            zt[j] = a * z0[j] + s * ev[j];
            target[j] = ad * z0[j] + sd * ev[j];
        }
    }
    const Tensor z_t(batch.z0.shape(), std::move(zt));
    const Tensor v_target(batch.z0.shape(), std::move(target));
    const Tensor pred = model.forward(z_t, ts, batch.z_rgb, batch.y);
    detail::check_same_shape(pred, v_target, "velocity prediction");
    return mean(square(sub(pred, v_target)));
}

/// Draws t ~ U(0, 1) per item and eps ~ N(0, I), then evaluates the loss.
template <VelocityField M>
Tensor flow_matching_loss(const M& model, const FlowBatch& batch, Rng& rng, const Schedule& sched) {
    const std::size_t b = batch.z0.dim(0);
    std::vector<double> ts(b);
    for (double& t : ts) t = uniform(rng);
    const Tensor eps = randn(batch.z0.shape(), rng);
    return flow_matching_loss_at(model, batch, ts, eps, sched);
}

/// Classifier-free guidance: v_un + s (v_cond - v_un). s = 1 and s = 0 return
/// the conditional and unconditional predictions unchanged.
template <StyledVelocityField M>
Tensor guided_velocity(const M& model, const Tensor& z_t, double t, const Tensor& z_rgb, const std::string& style_id,
                       double cfg_scale) {
    detail::check_time(t);
    const std::size_t b = z_t.dim(0);
    const std::vector<double> ts(b, t);
    if (cfg_scale == 1.0) {
        return model.forward(z_t, ts, z_rgb, batch_styles(model, std::vector<std::string>(b, style_id)));
    }
    const Tensor v_un = model.forward(z_t, ts, z_rgb, batch_styles(model, std::vector<std::string>(b, kUnconditional)));
    if (cfg_scale == 0.0) return v_un;
    const Tensor v_cond = model.forward(z_t, ts, z_rgb, batch_styles(model, std::vector<std::string>(b, style_id)));
    return add(v_un, scale(sub(v_cond, v_un), cfg_scale));
}

enum class Integrator { euler, heun };

inline Integrator integrator_by_name(const std::string& name) {
    if (name == "euler") return Integrator::euler;
    if (name == "heun") return Integrator::heun;
    throw ConfigError("unknown integrator '" + name + "' (expected euler or heun)");
}

inline std::string integrator_name(Integrator i) { return i == Integrator::euler ? "euler" : "heun"; }

struct SamplerConfig {
    int steps = 50;
    Integrator integrator = Integrator::euler;
    double cfg_scale = 1.0;
    std::vector<double> custom_grid;  // empty: uniform t_k = 1 - k / steps

    std::vector<double> time_grid() const {
        if (steps < 1) throw ConfigError("sampler steps must be >= 1");
        if (!(cfg_scale >= 0.0)) throw ConfigError("cfg scale must be non-negative");
        if (custom_grid.empty()) {
            std::vector<double> grid(static_cast<std::size_t>(steps) + 1);
            for (int k = 0; k <= steps; ++k) grid[static_cast<std::size_t>(k)] = 1.0 - static_cast<double>(k) / steps;
            grid.back() = 0.0;
            return grid;
        }
        if (custom_grid.size() != static_cast<std::size_t>(steps) + 1 || custom_grid.front() != 1.0 ||
            custom_grid.back() != 0.0) {
            throw ConfigError("time grid must have steps + 1 points running from 1 to 0");
        }
        for (std::size_t i = 1; i < custom_grid.size(); ++i) {
            if (!(custom_grid[i] < custom_grid[i - 1])) throw ConfigError("time grid must be strictly decreasing");
        }
        return custom_grid;
    }
};

/// Integrates the (guided) probability-flow ODE from noise at t = 1 to t = 0.
template <StyledVelocityField M>
Tensor sample(const M& model, const Tensor& eps, const Tensor& z_rgb, const std::string& style_id,
              const SamplerConfig& cfg) {
    const std::vector<double> grid = cfg.time_grid();
    NoGradScope no_grad;
    Tensor z = eps.detach();
    for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
        const double dt = grid[k + 1] - grid[k];
        const Tensor v = guided_velocity(model, z, grid[k], z_rgb, style_id, cfg.cfg_scale);
        if (cfg.integrator == Integrator::euler) {
            z = add(z, scale(v, dt));
        } else {
            const Tensor z_pred = add(z, scale(v, dt));
            const Tensor v_next = guided_velocity(model, z_pred, grid[k + 1], z_rgb, style_id, cfg.cfg_scale);
            z = add(z, scale(add(v, v_next), 0.5 * dt));
        }
    }
    return z;
}

}  // namespace thermalgen
