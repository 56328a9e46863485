#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "thermalgen/tensor.hpp"

namespace thermalgen {

/// Named trainable tensors in a stable, deterministic order.
using ParameterList = std::vector<std::pair<std::string, Tensor>>;

struct AdamWOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct AdamWState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    long long step = 0;
};

/// One decoupled-weight-decay Adam update over `params`. Every parameter must
/// carry a gradient.
inline void adamw_step(std::vector<Tensor>& params, const AdamWOptions& opt, AdamWState& state) {
    if (!(opt.lr > 0.0)) throw DomainError("learning rate must be positive");
    for (const auto& p : params) {
        if (!p.has_grad()) throw ContractError("adamw_step: parameter without gradient");
    }
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].numel(), 0.0);
            state.v[i].assign(params[i].numel(), 0.0);
        }
    } else if (state.m.size() != params.size()) {
        throw ContractError("adamw_step: optimizer state does not match parameter list");
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
    const double decay = 1.0 - opt.lr * opt.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].mutable_values();
        auto g = params[i].grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
            v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] = w[j] * decay - opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
        }
    }
}

class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWOptions options) : params_(std::move(params)), options_(options) {}

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }
    void step() { adamw_step(params_, options_, state_); }

    const AdamWState& state() const { return state_; }
    AdamWOptions& options() { return options_; }

private:
    std::vector<Tensor> params_;
    AdamWOptions options_;
    AdamWState state_;
};

inline std::vector<Tensor> tensors_of(const ParameterList& params) {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const auto& [name, t] : params) out.push_back(t);
    return out;
}

}  // namespace thermalgen
