#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "thermalgen/interpolant.hpp"
#include "thermalgen/optim.hpp"
#include "thermalgen/random.hpp"

namespace thermalgen {

enum class StyleInit { zeros, gaussian };

/// Outcome of a training-time style draw.
struct StyleSelection {
    std::string id;  // the id actually used (kUnconditional when dropped)
    bool dropped = false;
    Tensor embedding;
};

/// Learnable per-style embeddings plus the unconditional slot. Registration
/// order is preserved so parameter listings and checkpoints are stable.
class StyleBank {
public:
    static constexpr double kDefaultInitStddev = 0.02;

    explicit StyleBank(std::size_t dim, double dropout_prob = 0.1) : dim_(dim), dropout_prob_(dropout_prob) {
        if (dim == 0) throw ConfigError("style dimension must be positive");
        set_dropout_prob(dropout_prob);
        unconditional_ = zeros_param({dim});
    }

    StyleBank(std::size_t dim, double dropout_prob, Rng& rng) : StyleBank(dim, dropout_prob) {
        unconditional_ = normal_param({dim}, rng, kDefaultInitStddev);
    }

    std::size_t dim() const noexcept { return dim_; }
    double dropout_prob() const noexcept { return dropout_prob_; }
    void set_dropout_prob(double p) {
        if (!(p >= 0.0 && p < 1.0)) throw ConfigError("style dropout probability must lie in [0, 1)");
        dropout_prob_ = p;
    }

    const std::vector<std::string>& ids() const noexcept { return order_; }
    bool contains(const std::string& id) const { return id == kUnconditional || embeddings_.count(id) > 0; }

    /// Live (trainable) embedding for `id`, or y_un for kUnconditional.
    const Tensor& lookup(const std::string& id) const {
        if (id == kUnconditional) return unconditional_;
        auto it = embeddings_.find(id);
        if (it == embeddings_.end()) {
            std::string known;
            for (const auto& s : order_) known += (known.empty() ? "" : ", ") + s;
            throw LookupError("unknown style '" + id + "'; registered styles: [" + known + "]");
        }
        return it->second;
    }

    void extend(const std::string& id, StyleInit init, Rng& rng, double stddev = kDefaultInitStddev) {
        if (id.empty() || id == kUnconditional) throw ConfigError("invalid style id '" + id + "'");
        if (embeddings_.count(id)) throw ConflictError("style '" + id + "' is already registered");
        Tensor y = init == StyleInit::zeros ? zeros_param({dim_}) : normal_param({dim_}, rng, stddev);
        embeddings_.emplace(id, std::move(y));
        order_.push_back(id);
    }

    /// Returns y_un with probability dropout_prob, else the embedding of `id`.
    StyleSelection train_select(const std::string& id, Rng& rng) const {
        const Tensor& cond = lookup(id);
        const bool drop = uniform(rng) < dropout_prob_;
        if (drop) return {kUnconditional, true, unconditional_};
        return {id, false, cond};
    }

    ParameterList parameters() const {
        ParameterList out;
        for (const auto& id : order_) out.emplace_back("style/" + id, embeddings_.at(id));
        out.emplace_back("style/" + kUnconditional, unconditional_);
        return out;
    }

    nlohmann::json describe() const {
        return {{"ids", order_}, {"dim", dim_}, {"dropout_prob", dropout_prob_}};
    }

private:
    std::size_t dim_;
    double dropout_prob_;
    std::map<std::string, Tensor> embeddings_;
    std::vector<std::string> order_;
    Tensor unconditional_;
};

}  // namespace thermalgen
