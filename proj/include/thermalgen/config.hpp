#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "thermalgen/autoencoder.hpp"
#include "thermalgen/interpolant.hpp"
#include "thermalgen/network.hpp"

namespace thermalgen {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kVersion = "0.1.0";

struct TrainingConfig {
    std::size_t batch_size = 64;
    double lr = 1e-4;
    double weight_decay = 0.0;
    std::size_t steps = 1000;
    std::uint64_t seed = 0;
    double dropout_prob = 0.1;
    std::size_t checkpoint_every = 1000;
};

struct VaeTrainingConfig {
    std::size_t batch_size = 16;
    double lr = 6e-5;
    double weight_decay = 1e-3;
    std::size_t steps = 2000;
    std::uint64_t seed = 0;
};

struct AutoencoderRunConfig {
    std::string thermal_checkpoint;
    std::string rgb_checkpoint;
    AutoencoderConfig architecture;  // channels_in is set per modality
    bool sampled_latents = false;
};

struct DataConfig {
    std::vector<std::string> train_manifests;
    std::size_t image_size = 64;
    bool augment = true;
};

/// Fully-resolved run configuration: built-in defaults, overlaid by a config
/// file, overlaid by command-line flags.
struct RunConfig {
    ModelConfig model;
    SamplerConfig sampler;
    std::string schedule = "linear";
    AutoencoderRunConfig autoencoder;
    std::vector<std::string> styles{"synthA", "synthB"};
    TrainingConfig training;
    VaeTrainingConfig vae_training;
    DataConfig data;
    std::string output_dir = "runs/default";
};

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    j["schema_version"] = kConfigSchemaVersion;
    j["model"] = c.model;
    j["sampler"] = {{"steps", c.sampler.steps},
                    {"integrator", integrator_name(c.sampler.integrator)},
                    {"cfg_scale", c.sampler.cfg_scale}};
    j["schedule"] = c.schedule;
    j["autoencoder"] = {{"thermal_checkpoint", c.autoencoder.thermal_checkpoint},
                        {"rgb_checkpoint", c.autoencoder.rgb_checkpoint},
                        {"architecture", c.autoencoder.architecture},
                        {"sampled_latents", c.autoencoder.sampled_latents}};
    j["styles"] = c.styles;
    j["training"] = {{"batch_size", c.training.batch_size}, {"lr", c.training.lr},
                     {"weight_decay", c.training.weight_decay}, {"steps", c.training.steps},
                     {"seed", c.training.seed}, {"dropout_prob", c.training.dropout_prob},
                     {"checkpoint_every", c.training.checkpoint_every}};
    j["vae_training"] = {{"batch_size", c.vae_training.batch_size}, {"lr", c.vae_training.lr},
                         {"weight_decay", c.vae_training.weight_decay}, {"steps", c.vae_training.steps},
                         {"seed", c.vae_training.seed}};
    j["data"] = {{"train_manifests", c.data.train_manifests},
                 {"image_size", c.data.image_size},
                 {"augment", c.data.augment}};
    j["output_dir"] = c.output_dir;
    return j;
}

namespace detail {

inline bool compatible_types(const nlohmann::json& def, const nlohmann::json& val) {
    if (def.is_number()) {
        if (def.is_number_unsigned() || def.is_number_integer()) return val.is_number_integer() && !(val.is_number_integer() && val.get<long long>() < 0 && def.is_number_unsigned());
        return val.is_number();
    }
    return def.type() == val.type();
}

/// Overlays `patch` onto `base` in place; every key of `patch` must already
/// exist in `base` with a compatible type.
inline void strict_merge(nlohmann::json& base, const nlohmann::json& patch, const std::string& path) {
    if (!patch.is_object()) throw ConfigError("config section '" + path + "' must be an object");
    for (const auto& [key, value] : patch.items()) {
        const std::string here = path.empty() ? key : path + "." + key;
        if (!base.contains(key)) throw ConfigError("unknown config key '" + here + "'");
        auto& slot = base[key];
        if (slot.is_object()) {
            strict_merge(slot, value, here);
        } else {
            if (!compatible_types(slot, value)) throw ConfigError("config key '" + here + "' has the wrong type");
            slot = value;
        }
    }
}

template <class T>
T field(const nlohmann::json& j, const std::string& section, const std::string& key) {
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config key '" + section + key + "': " + e.what());
    }
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    if (j.at("schema_version").get<int>() != kConfigSchemaVersion) {
        throw ConfigError("unsupported config schema_version " + j.at("schema_version").dump());
    }
    try {
        c.model = j.at("model").get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config key 'model': ") + e.what());
    }
    c.model.validate();
    const auto& s = j.at("sampler");
    c.sampler.steps = detail::field<int>(s, "sampler.", "steps");
    c.sampler.integrator = integrator_by_name(detail::field<std::string>(s, "sampler.", "integrator"));
    c.sampler.cfg_scale = detail::field<double>(s, "sampler.", "cfg_scale");
    c.sampler.time_grid();  // validates steps and scale
    c.schedule = j.at("schedule").get<std::string>();
    schedule_by_name(c.schedule);
    const auto& ae = j.at("autoencoder");
    c.autoencoder.thermal_checkpoint = detail::field<std::string>(ae, "autoencoder.", "thermal_checkpoint");
    c.autoencoder.rgb_checkpoint = detail::field<std::string>(ae, "autoencoder.", "rgb_checkpoint");
    c.autoencoder.architecture = detail::field<AutoencoderConfig>(ae, "autoencoder.", "architecture");
    c.autoencoder.sampled_latents = detail::field<bool>(ae, "autoencoder.", "sampled_latents");
    c.styles = j.at("styles").get<std::vector<std::string>>();
    const auto& t = j.at("training");
    c.training.batch_size = detail::field<std::size_t>(t, "training.", "batch_size");
    c.training.lr = detail::field<double>(t, "training.", "lr");
    c.training.weight_decay = detail::field<double>(t, "training.", "weight_decay");
    c.training.steps = detail::field<std::size_t>(t, "training.", "steps");
    c.training.seed = detail::field<std::uint64_t>(t, "training.", "seed");
    c.training.dropout_prob = detail::field<double>(t, "training.", "dropout_prob");
    c.training.checkpoint_every = detail::field<std::size_t>(t, "training.", "checkpoint_every");
    const auto& v = j.at("vae_training");
    c.vae_training.batch_size = detail::field<std::size_t>(v, "vae_training.", "batch_size");
    c.vae_training.lr = detail::field<double>(v, "vae_training.", "lr");
    c.vae_training.weight_decay = detail::field<double>(v, "vae_training.", "weight_decay");
    c.vae_training.steps = detail::field<std::size_t>(v, "vae_training.", "steps");
    c.vae_training.seed = detail::field<std::uint64_t>(v, "vae_training.", "seed");
    const auto& d = j.at("data");
    c.data.train_manifests = detail::field<std::vector<std::string>>(d, "data.", "train_manifests");
    c.data.image_size = detail::field<std::size_t>(d, "data.", "image_size");
    c.data.augment = detail::field<bool>(d, "data.", "augment");
    c.output_dir = j.at("output_dir").get<std::string>();

    if (c.training.batch_size == 0 || c.vae_training.batch_size == 0) throw ConfigError("batch sizes must be positive");
    if (!(c.training.lr > 0.0) || !(c.vae_training.lr > 0.0)) throw ConfigError("learning rates must be positive");
    if (!(c.training.dropout_prob >= 0.0 && c.training.dropout_prob < 1.0)) {
        throw ConfigError("config key 'training.dropout_prob' must lie in [0, 1)");
    }
    if (c.training.checkpoint_every == 0) throw ConfigError("config key 'training.checkpoint_every' must be positive");
    c.autoencoder.architecture.channels_in = 1;
    c.autoencoder.architecture.validate();
    return c;
}

/// One command-line override: dotted key path and a JSON (or bare string) value.
struct ConfigOverride {
    std::string path;
    nlohmann::json value;
};

inline ConfigOverride parse_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
        value = raw;
    }
    return {assignment.substr(0, eq), value};
}

inline nlohmann::json override_patch(const ConfigOverride& o) {
    nlohmann::json patch = o.value;
    std::string path = o.path;
    while (true) {
        const auto dot = path.rfind('.');
        const std::string key = dot == std::string::npos ? path : path.substr(dot + 1);
        patch = nlohmann::json{{key, patch}};
        if (dot == std::string::npos) break;
        path = path.substr(0, dot);
    }
    return patch;
}

/// Defaults <- file <- overrides, with strict key checking at every layer.
inline nlohmann::json resolve_config_json(const std::filesystem::path& file,
                                          const std::vector<ConfigOverride>& overrides) {
    nlohmann::json resolved = to_json(RunConfig{});
    if (!file.empty()) {
        std::ifstream in(file);
        if (!in) throw ConfigError("cannot open config file " + file.string());
        nlohmann::json user;
        try {
            user = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config file " + file.string() + " is not valid JSON: " + e.what());
        }
        detail::strict_merge(resolved, user, "");
    }
    for (const auto& o : overrides) detail::strict_merge(resolved, override_patch(o), "");
    return resolved;
}

inline RunConfig resolve_config(const std::filesystem::path& file, const std::vector<ConfigOverride>& overrides) {
    return run_config_from_json(resolve_config_json(file, overrides));
}

}  // namespace thermalgen
