// thermalgen command-line tool: data preparation, autoencoder and flow
// training, sampling and evaluation.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "thermalgen/config.hpp"
#include "thermalgen/metrics.hpp"
#include "thermalgen/pipeline.hpp"

namespace fs = std::filesystem;
using namespace thermalgen;

namespace {

struct ConfigArgs {
    std::string file;
    std::vector<std::string> sets;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", file, "JSON run configuration")->check(CLI::ExistingFile);
        cmd->add_option("--set", sets, "Override a config value, e.g. --set training.lr=0.001");
    }
    std::vector<ConfigOverride> overrides() const {
        std::vector<ConfigOverride> out;
        for (const auto& s : sets) out.push_back(parse_override(s));
        return out;
    }
    nlohmann::json resolved_json() const { return resolve_config_json(file, overrides()); }
    RunConfig resolved() const { return run_config_from_json(resolved_json()); }
};

void write_json(const fs::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

/// Resize of the short side to `size` followed by a centred crop; a no-op on
/// images that already have that size.
ImagePair fit_to_size(const ImagePair& pair, std::size_t size) {
    const std::size_t h = pair.rgb.height, w = pair.rgb.width;
    if (h == size && w == size) return pair;
    const std::size_t s = std::min(h, w);
    if (s < size) throw DataError("image " + std::to_string(h) + "x" + std::to_string(w) + " is smaller than " +
                                  std::to_string(size));
    ResizeCrop rc;
    rc.out_px = size;
    rc.resized_h = std::max(size, h * size / s);
    rc.resized_w = std::max(size, w * size / s);
    rc.offset_y = (rc.resized_h - size) / 2;
    rc.offset_x = (rc.resized_w - size) / 2;
    return apply_resize_crop(pair, rc);
}

std::vector<ImagePair> load_training_pairs(const RunConfig& cfg, bool fit) {
    if (cfg.data.train_manifests.empty()) throw ConfigError("config key 'data.train_manifests' is empty");
    std::vector<ImagePair> pairs;
    for (const auto& path : cfg.data.train_manifests) {
        const Manifest m = read_manifest(path);
        validate_manifest(m);
        for (auto& p : load_pairs(m, Split::train)) pairs.push_back(fit ? fit_to_size(p, cfg.data.image_size) : p);
    }
    if (pairs.empty()) throw DataError("the training manifests contain no train-split pairs");
    return pairs;
}

Autoencoder load_autoencoder(const std::string& path, const char* key) {
    if (path.empty()) throw ConfigError(std::string("config key 'autoencoder.") + key + "' is empty");
    return Autoencoder::from_checkpoint(load_checkpoint(path));
}

// ---------------------------------------------------------------------------

int cmd_synth(const std::vector<std::string>& styles, std::size_t count, std::size_t size, std::uint64_t seed,
              const std::string& split, const fs::path& out_dir) {
    std::vector<ManifestRecord> records;
    for (std::size_t k = 0; k < styles.size(); ++k) {
        // each style gets its own RGB stream so the two sets do not share inputs
        const auto pairs = synth_generate(styles[k], count, size, seed + 1000003ULL * k, split_by_name(split));
        for (auto& r : write_pairs(out_dir, pairs, styles[k] + "_" + split)) records.push_back(std::move(r));
    }
    const fs::path manifest = out_dir / "manifest.jsonl";
    write_manifest(manifest, records);
    std::cout << "wrote " << records.size() << " pairs to " << manifest.string() << '\n';
    return 0;
}

struct PrepareArgs {
    std::string rgb_map, thermal_map, invalid_mask, normalize = "percentile", style, source, split = "train", out_dir;
    double meters_per_pixel = 1.0, stride_m = 35.0, p_lo = 1.0, p_hi = 99.0;
    std::size_t crop_px = 512;
};

int cmd_prepare(const PrepareArgs& a) {
    AlignedMapPair maps;
    maps.rgb_map = read_png8(a.rgb_map);
    if (maps.rgb_map.channels != 3) throw DataError("RGB map must have three channels: " + a.rgb_map);
    maps.thermal_bits = detail::read_png_raw(a.thermal_map).depth == 16 ? 16 : 8;
    maps.thermal_map = read_png16(a.thermal_map);
    maps.meters_per_pixel = a.meters_per_pixel;
    if (!a.invalid_mask.empty()) maps.invalid_mask = to_gray(read_png8(a.invalid_mask));
    GridSampleOptions opt;
    if (a.normalize == "minmax") {
        opt.normalize = NormalizeMethod::minmax();
    } else if (a.normalize == "percentile") {
        opt.normalize = NormalizeMethod::percentile(a.p_lo, a.p_hi);
    } else {
        throw ConfigError("--normalize must be minmax or percentile");
    }
    opt.style_id = a.style;
    opt.source = a.source.empty() ? a.style : a.source;
    opt.split = split_by_name(a.split);
    const auto pairs = grid_sample(maps, a.stride_m, a.crop_px, opt);
    const auto records = write_pairs(a.out_dir, pairs, opt.source);
    write_manifest(fs::path(a.out_dir) / "manifest.jsonl", records);
    std::cout << "kept " << pairs.size() << " crops of " << a.crop_px << " px\n";
    return 0;
}

int cmd_train_vae(const ConfigArgs& ca, const std::string& modality, const fs::path& out) {
    const RunConfig cfg = ca.resolved();
    const auto pairs = load_training_pairs(cfg, true);
    AutoencoderConfig arch = cfg.autoencoder.architecture;
    std::vector<Image8> images;
    if (modality == "thermal") {
        arch.channels_in = 1;
        for (const auto& p : pairs) images.push_back(p.thermal);
    } else if (modality == "rgb") {
        arch.channels_in = 3;
        for (const auto& p : pairs) images.push_back(p.rgb);
    } else {
        throw ConfigError("--modality must be thermal or rgb");
    }
    VaeTrainOptions opt;
    opt.batch_size = cfg.vae_training.batch_size;
    opt.steps = cfg.vae_training.steps;
    opt.lr = cfg.vae_training.lr;
    opt.weight_decay = cfg.vae_training.weight_decay;
    opt.seed = cfg.vae_training.seed;
    opt.on_step = [&](std::size_t step, double loss) {
        if (step % 100 == 0 || step == opt.steps) std::cerr << "train-vae step " << step << " loss " << loss << '\n';
    };
    const Autoencoder ae = train_autoencoder(arch, images, opt);
    Checkpoint ckpt = ae.to_checkpoint();
    ckpt.meta["modality"] = modality;
    ckpt.meta["run_config"] = ca.resolved_json();
    save_checkpoint(out, ckpt);
    std::cout << "saved " << modality << " autoencoder to " << out.string() << '\n';
    return 0;
}

int cmd_train_flow(const ConfigArgs& ca) {
    const RunConfig cfg = ca.resolved();
    const nlohmann::json echo = ca.resolved_json();
    const Autoencoder thermal = load_autoencoder(cfg.autoencoder.thermal_checkpoint, "thermal_checkpoint");
    const Autoencoder rgb = load_autoencoder(cfg.autoencoder.rgb_checkpoint, "rgb_checkpoint");
    const std::size_t f = thermal.config().downsample_factor;
    if (rgb.config().downsample_factor != f) throw ConfigError("thermal and RGB autoencoders downsample differently");
    ModelConfig mc = cfg.model;
    if (mc.latent_h != cfg.data.image_size / f || mc.latent_w != cfg.data.image_size / f ||
        mc.latent_channels != thermal.config().latent_channels || mc.rgb_channels != rgb.config().latent_channels) {
        throw ConfigError("model latent shape does not match data.image_size / f and the autoencoder channels");
    }
    auto pairs = load_training_pairs(cfg, !cfg.data.augment);
    for (const auto& p : pairs) {
        if (std::find(cfg.styles.begin(), cfg.styles.end(), p.style_id) == cfg.styles.end()) {
            throw DataError("manifest style '" + p.style_id + "' is not listed in config key 'styles'");
        }
    }
    Rng init_rng = derive_rng(cfg.training.seed, 0);
    VelocityModel model(mc, cfg.styles, init_rng, cfg.training.dropout_prob);
    const BatchProvider batches =
        cfg.data.augment
            ? augmented_batches(std::move(pairs), thermal, rgb, cfg.data.image_size, cfg.training.batch_size,
                                derive_rng(cfg.training.seed, 1))
            : cached_batches(encode_pairs(thermal, rgb, pairs), cfg.training.batch_size, derive_rng(cfg.training.seed, 1));

    const fs::path out(cfg.output_dir);
    fs::create_directories(out);
    write_json(out / "config.json", echo);
    FlowTrainOptions opt;
    opt.training = cfg.training;
    opt.schedule = schedule_by_name(cfg.schedule);
    opt.checkpoint_dir = out / "checkpoints";
    opt.loss_log = out / "loss.csv";
    opt.extra_meta = {{"run_config", echo},
                      {"thermal_checkpoint", cfg.autoencoder.thermal_checkpoint},
                      {"rgb_checkpoint", cfg.autoencoder.rgb_checkpoint},
                      {"image_size", cfg.data.image_size}};
    opt.on_step = [&](std::size_t step, double loss) {
        if (step % 100 == 0 || step == cfg.training.steps) std::cerr << "train-flow step " << step << " loss " << loss << '\n';
    };
    const auto result = train_flow(model, batches, opt);
    fs::copy_file(result.checkpoints.back(), out / "flow.ckpt", fs::copy_options::overwrite_existing);
    std::cout << "saved flow model to " << (out / "flow.ckpt").string() << '\n';
    return 0;
}

struct SampleArgs {
    std::string checkpoint, style, manifest, split = "test", out_dir;
    std::vector<std::string> inputs;
    double cfg_scale = -1.0;
    int steps = 0;
    std::string integrator, schedule;
    std::uint64_t seed = 0;
};

int cmd_sample(const ConfigArgs& ca, const SampleArgs& a) {
    RunConfig cfg = ca.resolved();
    if (!a.schedule.empty()) cfg.schedule = schedule_by_name(a.schedule).name;
    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    const VelocityModel model = VelocityModel::from_checkpoint(ckpt);
    const std::string trained_schedule = ckpt.meta.value("schedule", cfg.schedule);
    if (trained_schedule != cfg.schedule) {
        throw ConfigError("schedule '" + cfg.schedule + "' differs from the checkpoint's training schedule '" +
                          trained_schedule + "'");
    }
    if (a.cfg_scale >= 0.0) cfg.sampler.cfg_scale = a.cfg_scale;
    if (a.steps > 0) cfg.sampler.steps = a.steps;
    if (!a.integrator.empty()) cfg.sampler.integrator = integrator_by_name(a.integrator);
    cfg.sampler.time_grid();
    auto path_or_meta = [&](const std::string& configured, const char* key) {
        return configured.empty() ? ckpt.meta.value(key, std::string()) : configured;
    };
    const Autoencoder thermal = load_autoencoder(path_or_meta(cfg.autoencoder.thermal_checkpoint, "thermal_checkpoint"),
                                                 "thermal_checkpoint");
    const Autoencoder rgb = load_autoencoder(path_or_meta(cfg.autoencoder.rgb_checkpoint, "rgb_checkpoint"),
                                             "rgb_checkpoint");
    model.styles().lookup(a.style);

    std::vector<Image8> images;
    std::vector<std::string> names;
    for (const auto& in : a.inputs) {
        images.push_back(read_png8(in));
        names.push_back(fs::path(in).filename().string());
    }
    if (!a.manifest.empty()) {
        const Manifest m = read_manifest(a.manifest);
        for (const auto& r : m.records) {
            if (r.split != split_by_name(a.split)) continue;
            images.push_back(read_png8(m.resolve(r.rgb_path)));
            names.push_back(fs::path(r.rgb_path).filename().string());
        }
    }
    if (images.empty()) throw DataError("no RGB inputs given");
    const std::size_t f = rgb.config().downsample_factor;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i].channels != 3) throw DataError("input is not an RGB image: " + names[i]);
        if (images[i].height != model.config().latent_h * f || images[i].width != model.config().latent_w * f) {
            throw DimensionError("input " + names[i] + " is " + std::to_string(images[i].height) + "x" +
                                 std::to_string(images[i].width) + "; the model expects " +
                                 std::to_string(model.config().latent_h * f) + "x" +
                                 std::to_string(model.config().latent_w * f));
        }
    }
    const auto out = generate_thermal(model, thermal, rgb, images, a.style, cfg.sampler, a.seed);
    const fs::path dir(a.out_dir);
    fs::create_directories(dir);
    for (std::size_t i = 0; i < out.size(); ++i) write_png(dir / names[i], out[i]);
    std::cout << "wrote " << out.size() << " thermal images to " << dir.string() << '\n';
    return 0;
}

int cmd_eval(const std::string& generated_dir, const std::string& reference_dir, const std::string& manifest,
             const std::string& split, const std::string& extractor, const std::string& out) {
    std::vector<std::pair<Image8, Image8>> pairs;
    const fs::path gen(generated_dir);
    if (!manifest.empty()) {
        const Manifest m = read_manifest(manifest);
        for (const auto& r : m.records) {
            if (r.split != split_by_name(split)) continue;
            const fs::path g = gen / fs::path(r.rgb_path).filename();
            pairs.emplace_back(to_gray(read_png8(g)), to_gray(read_png8(m.resolve(r.thermal_path))));
        }
    } else if (!reference_dir.empty()) {
        std::vector<fs::path> refs;
        for (const auto& e : fs::directory_iterator(reference_dir)) {
            if (e.path().extension() == ".png") refs.push_back(e.path());
        }
        std::sort(refs.begin(), refs.end());
        for (const auto& r : refs) pairs.emplace_back(to_gray(read_png8(gen / r.filename())), to_gray(read_png8(r)));
    } else {
        throw ConfigError("eval needs --reference-dir or --manifest");
    }
    const auto report = metrics::evaluate(pairs, metrics::extractor_by_name(extractor));
    const nlohmann::json j = report.to_json();
    if (!out.empty()) write_json(out, j);
    std::cout << j.dump(2) << '\n';
    return 0;
}

int cmd_styles_list(const std::string& checkpoint) {
    const VelocityModel model = VelocityModel::from_checkpoint(load_checkpoint(checkpoint));
    std::cout << "style_dim " << model.styles().dim() << '\n';
    for (const auto& id : model.styles().ids()) std::cout << id << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"thermalgen: RGB-to-thermal translation with style-conditioned flow matching"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string("thermalgen ") + kVersion + " (config schema " +
                                          std::to_string(kConfigSchemaVersion) + ")");

    auto* synth = app.add_subcommand("synth", "Generate synthetic RGB-thermal pairs with a known style oracle");
    std::vector<std::string> synth_styles_arg{"synthA"};
    std::size_t synth_count = 100, synth_size = 64;
    std::uint64_t synth_seed = 0;
    std::string synth_split = "train", synth_out;
    synth->add_option("--style", synth_styles_arg, "synthA and/or synthB")->capture_default_str();
    synth->add_option("--count", synth_count, "Pairs per style")->capture_default_str();
    synth->add_option("--size", synth_size, "Image side in pixels")->capture_default_str();
    synth->add_option("--seed", synth_seed)->capture_default_str();
    synth->add_option("--split", synth_split)->capture_default_str();
    synth->add_option("--out-dir", synth_out)->required();

    auto* prepare = app.add_subcommand("prepare", "Grid-sample co-registered RGB and thermal maps into pairs");
    PrepareArgs pa;
    prepare->add_option("--rgb-map", pa.rgb_map)->required();
    prepare->add_option("--thermal-map", pa.thermal_map, "8- or 16-bit single-channel PNG")->required();
    prepare->add_option("--invalid-mask", pa.invalid_mask, "PNG, nonzero marks no-data thermal pixels");
    prepare->add_option("--meters-per-pixel", pa.meters_per_pixel)->required();
    prepare->add_option("--stride-m", pa.stride_m)->capture_default_str();
    prepare->add_option("--crop-px", pa.crop_px)->capture_default_str();
    prepare->add_option("--normalize", pa.normalize, "percentile or minmax")->capture_default_str();
    prepare->add_option("--p-lo", pa.p_lo)->capture_default_str();
    prepare->add_option("--p-hi", pa.p_hi)->capture_default_str();
    prepare->add_option("--style", pa.style)->required();
    prepare->add_option("--source", pa.source, "Defaults to the style id");
    prepare->add_option("--split", pa.split)->capture_default_str();
    prepare->add_option("--out-dir", pa.out_dir)->required();

    auto* train_vae = app.add_subcommand("train-vae", "Train the thermal or RGB autoencoder");
    ConfigArgs vae_cfg;
    vae_cfg.attach(train_vae);
    std::string modality = "thermal", vae_out;
    train_vae->add_option("--modality", modality, "thermal or rgb")->capture_default_str();
    train_vae->add_option("--out", vae_out, "Checkpoint path")->required();

    auto* train_flow_cmd = app.add_subcommand("train-flow", "Train the style-conditioned flow model");
    ConfigArgs flow_cfg;
    flow_cfg.attach(train_flow_cmd);

    auto* sample_cmd = app.add_subcommand("sample", "Translate RGB images to thermal");
    ConfigArgs sample_cfg;
    sample_cfg.attach(sample_cmd);
    SampleArgs sa;
    sample_cmd->add_option("--checkpoint", sa.checkpoint, "Flow model checkpoint")->required();
    sample_cmd->add_option("--style", sa.style)->required();
    sample_cmd->add_option("--input", sa.inputs, "RGB PNG files");
    sample_cmd->add_option("--manifest", sa.manifest, "Take inputs from a manifest split instead");
    sample_cmd->add_option("--split", sa.split)->capture_default_str();
    sample_cmd->add_option("--cfg-scale", sa.cfg_scale, "Guidance scale (default: sampler.cfg_scale)");
    sample_cmd->add_option("--steps", sa.steps, "Integration steps (default: sampler.steps)");
    sample_cmd->add_option("--integrator", sa.integrator, "euler or heun (default: sampler.integrator)");
    sample_cmd->add_option("--schedule", sa.schedule, "linear or cosine; must match training (default: schedule)");
    sample_cmd->add_option("--seed", sa.seed)->capture_default_str();
    sample_cmd->add_option("--out-dir", sa.out_dir)->required();

    auto* eval_cmd = app.add_subcommand("eval", "PSNR, SSIM and Frechet distance of generated thermal images");
    std::string gen_dir, ref_dir, eval_manifest, eval_split = "test", extractor = "gray8x8", eval_out;
    eval_cmd->add_option("--generated-dir", gen_dir)->required();
    eval_cmd->add_option("--reference-dir", ref_dir, "Reference PNGs matched by file name");
    eval_cmd->add_option("--manifest", eval_manifest, "Reference thermals from a manifest split");
    eval_cmd->add_option("--split", eval_split)->capture_default_str();
    eval_cmd->add_option("--extractor", extractor)->capture_default_str();
    eval_cmd->add_option("--report,--out", eval_out, "Write the report JSON here as well");

    auto* styles_cmd = app.add_subcommand("styles", "Inspect the style bank of a flow checkpoint");
    styles_cmd->require_subcommand(1);
    auto* styles_list = styles_cmd->add_subcommand("list", "Print the style dimension and registered ids");
    std::string styles_ckpt;
    styles_list->add_option("--checkpoint", styles_ckpt)->required();

    auto* config_cmd = app.add_subcommand("config", "Configuration utilities");
    config_cmd->require_subcommand(1);
    auto* echo = config_cmd->add_subcommand("echo", "Print the fully-resolved configuration");
    ConfigArgs echo_cfg;
    echo_cfg.attach(echo);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*synth) return cmd_synth(synth_styles_arg, synth_count, synth_size, synth_seed, synth_split, synth_out);
        if (*prepare) return cmd_prepare(pa);
        if (*train_vae) return cmd_train_vae(vae_cfg, modality, vae_out);
        if (*train_flow_cmd) return cmd_train_flow(flow_cfg);
        if (*sample_cmd) return cmd_sample(sample_cfg, sa);
        if (*eval_cmd) return cmd_eval(gen_dir, ref_dir, eval_manifest, eval_split, extractor, eval_out);
        if (*styles_list) return cmd_styles_list(styles_ckpt);
        if (*echo) {
            const nlohmann::json j = echo_cfg.resolved_json();
            run_config_from_json(j);
            std::cout << j.dump(2) << '\n';
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
    return 1;
}
