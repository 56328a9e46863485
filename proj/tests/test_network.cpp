#include <cstring>
#include <numeric>

#include <gtest/gtest.h>

#include "grad_check.hpp"
#include "thermalgen/network.hpp"

using namespace thermalgen;

namespace {

ModelConfig small_config(Conditioning cond, std::size_t latent = 8) {
    ModelConfig cfg;
    cfg.latent_h = cfg.latent_w = latent;
    cfg.latent_channels = 4;
    cfg.rgb_channels = 4;
    cfg.patch_size = 2;
    cfg.width = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.conditioning = cond;
    cfg.style_dim = 8;
    cfg.mlp_ratio = 2;
    cfg.time_embed_dim = 16;
    return cfg;
}

void randomize(const ParameterList& params, Rng& rng, double bound = 0.3) {
    for (const auto& [name, t] : params) {
        auto v = const_cast<Tensor&>(t).mutable_values();
        for (double& x : v) x = uniform(rng, -bound, bound);
    }
}

void randomize(SitBlock& blk, Rng& rng) {
    ParameterList params;
    blk.collect("b", params);
    randomize(params, rng);
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(double)) == 0;
}

/// Reorders the token axis of [1, N, W] by `perm` (row i <- row perm[i]).
Tensor permute_tokens(const Tensor& x, const std::vector<std::size_t>& perm) {
    std::vector<Tensor> rows;
    for (std::size_t i : perm) rows.push_back(slice(x, 1, i, 1));
    return concat(rows, 1);
}

const std::vector<Conditioning> kVariants{Conditioning::concat, Conditioning::cross_attn};

}  // namespace

TEST(Patchify, ShapeCases) {
    Rng rng(1);
    EXPECT_EQ(patchify(randn({8, 8, 4}, rng), 2).shape(), (Shape{16, 16}));
    EXPECT_EQ(patchify(randn({8, 8, 4}, rng), 8).shape(), (Shape{1, 256}));
    EXPECT_THROW(patchify(randn({6, 8, 4}, rng), 4), DimensionError);
}

TEST(ModelConfig, Validation) {
    ModelConfig cfg = small_config(Conditioning::concat);
    cfg.patch_size = 3;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = small_config(Conditioning::concat);
    cfg.latent_h = 6;
    cfg.patch_size = 4;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = small_config(Conditioning::concat);
    cfg.heads = 3;
    EXPECT_THROW(cfg.validate(), ConfigError);
    EXPECT_THROW(conditioning_by_name("film"), ConfigError);
    const nlohmann::json j = small_config(Conditioning::cross_attn);
    EXPECT_EQ(j.get<ModelConfig>().conditioning, Conditioning::cross_attn);
}

TEST(ConditionEmbed, DeterministicAndSensitive) {
    Rng rng(2);
    VelocityModel model(small_config(Conditioning::concat), {"a", "b"}, rng);
    const Tensor ya = reshape(model.style_embedding("a"), {1, 8});
    const Tensor yb = reshape(model.style_embedding("b"), {1, 8});
    const Tensor c1 = model.condition_embed({0.3}, ya), c2 = model.condition_embed({0.3}, ya);
    EXPECT_TRUE(bitwise_equal(c1, c2));
    EXPECT_FALSE(bitwise_equal(c1, model.condition_embed({0.3}, yb)));
    EXPECT_FALSE(bitwise_equal(model.condition_embed({0.0}, ya), model.condition_embed({1.0}, ya)));
    EXPECT_THROW(model.condition_embed({0.3}, reshape(model.style_embedding("a"), {8, 1})), DimensionError);
}

TEST(ConditionEmbed, DistinctRandomStylesNeverCollide) {
    Rng rng(3);
    VelocityModel model(small_config(Conditioning::concat), {}, rng);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor a = randn({1, 8}, rng, 0.02), b = randn({1, 8}, rng, 0.02);
        EXPECT_FALSE(bitwise_equal(model.condition_embed({0.5}, a), model.condition_embed({0.5}, b)));
    }
}

TEST(SitBlock, IdentityAtInit) {
    for (bool cross : {false, true}) {
        Rng rng(4);
        const SitBlock blk = SitBlock::init(16, 2, cross, rng);
        const Tensor x = randn({2, 4, 16}, rng), c = randn({2, 16}, rng), r = randn({2, 4, 16}, rng);
        const Tensor y = sit_block(blk, x, c, cross ? &r : nullptr, 2);
        EXPECT_TRUE(bitwise_equal(x, y)) << "cross=" << cross;
    }
}

TEST(SitBlock, OpenGatesChangeOutput) {
    Rng rng(5);
    SitBlock blk = SitBlock::init(16, 2, false, rng);
    // Gates (chunks 2 and 5) at 1, shift and scale at 0; value path copies its input.
    auto bias = blk.ada.b.mutable_values();
    for (std::size_t j : {2u, 5u}) std::fill(bias.begin() + j * 16, bias.begin() + (j + 1) * 16, 1.0);
    auto qkv = blk.qkv.w.mutable_values();
    for (std::size_t i = 0; i < 16; ++i) qkv[i * 48 + 32 + i] = 1.0;
    const Tensor x = randn({1, 4, 16}, rng), c = randn({1, 16}, rng);
    const Tensor y = sit_block(blk, x, c, nullptr, 2);
    double diff = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) diff += std::abs(x[i] - y[i]);
    EXPECT_GT(diff, 1e-3);
}

TEST(SitBlock, TokenPermutationEquivariance) {
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    for (bool cross : {false, true}) {
        Rng rng(6);
        SitBlock blk = SitBlock::init(16, 2, cross, rng);
        randomize(blk, rng);
        const Tensor pos = positional_embedding_2d(2, 2, 16);
        const Tensor x = add(randn({1, 4, 16}, rng), pos), c = randn({1, 16}, rng);
        const Tensor r = add(randn({1, 4, 16}, rng), pos);
        const Tensor y = sit_block(blk, x, c, cross ? &r : nullptr, 2);
        const Tensor rp = permute_tokens(r, perm);
        const Tensor yp = sit_block(blk, permute_tokens(x, perm), c, cross ? &rp : nullptr, 2);
        const Tensor expected = permute_tokens(y, perm);
        for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(yp[i], expected[i], 1e-12);
    }
}

TEST(SitBlock, CrossAttentionRequiresRgbTokens) {
    Rng rng(7);
    const SitBlock cross = SitBlock::init(16, 2, true, rng), plain = SitBlock::init(16, 2, false, rng);
    const Tensor x = randn({1, 4, 16}, rng), c = randn({1, 16}, rng);
    EXPECT_THROW(sit_block(cross, x, c, nullptr, 2), ContractError);
    EXPECT_THROW(sit_block(plain, x, c, &x, 2), ContractError);
}

TEST(VelocityModel, ZeroOutputAtInitAndShapeContract) {
    for (auto cond : kVariants) {
        Rng rng(8);
        VelocityModel model(small_config(cond), {"a"}, rng);
        const Tensor z = randn({2, 8, 8, 4}, rng), zr = randn({2, 8, 8, 4}, rng);
        const Tensor y = batch_styles(model, {"a", kUnconditional});
        const Tensor v = model.forward(z, {0.2, 0.9}, zr, y);
        EXPECT_EQ(v.shape(), z.shape());
        for (double x : v.values()) EXPECT_EQ(x, 0.0);
        randomize(model.network_parameters(), rng);
        EXPECT_EQ(model.forward(z, {0.2, 0.9}, zr, y).shape(), z.shape());
    }
}

TEST(VelocityModel, ShapeErrors) {
    Rng rng(9);
    VelocityModel model(small_config(Conditioning::concat), {"a"}, rng);
    const Tensor y = batch_styles(model, {"a"});
    EXPECT_THROW(model.forward(randn({1, 8, 8, 4}, rng), {0.5}, randn({1, 4, 4, 4}, rng), y), DimensionError);
    EXPECT_THROW(model.forward(randn({1, 8, 8, 3}, rng), {0.5}, randn({1, 8, 8, 4}, rng), y), DimensionError);
    EXPECT_THROW(model.forward(randn({1, 8, 8, 4}, rng), {0.5, 0.1}, randn({1, 8, 8, 4}, rng), y), DimensionError);
}

TEST(VelocityModel, StyleSensitivityOnceTrained) {
    Rng rng(10);
    VelocityModel model(small_config(Conditioning::cross_attn), {"a", "b"}, rng);
    randomize(model.network_parameters(), rng);
    const Tensor z = randn({1, 8, 8, 4}, rng), zr = randn({1, 8, 8, 4}, rng);
    const Tensor va = model.forward(z, {0.5}, zr, batch_styles(model, {"a"}));
    const Tensor vb = model.forward(z, {0.5}, zr, batch_styles(model, {"b"}));
    EXPECT_FALSE(bitwise_equal(va, vb));
}

TEST(VelocityModel, FlowLossGradientMatchesFiniteDifferences) {
    for (auto cond : kVariants) {
        ModelConfig cfg = small_config(cond, 4);
        cfg.latent_channels = cfg.rgb_channels = 2;
        cfg.width = 8;
        cfg.style_dim = 4;
        cfg.time_embed_dim = 8;
        Rng rng(11);
        VelocityModel model(cfg, {"a"}, rng);
        randomize(model.network_parameters(), rng);
        const Tensor z0 = randn({2, 4, 4, 2}, rng), zr = randn({2, 4, 4, 2}, rng), eps = randn({2, 4, 4, 2}, rng);
        const ParameterList params = model.parameters();
        auto loss = [&] {
            const FlowBatch batch{z0, zr, batch_styles(model, {"a", kUnconditional})};
            return flow_matching_loss_at(model, batch, {0.3, 0.8}, eps, linear_schedule());
        };
        EXPECT_LT(thermalgen::testing::max_gradient_error(loss, tensors_of(params)), 1e-4) << conditioning_name(cond);
    }
}

TEST(VelocityModel, ParameterCountMatchesLayerArithmetic) {
    for (auto cond : kVariants) {
        const ModelConfig cfg = small_config(cond);
        const std::size_t w = cfg.width, p2 = cfg.patch_size * cfg.patch_size, m = cfg.mlp_ratio * w;
        const bool cross = cond == Conditioning::cross_attn;
        auto lin = [](std::size_t in, std::size_t out) { return in * out + out; };
        std::size_t expected = lin(p2 * (cross ? cfg.latent_channels : cfg.latent_channels + cfg.rgb_channels), w);
        if (cross) expected += lin(p2 * cfg.rgb_channels, w);
        expected += lin(cfg.time_embed_dim, w) + lin(w, w) + lin(cfg.style_dim, w);
        std::size_t block = lin(w, (cross ? 9 : 6) * w) + lin(w, 3 * w) + lin(w, w) + lin(w, m) + lin(m, w);
        if (cross) block += lin(w, w) + lin(w, 2 * w) + lin(w, w);
        expected += cfg.depth * block + lin(w, 2 * w) + lin(w, p2 * cfg.latent_channels);
        Rng r1(1), r2(99);
        const VelocityModel a(cfg, {"a"}, r1), b(cfg, {"a", "b", "c"}, r2);
        EXPECT_EQ(a.parameter_count(), expected);
        EXPECT_EQ(b.parameter_count(), expected);
    }
}

TEST(VelocityModel, CheckpointRoundTripReproducesOutputs) {
    Rng rng(12);
    VelocityModel model(small_config(Conditioning::concat), {"a"}, rng);
    randomize(model.network_parameters(), rng);
    const VelocityModel restored = VelocityModel::from_checkpoint(model.to_checkpoint());
    const Tensor z = randn({1, 8, 8, 4}, rng), zr = randn({1, 8, 8, 4}, rng);
    EXPECT_TRUE(bitwise_equal(model.forward(z, {0.4}, zr, batch_styles(model, {"a"})),
                              restored.forward(z, {0.4}, zr, batch_styles(restored, {"a"}))));
    Checkpoint wrong = model.to_checkpoint();
    wrong.meta["kind"] = "autoencoder";
    EXPECT_THROW(VelocityModel::from_checkpoint(wrong), DataError);
}
