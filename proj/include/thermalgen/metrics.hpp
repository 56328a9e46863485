#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "thermalgen/data.hpp"
#include "thermalgen/image.hpp"

namespace thermalgen::metrics {

inline void check_same_geometry(const Image8& a, const Image8& b, const char* what) {
    if (!a.same_geometry(b)) {
        throw DimensionError(std::string(what) + ": image shapes differ (" + std::to_string(a.height) + "x" +
                             std::to_string(a.width) + "x" + std::to_string(a.channels) + " vs " +
                             std::to_string(b.height) + "x" + std::to_string(b.width) + "x" +
                             std::to_string(b.channels) + ")");
    }
}

/// Peak signal-to-noise ratio in dB for 8-bit images; +infinity when identical.
inline double psnr(const Image8& a, const Image8& b) {
    check_same_geometry(a, b, "psnr");
    double se = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        se += d * d;
    }
    if (se == 0.0) return std::numeric_limits<double>::infinity();
    const double mse = se / static_cast<double>(a.data.size());
    return 20.0 * std::log10(255.0 / std::sqrt(mse));
}

struct SsimOptions {
    std::size_t window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 255.0;
};

/// Mean SSIM over all fully-contained Gaussian windows of a single-channel
/// image pair (RGB inputs are converted to luminance first).
inline double ssim(const Image8& a_in, const Image8& b_in, const SsimOptions& opt = {}) {
    check_same_geometry(a_in, b_in, "ssim");
    const Image8 a = to_gray(a_in);
    const Image8 b = to_gray(b_in);
    const std::size_t win = opt.window;
    if (a.height < win || a.width < win) {
        throw DimensionError("ssim needs images of at least " + std::to_string(win) + "x" + std::to_string(win));
    }
    std::vector<double> kernel(win * win);
    double ksum = 0.0;
    const double c = static_cast<double>(win - 1) / 2.0;
    for (std::size_t y = 0; y < win; ++y)
        for (std::size_t x = 0; x < win; ++x) {
            const double dy = static_cast<double>(y) - c, dx = static_cast<double>(x) - c;
            ksum += kernel[y * win + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * opt.sigma * opt.sigma));
        }
    for (double& k : kernel) k /= ksum;

    const double c1 = (opt.k1 * opt.dynamic_range) * (opt.k1 * opt.dynamic_range);
    const double c2 = (opt.k2 * opt.dynamic_range) * (opt.k2 * opt.dynamic_range);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t y0 = 0; y0 + win <= a.height; ++y0) {
        for (std::size_t x0 = 0; x0 + win <= a.width; ++x0) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (std::size_t y = 0; y < win; ++y)
                for (std::size_t x = 0; x < win; ++x) {
                    const double k = kernel[y * win + x];
                    const double va = a.at(y0 + y, x0 + x), vb = b.at(y0 + y, x0 + x);
                    ma += k * va;
                    mb += k * vb;
                    saa += k * va * va;
                    sbb += k * vb * vb;
                    sab += k * va * vb;
                }
            const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

/// Mean and covariance of a feature distribution.
struct GaussianStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;  // unbiased (N - 1)
    std::size_t count = 0;
};

/// Streaming (Welford) accumulator for GaussianStats.
class StatsAccumulator {
public:
    explicit StatsAccumulator(std::size_t dim) : mean_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim))),
                                                 m2_(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim),
                                                                           static_cast<Eigen::Index>(dim))) {}

    void add(const std::vector<double>& feature) {
        if (feature.size() != static_cast<std::size_t>(mean_.size())) throw DimensionError("feature dimension mismatch");
        const Eigen::Map<const Eigen::VectorXd> x(feature.data(), mean_.size());
        ++count_;
        const Eigen::VectorXd delta = x - mean_;
        mean_ += delta / static_cast<double>(count_);
        m2_.noalias() += delta * (x - mean_).transpose();
    }

    GaussianStats stats() const {
        if (count_ < 2) throw DataError("covariance needs at least two samples");
        Eigen::MatrixXd cov = m2_ / static_cast<double>(count_ - 1);
        cov = 0.5 * (cov + cov.transpose());
        return {mean_, cov, count_};
    }

    std::size_t count() const noexcept { return count_; }

private:
    Eigen::VectorXd mean_;
    Eigen::MatrixXd m2_;
    std::size_t count_ = 0;
};

inline constexpr double kEigenvalueTolerance = 1e-8;

namespace detail {
inline Eigen::VectorXd clamped_eigenvalues(const Eigen::VectorXd& ev, const char* what) {
    Eigen::VectorXd out = ev;
    for (Eigen::Index i = 0; i < out.size(); ++i) {
        if (out[i] < -kEigenvalueTolerance) {
            throw NumericalError(std::string(what) + " has eigenvalue " + std::to_string(out[i]) +
                                 " below tolerance");
        }
        if (out[i] < 0.0) out[i] = 0.0;
    }
    return out;
}
}  // namespace detail

/// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), with the trace of the
/// square root taken from the eigenvalues of S1^{1/2} S2 S1^{1/2}.
inline double frechet_distance(const GaussianStats& s1, const GaussianStats& s2) {
    if (s1.mean.size() != s2.mean.size() || s1.covariance.rows() != s2.covariance.rows()) {
        throw DimensionError("frechet_distance: feature dimensions differ");
    }
    if (s1.count < 2 || s2.count < 2) throw DataError("frechet_distance needs counts >= 2");
    const Eigen::VectorXd diff = s1.mean - s2.mean;

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig1(s1.covariance);
    const Eigen::VectorXd l1 = detail::clamped_eigenvalues(eig1.eigenvalues(), "covariance");
    const Eigen::MatrixXd sqrt1 = eig1.eigenvectors() * l1.cwiseSqrt().asDiagonal() * eig1.eigenvectors().transpose();
    Eigen::MatrixXd inner = sqrt1 * s2.covariance * sqrt1;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig2(inner, Eigen::EigenvaluesOnly);
    const Eigen::VectorXd l2 = detail::clamped_eigenvalues(eig2.eigenvalues(), "covariance product");

    const double value = diff.squaredNorm() + s1.covariance.trace() + s2.covariance.trace() - 2.0 * l2.cwiseSqrt().sum();
    return std::max(value, 0.0);
}

/// Pure, deterministic image -> feature-vector map.
struct FeatureExtractor {
    std::string name;
    std::size_t dim = 0;
    std::function<std::vector<double>(const Image8&)> extract;
};

/// Grayscale bilinear downsample to 8x8, flattened, scaled to [0, 1].
/// A network-free stand-in: its distances are not comparable to Inception FID.
inline FeatureExtractor gray8x8_extractor() {
    return {"gray8x8", 64, [](const Image8& img) {
                const Image8 small = resize_bilinear(to_gray(img), 8, 8);
                std::vector<double> f(64);
                for (std::size_t i = 0; i < 64; ++i) f[i] = small.data[i] / 255.0;
                return f;
            }};
}

inline FeatureExtractor extractor_by_name(const std::string& name) {
    if (name == "gray8x8") return gray8x8_extractor();
    throw ConfigError("unknown feature extractor '" + name + "' (available: gray8x8)");
}

struct Report {
    double psnr_db = 0.0;  // +inf when every pair is identical
    double ssim = 0.0;
    std::optional<double> frechet;  // absent with fewer than two pairs
    std::string extractor;
    std::size_t n_pairs = 0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["psnr_db"] = std::isinf(psnr_db) ? nlohmann::json("inf") : nlohmann::json(psnr_db);
        j["ssim"] = ssim;
        j["frechet"] = frechet ? nlohmann::json(*frechet) : nlohmann::json(nullptr);
        j["extractor"] = extractor;
        j["n_pairs"] = n_pairs;
        j["lpips"] = nullptr;
        return j;
    }
};

/// Per-pair PSNR/SSIM means and the Frechet distance between the feature
/// distributions of the generated and reference sets.
inline Report evaluate(const std::vector<std::pair<Image8, Image8>>& pairs, const FeatureExtractor& extractor) {
    if (pairs.empty()) throw DataError("evaluate needs at least one (generated, reference) pair");
    StatsAccumulator gen(extractor.dim), ref(extractor.dim);
    double psnr_sum = 0.0, ssim_sum = 0.0;
    for (const auto& [g, r] : pairs) {
        psnr_sum += psnr(g, r);
        ssim_sum += ssim(g, r);
        gen.add(extractor.extract(g));
        ref.add(extractor.extract(r));
    }
    Report rep;
    const auto n = static_cast<double>(pairs.size());
    rep.psnr_db = psnr_sum / n;
    rep.ssim = ssim_sum / n;
    if (pairs.size() >= 2) rep.frechet = frechet_distance(gen.stats(), ref.stats());
    rep.extractor = extractor.name;
    rep.n_pairs = pairs.size();
    return rep;
}

}  // namespace thermalgen::metrics
