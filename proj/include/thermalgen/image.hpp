#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "thermalgen/tensor.hpp"

namespace thermalgen {

/// Interleaved row-major raster (H x W x C).
template <class T>
struct Raster {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 1;
    std::vector<T> data;

    Raster() = default;
    Raster(std::size_t h, std::size_t w, std::size_t c, T fill = T{})
        : height(h), width(w), channels(c), data(h * w * c, fill) {}

    T& at(std::size_t y, std::size_t x, std::size_t c = 0) { return data[(y * width + x) * channels + c]; }
    const T& at(std::size_t y, std::size_t x, std::size_t c = 0) const {
        return data[(y * width + x) * channels + c];
    }
    bool empty() const noexcept { return data.empty(); }
    bool same_geometry(const Raster& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
    bool operator==(const Raster&) const = default;

    /// Copy of the window [y0, y0 + h) x [x0, x0 + w).
    Raster crop(std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) const {
        Raster out(h, w, channels);
        for (std::size_t y = 0; y < h; ++y) {
            std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(((y0 + y) * width + x0) * channels), w * channels,
                        out.data.begin() + static_cast<std::ptrdiff_t>(y * w * channels));
        }
        return out;
    }
};

using Image8 = Raster<std::uint8_t>;
using Image16 = Raster<std::uint16_t>;

inline std::uint8_t luminance(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    return static_cast<std::uint8_t>(std::lround(0.299 * r + 0.587 * g + 0.114 * b));
}

inline Image8 to_gray(const Image8& img) {
    if (img.channels == 1) return img;
    Image8 out(img.height, img.width, 1);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) out.at(y, x) = luminance(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
    return out;
}

/// Stacks same-sized images into [B, H, W, C] with pixels mapped to [-1, 1].
inline Tensor images_to_tensor(const std::vector<const Image8*>& images) {
    if (images.empty()) throw DimensionError("no images to stack");
    const Image8& ref = *images.front();
    Buffer v;
    v.reserve(images.size() * ref.data.size());
    for (const Image8* img : images) {
        if (!img->same_geometry(ref)) throw DimensionError("images in a batch must share dimensions");
        for (std::uint8_t p : img->data) v.push_back(static_cast<double>(p) / 127.5 - 1.0);
    }
    return Tensor({images.size(), ref.height, ref.width, ref.channels}, std::move(v));
}

/// Inverse of images_to_tensor with rounding and clipping to [0, 255].
inline std::vector<Image8> tensor_to_images(const Tensor& t) {
    if (t.rank() != 4) throw DimensionError("expected [B, H, W, C] tensor");
    std::vector<Image8> out;
    const std::size_t per = t.numel() / t.dim(0);
    for (std::size_t b = 0; b < t.dim(0); ++b) {
        Image8 img(t.dim(1), t.dim(2), t.dim(3));
        for (std::size_t i = 0; i < per; ++i) {
            const double v = std::round((t[b * per + i] + 1.0) * 127.5);
            img.data[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
        }
        out.push_back(std::move(img));
    }
    return out;
}

namespace detail {

struct PngFile {
    std::FILE* fp = nullptr;
    explicit PngFile(const std::filesystem::path& path, const char* mode) : fp(std::fopen(path.c_str(), mode)) {}
    ~PngFile() {
        if (fp) std::fclose(fp);
    }
    PngFile(const PngFile&) = delete;
    PngFile& operator=(const PngFile&) = delete;
};

struct PngDecoded {
    std::size_t height = 0, width = 0, channels = 0, depth = 0;
    std::vector<std::uint16_t> samples;
};

inline PngDecoded read_png_raw(const std::filesystem::path& path) {
    PngFile file(path, "rb");
    if (!file.fp) throw IoError("cannot open image " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialisation failed");
    }
    PngDecoded out;
    std::vector<png_bytep> rows;
    std::vector<png_byte> buffer;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("cannot decode PNG " + path.string());
    }
    png_init_io(png, file.fp);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (depth == 16) png_set_swap(png);  // host (little-endian) order for 16-bit samples
    png_read_update_info(png, info);
    out.height = png_get_image_height(png, info);
    out.width = png_get_image_width(png, info);
    out.channels = png_get_channels(png, info);
    out.depth = png_get_bit_depth(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    buffer.resize(rowbytes * out.height);
    rows.resize(out.height);
    for (std::size_t y = 0; y < out.height; ++y) rows[y] = buffer.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    const std::size_t n = out.height * out.width * out.channels;
    out.samples.resize(n);
    if (out.depth == 16) {
        for (std::size_t i = 0; i < n; ++i) {
            out.samples[i] = static_cast<std::uint16_t>(buffer[2 * i] | (buffer[2 * i + 1] << 8));
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) out.samples[i] = buffer[i];
    }
    return out;
}

inline void write_png_raw(const std::filesystem::path& path, std::size_t h, std::size_t w, std::size_t c, int depth,
                          const std::vector<png_byte>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    PngFile file(path, "wb");
    if (!file.fp) throw IoError("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialisation failed");
    }
    std::vector<png_bytep> rows(h);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed writing PNG " + path.string());
    }
    png_init_io(png, file.fp);
    const int color = c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), depth, color,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 6);
    png_write_info(png, info);
    const std::size_t rowbytes = w * c * static_cast<std::size_t>(depth / 8);
    for (std::size_t y = 0; y < h; ++y) rows[y] = const_cast<png_bytep>(bytes.data() + y * rowbytes);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace detail

/// Reads an 8-bit grayscale or RGB PNG (alpha stripped). 16-bit input is
/// rejected; use read_png16 for raw thermal rasters.
inline Image8 read_png8(const std::filesystem::path& path) {
    auto raw = detail::read_png_raw(path);
    if (raw.depth != 8) throw DataError("expected an 8-bit PNG: " + path.string());
    Image8 img(raw.height, raw.width, raw.channels);
    for (std::size_t i = 0; i < raw.samples.size(); ++i) img.data[i] = static_cast<std::uint8_t>(raw.samples[i]);
    return img;
}

/// Reads a single-channel PNG of 8 or 16 bits into a 16-bit raster.
inline Image16 read_png16(const std::filesystem::path& path) {
    auto raw = detail::read_png_raw(path);
    if (raw.channels != 1) throw DataError("expected a single-channel PNG: " + path.string());
    Image16 img(raw.height, raw.width, 1);
    img.data = std::move(raw.samples);
    return img;
}

inline void write_png(const std::filesystem::path& path, const Image8& img) {
    if (img.channels != 1 && img.channels != 3) throw DataError("PNG output supports 1 or 3 channels");
    detail::write_png_raw(path, img.height, img.width, img.channels, 8,
                          std::vector<png_byte>(img.data.begin(), img.data.end()));
}

inline void write_png16(const std::filesystem::path& path, const Image16& img) {
    if (img.channels != 1) throw DataError("16-bit PNG output supports 1 channel");
    std::vector<png_byte> bytes;
    bytes.reserve(img.data.size() * 2);
    for (std::uint16_t v : img.data) {
        bytes.push_back(static_cast<png_byte>(v >> 8));
        bytes.push_back(static_cast<png_byte>(v & 0xff));
    }
    detail::write_png_raw(path, img.height, img.width, 1, 16, bytes);
}

}  // namespace thermalgen
