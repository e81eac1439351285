#pragma once

#include <png.h>

#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "usd/image.hpp"

namespace usd {

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void write_png(const std::string& path, const std::vector<unsigned char>& bytes, int w, int h, int channels) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("png: cannot open for write: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info) throw std::runtime_error("png: init failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("png: write failed: " + path);
    }
    png_init_io(png, fp.get());
    // fixed settings keep outputs byte-identical across runs
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, w, h, 8,
                 channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(h);
    for (int i = 0; i < h; ++i)
        rows[i] = const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(i) * w * channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline std::vector<unsigned char> read_png(const std::string& path, int& w, int& h, int& channels) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw std::runtime_error("png: cannot open: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info) throw std::runtime_error("png: init failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("png: read failed: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    png_uint_32 pw, ph;
    int bit_depth, color_type;
    png_get_IHDR(png, info, &pw, &ph, &bit_depth, &color_type, nullptr, nullptr, nullptr);
    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    color_type = png_get_color_type(png, info);
    channels = (color_type == PNG_COLOR_TYPE_GRAY) ? 1 : 3;
    w = static_cast<int>(pw);
    h = static_cast<int>(ph);
    std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h * channels);
    std::vector<png_bytep> rows(h);
    for (int i = 0; i < h; ++i)
        rows[i] = bytes.data() + static_cast<std::size_t>(i) * w * channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return bytes;
}

}  // namespace detail

inline void save_image_png(const std::string& path, const Image& img) {
    const int h = img.height(), w = img.width();
    std::vector<unsigned char> bytes(static_cast<std::size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                float v = img.pixels.at3(c, y, x);
                bytes[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
            }
    detail::write_png(path, bytes, w, h, 3);
}

inline Image load_image_png(const std::string& path) {
    int w, h, ch;
    auto bytes = detail::read_png(path, w, h, ch);
    Image img = Image::blank(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                unsigned char b = ch == 1 ? bytes[static_cast<std::size_t>(y) * w + x]
                                          : bytes[(static_cast<std::size_t>(y) * w + x) * 3 + c];
                img.pixels.at3(c, y, x) = static_cast<float>(b) / 255.0f;
            }
    return img;
}

inline void save_mask_png(const std::string& path, const BinaryMask& m) {
    const int h = m.height(), w = m.width();
    std::vector<unsigned char> bytes(static_cast<std::size_t>(h) * w);
    for (std::int64_t i = 0; i < m.pixels.size(); ++i) bytes[i] = m.pixels[i] ? 255 : 0;
    detail::write_png(path, bytes, w, h, 1);
}

/// Masks on disk are strictly 0/255 grayscale; anything else is rejected.
inline BinaryMask load_mask_png(const std::string& path) {
    int w, h, ch;
    auto bytes = detail::read_png(path, w, h, ch);
    if (ch != 1) throw std::runtime_error("mask png is not single-channel: " + path);
    BinaryMask m = BinaryMask::blank(h, w);
    for (std::int64_t i = 0; i < m.pixels.size(); ++i) {
        unsigned char b = bytes[i];
        if (b != 0 && b != 255)
            throw std::runtime_error("mask png has non-binary value " + std::to_string(b) + ": " + path);
        m.pixels[i] = b ? 1 : 0;
    }
    return m;
}

/// Grayscale dump of a [0,1] map (used for guidance visualizations).
template <typename T>
void save_gray_png(const std::string& path, const Tensor<T>& map) {
    const int h = map.shape[0], w = map.shape[1];
    std::vector<unsigned char> bytes(static_cast<std::size_t>(h) * w);
    for (std::int64_t i = 0; i < map.size(); ++i) {
        double v = std::clamp(static_cast<double>(map[i]), 0.0, 1.0);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    detail::write_png(path, bytes, w, h, 1);
}

}  // namespace usd
