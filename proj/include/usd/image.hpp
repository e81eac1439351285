#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "usd/tensor.hpp"

namespace usd {

/// RGB image, pixels in [0,1], stored {3, h, w}.
struct Image {
    Tensor<float> pixels;

    int height() const { return pixels.shape[1]; }
    int width() const { return pixels.shape[2]; }

    static Image blank(int h, int w) { return Image{Tensor<float>({3, h, w})}; }

    void validate() const {
        if (pixels.ndim() != 3 || pixels.shape[0] != 3) throw std::invalid_argument("image: expected {3,h,w}");
        for (float v : pixels.data)
            if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("image: pixel out of [0,1]");
    }
};

/// Binary mask paired with an Image, values {0,1}, stored {h, w}.
struct BinaryMask {
    Tensor<std::uint8_t> pixels;

    int height() const { return pixels.shape[0]; }
    int width() const { return pixels.shape[1]; }

    static BinaryMask blank(int h, int w) { return BinaryMask{Tensor<std::uint8_t>({h, w})}; }

    std::int64_t foreground_count() const {
        std::int64_t n = 0;
        for (auto v : pixels.data) n += v;
        return n;
    }

    void validate() const {
        if (pixels.ndim() != 2) throw std::invalid_argument("mask: expected {h,w}");
        for (auto v : pixels.data)
            if (v > 1) throw std::invalid_argument("mask: non-binary value");
    }
};

/// Bilinear resize of a {h, w} map, align-corners-off sampling.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& in, int H, int W) {
    if (in.ndim() != 2) throw std::invalid_argument("resize_bilinear: expected 2-D");
    const int h = in.shape[0], w = in.shape[1];
    Tensor<T> out({H, W});
    for (int i = 0; i < H; ++i) {
        double sy = (i + 0.5) * static_cast<double>(h) / H - 0.5;
        int y0 = static_cast<int>(std::floor(sy));
        double fy = sy - y0;
        int y0c = std::clamp(y0, 0, h - 1), y1c = std::clamp(y0 + 1, 0, h - 1);
        for (int j = 0; j < W; ++j) {
            double sx = (j + 0.5) * static_cast<double>(w) / W - 0.5;
            int x0 = static_cast<int>(std::floor(sx));
            double fx = sx - x0;
            int x0c = std::clamp(x0, 0, w - 1), x1c = std::clamp(x0 + 1, 0, w - 1);
            double v = (1 - fy) * (1 - fx) * in.at2(y0c, x0c) + (1 - fy) * fx * in.at2(y0c, x1c) +
                       fy * (1 - fx) * in.at2(y1c, x0c) + fy * fx * in.at2(y1c, x1c);
            out.at2(i, j) = static_cast<T>(v);
        }
    }
    return out;
}

/// Channel-wise bilinear resize of a {c, h, w} feature map.
template <typename T>
Tensor<T> resize_bilinear_chw(const Tensor<T>& in, int H, int W) {
    if (in.ndim() != 3) throw std::invalid_argument("resize_bilinear_chw: expected 3-D");
    const int c = in.shape[0], h = in.shape[1], w = in.shape[2];
    Tensor<T> out({c, H, W});
    for (int ch = 0; ch < c; ++ch) {
        Tensor<T> plane({h, w});
        std::copy(in.data.begin() + static_cast<std::size_t>(ch) * h * w,
                  in.data.begin() + static_cast<std::size_t>(ch + 1) * h * w, plane.data.begin());
        Tensor<T> r = resize_bilinear(plane, H, W);
        std::copy(r.data.begin(), r.data.end(), out.data.begin() + static_cast<std::size_t>(ch) * H * W);
    }
    return out;
}

/// Nearest-neighbor resize of a {h, w} map (used for masks).
template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& in, int H, int W) {
    if (in.ndim() != 2) throw std::invalid_argument("resize_nearest: expected 2-D");
    const int h = in.shape[0], w = in.shape[1];
    Tensor<T> out({H, W});
    for (int i = 0; i < H; ++i) {
        int sy = std::clamp(static_cast<int>(std::floor((i + 0.5) * static_cast<double>(h) / H)), 0, h - 1);
        for (int j = 0; j < W; ++j) {
            int sx = std::clamp(static_cast<int>(std::floor((j + 0.5) * static_cast<double>(w) / W)), 0, w - 1);
            out.at2(i, j) = in.at2(sy, sx);
        }
    }
    return out;
}

/// Mask resampled to a feature grid: nearest-neighbor, then >0.5 threshold,
/// returned as T-valued 0/1 of length h*w (row-major).
template <typename T>
Tensor<T> mask_to_grid(const BinaryMask& m, int H, int W) {
    Tensor<T> f({m.height(), m.width()});
    for (std::int64_t i = 0; i < f.size(); ++i) f[i] = static_cast<T>(m.pixels[i]);
    Tensor<T> r = resize_nearest(f, H, W);
    Tensor<T> out({H * W});
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = r[i] > T(0.5) ? T(1) : T(0);
    return out;
}

}  // namespace usd
