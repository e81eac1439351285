#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "usd/autodiff.hpp"
#include "usd/image.hpp"
#include "usd/nn.hpp"

namespace usd {

/// Interpolate a {c, h1, w1} feature map to the segmenter grid, per channel.
template <typename T>
Tensor<T> resize_to_grid(const Tensor<T>& feat, int h, int w) {
    return resize_bilinear_chw(feat, h, w);
}

/// Global Supplement Module: two parametrically independent 1x1-conv + ReLU
/// maps that carry the text-image-aligned features into the segmenter space,
/// plus masked average pooling for the support prototype.
template <typename T>
struct GsmModule {
    Conv1x1<T> map_support_conv;
    Conv1x1<T> map_query_conv;

    GsmModule() = default;
    GsmModule(ParamStore<T>& ps, int clip_dim, int sam_dim, Rng& rng)
        : map_support_conv(ps, "gsm.map_support", clip_dim, sam_dim, rng),
          map_query_conv(ps, "gsm.map_query", clip_dim, sam_dim, rng) {}

    /// feat is {d1, h*w}, already resized to the segmenter grid.
    typename Tape<T>::Ref map_support(Tape<T>& t, typename Tape<T>::Ref feat) const {
        return t.relu(map_support_conv.forward(t, feat));
    }

    typename Tape<T>::Ref map_query(Tape<T>& t, typename Tape<T>::Ref feat) const {
        return t.relu(map_query_conv.forward(t, feat));
    }
};

/// Per-channel mean over foreground positions (Eq. 3 style); the mask must
/// have at least one foreground cell on the feature grid.
template <typename T>
typename Tape<T>::Ref masked_average_pool(Tape<T>& t, typename Tape<T>::Ref feat, const Tensor<T>& mask01) {
    T cnt = 0;
    for (T v : mask01.data) cnt += (v > T(0.5)) ? T(1) : T(0);
    if (cnt < T(1))
        throw std::runtime_error("masked_average_pool: mask has no foreground on the feature grid (episode invalid)");
    return t.masked_mean_cols(feat, mask01);
}

/// Element-wise mean of per-support prototypes.
template <typename T>
typename Tape<T>::Ref kshot_prototype(Tape<T>& t, const std::vector<typename Tape<T>::Ref>& prototypes) {
    if (prototypes.empty()) throw std::invalid_argument("kshot_prototype: empty list");
    return mean_refs(t, prototypes);
}

}  // namespace usd
