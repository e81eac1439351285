#pragma once

#include <stdexcept>

#include "usd/autodiff.hpp"
#include "usd/encoders.hpp"
#include "usd/image.hpp"

namespace usd {

template <typename T>
struct PredictionPair {
    typename Tape<T>::Ref p_clip;
    typename Tape<T>::Ref p_sam;
};

/// Two frozen decodes: the clip path decodes the enhanced feature alone, the
/// sam path decodes the compensated feature F_q_sam + F_q_fin. Both receive
/// the same point prompts; token refs may be -1 (prompt-token-free decode).
template <typename T>
PredictionPair<T> decode_pair(Tape<T>& t, const SamMaskDecoder<T>& dec, typename Tape<T>::Ref f_q_fin,
                              typename Tape<T>::Ref f_q_sam, typename Tape<T>::Ref q_clip,
                              typename Tape<T>::Ref q_sam, const PointPrompts& points) {
    auto p_clip = t.sigmoid(dec.decode(t, f_q_fin, q_clip, points));
    auto f_comp = t.add(f_q_sam, f_q_fin);
    auto p_sam = t.sigmoid(dec.decode(t, f_comp, q_sam, points));
    return {p_clip, p_sam};
}

/// P = α P_sam + (1-α) P_clip; the extremes reproduce the single paths bit-exactly.
template <typename T>
typename Tape<T>::Ref fuse(Tape<T>& t, const PredictionPair<T>& pair, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("fuse: alpha out of [0,1]");
    return t.add(t.scale(pair.p_sam, alpha), t.scale(pair.p_clip, 1.0 - alpha));
}

template <typename T>
typename Tape<T>::Ref prediction_loss(Tape<T>& t, typename Tape<T>::Ref p, const Tensor<T>& query_mask) {
    return t.bce_mean(p, query_mask, 1e-6);
}

template <typename T>
typename Tape<T>::Ref total_loss(Tape<T>& t, typename Tape<T>::Ref loss_ref, typename Tape<T>::Ref loss_pred,
                                 double beta) {
    if (!(beta >= 0.0)) throw std::invalid_argument("total_loss: beta must be >= 0");
    return t.add(loss_ref, t.scale(loss_pred, beta));
}

/// Pixel >= threshold -> 1.
template <typename T>
BinaryMask binarize(const Tensor<T>& p, double threshold = 0.5) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("binarize: threshold out of (0,1)");
    BinaryMask m = BinaryMask::blank(p.shape[0], p.shape[1]);
    for (std::int64_t i = 0; i < p.size(); ++i)
        m.pixels[i] = static_cast<double>(p[i]) >= threshold ? 1 : 0;
    return m;
}

}  // namespace usd
