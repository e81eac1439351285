#pragma once

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "usd/autodiff.hpp"
#include "usd/encoders.hpp"
#include "usd/image.hpp"
#include "usd/nn.hpp"
#include "usd/rng.hpp"

namespace usd {

// ---------------------------------------------------------------------------
// fixed local guidance (no learnables)
// ---------------------------------------------------------------------------

template <typename T>
struct SimilarityRefs {
    typename Tape<T>::Ref s_fg, s_bg;
};

/// Softmax over the two temperature-scaled cosine similarities (foreground /
/// background text embeddings). s_fg + s_bg = 1.
template <typename T>
SimilarityRefs<T> similarity_scores(Tape<T>& t, typename Tape<T>::Ref v, const Tensor<T>& text_fg,
                                    const Tensor<T>& text_bg, double tau) {
    if (!(tau > 0)) throw std::invalid_argument("similarity_scores: tau must be positive");
    auto cf = t.cosine_to_const(v, text_fg);
    auto cb = t.cosine_to_const(v, text_bg);
    auto logits = t.reshape(t.scale(t.stack_scalars({cf, cb}), 1.0 / tau), {1, 2});
    auto sm = t.softmax_rows(logits);
    return {t.take(sm, 0), t.take(sm, 1)};
}

template <typename T>
struct GuidanceMapResult {
    Tensor<T> map;  // {h, w}, min-max normalized to [0,1]
    bool degenerate = false;
};

/// Softmax-GradCAM weighting: channel weights are the spatial means of the
/// score gradient, the raw map is the rectified weighted feature sum, min-max
/// normalized. An all-zero raw map is returned as zeros with a flag.
template <typename T>
GuidanceMapResult<T> gradcam_guidance(const Tensor<T>& patch_feats, const Tensor<T>& grad) {
    if (patch_feats.shape != grad.shape || patch_feats.ndim() != 3)
        throw std::invalid_argument("gradcam_guidance: shape mismatch");
    const int d = patch_feats.shape[0], h = patch_feats.shape[1], w = patch_feats.shape[2];
    std::vector<T> weights(d, T(0));
    for (int c = 0; c < d; ++c) {
        T s = 0;
        for (int i = 0; i < h * w; ++i) s += grad.data[static_cast<std::size_t>(c) * h * w + i];
        weights[c] = s / static_cast<T>(h * w);
    }
    Tensor<T> raw({h, w});
    for (int i = 0; i < h * w; ++i) {
        T s = 0;
        for (int c = 0; c < d; ++c) s += weights[c] * patch_feats.data[static_cast<std::size_t>(c) * h * w + i];
        raw[i] = std::max(s, T(0));
    }
    const T mx = raw.max_value();
    if (!(mx > T(0))) return {Tensor<T>::zeros({h, w}), true};
    const T mn = raw.min_value();
    for (auto& v : raw.data) v = (v - mn) / (mx - mn + static_cast<T>(1e-12));
    return {std::move(raw), false};
}

template <typename T>
struct BoxMaskResult {
    Tensor<T> mask;  // {h, w}, 0/1, foreground is one filled rectangle
    bool fallback = false;
};

/// Tight axis-aligned bounding box of {guidance >= threshold}; an empty set
/// falls back to an all-ones box with a flag.
template <typename T>
BoxMaskResult<T> box_from_guidance(const Tensor<T>& g, double threshold) {
    const int h = g.shape[0], w = g.shape[1];
    int r0 = h, r1 = -1, c0 = w, c1 = -1;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            if (static_cast<double>(g.at2(i, j)) >= threshold) {
                r0 = std::min(r0, i);
                r1 = std::max(r1, i);
                c0 = std::min(c0, j);
                c1 = std::max(c1, j);
            }
    if (r1 < 0) return {Tensor<T>::full({h, w}, T(1)), true};
    Tensor<T> box({h, w});
    for (int i = r0; i <= r1; ++i)
        for (int j = c0; j <= c1; ++j) box.at2(i, j) = T(1);
    return {std::move(box), false};
}

/// Pseudo label for the refinement loss: zero off the query mask, otherwise
/// the part of the mask the initial guidance missed, clamped to [0,1].
template <typename T>
Tensor<T> missed_foreground(const Tensor<T>& mask_grid, const Tensor<T>& g_ini) {
    if (mask_grid.size() != g_ini.size()) throw std::invalid_argument("missed_foreground: size mismatch");
    Tensor<T> out = Tensor<T>::zeros(mask_grid.shape);
    for (std::int64_t i = 0; i < out.size(); ++i)
        if (mask_grid[i] > T(0.5)) out[i] = std::clamp(mask_grid[i] - g_ini[i], T(0), T(1));
    return out;
}

// ---------------------------------------------------------------------------
// dynamic refinement (on tape)
// ---------------------------------------------------------------------------

/// Mean of the last `l` attention maps.
template <typename T>
typename Tape<T>::Ref average_attention(Tape<T>& t, const std::vector<typename Tape<T>::Ref>& attn, int l) {
    const int n = static_cast<int>(attn.size());
    if (l < 1 || l > n) throw std::invalid_argument("average_attention: l out of range");
    std::vector<typename Tape<T>::Ref> last(attn.end() - l, attn.end());
    return mean_refs(t, last);
}

/// Alternating row/column normalization toward a doubly stochastic matrix.
/// Stops once every row and column sum is within tol of 1, or after max_iters
/// alternations. Rejects inputs with a zero row or column.
template <typename T>
typename Tape<T>::Ref sinkhorn_normalize(Tape<T>& t, typename Tape<T>::Ref a, int max_iters, double tol) {
    const Tensor<T>& v = t.value(a);
    if (v.ndim() != 2 || v.rows() != v.cols()) throw std::invalid_argument("sinkhorn: square matrix required");
    const int n = v.rows();
    for (std::int64_t i = 0; i < v.size(); ++i)
        if (v[i] < T(0)) throw std::invalid_argument("sinkhorn: negative entry");
    for (int i = 0; i < n; ++i) {
        T rs = 0, cs = 0;
        for (int j = 0; j < n; ++j) {
            rs += v.at2(i, j);
            cs += v.at2(j, i);
        }
        if (!(rs > T(0)) || !(cs > T(0)))
            throw std::invalid_argument("sinkhorn: zero row or column, cannot normalize");
    }

    auto converged = [&](typename Tape<T>::Ref m) {
        const Tensor<T>& x = t.value(m);
        for (int i = 0; i < n; ++i) {
            T rs = 0, cs = 0;
            for (int j = 0; j < n; ++j) {
                rs += x.at2(i, j);
                cs += x.at2(j, i);
            }
            if (std::abs(static_cast<double>(rs) - 1.0) > tol || std::abs(static_cast<double>(cs) - 1.0) > tol)
                return false;
        }
        return true;
    };

    auto cur = a;
    if (converged(cur)) return cur;
    for (int it = 0; it < max_iters; ++it) {
        cur = t.div_rows(cur, t.row_sums(cur));
        cur = t.div_cols(cur, t.col_sums(cur));
        if (converged(cur)) break;
    }
    return cur;
}

/// H = max(S, S * S^T) element-wise.
template <typename T>
typename Tape<T>::Ref high_order_refine(Tape<T>& t, typename Tape<T>::Ref s) {
    if (t.value(s).rows() != t.value(s).cols()) throw std::invalid_argument("high_order_refine: square matrix required");
    return t.maximum(s, t.matmul(s, s, false, true));
}

/// G_ref = minmax(B ⊙ (H · vec(G_ini))); guidance vectors are {hw, 1} columns.
template <typename T>
typename Tape<T>::Ref refine_guidance(Tape<T>& t, const Tensor<T>& box, typename Tape<T>::Ref h_mat,
                                      const Tensor<T>& g_ini) {
    const int hw = t.value(h_mat).rows();
    if (box.size() != hw || g_ini.size() != hw) throw std::invalid_argument("refine_guidance: size mismatch");
    auto prop = t.matmul(h_mat, t.constant(g_ini.reshaped({hw, 1})));
    auto masked = t.mul(prop, t.constant(box.reshaped({hw, 1})));
    return t.minmax_norm(masked);
}

template <typename T>
typename Tape<T>::Ref refinement_loss(Tape<T>& t, typename Tape<T>::Ref g_ref, const Tensor<T>& f_miss) {
    return t.bce_mean(g_ref, f_miss.reshaped(t.value(g_ref).shape), 1e-6);
}

/// G_fin = max(G_ini, G_ref) element-wise.
template <typename T>
typename Tape<T>::Ref final_guidance(Tape<T>& t, const Tensor<T>& g_ini, typename Tape<T>::Ref g_ref) {
    return t.maximum(t.constant(g_ini.reshaped(t.value(g_ref).shape)), g_ref);
}

// ---------------------------------------------------------------------------
// learnable stack
// ---------------------------------------------------------------------------

template <typename T>
struct SelfAttendOut {
    typename Tape<T>::Ref features;                  // {d, hw}
    std::vector<typename Tape<T>::Ref> attention;    // per block, {hw, hw}
};

/// φ1 fusion, the self-attention trunk, and φ2 — the LGM learnables.
template <typename T>
struct LgmModule {
    Conv1x1<T> phi1;
    std::vector<SelfAttnBlock<T>> blocks;
    Conv1x1<T> phi2;
    int dim = 0;

    LgmModule() = default;
    LgmModule(ParamStore<T>& ps, int d, int n_blocks, int heads, Rng& rng) : dim(d) {
        phi1 = Conv1x1<T>(ps, "lgm.phi1", 2 * d + 1, d, rng);
        for (int i = 0; i < n_blocks; ++i)
            blocks.emplace_back(ps, "lgm.block" + std::to_string(i), d, heads, rng, /*ffn=*/true);
        phi2 = Conv1x1<T>(ps, "lgm.phi2", d + 1, d, rng);
    }

    /// F_q_con = φ1([P_s broadcast ; F_q_clip ; G_ini]) with rectifier.
    typename Tape<T>::Ref consistent_fusion(Tape<T>& t, typename Tape<T>::Ref prototype,
                                            typename Tape<T>::Ref f_q_clip, const Tensor<T>& g_ini) const {
        const int hw = t.value(f_q_clip).cols();
        if (g_ini.size() != hw) throw std::invalid_argument("consistent_fusion: guidance size mismatch");
        auto stacked = t.concat_rows({t.tile_cols(prototype, hw), f_q_clip, t.constant(g_ini.reshaped({1, hw}))});
        return t.relu(phi1.forward(t, stacked));
    }

    /// Transformer trunk over hw tokens; returns per-block head-averaged maps.
    SelfAttendOut<T> self_attend(Tape<T>& t, typename Tape<T>::Ref f_con) const {
        auto x = t.transpose(f_con);  // {hw, d}
        SelfAttendOut<T> out;
        for (const auto& blk : blocks) {
            auto r = blk.forward(t, x);
            x = r.tokens;
            out.attention.push_back(r.attn);
        }
        out.features = t.transpose(x);
        return out;
    }

    /// F_q_fin = φ2([F_q_self ; G_fin]) with rectifier; G_fin arrives as {hw,1}.
    typename Tape<T>::Ref final_clip_feature(Tape<T>& t, typename Tape<T>::Ref f_self,
                                             typename Tape<T>::Ref g_fin) const {
        auto stacked = t.concat_rows({f_self, t.transpose(g_fin)});
        return t.relu(phi2.forward(t, stacked));
    }
};

// ---------------------------------------------------------------------------
// point sampling
// ---------------------------------------------------------------------------

/// 25+25 point prompts from the final guidance: foreground uniformly from
/// {>= 0.5}, background from the rest; small pools sample with replacement,
/// empty pools fall back to value-ranked pixels (ties row-major).
template <typename T>
PointPrompts sample_points(const Tensor<T>& g_fin, int n_fg, int n_bg, Rng& rng) {
    const int h = g_fin.shape[0], w = g_fin.shape[1];
    std::vector<int> fg_pool, bg_pool;
    for (int i = 0; i < h * w; ++i)
        (static_cast<double>(g_fin[i]) >= 0.5 ? fg_pool : bg_pool).push_back(i);

    auto ranked = [&](bool descending, int n) {
        std::vector<int> idx(static_cast<std::size_t>(h) * w);
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
            return descending ? g_fin[a] > g_fin[b] : g_fin[a] < g_fin[b];
        });
        idx.resize(n);
        return idx;
    };
    auto draw = [&](std::vector<int>& pool, int quota, bool descending) {
        std::vector<int> out;
        if (pool.empty()) return ranked(descending, quota);
        if (static_cast<int>(pool.size()) < quota) {
            for (int i = 0; i < quota; ++i) out.push_back(pool[rng.index(static_cast<int>(pool.size()))]);
            return out;
        }
        for (int i = 0; i < quota; ++i) {  // partial Fisher-Yates, no replacement
            int j = i + rng.index(static_cast<int>(pool.size()) - i);
            std::swap(pool[i], pool[j]);
            out.push_back(pool[i]);
        }
        return out;
    };

    PointPrompts pts;
    for (int i : draw(fg_pool, n_fg, true)) pts.points.push_back({i / w, i % w, 1});
    for (int i : draw(bg_pool, n_bg, false)) pts.points.push_back({i / w, i % w, 0});
    return pts;
}

}  // namespace usd
