#pragma once

#include <Eigen/Core>
#include <cctype>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

#include "usd/autodiff.hpp"
#include "usd/image.hpp"
#include "usd/nn.hpp"
#include "usd/rng.hpp"
#include "usd/serialize.hpp"
#include "usd/tensor.hpp"

namespace usd {

struct EncoderConfig {
    int image_size = 64;
    int patch = 8;        // clip patch size -> h1 = image_size / patch
    int clip_dim = 64;    // d1
    int clip_blocks = 4;
    int clip_heads = 4;
    int text_dim = 64;    // d_t
    int sam_dim = 64;     // d, also the decoder dimension
    int dec_heads = 4;
    std::uint64_t seed = 1;

    int clip_grid() const { return image_size / patch; }
    int sam_grid() const { return image_size / 4; }  // conv stack has stride 4 overall
    void validate() const {
        if (image_size % patch != 0) throw std::invalid_argument("encoder: image_size not divisible by patch");
        if (image_size % 4 != 0) throw std::invalid_argument("encoder: image_size not divisible by sam stride 4");
        if (clip_dim % clip_heads != 0 || sam_dim % dec_heads != 0)
            throw std::invalid_argument("encoder: dim not divisible by heads");
    }
};

/// Output of the text-image-aligned visual encoder: patch tokens (no class
/// token), their spatial mean, and the per-block head-averaged attention maps.
template <typename T>
struct PatchTokenFeatures {
    Tensor<T> patch;                 // {d1, h1, w1}
    Tensor<T> pooled;                // {d1}
    std::vector<Tensor<T>> attention_maps;  // each {h1*w1, h1*w1}, row-stochastic
    int block_count = 0;
};

template <typename T>
struct TextEmbedding {
    Tensor<T> values;  // {d_t}
    std::string prompt_text;
};

struct PointPrompt {
    int row = 0, col = 0;
    int label = 1;  // 1 foreground, 0 background
};

struct PointPrompts {
    std::vector<PointPrompt> points;  // decoder-feature coordinates
};

namespace frozen {

/// Frozen attention block weights (plain tensors, never optimized).
template <typename T>
struct AttnW {
    Tensor<T> ln_g, ln_b;
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;

    static AttnW init(int d, Rng& rng) {
        const double s = 1.0 / std::sqrt(static_cast<double>(d));
        AttnW w;
        w.ln_g = Tensor<T>::full({d}, T(1));
        w.ln_b = Tensor<T>::zeros({d});
        w.wq = normal_tensor<T>(rng, {d, d}, s);
        w.bq = Tensor<T>::zeros({d});
        w.wk = normal_tensor<T>(rng, {d, d}, s);
        w.bk = Tensor<T>::zeros({d});
        w.wv = normal_tensor<T>(rng, {d, d}, s);
        w.bv = Tensor<T>::zeros({d});
        w.wo = normal_tensor<T>(rng, {d, d}, s);
        w.bo = Tensor<T>::zeros({d});
        return w;
    }

    template <typename F>
    void visit(const std::string& prefix, F&& fn) {
        fn(prefix + ".ln_g", ln_g); fn(prefix + ".ln_b", ln_b);
        fn(prefix + ".wq", wq); fn(prefix + ".bq", bq);
        fn(prefix + ".wk", wk); fn(prefix + ".bk", bk);
        fn(prefix + ".wv", wv); fn(prefix + ".bv", bv);
        fn(prefix + ".wo", wo); fn(prefix + ".bo", bo);
    }
};

/// Multi-head attention forward with frozen weights pushed as tape constants.
/// Queries and keys/values arrive already normalized by the caller.
template <typename T>
AttentionOut<T> mha(Tape<T>& t, typename Tape<T>::Ref q_in, typename Tape<T>::Ref kv_in,
                    const AttnW<T>& w, int heads) {
    const int d = w.wq.rows();
    const int dh = d / heads;
    auto lin = [&](typename Tape<T>::Ref x, const Tensor<T>& W, const Tensor<T>& b) {
        return t.add_rowvec(t.matmul(x, t.constant(W), false, true), t.constant(b));
    };
    auto q = lin(q_in, w.wq, w.bq);
    auto k = lin(kv_in, w.wk, w.bk);
    auto v = lin(kv_in, w.wv, w.bv);
    std::vector<typename Tape<T>::Ref> outs, attns;
    for (int h = 0; h < heads; ++h) {
        auto qh = t.slice_cols(q, h * dh, (h + 1) * dh);
        auto kh = t.slice_cols(k, h * dh, (h + 1) * dh);
        auto vh = t.slice_cols(v, h * dh, (h + 1) * dh);
        auto a = t.softmax_rows(t.scale(t.matmul(qh, kh, false, true), 1.0 / std::sqrt(static_cast<double>(dh))));
        attns.push_back(a);
        outs.push_back(t.matmul(a, vh));
    }
    return {lin(t.concat_cols(outs), w.wo, w.bo), mean_refs(t, attns)};
}

template <typename T>
typename Tape<T>::Ref layernorm_const(Tape<T>& t, typename Tape<T>::Ref x, const Tensor<T>& g, const Tensor<T>& b) {
    return t.layernorm_rows(x, t.constant(g), t.constant(b));
}

}  // namespace frozen

// ---------------------------------------------------------------------------
// CLIP-like visual encoder stand-in
// ---------------------------------------------------------------------------

template <typename T>
class ClipVisualEncoder {
public:
    ClipVisualEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
        const int pd = 3 * cfg.patch * cfg.patch;
        embed_w_ = normal_tensor<T>(rng, {cfg.clip_dim, pd}, 1.0 / std::sqrt(static_cast<double>(pd)));
        embed_b_ = normal_tensor<T>(rng, {cfg.clip_dim}, 0.02);
        for (int i = 0; i < cfg.clip_blocks; ++i) blocks_.push_back(frozen::AttnW<T>::init(cfg.clip_dim, rng));
    }

    PatchTokenFeatures<T> encode(const Image& img) const {
        if (img.height() != cfg_.image_size || img.width() != cfg_.image_size)
            throw std::invalid_argument("clip encoder: image size mismatch");
        const int g = cfg_.clip_grid(), p = cfg_.patch, d = cfg_.clip_dim;
        Tensor<T> patches({g * g, 3 * p * p});
        for (int py = 0; py < g; ++py)
            for (int px = 0; px < g; ++px) {
                int tok = py * g + px;
                int o = 0;
                for (int c = 0; c < 3; ++c)
                    for (int y = 0; y < p; ++y)
                        for (int x = 0; x < p; ++x)
                            patches.at2(tok, o++) = static_cast<T>(img.pixels.at3(c, py * p + y, px * p + x));
            }
        Tape<T> t;
        auto x = t.add_rowvec(t.matmul(t.constant(std::move(patches)), t.constant(embed_w_), false, true),
                              t.constant(embed_b_));
        x = t.add(x, t.constant(pos_encoding()));
        PatchTokenFeatures<T> out;
        for (const auto& blk : blocks_) {
            auto h = frozen::layernorm_const(t, x, blk.ln_g, blk.ln_b);
            auto att = frozen::mha(t, h, h, blk, cfg_.clip_heads);
            x = t.add(x, att.tokens);
            out.attention_maps.push_back(t.value(att.attn));
        }
        out.block_count = cfg_.clip_blocks;
        const Tensor<T>& tok = t.value(x);  // {g*g, d}
        out.patch = Tensor<T>({d, g, g});
        out.pooled = Tensor<T>({d});
        for (int i = 0; i < g * g; ++i)
            for (int j = 0; j < d; ++j) {
                out.patch.data[static_cast<std::size_t>(j) * g * g + i] = tok.at2(i, j);
                out.pooled[j] += tok.at2(i, j) / static_cast<T>(g * g);
            }
        // frozen neck: per-channel spatial centering of the patch tokens; the
        // pooled vector keeps the pre-centering mean
        for (int j = 0; j < d; ++j)
            for (int i = 0; i < g * g; ++i)
                out.patch.data[static_cast<std::size_t>(j) * g * g + i] -= out.pooled[j];
        return out;
    }

    template <typename F>
    void visit(F&& fn) {
        fn("clip.embed_w", embed_w_);
        fn("clip.embed_b", embed_b_);
        for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].visit("clip.block" + std::to_string(i), fn);
    }

private:
    EncoderConfig cfg_;
    Tensor<T> embed_w_, embed_b_;
    std::vector<frozen::AttnW<T>> blocks_;

    Tensor<T> pos_encoding() const { return sinusoidal_pe_2d<T>(cfg_.clip_grid(), cfg_.clip_grid(), cfg_.clip_dim); }
};

// ---------------------------------------------------------------------------
// CLIP-like text encoder stand-in: hashed embedding bag + 2-layer projector
// ---------------------------------------------------------------------------

template <typename T>
class ClipTextEncoder {
public:
    static constexpr int kVocab = 2048;

    ClipTextEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
        table_ = normal_tensor<T>(rng, {kVocab, cfg.text_dim}, 1.0);
        const double s = 1.0 / std::sqrt(static_cast<double>(cfg.text_dim));
        w1_ = normal_tensor<T>(rng, {cfg.text_dim, cfg.text_dim}, s);
        b1_ = normal_tensor<T>(rng, {cfg.text_dim}, 0.02);
        w2_ = normal_tensor<T>(rng, {cfg.text_dim, cfg.text_dim}, s);
        b2_ = normal_tensor<T>(rng, {cfg.text_dim}, 0.02);
    }

    TextEmbedding<T> encode(const std::string& prompt) const {
        auto words = tokenize(prompt);
        if (words.empty()) throw std::invalid_argument("text encoder: empty prompt");
        const int d = cfg_.text_dim;
        Tensor<T> bag({d});
        for (const auto& w : words) {
            std::uint64_t h = fnv1a(w.data(), w.size()) % kVocab;
            for (int j = 0; j < d; ++j) bag[j] += table_.at2(static_cast<int>(h), j);
        }
        for (auto& v : bag.data) v /= static_cast<T>(words.size());
        Tensor<T> hdn({d});
        apply_linear(w1_, b1_, bag, hdn);
        for (auto& v : hdn.data) v = std::max(v, T(0));
        Tensor<T> out({d});
        apply_linear(w2_, b2_, hdn, out);
        return TextEmbedding<T>{std::move(out), prompt};
    }

    template <typename F>
    void visit(F&& fn) {
        fn("text.table", table_);
        fn("text.w1", w1_); fn("text.b1", b1_);
        fn("text.w2", w2_); fn("text.b2", b2_);
    }

private:
    EncoderConfig cfg_;
    Tensor<T> table_, w1_, b1_, w2_, b2_;

    static std::vector<std::string> tokenize(const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        for (char c : s) {
            if (std::isalnum(static_cast<unsigned char>(c)))
                cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
            else if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        }
        if (!cur.empty()) out.push_back(cur);
        return out;
    }

    static void apply_linear(const Tensor<T>& w, const Tensor<T>& b, const Tensor<T>& x, Tensor<T>& y) {
        for (int i = 0; i < w.rows(); ++i) {
            T s = b[i];
            for (int j = 0; j < w.cols(); ++j) s += w.at2(i, j) * x[j];
            y[i] = s;
        }
    }
};

// ---------------------------------------------------------------------------
// SAM-like image encoder stand-in: 3-layer strided conv stack (stride 4 total)
// ---------------------------------------------------------------------------

template <typename T>
class SamImageEncoder {
public:
    SamImageEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
        const int mid = 32;
        w1_ = normal_tensor<T>(rng, {mid, 3 * 9}, 1.0 / std::sqrt(27.0));
        b1_ = Tensor<T>::zeros({mid});
        w2_ = normal_tensor<T>(rng, {cfg.sam_dim, mid * 9}, 1.0 / std::sqrt(static_cast<double>(mid * 9)));
        b2_ = Tensor<T>::zeros({cfg.sam_dim});
        w3_ = normal_tensor<T>(rng, {cfg.sam_dim, cfg.sam_dim * 9}, 1.0 / std::sqrt(static_cast<double>(cfg.sam_dim * 9)));
        b3_ = Tensor<T>::zeros({cfg.sam_dim});
    }

    /// {d, h, w} dense features at image_size / 4, with a frozen centering
    /// neck (per-channel spatial mean removed).
    Tensor<T> encode(const Image& img) const {
        if (img.height() != cfg_.image_size || img.width() != cfg_.image_size)
            throw std::invalid_argument("sam encoder: image size mismatch");
        Tensor<T> x = img.pixels.template cast<T>();
        x = conv3x3(x, w1_, b1_, 2, true);
        x = conv3x3(x, w2_, b2_, 2, true);
        x = conv3x3(x, w3_, b3_, 1, false);
        const int hw = x.shape[1] * x.shape[2];
        for (int c = 0; c < x.shape[0]; ++c) {
            T m = 0;
            for (int i = 0; i < hw; ++i) m += x.data[static_cast<std::size_t>(c) * hw + i];
            m /= static_cast<T>(hw);
            for (int i = 0; i < hw; ++i) x.data[static_cast<std::size_t>(c) * hw + i] -= m;
        }
        return x;
    }

    template <typename F>
    void visit(F&& fn) {
        fn("sam.w1", w1_); fn("sam.b1", b1_);
        fn("sam.w2", w2_); fn("sam.b2", b2_);
        fn("sam.w3", w3_); fn("sam.b3", b3_);
    }

private:
    EncoderConfig cfg_;
    Tensor<T> w1_, b1_, w2_, b2_, w3_, b3_;

    /// pad-1 3x3 convolution via im2col + one matmul.
    static Tensor<T> conv3x3(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& b, int stride, bool relu) {
        const int cin = in.shape[0], h = in.shape[1], wd = in.shape[2];
        const int ho = (h + 2 - 3) / stride + 1, wo = (wd + 2 - 3) / stride + 1;
        const int cout = w.rows();
        Tensor<T> cols({cin * 9, ho * wo});
        for (int c = 0; c < cin; ++c)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    int row = (c * 3 + ky) * 3 + kx;
                    for (int oy = 0; oy < ho; ++oy) {
                        int iy = oy * stride + ky - 1;
                        if (iy < 0 || iy >= h) continue;
                        for (int ox = 0; ox < wo; ++ox) {
                            int ix = ox * stride + kx - 1;
                            if (ix < 0 || ix >= wd) continue;
                            cols.at2(row, oy * wo + ox) = in.at3(c, iy, ix);
                        }
                    }
                }
        Tensor<T> out({cout, ho, wo});
        using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        Eigen::Map<const EMat> W(w.data.data(), cout, cin * 9);
        Eigen::Map<const EMat> C(cols.data.data(), cin * 9, ho * wo);
        Eigen::Map<EMat> O(out.data.data(), cout, ho * wo);
        O.noalias() = W * C;
        for (int i = 0; i < cout; ++i)
            for (int j = 0; j < ho * wo; ++j) {
                T v = out.data[static_cast<std::size_t>(i) * ho * wo + j] + b[i];
                out.data[static_cast<std::size_t>(i) * ho * wo + j] = relu ? std::max(v, T(0)) : v;
            }
        return out;
    }
};

// ---------------------------------------------------------------------------
// SAM-like mask decoder stand-in (frozen): one cross-attention block where
// prompt tokens + point prompts attend to the features, mean pooling over the
// updated prompts, a frozen 1x1 projection and a bilinear upsample.
// ---------------------------------------------------------------------------

template <typename T>
class SamMaskDecoder {
public:
    SamMaskDecoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
        attn_ = frozen::AttnW<T>::init(cfg.sam_dim, rng);
        label_embed_ = normal_tensor<T>(rng, {2, cfg.sam_dim}, 0.5);
        const double s = 1.0 / std::sqrt(static_cast<double>(cfg.sam_dim));
        proj_w_ = normal_tensor<T>(rng, {cfg.sam_dim, cfg.sam_dim}, s);
        proj_b_ = Tensor<T>::zeros({cfg.sam_dim});
    }

    /// Decode on the caller's tape; `tokens` may be -1 (point prompts only).
    /// Returns image-resolution logits {image_size, image_size}. Point order
    /// is canonicalized so permutations decode bit-identically.
    typename Tape<T>::Ref decode(Tape<T>& t, typename Tape<T>::Ref features, typename Tape<T>::Ref tokens,
                                 const PointPrompts& points) const {
        const int d = cfg_.sam_dim, g = cfg_.sam_grid();
        if (t.value(features).rows() != d || t.value(features).cols() != g * g)
            throw std::invalid_argument("decoder: feature shape mismatch");
        if (tokens >= 0 && t.value(tokens).cols() != d)
            throw std::invalid_argument("decoder: token dim mismatch");
        if (points.points.empty() && tokens < 0)
            throw std::invalid_argument("decoder: no prompts");

        auto sorted = points.points;
        std::sort(sorted.begin(), sorted.end(), [](const PointPrompt& a, const PointPrompt& b) {
            return std::tie(a.row, a.col, a.label) < std::tie(b.row, b.col, b.label);
        });
        Tensor<T> pe = sinusoidal_pe_2d<T>(g, g, d);
        Tensor<T> pt_tok({std::max<int>(1, static_cast<int>(sorted.size())), d});
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            const auto& p = sorted[i];
            if (p.row < 0 || p.row >= g || p.col < 0 || p.col >= g)
                throw std::invalid_argument("decoder: point outside feature grid");
            for (int j = 0; j < d; ++j)
                pt_tok.at2(static_cast<int>(i), j) =
                    pe.at2(p.row * g + p.col, j) + label_embed_.at2(p.label ? 1 : 0, j);
        }

        typename Tape<T>::Ref prompt;
        if (!sorted.empty() && tokens >= 0)
            prompt = t.concat_rows({tokens, t.constant(std::move(pt_tok))});
        else if (tokens >= 0)
            prompt = tokens;
        else
            prompt = t.constant(std::move(pt_tok));

        auto kv = t.add(t.transpose(features), t.constant(pe));  // {g*g, d}
        auto att = frozen::mha(t, prompt, kv, attn_, cfg_.dec_heads);
        auto upd = t.add(prompt, att.tokens);

        // pool the learned tokens and the point tokens as equal-weight groups
        // so the many points cannot drown out the prompt embeddings
        typename Tape<T>::Ref pooled;
        const int n_tok = tokens >= 0 ? t.value(tokens).rows() : 0;
        const int n_all = t.value(upd).rows();
        if (n_tok > 0 && n_tok < n_all) {
            Tensor<T> m_tok = Tensor<T>::zeros({n_all}), m_pt = Tensor<T>::zeros({n_all});
            for (int i = 0; i < n_all; ++i) (i < n_tok ? m_tok : m_pt)[i] = T(1);
            auto updt = t.transpose(upd);
            auto both = t.add(t.masked_mean_cols(updt, m_tok), t.masked_mean_cols(updt, m_pt));
            pooled = t.scale(both, 0.5);
        } else {
            pooled = t.masked_mean_cols(t.transpose(upd), Tensor<T>::full({n_all}, T(1)));
        }

        auto projected = t.add_colvec(t.matmul(t.constant(proj_w_), features), t.constant(proj_b_));
        auto logits = t.matmul(t.reshape(pooled, {1, d}), projected);
        return t.upsample_bilinear(t.reshape(logits, {g, g}), cfg_.image_size, cfg_.image_size);
    }

    template <typename F>
    void visit(F&& fn) {
        attn_.visit("dec.attn", fn);
        fn("dec.label_embed", label_embed_);
        fn("dec.proj_w", proj_w_);
        fn("dec.proj_b", proj_b_);
    }

private:
    EncoderConfig cfg_;
    frozen::AttnW<T> attn_;
    Tensor<T> label_embed_, proj_w_, proj_b_;
};

// ---------------------------------------------------------------------------
// bundle
// ---------------------------------------------------------------------------

/// The four frozen components plus a content fingerprint. Weights are seeded
/// at construction and never updated; encode results for dataset images are
/// memoized by content hash.
template <typename T>
class FrozenBundle {
public:
    explicit FrozenBundle(const EncoderConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng r_clip(mix_seed(cfg.seed, 101));
        Rng r_text(mix_seed(cfg.seed, 202));
        Rng r_sam(mix_seed(cfg.seed, 303));
        Rng r_dec(mix_seed(cfg.seed, 404));
        clip_visual_ = std::make_unique<ClipVisualEncoder<T>>(cfg_, r_clip);
        clip_text_ = std::make_unique<ClipTextEncoder<T>>(cfg_, r_text);
        sam_image_ = std::make_unique<SamImageEncoder<T>>(cfg_, r_sam);
        sam_decoder_ = std::make_unique<SamMaskDecoder<T>>(cfg_, r_dec);
    }

    const EncoderConfig& config() const { return cfg_; }
    const SamMaskDecoder<T>& decoder() const { return *sam_decoder_; }

    const PatchTokenFeatures<T>& clip_visual_encode(const Image& img) const {
        std::uint64_t key = fnv1a(img.pixels.data.data(), img.pixels.data.size() * sizeof(float));
        std::lock_guard<std::mutex> lk(cache_mu_);
        auto it = clip_cache_.find(key);
        if (it == clip_cache_.end())
            it = clip_cache_.emplace(key, clip_visual_->encode(img)).first;
        return it->second;
    }

    const Tensor<T>& sam_encode(const Image& img) const {
        std::uint64_t key = fnv1a(img.pixels.data.data(), img.pixels.data.size() * sizeof(float));
        std::lock_guard<std::mutex> lk(cache_mu_);
        auto it = sam_cache_.find(key);
        if (it == sam_cache_.end())
            it = sam_cache_.emplace(key, sam_image_->encode(img)).first;
        return it->second;
    }

    TextEmbedding<T> clip_text_encode(const std::string& prompt) const {
        std::lock_guard<std::mutex> lk(cache_mu_);
        auto it = text_cache_.find(prompt);
        if (it == text_cache_.end())
            it = text_cache_.emplace(prompt, clip_text_->encode(prompt)).first;
        return it->second;
    }

    /// d(score)/d(patch features) for an arbitrary differentiable score of the
    /// encoded patch tokens.
    Tensor<T> clip_visual_gradient(
        const Image& img,
        const std::function<typename Tape<T>::Ref(Tape<T>&, typename Tape<T>::Ref)>& score_fn) const {
        const PatchTokenFeatures<T>& f = clip_visual_encode(img);
        const int d = f.patch.shape[0], g = f.patch.shape[1];
        Tape<T> t;
        auto x = t.leaf(f.patch.reshaped({d, g * g}));
        auto score = score_fn(t, x);
        if (t.value(score).size() != 1) throw std::invalid_argument("clip_visual_gradient: score must be scalar");
        t.backward(score);
        if (!t.has_grad(x)) return Tensor<T>::zeros({d, g, g});
        Tensor<T> grad = t.grad(x).reshaped({d, g, g});
        for (T v : grad.data)
            if (!std::isfinite(static_cast<double>(v)))
                throw std::runtime_error("clip_visual_gradient: non-finite gradient");
        return grad;
    }

    /// FNV-1a over every frozen weight in a fixed order.
    std::uint64_t fingerprint() const {
        std::uint64_t h = 1469598103934665603ULL;
        auto eat = [&h](const std::string&, Tensor<T>& t) { h = fnv1a(t.data.data(), t.data.size() * sizeof(T), h); };
        clip_visual_->visit(eat);
        clip_text_->visit(eat);
        sam_image_->visit(eat);
        sam_decoder_->visit(eat);
        return h;
    }

    /// Weight checkpoint: binary blob whose header doubles as the shape manifest.
    void save_weights(const std::string& path) const {
        std::vector<BlobEntry> entries;
        auto put = [&entries](const std::string& name, Tensor<T>& t) { entries.push_back(make_entry(name, t)); };
        clip_visual_->visit(put);
        clip_text_->visit(put);
        sam_image_->visit(put);
        sam_decoder_->visit(put);
        write_blob(path, entries);
    }

private:
    EncoderConfig cfg_;
    std::unique_ptr<ClipVisualEncoder<T>> clip_visual_;
    std::unique_ptr<ClipTextEncoder<T>> clip_text_;
    std::unique_ptr<SamImageEncoder<T>> sam_image_;
    std::unique_ptr<SamMaskDecoder<T>> sam_decoder_;

    mutable std::mutex cache_mu_;
    mutable std::map<std::uint64_t, PatchTokenFeatures<T>> clip_cache_;
    mutable std::map<std::uint64_t, Tensor<T>> sam_cache_;
    mutable std::map<std::string, TextEmbedding<T>> text_cache_;
};

}  // namespace usd
