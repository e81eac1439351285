#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "usd/autodiff.hpp"
#include "usd/rng.hpp"
#include "usd/tensor.hpp"

namespace usd {

/// Owns every trainable tensor of a model. Frozen weights never live here;
/// anything registered in the store is, by definition, what the optimizer may
/// touch and what count_learnables() reports.
template <typename T>
class ParamStore {
public:
    int add(std::string name, Tensor<T> init) {
        names_.push_back(std::move(name));
        grads_.push_back(Tensor<T>::zeros(init.shape));
        values_.push_back(std::move(init));
        return static_cast<int>(values_.size()) - 1;
    }

    int count() const { return static_cast<int>(values_.size()); }
    std::int64_t scalar_count() const {
        std::int64_t n = 0;
        for (const auto& v : values_) n += v.size();
        return n;
    }

    Tensor<T>& value(int id) { return values_[id]; }
    const Tensor<T>& value(int id) const { return values_[id]; }
    Tensor<T>& grad(int id) { return grads_[id]; }
    const std::string& name(int id) const { return names_[id]; }

    void zero_grads() {
        for (auto& g : grads_)
            std::fill(g.data.begin(), g.data.end(), T(0));
    }

    /// Pulls accumulated per-parameter gradients out of a tape after backward().
    void accumulate_from(const Tape<T>& tape, T scale = T(1)) {
        tape.for_each_param_grad([this, scale](int pid, const Tensor<T>& g) {
            Tensor<T>& dst = grads_[pid];
            for (std::int64_t i = 0; i < g.size(); ++i) dst[i] += scale * g[i];
        });
    }

private:
    std::vector<std::string> names_;
    std::vector<Tensor<T>> values_;
    std::vector<Tensor<T>> grads_;
};

template <typename T>
Tensor<T> normal_tensor(Rng& rng, std::vector<int> shape, double stddev) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
}

/// Token-wise affine map: rows are tokens, y = x * W^T + b.
/// init_std < 0 selects the 1/sqrt(fan_in) default; 0 gives identity-start
/// residual branches.
template <typename T>
struct Linear {
    ParamStore<T>* ps = nullptr;
    int w = -1, b = -1;

    Linear() = default;
    Linear(ParamStore<T>& store, const std::string& name, int d_in, int d_out, Rng& rng, double init_std = -1.0)
        : ps(&store) {
        if (init_std < 0) init_std = 1.0 / std::sqrt(static_cast<double>(d_in));
        w = store.add(name + ".w", normal_tensor<T>(rng, {d_out, d_in}, init_std));
        b = store.add(name + ".b", Tensor<T>::zeros({d_out}));
    }

    typename Tape<T>::Ref forward(Tape<T>& t, typename Tape<T>::Ref x) const {
        auto wr = t.param(ps->value(w), w);
        auto br = t.param(ps->value(b), b);
        return t.add_rowvec(t.matmul(x, wr, false, true), br);
    }
};

/// 1x1 convolution over a {channels, h*w} feature matrix: y = W x + b.
template <typename T>
struct Conv1x1 {
    ParamStore<T>* ps = nullptr;
    int w = -1, b = -1;

    Conv1x1() = default;
    Conv1x1(ParamStore<T>& store, const std::string& name, int c_in, int c_out, Rng& rng) : ps(&store) {
        w = store.add(name + ".w", normal_tensor<T>(rng, {c_out, c_in}, 1.0 / std::sqrt(static_cast<double>(c_in))));
        b = store.add(name + ".b", Tensor<T>::zeros({c_out}));
    }

    typename Tape<T>::Ref forward(Tape<T>& t, typename Tape<T>::Ref x) const {
        auto wr = t.param(ps->value(w), w);
        auto br = t.param(ps->value(b), b);
        return t.add_colvec(t.matmul(wr, x), br);
    }
};

template <typename T>
struct LayerNorm {
    ParamStore<T>* ps = nullptr;
    int gamma = -1, beta = -1;

    LayerNorm() = default;
    LayerNorm(ParamStore<T>& store, const std::string& name, int d) : ps(&store) {
        gamma = store.add(name + ".gamma", Tensor<T>::full({d}, T(1)));
        beta = store.add(name + ".beta", Tensor<T>::zeros({d}));
    }

    typename Tape<T>::Ref forward(Tape<T>& t, typename Tape<T>::Ref x) const {
        auto g = t.param(ps->value(gamma), gamma);
        auto b = t.param(ps->value(beta), beta);
        return t.layernorm_rows(x, g, b);
    }
};

/// Scaled dot-product attention core shared by all attention users. Inputs are
/// already projected per-head slices; returns the attended values and the
/// row-stochastic attention matrix.
template <typename T>
struct AttentionOut {
    typename Tape<T>::Ref tokens;
    typename Tape<T>::Ref attn;  // head-averaged {n_q, n_kv}
};

template <typename T>
struct MultiHeadAttention {
    ParamStore<T>* ps = nullptr;
    Linear<T> wq, wk, wv, wo;
    int heads = 1;
    int dim = 0;

    MultiHeadAttention() = default;
    /// zero_out_proj starts the residual branch at identity.
    MultiHeadAttention(ParamStore<T>& store, const std::string& name, int d, int n_heads, Rng& rng,
                       bool zero_out_proj = false)
        : ps(&store),
          wq(store, name + ".q", d, d, rng),
          wk(store, name + ".k", d, d, rng),
          wv(store, name + ".v", d, d, rng),
          wo(store, name + ".o", d, d, rng, zero_out_proj ? 0.0 : -1.0),
          heads(n_heads),
          dim(d) {
        if (d % n_heads != 0) throw std::invalid_argument("attention: dim not divisible by heads");
    }

    AttentionOut<T> forward(Tape<T>& t, typename Tape<T>::Ref q_in, typename Tape<T>::Ref kv_in) const {
        const int dh = dim / heads;
        auto q = wq.forward(t, q_in);
        auto k = wk.forward(t, kv_in);
        auto v = wv.forward(t, kv_in);
        std::vector<typename Tape<T>::Ref> outs, attns;
        for (int h = 0; h < heads; ++h) {
            auto qh = t.slice_cols(q, h * dh, (h + 1) * dh);
            auto kh = t.slice_cols(k, h * dh, (h + 1) * dh);
            auto vh = t.slice_cols(v, h * dh, (h + 1) * dh);
            auto scores = t.scale(t.matmul(qh, kh, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
            auto a = t.softmax_rows(scores);
            attns.push_back(a);
            outs.push_back(t.matmul(a, vh));
        }
        auto merged = t.concat_cols(outs);
        return {wo.forward(t, merged), mean_refs(t, attns)};
    }
};

/// Pre-norm self-attention block with residual: x + MHA(LN(x)), optionally
/// followed by a token-wise feed-forward sublayer x + FFN(LN(x)). Residual
/// branches start at identity (zero output projections).
template <typename T>
struct SelfAttnBlock {
    LayerNorm<T> ln;
    MultiHeadAttention<T> mha;
    bool with_ffn = false;
    LayerNorm<T> ln2;
    Linear<T> ffn1, ffn2;

    SelfAttnBlock() = default;
    SelfAttnBlock(ParamStore<T>& store, const std::string& name, int d, int heads, Rng& rng, bool ffn = false)
        : ln(store, name + ".ln", d), mha(store, name + ".attn", d, heads, rng, true), with_ffn(ffn) {
        if (with_ffn) {
            ln2 = LayerNorm<T>(store, name + ".ln2", d);
            ffn1 = Linear<T>(store, name + ".ffn1", d, 2 * d, rng);
            ffn2 = Linear<T>(store, name + ".ffn2", 2 * d, d, rng, 0.0);
        }
    }

    AttentionOut<T> forward(Tape<T>& t, typename Tape<T>::Ref x) const {
        auto h = ln.forward(t, x);
        auto out = mha.forward(t, h, h);
        auto y = t.add(x, out.tokens);
        if (with_ffn) {
            auto f = ffn2.forward(t, t.relu(ffn1.forward(t, ln2.forward(t, y))));
            y = t.add(y, f);
        }
        return {y, out.attn};
    }
};

/// Pre-norm cross-attention block with residual on the query side.
template <typename T>
struct CrossAttnBlock {
    LayerNorm<T> ln_q, ln_kv;
    MultiHeadAttention<T> mha;

    CrossAttnBlock() = default;
    CrossAttnBlock(ParamStore<T>& store, const std::string& name, int d, int heads, Rng& rng)
        : ln_q(store, name + ".ln_q", d),
          ln_kv(store, name + ".ln_kv", d),
          mha(store, name + ".attn", d, heads, rng, true) {}

    AttentionOut<T> forward(Tape<T>& t, typename Tape<T>::Ref q, typename Tape<T>::Ref kv) const {
        auto out = mha.forward(t, ln_q.forward(t, q), ln_kv.forward(t, kv));
        return {t.add(q, out.tokens), out.attn};
    }
};

/// Fixed 2-D sinusoidal positional encoding for an h*w grid, {h*w, d}.
/// First half of the channels encodes the row, second half the column.
template <typename T>
Tensor<T> sinusoidal_pe_2d(int h, int w, int d) {
    if (d % 2 != 0) throw std::invalid_argument("positional encoding dim must be even");
    Tensor<T> pe({h * w, d});
    const int half = d / 2;
    auto fill_1d = [&](int token, int offset, int dm, double pos) {
        for (int i = 0; i < dm; ++i) {
            double freq = std::pow(10000.0, -2.0 * (i / 2) / static_cast<double>(dm));
            double v = (i % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
            pe.at2(token, offset + i) = static_cast<T>(v);
        }
    };
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            int tok = r * w + c;
            fill_1d(tok, 0, half, static_cast<double>(r));
            fill_1d(tok, half, d - half, static_cast<double>(c));
        }
    return pe;
}

}  // namespace usd
