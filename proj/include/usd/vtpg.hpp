#pragma once

#include <string>

#include "usd/autodiff.hpp"
#include "usd/nn.hpp"

namespace usd {

template <typename T>
struct PromptOut {
    typename Tape<T>::Ref tokens;      // {T, d_dec}
    typename Tape<T>::Ref cross_attn;  // {T, hw}, row-stochastic
};

/// One visual-text prompt generator path: an fc aligning the text dimension,
/// learned per-token offsets that expand the single embedding to T tokens,
/// then cross-attention into the visual positions and one self-attention
/// block over the tokens (both pre-norm with residuals).
template <typename T>
struct VtpgPath {
    Linear<T> fc;
    int offsets = -1;
    CrossAttnBlock<T> cross;
    SelfAttnBlock<T> self_blk;
    ParamStore<T>* ps = nullptr;
    int token_count = 0;

    VtpgPath() = default;
    VtpgPath(ParamStore<T>& store, const std::string& name, int d_text, int d_dec, int tokens, int heads, Rng& rng)
        : fc(store, name + ".fc", d_text, d_dec, rng),
          cross(store, name + ".cross", d_dec, heads, rng),
          self_blk(store, name + ".self", d_dec, heads, rng),
          ps(&store),
          token_count(tokens) {
        offsets = store.add(name + ".offsets", normal_tensor<T>(rng, {tokens, d_dec}, 0.02));
    }

    /// fc(text) broadcast to T rows plus the learned offsets.
    typename Tape<T>::Ref expand_text(Tape<T>& t, const Tensor<T>& text) const {
        auto e = fc.forward(t, t.constant(text.reshaped({1, static_cast<int>(text.size())})));
        auto rows = t.tile_rows(t.reshape(e, {t.value(e).cols()}), token_count);
        return t.add(rows, t.param(ps->value(offsets), offsets));
    }

    /// Cross-attend the text tokens into the visual positions (keys/values are
    /// the flattened visual features plus their positional encodings), then one
    /// self-attention block over the T tokens.
    PromptOut<T> generate_prompt(Tape<T>& t, typename Tape<T>::Ref text_tokens, typename Tape<T>::Ref visual,
                                 const Tensor<T>& pos_enc) const {
        auto kv = t.add(t.transpose(visual), t.constant(pos_enc));  // {hw, d}
        auto c = cross.forward(t, text_tokens, kv);
        auto s = self_blk.forward(t, c.tokens);
        return {s.tokens, c.attn};
    }
};

/// The two parameter-disjoint generator instances (clip path and sam path).
template <typename T>
struct VtpgModule {
    VtpgPath<T> clip_path;
    VtpgPath<T> sam_path;

    VtpgModule() = default;
    VtpgModule(ParamStore<T>& ps, int d_text, int d_dec, int tokens, int heads, Rng& rng)
        : clip_path(ps, "vtpg.clip", d_text, d_dec, tokens, heads, rng),
          sam_path(ps, "vtpg.sam", d_text, d_dec, tokens, heads, rng) {}
};

}  // namespace usd
