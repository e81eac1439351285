#pragma once

#include <string>
#include <vector>

#include "usd/dataset.hpp"
#include "usd/decoding.hpp"
#include "usd/encoders.hpp"
#include "usd/gsm.hpp"
#include "usd/lgm.hpp"
#include "usd/vtpg.hpp"

namespace usd {

struct ModelConfig {
    EncoderConfig enc;
    double tau = 0.01;
    int lgm_blocks = 6;
    int lgm_heads = 4;
    int avg_last = 4;
    int sinkhorn_iters = 20;
    double sinkhorn_tol = 1e-6;
    double box_threshold = 0.5;
    int vtpg_tokens = 8;
    int vtpg_heads = 4;
    int points_fg = 25;
    int points_bg = 25;
    bool lgm_enabled = true;
    bool vtpg_enabled = true;
    std::string text_fg_template = "a photo of {}";
    std::string text_bg_template = "a photo without {}";
    std::string prompt_source = "sq";  // "sq": prompts see the query features, "s": support only
    std::uint64_t model_seed = 7;

    void validate() const {
        enc.validate();
        if (enc.text_dim != enc.clip_dim)
            throw std::invalid_argument("model: text_dim must equal clip_dim for the similarity scores");
        if (avg_last < 1 || avg_last > lgm_blocks) throw std::invalid_argument("model: avg_last out of range");
        if (!(tau > 0)) throw std::invalid_argument("model: tau must be positive");
        if (prompt_source != "sq" && prompt_source != "s")
            throw std::invalid_argument("model: prompt_source must be 'sq' or 's'");
    }
};

inline std::string format_prompt(const std::string& tpl, const std::string& class_name) {
    auto pos = tpl.find("{}");
    if (pos == std::string::npos) throw std::invalid_argument("prompt template missing '{}': " + tpl);
    return tpl.substr(0, pos) + class_name + tpl.substr(pos + 2);
}

template <typename T>
struct ForwardOptions {
    bool training = false;
    double alpha = 0.5;
    double beta = 0.5;
    std::uint64_t point_seed = 0;
};

template <typename T>
struct ForwardResult {
    using Ref = typename Tape<T>::Ref;
    Ref p_fused = -1, p_clip = -1, p_sam = -1;  // {img, img} probabilities
    Ref loss = -1, loss_ref = -1, loss_pred = -1;
    Ref g_ref = -1, g_fin = -1;                 // {hw, 1}
    Tensor<T> g_ini_clipgrid;                   // {h1, w1}
    Tensor<T> g_ini;                            // {h, w} on the segmenter grid
    bool gini_degenerate = false;
    bool box_fallback = false;
    PointPrompts points;
};

/// The learnable model: GSM maps, the LGM stack and the two VTPG paths, all
/// in one ParamStore. Frozen encoders are passed in per call.
template <typename T>
class UsdModel {
public:
    explicit UsdModel(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(mix_seed(cfg.model_seed, 11));
        const int d = cfg.enc.sam_dim;
        gsm_ = GsmModule<T>(params_, cfg.enc.clip_dim, d, rng);
        if (cfg.lgm_enabled) lgm_ = LgmModule<T>(params_, d, cfg.lgm_blocks, cfg.lgm_heads, rng);
        if (cfg.vtpg_enabled)
            vtpg_ = VtpgModule<T>(params_, cfg.enc.text_dim, d, cfg.vtpg_tokens, cfg.vtpg_heads, rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }
    const GsmModule<T>& gsm() const { return gsm_; }
    const LgmModule<T>& lgm() const { return lgm_; }
    const VtpgModule<T>& vtpg() const { return vtpg_; }

    std::int64_t count_learnables() const { return params_.scalar_count(); }

    /// Training forward: needs the query mask for the two losses.
    ForwardResult<T> train_forward(Tape<T>& t, const FrozenBundle<T>& enc, const Episode& ep,
                                   const ForwardOptions<T>& opt) const {
        std::vector<const Image*> sup;
        std::vector<const BinaryMask*> supm;
        for (const auto& s : ep.supports) {
            sup.push_back(&s.first);
            supm.push_back(&s.second);
        }
        return run(t, enc, sup, supm, ep.query_image, ep.class_name, &ep.query_mask, opt);
    }

    /// Inference forward: the query mask is not part of the signature.
    ForwardResult<T> predict(Tape<T>& t, const FrozenBundle<T>& enc,
                             const std::vector<const Image*>& support_images,
                             const std::vector<const BinaryMask*>& support_masks, const Image& query,
                             const std::string& class_name, const ForwardOptions<T>& opt) const {
        return run(t, enc, support_images, support_masks, query, class_name, nullptr, opt);
    }

private:
    ModelConfig cfg_;
    ParamStore<T> params_;
    GsmModule<T> gsm_;
    LgmModule<T> lgm_;
    VtpgModule<T> vtpg_;

    ForwardResult<T> run(Tape<T>& t, const FrozenBundle<T>& enc, const std::vector<const Image*>& sup_imgs,
                         const std::vector<const BinaryMask*>& sup_masks, const Image& query,
                         const std::string& class_name, const BinaryMask* query_mask,
                         const ForwardOptions<T>& opt) const {
        using Ref = typename Tape<T>::Ref;
        const EncoderConfig& ec = enc.config();
        const int h = ec.sam_grid(), hw = h * h, d = ec.sam_dim;
        ForwardResult<T> res;

        auto text_fg = enc.clip_text_encode(format_prompt(cfg_.text_fg_template, class_name));
        auto text_bg = enc.clip_text_encode(format_prompt(cfg_.text_bg_template, class_name));

        // GSM: support prototypes and the aligned query feature
        std::vector<Ref> protos, aligned_supports;
        for (std::size_t k = 0; k < sup_imgs.size(); ++k) {
            const auto& feats = enc.clip_visual_encode(*sup_imgs[k]);
            auto resized = resize_to_grid(feats.patch, h, h).reshaped({ec.clip_dim, hw});
            auto aligned = gsm_.map_support(t, t.constant(std::move(resized)));
            aligned_supports.push_back(aligned);
            protos.push_back(masked_average_pool(t, aligned, mask_to_grid<T>(*sup_masks[k], h, h)));
        }
        auto prototype = kshot_prototype(t, protos);

        const auto& clip_q = enc.clip_visual_encode(query);
        auto f_q_clip = gsm_.map_query(t, t.constant(resize_to_grid(clip_q.patch, h, h).reshaped({ec.clip_dim, hw})));
        Ref f_q_sam = t.constant(enc.sam_encode(query).reshaped({d, hw}));

        Ref f_q_fin;
        Tensor<T> g_fin_values;
        if (cfg_.lgm_enabled) {
            // fixed local guidance from softmax-GradCAM over the frozen features;
            // the encoder neck centers the patch tokens, so v_q is the token
            // mean rebased by the pre-centering pooled vector (the value equals
            // the raw pooled vector while the gradient still reaches the tokens)
            auto grad = enc.clip_visual_gradient(query, [&](Tape<T>& gt, Ref x) {
                auto v = gt.masked_mean_cols(x, Tensor<T>::full({gt.value(x).cols()}, T(1)));
                v = gt.add(v, gt.constant(clip_q.pooled));
                return similarity_scores(gt, v, text_fg.values, text_bg.values, cfg_.tau).s_fg;
            });
            auto gini = gradcam_guidance(clip_q.patch, grad);
            res.gini_degenerate = gini.degenerate;
            res.g_ini_clipgrid = gini.map;
            res.g_ini = resize_bilinear(gini.map, h, h);
            Tensor<T> g_ini_flat = res.g_ini.reshaped({hw});

            auto box = box_from_guidance(res.g_ini, cfg_.box_threshold);
            res.box_fallback = box.fallback;

            auto f_con = lgm_.consistent_fusion(t, prototype, f_q_clip, g_ini_flat);
            auto sa = lgm_.self_attend(t, f_con);
            auto avg = average_attention(t, sa.attention, cfg_.avg_last);
            auto s_norm = sinkhorn_normalize(t, avg, cfg_.sinkhorn_iters, cfg_.sinkhorn_tol);
            auto h_mat = high_order_refine(t, s_norm);
            res.g_ref = refine_guidance(t, box.mask.reshaped({hw}), h_mat, g_ini_flat);
            res.g_fin = final_guidance(t, g_ini_flat, res.g_ref);
            f_q_fin = lgm_.final_clip_feature(t, sa.features, res.g_fin);
            g_fin_values = t.value(res.g_fin).reshaped({h, h});
        } else {
            f_q_fin = f_q_clip;
            g_fin_values = Tensor<T>::zeros({h, h});
        }

        Rng point_rng(opt.point_seed);
        res.points = sample_points(g_fin_values, cfg_.points_fg, cfg_.points_bg, point_rng);

        Ref q_clip = -1, q_sam = -1;
        if (cfg_.vtpg_enabled) {
            Tensor<T> pe = sinusoidal_pe_2d<T>(h, h, d);
            Ref vis_clip = f_q_fin, vis_sam = f_q_sam;
            if (cfg_.prompt_source == "s") {
                auto sup_mean = mean_refs(t, aligned_supports);
                vis_clip = sup_mean;
                vis_sam = sup_mean;
            }
            q_clip = vtpg_.clip_path.generate_prompt(t, vtpg_.clip_path.expand_text(t, text_fg.values), vis_clip, pe).tokens;
            q_sam = vtpg_.sam_path.generate_prompt(t, vtpg_.sam_path.expand_text(t, text_fg.values), vis_sam, pe).tokens;
        }

        auto pair = decode_pair(t, enc.decoder(), f_q_fin, f_q_sam, q_clip, q_sam, res.points);
        res.p_clip = pair.p_clip;
        res.p_sam = pair.p_sam;
        res.p_fused = fuse(t, pair, opt.alpha);

        if (opt.training) {
            if (query_mask == nullptr) throw std::invalid_argument("train forward: missing query mask");
            if (cfg_.lgm_enabled) {
                auto f_miss = missed_foreground(mask_to_grid<T>(*query_mask, h, h), res.g_ini.reshaped({hw}));
                res.loss_ref = refinement_loss(t, res.g_ref, f_miss);
            } else {
                res.loss_ref = t.constant(Tensor<T>::scalar(T(0)));
            }
            Tensor<T> qm({ec.image_size, ec.image_size});
            for (std::int64_t i = 0; i < qm.size(); ++i) qm[i] = static_cast<T>(query_mask->pixels[i]);
            res.loss_pred = prediction_loss(t, res.p_fused, qm);
            res.loss = total_loss(t, res.loss_ref, res.loss_pred, opt.beta);
        }
        return res;
    }
};

}  // namespace usd
