#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "usd/decoding.hpp"
#include "usd/training.hpp"

namespace usd {

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

/// |pred ∧ gt| / |pred ∨ gt|, defined as 1 when both masks are empty.
inline double iou(const BinaryMask& pred, const BinaryMask& gt) {
    if (pred.pixels.shape != gt.pixels.shape) throw std::invalid_argument("iou: shape mismatch");
    std::int64_t inter = 0, uni = 0;
    for (std::int64_t i = 0; i < pred.pixels.size(); ++i) {
        inter += pred.pixels[i] & gt.pixels[i];
        uni += pred.pixels[i] | gt.pixels[i];
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Mean of foreground and background IoU, each over pixel counts aggregated
/// across the whole episode list.
inline double fb_iou(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts) {
    if (preds.empty() || preds.size() != gts.size()) throw std::invalid_argument("fb_iou: empty or unaligned lists");
    std::int64_t fg_i = 0, fg_u = 0, bg_i = 0, bg_u = 0;
    for (std::size_t e = 0; e < preds.size(); ++e) {
        const auto& p = preds[e].pixels;
        const auto& g = gts[e].pixels;
        if (p.shape != g.shape) throw std::invalid_argument("fb_iou: shape mismatch");
        for (std::int64_t i = 0; i < p.size(); ++i) {
            fg_i += p[i] & g[i];
            fg_u += p[i] | g[i];
            bg_i += (1 - p[i]) & (1 - g[i]);
            bg_u += (1 - p[i]) | (1 - g[i]);
        }
    }
    double fg = fg_u == 0 ? 1.0 : static_cast<double>(fg_i) / static_cast<double>(fg_u);
    double bg = bg_u == 0 ? 1.0 : static_cast<double>(bg_i) / static_cast<double>(bg_u);
    return 0.5 * (fg + bg);
}

/// Element-wise mean of the per-support probability maps.
template <typename T>
Tensor<T> aggregate_kshot(const std::vector<Tensor<T>>& probs) {
    if (probs.empty()) throw std::invalid_argument("aggregate_kshot: empty list");
    Tensor<T> out = probs[0];
    for (std::size_t k = 1; k < probs.size(); ++k)
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] += probs[k][i];
    for (auto& v : out.data) v /= static_cast<T>(probs.size());
    return out;
}

struct MetricsReport {
    std::map<std::string, double> per_class_iou;
    double miou = 0;
    double fb_iou = 0;
    int episode_count = 0;
    int fold = 0;
    int shots = 1;
};

inline Json to_json(const MetricsReport& r) {
    Json pc = Json::object();
    for (const auto& [k, v] : r.per_class_iou) pc[k] = v;
    return Json{{"per_class_iou", pc}, {"miou", r.miou},   {"fb_iou", r.fb_iou},
                {"episode_count", r.episode_count}, {"fold", r.fold}, {"shots", r.shots}};
}

// ---------------------------------------------------------------------------
// episodic evaluation
// ---------------------------------------------------------------------------

/// A predictor maps a single-support episode (plus a point-sampling seed) to
/// an image-resolution probability map. The query mask never reaches it.
template <typename T>
using Predictor = std::function<Tensor<T>(const Episode&, std::uint64_t)>;

/// K-shot protocol: K independent 1-shot passes whose probability maps are
/// averaged, then binarized. Per-class IoU accumulates intersection/union
/// counts across episodes before dividing.
template <typename T>
MetricsReport evaluate_with(const Predictor<T>& predictor, const Dataset& ds, const FoldSplit& split,
                            const std::set<int>& class_pool, int shots, int episodes, std::uint64_t seed) {
    if (class_pool.empty()) throw std::invalid_argument("evaluate: empty class pool");
    std::map<std::string, std::pair<std::int64_t, std::int64_t>> class_counts;  // class -> (inter, union)
    std::vector<BinaryMask> all_preds, all_gts;
    for (int e = 0; e < episodes; ++e) {
        Rng rng(mix_seed(seed, 555, static_cast<std::uint64_t>(e)));
        Episode ep = sample_episode(ds, class_pool, shots, rng);
        std::vector<Tensor<T>> probs;
        for (int k = 0; k < shots; ++k) {
            Episode single;
            single.supports.push_back(ep.supports[k]);
            single.support_paths.push_back(ep.support_paths[k]);
            single.query_image = ep.query_image;
            single.query_mask = ep.query_mask;  // reachable for injected oracles; the model path never reads it
            single.query_path = ep.query_path;
            single.class_name = ep.class_name;
            single.class_id = ep.class_id;
            probs.push_back(predictor(single, mix_seed(seed, static_cast<std::uint64_t>(e), k)));
        }
        BinaryMask pred = binarize(aggregate_kshot(probs), 0.5);
        auto& cc = class_counts[ep.class_name];
        for (std::int64_t i = 0; i < pred.pixels.size(); ++i) {
            cc.first += pred.pixels[i] & ep.query_mask.pixels[i];
            cc.second += pred.pixels[i] | ep.query_mask.pixels[i];
        }
        all_preds.push_back(std::move(pred));
        all_gts.push_back(ep.query_mask);
    }
    MetricsReport rep;
    rep.episode_count = episodes;
    rep.fold = split.fold_index;
    rep.shots = shots;
    double sum = 0;
    for (const auto& [name, cc] : class_counts) {
        double v = cc.second == 0 ? 1.0 : static_cast<double>(cc.first) / static_cast<double>(cc.second);
        rep.per_class_iou[name] = v;
        sum += v;
    }
    rep.miou = class_counts.empty() ? 0.0 : sum / static_cast<double>(class_counts.size());
    rep.fb_iou = fb_iou(all_preds, all_gts);
    return rep;
}

enum class FusePath { Fused, SamOnly, ClipOnly };

/// Wraps the model as an evaluation predictor; `path` selects the fused
/// output or one of the two decoder paths (the ablation on features sent to
/// the decoder).
template <typename T>
Predictor<T> make_model_predictor(const UsdModel<T>& model, const FrozenBundle<T>& enc, double alpha,
                                  FusePath path = FusePath::Fused) {
    return [&model, &enc, alpha, path](const Episode& ep, std::uint64_t point_seed) {
        Tape<T> tape;
        std::vector<const Image*> sup;
        std::vector<const BinaryMask*> supm;
        for (const auto& s : ep.supports) {
            sup.push_back(&s.first);
            supm.push_back(&s.second);
        }
        ForwardOptions<T> fo;
        fo.training = false;
        fo.alpha = alpha;
        fo.point_seed = point_seed;
        auto res = model.predict(tape, enc, sup, supm, ep.query_image, ep.class_name, fo);
        auto pick = path == FusePath::Fused ? res.p_fused : (path == FusePath::SamOnly ? res.p_sam : res.p_clip);
        return tape.value(pick);
    };
}

template <typename T>
MetricsReport evaluate_model(const UsdModel<T>& model, const FrozenBundle<T>& enc, const Dataset& ds,
                             const FoldSplit& split, const std::set<int>& class_pool, int shots, int episodes,
                             std::uint64_t seed, double alpha, FusePath path = FusePath::Fused) {
    auto pred = make_model_predictor<T>(model, enc, alpha, path);
    return evaluate_with<T>(pred, ds, split, class_pool, shots, episodes, seed);
}

// ---------------------------------------------------------------------------
// sweeps
// ---------------------------------------------------------------------------

struct SweepResult {
    std::string axis;
    std::vector<std::string> values;
    std::vector<double> miou;
    std::vector<double> fb_iou;
};

inline Json to_json(const SweepResult& s) {
    Json rows = Json::array();
    for (std::size_t i = 0; i < s.values.size(); ++i)
        rows.push_back({{"value", s.values[i]}, {"miou", s.miou[i]}, {"fb_iou", s.fb_iou[i]}});
    return Json{{"axis", s.axis}, {"rows", rows}};
}

inline std::string sweep_csv(const SweepResult& s) {
    std::string out = "axis,value,miou,fb_iou\n";
    for (std::size_t i = 0; i < s.values.size(); ++i) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%s,%s,%.6f,%.6f\n", s.axis.c_str(), s.values[i].c_str(), s.miou[i],
                      s.fb_iou[i]);
        out += buf;
    }
    return out;
}

template <typename T>
struct TrainedRun {
    std::unique_ptr<FrozenBundle<T>> bundle;
    std::unique_ptr<UsdModel<T>> model;
    Adam<T> adam;
    TrainStats stats;
    FoldSplit split;
};

/// Train a model per the run config (fresh frozen bundle + learnables).
template <typename T>
TrainedRun<T> train_run(const RunConfig& rc, const Dataset& ds, std::ostream* progress = nullptr) {
    TrainedRun<T> run;
    run.split = make_fold_split(ds.class_count(), rc.train.num_folds, rc.train.fold);
    run.bundle = std::make_unique<FrozenBundle<T>>(rc.model.enc);
    run.model = std::make_unique<UsdModel<T>>(rc.model);
    run.adam.init(run.model->params());
    run.stats = train(*run.model, run.adam, *run.bundle, ds, run.split, rc.train, progress);
    return run;
}

/// One sweep axis, shared training seed. Inference-time axes (alpha, feature
/// source) reuse a single checkpoint; the others retrain per grid value.
template <typename T>
SweepResult run_sweep(const std::string& axis, const std::vector<std::string>& grid, const RunConfig& base,
                      const Dataset& ds, std::ostream* progress = nullptr) {
    SweepResult out;
    out.axis = axis;
    auto eval_run = [&](const TrainedRun<T>& run, double alpha, FusePath path) {
        return evaluate_model<T>(*run.model, *run.bundle, ds, run.split, run.split.test_classes, base.eval.shots,
                                 base.eval.episodes, base.eval.seed, alpha, path);
    };

    if (axis == "alpha" || axis == "feature_source") {
        auto run = train_run<T>(base, ds, progress);
        for (const auto& v : grid) {
            MetricsReport rep;
            if (axis == "alpha")
                rep = eval_run(run, std::stod(v), FusePath::Fused);
            else if (v == "fused")
                rep = eval_run(run, base.train.alpha, FusePath::Fused);
            else if (v == "sam")
                rep = eval_run(run, 1.0, FusePath::SamOnly);
            else if (v == "clip")
                rep = eval_run(run, 0.0, FusePath::ClipOnly);
            else
                throw std::invalid_argument("run_sweep: unknown feature source '" + v + "'");
            out.values.push_back(v);
            out.miou.push_back(rep.miou);
            out.fb_iou.push_back(rep.fb_iou);
        }
        return out;
    }

    for (const auto& v : grid) {
        RunConfig rc = base;
        if (axis == "beta") {
            rc.train.beta = std::stod(v);
        } else if (axis == "avg_last") {
            rc.model.avg_last = std::stoi(v);
        } else if (axis == "text") {
            auto bar = v.find('|');
            if (bar == std::string::npos) throw std::invalid_argument("run_sweep: text value must be 'fg|bg'");
            rc.model.text_fg_template = v.substr(0, bar);
            rc.model.text_bg_template = v.substr(bar + 1);
        } else if (axis == "prompt_source") {
            rc.model.prompt_source = v;
        } else if (axis == "vtpg") {
            rc.model.vtpg_enabled = (v == "on");
        } else if (axis == "lgm") {
            rc.model.lgm_enabled = (v == "on");
        } else {
            throw std::invalid_argument("run_sweep: unknown axis '" + axis + "'");
        }
        auto run = train_run<T>(rc, ds, progress);
        MetricsReport rep = eval_run(run, rc.train.alpha, FusePath::Fused);
        out.values.push_back(v);
        out.miou.push_back(rep.miou);
        out.fb_iou.push_back(rep.fb_iou);
    }
    return out;
}

}  // namespace usd
