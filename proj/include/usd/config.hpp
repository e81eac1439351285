#pragma once

#include <json.hpp>
#include <string>

#include "usd/pipeline.hpp"

namespace usd {

using Json = nlohmann::json;

struct TrainConfig {
    int epochs = 50;
    int batch_size = 8;
    double learning_rate = 4e-4;
    double alpha = 0.5;
    double beta = 0.5;
    std::uint64_t seed = 0;
    int fold = 0;
    int num_folds = 4;
    int k_shot = 1;
    int max_steps = 0;  // 0 -> epochs * ceil(train_images / batch_size)
    double grad_clip = 1.0;
};

struct EvalConfig {
    int episodes = 200;
    int shots = 1;
    std::uint64_t seed = 9000;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    EvalConfig eval;
    std::string dataset_root;
    std::string out_dir;
};

namespace cfgdetail {
template <typename V>
void get(const Json& j, const char* key, V& out) {
    if (j.contains(key)) out = j.at(key).get<V>();
}
}  // namespace cfgdetail

inline Json to_json(const ModelConfig& m) {
    return Json{
        {"image_size", m.enc.image_size},
        {"encoder",
         {{"seed", m.enc.seed},
          {"patch", m.enc.patch},
          {"clip_dim", m.enc.clip_dim},
          {"clip_blocks", m.enc.clip_blocks},
          {"clip_heads", m.enc.clip_heads},
          {"text_dim", m.enc.text_dim},
          {"sam_dim", m.enc.sam_dim},
          {"dec_heads", m.enc.dec_heads}}},
        {"lgm",
         {{"tau", m.tau},
          {"blocks", m.lgm_blocks},
          {"heads", m.lgm_heads},
          {"avg_last", m.avg_last},
          {"sinkhorn_iters", m.sinkhorn_iters},
          {"sinkhorn_tol", m.sinkhorn_tol},
          {"box_threshold", m.box_threshold},
          {"points_fg", m.points_fg},
          {"points_bg", m.points_bg},
          {"enabled", m.lgm_enabled}}},
        {"vtpg", {{"tokens", m.vtpg_tokens}, {"heads", m.vtpg_heads}, {"enabled", m.vtpg_enabled}}},
        {"text", {{"fg", m.text_fg_template}, {"bg", m.text_bg_template}}},
        {"prompt_source", m.prompt_source},
        {"model_seed", m.model_seed}};
}

inline ModelConfig model_from_json(const Json& j) {
    using cfgdetail::get;
    ModelConfig m;
    get(j, "image_size", m.enc.image_size);
    if (j.contains("encoder")) {
        const Json& e = j.at("encoder");
        get(e, "seed", m.enc.seed);
        get(e, "patch", m.enc.patch);
        get(e, "clip_dim", m.enc.clip_dim);
        get(e, "clip_blocks", m.enc.clip_blocks);
        get(e, "clip_heads", m.enc.clip_heads);
        get(e, "text_dim", m.enc.text_dim);
        get(e, "sam_dim", m.enc.sam_dim);
        get(e, "dec_heads", m.enc.dec_heads);
    }
    if (j.contains("lgm")) {
        const Json& l = j.at("lgm");
        get(l, "tau", m.tau);
        get(l, "blocks", m.lgm_blocks);
        get(l, "heads", m.lgm_heads);
        get(l, "avg_last", m.avg_last);
        get(l, "sinkhorn_iters", m.sinkhorn_iters);
        get(l, "sinkhorn_tol", m.sinkhorn_tol);
        get(l, "box_threshold", m.box_threshold);
        get(l, "points_fg", m.points_fg);
        get(l, "points_bg", m.points_bg);
        get(l, "enabled", m.lgm_enabled);
    }
    if (j.contains("vtpg")) {
        const Json& v = j.at("vtpg");
        get(v, "tokens", m.vtpg_tokens);
        get(v, "heads", m.vtpg_heads);
        get(v, "enabled", m.vtpg_enabled);
    }
    if (j.contains("text")) {
        get(j.at("text"), "fg", m.text_fg_template);
        get(j.at("text"), "bg", m.text_bg_template);
    }
    get(j, "prompt_source", m.prompt_source);
    get(j, "model_seed", m.model_seed);
    return m;
}

inline Json to_json(const TrainConfig& t) {
    return Json{{"epochs", t.epochs},       {"batch_size", t.batch_size}, {"learning_rate", t.learning_rate},
                {"alpha", t.alpha},         {"beta", t.beta},             {"seed", t.seed},
                {"fold", t.fold},           {"num_folds", t.num_folds},   {"k_shot", t.k_shot},
                {"max_steps", t.max_steps}, {"grad_clip", t.grad_clip}};
}

inline TrainConfig train_from_json(const Json& j) {
    using cfgdetail::get;
    TrainConfig t;
    get(j, "epochs", t.epochs);
    get(j, "batch_size", t.batch_size);
    get(j, "learning_rate", t.learning_rate);
    get(j, "alpha", t.alpha);
    get(j, "beta", t.beta);
    get(j, "seed", t.seed);
    get(j, "fold", t.fold);
    get(j, "num_folds", t.num_folds);
    get(j, "k_shot", t.k_shot);
    get(j, "max_steps", t.max_steps);
    get(j, "grad_clip", t.grad_clip);
    return t;
}

inline Json to_json(const EvalConfig& e) {
    return Json{{"episodes", e.episodes}, {"shots", e.shots}, {"seed", e.seed}};
}

inline EvalConfig eval_from_json(const Json& j) {
    using cfgdetail::get;
    EvalConfig e;
    get(j, "episodes", e.episodes);
    get(j, "shots", e.shots);
    get(j, "seed", e.seed);
    return e;
}

inline Json to_json(const RunConfig& r) {
    Json j = to_json(r.model);
    j["train"] = to_json(r.train);
    j["eval"] = to_json(r.eval);
    j["dataset_root"] = r.dataset_root;
    j["out_dir"] = r.out_dir;
    return j;
}

inline RunConfig run_from_json(const Json& j) {
    using cfgdetail::get;
    RunConfig r;
    r.model = model_from_json(j);
    if (j.contains("train")) r.train = train_from_json(j.at("train"));
    if (j.contains("eval")) r.eval = eval_from_json(j.at("eval"));
    get(j, "dataset_root", r.dataset_root);
    get(j, "out_dir", r.out_dir);
    return r;
}

}  // namespace usd
