#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "usd/evaluation.hpp"
#include "usd/png_io.hpp"
#include "usd/training.hpp"

namespace fs = std::filesystem;
using usd::Json;
using usd::RunConfig;

namespace {

using Real = float;

std::string utc_stamp() {
    auto now = std::chrono::system_clock::now();
    std::time_t tt = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
    return buf;
}

fs::path make_run_dir(const std::string& out_base, const std::string& run_name) {
    fs::path dir = fs::path(out_base) / (run_name.empty() ? utc_stamp() : run_name);
    fs::create_directories(dir);
    return dir;
}

void write_text(const fs::path& p, const std::string& content) {
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << content;
}

void write_resolved(const fs::path& dir, const std::string& command, const RunConfig& rc) {
    Json j = usd::to_json(rc);
    j["command"] = command;
    write_text(dir / "resolved_config.json", j.dump(2) + "\n");
}

std::string dataset_root_or_env(std::string data) {
    if (!data.empty()) return data;
    const char* env = std::getenv("USD_DATA_ROOT");
    if (env && *env) return env;
    throw std::invalid_argument("no dataset root: pass --data or set USD_DATA_ROOT");
}

struct CommonOpts {
    std::string config_file, data, out, run_name;
    RunConfig rc;

    void attach(CLI::App* cmd, bool with_model_flags) {
        cmd->add_option("--config", config_file, "base config file (JSON); flags override");
        cmd->add_option("--data", data, "dataset root (fallback: USD_DATA_ROOT)");
        cmd->add_option("--out", out, "output base directory")->required();
        cmd->add_option("--run-name", run_name, "run directory name (default: UTC timestamp)");
        if (!with_model_flags) return;
        cmd->add_option("--image-size", rc.model.enc.image_size);
        cmd->add_option("--patch", rc.model.enc.patch);
        cmd->add_option("--clip-dim", rc.model.enc.clip_dim);
        cmd->add_option("--sam-dim", rc.model.enc.sam_dim);
        cmd->add_option("--encoder-seed", rc.model.enc.seed);
        cmd->add_option("--tau", rc.model.tau);
        cmd->add_option("--lgm-blocks", rc.model.lgm_blocks);
        cmd->add_option("--avg-last", rc.model.avg_last);
        cmd->add_option("--tokens", rc.model.vtpg_tokens);
        cmd->add_option("--text-fg", rc.model.text_fg_template);
        cmd->add_option("--text-bg", rc.model.text_bg_template);
        cmd->add_option("--prompt-source", rc.model.prompt_source)->check(CLI::IsMember({"sq", "s"}));
        cmd->add_option("--model-seed", rc.model.model_seed);
        cmd->add_flag_callback("--no-lgm", [this] { rc.model.lgm_enabled = false; });
        cmd->add_flag_callback("--no-vtpg", [this] { rc.model.vtpg_enabled = false; });
        cmd->add_option("--epochs", rc.train.epochs);
        cmd->add_option("--batch", rc.train.batch_size);
        cmd->add_option("--lr", rc.train.learning_rate);
        cmd->add_option("--alpha", rc.train.alpha);
        cmd->add_option("--beta", rc.train.beta);
        cmd->add_option("--seed", rc.train.seed);
        cmd->add_option("--fold", rc.train.fold);
        cmd->add_option("--folds", rc.train.num_folds);
        cmd->add_option("--kshot", rc.train.k_shot);
        cmd->add_option("--steps", rc.train.max_steps, "step cap (0: epochs over the train images)");
        cmd->add_option("--episodes", rc.eval.episodes);
        cmd->add_option("--shots", rc.eval.shots);
        cmd->add_option("--eval-seed", rc.eval.seed);
    }

    /// Layers the config file under any explicitly passed flags.
    void finalize(CLI::App* cmd) {
        if (!config_file.empty()) {
            std::ifstream in(config_file);
            if (!in) throw std::runtime_error("cannot read config " + config_file);
            RunConfig keep = rc;
            rc = usd::run_from_json(Json::parse(in));
            if (cmd->count("--image-size")) rc.model.enc.image_size = keep.model.enc.image_size;
            if (cmd->count("--patch")) rc.model.enc.patch = keep.model.enc.patch;
            if (cmd->count("--clip-dim")) rc.model.enc.clip_dim = keep.model.enc.clip_dim;
            if (cmd->count("--sam-dim")) rc.model.enc.sam_dim = keep.model.enc.sam_dim;
            if (cmd->count("--encoder-seed")) rc.model.enc.seed = keep.model.enc.seed;
            if (cmd->count("--tau")) rc.model.tau = keep.model.tau;
            if (cmd->count("--lgm-blocks")) rc.model.lgm_blocks = keep.model.lgm_blocks;
            if (cmd->count("--avg-last")) rc.model.avg_last = keep.model.avg_last;
            if (cmd->count("--tokens")) rc.model.vtpg_tokens = keep.model.vtpg_tokens;
            if (cmd->count("--text-fg")) rc.model.text_fg_template = keep.model.text_fg_template;
            if (cmd->count("--text-bg")) rc.model.text_bg_template = keep.model.text_bg_template;
            if (cmd->count("--prompt-source")) rc.model.prompt_source = keep.model.prompt_source;
            if (cmd->count("--model-seed")) rc.model.model_seed = keep.model.model_seed;
            if (cmd->count("--no-lgm")) rc.model.lgm_enabled = false;
            if (cmd->count("--no-vtpg")) rc.model.vtpg_enabled = false;
            if (cmd->count("--epochs")) rc.train.epochs = keep.train.epochs;
            if (cmd->count("--batch")) rc.train.batch_size = keep.train.batch_size;
            if (cmd->count("--lr")) rc.train.learning_rate = keep.train.learning_rate;
            if (cmd->count("--alpha")) rc.train.alpha = keep.train.alpha;
            if (cmd->count("--beta")) rc.train.beta = keep.train.beta;
            if (cmd->count("--seed")) rc.train.seed = keep.train.seed;
            if (cmd->count("--fold")) rc.train.fold = keep.train.fold;
            if (cmd->count("--folds")) rc.train.num_folds = keep.train.num_folds;
            if (cmd->count("--kshot")) rc.train.k_shot = keep.train.k_shot;
            if (cmd->count("--steps")) rc.train.max_steps = keep.train.max_steps;
            if (cmd->count("--episodes")) rc.eval.episodes = keep.eval.episodes;
            if (cmd->count("--shots")) rc.eval.shots = keep.eval.shots;
            if (cmd->count("--eval-seed")) rc.eval.seed = keep.eval.seed;
            if (data.empty()) data = rc.dataset_root;
        }
        // the similarity scores require the text dim to match the clip dim
        if (cmd->count("--clip-dim")) rc.model.enc.text_dim = rc.model.enc.clip_dim;
        rc.dataset_root = dataset_root_or_env(data);
        rc.out_dir = out;
    }
};

int cmd_synth(const std::string& out, int classes, int per_class, int size, std::uint64_t seed) {
    usd::Dataset ds = usd::generate_synthetic_dataset(out, classes, per_class, size, seed);
    int pairs = 0;
    for (int c = 0; c < ds.class_count(); ++c) pairs += ds.samples_of(c);
    Json resolved{{"command", "synth"},     {"out", out},   {"classes", classes},
                  {"per_class", per_class}, {"size", size}, {"seed", seed}};
    write_text(fs::path(out) / "synth_resolved.json", resolved.dump(2) + "\n");
    std::printf("dataset at %s: %d classes, %d image/mask pairs, %dx%d\n", out.c_str(), ds.class_count(), pairs,
                size, size);
    for (const auto& c : ds.classes) std::printf("  %s\n", c.c_str());
    return 0;
}

int cmd_train(CommonOpts& o) {
    usd::Dataset ds = usd::load_dataset(o.rc.dataset_root);
    fs::path dir = make_run_dir(o.out, o.run_name);
    write_resolved(dir, "train", o.rc);

    auto run = usd::train_run<Real>(o.rc, ds, &std::cerr);

    std::string log;
    for (const auto& e : run.stats.log) {
        Json j{{"step", e.step}, {"loss", e.loss}, {"loss_ref", e.loss_ref}, {"loss_pred", e.loss_pred}};
        log += j.dump() + "\n";
    }
    write_text(dir / "loss_log.jsonl", log);

    Json cfg = usd::to_json(o.rc);
    cfg["command"] = "train";
    usd::save_checkpoint((dir / "checkpoint.usd").string(), *run.model, run.adam, run.stats.steps, cfg,
                         run.bundle->fingerprint());
    Json manifest{{"steps", run.stats.steps},
                  {"final_loss", run.stats.log.empty() ? 0.0 : run.stats.log.back().loss},
                  {"learnable_scalars", run.model->count_learnables()},
                  {"frozen_fingerprint", run.bundle->fingerprint()},
                  {"train_classes", Json::array()},
                  {"config", cfg}};
    for (int c : run.split.train_classes) manifest["train_classes"].push_back(ds.classes[c]);
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    std::printf("checkpoint: %s\n", (dir / "checkpoint.usd").c_str());
    std::printf("steps %d, final loss %.4f, learnables %lld\n", run.stats.steps,
                run.stats.log.empty() ? 0.0 : run.stats.log.back().loss,
                static_cast<long long>(run.model->count_learnables()));
    return 0;
}

struct EvalOpts {
    std::string checkpoint, classes = "test", path = "fused";
    double alpha = -1;  // <0: use the checkpoint's training alpha
    bool dump_guidance = false;
};

int cmd_eval(CommonOpts& o, EvalOpts& e, CLI::App* cmd) {
    auto hdr = usd::read_checkpoint_header(e.checkpoint);
    RunConfig rc = usd::run_from_json(hdr.config);
    if (cmd->count("--episodes")) rc.eval.episodes = o.rc.eval.episodes;
    if (cmd->count("--shots")) rc.eval.shots = o.rc.eval.shots;
    if (cmd->count("--eval-seed")) rc.eval.seed = o.rc.eval.seed;
    if (cmd->count("--fold")) rc.train.fold = o.rc.train.fold;
    std::string data = !o.data.empty() ? o.data : rc.dataset_root;
    rc.dataset_root = dataset_root_or_env(data);
    rc.out_dir = o.out;

    usd::Dataset ds = usd::load_dataset(rc.dataset_root);
    usd::FrozenBundle<Real> enc(rc.model.enc);
    usd::UsdModel<Real> model(rc.model);
    usd::Adam<Real> adam;
    usd::load_checkpoint(e.checkpoint, model, adam, enc);

    auto split = usd::make_fold_split(ds.class_count(), rc.train.num_folds, rc.train.fold);
    const auto& pool = e.classes == "train" ? split.train_classes : split.test_classes;
    double alpha = e.alpha >= 0 ? e.alpha : rc.train.alpha;
    usd::FusePath fuse_path = e.path == "sam"    ? usd::FusePath::SamOnly
                              : e.path == "clip" ? usd::FusePath::ClipOnly
                                                 : usd::FusePath::Fused;

    fs::path dir = make_run_dir(o.out, o.run_name);
    write_resolved(dir, "eval", rc);

    auto rep = usd::evaluate_model<Real>(model, enc, ds, split, pool, rc.eval.shots, rc.eval.episodes,
                                         rc.eval.seed, alpha, fuse_path);
    Json rj = usd::to_json(rep);
    rj["classes"] = e.classes;
    rj["alpha"] = alpha;
    rj["path"] = e.path;
    write_text(dir / "report.json", rj.dump(2) + "\n");

    if (e.dump_guidance) {
        fs::path gd = dir / "guidance";
        fs::create_directories(gd);
        for (int i = 0; i < std::min(rc.eval.episodes, 8); ++i) {
            usd::Rng rng(usd::mix_seed(rc.eval.seed, 555, static_cast<std::uint64_t>(i)));
            auto ep = usd::sample_episode(ds, pool, 1, rng);
            usd::Tape<Real> tape;
            usd::ForwardOptions<Real> fo;
            fo.alpha = alpha;
            fo.point_seed = usd::mix_seed(rc.eval.seed, static_cast<std::uint64_t>(i), 0);
            std::vector<const usd::Image*> si{&ep.supports[0].first};
            std::vector<const usd::BinaryMask*> sm{&ep.supports[0].second};
            auto res = model.predict(tape, enc, si, sm, ep.query_image, ep.class_name, fo);
            auto tag = [&](const std::string& n) {
                return (gd / ("ep" + std::to_string(i) + "_" + n + ".png")).string();
            };
            if (res.g_ref >= 0) {
                const int g = rc.model.enc.sam_grid();
                usd::save_gray_png(tag("gini"), res.g_ini);
                usd::save_gray_png(tag("gref"), tape.value(res.g_ref).reshaped({g, g}));
                usd::save_gray_png(tag("gfin"), tape.value(res.g_fin).reshaped({g, g}));
            }
        }
    }

    std::printf("%s\n", rj.dump(2).c_str());
    return 0;
}

struct PredictOpts {
    std::string checkpoint, class_name;
    std::uint64_t episode_seed = 0;
};

int cmd_predict(CommonOpts& o, PredictOpts& p) {
    auto hdr = usd::read_checkpoint_header(p.checkpoint);
    RunConfig rc = usd::run_from_json(hdr.config);
    std::string data = !o.data.empty() ? o.data : rc.dataset_root;
    rc.dataset_root = dataset_root_or_env(data);

    usd::Dataset ds = usd::load_dataset(rc.dataset_root);
    usd::FrozenBundle<Real> enc(rc.model.enc);
    usd::UsdModel<Real> model(rc.model);
    usd::Adam<Real> adam;
    usd::load_checkpoint(p.checkpoint, model, adam, enc);

    int cls = -1;
    for (int c = 0; c < ds.class_count(); ++c)
        if (ds.classes[c] == p.class_name) cls = c;
    if (cls < 0) throw std::invalid_argument("unknown class '" + p.class_name + "'");

    usd::Rng rng(usd::mix_seed(p.episode_seed, 777));
    auto ep = usd::sample_episode(ds, {cls}, 1, rng);

    usd::Tape<Real> tape;
    usd::ForwardOptions<Real> fo;
    fo.alpha = rc.train.alpha;
    fo.point_seed = usd::mix_seed(p.episode_seed, 778);
    std::vector<const usd::Image*> si{&ep.supports[0].first};
    std::vector<const usd::BinaryMask*> sm{&ep.supports[0].second};
    auto res = model.predict(tape, enc, si, sm, ep.query_image, ep.class_name, fo);

    fs::path dir = make_run_dir(o.out, o.run_name);
    rc.out_dir = o.out;
    write_resolved(dir, "predict", rc);
    usd::save_gray_png((dir / "probability.png").string(), tape.value(res.p_fused));
    usd::save_mask_png((dir / "mask.png").string(), usd::binarize(tape.value(res.p_fused), 0.5));
    if (res.g_ref >= 0) {
        const int g = rc.model.enc.sam_grid();
        usd::save_gray_png((dir / "g_ini.png").string(), res.g_ini);
        usd::save_gray_png((dir / "g_ref.png").string(), tape.value(res.g_ref).reshaped({g, g}));
        usd::save_gray_png((dir / "g_fin.png").string(), tape.value(res.g_fin).reshaped({g, g}));
    }
    Json meta{{"episode", ep.id()},
              {"class", ep.class_name},
              {"query", ep.query_path},
              {"query_iou", usd::iou(usd::binarize(tape.value(res.p_fused), 0.5), ep.query_mask)}};
    write_text(dir / "episode.json", meta.dump(2) + "\n");
    std::printf("%s\n", meta.dump(2).c_str());
    return 0;
}

int cmd_ablate(CommonOpts& o, const std::string& axis, const std::string& grid_csv) {
    usd::Dataset ds = usd::load_dataset(o.rc.dataset_root);
    std::vector<std::string> grid;
    std::string cur;
    for (char c : grid_csv) {
        if (c == ',') {
            grid.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) grid.push_back(cur);
    if (grid.empty()) throw std::invalid_argument("ablate: empty grid");

    fs::path dir = make_run_dir(o.out, o.run_name);
    write_resolved(dir, "ablate", o.rc);

    auto sweep = usd::run_sweep<Real>(axis, grid, o.rc, ds, &std::cerr);
    write_text(dir / "sweep.json", usd::to_json(sweep).dump(2) + "\n");
    write_text(dir / "sweep.csv", usd::sweep_csv(sweep));
    std::printf("%s", usd::sweep_csv(sweep).c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot segmentation with frozen promptable-segmenter and text-image encoders"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "generate the synthetic shapes dataset");
    std::string synth_out;
    int synth_classes = 8, synth_per = 20, synth_size = 64;
    std::uint64_t synth_seed = 0;
    synth->add_option("--out", synth_out)->required();
    synth->add_option("--classes", synth_classes);
    synth->add_option("--per-class", synth_per);
    synth->add_option("--size", synth_size);
    synth->add_option("--seed", synth_seed);

    CommonOpts train_o;
    auto* train = app.add_subcommand("train", "train the learnable modules episodically");
    train_o.attach(train, true);

    CommonOpts eval_o;
    EvalOpts eval_e;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_o.attach(eval, true);
    eval->add_option("--checkpoint", eval_e.checkpoint)->required();
    eval->add_option("--classes", eval_e.classes)->check(CLI::IsMember({"test", "train"}));
    eval->add_option("--path", eval_e.path)->check(CLI::IsMember({"fused", "sam", "clip"}));
    eval->add_option("--alpha-override", eval_e.alpha);
    eval->add_flag("--dump-guidance", eval_e.dump_guidance);

    CommonOpts pred_o;
    PredictOpts pred_p;
    auto* predict = app.add_subcommand("predict", "run one episode and dump prediction + guidance maps");
    pred_o.attach(predict, false);
    predict->add_option("--checkpoint", pred_p.checkpoint)->required();
    predict->add_option("--class", pred_p.class_name)->required();
    predict->add_option("--episode-seed", pred_p.episode_seed);

    CommonOpts abl_o;
    std::string abl_axis, abl_grid;
    auto* ablate = app.add_subcommand("ablate", "sweep one ablation axis");
    abl_o.attach(ablate, true);
    ablate->add_option("--axis", abl_axis)
        ->required()
        ->check(CLI::IsMember({"alpha", "beta", "avg_last", "text", "feature_source", "prompt_source", "vtpg", "lgm"}));
    ablate->add_option("--grid", abl_grid)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (synth->parsed()) return cmd_synth(synth_out, synth_classes, synth_per, synth_size, synth_seed);
        if (train->parsed()) {
            train_o.finalize(train);
            return cmd_train(train_o);
        }
        if (eval->parsed()) return cmd_eval(eval_o, eval_e, eval);
        if (predict->parsed()) return cmd_predict(pred_o, pred_p);
        if (ablate->parsed()) {
            abl_o.finalize(ablate);
            return cmd_ablate(abl_o, abl_axis, abl_grid);
        }
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
