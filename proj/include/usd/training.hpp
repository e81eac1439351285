#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "usd/config.hpp"
#include "usd/dataset.hpp"
#include "usd/pipeline.hpp"
#include "usd/serialize.hpp"

namespace usd {

/// Adaptive moment estimation over a ParamStore, with global-norm clipping.
template <typename T>
class Adam {
public:
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    void init(const ParamStore<T>& ps) {
        m_.clear();
        v_.clear();
        for (int i = 0; i < ps.count(); ++i) {
            m_.push_back(Tensor<T>::zeros(ps.value(i).shape));
            v_.push_back(Tensor<T>::zeros(ps.value(i).shape));
        }
        t_ = 0;
    }

    void step(ParamStore<T>& ps, double lr, double grad_clip) {
        double norm_sq = 0;
        for (int i = 0; i < ps.count(); ++i)
            for (T g : ps.grad(i).data) norm_sq += static_cast<double>(g) * g;
        double scale = 1.0;
        if (grad_clip > 0) {
            double norm = std::sqrt(norm_sq);
            if (norm > grad_clip) scale = grad_clip / norm;
        }
        ++t_;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (int i = 0; i < ps.count(); ++i) {
            Tensor<T>& x = ps.value(i);
            Tensor<T>& gr = ps.grad(i);
            Tensor<T>& m = m_[i];
            Tensor<T>& v = v_[i];
            for (std::int64_t j = 0; j < x.size(); ++j) {
                double g = scale * static_cast<double>(gr[j]);
                double mj = beta1 * m[j] + (1 - beta1) * g;
                double vj = beta2 * v[j] + (1 - beta2) * g * g;
                m[j] = static_cast<T>(mj);
                v[j] = static_cast<T>(vj);
                x[j] -= static_cast<T>(lr * (mj / c1) / (std::sqrt(vj / c2) + eps));
            }
        }
    }

    std::int64_t steps_taken() const { return t_; }
    std::vector<Tensor<T>>& moment1() { return m_; }
    std::vector<Tensor<T>>& moment2() { return v_; }
    void set_steps(std::int64_t t) { t_ = t; }

private:
    std::vector<Tensor<T>> m_, v_;
    std::int64_t t_ = 0;
};

struct TrainLogEntry {
    int step = 0;
    double loss = 0, loss_ref = 0, loss_pred = 0;
};

struct TrainStats {
    std::vector<TrainLogEntry> log;
    int steps = 0;
};

inline int train_image_count(const Dataset& ds, const FoldSplit& split) {
    int n = 0;
    for (int c : split.train_classes) n += ds.samples_of(c);
    return n;
}

inline int planned_steps(const Dataset& ds, const FoldSplit& split, const TrainConfig& tc) {
    if (tc.max_steps > 0) return tc.max_steps;
    int per_epoch = (train_image_count(ds, split) + tc.batch_size - 1) / tc.batch_size;
    return tc.epochs * per_epoch;
}

/// Episodic training loop. Batches are independent episodes sampled from the
/// train classes; gradients are averaged over the batch, stepped with Adam.
/// Deterministic for a fixed (seed, config, dataset).
template <typename T>
TrainStats train(UsdModel<T>& model, Adam<T>& opt, const FrozenBundle<T>& enc, const Dataset& ds,
                 const FoldSplit& split, const TrainConfig& tc, std::ostream* progress = nullptr) {
    if (split.train_classes.empty()) throw std::invalid_argument("train: empty train class set");
    TrainStats stats;
    stats.steps = planned_steps(ds, split, tc);
    for (int step = 0; step < stats.steps; ++step) {
        model.params().zero_grads();
        double loss_sum = 0, ref_sum = 0, pred_sum = 0;
        for (int slot = 0; slot < tc.batch_size; ++slot) {
            Rng ep_rng(mix_seed(tc.seed, static_cast<std::uint64_t>(step) * 2, slot));
            Episode ep = sample_episode(ds, split.train_classes, tc.k_shot, ep_rng);
            Tape<T> tape;
            ForwardOptions<T> fo;
            fo.training = true;
            fo.alpha = tc.alpha;
            fo.beta = tc.beta;
            fo.point_seed = mix_seed(tc.seed, static_cast<std::uint64_t>(step) * 2 + 1, slot);
            auto res = model.train_forward(tape, enc, ep, fo);
            double lv = static_cast<double>(tape.value(res.loss)[0]);
            if (!std::isfinite(lv))
                throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) +
                                         ", episode " + ep.id());
            loss_sum += lv;
            ref_sum += static_cast<double>(tape.value(res.loss_ref)[0]);
            pred_sum += static_cast<double>(tape.value(res.loss_pred)[0]);
            tape.backward(res.loss);
            model.params().accumulate_from(tape, static_cast<T>(1.0 / tc.batch_size));
        }
        opt.step(model.params(), tc.learning_rate, tc.grad_clip);
        stats.log.push_back({step, loss_sum / tc.batch_size, ref_sum / tc.batch_size, pred_sum / tc.batch_size});
        if (progress && (step % 50 == 0 || step + 1 == stats.steps))
            (*progress) << "step " << step << "/" << stats.steps << " loss " << stats.log.back().loss << "\n";
    }
    return stats;
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

template <typename T>
void save_checkpoint(const std::string& path, const UsdModel<T>& model, Adam<T>& opt, std::int64_t step,
                     const Json& run_config, std::uint64_t frozen_fingerprint) {
    std::vector<BlobEntry> entries;
    Json meta{{"step", step},
              {"adam_steps", opt.steps_taken()},
              {"frozen_fingerprint", frozen_fingerprint},
              {"learnable_scalars", model.count_learnables()},
              {"config", run_config}};
    std::string meta_s = meta.dump();
    BlobEntry me;
    me.name = "meta";
    me.dtype = "u8";
    me.shape = {static_cast<int>(meta_s.size())};
    me.bytes.assign(meta_s.begin(), meta_s.end());
    entries.push_back(std::move(me));

    const ParamStore<T>& ps = model.params();
    for (int i = 0; i < ps.count(); ++i) entries.push_back(make_entry("param." + ps.name(i), ps.value(i)));
    for (int i = 0; i < ps.count(); ++i) entries.push_back(make_entry("adam.m." + std::to_string(i), opt.moment1()[i]));
    for (int i = 0; i < ps.count(); ++i) entries.push_back(make_entry("adam.v." + std::to_string(i), opt.moment2()[i]));
    write_blob(path, entries);

    // human-readable shape manifest next to the blob
    Json manifest;
    manifest["step"] = step;
    manifest["frozen_fingerprint"] = frozen_fingerprint;
    manifest["learnable_scalars"] = model.count_learnables();
    Json shapes = Json::array();
    for (int i = 0; i < ps.count(); ++i) shapes.push_back({{"name", ps.name(i)}, {"shape", ps.value(i).shape}});
    manifest["tensors"] = std::move(shapes);
    std::ofstream mf(path + ".manifest.json");
    mf << manifest.dump(2) << "\n";
}

struct CheckpointHeader {
    std::int64_t step = 0;
    std::int64_t adam_steps = 0;
    std::uint64_t frozen_fingerprint = 0;
    Json config;
};

inline CheckpointHeader read_checkpoint_header(const std::string& path) {
    auto entries = read_blob(path);
    for (const auto& e : entries)
        if (e.name == "meta") {
            Json meta = Json::parse(std::string(e.bytes.begin(), e.bytes.end()));
            return {meta.at("step").get<std::int64_t>(), meta.at("adam_steps").get<std::int64_t>(),
                    meta.at("frozen_fingerprint").get<std::uint64_t>(), meta.at("config")};
        }
    throw std::runtime_error("checkpoint: missing meta entry in " + path);
}

/// Restores parameters and optimizer state into a freshly constructed model.
/// Refuses to load when the stored frozen fingerprint differs from the
/// bundle's (the frozen weights are not the ones this checkpoint trained with).
template <typename T>
void load_checkpoint(const std::string& path, UsdModel<T>& model, Adam<T>& opt, const FrozenBundle<T>& enc) {
    auto entries = read_blob(path);
    CheckpointHeader hdr = read_checkpoint_header(path);
    if (hdr.frozen_fingerprint != enc.fingerprint())
        throw std::runtime_error("checkpoint: frozen-parameter fingerprint mismatch (encoder weights differ)");
    auto find = [&entries](const std::string& name) -> const BlobEntry& {
        for (const auto& e : entries)
            if (e.name == name) return e;
        throw std::runtime_error("checkpoint: missing tensor " + name);
    };
    ParamStore<T>& ps = model.params();
    opt.init(ps);
    for (int i = 0; i < ps.count(); ++i) {
        Tensor<T> t = entry_to_tensor<T>(find("param." + ps.name(i)));
        if (t.shape != ps.value(i).shape)
            throw std::runtime_error("checkpoint: shape mismatch for " + ps.name(i));
        ps.value(i) = std::move(t);
        opt.moment1()[i] = entry_to_tensor<T>(find("adam.m." + std::to_string(i)));
        opt.moment2()[i] = entry_to_tensor<T>(find("adam.v." + std::to_string(i)));
    }
    opt.set_steps(hdr.adam_steps);
}

}  // namespace usd
