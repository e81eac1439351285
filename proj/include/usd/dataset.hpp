#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "usd/image.hpp"
#include "usd/png_io.hpp"
#include "usd/rng.hpp"

namespace usd {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// fold splits
// ---------------------------------------------------------------------------

struct FoldSplit {
    int num_folds = 0;
    int fold_index = 0;
    std::set<int> train_classes;
    std::set<int> test_classes;
};

/// Test classes are the contiguous block [fold*(n/folds), (fold+1)*(n/folds)).
inline FoldSplit make_fold_split(int class_count, int num_folds, int fold_index) {
    if (num_folds <= 0 || class_count <= 0) throw std::invalid_argument("fold split: counts must be positive");
    if (class_count % num_folds != 0)
        throw std::invalid_argument("fold split: class count " + std::to_string(class_count) +
                                    " not divisible by " + std::to_string(num_folds) + " folds");
    if (fold_index < 0 || fold_index >= num_folds)
        throw std::invalid_argument("fold split: fold index " + std::to_string(fold_index) + " out of range");
    FoldSplit s{num_folds, fold_index, {}, {}};
    const int per = class_count / num_folds;
    for (int c = 0; c < class_count; ++c) {
        if (c >= fold_index * per && c < (fold_index + 1) * per)
            s.test_classes.insert(c);
        else
            s.train_classes.insert(c);
    }
    return s;
}

// ---------------------------------------------------------------------------
// synthetic shapes
// ---------------------------------------------------------------------------

enum class ShapeKind { Circle, Cross, Diamond, Ellipse, Ring, Square, Star, Triangle, Frame, Hbar, Moon, Vbar };

/// Families in lexicographic name order; a dataset with n classes uses the first n.
inline const std::vector<std::pair<std::string, ShapeKind>>& shape_families() {
    static const std::vector<std::pair<std::string, ShapeKind>> fam = {
        {"circle", ShapeKind::Circle},   {"cross", ShapeKind::Cross},   {"diamond", ShapeKind::Diamond},
        {"ellipse", ShapeKind::Ellipse}, {"frame", ShapeKind::Frame},   {"hbar", ShapeKind::Hbar},
        {"moon", ShapeKind::Moon},       {"ring", ShapeKind::Ring},     {"square", ShapeKind::Square},
        {"star", ShapeKind::Star},       {"triangle", ShapeKind::Triangle}, {"vbar", ShapeKind::Vbar}};
    return fam;
}

struct ShapeSpec {
    ShapeKind kind;
    double cx, cy, r;
};

/// Analytic membership test; masks are this predicate evaluated at pixel coords.
inline bool shape_contains(const ShapeSpec& s, double x, double y) {
    const double dx = x - s.cx, dy = y - s.cy, r = s.r;
    switch (s.kind) {
        case ShapeKind::Circle: return dx * dx + dy * dy <= r * r;
        case ShapeKind::Square: return std::max(std::abs(dx), std::abs(dy)) <= r;
        case ShapeKind::Diamond: return std::abs(dx) + std::abs(dy) <= r;
        case ShapeKind::Ellipse: {
            double a = dx / r, b = dy / (0.55 * r);
            return a * a + b * b <= 1.0;
        }
        case ShapeKind::Ring: {
            double d2 = dx * dx + dy * dy;
            return d2 <= r * r && d2 >= 0.55 * 0.55 * r * r;
        }
        case ShapeKind::Cross:
            return (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) || (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
        case ShapeKind::Star: {
            double p = 2.0 / 3.0;
            return std::pow(std::abs(dx), p) + std::pow(std::abs(dy), p) <= std::pow(r, p);
        }
        case ShapeKind::Triangle:
            return dy >= -r && dy <= r && std::abs(dx) <= 0.6 * (dy + r);
        case ShapeKind::Frame: {
            double m = std::max(std::abs(dx), std::abs(dy));
            return m <= r && m >= 0.55 * r;
        }
        case ShapeKind::Hbar: return std::abs(dx) <= r && std::abs(dy) <= 0.35 * r;
        case ShapeKind::Vbar: return std::abs(dy) <= r && std::abs(dx) <= 0.35 * r;
        case ShapeKind::Moon: {
            double d2 = dx * dx + dy * dy;
            double ox = dx - 0.55 * r;
            return d2 <= r * r && ox * ox + dy * dy > 0.66 * 0.66 * r * r;
        }
    }
    return false;
}

namespace detail {

inline std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
    h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
    int i = static_cast<int>(h);
    double f = h - i;
    double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    double r, g, b;
    switch (i % 6) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
    return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

/// Stable per-family base color, spread around the hue wheel.
inline std::array<float, 3> family_color(int family) {
    return hsv_to_rgb(30.0 + 137.508 * family, 0.68, 0.82);
}

inline ShapeSpec random_shape(ShapeKind kind, int size, double rmin_frac, double rmax_frac, Rng& rng) {
    double r = rng.uniform(rmin_frac, rmax_frac) * size;
    double margin = 1.3 * r;
    double cx = rng.uniform(margin, size - margin);
    double cy = rng.uniform(margin, size - margin);
    return ShapeSpec{kind, cx, cy, r};
}

inline void paint_shape(Image& img, const ShapeSpec& spec, const std::array<float, 3>& color, Rng& rng) {
    const int sz = img.height();
    for (int y = 0; y < sz; ++y)
        for (int x = 0; x < sz; ++x)
            if (shape_contains(spec, x, y)) {
                float n = static_cast<float>(rng.uniform(-0.03, 0.03));
                for (int c = 0; c < 3; ++c)
                    img.pixels.at3(c, y, x) = std::clamp(color[static_cast<std::size_t>(c)] + n, 0.0f, 1.0f);
            }
}

}  // namespace detail

struct SynthSample {
    Image image;
    BinaryMask mask;
    ShapeSpec target;
};

/// Renders one sample: cluttered background, two distractor shapes from other
/// families, then the target shape on top. The target occupies >= 2% of the
/// image area by construction and the mask is exactly its analytic region.
inline SynthSample render_synth_sample(int family, int num_families, int image_size, std::uint64_t sample_seed) {
    Rng rng(sample_seed);
    Image img = Image::blank(image_size, image_size);

    // background: desaturated soft color field plus pixel noise
    std::array<float, 3> base{static_cast<float>(rng.uniform(0.35, 0.65)),
                              static_cast<float>(rng.uniform(0.35, 0.65)),
                              static_cast<float>(rng.uniform(0.35, 0.65))};
    double fx = rng.uniform(1.0, 3.0), fy = rng.uniform(1.0, 3.0);
    double px = rng.uniform(0.0, 6.283), py = rng.uniform(0.0, 6.283);
    for (int y = 0; y < image_size; ++y)
        for (int x = 0; x < image_size; ++x) {
            double wave = 0.06 * std::sin(6.283 * fx * x / image_size + px) * std::sin(6.283 * fy * y / image_size + py);
            for (int c = 0; c < 3; ++c) {
                double v = base[static_cast<std::size_t>(c)] + wave + rng.uniform(-0.02, 0.02);
                img.pixels.at3(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }

    // distractors from other families, smaller than targets, painted below
    const auto& fams = shape_families();
    for (int k = 0; k < 2; ++k) {
        int other = rng.index(num_families - 1);
        if (other >= family) ++other;
        ShapeSpec d = detail::random_shape(fams[other].second, image_size, 0.08, 0.13, rng);
        auto col = detail::family_color(other);
        float jitter = static_cast<float>(rng.uniform(-0.06, 0.06));
        for (auto& c : col) c = std::clamp(c + jitter, 0.0f, 1.0f);
        detail::paint_shape(img, d, col, rng);
    }

    ShapeSpec target = detail::random_shape(fams[family].second, image_size, 0.18, 0.30, rng);
    auto col = detail::family_color(family);
    float jitter = static_cast<float>(rng.uniform(-0.06, 0.06));
    for (auto& c : col) c = std::clamp(c + jitter, 0.0f, 1.0f);
    detail::paint_shape(img, target, col, rng);

    BinaryMask mask = BinaryMask::blank(image_size, image_size);
    for (int y = 0; y < image_size; ++y)
        for (int x = 0; x < image_size; ++x)
            mask.pixels.at2(y, x) = shape_contains(target, x, y) ? 1 : 0;
    return SynthSample{std::move(img), std::move(mask), target};
}

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

struct Sample {
    std::string image_path;
    std::string mask_path;
};

/// Immutable after load; pixel data is cached in memory (desk-scale sizes).
struct Dataset {
    std::string root;
    std::vector<std::string> classes;
    std::vector<std::vector<Sample>> index;          // class_id -> samples
    std::vector<std::vector<Image>> images;          // parallel to index
    std::vector<std::vector<BinaryMask>> masks;

    int class_count() const { return static_cast<int>(classes.size()); }
    int samples_of(int class_id) const { return static_cast<int>(index[class_id].size()); }
};

inline Dataset load_dataset(const std::string& root) {
    fs::path rp(root);
    fs::path list = rp / "classes.txt";
    if (!fs::exists(list)) throw std::runtime_error("dataset: missing classes.txt under " + root);
    Dataset ds;
    ds.root = root;
    std::ifstream in(list);
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (!line.empty()) ds.classes.push_back(line);
    }
    if (ds.classes.empty()) throw std::runtime_error("dataset: classes.txt is empty");

    for (const auto& cls : ds.classes) {
        fs::path cdir = rp / cls;
        if (!fs::is_directory(cdir)) throw std::runtime_error("dataset: missing class directory '" + cls + "'");
        std::vector<std::string> ids;
        for (const auto& e : fs::directory_iterator(cdir)) {
            std::string name = e.path().filename().string();
            const std::string suffix = ".img.png";
            if (name.size() > suffix.size() && name.substr(name.size() - suffix.size()) == suffix)
                ids.push_back(name.substr(0, name.size() - suffix.size()));
        }
        if (ids.empty()) throw std::runtime_error("dataset: class '" + cls + "' has no samples");
        std::sort(ids.begin(), ids.end());

        std::vector<Sample> samples;
        std::vector<Image> imgs;
        std::vector<BinaryMask> msks;
        for (const auto& id : ids) {
            Sample s{(cdir / (id + ".img.png")).string(), (cdir / (id + ".mask.png")).string()};
            if (!fs::exists(s.mask_path))
                throw std::runtime_error("dataset: missing mask for " + s.image_path);
            Image img = load_image_png(s.image_path);
            BinaryMask m = load_mask_png(s.mask_path);
            if (m.height() != img.height() || m.width() != img.width())
                throw std::runtime_error("dataset: mask size mismatch for " + s.image_path);
            if (m.foreground_count() == 0)
                throw std::runtime_error("dataset: empty mask for " + s.image_path);
            samples.push_back(std::move(s));
            imgs.push_back(std::move(img));
            msks.push_back(std::move(m));
        }
        ds.index.push_back(std::move(samples));
        ds.images.push_back(std::move(imgs));
        ds.masks.push_back(std::move(msks));
    }
    return ds;
}

inline Dataset generate_synthetic_dataset(const std::string& root, int num_classes, int samples_per_class,
                                          int image_size, std::uint64_t seed) {
    if (num_classes < 4) throw std::invalid_argument("synthetic dataset: need at least 4 classes");
    if (num_classes > static_cast<int>(shape_families().size()))
        throw std::invalid_argument("synthetic dataset: at most " + std::to_string(shape_families().size()) + " classes");
    if (image_size < 32) throw std::invalid_argument("synthetic dataset: image size must be >= 32");
    fs::path rp(root);
    std::error_code ec;
    fs::create_directories(rp, ec);
    if (ec || !fs::is_directory(rp)) throw std::runtime_error("synthetic dataset: cannot create root " + root);

    const auto& fams = shape_families();
    std::vector<std::string> names;
    for (int c = 0; c < num_classes; ++c) names.push_back(fams[c].first);
    std::sort(names.begin(), names.end());  // already sorted, kept explicit

    {
        std::ofstream out(rp / "classes.txt");
        if (!out) throw std::runtime_error("synthetic dataset: cannot write classes.txt");
        for (const auto& n : names) out << n << "\n";
    }
    for (int c = 0; c < num_classes; ++c) {
        fs::path cdir = rp / names[c];
        fs::create_directories(cdir);
        for (int i = 0; i < samples_per_class; ++i) {
            SynthSample s = render_synth_sample(c, num_classes, image_size, mix_seed(seed, c, i));
            char id[16];
            std::snprintf(id, sizeof(id), "%04d", i);
            save_image_png((cdir / (std::string(id) + ".img.png")).string(), s.image);
            save_mask_png((cdir / (std::string(id) + ".mask.png")).string(), s.mask);
        }
    }
    return load_dataset(root);
}

// ---------------------------------------------------------------------------
// episodes
// ---------------------------------------------------------------------------

struct Episode {
    std::vector<std::pair<Image, BinaryMask>> supports;
    Image query_image;
    BinaryMask query_mask;
    std::string class_name;
    int class_id = -1;
    std::vector<std::string> support_paths;
    std::string query_path;

    std::string id() const {
        std::string s = class_name + ":";
        for (const auto& p : support_paths) s += fs::path(p).filename().string() + "+";
        return s + "->" + fs::path(query_path).filename().string();
    }
};

/// Supports and query are drawn without replacement from one class; the query
/// is never one of the supports.
inline Episode sample_episode(const Dataset& ds, const std::set<int>& class_pool, int k, Rng& rng) {
    if (class_pool.empty()) throw std::invalid_argument("sample_episode: empty class pool");
    if (k < 1) throw std::invalid_argument("sample_episode: k must be >= 1");
    std::vector<int> pool(class_pool.begin(), class_pool.end());
    int cls = pool[rng.index(static_cast<int>(pool.size()))];
    const int n = ds.samples_of(cls);
    if (n < k + 1)
        throw std::runtime_error("sample_episode: class '" + ds.classes[cls] + "' has " + std::to_string(n) +
                                 " samples, needs " + std::to_string(k + 1));
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    // partial Fisher-Yates for the first k+1 slots
    for (int i = 0; i <= k; ++i) {
        int j = i + rng.index(n - i);
        std::swap(idx[i], idx[j]);
    }
    Episode ep;
    ep.class_id = cls;
    ep.class_name = ds.classes[cls];
    for (int i = 0; i < k; ++i) {
        ep.supports.emplace_back(ds.images[cls][idx[i]], ds.masks[cls][idx[i]]);
        ep.support_paths.push_back(ds.index[cls][idx[i]].image_path);
    }
    ep.query_image = ds.images[cls][idx[k]];
    ep.query_mask = ds.masks[cls][idx[k]];
    ep.query_path = ds.index[cls][idx[k]].image_path;
    return ep;
}

}  // namespace usd
