#include <catch2/catch_amalgamated.hpp>

#include "usd/decoding.hpp"
#include "testutil.hpp"

using usd::Tape;
using usd::Tensor;

namespace {

usd::EncoderConfig small_cfg() {
    usd::EncoderConfig c;
    c.image_size = 32;
    c.patch = 8;
    c.clip_dim = 16;
    c.clip_blocks = 2;
    c.text_dim = 16;
    c.sam_dim = 16;
    c.seed = 12;
    return c;
}

}  // namespace

TEST_CASE("decode pair") {
    auto cfg = small_cfg();
    usd::FrozenBundle<double> enc(cfg);
    const int d = cfg.sam_dim, hw = cfg.sam_grid() * cfg.sam_grid();
    usd::Rng rng(1);
    auto f_fin = testutil::random_tensor(rng, {d, hw});
    auto f_sam = testutil::random_tensor(rng, {d, hw});
    usd::PointPrompts pts;
    pts.points = {{1, 1, 1}, {6, 6, 0}};

    Tape<double> t;
    auto pair = usd::decode_pair(t, enc.decoder(), t.constant(f_fin), t.constant(f_sam), -1, -1, pts);

    SECTION("probabilities in [0,1] at image resolution") {
        for (auto p : {pair.p_clip, pair.p_sam}) {
            REQUIRE(t.value(p).shape == std::vector<int>{32, 32});
            for (double v : t.value(p).data) {
                REQUIRE(v >= 0.0);
                REQUIRE(v <= 1.0);
            }
        }
    }

    SECTION("zero enhanced feature means compensation vanishes") {
        Tape<double> t2;
        auto zero = t2.constant(Tensor<double>::zeros({d, hw}));
        auto p2 = usd::decode_pair(t2, enc.decoder(), zero, t2.constant(f_sam), -1, -1, pts);
        Tape<double> t3;
        auto direct = t3.sigmoid(enc.decoder().decode(t3, t3.constant(f_sam), -1, pts));
        REQUIRE(t2.value(p2.p_sam).data == t3.value(direct).data);
    }

    SECTION("identical inputs decode identically") {
        Tape<double> t2;
        auto pair2 = usd::decode_pair(t2, enc.decoder(), t2.constant(f_fin), t2.constant(f_sam), -1, -1, pts);
        REQUIRE(t.value(pair.p_clip).data == t2.value(pair2.p_clip).data);
        REQUIRE(t.value(pair.p_sam).data == t2.value(pair2.p_sam).data);
    }
}

TEST_CASE("fusion") {
    Tape<double> t;
    usd::Rng rng(2);
    Tensor<double> a({2, 2}), b({2, 2});
    for (auto& v : a.data) v = rng.uniform(0.01, 0.99);
    for (auto& v : b.data) v = rng.uniform(0.01, 0.99);
    usd::PredictionPair<double> pair{t.constant(a), t.constant(b)};  // p_clip=a, p_sam=b

    SECTION("extremes are bit-exact single paths") {
        REQUIRE(t.value(usd::fuse(t, pair, 1.0)).data == b.data);
        REQUIRE(t.value(usd::fuse(t, pair, 0.0)).data == a.data);
    }
    SECTION("midpoint arithmetic") {
        usd::PredictionPair<double> p2{t.constant(Tensor<double>::scalar(0.4)), t.constant(Tensor<double>::scalar(0.8))};
        REQUIRE(t.value(usd::fuse(t, p2, 0.5))[0] == Catch::Approx(0.6).margin(1e-12));
    }
    SECTION("fused values stay inside the per-pixel envelope") {
        for (double alpha : {0.1, 0.35, 0.7, 0.95}) {
            auto f = t.value(usd::fuse(t, pair, alpha));
            for (std::int64_t i = 0; i < f.size(); ++i) {
                REQUIRE(f[i] >= std::min(a[i], b[i]) - 1e-12);
                REQUIRE(f[i] <= std::max(a[i], b[i]) + 1e-12);
            }
        }
    }
    SECTION("monotone in alpha per pixel") {
        auto f1 = t.value(usd::fuse(t, pair, 0.2));
        auto f2 = t.value(usd::fuse(t, pair, 0.8));
        for (std::int64_t i = 0; i < f1.size(); ++i) {
            if (b[i] >= a[i]) REQUIRE(f2[i] >= f1[i] - 1e-12);
            else REQUIRE(f2[i] <= f1[i] + 1e-12);
        }
    }
    SECTION("alpha out of range rejected") {
        REQUIRE_THROWS(usd::fuse(t, pair, -0.1));
        REQUIRE_THROWS(usd::fuse(t, pair, 1.1));
    }
}

TEST_CASE("prediction loss and total loss") {
    Tape<double> t;
    SECTION("perfect prediction") {
        Tensor<double> m({2, 2}, {1, 0, 0, 1});
        REQUIRE(t.value(usd::prediction_loss(t, t.constant(m), m))[0] <= 2e-6);
    }
    SECTION("uniform half") {
        Tensor<double> m({2, 2}, {1, 1, 0, 0});
        auto l = usd::prediction_loss(t, t.constant(Tensor<double>::full({2, 2}, 0.5)), m);
        REQUIRE(t.value(l)[0] == Catch::Approx(std::log(2.0)).margin(1e-9));
    }
    SECTION("scalar oracle 0.9 vs 1") {
        auto l = usd::prediction_loss(t, t.constant(Tensor<double>::scalar(0.9)), Tensor<double>::scalar(1.0));
        REQUIRE(t.value(l)[0] == Catch::Approx(0.1054).margin(1e-4));
    }
    SECTION("total loss weighted sum") {
        auto lr = t.constant(Tensor<double>::scalar(0.3));
        auto lp = t.constant(Tensor<double>::scalar(0.4));
        REQUIRE(t.value(usd::total_loss(t, lr, lp, 0.5))[0] == Catch::Approx(0.5).margin(1e-12));
        REQUIRE(t.value(usd::total_loss(t, lr, lp, 0.0))[0] == Catch::Approx(0.3).margin(1e-12));
        REQUIRE_THROWS(usd::total_loss(t, lr, lp, -1.0));
    }
}

TEST_CASE("binarize") {
    SECTION("uniform above threshold") {
        auto m = usd::binarize(Tensor<double>::full({3, 3}, 0.6), 0.5);
        REQUIRE(m.foreground_count() == 9);
    }
    SECTION("ties go to foreground") {
        auto m = usd::binarize(Tensor<double>::full({2, 2}, 0.5), 0.5);
        REQUIRE(m.foreground_count() == 4);
    }
    SECTION("pixel-loop oracle on a mixed map") {
        usd::Rng rng(3);
        Tensor<double> p({5, 7});
        for (auto& v : p.data) v = rng.uniform();
        auto m = usd::binarize(p, 0.35);
        for (std::int64_t i = 0; i < p.size(); ++i)
            REQUIRE(m.pixels[i] == (p[i] >= 0.35 ? 1 : 0));
    }
    SECTION("threshold bounds") {
        REQUIRE_THROWS(usd::binarize(Tensor<double>::full({2, 2}, 0.5), 0.0));
        REQUIRE_THROWS(usd::binarize(Tensor<double>::full({2, 2}, 0.5), 1.0));
    }
}
