#include <catch2/catch_amalgamated.hpp>

#include "usd/autodiff.hpp"
#include "usd/nn.hpp"
#include "usd/rng.hpp"
#include "usd/tensor.hpp"
#include "testutil.hpp"

using usd::Tape;
using usd::Tensor;
using Ref = usd::Tape<double>::Ref;

namespace {

/// Checks the tape gradient of `build` against central finite differences
/// over every coordinate of every input.
void check_gradients(const std::function<Ref(Tape<double>&, const std::vector<Ref>&)>& build,
                     std::vector<Tensor<double>*> inputs, double tol = 1e-5) {
    Tape<double> tape;
    std::vector<Ref> refs;
    for (auto* x : inputs) refs.push_back(tape.leaf(*x));
    Ref loss = build(tape, refs);
    REQUIRE(tape.value(loss).size() == 1);
    tape.backward(loss);

    auto eval = [&]() {
        Tape<double> t2;
        std::vector<Ref> r2;
        for (auto* x : inputs) r2.push_back(t2.leaf(*x));
        return t2.value(build(t2, r2))[0];
    };

    for (std::size_t p = 0; p < inputs.size(); ++p) {
        Tensor<double> analytic = tape.has_grad(refs[p]) ? tape.grad(refs[p]) : Tensor<double>::zeros(inputs[p]->shape);
        for (std::int64_t i = 0; i < inputs[p]->size(); ++i) {
            double fd = testutil::central_diff(eval, (*inputs[p])[i]);
            INFO("input " << p << " coord " << i << " analytic=" << analytic[i] << " fd=" << fd);
            REQUIRE(testutil::rel_err(analytic[i], fd) < tol);
        }
    }
}

Ref weighted_sum(Tape<double>& t, Ref x, const Tensor<double>& w) {
    return t.sum_all(t.mul(x, t.constant(w)));
}

}  // namespace

TEST_CASE("tensor basics") {
    Tensor<double> t({2, 3});
    REQUIRE(t.size() == 6);
    REQUIRE_THROWS(Tensor<double>({2, 3}, {1.0}));
    REQUIRE_THROWS(t.reshaped({4, 2}));
    Tensor<double> r = t.reshaped({3, 2});
    REQUIRE(r.rows() == 3);
    Tensor<float> f = t.cast<float>();
    REQUIRE(f.size() == 6);
}

TEST_CASE("rng determinism and stream independence") {
    usd::Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
    REQUIRE(usd::mix_seed(1, 2, 3) != usd::mix_seed(1, 3, 2));
    usd::Rng c(7);
    for (int i = 0; i < 1000; ++i) {
        double u = c.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
    }
}

TEST_CASE("elementwise and reduction gradients match finite differences") {
    usd::Rng rng(1);
    auto x = testutil::random_tensor(rng, {3, 4});
    auto y = testutil::random_tensor(rng, {3, 4});
    auto w = testutil::random_tensor(rng, {3, 4});

    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.mul(t.add(r[0], r[1]), t.sub(r[0], r[1])), w);
    }, {&x, &y});

    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return t.mean_all(t.sigmoid(t.scale(r[0], 1.7)));
    }, {&x});

    auto xp = testutil::random_tensor(rng, {3, 4});
    for (auto& v : xp.data) v = std::abs(v) + 0.5;  // keep relu away from the kink
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.relu(r[0]), w);
    }, {&xp});

    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.maximum(r[0], r[1]), w);
    }, {&x, &y});
}

TEST_CASE("matmul gradients for all transpose flags") {
    usd::Rng rng(2);
    auto a = testutil::random_tensor(rng, {3, 4});
    auto b = testutil::random_tensor(rng, {4, 2});
    auto w = testutil::random_tensor(rng, {3, 2});
    for (int ta = 0; ta < 2; ++ta)
        for (int tb = 0; tb < 2; ++tb) {
            auto av = ta ? a.reshaped({4, 3}) : a;
            auto bv = tb ? b.reshaped({2, 4}) : b;
            check_gradients([&, ta, tb](Tape<double>& t, const std::vector<Ref>& r) {
                return weighted_sum(t, t.matmul(r[0], r[1], ta, tb), w);
            }, {&av, &bv});
        }
}

TEST_CASE("structural op gradients") {
    usd::Rng rng(3);
    auto a = testutil::random_tensor(rng, {2, 3});
    auto b = testutil::random_tensor(rng, {2, 3});
    auto v = testutil::random_tensor(rng, {2});
    auto u = testutil::random_tensor(rng, {3});
    auto w43 = testutil::random_tensor(rng, {4, 3});
    auto w26 = testutil::random_tensor(rng, {2, 6});
    auto w23 = testutil::random_tensor(rng, {2, 3});
    auto w32 = testutil::random_tensor(rng, {3, 2});
    auto w25 = testutil::random_tensor(rng, {2, 5});

    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.concat_rows({r[0], r[1]}), w43);
    }, {&a, &b});
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.concat_cols({r[0], r[1]}), w26);
    }, {&a, &b});
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.slice_rows(r[0], 1, 2), Tensor<double>::full({1, 3}, 0.7));
    }, {&a});
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.slice_cols(r[0], 0, 2), Tensor<double>::full({2, 2}, -0.4));
    }, {&a});
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.transpose(r[0]), w32);
    }, {&a});
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.tile_cols(r[0], 5), w25);
    }, {&v});
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.tile_rows(r[0], 2), w23);
    }, {&u});
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.add_colvec(r[0], r[1]), w23);
    }, {&a, &v});
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.add_rowvec(r[0], r[1]), w23);
    }, {&a, &u});
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.reshape(r[0], {3, 2}), w32);
    }, {&a});
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        auto s0 = t.take(r[0], 0);
        auto s1 = t.take(r[0], 4);
        return weighted_sum(t, t.stack_scalars({s0, s1, t.take(r[1], 2)}), Tensor<double>({3}, {0.3, -1.1, 0.8}));
    }, {&a, &b});
}

TEST_CASE("normalization op gradients") {
    usd::Rng rng(4);
    auto a = testutil::random_tensor(rng, {3, 4});
    for (auto& x : a.data) x = std::abs(x) + 0.2;
    auto w = testutil::random_tensor(rng, {3, 4});
    auto rv = testutil::random_tensor(rng, {3});
    auto cv = testutil::random_tensor(rng, {4});
    for (auto& x : rv.data) x = std::abs(x) + 0.5;
    for (auto& x : cv.data) x = std::abs(x) + 0.5;

    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.softmax_rows(r[0]), w);
    }, {&a});
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.div_rows(r[0], r[1]), w);
    }, {&a, &rv});
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.div_cols(r[0], r[1]), w);
    }, {&a, &cv});
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        auto rs = t.row_sums(r[0]);
        auto cs = t.col_sums(r[0]);
        return t.add(t.sum_all(t.mul(rs, t.constant(rv))), t.sum_all(t.mul(cs, t.constant(cv))));
    }, {&a});
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.minmax_norm(r[0]), w);
    }, {&a});

    auto g = testutil::random_tensor(rng, {4});
    auto be = testutil::random_tensor(rng, {4});
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.layernorm_rows(r[0], r[1], r[2]), w);
    }, {&a, &g, &be});
}

TEST_CASE("loss-related op gradients") {
    usd::Rng rng(5);
    auto p = Tensor<double>({2, 3});
    for (auto& v : p.data) v = rng.uniform(0.1, 0.9);
    Tensor<double> target({2, 3});
    for (auto& v : target.data) v = rng.uniform(0.0, 1.0);
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return t.bce_mean(r[0], target);
    }, {&p});

    auto x = testutil::random_tensor(rng, {3, 3});
    auto w = testutil::random_tensor(rng, {6, 6});
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return weighted_sum(t, t.upsample_bilinear(r[0], 6, 6), w);
    }, {&x});

    auto v = testutil::random_tensor(rng, {5});
    auto tv = testutil::random_tensor(rng, {5});
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return t.cosine_to_const(r[0], tv);
    }, {&v});

    auto feat = testutil::random_tensor(rng, {3, 4});
    Tensor<double> mask({4}, {1, 0, 1, 1});
    auto w3 = testutil::random_tensor(rng, {3});
    check_gradients([&](Tape<double>& t, const std::vector<Ref>& r) {
        return t.sum_all(t.mul(t.masked_mean_cols(r[0], mask), t.constant(w3)));
    }, {&feat});
}

TEST_CASE("bce matches analytic values") {
    Tape<double> t;
    auto half = t.constant(Tensor<double>::full({4, 4}, 0.5));
    Tensor<double> anytgt({4, 4});
    for (std::int64_t i = 0; i < 16; ++i) anytgt[i] = (i % 2 == 0) ? 1.0 : 0.0;
    REQUIRE(t.value(t.bce_mean(half, anytgt))[0] == Catch::Approx(std::log(2.0)).epsilon(1e-12));

    auto p = t.constant(Tensor<double>::scalar(0.8));
    REQUIRE(t.value(t.bce_mean(p, Tensor<double>::scalar(1.0)))[0] == Catch::Approx(-std::log(0.8)).epsilon(1e-10));
    auto p9 = t.constant(Tensor<double>::scalar(0.9));
    REQUIRE(t.value(t.bce_mean(p9, Tensor<double>::scalar(1.0)))[0] == Catch::Approx(-std::log(0.9)).epsilon(1e-10));

    // exact match stays below the clamping bound
    Tensor<double> exact({2, 2}, {1, 0, 0, 1});
    auto pe = t.constant(exact);
    REQUIRE(t.value(t.bce_mean(pe, exact))[0] <= 2e-6);
}

TEST_CASE("multi-head attention: row-stochastic maps and manual oracle") {
    usd::Rng rng(11);
    usd::ParamStore<double> ps;
    usd::MultiHeadAttention<double> mha(ps, "attn", 4, 1, rng);

    // identity value path: output must equal the hand-computed A * X
    for (std::int64_t i = 0; i < 16; ++i) {
        ps.value(mha.wv.w)[i] = (i % 5 == 0) ? 1.0 : 0.0;
        ps.value(mha.wo.w)[i] = (i % 5 == 0) ? 1.0 : 0.0;
    }
    auto x = testutil::random_tensor(rng, {4, 4});  // 2x2 grid of tokens
    Tape<double> t;
    auto out = mha.forward(t, t.constant(x), t.constant(x));

    const auto& attn = t.value(out.attn);
    for (int i = 0; i < 4; ++i) {
        double s = 0;
        for (int j = 0; j < 4; ++j) s += attn.at2(i, j);
        REQUIRE(s == Catch::Approx(1.0).margin(1e-12));
    }

    // manual oracle: recompute scores and the matrix product with plain loops
    const auto& wq = ps.value(mha.wq.w);
    const auto& wk = ps.value(mha.wk.w);
    Tensor<double> q({4, 4}), k({4, 4});
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            double sq = 0, sk = 0;
            for (int l = 0; l < 4; ++l) {
                sq += x.at2(i, l) * wq.at2(j, l);
                sk += x.at2(i, l) * wk.at2(j, l);
            }
            q.at2(i, j) = sq;
            k.at2(i, j) = sk;
        }
    Tensor<double> oracle_attn({4, 4});
    for (int i = 0; i < 4; ++i) {
        double mx = -1e30;
        std::vector<double> row(4);
        for (int j = 0; j < 4; ++j) {
            double s = 0;
            for (int l = 0; l < 4; ++l) s += q.at2(i, l) * k.at2(j, l);
            row[j] = s / 2.0;  // sqrt(d_head) = 2
            mx = std::max(mx, row[j]);
        }
        double z = 0;
        for (int j = 0; j < 4; ++j) {
            row[j] = std::exp(row[j] - mx);
            z += row[j];
        }
        for (int j = 0; j < 4; ++j) oracle_attn.at2(i, j) = row[j] / z;
    }
    for (std::int64_t i = 0; i < 16; ++i)
        REQUIRE(attn[i] == Catch::Approx(oracle_attn[i]).margin(1e-12));

    const auto& tok = t.value(out.tokens);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            double s = 0;
            for (int l = 0; l < 4; ++l) s += oracle_attn.at2(i, l) * x.at2(l, j);
            REQUIRE(tok.at2(i, j) == Catch::Approx(s).margin(1e-10));
        }
}

TEST_CASE("parameter gradients accumulate across repeated module use") {
    usd::Rng rng(21);
    usd::ParamStore<double> ps;
    usd::Conv1x1<double> conv(ps, "c", 3, 2, rng);
    auto x1 = testutil::random_tensor(rng, {3, 5});
    auto x2 = testutil::random_tensor(rng, {3, 5});

    auto eval = [&]() {
        Tape<double> t;
        auto y1 = conv.forward(t, t.constant(x1));
        auto y2 = conv.forward(t, t.constant(x2));
        auto loss = t.add(t.sum_all(y1), t.mean_all(y2));
        return t.value(loss)[0];
    };

    Tape<double> t;
    auto y1 = conv.forward(t, t.constant(x1));
    auto y2 = conv.forward(t, t.constant(x2));
    auto loss = t.add(t.sum_all(y1), t.mean_all(y2));
    t.backward(loss);
    ps.zero_grads();
    ps.accumulate_from(t);

    for (std::int64_t i = 0; i < ps.value(conv.w).size(); ++i) {
        double fd = testutil::central_diff(eval, ps.value(conv.w)[i]);
        REQUIRE(testutil::rel_err(ps.grad(conv.w)[i], fd) < 1e-5);
    }
    for (std::int64_t i = 0; i < ps.value(conv.b).size(); ++i) {
        double fd = testutil::central_diff(eval, ps.value(conv.b)[i]);
        REQUIRE(testutil::rel_err(ps.grad(conv.b)[i], fd) < 1e-5);
    }
}

TEST_CASE("positional encoding is unit-bounded and position-distinct") {
    auto pe = usd::sinusoidal_pe_2d<double>(4, 4, 8);
    REQUIRE(pe.rows() == 16);
    REQUIRE(pe.cols() == 8);
    for (double v : pe.data) REQUIRE(std::abs(v) <= 1.0 + 1e-12);
    for (int i = 0; i < 16; ++i)
        for (int j = i + 1; j < 16; ++j) {
            double d = 0;
            for (int c = 0; c < 8; ++c) d += std::abs(pe.at2(i, c) - pe.at2(j, c));
            REQUIRE(d > 1e-6);
        }
}
