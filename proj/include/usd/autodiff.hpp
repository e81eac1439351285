#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "usd/tensor.hpp"

namespace usd {

/// Reverse-mode tape over Tensor<T>. One tape per forward pass; node indices
/// (Ref) are only meaningful for the tape that produced them. Constants never
/// allocate gradients and frozen subgraphs cost nothing in backward().
template <typename T>
class Tape {
public:
    using Ref = int;
    using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Map = Eigen::Map<EMat>;
    using CMap = Eigen::Map<const EMat>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Ref constant(Tensor<T> v) { return push(std::move(v), false, -1); }
    Ref leaf(Tensor<T> v) { return push(std::move(v), true, -1); }
    /// Leaf tagged with a parameter id so gradients can be pulled back into a store.
    Ref param(Tensor<T> v, int param_id) { return push(std::move(v), true, param_id); }

    const Tensor<T>& value(Ref i) const { return nodes_[i].value; }
    const Tensor<T>& grad(Ref i) const { return nodes_[i].grad; }
    bool has_grad(Ref i) const { return !nodes_[i].grad.data.empty(); }
    bool needs_grad(Ref i) const { return nodes_[i].needs_grad; }
    std::size_t node_count() const { return nodes_.size(); }

    // ---- elementwise ----

    Ref add(Ref a, Ref b) {
        check_same(a, b);
        Tensor<T> out = nodes_[a].value;
        const Tensor<T>& vb = nodes_[b].value;
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] += vb[i];
        return unary_or_binary(std::move(out), a, b, [this](Ref y, Ref a2, Ref b2) {
            spread(a2, y, T(1));
            spread(b2, y, T(1));
        });
    }

    Ref sub(Ref a, Ref b) {
        check_same(a, b);
        Tensor<T> out = nodes_[a].value;
        const Tensor<T>& vb = nodes_[b].value;
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
        return unary_or_binary(std::move(out), a, b, [this](Ref y, Ref a2, Ref b2) {
            spread(a2, y, T(1));
            spread(b2, y, T(-1));
        });
    }

    Ref mul(Ref a, Ref b) {
        check_same(a, b);
        Tensor<T> out = nodes_[a].value;
        const Tensor<T>& vb = nodes_[b].value;
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
        return unary_or_binary(std::move(out), a, b, [this](Ref y, Ref a2, Ref b2) {
            if (nodes_[a2].needs_grad) {
                Tensor<T>& ga = ensure_grad(a2);
                const Tensor<T>& gy = nodes_[y].grad;
                const Tensor<T>& vb2 = nodes_[b2].value;
                for (std::int64_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * vb2[i];
            }
            if (nodes_[b2].needs_grad) {
                Tensor<T>& gb = ensure_grad(b2);
                const Tensor<T>& gy = nodes_[y].grad;
                const Tensor<T>& va = nodes_[a2].value;
                for (std::int64_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * va[i];
            }
        });
    }

    Ref scale(Ref a, double c) {
        Tensor<T> out = nodes_[a].value;
        const T tc = static_cast<T>(c);
        for (auto& v : out.data) v *= tc;
        return unary(std::move(out), a, [this, tc](Ref y, Ref a2) { spread(a2, y, tc); });
    }

    Ref add_scalar(Ref a, double c) {
        Tensor<T> out = nodes_[a].value;
        const T tc = static_cast<T>(c);
        for (auto& v : out.data) v += tc;
        return unary(std::move(out), a, [this](Ref y, Ref a2) { spread(a2, y, T(1)); });
    }

    Ref relu(Ref a) {
        Tensor<T> out = nodes_[a].value;
        for (auto& v : out.data) v = v > T(0) ? v : T(0);
        return unary(std::move(out), a, [this](Ref y, Ref a2) {
            Tensor<T>& ga = ensure_grad(a2);
            const Tensor<T>& gy = nodes_[y].grad;
            const Tensor<T>& va = nodes_[a2].value;
            for (std::int64_t i = 0; i < gy.size(); ++i)
                if (va[i] > T(0)) ga[i] += gy[i];
        });
    }

    Ref sigmoid(Ref a) {
        Tensor<T> out = nodes_[a].value;
        for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
        return unary(std::move(out), a, [this](Ref y, Ref a2) {
            Tensor<T>& ga = ensure_grad(a2);
            const Tensor<T>& gy = nodes_[y].grad;
            const Tensor<T>& vy = nodes_[y].value;
            for (std::int64_t i = 0; i < gy.size(); ++i)
                ga[i] += gy[i] * vy[i] * (T(1) - vy[i]);
        });
    }

    /// Elementwise max; ties go to the first argument.
    Ref maximum(Ref a, Ref b) {
        check_same(a, b);
        const Tensor<T>& va = nodes_[a].value;
        const Tensor<T>& vb = nodes_[b].value;
        Tensor<T> out = va;
        auto mask = std::make_shared<std::vector<char>>(va.size());
        for (std::int64_t i = 0; i < va.size(); ++i) {
            bool first = va[i] >= vb[i];
            (*mask)[i] = first;
            out[i] = first ? va[i] : vb[i];
        }
        return unary_or_binary(std::move(out), a, b, [this, mask](Ref y, Ref a2, Ref b2) {
            const Tensor<T>& gy = nodes_[y].grad;
            if (nodes_[a2].needs_grad) {
                Tensor<T>& ga = ensure_grad(a2);
                for (std::int64_t i = 0; i < gy.size(); ++i)
                    if ((*mask)[i]) ga[i] += gy[i];
            }
            if (nodes_[b2].needs_grad) {
                Tensor<T>& gb = ensure_grad(b2);
                for (std::int64_t i = 0; i < gy.size(); ++i)
                    if (!(*mask)[i]) gb[i] += gy[i];
            }
        });
    }

    // ---- linear algebra ----

    /// C = op(A) * op(B) with optional transposes, 2-D only.
    Ref matmul(Ref a, Ref b, bool ta = false, bool tb = false) {
        const Tensor<T>& va = nodes_[a].value;
        const Tensor<T>& vb = nodes_[b].value;
        int m = ta ? va.cols() : va.rows();
        int k = ta ? va.rows() : va.cols();
        int kb = tb ? vb.cols() : vb.rows();
        int n = tb ? vb.rows() : vb.cols();
        if (k != kb) throw std::invalid_argument("matmul: inner dims " + va.shape_str() + " x " + vb.shape_str());
        Tensor<T> out({m, n});
        {
            CMap A(va.data.data(), va.rows(), va.cols());
            CMap B(vb.data.data(), vb.rows(), vb.cols());
            Map C(out.data.data(), m, n);
            if (!ta && !tb) C.noalias() = A * B;
            else if (ta && !tb) C.noalias() = A.transpose() * B;
            else if (!ta && tb) C.noalias() = A * B.transpose();
            else C.noalias() = A.transpose() * B.transpose();
        }
        return unary_or_binary(std::move(out), a, b, [this, ta, tb](Ref y, Ref a2, Ref b2) {
            const Tensor<T>& vy = nodes_[y].grad;
            const Tensor<T>& va2 = nodes_[a2].value;
            const Tensor<T>& vb2 = nodes_[b2].value;
            CMap G(vy.data.data(), vy.rows(), vy.cols());
            CMap A(va2.data.data(), va2.rows(), va2.cols());
            CMap B(vb2.data.data(), vb2.rows(), vb2.cols());
            if (nodes_[a2].needs_grad) {
                Tensor<T>& ga = ensure_grad(a2);
                Map GA(ga.data.data(), ga.rows(), ga.cols());
                if (!ta && !tb) GA.noalias() += G * B.transpose();
                else if (!ta && tb) GA.noalias() += G * B;
                else if (ta && !tb) GA.noalias() += B * G.transpose();
                else GA.noalias() += B.transpose() * G.transpose();
            }
            if (nodes_[b2].needs_grad) {
                Tensor<T>& gb = ensure_grad(b2);
                Map GB(gb.data.data(), gb.rows(), gb.cols());
                if (!ta && !tb) GB.noalias() += A.transpose() * G;
                else if (!ta && tb) GB.noalias() += G.transpose() * A;
                else if (ta && !tb) GB.noalias() += A * G;
                else GB.noalias() += G.transpose() * A.transpose();
            }
        });
    }

    Ref transpose(Ref a) {
        const Tensor<T>& va = nodes_[a].value;
        Tensor<T> out({va.cols(), va.rows()});
        CMap A(va.data.data(), va.rows(), va.cols());
        Map O(out.data.data(), out.rows(), out.cols());
        O = A.transpose();
        return unary(std::move(out), a, [this](Ref y, Ref a2) {
            Tensor<T>& ga = ensure_grad(a2);
            const Tensor<T>& gy = nodes_[y].grad;
            CMap G(gy.data.data(), gy.rows(), gy.cols());
            Map GA(ga.data.data(), ga.rows(), ga.cols());
            GA += G.transpose();
        });
    }

    Ref reshape(Ref a, std::vector<int> shape) {
        Tensor<T> out = nodes_[a].value.reshaped(shape);
        return unary(std::move(out), a, [this](Ref y, Ref a2) {
            Tensor<T>& ga = ensure_grad(a2);
            const Tensor<T>& gy = nodes_[y].grad;
            for (std::int64_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
        });
    }

    // ---- reductions / broadcasts ----

    Ref sum_all(Ref a) {
        Tensor<T> out = Tensor<T>::scalar(nodes_[a].value.sum());
        return unary(std::move(out), a, [this](Ref y, Ref a2) {
            spread_all(a2, nodes_[y].grad[0]);
        });
    }

    Ref mean_all(Ref a) {
        const std::int64_t n = nodes_[a].value.size();
        Tensor<T> out = Tensor<T>::scalar(nodes_[a].value.sum() / static_cast<T>(n));
        return unary(std::move(out), a, [this, n](Ref y, Ref a2) {
            spread_all(a2, nodes_[y].grad[0] / static_cast<T>(n));
        });
    }

    Ref row_sums(Ref a) {
        const Tensor<T>& va = nodes_[a].value;
        Tensor<T> out({va.rows()});
        for (int i = 0; i < va.rows(); ++i) {
            T s = 0;
            for (int j = 0; j < va.cols(); ++j) s += va.at2(i, j);
            out[i] = s;
        }
        return unary(std::move(out), a, [this](Ref y, Ref a2) {
            Tensor<T>& ga = ensure_grad(a2);
            const Tensor<T>& gy = nodes_[y].grad;
            for (int i = 0; i < ga.rows(); ++i)
                for (int j = 0; j < ga.cols(); ++j) ga.at2(i, j) += gy[i];
        });
    }

    Ref col_sums(Ref a) {
        const Tensor<T>& va = nodes_[a].value;
        Tensor<T> out({va.cols()});
        for (int i = 0; i < va.rows(); ++i)
            for (int j = 0; j < va.cols(); ++j) out[j] += va.at2(i, j);
        return unary(std::move(out), a, [this](Ref y, Ref a2) {
            Tensor<T>& ga = ensure_grad(a2);
            const Tensor<T>& gy = nodes_[y].grad;
            for (int i = 0; i < ga.rows(); ++i)
                for (int j = 0; j < ga.cols(); ++j) ga.at2(i, j) += gy[j];
        });
    }

    /// Divide row i by r[i].
    Ref div_rows(Ref a, Ref r) {
        const Tensor<T>& va = nodes_[a].value;
        const Tensor<T>& vr = nodes_[r].value;
        Tensor<T> out = va;
        for (int i = 0; i < va.rows(); ++i)
            for (int j = 0; j < va.cols(); ++j) out.at2(i, j) /= vr[i];
        return unary_or_binary(std::move(out), a, r, [this](Ref y, Ref a2, Ref r2) {
            const Tensor<T>& gy = nodes_[y].grad;
            const Tensor<T>& vy = nodes_[y].value;
            const Tensor<T>& vr2 = nodes_[r2].value;
            if (nodes_[a2].needs_grad) {
                Tensor<T>& ga = ensure_grad(a2);
                for (int i = 0; i < ga.rows(); ++i)
                    for (int j = 0; j < ga.cols(); ++j) ga.at2(i, j) += gy.at2(i, j) / vr2[i];
            }
            if (nodes_[r2].needs_grad) {
                Tensor<T>& gr = ensure_grad(r2);
                for (int i = 0; i < vy.rows(); ++i) {
                    T s = 0;
                    for (int j = 0; j < vy.cols(); ++j) s += gy.at2(i, j) * vy.at2(i, j);
                    gr[i] -= s / vr2[i];
                }
            }
        });
    }

    /// Divide column j by c[j].
    Ref div_cols(Ref a, Ref c) {
        const Tensor<T>& va = nodes_[a].value;
        const Tensor<T>& vc = nodes_[c].value;
        Tensor<T> out = va;
        for (int i = 0; i < va.rows(); ++i)
            for (int j = 0; j < va.cols(); ++j) out.at2(i, j) /= vc[j];
        return unary_or_binary(std::move(out), a, c, [this](Ref y, Ref a2, Ref c2) {
            const Tensor<T>& gy = nodes_[y].grad;
            const Tensor<T>& vy = nodes_[y].value;
            const Tensor<T>& vc2 = nodes_[c2].value;
            if (nodes_[a2].needs_grad) {
                Tensor<T>& ga = ensure_grad(a2);
                for (int i = 0; i < ga.rows(); ++i)
                    for (int j = 0; j < ga.cols(); ++j) ga.at2(i, j) += gy.at2(i, j) / vc2[j];
            }
            if (nodes_[c2].needs_grad) {
                Tensor<T>& gc = ensure_grad(c2);
                for (int j = 0; j < vy.cols(); ++j) {
                    T s = 0;
                    for (int i = 0; i < vy.rows(); ++i) s += gy.at2(i, j) * vy.at2(i, j);
                    gc[j] -= s / vc2[j];
                }
            }
        });
    }

    /// {d} vector broadcast to a {d, n} matrix (identical columns).
    Ref tile_cols(Ref v, int n) {
        const Tensor<T>& vv = nodes_[v].value;
        Tensor<T> out({static_cast<int>(vv.size()), n});
        for (int i = 0; i < out.rows(); ++i)
            for (int j = 0; j < n; ++j) out.at2(i, j) = vv[i];
        return unary(std::move(out), v, [this](Ref y, Ref v2) {
            Tensor<T>& gv = ensure_grad(v2);
            const Tensor<T>& gy = nodes_[y].grad;
            for (int i = 0; i < gy.rows(); ++i)
                for (int j = 0; j < gy.cols(); ++j) gv[i] += gy.at2(i, j);
        });
    }

    /// {c} vector broadcast to a {n, c} matrix (identical rows).
    Ref tile_rows(Ref v, int n) {
        const Tensor<T>& vv = nodes_[v].value;
        Tensor<T> out({n, static_cast<int>(vv.size())});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < out.cols(); ++j) out.at2(i, j) = vv[j];
        return unary(std::move(out), v, [this](Ref y, Ref v2) {
            Tensor<T>& gv = ensure_grad(v2);
            const Tensor<T>& gy = nodes_[y].grad;
            for (int i = 0; i < gy.rows(); ++i)
                for (int j = 0; j < gy.cols(); ++j) gv[j] += gy.at2(i, j);
        });
    }

    /// a[i,j] + v[i] (per-row bias, e.g. conv output channels).
    Ref add_colvec(Ref a, Ref v) {
        const Tensor<T>& va = nodes_[a].value;
        const Tensor<T>& vv = nodes_[v].value;
        Tensor<T> out = va;
        for (int i = 0; i < va.rows(); ++i)
            for (int j = 0; j < va.cols(); ++j) out.at2(i, j) += vv[i];
        return unary_or_binary(std::move(out), a, v, [this](Ref y, Ref a2, Ref v2) {
            spread(a2, y, T(1));
            if (nodes_[v2].needs_grad) {
                Tensor<T>& gv = ensure_grad(v2);
                const Tensor<T>& gy = nodes_[y].grad;
                for (int i = 0; i < gy.rows(); ++i)
                    for (int j = 0; j < gy.cols(); ++j) gv[i] += gy.at2(i, j);
            }
        });
    }

    /// a[i,j] + v[j] (per-column bias, e.g. token-wise linear bias).
    Ref add_rowvec(Ref a, Ref v) {
        const Tensor<T>& va = nodes_[a].value;
        const Tensor<T>& vv = nodes_[v].value;
        Tensor<T> out = va;
        for (int i = 0; i < va.rows(); ++i)
            for (int j = 0; j < va.cols(); ++j) out.at2(i, j) += vv[j];
        return unary_or_binary(std::move(out), a, v, [this](Ref y, Ref a2, Ref v2) {
            spread(a2, y, T(1));
            if (nodes_[v2].needs_grad) {
                Tensor<T>& gv = ensure_grad(v2);
                const Tensor<T>& gy = nodes_[y].grad;
                for (int i = 0; i < gy.rows(); ++i)
                    for (int j = 0; j < gy.cols(); ++j) gv[j] += gy.at2(i, j);
            }
        });
    }

    // ---- structure ----

    Ref concat_rows(const std::vector<Ref>& parts) {
        int cols = nodes_[parts[0]].value.cols();
        int rows = 0;
        for (Ref p : parts) {
            if (nodes_[p].value.cols() != cols) throw std::invalid_argument("concat_rows: col mismatch");
            rows += nodes_[p].value.rows();
        }
        Tensor<T> out({rows, cols});
        int r0 = 0;
        for (Ref p : parts) {
            const Tensor<T>& vp = nodes_[p].value;
            std::copy(vp.data.begin(), vp.data.end(), out.data.begin() + static_cast<std::size_t>(r0) * cols);
            r0 += vp.rows();
        }
        bool ng = false;
        for (Ref p : parts) ng = ng || nodes_[p].needs_grad;
        Ref y = push(std::move(out), ng, -1);
        if (ng) {
            auto ps = parts;
            nodes_[y].back = [this, y, ps]() {
                const Tensor<T>& gy = nodes_[y].grad;
                int cols2 = gy.cols();
                int r = 0;
                for (Ref p : ps) {
                    int pr = nodes_[p].value.rows();
                    if (nodes_[p].needs_grad) {
                        Tensor<T>& gp = ensure_grad(p);
                        for (std::int64_t i = 0; i < static_cast<std::int64_t>(pr) * cols2; ++i)
                            gp[i] += gy[static_cast<std::int64_t>(r) * cols2 + i];
                    }
                    r += pr;
                }
            };
        }
        return y;
    }

    Ref concat_cols(const std::vector<Ref>& parts) {
        int rows = nodes_[parts[0]].value.rows();
        int cols = 0;
        for (Ref p : parts) {
            if (nodes_[p].value.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
            cols += nodes_[p].value.cols();
        }
        Tensor<T> out({rows, cols});
        int c0 = 0;
        for (Ref p : parts) {
            const Tensor<T>& vp = nodes_[p].value;
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < vp.cols(); ++j) out.at2(i, c0 + j) = vp.at2(i, j);
            c0 += vp.cols();
        }
        bool ng = false;
        for (Ref p : parts) ng = ng || nodes_[p].needs_grad;
        Ref y = push(std::move(out), ng, -1);
        if (ng) {
            auto ps = parts;
            nodes_[y].back = [this, y, ps]() {
                const Tensor<T>& gy = nodes_[y].grad;
                int c = 0;
                for (Ref p : ps) {
                    int pc = nodes_[p].value.cols();
                    if (nodes_[p].needs_grad) {
                        Tensor<T>& gp = ensure_grad(p);
                        for (int i = 0; i < gy.rows(); ++i)
                            for (int j = 0; j < pc; ++j) gp.at2(i, j) += gy.at2(i, c + j);
                    }
                    c += pc;
                }
            };
        }
        return y;
    }

    Ref slice_rows(Ref a, int r0, int r1) {
        const Tensor<T>& va = nodes_[a].value;
        int cols = va.cols();
        Tensor<T> out({r1 - r0, cols});
        std::copy(va.data.begin() + static_cast<std::size_t>(r0) * cols,
                  va.data.begin() + static_cast<std::size_t>(r1) * cols, out.data.begin());
        return unary(std::move(out), a, [this, r0](Ref y, Ref a2) {
            Tensor<T>& ga = ensure_grad(a2);
            const Tensor<T>& gy = nodes_[y].grad;
            int cols2 = gy.cols();
            for (std::int64_t i = 0; i < gy.size(); ++i)
                ga[static_cast<std::int64_t>(r0) * cols2 + i] += gy[i];
        });
    }

    Ref slice_cols(Ref a, int c0, int c1) {
        const Tensor<T>& va = nodes_[a].value;
        Tensor<T> out({va.rows(), c1 - c0});
        for (int i = 0; i < va.rows(); ++i)
            for (int j = c0; j < c1; ++j) out.at2(i, j - c0) = va.at2(i, j);
        return unary(std::move(out), a, [this, c0](Ref y, Ref a2) {
            Tensor<T>& ga = ensure_grad(a2);
            const Tensor<T>& gy = nodes_[y].grad;
            for (int i = 0; i < gy.rows(); ++i)
                for (int j = 0; j < gy.cols(); ++j) ga.at2(i, j + c0) += gy.at2(i, j);
        });
    }

    Ref stack_scalars(const std::vector<Ref>& xs) {
        Tensor<T> out({static_cast<int>(xs.size())});
        for (std::size_t i = 0; i < xs.size(); ++i) out[static_cast<std::int64_t>(i)] = nodes_[xs[i]].value[0];
        bool ng = false;
        for (Ref x : xs) ng = ng || nodes_[x].needs_grad;
        Ref y = push(std::move(out), ng, -1);
        if (ng) {
            auto v = xs;
            nodes_[y].back = [this, y, v]() {
                const Tensor<T>& gy = nodes_[y].grad;
                for (std::size_t i = 0; i < v.size(); ++i)
                    if (nodes_[v[i]].needs_grad) ensure_grad(v[i])[0] += gy[static_cast<std::int64_t>(i)];
            };
        }
        return y;
    }

    Ref take(Ref a, std::int64_t idx) {
        Tensor<T> out = Tensor<T>::scalar(nodes_[a].value[idx]);
        return unary(std::move(out), a, [this, idx](Ref y, Ref a2) {
            ensure_grad(a2)[idx] += nodes_[y].grad[0];
        });
    }

    // ---- nonlinear blocks ----

    Ref softmax_rows(Ref a) {
        const Tensor<T>& va = nodes_[a].value;
        Tensor<T> out({va.rows(), va.cols()});
        {
            CMap X(va.data.data(), va.rows(), va.cols());
            Map O(out.data.data(), va.rows(), va.cols());
            auto mx = X.rowwise().maxCoeff();
            O = (X.colwise() - mx).array().exp();
            auto sums = O.rowwise().sum();
            O.array().colwise() /= sums.array();
        }
        return unary(std::move(out), a, [this](Ref y, Ref a2) {
            Tensor<T>& ga = ensure_grad(a2);
            const Tensor<T>& gy = nodes_[y].grad;
            const Tensor<T>& vy = nodes_[y].value;
            for (int i = 0; i < vy.rows(); ++i) {
                T dot = 0;
                for (int j = 0; j < vy.cols(); ++j) dot += gy.at2(i, j) * vy.at2(i, j);
                for (int j = 0; j < vy.cols(); ++j)
                    ga.at2(i, j) += vy.at2(i, j) * (gy.at2(i, j) - dot);
            }
        });
    }

    /// Row-wise layer normalization with learnable gain/bias vectors.
    Ref layernorm_rows(Ref a, Ref gamma, Ref beta, double eps = 1e-5) {
        const Tensor<T>& va = nodes_[a].value;
        const Tensor<T>& vg = nodes_[gamma].value;
        const Tensor<T>& vb = nodes_[beta].value;
        int rows = va.rows(), cols = va.cols();
        Tensor<T> out({rows, cols});
        auto mu = std::make_shared<std::vector<T>>(rows);
        auto istd = std::make_shared<std::vector<T>>(rows);
        for (int i = 0; i < rows; ++i) {
            T m = 0;
            for (int j = 0; j < cols; ++j) m += va.at2(i, j);
            m /= static_cast<T>(cols);
            T var = 0;
            for (int j = 0; j < cols; ++j) {
                T d = va.at2(i, j) - m;
                var += d * d;
            }
            var /= static_cast<T>(cols);
            T is = T(1) / std::sqrt(var + static_cast<T>(eps));
            (*mu)[i] = m;
            (*istd)[i] = is;
            for (int j = 0; j < cols; ++j)
                out.at2(i, j) = (va.at2(i, j) - m) * is * vg[j] + vb[j];
        }
        bool ng = nodes_[a].needs_grad || nodes_[gamma].needs_grad || nodes_[beta].needs_grad;
        Ref y = push(std::move(out), ng, -1);
        if (ng) {
            nodes_[y].back = [this, y, a, gamma, beta, mu, istd]() {
                const Tensor<T>& gy = nodes_[y].grad;
                const Tensor<T>& va2 = nodes_[a].value;
                const Tensor<T>& vg2 = nodes_[gamma].value;
                int rows2 = va2.rows(), cols2 = va2.cols();
                for (int i = 0; i < rows2; ++i) {
                    T m = (*mu)[i], is = (*istd)[i];
                    if (nodes_[gamma].needs_grad || nodes_[beta].needs_grad) {
                        for (int j = 0; j < cols2; ++j) {
                            T xh = (va2.at2(i, j) - m) * is;
                            if (nodes_[gamma].needs_grad) ensure_grad(gamma)[j] += gy.at2(i, j) * xh;
                            if (nodes_[beta].needs_grad) ensure_grad(beta)[j] += gy.at2(i, j);
                        }
                    }
                    if (nodes_[a].needs_grad) {
                        Tensor<T>& ga = ensure_grad(a);
                        T sum_dxh = 0, sum_dxh_xh = 0;
                        for (int j = 0; j < cols2; ++j) {
                            T dxh = gy.at2(i, j) * vg2[j];
                            T xh = (va2.at2(i, j) - m) * is;
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        const T inv_n = T(1) / static_cast<T>(cols2);
                        for (int j = 0; j < cols2; ++j) {
                            T dxh = gy.at2(i, j) * vg2[j];
                            T xh = (va2.at2(i, j) - m) * is;
                            ga.at2(i, j) += is * (dxh - inv_n * sum_dxh - xh * inv_n * sum_dxh_xh);
                        }
                    }
                }
            };
        }
        return y;
    }

    /// Per-channel mean over masked columns; mask is a 0/1 constant of length n.
    Ref masked_mean_cols(Ref a, const Tensor<T>& mask) {
        const Tensor<T>& va = nodes_[a].value;
        if (mask.size() != va.cols()) throw std::invalid_argument("masked_mean_cols: mask length");
        T cnt = mask.sum();
        if (!(cnt > T(0))) throw std::invalid_argument("masked_mean_cols: empty mask");
        Tensor<T> out({va.rows()});
        for (int i = 0; i < va.rows(); ++i) {
            T s = 0;
            for (int j = 0; j < va.cols(); ++j)
                if (mask[j] > T(0.5)) s += va.at2(i, j);
            out[i] = s / cnt;
        }
        auto mk = std::make_shared<Tensor<T>>(mask);
        return unary(std::move(out), a, [this, mk, cnt](Ref y, Ref a2) {
            Tensor<T>& ga = ensure_grad(a2);
            const Tensor<T>& gy = nodes_[y].grad;
            for (int i = 0; i < ga.rows(); ++i)
                for (int j = 0; j < ga.cols(); ++j)
                    if ((*mk)[j] > T(0.5)) ga.at2(i, j) += gy[i] / cnt;
        });
    }

    /// (x - min) / (max - min + eps); gradients route to argmin/argmax (first occurrence).
    /// A constant input maps to all-zeros with no gradient (degenerate range).
    Ref minmax_norm(Ref a, double eps = 1e-12) {
        const Tensor<T>& va = nodes_[a].value;
        std::int64_t imin = 0, imax = 0;
        for (std::int64_t i = 1; i < va.size(); ++i) {
            if (va[i] < va[imin]) imin = i;
            if (va[i] > va[imax]) imax = i;
        }
        const T mn = va[imin], mx = va[imax];
        if (!(mx - mn > static_cast<T>(1e-8) * std::max(T(1), std::abs(mx)))) {
            Ref z = unary(Tensor<T>::zeros(va.shape), a, [](Ref, Ref) {});
            return z;
        }
        const T denom = mx - mn + static_cast<T>(eps);
        Tensor<T> out = va;
        for (auto& v : out.data) v = (v - mn) / denom;
        return unary(std::move(out), a, [this, imin, imax, denom](Ref y, Ref a2) {
            Tensor<T>& ga = ensure_grad(a2);
            const Tensor<T>& gy = nodes_[y].grad;
            const Tensor<T>& vy = nodes_[y].value;
            T gsum = 0, gysum = 0;
            for (std::int64_t i = 0; i < gy.size(); ++i) {
                gsum += gy[i];
                gysum += gy[i] * vy[i];
            }
            for (std::int64_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] / denom;
            ga[imin] -= gsum / denom;
            ga[imax] -= gysum / denom;
            ga[imin] += gysum / denom;
        });
    }

    /// Mean binary cross entropy against a constant target; predictions are
    /// clamped to [eps, 1-eps] before the logs. The gradient keeps flowing at
    /// the clamp (computed from the clamped probability) so saturated pixels
    /// can recover.
    Ref bce_mean(Ref p, const Tensor<T>& target, double eps = 1e-6) {
        const Tensor<T>& vp = nodes_[p].value;
        if (!vp.same_shape(target)) throw std::invalid_argument("bce_mean: shape mismatch");
        const T e = static_cast<T>(eps), hi = T(1) - e;
        const std::int64_t n = vp.size();
        double acc = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            T pc = std::clamp(vp[i], e, hi);
            acc -= static_cast<double>(target[i]) * std::log(static_cast<double>(pc)) +
                   (1.0 - static_cast<double>(target[i])) * std::log(1.0 - static_cast<double>(pc));
        }
        Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
        auto tgt = std::make_shared<Tensor<T>>(target);
        return unary(std::move(out), p, [this, tgt, e, hi, n](Ref y, Ref p2) {
            Tensor<T>& gp = ensure_grad(p2);
            const T g = nodes_[y].grad[0] / static_cast<T>(n);
            const Tensor<T>& vp2 = nodes_[p2].value;
            for (std::int64_t i = 0; i < n; ++i) {
                T pc = std::clamp(vp2[i], e, hi);
                gp[i] += g * (pc - (*tgt)[i]) / (pc * (T(1) - pc));
            }
        });
    }

    /// Bilinear upsample of a {h, w} map to {H, W}, align-corners-off.
    Ref upsample_bilinear(Ref a, int H, int W) {
        const Tensor<T>& va = nodes_[a].value;
        int h = va.rows(), w = va.cols();
        Tensor<T> out({H, W});
        struct Tap { int y0, y1, x0, x1; T w00, w01, w10, w11; };
        auto taps = std::make_shared<std::vector<Tap>>(static_cast<std::size_t>(H) * W);
        for (int i = 0; i < H; ++i) {
            double sy = (i + 0.5) * static_cast<double>(h) / H - 0.5;
            int y0 = static_cast<int>(std::floor(sy));
            double fy = sy - y0;
            int y0c = std::clamp(y0, 0, h - 1), y1c = std::clamp(y0 + 1, 0, h - 1);
            for (int j = 0; j < W; ++j) {
                double sx = (j + 0.5) * static_cast<double>(w) / W - 0.5;
                int x0 = static_cast<int>(std::floor(sx));
                double fx = sx - x0;
                int x0c = std::clamp(x0, 0, w - 1), x1c = std::clamp(x0 + 1, 0, w - 1);
                Tap t{y0c, y1c, x0c, x1c,
                      static_cast<T>((1 - fy) * (1 - fx)), static_cast<T>((1 - fy) * fx),
                      static_cast<T>(fy * (1 - fx)), static_cast<T>(fy * fx)};
                (*taps)[static_cast<std::size_t>(i) * W + j] = t;
                out.at2(i, j) = t.w00 * va.at2(t.y0, t.x0) + t.w01 * va.at2(t.y0, t.x1) +
                                t.w10 * va.at2(t.y1, t.x0) + t.w11 * va.at2(t.y1, t.x1);
            }
        }
        return unary(std::move(out), a, [this, taps, W](Ref y, Ref a2) {
            Tensor<T>& ga = ensure_grad(a2);
            const Tensor<T>& gy = nodes_[y].grad;
            for (int i = 0; i < gy.rows(); ++i)
                for (int j = 0; j < gy.cols(); ++j) {
                    const auto& t = (*taps)[static_cast<std::size_t>(i) * W + j];
                    T g = gy.at2(i, j);
                    ga.at2(t.y0, t.x0) += t.w00 * g;
                    ga.at2(t.y0, t.x1) += t.w01 * g;
                    ga.at2(t.y1, t.x0) += t.w10 * g;
                    ga.at2(t.y1, t.x1) += t.w11 * g;
                }
        });
    }

    /// Cosine similarity of a vector against a constant vector, as a {1} node.
    Ref cosine_to_const(Ref v, const Tensor<T>& t) {
        const Tensor<T>& vv = nodes_[v].value;
        if (vv.size() != t.size()) throw std::invalid_argument("cosine_to_const: dim mismatch");
        double dot = 0, nv = 0, nt = 0;
        for (std::int64_t i = 0; i < vv.size(); ++i) {
            dot += static_cast<double>(vv[i]) * t[i];
            nv += static_cast<double>(vv[i]) * vv[i];
            nt += static_cast<double>(t[i]) * t[i];
        }
        nv = std::sqrt(nv);
        nt = std::sqrt(nt);
        if (nv <= 0 || nt <= 0) throw std::invalid_argument("cosine_to_const: zero-norm vector");
        const double c = dot / (nv * nt);
        Tensor<T> out = Tensor<T>::scalar(static_cast<T>(c));
        auto tc = std::make_shared<Tensor<T>>(t);
        return unary(std::move(out), v, [this, tc, nv, nt, c](Ref y, Ref v2) {
            Tensor<T>& gv = ensure_grad(v2);
            const T g = nodes_[y].grad[0];
            const Tensor<T>& vv2 = nodes_[v2].value;
            for (std::int64_t i = 0; i < vv2.size(); ++i)
                gv[i] += g * static_cast<T>((*tc)[i] / (nv * nt) - c * vv2[i] / (nv * nv));
        });
    }

    // ---- engine ----

    void backward(Ref loss) {
        if (nodes_[loss].value.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
        if (!nodes_[loss].needs_grad) return;
        ensure_grad(loss)[0] = T(1);
        for (Ref i = loss; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.back && !n.grad.data.empty()) n.back();
        }
    }

    /// Visit every parameter-tagged leaf that accumulated gradient.
    void for_each_param_grad(const std::function<void(int, const Tensor<T>&)>& fn) const {
        for (const auto& pr : param_refs_) {
            const Node& n = nodes_[pr.second];
            if (!n.grad.data.empty()) fn(pr.first, n.grad);
        }
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool needs_grad = false;
        std::function<void()> back;
    };

    std::vector<Node> nodes_;
    std::vector<std::pair<int, Ref>> param_refs_;

    Ref push(Tensor<T> v, bool needs_grad, int param_id) {
        nodes_.push_back(Node{std::move(v), Tensor<T>{}, needs_grad, nullptr});
        Ref i = static_cast<Ref>(nodes_.size() - 1);
        if (param_id >= 0) param_refs_.emplace_back(param_id, i);
        return i;
    }

    Tensor<T>& ensure_grad(Ref i) {
        Node& n = nodes_[i];
        if (n.grad.data.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
        return n.grad;
    }

    /// dst.grad += c * y.grad (same shapes).
    void spread(Ref dst, Ref y, T c) {
        if (!nodes_[dst].needs_grad) return;
        Tensor<T>& g = ensure_grad(dst);
        const Tensor<T>& gy = nodes_[y].grad;
        for (std::int64_t i = 0; i < gy.size(); ++i) g[i] += c * gy[i];
    }

    void spread_all(Ref dst, T g) {
        if (!nodes_[dst].needs_grad) return;
        Tensor<T>& gd = ensure_grad(dst);
        for (auto& v : gd.data) v += g;
    }

    void check_same(Ref a, Ref b) const {
        if (!nodes_[a].value.same_shape(nodes_[b].value))
            throw std::invalid_argument("elementwise op: shape mismatch " + nodes_[a].value.shape_str() +
                                        " vs " + nodes_[b].value.shape_str());
    }

    template <typename F>
    Ref unary(Tensor<T> out, Ref a, F&& back) {
        bool ng = nodes_[a].needs_grad;
        Ref y = push(std::move(out), ng, -1);
        if (ng) nodes_[y].back = [this, y, a, back]() { back(y, a); };
        return y;
    }

    template <typename F>
    Ref unary_or_binary(Tensor<T> out, Ref a, Ref b, F&& back) {
        bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
        Ref y = push(std::move(out), ng, -1);
        if (ng) nodes_[y].back = [this, y, a, b, back]() { back(y, a, b); };
        return y;
    }
};

/// Mean of several same-shaped tape values.
template <typename T>
typename Tape<T>::Ref mean_refs(Tape<T>& tape, const std::vector<typename Tape<T>::Ref>& xs) {
    auto acc = xs[0];
    for (std::size_t i = 1; i < xs.size(); ++i) acc = tape.add(acc, xs[i]);
    return tape.scale(acc, 1.0 / static_cast<double>(xs.size()));
}

}  // namespace usd
