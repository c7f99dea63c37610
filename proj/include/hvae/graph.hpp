#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <vector>

#include "hvae/tensor.hpp"

namespace hvae {

// Reverse-mode tape over Tensor<T>. Values are computed eagerly when a node is
// created; gradients are propagated by walking the tape backwards. One Graph
// instance holds one forward pass and is not thread-safe; independent graphs
// may run concurrently.
template <typename T>
class Graph {
public:
    using Ref = int;

    struct Node {
        Tensor<T> val;
        Tensor<T> grad;
        bool needs_grad = false;
        std::function<void(Graph&)> back;  // adds into parents' grads
    };

    const Tensor<T>& val(Ref r) const { return nodes_[r].val; }
    const Tensor<T>& grad(Ref r) const { return nodes_[r].grad; }
    size_t num_nodes() const { return nodes_.size(); }

    // ---- leaves ----

    // Constant input; never receives gradient.
    Ref input(Tensor<T> t) {
        Node n;
        n.val = std::move(t);
        n.needs_grad = false;
        nodes_.push_back(std::move(n));
        return static_cast<Ref>(nodes_.size()) - 1;
    }

    // Trainable leaf. `sink`, when non-null, receives the accumulated gradient
    // after backward(); it must outlive the graph.
    Ref leaf(const Tensor<T>& value, Tensor<T>* sink) {
        Node n;
        n.val = value;
        n.needs_grad = true;
        nodes_.push_back(std::move(n));
        Ref r = static_cast<Ref>(nodes_.size()) - 1;
        if (sink) sinks_.push_back({r, sink});
        return r;
    }

    // ---- elementwise / shape ----

    Ref add(Ref a, Ref b) {
        check_same(a, b);
        Tensor<T> out = nodes_[a].val;
        const auto& bv = nodes_[b].val.v;
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += bv[i];
        return make(std::move(out), {a, b}, [a, b](Graph& g) {
            g.acc(a, g.cur_grad());
            g.acc(b, g.cur_grad());
        });
    }

    // a [n,c] + row vector b [1,c], broadcast over rows.
    Ref add_rowvec(Ref a, Ref b) {
        const auto& av = nodes_[a].val;
        const auto& bv = nodes_[b].val;
        if (bv.rows != 1 || bv.cols != av.cols) throw std::invalid_argument("add_rowvec: shape");
        Tensor<T> out = av;
        for (int i = 0; i < out.rows; ++i) {
            T* r = out.row(i);
            for (int j = 0; j < out.cols; ++j) r[j] += bv.v[j];
        }
        return make(std::move(out), {a, b}, [a, b](Graph& g) {
            const Tensor<T>& go = g.cur_grad();
            g.acc(a, go);
            if (g.nodes_[b].needs_grad) {
                Tensor<T>& gb = g.nodes_[b].grad;
                for (int i = 0; i < go.rows; ++i) {
                    const T* r = go.row(i);
                    for (int j = 0; j < go.cols; ++j) gb.v[j] += r[j];
                }
            }
        });
    }

    Ref mul(Ref a, Ref b) {
        check_same(a, b);
        Tensor<T> out = nodes_[a].val;
        const auto& bv = nodes_[b].val.v;
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= bv[i];
        return make(std::move(out), {a, b}, [a, b](Graph& g) {
            const Tensor<T>& go = g.cur_grad();
            if (g.nodes_[a].needs_grad) {
                Tensor<T>& ga = g.nodes_[a].grad;
                const auto& bv = g.nodes_[b].val.v;
                for (size_t i = 0; i < go.v.size(); ++i) ga.v[i] += go.v[i] * bv[i];
            }
            if (g.nodes_[b].needs_grad) {
                Tensor<T>& gb = g.nodes_[b].grad;
                const auto& av = g.nodes_[a].val.v;
                for (size_t i = 0; i < go.v.size(); ++i) gb.v[i] += go.v[i] * av[i];
            }
        });
    }

    Ref scale(Ref a, T s) {
        Tensor<T> out = nodes_[a].val;
        for (T& x : out.v) x *= s;
        return make(std::move(out), {a}, [a, s](Graph& g) {
            if (!g.nodes_[a].needs_grad) return;
            const Tensor<T>& go = g.cur_grad();
            Tensor<T>& ga = g.nodes_[a].grad;
            for (size_t i = 0; i < go.v.size(); ++i) ga.v[i] += go.v[i] * s;
        });
    }

    Ref add_const(Ref a, T s) {
        Tensor<T> out = nodes_[a].val;
        for (T& x : out.v) x += s;
        return make(std::move(out), {a}, [a](Graph& g) { g.acc(a, g.cur_grad()); });
    }

    Ref relu(Ref a) {
        Tensor<T> out = nodes_[a].val;
        for (T& x : out.v) x = x > T(0) ? x : T(0);
        return make(std::move(out), {a}, [a](Graph& g) {
            if (!g.nodes_[a].needs_grad) return;
            const Tensor<T>& go = g.cur_grad();
            Tensor<T>& ga = g.nodes_[a].grad;
            const auto& av = g.nodes_[a].val.v;
            for (size_t i = 0; i < go.v.size(); ++i)
                if (av[i] > T(0)) ga.v[i] += go.v[i];
        });
    }

    Ref softplus(Ref a) {
        Tensor<T> out = nodes_[a].val;
        for (T& x : out.v) {
            const T ax = x > T(0) ? x : -x;
            x = (x > T(0) ? x : T(0)) + std::log1p(std::exp(-ax));
        }
        return make(std::move(out), {a}, [a](Graph& g) {
            if (!g.nodes_[a].needs_grad) return;
            const Tensor<T>& go = g.cur_grad();
            Tensor<T>& ga = g.nodes_[a].grad;
            const auto& av = g.nodes_[a].val.v;
            for (size_t i = 0; i < go.v.size(); ++i) {
                const T sig = T(1) / (T(1) + std::exp(-av[i]));
                ga.v[i] += go.v[i] * sig;
            }
        });
    }

    // ---- linear algebra ----

    Ref matmul(Ref a, Ref b) {
        const auto& av = nodes_[a].val;
        const auto& bv = nodes_[b].val;
        if (av.cols != bv.rows) throw std::invalid_argument("matmul: inner dims");
        Tensor<T> out(av.rows, bv.cols);
        matmul_acc(av, bv, out);
        return make(std::move(out), {a, b}, [a, b](Graph& g) {
            const Tensor<T>& go = g.cur_grad();
            if (g.nodes_[a].needs_grad) matmul_nt_acc(go, g.nodes_[b].val, g.nodes_[a].grad);
            if (g.nodes_[b].needs_grad) matmul_tn_acc(g.nodes_[a].val, go, g.nodes_[b].grad);
        });
    }

    // a * b^T
    Ref matmul_nt(Ref a, Ref b) {
        const auto& av = nodes_[a].val;
        const auto& bv = nodes_[b].val;
        if (av.cols != bv.cols) throw std::invalid_argument("matmul_nt: inner dims");
        Tensor<T> out(av.rows, bv.rows);
        matmul_nt_acc(av, bv, out);
        return make(std::move(out), {a, b}, [a, b](Graph& g) {
            const Tensor<T>& go = g.cur_grad();
            if (g.nodes_[a].needs_grad) matmul_acc(go, g.nodes_[b].val, g.nodes_[a].grad);
            if (g.nodes_[b].needs_grad) matmul_tn_acc(go, g.nodes_[a].val, g.nodes_[b].grad);
        });
    }

    Ref linear(Ref x, Ref w, Ref b) { return add_rowvec(matmul(x, w), b); }

    // ---- structural ----

    Ref concat_rows(const std::vector<Ref>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
        int cols = nodes_[parts[0]].val.cols, rows = 0;
        for (Ref p : parts) {
            if (nodes_[p].val.cols != cols) throw std::invalid_argument("concat_rows: cols");
            rows += nodes_[p].val.rows;
        }
        Tensor<T> out(rows, cols);
        int at = 0;
        for (Ref p : parts) {
            const auto& pv = nodes_[p].val;
            std::copy(pv.v.begin(), pv.v.end(), out.row(at));
            at += pv.rows;
        }
        return make(std::move(out), parts, [parts](Graph& g) {
            const Tensor<T>& go = g.cur_grad();
            int at = 0;
            for (Ref p : parts) {
                const int pr = g.nodes_[p].val.rows;
                if (g.nodes_[p].needs_grad) {
                    Tensor<T>& gp = g.nodes_[p].grad;
                    for (size_t i = 0; i < gp.v.size(); ++i)
                        gp.v[i] += go.v[static_cast<size_t>(at) * go.cols + i];
                }
                at += pr;
            }
        });
    }

    Ref concat_cols(Ref a, Ref b) {
        const auto& av = nodes_[a].val;
        const auto& bv = nodes_[b].val;
        if (av.rows != bv.rows) throw std::invalid_argument("concat_cols: rows");
        Tensor<T> out(av.rows, av.cols + bv.cols);
        for (int i = 0; i < out.rows; ++i) {
            std::copy(av.row(i), av.row(i) + av.cols, out.row(i));
            std::copy(bv.row(i), bv.row(i) + bv.cols, out.row(i) + av.cols);
        }
        return make(std::move(out), {a, b}, [a, b](Graph& g) {
            const Tensor<T>& go = g.cur_grad();
            const int ac = g.nodes_[a].val.cols;
            if (g.nodes_[a].needs_grad) {
                Tensor<T>& ga = g.nodes_[a].grad;
                for (int i = 0; i < go.rows; ++i)
                    for (int j = 0; j < ac; ++j) ga(i, j) += go(i, j);
            }
            if (g.nodes_[b].needs_grad) {
                Tensor<T>& gb = g.nodes_[b].grad;
                for (int i = 0; i < go.rows; ++i)
                    for (int j = 0; j < gb.cols; ++j) gb(i, j) += go(i, j + ac);
            }
        });
    }

    Ref slice_rows(Ref a, int r0, int r1) {
        const auto& av = nodes_[a].val;
        if (r0 < 0 || r1 > av.rows || r0 >= r1) throw std::invalid_argument("slice_rows: range");
        Tensor<T> out(r1 - r0, av.cols);
        std::copy(av.row(r0), av.row(r0) + out.size(), out.v.begin());
        return make(std::move(out), {a}, [a, r0](Graph& g) {
            if (!g.nodes_[a].needs_grad) return;
            const Tensor<T>& go = g.cur_grad();
            Tensor<T>& ga = g.nodes_[a].grad;
            T* dst = ga.row(r0);
            for (size_t i = 0; i < go.v.size(); ++i) dst[i] += go.v[i];
        });
    }

    Ref slice_cols(Ref a, int c0, int c1) {
        const auto& av = nodes_[a].val;
        if (c0 < 0 || c1 > av.cols || c0 >= c1) throw std::invalid_argument("slice_cols: range");
        Tensor<T> out(av.rows, c1 - c0);
        for (int i = 0; i < av.rows; ++i)
            std::copy(av.row(i) + c0, av.row(i) + c1, out.row(i));
        return make(std::move(out), {a}, [a, c0](Graph& g) {
            if (!g.nodes_[a].needs_grad) return;
            const Tensor<T>& go = g.cur_grad();
            Tensor<T>& ga = g.nodes_[a].grad;
            for (int i = 0; i < go.rows; ++i)
                for (int j = 0; j < go.cols; ++j) ga(i, j + c0) += go(i, j);
        });
    }

    // Rows of an embedding table selected by ids.
    Ref gather_rows(Ref table, const std::vector<int>& ids) {
        const auto& tv = nodes_[table].val;
        Tensor<T> out(static_cast<int>(ids.size()), tv.cols);
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= tv.rows) throw std::out_of_range("gather_rows: id");
            std::copy(tv.row(ids[i]), tv.row(ids[i]) + tv.cols, out.row(static_cast<int>(i)));
        }
        return make(std::move(out), {table}, [table, ids](Graph& g) {
            if (!g.nodes_[table].needs_grad) return;
            const Tensor<T>& go = g.cur_grad();
            Tensor<T>& gt = g.nodes_[table].grad;
            for (size_t i = 0; i < ids.size(); ++i) {
                T* dst = gt.row(ids[i]);
                const T* src = go.row(static_cast<int>(i));
                for (int j = 0; j < go.cols; ++j) dst[j] += src[j];
            }
        });
    }

    // ---- normalization / attention pieces ----

    // Row-wise softmax of (a + mask); mask entries are 0 or -inf style offsets.
    Ref softmax_rows(Ref a, const Tensor<T>* mask = nullptr) {
        const auto& av = nodes_[a].val;
        if (mask && !mask->same_shape(av)) throw std::invalid_argument("softmax_rows: mask shape");
        Tensor<T> out(av.rows, av.cols);
        for (int i = 0; i < av.rows; ++i) {
            const T* x = av.row(i);
            T* y = out.row(i);
            T mx = -std::numeric_limits<T>::infinity();
            for (int j = 0; j < av.cols; ++j) {
                const T xj = x[j] + (mask ? (*mask)(i, j) : T(0));
                y[j] = xj;
                mx = std::max(mx, xj);
            }
            T sum = 0;
            for (int j = 0; j < av.cols; ++j) {
                y[j] = std::exp(y[j] - mx);
                sum += y[j];
            }
            for (int j = 0; j < av.cols; ++j) y[j] /= sum;
        }
        Ref r = make(std::move(out), {a}, {});
        // The backward pass reads the softmax output, so it needs the node's own index.
        if (nodes_[r].needs_grad) nodes_[r].back = [a, r](Graph& g) {
            if (!g.nodes_[a].needs_grad) return;
            const Tensor<T>& s = g.nodes_[r].val;
            const Tensor<T>& go = g.nodes_[r].grad;
            Tensor<T>& ga = g.nodes_[a].grad;
            for (int i = 0; i < s.rows; ++i) {
                const T* sr = s.row(i);
                const T* gr = go.row(i);
                T dot = 0;
                for (int j = 0; j < s.cols; ++j) dot += sr[j] * gr[j];
                T* gar = ga.row(i);
                for (int j = 0; j < s.cols; ++j) gar[j] += sr[j] * (gr[j] - dot);
            }
        };
        return r;
    }

    // Per-row layer norm with gain/bias row vectors.
    Ref layernorm(Ref x, Ref gain, Ref bias, T eps = T(1e-5)) {
        const auto& xv = nodes_[x].val;
        const auto& gv = nodes_[gain].val;
        const auto& bv = nodes_[bias].val;
        if (gv.rows != 1 || gv.cols != xv.cols || bv.rows != 1 || bv.cols != xv.cols)
            throw std::invalid_argument("layernorm: gain/bias shape");
        const int C = xv.cols;
        Tensor<T> out(xv.rows, C);
        Tensor<T> xhat(xv.rows, C);
        std::vector<T> inv_std(xv.rows);
        for (int i = 0; i < xv.rows; ++i) {
            const T* xr = xv.row(i);
            T mu = 0;
            for (int j = 0; j < C; ++j) mu += xr[j];
            mu /= C;
            T var = 0;
            for (int j = 0; j < C; ++j) var += (xr[j] - mu) * (xr[j] - mu);
            var /= C;
            const T is = T(1) / std::sqrt(var + eps);
            inv_std[i] = is;
            T* hr = xhat.row(i);
            T* yr = out.row(i);
            for (int j = 0; j < C; ++j) {
                hr[j] = (xr[j] - mu) * is;
                yr[j] = hr[j] * gv.v[j] + bv.v[j];
            }
        }
        auto xh = std::make_shared<Tensor<T>>(std::move(xhat));
        auto is = std::make_shared<std::vector<T>>(std::move(inv_std));
        return make(std::move(out), {x, gain, bias}, [x, gain, bias, xh, is](Graph& g) {
            const Tensor<T>& go = g.cur_grad();
            const int C = go.cols;
            const auto& gv = g.nodes_[gain].val;
            if (g.nodes_[gain].needs_grad) {
                Tensor<T>& gg = g.nodes_[gain].grad;
                for (int i = 0; i < go.rows; ++i)
                    for (int j = 0; j < C; ++j) gg.v[j] += go(i, j) * (*xh)(i, j);
            }
            if (g.nodes_[bias].needs_grad) {
                Tensor<T>& gb = g.nodes_[bias].grad;
                for (int i = 0; i < go.rows; ++i)
                    for (int j = 0; j < C; ++j) gb.v[j] += go(i, j);
            }
            if (g.nodes_[x].needs_grad) {
                Tensor<T>& gx = g.nodes_[x].grad;
                for (int i = 0; i < go.rows; ++i) {
                    T m1 = 0, m2 = 0;
                    for (int j = 0; j < C; ++j) {
                        const T dh = go(i, j) * gv.v[j];
                        m1 += dh;
                        m2 += dh * (*xh)(i, j);
                    }
                    m1 /= C;
                    m2 /= C;
                    for (int j = 0; j < C; ++j) {
                        const T dh = go(i, j) * gv.v[j];
                        gx(i, j) += (*is)[i] * (dh - m1 - (*xh)(i, j) * m2);
                    }
                }
            }
        });
    }

    // ---- losses ----

    // Sum over rows of -log softmax(logits)[target]; returns a scalar node.
    Ref cross_entropy_sum(Ref logits, const std::vector<int>& targets) {
        const auto& lv = nodes_[logits].val;
        if (static_cast<int>(targets.size()) != lv.rows)
            throw std::invalid_argument("cross_entropy_sum: target count");
        auto probs = std::make_shared<Tensor<T>>(lv.rows, lv.cols);
        T total = 0;
        for (int i = 0; i < lv.rows; ++i) {
            const T* x = lv.row(i);
            T mx = x[0];
            for (int j = 1; j < lv.cols; ++j) mx = std::max(mx, x[j]);
            T sum = 0;
            T* pr = probs->row(i);
            for (int j = 0; j < lv.cols; ++j) {
                pr[j] = std::exp(x[j] - mx);
                sum += pr[j];
            }
            for (int j = 0; j < lv.cols; ++j) pr[j] /= sum;
            if (targets[i] < 0 || targets[i] >= lv.cols)
                throw std::out_of_range("cross_entropy_sum: target id");
            total += std::log(sum) + mx - x[targets[i]];
        }
        return make(scalar_tensor(total), {logits}, [logits, probs, targets](Graph& g) {
            if (!g.nodes_[logits].needs_grad) return;
            const T go = g.cur_grad().v[0];
            Tensor<T>& gl = g.nodes_[logits].grad;
            for (int i = 0; i < probs->rows; ++i) {
                const T* pr = probs->row(i);
                T* gr = gl.row(i);
                for (int j = 0; j < probs->cols; ++j) gr[j] += go * pr[j];
                gr[targets[i]] -= go;
            }
        });
    }

    // KL( N(mq, diag sq^2) || N(mp, diag sp^2) ) summed over all entries.
    Ref kl_diag_sum(Ref mq, Ref sq, Ref mp, Ref sp) {
        check_same(mq, sq);
        check_same(mq, mp);
        check_same(mq, sp);
        const auto& mqv = nodes_[mq].val, &sqv = nodes_[sq].val;
        const auto& mpv = nodes_[mp].val, &spv = nodes_[sp].val;
        T total = 0;
        for (size_t i = 0; i < mqv.v.size(); ++i) {
            if (sqv.v[i] <= T(0) || spv.v[i] <= T(0))
                throw std::domain_error("kl_diag_sum: nonpositive std");
            const T dm = mqv.v[i] - mpv.v[i];
            total += std::log(spv.v[i] / sqv.v[i]) +
                     (sqv.v[i] * sqv.v[i] + dm * dm) / (T(2) * spv.v[i] * spv.v[i]) - T(0.5);
        }
        return make(scalar_tensor(total), {mq, sq, mp, sp}, [mq, sq, mp, sp](Graph& g) {
            const T go = g.cur_grad().v[0];
            const auto& mqv = g.nodes_[mq].val, &sqv = g.nodes_[sq].val;
            const auto& mpv = g.nodes_[mp].val, &spv = g.nodes_[sp].val;
            for (size_t i = 0; i < mqv.v.size(); ++i) {
                const T dm = mqv.v[i] - mpv.v[i];
                const T sp2 = spv.v[i] * spv.v[i];
                if (g.nodes_[mq].needs_grad) g.nodes_[mq].grad.v[i] += go * dm / sp2;
                if (g.nodes_[mp].needs_grad) g.nodes_[mp].grad.v[i] -= go * dm / sp2;
                if (g.nodes_[sq].needs_grad)
                    g.nodes_[sq].grad.v[i] += go * (sqv.v[i] / sp2 - T(1) / sqv.v[i]);
                if (g.nodes_[sp].needs_grad)
                    g.nodes_[sp].grad.v[i] +=
                        go * (T(1) / spv.v[i] -
                              (sqv.v[i] * sqv.v[i] + dm * dm) / (sp2 * spv.v[i]));
            }
        });
    }

    Ref sum_all(Ref a) {
        const auto& av = nodes_[a].val;
        T total = 0;
        for (T x : av.v) total += x;
        return make(scalar_tensor(total), {a}, [a](Graph& g) {
            if (!g.nodes_[a].needs_grad) return;
            const T go = g.cur_grad().v[0];
            for (T& x : g.nodes_[a].grad.v) x += go;
        });
    }

    // ---- backward ----

    void backward(Ref loss) {
        if (nodes_[loss].val.rows != 1 || nodes_[loss].val.cols != 1)
            throw std::invalid_argument("backward: loss must be scalar");
        for (auto& n : nodes_)
            if (n.grad.rows == 0) n.grad = Tensor<T>(n.val.rows, n.val.cols);
        nodes_[loss].grad.v[0] = T(1);
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            cur_ = i;
            if (nodes_[i].back && nonzero(nodes_[i].grad)) nodes_[i].back(*this);
        }
        for (auto& [ref, sink] : sinks_) {
            const Tensor<T>& gn = nodes_[ref].grad;
            for (size_t i = 0; i < gn.v.size(); ++i) sink->v[i] += gn.v[i];
        }
    }

private:
    std::vector<Node> nodes_;
    std::vector<std::pair<Ref, Tensor<T>*>> sinks_;
    int cur_ = -1;

    const Tensor<T>& cur_grad() const { return nodes_[cur_].grad; }

    void acc(Ref r, const Tensor<T>& g) {
        if (!nodes_[r].needs_grad) return;
        Tensor<T>& dst = nodes_[r].grad;
        for (size_t i = 0; i < g.v.size(); ++i) dst.v[i] += g.v[i];
    }

    static bool nonzero(const Tensor<T>& t) {
        for (T x : t.v)
            if (x != T(0)) return true;
        return false;
    }

    void check_same(Ref a, Ref b) const {
        if (!nodes_[a].val.same_shape(nodes_[b].val))
            throw std::invalid_argument("graph op: shape mismatch");
    }

    Ref make(Tensor<T> out, const std::vector<Ref>& parents, std::function<void(Graph&)> back) {
        Node n;
        n.val = std::move(out);
        n.needs_grad = false;
        for (Ref p : parents) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
        if (n.needs_grad) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return static_cast<Ref>(nodes_.size()) - 1;
    }
};

}  // namespace hvae
