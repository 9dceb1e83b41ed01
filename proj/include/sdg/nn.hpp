#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "sdg/common.hpp"
#include "sdg/tensor.hpp"

namespace sdg::nn {

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Map = Eigen::Map<EMat<T>>;
template <class T>
using CMap = Eigen::Map<const EMat<T>>;

template <class T>
inline Map<T> as_mat(Tensor<T>& t, int64_t rows, int64_t cols) {
    assert(t.numel() == rows * cols);
    return Map<T>(t.data(), rows, cols);
}
template <class T>
inline CMap<T> as_mat(const Tensor<T>& t, int64_t rows, int64_t cols) {
    assert(t.numel() == rows * cols);
    return CMap<T>(t.data(), rows, cols);
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <class T>
struct Param {
    std::string name;
    Tensor<T> value;
};

// Flat parameter list in registration order; gradients live in a parallel
// buffer so forward/backward stay read-only on the parameters themselves.
template <class T>
using ParamList = std::vector<Param<T>*>;

template <class T>
struct GradBuffer {
    std::vector<Tensor<T>> g;

    explicit GradBuffer(const ParamList<T>& ps) {
        g.reserve(ps.size());
        for (auto* p : ps) g.emplace_back(p->value.shape);
    }
    void zero() {
        for (auto& t : g) t.zero();
    }
    void add(const GradBuffer<T>& o) {
        for (size_t i = 0; i < g.size(); ++i) g[i].add(o.g[i]);
    }
    Tensor<T>& of(const ParamList<T>& ps, const Param<T>* p) {
        for (size_t i = 0; i < ps.size(); ++i)
            if (ps[i] == p) return g[i];
        throw RuntimeFailure("gradient buffer: unregistered parameter " + p->name);
    }
};

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <class T>
inline T gelu(T x) {
    return x * T(0.5) * (T(1) + std::erf(x / T(M_SQRT2)));
}
template <class T>
inline T gelu_grad(T x) {
    T phi = std::exp(-x * x / T(2)) / T(std::sqrt(2.0 * M_PI));
    T Phi = T(0.5) * (T(1) + std::erf(x / T(M_SQRT2)));
    return Phi + x * phi;
}

template <class T>
inline void softmax_row(T* x, int64_t n) {
    T m = x[0];
    for (int64_t i = 1; i < n; ++i) m = std::max(m, x[i]);
    T s = 0;
    for (int64_t i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - m);
        s += x[i];
    }
    for (int64_t i = 0; i < n; ++i) x[i] /= s;
}

// dlogits given softmax output p and dprob, in place over one row.
template <class T>
inline void softmax_backward_row(const T* p, const T* dp, T* dlogit, int64_t n) {
    T dot = 0;
    for (int64_t i = 0; i < n; ++i) dot += p[i] * dp[i];
    for (int64_t i = 0; i < n; ++i) dlogit[i] = p[i] * (dp[i] - dot);
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

template <class T>
struct Linear {
    Param<T> W; // (out, in)
    Param<T> b; // (out)
    int64_t in = 0, out = 0;

    void init(const std::string& name, int64_t in_dim, int64_t out_dim, Rng& rng) {
        in = in_dim;
        out = out_dim;
        W.name = name + ".weight";
        b.name = name + ".bias";
        W.value = Tensor<T>({out, in});
        b.value = Tensor<T>({out});
        W.value.fill_normal(rng, (T)(1.0 / std::sqrt((double)in)));
        b.value.zero();
    }

    void params(ParamList<T>& ps) {
        ps.push_back(&W);
        ps.push_back(&b);
    }

    // x: (n, in) -> y: (n, out)
    void forward(const Tensor<T>& x, Tensor<T>& y) const {
        int64_t n = x.numel() / in;
        y = Tensor<T>({n, out});
        as_mat(y, n, out).noalias() = as_mat(x, n, in) * as_mat(W.value, out, in).transpose();
        auto ym = as_mat(y, n, out);
        ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value.data(), out);
    }

    // accumulates into gW/gb, writes dx
    void backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>& dx, Tensor<T>& gW, Tensor<T>& gb) const {
        int64_t n = x.numel() / in;
        dx = Tensor<T>({n, in});
        as_mat(dx, n, in).noalias() = as_mat(dy, n, out) * as_mat(W.value, out, in);
        as_mat(gW, out, in).noalias() += as_mat(dy, n, out).transpose() * as_mat(x, n, in);
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), out) += as_mat(dy, n, out).colwise().sum();
    }
};

// ---------------------------------------------------------------------------
// LayerNorm (normalizes the last dim)
// ---------------------------------------------------------------------------

template <class T>
struct LayerNorm {
    Param<T> gamma, beta;
    int64_t dim = 0;
    static constexpr T kEps = T(1e-5);

    void init(const std::string& name, int64_t d) {
        dim = d;
        gamma.name = name + ".gamma";
        beta.name = name + ".beta";
        gamma.value = Tensor<T>({d});
        gamma.value.fill(T(1));
        beta.value = Tensor<T>({d});
    }

    void params(ParamList<T>& ps) {
        ps.push_back(&gamma);
        ps.push_back(&beta);
    }

    struct Cache {
        Tensor<T> xhat;   // (n, dim)
        std::vector<T> inv_std;
    };

    void forward(const Tensor<T>& x, Tensor<T>& y, Cache& c) const {
        int64_t n = x.numel() / dim;
        y = Tensor<T>({n, dim});
        c.xhat = Tensor<T>({n, dim});
        c.inv_std.assign((size_t)n, T(0));
        const T* g = gamma.value.data();
        const T* bb = beta.value.data();
        for (int64_t r = 0; r < n; ++r) {
            const T* xr = x.data() + r * dim;
            T mean = 0;
            for (int64_t i = 0; i < dim; ++i) mean += xr[i];
            mean /= (T)dim;
            T var = 0;
            for (int64_t i = 0; i < dim; ++i) {
                T d = xr[i] - mean;
                var += d * d;
            }
            var /= (T)dim;
            T is = T(1) / std::sqrt(var + kEps);
            c.inv_std[(size_t)r] = is;
            T* xh = c.xhat.data() + r * dim;
            T* yr = y.data() + r * dim;
            for (int64_t i = 0; i < dim; ++i) {
                xh[i] = (xr[i] - mean) * is;
                yr[i] = xh[i] * g[i] + bb[i];
            }
        }
    }

    void backward(const Tensor<T>& dy, const Cache& c, Tensor<T>& dx, Tensor<T>& ggamma, Tensor<T>& gbeta) const {
        int64_t n = dy.numel() / dim;
        dx = Tensor<T>({n, dim});
        const T* g = gamma.value.data();
        for (int64_t r = 0; r < n; ++r) {
            const T* dyr = dy.data() + r * dim;
            const T* xh = c.xhat.data() + r * dim;
            T is = c.inv_std[(size_t)r];
            T sum_dg = 0, sum_dgx = 0;
            for (int64_t i = 0; i < dim; ++i) {
                T dg = dyr[i] * g[i];
                sum_dg += dg;
                sum_dgx += dg * xh[i];
                ggamma[i] += dyr[i] * xh[i];
                gbeta[i] += dyr[i];
            }
            T inv_n = T(1) / (T)dim;
            T* dxr = dx.data() + r * dim;
            for (int64_t i = 0; i < dim; ++i) {
                T dg = dyr[i] * g[i];
                dxr[i] = is * (dg - inv_n * sum_dg - xh[i] * inv_n * sum_dgx);
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Multi-head self-attention (bidirectional, single sample, (L, C))
// ---------------------------------------------------------------------------

template <class T>
struct SelfAttention {
    Linear<T> wq, wk, wv, wo;
    int64_t width = 0, heads = 0, hd = 0;

    void init(const std::string& name, int64_t c, int64_t n_heads, Rng& rng) {
        validate(c % n_heads == 0, "attention width must divide heads");
        width = c;
        heads = n_heads;
        hd = c / n_heads;
        wq.init(name + ".q", c, c, rng);
        wk.init(name + ".k", c, c, rng);
        wv.init(name + ".v", c, c, rng);
        wo.init(name + ".o", c, c, rng);
    }

    void params(ParamList<T>& ps) {
        wq.params(ps);
        wk.params(ps);
        wv.params(ps);
        wo.params(ps);
    }

    struct Cache {
        Tensor<T> x, q, k, v;   // (L, C)
        Tensor<T> att;          // (heads, L, L)
        Tensor<T> ctx;          // (L, C) pre-output-projection
    };

    void forward(const Tensor<T>& x, Tensor<T>& y, Cache& c) const {
        int64_t L = x.numel() / width;
        c.x = x;
        wq.forward(x, c.q);
        wk.forward(x, c.k);
        wv.forward(x, c.v);
        c.att = Tensor<T>({heads, L, L});
        c.ctx = Tensor<T>({L, width});
        T scale = T(1) / std::sqrt((T)hd);
        for (int64_t h = 0; h < heads; ++h) {
            for (int64_t i = 0; i < L; ++i) {
                T* row = c.att.data() + (h * L + i) * L;
                const T* qi = c.q.data() + i * width + h * hd;
                for (int64_t j = 0; j < L; ++j) {
                    const T* kj = c.k.data() + j * width + h * hd;
                    T s = 0;
                    for (int64_t d = 0; d < hd; ++d) s += qi[d] * kj[d];
                    row[j] = s * scale;
                }
                softmax_row(row, L);
                T* out = c.ctx.data() + i * width + h * hd;
                for (int64_t d = 0; d < hd; ++d) out[d] = 0;
                for (int64_t j = 0; j < L; ++j) {
                    const T* vj = c.v.data() + j * width + h * hd;
                    T a = row[j];
                    for (int64_t d = 0; d < hd; ++d) out[d] += a * vj[d];
                }
            }
        }
        wo.forward(c.ctx, y);
    }

    void backward(const Tensor<T>& dy, const Cache& c, Tensor<T>& dx, GradBuffer<T>& gb, const ParamList<T>& ps) const {
        int64_t L = dy.numel() / width;
        Tensor<T> dctx;
        wo.backward(c.ctx, dy, dctx, gb.of(ps, &wo.W), gb.of(ps, &wo.b));

        Tensor<T> dq({L, width}), dk({L, width}), dv({L, width});
        T scale = T(1) / std::sqrt((T)hd);
        std::vector<T> dprob, dlogit;
        for (int64_t h = 0; h < heads; ++h) {
            for (int64_t i = 0; i < L; ++i) {
                const T* arow = c.att.data() + (h * L + i) * L;
                const T* dctx_i = dctx.data() + i * width + h * hd;
                dprob.assign((size_t)L, T(0));
                for (int64_t j = 0; j < L; ++j) {
                    const T* vj = c.v.data() + j * width + h * hd;
                    T s = 0;
                    for (int64_t d = 0; d < hd; ++d) s += dctx_i[d] * vj[d];
                    dprob[(size_t)j] = s;
                    T* dvj = dv.data() + j * width + h * hd;
                    T a = arow[j];
                    for (int64_t d = 0; d < hd; ++d) dvj[d] += a * dctx_i[d];
                }
                dlogit.assign((size_t)L, T(0));
                softmax_backward_row(arow, dprob.data(), dlogit.data(), L);
                const T* qi = c.q.data() + i * width + h * hd;
                T* dqi = dq.data() + i * width + h * hd;
                for (int64_t j = 0; j < L; ++j) {
                    T dl = dlogit[(size_t)j] * scale;
                    const T* kj = c.k.data() + j * width + h * hd;
                    T* dkj = dk.data() + j * width + h * hd;
                    for (int64_t d = 0; d < hd; ++d) {
                        dqi[d] += dl * kj[d];
                        dkj[d] += dl * qi[d];
                    }
                }
            }
        }
        Tensor<T> dx_q, dx_k, dx_v;
        wq.backward(c.x, dq, dx_q, gb.of(ps, &wq.W), gb.of(ps, &wq.b));
        wk.backward(c.x, dk, dx_k, gb.of(ps, &wk.W), gb.of(ps, &wk.b));
        wv.backward(c.x, dv, dx_v, gb.of(ps, &wv.W), gb.of(ps, &wv.b));
        dx = dx_q;
        dx.add(dx_k);
        dx.add(dx_v);
    }
};

// ---------------------------------------------------------------------------
// MLP with GELU
// ---------------------------------------------------------------------------

template <class T>
struct Mlp {
    Linear<T> fc1, fc2;

    void init(const std::string& name, int64_t c, int64_t hidden, Rng& rng) {
        fc1.init(name + ".fc1", c, hidden, rng);
        fc2.init(name + ".fc2", hidden, c, rng);
    }

    void params(ParamList<T>& ps) {
        fc1.params(ps);
        fc2.params(ps);
    }

    struct Cache {
        Tensor<T> x, h, act;
    };

    void forward(const Tensor<T>& x, Tensor<T>& y, Cache& c) const {
        c.x = x;
        fc1.forward(x, c.h);
        c.act = c.h;
        for (int64_t i = 0; i < c.act.numel(); ++i) c.act[i] = gelu(c.h[i]);
        fc2.forward(c.act, y);
    }

    void backward(const Tensor<T>& dy, const Cache& c, Tensor<T>& dx, GradBuffer<T>& gb, const ParamList<T>& ps) const {
        Tensor<T> dact;
        fc2.backward(c.act, dy, dact, gb.of(ps, &fc2.W), gb.of(ps, &fc2.b));
        for (int64_t i = 0; i < dact.numel(); ++i) dact[i] *= gelu_grad(c.h[i]);
        fc1.backward(c.x, dact, dx, gb.of(ps, &fc1.W), gb.of(ps, &fc1.b));
    }
};

// ---------------------------------------------------------------------------
// Pre-LN transformer block: x += attn(ln1(x)); x += mlp(ln2(x))
// ---------------------------------------------------------------------------

template <class T>
struct TransformerBlock {
    LayerNorm<T> ln1, ln2;
    SelfAttention<T> attn;
    Mlp<T> mlp;

    void init(const std::string& name, int64_t c, int64_t heads, Rng& rng) {
        ln1.init(name + ".ln1", c);
        ln2.init(name + ".ln2", c);
        attn.init(name + ".attn", c, heads, rng);
        mlp.init(name + ".mlp", c, 4 * c, rng);
    }

    void params(ParamList<T>& ps) {
        ln1.params(ps);
        attn.params(ps);
        ln2.params(ps);
        mlp.params(ps);
    }

    struct Cache {
        typename LayerNorm<T>::Cache ln1c, ln2c;
        typename SelfAttention<T>::Cache attnc;
        typename Mlp<T>::Cache mlpc;
        Tensor<T> norm1, norm2;
    };

    void forward(const Tensor<T>& x, Tensor<T>& y, Cache& c) const {
        Tensor<T> a;
        ln1.forward(x, c.norm1, c.ln1c);
        attn.forward(c.norm1, a, c.attnc);
        Tensor<T> mid = x;
        mid.add(a);
        Tensor<T> m;
        ln2.forward(mid, c.norm2, c.ln2c);
        mlp.forward(c.norm2, m, c.mlpc);
        y = mid;
        y.add(m);
    }

    void backward(const Tensor<T>& dy, const Cache& c, Tensor<T>& dx, GradBuffer<T>& gb, const ParamList<T>& ps) const {
        Tensor<T> dnorm2, dmid;
        mlp.backward(dy, c.mlpc, dnorm2, gb, ps);
        ln2.backward(dnorm2, c.ln2c, dmid, gb.of(ps, &ln2.gamma), gb.of(ps, &ln2.beta));
        dmid.add(dy);
        Tensor<T> dnorm1, dx_attn;
        attn.backward(dmid, c.attnc, dnorm1, gb, ps);
        ln1.backward(dnorm1, c.ln1c, dx_attn, gb.of(ps, &ln1.gamma), gb.of(ps, &ln1.beta));
        dx = dmid;
        dx.add(dx_attn);
    }
};

// ---------------------------------------------------------------------------
// Conv2d (NCHW, single sample CHW) via im2col + GEMM
// ---------------------------------------------------------------------------

template <class T>
struct Conv2d {
    Param<T> W; // (out, in*kh*kw)
    Param<T> b; // (out)
    int64_t cin = 0, cout = 0, k = 0, stride = 1, pad = 0;

    void init(const std::string& name, int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t s, int64_t p, Rng& rng) {
        cin = in_ch;
        cout = out_ch;
        k = kernel;
        stride = s;
        pad = p;
        W.name = name + ".weight";
        b.name = name + ".bias";
        W.value = Tensor<T>({cout, cin * k * k});
        b.value = Tensor<T>({cout});
        W.value.fill_normal(rng, (T)(1.0 / std::sqrt((double)(cin * k * k))));
    }

    void params(ParamList<T>& ps) {
        ps.push_back(&W);
        ps.push_back(&b);
    }

    int64_t out_hw(int64_t hw) const { return (hw + 2 * pad - k) / stride + 1; }

    void im2col(const Tensor<T>& x, int64_t h, int64_t w, Tensor<T>& cols) const {
        int64_t oh = out_hw(h), ow = out_hw(w);
        cols = Tensor<T>({cin * k * k, oh * ow});
        for (int64_t c = 0; c < cin; ++c) {
            for (int64_t ky = 0; ky < k; ++ky) {
                for (int64_t kx = 0; kx < k; ++kx) {
                    int64_t row = (c * k + ky) * k + kx;
                    for (int64_t oy = 0; oy < oh; ++oy) {
                        int64_t iy = oy * stride + ky - pad;
                        for (int64_t ox = 0; ox < ow; ++ox) {
                            int64_t ix = ox * stride + kx - pad;
                            T val = 0;
                            if (iy >= 0 && iy < h && ix >= 0 && ix < w) val = x[(c * h + iy) * w + ix];
                            cols[row * (oh * ow) + oy * ow + ox] = val;
                        }
                    }
                }
            }
        }
    }

    // x: (cin, h, w) -> y: (cout, oh, ow); cache holds cols
    void forward(const Tensor<T>& x, int64_t h, int64_t w, Tensor<T>& y, Tensor<T>& cols) const {
        int64_t oh = out_hw(h), ow = out_hw(w);
        im2col(x, h, w, cols);
        y = Tensor<T>({cout, oh, ow});
        as_mat(y, cout, oh * ow).noalias() = as_mat(W.value, cout, cin * k * k) * as_mat(cols, cin * k * k, oh * ow);
        for (int64_t c = 0; c < cout; ++c) {
            T bc = b.value[c];
            T* yp = y.data() + c * oh * ow;
            for (int64_t i = 0; i < oh * ow; ++i) yp[i] += bc;
        }
    }

    void backward(const Tensor<T>& dy, const Tensor<T>& cols, int64_t h, int64_t w, Tensor<T>& dx, Tensor<T>& gW, Tensor<T>& gb) const {
        int64_t oh = out_hw(h), ow = out_hw(w);
        as_mat(gW, cout, cin * k * k).noalias() += as_mat(dy, cout, oh * ow) * as_mat(cols, cin * k * k, oh * ow).transpose();
        for (int64_t c = 0; c < cout; ++c) {
            const T* dyp = dy.data() + c * oh * ow;
            T s = 0;
            for (int64_t i = 0; i < oh * ow; ++i) s += dyp[i];
            gb[c] += s;
        }
        Tensor<T> dcols({cin * k * k, oh * ow});
        as_mat(dcols, cin * k * k, oh * ow).noalias() = as_mat(W.value, cout, cin * k * k).transpose() * as_mat(dy, cout, oh * ow);
        dx = Tensor<T>({cin, h, w});
        for (int64_t c = 0; c < cin; ++c) {
            for (int64_t ky = 0; ky < k; ++ky) {
                for (int64_t kx = 0; kx < k; ++kx) {
                    int64_t row = (c * k + ky) * k + kx;
                    for (int64_t oy = 0; oy < oh; ++oy) {
                        int64_t iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        for (int64_t ox = 0; ox < ow; ++ox) {
                            int64_t ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= w) continue;
                            dx[(c * h + iy) * w + ix] += dcols[row * (oh * ow) + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Embedding table
// ---------------------------------------------------------------------------

template <class T>
struct Embedding {
    Param<T> table; // (vocab, dim)
    int64_t vocab = 0, dim = 0;

    void init(const std::string& name, int64_t v, int64_t d, Rng& rng) {
        vocab = v;
        dim = d;
        table.name = name + ".table";
        table.value = Tensor<T>({v, d});
        table.value.fill_normal(rng, T(0.02));
    }

    void params(ParamList<T>& ps) { ps.push_back(&table); }

    void lookup(int64_t id, T* out) const {
        validate(id >= 0 && id < vocab, "embedding id out of range");
        const T* row = table.value.data() + id * dim;
        for (int64_t i = 0; i < dim; ++i) out[i] = row[i];
    }

    void accumulate_grad(int64_t id, const T* dout, Tensor<T>& gtable) const {
        T* row = gtable.data() + id * dim;
        for (int64_t i = 0; i < dim; ++i) row[i] += dout[i];
    }
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <class T>
struct Adam {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t t = 0;
    std::vector<Tensor<T>> m, v;

    void init(const ParamList<T>& ps) {
        m.clear();
        v.clear();
        for (auto* p : ps) {
            m.emplace_back(p->value.shape);
            v.emplace_back(p->value.shape);
        }
        t = 0;
    }

    void step(const ParamList<T>& ps, const GradBuffer<T>& gb) {
        ++t;
        double bc1 = 1.0 - std::pow(beta1, (double)t);
        double bc2 = 1.0 - std::pow(beta2, (double)t);
        for (size_t i = 0; i < ps.size(); ++i) {
            Tensor<T>& p = ps[i]->value;
            const Tensor<T>& g = gb.g[i];
            Tensor<T>& mi = m[i];
            Tensor<T>& vi = v[i];
            for (int64_t j = 0; j < p.numel(); ++j) {
                double gj = (double)g[j];
                double mj = beta1 * (double)mi[j] + (1 - beta1) * gj;
                double vj = beta2 * (double)vi[j] + (1 - beta2) * gj * gj;
                mi[j] = (T)mj;
                vi[j] = (T)vj;
                p[j] -= (T)(lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps));
            }
        }
    }
};

// softmax cross-entropy over one row of logits; returns loss, writes dlogits
template <class T>
inline T cross_entropy(const T* logits, int64_t n, int64_t target, T* dlogits) {
    std::vector<T> p(logits, logits + n);
    softmax_row(p.data(), n);
    for (int64_t i = 0; i < n; ++i) dlogits[i] = p[i];
    dlogits[target] -= T(1);
    return -std::log(std::max(p[(size_t)target], T(1e-12)));
}

template <class T>
inline bool all_finite(const Tensor<T>& t) {
    for (int64_t i = 0; i < t.numel(); ++i)
        if (!std::isfinite((double)t[i])) return false;
    return true;
}

} // namespace sdg::nn
