#include "ctrlora/core/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace ctrlora {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColMat = Eigen::MatrixXd;
using RowMap = Eigen::Map<RowMat>;
using CRowMap = Eigen::Map<const RowMat>;

namespace {

thread_local bool g_grad_enabled = true;

// Constructs an op node. If grads are disabled or no parent needs them, the
// node is a detached constant and the tape stays empty behind it.
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(AgNode&)> bp) {
    auto node = std::make_shared<AgNode>();
    node->value = std::move(value);
    bool need = false;
    if (g_grad_enabled)
        for (const auto& p : parents)
            if (p && p->requires_grad) need = true;
    if (need) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backprop = std::move(bp);
    }
    return node;
}

void accum(const Var& p, const Tensor& delta) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    double* g = p->grad.ptr();
    const double* d = delta.ptr();
    const int64_t n = delta.numel();
    for (int64_t i = 0; i < n; ++i) g[i] += d[i];
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Var make_leaf(Tensor value, bool requires_grad, std::string name) {
    auto node = std::make_shared<AgNode>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    node->name = std::move(name);
    return node;
}

Var make_constant(Tensor value) { return make_leaf(std::move(value), false); }

void backward(const Var& root) {
    if (!root) throw Error("backward: null root");
    if (root->value.numel() != 1) throw ShapeError("backward: root must be scalar, got " + root->value.shape_str());
    if (!root->requires_grad) return;

    // Iterative post-order DFS for topological ordering.
    std::vector<AgNode*> order;
    std::unordered_set<AgNode*> visited;
    std::vector<std::pair<AgNode*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            AgNode* p = node->parents[idx].get();
            ++idx;
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad.data[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        AgNode* n = *it;
        if (n->backprop && n->grad_alloc) n->backprop(*n);
    }
}

namespace ag {

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "add");
    Tensor out = a->value;
    const double* pb = b->value.ptr();
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += pb[i];
    return make_op(std::move(out), {a, b}, [a, b](AgNode& n) {
        accum(a, n.grad);
        accum(b, n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "sub");
    Tensor out = a->value;
    const double* pb = b->value.ptr();
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] -= pb[i];
    return make_op(std::move(out), {a, b}, [a, b](AgNode& n) {
        accum(a, n.grad);
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad.data[i] -= n.grad.data[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "mul");
    Tensor out = a->value;
    const double* pb = b->value.ptr();
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= pb[i];
    return make_op(std::move(out), {a, b}, [a, b](AgNode& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad.data[i] += n.grad.data[i] * b->value.data[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad.data[i] += n.grad.data[i] * a->value.data[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a->value;
    for (auto& v : out.data) v *= s;
    return make_op(std::move(out), {a}, [a, s](AgNode& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad.data[i] += s * n.grad.data[i];
        }
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a->value;
    for (auto& v : out.data) v += s;
    return make_op(std::move(out), {a}, [a](AgNode& n) { accum(a, n.grad); });
}

Var exp(const Var& a) {
    Tensor out = a->value;
    for (auto& v : out.data) v = std::exp(v);
    auto saved = std::make_shared<Tensor>(out);
    return make_op(std::move(out), {a}, [a, saved](AgNode& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad.data[i] += n.grad.data[i] * saved->data[i];
        }
    });
}

Var silu(const Var& a) {
    Tensor out = a->value;
    for (auto& v : out.data) v = v / (1.0 + std::exp(-v));
    return make_op(std::move(out), {a}, [a](AgNode& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) {
            const double x = a->value.data[i];
            const double sig = 1.0 / (1.0 + std::exp(-x));
            a->grad.data[i] += n.grad.data[i] * sig * (1.0 + x * (1.0 - sig));
        }
    });
}

// ---------------------------------------------------------------- reductions

Var sum_all(const Var& a) {
    double s = 0.0;
    for (double v : a->value.data) s += v;
    return make_op(Tensor::scalar(s), {a}, [a](AgNode& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        const double g = n.grad.data[0];
        for (auto& v : a->grad.data) v += g;
    });
}

Var mean_all(const Var& a) {
    const double inv = 1.0 / static_cast<double>(a->value.numel());
    double s = 0.0;
    for (double v : a->value.data) s += v;
    return make_op(Tensor::scalar(s * inv), {a}, [a, inv](AgNode& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        const double g = n.grad.data[0] * inv;
        for (auto& v : a->grad.data) v += g;
    });
}

Var mse(const Var& a, const Tensor& target) {
    require_same_shape(a->value, target, "mse");
    const int64_t m = a->value.numel();
    double s = 0.0;
    for (int64_t i = 0; i < m; ++i) {
        const double d = a->value.data[i] - target.data[i];
        s += d * d;
    }
    auto tgt = std::make_shared<Tensor>(target);
    return make_op(Tensor::scalar(s / static_cast<double>(m)), {a}, [a, tgt, m](AgNode& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        const double c = 2.0 * n.grad.data[0] / static_cast<double>(m);
        for (int64_t i = 0; i < m; ++i) a->grad.data[i] += c * (a->value.data[i] - tgt->data[i]);
    });
}

// ------------------------------------------------------------- linear algebra

Var linear(const Var& x, const Var& w, const Var* b) {
    if (x->value.ndim() != 2 || w->value.ndim() != 2 || x->value.dim(1) != w->value.dim(1))
        throw ShapeError("linear: incompatible " + x->value.shape_str() + " x " + w->value.shape_str());
    const int64_t m = x->value.dim(0), din = x->value.dim(1), dout = w->value.dim(0);
    if (b && (*b)->value.numel() != dout) throw ShapeError("linear: bias size mismatch");

    Tensor out({m, dout});
    {
        CRowMap X(x->value.ptr(), m, din), W(w->value.ptr(), dout, din);
        RowMap Y(out.ptr(), m, dout);
        Y.noalias() = X * W.transpose();
        if (b) {
            const double* pb = (*b)->value.ptr();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < dout; ++j) out.data[i * dout + j] += pb[j];
        }
    }
    Var bias = b ? *b : nullptr;
    std::vector<Var> parents = {x, w};
    if (bias) parents.push_back(bias);
    return make_op(std::move(out), std::move(parents), [x, w, bias, m, din, dout](AgNode& n) {
        CRowMap G(n.grad.ptr(), m, dout);
        if (x->requires_grad) {
            x->ensure_grad();
            RowMap GX(x->grad.ptr(), m, din);
            CRowMap W(w->value.ptr(), dout, din);
            GX.noalias() += G * W;
        }
        if (w->requires_grad) {
            w->ensure_grad();
            RowMap GW(w->grad.ptr(), dout, din);
            CRowMap X(x->value.ptr(), m, din);
            GW.noalias() += G.transpose() * X;
        }
        if (bias && bias->requires_grad) {
            bias->ensure_grad();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < dout; ++j) bias->grad.data[j] += n.grad.data[i * dout + j];
        }
    });
}

Var bmm(const Var& a, const Var& b) {
    if (a->value.ndim() != 3 || b->value.ndim() != 3 || a->value.dim(0) != b->value.dim(0) ||
        a->value.dim(2) != b->value.dim(1))
        throw ShapeError("bmm: incompatible " + a->value.shape_str() + " x " + b->value.shape_str());
    const int64_t bs = a->value.dim(0), m = a->value.dim(1), k = a->value.dim(2), nn = b->value.dim(2);
    Tensor out({bs, m, nn});
    for (int64_t i = 0; i < bs; ++i) {
        CRowMap A(a->value.ptr() + i * m * k, m, k), B(b->value.ptr() + i * k * nn, k, nn);
        RowMap O(out.ptr() + i * m * nn, m, nn);
        O.noalias() = A * B;
    }
    return make_op(std::move(out), {a, b}, [a, b, bs, m, k, nn](AgNode& n) {
        for (int64_t i = 0; i < bs; ++i) {
            CRowMap G(n.grad.ptr() + i * m * nn, m, nn);
            if (a->requires_grad) {
                a->ensure_grad();
                RowMap GA(a->grad.ptr() + i * m * k, m, k);
                CRowMap B(b->value.ptr() + i * k * nn, k, nn);
                GA.noalias() += G * B.transpose();
            }
            if (b->requires_grad) {
                b->ensure_grad();
                RowMap GB(b->grad.ptr() + i * k * nn, k, nn);
                CRowMap A(a->value.ptr() + i * m * k, m, k);
                GB.noalias() += A.transpose() * G;
            }
        }
    });
}

Var bmm_nt(const Var& a, const Var& b) {
    if (a->value.ndim() != 3 || b->value.ndim() != 3 || a->value.dim(0) != b->value.dim(0) ||
        a->value.dim(2) != b->value.dim(2))
        throw ShapeError("bmm_nt: incompatible " + a->value.shape_str() + " x " + b->value.shape_str());
    const int64_t bs = a->value.dim(0), m = a->value.dim(1), k = a->value.dim(2), nn = b->value.dim(1);
    Tensor out({bs, m, nn});
    for (int64_t i = 0; i < bs; ++i) {
        CRowMap A(a->value.ptr() + i * m * k, m, k), B(b->value.ptr() + i * nn * k, nn, k);
        RowMap O(out.ptr() + i * m * nn, m, nn);
        O.noalias() = A * B.transpose();
    }
    return make_op(std::move(out), {a, b}, [a, b, bs, m, k, nn](AgNode& n) {
        for (int64_t i = 0; i < bs; ++i) {
            CRowMap G(n.grad.ptr() + i * m * nn, m, nn);
            if (a->requires_grad) {
                a->ensure_grad();
                RowMap GA(a->grad.ptr() + i * m * k, m, k);
                CRowMap B(b->value.ptr() + i * nn * k, nn, k);
                GA.noalias() += G * B;
            }
            if (b->requires_grad) {
                b->ensure_grad();
                RowMap GB(b->grad.ptr() + i * nn * k, nn, k);
                CRowMap A(a->value.ptr() + i * m * k, m, k);
                GB.noalias() += G.transpose() * A;
            }
        }
    });
}

Var softmax_last(const Var& a) {
    const int64_t d = a->value.dim(a->value.ndim() - 1);
    const int64_t rows = a->value.numel() / d;
    Tensor out = a->value;
    for (int64_t r = 0; r < rows; ++r) {
        double* p = out.ptr() + r * d;
        double mx = p[0];
        for (int64_t i = 1; i < d; ++i) mx = std::max(mx, p[i]);
        double s = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            p[i] = std::exp(p[i] - mx);
            s += p[i];
        }
        const double inv = 1.0 / s;
        for (int64_t i = 0; i < d; ++i) p[i] *= inv;
    }
    auto y = std::make_shared<Tensor>(out);
    return make_op(std::move(out), {a}, [a, y, rows, d](AgNode& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const double* py = y->ptr() + r * d;
            const double* pg = n.grad.ptr() + r * d;
            double dot = 0.0;
            for (int64_t i = 0; i < d; ++i) dot += py[i] * pg[i];
            double* pa = a->grad.ptr() + r * d;
            for (int64_t i = 0; i < d; ++i) pa[i] += py[i] * (pg[i] - dot);
        }
    });
}

// ----------------------------------------------------------------- conv/norm

namespace {

struct ConvDims {
    int64_t n, cin, h, w, cout, k, ho, wo;
    int stride, pad;
};

void im2col(const Tensor& x, const ConvDims& d, ColMat& cols) {
    cols.resize(d.cin * d.k * d.k, d.n * d.ho * d.wo);
    int64_t j = 0;
    for (int64_t n = 0; n < d.n; ++n) {
        const double* xn = x.ptr() + n * d.cin * d.h * d.w;
        for (int64_t oy = 0; oy < d.ho; ++oy) {
            for (int64_t ox = 0; ox < d.wo; ++ox, ++j) {
                double* col = cols.data() + j * cols.rows();
                int64_t r = 0;
                for (int64_t ci = 0; ci < d.cin; ++ci) {
                    const double* xc = xn + ci * d.h * d.w;
                    for (int64_t ky = 0; ky < d.k; ++ky) {
                        const int64_t iy = oy * d.stride - d.pad + ky;
                        for (int64_t kx = 0; kx < d.k; ++kx, ++r) {
                            const int64_t ix = ox * d.stride - d.pad + kx;
                            col[r] = (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) ? xc[iy * d.w + ix] : 0.0;
                        }
                    }
                }
            }
        }
    }
}

void col2im_accum(const ColMat& dcols, const ConvDims& d, Tensor& dx) {
    int64_t j = 0;
    for (int64_t n = 0; n < d.n; ++n) {
        double* xn = dx.ptr() + n * d.cin * d.h * d.w;
        for (int64_t oy = 0; oy < d.ho; ++oy) {
            for (int64_t ox = 0; ox < d.wo; ++ox, ++j) {
                const double* col = dcols.data() + j * dcols.rows();
                int64_t r = 0;
                for (int64_t ci = 0; ci < d.cin; ++ci) {
                    double* xc = xn + ci * d.h * d.w;
                    for (int64_t ky = 0; ky < d.k; ++ky) {
                        const int64_t iy = oy * d.stride - d.pad + ky;
                        for (int64_t kx = 0; kx < d.k; ++kx, ++r) {
                            const int64_t ix = ox * d.stride - d.pad + kx;
                            if (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) xc[iy * d.w + ix] += col[r];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var* b, int stride, int pad) {
    if (x->value.ndim() != 4 || w->value.ndim() != 4 || x->value.dim(1) != w->value.dim(1) ||
        w->value.dim(2) != w->value.dim(3))
        throw ShapeError("conv2d: incompatible " + x->value.shape_str() + " * " + w->value.shape_str());
    ConvDims d;
    d.n = x->value.dim(0);
    d.cin = x->value.dim(1);
    d.h = x->value.dim(2);
    d.w = x->value.dim(3);
    d.cout = w->value.dim(0);
    d.k = w->value.dim(2);
    d.stride = stride;
    d.pad = pad;
    d.ho = (d.h + 2 * pad - d.k) / stride + 1;
    d.wo = (d.w + 2 * pad - d.k) / stride + 1;
    if (d.ho < 1 || d.wo < 1) throw ShapeError("conv2d: output would be empty");
    if (b && (*b)->value.numel() != d.cout) throw ShapeError("conv2d: bias size mismatch");

    auto cols = std::make_shared<ColMat>();
    im2col(x->value, d, *cols);

    Tensor out({d.n, d.cout, d.ho, d.wo});
    {
        CRowMap W(w->value.ptr(), d.cout, d.cin * d.k * d.k);
        ColMat om = W * (*cols);  // (cout, n*ho*wo)
        const int64_t spatial = d.ho * d.wo;
        const double* pb = b ? (*b)->value.ptr() : nullptr;
        for (int64_t n = 0; n < d.n; ++n)
            for (int64_t co = 0; co < d.cout; ++co) {
                double* po = out.ptr() + (n * d.cout + co) * spatial;
                const double bias = pb ? pb[co] : 0.0;
                for (int64_t s = 0; s < spatial; ++s) po[s] = om(co, n * spatial + s) + bias;
            }
    }

    Var bias = b ? *b : nullptr;
    std::vector<Var> parents = {x, w};
    if (bias) parents.push_back(bias);
    return make_op(std::move(out), std::move(parents), [x, w, bias, d, cols](AgNode& n) {
        const int64_t spatial = d.ho * d.wo;
        // gather grad into (cout, n*ho*wo)
        ColMat gm(d.cout, d.n * spatial);
        for (int64_t nn = 0; nn < d.n; ++nn)
            for (int64_t co = 0; co < d.cout; ++co) {
                const double* pg = n.grad.ptr() + (nn * d.cout + co) * spatial;
                for (int64_t s = 0; s < spatial; ++s) gm(co, nn * spatial + s) = pg[s];
            }
        if (w->requires_grad) {
            w->ensure_grad();
            RowMap GW(w->grad.ptr(), d.cout, d.cin * d.k * d.k);
            GW.noalias() += gm * cols->transpose();
        }
        if (bias && bias->requires_grad) {
            bias->ensure_grad();
            for (int64_t co = 0; co < d.cout; ++co) bias->grad.data[co] += gm.row(co).sum();
        }
        if (x->requires_grad) {
            x->ensure_grad();
            CRowMap W(w->value.ptr(), d.cout, d.cin * d.k * d.k);
            ColMat dcols = W.transpose() * gm;
            col2im_accum(dcols, d, x->grad);
        }
    });
}

namespace {

struct NormStats {
    Tensor xhat;
    std::vector<double> inv;  // one per (row-group)
};

}  // namespace

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    if (x->value.ndim() != 4) throw ShapeError("group_norm: expected NCHW, got " + x->value.shape_str());
    const int64_t n = x->value.dim(0), c = x->value.dim(1), hw = x->value.dim(2) * x->value.dim(3);
    if (c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
    if (gamma->value.numel() != c || beta->value.numel() != c) throw ShapeError("group_norm: affine size mismatch");
    const int64_t cg = c / groups;
    const int64_t m = cg * hw;

    auto st = std::make_shared<NormStats>();
    st->xhat = Tensor({n, c, x->value.dim(2), x->value.dim(3)});
    st->inv.resize(static_cast<size_t>(n * groups));

    Tensor out(st->xhat.shape);
    const double* px = x->value.ptr();
    const double* pgm = gamma->value.ptr();
    const double* pbt = beta->value.ptr();
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t g = 0; g < groups; ++g) {
            const double* base = px + (i * c + g * cg) * hw;
            double mean = 0.0;
            for (int64_t e = 0; e < m; ++e) mean += base[e];
            mean /= static_cast<double>(m);
            double var = 0.0;
            for (int64_t e = 0; e < m; ++e) {
                const double dlt = base[e] - mean;
                var += dlt * dlt;
            }
            var /= static_cast<double>(m);
            const double inv = 1.0 / std::sqrt(var + eps);
            st->inv[static_cast<size_t>(i * groups + g)] = inv;
            for (int64_t cc = 0; cc < cg; ++cc) {
                const int64_t ch = g * cg + cc;
                const double* pin = px + (i * c + ch) * hw;
                double* pxh = st->xhat.ptr() + (i * c + ch) * hw;
                double* po = out.ptr() + (i * c + ch) * hw;
                for (int64_t e = 0; e < hw; ++e) {
                    pxh[e] = (pin[e] - mean) * inv;
                    po[e] = pgm[ch] * pxh[e] + pbt[ch];
                }
            }
        }
    }

    return make_op(std::move(out), {x, gamma, beta}, [x, gamma, beta, st, n, c, hw, cg, groups, m](AgNode& nd) {
        const double* pgm = gamma->value.ptr();
        if (gamma->requires_grad) gamma->ensure_grad();
        if (beta->requires_grad) beta->ensure_grad();
        if (x->requires_grad) x->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t g = 0; g < groups; ++g) {
                const double inv = st->inv[static_cast<size_t>(i * groups + g)];
                double s1 = 0.0, s2 = 0.0;
                for (int64_t cc = 0; cc < cg; ++cc) {
                    const int64_t ch = g * cg + cc;
                    const double* pg = nd.grad.ptr() + (i * c + ch) * hw;
                    const double* pxh = st->xhat.ptr() + (i * c + ch) * hw;
                    for (int64_t e = 0; e < hw; ++e) {
                        const double dxh = pg[e] * pgm[ch];
                        s1 += dxh;
                        s2 += dxh * pxh[e];
                    }
                }
                const double c1 = s1 / static_cast<double>(m), c2 = s2 / static_cast<double>(m);
                for (int64_t cc = 0; cc < cg; ++cc) {
                    const int64_t ch = g * cg + cc;
                    const double* pg = nd.grad.ptr() + (i * c + ch) * hw;
                    const double* pxh = st->xhat.ptr() + (i * c + ch) * hw;
                    if (x->requires_grad) {
                        double* pdx = x->grad.ptr() + (i * c + ch) * hw;
                        for (int64_t e = 0; e < hw; ++e)
                            pdx[e] += inv * (pg[e] * pgm[ch] - c1 - pxh[e] * c2);
                    }
                    if (gamma->requires_grad || beta->requires_grad) {
                        double dg = 0.0, db = 0.0;
                        for (int64_t e = 0; e < hw; ++e) {
                            dg += pg[e] * pxh[e];
                            db += pg[e];
                        }
                        if (gamma->requires_grad) gamma->grad.data[ch] += dg;
                        if (beta->requires_grad) beta->grad.data[ch] += db;
                    }
                }
            }
        }
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    if (x->value.ndim() != 2) throw ShapeError("layer_norm: expected (M, D), got " + x->value.shape_str());
    const int64_t rows = x->value.dim(0), d = x->value.dim(1);
    if (gamma->value.numel() != d || beta->value.numel() != d) throw ShapeError("layer_norm: affine size mismatch");

    auto st = std::make_shared<NormStats>();
    st->xhat = Tensor({rows, d});
    st->inv.resize(static_cast<size_t>(rows));

    Tensor out({rows, d});
    const double* pgm = gamma->value.ptr();
    const double* pbt = beta->value.ptr();
    for (int64_t r = 0; r < rows; ++r) {
        const double* px = x->value.ptr() + r * d;
        double mean = 0.0;
        for (int64_t i = 0; i < d; ++i) mean += px[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            const double dd = px[i] - mean;
            var += dd * dd;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        st->inv[static_cast<size_t>(r)] = inv;
        double* pxh = st->xhat.ptr() + r * d;
        double* po = out.ptr() + r * d;
        for (int64_t i = 0; i < d; ++i) {
            pxh[i] = (px[i] - mean) * inv;
            po[i] = pgm[i] * pxh[i] + pbt[i];
        }
    }

    return make_op(std::move(out), {x, gamma, beta}, [x, gamma, beta, st, rows, d](AgNode& nd) {
        const double* pgm = gamma->value.ptr();
        if (gamma->requires_grad) gamma->ensure_grad();
        if (beta->requires_grad) beta->ensure_grad();
        if (x->requires_grad) x->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const double* pg = nd.grad.ptr() + r * d;
            const double* pxh = st->xhat.ptr() + r * d;
            const double inv = st->inv[static_cast<size_t>(r)];
            double s1 = 0.0, s2 = 0.0;
            for (int64_t i = 0; i < d; ++i) {
                const double dxh = pg[i] * pgm[i];
                s1 += dxh;
                s2 += dxh * pxh[i];
            }
            const double c1 = s1 / static_cast<double>(d), c2 = s2 / static_cast<double>(d);
            if (x->requires_grad) {
                double* pdx = x->grad.ptr() + r * d;
                for (int64_t i = 0; i < d; ++i) pdx[i] += inv * (pg[i] * pgm[i] - c1 - pxh[i] * c2);
            }
            if (gamma->requires_grad)
                for (int64_t i = 0; i < d; ++i) gamma->grad.data[i] += pg[i] * pxh[i];
            if (beta->requires_grad)
                for (int64_t i = 0; i < d; ++i) beta->grad.data[i] += pg[i];
        }
    });
}

// -------------------------------------------------------------- shape/layout

Var reshape(const Var& a, std::vector<int64_t> shp) {
    if (Tensor::count(shp) != a->value.numel())
        throw ShapeError("reshape: element count mismatch " + a->value.shape_str());
    Tensor out = a->value;
    out.shape = std::move(shp);
    return make_op(std::move(out), {a}, [a](AgNode& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad.data[i] += n.grad.data[i];
    });
}

Var nchw_to_tokens(const Var& a) {
    if (a->value.ndim() != 4) throw ShapeError("nchw_to_tokens: expected NCHW");
    const int64_t n = a->value.dim(0), c = a->value.dim(1), hw = a->value.dim(2) * a->value.dim(3);
    Tensor out({n * hw, c});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            const double* p = a->value.ptr() + (i * c + ch) * hw;
            for (int64_t s = 0; s < hw; ++s) out.data[(i * hw + s) * c + ch] = p[s];
        }
    return make_op(std::move(out), {a}, [a, n, c, hw](AgNode& nd) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t ch = 0; ch < c; ++ch) {
                double* p = a->grad.ptr() + (i * c + ch) * hw;
                for (int64_t s = 0; s < hw; ++s) p[s] += nd.grad.data[(i * hw + s) * c + ch];
            }
    });
}

Var tokens_to_nchw(const Var& a, int64_t n, int64_t c, int64_t h, int64_t w) {
    if (a->value.ndim() != 2 || a->value.dim(0) != n * h * w || a->value.dim(1) != c)
        throw ShapeError("tokens_to_nchw: bad input " + a->value.shape_str());
    const int64_t hw = h * w;
    Tensor out({n, c, h, w});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            double* p = out.ptr() + (i * c + ch) * hw;
            for (int64_t s = 0; s < hw; ++s) p[s] = a->value.data[(i * hw + s) * c + ch];
        }
    return make_op(std::move(out), {a}, [a, n, c, hw](AgNode& nd) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t ch = 0; ch < c; ++ch) {
                const double* p = nd.grad.ptr() + (i * c + ch) * hw;
                for (int64_t s = 0; s < hw; ++s) a->grad.data[(i * hw + s) * c + ch] += p[s];
            }
    });
}

Var split_heads(const Var& a, int64_t n_batch, int64_t tokens, int64_t heads) {
    const int64_t c = a->value.dim(1);
    if (a->value.ndim() != 2 || a->value.dim(0) != n_batch * tokens || c % heads != 0)
        throw ShapeError("split_heads: bad input " + a->value.shape_str());
    const int64_t dh = c / heads;
    Tensor out({n_batch * heads, tokens, dh});
    for (int64_t b = 0; b < n_batch; ++b)
        for (int64_t t = 0; t < tokens; ++t)
            for (int64_t hd = 0; hd < heads; ++hd) {
                const double* src = a->value.ptr() + (b * tokens + t) * c + hd * dh;
                double* dst = out.ptr() + ((b * heads + hd) * tokens + t) * dh;
                std::copy(src, src + dh, dst);
            }
    return make_op(std::move(out), {a}, [a, n_batch, tokens, heads, dh, c](AgNode& nd) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int64_t b = 0; b < n_batch; ++b)
            for (int64_t t = 0; t < tokens; ++t)
                for (int64_t hd = 0; hd < heads; ++hd) {
                    double* dst = a->grad.ptr() + (b * tokens + t) * c + hd * dh;
                    const double* src = nd.grad.ptr() + ((b * heads + hd) * tokens + t) * dh;
                    for (int64_t i = 0; i < dh; ++i) dst[i] += src[i];
                }
    });
}

Var merge_heads(const Var& a, int64_t n_batch, int64_t tokens, int64_t heads) {
    if (a->value.ndim() != 3 || a->value.dim(0) != n_batch * heads || a->value.dim(1) != tokens)
        throw ShapeError("merge_heads: bad input " + a->value.shape_str());
    const int64_t dh = a->value.dim(2);
    const int64_t c = heads * dh;
    Tensor out({n_batch * tokens, c});
    for (int64_t b = 0; b < n_batch; ++b)
        for (int64_t t = 0; t < tokens; ++t)
            for (int64_t hd = 0; hd < heads; ++hd) {
                const double* src = a->value.ptr() + ((b * heads + hd) * tokens + t) * dh;
                double* dst = out.ptr() + (b * tokens + t) * c + hd * dh;
                std::copy(src, src + dh, dst);
            }
    return make_op(std::move(out), {a}, [a, n_batch, tokens, heads, dh, c](AgNode& nd) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int64_t b = 0; b < n_batch; ++b)
            for (int64_t t = 0; t < tokens; ++t)
                for (int64_t hd = 0; hd < heads; ++hd) {
                    double* dst = a->grad.ptr() + ((b * heads + hd) * tokens + t) * dh;
                    const double* src = nd.grad.ptr() + (b * tokens + t) * c + hd * dh;
                    for (int64_t i = 0; i < dh; ++i) dst[i] += src[i];
                }
    });
}

Var upsample_nearest2x(const Var& a) {
    if (a->value.ndim() != 4) throw ShapeError("upsample_nearest2x: expected NCHW");
    const int64_t n = a->value.dim(0), c = a->value.dim(1), h = a->value.dim(2), w = a->value.dim(3);
    Tensor out({n, c, 2 * h, 2 * w});
    for (int64_t nc = 0; nc < n * c; ++nc) {
        const double* src = a->value.ptr() + nc * h * w;
        double* dst = out.ptr() + nc * 4 * h * w;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                const double v = src[y * w + x];
                dst[(2 * y) * 2 * w + 2 * x] = v;
                dst[(2 * y) * 2 * w + 2 * x + 1] = v;
                dst[(2 * y + 1) * 2 * w + 2 * x] = v;
                dst[(2 * y + 1) * 2 * w + 2 * x + 1] = v;
            }
    }
    return make_op(std::move(out), {a}, [a, n, c, h, w](AgNode& nd) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int64_t nc = 0; nc < n * c; ++nc) {
            double* dst = a->grad.ptr() + nc * h * w;
            const double* src = nd.grad.ptr() + nc * 4 * h * w;
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x)
                    dst[y * w + x] += src[(2 * y) * 2 * w + 2 * x] + src[(2 * y) * 2 * w + 2 * x + 1] +
                                      src[(2 * y + 1) * 2 * w + 2 * x] + src[(2 * y + 1) * 2 * w + 2 * x + 1];
        }
    });
}

Var concat_channels(const Var& a, const Var& b) {
    if (a->value.ndim() != 4 || b->value.ndim() != 4 || a->value.dim(0) != b->value.dim(0) ||
        a->value.dim(2) != b->value.dim(2) || a->value.dim(3) != b->value.dim(3))
        throw ShapeError("concat_channels: incompatible " + a->value.shape_str() + " | " + b->value.shape_str());
    const int64_t n = a->value.dim(0), ca = a->value.dim(1), cb = b->value.dim(1),
                  hw = a->value.dim(2) * a->value.dim(3);
    Tensor out({n, ca + cb, a->value.dim(2), a->value.dim(3)});
    for (int64_t i = 0; i < n; ++i) {
        std::copy(a->value.ptr() + i * ca * hw, a->value.ptr() + (i + 1) * ca * hw,
                  out.ptr() + i * (ca + cb) * hw);
        std::copy(b->value.ptr() + i * cb * hw, b->value.ptr() + (i + 1) * cb * hw,
                  out.ptr() + i * (ca + cb) * hw + ca * hw);
    }
    return make_op(std::move(out), {a, b}, [a, b, n, ca, cb, hw](AgNode& nd) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                const double* src = nd.grad.ptr() + i * (ca + cb) * hw;
                double* dst = a->grad.ptr() + i * ca * hw;
                for (int64_t e = 0; e < ca * hw; ++e) dst[e] += src[e];
            }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                const double* src = nd.grad.ptr() + i * (ca + cb) * hw + ca * hw;
                double* dst = b->grad.ptr() + i * cb * hw;
                for (int64_t e = 0; e < cb * hw; ++e) dst[e] += src[e];
            }
        }
    });
}

Var slice_channels(const Var& a, int64_t c0, int64_t c1) {
    if (a->value.ndim() != 4 || c0 < 0 || c1 > a->value.dim(1) || c0 >= c1)
        throw ShapeError("slice_channels: bad range");
    const int64_t n = a->value.dim(0), c = a->value.dim(1), hw = a->value.dim(2) * a->value.dim(3);
    const int64_t cs = c1 - c0;
    Tensor out({n, cs, a->value.dim(2), a->value.dim(3)});
    for (int64_t i = 0; i < n; ++i)
        std::copy(a->value.ptr() + (i * c + c0) * hw, a->value.ptr() + (i * c + c1) * hw, out.ptr() + i * cs * hw);
    return make_op(std::move(out), {a}, [a, n, c, c0, cs, hw](AgNode& nd) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            const double* src = nd.grad.ptr() + i * cs * hw;
            double* dst = a->grad.ptr() + (i * c + c0) * hw;
            for (int64_t e = 0; e < cs * hw; ++e) dst[e] += src[e];
        }
    });
}

Var add_bias_spatial(const Var& x, const Var& v) {
    if (x->value.ndim() != 4 || v->value.ndim() != 2 || v->value.dim(0) != x->value.dim(0) ||
        v->value.dim(1) != x->value.dim(1))
        throw ShapeError("add_bias_spatial: incompatible " + x->value.shape_str() + " + " + v->value.shape_str());
    const int64_t n = x->value.dim(0), c = x->value.dim(1), hw = x->value.dim(2) * x->value.dim(3);
    Tensor out = x->value;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            const double bias = v->value.data[i * c + ch];
            double* p = out.ptr() + (i * c + ch) * hw;
            for (int64_t e = 0; e < hw; ++e) p[e] += bias;
        }
    return make_op(std::move(out), {x, v}, [x, v, n, c, hw](AgNode& nd) {
        if (x->requires_grad) accum(x, nd.grad);
        if (v->requires_grad) {
            v->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t ch = 0; ch < c; ++ch) {
                    const double* p = nd.grad.ptr() + (i * c + ch) * hw;
                    double s = 0.0;
                    for (int64_t e = 0; e < hw; ++e) s += p[e];
                    v->grad.data[i * c + ch] += s;
                }
        }
    });
}

Var gather_rows(const Var& table, const std::vector<int>& idx) {
    if (table->value.ndim() != 2) throw ShapeError("gather_rows: expected (R, D)");
    const int64_t r = table->value.dim(0), d = table->value.dim(1);
    for (int i : idx)
        if (i < 0 || i >= r) throw ShapeError("gather_rows: index out of range");
    Tensor out({static_cast<int64_t>(idx.size()), d});
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy(table->value.ptr() + idx[i] * d, table->value.ptr() + (idx[i] + 1) * d,
                  out.ptr() + static_cast<int64_t>(i) * d);
    auto ids = std::make_shared<std::vector<int>>(idx);
    return make_op(std::move(out), {table}, [table, ids, d](AgNode& nd) {
        if (!table->requires_grad) return;
        table->ensure_grad();
        for (size_t i = 0; i < ids->size(); ++i) {
            const double* src = nd.grad.ptr() + static_cast<int64_t>(i) * d;
            double* dst = table->grad.ptr() + (*ids)[i] * d;
            for (int64_t e = 0; e < d; ++e) dst[e] += src[e];
        }
    });
}

}  // namespace ag

}  // namespace ctrlora
