#include <cmath>
#include <cstring>

#include "pmi/autograd.hpp"
#include "pmi/error.hpp"

namespace pmi::ag {

namespace {

Tensor reshape_t(const Tensor& x, Shape shape) {
    if (numel_of(shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    Tensor out(shape, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        std::memcpy(out.data<T>(), x.data<T>(), sizeof(T) * static_cast<size_t>(x.numel()));
        return 0;
    });
    return out;
}

Shape insert_axis(Shape s, int axis) {
    s.insert(s.begin() + axis, 1);
    return s;
}

std::vector<int> inverse_perm(const std::vector<int>& perm) {
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
    return inv;
}

}  // namespace

Var add(const Var& a, const Var& b) {
    Tensor v = pmi::add(a->value, b->value);
    return make_op("add", std::move(v), {a, b}, [a, b](Node& n) {
        accumulate(a, reduce_to_shape(n.grad, a->value.shape()));
        accumulate(b, reduce_to_shape(n.grad, b->value.shape()));
    });
}

Var sub(const Var& a, const Var& b) {
    Tensor v = pmi::sub(a->value, b->value);
    return make_op("sub", std::move(v), {a, b}, [a, b](Node& n) {
        accumulate(a, reduce_to_shape(n.grad, a->value.shape()));
        accumulate(b, reduce_to_shape(mul_scalar(n.grad, -1.0), b->value.shape()));
    });
}

Var mul(const Var& a, const Var& b) {
    Tensor v = pmi::mul(a->value, b->value);
    return make_op("mul", std::move(v), {a, b}, [a, b](Node& n) {
        accumulate(a, reduce_to_shape(pmi::mul(n.grad, b->value), a->value.shape()));
        accumulate(b, reduce_to_shape(pmi::mul(n.grad, a->value), b->value.shape()));
    });
}

Var div(const Var& a, const Var& b) {
    Tensor v = pmi::div(a->value, b->value);
    return make_op("div", std::move(v), {a, b}, [a, b](Node& n) {
        accumulate(a, reduce_to_shape(pmi::div(n.grad, b->value), a->value.shape()));
        Tensor t = pmi::div(a->value, pmi::mul(b->value, b->value));
        accumulate(b, reduce_to_shape(mul_scalar(pmi::mul(n.grad, t), -1.0), b->value.shape()));
    });
}

Var add_const(const Var& x, double c) {
    return make_op("add_const", add_scalar(x->value, c), {x}, [x](Node& n) { accumulate(x, n.grad); });
}

Var scale(const Var& x, double c) {
    return make_op("scale", mul_scalar(x->value, c), {x},
                   [x, c](Node& n) { accumulate(x, mul_scalar(n.grad, c)); });
}

Var matmul(const Var& a, const Var& b) {
    Tensor v = pmi::matmul(a->value, b->value);
    return make_op("matmul", std::move(v), {a, b}, [a, b](Node& n) {
        accumulate(a, reduce_to_shape(pmi::matmul(n.grad, transpose_last2(b->value)), a->value.shape()));
        accumulate(b, reduce_to_shape(pmi::matmul(transpose_last2(a->value), n.grad), b->value.shape()));
    });
}

Var permute(const Var& x, std::vector<int> perm) {
    Tensor v = pmi::permute(x->value, perm);
    return make_op("permute", std::move(v), {x}, [x, perm = std::move(perm)](Node& n) {
        accumulate(x, pmi::permute(n.grad, inverse_perm(perm)));
    });
}

Var reshape(const Var& x, Shape shape) {
    // -1 wildcard for one dim
    int64_t known = 1;
    int wild = -1;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (wild >= 0) throw DimensionError("reshape: more than one -1");
            wild = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (wild >= 0) shape[static_cast<size_t>(wild)] = known == 0 ? 0 : x->value.numel() / known;
    Tensor v = reshape_t(x->value, shape);
    return make_op("reshape", std::move(v), {x},
                   [x](Node& n) { accumulate(x, reshape_t(n.grad, x->value.shape())); });
}

Var concat(const std::vector<Var>& parts, int axis) {
    std::vector<Tensor> vals;
    vals.reserve(parts.size());
    for (const Var& p : parts) vals.push_back(p->value);
    Tensor v = pmi::concat(vals, axis);
    std::vector<Var> parents(parts.begin(), parts.end());
    const int a = normalize_axis(axis, parts[0]->value.rank());
    return make_op("concat", std::move(v), parents, [parts, a](Node& n) {
        int64_t at = 0;
        for (const Var& p : parts) {
            accumulate(p, slice_axis(n.grad, a, at, p->value.dim(a)));
            at += p->value.dim(a);
        }
    });
}

Var slice(const Var& x, int axis, int64_t start, int64_t len) {
    const int a = normalize_axis(axis, x->value.rank());
    Tensor v = slice_axis(x->value, a, start, len);
    return make_op("slice", std::move(v), {x}, [x, a, start, len](Node& n) {
        Tensor dx = Tensor::zeros(x->value.shape(), x->value.dtype());
        int64_t outer = 1, inner = 1;
        const int64_t full = x->value.dim(a);
        for (int i = 0; i < a; ++i) outer *= x->value.dim(i);
        for (int i = a + 1; i < x->value.rank(); ++i) inner *= x->value.dim(i);
        dispatch(dx.dtype(), [&](auto tag) {
            using T = decltype(tag);
            T* pd = dx.data<T>();
            const T* pg = n.grad.data<T>();
            for (int64_t o = 0; o < outer; ++o)
                std::memcpy(pd + (o * full + start) * inner, pg + o * len * inner,
                            sizeof(T) * static_cast<size_t>(len * inner));
            return 0;
        });
        accumulate(x, std::move(dx));
    });
}

Var softmax(const Var& x, int axis) {
    const int a = normalize_axis(axis, x->value.rank());
    Tensor y = pmi::softmax(x->value, a);
    return make_op("softmax", std::move(y), {x}, [x, a](Node& n) {
        Tensor gy = pmi::mul(n.grad, n.value);
        Tensor dot = reshape_t(pmi::sum_axis(gy, a), insert_axis(pmi::sum_axis(gy, a).shape(), a));
        Tensor dx = pmi::mul(pmi::sub(n.grad, dot), n.value);
        accumulate(x, std::move(dx));
    });
}

Var relu(const Var& x) {
    Tensor y = pmi::relu(x->value);
    return make_op("relu", std::move(y), {x}, [x](Node& n) {
        Tensor dx(n.grad.shape(), n.grad.dtype());
        dispatch(dx.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* px = x->value.data<T>();
            const T* pg = n.grad.data<T>();
            T* pd = dx.data<T>();
            for (int64_t i = 0; i < dx.numel(); ++i) pd[i] = px[i] > T(0) ? pg[i] : T(0);
            return 0;
        });
        accumulate(x, std::move(dx));
    });
}

Var tanh_v(const Var& x) {
    Tensor y = tanh_t(x->value);
    return make_op("tanh", std::move(y), {x}, [x](Node& n) {
        Tensor one_minus = unary_map(n.value, [](double v) { return 1.0 - v * v; });
        accumulate(x, pmi::mul(n.grad, one_minus));
    });
}

Var sigmoid(const Var& x) {
    Tensor y = pmi::sigmoid(x->value);
    return make_op("sigmoid", std::move(y), {x}, [x](Node& n) {
        Tensor d = unary_map(n.value, [](double v) { return v * (1.0 - v); });
        accumulate(x, pmi::mul(n.grad, d));
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    Tensor mean, rstd;
    Tensor y = pmi::layer_norm(x->value, gamma->value, beta->value, eps, &mean, &rstd);
    return make_op("layer_norm", std::move(y), {x, gamma, beta},
                   [x, gamma, beta, mean = std::move(mean), rstd = std::move(rstd)](Node& n) {
                       const int64_t D = x->value.dim(x->value.rank() - 1);
                       const int64_t rows = x->value.numel() / D;
                       Tensor dx(x->value.shape(), x->value.dtype());
                       Tensor dgamma = Tensor::zeros(gamma->value.shape(), gamma->value.dtype());
                       Tensor dbeta = Tensor::zeros(beta->value.shape(), beta->value.dtype());
                       dispatch(dx.dtype(), [&](auto tag) {
                           using T = decltype(tag);
                           const T* px = x->value.data<T>();
                           const T* pg = n.grad.data<T>();
                           const T* pga = gamma->value.data<T>();
                           const T* pm = mean.data<T>();
                           const T* pr = rstd.data<T>();
                           T* pdx = dx.data<T>();
                           T* pdg = dgamma.data<T>();
                           T* pdb = dbeta.data<T>();
                           for (int64_t r = 0; r < rows; ++r) {
                               const T* xr = px + r * D;
                               const T* gr = pg + r * D;
                               const T mu = pm[r], rs = pr[r];
                               T sum_h = T(0), sum_hx = T(0);
                               for (int64_t j = 0; j < D; ++j) {
                                   const T xh = (xr[j] - mu) * rs;
                                   const T h = gr[j] * pga[j];
                                   sum_h += h;
                                   sum_hx += h * xh;
                                   pdg[j] += gr[j] * xh;
                                   pdb[j] += gr[j];
                               }
                               const T mh = sum_h / static_cast<T>(D);
                               const T mhx = sum_hx / static_cast<T>(D);
                               T* dr = pdx + r * D;
                               for (int64_t j = 0; j < D; ++j) {
                                   const T xh = (xr[j] - mu) * rs;
                                   dr[j] = rs * (gr[j] * pga[j] - mh - xh * mhx);
                               }
                           }
                           return 0;
                       });
                       accumulate(x, std::move(dx));
                       accumulate(gamma, std::move(dgamma));
                       accumulate(beta, std::move(dbeta));
                   });
}

Var sum_axis(const Var& x, int axis) {
    const int a = normalize_axis(axis, x->value.rank());
    Tensor y = pmi::sum_axis(x->value, a);
    return make_op("sum_axis", std::move(y), {x}, [x, a](Node& n) {
        Tensor g = reshape_t(n.grad, insert_axis(n.grad.shape(), a));
        accumulate(x, pmi::add(Tensor::zeros(x->value.shape(), x->value.dtype()), g));
    });
}

Var mean_axis(const Var& x, int axis) {
    const int a = normalize_axis(axis, x->value.rank());
    const int64_t len = x->value.dim(a);
    if (len == 0) throw DimensionError("mean_axis: zero-length axis");
    return scale(sum_axis(x, a), 1.0 / static_cast<double>(len));
}

Var sum_all(const Var& x) {
    double s = 0.0;
    for (int64_t i = 0; i < x->value.numel(); ++i) s += x->value.get(i);
    Tensor y = Tensor::full({1}, s, x->value.dtype());
    return make_op("sum_all", std::move(y), {x}, [x](Node& n) {
        accumulate(x, Tensor::full(x->value.shape(), n.grad.get(0), x->value.dtype()));
    });
}

Var outer_broadcast(const Var& s, const Var& m) {
    Tensor y = pmi::outer_broadcast(s->value, m->value);
    return make_op("outer_broadcast", std::move(y), {s, m}, [s, m](Node& n) {
        const int64_t C = s->value.dim(s->value.rank() - 1);
        const int64_t N = m->value.dim(m->value.rank() - 2);
        const int64_t D = m->value.dim(m->value.rank() - 1);
        const int64_t B = s->value.numel() / C;
        Tensor ds = Tensor::zeros(s->value.shape(), s->value.dtype());
        Tensor dm = Tensor::zeros(m->value.shape(), m->value.dtype());
        dispatch(ds.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* pg = n.grad.data<T>();
            const T* ps = s->value.data<T>();
            const T* pm = m->value.data<T>();
            T* pds = ds.data<T>();
            T* pdm = dm.data<T>();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c) {
                    const T* gb = pg + (b * C + c) * N * D;
                    const T* mb = pm + b * N * D;
                    T* dmb = pdm + b * N * D;
                    const T sv = ps[b * C + c];
                    T acc = T(0);
                    for (int64_t i = 0; i < N * D; ++i) {
                        acc += gb[i] * mb[i];
                        dmb[i] += gb[i] * sv;
                    }
                    pds[b * C + c] = acc;
                }
            return 0;
        });
        accumulate(s, std::move(ds));
        accumulate(m, std::move(dm));
    });
}

Var expand_batch(const Var& x, int64_t batch) {
    Shape os = x->value.shape();
    os.insert(os.begin(), batch);
    Tensor y(os, x->value.dtype());
    dispatch(y.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        T* po = y.data<T>();
        const int64_t n = x->value.numel();
        for (int64_t b = 0; b < batch; ++b) std::memcpy(po + b * n, px, sizeof(T) * static_cast<size_t>(n));
        return 0;
    });
    return make_op("expand_batch", std::move(y), {x},
                   [x](Node& n) { accumulate(x, reduce_to_shape(n.grad, x->value.shape())); });
}

Var dropout(const Var& x, double p, RngStream& stream, bool training) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0, 1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    const double keep = 1.0 - p;
    Tensor mask(x->value.shape(), x->value.dtype());
    for (int64_t i = 0; i < mask.numel(); ++i) mask.set(i, stream.uniform() < keep ? 1.0 / keep : 0.0);
    Tensor y = pmi::mul(x->value, mask);
    return make_op("dropout", std::move(y), {x},
                   [x, mask = std::move(mask)](Node& n) { accumulate(x, pmi::mul(n.grad, mask)); });
}

Var detach(const Var& x) { return leaf(x->value, false); }

Var attention_probs(const Var& q, const Var& k, double scale_factor, const Tensor* key_mask,
                    const Tensor* support_mask) {
    const Tensor& qv = q->value;
    const Tensor& kv = k->value;
    if (qv.rank() != kv.rank() || qv.rank() < 2)
        throw DimensionError("attention_probs: rank mismatch " + shape_str(qv.shape()) + " vs " +
                             shape_str(kv.shape()));
    const int r = qv.rank();
    const int64_t Tq = qv.dim(r - 2), dh = qv.dim(r - 1);
    const int64_t Tk = kv.dim(r - 2);
    if (kv.dim(r - 1) != dh)
        throw DimensionError("attention_probs: head dims disagree " + shape_str(qv.shape()) + " vs " +
                             shape_str(kv.shape()));
    Shape lead(qv.shape().begin(), qv.shape().end() - 2);
    Shape klead(kv.shape().begin(), kv.shape().end() - 2);
    if (lead != klead) throw DimensionError("attention_probs: leading dims disagree");
    const int64_t L = numel_of(lead);
    const int64_t B = lead.empty() ? 1 : lead[0];
    if (key_mask) {
        if (key_mask->rank() != 2 || key_mask->dim(0) != B || key_mask->dim(1) != Tk)
            throw DimensionError("attention_probs: key mask must be [batch, n_keys]");
    }
    Shape oshape = lead;
    oshape.push_back(Tq);
    oshape.push_back(Tk);
    if (support_mask && support_mask->shape() != oshape)
        throw DimensionError("attention_probs: support mask shape mismatch");
    Tensor probs(oshape, qv.dtype());
    // allowed-key bitmaps, resolved once
    std::vector<uint8_t> key_allowed;
    if (key_mask) {
        key_allowed.resize(static_cast<size_t>(B * Tk));
        for (int64_t i = 0; i < B * Tk; ++i) key_allowed[static_cast<size_t>(i)] = key_mask->get(i) != 0.0;
    }
    std::vector<uint8_t> sup_allowed;
    if (support_mask) {
        sup_allowed.resize(static_cast<size_t>(L * Tq * Tk));
        for (int64_t i = 0; i < L * Tq * Tk; ++i)
            sup_allowed[static_cast<size_t>(i)] = support_mask->get(i) != 0.0;
    }
    const int64_t per_b = B > 0 ? L / B : 1;

    dispatch(qv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pq = qv.data<T>();
        const T* pk = kv.data<T>();
        T* pp = probs.data<T>();
        const bool par = L * Tq * Tk * dh > (1 << 18);
#pragma omp parallel if (par)
        {
            std::vector<T> kt(static_cast<size_t>(dh * Tk));
            std::vector<uint8_t> ok(static_cast<size_t>(Tk));
#pragma omp for schedule(static)
            for (int64_t l = 0; l < L; ++l) {
                const T* ks = pk + l * Tk * dh;
                for (int64_t j = 0; j < Tk; ++j)
                    for (int64_t d = 0; d < dh; ++d) kt[static_cast<size_t>(d * Tk + j)] = ks[j * dh + d];
                const int64_t b = per_b > 0 ? l / per_b : 0;
                const uint8_t* krow_allowed = key_allowed.empty() ? nullptr : key_allowed.data() + b * Tk;
                for (int64_t i = 0; i < Tq; ++i) {
                    const T* qr = pq + (l * Tq + i) * dh;
                    T* pr = pp + (l * Tq + i) * Tk;
                    const uint8_t* srow =
                        sup_allowed.empty() ? nullptr : sup_allowed.data() + (l * Tq + i) * Tk;
                    for (int64_t j = 0; j < Tk; ++j)
                        ok[static_cast<size_t>(j)] =
                            (!krow_allowed || krow_allowed[j]) && (!srow || srow[j]);
                    // scores
                    std::memset(pr, 0, sizeof(T) * static_cast<size_t>(Tk));
                    for (int64_t d = 0; d < dh; ++d) {
                        const T a = qr[d];
                        const T* krow = kt.data() + d * Tk;
                        for (int64_t j = 0; j < Tk; ++j) pr[j] += a * krow[j];
                    }
                    // softmax over allowed entries
                    T mx = T(0);
                    bool any = false;
                    for (int64_t j = 0; j < Tk; ++j) {
                        if (!ok[static_cast<size_t>(j)]) continue;
                        const T v = pr[j] * static_cast<T>(scale_factor);
                        pr[j] = v;
                        if (!any || v > mx) mx = v;
                        any = true;
                    }
                    if (!any) {
                        std::memset(pr, 0, sizeof(T) * static_cast<size_t>(Tk));
                        continue;
                    }
                    T sum = T(0);
                    for (int64_t j = 0; j < Tk; ++j) {
                        if (!ok[static_cast<size_t>(j)]) {
                            pr[j] = T(0);
                            continue;
                        }
                        const T e = std::exp(pr[j] - mx);
                        pr[j] = e;
                        sum += e;
                    }
                    const T inv = T(1) / sum;
                    for (int64_t j = 0; j < Tk; ++j) pr[j] *= inv;
                }
            }
        }
        return 0;
    });

    return make_op("attention_probs", std::move(probs), {q, k}, [q, k, scale_factor](Node& n) {
        const Tensor& qv2 = q->value;
        const Tensor& kv2 = k->value;
        const int r2 = qv2.rank();
        const int64_t Tq2 = qv2.dim(r2 - 2), dh2 = qv2.dim(r2 - 1);
        const int64_t Tk2 = kv2.dim(r2 - 2);
        const int64_t L2 = qv2.numel() / (Tq2 * dh2);
        Tensor dq = Tensor::zeros(qv2.shape(), qv2.dtype());
        Tensor dk = Tensor::zeros(kv2.shape(), kv2.dtype());
        dispatch(qv2.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* pp = n.value.data<T>();
            const T* pg = n.grad.data<T>();
            const T* pq2 = qv2.data<T>();
            const T* pk2 = kv2.data<T>();
            T* pdq = dq.data<T>();
            T* pdk = dk.data<T>();
            const bool par = L2 * Tq2 * Tk2 * dh2 > (1 << 18);
#pragma omp parallel if (par)
            {
                std::vector<T> ds(static_cast<size_t>(Tq2 * Tk2));
#pragma omp for schedule(static)
                for (int64_t l = 0; l < L2; ++l) {
                    const T* P = pp + l * Tq2 * Tk2;
                    const T* G = pg + l * Tq2 * Tk2;
                    // dS = (G - rowdot(G, P)) * P, scaled
                    for (int64_t i = 0; i < Tq2; ++i) {
                        T dot = T(0);
                        const T* Pr = P + i * Tk2;
                        const T* Gr = G + i * Tk2;
                        for (int64_t j = 0; j < Tk2; ++j) dot += Gr[j] * Pr[j];
                        T* dsr = ds.data() + i * Tk2;
                        for (int64_t j = 0; j < Tk2; ++j)
                            dsr[j] = (Gr[j] - dot) * Pr[j] * static_cast<T>(scale_factor);
                    }
                    // dQ[l] = dS @ K[l]
                    const T* K = pk2 + l * Tk2 * dh2;
                    T* dQ = pdq + l * Tq2 * dh2;
                    for (int64_t i = 0; i < Tq2; ++i) {
                        T* drow = dQ + i * dh2;
                        const T* dsr = ds.data() + i * Tk2;
                        for (int64_t j = 0; j < Tk2; ++j) {
                            const T a = dsr[j];
                            const T* krow = K + j * dh2;
                            for (int64_t d = 0; d < dh2; ++d) drow[d] += a * krow[d];
                        }
                    }
                    // dK[l] = dS^T @ Q[l]
                    const T* Q = pq2 + l * Tq2 * dh2;
                    T* dK = pdk + l * Tk2 * dh2;
                    for (int64_t i = 0; i < Tq2; ++i) {
                        const T* dsr = ds.data() + i * Tk2;
                        const T* qrow = Q + i * dh2;
                        for (int64_t j = 0; j < Tk2; ++j) {
                            const T a = dsr[j];
                            T* krow = dK + j * dh2;
                            for (int64_t d = 0; d < dh2; ++d) krow[d] += a * qrow[d];
                        }
                    }
                }
            }
            return 0;
        });
        accumulate(q, std::move(dq));
        accumulate(k, std::move(dk));
    });
}

Var sentence_embed(const Var& table, const std::vector<std::vector<std::vector<int32_t>>>& tokens) {
    const int64_t V = table->value.dim(0), D = table->value.dim(1);
    const int64_t B = static_cast<int64_t>(tokens.size());
    const int64_t S = B > 0 ? static_cast<int64_t>(tokens[0].size()) : 0;
    for (const auto& row : tokens)
        if (static_cast<int64_t>(row.size()) != S) throw DimensionError("sentence_embed: ragged slot counts");
    Tensor out = Tensor::zeros({B, S, D}, table->value.dtype());
    dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pt = table->value.data<T>();
        T* po = out.data<T>();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t s = 0; s < S; ++s) {
                const auto& words = tokens[static_cast<size_t>(b)][static_cast<size_t>(s)];
                if (words.empty()) continue;
                T* dst = po + (b * S + s) * D;
                for (int32_t w : words) {
                    if (w < 0 || w >= V) throw DataError("sentence_embed: token id " + std::to_string(w) +
                                                         " outside vocabulary of size " + std::to_string(V));
                    const T* src = pt + static_cast<int64_t>(w) * D;
                    for (int64_t d = 0; d < D; ++d) dst[d] += src[d];
                }
                const T inv = T(1) / static_cast<T>(words.size());
                for (int64_t d = 0; d < D; ++d) dst[d] *= inv;
            }
        return 0;
    });
    return make_op("sentence_embed", std::move(out), {table}, [table, tokens](Node& n) {
        const int64_t D2 = table->value.dim(1);
        const int64_t S2 = tokens.empty() ? 0 : static_cast<int64_t>(tokens[0].size());
        Tensor dt = Tensor::zeros(table->value.shape(), table->value.dtype());
        dispatch(dt.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* pg = n.grad.data<T>();
            T* pd = dt.data<T>();
            for (int64_t b = 0; b < static_cast<int64_t>(tokens.size()); ++b)
                for (int64_t s = 0; s < S2; ++s) {
                    const auto& words = tokens[static_cast<size_t>(b)][static_cast<size_t>(s)];
                    if (words.empty()) continue;
                    const T inv = T(1) / static_cast<T>(words.size());
                    const T* g = pg + (b * S2 + s) * D2;
                    for (int32_t w : words) {
                        T* dst = pd + static_cast<int64_t>(w) * D2;
                        for (int64_t d = 0; d < D2; ++d) dst[d] += g[d] * inv;
                    }
                }
            return 0;
        });
        accumulate(table, std::move(dt));
    });
}

Var embedding(const Var& table, const std::vector<int32_t>& ids, Shape ids_shape) {
    const int64_t V = table->value.dim(0), D = table->value.dim(1);
    if (numel_of(ids_shape) != static_cast<int64_t>(ids.size()))
        throw DimensionError("embedding: ids_shape mismatch");
    Shape os = ids_shape;
    os.push_back(D);
    Tensor out(os, table->value.dtype());
    dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pt = table->value.data<T>();
        T* po = out.data<T>();
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= V)
                throw DataError("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                                std::to_string(V));
            std::memcpy(po + static_cast<int64_t>(i) * D, pt + static_cast<int64_t>(ids[i]) * D,
                        sizeof(T) * static_cast<size_t>(D));
        }
        return 0;
    });
    return make_op("embedding", std::move(out), {table}, [table, ids](Node& n) {
        const int64_t D2 = table->value.dim(1);
        Tensor dt = Tensor::zeros(table->value.shape(), table->value.dtype());
        dispatch(dt.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* pg = n.grad.data<T>();
            T* pd = dt.data<T>();
            for (size_t i = 0; i < ids.size(); ++i) {
                T* dst = pd + static_cast<int64_t>(ids[i]) * D2;
                const T* g = pg + static_cast<int64_t>(i) * D2;
                for (int64_t d = 0; d < D2; ++d) dst[d] += g[d];
            }
            return 0;
        });
        accumulate(table, std::move(dt));
    });
}

Var cross_entropy(const Var& logits, const std::vector<int32_t>& labels) {
    const Tensor& lv = logits->value;
    if (lv.rank() != 2) throw DimensionError("cross_entropy: logits must be [batch, classes]");
    const int64_t B = lv.dim(0), K = lv.dim(1);
    if (static_cast<int64_t>(labels.size()) != B) throw DimensionError("cross_entropy: label count mismatch");
    for (int32_t y : labels)
        if (y < 0 || y >= K)
            throw DataError("cross_entropy: label " + std::to_string(y) + " out of range [0, " +
                            std::to_string(K) + ")");
    Tensor probs = pmi::softmax(lv, 1);
    double loss = 0.0;
    dispatch(lv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pl = lv.data<T>();
        for (int64_t b = 0; b < B; ++b) {
            const T* row = pl + b * K;
            T mx = row[0];
            for (int64_t j = 1; j < K; ++j) mx = std::max(mx, row[j]);
            T lse = T(0);
            for (int64_t j = 0; j < K; ++j) lse += std::exp(row[j] - mx);
            loss += static_cast<double>(mx) + std::log(static_cast<double>(lse)) -
                    static_cast<double>(row[labels[static_cast<size_t>(b)]]);
        }
        return 0;
    });
    loss /= static_cast<double>(B);
    Tensor y = Tensor::full({1}, loss, lv.dtype());
    return make_op("cross_entropy", std::move(y), {logits},
                   [logits, labels, probs = std::move(probs)](Node& n) {
                       const int64_t B2 = logits->value.dim(0), K2 = logits->value.dim(1);
                       Tensor dl = probs;  // copy
                       const double g = n.grad.get(0) / static_cast<double>(B2);
                       dispatch(dl.dtype(), [&](auto tag) {
                           using T = decltype(tag);
                           T* p = dl.data<T>();
                           for (int64_t b = 0; b < B2; ++b)
                               p[b * K2 + labels[static_cast<size_t>(b)]] -= T(1);
                           for (int64_t i = 0; i < dl.numel(); ++i) p[i] *= static_cast<T>(g);
                           return 0;
                       });
                       accumulate(logits, std::move(dl));
                   });
}

}  // namespace pmi::ag
