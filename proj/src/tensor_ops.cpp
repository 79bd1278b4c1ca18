#include "pmi/tensor_ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pmi {

namespace {

constexpr int64_t kParallelWork = 1 << 18;

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype()) throw DimensionError(std::string(op) + ": mixed dtypes");
}

// Row kernel: c[0..n) (+)= sum_k a_row[k] * b[k*n .. ), k ascending.
template <class T>
inline void gemm_row(const T* a_row, const T* b, T* c, int64_t k, int64_t n, bool accumulate) {
    if (!accumulate) std::memset(c, 0, sizeof(T) * static_cast<size_t>(n));
    for (int64_t kk = 0; kk < k; ++kk) {
        const T a = a_row[kk];
        const T* brow = b + kk * n;
        for (int64_t j = 0; j < n; ++j) c[j] += a * brow[j];
    }
}

struct LeadMap {
    Shape out_lead;
    int64_t count = 1;
    std::vector<int64_t> a_stride, b_stride;  // per lead dim, 0 when broadcast
};

LeadMap lead_map(const Shape& a, const Shape& b, const char* op) {
    Shape al(a.begin(), a.end() - 2), bl(b.begin(), b.end() - 2);
    size_t r = std::max(al.size(), bl.size());
    LeadMap m;
    m.out_lead.resize(r);
    m.a_stride.assign(r, 0);
    m.b_stride.assign(r, 0);
    Shape as = strides_of(al), bs = strides_of(bl);
    for (size_t i = 0; i < r; ++i) {
        size_t oi = r - 1 - i;
        int64_t ad = i < al.size() ? al[al.size() - 1 - i] : 1;
        int64_t bd = i < bl.size() ? bl[bl.size() - 1 - i] : 1;
        if (ad != bd && ad != 1 && bd != 1)
            throw DimensionError(std::string(op) + ": incompatible leading dims " + shape_str(a) + " x " +
                                 shape_str(b));
        m.out_lead[oi] = std::max(ad, bd);
        if (ad != 1 && i < al.size()) m.a_stride[oi] = as[al.size() - 1 - i];
        if (bd != 1 && i < bl.size()) m.b_stride[oi] = bs[bl.size() - 1 - i];
    }
    m.count = numel_of(m.out_lead);
    return m;
}

}  // namespace

int normalize_axis(int axis, int rank) {
    int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                                                 std::to_string(rank));
    return a;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_same_dtype(a, b, "matmul");
    if (a.rank() < 2 || b.rank() < 2)
        throw DimensionError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const int64_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
    const int64_t k2 = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
    if (k != k2)
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    LeadMap lm = lead_map(a.shape(), b.shape(), "matmul");
    Shape out_shape = lm.out_lead;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out(out_shape, a.dtype());

    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>();
        const T* pb = b.data<T>();
        T* pc = out.data<T>();
        const int64_t a_slice = m * k, b_slice = k * n, c_slice = m * n;
        const int64_t rows = lm.count * m;
        const bool par = lm.count * m * n * k > kParallelWork;
        // precompute slice offsets
        std::vector<int64_t> aoff(static_cast<size_t>(lm.count)), boff(static_cast<size_t>(lm.count));
        for (int64_t l = 0; l < lm.count; ++l) {
            int64_t rest = l, ao = 0, bo = 0;
            for (size_t d = 0; d < lm.out_lead.size(); ++d) {
                int64_t coord = 0;
                int64_t block = 1;
                for (size_t e = d + 1; e < lm.out_lead.size(); ++e) block *= lm.out_lead[e];
                coord = rest / block;
                rest %= block;
                ao += coord * lm.a_stride[d];
                bo += coord * lm.b_stride[d];
            }
            aoff[static_cast<size_t>(l)] = ao * a_slice;
            boff[static_cast<size_t>(l)] = bo * b_slice;
        }
#pragma omp parallel for schedule(static) if (par)
        for (int64_t t = 0; t < rows; ++t) {
            const int64_t l = t / m, i = t % m;
            gemm_row(pa + aoff[static_cast<size_t>(l)] + i * k, pb + boff[static_cast<size_t>(l)],
                     pc + l * c_slice + i * n, k, n, false);
        }
        return 0;
    });
    return out;
}

Tensor transpose_last2(const Tensor& x) {
    if (x.rank() < 2) throw DimensionError("transpose_last2: rank < 2");
    std::vector<int> perm(static_cast<size_t>(x.rank()));
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(x, perm);
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r) throw DimensionError("permute: perm size mismatch");
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
    Tensor out(out_shape, x.dtype());
    Shape xs = strides_of(x.shape());
    // stride of out dim i in the input
    std::vector<int64_t> map(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) map[static_cast<size_t>(i)] = xs[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        T* po = out.data<T>();
        const int64_t n = x.numel();
        if (n == 0) return 0;
        const int64_t inner = out_shape.empty() ? 1 : out_shape.back();
        const int64_t in_step = r ? map[static_cast<size_t>(r - 1)] : 1;
        const int64_t outer = n / std::max<int64_t>(inner, 1);
        for (int64_t o = 0; o < outer; ++o) {
            int64_t rest = o, src = 0;
            for (int d = 0; d < r - 1; ++d) {
                int64_t block = 1;
                for (int e = d + 1; e < r - 1; ++e) block *= out_shape[static_cast<size_t>(e)];
                int64_t coord = rest / block;
                rest %= block;
                src += coord * map[static_cast<size_t>(d)];
            }
            T* dst = po + o * inner;
            for (int64_t j = 0; j < inner; ++j) dst[j] = px[src + j * in_step];
        }
        return 0;
    });
    return out;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        int64_t ad = i < a.size() ? a[a.size() - 1 - i] : 1;
        int64_t bd = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (ad != bd && ad != 1 && bd != 1)
            throw DimensionError("broadcast: incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
        out[r - 1 - i] = std::max(ad, bd);
    }
    return out;
}

namespace {

// strides into `shape` viewed under `out` (0 where broadcast)
std::vector<int64_t> bcast_strides(const Shape& shape, const Shape& out) {
    Shape st = strides_of(shape);
    std::vector<int64_t> res(out.size(), 0);
    for (size_t i = 0; i < out.size(); ++i) {
        size_t oi = out.size() - 1 - i;
        if (i < shape.size() && shape[shape.size() - 1 - i] != 1) res[oi] = st[shape.size() - 1 - i];
    }
    return res;
}

template <class T, class F>
void binary_kernel(const Tensor& a, const Tensor& b, Tensor& out, F f) {
    const T* pa = a.data<T>();
    const T* pb = b.data<T>();
    T* po = out.data<T>();
    const int64_t n = out.numel();
    if (a.shape() == b.shape()) {
        for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
        return;
    }
    if (b.numel() == 1) {
        const T s = pb[0];
        for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], s);
        return;
    }
    if (a.numel() == 1) {
        const T s = pa[0];
        for (int64_t i = 0; i < n; ++i) po[i] = f(s, pb[i]);
        return;
    }
    const Shape& os = out.shape();
    auto as = bcast_strides(a.shape(), os);
    auto bs = bcast_strides(b.shape(), os);
    const size_t r = os.size();
    const int64_t inner = os.back();
    const int64_t a_in = as[r - 1], b_in = bs[r - 1];
    const int64_t outer = n / std::max<int64_t>(inner, 1);
    for (int64_t o = 0; o < outer; ++o) {
        int64_t rest = o, ao = 0, bo = 0;
        for (size_t d = 0; d + 1 < r; ++d) {
            int64_t block = 1;
            for (size_t e = d + 1; e + 1 < r; ++e) block *= os[e];
            int64_t coord = rest / block;
            rest %= block;
            ao += coord * as[d];
            bo += coord * bs[d];
        }
        T* dst = po + o * inner;
        const T* sa = pa + ao;
        const T* sb = pb + bo;
        if (a_in == 1 && b_in == 1) {
            for (int64_t j = 0; j < inner; ++j) dst[j] = f(sa[j], sb[j]);
        } else if (a_in == 1 && b_in == 0) {
            const T s = sb[0];
            for (int64_t j = 0; j < inner; ++j) dst[j] = f(sa[j], s);
        } else if (a_in == 0 && b_in == 1) {
            const T s = sa[0];
            for (int64_t j = 0; j < inner; ++j) dst[j] = f(s, sb[j]);
        } else {
            for (int64_t j = 0; j < inner; ++j) dst[j] = f(sa[j * a_in], sb[j * b_in]);
        }
    }
}

template <class F>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f) {
    check_same_dtype(a, b, name);
    Tensor out(broadcast_shape(a.shape(), b.shape()), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        binary_kernel<T>(a, b, out, [&](T x, T y) { return static_cast<T>(f(x, y)); });
        return 0;
    });
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "add", [](auto x, auto y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "sub", [](auto x, auto y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "mul", [](auto x, auto y) { return x * y; });
}
Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "div", [](auto x, auto y) { return x / y; });
}

Tensor reduce_to_shape(const Tensor& x, const Shape& target) {
    if (x.shape() == target) return x;
    Tensor out(target, x.dtype());
    auto ts = bcast_strides(target, x.shape());
    const Shape& xs = x.shape();
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        T* po = out.data<T>();
        const size_t r = xs.size();
        const int64_t n = x.numel();
        std::vector<int64_t> coord(r, 0);
        int64_t off = 0;
        for (int64_t i = 0; i < n; ++i) {
            po[off] += px[i];
            // advance multi-index
            for (size_t d = r; d-- > 0;) {
                coord[d]++;
                off += ts[d];
                if (coord[d] < xs[d]) break;
                off -= coord[d] * ts[d];
                coord[d] = 0;
            }
        }
        return 0;
    });
    return out;
}

Tensor add_scalar(const Tensor& x, double c) {
    return unary_map(x, [c](double v) { return v + c; });
}

Tensor mul_scalar(const Tensor& x, double c) {
    return unary_map(x, [c](double v) { return v * c; });
}

Tensor unary_map(const Tensor& x, const std::function<double(double)>& f) {
    Tensor out(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        T* po = out.data<T>();
        for (int64_t i = 0; i < x.numel(); ++i) po[i] = static_cast<T>(f(static_cast<double>(px[i])));
        return 0;
    });
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        T* po = out.data<T>();
        for (int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
        return 0;
    });
    return out;
}

Tensor tanh_t(const Tensor& x) {
    Tensor out(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        T* po = out.data<T>();
        for (int64_t i = 0; i < x.numel(); ++i) po[i] = std::tanh(px[i]);
        return 0;
    });
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        T* po = out.data<T>();
        for (int64_t i = 0; i < x.numel(); ++i) {
            const T v = px[i];
            po[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
        }
        return 0;
    });
    return out;
}

namespace {

// Iterate rows along `axis`: calls f(base_offset, len, stride).
template <class F>
void for_each_lane(const Shape& shape, int axis, F f) {
    Shape st = strides_of(shape);
    const int64_t len = shape[static_cast<size_t>(axis)];
    const int64_t stride = st[static_cast<size_t>(axis)];
    const int64_t n = numel_of(shape);
    const int64_t lanes = len == 0 ? 0 : n / len;
    for (int64_t lane = 0; lane < lanes; ++lane) {
        // decompose lane over all dims except axis
        int64_t rest = lane, base = 0;
        for (size_t d = 0; d < shape.size(); ++d) {
            if (static_cast<int>(d) == axis) continue;
            int64_t block = 1;
            for (size_t e = d + 1; e < shape.size(); ++e)
                if (static_cast<int>(e) != axis) block *= shape[e];
            int64_t coord = rest / block;
            rest %= block;
            base += coord * st[d];
        }
        f(base, len, stride);
    }
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
    const int a = normalize_axis(axis, x.rank());
    Tensor out(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        T* po = out.data<T>();
        for_each_lane(x.shape(), a, [&](int64_t base, int64_t len, int64_t stride) {
            T mx = px[base];
            for (int64_t i = 1; i < len; ++i) mx = std::max(mx, px[base + i * stride]);
            T sum = T(0);
            for (int64_t i = 0; i < len; ++i) {
                const T e = std::exp(px[base + i * stride] - mx);
                po[base + i * stride] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (int64_t i = 0; i < len; ++i) po[base + i * stride] *= inv;
        });
        return 0;
    });
    return out;
}

Tensor top_k_mask(const Tensor& scores, int64_t k, int axis) {
    if (k <= 0) throw ConfigError("top_k_mask: k must be >= 1, got " + std::to_string(k));
    const int a = normalize_axis(axis, scores.rank());
    Tensor out = Tensor::zeros(scores.shape(), scores.dtype());
    dispatch(scores.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = scores.data<T>();
        T* po = out.data<T>();
        std::vector<int64_t> idx;
        for_each_lane(scores.shape(), a, [&](int64_t base, int64_t len, int64_t stride) {
            const int64_t kk = std::min<int64_t>(k, len);
            idx.resize(static_cast<size_t>(len));
            std::iota(idx.begin(), idx.end(), 0);
            std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(), [&](int64_t l, int64_t r) {
                const T vl = px[base + l * stride], vr = px[base + r * stride];
                if (vl != vr) return vl > vr;
                return l < r;
            });
            for (int64_t i = 0; i < kk; ++i) po[base + idx[static_cast<size_t>(i)] * stride] = T(1);
        });
        return 0;
    });
    return out;
}

Tensor sum_axis(const Tensor& x, int axis) {
    const int a = normalize_axis(axis, x.rank());
    Shape os;
    for (int i = 0; i < x.rank(); ++i)
        if (i != a) os.push_back(x.dim(i));
    Tensor out = Tensor::zeros(os, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        T* po = out.data<T>();
        int64_t lane = 0;
        for_each_lane(x.shape(), a, [&](int64_t base, int64_t len, int64_t stride) {
            T s = T(0);
            for (int64_t i = 0; i < len; ++i) s += px[base + i * stride];
            po[lane++] = s;
        });
        return 0;
    });
    return out;
}

Tensor mean_axis(const Tensor& x, int axis) {
    const int a = normalize_axis(axis, x.rank());
    if (x.dim(a) == 0) throw DimensionError("mean_axis: zero-length axis " + std::to_string(axis));
    return mul_scalar(sum_axis(x, a), 1.0 / static_cast<double>(x.dim(a)));
}

Tensor outer_broadcast(const Tensor& s, const Tensor& m) {
    check_same_dtype(s, m, "outer_broadcast");
    // s: [..., C], m: [..., N, D]; leading dims must match
    if (s.rank() < 1 || m.rank() < 2) throw DimensionError("outer_broadcast: ranks too small");
    Shape lead(s.shape().begin(), s.shape().end() - 1);
    Shape mlead(m.shape().begin(), m.shape().end() - 2);
    if (lead != mlead)
        throw DimensionError("outer_broadcast: leading dims disagree, " + shape_str(s.shape()) + " vs " +
                             shape_str(m.shape()));
    const int64_t C = s.dim(s.rank() - 1);
    const int64_t N = m.dim(m.rank() - 2), D = m.dim(m.rank() - 1);
    Shape os = lead;
    os.push_back(C);
    os.push_back(N);
    os.push_back(D);
    Tensor out(os, s.dtype());
    const int64_t B = numel_of(lead);
    dispatch(s.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* ps = s.data<T>();
        const T* pm = m.data<T>();
        T* po = out.data<T>();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c) {
                const T sv = ps[b * C + c];
                const T* mb = pm + b * N * D;
                T* ob = po + (b * C + c) * N * D;
                for (int64_t i = 0; i < N * D; ++i) ob[i] = sv * mb[i];
            }
        return 0;
    });
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const int a = normalize_axis(axis, parts[0].rank());
    Shape os = parts[0].shape();
    int64_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != parts[0].rank() || p.dtype() != parts[0].dtype())
            throw DimensionError("concat: mismatched inputs");
        for (int i = 0; i < p.rank(); ++i)
            if (i != a && p.dim(i) != os[static_cast<size_t>(i)])
                throw DimensionError("concat: shape mismatch at dim " + std::to_string(i));
        total += p.dim(a);
    }
    os[static_cast<size_t>(a)] = total;
    Tensor out(os, parts[0].dtype());
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < a; ++i) outer *= os[static_cast<size_t>(i)];
    for (int i = a + 1; i < static_cast<int>(os.size()); ++i) inner *= os[static_cast<size_t>(i)];
    dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        T* po = out.data<T>();
        int64_t at = 0;
        for (const Tensor& p : parts) {
            const T* pp = p.data<T>();
            const int64_t plen = p.dim(a) * inner;
            for (int64_t o = 0; o < outer; ++o)
                std::memcpy(po + (o * total + at) * inner, pp + o * plen, sizeof(T) * static_cast<size_t>(plen));
            at += p.dim(a);
        }
        return 0;
    });
    return out;
}

Tensor slice_axis(const Tensor& x, int axis, int64_t start, int64_t len) {
    const int a = normalize_axis(axis, x.rank());
    if (start < 0 || len < 0 || start + len > x.dim(a))
        throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                             ") out of bounds for dim " + std::to_string(x.dim(a)));
    Shape os = x.shape();
    os[static_cast<size_t>(a)] = len;
    Tensor out(os, x.dtype());
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < a; ++i) outer *= x.dim(i);
    for (int i = a + 1; i < x.rank(); ++i) inner *= x.dim(i);
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        T* po = out.data<T>();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(po + o * len * inner, px + (o * x.dim(a) + start) * inner,
                        sizeof(T) * static_cast<size_t>(len * inner));
        return 0;
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps, Tensor* save_mean,
                  Tensor* save_rstd) {
    const int64_t D = x.dim(x.rank() - 1);
    if (gamma.numel() != D || beta.numel() != D)
        throw DimensionError("layer_norm: affine params must match last dim " + std::to_string(D) + ", got " +
                             shape_str(gamma.shape()) + " / " + shape_str(beta.shape()));
    Tensor out(x.shape(), x.dtype());
    const int64_t rows = x.numel() / std::max<int64_t>(D, 1);
    Tensor mean_t = Tensor::zeros({rows}, x.dtype());
    Tensor rstd_t = Tensor::zeros({rows}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        const T* pg = gamma.data<T>();
        const T* pb = beta.data<T>();
        T* po = out.data<T>();
        T* pm = mean_t.data<T>();
        T* pr = rstd_t.data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const T* row = px + r * D;
            T mu = T(0);
            for (int64_t j = 0; j < D; ++j) mu += row[j];
            mu /= static_cast<T>(D);
            T var = T(0);
            for (int64_t j = 0; j < D; ++j) {
                const T d = row[j] - mu;
                var += d * d;
            }
            var /= static_cast<T>(D);
            const T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
            pm[r] = mu;
            pr[r] = rstd;
            T* orow = po + r * D;
            for (int64_t j = 0; j < D; ++j) orow[j] = (row[j] - mu) * rstd * pg[j] + pb[j];
        }
        return 0;
    });
    if (save_mean) *save_mean = std::move(mean_t);
    if (save_rstd) *save_rstd = std::move(rstd_t);
    return out;
}

}  // namespace pmi
