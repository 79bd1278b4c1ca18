#include <cmath>

#include <doctest.h>

#include "pmi/attention.hpp"
#include "support/fd.hpp"

using namespace pmi;
using pmi_test::random_tensor;

namespace {

AttentionParams hand_params(int heads, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                            const Tensor* wo = nullptr) {
    AttentionParams p;
    p.heads = heads;
    p.wq = ag::leaf(wq, true);
    p.wk = ag::leaf(wk, true);
    p.wv = ag::leaf(wv, true);
    if (wo) p.wo = ag::leaf(*wo, true);
    return p;
}

Tensor eye(int64_t n) {
    Tensor t = Tensor::zeros({n, n}, DType::F64);
    for (int64_t i = 0; i < n; ++i) t.set(i * n + i, 1.0);
    return t;
}

}  // namespace

TEST_CASE("mhc: single key returns that key's value row") {
    RngStream rng(1);
    AttentionParams p = hand_params(1, eye(4), eye(4), eye(4));
    ag::Var q = ag::leaf(random_tensor({2, 3, 4}, rng), false);
    ag::Var kv = ag::leaf(random_tensor({2, 1, 4}, rng), false);
    ag::Var out = mhc(q, kv, kv, p);
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t t = 0; t < 3; ++t)
            for (int64_t d = 0; d < 4; ++d)
                CHECK(out->value.get((b * 3 + t) * 4 + d) == doctest::Approx(kv->value.get(b * 4 + d)));
}

TEST_CASE("mhc: identical keys give uniform attention (mean of value rows)") {
    RngStream rng(2);
    AttentionParams p = hand_params(2, eye(4), eye(4), eye(4));
    Tensor keys(Shape{1, 5, 4}, DType::F64);
    Tensor row = random_tensor({4}, rng);
    for (int64_t j = 0; j < 5; ++j)
        for (int64_t d = 0; d < 4; ++d) keys.set(j * 4 + d, row.get(d));
    Tensor values = random_tensor({1, 5, 4}, rng);
    ag::Var q = ag::leaf(random_tensor({1, 2, 4}, rng), false);
    ag::Var out = mhc(q, ag::leaf(keys, false), ag::leaf(values, false), p);
    for (int64_t t = 0; t < 2; ++t)
        for (int64_t d = 0; d < 4; ++d) {
            double mean = 0;
            for (int64_t j = 0; j < 5; ++j) mean += values.get(j * 4 + d);
            mean /= 5;
            CHECK(out->value.get(t * 4 + d) == doctest::Approx(mean).epsilon(1e-12));
        }
}

TEST_CASE("mhc: scalar hand-expansion oracle, 1 head, 2 queries, 3 keys") {
    RngStream rng(3);
    const int64_t d = 2;
    Tensor wq = random_tensor({d, d}, rng), wk = random_tensor({d, d}, rng), wv = random_tensor({d, d}, rng);
    AttentionParams p = hand_params(1, wq, wk, wv);
    Tensor qs = random_tensor({1, 2, d}, rng), ks = random_tensor({1, 3, d}, rng);
    ag::Var out = mhc(ag::leaf(qs, false), ag::leaf(ks, false), ag::leaf(ks, false), p);

    // scalar oracle
    auto proj = [&](const Tensor& x, const Tensor& w, int64_t row, double* dst) {
        for (int64_t j = 0; j < d; ++j) {
            dst[j] = 0;
            for (int64_t i = 0; i < d; ++i) dst[j] += x.get(row * d + i) * w.get(i * d + j);
        }
    };
    for (int64_t t = 0; t < 2; ++t) {
        double q[2], k[3][2], v[3][2], s[3];
        proj(qs, wq, t, q);
        for (int64_t j = 0; j < 3; ++j) {
            proj(ks, wk, j, k[j]);
            proj(ks, wv, j, v[j]);
            s[j] = (q[0] * k[j][0] + q[1] * k[j][1]) / std::sqrt(2.0);
        }
        const double mx = std::max({s[0], s[1], s[2]});
        double sum = 0;
        for (double& x : s) {
            x = std::exp(x - mx);
            sum += x;
        }
        for (int64_t dd = 0; dd < d; ++dd) {
            double expect = 0;
            for (int64_t j = 0; j < 3; ++j) expect += s[j] / sum * v[j][dd];
            CHECK(out->value.get(t * d + dd) == doctest::Approx(expect).epsilon(1e-10));
        }
    }
}

TEST_CASE("mhsc: k >= n_keys is bitwise equal to mhc, same trace support") {
    RngStream rng(4);
    AttentionParams p = hand_params(2, random_tensor({6, 6}, rng), random_tensor({6, 6}, rng),
                                    random_tensor({6, 6}, rng));
    ag::Var q = ag::leaf(random_tensor({2, 3, 6}, rng), false);
    ag::Var kv = ag::leaf(random_tensor({2, 4, 6}, rng), false);
    TraceSink dense_sink, sparse_sink;
    AttnOptions dense_opt;
    dense_opt.sink = &dense_sink;
    ag::Var dense = mhc(q, kv, kv, p, dense_opt);
    AttnOptions opt;
    opt.top_k = 4;  // == n_keys
    opt.sink = &sparse_sink;
    ag::Var sparse = mhsc(q, kv, kv, p, opt);
    CHECK(dense->value.bit_equal(sparse->value));
    CHECK(dense_sink.traces[0].probs.bit_equal(sparse_sink.traces[0].probs));
}

TEST_CASE("mhsc: post-softmax top-k without renormalization (softmax+mask oracle)") {
    // one head, head dim 1, logits equal to the keys themselves
    Tensor one = Tensor::from({1, 1}, {1.0}, DType::F64);
    AttentionParams p = hand_params(1, one, one, one);
    ag::Var q = ag::leaf(Tensor::from({1, 1, 1}, {1.0}, DType::F64), false);
    ag::Var kv = ag::leaf(Tensor::from({1, 3, 1}, {2.0, 1.0, 0.0}, DType::F64), false);
    TraceSink sink;
    AttnOptions opt;
    opt.top_k = 2;
    opt.sink = &sink;
    mhsc(q, kv, kv, p, opt);
    const Tensor& w = sink.traces[0].probs;  // [1,1,1,3]
    const double e2 = std::exp(2.0), e1 = std::exp(1.0), e0 = 1.0, sum = e2 + e1 + e0;
    CHECK(w.get(0) == doctest::Approx(e2 / sum).epsilon(1e-12));
    CHECK(w.get(1) == doctest::Approx(e1 / sum).epsilon(1e-12));
    CHECK(w.get(2) == 0.0);
    CHECK(w.get(0) + w.get(1) == doctest::Approx(0.91).epsilon(1e-3));  // 0.665 + 0.245, not renormalized
}

TEST_CASE("mhsc: k=1 picks the argmax key (argmax oracle)") {
    RngStream rng(5);
    AttentionParams p = hand_params(1, eye(3), eye(3), eye(3));
    ag::Var q = ag::leaf(random_tensor({1, 2, 3}, rng), false);
    ag::Var kv = ag::leaf(random_tensor({1, 5, 3}, rng), false);
    TraceSink sink;
    AttnOptions opt;
    opt.top_k = 1;
    opt.sink = &sink;
    ag::Var out = mhsc(q, kv, kv, p, opt);
    const Tensor& w = sink.traces[0].probs;  // [1,1,2,5]
    for (int64_t t = 0; t < 2; ++t) {
        int64_t arg = 0;
        double best = -1;
        double weight = 0;
        for (int64_t j = 0; j < 5; ++j) {
            const double v = w.get(t * 5 + j);
            if (v > best) {
                best = v;
                arg = j;
            }
            if (v != 0) weight = v;
        }
        for (int64_t d = 0; d < 3; ++d)
            CHECK(out->value.get(t * 3 + d) ==
                  doctest::Approx(weight * kv->value.get(arg * 3 + d)).epsilon(1e-12));
    }
}

TEST_CASE("trace invariants + support equals dense top-k, pre/post softmax agree") {
    RngStream rng(6);
    for (int trial = 0; trial < 30; ++trial) {
        AttentionParams p = hand_params(2, random_tensor({4, 4}, rng), random_tensor({4, 4}, rng),
                                        random_tensor({4, 4}, rng));
        ag::Var q = ag::leaf(random_tensor({2, 3, 4}, rng), false);
        ag::Var kv = ag::leaf(random_tensor({2, 6, 4}, rng), false);
        const int64_t k = 1 + static_cast<int64_t>(rng.below(5));
        TraceSink dsink, ssink;
        AttnOptions dopt;
        dopt.sink = &dsink;
        mhc(q, kv, kv, p, dopt);
        AttnOptions sopt;
        sopt.top_k = k;
        sopt.sink = &ssink;
        mhsc(q, kv, kv, p, sopt);
        const Tensor& dense = dsink.traces[0].probs;
        const Tensor& sparse = ssink.traces[0].probs;
        const int64_t rows = dense.numel() / 6;
        // pre-softmax logits for argmax-set invariance
        ag::Var qh = ag::reshape(ag::permute(ag::reshape(ag::matmul(q, p.wq), {2, 3, 2, 2}), {0, 2, 1, 3}),
                                 {2, 2, 3, 2});
        ag::Var kh = ag::reshape(ag::permute(ag::reshape(ag::matmul(kv, p.wk), {2, 6, 2, 2}), {0, 2, 1, 3}),
                                 {2, 2, 6, 2});
        Tensor logits = matmul(qh->value, transpose_last2(kh->value));
        Tensor pre_mask = top_k_mask(logits, k, -1);
        Tensor post_mask = top_k_mask(dense, k, -1);
        CHECK(pre_mask.bit_equal(post_mask));  // softmax is monotone per row
        for (int64_t r = 0; r < rows; ++r) {
            double dsum = 0;
            int64_t nonzeros = 0;
            for (int64_t j = 0; j < 6; ++j) {
                dsum += dense.get(r * 6 + j);
                const double v = sparse.get(r * 6 + j);
                if (v != 0) {
                    ++nonzeros;
                    CHECK(post_mask.get(r * 6 + j) == 1.0);   // support == dense top-k
                    CHECK(v == dense.get(r * 6 + j));          // unrenormalized values
                }
            }
            CHECK(std::abs(dsum - 1.0) <= 1e-9);
            CHECK(nonzeros <= k);
        }
    }
}

TEST_CASE("permuting key/value rows permutes trace columns, output unchanged") {
    RngStream rng(7);
    AttentionParams p = hand_params(2, random_tensor({4, 4}, rng), random_tensor({4, 4}, rng),
                                    random_tensor({4, 4}, rng));
    ag::Var q = ag::leaf(random_tensor({1, 3, 4}, rng), false);
    Tensor kv = random_tensor({1, 5, 4}, rng);
    const int64_t perm[5] = {3, 0, 4, 1, 2};
    Tensor kv_perm(Shape{1, 5, 4}, DType::F64);
    for (int64_t j = 0; j < 5; ++j)
        for (int64_t d = 0; d < 4; ++d) kv_perm.set(j * 4 + d, kv.get(perm[j] * 4 + d));
    TraceSink s1, s2;
    AttnOptions o1, o2;
    o1.top_k = o2.top_k = 2;
    o1.sink = &s1;
    o2.sink = &s2;
    ag::Var out1 = mhsc(q, ag::leaf(kv, false), ag::leaf(kv, false), p, o1);
    ag::Var out2 = mhsc(q, ag::leaf(kv_perm, false), ag::leaf(kv_perm, false), p, o2);
    for (int64_t i = 0; i < out1->value.numel(); ++i)
        CHECK(out1->value.get(i) == doctest::Approx(out2->value.get(i)).epsilon(1e-12));
    const Tensor& t1 = s1.traces[0].probs;
    const Tensor& t2 = s2.traces[0].probs;
    const int64_t rows = t1.numel() / 5;
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < 5; ++j)
            CHECK(t2.get(r * 5 + j) == doctest::Approx(t1.get(r * 5 + perm[j])).epsilon(1e-12));
}

TEST_CASE("sparse renormalization variants share the index set") {
    RngStream rng(8);
    AttentionParams p = hand_params(1, random_tensor({3, 3}, rng), random_tensor({3, 3}, rng),
                                    random_tensor({3, 3}, rng));
    ag::Var q = ag::leaf(random_tensor({1, 2, 3}, rng), false);
    ag::Var kv = ag::leaf(random_tensor({1, 5, 3}, rng), false);
    TraceSink none_s, renorm_s, logits_s;
    for (auto [mode, sink] : {std::pair{SparseRenorm::None, &none_s},
                              std::pair{SparseRenorm::Renormalize, &renorm_s},
                              std::pair{SparseRenorm::MaskLogits, &logits_s}}) {
        AttnOptions opt;
        opt.top_k = 2;
        opt.renorm = mode;
        opt.sink = sink;
        mhsc(q, kv, kv, p, opt);
    }
    for (int64_t i = 0; i < none_s.traces[0].probs.numel(); ++i) {
        const bool nz = none_s.traces[0].probs.get(i) != 0;
        CHECK((renorm_s.traces[0].probs.get(i) != 0) == nz);
        CHECK((logits_s.traces[0].probs.get(i) != 0) == nz);
    }
    // renormalized and mask_logits rows sum to 1
    for (auto* s : {&renorm_s, &logits_s})
        for (int64_t r = 0; r < 2; ++r) {
            double sum = 0;
            for (int64_t j = 0; j < 5; ++j) sum += s->traces[0].probs.get(r * 5 + j);
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        }
}

TEST_CASE("attention gradients pass finite differences with frozen top-k") {
    RngStream rng(9);
    for (uint64_t seed = 0; seed < 10; ++seed) {
        ParamStore store;
        AttentionParams p = make_attention_params(store, "attn", 4, 4, 4, 2, true, seed, DType::F64);
        ag::Var q = ag::leaf(random_tensor({1, 3, 4}, rng), true);
        ag::Var kv = ag::leaf(random_tensor({1, 5, 4}, rng), true);
        TopKFreeze freeze;
        auto f = [&] {
            freeze.begin_pass();
            AttnOptions opt;
            opt.top_k = 2;
            opt.freeze = &freeze;
            return ag::sum_all(mhsc(q, kv, kv, p, opt));
        };
        std::vector<ag::Var> leaves = {q, kv, p.wq, p.wk, p.wv, p.wo};
        CHECK(pmi_test::fd_check(f, leaves, 1e-5) <= 1e-4);

        // dense path too
        auto fd_dense = [&] { return ag::sum_all(mhc(q, kv, kv, p)); };
        CHECK(pmi_test::fd_check(fd_dense, leaves, 1e-5) <= 1e-4);
    }
}

TEST_CASE("dimension errors name the projection") {
    RngStream rng(10);
    AttentionParams p = hand_params(1, eye(4), eye(4), eye(4));
    ag::Var q = ag::leaf(random_tensor({1, 2, 3}, rng), false);  // wrong width
    ag::Var kv = ag::leaf(random_tensor({1, 2, 4}, rng), false);
    try {
        mhc(q, kv, kv, p);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        CHECK(std::string(e.what()).find("W^Q") != std::string::npos);
    }
}
