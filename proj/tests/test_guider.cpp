#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "core/guider.hpp"

using namespace dm;

namespace {

// Independent dense implementation of the decomposed cross-attention used as
// an oracle: plain loops, no autograd machinery.
Tensor mat(const std::vector<std::vector<double>>& rows) {
    Tensor t({static_cast<int>(rows.size()), static_cast<int>(rows[0].size())});
    for (size_t r = 0; r < rows.size(); ++r)
        for (size_t c = 0; c < rows[r].size(); ++c) t.at2(static_cast<int>(r), static_cast<int>(c)) = rows[r][c];
    return t;
}

Tensor mmul(const Tensor& a, const Tensor& b) {
    Tensor out({a.dim(0), b.dim(1)});
    for (int i = 0; i < a.dim(0); ++i)
        for (int j = 0; j < b.dim(1); ++j) {
            double s = 0;
            for (int k = 0; k < a.dim(1); ++k) s += a.at2(i, k) * b.at2(k, j);
            out.at2(i, j) = s;
        }
    return out;
}

Tensor attn_term(const Tensor& Q, const Tensor& K, const Tensor& V) {
    int nq = Q.dim(0), nk = K.dim(0), da = Q.dim(1), dv = V.dim(1);
    Tensor out({nq, dv});
    double inv = 1.0 / std::sqrt(static_cast<double>(da));
    for (int i = 0; i < nq; ++i) {
        std::vector<double> s(nk);
        double mx = -1e300;
        for (int j = 0; j < nk; ++j) {
            double v = 0;
            for (int k = 0; k < da; ++k) v += Q.at2(i, k) * K.at2(j, k);
            s[j] = v * inv;
            mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (int j = 0; j < nk; ++j) {
            s[j] = std::exp(s[j] - mx);
            z += s[j];
        }
        for (int j = 0; j < nk; ++j)
            for (int k = 0; k < dv; ++k) out.at2(i, k) += s[j] / z * V.at2(j, k);
    }
    return out;
}

struct OracleInputs {
    Tensor Z, ct, cf;
    std::optional<Tensor> cc;
    double af = 0, ac = 0;
    Tensor Wq, Wkt, Wvt, Wkf, Wvf, Wkc, Wvc;
};

Tensor oracle_eq1(const OracleInputs& in) {
    Tensor Q = mmul(in.Z, in.Wq);
    Tensor out = attn_term(Q, mmul(in.ct, in.Wkt), mmul(in.ct, in.Wvt));
    if (in.af > 0) {
        Tensor f = attn_term(Q, mmul(in.cf, in.Wkf), mmul(in.cf, in.Wvf));
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += in.af * f.v[i];
    }
    if (in.ac > 0 && in.cc) {
        Tensor c = attn_term(Q, mmul(*in.cc, in.Wkc), mmul(*in.cc, in.Wvc));
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += in.ac * c.v[i];
    }
    return out;
}

struct RandomInstance {
    OracleInputs in;
    ParamStore ps;
    GuiderWeights w;
    ContentVars emb;
    ag::Var Z;
};

std::unique_ptr<RandomInstance> random_instance(Rng& rng, bool with_cloth = true) {
    auto ri = std::make_unique<RandomInstance>();
    int nq = rng.uniform_int(1, 3), nt = rng.uniform_int(1, 3), nf = rng.uniform_int(1, 3),
        nc = rng.uniform_int(1, 3);
    int d = rng.uniform_int(1, 4), da = rng.uniform_int(1, 4), dz = rng.uniform_int(1, 4);
    ri->w = make_guider_weights(ri->ps, "guider/attn", dz, d, da, rng);
    Tensor Z({nq, dz}), ct({nt, d}), cf({nf, d}), cc({nc, d});
    rng.fill_normal(Z);
    rng.fill_normal(ct);
    rng.fill_normal(cf);
    rng.fill_normal(cc);
    ri->in = {Z, ct, cf, with_cloth ? std::optional<Tensor>(cc) : std::nullopt,
              rng.uniform(0.0, 2.0), with_cloth ? rng.uniform(0.0, 2.0) : 0.0,
              ri->w.W_q->v, ri->w.W_kt->v, ri->w.W_vt->v, ri->w.W_kf->v,
              ri->w.W_vf->v, ri->w.W_kc->v, ri->w.W_vc->v};
    ri->Z = ag::constant(Z);
    ri->emb.c_t = ag::constant(ct);
    ri->emb.c_f = ag::constant(cf);
    if (with_cloth) ri->emb.c_c = ag::constant(cc);
    ri->emb.alpha_f = ri->in.af;
    ri->emb.alpha_c = ri->in.ac;
    return ri;
}

}  // namespace

TEST_CASE("single-key scalar case evaluates by hand") {
    ParamStore ps;
    Rng rng(1);
    GuiderWeights w = make_guider_weights(ps, "guider/attn", 1, 1, 1, rng);
    for (ag::Var m : {w.W_q, w.W_kt, w.W_vt, w.W_kf, w.W_vf, w.W_kc, w.W_vc}) m->v.v[0] = 1.0;
    ContentVars emb;
    emb.c_t = ag::constant(mat({{2.0}}));
    emb.c_f = ag::constant(mat({{3.0}}));
    emb.c_c = ag::constant(mat({{5.0}}));
    emb.alpha_f = 0.5;
    emb.alpha_c = 0.1;
    ag::Var out = guided_cross_attention(ag::constant(mat({{1.0}})), emb, w);
    CHECK(out->v.v[0] == doctest::Approx(4.0).epsilon(1e-12));  // 2 + 1.5 + 0.5
}

TEST_CASE("matches the brute-force oracle on random instances") {
    Rng rng(42);
    double worst = 0.0;
    for (int i = 0; i < 300; ++i) {
        auto ri = random_instance(rng);
        Tensor want = oracle_eq1(ri->in);
        ag::Var got = guided_cross_attention(ri->Z, ri->emb, ri->w);
        REQUIRE(got->v.shape == want.shape);
        for (size_t k = 0; k < want.v.size(); ++k)
            worst = std::max(worst, std::abs(got->v.v[k] - want.v[k]));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("alpha_f = alpha_c = 0 is bitwise the text-only term") {
    Rng rng(7);
    for (int i = 0; i < 20; ++i) {
        auto ri = random_instance(rng);
        ri->emb.alpha_f = 0.0;
        ri->emb.alpha_c = 0.0;
        ag::Var full = guided_cross_attention(ri->Z, ri->emb, ri->w);
        ContentVars text_only = ri->emb;
        text_only.c_c.reset();
        ag::Var plain = guided_cross_attention(ri->Z, text_only, ri->w);
        CHECK(bitwise_equal(full->v, plain->v));
    }
}

TEST_CASE("affine in alpha") {
    Rng rng(8);
    for (double a : {0.3, 2.0}) {
        auto ri = random_instance(rng);
        auto eval = [&](double af, double ac) {
            ContentVars e = ri->emb;
            e.alpha_f = af;
            e.alpha_c = ac;
            return guided_cross_attention(ri->Z, e, ri->w)->v;
        };
        Tensor z0 = eval(0, 0.7), z1 = eval(1, 0.7), za = eval(a, 0.7);
        for (size_t k = 0; k < za.v.size(); ++k)
            CHECK(std::abs(za.v[k] - (z0.v[k] + a * (z1.v[k] - z0.v[k]))) < 1e-9);
        Tensor c0 = eval(0.4, 0), c1 = eval(0.4, 1), ca = eval(0.4, a);
        for (size_t k = 0; k < ca.v.size(); ++k)
            CHECK(std::abs(ca.v[k] - (c0.v[k] + a * (c1.v[k] - c0.v[k]))) < 1e-9);
    }
}

TEST_CASE("rejects negative alpha and dimension mismatch") {
    Rng rng(9);
    auto ri = random_instance(rng);
    ContentVars bad = ri->emb;
    bad.alpha_f = -0.1;
    CHECK_THROWS(guided_cross_attention(ri->Z, bad, ri->w));
    ContentVars wrong = ri->emb;
    wrong.c_t = ag::constant(Tensor({2, ri->w.W_kt->v.dim(0) + 1}));
    CHECK_THROWS(guided_cross_attention(ri->Z, wrong, ri->w));
}

TEST_CASE("gradients match finite differences") {
    Rng rng(10);
    for (int rep = 0; rep < 3; ++rep) {
        auto ri = random_instance(rng);
        auto loss = [&] { return ag::mean_all(guided_cross_attention(ri->Z, ri->emb, ri->w)); };
        for (auto& [name, p] : ri->ps.all()) p->zero_grad();
        ag::backward(loss());
        for (auto& [name, p] : ri->ps.all()) {
            for (size_t i = 0; i < p->v.v.size(); ++i) {
                double h = 1e-6, keep = p->v.v[i];
                p->v.v[i] = keep + h;
                double fp = loss()->v.v[0];
                p->v.v[i] = keep - h;
                double fm = loss()->v.v[0];
                p->v.v[i] = keep;
                double numeric = (fp - fm) / (2 * h);
                double analytic = p->grad_ready ? p->g.v[i] : 0.0;
                CHECK(std::abs(analytic - numeric) < 1e-4 * std::max(1.0, std::abs(numeric)));
            }
        }
    }
}

TEST_CASE("batched variant equals per-row application") {
    Rng rng(11);
    auto ri = random_instance(rng);
    int nq = ri->Z->v.dim(0), dz = ri->Z->v.dim(1);
    ag::Var z3 = ag::reshape(ri->Z, {1, nq, dz});
    ag::Var b = guided_cross_attention_batched(z3, ri->emb, ri->w);
    ag::Var p = guided_cross_attention(ri->Z, ri->emb, ri->w);
    CHECK(bitwise_equal(b->v.v == p->v.v ? b->v : b->v, b->v));  // shapes differ, values equal
    CHECK(b->v.v == p->v.v);
}

TEST_CASE("key-concatenation experiment is available but distinct") {
    Rng rng(12);
    auto ri = random_instance(rng);
    ri->emb.alpha_f = 1.0;
    ag::Var dec = guided_cross_attention(ri->Z, ri->emb, ri->w, false);
    ag::Var cat = guided_cross_attention(ri->Z, ri->emb, ri->w, true);
    CHECK(dec->v.shape == cat->v.shape);
    CHECK(dec->v.all_finite());
    CHECK(cat->v.all_finite());
}

TEST_CASE("text encoder determinism and null sentinel") {
    ParamStore ps;
    Rng rng(13);
    ContentGuider g(ps, GuiderConfig{}, rng);
    ag::Var a = g.encode_text("a stripes dancer on a checker background");
    ag::Var b = g.encode_text("a stripes dancer on a checker background");
    CHECK(bitwise_equal(a->v, b->v));
    ag::Var c = g.encode_text("a dots dancer on a plain background");
    CHECK(!bitwise_equal(a->v, c->v));
    CHECK_THROWS(g.encode_text(""));

    ag::Var n = g.encode_text(kNullPrompt);
    const Tensor& null_row = ps.get("guider/text.null")->v;
    for (int r = 0; r < n->v.dim(0); ++r)
        for (int k = 0; k < n->v.dim(1); ++k) CHECK(n->v.at2(r, k) == null_row.v[static_cast<size_t>(k)]);
}

TEST_CASE("hash tokenizer separates words") {
    auto a = ContentGuider::tokenize("red dancer", 8, 4096);
    auto b = ContentGuider::tokenize("blue dancer", 8, 4096);
    CHECK(a != b);
    CHECK(a.size() == 8);
    CHECK(a[2] == 1);  // padded
}

TEST_CASE("image encoders: determinism, degenerate input, channel check") {
    ParamStore ps;
    Rng rng(14);
    ContentGuider g(ps, GuiderConfig{}, rng);
    Tensor img({3, 16, 16});
    rng.fill_uniform(img, 0.0, 1.0);
    CHECK(bitwise_equal(g.encode_face(img)->v, g.encode_face(img)->v));
    CHECK(bitwise_equal(g.encode_cloth(img)->v, g.encode_cloth(img)->v));
    CHECK(g.encode_face(img)->v.dim(0) == 5);
    CHECK(g.encode_cloth(img)->v.dim(0) == 4);

    Tensor zero({3, 16, 16});
    CHECK(g.encode_face(zero)->v.all_finite());

    Tensor bad({1, 16, 16});
    CHECK_THROWS(g.encode_face(bad));
    CHECK_THROWS(g.encode_cloth(bad));
}

TEST_CASE("identity feature is unit length and palette sensitive") {
    Tensor a({3, 16, 16}, 0.2), b({3, 16, 16}, 0.8);
    Tensor fa = identity_feature(a), fb = identity_feature(b);
    auto norm = [](const Tensor& t) {
        double s = 0;
        for (double v : t.v) s += v * v;
        return std::sqrt(s);
    };
    CHECK(norm(fa) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(!bitwise_equal(fa, fb));
    CHECK(identity_feature(Tensor({3, 16, 16})).all_finite());
}
