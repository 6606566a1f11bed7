#include <cmath>

#include "doctest.h"
#include "occ4d/errors.hpp"
#include "occ4d/nn/autodiff.hpp"
#include "occ4d/nn/checkpoint.hpp"
#include "occ4d/nn/optim.hpp"
#include "support.hpp"

using namespace occ4d;
using nn::NodePtr;
using nn::Tensor;

namespace {

NodePtr rand_param(nn::Rng& rng, std::vector<int> shape, const std::string& name) {
    Tensor t(shape);
    rng.fill_normal(t.data(), t.v.size(), 0.5);
    return nn::param(std::move(t), name);
}

Tensor rand_tensor(nn::Rng& rng, std::vector<int> shape) {
    Tensor t(shape);
    rng.fill_normal(t.data(), t.v.size(), 0.5);
    return t;
}

}  // namespace

TEST_CASE("sinusoidal table matches the closed form") {
    const Tensor emb = nn::sinusoidal_table(4, 3);
    // position 0: sin rows 0, cos rows 1
    CHECK(emb.at({0, 0}) == 0.0);
    CHECK(emb.at({1, 0}) == 1.0);
    CHECK(emb.at({2, 0}) == 0.0);
    CHECK(emb.at({3, 0}) == 1.0);

    const Tensor e2 = nn::sinusoidal_table(2, 2);
    CHECK(e2.at({0, 1}) == doctest::Approx(0.8414709848).epsilon(1e-10));
    CHECK(e2.at({1, 1}) == doctest::Approx(0.5403023059).epsilon(1e-10));

    // range and the Pythagorean identity per (pair, position)
    const Tensor e3 = nn::sinusoidal_table(8, 5);
    for (double v : e3.v) {
        CHECK(v <= 1.0);
        CHECK(v >= -1.0);
    }
    for (int k = 0; k < 4; ++k)
        for (int i = 0; i < 5; ++i) {
            const double s = e3.at({2 * k, i}), c = e3.at({2 * k + 1, i});
            CHECK(s * s + c * c == doctest::Approx(1.0).epsilon(1e-12));
        }

    CHECK_THROWS(nn::sinusoidal_table(3, 2));
}

TEST_CASE("elementwise and broadcast ops pass finite-difference checks") {
    nn::Rng rng(101);
    auto a = rand_param(rng, {3, 4}, "a");
    auto b = rand_param(rng, {3, 4}, "b");
    auto v = rand_param(rng, {4}, "v");
    auto u = rand_param(rng, {3}, "u");
    // keep divisors away from zero
    for (auto& x : b->value.v) x = x < 0 ? x - 0.5 : x + 0.5;

    auto loss_fn = [&]() {
        NodePtr t = nn::add(a, b);
        t = nn::mul(t, nn::silu(nn::sub(a, b)));
        t = nn::div_ew(t, b);
        t = nn::add_rowvec(t, v);
        t = nn::mul_rowvec(t, v);
        t = nn::add_colvec(t, u);
        t = nn::exp_ew(nn::scale(t, 0.1));
        t = nn::add_scalar(t, 0.3);
        return nn::mse(t, nn::constant(Tensor({3, 4}, 0.7)));
    };
    const auto res = test::gradcheck(loss_fn, {a, b, v, u});
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("shape ops pass finite-difference checks") {
    nn::Rng rng(102);
    auto a = rand_param(rng, {2, 3, 4}, "a");
    auto loss_fn = [&]() {
        NodePtr t = nn::permute3(a, {2, 0, 1});       // (4,2,3)
        t = nn::reshape(t, {4, 6});
        t = nn::slice_cols(t, 1, 5);                  // (4,4)
        t = nn::transpose2(t);                        // (4,4)
        return nn::mean_all(nn::mul(t, t));
    };
    const auto res = test::gradcheck(loss_fn, {a});
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("matmul family passes finite-difference checks") {
    nn::Rng rng(103);
    auto a = rand_param(rng, {3, 5}, "a");
    auto b = rand_param(rng, {5, 2}, "b");
    auto ba = rand_param(rng, {2, 3, 4}, "ba");
    auto bb = rand_param(rng, {2, 4, 3}, "bb");
    auto w = rand_param(rng, {4, 4}, "w");

    auto loss_fn = [&]() {
        NodePtr m = nn::matmul(a, b);                  // (3,2)
        NodePtr n = nn::bmm(ba, bb);                   // (2,3,3)
        NodePtr s = nn::bmm_shared(ba, w);             // (2,3,4)
        return nn::add(nn::add(nn::mean_all(nn::mul(m, m)), nn::mean_all(nn::mul(n, n))),
                       nn::mean_all(nn::mul(s, s)));
    };
    const auto res = test::gradcheck(loss_fn, {a, b, ba, bb, w});
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("softmax, layernorm and cross-entropy pass finite-difference checks") {
    nn::Rng rng(104);
    auto x = rand_param(rng, {4, 6}, "x");
    const std::vector<int> labels{1, 0, 3, 2, 1, 0};

    auto loss_fn = [&]() {
        NodePtr sm = nn::softmax_rows(x);
        NodePtr ln = nn::layernorm_rows(x);
        NodePtr ce = nn::cross_entropy_mean(x, labels);  // x as (K=4, V=6)
        return nn::add(ce, nn::add(nn::mean_all(nn::mul(sm, sm)), nn::mse(ln, sm)));
    };
    const auto res = test::gradcheck(loss_fn, {x});
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("cross-entropy closed forms") {
    // uniform logits over K classes -> ln K
    Tensor logits({8, 5}, 0.0);
    const std::vector<int> labels{0, 1, 2, 3, 4};
    const double ce = nn::cross_entropy_mean(nn::constant(logits), labels)->value.v[0];
    CHECK(ce == doctest::Approx(std::log(8.0)).epsilon(1e-12));

    // strongly peaked logits on the true labels -> ~0
    Tensor peaked({3, 2}, 0.0);
    peaked.at({1, 0}) = 50.0;
    peaked.at({2, 1}) = 50.0;
    const double ce2 =
        nn::cross_entropy_mean(nn::constant(peaked), std::vector<int>{1, 2})->value.v[0];
    CHECK(ce2 == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("conv3d forward matches a direct dense oracle") {
    nn::Rng rng(105);
    const int Ci = 2, Co = 3, T = 4, H = 3, W = 5;
    auto x = rand_param(rng, {Ci, T, H, W}, "x");
    auto w = rand_param(rng, {Co, Ci, 3, 3, 3}, "w");
    auto b = rand_param(rng, {Co}, "b");

    for (int stride : {1, 2}) {
        CAPTURE(stride);
        const NodePtr y = nn::conv3d(x, w, b, stride);
        const int oT = (T + 2 - 3) / stride + 1, oH = (H + 2 - 3) / stride + 1,
                  oW = (W + 2 - 3) / stride + 1;
        REQUIRE(y->value.shape == std::vector<int>{Co, oT, oH, oW});
        // dense re-computation, independent loop structure
        for (int o = 0; o < Co; ++o)
            for (int ot = 0; ot < oT; ++ot)
                for (int oh = 0; oh < oH; ++oh)
                    for (int ow = 0; ow < oW; ++ow) {
                        double acc = b->value.v[o];
                        for (int i = 0; i < Ci; ++i)
                            for (int kt = 0; kt < 3; ++kt)
                                for (int kh = 0; kh < 3; ++kh)
                                    for (int kw = 0; kw < 3; ++kw) {
                                        const int t = ot * stride - 1 + kt;
                                        const int h = oh * stride - 1 + kh;
                                        const int ww = ow * stride - 1 + kw;
                                        if (t < 0 || t >= T || h < 0 || h >= H || ww < 0 ||
                                            ww >= W)
                                            continue;
                                        acc += w->value.at({o, i, kt, kh, kw}) *
                                               x->value.at({i, t, h, ww});
                                    }
                        CHECK(y->value.at({o, ot, oh, ow}) == doctest::Approx(acc).epsilon(1e-12));
                    }
    }
}

TEST_CASE("conv3d and conv3d_transpose pass finite-difference checks") {
    nn::Rng rng(106);
    auto x = rand_param(rng, {2, 4, 2, 4}, "x");
    auto w1 = rand_param(rng, {3, 2, 3, 3, 3}, "w1");
    auto b1 = rand_param(rng, {3}, "b1");
    auto w2 = rand_param(rng, {3, 2, 3, 3, 3}, "w2");  // (Ci=3, Co=2, k,k,k)
    auto b2 = rand_param(rng, {2}, "b2");

    auto loss_fn = [&]() {
        NodePtr y = nn::silu(nn::conv3d(x, w1, b1, 2));        // (3,2,1,2)
        NodePtr z = nn::conv3d_transpose(y, w2, b2, 2);        // (2,4,2,4)
        return nn::mse(z, nn::constant(Tensor({2, 4, 2, 4}, 0.1)));
    };
    const auto res = test::gradcheck(loss_fn, {x, w1, b1, w2, b2});
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("conv3d_transpose doubles each spatial side at stride 2") {
    nn::Rng rng(107);
    auto x = rand_param(rng, {2, 2, 3, 4}, "x");
    auto w = rand_param(rng, {2, 5, 3, 3, 3}, "w");
    auto b = rand_param(rng, {5}, "b");
    const NodePtr y = nn::conv3d_transpose(x, w, b, 2);
    CHECK(y->value.shape == std::vector<int>{5, 4, 6, 8});
}

TEST_CASE("embedding, gather and depth_unfold pass finite-difference checks") {
    nn::Rng rng(108);
    auto table = rand_param(rng, {5, 3}, "table");
    const std::vector<uint8_t> labels{0, 2, 4, 1, 3, 0, 2, 2};  // T=2,H=2,W=1,D=2
    auto cb = rand_param(rng, {4, 3}, "cb");
    const std::vector<int> idx{0, 3, 3, 1};
    auto xd = rand_param(rng, {6, 2, 1, 1}, "xd");  // D=3, K=2

    auto loss_fn = [&]() {
        NodePtr e = nn::embed_grid(table, labels, 2, 2, 1, 2);  // (6,2,2,1)
        NodePtr g = nn::gather_rows(cb, idx);                   // (4,3)
        NodePtr u = nn::depth_unfold(xd, 3, 2);                 // (2,2,1,1,3)
        return nn::add(nn::mean_all(nn::mul(e, e)),
                       nn::add(nn::mean_all(nn::mul(g, g)), nn::mean_all(nn::mul(u, u))));
    };
    const auto res = test::gradcheck(loss_fn, {table, cb, xd});
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("embed_grid layout: channel d*cp+j, label row lookup") {
    nn::Rng rng(109);
    auto table = rand_param(rng, {4, 2}, "table");
    // single voxel T=H=W=1, D=1, label 3
    const NodePtr e = nn::embed_grid(table, {3}, 1, 1, 1, 1);
    REQUIRE(e->value.shape == std::vector<int>{2, 1, 1, 1});
    CHECK(e->value.v[0] == table->value.at({3, 0}));
    CHECK(e->value.v[1] == table->value.at({3, 1}));

    CHECK_THROWS(nn::embed_grid(table, {7}, 1, 1, 1, 1));
}

TEST_CASE("nearest_codes matches brute force with lowest-index ties") {
    nn::Rng rng(110);
    const int c = 3, N = 16, S = 64;
    Tensor codebook = rand_tensor(rng, {N, c});
    Tensor latent = rand_tensor(rng, {c, S});

    const auto idx = nn::nearest_codes(latent, codebook);
    for (int s = 0; s < S; ++s) {
        double best = 1e300;
        int best_i = 0;
        for (int n = 0; n < N; ++n) {
            double d2 = 0;
            for (int j = 0; j < c; ++j) {
                const double d = latent.at({j, s}) - codebook.at({n, j});
                d2 += d * d;
            }
            if (d2 < best) {
                best = d2;
                best_i = n;
            }
        }
        CHECK(idx[s] == best_i);
    }

    // constructed tie: two identical codes, equidistant query
    Tensor cb2 = Tensor::from({2, 2}, {0.0, 0.0, 1.0, 1.0});
    Tensor q = Tensor::from({2, 1}, {0.5, 0.5});
    CHECK(nn::nearest_codes(q, cb2)[0] == 0);

    Tensor bad = Tensor::from({2, 1}, {std::nan(""), 0.0});
    CHECK_THROWS(nn::nearest_codes(bad, cb2));
}

TEST_CASE("vq_straight_through passes gradients through unchanged") {
    nn::Rng rng(111);
    auto latent = rand_param(rng, {2, 5}, "latent");
    Tensor codebook = rand_tensor(rng, {6, 2});

    std::vector<int> idx;
    NodePtr snapped = nn::vq_straight_through(latent, codebook, idx);
    REQUIRE(idx.size() == 5);
    for (int s = 0; s < 5; ++s)
        for (int j = 0; j < 2; ++j)
            CHECK(snapped->value.at({j, s}) == codebook.at({idx[s], j}));

    NodePtr loss = nn::mse(snapped, nn::constant(Tensor({2, 5}, 0.3)));
    nn::backward(loss);
    // identity gradient: latent grad equals snapped-output grad elementwise
    for (long long i = 0; i < latent->grad.numel(); ++i)
        CHECK(latent->grad.v[i] == snapped->grad.v[i]);
}

TEST_CASE("dropout semantics") {
    nn::Rng rng(112);
    auto x = rand_param(rng, {10, 10}, "x");

    nn::Rng drop_rng(9);
    NodePtr y = nn::dropout(x, 0.5, drop_rng);
    int zeros = 0;
    for (long long i = 0; i < y->value.numel(); ++i) {
        const double v = y->value.v[i];
        const bool kept = v != 0.0 || x->value.v[i] == 0.0;
        if (!kept) ++zeros;
        if (v != 0.0) CHECK(v == doctest::Approx(2.0 * x->value.v[i]).epsilon(1e-12));
    }
    CHECK(zeros > 10);  // roughly half dropped
    CHECK(zeros < 90);

    NodePtr loss = nn::mean_all(y);
    nn::backward(loss);
    for (long long i = 0; i < x->grad.numel(); ++i) {
        if (y->value.v[i] == 0.0 && x->value.v[i] != 0.0)
            CHECK(x->grad.v[i] == 0.0);
        else
            CHECK(x->grad.v[i] == doctest::Approx(2.0 / 100.0).epsilon(1e-12));
    }

    nn::Rng unused(1);
    CHECK(nn::dropout(x, 0.0, unused) == x);  // rate 0 is the identity node
}

TEST_CASE("backward accumulates across shared subgraphs") {
    auto x = nn::param(Tensor::scalar(3.0), "x");
    NodePtr y = nn::mul(x, x);                   // x^2
    NodePtr z = nn::add(y, nn::scale(x, 2.0));   // x^2 + 2x
    nn::backward(nn::mean_all(z));
    CHECK(x->grad.v[0] == doctest::Approx(2.0 * 3.0 + 2.0));
}

TEST_CASE("detach blocks gradients") {
    auto x = nn::param(Tensor::scalar(2.0), "x");
    NodePtr loss = nn::mean_all(nn::mul(nn::detach(x), x));
    nn::backward(loss);
    CHECK(x->grad.v[0] == doctest::Approx(2.0));  // only the live branch
}

TEST_CASE("AdamW basics") {
    SUBCASE("lr = 0 leaves parameters unchanged") {
        nn::Rng rng(113);
        auto p = rand_param(rng, {4, 4}, "p.w");
        const Tensor before = p->value;
        nn::AdamW opt;
        opt.lr = 0.0;
        opt.init({p});
        nn::zero_grads({p});
        nn::backward(nn::mse(p, nn::constant(Tensor({4, 4}, 1.0))));
        opt.step({p});
        CHECK(p->value.v == before.v);
    }

    SUBCASE("descends a convex quadratic") {
        auto p = nn::param(Tensor({8}, 2.0), "p");
        nn::AdamW opt;
        opt.lr = 1e-2;
        opt.weight_decay = 0.0;
        opt.init({p});
        auto loss_value = [&]() {
            return nn::mse(p, nn::constant(Tensor({8}, 0.0)))->value.v[0];
        };
        double prev = loss_value();
        for (int i = 0; i < 50; ++i) {
            nn::zero_grads({p});
            NodePtr loss = nn::mse(p, nn::constant(Tensor({8}, 0.0)));
            nn::backward(loss);
            opt.step({p});
            const double cur = loss_value();
            CHECK(cur <= prev + 1e-12);
            prev = cur;
        }
    }

    SUBCASE("weight decay skips biases, embeddings and the codebook") {
        auto w = nn::param(Tensor({2, 2}, 1.0), "layer.w");
        auto b = nn::param(Tensor({2}, 1.0), "layer.b");
        auto cb = nn::param(Tensor({2, 2}, 1.0), "codebook");
        auto em = nn::param(Tensor({2, 2}, 1.0), "class_embed");
        nn::AdamW opt;
        CHECK(opt.default_decay_rule(*w));
        CHECK_FALSE(opt.default_decay_rule(*b));
        CHECK_FALSE(opt.default_decay_rule(*cb));
        CHECK_FALSE(opt.default_decay_rule(*em));
    }

    SUBCASE("non-finite gradient names the parameter") {
        auto p = nn::param(Tensor::scalar(1.0), "explosive");
        nn::AdamW opt;
        opt.init({p});
        p->grad = Tensor::scalar(std::nan(""));
        CHECK_THROWS_WITH_AS(opt.step({p}), doctest::Contains("explosive"), NumericError);
    }
}

TEST_CASE("checkpoint container round-trips tensors through float32") {
    const std::string dir = test::scratch_dir("ckpt");
    nn::Rng rng(114);

    nn::CheckpointData data;
    data.config_json = "{\"k\":1}";
    data.rng_state = rng.serialize();
    Tensor t = rand_tensor(rng, {3, 4});
    data.tensors.push_back({"weights", t});

    const std::string path = dir + "/test.bin";
    nn::write_checkpoint(path, "OTK1", data);
    const auto loaded = nn::read_checkpoint(path, "OTK1");
    CHECK(loaded.config_json == data.config_json);
    CHECK(loaded.rng_state == data.rng_state);
    REQUIRE(loaded.tensors.size() == 1);
    CHECK(loaded.tensors[0].name == "weights");
    for (long long i = 0; i < t.numel(); ++i)
        CHECK(loaded.tensors[0].t.v[i] == static_cast<double>(static_cast<float>(t.v[i])));

    CHECK_THROWS_AS(nn::read_checkpoint(path, "ODM1"), DataError);
    CHECK_THROWS_AS(nn::read_checkpoint(dir + "/missing.bin", "OTK1"), DataError);
}

TEST_CASE("rng is deterministic and serializable") {
    nn::Rng a(55), b(55);
    for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());

    const auto state = a.serialize();
    nn::Rng c(0);
    REQUIRE(c.deserialize(state.data(), state.size()));
    for (int i = 0; i < 100; ++i) CHECK(a.normal() == c.normal());
}
