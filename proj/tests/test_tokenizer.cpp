#include <cmath>

#include "doctest.h"
#include "occ4d/errors.hpp"
#include "occ4d/tokenizer.hpp"
#include "occ4d/toyworld.hpp"
#include "support.hpp"

using namespace occ4d;
using nn::NodePtr;
using nn::Tensor;

namespace {

tok::TokenizerConfig tiny_config() {
    tok::TokenizerConfig cfg;
    cfg.num_classes = 4;
    cfg.grid_depth = 2;
    cfg.class_embed_dim = 2;
    cfg.levels = 1;
    cfg.latent_channels = 3;
    cfg.codebook_size = 5;
    cfg.attn_groups = 2;
    cfg.commitment_beta = 0.25;
    cfg.dropout = 0.0;
    cfg.dead_code_steps = 0;
    return cfg;
}

tok::TokenizerConfig toy_config() {
    tok::TokenizerConfig cfg;  // defaults match the toy world
    cfg.dropout = 0.0;
    cfg.dead_code_steps = 0;
    return cfg;
}

core::OccupancySequence random_toy_clip(uint64_t seed, core::GridDims d, int num_classes) {
    nn::Rng rng(seed);
    std::vector<uint8_t> labels(d.voxels());
    for (auto& l : labels) l = static_cast<uint8_t>(rng.uniform_index(num_classes));
    return core::OccupancySequence(d, std::move(labels),
                                   core::ClassVocabulary::for_class_count(num_classes));
}

// zero every bias-like (rank-1) tensor plus the class embedding
void zero_biases_and_embedding(const tok::Tokenizer& model) {
    for (const auto& p : model.parameters())
        if (p->value.rank() == 1 || p->name == "class_embed")
            std::fill(p->value.v.begin(), p->value.v.end(), 0.0);
}

}  // namespace

TEST_CASE("compression ratio arithmetic") {
    CHECK(tok::compression_ratio({32, 200, 200}, {4, 25, 25}) == 512.0);
    CHECK(tok::compression_ratio({8, 16, 16}, {8, 16, 16}) == 1.0);
    CHECK(tok::compression_ratio({12, 200, 200}, {3, 50, 50}) == 64.0);
    CHECK_THROWS_AS(tok::compression_ratio({0, 1, 1}, {1, 1, 1}), ConfigError);
}

TEST_CASE("encoded cell shape algebra") {
    CHECK(tok::TokenizerConfig::encoded_cells({32, 200, 200}, 3) == std::array<int, 3>{4, 25, 25});
    CHECK(tok::TokenizerConfig::encoded_cells({8, 16, 16}, 2) == std::array<int, 3>{2, 4, 4});
}

TEST_CASE("config validation names the offending field") {
    tok::TokenizerConfig cfg = toy_config();
    core::GridDims bad{6, 16, 16, 4};  // 6 not divisible by 4
    CHECK_THROWS_WITH_AS(cfg.validate(bad), doctest::Contains("world.dims.T"), ConfigError);
    core::GridDims bad_h{8, 15, 16, 4};
    CHECK_THROWS_WITH_AS(cfg.validate(bad_h), doctest::Contains("world.dims.H"), ConfigError);
    CHECK_NOTHROW(cfg.validate({8, 16, 16, 4}));
}

TEST_CASE("embed_categories looks up rows and folds depth into channels") {
    SUBCASE("single voxel, D=1") {
        tok::TokenizerConfig cfg = tiny_config();
        cfg.grid_depth = 1;
        auto model = tok::Tokenizer::init(cfg, 1);
        core::GridDims d{2, 2, 2, 1};
        auto clip = random_toy_clip(3, d, cfg.num_classes);
        const NodePtr e = model.embed_categories(clip);
        REQUIRE(e->value.shape == std::vector<int>{cfg.class_embed_dim, 2, 2, 2});
        // channels at each site equal the embedding row of its label
        const auto params = model.parameters();
        const Tensor& table = params[0]->value;  // class_embed is first
        for (int t = 0; t < 2; ++t)
            for (int h = 0; h < 2; ++h)
                for (int w = 0; w < 2; ++w) {
                    const int lab = clip.at(t, h, w, 0);
                    for (int j = 0; j < cfg.class_embed_dim; ++j)
                        CHECK(e->value.at({j, t, h, w}) == table.at({lab, j}));
                }
    }

    SUBCASE("all-empty grid tiles the empty-class vector") {
        auto model = tok::Tokenizer::init(toy_config(), 2);
        auto clip = core::OccupancySequence::empty({8, 16, 16, 4}, core::ClassVocabulary::toy8());
        const NodePtr e = model.embed_categories(clip);
        const Tensor& table = model.parameters()[0]->value;
        // every spatial column carries the tiled empty-class vector
        for (int d = 0; d < 4; ++d)
            for (int j = 0; j < 2; ++j)
                CHECK(e->value.at({d * 2 + j, 0, 0, 0}) == table.at({0, j}));
    }

    SUBCASE("shape algebra: (8,16,16,4) with c'=2 folds to 8 channels") {
        auto model = tok::Tokenizer::init(toy_config(), 2);
        auto clip = random_toy_clip(4, {8, 16, 16, 4}, 8);
        const NodePtr e = model.embed_categories(clip);
        CHECK(e->value.shape == std::vector<int>{8, 8, 16, 16});
    }
}

TEST_CASE("encode produces the contracted latent shape") {
    auto model = tok::Tokenizer::init(toy_config(), 5);
    auto clip = random_toy_clip(6, {8, 16, 16, 4}, 8);
    const Tensor latent = model.encode(clip);
    CHECK(latent.shape == std::vector<int>{16, 2, 4, 4});

    // indivisible dims are rejected
    auto bad_clip = random_toy_clip(7, {8, 10, 16, 4}, 8);
    CHECK_THROWS_AS(model.encode(bad_clip), ConfigError);
}

TEST_CASE("zero input with zero biases propagates to a zero latent") {
    auto model = tok::Tokenizer::init(toy_config(), 8);
    zero_biases_and_embedding(model);
    auto clip = core::OccupancySequence::empty({8, 16, 16, 4}, core::ClassVocabulary::toy8());
    const Tensor latent = model.encode(clip);
    for (double v : latent.v) CHECK(v == 0.0);
}

TEST_CASE("quantize nearest-code semantics") {
    auto model = tok::Tokenizer::init(tiny_config(), 9);

    SUBCASE("hand-computed distances pick index 1") {
        tok::TokenizerConfig cfg = tiny_config();
        cfg.latent_channels = 2;
        cfg.codebook_size = 2;
        auto m2 = tok::Tokenizer::init(cfg, 10);
        m2.codebook()->value = Tensor::from({2, 2}, {0.0, 0.0, 1.0, 1.0});
        Tensor latent = Tensor::from({2, 1, 1, 1}, {0.9, 0.8});
        const auto grid = m2.quantize(latent);
        CHECK(grid.code_indices == std::vector<int>{1});
        CHECK(grid.values.v[0] == 1.0);
        CHECK(grid.values.v[1] == 1.0);

        // equidistant tie resolves to the lowest index
        Tensor mid = Tensor::from({2, 1, 1, 1}, {0.5, 0.5});
        CHECK(m2.quantize(mid).code_indices == std::vector<int>{0});

        // exact code hit is bit-equal
        Tensor exact = Tensor::from({2, 1, 1, 1}, {1.0, 1.0});
        const auto hit = m2.quantize(exact);
        CHECK(hit.code_indices == std::vector<int>{1});
        CHECK(hit.values.v[0] == 1.0);
    }

    SUBCASE("idempotence: quantizing quantized values returns the same indices") {
        nn::Rng rng(12);
        for (int it = 0; it < 20; ++it) {
            Tensor latent({3, 2, 2, 1});
            rng.fill_normal(latent.data(), latent.v.size());
            const auto grid = model.quantize(latent);
            const auto again = model.quantize(grid.values);
            CHECK(again.code_indices == grid.code_indices);
            CHECK(again.values.v == grid.values.v);
        }
    }
}

TEST_CASE("decode mirrors the encoder and tie-breaks argmax to class 0") {
    auto model = tok::Tokenizer::init(toy_config(), 13);

    SUBCASE("shape contract") {
        Tensor tokens({16, 2, 4, 4});
        nn::Rng rng(14);
        rng.fill_normal(tokens.data(), tokens.v.size());
        const Tensor logits = model.decode({tokens, {}});
        CHECK(logits.shape == std::vector<int>{8, 8, 16, 16, 4});
    }

    SUBCASE("zero tokens and zero weights give uniform logits, argmax class 0") {
        for (const auto& p : model.parameters())
            std::fill(p->value.v.begin(), p->value.v.end(), 0.0);
        Tensor tokens({16, 2, 4, 4}, 0.0);
        const Tensor logits = model.decode({tokens, {}});
        for (double v : logits.v) CHECK(v == 0.0);
        const auto seq = model.logits_to_sequence(logits, core::ClassVocabulary::toy8());
        for (uint8_t l : seq.labels()) CHECK(l == 0);
    }
}

TEST_CASE("encode-decode restores the class/voxel shape for random divisible dims") {
    nn::Rng rng(15);
    for (int it = 0; it < 5; ++it) {
        tok::TokenizerConfig cfg = tiny_config();
        cfg.levels = 1 + (int)rng.uniform_index(2);
        const int div = 1 << cfg.levels;
        core::GridDims d{div * (1 + (int)rng.uniform_index(2)),
                         div * (1 + (int)rng.uniform_index(2)),
                         div * (1 + (int)rng.uniform_index(2)), cfg.grid_depth};
        auto model = tok::Tokenizer::init(cfg, 16 + it);
        auto clip = random_toy_clip(20 + it, d, cfg.num_classes);
        const Tensor logits = model.decode(model.quantize(model.encode(clip)));
        CHECK(logits.shape == std::vector<int>{cfg.num_classes, d.T, d.H, d.W, d.D});
    }
}

TEST_CASE("tokenizer loss parts") {
    SUBCASE("zero model with a zero code: recon = ln(num_classes), codebook = commit = 0") {
        auto model = tok::Tokenizer::init(toy_config(), 17);
        for (const auto& p : model.parameters())
            std::fill(p->value.v.begin(), p->value.v.end(), 0.0);
        auto clip = random_toy_clip(18, {8, 16, 16, 4}, 8);
        const auto parts = model.loss(clip);
        CHECK(parts.recon == doctest::Approx(std::log(8.0)).epsilon(1e-12));
        CHECK(parts.codebook == 0.0);
        CHECK(parts.commit == 0.0);
        CHECK(parts.total == doctest::Approx(std::log(8.0)).epsilon(1e-12));
    }

    SUBCASE("commitment_beta = 0 removes the commit term") {
        tok::TokenizerConfig cfg = tiny_config();
        auto clip = random_toy_clip(19, {2, 2, 2, cfg.grid_depth}, cfg.num_classes);

        cfg.commitment_beta = 0.0;
        auto m0 = tok::Tokenizer::init(cfg, 20);
        const auto p0 = m0.loss(clip);
        CHECK(p0.commit == 0.0);
        CHECK(p0.total == doctest::Approx(p0.recon + p0.codebook).epsilon(1e-12));

        cfg.commitment_beta = 0.25;
        auto m1 = tok::Tokenizer::init(cfg, 20);  // same seed, same params
        const auto p1 = m1.loss(clip);
        CHECK(p1.recon == doctest::Approx(p0.recon).epsilon(1e-12));
        CHECK(p1.codebook == doctest::Approx(p0.codebook).epsilon(1e-12));
        CHECK(p1.commit > 0.0);
        CHECK(p1.total == doctest::Approx(p0.total + p1.commit).epsilon(1e-10));
    }

    SUBCASE("all terms are non-negative") {
        auto model = tok::Tokenizer::init(tiny_config(), 21);
        auto clip = random_toy_clip(22, {2, 2, 2, 2}, 4);
        const auto parts = model.loss(clip);
        CHECK(parts.recon >= 0.0);
        CHECK(parts.codebook >= 0.0);
        CHECK(parts.commit >= 0.0);
    }
}

TEST_CASE("straight-through: recon gradient at the latent equals the values gradient") {
    auto model = tok::Tokenizer::init(tiny_config(), 23);
    auto clip = random_toy_clip(24, {2, 2, 2, 2}, 4);
    const auto g = model.loss_graph(clip);
    nn::backward(g.recon);
    REQUIRE(g.latent->grad.same_shape(g.values->grad));
    for (long long i = 0; i < g.latent->grad.numel(); ++i)
        CHECK(g.latent->grad.v[i] == g.values->grad.v[i]);
}

TEST_CASE("stop-gradients: codebook term reaches only the codebook, commit only the encoder") {
    auto model = tok::Tokenizer::init(tiny_config(), 25);
    auto clip = random_toy_clip(26, {2, 2, 2, 2}, 4);

    SUBCASE("codebook term sends nothing to the encoder path") {
        const auto g = model.loss_graph(clip);
        nn::backward(g.codebook);
        for (long long i = 0; i < g.latent->grad.numel(); ++i) CHECK(g.latent->grad.v[i] == 0.0);
        double cb_norm = 0.0;
        for (double v : model.codebook()->grad.v) cb_norm += v * v;
        CHECK(cb_norm > 0.0);
    }

    SUBCASE("commit term sends nothing to the codebook") {
        const auto g = model.loss_graph(clip);
        nn::backward(g.commit);
        for (double v : model.codebook()->grad.v) CHECK(v == 0.0);
        double lat_norm = 0.0;
        for (double v : g.latent->grad.v) lat_norm += v * v;
        CHECK(lat_norm > 0.0);
    }
}

TEST_CASE("gradient exactness on FD-valid objectives (small model)") {
    auto model = tok::Tokenizer::init(tiny_config(), 27);
    auto clip = random_toy_clip(28, {2, 2, 2, 2}, 4);
    std::vector<int> labels(clip.labels().begin(), clip.labels().end());
    const auto cfg = model.config();

    // continuous path: every parameter except the codebook
    SUBCASE("encoder + decoder + embedding through the continuous latent") {
        Tensor pull({cfg.latent_channels, 1 * 1 * 1}, 0.2);
        auto loss_fn = [&]() {
            NodePtr latent = model.encode_graph(clip);
            NodePtr flat = nn::reshape(latent, {cfg.latent_channels, 1});
            NodePtr logits = model.decode_graph(latent);
            NodePtr logits2 = nn::reshape(logits, {cfg.num_classes, (int)clip.dims().voxels()});
            return nn::add(nn::cross_entropy_mean(logits2, labels),
                           nn::mse(flat, nn::constant(pull)));
        };
        std::vector<NodePtr> params;
        for (const auto& p : model.parameters())
            if (p->name != "codebook") params.push_back(p);
        const auto res = test::gradcheck(loss_fn, params);
        CAPTURE(res.worst_param);
        CHECK(res.max_rel_err < 1e-4);
    }

    // codebook rows through a fixed-index lookup
    SUBCASE("codebook through gathered codes") {
        const std::vector<int> idx{0, 2, 4, 1};  // not all rows: unused rows check zero-vs-zero
        Tensor pull({4, cfg.latent_channels}, -0.1);
        auto loss_fn = [&]() {
            NodePtr codes = nn::gather_rows(model.codebook(), idx);  // (4, c)
            NodePtr tokens = nn::reshape(nn::transpose2(codes),
                                         {cfg.latent_channels, 2, 2, 1});
            NodePtr logits = model.decode_graph(tokens);
            const auto& s = logits->value.shape;
            NodePtr logits2 = nn::reshape(
                logits, {cfg.num_classes, s[1] * s[2] * s[3] * s[4]});
            std::vector<int> big_labels(static_cast<size_t>(s[1]) * s[2] * s[3] * s[4]);
            for (size_t i = 0; i < big_labels.size(); ++i)
                big_labels[i] = static_cast<int>(i % cfg.num_classes);
            return nn::add(nn::cross_entropy_mean(logits2, big_labels),
                           nn::mse(codes, nn::constant(pull)));
        };
        const auto res = test::gradcheck(loss_fn, {model.codebook()});
        CAPTURE(res.worst_param);
        CHECK(res.max_rel_err < 1e-4);
    }
}

TEST_CASE("train step contracts") {
    auto clip = random_toy_clip(30, {2, 2, 2, 2}, 4);

    SUBCASE("lr = 0 leaves parameters unchanged but updates usage counts") {
        tok::TokenizerTrainer trainer(tok::Tokenizer::init(tiny_config(), 29), 0.0, 0.01, 7);
        std::vector<Tensor> before;
        for (const auto& p : trainer.model().parameters()) before.push_back(p->value);
        trainer.step({&clip});
        const auto params = trainer.model().parameters();
        for (size_t i = 0; i < params.size(); ++i) CHECK(params[i]->value.v == before[i].v);
        long long used = 0;
        for (long long u : trainer.model().usage_counts()) used += u;
        CHECK(used == 1);  // one count per latent site; tiny config has one site
    }

    SUBCASE("training drives the loss down on a fixed clip") {
        tok::TokenizerTrainer trainer(tok::Tokenizer::init(tiny_config(), 31), 2e-3, 0.0, 7);
        const double before = trainer.model().loss(clip).total;
        for (int i = 0; i < 100; ++i) trainer.step({&clip});
        CHECK(trainer.model().loss(clip).total < 0.5 * before);
    }

    SUBCASE("empty batch is rejected") {
        tok::TokenizerTrainer trainer(tok::Tokenizer::init(tiny_config(), 32), 1e-3, 0.0, 7);
        CHECK_THROWS_AS(trainer.step({}), DataError);
    }
}

TEST_CASE("dead codes are refreshed from batch latents") {
    tok::TokenizerConfig cfg = tiny_config();
    cfg.dead_code_steps = 2;
    cfg.codebook_size = 16;  // plenty of codes stay unused on one tiny clip
    auto clip = random_toy_clip(33, {2, 2, 2, 2}, 4);
    tok::TokenizerTrainer trainer(tok::Tokenizer::init(cfg, 34), 1e-4, 0.0, 7);

    const Tensor before = trainer.model().codebook()->value;
    for (int i = 0; i < 3; ++i) trainer.step({&clip});
    const Tensor& after = trainer.model().codebook()->value;

    int moved = 0;
    for (int n = 0; n < cfg.codebook_size; ++n) {
        bool same = true;
        for (int j = 0; j < cfg.latent_channels; ++j)
            if (before.at({n, j}) != after.at({n, j})) same = false;
        if (!same) ++moved;
    }
    CHECK(moved > 0);
}

TEST_CASE("checkpoint save/load resumes bit-identically") {
    const std::string dir = test::scratch_dir("tok_ckpt");
    auto clip = random_toy_clip(35, {2, 2, 2, 2}, 4);

    tok::TokenizerTrainer a(tok::Tokenizer::init(tiny_config(), 36), 1e-3, 0.01, 7);
    for (int i = 0; i < 3; ++i) a.step({&clip});
    const std::string path = dir + "/tok.otk1";
    a.save_checkpoint(path);

    // continue the original
    std::vector<double> a_losses;
    for (int i = 0; i < 4; ++i) a_losses.push_back(a.step({&clip}).total);

    // resume from the file
    auto b = tok::TokenizerTrainer::load_checkpoint(path);
    CHECK(b.step_count() == 3);
    for (int i = 0; i < 4; ++i) {
        const double lb = b.step({&clip}).total;
        CHECK(lb == a_losses[i]);  // bit-identical: saving rounded the live state
    }

    CHECK_THROWS_AS(tok::TokenizerTrainer::load_checkpoint(dir + "/missing.otk1"), DataError);
}
