#include "protoseg/encoder.hpp"
#include "protoseg/io.hpp"
#include "protoseg/training.hpp"
#include "test_support.hpp"

using namespace protoseg;
using namespace protoseg::model;
using testing::fixture;
using testing::max_abs_diff;

namespace {

Image random_image(int h, int w, std::uint64_t seed)
{
    Rng rng(seed);
    Image img(h, w);
    for (auto& v : img.values()) v = uniform01(rng);
    return img;
}

VitSpec tiny_vit(int patch = 4)
{
    VitSpec v;
    v.patch = patch;
    v.dim = 8;
    v.depth = 2;
    v.heads = 2;
    v.mlp_hidden = 16;
    v.pos_grid = 3;
    return v;
}

EncoderConfig small_cnn()
{
    EncoderConfig c;
    c.cnn = {4, 6, 5};
    c.init_seed = 3;
    return c;
}

}  // namespace

TEST_CASE("encode is deterministic and finite on zero and random inputs")
{
    const auto state = init_model(small_cnn());
    ad::NoGradGuard g;
    const Image zero(24, 20, 0.0);
    const auto a = encode(zero, state), b = encode(zero, state);
    CHECK(max_abs_diff(a.values.value(), b.values.value()) == 0);
    for (std::uint64_t s = 0; s < 10; ++s) {
        Rng rng(s);
        Image img(17, 23);
        for (auto& v : img.values()) v = uniform(rng, -50, 50);
        const auto f = encode(img, state);
        CHECK(f.values.value().all_finite());
        CHECK(f.grid() == Shape2{5, 6});  // ceil(17/4), ceil(23/4)
    }
}

TEST_CASE("replicate on s equals stack3 on (s, s, s)")
{
    auto cfg = small_cnn();
    const auto rep = init_model(cfg);
    cfg.input_mode = InputMode::stack3;
    const auto stk = init_model(cfg);
    const Image s = random_image(16, 16, 1);
    data::SliceTriplet t;
    t.slices = {s, s, s};
    t.center_index = 1;
    ad::NoGradGuard g;
    CHECK(max_abs_diff(encode(s, rep).values.value(), encode(t, stk).values.value()) == 0);
}

TEST_CASE("feature_upsample sets the working grid")
{
    auto cfg = small_cnn();
    cfg.feature_upsample = Shape2{32, 24};
    const auto state = init_model(cfg);
    ad::NoGradGuard g;
    const auto f = encode(random_image(64, 48, 2), state);
    CHECK(f.grid() == Shape2{32, 24});
    CHECK(f.backbone_grid == Shape2{16, 12});
    CHECK(f.dim() == 5);
}

TEST_CASE("ViT: 672x672 input with patch 14 gives a 48x48 token grid")
{
    EncoderConfig cfg;
    cfg.backbone = Backbone::vit;
    cfg.vit = tiny_vit(14);
    const auto state = init_model(cfg);
    ad::NoGradGuard g;
    const auto f = encode(Image(672, 672, 0.3), state);
    CHECK(f.backbone_grid == Shape2{48, 48});
    CHECK(f.grid() == Shape2{168, 168});
}

TEST_CASE("ViT: 256 is padded to 266 = 19 patches; padding can be disabled")
{
    EncoderConfig cfg;
    cfg.backbone = Backbone::vit;
    cfg.vit = tiny_vit(14);
    auto state = init_model(cfg);
    ad::NoGradGuard g;
    CHECK(encode(Image(256, 256, 0.1), state).backbone_grid == Shape2{19, 19});
    state.config.pad_to_stride = false;
    CHECK_THROWS_WITH_AS(encode(Image(256, 256, 0.1), state), doctest::Contains("stride 14"), std::invalid_argument);
    CHECK(encode(Image(252, 252, 0.1), state).backbone_grid == Shape2{18, 18});
}

TEST_CASE("ViT forward matches an independent torch implementation")
{
    EncoderConfig cfg;
    cfg.backbone = Backbone::vit;
    cfg.vit = tiny_vit(4);
    cfg.backbone_weights = fixture("tiny_vit.safetensors");
    cfg.feature_upsample = Shape2{5, 6};
    const auto state = init_model(cfg);
    const auto in = io::read_npy(fixture("tiny_vit_input.npy"));
    const auto ref = io::read_npy(fixture("tiny_vit_features.npy"));
    // The oracle zero-pads 18x22 to 20x24 before normalizing; feed the padded image.
    Image img(20, 24, 0.0);
    for (int y = 0; y < in.shape[0]; ++y) {
        for (int x = 0; x < in.shape[1]; ++x) img(y, x) = in.values[y * in.shape[1] + x];
    }
    ad::NoGradGuard g;
    const auto f = encode(img, state);
    REQUIRE(f.values.shape() == ref.shape);
    CHECK(max_abs_diff(f.values.value(), Tensor(ref.shape, ref.values)) < 1e-9);
}

TEST_CASE("backbone loading checks digests and shapes")
{
    EncoderConfig cfg;
    cfg.backbone = Backbone::vit;
    cfg.vit = tiny_vit(4);
    cfg.backbone_weights = fixture("tiny_vit.safetensors");
    cfg.backbone_digest = "0000000000000000";
    CHECK_THROWS_WITH(init_model(cfg), doctest::Contains("does not match expected"));
    cfg.backbone_digest.clear();
    cfg.vit.depth = 3;
    CHECK_THROWS_WITH(init_model(cfg), doctest::Contains("depth 2"));
    cfg.backbone_weights = "/nonexistent.safetensors";
    CHECK_THROWS_WITH(init_model(cfg), doctest::Contains("not found"));
}

TEST_CASE("slice adapter: identity, constant bias, weighted average")
{
    EncoderConfig cfg = small_cnn();
    cfg.input_mode = InputMode::slice_adapter;
    auto state = init_model(cfg);
    data::SliceTriplet t;
    t.slices = {random_image(6, 5, 1), random_image(6, 5, 2), random_image(6, 5, 3)};

    // fresh adapter is the identity
    const Tensor id = apply_slice_adapter(t, state).value();
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < 6; ++y) {
            for (int x = 0; x < 5; ++x) CHECK(id.at(c, y, x) == t.slices[c](y, x));
        }
    }

    state.params.at("slice_adapter.weight").mutable_value().fill(0);
    state.params.at("slice_adapter.bias").mutable_value() = Tensor({3}, std::vector<Real>{0.1, -2, 7});
    const Tensor k = apply_slice_adapter(t, state).value();
    for (int y = 0; y < 6; ++y) {
        for (int x = 0; x < 5; ++x) {
            CHECK(k.at(0, y, x) == 0.1);
            CHECK(k.at(1, y, x) == -2);
            CHECK(k.at(2, y, x) == 7);
        }
    }

    Tensor w({3, 3, 1, 1});
    for (int o = 0; o < 3; ++o) {
        w[o * 3 + 0] = 0.25;
        w[o * 3 + 1] = 0.5;
        w[o * 3 + 2] = 0.25;
    }
    state.params.at("slice_adapter.weight").mutable_value() = w;
    state.params.at("slice_adapter.bias").mutable_value().fill(0);
    t.slices[0](2, 3) = 0.2;
    t.slices[1](2, 3) = 0.6;
    t.slices[2](2, 3) = 1.0;
    const Tensor avg = apply_slice_adapter(t, state).value();
    for (int c = 0; c < 3; ++c) CHECK(avg.at(c, 2, 3) == doctest::Approx(0.25 * 0.2 + 0.5 * 0.6 + 0.25 * 1.0));

    t.slices[2] = Image(6, 4);
    CHECK_THROWS_AS(apply_slice_adapter(t, state), std::invalid_argument);
}

TEST_CASE("LoRA: zero-init B leaves outputs bit-identical; parameter count")
{
    EncoderConfig cfg;
    cfg.backbone = Backbone::vit;
    cfg.vit = tiny_vit(4);
    cfg.init_seed = 5;
    const auto base = init_model(cfg);
    LowRankAdapterSpec spec;
    spec.rank = 2;
    spec.alpha = 4;
    const auto wrapped = wrap_with_low_rank_adapters(base, spec);
    const Image img = random_image(16, 20, 4);
    ad::NoGradGuard g;
    CHECK(max_abs_diff(encode(img, base).values.value(), encode(img, wrapped).values.value()) == 0);
    // 2 blocks x {q, v} x rank (d_in + d_out)
    CHECK(wrapped.trainable_count() == 2u * 2u * 2u * (8u + 8u));
    CHECK(base.trainable_count() == 0);
    CHECK(wrapped.frozen_digest() == base.frozen_digest());

    spec.blocks = {2};
    CHECK_THROWS_WITH_AS(wrap_with_low_rank_adapters(base, spec), doctest::Contains("block 2"), std::invalid_argument);
    spec.blocks = {};
    spec.projections = {"mlp"};
    CHECK_THROWS_AS(wrap_with_low_rank_adapters(base, spec), std::invalid_argument);
    CHECK_THROWS_AS(wrap_with_low_rank_adapters(init_model(small_cnn()), LowRankAdapterSpec{}), std::invalid_argument);
}

TEST_CASE("LoRA: a training step moves adapters but never the base weights")
{
    EncoderConfig cfg;
    cfg.backbone = Backbone::vit;
    cfg.vit = tiny_vit(4);
    cfg.lora = LowRankAdapterSpec{2, 4, {"q", "k", "v", "proj"}, {}, 1};
    cfg.input_mode = InputMode::slice_adapter;
    auto state = init_model(cfg);
    const std::string frozen = state.frozen_digest();
    const std::string all = state.weights_digest();

    data::Episode ep;
    const Image img = random_image(16, 16, 7);
    Mask m(16, 16);
    for (int y = 4; y < 12; ++y) {
        for (int x = 4; x < 12; ++x) m(y, x) = 1;
    }
    ep.support.push_back({img, m});
    ep.query_image = img;
    ep.query_label = m;
    train::TrainConfig tc;
    tc.optimizer.lr = 0.05;
    tc.window = {2, 2};
    for (int i = 0; i < 3; ++i) train::train_episode(state, ep, tc);
    CHECK(state.frozen_digest() == frozen);
    CHECK(state.weights_digest() != all);
}

TEST_CASE("CNN is flip-equivariant when kernels are mirror-symmetric")
{
    auto state = init_model(small_cnn());
    // Mirror-average every kernel so the network commutes with horizontal flips.
    for (auto& [name, v] : state.params) {
        if (v.value().rank() != 4) continue;
        Tensor& w = v.mutable_value();
        const int k = w.dim(3);
        const std::size_t rows = w.size() / k;
        for (std::size_t r = 0; r < rows; ++r) {
            for (int j = 0; j < k / 2; ++j) {
                const Real avg = 0.5 * (w[r * k + j] + w[r * k + k - 1 - j]);
                w[r * k + j] = w[r * k + k - 1 - j] = avg;
            }
        }
    }
    const Image img = random_image(20, 32, 9);  // width a multiple of the stride
    Image flipped(20, 32);
    for (int y = 0; y < 20; ++y) {
        for (int x = 0; x < 32; ++x) flipped(y, x) = img(y, 31 - x);
    }
    ad::NoGradGuard g;
    const Tensor a = encode(img, state).values.value();
    const Tensor b = encode(flipped, state).values.value();
    Real worst = 0, scale = 0;
    for (int c = 0; c < a.dim(0); ++c) {
        for (int y = 0; y < a.dim(1); ++y) {
            for (int x = 0; x < a.dim(2); ++x) {
                worst = std::max(worst, std::abs(a.at(c, y, x) - b.at(c, y, a.dim(2) - 1 - x)));
                scale = std::max(scale, std::abs(a.at(c, y, x)));
            }
        }
    }
    CHECK(worst <= 1e-3 * scale);
}

TEST_CASE("checkpoint round trip restores weights, optimizer state and step")
{
    auto state = init_model(small_cnn());
    state.step = 17;
    state.momentum["cnn.proj.bias"] = Tensor({5}, 0.25);
    const auto dir = testing::scratch_dir("ckpt");
    save_checkpoint(dir, state);
    const auto back = load_checkpoint(dir);
    CHECK(back.step == 17);
    CHECK(back.weights_digest() == state.weights_digest());
    CHECK(back.momentum.at("cnn.proj.bias")[3] == 0.25);
    CHECK(back.config.cnn.dim == 5);
}

TEST_CASE("coverage on a coarser grid is the area fraction")
{
    Mask m(8, 8);
    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 2; ++x) m(y, x) = 1;
    }
    const Image c = coverage_on_grid(m, {2, 2});
    CHECK(c(0, 0) == doctest::Approx(0.5));
    CHECK(c(0, 1) == 0);
    CHECK(c(1, 0) == 0);
}
