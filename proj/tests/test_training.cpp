#include <fstream>

#include "oracles.hpp"
#include "protoseg/io.hpp"
#include "protoseg/synthetic.hpp"
#include "protoseg/training.hpp"
#include "test_support.hpp"

using namespace protoseg;
using namespace protoseg::train;
using testing::random_tensor;
using testing::scratch_dir;

namespace {

model::EncoderConfig small_cnn()
{
    model::EncoderConfig c;
    c.cnn = {4, 6, 5};
    c.init_seed = 11;
    c.train_resolution = c.test_resolution = {32, 32};
    return c;
}

Mask square(int n, int y0, int x0, int size)
{
    Mask m(n, n, 0);
    for (int y = y0; y < y0 + size; ++y) {
        for (int x = x0; x < x0 + size; ++x) m(y, x) = 1;
    }
    return m;
}

Image picture(const Mask& m, std::uint64_t seed)
{
    Rng rng(seed);
    Image img(m.height(), m.width());
    for (std::size_t i = 0; i < m.size(); ++i) img[i] = (m[i] ? 0.8 : 0.2) + 0.05 * uniform01(rng);
    return img;
}

data::Episode toy_episode()
{
    const Mask ms = square(32, 8, 8, 12), mq = square(32, 11, 10, 12);
    data::Episode ep;
    ep.support.push_back({picture(ms, 1), ms});
    ep.query_image = picture(mq, 2);
    ep.query_label = mq;
    return ep;
}

TrainConfig quick_config()
{
    TrainConfig c;
    c.episodes = 4;
    c.optimizer.lr = 1e-2;
    c.window = {2, 2};
    c.checkpoint_every = 2;
    c.seed = 5;
    c.augmentation = data::AugmentationSpec::identity();
    return c;
}

// Brute-force prototype segmentation of a [D,H,W] map: window and global
// prototypes per class from `cov`, 20*cos similarities, softmax-weighted
// fusion, softmax over the two classes, mean -log(max(p, 1e-8)).
Real brute_force_alignment(const Tensor& qf, const Mask& pred, const Tensor& sf, const Mask& slabel, int win,
                           Real thr)
{
    const int d = qf.dim(0), h = qf.dim(1), w = qf.dim(2);
    std::array<std::vector<std::vector<Real>>, 2> protos;
    for (int c = 0; c < 2; ++c) {
        Image cov(h, w);
        for (std::size_t i = 0; i < cov.size(); ++i) cov[i] = (pred[i] == c) ? 1 : 0;
        protos[c] = oracle::local_prototypes(qf, cov, win, win, thr);
        protos[c].push_back(oracle::global_prototype(qf, cov));
    }
    Real loss = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            std::array<Real, 2> fused{};
            for (int c = 0; c < 2; ++c) {
                std::vector<Real> s;
                for (const auto& p : protos[c]) {
                    Real dot = 0, pn = 0, fn = 0;
                    for (int k = 0; k < d; ++k) {
                        dot += p[k] * sf.at(k, y, x);
                        pn += p[k] * p[k];
                        fn += sf.at(k, y, x) * sf.at(k, y, x);
                    }
                    s.push_back(20 * dot / (std::sqrt(pn) * std::sqrt(fn) + 1e-8));
                }
                Real z = 0, acc = 0;
                for (Real v : s) z += std::exp(v);
                for (Real v : s) acc += v * std::exp(v) / z;
                fused[c] = acc;
            }
            const Real p1 = 1 / (1 + std::exp(fused[0] - fused[1]));
            const Real p = slabel(y, x) ? p1 : 1 - p1;
            loss -= std::log(std::max(p, 1e-8));
        }
    }
    return loss / (h * w);
}

ad::Var probs_from(const Mask& fg, Real confidence)
{
    const int h = fg.height(), w = fg.width();
    Tensor t({2, h, w});
    for (std::size_t i = 0; i < fg.size(); ++i) {
        t[fg.size() + i] = fg[i] ? confidence : 1 - confidence;
        t[i] = 1 - t[fg.size() + i];
    }
    return ad::constant(t);
}

std::size_t count_lines(const fs::path& p)
{
    std::ifstream in(p);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) ++n;
    return n;
}

struct SynthPool {
    std::vector<data::VolumeScan> scans;
    std::vector<data::SliceSample> pool;
    std::vector<data::SuperpixelMap> superpixels;
};

SynthPool synth_pool(const std::vector<std::string>& excluded)
{
    synth::SynthSpec spec;
    spec.patients = 2;
    spec.height = spec.width = 32;
    spec.depth = 8;
    spec.seed = 4;
    SynthPool s;
    s.scans = synth::generate(spec);
    s.pool = data::build_training_pool(s.scans, excluded, {32, 32});
    s.superpixels = data::prepare_superpixels(s.pool, {100, 0.8, 20});
    return s;
}

}  // namespace

TEST_CASE("segmentation loss: uniform is ln 2, perfect is ~0, never negative")
{
    const Mask target = square(6, 1, 1, 3);
    Tensor half({2, 6, 6}, 0.5);
    CHECK(segmentation_loss(ad::constant(half), target).value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    const auto perfect = segmentation_loss(probs_from(target, 1.0), target).value()[0];
    CHECK(perfect >= 0);
    CHECK(perfect < 1e-7);
    const auto near = segmentation_loss(probs_from(target, 1 - 1e-8), target).value()[0];
    CHECK(near == doctest::Approx(1e-8).epsilon(1e-3));
    Rng rng(1);
    for (int t = 0; t < 20; ++t) {
        Tensor p = random_tensor({2, 6, 6}, rng, 0, 1);
        for (int i = 0; i < 36; ++i) p[36 + i] = 1 - p[i];
        CHECK(segmentation_loss(ad::constant(p), target).value()[0] >= 0);
    }
    CHECK_THROWS_AS(segmentation_loss(ad::constant(half), square(5, 0, 0, 1)), std::invalid_argument);
    Mask bad = target;
    bad(0, 0) = 2;
    CHECK_THROWS_AS(segmentation_loss(ad::constant(half), bad), std::invalid_argument);
}

TEST_CASE("alignment loss matches a brute-force role-swapped computation")
{
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor qf = random_tensor({3, 4, 4}, rng), sf = random_tensor({3, 4, 4}, rng);
        Mask pred(4, 4), slabel(4, 4);
        for (auto& v : pred.values()) v = uniform01(rng) < 0.5;
        for (auto& v : slabel.values()) v = uniform01(rng) < 0.5;
        pred[0] = 1;
        pred[15] = 0;
        const auto a = alignment_loss(probs_from(pred, 0.9), ad::constant(qf), ad::constant(sf), slabel, {2, 2}, 0.95);
        REQUIRE_FALSE(a.skipped);
        CHECK(a.loss.value()[0] == doctest::Approx(brute_force_alignment(qf, pred, sf, slabel, 2, 0.95)).epsilon(1e-10));
    }
}

TEST_CASE("alignment is skipped for an all-background or all-foreground query prediction")
{
    Rng rng(3);
    const auto qf = ad::constant(random_tensor({3, 4, 4}, rng)), sf = ad::constant(random_tensor({3, 4, 4}, rng));
    const Mask lbl = square(4, 0, 0, 2);
    const auto bg = alignment_loss(probs_from(Mask(4, 4, 0), 0.9), qf, sf, lbl, {2, 2}, 0.95);
    CHECK(bg.skipped);
    CHECK(bg.loss.value()[0] == 0);
    CHECK(bg.reason.find("background") != std::string::npos);
    const auto fg = alignment_loss(probs_from(Mask(4, 4, 1), 0.9), qf, sf, lbl, {2, 2}, 0.95);
    CHECK(fg.skipped);
    CHECK(fg.reason.find("foreground") != std::string::npos);
}

TEST_CASE("episode loss gradient matches finite differences on a D=3, 4x4 toy")
{
    Rng rng(4);
    const Tensor qf = random_tensor({3, 4, 4}, rng), sf = random_tensor({3, 4, 4}, rng);
    const Mask smask = square(4, 0, 0, 2), qmask = square(4, 1, 1, 2);
    TrainConfig cfg;
    cfg.window = {2, 2};
    cfg.lambda_reg = 1;
    {
        ad::NoGradGuard g;
        REQUIRE_FALSE(episode_forward({{ad::constant(sf), smask}}, ad::constant(qf), {4, 4}, qmask, cfg).alignment_skipped);
    }
    const Real eq = testing::gradient_error(
        [&](const ad::Var& v) { return episode_forward({{ad::constant(sf), smask}}, v, {4, 4}, qmask, cfg).total; }, qf,
        1e-3);
    const Real es = testing::gradient_error(
        [&](const ad::Var& v) { return episode_forward({{v, smask}}, ad::constant(qf), {4, 4}, qmask, cfg).total; }, sf,
        1e-3);
    CHECK(eq < 1e-4);
    CHECK(es < 1e-4);
}

TEST_CASE("lr = 0 leaves weights unchanged; one step with lr > 0 changes them")
{
    auto state = model::init_model(small_cnn());
    const auto before = state.weights_digest();
    auto cfg = quick_config();
    cfg.optimizer.lr = 0;
    const auto r = train_episode(state, toy_episode(), cfg);
    CHECK(std::isfinite(r.total));
    CHECK(state.weights_digest() == before);
    CHECK(state.step == 1);
    cfg.optimizer.lr = 1e-2;
    train_episode(state, toy_episode(), cfg);
    CHECK(state.weights_digest() != before);
}

TEST_CASE("repeated steps on one episode lower the moving-average loss")
{
    // default widths: the 4/6/5-channel toy has near-zero feature vectors whose
    // cosine gradients blow up on the first step
    auto config = small_cnn();
    config.cnn = {};
    auto state = model::init_model(config);
    auto cfg = quick_config();
    cfg.optimizer.lr = 1e-3;
    const auto ep = toy_episode();
    std::vector<Real> losses;
    for (int i = 0; i < 200; ++i) losses.push_back(train_episode(state, ep, cfg).total);
    auto mean = [&](int from) {
        Real s = 0;
        for (int i = from; i < from + 20; ++i) s += losses[i];
        return s / 20;
    };
    CHECK(mean(180) < mean(0));
    CHECK(mean(180) < 0.8 * mean(0));
}

TEST_CASE("training is deterministic; lambda = 0 updates equal alignment-off updates bitwise")
{
    const auto base = model::init_model(small_cnn());
    auto cfg = quick_config();
    auto a = base.clone(), b = base.clone();
    for (int i = 0; i < 3; ++i) {
        train_episode(a, toy_episode(), cfg);
        train_episode(b, toy_episode(), cfg);
    }
    CHECK(a.weights_digest() == b.weights_digest());

    auto zero = base.clone(), off = base.clone();
    auto cz = cfg, co = cfg;
    cz.lambda_reg = 0;
    co.alignment = false;
    for (int i = 0; i < 3; ++i) {
        const auto rz = train_episode(zero, toy_episode(), cz);
        const auto ro = train_episode(off, toy_episode(), co);
        CHECK(rz.total == ro.total);
        CHECK(rz.reg_loss > 0);  // still reported
    }
    CHECK(zero.weights_digest() == off.weights_digest());
}

TEST_CASE("non-finite input raises NonFiniteLoss and leaves the state untouched")
{
    auto state = model::init_model(small_cnn());
    const auto before = state.weights_digest();
    auto ep = toy_episode();
    std::get<Image>(ep.query_image)(3, 3) = std::nan("");
    CHECK_THROWS_AS(train_episode(state, ep, quick_config()), NonFiniteLoss);
    CHECK(state.weights_digest() == before);
    CHECK(state.step == 0);
}

TEST_CASE("run_training: one episode writes one metrics row and one checkpoint")
{
    const auto s = synth_pool({});
    auto state = model::init_model(small_cnn());
    auto cfg = quick_config();
    cfg.episodes = 1;
    cfg.checkpoint_every = 100;
    const auto dir = scratch_dir("train_one");
    const auto run = run_training(s.pool, s.superpixels, state, cfg, dir);
    CHECK(run.reports.size() == 1);
    CHECK(run.checkpoints.size() == 1);
    CHECK(count_lines(dir / "metrics.csv") == 2);
    CHECK(final_checkpoint(dir) == run.final_checkpoint);
    CHECK(model::load_checkpoint(final_checkpoint(dir)).weights_digest() == state.weights_digest());
    CHECK_THROWS_WITH(final_checkpoint(scratch_dir("train_none")), doctest::Contains("run train first"));
}

TEST_CASE("run_training resumes from the latest checkpoint to the same final weights")
{
    const auto s = synth_pool({});
    auto cfg = quick_config();
    cfg.episodes = 6;
    auto full = model::init_model(small_cnn());
    const auto dir_full = scratch_dir("train_full");
    run_training(s.pool, s.superpixels, full, cfg, dir_full);

    auto part = model::init_model(small_cnn());
    const auto dir_part = scratch_dir("train_part");
    auto short_cfg = cfg;
    short_cfg.episodes = 4;
    run_training(s.pool, s.superpixels, part, short_cfg, dir_part);

    auto resumed = model::init_model(small_cnn());
    TrainingOptions opts;
    opts.resume = true;
    const auto run = run_training(s.pool, s.superpixels, resumed, cfg, dir_part, opts);
    CHECK(run.resumed_from == 4);
    CHECK(run.reports.size() == 2);
    CHECK(resumed.step == 6);
    CHECK(resumed.weights_digest() == full.weights_digest());
    CHECK(count_lines(dir_part / "metrics.csv") == 7);
    CHECK(io::read_text(dir_part / "training_slices.json") == io::read_text(dir_full / "training_slices.json"));
}

TEST_CASE("training slices never contain the excluded class")
{
    const auto s = synth_pool({"BlobC"});
    auto state = model::init_model(small_cnn());
    auto cfg = quick_config();
    cfg.episodes = 8;
    const auto dir = scratch_dir("train_setting2");
    run_training(s.pool, s.superpixels, state, cfg, dir);
    const auto used = read_training_slices(dir);
    REQUIRE_FALSE(used.empty());
    for (const auto& [patient, z] : used) {
        for (const auto& scan : s.scans) {
            if (scan.patient_id != patient) continue;
            const auto with = scan.slices_with("BlobC");
            CHECK(std::find(with.begin(), with.end(), z) == with.end());
        }
    }
}

TEST_CASE("config validation and json round trip")
{
    auto cfg = quick_config();
    cfg.grad_clip = 2.5;
    cfg.optimizer.kind = "adam";
    const auto back = train_config_from_json(to_json(cfg));
    CHECK(to_json(back) == to_json(cfg));
    auto bad = cfg;
    bad.optimizer.kind = "rmsprop";
    CHECK_THROWS_WITH(bad.validate(), doctest::Contains("sgd or adam"));
    bad = cfg;
    bad.episodes = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    OptimizerSpec o;
    o.lr = 1;
    o.decay_every = 10;
    o.decay_rate = 0.5;
    CHECK(o.lr_at(9) == 1);
    CHECK(o.lr_at(10) == 0.5);
    CHECK(o.lr_at(25) == 0.25);
}
