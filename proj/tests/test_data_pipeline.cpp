#include <map>
#include <set>

#include "json.hpp"
#include "protoseg/data_pipeline.hpp"
#include "protoseg/io.hpp"
#include "protoseg/synthetic.hpp"
#include "test_support.hpp"

using namespace protoseg;
using namespace protoseg::data;
using testing::fixture;
using testing::scratch_dir;

namespace {

const ClassCatalog catalog{{1, "Spleen"}, {2, "Liver"}, {3, "LK"}};

VolumeScan blob_scan(const std::string& id, int h = 8, int w = 8, int d = 4)
{
    Volume<Real> img(h, w, d), lab(h, w, d);
    for (int z = 0; z < d; ++z) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) img(y, x, z) = y * 0.1 + x * 0.01 + z;
        }
    }
    for (int z = 1; z < 3 && z < d; ++z) {
        for (int y = 2; y < 5; ++y) {
            for (int x = 3; x < 6; ++x) lab(y, x, z) = 1;
        }
    }
    return make_scan(img, lab, catalog, Modality::synth, id);
}

/// Two label maps describe the same partition iff their labels are in bijection.
bool same_partition(const LabelMap& a, const std::vector<Real>& b)
{
    if (a.size() != b.size()) return false;
    std::map<int, int> ab, ba;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const int la = a[i], lb = static_cast<int>(b[i]);
        if (auto [it, fresh] = ab.emplace(la, lb); !fresh && it->second != lb) return false;
        if (auto [it, fresh] = ba.emplace(lb, la); !fresh && it->second != la) return false;
    }
    return true;
}

std::size_t count_on(const Mask& m) { return std::count(m.values().begin(), m.values().end(), 1); }

Real dice(const Mask& a, const Mask& b)
{
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += a[i] && b[i];
        na += a[i] != 0;
        nb += b[i] != 0;
    }
    return na + nb == 0 ? 1.0 : 2.0 * inter / (na + nb);
}

std::vector<SliceSample> tiny_pool()
{
    auto slices = reformat_and_resize(blob_scan("p1", 16, 16, 4), {16, 16});
    for (auto& s : slices) {
        for (int y = 0; y < 16; ++y) {
            for (int x = 0; x < 16; ++x) s.image(y, x) = (x < 8 ? 0.2 : 0.8) + (y < 8 ? 0.0 : 0.1);
        }
    }
    return slices;
}

}  // namespace

TEST_CASE("load: blob volume gives per-class masks with the image shape")
{
    const auto scan = blob_scan("p1");
    CHECK(scan.masks.size() == 3);
    for (const auto& [name, m] : scan.masks) CHECK(m.same_shape(8, 8, 4));
    CHECK(std::count(scan.masks.at("Spleen").values().begin(), scan.masks.at("Spleen").values().end(), 1) == 18);
    CHECK(scan.slices_with("Spleen") == std::vector<int>{1, 2});
    CHECK(scan.slices_with("Liver").empty());
}

TEST_CASE("load: all-zero labels give empty masks without error")
{
    Volume<Real> img(4, 4, 2, 1.0), lab(4, 4, 2, 0.0);
    const auto scan = make_scan(img, lab, catalog, Modality::synth, "z");
    for (const auto& [name, m] : scan.masks) CHECK(std::count(m.values().begin(), m.values().end(), 1) == 0);
}

TEST_CASE("CT normalization clips to [-275, 125] HU then rescales to [0,1]")
{
    Volume<Real> v(1, 4, 1);
    v(0, 0, 0) = -500;
    v(0, 1, 0) = -275;
    v(0, 2, 0) = -75;
    v(0, 3, 0) = 400;
    normalize_intensity(v, Modality::ct, {});
    CHECK(v(0, 0, 0) == 0.0);
    CHECK(v(0, 1, 0) == 0.0);
    CHECK(v(0, 2, 0) == doctest::Approx((-75.0 + 275.0) / 400.0));
    CHECK(v(0, 3, 0) == 1.0);
}

TEST_CASE("MRI normalization clips at the 0.5 and 99.5 percentiles")
{
    Volume<Real> v(1, 1001, 1);
    for (int i = 0; i <= 1000; ++i) v(0, i, 0) = i;
    v(0, 1000, 0) = 1e6;  // outlier
    normalize_intensity(v, Modality::mri, {});
    Real lo = 1e9, hi = -1e9;
    for (Real x : v.values()) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    CHECK(lo == 0.0);
    CHECK(hi == 1.0);
    CHECK(v(0, 500, 0) == doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("load errors: shape mismatch, unknown class id, missing file")
{
    Volume<Real> img(4, 4, 2), lab(4, 3, 2);
    CHECK_THROWS_WITH_AS(make_scan(img, lab, catalog, Modality::ct, "a"), doctest::Contains("does not match"),
                         std::invalid_argument);
    Volume<Real> bad(4, 4, 2);
    bad(1, 1, 1) = 7;
    CHECK_THROWS_WITH_AS(make_scan(img, bad, catalog, Modality::ct, "a"), doctest::Contains("unknown class id 7"),
                         std::invalid_argument);
    CHECK_THROWS(load_volume("/nonexistent/img.nii.gz", "/nonexistent/lab.nii.gz", catalog, Modality::ct, "a"));
}

TEST_CASE("reformat_and_resize: count, shape, identity and binarity")
{
    const auto scan = blob_scan("p1", 8, 8, 4);
    const auto big = reformat_and_resize(scan, {256, 256});
    REQUIRE(big.size() == 4);
    for (const auto& s : big) {
        CHECK(s.image.shape() == Shape2{256, 256});
        for (const auto& [n, m] : s.labels) {
            CHECK(m.shape() == Shape2{256, 256});
            CHECK(std::all_of(m.values().begin(), m.values().end(), [](auto v) { return v <= 1; }));
        }
    }
    const auto same = reformat_and_resize(scan, {8, 8});
    for (int z = 0; z < 4; ++z) {
        CHECK(same[z].image == scan.voxels.slice(z));
        CHECK(same[z].labels.at("Spleen") == scan.masks.at("Spleen").slice(z));
        CHECK(same[z].source == "p1");
        CHECK(same[z].z_index == z);
    }
    // edge neighbours replicate
    CHECK(same[0].previous == same[0].image);
    CHECK(same[3].next == same[3].image);
    CHECK(same[1].previous == same[0].image);
    CHECK_THROWS_AS(reformat_and_resize(scan, {0, 8}), std::invalid_argument);
}

TEST_CASE("mask resize round trip keeps the label set")
{
    Rng rng(3);
    Mask m(13, 9);
    for (auto& v : m.values()) v = uniform01(rng) < 0.3;
    const Mask back = resize_mask(resize_mask(m, {31, 17}), {13, 9});
    CHECK(std::all_of(back.values().begin(), back.values().end(), [](auto v) { return v <= 1; }));
    const Mask zeros = resize_mask(Mask(13, 9), {40, 40});
    CHECK(count_on(zeros) == 0);
}

TEST_CASE("superpixels: constant image is one region, deterministic, partition sizes sum to H*W")
{
    Image flat(20, 30, 0.5);
    const auto one = generate_superpixels(flat, {100, 0.8, 20});
    CHECK(one.num_segments == 1);

    Rng rng(5);
    Image noisy(24, 24);
    for (auto& v : noisy.values()) v = uniform01(rng);
    const auto a = generate_superpixels(noisy, {100, 0.8, 10});
    const auto b = generate_superpixels(noisy, {100, 0.8, 10});
    CHECK(a.segments == b.segments);
    const auto sizes = a.region_sizes();
    CHECK(static_cast<int>(sizes.size()) == a.num_segments);
    CHECK(std::accumulate(sizes.begin(), sizes.end(), 0) == 24 * 24);
    std::set<int> ids(a.segments.values().begin(), a.segments.values().end());
    CHECK(*ids.begin() == 0);
    CHECK(*ids.rbegin() == a.num_segments - 1);
    CHECK(static_cast<int>(ids.size()) == a.num_segments);

    Image bad = flat;
    bad(3, 3) = std::nan("");
    CHECK_THROWS(generate_superpixels(bad, {}));
}

TEST_CASE("superpixels match scikit-image felzenszwalb partitions")
{
    const auto cases = nlohmann::json::parse(io::read_text(fixture("superpixels.json")));
    for (const auto& c : cases) {
        const std::string name = c["name"];
        CAPTURE(name);
        const auto img = io::read_npy(fixture("sp_" + name + "_image.npy"));
        const auto ref = io::read_npy(fixture("sp_" + name + "_labels.npy"));
        Image im(img.shape[0], img.shape[1]);
        for (std::size_t i = 0; i < im.size(); ++i) im[i] = img.values[i];
        const auto sp = generate_superpixels(im, {c["scale"].get<Real>(), c["sigma"].get<Real>(), c["min_size"].get<int>()});
        CHECK(same_partition(sp.segments, ref.values));
        if (name == "halfplanes") {
            CHECK(sp.num_segments >= 2);
            CHECK(sp.segments(0, 0) != sp.segments(0, im.width() - 1));
        }
    }
}

TEST_CASE("episodes: identity augmentation reproduces the support exactly")
{
    const auto pool = tiny_pool();
    const auto sp = prepare_superpixels(pool, {100, 0.8, 10});
    Rng rng(1);
    const auto ep = sample_training_episode(pool, sp, AugmentationSpec::identity(), rng);
    REQUIRE(ep.support.size() == 1);
    REQUIRE(ep.query_label);
    CHECK(std::get<Image>(ep.query_image) == std::get<Image>(ep.support[0].image));
    CHECK(*ep.query_label == ep.support[0].mask);
    CHECK(count_on(ep.support[0].mask) > 0);
    CHECK(ep.n_way == 1);
    CHECK(ep.k_shot == 1);
}

TEST_CASE("episodes: intensity-only augmentation leaves the label untouched")
{
    const auto pool = tiny_pool();
    const auto sp = prepare_superpixels(pool, {100, 0.8, 10});
    auto aug = AugmentationSpec::identity();
    aug.intensity.gamma = {0.5, 1.5};
    aug.intensity.noise_std = 0.05;
    Rng rng(2);
    const auto ep = sample_training_episode(pool, sp, aug, rng);
    CHECK(*ep.query_label == ep.support[0].mask);
    CHECK_FALSE(std::get<Image>(ep.query_image) == std::get<Image>(ep.support[0].image));
}

TEST_CASE("episodes: a 90 degree rotation moves the label like a rotated mask")
{
    const auto pool = tiny_pool();
    const auto sp = prepare_superpixels(pool, {100, 0.8, 10});
    auto aug = AugmentationSpec::identity();
    aug.affine.rotation_deg = {90, 90};
    Rng rng(3);
    const auto ep = sample_training_episode(pool, sp, aug, rng);
    const Mask& m = ep.support[0].mask;
    const int n = m.height();
    Mask rot(n, n);
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) rot(y, x) = m(n - 1 - x, y);  // counter-clockwise
    }
    CHECK(dice(*ep.query_label, rot) == 1.0);
}

TEST_CASE("episodes: fixed seed is bit-reproducible; errors on bad pools")
{
    const auto pool = tiny_pool();
    const auto sp = prepare_superpixels(pool, {100, 0.8, 10});
    AugmentationSpec aug;
    Rng r1(9), r2(9);
    for (int i = 0; i < 5; ++i) {
        const auto a = sample_training_episode(pool, sp, aug, r1);
        const auto b = sample_training_episode(pool, sp, aug, r2);
        CHECK(std::get<Image>(a.query_image) == std::get<Image>(b.query_image));
        CHECK(*a.query_label == *b.query_label);
        CHECK(a.superpixel_id == b.superpixel_id);
    }
    Rng rng(1);
    CHECK_THROWS(sample_training_episode({}, {}, aug, rng));
    auto empty_sp = sp;
    for (auto& m : empty_sp) m.num_segments = 0;
    CHECK_THROWS(sample_training_episode(pool, empty_sp, aug, rng));

    AugmentationSpec inverted;
    inverted.affine.scale = {1.2, 0.9};
    CHECK_THROWS_AS(inverted.validate(), std::invalid_argument);
}

TEST_CASE("episodes: triplet mode warps all three slices")
{
    const auto pool = tiny_pool();
    const auto sp = prepare_superpixels(pool, {100, 0.8, 10});
    Rng rng(4);
    EpisodeSampling opt;
    opt.triplets = true;
    const auto ep = sample_training_episode(pool, sp, AugmentationSpec::identity(), rng, opt);
    const auto& t = std::get<SliceTriplet>(ep.query_image);
    CHECK(t.slices[1] == std::get<SliceTriplet>(ep.support[0].image).slices[1]);
}

TEST_CASE("filter_setting2 removes every slice touching a test class")
{
    auto pool = reformat_and_resize(blob_scan("p1"), {8, 8});
    // one liver pixel on slice 3
    pool[3].labels["Liver"](0, 0) = 1;
    const auto kept = filter_setting2(pool, {"Spleen", "Liver"});
    std::vector<int> zs;
    for (const auto& s : kept) zs.push_back(s.z_index);
    CHECK(zs == std::vector<int>{0});
    for (const auto& s : kept) {
        for (const auto& c : {"Spleen", "Liver"}) CHECK(count_on(s.labels.at(c)) == 0);
    }
    CHECK(filter_setting2(pool, {"LK", "RK"}).size() == pool.size());
    CHECK(filter_setting2({}, {"Spleen"}).empty());
}

TEST_CASE("training pool excludes slices by native-resolution masks")
{
    Volume<Real> img(32, 32, 3, 0.5), lab(32, 32, 3);
    lab(5, 5, 1) = 2;  // a single liver voxel vanishes when resized to 4x4
    const auto scan = make_scan(img, lab, catalog, Modality::synth, "p");
    const auto resized = reformat_and_resize(scan, {4, 4});
    CHECK(filter_setting2(resized, {"Liver"}).size() == 3);  // resized labels lost it
    const auto pool = build_training_pool({scan}, {"Liver"}, {4, 4});
    REQUIRE(pool.size() == 2);
    CHECK(pool[0].z_index == 0);
    CHECK(pool[1].z_index == 2);
}

TEST_CASE("manifest: round trip, errors name the file and entry")
{
    const auto dir = scratch_dir("manifest");
    synth::SynthSpec spec;
    spec.patients = 2;
    spec.height = spec.width = 16;
    spec.depth = 6;
    const auto path = synth::write_dataset(spec, dir);
    const auto m = read_manifest(path);
    CHECK(m.scans.size() == 2);
    CHECK(m.modality == Modality::synth);
    const auto scans = load_dataset(m);
    REQUIRE(scans.size() == 2);
    CHECK(scans[0].patient_id == "synth_00");
    CHECK(scans[0].height() == 16);
    CHECK(dataset_digest(m) == dataset_digest(read_manifest(path)));

    auto j = nlohmann::json::parse(io::read_text(path));
    j["scans"][1]["image"] = "nowhere.nii.gz";
    io::write_text(dir / "broken.json", j.dump(2));
    try {
        read_manifest(dir / "broken.json");
        FAIL("expected an exception");
    } catch (const std::exception& e) {
        const std::string what = e.what();
        CHECK(what.find("broken.json") != std::string::npos);
        CHECK(what.find("synth_01") != std::string::npos);
        CHECK(what.find("nowhere.nii.gz") != std::string::npos);
    }
    io::write_text(dir / "syntax.json", "{\n  \"classes\": [\n  oops\n}");
    CHECK_THROWS_WITH(read_manifest(dir / "syntax.json"), doctest::Contains("syntax.json:3"));
}

TEST_CASE("superpixel cache: second pass is all hits with identical maps")
{
    const auto dir = scratch_dir("spcache");
    const auto pool = tiny_pool();
    const SuperpixelCache cache(dir, superpixel_cache_key("abc", {100, 0.8, 10}, {16, 16}));
    SuperpixelStats s1, s2;
    const auto a = prepare_superpixels(pool, {100, 0.8, 10}, &cache, &s1);
    const auto b = prepare_superpixels(pool, {100, 0.8, 10}, &cache, &s2);
    CHECK(s1.computed == 4);
    CHECK(s1.cache_hits == 0);
    CHECK(s2.computed == 0);
    CHECK(s2.cache_hits == 4);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].segments == b[i].segments);
        CHECK(a[i].num_segments == b[i].num_segments);
    }
    CHECK(superpixel_cache_key("abc", {100, 0.8, 10}, {16, 16}) != superpixel_cache_key("abc", {100, 0.8, 11}, {16, 16}));
}
