// NIfTI, npy and safetensors against files written by nibabel, numpy and the
// safetensors package.

#include "protoseg/io.hpp"
#include "test_support.hpp"

using namespace protoseg;
using testing::fixture;
using testing::scratch_dir;

namespace {

/// Expected arrays are saved in nibabel order [x][y][z].
void check_against(const Volume<Real>& vol, const io::NpyArray& expected)
{
    REQUIRE(expected.shape.size() == 3);
    const int nx = expected.shape[0], ny = expected.shape[1], nz = expected.shape[2];
    REQUIRE(vol.width() == nx);
    REQUIRE(vol.height() == ny);
    REQUIRE(vol.depth() == nz);
    Real worst = 0;
    for (int x = 0; x < nx; ++x) {
        for (int y = 0; y < ny; ++y) {
            for (int z = 0; z < nz; ++z) {
                worst = std::max(worst, std::abs(vol(y, x, z) - expected.values[(x * ny + y) * nz + z]));
            }
        }
    }
    CHECK(worst == 0);
}

}  // namespace

TEST_CASE("gzipped int16 NIfTI with slope/intercept matches nibabel get_fdata")
{
    check_against(io::read_nifti(fixture("scaled_int16.nii.gz")), io::read_npy(fixture("scaled_int16_expected.npy")));
}

TEST_CASE("float32 NIfTI matches nibabel and exposes voxel spacing")
{
    io::Spacing sp;
    check_against(io::read_nifti(fixture("float32.nii"), &sp), io::read_npy(fixture("float32_expected.npy")));
    CHECK(sp.mm[0] == doctest::Approx(0.8));
    CHECK(sp.mm[1] == doctest::Approx(0.9));
    CHECK(sp.mm[2] == doctest::Approx(2.5));
}

TEST_CASE("NIfTI write/read round trip")
{
    const auto dir = scratch_dir("io_nifti");
    Volume<Real> v(3, 4, 2);
    for (std::size_t i = 0; i < v.size(); ++i) v.values()[i] = static_cast<Real>(i) * 0.25 - 1;
    io::write_nifti(dir / "f.nii.gz", v, io::NiftiType::float64);
    CHECK(io::read_nifti(dir / "f.nii.gz") == v);

    Volume<std::uint8_t> m(3, 4, 2);
    m(1, 2, 1) = 1;
    m(0, 0, 0) = 3;
    io::write_nifti(dir / "m.nii.gz", m);
    const auto back = io::read_nifti(dir / "m.nii.gz");
    CHECK(back(1, 2, 1) == 1);
    CHECK(back(0, 0, 0) == 3);
    CHECK(back(2, 3, 1) == 0);
}

TEST_CASE("NIfTI errors name the file")
{
    const auto dir = scratch_dir("io_bad");
    io::write_text(dir / "junk.nii", "not a nifti file at all");
    try {
        io::read_nifti(dir / "junk.nii");
        FAIL("expected an exception");
    } catch (const std::exception& e) {
        CHECK(std::string(e.what()).find("junk.nii") != std::string::npos);
    }
    CHECK_THROWS(io::read_nifti(dir / "missing.nii.gz"));
}

TEST_CASE("npy files written by numpy")
{
    const auto f4 = io::read_npy(fixture("f4.npy"));
    CHECK(f4.shape == std::vector<int>{3, 4});
    for (int i = 0; i < 12; ++i) CHECK(f4.values[i] == i / 4.0);
    const auto i8 = io::read_npy(fixture("i8.npy"));
    CHECK(i8.shape == std::vector<int>{2, 2});
    CHECK(i8.values == std::vector<Real>{-3, 7, 1099511627776.0, 0});
}

TEST_CASE("npy round trip for every written dtype")
{
    const auto dir = scratch_dir("io_npy");
    io::write_npy(dir / "a.npy", {2, 3}, std::vector<double>{1.5, -2, 3, 4, 5, 6e-9});
    io::write_npy(dir / "b.npy", {3}, std::vector<float>{0.5f, 1.f, -2.f});
    io::write_npy(dir / "c.npy", {2, 2}, std::vector<std::int32_t>{-7, 0, 1 << 20, 3});
    io::write_npy(dir / "d.npy", {1, 4}, std::vector<std::uint8_t>{0, 1, 255, 9});
    CHECK(io::read_npy(dir / "a.npy").values == std::vector<Real>{1.5, -2, 3, 4, 5, 6e-9});
    CHECK(io::read_npy(dir / "b.npy").values == std::vector<Real>{0.5, 1, -2});
    CHECK(io::read_npy(dir / "c.npy").values == std::vector<Real>{-7, 0, 1 << 20, 3});
    const auto d = io::read_npy(dir / "d.npy");
    CHECK(d.shape == std::vector<int>{1, 4});
    CHECK(d.values == std::vector<Real>{0, 1, 255, 9});
}

TEST_CASE("safetensors: float32 file from the Python package, exact F64 round trip")
{
    const auto w = io::read_safetensors(fixture("tiny_vit.safetensors"));
    REQUIRE(w.count("pos_embed"));
    CHECK(w.at("pos_embed").shape() == std::vector<int>{1, 10, 8});
    CHECK(w.at("patch_embed.proj.weight").shape() == std::vector<int>{8, 3, 4, 4});

    const auto dir = scratch_dir("io_st");
    io::NamedTensors t;
    t["a"] = Tensor({2, 2}, std::vector<Real>{1.0 / 3, -2, 1e-300, 7});
    t["b.c"] = Tensor({1}, std::vector<Real>{0.1});
    io::write_safetensors(dir / "x.safetensors", t, {{"step", "12"}});
    std::map<std::string, std::string> meta;
    const auto back = io::read_safetensors(dir / "x.safetensors", &meta);
    CHECK(meta.at("step") == "12");
    REQUIRE(back.size() == 2);
    CHECK(back.at("a").shape() == t["a"].shape());
    for (int i = 0; i < 4; ++i) CHECK(back.at("a")[i] == t["a"][i]);
    CHECK(back.at("b.c")[0] == 0.1);
}
