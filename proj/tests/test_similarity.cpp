#include "oracles.hpp"
#include "protoseg/similarity.hpp"
#include "protoseg/training.hpp"
#include "test_support.hpp"

using namespace protoseg;
using namespace protoseg::sim;
using testing::random_tensor;

namespace {

ad::Var vec_rows(std::vector<std::vector<Real>> rows)
{
    const int p = static_cast<int>(rows.size()), d = static_cast<int>(rows[0].size());
    Tensor t({p, d});
    for (int i = 0; i < p; ++i) {
        for (int k = 0; k < d; ++k) t[i * d + k] = rows[i][k];
    }
    return ad::constant(t);
}

ad::Var single_pixel(std::vector<Real> f)
{
    const int d = static_cast<int>(f.size());
    return ad::constant(Tensor({d, 1, 1}, f));
}

ad::Var pixel(Real v) { return ad::constant(Tensor({1, 1}, v)); }

ad::Var map_of(std::vector<Real> per_proto)
{
    const int p = static_cast<int>(per_proto.size());
    return ad::constant(Tensor({p, 1, 1}, per_proto));
}

}  // namespace

TEST_CASE("cosine similarity is scaled by 20")
{
    const auto protos = vec_rows({{1, 2, 3}, {-2, 1, 0}, {-1, -2, -3}});
    const auto s = local_similarity_maps(protos, single_pixel({1, 2, 3})).value();
    CHECK(s[0] == doctest::Approx(20).epsilon(1e-8));
    CHECK(s[1] == doctest::Approx(0).scale(1));
    CHECK(s[2] == doctest::Approx(-20).epsilon(1e-8));
    // zero vectors give 0 rather than NaN
    const auto z = local_similarity_maps(vec_rows({{0, 0, 0}}), single_pixel({1, 2, 3})).value();
    CHECK(z[0] == 0);
    const auto z2 = local_similarity_maps(protos, single_pixel({0, 0, 0})).value();
    CHECK(z2.all_finite());
}

TEST_CASE("|S| <= 20 on random inputs")
{
    Rng rng(1);
    for (int t = 0; t < 20; ++t) {
        const auto s = local_similarity_maps(ad::constant(random_tensor({5, 4}, rng, -10, 10)),
                                             ad::constant(random_tensor({4, 6, 7}, rng, -10, 10)))
                           .value();
        for (Real v : s.values()) CHECK(std::abs(v) <= 20.0);
    }
}

TEST_CASE("fusion: singleton identity, equal values, 20 vs 0")
{
    Rng rng(2);
    const Tensor one = random_tensor({1, 3, 4}, rng, -20, 20);
    const auto f1 = fuse_similarities(ad::constant(one)).value();
    for (std::size_t i = 0; i < one.size(); ++i) CHECK(f1[i] == one[i]);

    CHECK(fuse_similarities(map_of({7.5, 7.5, 7.5})).value()[0] == doctest::Approx(7.5).epsilon(1e-15));
    const Real two = fuse_similarities(map_of({20, 0})).value()[0];
    CHECK(two == doctest::Approx(20.0).epsilon(1e-7));
    CHECK(two == doctest::Approx(oracle::fuse_two(20, 0)).epsilon(1e-14));
    CHECK_THROWS_AS(fuse_similarities(ad::Var()), std::invalid_argument);
}

TEST_CASE("fusion stays between the smallest and largest prototype similarity")
{
    Rng rng(3);
    const Tensor maps = random_tensor({4, 5, 5}, rng, -20, 20);
    const auto f = fuse_similarities(ad::constant(maps)).value();
    for (int i = 0; i < 25; ++i) {
        Real lo = 1e9, hi = -1e9;
        for (int p = 0; p < 4; ++p) {
            lo = std::min(lo, maps[p * 25 + i]);
            hi = std::max(hi, maps[p * 25 + i]);
        }
        CHECK(f[i] >= lo - 1e-12);
        CHECK(f[i] <= hi + 1e-12);
    }
}

TEST_CASE("duplicating one of all-equal prototypes leaves the fusion unchanged")
{
    CHECK(fuse_similarities(map_of({3, 3, 3, 3})).value()[0] == doctest::Approx(3).epsilon(1e-12));
}

TEST_CASE("class probabilities: uniform, logistic, normalization, argmax")
{
    const auto eq = predict_probabilities({pixel(4), pixel(4), pixel(4)}, {1, 1});
    for (int j = 0; j < 3; ++j) CHECK(eq.probabilities[j] == doctest::Approx(1.0 / 3));

    const auto lg = predict_probabilities({pixel(0), pixel(20)}, {1, 1});
    CHECK(lg.probabilities[1] == doctest::Approx(0.999999998).epsilon(1e-10));
    CHECK(lg.prediction[0] == 1);

    Rng rng(4);
    for (int t = 0; t < 10; ++t) {
        std::vector<ad::Var> cls;
        for (int j = 0; j < 3; ++j) cls.push_back(ad::constant(random_tensor({4, 6}, rng, -20, 20)));
        const auto r = predict_probabilities(cls, {4, 6});
        for (int i = 0; i < 24; ++i) {
            Real s = 0;
            int best = 0;
            for (int j = 0; j < 3; ++j) {
                const Real p = r.probabilities[j * 24 + i];
                CHECK(p >= 0);
                CHECK(p <= 1);
                s += p;
                if (cls[j].value()[i] > cls[best].value()[i]) best = j;
            }
            CHECK(s == doctest::Approx(1).epsilon(1e-12));
            CHECK(r.prediction[i] == best);
        }
        // upsampled probabilities still sum to one
        const auto up = predict_probabilities(cls, {9, 13});
        for (int i = 0; i < 9 * 13; ++i) {
            Real s = 0;
            for (int j = 0; j < 3; ++j) s += up.probabilities[j * 117 + i];
            CHECK(s == doctest::Approx(1).epsilon(1e-12));
        }
    }
    CHECK_THROWS_AS(predict_probabilities({pixel(1)}, {1, 1}), std::invalid_argument);
    CHECK_THROWS_AS(predict_probabilities({pixel(1), ad::constant(Tensor({2, 2}))}, {1, 1}), std::invalid_argument);
}

TEST_CASE("softmax + log + cross-entropy gradient on random 2x3x3 inputs")
{
    Rng rng(5);
    Mask target(3, 3);
    for (auto& v : target.values()) v = uniform01(rng) < 0.5;
    const Tensor x = random_tensor({2, 3, 3}, rng, -3, 3);
    const Real err = testing::gradient_error(
        [&](const ad::Var& v) {
            return train::segmentation_loss(class_probabilities({ad::reshape(ad::slice_rows(ad::reshape(v, {2, 9}), 0, 1), {3, 3}),
                                                                 ad::reshape(ad::slice_rows(ad::reshape(v, {2, 9}), 1, 1), {3, 3})}),
                                            target);
        },
        x);
    CHECK(err < 1e-4);
}

TEST_CASE("segment_query wires prototypes, fusion and probabilities")
{
    Rng rng(6);
    const auto f = ad::constant(random_tensor({3, 4, 4}, rng));
    Image fg(4, 4, 0);
    fg(0, 0) = fg(0, 1) = fg(1, 0) = fg(1, 1) = 1;
    const auto set = proto::assemble_prototype_set({{f, proto::binary_class_weights(fg)}}, {2, 2}, 0.95);
    const auto q = segment_query(set, f, {8, 8});
    CHECK(q.fused.shape() == std::vector<int>{2, 4, 4});
    CHECK(q.probs.shape() == std::vector<int>{2, 8, 8});
    const auto manual = fuse_similarities(local_similarity_maps(set.of_class(1).vectors, f)).value();
    for (int i = 0; i < 16; ++i) CHECK(q.fused.value()[16 + i] == manual[i]);
}
