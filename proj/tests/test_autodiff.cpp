// Every op's backward against central finite differences.

#include "test_support.hpp"

using namespace protoseg;
using ad::Var;
using testing::gradient_error;
using testing::random_tensor;

namespace {

/// Reduces any output to a scalar with fixed random weights so every output
/// element contributes a distinct amount to the gradient.
Var probe(const Var& y, std::uint64_t seed = 99)
{
    Rng rng(seed);
    return ad::sum_all(ad::mul(y, ad::constant(random_tensor(y.shape(), rng))));
}

constexpr Real tol = 1e-6;

}  // namespace

TEST_CASE("elementwise ops")
{
    Rng rng(1);
    const Tensor x = random_tensor({3, 4}, rng);
    const Var other = ad::constant(random_tensor({3, 4}, rng));
    CHECK(gradient_error([&](const Var& v) { return probe(ad::add(v, other)); }, x) < tol);
    CHECK(gradient_error([&](const Var& v) { return probe(ad::sub(other, v)); }, x) < tol);
    CHECK(gradient_error([&](const Var& v) { return probe(ad::mul(v, v)); }, x) < tol);
    CHECK(gradient_error([&](const Var& v) { return probe(ad::scale(v, -2.5)); }, x) < tol);
    CHECK(gradient_error([&](const Var& v) { return probe(ad::gelu(v)); }, x) < tol);
    // keep inputs away from the kink
    Tensor xr = x;
    for (auto& v : xr.values()) v += v > 0 ? 0.1 : -0.1;
    CHECK(gradient_error([&](const Var& v) { return probe(ad::relu(v)); }, xr) < tol);
}

TEST_CASE("shape ops")
{
    Rng rng(2);
    const Tensor x = random_tensor({4, 6}, rng);
    CHECK(gradient_error([](const Var& v) { return probe(ad::reshape(v, {3, 8})); }, x) < tol);
    CHECK(gradient_error([](const Var& v) { return probe(ad::transpose(v)); }, x) < tol);
    CHECK(gradient_error([](const Var& v) { return probe(ad::slice_rows(v, 1, 2)); }, x) < tol);
    CHECK(gradient_error([](const Var& v) { return probe(ad::slice_cols(v, 2, 3)); }, x) < tol);
    CHECK(gradient_error([](const Var& v) { return probe(ad::concat_rows({v, ad::scale(v, 2)})); }, x) < tol);
    CHECK(gradient_error([](const Var& v) { return probe(ad::concat_cols({ad::scale(v, 3), v})); }, x) < tol);
    CHECK(gradient_error([](const Var& v) { return probe(ad::stack({v, ad::mul(v, v)})); }, x) < tol);
    const Tensor img = random_tensor({2, 3, 5}, rng);
    CHECK(gradient_error([](const Var& v) { return probe(ad::pad_bottom_right(v, 2, 1)); }, img) < tol);
    CHECK(gradient_error([](const Var& v) { return probe(ad::crop_top_left(v, 2, 4)); }, img) < tol);
}

TEST_CASE("linear algebra")
{
    Rng rng(3);
    const Tensor a = random_tensor({3, 4}, rng);
    const Var b = ad::constant(random_tensor({4, 5}, rng));
    const Var w = ad::constant(random_tensor({2, 4}, rng));
    const Var bias = ad::constant(random_tensor({2}, rng));
    const Var row = ad::constant(random_tensor({4}, rng));
    CHECK(gradient_error([&](const Var& v) { return probe(ad::matmul(v, b)); }, a) < tol);
    CHECK(gradient_error([&](const Var& v) { return probe(ad::matmul(ad::transpose(b), ad::transpose(v))); }, a) < tol);
    CHECK(gradient_error([&](const Var& v) { return probe(ad::linear(v, w, bias)); }, a) < tol);
    CHECK(gradient_error([&](const Var& v) { return probe(ad::linear(v, w, Var())); }, a) < tol);
    CHECK(gradient_error([&](const Var& v) { return probe(ad::add_rowvec(v, row)); }, a) < tol);
    CHECK(gradient_error([&](const Var& v) { return probe(ad::mul_rowvec(v, row)); }, a) < tol);

    // gradients w.r.t. the weight side
    const Var x = ad::constant(a);
    CHECK(gradient_error([&](const Var& v) { return probe(ad::linear(x, v, bias)); }, w.value()) < tol);
    CHECK(gradient_error([&](const Var& v) { return probe(ad::linear(x, w, v)); }, bias.value()) < tol);
    CHECK(gradient_error([&](const Var& v) { return probe(ad::mul_rowvec(x, v)); }, row.value()) < tol);
}

TEST_CASE("image ops")
{
    Rng rng(4);
    const Tensor x = random_tensor({2, 7, 6}, rng);
    const Tensor w = random_tensor({3, 2, 3, 3}, rng);
    const Tensor b = random_tensor({3}, rng);
    for (int dil : {1, 2}) {
        for (int stride : {1, 2}) {
            CHECK(gradient_error(
                      [&](const Var& v) { return probe(ad::conv2d(v, ad::constant(w), ad::constant(b), stride, dil, dil)); },
                      x) < tol);
            CHECK(gradient_error(
                      [&](const Var& v) { return probe(ad::conv2d(ad::constant(x), v, ad::constant(b), stride, dil, dil)); },
                      w) < tol);
        }
    }
    CHECK(gradient_error([&](const Var& v) { return probe(ad::conv2d(ad::constant(x), ad::constant(w), v, 1, 1, 1)); },
                         b) < tol);
    CHECK(gradient_error([](const Var& v) { return probe(ad::window_mean(v, 3, 4)); }, x) < tol);
    CHECK(gradient_error([](const Var& v) { return probe(ad::resize_bilinear(v, 11, 4)); }, x) < tol);
}

TEST_CASE("normalization and reductions")
{
    Rng rng(5);
    const Tensor x = random_tensor({4, 6}, rng);
    const Var gamma = ad::constant(random_tensor({6}, rng, 0.5, 1.5));
    const Var beta = ad::constant(random_tensor({6}, rng));
    CHECK(gradient_error([&](const Var& v) { return probe(ad::layer_norm(v, gamma, beta, 1e-6)); }, x) < tol);
    CHECK(gradient_error([&](const Var& v) { return probe(ad::layer_norm(ad::constant(x), v, beta, 1e-6)); },
                         gamma.value()) < tol);
    CHECK(gradient_error([](const Var& v) { return probe(ad::softmax_rows(v)); }, x) < tol);
    const Tensor maps = random_tensor({3, 4, 5}, rng);
    CHECK(gradient_error([](const Var& v) { return probe(ad::softmax_leading(v)); }, maps) < tol);
    CHECK(gradient_error([](const Var& v) { return probe(ad::sum_leading(v)); }, maps) < tol);
    CHECK(gradient_error([](const Var& v) { return ad::add_scalars(ad::sum_all(v), ad::sum_all(ad::mul(v, v))); },
                         maps) < tol);
}

TEST_CASE("prototype primitives")
{
    Rng rng(6);
    const Tensor f = random_tensor({3, 4, 5}, rng);
    Tensor weights({4, 5});
    for (auto& v : weights.values()) v = uniform01(rng) < 0.4 ? uniform01(rng) : 0;
    weights[0] = 1;
    CHECK(gradient_error([&](const Var& v) { return probe(ad::masked_mean(v, weights)); }, f) < tol);
    CHECK(gradient_error([](const Var& v) { return probe(ad::gather_cells(v, {{0, 1}, {3, 4}, {0, 1}})); }, f) < tol);

    const Tensor protos = random_tensor({2, 3}, rng);
    CHECK(gradient_error([&](const Var& v) { return probe(ad::cosine_maps(v, ad::constant(f), 20, 1e-8)); }, protos) <
          tol);
    CHECK(gradient_error([&](const Var& v) { return probe(ad::cosine_maps(ad::constant(protos), v, 20, 1e-8)); }, f) <
          tol);

    Tensor target({2, 4, 5});
    for (int i = 0; i < 20; ++i) target[i + (i % 3 == 0 ? 20 : 0)] = 1;
    CHECK(gradient_error([&](const Var& v) { return ad::cross_entropy(ad::softmax_leading(v), target, 1e-5); },
                         random_tensor({2, 4, 5}, rng)) < tol);
}

TEST_CASE("no-grad guard records nothing; gradients accumulate across uses")
{
    Var p = ad::parameter(Tensor({2}, std::vector<Real>{1, 2}));
    {
        ad::NoGradGuard guard;
        CHECK_FALSE(ad::grad_enabled());
        const Var y = ad::mul(p, p);
        CHECK(y.node()->inputs.empty());
    }
    CHECK(ad::grad_enabled());
    ad::backward(ad::sum_all(ad::add(p, p)));
    CHECK(p.grad()[0] == 2);
    CHECK(p.grad()[1] == 2);
}
