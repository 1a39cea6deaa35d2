#include "fd_check.hpp"
#include "oracles.hpp"
#include "vsg/error.hpp"
#include "vsg/tensor.hpp"

#include <doctest.h>

#include <random>

using namespace vsg;
using fdcheck::random_tensor;
using fdcheck::TensorD;
using fdcheck::weighted_sum;

namespace {

std::vector<double> to_vec(const TensorD& t) { return {t.value().data(), t.value().data() + t.numel()}; }

}  // namespace

TEST_CASE("conv3d output sizes") {
  auto x = TensorD::zeros({1, 2, 8, 8, 8});
  auto w = TensorD::zeros({3, 2, 3, 3, 3});
  CHECK(conv3d(x, w, TensorD{}, {2, 2, 2}, {1, 1, 1}).shape() == Shape{1, 3, 4, 4, 4});
  CHECK(conv3d(x, w, TensorD{}, {1, 1, 1}, {0, 0, 0}).shape() == Shape{1, 3, 6, 6, 6});
  auto w2 = TensorD::zeros({3, 2, 1, 3, 3});
  CHECK(conv3d(x, w2, TensorD{}, {1, 2, 2}, {0, 1, 1}).shape() == Shape{1, 3, 8, 4, 4});
  CHECK(conv_out_extent(8, 3, 2, 1) == 4);
}

TEST_CASE("conv3d hand examples") {
  auto ones = TensorD::full({1, 1, 5, 5, 5}, 1.0);
  auto k = TensorD::full({1, 1, 3, 3, 3}, 1.0);
  const auto y = conv3d(ones, k, TensorD::zeros({1}), {1, 1, 1}, {1, 1, 1});
  CHECK(y.value()[(2 * 5 + 2) * 5 + 2] == 27.0);
  CHECK(y.value()[0] == 8.0);

  std::mt19937_64 rng(1);
  auto x = random_tensor({2, 3, 4, 4, 4}, rng, false);
  auto w1 = TensorD::full({1, 3, 1, 1, 1}, 1.0);
  const auto s = conv3d(x, w1, TensorD::zeros({1}), {1, 1, 1}, {0, 0, 0});
  for (int n = 0; n < 2; ++n)
    for (int v = 0; v < 64; ++v) {
      double expect = 0;
      for (int c = 0; c < 3; ++c) expect += x.value()[(n * 3 + c) * 64 + v];
      CHECK(std::abs(s.value()[n * 64 + v] - expect) < 1e-12);
    }
}

TEST_CASE("conv3d matches direct loops") {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> e(3, 6), c(1, 3), st(1, 2), kk(1, 3);
  for (int t = 0; t < 20; ++t) {
    const std::int64_t N = c(rng), C = c(rng), F = c(rng);
    const Shape xs{N, C, e(rng), e(rng), e(rng)};
    const std::array<std::int64_t, 3> k{kk(rng), kk(rng), kk(rng)}, s{st(rng), st(rng), st(rng)},
        p{k[0] / 2, k[1] / 2, k[2] / 2};
    auto x = random_tensor(xs, rng, false), w = random_tensor({F, C, k[0], k[1], k[2]}, rng, false),
         b = random_tensor({F}, rng, false);
    const auto y = conv3d(x, w, b, s, p);
    oracle::ConvShape os;
    auto ref = oracle::conv3d(to_vec(x), {xs[0], xs[1], xs[2], xs[3], xs[4]}, to_vec(w), F, k, s, p, &os);
    REQUIRE(y.shape() == Shape{os.n, os.c, os.x, os.y, os.z});
    const std::int64_t sp = os.x * os.y * os.z;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      ref[i] += b.value()[static_cast<Eigen::Index>((i / sp) % F)];
      CHECK(std::abs(y.value()[static_cast<Eigen::Index>(i)] - ref[i]) < 1e-10);
    }
  }
}

TEST_CASE("transposed conv sizes and identity") {
  auto x = TensorD::zeros({1, 2, 4, 4, 4});
  auto w = TensorD::zeros({2, 3, 2, 2, 2});
  CHECK(conv3d_transposed(x, w, TensorD{}, {2, 2, 2}, {0, 0, 0}).shape() == Shape{1, 3, 8, 8, 8});
  CHECK(conv_transposed_out_extent(4, 2, 2, 0) == 8);

  std::mt19937_64 rng(3);
  auto in = random_tensor({1, 2, 3, 3, 3}, rng, false);
  ArrayX<double> eye = ArrayX<double>::Zero(4);
  eye[0] = eye[3] = 1.0;
  auto id = TensorD::from_values({2, 2, 1, 1, 1}, eye);
  CHECK((conv3d_transposed(in, id, TensorD{}, {1, 1, 1}, {0, 0, 0}).value() == in.value()).all());
}

TEST_CASE("transposed conv is the adjoint of conv (dense matrix oracle)") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 5; ++t) {
    const std::int64_t C = 2, F = 3;
    const std::array<std::int64_t, 3> k{3, 3, 3}, s{2, 2, 2}, p{1, 1, 1};
    const oracle::ConvShape xs{1, C, 5, 5, 5};
    auto w = random_tensor({F, C, 3, 3, 3}, rng, false);
    const auto wv = to_vec(w);
    const std::size_t in_n = 2 * 125;
    oracle::ConvShape os;
    std::vector<std::vector<double>> cols;
    for (std::size_t j = 0; j < in_n; ++j) {
      std::vector<double> e(in_n, 0.0);
      e[j] = 1.0;
      cols.push_back(oracle::conv3d(e, xs, wv, F, k, s, p, &os));
    }
    const std::size_t out_n = cols[0].size();
    auto y = random_tensor({1, F, os.x, os.y, os.z}, rng, false);
    const auto xt = conv3d_transposed(y, w, TensorD{}, s, p);
    REQUIRE(xt.shape() == Shape{1, C, 5, 5, 5});
    for (std::size_t j = 0; j < in_n; ++j) {
      double expect = 0;
      for (std::size_t i = 0; i < out_n; ++i) expect += cols[j][i] * y.value()[static_cast<Eigen::Index>(i)];
      CHECK(std::abs(xt.value()[static_cast<Eigen::Index>(j)] - expect) < 1e-10);
    }
  }
}

TEST_CASE("inner product adjoint identity") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 10; ++t) {
    auto x = random_tensor({2, 3, 6, 4, 8}, rng, false);
    auto w = random_tensor({4, 3, 2, 2, 2}, rng, false);
    const auto cx = conv3d(x, w, TensorD{}, {2, 2, 2}, {0, 0, 0});
    auto y = random_tensor(cx.shape(), rng, false);
    const auto ty = conv3d_transposed(y, w, TensorD{}, {2, 2, 2}, {0, 0, 0});
    REQUIRE(ty.shape() == x.shape());
    const double lhs = (cx.value() * y.value()).sum();
    const double rhs = (x.value() * ty.value()).sum();
    CHECK(std::abs(lhs - rhs) <= 1e-6 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("conv shape errors") {
  auto x = TensorD::zeros({1, 2, 4, 4, 4});
  CHECK_THROWS_AS(conv3d(x, TensorD::zeros({3, 1, 3, 3, 3}), TensorD{}, {1, 1, 1}, {1, 1, 1}), ShapeError);
  CHECK_THROWS_AS(conv3d(x, TensorD::zeros({3, 2, 3, 3, 3}), TensorD::zeros({2}), {1, 1, 1}, {1, 1, 1}), ShapeError);
  CHECK_THROWS_AS(conv3d(x, TensorD::zeros({3, 2, 3, 3, 3}), TensorD{}, {0, 1, 1}, {1, 1, 1}), ShapeError);
  CHECK_THROWS_AS(conv3d(x, TensorD::zeros({3, 2, 7, 3, 3}), TensorD{}, {1, 1, 1}, {1, 1, 1}), ShapeError);
  CHECK_THROWS_AS(conv3d(TensorD::zeros({2, 4, 4, 4}), TensorD::zeros({3, 2, 3, 3, 3}), TensorD{}, {1, 1, 1},
                         {1, 1, 1}),
                  ShapeError);
}

TEST_CASE("finite differences: conv and transposed conv") {
  for (int inst = 0; inst < 5; ++inst) {
    std::mt19937_64 rng(100 + inst);
    const Int3 stride{1 + inst % 2, 1, 2}, pad{1, 0, 1};
    auto x = random_tensor({2, 2, 4, 5, 4}, rng), w = random_tensor({3, 2, 3, 2, 3}, rng),
         b = random_tensor({3}, rng);
    const auto shape = conv3d(x, w, b, stride, pad).shape();
    auto r = random_tensor(shape, rng, false);
    CHECK(fdcheck::max_relative_error([=] { return weighted_sum(conv3d(x, w, b, stride, pad), r); }, {x, w, b}) <
          1e-4);

    auto y = random_tensor({2, 3, 3, 3, 2}, rng), wt = random_tensor({3, 2, 2, 3, 2}, rng),
         bt = random_tensor({2}, rng);
    const Int3 ts{2, 1, 2}, tp{0, 1, 0};
    auto rt = random_tensor(conv3d_transposed(y, wt, bt, ts, tp).shape(), rng, false);
    CHECK(fdcheck::max_relative_error([=] { return weighted_sum(conv3d_transposed(y, wt, bt, ts, tp), rt); },
                                      {y, wt, bt}) < 1e-4);
  }
}
