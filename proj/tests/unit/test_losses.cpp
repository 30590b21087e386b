// SPDX-License-Identifier: Apache-2.0
#include "doctest_torch.hpp"

#include <cmath>

#include "voxseg/error.hpp"
#include "voxseg/losses.hpp"

using namespace voxseg;

namespace {

torch::Tensor onehot4(const torch::Tensor& target) {
  return torch::one_hot(target, 4).permute({0, 4, 1, 2, 3}).to(torch::kFloat64);
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("soft dice extremes") {
    auto target = torch::randint(0, 4, {2, 6, 6, 6}, torch::kInt64);
    CHECK(soft_dice_loss(onehot4(target), target).item<double>() <= 1e-4);

    // Every foreground voxel predicted as background, every background voxel as ED.
    auto t = torch::zeros({1, 6, 6, 6}, torch::kInt64);
    t.narrow(1, 0, 2).fill_(1);
    t.narrow(1, 2, 2).fill_(2);
    t.narrow(1, 4, 1).fill_(3);
    auto wrong = torch::where(t > 0, torch::zeros_like(t), torch::full_like(t, 2));
    CHECK(soft_dice_loss(onehot4(wrong), t).item<double>() >= 0.999);
  }

  TEST_CASE("half overlap gives dice one half") {
    auto target = torch::zeros({1, 4, 4, 4}, torch::kInt64);
    auto pred = torch::zeros({1, 4, 4, 4}, torch::kInt64);
    target.view(-1).narrow(0, 0, 8).fill_(2);
    pred.view(-1).narrow(0, 4, 8).fill_(2);
    auto per_class = soft_dice_per_class(onehot4(pred), target);
    CHECK(per_class[1].item<double>() == doctest::Approx(0.5).epsilon(1e-5));
  }

  TEST_CASE("cross entropy closed forms") {
    auto target = torch::randint(0, 4, {1, 5, 5, 5}, torch::kInt64);
    auto confident = onehot4(target) * 30.0;
    CHECK(voxseg::cross_entropy_loss(confident, target).item<double>() < 1e-9);
    auto uniform = torch::zeros({1, 4, 5, 5, 5}, torch::kFloat64);
    CHECK(voxseg::cross_entropy_loss(uniform, target).item<double>() == doctest::Approx(std::log(4.0)).epsilon(1e-9));
  }

  TEST_CASE("cross entropy matches a literal per-voxel sum") {
    torch::manual_seed(3);
    auto logits = torch::randn({2, 4, 3, 4, 5}, torch::kFloat64);
    auto target = torch::randint(0, 4, {2, 3, 4, 5}, torch::kInt64);
    double total = 0;
    int64_t count = 0;
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t z = 0; z < 3; ++z)
        for (int64_t y = 0; y < 4; ++y)
          for (int64_t x = 0; x < 5; ++x) {
            double denom = 0;
            for (int64_t c = 0; c < 4; ++c) denom += std::exp(logits[n][c][z][y][x].item<double>());
            const int64_t k = target[n][z][y][x].item<int64_t>();
            total += std::log(denom) - logits[n][k][z][y][x].item<double>();
            ++count;
          }
    CHECK(voxseg::cross_entropy_loss(logits, target).item<double>() == doctest::Approx(total / count).epsilon(1e-12));
  }

  TEST_CASE("soft dice matches a literal sum") {
    torch::manual_seed(4);
    auto probs = torch::softmax(torch::randn({1, 4, 4, 4, 4}, torch::kFloat64), 1);
    auto target = torch::randint(0, 4, {1, 4, 4, 4}, torch::kInt64);
    double mean = 0;
    for (int64_t c = 1; c < 4; ++c) {
      double inter = 0, sp = 0, st = 0;
      for (int64_t i = 0; i < 64; ++i) {
        const double p = probs[0][c].view(-1)[i].item<double>();
        const double t = target[0].view(-1)[i].item<int64_t>() == c ? 1.0 : 0.0;
        inter += p * t;
        sp += p;
        st += t;
      }
      mean += (2 * inter + 1e-5) / (sp + st + 1e-5) / 3.0;
    }
    CHECK(soft_dice_loss(probs, target).item<double>() == doctest::Approx(1 - mean).epsilon(1e-12));
  }

  TEST_CASE("combined weighting") {
    torch::manual_seed(5);
    auto logits = torch::randn({1, 4, 6, 6, 6});
    auto target = torch::randint(0, 4, {1, 6, 6, 6}, torch::kInt64);
    auto terms = combined_loss(logits, target, 0.4, 0.6);
    CHECK(torch::equal(terms.total, 0.4 * terms.dice + 0.6 * terms.ce));
    CHECK(torch::equal(combined_loss(logits, target, 1.0, 0.0).total, soft_dice_loss(torch::softmax(logits, 1), target)));
    auto half = combined_loss(logits, target, 0.5, 0.5);
    CHECK(half.total.item<double>() == doctest::Approx((half.dice + half.ce).item<double>() / 2).epsilon(1e-6));
    CHECK_THROWS_AS(combined_loss(logits, target, 0.5, 0.6), ValidationError);
    CHECK_THROWS_AS(combined_loss(logits, target, -0.1, 1.1), ValidationError);
  }

  TEST_CASE("errors") {
    auto logits = torch::randn({1, 4, 3, 3, 3});
    auto bad = torch::zeros({1, 3, 3, 3}, torch::kInt64);
    bad[0][1][1][1] = 4;
    CHECK_THROWS_AS(voxseg::cross_entropy_loss(logits, bad), ValidationError);
    CHECK_THROWS_AS(voxseg::cross_entropy_loss(logits, torch::zeros({1, 3, 3, 2}, torch::kInt64)), ShapeError);
    CHECK_THROWS_AS(soft_dice_loss(torch::softmax(logits, 1), torch::zeros({1, 2, 3, 3}, torch::kInt64)), ShapeError);
  }

  TEST_CASE("reconstruction loss") {
    auto x = torch::randn({1, 4, 5, 5, 5});
    CHECK(reconstruction_loss(x, x).item<double>() == 0.0);
    CHECK(reconstruction_loss(x + 1, x).item<double>() == doctest::Approx(1.0).epsilon(1e-6));
    auto y = torch::randn({1, 4, 5, 5, 5});
    double total = 0;
    auto xd = x.to(torch::kFloat64).contiguous(), yd = y.to(torch::kFloat64).contiguous();
    for (int64_t i = 0; i < xd.numel(); ++i) total += std::abs(xd.data_ptr<double>()[i] - yd.data_ptr<double>()[i]);
    CHECK(reconstruction_loss(y, x).item<double>() == doctest::Approx(total / xd.numel()).epsilon(1e-6));
    CHECK_THROWS_AS(reconstruction_loss(y, x.narrow(2, 0, 4)), ShapeError);
  }

  TEST_CASE("cross entropy is convex in the predicted probabilities") {
    torch::manual_seed(6);
    auto target = torch::randint(0, 4, {1, 6, 6, 6}, torch::kInt64);
    for (int trial = 0; trial < 10; ++trial) {
      auto a = torch::softmax(torch::randn({1, 4, 6, 6, 6}, torch::kFloat64), 1);
      auto b = torch::softmax(torch::randn({1, 4, 6, 6, 6}, torch::kFloat64), 1);
      const double la = voxseg::cross_entropy_loss(torch::log(a), target).item<double>();
      const double lb = voxseg::cross_entropy_loss(torch::log(b), target).item<double>();
      const double lm = voxseg::cross_entropy_loss(torch::log(0.5 * a + 0.5 * b), target).item<double>();
      CHECK(lm <= 0.5 * (la + lb) + 1e-12);
    }
  }
}
