// SPDX-License-Identifier: Apache-2.0
#include "doctest_torch.hpp"

#include <set>

#include "helpers.hpp"
#include "voxseg/augment.hpp"
#include "voxseg/error.hpp"
#include "voxseg/phantom.hpp"

using namespace voxseg;

namespace {

std::set<int> label_set(const LabelVolume& l) {
  auto u = std::get<0>(torch::_unique(l.data().to(torch::kInt32)));
  std::set<int> out;
  for (int64_t i = 0; i < u.numel(); ++i) out.insert(u[i].item<int>());
  return out;
}

std::vector<float> sorted_values(const torch::Tensor& t) {
  auto s = std::get<0>(t.flatten().sort()).contiguous();
  return {s.data_ptr<float>(), s.data_ptr<float>() + s.numel()};
}

}  // namespace

TEST_SUITE("augment") {
  TEST_CASE("config validation") {
    AugmentConfig c;
    CHECK_NOTHROW(c.validate());
    c.intensity_factor = 1.0;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = {};
    c.scale_range = {1.2, 0.9};
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = {};
    c.gamma_range = {1.5, 1.5};
    CHECK_THROWS_AS(c.validate(), ValidationError);
  }

  TEST_CASE("z-score") {
    auto gen = at::detail::createCPUGenerator(4);
    auto data = torch::randn({4, 32, 32, 32}, gen) * 2 + 3;
    auto out = zscore_normalize(MultiModalVolume(data), NormalizeMode::Whole).data().to(torch::kFloat64);
    for (int c = 0; c < 4; ++c) {
      // Sample statistics recomputed in float64.
      const double mean = out[c].mean().item<double>();
      const double sd = out[c].std(false).item<double>();
      CHECK(std::abs(mean) < 1e-3);
      CHECK(std::abs(sd - 1) < 1e-3);
    }
    auto again = zscore_normalize(MultiModalVolume(out.to(torch::kFloat32)), NormalizeMode::Whole);
    CHECK(torch::allclose(again.data(), out.to(torch::kFloat32), 0, 1e-5));

    auto flat = torch::randn({4, 8, 8, 8});
    flat[2].fill_(5.0f);
    auto msg = testutil::error_of<ValidationError>([&] { zscore_normalize(MultiModalVolume(flat), NormalizeMode::Whole); });
    CHECK(msg.find("zero variance channel 2") != std::string::npos);
  }

  TEST_CASE("nonzero z-score leaves the background at zero") {
    auto [img, lab] = generate_phantom(8, {40, 40, 40});
    auto out = zscore_normalize(img, NormalizeMode::Nonzero).data();
    auto support = img.data().ne(0).any(0);
    CHECK(out.masked_select(~support.unsqueeze(0).expand_as(out)).abs().max().item<float>() == 0.0f);
    for (int c = 0; c < 4; ++c) {
      auto v = out[c].masked_select(support).to(torch::kFloat64);
      CHECK(std::abs(v.mean().item<double>()) < 1e-3);
    }
  }

  TEST_CASE("crop") {
    Rng rng(1);
    auto full = MultiModalVolume(torch::randn({4, 240, 240, 155}));
    auto full_lab = LabelVolume(torch::zeros({240, 240, 155}, torch::kUInt8));
    auto c = random_crop(full, full_lab, {128, 128, 128}, rng);
    CHECK(c.image.shape() == Shape3{128, 128, 128});
    CHECK(c.labels.shape() == Shape3{128, 128, 128});

    auto exact = MultiModalVolume(torch::randn({4, 128, 128, 128}));
    auto exact_lab = LabelVolume(testutil::random_labels(128, 128, 128, 3));
    auto same = random_crop(exact, exact_lab, {128, 128, 128}, rng);
    CHECK(torch::equal(same.image.data(), exact.data()));
    CHECK(torch::equal(same.labels.data(), exact_lab.data()));
  }

  TEST_CASE("padded crop maps back onto the input") {
    Rng rng(9);
    auto data = torch::rand({4, 100, 100, 100}) + 0.5;
    auto labels = testutil::random_labels(100, 100, 100, 5);
    const MultiModalVolume vol(data);
    for (int trial = 0; trial < 3; ++trial) {
      auto c = random_crop(vol, LabelVolume(labels), {128, 128, 128}, rng);
      // Every output voxel either lies outside the input (zero) or equals the input voxel under the window map.
      const auto out = c.image.data();
      int64_t mismatches = 0;
      for (int64_t z = 0; z < 128; z += 7)
        for (int64_t y = 0; y < 128; y += 5)
          for (int64_t x = 0; x < 128; x += 3) {
            const int64_t iz = z + c.origin[0], iy = y + c.origin[1], ix = x + c.origin[2];
            const bool inside = iz >= 0 && iy >= 0 && ix >= 0 && iz < 100 && iy < 100 && ix < 100;
            const float got = out[1][z][y][x].item<float>();
            const float want = inside ? data[1][iz][iy][ix].item<float>() : 0.0f;
            mismatches += got != want;
          }
      CHECK(mismatches == 0);
    }
  }

  TEST_CASE("flips") {
    auto [img, lab] = generate_phantom(4, {40, 36, 32});
    auto [a, al] = apply_flips(img, lab, {false, false, false});
    CHECK(torch::equal(a.data(), img.data()));
    auto [b, bl] = apply_flips(img, lab, {true, true, true});
    auto [c, cl] = apply_flips(b, bl, {true, true, true});
    CHECK(torch::equal(c.data(), img.data()));
    CHECK(torch::equal(cl.data(), lab.data()));

    Rng rng(3);
    for (int i = 0; i < 8; ++i) {
      auto [f, fl] = random_flip(img, lab, rng);
      CHECK(sorted_values(f.data()) == sorted_values(img.data()));
      CHECK(fl.count(Label::Enhancing) == lab.count(Label::Enhancing));
    }
  }

  TEST_CASE("intensity shift") {
    Rng rng(12);
    for (int i = 0; i < 200; ++i) {
      auto p = draw_intensity_shift(0.1, rng);
      for (int c = 0; c < 4; ++c) {
        CHECK(p.scale[c] >= 0.9f);
        CHECK(p.scale[c] <= 1.1f);
        CHECK(p.shift[c] >= -0.1f);
        CHECK(p.shift[c] <= 0.1f);
      }
    }
    auto data = torch::randn({4, 10, 10, 10});
    auto tiny = random_intensity_shift(MultiModalVolume(data), 1e-9, rng);
    CHECK(torch::allclose(tiny.data(), data, 0, 1e-6));

    IntensityShift s;
    s.scale = {1.05f, 0.95f, 1.0f, 1.1f};
    s.shift = {0.02f, -0.03f, 0.0f, 0.1f};
    auto constant = MultiModalVolume(torch::full({4, 6, 6, 6}, 2.0f));
    auto out = apply_intensity_shift(constant, s).data();
    for (int c = 0; c < 4; ++c) {
      const float want = 2.0f * s.scale[c] + s.shift[c];
      CHECK(out[c].min().item<float>() == doctest::Approx(want).epsilon(1e-6));
      CHECK(out[c].max().item<float>() == doctest::Approx(want).epsilon(1e-6));
    }
  }

  TEST_CASE("nonzero crop") {
    auto data = torch::zeros({4, 64, 64, 64});
    data.narrow(1, 10, 10).narrow(2, 10, 10).narrow(3, 10, 10).fill_(1.0f);
    auto labels = LabelVolume(torch::zeros({64, 64, 64}, torch::kUInt8));
    auto c = nonzero_crop(MultiModalVolume(data), labels);
    CHECK(c.bbox == BoundingBox{{10, 10, 10}, {20, 20, 20}});
    CHECK(c.image.shape() == Shape3{10, 10, 10});

    auto dense = torch::rand({4, 12, 11, 10}) + 0.1;
    auto d = nonzero_crop(MultiModalVolume(dense), LabelVolume(torch::zeros({12, 11, 10}, torch::kUInt8)));
    CHECK(torch::equal(d.image.data(), dense));

    CHECK_THROWS_AS(nonzero_crop(MultiModalVolume(torch::zeros({4, 8, 8, 8})),
                                 LabelVolume(torch::zeros({8, 8, 8}, torch::kUInt8))),
                    ValidationError);
  }

  TEST_CASE("nnunet plan") {
    AugmentConfig cfg;
    cfg.regime = Regime::NnUNet;
    cfg.crop_size = {40, 40, 40};
    auto [img, lab] = generate_phantom(6, {40, 40, 40});
    auto [same, same_lab] = apply_nnunet_plan(img, lab, NnUNetPlan{}, cfg);
    CHECK(torch::equal(same.data(), img.data()));
    CHECK(torch::equal(same_lab.data(), lab.data()));

    CHECK(torch::equal(apply_gamma(img, 1.0).data(), img.data()));

    const auto before = label_set(lab);
    Rng rng(21);
    cfg.apply_probability = 1.0;
    for (int i = 0; i < 4; ++i) {
      auto [a, al] = nnunet_augment(img, lab, cfg, rng);
      CHECK(a.shape() == img.shape());
      for (int v : label_set(al)) CHECK(before.count(v) == 1);
    }
    AugmentConfig transbts;
    CHECK_THROWS_AS(nnunet_augment(img, lab, transbts, rng), ValidationError);
  }

  TEST_CASE("augment_sample output shape") {
    auto [img, lab] = generate_phantom(2, {48, 44, 40});
    for (Regime r : {Regime::TransBTS, Regime::NnUNet}) {
      AugmentConfig cfg;
      cfg.regime = r;
      cfg.crop_size = {32, 32, 32};
      auto [pi, pl] = preprocess_case(img, lab, r);
      Rng rng(1);
      auto [ai, al] = augment_sample(pi, pl, cfg, rng);
      CHECK(ai.shape() == Shape3{32, 32, 32});
      CHECK(al.shape() == Shape3{32, 32, 32});
    }
  }
}
