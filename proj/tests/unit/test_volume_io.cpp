// SPDX-License-Identifier: Apache-2.0
#include "doctest_torch.hpp"

#include <fstream>

#include "helpers.hpp"
#include "voxseg/error.hpp"
#include "voxseg/io.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/volume.hpp"

using namespace voxseg;
using testutil::error_of;

TEST_SUITE("volume") {
  TEST_CASE("image invariants") {
    CHECK_THROWS_AS(MultiModalVolume(torch::zeros({3, 8, 8, 8})), ValidationError);
    CHECK_THROWS_AS(MultiModalVolume(torch::zeros({4, 8, 8})), ValidationError);
    auto bad = torch::zeros({4, 8, 8, 8});
    bad[1][2][3][4] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(MultiModalVolume{bad}, ValidationError);
    CHECK_THROWS_AS(MultiModalVolume(torch::zeros({4, 8, 8, 8}), Spacing{1, 0, 1}), ValidationError);
    CHECK(MultiModalVolume(torch::zeros({4, 5, 6, 7})).shape() == Shape3{5, 6, 7});
  }

  TEST_CASE("label invariants") {
    auto t = torch::zeros({4, 4, 4}, torch::kUInt8);
    t[1][1][1] = 3;
    CHECK(error_of<ValidationError>([&] { LabelVolume v(t); }).find("illegal label 3") != std::string::npos);
    for (int v : {0, 1, 2, 4}) CHECK(is_valid_label(v));
    for (int v : {3, 5, 255}) CHECK_FALSE(is_valid_label(v));
    for (int c = 0; c < 4; ++c) CHECK(label_to_channel(channel_to_label(c)) == c);
  }

  TEST_CASE("probability invariants") {
    CHECK_NOTHROW(ProbabilityVolume(torch::full({4, 3, 3, 3}, 0.25f)));
    CHECK_THROWS_AS(ProbabilityVolume(torch::full({4, 3, 3, 3}, 0.3f)), ValidationError);
    auto neg = torch::full({4, 3, 3, 3}, 0.25f);
    neg[0].fill_(-0.25f);
    neg[1].fill_(0.75f);
    CHECK_THROWS_AS(ProbabilityVolume{neg}, ValidationError);
  }

  TEST_CASE("region decomposition") {
    auto empty = region_decompose(LabelVolume(torch::zeros({5, 5, 5}, torch::kUInt8)));
    CHECK_FALSE(empty.et.any().item<bool>());
    CHECK_FALSE(empty.tc.any().item<bool>());
    CHECK_FALSE(empty.wt.any().item<bool>());

    auto one = torch::zeros({5, 5, 5}, torch::kUInt8);
    one[2][3][4] = 4;
    auto r = region_decompose(LabelVolume(one));
    for (const auto* m : {&r.et, &r.tc, &r.wt}) {
      CHECK((*m)[2][3][4].item<bool>());
      CHECK(m->sum().item<int64_t>() == 1);
    }

    auto [img, lab] = generate_phantom(3, {48, 48, 48});
    auto regions = region_decompose(lab);
    const auto& d = lab.data();
    CHECK(regions.wt.sum().item<int64_t>() == (d == 1).sum().item<int64_t>() + (d == 2).sum().item<int64_t>() +
                                                 (d == 4).sum().item<int64_t>());
    CHECK((regions.et & ~regions.tc).sum().item<int64_t>() == 0);
    CHECK((regions.tc & ~regions.wt).sum().item<int64_t>() == 0);
  }
}

TEST_SUITE("io") {
  TEST_CASE("v3d round trip is bit-identical") {
    const auto dir = testutil::temp_dir("v3d");
    auto data = torch::randn({4, 7, 6, 5});
    write_v3d(dir / "a.v3d", data, {1.5f, 1.0f, 2.0f});
    auto back = read_v3d(dir / "a.v3d");
    CHECK(torch::equal(back.data, data));
    CHECK(back.spacing == Spacing{1.5f, 1.0f, 2.0f});

    auto labels = testutil::random_labels(6, 7, 8, 1);
    save_label_volume(LabelVolume(labels), dir / "l.v3d");
    CHECK(torch::equal(load_labels(dir / "l.v3d").data(), labels));
  }

  TEST_CASE("nifti round trip") {
    const auto dir = testutil::temp_dir("nifti");
    const MultiModalVolume img(torch::randn({4, 9, 8, 7}), {1.0f, 1.2f, 0.8f}, "x");
    save_image(img, dir / "case_001.nii.gz");
    auto back = load_image(dir / "case_001.nii.gz");
    CHECK(torch::equal(back.data(), img.data()));
    CHECK(back.spacing() == img.spacing());
    CHECK(back.case_id() == "case_001");

    const MultiModalVolume zero(torch::zeros({4, 64, 64, 64}));
    save_image(zero, dir / "zero.nii");
    auto z = load_image(dir / "zero.nii");
    CHECK(z.shape() == Shape3{64, 64, 64});
    CHECK(torch::equal(z.data(), zero.data()));

    auto labels = testutil::random_labels(9, 8, 7, 2);
    save_label_volume(LabelVolume(labels), dir / "lab.nii.gz");
    CHECK(torch::equal(load_labels(dir / "lab.nii.gz").data(), labels));

    auto probs = torch::softmax(torch::randn({4, 5, 5, 5}), 0);
    save_probabilities(ProbabilityVolume(probs), dir / "p.v3d");
    CHECK(torch::equal(load_probabilities(dir / "p.v3d").data(), probs));
  }

  TEST_CASE("full-size image keeps its shape") {
    const auto dir = testutil::temp_dir("fullsize");
    auto data = torch::zeros({4, 240, 240, 155});
    data[2][100][17][150] = 3.5f;
    save_image(MultiModalVolume(data), dir / "big.nii.gz");
    auto back = load_image(dir / "big.nii.gz");
    CHECK(back.data().sizes() == torch::IntArrayRef({4, 240, 240, 155}));
    CHECK(back.data()[2][100][17][150].item<float>() == 3.5f);
  }

  TEST_CASE("read errors") {
    const auto dir = testutil::temp_dir("ioerr");
    CHECK_THROWS_AS(load_image(dir / "missing.nii.gz"), IoError);
    {
      std::ofstream(dir / "junk.v3d") << "not a volume";
    }
    CHECK_THROWS_AS(read_v3d(dir / "junk.v3d"), IoError);

    auto bad = torch::zeros({4, 4, 4}, torch::kUInt8);
    bad[0][0][0] = 3;
    write_v3d(dir / "bad.v3d", bad, {});
    CHECK(error_of<ValidationError>([&] { load_labels(dir / "bad.v3d"); }).find("illegal label 3") != std::string::npos);

    write_v3d(dir / "three.v3d", torch::zeros({3, 4, 4, 4}), {});
    CHECK_THROWS_AS(load_image(dir / "three.v3d"), ValidationError);
    CHECK_THROWS_AS(write_v3d(dir / "nope" / "deeper" / "x.v3d", torch::zeros({2, 2, 2}), {}), IoError);
  }

  TEST_CASE("stems") {
    CHECK(volume_stem("a/case_001.nii.gz") == "case_001");
    CHECK(volume_stem("b.v3d") == "b");
    CHECK(volume_stem("c.nii") == "c");
  }
}

TEST_SUITE("phantom") {
  TEST_CASE("deterministic in the seed") {
    auto [a_img, a_lab] = generate_phantom(5, {40, 36, 32});
    auto [b_img, b_lab] = generate_phantom(5, {40, 36, 32});
    CHECK(torch::equal(a_img.data(), b_img.data()));
    CHECK(torch::equal(a_lab.data(), b_lab.data()));
    auto [c_img, c_lab] = generate_phantom(6, {40, 36, 32});
    CHECK_FALSE(torch::equal(a_img.data(), c_img.data()));
  }

  TEST_CASE("seed 1 at 64^3 holds every tumour class") {
    auto [img, lab] = generate_phantom(1, {64, 64, 64});
    CHECK(lab.count(Label::Necrosis) > 0);
    CHECK(lab.count(Label::Edema) > 0);
    CHECK(lab.count(Label::Enhancing) > 0);
    CHECK(img.shape() == lab.shape());
  }

  TEST_CASE("region nesting over 50 seeds") {
    for (uint64_t seed = 0; seed < 50; ++seed) {
      auto [img, lab] = generate_phantom(seed, {32, 32, 32});
      // Voxelwise implication checked on raw values, independent of region_decompose.
      auto d = lab.data().contiguous();
      const auto* p = d.data_ptr<uint8_t>();
      auto r = region_decompose(lab);
      auto et = r.et.contiguous(), tc = r.tc.contiguous(), wt = r.wt.contiguous();
      bool nested = true;
      for (int64_t i = 0; i < d.numel(); ++i) {
        const bool e = p[i] == 4, t = p[i] == 1 || p[i] == 4, w = p[i] != 0;
        nested &= e == et.data_ptr<bool>()[i] && t == tc.data_ptr<bool>()[i] && w == wt.data_ptr<bool>()[i];
        nested &= (!e || t) && (!t || w);
      }
      CHECK_MESSAGE(nested, "seed ", seed);
    }
  }

  TEST_CASE("background is exactly zero and shapes are checked") {
    auto [img, lab] = generate_phantom(2, {48, 40, 32});
    CHECK(img.data().abs().sum(0).eq(0).any().item<bool>());
    CHECK_THROWS_AS(generate_phantom(0, {16, 64, 64}), ValidationError);
  }
}
