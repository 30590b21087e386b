// SPDX-License-Identifier: Apache-2.0
#include "doctest_torch.hpp"

#include "../oracles.hpp"
#include "helpers.hpp"
#include "voxseg/error.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/postprocess.hpp"

using namespace voxseg;

namespace {

ProbabilityVolume constant_probs(std::array<float, 4> v, Shape3 s = {3, 3, 3}) {
  auto t = torch::empty({4, s[0], s[1], s[2]});
  for (int c = 0; c < 4; ++c) t[c].fill_(v[c]);
  return ProbabilityVolume(t);
}

ProbabilityVolume random_probs(uint64_t seed, Shape3 s) {
  auto gen = at::detail::createCPUGenerator(seed);
  return ProbabilityVolume(torch::softmax(torch::randn({4, s[0], s[1], s[2]}, gen), 0));
}

}  // namespace

TEST_SUITE("fusion") {
  TEST_CASE("published weight sets") {
    const auto two = EnsembleWeights::two_model();
    CHECK(two.ncr == std::vector<double>{0.5, 0.5});
    CHECK(two.ed == std::vector<double>{0.7, 0.3});
    CHECK(two.et == std::vector<double>{0.6, 0.4});
    CHECK_NOTHROW(two.validate(2));
    const auto three = EnsembleWeights::three_model();
    CHECK(three.ncr == std::vector<double>{0.359, 0.347, 0.294});
    CHECK(three.ed == std::vector<double>{0.253, 0.387, 0.36});
    CHECK(three.et == std::vector<double>{0.295, 0.353, 0.351});
    CHECK_NOTHROW(EnsembleWeights::uniform(3).validate(3));
  }

  TEST_CASE("weight validation") {
    auto w = EnsembleWeights::two_model();
    CHECK_THROWS_AS(w.validate(3), ValidationError);
    w.ed = {0.8, 0.3};
    CHECK(testutil::error_of<ValidationError>([&] { w.validate(2); }).find("ensemble.weights.ed") != std::string::npos);
    w = EnsembleWeights::two_model();
    w.et = {1.2, -0.2};
    CHECK_THROWS_AS(w.validate(2), ValidationError);
  }

  TEST_CASE("hand-computed two-model fusion") {
    const std::vector<ProbabilityVolume> m{constant_probs({0.1f, 0.2f, 0.3f, 0.4f}),
                                           constant_probs({0.4f, 0.3f, 0.2f, 0.1f})};
    auto s = ensemble_scores(m, EnsembleWeights::two_model());
    const double a[4] = {0.1f, 0.2f, 0.3f, 0.4f}, b[4] = {0.4f, 0.3f, 0.2f, 0.1f};
    const double want[4] = {0.5 * a[0] + 0.5 * b[0], 0.5 * a[1] + 0.5 * b[1], 0.7 * a[2] + 0.3 * b[2],
                            0.6 * a[3] + 0.4 * b[3]};
    for (int c = 0; c < 4; ++c) CHECK(s[c].min().item<double>() == doctest::Approx(want[c]).epsilon(1e-12));
    CHECK_THROWS_AS(ensemble_scores({m[0], constant_probs({0.25f, 0.25f, 0.25f, 0.25f}, {3, 3, 4})},
                                    EnsembleWeights::two_model()),
                    ShapeError);
  }

  TEST_CASE("identical members reproduce the member") {
    auto p = random_probs(1, {6, 5, 4});
    auto fused = ensemble_average({p, p}, EnsembleWeights::two_model());
    CHECK(torch::allclose(fused.data(), p.data(), 0, 1e-6));
    CHECK(torch::equal(ensemble_labels({p, p, p}, EnsembleWeights::uniform(3)).data(), argmax_labels(p).data()));
  }

  TEST_CASE("argmax labels") {
    auto lab = testutil::random_labels(5, 6, 7, 3);
    auto channel = LabelVolume(lab).channel_indices();
    auto onehot = torch::one_hot(channel, 4).permute({3, 0, 1, 2}).to(torch::kFloat32);
    CHECK(torch::equal(argmax_labels(ProbabilityVolume(onehot)).data(), lab));
    CHECK((argmax_labels(constant_probs({0.25f, 0.25f, 0.25f, 0.25f})).data() == 0).all().item<bool>());

    auto p = random_probs(4, {8, 8, 8});
    auto unnormalized = p.data() * 2;
    CHECK(torch::equal(argmax_labels(unnormalized, {}).data(), argmax_labels(p).data()));
  }
}

TEST_SUITE("postprocess") {
  TEST_CASE("component labeling basics") {
    auto empty = connected_components(torch::zeros({4, 4, 4}, torch::kBool), Connectivity::Six);
    CHECK(empty.count() == 0);

    auto corner = torch::zeros({4, 4, 4}, torch::kBool);
    corner[1][1][1] = true;
    corner[2][2][2] = true;
    CHECK(connected_components(corner, Connectivity::Six).count() == 2);
    CHECK(connected_components(corner, Connectivity::TwentySix).count() == 1);
    CHECK_THROWS_AS(parse_connectivity(18), ValidationError);
  }

  TEST_CASE("labeling invariants and refinement") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
      auto mask = oracle::random_mask(rng, 12, 14, 10, 0.3);
      auto six = connected_components(mask, Connectivity::Six);
      auto full = connected_components(mask, Connectivity::TwentySix);
      for (const auto* cc : {&six, &full}) {
        int64_t total = 0;
        for (auto s : cc->sizes) total += s;
        CHECK(total == mask.sum().item<int64_t>());
        CHECK(cc->labels.max().item<int>() == cc->count());
        // Dense ids: every id in 1..K appears.
        CHECK(std::get<0>(torch::_unique(cc->labels.masked_select(mask))).numel() == cc->count());
      }
      // Each 6-component lies inside exactly one 26-component.
      auto pairs = six.labels.masked_select(mask).to(torch::kInt64) * 100000 + full.labels.masked_select(mask);
      CHECK(std::get<0>(torch::_unique(pairs)).numel() == six.count());
      CHECK(full.count() <= six.count());
    }
  }

  TEST_CASE("small component removal") {
    auto t = torch::zeros({20, 20, 20}, torch::kUInt8);
    t[2][2].narrow(0, 0, 14).fill_(2);
    t[10][10].narrow(0, 0, 15).fill_(4);
    const LabelVolume l(t);
    auto r = remove_small_components(l);
    CHECK(r.count(Label::Edema) == 0);
    CHECK(r.count(Label::Enhancing) == 15);
    CHECK(torch::equal(remove_small_components(l, 0).data(), t));
  }

  TEST_CASE("per-class scope splits mixed components") {
    // One 20-voxel foreground blob made of a 12-voxel NCR run and an 8-voxel ED run.
    auto t = torch::zeros({10, 10, 30}, torch::kUInt8);
    t[5][5].narrow(0, 0, 12).fill_(1);
    t[5][5].narrow(0, 12, 8).fill_(2);
    const LabelVolume l(t);
    CHECK(torch::equal(remove_small_components(l, 15, Connectivity::TwentySix, CcaScope::WholeForeground).data(), t));
    auto per = remove_small_components(l, 10, Connectivity::TwentySix, CcaScope::PerClass);
    CHECK(per.count(Label::Necrosis) == 12);
    CHECK(per.count(Label::Edema) == 0);
  }

  TEST_CASE("removal only deletes and is idempotent") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
      auto l = LabelVolume(testutil::random_labels(16, 16, 16, seed));
      auto sparse = l.with_data(torch::where(torch::rand({16, 16, 16}) < 0.8, torch::zeros_like(l.data()), l.data()));
      for (auto scope : {CcaScope::WholeForeground, CcaScope::PerClass}) {
        auto once = remove_small_components(sparse, 5, Connectivity::Six, scope);
        auto kept = once.data() > 0;
        CHECK((kept & ~(sparse.data() > 0)).sum().item<int64_t>() == 0);
        CHECK(torch::equal(once.data().masked_select(kept), sparse.data().masked_select(kept)));
        CHECK(torch::equal(remove_small_components(once, 5, Connectivity::Six, scope).data(), once.data()));
      }
    }
  }

  TEST_CASE("ET replacement") {
    auto t = torch::zeros({10, 10, 10}, torch::kUInt8);
    t.view(-1).narrow(0, 0, 300).fill_(4);
    auto r = et_replacement(LabelVolume(t));
    CHECK(r.count(Label::Enhancing) == 0);
    CHECK(r.count(Label::Necrosis) == 300);
    t.view(-1)[300] = 4;
    CHECK(torch::equal(et_replacement(LabelVolume(t)).data(), t));
    auto none = testutil::random_labels(6, 6, 6, 1);
    none.masked_fill_(none == 4, 2);
    CHECK(torch::equal(et_replacement(LabelVolume(none)).data(), none));
  }

  TEST_CASE("pipeline order and config") {
    PostprocessConfig cfg;
    CHECK_FALSE(cfg.cca_enabled);
    CHECK(cfg.et_replacement_enabled);
    CHECK(cfg.et_threshold == 300);
    cfg.cca_enabled = true;
    // A lone 10-voxel ET speck: CCA removes it first, so nothing is left to relabel as NCR.
    auto t = torch::zeros({20, 20, 20}, torch::kUInt8);
    t[4][4].narrow(0, 0, 10).fill_(4);
    auto out = postprocess(LabelVolume(t), cfg);
    CHECK(out.count(Label::Necrosis) == 0);
    CHECK(out.count(Label::Enhancing) == 0);

    nlohmann::json j = cfg;
    auto back = j.get<PostprocessConfig>();
    CHECK(back.cca_enabled);
    CHECK(back.cca_connectivity == Connectivity::TwentySix);
    cfg.et_threshold = -1;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
  }

  TEST_CASE("postprocess is idempotent on phantoms") {
    PostprocessConfig cfg;
    cfg.cca_enabled = true;
    for (uint64_t seed = 0; seed < 3; ++seed) {
      auto [img, lab] = generate_phantom(seed, {40, 40, 40});
      auto once = postprocess(lab, cfg);
      CHECK(torch::equal(postprocess(once, cfg).data(), once.data()));
    }
  }
}
