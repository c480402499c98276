#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "gradcheck.hpp"
#include "mmformer/errors.hpp"
#include "mmformer/ops.hpp"
#include "mmformer/pos.hpp"

using namespace mmformer;
using mmformer::testing::grad_check;
using mmformer::testing::random_tensor;

namespace {

double brute_force(const std::vector<double>& cost, std::size_t rows, std::size_t cols) {
  std::vector<std::size_t> perm(rows);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) total += cost[perm[j] * cols + j];
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

struct Fixture {
  ParamStore store;
  Encoder encoder;
  Pos pos;
  Fixture(std::size_t n = 6) {
    encoder = Encoder(store, "encoder", 1, 16);
    Rng rng(2);
    pos = Pos(store, "pos", PosConfig{16, 4, 32, n, false}, rng);
  }
};

}  // namespace

TEST_CASE("hungarian matches exhaustive search on 200 matrices") {
  Rng rng(123);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + rng.below(6);
    const std::size_t cols = 1 + rng.below(rows);
    std::vector<double> cost(rows * cols);
    for (auto& c : cost) c = trial % 3 == 0 ? static_cast<double>(rng.below(4)) : rng.uniform(-5.0, 5.0);
    const auto a = hungarian(cost, rows, cols);
    CHECK(a.total_cost == doctest::Approx(brute_force(cost, rows, cols)).epsilon(1e-12));
    REQUIRE(a.pairs.size() == cols);
    std::vector<bool> used(rows, false);
    for (std::size_t j = 0; j < cols; ++j) {
      CHECK(a.pairs[j].second == j);
      CHECK_FALSE(used[a.pairs[j].first]);
      used[a.pairs[j].first] = true;
    }
  }
}

TEST_CASE("hungarian examples") {
  const auto a = hungarian({1, 2, 3, 1}, 2, 2);
  CHECK(a.total_cost == 2.0);
  CHECK(a.pairs[0] == std::pair<std::size_t, std::size_t>{0, 0});
  CHECK(a.pairs[1] == std::pair<std::size_t, std::size_t>{1, 1});
  CHECK(hungarian({4, 2, 7}, 3, 1).pairs[0].first == 1);
  CHECK(hungarian({1, 1, 1, 1, 1, 1}, 3, 2).total_cost == 2.0);
  CHECK_THROWS_AS(hungarian({1, 2}, 1, 2), ConfigError);
}

TEST_CASE("dice loss identities") {
  Tensor gt({1, 6}, {1, 1, 1, 0, 0, 0});
  CHECK(dice_loss(gt, gt).item() == 0.0);
  Tensor other({1, 6}, {0, 0, 0, 1, 1, 1});
  CHECK(dice_loss(other, gt).item() == doctest::Approx(1.0 - 1.0 / 7.0));
  const double a = 3;
  CHECK(dice_loss(scale(gt, 0.5), gt).item() == doctest::Approx(1.0 - (a + 1) / (1.5 * a + 1)).epsilon(1e-14));
  CHECK_THROWS_AS(dice_loss(gt, Tensor::zeros({6, 1})), DimensionError);
  CHECK(dice_value(gt.data(), other.data()) == doctest::Approx(dice_loss(gt, other).item()).epsilon(1e-15));
}

TEST_CASE("dice loss gradient") {
  Rng rng(4);
  auto pred = random_tensor({3, 5}, rng, 0.0, 1.0);
  Tensor gt({3, 5}, {1, 0, 1, 1, 0, 0, 0, 1, 1, 0, 1, 1, 1, 0, 0});
  CHECK(grad_check([&] { return dice_loss(pred, gt); }, {pred}).max_relative_error < 1e-5);
}

TEST_CASE("proposal shapes, range and determinism") {
  Fixture f;
  const auto pyramid = f.encoder.encode(generate_scene(1, Split::train).image);
  const auto p = f.pos.propose(pyramid);
  CHECK(p.masks.shape() == Shape{6, 256});
  CHECK(p.height == 16);
  CHECK(p.width == 16);
  CHECK(p.embeddings.shape() == Shape{6, 16});
  for (double v : p.masks.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  const auto again = f.pos.propose(pyramid);
  CHECK(std::equal(p.masks.data().begin(), p.masks.data().end(), again.masks.data().begin()));
  for (const auto& name : f.store.names("pos")) {
    CHECK(name.find("class") == std::string::npos);
  }
}

TEST_CASE("zero projection gives uniform one-half masks") {
  Fixture f;
  for (auto& v : f.store.at("pos.proj.weight").mutable_data()) v = 0.0;
  for (auto& v : f.store.at("pos.proj.bias").mutable_data()) v = 0.0;
  const auto p = f.pos.propose(f.encoder.encode(generate_scene(2, Split::train).image));
  for (double v : p.masks.data()) CHECK(v == 0.5);

  // Closed form of the matched loss for uniform 0.5 proposals.
  const auto scene = generate_scene(2, Split::train);
  std::vector<Mask> gts;
  for (const auto& o : scene.objects) gts.push_back(o.mask);
  double expected = 0.0;
  for (const auto& m : gts) {
    const double a = static_cast<double>(to_proposal_grid(m, 16, 16).count());
    expected += 1.0 - (2.0 * 0.5 * a + 1.0) / (0.5 * 256 + a + 1.0);
  }
  expected /= static_cast<double>(gts.size());
  CHECK(pos_loss(p, gts).item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("proposal loss picks the cheaper pairing") {
  ProposalSet p;
  p.height = 2;
  p.width = 2;
  p.masks = Tensor({3, 4}, {0, 0, 1, 1, 1, 1, 0, 0, 0.5, 0.5, 0.5, 0.5});
  Mask top(4, 4), bottom(4, 4);
  for (std::size_t x = 0; x < 4; ++x) {
    top.pixels[x] = top.pixels[4 + x] = 1;
    bottom.pixels[8 + x] = bottom.pixels[12 + x] = 1;
  }
  Assignment a;
  const auto loss = pos_loss(p, {top, bottom}, &a);
  CHECK(loss.item() == 0.0);
  CHECK(a.pairs[0].first == 1);
  CHECK(a.pairs[1].first == 0);
  CHECK_THROWS_AS(pos_loss(p, {}), ContractError);
  CHECK_THROWS_AS(pos_loss(p, {top, bottom, top, bottom}), ConfigError);
}

TEST_CASE("nearest grid sampling reads pixel centres") {
  Mask m(8, 8);
  m.pixels[2 * 8 + 2] = 1;
  const auto g = to_proposal_grid(m, 2, 2);
  CHECK(g.count() == 1);
  CHECK(g.at(0, 0) == 1);
}

TEST_CASE("proposal loss gradient through the segmenter") {
  ParamStore store;
  Encoder enc(store, "encoder", 3, 8);
  Rng rng(5);
  Pos pos(store, "pos", PosConfig{8, 2, 16, 3, true}, rng);
  const auto scene = generate_scene(6, Split::train, {32, 0});
  const auto pyramid = enc.encode(scene.image);
  std::vector<Mask> gts;
  for (const auto& o : scene.objects) gts.push_back(o.mask);
  if (gts.size() > 3) gts.resize(3);
  std::vector<Tensor> params;
  for (const auto& name : store.trainable_names()) params.push_back(store.at(name));
  // Matching is piecewise constant; the check holds on the fixed assignment's neighbourhood.
  const auto r = grad_check([&] { return pos_loss(pos.propose(pyramid), gts); }, params);
  CHECK(r.max_relative_error < 1e-5);
}
