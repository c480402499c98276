#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "gradcheck.hpp"
#include "mmformer/errors.hpp"
#include "mmformer/mm.hpp"
#include "mmformer/ops.hpp"

using namespace mmformer;
using mmformer::testing::grad_check;
using mmformer::testing::random_tensor;

namespace {

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

void check_close(const Tensor& a, const std::vector<double>& expected, double tol = 1e-12) {
  REQUIRE(a.numel() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (tol == 0.0) {
      CHECK(a[i] == expected[i]);
    } else {
      CHECK(a[i] == doctest::Approx(expected[i]).epsilon(tol));
    }
  }
}

struct Pipeline {
  ParamStore store;
  Encoder encoder;
  Pos pos;
  MaskMatching mm;
  Pipeline(AblationFlags flags, std::size_t d = 16, std::size_t n = 4, std::uint64_t seed = 1) {
    encoder = Encoder(store, "encoder", seed, d);
    Rng pos_rng(derive_seed(seed, "pos"));
    pos = Pos(store, "pos", PosConfig{d, 4, 2 * d, n, false}, pos_rng);
    store.freeze("pos");
    Rng mm_rng(derive_seed(seed, "mm"));
    MmConfig cfg;
    cfg.d_model = d;
    cfg.d_ffn = 2 * d;
    cfg.num_proposals = n;
    cfg.flags = flags;
    mm = MaskMatching(store, "mm", cfg, mm_rng);
  }
};

}  // namespace

TEST_CASE("self alignment oracles") {
  check_close(self_align(Tensor({2, 2}, {1, 1, 1, 1})), {2, 2, 2, 2});
  check_close(self_align(Tensor::zeros({3, 4})), std::vector<double>(12, 0.0));
  Tensor single({1, 3}, {1, -2, 3});
  check_close(self_align(single), {14, -28, 42});
  Tensor f({2, 3}, {1, 2, 3, 0, 1, -1});
  // F_avg = [0.5, 1.5, 1]; A = [6.5, 0.5]
  check_close(self_align(f), {6.5, 13, 19.5, 0, 0.5, -0.5});
  Rng rng(1);
  auto x = random_tensor({4, 6}, rng);
  CHECK(grad_check([&] { return sum_all(mul(self_align(x), self_align(x))); }, {x}).max_relative_error < 1e-5);
}

TEST_CASE("resize matrices") {
  const auto& area = resize_matrix(4, 4, 2, 2);
  Tensor row({1, 16}, {1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 4});
  check_close(matmul(row, area), {1, 0, 0, 1});
  const auto& same = resize_matrix(3, 3, 3, 3);
  Tensor r({1, 9}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  check_close(matmul(r, same), r.data().size() ? std::vector<double>(r.data().begin(), r.data().end()) : std::vector<double>{});
  const auto& up = resize_matrix(2, 2, 4, 4);
  const auto ones = matmul(Tensor::ones({1, 4}), up);
  for (double v : ones.data()) CHECK(v == doctest::Approx(1.0));
  CHECK(&resize_matrix(4, 4, 2, 2) == &area);
}

TEST_CASE("masked GAP oracles") {
  Rng rng(2);
  const auto tokens = random_tensor({16, 3}, rng, -1, 1, false);
  const auto mean_all_ones = masked_gap(tokens, 4, 4, Tensor::ones({1, 16}), 4, 4);
  const auto plain_mean = mean(tokens, 0);
  check_close(mean_all_ones, std::vector<double>(plain_mean.data().begin(), plain_mean.data().end()), 1e-9);
  std::vector<double> hot(16, 0.0);
  hot[5] = 1.0;
  const auto one = masked_gap(tokens, 4, 4, Tensor({1, 16}, hot), 4, 4);
  check_close(one, {tokens[15], tokens[16], tokens[17]}, 1e-6);
  const auto half = masked_gap(tokens, 4, 4, Tensor::full({1, 16}, 0.5), 4, 4);
  check_close(half, std::vector<double>(mean_all_ones.data().begin(), mean_all_ones.data().end()), 1e-9);
  const auto zero = masked_gap(tokens, 4, 4, Tensor::zeros({1, 16}), 4, 4);
  for (double v : zero.data()) CHECK(v == 0.0);
  // Image-resolution mask pooled onto the level grid.
  std::vector<double> big(64, 0.0);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x) big[y * 8 + x] = 1.0;
  const auto corner = masked_gap(tokens, 4, 4, Tensor({1, 64}, big), 8, 8);
  check_close(corner, {tokens[0], tokens[1], tokens[2]}, 1e-6);
  auto t = random_tensor({16, 3}, rng);
  auto m = random_tensor({2, 64}, rng, 0.1, 1.0);
  CHECK(grad_check([&] { return sum_all(masked_gap(t, 4, 4, m, 8, 8)); }, {t, m}).max_relative_error < 1e-5);
}

TEST_CASE("min-max normalization") {
  check_close(minmax_norm(Tensor({1, 3}, {0.2, 0.5, 0.8})), {0.0, 0.3 / (0.6 + 1e-7), 0.6 / (0.6 + 1e-7)}, 1e-12);
  const auto flat = minmax_norm(Tensor({1, 4}, {0.3, 0.3, 0.3, 0.3}));
  for (double v : flat.data()) CHECK(v == 0.0);
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = minmax_norm(random_tensor({1, 7}, rng, -1, 1, false));
    for (double v : s.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("contrastive loss") {
  const auto l = contrastive_loss(Tensor({1, 2}, {0.9, 0.1}), {0.8, 0.1});
  CHECK(l.item() == doctest::Approx(-std::log(0.9)).epsilon(1e-14));
  CHECK(l.item() == doctest::Approx(0.10536).epsilon(1e-4));
  CHECK(contrastive_loss(Tensor({1, 3}, {0.0, 1.0, 0.5}), {0.1, 0.9, 0.5}).item() == 0.0);
  const auto near = contrastive_loss(Tensor({1, 3}, {1 - 1e-9, 0.3, 1e-9}), {0.9, 0.2, 0.1});
  CHECK(near.item() < 1e-8);
  const auto bad = contrastive_loss(Tensor({1, 2}, {0.0, 1.0}), {0.9, 0.1});
  CHECK(std::isfinite(bad.item()));
  CHECK(bad.item() == doctest::Approx(-std::log(1e-7)));
  CHECK_THROWS_AS(contrastive_loss(Tensor({1, 1}, {0.5}), {0.5}), ConfigError);
  Rng rng(4);
  auto s = random_tensor({1, 5}, rng, 0.1, 0.9);
  CHECK(grad_check([&] { return contrastive_loss(s, {0.1, 0.7, 0.2, 0.05, 0.3}); }, {s}).max_relative_error < 1e-5);
}

TEST_CASE("stage-two loss composition") {
  Tensor gt({1, 4}, {1, 1, 0, 0});
  const auto zero = mm_loss(gt, gt, Tensor({1, 2}, {1.0, 0.0}), {0.9, 0.1});
  CHECK(zero.total.item() == 0.0);
  Tensor pred({1, 4}, {0.6, 0.4, 0.2, 0.1});
  Tensor s({1, 2}, {0.7, 0.2});
  const auto base = mm_loss(pred, gt, s, {0.9, 0.1});
  const auto doubled = mm_loss(pred, gt, s, {0.9, 0.1}, 20.0, 6.0);
  CHECK(doubled.dice_term == 2.0 * base.dice_term);
  CHECK(doubled.contrastive_term == base.contrastive_term);
  CHECK(base.total.item() == doctest::Approx(base.dice_term + base.contrastive_term).epsilon(1e-15));
  CHECK(base.dice_term == doctest::Approx(10.0 * dice_loss(pred, gt).item()));
}

TEST_CASE("heuristic and learnable matching") {
  Tensor support({1, 2}, {1, 0});
  Tensor queries({3, 2}, {0.2, 1.0, 0.9, 0.1, 0.5, 0.5});
  Tensor masks({3, 2}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
  const auto h = heuristic_match(support, queries, masks);
  CHECK(h.selected == 1);
  check_close(h.blended, {0.3, 0.4});
  CHECK(h.weights[1] == 1.0);
  const auto tie = heuristic_match(support, Tensor({3, 2}, {1, 0, 2, 0, 3, 0}), masks);
  CHECK(tie.selected == 0);
  const auto same = heuristic_match(support, Tensor({1, 2}, {4, 0}), Tensor({1, 2}, {0.5, 0.5}));
  CHECK(same.similarity.item() == 1.0);
  const auto orth = heuristic_match(support, Tensor({1, 2}, {0, 3}), Tensor({1, 2}, {0.5, 0.5}));
  CHECK(orth.similarity.item() == 0.0);
  const auto degenerate = heuristic_match(Tensor::zeros({1, 2}), queries, masks);
  CHECK(degenerate.degenerate_prototype);
  CHECK(degenerate.selected == 0);

  ParamStore store;
  Rng rng(5);
  LearnableMatching lm(store, "mm.lm", 3, BlendMode::softmax, rng);
  CHECK(store.at("mm.lm.fc0.weight").shape() == Shape{3, 6});
  CHECK(store.at("mm.lm.fc1.weight").shape() == Shape{6, 3});
  const auto r = lm(support, queries, masks);
  double total = 0.0;
  for (double w : r.weights.data()) {
    CHECK(w >= 0.0);
    total += w;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  for (double v : r.blended.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  // One-hot weights reproduce a proposal exactly.
  const auto one_hot = matmul(Tensor({1, 3}, {0, 0, 1}), masks);
  check_close(one_hot, {0.5, 0.6}, 0);

  auto sp = Tensor({1, 2}, {0.3, -0.7}, true);
  auto qp = Tensor({3, 2}, {0.2, 1.0, 0.9, 0.1, -0.5, 0.4}, true);
  std::vector<Tensor> inputs{sp, qp};
  for (const auto& name : store.trainable_names()) inputs.push_back(store.at(name));
  CHECK(grad_check([&] { return dice_loss(lm(sp, qp, masks).blended, Tensor({1, 2}, {1, 0})); }, inputs)
            .max_relative_error < 1e-5);
}

TEST_CASE("cosine scale invariance keeps the heuristic choice") {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const auto support = random_tensor({1, 6}, rng, -1, 1, false);
    const auto queries = random_tensor({5, 6}, rng, -1, 1, false);
    const auto masks = random_tensor({5, 4}, rng, 0, 1, false);
    const auto base = heuristic_match(support, queries, masks);
    const auto scaled = heuristic_match(scale(support, 3.7), queries, masks);
    CHECK(scaled.selected == base.selected);
    for (std::size_t i = 0; i < 5; ++i) CHECK(scaled.similarity[i] == doctest::Approx(base.similarity[i]).epsilon(1e-12));
  }
}

TEST_CASE("cross alignment shares weights and is swap symmetric") {
  ParamStore store;
  Rng rng(7);
  MmConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.d_ffn = 16;
  CrossAlignment ca(&store, "mm.ca3", cfg, true, rng);
  // One parameter set serves both directions.
  CHECK(store.names("mm.ca3").size() == 4 + 2 * (2 + 8 + 4 + 4));
  const auto q = random_tensor({16, 8}, rng, -1, 1, false);
  const auto s = random_tensor({16, 8}, rng, -1, 1, false);
  const auto [aq, as] = ca(q, s, 4, 4, 2, 2);
  const auto [bq, bs] = ca(s, q, 4, 4, 2, 2);
  CHECK(bit_equal(aq, bs));
  CHECK(bit_equal(as, bq));
  CHECK(aq.shape() == Shape{16, 8});
  CHECK_THROWS_AS(ca(q, random_tensor({4, 8}, rng, -1, 1, false), 4, 4, 2, 2), DimensionError);

  // Both directions accumulate into the same tensors.
  const auto& w = store.at("mm.ca3.layer0.cross_attn.q.weight");
  store.zero_grad();
  backward(sum_all(ca.align(q, s, 4, 4, 2, 2)));
  const auto g1 = w.grad();
  backward(sum_all(ca.align(s, q, 4, 4, 2, 2)));
  const auto g2 = w.grad();
  CHECK(g1 != g2);
  CHECK(ca.layers()[0].cross_attention().output_projection()->weight().same_storage(
      store.at("mm.ca3.layer0.cross_attn.out.weight")));
}

TEST_CASE("zero output projections reduce cross alignment to the norm path") {
  ParamStore store;
  Rng rng(8);
  MmConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.d_ffn = 16;
  CrossAlignment ca(&store, "ca", cfg, true, rng);
  for (const auto& name : store.names("ca")) {
    if (name.find(".out.") != std::string::npos || name.find(".ffn.fc1.") != std::string::npos) {
      for (auto& v : store.at(name).mutable_data()) v = 0.0;
    }
  }
  const auto q = random_tensor({16, 8}, rng, -1, 1, false);
  const auto s = random_tensor({16, 8}, rng, -1, 1, false);
  const LayerNorm plain(8);
  const auto expected = plain(plain(q));
  const auto out = ca.align(q, s, 4, 4, 2, 2);
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == doctest::Approx(expected[i]).epsilon(1e-9));
}

TEST_CASE("cross alignment gradients") {
  for (bool parametric : {true, false}) {
    ParamStore store;
    Rng rng(9);
    MmConfig cfg;
    cfg.d_model = 4;
    cfg.heads = 2;
    cfg.d_ffn = 8;
    CrossAlignment ca(&store, "ca", cfg, parametric, rng);
    auto q = random_tensor({4, 4}, rng);
    auto s = random_tensor({4, 4}, rng);
    auto probe = random_tensor({4, 4}, rng, -1, 1, false);
    std::vector<Tensor> inputs{q, s};
    for (const auto& name : store.trainable_names()) inputs.push_back(store.at(name));
    auto loss = [&] {
      const auto [a, b] = ca(q, s, 2, 2, 1, 1);
      return add(sum_all(mul(a, probe)), sum_all(mul(b, mul(probe, probe))));
    };
    CHECK(grad_check(loss, inputs).max_relative_error < 1e-5);
    if (!parametric) CHECK(store.names().empty());
  }
}

TEST_CASE("all-off wiring equals heuristic matching on raw features") {
  Pipeline p({false, CrossMode::off, false});
  CHECK_FALSE(p.mm.has_parameters());
  CHECK(p.store.names("mm").empty());
  const auto ep = sample_episode(3, Split::test, 1);
  const auto fq = p.encoder.encode(ep.query);
  const auto fs = p.encoder.encode(ep.supports[0].image);
  const auto proposals = p.pos.propose(fq);
  const auto r = p.mm.match(fs, ep.supports[0].mask, fq, proposals);
  const auto ps = prototypes(raw_features(fs), ep.supports[0].mask.to_row(), 64, 64);
  const auto pq = prototypes(raw_features(fq), proposals.masks, 16, 16);
  const auto h = heuristic_match(ps, pq, proposals.masks);
  CHECK(r.selected == h.selected);
  CHECK(bit_equal(r.blended, h.blended));
  CHECK(bit_equal(r.similarity, h.similarity));
  CHECK(ps.shape() == Shape{1, 48});
}

TEST_CASE("ablation flags build the expected parameter sets") {
  Pipeline full({true, CrossMode::learned, true});
  CHECK_FALSE(full.store.names("mm.ca3").empty());
  CHECK_FALSE(full.store.names("mm.lm").empty());
  Pipeline np({true, CrossMode::nonparametric, false});
  CHECK(np.store.names("mm").empty());
  CHECK_FALSE(np.mm.has_parameters());
  Pipeline lm({false, CrossMode::off, true});
  CHECK(lm.store.names("mm.ca3").empty());
  CHECK(describe({true, CrossMode::nonparametric, false}) == "SA+CA*");
  CHECK(describe({false, CrossMode::off, false}) == "none");
  CHECK(parse_cross_mode("np") == CrossMode::nonparametric);
  CHECK_THROWS_AS(parse_cross_mode("maybe"), ConfigError);
}

TEST_CASE("k-shot reduction") {
  Pipeline p({true, CrossMode::learned, true});
  const auto ep = sample_episode(11, Split::test, 2);
  const auto fq = p.encoder.encode(ep.query);
  const auto f0 = p.encoder.encode(ep.supports[0].image);
  const auto f1 = p.encoder.encode(ep.supports[1].image);
  const auto proposals = p.pos.propose(fq);
  const auto one = p.mm.match(f0, ep.supports[0].mask, fq, proposals);
  const auto k1 = p.mm.match({{&f0, &ep.supports[0].mask}}, fq, proposals);
  CHECK(bit_equal(one.blended, k1.blended));
  CHECK(bit_equal(one.similarity, k1.similarity));
  std::vector<SupportFeatures> five(5, SupportFeatures{&f0, &ep.supports[0].mask});
  const auto k5 = p.mm.match(five, fq, proposals);
  CHECK(bit_equal(one.blended, k5.blended));
  CHECK(bit_equal(one.weights, k5.weights));

  // Two distinct supports: prototypes are the arithmetic mean of per-support prototypes.
  const auto [q0, s0] = p.mm.align(fq, f0);
  const auto [q1, s1] = p.mm.align(fq, f1);
  const auto ps = scale(add(prototypes(s0, ep.supports[0].mask.to_row(), 64, 64),
                            prototypes(s1, ep.supports[1].mask.to_row(), 64, 64)),
                        0.5);
  const auto pq = scale(add(prototypes(q0, proposals.masks, 16, 16), prototypes(q1, proposals.masks, 16, 16)), 0.5);
  const auto expected = cosine_similarity(pq, ps);
  const auto two = p.mm.match({{&f0, &ep.supports[0].mask}, {&f1, &ep.supports[1].mask}}, fq, proposals);
  for (std::size_t i = 0; i < expected.numel(); ++i) {
    CHECK(two.similarity[i] == doctest::Approx(expected[i]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(p.mm.match(std::vector<SupportFeatures>{}, fq, proposals), ConfigError);
}

TEST_CASE("full stage-two graph passes a finite-difference check") {
  ParamStore store;
  Encoder encoder(store, "encoder", 4, 4);
  Rng pos_rng(1), mm_rng(2);
  Pos pos(store, "pos", PosConfig{4, 2, 8, 3, false}, pos_rng);
  store.freeze("pos");
  MmConfig cfg;
  cfg.d_model = 4;
  cfg.heads = 2;
  cfg.d_ffn = 8;
  cfg.num_proposals = 3;
  MaskMatching mm(store, "mm", cfg, mm_rng);
  const auto ep = sample_episode(21, Split::train, 1);
  const auto fq = encoder.encode(ep.query);
  const auto fs = encoder.encode(ep.supports[0].image);
  const auto proposals = pos.propose(fq);
  const auto gt = to_proposal_grid(ep.query_gt, proposals.height, proposals.width);
  const auto ious = proposal_ious(proposals, gt);
  std::vector<Tensor> params;
  for (const auto& name : store.trainable_names()) params.push_back(store.at(name));
  REQUIRE_FALSE(params.empty());
  for (const auto& name : store.trainable_names()) CHECK(name.rfind("mm.", 0) == 0);
  auto loss = [&] {
    const auto r = mm.match(fs, ep.supports[0].mask, fq, proposals);
    return mm_loss(r.blended, gt.to_row(), r.normalized_similarity, ious).total;
  };
  const auto result = grad_check(loss, params);
  CHECK(result.global_relative_error < 1e-4);
  // Key biases cancel under the attention softmax, so their exact gradient is
  // zero; those are compared in absolute terms.
  const auto names = store.trainable_names();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = result.inputs[i];
    INFO("parameter: ", names[i]);
    if (std::max(e.analytic_norm, e.numeric_norm) > 1e-6) {
      CHECK(e.difference_norm / std::max(e.analytic_norm, e.numeric_norm) < 1e-4);
    } else {
      CHECK(e.analytic_norm < 1e-9);
      CHECK(e.numeric_norm < 1e-6);
    }
  }
}

TEST_CASE("proposal IoUs") {
  ProposalSet p;
  p.height = 1;
  p.width = 4;
  p.masks = Tensor({2, 4}, {0.9, 0.8, 0.1, 0.0, 0.2, 0.6, 0.7, 0.1});
  Mask gt(1, 4);
  gt.pixels = {1, 1, 0, 0};
  const auto ious = proposal_ious(p, gt);
  CHECK(ious[0] == 1.0);
  CHECK(ious[1] == doctest::Approx(1.0 / 3.0));
}
