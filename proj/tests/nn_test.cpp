#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "mmformer/errors.hpp"
#include "mmformer/nn.hpp"
#include "mmformer/ops.hpp"

using namespace mmformer;
using mmformer::testing::grad_check;
using mmformer::testing::random_tensor;

namespace {

void set_values(Tensor& t, const std::vector<double>& v) {
  auto d = t.mutable_data();
  REQUIRE(d.size() == v.size());
  std::copy(v.begin(), v.end(), d.begin());
}

void set_identity(Tensor& t) {
  auto d = t.mutable_data();
  const auto n = t.dim(0);
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = (i / n == i % n) ? 1.0 : 0.0;
}

void fill(Tensor& t, double v) {
  for (auto& x : t.mutable_data()) x = v;
}

// Independent scaled dot-product attention on plain arrays (single head).
std::vector<double> attention_oracle(const std::vector<double>& q, const std::vector<double>& k,
                                     const std::vector<double>& v, std::size_t lq, std::size_t lk, std::size_t d) {
  std::vector<double> out(lq * d, 0.0);
  for (std::size_t i = 0; i < lq; ++i) {
    std::vector<double> s(lk);
    double hi = -1e300;
    for (std::size_t j = 0; j < lk; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += q[i * d + c] * k[j * d + c];
      s[j] = dot / std::sqrt(static_cast<double>(d));
      hi = std::max(hi, s[j]);
    }
    double z = 0.0;
    for (auto& x : s) z += (x = std::exp(x - hi));
    for (std::size_t j = 0; j < lk; ++j)
      for (std::size_t c = 0; c < d; ++c) out[i * d + c] += s[j] / z * v[j * d + c];
  }
  return out;
}

std::vector<double> dense(const std::vector<double>& x, std::size_t rows, std::size_t in,
                          const std::vector<double>& w, const std::vector<double>& b, std::size_t out) {
  std::vector<double> y(rows * out);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < in; ++i) acc += x[r * in + i] * w[i * out + o];
      y[r * out + o] = acc;
    }
  return y;
}

}  // namespace

TEST_CASE("param store naming, ordering and freezing") {
  ParamStore store;
  Rng rng(1);
  Linear b(store, "b.fc", 2, 3, rng);
  Linear a(store, "a.fc", 3, 2, rng);
  const auto names = store.names();
  CHECK(std::is_sorted(names.begin(), names.end()));
  CHECK(names.size() == 4);
  CHECK_THROWS_AS(store.create("a.fc.weight", Tensor::zeros({1})), ConfigError);

  store.freeze("a");
  CHECK_FALSE(store.at("a.fc.weight").requires_grad());
  CHECK(store.at("b.fc.weight").requires_grad());
  CHECK(store.trainable_names() == std::vector<std::string>{"b.fc.bias", "b.fc.weight"});
  // A frozen subtree never enters the tape.
  const auto y = a(Tensor::ones({1, 3}));
  CHECK_FALSE(y.requires_grad());
  CHECK_FALSE(in_subtree("ab.fc", "a"));

  const auto before = store.fingerprint("a");
  set_values(store.at("b.fc.bias"), {1, 2, 3});
  CHECK(store.fingerprint("a") == before);
  CHECK(store.fingerprint() != store.fingerprint("a"));
}

TEST_CASE("mhatten examples") {
  Rng rng(3);
  SUBCASE("single key returns v") {
    ParamStore store;
    MultiHeadAttention mha(&store, "attn", {2, 1, true}, rng);
    for (auto p : {"q", "k", "v", "out"}) {
      set_identity(store.at(std::string("attn.") + p + ".weight"));
    }
    const Tensor x({1, 2}, {0.3, -1.2});
    const auto y = mha(x, x, x);
    CHECK(y[0] == doctest::Approx(0.3));
    CHECK(y[1] == doctest::Approx(-1.2));
  }
  SUBCASE("zero q and k attend uniformly") {
    ParamStore store;
    MultiHeadAttention mha(&store, "attn", {4, 2, true}, rng);
    for (auto p : {"q", "k", "v", "out"}) set_identity(store.at(std::string("attn.") + p + ".weight"));
    const auto v = random_tensor({3, 4}, rng, -2, 2, false);
    const auto y = mha(Tensor::zeros({2, 4}), Tensor::zeros({3, 4}), v);
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < 4; ++c) {
        const double col_mean = (v[c] + v[4 + c] + v[8 + c]) / 3.0;
        CHECK(y[r * 4 + c] == doctest::Approx(col_mean).epsilon(1e-14));
      }
  }
  SUBCASE("two keys with hand-set projections match the dense-loop oracle") {
    ParamStore store;
    MultiHeadAttention mha(&store, "attn", {2, 1, true}, rng);
    const std::vector<double> wq{0.5, -1.0, 2.0, 0.25}, wk{1.5, 0.0, -0.5, 1.0}, wv{0.0, 1.0, 1.0, 0.0};
    set_values(store.at("attn.q.weight"), wq);
    set_values(store.at("attn.k.weight"), wk);
    set_values(store.at("attn.v.weight"), wv);
    set_identity(store.at("attn.out.weight"));
    const std::vector<double> q{0.7, -0.3}, kv{1.0, 2.0, -1.5, 0.5};
    const auto y = mha(Tensor({1, 2}, q), Tensor({2, 2}, kv), Tensor({2, 2}, kv));
    const std::vector<double> zero{0, 0};
    const auto expected = attention_oracle(dense(q, 1, 2, wq, zero, 2), dense(kv, 2, 2, wk, zero, 2),
                                           dense(kv, 2, 2, wv, zero, 2), 1, 2, 2);
    CHECK(y[0] == doctest::Approx(expected[0]).epsilon(1e-13));
    CHECK(y[1] == doctest::Approx(expected[1]).epsilon(1e-13));
  }
  SUBCASE("heads must divide d_model") {
    ParamStore store;
    CHECK_THROWS_AS(MultiHeadAttention(&store, "attn", {6, 4, true}, rng), ConfigError);
  }
}

TEST_CASE("attention rows are stochastic") {
  Rng rng(17);
  ParamStore store;
  MultiHeadAttention mha(&store, "attn", {8, 4, true}, rng);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> weights;
    mha(random_tensor({5, 8}, rng, -3, 3, false), random_tensor({7, 8}, rng, -3, 3, false),
        random_tensor({7, 8}, rng, -3, 3, false), &weights);
    REQUIRE(weights.size() == 4);
    for (const auto& w : weights) {
      for (std::size_t r = 0; r < 5; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 7; ++c) s += w[r * 7 + c];
        CHECK(std::abs(s - 1.0) <= 1e-12);
      }
    }
  }
}

TEST_CASE("cross-attention is invariant to memory row order") {
  Rng rng(23);
  ParamStore store;
  DecoderLayer layer(&store, "dec", {8, 2, 16, true, true}, rng);
  const auto q = random_tensor({3, 8}, rng, -1, 1, false);
  const auto mem = random_tensor({5, 8}, rng, -1, 1, false);
  const std::vector<std::size_t> perm{3, 0, 4, 2, 1};
  std::vector<double> permuted(mem.numel());
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 8; ++c) permuted[r * 8 + c] = mem[perm[r] * 8 + c];
  const auto a = layer(q, mem);
  const auto b = layer(q, Tensor({5, 8}, permuted));
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("decoder layer contracts") {
  Rng rng(29);
  ParamStore store;
  DecoderLayer layer(&store, "dec", {8, 2, 16, true, true}, rng);
  for (std::size_t nq : {1u, 4u})
    for (std::size_t lm : {1u, 6u}) {
      const auto y = layer(random_tensor({nq, 8}, rng, -1, 1, false), random_tensor({lm, 8}, rng, -1, 1, false));
      CHECK(y.shape() == Shape{nq, 8});
    }

  // Zero output projections leave only the residual path.
  for (auto name : {"dec.self_attn.out.weight", "dec.cross_attn.out.weight", "dec.ffn.fc1.weight"}) {
    fill(store.at(name), 0.0);
  }
  const auto x = random_tensor({4, 8}, rng, -1, 1, false);
  const auto y = layer(x, random_tensor({3, 8}, rng, -1, 1, false));
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("decoder layer gradients match finite differences") {
  Rng rng(31);
  ParamStore store;
  DecoderLayer layer(&store, "dec", {4, 2, 6, true, true}, rng);
  // Move norms off their identity initialisation so every path is exercised.
  for (const auto& name : store.names()) {
    for (auto& v : store.at(name).mutable_data()) v += rng.uniform(-0.3, 0.3);
  }
  auto q = random_tensor({3, 4}, rng);
  auto mem = random_tensor({5, 4}, rng);
  const auto w = random_tensor({3, 4}, rng, -1, 1, false);
  std::vector<Tensor> inputs{q, mem};
  for (const auto& name : store.names()) inputs.push_back(store.at(name));
  const auto r = grad_check([&] { return sum_all(mul(layer(q, mem), w)); }, inputs);
  CHECK(r.max_relative_error < 1e-5);
}

TEST_CASE("non-parametric decoder layer has no parameters") {
  Rng rng(37);
  ParamStore store;
  DecoderLayer layer(&store, "np", {8, 1, 16, false, false}, rng);
  CHECK(store.names().empty());
  const auto y = layer(random_tensor({4, 8}, rng, -1, 1, false), random_tensor({2, 8}, rng, -1, 1, false));
  CHECK(y.shape() == Shape{4, 8});
}

TEST_CASE("mlp examples") {
  Rng rng(41);
  SUBCASE("zero weights give zero output") {
    ParamStore store;
    Mlp mlp(store, "mlp", {3, 5, 2}, rng);
    for (const auto& n : store.names()) fill(store.at(n), 0.0);
    const auto y = mlp(random_tensor({4, 3}, rng, -1, 1, false));
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("identity layers on positive input") {
    ParamStore store;
    Mlp mlp(store, "mlp", {3, 3, 3}, rng);
    set_identity(store.at("mlp.fc0.weight"));
    set_identity(store.at("mlp.fc1.weight"));
    const auto x = random_tensor({2, 3}, rng, 0.1, 2, false);
    const auto y = mlp(x);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
  }
  SUBCASE("random 3x2 -> 2 against a dense-loop oracle") {
    ParamStore store;
    Mlp mlp(store, "mlp", {2, 4, 2}, rng);
    for (const auto& n : store.names())
      for (auto& v : store.at(n).mutable_data()) v = rng.uniform(-1, 1);
    const auto x = random_tensor({3, 2}, rng, -1, 1, false);
    const std::vector<double> xs(x.data().begin(), x.data().end());
    auto vec = [&](const char* n) {
      const auto d = store.at(n).data();
      return std::vector<double>(d.begin(), d.end());
    };
    auto h = dense(xs, 3, 2, vec("mlp.fc0.weight"), vec("mlp.fc0.bias"), 4);
    for (auto& v : h) v = std::max(v, 0.0);
    const auto expected = dense(h, 3, 4, vec("mlp.fc1.weight"), vec("mlp.fc1.bias"), 2);
    const auto y = mlp(x);
    for (std::size_t i = 0; i < expected.size(); ++i) CHECK(y[i] == doctest::Approx(expected[i]).epsilon(1e-14));
  }
}

TEST_CASE("layer norm and attention gradients") {
  Rng rng(43);
  ParamStore store;
  LayerNorm ln(store, "ln", 5);
  for (const auto& n : store.names())
    for (auto& v : store.at(n).mutable_data()) v += rng.uniform(-0.5, 0.5);
  auto x = random_tensor({3, 5}, rng);
  const auto w = random_tensor({3, 5}, rng, -1, 1, false);
  CHECK(grad_check([&] { return sum_all(mul(ln(x), w)); }, {x, store.at("ln.gamma"), store.at("ln.beta")})
            .max_relative_error < 1e-5);

  MultiHeadAttention mha(&store, "attn", {4, 2, true}, rng);
  auto q = random_tensor({2, 4}, rng);
  auto kv = random_tensor({3, 4}, rng);
  const auto w2 = random_tensor({2, 4}, rng, -1, 1, false);
  std::vector<Tensor> inputs{q, kv};
  for (const auto& n : store.names("attn")) inputs.push_back(store.at(n));
  CHECK(grad_check([&] { return sum_all(mul(mha(q, kv, kv), w2)); }, inputs).max_relative_error < 1e-5);
}

TEST_CASE("sine position encoding") {
  const auto pe = sine_position_encoding(2, 3, 8);
  CHECK(pe.shape() == Shape{6, 8});
  CHECK(pe[0] == 0.0);
  CHECK(pe[2] == 1.0);
  CHECK_THROWS_AS(sine_position_encoding(2, 2, 6), ConfigError);
}
