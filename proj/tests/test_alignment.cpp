#include <catch2/catch_amalgamated.hpp>

#include "attex/alignment.hpp"
#include "attex/gradcheck.hpp"

using namespace attex;

namespace {

template <typename S>
ExplainerModel<S> small_model(uint32_t seed) {
  Rng rng(seed);
  return ExplainerModel<S>::init(8, 3, 6, 4, 5, ContextScale::per_paper, rng);
}

template <typename S>
FeatureGrid<S> small_grid(uint32_t seed) {
  Rng rng(seed);
  FeatureGrid<S> g;
  g.grid_h = 2;
  g.grid_w = 2;
  g.channels = 4;
  g.locations = Tensor<S>::uniform({4, 4}, S(-1), S(1), rng);
  return g;
}

}  // namespace

TEST_CASE("bidirectional encoding of one token concatenates single steps") {
  auto model = small_model<double>(1);
  auto bi = encode_bidirectional<double>({5}, model);
  REQUIRE(bi.size() == 1);
  REQUIRE(bi[0].shape() == std::vector<int>{6});

  auto x = embedding_row(model.align_embedding, 5);
  auto zero = Tensor<double>::zeros({3});
  auto f = lstm_step(x, zero, zero, model.align_fwd);
  auto b = lstm_step(x, zero, zero, model.align_bwd);
  for (int d = 0; d < 3; ++d) {
    REQUIRE(bi[0].at(d) == f.h.at(d));
    REQUIRE(bi[0].at(3 + d) == b.h.at(d));
  }
}

TEST_CASE("palindrome with tied directions is mirror symmetric") {
  auto model = small_model<double>(2);
  model.align_bwd = model.align_fwd;
  auto bi = encode_bidirectional<double>({4, 6, 4}, model);
  REQUIRE(bi.size() == 3);
  // Swapping the forward and backward halves of h̄_1 yields h̄_3; the middle
  // state is its own mirror.
  for (int d = 0; d < 3; ++d) {
    REQUIRE(bi[0].at(d) == Catch::Approx(bi[2].at(3 + d)).margin(1e-12));
    REQUIRE(bi[0].at(3 + d) == Catch::Approx(bi[2].at(d)).margin(1e-12));
    REQUIRE(bi[1].at(d) == Catch::Approx(bi[1].at(3 + d)).margin(1e-12));
  }
}

TEST_CASE("zero alignment weights annihilate the encoding") {
  auto model = ExplainerModel<double>::zeros_like_dims(8, 3, 6, 4, 5, ContextScale::per_paper);
  auto bi = encode_bidirectional<double>({4, 5, 6, 7}, model);
  for (auto& h : bi)
    for (int d = 0; d < 6; ++d) REQUIRE(h.at(d) == 0.0);
}

TEST_CASE("empty sequence is rejected") {
  auto model = small_model<double>(3);
  REQUIRE_THROWS_AS(encode_bidirectional<double>({}, model), ContractError);
}

TEST_CASE("realign with a zero scoring vector is uniform and sums to one") {
  auto model = small_model<double>(4);
  for (auto& v : model.att.w_s.values()) v = 0.0;
  auto g = small_grid<double>(5);
  auto bi = encode_bidirectional<double>({4, 5, 6}, model);
  auto res = realign(bi, g, model);
  REQUIRE(res.alphas.size() == 3);
  REQUIRE(res.contexts.size() == 3);
  for (auto& a : res.alphas) {
    double total = 0.0;
    for (int j = 0; j < 4; ++j) {
      REQUIRE(a.at(j) == Catch::Approx(0.25).margin(1e-12));
      total += a.at(j);
    }
    REQUIRE(total == Catch::Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("realign reuses the decoder's attention parameters exactly") {
  auto model = small_model<double>(6);
  auto g = small_grid<double>(7);
  auto st = model.init_state(g);
  auto direct = attend(st.h, g, model.att);
  auto res = realign<double>({st.h}, g, model);
  for (int j = 0; j < 4; ++j) REQUIRE(res.alphas[0].at(j) == direct.at(j));
}

TEST_CASE("alignment loss arithmetic") {
  auto a1 = Tensor<double>::from({2}, {0.6, 0.4});
  auto r1 = Tensor<double>::from({2}, {0.5, 0.5});
  SECTION("identical sequences give zero") {
    auto loss = alignment_loss<double>({a1, r1}, {a1, r1});
    REQUIRE(loss.item() == 0.0);
  }
  SECTION("single step forced value") {
    auto loss = alignment_loss<double>({a1}, {r1});
    REQUIRE(loss.item() == Catch::Approx(0.2).margin(1e-12));
  }
  SECTION("bounded by 2T") {
    Rng rng(8);
    std::vector<Tensor<double>> a, r;
    for (int t = 0; t < 6; ++t) {
      a.push_back(softmax(Tensor<double>::uniform({5}, -3.0, 3.0, rng)));
      r.push_back(softmax(Tensor<double>::uniform({5}, -3.0, 3.0, rng)));
    }
    auto loss = alignment_loss(a, r);
    REQUIRE(loss.item() >= 0.0);
    REQUIRE(loss.item() <= 12.0);
  }
  SECTION("length mismatch is a contract error") {
    REQUIRE_THROWS_AS(alignment_loss<double>({a1}, {}), ContractError);
  }
  SECTION("strictly positive iff any step differs") {
    auto loss = alignment_loss<double>({a1, a1}, {a1, r1});
    REQUIRE(loss.item() > 0.0);
  }
}

TEST_CASE("alignment loss gradients agree with central differences") {
  auto model = small_model<double>(9);
  auto g = small_grid<double>(10);
  const std::vector<int> tokens = {4, 5, kEos};
  std::vector<Tensor<double>> params;
  for (auto& [n, t] : model.named_params()) params.push_back(t);
  auto fn = [&]() {
    std::vector<Tensor<double>> alphas;
    auto st = model.init_state(g);
    int prev = kBos;
    for (int tok : tokens) {
      auto r = model.decode_step(prev, st, g);
      alphas.push_back(r.alpha);
      st = r.state;
      prev = tok;
    }
    auto bi = encode_bidirectional(tokens, model);
    auto res = realign(bi, g, model);
    return alignment_loss(alphas, res.alphas);
  };
  REQUIRE(grad_check<double>(fn, params, 1e-5) < 1e-4);
}

TEST_CASE("tie subgradient matches symmetric differences at an exact tie") {
  // Zero scoring vector makes every α and ᾱ uniform, so the loss sits at an
  // exact L1 tie. The convention |0|' = 0 must agree with central
  // differences, which are symmetric and also vanish there.
  auto model = small_model<double>(11);
  for (auto& v : model.att.w_s.values()) v = 0.0;
  auto g = small_grid<double>(12);
  const std::vector<int> tokens = {4, 6};
  std::vector<Tensor<double>> params = {model.att.w_s, model.att.w_h, model.att.w_v};
  auto fn = [&]() {
    std::vector<Tensor<double>> alphas;
    auto st = model.init_state(g);
    int prev = kBos;
    for (int tok : tokens) {
      auto r = model.decode_step(prev, st, g);
      alphas.push_back(r.alpha);
      st = r.state;
      prev = tok;
    }
    auto bi = encode_bidirectional(tokens, model);
    return alignment_loss(alphas, realign(bi, g, model).alphas);
  };
  REQUIRE(grad_check<double>(fn, params, 1e-5) < 1e-4);
}
