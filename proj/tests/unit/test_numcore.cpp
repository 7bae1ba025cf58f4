#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lingo/numcore.hpp"
#include "oracles.hpp"

using namespace lingo;
using namespace lingo::numcore;

namespace {

EncoderModel small_mlp(std::uint64_t seed, std::size_t in = 5, std::size_t out = 4) {
  Rng rng(seed);
  const std::size_t hidden[] = {16, 12};
  return EncoderModel::mlp(in, hidden, out, rng);
}

double ce_loss(const EncoderModel& m, const Tensor2D& head, const Tensor2D& x, const std::vector<int>& y,
               const SimilarityConfig& sim) {
  return softmax_ce_loss_and_grad(similarity_logits(head, forward(m, x), sim.mode, sim.scale), y).loss;
}

}  // namespace

TEST_CASE("identity layer passes input through") {
  const auto m = EncoderModel::identity(2);
  CHECK(forward(m, Tensor2D{{1, 2}}) == Tensor2D{{1, 2}});
}

TEST_CASE("relu clamps the negative unit") {
  EncoderModel m;
  m.layers.push_back({Tensor2D{{1, 0}, {0, -1}}, {0, 0}, Activation::relu});
  CHECK(forward(m, Tensor2D{{3, 4}}) == Tensor2D{{3, 0}});
}

TEST_CASE("mlp forward matches loop recomputation") {
  const auto m = small_mlp(0);
  Rng rng(7);
  const auto x = oracle::random_tensor(9, 5, rng);
  const auto got = forward(m, x);
  const auto want = oracle::forward(m, x);
  REQUIRE(got.rows() == 9);
  REQUIRE(got.cols() == 4);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-13));
}

TEST_CASE("forward rejects wrong input width") {
  const auto m = small_mlp(0);
  CHECK_THROWS_AS(forward(m, Tensor2D(2, 3)), ShapeError);
}

TEST_CASE("glorot init stays inside its bound and biases start at zero") {
  const auto m = small_mlp(3);
  for (const auto& l : m.layers) {
    const double bound = std::sqrt(6.0 / static_cast<double>(l.in_dim() + l.out_dim()));
    for (double w : l.weight.data()) CHECK(std::abs(w) <= bound);
    for (double b : l.bias) CHECK(b == 0.0);
  }
  CHECK(m.layers.back().activation == Activation::identity);
}

TEST_CASE("similarity logits: worked cases") {
  CHECK(similarity_logits(Tensor2D{{1, 0}, {0, 1}}, Tensor2D{{0, 1}}, SimilarityMode::inner, 1.0) == Tensor2D{{0, 1}});
  const double s = 1.0 / std::sqrt(2.0);
  const auto z = similarity_logits(Tensor2D{{s, s}}, Tensor2D{{s, s}}, SimilarityMode::cosine, 4.0);
  CHECK(z(0, 0) == doctest::Approx(4.0).epsilon(1e-15));
  CHECK_THROWS_AS(similarity_logits(Tensor2D{{0, 0}}, Tensor2D{{1, 1}}, SimilarityMode::cosine, 1.0),
                  DegenerateVectorError);
}

TEST_CASE("similarity logits match loop dot products") {
  Rng rng(11);
  const auto w = oracle::random_tensor(3, 6, rng);
  const auto f = oracle::random_tensor(5, 6, rng);
  const auto inner = similarity_logits(w, f, SimilarityMode::inner, 2.5);
  const auto cosine = similarity_logits(w, f, SimilarityMode::cosine, 2.5);
  for (std::size_t n = 0; n < 5; ++n) {
    for (std::size_t c = 0; c < 3; ++c) {
      double d = 0, nw = 0, nf = 0;
      for (std::size_t k = 0; k < 6; ++k) {
        d += w(c, k) * f(n, k);
        nw += w(c, k) * w(c, k);
        nf += f(n, k) * f(n, k);
      }
      CHECK(std::abs(inner(n, c) - 2.5 * d) < 1e-12);
      CHECK(std::abs(cosine(n, c) - 2.5 * d / std::sqrt(nw * nf)) < 1e-12);
      CHECK(std::abs(cosine(n, c)) <= 2.5 + 1e-12);
    }
  }
}

TEST_CASE("argmax is unchanged by a common positive row scale in cosine mode") {
  Rng rng(5);
  auto w = oracle::random_tensor(6, 4, rng);
  const auto f = oracle::random_tensor(20, 4, rng);
  const auto before = argmax_rows(similarity_logits(w, f, SimilarityMode::cosine, 16));
  for (double& v : w.data()) v *= 37.5;
  CHECK(argmax_rows(similarity_logits(w, f, SimilarityMode::cosine, 16)) == before);
}

TEST_CASE("softmax cross-entropy: worked cases") {
  const int label0[] = {0};
  const auto u = softmax_ce_loss_and_grad(Tensor2D{{0, 0}}, label0);
  CHECK(u.loss == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(u.grad_logits(0, 0) == doctest::Approx(-0.5));
  CHECK(u.grad_logits(0, 1) == doctest::Approx(0.5));
  const auto sat = softmax_ce_loss_and_grad(Tensor2D{{10, -10}}, label0);
  CHECK(sat.loss < 1e-8);
  CHECK(sat.loss >= 0.0);
  const int bad[] = {2};
  CHECK_THROWS_AS(softmax_ce_loss_and_grad(Tensor2D{{0, 0}}, bad), LabelError);
}

TEST_CASE("softmax cross-entropy gradient rows sum to zero and match finite differences") {
  Rng rng(21);
  auto z = oracle::random_tensor(6, 4, rng, 3.0);
  const std::vector<int> y = {0, 3, 1, 2, 2, 0};
  const auto lg = softmax_ce_loss_and_grad(z, y);
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 4; ++c) s += lg.grad_logits(r, c);
    CHECK(std::abs(s) < 1e-12);
  }
  auto num = oracle::numeric_gradient(z.data(), [&] { return softmax_ce_loss_and_grad(z, y).loss; });
  CHECK(oracle::max_rel_error(lg.grad_logits.data(), num) < 1e-5);
}

TEST_CASE("similarity backward matches finite differences in both modes") {
  for (auto mode : {SimilarityMode::inner, SimilarityMode::cosine}) {
    Rng rng(mode == SimilarityMode::inner ? 1 : 2);
    auto w = oracle::random_tensor(3, 5, rng);
    auto f = oracle::random_tensor(4, 5, rng);
    const std::vector<int> y = {0, 2, 1, 1};
    auto loss = [&] { return softmax_ce_loss_and_grad(similarity_logits(w, f, mode, 3.0), y).loss; };
    const auto lg = softmax_ce_loss_and_grad(similarity_logits(w, f, mode, 3.0), y);
    const auto g = similarity_backward(w, f, mode, 3.0, lg.grad_logits);
    CHECK(oracle::max_rel_error(g.head.data(), oracle::numeric_gradient(w.data(), loss)) < 1e-4);
    CHECK(oracle::max_rel_error(g.features.data(), oracle::numeric_gradient(f.data(), loss)) < 1e-4);
  }
}

TEST_CASE("encoder backward matches finite differences") {
  auto m = small_mlp(9);
  Rng rng(4);
  const auto x = oracle::random_tensor(5, 5, rng);
  const auto head = oracle::random_tensor(3, 4, rng);
  const std::vector<int> y = {0, 1, 2, 1, 0};
  const SimilarityConfig sim{SimilarityMode::cosine, 8.0};
  const auto cache = forward_cached(m, x);
  const auto lg = softmax_ce_loss_and_grad(similarity_logits(head, cache.features(), sim.mode, sim.scale), y);
  const auto sg = similarity_backward(head, cache.features(), sim.mode, sim.scale, lg.grad_logits);
  const auto analytic = flatten(backward(m, cache, sg.features));
  std::vector<double> numeric;
  for (auto block : parameter_blocks(m)) {
    std::vector<double> copy(block.begin(), block.end());
    auto g = oracle::numeric_gradient(copy, [&] {
      std::copy(copy.begin(), copy.end(), block.begin());
      return ce_loss(m, head, x, y, sim);
    });
    std::copy(copy.begin(), copy.end(), block.begin());
    numeric.insert(numeric.end(), g.begin(), g.end());
  }
  CHECK(oracle::max_rel_error(analytic, numeric) < 1e-4);
}

TEST_CASE("one SGD step on the 2x2 linear case matches the hand derivation") {
  // f = x = [1, 2]; z = H f = [1, 2]; p = softmax(z); dz = p - e0.
  // dH = dz f^T, dW = (H^T dz) x^T, db = H^T dz, all with H = W = I.
  auto m = EncoderModel::identity(2);
  Tensor2D head{{1, 0}, {0, 1}};
  const int y[] = {0};
  SgdState sgd(0.1, 0.0);
  backward_and_step(m, head, Tensor2D{{1, 2}}, y, sgd, false, {SimilarityMode::inner, 1.0});
  const double p1 = 1.0 / (1.0 + std::exp(-1.0));
  const double p0 = 1.0 - p1;
  const double dz[2] = {p0 - 1.0, p1};
  const double x[2] = {1, 2};
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 2; ++c) {
      const double id = r == c ? 1.0 : 0.0;
      CHECK(head(r, c) == doctest::Approx(id - 0.1 * dz[r] * x[c]).epsilon(1e-14));
      CHECK(m.layers[0].weight(r, c) == doctest::Approx(id - 0.1 * dz[r] * x[c]).epsilon(1e-14));
    }
    CHECK(m.layers[0].bias[r] == doctest::Approx(-0.1 * dz[r]).epsilon(1e-14));
  }
}

TEST_CASE("frozen head keeps its bytes over 100 steps") {
  auto m = small_mlp(1, 5, 3);
  Rng rng(2);
  Tensor2D head = oracle::random_tensor(4, 3, rng);
  const auto hash = byte_hash(head.data());
  const auto x = oracle::random_tensor(8, 5, rng);
  const std::vector<int> y = {0, 1, 2, 3, 0, 1, 2, 3};
  SgdState sgd(0.05, 0.9);
  const auto before = m;
  for (int i = 0; i < 100; ++i) backward_and_step(m, head, x, y, sgd, true);
  CHECK(byte_hash(head.data()) == hash);
  CHECK_FALSE(m == before);
}

TEST_CASE("zero learning rate leaves every parameter unchanged") {
  auto m = small_mlp(1, 5, 3);
  Rng rng(2);
  Tensor2D head = oracle::random_tensor(4, 3, rng);
  const auto head0 = head;
  const auto m0 = m;
  const auto x = oracle::random_tensor(8, 5, rng);
  const std::vector<int> y = {0, 1, 2, 3, 0, 1, 2, 3};
  SgdState sgd(0.0, 0.9);
  for (int i = 0; i < 5; ++i) backward_and_step(m, head, x, y, sgd, false);
  CHECK(m == m0);
  CHECK(head == head0);
}

TEST_CASE("sgd schedule and momentum") {
  SgdState sgd(0.1, 0.5, {{2, 0.1}, {4, 0.1}});
  CHECK(sgd.rate_at(0) == doctest::Approx(0.1));
  CHECK(sgd.rate_at(2) == doctest::Approx(0.01));
  CHECK(sgd.rate_at(5) == doctest::Approx(0.001));
  std::vector<double> p = {1.0};
  std::span<double> blocks[] = {p};
  const ParamBuffers g{std::vector<double>{1.0}};
  sgd.step(blocks, g, 0);  // v = 1, p = 0.9
  sgd.step(blocks, g, 0);  // v = 1.5, p = 0.75
  CHECK(p[0] == doctest::Approx(0.75).epsilon(1e-15));
  CHECK_THROWS_AS(SgdState(-1.0, 0.0), ConfigError);
  CHECK_THROWS_AS(SgdState(0.1, 1.0), ConfigError);
}

TEST_CASE("identical seeds give bit-identical trajectories") {
  auto run = [] {
    auto m = small_mlp(42);
    Rng rng(43);
    Tensor2D head = oracle::random_tensor(3, 4, rng);
    const auto x = oracle::random_tensor(6, 5, rng);
    const std::vector<int> y = {0, 1, 2, 0, 1, 2};
    SgdState sgd(0.05, 0.9);
    for (int i = 0; i < 20; ++i) backward_and_step(m, head, x, y, sgd, false);
    return flatten_parameters(m);
  };
  CHECK(run() == run());
}

TEST_CASE("random orthogonal matrix has orthonormal columns") {
  Rng rng(8);
  const auto q = random_orthogonal(6, rng);
  const auto g = matmul(transpose(q), q);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) CHECK(std::abs(g(i, j) - (i == j ? 1.0 : 0.0)) < 1e-12);
}
