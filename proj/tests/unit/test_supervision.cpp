#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "lingo/supervision.hpp"
#include "oracles.hpp"

using namespace lingo;
using namespace lingo::supervision;
using lingo::numcore::Tensor2D;

namespace {

std::filesystem::path scratch(const std::string& name, const std::string& body = "") {
  auto dir = std::filesystem::temp_directory_path() / "lingo_supervision_test";
  std::filesystem::create_directories(dir);
  const auto p = dir / name;
  if (!body.empty()) std::ofstream(p) << body;
  return p;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return d / std::sqrt(na * nb);
}

std::vector<std::string> hierarchy_names(int supers, int per) {
  std::vector<std::string> n;
  for (int s = 0; s < supers; ++s)
    for (int c = 0; c < per; ++c) n.push_back("super" + std::to_string(s) + "_class" + std::to_string(c));
  return n;
}

std::vector<int> iota_ids(std::size_t n) {
  std::vector<int> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = int(i);
  return v;
}

}  // namespace

TEST_CASE("random head: determinism, seed sensitivity and moments") {
  const auto names = hierarchy_names(25, 4);
  const auto ids = iota_ids(100);
  const auto a = build_random_head(ids, names, 100, 7);
  CHECK(a == build_random_head(ids, names, 100, 7));
  CHECK_FALSE(a.frozen());
  const auto b = build_random_head(ids, names, 100, 8);
  double max_delta = 0;
  for (std::size_t i = 0; i < 10000; ++i)
    max_delta = std::max(max_delta, std::abs(a.block(0).weights.data()[i] - b.block(0).weights.data()[i]));
  CHECK(max_delta > 0);
  const auto& w = a.block(0).weights.data();
  REQUIRE(w.size() == 10000);
  double mean = 0, var = 0;
  for (double v : w) mean += v / 10000.0;
  for (double v : w) var += (v - mean) * (v - mean) / 10000.0;
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("semantic head copies table rows bit for bit") {
  const auto names = hierarchy_names(2, 2);
  const auto table = fallback_targets(names, {});
  const auto head = build_semantic_head({3, 1}, {names[3], names[1]}, table, true);
  CHECK(head.regime() == Regime::semantic_frozen);
  const auto row = head.block(0).weights.row(1);
  CHECK(std::equal(row.begin(), row.end(), table.at("super0_class1").begin()));
  CHECK(head.block(0).class_ids == std::vector<int>{3, 1});
  CHECK_THROWS_AS(build_semantic_head({0}, {"nope"}, table, true), LookupError);
  CHECK(build_semantic_head({0}, {names[0]}, table, false).regime() == Regime::semantic_updated);
}

TEST_CASE("frozen heads expose no mutable weights") {
  const auto names = hierarchy_names(1, 2);
  auto head = build_semantic_head({0, 1}, names, fallback_targets(names, {}), true);
  CHECK_THROWS(head.trainable_weights(0));
}

TEST_CASE("freeze contract under training, and updated heads do move") {
  const auto names = hierarchy_names(2, 2);
  const auto table = fallback_targets(names, {});
  Rng rng(3);
  const auto x = oracle::random_tensor(8, 32, rng);
  const std::vector<int> y = {0, 1, 2, 3, 0, 1, 2, 3};

  auto frozen = build_semantic_head(iota_ids(4), names, table, true);
  const auto hash = frozen.byte_hash();
  auto enc = numcore::EncoderModel::identity(32);
  numcore::SgdState sgd(0.1, 0.9);
  Tensor2D w = frozen.block(0).weights;
  for (int i = 0; i < 50; ++i) numcore::backward_and_step(enc, w, x, y, sgd, true);
  CHECK(frozen.byte_hash() == hash);
  CHECK(numcore::byte_hash(w.data()) == numcore::byte_hash(frozen.block(0).weights.data()));

  auto updated = build_semantic_head(iota_ids(4), names, table, false);
  const auto before = updated.byte_hash();
  auto enc2 = numcore::EncoderModel::identity(32);
  numcore::SgdState sgd2(0.1, 0.0);
  numcore::backward_and_step(enc2, updated.trainable_weights(0), x, y, sgd2, false);
  CHECK(updated.byte_hash() != before);
}

TEST_CASE("orthogonalize: orthonormal input stays put up to sign") {
  SemanticTargetTable t(3);
  t.insert("a", {1, 0, 0});
  t.insert("b", {0, 0, 1});
  const auto o = orthogonalize(t, {"a", "b"}, 0);
  for (const auto& n : {"a", "b"})
    for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(std::abs(o.at(n)[k]) - std::abs(t.at(n)[k])) < 1e-12);
}

TEST_CASE("orthogonalize: correlated pair gives an identity Gram matrix") {
  SemanticTargetTable t(2);
  t.insert("a", {1, 0});
  t.insert("b", {0.8, 0.6});
  const auto o = orthogonalize(t, {"a", "b"}, 0);
  CHECK(std::abs(cosine(o.at("a"), o.at("a")) - 1.0) < 1e-9);
  CHECK(std::abs(cosine(o.at("a"), o.at("b"))) < 1e-9);
  double nb = 0;
  for (double v : o.at("b")) nb += v * v;
  CHECK(std::abs(nb - 1.0) < 1e-9);
}

TEST_CASE("orthogonalize: hierarchy table, dependent rows, rank limit") {
  const auto names = hierarchy_names(4, 4);
  FallbackOptions opt;
  opt.dim = 32;
  const auto o = orthogonalize(fallback_targets(names, opt), names, 5);
  double worst = 0;
  for (std::size_t i = 0; i < names.size(); ++i)
    for (std::size_t j = i + 1; j < names.size(); ++j) worst = std::max(worst, std::abs(cosine(o.at(names[i]), o.at(names[j]))));
  CHECK(worst < 1e-9);

  SemanticTargetTable dup(3);
  dup.insert("a", {1, 1, 0});
  dup.insert("b", {2, 2, 0});
  const auto od = orthogonalize(dup, {"a", "b"}, 1);
  CHECK(std::abs(cosine(od.at("a"), od.at("b"))) < 1e-9);

  SemanticTargetTable tiny(1);
  tiny.insert("a", {1});
  tiny.insert("b", {-1});
  CHECK_THROWS_AS(orthogonalize(tiny, {"a", "b"}, 0), RankError);
}

TEST_CASE("load_targets: normalization, duplicates, width, non-finite, round trip") {
  const auto t = load_targets(scratch("ok.txt", "dim 2\nx\t3 4\n"));
  CHECK(t.at("x")[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(t.at("x")[1] == doctest::Approx(0.8).epsilon(1e-15));

  auto line_of = [](const std::filesystem::path& p) {
    try {
      load_targets(p);
    } catch (const ParseError& e) {
      return e.line();
    }
    return std::size_t{0};
  };
  CHECK(line_of(scratch("dup.txt", "dim 2\nx\t1 0\ny\t0 1\nx\t1 1\n")) == 4);
  CHECK(line_of(scratch("width.txt", "dim 2\nx\t1 0 0\n")) == 2);
  CHECK(line_of(scratch("nan.txt", "dim 2\nx\t1 0\ny\tnan 1\n")) == 3);

  const auto names = hierarchy_names(3, 3);
  FallbackOptions opt;
  opt.mode = FallbackMode::hash;
  const auto table = fallback_targets(names, opt);
  const auto path = scratch("round.txt");
  table.save(path);
  CHECK(load_targets(path) == table);
}

TEST_CASE("hierarchy fallback: sibling cosine above cross-superclass cosine for every pair") {
  const auto names = hierarchy_names(2, 2);
  FallbackOptions opt;
  opt.alpha = 0.5;
  opt.dim = 32;
  const auto t = fallback_targets(names, opt);
  double min_within = 2, max_cross = -2;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = i + 1; j < 4; ++j) {
      const double c = cosine(t.at(names[i]), t.at(names[j]));
      if (i / 2 == j / 2) min_within = std::min(min_within, c);
      else max_cross = std::max(max_cross, c);
    }
  }
  CHECK(min_within > max_cross);
  for (const auto& n : names) CHECK(std::abs(cosine(t.at(n), t.at(n)) - 1.0) < 1e-12);
}

TEST_CASE("hierarchy fallback with zero class weight is degenerate") {
  const auto names = hierarchy_names(2, 2);
  FallbackOptions opt;
  opt.alpha = 0.0;
  CHECK_THROWS(fallback_targets(names, opt));
  opt.allow_duplicates = true;
  const auto t = fallback_targets(names, opt);
  CHECK(t.at(names[0]) == t.at(names[1]));
  CHECK_FALSE(t.at(names[0]) == t.at(names[2]));
}

TEST_CASE("hash fallback depends on the name only") {
  FallbackOptions opt;
  opt.mode = FallbackMode::hash;
  const auto a = fallback_targets({"cat", "dog"}, opt);
  const auto b = fallback_targets({"dog", "cat", "owl"}, opt);
  CHECK(a.at("cat") == b.at("cat"));
  CHECK_FALSE(a.at("cat") == a.at("dog"));
}

TEST_CASE("oracle head on separable toy data") {
  taskstream::Dataset ds;
  ds.feature_dim = 2;
  ds.class_names = {"left", "right"};
  Rng rng(1);
  for (int i = 0; i < 60; ++i) {
    const int c = i % 2;
    const double cx = c == 0 ? -3.0 : 3.0;
    ds.train.push_back({{cx + 0.3 * rng.normal(), 0.3 * rng.normal()}, c, ds.class_names[c], 0});
  }
  ds.test = ds.train;
  OracleConfig cfg;
  cfg.epochs = 10;
  cfg.hidden = {16};
  cfg.embed_dim = 8;
  const auto art = build_oracle_head(ds, cfg);
  CHECK(art.train_accuracy >= 0.99);
  CHECK(art.head.rows() == 2);
  CHECK(art == build_oracle_head(ds, cfg));
  CHECK(art.as_table().size() == 2);
}
