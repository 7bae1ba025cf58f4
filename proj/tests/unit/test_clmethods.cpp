#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "lingo/clmethods.hpp"
#include "oracles.hpp"

using namespace lingo;
using namespace lingo::clmethods;
using supervision::ClassifierHead;
using supervision::Regime;
using taskstream::Protocol;

namespace {

Tensor2D column(std::initializer_list<double> v) {
  Tensor2D t(v.size(), 1);
  std::size_t i = 0;
  for (double x : v) t(i++, 0) = x;
  return t;
}

taskstream::SyntheticDataset small_data(std::uint64_t seed = 0) {
  taskstream::SyntheticHierarchySpec spec;
  spec.superclasses = 3;
  spec.classes_per_superclass = 2;
  spec.feature_dim = 8;
  spec.train_per_class = 12;
  spec.test_per_class = 6;
  return taskstream::generate_synthetic(spec, seed);
}

TrainRunConfig quick_config(std::set<Method> methods, Regime regime) {
  TrainRunConfig c;
  c.epochs = 2;
  c.batch_size = 8;
  c.schedule = {};
  c.methods = std::move(methods);
  c.regime = regime;
  c.memory_per_class = 3;
  c.fisher_max_batches = 16;
  c.similarity.scale = 6.0;
  return c;
}

// Appends the block of task t for the given regime.
void add_block(LearnerState& s, const taskstream::TaskStream& stream, std::size_t t,
               const supervision::SemanticTargetTable& table, std::uint64_t seed) {
  const auto& ids = stream.tasks[t].class_ids;
  std::vector<std::string> names;
  for (int c : ids) names.push_back(stream.class_names[c]);
  const auto regime = s.head.regime();
  if (regime == Regime::random_trainable) {
    s.head.append(supervision::build_random_head(ids, names, s.head.dim(), seed + t));
  } else {
    const bool frozen = supervision::is_frozen(regime);
    s.head.append(supervision::build_semantic_head(ids, names, table, frozen, regime));
  }
}

struct Run {
  LearnerState state;
  std::vector<TaskLog> logs;
};

Run run_stream(const TrainRunConfig& cfg, const supervision::SemanticTargetTable& table, std::size_t tasks = 3) {
  const auto data = small_data();
  const auto stream = taskstream::split_protocol(data.data, {Protocol::class_il, 2, 2, 0, 0, 0});
  const std::size_t hidden[] = {16};
  Run r{init_learner(8, hidden, 8, cfg.regime, cfg), {}};
  for (std::size_t t = 0; t < tasks; ++t) {
    add_block(r.state, stream, t, table, 100);
    r.logs.push_back(train_task(r.state, stream.tasks[t], Protocol::class_il, cfg));
  }
  return r;
}

supervision::SemanticTargetTable hierarchy_table(std::size_t dim = 8) {
  const auto data = small_data();
  supervision::FallbackOptions opt;
  opt.dim = dim;
  return supervision::fallback_targets(data.data.class_names, opt);
}

// Squared mean-loss gradient of a single linear layer under inner-product
// logits with scale 1, written out by hand.
std::vector<double> linear_fisher_oracle(const EncoderModel& m, const Tensor2D& head,
                                         const std::vector<LabeledExample>& ex, std::size_t batch) {
  const auto& L = m.layers[0];
  const std::size_t in = L.in_dim(), out = L.out_dim(), classes = head.rows();
  std::vector<double> acc(out * in + out, 0.0);
  std::size_t batches = 0;
  for (std::size_t start = 0; start < ex.size(); start += batch) {
    const std::size_t end = std::min(ex.size(), start + batch);
    std::vector<double> g(out * in + out, 0.0);
    for (std::size_t n = start; n < end; ++n) {
      std::vector<double> f(out);
      for (std::size_t o = 0; o < out; ++o) {
        f[o] = L.bias[o];
        for (std::size_t i = 0; i < in; ++i) f[o] += L.weight(o, i) * ex[n].features[i];
      }
      std::vector<double> z(classes, 0.0);
      double mx = -1e300;
      for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t o = 0; o < out; ++o) z[c] += head(c, o) * f[o];
        mx = std::max(mx, z[c]);
      }
      double sum = 0;
      for (double& v : z) sum += (v = std::exp(v - mx));
      for (std::size_t c = 0; c < classes; ++c) z[c] = z[c] / sum - (int(c) == ex[n].class_id ? 1.0 : 0.0);
      for (std::size_t o = 0; o < out; ++o) {
        double df = 0;
        for (std::size_t c = 0; c < classes; ++c) df += z[c] * head(c, o);
        df /= double(end - start);
        for (std::size_t i = 0; i < in; ++i) g[o * in + i] += df * ex[n].features[i];
        g[out * in + o] += df;
      }
    }
    for (std::size_t p = 0; p < g.size(); ++p) acc[p] += g[p] * g[p];
    ++batches;
  }
  for (double& v : acc) v /= double(batches);
  return acc;
}

}  // namespace

TEST_CASE("herding: 1-D hand case, permutation, brute-force oracle") {
  CHECK(herding_select(column({0, 1, 10}), 1) == std::vector<std::size_t>{1});
  auto full = herding_select(column({0, 1, 10, 4}), 4);
  std::sort(full.begin(), full.end());
  CHECK(full == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK_THROWS(herding_select(Tensor2D(0, 2), 1));

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto x = oracle::random_tensor(5, 2, rng);
    oracle::Matrix rows(5);
    for (std::size_t r = 0; r < 5; ++r) rows[r] = {x(r, 0), x(r, 1)};
    CHECK(herding_select(x, 2) == oracle::herding(rows, 2));
  }
}

TEST_CASE("herding through an encoder matches herding on its features") {
  Rng rng(2);
  const std::size_t hidden[] = {8};
  const auto enc = EncoderModel::mlp(3, hidden, 4, rng);
  const auto x = oracle::random_tensor(12, 3, rng);
  CHECK(herding_select(x, enc, 5) == herding_select(numcore::forward(enc, x), 5));
}

TEST_CASE("replay buffer respects capacity and keeps existing lists") {
  const auto data = small_data();
  ReplayBuffer buf;
  buf.capacity_per_class = 4;
  const auto enc = EncoderModel::identity(8);
  buf.add_classes(data.data.train, enc);
  CHECK(buf.exemplars.size() == 6);
  for (const auto& [c, list] : buf.exemplars) {
    CHECK(list.size() == 4);
    for (const auto& e : list) CHECK(e.class_id == c);
  }
  const auto before = buf.exemplars.at(0);
  buf.add_classes(data.data.train, EncoderModel::identity(8));
  CHECK(buf.exemplars.at(0) == before);
  CHECK(buf.size() == 24);
}

TEST_CASE("feature distillation penalty") {
  Rng rng(4);
  const auto a = oracle::random_tensor(6, 5, rng);
  CHECK(feat_distill_penalty(a, a) == doctest::Approx(0.0).epsilon(1e-15));
  Tensor2D neg = a;
  for (double& v : neg.data()) v = -v;
  CHECK(feat_distill_penalty(a, neg) == doctest::Approx(2.0).epsilon(1e-14));

  const auto b = oracle::random_tensor(6, 5, rng);
  double want = 0;
  for (std::size_t n = 0; n < 6; ++n) {
    double d = 0, na = 0, nb = 0;
    for (std::size_t k = 0; k < 5; ++k) {
      d += a(n, k) * b(n, k);
      na += a(n, k) * a(n, k);
      nb += b(n, k) * b(n, k);
    }
    want += (1.0 - d / std::sqrt(na * nb)) / 6.0;
  }
  CHECK(std::abs(feat_distill_penalty(a, b) - want) < 1e-12);

  Tensor2D scaled = b;
  for (std::size_t n = 0; n < 6; ++n)
    for (std::size_t k = 0; k < 5; ++k) scaled(n, k) *= 0.1 + double(n);
  CHECK(std::abs(feat_distill_penalty(a, scaled) - feat_distill_penalty(a, b)) < 1e-14);
  CHECK(std::abs(feat_distill_penalty(scaled, a) - feat_distill_penalty(b, a)) < 1e-14);

  Tensor2D cur = a;
  const auto lg = feat_distill_loss_and_grad(cur, b);
  CHECK(lg.loss == doctest::Approx(want).epsilon(1e-13));
  const auto num = oracle::numeric_gradient(cur.data(), [&] { return feat_distill_penalty(cur, b); });
  CHECK(oracle::max_rel_error(lg.grad_current.data(), num) < 1e-6);

  Tensor2D zero = a;
  for (std::size_t k = 0; k < 5; ++k) zero(2, k) = 0.0;
  CHECK_THROWS_AS(feat_distill_penalty(zero, b), DegenerateVectorError);
}

TEST_CASE("gradient projection") {
  const std::vector<double> g = {1, 2, -1};
  CHECK(project_gradient(g, g) == g);
  const std::vector<double> neg = {-1, -2, 1};
  for (double v : project_gradient(g, neg)) CHECK(std::abs(v) < 1e-15);
  CHECK(project_gradient(g, std::vector<double>{0, 0, 0}) == g);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    std::vector<double> a(10), b(10);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    if (numcore::dot(a, b) >= 0) {
      for (auto& v : b) v = -v;
    }
    const auto p = project_gradient(a, b);
    const double ip = numcore::dot(p, b);
    CHECK(ip >= -1e-12);
    CHECK(ip <= 1e-12);
  }
}

TEST_CASE("EWC penalty: zero at the anchor, quadratic along a ray") {
  EwcState e;
  e.anchor = {0.5, -1.0, 2.0};
  e.fisher = {0.3, 1.2, 0.0};
  e.lambda = 7.0;
  CHECK(e.penalty(e.anchor) == 0.0);
  const std::vector<double> dir = {1.0, -0.5, 3.0};
  auto at = [&](double t) {
    std::vector<double> p = e.anchor;
    for (std::size_t i = 0; i < 3; ++i) p[i] += t * dir[i];
    return e.penalty(p);
  };
  const double unit = at(1.0);
  CHECK(unit == doctest::Approx(7.0 / 2.0 * (0.3 * 1.0 + 1.2 * 0.25)));
  for (double t : {0.1, 3.0, 40.0}) CHECK(at(t) == doctest::Approx(t * t * unit).epsilon(1e-12));
}

TEST_CASE("Fisher estimate matches the hand-written gradient loop") {
  Rng rng(6);
  auto m = EncoderModel::identity(3);
  for (double& w : m.layers[0].weight.data()) w += 0.3 * rng.normal();
  for (double& b : m.layers[0].bias) b = 0.2 * rng.normal();
  LogitSpace space;
  space.weights = oracle::random_tensor(4, 3, rng);
  space.class_ids = {10, 11, 12, 13};
  for (int c = 0; c < 4; ++c) space.column_of[10 + c] = c;
  std::vector<LabeledExample> ex;
  for (int n = 0; n < 9; ++n) ex.push_back({{rng.normal(), rng.normal(), rng.normal()}, 10 + n % 4, "x", 0});

  std::vector<LabeledExample> local = ex;
  for (auto& e : local) e.class_id -= 10;
  const numcore::SimilarityConfig sim{numcore::SimilarityMode::inner, 1.0};
  for (std::size_t batch : {1, 2, 4}) {
    const auto got = estimate_fisher(m, space, sim, ex, batch);
    const auto want = linear_fisher_oracle(m, space.weights, local, batch);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(std::abs(got[i] - want[i]) < 1e-10);
      CHECK(got[i] >= 0.0);
    }
  }

  auto doubled = ex;
  doubled.insert(doubled.end(), ex.begin(), ex.end());
  const auto once = estimate_fisher(m, space, sim, ex, 1);
  const auto twice = estimate_fisher(m, space, sim, doubled, 1);
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(std::abs(once[i] - twice[i]) < 1e-14);
}

TEST_CASE("Fisher vanishes for a saturated model") {
  auto m = EncoderModel::identity(2);
  LogitSpace space;
  space.weights = Tensor2D{{1, 0}, {0, 1}};
  space.class_ids = {0, 1};
  space.column_of = {{0, 0}, {1, 1}};
  const std::vector<LabeledExample> ex = {{{1, 0}, 0, "a", 0}, {{0, 1}, 1, "b", 0}};
  const auto f = estimate_fisher(m, space, {numcore::SimilarityMode::cosine, 200.0}, ex, 1);
  for (double v : f) CHECK(v < 1e-100);
}

TEST_CASE("frozen semantic head learns a separable two-class task") {
  taskstream::TaskSpec task;
  task.class_ids = {0, 1};
  Rng rng(3);
  for (int i = 0; i < 64; ++i) {
    const int c = i % 2;
    task.train.push_back({{c == 0 ? -2.0 : 2.0, rng.normal() * 0.3, rng.normal() * 0.3}, c, c ? "b" : "a", 0});
  }
  task.test = task.train;
  TrainRunConfig cfg;
  cfg.epochs = 10;
  cfg.schedule = {};
  cfg.regime = Regime::semantic_frozen;
  const std::size_t hidden[] = {16};
  auto s = init_learner(3, hidden, 4, cfg.regime, cfg);
  supervision::SemanticTargetTable table(4);
  table.insert("a", {1, 0, 0, 0});
  table.insert("b", {0, 1, 0, 0});
  s.head.append(supervision::build_semantic_head({0, 1}, {"a", "b"}, table, true));
  const auto hash = s.head.byte_hash();
  train_task(s, task, Protocol::class_il, cfg);
  CHECK(evaluate(s, task.train, {0, 1}, cfg.similarity) >= 0.99);
  CHECK(s.head.byte_hash() == hash);

  taskstream::TaskSpec empty;
  empty.index = 1;
  CHECK_THROWS_AS(train_task(s, empty, Protocol::class_il, cfg), ProtocolError);
}

TEST_CASE("rehearsal with zero capacity reproduces finetune exactly") {
  const auto table = hierarchy_table();
  auto plain = quick_config({Method::finetune}, Regime::random_trainable);
  auto empty = quick_config({Method::finetune, Method::rehearsal}, Regime::random_trainable);
  plain.memory_per_class = 0;
  empty.memory_per_class = 0;
  const auto a = run_stream(plain, table);
  const auto b = run_stream(empty, table);
  CHECK(a.state.encoder == b.state.encoder);
  CHECK(a.state.head == b.state.head);
  CHECK(a.logs[2].epoch_loss == b.logs[2].epoch_loss);
}

TEST_CASE("very large EWC weight pins every parameter the Fisher constrains") {
  const auto data = small_data();
  const auto stream = taskstream::split_protocol(data.data, {Protocol::class_il, 2, 2, 0, 0, 0});
  const auto table = hierarchy_table();
  auto cfg = quick_config({Method::finetune, Method::ewc}, Regime::semantic_frozen);
  cfg.ewc_lambda = 1e12;
  cfg.fisher_max_batches = 256;
  const std::size_t hidden[] = {16};
  auto s = init_learner(8, hidden, 8, cfg.regime, cfg);
  add_block(s, stream, 0, table, 0);
  train_task(s, stream.tasks[0], Protocol::class_il, cfg);
  REQUIRE(s.ewc.has_value());
  const auto fisher = s.ewc->fisher;
  const auto anchor = s.ewc->anchor;
  CHECK(anchor == numcore::flatten_parameters(s.encoder));
  add_block(s, stream, 1, table, 0);
  train_task(s, stream.tasks[1], Protocol::class_il, cfg);
  const auto after = numcore::flatten_parameters(s.encoder);
  // Zero-Fisher entries (units silent on task 0) carry no penalty at all.
  std::size_t constrained = 0;
  double worst = 0;
  for (std::size_t i = 0; i < after.size(); ++i) {
    if (fisher[i] <= 1e-12) continue;
    ++constrained;
    worst = std::max(worst, std::abs(after[i] - anchor[i]));
  }
  CHECK(constrained > after.size() / 2);
  CHECK(worst < 1e-3);
}

TEST_CASE("every method set runs under every regime and frozen heads never move") {
  const auto data = small_data();
  const auto table = hierarchy_table();
  const auto orth = supervision::orthogonalize(table, data.data.class_names, 1);
  supervision::OracleConfig ocfg;
  ocfg.epochs = 2;
  ocfg.hidden = {16};
  ocfg.embed_dim = 8;
  const auto oracle_table = supervision::build_oracle_head(data.data, ocfg).as_table();

  const std::vector<Method> extras = {Method::rehearsal, Method::ewc, Method::feat_distill, Method::grad_project};
  const std::vector<Regime> regimes = {Regime::random_trainable, Regime::semantic_frozen, Regime::semantic_updated,
                                       Regime::orthogonal_frozen, Regime::oracle_frozen};
  for (Regime regime : regimes) {
    const auto& tab = regime == Regime::orthogonal_frozen ? orth : regime == Regime::oracle_frozen ? oracle_table : table;
    for (unsigned mask = 0; mask < 16; ++mask) {
      std::set<Method> methods{Method::finetune};
      for (unsigned b = 0; b < 4; ++b)
        if (mask & (1u << b)) methods.insert(extras[b]);
      CAPTURE(supervision::to_string(regime));
      CAPTURE(mask);
      const auto cfg = quick_config(methods, regime);
      Run r = run_stream(cfg, tab);
      CHECK(r.state.tasks_seen == 3);
      for (const auto& log : r.logs)
        for (double l : log.epoch_loss) CHECK(std::isfinite(l));
      if (supervision::is_frozen(regime)) {
        for (std::size_t t = 0; t < 3; ++t) {
          const auto& blk = r.state.head.block(t);
          for (std::size_t row = 0; row < blk.class_names.size(); ++row) {
            const auto w = blk.weights.row(row);
            CHECK(std::equal(w.begin(), w.end(), tab.at(blk.class_names[row]).begin()));
          }
        }
      }
      if (methods.count(Method::rehearsal)) {
        for (const auto& [c, list] : r.state.buffer.exemplars) CHECK(list.size() <= cfg.memory_per_class);
        CHECK(r.state.buffer.exemplars.size() == 6);
      }
    }
  }
}

TEST_CASE("checkpoint round trip is exact and training resumes identically") {
  const auto table = hierarchy_table();
  const auto cfg = quick_config({Method::finetune, Method::rehearsal, Method::ewc, Method::feat_distill},
                                Regime::semantic_updated);
  auto r = run_stream(cfg, table, 2);
  const auto path = std::filesystem::temp_directory_path() / "lingo_clmethods_checkpoint.bin";
  save_checkpoint(path, r.state);
  auto loaded = load_checkpoint(path);
  CHECK(loaded == r.state);

  const auto data = small_data();
  const auto stream = taskstream::split_protocol(data.data, {Protocol::class_il, 2, 2, 0, 0, 0});
  for (auto* s : {&r.state, &loaded}) {
    add_block(*s, stream, 2, table, 100);
    train_task(*s, stream.tasks[2], Protocol::class_il, cfg);
  }
  CHECK(loaded == r.state);
  CHECK(loaded == run_stream(cfg, table, 3).state);
}

TEST_CASE("corrupt checkpoint is rejected") {
  const auto path = std::filesystem::temp_directory_path() / "lingo_clmethods_bad.bin";
  std::ofstream(path) << "not a checkpoint";
  CHECK_THROWS(load_checkpoint(path));
}
