#include "lingo/runner.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

namespace lingo::runner {

namespace fs = std::filesystem;
using supervision::Regime;
using taskstream::Protocol;

namespace {

std::size_t total_classes(const ExperimentConfig& c) {
  if (c.data.synthetic) return c.data.synthetic->superclasses * c.data.synthetic->classes_per_superclass;
  std::size_t dim = 0;
  std::set<std::string> names;
  for (const auto& ex : taskstream::load_examples(c.data.train_path, &dim)) names.insert(ex.class_name);
  return names.size();
}

bool needs_targets(Regime r) {
  return r == Regime::semantic_frozen || r == Regime::semantic_updated || r == Regime::orthogonal_frozen;
}

taskstream::Dataset build_dataset(const ExperimentConfig& c, std::uint64_t seed) {
  taskstream::Dataset ds;
  if (c.data.synthetic) {
    ds = taskstream::generate_synthetic(*c.data.synthetic, substream_seed(seed, "data")).data;
  } else {
    ds = taskstream::load_dataset(c.data.train_path, c.data.test_path);
  }
  if (c.protocol.protocol == Protocol::domain_il) {
    ds = taskstream::make_domains(ds, c.data.domains, c.data.domain_shift, substream_seed(seed, "domains"));
  }
  return ds;
}

supervision::SemanticTargetTable base_targets(const ExperimentConfig& c, const std::vector<std::string>& names,
                                              std::uint64_t seed) {
  switch (c.embeddings.source) {
    case EmbeddingSource::file: {
      auto table = supervision::load_targets(c.embeddings.path);
      if (table.dim() != c.embed_dim) {
        throw ShapeError("embeddings dim " + std::to_string(table.dim()) + " != model embed_dim " +
                         std::to_string(c.embed_dim));
      }
      return table;
    }
    case EmbeddingSource::hash:
    case EmbeddingSource::hierarchy: {
      supervision::FallbackOptions opt;
      opt.mode = c.embeddings.source == EmbeddingSource::hash ? supervision::FallbackMode::hash
                                                               : supervision::FallbackMode::hierarchy;
      opt.dim = c.embed_dim;
      opt.alpha = c.embeddings.alpha;
      opt.seed = substream_seed(seed, "targets");
      return supervision::fallback_targets(names, opt);
    }
  }
  throw ConfigError("unresolvable embeddings source");
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

template <typename Writer>
void write_file_atomic(const fs::path& path, Writer&& writer) {
  const fs::path tmp = path.string() + ".tmp";
  writer(tmp);
  fs::rename(tmp, path);
}

struct FeatureStage {
  std::size_t after_task;
  numcore::Tensor2D features;
};

void save_feature_stages(const fs::path& path, const std::vector<FeatureStage>& stages) {
  write_file_atomic(path, [&](const fs::path& tmp) {
    std::ofstream os(tmp, std::ios::binary);
    auto u64 = [&](std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
    u64(stages.size());
    for (const auto& s : stages) {
      u64(s.after_task);
      u64(s.features.rows());
      u64(s.features.cols());
      os.write(reinterpret_cast<const char*>(s.features.data().data()),
               static_cast<std::streamsize>(s.features.size() * sizeof(double)));
    }
    if (!os) throw IoError("write failed for " + tmp.string());
  });
}

std::vector<FeatureStage> load_feature_stages(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  auto u64 = [&] {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw IoError("truncated feature file " + path.string());
    return v;
  };
  std::vector<FeatureStage> stages(u64());
  for (auto& s : stages) {
    s.after_task = u64();
    const auto rows = u64();
    const auto cols = u64();
    std::vector<double> data(rows * cols);
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw IoError("truncated feature file " + path.string());
    s.features = numcore::Tensor2D(rows, cols, std::move(data));
  }
  return stages;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> optional_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

json accuracy_json(const metrics::AccuracyMatrix& a) {
  json rows = json::array();
  for (std::size_t i = 0; i < a.num_tasks(); ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < a.num_tasks(); ++j) row.push_back(optional_json(a.get(i, j)));
    rows.push_back(row);
  }
  return rows;
}

metrics::AccuracyMatrix accuracy_from(const json& j) {
  metrics::AccuracyMatrix a(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    for (std::size_t k = 0; k < j[i].size(); ++k) {
      if (!j[i][k].is_null()) a.set(i, k, j[i][k].get<double>());
    }
  }
  return a;
}

std::vector<std::string> deviations_for(const ExperimentConfig& c) {
  std::vector<std::string> d;
  if (c.train.has(clmethods::Method::grad_project)) {
    d.emplace_back("grad_project: single averaged-replay-gradient constraint replaces the multi-constraint QP");
  }
  if (c.train.has(clmethods::Method::ewc)) {
    d.emplace_back("ewc: quadratic penalty applied as an implicit proximal step after each SGD update");
  }
  if (c.regime == Regime::oracle_frozen) {
    d.emplace_back("oracle_frozen: jointly trained head transplanted as-is (row-normalized) and frozen");
  }
  if (c.analysis.drift) {
    d.emplace_back(c.analysis.centered ? "drift: features column-centered before PCA"
                                       : "drift: uncentered PCA of F^T F");
  }
  if (c.regime != Regime::random_trainable && c.embeddings.source != EmbeddingSource::file) {
    d.emplace_back("targets: fallback embeddings (" + std::string(c.embeddings.source == EmbeddingSource::hash ? "hash" : "hierarchy") +
                   ") instead of a language model");
  }
  return d;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("seeds must be nonempty");
  if (embed_dim == 0) throw ConfigError("model.embed_dim must be positive");
  train.validate();
  if (!data.synthetic) {
    if (data.train_path.empty() || data.test_path.empty()) throw ConfigError("data needs synthetic or train_path+test_path");
    if (!fs::exists(data.train_path)) throw ConfigError("train_path does not exist: " + data.train_path);
    if (!fs::exists(data.test_path)) throw ConfigError("test_path does not exist: " + data.test_path);
  } else {
    data.synthetic->validate();
  }
  const std::size_t total = total_classes(*this);
  if (protocol.protocol == Protocol::domain_il) {
    if (data.domains == 0) throw ConfigError("domain-IL needs at least one domain");
  } else {
    taskstream::task_sizes(total, protocol.initial_classes, protocol.increment);
  }
  if (protocol.protocol == Protocol::fewshot_class_il) {
    if (protocol.shots == 0) throw ConfigError("few-shot protocol needs shots > 0");
    if (data.synthetic && protocol.shots > data.synthetic->train_per_class) {
      throw ConfigError("shots exceed training examples per class");
    }
  }
  if (needs_targets(regime)) {
    if (embeddings.source == EmbeddingSource::file) {
      if (embeddings.path.empty() || !fs::exists(embeddings.path)) {
        throw ConfigError("embeddings file not found: '" + embeddings.path + "'");
      }
      if (supervision::load_targets(embeddings.path).dim() != embed_dim) {
        throw ConfigError("embeddings dim differs from model.embed_dim");
      }
    } else if (embeddings.source == EmbeddingSource::hierarchy && !data.synthetic) {
      // Hierarchy fallback needs structured class names; checked at load.
      for (const auto& ex : taskstream::load_examples(data.train_path)) {
        if (!taskstream::superclass_from_name(ex.class_name)) {
          throw ConfigError("hierarchy embeddings need 'super{i}_class{j}' class names");
        }
      }
    }
    if (regime == Regime::orthogonal_frozen && total > embed_dim) {
      throw ConfigError("orthogonal targets need classes <= embed_dim");
    }
  }
  if (analysis.drift && analysis.drift_k == 0) throw ConfigError("analysis.drift_k must be positive");
}

bool SeedResult::freeze_contract_holds() const {
  if (!head_frozen) return true;
  return block_hash_at_build == block_hash_final;
}

SeedResult run_seed(const ExperimentConfig& config, std::uint64_t seed, const fs::path& seed_dir) {
  SeedResult result;
  result.seed = seed;
  try {
    const taskstream::Dataset dataset = build_dataset(config, seed);
    taskstream::ProtocolConfig pc = config.protocol;
    pc.seed = substream_seed(seed, "split");
    pc.class_order_seed = substream_seed(seed, "order");
    const taskstream::TaskStream stream = taskstream::split_protocol(dataset, pc);

    std::optional<supervision::SemanticTargetTable> table;
    if (needs_targets(config.regime)) {
      table = base_targets(config, dataset.class_names, seed);
      if (config.regime == Regime::orthogonal_frozen) {
        std::vector<std::string> ordered;
        for (int c : stream.class_order) ordered.push_back(dataset.class_names[static_cast<std::size_t>(c)]);
        table = supervision::orthogonalize(*table, ordered, substream_seed(seed, "orthogonal"));
      }
    } else if (config.regime == Regime::oracle_frozen) {
      supervision::OracleConfig oc;
      oc.epochs = config.train.epochs;
      oc.batch_size = config.train.batch_size;
      oc.learning_rate = config.train.learning_rate;
      oc.momentum = config.train.momentum;
      oc.schedule = config.train.schedule;
      oc.hidden = config.hidden;
      oc.embed_dim = config.embed_dim;
      oc.similarity = config.train.similarity;
      oc.seed = substream_seed(seed, "oracle");
      table = supervision::build_oracle_head(dataset, oc).as_table();
    }

    clmethods::TrainRunConfig tc = config.train;
    tc.regime = config.regime;
    tc.seed = seed;
    clmethods::LearnerState state =
        clmethods::init_learner(dataset.feature_dim, config.hidden, config.embed_dim, config.regime, tc);
    result.head_frozen = supervision::is_frozen(config.regime);

    auto block_for = [&](const std::vector<int>& ids, std::size_t t) {
      std::vector<std::string> names;
      for (int c : ids) names.push_back(dataset.class_names[static_cast<std::size_t>(c)]);
      if (config.regime == Regime::random_trainable) {
        return supervision::build_random_head(ids, names, config.embed_dim,
                                              substream_seed(seed, "head" + std::to_string(t)));
      }
      return supervision::build_semantic_head(ids, names, *table, supervision::is_frozen(config.regime),
                                              config.regime);
    };

    const std::size_t n_tasks = stream.size();
    result.accuracy = metrics::AccuracyMatrix(n_tasks);
    std::vector<FeatureStage> stages;
    const bool drift_on = config.analysis.drift && n_tasks > 1;
    const numcore::Tensor2D drift_inputs = taskstream::features_of(stream.tasks.front().test);

    for (std::size_t t = 0; t < n_tasks; ++t) {
      const auto& task = stream.tasks[t];
      if (config.protocol.protocol != Protocol::domain_il || t == 0) {
        supervision::ClassifierHead block = block_for(task.class_ids, t);
        result.block_hash_at_build.push_back(block.byte_hash());
        state.head.append(std::move(block));
      }
      const auto log = clmethods::train_task(state, task, config.protocol.protocol, tc);
      result.epoch_loss.push_back(log.epoch_loss);
      for (std::size_t i = 0; i <= t; ++i) {
        const auto labels = taskstream::grow_label_space(stream, config.protocol.protocol == Protocol::task_il ? i : t);
        result.accuracy.set(i, t, clmethods::evaluate(state, stream.tasks[i].test, labels, tc.similarity));
      }
      if (drift_on) stages.push_back({t, numcore::forward(state.encoder, drift_inputs)});
    }

    for (std::size_t b = 0; b < state.head.num_blocks(); ++b) {
      supervision::ClassifierHead one(state.head.regime(), state.head.dim());
      one.append(state.head.block(b));
      result.block_hash_final.push_back(one.byte_hash());
    }

    result.last = metrics::last_accuracy(result.accuracy);
    result.avg = metrics::avg_incremental_accuracy(result.accuracy);
    if (n_tasks >= 2) result.forget = metrics::forgetting_rate(result.accuracy);

    if (drift_on) {
      metrics::DriftReport report;
      report.options = {config.analysis.drift_k, config.analysis.centered};
      for (std::size_t s = 1; s < stages.size(); ++s) {
        report.points.push_back(
            {0, stages[s].after_task, metrics::repre_drift(stages[0].features, stages[s].features, report.options)});
      }
      result.drift = std::move(report);
    }

    if (config.analysis.correlation) {
      std::vector<int> classes;
      const std::size_t limit = config.analysis.correlation_classes == 0
                                    ? dataset.num_classes()
                                    : std::min(config.analysis.correlation_classes, dataset.num_classes());
      for (std::size_t c = 0; c < limit; ++c) classes.push_back(static_cast<int>(c));
      std::vector<taskstream::LabeledExample> sample;
      for (const auto& ex : dataset.test) {
        if (ex.domain_id == 0) sample.push_back(ex);
      }
      result.correlation = metrics::interclass_correlation(state.encoder, sample, classes);
      result.correlation_gap = metrics::superclass_gap(*result.correlation);
    }

    result.ok = true;
    if (!seed_dir.empty()) {
      fs::create_directories(seed_dir);
      clmethods::save_checkpoint(seed_dir / "checkpoint.bin", state);
      if (!stages.empty()) save_feature_stages(seed_dir / "drift_features.bin", stages);
    }
  } catch (const std::exception& e) {
    result.ok = false;
    result.error = e.what();
  }
  return result;
}

json metrics_json(const SeedResult& r) {
  json j;
  j["seed"] = r.seed;
  j["ok"] = r.ok;
  if (!r.ok) {
    j["error"] = r.error;
    return j;
  }
  j["last"] = optional_json(r.last);
  j["avg"] = optional_json(r.avg);
  j["forget"] = optional_json(r.forget);
  j["num_tasks"] = r.accuracy.num_tasks();
  json curves = json::array();
  for (std::size_t i = 0; i < r.accuracy.num_tasks(); ++i) {
    json curve = json::array();
    for (std::size_t t = i; t < r.accuracy.num_tasks(); ++t) curve.push_back(r.accuracy.at(i, t));
    curves.push_back(curve);
  }
  j["per_task"] = curves;
  if (r.drift) {
    json d = json::array();
    for (const auto& p : r.drift->points) d.push_back({{"reference_task", p.reference_task}, {"after_task", p.after_task}, {"value", p.value}});
    j["drift"] = {{"k", r.drift->options.k}, {"centered", r.drift->options.centered}, {"points", d}};
  }
  if (r.correlation_gap) {
    j["correlation_gap"] = {{"within", r.correlation_gap->within},
                            {"cross", r.correlation_gap->cross},
                            {"gap", r.correlation_gap->gap()}};
  }
  j["freeze_contract"] = r.freeze_contract_holds();
  return j;
}

json to_json(const SeedResult& r) {
  json j;
  j["seed"] = r.seed;
  j["ok"] = r.ok;
  j["error"] = r.error;
  j["accuracy"] = accuracy_json(r.accuracy);
  j["last"] = optional_json(r.last);
  j["avg"] = optional_json(r.avg);
  j["forget"] = optional_json(r.forget);
  j["epoch_loss"] = r.epoch_loss;
  j["head_frozen"] = r.head_frozen;
  j["block_hash_at_build"] = r.block_hash_at_build;
  j["block_hash_final"] = r.block_hash_final;
  if (r.drift) {
    json pts = json::array();
    for (const auto& p : r.drift->points) pts.push_back({p.reference_task, p.after_task, p.value});
    j["drift"] = {{"k", r.drift->options.k}, {"centered", r.drift->options.centered}, {"points", pts}};
  }
  if (r.correlation) {
    j["correlation"] = {{"class_ids", r.correlation->class_ids},
                        {"class_names", r.correlation->class_names},
                        {"matrix", r.correlation->matrix.data()}};
  }
  if (r.correlation_gap) j["correlation_gap"] = {r.correlation_gap->within, r.correlation_gap->cross};
  return j;
}

SeedResult seed_result_from_json(const json& j) {
  SeedResult r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.ok = j.at("ok").get<bool>();
  r.error = j.value("error", "");
  r.accuracy = accuracy_from(j.at("accuracy"));
  r.last = optional_from(j.at("last"));
  r.avg = optional_from(j.at("avg"));
  r.forget = optional_from(j.at("forget"));
  r.epoch_loss = j.at("epoch_loss").get<std::vector<std::vector<double>>>();
  r.head_frozen = j.at("head_frozen").get<bool>();
  r.block_hash_at_build = j.at("block_hash_at_build").get<std::vector<std::uint64_t>>();
  r.block_hash_final = j.at("block_hash_final").get<std::vector<std::uint64_t>>();
  if (j.contains("drift")) {
    metrics::DriftReport d;
    d.options.k = j["drift"]["k"].get<std::size_t>();
    d.options.centered = j["drift"]["centered"].get<bool>();
    for (const auto& p : j["drift"]["points"]) {
      d.points.push_back({p[0].get<std::size_t>(), p[1].get<std::size_t>(), p[2].get<double>()});
    }
    r.drift = std::move(d);
  }
  if (j.contains("correlation")) {
    metrics::CorrelationReport c;
    c.class_ids = j["correlation"]["class_ids"].get<std::vector<int>>();
    c.class_names = j["correlation"]["class_names"].get<std::vector<std::string>>();
    c.matrix = numcore::Tensor2D(c.class_ids.size(), c.class_ids.size(),
                                 j["correlation"]["matrix"].get<std::vector<double>>());
    r.correlation = std::move(c);
  }
  if (j.contains("correlation_gap")) {
    r.correlation_gap = metrics::CorrelationGap{j["correlation_gap"][0].get<double>(), j["correlation_gap"][1].get<double>()};
  }
  return r;
}

json to_json(const RunRecord& r) {
  json seeds = json::array();
  for (const auto& s : r.seeds) seeds.push_back(to_json(s));
  return {{"name", r.name},
          {"fingerprint", r.fingerprint},
          {"protocol_fingerprint", r.protocol_fingerprint},
          {"config", r.config},
          {"seeds", seeds},
          {"deviations", r.deviations},
          {"framework_version", r.framework_version},
          {"wall_clock_seconds", r.wall_clock_seconds}};
}

RunRecord record_from_json(const json& j) {
  RunRecord r;
  r.name = j.at("name").get<std::string>();
  r.fingerprint = j.at("fingerprint").get<std::string>();
  r.protocol_fingerprint = j.at("protocol_fingerprint").get<std::string>();
  r.config = j.at("config");
  for (const auto& s : j.at("seeds")) r.seeds.push_back(seed_result_from_json(s));
  r.deviations = j.at("deviations").get<std::vector<std::string>>();
  r.framework_version = j.at("framework_version").get<std::string>();
  r.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
  return r;
}

RunRecord load_record(const fs::path& path) {
  try {
    return record_from_json(json::parse(read_file(path)));
  } catch (const json::exception& e) {
    throw ParseError(1, "malformed record " + path.string() + ": " + e.what());
  }
}

void write_atomic(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_atomic(path, [&](const fs::path& tmp) {
    std::ofstream os(tmp, std::ios::binary);
    os << contents;
    if (!os) throw IoError("write failed for " + tmp.string());
  });
}

namespace {

void persist_seed(const fs::path& dir, const std::string& fp, const SeedResult& r) {
  fs::create_directories(dir);
  write_atomic(dir / "metrics.json", metrics_json(r).dump(2) + "\n");
  if (r.ok) {
    write_file_atomic(dir / "accuracy.csv", [&](const fs::path& p) { metrics::write_accuracy_csv(p, r.accuracy); });
    if (r.drift) write_file_atomic(dir / "drift.csv", [&](const fs::path& p) { metrics::write_drift_csv(p, *r.drift); });
    if (r.correlation) {
      write_file_atomic(dir / "correlation.csv",
                        [&](const fs::path& p) { metrics::write_correlation_csv(p, *r.correlation); });
    }
  }
  json j = to_json(r);
  j["fingerprint"] = fp;
  // Written last: its presence marks the seed as complete.
  write_atomic(dir / "result.json", j.dump() + "\n");
}

std::optional<SeedResult> resume_seed(const fs::path& dir, const std::string& fp) {
  const fs::path p = dir / "result.json";
  if (!fs::exists(p)) return std::nullopt;
  try {
    const json j = json::parse(read_file(p));
    if (j.value("fingerprint", "") != fp) return std::nullopt;
    SeedResult r = seed_result_from_json(j);
    if (!r.ok) return std::nullopt;
    return r;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

void update_manifest(const fs::path& outdir, const RunRecord& record) {
  const fs::path p = outdir / "manifest.json";
  json manifest = {{"framework_version", kFrameworkVersion}, {"runs", json::object()}};
  if (fs::exists(p)) {
    try {
      manifest = json::parse(read_file(p));
    } catch (const json::exception&) {
      // A corrupt manifest is rebuilt from this run onward.
    }
  }
  std::vector<std::uint64_t> seeds;
  for (const auto& s : record.seeds) seeds.push_back(s.seed);
  manifest["runs"][record.fingerprint] = {{"name", record.name},
                                          {"record", record.fingerprint + "/record.json"},
                                          {"protocol_fingerprint", record.protocol_fingerprint},
                                          {"seeds", seeds}};
  write_atomic(p, manifest.dump(2) + "\n");
}

}  // namespace

RunRecord run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  RunRecord record;
  record.name = config.name;
  record.fingerprint = fingerprint(config);
  record.protocol_fingerprint = protocol_fingerprint(config);
  record.config = to_json(config);
  record.deviations = deviations_for(config);
  record.seeds.resize(config.seeds.size());

  const fs::path run_dir = fs::path(config.output_dir) / record.fingerprint;
  if (options.persist) {
    fs::create_directories(run_dir);
    write_atomic(run_dir / "config.json", record.config.dump(2) + "\n");
  }

  auto job = [&](std::size_t i) {
    const std::uint64_t seed = config.seeds[i];
    const fs::path seed_dir = options.persist ? run_dir / std::to_string(seed) : fs::path{};
    if (options.persist && options.resume) {
      if (auto cached = resume_seed(seed_dir, record.fingerprint)) {
        record.seeds[i] = std::move(*cached);
        return;
      }
    }
    SeedResult r = run_seed(config, seed, seed_dir);
    if (options.persist) persist_seed(seed_dir, record.fingerprint, r);
    record.seeds[i] = std::move(r);
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(options.jobs, config.seeds.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < config.seeds.size(); ++i) job(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < config.seeds.size(); i = next++) job(i);
      });
    }
  }

  record.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (options.persist) {
    write_atomic(run_dir / "record.json", to_json(record).dump(2) + "\n");
    update_manifest(config.output_dir, record);
  }
  return record;
}

MetricStat summarize(const std::vector<std::optional<double>>& values) {
  MetricStat s;
  double sum = 0.0;
  for (const auto& v : values) {
    if (v) {
      sum += *v;
      ++s.n;
    }
  }
  if (s.n == 0) return s;
  s.mean = sum / static_cast<double>(s.n);
  double var = 0.0;
  for (const auto& v : values) {
    if (v) var += (*v - s.mean) * (*v - s.mean);
  }
  s.stddev = std::sqrt(var / static_cast<double>(s.n));
  return s;
}

Comparison compare(const std::vector<RunRecord>& records, const std::string& baseline) {
  if (records.empty()) throw ComparisonError("nothing to compare");
  for (const auto& r : records) {
    if (r.protocol_fingerprint != records.front().protocol_fingerprint) {
      throw ComparisonError("record '" + r.name + "' uses a different protocol than '" + records.front().name + "'");
    }
  }
  Comparison cmp;
  cmp.baseline = baseline;
  const ComparisonRow* base = nullptr;
  for (const auto& r : records) {
    ComparisonRow row;
    row.name = r.name;
    std::vector<std::optional<double>> last, avg, forget;
    for (const auto& s : r.seeds) {
      if (!s.ok) continue;
      last.push_back(s.last);
      avg.push_back(s.avg);
      forget.push_back(s.forget);
    }
    row.last = summarize(last);
    row.avg = summarize(avg);
    row.forget = summarize(forget);
    cmp.rows.push_back(row);
  }
  for (const auto& row : cmp.rows) {
    if (row.name == baseline) {
      base = &row;
      break;
    }
  }
  if (base == nullptr) throw ComparisonError("baseline '" + baseline + "' not among the records");
  const ComparisonRow b = *base;
  for (auto& row : cmp.rows) {
    row.delta_last = row.last.mean - b.last.mean;
    row.delta_avg = row.avg.mean - b.avg.mean;
    row.delta_forget = row.forget.mean - b.forget.mean;
  }
  return cmp;
}

json to_json(const Comparison& c) {
  json rows = json::array();
  auto stat = [](const MetricStat& s) { return json{{"mean", s.mean}, {"stddev", s.stddev}, {"n", s.n}}; };
  for (const auto& r : c.rows) {
    rows.push_back({{"name", r.name},
                    {"last", stat(r.last)},
                    {"avg", stat(r.avg)},
                    {"forget", stat(r.forget)},
                    {"delta_last", r.delta_last},
                    {"delta_avg", r.delta_avg},
                    {"delta_forget", r.delta_forget}});
  }
  return {{"baseline", c.baseline}, {"rows", rows}};
}

void write_comparison(const fs::path& csv_path, const fs::path& json_path, const Comparison& c) {
  std::ostringstream os;
  os << "name,last_mean,last_std,avg_mean,avg_std,forget_mean,forget_std,delta_last,delta_avg,delta_forget\n";
  for (const auto& r : c.rows) {
    os << r.name << ',' << metrics::format_real(r.last.mean) << ',' << metrics::format_real(r.last.stddev) << ','
       << metrics::format_real(r.avg.mean) << ',' << metrics::format_real(r.avg.stddev) << ','
       << metrics::format_real(r.forget.mean) << ',' << metrics::format_real(r.forget.stddev) << ','
       << metrics::format_real(r.delta_last) << ',' << metrics::format_real(r.delta_avg) << ','
       << metrics::format_real(r.delta_forget) << '\n';
  }
  write_atomic(csv_path, os.str());
  write_atomic(json_path, to_json(c).dump(2) + "\n");
}

SweepAxis sweep_axis_from_string(const std::string& s) {
  if (s == "exemplars") return SweepAxis::exemplars;
  if (s == "shots" || s == "K") return SweepAxis::shots;
  if (s == "initial_classes" || s == "B") return SweepAxis::initial_classes;
  throw ConfigError("unknown sweep axis '" + s + "'");
}

std::vector<std::size_t> default_axis_values(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::exemplars: return {2, 5, 10, 20};
    case SweepAxis::shots: return {4, 8, 16, 32};
    case SweepAxis::initial_classes: return {};
  }
  return {};
}

std::vector<ExperimentConfig> sweep_configs(const ExperimentConfig& base, SweepAxis axis,
                                            const std::vector<std::size_t>& values) {
  if (values.empty()) throw ConfigError("sweep needs at least one axis value");
  std::vector<ExperimentConfig> out;
  for (std::size_t v : values) {
    ExperimentConfig c = base;
    switch (axis) {
      case SweepAxis::exemplars:
        // Zero exemplars is plain fine-tuning.
        if (v == 0) {
          c.train.methods.erase(clmethods::Method::rehearsal);
        } else {
          c.train.methods.insert(clmethods::Method::rehearsal);
        }
        c.train.memory_per_class = v;
        c.name = base.name + "_m" + std::to_string(v);
        break;
      case SweepAxis::shots:
        if (c.protocol.protocol != Protocol::fewshot_class_il) {
          throw ConfigError("shots axis needs protocol fewshot_class_il");
        }
        if (v == 0) throw ConfigError("shots axis values must be positive");
        c.protocol.shots = v;
        c.name = base.name + "_K" + std::to_string(v);
        break;
      case SweepAxis::initial_classes:
        if (c.protocol.protocol == Protocol::domain_il) throw ConfigError("initial-class axis is not defined for domain-IL");
        c.protocol.initial_classes = v;
        c.name = base.name + "_B" + std::to_string(v);
        break;
    }
    try {
      c.validate();
    } catch (const Error& e) {
      throw ConfigError("sweep value " + std::to_string(v) + ": " + e.what());
    }
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<RunRecord> sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<std::size_t>& values,
                             const RunOptions& options) {
  std::vector<RunRecord> records;
  for (const auto& c : sweep_configs(base, axis, values)) records.push_back(run_experiment(c, options));
  return records;
}

std::vector<metrics::DriftReport> analyze_drift(const fs::path& record_path, std::size_t k, bool centered) {
  const RunRecord record = load_record(record_path);
  const fs::path run_dir = record_path.parent_path();
  std::vector<metrics::DriftReport> reports;
  for (const auto& s : record.seeds) {
    const fs::path seed_dir = run_dir / std::to_string(s.seed);
    const fs::path features = seed_dir / "drift_features.bin";
    if (!fs::exists(features)) throw IoError("no stored drift features for seed " + std::to_string(s.seed));
    const auto stages = load_feature_stages(features);
    metrics::DriftReport report;
    report.options = {k, centered};
    for (std::size_t i = 1; i < stages.size(); ++i) {
      report.points.push_back(
          {stages[0].after_task, stages[i].after_task, metrics::repre_drift(stages[0].features, stages[i].features, report.options)});
    }
    write_file_atomic(seed_dir / ("drift_k" + std::to_string(k) + ".csv"),
                      [&](const fs::path& p) { metrics::write_drift_csv(p, report); });
    reports.push_back(std::move(report));
  }
  return reports;
}

}  // namespace lingo::runner
