#include <cstdio>
#include <fstream>
#include <set>

#include "lingo/runner.hpp"

namespace lingo::runner {

namespace {

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get_or(const json& obj, const char* key, const T& fallback, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

std::string to_string(EmbeddingSource s) {
  switch (s) {
    case EmbeddingSource::hierarchy: return "hierarchy";
    case EmbeddingSource::hash: return "hash";
    case EmbeddingSource::file: return "file";
  }
  return "unknown";
}

EmbeddingSource embedding_source_from_string(const std::string& s) {
  if (s == "hierarchy") return EmbeddingSource::hierarchy;
  if (s == "hash") return EmbeddingSource::hash;
  if (s == "file") return EmbeddingSource::file;
  throw ConfigError("unknown embeddings source '" + s + "'");
}

std::string hex16(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
  check_keys(j, {"name", "protocol", "data", "model", "supervision", "train", "seeds", "output_dir", "analysis"},
             "config");
  ExperimentConfig c;
  c.name = get_or<std::string>(j, "name", c.name, "config");
  c.output_dir = get_or<std::string>(j, "output_dir", c.output_dir, "config");
  c.seeds = get_or<std::vector<std::uint64_t>>(j, "seeds", c.seeds, "config");

  if (auto it = j.find("protocol"); it != j.end()) {
    const json& p = *it;
    check_keys(p, {"type", "initial_classes", "increment", "shots"}, "protocol");
    c.protocol.protocol = taskstream::protocol_from_string(get_or<std::string>(p, "type", "class_il", "protocol"));
    c.protocol.initial_classes = get_or<std::size_t>(p, "initial_classes", c.protocol.initial_classes, "protocol");
    c.protocol.increment = get_or<std::size_t>(p, "increment", c.protocol.increment, "protocol");
    c.protocol.shots = get_or<std::size_t>(p, "shots", c.protocol.shots, "protocol");
  }

  if (auto it = j.find("data"); it != j.end()) {
    const json& d = *it;
    check_keys(d, {"synthetic", "train_path", "test_path", "domains", "domain_shift"}, "data");
    c.data.train_path = get_or<std::string>(d, "train_path", "", "data");
    c.data.test_path = get_or<std::string>(d, "test_path", "", "data");
    c.data.domains = get_or<std::size_t>(d, "domains", c.data.domains, "data");
    c.data.domain_shift = get_or<double>(d, "domain_shift", c.data.domain_shift, "data");
    if (auto s = d.find("synthetic"); s != d.end()) {
      check_keys(*s, {"superclasses", "classes_per_superclass", "feature_dim", "sigma_super", "sigma_class", "sigma_x",
                      "train_per_class", "test_per_class"},
                 "data.synthetic");
      taskstream::SyntheticHierarchySpec spec;
      const std::string w = "data.synthetic";
      spec.superclasses = get_or<std::size_t>(*s, "superclasses", spec.superclasses, w);
      spec.classes_per_superclass = get_or<std::size_t>(*s, "classes_per_superclass", spec.classes_per_superclass, w);
      spec.feature_dim = get_or<std::size_t>(*s, "feature_dim", spec.feature_dim, w);
      spec.sigma_super = get_or<double>(*s, "sigma_super", spec.sigma_super, w);
      spec.sigma_class = get_or<double>(*s, "sigma_class", spec.sigma_class, w);
      spec.sigma_x = get_or<double>(*s, "sigma_x", spec.sigma_x, w);
      spec.train_per_class = get_or<std::size_t>(*s, "train_per_class", spec.train_per_class, w);
      spec.test_per_class = get_or<std::size_t>(*s, "test_per_class", spec.test_per_class, w);
      c.data.synthetic = spec;
    }
  } else {
    c.data.synthetic = taskstream::SyntheticHierarchySpec{};
  }

  if (auto it = j.find("model"); it != j.end()) {
    check_keys(*it, {"hidden", "embed_dim"}, "model");
    c.hidden = get_or<std::vector<std::size_t>>(*it, "hidden", c.hidden, "model");
    c.embed_dim = get_or<std::size_t>(*it, "embed_dim", c.embed_dim, "model");
  }

  if (auto it = j.find("supervision"); it != j.end()) {
    check_keys(*it, {"regime", "embeddings"}, "supervision");
    c.regime = supervision::regime_from_string(get_or<std::string>(*it, "regime", "random_trainable", "supervision"));
    if (auto e = it->find("embeddings"); e != it->end()) {
      check_keys(*e, {"source", "path", "alpha"}, "supervision.embeddings");
      c.embeddings.source = embedding_source_from_string(get_or<std::string>(*e, "source", "hierarchy", "embeddings"));
      c.embeddings.path = get_or<std::string>(*e, "path", "", "embeddings");
      c.embeddings.alpha = get_or<double>(*e, "alpha", c.embeddings.alpha, "embeddings");
    }
  }

  if (auto it = j.find("train"); it != j.end()) {
    const json& t = *it;
    check_keys(t, {"methods", "epochs", "batch_size", "learning_rate", "momentum", "milestones", "memory_per_class",
                   "ewc_lambda", "fisher_batch_size", "fisher_max_batches", "distill_weight", "distill_on_replay",
                   "project_batch_size", "similarity", "scale"},
               "train");
    auto& tr = c.train;
    const std::string w = "train";
    if (auto m = t.find("methods"); m != t.end()) {
      tr.methods.clear();
      for (const auto& name : m->get<std::vector<std::string>>()) tr.methods.insert(clmethods::method_from_string(name));
      tr.methods.insert(clmethods::Method::finetune);
    }
    tr.epochs = get_or<std::size_t>(t, "epochs", tr.epochs, w);
    tr.batch_size = get_or<std::size_t>(t, "batch_size", tr.batch_size, w);
    tr.learning_rate = get_or<double>(t, "learning_rate", tr.learning_rate, w);
    tr.momentum = get_or<double>(t, "momentum", tr.momentum, w);
    if (auto m = t.find("milestones"); m != t.end()) {
      tr.schedule.clear();
      for (const auto& pair : *m) {
        if (!pair.is_array() || pair.size() != 2) throw ConfigError("train.milestones entries are [epoch, multiplier]");
        tr.schedule.push_back({pair[0].get<std::size_t>(), pair[1].get<double>()});
      }
    }
    tr.memory_per_class = get_or<std::size_t>(t, "memory_per_class", tr.memory_per_class, w);
    tr.ewc_lambda = get_or<double>(t, "ewc_lambda", tr.ewc_lambda, w);
    tr.fisher_batch_size = get_or<std::size_t>(t, "fisher_batch_size", tr.fisher_batch_size, w);
    tr.fisher_max_batches = get_or<std::size_t>(t, "fisher_max_batches", tr.fisher_max_batches, w);
    tr.distill_weight = get_or<double>(t, "distill_weight", tr.distill_weight, w);
    tr.distill_on_replay = get_or<bool>(t, "distill_on_replay", tr.distill_on_replay, w);
    tr.project_batch_size = get_or<std::size_t>(t, "project_batch_size", tr.project_batch_size, w);
    const auto sim = get_or<std::string>(t, "similarity", "cosine", w);
    if (sim == "cosine") {
      tr.similarity.mode = numcore::SimilarityMode::cosine;
    } else if (sim == "inner") {
      tr.similarity.mode = numcore::SimilarityMode::inner;
    } else {
      throw ConfigError("train.similarity must be 'cosine' or 'inner'");
    }
    tr.similarity.scale = get_or<double>(t, "scale", tr.similarity.scale, w);
  }
  c.train.regime = c.regime;

  if (auto it = j.find("analysis"); it != j.end()) {
    check_keys(*it, {"drift", "drift_k", "centered", "correlation", "correlation_classes"}, "analysis");
    auto& a = c.analysis;
    a.drift = get_or<bool>(*it, "drift", a.drift, "analysis");
    a.drift_k = get_or<std::size_t>(*it, "drift_k", a.drift_k, "analysis");
    a.centered = get_or<bool>(*it, "centered", a.centered, "analysis");
    a.correlation = get_or<bool>(*it, "correlation", a.correlation, "analysis");
    a.correlation_classes = get_or<std::size_t>(*it, "correlation_classes", a.correlation_classes, "analysis");
  }

  if (!c.data.synthetic && c.data.train_path.empty()) c.data.synthetic = taskstream::SyntheticHierarchySpec{};
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c = parse_config(j);
  // Relative data/embedding paths resolve against the config's directory.
  const auto base = path.parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  resolve(c.data.train_path);
  resolve(c.data.test_path);
  resolve(c.embeddings.path);
  return c;
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  j["output_dir"] = c.output_dir;
  j["seeds"] = c.seeds;
  j["protocol"] = {{"type", taskstream::to_string(c.protocol.protocol)},
                   {"initial_classes", c.protocol.initial_classes},
                   {"increment", c.protocol.increment},
                   {"shots", c.protocol.shots}};
  json d = {{"train_path", c.data.train_path},
            {"test_path", c.data.test_path},
            {"domains", c.data.domains},
            {"domain_shift", c.data.domain_shift}};
  if (c.data.synthetic) {
    const auto& s = *c.data.synthetic;
    d["synthetic"] = {{"superclasses", s.superclasses},   {"classes_per_superclass", s.classes_per_superclass},
                      {"feature_dim", s.feature_dim},     {"sigma_super", s.sigma_super},
                      {"sigma_class", s.sigma_class},     {"sigma_x", s.sigma_x},
                      {"train_per_class", s.train_per_class}, {"test_per_class", s.test_per_class}};
  }
  j["data"] = d;
  j["model"] = {{"hidden", c.hidden}, {"embed_dim", c.embed_dim}};
  j["supervision"] = {{"regime", supervision::to_string(c.regime)},
                      {"embeddings",
                       {{"source", to_string(c.embeddings.source)},
                        {"path", c.embeddings.path},
                        {"alpha", c.embeddings.alpha}}}};
  std::vector<std::string> methods;
  for (auto m : c.train.methods) methods.push_back(clmethods::to_string(m));
  json milestones = json::array();
  for (const auto& m : c.train.schedule) milestones.push_back({m.epoch, m.multiplier});
  const auto& t = c.train;
  j["train"] = {{"methods", methods},
                {"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"learning_rate", t.learning_rate},
                {"momentum", t.momentum},
                {"milestones", milestones},
                {"memory_per_class", t.memory_per_class},
                {"ewc_lambda", t.ewc_lambda},
                {"fisher_batch_size", t.fisher_batch_size},
                {"fisher_max_batches", t.fisher_max_batches},
                {"distill_weight", t.distill_weight},
                {"distill_on_replay", t.distill_on_replay},
                {"project_batch_size", t.project_batch_size},
                {"similarity", t.similarity.mode == numcore::SimilarityMode::cosine ? "cosine" : "inner"},
                {"scale", t.similarity.scale}};
  j["analysis"] = {{"drift", c.analysis.drift},
                   {"drift_k", c.analysis.drift_k},
                   {"centered", c.analysis.centered},
                   {"correlation", c.analysis.correlation},
                   {"correlation_classes", c.analysis.correlation_classes}};
  return j;
}

std::string fingerprint(const ExperimentConfig& config) {
  json j = to_json(config);
  j.erase("name");
  j.erase("output_dir");
  j.erase("seeds");
  return hex16(fnv1a64(j.dump()));
}

std::string protocol_fingerprint(const ExperimentConfig& config) {
  const json j = to_json(config);
  json p = {{"protocol", j["protocol"]}, {"data", j["data"]}};
  if (config.protocol.protocol != taskstream::Protocol::fewshot_class_il) p["protocol"].erase("shots");
  return hex16(fnv1a64(p.dump()));
}

}  // namespace lingo::runner
