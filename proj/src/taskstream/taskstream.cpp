#include "lingo/taskstream.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <unordered_map>

namespace lingo::taskstream {

using numcore::Tensor2D;

void Dataset::validate() const {
  auto check = [&](const std::vector<LabeledExample>& split, const char* which) {
    for (std::size_t i = 0; i < split.size(); ++i) {
      const LabeledExample& ex = split[i];
      if (ex.features.size() != feature_dim) {
        throw ShapeError(std::string(which) + " example " + std::to_string(i) + " has wrong width");
      }
      if (ex.class_id < 0 || static_cast<std::size_t>(ex.class_id) >= class_names.size()) {
        throw LabelError(std::string(which) + " example " + std::to_string(i) + " has unknown class id");
      }
      if (ex.class_name.empty()) throw LabelError("empty class name");
      for (double v : ex.features) {
        if (!std::isfinite(v)) throw ShapeError("non-finite feature value");
      }
    }
  };
  check(train, "train");
  check(test, "test");
}

void SyntheticHierarchySpec::validate() const {
  if (superclasses == 0 || classes_per_superclass == 0 || feature_dim == 0) {
    throw ConfigError("synthetic counts must be positive");
  }
  if (!(sigma_super > 0.0) || !(sigma_class > 0.0) || !(sigma_x >= 0.0)) {
    throw ConfigError("synthetic spreads must be positive (sample noise may be 0)");
  }
  if (train_per_class == 0) throw ConfigError("train_per_class must be positive");
}

SyntheticDataset generate_synthetic(const SyntheticHierarchySpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  Rng center_rng = rng.substream("centers");
  Rng sample_rng = rng.substream("samples");

  const std::size_t d = spec.feature_dim;
  const std::size_t n_classes = spec.superclasses * spec.classes_per_superclass;
  SyntheticDataset out;
  out.data.feature_dim = d;
  out.class_centers = Tensor2D(n_classes, d);
  out.superclass_of.resize(n_classes);

  for (std::size_t s = 0; s < spec.superclasses; ++s) {
    std::vector<double> super_center(d);
    for (double& v : super_center) v = spec.sigma_super * center_rng.normal();
    for (std::size_t j = 0; j < spec.classes_per_superclass; ++j) {
      const std::size_t c = s * spec.classes_per_superclass + j;
      out.superclass_of[c] = static_cast<int>(s);
      out.data.class_names.push_back("super" + std::to_string(s) + "_class" + std::to_string(j));
      auto center = out.class_centers.row(c);
      for (std::size_t k = 0; k < d; ++k) center[k] = super_center[k] + spec.sigma_class * center_rng.normal();
    }
  }

  auto draw = [&](std::size_t per_class, std::vector<LabeledExample>& split) {
    for (std::size_t c = 0; c < n_classes; ++c) {
      auto center = out.class_centers.row(c);
      for (std::size_t i = 0; i < per_class; ++i) {
        LabeledExample ex;
        ex.class_id = static_cast<int>(c);
        ex.class_name = out.data.class_names[c];
        ex.features.resize(d);
        for (std::size_t k = 0; k < d; ++k) {
          ex.features[k] = spec.sigma_x == 0.0 ? center[k] : center[k] + spec.sigma_x * sample_rng.normal();
        }
        split.push_back(std::move(ex));
      }
    }
  };
  draw(spec.train_per_class, out.data.train);
  draw(spec.test_per_class, out.data.test);
  return out;
}

std::optional<int> superclass_from_name(const std::string& name) {
  static const std::regex pattern(R"(super(\d+)_class(\d+))");
  std::smatch m;
  if (!std::regex_match(name, m, pattern)) return std::nullopt;
  return std::stoi(m[1].str());
}

Dataset make_domains(const Dataset& base, std::size_t domains, double shift, std::uint64_t seed) {
  if (domains == 0) throw ProtocolError("domain count must be positive");
  Rng rng(seed);
  const std::size_t d = base.feature_dim;
  Dataset out;
  out.feature_dim = d;
  out.class_names = base.class_names;
  for (std::size_t k = 0; k < domains; ++k) {
    Rng domain_rng = rng.substream("domain" + std::to_string(k));
    Tensor2D rotation = numcore::random_orthogonal(d, domain_rng);
    std::vector<double> offset(d);
    for (double& v : offset) v = domain_rng.normal();
    const double n = numcore::l2_norm(offset);
    for (double& v : offset) v *= n > 0.0 ? shift / n : 0.0;

    auto transform = [&](const LabeledExample& ex) {
      LabeledExample t = ex;
      t.domain_id = static_cast<int>(k);
      if (k == 0) return t;
      for (std::size_t i = 0; i < d; ++i) {
        t.features[i] = numcore::dot(rotation.row(i), ex.features) + offset[i];
      }
      return t;
    };
    for (const auto& ex : base.train) out.train.push_back(transform(ex));
    for (const auto& ex : base.test) out.test.push_back(transform(ex));
  }
  return out;
}

std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::class_il: return "class_il";
    case Protocol::task_il: return "task_il";
    case Protocol::domain_il: return "domain_il";
    case Protocol::fewshot_class_il: return "fewshot_class_il";
  }
  return "unknown";
}

Protocol protocol_from_string(const std::string& s) {
  if (s == "class_il") return Protocol::class_il;
  if (s == "task_il") return Protocol::task_il;
  if (s == "domain_il") return Protocol::domain_il;
  if (s == "fewshot_class_il") return Protocol::fewshot_class_il;
  throw ConfigError("unknown protocol '" + s + "'");
}

std::vector<std::size_t> task_sizes(std::size_t total, std::size_t initial, std::size_t increment) {
  if (initial == 0 || initial > total) {
    throw ProtocolError("initial class count " + std::to_string(initial) + " invalid for " +
                        std::to_string(total) + " classes");
  }
  std::vector<std::size_t> sizes{initial};
  const std::size_t rest = total - initial;
  if (rest == 0) return sizes;
  if (increment == 0 || rest % increment != 0) {
    throw ProtocolError("remaining " + std::to_string(rest) + " classes not divisible by increment " +
                        std::to_string(increment));
  }
  sizes.insert(sizes.end(), rest / increment, increment);
  return sizes;
}

std::vector<int> class_order(std::size_t num_classes, std::uint64_t seed) {
  Rng rng(substream_seed(seed, "class_order"));
  std::vector<int> order(num_classes);
  for (std::size_t i = 0; i < num_classes; ++i) order[i] = static_cast<int>(i);
  rng.shuffle(order);
  return order;
}

namespace {

std::map<int, std::vector<const LabeledExample*>> by_class(const std::vector<LabeledExample>& split) {
  std::map<int, std::vector<const LabeledExample*>> groups;
  for (const auto& ex : split) groups[ex.class_id].push_back(&ex);
  return groups;
}

}  // namespace

TaskStream split_protocol(const Dataset& dataset, const ProtocolConfig& config) {
  dataset.validate();
  TaskStream stream;
  stream.protocol = config.protocol;
  stream.class_names = dataset.class_names;
  stream.class_order = class_order(dataset.num_classes(), config.class_order_seed);

  const auto train_groups = by_class(dataset.train);
  const auto test_groups = by_class(dataset.test);

  if (config.protocol == Protocol::domain_il) {
    std::set<int> domains;
    for (const auto& ex : dataset.train) domains.insert(ex.domain_id);
    for (int dom : domains) {
      TaskSpec task;
      task.index = stream.tasks.size();
      task.class_ids = stream.class_order;
      for (const auto& ex : dataset.train) {
        if (ex.domain_id == dom) task.train.push_back(ex);
      }
      for (const auto& ex : dataset.test) {
        if (ex.domain_id == dom) task.test.push_back(ex);
      }
      stream.tasks.push_back(std::move(task));
    }
    return stream;
  }

  if (config.protocol == Protocol::fewshot_class_il && config.shots == 0) {
    throw ProtocolError("few-shot protocol requires shots > 0");
  }
  const auto sizes = task_sizes(dataset.num_classes(), config.initial_classes, config.increment);
  Rng shot_rng(substream_seed(config.seed, "fewshot"));
  std::size_t cursor = 0;
  for (std::size_t t = 0; t < sizes.size(); ++t) {
    TaskSpec task;
    task.index = t;
    task.class_ids.assign(stream.class_order.begin() + static_cast<std::ptrdiff_t>(cursor),
                          stream.class_order.begin() + static_cast<std::ptrdiff_t>(cursor + sizes[t]));
    cursor += sizes[t];
    const bool subsample = config.protocol == Protocol::fewshot_class_il && t > 0;
    if (subsample) task.shots_per_class = config.shots;
    for (int c : task.class_ids) {
      auto it = train_groups.find(c);
      if (it == train_groups.end()) throw ProtocolError("class " + std::to_string(c) + " has no training data");
      const auto& members = it->second;
      if (subsample) {
        if (members.size() < config.shots) {
          throw ProtocolError("class " + std::to_string(c) + " has fewer than K training examples");
        }
        auto perm = shot_rng.permutation(members.size());
        perm.resize(config.shots);
        std::sort(perm.begin(), perm.end());
        for (std::size_t i : perm) task.train.push_back(*members[i]);
      } else {
        for (const auto* ex : members) task.train.push_back(*ex);
      }
      auto tt = test_groups.find(c);
      if (tt != test_groups.end()) {
        for (const auto* ex : tt->second) task.test.push_back(*ex);
      }
    }
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

std::vector<int> grow_label_space(const TaskStream& stream, std::size_t upto_task) {
  if (upto_task >= stream.tasks.size()) throw ProtocolError("task index out of range");
  switch (stream.protocol) {
    case Protocol::task_il:
      return stream.tasks[upto_task].class_ids;
    case Protocol::domain_il:
      return stream.tasks.front().class_ids;
    default: {
      std::vector<int> classes;
      for (std::size_t t = 0; t <= upto_task; ++t) {
        const auto& ids = stream.tasks[t].class_ids;
        classes.insert(classes.end(), ids.begin(), ids.end());
      }
      return classes;
    }
  }
}

Tensor2D features_of(const std::vector<LabeledExample>& examples) {
  if (examples.empty()) return {};
  const std::size_t d = examples.front().features.size();
  Tensor2D out(examples.size(), d);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (examples[i].features.size() != d) throw ShapeError("ragged example features");
    std::copy(examples[i].features.begin(), examples[i].features.end(), out.row(i).begin());
  }
  return out;
}

std::vector<int> class_ids_of(const std::vector<LabeledExample>& examples) {
  std::vector<int> ids;
  ids.reserve(examples.size());
  for (const auto& ex : examples) ids.push_back(ex.class_id);
  return ids;
}

std::vector<LabeledExample> load_examples(const std::filesystem::path& path, std::size_t* feature_dim) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  std::istringstream header(line);
  std::string kw_dim, kw_classes;
  std::size_t dim = 0, declared_classes = 0;
  header >> kw_dim >> dim >> kw_classes >> declared_classes;
  if (!header || kw_dim != "dim" || kw_classes != "classes" || dim == 0) {
    throw ParseError(1, "expected 'dim <d> classes <n>'");
  }

  std::vector<LabeledExample> examples;
  std::unordered_map<std::string, int> ids;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab1 = line.find('\t');
    const auto tab2 = tab1 == std::string::npos ? tab1 : line.find('\t', tab1 + 1);
    if (tab2 == std::string::npos) throw ParseError(lineno, "expected '<name>\\t<domain>\\t<values>'");
    LabeledExample ex;
    ex.class_name = line.substr(0, tab1);
    if (ex.class_name.empty()) throw ParseError(lineno, "empty class name");
    try {
      ex.domain_id = std::stoi(line.substr(tab1 + 1, tab2 - tab1 - 1));
    } catch (const std::exception&) {
      throw ParseError(lineno, "bad domain id");
    }
    std::istringstream values(line.substr(tab2 + 1));
    std::string tok;
    while (values >> tok) {
      char* end = nullptr;
      const double v = std::strtod(tok.c_str(), &end);
      if (end == tok.c_str() || *end != '\0' || !std::isfinite(v)) {
        throw ParseError(lineno, "bad value '" + tok + "'");
      }
      ex.features.push_back(v);
    }
    if (ex.features.size() != dim) {
      throw ParseError(lineno, "expected " + std::to_string(dim) + " values, got " +
                                   std::to_string(ex.features.size()));
    }
    auto [it, inserted] = ids.emplace(ex.class_name, static_cast<int>(ids.size()));
    ex.class_id = it->second;
    examples.push_back(std::move(ex));
  }
  if (ids.size() != declared_classes) {
    throw ParseError(1, "header declares " + std::to_string(declared_classes) + " classes, file has " +
                            std::to_string(ids.size()));
  }
  if (feature_dim != nullptr) *feature_dim = dim;
  return examples;
}

void save_examples(const std::filesystem::path& path, std::size_t feature_dim,
                   const std::vector<LabeledExample>& examples) {
  std::set<std::string> names;
  for (const auto& ex : examples) names.insert(ex.class_name);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write dataset file " + path.string());
  out << "dim " << feature_dim << " classes " << names.size() << '\n';
  char buf[32];
  for (const auto& ex : examples) {
    out << ex.class_name << '\t' << ex.domain_id << '\t';
    for (std::size_t i = 0; i < ex.features.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", ex.features[i]);
      out << (i ? " " : "") << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& train_path, const std::filesystem::path& test_path) {
  Dataset ds;
  std::size_t test_dim = 0;
  ds.train = load_examples(train_path, &ds.feature_dim);
  ds.test = load_examples(test_path, &test_dim);
  if (test_dim != ds.feature_dim) throw ShapeError("train/test feature dims differ");
  std::unordered_map<std::string, int> ids;
  for (auto& ex : ds.train) {
    auto [it, inserted] = ids.emplace(ex.class_name, static_cast<int>(ds.class_names.size()));
    if (inserted) ds.class_names.push_back(ex.class_name);
    ex.class_id = it->second;
  }
  for (auto& ex : ds.test) {
    auto it = ids.find(ex.class_name);
    if (it == ids.end()) throw LookupError("test class '" + ex.class_name + "' absent from train file");
    ex.class_id = it->second;
  }
  return ds;
}

}  // namespace lingo::taskstream
