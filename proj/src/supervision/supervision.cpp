#include "lingo/supervision.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace lingo::supervision {

namespace {

void normalize_in_place(std::vector<double>& v, const std::string& name) {
  const double n = numcore::l2_norm(v);
  if (n == 0.0 || !std::isfinite(n)) throw DegenerateVectorError("zero or non-finite target for '" + name + "'");
  if (std::abs(n - 1.0) <= 1e-12) return;
  for (double& x : v) x /= n;
}

std::vector<double> random_unit(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double n = 0.0;
  while (n == 0.0) {
    for (double& x : v) x = rng.normal();
    n = numcore::l2_norm(v);
  }
  for (double& x : v) x /= n;
  return v;
}

}  // namespace

void SemanticTargetTable::insert(const std::string& name, std::vector<double> vec) {
  if (name.empty()) throw LookupError("empty class name");
  if (vec.size() != dim_) {
    throw ShapeError("target for '" + name + "' has width " + std::to_string(vec.size()) + ", table dim " +
                     std::to_string(dim_));
  }
  if (index_.count(name)) throw LookupError("duplicate class name '" + name + "'");
  for (double x : vec) {
    if (!std::isfinite(x)) throw DegenerateVectorError("non-finite target for '" + name + "'");
  }
  normalize_in_place(vec, name);
  index_.emplace(name, names_.size());
  names_.push_back(name);
  vectors_.push_back(std::move(vec));
}

const std::vector<double>& SemanticTargetTable::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw LookupError("no semantic target for '" + name + "'");
  return vectors_[it->second];
}

void SemanticTargetTable::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "dim " << dim_ << '\n';
  char buf[32];
  for (std::size_t i = 0; i < names_.size(); ++i) {
    out << names_[i] << '\t';
    for (std::size_t k = 0; k < dim_; ++k) {
      std::snprintf(buf, sizeof(buf), "%.17g", vectors_[i][k]);
      out << (k ? " " : "") << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

SemanticTargetTable load_targets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embeddings file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "missing 'dim <d>' header");
  std::istringstream header(line);
  std::string kw;
  long long dim = 0;
  header >> kw >> dim;
  if (!header || kw != "dim" || dim <= 0) throw ParseError(1, "expected 'dim <d>'");

  SemanticTargetTable table(static_cast<std::size_t>(dim));
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(lineno, "missing tab between name and vector");
    const std::string name = line.substr(0, tab);
    if (name.empty()) throw ParseError(lineno, "empty class name");
    if (table.contains(name)) throw ParseError(lineno, "duplicate class '" + name + "'");
    std::istringstream values(line.substr(tab + 1));
    std::vector<double> vec;
    std::string tok;
    while (values >> tok) {
      char* end = nullptr;
      const double v = std::strtod(tok.c_str(), &end);
      if (end == tok.c_str() || *end != '\0') throw ParseError(lineno, "bad number '" + tok + "'");
      if (!std::isfinite(v)) throw ParseError(lineno, "non-finite value");
      vec.push_back(v);
    }
    if (vec.size() != table.dim()) {
      throw ParseError(lineno, "expected " + std::to_string(table.dim()) + " values, got " +
                                   std::to_string(vec.size()));
    }
    try {
      table.insert(name, std::move(vec));
    } catch (const Error& e) {
      throw ParseError(lineno, e.what());
    }
  }
  return table;
}

std::string to_string(Regime r) {
  switch (r) {
    case Regime::random_trainable: return "random_trainable";
    case Regime::semantic_frozen: return "semantic_frozen";
    case Regime::semantic_updated: return "semantic_updated";
    case Regime::orthogonal_frozen: return "orthogonal_frozen";
    case Regime::oracle_frozen: return "oracle_frozen";
  }
  return "unknown";
}

Regime regime_from_string(const std::string& s) {
  for (Regime r : {Regime::random_trainable, Regime::semantic_frozen, Regime::semantic_updated,
                   Regime::orthogonal_frozen, Regime::oracle_frozen}) {
    if (to_string(r) == s) return r;
  }
  throw ConfigError("unknown supervision regime '" + s + "'");
}

bool is_frozen(Regime r) {
  return r == Regime::semantic_frozen || r == Regime::orthogonal_frozen || r == Regime::oracle_frozen;
}

Tensor2D& ClassifierHead::trainable_weights(std::size_t t) {
  if (frozen()) throw Error("frozen_head", "head regime " + to_string(regime_) + " is frozen");
  return blocks_.at(t).weights;
}

void ClassifierHead::append(HeadBlock block) {
  if (block.weights.cols() != dim_) throw ShapeError("head block width does not match head dim");
  if (block.weights.rows() != block.class_ids.size() || block.class_ids.size() != block.class_names.size()) {
    throw ShapeError("head block rows do not match its class list");
  }
  blocks_.push_back(std::move(block));
}

void ClassifierHead::append(ClassifierHead other) {
  if (other.regime_ != regime_ || other.dim_ != dim_) throw ShapeError("cannot merge heads of different regime/width");
  for (auto& b : other.blocks_) append(std::move(b));
}

Tensor2D ClassifierHead::stacked(std::size_t first, std::size_t last) const {
  Tensor2D out(0, dim_);
  for (std::size_t t = first; t < last; ++t) out = out.vstack(blocks_.at(t).weights);
  return out;
}

std::vector<int> ClassifierHead::stacked_ids(std::size_t first, std::size_t last) const {
  std::vector<int> ids;
  for (std::size_t t = first; t < last; ++t) {
    const auto& b = blocks_.at(t).class_ids;
    ids.insert(ids.end(), b.begin(), b.end());
  }
  return ids;
}

std::uint64_t ClassifierHead::byte_hash() const {
  std::uint64_t h = fnv1a64(to_string(regime_));
  for (const auto& b : blocks_) {
    const auto& d = b.weights.data();
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double)), h);
  }
  return h;
}

ClassifierHead build_random_head(const std::vector<int>& class_ids,
                                 const std::vector<std::string>& class_names, std::size_t dim,
                                 std::uint64_t seed) {
  if (dim == 0) throw ShapeError("head dim must be positive");
  Rng rng(seed);
  HeadBlock block{Tensor2D(class_ids.size(), dim), class_ids, class_names};
  for (double& w : block.weights.data()) w = rng.normal();
  ClassifierHead head(Regime::random_trainable, dim);
  head.append(std::move(block));
  return head;
}

ClassifierHead build_semantic_head(const std::vector<int>& class_ids,
                                   const std::vector<std::string>& class_names,
                                   const SemanticTargetTable& table, bool frozen,
                                   std::optional<Regime> regime_override) {
  std::vector<std::string> missing;
  for (const auto& n : class_names) {
    if (!table.contains(n)) missing.push_back(n);
  }
  if (!missing.empty()) {
    std::string msg = "semantic targets missing for:";
    for (const auto& n : missing) msg += " '" + n + "'";
    throw LookupError(msg);
  }
  const Regime regime = regime_override.value_or(frozen ? Regime::semantic_frozen : Regime::semantic_updated);
  HeadBlock block{Tensor2D(class_names.size(), table.dim()), class_ids, class_names};
  for (std::size_t r = 0; r < class_names.size(); ++r) {
    const auto& v = table.at(class_names[r]);
    std::copy(v.begin(), v.end(), block.weights.row(r).begin());
  }
  ClassifierHead head(regime, table.dim());
  head.append(std::move(block));
  return head;
}

SemanticTargetTable orthogonalize(const SemanticTargetTable& table,
                                  const std::vector<std::string>& class_order, std::uint64_t seed) {
  const std::size_t d = table.dim();
  if (class_order.size() > d) {
    throw RankError(std::to_string(class_order.size()) + " classes cannot be orthogonal in dim " + std::to_string(d));
  }
  Rng rng(seed);
  std::vector<std::vector<double>> basis;
  SemanticTargetTable out(d);
  for (const auto& name : class_order) {
    std::vector<double> v = table.at(name);
    for (int attempt = 0;; ++attempt) {
      // Two passes of classical Gram-Schmidt keep the residual orthogonal to
      // working precision.
      for (int pass = 0; pass < 2; ++pass) {
        for (const auto& b : basis) {
          const double p = numcore::dot(v, b);
          for (std::size_t k = 0; k < d; ++k) v[k] -= p * b[k];
        }
      }
      const double n = numcore::l2_norm(v);
      if (n > 1e-8) {
        for (double& x : v) x /= n;
        break;
      }
      if (attempt == 0) {
        std::cerr << "warning: target for '" << name
                  << "' is linearly dependent on earlier classes; completing with a random direction\n";
      }
      v = random_unit(rng, d);
    }
    basis.push_back(v);
    out.insert(name, std::move(v));
  }
  return out;
}

std::string OracleConfig::fingerprint() const {
  std::ostringstream os;
  os.precision(17);
  os << "oracle:e" << epochs << ":b" << batch_size << ":lr" << learning_rate << ":m" << momentum << ":s";
  for (const auto& m : schedule) os << m.epoch << 'x' << m.multiplier << ',';
  os << ":h";
  for (auto h : hidden) os << h << ',';
  os << ":d" << embed_dim << ":sim" << static_cast<int>(similarity.mode) << '/' << similarity.scale << ":seed" << seed;
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(os.str())));
  return buf;
}

SemanticTargetTable OracleArtifact::as_table() const {
  SemanticTargetTable table(head.cols());
  for (std::size_t r = 0; r < head.rows(); ++r) {
    auto row = head.row(r);
    table.insert(class_names[r], std::vector<double>(row.begin(), row.end()));
  }
  return table;
}

OracleArtifact build_oracle_head(const taskstream::Dataset& dataset, const OracleConfig& config) {
  dataset.validate();
  if (dataset.train.empty()) throw ProtocolError("oracle needs training data");
  Rng rng(config.seed);
  Rng init_rng = rng.substream("oracle_init");
  Rng batch_rng = rng.substream("oracle_batches");

  numcore::EncoderModel encoder =
      numcore::EncoderModel::mlp(dataset.feature_dim, config.hidden, config.embed_dim, init_rng);
  Tensor2D head(dataset.num_classes(), config.embed_dim);
  for (double& w : head.data()) w = init_rng.normal();

  const Tensor2D x = taskstream::features_of(dataset.train);
  const std::vector<int> y = taskstream::class_ids_of(dataset.train);
  numcore::SgdState sgd(config.learning_rate, config.momentum, config.schedule);
  const std::size_t n = x.rows();
  const std::size_t bs = std::max<std::size_t>(1, config.batch_size);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = batch_rng.permutation(n);
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t stop = std::min(n, start + bs);
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(stop));
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(y[i]);
      numcore::backward_and_step(encoder, head, x.gather_rows(idx), labels, sgd, false, config.similarity, epoch);
    }
  }

  const auto pred = numcore::argmax_rows(
      numcore::similarity_logits(head, numcore::forward(encoder, x), config.similarity.mode, config.similarity.scale));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) correct += pred[i] == y[i];

  OracleArtifact art;
  art.head = std::move(head);
  art.class_names = dataset.class_names;
  art.config_fingerprint = config.fingerprint();
  art.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return art;
}

FallbackMode fallback_mode_from_string(const std::string& s) {
  if (s == "hierarchy") return FallbackMode::hierarchy;
  if (s == "hash") return FallbackMode::hash;
  throw ConfigError("unknown fallback mode '" + s + "'");
}

SemanticTargetTable fallback_targets(const std::vector<std::string>& class_names,
                                     const FallbackOptions& options) {
  if (options.dim == 0) throw ShapeError("target dim must be positive");
  SemanticTargetTable table(options.dim);
  if (options.mode == FallbackMode::hash) {
    for (const auto& name : class_names) {
      Rng rng(substream_seed(options.seed, "hash:" + name));
      table.insert(name, random_unit(rng, options.dim));
    }
    return table;
  }

  std::map<int, std::vector<double>> super_dirs;
  std::vector<std::vector<double>> rows;
  for (const auto& name : class_names) {
    const auto super = taskstream::superclass_from_name(name);
    if (!super) throw LookupError("hierarchy fallback needs 'super{i}_class{j}' names, got '" + name + "'");
    auto it = super_dirs.find(*super);
    if (it == super_dirs.end()) {
      Rng rng(substream_seed(options.seed, "super:" + std::to_string(*super)));
      it = super_dirs.emplace(*super, random_unit(rng, options.dim)).first;
    }
    Rng class_rng(substream_seed(options.seed, "class:" + name));
    const auto class_dir = random_unit(class_rng, options.dim);
    std::vector<double> v(options.dim);
    for (std::size_t k = 0; k < options.dim; ++k) v[k] = it->second[k] + options.alpha * class_dir[k];
    rows.push_back(std::move(v));
  }

  std::set<std::vector<double>> seen;
  bool duplicates = false;
  for (const auto& r : rows) duplicates |= !seen.insert(r).second;
  if (duplicates) {
    std::cerr << "warning: hierarchy fallback with alpha=" << options.alpha
              << " assigns identical targets to distinct classes\n";
    if (!options.allow_duplicates) {
      throw Error("degenerate_targets", "distinct classes share a target (alpha = " + std::to_string(options.alpha) + ")");
    }
  }
  for (std::size_t i = 0; i < class_names.size(); ++i) table.insert(class_names[i], std::move(rows[i]));
  return table;
}

}  // namespace lingo::supervision
