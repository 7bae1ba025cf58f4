#pragma once

// Classifier heads under the five supervision regimes and semantic-target
// tables (one unit vector per class name).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "lingo/numcore.hpp"
#include "lingo/taskstream.hpp"

namespace lingo::supervision {

using numcore::Tensor2D;

/// class_name -> unit L2 vector of width `dim()`. Insertion order is kept.
class SemanticTargetTable {
 public:
  SemanticTargetTable() = default;
  explicit SemanticTargetTable(std::size_t dim) : dim_(dim) {}

  [[nodiscard]] std::size_t dim() const noexcept { return dim_; }
  [[nodiscard]] std::size_t size() const noexcept { return names_.size(); }
  [[nodiscard]] const std::vector<std::string>& names() const noexcept { return names_; }
  [[nodiscard]] bool contains(const std::string& name) const { return index_.count(name) != 0; }

  /// Stores `vec` rescaled to unit norm (left untouched when already within
  /// 1e-12 of unit, so save/load is bit-stable). Throws on duplicate name,
  /// width mismatch, non-finite values or a zero vector.
  void insert(const std::string& name, std::vector<double> vec);
  [[nodiscard]] const std::vector<double>& at(const std::string& name) const;

  void save(const std::filesystem::path& path) const;

  friend bool operator==(const SemanticTargetTable& a, const SemanticTargetTable& b) {
    return a.dim_ == b.dim_ && a.names_ == b.names_ && a.vectors_ == b.vectors_;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> names_;
  std::vector<std::vector<double>> vectors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Embeddings file: "dim <d>" then "<class name>\t<v1> ... <vd>" per class.
SemanticTargetTable load_targets(const std::filesystem::path& path);

enum class Regime { random_trainable, semantic_frozen, semantic_updated, orthogonal_frozen, oracle_frozen };

std::string to_string(Regime r);
Regime regime_from_string(const std::string& s);
[[nodiscard]] bool is_frozen(Regime r);

struct HeadBlock {
  Tensor2D weights;  // C_t x d, row order = class order of the task
  std::vector<int> class_ids;
  std::vector<std::string> class_names;

  friend bool operator==(const HeadBlock&, const HeadBlock&) = default;
};

/// Ordered per-task weight blocks sharing one regime. Frozen regimes give no
/// mutable access to their weights.
class ClassifierHead {
 public:
  ClassifierHead() = default;
  ClassifierHead(Regime regime, std::size_t dim) : regime_(regime), dim_(dim) {}

  [[nodiscard]] Regime regime() const noexcept { return regime_; }
  [[nodiscard]] bool frozen() const noexcept { return is_frozen(regime_); }
  [[nodiscard]] std::size_t dim() const noexcept { return dim_; }
  [[nodiscard]] std::size_t num_blocks() const noexcept { return blocks_.size(); }
  [[nodiscard]] const HeadBlock& block(std::size_t t) const { return blocks_.at(t); }
  [[nodiscard]] const std::vector<HeadBlock>& blocks() const noexcept { return blocks_; }

  /// Mutable weights of block t; throws for frozen regimes.
  Tensor2D& trainable_weights(std::size_t t);

  void append(HeadBlock block);
  /// Moves every block of `other` (same regime and width) onto this head.
  void append(ClassifierHead other);

  /// Rows of blocks [first, last) stacked in order, with their class ids.
  [[nodiscard]] Tensor2D stacked(std::size_t first, std::size_t last) const;
  [[nodiscard]] std::vector<int> stacked_ids(std::size_t first, std::size_t last) const;

  /// Hash of every weight byte, for the freeze contract.
  [[nodiscard]] std::uint64_t byte_hash() const;

  friend bool operator==(const ClassifierHead&, const ClassifierHead&) = default;

 private:
  Regime regime_ = Regime::random_trainable;
  std::size_t dim_ = 0;
  std::vector<HeadBlock> blocks_;
};

/// Trainable block with i.i.d. standard-normal entries.
ClassifierHead build_random_head(const std::vector<int>& class_ids,
                                 const std::vector<std::string>& class_names, std::size_t dim,
                                 std::uint64_t seed);

/// Rows copied from the table in task class order; regime semantic_frozen or
/// semantic_updated. `regime_override` lets the orthogonal and oracle
/// regimes reuse the same construction from their own tables.
ClassifierHead build_semantic_head(const std::vector<int>& class_ids,
                                   const std::vector<std::string>& class_names,
                                   const SemanticTargetTable& table, bool frozen,
                                   std::optional<Regime> regime_override = std::nullopt);

/// Gram-Schmidt of `table` rows in `class_order` (names). A row that is
/// numerically dependent on its predecessors is replaced by a seeded random
/// direction and a warning is written to stderr.
SemanticTargetTable orthogonalize(const SemanticTargetTable& table,
                                  const std::vector<std::string>& class_order, std::uint64_t seed);

struct OracleConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::vector<numcore::SgdState::Milestone> schedule{{15, 0.1}, {25, 0.1}};
  std::vector<std::size_t> hidden{64, 64};
  std::size_t embed_dim = 32;
  numcore::SimilarityConfig similarity{};
  std::uint64_t seed = 0;

  [[nodiscard]] std::string fingerprint() const;
};

struct OracleArtifact {
  Tensor2D head;  // one row per class id
  std::vector<std::string> class_names;
  std::string config_fingerprint;
  double train_accuracy = 0.0;

  /// The head rows as a target table keyed by class name.
  [[nodiscard]] SemanticTargetTable as_table() const;

  friend bool operator==(const OracleArtifact&, const OracleArtifact&) = default;
};

/// Joint training of a fresh encoder and random head on every class of
/// `dataset` at once; the head is extracted afterwards.
OracleArtifact build_oracle_head(const taskstream::Dataset& dataset, const OracleConfig& config);

enum class FallbackMode { hierarchy, hash };

FallbackMode fallback_mode_from_string(const std::string& s);

struct FallbackOptions {
  FallbackMode mode = FallbackMode::hierarchy;
  std::size_t dim = 32;
  double alpha = 0.5;
  std::uint64_t seed = 0;
  bool allow_duplicates = false;
};

/// Targets without a language model. Hierarchy mode needs names of the form
/// "super{i}_class{j}" and returns normalize(u_super + alpha * u_class).
/// Hash mode derives a unit vector from each name alone.
SemanticTargetTable fallback_targets(const std::vector<std::string>& class_names,
                                     const FallbackOptions& options);

}  // namespace lingo::supervision
