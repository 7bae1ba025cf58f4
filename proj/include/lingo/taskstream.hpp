#pragma once

// Datasets and their division into continual-learning task sequences.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lingo/numcore.hpp"

namespace lingo::taskstream {

struct LabeledExample {
  std::vector<double> features;
  int class_id = 0;
  std::string class_name;
  int domain_id = 0;

  friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

/// A labelled dataset with a fixed train/test split. `class_names[id]` names
/// global class `id`.
struct Dataset {
  std::size_t feature_dim = 0;
  std::vector<std::string> class_names;
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> test;

  [[nodiscard]] std::size_t num_classes() const { return class_names.size(); }
  void validate() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct SyntheticHierarchySpec {
  std::size_t superclasses = 8;
  std::size_t classes_per_superclass = 4;
  std::size_t feature_dim = 32;
  double sigma_super = 1.5;
  double sigma_class = 0.2;
  double sigma_x = 0.4;
  std::size_t train_per_class = 40;
  std::size_t test_per_class = 50;

  void validate() const;
};

struct SyntheticDataset {
  Dataset data;
  numcore::Tensor2D class_centers;     // num_classes x feature_dim
  std::vector<int> superclass_of;      // per class id
};

/// Class `s * classes_per_superclass + j` is named "super{s}_class{j}" and
/// its center is the superclass center plus a class offset.
SyntheticDataset generate_synthetic(const SyntheticHierarchySpec& spec, std::uint64_t seed);

/// Parses "super{i}_class{j}"; nullopt for any other name.
std::optional<int> superclass_from_name(const std::string& name);

/// Replicates every example into `domains` copies. Domain k > 0 applies a
/// seeded random rotation followed by a mean shift of norm `shift`.
Dataset make_domains(const Dataset& base, std::size_t domains, double shift, std::uint64_t seed);

enum class Protocol { class_il, task_il, domain_il, fewshot_class_il };

std::string to_string(Protocol p);
Protocol protocol_from_string(const std::string& s);

struct ProtocolConfig {
  Protocol protocol = Protocol::class_il;
  std::size_t initial_classes = 16;  // B
  std::size_t increment = 4;         // C
  std::size_t shots = 0;             // K, few-shot only
  std::uint64_t seed = 0;            // few-shot subsampling
  std::uint64_t class_order_seed = 0;
};

struct TaskSpec {
  std::size_t index = 0;
  std::vector<int> class_ids;  // in class-order
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> test;
  std::optional<std::size_t> shots_per_class;
};

struct TaskStream {
  Protocol protocol = Protocol::class_il;
  std::vector<int> class_order;
  std::vector<std::string> class_names;  // global, by class id
  std::vector<TaskSpec> tasks;

  [[nodiscard]] std::size_t size() const { return tasks.size(); }
};

/// Task sizes [B, C, C, ...] covering `total` classes; throws ProtocolError
/// when the remainder does not divide evenly.
std::vector<std::size_t> task_sizes(std::size_t total, std::size_t initial, std::size_t increment);

/// Seeded permutation of class ids shared by every method of a run group.
std::vector<int> class_order(std::size_t num_classes, std::uint64_t seed);

TaskStream split_protocol(const Dataset& dataset, const ProtocolConfig& config);

/// Classes a test sample of task `t` may be assigned to: the union of tasks
/// 0..t for class-IL (task order, then class order), the task's own classes
/// for task-IL, and the shared label set for domain-IL.
std::vector<int> grow_label_space(const TaskStream& stream, std::size_t upto_task);

numcore::Tensor2D features_of(const std::vector<LabeledExample>& examples);
std::vector<int> class_ids_of(const std::vector<LabeledExample>& examples);

/// Text dataset file: "dim <d> classes <n>" then "<name>\t<domain>\t<v...>".
std::vector<LabeledExample> load_examples(const std::filesystem::path& path,
                                          std::size_t* feature_dim = nullptr);
void save_examples(const std::filesystem::path& path, std::size_t feature_dim,
                   const std::vector<LabeledExample>& examples);

/// Builds a Dataset from separate train and test files; class ids are
/// assigned in order of first appearance in the train file.
Dataset load_dataset(const std::filesystem::path& train_path, const std::filesystem::path& test_path);

}  // namespace lingo::taskstream
