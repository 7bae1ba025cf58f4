#pragma once

// Continual-learning metrics and the representation analyses: subspace
// drift of a task's features between two training stages, and inter-class
// correlation of class-mean embeddings.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lingo/numcore.hpp"
#include "lingo/taskstream.hpp"

namespace lingo::metrics {

using numcore::Tensor2D;

/// A(i, j): accuracy on task i after training task j, for 0 <= i <= j < N.
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::size_t num_tasks);

  [[nodiscard]] std::size_t num_tasks() const noexcept { return n_; }
  void set(std::size_t i, std::size_t j, double value);
  [[nodiscard]] std::optional<double> get(std::size_t i, std::size_t j) const;
  /// Throws MetricError when the cell is missing.
  [[nodiscard]] double at(std::size_t i, std::size_t j) const;
  [[nodiscard]] bool column_complete(std::size_t j) const;
  [[nodiscard]] bool complete() const;

  friend bool operator==(const AccuracyMatrix&, const AccuracyMatrix&) = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::optional<double>> cells_;  // n x n, only i <= j used
};

/// (1/N) sum_i A(i, N).
double last_accuracy(const AccuracyMatrix& a);
/// (1/N) sum_j (1/j) sum_{i<=j} A(i, j).
double avg_incremental_accuracy(const AccuracyMatrix& a);
/// (1/(N-1)) sum_{i<N} [max_{j<N} A(i, j) - A(i, N)]; negative means the
/// final model beats every earlier one on old tasks.
double forgetting_rate(const AccuracyMatrix& a);

struct DriftOptions {
  std::size_t k = 10;
  bool centered = true;
};

/// Top-k principal directions of `features` (columns of the d x k result),
/// from the eigen-decomposition of F^T F, largest eigenvalue first. Throws
/// RankError when k exceeds the numerical rank.
Tensor2D principal_directions(const Tensor2D& features, std::size_t k, bool centered);

/// 1 - (1/k) ||V_k(F)^T V_k(F')||_F^2, in [0, 1].
double repre_drift(const Tensor2D& reference, const Tensor2D& later, const DriftOptions& options = {});

struct DriftPoint {
  std::size_t reference_task = 0;
  std::size_t after_task = 0;
  double value = 0.0;

  friend bool operator==(const DriftPoint&, const DriftPoint&) = default;
};

struct DriftReport {
  DriftOptions options;
  std::vector<DriftPoint> points;
};

struct CorrelationReport {
  std::vector<int> class_ids;
  std::vector<std::string> class_names;
  Tensor2D matrix;  // symmetric, unit diagonal
};

/// Cosine similarity of class-mean embeddings for `classes`, using the
/// examples of each class found in `sample`.
CorrelationReport interclass_correlation(const numcore::EncoderModel& encoder,
                                         const std::vector<taskstream::LabeledExample>& sample,
                                         const std::vector<int>& classes);

struct CorrelationGap {
  double within = 0.0;  // mean over same-superclass pairs
  double cross = 0.0;   // mean over different-superclass pairs
  [[nodiscard]] double gap() const { return within - cross; }
};

/// Off-diagonal means grouped by superclass (parsed from "super{i}_class{j}").
std::optional<CorrelationGap> superclass_gap(const CorrelationReport& report);

// File emitters and their loaders.
void write_accuracy_csv(const std::filesystem::path& path, const AccuracyMatrix& a);
AccuracyMatrix read_accuracy_csv(const std::filesystem::path& path);
void write_drift_csv(const std::filesystem::path& path, const DriftReport& report);
DriftReport read_drift_csv(const std::filesystem::path& path);
void write_correlation_csv(const std::filesystem::path& path, const CorrelationReport& report);
CorrelationReport read_correlation_csv(const std::filesystem::path& path);

/// Shortest decimal text that parses back to the same double.
std::string format_real(double v);

}  // namespace lingo::metrics
