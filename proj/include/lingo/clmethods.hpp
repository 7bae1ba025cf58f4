#pragma once

// Sequential training engine and the anti-forgetting mechanisms that plug
// into it: rehearsal with herding, EWC, feature distillation and single-
// constraint gradient projection. Every mechanism composes with every
// supervision regime.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lingo/numcore.hpp"
#include "lingo/supervision.hpp"
#include "lingo/taskstream.hpp"

namespace lingo::clmethods {

using numcore::EncoderModel;
using numcore::Tensor2D;
using taskstream::LabeledExample;

enum class Method { finetune, rehearsal, ewc, feat_distill, grad_project };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

/// Greedy herding on precomputed features: each step adds the example that
/// brings the running mean of the selection closest to the class mean.
/// Ties go to the lowest index.
std::vector<std::size_t> herding_select(const Tensor2D& features, std::size_t m);
/// Same, encoding `examples` with `encoder` first.
std::vector<std::size_t> herding_select(const Tensor2D& examples, const EncoderModel& encoder, std::size_t m);

/// Per-class exemplars of raw inputs, each list in herding order.
struct ReplayBuffer {
  std::size_t capacity_per_class = 20;
  std::map<int, std::vector<LabeledExample>> exemplars;

  [[nodiscard]] std::size_t size() const;
  [[nodiscard]] std::vector<LabeledExample> all() const;
  /// Herds `capacity_per_class` exemplars for every class in `examples`
  /// using `encoder` as the snapshot; existing classes keep their lists.
  void add_classes(const std::vector<LabeledExample>& examples, const EncoderModel& encoder);

  friend bool operator==(const ReplayBuffer&, const ReplayBuffer&) = default;
};

struct EwcState {
  std::vector<double> anchor;  // flattened encoder parameters
  std::vector<double> fisher;  // diagonal, >= 0
  double lambda = 100.0;

  /// lambda/2 * sum F (theta - anchor)^2
  [[nodiscard]] double penalty(std::span<const double> params) const;

  friend bool operator==(const EwcState&, const EwcState&) = default;
};

/// Column layout of the logits used during training/evaluation.
struct LogitSpace {
  Tensor2D weights;
  std::vector<int> class_ids;
  std::map<int, int> column_of;  // class id -> column
};

/// Empirical diagonal Fisher of the encoder: `examples` are split into
/// consecutive batches of `batch_size`; the first `n_batches` (all when 0)
/// contribute their squared mean-loss gradient, and the result is the mean
/// over those batches.
std::vector<double> estimate_fisher(const EncoderModel& model, const LogitSpace& logits,
                                    const numcore::SimilarityConfig& sim,
                                    const std::vector<LabeledExample>& examples, std::size_t batch_size,
                                    std::size_t n_batches = 0);

struct DistillState {
  EncoderModel snapshot;
  double weight = 1.0;

  friend bool operator==(const DistillState&, const DistillState&) = default;
};

/// mean_n (1 - cos(current_n, snapshot_n)).
double feat_distill_penalty(const Tensor2D& current, const Tensor2D& snapshot);

struct DistillLossAndGrad {
  double loss = 0.0;
  Tensor2D grad_current;
};

/// Penalty and its gradient w.r.t. `current`; the mean runs over
/// `normalizer` rows (defaults to current.rows()).
DistillLossAndGrad feat_distill_loss_and_grad(const Tensor2D& current, const Tensor2D& snapshot,
                                              std::size_t normalizer = 0);

/// Single-constraint projection: g unchanged when <g, g_ref> >= 0 or g_ref = 0,
/// otherwise g - (<g,g_ref>/<g_ref,g_ref>) g_ref.
std::vector<double> project_gradient(std::span<const double> g, std::span<const double> g_ref);

struct TrainRunConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::vector<numcore::SgdState::Milestone> schedule{{15, 0.1}, {25, 0.1}};
  std::set<Method> methods{Method::finetune};
  supervision::Regime regime = supervision::Regime::random_trainable;
  numcore::SimilarityConfig similarity{};
  std::size_t memory_per_class = 20;
  double ewc_lambda = 100.0;
  std::size_t fisher_batch_size = 1;
  std::size_t fisher_max_batches = 256;
  double distill_weight = 1.0;
  bool distill_on_replay = true;
  std::size_t project_batch_size = 64;
  std::uint64_t seed = 0;

  [[nodiscard]] bool has(Method m) const { return methods.count(m) != 0; }
  void validate() const;
};

/// Everything one sequential run owns.
struct LearnerState {
  EncoderModel encoder;
  supervision::ClassifierHead head;
  ReplayBuffer buffer;
  std::optional<EwcState> ewc;
  std::optional<DistillState> distill;
  Rng rng{0};
  std::size_t tasks_seen = 0;

  friend bool operator==(const LearnerState& a, const LearnerState& b) {
    return a.encoder == b.encoder && a.head == b.head && a.buffer == b.buffer && a.ewc == b.ewc &&
           a.distill == b.distill && a.rng == b.rng && a.tasks_seen == b.tasks_seen;
  }
};

LearnerState init_learner(std::size_t input_dim, std::span<const std::size_t> hidden, std::size_t embed_dim,
                          supervision::Regime regime, const TrainRunConfig& config);

/// Logit columns for training task `task` (blocks 0..task for class-IL,
/// the task block alone for task-IL, the shared block for domain-IL).
LogitSpace training_logit_space(const supervision::ClassifierHead& head, taskstream::Protocol protocol,
                                std::size_t task);

struct TaskLog {
  std::vector<double> epoch_loss;  // mean batch loss per epoch
};

/// Trains on one task, then consolidates: herding exemplars, Fisher and
/// distillation snapshot are refreshed from the final encoder. The head must
/// already contain the block for `task`.
TaskLog train_task(LearnerState& state, const taskstream::TaskSpec& task, taskstream::Protocol protocol,
                   const TrainRunConfig& config);

/// Accuracy of the current model on `test` restricted to `label_space`.
double evaluate(const LearnerState& state, const std::vector<LabeledExample>& test,
                const std::vector<int>& label_space, const numcore::SimilarityConfig& sim);

/// Versioned binary checkpoint with every part of LearnerState.
void save_checkpoint(const std::filesystem::path& path, const LearnerState& state);
LearnerState load_checkpoint(const std::filesystem::path& path);

}  // namespace lingo::clmethods
