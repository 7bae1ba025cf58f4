#include <algorithm>
#include <cmath>

#include "lingo/clmethods.hpp"

namespace lingo::clmethods {

using numcore::ParamBuffers;
using supervision::ClassifierHead;
using taskstream::Protocol;

void TrainRunConfig::validate() const {
  if (!has(Method::finetune)) throw ConfigError("method set must include finetune");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(similarity.scale > 0.0)) throw ConfigError("similarity scale must be positive");
  if (ewc_lambda < 0.0 || distill_weight < 0.0) throw ConfigError("penalty weights must be non-negative");
  if (fisher_batch_size == 0 || project_batch_size == 0) throw ConfigError("batch sizes must be positive");
}

LearnerState init_learner(std::size_t input_dim, std::span<const std::size_t> hidden, std::size_t embed_dim,
                          supervision::Regime regime, const TrainRunConfig& config) {
  config.validate();
  LearnerState state;
  Rng init_rng(substream_seed(config.seed, "init"));
  state.encoder = EncoderModel::mlp(input_dim, hidden, embed_dim, init_rng);
  state.head = ClassifierHead(regime, embed_dim);
  state.buffer.capacity_per_class = config.memory_per_class;
  state.rng = Rng(substream_seed(config.seed, "train"));
  return state;
}

namespace {

bool finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

LogitSpace make_space(const ClassifierHead& head, std::size_t first, std::size_t last) {
  LogitSpace s;
  s.weights = head.stacked(first, last);
  s.class_ids = head.stacked_ids(first, last);
  for (std::size_t c = 0; c < s.class_ids.size(); ++c) s.column_of[s.class_ids[c]] = static_cast<int>(c);
  return s;
}

// Rows of the head for the requested classes, searched across blocks.
LogitSpace space_for_classes(const ClassifierHead& head, const std::vector<int>& classes) {
  std::map<int, std::pair<std::size_t, std::size_t>> where;
  for (std::size_t b = 0; b < head.num_blocks(); ++b) {
    const auto& ids = head.block(b).class_ids;
    for (std::size_t r = 0; r < ids.size(); ++r) where.emplace(ids[r], std::make_pair(b, r));
  }
  LogitSpace s;
  s.weights = Tensor2D(classes.size(), head.dim());
  s.class_ids = classes;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    auto it = where.find(classes[c]);
    if (it == where.end()) throw LookupError("head has no row for class " + std::to_string(classes[c]));
    auto src = head.block(it->second.first).weights.row(it->second.second);
    std::copy(src.begin(), src.end(), s.weights.row(c).begin());
    s.column_of[classes[c]] = static_cast<int>(c);
  }
  return s;
}

std::size_t trainable_block(Protocol protocol, std::size_t task) {
  return protocol == Protocol::domain_il ? 0 : task;
}

// A batch is split into groups that share one logit space; only task-IL
// produces more than one group (each example is scored by its own task head).
struct BatchGroup {
  const LogitSpace* space;
  std::vector<std::size_t> rows;
  std::vector<int> labels;
};

struct BatchGrads {
  double loss = 0.0;
  Tensor2D grad_features;
  Tensor2D grad_head;  // rows of the trainable block
};

class TaskTrainer {
 public:
  TaskTrainer(LearnerState& state, const taskstream::TaskSpec& task, Protocol protocol,
              const TrainRunConfig& config)
      : state_(state), task_(task), protocol_(protocol), config_(config) {
    const std::size_t needed = protocol == Protocol::domain_il ? 1 : task.index + 1;
    if (state.head.num_blocks() < needed) throw ProtocolError("head does not cover task " + std::to_string(task.index));
    block_ = trainable_block(protocol, task.index);
    head_trainable_ = !state.head.frozen();

    if (protocol == Protocol::task_il) {
      for (std::size_t b = 0; b <= task.index; ++b) {
        spaces_.push_back(make_space(state.head, b, b + 1));
        for (int c : state.head.block(b).class_ids) group_of_class_[c] = b;
      }
    } else {
      spaces_.push_back(training_logit_space(state.head, protocol, task.index));
    }
    refresh_spaces();
  }

  TaskLog run() {
    std::vector<LabeledExample> data = task_.train;
    if (data.empty()) throw ProtocolError("task " + std::to_string(task_.index) + " has no training data");
    const std::size_t current_count = data.size();
    if (config_.has(Method::rehearsal)) {
      auto replay = state_.buffer.all();
      data.insert(data.end(), replay.begin(), replay.end());
    }
    const Tensor2D x = taskstream::features_of(data);
    const std::vector<int> y = taskstream::class_ids_of(data);
    const std::vector<LabeledExample> memory = state_.buffer.all();
    const Tensor2D memory_x = taskstream::features_of(memory);
    const std::vector<int> memory_y = taskstream::class_ids_of(memory);

    numcore::SgdState sgd(config_.learning_rate, config_.momentum, config_.schedule);
    TaskLog log;
    const std::size_t n = x.rows();
    const std::size_t bs = config_.batch_size;
    for (std::size_t epoch = 0; epoch < config_.epochs; ++epoch) {
      const auto order = state_.rng.permutation(n);
      double loss_sum = 0.0;
      std::size_t batches = 0;
      for (std::size_t start = 0; start < n; start += bs) {
        const std::size_t stop = std::min(n, start + bs);
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(stop));
        std::vector<int> labels;
        std::vector<bool> is_current;
        for (auto i : idx) {
          labels.push_back(y[i]);
          is_current.push_back(i < current_count);
        }
        loss_sum += step(x.gather_rows(idx), labels, is_current, memory_x, memory_y, sgd, epoch);
        ++batches;
      }
      log.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
      if (!std::isfinite(log.epoch_loss.back()) || !finite(numcore::flatten_parameters(state_.encoder))) {
        throw Error("divergence", "training diverged in epoch " + std::to_string(epoch) +
                                      " (non-finite loss or parameters); lower the learning rate or scale");
      }
    }
    consolidate();
    return log;
  }

 private:
  // Re-reads head rows after the trainable block moved.
  void refresh_spaces() {
    if (!head_trainable_) return;
    if (protocol_ == Protocol::task_il) {
      spaces_[block_] = make_space(state_.head, block_, block_ + 1);
    } else {
      spaces_[0] = training_logit_space(state_.head, protocol_, task_.index);
    }
  }

  std::vector<BatchGroup> group(const std::vector<int>& labels) const {
    std::vector<BatchGroup> groups;
    std::map<std::size_t, std::size_t> slot;
    for (std::size_t r = 0; r < labels.size(); ++r) {
      std::size_t g = 0;
      if (protocol_ == Protocol::task_il) {
        auto it = group_of_class_.find(labels[r]);
        if (it == group_of_class_.end()) throw LabelError("class " + std::to_string(labels[r]) + " has no task head");
        g = it->second;
      }
      auto [it, inserted] = slot.emplace(g, groups.size());
      if (inserted) groups.push_back(BatchGroup{&spaces_[g], {}, {}});
      BatchGroup& bg = groups[it->second];
      auto col = bg.space->column_of.find(labels[r]);
      if (col == bg.space->column_of.end()) {
        throw LabelError("class " + std::to_string(labels[r]) + " outside the training label space");
      }
      bg.rows.push_back(r);
      bg.labels.push_back(col->second);
    }
    return groups;
  }

  // Cross-entropy over all groups (mean over the batch) and its gradients.
  BatchGrads classification(const Tensor2D& features, const std::vector<int>& labels) const {
    const std::size_t n = features.rows();
    const auto& trainable_ids = state_.head.block(block_).class_ids;
    BatchGrads out{0.0, Tensor2D(n, features.cols()), Tensor2D(trainable_ids.size(), features.cols())};
    for (const BatchGroup& g : group(labels)) {
      const Tensor2D f = features.gather_rows(g.rows);
      const Tensor2D logits =
          numcore::similarity_logits(g.space->weights, f, config_.similarity.mode, config_.similarity.scale);
      numcore::LossAndGrad lg = numcore::softmax_ce_loss_and_grad(logits, g.labels);
      const double w = static_cast<double>(g.rows.size()) / static_cast<double>(n);
      out.loss += w * lg.loss;
      for (double& v : lg.grad_logits.data()) v *= w;
      const numcore::SimilarityGrads sg = numcore::similarity_backward(
          g.space->weights, f, config_.similarity.mode, config_.similarity.scale, lg.grad_logits);
      for (std::size_t i = 0; i < g.rows.size(); ++i) {
        auto src = sg.features.row(i);
        auto dst = out.grad_features.row(g.rows[i]);
        for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
      }
      if (head_trainable_) {
        for (std::size_t r = 0; r < trainable_ids.size(); ++r) {
          auto col = g.space->column_of.find(trainable_ids[r]);
          if (col == g.space->column_of.end()) continue;
          auto src = sg.head.row(static_cast<std::size_t>(col->second));
          auto dst = out.grad_head.row(r);
          for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
        }
      }
    }
    return out;
  }

  ParamBuffers full_gradient(const numcore::ForwardCache& cache, const BatchGrads& bg) const {
    ParamBuffers grads = numcore::backward(state_.encoder, cache, bg.grad_features);
    if (head_trainable_) grads.push_back(bg.grad_head.data());
    return grads;
  }

  double step(const Tensor2D& xb, const std::vector<int>& labels, const std::vector<bool>& is_current,
              const Tensor2D& memory_x, const std::vector<int>& memory_y, numcore::SgdState& sgd,
              std::size_t epoch) {
    const numcore::ForwardCache cache = numcore::forward_cached(state_.encoder, xb);
    BatchGrads bg = classification(cache.features(), labels);
    double loss = bg.loss;

    if (config_.has(Method::feat_distill) && state_.distill) {
      std::vector<std::size_t> rows;
      for (std::size_t r = 0; r < is_current.size(); ++r) {
        if (config_.distill_on_replay || is_current[r]) rows.push_back(r);
      }
      if (!rows.empty()) {
        const Tensor2D cur = cache.features().gather_rows(rows);
        const Tensor2D old = numcore::forward(state_.distill->snapshot, xb.gather_rows(rows));
        const DistillLossAndGrad dl = feat_distill_loss_and_grad(cur, old);
        const double w = state_.distill->weight;
        loss += w * dl.loss;
        for (std::size_t i = 0; i < rows.size(); ++i) {
          auto src = dl.grad_current.row(i);
          auto dst = bg.grad_features.row(rows[i]);
          for (std::size_t k = 0; k < src.size(); ++k) dst[k] += w * src[k];
        }
      }
    }

    ParamBuffers grads = full_gradient(cache, bg);

    if (config_.has(Method::grad_project) && memory_x.rows() > 0) {
      const std::size_t m = std::min(config_.project_batch_size, memory_x.rows());
      auto perm = state_.rng.permutation(memory_x.rows());
      perm.resize(m);
      std::vector<int> ref_labels;
      for (auto i : perm) ref_labels.push_back(memory_y[i]);
      const numcore::ForwardCache ref_cache = numcore::forward_cached(state_.encoder, memory_x.gather_rows(perm));
      const BatchGrads ref = classification(ref_cache.features(), ref_labels);
      const auto g_ref = numcore::flatten(full_gradient(ref_cache, ref));
      const auto projected = project_gradient(numcore::flatten(grads), g_ref);
      numcore::unflatten_into(projected, grads);
    }

    std::vector<std::span<double>> params = numcore::parameter_blocks(state_.encoder);
    if (head_trainable_) params.emplace_back(state_.head.trainable_weights(block_).data());
    sgd.step(params, grads, epoch);

    if (config_.has(Method::ewc) && state_.ewc) {
      // Implicit (proximal) step on the quadratic penalty: stable for any lambda.
      const double lr = sgd.rate_at(epoch);
      const EwcState& ewc = *state_.ewc;
      std::size_t offset = 0;
      for (auto block : numcore::parameter_blocks(state_.encoder)) {
        for (std::size_t i = 0; i < block.size(); ++i, ++offset) {
          const double k = lr * ewc.lambda * ewc.fisher[offset];
          block[i] = (block[i] + k * ewc.anchor[offset]) / (1.0 + k);
        }
      }
      loss += ewc.penalty(numcore::flatten_parameters(state_.encoder));
    }

    refresh_spaces();
    return loss;
  }

  void consolidate() {
    if (config_.has(Method::rehearsal) || config_.has(Method::grad_project)) {
      state_.buffer.capacity_per_class = config_.memory_per_class;
      state_.buffer.add_classes(task_.train, state_.encoder);
    }
    if (config_.has(Method::ewc)) {
      std::vector<LabeledExample> sample = task_.train;
      state_.rng.shuffle(sample);
      const auto fisher = estimate_fisher(state_.encoder, spaces_.back(), config_.similarity, sample,
                                          config_.fisher_batch_size, config_.fisher_max_batches);
      EwcState next;
      next.lambda = config_.ewc_lambda;
      next.anchor = numcore::flatten_parameters(state_.encoder);
      next.fisher = fisher;
      if (state_.ewc) {
        for (std::size_t i = 0; i < fisher.size(); ++i) next.fisher[i] += state_.ewc->fisher[i];
      }
      state_.ewc = std::move(next);
    }
    if (config_.has(Method::feat_distill)) {
      state_.distill = DistillState{state_.encoder, config_.distill_weight};
    }
    ++state_.tasks_seen;
  }

  LearnerState& state_;
  const taskstream::TaskSpec& task_;
  Protocol protocol_;
  const TrainRunConfig& config_;
  std::size_t block_ = 0;
  bool head_trainable_ = false;
  std::vector<LogitSpace> spaces_;
  std::map<int, std::size_t> group_of_class_;
};

}  // namespace

LogitSpace training_logit_space(const ClassifierHead& head, Protocol protocol, std::size_t task) {
  switch (protocol) {
    case Protocol::task_il: return make_space(head, task, task + 1);
    case Protocol::domain_il: return make_space(head, 0, 1);
    default: return make_space(head, 0, task + 1);
  }
}

std::vector<double> estimate_fisher(const EncoderModel& model, const LogitSpace& logits,
                                    const numcore::SimilarityConfig& sim,
                                    const std::vector<LabeledExample>& examples, std::size_t batch_size,
                                    std::size_t n_batches) {
  if (batch_size == 0) throw ConfigError("fisher batch size must be positive");
  std::vector<double> fisher = numcore::flatten_parameters(model);
  std::fill(fisher.begin(), fisher.end(), 0.0);
  std::size_t used = 0;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    if (n_batches != 0 && used == n_batches) break;
    const std::size_t stop = std::min(examples.size(), start + batch_size);
    std::vector<LabeledExample> batch(examples.begin() + static_cast<std::ptrdiff_t>(start),
                                      examples.begin() + static_cast<std::ptrdiff_t>(stop));
    std::vector<int> labels;
    for (const auto& ex : batch) {
      auto col = logits.column_of.find(ex.class_id);
      if (col == logits.column_of.end()) throw LabelError("class outside Fisher label space");
      labels.push_back(col->second);
    }
    const auto cache = numcore::forward_cached(model, taskstream::features_of(batch));
    const auto f_logits = numcore::similarity_logits(logits.weights, cache.features(), sim.mode, sim.scale);
    const auto lg = numcore::softmax_ce_loss_and_grad(f_logits, labels);
    const auto sg = numcore::similarity_backward(logits.weights, cache.features(), sim.mode, sim.scale, lg.grad_logits);
    const auto g = numcore::flatten(numcore::backward(model, cache, sg.features));
    for (std::size_t i = 0; i < g.size(); ++i) fisher[i] += g[i] * g[i];
    ++used;
  }
  if (used > 0) {
    for (double& f : fisher) f /= static_cast<double>(used);
  }
  return fisher;
}

TaskLog train_task(LearnerState& state, const taskstream::TaskSpec& task, Protocol protocol,
                   const TrainRunConfig& config) {
  config.validate();
  TaskTrainer trainer(state, task, protocol, config);
  return trainer.run();
}

double evaluate(const LearnerState& state, const std::vector<LabeledExample>& test,
                const std::vector<int>& label_space, const numcore::SimilarityConfig& sim) {
  if (test.empty()) return 0.0;
  const LogitSpace space = space_for_classes(state.head, label_space);
  const Tensor2D f = numcore::forward(state.encoder, taskstream::features_of(test));
  const auto pred = numcore::argmax_rows(numcore::similarity_logits(space.weights, f, sim.mode, sim.scale));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) correct += space.class_ids[static_cast<std::size_t>(pred[i])] == test[i].class_id;
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace lingo::clmethods
