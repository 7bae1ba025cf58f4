#include <algorithm>

#include "lingo/numcore.hpp"

namespace lingo::numcore {

SgdState::SgdState(double learning_rate, double momentum, std::vector<Milestone> schedule)
    : learning_rate_(learning_rate), momentum_(momentum), schedule_(std::move(schedule)) {
  if (learning_rate_ < 0.0) throw ConfigError("learning rate must be non-negative");
  if (momentum_ < 0.0 || momentum_ >= 1.0) throw ConfigError("momentum must be in [0,1)");
  std::sort(schedule_.begin(), schedule_.end(),
            [](const Milestone& a, const Milestone& b) { return a.epoch < b.epoch; });
}

double SgdState::rate_at(std::size_t epoch) const {
  double lr = learning_rate_;
  for (const Milestone& m : schedule_) {
    if (epoch >= m.epoch) lr *= m.multiplier;
  }
  return lr;
}

void SgdState::step(std::span<const std::span<double>> params, const ParamBuffers& grads,
                    std::size_t epoch) {
  if (params.size() != grads.size()) throw ShapeError("parameter/gradient block count mismatch");
  if (velocity_.empty()) {
    for (const auto& p : params) velocity_.emplace_back(p.size(), 0.0);
  }
  if (velocity_.size() != params.size()) throw ShapeError("velocity block count changed");
  const double lr = rate_at(epoch);
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto p = params[b];
    const auto& g = grads[b];
    auto& v = velocity_[b];
    if (p.size() != g.size() || p.size() != v.size()) throw ShapeError("velocity shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = momentum_ * v[i] + g[i];
      p[i] -= lr * v[i];
    }
  }
}

StepResult backward_and_step(EncoderModel& model, Tensor2D& head, const Tensor2D& batch,
                             std::span<const int> labels, SgdState& sgd, bool frozen_head,
                             const SimilarityConfig& sim, std::size_t epoch) {
  const ForwardCache cache = forward_cached(model, batch);
  const Tensor2D logits = similarity_logits(head, cache.features(), sim.mode, sim.scale);
  const LossAndGrad lg = softmax_ce_loss_and_grad(logits, labels);
  SimilarityGrads sg = similarity_backward(head, cache.features(), sim.mode, sim.scale, lg.grad_logits);
  ParamBuffers grads = backward(model, cache, sg.features);

  std::vector<std::span<double>> params = parameter_blocks(model);
  if (!frozen_head) {
    params.emplace_back(head.data());
    grads.push_back(std::move(sg.head.data()));
  }
  sgd.step(params, grads, epoch);
  return {lg.loss};
}

}  // namespace lingo::numcore
