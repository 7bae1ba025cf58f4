#include <algorithm>
#include <cmath>
#include <limits>

#include "lingo/clmethods.hpp"

namespace lingo::clmethods {

std::string to_string(Method m) {
  switch (m) {
    case Method::finetune: return "finetune";
    case Method::rehearsal: return "rehearsal";
    case Method::ewc: return "ewc";
    case Method::feat_distill: return "feat_distill";
    case Method::grad_project: return "grad_project";
  }
  return "unknown";
}

Method method_from_string(const std::string& s) {
  for (Method m : {Method::finetune, Method::rehearsal, Method::ewc, Method::feat_distill, Method::grad_project}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown method '" + s + "'");
}

std::vector<std::size_t> herding_select(const Tensor2D& features, std::size_t m) {
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  if (n == 0) throw Error("empty_class", "herding on an empty class");
  if (m > n) throw Error("herding_error", "cannot select " + std::to_string(m) + " of " + std::to_string(n));
  if (!features.all_finite()) throw Error("herding_error", "non-finite features");

  std::vector<double> mu(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto f = features.row(i);
    for (std::size_t k = 0; k < d; ++k) mu[k] += f[k];
  }
  for (double& v : mu) v /= static_cast<double>(n);

  std::vector<std::size_t> picked;
  std::vector<bool> taken(n, false);
  std::vector<double> running(d, 0.0);
  for (std::size_t step = 1; step <= m; ++step) {
    const double inv = 1.0 / static_cast<double>(step);
    std::size_t best = n;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      auto f = features.row(i);
      double dist = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = mu[k] - (running[k] + f[k]) * inv;
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = i;
      }
    }
    taken[best] = true;
    picked.push_back(best);
    auto f = features.row(best);
    for (std::size_t k = 0; k < d; ++k) running[k] += f[k];
  }
  return picked;
}

std::vector<std::size_t> herding_select(const Tensor2D& examples, const EncoderModel& encoder, std::size_t m) {
  return herding_select(numcore::forward(encoder, examples), m);
}

std::size_t ReplayBuffer::size() const {
  std::size_t n = 0;
  for (const auto& [key, list] : exemplars) n += list.size();
  return n;
}

std::vector<LabeledExample> ReplayBuffer::all() const {
  std::vector<LabeledExample> out;
  for (const auto& [key, list] : exemplars) out.insert(out.end(), list.begin(), list.end());
  return out;
}

void ReplayBuffer::add_classes(const std::vector<LabeledExample>& examples, const EncoderModel& encoder) {
  if (capacity_per_class == 0) return;
  // Keyed by (domain, class) so domain-incremental streams keep one list per
  // class per domain.
  std::map<int, std::vector<const LabeledExample*>> groups;
  for (const auto& ex : examples) groups[ex.domain_id * 1'000'003 + ex.class_id].push_back(&ex);
  for (const auto& [key, members] : groups) {
    if (exemplars.count(key)) continue;
    Tensor2D x(members.size(), members.front()->features.size());
    for (std::size_t i = 0; i < members.size(); ++i) {
      std::copy(members[i]->features.begin(), members[i]->features.end(), x.row(i).begin());
    }
    const std::size_t m = std::min(capacity_per_class, members.size());
    auto& list = exemplars[key];
    for (std::size_t i : herding_select(x, encoder, m)) list.push_back(*members[i]);
  }
}

double EwcState::penalty(std::span<const double> params) const {
  if (params.size() != anchor.size() || fisher.size() != anchor.size()) throw ShapeError("EWC shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double d = params[i] - anchor[i];
    s += fisher[i] * d * d;
  }
  return 0.5 * lambda * s;
}

double feat_distill_penalty(const Tensor2D& current, const Tensor2D& snapshot) {
  return feat_distill_loss_and_grad(current, snapshot).loss;
}

DistillLossAndGrad feat_distill_loss_and_grad(const Tensor2D& current, const Tensor2D& snapshot,
                                              std::size_t normalizer) {
  if (current.rows() != snapshot.rows() || current.cols() != snapshot.cols()) {
    throw ShapeError("distillation feature shapes differ");
  }
  const std::size_t n = current.rows();
  const std::size_t d = current.cols();
  DistillLossAndGrad out{0.0, Tensor2D(n, d)};
  if (n == 0) return out;
  const double inv = 1.0 / static_cast<double>(normalizer == 0 ? n : normalizer);
  for (std::size_t r = 0; r < n; ++r) {
    auto a = current.row(r);
    auto b = snapshot.row(r);
    const double na = numcore::l2_norm(a);
    const double nb = numcore::l2_norm(b);
    if (na == 0.0 || nb == 0.0) throw DegenerateVectorError("zero-norm feature row " + std::to_string(r));
    const double c = numcore::dot(a, b) / (na * nb);
    out.loss += (1.0 - c) * inv;
    auto g = out.grad_current.row(r);
    for (std::size_t k = 0; k < d; ++k) g[k] = -inv * (b[k] / nb - c * a[k] / na) / na;
  }
  return out;
}

std::vector<double> project_gradient(std::span<const double> g, std::span<const double> g_ref) {
  if (g.size() != g_ref.size()) throw ShapeError("gradient shapes differ");
  std::vector<double> out(g.begin(), g.end());
  const double ref_sq = numcore::dot(g_ref, g_ref);
  if (ref_sq == 0.0) return out;
  const double inner = numcore::dot(g, g_ref);
  if (inner >= 0.0) return out;
  const double coef = inner / ref_sq;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= coef * g_ref[i];
  return out;
}

}  // namespace lingo::clmethods
