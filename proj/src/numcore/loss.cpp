#include <algorithm>
#include <cmath>

#include "lingo/numcore.hpp"

namespace lingo::numcore {

namespace {

std::vector<double> row_norms(const Tensor2D& m, const char* what) {
  std::vector<double> norms(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    norms[r] = l2_norm(m.row(r));
    if (norms[r] == 0.0) {
      throw DegenerateVectorError(std::string("zero-norm ") + what + " row " + std::to_string(r));
    }
  }
  return norms;
}

void check_similarity_shapes(const Tensor2D& head, const Tensor2D& features, double scale) {
  if (head.cols() != features.cols()) {
    throw ShapeError("head width " + std::to_string(head.cols()) + " != feature width " +
                     std::to_string(features.cols()));
  }
  if (!(scale > 0.0)) throw ShapeError("similarity scale must be positive");
}

}  // namespace

Tensor2D similarity_logits(const Tensor2D& head_weights, const Tensor2D& features,
                           SimilarityMode mode, double scale) {
  check_similarity_shapes(head_weights, features, scale);
  const std::size_t n = features.rows();
  const std::size_t classes = head_weights.rows();
  Tensor2D logits(n, classes);
  std::vector<double> wn, fn;
  if (mode == SimilarityMode::cosine) {
    wn = row_norms(head_weights, "head");
    fn = row_norms(features, "feature");
  }
  for (std::size_t r = 0; r < n; ++r) {
    auto f = features.row(r);
    for (std::size_t c = 0; c < classes; ++c) {
      double s = dot(head_weights.row(c), f);
      if (mode == SimilarityMode::cosine) s /= wn[c] * fn[r];
      logits(r, c) = scale * s;
    }
  }
  return logits;
}

SimilarityGrads similarity_backward(const Tensor2D& head_weights, const Tensor2D& features,
                                    SimilarityMode mode, double scale,
                                    const Tensor2D& grad_logits) {
  check_similarity_shapes(head_weights, features, scale);
  const std::size_t n = features.rows();
  const std::size_t classes = head_weights.rows();
  const std::size_t d = features.cols();
  if (grad_logits.rows() != n || grad_logits.cols() != classes) {
    throw ShapeError("logit gradient shape mismatch");
  }
  SimilarityGrads out{Tensor2D(classes, d), Tensor2D(n, d)};

  if (mode == SimilarityMode::inner) {
    for (std::size_t r = 0; r < n; ++r) {
      auto f = features.row(r);
      auto gf = out.features.row(r);
      for (std::size_t c = 0; c < classes; ++c) {
        const double g = scale * grad_logits(r, c);
        if (g == 0.0) continue;
        auto w = head_weights.row(c);
        auto gw = out.head.row(c);
        for (std::size_t k = 0; k < d; ++k) {
          gf[k] += g * w[k];
          gw[k] += g * f[k];
        }
      }
    }
    return out;
  }

  // Cosine: with u = w/|w|, v = f/|f|, dcos/df = (u - cos v)/|f| and
  // dcos/dw = (v - cos u)/|w|.
  const std::vector<double> wn = row_norms(head_weights, "head");
  const std::vector<double> fn = row_norms(features, "feature");
  for (std::size_t r = 0; r < n; ++r) {
    auto f = features.row(r);
    auto gf = out.features.row(r);
    for (std::size_t c = 0; c < classes; ++c) {
      const double g = scale * grad_logits(r, c);
      if (g == 0.0) continue;
      auto w = head_weights.row(c);
      auto gw = out.head.row(c);
      const double cosv = dot(w, f) / (wn[c] * fn[r]);
      const double af = g / fn[r];
      const double aw = g / wn[c];
      for (std::size_t k = 0; k < d; ++k) {
        const double u = w[k] / wn[c];
        const double v = f[k] / fn[r];
        gf[k] += af * (u - cosv * v);
        gw[k] += aw * (v - cosv * u);
      }
    }
  }
  return out;
}

LossAndGrad softmax_ce_loss_and_grad(const Tensor2D& logits, std::span<const int> labels) {
  const std::size_t n = logits.rows();
  const std::size_t classes = logits.cols();
  if (labels.size() != n) throw ShapeError("label count != logit rows");
  if (n == 0) throw ShapeError("empty batch");
  LossAndGrad out{0.0, Tensor2D(n, classes)};
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw LabelError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
    auto z = logits.row(r);
    const double zmax = *std::max_element(z.begin(), z.end());
    double denom = 0.0;
    for (double v : z) denom += std::exp(v - zmax);
    const double log_denom = std::log(denom);
    out.loss += (log_denom - (z[y] - zmax)) * inv_n;
    auto g = out.grad_logits.row(r);
    for (std::size_t c = 0; c < classes; ++c) g[c] = std::exp(z[c] - zmax - log_denom) * inv_n;
    g[y] -= inv_n;
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor2D& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto z = logits.row(r);
    out[r] = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
  }
  return out;
}

}  // namespace lingo::numcore
