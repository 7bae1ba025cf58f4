#pragma once

// Dense numerics, the MLP encoder, similarity logits, softmax cross-entropy
// and momentum SGD. Everything is 64-bit and single-threaded so parameter
// trajectories are bit-reproducible for a fixed seed.

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "lingo/error.hpp"
#include "lingo/rng.hpp"

namespace lingo::numcore {

/// Row-major matrix of doubles.
class Tensor2D {
 public:
  Tensor2D() = default;
  Tensor2D(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> data);
  Tensor2D(std::initializer_list<std::initializer_list<double>> rows);

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  /// Copies the listed rows, in order.
  [[nodiscard]] Tensor2D gather_rows(std::span<const std::size_t> indices) const;
  /// Stacks `other` below this matrix.
  [[nodiscard]] Tensor2D vstack(const Tensor2D& other) const;
  [[nodiscard]] bool all_finite() const;

  friend bool operator==(const Tensor2D&, const Tensor2D&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);
/// Haar-distributed random orthogonal d x d matrix (Gram-Schmidt on a
/// Gaussian matrix).
Tensor2D random_orthogonal(std::size_t d, Rng& rng);
Tensor2D matmul(const Tensor2D& a, const Tensor2D& b);
Tensor2D transpose(const Tensor2D& a);

/// FNV-1a over the raw bytes of the values; equal hashes for bit-equal data.
std::uint64_t byte_hash(std::span<const double> values);

enum class Activation { relu, identity };

struct Layer {
  Tensor2D weight;            // out x in
  std::vector<double> bias;   // out
  Activation activation = Activation::relu;

  [[nodiscard]] std::size_t in_dim() const { return weight.cols(); }
  [[nodiscard]] std::size_t out_dim() const { return weight.rows(); }

  friend bool operator==(const Layer&, const Layer&) = default;
};

/// Feed-forward encoder g_V. Hidden layers use relu, the output layer is
/// linear unless constructed otherwise.
struct EncoderModel {
  std::vector<Layer> layers;

  [[nodiscard]] std::size_t input_dim() const;
  [[nodiscard]] std::size_t output_dim() const;
  /// Throws ShapeError unless layer dimensions chain and parameters are finite.
  void validate() const;

  /// Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases.
  static EncoderModel mlp(std::size_t input_dim, std::span<const std::size_t> hidden,
                          std::size_t output_dim, Rng& rng);
  /// Single linear layer with identity weights (square).
  static EncoderModel identity(std::size_t dim);

  friend bool operator==(const EncoderModel&, const EncoderModel&) = default;
};

/// One gradient (or velocity) buffer per parameter block, in the order
/// returned by `parameter_blocks`: layer0.weight, layer0.bias, layer1.weight, ...
using ParamBuffers = std::vector<std::vector<double>>;

std::vector<std::span<double>> parameter_blocks(EncoderModel& model);
std::vector<std::span<const double>> parameter_blocks(const EncoderModel& model);
ParamBuffers zeros_like(const EncoderModel& model);
std::vector<double> flatten(const ParamBuffers& buffers);
std::vector<double> flatten_parameters(const EncoderModel& model);
void unflatten_into(std::span<const double> flat, ParamBuffers& buffers);

Tensor2D forward(const EncoderModel& model, const Tensor2D& batch);

/// Activations retained for backpropagation. `outputs[l]` is the post-
/// activation output of layer l; `inputs` is the batch.
struct ForwardCache {
  Tensor2D inputs;
  std::vector<Tensor2D> outputs;

  [[nodiscard]] const Tensor2D& features() const { return outputs.back(); }
};

ForwardCache forward_cached(const EncoderModel& model, const Tensor2D& batch);

/// Backpropagates dLoss/dFeatures through the encoder.
ParamBuffers backward(const EncoderModel& model, const ForwardCache& cache,
                      const Tensor2D& grad_features);

enum class SimilarityMode { inner, cosine };

struct SimilarityConfig {
  SimilarityMode mode = SimilarityMode::cosine;
  double scale = 16.0;
};

/// logits[n][c] = scale * sim(W_c, f_n).
Tensor2D similarity_logits(const Tensor2D& head_weights, const Tensor2D& features,
                           SimilarityMode mode, double scale);

struct SimilarityGrads {
  Tensor2D head;      // dL/dW
  Tensor2D features;  // dL/dF
};

SimilarityGrads similarity_backward(const Tensor2D& head_weights, const Tensor2D& features,
                                    SimilarityMode mode, double scale,
                                    const Tensor2D& grad_logits);

struct LossAndGrad {
  double loss = 0.0;     // mean over rows
  Tensor2D grad_logits;  // d(mean loss)/d(logits)
};

LossAndGrad softmax_ce_loss_and_grad(const Tensor2D& logits, std::span<const int> labels);

std::vector<int> argmax_rows(const Tensor2D& logits);

/// Momentum SGD with a piecewise-constant multiplier schedule keyed by epoch.
/// Velocity buffers are created on the first step and must keep the same
/// shapes afterwards.
class SgdState {
 public:
  struct Milestone {
    std::size_t epoch;
    double multiplier;
  };

  SgdState(double learning_rate, double momentum, std::vector<Milestone> schedule = {});

  [[nodiscard]] double learning_rate() const noexcept { return learning_rate_; }
  [[nodiscard]] double momentum() const noexcept { return momentum_; }
  [[nodiscard]] const std::vector<Milestone>& schedule() const noexcept { return schedule_; }
  [[nodiscard]] double rate_at(std::size_t epoch) const;

  /// v = momentum * v + g;  p -= lr(epoch) * v.
  void step(std::span<const std::span<double>> params, const ParamBuffers& grads,
            std::size_t epoch);

  [[nodiscard]] const ParamBuffers& velocity() const noexcept { return velocity_; }

 private:
  double learning_rate_;
  double momentum_;
  std::vector<Milestone> schedule_;
  ParamBuffers velocity_;
};

struct StepResult {
  double loss = 0.0;
};

/// One full gradient step of the joint objective: encoder forward, similarity
/// logits against `head`, softmax cross-entropy, backward, SGD. When
/// `frozen_head` is set the head is read-only and only the encoder moves.
StepResult backward_and_step(EncoderModel& model, Tensor2D& head, const Tensor2D& batch,
                             std::span<const int> labels, SgdState& sgd, bool frozen_head,
                             const SimilarityConfig& sim = {}, std::size_t epoch = 0);

}  // namespace lingo::numcore
