#include <cmath>

#include "lingo/numcore.hpp"

namespace lingo::numcore {

std::size_t EncoderModel::input_dim() const {
  if (layers.empty()) throw ShapeError("encoder has no layers");
  return layers.front().in_dim();
}

std::size_t EncoderModel::output_dim() const {
  if (layers.empty()) throw ShapeError("encoder has no layers");
  return layers.back().out_dim();
}

void EncoderModel::validate() const {
  if (layers.empty()) throw ShapeError("encoder has no layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Layer& layer = layers[l];
    if (layer.bias.size() != layer.out_dim()) {
      throw ShapeError("layer " + std::to_string(l) + " bias length mismatch");
    }
    if (l > 0 && layers[l - 1].out_dim() != layer.in_dim()) {
      throw ShapeError("layer " + std::to_string(l) + " input width does not chain");
    }
    if (!layer.weight.all_finite()) throw ShapeError("non-finite weight in layer " + std::to_string(l));
    for (double b : layer.bias) {
      if (!std::isfinite(b)) throw ShapeError("non-finite bias in layer " + std::to_string(l));
    }
  }
}

EncoderModel EncoderModel::mlp(std::size_t input_dim, std::span<const std::size_t> hidden,
                               std::size_t output_dim, Rng& rng) {
  if (input_dim == 0 || output_dim == 0) throw ShapeError("encoder dimensions must be positive");
  EncoderModel model;
  std::size_t fan_in = input_dim;
  auto add = [&](std::size_t fan_out, Activation act) {
    Layer layer{Tensor2D(fan_out, fan_in), std::vector<double>(fan_out, 0.0), act};
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (double& w : layer.weight.data()) w = rng.uniform(-bound, bound);
    model.layers.push_back(std::move(layer));
    fan_in = fan_out;
  };
  for (std::size_t h : hidden) {
    if (h == 0) throw ShapeError("hidden width must be positive");
    add(h, Activation::relu);
  }
  add(output_dim, Activation::identity);
  return model;
}

EncoderModel EncoderModel::identity(std::size_t dim) {
  EncoderModel model;
  Layer layer{Tensor2D(dim, dim), std::vector<double>(dim, 0.0), Activation::identity};
  for (std::size_t i = 0; i < dim; ++i) layer.weight(i, i) = 1.0;
  model.layers.push_back(std::move(layer));
  return model;
}

std::vector<std::span<double>> parameter_blocks(EncoderModel& model) {
  std::vector<std::span<double>> blocks;
  for (Layer& layer : model.layers) {
    blocks.emplace_back(layer.weight.data());
    blocks.emplace_back(layer.bias);
  }
  return blocks;
}

std::vector<std::span<const double>> parameter_blocks(const EncoderModel& model) {
  std::vector<std::span<const double>> blocks;
  for (const Layer& layer : model.layers) {
    blocks.emplace_back(layer.weight.data());
    blocks.emplace_back(layer.bias);
  }
  return blocks;
}

ParamBuffers zeros_like(const EncoderModel& model) {
  ParamBuffers out;
  for (auto block : parameter_blocks(model)) out.emplace_back(block.size(), 0.0);
  return out;
}

std::vector<double> flatten(const ParamBuffers& buffers) {
  std::vector<double> flat;
  for (const auto& b : buffers) flat.insert(flat.end(), b.begin(), b.end());
  return flat;
}

std::vector<double> flatten_parameters(const EncoderModel& model) {
  std::vector<double> flat;
  for (auto block : parameter_blocks(model)) flat.insert(flat.end(), block.begin(), block.end());
  return flat;
}

void unflatten_into(std::span<const double> flat, ParamBuffers& buffers) {
  std::size_t offset = 0;
  for (auto& b : buffers) {
    if (offset + b.size() > flat.size()) throw ShapeError("flat buffer too short");
    std::copy(flat.begin() + offset, flat.begin() + offset + b.size(), b.begin());
    offset += b.size();
  }
  if (offset != flat.size()) throw ShapeError("flat buffer too long");
}

namespace {

Tensor2D apply_layer(const Layer& layer, const Tensor2D& in) {
  if (in.cols() != layer.in_dim()) {
    throw ShapeError("batch has " + std::to_string(in.cols()) + " columns, layer expects " +
                     std::to_string(layer.in_dim()));
  }
  const std::size_t n = in.rows();
  const std::size_t out_dim = layer.out_dim();
  Tensor2D out(n, out_dim);
  for (std::size_t r = 0; r < n; ++r) {
    auto x = in.row(r);
    auto y = out.row(r);
    for (std::size_t o = 0; o < out_dim; ++o) {
      double s = layer.bias[o];
      auto w = layer.weight.row(o);
      for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x[i];
      if (layer.activation == Activation::relu && s < 0.0) s = 0.0;
      y[o] = s;
    }
  }
  return out;
}

}  // namespace

Tensor2D forward(const EncoderModel& model, const Tensor2D& batch) {
  if (model.layers.empty()) throw ShapeError("encoder has no layers");
  Tensor2D h = apply_layer(model.layers.front(), batch);
  for (std::size_t l = 1; l < model.layers.size(); ++l) h = apply_layer(model.layers[l], h);
  return h;
}

ForwardCache forward_cached(const EncoderModel& model, const Tensor2D& batch) {
  if (model.layers.empty()) throw ShapeError("encoder has no layers");
  ForwardCache cache;
  cache.inputs = batch;
  const Tensor2D* in = &cache.inputs;
  cache.outputs.reserve(model.layers.size());
  for (const Layer& layer : model.layers) {
    cache.outputs.push_back(apply_layer(layer, *in));
    in = &cache.outputs.back();
  }
  return cache;
}

ParamBuffers backward(const EncoderModel& model, const ForwardCache& cache,
                      const Tensor2D& grad_features) {
  const std::size_t depth = model.layers.size();
  if (cache.outputs.size() != depth) throw ShapeError("forward cache does not match model");
  const Tensor2D& feats = cache.features();
  if (grad_features.rows() != feats.rows() || grad_features.cols() != feats.cols()) {
    throw ShapeError("feature gradient shape mismatch");
  }
  ParamBuffers grads = zeros_like(model);
  Tensor2D upstream = grad_features;
  for (std::size_t l = depth; l-- > 0;) {
    const Layer& layer = model.layers[l];
    const Tensor2D& out = cache.outputs[l];
    const Tensor2D& in = l == 0 ? cache.inputs : cache.outputs[l - 1];
    const std::size_t n = in.rows();
    const std::size_t out_dim = layer.out_dim();
    const std::size_t in_dim = layer.in_dim();

    if (layer.activation == Activation::relu) {
      for (std::size_t k = 0; k < upstream.size(); ++k) {
        if (out.data()[k] <= 0.0) upstream.data()[k] = 0.0;
      }
    }

    auto& gw = grads[2 * l];
    auto& gb = grads[2 * l + 1];
    for (std::size_t r = 0; r < n; ++r) {
      auto g = upstream.row(r);
      auto x = in.row(r);
      for (std::size_t o = 0; o < out_dim; ++o) {
        const double go = g[o];
        if (go == 0.0) continue;
        gb[o] += go;
        double* gw_row = gw.data() + o * in_dim;
        for (std::size_t i = 0; i < in_dim; ++i) gw_row[i] += go * x[i];
      }
    }

    if (l == 0) break;
    Tensor2D next(n, in_dim);
    for (std::size_t r = 0; r < n; ++r) {
      auto g = upstream.row(r);
      auto dx = next.row(r);
      for (std::size_t o = 0; o < out_dim; ++o) {
        const double go = g[o];
        if (go == 0.0) continue;
        auto w = layer.weight.row(o);
        for (std::size_t i = 0; i < in_dim; ++i) dx[i] += go * w[i];
      }
    }
    upstream = std::move(next);
  }
  return grads;
}

}  // namespace lingo::numcore
