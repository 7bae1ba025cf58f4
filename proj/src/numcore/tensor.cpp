#include <cmath>
#include <cstring>

#include "lingo/numcore.hpp"

namespace lingo::numcore {

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " != " +
                     std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Tensor2D::Tensor2D(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Tensor2D Tensor2D::gather_rows(std::span<const std::size_t> indices) const {
  Tensor2D out(indices.size(), cols_);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows_) throw ShapeError("gather index out of range");
    std::memcpy(out.data_.data() + i * cols_, data_.data() + indices[i] * cols_,
                cols_ * sizeof(double));
  }
  return out;
}

Tensor2D Tensor2D::vstack(const Tensor2D& other) const {
  if (rows_ == 0) return other;
  if (other.rows_ == 0) return *this;
  if (other.cols_ != cols_) throw ShapeError("vstack column mismatch");
  Tensor2D out = *this;
  out.rows_ += other.rows_;
  out.data_.insert(out.data_.end(), other.data_.begin(), other.data_.end());
  return out;
}

bool Tensor2D::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

std::uint64_t byte_hash(std::span<const double> values) {
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(values.data()),
                                  values.size() * sizeof(double)));
}

Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul inner dimension mismatch");
  Tensor2D out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto o = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      auto br = b.row(k);
      for (std::size_t j = 0; j < o.size(); ++j) o[j] += aik * br[j];
    }
  }
  return out;
}

Tensor2D transpose(const Tensor2D& a) {
  Tensor2D out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  }
  return out;
}

Tensor2D random_orthogonal(std::size_t d, Rng& rng) {
  Tensor2D q(d, d);
  for (double& v : q.data()) v = rng.normal();
  // Modified Gram-Schmidt over rows.
  for (std::size_t i = 0; i < d; ++i) {
    auto ri = q.row(i);
    for (std::size_t j = 0; j < i; ++j) {
      auto rj = q.row(j);
      const double p = dot(ri, rj);
      for (std::size_t k = 0; k < d; ++k) ri[k] -= p * rj[k];
    }
    const double n = l2_norm(ri);
    if (n < 1e-12) throw DegenerateVectorError("random_orthogonal: rank deficient draw");
    for (double& v : ri) v /= n;
  }
  return q;
}

}  // namespace lingo::numcore
