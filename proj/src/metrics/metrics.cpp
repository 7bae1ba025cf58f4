#include "lingo/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace lingo::metrics {

AccuracyMatrix::AccuracyMatrix(std::size_t num_tasks) : n_(num_tasks), cells_(num_tasks * num_tasks) {}

void AccuracyMatrix::set(std::size_t i, std::size_t j, double value) {
  if (i > j || j >= n_) throw MetricError("accuracy index (" + std::to_string(i) + "," + std::to_string(j) + ") outside i <= j < N");
  if (!(value >= 0.0 && value <= 1.0)) throw MetricError("accuracy outside [0,1]");
  cells_[i * n_ + j] = value;
}

std::optional<double> AccuracyMatrix::get(std::size_t i, std::size_t j) const {
  if (i > j || j >= n_) return std::nullopt;
  return cells_[i * n_ + j];
}

double AccuracyMatrix::at(std::size_t i, std::size_t j) const {
  auto v = get(i, j);
  if (!v) throw MetricError("accuracy (" + std::to_string(i) + "," + std::to_string(j) + ") missing");
  return *v;
}

bool AccuracyMatrix::column_complete(std::size_t j) const {
  if (j >= n_) return false;
  for (std::size_t i = 0; i <= j; ++i) {
    if (!cells_[i * n_ + j]) return false;
  }
  return true;
}

bool AccuracyMatrix::complete() const {
  for (std::size_t j = 0; j < n_; ++j) {
    if (!column_complete(j)) return false;
  }
  return true;
}

double last_accuracy(const AccuracyMatrix& a) {
  const std::size_t n = a.num_tasks();
  if (n == 0 || !a.column_complete(n - 1)) throw MetricError("last accuracy needs the final column");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a.at(i, n - 1);
  return s / static_cast<double>(n);
}

double avg_incremental_accuracy(const AccuracyMatrix& a) {
  const std::size_t n = a.num_tasks();
  if (n == 0 || !a.complete()) throw MetricError("average incremental accuracy needs the full triangle");
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i <= j; ++i) col += a.at(i, j);
    total += col / static_cast<double>(j + 1);
  }
  return total / static_cast<double>(n);
}

double forgetting_rate(const AccuracyMatrix& a) {
  const std::size_t n = a.num_tasks();
  if (n < 2) throw MetricError("forgetting rate is undefined for fewer than two tasks");
  if (!a.complete()) throw MetricError("forgetting rate needs the full triangle");
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    double best = a.at(i, i);
    for (std::size_t j = i + 1; j + 1 < n; ++j) best = std::max(best, a.at(i, j));
    total += best - a.at(i, n - 1);
  }
  return total / static_cast<double>(n - 1);
}

Tensor2D principal_directions(const Tensor2D& features, std::size_t k, bool centered) {
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  if (k == 0) throw RankError("subspace rank k must be positive");
  if (k > d) throw RankError("k = " + std::to_string(k) + " exceeds feature dim " + std::to_string(d));
  Eigen::MatrixXd f(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) f(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = features(r, c);
  }
  if (centered && n > 0) f.rowwise() -= f.colwise().mean();
  const Eigen::MatrixXd gram = f.transpose() * f;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
  if (solver.info() != Eigen::Success) throw RankError("eigen-decomposition failed");
  const Eigen::VectorXd& values = solver.eigenvalues();  // ascending
  const double top = values(values.size() - 1);
  const double tol = std::max(top, 0.0) * 1e-10;
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < values.size(); ++i) rank += values(i) > tol && top > 0.0;
  if (k > rank) {
    throw RankError("k = " + std::to_string(k) + " exceeds numerical rank " + std::to_string(rank));
  }
  Tensor2D v(d, k);
  for (std::size_t j = 0; j < k; ++j) {
    const auto col = static_cast<Eigen::Index>(d - 1 - j);
    for (std::size_t r = 0; r < d; ++r) v(r, j) = solver.eigenvectors()(static_cast<Eigen::Index>(r), col);
  }
  return v;
}

double repre_drift(const Tensor2D& reference, const Tensor2D& later, const DriftOptions& options) {
  if (reference.cols() != later.cols()) throw ShapeError("drift inputs differ in feature dim");
  const Tensor2D v = principal_directions(reference, options.k, options.centered);
  const Tensor2D w = principal_directions(later, options.k, options.centered);
  if (v == w) return 0.0;
  const Tensor2D overlap = numcore::matmul(numcore::transpose(v), w);
  double fro = 0.0;
  for (double x : overlap.data()) fro += x * x;
  const double drift = 1.0 - fro / static_cast<double>(options.k);
  return std::clamp(drift, 0.0, 1.0);
}

CorrelationReport interclass_correlation(const numcore::EncoderModel& encoder,
                                         const std::vector<taskstream::LabeledExample>& sample,
                                         const std::vector<int>& classes) {
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < sample.size(); ++i) members[sample[i].class_id].push_back(i);

  CorrelationReport report;
  report.class_ids = classes;
  const Tensor2D emb = numcore::forward(encoder, taskstream::features_of(sample));
  Tensor2D means(classes.size(), emb.cols());
  for (std::size_t c = 0; c < classes.size(); ++c) {
    auto it = members.find(classes[c]);
    if (it == members.end()) throw LookupError("class " + std::to_string(classes[c]) + " absent from sample");
    if (it->second.size() < 2) throw LookupError("class " + std::to_string(classes[c]) + " needs at least 2 examples");
    report.class_names.push_back(sample[it->second.front()].class_name);
    auto m = means.row(c);
    for (std::size_t i : it->second) {
      auto e = emb.row(i);
      for (std::size_t k = 0; k < m.size(); ++k) m[k] += e[k];
    }
    for (double& x : m) x /= static_cast<double>(it->second.size());
  }

  report.matrix = Tensor2D(classes.size(), classes.size());
  for (std::size_t a = 0; a < classes.size(); ++a) {
    report.matrix(a, a) = 1.0;
    for (std::size_t b = a + 1; b < classes.size(); ++b) {
      const double na = numcore::l2_norm(means.row(a));
      const double nb = numcore::l2_norm(means.row(b));
      if (na == 0.0 || nb == 0.0) throw DegenerateVectorError("zero class-mean embedding");
      const double c = std::clamp(numcore::dot(means.row(a), means.row(b)) / (na * nb), -1.0, 1.0);
      report.matrix(a, b) = c;
      report.matrix(b, a) = c;
    }
  }
  return report;
}

std::optional<CorrelationGap> superclass_gap(const CorrelationReport& report) {
  std::vector<int> super;
  for (const auto& name : report.class_names) {
    auto s = taskstream::superclass_from_name(name);
    if (!s) return std::nullopt;
    super.push_back(*s);
  }
  double within = 0.0, cross = 0.0;
  std::size_t nw = 0, nc = 0;
  for (std::size_t a = 0; a < super.size(); ++a) {
    for (std::size_t b = a + 1; b < super.size(); ++b) {
      if (super[a] == super[b]) {
        within += report.matrix(a, b);
        ++nw;
      } else {
        cross += report.matrix(a, b);
        ++nc;
      }
    }
  }
  if (nw == 0 || nc == 0) return std::nullopt;
  return CorrelationGap{within / static_cast<double>(nw), cross / static_cast<double>(nc)};
}

std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_real(const std::string& s, std::size_t lineno) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ParseError(lineno, "bad number '" + s + "'");
  return v;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

}  // namespace

void write_accuracy_csv(const std::filesystem::path& path, const AccuracyMatrix& a) {
  auto out = open_out(path);
  out << "task";
  for (std::size_t j = 0; j < a.num_tasks(); ++j) out << ",after_" << j;
  out << '\n';
  for (std::size_t i = 0; i < a.num_tasks(); ++i) {
    out << i;
    for (std::size_t j = 0; j < a.num_tasks(); ++j) {
      out << ',';
      if (auto v = a.get(i, j)) out << format_real(*v);
    }
    out << '\n';
  }
}

AccuracyMatrix read_accuracy_csv(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "empty accuracy file");
  const std::size_t n = split_csv(line).size() - 1;
  AccuracyMatrix a(n);
  std::size_t lineno = 1;
  for (std::size_t i = 0; i < n; ++i) {
    ++lineno;
    if (!std::getline(in, line)) throw ParseError(lineno, "missing row");
    const auto cells = split_csv(line);
    if (cells.size() != n + 1) throw ParseError(lineno, "wrong cell count");
    for (std::size_t j = 0; j < n; ++j) {
      if (cells[j + 1].empty()) continue;
      a.set(i, j, parse_real(cells[j + 1], lineno));
    }
  }
  return a;
}

void write_drift_csv(const std::filesystem::path& path, const DriftReport& report) {
  auto out = open_out(path);
  out << "reference_task,after_task,k,centered,drift\n";
  for (const auto& p : report.points) {
    out << p.reference_task << ',' << p.after_task << ',' << report.options.k << ','
        << (report.options.centered ? 1 : 0) << ',' << format_real(p.value) << '\n';
  }
}

DriftReport read_drift_csv(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::string line;
  std::getline(in, line);
  DriftReport report;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != 5) throw ParseError(lineno, "expected 5 columns");
    DriftPoint p;
    p.reference_task = std::stoul(cells[0]);
    p.after_task = std::stoul(cells[1]);
    report.options.k = std::stoul(cells[2]);
    report.options.centered = cells[3] == "1";
    p.value = parse_real(cells[4], lineno);
    report.points.push_back(p);
  }
  return report;
}

void write_correlation_csv(const std::filesystem::path& path, const CorrelationReport& report) {
  auto out = open_out(path);
  out << "class_id,class_name";
  for (int id : report.class_ids) out << ',' << id;
  out << '\n';
  for (std::size_t a = 0; a < report.class_ids.size(); ++a) {
    out << report.class_ids[a] << ',' << report.class_names[a];
    for (std::size_t b = 0; b < report.class_ids.size(); ++b) out << ',' << format_real(report.matrix(a, b));
    out << '\n';
  }
}

CorrelationReport read_correlation_csv(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "empty correlation file");
  const std::size_t n = split_csv(line).size() - 2;
  CorrelationReport report;
  report.matrix = Tensor2D(n, n);
  std::size_t lineno = 1;
  for (std::size_t a = 0; a < n; ++a) {
    ++lineno;
    if (!std::getline(in, line)) throw ParseError(lineno, "missing row");
    const auto cells = split_csv(line);
    if (cells.size() != n + 2) throw ParseError(lineno, "wrong cell count");
    report.class_ids.push_back(std::stoi(cells[0]));
    report.class_names.push_back(cells[1]);
    for (std::size_t b = 0; b < n; ++b) report.matrix(a, b) = parse_real(cells[b + 2], lineno);
  }
  return report;
}

}  // namespace lingo::metrics
