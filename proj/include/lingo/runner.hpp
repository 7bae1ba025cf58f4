#pragma once

// Experiment orchestration: strict JSON configuration, seeded execution,
// persistence with crash-resume, comparison tables and sweeps.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lingo/clmethods.hpp"
#include "lingo/metrics.hpp"
#include "lingo/supervision.hpp"
#include "lingo/taskstream.hpp"

namespace lingo::runner {

using json = nlohmann::json;

inline constexpr const char* kFrameworkVersion = "0.3.0";

struct DataConfig {
  std::optional<taskstream::SyntheticHierarchySpec> synthetic;
  std::string train_path;
  std::string test_path;
  std::size_t domains = 4;       // domain-IL only
  double domain_shift = 1.0;     // domain-IL only
};

enum class EmbeddingSource { hierarchy, hash, file };

struct EmbeddingsConfig {
  EmbeddingSource source = EmbeddingSource::hierarchy;
  std::string path;
  double alpha = 0.5;
};

struct AnalysisConfig {
  bool drift = true;
  std::size_t drift_k = 10;
  bool centered = true;
  bool correlation = true;
  std::size_t correlation_classes = 0;  // first N class ids; 0 = all
};

struct ExperimentConfig {
  std::string name = "run";
  taskstream::ProtocolConfig protocol;
  DataConfig data;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t embed_dim = 32;
  supervision::Regime regime = supervision::Regime::random_trainable;
  EmbeddingsConfig embeddings;
  clmethods::TrainRunConfig train;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "runs";
  AnalysisConfig analysis;

  void validate() const;
};

/// Parses a config object; unknown keys at any level are ConfigErrors.
ExperimentConfig parse_config(const json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Normalized form with every default filled in.
json to_json(const ExperimentConfig& config);

/// Hash of the normalized config minus name, output_dir and seeds. Key order
/// in the source file does not matter.
std::string fingerprint(const ExperimentConfig& config);
/// Hash of the protocol and data sections only; records sharing it are comparable.
std::string protocol_fingerprint(const ExperimentConfig& config);

struct SeedResult {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  metrics::AccuracyMatrix accuracy;
  std::optional<double> last;
  std::optional<double> avg;
  std::optional<double> forget;
  std::vector<std::vector<double>> epoch_loss;  // per task
  std::optional<metrics::DriftReport> drift;
  std::optional<metrics::CorrelationReport> correlation;
  std::optional<metrics::CorrelationGap> correlation_gap;
  std::vector<std::uint64_t> block_hash_at_build;
  std::vector<std::uint64_t> block_hash_final;
  bool head_frozen = false;

  /// True when no frozen block changed between construction and run end.
  [[nodiscard]] bool freeze_contract_holds() const;
};

struct RunRecord {
  std::string name;
  std::string fingerprint;
  std::string protocol_fingerprint;
  json config;
  std::vector<SeedResult> seeds;
  std::vector<std::string> deviations;
  std::string framework_version = kFrameworkVersion;
  double wall_clock_seconds = 0.0;
};

/// Deterministic metric summary of one seed (no timing information).
json metrics_json(const SeedResult& r);
json to_json(const SeedResult& r);
SeedResult seed_result_from_json(const json& j);
json to_json(const RunRecord& r);
RunRecord record_from_json(const json& j);
RunRecord load_record(const std::filesystem::path& path);

struct RunOptions {
  bool persist = true;
  bool resume = true;
  std::size_t jobs = 1;
};

/// Runs one seed end to end. Module errors are caught and recorded.
SeedResult run_seed(const ExperimentConfig& config, std::uint64_t seed, const std::filesystem::path& seed_dir = {});

/// Every seed of the config; persisted under <output_dir>/<fingerprint>/<seed>/
/// with a manifest at <output_dir>/manifest.json. Completed seeds with a
/// matching fingerprint are reloaded instead of recomputed.
RunRecord run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

struct MetricStat {
  double mean = 0.0;
  double stddev = 0.0;  // population
  std::size_t n = 0;
};

/// Mean and population stddev; nullopt entries are skipped.
MetricStat summarize(const std::vector<std::optional<double>>& values);

struct ComparisonRow {
  std::string name;
  MetricStat last, avg, forget;
  double delta_last = 0.0, delta_avg = 0.0, delta_forget = 0.0;
};

struct Comparison {
  std::string baseline;
  std::vector<ComparisonRow> rows;
};

Comparison compare(const std::vector<RunRecord>& records, const std::string& baseline);
void write_comparison(const std::filesystem::path& csv_path, const std::filesystem::path& json_path,
                      const Comparison& comparison);
json to_json(const Comparison& c);

enum class SweepAxis { exemplars, shots, initial_classes };

SweepAxis sweep_axis_from_string(const std::string& s);
std::vector<std::size_t> default_axis_values(SweepAxis axis);

/// Configs for each axis value, validated before anything runs.
std::vector<ExperimentConfig> sweep_configs(const ExperimentConfig& base, SweepAxis axis,
                                            const std::vector<std::size_t>& values);
std::vector<RunRecord> sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<std::size_t>& values,
                             const RunOptions& options = {});

/// Recomputes drift for a persisted run at a new k from stored feature snapshots.
std::vector<metrics::DriftReport> analyze_drift(const std::filesystem::path& record_path, std::size_t k,
                                                bool centered);

/// Writes `contents` to a temp file next to `path` and renames it into place.
void write_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace lingo::runner
