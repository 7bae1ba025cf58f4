// Command-line front end: run, compare, sweep, gen-embeddings-fallback,
// gen-synthetic, analyze-drift.

#include <algorithm>
#include <iostream>

#include <CLI11.hpp>

#include "lingo/error.hpp"
#include "lingo/runner.hpp"

namespace {

using namespace lingo;
using runner::json;

void print_error(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

void print_summary(const runner::RunRecord& record) {
  json seeds = json::array();
  for (const auto& s : record.seeds) seeds.push_back(runner::metrics_json(s));
  std::cout << json{{"name", record.name},
                    {"fingerprint", record.fingerprint},
                    {"seeds", seeds},
                    {"wall_clock_seconds", record.wall_clock_seconds}}
                   .dump(2)
            << std::endl;
}

bool all_ok(const std::vector<runner::RunRecord>& records) {
  for (const auto& r : records) {
    for (const auto& s : r.seeds) {
      if (!s.ok) return false;
    }
  }
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual learning with language-guided classifier heads"};
  app.require_subcommand(1);

  std::string config_path;
  std::size_t jobs = 1;
  bool no_resume = false;
  std::string output_dir;

  auto* run = app.add_subcommand("run", "Run every seed of an experiment config");
  run->add_option("config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--jobs,-j", jobs, "Concurrent seeds");
  run->add_flag("--no-resume", no_resume, "Recompute seeds that already finished");
  run->add_option("--output-dir", output_dir, "Override the config's output directory");

  std::vector<std::string> record_paths;
  std::string baseline;
  std::string out_prefix = "comparison";
  auto* cmp = app.add_subcommand("compare", "Tabulate records that share a protocol");
  cmp->add_option("records", record_paths, "record.json files")->required()->check(CLI::ExistingFile);
  cmp->add_option("--baseline", baseline, "Name of the baseline record")->required();
  cmp->add_option("-o,--output", out_prefix, "Output prefix for .csv and .json");

  std::string axis_name;
  std::vector<std::size_t> axis_values;
  auto* sw = app.add_subcommand("sweep", "Run one record per axis value");
  sw->add_option("config", config_path, "Base experiment config")->required()->check(CLI::ExistingFile);
  sw->add_option("--axis", axis_name, "exemplars | shots | initial_classes")->required();
  sw->add_option("--values", axis_values, "Axis values (defaults depend on the axis)");
  sw->add_option("--jobs,-j", jobs, "Concurrent seeds");
  sw->add_option("--output-dir", output_dir, "Override the config's output directory");

  std::string dataset_path;
  std::string mode = "hierarchy";
  std::string out_path;
  std::size_t dim = 32;
  double alpha = 0.5;
  std::uint64_t seed = 0;
  bool allow_duplicates = false;
  auto* gen = app.add_subcommand("gen-embeddings-fallback", "Write class targets without a language model");
  gen->add_option("dataset", dataset_path, "Dataset file whose class names are used")->required()->check(CLI::ExistingFile);
  gen->add_option("--mode", mode, "hierarchy | hash")->check(CLI::IsMember({"hierarchy", "hash"}));
  gen->add_option("-o,--output", out_path, "Embeddings file")->required();
  gen->add_option("--dim", dim, "Target width");
  gen->add_option("--alpha", alpha, "Class weight relative to the superclass (hierarchy)");
  gen->add_option("--seed", seed, "Seed");
  gen->add_flag("--allow-duplicates", allow_duplicates, "Keep identical targets");

  std::string train_out, test_out;
  taskstream::SyntheticHierarchySpec spec;
  auto* syn = app.add_subcommand("gen-synthetic", "Write a synthetic hierarchy dataset");
  syn->add_option("--train", train_out, "Train split path")->required();
  syn->add_option("--test", test_out, "Test split path")->required();
  syn->add_option("--superclasses", spec.superclasses);
  syn->add_option("--classes-per-superclass", spec.classes_per_superclass);
  syn->add_option("--feature-dim", spec.feature_dim);
  syn->add_option("--sigma-super", spec.sigma_super);
  syn->add_option("--sigma-class", spec.sigma_class);
  syn->add_option("--sigma-x", spec.sigma_x);
  syn->add_option("--train-per-class", spec.train_per_class);
  syn->add_option("--test-per-class", spec.test_per_class);
  syn->add_option("--seed", seed);

  std::string record_path;
  std::size_t k = 10;
  bool uncentered = false;
  auto* drift = app.add_subcommand("analyze-drift", "Recompute drift of a persisted run at a new k");
  drift->add_option("record", record_path, "record.json of the run")->required()->check(CLI::ExistingFile);
  drift->add_option("--k", k, "Number of principal directions")->required();
  drift->add_flag("--uncentered", uncentered, "Skip column centering");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage_error", e.what());
    return 2;
  }

  try {
    if (*run) {
      auto config = runner::load_config(config_path);
      if (!output_dir.empty()) config.output_dir = output_dir;
      const auto record = runner::run_experiment(config, {true, !no_resume, jobs});
      print_summary(record);
      if (!all_ok({record})) {
        print_error("seed_failure", "one or more seeds failed; see metrics.json of each seed");
        return 3;
      }
    } else if (*cmp) {
      std::vector<runner::RunRecord> records;
      for (const auto& p : record_paths) records.push_back(runner::load_record(p));
      const auto comparison = runner::compare(records, baseline);
      runner::write_comparison(out_prefix + ".csv", out_prefix + ".json", comparison);
      std::cout << runner::to_json(comparison).dump(2) << std::endl;
    } else if (*sw) {
      auto config = runner::load_config(config_path);
      if (!output_dir.empty()) config.output_dir = output_dir;
      const auto axis = runner::sweep_axis_from_string(axis_name);
      if (axis_values.empty()) axis_values = runner::default_axis_values(axis);
      const auto records = runner::sweep(config, axis, axis_values, {true, true, jobs});
      json out = json::array();
      for (const auto& r : records) {
        out.push_back({{"name", r.name},
                       {"record", (std::filesystem::path(config.output_dir) / r.fingerprint / "record.json").string()}});
      }
      std::cout << out.dump(2) << std::endl;
      if (!all_ok(records)) {
        print_error("seed_failure", "one or more seeds failed");
        return 3;
      }
    } else if (*gen) {
      const auto examples = taskstream::load_examples(dataset_path);
      std::vector<std::string> names;
      for (const auto& ex : examples) {
        if (std::find(names.begin(), names.end(), ex.class_name) == names.end()) names.push_back(ex.class_name);
      }
      supervision::FallbackOptions opt;
      opt.mode = supervision::fallback_mode_from_string(mode);
      opt.dim = dim;
      opt.alpha = alpha;
      opt.seed = seed;
      opt.allow_duplicates = allow_duplicates;
      supervision::fallback_targets(names, opt).save(out_path);
      std::cout << json{{"output", out_path}, {"classes", names.size()}, {"dim", dim}}.dump() << std::endl;
    } else if (*syn) {
      const auto ds = taskstream::generate_synthetic(spec, seed).data;
      taskstream::save_examples(train_out, ds.feature_dim, ds.train);
      taskstream::save_examples(test_out, ds.feature_dim, ds.test);
      std::cout << json{{"train", train_out}, {"test", test_out}, {"classes", ds.num_classes()}}.dump() << std::endl;
    } else if (*drift) {
      const auto reports = runner::analyze_drift(record_path, k, !uncentered);
      json out = json::array();
      for (const auto& r : reports) {
        json pts = json::array();
        for (const auto& p : r.points) pts.push_back({{"after_task", p.after_task}, {"value", p.value}});
        out.push_back({{"k", r.options.k}, {"centered", r.options.centered}, {"points", pts}});
      }
      std::cout << out.dump(2) << std::endl;
    }
  } catch (const Error& e) {
    print_error(e.kind(), e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal_error", e.what());
    return 1;
  }
  return 0;
}
