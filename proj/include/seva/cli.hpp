#pragma once

// Operator surface: config ingestion, experiment cells, and the run /
// verify-bounds / ablate / time commands. The config dialect is JSON with
// strict key checking; see docs/config.md.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "seva/adapt.hpp"
#include "seva/model.hpp"
#include "seva/oracle.hpp"
#include "seva/scenarios.hpp"

namespace seva::cli {

using Json = nlohmann::ordered_json;

inline constexpr int kCsvSchemaVersion = 1;
inline constexpr int kTraceSchemaVersion = 1;

/// Invalid configuration; `key()` is the dotted path of the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error("config key '" + key + "': " + message), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

enum class McMode { Full, Fast };

struct BoundsConfig {
  std::uint64_t seed = 0;
  std::size_t instances = 50;
  std::size_t samples = 100000;
  std::size_t fast_samples = 1000;
  oracle::SweepOptions sweep;
};

struct AblationConfig {
  std::vector<double> lambda_values;  // default 0.5, 0.75, ..., 3.0
  std::vector<double> rho_values;     // default 0.5, 0.6, ..., 1.5
};

struct TimingConfig {
  std::size_t num_samples = 10000;
  std::vector<std::size_t> explicit_rounds{5, 7};
  double lr = 0.005;
};

struct RunConfig {
  scenarios::WorldSpec world;
  NetworkSpec network;
  scenarios::SourceTraining source;
  std::vector<adapt::MethodConfig> methods;
  scenarios::StreamSpec stream;
  std::size_t calibration_samples = 128;
  std::vector<std::uint64_t> seeds;
  std::string output_dir = "out";
  McMode mc_mode = McMode::Full;
  BoundsConfig bounds;
  AblationConfig ablation;
  TimingConfig timing;
};

/// Method defaults by kind: threshold rho 0.4 for the entropy-selected
/// baselines, 1.0 otherwise; rounds 3 for explicit_va, 1 otherwise.
adapt::MethodConfig default_method(adapt::MethodKind kind);

/// The committed scenario: imbalanced single-class segments under
/// severity-5 fog, seeds 0..9, methods no_adapt, tent, entropy_select and seva.
RunConfig default_config();

/// Overlays `doc` onto default_config(). Throws ConfigError naming the
/// first unknown, mistyped or out-of-range key.
RunConfig parse_config(const Json& doc);
RunConfig load_config(const std::filesystem::path& path);

/// Every field, defaults included. parse_config(resolved_json(c)) == c.
Json resolved_json(const RunConfig& config);
/// FNV-1a of the compact resolved JSON, as 16 hex digits.
std::string config_hash(const RunConfig& config);

/// Per-cell seeds, all derived from one master seed.
struct CellSeeds {
  std::uint64_t world, network, training, stream, engine;
};
CellSeeds derive_seeds(std::uint64_t master);

/// World, source model and stream for one master seed; shared by every
/// method cell of that seed so comparisons are paired.
struct Prepared {
  std::uint64_t seed = 0;
  scenarios::World world;
  ToyNetwork network;
  scenarios::Stream stream;
};
Prepared prepare(const RunConfig& config, std::uint64_t seed);

struct StepTotals {
  std::size_t n_samples = 0;
  std::size_t n_selected = 0;
  std::size_t n_correct = 0;
  std::size_t n_selected_correct = 0;
  double loss_sum = 0.0;
  bool updated = false;
};

struct CellSummary {
  std::size_t n_samples = 0;
  double online_accuracy = 0.0;
  double mean_loss = 0.0;
  std::size_t n_selected = 0;
  scenarios::SelectionScore selection;
};

/// Aggregates step records; the trace summary is exactly this over its steps.
CellSummary summarize(const std::vector<StepTotals>& steps);

struct CellResult {
  std::size_t method_index = 0;
  adapt::MethodConfig method;
  std::uint64_t seed = 0;
  adapt::RunReport report;
  std::vector<StepTotals> steps;
  CellSummary summary;
};

CellResult run_cell(const RunConfig& config, const Prepared& prepared, const adapt::MethodConfig& method,
                    std::size_t method_index = 0);

/// Every (method x seed) cell, seeds in parallel. Results are ordered by
/// method, then seed, independent of scheduling.
std::vector<CellResult> run_grid(const RunConfig& config, const std::vector<adapt::MethodConfig>& methods);

/// JSONL: one header record, one record per batch, one summary record. No
/// wall-clock values, so reruns are byte-identical.
void write_trace(std::ostream& out, const RunConfig& config, const CellResult& cell);

std::string csv_header();
/// One row per cell; the two trailing columns are wall-clock seconds.
std::string csv_row(const CellResult& cell);

std::string trace_file_name(const CellResult& cell);

/// Output directory: SEVA_OUT_DIR if set, else --out if given, else the
/// config's output_dir.
std::filesystem::path resolve_output_dir(const RunConfig& config, const std::string& flag_out);

/// Commands. Each returns the process exit code; config errors are the
/// caller's concern (exit 2).
int cmd_run(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log);
int cmd_verify_bounds(const RunConfig& config, std::ostream& log);
int cmd_ablate(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log);
int cmd_time(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log);

/// Timing row for one method on the shared timing stream.
struct TimingRow {
  std::string label;
  adapt::Counters counters;
  std::size_t updated_batches = 0;
  std::size_t num_batches = 0;
  double adaptation_seconds = 0.0;
};
std::vector<TimingRow> run_timing(const RunConfig& config);

/// Full argv entry point used by the seva tool.
int main_entry(int argc, char** argv);

}  // namespace seva::cli
