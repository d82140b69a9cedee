#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "seva/cli.hpp"

using namespace seva;
using namespace seva::cli;
namespace fs = std::filesystem;

namespace {

const char* kSmallConfig = R"({
  "world": {"num_classes": 4, "input_dim": 6},
  "network": {"feature_dim": 8, "groups": 2},
  "source": {"samples_per_class": 50, "iterations": 100},
  "methods": [{"kind": "no_adapt"}, {"kind": "tent", "lr": 0.01}, {"kind": "seva", "lr": 0.01}],
  "stream": {"batch_size": 16, "num_batches": 8, "labels": {"segment_length": 32}},
  "calibration_samples": 32,
  "seeds": [0, 1],
  "bounds": {"instances": 4, "samples": 2000, "fast_samples": 500},
  "ablation": {"lambda_values": [0.5, 1.5], "rho_values": [0.8, 1.2]},
  "timing": {"num_samples": 160}
})";

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("seva_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path write_config(const fs::path& dir, const std::string& text) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << text;
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

struct Invocation {
  int code;
  std::string out, err;
};

Invocation invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "seva");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  const int code = main_entry(static_cast<int>(argv.size()), argv.data());
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  return {code, out.str(), err.str()};
}

std::string expect_config_error(const std::string& text) {
  try {
    parse_config(Json::parse(text));
  } catch (const ConfigError& e) {
    return e.key();
  }
  FAIL("expected ConfigError for " << text);
  return {};
}

// Drops the trailing wall-clock columns of every CSV line.
std::string strip_timing(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) {
    for (int i = 0; i < 2; ++i) line = line.substr(0, line.rfind(','));
    out += line + "\n";
  }
  return out;
}

}  // namespace

TEST_CASE("default config carries the documented defaults") {
  const RunConfig c = parse_config(Json::object());
  const adapt::MethodConfig* seva = nullptr;
  for (const auto& m : c.methods)
    if (m.kind == adapt::MethodKind::Seva) seva = &m;
  REQUIRE(seva != nullptr);
  CHECK(seva->lambda == 1.5);
  CHECK(seva->threshold_rho == 1.0);
  CHECK(seva->momentum == 0.9);
  CHECK(c.stream.batch_size == 64);
  CHECK(c.calibration_samples == 128);
  CHECK(c.seeds.size() == 10);
  CHECK(c.bounds.instances == 50);
  CHECK(c.bounds.samples == 100000);
  CHECK(c.bounds.fast_samples == 1000);
  CHECK(c.ablation.lambda_values.front() == 0.5);
  CHECK(c.ablation.lambda_values.back() == 3.0);
  CHECK(c.ablation.rho_values.front() == 0.5);
  CHECK(c.ablation.rho_values.back() == 1.5);
  CHECK(default_method(adapt::MethodKind::EntropySelect).threshold_rho == 0.4);
}

TEST_CASE("strict validation names the offending key") {
  CHECK(expect_config_error(R"({"wrold": {}})") == "wrold");
  CHECK(expect_config_error(R"({"world": {"num_clases": 3}})") == "world.num_clases");
  CHECK(expect_config_error(R"({"world": {"num_classes": "ten"}})") == "world.num_classes");
  CHECK(expect_config_error(R"({"world": {"num_classes": 1}})") == "world.num_classes");
  CHECK(expect_config_error(R"({"methods": [{"kind": "tent"}, {"kind": "sar"}]})") == "methods[1].kind");
  CHECK(expect_config_error(R"({"methods": [{"kind": "tent", "learning_rate": 1}]})") == "methods[0].learning_rate");
  CHECK(expect_config_error(R"({"methods": [{"rho": 1}]})") == "methods[0].kind");
  CHECK(expect_config_error(R"({"methods": [{"kind": "tent", "lr": -1}]})") == "methods[0].lr");
  CHECK(expect_config_error(R"({"stream": {"batch_size": 0}})") == "stream.batch_size");
  CHECK(expect_config_error(R"({"stream": {"labels": {"schedule": "sorted"}}})") == "stream.labels.schedule");
  CHECK(expect_config_error(R"({"stream": {"corruption": {"specs": [{"kind": "fog"}]}}})") ==
        "stream.corruption.specs[0].kind");
  CHECK(expect_config_error(R"({"seeds": [-1]})") == "seeds[0]");
  CHECK(expect_config_error(R"({"mc_mode": "quick"})") == "mc_mode");
  CHECK(expect_config_error(R"({"network": {"groups": 3}})") == "network.groups");
  CHECK(expect_config_error(R"([1, 2])") == "<root>");
}

TEST_CASE("resolved config round trips") {
  const RunConfig a = parse_config(Json::parse(kSmallConfig));
  const Json ra = resolved_json(a);
  const RunConfig b = parse_config(ra);
  CHECK(resolved_json(b) == ra);
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  CHECK(config_hash(a) != config_hash(parse_config(Json::object())));

  SUBCASE("infinite concentration and cycles survive") {
    const RunConfig c = parse_config(Json::parse(
        R"({"stream": {"labels": {"concentration": "inf"}, "corruption": {"cycle_min_severity": 4, "segment_lengths": [640]}}})"));
    CHECK(std::isinf(c.stream.labels.concentration));
    CHECK(c.stream.corruption.specs.size() == 8);
    CHECK(resolved_json(parse_config(resolved_json(c))) == resolved_json(c));
  }
}

TEST_CASE("seeds derive from one master seed") {
  const CellSeeds a = derive_seeds(3), b = derive_seeds(3), c = derive_seeds(4);
  CHECK(a.world == b.world);
  CHECK(a.stream == b.stream);
  CHECK(a.world != c.world);
  CHECK(a.world != a.stream);
}

TEST_CASE("summaries follow from the step records") {
  const RunConfig config = parse_config(Json::parse(kSmallConfig));
  const Prepared p = prepare(config, 0);
  for (const auto& m : config.methods) {
    const CellResult cell = run_cell(config, p, m);
    const auto direct = scenarios::selection_f1(cell.report, p.stream.labels);
    CHECK(cell.summary.selection.f1 == doctest::Approx(direct.f1).epsilon(1e-14));
    CHECK(cell.summary.selection.precision == doctest::Approx(direct.precision).epsilon(1e-14));
    CHECK(cell.summary.selection.empty_selection == direct.empty_selection);
    CHECK(cell.summary.online_accuracy ==
          doctest::Approx(scenarios::online_accuracy(cell.report, p.stream.labels)).epsilon(1e-14));
    CHECK(cell.summary.n_samples == 128);
  }
}

TEST_CASE("run writes traces, summary and resolved config") {
  const fs::path dir = scratch_dir("run");
  const fs::path cfg = write_config(dir, kSmallConfig);
  const auto r1 = invoke({"run", "--config", cfg.string(), "--out", (dir / "a").string()});
  REQUIRE(r1.code == 0);
  const auto r2 = invoke({"run", "--config", cfg.string(), "--out", (dir / "b").string()});
  REQUIRE(r2.code == 0);

  std::size_t traces = 0;
  for (const auto& entry : fs::directory_iterator(dir / "a")) {
    const auto name = entry.path().filename().string();
    if (entry.path().extension() != ".jsonl") continue;
    ++traces;
    CHECK(slurp(entry.path()) == slurp(dir / "b" / name));
  }
  CHECK(traces == 6);

  SUBCASE("trace schema and recomputable summary") {
    std::ifstream f(dir / "a" / "trace_m2_seva_s1.jsonl");
    std::string line;
    std::vector<Json> records;
    while (std::getline(f, line)) records.push_back(Json::parse(line));
    REQUIRE(records.size() == 1 + 8 + 1);
    CHECK(records.front()["type"] == "header");
    CHECK(records.front()["schema_version"] == kTraceSchemaVersion);
    CHECK(records.front()["resolved_config"] == resolved_json(parse_config(Json::parse(kSmallConfig))));
    std::vector<StepTotals> steps;
    for (std::size_t i = 1; i + 1 < records.size(); ++i) {
      const Json& r = records[i];
      CHECK(r["type"] == "step");
      CHECK(r["index"] == i - 1);
      steps.push_back({r["n_samples"], r["n_selected"], r["n_correct"], r["n_selected_correct"], r["loss_sum"], r["updated"]});
    }
    const CellSummary s = summarize(steps);
    const Json& sum = records.back();
    CHECK(sum["type"] == "summary");
    CHECK(sum["online_accuracy"].get<double>() == s.online_accuracy);
    CHECK(sum["selection_f1"].get<double>() == s.selection.f1);
    CHECK(sum["mean_loss"].get<double>() == s.mean_loss);
    CHECK(sum["n_selected"] == s.n_selected);
  }

  SUBCASE("summary CSV matches the golden file") {
    const std::string csv = slurp(dir / "a" / "summary.csv");
    CHECK(csv.substr(0, csv.find('\n')) == csv_header());
    CHECK(strip_timing(csv) == slurp(fs::path(SEVA_GOLDEN_DIR) / "summary_small.csv"));
  }

  SUBCASE("rerun from the resolved config reproduces the traces") {
    const auto r3 = invoke({"run", "--config", (dir / "a" / "resolved_config.json").string(), "--out", (dir / "c").string()});
    REQUIRE(r3.code == 0);
    CHECK(slurp(dir / "a" / "trace_m1_tent_s0.jsonl") == slurp(dir / "c" / "trace_m1_tent_s0.jsonl"));
  }
}

TEST_CASE("minimal no_adapt config gives a one-row summary") {
  const fs::path dir = scratch_dir("minimal");
  const fs::path cfg = write_config(dir, R"({"methods": [{"kind": "no_adapt"}], "seeds": [0],
    "world": {"num_classes": 3, "input_dim": 4}, "network": {"feature_dim": 4, "groups": 2},
    "stream": {"batch_size": 8, "num_batches": 4}, "calibration_samples": 8})");
  REQUIRE(invoke({"run", "--config", cfg.string(), "--out", (dir / "o").string()}).code == 0);
  const std::string csv = slurp(dir / "o" / "summary.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
}

TEST_CASE("exit codes") {
  const fs::path dir = scratch_dir("codes");
  SUBCASE("unknown key exits 2 and names it") {
    const auto r = invoke({"run", "--config", write_config(dir, R"({"stream": {"batchsize": 4}})").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("stream.batchsize") != std::string::npos);
  }
  SUBCASE("malformed JSON exits 2") {
    CHECK(invoke({"run", "--config", write_config(dir, "{ not json").string()}).code == 2);
  }
  SUBCASE("missing file exits 2") {
    CHECK(invoke({"run", "--config", (dir / "absent.json").string()}).code == 2);
  }
  SUBCASE("missing subcommand exits 2") { CHECK(invoke({}).code == 2); }
  SUBCASE("unwritable output exits 1") {
    const fs::path blocker = dir / "file";
    std::ofstream(blocker) << "x";
    const auto r = invoke({"run", "--config", write_config(dir, kSmallConfig).string(), "--out", (blocker / "sub").string()});
    CHECK(r.code == 1);
  }
  SUBCASE("verify-bounds with zero covariance passes") {
    const auto r = invoke({"verify-bounds", "--config",
                           write_config(dir, R"({"bounds": {"instances": 10, "samples": 200, "zero_sigma": true}})").string()});
    CHECK(r.code == 0);
    CHECK(r.out.find("VIOLATED") == std::string::npos);
  }
}

TEST_CASE("output directory resolution") {
  RunConfig c = default_config();
  c.output_dir = "from_config";
  ::unsetenv("SEVA_OUT_DIR");
  CHECK(resolve_output_dir(c, "") == fs::path("from_config"));
  CHECK(resolve_output_dir(c, "flag") == fs::path("flag"));
  ::setenv("SEVA_OUT_DIR", "from_env", 1);
  CHECK(resolve_output_dir(c, "flag") == fs::path("from_env"));
  ::unsetenv("SEVA_OUT_DIR");

  const fs::path dir = scratch_dir("env");
  ::setenv("SEVA_OUT_DIR", (dir / "env_out").string().c_str(), 1);
  const auto r = invoke({"run", "--config", write_config(dir, kSmallConfig).string(), "--out", (dir / "ignored").string()});
  ::unsetenv("SEVA_OUT_DIR");
  CHECK(r.code == 0);
  CHECK(fs::exists(dir / "env_out" / "summary.csv"));
  CHECK_FALSE(fs::exists(dir / "ignored"));
}

TEST_CASE("--seeds and --fast are recorded in the resolved config") {
  const fs::path dir = scratch_dir("flags");
  const auto r = invoke({"run", "--config", write_config(dir, kSmallConfig).string(), "--out", (dir / "o").string(),
                         "--seeds", "3", "--fast"});
  REQUIRE(r.code == 0);
  const Json resolved = Json::parse(slurp(dir / "o" / "resolved_config.json"));
  CHECK(resolved["seeds"] == Json::array({0, 1, 2}));
  CHECK(resolved["mc_mode"] == "fast");
}

TEST_CASE("ablate emits the component grid and both sweeps") {
  const fs::path dir = scratch_dir("ablate");
  REQUIRE(invoke({"ablate", "--config", write_config(dir, kSmallConfig).string(), "--out", (dir / "o").string()}).code == 0);
  std::istringstream grid(slurp(dir / "o" / "ablation_grid.csv"));
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(grid, line)) rows.push_back(line);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].rfind("cell,selection,augmented_entropy,method", 0) == 0);
  CHECK(rows[1].rfind("entropy,0,0,tent,", 0) == 0);
  CHECK(rows[2].rfind("selection,1,0,entropy_select,", 0) == 0);
  CHECK(rows[3].rfind("augmented_entropy,0,1,aug_entropy,", 0) == 0);
  CHECK(rows[4].rfind("selection_augmented_entropy,1,1,seva,", 0) == 0);
  const std::string lambda = slurp(dir / "o" / "lambda_sweep.csv");
  CHECK(std::count(lambda.begin(), lambda.end(), '\n') == 3);
  const std::string rho = slurp(dir / "o" / "rho_sweep.csv");
  CHECK(rho.rfind("rho,", 0) == 0);
}

TEST_CASE("timing rows and counters") {
  const RunConfig c = parse_config(Json::parse(kSmallConfig));
  const auto rows = run_timing(c);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].label == "no_adapt");
  CHECK(rows[3].label == "seva");
  CHECK(rows[5].label == "explicit_va(7)");
  CHECK(rows[3].counters.backward_passes <= rows[1].counters.backward_passes);
  for (const auto& r : rows) CHECK(r.num_batches == 10);
  CHECK(rows[5].counters.optimizer_steps == 7 * rows[5].updated_batches);
  CHECK(rows[4].counters.optimizer_steps == 5 * rows[4].updated_batches);
  CHECK(rows[3].counters.optimizer_steps == rows[3].updated_batches);
}
