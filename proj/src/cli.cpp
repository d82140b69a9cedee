#include "seva/cli.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

namespace seva::cli {

using adapt::MethodConfig;
using adapt::MethodKind;

namespace {

std::string num(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::vector<double> linspace_steps(double lo, double hi, double step) {
  std::vector<double> out;
  const auto n = static_cast<int>(std::llround((hi - lo) / step));
  for (int i = 0; i <= n; ++i) out.push_back(std::round((lo + i * step) * 1e9) / 1e9);
  return out;
}

// Strict reader for one JSON object: rejects keys outside `known`, and
// reports paths as dotted keys.
class Section {
 public:
  Section(const Json& j, std::string path, std::initializer_list<const char*> known)
      : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    std::set<std::string> keys(known.begin(), known.end());
    for (const auto& [k, v] : j_.items())
      if (!keys.count(k)) throw ConfigError(child(k), "unknown key");
  }

  std::string child(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }
  const Json* find(const char* key) const {
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const char* key, double& out, double lo = -std::numeric_limits<double>::infinity(),
           double hi = std::numeric_limits<double>::infinity()) const {
    const Json* v = find(key);
    if (!v) return;
    if (!v->is_number()) throw ConfigError(child(key), "expected a number");
    const double x = v->get<double>();
    if (!std::isfinite(x) || x < lo || x > hi)
      throw ConfigError(child(key), "value " + num(x) + " outside [" + num(lo) + ", " + num(hi) + "]");
    out = x;
  }

  template <class U>
  void get_uint(const char* key, U& out, std::uint64_t lo = 0,
                std::uint64_t hi = std::numeric_limits<std::uint64_t>::max()) const {
    const Json* v = find(key);
    if (!v) return;
    out = static_cast<U>(as_uint(*v, child(key), lo, hi));
  }

  void get(const char* key, bool& out) const {
    const Json* v = find(key);
    if (!v) return;
    if (!v->is_boolean()) throw ConfigError(child(key), "expected true or false");
    out = v->get<bool>();
  }

  void get(const char* key, std::string& out) const {
    const Json* v = find(key);
    if (!v) return;
    if (!v->is_string()) throw ConfigError(child(key), "expected a string");
    out = v->get<std::string>();
  }

  template <class E, class Parse>
  void get_enum(const char* key, E& out, Parse parse) const {
    std::string s;
    get(key, s);
    if (s.empty() && !find(key)) return;
    try {
      out = parse(s);
    } catch (const std::exception& e) {
      throw ConfigError(child(key), e.what());
    }
  }

  static std::uint64_t as_uint(const Json& v, const std::string& path, std::uint64_t lo, std::uint64_t hi) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
      throw ConfigError(path, "expected a non-negative integer");
    const auto x = v.get<std::uint64_t>();
    if (x < lo || x > hi)
      throw ConfigError(path, "value " + std::to_string(x) + " outside [" + std::to_string(lo) + ", " +
                                  std::to_string(hi) + "]");
    return x;
  }

 private:
  const Json& j_;
  std::string path_;
};

const Json& require_array(const Json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError(path, "expected an array");
  return v;
}

std::vector<double> number_list(const Json& v, const std::string& path, double lo, double hi) {
  std::vector<double> out;
  for (std::size_t i = 0; i < require_array(v, path).size(); ++i) {
    const Json& e = v[i];
    const std::string p = path + "[" + std::to_string(i) + "]";
    if (!e.is_number()) throw ConfigError(p, "expected a number");
    const double x = e.get<double>();
    if (!std::isfinite(x) || x < lo || x > hi) throw ConfigError(p, "value " + num(x) + " out of range");
    out.push_back(x);
  }
  if (out.empty()) throw ConfigError(path, "must not be empty");
  return out;
}

MethodConfig parse_method(const Json& j, const std::string& path) {
  Section s(j, path, {"kind", "rho", "lambda", "lr", "momentum", "rounds"});
  const Json* kind = s.find("kind");
  if (!kind) throw ConfigError(s.child("kind"), "required");
  MethodKind k{};
  s.get_enum("kind", k, adapt::parse_method_kind);
  MethodConfig m = default_method(k);
  s.get("rho", m.threshold_rho, 0.0);
  s.get("lambda", m.lambda, 0.0);
  s.get("lr", m.lr, 0.0);
  s.get("momentum", m.momentum, 0.0, 1.0);
  s.get_uint("rounds", m.rounds, 1, 1000);
  try {
    m.validate();
  } catch (const std::exception& e) {
    throw ConfigError(path, e.what());
  }
  return m;
}

Json method_json(const MethodConfig& m) {
  return Json{{"kind", adapt::method_kind_name(m.kind)}, {"rho", m.threshold_rho}, {"lambda", m.lambda},
              {"lr", m.lr}, {"momentum", m.momentum}, {"rounds", m.rounds}};
}

// Picks the configured method of a kind, or its default with the learning
// rate, momentum and lambda of the first configured adaptive method.
MethodConfig method_template(const RunConfig& config, MethodKind kind) {
  for (const auto& m : config.methods)
    if (m.kind == kind) return m;
  MethodConfig out = default_method(kind);
  for (const auto& m : config.methods) {
    if (m.kind == MethodKind::NoAdapt) continue;
    out.lr = m.lr;
    out.momentum = m.momentum;
    out.lambda = m.lambda;
    break;
  }
  return out;
}

std::string method_label(const MethodConfig& m) {
  std::string s(adapt::method_kind_name(m.kind));
  if (m.kind == MethodKind::ExplicitVA) s += "(" + std::to_string(m.rounds) + ")";
  return s;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << content;
}

unsigned worker_count(std::size_t jobs) {
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  return static_cast<unsigned>(std::min<std::size_t>(hw, std::max<std::size_t>(jobs, 1)));
}

}  // namespace

MethodConfig default_method(MethodKind kind) {
  MethodConfig m;
  m.kind = kind;
  m.lr = 0.005;
  if (kind == MethodKind::EntropySelect || kind == MethodKind::ExplicitVA) m.threshold_rho = 0.4;
  if (kind == MethodKind::ExplicitVA) m.rounds = 3;
  return m;
}

RunConfig default_config() {
  RunConfig c;
  c.source.head.weight_decay = 1e-2;
  c.methods = {default_method(MethodKind::NoAdapt), default_method(MethodKind::Tent),
               default_method(MethodKind::EntropySelect), default_method(MethodKind::Seva)};
  c.stream.labels.kind = scenarios::LabelScheduleKind::Imbalanced;
  c.stream.labels.segment_length = 128;
  c.stream.corruption = scenarios::CorruptionSchedule::single({scenarios::CorruptionKind::FeatureScale, 5});
  c.stream.batch_size = 64;
  c.stream.num_batches = 100;
  for (std::uint64_t s = 0; s < 10; ++s) c.seeds.push_back(s);
  c.ablation.lambda_values = linspace_steps(0.5, 3.0, 0.25);
  c.ablation.rho_values = linspace_steps(0.5, 1.5, 0.1);
  return c;
}

RunConfig parse_config(const Json& doc) {
  RunConfig c = default_config();
  Section root(doc, "",
               {"world", "network", "source", "methods", "stream", "calibration_samples", "seeds", "output_dir",
                "mc_mode", "bounds", "ablation", "timing"});

  if (const Json* j = root.find("world")) {
    Section s(*j, "world", {"num_classes", "input_dim", "prototype_scale", "separation_floor", "within_class_std"});
    s.get_uint("num_classes", c.world.num_classes, 2, 1000);
    s.get_uint("input_dim", c.world.input_dim, 1, 4096);
    s.get("prototype_scale", c.world.prototype_scale, 1e-9);
    s.get("separation_floor", c.world.separation_floor, 0.0);
    s.get("within_class_std", c.world.within_class_std, 0.0);
  }
  if (const Json* j = root.find("network")) {
    Section s(*j, "network", {"feature_dim", "num_layers", "groups", "activation"});
    s.get_uint("feature_dim", c.network.feature_dim, 1, 4096);
    s.get_uint("num_layers", c.network.num_layers, 0, 64);
    s.get_uint("groups", c.network.groups, 1, 4096);
    s.get_enum("activation", c.network.activation, parse_activation);
    if (c.network.feature_dim % c.network.groups != 0)
      throw ConfigError("network.groups", "must divide feature_dim");
  }
  if (const Json* j = root.find("source")) {
    Section s(*j, "source", {"samples_per_class", "iterations", "learning_rate", "momentum", "weight_decay"});
    s.get_uint("samples_per_class", c.source.samples_per_class, 1, 1000000);
    s.get_uint("iterations", c.source.head.iterations, 1, 1000000);
    s.get("learning_rate", c.source.head.learning_rate, 0.0);
    s.get("momentum", c.source.head.momentum, 0.0, 1.0);
    s.get("weight_decay", c.source.head.weight_decay, 0.0);
  }
  if (const Json* j = root.find("methods")) {
    require_array(*j, "methods");
    if (j->empty()) throw ConfigError("methods", "must not be empty");
    c.methods.clear();
    for (std::size_t i = 0; i < j->size(); ++i) c.methods.push_back(parse_method((*j)[i], "methods[" + std::to_string(i) + "]"));
  }
  if (const Json* j = root.find("stream")) {
    Section s(*j, "stream", {"labels", "corruption", "batch_size", "num_batches"});
    s.get_uint("batch_size", c.stream.batch_size, 1, 1000000);
    s.get_uint("num_batches", c.stream.num_batches, 1, 100000000);
    if (const Json* l = s.find("labels")) {
      Section ls(*l, "stream.labels", {"schedule", "concentration", "segment_length"});
      ls.get_enum("schedule", c.stream.labels.kind, scenarios::parse_label_schedule);
      if (const Json* conc = ls.find("concentration")) {
        if (conc->is_string() && conc->get<std::string>() == "inf")
          c.stream.labels.concentration = std::numeric_limits<double>::infinity();
        else
          ls.get("concentration", c.stream.labels.concentration, 1e-9);
      }
      ls.get_uint("segment_length", c.stream.labels.segment_length, 1, 100000000);
    }
    if (const Json* cj = s.find("corruption")) {
      Section cs(*cj, "stream.corruption", {"specs", "cycle_min_severity", "segment_lengths"});
      if (cs.find("specs") && cs.find("cycle_min_severity"))
        throw ConfigError("stream.corruption.cycle_min_severity", "give either specs or cycle_min_severity");
      if (const Json* sp = cs.find("specs")) {
        require_array(*sp, "stream.corruption.specs");
        if (sp->empty()) throw ConfigError("stream.corruption.specs", "must not be empty");
        c.stream.corruption.specs.clear();
        for (std::size_t i = 0; i < sp->size(); ++i) {
          const std::string p = "stream.corruption.specs[" + std::to_string(i) + "]";
          Section e((*sp)[i], p, {"kind", "severity"});
          scenarios::CorruptionSpec spec;
          e.get_enum("kind", spec.kind, scenarios::parse_corruption_kind);
          e.get_uint("severity", spec.severity, 0, scenarios::kMaxSeverity);
          c.stream.corruption.specs.push_back(spec);
        }
      }
      if (const Json* m = cs.find("cycle_min_severity"))
        c.stream.corruption.specs = scenarios::corruption_cycle(
            static_cast<int>(Section::as_uint(*m, "stream.corruption.cycle_min_severity", 0, scenarios::kMaxSeverity)));
      if (const Json* sl = cs.find("segment_lengths")) {
        require_array(*sl, "stream.corruption.segment_lengths");
        if (sl->empty()) throw ConfigError("stream.corruption.segment_lengths", "must not be empty");
        c.stream.corruption.segment_lengths.clear();
        for (std::size_t i = 0; i < sl->size(); ++i)
          c.stream.corruption.segment_lengths.push_back(
              Section::as_uint((*sl)[i], "stream.corruption.segment_lengths[" + std::to_string(i) + "]", 0,
                               std::numeric_limits<std::uint64_t>::max()));
      }
    }
  }
  root.get_uint("calibration_samples", c.calibration_samples, 2, 100000000);
  if (const Json* j = root.find("seeds")) {
    require_array(*j, "seeds");
    if (j->empty()) throw ConfigError("seeds", "must not be empty");
    c.seeds.clear();
    for (std::size_t i = 0; i < j->size(); ++i)
      c.seeds.push_back(Section::as_uint((*j)[i], "seeds[" + std::to_string(i) + "]", 0,
                                         std::numeric_limits<std::uint64_t>::max()));
  }
  root.get("output_dir", c.output_dir);
  if (const Json* j = root.find("mc_mode")) {
    if (!j->is_string() || (*j != "full" && *j != "fast")) throw ConfigError("mc_mode", "expected \"full\" or \"fast\"");
    c.mc_mode = *j == "fast" ? McMode::Fast : McMode::Full;
  }
  if (const Json* j = root.find("bounds")) {
    Section s(*j, "bounds",
              {"seed", "instances", "samples", "fast_samples", "max_classes", "max_dim", "calibration_size",
               "lambda_min", "lambda_max", "zero_sigma", "fixed_variance"});
    auto& b = c.bounds;
    s.get_uint("seed", b.seed);
    s.get_uint("instances", b.instances, 1, 1000000);
    s.get_uint("samples", b.samples, 2, 1000000000);
    s.get_uint("fast_samples", b.fast_samples, 2, 1000000000);
    s.get_uint("max_classes", b.sweep.max_classes, 2, 1000);
    s.get_uint("max_dim", b.sweep.max_dim, 2, 4096);
    s.get_uint("calibration_size", b.sweep.calibration_size, 2, 1000000);
    s.get("lambda_min", b.sweep.lambda_min, 0.0);
    s.get("lambda_max", b.sweep.lambda_max, 0.0);
    s.get("zero_sigma", b.sweep.zero_sigma);
    if (const Json* fv = s.find("fixed_variance"); fv && !fv->is_null()) s.get("fixed_variance", b.sweep.fixed_variance, 0.0);
    if (b.sweep.lambda_max < b.sweep.lambda_min) throw ConfigError("bounds.lambda_max", "must be >= lambda_min");
  }
  if (const Json* j = root.find("ablation")) {
    Section s(*j, "ablation", {"lambda_values", "rho_values"});
    if (const Json* v = s.find("lambda_values")) c.ablation.lambda_values = number_list(*v, "ablation.lambda_values", 0.0, 1e6);
    if (const Json* v = s.find("rho_values")) c.ablation.rho_values = number_list(*v, "ablation.rho_values", 0.0, 1e6);
  }
  if (const Json* j = root.find("timing")) {
    Section s(*j, "timing", {"num_samples", "explicit_rounds", "lr"});
    s.get_uint("num_samples", c.timing.num_samples, 1, 100000000);
    s.get("lr", c.timing.lr, 0.0);
    if (const Json* r = s.find("explicit_rounds")) {
      require_array(*r, "timing.explicit_rounds");
      c.timing.explicit_rounds.clear();
      for (std::size_t i = 0; i < r->size(); ++i)
        c.timing.explicit_rounds.push_back(
            Section::as_uint((*r)[i], "timing.explicit_rounds[" + std::to_string(i) + "]", 1, 1000));
    }
  }
  if (c.calibration_samples > c.stream.batch_size * c.stream.num_batches)
    throw ConfigError("calibration_samples", "exceeds the stream length");
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("<file>", "cannot read " + path.string());
  Json doc;
  try {
    doc = Json::parse(f);
  } catch (const Json::parse_error& e) {
    throw ConfigError("<file>", std::string("JSON parse error: ") + e.what());
  }
  return parse_config(doc);
}

Json resolved_json(const RunConfig& c) {
  Json methods = Json::array();
  for (const auto& m : c.methods) methods.push_back(method_json(m));
  Json specs = Json::array();
  for (const auto& s : c.stream.corruption.specs)
    specs.push_back({{"kind", scenarios::corruption_kind_name(s.kind)}, {"severity", s.severity}});
  const double conc = c.stream.labels.concentration;
  Json j;
  j["world"] = {{"num_classes", c.world.num_classes},
                {"input_dim", c.world.input_dim},
                {"prototype_scale", c.world.prototype_scale},
                {"separation_floor", c.world.separation_floor},
                {"within_class_std", c.world.within_class_std}};
  j["network"] = {{"feature_dim", c.network.feature_dim},
                  {"num_layers", c.network.num_layers},
                  {"groups", c.network.groups},
                  {"activation", activation_name(c.network.activation)}};
  j["source"] = {{"samples_per_class", c.source.samples_per_class},
                 {"iterations", c.source.head.iterations},
                 {"learning_rate", c.source.head.learning_rate},
                 {"momentum", c.source.head.momentum},
                 {"weight_decay", c.source.head.weight_decay}};
  j["methods"] = methods;
  j["stream"] = {{"labels",
                  {{"schedule", scenarios::label_schedule_name(c.stream.labels.kind)},
                   {"concentration", std::isinf(conc) ? Json("inf") : Json(conc)},
                   {"segment_length", c.stream.labels.segment_length}}},
                 {"corruption", {{"specs", specs}, {"segment_lengths", c.stream.corruption.segment_lengths}}},
                 {"batch_size", c.stream.batch_size},
                 {"num_batches", c.stream.num_batches}};
  j["calibration_samples"] = c.calibration_samples;
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  j["mc_mode"] = c.mc_mode == McMode::Fast ? "fast" : "full";
  const auto& b = c.bounds;
  j["bounds"] = {{"seed", b.seed},
                 {"instances", b.instances},
                 {"samples", b.samples},
                 {"fast_samples", b.fast_samples},
                 {"max_classes", b.sweep.max_classes},
                 {"max_dim", b.sweep.max_dim},
                 {"calibration_size", b.sweep.calibration_size},
                 {"lambda_min", b.sweep.lambda_min},
                 {"lambda_max", b.sweep.lambda_max},
                 {"zero_sigma", b.sweep.zero_sigma},
                 {"fixed_variance", b.sweep.fixed_variance < 0 ? Json(nullptr) : Json(b.sweep.fixed_variance)}};
  j["ablation"] = {{"lambda_values", c.ablation.lambda_values}, {"rho_values", c.ablation.rho_values}};
  j["timing"] = {{"num_samples", c.timing.num_samples},
                 {"explicit_rounds", c.timing.explicit_rounds},
                 {"lr", c.timing.lr}};
  return j;
}

std::string config_hash(const RunConfig& config) {
  const std::string text = resolved_json(config).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

CellSeeds derive_seeds(std::uint64_t master) {
  auto tag = [master](std::uint64_t t) { return CounterRng::substream(master, t)(); };
  return {tag(1), tag(2), tag(3), tag(4), tag(5)};
}

Prepared prepare(const RunConfig& config, std::uint64_t seed) {
  const CellSeeds s = derive_seeds(seed);
  scenarios::WorldSpec ws = config.world;
  ws.seed = s.world;
  scenarios::World world = scenarios::make_world(ws);
  NetworkSpec ns = config.network;
  ns.input_dim = world.input_dim();
  ns.num_classes = world.num_classes();
  ns.seed = s.network;
  ToyNetwork net = scenarios::train_source_model(world, ns, config.source, s.training);
  scenarios::StreamSpec ss = config.stream;
  ss.seed = s.stream;
  scenarios::Stream stream = scenarios::generate_stream(world, ss);
  return Prepared{seed, std::move(world), std::move(net), std::move(stream)};
}

CellSummary summarize(const std::vector<StepTotals>& steps) {
  std::size_t n = 0, sel = 0, correct = 0, sel_correct = 0;
  double loss = 0.0;
  for (const auto& s : steps) {
    n += s.n_samples;
    sel += s.n_selected;
    correct += s.n_correct;
    sel_correct += s.n_selected_correct;
    loss += s.loss_sum;
  }
  CellSummary out;
  out.n_samples = n;
  out.n_selected = sel;
  if (n > 0) {
    out.online_accuracy = static_cast<double>(correct) / static_cast<double>(n);
    out.mean_loss = loss / static_cast<double>(n);
  }
  auto& sc = out.selection;
  sc.empty_selection = sel == 0;
  sc.precision = sel == 0 ? 0.0 : static_cast<double>(sel_correct) / static_cast<double>(sel);
  sc.recall = correct == 0 ? 0.0 : static_cast<double>(sel_correct) / static_cast<double>(correct);
  sc.f1 = sc.precision + sc.recall > 0.0 ? 2.0 * sc.precision * sc.recall / (sc.precision + sc.recall) : 0.0;
  return out;
}

CellResult run_cell(const RunConfig& config, const Prepared& prepared, const MethodConfig& method,
                    std::size_t method_index) {
  adapt::Engine engine(prepared.network, method, derive_seeds(prepared.seed).engine);
  CellResult out;
  out.method_index = method_index;
  out.method = method;
  out.seed = prepared.seed;
  out.report = adapt::run_stream(engine, prepared.stream.batches, config.calibration_samples);
  const auto& labels = prepared.stream.labels;
  out.steps.reserve(out.report.steps.size());
  for (std::size_t b = 0; b < out.report.steps.size(); ++b) {
    const auto& step = out.report.steps[b];
    StepTotals t;
    t.n_samples = step.samples.size();
    t.n_selected = step.n_selected;
    t.updated = step.updated;
    for (std::size_t i = 0; i < step.samples.size(); ++i) {
      const auto& rec = step.samples[i];
      const bool correct = rec.predicted_class == labels[b][i];
      t.n_correct += correct;
      t.n_selected_correct += correct && rec.selected;
      t.loss_sum += rec.loss;
    }
    out.steps.push_back(t);
  }
  out.summary = summarize(out.steps);
  return out;
}

std::vector<CellResult> run_grid(const RunConfig& config, const std::vector<MethodConfig>& methods) {
  const std::size_t ns = config.seeds.size();
  std::vector<CellResult> results(methods.size() * ns);
  std::vector<std::exception_ptr> errors(ns);
  std::atomic<std::size_t> next{0};
  {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < worker_count(ns); ++w) {
      pool.emplace_back([&] {
        for (std::size_t s; (s = next.fetch_add(1)) < ns;) {
          try {
            const Prepared p = prepare(config, config.seeds[s]);
            for (std::size_t m = 0; m < methods.size(); ++m) results[m * ns + s] = run_cell(config, p, methods[m], m);
          } catch (...) {
            errors[s] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

void write_trace(std::ostream& out, const RunConfig& config, const CellResult& cell) {
  Json header;
  header["type"] = "header";
  header["schema_version"] = kTraceSchemaVersion;
  header["config_hash"] = config_hash(config);
  header["method_index"] = cell.method_index;
  header["method"] = method_json(cell.method);
  header["seed"] = cell.seed;
  header["threshold"] = cell.report.threshold;
  header["sigma"] = cell.report.sigma.variances;
  header["resolved_config"] = resolved_json(config);
  out << header.dump() << '\n';
  for (std::size_t i = 0; i < cell.steps.size(); ++i) {
    const auto& s = cell.steps[i];
    Json rec{{"type", "step"},         {"index", i},
             {"n_samples", s.n_samples}, {"n_selected", s.n_selected},
             {"n_correct", s.n_correct}, {"n_selected_correct", s.n_selected_correct},
             {"loss_sum", s.loss_sum},   {"updated", s.updated}};
    out << rec.dump() << '\n';
  }
  const auto& sm = cell.summary;
  const auto& c = cell.report.counters;
  Json summary{{"type", "summary"},
               {"n_samples", sm.n_samples},
               {"online_accuracy", sm.online_accuracy},
               {"mean_loss", sm.mean_loss},
               {"n_selected", sm.n_selected},
               {"selection_precision", sm.selection.precision},
               {"selection_recall", sm.selection.recall},
               {"selection_f1", sm.selection.f1},
               {"empty_selection", sm.selection.empty_selection},
               {"forward_passes", c.forward_passes},
               {"backward_passes", c.backward_passes},
               {"optimizer_steps", c.optimizer_steps},
               {"sample_forwards", c.sample_forwards},
               {"sample_backwards", c.sample_backwards}};
  out << summary.dump() << '\n';
}

std::string csv_header() {
  return "schema_version,method_index,method,seed,lambda,rho,lr,momentum,rounds,threshold,n_samples,"
         "online_accuracy,mean_loss,n_selected,selection_precision,selection_recall,selection_f1,"
         "empty_selection,forward_passes,backward_passes,optimizer_steps,calibration_seconds,adaptation_seconds";
}

std::string csv_row(const CellResult& cell) {
  const auto& m = cell.method;
  const auto& s = cell.summary;
  const auto& c = cell.report.counters;
  std::ostringstream o;
  o << kCsvSchemaVersion << ',' << cell.method_index << ',' << adapt::method_kind_name(m.kind) << ',' << cell.seed
    << ',' << num(m.lambda) << ',' << num(m.threshold_rho) << ',' << num(m.lr) << ',' << num(m.momentum) << ','
    << m.rounds << ',' << num(cell.report.threshold) << ',' << s.n_samples << ',' << num(s.online_accuracy) << ','
    << num(s.mean_loss) << ',' << s.n_selected << ',' << num(s.selection.precision) << ','
    << num(s.selection.recall) << ',' << num(s.selection.f1) << ',' << (s.selection.empty_selection ? 1 : 0)
    << ',' << c.forward_passes << ',' << c.backward_passes << ',' << c.optimizer_steps << ','
    << num(cell.report.calibration_seconds) << ',' << num(cell.report.adaptation_seconds);
  return o.str();
}

std::string trace_file_name(const CellResult& cell) {
  return "trace_m" + std::to_string(cell.method_index) + "_" + std::string(adapt::method_kind_name(cell.method.kind)) +
         "_s" + std::to_string(cell.seed) + ".jsonl";
}

std::filesystem::path resolve_output_dir(const RunConfig& config, const std::string& flag_out) {
  if (const char* env = std::getenv("SEVA_OUT_DIR"); env && *env) return env;
  if (!flag_out.empty()) return flag_out;
  return config.output_dir;
}

int cmd_run(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log) {
  std::filesystem::create_directories(out_dir);
  const auto cells = run_grid(config, config.methods);
  std::string csv = csv_header() + "\n";
  for (const auto& cell : cells) {
    std::ostringstream trace;
    write_trace(trace, config, cell);
    write_file(out_dir / trace_file_name(cell), trace.str());
    csv += csv_row(cell) + "\n";
    log << method_label(cell.method) << " seed " << cell.seed << ": accuracy " << num(cell.summary.online_accuracy)
        << ", selected " << cell.summary.n_selected << "/" << cell.summary.n_samples << ", selection F1 "
        << num(cell.summary.selection.f1) << "\n";
  }
  write_file(out_dir / "summary.csv", csv);
  write_file(out_dir / "resolved_config.json", resolved_json(config).dump(2) + "\n");
  return 0;
}

int cmd_verify_bounds(const RunConfig& config, std::ostream& log) {
  const auto& b = config.bounds;
  const std::size_t n = config.mc_mode == McMode::Fast ? b.fast_samples : b.samples;
  const auto entries = oracle::run_bound_sweep(b.seed, b.instances, n, b.sweep);
  std::vector<std::size_t> violations;
  for (const auto& e : entries) {
    const auto& r = e.report;
    log << "instance " << e.index << " C=" << e.num_classes << " d=" << e.dim << " lambda=" << num(e.lambda)
        << " l_ae=" << num(r.l_ae) << " mc_mean=" << num(r.mc.mean) << " stderr=" << num(r.mc.std_error)
        << " gap=" << num(r.gap) << (r.satisfied ? " ok" : " VIOLATED") << "\n";
    if (!r.satisfied) violations.push_back(e.index);
  }
  if (violations.empty()) {
    log << "all " << entries.size() << " instances satisfy mc_mean <= l_ae + 3 stderr (n=" << n << ")\n";
    return 0;
  }
  log << violations.size() << " of " << entries.size() << " instances violated:";
  for (auto i : violations) log << ' ' << i;
  log << "\n";
  return 1;
}

int cmd_ablate(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log) {
  std::filesystem::create_directories(out_dir);
  struct Cell {
    const char* name;
    bool selection, augmented;
    MethodKind kind;
  };
  const Cell grid[] = {{"entropy", false, false, MethodKind::Tent},
                       {"selection", true, false, MethodKind::EntropySelect},
                       {"augmented_entropy", false, true, MethodKind::AugEntropy},
                       {"selection_augmented_entropy", true, true, MethodKind::Seva}};
  std::vector<MethodConfig> methods;
  for (const auto& g : grid) methods.push_back(method_template(config, g.kind));
  const MethodConfig seva = method_template(config, MethodKind::Seva);
  for (double l : config.ablation.lambda_values) {
    MethodConfig m = seva;
    m.lambda = l;
    methods.push_back(m);
  }
  for (double r : config.ablation.rho_values) {
    MethodConfig m = seva;
    m.threshold_rho = r;
    methods.push_back(m);
  }
  const auto cells = run_grid(config, methods);
  const std::size_t ns = config.seeds.size();
  auto mean_of = [&](std::size_t m, auto field) {
    double acc = 0.0;
    for (std::size_t s = 0; s < ns; ++s) acc += field(cells[m * ns + s]);
    return acc / static_cast<double>(ns);
  };
  auto accuracy = [](const CellResult& c) { return c.summary.online_accuracy; };
  auto f1 = [](const CellResult& c) { return c.summary.selection.f1; };
  auto selected = [](const CellResult& c) {
    return static_cast<double>(c.summary.n_selected) / static_cast<double>(std::max<std::size_t>(1, c.summary.n_samples));
  };

  std::string csv = "cell,selection,augmented_entropy,method,mean_accuracy,mean_selection_f1";
  for (auto s : config.seeds) csv += ",accuracy_seed_" + std::to_string(s);
  csv += "\n";
  for (std::size_t g = 0; g < 4; ++g) {
    csv += std::string(grid[g].name) + "," + (grid[g].selection ? "1" : "0") + "," + (grid[g].augmented ? "1" : "0") +
           "," + std::string(adapt::method_kind_name(methods[g].kind)) + "," + num(mean_of(g, accuracy)) + "," +
           num(mean_of(g, f1));
    for (std::size_t s = 0; s < ns; ++s) csv += "," + num(cells[g * ns + s].summary.online_accuracy);
    csv += "\n";
    log << grid[g].name << ": mean accuracy " << num(mean_of(g, accuracy)) << "\n";
  }
  write_file(out_dir / "ablation_grid.csv", csv);

  std::string lcsv = "lambda,mean_accuracy,mean_selection_f1,mean_selected_fraction\n";
  std::size_t m = 4;
  for (double l : config.ablation.lambda_values) {
    lcsv += num(l) + "," + num(mean_of(m, accuracy)) + "," + num(mean_of(m, f1)) + "," + num(mean_of(m, selected)) + "\n";
    ++m;
  }
  write_file(out_dir / "lambda_sweep.csv", lcsv);
  std::string rcsv = "rho,mean_accuracy,mean_selection_f1,mean_selected_fraction\n";
  for (double r : config.ablation.rho_values) {
    rcsv += num(r) + "," + num(mean_of(m, accuracy)) + "," + num(mean_of(m, f1)) + "," + num(mean_of(m, selected)) + "\n";
    ++m;
  }
  write_file(out_dir / "rho_sweep.csv", rcsv);
  write_file(out_dir / "resolved_config.json", resolved_json(config).dump(2) + "\n");
  return 0;
}

std::vector<TimingRow> run_timing(const RunConfig& config) {
  RunConfig tc = config;
  tc.stream.num_batches = std::max<std::size_t>(1, (config.timing.num_samples + tc.stream.batch_size - 1) / tc.stream.batch_size);
  const Prepared p = prepare(tc, config.seeds.front());
  std::vector<MethodConfig> methods;
  for (MethodKind k : {MethodKind::NoAdapt, MethodKind::Tent, MethodKind::EntropySelect, MethodKind::Seva})
    methods.push_back(method_template(config, k));
  for (std::size_t r : config.timing.explicit_rounds) {
    MethodConfig m = method_template(config, MethodKind::ExplicitVA);
    m.rounds = r;
    methods.push_back(m);
  }
  std::vector<TimingRow> rows;
  for (auto& m : methods) {
    m.lr = config.timing.lr;
    const CellResult cell = run_cell(tc, p, m);
    TimingRow row;
    row.label = method_label(m);
    row.counters = cell.report.counters;
    row.num_batches = cell.steps.size();
    for (const auto& s : cell.steps) row.updated_batches += s.updated;
    row.adaptation_seconds = cell.report.adaptation_seconds;
    rows.push_back(row);
  }
  return rows;
}

int cmd_time(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log) {
  std::filesystem::create_directories(out_dir);
  const auto rows = run_timing(config);
  std::string csv =
      "method,num_batches,updated_batches,forward_passes,backward_passes,optimizer_steps,sample_forwards,"
      "sample_backwards,steps_per_updated_batch,adaptation_seconds,seconds_per_batch\n";
  log << std::left << std::setw(16) << "method" << std::setw(10) << "updated" << std::setw(10) << "backward"
      << std::setw(10) << "steps" << std::setw(14) << "seconds" << "ms/batch\n";
  for (const auto& r : rows) {
    const double per_update = r.updated_batches ? static_cast<double>(r.counters.optimizer_steps) / r.updated_batches : 0.0;
    const double per_batch = r.adaptation_seconds / static_cast<double>(std::max<std::size_t>(1, r.num_batches));
    csv += r.label + "," + std::to_string(r.num_batches) + "," + std::to_string(r.updated_batches) + "," +
           std::to_string(r.counters.forward_passes) + "," + std::to_string(r.counters.backward_passes) + "," +
           std::to_string(r.counters.optimizer_steps) + "," + std::to_string(r.counters.sample_forwards) + "," +
           std::to_string(r.counters.sample_backwards) + "," + num(per_update) + "," + num(r.adaptation_seconds) +
           "," + num(per_batch) + "\n";
    log << std::left << std::setw(16) << r.label << std::setw(10) << r.updated_batches << std::setw(10)
        << r.counters.backward_passes << std::setw(10) << r.counters.optimizer_steps << std::setw(14)
        << num(r.adaptation_seconds) << num(per_batch * 1e3) << "\n";
  }
  write_file(out_dir / "timing.csv", csv);
  return 0;
}

int main_entry(int argc, char** argv) {
  CLI::App app{"Vicinal-entropy test-time adaptation experiments"};
  app.require_subcommand(1);
  std::string config_path, out;
  bool fast = false;
  std::size_t seeds = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--out", out, "Output directory (SEVA_OUT_DIR takes precedence)");
    sub->add_flag("--fast", fast, "Monte-Carlo fast mode");
    sub->add_option("--seeds", seeds, "Use master seeds 0..N-1")->check(CLI::PositiveNumber);
  };
  auto* run = app.add_subcommand("run", "Run every (method x seed) cell");
  auto* verify = app.add_subcommand("verify-bounds", "Monte-Carlo certification of the entropy bound");
  auto* ablate = app.add_subcommand("ablate", "Component grid plus lambda and rho sweeps");
  auto* timing = app.add_subcommand("time", "Wall time and pass counters per method");
  for (auto* s : {run, verify, ablate, timing}) add_common(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  RunConfig config;
  try {
    config = load_config(config_path);
    if (fast) config.mc_mode = McMode::Fast;
    if (seeds > 0) {
      config.seeds.clear();
      for (std::uint64_t s = 0; s < seeds; ++s) config.seeds.push_back(s);
    }
  } catch (const ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << "\n";
    return 2;
  }

  try {
    const auto dir = resolve_output_dir(config, out);
    if (*run) return cmd_run(config, dir, std::cout);
    if (*verify) return cmd_verify_bounds(config, std::cout);
    if (*ablate) return cmd_ablate(config, dir, std::cout);
    return cmd_time(config, dir, std::cout);
  } catch (const ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace seva::cli
