#ifndef CRVKIT_RUNNER_HPP
#define CRVKIT_RUNNER_HPP

// Command-line front end: CSV input/output, JSON run configuration with
// strict key checking, and the fit / test / simulate drivers that produce
// serialized reports. Header-only like the rest of the library; the tool
// binary is a thin argument-parsing shim over run_command.

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "crvkit/crve.hpp"
#include "crvkit/csv.hpp"
#include "crvkit/estimator.hpp"
#include "crvkit/inference.hpp"
#include "crvkit/model_frame.hpp"
#include "crvkit/simlab.hpp"
#include "crvkit/table.hpp"

namespace crvkit {

using OrderedJson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// JSON serialization at 17 significant digits. Non-finite numbers have no
// JSON representation and are written as the strings "inf"/"-inf"/"nan" so
// degrees of freedom are never silently dropped.

namespace detail {

inline void dump_json(const OrderedJson& j, std::string& out, int depth) {
  const std::string pad(static_cast<std::size_t>(depth) * 2, ' ');
  const std::string pad_in(static_cast<std::size_t>(depth + 1) * 2, ' ');
  switch (j.type()) {
    case OrderedJson::value_t::null:
      out += "null";
      break;
    case OrderedJson::value_t::boolean:
      out += j.get<bool>() ? "true" : "false";
      break;
    case OrderedJson::value_t::number_integer:
      out += std::to_string(j.get<long long>());
      break;
    case OrderedJson::value_t::number_unsigned:
      out += std::to_string(j.get<unsigned long long>());
      break;
    case OrderedJson::value_t::number_float: {
      const double v = j.get<double>();
      if (std::isfinite(v))
        out += format_number(v, 17);
      else
        out += std::isnan(v) ? "\"nan\"" : (v > 0 ? "\"inf\"" : "\"-inf\"");
      break;
    }
    case OrderedJson::value_t::string:
      out += j.dump();  // quoted and escaped
      break;
    case OrderedJson::value_t::array: {
      if (j.empty()) {
        out += "[]";
        break;
      }
      out += "[\n";
      for (std::size_t i = 0; i < j.size(); ++i) {
        out += pad_in;
        dump_json(j[i], out, depth + 1);
        if (i + 1 < j.size()) out += ",";
        out += "\n";
      }
      out += pad + "]";
      break;
    }
    default: {  // object
      if (j.empty()) {
        out += "{}";
        break;
      }
      out += "{\n";
      std::size_t i = 0;
      for (const auto& item : j.items()) {
        out += pad_in + OrderedJson(item.key()).dump() + ": ";
        dump_json(item.value(), out, depth + 1);
        if (++i < j.size()) out += ",";
        out += "\n";
      }
      out += pad + "}";
      break;
    }
  }
}

}  // namespace detail

inline std::string serialize_report(const OrderedJson& j) {
  std::string out;
  detail::dump_json(j, out, 0);
  out += "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Run configuration.

struct WorkingSpec {
  std::string kind = "identity";  // identity | compound_symmetric
  double rho = 0.0;               // used when estimate_rho is false
  bool estimate_rho = false;      // fit rho from first-stage residuals
};

struct TestSpec {
  std::string name;
  std::vector<std::string> coefficients;           // H0: all listed coefficients zero
  std::vector<std::map<std::string, double>> rows; // or general rows by coefficient name
  std::vector<double> rhs;                         // one entry per row; zeros when absent
};

struct AnalysisConfig {
  std::string data;
  ModelSpec model;
  bool intercept = true;  // prepend a constant absorbed column
  WorkingSpec working;
  std::string vcov = "CR2";
  TestMethod method = TestMethod::AHT;
  std::vector<TestSpec> tests;
  std::string output = "json";
};

struct SimulateConfig {
  ExperimentConfig experiment;
  std::string emit_dataset;  // optional: write the first cell's replicate-0 dataset here
};

struct RunConfig {
  std::string command;  // fit | test | simulate
  AnalysisConfig analysis;
  SimulateConfig sim;
};

inline bool operator==(const ModelSpec& a, const ModelSpec& b) {
  return a.outcome == b.outcome && a.covariates == b.covariates &&
         a.absorb_between == b.absorb_between && a.absorb_within == b.absorb_within &&
         a.cluster == b.cluster && a.weights == b.weights;
}

inline bool operator==(const WorkingSpec& a, const WorkingSpec& b) {
  return a.kind == b.kind && a.rho == b.rho && a.estimate_rho == b.estimate_rho;
}

inline bool operator==(const TestSpec& a, const TestSpec& b) {
  return a.name == b.name && a.coefficients == b.coefficients && a.rows == b.rows &&
         a.rhs == b.rhs;
}

inline bool operator==(const AnalysisConfig& a, const AnalysisConfig& b) {
  return a.data == b.data && a.model == b.model && a.intercept == b.intercept &&
         a.working == b.working && a.vcov == b.vcov && a.method == b.method &&
         a.tests == b.tests && a.output == b.output;
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return a.designs == b.designs && a.cluster_counts == b.cluster_counts &&
         a.cluster_sizes == b.cluster_sizes && a.tau2 == b.tau2 && a.rho == b.rho &&
         a.sigma_delta2 == b.sigma_delta2 && a.methods == b.methods && a.alphas == b.alphas &&
         a.reps == b.reps && a.seed == b.seed && a.threads == b.threads &&
         a.per_outcome_periods == b.per_outcome_periods;
}

inline bool operator==(const SimulateConfig& a, const SimulateConfig& b) {
  return a.experiment == b.experiment && a.emit_dataset == b.emit_dataset;
}

inline bool operator==(const RunConfig& a, const RunConfig& b) {
  return a.command == b.command && a.analysis == b.analysis && a.sim == b.sim;
}

// ---------------------------------------------------------------------------
// Config parsing: unknown keys and type mismatches are configuration errors
// that name the offending key path.

namespace detail {

inline std::string key_path(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}

inline void check_keys(const OrderedJson& obj, const std::string& base,
                       std::initializer_list<const char*> allowed) {
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw Error(ErrorCode::ConfigError, "unknown key '" + key_path(base, item.key()) + "'");
  }
}

inline const OrderedJson* find_key(const OrderedJson& obj, const char* key) {
  const auto it = obj.find(key);
  return it == obj.end() ? nullptr : &it.value();
}

[[noreturn]] inline void type_error(const std::string& path, const char* want) {
  throw Error(ErrorCode::ConfigError, "expected " + std::string(want) + " at '" + path + "'");
}

inline std::string get_string(const OrderedJson& obj, const std::string& base, const char* key,
                              const std::string& fallback) {
  const OrderedJson* v = find_key(obj, key);
  if (!v) return fallback;
  if (!v->is_string()) type_error(key_path(base, key), "a string");
  return v->get<std::string>();
}

inline bool get_bool(const OrderedJson& obj, const std::string& base, const char* key,
                     bool fallback) {
  const OrderedJson* v = find_key(obj, key);
  if (!v) return fallback;
  if (!v->is_boolean()) type_error(key_path(base, key), "a boolean");
  return v->get<bool>();
}

inline double json_number(const OrderedJson& v, const std::string& path) {
  if (!v.is_number()) type_error(path, "a number");
  return v.get<double>();
}

inline long long json_integer(const OrderedJson& v, const std::string& path) {
  if (!v.is_number_integer() && !v.is_number_unsigned()) type_error(path, "an integer");
  return v.get<long long>();
}

inline Index get_count(const OrderedJson& obj, const std::string& base, const char* key,
                       Index fallback) {
  const OrderedJson* v = find_key(obj, key);
  if (!v) return fallback;
  const long long n = json_integer(*v, key_path(base, key));
  if (n < 1) throw Error(ErrorCode::ConfigError, "'" + key_path(base, key) + "' must be positive");
  return static_cast<Index>(n);
}

inline std::uint64_t get_seed(const OrderedJson& obj, const std::string& base, const char* key,
                              std::uint64_t fallback) {
  const OrderedJson* v = find_key(obj, key);
  if (!v) return fallback;
  if (v->is_number_unsigned()) return v->get<std::uint64_t>();
  if (v->is_number_integer() && v->get<long long>() >= 0)
    return static_cast<std::uint64_t>(v->get<long long>());
  throw Error(ErrorCode::ConfigError,
              "expected a non-negative integer at '" + key_path(base, key) + "'");
}

inline const OrderedJson* get_array(const OrderedJson& obj, const std::string& base,
                                    const char* key) {
  const OrderedJson* v = find_key(obj, key);
  if (!v) return nullptr;
  if (!v->is_array()) type_error(key_path(base, key), "an array");
  return v;
}

inline std::vector<std::string> get_string_array(const OrderedJson& obj, const std::string& base,
                                                 const char* key,
                                                 std::vector<std::string> fallback) {
  const OrderedJson* v = get_array(obj, base, key);
  if (!v) return fallback;
  std::vector<std::string> out;
  for (const auto& e : *v) {
    if (!e.is_string()) type_error(key_path(base, key), "an array of strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

inline std::vector<double> get_number_array(const OrderedJson& obj, const std::string& base,
                                            const char* key, std::vector<double> fallback) {
  const OrderedJson* v = get_array(obj, base, key);
  if (!v) return fallback;
  std::vector<double> out;
  for (const auto& e : *v) out.push_back(json_number(e, key_path(base, key)));
  return out;
}

inline TestMethod parse_method(const std::string& name, const std::string& path) {
  if (name == "AHT") return TestMethod::AHT;
  if (name == "Standard") return TestMethod::Standard;
  if (name == "Chi2") return TestMethod::Chi2;
  throw Error(ErrorCode::ConfigError, "unknown method '" + name + "' at '" + path +
                                          "' (expected AHT, Standard, or Chi2)");
}

inline void require_known_vcov(const std::string& v) {
  for (const char* k : {"CR0", "CR1", "CR1S", "CR2", "CR3"})
    if (v == k) return;
  throw Error(ErrorCode::ConfigError,
              "unknown vcov kind '" + v + "' (expected CR0, CR1, CR1S, CR2, or CR3)");
}

inline WorkingSpec parse_working(const OrderedJson& obj, const std::string& base) {
  if (!obj.is_object()) type_error(base, "an object");
  check_keys(obj, base, {"kind", "rho"});
  WorkingSpec w;
  w.kind = get_string(obj, base, "kind", "identity");
  const OrderedJson* rho = find_key(obj, "rho");
  if (w.kind == "identity") {
    if (rho)
      throw Error(ErrorCode::ConfigError, "'" + key_path(base, "rho") +
                                              "' applies only to the compound_symmetric kind");
  } else if (w.kind == "compound_symmetric") {
    if (!rho)
      throw Error(ErrorCode::ConfigError,
                  "'" + key_path(base, "rho") + "' is required for compound_symmetric "
                  "(a number or \"estimate\")");
    if (rho->is_string()) {
      if (rho->get<std::string>() != "estimate")
        throw Error(ErrorCode::ConfigError,
                    "'" + key_path(base, "rho") + "' must be a number or \"estimate\"");
      w.estimate_rho = true;
    } else {
      w.rho = json_number(*rho, key_path(base, "rho"));
      if (!(w.rho > -1.0 && w.rho < 1.0))
        throw Error(ErrorCode::ConfigError,
                    "'" + key_path(base, "rho") + "' must lie strictly between -1 and 1");
    }
  } else {
    throw Error(ErrorCode::ConfigError, "unknown working model kind '" + w.kind +
                                            "' (expected identity or compound_symmetric)");
  }
  return w;
}

inline void require_coefficient(const std::string& test_name, const std::string& coef,
                                const std::vector<std::string>& covariates) {
  for (const auto& c : covariates)
    if (c == coef) return;
  throw Error(ErrorCode::ConfigError,
              "test '" + test_name + "' references unknown coefficient '" + coef + "'");
}

inline std::vector<TestSpec> parse_tests(const OrderedJson& arr, const std::string& base,
                                         const std::vector<std::string>& covariates) {
  std::vector<TestSpec> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string path = base + "[" + std::to_string(i) + "]";
    const OrderedJson& obj = arr[i];
    if (!obj.is_object()) type_error(path, "an object");
    check_keys(obj, path, {"name", "coefficients", "rows", "rhs"});
    TestSpec t;
    t.name = get_string(obj, path, "name", "");
    if (t.name.empty())
      throw Error(ErrorCode::ConfigError, "'" + key_path(path, "name") + "' is required");
    for (const TestSpec& prev : out)
      if (prev.name == t.name)
        throw Error(ErrorCode::ConfigError, "duplicate test name '" + t.name + "'");
    const OrderedJson* coefs = get_array(obj, path, "coefficients");
    const OrderedJson* rows = get_array(obj, path, "rows");
    if ((coefs == nullptr) == (rows == nullptr))
      throw Error(ErrorCode::ConfigError,
                  "test '" + t.name + "' needs exactly one of 'coefficients' or 'rows'");
    if (coefs) {
      t.coefficients = get_string_array(obj, path, "coefficients", {});
      if (t.coefficients.empty())
        throw Error(ErrorCode::ConfigError, "test '" + t.name + "' lists no coefficients");
      if (find_key(obj, "rhs"))
        throw Error(ErrorCode::ConfigError,
                    "'" + key_path(path, "rhs") + "' applies only to the 'rows' form");
      for (const auto& c : t.coefficients) require_coefficient(t.name, c, covariates);
    } else {
      for (std::size_t r = 0; r < rows->size(); ++r) {
        const OrderedJson& row = (*rows)[r];
        const std::string rpath = key_path(path, "rows") + "[" + std::to_string(r) + "]";
        if (!row.is_object() || row.empty()) type_error(rpath, "a non-empty object");
        std::map<std::string, double> coef;
        for (const auto& item : row.items()) {
          require_coefficient(t.name, item.key(), covariates);
          coef[item.key()] = json_number(item.value(), key_path(rpath, item.key()));
        }
        t.rows.push_back(std::move(coef));
      }
      if (t.rows.empty())
        throw Error(ErrorCode::ConfigError, "test '" + t.name + "' lists no rows");
      t.rhs = get_number_array(obj, path, "rhs", std::vector<double>(t.rows.size(), 0.0));
      if (t.rhs.size() != t.rows.size())
        throw Error(ErrorCode::ConfigError, "test '" + t.name + "' has " +
                                                std::to_string(t.rhs.size()) + " rhs entries for " +
                                                std::to_string(t.rows.size()) + " rows");
    }
    out.push_back(std::move(t));
  }
  return out;
}

inline void parse_analysis(const OrderedJson& doc, RunConfig& rc) {
  check_keys(doc, "",
             {"command", "data", "model", "working_model", "vcov", "method", "tests", "output"});
  AnalysisConfig& a = rc.analysis;
  a.data = get_string(doc, "", "data", "");
  if (a.data.empty()) throw Error(ErrorCode::ConfigError, "'data' is required");

  const OrderedJson* model = find_key(doc, "model");
  if (!model) throw Error(ErrorCode::ConfigError, "'model' is required");
  if (!model->is_object()) type_error("model", "an object");
  check_keys(*model, "model",
             {"outcome", "covariates", "absorb_between", "absorb_within", "cluster", "weights",
              "intercept"});
  a.model.outcome = get_string(*model, "model", "outcome", "");
  a.model.cluster = get_string(*model, "model", "cluster", "");
  if (a.model.outcome.empty() || a.model.cluster.empty())
    throw Error(ErrorCode::ConfigError, "'model.outcome' and 'model.cluster' are required");
  a.model.covariates = get_string_array(*model, "model", "covariates", {});
  if (a.model.covariates.empty())
    throw Error(ErrorCode::ConfigError, "'model.covariates' must list at least one column");
  a.model.absorb_between = get_string_array(*model, "model", "absorb_between", {});
  a.model.absorb_within = get_string_array(*model, "model", "absorb_within", {});
  a.model.weights = get_string(*model, "model", "weights", "");
  a.intercept = get_bool(*model, "model", "intercept", true);

  if (const OrderedJson* w = find_key(doc, "working_model"))
    a.working = parse_working(*w, "working_model");
  a.vcov = get_string(doc, "", "vcov", "CR2");
  require_known_vcov(a.vcov);
  a.method = parse_method(get_string(doc, "", "method", "AHT"), "method");
  if (const OrderedJson* tests = get_array(doc, "", "tests"))
    a.tests = parse_tests(*tests, "tests", a.model.covariates);
  if (rc.command == "test" && a.tests.empty())
    throw Error(ErrorCode::ConfigError, "the test command requires a non-empty 'tests' list");
  a.output = get_string(doc, "", "output", "json");
  if (a.output != "json" && a.output != "csv")
    throw Error(ErrorCode::ConfigError, "'output' must be json or csv");
}

inline void parse_simulate(const OrderedJson& doc, RunConfig& rc) {
  check_keys(doc, "",
             {"command", "designs", "cluster_counts", "cluster_sizes", "tau2", "rho",
              "sigma_delta2", "methods", "alphas", "reps", "seed", "per_outcome_periods",
              "full_grid", "emit_dataset"});
  ExperimentConfig& e = rc.sim.experiment;
  if (get_bool(doc, "", "full_grid", false)) e = ExperimentConfig::full_grid();

  if (const OrderedJson* v = get_array(doc, "", "designs")) {
    e.designs.clear();
    for (const auto& d : *v) e.designs.push_back(static_cast<int>(json_integer(d, "designs")));
  }
  if (const OrderedJson* v = get_array(doc, "", "cluster_counts")) {
    e.cluster_counts.clear();
    for (const auto& d : *v)
      e.cluster_counts.push_back(static_cast<Index>(json_integer(d, "cluster_counts")));
  }
  if (const OrderedJson* v = get_array(doc, "", "cluster_sizes")) {
    e.cluster_sizes.clear();
    for (const auto& d : *v)
      e.cluster_sizes.push_back(static_cast<Index>(json_integer(d, "cluster_sizes")));
  }
  e.tau2 = get_number_array(doc, "", "tau2", e.tau2);
  e.rho = get_number_array(doc, "", "rho", e.rho);
  e.sigma_delta2 = get_number_array(doc, "", "sigma_delta2", e.sigma_delta2);
  if (const OrderedJson* v = get_array(doc, "", "methods")) {
    e.methods.clear();
    for (const auto& sname : *v) {
      if (!sname.is_string()) type_error("methods", "an array of strings");
      e.methods.push_back(parse_method(sname.get<std::string>(), "methods"));
    }
  }
  e.alphas = get_number_array(doc, "", "alphas", e.alphas);
  e.reps = get_count(doc, "", "reps", e.reps);
  e.seed = get_seed(doc, "", "seed", e.seed);
  e.per_outcome_periods = get_bool(doc, "", "per_outcome_periods", e.per_outcome_periods);
  rc.sim.emit_dataset = get_string(doc, "", "emit_dataset", "");
  e.validate();
}

}  // namespace detail

inline RunConfig parse_config(const OrderedJson& doc, const std::string& command = "") {
  if (!doc.is_object())
    throw Error(ErrorCode::ConfigError, "config must be a JSON object");
  std::string cmd = detail::get_string(doc, "", "command", "");
  if (!command.empty()) {
    if (!cmd.empty() && cmd != command)
      throw Error(ErrorCode::ConfigError, "config command '" + cmd +
                                              "' does not match the invoked subcommand '" +
                                              command + "'");
    cmd = command;
  }
  if (cmd.empty())
    throw Error(ErrorCode::ConfigError,
                "no command: set \"command\" in the config or invoke a subcommand");
  RunConfig rc;
  rc.command = cmd;
  if (cmd == "fit" || cmd == "test")
    detail::parse_analysis(doc, rc);
  else if (cmd == "simulate")
    detail::parse_simulate(doc, rc);
  else
    throw Error(ErrorCode::ConfigError,
                "unknown command '" + cmd + "' (expected fit, test, or simulate)");
  return rc;
}

inline RunConfig parse_config_text(const std::string& text, const std::string& command = "") {
  OrderedJson doc;
  try {
    doc = OrderedJson::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(doc, command);
}

inline RunConfig load_config(const std::string& path, const std::string& command = "") {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::ConfigError, "cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), command);
}

inline OrderedJson serialize_config(const RunConfig& c) {
  OrderedJson j;
  j["command"] = c.command;
  if (c.command == "simulate") {
    const ExperimentConfig& e = c.sim.experiment;
    j["designs"] = e.designs;
    j["cluster_counts"] = e.cluster_counts;
    j["cluster_sizes"] = e.cluster_sizes;
    j["tau2"] = e.tau2;
    j["rho"] = e.rho;
    j["sigma_delta2"] = e.sigma_delta2;
    OrderedJson methods = OrderedJson::array();
    for (TestMethod m : e.methods) methods.push_back(test_method_name(m));
    j["methods"] = std::move(methods);
    j["alphas"] = e.alphas;
    j["reps"] = e.reps;
    j["seed"] = e.seed;
    j["per_outcome_periods"] = e.per_outcome_periods;
    if (!c.sim.emit_dataset.empty()) j["emit_dataset"] = c.sim.emit_dataset;
    return j;
  }
  const AnalysisConfig& a = c.analysis;
  j["data"] = a.data;
  OrderedJson model;
  model["outcome"] = a.model.outcome;
  model["covariates"] = a.model.covariates;
  model["absorb_between"] = a.model.absorb_between;
  model["absorb_within"] = a.model.absorb_within;
  model["cluster"] = a.model.cluster;
  if (!a.model.weights.empty()) model["weights"] = a.model.weights;
  model["intercept"] = a.intercept;
  j["model"] = std::move(model);
  OrderedJson working;
  working["kind"] = a.working.kind;
  if (a.working.kind == "compound_symmetric") {
    if (a.working.estimate_rho)
      working["rho"] = "estimate";
    else
      working["rho"] = a.working.rho;
  }
  j["working_model"] = std::move(working);
  j["vcov"] = a.vcov;
  j["method"] = test_method_name(a.method);
  if (!a.tests.empty()) {
    OrderedJson tests = OrderedJson::array();
    for (const TestSpec& t : a.tests) {
      OrderedJson obj;
      obj["name"] = t.name;
      if (!t.coefficients.empty()) {
        obj["coefficients"] = t.coefficients;
      } else {
        OrderedJson rows = OrderedJson::array();
        for (const auto& row : t.rows) {
          OrderedJson r;
          for (const auto& [k, v] : row) r[k] = v;
          rows.push_back(std::move(r));
        }
        obj["rows"] = std::move(rows);
        obj["rhs"] = t.rhs;
      }
      tests.push_back(std::move(obj));
    }
    j["tests"] = std::move(tests);
  }
  j["output"] = a.output;
  return j;
}

// ---------------------------------------------------------------------------
// Analysis drivers.

namespace detail {

inline void add_intercept_column(ClusteredDesign& d) {
  for (ClusterBlock& b : d.clusters) {
    MatrixXd s(b.n(), d.s + 1);
    s.col(0).setOnes();
    if (d.s > 0) s.rightCols(d.s) = b.S;
    b.S = std::move(s);
  }
  d.s += 1;
  d.s_column_names.insert(d.s_column_names.begin(), "intercept");
}

inline AdjustmentKind adjustment_kind(const std::string& vcov, const WorkingModel& wm) {
  if (vcov == "CR0") return AdjustmentKind::cr0();
  if (vcov == "CR1") return AdjustmentKind::cr1();
  if (vcov == "CR1S") return AdjustmentKind::cr1s();
  if (vcov == "CR3") return AdjustmentKind::cr3();
  return AdjustmentKind::cr2(wm);
}

struct FittedAnalysis {
  Table data;
  ClusteredDesign design;
  FitResult fitres;
  WorkingModel working;
  double rho_used = 0.0;
  RobustVariance v;
  std::vector<SymMatrix> phi;
};

inline FittedAnalysis fit_analysis(const AnalysisConfig& a) {
  FittedAnalysis out;
  out.data = read_csv(a.data);
  out.design = build_design(out.data, a.model);
  if (a.intercept) add_intercept_column(out.design);
  out.fitres = fit(out.design);
  if (a.working.kind == "compound_symmetric") {
    out.rho_used = a.working.estimate_rho ? estimate_rho(out.fitres.residuals) : a.working.rho;
    out.working = WorkingModel::compound_symmetric(out.rho_used);
  } else {
    out.working = WorkingModel::identity();
  }
  out.v = vcov(out.fitres, adjustment_kind(a.vcov, out.working));
  out.phi = working_covariance(out.working, out.design);
  return out;
}

inline OrderedJson working_json(const AnalysisConfig& a, const FittedAnalysis& f) {
  OrderedJson w;
  w["kind"] = a.working.kind;
  if (a.working.kind == "compound_symmetric") {
    w["rho"] = f.rho_used;
    if (a.working.estimate_rho) w["rho_estimated"] = true;
  }
  return w;
}

inline OrderedJson report_header(const char* command, const AnalysisConfig& a,
                                 const FittedAnalysis& f) {
  OrderedJson rep;
  rep["command"] = command;
  rep["data"] = a.data;
  rep["outcome"] = a.model.outcome;
  rep["n_rows"] = f.design.total_rows();
  rep["n_clusters"] = f.design.m();
  rep["vcov"] = a.vcov;
  rep["working_model"] = working_json(a, f);
  rep["dropped_columns"] = f.fitres.absorbed.dropped_columns;
  return rep;
}

inline std::string error_message(const Error& e) {
  std::string s = e.what();
  const std::string prefix = std::string(error_code_name(e.code())) + ": ";
  return s.rfind(prefix, 0) == 0 ? s.substr(prefix.size()) : s;
}

inline Constraint resolve_constraint(const TestSpec& t, const std::vector<std::string>& names) {
  std::map<std::string, Index> pos;
  for (std::size_t i = 0; i < names.size(); ++i) pos[names[i]] = static_cast<Index>(i);
  const Index r = static_cast<Index>(names.size());
  if (!t.coefficients.empty()) {
    std::vector<Index> idx;
    for (const auto& c : t.coefficients) idx.push_back(pos.at(c));
    return Constraint::zero_coefficients(idx, r);
  }
  MatrixXd C = MatrixXd::Zero(static_cast<Index>(t.rows.size()), r);
  VectorXd d = VectorXd::Zero(static_cast<Index>(t.rows.size()));
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    for (const auto& [name, val] : t.rows[i]) C(static_cast<Index>(i), pos.at(name)) = val;
    if (i < t.rhs.size()) d(static_cast<Index>(i)) = t.rhs[i];
  }
  return Constraint::rows(std::move(C), std::move(d));
}

}  // namespace detail

// Coefficient table: estimate, cluster-robust standard error, Satterthwaite
// degrees of freedom under the working model, and the two-sided t p-value.
inline OrderedJson run_fit(const RunConfig& cfg) {
  const AnalysisConfig& a = cfg.analysis;
  detail::FittedAnalysis f = detail::fit_analysis(a);
  OrderedJson rep = detail::report_header("fit", a, f);
  OrderedJson coefs = OrderedJson::array();
  for (Index j = 0; j < f.design.r; ++j) {
    const std::string& name = f.design.column_names[static_cast<std::size_t>(j)];
    const double est = f.fitres.beta(j);
    const double var = f.v.V.mat()(j, j);
    if (!(var > 0.0))
      throw Error(ErrorCode::DegenerateVariance,
                  "coefficient '" + name + "' has a non-positive variance estimate");
    const double se = std::sqrt(var);
    VectorXd c = VectorXd::Zero(f.design.r);
    c(j) = 1.0;
    const double df = satterthwaite_df_with(f.fitres, f.v.adjustments, f.phi, c);
    const double t = est / se;
    OrderedJson row;
    row["name"] = name;
    row["estimate"] = est;
    row["std_error"] = se;
    row["df"] = df;
    row["t"] = t;
    row["p"] = f_sf(t * t, 1.0, df);
    coefs.push_back(std::move(row));
  }
  rep["coefficients"] = std::move(coefs);
  return rep;
}

// Wald tests of the configured constraints with the configured reference
// distribution. Degrees of freedom always accompany the p-value; the chi2
// method reports an infinite denominator df explicitly.
inline OrderedJson run_test(const RunConfig& cfg) {
  const AnalysisConfig& a = cfg.analysis;
  detail::FittedAnalysis f = detail::fit_analysis(a);
  OrderedJson rep = detail::report_header("test", a, f);
  rep["method"] = test_method_name(a.method);
  OrderedJson tests = OrderedJson::array();
  for (const TestSpec& spec : a.tests) {
    try {
      const Constraint con = detail::resolve_constraint(spec, f.design.column_names);
      const double Q = wald_statistic(f.fitres.beta, f.v.V, con);
      TestResult res;
      switch (a.method) {
        case TestMethod::AHT:
          res = aht_test(Q, con.q(), aht_df_with(f.fitres, f.v.adjustments, f.phi, con).eta);
          break;
        case TestMethod::Standard:
          res = standard_test(Q, con.q(), f.design.m());
          break;
        case TestMethod::Chi2:
          res = chi2_test(Q, con.q());
          break;
      }
      OrderedJson row;
      row["name"] = spec.name;
      row["q"] = res.q;
      row["Q"] = res.Q;
      row["Fstat"] = res.Fstat;
      row["df_num"] = res.df_num;
      row["df_denom"] = res.df_denom;
      if (a.method == TestMethod::AHT) row["eta"] = res.eta;
      row["p"] = res.p;
      tests.push_back(std::move(row));
    } catch (const Error& e) {
      throw Error(e.code(), "test '" + spec.name + "': " + detail::error_message(e));
    }
  }
  rep["tests"] = std::move(tests);
  return rep;
}

// Flatten the coefficient or test rows of a report into a table for CSV
// output.
inline Table report_table(const OrderedJson& report) {
  const char* key = report.contains("coefficients") ? "coefficients" : "tests";
  if (!report.contains(key))
    throw Error(ErrorCode::InvalidInput, "report has no tabular section");
  const OrderedJson& rows = report[key];
  Table t;
  if (rows.empty()) return t;
  for (const auto& item : rows[0].items()) {
    const std::string& name = item.key();
    bool numeric = true;
    for (const auto& row : rows)
      if (!row.at(name).is_number()) {
        numeric = false;
        break;
      }
    if (numeric) {
      std::vector<double> v;
      for (const auto& row : rows) v.push_back(row.at(name).get<double>());
      t.add_numeric(name, std::move(v));
    } else {
      std::vector<std::string> v;
      for (const auto& row : rows) {
        const OrderedJson& cell = row.at(name);
        v.push_back(cell.is_string() ? cell.get<std::string>() : cell.dump());
      }
      t.add_text(name, std::move(v));
    }
  }
  return t;
}

// Rejection-rate table in the documented column order.
inline Table rejection_table(const std::vector<RejectionRow>& rows) {
  const std::size_t n = rows.size();
  std::vector<double> design(n), m(n), nn(n), tau2(n), rho(n), sd2(n), q(n), alpha(n), reps(n),
      failures(n), rate(n), mc_se(n);
  std::vector<std::string> hypothesis(n), method(n);
  for (std::size_t i = 0; i < n; ++i) {
    const RejectionRow& r = rows[i];
    design[i] = r.design;
    m[i] = static_cast<double>(r.m);
    nn[i] = static_cast<double>(r.n);
    tau2[i] = r.tau2;
    rho[i] = r.rho;
    sd2[i] = r.sigma_delta2;
    hypothesis[i] = r.hypothesis;
    q[i] = static_cast<double>(r.q);
    method[i] = test_method_name(r.method);
    alpha[i] = r.alpha;
    reps[i] = static_cast<double>(r.reps);
    failures[i] = static_cast<double>(r.failures);
    rate[i] = r.reject_rate;
    mc_se[i] = r.mc_se;
  }
  Table t;
  t.add_numeric("design", std::move(design));
  t.add_numeric("m", std::move(m));
  t.add_numeric("n", std::move(nn));
  t.add_numeric("tau2", std::move(tau2));
  t.add_numeric("rho", std::move(rho));
  t.add_numeric("sigma_delta2", std::move(sd2));
  t.add_text("hypothesis", std::move(hypothesis));
  t.add_numeric("q", std::move(q));
  t.add_text("method", std::move(method));
  t.add_numeric("alpha", std::move(alpha));
  t.add_numeric("reps", std::move(reps));
  t.add_numeric("failures", std::move(failures));
  t.add_numeric("reject_rate", std::move(rate));
  t.add_numeric("mc_se", std::move(mc_se));
  return t;
}

inline Table run_simulate(const RunConfig& cfg) {
  const ExperimentConfig& e = cfg.sim.experiment;
  e.validate();
  if (!cfg.sim.emit_dataset.empty()) {
    SimParams p;
    p.tau2 = e.tau2[0];
    p.rho = e.rho[0];
    p.sigma_delta2 = e.sigma_delta2[0];
    p.reps = e.reps;
    p.seed = e.seed;
    p.alphas = e.alphas;
    const SimDesign d = make_design(e.designs[0], e.cluster_counts[0], e.cluster_sizes[0]);
    write_csv_file(simulate_outcomes(d, p, 0), cfg.sim.emit_dataset);
  }
  return rejection_table(run_experiment(e));
}

// ---------------------------------------------------------------------------
// Orchestration shared by the tool binary and the end-to-end tests. Thread
// count comes from the --threads flag when given, else the CRVKIT_THREADS
// environment variable, else one.

struct RunOptions {
  std::string config_path;
  std::string out_path;  // empty: write to the out stream
  int threads = 0;       // 0: resolve from the environment
  bool seed_set = false;
  std::uint64_t seed = 0;
};

namespace detail {

inline int env_threads() {
  const char* s = std::getenv("CRVKIT_THREADS");
  if (!s || !*s) return 0;
  char* end = nullptr;
  const long v = std::strtol(s, &end, 10);
  if (*end != '\0' || v < 1 || v > 4096)
    throw Error(ErrorCode::ConfigError, "CRVKIT_THREADS must be a positive integer");
  return static_cast<int>(v);
}

inline void write_text_output(const std::string& text, const std::string& path,
                              std::ostream& fallback) {
  if (path.empty()) {
    fallback << text;
    fallback.flush();
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::DataError, "cannot write output file '" + path + "'");
  f << text;
  f.flush();
  if (!f) throw Error(ErrorCode::DataError, "failed while writing '" + path + "'");
}

}  // namespace detail

inline int run_command(const std::string& command, const RunOptions& opts, std::ostream& out,
                       std::ostream& err) {
  try {
    RunConfig cfg = load_config(opts.config_path, command);
    std::string text;
    if (cfg.command == "simulate") {
      int threads = opts.threads;
      if (threads <= 0) threads = detail::env_threads();
      cfg.sim.experiment.threads = threads > 0 ? threads : 1;
      if (opts.seed_set) cfg.sim.experiment.seed = opts.seed;
      text = render_csv(run_simulate(cfg));
    } else {
      const OrderedJson rep = cfg.command == "fit" ? run_fit(cfg) : run_test(cfg);
      text = cfg.analysis.output == "json" ? serialize_report(rep)
                                           : render_csv(report_table(rep));
    }
    detail::write_text_output(text, opts.out_path, out);
    return 0;
  } catch (const Error& e) {
    OrderedJson diag;
    diag["error"] = {{"code", error_code_name(e.code())},
                     {"message", detail::error_message(e)}};
    err << serialize_report(diag);
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    OrderedJson diag;
    diag["error"] = {{"code", "Internal"}, {"message", e.what()}};
    err << serialize_report(diag);
    return 4;
  }
}

}  // namespace crvkit

#endif
